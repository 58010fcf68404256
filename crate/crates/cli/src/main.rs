mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use softshare::folding::{fold, fold_savings, lsm_timeseries, tie_network, verify_fold_equivalence};
use softshare::gradcheck::{run_suite, DEFAULT_STEP, DEFAULT_TOLERANCE};
use softshare::model::{
    build_shortest_path_model_with, build_wrn_cifar_spec, count_params, Network, Templates,
};
use softshare::sharing::LayerSimilarityMatrix;
use softshare::task::{
    batch_tensors, generate_dataset, load_dataset, phase_seed, save_dataset, Confusion,
    GridExample, DEFAULT_GRID, DEFAULT_OBSTACLE_P,
};
use softshare::train::{network_from_checkpoint, Checkpoint, Trainer};
use softshare::{Error, Result};

use config::{DataConfig, RunConfig};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const EVAL_BATCH: usize = 64;

#[derive(Parser)]
#[command(name = "softshare", version, about = "Soft parameter sharing experiments")]
struct Cli {
    /// Worker threads for data generation and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Wrn,
    Swrn,
    Scnn,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a shortest-path dataset file.
    GenData {
        #[arg(long)]
        phase: usize,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = DEFAULT_GRID)]
        grid: usize,
        #[arg(long, default_value_t = DEFAULT_OBSTACLE_P)]
        obstacle_p: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run curriculum training from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue a single-seed run from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Print the F1 score of a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference check of every differentiable primitive.
    Gradcheck {
        #[arg(long, default_value_t = DEFAULT_STEP)]
        eps: f64,
    },
    /// Export the layer similarity matrix of one sharing group.
    Lsm {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        group: usize,
        #[arg(long)]
        out_csv: Option<PathBuf>,
        #[arg(long)]
        out_pgm: Option<PathBuf>,
    },
    /// Tie similar layers and fold the result into a looped graph.
    Fold {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        tau: f64,
        #[arg(long)]
        out_dot: Option<PathBuf>,
        #[arg(long)]
        probe_data: Option<PathBuf>,
    },
    /// Count parameters of a WRN, shared WRN, or shortest-path SCNN.
    CountParams {
        #[arg(long, value_enum)]
        arch: Arch,
        #[arg(long)]
        depth: usize,
        /// Widen factor, or channel width for `scnn`.
        #[arg(long)]
        widen: usize,
        /// Templates per group: a positive integer or `per-layer`.
        #[arg(long)]
        templates: Option<String>,
        #[arg(long, default_value_t = 10)]
        classes: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    if cli.threads == 0 {
        return Err(Error::Usage("--threads must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global()
        .map_err(|e| Error::State(format!("thread pool: {e}")))?;
    match cli.command {
        Command::GenData {
            phase,
            count,
            grid,
            obstacle_p,
            out,
        } => gen_data(phase, count, grid, obstacle_p, cli.seed, &out),
        Command::Train { config, resume } => train(&config, resume.as_deref()),
        Command::Eval { ckpt, data } => eval(&ckpt, &data),
        Command::Gradcheck { eps } => gradcheck(cli.seed, eps),
        Command::Lsm {
            ckpt,
            group,
            out_csv,
            out_pgm,
        } => lsm(&ckpt, group, out_csv.as_deref(), out_pgm.as_deref()),
        Command::Fold {
            ckpt,
            tau,
            out_dot,
            probe_data,
        } => fold_cmd(&ckpt, tau, out_dot.as_deref(), probe_data.as_deref()),
        Command::CountParams {
            arch,
            depth,
            widen,
            templates,
            classes,
        } => count(arch, depth, widen, templates.as_deref(), classes),
    }
}

fn gen_data(
    phase: usize,
    count: usize,
    grid: usize,
    obstacle_p: f64,
    seed: u64,
    out: &Path,
) -> Result<ExitCode> {
    let examples = generate_dataset(phase, count, grid, obstacle_p, seed)?;
    save_dataset(out, &examples)?;
    let cells = (grid * grid) as f64;
    let density = if examples.is_empty() {
        0.0
    } else {
        examples.iter().map(|e| e.label_count() as f64 / cells).sum::<f64>() / count as f64
    };
    println!("examples {count}");
    println!("mean_label_density {density:.6}");
    Ok(ExitCode::SUCCESS)
}

fn phase_data(cfg: &RunConfig, seed: u64) -> Result<Vec<Vec<GridExample>>> {
    let phases = cfg.curriculum.phases;
    match &cfg.data {
        DataConfig::Files(files) => files.iter().map(|f| load_dataset(f)).collect(),
        DataConfig::Generate {
            grid,
            obstacle_p,
            seed: data_seed,
        } => (1..=phases)
            .map(|p| {
                let base = phase_seed(data_seed.unwrap_or(seed), p);
                generate_dataset(p, cfg.curriculum.examples_per_phase, *grid, *obstacle_p, base)
            })
            .collect(),
    }
}

fn train(config: &Path, resume: Option<&Path>) -> Result<ExitCode> {
    let cfg = RunConfig::load(config)?;
    if resume.is_some() && cfg.seeds.len() != 1 {
        return Err(Error::Usage("--resume needs a config with exactly one seed".into()));
    }
    for &seed in &cfg.seeds {
        let dir = cfg.out_dir.join(format!("seed-{seed}"));
        std::fs::create_dir_all(&dir)?;
        let data = phase_data(&cfg, seed)?;
        let mut trainer = match resume {
            Some(path) => Trainer::load_checkpoint(path)?,
            None => {
                let mut net = Network::new(cfg.architecture()?, cfg.init, seed)?;
                net.set_strategy(cfg.strategy);
                Trainer::new(net, cfg.train_config(seed))?
            }
        };
        let epochs = trainer.config.curriculum.epochs_per_phase;
        let metrics_path = dir.join("metrics.csv");
        trainer.run(&data, &mut |t, row| {
            println!(
                "seed {seed} phase {} epoch {} loss {:.6} val_f1 {:.4}",
                row.phase, row.epoch, row.train_loss, row.val_f1
            );
            std::fs::write(&metrics_path, t.metrics_csv())?;
            if row.epoch > 0 && t.position.epoch_in_phase == epochs {
                t.save_checkpoint(&dir.join(format!("phase{}.ckpt", row.phase)))?;
            }
            Ok(true)
        })?;
        std::fs::write(&metrics_path, trainer.metrics_csv())?;
        trainer.save_checkpoint(&dir.join("final.ckpt"))?;
        let mut lsm = String::new();
        for record in lsm_timeseries(&trainer.lsm_snapshots)? {
            lsm.push_str(&serde_json::to_string(&record)?);
            lsm.push('\n');
        }
        std::fs::write(dir.join("lsm.jsonl"), lsm)?;
        println!("wrote {}", dir.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn f1_on(net: &Network, data: &[GridExample]) -> Result<f64> {
    let confusion = data
        .par_chunks(EVAL_BATCH)
        .map(|chunk| {
            let refs: Vec<&GridExample> = chunk.iter().collect();
            let (x, y) = batch_tensors(&refs)?;
            Confusion::from_logits(&net.predict(&x)?, &y)
        })
        .try_reduce(Confusion::default, |a, b| Ok(a.merge(b)))?;
    Ok(confusion.f1())
}

fn eval(ckpt: &Path, data: &Path) -> Result<ExitCode> {
    let net = network_from_checkpoint(&Checkpoint::load(ckpt)?)?;
    let examples = load_dataset(data)?;
    if examples.is_empty() {
        return Err(Error::Usage(format!("{} holds no examples", data.display())));
    }
    println!("examples {}", examples.len());
    println!("f1 {:.6}", f1_on(&net, &examples)?);
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(seed: u64, eps: f64) -> Result<ExitCode> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Usage(format!("--eps must be positive, got {eps}")));
    }
    let mut failed = 0;
    for r in run_suite(seed, eps)? {
        let ok = r.passed(DEFAULT_TOLERANCE);
        failed += usize::from(!ok);
        println!(
            "{:<28} {:>6} elements  max rel err {:.3e}  {}",
            r.name,
            r.checked,
            r.max_rel_error,
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failed > 0 {
        eprintln!("{failed} gradient checks exceeded {DEFAULT_TOLERANCE:e}");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn lsm_csv(s: &LayerSimilarityMatrix) -> String {
    let mut out = String::new();
    for i in 0..s.size() {
        let row: Vec<String> = (0..s.size()).map(|j| format!("{:.8e}", s.get(i, j))).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

fn lsm_pgm(s: &LayerSimilarityMatrix) -> String {
    let n = s.size();
    let mut out = format!("P2\n{n} {n}\n255\n");
    for i in 0..n {
        let row: Vec<String> = (0..n)
            .map(|j| ((255.0 * s.get(i, j)).round().clamp(0.0, 255.0) as u8).to_string())
            .collect();
        let _ = writeln!(out, "{}", row.join(" "));
    }
    out
}

fn lsm(ckpt: &Path, group: usize, csv: Option<&Path>, pgm: Option<&Path>) -> Result<ExitCode> {
    let net = network_from_checkpoint(&Checkpoint::load(ckpt)?)?;
    let g = net.groups().iter().find(|g| g.id == group).ok_or_else(|| {
        let ids: Vec<usize> = net.groups().iter().map(|g| g.id).collect();
        Error::Usage(format!("no sharing group {group} (groups: {ids:?})"))
    })?;
    let s = g.lsm()?;
    match csv {
        Some(p) => std::fs::write(p, lsm_csv(&s))?,
        None if pgm.is_none() => print!("{}", lsm_csv(&s)),
        None => {}
    }
    if let Some(p) = pgm {
        std::fs::write(p, lsm_pgm(&s))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn fold_cmd(ckpt: &Path, tau: f64, dot: Option<&Path>, probe: Option<&Path>) -> Result<ExitCode> {
    let original = network_from_checkpoint(&Checkpoint::load(ckpt)?)?;
    if original.groups().is_empty() {
        return Err(Error::Usage("checkpoint has no sharing groups".into()));
    }
    let mut tied = original.clone();
    let ties = tie_network(&mut tied, tau)?;
    let mut graphs = String::new();
    for (t, g) in ties.iter().zip(tied.groups()) {
        let graph = fold(t)?;
        let saved = fold_savings(g, t);
        println!(
            "group {}: {} layers, {} clusters, {} kernel parameters saved",
            t.group, saved.layers, saved.clusters, saved.kernel_params_saved
        );
        for (body, count) in graph.loops() {
            println!("  loop {body:?} x{count}");
        }
        graphs.push_str(&graph.to_dot(&format!("{}-group{}", original.spec().name, t.group)));
    }
    match dot {
        Some(p) => std::fs::write(p, &graphs)?,
        None => print!("{graphs}"),
    }
    if let Some(p) = probe {
        let probe = load_dataset(p)?;
        let r = verify_fold_equivalence(&original, &tied, &probe, EVAL_BATCH)?;
        println!("max_output_diff {:e}", r.max_output_diff);
        println!("f1_original {:.6}", r.f1_original);
        println!("f1_tied {:.6}", r.f1_tied);
        println!("f1_delta {:.6}", r.metric_delta);
    }
    Ok(ExitCode::SUCCESS)
}

fn count(
    arch: Arch,
    depth: usize,
    widen: usize,
    templates: Option<&str>,
    classes: usize,
) -> Result<ExitCode> {
    let templates = templates.map(str::parse::<Templates>).transpose()?;
    let spec = match arch {
        Arch::Wrn => {
            if templates.is_some() {
                return Err(Error::Usage("--templates does not apply to `wrn`".into()));
            }
            build_wrn_cifar_spec(depth, widen, None, classes)?
        }
        Arch::Swrn => {
            let t = templates
                .ok_or_else(|| Error::Usage("`swrn` needs --templates".into()))?;
            build_wrn_cifar_spec(depth, widen, Some(t), classes)?
        }
        Arch::Scnn => {
            if depth == 0 || widen == 0 {
                return Err(Error::Usage("scnn depth and width must be positive".into()));
            }
            let k = match templates {
                None | Some(Templates::PerLayer) => depth,
                Some(Templates::Count(k)) => k,
            };
            build_shortest_path_model_with(Some(k), depth, widen)
        }
    };
    let report = count_params(&spec)?;
    println!("{}", spec.name);
    println!("{report}");
    Ok(ExitCode::SUCCESS)
}
