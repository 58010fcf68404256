use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use softshare::autodiff::Tape;
use softshare::folding::{
    detect_loops, detect_loops_signed, fold, tie_layers, tie_network, verify_fold_equivalence,
};
use softshare::model::{build_shortest_path_model, ArchitectureSpec, GroupSpec, LayerSpec, Network};
use softshare::sharing::{compute_lsm, CoefficientInit, CoefficientMatrix, SharingGroup, TemplateBank};
use softshare::task::{generate_dataset, CurriculumSpec};
use softshare::train::{OptimizerConfig, TrainConfig, Trainer};
use softshare::Tensor;

fn toy_group(rows: &[Vec<f64>]) -> SharingGroup {
    let k = rows[0].len();
    let bank = TemplateBank::new((0..k).map(|_| Tensor::ones(&[1, 1, 1, 1])).collect()).unwrap();
    SharingGroup::new(0, bank, CoefficientMatrix::from_rows(rows).unwrap(), (0..rows.len()).collect()).unwrap()
}

fn clusters_at(rows: &[Vec<f64>], tau: f64) -> usize {
    let g = toy_group(rows);
    tie_layers(&g, &compute_lsm(&g.coefficients).unwrap(), tau)
        .unwrap()
        .cluster_count()
}

proptest! {
    #[test]
    fn unroll_inverts_loop_detection(seq in prop::collection::vec(0usize..4, 1..40)) {
        prop_assert_eq!(detect_loops(&seq).unwrap().unroll(), seq);
    }

    #[test]
    fn signed_unroll_and_edge_traffic(
        visits in prop::collection::vec((0usize..3, any::<bool>()), 1..30),
    ) {
        let seq: Vec<usize> = visits.iter().map(|v| v.0).collect();
        let signs: Vec<i8> = visits.iter().map(|v| if v.1 { -1 } else { 1 }).collect();
        let g = detect_loops_signed(&seq, &signs).unwrap();
        prop_assert_eq!(g.unroll(), seq.clone());
        // One edge traversal per visit plus the exit.
        prop_assert_eq!(g.edges.iter().map(|e| e.count).sum::<usize>(), seq.len() + 1);
        let flipped: usize = g.edges.iter().filter(|e| e.multiplier < 0).map(|e| e.count).sum();
        prop_assert_eq!(flipped, signs.iter().filter(|&&s| s < 0).count());
    }

    #[test]
    fn well_separated_clusters_are_recovered(
        seed in any::<u64>(),
        assignment in prop::collection::vec(0usize..4, 1..12),
        tau in 0.5f64..0.95,
    ) {
        // Members sit within ~1.2 degrees of orthogonal centres, so every
        // within-cluster |cos| exceeds 0.999 and every cross-cluster |cos|
        // stays below 0.05.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = assignment
            .iter()
            .map(|&c| {
                let s = if rng.random::<bool>() { -1.0 } else { 1.0 };
                let scale = rng.random_range(0.1..10.0);
                (0..4)
                    .map(|j| scale * (s * f64::from(j == c) + rng.random_range(-0.01..0.01)))
                    .collect()
            })
            .collect();
        let g = toy_group(&rows);
        let ties = tie_layers(&g, &compute_lsm(&g.coefficients).unwrap(), tau).unwrap();
        for i in 0..rows.len() {
            for j in 0..rows.len() {
                prop_assert_eq!(ties.cluster[i] == ties.cluster[j], assignment[i] == assignment[j]);
            }
        }
        let strict = clusters_at(&rows, 0.9999);
        prop_assert!(strict >= ties.cluster_count());
    }
}

#[test]
fn greedy_clustering_is_not_monotone_in_tau() {
    // Row 1 lies 33 degrees from row 0; rows 2 and 3 lie 24 degrees either
    // side of row 1, about 40 degrees from row 0 and 48 from each other.
    let (a, b) = (33f64.to_radians(), 24f64.to_radians());
    let r1 = [a.sin(), 0.0, a.cos()];
    let side = |s: f64| vec![b.cos() * r1[0], s * b.sin(), b.cos() * r1[2]];
    let rows = vec![vec![0.0, 0.0, 1.0], r1.to_vec(), side(1.0), side(-1.0)];
    let high = 25f64.to_radians().cos();
    let low = 35f64.to_radians().cos();
    assert!(low < high);
    assert_eq!(clusters_at(&rows, high), 2);
    assert_eq!(clusters_at(&rows, low), 3);
}

fn probe() -> Vec<softshare::task::GridExample> {
    generate_dataset(2, 24, 8, 0.1, 99).unwrap()
}

fn set_rows(net: &mut Network, rows: &[Vec<f64>]) {
    let g = &mut net.groups_mut()[0];
    for (i, r) in rows.iter().enumerate() {
        g.coefficients.row_mut(i).copy_from_slice(r);
    }
}

#[test]
fn exact_duplicates_tie_without_changing_outputs() {
    let mut net = Network::new(build_shortest_path_model(true, 4, 4), CoefficientInit::Orthogonal, 3).unwrap();
    set_rows(&mut net, &[vec![0.3, -1.0, 0.2, 0.5], vec![0.3, -1.0, 0.2, 0.5], vec![-0.3, 1.0, -0.2, -0.5], vec![1.0, 0.0, 0.4, 0.0]]);
    let mut tied = net.clone();
    let ties = tie_network(&mut tied, 0.999).unwrap();
    assert_eq!(ties[0].cluster, vec![0, 0, 0, 1]);
    assert_eq!(ties[0].sign, vec![1, 1, -1, 1]);
    let report = verify_fold_equivalence(&net, &tied, &probe(), 8).unwrap();
    assert!(report.max_output_diff <= 1e-12, "{}", report.max_output_diff);
    assert_eq!(report.metric_delta, 0.0);
}

#[test]
fn rescaled_rows_tie_through_batch_norm_compensation() {
    let mut net = Network::new(build_shortest_path_model(true, 3, 4), CoefficientInit::Orthogonal, 8).unwrap();
    let base = [0.6, -0.2, 0.9];
    set_rows(&mut net, &[base.to_vec(), base.iter().map(|v| -2.5 * v).collect(), base.iter().map(|v| 0.1 * v).collect()]);
    for (_, stats) in net.running_stats_mut() {
        stats.mean.iter_mut().enumerate().for_each(|(i, m)| *m = 0.1 * i as f64 - 0.2);
        stats.var.iter_mut().enumerate().for_each(|(i, v)| *v = 0.5 + 0.3 * i as f64);
    }
    let mut tied = net.clone();
    let ties = tie_network(&mut tied, 0.999).unwrap();
    assert_eq!(ties[0].cluster_count(), 1);
    let g = &tied.groups()[0];
    let rep = g.effective_weights(0).unwrap();
    for j in 1..3 {
        let w = g.effective_weights(j).unwrap();
        let s = f64::from(ties[0].sign[j]);
        assert!(w.max_abs_diff(&rep.map(|v| s * v)).unwrap() <= 1e-12);
    }
    let report = verify_fold_equivalence(&net, &tied, &probe(), 8).unwrap();
    assert!(report.max_output_diff <= 1e-10, "{}", report.max_output_diff);
}

#[test]
fn strict_threshold_ties_nothing() {
    let net = Network::new(build_shortest_path_model(true, 5, 4), CoefficientInit::Orthogonal, 1).unwrap();
    let mut tied = net.clone();
    let ties = tie_network(&mut tied, 1.0 - 1e-9).unwrap();
    assert_eq!(ties[0].cluster_count(), 5);
    let report = verify_fold_equivalence(&net, &tied, &probe(), 8).unwrap();
    assert_eq!(report.max_output_diff, 0.0);
}

/// Conv-only chain, so the folded graph can be replayed by hand: each visit
/// uses its cluster representative's kernel with the edge multiplier applied
/// to the incoming activation.
#[test]
fn folded_linear_chain_replays_with_sign_multipliers() {
    let layers = (0..5)
        .map(|_| LayerSpec {
            group: Some(0),
            ..LayerSpec::conv(3, 2, 2)
        })
        .collect();
    let spec = ArchitectureSpec {
        name: "linear-chain".into(),
        input_channels: 2,
        layers,
        groups: vec![GroupSpec { id: 0, templates: 2 }],
    };
    let mut net = Network::new(spec, CoefficientInit::Orthogonal, 6).unwrap();
    let a = vec![0.8, -0.3];
    let neg: Vec<f64> = a.iter().map(|v| -v).collect();
    set_rows(&mut net, &[a.clone(), neg.clone(), vec![0.1, 1.0], a, neg]);
    let mut tied = net.clone();
    let ties = tie_network(&mut tied, 0.999).unwrap().remove(0);
    let graph = fold(&ties).unwrap();
    assert_eq!(graph.unroll(), vec![0, 0, 1, 0, 0]);
    assert_eq!(graph.nodes, vec![0, 1]);

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::randn(&[2, 2, 6, 5], 1.0, &mut rng);
    let reference = net.predict(&x).unwrap();
    let group = &tied.groups()[0];
    let mut tape = Tape::new();
    let mut h = tape.constant(x);
    for (j, &r) in ties.representative.iter().enumerate() {
        if ties.sign[j] < 0 {
            h = tape.scale(h, -1.0).unwrap();
        }
        let k = tape.constant(group.effective_weights(r).unwrap());
        h = tape.conv2d(h, k, 1).unwrap();
    }
    assert!(tape.value(h).max_abs_diff(&reference).unwrap() <= 1e-10);
}

#[test]
fn regularized_lsm_rises_over_training() {
    let net = Network::new(build_shortest_path_model(true, 4, 4), CoefficientInit::Orthogonal, 12).unwrap();
    let curriculum = CurriculumSpec {
        phases: 1,
        examples_per_phase: 40,
        epochs_per_phase: 10,
    };
    let mut cfg = TrainConfig::new(curriculum, OptimizerConfig::adam(0.01), 1.0, 12);
    cfg.batch_size = 8;
    let data = vec![generate_dataset(1, 40, 8, 0.1, 12).unwrap()];
    let mut t = Trainer::new(net, cfg).unwrap();
    t.run(&data, &mut |_, _| Ok(true)).unwrap();
    let series: Vec<f64> = t.history.iter().map(|r| r.lsm_offdiag_mean.unwrap()).collect();
    assert!(series[0].abs() <= 1e-10);
    assert!(series.windows(2).all(|w| w[1] >= w[0] - 0.05), "{series:?}");
    assert!(series.last().unwrap() > &0.5, "{series:?}");
}
