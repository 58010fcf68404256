//! Hard sharing extracted from trained coefficients: tying similar layers,
//! compressing the tied layer sequence into loops, and checking that the
//! tied network still computes the same function.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::autodiff::BN_EPS;
use crate::model::{LayerKind, Network};
use crate::sharing::{LayerSimilarityMatrix, SharingGroup};
use crate::task::{batch_tensors, Confusion, GridExample};
use crate::tensor::Tensor;

/// Cluster membership of each layer of one sharing group (indices are
/// positions within the group).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TieAssignment {
    pub group: usize,
    pub tau: f64,
    /// Representative (earliest member) of each layer's cluster.
    pub representative: Vec<usize>,
    /// Cluster id of each layer, numbered in order of first appearance.
    pub cluster: Vec<usize>,
    /// `+1` or `-1`, relative to the representative.
    pub sign: Vec<i8>,
}

impl TieAssignment {
    pub fn cluster_count(&self) -> usize {
        self.cluster.iter().max().map_or(0, |&m| m + 1)
    }

    /// Layers whose coefficients are replaced by tying.
    pub fn tied_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.representative
            .iter()
            .enumerate()
            .filter(|(i, &r)| *i != r)
            .map(|(i, _)| i)
    }
}

/// Greedy clustering in layer order: each layer joins the earliest cluster
/// whose representative has similarity at least `tau` with it.
pub fn tie_layers(
    group: &SharingGroup,
    s: &LayerSimilarityMatrix,
    tau: f64,
) -> Result<TieAssignment> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Usage(format!("tau must lie in (0, 1], got {tau}")));
    }
    if s.size() != group.len() {
        return Err(Error::Dimension(format!(
            "LSM is {0}x{0} but group {1} has {2} layers",
            s.size(),
            group.id,
            group.len()
        )));
    }
    let mut reps: Vec<usize> = Vec::new();
    let mut representative = Vec::with_capacity(group.len());
    let mut cluster = Vec::with_capacity(group.len());
    let mut sign = Vec::with_capacity(group.len());
    for j in 0..group.len() {
        match reps.iter().position(|&r| s.get(r, j) >= tau) {
            Some(c) => {
                let r = reps[c];
                representative.push(r);
                cluster.push(c);
                sign.push(if s.sign(r, j) < 0 { -1 } else { 1 });
            }
            None => {
                representative.push(j);
                cluster.push(reps.len());
                sign.push(1);
                reps.push(j);
            }
        }
    }
    Ok(TieAssignment {
        group: group.id,
        tau,
        representative,
        cluster,
        sign,
    })
}

/// Overwrites every tied layer's coefficients with `sign · α(representative)`.
pub fn apply_ties(group: &mut SharingGroup, ties: &TieAssignment) -> Result<()> {
    if ties.group != group.id || ties.representative.len() != group.len() {
        return Err(Error::Dimension(format!(
            "tie assignment for group {} ({} layers) applied to group {} ({} layers)",
            ties.group,
            ties.representative.len(),
            group.id,
            group.len()
        )));
    }
    for j in ties.tied_layers().collect::<Vec<_>>() {
        let r = ties.representative[j];
        let s = ties.sign[j] as f64;
        let src: Vec<f64> = group.coefficients.row(r).iter().map(|v| s * v).collect();
        group.coefficients.row_mut(j).copy_from_slice(&src);
    }
    Ok(())
}

/// Ties every sharing group of `net` at threshold `tau`, returning the
/// assignments in group order.
///
/// A tie can change a kernel's scale as well as its direction. When a tied
/// convolution feeds only the batch norm right after it, that layer's running
/// statistics are rescaled per channel by the least-squares factor between the
/// new and old kernels, so eval-mode outputs keep the scale invariance that
/// training-mode normalization has.
pub fn tie_network(net: &mut Network, tau: f64) -> Result<Vec<TieAssignment>> {
    let mut out = Vec::new();
    for gi in 0..net.groups().len() {
        let g = &net.groups()[gi];
        let lsm = g.lsm()?;
        let ties = tie_layers(g, &lsm, tau)?;
        let tied: Vec<usize> = ties.tied_layers().collect();
        let old = tied
            .iter()
            .map(|&j| g.effective_weights(j))
            .collect::<Result<Vec<_>>>()?;
        apply_ties(&mut net.groups_mut()[gi], &ties)?;
        for (&j, old) in tied.iter().zip(&old) {
            let new = net.groups()[gi].effective_weights(j)?;
            let layer = net.groups()[gi].members[j];
            compensate_bn(net, layer, old, &new);
        }
        out.push(ties);
    }
    Ok(out)
}

/// Rescales the running statistics of the batch norm consuming conv `layer`
/// after its kernel changed from `old` to `new`.
fn compensate_bn(net: &mut Network, layer: usize, old: &Tensor, new: &Tensor) {
    let spec = net.spec();
    let biased = matches!(spec.layers[layer].kind, LayerKind::Conv { bias: true, .. });
    let next_is_bn = spec.layers.get(layer + 1).is_some_and(|l| l.kind == LayerKind::Bn);
    let skipped = spec
        .layers
        .iter()
        .any(|l| matches!(l.kind, LayerKind::SkipAdd { from, .. } if from == layer + 1));
    if biased || !next_is_bn || skipped {
        return;
    }
    let per_out = old.numel() / old.shape()[0];
    let factors: Vec<f64> = old
        .data()
        .chunks_exact(per_out)
        .zip(new.data().chunks_exact(per_out))
        .map(|(o, n)| {
            let dot: f64 = o.iter().zip(n).map(|(a, b)| a * b).sum();
            let norm: f64 = o.iter().map(|a| a * a).sum();
            let c = dot / norm;
            if c > 0.0 && c.is_finite() {
                c
            } else {
                1.0
            }
        })
        .collect();
    if let Some((_, stats)) = net.running_stats_mut().find(|(i, _)| *i == layer + 1) {
        for ((m, v), c) in stats.mean.iter_mut().zip(stats.var.iter_mut()).zip(factors) {
            *m *= c;
            // Keeps sqrt(var + eps) exactly proportional to the kernel scale.
            *v = c * c * (*v + BN_EPS) - BN_EPS;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Segment {
    Plain { node: usize },
    Loop { body: Vec<usize>, count: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Endpoint {
    Input,
    Node(usize),
    Output,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub from: Endpoint,
    pub to: Endpoint,
    /// How many times the unrolled sequence traverses this edge.
    pub count: usize,
    /// Input multiplier applied when entering `to` (`-1` for sign-flipped ties).
    pub multiplier: i8,
}

/// Unique cluster nodes plus the loop structure of the cluster sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldedGraph {
    /// Cluster ids in order of first appearance.
    pub nodes: Vec<usize>,
    pub segments: Vec<Segment>,
    pub edges: Vec<Edge>,
}

impl FoldedGraph {
    pub fn unroll(&self) -> Vec<usize> {
        let mut seq = Vec::new();
        for seg in &self.segments {
            match seg {
                Segment::Plain { node } => seq.push(*node),
                Segment::Loop { body, count } => {
                    for _ in 0..*count {
                        seq.extend_from_slice(body);
                    }
                }
            }
        }
        seq
    }

    pub fn loops(&self) -> impl Iterator<Item = (&[usize], usize)> {
        self.segments.iter().filter_map(|s| match s {
            Segment::Loop { body, count } => Some((body.as_slice(), *count)),
            Segment::Plain { .. } => None,
        })
    }

    /// Graphviz rendering. Loop back-edges are labelled `xN`; edges entering
    /// a sign-flipped visit are labelled with the `-1` multiplier.
    pub fn to_dot(&self, name: &str) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "digraph \"{name}\" {{");
        let _ = writeln!(out, "  rankdir=LR;");
        let _ = writeln!(out, "  input [shape=box];");
        for n in &self.nodes {
            let _ = writeln!(out, "  c{n} [label=\"layer {n}\"];");
        }
        let _ = writeln!(out, "  output [shape=box];");
        let id = |e: Endpoint| match e {
            Endpoint::Input => "input".to_string(),
            Endpoint::Node(n) => format!("c{n}"),
            Endpoint::Output => "output".to_string(),
        };
        let mut emitted: Vec<(Endpoint, Endpoint, i8)> = Vec::new();
        let mut prev = Endpoint::Input;
        let mut forward = |out: &mut String, from: Endpoint, to: Endpoint, mult: i8| {
            if emitted.contains(&(from, to, mult)) {
                return;
            }
            emitted.push((from, to, mult));
            if mult < 0 {
                let _ = writeln!(out, "  {} -> {} [label=\"-1\"];", id(from), id(to));
            } else {
                let _ = writeln!(out, "  {} -> {};", id(from), id(to));
            }
        };
        for seg in &self.segments {
            match seg {
                Segment::Plain { node } => {
                    let to = Endpoint::Node(*node);
                    forward(&mut out, prev, to, self.multiplier(prev, to));
                    prev = to;
                }
                Segment::Loop { body, count } => {
                    let first = Endpoint::Node(body[0]);
                    forward(&mut out, prev, first, self.multiplier(prev, first));
                    for w in body.windows(2) {
                        let (a, b) = (Endpoint::Node(w[0]), Endpoint::Node(w[1]));
                        forward(&mut out, a, b, self.multiplier(a, b));
                    }
                    let last = Endpoint::Node(*body.last().expect("nonempty body"));
                    let flip = if self.multiplier(last, first) < 0 { " (-1)" } else { "" };
                    let _ = writeln!(
                        out,
                        "  {} -> {} [label=\"x{count}{flip}\", style=bold];",
                        id(last),
                        id(first)
                    );
                    prev = last;
                }
            }
        }
        forward(&mut out, prev, Endpoint::Output, 1);
        out.push_str("}\n");
        out
    }

    fn multiplier(&self, from: Endpoint, to: Endpoint) -> i8 {
        let flipped = self
            .edges
            .iter()
            .any(|e| e.from == from && e.to == to && e.multiplier < 0);
        if flipped {
            -1
        } else {
            1
        }
    }
}

/// Greedy left-to-right loop compression. At each position the period `p`
/// with `r ≥ 2` consecutive repeats covering the longest span `p·r` wins,
/// ties going to the smallest period; otherwise one plain node is emitted.
pub fn detect_loops(sequence: &[usize]) -> Result<FoldedGraph> {
    detect_loops_signed(sequence, &vec![1; sequence.len()])
}

/// [`detect_loops`] with a per-visit input multiplier recorded on edges.
pub fn detect_loops_signed(sequence: &[usize], signs: &[i8]) -> Result<FoldedGraph> {
    if sequence.is_empty() {
        return Err(Error::Usage("cannot fold an empty layer sequence".into()));
    }
    if signs.len() != sequence.len() {
        return Err(Error::Dimension(format!(
            "{} signs for a sequence of {}",
            signs.len(),
            sequence.len()
        )));
    }
    // Visits only repeat when both the cluster and the sign repeat.
    let symbols: Vec<(usize, i8)> = sequence
        .iter()
        .zip(signs)
        .map(|(&c, &s)| (c, if s < 0 { -1 } else { 1 }))
        .collect();
    let n = sequence.len();
    let mut segments = Vec::new();
    let mut pos = 0;
    while pos < n {
        let mut best: Option<(usize, usize)> = None;
        for p in 1..=(n - pos) / 2 {
            let body = &symbols[pos..pos + p];
            let mut r = 1;
            while pos + (r + 1) * p <= n && &symbols[pos + r * p..pos + (r + 1) * p] == body {
                r += 1;
            }
            if r >= 2 && best.is_none_or(|(bp, br)| p * r > bp * br) {
                best = Some((p, r));
            }
        }
        match best {
            Some((p, r)) => {
                segments.push(Segment::Loop {
                    body: sequence[pos..pos + p].to_vec(),
                    count: r,
                });
                pos += p * r;
            }
            None => {
                segments.push(Segment::Plain {
                    node: sequence[pos],
                });
                pos += 1;
            }
        }
    }
    let mut nodes = Vec::new();
    for &c in sequence {
        if !nodes.contains(&c) {
            nodes.push(c);
        }
    }
    let mut edges: Vec<Edge> = Vec::new();
    let mut bump = |from: Endpoint, to: Endpoint, multiplier: i8| {
        match edges
            .iter_mut()
            .find(|e| e.from == from && e.to == to && e.multiplier == multiplier)
        {
            Some(e) => e.count += 1,
            None => edges.push(Edge {
                from,
                to,
                count: 1,
                multiplier,
            }),
        }
    };
    let mut prev = Endpoint::Input;
    for (&c, &s) in sequence.iter().zip(signs) {
        bump(prev, Endpoint::Node(c), if s < 0 { -1 } else { 1 });
        prev = Endpoint::Node(c);
    }
    bump(prev, Endpoint::Output, 1);
    Ok(FoldedGraph {
        nodes,
        segments,
        edges,
    })
}

pub fn fold(ties: &TieAssignment) -> Result<FoldedGraph> {
    detect_loops_signed(&ties.cluster, &ties.sign)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub max_output_diff: f64,
    pub f1_original: f64,
    pub f1_tied: f64,
    /// `f1_tied - f1_original`.
    pub metric_delta: f64,
}

/// Runs both networks in eval mode on `probe` and compares logits and F1.
pub fn verify_fold_equivalence(
    original: &Network,
    tied: &Network,
    probe: &[GridExample],
    batch_size: usize,
) -> Result<FoldReport> {
    let shapes = |n: &Network| {
        n.params()
            .iter()
            .map(|(name, _, t)| (name.clone(), t.shape().to_vec()))
            .collect::<Vec<_>>()
    };
    if original.spec().layers != tied.spec().layers || shapes(original) != shapes(tied) {
        return Err(Error::Dimension(
            "original and tied networks have different architectures".into(),
        ));
    }
    if probe.is_empty() {
        return Err(Error::Usage("probe data is empty".into()));
    }
    let mut max_diff: f64 = 0.0;
    let (mut c_orig, mut c_tied) = (Confusion::default(), Confusion::default());
    for chunk in probe.chunks(batch_size.max(1)) {
        let refs: Vec<&GridExample> = chunk.iter().collect();
        let (x, y) = batch_tensors(&refs)?;
        let a = original.predict(&x)?;
        let b = tied.predict(&x)?;
        max_diff = max_diff.max(a.max_abs_diff(&b)?);
        c_orig = c_orig.merge(Confusion::from_logits(&a, &y)?);
        c_tied = c_tied.merge(Confusion::from_logits(&b, &y)?);
    }
    let (f1_original, f1_tied) = (c_orig.f1(), c_tied.f1());
    Ok(FoldReport {
        max_output_diff: max_diff,
        f1_original,
        f1_tied,
        metric_delta: f1_tied - f1_original,
    })
}

/// Parameters saved by hard-tying: every tied layer no longer needs its own
/// coefficient row and, after folding, its own generated kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSavings {
    pub layers: usize,
    pub clusters: usize,
    /// Kernel elements no longer materialized once the layers are folded.
    pub kernel_params_saved: usize,
}

pub fn fold_savings(group: &SharingGroup, ties: &TieAssignment) -> FoldSavings {
    let kernel: usize = group.bank.shape().iter().product();
    let clusters = ties.cluster_count();
    FoldSavings {
        layers: group.len(),
        clusters,
        kernel_params_saved: (group.len() - clusters) * kernel,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsmRecord {
    pub epoch: usize,
    pub group: usize,
    pub size: usize,
    pub offdiag_mean: f64,
    pub offdiag_min: f64,
    pub values: Vec<f64>,
}

/// Flattens epoch-tagged LSM snapshots into export records, in input order.
pub fn lsm_timeseries(snapshots: &[(usize, LayerSimilarityMatrix)]) -> Result<Vec<LsmRecord>> {
    if let Some(w) = snapshots.windows(2).find(|w| w[1].0 < w[0].0) {
        return Err(Error::Usage(format!(
            "LSM snapshots must be in ascending epoch order ({} after {})",
            w[1].0, w[0].0
        )));
    }
    Ok(snapshots
        .iter()
        .map(|(epoch, s)| LsmRecord {
            epoch: *epoch,
            group: s.group,
            size: s.size(),
            offdiag_mean: s.offdiag_mean(),
            offdiag_min: s.offdiag_min(),
            values: s.values().to_vec(),
        })
        .collect())
}
