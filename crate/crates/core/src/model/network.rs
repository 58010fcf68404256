//! Instantiated parameters for an [`ArchitectureSpec`] and its forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, RunningStats, Tape, Var, BN_EPS};
use crate::error::{Error, Result};
use crate::model::spec::{ArchitectureSpec, LayerKind};
use crate::sharing::{
    init_coefficients, kaiming_std, shared_conv_forward, BoundGroup, CoefficientInit,
    ConvStrategy, SharingGroup, TemplateBank,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamKind {
    Weight,
    Bias,
    /// Sharing coefficients α.
    Coefficient,
    Norm,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    None,
    Conv {
        /// `None` when the kernel is generated by a sharing group.
        kernel: Option<Tensor>,
        bias: Option<Tensor>,
    },
    Bn {
        gamma: Tensor,
        beta: Tensor,
    },
    Projection {
        kernel: Tensor,
    },
    Linear {
        weight: Tensor,
        bias: Option<Tensor>,
    },
}

#[derive(Clone, Debug)]
enum LayerVars {
    None,
    Conv { kernel: Option<Var>, bias: Option<Var> },
    Bn { gamma: Var, beta: Var },
    Projection { kernel: Var },
    Linear,
}

/// A network's parameters recorded on one tape, in [`Network::params`] order.
#[derive(Clone, Debug)]
pub struct BoundNetwork {
    pub params: Vec<Var>,
    pub groups: Vec<BoundGroup>,
    layers: Vec<LayerVars>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: ArchitectureSpec,
    layers: Vec<LayerParams>,
    groups: Vec<SharingGroup>,
    /// Running statistics, one entry per layer (`None` for non-BN layers).
    stats: Vec<Option<RunningStats>>,
    /// Member position within its group for each grouped conv layer.
    group_slot: Vec<Option<(usize, usize)>>,
    strategy: ConvStrategy,
}

impl Network {
    /// He-normal kernels, unit/zero BN affine, zero biases, and coefficients
    /// from `init`. Running statistics start at zero mean and unit variance.
    pub fn new(spec: ArchitectureSpec, init: CoefficientInit, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut channels = vec![spec.input_channels];
        channels.extend(spec.layers.iter().map(|l| l.out_channels));
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut stats = Vec::with_capacity(spec.layers.len());
        for layer in &spec.layers {
            let (params, st) = match layer.kind {
                LayerKind::Conv { bias, .. } => {
                    let shape = layer.kernel_shape().expect("conv");
                    let kernel = layer
                        .group
                        .is_none()
                        .then(|| Tensor::randn(&shape, kaiming_std(&shape), &mut rng));
                    let bias = bias.then(|| Tensor::zeros(&[layer.out_channels]));
                    (LayerParams::Conv { kernel, bias }, None)
                }
                LayerKind::Bn => (
                    LayerParams::Bn {
                        gamma: Tensor::ones(&[layer.out_channels]),
                        beta: Tensor::zeros(&[layer.out_channels]),
                    },
                    Some(RunningStats::standard(layer.out_channels)),
                ),
                LayerKind::Relu => (LayerParams::None, None),
                LayerKind::SkipAdd { from, projection } => {
                    if projection {
                        let shape = [layer.out_channels, channels[from], 1, 1];
                        let kernel = Tensor::randn(&shape, kaiming_std(&shape), &mut rng);
                        (LayerParams::Projection { kernel }, None)
                    } else {
                        (LayerParams::None, None)
                    }
                }
                LayerKind::Linear { bias } => {
                    let shape = [layer.out_channels, layer.in_channels];
                    let std = (1.0 / layer.in_channels as f64).sqrt();
                    (
                        LayerParams::Linear {
                            weight: Tensor::randn(&shape, std, &mut rng),
                            bias: bias.then(|| Tensor::zeros(&[layer.out_channels])),
                        },
                        None,
                    )
                }
            };
            layers.push(params);
            stats.push(st);
        }
        let mut groups = Vec::with_capacity(spec.groups.len());
        let mut group_slot = vec![None; spec.layers.len()];
        for (gi, g) in spec.groups.iter().enumerate() {
            let members = spec.group_members(g.id);
            let shape = spec.layers[members[0]].kernel_shape().expect("conv");
            let bank = TemplateBank::init(g.templates, shape, &mut rng)?;
            let coeff_seed = seed ^ (g.id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let coefficients = init_coefficients(members.len(), g.templates, init, coeff_seed)?;
            for (row, &m) in members.iter().enumerate() {
                group_slot[m] = Some((gi, row));
            }
            groups.push(SharingGroup::new(g.id, bank, coefficients, members)?);
        }
        Ok(Self {
            spec,
            layers,
            groups,
            stats,
            group_slot,
            strategy: ConvStrategy::default(),
        })
    }

    pub fn spec(&self) -> &ArchitectureSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn groups(&self) -> &[SharingGroup] {
        &self.groups
    }

    pub fn groups_mut(&mut self) -> &mut [SharingGroup] {
        &mut self.groups
    }

    pub fn strategy(&self) -> ConvStrategy {
        self.strategy
    }

    pub fn set_strategy(&mut self, strategy: ConvStrategy) {
        self.strategy = strategy;
    }

    /// Running statistics of every BN layer, keyed by layer index.
    pub fn running_stats(&self) -> impl Iterator<Item = (usize, &RunningStats)> {
        self.stats
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|s| (i, s)))
    }

    pub fn running_stats_mut(&mut self) -> impl Iterator<Item = (usize, &mut RunningStats)> {
        self.stats
            .iter_mut()
            .enumerate()
            .filter_map(|(i, s)| s.as_mut().map(|s| (i, s)))
    }

    /// Every learnable tensor with a stable name, layers first, then groups.
    pub fn params(&self) -> Vec<(String, ParamKind, &Tensor)> {
        let mut out = Vec::new();
        for (i, p) in self.layers.iter().enumerate() {
            match p {
                LayerParams::None => {}
                LayerParams::Conv { kernel, bias } => {
                    if let Some(k) = kernel {
                        out.push((format!("layer{i}.kernel"), ParamKind::Weight, k));
                    }
                    if let Some(b) = bias {
                        out.push((format!("layer{i}.bias"), ParamKind::Bias, b));
                    }
                }
                LayerParams::Bn { gamma, beta } => {
                    out.push((format!("layer{i}.gamma"), ParamKind::Norm, gamma));
                    out.push((format!("layer{i}.beta"), ParamKind::Norm, beta));
                }
                LayerParams::Projection { kernel } => {
                    out.push((format!("layer{i}.projection"), ParamKind::Weight, kernel));
                }
                LayerParams::Linear { weight, bias } => {
                    out.push((format!("layer{i}.weight"), ParamKind::Weight, weight));
                    if let Some(b) = bias {
                        out.push((format!("layer{i}.bias"), ParamKind::Bias, b));
                    }
                }
            }
        }
        for g in &self.groups {
            for (j, t) in g.bank.templates().iter().enumerate() {
                out.push((format!("group{}.template{j}", g.id), ParamKind::Weight, t));
            }
            out.push((
                format!("group{}.coefficients", g.id),
                ParamKind::Coefficient,
                g.coefficients.tensor(),
            ));
        }
        out
    }

    /// Mutable view of [`Network::params`], same order.
    pub fn params_mut(&mut self) -> Vec<(String, ParamKind, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, p) in self.layers.iter_mut().enumerate() {
            match p {
                LayerParams::None => {}
                LayerParams::Conv { kernel, bias } => {
                    if let Some(k) = kernel {
                        out.push((format!("layer{i}.kernel"), ParamKind::Weight, k));
                    }
                    if let Some(b) = bias {
                        out.push((format!("layer{i}.bias"), ParamKind::Bias, b));
                    }
                }
                LayerParams::Bn { gamma, beta } => {
                    out.push((format!("layer{i}.gamma"), ParamKind::Norm, gamma));
                    out.push((format!("layer{i}.beta"), ParamKind::Norm, beta));
                }
                LayerParams::Projection { kernel } => {
                    out.push((format!("layer{i}.projection"), ParamKind::Weight, kernel));
                }
                LayerParams::Linear { weight, bias } => {
                    out.push((format!("layer{i}.weight"), ParamKind::Weight, weight));
                    if let Some(b) = bias {
                        out.push((format!("layer{i}.bias"), ParamKind::Bias, b));
                    }
                }
            }
        }
        for g in &mut self.groups {
            let id = g.id;
            for (j, t) in g.bank.templates_mut().iter_mut().enumerate() {
                out.push((format!("group{id}.template{j}"), ParamKind::Weight, t));
            }
            out.push((
                format!("group{id}.coefficients"),
                ParamKind::Coefficient,
                g.coefficients.tensor_mut(),
            ));
        }
        out
    }

    /// Total learnable element count, enumerated from the instantiated tensors.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|(_, _, t)| t.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundNetwork {
        let mut params = Vec::new();
        let mut leaf = |tape: &mut Tape, t: &Tensor| {
            let v = tape.leaf(t.clone(), requires_grad);
            params.push(v);
            v
        };
        let mut layers = Vec::with_capacity(self.layers.len());
        for p in &self.layers {
            layers.push(match p {
                LayerParams::None => LayerVars::None,
                LayerParams::Conv { kernel, bias } => LayerVars::Conv {
                    kernel: kernel.as_ref().map(|k| leaf(tape, k)),
                    bias: bias.as_ref().map(|b| leaf(tape, b)),
                },
                LayerParams::Bn { gamma, beta } => LayerVars::Bn {
                    gamma: leaf(tape, gamma),
                    beta: leaf(tape, beta),
                },
                LayerParams::Projection { kernel } => LayerVars::Projection {
                    kernel: leaf(tape, kernel),
                },
                LayerParams::Linear { weight, bias } => {
                    leaf(tape, weight);
                    if let Some(b) = bias {
                        leaf(tape, b);
                    }
                    LayerVars::Linear
                }
            });
        }
        let mut groups = Vec::with_capacity(self.groups.len());
        for g in &self.groups {
            let templates = g.bank.templates().iter().map(|t| leaf(tape, t)).collect();
            let coefficients = leaf(tape, g.coefficients.tensor());
            groups.push(BoundGroup {
                templates,
                coefficients,
            });
        }
        BoundNetwork {
            params,
            groups,
            layers,
        }
    }

    /// Training-mode forward pass: batch statistics, running stats updated.
    pub fn forward_train(&mut self, tape: &mut Tape, bound: &BoundNetwork, x: Var) -> Result<Var> {
        let Self {
            spec,
            stats,
            group_slot,
            strategy,
            ..
        } = self;
        run(spec, group_slot, *strategy, tape, bound, x, Stats::Train(stats))
    }

    /// Eval-mode forward pass using running statistics.
    pub fn forward_eval(&self, tape: &mut Tape, bound: &BoundNetwork, x: Var) -> Result<Var> {
        run(
            &self.spec,
            &self.group_slot,
            self.strategy,
            tape,
            bound,
            x,
            Stats::Eval(&self.stats),
        )
    }

    /// Eval-mode logits for a batch, without recording gradients.
    pub fn predict(&self, inputs: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(inputs.clone());
        let y = self.forward_eval(&mut tape, &bound, x)?;
        Ok(tape.value(y).clone())
    }
}

enum Stats<'a> {
    Train(&'a mut [Option<RunningStats>]),
    Eval(&'a [Option<RunningStats>]),
}

fn run(
    spec: &ArchitectureSpec,
    group_slot: &[Option<(usize, usize)>],
    strategy: ConvStrategy,
    tape: &mut Tape,
    bound: &BoundNetwork,
    x: Var,
    mut stats: Stats<'_>,
) -> Result<Var> {
    let shape = tape.value(x).shape();
    if shape.len() != 4 || shape[1] != spec.input_channels {
        return Err(Error::Dimension(format!(
            "{} expects [N,{},H,W] input, got {shape:?}",
            spec.name, spec.input_channels
        )));
    }
    let mut acts = Vec::with_capacity(spec.layers.len() + 1);
    acts.push(x);
    for (i, layer) in spec.layers.iter().enumerate() {
        let cur = *acts.last().expect("non-empty");
        let out = match (&layer.kind, &bound.layers[i]) {
            (LayerKind::Conv { kernel, .. }, LayerVars::Conv { kernel: k, bias }) => {
                let pad = kernel / 2;
                let y = match (k, group_slot[i]) {
                    (Some(k), _) => tape.conv2d(cur, *k, pad)?,
                    (None, Some((g, row))) => {
                        shared_conv_forward(tape, &bound.groups[g], row, cur, pad, strategy)?
                    }
                    (None, None) => unreachable!("ungrouped conv always owns a kernel"),
                };
                match bias {
                    Some(b) => tape.channel_bias(y, *b)?,
                    None => y,
                }
            }
            (LayerKind::Bn, LayerVars::Bn { gamma, beta }) => {
                let mode = match &mut stats {
                    Stats::Train(s) => BnMode::Train(s[i].as_mut().expect("bn stats")),
                    Stats::Eval(s) => BnMode::Eval(s[i].as_ref().expect("bn stats")),
                };
                tape.batchnorm2d(cur, *gamma, *beta, BN_EPS, mode)?
            }
            (LayerKind::Relu, _) => tape.relu(cur)?,
            (LayerKind::SkipAdd { from, .. }, vars) => {
                let skip = match vars {
                    LayerVars::Projection { kernel } => tape.conv2d(acts[*from], *kernel, 0)?,
                    _ => acts[*from],
                };
                tape.add(cur, skip)?
            }
            (LayerKind::Linear { .. }, _) => {
                return Err(Error::Usage(format!(
                    "{}: linear classifier layers are only supported for parameter counting",
                    spec.name
                )))
            }
            _ => unreachable!("layer vars are built from the same spec"),
        };
        acts.push(out);
    }
    Ok(*acts.last().expect("non-empty"))
}
