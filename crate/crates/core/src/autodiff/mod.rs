//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Operations are recorded in execution order on a [`Tape`]; every node's
//! inputs precede it, so a single reverse sweep from the loss visits each
//! node after all of its consumers. Handles to recorded values are [`Var`]s.
//!
//! ```
//! use softshare::autodiff::Tape;
//! use softshare::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::ones(&[2, 2]), true);
//! let y = tape.scale(x, 3.0).unwrap();
//! let loss = tape.sum_all(y).unwrap();
//! tape.backward(loss).unwrap();
//! assert_eq!(tape.grad(x).unwrap().data(), &[3.0; 4]);
//! ```
//!
//! Gradients are kept for leaves only. Calling [`Tape::backward`] again
//! without [`Tape::zero_grad`] adds to the existing leaf gradients.

pub(crate) mod conv;
pub mod norm;

use crate::error::{Error, Result};
use crate::tensor::{ensure_same_shape, Tensor};

pub use norm::{BnMode, RunningStats, BN_EPS, BN_MOMENTUM};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        geometry: conv::ConvGeometry,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    SumAll(Var),
    ChannelBias {
        input: Var,
        bias: Var,
    },
    Combine {
        coeffs: Var,
        row: usize,
        inputs: Vec<Var>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    AbsCosineSum(Var),
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    grad: Option<Tensor>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input value. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            grad: None,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Stride-1 cross-correlation of `[N,Cin,H,W]` with `[Cout,Cin,Kh,Kw]`, zero padded.
    pub fn conv2d(&mut self, input: Var, kernel: Var, padding: usize) -> Result<Var> {
        let x = self.value(input);
        let k = self.value(kernel);
        let geometry = conv::ConvGeometry::new(x.shape(), k.shape(), padding)?;
        let out = conv::forward(x.data(), k.data(), &geometry);
        let value = Tensor::new(&geometry.output_shape(), out)?;
        self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                geometry,
            },
            &[input, kernel],
            "conv2d",
        )
    }

    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: BnMode<'_>,
    ) -> Result<Var> {
        let train = matches!(mode, BnMode::Train(_));
        let x = self.value(input);
        let fwd = norm::forward(
            x.data(),
            x.shape(),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
            mode,
        )?;
        let value = Tensor::new(x.shape(), fwd.out)?;
        self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
                train,
            },
            &[input, gamma, beta],
            "batchnorm2d",
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(value, Op::Relu(input), &[input], "relu")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ensure_same_shape(ta, tb, "add")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        self.push(value, Op::Add(a, b), &[a, b], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ensure_same_shape(ta, tb, "mul")?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape(), data)?;
        self.push(value, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v * s);
        self.push(value, Op::Scale(a, s), &[a], "scale")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(value, Op::SumAll(a), &[a], "sum_all")
    }

    /// Adds a per-channel bias `[C]` to `[N,C,H,W]`.
    pub fn channel_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(input), self.value(bias));
        let shape = x.shape();
        if shape.len() != 4 || b.shape() != [shape[1]] {
            return Err(Error::Dimension(format!(
                "channel_bias: input {shape:?} with bias {:?}",
                b.shape()
            )));
        }
        let (c, plane) = (shape[1], shape[2] * shape[3]);
        let mut data = x.data().to_vec();
        for (p, v) in data.iter_mut().enumerate() {
            *v += b.data()[(p / plane) % c];
        }
        let value = Tensor::new(shape, data)?;
        self.push(value, Op::ChannelBias { input, bias }, &[input, bias], "channel_bias")
    }

    /// `Σ_j coeffs[row, j] · inputs[j]` for a `[L, k]` coefficient matrix and
    /// `k` equally shaped inputs.
    pub fn combine(&mut self, coeffs: Var, row: usize, inputs: &[Var]) -> Result<Var> {
        let a = self.value(coeffs);
        if a.shape().len() != 2 || a.shape()[1] != inputs.len() || inputs.is_empty() {
            return Err(Error::Dimension(format!(
                "combine: coefficients {:?} with {} inputs",
                a.shape(),
                inputs.len()
            )));
        }
        let (rows, k) = (a.shape()[0], a.shape()[1]);
        if row >= rows {
            return Err(Error::Usage(format!(
                "combine: row {row} out of range for {rows} rows"
            )));
        }
        let alpha = &a.data()[row * k..(row + 1) * k];
        let shape = self.value(inputs[0]).shape().to_vec();
        let mut out = vec![0.0; self.value(inputs[0]).numel()];
        for (j, &input) in inputs.iter().enumerate() {
            let t = self.value(input);
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "combine: input {j} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            for (o, v) in out.iter_mut().zip(t.data()) {
                *o += alpha[j] * v;
            }
        }
        let value = Tensor::new(&shape, out)?;
        let mut deps = inputs.to_vec();
        deps.push(coeffs);
        self.push(
            value,
            Op::Combine {
                coeffs,
                row,
                inputs: inputs.to_vec(),
            },
            &deps,
            "combine",
        )
    }

    /// Mean binary cross-entropy of sigmoid(logits) against `{0,1}` targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let z = self.value(logits);
        ensure_same_shape(z, targets, "bce_with_logits")?;
        if let Some(t) = targets.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::Value(format!(
                "bce_with_logits: target {t} is not 0 or 1"
            )));
        }
        let n = z.numel() as f64;
        let total: f64 = z
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total / n);
        self.push(
            value,
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
            &[logits],
            "bce_with_logits",
        )
    }

    /// `Σ_{i,j} |⟨a_i, a_j⟩| / (‖a_i‖ ‖a_j‖)` over the rows of a `[L, k]` matrix.
    pub fn abs_cosine_sum(&mut self, coeffs: Var) -> Result<Var> {
        let a = self.value(coeffs);
        if a.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "abs_cosine_sum expects a matrix, got {:?}",
                a.shape()
            )));
        }
        let (l, k) = (a.shape()[0], a.shape()[1]);
        let norms = row_norms(a.data(), l, k)?;
        let mut total = l as f64;
        for i in 0..l {
            for j in i + 1..l {
                let g = dot(&a.data()[i * k..(i + 1) * k], &a.data()[j * k..(j + 1) * k]);
                total += 2.0 * g.abs() / (norms[i] * norms[j]);
            }
        }
        self.push(
            Tensor::scalar(total),
            Op::AbsCosineSum(coeffs),
            &[coeffs],
            "abs_cosine_sum",
        )
    }

    /// Propagates gradients from a scalar `loss` to every reachable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage("backward: loss is not on this tape".into()));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !crate::tensor::all_finite(&g) {
                return Err(Error::NonFinite(format!("gradient of node {idx}")));
            }
            let (contributions, g) = self.local_gradients(idx, g);
            for (var, contribution) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot => *slot = Some(contribution),
                }
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                let node = &mut self.nodes[idx];
                match &mut node.grad {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(a, c)| *a += c),
                    slot => *slot = Some(Tensor::new(node.value.shape(), g)?),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions to each input, plus `g` handed back for leaf accumulation
    /// (leaves produce no contributions, so ops are free to consume it otherwise).
    fn local_gradients(&self, idx: usize, g: Vec<f64>) -> (Vec<(Var, Vec<f64>)>, Vec<f64>) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        if matches!(self.nodes[idx].op, Op::Leaf) {
            return (Vec::new(), g);
        }
        let contributions = match &self.nodes[idx].op {
            Op::Leaf => unreachable!("handled above"),
            Op::Conv2d {
                input,
                kernel,
                geometry,
            } => {
                let (dx, dk) = conv::backward(
                    val(*input),
                    val(*kernel),
                    &g,
                    geometry,
                    needs(*input),
                    needs(*kernel),
                );
                let mut out = Vec::new();
                if let Some(dx) = dx {
                    out.push((*input, dx));
                }
                if let Some(dk) = dk {
                    out.push((*kernel, dk));
                }
                out
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = self.nodes[input.0].value.shape();
                let (dx, dgamma, dbeta) =
                    norm::backward(&g, xhat, inv_std, val(*gamma), shape, *train);
                vec![(*input, dx), (*gamma, dgamma), (*beta, dbeta)]
            }
            Op::Relu(a) => {
                let mut dx = g;
                for (d, &x) in dx.iter_mut().zip(val(*a)) {
                    if x <= 0.0 {
                        *d = 0.0;
                    }
                }
                vec![(*a, dx)]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g)],
            Op::Mul(a, b) => {
                let da = val(*b).iter().zip(&g).map(|(y, g)| y * g).collect();
                let db = val(*a).iter().zip(&g).map(|(x, g)| x * g).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::Scale(a, s) => vec![(*a, g.into_iter().map(|g| g * s).collect())],
            Op::SumAll(a) => vec![(*a, vec![g[0]; val(*a).len()])],
            Op::ChannelBias { input, bias } => {
                let shape = self.nodes[input.0].value.shape();
                let (c, plane) = (shape[1], shape[2] * shape[3]);
                let mut db = vec![0.0; c];
                for (p, gv) in g.iter().enumerate() {
                    db[(p / plane) % c] += gv;
                }
                vec![(*input, g), (*bias, db)]
            }
            Op::Combine {
                coeffs,
                row,
                inputs,
            } => {
                let k = inputs.len();
                let alpha = &val(*coeffs)[row * k..(row + 1) * k];
                let mut out = Vec::with_capacity(k + 1);
                let mut da = vec![0.0; val(*coeffs).len()];
                for (j, &input) in inputs.iter().enumerate() {
                    if needs(*coeffs) {
                        da[row * k + j] = dot(&g, val(input));
                    }
                    if needs(input) {
                        out.push((input, g.iter().map(|g| alpha[j] * g).collect()));
                    }
                }
                out.push((*coeffs, da));
                out
            }
            Op::BceWithLogits { logits, targets } => {
                let n = targets.len() as f64;
                let dz = val(*logits)
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| g[0] * (sigmoid(z) - t) / n)
                    .collect();
                vec![(*logits, dz)]
            }
            Op::AbsCosineSum(coeffs) => {
                let a = &self.nodes[coeffs.0].value;
                let (l, k) = (a.shape()[0], a.shape()[1]);
                let data = a.data();
                // forward already rejected zero rows
                let norms = row_norms(data, l, k).expect("checked in forward");
                let mut da = vec![0.0; data.len()];
                for i in 0..l {
                    for j in i + 1..l {
                        let (ai, aj) = (&data[i * k..(i + 1) * k], &data[j * k..(j + 1) * k]);
                        let gij = dot(ai, aj);
                        // |x| has subgradient 0 at 0
                        let sgn = if gij > 0.0 {
                            1.0
                        } else if gij < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        let nn = norms[i] * norms[j];
                        let w = 2.0 * g[0];
                        for c in 0..k {
                            da[i * k + c] += w
                                * (sgn * aj[c] / nn - gij.abs() * ai[c] / (norms[i] * norms[i] * nn));
                            da[j * k + c] += w
                                * (sgn * ai[c] / nn - gij.abs() * aj[c] / (norms[j] * norms[j] * nn));
                        }
                    }
                }
                vec![(*coeffs, da)]
            }
        };
        (contributions, Vec::new())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn row_norms(data: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    (0..rows)
        .map(|i| {
            let r = &data[i * cols..(i + 1) * cols];
            let n = dot(r, r).sqrt();
            if n == 0.0 {
                Err(Error::Value(format!("coefficient row {i} is zero")))
            } else {
                Ok(n)
            }
        })
        .collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
