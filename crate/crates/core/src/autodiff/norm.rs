//! Per-channel batch normalization over `[N, C, H, W]` activations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Exponential moving averages of per-channel mean and (unbiased) variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub initialized: bool,
}

impl RunningStats {
    /// Stats that must see a training batch before eval mode may use them.
    pub fn uninitialized(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: false,
        }
    }

    /// Zero mean, unit variance; usable in eval mode immediately.
    pub fn standard(channels: usize) -> Self {
        Self {
            initialized: true,
            ..Self::uninitialized(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

pub enum BnMode<'a> {
    Train(&'a mut RunningStats),
    Eval(&'a RunningStats),
}

pub(crate) struct BnForward {
    pub out: Vec<f64>,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub(crate) fn forward(
    x: &[f64],
    shape: &[usize],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
    mode: BnMode<'_>,
) -> Result<BnForward> {
    if shape.len() != 4 {
        return Err(Error::Dimension(format!(
            "batchnorm2d expects [N,C,H,W], got {shape:?}"
        )));
    }
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Dimension(format!(
            "batchnorm2d: {c} channels but gamma/beta have {}/{}",
            gamma.len(),
            beta.len()
        )));
    }
    let count = n * plane;
    let (mean, inv_std) = match mode {
        BnMode::Train(stats) => {
            if count < 2 {
                return Err(Error::Value(
                    "batchnorm2d in train mode needs at least 2 values per channel".into(),
                ));
            }
            if stats.channels() != c {
                return Err(Error::Dimension(format!(
                    "running stats track {} channels, input has {c}",
                    stats.channels()
                )));
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for i in 0..n {
                    s += x[(i * c + ch) * plane..(i * c + ch + 1) * plane]
                        .iter()
                        .sum::<f64>();
                }
                let m = s / count as f64;
                let mut ss = 0.0;
                for i in 0..n {
                    ss += x[(i * c + ch) * plane..(i * c + ch + 1) * plane]
                        .iter()
                        .map(|v| (v - m) * (v - m))
                        .sum::<f64>();
                }
                mean[ch] = m;
                var[ch] = ss / count as f64;
            }
            let unbias = count as f64 / (count - 1) as f64;
            for ch in 0..c {
                stats.mean[ch] = (1.0 - BN_MOMENTUM) * stats.mean[ch] + BN_MOMENTUM * mean[ch];
                stats.var[ch] =
                    (1.0 - BN_MOMENTUM) * stats.var[ch] + BN_MOMENTUM * var[ch] * unbias;
            }
            stats.initialized = true;
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            (mean, inv_std)
        }
        BnMode::Eval(stats) => {
            if !stats.initialized {
                return Err(Error::State(
                    "batchnorm2d eval mode with uninitialized running statistics".into(),
                ));
            }
            if stats.channels() != c {
                return Err(Error::Dimension(format!(
                    "running stats track {} channels, input has {c}",
                    stats.channels()
                )));
            }
            let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            (stats.mean.clone(), inv_std)
        }
    };
    let mut xhat = Vec::with_capacity(x.len());
    let mut out = Vec::with_capacity(x.len());
    for (p, chunk) in x.chunks_exact(plane).enumerate() {
        let ch = p % c;
        let (m, s, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
        for &v in chunk {
            let h = (v - m) * s;
            xhat.push(h);
            out.push(g * h + b);
        }
    }
    Ok(BnForward { out, xhat, inv_std })
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub(crate) fn backward(
    grad_out: &[f64],
    xhat: &[f64],
    inv_std: &[f64],
    gamma: &[f64],
    shape: &[usize],
    train: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let count = (n * plane) as f64;
    debug_assert_eq!(grad_out.len(), n * c * plane);
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for (p, (go, xh)) in grad_out.chunks_exact(plane).zip(xhat.chunks_exact(plane)).enumerate() {
        let ch = p % c;
        let (mut sg, mut sb) = (0.0, 0.0);
        for (&g, &h) in go.iter().zip(xh) {
            sg += g * h;
            sb += g;
        }
        dgamma[ch] += sg;
        dbeta[ch] += sb;
    }
    let mut dx = Vec::with_capacity(grad_out.len());
    for (p, (go, xh)) in grad_out.chunks_exact(plane).zip(xhat.chunks_exact(plane)).enumerate() {
        let ch = p % c;
        let scale = gamma[ch] * inv_std[ch];
        if train {
            let (k, db, dg) = (scale / count, dbeta[ch], dgamma[ch]);
            dx.extend(go.iter().zip(xh).map(|(&g, &h)| k * (count * g - db - h * dg)));
        } else {
            dx.extend(go.iter().map(|&g| scale * g));
        }
    }
    (dx, dgamma, dbeta)
}
