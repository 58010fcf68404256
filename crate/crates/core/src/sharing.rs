//! Soft parameter sharing.
//!
//! Every layer of a [`SharingGroup`] owns a coefficient row `α⁽ⁱ⁾` and draws its
//! kernel as the linear combination `W⁽ⁱ⁾ = Σⱼ α⁽ⁱ⁾ⱼ T⁽ʲ⁾` of the group's
//! templates. Because convolution is linear in the kernel, the same output
//! can also be produced by convolving with each template first and mixing the
//! results; both routes are available through [`ConvStrategy`].
//!
//! Row similarity between coefficient vectors is summarized by the
//! [`LayerSimilarityMatrix`], whose entries are absolute cosine similarities.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{dot, row_norms, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `k ≥ 1` equally shaped `[Cout, Cin, Kh, Kw]` kernels.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateBank {
    templates: Vec<Tensor>,
}

impl TemplateBank {
    pub fn new(templates: Vec<Tensor>) -> Result<Self> {
        let Some(first) = templates.first() else {
            return Err(Error::Value("a template bank needs at least one template".into()));
        };
        if first.shape().len() != 4 {
            return Err(Error::Dimension(format!(
                "templates must be [Cout,Cin,Kh,Kw], got {:?}",
                first.shape()
            )));
        }
        if let Some(t) = templates.iter().find(|t| t.shape() != first.shape()) {
            return Err(Error::Dimension(format!(
                "template shapes differ: {:?} vs {:?}",
                first.shape(),
                t.shape()
            )));
        }
        Ok(Self { templates })
    }

    /// Fan-in scaled normal initialization, the same scheme as plain conv kernels.
    pub fn init<R: Rng + ?Sized>(k: usize, shape: [usize; 4], rng: &mut R) -> Result<Self> {
        let std = kaiming_std(&shape);
        Self::new((0..k).map(|_| Tensor::randn(&shape, std, rng)).collect())
    }

    pub fn k(&self) -> usize {
        self.templates.len()
    }

    pub fn shape(&self) -> &[usize] {
        self.templates[0].shape()
    }

    pub fn templates(&self) -> &[Tensor] {
        &self.templates
    }

    pub fn templates_mut(&mut self) -> &mut [Tensor] {
        &mut self.templates
    }
}

pub(crate) fn kaiming_std(shape: &[usize]) -> f64 {
    let fan_in: usize = shape[1..].iter().product();
    (2.0 / fan_in as f64).sqrt()
}

/// The `L × k` matrix `A` whose row `i` is layer `i`'s coefficient vector.
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientMatrix {
    a: Tensor,
}

impl CoefficientMatrix {
    pub fn new(a: Tensor) -> Result<Self> {
        if a.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "coefficient matrix must be 2-d, got {:?}",
                a.shape()
            )));
        }
        Ok(Self { a })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Dimension("coefficient rows differ in length".into()));
        }
        Self::new(Tensor::new(&[rows.len(), k], rows.concat())?)
    }

    pub fn layers(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.k();
        &self.a.data()[i * k..(i + 1) * k]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let k = self.k();
        &mut self.a.data_mut()[i * k..(i + 1) * k]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.a
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.a
    }

    pub fn zero_count(&self) -> usize {
        self.a.data().iter().filter(|&&v| v == 0.0).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoefficientInit {
    Orthogonal,
    Identity,
    Sparse,
}

impl std::str::FromStr for CoefficientInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orthogonal" => Ok(Self::Orthogonal),
            "identity" => Ok(Self::Identity),
            "sparse" => Ok(Self::Sparse),
            other => Err(Error::Usage(format!("unknown init scheme `{other}`"))),
        }
    }
}

/// Initial coefficients for a group of `layers` layers sharing `k` templates.
///
/// * `Orthogonal`: orthonormal rows when `layers ≤ k` (the LSM starts as the
///   identity), orthonormal columns when `k < layers`.
/// * `Identity`: requires `layers == k`.
/// * `Sparse`: unit normal entries with exactly `⌊layers·k/2⌋` of them zeroed.
///   Every row keeps at least one nonzero entry.
pub fn init_coefficients(
    layers: usize,
    k: usize,
    scheme: CoefficientInit,
    seed: u64,
) -> Result<CoefficientMatrix> {
    if layers == 0 || k == 0 {
        return Err(Error::Usage("coefficient matrix needs L ≥ 1 and k ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = match scheme {
        CoefficientInit::Orthogonal => {
            if layers <= k {
                let q = orthonormal_columns(k, layers, &mut rng);
                transpose(&q, k, layers)
            } else {
                orthonormal_columns(layers, k, &mut rng)
            }
        }
        CoefficientInit::Identity => {
            if layers != k {
                return Err(Error::Usage(format!(
                    "identity initialization needs L = k, got L = {layers}, k = {k}"
                )));
            }
            let mut a = vec![0.0; layers * k];
            for i in 0..layers {
                a[i * k + i] = 1.0;
            }
            a
        }
        CoefficientInit::Sparse => sparse_matrix(layers, k, &mut rng)?,
    };
    CoefficientMatrix::new(Tensor::new(&[layers, k], a)?)
}

/// `rows × cols` (rows ≥ cols) matrix with orthonormal columns, via twice-applied
/// modified Gram-Schmidt on a Gaussian draw. Column signs follow a positive `R` diagonal.
fn orthonormal_columns<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Vec<f64> {
    debug_assert!(rows >= cols);
    let mut columns: Vec<Vec<f64>> = (0..cols)
        .map(|_| (0..rows).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    for j in 0..cols {
        for _ in 0..2 {
            for p in 0..j {
                let (done, rest) = columns.split_at_mut(j);
                let proj = dot(&done[p], &rest[0]);
                for (x, q) in rest[0].iter_mut().zip(&done[p]) {
                    *x -= proj * q;
                }
            }
        }
        let norm = dot(&columns[j], &columns[j]).sqrt();
        columns[j].iter_mut().for_each(|x| *x /= norm);
    }
    let mut out = vec![0.0; rows * cols];
    for (j, col) in columns.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            out[i * cols + j] = *v;
        }
    }
    out
}

fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; m.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = m[i * cols + j];
        }
    }
    t
}

fn sparse_matrix<R: Rng>(layers: usize, k: usize, rng: &mut R) -> Result<Vec<f64>> {
    let total = layers * k;
    let zeros = total / 2;
    let free = layers * (k - 1);
    if zeros > free {
        return Err(Error::Usage(format!(
            "sparse initialization of a {layers}×{k} matrix would leave a zero row"
        )));
    }
    let mut a: Vec<f64> = (0..total).map(|_| rng.sample(StandardNormal)).collect();
    // one protected entry per row, zeros drawn from the rest
    let mut candidates = Vec::with_capacity(free);
    for i in 0..layers {
        let keep = rng.random_range(0..k);
        candidates.extend((0..k).filter(|&j| j != keep).map(|j| i * k + j));
    }
    for idx in sample(rng, candidates.len(), zeros) {
        a[candidates[idx]] = 0.0;
    }
    Ok(a)
}

/// Templates, coefficients, and the global indices of the member layers.
#[derive(Clone, Debug, PartialEq)]
pub struct SharingGroup {
    pub id: usize,
    pub bank: TemplateBank,
    pub coefficients: CoefficientMatrix,
    pub members: Vec<usize>,
}

impl SharingGroup {
    pub fn new(
        id: usize,
        bank: TemplateBank,
        coefficients: CoefficientMatrix,
        members: Vec<usize>,
    ) -> Result<Self> {
        if coefficients.k() != bank.k() {
            return Err(Error::Dimension(format!(
                "group {id}: {} templates but coefficients have {} columns",
                bank.k(),
                coefficients.k()
            )));
        }
        if coefficients.layers() != members.len() {
            return Err(Error::Dimension(format!(
                "group {id}: {} member layers but {} coefficient rows",
                members.len(),
                coefficients.layers()
            )));
        }
        Ok(Self {
            id,
            bank,
            coefficients,
            members,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// `k·L + k·Cout·Cin·Kh·Kw`.
    pub fn param_count(&self) -> usize {
        let kernel: usize = self.bank.shape().iter().product();
        self.bank.k() * self.len() + self.bank.k() * kernel
    }

    /// The generated kernel of member `layer`, computed eagerly off-tape.
    pub fn effective_weights(&self, layer: usize) -> Result<Tensor> {
        if layer >= self.len() {
            return Err(Error::Usage(format!(
                "layer index {layer} out of range for group of {}",
                self.len()
            )));
        }
        let alpha = self.coefficients.row(layer);
        let mut out = vec![0.0; self.bank.templates[0].numel()];
        for (a, t) in alpha.iter().zip(&self.bank.templates) {
            for (o, v) in out.iter_mut().zip(t.data()) {
                *o += a * v;
            }
        }
        Tensor::new(self.bank.shape(), out)
    }

    pub fn lsm(&self) -> Result<LayerSimilarityMatrix> {
        let mut s = compute_lsm(&self.coefficients)?;
        s.group = self.id;
        Ok(s)
    }

    /// Records templates and coefficients as tape leaves.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundGroup {
        BoundGroup {
            templates: self
                .bank
                .templates
                .iter()
                .map(|t| tape.leaf(t.clone(), requires_grad))
                .collect(),
            coefficients: tape.leaf(self.coefficients.a.clone(), requires_grad),
        }
    }
}

/// A [`SharingGroup`]'s parameters as recorded on a tape.
#[derive(Clone, Debug)]
pub struct BoundGroup {
    pub templates: Vec<Var>,
    pub coefficients: Var,
}

/// How a shared convolution is evaluated. Both produce the same values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvStrategy {
    /// Generate `W⁽ⁱ⁾` from the templates, then convolve once.
    #[default]
    GenerateWeights,
    /// Convolve with every template, then mix the `k` outputs with `α⁽ⁱ⁾`.
    TemplateLayers,
}

pub fn generate_weights(tape: &mut Tape, group: &BoundGroup, layer: usize) -> Result<Var> {
    let rows = tape.value(group.coefficients).shape()[0];
    if layer >= rows {
        return Err(Error::Usage(format!(
            "layer index {layer} out of range for group of {rows}"
        )));
    }
    tape.combine(group.coefficients, layer, &group.templates)
}

pub fn shared_conv_forward(
    tape: &mut Tape,
    group: &BoundGroup,
    layer: usize,
    input: Var,
    padding: usize,
    strategy: ConvStrategy,
) -> Result<Var> {
    let bank_cin = tape.value(group.templates[0]).shape()[1];
    let in_shape = tape.value(input).shape();
    if in_shape.len() != 4 || in_shape[1] != bank_cin {
        return Err(Error::Dimension(format!(
            "shared conv: input {in_shape:?} does not match bank input channels {bank_cin}"
        )));
    }
    match strategy {
        ConvStrategy::GenerateWeights => {
            let w = generate_weights(tape, group, layer)?;
            tape.conv2d(input, w, padding)
        }
        ConvStrategy::TemplateLayers => {
            let rows = tape.value(group.coefficients).shape()[0];
            if layer >= rows {
                return Err(Error::Usage(format!(
                    "layer index {layer} out of range for group of {rows}"
                )));
            }
            let outputs = group
                .templates
                .iter()
                .map(|&t| tape.conv2d(input, t, padding))
                .collect::<Result<Vec<_>>>()?;
            tape.combine(group.coefficients, layer, &outputs)
        }
    }
}

/// Absolute cosine similarities between coefficient rows, plus the sign of each
/// inner product.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerSimilarityMatrix {
    pub group: usize,
    size: usize,
    values: Vec<f64>,
    signs: Vec<i8>,
}

pub fn compute_lsm(a: &CoefficientMatrix) -> Result<LayerSimilarityMatrix> {
    let (l, k) = (a.layers(), a.k());
    let norms = row_norms(a.tensor().data(), l, k)?;
    let mut values = vec![0.0; l * l];
    let mut signs = vec![0i8; l * l];
    for i in 0..l {
        values[i * l + i] = 1.0;
        signs[i * l + i] = 1;
        for j in i + 1..l {
            let g = dot(a.row(i), a.row(j));
            let s = (g.abs() / (norms[i] * norms[j])).min(1.0);
            let sign = if g > 0.0 {
                1
            } else if g < 0.0 {
                -1
            } else {
                0
            };
            values[i * l + j] = s;
            values[j * l + i] = s;
            signs[i * l + j] = sign;
            signs[j * l + i] = sign;
        }
    }
    Ok(LayerSimilarityMatrix {
        group: 0,
        size: l,
        values,
        signs,
    })
}

impl LayerSimilarityMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    /// Sign of `⟨α⁽ⁱ⁾, α⁽ʲ⁾⟩`: `1`, `-1`, or `0` for orthogonal rows.
    pub fn sign(&self, i: usize, j: usize) -> i8 {
        self.signs[i * self.size + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    fn off_diagonal(&self) -> impl Iterator<Item = f64> + '_ {
        let l = self.size;
        (0..l * l).filter(move |p| p / l != p % l).map(|p| self.values[p])
    }

    /// Mean off-diagonal entry; `1.0` for a single layer.
    pub fn offdiag_mean(&self) -> f64 {
        if self.size < 2 {
            return 1.0;
        }
        self.off_diagonal().sum::<f64>() / (self.size * (self.size - 1)) as f64
    }

    pub fn offdiag_min(&self) -> f64 {
        self.off_diagonal().fold(1.0, f64::min)
    }

    pub fn offdiag_max_abs(&self) -> f64 {
        self.off_diagonal().fold(0.0, f64::max)
    }
}

/// `task_loss − λ_R · Σ_groups Σ_{i,j} S_ij`, with the similarities computed on-tape.
pub fn recurrence_regularized_loss(
    tape: &mut Tape,
    task_loss: Var,
    groups: &[BoundGroup],
    lambda_r: f64,
) -> Result<Var> {
    if !(lambda_r >= 0.0) {
        return Err(Error::Usage(format!(
            "recurrence regularizer weight must be ≥ 0, got {lambda_r}"
        )));
    }
    if lambda_r == 0.0 || groups.is_empty() {
        return Ok(task_loss);
    }
    let mut loss = task_loss;
    for g in groups {
        let s = tape.abs_cosine_sum(g.coefficients)?;
        let penalty = tape.scale(s, -lambda_r)?;
        loss = tape.add(loss, penalty)?;
    }
    Ok(loss)
}
