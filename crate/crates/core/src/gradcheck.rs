//! Central finite-difference checks of tape gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{BnMode, RunningStats, Tape, Var, BN_EPS};
use crate::error::Result;
use crate::sharing::{
    recurrence_regularized_loss, shared_conv_forward, BoundGroup, ConvStrategy, TemplateBank,
};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Denominator floor for the relative error, so vanishing gradients are
/// compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradCheck {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences, perturbing every element of every input.
pub fn check<F>(name: &str, inputs: &[Tensor], step: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut max_rel_error: f64 = 0.0;
    let mut checked = 0;
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let orig = input.data()[e];
            work[i].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            max_rel_error = max_rel_error.max(relative_error(analytic[i].data()[e], numeric));
            checked += 1;
        }
    }
    Ok(GradCheck {
        name: name.to_string(),
        max_rel_error,
        checked,
    })
}

/// Contracts a tensor with a fixed random weighting so every output element
/// carries a distinct gradient.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::randn(tape.value(v).shape(), 1.0, &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(v, w)?;
    tape.sum_all(p)
}

fn away_from_zero(t: Tensor) -> Tensor {
    t.map(|v| if v.abs() < 0.1 { v.signum() * 0.1 + v } else { v })
}

fn bound(vars: &[Var], k: usize) -> BoundGroup {
    BoundGroup {
        templates: vars[..k].to_vec(),
        coefficients: vars[k],
    }
}

/// Every differentiable primitive plus the composite paths used in training.
pub fn run_suite(seed: u64, step: f64) -> Result<Vec<GradCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut rng);
    let mut results = Vec::new();

    let (x, k) = (r(&[2, 2, 5, 5]), r(&[3, 2, 3, 3]));
    results.push(check("conv2d", &[x, k], step, |t, v| {
        let y = t.conv2d(v[0], v[1], 1)?;
        project(t, y, 1)
    })?);

    let (x, k) = (r(&[2, 3, 4, 4]), r(&[2, 3, 1, 1]));
    results.push(check("conv2d_1x1", &[x, k], step, |t, v| {
        let y = t.conv2d(v[0], v[1], 0)?;
        project(t, y, 2)
    })?);

    let (x, gamma, beta) = (r(&[3, 2, 3, 3]), r(&[2]), r(&[2]));
    results.push(check("batchnorm2d_train", &[x, gamma, beta], step, |t, v| {
        let mut stats = RunningStats::uninitialized(2);
        let y = t.batchnorm2d(v[0], v[1], v[2], BN_EPS, BnMode::Train(&mut stats))?;
        project(t, y, 3)
    })?);

    let (x, gamma, beta) = (r(&[2, 2, 3, 3]), r(&[2]), r(&[2]));
    let stats = RunningStats {
        mean: vec![0.3, -0.2],
        var: vec![1.5, 0.7],
        initialized: true,
    };
    results.push(check("batchnorm2d_eval", &[x, gamma, beta], step, |t, v| {
        let y = t.batchnorm2d(v[0], v[1], v[2], BN_EPS, BnMode::Eval(&stats))?;
        project(t, y, 4)
    })?);

    let x = away_from_zero(r(&[4, 5]));
    results.push(check("relu", &[x], step, |t, v| {
        let y = t.relu(v[0])?;
        project(t, y, 5)
    })?);

    let (a, b) = (r(&[3, 4]), r(&[3, 4]));
    results.push(check("add", &[a.clone(), b.clone()], step, |t, v| {
        let y = t.add(v[0], v[1])?;
        project(t, y, 6)
    })?);
    results.push(check("mul_elementwise", &[a.clone(), b], step, |t, v| {
        let y = t.mul(v[0], v[1])?;
        project(t, y, 7)
    })?);
    results.push(check("scale", std::slice::from_ref(&a), step, |t, v| {
        let y = t.scale(v[0], -2.5)?;
        project(t, y, 8)
    })?);
    results.push(check("sum_all", &[a], step, |t, v| t.sum_all(v[0]))?);

    let (x, bias) = (r(&[2, 3, 2, 2]), r(&[3]));
    results.push(check("channel_bias", &[x, bias], step, |t, v| {
        let y = t.channel_bias(v[0], v[1])?;
        project(t, y, 9)
    })?);

    let z = r(&[2, 1, 3, 3]).map(|v| 3.0 * v);
    let targets = Tensor::new(
        &[2, 1, 3, 3],
        (0..18).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect(),
    )?;
    results.push(check("bce_with_logits", &[z], step, |t, v| {
        t.bce_with_logits(v[0], &targets)
    })?);

    let a = r(&[4, 3]);
    results.push(check("abs_cosine_sum", &[a], step, |t, v| t.abs_cosine_sum(v[0]))?);

    // conv → bn → relu → skip
    let (x, k, gamma, beta) = (r(&[2, 3, 4, 4]), r(&[3, 3, 3, 3]), r(&[3]), r(&[3]));
    results.push(check("conv_bn_relu_skip", &[x, k, gamma, beta], step, |t, v| {
        let mut stats = RunningStats::uninitialized(3);
        let c = t.conv2d(v[0], v[1], 1)?;
        let b = t.batchnorm2d(c, v[2], v[3], BN_EPS, BnMode::Train(&mut stats))?;
        let h = t.relu(b)?;
        let y = t.add(v[0], h)?;
        project(t, y, 10)
    })?);

    // weight generation from templates
    let mut shared = TemplateBank::init(3, [2, 2, 3, 3], &mut rng)?.templates().to_vec();
    shared.push(Tensor::randn(&[4, 3], 1.0, &mut rng));
    results.push(check("generate_weights", &shared, step, |t, v| {
        let g = bound(v, 3);
        let mut total = None;
        for layer in 0..4 {
            let w = crate::sharing::generate_weights(t, &g, layer)?;
            let p = project(t, w, 11 + layer as u64)?;
            total = Some(match total {
                None => p,
                Some(acc) => t.add(acc, p)?,
            });
        }
        Ok(total.expect("four layers"))
    })?);

    // both shared-conv strategies, gradients into input, templates, and α
    let x = Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng);
    for (name, strategy) in [
        ("shared_conv_generate_weights", ConvStrategy::GenerateWeights),
        ("shared_conv_template_layers", ConvStrategy::TemplateLayers),
    ] {
        let mut inputs = shared.clone();
        inputs.push(x.clone());
        results.push(check(name, &inputs, step, |t, v| {
            let g = bound(v, 3);
            let y = shared_conv_forward(t, &g, 2, v[4], 1, strategy)?;
            project(t, y, 20)
        })?);
    }

    // recurrence-regularized loss into α
    let mut inputs = shared.clone();
    inputs.push(x);
    results.push(check("recurrence_regularized_loss", &inputs, step, |t, v| {
        let g = bound(v, 3);
        let y = shared_conv_forward(t, &g, 1, v[4], 1, ConvStrategy::GenerateWeights)?;
        let task = project(t, y, 21)?;
        recurrence_regularized_loss(t, task, &[g], 0.7)
    })?);

    Ok(results)
}
