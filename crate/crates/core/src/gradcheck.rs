//! Central finite-difference verification of the analytic gradients.
//!
//! Checks run in `f64` (same code paths as training, different scalar) with
//! step `h = 1e-3`. The reported error for a parameter tensor is the largest
//! component mismatch normalized by the tensor's largest gradient magnitude,
//! so a broken backward shows up at O(1) while benign truncation noise stays
//! orders of magnitude under the tolerance.

use crate::error::TrainError;
use crate::graph::Graph;
use crate::models::{build_generator, build_resnet, GeneratorArch, ResNetArch, TargetClass};
use crate::objective::{build_generator_objective, LossWeights};
use crate::params::{GradMap, ParamStore};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

pub const DEFAULT_TOLERANCE: f64 = 1e-4;
/// Step for single primitives, whose fixtures keep inputs away from kinks.
pub const DEFAULT_STEP: f64 = 1e-3;
/// Step for composed-model checks. Deep stacks with instance norm place
/// many pre-activations near the leaky-relu kink; a +-1e-3 window crosses
/// some of them and contaminates the difference quotient even though the
/// point gradient is exact. Shrinking the window removes the crossings
/// while f64 keeps roundoff near 1e-10.
pub const COMPOSED_STEP: f64 = 1e-6;
const MAX_PARAMS: usize = 10_000;

/// Outcome of one gradient check.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub params_checked: usize,
    pub max_rel_err: f64,
    /// Parameter tensor where the worst error occurred.
    pub worst_param: String,
    pub tolerance: f64,
    pub pass: bool,
}

/// All checks of one suite run.
#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
    pub all_pass: bool,
}

impl SuiteReport {
    /// One line per check, `PASS`/`FAIL` first.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{} {:38} max_rel_err {:10.3e}  ({} params, tol {:.0e}, worst {})\n",
                if c.pass { "PASS" } else { "FAIL" },
                c.name,
                c.max_rel_err,
                c.params_checked,
                c.tolerance,
                c.worst_param
            ));
        }
        out
    }
}

/// Verifies `grad_fn` against central finite differences of `loss_fn` over
/// every parameter in `store`.
pub fn check_gradients(
    name: &str,
    store: &ParamStore<f64>,
    loss_fn: &dyn Fn(&ParamStore<f64>) -> Result<f64, TrainError>,
    grad_fn: &dyn Fn(&ParamStore<f64>) -> Result<GradMap<f64>, TrainError>,
    h: f64,
    tolerance: f64,
) -> Result<CheckResult, TrainError> {
    if store.numel() > MAX_PARAMS {
        return Err(TrainError::Invalid(format!(
            "{name}: {} parameters exceed the exhaustive-check budget of {MAX_PARAMS}",
            store.numel()
        )));
    }
    let analytic = grad_fn(store)?;
    let mut probe = store.clone();
    let names: Vec<String> = store.names().map(String::from).collect();

    let mut pairs: Vec<(String, Tensor<f64>, Vec<f64>)> = Vec::new();
    let mut checked = 0usize;
    for pname in &names {
        let a = analytic
            .get(pname)
            .ok_or_else(|| TrainError::Invalid(format!("{name}: no gradient for {pname}")))?
            .clone();
        let n = a.numel();
        let mut fd = vec![0.0f64; n];
        for i in 0..n {
            let orig = probe.get(pname).unwrap().data()[i];
            probe.get_mut(pname).unwrap().data_mut()[i] = orig + h;
            let lp = loss_fn(&probe)?;
            probe.get_mut(pname).unwrap().data_mut()[i] = orig - h;
            let lm = loss_fn(&probe)?;
            probe.get_mut(pname).unwrap().data_mut()[i] = orig;
            fd[i] = (lp - lm) / (2.0 * h);
        }
        checked += n;
        pairs.push((pname.clone(), a, fd));
    }

    // Mismatches are normalized per tensor, floored at a fraction of the
    // check's global gradient scale. The floor keeps tensors whose true
    // gradient is identically zero (for example conv biases absorbed by a
    // following instance norm) from turning f64 roundoff into spurious
    // relative errors of 1.
    let global = pairs
        .iter()
        .flat_map(|(_, a, fd)| a.data().iter().copied().chain(fd.iter().copied()))
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    let mut max_rel = 0.0f64;
    let mut worst = String::new();
    for (pname, a, fd) in &pairs {
        let tensor_scale = a
            .data()
            .iter()
            .copied()
            .chain(fd.iter().copied())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let scale = tensor_scale.max(1e-3 * global);
        let err = a
            .data()
            .iter()
            .zip(fd)
            .fold(0.0f64, |m, (ai, fi)| m.max((ai - fi).abs()))
            / scale;
        if err > max_rel {
            max_rel = err;
            worst = pname.clone();
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        params_checked: checked,
        max_rel_err: max_rel,
        worst_param: worst,
        tolerance,
        pass: max_rel < tolerance,
    })
}

fn perturbed<R: Rng>(store: &mut ParamStore<f64>, rng: &mut R, std: f64) {
    // Move every tensor off any structured initialization (exact zeros or
    // ones) so no gradient is zero by construction.
    let normal = Normal::<f64>::new(0.0, std).unwrap();
    for name in store.names().map(String::from).collect::<Vec<_>>() {
        for v in store.get_mut(&name).unwrap().data_mut() {
            *v += normal.sample(rng);
        }
    }
}

fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
    // Pixels stay well inside [0,1] so the generator's output clamp does not
    // sit on a kink within the finite-difference step.
    let data = (0..c * h * w).map(|_| rng.gen_range(0.25..0.75)).collect();
    Tensor::from_vec(&[c, h, w], data).unwrap()
}

fn single_param_store(pairs: Vec<(&str, Tensor<f64>)>) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (n, t) in pairs {
        s.insert(n, t);
    }
    s
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

type LossFn = Box<dyn Fn(&ParamStore<f64>) -> Result<f64, TrainError>>;

/// Wraps a scalar-producing graph builder into (loss, grad) closures.
fn closures<F>(build: F) -> (LossFn, Box<dyn Fn(&ParamStore<f64>) -> Result<GradMap<f64>, TrainError>>)
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<crate::graph::NodeId, TrainError> + Clone + 'static,
{
    let b1 = build.clone();
    let loss = Box::new(move |store: &ParamStore<f64>| -> Result<f64, TrainError> {
        let mut g = Graph::new();
        let node = b1(&mut g, store)?;
        Ok(g.scalar_value(node))
    });
    let grad = Box::new(move |store: &ParamStore<f64>| -> Result<GradMap<f64>, TrainError> {
        let mut g = Graph::new();
        let node = build(&mut g, store)?;
        Ok(g.backward(node)?)
    });
    (loss, grad)
}

fn run_check<F>(
    name: &str,
    store: ParamStore<f64>,
    build: F,
    h: f64,
    tolerance: f64,
) -> Result<CheckResult, TrainError>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<crate::graph::NodeId, TrainError> + Clone + 'static,
{
    let (loss, grad) = closures(build);
    check_gradients(name, &store, loss.as_ref(), grad.as_ref(), h, tolerance)
}

/// Runs the full verification suite: every primitive plus each term of the
/// generator/discriminator objectives and the classifier pretraining loss on
/// miniature models.
pub fn run_suite(tolerance: f64) -> Result<SuiteReport, TrainError> {
    let mut checks = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);

    // --- primitives ---

    {
        let x = rand_tensor(&mut rng, &[3, 6, 6], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[4, 3, 3, 3], -0.5, 0.5);
        let b = rand_tensor(&mut rng, &[4], -0.2, 0.2);
        let store = single_param_store(vec![("x", x), ("w", w), ("b", b)]);
        let t = rand_tensor(&mut rng, &[4, 6, 6], -0.5, 0.5);
        checks.push(run_check("conv2d_stride1_pad1", store, move |g, s| {
            let x = g.param(s, "x")?;
            let w = g.param(s, "w")?;
            let b = g.param(s, "b")?;
            let y = g.conv2d(x, w, b, 1, 1)?;
            let tt = g.input(t.clone());
            Ok(g.mse_mean(y, tt)?)
        }, DEFAULT_STEP, tolerance)?);
    }
    {
        let x = rand_tensor(&mut rng, &[2, 7, 7], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
        let b = rand_tensor(&mut rng, &[3], -0.2, 0.2);
        let store = single_param_store(vec![("x", x), ("w", w), ("b", b)]);
        let t = rand_tensor(&mut rng, &[3, 4, 4], -0.5, 0.5);
        checks.push(run_check("conv2d_stride2_pad1", store, move |g, s| {
            let x = g.param(s, "x")?;
            let w = g.param(s, "w")?;
            let b = g.param(s, "b")?;
            let y = g.conv2d(x, w, b, 2, 1)?;
            let tt = g.input(t.clone());
            Ok(g.mse_mean(y, tt)?)
        }, DEFAULT_STEP, tolerance)?);
    }
    {
        let x = rand_tensor(&mut rng, &[3, 4, 4], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 2, 2, 2], -0.5, 0.5);
        let b = rand_tensor(&mut rng, &[2], -0.2, 0.2);
        let store = single_param_store(vec![("x", x), ("w", w), ("b", b)]);
        let t = rand_tensor(&mut rng, &[2, 8, 8], -0.5, 0.5);
        checks.push(run_check("conv_transpose2d_k2s2", store, move |g, s| {
            let x = g.param(s, "x")?;
            let w = g.param(s, "w")?;
            let b = g.param(s, "b")?;
            let y = g.conv_transpose2d(x, w, b, 2)?;
            let tt = g.input(t.clone());
            Ok(g.mse_mean(y, tt)?)
        }, DEFAULT_STEP, tolerance)?);
    }
    {
        let x = rand_tensor(&mut rng, &[6], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[4, 6], -0.5, 0.5);
        let b = rand_tensor(&mut rng, &[4], -0.2, 0.2);
        let store = single_param_store(vec![("x", x), ("w", w), ("b", b)]);
        let t = rand_tensor(&mut rng, &[4], -0.5, 0.5);
        checks.push(run_check("linear", store, move |g, s| {
            let x = g.param(s, "x")?;
            let w = g.param(s, "w")?;
            let b = g.param(s, "b")?;
            let y = g.linear(x, w, b)?;
            let tt = g.input(t.clone());
            Ok(g.mse_mean(y, tt)?)
        }, DEFAULT_STEP, tolerance)?);
    }
    for (name, alpha) in [("leaky_relu_a0.01", 0.01), ("leaky_relu_a0.2", 0.2)] {
        // Keep pre-activations away from the kink at zero.
        let mut x = rand_tensor(&mut rng, &[40], -1.0, 1.0);
        for v in x.data_mut() {
            if v.abs() < 0.02 {
                *v += 0.05;
            }
        }
        let store = single_param_store(vec![("x", x)]);
        let t = rand_tensor(&mut rng, &[40], -0.5, 0.5);
        checks.push(run_check(name, store, move |g, s| {
            let x = g.param(s, "x")?;
            let y = g.leaky_relu(x, alpha)?;
            let tt = g.input(t.clone());
            Ok(g.mse_mean(y, tt)?)
        }, DEFAULT_STEP, tolerance)?);
    }
    {
        let x = rand_tensor(&mut rng, &[30], -2.0, 2.0);
        let store = single_param_store(vec![("x", x)]);
        let t = rand_tensor(&mut rng, &[30], 0.0, 1.0);
        checks.push(run_check("sigmoid", store, move |g, s| {
            let x = g.param(s, "x")?;
            let y = g.sigmoid(x)?;
            let tt = g.input(t.clone());
            Ok(g.mse_mean(y, tt)?)
        }, DEFAULT_STEP, tolerance)?);
    }
    {
        let x = rand_tensor(&mut rng, &[30], -2.0, 2.0);
        let store = single_param_store(vec![("x", x)]);
        let t = rand_tensor(&mut rng, &[30], -1.0, 1.0);
        checks.push(run_check("tanh", store, move |g, s| {
            let x = g.param(s, "x")?;
            let y = g.tanh(x)?;
            let tt = g.input(t.clone());
            Ok(g.mse_mean(y, tt)?)
        }, DEFAULT_STEP, tolerance)?);
    }
    {
        let x = rand_tensor(&mut rng, &[3, 5, 5], -1.0, 1.0);
        let store = single_param_store(vec![("x", x)]);
        let t = rand_tensor(&mut rng, &[3, 5, 5], -1.0, 1.0);
        checks.push(run_check("instance_norm", store, move |g, s| {
            let x = g.param(s, "x")?;
            let y = g.instance_norm(x, 1e-5)?;
            let tt = g.input(t.clone());
            Ok(g.mse_mean(y, tt)?)
        }, DEFAULT_STEP, tolerance)?);
    }
    {
        let x = rand_tensor(&mut rng, &[4, 5, 5], -1.0, 1.0);
        let store = single_param_store(vec![("x", x)]);
        let t = rand_tensor(&mut rng, &[4], -1.0, 1.0);
        checks.push(run_check("global_avg_pool", store, move |g, s| {
            let x = g.param(s, "x")?;
            let y = g.global_avg_pool(x)?;
            let tt = g.input(t.clone());
            Ok(g.mse_mean(y, tt)?)
        }, DEFAULT_STEP, tolerance)?);
    }
    {
        let a = rand_tensor(&mut rng, &[2, 4, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[3, 4, 4], -1.0, 1.0);
        let store = single_param_store(vec![("a", a), ("b", b)]);
        let t = rand_tensor(&mut rng, &[5, 4, 4], -1.0, 1.0);
        checks.push(run_check("concat_channels", store, move |g, s| {
            let a = g.param(s, "a")?;
            let b = g.param(s, "b")?;
            let y = g.concat_channels(a, b)?;
            let tt = g.input(t.clone());
            Ok(g.mse_mean(y, tt)?)
        }, DEFAULT_STEP, tolerance)?);
    }
    {
        let a = rand_tensor(&mut rng, &[20], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[20], -1.0, 1.0);
        let store = single_param_store(vec![("a", a), ("b", b)]);
        let t = rand_tensor(&mut rng, &[20], -1.0, 1.0);
        checks.push(run_check("add_mul_elementwise", store, move |g, s| {
            let a = g.param(s, "a")?;
            let b = g.param(s, "b")?;
            let sum = g.add(a, b)?;
            let prod = g.mul(sum, b)?;
            let tt = g.input(t.clone());
            Ok(g.mse_mean(prod, tt)?)
        }, DEFAULT_STEP, tolerance)?);
    }
    {
        // Components sampled clear of the clamp bounds by more than the
        // finite-difference step; clipped components have zero gradient on
        // both sides so they are exercised too.
        let mut x = rand_tensor(&mut rng, &[40], -0.5, 1.5);
        for v in x.data_mut() {
            if (v.abs()).min((*v - 1.0).abs()) < 0.02 {
                *v += 0.05;
            }
        }
        let store = single_param_store(vec![("x", x)]);
        let t = rand_tensor(&mut rng, &[40], 0.0, 1.0);
        checks.push(run_check("clamp_0_1", store, move |g, s| {
            let x = g.param(s, "x")?;
            let y = g.clamp(x, 0.0, 1.0)?;
            let tt = g.input(t.clone());
            Ok(g.mse_mean(y, tt)?)
        }, DEFAULT_STEP, tolerance)?);
    }
    {
        let x = rand_tensor(&mut rng, &[3, 4, 4], -1.0, 1.0);
        let gamma = rand_tensor(&mut rng, &[3], 0.5, 1.5);
        let beta = rand_tensor(&mut rng, &[3], -0.5, 0.5);
        let store = single_param_store(vec![("x", x), ("gamma", gamma), ("beta", beta)]);
        let t = rand_tensor(&mut rng, &[3, 4, 4], -1.0, 1.0);
        checks.push(run_check("film_modulation", store, move |g, s| {
            let x = g.param(s, "x")?;
            let ga = g.param(s, "gamma")?;
            let be = g.param(s, "beta")?;
            let y = g.film(x, ga, be)?;
            let tt = g.input(t.clone());
            Ok(g.mse_mean(y, tt)?)
        }, DEFAULT_STEP, tolerance)?);
    }
    {
        let z = rand_tensor(&mut rng, &[12], -2.0, 2.0);
        let store = single_param_store(vec![("z", z)]);
        let targets: Vec<f64> = (0..12).map(|i| f64::from(i % 2 == 0)).collect();
        checks.push(run_check("bce_with_logits_mean", store, move |g, s| {
            let z = g.param(s, "z")?;
            Ok(g.bce_with_logits_mean(z, &targets)?)
        }, DEFAULT_STEP, tolerance)?);
    }

    // --- objective terms on miniature models (8x8 inputs) ---

    let gen_arch = GeneratorArch::miniature();
    let clf_arch = ResNetArch::miniature(true);
    let disc_arch = ResNetArch::miniature(false);

    let mini_image = random_image(&mut rng, 1, 8, 8);

    {
        let mut g_store: ParamStore<f64> = gen_arch.init_params(21);
        perturbed(&mut g_store, &mut rng, 0.05);
        let img = mini_image.clone();
        let ga = gen_arch.clone();
        checks.push(run_check("loss_vox_plus_reconstruction", g_store, move |g, s| {
            let x = g.input(img.clone());
            let out = build_generator(g, &ga, s, x, TargetClass::Active)?;
            Ok(g.mse_mean(out, x)?)
        }, COMPOSED_STEP, tolerance)?);
    }
    {
        let mut g_store: ParamStore<f64> = gen_arch.init_params(22);
        perturbed(&mut g_store, &mut rng, 0.05);
        let img = mini_image.clone();
        let ga = gen_arch.clone();
        checks.push(run_check("loss_vox_minus_counterfactual", g_store, move |g, s| {
            let x = g.input(img.clone());
            let out = build_generator(g, &ga, s, x, TargetClass::Inactive)?;
            Ok(g.mse_mean(out, x)?)
        }, COMPOSED_STEP, tolerance)?);
    }
    {
        // BCE on a frozen classifier reading the counterfactual: exercises
        // gradient flow through the classifier into the generator.
        let mut g_store: ParamStore<f64> = gen_arch.init_params(23);
        perturbed(&mut g_store, &mut rng, 0.05);
        let mut f_store: ParamStore<f64> = clf_arch.init_params("f", 24);
        perturbed(&mut f_store, &mut rng, 0.05);
        f_store.freeze();
        let img = mini_image.clone();
        let (ga, ca) = (gen_arch.clone(), clf_arch.clone());
        checks.push(run_check("loss_classifier_flip_term", g_store, move |g, s| {
            let x = g.input(img.clone());
            let cf = build_generator(g, &ga, s, x, TargetClass::Inactive)?;
            let logit = build_resnet(g, &ca, &f_store, "f", cf)?;
            Ok(g.bce_with_logit(logit, 0.0)?)
        }, COMPOSED_STEP, tolerance)?);
    }
    {
        let mut g_store: ParamStore<f64> = gen_arch.init_params(25);
        perturbed(&mut g_store, &mut rng, 0.05);
        let mut d_store: ParamStore<f64> = disc_arch.init_params("d", 26);
        perturbed(&mut d_store, &mut rng, 0.05);
        d_store.freeze();
        let img = mini_image.clone();
        let (ga, da) = (gen_arch.clone(), disc_arch.clone());
        checks.push(run_check("loss_adversarial_generator_term", g_store, move |g, s| {
            let x = g.input(img.clone());
            let cf = build_generator(g, &ga, s, x, TargetClass::Inactive)?;
            let logit = build_resnet(g, &da, &d_store, "d", cf)?;
            Ok(g.bce_with_logit(logit, 1.0)?)
        }, COMPOSED_STEP, tolerance)?);
    }
    {
        // The full weighted generator objective.
        let mut g_store: ParamStore<f64> = gen_arch.init_params(27);
        perturbed(&mut g_store, &mut rng, 0.05);
        let mut f_store: ParamStore<f64> = clf_arch.init_params("f", 28);
        perturbed(&mut f_store, &mut rng, 0.05);
        f_store.freeze();
        let mut d_store: ParamStore<f64> = disc_arch.init_params("d", 29);
        perturbed(&mut d_store, &mut rng, 0.05);
        d_store.freeze();
        let img = mini_image.clone();
        let (ga, ca, da) = (gen_arch.clone(), clf_arch.clone(), disc_arch.clone());
        let weights = LossWeights::default();
        checks.push(run_check("loss_generator_total", g_store, move |g, s| {
            let x = g.input(img.clone());
            let terms = build_generator_objective(
                g, &ga, s, &ca, &f_store, &da, &d_store, x, &weights,
            )?;
            Ok(terms.total)
        }, COMPOSED_STEP, tolerance)?);
    }
    {
        // Discriminator side: weighted real + fake terms, D trainable.
        let mut d_store: ParamStore<f64> = disc_arch.init_params("d", 30);
        perturbed(&mut d_store, &mut rng, 0.05);
        let real = random_image(&mut rng, 1, 8, 8);
        let fake = random_image(&mut rng, 1, 8, 8);
        let da = disc_arch.clone();
        let weights = LossWeights::default();
        checks.push(run_check("loss_discriminator_total", d_store, move |g, s| {
            let r = g.input(real.clone());
            let f = g.input(fake.clone());
            let lr = build_resnet(g, &da, s, "d", r)?;
            let lf = build_resnet(g, &da, s, "d", f)?;
            let br = g.bce_with_logit(lr, 1.0)?;
            let bf = g.bce_with_logit(lf, 0.0)?;
            Ok(g.weighted_sum(&[(bf, weights.disc_fake), (br, weights.disc_real)])?)
        }, COMPOSED_STEP, tolerance)?);
    }
    {
        // Classifier pretraining BCE with the classifier trainable.
        let mut f_store: ParamStore<f64> = clf_arch.init_params("f", 31);
        perturbed(&mut f_store, &mut rng, 0.05);
        let img = random_image(&mut rng, 1, 8, 8);
        let ca = clf_arch.clone();
        checks.push(run_check("loss_classifier_pretrain", f_store, move |g, s| {
            let x = g.input(img.clone());
            let logit = build_resnet(g, &ca, s, "f", x)?;
            Ok(g.bce_with_logit(logit, 1.0)?)
        }, COMPOSED_STEP, tolerance)?);
    }

    let all_pass = checks.iter().all(|c| c.pass);
    Ok(SuiteReport { checks, all_pass })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_at_default_tolerance() {
        let report = run_suite(DEFAULT_TOLERANCE).unwrap();
        println!("{}", report.render());
        assert!(report.all_pass, "\n{}", report.render());
        assert!(report.checks.len() >= 20);
    }

    #[test]
    fn corrupted_backward_fails_the_check() {
        // Sign-flip negative control: a wrong analytic gradient must be
        // caught.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[8], -1.0, 1.0);
        let t = rand_tensor(&mut rng, &[8], -1.0, 1.0);
        let store = single_param_store(vec![("x", x)]);
        let t2 = t.clone();
        let loss = move |s: &ParamStore<f64>| -> Result<f64, TrainError> {
            let mut g = Graph::new();
            let x = g.param(s, "x")?;
            let tt = g.input(t.clone());
            let l = g.mse_mean(x, tt)?;
            Ok(g.scalar_value(l))
        };
        let corrupted = move |s: &ParamStore<f64>| -> Result<GradMap<f64>, TrainError> {
            let mut g = Graph::new();
            let x = g.param(s, "x")?;
            let tt = g.input(t2.clone());
            let l = g.mse_mean(x, tt)?;
            let mut grads = g.backward(l)?;
            let flipped = grads.get("x").unwrap().map(|v| -v);
            grads.insert("x".into(), flipped);
            Ok(grads)
        };
        let result =
            check_gradients("negative_control", &store, &loss, &corrupted, DEFAULT_STEP, 1e-4)
                .unwrap();
        assert!(!result.pass);
        assert!(result.max_rel_err > 1.0);
    }

    #[test]
    fn oversized_fragment_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("big", Tensor::zeros(&[101, 101]));
        let loss = |_: &ParamStore<f64>| Ok(0.0);
        let grad = |_: &ParamStore<f64>| Ok(GradMap::new());
        assert!(check_gradients("too_big", &store, &loss, &grad, DEFAULT_STEP, 1e-4).is_err());
    }

    #[test]
    fn composed_conv_norm_relu_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = rand_tensor(&mut rng, &[2, 6, 6], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
        let b = rand_tensor(&mut rng, &[3], -0.2, 0.2);
        let t = rand_tensor(&mut rng, &[3, 6, 6], -1.0, 1.0);
        let store = single_param_store(vec![("x", x), ("w", w), ("b", b)]);
        let result = run_check("conv_norm_lrelu", store, move |g, s| {
            let x = g.param(s, "x")?;
            let w = g.param(s, "w")?;
            let b = g.param(s, "b")?;
            let c = g.conv2d(x, w, b, 1, 1)?;
            let n = g.instance_norm(c, 1e-5)?;
            let y = g.leaky_relu(n, 0.01)?;
            let tt = g.input(t.clone());
            Ok(g.mse_mean(y, tt)?)
        }, COMPOSED_STEP, 1e-4)
        .unwrap();
        assert!(result.pass, "max_rel_err = {}", result.max_rel_err);
    }
}
