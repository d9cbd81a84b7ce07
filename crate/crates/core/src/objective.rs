//! Composite training objectives.
//!
//! Generator side: a reconstruction MSE on the active-conditioned pass, a
//! counterfactual MSE on the inactive-conditioned pass, a binary cross
//! entropy pushing the frozen classifier's verdict on the counterfactual to
//! inactive, and a non-saturating adversarial term from the discriminator.
//! Discriminator side: real inactive images score one, generated
//! counterfactuals score zero, with the generator held fixed.
//!
//! All batch losses are means over per-sample graphs; the per-sample graphs
//! are evaluated in parallel and reduced in index order so results do not
//! depend on thread scheduling.

use crate::error::TrainError;
use crate::graph::{Graph, NodeId};
use crate::models::{build_generator, build_generator_pair, build_resnet, GeneratorArch, ResNetArch, TargetClass};
use crate::params::{GradMap, ParamStore};
use crate::phantom::{Image, SubjectRecord};
use crate::tensor::Scalar;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Loss term weights. `vox_plus`/`vox_minus`/`classifier`/`adversarial`
/// weight the generator objective; `disc_fake`/`disc_real` weight the
/// discriminator objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub vox_plus: f64,
    pub vox_minus: f64,
    pub classifier: f64,
    pub adversarial: f64,
    pub disc_fake: f64,
    pub disc_real: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        // Reconstruction dominates early; the ablation arm sets vox_minus
        // to zero.
        LossWeights {
            vox_plus: 20.0,
            vox_minus: 5.0,
            classifier: 1.0,
            adversarial: 1.0,
            disc_fake: 1.0,
            disc_real: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        let all = [
            ("vox_plus", self.vox_plus),
            ("vox_minus", self.vox_minus),
            ("classifier", self.classifier),
            ("adversarial", self.adversarial),
            ("disc_fake", self.disc_fake),
            ("disc_real", self.disc_real),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v >= 0.0) {
                return Err(TrainError::Invalid(format!("loss weight {name} = {v} is invalid")));
            }
        }
        Ok(())
    }
}

/// Generator loss components (unweighted means over the batch) plus the
/// weighted total.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GenLossReport {
    pub batch_size: usize,
    pub vox_plus: f64,
    pub vox_minus: f64,
    pub classifier: f64,
    pub adversarial: f64,
    pub total: f64,
}

/// Discriminator loss components (unweighted means) plus the weighted total.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DiscLossReport {
    pub batch_size: usize,
    pub fake: f64,
    pub real: f64,
    pub total: f64,
}

/// Assembles the discriminator report from per-sample BCE values.
pub fn disc_report_from_losses(fake: &[f64], real: &[f64], w: &LossWeights) -> DiscLossReport {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let (fake, real) = (mean(fake), mean(real));
    DiscLossReport {
        batch_size: 0,
        fake,
        real,
        total: w.disc_fake * fake + w.disc_real * real,
    }
}

/// Per-sample generator loss term nodes; exposed so the gradient-check
/// suite can verify each term of the objective in isolation.
pub struct GenLossTerms {
    pub recon: NodeId,
    pub cf: NodeId,
    pub vox_plus: NodeId,
    pub vox_minus: NodeId,
    pub classifier: NodeId,
    pub adversarial: NodeId,
    pub total: NodeId,
}

/// Builds the full per-sample generator objective on `graph`.
///
/// The classifier and discriminator are bound as constants: their ops carry
/// gradient back into the generator but accumulate none for themselves.
#[allow(clippy::too_many_arguments)]
pub fn build_generator_objective<S: Scalar>(
    graph: &mut Graph<S>,
    gen_arch: &GeneratorArch,
    g_store: &ParamStore<S>,
    clf_arch: &ResNetArch,
    f_store: &ParamStore<S>,
    disc_arch: &ResNetArch,
    d_store: &ParamStore<S>,
    x: NodeId,
    weights: &LossWeights,
) -> Result<GenLossTerms, TrainError> {
    let (recon, cf) = build_generator_pair(graph, gen_arch, g_store, x)?;
    let vox_plus = graph.mse_mean(recon, x)?;
    let vox_minus = graph.mse_mean(cf, x)?;
    let clf_logit = graph.bind_frozen(|g| build_resnet(g, clf_arch, f_store, "f", cf))?;
    let classifier = graph.bce_with_logit(clf_logit, 0.0)?;
    // Non-saturating generator term: -log sigma(D(cf)).
    let disc_logit = graph.bind_frozen(|g| build_resnet(g, disc_arch, d_store, "d", cf))?;
    let adversarial = graph.bce_with_logit(disc_logit, 1.0)?;
    let total = graph.weighted_sum(&[
        (vox_plus, weights.vox_plus),
        (vox_minus, weights.vox_minus),
        (classifier, weights.classifier),
        (adversarial, weights.adversarial),
    ])?;
    Ok(GenLossTerms { recon, cf, vox_plus, vox_minus, classifier, adversarial, total })
}

/// Generator update: batched loss report plus gradients for the generator
/// parameters only. The batch must contain active subjects and the
/// classifier must be frozen.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss(
    gen_arch: &GeneratorArch,
    g_store: &ParamStore<f32>,
    clf_arch: &ResNetArch,
    f_store: &ParamStore<f32>,
    disc_arch: &ResNetArch,
    d_store: &ParamStore<f32>,
    batch: &[&SubjectRecord],
    weights: &LossWeights,
) -> Result<(GenLossReport, GradMap<f32>), TrainError> {
    weights.validate()?;
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch("generator batch"));
    }
    if !f_store.is_frozen() {
        return Err(TrainError::Invalid("classifier must be frozen during generator training".into()));
    }
    for r in batch {
        if !r.activity_label {
            return Err(TrainError::InactiveSubject(r.id.clone()));
        }
    }

    let per_sample: Vec<(f64, f64, f64, f64, GradMap<f32>)> = batch
        .par_iter()
        .map(|r| -> Result<_, TrainError> {
            let mut graph = Graph::<f32>::new();
            let x = graph.input(r.baseline.to_tensor());
            let terms = build_generator_objective(
                &mut graph, gen_arch, g_store, clf_arch, f_store, disc_arch, d_store, x, weights,
            )?;
            let grads = graph.backward(terms.total)?;
            Ok((
                graph.scalar_value(terms.vox_plus) as f64,
                graph.scalar_value(terms.vox_minus) as f64,
                graph.scalar_value(terms.classifier) as f64,
                graph.scalar_value(terms.adversarial) as f64,
                grads,
            ))
        })
        .collect::<Result<_, _>>()?;

    let n = batch.len() as f64;
    let mut acc = GradMap::new();
    let (mut vp, mut vm, mut lc, mut ld) = (0.0, 0.0, 0.0, 0.0);
    for (a, b, c, d, g) in &per_sample {
        vp += a / n;
        vm += b / n;
        lc += c / n;
        ld += d / n;
        acc.accumulate(g)?;
    }
    acc.scale(1.0 / n as f32);

    let report = GenLossReport {
        batch_size: batch.len(),
        vox_plus: vp,
        vox_minus: vm,
        classifier: lc,
        adversarial: ld,
        total: weights.vox_plus * vp
            + weights.vox_minus * vm
            + weights.classifier * lc
            + weights.adversarial * ld,
    };
    if !report.total.is_finite() {
        return Err(TrainError::NonFiniteValue);
    }
    Ok((report, acc))
}

/// Discriminator update: real inactive images vs detached counterfactuals.
/// No gradient reaches the generator; the fakes enter as plain inputs.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_loss(
    disc_arch: &ResNetArch,
    d_store: &ParamStore<f32>,
    gen_arch: &GeneratorArch,
    g_store: &ParamStore<f32>,
    active_batch: &[&SubjectRecord],
    inactive_batch: &[&SubjectRecord],
    weights: &LossWeights,
) -> Result<(DiscLossReport, GradMap<f32>), TrainError> {
    weights.validate()?;
    if active_batch.is_empty() {
        return Err(TrainError::EmptyBatch("active batch for discriminator fakes"));
    }
    if inactive_batch.is_empty() {
        return Err(TrainError::EmptyBatch("real inactive batch"));
    }
    for r in active_batch {
        if !r.activity_label {
            return Err(TrainError::InactiveSubject(r.id.clone()));
        }
    }
    for r in inactive_batch {
        if r.activity_label {
            return Err(TrainError::Invalid(format!(
                "active subject {} in the real inactive batch",
                r.id
            )));
        }
    }

    // Detached counterfactuals: forward-only generator passes.
    let fakes: Vec<Image> = active_batch
        .par_iter()
        .map(|r| -> Result<Image, TrainError> {
            let mut graph = Graph::<f32>::new();
            let x = graph.input(r.baseline.to_tensor());
            let cf = graph.bind_frozen(|g| {
                build_generator(g, gen_arch, g_store, x, TargetClass::Inactive)
            })?;
            Ok(Image::from_tensor(graph.value(cf))
                .expect("generator output stays in [0,1]"))
        })
        .collect::<Result<_, _>>()?;

    let fake_terms: Vec<(f64, GradMap<f32>)> = fakes
        .par_iter()
        .map(|img| disc_bce(disc_arch, d_store, img, 0.0))
        .collect::<Result<_, _>>()?;
    let real_terms: Vec<(f64, GradMap<f32>)> = inactive_batch
        .par_iter()
        .map(|r| disc_bce(disc_arch, d_store, &r.baseline, 1.0))
        .collect::<Result<_, _>>()?;

    let mut acc = GradMap::new();
    let nf = fake_terms.len() as f32;
    for (_, g) in &fake_terms {
        let mut g = g.clone();
        g.scale(weights.disc_fake as f32 / nf);
        acc.accumulate(&g)?;
    }
    let nr = real_terms.len() as f32;
    for (_, g) in &real_terms {
        let mut g = g.clone();
        g.scale(weights.disc_real as f32 / nr);
        acc.accumulate(&g)?;
    }

    let fake_losses: Vec<f64> = fake_terms.iter().map(|(v, _)| *v).collect();
    let real_losses: Vec<f64> = real_terms.iter().map(|(v, _)| *v).collect();
    let mut report = disc_report_from_losses(&fake_losses, &real_losses, weights);
    report.batch_size = active_batch.len() + inactive_batch.len();
    if !report.total.is_finite() {
        return Err(TrainError::NonFiniteValue);
    }
    Ok((report, acc))
}

fn disc_bce(
    disc_arch: &ResNetArch,
    d_store: &ParamStore<f32>,
    image: &Image,
    target: f64,
) -> Result<(f64, GradMap<f32>), TrainError> {
    let mut graph = Graph::<f32>::new();
    let x = graph.input(image.to_tensor());
    let logit = build_resnet(&mut graph, disc_arch, d_store, "d", x)?;
    let loss = graph.bce_with_logit(logit, target)?;
    let grads = graph.backward(loss)?;
    Ok((graph.scalar_value(loss) as f64, grads))
}

/// Classifier pretraining: mean BCE-with-logits over labeled images.
pub fn classifier_pretrain_loss(
    clf_arch: &ResNetArch,
    f_store: &ParamStore<f32>,
    batch: &[(&Image, bool)],
) -> Result<(f64, GradMap<f32>), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch("classifier batch"));
    }
    let per_sample: Vec<(f64, GradMap<f32>)> = batch
        .par_iter()
        .map(|(img, label)| -> Result<_, TrainError> {
            let mut graph = Graph::<f32>::new();
            let x = graph.input(img.to_tensor());
            let logit = build_resnet(&mut graph, clf_arch, f_store, "f", x)?;
            let loss = graph.bce_with_logit(logit, f64::from(*label))?;
            let grads = graph.backward(loss)?;
            Ok((graph.scalar_value(loss) as f64, grads))
        })
        .collect::<Result<_, _>>()?;

    let n = batch.len() as f64;
    let mut acc = GradMap::new();
    let mut loss = 0.0;
    for (v, g) in &per_sample {
        loss += v / n;
        acc.accumulate(g)?;
    }
    acc.scale(1.0 / n as f32);
    if !loss.is_finite() {
        return Err(TrainError::NonFiniteValue);
    }
    Ok((loss, acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{synthesize_subject, GenParams};
    use approx::assert_relative_eq;

    fn small_setup() -> (GeneratorArch, ParamStore<f32>, ResNetArch, ParamStore<f32>, ResNetArch, ParamStore<f32>) {
        // 2-level generator on 32x32 phantoms keeps these tests quick.
        let gen_arch = GeneratorArch {
            in_channels: 1,
            widths: vec![4, 8],
            embed_dim: 8,
            leaky_slope: 0.01,
            norm_eps: 1e-5,
        };
        let clf_arch = ResNetArch {
            widths: vec![4, 8],
            ..ResNetArch::classifier()
        };
        let disc_arch = ResNetArch {
            widths: vec![4, 8],
            ..ResNetArch::discriminator()
        };
        let g_store = gen_arch.init_params(1);
        let mut f_store = clf_arch.init_params("f", 2);
        f_store.freeze();
        let d_store = disc_arch.init_params("d", 3);
        (gen_arch, g_store, clf_arch, f_store, disc_arch, d_store)
    }

    fn subjects(n: usize, active: bool) -> Vec<SubjectRecord> {
        let p = GenParams { image_size: 32, area_threshold: 30, low_area_max: 24, high_area_min: 40, high_area_max: 70, ..GenParams::default() };
        let mut out = Vec::new();
        let mut seed = 0;
        while out.len() < n {
            let s = synthesize_subject(seed, &p).unwrap();
            if s.activity_label == active {
                out.push(s);
            }
            seed += 1;
        }
        out
    }

    #[test]
    fn identity_generator_zeroes_both_voxel_terms() {
        let (gen_arch, mut g_store, clf_arch, f_store, disc_arch, d_store) = small_setup();
        g_store.get_mut("g.head.w").unwrap().scale_assign(0.0);
        g_store.get_mut("g.head.b").unwrap().scale_assign(0.0);
        let subs = subjects(2, true);
        let batch: Vec<&SubjectRecord> = subs.iter().collect();
        let (report, _) = generator_loss(
            &gen_arch, &g_store, &clf_arch, &f_store, &disc_arch, &d_store, &batch,
            &LossWeights::default(),
        )
        .unwrap();
        assert_eq!(report.vox_plus, 0.0);
        assert_eq!(report.vox_minus, 0.0);
        assert!(report.classifier >= 0.0 && report.adversarial >= 0.0);
    }

    #[test]
    fn zero_weight_networks_give_ln2_components() {
        let (gen_arch, g_store, clf_arch, mut f_store, disc_arch, mut d_store) = small_setup();
        for name in f_store.names().map(String::from).collect::<Vec<_>>() {
            f_store.get_mut(&name).unwrap().scale_assign(0.0);
        }
        for name in d_store.names().map(String::from).collect::<Vec<_>>() {
            d_store.get_mut(&name).unwrap().scale_assign(0.0);
        }
        let subs = subjects(2, true);
        let batch: Vec<&SubjectRecord> = subs.iter().collect();
        let (report, _) = generator_loss(
            &gen_arch, &g_store, &clf_arch, &f_store, &disc_arch, &d_store, &batch,
            &LossWeights::default(),
        )
        .unwrap();
        assert_relative_eq!(report.classifier, std::f64::consts::LN_2, max_relative = 1e-6);
        assert_relative_eq!(report.adversarial, std::f64::consts::LN_2, max_relative = 1e-6);

        let inact = subjects(2, false);
        let ibatch: Vec<&SubjectRecord> = inact.iter().collect();
        let (dreport, _) = discriminator_loss(
            &disc_arch, &d_store, &gen_arch, &g_store, &batch, &ibatch,
            &LossWeights::default(),
        )
        .unwrap();
        assert_relative_eq!(dreport.fake, std::f64::consts::LN_2, max_relative = 1e-6);
        assert_relative_eq!(dreport.real, std::f64::consts::LN_2, max_relative = 1e-6);
    }

    #[test]
    fn perfect_discriminator_loss_tends_to_zero() {
        // BCE limit with confident logits on both branches.
        let report = disc_report_from_losses(
            &[(20.0f64).exp().ln_1p() - 20.0 + 0.0],
            &[(-20.0f64).exp().ln_1p()],
            &LossWeights::default(),
        );
        assert!(report.total < 1e-8, "total = {}", report.total);
    }

    #[test]
    fn inactive_subject_in_generator_batch_is_rejected() {
        let (gen_arch, g_store, clf_arch, f_store, disc_arch, d_store) = small_setup();
        let subs = subjects(1, false);
        let batch: Vec<&SubjectRecord> = subs.iter().collect();
        let err = generator_loss(
            &gen_arch, &g_store, &clf_arch, &f_store, &disc_arch, &d_store, &batch,
            &LossWeights::default(),
        )
        .unwrap_err();
        assert!(matches!(err, TrainError::InactiveSubject(_)));
    }

    #[test]
    fn unfrozen_classifier_is_rejected() {
        let (gen_arch, g_store, clf_arch, _, disc_arch, d_store) = small_setup();
        let unfrozen = clf_arch.init_params("f", 2);
        let subs = subjects(1, true);
        let batch: Vec<&SubjectRecord> = subs.iter().collect();
        assert!(matches!(
            generator_loss(
                &gen_arch, &g_store, &clf_arch, &unfrozen, &disc_arch, &d_store, &batch,
                &LossWeights::default(),
            ),
            Err(TrainError::Invalid(_))
        ));
    }

    #[test]
    fn generator_grads_touch_only_generator_params() {
        let (gen_arch, g_store, clf_arch, f_store, disc_arch, d_store) = small_setup();
        let subs = subjects(2, true);
        let batch: Vec<&SubjectRecord> = subs.iter().collect();
        let (_, grads) = generator_loss(
            &gen_arch, &g_store, &clf_arch, &f_store, &disc_arch, &d_store, &batch,
            &LossWeights::default(),
        )
        .unwrap();
        assert!(grads.names().all(|n| n.starts_with("g.")));
        assert_eq!(grads.len(), g_store.len());
        assert!(grads.max_abs() > 0.0);
    }

    #[test]
    fn discriminator_grads_touch_only_discriminator_params() {
        let (gen_arch, g_store, _, _, disc_arch, d_store) = small_setup();
        let act = subjects(2, true);
        let inact = subjects(2, false);
        let ab: Vec<&SubjectRecord> = act.iter().collect();
        let ib: Vec<&SubjectRecord> = inact.iter().collect();
        let (_, grads) = discriminator_loss(
            &disc_arch, &d_store, &gen_arch, &g_store, &ab, &ib, &LossWeights::default(),
        )
        .unwrap();
        assert!(grads.names().all(|n| n.starts_with("d.")));
        assert_eq!(grads.len(), d_store.len());
    }

    #[test]
    fn component_contributions_scale_linearly_in_their_weight() {
        let (gen_arch, g_store, clf_arch, f_store, disc_arch, d_store) = small_setup();
        let subs = subjects(2, true);
        let batch: Vec<&SubjectRecord> = subs.iter().collect();
        let w1 = LossWeights::default();
        let mut w2 = w1;
        w2.classifier *= 2.0;
        let (r1, _) = generator_loss(
            &gen_arch, &g_store, &clf_arch, &f_store, &disc_arch, &d_store, &batch, &w1,
        )
        .unwrap();
        let (r2, _) = generator_loss(
            &gen_arch, &g_store, &clf_arch, &f_store, &disc_arch, &d_store, &batch, &w2,
        )
        .unwrap();
        // Components are weight-independent; the total moves by exactly the
        // extra classifier contribution.
        assert_eq!(r1.classifier, r2.classifier);
        assert_eq!(r1.vox_plus, r2.vox_plus);
        assert_relative_eq!(
            r2.total - r1.total,
            w1.classifier * r1.classifier,
            max_relative = 1e-12
        );
    }

    #[test]
    fn zero_weight_matches_omitted_term_exactly() {
        let (gen_arch, g_store, clf_arch, f_store, disc_arch, d_store) = small_setup();
        let subs = subjects(2, true);
        let batch: Vec<&SubjectRecord> = subs.iter().collect();
        let mut w = LossWeights::default();
        w.classifier = 0.0;
        let (_, with_zero) = generator_loss(
            &gen_arch, &g_store, &clf_arch, &f_store, &disc_arch, &d_store, &batch, &w,
        )
        .unwrap();

        // Hand-built variant that never constructs the classifier term.
        let n = batch.len() as f32;
        let mut omitted = GradMap::new();
        for r in &batch {
            let mut graph = Graph::<f32>::new();
            let x = graph.input(r.baseline.to_tensor());
            let (recon, cf) = build_generator_pair(&mut graph, &gen_arch, &g_store, x).unwrap();
            let vp = graph.mse_mean(recon, x).unwrap();
            let vm = graph.mse_mean(cf, x).unwrap();
            let dl = graph
                .bind_frozen(|g| build_resnet(g, &disc_arch, &d_store, "d", cf))
                .unwrap();
            let adv = graph.bce_with_logit(dl, 1.0).unwrap();
            let total = graph
                .weighted_sum(&[(vp, w.vox_plus), (vm, w.vox_minus), (adv, w.adversarial)])
                .unwrap();
            omitted.accumulate(&graph.backward(total).unwrap()).unwrap();
        }
        omitted.scale(1.0 / n);

        for name in with_zero.names() {
            let a = with_zero.get(name).unwrap();
            let b = omitted.get(name).unwrap();
            assert_eq!(a.data(), b.data(), "gradient mismatch for {name}");
        }
    }

    #[test]
    fn pretrain_loss_matches_closed_forms() {
        let clf_arch = ResNetArch { widths: vec![4, 8], ..ResNetArch::classifier() };
        let mut f_store: ParamStore<f32> = clf_arch.init_params("f", 5);
        for name in f_store.names().map(String::from).collect::<Vec<_>>() {
            f_store.get_mut(&name).unwrap().scale_assign(0.0);
        }
        let subs = subjects(2, true);
        let batch: Vec<(&Image, bool)> =
            subs.iter().map(|s| (&s.baseline, s.activity_label)).collect();
        let (loss, grads) = classifier_pretrain_loss(&clf_arch, &f_store, &batch).unwrap();
        // Zero weights -> logit 0 -> ln 2 regardless of labels.
        assert_relative_eq!(loss, std::f64::consts::LN_2, max_relative = 1e-6);
        assert!(grads.names().all(|n| n.starts_with("f.")));
    }
}
