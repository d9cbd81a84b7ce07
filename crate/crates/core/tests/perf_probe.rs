//! Manual timing probe for the training hot path; run explicitly with
//! `cargo test --release -p cfsynth --test perf_probe -- --ignored --nocapture`.

use cfsynth::graph::Graph;
use cfsynth::models::{
    build_generator_pair, build_resnet, GeneratorArch, ResNetArch, TargetClass,
};
use cfsynth::phantom::{synthesize_subject, GenParams};
use rayon::prelude::*;
use std::time::Instant;

#[test]
#[ignore]
fn time_one_training_step_equivalent() {
    let gen_arch = GeneratorArch::desk();
    let clf_arch = ResNetArch::classifier();
    let g_store = gen_arch.init_params::<f32>(1);
    let mut f_store = clf_arch.init_params::<f32>("f", 2);
    f_store.freeze();

    let params = GenParams::default();
    let images: Vec<_> =
        (0..16).map(|i| synthesize_subject(i, &params).unwrap().baseline).collect();

    // Generator pass: encoder shared, both decoders, classifier on the CF,
    // backward through everything.
    let t0 = Instant::now();
    let grads: Vec<_> = images
        .par_iter()
        .map(|img| {
            let mut g = Graph::<f32>::new();
            let x = g.input(img.to_tensor());
            let (recon, cf) = build_generator_pair(&mut g, &gen_arch, &g_store, x).unwrap();
            let l_vox_plus = g.mse_mean(recon, x).unwrap();
            let l_vox_minus = g.mse_mean(cf, x).unwrap();
            let logit = build_resnet(&mut g, &clf_arch, &f_store, "f", cf).unwrap();
            let l_c = g.bce_with_logit(logit, 0.0).unwrap();
            let total = g
                .weighted_sum(&[(l_vox_plus, 20.0), (l_vox_minus, 5.0), (l_c, 1.0)])
                .unwrap();
            g.backward(total).unwrap()
        })
        .collect();
    let g_step = t0.elapsed();
    assert_eq!(grads.len(), 16);

    // Plain forward of the generator CF branch (discriminator-step cost).
    let t1 = Instant::now();
    let outs: Vec<_> = images
        .par_iter()
        .map(|img| {
            let mut g = Graph::<f32>::new();
            let x = g.input(img.to_tensor());
            let out =
                cfsynth::models::build_generator(&mut g, &gen_arch, &g_store, x, TargetClass::Inactive)
                    .unwrap();
            g.value(out).item()
        })
        .collect();
    let g_fwd = t1.elapsed();
    assert_eq!(outs.len(), 16);

    println!("generator step (batch 16, fwd+bwd, f attached): {g_step:?}");
    println!("generator forward only (batch 16):             {g_fwd:?}");
}
