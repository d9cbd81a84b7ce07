//! The three networks: conditional UNet generator, residual classifier and
//! discriminator.
//!
//! The generator is a 4-level encoder-decoder with skip connections. The
//! binary target class enters through the decoder only: a one-hot condition
//! is embedded and per-decoder-level heads emit FiLM scale/shift pairs. The
//! FiLM heads start at the identity modulation (gamma = 1, beta = 0), and
//! the network emits a tanh-bounded perturbation added to the input, so a
//! freshly initialized generator is already close to the identity map.
//!
//! Classifier and discriminator share one residual topology: a stem, four
//! stride-2 residual blocks, global average pooling and a linear head to a
//! single logit. The classifier normalizes with instance norm; the
//! discriminator uses no normalization and a steeper leaky slope.

use crate::error::TensorError;
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::phantom::Image;
use crate::tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Conditioning target for the generator: `Inactive` requests counterfactual
/// synthesis, `Active` requests factual reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetClass {
    Inactive,
    Active,
}

impl TargetClass {
    pub fn index(self) -> usize {
        match self {
            TargetClass::Inactive => 0,
            TargetClass::Active => 1,
        }
    }

    fn onehot<S: Scalar>(self) -> Tensor<S> {
        let mut v = vec![S::zero(); 2];
        v[self.index()] = S::one();
        Tensor::from_vec(&[2], v).expect("onehot")
    }
}

/// Generator architecture descriptor. `widths` lists encoder channel counts
/// per level; the last entry is the bottleneck.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub embed_dim: usize,
    pub leaky_slope: f64,
    pub norm_eps: f64,
}

impl GeneratorArch {
    /// Desk-scale default: channels 16/32/64/128.
    pub fn desk() -> Self {
        GeneratorArch {
            in_channels: 1,
            widths: vec![16, 32, 64, 128],
            embed_dim: 16,
            leaky_slope: 0.01,
            norm_eps: 1e-5,
        }
    }

    /// Tiny variant for gradient checks.
    pub fn miniature() -> Self {
        GeneratorArch {
            in_channels: 1,
            widths: vec![2, 4],
            embed_dim: 4,
            leaky_slope: 0.01,
            norm_eps: 1e-5,
        }
    }

    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Input side length must be divisible by this.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.levels() - 1)
    }

    /// Initializes all generator parameters under the `g.` prefix.
    ///
    /// Convolutions use He fan-in scaling; the perturbation head is scaled
    /// down so training starts near the identity map; FiLM gamma/beta heads
    /// start with zero weights and biases of one/zero, the exact identity
    /// modulation.
    pub fn init_params<S: Scalar>(&self, seed: u64) -> ParamStore<S> {
        assert!(self.levels() >= 2, "generator needs at least two levels");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = &self.widths;

        conv_init(&mut store, &mut rng, "g.enc0.c1", w[0], self.in_channels, 3, 1.0);
        conv_init(&mut store, &mut rng, "g.enc0.c2", w[0], w[0], 3, 1.0);
        for l in 1..self.levels() {
            conv_init(&mut store, &mut rng, &format!("g.enc{l}.c1"), w[l], w[l - 1], 3, 1.0);
            conv_init(&mut store, &mut rng, &format!("g.enc{l}.c2"), w[l], w[l], 3, 1.0);
        }
        for l in (0..self.levels() - 1).rev() {
            // Transposed conv: weight shape [Cin, Cout, k, k].
            let (cin, cout) = (w[l + 1], w[l]);
            let std = (2.0 / (cin * 4) as f64).sqrt();
            store.insert(&format!("g.up{l}.w"), normal_tensor(&mut rng, &[cin, cout, 2, 2], std));
            store.insert(&format!("g.up{l}.b"), Tensor::zeros(&[cout]));
            conv_init(&mut store, &mut rng, &format!("g.dec{l}.c1"), w[l], 2 * w[l], 3, 1.0);
            conv_init(&mut store, &mut rng, &format!("g.dec{l}.c2"), w[l], w[l], 3, 1.0);
        }

        // Condition path: one-hot -> embedding -> per-level FiLM heads.
        let e = self.embed_dim;
        linear_init(&mut store, &mut rng, "g.cond.embed", e, 2);
        for l in 0..self.levels() - 1 {
            let c = w[l];
            linear_init(&mut store, &mut rng, &format!("g.cond.lvl{l}.hid"), e, e);
            store.insert(&format!("g.cond.lvl{l}.gamma.w"), Tensor::zeros(&[c, e]));
            store.insert(&format!("g.cond.lvl{l}.gamma.b"), Tensor::filled(&[c], S::one()));
            store.insert(&format!("g.cond.lvl{l}.beta.w"), Tensor::zeros(&[c, e]));
            store.insert(&format!("g.cond.lvl{l}.beta.b"), Tensor::zeros(&[c]));
        }

        conv_init(&mut store, &mut rng, "g.head", self.in_channels, w[0], 3, 0.1);
        store
    }

    /// Checks that every expected tensor exists with the right shape.
    pub fn validate(&self, store: &ParamStore<f32>) -> Result<(), TensorError> {
        let probe = self.init_params::<f32>(0);
        validate_same_shapes(&probe, store)
    }
}

/// Residual network descriptor for the classifier and discriminator.
/// `widths[0]` is the stem width; each later entry is one stride-2 block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResNetArch {
    pub in_channels: usize,
    pub widths: Vec<usize>,
    pub normalize: bool,
    pub leaky_slope: f64,
    pub norm_eps: f64,
}

impl ResNetArch {
    /// 4-block classifier with instance norm.
    pub fn classifier() -> Self {
        ResNetArch {
            in_channels: 1,
            widths: vec![16, 32, 64, 128, 128],
            normalize: true,
            leaky_slope: 0.01,
            norm_eps: 1e-5,
        }
    }

    /// 4-block discriminator: no normalization, steeper slope.
    pub fn discriminator() -> Self {
        ResNetArch {
            in_channels: 1,
            widths: vec![16, 32, 64, 128, 128],
            normalize: false,
            leaky_slope: 0.2,
            norm_eps: 1e-5,
        }
    }

    /// Tiny variant for gradient checks.
    pub fn miniature(normalize: bool) -> Self {
        ResNetArch {
            in_channels: 1,
            widths: vec![2, 3],
            normalize,
            leaky_slope: 0.01,
            norm_eps: 1e-5,
        }
    }

    pub fn blocks(&self) -> usize {
        self.widths.len() - 1
    }

    /// Initializes parameters under `<prefix>.`.
    pub fn init_params<S: Scalar>(&self, prefix: &str, seed: u64) -> ParamStore<S> {
        assert!(self.widths.len() >= 2, "resnet needs a stem and at least one block");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        conv_init(
            &mut store,
            &mut rng,
            &format!("{prefix}.stem"),
            self.widths[0],
            self.in_channels,
            3,
            1.0,
        );
        for b in 1..self.widths.len() {
            let (cin, cout) = (self.widths[b - 1], self.widths[b]);
            conv_init(&mut store, &mut rng, &format!("{prefix}.blk{}.c1", b - 1), cout, cin, 3, 1.0);
            conv_init(&mut store, &mut rng, &format!("{prefix}.blk{}.c2", b - 1), cout, cout, 3, 1.0);
            conv_init(&mut store, &mut rng, &format!("{prefix}.blk{}.skip", b - 1), cout, cin, 1, 1.0);
        }
        linear_init(&mut store, &mut rng, &format!("{prefix}.fc"), 1, *self.widths.last().unwrap());
        store
    }

    pub fn validate(&self, prefix: &str, store: &ParamStore<f32>) -> Result<(), TensorError> {
        let probe = self.init_params::<f32>(prefix, 0);
        validate_same_shapes(&probe, store)
    }
}

fn normal_tensor<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<S> {
    let dist = Normal::<f64>::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::from_f64(dist.sample(rng))).collect();
    Tensor::from_vec(shape, data).expect("init shape")
}

fn conv_init<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cout: usize,
    cin: usize,
    k: usize,
    gain: f64,
) {
    let fan_in = (cin * k * k) as f64;
    let std = gain * (2.0 / fan_in).sqrt();
    store.insert(&format!("{name}.w"), normal_tensor(rng, &[cout, cin, k, k], std));
    store.insert(&format!("{name}.b"), Tensor::zeros(&[cout]));
}

fn linear_init<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha8Rng,
    name: &str,
    fout: usize,
    fin: usize,
) {
    let std = (2.0 / fin as f64).sqrt();
    store.insert(&format!("{name}.w"), normal_tensor(rng, &[fout, fin], std));
    store.insert(&format!("{name}.b"), Tensor::zeros(&[fout]));
}

fn validate_same_shapes<S: Scalar>(
    probe: &ParamStore<S>,
    store: &ParamStore<S>,
) -> Result<(), TensorError> {
    for (name, e) in probe.iter() {
        let got = store.get(name).ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        if got.shape() != e.tensor.shape() {
            return Err(TensorError::GradMismatch {
                name: name.to_string(),
                detail: format!("shape {:?}, descriptor wants {:?}", got.shape(), e.tensor.shape()),
            });
        }
    }
    if store.len() != probe.len() {
        return Err(TensorError::GradMismatch {
            name: "store".into(),
            detail: format!("{} tensors, descriptor wants {}", store.len(), probe.len()),
        });
    }
    Ok(())
}

/// conv -> instance norm -> leaky relu.
#[allow(clippy::too_many_arguments)]
fn conv_block<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    name: &str,
    x: NodeId,
    stride: usize,
    slope: f64,
    norm: bool,
    eps: f64,
) -> Result<NodeId, TensorError> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    let mut h = g.conv2d(x, w, b, stride, 1)?;
    if norm {
        h = g.instance_norm(h, eps)?;
    }
    g.leaky_relu(h, S::from_f64(slope))
}

/// Encoder skips, shallowest first; the last entry is the bottleneck.
pub fn build_generator_encoder<S: Scalar>(
    g: &mut Graph<S>,
    arch: &GeneratorArch,
    store: &ParamStore<S>,
    x: NodeId,
) -> Result<Vec<NodeId>, TensorError> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 3 || shape[0] != arch.in_channels {
        return Err(TensorError::ShapeMismatch {
            op: "generator",
            detail: format!("input {shape:?}, want [{}, H, W]", arch.in_channels),
        });
    }
    let div = arch.spatial_divisor();
    if shape[1] % div != 0 || shape[2] % div != 0 || shape[1] < div * 2 {
        return Err(TensorError::ShapeMismatch {
            op: "generator",
            detail: format!("spatial {}x{} not divisible by {div}", shape[1], shape[2]),
        });
    }
    let slope = arch.leaky_slope;
    let eps = arch.norm_eps;
    let mut skips = Vec::with_capacity(arch.levels());
    let mut h = conv_block(g, store, "g.enc0.c1", x, 1, slope, true, eps)?;
    h = conv_block(g, store, "g.enc0.c2", h, 1, slope, true, eps)?;
    skips.push(h);
    for l in 1..arch.levels() {
        h = conv_block(g, store, &format!("g.enc{l}.c1"), h, 2, slope, true, eps)?;
        h = conv_block(g, store, &format!("g.enc{l}.c2"), h, 1, slope, true, eps)?;
        skips.push(h);
    }
    Ok(skips)
}

/// FiLM scale/shift for one decoder level from the condition embedding.
fn film_coefs<S: Scalar>(
    g: &mut Graph<S>,
    arch: &GeneratorArch,
    store: &ParamStore<S>,
    embed: NodeId,
    level: usize,
) -> Result<(NodeId, NodeId), TensorError> {
    let hw = g.param(store, &format!("g.cond.lvl{level}.hid.w"))?;
    let hb = g.param(store, &format!("g.cond.lvl{level}.hid.b"))?;
    let mut h = g.linear(embed, hw, hb)?;
    h = g.leaky_relu(h, S::from_f64(arch.leaky_slope))?;
    let gw = g.param(store, &format!("g.cond.lvl{level}.gamma.w"))?;
    let gb = g.param(store, &format!("g.cond.lvl{level}.gamma.b"))?;
    let gamma = g.linear(h, gw, gb)?;
    let bw = g.param(store, &format!("g.cond.lvl{level}.beta.w"))?;
    let bb = g.param(store, &format!("g.cond.lvl{level}.beta.b"))?;
    let beta = g.linear(h, bw, bb)?;
    Ok((gamma, beta))
}

/// Decoder pass for one target class over precomputed encoder skips.
/// Returns the generator output `clamp(x + tanh(head), 0, 1)`.
pub fn build_generator_decoder<S: Scalar>(
    g: &mut Graph<S>,
    arch: &GeneratorArch,
    store: &ParamStore<S>,
    x: NodeId,
    skips: &[NodeId],
    target: TargetClass,
) -> Result<NodeId, TensorError> {
    let slope = arch.leaky_slope;
    let eps = arch.norm_eps;

    let onehot = g.input(target.onehot());
    let ew = g.param(store, "g.cond.embed.w")?;
    let eb = g.param(store, "g.cond.embed.b")?;
    let mut embed = g.linear(onehot, ew, eb)?;
    embed = g.leaky_relu(embed, S::from_f64(slope))?;

    let mut h = *skips.last().expect("encoder skips");
    for l in (0..arch.levels() - 1).rev() {
        let uw = g.param(store, &format!("g.up{l}.w"))?;
        let ub = g.param(store, &format!("g.up{l}.b"))?;
        h = g.conv_transpose2d(h, uw, ub, 2)?;
        h = g.concat_channels(h, skips[l])?;
        h = conv_block(g, store, &format!("g.dec{l}.c1"), h, 1, slope, true, eps)?;
        // Second conv carries the FiLM modulation between norm and
        // activation.
        let w = g.param(store, &format!("g.dec{l}.c2.w"))?;
        let b = g.param(store, &format!("g.dec{l}.c2.b"))?;
        let mut d = g.conv2d(h, w, b, 1, 1)?;
        d = g.instance_norm(d, eps)?;
        let (gamma, beta) = film_coefs(g, arch, store, embed, l)?;
        d = g.film(d, gamma, beta)?;
        h = g.leaky_relu(d, S::from_f64(slope))?;
    }

    let hw = g.param(store, "g.head.w")?;
    let hb = g.param(store, "g.head.b")?;
    let delta = g.conv2d(h, hw, hb, 1, 1)?;
    let delta = g.tanh(delta)?;
    let sum = g.add(x, delta)?;
    g.clamp(sum, S::zero(), S::one())
}

/// Full generator pass for one target class.
pub fn build_generator<S: Scalar>(
    g: &mut Graph<S>,
    arch: &GeneratorArch,
    store: &ParamStore<S>,
    x: NodeId,
    target: TargetClass,
) -> Result<NodeId, TensorError> {
    let skips = build_generator_encoder(g, arch, store, x)?;
    build_generator_decoder(g, arch, store, x, &skips, target)
}

/// Reconstruction and counterfactual passes sharing one encoder run; the
/// condition enters through the decoder only, so the encoder activations
/// are identical for both target classes.
pub fn build_generator_pair<S: Scalar>(
    g: &mut Graph<S>,
    arch: &GeneratorArch,
    store: &ParamStore<S>,
    x: NodeId,
) -> Result<(NodeId, NodeId), TensorError> {
    let skips = build_generator_encoder(g, arch, store, x)?;
    let recon = build_generator_decoder(g, arch, store, x, &skips, TargetClass::Active)?;
    let cf = build_generator_decoder(g, arch, store, x, &skips, TargetClass::Inactive)?;
    Ok((recon, cf))
}

/// Residual network to a single logit node (`[1]`).
pub fn build_resnet<S: Scalar>(
    g: &mut Graph<S>,
    arch: &ResNetArch,
    store: &ParamStore<S>,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId, TensorError> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 3 || shape[0] != arch.in_channels {
        return Err(TensorError::ShapeMismatch {
            op: "resnet",
            detail: format!("input {shape:?}, want [{}, H, W]", arch.in_channels),
        });
    }
    let slope = S::from_f64(arch.leaky_slope);
    let mut h = conv_block(
        g,
        store,
        &format!("{prefix}.stem"),
        x,
        1,
        arch.leaky_slope,
        arch.normalize,
        arch.norm_eps,
    )?;
    for blk in 0..arch.blocks() {
        let name = format!("{prefix}.blk{blk}");
        let c1 = conv_block(
            g,
            store,
            &format!("{name}.c1"),
            h,
            2,
            arch.leaky_slope,
            arch.normalize,
            arch.norm_eps,
        )?;
        let w2 = g.param(store, &format!("{name}.c2.w"))?;
        let b2 = g.param(store, &format!("{name}.c2.b"))?;
        let mut main = g.conv2d(c1, w2, b2, 1, 1)?;
        if arch.normalize {
            main = g.instance_norm(main, arch.norm_eps)?;
        }
        let sw = g.param(store, &format!("{name}.skip.w"))?;
        let sb = g.param(store, &format!("{name}.skip.b"))?;
        let skip = g.conv2d(h, sw, sb, 2, 0)?;
        let sum = g.add(main, skip)?;
        h = g.leaky_relu(sum, slope)?;
    }
    let pooled = g.global_avg_pool(h)?;
    let fw = g.param(store, &format!("{prefix}.fc.w"))?;
    let fb = g.param(store, &format!("{prefix}.fc.b"))?;
    g.linear(pooled, fw, fb)
}

/// Runs the generator on an image without keeping gradients.
pub fn generator_forward(
    arch: &GeneratorArch,
    store: &ParamStore<f32>,
    image: &Image,
    target: TargetClass,
) -> Result<Image, TensorError> {
    let mut g = Graph::new();
    let x = g.input(image.to_tensor());
    let out = build_generator(&mut g, arch, store, x, target)?;
    Ok(Image::from_tensor(g.value(out)).expect("generator output stays in [0,1]"))
}

/// Classifier logit for one image.
pub fn classifier_forward(
    arch: &ResNetArch,
    store: &ParamStore<f32>,
    image: &Image,
) -> Result<f32, TensorError> {
    resnet_forward(arch, store, "f", image)
}

/// Discriminator logit for one image.
pub fn discriminator_forward(
    arch: &ResNetArch,
    store: &ParamStore<f32>,
    image: &Image,
) -> Result<f32, TensorError> {
    resnet_forward(arch, store, "d", image)
}

fn resnet_forward(
    arch: &ResNetArch,
    store: &ParamStore<f32>,
    prefix: &str,
    image: &Image,
) -> Result<f32, TensorError> {
    let mut g = Graph::new();
    let x = g.input(image.to_tensor());
    let logit = build_resnet(&mut g, arch, store, prefix, x)?;
    Ok(g.scalar_value(logit))
}

/// Logistic probability of the positive class.
pub fn prob_from_logit(logit: f32) -> f64 {
    1.0 / (1.0 + (-logit as f64).exp())
}
