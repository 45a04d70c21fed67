//! The four networks: K domain generators, the Siamese feature extractor,
//! the projection head and the classification head.
//!
//! Layers are plain index structs. All trainable arrays live in the
//! bundle's parameter registry and all batch-norm buffers in its buffer
//! registry, so a forward pass only needs a [`Ctx`] over those two.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::engine::{
    conv_out_len, BnMode, ParamFactory, ParamId, Parameter, Real, RunningStats, Tape, Tensor, Var, STD_EPS,
};
use crate::error::{Error, Result};
use crate::spectra::{normalize, Spectrum};

/// Sub-network a parameter or buffer belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Generators,
    Extractor,
    Projection,
    Classifier,
}

impl Group {
    pub const TASK: [Group; 3] = [Group::Extractor, Group::Projection, Group::Classifier];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Spectrum length L.
    pub length: usize,
    pub classes: usize,
    /// Number of domain generators K.
    pub generators: usize,
    /// Encoder widths (first conv, second conv); the decoder mirrors them.
    pub generator_channels: [usize; 2],
    pub extractor_stem: usize,
    /// Output width of each residual module.
    pub extractor_modules: Vec<usize>,
    /// Projection dimension d_z.
    pub embedding_dim: usize,
    #[serde(default)]
    pub generator_init: GeneratorInit,
}

/// Starting point of the domain generators.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorInit {
    /// Kaiming weights throughout.
    Random,
    /// Shared smoothing kernels with batch-norm shifts that keep every
    /// ReLU near its linear range, so each generator starts as a low-pass
    /// near-identity and training moves it from there.
    #[default]
    Smoothing,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            length: 954,
            classes: 9,
            generators: 3,
            generator_channels: [32, 64],
            extractor_stem: 100,
            extractor_modules: vec![200],
            embedding_dim: 64,
            generator_init: GeneratorInit::Smoothing,
        }
    }
}

impl ModelConfig {
    pub fn feature_dim(&self) -> usize {
        *self.extractor_modules.last().unwrap_or(&self.extractor_stem)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("length", self.length),
            ("classes", self.classes),
            ("generator_channels[0]", self.generator_channels[0]),
            ("generator_channels[1]", self.generator_channels[1]),
            ("extractor_stem", self.extractor_stem),
            ("embedding_dim", self.embedding_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.length < 8 {
            return Err(Error::Config("length must be at least 8".into()));
        }
        if self.extractor_modules.iter().any(|&c| c == 0) {
            return Err(Error::Config("extractor module widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
    /// Extra trailing output length; only used by transposed convolutions.
    pub output_padding: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainGenerator {
    pub enc1: Conv,
    pub enc1_bn: Norm,
    pub enc2: Conv,
    pub enc2_bn: Norm,
    pub style_mu: ParamId,
    /// Pre-image of σ under softplus.
    pub style_sigma_raw: ParamId,
    pub dec1: Conv,
    pub dec1_bn: Norm,
    pub dec2: Conv,
    pub out_scale: ParamId,
    pub out_shift: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub conv1: Conv,
    pub bn1: Norm,
    pub conv2: Conv,
    pub bn2: Norm,
    pub shortcut: Option<(Conv, Norm)>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    pub stem: Conv,
    pub stem_bn: Norm,
    pub blocks: Vec<ResidualBlock>,
}

/// A named batch-norm buffer pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Buffer<T> {
    pub name: String,
    pub group: Group,
    pub stats: RunningStats<T>,
}

#[derive(Clone, Debug)]
pub struct ModelBundle<T: Real> {
    pub config: ModelConfig,
    pub params: Vec<Parameter<T>>,
    pub groups: Vec<Group>,
    pub buffers: Vec<Buffer<T>>,
    pub generators: Vec<DomainGenerator>,
    pub extractor: FeatureExtractor,
    pub projection: Option<Dense>,
    pub classifier: Dense,
}

/// Per-forward binding of registry entries to a tape.
///
/// Frozen parameters are bound as constants: their gradients would be
/// discarded by the optimizer anyway, so the backward sweep skips them.
pub struct Ctx<'a, T: Real> {
    pub tape: &'a mut Tape<T>,
    params: &'a [Parameter<T>],
    buffers: &'a mut [Buffer<T>],
    bound: Vec<Option<Var>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, params: &'a [Parameter<T>], buffers: &'a mut [Buffer<T>]) -> Self {
        Self {
            tape,
            bound: vec![None; params.len()],
            params,
            buffers,
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id] {
            return v;
        }
        let p = &self.params[id];
        let v = if p.frozen {
            self.tape.constant(p.value.clone())
        } else {
            p.bind(self.tape)
        };
        self.bound[id] = Some(v);
        v
    }

    fn conv(&mut self, x: Var, c: &Conv) -> Result<Var> {
        let (w, b) = (self.p(c.weight), self.p(c.bias));
        self.tape.conv1d(x, w, b, c.stride, c.padding)
    }

    fn tconv(&mut self, x: Var, c: &Conv) -> Result<Var> {
        let (w, b) = (self.p(c.weight), self.p(c.bias));
        self.tape.transpose_conv1d_padded(x, w, b, c.stride, c.padding, c.output_padding)
    }

    fn norm(&mut self, x: Var, n: &Norm, mode: BnMode) -> Result<Var> {
        let (g, b) = (self.p(n.gamma), self.p(n.beta));
        let stats = &mut self.buffers[n.stats].stats;
        self.tape.batch_norm1d(x, g, b, stats, mode, T::lit(STD_EPS))
    }

    fn dense(&mut self, x: Var, d: &Dense) -> Result<Var> {
        let (w, b) = (self.p(d.weight), self.p(d.bias));
        self.tape.linear(x, w, b)
    }
}

/// `σ_S · (h − μ(h)) / σ(h) + μ_S` with per-sample, per-channel statistics.
pub fn adain<T: Real>(tape: &mut Tape<T>, h: Var, mu_s: Var, sigma_s: Var) -> Result<Var> {
    let (mu, sigma) = tape.channel_stats(h, T::lit(STD_EPS))?;
    let z = tape.standardize(h, mu, sigma)?;
    tape.channel_affine(z, sigma_s, mu_s)
}

impl DomainGenerator {
    /// ℰ: two conv-BN-ReLU stages, the second halving the length.
    pub fn encode<T: Real>(&self, ctx: &mut Ctx<T>, x: Var, mode: BnMode) -> Result<Var> {
        let h = ctx.conv(x, &self.enc1)?;
        let h = ctx.norm(h, &self.enc1_bn, mode)?;
        let h = ctx.tape.relu(h);
        let h = ctx.conv(h, &self.enc2)?;
        let h = ctx.norm(h, &self.enc2_bn, mode)?;
        Ok(ctx.tape.relu(h))
    }

    /// 𝒮: AdaIN towards the learned style.
    pub fn stylize<T: Real>(&self, ctx: &mut Ctx<T>, h: Var) -> Result<Var> {
        let mu = ctx.p(self.style_mu);
        let raw = ctx.p(self.style_sigma_raw);
        let sigma = ctx.tape.softplus(raw);
        adain(ctx.tape, h, mu, sigma)
    }

    /// 𝒟: mirrored transposed convolutions and a scalar affine output.
    pub fn decode<T: Real>(&self, ctx: &mut Ctx<T>, h: Var, mode: BnMode) -> Result<Var> {
        let y = ctx.tconv(h, &self.dec1)?;
        let y = ctx.norm(y, &self.dec1_bn, mode)?;
        let y = ctx.tape.relu(y);
        let y = ctx.tconv(y, &self.dec2)?;
        let (s, b) = (ctx.p(self.out_scale), ctx.p(self.out_shift));
        ctx.tape.channel_affine(y, s, b)
    }

    /// `x_E = 𝒟(𝒮(ℰ(x_S)))`.
    pub fn generate<T: Real>(&self, ctx: &mut Ctx<T>, x: Var, mode: BnMode) -> Result<Var> {
        let h = self.encode(ctx, x, mode)?;
        let h = self.stylize(ctx, h)?;
        self.decode(ctx, h, mode)
    }
}

impl ResidualBlock {
    fn forward<T: Real>(&self, ctx: &mut Ctx<T>, x: Var, mode: BnMode) -> Result<Var> {
        let h = ctx.conv(x, &self.conv1)?;
        let h = ctx.norm(h, &self.bn1, mode)?;
        let h = ctx.tape.relu(h);
        let h = ctx.conv(h, &self.conv2)?;
        let h = ctx.norm(h, &self.bn2, mode)?;
        let skip = match &self.shortcut {
            Some((c, n)) => {
                let s = ctx.conv(x, c)?;
                ctx.norm(s, n, mode)?
            }
            None => x,
        };
        let y = ctx.tape.add(h, skip)?;
        Ok(ctx.tape.relu(y))
    }
}

impl FeatureExtractor {
    /// ℱ: stem, residual blocks, global average pool to `[batch, d_feat]`.
    pub fn extract<T: Real>(&self, ctx: &mut Ctx<T>, x: Var, mode: BnMode) -> Result<Var> {
        let h = ctx.conv(x, &self.stem)?;
        let h = ctx.norm(h, &self.stem_bn, mode)?;
        let mut h = ctx.tape.relu(h);
        for b in &self.blocks {
            h = b.forward(ctx, h, mode)?;
        }
        ctx.tape.global_avg_pool(h)
    }
}

/// 𝒫: linear map then unit L2 norm per row.
pub fn project<T: Real>(ctx: &mut Ctx<T>, head: &Dense, feat: Var) -> Result<Var> {
    let z = ctx.dense(feat, head)?;
    ctx.tape.l2_normalize(z, T::lit(STD_EPS))
}

/// 𝒞: raw logits.
pub fn classify<T: Real>(ctx: &mut Ctx<T>, head: &Dense, feat: Var) -> Result<Var> {
    ctx.dense(feat, head)
}

struct Builder<'r> {
    factory: ParamFactory<'r, ChaCha8Rng>,
}

struct Registry<T> {
    params: Vec<Parameter<T>>,
    groups: Vec<Group>,
    buffers: Vec<Buffer<T>>,
}

impl<T: Real> Registry<T> {
    fn push(&mut self, group: Group, p: Parameter<T>) -> ParamId {
        let id = p.id;
        debug_assert_eq!(id, self.params.len());
        self.params.push(p);
        self.groups.push(group);
        id
    }
}

/// Width in axis steps of the encoder's initial Gaussian kernel.
const SMOOTHING_SIGMA: f64 = 1.5;

/// Batch-norm shift that keeps the following ReLU in its linear range.
const SMOOTHING_BN_OFFSET: f64 = 1.0;

/// Weight of the Kaiming draw kept on top of the structured kernels.
const SMOOTHING_INIT_NOISE: f64 = 0.01;

/// Every output channel receives the channel mean of the input convolved
/// with `kernel`.
fn shared_kernel(cin: usize, cout: usize, kernel: &[f64], out_major: bool) -> Vec<f64> {
    let k = kernel.len();
    let mut w = vec![0.0; cin * cout * k];
    for o in 0..cout {
        for i in 0..cin {
            for (t, &c) in kernel.iter().enumerate() {
                let idx = if out_major { (o * cin + i) * k + t } else { (i * cout + o) * k + t };
                w[idx] = c / cin as f64;
            }
        }
    }
    w
}

fn smoothing_init<T: Real>(reg: &mut Registry<T>, [enc1, enc2, dec1, dec2]: [ParamId; 4], norms: [Norm; 3]) {
    let gauss: Vec<f64> = {
        let raw: Vec<f64> = (-3..=3).map(|i: i32| (-(i * i) as f64 / (2.0 * SMOOTHING_SIGMA * SMOOTHING_SIGMA)).exp()).collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| v / s).collect()
    };
    let binomial = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    // Even taps and odd taps each sum to one: a smooth ×2 interpolator.
    let upsample = [0.125, 0.5, 0.75, 0.5, 0.125];
    let delta = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
    for (id, kernel, out_major) in [
        (enc1, &gauss[..], true),
        (enc2, &binomial[..], true),
        (dec1, &upsample[..], false),
        (dec2, &delta[..], false),
    ] {
        let shape = reg.params[id].value.shape().to_vec();
        let (cin, cout) = if out_major { (shape[1], shape[0]) } else { (shape[0], shape[1]) };
        let structured = shared_kernel(cin, cout, kernel, out_major);
        for (v, s) in reg.params[id].value.data_mut().iter_mut().zip(structured) {
            *v = T::lit(s + SMOOTHING_INIT_NOISE * v.as_f64());
        }
    }
    for n in norms {
        reg.params[n.beta].value.data_mut().iter_mut().for_each(|v| *v = T::lit(SMOOTHING_BN_OFFSET));
    }
}

impl Builder<'_> {
    fn conv<T: Real>(
        &mut self,
        reg: &mut Registry<T>,
        g: Group,
        name: &str,
        (cin, cout, k): (usize, usize, usize),
        stride: usize,
        padding: usize,
    ) -> Conv {
        let weight = self.factory.kaiming(format!("{name}.weight"), &[cout, cin, k], cin * k);
        let weight = reg.push(g, weight);
        let bias = reg.push(g, self.factory.constant(format!("{name}.bias"), &[cout], 0.0));
        Conv {
            weight,
            bias,
            stride,
            padding,
            output_padding: 0,
        }
    }

    /// Transposed convolution; weight layout `[in_ch, out_ch, k]`.
    fn tconv<T: Real>(
        &mut self,
        reg: &mut Registry<T>,
        g: Group,
        name: &str,
        (cin, cout, k): (usize, usize, usize),
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Conv {
        // Each output position receives about k / stride input taps per channel.
        let fan_in = (cin * k / stride).max(1);
        let weight = reg.push(g, self.factory.kaiming(format!("{name}.weight"), &[cin, cout, k], fan_in));
        let bias = reg.push(g, self.factory.constant(format!("{name}.bias"), &[cout], 0.0));
        Conv {
            weight,
            bias,
            stride,
            padding,
            output_padding,
        }
    }

    fn norm<T: Real>(&mut self, reg: &mut Registry<T>, g: Group, name: &str, ch: usize) -> Norm {
        let gamma = reg.push(g, self.factory.constant(format!("{name}.gamma"), &[ch], 1.0));
        let beta = reg.push(g, self.factory.constant(format!("{name}.beta"), &[ch], 0.0));
        reg.buffers.push(Buffer {
            name: name.to_string(),
            group: g,
            stats: RunningStats::new(ch),
        });
        Norm {
            gamma,
            beta,
            stats: reg.buffers.len() - 1,
        }
    }

    fn dense<T: Real>(&mut self, reg: &mut Registry<T>, g: Group, name: &str, din: usize, dout: usize) -> Dense {
        let weight = reg.push(g, self.factory.kaiming(format!("{name}.weight"), &[dout, din], din));
        let bias = reg.push(g, self.factory.constant(format!("{name}.bias"), &[dout], 0.0));
        Dense { weight, bias }
    }

    fn generator<T: Real>(&mut self, reg: &mut Registry<T>, k: usize, cfg: &ModelConfig) -> DomainGenerator {
        let g = Group::Generators;
        let [c1, c2] = cfg.generator_channels;
        let n = |s: &str| format!("generator.{k}.{s}");
        let enc1 = self.conv(reg, g, &n("encoder.conv1"), (1, c1, 7), 1, 3);
        let enc1_bn = self.norm(reg, g, &n("encoder.bn1"), c1);
        let enc2 = self.conv(reg, g, &n("encoder.conv2"), (c1, c2, 5), 2, 2);
        let enc2_bn = self.norm(reg, g, &n("encoder.bn2"), c2);

        let noise = Normal::new(0.0, 0.1).expect("finite");
        let mu: Vec<f64> = (0..c2).map(|_| noise.sample(self.factory.rng())).collect();
        // softplus(ln(e - 1)) = 1
        let raw0 = (std::f64::consts::E - 1.0).ln();
        let raw: Vec<f64> = (0..c2).map(|_| raw0 + noise.sample(self.factory.rng())).collect();
        let style_mu = self.factory.make(n("style.mu"), Tensor::from_f64(&[c2], &mu).expect("shape"));
        let style_mu = reg.push(g, style_mu);
        let style_sigma_raw = self.factory.make(n("style.sigma_raw"), Tensor::from_f64(&[c2], &raw).expect("shape"));
        let style_sigma_raw = reg.push(g, style_sigma_raw);

        let half = conv_out_len(cfg.length, 5, 2, 2).expect("validated length");
        // (half - 1)·2 − 4 + 5 + op = L
        let op = cfg.length + 1 - 2 * half;
        let dec1 = self.tconv(reg, g, &n("decoder.tconv1"), (c2, c1, 5), 2, 2, op);
        let dec1_bn = self.norm(reg, g, &n("decoder.bn1"), c1);
        let dec2 = self.tconv(reg, g, &n("decoder.tconv2"), (c1, 1, 7), 1, 3, 0);
        if cfg.generator_init == GeneratorInit::Smoothing {
            smoothing_init(reg, [enc1.weight, enc2.weight, dec1.weight, dec2.weight], [enc1_bn, enc2_bn, dec1_bn]);
        }
        let out_scale = reg.push(g, self.factory.constant(n("decoder.out.scale"), &[1], 1.0));
        let out_shift = reg.push(g, self.factory.constant(n("decoder.out.shift"), &[1], 0.0));
        DomainGenerator {
            enc1,
            enc1_bn,
            enc2,
            enc2_bn,
            style_mu,
            style_sigma_raw,
            dec1,
            dec1_bn,
            dec2,
            out_scale,
            out_shift,
        }
    }

    fn block<T: Real>(&mut self, reg: &mut Registry<T>, name: &str, cin: usize, cout: usize, stride: usize) -> ResidualBlock {
        let g = Group::Extractor;
        let conv1 = self.conv(reg, g, &format!("{name}.conv1"), (cin, cout, 3), stride, 1);
        let bn1 = self.norm(reg, g, &format!("{name}.bn1"), cout);
        let conv2 = self.conv(reg, g, &format!("{name}.conv2"), (cout, cout, 3), 1, 1);
        let bn2 = self.norm(reg, g, &format!("{name}.bn2"), cout);
        let shortcut = (cin != cout || stride != 1).then(|| {
            let c = self.conv(reg, g, &format!("{name}.shortcut.conv"), (cin, cout, 1), stride, 0);
            let n = self.norm(reg, g, &format!("{name}.shortcut.bn"), cout);
            (c, n)
        });
        ResidualBlock {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        }
    }

    fn extractor<T: Real>(&mut self, reg: &mut Registry<T>, cfg: &ModelConfig) -> FeatureExtractor {
        let g = Group::Extractor;
        let stem = self.conv(reg, g, "extractor.stem.conv", (1, cfg.extractor_stem, 7), 2, 3);
        let stem_bn = self.norm(reg, g, "extractor.stem.bn", cfg.extractor_stem);
        let mut blocks = Vec::new();
        let mut cin = cfg.extractor_stem;
        for (m, &cout) in cfg.extractor_modules.iter().enumerate() {
            blocks.push(self.block(reg, &format!("extractor.module{m}.block0"), cin, cin, 1));
            let stride = if cout == cin { 1 } else { 2 };
            blocks.push(self.block(reg, &format!("extractor.module{m}.block1"), cin, cout, stride));
            cin = cout;
        }
        FeatureExtractor { stem, stem_bn, blocks }
    }
}

impl<T: Real> ModelBundle<T> {
    /// Full ACDG bundle: K generators, extractor, projection and classifier.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(config, seed, true)
    }

    /// Extractor and classifier only (the cross-entropy baseline).
    pub fn classifier_only(mut config: ModelConfig, seed: u64) -> Result<Self> {
        config.generators = 0;
        Self::build(config, seed, false)
    }

    fn build(config: ModelConfig, seed: u64, full: bool) -> Result<Self> {
        config.validate()?;
        if full && config.generators == 0 {
            return Err(Error::Config("at least one generator is required".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            factory: ParamFactory::new(&mut rng),
        };
        let mut reg = Registry {
            params: Vec::new(),
            groups: Vec::new(),
            buffers: Vec::new(),
        };
        let generators = (0..config.generators).map(|k| b.generator(&mut reg, k, &config)).collect();
        let extractor = b.extractor(&mut reg, &config);
        let d = config.feature_dim();
        let projection = full.then(|| b.dense(&mut reg, Group::Projection, "projection", d, config.embedding_dim));
        let classifier = b.dense(&mut reg, Group::Classifier, "classifier", d, config.classes);
        Ok(Self {
            config,
            params: reg.params,
            groups: reg.groups,
            buffers: reg.buffers,
            generators,
            extractor,
            projection,
            classifier,
        })
    }

    pub fn ctx<'a>(&'a mut self, tape: &'a mut Tape<T>) -> Ctx<'a, T> {
        Ctx::new(tape, &self.params, &mut self.buffers)
    }

    pub fn param_by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_count(&self, group: Group) -> usize {
        self.params
            .iter()
            .zip(&self.groups)
            .filter(|(_, g)| **g == group)
            .map(|(p, _)| p.value.numel())
            .sum()
    }

    pub fn set_frozen(&mut self, group: Group, frozen: bool) {
        for (p, g) in self.params.iter_mut().zip(&self.groups) {
            if *g == group {
                p.frozen = frozen;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(Parameter::zero_grad);
    }

    /// Copies parameter gradients from a swept tape into the registry.
    pub fn collect_grads(&mut self, tape: &Tape<T>) {
        for (id, g) in tape.param_grads() {
            self.params[id].accumulate_grad(g);
        }
    }

    /// SHA-256 over the group's parameter values and batch-norm buffers.
    pub fn group_hash(&self, group: Group) -> String {
        let mut h = Sha256::new();
        for (p, _) in self.params.iter().zip(&self.groups).filter(|(_, g)| **g == group) {
            h.update(p.name.as_bytes());
            p.value.data().iter().for_each(|v| h.update(v.as_f64().to_le_bytes()));
        }
        for b in self.buffers.iter().filter(|b| b.group == group) {
            h.update(b.name.as_bytes());
            b.stats.mean.iter().chain(&b.stats.var).for_each(|v| h.update(v.as_f64().to_le_bytes()));
        }
        hex::encode(h.finalize())
    }

    /// Every stored array in registry order: parameters first, then each
    /// buffer's running mean and running variance.
    pub fn named_arrays(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out: Vec<(String, Vec<usize>, &[T])> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec(), p.value.data()))
            .collect();
        for b in &self.buffers {
            let c = b.stats.mean.len();
            out.push((format!("{}.running_mean", b.name), vec![c], &b.stats.mean));
            out.push((format!("{}.running_var", b.name), vec![c], &b.stats.var));
        }
        out
    }

    /// Mutable view matching [`ModelBundle::named_arrays`] order.
    pub fn named_arrays_mut(&mut self) -> Vec<(String, Vec<usize>, &mut [T])> {
        let mut out: Vec<(String, Vec<usize>, &mut [T])> = Vec::new();
        for p in self.params.iter_mut() {
            let shape = p.value.shape().to_vec();
            out.push((p.name.clone(), shape, p.value.data_mut()));
        }
        for b in self.buffers.iter_mut() {
            let c = b.stats.mean.len();
            out.push((format!("{}.running_mean", b.name), vec![c], &mut b.stats.mean));
            out.push((format!("{}.running_var", b.name), vec![c], &mut b.stats.var));
        }
        out
    }

    fn input(&self, tape: &mut Tape<T>, rows: &[Vec<f64>]) -> Result<Var> {
        let l = self.config.length;
        if let Some(r) = rows.iter().find(|r| r.len() != l) {
            return Err(Error::Dimension(format!("input length {} does not match model length {l}", r.len())));
        }
        if rows.is_empty() {
            return Err(Error::Config("empty input batch".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Ok(tape.constant(Tensor::from_f64(&[rows.len(), 1, l], &flat)?))
    }

    /// Eval-mode forward over a scratch copy of the buffers, so `&self`
    /// suffices and bundles can be shared across threads.
    fn eval_with<R>(&self, f: impl FnOnce(&mut Ctx<T>, &Self) -> Result<R>) -> Result<R> {
        let mut tape = Tape::new();
        let mut buffers = self.buffers.clone();
        let mut ctx = Ctx::new(&mut tape, &self.params, &mut buffers);
        f(&mut ctx, self)
    }

    /// Generator `k` applied to already normalized inputs.
    pub fn generate_eval(&self, k: usize, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let g = *self
            .generators
            .get(k)
            .ok_or_else(|| Error::Usage(format!("generator {k} does not exist")))?;
        self.eval_with(|ctx, m| {
            let x = m.input(ctx.tape, rows)?;
            let y = g.generate(ctx, x, BnMode::Eval)?;
            Ok(rows_of(ctx.tape.value(y), rows.len()))
        })
    }

    /// Mean of the K generators' eval-mode outputs on normalized inputs.
    pub fn denoise_rows(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if self.generators.is_empty() {
            return Err(Error::Usage("bundle has no domain generators to denoise with".into()));
        }
        let k = self.generators.len() as f64;
        let mut acc = vec![vec![0.0; self.config.length]; rows.len()];
        for g in 0..self.generators.len() {
            for (a, y) in acc.iter_mut().zip(self.generate_eval(g, rows)?) {
                a.iter_mut().zip(y).for_each(|(a, v)| *a += v);
            }
        }
        acc.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v /= k));
        Ok(acc)
    }

    /// Eval-mode logits on normalized inputs.
    pub fn logits_rows(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.eval_with(|ctx, m| {
            let x = m.input(ctx.tape, rows)?;
            let f = m.extractor.extract(ctx, x, BnMode::Eval)?;
            let y = classify(ctx, &m.classifier, f)?;
            Ok(rows_of(ctx.tape.value(y), rows.len()))
        })
    }

    /// Eval-mode projection embeddings on normalized inputs.
    pub fn embed_rows(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let head = self
            .projection
            .ok_or_else(|| Error::Usage("bundle has no projection head".into()))?;
        self.eval_with(|ctx, m| {
            let x = m.input(ctx.tape, rows)?;
            let f = m.extractor.extract(ctx, x, BnMode::Eval)?;
            let z = project(ctx, &head, f)?;
            Ok(rows_of(ctx.tape.value(z), rows.len()))
        })
    }

    pub fn predict_rows(&self, rows: &[Vec<f64>]) -> Result<Vec<usize>> {
        Ok(self.logits_rows(rows)?.iter().map(|r| argmax(r)).collect())
    }
}

/// Min-max normalizes a raw spectrum and averages the K generators.
/// The result lives in the normalized model-input space.
pub fn denoise<T: Real>(bundle: &ModelBundle<T>, x: &Spectrum) -> Result<Spectrum> {
    let y = bundle.denoise_rows(&[normalize(&x.intensities)])?;
    Ok(x.with_intensities(y.into_iter().next().expect("one row")))
}

pub fn argmax(r: &[f64]) -> usize {
    r.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn rows_of<T: Real>(t: &Tensor<T>, n: usize) -> Vec<Vec<f64>> {
    let v = t.to_f64_vec();
    let w = v.len() / n;
    v.chunks(w).map(<[f64]>::to_vec).collect()
}
