//! The trainable noise predictor: a small two-resolution U-Net with
//! sinusoidal timestep conditioning, its pretraining loop on the toy
//! photograph domain, an analytic verification oracle, and checkpoint I/O.

mod format;
mod oracle;

pub use format::{load_denoiser, save_denoiser, TrainState, SDFZ_MAGIC, SDFZ_VERSION};
pub use oracle::LinearGaussianOracle;

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diffusion::{q_sample, Denoiser};
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::tensor::random::{kaiming_normal, standard_normal};
use crate::tensor::{
    adam_step, AdamState, Ctx, Eager, GradMap, NdArray, ParamSet, Precision, Tape, TapeBinding,
    Taped, Var,
};
use rand::Rng;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Architecture hyperparameters. Widths double per level.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub base_width: usize,
    pub levels: usize,
    pub time_embed_dim: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            base_width: 32,
            levels: 2,
            time_embed_dim: 64,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 || !self.image_size.is_power_of_two() {
            return Err(Error::Config(format!(
                "image_size must be a power of two >= 16, got {}",
                self.image_size
            )));
        }
        if self.levels == 0 || self.image_size % (1 << self.levels) != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by 2^levels (levels = {})",
                self.image_size, self.levels
            )));
        }
        if self.base_width == 0 {
            return Err(Error::Config("base_width must be positive".into()));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "time_embed_dim must be even and >= 2, got {}",
                self.time_embed_dim
            )));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level
    }
}

enum Init {
    Kaiming(usize),
    Zero,
    One,
}

/// Parameter table in registration order; the order fixes both the RNG draw
/// sequence at init and the on-disk layout.
fn param_specs(cfg: &DenoiserConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.time_embed_dim;
    let mut specs = vec![
        ("temb.fc1.w".into(), vec![d, d], Init::Kaiming(d)),
        ("temb.fc1.b".into(), vec![d], Init::Zero),
        ("temb.fc2.w".into(), vec![d, d], Init::Kaiming(d)),
        ("temb.fc2.b".into(), vec![d], Init::Zero),
    ];
    let w0 = cfg.width(0);
    specs.push(("stem.w".into(), vec![w0, 3, 3, 3], Init::Kaiming(27)));
    specs.push(("stem.b".into(), vec![w0], Init::Zero));
    for l in 0..cfg.levels {
        let wl = cfg.width(l);
        specs.push((format!("enc{l}.affine.g"), vec![wl], Init::One));
        specs.push((format!("enc{l}.affine.b"), vec![wl], Init::Zero));
        specs.push((format!("enc{l}.temb.w"), vec![d, 2 * wl], Init::Kaiming(d)));
        specs.push((format!("enc{l}.temb.b"), vec![2 * wl], Init::Zero));
        let inner = (wl / 2).max(1);
        specs.push((
            format!("enc{l}.conv1.w"),
            vec![inner, wl, 3, 3],
            Init::Kaiming(wl * 9),
        ));
        specs.push((format!("enc{l}.conv1.b"), vec![inner], Init::Zero));
        specs.push((
            format!("enc{l}.conv2.w"),
            vec![wl, inner, 1, 1],
            Init::Kaiming(inner),
        ));
        specs.push((format!("enc{l}.conv2.b"), vec![wl], Init::Zero));
        if l + 1 < cfg.levels {
            let wn = cfg.width(l + 1);
            specs.push((
                format!("down{l}.w"),
                vec![wn, wl, 2, 2],
                Init::Kaiming(wl * 4),
            ));
            specs.push((format!("down{l}.b"), vec![wn], Init::Zero));
        }
    }
    for l in (0..cfg.levels.saturating_sub(1)).rev() {
        let (wl, wn) = (cfg.width(l), cfg.width(l + 1));
        specs.push((
            format!("up{l}.w"),
            vec![wn, wl, 2, 2],
            Init::Kaiming(wn * 4),
        ));
        specs.push((format!("up{l}.b"), vec![wl], Init::Zero));
        specs.push((
            format!("fuse{l}.w"),
            vec![wl, 2 * wl, 1, 1],
            Init::Kaiming(2 * wl),
        ));
        specs.push((format!("fuse{l}.b"), vec![wl], Init::Zero));
    }
    specs.push(("head.w".into(), vec![3, w0, 3, 3], Init::Kaiming(w0 * 9)));
    specs.push(("head.b".into(), vec![3], Init::Zero));
    specs
}

/// Noise predictor parameters plus their architecture echo.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    config: DenoiserConfig,
    params: ParamSet,
}

impl DenoiserParams {
    /// Seeded Gaussian init (std sqrt(2/fan_in)); values are f32-quantized so
    /// checkpoints round-trip bit-exactly.
    pub fn init(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = crate::tensor::random::rng_from_seed(config.seed);
        let mut params = ParamSet::new();
        for (name, shape, init) in param_specs(&config) {
            let value = match init {
                Init::Kaiming(fan_in) => kaiming_normal(&shape, fan_in, &mut rng),
                Init::Zero => NdArray::zeros(&shape),
                Init::One => NdArray::full(&shape, 1.0),
            };
            params.insert(&name, value.quantized_f32())?;
        }
        Ok(Self { config, params })
    }

    pub(crate) fn from_parts(config: DenoiserConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        for (name, shape, _) in param_specs(&config) {
            match params.get(&name) {
                Some(v) if v.shape() == shape => {}
                Some(v) => {
                    return Err(Error::Format(format!(
                        "parameter {name:?} has shape {:?}, expected {shape:?}",
                        v.shape()
                    )))
                }
                None => return Err(Error::Format(format!("missing parameter {name:?}"))),
            }
        }
        if params.len() != param_specs(&config).len() {
            return Err(Error::Format("unexpected extra parameters".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Reject use against a different architecture (e.g. wrong image size).
    pub fn ensure_config(&self, expected: &DenoiserConfig) -> Result<()> {
        if self.config != *expected {
            return Err(Error::Config(format!(
                "denoiser config mismatch: file has {:?}, expected {:?}",
                self.config, expected
            )));
        }
        Ok(())
    }

    /// CRC32 over the canonical parameter encoding; identifies the weights
    /// for latent-store provenance.
    pub fn checksum(&self) -> u32 {
        format::params_checksum(self)
    }

    fn check_input(&self, x: &NdArray) -> Result<()> {
        let s = self.config.image_size;
        if x.shape() != [3, s, s] {
            return Err(Error::ShapeMismatch(format!(
                "denoiser input {:?}, expected [3, {s}, {s}]",
                x.shape()
            )));
        }
        Ok(())
    }

    /// Predicted noise at full precision.
    pub fn forward(&self, x: &NdArray, t: usize) -> Result<NdArray> {
        self.forward_with(x, t, Precision::Full)
    }

    pub fn forward_with(&self, x: &NdArray, t: usize, precision: Precision) -> Result<NdArray> {
        self.check_input(x)?;
        let s = self.config.image_size;
        let mut cx = Eager::with_precision(precision);
        let rp = ResolvedParams::from_set(&self.params);
        // A single image is a batch of one; the layouts coincide.
        let xv = NdArray::from_parts(vec![3, 1, s, s], x.data().to_vec());
        let out = unet_eps(&mut cx, &self.config, &rp, &xv, &[t])?;
        Ok(NdArray::from_parts(vec![3, s, s], out.data().to_vec()))
    }

    /// Recorded forward for training; parameters come from `binding`.
    pub fn forward_taped(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        x: &NdArray,
        t: usize,
    ) -> Result<Var> {
        self.check_input(x)?;
        let s = self.config.image_size;
        let rp = ResolvedParams::from_binding(binding);
        let mut cx = Taped::new(tape);
        let xv = cx.constant(NdArray::from_parts(vec![3, 1, s, s], x.data().to_vec()));
        let out = unet_eps(&mut cx, &self.config, &rp, &xv, &[t])?;
        cx.reshape(&out, &[3, s, s])
    }

    /// Recorded batched forward: samples stacked `[3, B, H, W]`, one
    /// timestep per sample.
    pub fn forward_taped_batch(
        &self,
        tape: &mut Tape,
        binding: &TapeBinding,
        xs: &[&NdArray],
        ts: &[usize],
    ) -> Result<Var> {
        if xs.len() != ts.len() || xs.is_empty() {
            return Err(Error::InvalidArgument(
                "batch images and timesteps must align and be non-empty".into(),
            ));
        }
        for x in xs {
            self.check_input(x)?;
        }
        let stacked = crate::tensor::stack_images(xs)?;
        let rp = ResolvedParams::from_binding(binding);
        let mut cx = Taped::new(tape);
        let xv = cx.constant(stacked);
        unet_eps(&mut cx, &self.config, &rp, &xv, ts)
    }
}

impl Denoiser for DenoiserParams {
    fn eps(&self, x: &NdArray, t: usize) -> Result<NdArray> {
        self.forward(x, t)
    }
}

/// Name-to-value lookup shared by the eager and taped forward passes.
pub(crate) struct ResolvedParams<V> {
    entries: Vec<(String, V)>,
}

impl ResolvedParams<NdArray> {
    pub(crate) fn from_set(params: &ParamSet) -> Self {
        Self {
            entries: params
                .iter()
                .map(|(n, v)| (n.to_string(), v.clone()))
                .collect(),
        }
    }
}

impl ResolvedParams<Var> {
    pub(crate) fn from_binding(binding: &TapeBinding) -> Self {
        Self {
            entries: binding.vars().map(|(n, v)| (n.to_string(), v)).collect(),
        }
    }
}

impl<V: Clone> ResolvedParams<V> {
    fn get(&self, name: &str) -> Result<V> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name:?}")))
    }
}

/// Sinusoidal timestep features, one row per timestep: `[B, dim]`.
pub fn sinusoidal_embedding(ts: &[usize], dim: usize) -> NdArray {
    let half = dim / 2;
    let mut data = vec![0.0; ts.len() * dim];
    for (row, &t) in ts.iter().enumerate() {
        let tf = t as f64;
        for i in 0..half {
            let freq = (-(i as f64) / half as f64 * (10_000.0f64).ln()).exp();
            data[row * dim + i] = (tf * freq).sin();
            data[row * dim + half + i] = (tf * freq).cos();
        }
    }
    NdArray::from_parts(vec![ts.len(), dim], data)
}

fn dense<C: Ctx>(
    cx: &mut C,
    rp: &ResolvedParams<C::V>,
    x: &C::V,
    w: &str,
    b: &str,
) -> Result<C::V> {
    let wv = rp.get(w)?;
    let bv = rp.get(b)?;
    let y = cx.matmul(x, &wv)?;
    cx.add_row(&y, &bv)
}

fn res_block<C: Ctx>(
    cx: &mut C,
    rp: &ResolvedParams<C::V>,
    level: usize,
    x: &C::V,
    tfeat: &C::V,
) -> Result<C::V> {
    let g = rp.get(&format!("enc{level}.affine.g"))?;
    let b = rp.get(&format!("enc{level}.affine.b"))?;
    let mut h = cx.channel_affine(x, &g, &b)?;
    let ss = dense(
        cx,
        rp,
        tfeat,
        &format!("enc{level}.temb.w"),
        &format!("enc{level}.temb.b"),
    )?;
    h = cx.scale_shift(&h, &ss)?;
    h = cx.leaky_relu(&h, LEAKY_SLOPE);
    // Bottleneck pair: spatial 3x3 into half width, 1x1 back out.
    let w1 = rp.get(&format!("enc{level}.conv1.w"))?;
    let b1 = rp.get(&format!("enc{level}.conv1.b"))?;
    h = cx.conv2d(&h, &w1, &b1, 1, 1)?;
    h = cx.leaky_relu(&h, LEAKY_SLOPE);
    let w2 = rp.get(&format!("enc{level}.conv2.w"))?;
    let b2 = rp.get(&format!("enc{level}.conv2.b"))?;
    h = cx.conv2d(&h, &w2, &b2, 1, 0)?;
    cx.add(x, &h)
}

/// The network body, written once over [`Ctx`].
pub(crate) fn unet_eps<C: Ctx>(
    cx: &mut C,
    cfg: &DenoiserConfig,
    rp: &ResolvedParams<C::V>,
    x: &C::V,
    ts: &[usize],
) -> Result<C::V> {
    let temb = cx.constant(sinusoidal_embedding(ts, cfg.time_embed_dim));
    let h1 = dense(cx, rp, &temb, "temb.fc1.w", "temb.fc1.b")?;
    let h1 = cx.leaky_relu(&h1, LEAKY_SLOPE);
    let h2 = dense(cx, rp, &h1, "temb.fc2.w", "temb.fc2.b")?;
    let tfeat = cx.leaky_relu(&h2, LEAKY_SLOPE);

    let stem_w = rp.get("stem.w")?;
    let stem_b = rp.get("stem.b")?;
    let mut h = cx.conv2d(x, &stem_w, &stem_b, 1, 1)?;

    let mut skips = Vec::with_capacity(cfg.levels);
    for l in 0..cfg.levels {
        h = res_block(cx, rp, l, &h, &tfeat)?;
        skips.push(h.clone());
        if l + 1 < cfg.levels {
            let w = rp.get(&format!("down{l}.w"))?;
            let b = rp.get(&format!("down{l}.b"))?;
            h = cx.conv2d(&h, &w, &b, 2, 0)?;
        }
    }
    for l in (0..cfg.levels.saturating_sub(1)).rev() {
        let uw = rp.get(&format!("up{l}.w"))?;
        let ub = rp.get(&format!("up{l}.b"))?;
        h = cx.conv2d_transpose(&h, &uw, &ub, 2, 0)?;
        let cat = cx.concat_channels(&h, &skips[l])?;
        let fw = rp.get(&format!("fuse{l}.w"))?;
        let fb = rp.get(&format!("fuse{l}.b"))?;
        h = cx.conv2d(&cat, &fw, &fb, 1, 0)?;
        h = cx.leaky_relu(&h, LEAKY_SLOPE);
    }
    let head_w = rp.get("head.w")?;
    let head_b = rp.get("head.b")?;
    cx.conv2d(&h, &head_w, &head_b, 1, 1)
}

// ---------------------------------------------------------------------------
// Pretraining
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub precision: Precision,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 16,
            lr: 2e-4,
            precision: Precision::Reduced,
        }
    }
}

/// Noise-prediction loss and parameter gradients for one chunk of samples,
/// evaluated as a single batched tape.
fn eps_mse_chunk(
    model: &DenoiserParams,
    chunk: &[(usize, usize, NdArray)],
    dataset: &[NdArray],
    sched: &NoiseSchedule,
    precision: Precision,
) -> Result<(f64, GradMap)> {
    let mut noisy = Vec::with_capacity(chunk.len());
    let mut ts = Vec::with_capacity(chunk.len());
    for (idx, t, eps) in chunk {
        noisy.push(q_sample(&dataset[*idx], *t, eps, sched)?);
        ts.push(*t);
    }
    let mut tape = Tape::with_precision(precision);
    let binding = tape.bind_params(model.params());
    let refs: Vec<&NdArray> = noisy.iter().collect();
    let pred = model.forward_taped_batch(&mut tape, &binding, &refs, &ts)?;
    let eps_refs: Vec<&NdArray> = chunk.iter().map(|(_, _, e)| e).collect();
    let target = tape.constant(crate::tensor::stack_images(&eps_refs)?);
    let diff = tape.sub(pred, target)?;
    let sq = tape.mul(diff, diff)?;
    let loss = tape.mean_all(sq)?;
    let value = tape.value(loss).scalar_value()?;
    let grads = tape.grad_map(loss, &binding, false)?;
    Ok((value, grads))
}

/// Minimize the noise-prediction error over a dataset.
///
/// Per step: draw a batch of `(image, t, noise)` triples from `rng` in a
/// fixed order, average per-sample gradients, take one Adam step. Returns
/// the per-step loss history. Resumable: state lives in `(model, opt, rng)`.
pub fn pretrain(
    model: &mut DenoiserParams,
    dataset: &[NdArray],
    sched: &NoiseSchedule,
    cfg: &PretrainConfig,
    opt: &mut AdamState,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("pretrain dataset is empty".into()));
    }
    if cfg.batch == 0 {
        return Err(Error::InvalidArgument("batch must be positive".into()));
    }
    for img in dataset {
        model.check_input(img)?;
    }
    let mut losses = Vec::with_capacity(cfg.steps);
    let shape = dataset[0].shape().to_vec();
    for step in 0..cfg.steps {
        // All randomness is drawn sequentially so thread scheduling cannot
        // change the stream.
        let draws: Vec<(usize, usize, NdArray)> = (0..cfg.batch)
            .map(|_| {
                let idx = rng.random_range(0..dataset.len());
                let t = rng.random_range(1..=sched.t_max());
                let eps = standard_normal(&shape, rng);
                (idx, t, eps)
            })
            .collect();

        // One batched tape per worker; chunk boundaries are fixed by the
        // batch layout, never by scheduling, so results are bit-stable.
        let n_chunks = rayon::current_num_threads().clamp(1, cfg.batch);
        let chunk_len = std::env::var("STYLDIFF_CHUNK")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or_else(|| cfg.batch.div_ceil(n_chunks));
        let results: Vec<Result<(f64, GradMap)>> = draws
            .par_chunks(chunk_len)
            .map(|chunk| eps_mse_chunk(model, chunk, dataset, sched, cfg.precision))
            .collect();

        let mut total = 0.0;
        let mut acc: Option<GradMap> = None;
        for (chunk, r) in draws.chunks(chunk_len).zip(results) {
            let (l, mut g) = r?;
            let weight = chunk.len() as f64 / cfg.batch as f64;
            total += l * weight;
            g.scale_in_place(weight);
            match acc.as_mut() {
                Some(a) => a.accumulate(&g)?,
                None => acc = Some(g),
            }
        }
        let mean_loss = total;
        if !mean_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "pretraining loss at step {step}"
            )));
        }
        let grads = acc.expect("batch is non-empty");
        adam_step(model.params_mut(), &grads, opt, cfg.lr)?;
        model.params_mut().quantize_f32();
        opt.quantize_f32();
        losses.push(mean_loss);
    }
    Ok(losses)
}
