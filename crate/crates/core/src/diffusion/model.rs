//! Noise-prediction network: a 1-D temporal convolutional U-Net over the
//! action-plan axis with feature-wise (scale, shift) modulation from the
//! diffusion-step embedding concatenated with the conditioning vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::nn::{
    add_into, mish, mish_backward, pairwise_sum, Conv1d, ConvTranspose1d, GroupNorm,
    GroupNormCache, Init, Linear, ParamRegistry, ParamSpec, Real,
};

/// Layer sizes of the denoiser. Serialized into checkpoint headers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// Plan length (time steps along the convolution axis).
    pub horizon: usize,
    pub action_dim: usize,
    /// Width of the global conditioning vector.
    pub cond_dim: usize,
    pub step_embed_dim: usize,
    /// Channel width per U-Net level; one downsampling between levels.
    pub widths: Vec<usize>,
    pub kernel: usize,
    pub groups: usize,
    pub mid_blocks: usize,
    /// Number of diffusion steps the step embedding covers.
    pub n_diff: usize,
}

impl Architecture {
    /// Desk-scale default for planar action plans.
    pub fn standard(horizon: usize, cond_dim: usize, n_diff: usize) -> Self {
        Self {
            horizon,
            action_dim: 2,
            cond_dim,
            step_embed_dim: 32,
            widths: vec![64, 128],
            kernel: 3,
            groups: 8,
            mid_blocks: 0,
            n_diff,
        }
    }

    pub fn validate(&self) -> Result<(), Error> {
        let levels = self.widths.len();
        let err = |m: String| Err(Error::InvalidConfig(m));
        if levels == 0 {
            return err("at least one U-Net level is required".into());
        }
        if self.kernel % 2 == 0 {
            return err(format!("kernel must be odd, got {}", self.kernel));
        }
        if self.horizon == 0 || self.horizon % (1 << (levels - 1)) != 0 {
            return err(format!(
                "horizon {} not divisible by 2^{}",
                self.horizon,
                levels - 1
            ));
        }
        if self.widths.iter().any(|w| *w == 0 || w % self.groups != 0) {
            return err(format!("widths {:?} not divisible by {} groups", self.widths, self.groups));
        }
        if self.step_embed_dim < 4 || self.step_embed_dim % 2 != 0 {
            return err("step embedding dim must be even and >= 4".into());
        }
        if self.action_dim == 0 || self.n_diff == 0 {
            return err("empty action or step dimension".into());
        }
        Ok(())
    }

    pub fn global_dim(&self) -> usize {
        self.step_embed_dim + self.cond_dim
    }

    pub fn plan_len(&self) -> usize {
        self.horizon * self.action_dim
    }
}

struct ConvBlock {
    conv: Conv1d,
    norm: GroupNorm,
}

struct ConvBlockCache<T> {
    cols: Vec<T>,
    norm: GroupNormCache<T>,
    pre_act: Vec<T>,
}

impl ConvBlock {
    fn new(reg: &mut ParamRegistry, name: &str, cin: usize, cout: usize, arch: &Architecture) -> Self {
        let pad = arch.kernel / 2;
        Self {
            conv: Conv1d::new(reg, &format!("{name}.conv"), cin, cout, arch.kernel, 1, pad, false),
            norm: GroupNorm::new(reg, &format!("{name}.norm"), cout, arch.groups),
        }
    }

    fn forward<T: Real>(&self, p: &[T], x: &[T], b: usize, l: usize) -> (Vec<T>, ConvBlockCache<T>) {
        let (c, cols) = self.conv.forward(p, x, b, l);
        let (pre_act, norm) = self.norm.forward(p, &c, b, l);
        let y = mish(&pre_act);
        (y, ConvBlockCache { cols, norm, pre_act })
    }

    fn backward<T: Real>(
        &self,
        p: &[T],
        g: &mut [T],
        cache: &ConvBlockCache<T>,
        mut dy: Vec<T>,
        b: usize,
        l: usize,
    ) -> Vec<T> {
        mish_backward(&cache.pre_act, &mut dy);
        let dc = self.norm.backward(p, g, &cache.norm, &dy, b, l);
        self.conv.backward(p, g, &cache.cols, &dc, b, l)
    }
}

/// Residual block: conv block, FiLM from the global feature, conv block, skip.
struct ResBlock {
    first: ConvBlock,
    film: Linear,
    second: ConvBlock,
    residual: Option<Conv1d>,
    channels: usize,
}

struct ResBlockCache<T> {
    first: ConvBlockCache<T>,
    first_out: Vec<T>,
    film: Vec<T>,
    second: ConvBlockCache<T>,
    residual_cols: Option<Vec<T>>,
}

impl ResBlock {
    fn new(reg: &mut ParamRegistry, name: &str, cin: usize, cout: usize, arch: &Architecture) -> Self {
        let first = ConvBlock::new(reg, &format!("{name}.block0"), cin, cout, arch);
        let film = Linear::new(reg, &format!("{name}.film"), arch.global_dim(), 2 * cout);
        let second = ConvBlock::new(reg, &format!("{name}.block1"), cout, cout, arch);
        let residual =
            (cin != cout).then(|| Conv1d::new(reg, &format!("{name}.residual"), cin, cout, 1, 1, 0, false));
        Self {
            first,
            film,
            second,
            residual,
            channels: cout,
        }
    }

    fn forward<T: Real>(
        &self,
        p: &[T],
        x: &[T],
        global: &[T],
        b: usize,
        l: usize,
    ) -> (Vec<T>, ResBlockCache<T>) {
        let c = self.channels;
        let (first_out, first) = self.first.forward(p, x, b, l);
        let film = self.film.forward(p, global, b);
        let mut modulated = first_out.clone();
        for ch in 0..c {
            for s in 0..b {
                let scale = film[ch * b + s];
                let shift = film[(c + ch) * b + s];
                for v in &mut modulated[(ch * b + s) * l..][..l] {
                    *v = scale * *v + shift;
                }
            }
        }
        let (mut out, second) = self.second.forward(p, &modulated, b, l);
        let residual_cols = match &self.residual {
            Some(conv) => {
                let (r, cols) = conv.forward(p, x, b, l);
                add_into(&mut out, &r);
                Some(cols)
            }
            None => {
                add_into(&mut out, x);
                None
            }
        };
        (
            out,
            ResBlockCache {
                first,
                first_out,
                film,
                second,
                residual_cols,
            },
        )
    }

    /// Returns the input gradient; accumulates the global-feature gradient into `dglobal`.
    #[allow(clippy::too_many_arguments)]
    fn backward<T: Real>(
        &self,
        p: &[T],
        g: &mut [T],
        cache: &ResBlockCache<T>,
        global: &[T],
        dglobal: &mut [T],
        dy: &[T],
        b: usize,
        l: usize,
    ) -> Vec<T> {
        let c = self.channels;
        let mut dmod = self.second.backward(p, g, &cache.second, dy.to_vec(), b, l);
        let mut dfilm = vec![T::ZERO; 2 * c * b];
        for ch in 0..c {
            for s in 0..b {
                let r = (ch * b + s) * l;
                let h = &cache.first_out[r..r + l];
                let d = &mut dmod[r..r + l];
                let mut dscale = T::ZERO;
                let mut dshift = T::ZERO;
                let scale = cache.film[ch * b + s];
                for (dv, hv) in d.iter_mut().zip(h) {
                    dscale += *dv * *hv;
                    dshift += *dv;
                    *dv *= scale;
                }
                dfilm[ch * b + s] = dscale;
                dfilm[(c + ch) * b + s] = dshift;
            }
        }
        let dg = self.film.backward(p, g, global, &dfilm, b);
        add_into(dglobal, &dg);
        let mut dx = self.first.backward(p, g, &cache.first, dmod, b, l);
        match (&self.residual, &cache.residual_cols) {
            (Some(conv), Some(cols)) => {
                let dr = conv.backward(p, g, cols, dy, b, l);
                add_into(&mut dx, &dr);
            }
            _ => add_into(&mut dx, dy),
        }
        dx
    }
}

/// Compiled layer graph with offsets into the flat parameter buffer.
pub struct UNet {
    arch: Architecture,
    registry: ParamRegistry,
    step_in: Linear,
    step_out: Linear,
    down: Vec<(ResBlock, Option<Conv1d>)>,
    mid: Vec<ResBlock>,
    up: Vec<(ResBlock, ConvTranspose1d)>,
    final_block: ConvBlock,
    final_conv: Conv1d,
}

/// Everything the backward pass needs from a forward pass.
pub struct ForwardCache<T> {
    batch: usize,
    step_emb: Vec<T>,
    step_hidden_pre: Vec<T>,
    step_hidden: Vec<T>,
    global_pre: Vec<T>,
    global: Vec<T>,
    /// Residual block cache and downsampling im2col buffer per level.
    down: Vec<(ResBlockCache<T>, Option<Vec<T>>)>,
    mid: Vec<ResBlockCache<T>>,
    /// Residual block cache and its output (the upsampler input).
    up: Vec<(ResBlockCache<T>, Vec<T>)>,
    final_block: ConvBlockCache<T>,
    final_cols: Vec<T>,
}

impl UNet {
    pub fn new(arch: &Architecture) -> Result<Self, Error> {
        arch.validate()?;
        let mut reg = ParamRegistry::default();
        let d = arch.step_embed_dim;
        let step_in = Linear::new(&mut reg, "step_mlp.0", d, 4 * d);
        let step_out = Linear::new(&mut reg, "step_mlp.2", 4 * d, d);
        let levels = arch.widths.len();
        let mut down = Vec::with_capacity(levels);
        let mut cin = arch.action_dim;
        for (i, &w) in arch.widths.iter().enumerate() {
            let block = ResBlock::new(&mut reg, &format!("down.{i}.res"), cin, w, arch);
            let sample = (i + 1 < levels)
                .then(|| Conv1d::new(&mut reg, &format!("down.{i}.downsample"), w, w, 3, 2, 1, false));
            down.push((block, sample));
            cin = w;
        }
        let top = *arch.widths.last().expect("validated non-empty");
        let mid = (0..arch.mid_blocks)
            .map(|i| ResBlock::new(&mut reg, &format!("mid.{i}"), top, top, arch))
            .collect();
        let mut up = Vec::new();
        for lvl in (1..levels).rev() {
            let w = arch.widths[lvl];
            let target = arch.widths[lvl - 1];
            let block = ResBlock::new(&mut reg, &format!("up.{lvl}.res"), 2 * w, target, arch);
            let sample = ConvTranspose1d::new(&mut reg, &format!("up.{lvl}.upsample"), target, target);
            up.push((block, sample));
        }
        let w0 = arch.widths[0];
        let final_block = ConvBlock::new(&mut reg, "final.block", w0, w0, arch);
        let final_conv = Conv1d::new(&mut reg, "final.conv", w0, arch.action_dim, 1, 1, 0, true);
        Ok(Self {
            arch: arch.clone(),
            registry: reg,
            step_in,
            step_out,
            down,
            mid,
            up,
            final_block,
            final_conv,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn param_count(&self) -> usize {
        self.registry.total
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.registry.specs
    }

    /// Offsets of the zero-initialized output layer.
    pub fn final_layer_specs(&self) -> Vec<&ParamSpec> {
        self.registry
            .specs
            .iter()
            .filter(|s| s.name.starts_with("final.conv"))
            .collect()
    }

    /// Draws parameters; the output layer starts at zero unless `zero_final` is false.
    pub fn init_params<T: Real>(&self, rng: &mut impl Rng, zero_final: bool) -> Vec<T> {
        let mut params = vec![T::ZERO; self.registry.total];
        for (spec, init) in self.registry.specs.iter().zip(&self.registry.inits) {
            let init = if !zero_final && spec.name.starts_with("final.conv") {
                Init::Uniform(fan_in_bound(spec))
            } else {
                *init
            };
            let slot = &mut params[spec.range()];
            match init {
                Init::Uniform(b) => slot
                    .iter_mut()
                    .for_each(|v| *v = T::from_f64(rng.random_range(-b..=b))),
                Init::Constant(c) => slot.fill(T::from_f64(c)),
            }
        }
        params
    }

    /// Sinusoidal embedding of a diffusion step.
    fn step_embedding<T: Real>(&self, steps: &[usize]) -> Vec<T> {
        let d = self.arch.step_embed_dim;
        let half = d / 2;
        let b = steps.len();
        let scale = (10_000f64).ln() / (half as f64 - 1.0);
        let mut out = vec![T::ZERO; d * b];
        for (s, &t) in steps.iter().enumerate() {
            for j in 0..half {
                let arg = t as f64 * (-(j as f64) * scale).exp();
                out[j * b + s] = T::from_f64(arg.sin());
                out[(half + j) * b + s] = T::from_f64(arg.cos());
            }
        }
        out
    }

    /// Batched forward pass.
    ///
    /// `x` is `[action_dim][B][horizon]`, `cond` is `[cond_dim][B]`; the output
    /// has the layout of `x`.
    pub fn forward<T: Real>(
        &self,
        p: &[T],
        x: &[T],
        steps: &[usize],
        cond: &[T],
    ) -> (Vec<T>, ForwardCache<T>) {
        let b = steps.len();
        let arch = &self.arch;
        debug_assert_eq!(x.len(), arch.action_dim * b * arch.horizon);
        debug_assert_eq!(cond.len(), arch.cond_dim * b);

        let step_emb = self.step_embedding::<T>(steps);
        let step_hidden_pre = self.step_in.forward(p, &step_emb, b);
        let step_hidden = mish(&step_hidden_pre);
        let step_feat = self.step_out.forward(p, &step_hidden, b);
        let mut global_pre = step_feat;
        global_pre.extend_from_slice(cond);
        let global = mish(&global_pre);

        let mut h = x.to_vec();
        let mut len = arch.horizon;
        let mut down_caches = Vec::with_capacity(self.down.len());
        let mut skips = Vec::with_capacity(self.down.len());
        for (block, sample) in &self.down {
            let (out, cache) = block.forward(p, &h, &global, b, len);
            match sample {
                Some(conv) => {
                    let (y, cols) = conv.forward(p, &out, b, len);
                    len = conv.out_len(len);
                    skips.push(out);
                    down_caches.push((cache, Some(cols)));
                    h = y;
                }
                None => {
                    skips.push(out.clone());
                    down_caches.push((cache, None));
                    h = out;
                }
            }
        }
        let mut mid_caches = Vec::with_capacity(self.mid.len());
        for block in &self.mid {
            let (out, cache) = block.forward(p, &h, &global, b, len);
            mid_caches.push(cache);
            h = out;
        }
        let mut up_caches = Vec::with_capacity(self.up.len());
        for (block, sample) in &self.up {
            let skip = skips.pop().expect("one skip per up level");
            h.extend_from_slice(&skip);
            let (out, cache) = block.forward(p, &h, &global, b, len);
            h = sample.forward(p, &out, b, len);
            len = sample.out_len(len);
            up_caches.push((cache, out));
        }
        let (final_act, final_block) = self.final_block.forward(p, &h, b, len);
        let (y, final_cols) = self.final_conv.forward(p, &final_act, b, len);
        (
            y,
            ForwardCache {
                batch: b,
                step_emb,
                step_hidden_pre,
                step_hidden,
                global_pre,
                global,
                down: down_caches,
                mid: mid_caches,
                up: up_caches,
                final_block,
                final_cols,
            },
        )
    }

    /// Accumulates parameter gradients for output gradient `dy` into `g`.
    pub fn backward<T: Real>(&self, p: &[T], g: &mut [T], cache: &ForwardCache<T>, dy: &[T]) {
        let b = cache.batch;
        let arch = &self.arch;
        let levels = arch.widths.len();
        let mut len = arch.horizon;

        let dfinal = self.final_conv.backward(p, g, &cache.final_cols, dy, b, len);
        let mut dh = self.final_block.backward(p, g, &cache.final_block, dfinal, b, len);

        let mut dglobal = vec![T::ZERO; cache.global.len()];
        let mut dskips: Vec<Option<Vec<T>>> = vec![None; levels];
        // `up` runs from the deepest level outward, so walk it backwards.
        for (i, ((block, sample), (rc, out))) in self.up.iter().zip(&cache.up).enumerate().rev() {
            let lvl = levels - 1 - i;
            len /= 2;
            let dout = sample.backward(p, g, out, &dh, b, len);
            let dinput = block.backward(p, g, rc, &cache.global, &mut dglobal, &dout, b, len);
            let split = arch.widths[lvl] * b * len;
            dskips[lvl] = Some(dinput[split..].to_vec());
            dh = dinput[..split].to_vec();
        }
        for (block, rc) in self.mid.iter().zip(&cache.mid).rev() {
            dh = block.backward(p, g, rc, &cache.global, &mut dglobal, &dh, b, len);
        }
        for (lvl, ((block, sample), (rc, cols))) in self.down.iter().zip(&cache.down).enumerate().rev() {
            let mut dout = match (sample, cols) {
                (Some(conv), Some(cols)) => {
                    len *= 2;
                    conv.backward(p, g, cols, &dh, b, len)
                }
                _ => dh,
            };
            if let Some(ds) = dskips[lvl].take() {
                add_into(&mut dout, &ds);
            }
            dh = block.backward(p, g, rc, &cache.global, &mut dglobal, &dout, b, len);
        }

        mish_backward(&cache.global_pre, &mut dglobal);
        let step_dim = arch.step_embed_dim * b;
        let mut dhidden = self
            .step_out
            .backward(p, g, &cache.step_hidden, &dglobal[..step_dim], b);
        mish_backward(&cache.step_hidden_pre, &mut dhidden);
        self.step_in.backward(p, g, &cache.step_emb, &dhidden, b);
    }
}

fn fan_in_bound(spec: &ParamSpec) -> f64 {
    let fan_in: usize = spec.shape.iter().skip(1).product::<usize>().max(1);
    1.0 / (fan_in as f64).sqrt()
}

/// Converts row-major per-sample matrices `[B][L][A]` into `[A][B][L]`.
pub fn to_channel_major<T: Real>(samples: &[&[f32]], horizon: usize, dim: usize) -> Vec<T> {
    let b = samples.len();
    let mut out = vec![T::ZERO; dim * b * horizon];
    for (s, m) in samples.iter().enumerate() {
        for t in 0..horizon {
            for d in 0..dim {
                out[(d * b + s) * horizon + t] = T::from_f64(m[t * dim + d] as f64);
            }
        }
    }
    out
}

/// Inverse of [`to_channel_major`] for one sample.
pub fn sample_from_channel_major<T: Real>(x: &[T], s: usize, b: usize, horizon: usize, dim: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; horizon * dim];
    for t in 0..horizon {
        for d in 0..dim {
            out[t * dim + d] = x[(d * b + s) * horizon + t];
        }
    }
    out
}

/// Trained (or freshly initialized) noise-prediction network.
pub struct DenoiserModel<T: Real = f32> {
    pub net: UNet,
    pub params: Vec<T>,
}

impl<T: Real> std::fmt::Debug for DenoiserModel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DenoiserModel")
            .field("arch", self.arch())
            .field("param_count", &self.params.len())
            .finish()
    }
}

impl<T: Real> Clone for DenoiserModel<T> {
    fn clone(&self) -> Self {
        Self {
            net: UNet::new(self.net.arch()).expect("architecture already validated"),
            params: self.params.clone(),
        }
    }
}

impl<T: Real> DenoiserModel<T> {
    pub fn new(arch: &Architecture, seed: u64) -> Result<Self, Error> {
        let net = UNet::new(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = net.init_params(&mut rng, true);
        Ok(Self { net, params })
    }

    /// Random initialization including the output layer (used by gradient checks).
    pub fn new_fully_random(arch: &Architecture, seed: u64) -> Result<Self, Error> {
        let net = UNet::new(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = net.init_params(&mut rng, false);
        Ok(Self { net, params })
    }

    pub fn from_params(arch: &Architecture, params: Vec<T>) -> Result<Self, Error> {
        let net = UNet::new(arch)?;
        if params.len() != net.param_count() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                net.param_count(),
                params.len()
            )));
        }
        Ok(Self { net, params })
    }

    pub fn arch(&self) -> &Architecture {
        self.net.arch()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn cast<U: Real>(&self) -> DenoiserModel<U> {
        DenoiserModel {
            net: UNet::new(self.arch()).expect("validated"),
            params: self.params.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Named arrays in registration order.
    pub fn named_arrays(&self) -> Vec<(&ParamSpec, &[T])> {
        self.net
            .specs()
            .iter()
            .map(|s| (s, &self.params[s.range()]))
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    fn check_shapes(&self, noisy_len: usize, step: usize, cond_len: usize) -> Result<(), Error> {
        let arch = self.arch();
        if noisy_len != arch.plan_len() {
            return Err(Error::Shape(format!(
                "plan has {noisy_len} values, model expects {}x{}",
                arch.horizon, arch.action_dim
            )));
        }
        if cond_len != arch.cond_dim {
            return Err(Error::Shape(format!(
                "conditioning has {cond_len} values, model expects {}",
                arch.cond_dim
            )));
        }
        if step >= arch.n_diff {
            return Err(Error::Shape(format!("step {step} outside [0, {})", arch.n_diff)));
        }
        Ok(())
    }

    /// Predicts the injected noise for one row-major `horizon x action_dim` plan.
    pub fn predict_eps(&self, noisy: &[f32], step: usize, cond: &[f32]) -> Result<Vec<f32>, Error> {
        self.check_shapes(noisy.len(), step, cond.len())?;
        let arch = self.arch();
        let x = to_channel_major::<T>(&[noisy], arch.horizon, arch.action_dim);
        let c: Vec<T> = cond.iter().map(|&v| T::from_f64(v as f64)).collect();
        let (y, _) = self.net.forward(&self.params, &x, &[step], &c);
        Ok(sample_from_channel_major(&y, 0, 1, arch.horizon, arch.action_dim)
            .into_iter()
            .map(|v| v.to_f64() as f32)
            .collect())
    }
}

/// One training example with its sampled diffusion step and noise.
#[derive(Debug, Clone)]
pub struct NoisedExample<'a> {
    pub plan: &'a [f32],
    pub cond: &'a [f32],
    pub step: usize,
    pub eps: Vec<f32>,
}

/// Per-sample losses and summed parameter gradients of one chunk.
pub struct ChunkGradients<T> {
    pub losses: Vec<f64>,
    pub grads: Vec<T>,
}

impl<T: Real> DenoiserModel<T> {
    /// Mean-squared noise-prediction error for a chunk of examples, with
    /// gradients of `sum(per-sample loss) / normalizer`.
    pub fn chunk_loss_and_gradients(
        &self,
        examples: &[NoisedExample<'_>],
        alpha_bar: &[f64],
        normalizer: f64,
    ) -> Result<ChunkGradients<T>, Error> {
        let arch = self.arch();
        for ex in examples {
            self.check_shapes(ex.plan.len(), ex.step, ex.cond.len())?;
            if ex.eps.len() != ex.plan.len() {
                return Err(Error::Shape("noise and plan differ in size".into()));
            }
        }
        let b = examples.len();
        let (h, a) = (arch.horizon, arch.action_dim);
        let noisy_rows: Vec<Vec<f32>> = examples
            .iter()
            .map(|ex| {
                let sa = alpha_bar[ex.step].sqrt();
                let sn = (1.0 - alpha_bar[ex.step]).sqrt();
                ex.plan
                    .iter()
                    .zip(&ex.eps)
                    .map(|(&x, &e)| (sa * x as f64 + sn * e as f64) as f32)
                    .collect()
            })
            .collect();
        let refs: Vec<&[f32]> = noisy_rows.iter().map(|v| v.as_slice()).collect();
        let x = to_channel_major::<T>(&refs, h, a);
        let eps_refs: Vec<&[f32]> = examples.iter().map(|ex| ex.eps.as_slice()).collect();
        let target = to_channel_major::<T>(&eps_refs, h, a);
        let mut cond = vec![T::ZERO; arch.cond_dim * b];
        for (s, ex) in examples.iter().enumerate() {
            for (j, &v) in ex.cond.iter().enumerate() {
                cond[j * b + s] = T::from_f64(v as f64);
            }
        }
        let steps: Vec<usize> = examples.iter().map(|ex| ex.step).collect();
        let (pred, cache) = self.net.forward(&self.params, &x, &steps, &cond);

        let per = (h * a) as f64;
        let mut losses = vec![0.0f64; b];
        let mut dy = vec![T::ZERO; pred.len()];
        let scale = T::from_f64(2.0 / (per * normalizer));
        for d in 0..a {
            for s in 0..b {
                let r = (d * b + s) * h;
                for t in r..r + h {
                    let diff = pred[t] - target[t];
                    losses[s] += (diff * diff).to_f64();
                    dy[t] = diff * scale;
                }
            }
        }
        for (s, l) in losses.iter_mut().enumerate() {
            *l /= per;
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss { index: s });
            }
        }
        let mut grads = vec![T::ZERO; self.params.len()];
        self.net.backward(&self.params, &mut grads, &cache, &dy);
        Ok(ChunkGradients { losses, grads })
    }
}

/// Sums equally shaped gradient buffers with a fixed pairwise tree.
pub fn tree_reduce<T: Real>(mut parts: Vec<Vec<T>>) -> Vec<T> {
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                add_into(&mut a, &b);
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap_or_default()
}

/// Mean of per-sample losses, reduced pairwise.
pub fn mean_loss(losses: &[f64]) -> f64 {
    if losses.is_empty() {
        0.0
    } else {
        pairwise_sum(losses) / losses.len() as f64
    }
}
