//! Text-conditional denoising diffusion: the fixed noising process, the
//! noise-prediction UNet with cross-attention to a transformer text encoder,
//! the denoising objective and an ancestral sampler.

use std::path::Path;

use candle_core::{DType, Tensor};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::codec::{CodecModel, LatentTensor};
use crate::corpus::ImageSample;
use crate::nn::{attention, randn, timestep_embedding, upsample2x, Conv2d, GroupNorm, Linear, ParamBuilder, ParamStore};
use crate::seed::{self, Rng};
use crate::text::{TextEncoderConfig, TextTransformer, TokenBatch, Vocab};
use crate::{Error, Result};

/// Parameter-name prefixes inside a model's store.
pub const UNET_PREFIX: &str = "unet";
pub const TEXT_PREFIX: &str = "text";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
}

/// Linear betas from `beta_start` to `beta_end` over `steps` steps.
pub fn build_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::InvalidSchedule(format!("need at least 2 steps, got {steps}")));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "betas must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let alpha_bars = alphas
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        steps,
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    /// Cumulative alpha at timestep `t` (1-based).
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.check_t(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::InvalidTimestep { t, max: self.steps });
        }
        Ok(())
    }

    /// Noise a batch (N, ...) with one timestep per row.
    pub fn noise_batch(&self, z0: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
        if z0.dims() != eps.dims() {
            return Err(Error::ShapeError(format!("latent {:?} vs noise {:?}", z0.dims(), eps.dims())));
        }
        let n = z0.dim(0)?;
        if ts.len() != n {
            return Err(Error::ShapeError(format!("{} timesteps for batch of {n}", ts.len())));
        }
        let mut signal = Vec::with_capacity(n);
        let mut noise = Vec::with_capacity(n);
        for &t in ts {
            let ab = self.alpha_bar(t)?;
            signal.push(ab.sqrt());
            noise.push((1.0 - ab).sqrt());
        }
        let mut shape = vec![n];
        shape.extend(std::iter::repeat_n(1, z0.rank() - 1));
        let a = Tensor::from_vec(signal, shape.as_slice(), z0.device())?.to_dtype(z0.dtype())?;
        let b = Tensor::from_vec(noise, shape.as_slice(), z0.device())?.to_dtype(z0.dtype())?;
        Ok((z0.broadcast_mul(&a)? + eps.broadcast_mul(&b)?)?)
    }
}

/// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
pub fn forward_noise(z0: &LatentTensor, t: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<LatentTensor> {
    schedule.check_t(t)?;
    if z0.values.dims() != eps.dims() {
        return Err(Error::ShapeError(format!("latent {:?} vs noise {:?}", z0.values.dims(), eps.dims())));
    }
    let values = schedule
        .noise_batch(&z0.values.unsqueeze(0)?, &[t], &eps.unsqueeze(0)?.to_dtype(z0.values.dtype())?)?
        .squeeze(0)?;
    Ok(LatentTensor {
        values,
        downscale_factor: z0.downscale_factor,
        codec_id: z0.codec_id.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Channel widths of the three UNet levels, finest first.
    pub widths: [usize; 3],
    pub text: TextEncoderConfig,
    /// Probability of replacing a caption with the null prompt during training.
    pub cond_dropout: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            timesteps: 200,
            beta_start: 5e-4,
            beta_end: 0.1,
            widths: [32, 64, 128],
            text: TextEncoderConfig::default(),
            cond_dropout: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(pb: &mut ParamBuilder, cin: usize, cout: usize, tdim: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&mut pb.sub("norm1"), cin)?,
            conv1: Conv2d::new(&mut pb.sub("conv1"), cin, cout, 3, 1)?,
            time: Linear::new(&mut pb.sub("time"), tdim, cout)?,
            norm2: GroupNorm::new(&mut pb.sub("norm2"), cout)?,
            conv2: Conv2d::new(&mut pb.sub("conv2"), cout, cout, 3, 1)?,
            skip: if cin == cout {
                None
            } else {
                Some(Conv2d::new(&mut pb.sub("skip"), cin, cout, 1, 1)?)
            },
        })
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let (n, c) = (h.dim(0)?, h.dim(1)?);
        let h = h.broadcast_add(&self.time.forward(temb)?.reshape((n, c, 1, 1))?)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(conv) => conv.forward(x)?,
            None => x.clone(),
        };
        Ok((h + skip)?)
    }
}

/// Residual cross-attention from image positions to text tokens.
#[derive(Clone, Debug)]
struct CrossAttention {
    norm: GroupNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl CrossAttention {
    fn new(pb: &mut ParamBuilder, channels: usize, ctx_dim: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&mut pb.sub("norm"), channels)?,
            q: Linear::no_bias(&mut pb.sub("q"), channels, channels)?,
            k: Linear::no_bias(&mut pb.sub("k"), ctx_dim, channels)?,
            v: Linear::no_bias(&mut pb.sub("v"), ctx_dim, channels)?,
            out: Linear::new(&mut pb.sub("out"), channels, channels)?,
        })
    }

    fn forward(&self, x: &Tensor, ctx: &Context) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let tokens = self.norm.forward(x)?.reshape((n, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let a = attention(
            &self.q.forward(&tokens)?,
            &self.k.forward(&ctx.features)?,
            &self.v.forward(&ctx.features)?,
            Some(&ctx.bias),
        )?;
        let a = self.out.forward(&a)?.transpose(1, 2)?.reshape((n, c, h, w))?;
        Ok((x + a)?)
    }
}

/// Encoded text conditioning: per-token features and the padding bias.
#[derive(Clone, Debug)]
pub struct Context {
    pub features: Tensor,
    pub bias: Tensor,
}

/// Three-level UNet: residual blocks with time embedding at every level,
/// cross-attention at the two coarser ones, strided-conv downsampling and
/// nearest upsampling with skip concatenation.
#[derive(Clone, Debug)]
struct UNet {
    base: usize,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down1: ResBlock,
    pool1: Conv2d,
    down2: ResBlock,
    attn2: CrossAttention,
    pool2: Conv2d,
    mid1: ResBlock,
    attn_mid: CrossAttention,
    mid2: ResBlock,
    lift2: Conv2d,
    up2: ResBlock,
    attn_up2: CrossAttention,
    lift1: Conv2d,
    up1: ResBlock,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl UNet {
    fn new(pb: &mut ParamBuilder, channels: usize, widths: [usize; 3], ctx_dim: usize) -> Result<Self> {
        let [w1, w2, w3] = widths;
        let tdim = 4 * w1;
        Ok(Self {
            base: w1,
            time1: Linear::new(&mut pb.sub("time1"), w1, tdim)?,
            time2: Linear::new(&mut pb.sub("time2"), tdim, tdim)?,
            conv_in: Conv2d::new(&mut pb.sub("conv_in"), channels, w1, 3, 1)?,
            down1: ResBlock::new(&mut pb.sub("down1"), w1, w1, tdim)?,
            pool1: Conv2d::new(&mut pb.sub("pool1"), w1, w1, 3, 2)?,
            down2: ResBlock::new(&mut pb.sub("down2"), w1, w2, tdim)?,
            attn2: CrossAttention::new(&mut pb.sub("attn2"), w2, ctx_dim)?,
            pool2: Conv2d::new(&mut pb.sub("pool2"), w2, w2, 3, 2)?,
            mid1: ResBlock::new(&mut pb.sub("mid1"), w2, w3, tdim)?,
            attn_mid: CrossAttention::new(&mut pb.sub("attn_mid"), w3, ctx_dim)?,
            mid2: ResBlock::new(&mut pb.sub("mid2"), w3, w3, tdim)?,
            lift2: Conv2d::new(&mut pb.sub("lift2"), w3, w2, 3, 1)?,
            up2: ResBlock::new(&mut pb.sub("up2"), 2 * w2, w2, tdim)?,
            attn_up2: CrossAttention::new(&mut pb.sub("attn_up2"), w2, ctx_dim)?,
            lift1: Conv2d::new(&mut pb.sub("lift1"), w2, w1, 3, 1)?,
            up1: ResBlock::new(&mut pb.sub("up1"), 2 * w1, w1, tdim)?,
            norm_out: GroupNorm::new(&mut pb.sub("norm_out"), w1)?,
            conv_out: Conv2d::zeros(&mut pb.sub("conv_out"), w1, channels, 3)?,
        })
    }

    fn forward(&self, x: &Tensor, ts: &[usize], ctx: &Context) -> Result<Tensor> {
        let temb = timestep_embedding(ts, self.base, x.dtype())?;
        let temb = self.time2.forward(&self.time1.forward(&temb)?.silu()?)?;

        let h1 = self.down1.forward(&self.conv_in.forward(x)?, &temb)?;
        let h = self.pool1.forward(&h1)?;
        let h2 = self.attn2.forward(&self.down2.forward(&h, &temb)?, ctx)?;
        let h = self.pool2.forward(&h2)?;
        let h = self.attn_mid.forward(&self.mid1.forward(&h, &temb)?, ctx)?;
        let h = self.mid2.forward(&h, &temb)?;

        let h = self.lift2.forward(&upsample2x(&h)?)?;
        let h = self.up2.forward(&Tensor::cat(&[&h, &h2], 1)?, &temb)?;
        let h = self.attn_up2.forward(&h, ctx)?;
        let h = self.lift1.forward(&upsample2x(&h)?)?;
        let h = self.up1.forward(&Tensor::cat(&[&h, &h1], 1)?, &temb)?;
        self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)
    }
}

/// Spatial sizes must be divisible by this.
pub const UNET_FACTOR: usize = 4;

#[derive(Clone)]
pub struct DiffusionModel {
    pub config: DiffusionConfig,
    pub params: ParamStore,
    pub schedule: NoiseSchedule,
    pub vocab: Vocab,
    pub codec_id: String,
    pub latent_channels: usize,
    /// Set once any training step has used condition dropout.
    pub trained_with_dropout: bool,
    unet: UNet,
    text_net: TextTransformer,
}

impl std::fmt::Debug for DiffusionModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DiffusionModel")
            .field("config", &self.config)
            .field("codec_id", &self.codec_id)
            .field("params", &self.params.num_elements())
            .finish()
    }
}

#[derive(Serialize, Deserialize)]
struct ModelMeta {
    config: DiffusionConfig,
    vocab: Vec<String>,
    codec_id: String,
    latent_channels: usize,
    trained_with_dropout: bool,
}

impl DiffusionModel {
    pub fn new(config: &DiffusionConfig, vocab: Vocab, codec: &CodecModel, seed_value: u64) -> Result<Self> {
        Self::with_dtype(config, vocab, codec.id(), codec.latent_channels(), seed_value, DType::F32)
    }

    pub fn with_dtype(
        config: &DiffusionConfig,
        vocab: Vocab,
        codec_id: &str,
        latent_channels: usize,
        seed_value: u64,
        dtype: DType,
    ) -> Result<Self> {
        let schedule = build_schedule(config.timesteps, config.beta_start, config.beta_end)?;
        let mut params = ParamStore::new(dtype);
        let mut rng = seed::rng_for(seed_value, "diffusion.init");
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let text_net = TextTransformer::new(&mut pb.sub(TEXT_PREFIX), vocab.len(), &config.text)?;
        let unet = UNet::new(&mut pb.sub(UNET_PREFIX), latent_channels, config.widths, config.text.dim)?;
        Ok(Self {
            config: config.clone(),
            params,
            schedule,
            vocab,
            codec_id: codec_id.to_string(),
            latent_channels,
            trained_with_dropout: false,
            unet,
            text_net,
        })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Token ids for a caption, via the model's vocabulary.
    pub fn tokenize(&self, caption: &[String]) -> Result<Vec<u32>> {
        self.vocab.encode(caption)
    }

    /// Run the text encoder. Empty sequences encode the null prompt.
    pub fn encode_text(&self, seqs: &[Vec<u32>]) -> Result<Context> {
        let batch = TokenBatch::new(seqs, self.config.text.max_len, self.dtype())?;
        Ok(Context {
            features: self.text_net.forward(&batch)?,
            bias: batch.attention_bias()?,
        })
    }

    /// Predicted noise for a batch of noised latents.
    pub fn predict_eps(&self, z_t: &Tensor, ts: &[usize], ctx: &Context) -> Result<Tensor> {
        let (_, c, h, w) = z_t.dims4()?;
        if c != self.latent_channels {
            return Err(Error::ShapeError(format!("expected {} latent channels, got {c}", self.latent_channels)));
        }
        for size in [h, w] {
            if size == 0 || size % UNET_FACTOR != 0 {
                return Err(Error::ShapeError(format!(
                    "latent size {size} is not a multiple of {UNET_FACTOR}"
                )));
            }
        }
        // The UNet predicts v = sqrt(abar) eps - sqrt(1 - abar) z0; the noise
        // estimate is recovered as sqrt(abar) v + sqrt(1 - abar) z_t, so at
        // high noise the network only has to supply the clean signal.
        let v = self.unet.forward(z_t, ts, ctx)?;
        self.schedule.noise_batch(&v, ts, z_t)
    }

    /// Denoising objective on a latent batch (N, C, H, W) with one caption per
    /// row. Each caption is replaced by the null prompt with probability
    /// `cond_dropout`.
    pub fn denoise_loss(&self, latents: &Tensor, captions: &[Vec<u32>], rng: &mut Rng, cond_dropout: f64) -> Result<Tensor> {
        let n = latents.dim(0)?;
        if captions.len() != n {
            return Err(Error::ShapeError(format!("{} captions for {n} latents", captions.len())));
        }
        let seqs: Vec<Vec<u32>> = captions
            .iter()
            .map(|c| {
                if cond_dropout > 0.0 && rng.random_bool(cond_dropout.min(1.0)) {
                    Vec::new()
                } else {
                    c.clone()
                }
            })
            .collect();
        let ctx = self.encode_text(&seqs)?;
        denoise_loss_with(&self.schedule, latents, rng, |z_t, ts| self.predict_eps(z_t, ts, &ctx))
    }

    /// Guided noise prediction; scale 1 is the plain conditional prediction.
    fn guided_eps(&self, z: &Tensor, ts: &[usize], cond: &Context, uncond: Option<&Context>, scale: f64) -> Result<Tensor> {
        let eps_c = self.predict_eps(z, ts, cond)?;
        match uncond {
            None => Ok(eps_c),
            Some(u) => {
                let eps_u = self.predict_eps(z, ts, u)?;
                Ok((&eps_u + ((eps_c - &eps_u)? * scale)?)?)
            }
        }
    }

    /// Ancestral sampling of one latent per (caption, seed) pair at latent
    /// size `size`, over `steps` evenly respaced timesteps ending at T.
    pub fn sample_latents(
        &self,
        captions: &[Vec<u32>],
        seeds: &[u64],
        size: usize,
        steps: usize,
        guidance_scale: f64,
    ) -> Result<Tensor> {
        if captions.len() != seeds.len() || captions.is_empty() {
            return Err(Error::ShapeError(format!("{} captions for {} seeds", captions.len(), seeds.len())));
        }
        let guided = guidance_scale != 1.0;
        if guided && !self.trained_with_dropout {
            return Err(Error::GuidanceUnsupported);
        }
        let n = captions.len();
        let cond = self.encode_text(captions)?;
        let uncond = if guided {
            Some(self.encode_text(&vec![Vec::new(); n])?)
        } else {
            None
        };
        let shape = [self.latent_channels, size, size];
        ancestral_sample(&self.schedule, &shape, seeds, steps, self.dtype(), |z, ts| {
            self.guided_eps(z, ts, &cond, uncond.as_ref(), guidance_scale)
        })
    }

    /// Generate images for captions with their sampling seeds and decode them.
    pub fn sample_images(
        &self,
        codec: &CodecModel,
        captions: &[Vec<u32>],
        seeds: &[u64],
        resolution: usize,
        steps: usize,
        guidance_scale: f64,
    ) -> Result<Vec<ImageSample>> {
        if codec.id() != self.codec_id {
            return Err(Error::CodecMismatch {
                expected: self.codec_id.clone(),
                found: codec.id().to_string(),
            });
        }
        let factor = codec.downscale_factor();
        if resolution % (factor * UNET_FACTOR) != 0 {
            return Err(Error::InvalidResolution(resolution));
        }
        let z = self.sample_latents(captions, seeds, resolution / factor, steps, guidance_scale)?;
        let mut images = codec.decode_batch(&z.to_dtype(DType::F32)?)?;
        for (img, s) in images.iter_mut().zip(seeds) {
            img.spec_seed = *s;
        }
        Ok(images)
    }

    /// Sample a single image.
    pub fn sample(
        &self,
        codec: &CodecModel,
        caption: &[String],
        resolution: usize,
        steps: usize,
        guidance_scale: f64,
        seed_value: u64,
    ) -> Result<ImageSample> {
        let ids = self.tokenize(caption)?;
        let mut out = self.sample_images(codec, &[ids], &[seed_value], resolution, steps, guidance_scale)?;
        Ok(out.remove(0))
    }

    fn meta(&self) -> ModelMeta {
        ModelMeta {
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            codec_id: self.codec_id.clone(),
            latent_channels: self.latent_channels,
            trained_with_dropout: self.trained_with_dropout,
        }
    }

    pub fn metadata(&self) -> Result<serde_json::Value> {
        let mut v = serde_json::to_value(self.meta())?;
        v["model"] = "diffusion".into();
        Ok(v)
    }

    pub fn save(&self, dir: &Path) -> Result<String> {
        self.save_with(dir, Vec::new(), serde_json::Value::Null)
    }

    /// Save parameters plus extra tensors (e.g. optimizer state) and extra metadata.
    pub fn save_with(&self, dir: &Path, extra: Vec<(String, Tensor)>, extra_meta: serde_json::Value) -> Result<String> {
        let mut tensors = self.params.named_tensors();
        tensors.extend(extra);
        let mut meta = self.metadata()?;
        meta["extra"] = extra_meta;
        checkpoint::save(dir, &tensors, meta)
    }

    pub fn from_checkpoint(ck: &checkpoint::Checkpoint) -> Result<Self> {
        let meta: ModelMeta = serde_json::from_value(ck.metadata.clone())?;
        let mut model = Self::with_dtype(
            &meta.config,
            Vocab::from_tokens(meta.vocab),
            &meta.codec_id,
            meta.latent_channels,
            0,
            DType::F32,
        )?;
        model.trained_with_dropout = meta.trained_with_dropout;
        let own: std::collections::BTreeMap<String, Tensor> = ck
            .tensors
            .iter()
            .filter(|(k, _)| model.params.get(k).is_some())
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        model.params.load(&own)?;
        Ok(model)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::from_checkpoint(&checkpoint::load(dir)?)
    }
}

/// Denoising loss with an arbitrary noise predictor: draws t ~ U{1..T} and
/// eps ~ N(0, I) per row, noises `z0`, and returns the mean squared error
/// between eps and the prediction.
pub fn denoise_loss_with<F>(schedule: &NoiseSchedule, z0: &Tensor, rng: &mut Rng, predict: F) -> Result<Tensor>
where
    F: FnOnce(&Tensor, &[usize]) -> Result<Tensor>,
{
    let n = z0.dim(0)?;
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=schedule.steps)).collect();
    let eps = randn(rng, z0.dims(), z0.dtype())?;
    let z_t = schedule.noise_batch(z0, &ts, &eps)?;
    let pred = predict(&z_t, &ts)?;
    if pred.dims() != eps.dims() {
        return Err(Error::ShapeError(format!("prediction {:?} vs noise {:?}", pred.dims(), eps.dims())));
    }
    Ok((pred - eps)?.sqr()?.mean_all()?)
}

/// Ancestral reverse chain over `steps` timesteps evenly respaced in 1..=T
/// (always ending at T), with the clean-latent estimate clipped to [-1, 1].
/// Each row draws its noise from its own seed, so a row's result does not
/// depend on the rest of the batch. `shape` is the per-row latent shape.
pub fn ancestral_sample<F>(
    schedule: &NoiseSchedule,
    shape: &[usize],
    seeds: &[u64],
    steps: usize,
    dtype: DType,
    mut predict: F,
) -> Result<Tensor>
where
    F: FnMut(&Tensor, &[usize]) -> Result<Tensor>,
{
    let t_max = schedule.steps;
    if steps == 0 || steps > t_max {
        return Err(Error::InvalidTimestep { t: steps, max: t_max });
    }
    if seeds.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = seeds.len();
    let mut row_shape = vec![1];
    row_shape.extend_from_slice(shape);
    let mut rngs: Vec<Rng> = seeds.iter().map(|&s| seed::rng_for(s, "sample")).collect();
    let mut noise = || -> Result<Tensor> {
        let parts = rngs.iter_mut().map(|r| randn(r, &row_shape, dtype)).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    };

    let timesteps: Vec<usize> = (1..=steps).map(|i| (i * t_max).div_ceil(steps)).collect();
    let mut z = noise()?;
    for i in (0..steps).rev() {
        let t = timesteps[i];
        let ab = schedule.alpha_bars[t - 1];
        let ab_prev = if i == 0 { 1.0 } else { schedule.alpha_bars[timesteps[i - 1] - 1] };
        let beta = 1.0 - ab / ab_prev;

        let eps = predict(&z, &vec![t; n])?;
        let x0 = ((&z - (eps * (1.0 - ab).sqrt())?)? / ab.sqrt())?.clamp(-1.0, 1.0)?;
        let mean = ((x0 * (ab_prev.sqrt() * beta / (1.0 - ab)))?
            + (&z * ((1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab)))?)?;
        z = if i == 0 {
            mean
        } else {
            let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
            (mean + (noise()? * sigma)?)?
        };
    }
    Ok(z)
}

/// Value of a scalar tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::IDENTITY_ID;
    use candle_core::Device;

    fn tiny_config() -> DiffusionConfig {
        DiffusionConfig {
            timesteps: 50,
            widths: [8, 16, 16],
            text: TextEncoderConfig {
                dim: 16,
                layers: 1,
                max_len: 80,
            },
            ..DiffusionConfig::default()
        }
    }

    #[test]
    fn schedule_examples() {
        let s = build_schedule(1000, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bars[0] - 0.9999).abs() < 1e-12);
        let s = build_schedule(2, 0.1, 0.1).unwrap();
        assert!((s.alpha_bars[0] - 0.9).abs() < 1e-12);
        assert!((s.alpha_bars[1] - 0.81).abs() < 1e-12);
    }

    #[test]
    fn schedule_bounds_rejected() {
        for (t, a, b) in [(1, 0.1, 0.2), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)] {
            assert!(matches!(build_schedule(t, a, b), Err(Error::InvalidSchedule(_))));
        }
    }

    #[test]
    fn forward_noise_hand_values() {
        let s = build_schedule(2, 0.1, 0.1).unwrap();
        let z0 = LatentTensor {
            values: Tensor::zeros((3, 4, 4), DType::F32, &Device::Cpu).unwrap(),
            downscale_factor: 1,
            codec_id: IDENTITY_ID.into(),
        };
        let eps = Tensor::ones((3, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let zt = forward_noise(&z0, 2, &eps, &s).unwrap();
        let v = zt.values.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| (*x as f64 - 0.19f64.sqrt()).abs() < 1e-6));
        assert!(matches!(forward_noise(&z0, 0, &eps, &s), Err(Error::InvalidTimestep { .. })));
        assert!(matches!(forward_noise(&z0, 3, &eps, &s), Err(Error::InvalidTimestep { .. })));
        let bad = Tensor::ones((3, 4, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(forward_noise(&z0, 1, &bad, &s), Err(Error::ShapeError(_))));
    }

    #[test]
    fn zero_predictor_loss_is_unit_variance() {
        let s = build_schedule(200, 5e-4, 0.1).unwrap();
        let z0 = Tensor::zeros((10_000, 1), DType::F64, &Device::Cpu).unwrap();
        let mut rng = seed::rng(3);
        let loss = denoise_loss_with(&s, &z0, &mut rng, |z, _| Ok(z.zeros_like()?)).unwrap();
        assert!((scalar(&loss).unwrap() - 1.0).abs() < 0.05);
    }

    #[test]
    fn oracle_predictor_loss_is_zero() {
        let s = build_schedule(200, 5e-4, 0.1).unwrap();
        let z0 = Tensor::from_vec((0..64).map(|i| (i as f64 / 32.0) - 1.0).collect::<Vec<_>>(), (4, 16), &Device::Cpu).unwrap();
        let mut rng = seed::rng(4);
        let loss = denoise_loss_with(&s, &z0, &mut rng, |z_t, ts| {
            // Invert the noising with the known clean latent.
            let rows = ts
                .iter()
                .enumerate()
                .map(|(i, &t)| {
                    let ab = s.alpha_bars[t - 1];
                    ((z_t.get(i)? - (z0.get(i)? * ab.sqrt())?)? / (1.0 - ab).sqrt()).map_err(Error::from)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(Tensor::stack(&rows, 0)?)
        })
        .unwrap();
        assert!(scalar(&loss).unwrap() < 1e-20);
    }

    #[test]
    fn sampler_with_exact_predictor_recovers_target() {
        let s = build_schedule(200, 5e-4, 0.1).unwrap();
        let target = Tensor::from_vec((0..48).map(|i| (i as f32 / 24.0) - 1.0).collect::<Vec<_>>(), (3, 4, 4), &Device::Cpu).unwrap();
        for steps in [1usize, 10, 200] {
            let out = ancestral_sample(&s, &[3, 4, 4], &[1, 2], steps, DType::F32, |z, ts| {
                let ab = s.alpha_bars[ts[0] - 1];
                Ok((z.broadcast_sub(&(target.unsqueeze(0)? * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
            })
            .unwrap();
            let err = out.broadcast_sub(&target).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert!(err < 1e-4, "steps {steps}: {err}");
        }
    }

    #[test]
    fn forward_noise_moments() {
        let s = build_schedule(200, 5e-4, 0.1).unwrap();
        let t = 40;
        let ab = s.alpha_bar(t).unwrap();
        let z0_row = [-1.0f64, -0.3, 0.5, 1.0];
        let n = 10_000;
        let z0 = Tensor::from_vec(z0_row.repeat(n), (n, 4), &Device::Cpu).unwrap();
        let eps = randn(&mut seed::rng(11), &[n, 4], DType::F64).unwrap();
        let zt = s.noise_batch(&z0, &vec![t; n], &eps).unwrap().to_vec2::<f64>().unwrap();
        for (j, x0) in z0_row.iter().enumerate() {
            let col: Vec<f64> = zt.iter().map(|r| r[j]).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!((mean - ab.sqrt() * x0).abs() < 0.03, "mean {mean}");
            assert!((var - (1.0 - ab)).abs() < 0.03, "var {var}");
        }
    }

    #[test]
    fn untrained_head_predicts_scaled_input() {
        let m = DiffusionModel::new(&tiny_config(), Vocab::standard(), &CodecModel::identity(), 4).unwrap();
        let ctx = m.encode_text(&[vec![5, 6], vec![7]]).unwrap();
        let z = randn(&mut seed::rng(1), &[2, 3, 16, 16], DType::F32).unwrap();
        let ts = [3usize, 40];
        let eps = m.predict_eps(&z, &ts, &ctx).unwrap().to_dtype(DType::F64).unwrap();
        for (row, &t) in ts.iter().enumerate() {
            let scale = (1.0 - m.schedule.alpha_bar(t).unwrap()).sqrt();
            let want = (z.get(row).unwrap().to_dtype(DType::F64).unwrap() * scale).unwrap();
            let diff = (eps.get(row).unwrap() - want).unwrap().abs().unwrap().max_all().unwrap();
            assert!(diff.to_scalar::<f64>().unwrap() < 1e-6);
        }
    }

    #[test]
    fn denoise_loss_gradient_matches_finite_differences() {
        let cfg = tiny_config();
        let m = DiffusionModel::with_dtype(&cfg, Vocab::standard(), IDENTITY_ID, 3, 5, DType::F64).unwrap();
        // Give the zero-initialised output head weights so gradients reach every layer.
        let head = m.params.iter().find(|(k, _)| k.contains("conv_out") && k.ends_with("weight")).unwrap().1.clone();
        head.set(&randn(&mut seed::rng(2), head.dims(), DType::F64).unwrap().affine(0.05, 0.0).unwrap()).unwrap();
        let z0 = randn(&mut seed::rng(3), &[2, 3, 8, 8], DType::F64).unwrap().tanh().unwrap();
        let caps = vec![vec![5u32, 6, 7], vec![8]];
        let loss = |m: &DiffusionModel| m.denoise_loss(&z0, &caps, &mut seed::rng(4), 0.0).unwrap();
        let grads = loss(&m).backward().unwrap();
        let probes = ["conv_out", "mid1", "down1", "text"];
        for probe in probes {
            let (name, var) = m.params.iter().find(|(k, _)| k.contains(probe)).map(|(k, v)| (k.clone(), v.clone())).unwrap();
            let flat = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let idx = flat.len() / 2;
            let analytic = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()[idx];
            let h = 1e-5;
            let at = |delta: f64| {
                let mut v = flat.clone();
                v[idx] += delta;
                var.set(&Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap()).unwrap();
                scalar(&loss(&m)).unwrap()
            };
            let numeric = (at(h) - at(-h)) / (2.0 * h);
            var.set(&Tensor::from_vec(flat.clone(), var.dims(), &Device::Cpu).unwrap()).unwrap();
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel <= 1e-3, "{name}: analytic {analytic} numeric {numeric}");
        }
    }

    #[test]
    fn smoke_training_stays_finite() {
        let codec = CodecModel::identity();
        let m = DiffusionModel::new(&tiny_config(), Vocab::standard(), &codec, 6).unwrap();
        let z0 = randn(&mut seed::rng(7), &[4, 3, 8, 8], DType::F32).unwrap().tanh().unwrap();
        let caps = vec![vec![5u32, 6], vec![7], vec![8, 9], vec![10]];
        let mut opt = crate::optim::Optimizer::new(crate::optim::OptimConfig::adam(2e-3), m.params.all());
        let mut rng = seed::rng(8);
        for _ in 0..100 {
            let loss = m.denoise_loss(&z0, &caps, &mut rng, 0.1).unwrap();
            assert!(scalar(&loss).unwrap().is_finite());
            opt.backward_step(&loss).unwrap();
        }
        for (name, var) in m.params.iter() {
            let v = var.as_tensor().flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap();
            assert!(v.iter().all(|x| x.is_finite()), "{name}");
        }
    }

    #[test]
    fn unet_is_resolution_agnostic() {
        let codec = CodecModel::identity();
        let m = DiffusionModel::new(&tiny_config(), Vocab::standard(), &codec, 0).unwrap();
        let ctx = m.encode_text(&[vec![5, 6], vec![7]]).unwrap();
        for size in [16usize, 32] {
            let z = Tensor::ones((2, 3, size, size), DType::F32, &Device::Cpu).unwrap();
            let out = m.predict_eps(&z, &[1, 10], &ctx).unwrap();
            assert_eq!(out.dims(), z.dims());
        }
        let z = Tensor::ones((2, 3, 18, 18), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(m.predict_eps(&z, &[1, 1], &ctx), Err(Error::ShapeError(_))));
    }

    #[test]
    fn loss_is_seed_deterministic() {
        let m = DiffusionModel::new(&tiny_config(), Vocab::standard(), &CodecModel::identity(), 1).unwrap();
        let z = Tensor::zeros((2, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let caps = vec![vec![5u32, 6], vec![7]];
        let a = scalar(&m.denoise_loss(&z, &caps, &mut seed::rng(9), 0.1).unwrap()).unwrap();
        let b = scalar(&m.denoise_loss(&z, &caps, &mut seed::rng(9), 0.1).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampling_contracts() {
        let codec = CodecModel::identity();
        let mut m = DiffusionModel::new(&tiny_config(), Vocab::standard(), &codec, 2).unwrap();
        let cap: Vec<String> = ["a", "modern", "bedroom"].iter().map(|s| s.to_string()).collect();
        let a = m.sample(&codec, &cap, 16, 10, 1.0, 5).unwrap();
        let b = m.sample(&codec, &cap, 16, 10, 1.0, 5).unwrap();
        assert_eq!(a.pixels, b.pixels);
        let c = m.sample(&codec, &cap, 16, 10, 1.0, 6).unwrap();
        assert_ne!(a.pixels, c.pixels);
        assert!(matches!(m.sample(&codec, &cap, 16, 10, 3.0, 5), Err(Error::GuidanceUnsupported)));
        m.trained_with_dropout = true;
        let g = m.sample(&codec, &cap, 16, 10, 1.0, 5).unwrap();
        assert_eq!(a.pixels, g.pixels);
        m.sample(&codec, &cap, 16, 10, 3.0, 5).unwrap();
        assert!(matches!(m.sample(&codec, &cap, 16, 51, 1.0, 5), Err(Error::InvalidTimestep { .. })));
        let learned = CodecModel::learned(&Default::default(), 0).unwrap();
        assert!(matches!(m.sample(&learned, &cap, 16, 10, 1.0, 5), Err(Error::CodecMismatch { .. })));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let codec = CodecModel::identity();
        let m = DiffusionModel::new(&tiny_config(), Vocab::standard(), &codec, 3).unwrap();
        m.save(dir.path()).unwrap();
        let l = DiffusionModel::load(dir.path()).unwrap();
        assert_eq!(l.params.content_hash().unwrap(), m.params.content_hash().unwrap());
        assert_eq!(l.config, m.config);
    }
}
