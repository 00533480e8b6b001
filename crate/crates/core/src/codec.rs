//! Image <-> latent mapping. Diffusion runs on the codec's latents.
//!
//! The identity codec is an affine map of pixels to [-1, 1]. The learned codec
//! is a four-layer convolutional autoencoder that halves the spatial size.

use std::path::Path;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::{batch_tensor, ImageSample};
use crate::nn::{upsample2x, Conv2d, ParamBuilder, ParamStore};
use crate::optim::{OptimConfig, Optimizer};
use crate::seed;
use crate::{Error, Result};

pub const IDENTITY_ID: &str = "identity";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CodecKind {
    Identity,
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub kind: CodecKind,
    pub latent_channels: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Resolution the codec is trained at (corpus images are downsampled to it).
    pub train_res: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            kind: CodecKind::Identity,
            latent_channels: 4,
            hidden: 32,
            epochs: 30,
            batch_size: 16,
            lr: 2e-3,
            train_res: 32,
        }
    }
}

/// Latent code of one image, (channels, h, w).
#[derive(Clone, Debug)]
pub struct LatentTensor {
    pub values: Tensor,
    pub downscale_factor: usize,
    pub codec_id: String,
}

impl LatentTensor {
    pub fn spatial(&self) -> Result<(usize, usize)> {
        let (_, h, w) = self.values.dims3()?;
        Ok((h, w))
    }
}

#[derive(Clone, Debug)]
struct AutoEncoder {
    enc1: Conv2d,
    enc2: Conv2d,
    dec1: Conv2d,
    dec2: Conv2d,
}

impl AutoEncoder {
    fn new(pb: &mut ParamBuilder, cfg: &CodecConfig) -> Result<Self> {
        Ok(Self {
            enc1: Conv2d::new(&mut pb.sub("enc1"), 3, cfg.hidden, 3, 1)?,
            enc2: Conv2d::new(&mut pb.sub("enc2"), cfg.hidden, cfg.latent_channels, 3, 2)?,
            dec1: Conv2d::new(&mut pb.sub("dec1"), cfg.latent_channels, cfg.hidden, 3, 1)?,
            dec2: Conv2d::new(&mut pb.sub("dec2"), cfg.hidden, 3, 3, 1)?,
        })
    }

    /// Pixels in [0,1] -> latents in (-1, 1).
    fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.enc1.forward(&((x * 2.0)? - 1.0)?)?.silu()?;
        Ok(self.enc2.forward(&h)?.tanh()?)
    }

    /// Latents -> unclipped pixels.
    fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let h = self.dec1.forward(&upsample2x(z)?)?.silu()?;
        let y = self.dec2.forward(&h)?;
        Ok(((y + 1.0)? * 0.5)?)
    }
}

#[derive(Clone)]
pub struct CodecModel {
    pub kind: CodecKind,
    pub config: CodecConfig,
    pub params: ParamStore,
    net: Option<AutoEncoder>,
    id: String,
}

impl std::fmt::Debug for CodecModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CodecModel").field("kind", &self.kind).field("id", &self.id).finish()
    }
}

impl CodecModel {
    pub fn identity() -> Self {
        Self {
            kind: CodecKind::Identity,
            config: CodecConfig::default(),
            params: ParamStore::new(DType::F32),
            net: None,
            id: IDENTITY_ID.into(),
        }
    }

    /// Untrained learned codec with parameters drawn from `seed`.
    pub fn learned(config: &CodecConfig, seed_value: u64) -> Result<Self> {
        let mut params = ParamStore::new(DType::F32);
        let mut rng = seed::rng_for(seed_value, "codec.init");
        let net = AutoEncoder::new(&mut ParamBuilder::new(&mut params, &mut rng), config)?;
        let mut model = Self {
            kind: CodecKind::Learned,
            config: CodecConfig {
                kind: CodecKind::Learned,
                ..config.clone()
            },
            params,
            net: Some(net),
            id: String::new(),
        };
        model.refresh_id()?;
        Ok(model)
    }

    pub fn from_config(config: &CodecConfig, seed_value: u64) -> Result<Self> {
        match config.kind {
            CodecKind::Identity => Ok(Self::identity()),
            CodecKind::Learned => Self::learned(config, seed_value),
        }
    }

    fn refresh_id(&mut self) -> Result<()> {
        self.id = match self.kind {
            CodecKind::Identity => IDENTITY_ID.into(),
            CodecKind::Learned => format!("learned-{}", &self.params.content_hash()?[..12]),
        };
        Ok(())
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn downscale_factor(&self) -> usize {
        match self.kind {
            CodecKind::Identity => 1,
            CodecKind::Learned => 2,
        }
    }

    pub fn latent_channels(&self) -> usize {
        match self.kind {
            CodecKind::Identity => 3,
            CodecKind::Learned => self.config.latent_channels,
        }
    }

    fn check_size(&self, size: usize) -> Result<()> {
        let f = self.downscale_factor();
        if size == 0 || size % f != 0 {
            return Err(Error::InvalidResolution(size));
        }
        Ok(())
    }

    /// Encode a (N, 3, H, W) pixel batch to (N, C, H/f, W/f).
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, _) = x.dims4()?;
        self.check_size(h)?;
        match &self.net {
            None => Ok(((x * 2.0)? - 1.0)?),
            Some(net) => Ok(net.encode(&x.to_dtype(self.params.dtype())?)?.to_dtype(x.dtype())?),
        }
    }

    /// Decode a latent batch to unclipped pixels (N, 3, H, W).
    pub fn decode_tensor(&self, z: &Tensor) -> Result<Tensor> {
        match &self.net {
            None => Ok(((z + 1.0)? * 0.5)?),
            Some(net) => Ok(net.decode(&z.to_dtype(self.params.dtype())?)?.to_dtype(z.dtype())?),
        }
    }

    pub fn encode(&self, img: &ImageSample) -> Result<LatentTensor> {
        let x = img.to_tensor(DType::F32)?.unsqueeze(0)?;
        let z = self.encode_tensor(&x)?.squeeze(0)?;
        Ok(LatentTensor {
            values: z,
            downscale_factor: self.downscale_factor(),
            codec_id: self.id.clone(),
        })
    }

    pub fn encode_batch(&self, images: &[&ImageSample], dtype: DType) -> Result<Tensor> {
        let x = batch_tensor(images, dtype)?;
        self.encode_tensor(&x)
    }

    pub fn decode(&self, z: &LatentTensor) -> Result<ImageSample> {
        if z.codec_id != self.id {
            return Err(Error::CodecMismatch {
                expected: self.id.clone(),
                found: z.codec_id.clone(),
            });
        }
        let x = self.decode_tensor(&z.values.unsqueeze(0)?)?.squeeze(0)?;
        ImageSample::from_tensor(&x, 0)
    }

    /// Decode every latent in a batch; output is clipped to [0, 1].
    pub fn decode_batch(&self, z: &Tensor) -> Result<Vec<ImageSample>> {
        let x = self.decode_tensor(z)?;
        (0..x.dim(0)?)
            .map(|i| ImageSample::from_tensor(&x.get(i)?, 0))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<String> {
        let meta = serde_json::json!({
            "model": "codec",
            "kind": self.kind,
            "config": self.config,
            "codec_id": self.id,
        });
        checkpoint::save(dir, &self.params.named_tensors(), meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ck = checkpoint::load(dir)?;
        let config: CodecConfig = serde_json::from_value(ck.metadata["config"].clone())?;
        let kind: CodecKind = serde_json::from_value(ck.metadata["kind"].clone())?;
        let mut model = match kind {
            CodecKind::Identity => Self::identity(),
            CodecKind::Learned => Self::learned(&config, 0)?,
        };
        model.params.load(&ck.tensors)?;
        model.refresh_id()?;
        Ok(model)
    }
}

/// Train the learned codec on pixel reconstruction MSE. Returns the model and
/// the per-epoch mean training loss.
pub fn train_codec(images: &[ImageSample], config: &CodecConfig, seed_value: u64) -> Result<(CodecModel, Vec<f64>)> {
    if config.kind == CodecKind::Identity {
        return Err(Error::NothingToTrain);
    }
    if images.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut model = CodecModel::learned(config, seed_value)?;
    let net = model.net.clone().expect("learned codec has a network");
    let images: Vec<ImageSample> = images
        .iter()
        .map(|img| crate::corpus::fit_resolution(img, config.train_res))
        .collect::<Result<_>>()?;
    let steps_per_epoch = images.len().div_ceil(config.batch_size);
    let mut opt = Optimizer::new(
        OptimConfig {
            decay_steps: config.epochs * steps_per_epoch,
            ..OptimConfig::adam(config.lr)
        },
        model.params.all(),
    );
    let mut rng = seed::rng_for(seed_value, "codec.train");
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&ImageSample> = chunk.iter().map(|&i| &images[i]).collect();
            let x = batch_tensor(&batch, DType::F32)?;
            let recon = net.decode(&net.encode(&x)?)?;
            let loss = (recon - &x)?.sqr()?.mean_all()?;
            total += loss.to_scalar::<f32>()? as f64 * chunk.len() as f64;
            opt.backward_step(&loss)?;
        }
        history.push(total / images.len() as f64);
    }
    model.refresh_id()?;
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{gen_scene, psnr};

    #[test]
    fn identity_maps_half_to_zero_and_back() {
        let codec = CodecModel::identity();
        let z = codec.encode(&ImageSample::constant(0.5, 16, 0)).unwrap();
        assert!(z.values.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| *v == 0.0));
        let back = codec.decode(&z).unwrap();
        assert!(back.pixels.iter().all(|v| *v == 0.5));
    }

    #[test]
    fn identity_round_trip_is_exact() {
        let codec = CodecModel::identity();
        let (img, _) = gen_scene(3, 32).unwrap();
        let back = codec.decode(&codec.encode(&img).unwrap()).unwrap();
        for (a, b) in img.pixels.iter().zip(&back.pixels) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn identity_decode_clips() {
        let codec = CodecModel::identity();
        let z = LatentTensor {
            values: Tensor::full(2f32, (3, 16, 16), &candle_core::Device::Cpu).unwrap(),
            downscale_factor: 1,
            codec_id: IDENTITY_ID.into(),
        };
        assert!(codec.decode(&z).unwrap().pixels.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn mismatched_codec_rejected() {
        let learned = CodecModel::learned(&CodecConfig::default(), 1).unwrap();
        let z = CodecModel::identity().encode(&ImageSample::constant(0.2, 16, 0)).unwrap();
        assert!(matches!(learned.decode(&z), Err(Error::CodecMismatch { .. })));
    }

    #[test]
    fn identity_has_nothing_to_train() {
        let imgs = vec![ImageSample::constant(0.1, 16, 0)];
        assert!(matches!(train_codec(&imgs, &CodecConfig::default(), 0), Err(Error::NothingToTrain)));
    }

    #[test]
    fn learned_shape_contract() {
        let codec = CodecModel::learned(&CodecConfig::default(), 4).unwrap();
        for res in [16usize, 32, 64] {
            let (img, _) = gen_scene(1, res).unwrap();
            let z = codec.encode(&img).unwrap();
            assert_eq!(z.values.dims(), &[4, res / 2, res / 2]);
            let back = codec.decode(&z).unwrap();
            assert_eq!(back.resolution, (res, res));
            assert!(back.pixels.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn one_image_overfits() {
        let (img, _) = gen_scene(21, 32).unwrap();
        let cfg = CodecConfig {
            kind: CodecKind::Learned,
            epochs: 3000,
            batch_size: 1,
            lr: 3e-3,
            ..CodecConfig::default()
        };
        let (codec, history) = train_codec(std::slice::from_ref(&img), &cfg, 0).unwrap();
        let back = codec.decode(&codec.encode(&img).unwrap()).unwrap();
        let p = psnr(&img, &back);
        assert!(p >= 40.0, "overfit PSNR {p:.2} dB, final loss {:?}", history.last());
    }

    #[test]
    fn save_load_keeps_id_and_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let codec = CodecModel::learned(&CodecConfig::default(), 9).unwrap();
        codec.save(dir.path()).unwrap();
        let loaded = CodecModel::load(dir.path()).unwrap();
        assert_eq!(loaded.id(), codec.id());
        let (img, _) = gen_scene(2, 16).unwrap();
        let a = codec.encode(&img).unwrap().values.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = loaded.encode(&img).unwrap().values.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }
}
