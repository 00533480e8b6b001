//! Contrastive image-text dual encoder.
//!
//! A small conv image tower and the transformer text tower project into a
//! shared unit sphere. Training is symmetric InfoNCE in two stages (broad
//! corpus, then the design domain). The cosine score doubles as the reward for
//! best-of-K fine-tuning.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::corpus::{batch_tensor, CorpusItem, Dialect, ImageSample};
use crate::nn::{cross_entropy, l2_normalize, Conv2d, Linear, ParamBuilder, ParamStore};
use crate::optim::{OptimConfig, Optimizer};
use crate::seed;
use crate::text::{TextEncoderConfig, TextTransformer, TokenBatch, Vocab};
use crate::{Error, Result};

pub const MIN_LOGIT_SCALE: f64 = 1.0;
pub const MAX_LOGIT_SCALE: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    Stage1,
    Stage2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualEncoderConfig {
    pub embed_dim: usize,
    pub image_res: usize,
    pub image_widths: [usize; 3],
    pub text: TextEncoderConfig,
    /// Initial multiplier applied to cosines before the softmax.
    pub logit_scale_init: f64,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
}

impl Default for DualEncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            image_res: 32,
            image_widths: [16, 32, 64],
            text: TextEncoderConfig::default(),
            logit_scale_init: 1.0 / 0.07,
            stage1: StageConfig {
                epochs: 40,
                batch_size: 128,
                lr: 1e-3,
                warmup_steps: 20,
            },
            stage2: StageConfig {
                epochs: 15,
                batch_size: 32,
                lr: 5e-4,
                warmup_steps: 10,
            },
        }
    }
}

#[derive(Clone, Debug)]
struct ImageTower {
    convs: [Conv2d; 3],
    proj: Linear,
}

impl ImageTower {
    fn new(pb: &mut ParamBuilder, cfg: &DualEncoderConfig) -> Result<Self> {
        let [w1, w2, w3] = cfg.image_widths;
        let cells = (cfg.image_res / 8) * (cfg.image_res / 8);
        Ok(Self {
            convs: [
                Conv2d::new(&mut pb.sub("conv1"), 3, w1, 3, 2)?,
                Conv2d::new(&mut pb.sub("conv2"), w1, w2, 3, 2)?,
                Conv2d::new(&mut pb.sub("conv3"), w2, w3, 3, 2)?,
            ],
            proj: Linear::new(&mut pb.sub("proj"), w3 * cells, cfg.embed_dim)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = ((x * 2.0)? - 1.0)?;
        for conv in &self.convs {
            h = conv.forward(&h)?.silu()?;
        }
        self.proj.forward(&h.flatten_from(1)?)
    }
}

#[derive(Clone)]
pub struct DualEncoderModel {
    pub config: DualEncoderConfig,
    pub params: ParamStore,
    pub vocab: Vocab,
    pub stage: Stage,
    image_tower: ImageTower,
    text_tower: TextTransformer,
    text_proj: Linear,
    log_logit_scale: Tensor,
}

impl std::fmt::Debug for DualEncoderModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DualEncoderModel")
            .field("stage", &self.stage)
            .field("embed_dim", &self.config.embed_dim)
            .finish()
    }
}

#[derive(Serialize, Deserialize)]
struct EncoderMeta {
    config: DualEncoderConfig,
    vocab: Vec<String>,
    stage: Stage,
}

impl DualEncoderModel {
    pub fn new(config: &DualEncoderConfig, vocab: Vocab, seed_value: u64) -> Result<Self> {
        if config.image_res < 8 || config.image_res % 8 != 0 {
            return Err(Error::InvalidResolution(config.image_res));
        }
        let mut params = ParamStore::new(DType::F32);
        let mut rng = seed::rng_for(seed_value, "encoder.init");
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let image_tower = ImageTower::new(&mut pb.sub("image"), config)?;
        let text_tower = TextTransformer::new(&mut pb.sub("text"), vocab.len(), &config.text)?;
        let text_proj = Linear::new(&mut pb.sub("text_proj"), config.text.dim, config.embed_dim)?;
        let log_logit_scale = pb.constant("log_logit_scale", &[], config.logit_scale_init.ln())?;
        Ok(Self {
            config: config.clone(),
            params,
            vocab,
            stage: Stage::Init,
            image_tower,
            text_tower,
            text_proj,
            log_logit_scale,
        })
    }

    /// Clamped logit scale.
    pub fn logit_scale(&self) -> Result<f64> {
        let raw = self.log_logit_scale.to_dtype(DType::F64)?.to_scalar::<f64>()?.exp();
        Ok(raw.clamp(MIN_LOGIT_SCALE, MAX_LOGIT_SCALE))
    }

    fn logit_scale_tensor(&self) -> Result<Tensor> {
        Ok(self
            .log_logit_scale
            .clamp(MIN_LOGIT_SCALE.ln(), MAX_LOGIT_SCALE.ln())?
            .exp()?)
    }

    fn check_image(&self, img: &ImageSample) -> Result<()> {
        if img.resolution != (self.config.image_res, self.config.image_res) {
            return Err(Error::InvalidResolution(img.resolution.0));
        }
        Ok(())
    }

    /// Unit image embeddings (N, embed_dim).
    pub fn embed_images(&self, images: &[&ImageSample]) -> Result<Tensor> {
        for img in images {
            self.check_image(img)?;
        }
        if images.is_empty() {
            return Err(Error::EmptyBatch);
        }
        self.embed_image_tensor(&batch_tensor(images, DType::F32)?)
    }

    fn embed_image_tensor(&self, x: &Tensor) -> Result<Tensor> {
        l2_normalize(&self.image_tower.forward(x)?)
    }

    /// Unit text embeddings (N, embed_dim) from token ids.
    pub fn embed_token_seqs(&self, seqs: &[Vec<u32>]) -> Result<Tensor> {
        let batch = TokenBatch::new(seqs, self.config.text.max_len, DType::F32)?;
        l2_normalize(&self.text_proj.forward(&self.text_tower.pooled(&batch)?)?)
    }

    pub fn embed_texts(&self, captions: &[&[String]]) -> Result<Tensor> {
        let seqs = captions.iter().map(|c| self.vocab.encode(c)).collect::<Result<Vec<_>>>()?;
        self.embed_token_seqs(&seqs)
    }

    pub fn embed_image(&self, img: &ImageSample) -> Result<Vec<f32>> {
        Ok(self.embed_images(&[img])?.squeeze(0)?.to_vec1()?)
    }

    pub fn embed_text(&self, caption: &[String]) -> Result<Vec<f32>> {
        Ok(self.embed_texts(&[caption])?.squeeze(0)?.to_vec1()?)
    }

    /// Cosine of the caption and image embeddings; this is the reward.
    pub fn score(&self, caption: &[String], img: &ImageSample) -> Result<f64> {
        Ok(cosine(&self.embed_text(caption)?, &self.embed_image(img)?))
    }

    /// Rewards of several images against one caption.
    pub fn score_many(&self, caption: &[String], images: &[&ImageSample]) -> Result<Vec<f64>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let t = self.embed_text(caption)?;
        let e = self.embed_images(images)?.to_vec2::<f32>()?;
        Ok(e.iter().map(|row| cosine(&t, row)).collect())
    }

    /// Symmetric InfoNCE over the batch of aligned (image, caption) pairs.
    pub fn contrastive_loss(&self, images: &[&ImageSample], captions: &[&[String]]) -> Result<Tensor> {
        if images.len() != captions.len() {
            return Err(Error::ShapeError(format!("{} images for {} captions", images.len(), captions.len())));
        }
        if images.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let img = self.embed_images(images)?;
        let txt = self.embed_texts(captions)?;
        contrastive_loss_from_embeddings(&img, &txt, &self.logit_scale_tensor()?)
    }

    fn tower_loss(&self, x: &Tensor, seqs: &[Vec<u32>]) -> Result<Tensor> {
        let img = self.embed_image_tensor(x)?;
        let txt = self.embed_token_seqs(seqs)?;
        contrastive_loss_from_embeddings(&img, &txt, &self.logit_scale_tensor()?)
    }

    pub fn save(&self, dir: &Path) -> Result<String> {
        let meta = serde_json::json!({
            "model": "dual_encoder",
            "config": self.config,
            "vocab": self.vocab.tokens(),
            "stage": self.stage,
        });
        checkpoint::save(dir, &self.params.named_tensors(), meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ck = checkpoint::load(dir)?;
        let meta: EncoderMeta = serde_json::from_value(ck.metadata.clone())?;
        let mut model = Self::new(&meta.config, Vocab::from_tokens(meta.vocab), 0)?;
        model.params.load(&ck.tensors)?;
        model.stage = meta.stage;
        Ok(model)
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| *x as f64 * *y as f64).sum();
    let na: f64 = a.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Mean of the image->text and text->image cross-entropies of the
/// `scale * img . txt^T` logit matrix, with matches on the diagonal.
pub fn contrastive_loss_from_embeddings(img: &Tensor, txt: &Tensor, scale: &Tensor) -> Result<Tensor> {
    let n = img.dim(0)?;
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let logits = img.matmul(&txt.t()?)?.broadcast_mul(&scale.to_dtype(img.dtype())?)?;
    let targets: Vec<u32> = (0..n as u32).collect();
    let i2t = cross_entropy(&logits, &targets)?;
    let t2i = cross_entropy(&logits.t()?.contiguous()?, &targets)?;
    Ok(((i2t + t2i)? * 0.5)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// First stage on the broad corpus. Allowed from any stage.
pub fn train_stage1(model: &mut DualEncoderModel, items: &[CorpusItem], seed_value: u64) -> Result<TrainReport> {
    let cfg = model.config.stage1.clone();
    let report = train_contrastive(model, items, &cfg, seed::derive(seed_value, "encoder.stage1"))?;
    model.stage = Stage::Stage1;
    Ok(TrainReport {
        stage: Stage::Stage1,
        ..report
    })
}

/// Second stage on the design domain; requires a stage-1 model.
pub fn train_stage2(model: &mut DualEncoderModel, items: &[CorpusItem], seed_value: u64) -> Result<TrainReport> {
    if model.stage < Stage::Stage1 {
        return Err(Error::StageOrderError(format!(
            "stage 2 needs a stage-1 model, found {:?}",
            model.stage
        )));
    }
    let cfg = model.config.stage2.clone();
    let report = train_contrastive(model, items, &cfg, seed::derive(seed_value, "encoder.stage2"))?;
    model.stage = Stage::Stage2;
    Ok(TrainReport {
        stage: Stage::Stage2,
        ..report
    })
}

/// Each epoch makes two passes over the shuffled scenes; every scene sends one
/// of its two captions (chosen at random) to each pass, so a batch never
/// holds two positives for the same image.
fn train_contrastive(model: &mut DualEncoderModel, items: &[CorpusItem], cfg: &StageConfig, seed_value: u64) -> Result<TrainReport> {
    if items.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let res = model.config.image_res;
    let images = items.iter().map(|it| it.image_at(res)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&ImageSample> = images.iter().collect();
    let pixels = batch_tensor(&refs, DType::F32)?;
    let seqs: Vec<[Vec<u32>; 2]> = items
        .iter()
        .map(|it| Ok([model.vocab.encode_record(it.caption(Dialect::A))?, model.vocab.encode_record(it.caption(Dialect::B))?]))
        .collect::<Result<_>>()?;

    let batch = cfg.batch_size.max(1);
    let steps_per_epoch = 2 * items.len().div_ceil(batch);
    let mut opt = Optimizer::new(
        OptimConfig {
            warmup_steps: cfg.warmup_steps,
            decay_steps: cfg.epochs * steps_per_epoch,
            ..OptimConfig::adam(cfg.lr)
        },
        model.params.all(),
    );
    let mut rng = seed::rng(seed_value);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let first: Vec<usize> = (0..items.len()).map(|_| rng.random_range(0..2)).collect();
        let mut total = 0.0;
        let mut count = 0usize;
        for pass in 0..2 {
            let mut order: Vec<usize> = (0..items.len()).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                let idx = Tensor::from_vec(chunk.iter().map(|&i| i as u32).collect::<Vec<_>>(), chunk.len(), &Device::Cpu)?;
                let x = pixels.index_select(&idx, 0)?;
                let caps: Vec<Vec<u32>> = chunk.iter().map(|&i| seqs[i][(first[i] + pass) % 2].clone()).collect();
                let loss = model.tower_loss(&x, &caps)?;
                total += loss.to_scalar::<f32>()? as f64;
                count += 1;
                opt.backward_step(&loss)?;
            }
        }
        epoch_losses.push(total / count as f64);
    }
    Ok(TrainReport {
        stage: model.stage,
        epoch_losses,
        steps: opt.step_count(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ImageToText,
    TextToImage,
}

impl Direction {
    pub fn short(self) -> &'static str {
        match self {
            Direction::ImageToText => "i2t",
            Direction::TextToImage => "t2i",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub dialect: Dialect,
    pub recall_at: BTreeMap<usize, f64>,
}

/// 1-based rank of the true match (diagonal) in each row of `scores`.
/// Ties with earlier candidates count against the query.
pub fn diagonal_ranks(scores: &[Vec<f32>]) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let own = row[i];
            1 + row
                .iter()
                .enumerate()
                .filter(|(j, s)| **s > own || (**s == own && *j < i))
                .count()
        })
        .collect()
}

/// Recall@k for both directions from a square image x text score matrix.
pub fn retrieval_from_scores(scores: &[Vec<f32>], dialect: Dialect, ks: &[usize]) -> Result<Vec<RetrievalReport>> {
    let n = scores.len();
    let max_k = ks.iter().copied().max().unwrap_or(1);
    if n < max_k {
        return Err(Error::GalleryTooSmall { gallery: n, k: max_k });
    }
    let transposed: Vec<Vec<f32>> = (0..n).map(|j| scores.iter().map(|row| row[j]).collect()).collect();
    let report = |direction, m: &[Vec<f32>]| {
        let ranks = diagonal_ranks(m);
        let recall_at = ks
            .iter()
            .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64))
            .collect();
        RetrievalReport {
            direction,
            dialect,
            recall_at,
        }
    };
    Ok(vec![report(Direction::ImageToText, scores), report(Direction::TextToImage, &transposed)])
}

/// Retrieval over the given pairs in one caption dialect.
pub fn eval_retrieval(model: &DualEncoderModel, items: &[CorpusItem], dialect: Dialect, ks: &[usize]) -> Result<Vec<RetrievalReport>> {
    let max_k = ks.iter().copied().max().unwrap_or(1);
    if items.len() < max_k {
        return Err(Error::GalleryTooSmall {
            gallery: items.len(),
            k: max_k,
        });
    }
    let res = model.config.image_res;
    let mut img_rows = Vec::new();
    let mut txt_rows = Vec::new();
    for chunk in items.chunks(128) {
        let images = chunk.iter().map(|it| it.image_at(res)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&ImageSample> = images.iter().collect();
        img_rows.push(model.embed_images(&refs)?);
        let caps: Vec<&[String]> = chunk.iter().map(|it| it.caption(dialect).caption.as_slice()).collect();
        txt_rows.push(model.embed_texts(&caps)?);
    }
    let img = Tensor::cat(&img_rows, 0)?;
    let txt = Tensor::cat(&txt_rows, 0)?;
    let scores = img.matmul(&txt.t()?)?.to_vec2::<f32>()?;
    retrieval_from_scores(&scores, dialect, ks)
}

/// Mean R@1 over both directions and both dialects.
pub fn mean_r1(model: &DualEncoderModel, items: &[CorpusItem]) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for dialect in Dialect::ALL {
        for r in eval_retrieval(model, items, dialect, &[1])? {
            total += r.recall_at[&1];
            n += 1;
        }
    }
    Ok(total / n as f64)
}

pub const RETRIEVAL_KS: [usize; 3] = [1, 5, 10];

/// CSV header for retrieval rows: direction x R@1/5/10 x dialect.
pub fn retrieval_csv_header() -> String {
    let mut cols = vec!["model".to_string()];
    for dialect in Dialect::ALL {
        for direction in [Direction::ImageToText, Direction::TextToImage] {
            for k in RETRIEVAL_KS {
                cols.push(format!("{}_{:?}_r{k}", direction.short(), dialect));
            }
        }
    }
    cols.join(",")
}

/// One CSV row for a model; missing cells are left empty.
pub fn retrieval_csv_row(model_tag: &str, reports: &[RetrievalReport]) -> String {
    let mut cells = vec![model_tag.to_string()];
    for dialect in Dialect::ALL {
        for direction in [Direction::ImageToText, Direction::TextToImage] {
            let rep = reports.iter().find(|r| r.dialect == dialect && r.direction == direction);
            for k in RETRIEVAL_KS {
                cells.push(
                    rep.and_then(|r| r.recall_at.get(&k))
                        .map(|v| format!("{v:.4}"))
                        .unwrap_or_default(),
                );
            }
        }
    }
    cells.join(",")
}
