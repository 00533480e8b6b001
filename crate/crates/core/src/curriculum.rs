//! Two-resolution curriculum training.
//!
//! Every batch contributes a low-resolution denoising loss and a
//! high-resolution one, blended by a weight that starts at 1 and decays to 0:
//! `L = alpha(e) * L_low + (1 - alpha(e)) * L_high`. A term whose weight is
//! zero is not computed.

use std::path::Path;

use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint;
use crate::codec::CodecModel;
use crate::corpus::{check_resolution, downsample, CorpusItem, Dialect, ImageSample};
use crate::diffusion::{scalar, DiffusionModel, UNET_PREFIX};
use crate::optim::{OptimConfig, Optimizer};
use crate::seed::{self, Rng};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleFamily {
    /// 1 before `span`, 0 from then on.
    Step,
    /// max(0, 1 - e / span).
    Linear,
    /// (1 + cos(pi * min(e / span, 1))) / 2.
    Cosine,
    /// Weight 0 from the first epoch: the high-resolution-only comparator.
    HighResOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub family: ScheduleFamily,
    pub total_epochs: usize,
    /// Switch epoch (step) or decay length (linear, cosine).
    pub span: usize,
    pub low_res: usize,
    pub high_res: usize,
}

impl CurriculumSchedule {
    pub fn new(family: ScheduleFamily, total_epochs: usize, span: usize, low_res: usize, high_res: usize) -> Result<Self> {
        let s = Self {
            family,
            total_epochs,
            span,
            low_res,
            high_res,
        };
        s.validate()?;
        Ok(s)
    }

    /// Step family switching at half the budget.
    pub fn step_at_half(total_epochs: usize, low_res: usize, high_res: usize) -> Result<Self> {
        Self::new(ScheduleFamily::Step, total_epochs, total_epochs / 2, low_res, high_res)
    }

    /// The comparator that trains at high resolution only, for the same epochs.
    pub fn high_res_only(&self) -> Self {
        Self {
            family: ScheduleFamily::HighResOnly,
            span: 0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_resolution(self.low_res)?;
        check_resolution(self.high_res)?;
        if self.high_res != 2 * self.low_res {
            return Err(Error::InvalidConfig(format!(
                "high resolution {} must be twice the low resolution {}",
                self.high_res, self.low_res
            )));
        }
        if self.total_epochs == 0 {
            return Err(Error::InvalidConfig("curriculum needs at least one epoch".into()));
        }
        if self.span == 0 && matches!(self.family, ScheduleFamily::Linear | ScheduleFamily::Cosine) {
            return Err(Error::InvalidConfig("decay span must be positive".into()));
        }
        Ok(())
    }

    /// Weight of the low-resolution term at epoch `e`.
    pub fn alpha(&self, e: usize) -> Result<f64> {
        if e >= self.total_epochs {
            return Err(Error::InvalidEpoch {
                epoch: e,
                total: self.total_epochs,
            });
        }
        let frac = |e: usize| (e as f64 / self.span as f64).min(1.0);
        Ok(match self.family {
            ScheduleFamily::Step => {
                if e < self.span {
                    1.0
                } else {
                    0.0
                }
            }
            ScheduleFamily::Linear => (1.0 - frac(e)).max(0.0),
            ScheduleFamily::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * frac(e)).cos()),
            ScheduleFamily::HighResOnly => 0.0,
        })
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("schedule serializes");
        hex::encode(Sha256::digest(json))
    }
}

/// Result of one compound-loss evaluation. Terms that were skipped are `None`.
#[derive(Debug)]
pub struct CompoundLoss {
    pub total: Tensor,
    pub alpha: f64,
    pub low: Option<f64>,
    pub high: Option<f64>,
}

/// `alpha * low + (1 - alpha) * high`, using only the terms present.
pub fn blend(alpha: f64, low: Option<&Tensor>, high: Option<&Tensor>) -> Result<Tensor> {
    match (low, high) {
        (Some(l), Some(h)) => Ok(((l * alpha)? + (h * (1.0 - alpha))?)?),
        (Some(l), None) => Ok(l.clone()),
        (None, Some(h)) => Ok(h.clone()),
        (None, None) => Err(Error::EmptyBatch),
    }
}

/// Frozen-codec latents of a corpus at both resolutions, with token ids for
/// both caption dialects.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub low: Tensor,
    pub high: Tensor,
    pub captions: Vec<[Vec<u32>; 2]>,
}

impl TrainData {
    /// The low-resolution image is the box-downsampled high-resolution one.
    pub fn prepare(items: &[CorpusItem], codec: &CodecModel, model: &DiffusionModel, low_res: usize, high_res: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut low = Vec::new();
        let mut high = Vec::new();
        for chunk in items.chunks(64) {
            let hi: Vec<ImageSample> = chunk.iter().map(|it| it.image_at(high_res)).collect::<Result<_>>()?;
            let lo: Vec<ImageSample> = hi.iter().map(|img| downsample(img, high_res / low_res)).collect::<Result<_>>()?;
            high.push(codec.encode_batch(&hi.iter().collect::<Vec<_>>(), model.dtype())?);
            low.push(codec.encode_batch(&lo.iter().collect::<Vec<_>>(), model.dtype())?);
        }
        let captions = items
            .iter()
            .map(|it| {
                Ok([
                    model.vocab.encode_record(it.caption(Dialect::A))?,
                    model.vocab.encode_record(it.caption(Dialect::B))?,
                ])
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            low: Tensor::cat(&low, 0)?,
            high: Tensor::cat(&high, 0)?,
            captions,
        })
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }
}

/// One training batch: row indices into `TrainData` and the caption of each row.
#[derive(Clone, Debug)]
pub struct Batch {
    pub rows: Vec<usize>,
    pub captions: Vec<Vec<u32>>,
}

impl Batch {
    fn select(&self, t: &Tensor) -> Result<Tensor> {
        let idx = Tensor::from_vec(self.rows.iter().map(|&i| i as u32).collect::<Vec<_>>(), self.rows.len(), &Device::Cpu)?;
        Ok(t.index_select(&idx, 0)?)
    }
}

/// Low- and high-resolution denoising losses blended with `alpha(e)`.
/// Fresh timesteps and noise are drawn for each term.
pub fn compound_loss(
    model: &DiffusionModel,
    data: &TrainData,
    batch: &Batch,
    e: usize,
    schedule: &CurriculumSchedule,
    rng: &mut Rng,
    cond_dropout: f64,
) -> Result<CompoundLoss> {
    let alpha = schedule.alpha(e)?;
    let low = if alpha > 0.0 {
        Some(model.denoise_loss(&batch.select(&data.low)?, &batch.captions, rng, cond_dropout)?)
    } else {
        None
    };
    let high = if alpha < 1.0 {
        Some(model.denoise_loss(&batch.select(&data.high)?, &batch.captions, rng, cond_dropout)?)
    } else {
        None
    };
    let total = blend(alpha, low.as_ref(), high.as_ref())?;
    Ok(CompoundLoss {
        total,
        alpha,
        low: low.as_ref().map(scalar).transpose()?,
        high: high.as_ref().map(scalar).transpose()?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub optim: OptimConfig,
    /// Update the text encoder together with the UNet.
    pub train_text: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            optim: OptimConfig {
                warmup_steps: 50,
                ..OptimConfig::adam(2e-3)
            },
            train_text: true,
        }
    }
}

/// Per-epoch means. A term not evaluated in the epoch is `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub alpha: f64,
    pub low: Option<f64>,
    pub high: Option<f64>,
    pub loss: f64,
}

pub struct TrainState {
    pub epoch: usize,
    pub model: DiffusionModel,
    pub optimizer: Optimizer,
    pub history: Vec<EpochRecord>,
    pub seed: u64,
    pub schedule: CurriculumSchedule,
    pub config: TrainConfig,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    epoch: usize,
    history: Vec<EpochRecord>,
    seed: u64,
    schedule: CurriculumSchedule,
    schedule_hash: String,
    config: TrainConfig,
    optimizer_step: usize,
}

fn trainable(model: &DiffusionModel, train_text: bool) -> Vec<(String, candle_core::Var)> {
    if train_text {
        model.params.all()
    } else {
        model.params.with_prefix(UNET_PREFIX)
    }
}

impl TrainState {
    /// Fresh state. The learning-rate decay spans the whole run.
    pub fn new(model: DiffusionModel, schedule: &CurriculumSchedule, config: &TrainConfig, n_items: usize, seed_value: u64) -> Result<Self> {
        schedule.validate()?;
        let steps = schedule.total_epochs * n_items.div_ceil(config.batch_size.max(1));
        let mut optim = config.optim.clone();
        if optim.decay_steps == 0 {
            optim.decay_steps = steps;
        }
        let optimizer = Optimizer::new(optim.clone(), trainable(&model, config.train_text));
        Ok(Self {
            epoch: 0,
            model,
            optimizer,
            history: Vec::new(),
            seed: seed_value,
            schedule: schedule.clone(),
            config: TrainConfig {
                optim,
                ..config.clone()
            },
        })
    }

    pub fn save(&self, dir: &Path) -> Result<String> {
        let meta = StateMeta {
            epoch: self.epoch,
            history: self.history.clone(),
            seed: self.seed,
            schedule: self.schedule.clone(),
            schedule_hash: self.schedule.hash(),
            config: self.config.clone(),
            optimizer_step: self.optimizer.step_count(),
        };
        self.model
            .save_with(dir, self.optimizer.state_tensors(), serde_json::to_value(meta)?)
    }

    /// Resume from a checkpoint written by `save`, checking it was produced
    /// under `schedule`.
    pub fn load(dir: &Path, schedule: &CurriculumSchedule) -> Result<Self> {
        let ck = checkpoint::load(dir)?;
        let meta: StateMeta = serde_json::from_value(ck.metadata["extra"].clone())
            .map_err(|e| Error::ResumeMismatch(format!("checkpoint has no training state: {e}")))?;
        if meta.schedule_hash != schedule.hash() {
            return Err(Error::ResumeMismatch(format!(
                "schedule hash {} does not match {}",
                meta.schedule_hash,
                schedule.hash()
            )));
        }
        let model = DiffusionModel::from_checkpoint(&ck)?;
        let mut optimizer = Optimizer::new(meta.config.optim.clone(), trainable(&model, meta.config.train_text));
        let moments = ck
            .tensors
            .iter()
            .filter(|(k, _)| k.starts_with("adam."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        optimizer.load_state(meta.optimizer_step, &moments)?;
        Ok(Self {
            epoch: meta.epoch,
            model,
            optimizer,
            history: meta.history,
            seed: meta.seed,
            schedule: meta.schedule,
            config: meta.config,
        })
    }
}

/// Shuffled batches for epoch `e`; each scene contributes one caption, with
/// the dialect drawn per scene.
pub fn epoch_batches(data: &TrainData, batch_size: usize, rng: &mut Rng) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(|rows| Batch {
            rows: rows.to_vec(),
            captions: rows.iter().map(|&i| data.captions[i][rng.random_range(0..2)].clone()).collect(),
        })
        .collect()
}

/// Run the remaining epochs of `state`. After each epoch the state is written
/// to `checkpoint_dir` when one is given.
pub fn train_curriculum(mut state: TrainState, data: &TrainData, checkpoint_dir: Option<&Path>) -> Result<TrainState> {
    let dropout = state.model.config.cond_dropout;
    while state.epoch < state.schedule.total_epochs {
        let e = state.epoch;
        let mut rng = seed::rng(seed::derive_indexed(state.seed, "curriculum.epoch", e as u64));
        let batches = epoch_batches(data, state.config.batch_size, &mut rng);
        let (mut low, mut high, mut total) = (0.0, 0.0, 0.0);
        let mut alpha = 0.0;
        let mut low_seen = false;
        let mut high_seen = false;
        for batch in &batches {
            let loss = compound_loss(&state.model, data, batch, e, &state.schedule, &mut rng, dropout)?;
            alpha = loss.alpha;
            if let Some(l) = loss.low {
                low += l;
                low_seen = true;
            }
            if let Some(h) = loss.high {
                high += h;
                high_seen = true;
            }
            total += scalar(&loss.total)?;
            state.optimizer.backward_step(&loss.total)?;
        }
        if dropout > 0.0 {
            state.model.trained_with_dropout = true;
        }
        let n = batches.len() as f64;
        state.history.push(EpochRecord {
            epoch: e,
            alpha,
            low: low_seen.then_some(low / n),
            high: high_seen.then_some(high / n),
            loss: total / n,
        });
        state.epoch += 1;
        if let Some(dir) = checkpoint_dir {
            state.save(dir)?;
        }
    }
    Ok(state)
}

/// Same loop with the low-resolution term weighted 0 from the first epoch.
pub fn direct_highres_baseline(
    model: DiffusionModel,
    data: &TrainData,
    schedule: &CurriculumSchedule,
    config: &TrainConfig,
    seed_value: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainState> {
    let state = TrainState::new(model, &schedule.high_res_only(), config, data.len(), seed_value)?;
    train_curriculum(state, data, checkpoint_dir)
}

/// Plain gradient steps on high-resolution latents (used by fine-tuning
/// phases). Returns the loss of each step.
pub fn finetune_steps(
    model: &DiffusionModel,
    optimizer: &mut Optimizer,
    latents: &Tensor,
    captions: &[Vec<u32>],
    steps: usize,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let n = captions.len();
    let mut losses = Vec::with_capacity(steps);
    let mut order: Vec<usize> = Vec::new();
    for _ in 0..steps {
        if order.len() < batch_size.min(n) {
            let mut fresh: Vec<usize> = (0..n).collect();
            fresh.shuffle(rng);
            order.extend(fresh);
        }
        let rows: Vec<usize> = order.drain(..batch_size.min(n)).collect();
        let idx = Tensor::from_vec(rows.iter().map(|&i| i as u32).collect::<Vec<_>>(), rows.len(), &Device::Cpu)?;
        let z = latents.index_select(&idx, 0)?;
        let caps: Vec<Vec<u32>> = rows.iter().map(|&i| captions[i].clone()).collect();
        let loss = model.denoise_loss(&z, &caps, rng, model.config.cond_dropout)?;
        losses.push(scalar(&loss)?);
        optimizer.backward_step(&loss)?;
    }
    Ok(losses)
}

pub const HISTORY_HEADER: &str = "epoch,alpha,L1,L2,L";

/// History as CSV; terms that were not evaluated are left empty.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&format!("{},{:.6},{},{},{:.6}\n", r.epoch, r.alpha, cell(r.low), cell(r.high), r.loss));
    }
    out
}

/// Fixed-draw evaluation of the denoising loss on high-resolution latents,
/// averaged over `draws` passes.
pub fn eval_denoise_loss(model: &DiffusionModel, data: &TrainData, draws: usize, seed_value: u64) -> Result<f64> {
    let mut rng = seed::rng_for(seed_value, "curriculum.eval");
    let mut total = 0.0;
    let caps: Vec<Vec<u32>> = data.captions.iter().map(|c| c[0].clone()).collect();
    for _ in 0..draws {
        total += scalar(&model.denoise_loss(&data.high, &caps, &mut rng, 0.0)?)?;
    }
    Ok(total / draws.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_corpus;
    use crate::diffusion::DiffusionConfig;
    use crate::text::{TextEncoderConfig, Vocab};
    use candle_core::Var;

    const FAMILIES: [ScheduleFamily; 3] = [ScheduleFamily::Step, ScheduleFamily::Linear, ScheduleFamily::Cosine];

    #[test]
    fn alpha_properties_for_every_family() {
        for family in FAMILIES {
            let s = CurriculumSchedule::new(family, 20, 10, 16, 32).unwrap();
            assert_eq!(s.alpha(0).unwrap(), 1.0);
            for e in 1..20 {
                assert!(s.alpha(e).unwrap() <= s.alpha(e - 1).unwrap());
            }
            for e in 10..20 {
                assert_eq!(s.alpha(e).unwrap(), 0.0, "{family:?} at {e}");
            }
            assert!(matches!(s.alpha(20), Err(Error::InvalidEpoch { .. })));
        }
        let lin = CurriculumSchedule::new(ScheduleFamily::Linear, 20, 10, 16, 32).unwrap();
        assert_eq!(lin.alpha(5).unwrap(), 0.5);
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(CurriculumSchedule::new(ScheduleFamily::Step, 10, 5, 16, 64).is_err());
        assert!(CurriculumSchedule::new(ScheduleFamily::Step, 10, 5, 12, 24).is_err());
        assert!(CurriculumSchedule::new(ScheduleFamily::Linear, 10, 0, 16, 32).is_err());
        assert!(CurriculumSchedule::new(ScheduleFamily::Step, 0, 0, 16, 32).is_err());
    }

    #[test]
    fn blend_identities() {
        let t = |v: f64| Tensor::new(v, &Device::Cpu).unwrap();
        let v = |x: Tensor| x.to_scalar::<f64>().unwrap();
        assert_eq!(v(blend(1.0, Some(&t(0.7)), None).unwrap()), 0.7);
        assert_eq!(v(blend(0.5, Some(&t(2.0)), Some(&t(4.0))).unwrap()), 3.0);
        assert_eq!(v(blend(0.0, None, Some(&t(1.3))).unwrap()), 1.3);
        for a in [0.1, 0.25, 0.9] {
            let got = v(blend(a, Some(&t(0.37)), Some(&t(1.91))).unwrap());
            assert!((got - (a * 0.37 + (1.0 - a) * 1.91)).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_update_is_minus_lr_times_gradient() {
        // L = a*(x-1)^2 + (1-a)*(y+2)^2 * x, blended through the same path as training.
        let theta = Var::from_tensor(&Tensor::new(&[0.3f64, -0.4], &Device::Cpu).unwrap()).unwrap();
        let lr = 0.05;
        let alpha = 0.3;
        let mut opt = Optimizer::new(OptimConfig::sgd(lr), vec![("theta".into(), theta.clone())]);
        let x = theta.as_tensor().get(0).unwrap();
        let y = theta.as_tensor().get(1).unwrap();
        let low = (&x - 1.0).unwrap().sqr().unwrap();
        let high = ((&y + 2.0).unwrap().sqr().unwrap() * &x).unwrap();
        let loss = blend(alpha, Some(&low), Some(&high)).unwrap();
        opt.backward_step(&loss).unwrap();
        let (x0, y0) = (0.3f64, -0.4f64);
        let gx = alpha * 2.0 * (x0 - 1.0) + (1.0 - alpha) * (y0 + 2.0).powi(2);
        let gy = (1.0 - alpha) * 2.0 * (y0 + 2.0) * x0;
        let after = theta.as_tensor().to_vec1::<f64>().unwrap();
        assert!((after[0] - (x0 - lr * gx)).abs() < 1e-6);
        assert!((after[1] - (y0 - lr * gy)).abs() < 1e-6);
    }

    fn tiny_setup(n: usize, seed_value: u64) -> (DiffusionModel, TrainData, CodecModel) {
        let codec = CodecModel::identity();
        let cfg = DiffusionConfig {
            timesteps: 50,
            widths: [4, 8, 8],
            text: TextEncoderConfig {
                dim: 8,
                layers: 1,
                max_len: 80,
            },
            ..DiffusionConfig::default()
        };
        let model = DiffusionModel::new(&cfg, Vocab::standard(), &codec, seed_value).unwrap();
        let corpus = build_corpus(n.max(10), seed_value).unwrap();
        let data = TrainData::prepare(&corpus.train[..n], &codec, &model, 16, 32).unwrap();
        (model, data, codec)
    }

    fn small_train() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn compound_loss_reports_skipped_terms() {
        let (model, data, _) = tiny_setup(8, 1);
        let s = CurriculumSchedule::new(ScheduleFamily::Linear, 4, 2, 16, 32).unwrap();
        let batch = Batch {
            rows: vec![0, 1],
            captions: vec![data.captions[0][0].clone(), data.captions[1][1].clone()],
        };
        let mut rng = seed::rng(0);
        let first = compound_loss(&model, &data, &batch, 0, &s, &mut rng, 0.0).unwrap();
        assert!(first.low.is_some() && first.high.is_none());
        let mid = compound_loss(&model, &data, &batch, 1, &s, &mut rng, 0.0).unwrap();
        let (l, h) = (mid.low.unwrap(), mid.high.unwrap());
        assert!((scalar(&mid.total).unwrap() - (0.5 * l + 0.5 * h)).abs() < 1e-6);
        let last = compound_loss(&model, &data, &batch, 3, &s, &mut rng, 0.0).unwrap();
        assert!(last.low.is_none() && last.high.is_some());
    }

    #[test]
    fn step_schedule_history_switches_at_half() {
        let (model, data, _) = tiny_setup(8, 2);
        let s = CurriculumSchedule::step_at_half(4, 16, 32).unwrap();
        let state = TrainState::new(model, &s, &small_train(), data.len(), 0).unwrap();
        let state = train_curriculum(state, &data, None).unwrap();
        assert_eq!(state.history.len(), 4);
        let first_high = state.history.iter().position(|r| r.high.is_some()).unwrap();
        assert_eq!(first_high, 2);
        for r in &state.history {
            let expect = r.alpha * r.low.unwrap_or(0.0) + (1.0 - r.alpha) * r.high.unwrap_or(0.0);
            assert!((r.loss - expect).abs() < 1e-6);
        }
        let csv = history_csv(&state.history);
        assert!(csv.starts_with("epoch,alpha,L1,L2,L\n0,1.000000,"));
        assert!(csv.lines().nth(1).unwrap().split(',').nth(3).unwrap().is_empty());
    }

    #[test]
    fn resume_is_bit_identical() {
        let s = CurriculumSchedule::step_at_half(4, 16, 32).unwrap();
        let dir = tempfile::tempdir().unwrap();

        let (model, data, _) = tiny_setup(8, 3);
        let full = train_curriculum(TrainState::new(model, &s, &small_train(), data.len(), 7).unwrap(), &data, None).unwrap();

        let (model, data, _) = tiny_setup(8, 3);
        let half = TrainState::new(model, &s, &small_train(), data.len(), 7).unwrap();
        let mut half_s = s.clone();
        half_s.total_epochs = 2;
        let mut half = half;
        half.schedule = half_s;
        let half = train_curriculum(half, &data, None).unwrap();
        let mut half = half;
        half.schedule = s.clone();
        half.save(dir.path()).unwrap();

        let resumed = TrainState::load(dir.path(), &s).unwrap();
        assert_eq!(resumed.epoch, 2);
        let resumed = train_curriculum(resumed, &data, None).unwrap();
        assert_eq!(
            resumed.model.params.content_hash().unwrap(),
            full.model.params.content_hash().unwrap()
        );
        assert_eq!(resumed.history, full.history);

        let other = CurriculumSchedule::new(ScheduleFamily::Linear, 4, 2, 16, 32).unwrap();
        assert!(matches!(TrainState::load(dir.path(), &other), Err(Error::ResumeMismatch(_))));
    }

    #[test]
    fn two_runs_same_hash_and_baseline_is_all_high() {
        let s = CurriculumSchedule::step_at_half(2, 16, 32).unwrap();
        let run = || {
            let (model, data, _) = tiny_setup(8, 4);
            let st = train_curriculum(TrainState::new(model, &s, &small_train(), data.len(), 1).unwrap(), &data, None).unwrap();
            st.model.params.content_hash().unwrap()
        };
        assert_eq!(run(), run());
        let (model, data, _) = tiny_setup(8, 4);
        let base = direct_highres_baseline(model, &data, &s, &small_train(), 1, None).unwrap();
        assert!(base.history.iter().all(|r| r.alpha == 0.0 && r.low.is_none()));
        assert_eq!(base.optimizer.step_count(), 2 * 2);
    }
}
