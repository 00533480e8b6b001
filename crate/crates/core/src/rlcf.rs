//! Best-of-K fine-tuning from contrastive-encoder feedback.
//!
//! Each stage samples K images per prompt, scores them with the frozen dual
//! encoder, keeps the winners, and fine-tunes the generator on them. Stages
//! repeat until the mean winning reward settles or the stage budget runs out.

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::codec::CodecModel;
use crate::corpus::{fit_resolution, CorpusItem, Dialect, ImageSample};
use crate::curriculum::finetune_steps;
use crate::diffusion::{DiffusionModel, UNET_PREFIX};
use crate::dual_encoder::DualEncoderModel;
use crate::optim::{OptimConfig, Optimizer};
use crate::seed;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Only the highest-reward candidate per prompt.
    BestOfK,
    /// The `topk` best candidates plus the prompt's ground-truth pair.
    TopkPlusOriginal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlcfConfig {
    pub k: usize,
    pub batch_size: usize,
    pub max_stages: usize,
    pub selection_mode: SelectionMode,
    pub topk: usize,
    pub finetune_steps: usize,
    pub finetune_batch: usize,
    pub lr: f64,
    pub window: usize,
    pub relative_tolerance: f64,
    pub freeze_text_encoder: bool,
    /// Sampler steps and output resolution for candidates.
    pub sample_steps: usize,
    pub resolution: usize,
}

impl Default for RlcfConfig {
    fn default() -> Self {
        Self {
            k: 4,
            batch_size: 8,
            max_stages: 5,
            selection_mode: SelectionMode::BestOfK,
            topk: 2,
            finetune_steps: 20,
            finetune_batch: 8,
            lr: 5e-4,
            window: 3,
            relative_tolerance: 0.01,
            freeze_text_encoder: true,
            sample_steps: 25,
            resolution: 64,
        }
    }
}

impl RlcfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidK);
        }
        if self.selection_mode == SelectionMode::TopkPlusOriginal && self.topk >= self.k {
            return Err(Error::InvalidTopK {
                topk: self.topk,
                k: self.k,
            });
        }
        if self.window < 2 {
            return Err(Error::InvalidConfig(format!("convergence window must be at least 2, got {}", self.window)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("prompt batch must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Candidate {
    pub seed: u64,
    pub image: ImageSample,
}

/// Sampling seed of candidate `j` for the prompt with base seed `prompt_seed`.
pub fn candidate_seed(prompt_seed: u64, j: usize) -> u64 {
    seed::derive_indexed(prompt_seed, "rlcf.candidate", j as u64)
}

/// K candidates per prompt, one seed list entry per prompt.
pub fn collect(
    generator: &DiffusionModel,
    codec: &CodecModel,
    prompts: &[Vec<String>],
    k: usize,
    prompt_seeds: &[u64],
    resolution: usize,
    steps: usize,
) -> Result<Vec<Vec<Candidate>>> {
    if k < 1 {
        return Err(Error::InvalidK);
    }
    if prompts.len() != prompt_seeds.len() {
        return Err(Error::ShapeError(format!("{} prompts for {} seeds", prompts.len(), prompt_seeds.len())));
    }
    prompts
        .iter()
        .zip(prompt_seeds)
        .map(|(prompt, &ps)| {
            let ids = generator.tokenize(prompt)?;
            let seeds: Vec<u64> = (0..k).map(|j| candidate_seed(ps, j)).collect();
            let images = generator.sample_images(codec, &vec![ids; k], &seeds, resolution, steps, 1.0)?;
            Ok(seeds
                .into_iter()
                .zip(images)
                .map(|(seed, image)| Candidate { seed, image })
                .collect())
        })
        .collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(rewards: &[f64]) -> Result<usize> {
    if rewards.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let mut best = 0;
    for (i, r) in rewards.iter().enumerate().skip(1) {
        if *r > rewards[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Score each candidate against the prompt; returns the winner and all rewards.
pub fn rank(reward_model: &DualEncoderModel, prompt: &[String], candidates: &[ImageSample]) -> Result<(usize, Vec<f64>)> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let res = reward_model.config.image_res;
    let fitted = candidates.iter().map(|c| fit_resolution(c, res)).collect::<Result<Vec<_>>>()?;
    let rewards = reward_model.score_many(prompt, &fitted.iter().collect::<Vec<_>>())?;
    Ok((argmax(&rewards)?, rewards))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    Generated { candidate: usize },
    Original,
}

#[derive(Clone, Debug)]
pub struct SelectedPair {
    pub caption: Vec<String>,
    pub image: ImageSample,
    pub reward: Option<f64>,
    pub source: PairSource,
}

/// Pairs to fine-tune on for one prompt. Generated pairs come first, sorted by
/// descending reward (ties by candidate index); the original pair is last.
pub fn select_pairs(
    prompt: &[String],
    original: &ImageSample,
    candidates: &[ImageSample],
    rewards: &[f64],
    mode: SelectionMode,
    topk: usize,
) -> Result<Vec<SelectedPair>> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if candidates.len() != rewards.len() {
        return Err(Error::ShapeError(format!("{} candidates for {} rewards", candidates.len(), rewards.len())));
    }
    let generated = |j: usize| SelectedPair {
        caption: prompt.to_vec(),
        image: candidates[j].clone(),
        reward: Some(rewards[j]),
        source: PairSource::Generated { candidate: j },
    };
    match mode {
        SelectionMode::BestOfK => Ok(vec![generated(argmax(rewards)?)]),
        SelectionMode::TopkPlusOriginal => {
            if topk >= candidates.len() {
                return Err(Error::InvalidTopK {
                    topk,
                    k: candidates.len(),
                });
            }
            let mut order: Vec<usize> = (0..candidates.len()).collect();
            order.sort_by(|&a, &b| rewards[b].total_cmp(&rewards[a]).then(a.cmp(&b)));
            let mut pairs: Vec<SelectedPair> = order[..topk].iter().map(|&j| generated(j)).collect();
            pairs.push(SelectedPair {
                caption: prompt.to_vec(),
                image: original.clone(),
                reward: None,
                source: PairSource::Original,
            });
            Ok(pairs)
        }
    }
}

/// Fine-tune the generator on the selected pairs at their resolution for
/// `steps` updates. Returns the per-step losses.
pub fn finetune_stage(
    generator: &mut DiffusionModel,
    codec: &CodecModel,
    pairs: &[SelectedPair],
    steps: usize,
    config: &RlcfConfig,
    seed_value: u64,
) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::EmptySubset);
    }
    if steps == 0 {
        return Ok(Vec::new());
    }
    let images: Vec<&ImageSample> = pairs.iter().map(|p| &p.image).collect();
    let latents = codec.encode_batch(&images, generator.dtype())?;
    let captions = pairs.iter().map(|p| generator.tokenize(&p.caption)).collect::<Result<Vec<_>>>()?;
    let vars = if config.freeze_text_encoder {
        generator.params.with_prefix(UNET_PREFIX)
    } else {
        generator.params.all()
    };
    let mut opt = Optimizer::new(OptimConfig::adam(config.lr), vars);
    let mut rng = seed::rng_for(seed_value, "rlcf.finetune");
    let losses = finetune_steps(generator, &mut opt, &latents, &captions, steps, config.finetune_batch, &mut rng)?;
    if generator.config.cond_dropout > 0.0 {
        generator.trained_with_dropout = true;
    }
    Ok(losses)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: usize,
    pub prompts: Vec<String>,
    pub candidate_seeds: Vec<Vec<u64>>,
    pub rewards: Vec<Vec<f64>>,
    pub winners: Vec<usize>,
    /// (prompt index, source, reward) of every pair fine-tuned on.
    pub selected: Vec<(usize, PairSource, Option<f64>)>,
    pub mean_best_reward: f64,
    pub mean_all_reward: f64,
    pub finetune_losses: Vec<f64>,
}

impl StageRecord {
    /// Bookkeeping identities: each winner holds its row's maximum and the
    /// means are recomputable from the reward rows.
    pub fn check(&self) -> bool {
        let rows_ok = self
            .rewards
            .iter()
            .zip(&self.winners)
            .all(|(row, &w)| row.iter().all(|r| *r <= row[w]));
        let best: Vec<f64> = self.rewards.iter().zip(&self.winners).map(|(row, &w)| row[w]).collect();
        let mean_best = best.iter().sum::<f64>() / best.len() as f64;
        let all: Vec<f64> = self.rewards.iter().flatten().copied().collect();
        let mean_all = all.iter().sum::<f64>() / all.len() as f64;
        rows_ok && mean_best == self.mean_best_reward && mean_all == self.mean_all_reward
    }
}

/// Converged when the last `window` stage rewards lie within
/// `tolerance` of their mean, relative to its magnitude.
pub fn converged(history: &[f64], window: usize, tolerance: f64) -> bool {
    if history.len() < window {
        return false;
    }
    let tail = &history[history.len() - window..];
    let mean = tail.iter().sum::<f64>() / window as f64;
    let spread = tail.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b)) - tail.iter().fold(f64::INFINITY, |a, b| a.min(*b));
    spread <= tolerance * mean.abs().max(1e-12)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Full best-of-K loop over prompts drawn from `pool`.
pub fn run_rlcf(
    mut generator: DiffusionModel,
    codec: &CodecModel,
    reward_model: &DualEncoderModel,
    pool: &[CorpusItem],
    config: &RlcfConfig,
    seed_value: u64,
) -> Result<(DiffusionModel, Vec<StageRecord>)> {
    config.validate()?;
    if pool.len() < config.batch_size {
        return Err(Error::InvalidConfig(format!(
            "prompt pool of {} is smaller than the batch of {}",
            pool.len(),
            config.batch_size
        )));
    }
    let mut records: Vec<StageRecord> = Vec::new();
    for stage in 0..config.max_stages {
        let mut rng = seed::rng(seed::derive_indexed(seed_value, "rlcf.stage", stage as u64));
        let picks = sample(&mut rng, pool.len(), config.batch_size).into_vec();
        let mut prompts = Vec::with_capacity(picks.len());
        let mut originals = Vec::with_capacity(picks.len());
        for &i in &picks {
            let dialect = if rng.random_bool(0.5) { Dialect::A } else { Dialect::B };
            prompts.push(pool[i].caption(dialect).caption.clone());
            originals.push(pool[i].image_at(config.resolution)?);
        }
        let prompt_seeds: Vec<u64> = (0..prompts.len())
            .map(|p| seed::derive_indexed(seed::derive_indexed(seed_value, "rlcf.prompt", stage as u64), "p", p as u64))
            .collect();
        let candidates = collect(&generator, codec, &prompts, config.k, &prompt_seeds, config.resolution, config.sample_steps)?;

        let mut rewards = Vec::new();
        let mut winners = Vec::new();
        let mut pairs = Vec::new();
        let mut selected = Vec::new();
        for (p, cands) in candidates.iter().enumerate() {
            let images: Vec<ImageSample> = cands.iter().map(|c| c.image.clone()).collect();
            let (w, r) = rank(reward_model, &prompts[p], &images)?;
            for pair in select_pairs(&prompts[p], &originals[p], &images, &r, config.selection_mode, config.topk)? {
                selected.push((p, pair.source, pair.reward));
                pairs.push(pair);
            }
            winners.push(w);
            rewards.push(r);
        }
        let best: Vec<f64> = rewards.iter().zip(&winners).map(|(row, &w): (&Vec<f64>, &usize)| row[w]).collect();
        let all: Vec<f64> = rewards.iter().flatten().copied().collect();
        let finetune_losses = finetune_stage(
            &mut generator,
            codec,
            &pairs,
            config.finetune_steps,
            config,
            seed::derive_indexed(seed_value, "rlcf.finetune", stage as u64),
        )?;
        records.push(StageRecord {
            stage,
            prompts: prompts.iter().map(|p| p.join(" ")).collect(),
            candidate_seeds: candidates.iter().map(|c| c.iter().map(|x| x.seed).collect()).collect(),
            rewards,
            winners,
            selected,
            mean_best_reward: mean(&best),
            mean_all_reward: mean(&all),
            finetune_losses,
        });
        let history: Vec<f64> = records.iter().map(|r| r.mean_best_reward).collect();
        if converged(&history, config.window, config.relative_tolerance) {
            break;
        }
    }
    Ok((generator, records))
}

pub const STAGE_CSV_HEADER: &str = "stage,mean_best_reward,mean_all_reward";

pub fn stages_csv(records: &[StageRecord]) -> String {
    let mut out = format!("{STAGE_CSV_HEADER}\n");
    for r in records {
        out.push_str(&format!("{},{:.6},{:.6}\n", r.stage, r.mean_best_reward, r.mean_all_reward));
    }
    out
}

pub fn stages_jsonl(records: &[StageRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_corpus;
    use crate::diffusion::DiffusionConfig;
    use crate::dual_encoder::DualEncoderConfig;
    use crate::text::{TextEncoderConfig, Vocab};
    use proptest::prelude::*;

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax(&[0.2, 0.9, 0.5]).unwrap(), 1);
        assert_eq!(argmax(&[0.3, 0.3, 0.3]).unwrap(), 0);
        assert!(matches!(argmax(&[]), Err(Error::EmptyCandidates)));
    }

    proptest! {
        #[test]
        fn argmax_matches_scan(rewards in prop::collection::vec(-1.0f64..1.0, 1..=16)) {
            let w = argmax(&rewards).unwrap();
            let max = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let first = rewards.iter().position(|r| *r == max).unwrap();
            prop_assert_eq!(w, first);
        }
    }

    fn imgs(n: usize) -> Vec<ImageSample> {
        (0..n).map(|i| ImageSample::constant(i as f32 / n as f32, 16, i as u64)).collect()
    }

    #[test]
    fn selection_modes() {
        let prompt = vec!["a".to_string()];
        let original = ImageSample::constant(0.9, 16, 99);
        let c = imgs(8);
        let r = vec![0.1, 0.5, 0.3, 0.9, 0.5, 0.0, 0.2, 0.4];
        let best = select_pairs(&prompt, &original, &c, &r, SelectionMode::BestOfK, 0).unwrap();
        assert_eq!(best.len(), 1);
        assert_eq!(best[0].source, PairSource::Generated { candidate: 3 });
        let top = select_pairs(&prompt, &original, &c, &r, SelectionMode::TopkPlusOriginal, 3).unwrap();
        assert_eq!(top.len(), 4);
        let sources: Vec<PairSource> = top.iter().map(|p| p.source).collect();
        assert_eq!(
            sources,
            vec![
                PairSource::Generated { candidate: 3 },
                PairSource::Generated { candidate: 1 },
                PairSource::Generated { candidate: 4 },
                PairSource::Original
            ]
        );
        assert!(matches!(
            select_pairs(&prompt, &original, &c, &r, SelectionMode::TopkPlusOriginal, 8),
            Err(Error::InvalidTopK { .. })
        ));
    }

    #[test]
    fn convergence_rule() {
        assert!(!converged(&[0.5, 0.5], 3, f64::INFINITY));
        assert!(converged(&[0.1, 0.5, 0.9], 3, f64::INFINITY));
        assert!(converged(&[0.1, 0.500, 0.502, 0.501], 3, 0.01));
        assert!(!converged(&[0.1, 0.4, 0.5, 0.6], 3, 0.01));
    }

    fn tiny_models() -> (DiffusionModel, CodecModel, DualEncoderModel) {
        let codec = CodecModel::identity();
        let cfg = DiffusionConfig {
            timesteps: 20,
            widths: [4, 8, 8],
            text: TextEncoderConfig {
                dim: 8,
                layers: 1,
                max_len: 80,
            },
            ..DiffusionConfig::default()
        };
        let gen = DiffusionModel::new(&cfg, Vocab::standard(), &codec, 0).unwrap();
        let enc_cfg = DualEncoderConfig {
            embed_dim: 8,
            image_res: 16,
            image_widths: [4, 4, 4],
            text: TextEncoderConfig {
                dim: 8,
                layers: 1,
                max_len: 80,
            },
            ..DualEncoderConfig::default()
        };
        let enc = DualEncoderModel::new(&enc_cfg, Vocab::standard(), 0).unwrap();
        (gen, codec, enc)
    }

    #[test]
    fn collect_shapes_and_seeding() {
        let (gen, codec, _) = tiny_models();
        let prompts = vec![vec!["a".to_string(), "bedroom".to_string()]; 4];
        assert!(matches!(collect(&gen, &codec, &prompts, 0, &[1, 2, 3, 4], 16, 3), Err(Error::InvalidK)));
        let out = collect(&gen, &codec, &prompts, 8, &[1, 2, 3, 4], 16, 3).unwrap();
        assert_eq!(out.iter().map(|c| c.len()).sum::<usize>(), 32);
        let again = collect(&gen, &codec, &prompts[1..2], 8, &[2], 16, 3).unwrap();
        assert_eq!(again[0][5].image.pixels, out[1][5].image.pixels);
        assert_eq!(out[1][5].seed, candidate_seed(2, 5));
        let single = collect(&gen, &codec, &prompts[..1], 1, &[1], 16, 3).unwrap();
        assert_eq!(single[0].len(), 1);
    }

    #[test]
    fn finetune_edge_cases() {
        let (mut gen, codec, _) = tiny_models();
        assert!(matches!(finetune_stage(&mut gen, &codec, &[], 3, &RlcfConfig::default(), 0), Err(Error::EmptySubset)));
        let pair = SelectedPair {
            caption: vec!["a".into()],
            image: ImageSample::constant(0.3, 16, 0),
            reward: Some(0.1),
            source: PairSource::Generated { candidate: 0 },
        };
        let before = gen.params.content_hash().unwrap();
        finetune_stage(&mut gen, &codec, std::slice::from_ref(&pair), 0, &RlcfConfig::default(), 0).unwrap();
        assert_eq!(gen.params.content_hash().unwrap(), before);
        let text_before: Vec<_> = gen.params.with_prefix("text").iter().map(|(_, v)| v.as_tensor().to_vec1::<f32>().ok()).collect();
        finetune_stage(&mut gen, &codec, &[pair], 2, &RlcfConfig::default(), 0).unwrap();
        assert_ne!(gen.params.content_hash().unwrap(), before);
        let text_after: Vec<_> = gen.params.with_prefix("text").iter().map(|(_, v)| v.as_tensor().to_vec1::<f32>().ok()).collect();
        assert_eq!(text_before, text_after);
    }

    #[test]
    fn run_records_and_reward_model_untouched() {
        let (gen, codec, enc) = tiny_models();
        let corpus = build_corpus(20, 5).unwrap();
        let enc_hash = enc.params.content_hash().unwrap();
        let cfg = RlcfConfig {
            k: 3,
            batch_size: 2,
            max_stages: 4,
            finetune_steps: 1,
            finetune_batch: 2,
            sample_steps: 2,
            resolution: 16,
            relative_tolerance: f64::INFINITY,
            ..RlcfConfig::default()
        };
        let (_, records) = run_rlcf(gen.clone(), &codec, &enc, &corpus.train, &cfg, 1).unwrap();
        assert_eq!(records.len(), 3);
        assert!(records.iter().all(StageRecord::check));
        assert_eq!(enc.params.content_hash().unwrap(), enc_hash);
        let one = RlcfConfig { max_stages: 1, ..cfg };
        let (_, records) = run_rlcf(gen, &codec, &enc, &corpus.train, &one, 1).unwrap();
        assert_eq!(records.len(), 1);
        let csv = stages_csv(&records);
        assert!(csv.starts_with("stage,mean_best_reward,mean_all_reward\n0,"));
        assert_eq!(stages_jsonl(&records).unwrap().lines().count(), 1);
    }
}
