//! Machine evaluation: caption alignment, Inception Score and FID.
//!
//! A small scene classifier trained on room type stands in for the Inception
//! network. Its softmax feeds the Inception Score and its penultimate layer
//! feeds FID.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::codec::CodecModel;
use crate::corpus::{batch_tensor, fit_resolution, CorpusItem, Dialect, ImageSample, RoomType};
use crate::diffusion::DiffusionModel;
use crate::dual_encoder::DualEncoderModel;
use crate::nn::{cross_entropy, Conv2d, Linear, ParamBuilder, ParamStore};
use crate::optim::{OptimConfig, Optimizer};
use crate::seed;
use crate::{Error, Result};

/// Diagonal loading added to every FID covariance.
pub const COVARIANCE_SHRINKAGE: f64 = 1e-6;

pub fn num_classes() -> usize {
    RoomType::ALL.len()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub resolution: usize,
    pub widths: [usize; 3],
    pub feature_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub target_accuracy: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            widths: [16, 32, 64],
            feature_dim: 64,
            epochs: 25,
            batch_size: 32,
            lr: 2e-3,
            target_accuracy: 0.95,
        }
    }
}

#[derive(Clone)]
pub struct SceneClassifier {
    pub config: ClassifierConfig,
    pub params: ParamStore,
    convs: [Conv2d; 3],
    feature: Linear,
    head: Linear,
}

impl std::fmt::Debug for SceneClassifier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SceneClassifier").field("config", &self.config).finish()
    }
}

impl SceneClassifier {
    pub fn new(config: &ClassifierConfig, seed_value: u64) -> Result<Self> {
        let res = config.resolution;
        if res < 8 || res % 8 != 0 {
            return Err(Error::InvalidResolution(res));
        }
        let mut params = ParamStore::new(DType::F32);
        let mut rng = seed::rng_for(seed_value, "classifier.init");
        let mut pb = ParamBuilder::new(&mut params, &mut rng);
        let [w1, w2, w3] = config.widths;
        let convs = [
            Conv2d::new(&mut pb.sub("conv1"), 3, w1, 3, 2)?,
            Conv2d::new(&mut pb.sub("conv2"), w1, w2, 3, 2)?,
            Conv2d::new(&mut pb.sub("conv3"), w2, w3, 3, 2)?,
        ];
        let cells = (res / 8) * (res / 8);
        let feature = Linear::new(&mut pb.sub("feature"), w3 * cells, config.feature_dim)?;
        let head = Linear::new(&mut pb.sub("head"), config.feature_dim, num_classes())?;
        Ok(Self {
            config: config.clone(),
            params,
            convs,
            feature,
            head,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn features_tensor(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = ((x * 2.0)? - 1.0)?;
        for conv in &self.convs {
            h = conv.forward(&h)?.silu()?;
        }
        Ok(self.feature.forward(&h.flatten_from(1)?)?.silu()?)
    }

    fn logits_tensor(&self, x: &Tensor) -> Result<Tensor> {
        self.head.forward(&self.features_tensor(x)?)
    }

    fn input(&self, images: &[&ImageSample]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::EmptySet);
        }
        let fitted = images
            .iter()
            .map(|img| fit_resolution(img, self.config.resolution))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::FeatureError(e.to_string()))?;
        batch_tensor(&fitted.iter().collect::<Vec<_>>(), DType::F32)
    }

    /// Penultimate-layer activations, one row per image.
    pub fn features(&self, images: &[&ImageSample]) -> Result<Vec<Vec<f64>>> {
        let rows = self.features_tensor(&self.input(images)?)?.to_vec2::<f32>()?;
        let rows: Vec<Vec<f64>> = rows.into_iter().map(|r| r.into_iter().map(f64::from).collect()).collect();
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::FeatureError("non-finite classifier features".into()));
        }
        Ok(rows)
    }

    /// Class probabilities p(y|x); the softmax runs in f64 so rows sum to 1.
    pub fn probabilities(&self, images: &[&ImageSample]) -> Result<Vec<Vec<f64>>> {
        let logits = self.logits_tensor(&self.input(images)?)?.to_vec2::<f32>()?;
        Ok(logits.iter().map(|row| softmax(row)).collect())
    }

    pub fn predict(&self, images: &[&ImageSample]) -> Result<Vec<RoomType>> {
        Ok(self
            .probabilities(images)?
            .iter()
            .map(|p| RoomType::ALL[argmax(p)])
            .collect())
    }

    pub fn accuracy(&self, items: &[CorpusItem]) -> Result<f64> {
        if items.is_empty() {
            return Err(Error::EmptySet);
        }
        let mut correct = 0usize;
        for chunk in items.chunks(64) {
            let imgs: Vec<&ImageSample> = chunk.iter().map(|it| &it.image).collect();
            let pred = self.predict(&imgs)?;
            correct += pred.iter().zip(chunk).filter(|(p, it)| **p == it.scene.room_type).count();
        }
        Ok(correct as f64 / items.len() as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<String> {
        let meta = serde_json::json!({ "model": "scene_classifier", "config": self.config });
        checkpoint::save(dir, &self.params.named_tensors(), meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ck = checkpoint::load(dir)?;
        let config: ClassifierConfig = serde_json::from_value(ck.metadata["config"].clone())?;
        let model = Self::new(&config, 0)?;
        model.params.load(&ck.tensors)?;
        Ok(model)
    }
}

fn softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f32::NEG_INFINITY, |a, b| a.max(*b)) as f64;
    let e: Vec<f64> = row.iter().map(|v| (*v as f64 - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// Train on room type. Fails with the seed when the train accuracy stays
/// below the configured target.
pub fn train_classifier(items: &[CorpusItem], config: &ClassifierConfig, seed_value: u64) -> Result<(SceneClassifier, f64)> {
    if items.is_empty() {
        return Err(Error::EmptySet);
    }
    let model = SceneClassifier::new(config, seed_value)?;
    let images = items
        .iter()
        .map(|it| it.image_at(config.resolution))
        .collect::<Result<Vec<_>>>()?;
    let pixels = batch_tensor(&images.iter().collect::<Vec<_>>(), DType::F32)?;
    let labels: Vec<u32> = items.iter().map(|it| it.scene.room_type.index() as u32).collect();
    let batch = config.batch_size.max(1);
    let mut opt = Optimizer::new(
        OptimConfig {
            warmup_steps: 10,
            decay_steps: config.epochs * items.len().div_ceil(batch),
            ..OptimConfig::adam(config.lr)
        },
        model.params.all(),
    );
    let mut rng = seed::rng_for(seed_value, "classifier.train");
    let mut order: Vec<usize> = (0..items.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let idx = Tensor::from_vec(chunk.iter().map(|&i| i as u32).collect::<Vec<_>>(), chunk.len(), &Device::Cpu)?;
            let targets: Vec<u32> = chunk.iter().map(|&i| labels[i]).collect();
            let loss = cross_entropy(&model.logits_tensor(&pixels.index_select(&idx, 0)?)?, &targets)?;
            opt.backward_step(&loss)?;
        }
    }
    let accuracy = model.accuracy(items)?;
    if accuracy < config.target_accuracy {
        return Err(Error::AccuracyNotReached {
            accuracy,
            target: config.target_accuracy,
            seed: seed_value,
        });
    }
    Ok((model, accuracy))
}

/// Mean encoder cosine over (generated image, prompt) pairs.
pub fn clip_sim(encoder: &DualEncoderModel, pairs: &[(ImageSample, Vec<String>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptySet);
    }
    let res = encoder.config.image_res;
    let mut total = 0.0;
    for (img, prompt) in pairs {
        total += encoder.score(prompt, &fit_resolution(img, res)?)?;
    }
    Ok(total / pairs.len() as f64)
}

/// Inception Score from per-image class distributions, averaged over
/// contiguous splits. The spread is the population standard deviation and is
/// 0 for a single split.
pub fn inception_score_from_probs(probs: &[Vec<f64>], splits: usize) -> Result<(f64, f64)> {
    let splits = splits.max(1);
    if probs.len() < splits {
        return Err(Error::InsufficientSamples {
            needed: splits,
            got: probs.len(),
        });
    }
    let n = probs.len();
    let mut scores = Vec::with_capacity(splits);
    for s in 0..splits {
        let part = &probs[s * n / splits..(s + 1) * n / splits];
        let classes = part[0].len();
        let mut marginal = vec![0.0; classes];
        for p in part {
            for (m, v) in marginal.iter_mut().zip(p) {
                *m += v / part.len() as f64;
            }
        }
        let mean_kl: f64 = part
            .iter()
            .map(|p| {
                p.iter()
                    .zip(&marginal)
                    .filter(|(v, _)| **v > 0.0)
                    .map(|(v, m)| v * (v.ln() - m.ln()))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / part.len() as f64;
        scores.push(mean_kl.exp());
    }
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

pub fn inception_score(classifier: &SceneClassifier, images: &[&ImageSample], splits: usize) -> Result<(f64, f64)> {
    if images.len() < splits.max(1) {
        return Err(Error::InsufficientSamples {
            needed: splits.max(1),
            got: images.len(),
        });
    }
    inception_score_from_probs(&classifier.probabilities(images)?, splits)
}

/// Mean and (unbiased) covariance of feature rows.
pub fn fit_gaussian(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if features.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: features.len(),
        });
    }
    let d = features[0].len();
    if features.iter().any(|r| r.len() != d) {
        return Err(Error::FeatureError("ragged feature rows".into()));
    }
    let n = features.len();
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
    let mut centered = x;
    for j in 0..d {
        let m = mean[j];
        centered.column_mut(j).add_scalar_mut(-m);
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

fn symmetric_power(m: &DMatrix<f64>, power: f64) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).powf(power));
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Principal square root of `a * b` for symmetric positive definite `a`, `b`,
/// via `a^½ (a^½ b a^½)^½ a^-½`.
pub fn sqrtm_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let a_half = symmetric_power(a, 0.5);
    let a_inv_half = symmetric_power(a, -0.5);
    let inner = &a_half * b * &a_half;
    &a_half * symmetric_power(&inner, 0.5) * a_inv_half
}

/// Fréchet distance between two Gaussians.
pub fn frechet_distance(mu1: &DVector<f64>, sigma1: &DMatrix<f64>, mu2: &DVector<f64>, sigma2: &DMatrix<f64>) -> f64 {
    let diff = mu1 - mu2;
    // Tr((S1 S2)^½) equals Tr((S1^½ S2 S1^½)^½), which stays symmetric.
    let s1_half = symmetric_power(sigma1, 0.5);
    let cross = symmetric_power(&(&s1_half * sigma2 * &s1_half), 0.5).trace();
    (diff.dot(&diff) + sigma1.trace() + sigma2.trace() - 2.0 * cross).max(0.0)
}

/// FID between two feature sets, with covariance shrinkage. Identical sets
/// give exactly 0.
pub fn fid_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a == b {
        fit_gaussian(a)?;
        return Ok(0.0);
    }
    let (mu1, s1) = fit_gaussian(a)?;
    let (mu2, s2) = fit_gaussian(b)?;
    if mu1.len() != mu2.len() {
        return Err(Error::FeatureError(format!("feature dims {} and {}", mu1.len(), mu2.len())));
    }
    let eye = DMatrix::<f64>::identity(mu1.len(), mu1.len()) * COVARIANCE_SHRINKAGE;
    Ok(frechet_distance(&mu1, &(s1 + &eye), &mu2, &(s2 + eye)))
}

pub fn fid(classifier: &SceneClassifier, real: &[&ImageSample], generated: &[&ImageSample]) -> Result<f64> {
    fid_from_features(&classifier.features(real)?, &classifier.features(generated)?)
}

/// One generation request during evaluation.
#[derive(Clone, Debug)]
pub struct Prompt<'a> {
    pub item: &'a CorpusItem,
    pub caption: Vec<String>,
    pub seed: u64,
}

pub trait ImageGenerator {
    fn generate(&self, prompts: &[Prompt<'_>]) -> Result<Vec<ImageSample>>;
}

/// Returns each prompt's ground-truth test image.
#[derive(Clone, Debug)]
pub struct OracleGenerator {
    pub resolution: usize,
}

impl ImageGenerator for OracleGenerator {
    fn generate(&self, prompts: &[Prompt<'_>]) -> Result<Vec<ImageSample>> {
        prompts.iter().map(|p| p.item.image_at(self.resolution)).collect()
    }
}

pub struct DiffusionGenerator<'a> {
    pub model: &'a DiffusionModel,
    pub codec: &'a CodecModel,
    pub resolution: usize,
    pub steps: usize,
    pub guidance: f64,
    pub batch_size: usize,
}

impl ImageGenerator for DiffusionGenerator<'_> {
    fn generate(&self, prompts: &[Prompt<'_>]) -> Result<Vec<ImageSample>> {
        let mut out = Vec::with_capacity(prompts.len());
        for chunk in prompts.chunks(self.batch_size.max(1)) {
            let ids = chunk
                .iter()
                .map(|p| self.model.tokenize(&p.caption))
                .collect::<Result<Vec<_>>>()?;
            let seeds: Vec<u64> = chunk.iter().map(|p| p.seed).collect();
            out.extend(
                self.model
                    .sample_images(self.codec, &ids, &seeds, self.resolution, self.steps, self.guidance)?,
            );
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model_tag: String,
    pub clip_sim: f64,
    pub is_mean: f64,
    pub is_std: f64,
    pub fid: f64,
    pub n_images: usize,
}

pub const METRIC_CSV_HEADER: &str = "model,clip_sim,is_mean,is_std,fid,n";

impl MetricReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{}",
            self.model_tag, self.clip_sim, self.is_mean, self.is_std, self.fid, self.n_images
        )
    }
}

pub fn metrics_csv(reports: &[MetricReport]) -> String {
    let mut out = format!("{METRIC_CSV_HEADER}\n");
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub splits: usize,
    pub seed: u64,
}

/// Prompts cycle through the test items, dialect A on the first pass and B on
/// the second. FID compares against the ground-truth images of the same
/// prompts.
pub fn eval_prompts<'a>(test: &'a [CorpusItem], n_samples: usize, seed_value: u64) -> Result<Vec<Prompt<'a>>> {
    if test.is_empty() || n_samples == 0 {
        return Err(Error::EmptySet);
    }
    Ok((0..n_samples)
        .map(|i| {
            let item = &test[i % test.len()];
            let dialect = if (i / test.len()) % 2 == 0 { Dialect::A } else { Dialect::B };
            Prompt {
                item,
                caption: item.caption(dialect).caption.clone(),
                seed: seed::derive_indexed(seed_value, "eval.sample", i as u64),
            }
        })
        .collect())
}

pub fn evaluate_model(
    generator: &dyn ImageGenerator,
    model_tag: &str,
    encoder: &DualEncoderModel,
    classifier: &SceneClassifier,
    test: &[CorpusItem],
    config: &EvalConfig,
) -> Result<MetricReport> {
    let prompts = eval_prompts(test, config.n_samples, config.seed)?;
    let generated = generator.generate(&prompts)?;
    if generated.len() != prompts.len() {
        return Err(Error::ShapeError(format!("{} images for {} prompts", generated.len(), prompts.len())));
    }
    let real = prompts
        .iter()
        .map(|p| p.item.image_at(classifier.config.resolution))
        .collect::<Result<Vec<_>>>()?;
    let gen_refs: Vec<&ImageSample> = generated.iter().collect();
    let pairs: Vec<(ImageSample, Vec<String>)> = generated
        .iter()
        .zip(&prompts)
        .map(|(img, p)| (img.clone(), p.caption.clone()))
        .collect();
    let (is_mean, is_std) = inception_score(classifier, &gen_refs, config.splits)?;
    Ok(MetricReport {
        model_tag: model_tag.to_string(),
        clip_sim: clip_sim(encoder, &pairs)?,
        is_mean,
        is_std,
        fid: fid(classifier, &real.iter().collect::<Vec<_>>(), &gen_refs)?,
        n_images: generated.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::build_corpus;
    use crate::dual_encoder::DualEncoderConfig;
    use crate::text::{TextEncoderConfig, Vocab};
    use proptest::prelude::*;

    fn kl_oracle(p: &[f64], q: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..p.len() {
            if p[i] > 0.0 {
                s += p[i] * (p[i] / q[i]).ln();
            }
        }
        s
    }

    #[test]
    fn inception_score_extremes() {
        let uniform = vec![vec![1.0 / 6.0; 6]; 12];
        assert!((inception_score_from_probs(&uniform, 1).unwrap().0 - 1.0).abs() < 1e-12);
        let one_hot: Vec<Vec<f64>> = (0..8)
            .map(|i| (0..4).map(|c| if c == i % 4 { 1.0 } else { 0.0 }).collect())
            .collect();
        let (m, s) = inception_score_from_probs(&one_hot, 1).unwrap();
        let brute = (one_hot.iter().map(|p| kl_oracle(p, &[0.25; 4])).sum::<f64>() / 8.0).exp();
        assert!((m - 4.0).abs() < 1e-12 && (m - brute).abs() < 1e-12);
        assert_eq!(s, 0.0);
        let collapsed = vec![vec![1.0, 0.0, 0.0]; 5];
        assert!((inception_score_from_probs(&collapsed, 1).unwrap().0 - 1.0).abs() < 1e-12);
        assert!(matches!(
            inception_score_from_probs(&collapsed, 6),
            Err(Error::InsufficientSamples { needed: 6, got: 5 })
        ));
    }

    proptest! {
        #[test]
        fn inception_score_bounded(raw in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 6), 1..20)) {
            let probs: Vec<Vec<f64>> = raw.iter().map(|r| {
                let s: f64 = r.iter().sum::<f64>() + 1e-9;
                r.iter().map(|v| (v + 1e-9 / 6.0) / s).collect()
            }).collect();
            let (m, _) = inception_score_from_probs(&probs, 1).unwrap();
            prop_assert!(m >= 1.0 - 1e-6 && m <= 6.0 + 1e-6);
        }

        #[test]
        fn sqrtm_squares_back(dim in 1usize..=8, seed_value in 0u64..1000) {
            use rand::Rng as _;
            let mut rng = seed::rng(seed_value);
            let mut spd = || {
                let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
                &a * a.transpose() + DMatrix::identity(dim, dim) * 0.1
            };
            let (s1, s2) = (spd(), spd());
            let target = &s1 * &s2;
            let root = sqrtm_product(&s1, &s2);
            let err = (&root * &root - &target).norm() / target.norm();
            prop_assert!(err < 1e-5, "relative error {err}");
        }

        #[test]
        fn commuting_gaussians_match_closed_form(dim in 1usize..=4, seed_value in 0u64..1000) {
            use rand::Rng as _;
            let mut rng = seed::rng(seed_value);
            let q = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0)).qr().q();
            let d1: Vec<f64> = (0..dim).map(|_| rng.random_range(0.1..3.0)).collect();
            let d2: Vec<f64> = (0..dim).map(|_| rng.random_range(0.1..3.0)).collect();
            let mu1 = DVector::from_fn(dim, |_, _| rng.random_range(-2.0..2.0));
            let mu2 = DVector::from_fn(dim, |_, _| rng.random_range(-2.0..2.0));
            let s1 = &q * DMatrix::from_diagonal(&DVector::from_vec(d1.clone())) * q.transpose();
            let s2 = &q * DMatrix::from_diagonal(&DVector::from_vec(d2.clone())) * q.transpose();
            let closed = (&mu1 - &mu2).norm_squared()
                + d1.iter().zip(&d2).map(|(a, b)| a + b - 2.0 * (a * b).sqrt()).sum::<f64>();
            let got = frechet_distance(&mu1, &s1, &mu2, &s2);
            prop_assert!((got - closed).abs() < 1e-6, "{got} vs {closed}");
        }

        #[test]
        fn fid_symmetric(a in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 4..10),
                         b in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 3), 4..10)) {
            let ab = fid_from_features(&a, &b).unwrap();
            let ba = fid_from_features(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-6);
            prop_assert!(ab >= 0.0);
        }
    }

    #[test]
    fn frechet_one_dimensional() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let d = frechet_distance(&DVector::from_element(1, 0.0), &one, &DVector::from_element(1, 1.0), &one);
        assert!((d - 1.0).abs() < 1e-12);
        let feats = vec![vec![0.5, 1.0], vec![-0.2, 0.3], vec![0.1, -0.7]];
        assert_eq!(fid_from_features(&feats, &feats).unwrap(), 0.0);
        assert!(matches!(fid_from_features(&feats[..1], &feats), Err(Error::InsufficientSamples { .. })));
    }

    fn small_encoder() -> DualEncoderModel {
        let cfg = DualEncoderConfig {
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
        DualEncoderModel::new(&cfg, Vocab::standard(), 0).unwrap()
    }

    #[test]
    fn clip_sim_is_mean_score_and_order_free() {
        let enc = small_encoder();
        let c = build_corpus(12, 2).unwrap();
        let pairs: Vec<(ImageSample, Vec<String>)> = c
            .train
            .iter()
            .take(5)
            .map(|it| (it.image_at(16).unwrap(), it.caption(Dialect::A).caption.clone()))
            .collect();
        let direct = pairs.iter().map(|(i, p)| enc.score(p, i).unwrap()).sum::<f64>() / 5.0;
        let got = clip_sim(&enc, &pairs).unwrap();
        assert!((got - direct).abs() < 1e-9);
        let mut rev = pairs.clone();
        rev.reverse();
        assert!((clip_sim(&enc, &rev).unwrap() - got).abs() < 1e-9);
        assert!(matches!(clip_sim(&enc, &[]), Err(Error::EmptySet)));
    }

    fn tiny_classifier_config() -> ClassifierConfig {
        ClassifierConfig {
            resolution: 16,
            widths: [8, 16, 16],
            feature_dim: 16,
            epochs: 3,
            batch_size: 16,
            target_accuracy: 0.0,
            ..ClassifierConfig::default()
        }
    }

    #[test]
    fn classifier_contracts() {
        let c = build_corpus(20, 4).unwrap();
        let cfg = tiny_classifier_config();
        let (a, _) = train_classifier(&c.train, &cfg, 3).unwrap();
        let (b, _) = train_classifier(&c.train, &cfg, 3).unwrap();
        assert_eq!(a.params.content_hash().unwrap(), b.params.content_hash().unwrap());
        let imgs: Vec<&ImageSample> = c.train.iter().map(|it| &it.image).collect();
        let feats = a.features(&imgs).unwrap();
        assert!(feats.iter().all(|r| r.len() == 16 && r.iter().all(|v| v.is_finite())));
        assert_eq!(feats, a.features(&imgs).unwrap());
        for p in a.probabilities(&imgs).unwrap() {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let strict = ClassifierConfig {
            target_accuracy: 1.01,
            ..cfg
        };
        assert!(matches!(
            train_classifier(&c.train, &strict, 3),
            Err(Error::AccuracyNotReached { seed: 3, .. })
        ));
        let dir = tempfile::tempdir().unwrap();
        a.save(dir.path()).unwrap();
        assert_eq!(SceneClassifier::load(dir.path()).unwrap().features(&imgs).unwrap(), feats);
    }

    struct ConstantGenerator;

    impl ImageGenerator for ConstantGenerator {
        fn generate(&self, prompts: &[Prompt<'_>]) -> Result<Vec<ImageSample>> {
            Ok(prompts
                .iter()
                .enumerate()
                .map(|(i, _)| ImageSample::constant(0.1 * (i % 3) as f32, 16, 0))
                .collect())
        }
    }

    #[test]
    fn oracle_evaluation() {
        let c = build_corpus(60, 8).unwrap();
        let cfg = tiny_classifier_config();
        let (clf, _) = train_classifier(&c.train, &cfg, 1).unwrap();
        let enc = small_encoder();
        let eval = EvalConfig {
            n_samples: c.test.len(),
            splits: 1,
            seed: 5,
        };
        let oracle = OracleGenerator { resolution: 16 };
        let report = evaluate_model(&oracle, "test_set", &enc, &clf, &c.test, &eval).unwrap();
        assert_eq!(report.fid, 0.0);
        let pairs: Vec<(ImageSample, Vec<String>)> = c
            .test
            .iter()
            .map(|it| (it.image_at(16).unwrap(), it.caption(Dialect::A).caption.clone()))
            .collect();
        assert!((report.clip_sim - clip_sim(&enc, &pairs).unwrap()).abs() < 1e-9);
        assert_eq!(report, evaluate_model(&oracle, "test_set", &enc, &clf, &c.test, &eval).unwrap());
        let flat = evaluate_model(&ConstantGenerator, "flat", &enc, &clf, &c.test, &eval).unwrap();
        assert!(flat.fid > report.fid);
        assert!(report.is_mean >= 1.0 - 1e-9);
        let csv = metrics_csv(&[report]);
        assert!(csv.starts_with("model,clip_sim,is_mean,is_std,fid,n\ntest_set,"));
    }
}
