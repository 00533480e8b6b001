use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::caption::{raw_caption, scene_tags, CaptionMode, CaptionRecord, CaptionSource, Dialect, Recaptioner, Tags, VOCAB_VERSION};
use super::image::{downsample, ImageSample};
use super::scene::{check_resolution, SceneDomain, SceneSpec};
use crate::{Error, Result};

/// How captions are produced from tags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionStyle {
    Template,
    External,
    RawTags,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n: usize,
    pub seed: u64,
    pub high_res: usize,
    pub low_res: usize,
    pub domain: SceneDomain,
    pub captions: CaptionStyle,
}

impl CorpusConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        Self {
            n,
            seed,
            high_res: 64,
            low_res: 32,
            domain: SceneDomain::Design,
            captions: CaptionStyle::Template,
        }
    }

    /// Seed of the `i`-th scene. Consecutive, so `seed % 10 == 0` puts exactly
    /// one scene in ten into the test split.
    pub fn scene_seed(&self, i: usize) -> u64 {
        (self.seed % 1_000_000_000) * 1_000_000_000 + i as u64
    }
}

pub fn is_test_seed(seed: u64) -> bool {
    seed % 10 == 0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub image: ImageSample,
    pub scene: SceneSpec,
    /// One caption per dialect, dialect A first.
    pub captions: Vec<CaptionRecord>,
}

impl CorpusItem {
    pub fn caption(&self, dialect: Dialect) -> &CaptionRecord {
        self.captions
            .iter()
            .find(|c| c.dialect == dialect)
            .unwrap_or(&self.captions[0])
    }

    pub fn seed(&self) -> u64 {
        self.scene.seed
    }

    pub fn image_at(&self, resolution: usize) -> Result<ImageSample> {
        let size = self.image.size();
        if size == resolution {
            return Ok(self.image.clone());
        }
        if resolution == 0 || size % resolution != 0 {
            return Err(Error::InvalidResolution(resolution));
        }
        downsample(&self.image, size / resolution)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplit {
    pub config: CorpusConfig,
    pub train: Vec<CorpusItem>,
    pub test: Vec<CorpusItem>,
    pub ratio: (usize, usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub train: usize,
    pub test: usize,
    pub ratio: (usize, usize),
    pub vocabulary_version: String,
    pub content_hash: String,
    pub config: CorpusConfig,
    pub train_seeds: Vec<u64>,
    pub test_seeds: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
struct CaptionLine {
    seed: u64,
    dialect: Dialect,
    tags: Tags,
    caption: String,
    source: CaptionSource,
}

pub fn build_corpus(n: usize, seed: u64) -> Result<CorpusSplit> {
    build_corpus_with(&CorpusConfig::new(n, seed), &Recaptioner::default())
}

pub fn build_corpus_with(config: &CorpusConfig, recaptioner: &Recaptioner) -> Result<CorpusSplit> {
    if config.n < 10 {
        return Err(Error::CorpusTooSmall(config.n));
    }
    check_resolution(config.high_res)?;
    check_resolution(config.low_res)?;
    if config.low_res * 2 != config.high_res {
        return Err(Error::InvalidConfig(format!(
            "high_res {} must be twice low_res {}",
            config.high_res, config.low_res
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for i in 0..config.n {
        let seed = config.scene_seed(i);
        let scene = SceneSpec::generate(seed, config.domain);
        let image = scene.render(config.high_res)?;
        let tags = scene_tags(&scene);
        let captions = Dialect::ALL
            .iter()
            .map(|&d| match config.captions {
                CaptionStyle::Template => recaptioner.recaption(&tags, d, CaptionMode::Template),
                CaptionStyle::External => recaptioner.recaption(&tags, d, CaptionMode::External),
                CaptionStyle::RawTags => raw_caption(&tags, d),
            })
            .collect::<Result<Vec<_>>>()?;
        let item = CorpusItem { image, scene, captions };
        if is_test_seed(seed) {
            test.push(item);
        } else {
            train.push(item);
        }
    }
    Ok(CorpusSplit {
        config: config.clone(),
        train,
        test,
        ratio: (9, 1),
    })
}

impl CorpusSplit {
    pub fn items(&self) -> impl Iterator<Item = &CorpusItem> {
        self.train.iter().chain(self.test.iter())
    }

    fn caption_lines(&self) -> Result<Vec<String>> {
        let mut lines = Vec::new();
        for item in self.items() {
            for rec in &item.captions {
                lines.push(serde_json::to_string(&CaptionLine {
                    seed: item.seed(),
                    dialect: rec.dialect,
                    tags: rec.tags.clone(),
                    caption: rec.text(),
                    source: rec.source,
                })?);
            }
        }
        Ok(lines)
    }

    /// SHA-256 over every item's seed, 8-bit pixels, scene and captions.
    pub fn content_hash(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        for item in self.items() {
            hasher.update(item.seed().to_le_bytes());
            hasher.update(item.image.to_rgb8());
            hasher.update(serde_json::to_vec(&item.scene)?);
        }
        for line in self.caption_lines()? {
            hasher.update(line.as_bytes());
        }
        Ok(hex::encode(hasher.finalize()))
    }

    pub fn manifest(&self) -> Result<CorpusManifest> {
        Ok(CorpusManifest {
            train: self.train.len(),
            test: self.test.len(),
            ratio: self.ratio,
            vocabulary_version: VOCAB_VERSION.into(),
            content_hash: self.content_hash()?,
            config: self.config.clone(),
            train_seeds: self.train.iter().map(CorpusItem::seed).collect(),
            test_seeds: self.test.iter().map(CorpusItem::seed).collect(),
        })
    }

    /// Write `images/<seed>_<res>.png`, `captions.jsonl`, `scenes.jsonl` and
    /// `manifest.json` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<CorpusManifest> {
        let images = dir.join("images");
        fs::create_dir_all(&images)?;
        for item in self.items() {
            item.image
                .save_png(&images.join(format!("{}_{}.png", item.seed(), item.image.size())))?;
        }
        let mut captions = fs::File::create(dir.join("captions.jsonl"))?;
        for line in self.caption_lines()? {
            writeln!(captions, "{line}")?;
        }
        let mut scenes = fs::File::create(dir.join("scenes.jsonl"))?;
        for item in self.items() {
            writeln!(scenes, "{}", serde_json::to_string(&item.scene)?)?;
        }
        let manifest = self.manifest()?;
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CorpusManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        let mut scenes = std::collections::HashMap::new();
        for line in BufReader::new(fs::File::open(dir.join("scenes.jsonl"))?).lines() {
            let spec: SceneSpec = serde_json::from_str(&line?)?;
            scenes.insert(spec.seed, spec);
        }
        let mut captions: std::collections::HashMap<u64, Vec<CaptionRecord>> = std::collections::HashMap::new();
        for line in BufReader::new(fs::File::open(dir.join("captions.jsonl"))?).lines() {
            let line: CaptionLine = serde_json::from_str(&line?)?;
            captions.entry(line.seed).or_default().push(CaptionRecord {
                tags: line.tags,
                caption: line.caption.split_whitespace().map(String::from).collect(),
                dialect: line.dialect,
                source: line.source,
            });
        }
        let res = manifest.config.high_res;
        let load_item = |seed: u64| -> Result<CorpusItem> {
            let scene = scenes
                .get(&seed)
                .cloned()
                .ok_or_else(|| Error::InvalidConfig(format!("scene {seed} missing from scenes.jsonl")))?;
            // Pixels are re-rendered from the stored scene; the PNG is an 8-bit
            // export and must agree with the render after quantization.
            let image = scene.render(res)?;
            let path = dir.join("images").join(format!("{seed}_{res}.png"));
            if ImageSample::load_png(&path, seed)?.to_rgb8() != image.to_rgb8() {
                return Err(Error::InvalidConfig(format!("{} does not match scene {seed}", path.display())));
            }
            let caps = captions
                .get(&seed)
                .cloned()
                .ok_or_else(|| Error::InvalidConfig(format!("captions for {seed} missing")))?;
            Ok(CorpusItem {
                image,
                scene,
                captions: caps,
            })
        };
        let train = manifest.train_seeds.iter().map(|&s| load_item(s)).collect::<Result<Vec<_>>>()?;
        let test = manifest.test_seeds.iter().map(|&s| load_item(s)).collect::<Result<Vec<_>>>()?;
        let split = Self {
            config: manifest.config.clone(),
            train,
            test,
            ratio: manifest.ratio,
        };
        if split.content_hash()? != manifest.content_hash {
            return Err(Error::InvalidConfig(format!("corpus at {} fails its content hash", dir.display())));
        }
        Ok(split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hundred_scenes_split_nine_to_one() {
        let c = build_corpus(100, 3).unwrap();
        assert_eq!((c.train.len(), c.test.len()), (90, 10));
        let train: std::collections::HashSet<_> = c.train.iter().map(|i| i.seed()).collect();
        assert!(c.test.iter().all(|i| !train.contains(&i.seed())));
    }

    #[test]
    fn minimal_corpus() {
        let c = build_corpus(10, 0).unwrap();
        assert_eq!((c.train.len(), c.test.len()), (9, 1));
        assert!(matches!(build_corpus(9, 0), Err(Error::CorpusTooSmall(9))));
    }

    #[test]
    fn rebuild_gives_same_hash() {
        let a = build_corpus(20, 5).unwrap();
        let b = build_corpus(20, 5).unwrap();
        assert_eq!(a.content_hash().unwrap(), b.content_hash().unwrap());
        let c = build_corpus(20, 6).unwrap();
        assert_ne!(a.content_hash().unwrap(), c.content_hash().unwrap());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = CorpusConfig::new(12, 9);
        cfg.high_res = 32;
        cfg.low_res = 16;
        cfg.domain = SceneDomain::General;
        let c = build_corpus_with(&cfg, &Recaptioner::default()).unwrap();
        let manifest = c.save(dir.path()).unwrap();
        assert_eq!(manifest.train + manifest.test, 12);
        assert!(dir.path().join("images").join(format!("{}_32.png", c.train[0].seed())).is_file());
        let loaded = CorpusSplit::load(dir.path()).unwrap();
        assert_eq!(loaded, c);
    }

    #[test]
    fn both_dialects_per_item() {
        let c = build_corpus(10, 1).unwrap();
        for item in c.items() {
            assert_eq!(item.captions.len(), 2);
            assert_eq!(item.caption(Dialect::B).dialect, Dialect::B);
            assert!(!item.caption(Dialect::A).caption.is_empty());
        }
    }
}
