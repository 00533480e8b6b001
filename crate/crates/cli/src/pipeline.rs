//! Pipeline phases. Each phase reads its inputs from a [`Layout`], writes its
//! artifacts, and records them in the run ledger.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use roomdiff::checkpoint;
use roomdiff::codec::{train_codec, CodecKind, CodecModel};
use roomdiff::corpus::{build_corpus_with, CaptionStyle, CorpusItem, CorpusSplit, Dialect, ImageSample, Recaptioner};
use roomdiff::curriculum::{finetune_steps, history_csv, EpochRecord, TrainData, TrainState};
use roomdiff::diffusion::DiffusionModel;
use roomdiff::dual_encoder::{
    eval_retrieval, retrieval_csv_header, retrieval_csv_row, train_stage1, train_stage2, DualEncoderModel, RETRIEVAL_KS,
};
use roomdiff::metrics::{
    evaluate_model, metrics_csv, train_classifier, DiffusionGenerator, EvalConfig, MetricReport, OracleGenerator, SceneClassifier,
};
use roomdiff::optim::Optimizer;
use roomdiff::rlcf::{run_rlcf, stages_csv, stages_jsonl};
use roomdiff::text::Vocab;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult, InPhase};
use crate::ledger::{now_unix, RunLedger, RunLock};
use crate::llm::ChatClient;
use crate::plot::{write_chart, Chart, Series};

/// Where every artifact of a run lives. Ablation variants point the shared
/// judge models (encoder, classifier) and unchanged inputs at the full run.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
    pub corpus: PathBuf,
    pub corpus_general: PathBuf,
    pub codec: PathBuf,
    pub encoder_stage1: PathBuf,
    pub encoder: PathBuf,
    pub diffusion: PathBuf,
    pub diffusion_state: PathBuf,
    pub rlcf: PathBuf,
    /// Generator after the plain fine-tuning that replaces an ablated RLCF phase.
    pub finetuned: PathBuf,
    pub classifier: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            corpus: root.join("corpus"),
            corpus_general: root.join("corpus_general"),
            codec: root.join("codec"),
            encoder_stage1: root.join("encoder_stage1"),
            encoder: root.join("encoder"),
            diffusion: root.join("diffusion"),
            diffusion_state: root.join("diffusion_state"),
            rlcf: root.join("rlcf"),
            finetuned: root.join("finetuned"),
            classifier: root.join("classifier"),
        }
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().into_owned()
    }
}

pub struct Run {
    pub config: ExperimentConfig,
    pub layout: Layout,
    pub resume: bool,
    pub ledger: RunLedger,
    _lock: RunLock,
}

impl Run {
    pub fn open(config: ExperimentConfig, out: &Path, resume: bool) -> CliResult<Self> {
        Self::open_with(config, Layout::new(out), resume)
    }

    pub fn open_with(config: ExperimentConfig, layout: Layout, resume: bool) -> CliResult<Self> {
        config.validate()?;
        let lock = RunLock::acquire(&layout.root)?;
        let ledger = RunLedger::open(&layout.root, &config.hash(), config.seed)?;
        config.save(&layout.root.join("config.json"))?;
        Ok(Self {
            config,
            layout,
            resume,
            ledger,
            _lock: lock,
        })
    }

    fn finish(&mut self, phase: &str, started: f64, paths: &[PathBuf], notes: BTreeMap<String, serde_json::Value>) -> CliResult<()> {
        let rel: Vec<String> = paths.iter().map(|p| self.layout.rel(p)).collect();
        let refs: Vec<&str> = rel.iter().map(String::as_str).collect();
        self.ledger.record(&self.layout.root, phase, started, &refs, notes)?;
        self.ledger.save(&self.layout.root)
    }

    fn require(&self, phase: &str, path: &Path, produced_by: &str) -> CliResult<()> {
        if checkpoint::exists(path) || path.join("manifest.json").is_file() {
            Ok(())
        } else {
            Err(CliError::dependency(phase, &self.layout.rel(path), produced_by))
        }
    }

    fn reports_dir(&self, phase: &str) -> CliResult<PathBuf> {
        let dir = self.layout.reports();
        fs::create_dir_all(&dir).in_phase(phase)?;
        Ok(dir)
    }

    fn load_corpus(&self, phase: &str) -> CliResult<CorpusSplit> {
        self.require(phase, &self.layout.corpus, "corpus")?;
        CorpusSplit::load(&self.layout.corpus).in_phase(phase)
    }

    fn load_general(&self, phase: &str) -> CliResult<CorpusSplit> {
        self.require(phase, &self.layout.corpus_general, "corpus")?;
        CorpusSplit::load(&self.layout.corpus_general).in_phase(phase)
    }

    fn load_codec(&self, phase: &str) -> CliResult<CodecModel> {
        self.require(phase, &self.layout.codec, "train-codec")?;
        CodecModel::load(&self.layout.codec).in_phase(phase)
    }

    fn load_encoder(&self, phase: &str) -> CliResult<DualEncoderModel> {
        self.require(phase, &self.layout.encoder, "train-encoder")?;
        DualEncoderModel::load(&self.layout.encoder).in_phase(phase)
    }

    fn load_diffusion(&self, phase: &str) -> CliResult<DiffusionModel> {
        self.require(phase, &self.layout.diffusion, "train-diffusion")?;
        DiffusionModel::load(&self.layout.diffusion).in_phase(phase)
    }

    /// Post-RLCF (or compensated) model when present, else the curriculum model.
    fn final_generator(&self, phase: &str) -> CliResult<(String, DiffusionModel)> {
        for (tag, dir) in [("rlcf", &self.layout.rlcf), ("finetuned", &self.layout.finetuned)] {
            if checkpoint::exists(dir) {
                return Ok((tag.into(), DiffusionModel::load(dir).in_phase(phase)?));
            }
        }
        Ok(("curriculum".into(), self.load_diffusion(phase)?))
    }
}

fn vocab_for<'a>(splits: impl IntoIterator<Item = &'a CorpusSplit>) -> Vocab {
    let mut vocab = Vocab::standard();
    for split in splits {
        vocab.extend_with(split.items().flat_map(|it| it.captions.iter()));
    }
    vocab
}

fn recaptioner(style: CaptionStyle) -> CliResult<Recaptioner> {
    if style != CaptionStyle::External {
        return Ok(Recaptioner::default());
    }
    let client = ChatClient::from_env().ok_or_else(|| {
        CliError::new(
            "ClientUnavailable",
            "corpus",
            format!("external captions need {} to be set", crate::llm::ENDPOINT_VAR),
        )
    })?;
    Ok(Recaptioner::with_client(Arc::new(client)))
}

fn notes(pairs: &[(&str, serde_json::Value)]) -> BTreeMap<String, serde_json::Value> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

pub fn cmd_corpus(run: &mut Run) -> CliResult<serde_json::Value> {
    let started = now_unix();
    let cfg = run.config.clone();
    let rc = recaptioner(cfg.corpus.captions)?;
    let design = build_corpus_with(&cfg.corpus_config(), &rc).in_phase("corpus")?;
    let m1 = design.save(&run.layout.corpus).in_phase("corpus")?;
    let mut paths = vec![run.layout.corpus.clone()];
    let mut summary = serde_json::json!({ "design": { "train": m1.train, "test": m1.test } });
    let mut hashes = vec![("design_hash", serde_json::Value::from(m1.content_hash.clone()))];
    // A run that borrows the general corpus from another run leaves it alone.
    if run.layout.corpus_general.starts_with(&run.layout.root) {
        let general = build_corpus_with(&cfg.general_corpus_config(), &rc).in_phase("corpus")?;
        let m2 = general.save(&run.layout.corpus_general).in_phase("corpus")?;
        summary["general"] = serde_json::json!({ "train": m2.train, "test": m2.test });
        hashes.push(("general_hash", m2.content_hash.clone().into()));
        paths.push(run.layout.corpus_general.clone());
    }
    run.finish("corpus", started, &paths, notes(&hashes))?;
    Ok(summary)
}

pub fn cmd_train_codec(run: &mut Run) -> CliResult<serde_json::Value> {
    let started = now_unix();
    let corpus = run.load_corpus("train-codec")?;
    let cfg = &run.config.codec;
    let (codec, losses) = match cfg.kind {
        CodecKind::Identity => (CodecModel::identity(), Vec::new()),
        CodecKind::Learned => {
            let images = corpus
                .train
                .iter()
                .map(|it| it.image_at(cfg.train_res))
                .collect::<roomdiff::Result<Vec<ImageSample>>>()
                .in_phase("train-codec")?;
            train_codec(&images, cfg, run.config.phase_seed("codec")).in_phase("train-codec")?
        }
    };
    codec.save(&run.layout.codec).in_phase("train-codec")?;
    let mut paths = vec![run.layout.codec.clone()];
    if !losses.is_empty() {
        let path = run.reports_dir("train-codec")?.join("codec_loss.csv");
        let mut csv = String::from("epoch,loss\n");
        for (i, l) in losses.iter().enumerate() {
            csv += &format!("{i},{l:.6}\n");
        }
        fs::write(&path, csv).in_phase("train-codec")?;
        paths.push(path);
    }
    run.finish("train-codec", started, &paths, notes(&[("codec_id", codec.id().into())]))?;
    Ok(serde_json::json!({ "codec_id": codec.id(), "final_loss": losses.last() }))
}

pub fn cmd_train_encoder(run: &mut Run) -> CliResult<serde_json::Value> {
    let started = now_unix();
    let design = run.load_corpus("train-encoder")?;
    let general = run.load_general("train-encoder")?;
    let seed = run.config.phase_seed("encoder");
    let mut model = DualEncoderModel::new(&run.config.encoder, vocab_for([&design, &general]), run.config.phase_seed("encoder.init"))
        .in_phase("train-encoder")?;
    let r1 = train_stage1(&mut model, &general.train, seed).in_phase("train-encoder")?;
    model.save(&run.layout.encoder_stage1).in_phase("train-encoder")?;
    let stage1 = model.clone();
    let r2 = train_stage2(&mut model, &design.train, seed).in_phase("train-encoder")?;
    model.save(&run.layout.encoder).in_phase("train-encoder")?;
    let mut paths = vec![run.layout.encoder_stage1.clone(), run.layout.encoder.clone()];

    let gallery = &design.test;
    let max_k = RETRIEVAL_KS.iter().copied().max().unwrap_or(1);
    if gallery.len() >= max_k {
        let mut csv = retrieval_csv_header() + "\n";
        for (tag, m) in [("stage1", &stage1), ("stage2", &model)] {
            let mut reports = Vec::new();
            for d in Dialect::ALL {
                reports.extend(eval_retrieval(m, gallery, d, &RETRIEVAL_KS).in_phase("train-encoder")?);
            }
            csv += &retrieval_csv_row(tag, &reports);
            csv.push('\n');
        }
        let path = run.reports_dir("train-encoder")?.join("retrieval.csv");
        fs::write(&path, csv).in_phase("train-encoder")?;
        paths.push(path);
    }
    run.finish(
        "train-encoder",
        started,
        &paths,
        notes(&[("stage1_steps", r1.steps.into()), ("stage2_steps", r2.steps.into())]),
    )?;
    Ok(serde_json::json!({
        "stage1_final_loss": r1.epoch_losses.last(),
        "stage2_final_loss": r2.epoch_losses.last(),
    }))
}

/// Which training family the diffusion phase runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionMode {
    Curriculum,
    DirectHighRes,
}

pub fn cmd_train_diffusion(run: &mut Run, mode: DiffusionMode) -> CliResult<serde_json::Value> {
    const PHASE: &str = "train-diffusion";
    let started = now_unix();
    let corpus = run.load_corpus(PHASE)?;
    let codec = run.load_codec(PHASE)?;
    let cfg = run.config.clone();
    let mut schedule = cfg.schedule()?;
    if mode == DiffusionMode::DirectHighRes {
        schedule = schedule.high_res_only();
    }
    let model = DiffusionModel::new(&cfg.diffusion.model, vocab_for([&corpus]), &codec, cfg.phase_seed("diffusion.init")).in_phase(PHASE)?;
    let data = TrainData::prepare(&corpus.train, &codec, &model, cfg.corpus.low_res, cfg.corpus.high_res).in_phase(PHASE)?;
    let state_dir = run.layout.diffusion_state.clone();
    let state = if run.resume && checkpoint::exists(&state_dir) {
        TrainState::load(&state_dir, &schedule).in_phase(PHASE)?
    } else {
        TrainState::new(model, &schedule, &cfg.diffusion.train, data.len(), cfg.phase_seed("curriculum")).in_phase(PHASE)?
    };
    let state = roomdiff::curriculum::train_curriculum(state, &data, Some(&state_dir)).in_phase(PHASE)?;
    state.model.save(&run.layout.diffusion).in_phase(PHASE)?;
    let history_path = run.reports_dir(PHASE)?.join("curriculum_history.csv");
    fs::write(&history_path, history_csv(&state.history)).in_phase(PHASE)?;
    let paths = [run.layout.diffusion.clone(), state_dir, history_path];
    run.finish(
        PHASE,
        started,
        &paths,
        notes(&[
            ("mode", serde_json::to_value(mode).expect("mode serializes")),
            ("gradient_steps", state.optimizer.step_count().into()),
        ]),
    )?;
    Ok(serde_json::json!({
        "epochs": state.history.len(),
        "gradient_steps": state.optimizer.step_count(),
        "final_loss": state.history.last().map(|r: &EpochRecord| r.loss),
    }))
}

pub fn cmd_rlcf(run: &mut Run) -> CliResult<serde_json::Value> {
    const PHASE: &str = "rlcf";
    let started = now_unix();
    let corpus = run.load_corpus(PHASE)?;
    let codec = run.load_codec(PHASE)?;
    let encoder = run.load_encoder(PHASE)?;
    let generator = run.load_diffusion(PHASE)?;
    let cfg = run.config.rlcf.clone();
    let (tuned, records) = run_rlcf(generator, &codec, &encoder, &corpus.train, &cfg, run.config.phase_seed("rlcf")).in_phase(PHASE)?;
    tuned.save(&run.layout.rlcf).in_phase(PHASE)?;
    let reports = run.reports_dir(PHASE)?;
    fs::write(reports.join("rlcf_stages.jsonl"), stages_jsonl(&records).in_phase(PHASE)?).in_phase(PHASE)?;
    fs::write(reports.join("rlcf_stages.csv"), stages_csv(&records)).in_phase(PHASE)?;
    let steps: usize = records.iter().map(|r| r.finetune_losses.len()).sum();
    let paths = [run.layout.rlcf.clone(), reports.join("rlcf_stages.jsonl"), reports.join("rlcf_stages.csv")];
    run.finish(PHASE, started, &paths, notes(&[("stages", records.len().into()), ("gradient_steps", steps.into())]))?;
    Ok(serde_json::json!({
        "stages": records.len(),
        "gradient_steps": steps,
        "mean_best_reward": records.iter().map(|r| r.mean_best_reward).collect::<Vec<_>>(),
    }))
}

/// Fine-tune on ground-truth pairs for `steps` updates, standing in for the
/// RLCF phase when it is ablated so the gradient budget stays equal.
pub fn cmd_compensate_rlcf(run: &mut Run, steps: usize) -> CliResult<serde_json::Value> {
    const PHASE: &str = "rlcf-compensation";
    let started = now_unix();
    let corpus = run.load_corpus(PHASE)?;
    let codec = run.load_codec(PHASE)?;
    let mut model = run.load_diffusion(PHASE)?;
    let cfg = run.config.rlcf.clone();
    let res = cfg.resolution;
    let images = corpus
        .train
        .iter()
        .map(|it| it.image_at(res))
        .collect::<roomdiff::Result<Vec<_>>>()
        .in_phase(PHASE)?;
    let latents = codec.encode_batch(&images.iter().collect::<Vec<_>>(), model.dtype()).in_phase(PHASE)?;
    let mut rng = roomdiff::seed::rng(run.config.phase_seed(PHASE));
    let captions = corpus
        .train
        .iter()
        .map(|it| {
            let d = if rng.random_bool(0.5) { Dialect::A } else { Dialect::B };
            model.tokenize(&it.caption(d).caption)
        })
        .collect::<roomdiff::Result<Vec<_>>>()
        .in_phase(PHASE)?;
    let vars = if cfg.freeze_text_encoder {
        model.params.with_prefix(roomdiff::diffusion::UNET_PREFIX)
    } else {
        model.params.all()
    };
    let mut opt = Optimizer::new(roomdiff::optim::OptimConfig::adam(cfg.lr), vars);
    let losses = finetune_steps(&model, &mut opt, &latents, &captions, steps, cfg.finetune_batch, &mut rng).in_phase(PHASE)?;
    if model.config.cond_dropout > 0.0 {
        model.trained_with_dropout = true;
    }
    model.save(&run.layout.finetuned).in_phase(PHASE)?;
    let paths = [run.layout.finetuned.clone()];
    run.finish(PHASE, started, &paths, notes(&[("gradient_steps", steps.into())]))?;
    Ok(serde_json::json!({ "gradient_steps": steps, "final_loss": losses.last() }))
}

pub fn cmd_generate(run: &mut Run, prompt: Option<&str>, n: usize) -> CliResult<serde_json::Value> {
    const PHASE: &str = "generate";
    let started = now_unix();
    let codec = run.load_codec(PHASE)?;
    let (tag, model) = run.final_generator(PHASE)?;
    let prompts: Vec<Vec<String>> = match prompt {
        Some(p) => vec![roomdiff::corpus::tokenize(p); n.max(1)],
        None => {
            let corpus = run.load_corpus(PHASE)?;
            roomdiff::metrics::eval_prompts(&corpus.test, n.max(1), 0)
                .in_phase(PHASE)?
                .into_iter()
                .map(|p| p.caption)
                .collect()
        }
    };
    let dir = run.layout.root.join("generated");
    if dir.exists() {
        fs::remove_dir_all(&dir).in_phase(PHASE)?;
    }
    fs::create_dir_all(&dir).in_phase(PHASE)?;
    let seed = run.config.phase_seed(PHASE);
    let ids = prompts.iter().map(|p| model.tokenize(p)).collect::<roomdiff::Result<Vec<_>>>().in_phase(PHASE)?;
    let seeds: Vec<u64> = (0..prompts.len()).map(|i| roomdiff::seed::derive_indexed(seed, "image", i as u64)).collect();
    let m = &run.config.metrics;
    let images = model
        .sample_images(&codec, &ids, &seeds, run.config.corpus.high_res, m.sample_steps, m.guidance_scale)
        .in_phase(PHASE)?;
    let mut index = String::new();
    for (i, (img, p)) in images.iter().zip(&prompts).enumerate() {
        let file = format!("{i:04}.png");
        img.save_png(&dir.join(&file)).in_phase(PHASE)?;
        index += &serde_json::to_string(&serde_json::json!({ "file": file, "prompt": p.join(" "), "seed": seeds[i], "model": tag }))
            .expect("index line serializes");
        index.push('\n');
    }
    fs::write(dir.join("prompts.jsonl"), index).in_phase(PHASE)?;
    run.finish(PHASE, started, &[dir], notes(&[("model", tag.clone().into())]))?;
    Ok(serde_json::json!({ "images": images.len(), "model": tag }))
}

fn classifier(run: &mut Run, corpus: &CorpusSplit) -> CliResult<SceneClassifier> {
    if checkpoint::exists(&run.layout.classifier) {
        return SceneClassifier::load(&run.layout.classifier).in_phase("eval");
    }
    let started = now_unix();
    let (clf, acc) = train_classifier(&corpus.train, &run.config.metrics.classifier, run.config.phase_seed("classifier")).in_phase("eval")?;
    clf.save(&run.layout.classifier).in_phase("eval")?;
    let path = run.layout.classifier.clone();
    run.finish("train-classifier", started, &[path], notes(&[("train_accuracy", acc.into())]))?;
    Ok(clf)
}

/// Evaluate the test-set oracle, the curriculum model and (when present) the
/// post-RLCF model.
pub fn cmd_eval(run: &mut Run) -> CliResult<Vec<MetricReport>> {
    const PHASE: &str = "eval";
    let corpus = run.load_corpus(PHASE)?;
    let codec = run.load_codec(PHASE)?;
    let encoder = run.load_encoder(PHASE)?;
    let curriculum = run.load_diffusion(PHASE)?;
    let clf = classifier(run, &corpus)?;
    let started = now_unix();
    let m = run.config.metrics.clone();
    let eval = EvalConfig {
        n_samples: m.n_samples,
        splits: m.splits,
        seed: run.config.phase_seed("eval"),
    };
    let res = run.config.corpus.high_res;
    let mut reports = vec![evaluate_model(&OracleGenerator { resolution: res }, "test_set", &encoder, &clf, &corpus.test, &eval).in_phase(PHASE)?];
    let mut models = vec![("curriculum".to_string(), curriculum)];
    if checkpoint::exists(&run.layout.rlcf) {
        models.push(("rlcf".into(), DiffusionModel::load(&run.layout.rlcf).in_phase(PHASE)?));
    }
    for (tag, model) in &models {
        let gen = DiffusionGenerator {
            model,
            codec: &codec,
            resolution: res,
            steps: m.sample_steps,
            guidance: m.guidance_scale,
            batch_size: 16,
        };
        reports.push(evaluate_model(&gen, tag, &encoder, &clf, &corpus.test, &eval).in_phase(PHASE)?);
    }
    let dir = run.reports_dir(PHASE)?;
    fs::write(dir.join("metrics.json"), serde_json::to_vec_pretty(&reports).expect("reports serialize")).in_phase(PHASE)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(&reports)).in_phase(PHASE)?;
    run.ledger.reports = reports.clone();
    let paths = [dir.join("metrics.json"), dir.join("metrics.csv")];
    run.finish(PHASE, started, &paths, BTreeMap::new())?;
    Ok(reports)
}

pub fn cmd_plot(run: &mut Run) -> CliResult<Vec<String>> {
    const PHASE: &str = "plot";
    let started = now_unix();
    let history_path = run.layout.reports().join("curriculum_history.csv");
    if !history_path.is_file() {
        return Err(CliError::dependency(PHASE, "reports/curriculum_history.csv", "train-diffusion"));
    }
    let table = read_csv(&history_path)?;
    let col = |name: &str| -> Vec<(f64, f64)> {
        table
            .rows
            .iter()
            .filter_map(|r| Some((r.first()?.parse().ok()?, r.get(table.index(name)?)?.parse().ok()?)))
            .collect()
    };
    let dir = run.layout.root.join("plots");
    let mut written = Vec::new();
    let loss = Chart {
        title: "Curriculum training loss".into(),
        x_label: "epoch".into(),
        y_label: "loss".into(),
        series: ["L1", "L2", "L"]
            .iter()
            .map(|n| Series {
                label: match *n {
                    "L1" => "low-res L1".into(),
                    "L2" => "high-res L2".into(),
                    _ => "compound L".into(),
                },
                points: col(n),
            })
            .filter(|s| !s.points.is_empty())
            .collect(),
    };
    written.extend(write_chart(&dir, "loss", &loss)?);
    let alpha = Chart {
        title: "Low-resolution weight".into(),
        x_label: "epoch".into(),
        y_label: "alpha".into(),
        series: vec![Series {
            label: "alpha".into(),
            points: col("alpha"),
        }],
    };
    written.extend(write_chart(&dir, "alpha", &alpha)?);
    let rlcf_path = run.layout.reports().join("rlcf_stages.csv");
    if rlcf_path.is_file() {
        let t = read_csv(&rlcf_path)?;
        let series = ["mean_best_reward", "mean_all_reward"]
            .iter()
            .map(|n| Series {
                label: n.replace('_', " "),
                points: t
                    .rows
                    .iter()
                    .filter_map(|r| Some((r.first()?.parse().ok()?, r.get(t.index(n)?)?.parse().ok()?)))
                    .collect(),
            })
            .collect();
        let chart = Chart {
            title: "RLCF reward per stage".into(),
            x_label: "stage".into(),
            y_label: "reward".into(),
            series,
        };
        written.extend(write_chart(&dir, "rlcf_reward", &chart)?);
    }
    run.finish(PHASE, started, &[dir.clone()], BTreeMap::new())?;
    Ok(written.into_iter().map(|f| format!("plots/{f}")).collect())
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn index(&self, name: &str) -> Option<usize> {
        self.header.iter().position(|h| h == name)
    }
}

fn read_csv(path: &Path) -> CliResult<Table> {
    let text = fs::read_to_string(path).in_phase("plot")?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default().split(',').map(String::from).collect();
    Ok(Table {
        header,
        rows: lines.map(|l| l.split(',').map(String::from).collect()).collect(),
    })
}

/// Training phases for one full pipeline run (no evaluation).
pub fn train_all(run: &mut Run, mode: DiffusionMode, with_rlcf: bool) -> CliResult<()> {
    if !run.layout.corpus.join("manifest.json").is_file() {
        cmd_corpus(run)?;
    }
    if !checkpoint::exists(&run.layout.codec) {
        cmd_train_codec(run)?;
    }
    if !checkpoint::exists(&run.layout.encoder) {
        cmd_train_encoder(run)?;
    }
    cmd_train_diffusion(run, mode)?;
    if with_rlcf {
        cmd_rlcf(run)?;
    }
    Ok(())
}

pub const ABLATION_HEADER: &str = "variant,clip_sim,is_mean,is_std,fid,n";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    NoCap,
    NoCl,
    NoRlcf,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::NoCap => "no_cap",
            Variant::NoCl => "no_cl",
            Variant::NoRlcf => "no_rlcf",
        }
    }

    pub fn parse(s: &str) -> CliResult<Self> {
        match s.trim() {
            "no_cap" => Ok(Variant::NoCap),
            "no_cl" => Ok(Variant::NoCl),
            "no_rlcf" => Ok(Variant::NoRlcf),
            other => Err(CliError::new("UnknownVariant", "ablate", format!("unknown ablation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub report: MetricReport,
    pub gradient_steps: usize,
}

fn evaluate_final(run: &Run, judge: &Layout, corpus: &[CorpusItem], tag: &str) -> CliResult<MetricReport> {
    let codec = CodecModel::load(&run.layout.codec).in_phase("ablate")?;
    let encoder = DualEncoderModel::load(&judge.encoder).in_phase("ablate")?;
    let clf = SceneClassifier::load(&judge.classifier).in_phase("ablate")?;
    let (_, model) = run.final_generator("ablate")?;
    let m = &run.config.metrics;
    let gen = DiffusionGenerator {
        model: &model,
        codec: &codec,
        resolution: run.config.corpus.high_res,
        steps: m.sample_steps,
        guidance: m.guidance_scale,
        batch_size: 16,
    };
    let eval = EvalConfig {
        n_samples: m.n_samples,
        splits: m.splits,
        seed: run.config.phase_seed("eval"),
    };
    evaluate_model(&gen, tag, &encoder, &clf, corpus, &eval).in_phase("ablate")
}

fn diffusion_steps(run: &Run) -> usize {
    ["train-diffusion", "rlcf", "rlcf-compensation"]
        .iter()
        .filter_map(|p| run.ledger.phase(p)?.notes.get("gradient_steps")?.as_u64())
        .sum::<u64>() as usize
}

/// Full pipeline plus one pipeline per ablated component, all judged by the
/// full run's encoder and classifier on the full run's test prompts.
pub fn cmd_ablate(config: &ExperimentConfig, out: &Path, variants: &[Variant]) -> CliResult<Vec<AblationRow>> {
    if variants.is_empty() {
        return Err(CliError::new("NothingToAblate", "ablate", "no ablation variants were requested"));
    }
    let mut variants = variants.to_vec();
    variants.sort();
    variants.dedup();
    let root = out.join("ablate");
    let full_layout = Layout::new(&root.join("full"));
    let mut rows = Vec::new();

    let (full_rlcf_stages, full_rlcf_steps, test) = {
        let mut run = Run::open_with(config.clone(), full_layout.clone(), false)?;
        train_all(&mut run, DiffusionMode::Curriculum, true)?;
        let corpus = run.load_corpus("ablate")?;
        classifier(&mut run, &corpus)?;
        let report = evaluate_final(&run, &full_layout, &corpus.test, "full")?;
        let note = |key: &str| run.ledger.phase("rlcf").and_then(|p| p.notes.get(key)?.as_u64()).unwrap_or(0) as usize;
        let (stages, steps) = (note("stages"), note("gradient_steps"));
        rows.push(AblationRow {
            variant: "full".into(),
            report,
            gradient_steps: diffusion_steps(&run),
        });
        (stages, steps, corpus.test)
    };

    for v in variants {
        let mut cfg = config.clone();
        // Variants that keep RLCF run exactly as many stages as the full run.
        cfg.rlcf.max_stages = full_rlcf_stages.max(1);
        cfg.rlcf.relative_tolerance = 0.0;
        let mut layout = Layout::new(&root.join(v.name()));
        layout.corpus_general = full_layout.corpus_general.clone();
        layout.codec = full_layout.codec.clone();
        layout.encoder_stage1 = full_layout.encoder_stage1.clone();
        layout.encoder = full_layout.encoder.clone();
        layout.classifier = full_layout.classifier.clone();
        if v == Variant::NoCap {
            cfg.corpus.captions = CaptionStyle::RawTags;
        } else {
            layout.corpus = full_layout.corpus.clone();
        }
        let mut run = Run::open_with(cfg, layout, false)?;
        if v == Variant::NoCap {
            cmd_corpus(&mut run)?;
        }
        let mode = if v == Variant::NoCl { DiffusionMode::DirectHighRes } else { DiffusionMode::Curriculum };
        cmd_train_diffusion(&mut run, mode)?;
        if v == Variant::NoRlcf {
            cmd_compensate_rlcf(&mut run, full_rlcf_steps)?;
        } else {
            cmd_rlcf(&mut run)?;
        }
        let report = evaluate_final(&run, &full_layout, &test, v.name())?;
        rows.push(AblationRow {
            variant: v.name().into(),
            report,
            gradient_steps: diffusion_steps(&run),
        });
    }

    let mut csv = format!("{ABLATION_HEADER}\n");
    for r in &rows {
        let m = &r.report;
        csv += &format!("{},{:.6},{:.6},{:.6},{:.6},{}\n", r.variant, m.clip_sim, m.is_mean, m.is_std, m.fid, m.n_images);
    }
    fs::create_dir_all(&root).in_phase("ablate")?;
    fs::write(root.join("ablation.csv"), csv).in_phase("ablate")?;
    fs::write(root.join("ablation.json"), serde_json::to_vec_pretty(&rows).expect("rows serialize")).in_phase("ablate")?;
    Ok(rows)
}
