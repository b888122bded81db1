//! Run configuration and the stage commands operating on a run directory.
//!
//! ```text
//! <run>/config.json                  effective configuration
//! <run>/data/                        generated dataset
//! <run>/checkpoints/<stage>.ckpt
//! <run>/logs/<stage>.jsonl           one record per optimizer step
//! <run>/reports/<name>.json          MetricsReport
//! <run>/reports/<name>.predictions.jsonl
//! <run>/features/<stage>-<split>.csv
//! <run>/manifests/<command>.json     config hash, input and output checksums
//! ```
//!
//! Commands check their prerequisites through checkpoint stage tags. A
//! command whose outputs already exist from a run with a different config
//! hash refuses to overwrite them unless forced; with the same hash it simply
//! reproduces them.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{Checkpoint, Stage};
use crate::config::ModelConfig;
use crate::dataset::{generate_dataset, ClipLoader, Dataset, LabelAccess, Split};
use crate::error::{PovError, Result};
use crate::evaluation::{
    evaluate_checkpoint, export_features, predictions_to_jsonl, CheckpointSet, MetricsReport,
    Protocol, ReportMeta, VerbNounRule,
};
use crate::masking::{MaskFields, MaskKind};
use crate::model::ModelState;
use crate::prompts::ViewPromptBank;
use crate::training::{
    ego_finetune, pretrain_action, prompt_tune_view, EgoMode, JsonlSink, StageConfig, TrainReport,
};
use crate::world::WorldSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSettings {
    pub enabled: bool,
    pub kind: MaskKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSettings {
    pub per_block: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    pub verb_noun_rule: VerbNounRule,
}

/// Everything that affects a run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldSpec,
    pub model: ModelConfig,
    pub masks: MaskSettings,
    pub prompts: PromptSettings,
    pub pretrain: StageConfig,
    pub stage2: StageConfig,
    pub ego_zero_shot: StageConfig,
    pub ego_few_shot: StageConfig,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            world: WorldSpec::default(),
            model: ModelConfig::default(),
            masks: MaskSettings {
                enabled: true,
                kind: MaskKind::Hard,
            },
            prompts: PromptSettings { per_block: 2, seed: 0 },
            pretrain: StageConfig::for_stage(Stage::Pretrain),
            stage2: StageConfig::for_stage(Stage::ViewTune),
            ego_zero_shot: StageConfig::for_stage(Stage::EgoZeroShot),
            ego_few_shot: StageConfig::for_stage(Stage::EgoFewShot),
            eval: EvalSettings {
                verb_noun_rule: VerbNounRule::Marginalize,
            },
        }
    }
}

impl RunConfig {
    /// Sets every component seed to values derived from `seed`.
    pub fn reseed(&mut self, seed: u64) {
        let d = |label: &str| crate::rng::derive_seed(seed, label);
        self.world.seed = d("world");
        self.model.seed = d("model");
        self.prompts.seed = d("prompts");
        self.pretrain.seed = d("pretrain");
        self.stage2.seed = d("stage2");
        self.ego_zero_shot.seed = d("ego_zero_shot");
        self.ego_few_shot.seed = d("ego_few_shot");
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        let (w, m) = (&self.world, &self.model);
        if (w.frames, w.height, w.width, w.num_verbs, w.num_nouns)
            != (m.frames, m.height, m.width, m.num_verbs, m.num_nouns)
        {
            return Err(PovError::Config(format!(
                "model expects {}x{}x{} clips over {}x{} classes but the world makes {}x{}x{} over {}x{}",
                m.frames, m.height, m.width, m.num_verbs, m.num_nouns, w.frames, w.height, w.width, w.num_verbs, w.num_nouns
            )));
        }
        for s in [&self.pretrain, &self.stage2, &self.ego_zero_shot, &self.ego_few_shot] {
            s.validate()?;
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    fn mask_fields(&self) -> Option<MaskFields<f32>> {
        self.masks.enabled.then(|| {
            MaskFields::init(
                self.masks.kind,
                self.model.frames,
                self.model.height,
                self.model.width,
                crate::rng::derive_seed(self.model.seed, "masks"),
            )
        })
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| PovError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Paths inside one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(format!("{}.ckpt", stage.name()))
    }

    pub fn log(&self, stage: Stage) -> PathBuf {
        self.root.join("logs").join(format!("{}.jsonl", stage.name()))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.json"))
    }

    pub fn predictions(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.predictions.jsonl"))
    }

    pub fn features(&self, stage: Stage, split: Split) -> PathBuf {
        self.root.join("features").join(format!("{}-{}.csv", stage.name(), split.name()))
    }

    pub fn manifest(&self, command: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{command}.json"))
    }

    pub fn checkpoints(&self) -> CheckpointSet {
        let paths = Stage::ALL
            .into_iter()
            .map(|s| (s, self.checkpoint(s)))
            .filter(|(_, p)| p.exists())
            .collect();
        CheckpointSet { paths }
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).display().to_string()
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| PovError::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| PovError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| PovError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Runs one command body with overwrite protection and manifest writing.
pub struct Command<'a> {
    pub name: String,
    pub cfg: &'a RunConfig,
    pub run: &'a RunDir,
    pub force: bool,
}

impl<'a> Command<'a> {
    pub fn new(name: &str, cfg: &'a RunConfig, run: &'a RunDir, force: bool) -> Self {
        Command {
            name: name.to_string(),
            cfg,
            run,
            force,
        }
    }

    fn guard(&self) -> Result<()> {
        self.cfg.validate()?;
        let path = self.run.manifest(&self.name);
        if path.exists() && !self.force {
            let text = fs::read_to_string(&path).map_err(|e| PovError::io(&path, e))?;
            let prev: RunManifest =
                serde_json::from_str(&text).map_err(|e| PovError::corrupt(&path, e.to_string()))?;
            if prev.config_hash != self.cfg.hash() {
                return Err(PovError::Validation(format!(
                    "`{}` outputs in {} come from config {}; refusing to overwrite without force",
                    self.name,
                    self.run.root.display(),
                    &prev.config_hash[..12]
                )));
            }
        }
        write_json(&self.run.root.join("config.json"), self.cfg)
    }

    fn finish(&self, inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<RunManifest> {
        let sums = |ps: &[PathBuf]| -> Result<BTreeMap<String, String>> {
            ps.iter().map(|p| Ok((self.run.rel(p), file_sha256(p)?))).collect()
        };
        let m = RunManifest {
            command: self.name.clone(),
            config_hash: self.cfg.hash(),
            inputs: sums(inputs)?,
            outputs: sums(outputs)?,
        };
        write_json(&self.run.manifest(&self.name), &m)?;
        Ok(m)
    }
}

fn dataset_inputs(ds: &Dataset) -> Vec<PathBuf> {
    vec![ds.root.join("manifest.jsonl"), ds.root.join("world.json")]
}

fn open_dataset(cfg: &RunConfig, run: &RunDir) -> Result<Dataset> {
    let dir = run.data();
    if !dir.join("manifest.jsonl").exists() {
        return Err(PovError::Prerequisite(format!(
            "no dataset at {}; run generate-data first",
            dir.display()
        )));
    }
    let ds = Dataset::open(&dir)?;
    if ds.world != cfg.world {
        return Err(PovError::Validation(format!(
            "dataset at {} was generated from a different world spec",
            dir.display()
        )));
    }
    Ok(ds)
}

fn load_prerequisite(cfg: &RunConfig, run: &RunDir, stage: Stage, needed_by: &str) -> Result<Checkpoint> {
    let path = run.checkpoint(stage);
    if !path.exists() {
        return Err(PovError::Prerequisite(format!("{needed_by} needs a {stage} checkpoint")));
    }
    let ckpt = Checkpoint::load(&path)?;
    if ckpt.stage != stage {
        return Err(PovError::Validation(format!("{} is tagged {}", path.display(), ckpt.stage)));
    }
    if ckpt.model.config() != &cfg.model {
        return Err(PovError::Validation(format!(
            "{} was trained with a different model configuration",
            path.display()
        )));
    }
    Ok(ckpt)
}

fn loader(ds: &Dataset, split: Split, mode: LabelAccess) -> Result<ClipLoader<f32>> {
    let recs = ds.manifest.split(split);
    ClipLoader::load(ds, &recs, mode)
}

fn log_sink(run: &RunDir, stage: Stage) -> Result<JsonlSink<BufWriter<fs::File>>> {
    let path = run.log(stage);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| PovError::io(dir, e))?;
    }
    let f = fs::File::create(&path).map_err(|e| PovError::io(&path, e))?;
    Ok(JsonlSink::new(BufWriter::new(f), path))
}

pub fn generate_data(cfg: &RunConfig, run: &RunDir, force: bool) -> Result<RunManifest> {
    let cmd = Command::new("generate-data", cfg, run, force);
    cmd.guard()?;
    let manifest = generate_dataset(&cfg.world, &run.data())?;
    let mut outputs = vec![run.data().join("manifest.jsonl"), run.data().join("world.json")];
    outputs.extend(manifest.records.iter().map(|r| run.data().join(&r.path)));
    cmd.finish(&[], &outputs)
}

/// Stage 1 from a fresh model.
pub fn pretrain(cfg: &RunConfig, run: &RunDir, force: bool) -> Result<(TrainReport, RunManifest)> {
    let cmd = Command::new("pretrain", cfg, run, force);
    cmd.guard()?;
    let ds = open_dataset(cfg, run)?;
    let data = loader(&ds, Split::Train, LabelAccess::Labeled)?;
    let mut model = ModelState::<f32>::new(cfg.model.clone())?;
    let mut masks = cfg.mask_fields();
    let mut sink = log_sink(run, Stage::Pretrain)?;
    let report = pretrain_action(&mut model, masks.as_mut(), &data, &cfg.pretrain, &mut sink)?;
    drop(sink);
    let ckpt = Checkpoint {
        stage: Stage::Pretrain,
        config_hash: cfg.hash(),
        model,
        bank: None,
        masks,
    };
    let out = run.checkpoint(Stage::Pretrain);
    ckpt.save(&out)?;
    let m = cmd.finish(&dataset_inputs(&ds), &[out, run.log(Stage::Pretrain)])?;
    Ok((report, m))
}

/// Stage 2: a fresh bank over the training views on top of the stage-1 model.
pub fn prompt_tune(cfg: &RunConfig, run: &RunDir, force: bool) -> Result<(TrainReport, RunManifest)> {
    let cmd = Command::new("prompt-tune", cfg, run, force);
    cmd.guard()?;
    let base = load_prerequisite(cfg, run, Stage::Pretrain, "prompt-tune")?;
    let ds = open_dataset(cfg, run)?;
    let data = loader(&ds, Split::Train, LabelAccess::Labeled)?;
    let mut bank = ViewPromptBank::<f32>::init(
        &cfg.world.train_view_ids(),
        &cfg.model.block_schedule,
        cfg.prompts.per_block,
        cfg.model.embed_dim,
        cfg.prompts.seed,
    )?;
    let mut sink = log_sink(run, Stage::ViewTune)?;
    let report = prompt_tune_view(&base.model, &mut bank, base.masks.as_ref(), &data, &cfg.stage2, &mut sink)?;
    drop(sink);
    let ckpt = Checkpoint {
        stage: Stage::ViewTune,
        config_hash: cfg.hash(),
        model: base.model,
        bank: Some(bank),
        masks: base.masks,
    };
    let out = run.checkpoint(Stage::ViewTune);
    ckpt.save(&out)?;
    let mut inputs = dataset_inputs(&ds);
    inputs.push(run.checkpoint(Stage::Pretrain));
    let m = cmd.finish(&inputs, &[out, run.log(Stage::ViewTune)])?;
    Ok((report, m))
}

/// Egocentric adaptation on the ego-tune split, starting from stage 2.
pub fn ego_adapt(cfg: &RunConfig, run: &RunDir, mode: EgoMode, force: bool) -> Result<(TrainReport, RunManifest)> {
    let stage = mode.stage();
    let name = format!("ego-finetune-{}", stage.name());
    let cmd = Command::new(&name, cfg, run, force);
    cmd.guard()?;
    let _ = load_prerequisite(cfg, run, Stage::Pretrain, &name)?;
    let base = load_prerequisite(cfg, run, Stage::ViewTune, &name)?;
    let ds = open_dataset(cfg, run)?;
    let (access, scfg) = match mode {
        EgoMode::ZeroShot => (LabelAccess::Unlabeled, &cfg.ego_zero_shot),
        EgoMode::FewShot => (LabelAccess::Labeled, &cfg.ego_few_shot),
    };
    let data = loader(&ds, Split::EgoTune, access)?;
    let mut model = base.model;
    let mut bank = base
        .bank
        .ok_or_else(|| PovError::Integrity("view_tune checkpoint has no prompt bank".into()))?;
    let mut sink = log_sink(run, stage)?;
    let report = ego_finetune(&mut model, &mut bank, base.masks.as_ref(), &data, mode, scfg, &mut sink)?;
    drop(sink);
    if mode == EgoMode::ZeroShot && (report.label_reads != 0 || data.label_reads() != 0) {
        return Err(PovError::Protocol("zero-shot adaptation read labels".into()));
    }
    let ckpt = Checkpoint {
        stage,
        config_hash: cfg.hash(),
        model,
        bank: Some(bank),
        masks: base.masks,
    };
    let out = run.checkpoint(stage);
    ckpt.save(&out)?;
    let mut inputs = dataset_inputs(&ds);
    inputs.push(run.checkpoint(Stage::ViewTune));
    let m = cmd.finish(&inputs, &[out, run.log(stage)])?;
    Ok((report, m))
}

fn score(
    cfg: &RunConfig,
    run: &RunDir,
    cmd: &Command<'_>,
    name: &str,
    ckpt: &Checkpoint,
    ckpt_path: PathBuf,
    split: Split,
) -> Result<(MetricsReport, RunManifest)> {
    let ds = open_dataset(cfg, run)?;
    let data = loader(&ds, split, LabelAccess::Labeled)?;
    let meta = ReportMeta {
        protocol: name.to_string(),
        seed: cfg.model.seed,
        config_hash: cfg.hash(),
    };
    let (report, preds) = evaluate_checkpoint(ckpt, &data, cfg.eval.verb_noun_rule, &meta)?;
    write_json(&run.report(name), &report)?;
    write_file(&run.predictions(name), predictions_to_jsonl(&preds).as_bytes())?;
    let mut inputs = dataset_inputs(&ds);
    inputs.push(ckpt_path);
    let m = cmd.finish(&inputs, &[run.report(name), run.predictions(name)])?;
    Ok((report, m))
}

/// Scores the checkpoint a protocol names, with the joint prompt attached
/// and no masks.
pub fn evaluate(cfg: &RunConfig, run: &RunDir, protocol: Protocol, force: bool) -> Result<(MetricsReport, RunManifest)> {
    let cmd = Command::new(&format!("evaluate-{}", protocol.name()), cfg, run, force);
    cmd.guard()?;
    let set = run.checkpoints();
    if !set.has(Stage::Pretrain) {
        return Err(PovError::Prerequisite(format!("{protocol} needs a pretrain checkpoint")));
    }
    let ckpt = set.for_protocol(protocol)?;
    let path = set.paths[&protocol.checkpoint_stage()].clone();
    score(cfg, run, &cmd, protocol.name(), &ckpt, path, protocol.split())
}

/// Stage-1 model on the ego test split with no prompts: the reference point
/// for what view prompts and ego adaptation add.
pub fn evaluate_baseline(cfg: &RunConfig, run: &RunDir, force: bool) -> Result<(MetricsReport, RunManifest)> {
    let cmd = Command::new("evaluate-stage1_baseline", cfg, run, force);
    cmd.guard()?;
    let ckpt = load_prerequisite(cfg, run, Stage::Pretrain, "the stage-1 baseline")?;
    score(cfg, run, &cmd, "stage1_baseline", &ckpt, run.checkpoint(Stage::Pretrain), Split::EgoTest)
}

/// Writes final-norm class-token features of a split under a stage's
/// checkpoint (joint prompt attached when the checkpoint has a bank).
pub fn features(cfg: &RunConfig, run: &RunDir, stage: Stage, split: Split, force: bool) -> Result<(PathBuf, RunManifest)> {
    let cmd = Command::new(&format!("export-features-{}-{}", stage.name(), split.name()), cfg, run, force);
    cmd.guard()?;
    let ckpt = load_prerequisite(cfg, run, stage, "export-features")?;
    let ds = open_dataset(cfg, run)?;
    let data = loader(&ds, split, LabelAccess::Labeled)?;
    let csv = export_features(&ckpt.model, ckpt.bank.as_ref(), &data)?;
    let out = run.features(stage, split);
    write_file(&out, csv.as_bytes())?;
    let mut inputs = dataset_inputs(&ds);
    inputs.push(run.checkpoint(stage));
    let m = cmd.finish(&inputs, &[out.clone()])?;
    Ok((out, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_consistent() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.stage2.lambda, 0.001);
        assert_eq!(c.pretrain.epochs, 30);
        assert_eq!(c.hash(), RunConfig::default().hash());
    }

    #[test]
    fn hash_tracks_every_field() {
        let base = RunConfig::default();
        let mut a = base.clone();
        a.stage2.lambda = 0.0;
        let mut b = base.clone();
        b.world.train_views[0].tint[1] = 1;
        let mut c = base.clone();
        c.reseed(1);
        assert!(a.hash() != base.hash() && b.hash() != base.hash() && c.hash() != base.hash());
    }

    #[test]
    fn mismatched_world_and_model_rejected() {
        let mut c = RunConfig::default();
        c.model.num_nouns = 4;
        assert!(matches!(c.validate(), Err(PovError::Config(_))));
    }
}
