//! Argument handling, config merging and error reporting for the `pov`
//! binary.
//!
//! Configuration is assembled in three layers: the built-in defaults, an
//! optional TOML file, then `--dotted.key value` overrides given after the
//! subcommand's own flags. The merged tree is deserialized strictly, so a
//! misspelled key fails with its full path.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use toml::Value;

use pov_core::checkpoint::Stage;
use pov_core::dataset::Split;
use pov_core::evaluation::Protocol;
use pov_core::pipeline::{self, RunConfig, RunDir};
use pov_core::training::EgoMode;
use pov_core::PovError;

pub const RUN_ROOT_ENV: &str = "POV_RUN_ROOT";

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const PREREQUISITE: i32 = 3;
    pub const VALIDATION: i32 = 4;
    pub const IO: i32 = 5;
    pub const INTEGRITY: i32 = 6;
    pub const NUMERIC: i32 = 7;
    pub const FREEZE: i32 = 8;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage error at `{key}`: {message}")]
    Usage { key: String, message: String },
    #[error(transparent)]
    Pov(#[from] PovError),
}

impl CliError {
    fn usage(key: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Usage {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage { .. } => exit::USAGE,
            CliError::Pov(e) => match e {
                PovError::Config(_) => exit::USAGE,
                PovError::Prerequisite(_) => exit::PREREQUISITE,
                PovError::Validation(_) | PovError::UnknownView(_) | PovError::Protocol(_) => exit::VALIDATION,
                PovError::Io { .. } => exit::IO,
                PovError::Corruption { .. } | PovError::Integrity(_) => exit::INTEGRITY,
                PovError::Numeric(_) => exit::NUMERIC,
                PovError::FreezeViolation(_) => exit::FREEZE,
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage { .. } => "usage",
            CliError::Pov(e) => match e {
                PovError::Config(_) => "config",
                PovError::Validation(_) => "validation",
                PovError::UnknownView(_) => "unknown_view",
                PovError::Integrity(_) => "integrity",
                PovError::Corruption { .. } => "corruption",
                PovError::Io { .. } => "io",
                PovError::Numeric(_) => "numeric",
                PovError::FreezeViolation(_) => "freeze_violation",
                PovError::Protocol(_) => "protocol",
                PovError::Prerequisite(_) => "prerequisite",
            },
        }
    }

    /// One-line JSON record written to stderr on failure.
    pub fn record(&self) -> String {
        let mut rec = serde_json::json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        if let CliError::Usage { key, .. } = self {
            rec["key"] = key.as_str().into();
        }
        rec.to_string()
    }
}

#[derive(Debug, Parser)]
#[command(name = "pov", version, about = "Synthetic multi-view action recognition with view prompts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML config file; omitted keys keep their defaults.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Run directory. Defaults to $POV_RUN_ROOT/<run-name>, else ./runs/<run-name>.
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long, default_value = "default")]
    pub run_name: String,
    /// Derive every component seed from this value.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overwrite outputs produced under a different config.
    #[arg(long)]
    pub force: bool,
    /// Config overrides such as `--stage2.lambda 0.0`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Render the synthetic dataset.
    GenerateData(Common),
    /// Stage 1: train backbone and head on third-person views.
    Pretrain(Common),
    /// Stage 2: learn per-view prompts on the frozen model.
    PromptTune(Common),
    /// Stage 3: adapt to the egocentric view.
    EgoFinetune {
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[command(flatten)]
        common: Common,
    },
    /// Score a protocol and write a metrics report.
    Evaluate {
        #[arg(long, value_enum)]
        protocol: ProtocolArg,
        #[command(flatten)]
        common: Common,
    },
    /// Dump pooled features for one checkpoint and split.
    ExportFeatures {
        #[arg(long, value_enum)]
        stage: StageArg,
        #[arg(long, value_enum)]
        split: SplitArg,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ModeArg {
    ZeroShot,
    FewShot,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum ProtocolArg {
    ZeroShotXview,
    FewShotXview,
    ThirdToEgo,
    HoiXviewHeldout,
    /// Stage-1 model on the ego test split, no prompts.
    Stage1Baseline,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum StageArg {
    Pretrain,
    ViewTune,
    EgoZeroShot,
    EgoFewShot,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum SplitArg {
    Train,
    EgoTune,
    EgoTest,
    HeldoutTest,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Pretrain => Stage::Pretrain,
            StageArg::ViewTune => Stage::ViewTune,
            StageArg::EgoZeroShot => Stage::EgoZeroShot,
            StageArg::EgoFewShot => Stage::EgoFewShot,
        }
    }
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::EgoTune => Split::EgoTune,
            SplitArg::EgoTest => Split::EgoTest,
            SplitArg::HeldoutTest => Split::HeldoutTest,
        }
    }
}

/// Splits `--a.b 1 --c=2` into `(key, raw value)` pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>, CliError> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(body) = a.strip_prefix("--") else {
            return Err(CliError::usage(a, "expected `--key value`"));
        };
        let (k, v) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| CliError::usage(body, "override has no value"))?;
                (body.to_string(), v.clone())
            }
        };
        if k.is_empty() || k.split('.').any(str::is_empty) {
            return Err(CliError::usage(k, "malformed key"));
        }
        out.push((k, v));
    }
    Ok(out)
}

/// A raw override value is read as a TOML literal when it parses as one,
/// else as a bare string.
fn literal(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, key: &str, v: Value) -> Result<(), CliError> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let Value::Table(t) = cur else {
            return Err(CliError::usage(key, format!("`{}` is not a table", parts[..i].join("."))));
        };
        if i + 1 == parts.len() {
            if !t.contains_key(*p) {
                return Err(CliError::usage(key, "unknown key"));
            }
            t.insert(p.to_string(), v);
            return Ok(());
        }
        cur = t.get_mut(*p).ok_or_else(|| CliError::usage(key, "unknown key"))?;
    }
    unreachable!("keys are non-empty")
}

fn to_toml<T: Serialize>(v: &T) -> Result<Value, CliError> {
    Value::try_from(v).map_err(|e| CliError::usage("<defaults>", e.to_string()))
}

/// Defaults, then `file`, then `overrides`; unknown keys and type errors
/// report the offending path.
pub fn parse_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig, CliError> {
    let mut tree = to_toml(&RunConfig::default())?;
    if let Some(path) = file {
        let text = fs::read_to_string(path).map_err(|e| PovError::io(path, e))?;
        let t: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::usage(path.display().to_string(), e.message().to_string()))?;
        merge(&mut tree, Value::Table(t));
    }
    for (k, raw) in overrides {
        set_path(&mut tree, k, literal(raw))?;
    }
    let cfg: RunConfig = serde_path_to_error::deserialize(tree).map_err(|e| {
        let key = e.path().to_string();
        CliError::usage(key, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn resolve_run_dir(common: &Common) -> PathBuf {
    if let Some(d) = &common.run_dir {
        return d.clone();
    }
    let root = std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
    root.join(&common.run_name)
}

#[derive(Debug, Serialize)]
struct Provenance<'a> {
    command: &'a str,
    config_file: Option<&'a Path>,
    overrides: &'a [(String, String)],
    config_hash: String,
}

fn write_provenance(run: &RunDir, command: &str, common: &Common, ov: &[(String, String)], cfg: &RunConfig) -> Result<(), CliError> {
    let dir = run.root.join("provenance");
    fs::create_dir_all(&dir).map_err(|e| PovError::io(&dir, e))?;
    let p = Provenance {
        command,
        config_file: common.config.as_deref(),
        overrides: ov,
        config_hash: cfg.hash(),
    };
    let path = dir.join(format!("{command}.json"));
    let text = serde_json::to_string_pretty(&p).expect("provenance serializes");
    fs::write(&path, text).map_err(|e| PovError::io(&path, e))?;
    Ok(())
}

/// Executes one parsed command and returns the JSON summary for stdout.
pub fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    let (name, common) = match &cli.command {
        Cmd::GenerateData(c) => ("generate-data", c),
        Cmd::Pretrain(c) => ("pretrain", c),
        Cmd::PromptTune(c) => ("prompt-tune", c),
        Cmd::EgoFinetune { common, .. } => ("ego-finetune", common),
        Cmd::Evaluate { common, .. } => ("evaluate", common),
        Cmd::ExportFeatures { common, .. } => ("export-features", common),
    };
    let ov = parse_overrides(&common.overrides)?;
    let mut cfg = parse_config(common.config.as_deref(), &ov)?;
    if let Some(seed) = common.seed {
        cfg.reseed(seed);
    }
    let run = RunDir::new(resolve_run_dir(common));
    let force = common.force;
    let json = |v: &dyn erased::Json| v.to_json();
    let out = match &cli.command {
        Cmd::GenerateData(_) => json(&pipeline::generate_data(&cfg, &run, force)?),
        Cmd::Pretrain(_) => json(&pipeline::pretrain(&cfg, &run, force)?),
        Cmd::PromptTune(_) => json(&pipeline::prompt_tune(&cfg, &run, force)?),
        Cmd::EgoFinetune { mode, .. } => {
            let m = match mode {
                ModeArg::ZeroShot => EgoMode::ZeroShot,
                ModeArg::FewShot => EgoMode::FewShot,
            };
            json(&pipeline::ego_adapt(&cfg, &run, m, force)?)
        }
        Cmd::Evaluate { protocol, .. } => {
            let p = match protocol {
                ProtocolArg::ZeroShotXview => Some(Protocol::ZeroShotXview),
                ProtocolArg::FewShotXview => Some(Protocol::FewShotXview),
                ProtocolArg::ThirdToEgo => Some(Protocol::ThirdToEgo),
                ProtocolArg::HoiXviewHeldout => Some(Protocol::HoiXviewHeldout),
                ProtocolArg::Stage1Baseline => None,
            };
            match p {
                Some(p) => json(&pipeline::evaluate(&cfg, &run, p, force)?),
                None => json(&pipeline::evaluate_baseline(&cfg, &run, force)?),
            }
        }
        Cmd::ExportFeatures { stage, split, .. } => {
            json(&pipeline::features(&cfg, &run, (*stage).into(), (*split).into(), force)?)
        }
    };
    write_provenance(&run, name, common, &ov, &cfg)?;
    Ok(out)
}

mod erased {
    use serde::Serialize;
    use std::path::PathBuf;

    use pov_core::evaluation::MetricsReport;
    use pov_core::pipeline::RunManifest;
    use pov_core::training::TrainReport;

    pub trait Json {
        fn to_json(&self) -> serde_json::Value;
    }

    fn v<T: Serialize>(t: &T) -> serde_json::Value {
        serde_json::to_value(t).expect("summary serializes")
    }

    impl Json for RunManifest {
        fn to_json(&self) -> serde_json::Value {
            serde_json::json!({ "manifest": v(self) })
        }
    }

    impl Json for (TrainReport, RunManifest) {
        fn to_json(&self) -> serde_json::Value {
            let r = &self.0;
            serde_json::json!({
                "stage": r.stage.name(),
                "steps": r.steps,
                "epoch_losses": r.epoch_losses,
                "manifest": v(&self.1),
            })
        }
    }

    impl Json for (MetricsReport, RunManifest) {
        fn to_json(&self) -> serde_json::Value {
            serde_json::json!({ "report": v(&self.0), "manifest": v(&self.1) })
        }
    }

    impl Json for (PathBuf, RunManifest) {
        fn to_json(&self) -> serde_json::Value {
            serde_json::json!({ "features": self.0, "manifest": v(&self.1) })
        }
    }
}
