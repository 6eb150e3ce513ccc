//! `islab` command line: synthesize a dataset, build manifests, train,
//! predict whole images and evaluate predictions.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 internal error.

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use islab_core::dataset::{build_manifest, read_image, Layout, Manifest};
use islab_core::domain::{Modality, PredictionSet, Provenance, CHANNEL_ORDER};
use islab_core::inference::{
    predict_image, prediction_path, write_prediction, InferenceOptions, ModelRegistry, RoutingTable,
};
use islab_core::metrics::{aggregate, evaluate, per_image_csv};
use islab_core::models::{Backbone, Strategy, Tier};
use islab_core::synthgen::{generate_dataset, SynthConfig};
use islab_core::trainer::{train, TrainConfig};
use islab_core::IslError;
use serde::Deserialize;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Internal(m) => write!(f, "internal error: {m}"),
        }
    }
}

impl From<IslError> for CliError {
    fn from(e: IslError) -> Self {
        let msg = e.to_string();
        match e {
            IslError::Config(_) => CliError::Usage(msg),
            IslError::Routing(_) | IslError::Checkpoint(_) | IslError::Validation(_) => CliError::Data(msg),
            e if e.is_data_error() => CliError::Data(msg),
            _ => CliError::Internal(msg),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "islab", version, about = "In-silico fluorescence labeling from transmitted-light images")]
pub struct Cli {
    /// Run configuration (TOML with optional [synth], [train] and [inference] tables).
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset with its manifest.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of samples.
        #[arg(long)]
        samples: Option<usize>,
        /// Side length of the square images.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Scan a data directory and write its manifest.
    Manifest {
        /// Dataset root (`<study>/<sample>_<Modality>.tif` plus `<sample>_<Organelle>.tif`).
        #[arg(long)]
        root: PathBuf,
        /// Manifest path [default: <root>/manifest.toml].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train models; each run writes `<out>/<model_id>/`.
    Train {
        /// Dataset root or manifest file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Modality handling strategy.
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        /// Generator architecture.
        #[arg(long, value_enum)]
        backbone: Option<BackboneArg>,
        /// Scale preset: full-size networks and schedule, or the desk-scale test tier.
        #[arg(long, value_enum)]
        tier: Option<TierArg>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict all four organelles for every input in a dataset.
    Predict {
        /// Directory holding `<model_id>/model.ckpt` for every routed model.
        #[arg(long)]
        checkpoints: PathBuf,
        /// Routing table file [default: separate pix2pix per modality, unified UNet++ for DIC actin].
        #[arg(long, conflicts_with = "model")]
        routing: Option<PathBuf>,
        /// Route every (modality, organelle) pair to this one model.
        #[arg(long)]
        model: Option<String>,
        /// Dataset root or manifest file whose inputs are predicted.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Only predict inputs of this modality.
        #[arg(long, value_enum)]
        modality: Option<ModalityArg>,
        /// Average predictions over the four quarter-turn rotations.
        #[arg(long)]
        tta: bool,
    },
    /// Score predictions against ground truth; writes `metrics.txt` and `per_image.csv`.
    Evaluate {
        /// Directory of `<sample_id>_<Organelle>_pred.tif` files.
        #[arg(long)]
        pred: PathBuf,
        /// Dataset root or manifest file with the ground truth.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum StrategyArg {
    Separate,
    Unified,
    Dynamic,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BackboneArg {
    #[value(alias = "pix2pix_resnet9")]
    Pix2pix,
    Unetpp,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TierArg {
    Paper,
    Test,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModalityArg {
    #[value(name = "bf", alias = "BF")]
    Bf,
    #[value(name = "pc", alias = "PC")]
    Pc,
    #[value(name = "dic", alias = "DIC")]
    Dic,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Separate => Strategy::Separate,
            StrategyArg::Unified => Strategy::Unified,
            StrategyArg::Dynamic => Strategy::Dynamic,
        }
    }
}

impl From<BackboneArg> for Backbone {
    fn from(b: BackboneArg) -> Self {
        match b {
            BackboneArg::Pix2pix => Backbone::Pix2pixResnet9,
            BackboneArg::Unetpp => Backbone::UnetPP,
        }
    }
}

impl From<TierArg> for Tier {
    fn from(t: TierArg) -> Self {
        match t {
            TierArg::Paper => Tier::Paper,
            TierArg::Test => Tier::Test,
        }
    }
}

impl From<ModalityArg> for Modality {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Bf => Modality::BF,
            ModalityArg::Pc => Modality::PC,
            ModalityArg::Dic => Modality::DIC,
        }
    }
}

/// The config file. `[train]` and `[synth]` override a preset key by key;
/// keys the target structs do not know are rejected.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub synth: Option<toml::Table>,
    #[serde(default)]
    pub train: Option<toml::Table>,
    #[serde(default)]
    pub inference: InferenceOptions,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let s = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        toml::from_str(&s).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// `preset` (paper or test) picks the base; the `--tier` flag wins over
    /// it. `precision` selects the training scalar type.
    pub fn train_config(&self, tier: Option<Tier>) -> CliResult<(TrainConfig, Precision)> {
        let mut table = self.train.clone().unwrap_or_default();
        let preset: Option<Tier> = take(&mut table, "preset")?;
        let precision = take(&mut table, "precision")?.unwrap_or(Precision::F64);
        let base = match tier.or(preset).unwrap_or(Tier::Paper) {
            Tier::Paper => TrainConfig::paper(),
            Tier::Test => TrainConfig::test(),
        };
        let mut cfg: TrainConfig = overlay(&base, table, "train")?;
        if let Some(t) = tier {
            cfg.tier = t;
        }
        Ok((cfg, precision))
    }

    pub fn synth_config(&self) -> CliResult<SynthConfig> {
        overlay(&SynthConfig::new(60, 128, 0), self.synth.clone().unwrap_or_default(), "synth")
    }
}

fn take<T: for<'de> Deserialize<'de>>(table: &mut toml::Table, key: &str) -> CliResult<Option<T>> {
    table
        .remove(key)
        .map(|v| v.try_into().map_err(|e| CliError::Usage(format!("{key}: {e}"))))
        .transpose()
}

fn overlay<T>(base: &T, over: toml::Table, section: &str) -> CliResult<T>
where
    T: serde::Serialize + for<'de> Deserialize<'de>,
{
    let mut merged = toml::Table::try_from(base).map_err(|e| CliError::Internal(e.to_string()))?;
    for (k, v) in over {
        merged.insert(k, v);
    }
    merged.try_into().map_err(|e| CliError::Usage(format!("[{section}]: {e}")))
}

/// Accepts a manifest file or a directory (its `manifest.toml`, else a scan).
fn load_manifest(path: &Path) -> CliResult<Manifest> {
    if path.is_file() {
        return Ok(Manifest::load(path)?);
    }
    let file = path.join("manifest.toml");
    if file.is_file() {
        return Ok(Manifest::load(file)?);
    }
    if !path.is_dir() {
        return Err(CliError::Data(format!("{} is neither a manifest nor a directory", path.display())));
    }
    Ok(build_manifest(path, &Layout::default())?)
}

/// Parses arguments and runs; returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("islab: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    let cfg = RunConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Synth { out, samples, size, seed } => {
            let mut s = cfg.synth_config()?;
            if let Some(n) = samples {
                s.n_samples = *n;
            }
            if let Some(n) = size {
                s.height = *n;
                s.width = *n;
            }
            if let Some(x) = seed {
                s.seed = *x;
            }
            s.validate()?;
            let m = generate_dataset(&s, out)?;
            println!("wrote {} samples to {}", m.entries.len(), out.display());
            Ok(())
        }
        Command::Manifest { root, out } => {
            let m = build_manifest(root, &Layout::default())?;
            let out = out.clone().unwrap_or_else(|| root.join("manifest.toml"));
            let rel = if out.parent() == Some(root.as_path()) { PathBuf::from(".") } else { m.root.clone() };
            Manifest { root: rel, entries: m.entries.clone() }.save(&out)?;
            println!("{} entries -> {}", m.entries.len(), out.display());
            Ok(())
        }
        Command::Train { data, out, strategy, backbone, tier, seed } => {
            let (mut tc, precision) = cfg.train_config(tier.map(Tier::from))?;
            if let Some(s) = strategy {
                tc.strategy = (*s).into();
            }
            if let Some(b) = backbone {
                tc.backbone = (*b).into();
            }
            if let Some(x) = seed {
                tc.seed = *x;
            }
            tc.validate()?;
            let manifest = load_manifest(data)?;
            let runs = match precision {
                Precision::F32 => train::<f32>(&manifest, &tc, out)?,
                Precision::F64 => train::<f64>(&manifest, &tc, out)?,
            };
            for r in runs {
                let loss = r.final_loss.map(|l| format!("{:.4}", l.total)).unwrap_or_else(|| "-".into());
                println!("{}: {} distinct samples, final loss {loss}, {}", r.model_id, r.distinct_samples, r.checkpoint.display());
            }
            Ok(())
        }
        Command::Predict { checkpoints, routing, model, data, out, modality, tta } => {
            let table = match (routing, model) {
                (Some(p), _) => RoutingTable::load(p)?,
                (None, Some(id)) => RoutingTable::uniform(id),
                (None, None) => RoutingTable::final_solution(),
            };
            let manifest = load_manifest(data)?;
            // every routed model must load before anything is written
            let registry = ModelRegistry::load_for_routing(checkpoints, &table)?;
            table.check(&registry)?;
            let opts = InferenceOptions { tta: *tta || cfg.inference.tta, ..cfg.inference };
            let only = modality.map(Modality::from);
            let mut n = 0;
            for e in manifest.entries.iter().filter(|e| only.is_none_or(|m| e.modality == m)) {
                let input = read_image(manifest.root.join(&e.input))?;
                let set = predict_image(&input, &e.id, e.modality, &registry, &table, &opts)?;
                write_prediction(&set, out)?;
                n += 1;
            }
            println!("predicted {n} images into {}", out.display());
            Ok(())
        }
        Command::Evaluate { pred, data, out } => cmd_evaluate(pred, data, out),
    }
}

fn cmd_evaluate(pred: &Path, data: &Path, out: &Path) -> CliResult<()> {
    let manifest = load_manifest(data)?;
    let mut ids = BTreeSet::new();
    let listing = fs::read_dir(pred).map_err(|e| CliError::Data(format!("{}: {e}", pred.display())))?;
    for entry in listing {
        let name = entry.map_err(|e| CliError::Data(e.to_string()))?.file_name();
        let name = name.to_string_lossy();
        if let Some(stem) = name.strip_suffix("_pred.tif") {
            if let Some((id, _)) = stem.rsplit_once('_') {
                ids.insert(id.to_string());
            }
        }
    }
    if ids.is_empty() {
        return Err(CliError::Data(format!("no predictions in {}", pred.display())));
    }
    let unmatched: Vec<&str> = ids.iter().filter(|id| manifest.entry(id).is_none()).map(String::as_str).collect();
    if !unmatched.is_empty() {
        return Err(CliError::Data(format!("predictions without ground truth: {}", unmatched.join(", "))));
    }
    let mut reports = Vec::with_capacity(ids.len());
    for id in &ids {
        let entry = manifest.entry(id).expect("matched above");
        let sample = manifest.load_sample(entry)?;
        let planes = CHANNEL_ORDER.map(|o| read_image(prediction_path(pred, id, o)));
        let mut read = Vec::with_capacity(4);
        for p in planes {
            read.push(p?);
        }
        let set = PredictionSet {
            planes: read.try_into().expect("four planes"),
            provenance: Provenance { sample_id: id.clone(), modality: entry.modality, tta: false, channels: vec![] },
        };
        reports.push(evaluate(&set, &sample)?);
    }
    let agg = aggregate(&reports);
    fs::create_dir_all(out).map_err(|e| CliError::Data(format!("{}: {e}", out.display())))?;
    let write = |name: &str, body: String| {
        let p = out.join(name);
        fs::write(&p, body).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))
    };
    let table = agg.to_table();
    write("metrics.txt", table.clone())?;
    write("per_image.csv", per_image_csv(&reports))?;
    print!("{table}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_train_key_is_a_usage_error() {
        let cfg: RunConfig = toml::from_str("[train]\nlearning_rate = 1.0\n").unwrap();
        assert!(matches!(cfg.train_config(None), Err(CliError::Usage(_))));
        assert!(toml::from_str::<RunConfig>("[trian]\n").is_err());
    }

    #[test]
    fn flag_tier_beats_preset() {
        let cfg: RunConfig = toml::from_str("[train]\npreset = \"paper\"\nseed = 7\n").unwrap();
        let (tc, p) = cfg.train_config(Some(Tier::Test)).unwrap();
        assert_eq!(tc.tier, Tier::Test);
        assert_eq!(tc.epochs_constant, TrainConfig::test().epochs_constant);
        assert_eq!(tc.seed, 7);
        assert_eq!(p, Precision::F64);
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        assert_eq!(CliError::from(IslError::Config("x".into())).exit_code(), 1);
        assert_eq!(CliError::from(IslError::Routing("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(IslError::Shape("x".into())).exit_code(), 3);
    }
}
