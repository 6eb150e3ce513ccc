//! Training loop, learning-rate schedule and the three modality strategies.
//!
//! Each step crops and augments one balanced batch, updates the
//! discriminator of every organelle labelled in the batch on (real,
//! detached fake) pairs, then updates the generator (and the modality
//! controller, if any) with the adaptive loss. The UNet++ backbone has no
//! discriminators and trains on the L1 part alone.
//!
//! An epoch is a fixed number of sampler batches (`steps_per_epoch`).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use islab_tensor::{Adam, Graph};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Manifest;
use crate::domain::{Modality, Organelle};
use crate::losses::{adaptive_loss, discriminator_loss, LossBatch, LossConfig, LossReport};
use crate::models::{
    Backbone, Checkpoint, CheckpointMeta, ModalityCode, Network, NetworkConfig, OptimizerSnapshot, ParamMode, Strategy, Tier,
};
use crate::sampler::{build_organelle_lists, BalancedSampler, SamplerState};
use crate::transforms::{augment, random_crop, NormalizedSample, PatchPair};
use crate::{IslError, Result, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub backbone: Backbone,
    pub tier: Tier,
    pub epochs_constant: usize,
    pub epochs_decay: usize,
    pub steps_per_epoch: usize,
    pub lr0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    /// Overrides the tier's patch size.
    #[serde(default)]
    pub patch_size: Option<usize>,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (0: only the final one).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default = "yes")]
    pub augment: bool,
    #[serde(default)]
    pub loss: LossConfig,
}

fn yes() -> bool {
    true
}

impl TrainConfig {
    /// Full-scale schedule: 150 constant epochs, 150 decaying, lr 2e-4.
    pub fn paper() -> Self {
        Self {
            strategy: Strategy::Separate,
            backbone: Backbone::Pix2pixResnet9,
            tier: Tier::Paper,
            epochs_constant: 150,
            epochs_decay: 150,
            steps_per_epoch: 500,
            lr0: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 12,
            patch_size: None,
            seed: 0,
            checkpoint_every: 10,
            augment: true,
            loss: LossConfig::default(),
        }
    }

    /// Desk-scale schedule for tests and smoke runs.
    pub fn test() -> Self {
        Self {
            tier: Tier::Test,
            epochs_constant: 2,
            epochs_decay: 2,
            steps_per_epoch: 2,
            checkpoint_every: 2,
            ..Self::paper()
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_constant + self.epochs_decay
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs() * self.steps_per_epoch
    }

    pub fn network(&self) -> NetworkConfig {
        let mut n = NetworkConfig::for_tier(self.tier, self.backbone, self.strategy == Strategy::Dynamic, self.seed);
        if let Some(p) = self.patch_size {
            n.generator.patch_size = p;
            n.unetpp.patch_size = p;
        }
        n
    }

    pub fn patch_size(&self) -> usize {
        self.network().patch_size()
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let net = self.network();
        match self.backbone {
            Backbone::Pix2pixResnet9 => net.generator.validate()?,
            Backbone::UnetPP => net.unetpp.validate()?,
        }
        if self.steps_per_epoch == 0 || self.batch_size == 0 || self.total_epochs() == 0 {
            return Err(IslError::Config("steps_per_epoch, batch_size and the epoch total must be >= 1".into()));
        }
        if !(self.lr0 > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(IslError::Config("lr0 must be > 0 and betas in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Constant `lr0` for `epochs_constant` epochs, then linear decay to zero
/// over `epochs_decay` epochs.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    let total = cfg.total_epochs();
    if epoch > total {
        return Err(IslError::Config(format!("epoch {epoch} outside schedule [0, {total}]")));
    }
    if epoch < cfg.epochs_constant {
        return Ok(cfg.lr0);
    }
    let into = (epoch - cfg.epochs_constant) as f64;
    Ok(cfg.lr0 * (1.0 - into / cfg.epochs_decay as f64))
}

/// Optimizers of one run.
#[derive(Clone, Debug)]
pub struct Optimizers<T> {
    pub generator: Adam<T>,
    /// Shared by the four discriminators; per-parameter state keeps them
    /// independent.
    pub discriminators: Option<Adam<T>>,
}

impl<T: Scalar> Optimizers<T> {
    pub fn new(cfg: &TrainConfig, adversarial: bool) -> Self {
        let make = || Adam::new(T::lit(cfg.lr0), T::lit(cfg.beta1), T::lit(cfg.beta2));
        Self { generator: make(), discriminators: adversarial.then(make) }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.generator.lr = T::lit(lr);
        if let Some(d) = &mut self.discriminators {
            d.lr = T::lit(lr);
        }
    }
}

/// One optimisation step on an already-composed batch.
///
/// The batch is validated before any parameter is touched.
pub fn train_step<T: Scalar>(
    net: &mut Network<T>,
    opts: &mut Optimizers<T>,
    patches: &[PatchPair<T>],
    cfg: &LossConfig,
) -> Result<LossReport> {
    cfg.validate()?;
    let batch = LossBatch::from_patches(patches)?;
    let divisor = net.divisor();
    let (h, w) = patches[0].size();
    if h % divisor != 0 || w % divisor != 0 {
        return Err(IslError::Shape(format!("patch {h}x{w} not divisible by {divisor}")));
    }
    let included = batch.included();
    let mut g = Graph::new();
    let x = g.constant_arc(batch.sources.clone());
    let heads = net.forward(&mut g, ParamMode::Train, x, &batch.modalities, &included)?;

    let mut d_losses = [None; 4];
    if let (Some(discs), Some(dopt)) = (net.discriminators.clone(), opts.discriminators.as_mut()) {
        for &o in &included {
            let k = o.index();
            let mut dg = Graph::new();
            let src = dg.constant(batch.sources_for(o)?);
            let real = dg.constant_arc(batch.targets[k].clone().expect("included"));
            let fake_val = g.value(heads[k].expect("included")).gather_batch(&batch.rows[k])?;
            let fake = dg.constant(fake_val);
            let loss = discriminator_loss(&mut dg, &discs[k], &net.store, src, real, fake)?;
            d_losses[k] = Some(dg.value(loss).item().to_f64_lossless());
            let grads = dg.backward(loss)?;
            dopt.step(&mut net.store, &grads, &discs[k].params());
        }
    }

    let (total, mut report) = {
        let bank = net.discriminators.as_ref().map(|d| (d, &net.store));
        adaptive_loss(&mut g, &heads, &batch, bank, cfg)?
    };
    let grads = g.backward(total)?;
    let ids = net.generator_params();
    opts.generator.step(&mut net.store, &grads, &ids);
    for (k, d) in d_losses.into_iter().enumerate() {
        if let Some(entry) = report.organelles[k].as_mut() {
            entry.d_loss = d;
        }
    }
    Ok(report)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub model_id: String,
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub sample_ids: Vec<String>,
    pub focus: Vec<Organelle>,
    pub modalities: Vec<Modality>,
    /// One-hot codes fed to the controller (dynamic strategy only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality_codes: Option<Vec<[f64; 3]>>,
    pub loss: LossReport,
}

/// Owner-defined checkpoint state of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RunState {
    train: TrainConfig,
    sampler: SamplerState,
    data_seed: [u8; 32],
    data_stream: u64,
    data_word_pos: String,
}

/// A single training run over one modality scope.
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub model_id: String,
    pub scope: Option<Modality>,
    pub net: Network<T>,
    pub opts: Optimizers<T>,
    sampler: BalancedSampler,
    data_rng: ChaCha8Rng,
    samples: BTreeMap<String, NormalizedSample<T>>,
    pub step: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: &TrainConfig, manifest: &Manifest, scope: Option<Modality>, model_id: &str) -> Result<Self> {
        cfg.validate()?;
        let net = Network::build(cfg.network())?;
        let lists = build_organelle_lists(manifest, scope)?;
        let sampler = BalancedSampler::new(&lists, cfg.seed ^ 0x5a5a_5a5a);
        sampler.quota(cfg.batch_size)?;
        let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        data_rng.set_stream(1);
        Ok(Self {
            cfg: cfg.clone(),
            model_id: model_id.to_string(),
            scope,
            opts: Optimizers::new(cfg, net.discriminators.is_some()),
            net,
            sampler,
            data_rng,
            samples: load_scope(manifest, scope)?,
            step: 0,
        })
    }

    /// Rebuilds a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(ck: &Checkpoint<T>, manifest: &Manifest) -> Result<Self> {
        let state: RunState = serde_json::from_value(ck.meta.extra.clone())
            .map_err(|e| IslError::Checkpoint(format!("run state: {e}")))?;
        let mut net = Network::build(ck.meta.network)?;
        ck.restore_params(&mut net.store)?;
        let generator = ck
            .optimizer("generator")
            .ok_or_else(|| IslError::Checkpoint("missing generator optimizer".into()))?
            .restore(&net.store)?;
        let discriminators = match ck.optimizer("discriminators") {
            Some(o) => Some(o.restore(&net.store)?),
            None => None,
        };
        let mut data_rng = ChaCha8Rng::from_seed(state.data_seed);
        data_rng.set_stream(state.data_stream);
        data_rng.set_word_pos(
            state.data_word_pos.parse().map_err(|_| IslError::Checkpoint("bad data rng position".into()))?,
        );
        Ok(Self {
            model_id: ck.meta.model_id.clone(),
            scope: ck.meta.modality_scope,
            samples: load_scope(manifest, ck.meta.modality_scope)?,
            cfg: state.train,
            net,
            opts: Optimizers { generator, discriminators },
            sampler: BalancedSampler::from_state(&state.sampler)?,
            data_rng,
            step: ck.meta.step,
        })
    }

    pub fn epoch(&self) -> usize {
        self.step / self.cfg.steps_per_epoch
    }

    pub fn done(&self) -> bool {
        self.step >= self.cfg.total_steps()
    }

    /// Draws, crops and augments the next batch.
    pub fn next_patches(&mut self) -> Result<(Vec<PatchPair<T>>, Vec<Organelle>)> {
        let plan = self.sampler.next_batch(self.cfg.batch_size)?;
        let size = self.cfg.patch_size();
        let mut patches = Vec::with_capacity(plan.len());
        let mut focus = Vec::with_capacity(plan.len());
        for (id, o) in plan.picks {
            let s = self
                .samples
                .get(&id)
                .ok_or_else(|| IslError::Load(format!("sample {id} not loaded")))?;
            let p = random_crop(s, size, &self.cfg.loss.mask, &mut self.data_rng);
            patches.push(if self.cfg.augment { augment(&p, &mut self.data_rng) } else { p });
            focus.push(o);
        }
        Ok((patches, focus))
    }

    pub fn step_once(&mut self) -> Result<StepRecord> {
        let epoch = self.epoch();
        let lr = lr_at(epoch, &self.cfg)?;
        self.opts.set_lr(lr);
        let (patches, focus) = self.next_patches()?;
        let loss = train_step(&mut self.net, &mut self.opts, &patches, &self.cfg.loss)?;
        self.step += 1;
        let modalities: Vec<Modality> = patches.iter().map(|p| p.modality).collect();
        let modality_codes = self
            .net
            .controller
            .as_ref()
            .map(|_| modalities.iter().map(|&m| ModalityCode::of(m).values()).collect());
        Ok(StepRecord {
            model_id: self.model_id.clone(),
            step: self.step,
            epoch,
            lr,
            sample_ids: patches.into_iter().map(|p| p.sample_id).collect(),
            focus,
            modalities,
            modality_codes,
            loss,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        let mut meta = CheckpointMeta::new(&self.model_id, self.net.config, self.cfg.strategy, self.scope);
        meta.epoch = self.epoch();
        meta.step = self.step;
        let state = RunState {
            train: self.cfg.clone(),
            sampler: self.sampler.state(),
            data_seed: self.data_rng.get_seed(),
            data_stream: self.data_rng.get_stream(),
            data_word_pos: self.data_rng.get_word_pos().to_string(),
        };
        meta.extra = serde_json::to_value(state).expect("run state serializes");
        let mut opts = vec![OptimizerSnapshot::capture("generator", &self.opts.generator, &self.net.store)];
        if let Some(d) = &self.opts.discriminators {
            opts.push(OptimizerSnapshot::capture("discriminators", d, &self.net.store));
        }
        Checkpoint::capture(meta, &self.net.store, opts)
    }

    /// Trains to the end of the schedule, appending to `dir/log.jsonl` and
    /// writing `dir/epoch_NNNN.ckpt` at the configured cadence plus
    /// `dir/model.ckpt` at the end.
    pub fn run(&mut self, dir: &Path) -> Result<RunSummary> {
        fs::create_dir_all(dir).map_err(|e| IslError::io(dir, e))?;
        let log_path = dir.join("log.jsonl");
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| IslError::io(&log_path, e))?;
        let mut log = BufWriter::new(file);
        let mut seen = std::collections::BTreeSet::new();
        let mut last = None;
        while !self.done() {
            let rec = self.step_once()?;
            seen.extend(rec.sample_ids.iter().cloned());
            let line = serde_json::to_string(&rec).map_err(|e| IslError::Parse(e.to_string()))?;
            writeln!(log, "{line}").map_err(|e| IslError::io(&log_path, e))?;
            if self.step % self.cfg.steps_per_epoch == 0 {
                let epoch = self.step / self.cfg.steps_per_epoch;
                info!("{} epoch {epoch}: loss {:.4}", self.model_id, rec.loss.total);
                if self.cfg.checkpoint_every > 0 && epoch % self.cfg.checkpoint_every == 0 && !self.done() {
                    log.flush().map_err(|e| IslError::io(&log_path, e))?;
                    self.checkpoint().save(dir.join(format!("epoch_{epoch:04}.ckpt")))?;
                }
            }
            last = Some(rec.loss);
        }
        log.flush().map_err(|e| IslError::io(&log_path, e))?;
        let checkpoint = dir.join("model.ckpt");
        self.checkpoint().save(&checkpoint)?;
        Ok(RunSummary {
            model_id: self.model_id.clone(),
            scope: self.scope,
            checkpoint,
            log: log_path,
            distinct_samples: seen.len(),
            final_loss: last,
        })
    }
}

fn load_scope<T: Scalar>(manifest: &Manifest, scope: Option<Modality>) -> Result<BTreeMap<String, NormalizedSample<T>>> {
    manifest
        .entries
        .iter()
        .filter(|e| scope.is_none_or(|m| e.modality == m))
        .map(|e| Ok((e.id.clone(), NormalizedSample::from_sample(&manifest.load_sample(e)?))))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub model_id: String,
    pub scope: Option<Modality>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub distinct_samples: usize,
    pub final_loss: Option<LossReport>,
}

pub fn model_id(backbone: Backbone, strategy: Strategy, scope: Option<Modality>) -> String {
    let base = format!("{backbone}-{strategy}");
    match scope {
        Some(m) => format!("{base}-{}", m.as_str().to_lowercase()),
        None => base,
    }
}

/// Runs the configured strategy. Each run writes into `out/<model_id>/`.
pub fn train<T: Scalar>(manifest: &Manifest, cfg: &TrainConfig, out: &Path) -> Result<Vec<RunSummary>> {
    cfg.validate()?;
    if manifest.entries.is_empty() {
        return Err(IslError::Config("manifest has no entries".into()));
    }
    let scopes: Vec<Option<Modality>> = match cfg.strategy {
        Strategy::Separate => {
            for m in Modality::ALL {
                if !manifest.entries.iter().any(|e| e.modality == m) {
                    return Err(IslError::Config(format!("separate strategy: no {m} samples in the manifest")));
                }
            }
            Modality::ALL.iter().map(|&m| Some(m)).collect()
        }
        Strategy::Unified | Strategy::Dynamic => vec![None],
    };
    // build every trainer first so configuration problems surface before any work
    let mut trainers = scopes
        .into_iter()
        .map(|s| Trainer::<T>::new(cfg, manifest, s, &model_id(cfg.backbone, cfg.strategy, s)))
        .collect::<Result<Vec<_>>>()?;
    let mut out_runs = Vec::with_capacity(trainers.len());
    for t in &mut trainers {
        let dir = out.join(&t.model_id);
        if dir.join("log.jsonl").exists() {
            fs::remove_file(dir.join("log.jsonl")).map_err(|e| IslError::io(&dir, e))?;
        }
        out_runs.push(t.run(&dir)?);
    }
    Ok(out_runs)
}

/// Reads a training log back.
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| IslError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| IslError::Parse(format!("{}: {e}", path.display()))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::random_patch;
    use Organelle::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::paper();
        assert_eq!(lr_at(0, &cfg).unwrap(), 2e-4);
        assert_eq!(lr_at(150, &cfg).unwrap(), 2e-4);
        assert_eq!(lr_at(225, &cfg).unwrap(), 1e-4);
        assert_eq!(lr_at(300, &cfg).unwrap(), 0.0);
        assert!(lr_at(301, &cfg).is_err());
    }

    #[test]
    fn unetpp_has_no_discriminator_terms() {
        let mut cfg = TrainConfig::test();
        cfg.backbone = Backbone::UnetPP;
        let mut net: Network<f64> = Network::build(cfg.network()).unwrap();
        let mut opts = Optimizers::new(&cfg, net.discriminators.is_some());
        assert!(opts.discriminators.is_none());
        let batch = vec![random_patch("a", 64, &[Nucleus], 1), random_patch("b", 64, &[Tubulin, Actin], 2)];
        let r = train_step(&mut net, &mut opts, &batch, &cfg.loss).unwrap();
        assert_eq!(r.adv_term, 0.0);
        assert!(r.organelles.iter().flatten().all(|o| o.g_adv.is_none() && o.d_loss.is_none()));
    }

    #[test]
    fn invalid_batch_mutates_nothing() {
        let cfg = TrainConfig::test();
        let mut net: Network<f64> = Network::build(cfg.network()).unwrap();
        let before = net.store.clone();
        let mut opts = Optimizers::new(&cfg, true);
        let mut bad = random_patch::<f64>("a", 64, &[Nucleus], 1);
        bad.masks[1] = None;
        assert!(train_step(&mut net, &mut opts, &[bad], &cfg.loss).is_err());
        for id in net.store.ids() {
            assert_eq!(net.store.get(id).data(), before.get(id).data());
        }
    }
}
