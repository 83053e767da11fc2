//! Seeded GAN training with the progressive line-retention curriculum.
//!
//! Each step runs the generator once, updates the discriminator on the
//! detached output, then updates the generator through the frozen
//! discriminator. All randomness is drawn from streams keyed by
//! `(seed, epoch, sample index)`, so runs and resumed runs are bit-identical.

use std::collections::BTreeSet;
use std::hash::Hasher;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{
    self, keyed_rng, progressive_rho, sample_rows, Dataset, DatasetError, ProgressiveSchedule,
    SparseSample,
};
use crate::field::FieldImage;
use crate::losses::{adversarial_d, total_generator_loss, GeneratorLossInputs, LossReport, LossWeights};
use crate::metrics::{self, EvalReport, SampleMetrics};
use crate::model::{
    load_store_tensors, store_tensors, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig,
    Mode, ModelError,
};
use crate::tensor::checkpoint::{self, CheckpointError};
use crate::tensor::{Adam, AdamConfig, ParamStore, Tape, Tensor, TensorError, Var};

const KEY_INIT_G: u64 = 1;
const KEY_INIT_D: u64 = 2;
const KEY_SHUFFLE: u64 = 3;
const KEY_ROWS: u64 = 4;
const KEY_LINES: u64 = 5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("non-finite loss at epoch {epoch} step {step}: {detail}")]
    NonFinite {
        epoch: usize,
        step: usize,
        detail: String,
    },
}

impl From<metrics::MetricsError> for TrainError {
    fn from(e: metrics::MetricsError) -> Self {
        TrainError::Data(DatasetError::Malformed(e.to_string()))
    }
}

/// Schedule with an optional horizon; `None` resolves to half the epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub rho_init: f64,
    pub rho_final: f64,
    pub t_prog: Option<usize>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        let s = ProgressiveSchedule::default();
        Self {
            rho_init: s.rho_init,
            rho_final: s.rho_final,
            t_prog: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub schedule: ScheduleConfig,
    pub weights: LossWeights,
    pub seed: u64,
    /// Epoch interval between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub dataset: Option<PathBuf>,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 4,
            lr_g: 2e-4,
            lr_d: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            schedule: ScheduleConfig::default(),
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_every: 0,
            dataset: None,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn resolved_schedule(&self) -> ProgressiveSchedule {
        ProgressiveSchedule {
            rho_init: self.schedule.rho_init,
            rho_final: self.schedule.rho_final,
            t_prog: self.schedule.t_prog.unwrap_or(self.epochs / 2).max(1),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        for (name, lr) in [("lr_g", self.lr_g), ("lr_d", self.lr_d)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1)"));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)".into());
        }
        self.resolved_schedule().validate().map_err(TrainError::Config)?;
        self.weights.validate().map_err(TrainError::Config)?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }

    /// FNV-1a over every setting that shapes the trajectory (epoch count,
    /// checkpoint interval and dataset path excluded).
    pub fn config_hash(&self) -> u64 {
        let mut c = self.clone();
        c.schedule.t_prog = Some(self.resolved_schedule().t_prog);
        c.epochs = 0;
        c.checkpoint_every = 0;
        c.dataset = None;
        fnv1a(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = Fnv1a::default();
    h.write(bytes);
    h.finish()
}

struct Fnv1a(u64);

impl Default for Fnv1a {
    fn default() -> Self {
        Fnv1a(0xcbf2_9ce4_8422_2325)
    }
}

impl Hasher for Fnv1a {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

/// Hash of a sample's target pixels, used to audit which data reached updates.
pub fn sample_hash(image: &FieldImage) -> u64 {
    let mut h = Fnv1a::default();
    for v in image.values() {
        h.write(&v.to_le_bytes());
    }
    h.finish()
}

/// Models and optimizer state.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub floor_db: f64,
}

impl TrainState {
    /// Fresh models for `height x width` images. The generator's
    /// gradient-flow check runs here.
    pub fn new(config: TrainConfig, height: usize, width: usize, floor_db: f64) -> Result<Self, TrainError> {
        config.validate()?;
        let g_seed: u64 = keyed_rng(config.seed, &[KEY_INIT_G]).gen();
        let d_seed: u64 = keyed_rng(config.seed, &[KEY_INIT_D]).gen();
        let generator = Generator::new(GeneratorConfig::for_image(height, width)?, g_seed)?;
        let discriminator = Discriminator::new(DiscriminatorConfig::default(), d_seed)?;
        Ok(Self {
            opt_g: Adam::new(config.adam(config.lr_g)),
            opt_d: Adam::new(config.adam(config.lr_d)),
            config,
            generator,
            discriminator,
            epoch: 0,
            floor_db,
        })
    }
}

/// Losses of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepReport {
    pub generator: LossReport,
    pub discriminator: f64,
}

fn non_finite(detail: impl Into<String>) -> TrainError {
    TrainError::NonFinite {
        epoch: 0,
        step: 0,
        detail: detail.into(),
    }
}

fn apply_grads(tape: &Tape, store: &mut ParamStore, opt: &mut Adam) -> Result<(), TrainError> {
    store.zero_grad();
    tape.accumulate_param_grads(store);
    if !store.params().iter().all(|p| p.grad.is_finite()) {
        return Err(non_finite("gradient"));
    }
    opt.step(store);
    Ok(())
}

/// One discriminator update on a detached generator output. Each of its two
/// forwards advances the spectral-norm power iteration.
pub fn discriminator_step(
    state: &mut TrainState,
    condition: &Tensor,
    target: &Tensor,
    fake: &Tensor,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let cond = tape.constant(condition.clone());
    let real = tape.constant(target.clone());
    let detached = tape.constant(fake.clone());
    let d_real = state.discriminator.forward(&mut tape, cond, real, true, true)?;
    let d_fake = state.discriminator.forward(&mut tape, cond, detached, true, true)?;
    let loss = adversarial_d(&mut tape, d_real, d_fake)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(non_finite(format!("discriminator loss {value}")));
    }
    tape.backward(loss)?;
    apply_grads(&tape, &mut state.discriminator.store, &mut state.opt_d)?;
    Ok(value)
}

/// Generator forward in training mode. Fails on negative or NaN output.
fn generator_forward(state: &mut TrainState, tape: &mut Tape, input: Tensor) -> Result<Var, TrainError> {
    let x = tape.constant(input);
    let fake = state.generator.forward(tape, x, Mode::Train, true)?;
    if tape.value(fake).data().iter().any(|&v| !(v >= 0.0)) {
        return Err(non_finite("generator output is negative or NaN"));
    }
    Ok(fake)
}

/// Finishes the generator update on `tape`, scoring `fake` through the
/// frozen discriminator.
fn generator_update(
    state: &mut TrainState,
    mut tape: Tape,
    fake: Var,
    condition: Tensor,
    target: Tensor,
) -> Result<LossReport, TrainError> {
    let cond = tape.constant(condition);
    let real = tape.constant(target);
    let scores = state.discriminator.forward(&mut tape, cond, fake, true, false)?;
    let inputs = GeneratorLossInputs {
        prediction: fake,
        target: Some(real),
        fake_scores: Some(scores),
    };
    let (loss, report) = total_generator_loss(&mut tape, inputs, &state.config.weights)?;
    if !report.is_finite() {
        return Err(non_finite(format!("generator loss {report:?}")));
    }
    tape.backward(loss)?;
    apply_grads(&tape, &mut state.generator.store, &mut state.opt_g)?;
    Ok(report)
}

/// One generator update with the discriminator frozen.
pub fn generator_step(state: &mut TrainState, batch: &[&SparseSample]) -> Result<LossReport, TrainError> {
    let mut tape = Tape::new();
    let fake = generator_forward(state, &mut tape, dataset::input_tensor(batch))?;
    generator_update(
        state,
        tape,
        fake,
        dataset::condition_tensor(batch),
        dataset::target_tensor(batch),
    )
}

/// One discriminator update (when `update_d`) followed by one generator
/// update, sharing a single generator forward.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&SparseSample],
    update_d: bool,
) -> Result<StepReport, TrainError> {
    let condition = dataset::condition_tensor(batch);
    let target = dataset::target_tensor(batch);
    let mut tape = Tape::new();
    let fake = generator_forward(state, &mut tape, dataset::input_tensor(batch))?;
    let discriminator = if update_d {
        let fake_value = tape.value(fake).clone();
        discriminator_step(state, &condition, &target, &fake_value)?
    } else {
        f64::NAN
    };
    let generator = generator_update(state, tape, fake, condition, target)?;
    Ok(StepReport {
        generator,
        discriminator,
    })
}

/// Per-epoch record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub rho: f64,
    /// Observed row count of every training mask this epoch.
    pub row_counts: Vec<usize>,
    pub mean_generator_loss: f64,
    pub mean_discriminator_loss: f64,
    pub val_rel_error_percent: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub epochs: Vec<EpochSummary>,
    /// `(epoch, step, report)` for every step.
    pub steps: Vec<(usize, usize, StepReport)>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    /// Dataset indices whose data entered a parameter update.
    pub updated_indices: BTreeSet<usize>,
    /// Target hashes of every sample that entered a parameter update.
    pub update_hashes: BTreeSet<u64>,
}

impl TrainOutcome {
    pub fn log_csv(&self) -> String {
        let mut s = String::from(LossReport::CSV_HEADER);
        s.push('\n');
        for (e, k, r) in &self.steps {
            s.push_str(&r.generator.csv_row(*e, *k));
            s.push('\n');
        }
        s
    }

    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,rho,mean_generator_loss,mean_discriminator_loss,val_rel_error_percent\n");
        for e in &self.epochs {
            let val = e.val_rel_error_percent.map_or(String::new(), |v| format!("{v:e}"));
            s.push_str(&format!(
                "{},{},{:e},{:e},{}\n",
                e.epoch, e.rho, e.mean_generator_loss, e.mean_discriminator_loss, val
            ));
        }
        s
    }

    pub fn final_val_error(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.val_rel_error_percent)
    }
}

/// Where and how often to write artifacts.
#[derive(Debug, Clone, Default)]
pub struct TrainOutput {
    pub dir: Option<PathBuf>,
}

/// Reconstructs one image in evaluation mode, clamped to `[0, 1]`.
pub fn reconstruct(generator: &mut Generator, sample: &SparseSample) -> Result<FieldImage, TrainError> {
    let input = dataset::input_tensor(&[sample]);
    let out = generator.infer(&input)?;
    let (h, w) = (sample.mask.height(), sample.mask.width());
    let values = out.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Ok(FieldImage::new(h, w, values).expect("clamped output"))
}

/// Single-line (source row) reconstruction metrics over `indices`, plus
/// per-line tables for `lines` rows drawn with `seed`.
pub fn evaluate(
    generator: &mut Generator,
    data: &Dataset,
    indices: &[usize],
    lines: usize,
    seed: u64,
) -> Result<(EvalReport, Vec<FieldImage>), TrainError> {
    let mut samples = Vec::new();
    let mut preds = Vec::new();
    let mut line_tables = Vec::new();
    for &i in indices {
        let entry = &data.entries[i];
        let pred = reconstruct(generator, &entry.single_line())?;
        samples.push(SampleMetrics::compute(i, &pred, &entry.target)?);
        if lines > 0 {
            let mut rng = keyed_rng(seed, &[KEY_LINES, i as u64]);
            let mut rows: Vec<usize> = (0..data.height).collect();
            rows.shuffle(&mut rng);
            rows.truncate(lines.min(data.height));
            line_tables.push((i, metrics::line_profile_compare(&pred, &entry.target, &rows)?));
        }
        preds.push(pred);
    }
    let mut report = EvalReport::from_samples(samples);
    report.lines = line_tables;
    Ok((report, preds))
}

fn check_shape(state: &TrainState, data: &Dataset) -> Result<(), TrainError> {
    let g = &state.generator.config;
    if (g.height, g.width) != (data.height, data.width) {
        return Err(TrainError::Config(format!(
            "model expects {}x{} images, dataset holds {}x{}",
            g.height, g.width, data.height, data.width
        )));
    }
    if data.is_empty() {
        return Err(TrainError::Data(DatasetError::InvalidConfig("dataset is empty".into())));
    }
    Ok(())
}

/// Trains from scratch.
pub fn train(config: &TrainConfig, data: &Dataset, out: &TrainOutput) -> Result<TrainOutcome, TrainError> {
    let state = TrainState::new(config.clone(), data.height, data.width, data.floor_db)?;
    run(state, data, out)
}

/// Continues from a checkpoint; `config.epochs` may extend the run.
pub fn resume(
    config: &TrainConfig,
    checkpoint: &Path,
    data: &Dataset,
    out: &TrainOutput,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let mut state = load_checkpoint(checkpoint)?;
    if state.config.config_hash() != config.config_hash() {
        return Err(TrainError::Config(
            "checkpoint was produced with a different training configuration".into(),
        ));
    }
    state.config = config.clone();
    run(state, data, out)
}

fn run(mut state: TrainState, data: &Dataset, out: &TrainOutput) -> Result<TrainOutcome, TrainError> {
    check_shape(&state, data)?;
    let cfg = state.config.clone();
    let sched = cfg.resolved_schedule();
    let (train_idx, val_idx) = dataset::split_indices(data.len(), cfg.val_fraction);
    if train_idx.is_empty() {
        return Err(TrainError::Data(DatasetError::InvalidConfig("no training samples".into())));
    }
    if let Some(dir) = &out.dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut outcome = TrainOutcome {
        state: state.clone(),
        epochs: Vec::new(),
        steps: Vec::new(),
        train_indices: train_idx.clone(),
        val_indices: val_idx.clone(),
        updated_indices: BTreeSet::new(),
        update_hashes: BTreeSet::new(),
    };
    for epoch in state.epoch..cfg.epochs {
        let rho = progressive_rho(epoch, &sched);
        let mut order = train_idx.clone();
        order.shuffle(&mut keyed_rng(cfg.seed, &[KEY_SHUFFLE, epoch as u64]));
        let mut samples = Vec::with_capacity(order.len());
        for &i in &order {
            let e = &data.entries[i];
            let mut rng = keyed_rng(cfg.seed, &[KEY_ROWS, epoch as u64, i as u64]);
            let rows = sample_rows(rho, data.height, e.source_row, &mut rng);
            samples.push(e.sparse(&rows)?);
        }
        let row_counts = samples.iter().map(|s| s.rows.len()).collect();
        let (mut g_sum, mut d_sum, mut n) = (0.0, 0.0, 0usize);
        for (k, chunk) in samples.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&SparseSample> = chunk.iter().collect();
            let report = train_step(&mut state, &batch, true).map_err(|e| match e {
                TrainError::NonFinite { detail, .. } => TrainError::NonFinite {
                    epoch,
                    step: k,
                    detail,
                },
                other => other,
            })?;
            for (j, s) in chunk.iter().enumerate() {
                outcome.updated_indices.insert(order[k * cfg.batch_size + j]);
                outcome.update_hashes.insert(sample_hash(s.target.as_ref().expect("target")));
            }
            g_sum += report.generator.total;
            d_sum += report.discriminator;
            n += 1;
            outcome.steps.push((epoch, k, report));
        }
        let val_rel_error_percent = if val_idx.is_empty() {
            None
        } else {
            let (report, _) = evaluate(&mut state.generator, data, &val_idx, 0, cfg.seed)?;
            Some(report.rel_error_percent.mean)
        };
        state.epoch = epoch + 1;
        outcome.epochs.push(EpochSummary {
            epoch,
            rho,
            row_counts,
            mean_generator_loss: g_sum / n as f64,
            mean_discriminator_loss: d_sum / n as f64,
            val_rel_error_percent,
        });
        if let Some(dir) = &out.dir {
            if cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0 {
                save_checkpoint(&dir.join(format!("checkpoint_epoch{}.twc", state.epoch)), &state)?;
            }
        }
    }
    if let Some(dir) = &out.dir {
        save_checkpoint(&dir.join("final.twc"), &state)?;
        checkpoint::write_atomic(&dir.join("train_log.csv"), outcome.log_csv().as_bytes())?;
        checkpoint::write_atomic(&dir.join("epochs.csv"), outcome.epochs_csv().as_bytes())?;
    }
    outcome.state = state;
    Ok(outcome)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GammaRow {
    pub gamma: f64,
    pub val_rel_error_percent: f64,
}

/// Trains one model per physics weight, everything else fixed.
pub fn gamma_sweep(config: &TrainConfig, data: &Dataset, gammas: &[f64]) -> Result<Vec<GammaRow>, TrainError> {
    gammas
        .iter()
        .map(|&gamma| {
            let mut cfg = config.clone();
            cfg.weights.lambda_physics = gamma;
            let outcome = train(&cfg, data, &TrainOutput::default())?;
            let val = outcome
                .final_val_error()
                .ok_or_else(|| TrainError::Config("gamma sweep needs a validation split".into()))?;
            Ok(GammaRow {
                gamma,
                val_rel_error_percent: val,
            })
        })
        .collect()
}

pub fn gamma_csv(rows: &[GammaRow]) -> String {
    let mut s = String::from("gamma,val_rel_error_percent\n");
    for r in rows {
        s.push_str(&format!("{},{:e}\n", r.gamma, r.val_rel_error_percent));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub floor_db: f64,
    pub train: TrainConfig,
}

const MANIFEST: &str = "manifest";

fn split_u64(v: u64) -> Tensor {
    Tensor::new(vec![2], vec![(v & 0xffff_ffff) as f64, (v >> 32) as f64]).expect("two halves")
}

fn join_u64(t: &Tensor) -> Result<u64, CheckpointError> {
    match t.data() {
        [lo, hi] => Ok((*lo as u64) | ((*hi as u64) << 32)),
        _ => Err(CheckpointError::Malformed("u64 entry must have two halves".into())),
    }
}

fn adam_tensors(prefix: &str, opt: &Adam, store: &ParamStore) -> Vec<(String, Tensor)> {
    let mut out = vec![(format!("{prefix}.t"), Tensor::scalar(opt.t as f64))];
    for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
        let shape = store.params()[i].value.shape().to_vec();
        out.push((format!("{prefix}.m.{i}"), Tensor::new(shape.clone(), m.clone()).expect("moment shape")));
        out.push((format!("{prefix}.v.{i}"), Tensor::new(shape, v.clone()).expect("moment shape")));
    }
    out
}

fn load_adam(
    prefix: &str,
    opt: &mut Adam,
    store: &ParamStore,
    find: &dyn Fn(&str) -> Result<Tensor, CheckpointError>,
) -> Result<(), CheckpointError> {
    opt.t = find(&format!("{prefix}.t"))?.item() as u64;
    opt.m.clear();
    opt.v.clear();
    if opt.t > 0 {
        for i in 0..store.len() {
            opt.m.push(find(&format!("{prefix}.m.{i}"))?.into_data());
            opt.v.push(find(&format!("{prefix}.v.{i}"))?.into_data());
        }
    }
    Ok(())
}

pub fn checkpoint_tensors(state: &TrainState) -> Vec<(String, Tensor)> {
    let manifest = Manifest {
        generator: state.generator.config.clone(),
        discriminator: state.discriminator.config.clone(),
        floor_db: state.floor_db,
        train: state.config.clone(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = vec![(
        MANIFEST.to_string(),
        Tensor::new(vec![json.len()], json.iter().map(|&b| f64::from(b)).collect()).expect("bytes"),
    )];
    out.extend(store_tensors(&state.generator.store));
    out.extend(store_tensors(&state.discriminator.store));
    out.extend(adam_tensors("opt_g", &state.opt_g, &state.generator.store));
    out.extend(adam_tensors("opt_d", &state.opt_d, &state.discriminator.store));
    out.push(("meta.epoch".into(), Tensor::scalar(state.epoch as f64)));
    out.push(("meta.seed".into(), split_u64(state.config.seed)));
    out.push(("meta.config_hash".into(), split_u64(state.config.config_hash())));
    out
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<(), TrainError> {
    checkpoint::save(path, &checkpoint_tensors(state))?;
    Ok(())
}

pub fn read_manifest(tensors: &[(String, Tensor)]) -> Result<Manifest, CheckpointError> {
    let t = tensors
        .iter()
        .find(|(n, _)| n == MANIFEST)
        .map(|(_, t)| t)
        .ok_or_else(|| CheckpointError::Missing(MANIFEST.into()))?;
    let bytes: Vec<u8> = t.data().iter().map(|&b| b as u8).collect();
    serde_json::from_slice(&bytes).map_err(|e| CheckpointError::Malformed(e.to_string()))
}

pub fn state_from_tensors(tensors: &[(String, Tensor)]) -> Result<TrainState, TrainError> {
    let manifest = read_manifest(tensors)?;
    let find = |name: &str| {
        tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    };
    let mut generator = Generator::build(manifest.generator.clone(), 0)?;
    let mut discriminator = Discriminator::new(manifest.discriminator.clone(), 0)?;
    load_store_tensors(&mut generator.store, tensors)?;
    load_store_tensors(&mut discriminator.store, tensors)?;
    let cfg = manifest.train.clone();
    let mut opt_g = Adam::new(cfg.adam(cfg.lr_g));
    let mut opt_d = Adam::new(cfg.adam(cfg.lr_d));
    load_adam("opt_g", &mut opt_g, &generator.store, &find)?;
    load_adam("opt_d", &mut opt_d, &discriminator.store, &find)?;
    let seed = join_u64(&find("meta.seed")?)?;
    let hash = join_u64(&find("meta.config_hash")?)?;
    if seed != cfg.seed || hash != cfg.config_hash() {
        return Err(TrainError::Checkpoint(CheckpointError::Malformed(
            "seed or configuration hash disagrees with the manifest".into(),
        )));
    }
    Ok(TrainState {
        epoch: find("meta.epoch")?.item() as usize,
        floor_db: manifest.floor_db,
        config: cfg,
        generator,
        discriminator,
        opt_g,
        opt_d,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState, TrainError> {
    state_from_tensors(&checkpoint::load(path)?)
}
