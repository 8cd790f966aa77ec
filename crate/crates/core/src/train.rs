//! Training engine: Adam, cosine annealing, layer-wise LR decay, loss
//! logging, checkpointing, and the pretrain/finetune loops.
//!
//! Determinism contract: given the same seed, config, and data, loss curves
//! match bitwise on one machine (within 1e-6 relative across machines), and
//! resuming from a checkpoint continues the curve exactly as an
//! uninterrupted run would. Batch sampling and masking draw from separate
//! fixed RNG streams captured in every checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::ArrayD;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::mae::{sample_mask, MaeModel};
use crate::nn::Module;
use crate::rng::{seeded, RngState, STREAM_DATA, STREAM_MASK};
use crate::unetr::{labels_to_array, seg_loss, SegModel};
use crate::vit::stack_tokens;
use crate::volume::{patchify, Volume};
use crate::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const PRETRAIN_LR: f64 = 6.4e-3;
pub const FINETUNE_LR: f64 = 3.44e-2;
pub const LLRD_FACTOR: f64 = 0.75;
pub const DEFAULT_PRETRAIN_STEPS: u64 = 2000;
pub const DEFAULT_FINETUNE_STEPS: u64 = 1000;
pub const DEFAULT_BATCH: usize = 2;
pub const DEFAULT_CKPT_EVERY: u64 = 100;

// ============================================================================
// Schedule
// ============================================================================

/// Cosine annealing: lrMin + 0.5 (lr0 - lrMin)(1 + cos(pi t / T)).
/// Steps past T clamp to lrMin with a warning.
pub fn cosine_lr(t: u64, total: u64, lr0: f64, lr_min: f64) -> f64 {
    assert!(total >= 1, "schedule length must be >= 1");
    // Endpoints are pinned; the cosine expression lands 1 ulp off lr0 at
    // t = 0 whenever lr_min > 0.
    if t == 0 {
        return lr0;
    }
    if t > total {
        log::warn!("cosine_lr: step {t} beyond schedule length {total}, clamping to lr_min");
        return lr_min;
    }
    let phase = std::f64::consts::PI * t as f64 / total as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + phase.cos())
}

/// Layer-wise LR decay multipliers for the encoder of a fine-tuned model.
/// Layer i (1 = shallowest of L) gets f^(L+1-i); the patch embedding and
/// position table get f^(L+1); the final encoder norm travels with layer L;
/// everything else (decoder/head) gets 1.0.
pub fn llrd_multiplier(name: &str, depth: usize, factor: f64) -> f64 {
    let l = depth as i32;
    if let Some(rest) = name.strip_prefix("encoder.") {
        if rest.starts_with("embed.") || rest == "pos" || rest.starts_with("pos.") {
            return factor.powi(l + 1);
        }
        if let Some(block) = rest.strip_prefix("block") {
            let digits: String = block.chars().take_while(|c| c.is_ascii_digit()).collect();
            if let Ok(i) = digits.parse::<i32>() {
                return factor.powi(l + 1 - i);
            }
        }
        if rest.starts_with("final_norm.") {
            return factor.powi(1);
        }
    }
    1.0
}

/// Multiplier table for every parameter of a module.
pub fn llrd_multipliers<M: Module>(
    module: &mut M,
    depth: usize,
    factor: f64,
) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    module.visit_params("", &mut |name: &str, _p: &mut crate::nn::Param| {
        out.insert(name.to_string(), llrd_multiplier(name, depth, factor));
    });
    out
}

// ============================================================================
// Adam
// ============================================================================

#[derive(Debug, Clone)]
pub struct AdamSlot {
    pub m: ArrayD<f64>,
    pub v: ArrayD<f64>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub t: u64,
    pub state: BTreeMap<String, AdamSlot>,
    /// Effective LR applied to each parameter on the latest step.
    pub last_lrs: BTreeMap<String, f64>,
}

impl Adam {
    pub fn new() -> Self {
        Adam { t: 0, state: BTreeMap::new(), last_lrs: BTreeMap::new() }
    }

    /// One update over every parameter; `multipliers` scales the base LR per
    /// parameter name (absent name = 1.0). Gradients are left for the caller
    /// to zero.
    pub fn step<M: Module>(
        &mut self,
        module: &mut M,
        base_lr: f64,
        multipliers: Option<&BTreeMap<String, f64>>,
    ) {
        self.t += 1;
        let t = self.t;
        let bc1 = 1.0 - BETA1.powi(t as i32);
        let bc2 = 1.0 - BETA2.powi(t as i32);
        let state = &mut self.state;
        let last = &mut self.last_lrs;
        module.visit_params("", &mut |name: &str, p: &mut crate::nn::Param| {
            let mult = multipliers.and_then(|m| m.get(name)).copied().unwrap_or(1.0);
            let lr = base_lr * mult;
            last.insert(name.to_string(), lr);
            let slot = state.entry(name.to_string()).or_insert_with(|| AdamSlot {
                m: ArrayD::zeros(p.value.raw_dim()),
                v: ArrayD::zeros(p.value.raw_dim()),
            });
            let pv = p.value.as_slice_mut().expect("contiguous value");
            let pg = p.grad.as_slice().expect("contiguous grad");
            let ms = slot.m.as_slice_mut().unwrap();
            let vs = slot.v.as_slice_mut().unwrap();
            for i in 0..pv.len() {
                let g = pg[i];
                ms[i] = BETA1 * ms[i] + (1.0 - BETA1) * g;
                vs[i] = BETA2 * vs[i] + (1.0 - BETA2) * g * g;
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                pv[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        });
    }

    /// Effective LR applied to `name` on the most recent step.
    pub fn effective_lr(&self, name: &str) -> Option<f64> {
        self.last_lrs.get(name).copied()
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

// ============================================================================
// Loss curve CSV
// ============================================================================

pub struct LossLog {
    path: PathBuf,
    rows: Vec<(u64, String, f64, f64)>,
}

impl LossLog {
    /// Start a fresh log (truncates any existing file).
    pub fn create(path: &Path) -> Result<Self> {
        let log = LossLog { path: path.to_path_buf(), rows: Vec::new() };
        log.flush()?;
        Ok(log)
    }

    /// Reopen an existing log for resumption, dropping rows past `step`.
    pub fn resume(path: &Path, step: u64) -> Result<Self> {
        let mut rows = Vec::new();
        if path.exists() {
            let mut rdr = csv::Reader::from_path(path)?;
            for rec in rdr.records() {
                let rec = rec.map_err(|e| Error::Format(format!("loss csv: {e}")))?;
                let s: u64 = rec[0]
                    .parse()
                    .map_err(|e| Error::Format(format!("loss csv step: {e}")))?;
                if s <= step {
                    rows.push((
                        s,
                        rec[1].to_string(),
                        rec[2].parse().map_err(|e| Error::Format(format!("loss csv loss: {e}")))?,
                        rec[3].parse().map_err(|e| Error::Format(format!("loss csv lr: {e}")))?,
                    ));
                }
            }
        }
        let log = LossLog { path: path.to_path_buf(), rows };
        log.flush()?;
        Ok(log)
    }

    pub fn log(&mut self, step: u64, phase: &str, loss: f64, lr: f64) -> Result<()> {
        self.rows.push((step, phase.to_string(), loss, lr));
        // Rewriting wholesale keeps the file well-formed at any instant;
        // curves here are thousands of rows at most.
        self.flush()
    }

    fn flush(&self) -> Result<()> {
        let tmp = self.path.with_extension("csv.tmp");
        {
            let mut w = csv::Writer::from_path(&tmp)?;
            w.write_record(["step", "phase", "loss", "lr"])?;
            for (s, p, l, r) in &self.rows {
                w.write_record([
                    s.to_string(),
                    p.clone(),
                    format!("{l:.17e}"),
                    format!("{r:.17e}"),
                ])?;
            }
            w.flush()?;
        }
        fs::rename(&tmp, &self.path)?;
        Ok(())
    }

    pub fn rows(&self) -> &[(u64, String, f64, f64)] {
        &self.rows
    }
}

/// Read a loss CSV back as (step, phase, loss, lr) rows.
pub fn read_loss_csv(path: &Path) -> Result<Vec<(u64, String, f64, f64)>> {
    let mut rows = Vec::new();
    let mut rdr = csv::Reader::from_path(path)?;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Format(format!("loss csv: {e}")))?;
        rows.push((
            rec[0].parse().map_err(|e| Error::Format(format!("{e}")))?,
            rec[1].to_string(),
            rec[2].parse().map_err(|e| Error::Format(format!("{e}")))?,
            rec[3].parse().map_err(|e| Error::Format(format!("{e}")))?,
        ));
    }
    Ok(rows)
}

// ============================================================================
// Checkpoint plumbing
// ============================================================================

/// Capture module parameters and optimizer moments into a checkpoint.
pub fn snapshot<M: Module>(
    kind: &str,
    step: u64,
    meta: serde_json::Value,
    module: &mut M,
    adam: &Adam,
    rngs: &BTreeMap<String, RngState>,
) -> Checkpoint {
    let mut ck = Checkpoint::new(kind, step, meta);
    module.visit_params("", &mut |name: &str, p: &mut crate::nn::Param| {
        ck.insert(&format!("param/{name}"), p.value.clone());
    });
    for (name, slot) in &adam.state {
        ck.insert(&format!("adam_m/{name}"), slot.m.clone());
        ck.insert(&format!("adam_v/{name}"), slot.v.clone());
    }
    ck.rng = rngs.clone();
    ck
}

/// Restore parameters into a module; every module parameter must be present
/// with a matching shape.
pub fn restore_params<M: Module>(ck: &Checkpoint, module: &mut M) -> Result<()> {
    let mut err: Option<Error> = None;
    module.visit_params("", &mut |name: &str, p: &mut crate::nn::Param| {
        if err.is_some() {
            return;
        }
        match ck.tensors.get(&format!("param/{name}")) {
            Some(t) if t.shape() == p.value.shape() => p.value.assign(t),
            Some(t) => {
                err = Some(Error::Format(format!(
                    "checkpoint tensor '{name}' has shape {:?}, model expects {:?}",
                    t.shape(),
                    p.value.shape()
                )))
            }
            None => err = Some(Error::Format(format!("checkpoint missing parameter '{name}'"))),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Restore optimizer moments and step counter.
pub fn restore_adam<M: Module>(ck: &Checkpoint, module: &mut M, adam: &mut Adam) -> Result<()> {
    adam.t = ck.step;
    adam.state.clear();
    let mut err: Option<Error> = None;
    let state = &mut adam.state;
    module.visit_params("", &mut |name: &str, p: &mut crate::nn::Param| {
        if err.is_some() {
            return;
        }
        let m = ck.tensors.get(&format!("adam_m/{name}"));
        let v = ck.tensors.get(&format!("adam_v/{name}"));
        match (m, v) {
            (Some(m), Some(v)) if m.shape() == p.value.shape() && v.shape() == p.value.shape() => {
                state.insert(name.to_string(), AdamSlot { m: m.clone(), v: v.clone() });
            }
            _ => {
                err = Some(Error::Format(format!(
                    "checkpoint missing or misshapen optimizer state for '{name}'"
                )))
            }
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Copy pretrained encoder weights from a reconstruction checkpoint into a
/// segmentation model. Returns the number of tensors transferred.
pub fn load_encoder_from_mae(seg: &mut SegModel, ck: &Checkpoint) -> Result<usize> {
    if ck.kind != "mae" {
        return Err(Error::Config(format!(
            "expected a pretraining checkpoint, got kind '{}'",
            ck.kind
        )));
    }
    let mut copied = 0usize;
    let mut err: Option<Error> = None;
    seg.visit_params("", &mut |name: &str, p: &mut crate::nn::Param| {
        if err.is_some() || !name.starts_with("encoder.") {
            return;
        }
        match ck.tensors.get(&format!("param/{name}")) {
            Some(t) if t.shape() == p.value.shape() => {
                p.value.assign(t);
                copied += 1;
            }
            Some(t) => {
                err = Some(Error::Format(format!(
                    "pretrained '{name}' has shape {:?}, segmentation encoder expects {:?}",
                    t.shape(),
                    p.value.shape()
                )))
            }
            None => {
                err = Some(Error::Format(format!(
                    "pretraining checkpoint lacks encoder tensor '{name}'"
                )))
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    Ok(copied)
}

// ============================================================================
// Engine config and loops
// ============================================================================

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EngineConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub llrd_factor: Option<f64>,
    pub seed: u64,
    pub ckpt_every: u64,
    /// Optimizer-step budget for this invocation. The schedule still spans
    /// `steps`, a checkpoint is written at the stop point, and a later call
    /// with the same config resumes from it. `None` runs to completion.
    #[serde(default)]
    pub max_steps_per_run: Option<u64>,
}

impl EngineConfig {
    pub fn pretrain_defaults(seed: u64) -> Self {
        EngineConfig {
            steps: DEFAULT_PRETRAIN_STEPS,
            batch_size: DEFAULT_BATCH,
            lr0: PRETRAIN_LR,
            lr_min: 0.0,
            llrd_factor: None,
            seed,
            ckpt_every: DEFAULT_CKPT_EVERY,
            max_steps_per_run: None,
        }
    }

    pub fn finetune_defaults(seed: u64) -> Self {
        EngineConfig {
            steps: DEFAULT_FINETUNE_STEPS,
            batch_size: DEFAULT_BATCH,
            lr0: FINETUNE_LR,
            lr_min: 0.0,
            llrd_factor: Some(LLRD_FACTOR),
            seed,
            ckpt_every: DEFAULT_CKPT_EVERY,
            max_steps_per_run: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(self.lr0 > 0.0) || self.lr_min < 0.0 || self.lr_min > self.lr0 {
            return Err(Error::Config(format!(
                "need lr0 > 0 and 0 <= lr_min <= lr0, got lr0={} lr_min={}",
                self.lr0, self.lr_min
            )));
        }
        if let Some(f) = self.llrd_factor {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("llrd factor {f} outside (0, 1]")));
            }
        }
        if self.max_steps_per_run == Some(0) {
            return Err(Error::Config("max_steps_per_run must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps_run: u64,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
}

fn stop_step(start: u64, cfg: &EngineConfig) -> u64 {
    match cfg.max_steps_per_run {
        Some(m) => cfg.steps.min(start.saturating_add(m)),
        None => cfg.steps,
    }
}

fn non_finite_abort(step: u64, loss: f64) -> Error {
    Error::Numeric(format!(
        "non-finite loss {loss} at step {step}; aborted, last checkpoint retained"
    ))
}

/// Pretrain a reconstruction model on an unlabeled image pool.
///
/// Every step samples `batch_size` volumes (with replacement) from the data
/// stream and one mask plan from the mask stream shared across the batch.
/// If `ckpt_path` already holds a compatible checkpoint, training resumes
/// from it.
pub fn pretrain_mae(
    model: &mut MaeModel,
    pool: &[Volume],
    cfg: &EngineConfig,
    ckpt_path: &Path,
    loss_csv: &Path,
) -> Result<TrainReport> {
    cfg.validate()?;
    if pool.is_empty() {
        return Err(Error::Precondition("pretraining pool is empty".into()));
    }
    let tokens: Vec<ndarray::Array2<f64>> = pool
        .iter()
        .map(|v| patchify(v, model.encoder.cfg.patch_size).map(|s| s.tokens))
        .collect::<Result<_>>()?;

    let mut adam = Adam::new();
    let mut data_rng = seeded(cfg.seed, STREAM_DATA);
    let mut mask_rng = seeded(cfg.seed, STREAM_MASK);
    let mut start_step = 0u64;
    if ckpt_path.exists() {
        let ck = Checkpoint::load(ckpt_path)?;
        if ck.kind != "mae" {
            return Err(Error::Config(format!(
                "cannot resume: checkpoint kind '{}' is not 'mae'",
                ck.kind
            )));
        }
        restore_params(&ck, model)?;
        restore_adam(&ck, model, &mut adam)?;
        data_rng = ck.rng["data"].restore()?;
        mask_rng = ck.rng["mask"].restore()?;
        start_step = ck.step;
        log::info!("resuming pretraining from step {start_step}");
    }
    // Opening for create would truncate the rows the resumed run keeps.
    let mut log = if start_step > 0 {
        LossLog::resume(loss_csv, start_step)?
    } else {
        LossLog::create(loss_csv)?
    };

    let meta = serde_json::json!({
        "vit": model.encoder.cfg,
        "mae": model.cfg,
        "engine": cfg,
    });
    let n_tokens = model.encoder.n_tokens();
    let stop = stop_step(start_step, cfg);
    let mut final_loss = f64::NAN;
    for step in start_step..stop {
        let lr = cosine_lr(step, cfg.steps, cfg.lr0, cfg.lr_min);
        let idx: Vec<usize> =
            (0..cfg.batch_size).map(|_| data_rng.gen_range(0..pool.len())).collect();
        let plan = sample_mask(n_tokens, model.cfg.mask_ratio, &mut mask_rng)?;
        let refs: Vec<&ndarray::Array2<f64>> = idx.iter().map(|&i| &tokens[i]).collect();
        let batch = stack_tokens(&refs)?;
        crate::nn::zero_grads(model);
        let (loss, _, cache) = model.forward(&batch, &plan)?;
        if !loss.is_finite() {
            return Err(non_finite_abort(step, loss));
        }
        model.backward(&cache);
        adam.step(model, lr, None);
        debug_assert_eq!(adam.effective_lr("head.w"), Some(lr));
        log.log(step + 1, "pretrain", loss, lr)?;
        final_loss = loss;
        let done = step + 1;
        if (cfg.ckpt_every > 0 && done % cfg.ckpt_every == 0) || done == stop {
            let mut rngs = BTreeMap::new();
            rngs.insert("data".to_string(), RngState::capture(&data_rng));
            rngs.insert("mask".to_string(), RngState::capture(&mask_rng));
            snapshot("mae", done, meta.clone(), model, &adam, &rngs).save(ckpt_path)?;
        }
    }
    Ok(TrainReport {
        steps_run: stop - start_step,
        final_loss,
        checkpoint: ckpt_path.to_path_buf(),
    })
}

/// Supervised fine-tuning of a segmentation model on labeled pairs.
/// `phase` names the rows in the loss CSV. Resumes from `ckpt_path` when a
/// compatible checkpoint is already there.
pub fn finetune_seg(
    model: &mut SegModel,
    images: &[Volume],
    labels: &[Volume],
    cfg: &EngineConfig,
    ckpt_path: &Path,
    loss_csv: &Path,
    phase: &str,
) -> Result<TrainReport> {
    cfg.validate()?;
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::Precondition(format!(
            "need matching image/label sets, got {} and {}",
            images.len(),
            labels.len()
        )));
    }

    let mut adam = Adam::new();
    let mut data_rng = seeded(cfg.seed, STREAM_DATA);
    let mut start_step = 0u64;
    if ckpt_path.exists() {
        let ck = Checkpoint::load(ckpt_path)?;
        if ck.kind != "seg" {
            return Err(Error::Config(format!(
                "cannot resume: checkpoint kind '{}' is not 'seg'",
                ck.kind
            )));
        }
        restore_params(&ck, model)?;
        restore_adam(&ck, model, &mut adam)?;
        data_rng = ck.rng["data"].restore()?;
        start_step = ck.step;
        log::info!("resuming fine-tuning from step {start_step}");
    }
    let mut log = if start_step > 0 {
        LossLog::resume(loss_csv, start_step)?
    } else {
        LossLog::create(loss_csv)?
    };

    let multipliers = cfg
        .llrd_factor
        .map(|f| llrd_multipliers(model, model.encoder.cfg.depth, f));
    let meta = serde_json::json!({ "vit": model.encoder.cfg, "engine": cfg });
    let stop = stop_step(start_step, cfg);
    let mut final_loss = f64::NAN;
    for step in start_step..stop {
        let lr = cosine_lr(step, cfg.steps, cfg.lr0, cfg.lr_min);
        let idx: Vec<usize> =
            (0..cfg.batch_size).map(|_| data_rng.gen_range(0..images.len())).collect();
        let imgs: Vec<&Volume> = idx.iter().map(|&i| &images[i]).collect();
        let labs: Vec<&Volume> = idx.iter().map(|&i| &labels[i]).collect();
        crate::nn::zero_grads(model);
        let (logits, cache) = model.forward(&imgs)?;
        let y = labels_to_array(&labs)?;
        let (l, dlogits) = seg_loss(&logits, &y)?;
        if !l.total.is_finite() {
            return Err(non_finite_abort(step, l.total));
        }
        model.backward(&dlogits, &cache);
        adam.step(model, lr, multipliers.as_ref());
        if let Some(m) = &multipliers {
            debug_assert_eq!(
                adam.effective_lr("encoder.block01.attn.wq.w"),
                m.get("encoder.block01.attn.wq.w").map(|f| lr * f)
            );
        }
        log.log(step + 1, phase, l.total, lr)?;
        final_loss = l.total;
        let done = step + 1;
        if (cfg.ckpt_every > 0 && done % cfg.ckpt_every == 0) || done == stop {
            let mut rngs = BTreeMap::new();
            rngs.insert("data".to_string(), RngState::capture(&data_rng));
            snapshot("seg", done, meta.clone(), model, &adam, &rngs).save(ckpt_path)?;
        }
    }
    Ok(TrainReport {
        steps_run: stop - start_step,
        final_loss,
        checkpoint: ckpt_path.to_path_buf(),
    })
}

/// Rebuild a segmentation model from a checkpoint (weights only). Accepts
/// fine-tuned ("seg") and semi-supervised ("ssl") checkpoints; for the
/// latter the student weights are used.
pub fn seg_from_checkpoint(ck: &Checkpoint) -> Result<SegModel> {
    if ck.kind != "seg" && ck.kind != "ssl" {
        return Err(Error::Config(format!(
            "expected a segmentation checkpoint, got '{}'",
            ck.kind
        )));
    }
    let vit: crate::vit::VitConfig = serde_json::from_value(ck.meta["vit"].clone())
        .map_err(|e| Error::Format(format!("checkpoint vit config: {e}")))?;
    let mut rng = seeded(0, crate::rng::STREAM_INIT);
    let mut model = SegModel::new(vit, &mut rng)?;
    restore_params(ck, &mut model)?;
    Ok(model)
}

/// Rebuild a reconstruction model from a checkpoint (weights only).
pub fn mae_from_checkpoint(ck: &Checkpoint) -> Result<MaeModel> {
    if ck.kind != "mae" {
        return Err(Error::Config(format!(
            "expected a pretraining checkpoint, got '{}'",
            ck.kind
        )));
    }
    let vit: crate::vit::VitConfig = serde_json::from_value(ck.meta["vit"].clone())
        .map_err(|e| Error::Format(format!("checkpoint vit config: {e}")))?;
    let mae: crate::mae::MaeConfig = serde_json::from_value(ck.meta["mae"].clone())
        .map_err(|e| Error::Format(format!("checkpoint mae config: {e}")))?;
    let mut rng = seeded(0, crate::rng::STREAM_INIT);
    let mut model = MaeModel::new(vit, mae, &mut rng)?;
    restore_params(ck, &mut model)?;
    Ok(model)
}
