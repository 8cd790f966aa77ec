//! Mean-teacher semi-supervised baseline.
//!
//! Training runs in two phases: a supervised warm-up on the labeled cases,
//! then a semi-supervised phase where every step mixes one labeled and one
//! unlabeled sample. A teacher model tracks the student as an exponential
//! moving average and supplies pseudo-labels for weakly augmented unlabeled
//! volumes; the student trains on strongly augmented views against those
//! pseudo-labels, geometrically re-aligned to the strong view.
//!
//! All augmentations are affine resamplings recorded exactly in an
//! [`AugmentationPlan`], so re-running a plan reproduces the same volume
//! bit for bit. Images interpolate trilinearly, labels nearest-neighbor,
//! out-of-bounds fills with zero.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::rng::{seeded, RngState, STREAM_AUG, STREAM_DATA, STREAM_INIT};
use crate::train::{
    cosine_lr, restore_adam, restore_params, snapshot, Adam, LossLog, TrainReport,
    DEFAULT_BATCH, DEFAULT_CKPT_EVERY, FINETUNE_LR,
};
use crate::unetr::{labels_to_array, seg_loss, SegModel};
use crate::volume::{Volume, VolumeKind};
use crate::{Error, Result};

pub const EMA_DECAY: f64 = 0.99;
pub const PSEUDO_WEIGHT: f64 = 1.0;
/// Rotation magnitude (degrees) for both plan kinds.
pub const ROT_DEG: f64 = 10.0;
/// Translation magnitude (voxels, per axis) for both plan kinds.
pub const SHIFT_VOX: f64 = 4.0;
pub const SCALE_LO: f64 = 0.9;
pub const SCALE_HI: f64 = 1.1;
pub const RANDOM_MASK_RATIO: f64 = 0.25;
/// Cell edge for intensity masking, matching the token patch.
pub const MASK_CELL: usize = 16;

// ============================================================================
// Augmentation plans
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugKind {
    Weak,
    Strong,
}

/// One augmentation op with its sampled parameters. Axis indices are
/// 0 = x, 1 = y, 2 = z; angles are degrees; shifts are voxels in (x, y, z).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AugOp {
    Rotate { axis: usize, angle_deg: f64 },
    Scale { factor: f64 },
    Translate { shift: [f64; 3] },
    RandomMask { ratio: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub kind: AugKind,
    pub ops: Vec<AugOp>,
    /// Drives the non-geometric randomness (masking cell choice).
    pub seed: u64,
}

impl AugmentationPlan {
    pub fn identity(kind: AugKind) -> Self {
        AugmentationPlan { kind, ops: Vec::new(), seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        for op in &self.ops {
            match op {
                AugOp::Rotate { axis, angle_deg } => {
                    if *axis > 2 || !angle_deg.is_finite() {
                        return Err(Error::Precondition(format!("bad rotate op {op:?}")));
                    }
                }
                AugOp::Scale { factor } => {
                    if !(*factor > 0.0) || !factor.is_finite() {
                        return Err(Error::Precondition(format!("bad scale op {op:?}")));
                    }
                }
                AugOp::Translate { shift } => {
                    if shift.iter().any(|s| !s.is_finite()) {
                        return Err(Error::Precondition(format!("bad translate op {op:?}")));
                    }
                }
                AugOp::RandomMask { ratio } => {
                    if self.kind != AugKind::Strong {
                        return Err(Error::Precondition(
                            "intensity masking belongs to strong plans only".into(),
                        ));
                    }
                    if !(0.0..=1.0).contains(ratio) {
                        return Err(Error::Precondition(format!("bad mask ratio {ratio}")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Sample a plan of the given kind from `rng`. Weak plans rotate and
/// translate; strong plans additionally scale and mask intensities.
pub fn sample_plan(kind: AugKind, rng: &mut ChaCha8Rng) -> AugmentationPlan {
    let axis = rng.gen_range(0..3usize);
    let angle = rng.gen_range(-ROT_DEG..ROT_DEG);
    let mut ops = vec![AugOp::Rotate { axis, angle_deg: angle }];
    if kind == AugKind::Strong {
        ops.push(AugOp::Scale { factor: rng.gen_range(SCALE_LO..SCALE_HI) });
    }
    let shift = [
        rng.gen_range(-SHIFT_VOX..SHIFT_VOX),
        rng.gen_range(-SHIFT_VOX..SHIFT_VOX),
        rng.gen_range(-SHIFT_VOX..SHIFT_VOX),
    ];
    ops.push(AugOp::Translate { shift });
    if kind == AugKind::Strong {
        ops.push(AugOp::RandomMask { ratio: RANDOM_MASK_RATIO });
    }
    AugmentationPlan { kind, ops, seed: rng.gen() }
}

/// Sample a plan that keeps at least one foreground voxel of `label` in
/// bounds. One rejected plan is resampled; a second rejection is an error.
pub fn sample_valid_plan(
    kind: AugKind,
    label: Option<&Volume>,
    rng: &mut ChaCha8Rng,
) -> Result<AugmentationPlan> {
    let plan = sample_plan(kind, rng);
    let needs_check = label.map(|l| l.data.iter().any(|&v| v != 0.0)).unwrap_or(false);
    if !needs_check || foreground_survives(label.unwrap(), &plan)? {
        return Ok(plan);
    }
    log::warn!("augmentation left no foreground in bounds, resampling once");
    let plan = sample_plan(kind, rng);
    if foreground_survives(label.unwrap(), &plan)? {
        return Ok(plan);
    }
    Err(Error::Generation(
        "augmentation pushed the entire foreground out of bounds twice in a row".into(),
    ))
}

/// True when augmenting `label` under `plan` leaves any foreground voxel.
pub fn foreground_survives(label: &Volume, plan: &AugmentationPlan) -> Result<bool> {
    let aug = augment(label, plan)?;
    Ok(aug.data.iter().any(|&v| v != 0.0))
}

// ============================================================================
// Affine geometry
// ============================================================================

/// Affine map about the volume center: p' = a (p - c) + c + t, with points
/// ordered (x, y, z) in voxel units.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub a: [[f64; 3]; 3],
    pub t: [f64; 3],
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn matvec(a: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    [
        a[0][0] * v[0] + a[0][1] * v[1] + a[0][2] * v[2],
        a[1][0] * v[0] + a[1][1] * v[1] + a[1][2] * v[2],
        a[2][0] * v[0] + a[2][1] * v[1] + a[2][2] * v[2],
    ]
}

fn rot_matrix(axis: usize, angle_deg: f64) -> [[f64; 3]; 3] {
    let (s, c) = angle_deg.to_radians().sin_cos();
    match axis {
        0 => [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
        1 => [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]],
        2 => [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
        _ => panic!("rotation axis {axis} out of range"),
    }
}

impl Affine {
    pub fn identity() -> Self {
        Affine { a: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], t: [0.0; 3] }
    }

    /// Replace self with `op followed by self`, i.e. self := op_after(self).
    fn then(&mut self, a: [[f64; 3]; 3], t: [f64; 3]) {
        self.a = matmul(&a, &self.a);
        let at = matvec(&a, &self.t);
        self.t = [at[0] + t[0], at[1] + t[1], at[2] + t[2]];
    }

    /// outer composed after inner: (outer . inner)(p) = outer(inner(p)).
    pub fn compose(outer: &Affine, inner: &Affine) -> Affine {
        let mut m = inner.clone();
        m.then(outer.a, outer.t);
        m
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let ap = matvec(&self.a, &p);
        [ap[0] + self.t[0], ap[1] + self.t[1], ap[2] + self.t[2]]
    }

    pub fn max_deviation_from_identity(&self) -> f64 {
        let mut m: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                m = m.max((self.a[i][j] - want).abs());
            }
            m = m.max(self.t[i].abs());
        }
        m
    }
}

fn op_affine(op: &AugOp, inverted: bool) -> Option<([[f64; 3]; 3], [f64; 3])> {
    match op {
        AugOp::Rotate { axis, angle_deg } => {
            let a = if inverted { -angle_deg } else { *angle_deg };
            Some((rot_matrix(*axis, a), [0.0; 3]))
        }
        AugOp::Scale { factor } => {
            let f = if inverted { 1.0 / factor } else { *factor };
            Some(([[f, 0.0, 0.0], [0.0, f, 0.0], [0.0, 0.0, f]], [0.0; 3]))
        }
        AugOp::Translate { shift } => {
            let s = if inverted {
                [-shift[0], -shift[1], -shift[2]]
            } else {
                *shift
            };
            Some(([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], s))
        }
        AugOp::RandomMask { .. } => None,
    }
}

/// Forward affine of the plan's geometric ops, applied in listed order.
pub fn plan_forward(plan: &AugmentationPlan) -> Affine {
    let mut m = Affine::identity();
    for op in &plan.ops {
        if let Some((a, t)) = op_affine(op, false) {
            m.then(a, t);
        }
    }
    m
}

/// Exact inverse of [`plan_forward`], built from per-op inverses (negated
/// angles and shifts, reciprocal factors) rather than matrix inversion.
pub fn plan_inverse(plan: &AugmentationPlan) -> Affine {
    let mut m = Affine::identity();
    for op in plan.ops.iter().rev() {
        if let Some((a, t)) = op_affine(op, true) {
            m.then(a, t);
        }
    }
    m
}

/// Resample `v` through `out_to_in`, which maps each output voxel center to
/// the input coordinate it reads from. Images interpolate trilinearly,
/// discrete volumes nearest-neighbor; out-of-bounds reads produce 0.
pub fn apply_affine(v: &Volume, out_to_in: &Affine) -> Result<Volume> {
    let (nz, ny, nx) = v.data.dim();
    let c = [(nx as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0, (nz as f64 - 1.0) / 2.0];
    let discrete = v.kind.is_discrete();
    let mut out = ndarray::Array3::<f32>::zeros((nz, ny, nx));
    for iz in 0..nz {
        for iy in 0..ny {
            for ix in 0..nx {
                let q = [ix as f64 - c[0], iy as f64 - c[1], iz as f64 - c[2]];
                let p = out_to_in.apply(q);
                let p = [p[0] + c[0], p[1] + c[1], p[2] + c[2]];
                let val = if discrete {
                    sample_nearest(&v.data, p)
                } else {
                    sample_trilinear(&v.data, p)
                };
                out[[iz, iy, ix]] = val as f32;
            }
        }
    }
    Volume::new(out, v.spacing, v.kind)
}

fn sample_nearest(data: &ndarray::Array3<f32>, p: [f64; 3]) -> f64 {
    let (nz, ny, nx) = data.dim();
    let xi = p[0].round();
    let yi = p[1].round();
    let zi = p[2].round();
    if xi < 0.0 || yi < 0.0 || zi < 0.0 {
        return 0.0;
    }
    let (xi, yi, zi) = (xi as usize, yi as usize, zi as usize);
    if xi >= nx || yi >= ny || zi >= nz {
        return 0.0;
    }
    data[[zi, yi, xi]] as f64
}

fn sample_trilinear(data: &ndarray::Array3<f32>, p: [f64; 3]) -> f64 {
    let (nz, ny, nx) = data.dim();
    let x0 = p[0].floor();
    let y0 = p[1].floor();
    let z0 = p[2].floor();
    let fx = p[0] - x0;
    let fy = p[1] - y0;
    let fz = p[2] - z0;
    let mut acc = 0.0;
    for dz in 0..2usize {
        for dy in 0..2usize {
            for dx in 0..2usize {
                let w = (if dx == 0 { 1.0 - fx } else { fx })
                    * (if dy == 0 { 1.0 - fy } else { fy })
                    * (if dz == 0 { 1.0 - fz } else { fz });
                if w == 0.0 {
                    continue;
                }
                let xs = x0 + dx as f64;
                let ys = y0 + dy as f64;
                let zs = z0 + dz as f64;
                if xs < 0.0 || ys < 0.0 || zs < 0.0 {
                    continue;
                }
                let (xs, ys, zs) = (xs as usize, ys as usize, zs as usize);
                if xs >= nx || ys >= ny || zs >= nz {
                    continue;
                }
                acc += w * data[[zs, ys, xs]] as f64;
            }
        }
    }
    acc
}

// ============================================================================
// augment / pseudo_label
// ============================================================================

/// Apply a plan to one volume. The geometric ops resample through the
/// plan's inverse affine; intensity masking then zeroes whole cells of
/// images (never labels), chosen by the plan seed.
pub fn augment(v: &Volume, plan: &AugmentationPlan) -> Result<Volume> {
    plan.validate()?;
    let mut out = apply_affine(v, &plan_inverse(plan))?;
    if v.kind == VolumeKind::Image {
        for op in &plan.ops {
            if let AugOp::RandomMask { ratio } = op {
                apply_random_mask(&mut out, *ratio, plan.seed);
            }
        }
    }
    Ok(out)
}

fn apply_random_mask(v: &mut Volume, ratio: f64, seed: u64) {
    let (nz, ny, nx) = v.data.dim();
    let gz = nz.div_ceil(MASK_CELL);
    let gy = ny.div_ceil(MASK_CELL);
    let gx = nx.div_ceil(MASK_CELL);
    let cells = gz * gy * gx;
    let k = (ratio * cells as f64).round() as usize;
    if k == 0 {
        return;
    }
    let mut rng = seeded(seed, STREAM_AUG);
    let mut chosen: Vec<usize> = rand::seq::index::sample(&mut rng, cells, k.min(cells)).into_vec();
    chosen.sort_unstable();
    for cell in chosen {
        let cz = cell / (gy * gx);
        let cy = (cell / gx) % gy;
        let cx = cell % gx;
        let z1 = ((cz + 1) * MASK_CELL).min(nz);
        let y1 = ((cy + 1) * MASK_CELL).min(ny);
        let x1 = ((cx + 1) * MASK_CELL).min(nx);
        v.data
            .slice_mut(ndarray::s![cz * MASK_CELL..z1, cy * MASK_CELL..y1, cx * MASK_CELL..x1])
            .fill(0.0);
    }
}

/// Teacher pseudo-label for one unlabeled volume: predict on the weak view,
/// then carry the mask into the strong view's frame via
/// strong_geometry . weak_geometry^-1.
pub fn pseudo_label(
    teacher: &SegModel,
    unlabeled: &Volume,
    weak: &AugmentationPlan,
    strong: &AugmentationPlan,
) -> Result<Volume> {
    let weak_view = augment(unlabeled, weak)?;
    let pred = teacher.predict(&weak_view)?;
    // Resampling by M reads through M^-1 = weak . strong^-1.
    let align_inv = Affine::compose(&plan_forward(weak), &plan_inverse(strong));
    apply_affine(&pred, &align_inv)
}

// ============================================================================
// Teacher maintenance
// ============================================================================

/// teacher := decay * teacher + (1 - decay) * student, parameter-wise.
/// decay 0 copies the student outright.
pub fn ema_update(teacher: &mut SegModel, student: &mut SegModel, decay: f64) {
    use crate::nn::Module;
    let mut svals: Vec<(String, ndarray::ArrayD<f64>)> = Vec::new();
    student.visit_params("", &mut |name: &str, p: &mut crate::nn::Param| {
        svals.push((name.to_string(), p.value.clone()));
    });
    let mut i = 0usize;
    teacher.visit_params("", &mut |name: &str, p: &mut crate::nn::Param| {
        let (sname, sval) = &svals[i];
        assert_eq!(name, sname, "teacher/student parameter walk diverged");
        ndarray::Zip::from(&mut p.value).and(sval).for_each(|t, &s| {
            *t = decay * *t + (1.0 - decay) * s;
        });
        i += 1;
    });
    assert_eq!(i, svals.len());
}

fn fresh_teacher(student: &mut SegModel) -> Result<SegModel> {
    let mut t = SegModel::new(student.encoder.cfg.clone(), &mut seeded(0, STREAM_INIT))?;
    ema_update(&mut t, student, 0.0);
    Ok(t)
}

fn restore_teacher(ck: &Checkpoint, cfg: &crate::vit::VitConfig) -> Result<Option<SegModel>> {
    use crate::nn::Module;
    if !ck.tensors.keys().any(|k| k.starts_with("teacher/")) {
        return Ok(None);
    }
    let mut t = SegModel::new(cfg.clone(), &mut seeded(0, STREAM_INIT))?;
    let mut err: Option<Error> = None;
    t.visit_params("", &mut |name: &str, p: &mut crate::nn::Param| {
        if err.is_some() {
            return;
        }
        match ck.tensors.get(&format!("teacher/{name}")) {
            Some(v) if v.shape() == p.value.shape() => p.value.assign(v),
            _ => err = Some(Error::Format(format!("checkpoint missing teacher tensor '{name}'"))),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(Some(t)),
    }
}

// ============================================================================
// Pseudo-label quality diagnostics
// ============================================================================

struct PseudoLog {
    path: PathBuf,
    rows: Vec<(u64, f64)>,
}

impl PseudoLog {
    fn create(path: &Path) -> Result<Self> {
        let log = PseudoLog { path: path.to_path_buf(), rows: Vec::new() };
        log.flush()?;
        Ok(log)
    }

    fn resume(path: &Path, step: u64) -> Result<Self> {
        let mut rows = Vec::new();
        if path.exists() {
            let mut rdr = csv::Reader::from_path(path)?;
            for rec in rdr.records() {
                let rec = rec.map_err(|e| Error::Format(format!("pseudo csv: {e}")))?;
                let s: u64 =
                    rec[0].parse().map_err(|e| Error::Format(format!("pseudo csv: {e}")))?;
                if s <= step {
                    rows.push((
                        s,
                        rec[1].parse().map_err(|e| Error::Format(format!("pseudo csv: {e}")))?,
                    ));
                }
            }
        }
        let log = PseudoLog { path: path.to_path_buf(), rows };
        log.flush()?;
        Ok(log)
    }

    fn log(&mut self, step: u64, dsc: f64) -> Result<()> {
        self.rows.push((step, dsc));
        self.flush()
    }

    fn flush(&self) -> Result<()> {
        let tmp = self.path.with_extension("csv.tmp");
        {
            let mut w = csv::Writer::from_path(&tmp)?;
            w.write_record(["step", "dsc"])?;
            for (s, d) in &self.rows {
                w.write_record([s.to_string(), format!("{d:.6}")])?;
            }
            w.flush()?;
        }
        fs::rename(&tmp, &self.path)?;
        Ok(())
    }
}

// ============================================================================
// Trainer
// ============================================================================

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SslConfig {
    pub sup_steps: u64,
    pub semi_steps: u64,
    pub lr0: f64,
    pub lr_min: f64,
    pub seed: u64,
    pub ckpt_every: u64,
    pub ema_decay: f64,
    pub lambda: f64,
    pub batch_size: usize,
}

impl SslConfig {
    pub fn defaults(seed: u64) -> Self {
        SslConfig {
            sup_steps: 500,
            semi_steps: 500,
            lr0: FINETUNE_LR,
            lr_min: 0.0,
            seed,
            ckpt_every: DEFAULT_CKPT_EVERY,
            ema_decay: EMA_DECAY,
            lambda: PSEUDO_WEIGHT,
            batch_size: DEFAULT_BATCH,
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.sup_steps + self.semi_steps
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps() == 0 {
            return Err(Error::Config("ssl needs at least one step".into()));
        }
        if self.batch_size != 2 {
            return Err(Error::Config(format!(
                "ssl batch size is pinned to 2 (one labeled + one unlabeled per semi step), got {}",
                self.batch_size
            )));
        }
        if !(self.lr0 > 0.0) || self.lr_min < 0.0 || self.lr_min > self.lr0 {
            return Err(Error::Config("need lr0 > 0 and 0 <= lr_min <= lr0".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema decay {} outside [0, 1]", self.ema_decay)));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("pseudo-label weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Two-phase mean-teacher training. `holdout` pairs, when given, feed the
/// pseudo-label quality diagnostic written to `pseudo_csv` at checkpoint
/// cadence. With no unlabeled cases the semi phase degenerates to more
/// supervised steps (with a warning) and the teacher is never created.
#[allow(clippy::too_many_arguments)]
pub fn ssl_train(
    student: &mut SegModel,
    labeled_imgs: &[Volume],
    labeled_labs: &[Volume],
    unlabeled: &[Volume],
    holdout: &[(Volume, Volume)],
    cfg: &SslConfig,
    ckpt_path: &Path,
    loss_csv: &Path,
    pseudo_csv: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if labeled_imgs.is_empty() || labeled_imgs.len() != labeled_labs.len() {
        return Err(Error::Precondition(format!(
            "need matching labeled image/label sets, got {} and {}",
            labeled_imgs.len(),
            labeled_labs.len()
        )));
    }
    if unlabeled.is_empty() {
        log::warn!("no unlabeled cases: semi-supervised phase degenerates to supervised training");
    }

    let total = cfg.total_steps();
    let mut adam = Adam::new();
    let mut data_rng = seeded(cfg.seed, STREAM_DATA);
    let mut aug_rng = seeded(cfg.seed, STREAM_AUG);
    let mut teacher: Option<SegModel> = None;
    let mut start_step = 0u64;
    if ckpt_path.exists() {
        let ck = Checkpoint::load(ckpt_path)?;
        if ck.kind != "ssl" {
            return Err(Error::Config(format!(
                "cannot resume: checkpoint kind '{}' is not 'ssl'",
                ck.kind
            )));
        }
        restore_params(&ck, student)?;
        restore_adam(&ck, student, &mut adam)?;
        teacher = restore_teacher(&ck, &student.encoder.cfg)?;
        data_rng = ck.rng["data"].restore()?;
        aug_rng = ck.rng["aug"].restore()?;
        start_step = ck.step;
        log::info!("resuming semi-supervised training from step {start_step}");
    }
    // Opening for create would truncate the rows the resumed run keeps.
    let mut log = if start_step > 0 {
        LossLog::resume(loss_csv, start_step)?
    } else {
        LossLog::create(loss_csv)?
    };
    let mut plog = match pseudo_csv {
        Some(p) if start_step > 0 => Some(PseudoLog::resume(p, start_step)?),
        Some(p) => Some(PseudoLog::create(p)?),
        None => None,
    };

    let meta = serde_json::json!({ "vit": student.encoder.cfg, "ssl": cfg });
    let mut final_loss = f64::NAN;
    for step in start_step..total {
        let lr = cosine_lr(step, total, cfg.lr0, cfg.lr_min);
        let semi = step >= cfg.sup_steps && !unlabeled.is_empty();
        if semi && teacher.is_none() {
            teacher = Some(fresh_teacher(student)?);
        }
        crate::nn::zero_grads(student);
        let (loss, phase) = if semi {
            let t = teacher.as_ref().unwrap();
            let li = data_rng.gen_range(0..labeled_imgs.len());
            let ui = data_rng.gen_range(0..unlabeled.len());
            let lplan = sample_valid_plan(AugKind::Weak, Some(&labeled_labs[li]), &mut aug_rng)?;
            let limg = augment(&labeled_imgs[li], &lplan)?;
            let llab = augment(&labeled_labs[li], &lplan)?;
            let weak = sample_plan(AugKind::Weak, &mut aug_rng);
            let strong = sample_plan(AugKind::Strong, &mut aug_rng);
            let pseudo = pseudo_label(t, &unlabeled[ui], &weak, &strong)?;
            let strong_view = augment(&unlabeled[ui], &strong)?;

            let (logits_l, cache_l) = student.forward(&[&limg])?;
            let yl = labels_to_array(&[&llab])?;
            let (ll, dl) = seg_loss(&logits_l, &yl)?;
            student.backward(&dl, &cache_l);

            let (logits_u, cache_u) = student.forward(&[&strong_view])?;
            let yu = labels_to_array(&[&pseudo])?;
            let (lu, mut du) = seg_loss(&logits_u, &yu)?;
            du.data.mapv_inplace(|g| g * cfg.lambda);
            student.backward(&du, &cache_u);

            (ll.total + cfg.lambda * lu.total, "ssl-semi")
        } else {
            let idx: Vec<usize> =
                (0..cfg.batch_size).map(|_| data_rng.gen_range(0..labeled_imgs.len())).collect();
            let mut imgs = Vec::with_capacity(idx.len());
            let mut labs = Vec::with_capacity(idx.len());
            for &i in &idx {
                let plan = sample_valid_plan(AugKind::Weak, Some(&labeled_labs[i]), &mut aug_rng)?;
                imgs.push(augment(&labeled_imgs[i], &plan)?);
                labs.push(augment(&labeled_labs[i], &plan)?);
            }
            let img_refs: Vec<&Volume> = imgs.iter().collect();
            let lab_refs: Vec<&Volume> = labs.iter().collect();
            let (logits, cache) = student.forward(&img_refs)?;
            let y = labels_to_array(&lab_refs)?;
            let (l, d) = seg_loss(&logits, &y)?;
            student.backward(&d, &cache);
            (l.total, "ssl-sup")
        };
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {loss} at step {step}; aborted, last checkpoint retained"
            )));
        }
        adam.step(student, lr, None);
        if semi {
            ema_update(teacher.as_mut().unwrap(), student, cfg.ema_decay);
        }
        log.log(step + 1, phase, loss, lr)?;
        final_loss = loss;
        let done = step + 1;
        if (cfg.ckpt_every > 0 && done % cfg.ckpt_every == 0) || done == total {
            let mut rngs = std::collections::BTreeMap::new();
            rngs.insert("data".to_string(), RngState::capture(&data_rng));
            rngs.insert("aug".to_string(), RngState::capture(&aug_rng));
            let mut ck = snapshot("ssl", done, meta.clone(), student, &adam, &rngs);
            if let Some(t) = teacher.as_mut() {
                use crate::nn::Module;
                t.visit_params("", &mut |name: &str, p: &mut crate::nn::Param| {
                    ck.insert(&format!("teacher/{name}"), p.value.clone());
                });
            }
            ck.save(ckpt_path)?;
            if let (Some(plog), Some(t)) = (plog.as_mut(), teacher.as_ref()) {
                if !holdout.is_empty() {
                    let mut acc = 0.0;
                    for (img, lab) in holdout {
                        let pred = t.predict(img)?;
                        acc += crate::metrics::dsc(&pred, lab)?;
                    }
                    plog.log(done, acc / holdout.len() as f64)?;
                }
            }
        }
    }
    Ok(TrainReport {
        steps_run: total - start_step,
        final_loss,
        checkpoint: ckpt_path.to_path_buf(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn box_label(n: usize, lo: usize, hi: usize) -> Volume {
        let mut d = Array3::<f32>::zeros((n, n, n));
        d.slice_mut(ndarray::s![lo..hi, lo..hi, lo..hi]).fill(1.0);
        Volume::new(d, [1.0, 1.0, 1.0], VolumeKind::Label).unwrap()
    }

    fn noise_image(n: usize, seed: u64) -> Volume {
        let mut rng = seeded(seed, 7);
        let d = Array3::<f32>::from_shape_fn((n, n, n), |_| rng.gen_range(-1.0..1.0));
        Volume::new(d, [1.0, 1.0, 1.0], VolumeKind::Image).unwrap()
    }

    #[test]
    fn identity_plan_is_bitwise_noop() {
        let v = noise_image(12, 3);
        let plan = AugmentationPlan {
            kind: AugKind::Weak,
            ops: vec![
                AugOp::Rotate { axis: 2, angle_deg: 0.0 },
                AugOp::Translate { shift: [0.0; 3] },
            ],
            seed: 5,
        };
        let out = augment(&v, &plan).unwrap();
        assert_eq!(v.data, out.data);
        let lbl = box_label(12, 3, 9);
        let out = augment(&lbl, &plan).unwrap();
        assert_eq!(lbl.data, out.data);
    }

    #[test]
    fn rotate_90_about_z_permutes_exactly() {
        // For even n about center (n-1)/2, a 90-degree z-rotation maps the
        // lattice to itself: (x, y) -> (n-1-y, x).
        let n = 8;
        let lbl = box_label(n, 1, 4);
        let plan = AugmentationPlan {
            kind: AugKind::Weak,
            ops: vec![AugOp::Rotate { axis: 2, angle_deg: 90.0 }],
            seed: 0,
        };
        let out = augment(&lbl, &plan).unwrap();
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    let expect = lbl.data[[z, y, x]];
                    assert_eq!(out.data[[z, x, n - 1 - y]], expect, "at ({z},{y},{x})");
                }
            }
        }
    }

    #[test]
    fn random_mask_hits_quarter_of_cells_and_spares_labels() {
        let n = 4 * MASK_CELL;
        let mut img = noise_image(n, 9);
        img.data.mapv_inplace(|v| v + 3.0);
        let plan = AugmentationPlan {
            kind: AugKind::Strong,
            ops: vec![AugOp::RandomMask { ratio: RANDOM_MASK_RATIO }],
            seed: 42,
        };
        let out = augment(&img, &plan).unwrap();
        let zeroed = out.data.iter().filter(|&&v| v == 0.0).count();
        let cell = MASK_CELL * MASK_CELL * MASK_CELL;
        assert_eq!(zeroed, 16 * cell, "exactly 16 of 64 cells zeroed");
        // Determinism: same plan, same cells.
        let again = augment(&img, &plan).unwrap();
        assert_eq!(out.data, again.data);
        // Labels pass through geometrically but are never masked.
        let lbl = box_label(n, 0, n);
        let out = augment(&lbl, &plan).unwrap();
        assert_eq!(lbl.data, out.data);
    }

    #[test]
    fn mask_ratio_in_weak_plan_rejected() {
        let plan = AugmentationPlan {
            kind: AugKind::Weak,
            ops: vec![AugOp::RandomMask { ratio: 0.25 }],
            seed: 0,
        };
        assert!(plan.validate().is_err());
    }

    #[test]
    fn recorded_inverse_recovers_label() {
        let lbl = box_label(24, 6, 18);
        let plan = AugmentationPlan {
            kind: AugKind::Weak,
            ops: vec![
                AugOp::Rotate { axis: 1, angle_deg: 7.5 },
                AugOp::Translate { shift: [2.0, -1.5, 1.0] },
            ],
            seed: 0,
        };
        let aug = augment(&lbl, &plan).unwrap();
        // Undo: resample the augmented label through the forward map.
        let back = apply_affine(&aug, &plan_forward(&plan)).unwrap();
        let inter: f64 = lbl
            .data
            .iter()
            .zip(back.data.iter())
            .filter(|(&a, &b)| a == 1.0 && b == 1.0)
            .count() as f64;
        let a: f64 = lbl.data.iter().filter(|&&v| v == 1.0).count() as f64;
        let b: f64 = back.data.iter().filter(|&&v| v == 1.0).count() as f64;
        let dice = 2.0 * inter / (a + b);
        assert!(dice > 0.9, "round-trip dice {dice}");
    }

    #[test]
    fn matching_geometry_gives_identity_alignment() {
        let geo = vec![
            AugOp::Rotate { axis: 0, angle_deg: -6.0 },
            AugOp::Scale { factor: 1.05 },
            AugOp::Translate { shift: [1.0, 2.0, -3.0] },
        ];
        let weak = AugmentationPlan { kind: AugKind::Weak, ops: geo.clone(), seed: 1 };
        let mut strong_ops = geo;
        strong_ops.push(AugOp::RandomMask { ratio: 0.25 });
        let strong = AugmentationPlan { kind: AugKind::Strong, ops: strong_ops, seed: 2 };
        let align_inv = Affine::compose(&plan_forward(&weak), &plan_inverse(&strong));
        assert!(align_inv.max_deviation_from_identity() < 1e-12);
    }

    #[test]
    fn foreground_pushed_out_of_bounds_is_detected() {
        let lbl = box_label(16, 7, 9);
        let plan = AugmentationPlan {
            kind: AugKind::Weak,
            ops: vec![AugOp::Translate { shift: [40.0, 0.0, 0.0] }],
            seed: 0,
        };
        assert!(!foreground_survives(&lbl, &plan).unwrap());
        let keep = AugmentationPlan {
            kind: AugKind::Weak,
            ops: vec![AugOp::Translate { shift: [2.0, 0.0, 0.0] }],
            seed: 0,
        };
        assert!(foreground_survives(&lbl, &keep).unwrap());
    }

    #[test]
    fn plan_sampling_is_deterministic_and_well_formed() {
        let mut r1 = seeded(11, STREAM_AUG);
        let mut r2 = seeded(11, STREAM_AUG);
        let a = sample_plan(AugKind::Strong, &mut r1);
        let b = sample_plan(AugKind::Strong, &mut r2);
        assert_eq!(a, b);
        a.validate().unwrap();
        assert!(a.ops.iter().any(|o| matches!(o, AugOp::Scale { .. })));
        assert!(a.ops.iter().any(|o| matches!(o, AugOp::RandomMask { .. })));
        let w = sample_plan(AugKind::Weak, &mut r1);
        w.validate().unwrap();
        assert!(!w.ops.iter().any(|o| matches!(o, AugOp::RandomMask { .. })));
        for op in &w.ops {
            match op {
                AugOp::Rotate { angle_deg, .. } => assert!(angle_deg.abs() <= ROT_DEG),
                AugOp::Translate { shift } => {
                    assert!(shift.iter().all(|s| s.abs() <= SHIFT_VOX))
                }
                _ => panic!("unexpected weak op {op:?}"),
            }
        }
    }

    fn tiny_cfg() -> crate::vit::VitConfig {
        crate::vit::VitConfig {
            patch_size: 16,
            grid: [1, 1, 1],
            embed_dim: 16,
            depth: 4,
            heads: 2,
            mlp_ratio: 1,
            taps: vec![1, 2, 3, 4],
        }
    }

    #[test]
    fn ema_decay_zero_copies_student() {
        let mut s = SegModel::new(tiny_cfg(), &mut seeded(1, STREAM_INIT)).unwrap();
        let mut t = SegModel::new(tiny_cfg(), &mut seeded(2, STREAM_INIT)).unwrap();
        ema_update(&mut t, &mut s, 0.0);
        use crate::nn::Module;
        let mut vals_s = Vec::new();
        s.visit_params("", &mut |_n: &str, p: &mut crate::nn::Param| {
            vals_s.push(p.value.clone())
        });
        let mut i = 0;
        t.visit_params("", &mut |_n: &str, p: &mut crate::nn::Param| {
            assert_eq!(p.value, vals_s[i]);
            i += 1;
        });
        assert_eq!(i, vals_s.len());
    }

    #[test]
    fn ema_half_decay_is_midpoint() {
        let mut s = SegModel::new(tiny_cfg(), &mut seeded(3, STREAM_INIT)).unwrap();
        let mut t = SegModel::new(tiny_cfg(), &mut seeded(4, STREAM_INIT)).unwrap();
        use crate::nn::Module;
        let mut tv = Vec::new();
        t.visit_params("", &mut |_n: &str, p: &mut crate::nn::Param| tv.push(p.value.clone()));
        let mut sv = Vec::new();
        s.visit_params("", &mut |_n: &str, p: &mut crate::nn::Param| sv.push(p.value.clone()));
        ema_update(&mut t, &mut s, 0.5);
        let mut i = 0;
        t.visit_params("", &mut |_n: &str, p: &mut crate::nn::Param| {
            let want = 0.5 * &tv[i] + 0.5 * &sv[i];
            let diff = (&p.value - &want).mapv(f64::abs).sum();
            assert!(diff < 1e-12);
            i += 1;
        });
    }

    fn tiny_pair(seed: u64) -> (Volume, Volume) {
        let mut rng = seeded(seed, 7);
        let img = Array3::<f32>::from_shape_fn((16, 16, 16), |_| rng.gen_range(-1.0..1.0));
        let mut lab = Array3::<f32>::zeros((16, 16, 16));
        lab.slice_mut(ndarray::s![4..12, 4..12, 4..12]).fill(1.0);
        (
            Volume::new(img, [1.0; 3], VolumeKind::Image).unwrap(),
            Volume::new(lab, [1.0; 3], VolumeKind::Label).unwrap(),
        )
    }

    #[test]
    fn zero_unlabeled_degenerates_to_supervised_bitwise() {
        let (img, lab) = tiny_pair(21);
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = SslConfig::defaults(77);
        cfg.sup_steps = 2;
        cfg.semi_steps = 2;
        cfg.ckpt_every = 0;

        let mut a = SegModel::new(tiny_cfg(), &mut seeded(5, STREAM_INIT)).unwrap();
        ssl_train(
            &mut a,
            &[img.clone()],
            &[lab.clone()],
            &[],
            &[],
            &cfg,
            &dir.path().join("a.ckpt"),
            &dir.path().join("a.csv"),
            None,
        )
        .unwrap();

        // Pure supervised run over the same total budget.
        let mut sup_cfg = cfg.clone();
        sup_cfg.sup_steps = 4;
        sup_cfg.semi_steps = 0;
        let (uimg, _) = tiny_pair(22);
        let mut b = SegModel::new(tiny_cfg(), &mut seeded(5, STREAM_INIT)).unwrap();
        ssl_train(
            &mut b,
            &[img],
            &[lab],
            &[uimg],
            &[],
            &sup_cfg,
            &dir.path().join("b.ckpt"),
            &dir.path().join("b.csv"),
            None,
        )
        .unwrap();

        use crate::nn::Module;
        let mut av = Vec::new();
        a.visit_params("", &mut |_n: &str, p: &mut crate::nn::Param| av.push(p.value.clone()));
        let mut i = 0;
        b.visit_params("", &mut |_n: &str, p: &mut crate::nn::Param| {
            for (x, y) in p.value.iter().zip(av[i].iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            i += 1;
        });
        let la = crate::train::read_loss_csv(&dir.path().join("a.csv")).unwrap();
        let lb = crate::train::read_loss_csv(&dir.path().join("b.csv")).unwrap();
        assert_eq!(la.len(), 4);
        for (ra, rb) in la.iter().zip(lb.iter()) {
            assert_eq!(ra.2.to_bits(), rb.2.to_bits());
        }
        assert!(la.iter().all(|r| r.1 == "ssl-sup"));
    }

    #[test]
    fn semi_phase_produces_binary_pseudo_labels_and_runs() {
        let (img, lab) = tiny_pair(31);
        let (uimg, _) = tiny_pair(32);
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = SslConfig::defaults(9);
        cfg.sup_steps = 1;
        cfg.semi_steps = 2;
        cfg.ckpt_every = 0;
        let mut s = SegModel::new(tiny_cfg(), &mut seeded(6, STREAM_INIT)).unwrap();
        let holdout = [(img.clone(), lab.clone())];
        let report = ssl_train(
            &mut s,
            &[img],
            &[lab],
            &[uimg.clone()],
            &holdout,
            &cfg,
            &dir.path().join("s.ckpt"),
            &dir.path().join("s.csv"),
            Some(&dir.path().join("pq.csv")),
        )
        .unwrap();
        assert_eq!(report.steps_run, 3);
        let rows = crate::train::read_loss_csv(&dir.path().join("s.csv")).unwrap();
        assert_eq!(rows[0].1, "ssl-sup");
        assert_eq!(rows[1].1, "ssl-semi");
        assert_eq!(rows[2].1, "ssl-semi");
        // Teacher landed in the checkpoint.
        let ck = Checkpoint::load(&dir.path().join("s.ckpt")).unwrap();
        assert!(ck.tensors.keys().any(|k| k.starts_with("teacher/")));
        assert!(dir.path().join("pq.csv").exists());
        // Direct pseudo-label contract: binary, right shape.
        let t = SegModel::new(tiny_cfg(), &mut seeded(8, STREAM_INIT)).unwrap();
        let mut rng = seeded(10, STREAM_AUG);
        let weak = sample_plan(AugKind::Weak, &mut rng);
        let strong = sample_plan(AugKind::Strong, &mut rng);
        let pl = pseudo_label(&t, &uimg, &weak, &strong).unwrap();
        assert_eq!(pl.data.dim(), uimg.data.dim());
        assert!(pl.is_binary());
    }
}
