//! Stage orchestration shared by the CLI and the end-to-end tests: dataset
//! assurance, the training loops wired to an on-disk run layout, split
//! evaluation, and the transfer comparison.
//!
//! Layout under a run root:
//! `data/` (volumes + manifest), `pretrain/`, `finetune/`, `ssl/`,
//! `evaluate/`, `transfer/`. Images are windowed to the configured HU range
//! and normalized to [0, 1] at load time, before any model sees them.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::data::{Manifest, SPLIT_LABELED, SPLIT_TEST, SPLIT_UNLABELED, SPLIT_VAL};
use crate::mae::MaeModel;
use crate::metrics::{evaluate_split, MetricReport};
use crate::phantom::generate_dataset;
use crate::rng::{seeded, STREAM_INIT};
use crate::ssl::{ssl_train, SslConfig};
use crate::train::{
    finetune_seg, load_encoder_from_mae, pretrain_mae, seg_from_checkpoint, TrainReport,
};
use crate::unetr::SegModel;
use crate::volume::{clamp_and_normalize, Volume};
use crate::{Error, Result};

// ============================================================================
// Dataset
// ============================================================================

/// Directory holding generated volumes: `data.out_dir`, resolved against
/// the run root when relative.
pub fn data_dir(root: &Path, cfg: &Config) -> PathBuf {
    let d = Path::new(&cfg.data.out_dir);
    if d.is_absolute() {
        d.to_path_buf()
    } else {
        root.join(d)
    }
}

/// Generate the phantom dataset unless the directory already holds one
/// built from the same parameters (stages are re-runnable; generation is
/// deterministic, so reuse is safe). Returns the manifest, its path, and
/// whether an existing dataset was reused.
pub fn ensure_dataset(root: &Path, cfg: &Config, seed: u64) -> Result<(Manifest, PathBuf, bool)> {
    ensure_dataset_at(&data_dir(root, cfg), cfg, seed)
}

/// Everything that determines the generated files. Stored next to the
/// manifest so a changed config regenerates instead of silently reusing
/// volumes built under different parameters.
fn dataset_fingerprint(cfg: &Config, seed: u64) -> Result<serde_json::Value> {
    Ok(serde_json::json!({
        "seed": seed,
        "spec": cfg.phantom_spec(seed)?,
        "counts": cfg.counts(),
    }))
}

pub fn ensure_dataset_at(dir: &Path, cfg: &Config, seed: u64) -> Result<(Manifest, PathBuf, bool)> {
    let mpath = dir.join("manifest.json");
    let fpath = dir.join("dataset.json");
    let want = dataset_fingerprint(cfg, seed)?;
    if mpath.exists() {
        let stored: Option<serde_json::Value> = fs::read_to_string(&fpath)
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok());
        if stored.as_ref() == Some(&want) {
            let man = Manifest::load(&mpath)?;
            if man.cases.len() == cfg.counts().total() {
                log::info!("reusing dataset at {} ({} cases)", dir.display(), man.cases.len());
                return Ok((man, mpath, true));
            }
        }
        log::warn!(
            "dataset at {} does not match the requested parameters; regenerating",
            dir.display()
        );
    }
    let man = generate_dataset(dir, &cfg.phantom_spec(seed)?, &cfg.counts())?;
    fs::write(&fpath, serde_json::to_string_pretty(&want)?)?;
    Ok((man, mpath, false))
}

/// Load one case image, windowed and normalized per the config.
pub fn load_image(man: &Manifest, case: &crate::data::CaseEntry, cfg: &Config) -> Result<Volume> {
    let raw = Volume::load(&man.image_path(case))?;
    clamp_and_normalize(&raw, cfg.data.hu_lo, cfg.data.hu_hi)
}

/// Normalized images of a split, in manifest order, optionally truncated to
/// the first `take` cases (prefixes nest across different `take` values).
pub fn load_split_images(
    man: &Manifest,
    split: &str,
    cfg: &Config,
    take: Option<usize>,
) -> Result<Vec<Volume>> {
    let mut cases = man.split(split);
    if let Some(n) = take {
        if n > cases.len() {
            return Err(Error::Config(format!(
                "requested {n} cases from split {split:?} which has only {}",
                cases.len()
            )));
        }
        cases.truncate(n);
    }
    cases.iter().map(|c| load_image(man, c, cfg)).collect()
}

/// Normalized images plus labels of a labeled split.
pub fn load_split_pairs(
    man: &Manifest,
    split: &str,
    cfg: &Config,
    take: Option<usize>,
) -> Result<(Vec<Volume>, Vec<Volume>)> {
    let mut cases = man.split(split);
    if let Some(n) = take {
        if n > cases.len() {
            return Err(Error::Config(format!(
                "requested {n} cases from split {split:?} which has only {}",
                cases.len()
            )));
        }
        cases.truncate(n);
    }
    let mut imgs = Vec::with_capacity(cases.len());
    let mut labs = Vec::with_capacity(cases.len());
    for c in cases {
        let lp = man
            .label_path(c)
            .ok_or_else(|| Error::Precondition(format!("case {} has no label", c.id)))?;
        imgs.push(load_image(man, c, cfg)?);
        labs.push(Volume::load(&lp)?);
    }
    Ok((imgs, labs))
}

// ============================================================================
// Stages
// ============================================================================

#[derive(Debug, Clone)]
pub struct StageOut {
    pub report: TrainReport,
    pub ckpt: PathBuf,
    pub loss_csv: PathBuf,
}

/// Masked-reconstruction pretraining on the unlabeled pool.
pub fn run_pretrain(root: &Path, cfg: &Config, man: &Manifest, seed: u64) -> Result<StageOut> {
    let dir = root.join("pretrain");
    fs::create_dir_all(&dir)?;
    let pool = load_split_images(man, SPLIT_UNLABELED, cfg, None)?;
    if pool.is_empty() {
        return Err(Error::Precondition(
            "no unlabeled cases to pretrain on (data.unlabeled is 0)".into(),
        ));
    }
    let mut model =
        MaeModel::new(cfg.vit()?, cfg.mae_config(), &mut seeded(seed, STREAM_INIT))?;
    let ckpt = dir.join("mae.ckpt");
    let loss_csv = dir.join("loss.csv");
    let report = pretrain_mae(&mut model, &pool, &cfg.pretrain_engine(seed), &ckpt, &loss_csv)?;
    Ok(StageOut { report, ckpt, loss_csv })
}

/// Checkpoint/encoder compatibility: the stored encoder config must equal
/// the run's (including the token grid; position tables are not resized).
pub fn check_vit_compat(ck: &Checkpoint, want: &crate::vit::VitConfig) -> Result<()> {
    let have: crate::vit::VitConfig = serde_json::from_value(ck.meta["vit"].clone())
        .map_err(|e| Error::Config(format!("checkpoint lacks a readable encoder config: {e}")))?;
    if &have != want {
        return Err(Error::Config(format!(
            "incompatible encoder configs: checkpoint {have:?} vs run {want:?}"
        )));
    }
    Ok(())
}

/// Supervised fine-tuning, optionally initializing the encoder from a
/// pretraining checkpoint. `subdir` names the stage directory under root;
/// `labeled_count` truncates the labeled split to its first n cases.
pub fn run_finetune(
    root: &Path,
    cfg: &Config,
    man: &Manifest,
    seed: u64,
    encoder_from: Option<&Path>,
    labeled_count: Option<usize>,
    subdir: &str,
) -> Result<StageOut> {
    let dir = root.join(subdir);
    fs::create_dir_all(&dir)?;
    let (imgs, labs) = load_split_pairs(man, SPLIT_LABELED, cfg, labeled_count)?;
    let vit = cfg.vit()?;
    let mut model = SegModel::new(vit.clone(), &mut seeded(seed, STREAM_INIT))?;
    if let Some(p) = encoder_from {
        let ck = Checkpoint::load(p)?;
        check_vit_compat(&ck, &vit)?;
        let n = load_encoder_from_mae(&mut model, &ck)?;
        log::info!("encoder initialized from {} ({n} tensors)", p.display());
    }
    let ckpt = dir.join("seg.ckpt");
    let loss_csv = dir.join("loss.csv");
    let report = finetune_seg(
        &mut model,
        &imgs,
        &labs,
        &cfg.finetune_engine(seed),
        &ckpt,
        &loss_csv,
        "finetune",
    )?;
    Ok(StageOut { report, ckpt, loss_csv })
}

/// Mean-teacher baseline on the labeled + unlabeled splits, with the val
/// split as the pseudo-label quality holdout.
pub fn run_ssl(
    root: &Path,
    cfg: &Config,
    man: &Manifest,
    seed: u64,
    labeled_count: Option<usize>,
    subdir: &str,
    override_cfg: Option<SslConfig>,
) -> Result<StageOut> {
    let dir = root.join(subdir);
    fs::create_dir_all(&dir)?;
    let (imgs, labs) = load_split_pairs(man, SPLIT_LABELED, cfg, labeled_count)?;
    let unlabeled = load_split_images(man, SPLIT_UNLABELED, cfg, None)?;
    let (vimgs, vlabs) = load_split_pairs(man, SPLIT_VAL, cfg, None).unwrap_or_default();
    let holdout: Vec<(Volume, Volume)> = vimgs.into_iter().zip(vlabs).collect();
    let mut model = SegModel::new(cfg.vit()?, &mut seeded(seed, STREAM_INIT))?;
    let ckpt = dir.join("ssl.ckpt");
    let loss_csv = dir.join("loss.csv");
    let pseudo_csv = dir.join("pseudo_quality.csv");
    let scfg = override_cfg.unwrap_or_else(|| cfg.ssl_config(seed));
    let report = ssl_train(
        &mut model,
        &imgs,
        &labs,
        &unlabeled,
        &holdout,
        &scfg,
        &ckpt,
        &loss_csv,
        Some(&pseudo_csv),
    )?;
    Ok(StageOut { report, ckpt, loss_csv })
}

// ============================================================================
// Evaluation
// ============================================================================

#[derive(Debug, Clone)]
pub struct EvalOut {
    pub report: MetricReport,
    pub csv: PathBuf,
    pub table: PathBuf,
    pub pred_dir: PathBuf,
}

/// Evaluate a checkpoint on a labeled split: per-case DSC/ASSD/95HD,
/// metrics.csv + report.txt + exported predictions under `out_dir`.
pub fn run_evaluate(
    out_dir: &Path,
    ckpt_path: &Path,
    man: &Manifest,
    split: &str,
    cfg: &Config,
) -> Result<EvalOut> {
    fs::create_dir_all(out_dir)?;
    let ck = Checkpoint::load(ckpt_path)?;
    let model = seg_from_checkpoint(&ck)?;
    let (lo, hi) = (cfg.data.hu_lo, cfg.data.hu_hi);
    let predict =
        |img: &Volume| -> Result<Volume> { model.predict(&clamp_and_normalize(img, lo, hi)?) };
    let (report, preds) = evaluate_split(predict, man, split)?;

    let csv = out_dir.join("metrics.csv");
    report.write_csv(&csv)?;
    let table = out_dir.join("report.txt");
    let title = format!("split '{split}' ({})", ckpt_path.display());
    fs::write(&table, report.to_table(&title))?;
    let pred_dir = out_dir.join("pred");
    fs::create_dir_all(&pred_dir)?;
    for (id, p) in &preds {
        p.save(&pred_dir.join(format!("{id}.vol")))?;
    }
    Ok(EvalOut { report, csv, table, pred_dir })
}

// ============================================================================
// Transfer comparison
// ============================================================================

#[derive(Debug, Clone)]
pub struct TransferArmOut {
    pub arm: String,
    pub labeled: usize,
    pub report: MetricReport,
}

/// Pretrain on family A's unlabeled pool, then for each labeled count run
/// three arms on family B: encoder-transfer fine-tune, from-scratch
/// fine-tune, and an augmented supervised baseline. Each arm is evaluated
/// on family B's test split. Returns arm reports in run order.
pub fn run_transfer(
    root: &Path,
    cfg_a: &Config,
    cfg_b: &Config,
    seed: u64,
    counts: &[usize],
) -> Result<Vec<TransferArmOut>> {
    if cfg_a.vit()? != cfg_b.vit()? {
        return Err(Error::Config(
            "transfer requires identical encoder configs for both families".into(),
        ));
    }
    let dir = root.join("transfer");
    fs::create_dir_all(&dir)?;
    let (man_a, _, _) = ensure_dataset_at(&dir.join("data-a"), cfg_a, seed)?;
    // Family B cases draw from a shifted master seed so the two datasets
    // differ even when the families coincide.
    let (man_b, _, _) = ensure_dataset_at(&dir.join("data-b"), cfg_b, seed ^ 0x5eed_b00c)?;

    let pre = run_pretrain_at(&dir.join("pretrain-a"), cfg_a, &man_a, seed)?;

    let mut arms = Vec::new();
    for &n in counts {
        let base = format!("n{n:02}");
        let ft = run_finetune(
            &dir,
            cfg_b,
            &man_b,
            seed,
            Some(&pre.ckpt),
            Some(n),
            &format!("{base}/transfer"),
        )?;
        let ev =
            run_evaluate(&dir.join(&base).join("transfer/eval"), &ft.ckpt, &man_b, SPLIT_TEST, cfg_b)?;
        arms.push(TransferArmOut { arm: "transfer".into(), labeled: n, report: ev.report });

        let sc = run_finetune(
            &dir,
            cfg_b,
            &man_b,
            seed,
            None,
            Some(n),
            &format!("{base}/scratch-unetr"),
        )?;
        let ev = run_evaluate(
            &dir.join(&base).join("scratch-unetr/eval"),
            &sc.ckpt,
            &man_b,
            SPLIT_TEST,
            cfg_b,
        )?;
        arms.push(TransferArmOut { arm: "scratch-unetr".into(), labeled: n, report: ev.report });

        // Supervised baseline: the mean-teacher trainer with no semi phase,
        // same total budget.
        let mut sup_cfg = cfg_b.ssl_config(seed);
        sup_cfg.sup_steps += sup_cfg.semi_steps;
        sup_cfg.semi_steps = 0;
        let sup = run_ssl(
            &dir,
            cfg_b,
            &man_b,
            seed,
            Some(n),
            &format!("{base}/supervised"),
            Some(sup_cfg),
        )?;
        let ev = run_evaluate(
            &dir.join(&base).join("supervised/eval"),
            &sup.ckpt,
            &man_b,
            SPLIT_TEST,
            cfg_b,
        )?;
        arms.push(TransferArmOut { arm: "supervised".into(), labeled: n, report: ev.report });
    }

    let mut table = String::from("transfer comparison (family A pretrain -> family B)\n");
    for a in &arms {
        let (dm, ds) = a.report.dsc_mean_sd;
        table.push_str(&format!(
            "labeled={:<3} {:<14} DSC {:.2}+/-{:.2} %\n",
            a.labeled,
            a.arm,
            100.0 * dm,
            100.0 * ds
        ));
    }
    fs::write(dir.join("report.txt"), table)?;
    Ok(arms)
}

/// Pretraining at an explicit stage directory (transfer keeps several).
pub fn run_pretrain_at(dir: &Path, cfg: &Config, man: &Manifest, seed: u64) -> Result<StageOut> {
    fs::create_dir_all(dir)?;
    let pool = load_split_images(man, SPLIT_UNLABELED, cfg, None)?;
    if pool.is_empty() {
        return Err(Error::Precondition(
            "no unlabeled cases to pretrain on (data.unlabeled is 0)".into(),
        ));
    }
    let mut model =
        MaeModel::new(cfg.vit()?, cfg.mae_config(), &mut seeded(seed, STREAM_INIT))?;
    let ckpt = dir.join("mae.ckpt");
    let loss_csv = dir.join("loss.csv");
    let report = pretrain_mae(&mut model, &pool, &cfg.pretrain_engine(seed), &ckpt, &loss_csv)?;
    Ok(StageOut { report, ckpt, loss_csv })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> Config {
        Config::parse(
            "seed = 1\n\
             [data]\nedge = 32\nlabeled = 1\nunlabeled = 2\nval = 1\ntest = 1\n\
             [model]\nembed_dim = 16\ndepth = 4\nheads = 2\nmlp_ratio = 1\ntaps = [1, 2, 3, 4]\n\
             dec_dim = 8\ndec_depth = 1\ndec_heads = 2\ndec_mlp_ratio = 1\n\
             [pretrain]\nsteps = 2\nckpt_every = 0\n\
             [finetune]\nsteps = 2\nckpt_every = 0\n",
        )
        .unwrap()
    }

    #[test]
    fn dataset_roundtrip_and_reuse() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let (man, mpath, reused) = ensure_dataset(dir.path(), &cfg, 3).unwrap();
        assert!(!reused);
        assert_eq!(man.cases.len(), 5);
        assert!(mpath.exists());
        let (man2, _, reused2) = ensure_dataset(dir.path(), &cfg, 3).unwrap();
        assert!(reused2);
        assert_eq!(man2.cases.len(), 5);
        // Normalized images live in [0, 1].
        let imgs = load_split_images(&man, SPLIT_UNLABELED, &cfg, None).unwrap();
        assert_eq!(imgs.len(), 2);
        assert!(imgs[0].data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // Prefix truncation nests.
        let one = load_split_images(&man, SPLIT_UNLABELED, &cfg, Some(1)).unwrap();
        assert_eq!(one[0].data, imgs[0].data);
        assert!(load_split_images(&man, SPLIT_UNLABELED, &cfg, Some(9)).is_err());
    }

    #[test]
    fn pretrain_finetune_evaluate_chain_on_tiny_setup() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config();
        let (man, _, _) = ensure_dataset(dir.path(), &cfg, 11).unwrap();
        let pre = run_pretrain(dir.path(), &cfg, &man, 11).unwrap();
        assert!(pre.ckpt.exists());
        assert!(pre.report.final_loss.is_finite());
        let ft = run_finetune(dir.path(), &cfg, &man, 11, Some(&pre.ckpt), None, "finetune")
            .unwrap();
        assert!(ft.ckpt.exists());
        let ev = run_evaluate(
            &dir.path().join("evaluate"),
            &ft.ckpt,
            &man,
            SPLIT_TEST,
            &cfg,
        )
        .unwrap();
        assert_eq!(ev.report.n_cases, 1);
        assert!(ev.csv.exists() && ev.table.exists());
        // Mismatched encoder config is a config error.
        let mut other = tiny_config();
        other.model.embed_dim = 32;
        let err =
            run_finetune(dir.path(), &other, &man, 11, Some(&pre.ckpt), None, "ft2").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
