//! Budget calibration for the trend experiments. Prints DSC tables for
//! candidate step budgets so the end-to-end test thresholds rest on
//! measured margins rather than guesses.
//!
//!   cargo run -p maeseg --example calibrate -- c5b 500
//!   cargo run -p maeseg --example calibrate -- c6 300 120 60 60 120 4 1.2
//!   cargo run -p maeseg --example calibrate -- c7 300 120 120 4 1.2

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use maeseg::config::Config;
use maeseg::data::SPLIT_TEST;
use maeseg::metrics::dsc;
use maeseg::phantom::{case_seed, generate};
use maeseg::rng::{seeded, STREAM_INIT};
use maeseg::tasks;
use maeseg::train::finetune_seg;
use maeseg::unetr::SegModel;
use maeseg::volume::clamp_and_normalize;

const SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Clone, Copy)]
struct Difficulty {
    noise: f64,
    fractures: u64,
    gap: f64,
}

fn data_block(d: Difficulty) -> String {
    format!(
        "noise_sigma = {}\nn_fractures = {}\ngap_width_mm = {}\n",
        d.noise, d.fractures, d.gap
    )
}

fn cfg_c6(seed: u64, pre: u64, ft: u64, sup: u64, semi: u64, d: Difficulty) -> Config {
    Config::parse(&format!(
        "seed = {seed}\n\
         [data]\nedge = 32\nlabeled = 20\nunlabeled = 50\nval = 0\ntest = 8\n{}\
         [pretrain]\nsteps = {pre}\nckpt_every = 0\n\
         [finetune]\nsteps = {ft}\nckpt_every = 0\n\
         [ssl]\nsup_steps = {sup}\nsemi_steps = {semi}\nckpt_every = 0\n",
        data_block(d)
    ))
    .unwrap()
}

fn c5b(steps: u64) {
    let cfg = Config::parse("[data]\nedge = 32\n[finetune]\nckpt_every = 0\n").unwrap();
    for seed in SEEDS {
        let t0 = Instant::now();
        let spec = cfg.phantom_spec(case_seed(seed, 0)).unwrap();
        let (img, lab) = generate(&spec).unwrap();
        let img = clamp_and_normalize(&img, cfg.data.hu_lo, cfg.data.hu_hi).unwrap();
        let mut model = SegModel::new(cfg.vit().unwrap(), &mut seeded(seed, STREAM_INIT)).unwrap();
        let mut ecfg = cfg.finetune_engine(seed);
        ecfg.steps = steps;
        let dir = tempfile::tempdir().unwrap();
        let rep = finetune_seg(
            &mut model,
            std::slice::from_ref(&img),
            std::slice::from_ref(&lab),
            &ecfg,
            &dir.path().join("seg.ckpt"),
            &dir.path().join("loss.csv"),
            "finetune",
        )
        .unwrap();
        let pred = model.predict(&img).unwrap();
        let d = dsc(&pred, &lab).unwrap();
        println!(
            "c5b seed={seed} steps={steps} train_dsc={d:.4} final_loss={:.4} ({:.0?})",
            rep.final_loss,
            t0.elapsed()
        );
    }
}

fn c6(base: &Path, pre: u64, ft: u64, sup: u64, semi: u64, d: Difficulty, nseeds: usize) {
    let counts = [5usize, 10, 20];
    let mut ft_ds: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut ssl_ds: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for seed in SEEDS.into_iter().take(nseeds) {
        let t0 = Instant::now();
        let root = base.join(format!("c6-s{seed}"));
        let cfg = cfg_c6(seed, pre, ft, sup, semi, d);
        let (man, _, _) = tasks::ensure_dataset(&root, &cfg, seed).unwrap();
        let pre_out = tasks::run_pretrain(&root, &cfg, &man, seed).unwrap();
        for &n in &counts {
            let f = tasks::run_finetune(
                &root,
                &cfg,
                &man,
                seed,
                Some(&pre_out.ckpt),
                Some(n),
                &format!("ft{n:02}"),
            )
            .unwrap();
            let ev = tasks::run_evaluate(
                &root.join(format!("ft{n:02}/eval")),
                &f.ckpt,
                &man,
                SPLIT_TEST,
                &cfg,
            )
            .unwrap();
            println!(
                "c6 seed={seed} n={n:02} ft  dsc={:.4} ({:.0?})",
                ev.report.dsc_mean_sd.0,
                t0.elapsed()
            );
            ft_ds.entry(n).or_default().push(ev.report.dsc_mean_sd.0);

            let s = tasks::run_ssl(&root, &cfg, &man, seed, Some(n), &format!("ssl{n:02}"), None)
                .unwrap();
            let ev = tasks::run_evaluate(
                &root.join(format!("ssl{n:02}/eval")),
                &s.ckpt,
                &man,
                SPLIT_TEST,
                &cfg,
            )
            .unwrap();
            println!(
                "c6 seed={seed} n={n:02} ssl dsc={:.4} ({:.0?})",
                ev.report.dsc_mean_sd.0,
                t0.elapsed()
            );
            ssl_ds.entry(n).or_default().push(ev.report.dsc_mean_sd.0);
        }
        println!("c6 seed={seed} total {:.0?}", t0.elapsed());
    }
    println!(
        "\nc6 summary (pre={pre} ft={ft} sup={sup} semi={semi} noise={} frac={} gap={}):",
        d.noise, d.fractures, d.gap
    );
    for &n in &counts {
        let fm = mean(&ft_ds[&n]);
        let sm = mean(&ssl_ds[&n]);
        println!("  n={n:02}  ft={fm:.4}  ssl={sm:.4}  margin={:+.4}", fm - sm);
    }
}

fn c7(base: &Path, pre: u64, ft: u64, d: Difficulty) {
    let mut xfer = Vec::new();
    let mut scratch = Vec::new();
    for seed in SEEDS {
        let t0 = Instant::now();
        let root = base.join(format!("c7-s{seed}"));
        let cfg_a = Config::parse(&format!(
            "seed = {seed}\n[data]\nedge = 32\nfamily = \"tibia-like\"\n\
             labeled = 1\nunlabeled = 50\nval = 0\ntest = 0\n{}\
             [pretrain]\nsteps = {pre}\nckpt_every = 0\n",
            data_block(d)
        ))
        .unwrap();
        let cfg_b = Config::parse(&format!(
            "seed = {seed}\n[data]\nedge = 32\nfamily = \"pelvis-like\"\n\
             labeled = 20\nunlabeled = 1\nval = 0\ntest = 4\n{}\
             [finetune]\nsteps = {ft}\nckpt_every = 0\n",
            data_block(d)
        ))
        .unwrap();
        let (man_a, _, _) = tasks::ensure_dataset_at(&root.join("data-a"), &cfg_a, seed).unwrap();
        let (man_b, _, _) =
            tasks::ensure_dataset_at(&root.join("data-b"), &cfg_b, seed ^ 0x5eed_b00c).unwrap();
        let pre_out = tasks::run_pretrain_at(&root.join("pre"), &cfg_a, &man_a, seed).unwrap();
        for (arm, enc) in [("transfer", Some(&pre_out.ckpt)), ("scratch", None)] {
            let f = tasks::run_finetune(
                &root,
                &cfg_b,
                &man_b,
                seed,
                enc.map(|p| p.as_path()),
                Some(20),
                arm,
            )
            .unwrap();
            let ev = tasks::run_evaluate(
                &root.join(arm).join("eval"),
                &f.ckpt,
                &man_b,
                SPLIT_TEST,
                &cfg_b,
            )
            .unwrap();
            println!(
                "c7 seed={seed} {arm:<8} dsc={:.4} ({:.0?})",
                ev.report.dsc_mean_sd.0,
                t0.elapsed()
            );
            if arm == "transfer" {
                xfer.push(ev.report.dsc_mean_sd.0);
            } else {
                scratch.push(ev.report.dsc_mean_sd.0);
            }
        }
    }
    println!(
        "\nc7 summary (pre={pre} ft={ft} noise={} frac={} gap={}): transfer={:.4} scratch={:.4} gap={:+.4}",
        d.noise,
        d.fractures,
        d.gap,
        mean(&xfer),
        mean(&scratch),
        mean(&xfer) - mean(&scratch)
    );
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().collect();
    let base = std::env::temp_dir().join("maeseg-calibrate");
    let which = args.get(1).map(String::as_str).unwrap_or("c5b");
    let num = |i: usize, d: u64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let fnum = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    match which {
        "c5b" => c5b(num(2, 500)),
        "c6" => {
            let d = Difficulty { noise: fnum(6, 120.0), fractures: num(7, 4), gap: fnum(8, 1.2) };
            c6(&base, num(2, 300), num(3, 120), num(4, 60), num(5, 60), d, num(9, 3) as usize);
        }
        "c7" => {
            let d = Difficulty { noise: fnum(4, 120.0), fractures: num(5, 4), gap: fnum(6, 1.2) };
            c7(&base, num(2, 300), num(3, 120), d);
        }
        other => eprintln!("unknown mode {other}"),
    }
}
