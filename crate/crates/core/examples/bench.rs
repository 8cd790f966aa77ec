//! Rough per-step timings for the desk-scale models. Run with
//! `cargo run -p maeseg --example bench --release`.

use std::time::Instant;

use maeseg::mae::{sample_mask, MaeConfig, MaeModel};
use maeseg::rng::{seeded, STREAM_INIT, STREAM_MASK};
use maeseg::train::Adam;
use maeseg::unetr::{labels_to_array, seg_loss, SegModel};
use maeseg::vit::{stack_tokens, VitConfig};
use maeseg::volume::{patchify, Volume, VolumeKind};

fn desk_cfg(edge: usize) -> VitConfig {
    let g = edge / 16;
    VitConfig {
        patch_size: 16,
        grid: [g, g, g],
        embed_dim: 192,
        depth: 12,
        heads: 4,
        mlp_ratio: 4,
        taps: vec![3, 6, 9, 12],
    }
}

fn noise_volume(edge: usize, seed: u64) -> Volume {
    use rand::Rng;
    let mut rng = seeded(seed, 9);
    let data =
        ndarray::Array3::<f32>::from_shape_fn((edge, edge, edge), |_| rng.gen_range(0.0..1.0));
    Volume::new(data, [1.0; 3], VolumeKind::Image).unwrap()
}

fn box_label(edge: usize) -> Volume {
    let mut d = ndarray::Array3::<f32>::zeros((edge, edge, edge));
    let (lo, hi) = (edge / 4, 3 * edge / 4);
    d.slice_mut(ndarray::s![lo..hi, lo..hi, lo..hi]).fill(1.0);
    Volume::new(d, [1.0; 3], VolumeKind::Label).unwrap()
}

fn time_mae(edge: usize, steps: usize) {
    let cfg = desk_cfg(edge);
    let mut model =
        MaeModel::new(cfg.clone(), MaeConfig::default(), &mut seeded(0, STREAM_INIT)).unwrap();
    let vols: Vec<Volume> = (0..2).map(|i| noise_volume(edge, i)).collect();
    let tokens: Vec<_> = vols.iter().map(|v| patchify(v, 16).unwrap().tokens).collect();
    let refs: Vec<&ndarray::Array2<f64>> = tokens.iter().collect();
    let batch = stack_tokens(&refs).unwrap();
    let mut mask_rng = seeded(0, STREAM_MASK);
    let mut adam = Adam::new();
    let t0 = Instant::now();
    for _ in 0..steps {
        let plan = sample_mask(cfg.n_tokens(), 0.75, &mut mask_rng).unwrap();
        maeseg::nn::zero_grads(&mut model);
        let (_loss, _, cache) = model.forward(&batch, &plan).unwrap();
        model.backward(&cache);
        adam.step(&mut model, 1e-4, None);
    }
    let dt = t0.elapsed().as_secs_f64() / steps as f64;
    println!("mae  edge={edge}: {dt:.3} s/step");
}

fn time_seg(edge: usize, steps: usize) {
    let cfg = desk_cfg(edge);
    let mut model = SegModel::new(cfg, &mut seeded(0, STREAM_INIT)).unwrap();
    let img1 = noise_volume(edge, 3);
    let img2 = noise_volume(edge, 4);
    let lab = box_label(edge);
    let mut adam = Adam::new();
    let t0 = Instant::now();
    for _ in 0..steps {
        maeseg::nn::zero_grads(&mut model);
        let (logits, cache) = model.forward(&[&img1, &img2]).unwrap();
        let y = labels_to_array(&[&lab, &lab]).unwrap();
        let (_l, d) = seg_loss(&logits, &y).unwrap();
        model.backward(&d, &cache);
        adam.step(&mut model, 1e-4, None);
    }
    let dt = t0.elapsed().as_secs_f64() / steps as f64;
    println!("seg  edge={edge}: {dt:.3} s/step (batch 2)");
}

fn main() {
    time_mae(64, 5);
    time_mae(32, 10);
    time_seg(32, 5);
    time_seg(64, 3);
}
