//! Deterministic synthetic "fractured bone" phantoms.
//!
//! A phantom is a high-intensity bone body in a constant background, cut
//! by planar gaps through the bone centroid, with optional additive
//! Gaussian noise. Two families with different bone-mask statistics:
//!
//! * tibia-like: tilted elliptical z-cylinder capped by an ellipsoid of
//!   the same cross-section (a convex capsule-like shaft);
//! * pelvis-like: an xy ring (squashed torus), much lower bone fraction.
//!
//! All geometry is computed in physical mm coordinates, so gap widths are
//! spacing-aware. Same spec => bit-identical volumes.

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CaseEntry, Manifest, SPLIT_LABELED, SPLIT_TEST, SPLIT_UNLABELED, SPLIT_VAL};
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::volume::{Volume, VolumeKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    TibiaLike,
    PelvisLike,
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tibia-like" | "tibia" => Ok(Family::TibiaLike),
            "pelvis-like" | "pelvis" => Ok(Family::PelvisLike),
            other => Err(Error::Config(format!("unknown phantom family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    /// Volume dims (nx, ny, nz).
    pub shape: [usize; 3],
    /// (sx, sy, sz) mm/voxel.
    pub spacing: [f64; 3],
    pub family: Family,
    pub n_fractures: usize,
    pub gap_width_mm: f64,
    pub noise_sigma: f64,
    pub bone_hu: f64,
    pub background_hu: f64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&d| d == 0) {
            return Err(Error::Config("phantom shape dims must be >= 1".into()));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Config("phantom spacing must be positive".into()));
        }
        if self.gap_width_mm < 0.0 {
            return Err(Error::Config("gap width must be >= 0".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise sigma must be >= 0".into()));
        }
        if !(self.bone_hu > self.background_hu) {
            return Err(Error::Config(format!(
                "bone intensity ({}) must exceed background ({})",
                self.bone_hu, self.background_hu
            )));
        }
        Ok(())
    }
}

/// One planar cut: voxels with |(pos - point) . normal| < gap/2 removed.
#[derive(Debug, Clone)]
pub struct FracturePlane {
    pub normal: [f64; 3],
    pub point: [f64; 3],
    pub gap_mm: f64,
}

// ============================================================================
// Single-case generation
// ============================================================================

/// Physical mm position of voxel (z, y, x) centers: index * spacing.
#[inline]
fn pos_mm(x: usize, y: usize, z: usize, spacing: &[f64; 3]) -> [f64; 3] {
    [x as f64 * spacing[0], y as f64 * spacing[1], z as f64 * spacing[2]]
}

fn bone_mask(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Array3<bool> {
    let [nx, ny, nz] = spec.shape;
    let ext = [
        nx as f64 * spec.spacing[0],
        ny as f64 * spec.spacing[1],
        nz as f64 * spec.spacing[2],
    ];
    match spec.family {
        Family::TibiaLike => {
            // Shaft: elliptical cylinder along z, slightly tilted, with an
            // ellipsoid cap of the same cross-section at the top end.
            // Cylinder + matching cap is convex, so one planar gap always
            // yields exactly two fragments.
            let cx0 = ext[0] * (0.5 + rng.gen_range(-0.08..0.08));
            let cy0 = ext[1] * (0.5 + rng.gen_range(-0.08..0.08));
            let rx = ext[0] * rng.gen_range(0.14..0.30);
            let ry = ext[1] * rng.gen_range(0.14..0.30);
            let tilt_x = rng.gen_range(-0.18..0.18);
            let tilt_y = rng.gen_range(-0.18..0.18);
            let z_lo = ext[2] * 0.08;
            let z_hi = ext[2] * rng.gen_range(0.58..0.78);
            let cap_rz = ext[2] * rng.gen_range(0.10..0.20);
            let z_mid = 0.5 * (z_lo + z_hi);
            Array3::from_shape_fn((nz, ny, nx), |(z, y, x)| {
                let p = pos_mm(x, y, z, &spec.spacing);
                let ax = cx0 + tilt_x * (p[2] - z_mid);
                let ay = cy0 + tilt_y * (p[2] - z_mid);
                let dx = (p[0] - ax) / rx;
                let dy = (p[1] - ay) / ry;
                let in_shaft = dx * dx + dy * dy <= 1.0 && p[2] >= z_lo && p[2] <= z_hi;
                let dz = (p[2] - z_hi) / cap_rz;
                let in_cap = dx * dx + dy * dy + dz * dz <= 1.0 && p[2] > z_hi;
                in_shaft || in_cap
            })
        }
        Family::PelvisLike => {
            // Ring: squashed torus in the xy plane around mid-z.
            let cx = ext[0] * (0.5 + rng.gen_range(-0.05..0.05));
            let cy = ext[1] * (0.5 + rng.gen_range(-0.05..0.05));
            let cz = ext[2] * (0.5 + rng.gen_range(-0.10..0.10));
            let ring_r = ext[0].min(ext[1]) * rng.gen_range(0.24..0.35);
            let tube_r = ext[0].min(ext[1]) * rng.gen_range(0.08..0.14);
            let tube_rz = tube_r * rng.gen_range(0.6..1.0);
            Array3::from_shape_fn((nz, ny, nx), |(z, y, x)| {
                let p = pos_mm(x, y, z, &spec.spacing);
                let dring = ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt() - ring_r;
                let dz = (p[2] - cz) / tube_rz;
                (dring / tube_r).powi(2) + dz * dz <= 1.0
            })
        }
    }
}

fn mask_centroid(mask: &Array3<bool>, spacing: &[f64; 3]) -> Option<[f64; 3]> {
    let mut acc = [0f64; 3];
    let mut n = 0usize;
    for ((z, y, x), &m) in mask.indexed_iter() {
        if m {
            let p = pos_mm(x, y, z, spacing);
            acc[0] += p[0];
            acc[1] += p[1];
            acc[2] += p[2];
            n += 1;
        }
    }
    if n == 0 {
        return None;
    }
    Some([acc[0] / n as f64, acc[1] / n as f64, acc[2] / n as f64])
}

fn unit_normal(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-6 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Generate one phantom, returning the fracture planes actually applied.
pub fn generate_traced(spec: &PhantomSpec) -> Result<(Volume, Volume, Vec<FracturePlane>)> {
    spec.validate()?;
    let mut rng = seeded(spec.seed, 0);
    let mut bone = bone_mask(spec, &mut rng);

    let mut planes = Vec::with_capacity(spec.n_fractures);
    for _ in 0..spec.n_fractures {
        // Plane through the current bone centroid; the slab |d| < gap/2 is
        // removed, so surviving voxels on opposite sides are >= gap apart.
        let centroid = mask_centroid(&bone, &spec.spacing)
            .ok_or_else(|| Error::Generation("bone empty before cutting".into()))?;
        let normal = unit_normal(&mut rng);
        let half = spec.gap_width_mm / 2.0;
        for ((z, y, x), m) in bone.indexed_iter_mut() {
            if *m {
                let p = pos_mm(x, y, z, &spec.spacing);
                let d = (p[0] - centroid[0]) * normal[0]
                    + (p[1] - centroid[1]) * normal[1]
                    + (p[2] - centroid[2]) * normal[2];
                if d.abs() < half {
                    *m = false;
                }
            }
        }
        planes.push(FracturePlane { normal, point: centroid, gap_mm: spec.gap_width_mm });
    }
    if !bone.iter().any(|&m| m) {
        return Err(Error::Generation(
            "bone region empty after cutting; re-seed advised".into(),
        ));
    }

    let (nz, ny, nx) = bone.dim();
    let mut image = Array3::<f32>::zeros((nz, ny, nx));
    let mut label = Array3::<f32>::zeros((nz, ny, nx));
    for (m, out) in bone.iter().zip(image.iter_mut()) {
        *out = if *m { spec.bone_hu as f32 } else { spec.background_hu as f32 };
    }
    for (m, l) in bone.iter().zip(label.iter_mut()) {
        *l = if *m { 1.0 } else { 0.0 };
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f64, spec.noise_sigma)
            .map_err(|e| Error::Config(format!("bad noise sigma: {e}")))?;
        for v in image.iter_mut() {
            *v = (*v as f64 + normal.sample(&mut rng)) as f32;
        }
    }

    let image = Volume::new(image, spec.spacing, VolumeKind::Image)?;
    let label = Volume::new(label, spec.spacing, VolumeKind::Label)?;
    Ok((image, label, planes))
}

/// Generate one phantom (image, label) pair.
pub fn generate(spec: &PhantomSpec) -> Result<(Volume, Volume)> {
    let (image, label, _) = generate_traced(spec)?;
    Ok((image, label))
}

// ============================================================================
// Dataset generation
// ============================================================================

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DatasetCounts {
    pub labeled: usize,
    pub unlabeled: usize,
    pub val: usize,
    pub test: usize,
}

impl DatasetCounts {
    pub fn total(&self) -> usize {
        self.labeled + self.unlabeled + self.val + self.test
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Per-case seed: bijective mix of the master seed and case index, so
/// distinct cases get distinct seeds by construction.
pub fn case_seed(master: u64, case_index: usize) -> u64 {
    splitmix64(master ^ splitmix64(case_index as u64 + 1))
}

/// Generate `counts` phantoms from the template spec (its `seed` is the
/// master seed) and write volumes + manifest under `out_dir`. Unlabeled
/// cases get no label file. Returns the manifest (already saved to
/// `out_dir/manifest.json`).
pub fn generate_dataset(
    out_dir: &std::path::Path,
    template: &PhantomSpec,
    counts: &DatasetCounts,
) -> Result<Manifest> {
    template.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let fam = match template.family {
        Family::TibiaLike => "tibia",
        Family::PelvisLike => "pelvis",
    };
    let mut jobs: Vec<(String, String, usize, bool)> = Vec::new(); // (id, split, case_idx, keep_label)
    let mut case_idx = 0usize;
    for (split, count, keep_label) in [
        (SPLIT_LABELED, counts.labeled, true),
        (SPLIT_UNLABELED, counts.unlabeled, false),
        (SPLIT_VAL, counts.val, true),
        (SPLIT_TEST, counts.test, true),
    ] {
        for i in 0..count {
            jobs.push((format!("{fam}-{split}-{i:03}"), split.to_string(), case_idx, keep_label));
            case_idx += 1;
        }
    }

    // Cases are independent (each owns a derived seed), so generation is
    // safe to parallelize; entry order stays the job order.
    let entries: Result<Vec<CaseEntry>> = jobs
        .par_iter()
        .map(|(id, split, idx, keep_label)| {
            let spec = PhantomSpec { seed: case_seed(template.seed, *idx), ..template.clone() };
            let (image, label) = generate(&spec)?;
            let image_rel = format!("images/{id}.vol");
            image.save(&out_dir.join(&image_rel))?;
            let label_rel = if *keep_label {
                let rel = format!("labels/{id}.vol");
                label.save(&out_dir.join(&rel))?;
                Some(rel)
            } else {
                None
            };
            Ok(CaseEntry {
                id: id.clone(),
                image_path: image_rel,
                label_path: label_rel,
                split: split.clone(),
            })
        })
        .collect();

    let manifest = Manifest::new(entries?, out_dir.to_path_buf());
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_spec(seed: u64, family: Family) -> PhantomSpec {
        PhantomSpec {
            seed,
            shape: [32, 32, 32],
            spacing: [1.0, 1.0, 1.0],
            family,
            n_fractures: 2,
            gap_width_mm: 2.0,
            noise_sigma: 20.0,
            bone_hu: 400.0,
            background_hu: 0.0,
        }
    }

    #[test]
    fn no_fracture_no_noise_is_two_valued() {
        let spec = PhantomSpec { n_fractures: 0, noise_sigma: 0.0, ..base_spec(5, Family::TibiaLike) };
        let (image, label) = generate(&spec).unwrap();
        assert!(image.data.iter().all(|&v| v == 400.0 || v == 0.0));
        // Label equals the thresholded image exactly.
        for (&i, &l) in image.data.iter().zip(label.data.iter()) {
            assert_eq!(l, if i == 400.0 { 1.0 } else { 0.0 });
        }
        assert!(label.is_binary());
    }

    #[test]
    fn same_seed_bit_identical() {
        let spec = base_spec(11, Family::PelvisLike);
        let (i1, l1) = generate(&spec).unwrap();
        let (i2, l2) = generate(&spec).unwrap();
        assert_eq!(i1.data, i2.data);
        assert_eq!(l1.data, l2.data);
        let other = PhantomSpec { seed: 12, ..spec };
        let (i3, _) = generate(&other).unwrap();
        assert_ne!(i1.data, i3.data);
    }

    #[test]
    fn bone_intensity_dominates_background() {
        // Noiseless: every bone voxel sits at bone_hu, far above the
        // bg + 0.5*contrast threshold.
        for family in [Family::TibiaLike, Family::PelvisLike] {
            let spec = PhantomSpec { noise_sigma: 0.0, ..base_spec(7, family) };
            let (image, label) = generate(&spec).unwrap();
            let thresh = spec.background_hu + 0.5 * (spec.bone_hu - spec.background_hu);
            for (&v, &l) in image.data.iter().zip(label.data.iter()) {
                if l == 1.0 {
                    assert!(v as f64 >= thresh);
                }
            }
        }
    }

    #[test]
    fn bone_fraction_in_bounds_and_families_differ() {
        let mut fractions = [Vec::new(), Vec::new()];
        for seed in 0..8u64 {
            for (fi, family) in [Family::TibiaLike, Family::PelvisLike].into_iter().enumerate() {
                let spec = PhantomSpec { n_fractures: 0, ..base_spec(100 + seed, family) };
                let (_, label) = generate(&spec).unwrap();
                let frac = label.data.iter().filter(|&&v| v == 1.0).count() as f64
                    / label.num_voxels() as f64;
                assert!((0.02..=0.5).contains(&frac), "{family:?} fraction {frac}");
                fractions[fi].push(frac);
            }
        }
        let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        let (mt, mp) = (mean(&fractions[0]), mean(&fractions[1]));
        assert!((mt - mp).abs() > 0.03, "family bone fractions too close: {mt} vs {mp}");
    }

    /// 6-connectivity component labeling, used as a gap-separation oracle.
    fn components(label: &Volume) -> Vec<Vec<[usize; 3]>> {
        let (nz, ny, nx) = label.data.dim();
        let idx = |z: usize, y: usize, x: usize| (z * ny + y) * nx + x;
        let mut seen = vec![false; nz * ny * nx];
        let mut comps = Vec::new();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if label.data[[z, y, x]] != 1.0 || seen[idx(z, y, x)] {
                        continue;
                    }
                    let mut comp = Vec::new();
                    let mut stack = vec![[z, y, x]];
                    seen[idx(z, y, x)] = true;
                    while let Some([cz, cy, cx]) = stack.pop() {
                        comp.push([cz, cy, cx]);
                        let mut push = |nz_: isize, ny_: isize, nx_: isize| {
                            if nz_ < 0 || ny_ < 0 || nx_ < 0 {
                                return;
                            }
                            let (az, ay, ax) = (nz_ as usize, ny_ as usize, nx_ as usize);
                            if az >= nz || ay >= ny || ax >= nx {
                                return;
                            }
                            if label.data[[az, ay, ax]] == 1.0 && !seen[idx(az, ay, ax)] {
                                seen[idx(az, ay, ax)] = true;
                                stack.push([az, ay, ax]);
                            }
                        };
                        let (iz, iy, ix) = (cz as isize, cy as isize, cx as isize);
                        push(iz - 1, iy, ix);
                        push(iz + 1, iy, ix);
                        push(iz, iy - 1, ix);
                        push(iz, iy + 1, ix);
                        push(iz, iy, ix - 1);
                        push(iz, iy, ix + 1);
                    }
                    comps.push(comp);
                }
            }
        }
        comps
    }

    #[test]
    fn gap_separates_fragments_by_at_least_gap_width() {
        // One planar cut on a convex (tibia) or ring (pelvis) bone yields
        // exactly two fragments whose cross-gap distance is >= gap width.
        for (seed, family) in
            [(1u64, Family::TibiaLike), (2, Family::PelvisLike), (3, Family::TibiaLike), (4, Family::PelvisLike)]
        {
            let spec = PhantomSpec {
                n_fractures: 1,
                noise_sigma: 0.0,
                ..base_spec(200 + seed, family)
            };
            let (_, label) = generate(&spec).unwrap();
            let comps = components(&label);
            assert_eq!(comps.len(), 2, "{family:?} seed {seed}: {} components", comps.len());
            let mut min_d2 = f64::INFINITY;
            for a in &comps[0] {
                for b in &comps[1] {
                    let d2 = (a[0] as f64 - b[0] as f64).powi(2)
                        + (a[1] as f64 - b[1] as f64).powi(2)
                        + (a[2] as f64 - b[2] as f64).powi(2);
                    min_d2 = min_d2.min(d2);
                }
            }
            assert!(
                min_d2.sqrt() >= spec.gap_width_mm - 1e-9,
                "{family:?} seed {seed}: cross-gap distance {} < {}",
                min_d2.sqrt(),
                spec.gap_width_mm
            );
        }
    }

    #[test]
    fn gap_width_zero_cuts_nothing() {
        let uncut = PhantomSpec { n_fractures: 0, noise_sigma: 0.0, ..base_spec(31, Family::TibiaLike) };
        let cut = PhantomSpec { n_fractures: 3, gap_width_mm: 0.0, ..uncut.clone() };
        // Same seed: the bone shape draw sequence matches, extra draws only
        // feed the (zero-width) cuts.
        let (_, l1) = generate(&uncut).unwrap();
        let (_, l2) = generate(&cut).unwrap();
        assert_eq!(l1.data, l2.data);
    }

    #[test]
    fn dataset_structure_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec { shape: [16, 16, 16], ..base_spec(77, Family::TibiaLike) };
        let counts = DatasetCounts { labeled: 2, unlabeled: 3, val: 1, test: 2 };
        let m = generate_dataset(&dir.path().join("a"), &spec, &counts).unwrap();
        assert_eq!(m.cases.len(), 8);
        assert_eq!(m.split(SPLIT_LABELED).len(), 2);
        assert_eq!(m.split(SPLIT_UNLABELED).len(), 3);
        assert!(m.split(SPLIT_UNLABELED).iter().all(|c| c.label_path.is_none()));
        assert!(m.split(SPLIT_LABELED).iter().all(|c| c.label_path.is_some()));
        for c in &m.cases {
            assert!(m.image_path(c).exists());
            if let Some(lp) = m.label_path(c) {
                assert!(lp.exists());
            }
        }
        // Same master seed => identical bytes; applies manifest-wide.
        let m2 = generate_dataset(&dir.path().join("b"), &spec, &counts).unwrap();
        for (c1, c2) in m.cases.iter().zip(m2.cases.iter()) {
            assert_eq!(c1.id, c2.id);
            let b1 = std::fs::read(m.image_path(c1)).unwrap();
            let b2 = std::fs::read(m2.image_path(c2)).unwrap();
            assert_eq!(b1, b2, "case {}", c1.id);
        }
        let j1 = std::fs::read_to_string(dir.path().join("a/manifest.json")).unwrap();
        let j2 = std::fs::read_to_string(dir.path().join("b/manifest.json")).unwrap();
        assert_eq!(j1, j2);
        // Distinct cases look different.
        let c0 = Volume::load(&m.image_path(&m.cases[0])).unwrap();
        let c1 = Volume::load(&m.image_path(&m.cases[1])).unwrap();
        assert_ne!(c0.data, c1.data);
    }

    #[test]
    fn single_case_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PhantomSpec { shape: [16, 16, 16], ..base_spec(5, Family::PelvisLike) };
        let counts = DatasetCounts { labeled: 1, unlabeled: 0, val: 0, test: 0 };
        let m = generate_dataset(dir.path(), &spec, &counts).unwrap();
        assert_eq!(m.cases.len(), 1);
        assert_eq!(m.cases[0].split, SPLIT_LABELED);
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut s = base_spec(1, Family::TibiaLike);
        s.bone_hu = -10.0;
        s.background_hu = 0.0;
        assert!(matches!(generate(&s), Err(Error::Config(_))));
        let mut s2 = base_spec(1, Family::TibiaLike);
        s2.gap_width_mm = -1.0;
        assert!(matches!(generate(&s2), Err(Error::Config(_))));
    }

    #[test]
    fn case_seeds_distinct() {
        let mut seen = std::collections::HashSet::new();
        for i in 0..1000 {
            assert!(seen.insert(case_seed(42, i)));
        }
    }
}
