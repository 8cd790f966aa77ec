//! Volumes, CT-style preprocessing, and the patch <-> token mapping.
//!
//! A [`Volume`] stores scalars indexed `[z, y, x]` in C order, so the
//! contiguous memory dump is exactly the on-disk layout (raw little-endian
//! f32, z slowest). Spacing is `(sx, sy, sz)` in mm/voxel.
//!
//! File format: `<name>.vol` holds the raw scalars; the `<name>.json`
//! sidecar holds `{"shape":[x,y,z],"spacing":[sx,sy,sz],"kind":"image|label"}`.
//! Save/load round-trips are bit-exact in both directions.

use std::fs;
use std::io::{Read as _, Write as _};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ============================================================================
// Core types
// ============================================================================

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeKind {
    Image,
    Label,
    Prediction,
}

impl VolumeKind {
    /// Labels and predictions are discrete; they resample nearest-neighbor
    /// and must stay {0,1}.
    pub fn is_discrete(self) -> bool {
        !matches!(self, VolumeKind::Image)
    }
}

#[derive(Debug, Clone)]
pub struct Volume {
    /// Indexed `data[[z, y, x]]`, standard (C) layout.
    pub data: Array3<f32>,
    /// (sx, sy, sz) in mm/voxel.
    pub spacing: [f64; 3],
    pub kind: VolumeKind,
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: [f64; 3], kind: VolumeKind) -> Result<Self> {
        let (nz, ny, nx) = data.dim();
        if nz == 0 || ny == 0 || nx == 0 {
            return Err(Error::Shape("volume dims must all be >= 1".into()));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Shape(format!("spacing must be positive, got {spacing:?}")));
        }
        let v = Volume { data, spacing, kind };
        if kind.is_discrete() && !v.is_binary() {
            return Err(Error::Shape("label/prediction volume must contain only {0,1}".into()));
        }
        Ok(v)
    }

    /// Dims as (nx, ny, nz), the sidecar order.
    pub fn shape_xyz(&self) -> [usize; 3] {
        let (nz, ny, nx) = self.data.dim();
        [nx, ny, nz]
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn num_voxels(&self) -> usize {
        self.data.len()
    }
}

// ============================================================================
// File I/O
// ============================================================================

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    shape: [usize; 3],
    spacing: [f64; 3],
    kind: String,
}

fn sidecar_path(vol_path: &Path) -> PathBuf {
    vol_path.with_extension("json")
}

impl Volume {
    /// Writes `<path>` (raw LE f32, z slowest) and the JSON sidecar next
    /// to it. `path` should end in `.vol`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let kind = match self.kind {
            VolumeKind::Image => "image",
            // The sidecar schema only admits image|label; predictions are
            // label-valued.
            VolumeKind::Label | VolumeKind::Prediction => "label",
        };
        let side = Sidecar {
            shape: self.shape_xyz(),
            spacing: self.spacing,
            kind: kind.to_string(),
        };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut bytes = Vec::with_capacity(self.data.len() * 4);
        let data = self.data.as_standard_layout();
        for &v in data.as_slice().expect("standard layout") {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let mut f = fs::File::create(path)?;
        f.write_all(&bytes)?;
        fs::write(sidecar_path(path), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side_raw = fs::read_to_string(sidecar_path(path)).map_err(|e| {
            Error::Format(format!("missing sidecar for {}: {e}", path.display()))
        })?;
        let side: Sidecar = serde_json::from_str(&side_raw)
            .map_err(|e| Error::Format(format!("bad sidecar {}: {e}", path.display())))?;
        let kind = match side.kind.as_str() {
            "image" => VolumeKind::Image,
            "label" => VolumeKind::Label,
            other => return Err(Error::Format(format!("unknown volume kind {other:?}"))),
        };
        let [nx, ny, nz] = side.shape;
        let expect = nx * ny * nz * 4;
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() != expect {
            return Err(Error::Format(format!(
                "{}: expected {expect} bytes for shape {:?}, found {}",
                path.display(),
                side.shape,
                bytes.len()
            )));
        }
        let mut vals = Vec::with_capacity(nx * ny * nz);
        for c in bytes.chunks_exact(4) {
            vals.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        }
        let data = Array3::from_shape_vec((nz, ny, nx), vals)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Volume::new(data, side.spacing, kind)
    }
}

// ============================================================================
// Preprocessing
// ============================================================================

/// Clip to [lo, hi] then map affinely to [0, 1].
pub fn clamp_and_normalize(v: &Volume, lo: f64, hi: f64) -> Result<Volume> {
    if !(lo < hi) {
        return Err(Error::Config(format!("clamp range requires lo < hi, got [{lo}, {hi}]")));
    }
    if v.kind != VolumeKind::Image {
        return Err(Error::Precondition("clamp_and_normalize expects an image volume".into()));
    }
    let span = hi - lo;
    let data = v.data.mapv(|x| {
        let x = (x as f64).clamp(lo, hi);
        ((x - lo) / span) as f32
    });
    Volume::new(data, v.spacing, VolumeKind::Image)
}

/// Resample to `target` spacing. Output dim = round(dim * spacing/target),
/// at least 1. Images interpolate trilinearly; labels/predictions use
/// nearest-neighbor. Voxel j samples input coordinate j*target/spacing
/// (index-0 centers aligned), so equal spacing is the exact identity.
pub fn resample(v: &Volume, target: [f64; 3]) -> Result<Volume> {
    if target.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::Precondition(format!("target spacing must be positive, got {target:?}")));
    }
    let (nz, ny, nx) = v.data.dim();
    let in_dims = [nx, ny, nz];
    let mut out_dims = [0usize; 3]; // xyz order
    for a in 0..3 {
        out_dims[a] = ((in_dims[a] as f64 * v.spacing[a] / target[a]).round() as usize).max(1);
    }
    let [ox, oy, oz] = out_dims;
    let step = [
        target[0] / v.spacing[0],
        target[1] / v.spacing[1],
        target[2] / v.spacing[2],
    ];

    let mut out = Array3::<f32>::zeros((oz, oy, ox));
    let discrete = v.kind.is_discrete();
    for z in 0..oz {
        let uz = z as f64 * step[2];
        for y in 0..oy {
            let uy = y as f64 * step[1];
            for x in 0..ox {
                let ux = x as f64 * step[0];
                out[[z, y, x]] = if discrete {
                    sample_nearest(&v.data, [ux, uy, uz])
                } else {
                    sample_trilinear(&v.data, [ux, uy, uz])
                };
            }
        }
    }
    Volume::new(out, target, v.kind)
}

fn sample_nearest(data: &Array3<f32>, u: [f64; 3]) -> f32 {
    let (nz, ny, nx) = data.dim();
    let ix = (u[0].round() as isize).clamp(0, nx as isize - 1) as usize;
    let iy = (u[1].round() as isize).clamp(0, ny as isize - 1) as usize;
    let iz = (u[2].round() as isize).clamp(0, nz as isize - 1) as usize;
    data[[iz, iy, ix]]
}

fn sample_trilinear(data: &Array3<f32>, u: [f64; 3]) -> f32 {
    let (nz, ny, nx) = data.dim();
    let dims = [nx, ny, nz];
    let mut i0 = [0usize; 3];
    let mut i1 = [0usize; 3];
    let mut t = [0f64; 3];
    for a in 0..3 {
        let n = dims[a] as isize;
        let f = u[a].floor();
        let lo = (f as isize).clamp(0, n - 1);
        let hi = (lo + 1).min(n - 1);
        i0[a] = lo as usize;
        i1[a] = hi as usize;
        t[a] = (u[a] - lo as f64).clamp(0.0, 1.0);
    }
    let at = |zi: usize, yi: usize, xi: usize| data[[zi, yi, xi]] as f64;
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let c00 = lerp(at(i0[2], i0[1], i0[0]), at(i0[2], i0[1], i1[0]), t[0]);
    let c01 = lerp(at(i0[2], i1[1], i0[0]), at(i0[2], i1[1], i1[0]), t[0]);
    let c10 = lerp(at(i1[2], i0[1], i0[0]), at(i1[2], i0[1], i1[0]), t[0]);
    let c11 = lerp(at(i1[2], i1[1], i0[0]), at(i1[2], i1[1], i1[0]), t[0]);
    let c0 = lerp(c00, c01, t[1]);
    let c1 = lerp(c10, c11, t[1]);
    lerp(c0, c1, t[2]) as f32
}

// ============================================================================
// Patchify / unpatchify
// ============================================================================

/// Ordered flattened patch vectors plus their grid geometry.
///
/// Token k sits at grid coordinate `unrank(k)` with x fastest:
/// `k = (pz*gy + py)*gx + px`. The same order applies inside a patch.
#[derive(Debug, Clone)]
pub struct PatchSequence {
    /// N x p^3 patch contents (row per token), f64 for the math paths.
    pub tokens: Array2<f64>,
    /// (gx, gy, gz) patches per axis.
    pub grid: [usize; 3],
    /// Cubic patch edge in voxels.
    pub patch_size: usize,
}

impl PatchSequence {
    pub fn new(tokens: Array2<f64>, grid: [usize; 3], patch_size: usize) -> Result<Self> {
        let n = grid[0] * grid[1] * grid[2];
        let p3 = patch_size * patch_size * patch_size;
        if tokens.nrows() != n {
            return Err(Error::Shape(format!(
                "token count {} inconsistent with grid {:?} (expects {n})",
                tokens.nrows(),
                grid
            )));
        }
        if tokens.ncols() != p3 {
            return Err(Error::Shape(format!(
                "token length {} inconsistent with patch size {patch_size} (expects {p3})",
                tokens.ncols()
            )));
        }
        Ok(PatchSequence { tokens, grid, patch_size })
    }

    pub fn num_tokens(&self) -> usize {
        self.grid[0] * self.grid[1] * self.grid[2]
    }

    /// Grid coordinate (px, py, pz) of token k.
    pub fn unrank(&self, k: usize) -> [usize; 3] {
        unrank(k, self.grid)
    }
}

pub fn unrank(k: usize, grid: [usize; 3]) -> [usize; 3] {
    let [gx, gy, _gz] = grid;
    [k % gx, (k / gx) % gy, k / (gx * gy)]
}

pub fn rank(p: [usize; 3], grid: [usize; 3]) -> usize {
    let [gx, gy, _gz] = grid;
    (p[2] * gy + p[1]) * gx + p[0]
}

/// Split a volume into cubic patches of edge `p`.
pub fn patchify(v: &Volume, p: usize) -> Result<PatchSequence> {
    if p == 0 {
        return Err(Error::Precondition("patch size must be >= 1".into()));
    }
    let [nx, ny, nz] = v.shape_xyz();
    for (dim, name) in [(nx, "x"), (ny, "y"), (nz, "z")] {
        if dim % p != 0 {
            return Err(Error::Shape(format!(
                "axis {name} (dim {dim}) not divisible by patch size {p}"
            )));
        }
    }
    let grid = [nx / p, ny / p, nz / p];
    let n = grid[0] * grid[1] * grid[2];
    let p3 = p * p * p;
    let mut tokens = Array2::<f64>::zeros((n, p3));
    for k in 0..n {
        let [px, py, pz] = unrank(k, grid);
        let mut row = tokens.row_mut(k);
        let mut i = 0;
        for lz in 0..p {
            for ly in 0..p {
                for lx in 0..p {
                    row[i] = v.data[[pz * p + lz, py * p + ly, px * p + lx]] as f64;
                    i += 1;
                }
            }
        }
    }
    PatchSequence::new(tokens, grid, p)
}

/// Exact inverse of [`patchify`]. Spacing and kind come from the caller
/// (a PatchSequence carries no physical metadata).
pub fn unpatchify(s: &PatchSequence, spacing: [f64; 3], kind: VolumeKind) -> Result<Volume> {
    let n = s.num_tokens();
    let p = s.patch_size;
    let p3 = p * p * p;
    if s.tokens.nrows() != n || s.tokens.ncols() != p3 {
        return Err(Error::Shape(format!(
            "patch sequence inconsistent: tokens {}x{}, grid {:?}, p={p}",
            s.tokens.nrows(),
            s.tokens.ncols(),
            s.grid
        )));
    }
    let (nx, ny, nz) = (s.grid[0] * p, s.grid[1] * p, s.grid[2] * p);
    let mut data = Array3::<f32>::zeros((nz, ny, nx));
    for k in 0..n {
        let [px, py, pz] = s.unrank(k);
        let row = s.tokens.row(k);
        let mut i = 0;
        for lz in 0..p {
            for ly in 0..p {
                for lx in 0..p {
                    data[[pz * p + lz, py * p + ly, px * p + lx]] = row[i] as f32;
                    i += 1;
                }
            }
        }
    }
    Volume::new(data, spacing, kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    fn rand_volume(n: usize, seed: u64) -> Volume {
        let mut rng = crate::rng::seeded(seed, 0);
        let data = Array3::from_shape_fn((n, n, n), |_| rng.gen_range(-1000.0f32..1000.0));
        Volume::new(data, [1.0, 1.0, 1.0], VolumeKind::Image).unwrap()
    }

    #[test]
    fn clamp_bounds_and_midpoint() {
        let data = Array3::from_shape_vec((1, 1, 3), vec![-800.0, 500.0, 0.0]).unwrap();
        let v = Volume::new(data, [1.0; 3], VolumeKind::Image).unwrap();
        let out = clamp_and_normalize(&v, -500.0, 500.0).unwrap();
        assert_eq!(out.data[[0, 0, 0]], 0.0);
        assert_eq!(out.data[[0, 0, 1]], 1.0);
        assert_eq!(out.data[[0, 0, 2]], 0.5);
        assert_eq!(out.spacing, v.spacing);
    }

    #[test]
    fn clamp_rejects_bad_range() {
        let v = rand_volume(2, 1);
        assert!(matches!(clamp_and_normalize(&v, 500.0, -500.0), Err(Error::Config(_))));
        assert!(matches!(clamp_and_normalize(&v, 1.0, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn clamp_monotone_and_idempotent() {
        let v = rand_volume(8, 2);
        let once = clamp_and_normalize(&v, -500.0, 500.0).unwrap();
        // Idempotent with the [0,1] window.
        let twice = clamp_and_normalize(&once, 0.0, 1.0).unwrap();
        assert_eq!(once.data, twice.data);
        // Monotone: order of any two voxels is preserved.
        let a = v.data.as_slice().unwrap();
        let b = once.data.as_slice().unwrap();
        for i in 1..a.len() {
            if a[i - 1] <= a[i] {
                assert!(b[i - 1] <= b[i]);
            } else {
                assert!(b[i - 1] >= b[i]);
            }
        }
    }

    #[test]
    fn resample_identity_is_exact() {
        let v = rand_volume(16, 3);
        let out = resample(&v, [1.0, 1.0, 1.0]).unwrap();
        assert_eq!(out.data, v.data);
    }

    #[test]
    fn resample_factor_two_dims() {
        let v = rand_volume(64, 4);
        let out = resample(&v, [2.0, 2.0, 2.0]).unwrap();
        assert_eq!(out.shape_xyz(), [32, 32, 32]);
        assert_eq!(out.spacing, [2.0, 2.0, 2.0]);
    }

    #[test]
    fn resample_constant_stays_constant() {
        let data = Array3::from_elem((5, 7, 9), 3.25f32);
        let v = Volume::new(data, [0.7, 1.3, 2.0], VolumeKind::Image).unwrap();
        let out = resample(&v, [1.0, 0.9, 0.8]).unwrap();
        assert!(out.data.iter().all(|&x| x == 3.25));
    }

    #[test]
    fn resample_label_stays_binary() {
        let mut data = Array3::<f32>::zeros((10, 10, 10));
        data.slice_mut(ndarray::s![2..7, 3..8, 1..9]).fill(1.0);
        let v = Volume::new(data, [1.0; 3], VolumeKind::Label).unwrap();
        let out = resample(&v, [0.7, 1.4, 1.1]).unwrap();
        assert!(out.is_binary());
    }

    #[test]
    fn resample_min_dim_is_one() {
        let v = rand_volume(4, 5);
        let out = resample(&v, [100.0, 100.0, 100.0]).unwrap();
        assert_eq!(out.shape_xyz(), [1, 1, 1]);
    }

    #[test]
    fn patchify_grid_arithmetic() {
        let v = rand_volume(32, 6);
        let s = patchify(&v, 16).unwrap();
        assert_eq!(s.num_tokens(), 8);
        assert_eq!(s.tokens.dim(), (8, 4096));
        let one = patchify(&rand_volume(16, 7), 16).unwrap();
        assert_eq!(one.num_tokens(), 1);
        // Single patch equals the flattened volume.
        let v16 = rand_volume(16, 8);
        let s16 = patchify(&v16, 16).unwrap();
        let flat: Vec<f64> =
            v16.data.as_standard_layout().iter().map(|&x| x as f64).collect();
        assert_eq!(s16.tokens.row(0).to_vec(), flat);
    }

    #[test]
    fn patchify_names_offending_axis() {
        let data = Array3::<f32>::zeros((32, 24, 32));
        let v = Volume::new(data, [1.0; 3], VolumeKind::Image).unwrap();
        match patchify(&v, 16) {
            Err(Error::Shape(msg)) => assert!(msg.contains("axis y"), "got: {msg}"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn patchify_roundtrip_exact() {
        let v = rand_volume(32, 9);
        let s = patchify(&v, 16).unwrap();
        let back = unpatchify(&s, v.spacing, v.kind).unwrap();
        assert_eq!(back.data, v.data);
        // Also with an anisotropic grid and small patches.
        let data = Array3::from_shape_fn((4, 8, 6), |(z, y, x)| (z * 100 + y * 10 + x) as f32);
        let v2 = Volume::new(data, [1.0; 3], VolumeKind::Image).unwrap();
        let s2 = patchify(&v2, 2).unwrap();
        assert_eq!(s2.grid, [3, 4, 2]);
        let back2 = unpatchify(&s2, v2.spacing, v2.kind).unwrap();
        assert_eq!(back2.data, v2.data);
    }

    #[test]
    fn unpatchify_places_one_hot_at_origin_patch() {
        let mut tokens = Array2::<f64>::zeros((8, 8));
        tokens[[0, 0]] = 1.0;
        let s = PatchSequence::new(tokens, [2, 2, 2], 2).unwrap();
        let v = unpatchify(&s, [1.0; 3], VolumeKind::Image).unwrap();
        assert_eq!(v.data[[0, 0, 0]], 1.0);
        assert_eq!(v.data.sum(), 1.0);
    }

    #[test]
    fn unpatchify_zero_tokens_zero_volume() {
        let s = PatchSequence::new(Array2::zeros((8, 8)), [2, 2, 2], 2).unwrap();
        let v = unpatchify(&s, [1.0; 3], VolumeKind::Image).unwrap();
        assert!(v.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn patch_sequence_rejects_grid_mismatch() {
        let tokens = Array2::<f64>::zeros((8, 8));
        assert!(PatchSequence::new(tokens.clone(), [2, 2, 4], 2).is_err());
        assert!(PatchSequence::new(tokens, [2, 2, 2], 3).is_err());
    }

    #[test]
    fn token_order_is_x_fastest() {
        // 4^3 volume, p=2 -> grid 2^3. Token 1 must be the +x neighbor patch.
        let data = Array3::from_shape_fn((4, 4, 4), |(z, y, x)| (z * 16 + y * 4 + x) as f32);
        let v = Volume::new(data, [1.0; 3], VolumeKind::Image).unwrap();
        let s = patchify(&v, 2).unwrap();
        assert_eq!(s.unrank(1), [1, 0, 0]);
        assert_eq!(s.unrank(2), [0, 1, 0]);
        assert_eq!(s.unrank(4), [0, 0, 1]);
        // First element of token 1 is voxel (x=2, y=0, z=0).
        assert_eq!(s.tokens[[1, 0]], 2.0);
        // First element of token 4 is voxel (x=0, y=0, z=2) = 32.
        assert_eq!(s.tokens[[4, 0]], 32.0);
    }

    #[test]
    fn save_load_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let v = rand_volume(8, 10);
        let path = dir.path().join("case.vol");
        v.save(&path).unwrap();
        let back = Volume::load(&path).unwrap();
        assert_eq!(back.data, v.data);
        assert_eq!(back.spacing, v.spacing);
        assert_eq!(back.kind, v.kind);
        // And the bytes themselves survive load->save.
        let bytes1 = std::fs::read(&path).unwrap();
        let path2 = dir.path().join("copy.vol");
        back.save(&path2).unwrap();
        let bytes2 = std::fs::read(&path2).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn load_rejects_truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let v = rand_volume(4, 11);
        let path = dir.path().join("t.vol");
        v.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(Volume::load(&path), Err(Error::Format(_))));
    }

    #[test]
    fn prediction_saves_as_label_kind() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = Array3::<f32>::zeros((2, 2, 2));
        data[[0, 0, 0]] = 1.0;
        let v = Volume::new(data, [1.0; 3], VolumeKind::Prediction).unwrap();
        let path = dir.path().join("pred.vol");
        v.save(&path).unwrap();
        let side: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("pred.json")).unwrap())
                .unwrap();
        assert_eq!(side["kind"], "label");
        assert_eq!(Volume::load(&path).unwrap().kind, VolumeKind::Label);
    }

    #[test]
    fn sidecar_shape_is_xyz() {
        let dir = tempfile::tempdir().unwrap();
        let data = Array3::<f32>::zeros((2, 3, 4)); // nz=2, ny=3, nx=4
        let v = Volume::new(data, [1.0; 3], VolumeKind::Image).unwrap();
        let path = dir.path().join("s.vol");
        v.save(&path).unwrap();
        let side: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("s.json")).unwrap())
                .unwrap();
        assert_eq!(side["shape"], serde_json::json!([4, 3, 2]));
        let back = Volume::load(&path).unwrap();
        assert_eq!(back.shape_xyz(), [4, 3, 2]);
    }
}
