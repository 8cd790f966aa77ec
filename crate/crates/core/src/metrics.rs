//! Segmentation metrics: DSC, ASSD, 95HD with spacing-aware distances.
//!
//! Surface distances use an exact anisotropic Euclidean distance
//! transform (Felzenszwalb-Huttenlocher lower envelopes, one pass per
//! axis with weight spacing^2), evaluated between voxel centers. The
//! conventions are pinned here:
//!
//! * both masks empty -> DSC 1.0; surface metrics on an empty mask are an
//!   error (reported cases are skipped and counted, not silently NaN);
//! * surface = foreground voxel with a background 6-neighbor, volume
//!   boundary counting as background;
//! * ASSD pools both directed distance sets; 95HD takes the linearly
//!   interpolated 95th percentile of the pooled set.

use ndarray::Array3;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::volume::Volume;

// ============================================================================
// Overlap
// ============================================================================

fn check_pair(pred: &Volume, gt: &Volume) -> Result<()> {
    if pred.data.dim() != gt.data.dim() {
        return Err(Error::Shape(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.data.dim(),
            gt.data.dim()
        )));
    }
    if !pred.is_binary() || !gt.is_binary() {
        return Err(Error::Precondition("metric masks must be binary".into()));
    }
    Ok(())
}

/// Dice similarity coefficient; 1.0 when both masks are empty.
pub fn dsc(pred: &Volume, gt: &Volume) -> Result<f64> {
    check_pair(pred, gt)?;
    let mut np = 0u64;
    let mut ng = 0u64;
    let mut ni = 0u64;
    for (&p, &g) in pred.data.iter().zip(gt.data.iter()) {
        let p = p == 1.0;
        let g = g == 1.0;
        np += p as u64;
        ng += g as u64;
        ni += (p && g) as u64;
    }
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * ni as f64 / (np + ng) as f64)
}

// ============================================================================
// Surfaces
// ============================================================================

/// Foreground voxels with at least one background 6-neighbor
/// (out-of-bounds is background). Coordinates are (z, y, x), iterated in
/// memory order.
pub fn extract_surface(mask: &Volume) -> Result<Vec<[usize; 3]>> {
    if !mask.is_binary() {
        return Err(Error::Precondition("surface extraction needs a binary mask".into()));
    }
    let (nz, ny, nx) = mask.data.dim();
    let fg = |z: isize, y: isize, x: isize| -> bool {
        if z < 0 || y < 0 || x < 0 || z >= nz as isize || y >= ny as isize || x >= nx as isize {
            return false;
        }
        mask.data[[z as usize, y as usize, x as usize]] == 1.0
    };
    let mut surface = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if mask.data[[z, y, x]] != 1.0 {
                    continue;
                }
                let (iz, iy, ix) = (z as isize, y as isize, x as isize);
                let boundary = !fg(iz - 1, iy, ix)
                    || !fg(iz + 1, iy, ix)
                    || !fg(iz, iy - 1, ix)
                    || !fg(iz, iy + 1, ix)
                    || !fg(iz, iy, ix - 1)
                    || !fg(iz, iy, ix + 1);
                if boundary {
                    surface.push([z, y, x]);
                }
            }
        }
    }
    if surface.is_empty() {
        return Err(Error::Precondition("empty mask has no surface".into()));
    }
    Ok(surface)
}

// ============================================================================
// Exact anisotropic EDT
// ============================================================================

const INF: f64 = f64::INFINITY;

/// 1D squared-distance transform: out[i] = min_j (w*(i-j)^2 + f[j]).
/// Felzenszwalb-Huttenlocher lower envelope of parabolas.
fn dt_1d(f: &[f64], w: f64, out: &mut [f64]) {
    let n = f.len();
    if n == 1 {
        out[0] = f[0];
        return;
    }
    // v: parabola sites; z: envelope breakpoints.
    let mut v = vec![0usize; n];
    let mut z = vec![0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -INF;
    z[1] = INF;
    for q in 1..n {
        if f[q] == INF {
            continue;
        }
        loop {
            let p = v[k];
            let s = if f[p] == INF {
                // Parabola at p is everywhere above; replace it.
                -INF
            } else {
                let qf = q as f64;
                let pf = p as f64;
                ((f[q] + w * qf * qf) - (f[p] + w * pf * pf)) / (2.0 * w * (qf - pf))
            };
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = -INF;
                    z[1] = INF;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = INF;
                break;
            }
        }
    }
    let mut k2 = 0usize;
    for q in 0..n {
        while z[k2 + 1] < q as f64 {
            k2 += 1;
        }
        let p = v[k2];
        let d = q as f64 - p as f64;
        out[q] = w * d * d + f[p];
    }
}

/// Squared Euclidean distance (mm^2) from every voxel center to the
/// nearest site, with per-axis spacing. Sites at distance 0.
fn edt_sq(sites: &[[usize; 3]], dims: (usize, usize, usize), spacing: [f64; 3]) -> Array3<f64> {
    let (nz, ny, nx) = dims;
    let mut d = Array3::<f64>::from_elem((nz, ny, nx), INF);
    for &[z, y, x] in sites {
        d[[z, y, x]] = 0.0;
    }
    let (wx, wy, wz) = (spacing[0] * spacing[0], spacing[1] * spacing[1], spacing[2] * spacing[2]);

    // x pass
    let mut buf = vec![0f64; nx.max(ny).max(nz)];
    for z in 0..nz {
        for y in 0..ny {
            let row: Vec<f64> = (0..nx).map(|x| d[[z, y, x]]).collect();
            dt_1d(&row, wx, &mut buf[..nx]);
            for x in 0..nx {
                d[[z, y, x]] = buf[x];
            }
        }
    }
    // y pass
    for z in 0..nz {
        for x in 0..nx {
            let col: Vec<f64> = (0..ny).map(|y| d[[z, y, x]]).collect();
            dt_1d(&col, wy, &mut buf[..ny]);
            for y in 0..ny {
                d[[z, y, x]] = buf[y];
            }
        }
    }
    // z pass
    for y in 0..ny {
        for x in 0..nx {
            let col: Vec<f64> = (0..nz).map(|z| d[[z, y, x]]).collect();
            dt_1d(&col, wz, &mut buf[..nz]);
            for z in 0..nz {
                d[[z, y, x]] = buf[z];
            }
        }
    }
    d
}

/// Pooled directed surface distances (pred->gt then gt->pred), in mm.
fn pooled_surface_distances(pred: &Volume, gt: &Volume) -> Result<Vec<f64>> {
    check_pair(pred, gt)?;
    let sp = extract_surface(pred)?;
    let sg = extract_surface(gt)?;
    let dims = pred.data.dim();
    let spacing = pred.spacing;
    let dist_to_gt = edt_sq(&sg, dims, spacing);
    let dist_to_pred = edt_sq(&sp, dims, spacing);
    let mut pooled = Vec::with_capacity(sp.len() + sg.len());
    for &[z, y, x] in &sp {
        pooled.push(dist_to_gt[[z, y, x]].sqrt());
    }
    for &[z, y, x] in &sg {
        pooled.push(dist_to_pred[[z, y, x]].sqrt());
    }
    Ok(pooled)
}

/// Average symmetric surface distance in mm. The two directed sums are
/// accumulated separately and then added, so the result is exactly
/// symmetric in (pred, gt).
pub fn assd(pred: &Volume, gt: &Volume) -> Result<f64> {
    check_pair(pred, gt)?;
    let sp = extract_surface(pred)?;
    let sg = extract_surface(gt)?;
    let dims = pred.data.dim();
    let dist_to_gt = edt_sq(&sg, dims, pred.spacing);
    let dist_to_pred = edt_sq(&sp, dims, pred.spacing);
    let sum_p: f64 = sp.iter().map(|&[z, y, x]| dist_to_gt[[z, y, x]].sqrt()).sum();
    let sum_g: f64 = sg.iter().map(|&[z, y, x]| dist_to_pred[[z, y, x]].sqrt()).sum();
    Ok((sum_p + sum_g) / (sp.len() + sg.len()) as f64)
}

/// Linearly interpolated percentile of ascending-sorted values, q in [0,1].
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0);
    if n == 1 {
        return sorted[0];
    }
    let rank = q * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// 95th percentile of the pooled directed surface distances, in mm.
pub fn hd95(pred: &Volume, gt: &Volume) -> Result<f64> {
    let mut pooled = pooled_surface_distances(pred, gt)?;
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(percentile(&pooled, 0.95))
}

// ============================================================================
// Reports
// ============================================================================

#[derive(Debug, Clone, Serialize)]
pub struct CaseMetrics {
    pub id: String,
    pub dsc: f64,
    pub assd_mm: f64,
    pub hd95_mm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricReport {
    pub per_case: Vec<CaseMetrics>,
    /// (mean, sample SD) per metric over per_case rows.
    pub dsc_mean_sd: (f64, f64),
    pub assd_mean_sd: (f64, f64),
    pub hd95_mean_sd: (f64, f64),
    pub n_cases: usize,
    /// Cases dropped because a metric was undefined (empty mask) or a file
    /// was missing.
    pub n_skipped: usize,
}

pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

impl MetricReport {
    pub fn from_cases(per_case: Vec<CaseMetrics>, n_skipped: usize) -> Self {
        let d: Vec<f64> = per_case.iter().map(|c| c.dsc).collect();
        let a: Vec<f64> = per_case.iter().map(|c| c.assd_mm).collect();
        let h: Vec<f64> = per_case.iter().map(|c| c.hd95_mm).collect();
        MetricReport {
            n_cases: per_case.len(),
            n_skipped,
            dsc_mean_sd: mean_sd(&d),
            assd_mean_sd: mean_sd(&a),
            hd95_mean_sd: mean_sd(&h),
            per_case,
        }
    }

    /// Table-style text: DSC in % as value+-SD, distances in mm.
    pub fn to_table(&self, title: &str) -> String {
        let mut s = String::new();
        s.push_str(&format!("{title}\n"));
        s.push_str(&format!("cases: {}   skipped: {}\n", self.n_cases, self.n_skipped));
        s.push_str(&format!(
            "DSC (%):   {:.2}\u{b1}{:.2}\n",
            self.dsc_mean_sd.0 * 100.0,
            self.dsc_mean_sd.1 * 100.0
        ));
        s.push_str(&format!(
            "ASSD (mm): {:.2}\u{b1}{:.2}\n",
            self.assd_mean_sd.0, self.assd_mean_sd.1
        ));
        s.push_str(&format!(
            "95HD (mm): {:.2}\u{b1}{:.2}\n",
            self.hd95_mean_sd.0, self.hd95_mean_sd.1
        ));
        s
    }

    /// `metrics.csv` rows: id,dsc,assd_mm,hd95_mm.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
        w.write_record(["id", "dsc", "assd_mm", "hd95_mm"])
            .map_err(|e| Error::Format(e.to_string()))?;
        for c in &self.per_case {
            w.write_record([
                c.id.as_str(),
                &format!("{:.9}", c.dsc),
                &format!("{:.9}", c.assd_mm),
                &format!("{:.9}", c.hd95_mm),
            ])
            .map_err(|e| Error::Format(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

// ============================================================================
// Split evaluation
// ============================================================================

/// Runs `predict` on every labeled case of `split`, computing all three
/// metrics. Cases whose files are missing or whose metrics are undefined
/// (empty mask) are skipped and counted. Returns the report plus the
/// predictions in case order for optional export.
///
/// `predict` receives the raw image volume and must return a binary mask;
/// any internal preprocessing is the predictor's business.
pub fn evaluate_split<F>(
    predict: F,
    manifest: &crate::data::Manifest,
    split: &str,
) -> Result<(MetricReport, Vec<(String, Volume)>)>
where
    F: Fn(&Volume) -> Result<Volume> + Sync,
{
    use rayon::prelude::*;
    let cases: Vec<_> = manifest
        .split(split)
        .into_iter()
        .filter(|c| c.label_path.is_some())
        .cloned()
        .collect();
    if cases.is_empty() {
        return Err(Error::Precondition(format!("split {split:?} has no labeled cases")));
    }

    // Per-case work is independent; results are collected in case order so
    // the report is deterministic regardless of worker count.
    let rows: Vec<(String, Result<(CaseMetrics, Volume)>)> = cases
        .par_iter()
        .map(|case| {
            let run = || -> Result<(CaseMetrics, Volume)> {
                let image = Volume::load(&manifest.image_path(case))?;
                let label = Volume::load(&manifest.label_path(case).unwrap())?;
                let pred = predict(&image)?;
                let m = CaseMetrics {
                    id: case.id.clone(),
                    dsc: dsc(&pred, &label)?,
                    assd_mm: assd(&pred, &label)?,
                    hd95_mm: hd95(&pred, &label)?,
                };
                Ok((m, pred))
            };
            (case.id.clone(), run())
        })
        .collect();

    let mut per_case = Vec::new();
    let mut preds = Vec::new();
    let mut skipped = 0usize;
    for (id, row) in rows {
        match row {
            Ok((m, p)) => {
                per_case.push(m);
                preds.push((id, p));
            }
            Err(e) => {
                log::warn!("case {id} skipped: {e}");
                skipped += 1;
            }
        }
    }
    Ok((MetricReport::from_cases(per_case, skipped), preds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VolumeKind;
    use ndarray::Array3;

    fn vol(data: Array3<f32>, spacing: [f64; 3]) -> Volume {
        Volume::new(data, spacing, VolumeKind::Label).unwrap()
    }

    fn boxed(n: usize, lo: [usize; 3], hi: [usize; 3], spacing: [f64; 3]) -> Volume {
        let mut d = Array3::<f32>::zeros((n, n, n));
        d.slice_mut(ndarray::s![lo[0]..hi[0], lo[1]..hi[1], lo[2]..hi[2]]).fill(1.0);
        vol(d, spacing)
    }

    #[test]
    fn dsc_basics() {
        let a = boxed(8, [1, 1, 1], [4, 4, 4], [1.0; 3]);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        let b = boxed(8, [5, 5, 5], [7, 7, 7], [1.0; 3]);
        assert_eq!(dsc(&a, &b).unwrap(), 0.0);
        // |P|=4, |G|=4, |P cap G|=2 -> 0.5
        let mut p = Array3::<f32>::zeros((1, 1, 8));
        let mut g = Array3::<f32>::zeros((1, 1, 8));
        for i in 0..4 {
            p[[0, 0, i]] = 1.0;
            g[[0, 0, i + 2]] = 1.0;
        }
        assert_eq!(dsc(&vol(p, [1.0; 3]), &vol(g, [1.0; 3])).unwrap(), 0.5);
        // Both empty -> 1.0 by convention.
        let e = vol(Array3::zeros((4, 4, 4)), [1.0; 3]);
        assert_eq!(dsc(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn dsc_symmetric() {
        let a = boxed(8, [0, 0, 0], [5, 6, 2], [1.0; 3]);
        let b = boxed(8, [2, 1, 0], [6, 7, 4], [1.0; 3]);
        assert_eq!(dsc(&a, &b).unwrap(), dsc(&b, &a).unwrap());
    }

    #[test]
    fn dsc_shape_mismatch_errors() {
        let a = vol(Array3::zeros((4, 4, 4)), [1.0; 3]);
        let b = vol(Array3::zeros((4, 4, 5)), [1.0; 3]);
        assert!(dsc(&a, &b).is_err());
    }

    #[test]
    fn surface_single_voxel_and_plane() {
        let mut d = Array3::<f32>::zeros((5, 5, 5));
        d[[2, 2, 2]] = 1.0;
        assert_eq!(extract_surface(&vol(d, [1.0; 3])).unwrap(), vec![[2, 2, 2]]);

        // Solid 3^3 cube: 26 surface voxels (all but the center).
        let cube = boxed(5, [1, 1, 1], [4, 4, 4], [1.0; 3]);
        assert_eq!(extract_surface(&cube).unwrap().len(), 26);

        // 1-voxel-thick plane: every foreground voxel is surface.
        let mut plane = Array3::<f32>::zeros((5, 5, 5));
        plane.slice_mut(ndarray::s![2..3, .., ..]).fill(1.0);
        assert_eq!(extract_surface(&vol(plane, [1.0; 3])).unwrap().len(), 25);
    }

    #[test]
    fn surface_boundary_is_background() {
        // Mask filling the whole volume: surface = voxels touching the
        // volume boundary.
        let full = boxed(3, [0, 0, 0], [3, 3, 3], [1.0; 3]);
        assert_eq!(extract_surface(&full).unwrap().len(), 26);
    }

    #[test]
    fn surface_empty_mask_errors() {
        let e = vol(Array3::zeros((3, 3, 3)), [1.0; 3]);
        assert!(extract_surface(&e).is_err());
    }

    #[test]
    fn assd_identical_zero_and_single_pair() {
        let a = boxed(8, [2, 2, 2], [5, 5, 5], [1.0; 3]);
        assert_eq!(assd(&a, &a).unwrap(), 0.0);
        // Two single voxels 5 apart on the x axis, spacing 1mm -> 5mm.
        let mut p = Array3::<f32>::zeros((8, 8, 8));
        p[[1, 1, 1]] = 1.0;
        let mut g = Array3::<f32>::zeros((8, 8, 8));
        g[[1, 1, 6]] = 1.0;
        assert_eq!(assd(&vol(p, [1.0; 3]), &vol(g, [1.0; 3])).unwrap(), 5.0);
    }

    #[test]
    fn hd95_identical_zero_and_single_pair() {
        let a = boxed(8, [2, 2, 2], [5, 5, 5], [1.0; 3]);
        assert_eq!(hd95(&a, &a).unwrap(), 0.0);
        let mut p = Array3::<f32>::zeros((8, 8, 8));
        p[[0, 0, 0]] = 1.0;
        let mut g = Array3::<f32>::zeros((8, 8, 8));
        g[[0, 3, 4]] = 1.0;
        assert_eq!(hd95(&vol(p, [1.0; 3]), &vol(g, [1.0; 3])).unwrap(), 5.0);
    }

    #[test]
    fn spacing_scales_distances_not_dsc() {
        let p = boxed(8, [1, 1, 1], [4, 5, 4], [1.0; 3]);
        let g = boxed(8, [2, 2, 2], [6, 6, 5], [1.0; 3]);
        let (a1, h1, d1) = (assd(&p, &g).unwrap(), hd95(&p, &g).unwrap(), dsc(&p, &g).unwrap());
        let scale = 2.5;
        let sp = [scale; 3];
        let p2 = Volume::new(p.data.clone(), sp, VolumeKind::Label).unwrap();
        let g2 = Volume::new(g.data.clone(), sp, VolumeKind::Label).unwrap();
        assert!((assd(&p2, &g2).unwrap() - scale * a1).abs() < 1e-12);
        assert!((hd95(&p2, &g2).unwrap() - scale * h1).abs() < 1e-12);
        assert_eq!(dsc(&p2, &g2).unwrap(), d1);
    }

    #[test]
    fn surface_metrics_symmetric() {
        let p = boxed(8, [0, 1, 2], [4, 6, 7], [0.5, 1.0, 2.0]);
        let g = boxed(8, [1, 0, 1], [5, 5, 6], [0.5, 1.0, 2.0]);
        assert_eq!(assd(&p, &g).unwrap(), assd(&g, &p).unwrap());
        assert_eq!(hd95(&p, &g).unwrap(), hd95(&g, &p).unwrap());
    }

    #[test]
    fn assd_empty_mask_errors() {
        let a = boxed(4, [1, 1, 1], [3, 3, 3], [1.0; 3]);
        let e = vol(Array3::zeros((4, 4, 4)), [1.0; 3]);
        assert!(assd(&a, &e).is_err());
        assert!(hd95(&e, &a).is_err());
    }

    #[test]
    fn percentile_interpolates() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        assert_eq!(percentile(&xs, 0.0), 0.0);
        assert_eq!(percentile(&xs, 1.0), 3.0);
        assert!((percentile(&xs, 0.5) - 1.5).abs() < 1e-15);
        // rank = 0.95*3 = 2.85 -> 2 + 0.85
        assert!((percentile(&xs, 0.95) - 2.85).abs() < 1e-12);
        assert_eq!(percentile(&[7.0], 0.95), 7.0);
    }

    #[test]
    fn report_aggregates_match_hand_mean() {
        let cases = vec![
            CaseMetrics { id: "a".into(), dsc: 1.0, assd_mm: 0.0, hd95_mm: 0.0 },
            CaseMetrics { id: "b".into(), dsc: 0.5, assd_mm: 2.0, hd95_mm: 4.0 },
        ];
        let r = MetricReport::from_cases(cases, 0);
        assert!((r.dsc_mean_sd.0 - 0.75).abs() < 1e-15);
        assert!((r.assd_mean_sd.0 - 1.0).abs() < 1e-15);
        // Sample SD of {1.0, 0.5} = sqrt(0.125)
        assert!((r.dsc_mean_sd.1 - 0.125f64.sqrt()).abs() < 1e-15);
        // Single perfect case: (1.0, 0, 0), SD 0.
        let one = MetricReport::from_cases(
            vec![CaseMetrics { id: "c".into(), dsc: 1.0, assd_mm: 0.0, hd95_mm: 0.0 }],
            0,
        );
        assert_eq!(one.dsc_mean_sd, (1.0, 0.0));
        let table = one.to_table("test");
        assert!(table.contains("100.00\u{b1}0.00"), "{table}");
    }

    #[test]
    fn csv_schema() {
        let dir = tempfile::tempdir().unwrap();
        let r = MetricReport::from_cases(
            vec![CaseMetrics { id: "x".into(), dsc: 0.9, assd_mm: 1.5, hd95_mm: 3.0 }],
            0,
        );
        let path = dir.path().join("metrics.csv");
        r.write_csv(&path).unwrap();
        let raw = std::fs::read_to_string(&path).unwrap();
        let mut lines = raw.lines();
        assert_eq!(lines.next().unwrap(), "id,dsc,assd_mm,hd95_mm");
        assert!(lines.next().unwrap().starts_with("x,0.9"));
    }
}
