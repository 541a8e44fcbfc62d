//! Per-structure overlap and surface distance metrics.
//!
//! Surface distances are measured between 4-connected boundary pixels. The
//! default route looks distances up in an exact squared Euclidean distance
//! transform of the other boundary; [`DistanceMode::BruteForce`] compares all
//! boundary pairs and serves as the reference. Both take the square root of the
//! same integer squared distance and sum in the same order, so they agree
//! exactly.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labelspace::{LabelId, LabelMap, LabelScheme};
use crate::model::{ModelError, SegModel};
use crate::synthdata::{stack_images, LabeledImage};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("mask dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("test item {0} carries merged labels")]
    MergedLabelsInTest(usize),
    #[error("{0} predictions for {1} test items")]
    CountMismatch(usize, usize),
    #[error("malformed report: {0}")]
    Report(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Binary occupancy of one structure.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<bool>,
    /// Physical size of a pixel side.
    pub spacing: f64,
}

impl StructureMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Self {
        assert_eq!(values.len(), height * width, "mask size");
        Self { height, width, values, spacing: 1.0 }
    }

    pub fn from_labels(labels: &LabelMap, id: LabelId) -> Self {
        Self::new(labels.height, labels.width, labels.values.iter().map(|&v| v == id).collect())
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.values.iter().any(|&v| v)
    }

    fn at(&self, r: isize, c: isize) -> bool {
        r >= 0 && c >= 0 && (r as usize) < self.height && (c as usize) < self.width && self.values[r as usize * self.width + c as usize]
    }

    /// Length of the image diagonal in physical units.
    pub fn diagonal(&self) -> f64 {
        ((self.height * self.height + self.width * self.width) as f64).sqrt() * self.spacing
    }
}

fn check_dims(a: &StructureMask, b: &StructureMask) -> Result<(), MetricError> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(MetricError::DimensionMismatch(a.height, a.width, b.height, b.width));
    }
    Ok(())
}

/// `2|a∩b| / (|a|+|b|)`, or 1 when both are empty.
pub fn dice(a: &StructureMask, b: &StructureMask) -> Result<f64, MetricError> {
    check_dims(a, b)?;
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.values.iter().zip(&b.values) {
        na += usize::from(x);
        nb += usize::from(y);
        inter += usize::from(x && y);
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Occupied pixels with a 4-neighbour that is unoccupied or off the image,
/// as (row, col) in row-major order.
pub fn boundary_pixels(mask: &StructureMask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in 0..mask.height {
        for c in 0..mask.width {
            let (ri, ci) = (r as isize, c as isize);
            if mask.at(ri, ci) && !(mask.at(ri - 1, ci) && mask.at(ri + 1, ci) && mask.at(ri, ci - 1) && mask.at(ri, ci + 1)) {
                out.push((r, c));
            }
        }
    }
    out
}

const FAR: f64 = 1e20;

/// Exact 1-D squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] && k > 0 {
                k -= 1;
                continue;
            }
            if s <= z[k] {
                // k == 0 and the new parabola dominates everywhere
                v[0] = q;
                z[1] = f64::INFINITY;
                break;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let d = q as f64 - p as f64;
        *o = d * d + f[p];
    }
}

/// Squared Euclidean distance (in pixels²) from every pixel to the nearest seed.
fn squared_distance_map(height: usize, width: usize, seeds: &[(usize, usize)]) -> Vec<f64> {
    let mut grid = vec![FAR; height * width];
    for &(r, c) in seeds {
        grid[r * width + c] = 0.0;
    }
    let n = height.max(width);
    let (mut f, mut out, mut v, mut z) = (vec![0.0; n], vec![0.0; n], vec![0usize; n], vec![0.0; n + 1]);
    for c in 0..width {
        for r in 0..height {
            f[r] = grid[r * width + c];
        }
        edt_1d(&f[..height], &mut out[..height], &mut v, &mut z);
        for r in 0..height {
            grid[r * width + c] = out[r];
        }
    }
    for r in 0..height {
        f[..width].copy_from_slice(&grid[r * width..(r + 1) * width]);
        edt_1d(&f[..width], &mut out[..width], &mut v, &mut z);
        grid[r * width..(r + 1) * width].copy_from_slice(&out[..width]);
    }
    grid
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DistanceMode {
    #[default]
    Transform,
    BruteForce,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceDistances {
    pub assd: f64,
    pub hausdorff: f64,
    /// Exactly one mask was empty; both values are the image diagonal.
    pub one_empty: bool,
}

/// Distance from each point of `from` to its nearest point of `to`.
fn directed(from: &[(usize, usize)], to: &[(usize, usize)], height: usize, width: usize, mode: DistanceMode) -> Vec<f64> {
    match mode {
        DistanceMode::Transform => {
            let map = squared_distance_map(height, width, to);
            from.iter().map(|&(r, c)| map[r * width + c].sqrt()).collect()
        }
        DistanceMode::BruteForce => from
            .iter()
            .map(|&(r, c)| {
                let best = to
                    .iter()
                    .map(|&(r2, c2)| {
                        let (dr, dc) = (r as i64 - r2 as i64, c as i64 - c2 as i64);
                        (dr * dr + dc * dc) as f64
                    })
                    .fold(f64::INFINITY, f64::min);
                best.sqrt()
            })
            .collect(),
    }
}

pub fn surface_distances(a: &StructureMask, b: &StructureMask, mode: DistanceMode) -> Result<SurfaceDistances, MetricError> {
    check_dims(a, b)?;
    let (ba, bb) = (boundary_pixels(a), boundary_pixels(b));
    match (ba.is_empty(), bb.is_empty()) {
        (true, true) => return Ok(SurfaceDistances { assd: 0.0, hausdorff: 0.0, one_empty: false }),
        (true, false) | (false, true) => {
            let d = a.diagonal();
            return Ok(SurfaceDistances { assd: d, hausdorff: d, one_empty: true });
        }
        _ => {}
    }
    let dab = directed(&ba, &bb, a.height, a.width, mode);
    let dba = directed(&bb, &ba, a.height, a.width, mode);
    // Summing each direction separately keeps the result exactly symmetric.
    let (sab, sba) = (dab.iter().sum::<f64>(), dba.iter().sum::<f64>());
    let max = dab.iter().chain(&dba).fold(0.0f64, |m, &d| m.max(d));
    Ok(SurfaceDistances { assd: (sab + sba) / (ba.len() + bb.len()) as f64 * a.spacing, hausdorff: max * a.spacing, one_empty: false })
}

pub fn assd(a: &StructureMask, b: &StructureMask) -> Result<f64, MetricError> {
    Ok(surface_distances(a, b, DistanceMode::Transform)?.assd)
}

pub fn hausdorff(a: &StructureMask, b: &StructureMask) -> Result<f64, MetricError> {
    Ok(surface_distances(a, b, DistanceMode::Transform)?.hausdorff)
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureStats {
    pub structure: String,
    pub dsc: Stat,
    pub assd: Stat,
    pub hd: Stat,
    pub n_items: usize,
    /// Items where the structure is absent from prediction and truth; left
    /// out of the distance statistics.
    pub n_excluded: usize,
    /// Items where exactly one side was empty and the diagonal was used.
    pub n_one_empty: usize,
}

/// Accuracy of one trained arm on the test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: String,
    /// One row per non-background structure, by label id.
    pub structures: Vec<StructureStats>,
    /// Mean of the per-structure means and of the per-structure stds.
    pub average: StructureStats,
}

pub const REPORT_HEADER: &str = "arm,structure,dsc_mean,dsc_std,assd_mean,assd_std,hd_mean,hd_std,n_items,n_excluded";
pub const AVERAGE_ROW: &str = "average";

impl ArmReport {
    pub fn structure(&self, name: &str) -> Option<&StructureStats> {
        self.structures.iter().find(|s| s.structure == name)
    }

    /// Mean DSC over the named structures.
    pub fn mean_dsc_of(&self, names: &[&str]) -> Option<f64> {
        let v: Option<Vec<f64>> = names.iter().map(|n| self.structure(n).map(|s| s.dsc.mean)).collect();
        v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn rows(&self) -> impl Iterator<Item = &StructureStats> {
        self.structures.iter().chain(std::iter::once(&self.average))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for row in self.rows() {
            writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}",
                self.arm, row.structure, row.dsc.mean, row.dsc.std, row.assd.mean, row.assd.std, row.hd.mean, row.hd.std, row.n_items, row.n_excluded
            )
            .unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), MetricError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Parses a report CSV. Values come back as printed, so a report read
    /// from disk may differ from the in-memory one in the seventh decimal.
    pub fn from_csv(text: &str) -> Result<Self, MetricError> {
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        if header.join(",") != REPORT_HEADER {
            return Err(MetricError::Report(format!("unexpected header {}", header.join(","))));
        }
        let mut arm = None;
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record?;
            let num = |i: usize| record[i].parse::<f64>().map_err(|e| MetricError::Report(format!("{}: {e}", &record[i])));
            let int = |i: usize| record[i].parse::<usize>().map_err(|e| MetricError::Report(format!("{}: {e}", &record[i])));
            if arm.get_or_insert_with(|| record[0].to_string()) != &record[0] {
                return Err(MetricError::Report("rows from more than one arm".into()));
            }
            rows.push(StructureStats {
                structure: record[1].to_string(),
                dsc: Stat { mean: num(2)?, std: num(3)? },
                assd: Stat { mean: num(4)?, std: num(5)? },
                hd: Stat { mean: num(6)?, std: num(7)? },
                n_items: int(8)?,
                n_excluded: int(9)?,
                n_one_empty: 0,
            });
        }
        let average = rows.pop().filter(|r| r.structure == AVERAGE_ROW).ok_or_else(|| MetricError::Report("missing average row".into()))?;
        Ok(Self { arm: arm.unwrap_or_default(), structures: rows, average })
    }

    pub fn read_csv(path: &Path) -> Result<Self, MetricError> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.filter(|v| !v.is_nan()).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Scores predicted label maps against complete ground truth.
pub fn evaluate_predictions(arm: &str, predictions: &[LabelMap], truths: &[LabelMap], scheme: &LabelScheme) -> Result<ArmReport, MetricError> {
    if predictions.len() != truths.len() {
        return Err(MetricError::CountMismatch(predictions.len(), truths.len()));
    }
    if let Some(i) = truths.iter().position(|t| scheme.validate_base_only(t).is_err()) {
        return Err(MetricError::MergedLabelsInTest(i));
    }
    let mut structures = Vec::new();
    for id in 1..scheme.num_base_labels() as LabelId {
        let (mut dscs, mut assds, mut hds) = (Vec::new(), Vec::new(), Vec::new());
        let (mut excluded, mut one_empty) = (0, 0);
        for (p, t) in predictions.iter().zip(truths) {
            let (pm, tm) = (StructureMask::from_labels(p, id), StructureMask::from_labels(t, id));
            dscs.push(dice(&pm, &tm)?);
            if pm.is_empty() && tm.is_empty() {
                excluded += 1;
                continue;
            }
            let d = surface_distances(&pm, &tm, DistanceMode::Transform)?;
            one_empty += usize::from(d.one_empty);
            assds.push(d.assd);
            hds.push(d.hausdorff);
        }
        structures.push(StructureStats {
            structure: scheme.name(id),
            dsc: Stat::of(&dscs),
            assd: Stat::of(&assds),
            hd: Stat::of(&hds),
            n_items: truths.len(),
            n_excluded: excluded,
            n_one_empty: one_empty,
        });
    }
    let avg = |f: fn(&StructureStats) -> Stat| Stat { mean: mean_of(structures.iter().map(|s| f(s).mean)), std: mean_of(structures.iter().map(|s| f(s).std)) };
    let average = StructureStats {
        structure: AVERAGE_ROW.into(),
        dsc: avg(|s| s.dsc),
        assd: avg(|s| s.assd),
        hd: avg(|s| s.hd),
        n_items: truths.len(),
        n_excluded: structures.iter().map(|s| s.n_excluded).sum(),
        n_one_empty: structures.iter().map(|s| s.n_one_empty).sum(),
    };
    Ok(ArmReport { arm: arm.into(), structures, average })
}

/// Predicts every test item (argmax, ties to the lowest channel) and scores it.
pub fn evaluate_arm(arm: &str, model: &SegModel, test: &[LabeledImage], scheme: &LabelScheme) -> Result<ArmReport, MetricError> {
    let mut predictions = Vec::with_capacity(test.len());
    for chunk in test.chunks(8) {
        let refs: Vec<&LabeledImage> = chunk.iter().collect();
        predictions.extend(model.predict(&stack_images(&refs))?);
    }
    let truths: Vec<LabelMap> = test.iter().map(|t| t.labels.clone()).collect();
    evaluate_predictions(arm, &predictions, &truths, scheme)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> StructureMask {
        let mut m = StructureMask::new(h, w, vec![false; h * w]);
        for &(r, c) in on {
            m.values[r * w + c] = true;
        }
        m
    }

    #[test]
    fn dice_examples() {
        let a = mask(3, 3, &[(0, 0), (0, 1)]);
        let b = mask(3, 3, &[(0, 1), (1, 1)]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &mask(3, 3, &[(2, 2)])).unwrap(), 0.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
        assert_eq!(dice(&mask(3, 3, &[]), &mask(3, 3, &[])).unwrap(), 1.0);
        assert!(matches!(dice(&a, &mask(3, 4, &[])), Err(MetricError::DimensionMismatch(..))));
    }

    #[test]
    fn boundary_examples() {
        assert_eq!(boundary_pixels(&mask(4, 4, &[(2, 1)])), vec![(2, 1)]);
        let block: Vec<_> = (1..4).flat_map(|r| (1..4).map(move |c| (r, c))).collect();
        let b = boundary_pixels(&mask(5, 5, &block));
        assert_eq!(b.len(), 8);
        assert!(!b.contains(&(2, 2)));
        assert!(boundary_pixels(&mask(5, 5, &[])).is_empty());
        // Pixels on the image edge count as boundary.
        let full = StructureMask::new(3, 3, vec![true; 9]);
        assert_eq!(boundary_pixels(&full).len(), 8);
    }

    #[test]
    fn distance_examples() {
        let a = mask(6, 6, &[(0, 0)]);
        let b = mask(6, 6, &[(3, 4)]);
        for mode in [DistanceMode::Transform, DistanceMode::BruteForce] {
            let d = surface_distances(&a, &b, mode).unwrap();
            assert_eq!((d.assd, d.hausdorff), (5.0, 5.0));
        }
        let block: Vec<_> = (1..4).flat_map(|r| (1..4).map(move |c| (r, c))).collect();
        let m = mask(6, 6, &block);
        assert_eq!((assd(&m, &m).unwrap(), hausdorff(&m, &m).unwrap()), (0.0, 0.0));

        let empty = mask(6, 8, &[]);
        let d = surface_distances(&empty, &mask(6, 8, &[(1, 1)]), DistanceMode::Transform).unwrap();
        assert!(d.one_empty && d.assd == 10.0 && d.hausdorff == 10.0);
        assert_eq!(hausdorff(&empty, &empty).unwrap(), 0.0);

        let mut scaled_a = a.clone();
        scaled_a.spacing = 0.5;
        let mut scaled_b = b.clone();
        scaled_b.spacing = 0.5;
        assert_eq!(hausdorff(&scaled_a, &scaled_b).unwrap(), 2.5);
    }

    #[test]
    fn transform_matches_brute_force_on_shapes() {
        let ring: Vec<_> = (0..12).flat_map(|r| (0..12).map(move |c| (r, c))).filter(|&(r, c)| {
            let d = (r as f64 - 5.5).hypot(c as f64 - 5.5);
            (2.5..5.0).contains(&d)
        }).collect();
        let a = mask(12, 12, &ring);
        let b = mask(12, 12, &[(0, 11), (11, 0), (6, 6), (5, 5)]);
        assert_eq!(
            surface_distances(&a, &b, DistanceMode::Transform).unwrap(),
            surface_distances(&a, &b, DistanceMode::BruteForce).unwrap()
        );
    }

    #[test]
    fn evaluation_of_perfect_and_uniform_predictions() {
        let scheme = crate::synthdata::Preset::Thigh.scheme();
        let g = crate::synthdata::GeometryConfig::default();
        let truths: Vec<LabelMap> = (0..3).map(|s| crate::synthdata::generate_scene(s, &g).unwrap().labels).collect();
        let r = evaluate_predictions("ub", &truths, &truths, &scheme).unwrap();
        for row in r.rows() {
            assert_eq!((row.dsc.mean, row.assd.mean, row.hd.mean), (1.0, 0.0, 0.0));
        }
        assert_eq!(r.structures.len(), 4);

        let background: Vec<LabelMap> = truths.iter().map(|t| LabelMap::filled(t.height, t.width, 0)).collect();
        let r = evaluate_predictions("lb", &background, &truths, &scheme).unwrap();
        assert!(r.structures.iter().all(|s| s.dsc.mean == 0.0 && s.n_one_empty == 3));

        let merged = vec![LabelMap::filled(64, 64, 5)];
        assert!(matches!(evaluate_predictions("x", &merged, &merged, &scheme), Err(MetricError::MergedLabelsInTest(0))));
    }

    #[test]
    fn report_csv_round_trip() {
        let scheme = crate::synthdata::Preset::Cardiac.scheme();
        let g = crate::synthdata::GeometryConfig { preset: crate::synthdata::Preset::Cardiac, ..Default::default() };
        let truths: Vec<LabelMap> = (0..4).map(|s| crate::synthdata::generate_scene(s, &g).unwrap().labels).collect();
        let preds: Vec<LabelMap> = (4..8).map(|s| crate::synthdata::generate_scene(s, &g).unwrap().labels).collect();
        let r = evaluate_predictions("naive", &preds, &truths, &scheme).unwrap();
        let csv = r.to_csv();
        assert!(csv.starts_with(REPORT_HEADER));
        let back = ArmReport::from_csv(&csv).unwrap();
        assert_eq!(back.to_csv(), csv);
        assert_eq!(back.structures.len(), 3);
        assert!(ArmReport::from_csv("a,b\n1,2\n").is_err());
    }
}
