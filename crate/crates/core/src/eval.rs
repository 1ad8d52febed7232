//! Metrics: mean absolute depth error, end-point error, D1 outlier rates,
//! per-distance median errors and a quadratic trend fit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{depth_to_disparity, CameraRig, ScalarField};
use crate::io::{read_sample, write_atomic, Manifest};
use crate::refine::{PreparedSample, RefineNetwork};

/// Ground truth beyond this depth is never scored or trained on.
pub const DEPTH_CAP_M: f64 = 100.0;

/// Pixels that count: ground truth valid, estimate valid, `d_gt <= d_max`
/// and `z_gt <= 100 m`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalMask(Vec<bool>);

impl EvalMask {
    pub fn new(
        gt_valid: &[bool],
        z_gt: &ScalarField,
        d_gt: &ScalarField,
        estimate_valid: &[bool],
        d_max: f64,
    ) -> Result<Self> {
        Self::with_depth_cap(gt_valid, z_gt, d_gt, estimate_valid, d_max, DEPTH_CAP_M)
    }

    pub fn with_depth_cap(
        gt_valid: &[bool],
        z_gt: &ScalarField,
        d_gt: &ScalarField,
        estimate_valid: &[bool],
        d_max: f64,
        depth_cap: f64,
    ) -> Result<Self> {
        let n = z_gt.len();
        if gt_valid.len() != n || d_gt.len() != n || estimate_valid.len() != n {
            return Err(Error::DimensionMismatch("mask inputs differ in size".into()));
        }
        let mask = (0..n)
            .map(|i| {
                gt_valid[i]
                    && z_gt.valid()[i]
                    && d_gt.valid()[i]
                    && estimate_valid[i]
                    && d_gt.values()[i] <= d_max
                    && z_gt.values()[i] <= depth_cap
            })
            .collect();
        Ok(Self(mask))
    }

    pub fn from_vec(mask: Vec<bool>) -> Self {
        Self(mask)
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&m| m).count()
    }
}

fn masked_pairs<'a>(
    a: &'a ScalarField,
    b: &'a ScalarField,
    mask: &'a [bool],
) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    a.check_same_dims(b, "metric inputs")?;
    if mask.len() != a.len() {
        return Err(Error::DimensionMismatch("mask size differs from field".into()));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyMask);
    }
    Ok(a
        .values()
        .iter()
        .zip(b.values())
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&x, &y), _)| (x, y)))
}

fn masked_abs_diffs<'a>(
    a: &'a ScalarField,
    b: &'a ScalarField,
    mask: &'a [bool],
) -> Result<impl Iterator<Item = f64> + 'a> {
    Ok(masked_pairs(a, b, mask)?.map(|(x, y)| (x - y).abs()))
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Mean of `|z - z_gt|` over the mask, in meters.
pub fn mean_abs_depth_error(z: &ScalarField, z_gt: &ScalarField, mask: &[bool]) -> Result<f64> {
    Ok(mean(masked_abs_diffs(z, z_gt, mask)?))
}

/// End-point error: mean of `|d - d_gt|` over the mask, in pixels.
pub fn epe(d: &ScalarField, d_gt: &ScalarField, mask: &[bool]) -> Result<f64> {
    Ok(mean(masked_abs_diffs(d, d_gt, mask)?))
}

/// Fraction of masked pixels with `|d - d_gt| > threshold_px`. The test is
/// written as `d > d_gt + t || d < d_gt - t` so that an estimate built as
/// `d_gt + t` is never counted through rounding of the difference.
pub fn d1_rate(d: &ScalarField, d_gt: &ScalarField, mask: &[bool], threshold_px: f64) -> Result<f64> {
    if !(threshold_px > 0.0) {
        return Err(Error::InvalidParameter(format!("D1 threshold must be positive, got {threshold_px}")));
    }
    let pairs = masked_pairs(d, d_gt, mask)?;
    Ok(mean(pairs.map(|(e, g)| outlier(e, g, threshold_px))))
}

fn outlier(estimate: f64, truth: f64, threshold: f64) -> f64 {
    if estimate > truth + threshold || estimate < truth - threshold {
        1.0
    } else {
        0.0
    }
}

/// Disparity implied by a (refined) depth map.
pub fn refined_disparity(z: &ScalarField, rig: &CameraRig) -> ScalarField {
    depth_to_disparity(z, rig)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinStat {
    pub center_m: f64,
    pub median_error_mm: f64,
    pub count: usize,
}

/// Absolute errors grouped by ground-truth distance, before reduction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ErrorSamples {
    /// `(z_gt, |z - z_gt|)` in meters.
    pub pairs: Vec<(f64, f64)>,
}

impl ErrorSamples {
    pub fn collect(z: &ScalarField, z_gt: &ScalarField, mask: &[bool]) -> Result<Self> {
        let errs = masked_abs_diffs(z, z_gt, mask)?;
        let gts = z_gt.values().iter().zip(mask).filter(|(_, &m)| m).map(|(&g, _)| g);
        Ok(Self {
            pairs: gts.zip(errs).collect(),
        })
    }

    pub fn extend(&mut self, other: ErrorSamples) {
        self.pairs.extend(other.pairs);
    }

    /// Median error per `floor(z_gt / bin_width)` bin, in millimeters.
    pub fn bin_medians(&self, bin_width_m: f64) -> Result<Vec<BinStat>> {
        if !(bin_width_m > 0.0 && bin_width_m.is_finite()) {
            return Err(Error::InvalidParameter(format!("bin width must be positive, got {bin_width_m}")));
        }
        if self.pairs.is_empty() {
            return Err(Error::EmptyMask);
        }
        let mut bins: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
        for &(g, e) in &self.pairs {
            bins.entry((g / bin_width_m).floor() as i64).or_default().push(e * 1000.0);
        }
        Ok(bins
            .into_iter()
            .map(|(k, mut v)| {
                v.sort_by(f64::total_cmp);
                let n = v.len();
                let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
                BinStat {
                    center_m: (k as f64 + 0.5) * bin_width_m,
                    median_error_mm: median,
                    count: n,
                }
            })
            .collect())
    }
}

pub fn bin_median_errors(z: &ScalarField, z_gt: &ScalarField, mask: &[bool], bin_width_m: f64) -> Result<Vec<BinStat>> {
    ErrorSamples::collect(z, z_gt, mask)?.bin_medians(bin_width_m)
}

/// Least-squares `y = a2 x^2 + a1 x + a0` via the 3x3 normal equations.
/// Returns `(a2, a1, a0)`.
pub fn quadfit(points: &[(f64, f64)]) -> Result<(f64, f64, f64)> {
    let mut distinct: Vec<f64> = points.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::RankDeficient);
    }
    // Center and scale x so the normal matrix stays well conditioned.
    let mid = 0.5 * (distinct[0] + distinct[distinct.len() - 1]);
    let half = 0.5 * (distinct[distinct.len() - 1] - distinct[0]);
    let mut ata = [[0.0f64; 3]; 3];
    let mut aty = [0.0f64; 3];
    for &(x, y) in points {
        let t = (x - mid) / half;
        let row = [t * t, t, 1.0];
        for i in 0..3 {
            aty[i] += row[i] * y;
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
        }
    }
    let [b2, b1, b0] = solve3(ata, aty)?;
    // y = b2 t^2 + b1 t + b0 with t = (x - mid) / half
    let a2 = b2 / (half * half);
    let a1 = b1 / half - 2.0 * b2 * mid / (half * half);
    let a0 = b0 - b1 * mid / half + b2 * mid * mid / (half * half);
    Ok((a2, a1, a0))
}

/// Gaussian elimination with partial pivoting.
fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> Result<[f64; 3]> {
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        if a[piv][col].abs() <= 1e-12 * scale {
            return Err(Error::RankDeficient);
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..3 {
            let f = a[r][col] / a[col][col];
            for c in col..3 {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for r in (0..3).rev() {
        let s: f64 = (r + 1..3).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Ok(x)
}

/// Metrics for one variant over a whole dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantReport {
    pub name: String,
    pub depth_error_m: f64,
    pub epe_px: f64,
    pub d1_1px: f64,
    pub d1_3px: f64,
    pub bins: Vec<BinStat>,
    /// `(a2, a1, a0)` of the binned medians; `None` with fewer than three bins.
    pub quad: Option<(f64, f64, f64)>,
    pub errors: ErrorSamples,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub pixel_count: usize,
    pub variants: Vec<VariantReport>,
}

impl EvalReport {
    pub fn variant(&self, name: &str) -> Option<&VariantReport> {
        self.variants.iter().find(|v| v.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub d_max: f64,
    pub z_cap: f64,
    pub bin_width_m: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            d_max: 128.0,
            z_cap: 100.0,
            bin_width_m: 1.0,
        }
    }
}

/// Per-pixel depth and disparity errors pooled over samples.
#[derive(Default)]
struct Accumulator {
    depth_abs: Vec<f64>,
    /// `(estimate, truth)` disparity pairs.
    disp: Vec<(f64, f64)>,
    errors: ErrorSamples,
}

impl Accumulator {
    fn add(&mut self, z: &ScalarField, d: &ScalarField, sample: &PreparedSample) -> Result<()> {
        let mask = sample.mask.as_slice();
        self.depth_abs.extend(masked_abs_diffs(z, &sample.z_gt, mask)?);
        self.disp.extend(masked_pairs(d, &sample.d_gt, mask)?);
        self.errors.extend(ErrorSamples::collect(z, &sample.z_gt, mask)?);
        Ok(())
    }

    fn finish(self, name: &str, bin_width_m: f64) -> Result<VariantReport> {
        if self.depth_abs.is_empty() {
            return Err(Error::EmptyMask);
        }
        let rate = |t: f64| mean(self.disp.iter().map(|&(e, g)| outlier(e, g, t)));
        let bins = self.errors.bin_medians(bin_width_m)?;
        let series: Vec<(f64, f64)> = bins.iter().map(|b| (b.center_m, b.median_error_mm)).collect();
        let quad = match quadfit(&series) {
            Ok(q) => Some(q),
            Err(Error::RankDeficient) => None,
            Err(e) => return Err(e),
        };
        Ok(VariantReport {
            name: name.to_string(),
            depth_error_m: mean(self.depth_abs.iter().copied()),
            epe_px: mean(self.disp.iter().map(|(e, g)| (e - g).abs())),
            d1_1px: rate(1.0),
            d1_3px: rate(3.0),
            bins,
            quad,
            errors: self.errors,
        })
    }
}

/// Disparity of a refined depth map. Pixels whose depth the network left
/// bit-for-bit unchanged keep the baseline disparity; all others are
/// back-converted with [`refined_disparity`].
pub fn refined_disparity_from_baseline(z: &ScalarField, sample: &PreparedSample, rig: &CameraRig) -> ScalarField {
    let mut d = refined_disparity(z, rig);
    let keep: Vec<usize> = (0..z.len())
        .filter(|&i| z.valid()[i] && sample.d_a.valid()[i] && z.values()[i] == sample.z_a.values()[i])
        .collect();
    let values = d.values_mut();
    for i in keep {
        values[i] = sample.d_a.values()[i];
    }
    d
}

/// Score prepared samples. Pixels are pooled over all samples, so every
/// masked pixel has equal weight. Samples with an empty mask contribute
/// nothing.
pub fn evaluate_prepared(
    samples: &[PreparedSample],
    rig: &CameraRig,
    net: Option<&RefineNetwork>,
    bin_width_m: f64,
) -> Result<EvalReport> {
    let refined: Vec<Option<ScalarField>> = match net {
        Some(net) => samples
            .par_iter()
            .map(|s| net.refine(s).map(Some))
            .collect::<Result<Vec<_>>>()?,
        None => vec![None; samples.len()],
    };
    let mut base = Accumulator::default();
    let mut refd = Accumulator::default();
    let mut pixel_count = 0;
    for (s, r) in samples.iter().zip(&refined) {
        if s.mask.count() == 0 {
            continue;
        }
        pixel_count += s.mask.count();
        base.add(&s.z_a, &s.d_a, s)?;
        if let Some(z) = r {
            refd.add(z, &refined_disparity_from_baseline(z, s, rig), s)?;
        }
    }
    let mut variants = vec![base.finish("baseline", bin_width_m)?];
    if net.is_some() {
        variants.push(refd.finish("refined", bin_width_m)?);
    }
    Ok(EvalReport { pixel_count, variants })
}

/// Load every sample of a dataset (baseline disparity required) and score
/// the baseline and, with a network, the refined depth.
pub fn evaluate(root: &Path, net: Option<&RefineNetwork>, opts: &EvalOptions) -> Result<EvalReport> {
    let manifest = Manifest::read(root)?;
    let samples = manifest
        .entries
        .par_iter()
        .map(|e| {
            let rec = read_sample(root, &manifest.rig, e)?;
            PreparedSample::from_record(&rec, opts.d_max, opts.z_cap)
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_prepared(&samples, &manifest.rig, net, opts.bin_width_m)
}

fn fmt_num(v: f64) -> String {
    format!("{v:.9e}")
}

pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("variant,depth_error_m,epe_px,d1_1px,d1_3px,a2,a1,a0\n");
    for v in &report.variants {
        let (a2, a1, a0) = match v.quad {
            Some((a2, a1, a0)) => (fmt_num(a2), fmt_num(a1), fmt_num(a0)),
            None => ("nan".into(), "nan".into(), "nan".into()),
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{a2},{a1},{a0}",
            v.name,
            fmt_num(v.depth_error_m),
            fmt_num(v.epe_px),
            fmt_num(v.d1_1px),
            fmt_num(v.d1_3px)
        );
    }
    out
}

pub fn bins_csv(bins: &[BinStat]) -> String {
    let mut out = String::from("bin_center_m,median_error_mm,count\n");
    for b in bins {
        let _ = writeln!(out, "{},{},{}", b.center_m, fmt_num(b.median_error_mm), b.count);
    }
    out
}

/// Raw `(z_gt, abs_err)` pairs so the binning can be redone later.
pub fn errors_tsv(errors: &ErrorSamples) -> String {
    let mut out = String::from("z_gt_m\tabs_error_m\n");
    for &(g, e) in &errors.pairs {
        let _ = writeln!(out, "{g:?}\t{e:?}");
    }
    out
}

pub fn parse_errors_tsv(text: &str, path: &Path) -> Result<ErrorSamples> {
    let bad = |detail: String| Error::Format {
        format: "errors table",
        path: path.to_path_buf(),
        detail,
    };
    let mut lines = text.lines();
    if lines.next() != Some("z_gt_m\tabs_error_m") {
        return Err(bad("missing header".into()));
    }
    let pairs = lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let (g, e) = l.split_once('\t').ok_or_else(|| bad(format!("row {} lacks a tab", i + 1)))?;
            let parse = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("row {}: bad number {s:?}", i + 1)));
            Ok((parse(g)?, parse(e)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ErrorSamples { pairs })
}

/// `report.csv`, `bins_<variant>.csv` and `errors_<variant>.tsv`.
pub fn write_report(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    write_atomic(&dir.join("report.csv"), report_csv(report).as_bytes())?;
    for v in &report.variants {
        write_atomic(&dir.join(format!("bins_{}.csv", v.name)), bins_csv(&v.bins).as_bytes())?;
        write_atomic(&dir.join(format!("errors_{}.tsv", v.name)), errors_tsv(&v.errors).as_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(values: &[f64]) -> ScalarField {
        ScalarField::from_values(values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn depth_error_examples() {
        let gt = field(&[2.0, 4.0, 6.0, 8.0]);
        let all = [true; 4];
        assert_eq!(mean_abs_depth_error(&gt, &gt, &all).unwrap(), 0.0);
        assert_eq!(mean_abs_depth_error(&field(&[2.5, 4.5, 6.5, 8.5]), &gt, &all).unwrap(), 0.5);
        assert_eq!(mean_abs_depth_error(&field(&[3.0, 4.0, 7.0, 8.0]), &gt, &all).unwrap(), 0.5);
        assert!(matches!(mean_abs_depth_error(&gt, &gt, &[false; 4]), Err(Error::EmptyMask)));
    }

    #[test]
    fn epe_and_d1_examples() {
        let gt = field(&[10.0, 20.0, 30.0, 40.0]);
        let all = [true; 4];
        let plus2 = field(&[12.0, 22.0, 32.0, 42.0]);
        let plus4 = field(&[14.0, 24.0, 34.0, 44.0]);
        let half4 = field(&[14.0, 20.0, 34.0, 40.0]);
        assert_eq!(epe(&gt, &gt, &all).unwrap(), 0.0);
        assert_eq!(epe(&plus2, &gt, &all).unwrap(), 2.0);
        assert_eq!(epe(&half4, &gt, &all).unwrap(), 2.0);
        assert_eq!(d1_rate(&plus4, &gt, &all, 3.0).unwrap(), 1.0);
        assert_eq!(d1_rate(&plus2, &gt, &all, 3.0).unwrap(), 0.0);
        assert_eq!(d1_rate(&plus2, &gt, &all, 1.0).unwrap(), 1.0);
        assert_eq!(d1_rate(&half4, &gt, &all, 3.0).unwrap(), 0.5);
        // strict inequality at the threshold
        assert_eq!(d1_rate(&plus2, &gt, &all, 2.0).unwrap(), 0.0);
        assert!(d1_rate(&plus2, &gt, &all, 0.0).is_err());
    }

    #[test]
    fn refined_disparity_examples() {
        let rig = CameraRig::new(0.5, 200.0).unwrap();
        let z = ScalarField::new(2, 1, vec![1.0, 3.0], vec![true, false]).unwrap();
        let d = refined_disparity(&z, &rig);
        assert_eq!(d.values()[0], 100.0);
        assert!(!d.valid()[1]);
    }

    #[test]
    fn bin_examples() {
        let gt = field(&[5.2, 5.2, 5.2]);
        let z = field(&[5.3, 5.1, 5.3]);
        let bins = bin_median_errors(&z, &gt, &[true; 3], 1.0).unwrap();
        assert_eq!(bins.len(), 1);
        assert_eq!(bins[0].center_m, 5.5);
        assert!((bins[0].median_error_mm - 100.0).abs() < 1e-9);
        assert_eq!(bins[0].count, 3);

        let odd = ErrorSamples {
            pairs: vec![(1.0, 0.003), (1.5, 0.001), (1.2, 0.002)],
        };
        assert!((odd.bin_medians(1.0).unwrap()[0].median_error_mm - 2.0).abs() < 1e-12);
        let even = ErrorSamples {
            pairs: vec![(1.0, 0.004), (1.5, 0.001), (1.2, 0.002), (1.9, 0.003)],
        };
        assert!((even.bin_medians(1.0).unwrap()[0].median_error_mm - 2.5).abs() < 1e-12);
    }

    #[test]
    fn empty_bins_are_omitted() {
        let e = ErrorSamples {
            pairs: vec![(0.5, 0.1), (3.5, 0.2)],
        };
        let centers: Vec<f64> = e.bin_medians(1.0).unwrap().iter().map(|b| b.center_m).collect();
        assert_eq!(centers, vec![0.5, 3.5]);
    }

    #[test]
    fn quadfit_exact_polynomials() {
        let (a2, a1, a0) = quadfit(&[(1.0, 2.0), (2.0, 8.0), (3.0, 18.0)]).unwrap();
        assert!((a2 - 2.0).abs() < 1e-9 && a1.abs() < 1e-9 && a0.abs() < 1e-9);
        let (a2, a1, a0) = quadfit(&[(0.0, 1.0), (1.0, 2.0), (2.0, 3.0), (5.0, 6.0)]).unwrap();
        assert!(a2.abs() < 1e-9 && (a1 - 1.0).abs() < 1e-9 && (a0 - 1.0).abs() < 1e-9);
    }

    #[test]
    fn quadfit_needs_three_distinct_abscissae() {
        assert!(matches!(quadfit(&[(1.0, 1.0), (1.0, 2.0), (2.0, 3.0)]), Err(Error::RankDeficient)));
    }

    #[test]
    fn report_csv_layout() {
        let report = EvalReport {
            pixel_count: 1,
            variants: vec![VariantReport {
                name: "baseline".into(),
                depth_error_m: 0.5,
                epe_px: 1.0,
                d1_1px: 0.0,
                d1_3px: 0.0,
                bins: vec![],
                quad: None,
                errors: ErrorSamples::default(),
            }],
        };
        let csv = report_csv(&report);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("variant,depth_error_m,epe_px,d1_1px,d1_3px,a2,a1,a0"));
        assert!(lines.next().unwrap().starts_with("baseline,5.000000000e-1,"));
    }

    #[test]
    fn errors_table_round_trips() {
        let e = ErrorSamples {
            pairs: vec![(1.25, 0.1), (97.3, 1e-17)],
        };
        let back = parse_errors_tsv(&errors_tsv(&e), Path::new("e")).unwrap();
        assert_eq!(back, e);
    }
}
