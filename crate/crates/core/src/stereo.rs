//! Census-transform block matching with winner-take-all, parabolic
//! sub-pixel refinement and a left-right consistency check.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::ScalarField;
use crate::imaging::Image;
use crate::io::{read_pnm, write_pfm, Manifest};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchParams {
    pub d_max: usize,
    pub census_window: usize,
    pub agg_window: usize,
    pub lr_threshold: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        Self {
            d_max: 128,
            census_window: 5,
            agg_window: 7,
            lr_threshold: 1.0,
        }
    }
}

impl MatchParams {
    pub fn validate(&self) -> Result<()> {
        if self.d_max < 1 {
            return Err(Error::InvalidParameter("d_max must be at least 1".into()));
        }
        for (name, w) in [("census", self.census_window), ("aggregation", self.agg_window)] {
            if w < 3 || w % 2 == 0 {
                return Err(Error::InvalidParameter(format!(
                    "{name} window must be odd and >= 3, got {w}"
                )));
            }
        }
        if !(self.lr_threshold >= 0.0) {
            return Err(Error::InvalidParameter("lr_threshold must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-pixel census bit strings packed into `words` u64s each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CensusCodes {
    width: usize,
    height: usize,
    words: usize,
    bits: Vec<u64>,
}

impl CensusCodes {
    pub fn code(&self, x: usize, y: usize) -> &[u64] {
        let i = (y * self.width + x) * self.words;
        &self.bits[i..i + self.words]
    }

    pub fn bit_count(&self) -> usize {
        self.words * 64
    }

    fn hamming(&self, a: (usize, usize), other: &CensusCodes, b: (usize, usize)) -> u32 {
        self.code(a.0, a.1)
            .iter()
            .zip(other.code(b.0, b.1))
            .map(|(p, q)| (p ^ q).count_ones())
            .sum()
    }
}

/// Census transform of the grayscale image: bit `k` (raster order over the
/// window, centre skipped) is set when that neighbour is darker than the
/// centre. Coordinates are clamped at the border.
pub fn census_transform(img: &Image, window: usize) -> Result<CensusCodes> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::InvalidParameter(format!(
            "census window must be odd and >= 3, got {window}"
        )));
    }
    let gray = img.to_gray();
    let (w, h) = gray.dims();
    let r = (window / 2) as isize;
    let n_bits = window * window - 1;
    let words = n_bits.div_ceil(64);
    let clamp = |v: isize, hi: usize| v.clamp(0, hi as isize - 1) as usize;

    let rows: Vec<Vec<u64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![0u64; w * words];
            for x in 0..w {
                let centre = gray.get(x, y, 0);
                let mut k = 0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let v = gray.get(clamp(x as isize + dx, w), clamp(y as isize + dy, h), 0);
                        if v < centre {
                            row[x * words + k / 64] |= 1 << (k % 64);
                        }
                        k += 1;
                    }
                }
            }
            row
        })
        .collect();
    Ok(CensusCodes {
        width: w,
        height: h,
        words,
        bits: rows.concat(),
    })
}

/// Box sum over an odd window, truncated at the image border.
fn box_sum(src: &[u32], w: usize, h: usize, window: usize) -> Vec<u32> {
    let r = window / 2;
    let mut horiz = vec![0u32; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        let mut prefix = vec![0u32; w + 1];
        for x in 0..w {
            prefix[x + 1] = prefix[x] + row[x];
        }
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r + 1).min(w);
            horiz[y * w + x] = prefix[hi] - prefix[lo];
        }
    }
    let mut out = vec![0u32; w * h];
    for x in 0..w {
        let mut prefix = vec![0u32; h + 1];
        for y in 0..h {
            prefix[y + 1] = prefix[y] + horiz[y * w + x];
        }
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r + 1).min(h);
            out[y * w + x] = prefix[hi] - prefix[lo];
        }
    }
    out
}

/// Parabola through three costs around the minimum, offset in [-0.5, 0.5].
fn parabola_offset(prev: u32, best: u32, next: u32) -> f64 {
    let (p, b, n) = (prev as f64, best as f64, next as f64);
    let denom = p - 2.0 * b + n;
    if denom <= 0.0 {
        return 0.0;
    }
    ((p - n) / (2.0 * denom)).clamp(-0.5, 0.5)
}

/// Winner-take-all over `cost(d)` for `d in 0..=last`, smallest d on ties.
fn select(last: usize, cost: impl Fn(usize) -> u32) -> f64 {
    let mut best = 0;
    let mut best_cost = cost(0);
    for d in 1..=last {
        let c = cost(d);
        if c < best_cost {
            best = d;
            best_cost = c;
        }
    }
    if best == 0 || best == last {
        return best as f64;
    }
    best as f64 + parabola_offset(cost(best - 1), best_cost, cost(best + 1))
}

/// Disparity of the left image relative to the right. Pixels failing the
/// left-right check are invalid (value kept for inspection).
pub fn compute_disparity(left: &Image, right: &Image, p: &MatchParams) -> Result<ScalarField> {
    p.validate()?;
    if left.dims() != right.dims() {
        return Err(Error::DimensionMismatch(format!(
            "stereo pair {:?} vs {:?}",
            left.dims(),
            right.dims()
        )));
    }
    let (w, h) = left.dims();
    let cl = census_transform(left, p.census_window)?;
    let cr = census_transform(right, p.census_window)?;
    let penalty = (p.census_window * p.census_window - 1) as u32;

    // aggregated[d][y * w + x]: cost of matching left x with right x - d.
    let aggregated: Vec<Vec<u32>> = (0..=p.d_max)
        .into_par_iter()
        .map(|d| {
            let mut raw = vec![penalty; w * h];
            for y in 0..h {
                for x in d..w {
                    raw[y * w + x] = cl.hamming((x, y), &cr, (x - d, y));
                }
            }
            box_sum(&raw, w, h, p.agg_window)
        })
        .collect();

    let rows: Vec<(Vec<f64>, Vec<bool>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let at = |d: usize, x: usize| aggregated[d][y * w + x];
            let left_d: Vec<f64> = (0..w).map(|x| select(p.d_max.min(x), |d| at(d, x))).collect();
            let right_d: Vec<f64> = (0..w)
                .map(|xr| select(p.d_max.min(w - 1 - xr), |d| at(d, xr + d)))
                .collect();
            let valid = (0..w)
                .map(|x| {
                    let xr = x as isize - left_d[x].round() as isize;
                    xr >= 0 && (left_d[x] - right_d[xr as usize]).abs() <= p.lr_threshold
                })
                .collect();
            (left_d, valid)
        })
        .collect();

    let mut values = Vec::with_capacity(w * h);
    let mut valid = Vec::with_capacity(w * h);
    for (v, m) in rows {
        values.extend(v);
        valid.extend(m);
    }
    ScalarField::new(w, h, values, valid)
}

/// Densify a disparity map for network input: each invalid pixel copies the
/// nearest valid value to its left, else to its right, else 0. The validity
/// mask is returned unchanged.
pub fn fill_invalid(d: &ScalarField) -> ScalarField {
    let (w, h) = d.dims();
    let mut out = d.clone();
    let values = out.values_mut();
    for y in 0..h {
        let row = y * w;
        let valid_at = |x: usize| d.valid()[row + x];
        for x in 0..w {
            if valid_at(x) {
                continue;
            }
            let left = (0..x).rev().find(|&i| valid_at(i));
            let right = (x + 1..w).find(|&i| valid_at(i));
            values[row + x] = match left.or(right) {
                Some(i) => d.values()[row + i],
                None => 0.0,
            };
        }
    }
    out
}

/// Run block matching on every sample of the dataset at `root` and write
/// each result next to its left image. Returns the number of samples.
pub fn compute_dataset_baselines(root: &Path, p: &MatchParams) -> Result<usize> {
    p.validate()?;
    let manifest = Manifest::read(root)?;
    for entry in &manifest.entries {
        let left = read_pnm(&root.join(&entry.left))?;
        let right = read_pnm(&root.join(&entry.right))?;
        let d = compute_disparity(&left, &right, p)?;
        write_pfm(&d, &entry.baseline_path(root))?;
    }
    Ok(manifest.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(w: usize, h: usize, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    #[test]
    fn census_constant_image_is_zero() {
        let img = Image::new(6, 5, 1, vec![0.4; 30]).unwrap();
        let c = census_transform(&img, 5).unwrap();
        assert!(c.bits.iter().all(|&b| b == 0));
    }

    #[test]
    fn census_bright_centre_sets_all_bits() {
        let mut v = vec![0.1; 9];
        v[4] = 0.9;
        let img = Image::new(3, 3, 1, v).unwrap();
        let c = census_transform(&img, 3).unwrap();
        assert_eq!(c.code(1, 1), &[0xff]);
    }

    #[test]
    fn census_clamped_row() {
        let img = Image::new(3, 1, 1, vec![0.1, 0.5, 0.9]).unwrap();
        let c = census_transform(&img, 3).unwrap();
        // Eight clamped neighbours of the middle pixel; on a single row
        // every dy lands on row 0.
        let values = [0.1f32, 0.5, 0.9];
        let mut expected = 0u64;
        let mut k = 0;
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                if dx == 0 && dy == 0 {
                    continue;
                }
                let nx = (1 + dx).clamp(0, 2) as usize;
                if values[nx] < 0.5 {
                    expected |= 1 << k;
                }
                k += 1;
            }
        }
        assert_eq!(expected, 0b0010_1001);
        assert_eq!(c.code(1, 0), &[expected]);
    }

    #[test]
    fn census_large_window_spans_words() {
        let img = Image::new(12, 12, 1, noise(12, 12, 1)).unwrap();
        let c = census_transform(&img, 9).unwrap();
        assert_eq!(c.bit_count(), 128);
        assert!(census_transform(&img, 4).is_err());
    }

    #[test]
    fn shifted_noise_pair() {
        let (w, h, shift) = (64, 32, 3);
        let base = noise(w + shift, h, 7);
        let right = Image::from_fn(w, h, 1, |x, y, _| base[y * (w + shift) + x + shift]).unwrap();
        let left = Image::from_fn(w, h, 1, |x, y, _| base[y * (w + shift) + x]).unwrap();
        // left(x) = base(x), right(x) = base(x + 3)  =>  left(x) = right(x - 3)
        let p = MatchParams {
            d_max: 8,
            ..MatchParams::default()
        };
        let d = compute_disparity(&left, &right, &p).unwrap();
        let (mut total, mut close) = (0, 0);
        for y in 4..h - 4 {
            for x in 12..w - 4 {
                total += 1;
                let v = d.value_at(x, y);
                assert!((v - 3.0).abs() <= 0.5, "({x},{y}) -> {v}");
                if d.is_valid(x, y) && (v - 3.0).abs() <= 1.0 {
                    close += 1;
                }
            }
        }
        assert!(close as f64 >= 0.95 * total as f64);
    }

    #[test]
    fn self_match_is_zero() {
        let img = Image::new(32, 16, 1, noise(32, 16, 3)).unwrap();
        let d = compute_disparity(&img, &img, &MatchParams { d_max: 6, ..Default::default() }).unwrap();
        for y in 3..13 {
            for x in 3..29 {
                assert!(d.value_at(x, y).abs() <= 0.5);
            }
        }
    }

    #[test]
    fn textureless_pair_is_well_formed() {
        let img = Image::new(16, 8, 1, vec![0.5; 128]).unwrap();
        let p = MatchParams { d_max: 4, ..Default::default() };
        let d = compute_disparity(&img, &img, &p).unwrap();
        assert_eq!(d.dims(), (16, 8));
        assert_eq!(d.valid().len(), 128);
        assert!(d.values().iter().all(|v| (0.0..=4.5).contains(v)));
    }

    #[test]
    fn params_validation() {
        let bad = [
            MatchParams { d_max: 0, ..Default::default() },
            MatchParams { census_window: 4, ..Default::default() },
            MatchParams { agg_window: 1, ..Default::default() },
        ];
        for p in bad {
            assert!(p.validate().is_err());
        }
        let a = Image::new(4, 4, 1, vec![0.0; 16]).unwrap();
        let b = Image::new(5, 4, 1, vec![0.0; 20]).unwrap();
        assert!(compute_disparity(&a, &b, &MatchParams::default()).is_err());
    }

    #[test]
    fn fill_examples() {
        let all = ScalarField::from_values(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(fill_invalid(&all), all);

        let gap = ScalarField::new(3, 1, vec![5.0, 0.0, 9.0], vec![true, false, true]).unwrap();
        let filled = fill_invalid(&gap);
        assert_eq!(filled.values(), &[5.0, 5.0, 9.0]);
        assert_eq!(filled.valid(), gap.valid());

        let leading = ScalarField::new(3, 1, vec![0.0, 0.0, 4.0], vec![false, false, true]).unwrap();
        assert_eq!(fill_invalid(&leading).values(), &[4.0, 4.0, 4.0]);

        let empty = ScalarField::new(2, 2, vec![3.0, 1.0, 7.0, 2.0], vec![false, false, true, false]).unwrap();
        let filled = fill_invalid(&empty);
        assert_eq!(&filled.values()[..2], &[0.0, 0.0]);
        assert_eq!(&filled.values()[2..], &[7.0, 7.0]);
        assert_eq!(filled.valid(), empty.valid());
    }
}
