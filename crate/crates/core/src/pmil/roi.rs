//! 1D RoIAlign and the three-region (left / inner / right) proposal features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::proposals::Proposal;

/// Interpolation points sampled inside each bin.
pub const SAMPLES_PER_BIN: usize = 4;

/// Linear interpolation of the row features at a continuous coordinate.
/// Segment `t` sits at `t + 0.5`; coordinates past either end clamp to the
/// edge segment.
fn interpolate_into(x: &Matrix, coord: f64, out: &mut [f64]) {
    let last = x.rows() as isize - 1;
    let u = coord - 0.5;
    let lo = u.floor();
    let frac = u - lo;
    let i0 = (lo as isize).clamp(0, last) as usize;
    let i1 = (lo as isize + 1).clamp(0, last) as usize;
    for ((o, &a), &b) in out.iter_mut().zip(x.row(i0)).zip(x.row(i1)) {
        *o = (1.0 - frac) * a + frac * b;
    }
}

/// Splits `[start, end)` into `bins` equal sub-bins, samples each at
/// [`SAMPLES_PER_BIN`] evenly spaced interior points and max-pools the
/// samples per feature dimension. Returns a `bins × D` matrix.
pub fn roi_align_1d(x: &Matrix, start: f64, end: f64, bins: usize) -> Result<Matrix> {
    if !(end > start) || bins == 0 || x.rows() == 0 {
        return Err(Error::invalid(format!(
            "roi_align_1d needs a nonempty span and at least one bin, got [{start}, {end}) with {bins} bins"
        )));
    }
    let d = x.cols();
    let width = (end - start) / bins as f64;
    let mut out = Matrix::filled(bins, d, f64::NEG_INFINITY);
    let mut sample = vec![0.0; d];
    for b in 0..bins {
        let bin_start = start + b as f64 * width;
        for s in 0..SAMPLES_PER_BIN {
            let coord = bin_start + (s as f64 + 0.5) * width / SAMPLES_PER_BIN as f64;
            interpolate_into(x, coord, &mut sample);
            for (o, v) in out.row_mut(b).iter_mut().zip(&sample) {
                *o = o.max(*v);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoiBins {
    pub left: usize,
    pub inner: usize,
    pub right: usize,
}

impl Default for RoiBins {
    fn default() -> Self {
        Self {
            left: 2,
            inner: 8,
            right: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegionFeatures {
    pub left: Vec<f64>,
    pub inner: Vec<f64>,
    pub right: Vec<f64>,
}

fn pooled(x: &Matrix, start: f64, end: f64, bins: usize, fallback_row: usize) -> Vec<f64> {
    if end - start <= 0.0 {
        return x.row(fallback_row).to_vec();
    }
    let m = roi_align_1d(x, start, end, bins).expect("span checked nonempty");
    let mut best = vec![f64::NEG_INFINITY; x.cols()];
    for b in 0..m.rows() {
        for (o, v) in best.iter_mut().zip(m.row(b)) {
            *o = o.max(*v);
        }
    }
    best
}

/// Left `[s − αL, s)`, inner `[s, e)` and right `[e, e + αL)` regions,
/// clamped to `[0, T]`, each RoI-aligned and max-pooled to one vector.
/// A side region that clamps to zero width takes the adjacent edge segment.
pub fn extract_region_features(x: &Matrix, p: &Proposal, alpha: f64, bins: &RoiBins) -> Result<RegionFeatures> {
    let t = x.rows();
    if p.start >= p.end || p.end > t {
        return Err(Error::invalid(format!(
            "proposal [{}, {}) invalid for T={t}",
            p.start, p.end
        )));
    }
    let (s, e) = (p.start as f64, p.end as f64);
    let ext = alpha * (e - s);
    let left_start = (s - ext).max(0.0);
    let right_end = (e + ext).min(t as f64);
    Ok(RegionFeatures {
        left: pooled(x, left_start, s, bins.left, p.start.saturating_sub(1)),
        inner: pooled(x, s, e, bins.inner, p.start),
        right: pooled(x, e, right_end, bins.right, p.end.min(t - 1)),
    })
}

/// How the three region vectors are combined before the SCFE layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScfeMode {
    /// `Cat(inner − left, inner, inner − right)`
    Contrast,
    /// `Cat(left, inner, right)`
    Concat,
    /// `inner` only
    NoExtend,
}

impl ScfeMode {
    pub fn input_dim(self, feature_dim: usize) -> usize {
        match self {
            ScfeMode::Contrast | ScfeMode::Concat => 3 * feature_dim,
            ScfeMode::NoExtend => feature_dim,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScfeMode::Contrast => "contrast",
            ScfeMode::Concat => "concat",
            ScfeMode::NoExtend => "no_extend",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            ScfeMode::Contrast => 0,
            ScfeMode::Concat => 1,
            ScfeMode::NoExtend => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ScfeMode::Contrast),
            1 => Some(ScfeMode::Concat),
            2 => Some(ScfeMode::NoExtend),
            _ => None,
        }
    }
}

impl std::str::FromStr for ScfeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contrast" => Ok(ScfeMode::Contrast),
            "concat" => Ok(ScfeMode::Concat),
            "no_extend" => Ok(ScfeMode::NoExtend),
            other => Err(Error::invalid(format!("unknown scfe mode `{other}`"))),
        }
    }
}

/// The SCFE layer input for one proposal.
pub fn scfe_input(regions: &RegionFeatures, mode: ScfeMode) -> Vec<f64> {
    let diff = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x - y).collect() };
    match mode {
        ScfeMode::Contrast => {
            let mut v = diff(&regions.inner, &regions.left);
            v.extend_from_slice(&regions.inner);
            v.extend(diff(&regions.inner, &regions.right));
            v
        }
        ScfeMode::Concat => {
            let mut v = regions.left.clone();
            v.extend_from_slice(&regions.inner);
            v.extend_from_slice(&regions.right);
            v
        }
        ScfeMode::NoExtend => regions.inner.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(t: usize, d: usize) -> Matrix {
        Matrix::from_vec(t, d, (0..t * d).map(|i| ((i / d) as f64) * (1.0 + (i % d) as f64)).collect()).unwrap()
    }

    #[test]
    fn constant_features_pool_to_constant() {
        let x = Matrix::filled(9, 3, 1.5);
        let m = roi_align_1d(&x, 0.7, 6.2, 4).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.5));
        let r = extract_region_features(&x, &Proposal::action(2, 6), 0.25, &RoiBins::default()).unwrap();
        assert_eq!(r.left, vec![1.5; 3]);
        assert_eq!(r.inner, r.right);
    }

    #[test]
    fn whole_video_single_bin_matches_direct_interpolation() {
        let (t, d) = (6, 2);
        let x = linear(t, d);
        let m = roi_align_1d(&x, 0.0, t as f64, 1).unwrap();
        for j in 0..d {
            let slope = 1.0 + j as f64;
            // samples at 0.75, 2.25, 3.75, 5.25 → interior positions u = coord − 0.5
            let expected = [0.75f64, 2.25, 3.75, 5.25]
                .iter()
                .map(|c| (c - 0.5).clamp(0.0, (t - 1) as f64) * slope)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!((m.get(0, j) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn single_segment_span() {
        let x = Matrix::from_rows(&[vec![0.3, -1.0, 2.0]]).unwrap();
        let m = roi_align_1d(&x, 0.0, 1.0, 1).unwrap();
        assert_eq!(m.row(0), x.row(0));
    }

    #[test]
    fn side_regions_fall_back_to_edges() {
        let x = linear(5, 2);
        let r = extract_region_features(&x, &Proposal::action(0, 5), 0.25, &RoiBins::default()).unwrap();
        assert_eq!(r.left, x.row(0));
        assert_eq!(r.right, x.row(4));

        let r = extract_region_features(&x, &Proposal::action(1, 3), 0.0, &RoiBins::default()).unwrap();
        assert_eq!(r.left, x.row(0));
        assert_eq!(r.right, x.row(3));
    }

    #[test]
    fn scfe_inputs_by_mode() {
        let r = RegionFeatures {
            left: vec![1.0, 2.0],
            inner: vec![4.0, 4.0],
            right: vec![0.0, 5.0],
        };
        assert_eq!(scfe_input(&r, ScfeMode::Contrast), vec![3.0, 2.0, 4.0, 4.0, 4.0, -1.0]);
        assert_eq!(scfe_input(&r, ScfeMode::Concat), vec![1.0, 2.0, 4.0, 4.0, 0.0, 5.0]);
        assert_eq!(scfe_input(&r, ScfeMode::NoExtend), vec![4.0, 4.0]);
        let same = RegionFeatures {
            left: vec![4.0, 4.0],
            inner: vec![4.0, 4.0],
            right: vec![4.0, 4.0],
        };
        assert_eq!(scfe_input(&same, ScfeMode::Contrast), vec![0.0, 0.0, 4.0, 4.0, 0.0, 0.0]);
    }
}
