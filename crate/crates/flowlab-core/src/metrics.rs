//! Distribution metrics: sliced Wasserstein-1, the two-sample KS statistic,
//! fixed-bin histograms, and rollout-endpoint MSE between two fields.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::CoreError;
use crate::flow::{euler_solve, Schedule, VelocityField};
use crate::math;
use crate::model::CondId;
use crate::rng::SeedRng;
use crate::tensor::Tensor;
use crate::Result;

/// Number of velocity-field forwards for `n` guided sampling steps.
pub fn nfe(n: u32, w: f64) -> u32 {
    n * if w > 0.0 { 2 } else { 1 }
}

/// Mean over seeded random unit projections of the 1-D Wasserstein-1
/// distance between the projected empirical distributions. Rows are samples.
pub fn sliced_wasserstein(
    a: &Tensor,
    b: &Tensor,
    projections: usize,
    seed: u64,
) -> Result<f64> {
    if a.cols() != b.cols() {
        return Err(CoreError::ShapeMismatch {
            op: "sliced_wasserstein",
            detail: format!("{} vs {} feature dims", a.cols(), b.cols()),
        });
    }
    if a.rows() < 2 || b.rows() < 2 {
        return Err(CoreError::EmptyBatch);
    }
    if projections == 0 {
        return Err(CoreError::InvalidConfig("need at least one projection".into()));
    }
    let dim = a.cols();
    let mut rng = SeedRng::new(SeedRng::derive_seed(seed, "sw-projections"));
    let mut total = 0.0;
    let mut proj_a = vec![0.0; a.rows()];
    let mut proj_b = vec![0.0; b.rows()];
    for _ in 0..projections {
        let mut dir = rng.normal_vec(dim);
        let norm = math::sqrt(dir.iter().map(|v| v * v).sum());
        if norm < 1e-12 {
            continue;
        }
        for v in &mut dir {
            *v /= norm;
        }
        project_rows(a, &dir, &mut proj_a);
        project_rows(b, &dir, &mut proj_b);
        proj_a.sort_unstable_by(|x, y| x.partial_cmp(y).expect("finite values"));
        proj_b.sort_unstable_by(|x, y| x.partial_cmp(y).expect("finite values"));
        total += wasserstein_1d_sorted(&proj_a, &proj_b);
    }
    Ok(total / projections as f64)
}

fn project_rows(points: &Tensor, dir: &[f64], out: &mut [f64]) {
    for r in 0..points.rows() {
        let row = points.row_slice(r);
        out[r] = row.iter().zip(dir).map(|(x, d)| x * d).sum();
    }
}

/// Exact W1 between two sorted 1-D empirical distributions: equal sizes use
/// the order-statistic form, unequal sizes integrate |F_a - F_b| over the
/// merged support.
fn wasserstein_1d_sorted(a: &[f64], b: &[f64]) -> f64 {
    if a.len() == b.len() {
        return a.iter().zip(b).map(|(x, y)| math::abs(x - y)).sum::<f64>() / a.len() as f64;
    }
    let (mut ia, mut ib) = (0usize, 0usize);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let mut total = 0.0;
    let mut prev = a[0].min(b[0]);
    while ia < a.len() || ib < b.len() {
        let next = match (a.get(ia), b.get(ib)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => break,
        };
        let fa = ia as f64 / na;
        let fb = ib as f64 / nb;
        total += (next - prev) * math::abs(fa - fb);
        prev = next;
        while ia < a.len() && a[ia] <= next {
            ia += 1;
        }
        while ib < b.len() && b[ib] <= next {
            ib += 1;
        }
    }
    total
}

/// Two-sample Kolmogorov-Smirnov statistic: the maximum gap between the
/// empirical CDFs.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(CoreError::EmptyBatch);
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_unstable_by(|x, y| x.partial_cmp(y).expect("finite values"));
    sb.sort_unstable_by(|x, y| x.partial_cmp(y).expect("finite values"));
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut max_gap = 0.0f64;
    while ia < sa.len() && ib < sb.len() {
        let x = sa[ia].min(sb[ib]);
        while ia < sa.len() && sa[ia] <= x {
            ia += 1;
        }
        while ib < sb.len() && sb[ib] <= x {
            ib += 1;
        }
        let gap = math::abs(ia as f64 / sa.len() as f64 - ib as f64 / sb.len() as f64);
        if gap > max_gap {
            max_gap = gap;
        }
    }
    Ok(max_gap)
}

/// Histogram bin count used across reports.
pub const HISTOGRAM_BINS: usize = 64;

/// Fixed-range, fixed-bin histogram. Out-of-range values are clamped into
/// the edge bins so the total mass always equals the sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn mass(&self) -> u64 {
        self.counts.iter().sum()
    }
}

pub fn histogram(values: &[f64], lo: f64, hi: f64) -> Result<Histogram> {
    if !(lo < hi) {
        return Err(CoreError::InvalidConfig(format!("bad histogram range [{lo}, {hi})")));
    }
    let mut counts = vec![0u64; HISTOGRAM_BINS];
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    for &v in values {
        let idx = ((v - lo) / width) as isize;
        let idx = idx.clamp(0, HISTOGRAM_BINS as isize - 1) as usize;
        counts[idx] += 1;
    }
    Ok(Histogram { lo, hi, counts })
}

/// Per-row Euclidean norms: the histogram feature for point clouds.
pub fn radial_coords(samples: &Tensor) -> Vec<f64> {
    samples.row_norms()
}

/// Per-frame RMS over channels, concatenated across samples: the histogram
/// feature for toy sequences.
pub fn frame_amplitudes(samples: &Tensor, channels: usize) -> Result<Vec<f64>> {
    if channels == 0 || samples.cols() % channels != 0 {
        return Err(CoreError::InvalidConfig(format!(
            "{} columns do not split into channels of {channels}",
            samples.cols()
        )));
    }
    let frames = samples.cols() / channels;
    let mut out = Vec::with_capacity(samples.rows() * frames);
    for r in 0..samples.rows() {
        let row = samples.row_slice(r);
        for f in 0..frames {
            let frame = &row[f * channels..(f + 1) * channels];
            out.push(math::sqrt(frame.iter().map(|v| v * v).sum::<f64>() / channels as f64));
        }
    }
    Ok(out)
}

/// Mean over probes of the squared distance (feature-sum) between the
/// endpoints of two guided rollouts from shared noise.
pub fn rollout_endpoint_mse<A: VelocityField, B: VelocityField>(
    field_a: &A,
    schedule_a: &Schedule,
    w_a: f64,
    step_a: Option<u32>,
    field_b: &B,
    schedule_b: &Schedule,
    w_b: f64,
    step_b: Option<u32>,
    z: &Tensor,
    conds: &[CondId],
) -> Result<f64> {
    let end_a = euler_solve(field_a, z, conds, schedule_a, w_a, step_a)?;
    let end_b = euler_solve(field_b, z, conds, schedule_b, w_b, step_b)?;
    let diff = end_a.endpoint().sub(end_b.endpoint())?;
    Ok(diff.norm_sq() / z.rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use core::f64::consts::PI;

    #[test]
    fn nfe_counts_forwards() {
        assert_eq!(nfe(1, 0.05), 2);
        assert_eq!(nfe(10, 0.0), 10);
        assert_eq!(nfe(4, 1.0), 8);
    }

    #[test]
    fn sw_zero_on_identical_sets() {
        let mut rng = SeedRng::new(3);
        let a = rng.normal_tensor(64, 2);
        let d = sliced_wasserstein(&a, &a, 32, 7).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn sw_symmetric_under_same_seed() {
        let mut rng = SeedRng::new(3);
        let a = rng.normal_tensor(64, 3);
        let b = rng.normal_tensor(48, 3);
        let dab = sliced_wasserstein(&a, &b, 64, 11).unwrap();
        let dba = sliced_wasserstein(&b, &a, 64, 11).unwrap();
        assert_relative_eq!(dab, dba, epsilon = 1e-12);
        assert!(dab > 0.0);
    }

    #[test]
    fn sw_translation_matches_expected_projection_mass() {
        // B = A + (c, 0): each projection shifts rigidly by c * u_1, so
        // W1 = |c u_1| exactly and the mean tends to c * E|u_1| = c * 2/pi
        // in two dimensions.
        let mut rng = SeedRng::new(5);
        let a = rng.normal_tensor(4000, 2);
        let mut b = a.clone();
        for r in 0..b.rows() {
            b.set(r, 0, b.get(r, 0) + 5.0);
        }
        let d = sliced_wasserstein(&a, &b, 512, 17).unwrap();
        let expected = 5.0 * 2.0 / PI;
        assert!(
            (d - expected).abs() / expected < 0.10,
            "d = {d}, expected about {expected}"
        );
    }

    #[test]
    fn sw_unequal_sizes_simple_shift() {
        // Point masses: a = {0, 1}, b = {0.5} => integral of |F_a - F_b| is
        // 0.5 along a 1-D axis; direction sign is irrelevant.
        let a = Tensor::new(2, 1, vec![0.0, 1.0]).unwrap();
        let b = Tensor::new(2, 1, vec![0.5, 0.5]).unwrap();
        let d = sliced_wasserstein(&a, &b, 8, 3).unwrap();
        assert_relative_eq!(d, 0.5, epsilon = 1e-12);
        let c = Tensor::new(3, 1, vec![0.5, 0.5, 0.5]).unwrap();
        let d2 = sliced_wasserstein(&a, &c, 8, 3).unwrap();
        assert_relative_eq!(d2, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn ks_identities() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(ks_statistic(&a, &a).unwrap(), 0.0);
        let b = [10.0, 11.0, 12.0];
        assert_eq!(ks_statistic(&a, &b).unwrap(), 1.0);
        let c = [1.5, 2.5, 3.5, 4.5];
        let k = ks_statistic(&a, &c).unwrap();
        assert!(k > 0.0 && k < 1.0);
    }

    #[test]
    fn histogram_mass_equals_sample_count() {
        let values = [-10.0, 0.1, 0.2, 0.5, 0.9, 42.0];
        let h = histogram(&values, 0.0, 1.0).unwrap();
        assert_eq!(h.mass(), 6);
        assert_eq!(h.counts[0], 1); // -10.0 clamps into the first bin
        assert_eq!(h.counts[HISTOGRAM_BINS - 1], 1); // 42.0 clamps into the last
        assert_eq!(h.counts[57], 1); // 0.9 / (1/64) = 57.6
        assert_eq!(h.counts.len(), HISTOGRAM_BINS);
    }

    #[test]
    fn radial_and_amplitude_features() {
        let pts = Tensor::new(2, 2, vec![3.0, 4.0, 0.0, 1.0]).unwrap();
        assert_eq!(radial_coords(&pts), vec![5.0, 1.0]);
        let seq = Tensor::new(1, 4, vec![1.0, 1.0, 2.0, 2.0]).unwrap();
        let amp = frame_amplitudes(&seq, 2).unwrap();
        assert_relative_eq!(amp[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(amp[1], 2.0, epsilon = 1e-12);
    }
}
