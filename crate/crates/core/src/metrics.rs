//! Evaluation statistics: rank and linear correlation, plus the Gaussian
//! density-separation criterion.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Paired predicted/ground-truth scores, validated on construction.
pub struct ScorePairSet<S: Scalar> {
    predicted: Vec<S>,
    truth: Vec<S>,
}

impl<S: Scalar> ScorePairSet<S> {
    pub fn new(predicted: Vec<S>, truth: Vec<S>) -> Result<Self> {
        if predicted.len() != truth.len() {
            return Err(Error::Metric(format!(
                "length mismatch: {} predicted vs {} truth",
                predicted.len(),
                truth.len()
            )));
        }
        if predicted.len() < 2 {
            return Err(Error::Metric("need at least 2 score pairs".into()));
        }
        if predicted.iter().chain(truth.iter()).any(|v| v.is_nan()) {
            return Err(Error::Metric("scores contain NaN".into()));
        }
        Ok(ScorePairSet { predicted, truth })
    }

    pub fn len(&self) -> usize {
        self.predicted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted.is_empty()
    }
}

fn pearson<S: Scalar>(a: &[S], b: &[S]) -> Result<S> {
    let n = S::of_f64(a.len() as f64);
    let mean = |xs: &[S]| xs.iter().copied().sum::<S>() / n;
    let (ma, mb) = (mean(a), mean(b));
    let mut cov = S::zero();
    let mut va = S::zero();
    let mut vb = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == S::zero() || vb == S::zero() {
        return Err(Error::Metric(
            "degenerate correlation: a sequence has zero variance".into(),
        ));
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

/// Pearson's linear correlation coefficient.
pub fn plcc<S: Scalar>(pairs: &ScorePairSet<S>) -> Result<S> {
    pearson(&pairs.predicted, &pairs.truth)
}

/// Average ranks (1-based); tied values share the mean of their positions.
pub fn fractional_ranks<S: Scalar>(values: &[S]) -> Vec<S> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).expect("no NaN"));
    let mut ranks = vec![S::zero(); values.len()];
    let mut pos = 0;
    while pos < order.len() {
        let mut end = pos + 1;
        while end < order.len() && values[order[end]] == values[order[pos]] {
            end += 1;
        }
        // positions pos..end hold ties; average their 1-based ranks
        let rank = S::of_f64(((pos + 1) + end) as f64 / 2.0);
        for &idx in &order[pos..end] {
            ranks[idx] = rank;
        }
        pos = end;
    }
    ranks
}

/// Spearman's rank-order correlation: Pearson on fractional ranks, which
/// reduces to `1 - 6*sum(d^2)/(N(N^2-1))` when there are no ties.
pub fn srocc<S: Scalar>(pairs: &ScorePairSet<S>) -> Result<S> {
    let rp = fractional_ranks(&pairs.predicted);
    let rt = fractional_ranks(&pairs.truth);
    pearson(&rp, &rt)
}

/// Gaussian fits of two score groups and their overlap.
#[derive(Debug, Clone)]
pub struct DensityReport<S: Scalar> {
    pub mu_hi: S,
    pub sigma_hi: S,
    pub mu_lo: S,
    pub sigma_lo: S,
    /// Overlapping coefficient: integral of the pointwise minimum of the
    /// two fitted densities, in `[0,1]`.
    pub overlap: S,
    pub separation_pct: S,
    /// Set when either group has zero variance; the overlap degenerates to
    /// 1 (equal means) or 0.
    pub degenerate: bool,
}

/// Numerical-integration knobs for the overlap integral.
#[derive(Debug, Clone, Copy)]
pub struct OverlapOptions {
    /// Integration bounds extend this many standard deviations past the
    /// group means.
    pub sigma_span: f64,
    /// Trapezoid steps.
    pub steps: usize,
}

impl Default for OverlapOptions {
    fn default() -> Self {
        OverlapOptions {
            sigma_span: 6.0,
            steps: 10_000,
        }
    }
}

fn mean_and_unbiased_std<S: Scalar>(xs: &[S]) -> (S, S) {
    let n = S::of_f64(xs.len() as f64);
    let mean = xs.iter().copied().sum::<S>() / n;
    let ss = xs
        .iter()
        .map(|&x| (x - mean) * (x - mean))
        .sum::<S>();
    let var = ss / (n - S::one());
    (mean, var.sqrt())
}

fn normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
}

/// Fits one Gaussian per group and integrates the overlapping coefficient
/// by the trapezoid rule.
pub fn density_separation<S: Scalar>(
    scores_hi: &[S],
    scores_lo: &[S],
    opts: OverlapOptions,
) -> Result<DensityReport<S>> {
    for (name, g) in [("hi", scores_hi), ("lo", scores_lo)] {
        if g.len() < 2 {
            return Err(Error::Metric(format!(
                "group `{name}` needs at least 2 samples"
            )));
        }
        if g.iter().any(|v| v.is_nan()) {
            return Err(Error::Metric(format!("group `{name}` contains NaN")));
        }
    }
    let (mu_hi, sigma_hi) = mean_and_unbiased_std(scores_hi);
    let (mu_lo, sigma_lo) = mean_and_unbiased_std(scores_lo);

    if sigma_hi == S::zero() || sigma_lo == S::zero() {
        let overlap = if mu_hi == mu_lo { S::one() } else { S::zero() };
        return Ok(DensityReport {
            mu_hi,
            sigma_hi,
            mu_lo,
            sigma_lo,
            overlap,
            separation_pct: S::of_f64(100.0) * (S::one() - overlap),
            degenerate: true,
        });
    }

    let (mh, sh) = (mu_hi.as_f64(), sigma_hi.as_f64());
    let (ml, sl) = (mu_lo.as_f64(), sigma_lo.as_f64());
    let lo_bound = (mh - opts.sigma_span * sh).min(ml - opts.sigma_span * sl);
    let hi_bound = (mh + opts.sigma_span * sh).max(ml + opts.sigma_span * sl);
    let dx = (hi_bound - lo_bound) / opts.steps as f64;
    let f = |x: f64| normal_pdf(x, mh, sh).min(normal_pdf(x, ml, sl));
    let mut acc = 0.5 * (f(lo_bound) + f(hi_bound));
    for i in 1..opts.steps {
        acc += f(lo_bound + i as f64 * dx);
    }
    let overlap = S::of_f64((acc * dx).clamp(0.0, 1.0));
    Ok(DensityReport {
        mu_hi,
        sigma_hi,
        mu_lo,
        sigma_lo,
        overlap,
        separation_pct: S::of_f64(100.0) * (S::one() - overlap),
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn pairs(p: &[f64], t: &[f64]) -> ScorePairSet<f64> {
        ScorePairSet::new(p.to_vec(), t.to_vec()).unwrap()
    }

    #[test]
    fn plcc_is_one_for_positive_affine() {
        let q = vec![0.1, 0.5, 0.2, 0.9, 0.44];
        let p: Vec<f64> = q.iter().map(|v| 3.0 * v + 0.2).collect();
        let r = plcc(&pairs(&p, &q)).unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn plcc_is_minus_one_for_negation() {
        let q = vec![0.1, 0.5, 0.2, 0.9];
        let p: Vec<f64> = q.iter().map(|v| -v).collect();
        let r = plcc(&pairs(&p, &q)).unwrap();
        assert!((r + 1.0).abs() < 1e-12);
    }

    #[test]
    fn plcc_four_point_instance_matches_direct_formula() {
        let p = [0.1, 0.4, 0.35, 0.8];
        let q = [0.2, 0.3, 0.5, 0.9];
        let mp: f64 = p.iter().sum::<f64>() / 4.0;
        let mq: f64 = q.iter().sum::<f64>() / 4.0;
        let num: f64 = p.iter().zip(&q).map(|(a, b)| (a - mp) * (b - mq)).sum();
        let da: f64 = p.iter().map(|a| (a - mp).powi(2)).sum::<f64>().sqrt();
        let db: f64 = q.iter().map(|b| (b - mq).powi(2)).sum::<f64>().sqrt();
        let want = num / (da * db);
        let got = plcc(&pairs(&p, &q)).unwrap();
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn plcc_exact_under_power_of_two_scaling() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = rng.gen_range(3..20);
            let q: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let base = plcc(&pairs(&p, &q)).unwrap();
            let scaled: Vec<f64> = p.iter().map(|v| v * 4.0).collect();
            assert_eq!(base, plcc(&pairs(&scaled, &q)).unwrap());
            let negated: Vec<f64> = p.iter().map(|v| v * -0.5).collect();
            assert_eq!(-base, plcc(&pairs(&negated, &q)).unwrap());
        }
    }

    #[test]
    fn zero_variance_is_a_degenerate_error() {
        assert!(plcc(&pairs(&[0.5, 0.5, 0.5], &[0.1, 0.2, 0.3])).is_err());
    }

    #[test]
    fn srocc_identical_and_reversed_rankings() {
        let q = vec![0.1, 0.2, 0.55, 0.7, 0.9];
        assert!((srocc(&pairs(&q, &q)).unwrap() - 1.0).abs() < 1e-12);
        let rev: Vec<f64> = q.iter().rev().cloned().collect();
        assert!((srocc(&pairs(&rev, &q)).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn tie_free_closed_formula_agrees_with_rank_pearson() {
        let p = [0.3, 0.1, 0.9, 0.5, 0.7];
        let q = [0.2, 0.4, 0.8, 0.6, 0.1];
        let rp = fractional_ranks(&p);
        let rq = fractional_ranks(&q);
        let n = p.len() as f64;
        let d2: f64 = rp.iter().zip(&rq).map(|(a, b): (&f64, &f64)| (a - b).powi(2)).sum();
        let closed = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
        let got = srocc(&pairs(&p, &q)).unwrap();
        assert!((got - closed).abs() < 1e-12);
    }

    #[test]
    fn srocc_invariant_under_monotone_transforms() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = rng.gen_range(3..30);
            let q: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
            let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.01..1.0)).collect();
            let base = srocc(&pairs(&p, &q)).unwrap();
            let cubed: Vec<f64> = p.iter().map(|v: &f64| v.powi(3)).collect();
            let exped: Vec<f64> = q.iter().map(|v: &f64| v.exp()).collect();
            // monotone maps keep ranks, so the value is bit-identical
            assert_eq!(base, srocc(&pairs(&cubed, &q)).unwrap());
            assert_eq!(base, srocc(&pairs(&p, &exped)).unwrap());
        }
    }

    #[test]
    fn fractional_ranks_average_ties() {
        let ranks = fractional_ranks(&[0.5, 0.1, 0.5, 0.9]);
        assert_eq!(ranks, vec![2.5, 1.0, 2.5, 4.0]);
    }

    #[test]
    fn identical_groups_overlap_fully() {
        let xs: Vec<f64> = vec![0.1, 0.4, 0.3, 0.8, 0.5, 0.6];
        let report = density_separation(&xs, &xs, OverlapOptions::default()).unwrap();
        assert!((report.overlap - 1.0).abs() < 1e-3);
        assert!(!report.degenerate);
    }

    #[test]
    fn far_separated_groups_barely_overlap() {
        // means 20 sigma apart
        let hi = vec![100.0, 100.5, 99.5, 100.2];
        let lo = vec![0.0, 0.5, -0.5, 0.2];
        let report = density_separation(&hi, &lo, OverlapOptions::default()).unwrap();
        assert!(report.overlap < 1e-6);
        assert!(report.separation_pct > 99.999);
    }

    #[test]
    fn equal_variance_overlap_matches_normal_cdf_oracle() {
        use statrs::distribution::{ContinuousCDF, Normal};
        // construct two samples with exact mean/std via symmetric pairs
        let make = |mu: f64| {
            // sample {mu-1, mu+1} has mean mu and unbiased std sqrt(2/1)=sqrt(2)
            vec![mu - 1.0, mu + 1.0]
        };
        let normal = Normal::new(0.0, 1.0).unwrap();
        for dmu_over_sigma in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let sigma = 2.0_f64.sqrt();
            let dmu = dmu_over_sigma * sigma;
            let report =
                density_separation(&make(dmu), &make(0.0), OverlapOptions::default()).unwrap();
            let want = 2.0 * normal.cdf(-dmu_over_sigma / 2.0);
            assert!(
                (report.overlap - want).abs() < 1e-4,
                "dmu/sigma {dmu_over_sigma}: got {} want {want}",
                report.overlap
            );
        }
    }

    #[test]
    fn density_is_symmetric_and_shift_invariant() {
        let hi: Vec<f64> = vec![0.8, 0.9, 0.7, 0.85];
        let lo = vec![0.2, 0.3, 0.25, 0.1];
        let a = density_separation(&hi, &lo, OverlapOptions::default()).unwrap();
        let b = density_separation(&lo, &hi, OverlapOptions::default()).unwrap();
        assert!((a.overlap - b.overlap).abs() < 1e-12);
        let shift = 0.37;
        let hi_s: Vec<f64> = hi.iter().map(|v| v + shift).collect();
        let lo_s: Vec<f64> = lo.iter().map(|v| v + shift).collect();
        let c = density_separation(&hi_s, &lo_s, OverlapOptions::default()).unwrap();
        assert!((a.overlap - c.overlap).abs() < 1e-9);
    }

    #[test]
    fn zero_variance_group_degenerates() {
        let hi = vec![0.5, 0.5, 0.5];
        let lo = vec![0.1, 0.2, 0.3];
        let report = density_separation(&hi, &lo, OverlapOptions::default()).unwrap();
        assert!(report.degenerate);
        assert_eq!(report.overlap, 0.0);
        let same = density_separation(&hi, &hi, OverlapOptions::default()).unwrap();
        assert!(same.degenerate);
        assert_eq!(same.overlap, 1.0);
    }

    #[test]
    fn tiny_groups_are_rejected() {
        assert!(density_separation(&[0.1], &[0.2, 0.3], OverlapOptions::default()).is_err());
    }
}
