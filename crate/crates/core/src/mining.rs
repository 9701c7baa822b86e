//! Sample mining: moderate positive selection by the min/max ratio
//! criterion, adaptive band estimation, and hard negative selection.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One cross-camera positive candidate: a sample reference and its
/// distance to the anchor under the live model.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<S: Scalar> {
    pub sample: usize,
    pub distance: S,
}

/// Per-anchor positive pool. All candidates share the anchor's identity
/// and come from the other camera; the builder in the training loop
/// guarantees this.
#[derive(Debug, Clone)]
pub struct PositivePool<S: Scalar> {
    pub anchor: usize,
    pub candidates: Vec<Candidate<S>>,
}

impl<S: Scalar> PositivePool<S> {
    pub fn new(anchor: usize, candidates: Vec<Candidate<S>>) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::EmptyPool);
        }
        if candidates.iter().any(|c| c.distance < S::zero()) {
            return Err(Error::Precondition("negative distance in positive pool".into()));
        }
        Ok(PositivePool { anchor, candidates })
    }

    fn min_max(&self) -> (S, S) {
        let mut lo = S::infinity();
        let mut hi = S::neg_infinity();
        for c in &self.candidates {
            lo = lo.min(c.distance);
            hi = hi.max(c.distance);
        }
        (lo, hi)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MiningConfig<S: Scalar> {
    pub alpha: S,
    pub beta: S,
    /// When set, `alpha`/`beta` are ignored and derived per pool from the
    /// distance distribution.
    pub adaptive: bool,
    pub negative_pool_size: usize,
    pub hard_negative_count: usize,
}

impl<S: Scalar> Default for MiningConfig<S> {
    fn default() -> Self {
        MiningConfig {
            alpha: S::zero(),
            beta: S::zero(),
            adaptive: true,
            negative_pool_size: 64,
            hard_negative_count: 1,
        }
    }
}

/// The moderation ratio (d − d_min)/(d_max − d): 0 at the easiest
/// candidate, +∞ at the unique hardest one, 0 for an all-equal pool.
pub fn moderation_ratio<S: Scalar>(d_cand: S, d_min: S, d_max: S) -> Result<S> {
    if !(d_min <= d_cand && d_cand <= d_max) {
        return Err(Error::Precondition(format!(
            "moderation_ratio needs d_min <= d <= d_max, got {d_min} <= {d_cand} <= {d_max}"
        )));
    }
    if d_max == d_min {
        return Ok(S::zero());
    }
    if d_cand == d_max {
        return Ok(S::infinity());
    }
    Ok((d_cand - d_min) / (d_max - d_cand))
}

/// Linear-interpolation percentile of an ascending slice, q in [0,1].
fn percentile<S: Scalar>(sorted: &[S], q: f64) -> S {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = S::from_f64(h - lo as f64);
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Derives (α, β) so the admissible band covers candidates between the
/// 25th and 75th percentile of the pool's distances. Degenerate pools
/// (size 1 or all-equal) map to (0, 0), which admits everything.
pub fn adaptive_bounds<S: Scalar>(pool: &PositivePool<S>) -> (S, S) {
    if pool.candidates.len() < 2 {
        return (S::zero(), S::zero());
    }
    let (d_min, d_max) = pool.min_max();
    if d_min == d_max {
        return (S::zero(), S::zero());
    }
    let mut sorted: Vec<S> = pool.candidates.iter().map(|c| c.distance).collect();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let p25 = percentile(&sorted, 0.25);
    let p75 = percentile(&sorted, 0.75);
    let alpha = moderation_ratio(p25, d_min, d_max).expect("p25 within range");
    let mut beta = moderation_ratio(p75, d_min, d_max).expect("p75 within range");
    if beta.is_infinite() {
        // p75 hit the maximum; fall back to the largest finite candidate ratio
        beta = pool
            .candidates
            .iter()
            .filter_map(|c| moderation_ratio(c.distance, d_min, d_max).ok())
            .filter(|r| r.is_finite())
            .fold(S::zero(), |a, b| a.max(b));
    }
    (alpha.min(beta), beta)
}

/// Index (into `pool.candidates`) of the selected moderate positive.
///
/// Candidates whose ratio lies in [α, β] are admissible; among them the
/// one with ratio closest to the band midpoint wins (ties to the lowest
/// index). With β = ∞ the admissible candidate with the largest ratio
/// wins. If nothing is admissible, the candidate with median distance is
/// returned so training never stalls.
pub fn moderate_positive_select<S: Scalar>(
    pool: &PositivePool<S>,
    cfg: &MiningConfig<S>,
) -> Result<usize> {
    if pool.candidates.is_empty() {
        return Err(Error::EmptyPool);
    }
    let (alpha, beta) = if cfg.adaptive {
        adaptive_bounds(pool)
    } else {
        (cfg.alpha, cfg.beta)
    };
    if alpha > beta {
        return Err(Error::Precondition(format!("alpha {alpha} > beta {beta}")));
    }
    let (d_min, d_max) = pool.min_max();
    let ratios: Vec<S> = pool
        .candidates
        .iter()
        .map(|c| moderation_ratio(c.distance, d_min, d_max))
        .collect::<Result<_>>()?;
    let admissible: Vec<usize> = (0..ratios.len())
        .filter(|i| alpha <= ratios[*i] && ratios[*i] <= beta)
        .collect();
    if admissible.is_empty() {
        return Ok(median_index(pool));
    }
    if beta.is_infinite() {
        let mut best = admissible[0];
        for &i in &admissible[1..] {
            if ratios[i] > ratios[best] {
                best = i;
            }
        }
        return Ok(best);
    }
    let mid = (alpha + beta) / S::from_f64(2.0);
    let mut best = admissible[0];
    for &i in &admissible[1..] {
        if (ratios[i] - mid).abs() < (ratios[best] - mid).abs() {
            best = i;
        }
    }
    Ok(best)
}

/// Candidate index with the (lower) median distance, ties to lowest index.
fn median_index<S: Scalar>(pool: &PositivePool<S>) -> usize {
    let mut order: Vec<usize> = (0..pool.candidates.len()).collect();
    order.sort_by(|&a, &b| {
        pool.candidates[a]
            .distance
            .partial_cmp(&pool.candidates[b].distance)
            .expect("finite distances")
            .then(a.cmp(&b))
    });
    order[(order.len() - 1) / 2]
}

/// A negative candidate: sample reference, identity, current distance.
#[derive(Debug, Clone, Copy)]
pub struct NegativeCandidate<S: Scalar> {
    pub sample: usize,
    pub identity: u32,
    pub distance: S,
}

/// The k negatives closest to the anchor, ascending by distance with
/// ties to the lowest index. A candidate carrying the anchor's identity
/// signals a labeling bug and is an error.
pub fn hard_negative_select<S: Scalar>(
    anchor_identity: u32,
    negatives: &[NegativeCandidate<S>],
    k: usize,
) -> Result<Vec<usize>> {
    if negatives.is_empty() {
        return Err(Error::EmptyPool);
    }
    if k > negatives.len() {
        return Err(Error::Precondition(format!(
            "k = {k} exceeds pool size {}",
            negatives.len()
        )));
    }
    if let Some(c) = negatives.iter().find(|c| c.identity == anchor_identity) {
        return Err(Error::IdentityCollision(c.identity));
    }
    let mut order: Vec<usize> = (0..negatives.len()).collect();
    order.sort_by(|&a, &b| {
        negatives[a]
            .distance
            .partial_cmp(&negatives[b].distance)
            .expect("finite distances")
            .then(a.cmp(&b))
    });
    order.truncate(k);
    Ok(order.iter().map(|&i| negatives[i].sample).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(distances: &[f64]) -> PositivePool<f64> {
        PositivePool::new(
            0,
            distances
                .iter()
                .enumerate()
                .map(|(i, d)| Candidate { sample: i, distance: *d })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn ratio_hand_cases() {
        assert_eq!(moderation_ratio(2.0, 1.0, 3.0).unwrap(), 1.0);
        assert_eq!(moderation_ratio(1.0, 1.0, 3.0).unwrap(), 0.0);
        assert!(moderation_ratio(3.0f64, 1.0, 3.0).unwrap().is_infinite());
        assert_eq!(moderation_ratio(5.0, 5.0, 5.0).unwrap(), 0.0);
        assert!(moderation_ratio(0.5, 1.0, 3.0).is_err());
        assert!(moderation_ratio(4.0, 1.0, 3.0).is_err());
    }

    #[test]
    fn select_picks_the_moderate_candidate() {
        let p = pool(&[1.0, 2.0, 3.0]);
        let cfg = MiningConfig { alpha: 0.5, beta: 2.0, adaptive: false, ..Default::default() };
        assert_eq!(moderate_positive_select(&p, &cfg).unwrap(), 1);
    }

    #[test]
    fn single_candidate_pool_selects_it() {
        let p = pool(&[0.4]);
        let cfg = MiningConfig { alpha: 0.5, beta: 2.0, adaptive: false, ..Default::default() };
        assert_eq!(moderate_positive_select(&p, &cfg).unwrap(), 0);
    }

    #[test]
    fn empty_band_falls_back_to_median() {
        let p = pool(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        // band that nothing satisfies
        let cfg = MiningConfig { alpha: 100.0, beta: 200.0, adaptive: false, ..Default::default() };
        // lower median of five distances is index 2
        assert_eq!(moderate_positive_select(&p, &cfg).unwrap(), 2);
    }

    #[test]
    fn hardest_never_selected_with_finite_beta() {
        let p = pool(&[1.0, 1.5, 2.0, 9.0]);
        for beta in [0.5, 1.0, 5.0, 1e6] {
            let cfg = MiningConfig { alpha: 0.0, beta, adaptive: false, ..Default::default() };
            let sel = moderate_positive_select(&p, &cfg).unwrap();
            assert_ne!(sel, 3, "beta {beta} selected the hardest candidate");
        }
    }

    #[test]
    fn raising_alpha_with_infinite_beta_is_monotone() {
        let p = pool(&[1.0, 2.0, 3.0, 4.0]);
        let mut last = 0.0f64;
        for alpha in [0.0, 0.5, 1.0, 2.0] {
            let cfg = MiningConfig {
                alpha,
                beta: f64::INFINITY,
                adaptive: false,
                ..Default::default()
            };
            let sel = moderate_positive_select(&p, &cfg).unwrap();
            let d = p.candidates[sel].distance;
            assert!(d >= last, "alpha {alpha}: distance decreased {d} < {last}");
            last = d;
        }
    }

    #[test]
    fn adaptive_bounds_admit_middle_of_three() {
        let p = pool(&[1.0, 2.0, 3.0]);
        let (alpha, beta) = adaptive_bounds(&p);
        let (d_min, d_max) = (1.0, 3.0);
        let admitted: Vec<usize> = (0..3)
            .filter(|&i| {
                let r = moderation_ratio(p.candidates[i].distance, d_min, d_max).unwrap();
                alpha <= r && r <= beta
            })
            .collect();
        assert_eq!(admitted, vec![1]);
    }

    #[test]
    fn adaptive_bounds_degenerate_pools() {
        assert_eq!(adaptive_bounds(&pool(&[2.0])), (0.0, 0.0));
        assert_eq!(adaptive_bounds(&pool(&[2.0, 2.0, 2.0])), (0.0, 0.0));
    }

    #[test]
    fn adaptive_bounds_exclude_extremes_of_five() {
        let p = pool(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let (alpha, beta) = adaptive_bounds(&p);
        let r = |d: f64| moderation_ratio(d, 1.0, 5.0).unwrap();
        assert!(r(1.0) < alpha);
        assert!(r(5.0) > beta);
        assert!(alpha <= r(3.0) && r(3.0) <= beta);
    }

    #[test]
    fn hard_negatives_basics() {
        let negs: Vec<NegativeCandidate<f64>> = [5.0, 1.0, 3.0]
            .iter()
            .enumerate()
            .map(|(i, d)| NegativeCandidate { sample: 100 + i, identity: 7 + i as u32, distance: *d })
            .collect();
        assert_eq!(hard_negative_select(1, &negs, 1).unwrap(), vec![101]);
        assert_eq!(hard_negative_select(1, &negs, 3).unwrap(), vec![101, 102, 100]);
    }

    #[test]
    fn hard_negatives_reject_identity_collision() {
        let negs = vec![NegativeCandidate { sample: 0, identity: 4, distance: 1.0 }];
        assert!(matches!(
            hard_negative_select(4, &negs, 1),
            Err(Error::IdentityCollision(4))
        ));
    }

    #[test]
    fn selection_is_deterministic() {
        let p = pool(&[0.3, 0.9, 0.5, 0.7, 0.5]);
        let cfg = MiningConfig { adaptive: true, ..Default::default() };
        let a = moderate_positive_select(&p, &cfg).unwrap();
        let b = moderate_positive_select(&p, &cfg).unwrap();
        assert_eq!(a, b);
    }
}
