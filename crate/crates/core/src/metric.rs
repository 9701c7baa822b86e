//! Mahalanobis metric head: distance through the factorization M = WWᵀ,
//! the pairwise loss, the orthogonality regularizer and spectrum
//! diagnostics.

use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Unit-norm feature vector emitted by the extractor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector<S: Scalar>(Vec<S>);

impl<S: Scalar> FeatureVector<S> {
    /// Normalizes to unit Euclidean norm; errors on the zero vector.
    pub fn from_unnormalized(raw: Vec<S>) -> Result<Self> {
        let norm = raw.iter().map(|v| *v * *v).fold(S::zero(), |a, b| a + b).sqrt();
        if norm == S::zero() {
            return Err(Error::DegenerateFeature);
        }
        Ok(FeatureVector(raw.into_iter().map(|v| v / norm).collect()))
    }

    /// Wraps values that are already unit-norm (e.g. read from a graph
    /// node that ends in an l2normalize op).
    pub fn from_normalized(values: Vec<S>) -> Self {
        FeatureVector(values)
    }

    pub fn as_slice(&self) -> &[S] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> S {
        self.0.iter().map(|v| *v * *v).fold(S::zero(), |a, b| a + b).sqrt()
    }
}

/// The learnable metric: a square W realizing M = WWᵀ, a bias pinned to
/// zero for distance symmetry, and the regularization weight λ.
#[derive(Debug, Clone)]
pub struct MetricLayer<S: Scalar> {
    w: Tensor<S>,
    b: Tensor<S>,
    pub lambda: S,
}

impl<S: Scalar> MetricLayer<S> {
    /// W = I, the initialization that makes the metric start Euclidean.
    pub fn identity(dim: usize, lambda: S) -> Self {
        MetricLayer {
            w: Tensor::from_vec(&[dim, dim], linalg::identity(dim)).expect("square"),
            b: Tensor::zeros(&[dim]),
            lambda,
        }
    }

    pub fn from_weight(w: Tensor<S>, lambda: S) -> Result<Self> {
        let shape = w.shape();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(Error::dimension("metric weight must be square", shape, shape));
        }
        let dim = shape[0];
        Ok(MetricLayer {
            w,
            b: Tensor::zeros(&[dim]),
            lambda,
        })
    }

    pub fn dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn weight(&self) -> &Tensor<S> {
        &self.w
    }

    pub fn weight_mut(&mut self) -> &mut Tensor<S> {
        &mut self.w
    }

    pub fn bias(&self) -> &Tensor<S> {
        &self.b
    }

    pub fn bias_is_zero(&self) -> bool {
        self.b.data().iter().all(|v| *v == S::zero())
    }

    /// M = WWᵀ, row-major.
    pub fn metric_matrix(&self) -> Vec<S> {
        linalg::mul_abt(self.w.data(), self.w.data(), self.dim())
    }

    /// Singular values of M in non-increasing order. M is PSD, so these
    /// coincide with its eigenvalues (the squared singular values of W).
    pub fn spectrum(&self) -> Vec<S> {
        let m = self.metric_matrix();
        symmetrize_spectrum(linalg::symmetric_eigenvalues(&m, self.dim()))
    }
}

fn symmetrize_spectrum<S: Scalar>(mut eigs: Vec<S>) -> Vec<S> {
    // clamp tiny negative round-off so callers see a PSD spectrum
    for e in &mut eigs {
        if *e < S::zero() && *e > S::from_f64(-1e-10) {
            *e = S::zero();
        }
    }
    eigs
}

/// d(x₁, x₂) = ‖Wᵀ(x₁ − x₂)‖₂.
pub fn distance<S: Scalar>(
    x1: &FeatureVector<S>,
    x2: &FeatureVector<S>,
    layer: &MetricLayer<S>,
) -> Result<S> {
    let n = layer.dim();
    if x1.dim() != n || x2.dim() != n {
        return Err(Error::dimension("distance", &[x1.dim()], &[n]));
    }
    let w = layer.w.data();
    let (a, b) = (x1.as_slice(), x2.as_slice());
    let mut acc = S::zero();
    for j in 0..n {
        let mut y = S::zero();
        for i in 0..n {
            y += w[i * n + j] * (a[i] - b[i]);
        }
        acc += y * y;
    }
    Ok(acc.sqrt())
}

/// L = d_pos − d_neg, the pairwise training objective. An optional hinge
/// margin clamps it at max(0, m + d_pos − d_neg).
pub fn pair_loss<S: Scalar>(d_pos: S, d_neg: S) -> S {
    d_pos - d_neg
}

pub fn pair_loss_with_margin<S: Scalar>(d_pos: S, d_neg: S, margin: Option<S>) -> S {
    match margin {
        None => pair_loss(d_pos, d_neg),
        Some(m) => (m + d_pos - d_neg).max(S::zero()),
    }
}

/// (λ/2)·‖WWᵀ − I‖²_F.
pub fn constraint_penalty<S: Scalar>(w: &Tensor<S>, lambda: S) -> S {
    let n = w.shape()[0];
    let mut m = linalg::mul_abt(w.data(), w.data(), n);
    for i in 0..n {
        m[i * n + i] -= S::one();
    }
    let fro2: S = m.iter().map(|v| *v * *v).sum();
    lambda / S::from_f64(2.0) * fro2
}

/// Gradient of [`constraint_penalty`] w.r.t. W: 2λ(WWᵀ − I)W.
pub fn constraint_gradient<S: Scalar>(w: &Tensor<S>, lambda: S) -> Tensor<S> {
    let n = w.shape()[0];
    let mut residual = linalg::mul_abt(w.data(), w.data(), n);
    for i in 0..n {
        residual[i * n + i] -= S::one();
    }
    let mut grad = linalg::mul(&residual, w.data(), n);
    let coeff = S::from_f64(2.0) * lambda;
    for g in &mut grad {
        *g *= coeff;
    }
    Tensor::from_vec(&[n, n], grad).expect("square")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn feat(values: Vec<f64>) -> FeatureVector<f64> {
        FeatureVector::from_normalized(values)
    }

    #[test]
    fn euclidean_when_w_is_identity() {
        let layer = MetricLayer::identity(3, 0.0);
        let x1 = feat(vec![1.0, 0.0, 0.0]);
        let x2 = feat(vec![0.0, 0.0, 0.0]);
        let d = distance(&x1, &x2, &layer).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_distance_for_equal_inputs() {
        let layer = MetricLayer::identity(3, 0.0);
        let x = feat(vec![0.6, 0.0, 0.8]);
        assert_eq!(distance(&x, &x, &layer).unwrap(), 0.0);
    }

    #[test]
    fn hand_case_matches_both_forms() {
        let w = Tensor::from_vec(&[2, 2], vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        let layer = MetricLayer::from_weight(w, 0.0).unwrap();
        let x1 = feat(vec![1.0, 1.0]);
        let x2 = feat(vec![0.0, 0.0]);
        let d = distance(&x1, &x2, &layer).unwrap();
        assert!((d - 5.0f64.sqrt()).abs() < 1e-12);
        // √(diffᵀ·M·diff) with M = WWᵀ must agree
        let m = layer.metric_matrix();
        let diff = [1.0, 1.0];
        let mut q = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                q += diff[i] * m[i * 2 + j] * diff[j];
            }
        }
        assert!((d - q.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn distance_dimension_mismatch() {
        let layer = MetricLayer::identity(3, 0.0);
        let x1 = feat(vec![1.0, 0.0]);
        let x2 = feat(vec![0.0, 1.0]);
        assert!(distance(&x1, &x2, &layer).is_err());
    }

    #[test]
    fn pair_loss_cases() {
        assert_eq!(pair_loss(1.0, 1.0), 0.0);
        assert!((pair_loss(0.5f64, 1.2) - (-0.7)).abs() < 1e-15);
        assert_eq!(pair_loss_with_margin(0.5, 1.2, Some(0.3)), 0.0);
        assert!((pair_loss_with_margin(1.0f64, 1.2, Some(0.5)) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn penalty_hand_cases() {
        let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(constraint_penalty(&eye, 1.0), 0.0);

        let zero = Tensor::from_vec(&[2, 2], vec![0.0; 4]).unwrap();
        assert!((constraint_penalty(&zero, 1e-2f64) - 0.01).abs() < 1e-15);

        let w = Tensor::from_vec(&[2, 2], vec![2.0f64.sqrt(), 0.0, 0.0, 1.0]).unwrap();
        assert!((constraint_penalty(&w, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn constraint_gradient_zero_at_identity() {
        let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let g = constraint_gradient(&eye, 1.0);
        assert!(g.data().iter().all(|v| f64::abs(*v) < 1e-15));
    }

    #[test]
    fn constraint_gradient_hand_case() {
        // W = diag(2,1): residual = diag(3,0), gradient = 2·diag(3,0)·diag(2,1)
        let w = Tensor::from_vec(&[2, 2], vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        let g = constraint_gradient(&w, 1.0);
        assert_eq!(g.data(), &[12.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn constraint_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let n = 4;
            let data: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w = Tensor::from_vec(&[n, n], data).unwrap();
            let lambda = 0.37;
            let g = constraint_gradient(&w, lambda);
            let eps = 1e-6;
            let mut probe = w.clone();
            for i in 0..n * n {
                let orig = probe.data()[i];
                probe.data_mut()[i] = orig + eps;
                let fp = constraint_penalty(&probe, lambda);
                probe.data_mut()[i] = orig - eps;
                let fm = constraint_penalty(&probe, lambda);
                probe.data_mut()[i] = orig;
                let numeric = (fp - fm) / (2.0 * eps);
                let a = g.data()[i];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                assert!(err <= 1e-6, "coord {i}: rel err {err}");
            }
        }
    }

    #[test]
    fn metric_matrix_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let n = 6;
            let data: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w = Tensor::from_vec(&[n, n], data).unwrap();
            let layer = MetricLayer::from_weight(w, 0.0).unwrap();
            let m = layer.metric_matrix();
            for i in 0..n {
                for j in 0..n {
                    assert!((m[i * n + j] - m[j * n + i]).abs() < 1e-12);
                }
            }
            let eigs = crate::linalg::symmetric_eigenvalues(&m, n);
            assert!(*eigs.last().unwrap() >= -1e-8);
        }
    }

    #[test]
    fn spectrum_hand_cases() {
        let layer = MetricLayer::<f64>::identity(4, 0.0);
        assert!(layer.spectrum().iter().all(|v| (v - 1.0).abs() < 1e-10));

        let w = Tensor::from_vec(&[2, 2], vec![2.0, 0.0, 0.0, 1.0]).unwrap();
        let layer = MetricLayer::from_weight(w, 0.0).unwrap();
        let s = layer.spectrum();
        assert!((s[0] - 4.0f64).abs() < 1e-10);
        assert!((s[1] - 1.0f64).abs() < 1e-10);
    }

    #[test]
    fn spectrum_sorted_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let n = 5;
            let data: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w = Tensor::from_vec(&[n, n], data).unwrap();
            let layer = MetricLayer::from_weight(w, 0.0).unwrap();
            let s = layer.spectrum();
            for pair in s.windows(2) {
                assert!(pair[0] >= pair[1]);
            }
            assert!(s.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn distance_symmetry_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let n = 8;
        let data: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let layer = MetricLayer::from_weight(Tensor::from_vec(&[n, n], data).unwrap(), 0.0).unwrap();
        for _ in 0..100 {
            let a = FeatureVector::from_unnormalized(
                (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let b = FeatureVector::from_unnormalized(
                (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let dab = distance(&a, &b, &layer).unwrap();
            let dba = distance(&b, &a, &layer).unwrap();
            assert_eq!(dab, dba);
            assert!(dab >= 0.0);
        }
    }
}
