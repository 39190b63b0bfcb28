//! Low-rank adapter algebra.
//!
//! An adapter perturbs a frozen `d×k` weight `W0` by `B·A`, with `B` of
//! shape `d×r` and `A` of shape `r×k`. Everything here works on plain
//! matrices so the algebra can be checked without a neural framework.
//! Scalars are generic: merge and the regularizer only need ring
//! operations (and so run exactly over rationals), while numerical rank
//! needs a real field.

mod io;
mod matrix;

use nalgebra::{DMatrix, RealField};
use num_traits::{FromPrimitive, Num, Zero};

pub use io::{read_adapter, write_adapter, ADAPTER_FORMAT};
pub use matrix::Matrix;

/// Singular values at or below this fraction of the largest are treated as zero.
pub const RANK_RELATIVE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum AdapterError {
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("ragged matrix: {0}")]
    Ragged(String),
    #[error("rank {r} is invalid for a {d}x{k} weight (need 1 <= r <= min(d, k))")]
    InvalidRank { r: usize, d: usize, k: usize },
    #[error("target name must be a non-empty token, got `{0}`")]
    InvalidTarget(String),
    #[error("regularization coefficient `{0}` must be non-negative")]
    NegativeCoefficient(&'static str),
    #[error("adapter file, line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Trainable `(A, B)` pair for one projection weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankAdapter<T> {
    a: Matrix<T>,
    b: Matrix<T>,
    target_name: String,
    scale: T,
}

impl<T: Num + Clone> LowRankAdapter<T> {
    /// `a` is `r×k`, `b` is `d×r`.
    pub fn new(a: Matrix<T>, b: Matrix<T>, target_name: impl Into<String>) -> Result<Self, AdapterError> {
        let target_name = target_name.into();
        if target_name.is_empty() || target_name.chars().any(char::is_whitespace) {
            return Err(AdapterError::InvalidTarget(target_name));
        }
        let (r, k) = a.shape();
        let (d, rb) = b.shape();
        if rb != r {
            return Err(AdapterError::ShapeMismatch {
                what: "B columns vs A rows",
                expected: (d, r),
                got: (d, rb),
            });
        }
        if r == 0 || r > d.min(k) {
            return Err(AdapterError::InvalidRank { r, d, k });
        }
        if 2 * r > d.min(k) {
            tracing::warn!(
                r,
                d,
                k,
                "adapter rank exceeds half of min(d, k); the update is not low-rank"
            );
        }
        Ok(LowRankAdapter {
            a,
            b,
            target_name,
            scale: T::one(),
        })
    }

    /// Multiplier on `B·A`. Defaults to one.
    pub fn with_scale(mut self, scale: T) -> Self {
        self.scale = scale;
        self
    }

    /// Same adapter with `B` multiplied by `s`.
    pub fn with_b_scaled(&self, s: &T) -> Self {
        LowRankAdapter {
            b: self.b.scale(s),
            ..self.clone()
        }
    }

    pub fn a(&self) -> &Matrix<T> {
        &self.a
    }

    pub fn b(&self) -> &Matrix<T> {
        &self.b
    }

    pub fn target_name(&self) -> &str {
        &self.target_name
    }

    pub fn scale(&self) -> &T {
        &self.scale
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// `(d, k)` of the adapted weight.
    pub fn weight_shape(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    /// The dense update `scale · B·A`.
    pub fn delta(&self) -> Matrix<T> {
        let prod = self.b.matmul(&self.a).expect("shapes validated at construction");
        if self.scale.is_one() {
            prod
        } else {
            prod.scale(&self.scale)
        }
    }
}

/// `W0 + scale · B·A`.
pub fn merge<T: Num + Clone>(base: &Matrix<T>, adapter: &LowRankAdapter<T>) -> Result<Matrix<T>, AdapterError> {
    if base.shape() != adapter.weight_shape() {
        return Err(AdapterError::ShapeMismatch {
            what: "base weight",
            expected: adapter.weight_shape(),
            got: base.shape(),
        });
    }
    base.add(&adapter.delta())
}

/// Numerical rank of `B·A`: the count of singular values above
/// [`RANK_RELATIVE_TOLERANCE`] times the largest.
pub fn delta_rank<T: RealField + Copy + FromPrimitive>(adapter: &LowRankAdapter<T>) -> usize {
    let delta = adapter.delta();
    if delta.is_zero() {
        return 0;
    }
    let (d, k) = delta.shape();
    let dense = DMatrix::from_row_slice(d, k, delta.as_slice());
    let sv = dense.singular_values();
    let max = sv.iter().copied().fold(T::zero(), |m, v| if v > m { v } else { m });
    if max <= T::zero() {
        return 0;
    }
    let tol = max * T::from_f64(RANK_RELATIVE_TOLERANCE).expect("tolerance representable");
    sv.iter().filter(|&&v| v > tol).count()
}

/// Weights on the adapter penalty terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegularizerConfig<T> {
    lambda: T,
    mu: T,
}

impl<T: Num + PartialOrd + Copy> RegularizerConfig<T> {
    pub fn new(lambda: T, mu: T) -> Result<Self, AdapterError> {
        if lambda < T::zero() {
            return Err(AdapterError::NegativeCoefficient("lambda"));
        }
        if mu < T::zero() {
            return Err(AdapterError::NegativeCoefficient("mu"));
        }
        Ok(RegularizerConfig { lambda, mu })
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn mu(&self) -> T {
        self.mu
    }
}

impl<T: Zero> Default for RegularizerConfig<T> {
    fn default() -> Self {
        RegularizerConfig {
            lambda: T::zero(),
            mu: T::zero(),
        }
    }
}

/// `λ·‖A‖_F² + μ·‖B‖_F²`.
pub fn regularizer<T: Num + Clone + Copy>(adapter: &LowRankAdapter<T>, cfg: &RegularizerConfig<T>) -> T {
    cfg.lambda * adapter.a.frobenius_sq() + cfg.mu * adapter.b.frobenius_sq()
}

/// Adapter parameters relative to the full weight: `r·(d+k) / (d·k)`.
///
/// A ratio of one or more means the adapter is no smaller than the weight
/// it adapts; that is allowed but logged.
pub fn parameter_savings<T: Num + FromPrimitive>(d: usize, k: usize, r: usize) -> Result<T, AdapterError> {
    if d == 0 || k == 0 || r > d.min(k) {
        return Err(AdapterError::InvalidRank { r, d, k });
    }
    let num = T::from_usize(r * (d + k)).expect("count representable");
    let den = T::from_usize(d * k).expect("count representable");
    if r * (d + k) >= d * k {
        tracing::warn!(d, k, r, "adapter has at least as many parameters as the dense weight");
    }
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;

    fn m(rows: Vec<Vec<f64>>) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn outer_product_merge() {
        let a = m(vec![vec![4.0, 5.0, 6.0]]);
        let b = m(vec![vec![1.0], vec![2.0], vec![3.0]]);
        let ad = LowRankAdapter::new(a, b, "to_q").unwrap();
        let w = merge(&Matrix::zeros(3, 3), &ad).unwrap();
        assert_eq!(*w.get(2, 1), 15.0);
        assert_eq!(*w.get(0, 0), 4.0);
        assert_eq!(delta_rank(&ad), 1);
    }

    #[test]
    fn zero_a_is_identity_and_rank_zero() {
        let ad = LowRankAdapter::new(Matrix::zeros(2, 4), m(vec![vec![1.0, 2.0]; 4]), "to_v").unwrap();
        let base = Matrix::from_fn(4, 4, |i, j| (i * 4 + j) as f64);
        assert_eq!(merge(&base, &ad).unwrap(), base);
        assert_eq!(delta_rank(&ad), 0);
    }

    #[test]
    fn shape_errors() {
        let a = m(vec![vec![1.0, 2.0]]);
        let b = m(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(matches!(
            LowRankAdapter::new(a.clone(), b, "q"),
            Err(AdapterError::ShapeMismatch { .. })
        ));
        let b = m(vec![vec![1.0], vec![1.0]]);
        let ad = LowRankAdapter::new(a.clone(), b.clone(), "q").unwrap();
        assert!(merge(&Matrix::zeros(3, 2), &ad).is_err());
        assert!(matches!(
            LowRankAdapter::new(a, b, "has space"),
            Err(AdapterError::InvalidTarget(_))
        ));
        let tall = m(vec![vec![1.0]; 3]);
        let square = m(vec![vec![1.0; 3]; 3]);
        assert!(matches!(
            LowRankAdapter::new(tall, square, "q"),
            Err(AdapterError::InvalidRank { r: 3, d: 3, k: 1 })
        ));
    }

    #[test]
    fn regularizer_hand_values() {
        let ad = LowRankAdapter::new(m(vec![vec![3.0, 4.0]]), m(vec![vec![1.0], vec![2.0]]), "q").unwrap();
        assert_eq!(regularizer(&ad, &RegularizerConfig::new(1.0, 1.0).unwrap()), 30.0);
        assert_eq!(regularizer(&ad, &RegularizerConfig::default()), 0.0);

        let unit = LowRankAdapter::new(m(vec![vec![1.0, 0.0]]), m(vec![vec![5.0], vec![5.0]]), "q").unwrap();
        assert_eq!(regularizer(&unit, &RegularizerConfig::new(2.0, 0.0).unwrap()), 2.0);
        assert!(RegularizerConfig::new(-1.0, 0.0).is_err());
        assert!(RegularizerConfig::new(0.0, -0.5).is_err());
    }

    #[test]
    fn savings() {
        assert_eq!(parameter_savings::<f64>(320, 320, 8).unwrap(), 0.05);
        assert_eq!(parameter_savings::<Ratio<u64>>(320, 320, 8).unwrap(), Ratio::new(1, 20));
        assert_eq!(parameter_savings::<f64>(320, 320, 0).unwrap(), 0.0);
        assert_eq!(parameter_savings::<f64>(16, 16, 16).unwrap(), 2.0);
        assert!(parameter_savings::<f64>(4, 4, 5).is_err());
    }

    #[test]
    fn scale_multiplies_delta() {
        let ad = LowRankAdapter::new(m(vec![vec![1.0, 2.0]]), m(vec![vec![3.0], vec![4.0]]), "q")
            .unwrap()
            .with_scale(0.5);
        assert_eq!(ad.delta().as_slice(), &[1.5, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn f32_rank() {
        let a = Matrix::from_rows(vec![vec![1.0f32, 0.0, 2.0], vec![0.0, 1.0, 1.0]]).unwrap();
        let b = Matrix::from_rows(vec![vec![1.0f32, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(delta_rank(&LowRankAdapter::new(a, b, "q").unwrap()), 2);
    }
}
