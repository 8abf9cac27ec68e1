//! Affine weight parameterizations.
//!
//! [`LinearMap`] is an unconstrained `W x + b`. [`PfMap`] builds a nonnegative
//! transition matrix whose row sums, and hence whose Perron root, are confined
//! to `[lambda_min, lambda_max]`:
//!
//! ```text
//! M  = lambda_max - (lambda_max - lambda_min) * sigmoid(M')
//! A~ = rowsoftmax(A') .* M
//! ```

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::random::{normal_matrix, uniform_matrix, SeededRng};
use crate::scalar::Scalar;

/// A named trainable matrix. Biases are stored as `1 x out` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Array2<T>,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Array2<T>) -> Self {
        Self {
            name: name.into(),
            value,
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Var<'t, T> {
        tape.param(&self.name, &self.value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightKind {
    Linear,
    Pf,
}

impl std::fmt::Display for WeightKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WeightKind::Linear => "linear",
            WeightKind::Pf => "pf",
        })
    }
}

impl std::str::FromStr for WeightKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(WeightKind::Linear),
            "pf" | "perron-frobenius" => Ok(WeightKind::Pf),
            other => Err(Error::Config(format!("unknown weight kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EigenBounds {
    pub lambda_min: f64,
    pub lambda_max: f64,
}

impl EigenBounds {
    pub fn new(lambda_min: f64, lambda_max: f64) -> Result<Self> {
        if !(lambda_min.is_finite() && lambda_max.is_finite()) || lambda_min < 0.0 || lambda_min > lambda_max {
            return Err(Error::Config(format!(
                "eigenvalue bounds must satisfy 0 <= lambda_min <= lambda_max, got [{lambda_min}, {lambda_max}]"
            )));
        }
        Ok(Self {
            lambda_min,
            lambda_max,
        })
    }

    pub fn contains(&self, radius: f64, tol: f64) -> bool {
        radius >= self.lambda_min - tol && radius <= self.lambda_max + tol
    }
}

impl Default for EigenBounds {
    fn default() -> Self {
        Self {
            lambda_min: 0.8,
            lambda_max: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap<T> {
    /// `out x in`
    pub weight: Param<T>,
    /// `1 x out`
    pub bias: Param<T>,
}

impl<T: Scalar> LinearMap<T> {
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) weights and zero bias.
    pub fn init(name: &str, in_dim: usize, out_dim: usize, rng: &mut SeededRng) -> Self {
        let k = 1.0 / (in_dim.max(1) as f64).sqrt();
        Self::from_parts(
            name,
            uniform_matrix(rng, out_dim, in_dim, -k, k),
            Array2::zeros((1, out_dim)),
        )
    }

    pub fn from_parts(name: &str, weight: Array2<T>, bias: Array2<T>) -> Self {
        Self {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), bias),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PfMap<T> {
    pub m_prime: Param<T>,
    pub a_prime: Param<T>,
    pub bias: Param<T>,
    pub bounds: EigenBounds,
}

/// Result of composing a [`PfMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedWeight<T> {
    pub a_tilde: Array2<T>,
    /// Damping factors `M`.
    pub damping: Array2<T>,
}

impl<T: Scalar> PfMap<T> {
    /// `M'`, `A'` drawn from Normal(0, 1); zero bias.
    pub fn init(name: &str, dim: usize, bounds: EigenBounds, rng: &mut SeededRng) -> Self {
        let m_prime = normal_matrix(rng, dim, dim, 1.0);
        let a_prime = normal_matrix(rng, dim, dim, 1.0);
        Self::from_parts(name, m_prime, a_prime, Array2::zeros((1, dim)), bounds)
            .expect("square by construction")
    }

    pub fn from_parts(
        name: &str,
        m_prime: Array2<T>,
        a_prime: Array2<T>,
        bias: Array2<T>,
        bounds: EigenBounds,
    ) -> Result<Self> {
        let n = m_prime.nrows();
        if m_prime.dim() != (n, n) || a_prime.dim() != (n, n) {
            return Err(Error::shape("pf map", m_prime.dim(), a_prime.dim()));
        }
        if bias.dim() != (1, n) {
            return Err(Error::shape("pf bias", (1, n), bias.dim()));
        }
        Ok(Self {
            m_prime: Param::new(format!("{name}.m_prime"), m_prime),
            a_prime: Param::new(format!("{name}.a_prime"), a_prime),
            bias: Param::new(format!("{name}.bias"), bias),
            bounds,
        })
    }

    pub fn dim(&self) -> usize {
        self.m_prime.value.nrows()
    }

    /// Records the composition on `tape`, returning `(A~, M)`.
    pub fn compose_on<'t>(&self, tape: &'t Tape<T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
        let EigenBounds {
            lambda_min,
            lambda_max,
        } = self.bounds;
        let damping = self
            .m_prime
            .bind(tape)
            .sigmoid()
            .affine(T::of(-(lambda_max - lambda_min)), T::of(lambda_max));
        let a_tilde = self.a_prime.bind(tape).softmax_rows().mul(damping)?;
        Ok((a_tilde, damping))
    }

    pub fn compose(&self) -> ComposedWeight<T> {
        let tape = Tape::new();
        let (a, m) = self.compose_on(&tape).expect("square by construction");
        ComposedWeight {
            a_tilde: a.to_array(),
            damping: m.to_array(),
        }
    }
}

/// Layer weight of either kind.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightMap<T> {
    Linear(LinearMap<T>),
    Pf(PfMap<T>),
}

impl<T: Scalar> WeightMap<T> {
    pub fn init(
        kind: WeightKind,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bounds: EigenBounds,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        match kind {
            WeightKind::Linear => Ok(WeightMap::Linear(LinearMap::init(name, in_dim, out_dim, rng))),
            WeightKind::Pf if in_dim == out_dim => Ok(WeightMap::Pf(PfMap::init(name, in_dim, bounds, rng))),
            WeightKind::Pf => Err(Error::Config(format!(
                "pf weight '{name}' must be square, got {out_dim}x{in_dim}"
            ))),
        }
    }

    pub fn kind(&self) -> WeightKind {
        match self {
            WeightMap::Linear(_) => WeightKind::Linear,
            WeightMap::Pf(_) => WeightKind::Pf,
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            WeightMap::Linear(m) => m.in_dim(),
            WeightMap::Pf(m) => m.dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            WeightMap::Linear(m) => m.out_dim(),
            WeightMap::Pf(m) => m.dim(),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            WeightMap::Linear(m) => vec![&m.weight, &m.bias],
            WeightMap::Pf(m) => vec![&m.m_prime, &m.a_prime, &m.bias],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            WeightMap::Linear(m) => vec![&mut m.weight, &mut m.bias],
            WeightMap::Pf(m) => vec![&mut m.m_prime, &mut m.a_prime, &mut m.bias],
        }
    }

    /// Effective `out x in` weight: `W` or the freshly composed `A~`.
    pub fn effective_weight(&self) -> Array2<T> {
        match self {
            WeightMap::Linear(m) => m.weight.value.clone(),
            WeightMap::Pf(m) => m.compose().a_tilde,
        }
    }

    pub fn bounds(&self) -> Option<EigenBounds> {
        match self {
            WeightMap::Linear(_) => None,
            WeightMap::Pf(m) => Some(m.bounds),
        }
    }

    /// Registers parameters on `tape`, composing pf weights once.
    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Result<BoundMap<'t, T>> {
        let (weight, bias) = match self {
            WeightMap::Linear(m) => (m.weight.bind(tape), m.bias.bind(tape)),
            WeightMap::Pf(m) => (m.compose_on(tape)?.0, m.bias.bind(tape)),
        };
        Ok(BoundMap {
            weight_t: weight.t(),
            bias,
        })
    }

    /// Single-vector application `W x + b` without gradient tracking.
    pub fn apply(&self, x: &Array1<T>) -> Result<Array1<T>> {
        if x.len() != self.in_dim() {
            return Err(Error::shape("apply map", (self.in_dim(), 1), (x.len(), 1)));
        }
        let tape = Tape::new();
        let bound = self.bind(&tape)?;
        let row = tape.constant(x.clone().insert_axis(ndarray::Axis(0)));
        Ok(bound.apply(row)?.to_array().row(0).to_owned())
    }
}

/// A weight map registered on a tape, applied to row-batched inputs.
#[derive(Debug, Clone, Copy)]
pub struct BoundMap<'t, T> {
    weight_t: Var<'t, T>,
    bias: Var<'t, T>,
}

impl<'t, T: Scalar> BoundMap<'t, T> {
    /// `x W^T + b` for `x` of shape `batch x in`.
    pub fn apply(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(self.weight_t)?.add(self.bias)
    }

    /// Linear part only, without bias.
    pub fn apply_linear(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.matmul(self.weight_t)
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    use super::*;
    use crate::autodiff::finite_difference_check;
    use crate::eigen::eigenvalues;
    use crate::random::seeded;

    fn uniform_pf(n: usize, bounds: EigenBounds) -> PfMap<f64> {
        PfMap::from_parts(
            "pf",
            Array2::zeros((n, n)),
            Array2::zeros((n, n)),
            Array2::zeros((1, n)),
            bounds,
        )
        .unwrap()
    }

    #[test]
    fn zero_parameters_give_uniform_weight() {
        let c = uniform_pf(2, EigenBounds::new(0.8, 1.0).unwrap()).compose();
        assert!(c.damping.iter().all(|&m| (m - 0.9).abs() < 1e-15));
        assert!(c.a_tilde.iter().all(|&a| (a - 0.45).abs() < 1e-15));
        let rho = eigenvalues(&c.a_tilde).unwrap().spectral_radius;
        assert_abs_diff_eq!(rho, 0.9, epsilon = 1e-12);
    }

    #[test]
    fn equal_bounds_give_stochastic_matrix() {
        let mut rng = seeded(2);
        let b = EigenBounds::new(1.0, 1.0).unwrap();
        let m = PfMap::<f64>::from_parts(
            "pf",
            normal_matrix(&mut rng, 5, 5, 3.0),
            normal_matrix(&mut rng, 5, 5, 1.0),
            Array2::zeros((1, 5)),
            b,
        )
        .unwrap();
        let c = m.compose();
        assert!(c.damping.iter().all(|&v| v == 1.0));
        for row in c.a_tilde.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-14);
        }
        assert_abs_diff_eq!(eigenvalues(&c.a_tilde).unwrap().spectral_radius, 1.0, epsilon = 1e-10);
    }

    #[test]
    fn inverted_bounds_are_a_configuration_error() {
        assert!(matches!(EigenBounds::new(1.0, 0.8), Err(Error::Config(_))));
        assert!(matches!(EigenBounds::new(-0.1, 0.8), Err(Error::Config(_))));
    }

    #[test]
    fn random_80x80_radius_within_bounds() {
        let mut rng = seeded(17);
        let bounds = EigenBounds::default();
        for _ in 0..100 {
            let c = PfMap::<f64>::init("pf", 80, bounds, &mut rng).compose();
            let rho = eigenvalues(&c.a_tilde).unwrap().spectral_radius;
            assert!(bounds.contains(rho, 1e-8), "{rho}");
            assert!(c.a_tilde.iter().all(|&a| a >= 0.0 && a <= 1.0));
        }
    }

    #[test]
    fn apply_examples() {
        let id = WeightMap::Linear(LinearMap::from_parts("l", Array2::<f64>::eye(3), Array2::zeros((1, 3))));
        let x = array![1.5, -2.0, 0.25];
        assert_eq!(id.apply(&x).unwrap(), x);

        let pf = WeightMap::Pf(uniform_pf(2, EigenBounds::default()));
        let y = pf.apply(&array![1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(y, array![0.9, 0.9], epsilon = 1e-15);

        assert!(matches!(id.apply(&array![1.0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn apply_agrees_with_explicit_product() {
        let mut rng = seeded(4);
        let mut pf = PfMap::<f64>::init("pf", 6, EigenBounds::default(), &mut rng);
        pf.bias.value = normal_matrix(&mut rng, 1, 6, 1.0);
        let lin = LinearMap::<f64>::init("lin", 6, 4, &mut rng);
        let x: Array1<f64> = normal_matrix(&mut rng, 1, 6, 1.0).row(0).to_owned();

        let a = pf.compose().a_tilde;
        let expected = a.dot(&x) + pf.bias.value.row(0);
        assert_abs_diff_eq!(WeightMap::Pf(pf).apply(&x).unwrap(), expected, epsilon = 1e-14);

        let expected = lin.weight.value.dot(&x) + lin.bias.value.row(0);
        assert_abs_diff_eq!(WeightMap::Linear(lin).apply(&x).unwrap(), expected, epsilon = 1e-14);
    }

    #[test]
    fn pf_compose_gradients_match_fd() {
        let mut rng = seeded(21);
        let m_prime: Array2<f64> = normal_matrix(&mut rng, 5, 5, 1.0);
        let a_prime: Array2<f64> = normal_matrix(&mut rng, 5, 5, 1.0);
        let x: Array2<f64> = normal_matrix(&mut rng, 3, 5, 1.0);
        let err = finite_difference_check(&[m_prime, a_prime], 1e-5, |t, v| {
            let m = v[0].sigmoid().affine(-0.2, 1.0);
            let a = v[1].softmax_rows().mul(m)?;
            Ok(t.constant(x.clone()).matmul(a.t())?.gelu().square().sum())
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn row_shift_leaves_composition_unchanged() {
        let mut rng = seeded(6);
        let mut pf = PfMap::<f64>::init("pf", 4, EigenBounds::default(), &mut rng);
        let before = pf.compose().a_tilde;
        pf.a_prime.value.row_mut(2).mapv_inplace(|v| v + 0.5);
        let after = pf.compose().a_tilde;
        for (x, y) in before.row(2).iter().zip(after.row(2).iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-15);
        }
    }

    proptest::proptest! {
        #[test]
        fn row_sums_within_bounds(
            seed in 0u64..10_000,
            lo in 0.0f64..1.0,
            width in 0.0f64..0.5,
            scale in 0.1f64..10.0,
        ) {
            let bounds = EigenBounds::new(lo, lo + width).unwrap();
            let mut rng = seeded(seed);
            let m = PfMap::<f64>::from_parts(
                "pf",
                normal_matrix(&mut rng, 6, 6, scale),
                normal_matrix(&mut rng, 6, 6, scale),
                Array2::zeros((1, 6)),
                bounds,
            ).unwrap();
            let c = m.compose();
            proptest::prop_assert!(c.a_tilde.iter().all(|&a| a >= 0.0));
            for row in c.a_tilde.rows() {
                let s = row.sum();
                proptest::prop_assert!(s >= bounds.lambda_min - 1e-12 && s <= bounds.lambda_max + 1e-12);
            }
        }
    }
}
