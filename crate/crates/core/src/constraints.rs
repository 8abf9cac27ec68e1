//! Slack penalties and the multi-step training loss.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::ssm::{RolloutResult, RolloutVars};

/// `max(0, v - upper)`.
pub fn slack_upper<T: Scalar>(v: &Array1<T>, upper: &Array1<T>) -> Result<Array1<T>> {
    if v.len() != upper.len() {
        return Err(Error::shape("slack_upper", (1, v.len()), (1, upper.len())));
    }
    Ok(ndarray::Zip::from(v).and(upper).map_collect(|&a, &b| (a - b).max(T::zero())))
}

/// `max(0, lower - v)`.
pub fn slack_lower<T: Scalar>(v: &Array1<T>, lower: &Array1<T>) -> Result<Array1<T>> {
    if v.len() != lower.len() {
        return Err(Error::shape("slack_lower", (1, v.len()), (1, lower.len())));
    }
    Ok(ndarray::Zip::from(v).and(lower).map_collect(|&a, &b| (b - a).max(T::zero())))
}

/// Output bounds and per-step caps on the input and disturbance contributions.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyBounds<T> {
    pub y_lower: Array1<T>,
    pub y_upper: Array1<T>,
    pub fu_cap: Array1<T>,
    pub fd_cap: Array1<T>,
}

impl<T: Scalar> PenaltyBounds<T> {
    pub fn new(y_lower: Array1<T>, y_upper: Array1<T>, fu_cap: Array1<T>, fd_cap: Array1<T>) -> Result<Self> {
        if y_lower.len() != y_upper.len() {
            return Err(Error::shape("output bounds", (1, y_lower.len()), (1, y_upper.len())));
        }
        if fu_cap.len() != fd_cap.len() {
            return Err(Error::shape("contribution caps", (1, fu_cap.len()), (1, fd_cap.len())));
        }
        if y_lower.iter().zip(&y_upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::Config("output lower bound exceeds upper bound".into()));
        }
        if fu_cap.iter().chain(&fd_cap).any(|c| !(*c >= T::zero())) {
            return Err(Error::Config("contribution caps must be nonnegative".into()));
        }
        Ok(Self {
            y_lower,
            y_upper,
            fu_cap,
            fd_cap,
        })
    }

    /// Uniform bounds `[y_lower, y_upper]` on every output and one cap on every state.
    pub fn uniform(n_y: usize, n_x: usize, y_lower: f64, y_upper: f64, cap: f64) -> Result<Self> {
        Self::new(
            Array1::from_elem(n_y, T::of(y_lower)),
            Array1::from_elem(n_y, T::of(y_upper)),
            Array1::from_elem(n_x, T::of(cap)),
            Array1::from_elem(n_x, T::of(cap)),
        )
    }

    /// `[-0.05, 1.05]` on normalized outputs, contribution caps of `0.05`.
    pub fn default_for(n_y: usize, n_x: usize) -> Self {
        Self::uniform(n_y, n_x, -0.05, 1.05, 0.05).expect("valid defaults")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub q_dx: f64,
    pub q_ineq_y: f64,
    pub q_ineq_u: f64,
    pub q_ineq_d: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            q_dx: 0.2,
            q_ineq_y: 1.0,
            q_ineq_u: 0.2,
            q_ineq_d: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.q_dx, self.q_ineq_y, self.q_ineq_u, self.q_ineq_d];
        if all.iter().any(|q| !(q.is_finite() && *q >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be nonnegative: {self:?}")));
        }
        Ok(())
    }

    /// Same smoothness weight with every penalty switched off.
    pub fn without_penalties(self) -> Self {
        Self {
            q_ineq_y: 0.0,
            q_ineq_u: 0.0,
            q_ineq_d: 0.0,
            ..self
        }
    }

    pub fn zero() -> Self {
        Self {
            q_dx: 0.0,
            q_ineq_y: 0.0,
            q_ineq_u: 0.0,
            q_ineq_d: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T> {
    pub total: T,
    pub mse: T,
    pub smoothness: T,
    pub slack_y: T,
    pub slack_u: T,
    pub slack_d: T,
    /// False when the rollout carried no input/disturbance contributions.
    pub contributions_available: bool,
}

impl<T: Scalar> LossBreakdown<T> {
    /// `mse + Qdx*smoothness + Qy*slack_y + Qu*slack_u + Qd*slack_d`.
    pub fn recompose(&self, q: &LossWeights) -> T {
        self.mse
            + T::of(q.q_dx) * self.smoothness
            + T::of(q.q_ineq_y) * self.slack_y
            + T::of(q.q_ineq_u) * self.slack_u
            + T::of(q.q_ineq_d) * self.slack_d
    }
}

fn row<T: Scalar>(v: &Array1<T>) -> Array2<T> {
    v.clone().insert_axis(ndarray::Axis(0))
}

/// Sum over `terms` of `||term||^2`, divided by `denom`.
fn mean_sq_sum<'t, T: Scalar>(tape: &'t Tape<T>, terms: &[Var<'t, T>], denom: T) -> Result<Var<'t, T>> {
    let mut acc = tape.scalar(T::zero());
    for t in terms {
        acc = acc.add(t.square().sum())?;
    }
    Ok(acc.scale(T::one() / denom))
}

/// Differentiable multi-term loss of a batched rollout.
///
/// `ref_y[t]` holds `y_{t+1}` for every batch row. Each term is summed over
/// channels and steps, then divided by `N * B`.
pub fn multi_term_loss<'t, T: Scalar>(
    tape: &'t Tape<T>,
    ref_y: &[Array2<T>],
    rollout: &RolloutVars<'t, T>,
    bounds: &PenaltyBounds<T>,
    q: &LossWeights,
) -> Result<(Var<'t, T>, LossBreakdown<T>)> {
    let n = rollout.y.len();
    if ref_y.len() != n || n == 0 {
        return Err(Error::shape("loss horizon", (n, 0), (ref_y.len(), 0)));
    }
    let batch = rollout.y[0].shape().0;
    let denom = T::of((n * batch) as f64);

    let upper = tape.constant(row(&bounds.y_upper));
    let lower = tape.constant(row(&bounds.y_lower));
    let mut errors = Vec::with_capacity(n);
    let mut y_slacks = Vec::with_capacity(2 * n);
    for (y, r) in rollout.y.iter().zip(ref_y) {
        if y.shape() != r.dim() {
            return Err(Error::shape("loss reference", y.shape(), r.dim()));
        }
        errors.push(tape.constant(r.clone()).sub(*y)?);
        y_slacks.push(y.sub(upper)?.relu());
        y_slacks.push(y.scale(-T::one()).add(lower)?.relu());
    }
    let diffs = rollout
        .states
        .windows(2)
        .map(|w| w[1].sub(w[0]))
        .collect::<Result<Vec<_>>>()?;

    let contrib_slack = |contribs: &Option<Vec<Var<'t, T>>>, cap: &Array1<T>| -> Result<Option<Var<'t, T>>> {
        let Some(cs) = contribs else { return Ok(None) };
        let neg_cap = tape.constant(row(cap).mapv(|c| -c));
        let terms = cs
            .iter()
            .map(|c| -> Result<Var<'t, T>> {
                let over = c.add(neg_cap)?.relu();
                let under = c.scale(-T::one()).add(neg_cap)?.relu();
                over.add(under)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Some(mean_sq_sum(tape, &terms, denom)?))
    };

    let mse = mean_sq_sum(tape, &errors, denom)?;
    let smooth = mean_sq_sum(tape, &diffs, denom)?;
    let slack_y = mean_sq_sum(tape, &y_slacks, denom)?;
    let slack_u = contrib_slack(&rollout.fu, &bounds.fu_cap)?;
    let slack_d = contrib_slack(&rollout.fd, &bounds.fd_cap)?;

    let mut total = mse
        .add(smooth.scale(T::of(q.q_dx)))?
        .add(slack_y.scale(T::of(q.q_ineq_y)))?;
    if let Some(s) = slack_u {
        total = total.add(s.scale(T::of(q.q_ineq_u)))?;
    }
    if let Some(s) = slack_d {
        total = total.add(s.scale(T::of(q.q_ineq_d)))?;
    }
    let breakdown = LossBreakdown {
        total: total.item(),
        mse: mse.item(),
        smoothness: smooth.item(),
        slack_y: slack_y.item(),
        slack_u: slack_u.map_or(T::zero(), |s| s.item()),
        slack_d: slack_d.map_or(T::zero(), |s| s.item()),
        contributions_available: slack_u.is_some() && slack_d.is_some(),
    };
    Ok((total, breakdown))
}

/// Multi-term loss of a single recorded rollout, computed directly on values.
pub fn multi_term_loss_values<T: Scalar>(
    ref_y: &Array2<T>,
    rollout: &RolloutResult<T>,
    bounds: &PenaltyBounds<T>,
    q: &LossWeights,
) -> Result<LossBreakdown<T>> {
    let n = rollout.pred_y.nrows();
    if ref_y.dim() != rollout.pred_y.dim() || rollout.states.nrows() != n + 1 {
        return Err(Error::shape("loss reference", rollout.pred_y.dim(), ref_y.dim()));
    }
    let inv_n = T::one() / T::of(n.max(1) as f64);
    let sq = |a: T| a * a;

    let mut mse = T::zero();
    let mut slack_y = T::zero();
    for t in 0..n {
        let y = rollout.pred_y.row(t).to_owned();
        mse += (&ref_y.row(t) - &y).mapv(sq).sum();
        slack_y += slack_upper(&y, &bounds.y_upper)?.mapv(sq).sum();
        slack_y += slack_lower(&y, &bounds.y_lower)?.mapv(sq).sum();
    }
    let mut smoothness = T::zero();
    for t in 1..=n {
        smoothness += (&rollout.states.row(t) - &rollout.states.row(t - 1)).mapv(sq).sum();
    }
    let contrib = |c: &Option<Array2<T>>, cap: &Array1<T>| {
        c.as_ref().map(|c| {
            c.rows()
                .into_iter()
                .map(|r| ndarray::Zip::from(r).and(cap).fold(T::zero(), |acc, &v, &k| acc + sq((v.abs() - k).max(T::zero()))))
                .sum::<T>()
                * inv_n
        })
    };
    let slack_u = contrib(&rollout.fu_contrib, &bounds.fu_cap);
    let slack_d = contrib(&rollout.fd_contrib, &bounds.fd_cap);
    let mut b = LossBreakdown {
        total: T::zero(),
        mse: mse * inv_n,
        smoothness: smoothness * inv_n,
        slack_y: slack_y * inv_n,
        slack_u: slack_u.unwrap_or(T::zero()),
        slack_d: slack_d.unwrap_or(T::zero()),
        contributions_available: slack_u.is_some() && slack_d.is_some(),
    };
    b.total = b.recompose(q);
    Ok(b)
}
