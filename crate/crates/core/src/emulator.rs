//! Synthetic multi-zone building: an RC thermal network with HVAC heat flows
//! and a saturating ambient disturbance.
//!
//! States are temperature deviations from [`T_REF`], two per zone (all air
//! states first, then all envelope-mass states):
//!
//! ```text
//! x+ = A x + B q + g1 * tanh(g2 * (d - T_REF)) + solar(t)
//! y  = C x + T_REF
//! q_i = mdot_i * (Tsup_i - Tret) * cp
//! ```

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{NormalizationStats, TimeSeriesDataset, DEFAULT_SAMPLING_MINUTES};
use crate::eigen::{eigenvalues, DynamicsWeight};
use crate::error::{Error, Result};
use crate::linmap::Param;
use crate::random::{derive_seed, seeded};
use crate::ssm::{BoundModel, ModelDims, StateSpaceModel, Transition};

/// Reference temperature of the deviation states, K.
pub const T_REF: f64 = 293.15;
/// Specific heat of air, kJ/(kg K).
pub const CP_AIR: f64 = 1.005;
/// Samples per day at a 15 minute period.
pub const STEPS_PER_DAY: usize = 96;

#[derive(Debug, Clone, PartialEq)]
pub struct BuildingParams {
    pub n_zones: usize,
    /// `2n x 2n` state transition.
    pub a: Array2<f64>,
    /// `2n x n` heat-flow gain, K per kW per step.
    pub b: Array2<f64>,
    /// `n x 2n` air-state selector.
    pub c: Array2<f64>,
    pub cp: f64,
    /// Nominal return-air temperature, K.
    pub t_return: f64,
    /// Zone pairs sharing a wall.
    pub adjacency: Vec<(usize, usize)>,
    /// Ambient gain per state, K.
    pub g1: Array1<f64>,
    /// Ambient saturation scale, 1/K.
    pub g2: f64,
    /// Peak solar gain per state, K per step.
    pub solar: Array1<f64>,
}

impl BuildingParams {
    pub fn n_states(&self) -> usize {
        2 * self.n_zones
    }

    /// Spectral radius of `A`.
    pub fn spectral_radius(&self) -> Result<f64> {
        Ok(eigenvalues(&self.a)?.spectral_radius)
    }

    /// Writes `matrix,row,col,value` for every entry of `A`, `B` and `C`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "matrix,row,col,value")?;
        for (name, m) in [("A", &self.a), ("B", &self.b), ("C", &self.c)] {
            for ((r, c), v) in m.indexed_iter() {
                writeln!(out, "{name},{r},{c},{v:.16e}")?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Rows of the zone grid: the largest divisor of `n` not above `sqrt(n)`.
fn grid_rows(n: usize) -> usize {
    (1..=n).take_while(|r| r * r <= n).filter(|r| n % r == 0).last().unwrap_or(1)
}

fn grid_adjacency(n: usize) -> Vec<(usize, usize)> {
    let rows = grid_rows(n);
    let cols = n / rows;
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            if c + 1 < cols {
                edges.push((i, i + 1));
            }
            if r + 1 < rows {
                edges.push((i, i + cols));
            }
        }
    }
    edges
}

/// Randomized RC network on a near-square grid of zones.
///
/// `A` is nonnegative with row sums below one and is rescaled so that its
/// spectral radius is a seeded value in `[0.955, 0.99]`.
pub fn build_rc_network(n_zones: usize, seed: u64) -> Result<BuildingParams> {
    if n_zones == 0 {
        return Err(Error::Config("building needs at least one zone".into()));
    }
    let n = n_zones;
    let mut rng = seeded(derive_seed(seed, "rc-network"));
    let adjacency = grid_adjacency(n);
    let mut a = Array2::<f64>::zeros((2 * n, 2 * n));

    for i in 0..n {
        let k_am = rng.random_range(0.05..0.15);
        let mass_ratio = rng.random_range(0.2..0.5);
        a[[i, n + i]] = k_am;
        a[[n + i, i]] = k_am * mass_ratio;
    }
    for &(i, j) in &adjacency {
        let k = rng.random_range(0.01..0.04);
        a[[i, j]] = k;
        a[[j, i]] = k;
    }
    for i in 0..2 * n {
        let loss = if i < n {
            rng.random_range(0.002..0.006)
        } else {
            rng.random_range(0.001..0.004)
        };
        let off: f64 = a.row(i).sum();
        a[[i, i]] = 1.0 - off - loss;
    }

    let target = rng.random_range(0.955..0.99);
    let rho = eigenvalues(&a)?.spectral_radius;
    a.mapv_inplace(|v| v * target / rho);

    let g2 = 1.0 / 15.0;
    let g1 = a.map_axis(Axis(1), |r| (1.0 - r.sum()) / g2);
    let mut b = Array2::zeros((2 * n, n));
    let mut c = Array2::zeros((n, 2 * n));
    let mut solar = Array1::zeros(2 * n);
    for i in 0..n {
        b[[i, i]] = rng.random_range(0.03..0.06);
        c[[i, i]] = 1.0;
        let s = rng.random_range(0.02..0.05);
        solar[i] = s;
        solar[n + i] = 0.5 * s;
    }
    Ok(BuildingParams {
        n_zones: n,
        a,
        b,
        c,
        cp: CP_AIR,
        t_return: T_REF,
        adjacency,
        g1,
        g2,
        solar,
    })
}

/// `q_i = mdot_i * (Tsup_i - Tret_i) * cp`, in kW.
pub fn heat_flow(mdot: &Array1<f64>, t_sup: &Array1<f64>, t_ret: &Array1<f64>, cp: f64) -> Result<Array1<f64>> {
    if mdot.len() != t_sup.len() || mdot.len() != t_ret.len() {
        return Err(Error::shape("heat_flow", (1, mdot.len()), (1, t_sup.len())));
    }
    if let Some(i) = mdot.iter().position(|&m| !(m >= 0.0)) {
        return Err(Error::Input(format!("mass flow {i} is negative: {}", mdot[i])));
    }
    Ok(ndarray::Zip::from(mdot)
        .and(t_sup)
        .and(t_ret)
        .map_collect(|&m, &s, &r| m * (s - r) * cp))
}

/// Solar fraction at absolute step `t`: the positive half of a daily sine.
pub fn solar_fraction(t: usize) -> f64 {
    (2.0 * PI * t as f64 / STEPS_PER_DAY as f64).sin().max(0.0)
}

/// One step of the building. Arithmetic mirrors [`EmulatorModel`] so both
/// produce identical trajectories.
pub fn step_emulator(params: &BuildingParams, x: &Array1<f64>, q: &Array1<f64>, d: f64, solar: f64) -> Result<Array1<f64>> {
    let n = params.n_states();
    if x.len() != n || q.len() != params.n_zones {
        return Err(Error::shape("step_emulator", (n, params.n_zones), (x.len(), q.len())));
    }
    let xr = x.view().insert_axis(Axis(0));
    let qr = q.view().insert_axis(Axis(0));
    let lin = xr.dot(&params.a.t().as_standard_layout()) + qr.dot(&params.b.t().as_standard_layout());
    let sat = ((d - T_REF) * params.g2).tanh();
    let mut next = lin.index_axis(Axis(0), 0).to_owned();
    for i in 0..n {
        next[i] = (next[i] + sat * params.g1[i]) + solar * params.solar[i];
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcitationConfig {
    pub days: usize,
    /// Mass-flow range, kg/s.
    pub mdot_range: (f64, f64),
    /// Supply-air temperature range, K.
    pub supply_temp_range: (f64, f64),
    pub ambient_mean: f64,
    pub ambient_amplitude: f64,
    /// Mean number of steps a zone holds each random input level; zones
    /// switch independently.
    pub switch_period_steps: usize,
    /// Standard deviation of ambient temperature noise, K.
    pub noise_std: f64,
    /// Standard deviation of zone temperature sensor noise, K.
    #[serde(default)]
    pub measurement_noise_std: f64,
    /// Days simulated and discarded before recording.
    #[serde(default = "default_warmup")]
    pub warmup_days: usize,
    #[serde(default = "default_true")]
    pub solar: bool,
    pub seed: u64,
}

fn default_warmup() -> usize {
    2
}

fn default_true() -> bool {
    true
}

impl Default for ExcitationConfig {
    fn default() -> Self {
        Self {
            days: 30,
            mdot_range: (0.0, 0.5),
            supply_temp_range: (288.15, 303.15),
            ambient_mean: 283.15,
            ambient_amplitude: 7.0,
            switch_period_steps: 1,
            noise_std: 0.0,
            measurement_noise_std: 0.0,
            warmup_days: 2,
            solar: true,
            seed: 0,
        }
    }
}

impl ExcitationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.days == 0 {
            return Err(Error::Config("days must be at least 1".into()));
        }
        if self.switch_period_steps == 0 {
            return Err(Error::Config("switch period must be at least 1 step".into()));
        }
        let (m0, m1) = self.mdot_range;
        let (s0, s1) = self.supply_temp_range;
        if !(0.0 <= m0 && m0 <= m1) || !(s0 <= s1) {
            return Err(Error::Config(format!(
                "invalid excitation ranges: mdot {:?}, supply {:?}",
                self.mdot_range, self.supply_temp_range
            )));
        }
        if !(self.noise_std >= 0.0 && self.measurement_noise_std >= 0.0 && self.ambient_amplitude >= 0.0) {
            return Err(Error::Config("noise levels and amplitude must be nonnegative".into()));
        }
        Ok(())
    }
}

/// A generated dataset with the true state trajectory behind it.
#[derive(Debug, Clone)]
pub struct Generated {
    pub dataset: TimeSeriesDataset<f64>,
    /// `T x 2n` deviation states; row `t` produces `y` row `t`.
    pub states: Array2<f64>,
    /// Absolute step of row 0 (the warm-up length).
    pub time_offset: usize,
}

fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Simulates `days` of excitation, `96` rows per day.
pub fn generate_dataset(params: &BuildingParams, cfg: &ExcitationConfig) -> Result<Generated> {
    cfg.validate()?;
    let n = params.n_zones;
    let warmup = cfg.warmup_days * STEPS_PER_DAY;
    let rows = cfg.days * STEPS_PER_DAY;
    let total = warmup + rows;
    let mut rng = seeded(derive_seed(cfg.seed, "excitation"));
    let mut noise_rng = seeded(derive_seed(cfg.seed, "noise"));
    let ambient_noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let sensor_noise = Normal::new(0.0, cfg.measurement_noise_std).map_err(|e| Error::Config(e.to_string()))?;

    let mut y = Array2::zeros((rows, n));
    let mut u = Array2::zeros((rows, 2 * n));
    let mut d = Array2::zeros((rows, 1));
    let mut states = Array2::zeros((rows, 2 * n));

    let t_ret = Array1::from_elem(n, params.t_return);
    let mut mdot = Array1::zeros(n);
    let mut t_sup = Array1::zeros(n);
    let mut x = Array1::<f64>::zeros(2 * n);
    let mut hold = vec![0usize; n];
    let max_hold = 2 * cfg.switch_period_steps - 1;
    for k in 0..total {
        for i in 0..n {
            if hold[i] == 0 {
                mdot[i] = draw(&mut rng, cfg.mdot_range);
                t_sup[i] = draw(&mut rng, cfg.supply_temp_range);
                hold[i] = rng.random_range(1..=max_hold);
            }
            hold[i] -= 1;
        }
        let mut amb = cfg.ambient_mean + cfg.ambient_amplitude * (2.0 * PI * k as f64 / STEPS_PER_DAY as f64).sin();
        if cfg.noise_std > 0.0 {
            amb += ambient_noise.sample(&mut noise_rng);
        }
        if k >= warmup {
            let t = k - warmup;
            states.row_mut(t).assign(&x);
            for i in 0..n {
                let mut yi = x[i] + T_REF;
                if cfg.measurement_noise_std > 0.0 {
                    yi += sensor_noise.sample(&mut noise_rng);
                }
                y[[t, i]] = yi;
                u[[t, i]] = mdot[i];
                u[[t, n + i]] = t_sup[i];
            }
            d[[t, 0]] = amb;
        }
        let q = heat_flow(&mdot, &t_sup, &t_ret, params.cp)?;
        let sol = if cfg.solar { solar_fraction(k) } else { 0.0 };
        x = step_emulator(params, &x, &q, amb, sol)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericOverflow {
                step: k,
                detail: "emulator state diverged".into(),
            });
        }
    }
    Ok(Generated {
        dataset: TimeSeriesDataset::new(y, u, d, DEFAULT_SAMPLING_MINUTES)?,
        states,
        time_offset: warmup,
    })
}

/// The emulator exposed as a state-space model.
///
/// Its observer replays recorded states: a past-output window is looked up in
/// the recorded trajectory and the matching state is returned. With
/// normalization stats attached, inputs and outputs are in normalized units.
#[derive(Debug, Clone)]
pub struct EmulatorModel {
    pub params: BuildingParams,
    pub stats: Option<NormalizationStats<f64>>,
    pub horizon: usize,
    pub solar: bool,
    replay_y: Array2<f64>,
    replay_x: Array2<f64>,
    time_offset: usize,
    /// Largest window mismatch accepted by the replay lookup, K.
    pub match_tol: f64,
}

impl EmulatorModel {
    pub fn new(params: BuildingParams, generated: &Generated, horizon: usize, solar: bool) -> Self {
        Self {
            params,
            stats: None,
            horizon,
            solar,
            replay_y: generated.dataset.y.clone(),
            replay_x: generated.states.clone(),
            time_offset: generated.time_offset,
            match_tol: 1e-6,
        }
    }

    pub fn with_stats(mut self, stats: NormalizationStats<f64>) -> Self {
        self.stats = Some(stats);
        self
    }

    /// Recorded row `s - 1` whose preceding window equals `window` (raw units).
    fn lookup(&self, window: &Array2<f64>) -> Result<usize> {
        let n = self.horizon;
        let total = self.replay_y.nrows();
        let mut best = (f64::INFINITY, 0);
        for s in n..=total {
            let cand = self.replay_y.slice(s![s - n..s, ..]);
            let mut gap = 0.0f64;
            for (a, b) in cand.iter().zip(window.iter()) {
                gap = gap.max((a - b).abs());
                if gap > best.0 {
                    break;
                }
            }
            if gap < best.0 {
                best = (gap, s);
            }
        }
        if best.0 <= self.match_tol {
            Ok(best.1 - 1)
        } else {
            Err(Error::Data(format!(
                "observer window not found in the recorded trajectory (closest mismatch {:.3e} K)",
                best.0
            )))
        }
    }
}

fn to_row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row")
}

impl StateSpaceModel<f64> for EmulatorModel {
    fn dims(&self) -> ModelDims {
        ModelDims {
            n_x: self.params.n_states(),
            n_y: self.params.n_zones,
            n_u: 2 * self.params.n_zones,
            n_d: 1,
            horizon: self.horizon,
        }
    }

    fn is_structured(&self) -> bool {
        true
    }

    fn params(&self) -> Vec<&Param<f64>> {
        Vec::new()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<f64>> {
        Vec::new()
    }

    fn dynamics_weights(&self) -> Vec<DynamicsWeight<f64>> {
        vec![DynamicsWeight {
            label: "A".into(),
            matrix: self.params.a.clone(),
            bounds: None,
        }]
    }

    fn bind<'s, 't: 's>(&'s self, tape: &'t Tape<f64>) -> Result<Box<dyn BoundModel<'t, f64> + 's>> {
        let p = &self.params;
        let n = p.n_zones;
        let scale = |g: &crate::data::ChannelRange<f64>| {
            let span: Vec<f64> = (0..g.min.len()).map(|c| g.span(c)).collect();
            (tape.constant(to_row(&span)), tape.constant(to_row(&g.min)))
        };
        let norm = self.stats.as_ref().map(|st| NormConsts {
            y: scale(&st.y),
            u: scale(&st.u),
            d: scale(&st.d),
        });
        Ok(Box::new(BoundEmulator {
            model: self,
            tape,
            a_t: tape.constant(p.a.t().as_standard_layout().into_owned()),
            b_t: tape.constant(p.b.t().as_standard_layout().into_owned()),
            c_t: tape.constant(p.c.t().as_standard_layout().into_owned()),
            g1: tape.constant(p.g1.clone().insert_axis(Axis(0))),
            norm,
            n,
            times: Vec::new(),
        }))
    }
}

struct NormConsts<'t> {
    y: (Var<'t, f64>, Var<'t, f64>),
    u: (Var<'t, f64>, Var<'t, f64>),
    d: (Var<'t, f64>, Var<'t, f64>),
}

struct BoundEmulator<'t, 'm> {
    model: &'m EmulatorModel,
    tape: &'t Tape<f64>,
    a_t: Var<'t, f64>,
    b_t: Var<'t, f64>,
    c_t: Var<'t, f64>,
    g1: Var<'t, f64>,
    norm: Option<NormConsts<'t>>,
    n: usize,
    /// Absolute step of the current state, per batch row.
    times: Vec<usize>,
}

fn denorm<'t>(v: Var<'t, f64>, c: &(Var<'t, f64>, Var<'t, f64>)) -> Result<Var<'t, f64>> {
    v.mul(c.0)?.add(c.1)
}

impl<'t> BoundModel<'t, f64> for BoundEmulator<'t, '_> {
    fn observe(&mut self, past_y: Var<'t, f64>) -> Result<Var<'t, f64>> {
        let flat = past_y.to_array();
        let (n_y, horizon) = (self.n, self.model.horizon);
        let mut x0 = Array2::zeros((flat.nrows(), 2 * self.n));
        self.times.clear();
        for (b, row) in flat.rows().into_iter().enumerate() {
            let mut window = row.to_owned().into_shape_with_order((horizon, n_y)).map_err(|e| Error::Data(e.to_string()))?;
            if let Some(st) = &self.model.stats {
                for ((_, c), v) in window.indexed_iter_mut() {
                    *v = *v * st.y.span(c) + st.y.min[c];
                }
            }
            let idx = self.model.lookup(&window)?;
            x0.row_mut(b).assign(&self.model.replay_x.row(idx));
            self.times.push(idx + self.model.time_offset);
        }
        Ok(self.tape.constant(x0))
    }

    fn step(&mut self, x: Var<'t, f64>, u: Var<'t, f64>, d: Var<'t, f64>) -> Result<Transition<'t, f64>> {
        let p = &self.model.params;
        let (u, d) = match &self.norm {
            Some(nc) => (denorm(u, &nc.u)?, denorm(d, &nc.d)?),
            None => (u, d),
        };
        let mdot = u.slice_cols(0, self.n)?;
        let t_sup = u.slice_cols(self.n, 2 * self.n)?;
        let q = mdot.mul(t_sup.affine(1.0, -p.t_return))?.scale(p.cp);
        let fu = q.matmul(self.b_t)?;
        let sat = d.affine(1.0, -T_REF).scale(p.g2).tanh();
        let mut fd = sat.matmul(self.g1)?;
        let lin = x.matmul(self.a_t)?.add(fu)?;
        let mut next = lin.add(fd)?;
        if self.model.solar {
            let mut sol = Array2::zeros((self.times.len(), 2 * self.n));
            for (b, t) in self.times.iter().enumerate() {
                let f = solar_fraction(*t);
                sol.row_mut(b).assign(&p.solar.mapv(|s| f * s));
            }
            let sol = self.tape.constant(sol);
            next = next.add(sol)?;
            fd = fd.add(sol)?;
        }
        self.times.iter_mut().for_each(|t| *t += 1);
        Ok(Transition {
            next,
            fu: Some(fu),
            fd: Some(fd),
        })
    }

    fn output(&mut self, x: Var<'t, f64>) -> Result<Var<'t, f64>> {
        let y = x.matmul(self.c_t)?.affine(1.0, T_REF);
        match &self.norm {
            Some(nc) => {
                let (span, min) = nc.y;
                let inv = span.value().mapv(|s| 1.0 / s);
                y.sub(min)?.mul(self.tape.constant(inv))
            }
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    use super::*;
    use crate::data::{make_windows, split_even};
    use crate::ssm::{open_loop_simulate, simulate};

    #[test]
    fn grid_shapes() {
        assert_eq!(grid_rows(20), 4);
        assert_eq!(grid_adjacency(20).len(), 4 * 4 + 3 * 5);
        assert_eq!(grid_rows(1), 1);
        assert_eq!(grid_rows(7), 1);
    }

    #[test]
    fn single_zone_and_twenty_zone_networks() {
        let p = build_rc_network(1, 3).unwrap();
        assert_eq!(p.a.dim(), (2, 2));
        assert!(p.spectral_radius().unwrap() < 1.0);

        let p = build_rc_network(20, 1).unwrap();
        assert_eq!(p.a.dim(), (40, 40));
        let rho = p.spectral_radius().unwrap();
        assert!((0.95..=0.995).contains(&rho), "{rho}");
        assert!(p.a.iter().all(|&v| v >= 0.0));
        for r in p.c.rows() {
            assert_eq!(r.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(r.iter().filter(|&&v| v == 0.0).count(), 39);
        }
        assert_eq!(build_rc_network(20, 1).unwrap(), p);
        assert!(build_rc_network(0, 1).is_err());
    }

    #[test]
    fn heat_flow_examples() {
        let q = heat_flow(&array![0.5], &array![303.15], &array![293.15], CP_AIR).unwrap();
        assert_abs_diff_eq!(q[0], 5.025, epsilon = 1e-12);
        assert_eq!(heat_flow(&array![0.5], &array![293.0], &array![293.0], CP_AIR).unwrap()[0], 0.0);
        assert!(heat_flow(&array![0.5], &array![290.0], &array![293.0], CP_AIR).unwrap()[0] < 0.0);
        assert!(matches!(heat_flow(&array![-0.1], &array![290.0], &array![293.0], CP_AIR), Err(Error::Input(_))));

        let (m, s, r) = (array![0.3, 0.7], array![300.0, 280.0], array![290.0, 295.0]);
        let q = heat_flow(&m, &s, &r, CP_AIR).unwrap();
        assert_eq!(heat_flow(&(&m * 2.0), &s, &r, CP_AIR).unwrap(), &q * 2.0);
        let s2 = &r + &((&s - &r) * 2.0);
        let q2 = heat_flow(&m, &s2, &r, CP_AIR).unwrap();
        assert_abs_diff_eq!(q2, &q * 2.0, epsilon = 1e-12);
    }

    #[test]
    fn step_examples() {
        let p = build_rc_network(3, 5).unwrap();
        let x = Array1::from_iter((0..6).map(|i| i as f64 - 2.5));
        let q = Array1::zeros(3);
        let next = step_emulator(&p, &x, &q, T_REF, 0.0).unwrap();
        assert_abs_diff_eq!(next, p.a.dot(&x), epsilon = 1e-14);
        let next = step_emulator(&p, &Array1::zeros(6), &q, 300.0, 0.7).unwrap();
        let sat = ((300.0 - T_REF) * p.g2).tanh();
        assert_abs_diff_eq!(next, &p.g1 * sat + &p.solar * 0.7, epsilon = 1e-14);
    }

    #[test]
    fn free_response_decays() {
        let p = build_rc_network(20, 2).unwrap();
        let rho = p.spectral_radius().unwrap();
        let max_row: f64 = p.a.rows().into_iter().map(|r| r.sum()).fold(0.0, f64::max);
        let mut x = Array1::from_iter((0..40).map(|i| ((i * 7) % 11) as f64 - 5.0));
        let x0_norm = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let q = Array1::zeros(20);
        for k in 1..=2000 {
            x = step_emulator(&p, &x, &q, T_REF, 0.0).unwrap();
            if k == 100 {
                let norm = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                assert!(norm <= max_row.powi(100) * x0_norm * (1.0 + 1e-12));
                assert!(max_row >= rho - 1e-12);
            }
        }
        let norm = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let rate = (norm / x0_norm).powf(1.0 / 2000.0);
        assert!((rate - rho).abs() < 0.01 * rho, "{rate} vs {rho}");
    }

    #[test]
    fn thirty_days_give_2880_rows() {
        let p = build_rc_network(20, 1).unwrap();
        let g = generate_dataset(&p, &ExcitationConfig { seed: 1, ..Default::default() }).unwrap();
        let ds = &g.dataset;
        assert_eq!((ds.y.dim(), ds.u.dim(), ds.d.dim()), ((2880, 20), (2880, 40), (2880, 1)));
        assert!(ds.y.iter().all(|v| v.is_finite()));
        let again = generate_dataset(&p, &ExcitationConfig { seed: 1, ..Default::default() }).unwrap();
        assert_eq!(again.dataset, g.dataset);
    }

    #[test]
    fn constant_excitation_gives_smooth_bounded_trajectories() {
        let p = build_rc_network(4, 1).unwrap();
        let cfg = ExcitationConfig {
            days: 3,
            mdot_range: (0.2, 0.2),
            supply_temp_range: (295.0, 295.0),
            ambient_amplitude: 0.0,
            solar: false,
            seed: 2,
            ..Default::default()
        };
        let g = generate_dataset(&p, &cfg).unwrap();
        let u0 = g.dataset.u.row(0).to_owned();
        assert!(g.dataset.u.rows().into_iter().all(|r| r == u0));
        for t in 1..g.dataset.len() {
            let jump = (&g.dataset.y.row(t) - &g.dataset.y.row(t - 1)).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(jump < 0.5);
        }
        assert!(g.dataset.y.iter().all(|&v| (250.0..350.0).contains(&v)));
    }

    #[test]
    fn bounded_over_ten_thousand_steps() {
        let p = build_rc_network(20, 4).unwrap();
        let cfg = ExcitationConfig {
            days: 10_000 / STEPS_PER_DAY + 1,
            noise_std: 1.0,
            seed: 4,
            ..Default::default()
        };
        let g = generate_dataset(&p, &cfg).unwrap();
        assert!(g.dataset.len() >= 10_000);
        let (lo, hi) = g.dataset.y.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(lo > 240.0 && hi < 340.0, "{lo} {hi}");
    }

    #[test]
    fn emulator_as_model_reproduces_its_data() {
        let p = build_rc_network(6, 8).unwrap();
        let g = generate_dataset(&p, &ExcitationConfig { days: 6, seed: 8, ..Default::default() }).unwrap();
        let n = 8;
        let model = EmulatorModel::new(p, &g, n, true);
        let splits = split_even(&g.dataset, n).unwrap();
        for split in [&splits.train, &splits.dev, &splits.test] {
            let traj = open_loop_simulate(&model, split).unwrap();
            assert_eq!(traj.mse(), 0.0);
            for w in make_windows(split, n, n).unwrap() {
                let r = simulate(&model, &w.past_y, &w.u, &w.d).unwrap();
                assert_eq!(r.pred_y, w.ref_y);
            }
        }
    }

    #[test]
    fn emulator_model_in_normalized_units() {
        let p = build_rc_network(5, 9).unwrap();
        let g = generate_dataset(&p, &ExcitationConfig { days: 6, seed: 9, ..Default::default() }).unwrap();
        let splits = split_even(&g.dataset, 8).unwrap();
        let stats = NormalizationStats::fit(&splits.train).unwrap();
        let model = EmulatorModel::new(p, &g, 8, true).with_stats(stats.clone());
        let test = stats.apply(&splits.test).unwrap();
        let traj = open_loop_simulate(&model, &test).unwrap();
        assert!(traj.mse() < 1e-20, "{}", traj.mse());
    }

    #[test]
    fn unknown_window_is_a_data_error() {
        let p = build_rc_network(2, 1).unwrap();
        let g = generate_dataset(&p, &ExcitationConfig { days: 1, seed: 1, ..Default::default() }).unwrap();
        let model = EmulatorModel::new(p, &g, 2, true);
        let err = simulate(&model, &Array2::zeros((2, 2)), &Array2::zeros((1, 4)), &Array2::zeros((1, 1))).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn params_csv_lists_every_entry() {
        let p = build_rc_network(2, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.csv");
        p.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + 16 + 8 + 8);
    }
}
