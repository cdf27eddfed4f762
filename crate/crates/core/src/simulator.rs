//! First-order upwind simulation of the plant and of the target systems.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::feedforward::FeedforwardKernels;
use crate::geometry::{CoefficientProfile, Phi, PhiMaps, SpeedCase};
use crate::grid::PlantGrid;

pub const DEFAULT_CFL: f64 = 0.8;
pub const DEFAULT_NODES: usize = 401;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimConfig {
    /// Spatial node count (odd).
    pub nodes: usize,
    pub cfl: f64,
    pub t_final: f64,
    /// Snapshot cadence in time units; `0` records only the endpoints.
    pub record_every: f64,
}

impl SimConfig {
    pub fn new(nodes: usize, cfl: f64, t_final: f64) -> Result<Self> {
        let cfg = Self {
            nodes,
            cfl,
            t_final,
            record_every: 0.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        PlantGrid::new(self.nodes)?;
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(Error::Config("cfl must lie in (0,1]".into()));
        }
        if !(self.t_final >= 0.0 && self.t_final.is_finite()) {
            return Err(Error::Config(
                "t_final must be finite and nonnegative".into(),
            ));
        }
        if !(self.record_every >= 0.0) {
            return Err(Error::Config("record_every must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Plant coefficients sampled on the simulation grid.
#[derive(Debug, Clone)]
pub struct PlantModel {
    grid: PlantGrid,
    lambda: Vec<f64>,
    mu: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    max_speed: f64,
}

impl PlantModel {
    pub fn new(profile: &CoefficientProfile, grid: PlantGrid) -> Self {
        let lambda = grid.sample(|w| profile.lambda(w));
        let mu = grid.sample(|w| profile.mu(w));
        let max_speed = lambda.iter().chain(&mu).fold(0.0_f64, |m, &x| m.max(x));
        Self {
            grid,
            b: grid.sample(|w| profile.b(w)),
            c: grid.sample(|w| profile.c(w)),
            lambda,
            mu,
            max_speed,
        }
    }

    pub fn grid(&self) -> &PlantGrid {
        &self.grid
    }

    /// Largest stable step.
    pub fn dt_limit(&self) -> f64 {
        self.grid.dx() / self.max_speed
    }

    fn check_dt(&self, dt: f64) -> Result<()> {
        let limit = self.dt_limit();
        if !(dt > 0.0) || dt > limit * (1.0 + 1e-12) {
            return Err(Error::CflViolation { dt, limit });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlantState {
    pub t: f64,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub u1: f64,
    pub u2: f64,
}

impl PlantState {
    pub fn new(grid: &PlantGrid, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        grid.check_len("u", u.len())?;
        grid.check_len("v", v.len())?;
        let (u1, u2) = (u[0], v[v.len() - 1]);
        Ok(Self {
            t: 0.0,
            u,
            v,
            u1,
            u2,
        })
    }

    pub fn from_fn(grid: &PlantGrid, u0: impl Fn(f64) -> f64, v0: impl Fn(f64) -> f64) -> Self {
        let (u, v) = (grid.sample(u0), grid.sample(v0));
        Self::new(grid, u, v).expect("sampled on the same grid")
    }

    pub fn l2_norm(&self, grid: &PlantGrid) -> f64 {
        grid.l2_norm(&self.u, &self.v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TargetState {
    pub t: f64,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
}

impl TargetState {
    pub fn l2_norm(&self, grid: &PlantGrid) -> f64 {
        grid.l2_norm(&self.alpha, &self.beta)
    }
}

/// Supplies the boundary inputs after the interior update. `u[0]` and
/// `v[n-1]` hold stale values on entry; implementations that feed back the
/// boundary nodes themselves must solve for them consistently.
pub trait BoundaryFeedback {
    fn boundary_inputs(&self, t: f64, u: &[f64], v: &[f64]) -> (f64, f64);
}

/// Zero inputs.
#[derive(Debug, Clone, Copy, Default)]
pub struct OpenLoop;

impl BoundaryFeedback for OpenLoop {
    fn boundary_inputs(&self, _: f64, _: &[f64], _: &[f64]) -> (f64, f64) {
        (0.0, 0.0)
    }
}

/// Prescribed inputs as functions of time.
pub struct PrescribedInputs<F: Fn(f64) -> (f64, f64)>(pub F);

impl<F: Fn(f64) -> (f64, f64)> BoundaryFeedback for PrescribedInputs<F> {
    fn boundary_inputs(&self, t: f64, _: &[f64], _: &[f64]) -> (f64, f64) {
        (self.0)(t)
    }
}

/// One step: upwind transport, explicit sources, then boundary injection.
pub fn step_plant(
    model: &PlantModel,
    state: &mut PlantState,
    feedback: &dyn BoundaryFeedback,
    dt: f64,
) -> Result<()> {
    model.check_dt(dt)?;
    let n = model.grid.len();
    let r = dt / model.grid.dx();
    let (u, v) = (&state.u, &state.v);
    let mut nu = vec![0.0; n];
    let mut nv = vec![0.0; n];
    for j in 1..n {
        nu[j] = u[j] - r * model.lambda[j] * (u[j] - u[j - 1]) + dt * model.b[j] * v[j];
    }
    for j in 0..n - 1 {
        nv[j] = v[j] + r * model.mu[j] * (v[j + 1] - v[j]) + dt * model.c[j] * u[j];
    }
    nu[0] = u[0];
    nv[n - 1] = v[n - 1];
    let t = state.t + dt;
    let (u1, u2) = feedback.boundary_inputs(t, &nu, &nv);
    nu[0] = u1;
    nv[n - 1] = u2;
    state.u = nu;
    state.v = nv;
    state.u1 = u1;
    state.u2 = u2;
    state.t = t;
    Ok(())
}

/// Steps of size `cfl dt_limit`, with the last one shortened to land on
/// `t_final`.
pub fn time_steps(dt_limit: f64, cfl: f64, t_final: f64) -> Vec<f64> {
    let dt = cfl * dt_limit;
    let mut steps = Vec::new();
    let mut t = 0.0;
    while t < t_final {
        let h = dt.min(t_final - t);
        if h <= 1e-14 * t_final.max(1.0) {
            break;
        }
        steps.push(h);
        t += h;
    }
    steps
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormSample {
    pub t: f64,
    pub l2: f64,
    pub u1: f64,
    pub u2: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimRecord {
    pub norms: Vec<NormSample>,
    pub snapshots: Vec<PlantState>,
}

/// Runs the plant from `initial` to `config.t_final`. `on_step` sees the
/// initial state and every state after a step.
pub fn simulate(
    profile: &CoefficientProfile,
    config: &SimConfig,
    initial: PlantState,
    feedback: &dyn BoundaryFeedback,
    mut on_step: impl FnMut(&PlantState),
) -> Result<SimRecord> {
    config.validate()?;
    let grid = PlantGrid::new(config.nodes)?;
    let model = PlantModel::new(profile, grid);
    let mut state = initial;
    grid.check_len("u", state.u.len())?;
    grid.check_len("v", state.v.len())?;
    let mut rec = SimRecord {
        norms: Vec::new(),
        snapshots: Vec::new(),
    };
    let mut recorder = Recorder::new(config.record_every);
    let push = |rec: &mut SimRecord, s: &PlantState| {
        rec.norms.push(NormSample {
            t: s.t,
            l2: s.l2_norm(&grid),
            u1: s.u1,
            u2: s.u2,
        });
    };
    push(&mut rec, &state);
    rec.snapshots.push(state.clone());
    on_step(&state);
    let steps = time_steps(model.dt_limit(), config.cfl, config.t_final);
    let last = steps.len();
    for (i, dt) in steps.into_iter().enumerate() {
        step_plant(&model, &mut state, feedback, dt)?;
        push(&mut rec, &state);
        on_step(&state);
        if recorder.due(state.t) || i + 1 == last {
            rec.snapshots.push(state.clone());
        }
    }
    Ok(rec)
}

struct Recorder {
    every: f64,
    next: f64,
}

impl Recorder {
    fn new(every: f64) -> Self {
        Self { every, next: every }
    }

    fn due(&mut self, t: f64) -> bool {
        if self.every <= 0.0 || t + 1e-12 < self.next {
            return false;
        }
        while self.next <= t + 1e-12 {
            self.next += self.every;
        }
        true
    }
}

/// Target-system coefficients on the simulation grid.
pub struct TargetModel<'a> {
    case: SpeedCase,
    grid: PlantGrid,
    lambda: Vec<f64>,
    mu: Vec<f64>,
    max_speed: f64,
    feedforward: Option<&'a FeedforwardKernels>,
}

impl<'a> TargetModel<'a> {
    pub fn new(
        profile: &CoefficientProfile,
        case: SpeedCase,
        feedforward: Option<&'a FeedforwardKernels>,
        grid: PlantGrid,
    ) -> Result<Self> {
        if case != SpeedCase::Equal {
            let ff = feedforward.ok_or(Error::MissingFeedforward(case))?;
            if ff.case() != case {
                return Err(Error::WrongCase {
                    expected: match case {
                        SpeedCase::LambdaFaster => "LambdaFaster feedforward",
                        _ => "MuFaster feedforward",
                    },
                    found: ff.case(),
                });
            }
            if *ff.grid() != grid {
                return Err(Error::GridMismatch(
                    "feedforward kernels were computed on a different grid".into(),
                ));
            }
        }
        let lambda = grid.sample(|w| profile.lambda(w));
        let mu = grid.sample(|w| profile.mu(w));
        let max_speed = lambda.iter().chain(&mu).fold(0.0_f64, |m, &x| m.max(x));
        Ok(Self {
            case,
            grid,
            lambda,
            mu,
            max_speed,
            feedforward: if case == SpeedCase::Equal {
                None
            } else {
                feedforward
            },
        })
    }

    pub fn dt_limit(&self) -> f64 {
        self.grid.dx() / self.max_speed
    }

    /// Reflection plus integral terms at node `k`.
    fn source(
        &self,
        ff: &FeedforwardKernels,
        k: usize,
        reflected: &[f64],
        a: &[f64],
        b: &[f64],
    ) -> f64 {
        let g = &self.grid;
        let (lo, hi) = g.span(k);
        let mut integral = 0.0;
        if hi > lo {
            let (pr, mr) = (ff.plus_row(k), ff.minus_row(k));
            for j in lo..=hi {
                let wt = if j == lo || j == hi { 0.5 } else { 1.0 };
                integral += wt * (pr[j] * a[j] + mr[j] * b[j]);
            }
            integral *= g.dx() * g.w(k).signum();
        }
        ff.reflection()[k] * reflected[g.mirror(k)] + integral
    }

    pub fn step(&self, state: &mut TargetState, dt: f64) -> Result<()> {
        let limit = self.dt_limit();
        if !(dt > 0.0) || dt > limit * (1.0 + 1e-12) {
            return Err(Error::CflViolation { dt, limit });
        }
        let g = &self.grid;
        let n = g.len();
        let r = dt / g.dx();
        let (a, b) = (&state.alpha, &state.beta);
        let mut na = vec![0.0; n];
        let mut nb = vec![0.0; n];
        for j in 1..n {
            na[j] = a[j] - r * self.lambda[j] * (a[j] - a[j - 1]);
        }
        for j in 0..n - 1 {
            nb[j] = b[j] + r * self.mu[j] * (b[j + 1] - b[j]);
        }
        match (self.case, self.feedforward) {
            (SpeedCase::LambdaFaster, Some(ff)) => {
                for (k, x) in nb.iter_mut().enumerate().take(n - 1) {
                    *x += dt * self.source(ff, k, a, a, b);
                }
            }
            (SpeedCase::MuFaster, Some(ff)) => {
                for (k, x) in na.iter_mut().enumerate().skip(1) {
                    *x += dt * self.source(ff, k, b, a, b);
                }
            }
            _ => {}
        }
        na[0] = 0.0;
        nb[n - 1] = 0.0;
        state.alpha = na;
        state.beta = nb;
        state.t += dt;
        Ok(())
    }
}

/// Simulates the target system of `case` from `(alpha0, beta0)`; returns
/// the states at every step (the first is the initial state).
pub fn simulate_target(
    profile: &CoefficientProfile,
    case: SpeedCase,
    feedforward: Option<&FeedforwardKernels>,
    config: &SimConfig,
    alpha0: Vec<f64>,
    beta0: Vec<f64>,
) -> Result<Vec<TargetState>> {
    config.validate()?;
    let grid = PlantGrid::new(config.nodes)?;
    grid.check_len("alpha0", alpha0.len())?;
    grid.check_len("beta0", beta0.len())?;
    let model = TargetModel::new(profile, case, feedforward, grid)?;
    let mut state = TargetState {
        t: 0.0,
        alpha: alpha0,
        beta: beta0,
    };
    let mut out = vec![state.clone()];
    for dt in time_steps(model.dt_limit(), config.cfl, config.t_final) {
        model.step(&mut state, dt)?;
        out.push(state.clone());
    }
    Ok(out)
}

/// Closed-form solution of the equal-speed target system: both states are
/// transported out of the domain along their characteristics.
pub fn explicit_target_case1(
    alpha0: impl Fn(f64) -> f64,
    beta0: impl Fn(f64) -> f64,
    phi: &PhiMaps,
    w: f64,
    t: f64,
) -> (f64, f64) {
    let p1 = phi.phi1(w);
    let alpha = if t < p1 - phi.phi1(-1.0) {
        alpha0(phi.inverse_clamped(Phi::One, p1 - t))
    } else {
        0.0
    };
    let p2 = phi.phi2(w);
    let beta = if t < phi.phi2(1.0) - p2 {
        beta0(phi.inverse_clamped(Phi::Two, p2 + t))
    } else {
        0.0
    };
    (alpha, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_phi_maps;

    fn bump(w: f64) -> f64 {
        if w.abs() < 0.3 {
            1.0
        } else {
            0.0
        }
    }

    #[test]
    fn cfl_outside_unit_interval_is_rejected() {
        let err = SimConfig::new(101, 1.5, 1.0).unwrap_err();
        assert_eq!(err.to_string(), "config: cfl must lie in (0,1]");
    }

    #[test]
    fn oversized_step_is_a_cfl_violation() {
        let p = CoefficientProfile::constant(1.0, 1.0, 0.0, 0.0, 64).unwrap();
        let g = PlantGrid::new(21).unwrap();
        let m = PlantModel::new(&p, g);
        let mut s = PlantState::from_fn(&g, |_| 0.0, |_| 0.0);
        let err = step_plant(&m, &mut s, &OpenLoop, 2.0 * m.dt_limit()).unwrap_err();
        assert!(matches!(err, Error::CflViolation { .. }));
    }

    #[test]
    fn decoupled_transport_empties_the_domain() {
        let p = CoefficientProfile::constant(1.0, 1.0, 0.0, 0.0, 64).unwrap();
        let cfg = SimConfig::new(201, 1.0, 2.0).unwrap();
        let g = PlantGrid::new(201).unwrap();
        let mut sup = 1.0_f64;
        let rec = simulate(
            &p,
            &cfg,
            PlantState::from_fn(&g, bump, bump),
            &OpenLoop,
            |s| {
                let m = s.u.iter().chain(&s.v).fold(0.0_f64, |m, x| m.max(x.abs()));
                assert!(m <= sup + 1e-15);
                sup = m;
            },
        )
        .unwrap();
        let last = rec.snapshots.last().unwrap();
        assert!((last.t - 2.0).abs() < 1e-12);
        assert!(last.u.iter().chain(&last.v).all(|x| x.abs() <= 1e-10));
    }

    #[test]
    fn equilibrium_stays_zero() {
        let p = CoefficientProfile::example(64).unwrap();
        let cfg = SimConfig::new(51, 0.8, 1.0).unwrap();
        let g = PlantGrid::new(51).unwrap();
        let rec = simulate(
            &p,
            &cfg,
            PlantState::from_fn(&g, |_| 0.0, |_| 0.0),
            &OpenLoop,
            |_| {},
        )
        .unwrap();
        assert!(rec.norms.iter().all(|n| n.l2 == 0.0));
    }

    #[test]
    fn boundary_inputs_are_injected() {
        let p = CoefficientProfile::constant(1.0, 1.0, 0.2, 0.1, 64).unwrap();
        let g = PlantGrid::new(21).unwrap();
        let m = PlantModel::new(&p, g);
        let mut s = PlantState::from_fn(&g, |w| w, |w| 1.0 - w);
        step_plant(
            &m,
            &mut s,
            &PrescribedInputs(|_| (0.25, -0.5)),
            0.5 * m.dt_limit(),
        )
        .unwrap();
        assert_eq!(s.u[0], 0.25);
        assert_eq!(s.v[20], -0.5);
    }

    #[test]
    fn time_steps_land_on_final_time() {
        let steps = time_steps(0.01, 0.8, 0.1);
        assert!((steps.iter().sum::<f64>() - 0.1).abs() < 1e-15);
        assert!(steps.iter().all(|&h| h <= 0.008 + 1e-18));
    }

    #[test]
    fn explicit_solution_arithmetic() {
        let p = CoefficientProfile::constant(2.0, 2.0, 0.0, 0.0, 64).unwrap();
        let phi = build_phi_maps(&p, 257).unwrap();
        let (a, b) = explicit_target_case1(|w| w * w, |w| w, &phi, 0.5, 0.1);
        assert!((a - 0.09).abs() < 1e-12);
        assert!((b - 0.7).abs() < 1e-12);
        let (a0, b0) = explicit_target_case1(|w| w * w, |w| w, &phi, 0.5, 0.0);
        assert!((a0 - 0.25).abs() < 1e-12 && (b0 - 0.5).abs() < 1e-12);
        let (a1, b1) = explicit_target_case1(|_| 1.0, |_| 1.0, &phi, 0.3, 1.0);
        assert_eq!((a1, b1), (0.0, 0.0));
    }

    #[test]
    fn non_equal_target_requires_feedforward() {
        let p = CoefficientProfile::example(64).unwrap();
        let cfg = SimConfig::new(21, 0.8, 0.1).unwrap();
        let err = simulate_target(
            &p,
            SpeedCase::LambdaFaster,
            None,
            &cfg,
            vec![0.0; 21],
            vec![0.0; 21],
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::MissingFeedforward(SpeedCase::LambdaFaster)
        ));
    }
}
