//! Plant coefficients, travel-time maps and characteristic curves of the
//! kernel equations.
//!
//! All sampled data lives on a uniform grid over `[-1, 1]` with an even
//! number of intervals, so that `w = 0` and every mirrored node `-w` are
//! grid nodes.

use serde::Serialize;

use crate::error::{Error, Result};

/// Relative tolerance used to decide the `Equal` speed case.
pub const DEFAULT_CLASSIFICATION_TOL: f64 = 1e-10;
/// Default node count of the travel-time tables.
pub const DEFAULT_PHI_NODES: usize = 2049;
/// Points whose region invariant lies within this distance of zero belong to T1.
pub const REGION_TIE_TOL: f64 = 1e-12;

const INVERSION_TOL: f64 = 1e-13;

/// Linear interpolation of samples taken on a uniform grid over `[-1, 1]`.
pub(crate) fn lerp_uniform(values: &[f64], x: f64) -> f64 {
    let n = values.len() - 1;
    let pos = ((x + 1.0) * n as f64 / 2.0).clamp(0.0, n as f64);
    let k = (pos.floor() as usize).min(n - 1);
    let f = pos - k as f64;
    values[k] * (1.0 - f) + values[k + 1] * f
}

pub(crate) fn uniform_nodes(n_intervals: usize) -> Vec<f64> {
    let h = 2.0 / n_intervals as f64;
    (0..=n_intervals).map(|k| -1.0 + k as f64 * h).collect()
}

/// Plant data `lambda, mu, b, c` (with `lambda'`, `mu'`) sampled on `[-1, 1]`.
///
/// Values between nodes are obtained by piecewise-linear interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientProfile {
    lambda: Vec<f64>,
    mu: Vec<f64>,
    lambda_prime: Vec<f64>,
    mu_prime: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
}

impl CoefficientProfile {
    /// Samples analytic coefficients (with exact derivatives) at `n_intervals + 1` nodes.
    pub fn from_functions(
        n_intervals: usize,
        lambda: impl Fn(f64) -> f64,
        lambda_prime: impl Fn(f64) -> f64,
        mu: impl Fn(f64) -> f64,
        mu_prime: impl Fn(f64) -> f64,
        b: impl Fn(f64) -> f64,
        c: impl Fn(f64) -> f64,
    ) -> Result<Self> {
        check_intervals(n_intervals)?;
        let w = uniform_nodes(n_intervals);
        Self::from_parts(
            w.iter().map(|&x| lambda(x)).collect(),
            w.iter().map(|&x| mu(x)).collect(),
            w.iter().map(|&x| lambda_prime(x)).collect(),
            w.iter().map(|&x| mu_prime(x)).collect(),
            w.iter().map(|&x| b(x)).collect(),
            w.iter().map(|&x| c(x)).collect(),
        )
    }

    /// Builds a profile from raw samples; speed derivatives come from
    /// second-order finite differences.
    pub fn from_samples(lambda: Vec<f64>, mu: Vec<f64>, b: Vec<f64>, c: Vec<f64>) -> Result<Self> {
        let n = lambda.len();
        if n < 3 {
            return Err(Error::InvalidResolution(format!(
                "need at least 3 samples, got {n}"
            )));
        }
        check_intervals(n - 1)?;
        for (name, v) in [("mu", &mu), ("b", &b), ("c", &c)] {
            if v.len() != n {
                return Err(Error::LengthMismatch(format!(
                    "{name} has {} samples, lambda has {n}",
                    v.len()
                )));
            }
        }
        let lambda_prime = finite_difference(&lambda);
        let mu_prime = finite_difference(&mu);
        Self::from_parts(lambda, mu, lambda_prime, mu_prime, b, c)
    }

    /// Like [`from_samples`](Self::from_samples) but also takes the diagonal
    /// couplings `a`, `d`, which must vanish identically.
    pub fn from_samples_with_diagonal(
        lambda: Vec<f64>,
        mu: Vec<f64>,
        a: &[f64],
        b: Vec<f64>,
        c: Vec<f64>,
        d: &[f64],
    ) -> Result<Self> {
        for (name, v) in [("a", a), ("d", d)] {
            if let Some((index, &value)) = v.iter().enumerate().find(|(_, x)| **x != 0.0) {
                return Err(Error::NonzeroDiagonalCoupling { name, index, value });
            }
        }
        Self::from_samples(lambda, mu, b, c)
    }

    fn from_parts(
        lambda: Vec<f64>,
        mu: Vec<f64>,
        lambda_prime: Vec<f64>,
        mu_prime: Vec<f64>,
        b: Vec<f64>,
        c: Vec<f64>,
    ) -> Result<Self> {
        for (name, v) in [("lambda", &lambda), ("mu", &mu)] {
            if let Some((index, &value)) = v.iter().enumerate().find(|(_, x)| !(**x > 0.0)) {
                return Err(Error::NonPositiveSpeed { name, index, value });
            }
        }
        for (name, v) in [
            ("lambda'", &lambda_prime),
            ("mu'", &mu_prime),
            ("b", &b),
            ("c", &c),
        ] {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!("{name} contains non-finite samples")));
            }
        }
        Ok(Self {
            lambda,
            mu,
            lambda_prime,
            mu_prime,
            b,
            c,
        })
    }

    /// The plant used in the reproduction example:
    /// `lambda = 3 + w^2`, `mu = 2 + w^4`, `b = 3 e^{3w}`, `c = 1 + w`.
    pub fn example(n_intervals: usize) -> Result<Self> {
        Self::from_functions(
            n_intervals,
            |w| 3.0 + w * w,
            |w| 2.0 * w,
            |w| 2.0 + w.powi(4),
            |w| 4.0 * w.powi(3),
            |w| 3.0 * (3.0 * w).exp(),
            |w| 1.0 + w,
        )
    }

    pub fn constant(lambda: f64, mu: f64, b: f64, c: f64, n_intervals: usize) -> Result<Self> {
        Self::from_functions(
            n_intervals,
            |_| lambda,
            |_| 0.0,
            |_| mu,
            |_| 0.0,
            |_| b,
            |_| c,
        )
    }

    pub fn n_intervals(&self) -> usize {
        self.lambda.len() - 1
    }

    pub fn nodes(&self) -> Vec<f64> {
        uniform_nodes(self.n_intervals())
    }

    pub fn lambda(&self, w: f64) -> f64 {
        lerp_uniform(&self.lambda, w)
    }
    pub fn mu(&self, w: f64) -> f64 {
        lerp_uniform(&self.mu, w)
    }
    pub fn lambda_prime(&self, w: f64) -> f64 {
        lerp_uniform(&self.lambda_prime, w)
    }
    pub fn mu_prime(&self, w: f64) -> f64 {
        lerp_uniform(&self.mu_prime, w)
    }
    pub fn b(&self, w: f64) -> f64 {
        lerp_uniform(&self.b, w)
    }
    pub fn c(&self, w: f64) -> f64 {
        lerp_uniform(&self.c, w)
    }

    /// Diagonal boundary value of `L12`: `b / (lambda + mu)`.
    pub fn h1(&self, w: f64) -> f64 {
        self.b(w) / (self.lambda(w) + self.mu(w))
    }

    /// Diagonal boundary value of `L21`: `-c / (lambda + mu)`.
    pub fn h2(&self, w: f64) -> f64 {
        -self.c(w) / (self.lambda(w) + self.mu(w))
    }

    pub fn lambda_samples(&self) -> &[f64] {
        &self.lambda
    }
    pub fn mu_samples(&self) -> &[f64] {
        &self.mu
    }
    pub fn lambda_prime_samples(&self) -> &[f64] {
        &self.lambda_prime
    }
    pub fn mu_prime_samples(&self) -> &[f64] {
        &self.mu_prime
    }
    pub fn b_samples(&self) -> &[f64] {
        &self.b
    }
    pub fn c_samples(&self) -> &[f64] {
        &self.c
    }

    pub fn max_speed(&self) -> f64 {
        self.lambda
            .iter()
            .chain(&self.mu)
            .fold(0.0_f64, |m, &x| m.max(x))
    }

    pub fn min_speed(&self) -> f64 {
        self.lambda
            .iter()
            .chain(&self.mu)
            .fold(f64::INFINITY, |m, &x| m.min(x))
    }

    /// Same speeds with couplings multiplied by `factor`.
    pub fn scaled_couplings(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.b.iter_mut().for_each(|x| *x *= factor);
        out.c.iter_mut().for_each(|x| *x *= factor);
        out
    }

    /// Exchanges the roles of the two transport equations:
    /// `(lambda, mu, b, c) -> (mu, lambda, -c, -b)`.
    ///
    /// The `(L22, L21)` kernel pair of a profile satisfies the `(L11, L12)`
    /// equations of its swapped profile.
    pub fn swapped(&self) -> Self {
        Self {
            lambda: self.mu.clone(),
            mu: self.lambda.clone(),
            lambda_prime: self.mu_prime.clone(),
            mu_prime: self.lambda_prime.clone(),
            b: self.c.iter().map(|x| -x).collect(),
            c: self.b.iter().map(|x| -x).collect(),
        }
    }
}

fn check_intervals(n: usize) -> Result<()> {
    if n < 2 || n % 2 != 0 {
        return Err(Error::InvalidResolution(format!(
            "coefficient grid needs an even number of intervals (>= 2), got {n}"
        )));
    }
    Ok(())
}

fn finite_difference(v: &[f64]) -> Vec<f64> {
    let n = v.len() - 1;
    let h = 2.0 / n as f64;
    let mut d = vec![0.0; n + 1];
    for k in 1..n {
        d[k] = (v[k + 1] - v[k - 1]) / (2.0 * h);
    }
    d[0] = (-3.0 * v[0] + 4.0 * v[1] - v[2]) / (2.0 * h);
    d[n] = (3.0 * v[n] - 4.0 * v[n - 1] + v[n - 2]) / (2.0 * h);
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SpeedCase {
    /// `lambda(w) = mu(-w)`
    Equal,
    /// `lambda(w) > mu(-w)`
    LambdaFaster,
    /// `lambda(w) < mu(-w)`
    MuFaster,
}

impl SpeedCase {
    /// Case label of the swapped profile (see [`CoefficientProfile::swapped`]).
    pub fn swapped(self) -> Self {
        match self {
            SpeedCase::Equal => SpeedCase::Equal,
            SpeedCase::LambdaFaster => SpeedCase::MuFaster,
            SpeedCase::MuFaster => SpeedCase::LambdaFaster,
        }
    }

    pub fn number(self) -> u8 {
        match self {
            SpeedCase::Equal => 1,
            SpeedCase::LambdaFaster => 2,
            SpeedCase::MuFaster => 3,
        }
    }

    pub fn from_number(n: u8) -> Option<Self> {
        match n {
            1 => Some(SpeedCase::Equal),
            2 => Some(SpeedCase::LambdaFaster),
            3 => Some(SpeedCase::MuFaster),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpeedClassification {
    pub case: SpeedCase,
    /// `min |lambda(w) - mu(-w)|` over the grid.
    pub margin: f64,
}

pub fn classify_speed_case(profile: &CoefficientProfile, tol: f64) -> Result<SpeedClassification> {
    let n = profile.n_intervals();
    let g: Vec<f64> = (0..=n)
        .map(|k| profile.lambda[k] - profile.mu[n - k])
        .collect();
    let min = g.iter().copied().fold(f64::INFINITY, f64::min);
    let max = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let margin = g.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
    let scale = profile.max_speed();
    let case = if min.abs().max(max.abs()) <= tol * scale {
        SpeedCase::Equal
    } else if min > 0.0 {
        SpeedCase::LambdaFaster
    } else if max < 0.0 {
        SpeedCase::MuFaster
    } else {
        return Err(Error::MixedSignSpeeds { min, max });
    };
    Ok(SpeedClassification { case, margin })
}

/// Selects one of the travel-time maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phi {
    /// `int_0^w 1/lambda`
    One,
    /// `int_0^w 1/mu`
    Two,
    /// `phi1 + phi2`
    Three,
    /// `phi1(w) + phi2(-w)`
    Four,
}

impl Phi {
    fn index(self) -> usize {
        match self {
            Phi::One => 0,
            Phi::Two => 1,
            Phi::Three => 2,
            Phi::Four => 3,
        }
    }
}

/// Tabulated travel-time maps with cubic Hermite evaluation between nodes
/// (the node slopes are the exact reciprocal speeds).
#[derive(Debug, Clone)]
pub struct PhiMaps {
    h: f64,
    values: [Vec<f64>; 4],
    slopes: [Vec<f64>; 4],
}

/// Tabulates `phi1..phi4` on `nodes` points (rounded up to an odd count).
///
/// The tables integrate `1/lambda`, `1/mu` from `w = 0` with the
/// end-corrected trapezoid rule (exact for the cubic Hermite interpolant
/// used by `eval`).
pub fn build_phi_maps(profile: &CoefficientProfile, nodes: usize) -> Result<PhiMaps> {
    if nodes < 16 {
        return Err(Error::InvalidResolution(format!(
            "travel-time tables need at least 16 nodes, got {nodes}"
        )));
    }
    let n = if (nodes - 1) % 2 == 0 {
        nodes - 1
    } else {
        nodes
    };
    let w = uniform_nodes(n);
    let mut inv_l = Vec::with_capacity(n + 1);
    let mut inv_m = Vec::with_capacity(n + 1);
    let mut d_inv_l = Vec::with_capacity(n + 1);
    let mut d_inv_m = Vec::with_capacity(n + 1);
    for (k, &x) in w.iter().enumerate() {
        let l = profile.lambda(x);
        let m = profile.mu(x);
        if !(l > 0.0) {
            return Err(Error::NonPositiveSpeed {
                name: "lambda",
                index: k,
                value: l,
            });
        }
        if !(m > 0.0) {
            return Err(Error::NonPositiveSpeed {
                name: "mu",
                index: k,
                value: m,
            });
        }
        inv_l.push(1.0 / l);
        inv_m.push(1.0 / m);
        d_inv_l.push(-profile.lambda_prime(x) / (l * l));
        d_inv_m.push(-profile.mu_prime(x) / (m * m));
    }
    let h = 2.0 / n as f64;
    let phi1 = cumulative_from_center(&inv_l, &d_inv_l, h);
    let phi2 = cumulative_from_center(&inv_m, &d_inv_m, h);
    let phi3: Vec<f64> = phi1.iter().zip(&phi2).map(|(a, b)| a + b).collect();
    let phi4: Vec<f64> = (0..=n).map(|k| phi1[k] + phi2[n - k]).collect();
    let s3: Vec<f64> = inv_l.iter().zip(&inv_m).map(|(a, b)| a + b).collect();
    let s4: Vec<f64> = (0..=n).map(|k| inv_l[k] - inv_m[n - k]).collect();
    Ok(PhiMaps {
        h,
        values: [phi1, phi2, phi3, phi4],
        slopes: [inv_l, inv_m, s3, s4],
    })
}

fn cumulative_from_center(f: &[f64], df: &[f64], h: f64) -> Vec<f64> {
    let n = f.len() - 1;
    let mid = n / 2;
    let panel = |k: usize| 0.5 * h * (f[k] + f[k + 1]) + h * h / 12.0 * (df[k] - df[k + 1]);
    let mut out = vec![0.0; n + 1];
    for k in mid + 1..=n {
        out[k] = out[k - 1] + panel(k - 1);
    }
    for k in (0..mid).rev() {
        out[k] = out[k + 1] - panel(k);
    }
    out
}

impl PhiMaps {
    pub fn n_intervals(&self) -> usize {
        self.values[0].len() - 1
    }

    pub fn table(&self, kind: Phi) -> &[f64] {
        &self.values[kind.index()]
    }

    /// `phi(1) - phi(-1)`.
    pub fn span(&self, kind: Phi) -> f64 {
        let v = self.table(kind);
        v[v.len() - 1] - v[0]
    }

    fn cell(&self, w: f64) -> (usize, f64) {
        let n = self.n_intervals();
        let pos = ((w + 1.0) / self.h).clamp(0.0, n as f64);
        let k = (pos.floor() as usize).min(n - 1);
        (k, pos - k as f64)
    }

    fn hermite(&self, idx: usize, k: usize, t: f64) -> (f64, f64) {
        let y = &self.values[idx];
        let m = &self.slopes[idx];
        let h = self.h;
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        let value = h00 * y[k] + h10 * h * m[k] + h01 * y[k + 1] + h11 * h * m[k + 1];
        let d00 = 6.0 * t2 - 6.0 * t;
        let d10 = 3.0 * t2 - 4.0 * t + 1.0;
        let d01 = -6.0 * t2 + 6.0 * t;
        let d11 = 3.0 * t2 - 2.0 * t;
        let deriv = (d00 * y[k] + d01 * y[k + 1]) / h + d10 * m[k] + d11 * m[k + 1];
        (value, deriv)
    }

    pub fn eval(&self, kind: Phi, w: f64) -> f64 {
        let (k, t) = self.cell(w);
        self.hermite(kind.index(), k, t).0
    }

    pub fn derivative(&self, kind: Phi, w: f64) -> f64 {
        let (k, t) = self.cell(w);
        self.hermite(kind.index(), k, t).1
    }

    pub fn phi1(&self, w: f64) -> f64 {
        self.eval(Phi::One, w)
    }
    pub fn phi2(&self, w: f64) -> f64 {
        self.eval(Phi::Two, w)
    }
    pub fn phi3(&self, w: f64) -> f64 {
        self.eval(Phi::Three, w)
    }
    pub fn phi4(&self, w: f64) -> f64 {
        self.eval(Phi::Four, w)
    }

    /// Inverse of a strictly monotone map; `y` must lie in its range.
    pub fn inverse(&self, kind: Phi, y: f64) -> Result<f64> {
        let v = self.table(kind);
        let (lo, hi) = (v[0].min(v[v.len() - 1]), v[0].max(v[v.len() - 1]));
        let slack = 1e-12 * (1.0 + hi.abs().max(lo.abs()));
        if !(hi - lo > 0.0) || !self.strictly_monotone(kind) {
            return Err(Error::NotInvertible);
        }
        if y < lo - slack || y > hi + slack {
            return Err(Error::OutOfRange(y));
        }
        Ok(self.inverse_clamped(kind, y))
    }

    fn strictly_monotone(&self, kind: Phi) -> bool {
        let v = self.table(kind);
        let inc = v[v.len() - 1] > v[0];
        v.windows(2)
            .all(|p| if inc { p[1] > p[0] } else { p[1] < p[0] })
    }

    /// Inverse with the argument clamped to the range of the map.
    pub(crate) fn inverse_clamped(&self, kind: Phi, y: f64) -> f64 {
        let idx = kind.index();
        let v = &self.values[idx];
        let n = v.len() - 1;
        let increasing = v[n] >= v[0];
        // bracket by binary search on the monotone table
        let before = |x: f64, y: f64| if increasing { x <= y } else { x >= y };
        if !before(v[0], y) {
            return -1.0;
        }
        if before(v[n], y) {
            return 1.0;
        }
        let (mut a, mut b) = (0usize, n);
        while b - a > 1 {
            let mid = (a + b) / 2;
            if before(v[mid], y) {
                a = mid;
            } else {
                b = mid;
            }
        }
        let k = a;
        let sign = if increasing { 1.0 } else { -1.0 };
        let span = v[k + 1] - v[k];
        let mut t = if span != 0.0 {
            ((y - v[k]) / span).clamp(0.0, 1.0)
        } else {
            0.5
        };
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        for _ in 0..64 {
            let (f, df) = self.hermite(idx, k, t);
            let r = (f - y) * sign;
            if r > 0.0 {
                hi = t;
            } else {
                lo = t;
            }
            let dt_dw = df * self.h * sign;
            let mut next = if dt_dw > 0.0 { t - r / dt_dw } else { f64::NAN };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            let step = (next - t).abs();
            t = next;
            if step * self.h <= INVERSION_TOL {
                break;
            }
        }
        -1.0 + (k as f64 + t) * self.h
    }

    /// Solves `phi(x) - phi(-x) = c` for `x` (the map `x -> phi(x) - phi(-x)`
    /// is odd and increasing). Used for characteristics starting on `z = -w`.
    pub(crate) fn symmetric_start(&self, kind: Phi, c: f64) -> f64 {
        let g = |x: f64| {
            let (a, da) = {
                let (k, t) = self.cell(x);
                self.hermite(kind.index(), k, t)
            };
            let (b, db) = {
                let (k, t) = self.cell(-x);
                self.hermite(kind.index(), k, t)
            };
            (a - b, da + db)
        };
        let (mut lo, mut hi) = if c >= 0.0 { (0.0, 1.0) } else { (-1.0, 0.0) };
        if c == 0.0 {
            return 0.0;
        }
        if g(hi).0 <= c {
            return hi;
        }
        if g(lo).0 >= c {
            return lo;
        }
        let mut x = 0.5 * (lo + hi);
        for _ in 0..200 {
            let (f, df) = g(x);
            let r = f - c;
            if r > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let mut next = if df > 0.0 { x - r / df } else { f64::NAN };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            let step = (next - x).abs();
            x = next;
            if step <= INVERSION_TOL || hi - lo <= INVERSION_TOL {
                break;
            }
        }
        x
    }

    /// Maps of the swapped profile: `phi1 <-> phi2`, `phi4(w) -> phi4(-w)`.
    pub fn swapped(&self) -> Self {
        let n = self.n_intervals();
        let [p1, p2, p3, p4] = self.values.clone();
        let [s1, s2, s3, s4] = self.slopes.clone();
        let p5: Vec<f64> = (0..=n).map(|k| p4[n - k]).collect();
        let s5: Vec<f64> = (0..=n).map(|k| -s4[n - k]).collect();
        Self {
            h: self.h,
            values: [p2, p1, p3, p5],
            slopes: [s2, s1, s3, s5],
        }
    }
}

/// Which kernel equation a characteristic belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Family {
    /// `lambda(w) d_w + lambda(z) d_z` (the `L11` operator).
    Same,
    /// `lambda(w) d_w - mu(z) d_z` (the `L12` operator).
    Cross,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Region {
    /// Characteristic starts on the diagonal `z = w`.
    T1,
    /// Characteristic starts on the anti-diagonal `z = -w`.
    T2,
    NotApplicable,
}

/// Characteristic through `(z, w)` traced back to the boundary of its triangle.
///
/// Works on both halves of the kernel domain; on `w < 0` the travel time
/// `tau` is negative.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Trace {
    pub family: Family,
    /// `phi1(w) - phi1(z)` or `phi1(w) + phi2(z)`, constant along the curve.
    pub invariant: f64,
    pub w0: f64,
    pub z0: f64,
    /// `phi1(w0)`.
    pub psi0: f64,
    /// Signed travel time `phi1(w) - phi1(w0)`.
    pub tau: f64,
    pub anti_start: bool,
}

impl Trace {
    /// `discontinuous` enables the anti-diagonal boundary of the cross family.
    pub fn new(family: Family, phi: &PhiMaps, z: f64, w: f64, discontinuous: bool) -> Self {
        let psi = phi.phi1(w);
        match family {
            Family::Same => {
                let invariant = psi - phi.phi1(z);
                let w0 = clamp_toward_zero(phi.symmetric_start(Phi::One, invariant), w);
                let psi0 = phi.phi1(w0);
                Trace {
                    family,
                    invariant,
                    w0,
                    z0: -w0,
                    psi0,
                    tau: psi - psi0,
                    anti_start: true,
                }
            }
            Family::Cross => {
                let mut invariant = psi + phi.phi2(z);
                let anti = invariant * w.signum() < -REGION_TIE_TOL;
                if anti && discontinuous {
                    let w0 = clamp_toward_zero(phi.inverse_clamped(Phi::Four, invariant), w);
                    let psi0 = phi.phi1(w0);
                    return Trace {
                        family,
                        invariant,
                        w0,
                        z0: -w0,
                        psi0,
                        tau: psi - psi0,
                        anti_start: true,
                    };
                }
                if invariant * w.signum() < 0.0 {
                    // rounding on a tangent anti-diagonal: start at the apex
                    invariant = 0.0;
                }
                let w0 = clamp_toward_zero(phi.inverse_clamped(Phi::Three, invariant), w);
                let psi0 = phi.phi1(w0);
                Trace {
                    family,
                    invariant,
                    w0,
                    z0: w0,
                    psi0,
                    tau: psi - psi0,
                    anti_start: false,
                }
            }
        }
    }

    /// Point of the curve where `phi1(w) = psi`.
    pub fn point_at_psi(&self, phi: &PhiMaps, psi: f64) -> (f64, f64) {
        let w = phi.inverse_clamped(Phi::One, psi);
        let z = match self.family {
            Family::Same => phi.inverse_clamped(Phi::One, psi - self.invariant),
            Family::Cross => phi.inverse_clamped(Phi::Two, self.invariant - psi),
        };
        (z, w)
    }
}

fn clamp_toward_zero(w0: f64, w: f64) -> f64 {
    if w >= 0.0 {
        w0.clamp(0.0, w)
    } else {
        w0.clamp(w, 0.0)
    }
}

/// Whether `(z, w)` lies in the upper triangle `{-w <= z <= w, 0 <= w <= 1}`.
pub fn in_upper_triangle(z: f64, w: f64, tol: f64) -> bool {
    w >= -tol && w <= 1.0 + tol && z >= -w - tol && z <= w + tol
}

/// A characteristic curve of the `L11` or `L12` kernel equation ending at a
/// query point of the upper triangle.
#[derive(Debug, Clone)]
pub struct CharacteristicPath<'a> {
    phi: &'a PhiMaps,
    trace: Trace,
    pub t_final: f64,
    pub start: (f64, f64),
    pub end: (f64, f64),
    pub region: Region,
}

impl CharacteristicPath<'_> {
    pub fn w_at(&self, t: f64) -> f64 {
        self.trace.point_at_psi(self.phi, self.trace.psi0 + t).1
    }

    pub fn z_at(&self, t: f64) -> f64 {
        self.trace.point_at_psi(self.phi, self.trace.psi0 + t).0
    }
}

const DOMAIN_TOL: f64 = 1e-12;

/// Characteristic of the `L11` equation: `dw/dt = lambda(w)`,
/// `dz/dt = lambda(z)`, starting on `z = -w`.
pub fn characteristic_l11(z: f64, w: f64, phi: &PhiMaps) -> Result<CharacteristicPath<'_>> {
    if !in_upper_triangle(z, w, DOMAIN_TOL) {
        return Err(Error::OutOfDomain { z, w });
    }
    let trace = Trace::new(Family::Same, phi, z, w, false);
    Ok(CharacteristicPath {
        phi,
        t_final: trace.tau,
        start: (trace.z0, trace.w0),
        end: (z, w),
        region: Region::NotApplicable,
        trace,
    })
}

/// Characteristic of the `L12` equation: `dw/dt = lambda(w)`,
/// `dz/dt = -mu(z)`.
///
/// For `LambdaFaster` the curve starts on the diagonal in T1 and on the
/// anti-diagonal in T2; otherwise it always starts on the diagonal.
pub fn characteristic_l12(
    z: f64,
    w: f64,
    phi: &PhiMaps,
    case: SpeedCase,
) -> Result<CharacteristicPath<'_>> {
    if !in_upper_triangle(z, w, DOMAIN_TOL) {
        return Err(Error::OutOfDomain { z, w });
    }
    let discontinuous = case == SpeedCase::LambdaFaster;
    let trace = Trace::new(Family::Cross, phi, z, w, discontinuous);
    let region = match (discontinuous, trace.anti_start) {
        (false, _) => Region::NotApplicable,
        (true, false) => Region::T1,
        (true, true) => Region::T2,
    };
    Ok(CharacteristicPath {
        phi,
        t_final: trace.tau,
        start: (trace.z0, trace.w0),
        end: (z, w),
        region,
        trace,
    })
}
