//! Goursat kernel equations on the triangle `E = E1 ∪ E2`, solved by
//! successive approximations along characteristics.
//!
//! Each half of `E` is sampled on an `(r, s)` grid with `r = |w|` and
//! `z = r (2s - 1)`, so every row spans the full width of the triangle at
//! that height and the apex is a (degenerate) row of its own.
//!
//! The `(L22, L21)` pair satisfies the `(L11, L12)` equations of the
//! swapped profile (see [`CoefficientProfile::swapped`]), so both pairs go
//! through the same [`PairPlan`].

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{
    classify_speed_case, CoefficientProfile, Family, PhiMaps, Region, SpeedCase, Trace,
    DEFAULT_CLASSIFICATION_TOL, REGION_TIE_TOL,
};
use crate::grid::PlantGrid;

pub const DEFAULT_KERNEL_NODES: usize = 129;
pub const MIN_KERNEL_NODES: usize = 33;
pub const DEFAULT_PICARD_TOL: f64 = 1e-12;
pub const MAX_PICARD_ITERATIONS: usize = 200;

/// Minimum trapezoid panels for a path that starts inside the current row.
const MIN_DIRECT_PANELS: usize = 8;
const MIN_SEGMENT_PANELS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum KernelName {
    L11,
    L12,
    L21,
    L22,
}

impl KernelName {
    pub const ALL: [KernelName; 4] = [
        KernelName::L11,
        KernelName::L12,
        KernelName::L21,
        KernelName::L22,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            KernelName::L11 => "L11",
            KernelName::L12 => "L12",
            KernelName::L21 => "L21",
            KernelName::L22 => "L22",
        }
    }
}

/// Node layout of both triangles. Triangle 0 is `E1` (`w >= 0`), triangle 1
/// is `E2` (`w <= 0`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriangleGrid {
    pub n_w: usize,
    pub n_s: usize,
    hr: f64,
    hs: f64,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Cell {
    pub base: u32,
    pub fr: f64,
    pub fs: f64,
}

impl TriangleGrid {
    pub fn new(n_w: usize, n_s: usize) -> Result<Self> {
        if n_w < MIN_KERNEL_NODES || n_s < MIN_KERNEL_NODES {
            return Err(Error::InvalidResolution(format!(
                "kernel grid needs at least {MIN_KERNEL_NODES}x{MIN_KERNEL_NODES} nodes per triangle, got {n_w}x{n_s}"
            )));
        }
        Ok(Self {
            n_w,
            n_s,
            hr: 1.0 / (n_w - 1) as f64,
            hs: 1.0 / (n_s - 1) as f64,
        })
    }

    pub fn len(&self) -> usize {
        2 * self.n_w * self.n_s
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, tri: usize, i: usize, j: usize) -> usize {
        (tri * self.n_w + i) * self.n_s + j
    }

    #[inline]
    pub fn split(&self, idx: usize) -> (usize, usize, usize) {
        let j = idx % self.n_s;
        let row = idx / self.n_s;
        (row / self.n_w, row % self.n_w, j)
    }

    pub fn r(&self, i: usize) -> f64 {
        i as f64 * self.hr
    }

    pub fn s(&self, j: usize) -> f64 {
        j as f64 * self.hs
    }

    /// `(z, w)` of a node.
    pub fn coords(&self, tri: usize, i: usize, j: usize) -> (f64, f64) {
        let r = self.r(i);
        let z = r * (2.0 * self.s(j) - 1.0);
        let w = if tri == 0 { r } else { -r };
        (z, w)
    }

    pub(crate) fn locate(&self, z: f64, w: f64) -> Cell {
        let tri = usize::from(w < 0.0);
        let r = w.abs().min(1.0);
        let s = if r > 0.0 {
            (0.5 * (z / r + 1.0)).clamp(0.0, 1.0)
        } else {
            0.5
        };
        let pr = r / self.hr;
        let i = (pr.floor() as usize).min(self.n_w - 2);
        let ps = s / self.hs;
        let j = (ps.floor() as usize).min(self.n_s - 2);
        Cell {
            base: self.index(tri, i, j) as u32,
            fr: (pr - i as f64).clamp(0.0, 1.0),
            fs: (ps - j as f64).clamp(0.0, 1.0),
        }
    }

    #[inline]
    fn bilinear(&self, field: &[f64], c: Cell) -> f64 {
        let b = c.base as usize;
        let n = self.n_s;
        let (fr, fs) = (c.fr, c.fs);
        (1.0 - fr) * ((1.0 - fs) * field[b] + fs * field[b + 1])
            + fr * ((1.0 - fs) * field[b + n] + fs * field[b + n + 1])
    }

    /// Bilinear interpolation restricted to nodes carrying `tag`; falls back
    /// to the nearest same-tag node of the two bracketing rows.
    fn bilinear_tagged(&self, field: &[f64], tags: &[bool], c: Cell, tag: bool) -> f64 {
        let b = c.base as usize;
        let n = self.n_s;
        let (fr, fs) = (c.fr, c.fs);
        let corners = [
            (b, (1.0 - fr) * (1.0 - fs)),
            (b + 1, (1.0 - fr) * fs),
            (b + n, fr * (1.0 - fs)),
            (b + n + 1, fr * fs),
        ];
        if corners.iter().all(|&(k, _)| tags[k] == tag) {
            return corners.iter().map(|&(k, wt)| wt * field[k]).sum();
        }
        let (mut acc, mut wsum) = (0.0, 0.0);
        for &(k, wt) in &corners {
            if tags[k] == tag {
                acc += wt * field[k];
                wsum += wt;
            }
        }
        if wsum > 0.0 {
            return acc / wsum;
        }
        let j0 = b % n;
        let row_lo = b - j0;
        let row = if fr < 0.5 {
            [row_lo, row_lo + n]
        } else {
            [row_lo + n, row_lo]
        };
        let j_target = if fs < 0.5 { j0 } else { j0 + 1 };
        for start in row {
            for off in 0..n {
                for j in [j_target.checked_sub(off), Some(j_target + off)]
                    .into_iter()
                    .flatten()
                {
                    if j < n && tags[start + j] == tag {
                        return field[start + j];
                    }
                }
            }
        }
        field[b]
    }
}

/// How a node's value is produced in each Picard sweep.
#[derive(Debug, Clone, Copy)]
enum NodePlan {
    /// Boundary value imposed directly.
    Fixed(f64),
    Path {
        /// Boundary data carried from the start of the characteristic.
        forcing: f64,
        carry: Option<Carry>,
        first_sample: u32,
        n_samples: u32,
    },
}

/// Interpolation weights of the path integral on the previous row.
#[derive(Debug, Clone, Copy)]
struct Carry {
    idx: [u32; 2],
    wt: [f64; 2],
}

#[derive(Debug, Clone, Copy)]
struct Sample {
    cell: Cell,
    t2: bool,
    k_first: f64,
    k_second: f64,
}

/// Precomputed characteristics for one kernel pair.
struct PairPlan {
    grid: TriangleGrid,
    discontinuous: bool,
    tags: Vec<bool>,
    first: Vec<NodePlan>,
    second: Vec<NodePlan>,
    samples: Vec<Sample>,
}

struct NodeBuild {
    first: NodePlan,
    second: NodePlan,
    samples: Vec<Sample>,
}

impl PairPlan {
    fn build(
        profile: &CoefficientProfile,
        phi: &PhiMaps,
        grid: TriangleGrid,
        discontinuous: bool,
    ) -> Self {
        let tags: Vec<bool> = (0..grid.len())
            .map(|idx| {
                let (tri, i, j) = grid.split(idx);
                let (z, w) = grid.coords(tri, i, j);
                discontinuous && i > 0 && is_t2(phi, z, w)
            })
            .collect();
        let dt = grid.hr / profile.max_speed();
        let ctx = BuildCtx {
            profile,
            phi,
            grid,
            discontinuous,
            tags: &tags,
            dt,
        };
        let built: Vec<NodeBuild> = (0..grid.len())
            .into_par_iter()
            .map(|idx| ctx.node(idx))
            .collect();
        let mut samples = Vec::new();
        let mut first = Vec::with_capacity(built.len());
        let mut second = Vec::with_capacity(built.len());
        for nb in built {
            let offset = samples.len() as u32;
            let shift = |p: NodePlan| match p {
                NodePlan::Path {
                    forcing,
                    carry,
                    first_sample,
                    n_samples,
                } => NodePlan::Path {
                    forcing,
                    carry,
                    first_sample: first_sample + offset,
                    n_samples,
                },
                fixed => fixed,
            };
            first.push(shift(nb.first));
            second.push(shift(nb.second));
            samples.extend(nb.samples);
        }
        Self {
            grid,
            discontinuous,
            tags,
            first,
            second,
            samples,
        }
    }

    fn forcing(&self) -> (Vec<f64>, Vec<f64>) {
        let f = |p: &NodePlan| match *p {
            NodePlan::Fixed(v) => v,
            NodePlan::Path { forcing, .. } => forcing,
        };
        (
            self.first.iter().map(f).collect(),
            self.second.iter().map(f).collect(),
        )
    }

    /// One application `M -> forcing + T[M]`.
    fn sweep(&self, first: &[f64], second: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let g = &self.grid;
        let mut t_first = vec![0.0; g.len()];
        let mut t_second = vec![0.0; g.len()];
        let mut out_first = vec![0.0; g.len()];
        let mut out_second = vec![0.0; g.len()];
        for i in 0..g.n_w {
            for tri in 0..2 {
                for j in 0..g.n_s {
                    let idx = g.index(tri, i, j);
                    let (v, t) = self.apply(&self.first[idx], first, second, &t_first);
                    out_first[idx] = v;
                    t_first[idx] = t;
                    let (v, t) = self.apply(&self.second[idx], first, second, &t_second);
                    out_second[idx] = v;
                    t_second[idx] = t;
                }
            }
        }
        (out_first, out_second)
    }

    /// Returns `(new node value, path integral)`; the path integral is kept
    /// for carrying into the next row.
    #[inline]
    fn apply(&self, plan: &NodePlan, first: &[f64], second: &[f64], t_prev: &[f64]) -> (f64, f64) {
        match *plan {
            NodePlan::Fixed(v) => (v, 0.0),
            NodePlan::Path {
                forcing,
                carry,
                first_sample,
                n_samples,
            } => {
                let mut t = match carry {
                    Some(c) => {
                        c.wt[0] * t_prev[c.idx[0] as usize] + c.wt[1] * t_prev[c.idx[1] as usize]
                    }
                    None => 0.0,
                };
                let start = first_sample as usize;
                for s in &self.samples[start..start + n_samples as usize] {
                    let a = self.grid.bilinear(first, s.cell);
                    let b = if self.discontinuous {
                        self.grid.bilinear_tagged(second, &self.tags, s.cell, s.t2)
                    } else {
                        self.grid.bilinear(second, s.cell)
                    };
                    t += s.k_first * a + s.k_second * b;
                }
                (forcing + t, t)
            }
        }
    }
}

fn is_t2(phi: &PhiMaps, z: f64, w: f64) -> bool {
    (phi.phi1(w) + phi.phi2(z)) * w.signum() < -REGION_TIE_TOL
}

struct BuildCtx<'a> {
    profile: &'a CoefficientProfile,
    phi: &'a PhiMaps,
    grid: TriangleGrid,
    discontinuous: bool,
    tags: &'a [bool],
    dt: f64,
}

impl BuildCtx<'_> {
    fn node(&self, idx: usize) -> NodeBuild {
        let g = self.grid;
        let (tri, i, j) = g.split(idx);
        let (z, w) = g.coords(tri, i, j);
        let h1 = self.profile.h1(w);
        let mut samples = Vec::new();

        // z = -w is s = 0 on E1 and s = 1 on E2; z = w is the other end.
        let anti = i == 0 || (tri == 0 && j == 0) || (tri == 1 && j == g.n_s - 1);
        let diag = i == 0 || (tri == 0 && j == g.n_s - 1) || (tri == 1 && j == 0);

        let first = if anti {
            NodePlan::Fixed(0.0)
        } else {
            self.path(Family::Same, z, w, i, idx, &mut samples)
        };
        let second = if diag {
            NodePlan::Fixed(h1)
        } else if anti && self.discontinuous {
            NodePlan::Fixed(0.0)
        } else {
            self.path(Family::Cross, z, w, i, idx, &mut samples)
        };
        NodeBuild {
            first,
            second,
            samples,
        }
    }

    fn path(
        &self,
        family: Family,
        z: f64,
        w: f64,
        i: usize,
        idx: usize,
        samples: &mut Vec<Sample>,
    ) -> NodePlan {
        let g = self.grid;
        let phi = self.phi;
        let trace = Trace::new(family, phi, z, w, self.discontinuous);
        let forcing = match family {
            Family::Same => 0.0,
            Family::Cross if trace.anti_start => 0.0,
            Family::Cross => self.profile.h1(trace.w0),
        };
        let own_tag = self.tags[idx];
        let psi_p = trace.psi0 + trace.tau;
        let r_prev = g.r(i - 1);
        let first_sample = samples.len() as u32;

        let (carry, psi_from, n_panels) = if trace.w0.abs() < r_prev && i > 1 {
            let w_q = if w >= 0.0 { r_prev } else { -r_prev };
            let psi_q = phi.phi1(w_q);
            let (z_q, _) = trace.point_at_psi(phi, psi_q);
            let s_q = (0.5 * (z_q / r_prev + 1.0)).clamp(0.0, 1.0);
            let row_start = g.index(usize::from(w < 0.0), i - 1, 0);
            let tagged = family == Family::Cross && self.discontinuous;
            let carry = self.row_carry(row_start, s_q, tagged.then_some(own_tag));
            let n = panels(psi_p - psi_q, self.dt, MIN_SEGMENT_PANELS);
            (Some(carry), psi_q, n)
        } else {
            let n = panels(trace.tau, self.dt, MIN_DIRECT_PANELS);
            (None, trace.psi0, n)
        };

        if psi_p != psi_from {
            let cross_at = match family {
                Family::Same if self.discontinuous => self.crossing(&trace, psi_from, psi_p),
                _ => None,
            };
            let emit = |a: f64, b: f64, n: usize, t2: Option<bool>, samples: &mut Vec<Sample>| {
                let at_p = b == psi_p;
                let h = (b - a) / n as f64;
                for k in 0..=n {
                    let (zx, wx) = if at_p && k == n {
                        (z, w)
                    } else {
                        trace.point_at_psi(phi, a + k as f64 * h)
                    };
                    let weight = if k == 0 || k == n { 0.5 * h } else { h };
                    samples.push(self.sample(family, zx, wx, weight, t2.unwrap_or(own_tag)));
                }
            };
            match cross_at {
                Some((psi_x, t2_before)) => {
                    let n1 = panels(psi_x - psi_from, self.dt, 1);
                    let n2 = panels(psi_p - psi_x, self.dt, 1);
                    emit(psi_from, psi_x, n1, Some(t2_before), samples);
                    emit(psi_x, psi_p, n2, Some(!t2_before), samples);
                }
                None => {
                    let t2 = match family {
                        Family::Same if self.discontinuous => {
                            let psi_mid = 0.5 * (psi_from + psi_p);
                            let (zm, wm) = trace.point_at_psi(phi, psi_mid);
                            Some(is_t2(phi, zm, wm))
                        }
                        _ => None,
                    };
                    emit(psi_from, psi_p, n_panels, t2, samples);
                }
            }
        }
        NodePlan::Path {
            forcing,
            carry,
            first_sample,
            n_samples: samples.len() as u32 - first_sample,
        }
    }

    fn sample(&self, family: Family, z: f64, w: f64, weight: f64, t2: bool) -> Sample {
        let (k_first, k_second) = match family {
            Family::Same => (
                -weight * self.profile.lambda_prime(z),
                -weight * self.profile.c(z),
            ),
            Family::Cross => (
                -weight * self.profile.b(z),
                weight * self.profile.mu_prime(z),
            ),
        };
        Sample {
            cell: self.grid.locate(z, w),
            t2,
            k_first,
            k_second,
        }
    }

    /// Where a same-family path crosses the discontinuity line of the cross
    /// kernel. The cross invariant is monotone along the path, so there is
    /// at most one crossing. Returns `(psi, region flag before the crossing)`.
    fn crossing(&self, trace: &Trace, psi_a: f64, psi_b: f64) -> Option<(f64, bool)> {
        let phi = self.phi;
        let tag = |psi: f64| {
            let (z, w) = trace.point_at_psi(phi, psi);
            is_t2(phi, z, w)
        };
        let (ta, tb) = (tag(psi_a), tag(psi_b));
        if ta == tb {
            return None;
        }
        let (mut lo, mut hi) = (psi_a, psi_b);
        for _ in 0..64 {
            let mid = 0.5 * (lo + hi);
            if tag(mid) == ta {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let x = 0.5 * (lo + hi);
        if x == psi_a || x == psi_b {
            return None;
        }
        Some((x, ta))
    }

    /// Linear interpolation along a row; with a tag, only same-tag nodes are
    /// used (linear extrapolation from the nearest pair on the same side).
    fn row_carry(&self, row_start: usize, s: f64, tag: Option<bool>) -> Carry {
        let g = self.grid;
        let n = g.n_s;
        let pos = s / g.hs;
        let a = (pos.floor() as usize).min(n - 2);
        let f = pos - a as f64;
        let plain = Carry {
            idx: [(row_start + a) as u32, (row_start + a + 1) as u32],
            wt: [1.0 - f, f],
        };
        let Some(tag) = tag else { return plain };
        let same = |j: usize| self.tags[row_start + j] == tag;
        if same(a) && same(a + 1) {
            return plain;
        }
        let pick_left = if same(a) && same(a + 1) {
            f < 0.5
        } else {
            same(a)
        };
        if pick_left && a >= 1 && same(a - 1) {
            let d = pos - a as f64;
            return Carry {
                idx: [(row_start + a) as u32, (row_start + a - 1) as u32],
                wt: [1.0 + d, -d],
            };
        }
        if !pick_left && same(a + 1) && a + 2 < n && same(a + 2) {
            let d = (a + 1) as f64 - pos;
            return Carry {
                idx: [(row_start + a + 1) as u32, (row_start + a + 2) as u32],
                wt: [1.0 + d, -d],
            };
        }
        // nearest same-tag node
        let mut best = None;
        for j in 0..n {
            if same(j) {
                let d = (j as f64 - pos).abs();
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
        }
        let j = best.map_or(a, |(j, _)| j);
        Carry {
            idx: [(row_start + j) as u32, (row_start + j) as u32],
            wt: [1.0, 0.0],
        }
    }
}

fn panels(span: f64, dt: f64, min: usize) -> usize {
    ((span.abs() / dt).ceil() as usize).max(min)
}

/// Quantities entering the well-posedness bound of the successive
/// approximations, plus the observed increments.
#[derive(Debug, Clone, Serialize)]
pub struct SolverDiagnostics {
    /// `max(1/lambda, 1/mu)`
    pub a_const: f64,
    /// `max(|lambda'|, |b|)`
    pub b1: f64,
    /// `max(|mu'|, |c|)`
    pub b2: f64,
    /// `b1 + b2`
    pub b_const: f64,
    /// `max(|h1|, |h2|)`
    pub h_bar: f64,
    /// Sup-norms of the Picard increments, starting with the forcing term.
    pub increment_norms: Vec<f64>,
    pub iterations: usize,
    pub final_residual: f64,
    pub warnings: Vec<String>,
}

impl SolverDiagnostics {
    pub fn from_profile(profile: &CoefficientProfile) -> Self {
        let max_abs = |v: &[f64]| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        let a_const = profile
            .lambda_samples()
            .iter()
            .chain(profile.mu_samples())
            .fold(0.0_f64, |m, x| m.max(1.0 / x));
        let b1 = max_abs(profile.lambda_prime_samples()).max(max_abs(profile.b_samples()));
        let b2 = max_abs(profile.mu_prime_samples()).max(max_abs(profile.c_samples()));
        let h_bar = profile.nodes().iter().fold(0.0_f64, |m, &w| {
            m.max(profile.h1(w).abs()).max(profile.h2(w).abs())
        });
        Self {
            a_const,
            b1,
            b2,
            b_const: b1 + b2,
            h_bar,
            increment_norms: Vec::new(),
            iterations: 0,
            final_residual: 0.0,
            warnings: Vec::new(),
        }
    }

    /// `h_bar (a b)^d / d!` at `|w| = 1`.
    pub fn envelope(&self, d: usize) -> f64 {
        let ab = self.a_const * self.b_const;
        if d == 0 || self.h_bar == 0.0 {
            return self.h_bar;
        }
        if ab == 0.0 {
            return 0.0;
        }
        (self.h_bar.ln() + d as f64 * ab.ln() - ln_factorial(d)).exp()
    }

    /// Whether every recorded increment lies under `slack` times the envelope.
    pub fn within_envelope(&self, slack: f64) -> bool {
        self.increment_norms
            .iter()
            .enumerate()
            .all(|(d, &x)| x <= slack * self.envelope(d))
    }
}

fn ln_factorial(d: usize) -> f64 {
    (1..=d).map(|k| (k as f64).ln()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialIterate {
    /// Start from the boundary forcing term.
    Forcing,
    /// Start from zero; reaches the same sequence one sweep later.
    Zero,
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub n_w: usize,
    pub n_s: usize,
    pub tol: f64,
    pub max_iterations: usize,
    pub initial: InitialIterate,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            n_w: DEFAULT_KERNEL_NODES,
            n_s: DEFAULT_KERNEL_NODES,
            tol: DEFAULT_PICARD_TOL,
            max_iterations: MAX_PICARD_ITERATIONS,
            initial: InitialIterate::Forcing,
        }
    }
}

impl SolveOptions {
    pub fn with_nodes(n: usize) -> Self {
        Self {
            n_w: n,
            n_s: n,
            ..Self::default()
        }
    }
}

/// The four backstepping kernels sampled on both halves of `E`.
#[derive(Debug, Clone)]
pub struct KernelGrid {
    grid: TriangleGrid,
    case: SpeedCase,
    phi: PhiMaps,
    l11: Vec<f64>,
    l12: Vec<f64>,
    l21: Vec<f64>,
    l22: Vec<f64>,
    /// Per-node T2 flags of the discontinuous kernel (`L12` for
    /// `LambdaFaster`, `L21` for `MuFaster`).
    tags: Option<Vec<bool>>,
    h1: Vec<f64>,
    h2: Vec<f64>,
}

pub fn solve_kernels(
    profile: &CoefficientProfile,
    phi: &PhiMaps,
    case: SpeedCase,
    nodes: usize,
    tol: f64,
) -> Result<(KernelGrid, SolverDiagnostics)> {
    solve_kernels_with(
        profile,
        phi,
        case,
        &SolveOptions {
            tol,
            ..SolveOptions::with_nodes(nodes)
        },
    )
}

pub fn solve_kernels_with(
    profile: &CoefficientProfile,
    phi: &PhiMaps,
    case: SpeedCase,
    opts: &SolveOptions,
) -> Result<(KernelGrid, SolverDiagnostics)> {
    let classified = classify_speed_case(profile, DEFAULT_CLASSIFICATION_TOL)?.case;
    if classified != case {
        return Err(Error::CaseMismatch {
            requested: case,
            classified,
        });
    }
    let grid = TriangleGrid::new(opts.n_w, opts.n_s)?;
    let swapped_profile = profile.swapped();
    let swapped_phi = phi.swapped();
    let (plan_a, plan_b) = rayon::join(
        || PairPlan::build(profile, phi, grid, case == SpeedCase::LambdaFaster),
        || {
            PairPlan::build(
                &swapped_profile,
                &swapped_phi,
                grid,
                case == SpeedCase::MuFaster,
            )
        },
    );

    let mut diag = SolverDiagnostics::from_profile(profile);
    let (fa, fb) = (plan_a.forcing(), plan_b.forcing());
    let (mut a, mut b) = match opts.initial {
        InitialIterate::Forcing => {
            let norm = sup(&fa.0).max(sup(&fa.1)).max(sup(&fb.0)).max(sup(&fb.1));
            diag.increment_norms.push(norm);
            (fa, fb)
        }
        InitialIterate::Zero => (
            (vec![0.0; grid.len()], vec![0.0; grid.len()]),
            (vec![0.0; grid.len()], vec![0.0; grid.len()]),
        ),
    };

    let mut violations = 0;
    let mut converged = false;
    for d in 1..=opts.max_iterations {
        let (na, nb) = rayon::join(|| plan_a.sweep(&a.0, &a.1), || plan_b.sweep(&b.0, &b.1));
        let inc = sup_diff(&na.0, &a.0)
            .max(sup_diff(&na.1, &a.1))
            .max(sup_diff(&nb.0, &b.0))
            .max(sup_diff(&nb.1, &b.1));
        a = na;
        b = nb;
        diag.increment_norms.push(inc);
        diag.iterations = d;
        if !inc.is_finite() {
            return Err(Error::NoConvergence {
                stage: "kernel successive approximation",
                iterations: d,
                last_increment: inc,
            });
        }
        let k = diag.increment_norms.len() - 1;
        if inc > 10.0 * diag.envelope(k) {
            violations += 1;
            if violations >= 3 {
                return Err(Error::NoConvergence {
                    stage: "kernel successive approximation",
                    iterations: d,
                    last_increment: inc,
                });
            }
        } else {
            violations = 0;
        }
        if inc <= opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            stage: "kernel successive approximation",
            iterations: diag.iterations,
            last_increment: diag.increment_norms.last().copied().unwrap_or(f64::NAN),
        });
    }

    let tags = match case {
        SpeedCase::LambdaFaster => Some(plan_a.tags),
        SpeedCase::MuFaster => Some(plan_b.tags),
        SpeedCase::Equal => None,
    };
    let kernels = KernelGrid::assemble(grid, case, phi.clone(), profile, a.0, a.1, b.1, b.0, tags);
    diag.final_residual = kernel_residual(&kernels, profile).sup;
    let h0 = match case {
        SpeedCase::LambdaFaster => Some(("h1", profile.h1(0.0))),
        SpeedCase::MuFaster => Some(("h2", profile.h2(0.0))),
        SpeedCase::Equal => None,
    };
    if let Some((name, v)) = h0 {
        if v.abs() > 1e-12 {
            diag.warnings.push(format!(
                "C0 compatibility at the apex fails: {name}(0) = {v:.6e}; the discontinuous kernel is only bounded"
            ));
        }
    }
    Ok((kernels, diag))
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

impl KernelGrid {
    #[allow(clippy::too_many_arguments)]
    fn assemble(
        grid: TriangleGrid,
        case: SpeedCase,
        phi: PhiMaps,
        profile: &CoefficientProfile,
        l11: Vec<f64>,
        l12: Vec<f64>,
        l21: Vec<f64>,
        l22: Vec<f64>,
        tags: Option<Vec<bool>>,
    ) -> Self {
        let ws = row_ws(&grid);
        Self {
            grid,
            case,
            phi,
            l11,
            l12,
            l21,
            l22,
            tags,
            h1: ws.iter().map(|&w| profile.h1(w)).collect(),
            h2: ws.iter().map(|&w| profile.h2(w)).collect(),
        }
    }

    /// Kernels given by explicit functions at the nodes (manufactured tests,
    /// synthetic gains).
    pub fn from_fn(
        nodes: usize,
        case: SpeedCase,
        profile: &CoefficientProfile,
        phi: &PhiMaps,
        f: impl Fn(KernelName, f64, f64) -> f64,
    ) -> Result<Self> {
        let grid = TriangleGrid::new(nodes, nodes)?;
        let fill = |name| {
            (0..grid.len())
                .map(|idx| {
                    let (tri, i, j) = grid.split(idx);
                    let (z, w) = grid.coords(tri, i, j);
                    f(name, z, w)
                })
                .collect::<Vec<f64>>()
        };
        let tags = match case {
            SpeedCase::Equal => None,
            SpeedCase::LambdaFaster => Some(node_tags(&grid, phi)),
            SpeedCase::MuFaster => Some(node_tags(&grid, &phi.swapped())),
        };
        Ok(Self::assemble(
            grid,
            case,
            phi.clone(),
            profile,
            fill(KernelName::L11),
            fill(KernelName::L12),
            fill(KernelName::L21),
            fill(KernelName::L22),
            tags,
        ))
    }

    pub fn case(&self) -> SpeedCase {
        self.case
    }

    pub fn grid(&self) -> &TriangleGrid {
        &self.grid
    }

    pub fn phi(&self) -> &PhiMaps {
        &self.phi
    }

    pub fn field(&self, name: KernelName) -> &[f64] {
        match name {
            KernelName::L11 => &self.l11,
            KernelName::L12 => &self.l12,
            KernelName::L21 => &self.l21,
            KernelName::L22 => &self.l22,
        }
    }

    /// The kernel that may jump across the discontinuity line, if any.
    pub fn discontinuous_kernel(&self) -> Option<KernelName> {
        match self.case {
            SpeedCase::Equal => None,
            SpeedCase::LambdaFaster => Some(KernelName::L12),
            SpeedCase::MuFaster => Some(KernelName::L21),
        }
    }

    /// Region of a point with respect to the discontinuity line.
    pub fn region(&self, z: f64, w: f64) -> Region {
        match self.case {
            SpeedCase::Equal => Region::NotApplicable,
            SpeedCase::LambdaFaster => {
                if w != 0.0 && is_t2(&self.phi, z, w) {
                    Region::T2
                } else {
                    Region::T1
                }
            }
            SpeedCase::MuFaster => {
                let inv = self.phi.phi2(w) + self.phi.phi1(z);
                if w != 0.0 && inv * w.signum() < -REGION_TIE_TOL {
                    Region::T2
                } else {
                    Region::T1
                }
            }
        }
    }

    pub fn node_region(&self, idx: usize) -> Region {
        match &self.tags {
            None => Region::NotApplicable,
            Some(t) if t[idx] => Region::T2,
            Some(_) => Region::T1,
        }
    }

    /// Interpolated kernel value at `(z, w)` in `E` (clamped to the triangle).
    pub fn eval(&self, name: KernelName, z: f64, w: f64) -> f64 {
        let cell = self.grid.locate(z, w);
        let field = self.field(name);
        match (&self.tags, Some(name) == self.discontinuous_kernel()) {
            (Some(tags), true) => {
                let t2 = self.region(z, w) == Region::T2;
                self.grid.bilinear_tagged(field, tags, cell, t2)
            }
            _ => self.grid.bilinear(field, cell),
        }
    }

    /// Node values along the row `w = +1` (`top = true`) or `w = -1`, with
    /// the matching `z` coordinates running from -1 to 1.
    pub fn trace_row(&self, name: KernelName, top: bool) -> (Vec<f64>, Vec<f64>) {
        let g = &self.grid;
        let tri = usize::from(!top);
        let i = g.n_w - 1;
        let field = self.field(name);
        (0..g.n_s)
            .map(|j| (g.coords(tri, i, j).0, field[g.index(tri, i, j)]))
            .unzip()
    }

    /// `w` coordinates of the rows, from -1 to 1.
    pub fn row_ws(&self) -> Vec<f64> {
        row_ws(&self.grid)
    }

    /// `h1` sampled at [`row_ws`](Self::row_ws).
    pub fn h1_trace(&self) -> &[f64] {
        &self.h1
    }

    pub fn h2_trace(&self) -> &[f64] {
        &self.h2
    }

    /// CSV dump: `case,kernel,w,z,value,region`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "case,kernel,w,z,value,region")?;
        let g = &self.grid;
        for name in KernelName::ALL {
            let field = self.field(name);
            for tri in 0..2 {
                for i in 0..g.n_w {
                    for j in 0..g.n_s {
                        let idx = g.index(tri, i, j);
                        let (z, w) = g.coords(tri, i, j);
                        let region = if Some(name) == self.discontinuous_kernel() {
                            self.node_region(idx)
                        } else {
                            Region::NotApplicable
                        };
                        writeln!(
                            out,
                            "{},{},{:.16e},{:.16e},{:.16e},{}",
                            self.case.number(),
                            name.as_str(),
                            w,
                            z,
                            field[idx],
                            region_label(region)
                        )?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Kernels resampled at pairs of plant-grid nodes `(z_j, w_k)` with
/// `|z_j| <= |w_k|`. Gains, the backstepping transform and the feedforward
/// solver all read this table, so their boundary identities hold to rounding.
#[derive(Debug, Clone)]
pub struct KernelTable {
    grid: PlantGrid,
    case: SpeedCase,
    values: [Vec<f64>; 4],
}

impl KernelTable {
    pub fn new(kernels: &KernelGrid, grid: PlantGrid) -> Self {
        let n = grid.len();
        let values = KernelName::ALL.map(|name| {
            let mut out = vec![0.0; n * n];
            for k in 0..n {
                let (lo, hi) = grid.span(k);
                for j in lo..=hi {
                    out[k * n + j] = kernels.eval(name, grid.w(j), grid.w(k));
                }
            }
            out
        });
        Self {
            grid,
            case: kernels.case,
            values,
        }
    }

    /// Table from explicit kernel functions.
    pub fn from_fn(
        grid: PlantGrid,
        case: SpeedCase,
        f: impl Fn(KernelName, f64, f64) -> f64,
    ) -> Self {
        let n = grid.len();
        let values = KernelName::ALL.map(|name| {
            let mut out = vec![0.0; n * n];
            for k in 0..n {
                let (lo, hi) = grid.span(k);
                for j in lo..=hi {
                    out[k * n + j] = f(name, grid.w(j), grid.w(k));
                }
            }
            out
        });
        Self { grid, case, values }
    }

    pub fn grid(&self) -> &PlantGrid {
        &self.grid
    }

    pub fn case(&self) -> SpeedCase {
        self.case
    }

    /// `L(z_j, w_k)`; zero outside the triangle.
    #[inline]
    pub fn get(&self, name: KernelName, j: usize, k: usize) -> f64 {
        self.values[name as usize][k * self.grid.len() + j]
    }

    /// Row `w = w_k` over all `z_j` (zero where `|z_j| > |w_k|`).
    pub fn row(&self, name: KernelName, k: usize) -> &[f64] {
        let n = self.grid.len();
        &self.values[name as usize][k * n..(k + 1) * n]
    }
}

pub(crate) fn region_label(r: Region) -> &'static str {
    match r {
        Region::T1 => "T1",
        Region::T2 => "T2",
        Region::NotApplicable => "NA",
    }
}

fn node_tags(grid: &TriangleGrid, phi: &PhiMaps) -> Vec<bool> {
    (0..grid.len())
        .map(|idx| {
            let (tri, i, j) = grid.split(idx);
            let (z, w) = grid.coords(tri, i, j);
            i > 0 && is_t2(phi, z, w)
        })
        .collect()
}

fn row_ws(g: &TriangleGrid) -> Vec<f64> {
    let n = g.n_w - 1;
    (0..=2 * n)
        .map(|k| if k < n { -g.r(n - k) } else { g.r(k - n) })
        .collect()
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct KernelResidualEntry {
    pub kernel: KernelName,
    pub sup: f64,
    pub l2: f64,
    /// `(z, w)` of the node with the largest residual.
    pub worst_at: (f64, f64),
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualReport {
    pub kernels: Vec<KernelResidualEntry>,
    pub sup: f64,
    pub l2: f64,
    pub nodes_used: usize,
}

/// Centered-difference residual of the four kernel equations at interior
/// nodes at least two cells away from the boundaries and the discontinuity
/// line. The `L12` residual with `h1(0) != 0` near the apex is large by
/// construction, hence the physical-distance band.
pub fn kernel_residual(kernels: &KernelGrid, profile: &CoefficientProfile) -> ResidualReport {
    let g = kernels.grid;
    let swapped = profile.swapped();
    let (hr, hs) = (g.hr, g.hs);
    let mut acc = [(0.0_f64, 0.0_f64, (0.0_f64, 0.0_f64)); 4];
    let mut used = 0;
    // Exclusion band of two cells in physical distance; near the apex the
    // (r, s) cells are much narrower than that.
    let band = 2.0 * hr;
    let disc_phi = match kernels.case {
        SpeedCase::Equal => None,
        SpeedCase::LambdaFaster => Some(kernels.phi.clone()),
        SpeedCase::MuFaster => Some(kernels.phi.swapped()),
    };
    let excluded = |z: f64, w: f64| -> bool {
        let r = w.abs();
        if r - z.abs() < band {
            return true;
        }
        let Some(phi) = &disc_phi else {
            return false;
        };
        let (lam, mu) = match kernels.case {
            SpeedCase::MuFaster => (profile.mu(w), profile.lambda(z)),
            _ => (profile.lambda(w), profile.mu(z)),
        };
        let inv = phi.phi1(w) + phi.phi2(z);
        inv.abs() < band * (1.0 / lam + 1.0 / mu)
    };
    for tri in 0..2 {
        for i in 2..g.n_w - 2 {
            for j in 2..g.n_s - 2 {
                let (z, w) = g.coords(tri, i, j);
                if excluded(z, w) {
                    continue;
                }
                used += 1;
                let r = g.r(i);
                let area = hr * 2.0 * r * hs;
                let sign = if tri == 0 { 1.0 } else { -1.0 };
                let deriv = |f: &[f64]| {
                    let fr = (f[g.index(tri, i + 1, j)] - f[g.index(tri, i - 1, j)]) / (2.0 * hr);
                    let fs = (f[g.index(tri, i, j + 1)] - f[g.index(tri, i, j - 1)]) / (2.0 * hs);
                    let dw = sign * (fr - z / (2.0 * r * r) * fs);
                    let dz = fs / (2.0 * r);
                    (f[g.index(tri, i, j)], dz, dw)
                };
                let pairs = [
                    (profile, &kernels.l11, &kernels.l12, 0usize, 1usize),
                    (&swapped, &kernels.l22, &kernels.l21, 3, 2),
                ];
                for (p, first, second, ka, kb) in pairs {
                    let (f, fz, fw) = deriv(first);
                    let (s, sz, sw) = deriv(second);
                    let res_first =
                        p.lambda(w) * fw + p.lambda(z) * fz + p.lambda_prime(z) * f + p.c(z) * s;
                    let res_second =
                        p.lambda(w) * sw - p.mu(z) * sz + p.b(z) * f - p.mu_prime(z) * s;
                    for (k, res) in [(ka, res_first), (kb, res_second)] {
                        if res.abs() > acc[k].0 {
                            acc[k].0 = res.abs();
                            acc[k].2 = (z, w);
                        }
                        acc[k].1 += res * res * area;
                    }
                }
            }
        }
    }
    let kernels_out: Vec<KernelResidualEntry> = KernelName::ALL
        .iter()
        .zip(acc)
        .map(|(&kernel, (s, l2, at))| KernelResidualEntry {
            kernel,
            sup: s,
            l2: l2.sqrt(),
            worst_at: at,
        })
        .collect();
    ResidualReport {
        sup: kernels_out.iter().fold(0.0, |m, e| m.max(e.sup)),
        l2: kernels_out.iter().map(|e| e.l2 * e.l2).sum::<f64>().sqrt(),
        kernels: kernels_out,
        nodes_used: used,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub passed: bool,
    /// `min (bound - |L|)` over all nodes and kernels.
    pub worst_slack: f64,
    /// `min bound / |L|` over nodes with nonzero kernel value.
    pub worst_ratio: f64,
    pub worst_kernel: Option<KernelName>,
}

/// Checks `|L(z, w)| <= h_bar exp(a b |w|)` at every node.
pub fn kernel_bound_check(kernels: &KernelGrid, diag: &SolverDiagnostics) -> BoundReport {
    let g = kernels.grid;
    let ab = diag.a_const * diag.b_const;
    let mut worst_slack = f64::INFINITY;
    let mut worst_ratio = f64::INFINITY;
    let mut worst_kernel = None;
    for name in KernelName::ALL {
        let field = kernels.field(name);
        for (idx, &v) in field.iter().enumerate() {
            let (_, i, _) = g.split(idx);
            let bound = diag.h_bar * (ab * g.r(i)).exp();
            let slack = bound - v.abs();
            if slack < worst_slack {
                worst_slack = slack;
                worst_kernel = Some(name);
            }
            if v != 0.0 {
                worst_ratio = worst_ratio.min(bound / v.abs());
            }
        }
    }
    BoundReport {
        passed: worst_slack >= 0.0,
        worst_slack,
        worst_ratio,
        worst_kernel,
    }
}
