//! Uniform spatial grid on `[-1, 1]` shared by the simulator, the controller
//! and the feedforward solver.

use crate::error::{Error, Result};

/// `n` nodes `w_j = (j - c) dx` with `c = (n - 1) / 2`, so the grid is
/// symmetric and contains `w = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantGrid {
    n: usize,
    dx: f64,
}

impl PlantGrid {
    pub fn new(nodes: usize) -> Result<Self> {
        if nodes < 5 || nodes % 2 == 0 {
            return Err(Error::InvalidResolution(format!(
                "spatial grid needs an odd node count >= 5, got {nodes}"
            )));
        }
        Ok(Self {
            n: nodes,
            dx: 2.0 / (nodes - 1) as f64,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    pub fn center(&self) -> usize {
        (self.n - 1) / 2
    }

    #[inline]
    pub fn w(&self, j: usize) -> f64 {
        (j as f64 - self.center() as f64) * self.dx
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.w(j)).collect()
    }

    /// Index of `-w_j`.
    #[inline]
    pub fn mirror(&self, j: usize) -> usize {
        self.n - 1 - j
    }

    /// Nodes `j` with `|w_j| <= |w_k|`, as an inclusive index range.
    #[inline]
    pub fn span(&self, k: usize) -> (usize, usize) {
        let c = self.center();
        let m = k.abs_diff(c);
        (c - m, c + m)
    }

    pub fn sample(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        (0..self.n).map(|j| f(self.w(j))).collect()
    }

    /// Composite trapezoid over the whole grid.
    pub fn trapezoid(&self, f: &[f64]) -> f64 {
        debug_assert_eq!(f.len(), self.n);
        let inner: f64 = f[1..self.n - 1].iter().sum();
        self.dx * (inner + 0.5 * (f[0] + f[self.n - 1]))
    }

    /// `||(u, v)||_{L2}` by trapezoid.
    pub fn l2_norm(&self, u: &[f64], v: &[f64]) -> f64 {
        let sq: Vec<f64> = u.iter().zip(v).map(|(a, b)| a * a + b * b).collect();
        self.trapezoid(&sq).max(0.0).sqrt()
    }

    pub fn check_len(&self, what: &str, len: usize) -> Result<()> {
        if len != self.n {
            return Err(Error::GridMismatch(format!(
                "{what} has {len} samples, grid has {} nodes",
                self.n
            )));
        }
        Ok(())
    }
}
