use hyperbolic_backstepping::feedforward::{solve_feedforward_with_rhs, DEFAULT_VOLTERRA_TOL};
use hyperbolic_backstepping::geometry::SpeedCase;
use hyperbolic_backstepping::grid::PlantGrid;
use hyperbolic_backstepping::kernel::{KernelName, KernelTable};

// 8-point Gauss-Legendre on [-1, 1]
const GL_X: [f64; 4] = [
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_3,
];
const GL_W: [f64; 4] = [
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_5,
    0.101_228_536_290_376_3,
];

fn gauss(a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
    // composite over 8 panels so the oracle is far below the tolerance
    let panels = 8;
    let h = (b - a) / panels as f64;
    let mut acc = 0.0;
    for p in 0..panels {
        let (lo, hi) = (a + p as f64 * h, a + (p + 1) as f64 * h);
        let (m, r) = (0.5 * (lo + hi), 0.5 * (hi - lo));
        for (x, w) in GL_X.iter().zip(GL_W) {
            acc += w * r * (f(m - r * x) + f(m + r * x));
        }
    }
    acc
}

fn kernel(name: KernelName, z: f64, w: f64) -> f64 {
    match name {
        KernelName::L11 => 0.4 * (z - 0.3 * w).sin(),
        KernelName::L12 => 0.3 * (0.5 * z + w).cos(),
        KernelName::L21 => -0.2 * (1.0 + z * w),
        KernelName::L22 => 0.25 * (0.7 * z).exp() * w,
    }
}

fn x_plus(s: f64, w: f64) -> f64 {
    (s + 0.5 * w).cos() + 0.2 * s * s
}

fn x_minus(s: f64, w: f64) -> f64 {
    0.5 * (0.8 * s - w).sin() + 0.1
}

/// Trapezoid rule on the grid nodes between `|s|` and `W`, the rule the
/// solver uses.
fn trapezoid(grid: &PlantGrid, s: f64, w: f64, f: impl Fn(f64) -> f64) -> f64 {
    let (l, m) = (
        (s.abs() / grid.dx()).round() as usize,
        (w.abs() / grid.dx()).round() as usize,
    );
    if l == m {
        return 0.0;
    }
    let mut acc = 0.5 * (f(l as f64 * grid.dx()) + f(m as f64 * grid.dx()));
    for i in l + 1..m {
        acc += f(i as f64 * grid.dx());
    }
    acc * grid.dx()
}

fn integrand(s: f64, w: f64, a: KernelName, c: KernelName) -> impl Fn(f64) -> f64 {
    move |z| {
        x_plus(z, w) * kernel(a, s, z) + x_minus(z, w) * kernel(c, s, z)
            - x_plus(-z, w) * kernel(a, s, -z)
            - x_minus(-z, w) * kernel(c, s, -z)
    }
}

/// Sup error of the recovered fields with the RHS built by `quad`.
fn recovery_error(
    nodes: usize,
    quad: impl Fn(&PlantGrid, f64, f64, &dyn Fn(f64) -> f64) -> f64,
) -> f64 {
    let grid = PlantGrid::new(nodes).unwrap();
    let table = KernelTable::from_fn(grid, SpeedCase::LambdaFaster, kernel);
    let n = grid.len();
    let mut rhs_plus = vec![0.0; n * n];
    let mut rhs_minus = vec![0.0; n * n];
    for k in 0..n {
        let w = grid.w(k);
        let (lo, hi) = grid.span(k);
        for j in lo..=hi {
            let s = grid.w(j);
            let ip = integrand(s, w, KernelName::L11, KernelName::L21);
            let im = integrand(s, w, KernelName::L12, KernelName::L22);
            rhs_plus[k * n + j] = x_plus(s, w) - quad(&grid, s, w, &ip);
            rhs_minus[k * n + j] = x_minus(s, w) - quad(&grid, s, w, &im);
        }
    }
    let ff =
        solve_feedforward_with_rhs(&table, &rhs_plus, &rhs_minus, DEFAULT_VOLTERRA_TOL).unwrap();
    let mut err = 0.0_f64;
    for k in 0..n {
        let w = grid.w(k);
        let (lo, hi) = grid.span(k);
        for j in lo..=hi {
            let s = grid.w(j);
            err = err
                .max((ff.plus(j, k) - x_plus(s, w)).abs())
                .max((ff.minus(j, k) - x_minus(s, w)).abs());
        }
    }
    err
}

fn exact(_: &PlantGrid, s: f64, w: f64, f: &dyn Fn(f64) -> f64) -> f64 {
    gauss(s.abs(), w.abs(), f)
}

fn discrete(g: &PlantGrid, s: f64, w: f64, f: &dyn Fn(f64) -> f64) -> f64 {
    trapezoid(g, s, w, f)
}

#[test]
fn solver_inverts_its_own_quadrature() {
    let err = recovery_error(401, discrete);
    assert!(err <= 1e-10, "sup error {err:.3e}");
}

#[test]
fn continuous_solution_is_recovered_to_second_order() {
    let coarse = recovery_error(201, exact);
    let fine = recovery_error(401, exact);
    let ratio = coarse / fine;
    assert!(fine < 5e-6, "fine error {fine:.3e}");
    assert!((3.5..=4.5).contains(&ratio), "ratio {ratio:.3}");
}
