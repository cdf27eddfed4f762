//! Experiment configuration and the kernels → gains → simulation pipeline.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::controller::{backstepping_transform, gains_from_table, settling_time, ControlGains};
use crate::error::{Error, Result};
use crate::feedforward::{compute_p, compute_q, solve_feedforward, DEFAULT_VOLTERRA_TOL};
use crate::geometry::{
    build_phi_maps, classify_speed_case, CoefficientProfile, PhiMaps, SpeedCase,
    DEFAULT_CLASSIFICATION_TOL, DEFAULT_PHI_NODES,
};
use crate::grid::PlantGrid;
use crate::kernel::{
    kernel_bound_check, kernel_residual, solve_kernels_with, KernelGrid, KernelTable, SolveOptions,
    SolverDiagnostics, DEFAULT_KERNEL_NODES, DEFAULT_PICARD_TOL,
};
use crate::simulator::{
    explicit_target_case1, simulate, simulate_target, OpenLoop, PlantState, SimConfig, TargetState,
    DEFAULT_CFL, DEFAULT_NODES,
};

/// Sampling used for analytic coefficient profiles.
pub const PROFILE_INTERVALS: usize = 2048;
/// Relative L2 level used to report the achieved settling time.
pub const SETTLING_LEVEL: f64 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    OpenLoop,
    ClosedLoop,
    Both,
    KernelsOnly,
    TargetCheck,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CoefficientSpec {
    /// `lambda = 3 + w^2`, `mu = 2 + w^4`, `b = 3 e^{3w}`, `c = 1 + w`.
    #[serde(rename = "paper-eq60")]
    Example,
    Constant {
        lambda: f64,
        mu: f64,
        #[serde(default)]
        b: f64,
        #[serde(default)]
        c: f64,
    },
    /// CSV with header `w,lambda,mu,b,c` on a uniform grid over `[-1, 1]`.
    CustomSamples { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialData {
    /// `u0 = w^2`, `v0 = e^w`.
    #[serde(rename = "paper-eq60")]
    Example,
    /// `u0 = (1 + w)^2 cos w`, `v0 = (1 - w)^2 e^w / 2`.
    Smooth,
    /// Unit bumps on `|w| < 0.3`.
    Bump,
    Zero,
}

impl InitialData {
    pub fn u0(self, w: f64) -> f64 {
        match self {
            InitialData::Example => w * w,
            InitialData::Smooth => (1.0 + w).powi(2) * w.cos(),
            InitialData::Bump => f64::from(u8::from(w.abs() < 0.3)),
            InitialData::Zero => 0.0,
        }
    }

    pub fn v0(self, w: f64) -> f64 {
        match self {
            InitialData::Example => w.exp(),
            InitialData::Smooth => 0.5 * (1.0 - w).powi(2) * w.exp(),
            InitialData::Bump => f64::from(u8::from(w.abs() < 0.3)),
            InitialData::Zero => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CaseSelection {
    Auto,
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "3")]
    Three,
}

impl CaseSelection {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "1" => Ok(Self::One),
            "2" => Ok(Self::Two),
            "3" => Ok(Self::Three),
            other => Err(Error::Config(format!(
                "case must be auto, 1, 2 or 3, got {other:?}"
            ))),
        }
    }

    fn requested(self) -> Option<SpeedCase> {
        match self {
            Self::Auto => None,
            Self::One => Some(SpeedCase::Equal),
            Self::Two => Some(SpeedCase::LambdaFaster),
            Self::Three => Some(SpeedCase::MuFaster),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub n_w: usize,
    pub n_s: usize,
    pub n_x: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            n_w: DEFAULT_KERNEL_NODES,
            n_s: DEFAULT_KERNEL_NODES,
            n_x: DEFAULT_NODES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationSpec {
    pub cfl: f64,
    pub t_final: f64,
    pub record_every: f64,
    pub initial: InitialData,
}

impl Default for SimulationSpec {
    fn default() -> Self {
        Self {
            cfl: DEFAULT_CFL,
            t_final: 3.0,
            record_every: 0.05,
            initial: InitialData::Example,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub picard: f64,
    pub volterra: f64,
    pub classification: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            picard: DEFAULT_PICARD_TOL,
            volterra: DEFAULT_VOLTERRA_TOL,
            classification: DEFAULT_CLASSIFICATION_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub coefficients: CoefficientSpec,
    #[serde(default = "default_case")]
    pub case: CaseSelection,
    #[serde(default = "default_output")]
    pub output: PathBuf,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub simulation: SimulationSpec,
    #[serde(default)]
    pub tolerances: Tolerances,
}

fn default_case() -> CaseSelection {
    CaseSelection::Auto
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

const REQUIRED_KEYS: [&str; 2] = ["mode", "coefficients"];

impl ExperimentConfig {
    /// Config with defaults for everything but the mode and coefficients.
    pub fn new(mode: Mode, coefficients: CoefficientSpec) -> Self {
        Self {
            mode,
            coefficients,
            case: CaseSelection::Auto,
            output: default_output(),
            grid: GridSpec::default(),
            simulation: SimulationSpec::default(),
            tolerances: Tolerances::default(),
        }
    }

    /// Checks ranges and referenced files.
    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.n_w < crate::kernel::MIN_KERNEL_NODES || g.n_s < crate::kernel::MIN_KERNEL_NODES {
            return Err(Error::Config(format!(
                "grid.n_w and grid.n_s must be at least {}",
                crate::kernel::MIN_KERNEL_NODES
            )));
        }
        if g.n_x < 5 || g.n_x % 2 == 0 {
            return Err(Error::Config("grid.n_x must be odd and at least 5".into()));
        }
        let s = &self.simulation;
        if !(s.cfl > 0.0 && s.cfl <= 1.0) {
            return Err(Error::Config("cfl must lie in (0,1]".into()));
        }
        if !(s.t_final > 0.0 && s.t_final.is_finite()) {
            return Err(Error::Config("simulation.t_final must be positive".into()));
        }
        if !(s.record_every >= 0.0) {
            return Err(Error::Config(
                "simulation.record_every must be nonnegative".into(),
            ));
        }
        let t = &self.tolerances;
        for (name, v) in [
            ("tolerances.picard", t.picard),
            ("tolerances.volterra", t.volterra),
            ("tolerances.classification", t.classification),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if let CoefficientSpec::CustomSamples { path } = &self.coefficients {
            if !path.is_file() {
                return Err(Error::Config(format!(
                    "coefficients.path {} does not exist",
                    path.display()
                )));
            }
        }
        Ok(())
    }

    pub fn sim_config(&self, t_final: f64) -> SimConfig {
        SimConfig {
            nodes: self.grid.n_x,
            cfl: self.simulation.cfl,
            t_final,
            record_every: self.simulation.record_every,
        }
    }
}

/// Parses and validates a TOML experiment description.
pub fn validate_config(raw: &str) -> Result<ExperimentConfig> {
    let table: toml::Table = raw
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let missing: Vec<&str> = REQUIRED_KEYS
        .iter()
        .copied()
        .filter(|k| !table.contains_key(*k))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Config(format!(
            "missing required keys: {}",
            missing.join(", ")
        )));
    }
    let cfg: ExperimentConfig =
        toml::from_str(raw).map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = validate_config(&raw)?;
    // relative sample paths are resolved against the config file
    if let CoefficientSpec::CustomSamples { path: p } = &mut cfg.coefficients {
        if p.is_relative() {
            if let Some(dir) = path.parent() {
                *p = dir.join(&*p);
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Deserialize)]
struct SampleRow {
    w: f64,
    lambda: f64,
    mu: f64,
    b: f64,
    c: f64,
}

/// Reads `w,lambda,mu,b,c` samples; `w` must be uniform over `[-1, 1]`.
pub fn read_samples(path: &Path) -> Result<CoefficientProfile> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let rows: Vec<SampleRow> = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let n = rows.len();
    if n < 3 {
        return Err(Error::Config(format!(
            "{}: need at least 3 sample rows",
            path.display()
        )));
    }
    let h = 2.0 / (n - 1) as f64;
    for (i, r) in rows.iter().enumerate() {
        let expected = -1.0 + i as f64 * h;
        if (r.w - expected).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "{}: row {} has w = {}, expected a uniform grid value {expected}",
                path.display(),
                i + 1,
                r.w
            )));
        }
    }
    CoefficientProfile::from_samples(
        rows.iter().map(|r| r.lambda).collect(),
        rows.iter().map(|r| r.mu).collect(),
        rows.iter().map(|r| r.b).collect(),
        rows.iter().map(|r| r.c).collect(),
    )
}

pub fn build_profile(spec: &CoefficientSpec) -> Result<CoefficientProfile> {
    match spec {
        CoefficientSpec::Example => CoefficientProfile::example(PROFILE_INTERVALS),
        CoefficientSpec::Constant { lambda, mu, b, c } => {
            CoefficientProfile::constant(*lambda, *mu, *b, *c, PROFILE_INTERVALS)
        }
        CoefficientSpec::CustomSamples { path } => read_samples(path),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelSummary {
    pub iterations: usize,
    pub final_residual: f64,
    pub residual_l2: f64,
    pub bound_passed: bool,
    pub bound_margin: f64,
    pub bound_ratio: f64,
    pub envelope_ok: bool,
    pub a_const: f64,
    pub b_const: f64,
    pub h_bar: f64,
    pub increment_norms: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LoopSummary {
    pub initial_l2: f64,
    pub final_l2: f64,
    pub final_relative_l2: f64,
    pub max_relative_l2: f64,
    /// First time after which the relative norm stays at or below 1%.
    pub settling_time: Option<f64>,
    pub relative_l2_at_1p2_tf: Option<f64>,
    /// `max(|alpha(-1)|, |beta(1)|) / ||(u, v)||` over the run.
    pub max_boundary_defect: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TargetCheckSummary {
    pub reference: String,
    pub metric: String,
    pub time: f64,
    pub grids: Vec<usize>,
    pub errors: Vec<f64>,
    pub observed_orders: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub mode: Mode,
    pub case: u8,
    pub case_name: SpeedCase,
    pub classification_margin: f64,
    pub tf: f64,
    pub n_w: usize,
    pub n_s: usize,
    pub n_x: usize,
    pub cfl: f64,
    pub t_final: f64,
    pub kernel: Option<KernelSummary>,
    pub open_loop: Option<LoopSummary>,
    pub closed_loop: Option<LoopSummary>,
    pub target_check: Option<TargetCheckSummary>,
    pub warnings: Vec<String>,
}

/// Everything a run produced, for callers that want more than the files.
pub struct RunOutput {
    pub summary: Summary,
    pub profile: CoefficientProfile,
    pub phi: PhiMaps,
    pub kernels: Option<(KernelGrid, SolverDiagnostics)>,
}

/// Classification honoring an explicit case request.
pub fn resolve_case(
    profile: &CoefficientProfile,
    selection: CaseSelection,
    tol: f64,
) -> Result<(SpeedCase, f64)> {
    let c = classify_speed_case(profile, tol)?;
    if let Some(requested) = selection.requested() {
        if requested != c.case {
            return Err(Error::CaseMismatch {
                requested,
                classified: c.case,
            });
        }
    }
    Ok((c.case, c.margin))
}

pub fn solve_for(
    profile: &CoefficientProfile,
    phi: &PhiMaps,
    case: SpeedCase,
    cfg: &ExperimentConfig,
) -> Result<(KernelGrid, SolverDiagnostics)> {
    solve_kernels_with(
        profile,
        phi,
        case,
        &SolveOptions {
            n_w: cfg.grid.n_w,
            n_s: cfg.grid.n_s,
            tol: cfg.tolerances.picard,
            ..SolveOptions::default()
        },
    )
}

/// Runs the configured pipeline and writes its artifacts into `cfg.output`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let profile = build_profile(&cfg.coefficients)?;
    let (case, margin) = resolve_case(&profile, cfg.case, cfg.tolerances.classification)?;
    let phi = build_phi_maps(&profile, DEFAULT_PHI_NODES)?;
    let tf = settling_time(&phi, case);
    let out = &cfg.output;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut summary = Summary {
        mode: cfg.mode,
        case: case.number(),
        case_name: case,
        classification_margin: margin,
        tf,
        n_w: cfg.grid.n_w,
        n_s: cfg.grid.n_s,
        n_x: cfg.grid.n_x,
        cfl: cfg.simulation.cfl,
        t_final: cfg.simulation.t_final,
        kernel: None,
        open_loop: None,
        closed_loop: None,
        target_check: None,
        warnings: Vec::new(),
    };

    let needs_kernels = cfg.mode != Mode::OpenLoop;
    let kernels = if needs_kernels {
        let (k, d) = solve_for(&profile, &phi, case, cfg)?;
        let res = kernel_residual(&k, &profile);
        let bound = kernel_bound_check(&k, &d);
        summary.warnings.extend(d.warnings.iter().cloned());
        summary.kernel = Some(KernelSummary {
            iterations: d.iterations,
            final_residual: d.final_residual,
            residual_l2: res.l2,
            bound_passed: bound.passed,
            bound_margin: bound.worst_slack,
            bound_ratio: bound.worst_ratio,
            envelope_ok: d.within_envelope(4.0),
            a_const: d.a_const,
            b_const: d.b_const,
            h_bar: d.h_bar,
            increment_norms: d.increment_norms.clone(),
        });
        write_file(&out.join("kernels.csv"), |w| k.write_csv(w))?;
        Some((k, d))
    } else {
        None
    };

    let grid = PlantGrid::new(cfg.grid.n_x)?;
    let table = kernels.as_ref().map(|(k, _)| KernelTable::new(k, grid));
    let gains = table.as_ref().map(|t| gains_from_table(t, &phi));
    if let Some(g) = &gains {
        write_file(&out.join("gains.csv"), |w| write_gains(w, g))?;
    }

    let init = cfg.simulation.initial;
    let initial = PlantState::from_fn(&grid, |w| init.u0(w), |w| init.v0(w));
    let sim_cfg = cfg.sim_config(cfg.simulation.t_final);

    if matches!(cfg.mode, Mode::OpenLoop | Mode::Both) {
        let run = run_loop(&profile, &sim_cfg, &initial, None, table.as_ref(), tf)?;
        write_file(&out.join("norms_open.csv"), |w| write_norms(w, &run.rows))?;
        write_file(&out.join("snapshots_open.csv"), |w| {
            write_snapshots(w, &run.snapshots)
        })?;
        summary.open_loop = Some(run.summary);
    }
    if matches!(cfg.mode, Mode::ClosedLoop | Mode::Both) {
        let run = run_loop(
            &profile,
            &sim_cfg,
            &initial,
            gains.as_ref(),
            table.as_ref(),
            tf,
        )?;
        write_file(&out.join("norms_closed.csv"), |w| write_norms(w, &run.rows))?;
        write_file(&out.join("snapshots_closed.csv"), |w| {
            write_snapshots(w, &run.snapshots)
        })?;
        summary.closed_loop = Some(run.summary);
    }
    if cfg.mode == Mode::TargetCheck {
        let kg = &kernels.as_ref().expect("kernels solved for target-check").0;
        let check = target_check(&profile, &phi, case, kg, cfg)?;
        write_file(&out.join("target_check.csv"), |w| {
            writeln!(w, "n_x,error")?;
            for (n, e) in check.grids.iter().zip(&check.errors) {
                writeln!(w, "{n},{e:.16e}")?;
            }
            Ok(())
        })?;
        summary.target_check = Some(check);
    }

    let json = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Config(format!("summary serialization: {e}")))?;
    write_file(&out.join("summary.json"), |w| writeln!(w, "{json}"))?;
    Ok(RunOutput {
        summary,
        profile,
        phi,
        kernels,
    })
}

struct NormRow {
    t: f64,
    l2_uv: f64,
    l2_ab: Option<f64>,
    u1: f64,
    u2: f64,
}

struct Snapshot {
    plant: PlantState,
    target: Option<TargetState>,
}

struct LoopRun {
    rows: Vec<NormRow>,
    snapshots: Vec<Snapshot>,
    summary: LoopSummary,
}

fn run_loop(
    profile: &CoefficientProfile,
    cfg: &SimConfig,
    initial: &PlantState,
    gains: Option<&ControlGains>,
    table: Option<&KernelTable>,
    tf: f64,
) -> Result<LoopRun> {
    let grid = PlantGrid::new(cfg.nodes)?;
    let n = grid.len();
    let mut rows = Vec::new();
    let mut defect: Option<f64> = None;
    let mut targets: Vec<Option<TargetState>> = Vec::new();
    let mut transform_err = None;
    let feedback: &dyn crate::simulator::BoundaryFeedback = match gains {
        Some(g) => g,
        None => &OpenLoop,
    };
    let rec = simulate(profile, cfg, initial.clone(), feedback, |s| {
        let target = table.map(|t| backstepping_transform(s, t));
        let target = match target {
            Some(Ok(tgt)) => Some(tgt),
            Some(Err(e)) => {
                transform_err.get_or_insert(e);
                None
            }
            None => None,
        };
        if gains.is_some() && s.t > 0.0 {
            if let Some(tgt) = &target {
                let scale = s.l2_norm(&grid);
                let d = tgt.alpha[0].abs().max(tgt.beta[n - 1].abs());
                let rel = if scale > 0.0 { d / scale } else { d };
                defect = Some(defect.map_or(rel, |m: f64| m.max(rel)));
            }
        }
        rows.push(NormRow {
            t: s.t,
            l2_uv: s.l2_norm(&grid),
            l2_ab: target.as_ref().map(|t| t.l2_norm(&grid)),
            u1: s.u1,
            u2: s.u2,
        });
        targets.push(target);
    })?;
    if let Some(e) = transform_err {
        return Err(e);
    }
    // snapshot states are a subset of the step states, matched by time
    let snapshots = rec
        .snapshots
        .into_iter()
        .map(|p| {
            let target = rows
                .iter()
                .position(|r| r.t == p.t)
                .and_then(|i| targets[i].clone());
            Snapshot { plant: p, target }
        })
        .collect();
    let initial_l2 = rows[0].l2_uv;
    let rel = |x: f64| if initial_l2 > 0.0 { x / initial_l2 } else { x };
    let final_l2 = rows.last().map_or(0.0, |r| r.l2_uv);
    let max_relative_l2 = rows.iter().fold(0.0_f64, |m, r| m.max(rel(r.l2_uv)));
    let settling_time = {
        let last_above = rows.iter().rposition(|r| rel(r.l2_uv) > SETTLING_LEVEL);
        match last_above {
            None => Some(0.0),
            Some(i) if i + 1 < rows.len() => Some(rows[i + 1].t),
            Some(_) => None,
        }
    };
    let t_check = 1.2 * tf;
    let relative_l2_at_1p2_tf = rows
        .iter()
        .find(|r| r.t >= t_check - 1e-12)
        .map(|r| rel(r.l2_uv));
    Ok(LoopRun {
        summary: LoopSummary {
            initial_l2,
            final_l2,
            final_relative_l2: rel(final_l2),
            max_relative_l2,
            settling_time,
            relative_l2_at_1p2_tf,
            max_boundary_defect: defect,
        },
        rows,
        snapshots,
    })
}

/// Grids used by the target check: quarter, half and full resolution.
pub fn target_check_grids(n_x: usize) -> Vec<usize> {
    let cells = n_x - 1;
    vec![cells / 4 + 1, cells / 2 + 1, n_x]
}

/// Case 1: simulated target against the explicit solution (L-infinity at
/// half the settling time). Cases 2/3: simulated target against the
/// transformed closed-loop plant (L2 at half the settling time).
pub fn target_check(
    profile: &CoefficientProfile,
    phi: &PhiMaps,
    case: SpeedCase,
    kernels: &KernelGrid,
    cfg: &ExperimentConfig,
) -> Result<TargetCheckSummary> {
    let tf = settling_time(phi, case);
    let time = 0.5 * tf;
    let grids = target_check_grids(cfg.grid.n_x);
    let mut errors = Vec::new();
    for &n in &grids {
        let grid = PlantGrid::new(n)?;
        let sim = SimConfig {
            nodes: n,
            record_every: 0.0,
            ..cfg.sim_config(time)
        };
        let err = if case == SpeedCase::Equal {
            let init = InitialData::Smooth;
            let states = simulate_target(
                profile,
                case,
                None,
                &sim,
                grid.sample(|w| init.u0(w)),
                grid.sample(|w| init.v0(w)),
            )?;
            let last = states.last().expect("initial state is always recorded");
            (0..n).fold(0.0_f64, |m, j| {
                let (a, b) =
                    explicit_target_case1(|w| init.u0(w), |w| init.v0(w), phi, grid.w(j), last.t);
                m.max((last.alpha[j] - a).abs())
                    .max((last.beta[j] - b).abs())
            })
        } else {
            closed_loop_target_error(profile, phi, case, kernels, &sim, cfg)?
        };
        errors.push(err);
    }
    let observed_orders = errors.windows(2).map(|e| (e[0] / e[1]).log2()).collect();
    Ok(TargetCheckSummary {
        reference: if case == SpeedCase::Equal {
            "explicit".into()
        } else {
            "transformed-closed-loop".into()
        },
        metric: if case == SpeedCase::Equal {
            "linf".into()
        } else {
            "l2".into()
        },
        time,
        grids,
        errors,
        observed_orders,
    })
}

fn closed_loop_target_error(
    profile: &CoefficientProfile,
    phi: &PhiMaps,
    case: SpeedCase,
    kernels: &KernelGrid,
    sim: &SimConfig,
    cfg: &ExperimentConfig,
) -> Result<f64> {
    let grid = PlantGrid::new(sim.nodes)?;
    let table = KernelTable::new(kernels, grid);
    let gains = gains_from_table(&table, phi);
    let reflection = match case {
        SpeedCase::LambdaFaster => compute_p(&table, profile)?,
        _ => compute_q(&table, profile)?,
    };
    let ff = solve_feedforward(&table, &reflection, cfg.tolerances.volterra)?;
    let init = cfg.simulation.initial;
    let initial = PlantState::from_fn(&grid, |w| init.u0(w), |w| init.v0(w));
    let mut last = None;
    simulate(profile, sim, initial.clone(), &gains, |s| {
        last = Some(s.clone());
    })?;
    let plant_final = backstepping_transform(&last.expect("at least the initial state"), &table)?;
    let t0 = backstepping_transform(&initial, &table)?;
    let states = simulate_target(profile, case, Some(&ff), sim, t0.alpha, t0.beta)?;
    let target_final = states.last().expect("initial state is always recorded");
    let da: Vec<f64> = plant_final
        .alpha
        .iter()
        .zip(&target_final.alpha)
        .map(|(a, b)| a - b)
        .collect();
    let db: Vec<f64> = plant_final
        .beta
        .iter()
        .zip(&target_final.beta)
        .map(|(a, b)| a - b)
        .collect();
    Ok(grid.l2_norm(&da, &db))
}

fn write_file(
    path: &Path,
    f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>,
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn write_gains<W: Write>(mut w: W, g: &ControlGains) -> std::io::Result<()> {
    writeln!(w, "z,g11,g12,g21,g22")?;
    for r in g.rows() {
        writeln!(
            w,
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r[0], r[1], r[2], r[3], r[4]
        )?;
    }
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "nan".to_string(), |v| format!("{v:.16e}"))
}

fn write_norms<W: Write>(mut w: W, rows: &[NormRow]) -> std::io::Result<()> {
    writeln!(w, "t,l2_uv,l2_alphabeta,U1,U2")?;
    for r in rows {
        writeln!(
            w,
            "{:.16e},{:.16e},{},{:.16e},{:.16e}",
            r.t,
            r.l2_uv,
            fmt_opt(r.l2_ab),
            r.u1,
            r.u2
        )?;
    }
    Ok(())
}

fn write_snapshots<W: Write>(mut w: W, snaps: &[Snapshot]) -> std::io::Result<()> {
    writeln!(w, "t,w,u,v,alpha,beta")?;
    for s in snaps {
        let n = s.plant.u.len();
        let h = 2.0 / (n - 1) as f64;
        let c = (n - 1) / 2;
        for j in 0..n {
            let (a, b) = match &s.target {
                Some(t) => (Some(t.alpha[j]), Some(t.beta[j])),
                None => (None, None),
            };
            writeln!(
                w,
                "{:.16e},{:.16e},{:.16e},{:.16e},{},{}",
                s.plant.t,
                (j as f64 - c as f64) * h,
                s.plant.u[j],
                s.plant.v[j],
                fmt_opt(a),
                fmt_opt(b)
            )?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_lists_required_keys() {
        let err = validate_config("").unwrap_err().to_string();
        assert!(
            err.contains("mode") && err.contains("coefficients"),
            "{err}"
        );
    }

    #[test]
    fn cfl_range_is_enforced() {
        let raw =
            "mode = \"both\"\n[coefficients]\nkind = \"paper-eq60\"\n[simulation]\ncfl = 1.5\n";
        let err = validate_config(raw).unwrap_err().to_string();
        assert!(err.contains("cfl must lie in (0,1]"), "{err}");
    }

    #[test]
    fn defaults_are_applied() {
        let raw = "mode = \"both\"\n[coefficients]\nkind = \"paper-eq60\"\n";
        let cfg = validate_config(raw).unwrap();
        assert_eq!(cfg.grid.n_x, 401);
        assert_eq!(cfg.simulation.cfl, 0.8);
        assert_eq!(cfg.grid.n_w, 129);
        assert_eq!(cfg.case, CaseSelection::Auto);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let raw = "mode = \"both\"\nfoo = 1\n[coefficients]\nkind = \"paper-eq60\"\n";
        let err = validate_config(raw).unwrap_err().to_string();
        assert!(err.contains("foo"), "{err}");
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let raw =
            "mode = \"both\"\n[coefficients]\nkind = \"paper-eq60\"\n[grid]\nn_x = \"many\"\n";
        let err = validate_config(raw).unwrap_err().to_string();
        assert!(err.contains("line 5"), "{err}");
    }

    #[test]
    fn target_check_grids_halve() {
        assert_eq!(target_check_grids(401), vec![101, 201, 401]);
    }
}
