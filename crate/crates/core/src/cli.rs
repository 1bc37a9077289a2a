//! Command-line front end.
//!
//! Every run writes its outputs plus a `manifest.json` ([`RunManifest`]) into
//! the output directory (`--out`, or `FPP_OUT_DIR`, default `.`). Exit codes:
//! 0 on success, 1 on invalid input, 2 on numerical failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::affine::{self, AffineError, AffineSpec, Direction, Method, RiccatiSolution};
use crate::eve::{self, EveError, PNorm};
use crate::linalg;
use crate::model::{self, GeneratorCoefficients, ModelError, ModelSpec, RiskParams};
use crate::sim::{self, AffineOptimalStrategy, BoundaryPolicy, MyopicStrategy, PathBundle, PerturbedStrategy, SimError, SimulationConfig, Strategy, ZeroStrategy};
use crate::spectral::{self, EigenfunctionSelection, SpectralError, SpectralMeasure};
use crate::verify::{self, Candidate, FdOptions, Stencil, VerifyError};

/// Failure of a CLI run, classified for the exit code.
#[derive(Debug)]
pub enum CliError {
    Invalid(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Numerical(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Invalid(m) => write!(f, "invalid input: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

fn invalid(m: impl std::fmt::Display) -> CliError {
    CliError::Invalid(m.to_string())
}

fn numerical(m: impl std::fmt::Display) -> CliError {
    CliError::Numerical(m.to_string())
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Singular { .. } => numerical(e),
            _ => invalid(e),
        }
    }
}

impl From<EveError> for CliError {
    fn from(e: EveError) -> Self {
        match e {
            EveError::SingularProjection { .. } => numerical(e),
            _ => invalid(e),
        }
    }
}

impl From<AffineError> for CliError {
    fn from(e: AffineError) -> Self {
        match e {
            AffineError::InapplicableClosedForm(_)
            | AffineError::DegenerateChi { .. }
            | AffineError::BlowUp { .. }
            | AffineError::Overflow { .. }
            | AffineError::Ode(_) => numerical(e),
            AffineError::Model(m) => m.into(),
            _ => invalid(e),
        }
    }
}

impl From<SpectralError> for CliError {
    fn from(e: SpectralError) -> Self {
        match e {
            SpectralError::Conditioning { .. }
            | SpectralError::NonRepresentable { .. }
            | SpectralError::Inconsistent { .. }
            | SpectralError::Integration(_) => numerical(e),
            SpectralError::Model(m) => m.into(),
            _ => invalid(e),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::NonFinite { .. } => numerical(e),
            SimError::Model(m) => m.into(),
            _ => invalid(e),
        }
    }
}

impl From<VerifyError> for CliError {
    fn from(e: VerifyError) -> Self {
        match e {
            VerifyError::Concavity { .. }
            | VerifyError::Positivity { .. }
            | VerifyError::NonFinite { .. }
            | VerifyError::Evaluation(_) => numerical(e),
            VerifyError::Model(m) => m.into(),
            _ => invalid(e),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
}

/// Record of one run. Equal manifests (ignoring timestamps) imply equal outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    /// SHA-256 of every input file, keyed by the path as given.
    pub config_hashes: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub version: String,
    /// Seconds since the Unix epoch.
    pub started_at: f64,
    pub finished_at: f64,
    pub outputs: Vec<OutputFile>,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Run {
    out: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn new(command: &str, args: Vec<String>, out: &Path, seed: Option<u64>) -> CliResult<Run> {
        fs::create_dir_all(out).map_err(|e| invalid(format!("cannot create {}: {e}", out.display())))?;
        Ok(Run {
            out: out.to_path_buf(),
            manifest: RunManifest {
                command: command.into(),
                args,
                config_hashes: BTreeMap::new(),
                seed,
                version: env!("CARGO_PKG_VERSION").into(),
                started_at: unix_now(),
                finished_at: 0.0,
                outputs: Vec::new(),
            },
        })
    }

    fn read(&mut self, path: &Path) -> CliResult<String> {
        let bytes = fs::read(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        self.manifest.config_hashes.insert(path.display().to_string(), sha256_hex(&bytes));
        String::from_utf8(bytes).map_err(|_| invalid(format!("{} is not UTF-8", path.display())))
    }

    fn read_json<T: serde::de::DeserializeOwned>(&mut self, path: &Path) -> CliResult<T> {
        let text = self.read(path)?;
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
    }

    fn hash_existing(&mut self, path: &Path) -> CliResult<()> {
        let bytes = fs::read(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
        self.manifest.config_hashes.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(())
    }

    fn record(&mut self, name: &str) -> CliResult<()> {
        let bytes = fs::read(self.out.join(name)).map_err(|e| numerical(format!("cannot reread {name}: {e}")))?;
        self.manifest.outputs.push(OutputFile { path: name.into(), sha256: sha256_hex(&bytes) });
        Ok(())
    }

    fn write(&mut self, name: &str, contents: &[u8]) -> CliResult<()> {
        fs::write(self.out.join(name), contents).map_err(|e| invalid(format!("cannot write {name}: {e}")))?;
        self.record(name)
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<()> {
        let mut s = serde_json::to_string_pretty(value).map_err(numerical)?;
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    fn finish(mut self) -> CliResult<()> {
        self.manifest.finished_at = unix_now();
        let mut s = serde_json::to_string_pretty(&self.manifest).map_err(numerical)?;
        s.push('\n');
        fs::write(self.out.join("manifest.json"), s).map_err(|e| invalid(format!("cannot write manifest: {e}")))
    }
}

/// A serialized performance process, as consumed by `verify`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FppDescription {
    Affine {
        spec: AffineSpec,
        gamma: f64,
        p: f64,
        horizon: f64,
        direction: Direction,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        method: Option<Method>,
    },
    Widder {
        measure: SpectralMeasure,
        selection: EigenfunctionSelection,
        gamma: f64,
        p: f64,
    },
}

/// A ready-to-evaluate performance process.
pub enum Fpp {
    Affine { solution: RiccatiSolution, rp: RiskParams },
    Widder { measure: SpectralMeasure, selection: EigenfunctionSelection, rp: RiskParams },
}

impl FppDescription {
    pub fn build(&self) -> CliResult<Fpp> {
        match self {
            FppDescription::Affine { spec, gamma, p, horizon, direction, method } => {
                let rp = RiskParams::new(*gamma, *p)?;
                let solution = match method {
                    None => affine::solve_riccati(spec, &rp, *horizon, *direction)?,
                    Some(Method::ClosedForm) => affine::solve_riccati_closed_form(spec, &rp, *horizon, *direction)?,
                    Some(Method::Numeric) => affine::solve_riccati_numeric(spec, &rp, *horizon, *direction)?,
                };
                Ok(Fpp::Affine { solution, rp })
            }
            FppDescription::Widder { measure, selection, gamma, p } => {
                let rp = RiskParams::new(*gamma, *p)?;
                Ok(Fpp::Widder { measure: measure.clone(), selection: selection.clone(), rp })
            }
        }
    }
}

impl Fpp {
    pub fn risk_params(&self) -> RiskParams {
        match self {
            Fpp::Affine { rp, .. } | Fpp::Widder { rp, .. } => *rp,
        }
    }

    /// The linear-PDE solution `u(t, y)`.
    pub fn u(&self, t: f64, y: &[f64]) -> Result<f64, String> {
        match self {
            Fpp::Affine { solution, .. } => affine::evaluate_u_affine(solution, t, y).map_err(|e| e.to_string()),
            Fpp::Widder { measure, selection, .. } => {
                spectral::widder_evaluate(measure, selection, t, y).map_err(|e| e.to_string())
            }
        }
    }

    /// `U_t(x) = γ^γ x^{1−γ}/(1−γ) · u(t, y)^q`.
    pub fn value(&self, t: f64, x: f64, y: &[f64]) -> Result<f64, String> {
        let rp = self.risk_params();
        if !(x > 0.0) {
            return Err(format!("wealth must be positive, got {x}"));
        }
        Ok(rp.power_utility(x) * self.u(t, y)?.powf(rp.q()))
    }

    pub fn jet(&self, t: f64, y: &[f64]) -> Option<verify::UJet> {
        match self {
            Fpp::Affine { solution, .. } => {
                let u = affine::evaluate_u_affine(solution, t, y).ok()?;
                let phi = solution.phi(t);
                let ut = u * (solution.phi_dot(t).dot(&DVector::from_column_slice(y)) + solution.theta_dot(t));
                let grad = &phi * u;
                let hess = &phi * phi.transpose() * u;
                Some((u, ut, grad, hess))
            }
            Fpp::Widder { measure, selection, .. } => spectral::widder_jet(measure, selection, t, y),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "fpp", version, about = "Forward performance processes and Merton value functions in factor models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Out {
    /// Output directory.
    #[arg(long, env = "FPP_OUT_DIR", default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone)]
struct Risk {
    /// Relative risk aversion γ.
    #[arg(long)]
    gamma: f64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Correlation-structure projection and p selection.
    #[command(subcommand)]
    Eve(EveCmd),
    /// Affine term-structure models.
    #[command(subcommand)]
    Affine(AffineCmd),
    /// Widder representations, Laplace inversion and eigenfunctions.
    #[command(subcommand)]
    Spectral(SpectralCmd),
    /// Monte Carlo simulation.
    #[command(subcommand)]
    Sim(SimCmd),
    /// Residual and martingale certification.
    #[command(subcommand)]
    Verify(VerifyCmd),
}

#[derive(Subcommand, Debug)]
enum EveCmd {
    /// Nearest r·Q to a correlation estimate, plus p for every norm.
    Project {
        /// Matrix as CSV (no header) or JSON (array of rows).
        #[arg(long = "in")]
        input: PathBuf,
        #[command(flatten)]
        out: Out,
    },
    /// Optimal p for one or all norms.
    SelectP {
        /// Matrix as CSV (no header) or JSON (array of rows).
        #[arg(long = "in")]
        input: PathBuf,
        /// Norm for the p selection.
        #[arg(long, value_enum, default_value_t = NormArg::All)]
        norm: NormArg,
        #[command(flatten)]
        out: Out,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum NormArg {
    Operator,
    Frobenius,
    Trace,
    All,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum MethodArg {
    Auto,
    ClosedForm,
    Numeric,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum DirectionArg {
    Forward,
    Backward,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Self {
        match d {
            DirectionArg::Forward => Direction::Forward,
            DirectionArg::Backward => Direction::Backward,
        }
    }
}

#[derive(Args, Debug, Clone)]
struct AffineSource {
    /// Affine coefficients (JSON); derived from the model when absent.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Boundary slope `H` used when deriving the coefficients.
    #[arg(long = "h", value_delimiter = ',', allow_negative_numbers = true)]
    h: Vec<f64>,
    /// Boundary level `h₀` used when deriving the coefficients.
    #[arg(long = "h0", default_value_t = 0.0, allow_negative_numbers = true)]
    h0: f64,
}

#[derive(Subcommand, Debug)]
enum AffineCmd {
    /// Solve the Riccati system on a uniform grid.
    Solve {
        /// Affine coefficients (JSON).
        #[arg(long)]
        spec: PathBuf,
        #[command(flatten)]
        risk: Risk,
        /// EVE scalar p in [0, 1].
        #[arg(long)]
        p: f64,
        /// Time horizon T.
        #[arg(long, default_value_t = 1.0)]
        horizon: f64,
        /// Anchor the boundary condition at t = 0 (forward) or t = T (backward).
        #[arg(long, value_enum, default_value_t = DirectionArg::Forward)]
        direction: DirectionArg,
        /// Riccati solver.
        #[arg(long, value_enum, default_value_t = MethodArg::Auto)]
        method: MethodArg,
        /// Number of grid points.
        #[arg(long, default_value_t = 101)]
        samples: usize,
        #[command(flatten)]
        out: Out,
    },
    /// Optimal portfolio at `(t, y)`.
    Portfolio {
        /// Model specification (JSON).
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        risk: Risk,
        #[command(flatten)]
        source: AffineSource,
        /// Time horizon T.
        #[arg(long, default_value_t = 1.0)]
        horizon: f64,
        /// Anchor the boundary condition at t = 0 (forward) or t = T (backward).
        #[arg(long, value_enum, default_value_t = DirectionArg::Forward)]
        direction: DirectionArg,
        /// Time t.
        #[arg(long)]
        t: f64,
        /// Factor state, comma separated.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
        y: Vec<f64>,
        #[command(flatten)]
        out: Out,
    },
}

#[derive(Subcommand, Debug)]
enum SpectralCmd {
    /// Evaluate `u(t, y)` (and `U_t(x)` with `--gamma`/`--x`).
    Evaluate {
        /// Spectral measure (JSON).
        #[arg(long)]
        measure: PathBuf,
        /// Eigenfunction selection (JSON).
        #[arg(long)]
        selection: PathBuf,
        /// Time t.
        #[arg(long)]
        t: f64,
        /// Factor state, comma separated.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
        y: Vec<f64>,
        /// Relative risk aversion γ.
        #[arg(long, requires = "x")]
        gamma: Option<f64>,
        /// EVE scalar p in [0, 1].
        #[arg(long, default_value_t = 0.0)]
        p: f64,
        /// Wealth x > 0.
        #[arg(long, requires = "gamma")]
        x: Option<f64>,
        #[command(flatten)]
        out: Out,
    },
    /// Fit a discrete measure to a `(t, u)` series.
    Invert {
        /// Samples t,u as CSV with header.
        #[arg(long)]
        series: PathBuf,
        /// Number of atoms.
        #[arg(long)]
        atoms: usize,
        /// Reference point recorded in the measure.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        y0: Vec<f64>,
        /// Maximum acceptable fit residual.
        #[arg(long)]
        tol: Option<f64>,
        #[command(flatten)]
        out: Out,
    },
    /// Shoot a one-factor eigenfunction.
    #[command(name = "eigenfn-1d")]
    Eigenfn1d {
        /// One-factor model; otherwise constant coefficients from --a/--b/--potential.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Relative risk aversion γ.
        #[arg(long, requires = "model")]
        gamma: Option<f64>,
        /// Constant diffusion coefficient a.
        #[arg(long, default_value_t = 1.0)]
        a: f64,
        /// Constant drift coefficient b.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        b: f64,
        /// Constant potential P.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        potential: f64,
        /// Eigenvalue ζ.
        #[arg(long, allow_negative_numbers = true)]
        zeta: f64,
        /// Normalisation point y₀.
        #[arg(long, allow_negative_numbers = true)]
        y0: f64,
        /// Initial slope ψ'(y₀).
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        slope: f64,
        /// `lo:hi:n`.
        #[arg(long, allow_hyphen_values = true)]
        grid: String,
        #[command(flatten)]
        out: Out,
    },
    /// Radial divergence diagnostic for `P₀(r) = Σⱼ cⱼ r^{−j}`.
    Radial {
        /// Eigenvalue ζ.
        #[arg(long, allow_negative_numbers = true)]
        zeta: f64,
        /// Dimension k ≥ 2.
        #[arg(long)]
        k: usize,
        /// Truncation radius (> 1).
        #[arg(long)]
        r_max: f64,
        /// Number of radial samples.
        #[arg(long, default_value_t = 200)]
        samples: usize,
        /// Coefficients `c₀, c₁, …`.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_value = "0")]
        p0: Vec<f64>,
        #[command(flatten)]
        out: Out,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum StrategyArg {
    Zero,
    Myopic,
    AffineOptimal,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum PolicyArg {
    FullTruncation,
    Absorb,
    Reflect,
}

impl From<PolicyArg> for BoundaryPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::FullTruncation => BoundaryPolicy::FullTruncation,
            PolicyArg::Absorb => BoundaryPolicy::Absorb,
            PolicyArg::Reflect => BoundaryPolicy::Reflect,
        }
    }
}

#[derive(Subcommand, Debug)]
enum SimCmd {
    /// Simulate factor, price and wealth paths.
    Run {
        /// Model specification (JSON).
        #[arg(long)]
        model: PathBuf,
        /// Simulation config (JSON); --seed/--paths/--dt override its fields.
        #[arg(long)]
        config: PathBuf,
        /// Strategy to simulate, repeatable.
        #[arg(long, value_enum, required = true)]
        strategy: Vec<StrategyArg>,
        /// Add `affine-optimal + δ·1` for each value.
        #[arg(long, allow_negative_numbers = true)]
        perturb: Vec<f64>,
        /// Relative risk aversion γ.
        #[arg(long)]
        gamma: Option<f64>,
        #[command(flatten)]
        source: AffineSource,
        /// RNG seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Number of paths.
        #[arg(long)]
        paths: Option<usize>,
        /// Time step.
        #[arg(long)]
        dt: Option<f64>,
        /// Also write one CSV per variable.
        #[arg(long)]
        csv: bool,
        #[command(flatten)]
        out: Out,
    },
    /// Monte Carlo `u` at time-to-go τ against the backward closed form.
    FeynmanKac {
        /// Model specification (JSON).
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        risk: Risk,
        #[command(flatten)]
        source: AffineSource,
        /// Time horizon T.
        #[arg(long, default_value_t = 1.0)]
        horizon: f64,
        /// `tau:y1,y2,…`, repeatable.
        #[arg(long, required = true)]
        probe: Vec<String>,
        /// RNG seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of paths.
        #[arg(long, default_value_t = 10_000)]
        paths: usize,
        /// Time step.
        #[arg(long, default_value_t = 1e-3)]
        dt: f64,
        /// Treatment of steps leaving the factor domain.
        #[arg(long, value_enum, default_value_t = PolicyArg::FullTruncation)]
        boundary_policy: PolicyArg,
        /// Fail when any |z| exceeds this.
        #[arg(long)]
        tol: Option<f64>,
        #[command(flatten)]
        out: Out,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Which {
    Hjb,
    Linear,
    Nonlinear,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum StencilArg {
    #[value(name = "2")]
    Two,
    #[value(name = "4")]
    Four,
}

/// Tensor grid for `verify residual`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResidualGrid {
    pub t: Vec<f64>,
    #[serde(default = "default_x_axis")]
    pub x: Vec<f64>,
    /// One axis per factor.
    pub y: Vec<Vec<f64>>,
}

fn default_x_axis() -> Vec<f64> {
    vec![1.0]
}

impl ResidualGrid {
    pub fn y_points(&self) -> Vec<Vec<f64>> {
        let mut pts = vec![Vec::new()];
        for axis in &self.y {
            pts = pts.into_iter().flat_map(|p| axis.iter().map(move |&v| [p.clone(), vec![v]].concat())).collect();
        }
        pts
    }
}

#[derive(Subcommand, Debug)]
enum VerifyCmd {
    /// Finite-difference (or exact-jet) PDE residual of a performance process.
    Residual {
        /// PDE to check: the HJB for V, the linear PDE for u, or the distorted PDE for u^q.
        #[arg(long, value_enum)]
        which: Which,
        /// Performance process description (JSON, e.g. fpp.json from `sim run`).
        #[arg(long)]
        fpp: PathBuf,
        /// Model specification (JSON).
        #[arg(long)]
        model: PathBuf,
        /// Residual grid (JSON with axes t, x, y).
        #[arg(long)]
        grid: PathBuf,
        /// Relative finite-difference step.
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        /// Central stencil order.
        #[arg(long, value_enum, default_value_t = StencilArg::Two)]
        stencil: StencilArg,
        /// Use finite differences even when exact derivatives exist.
        #[arg(long)]
        fd: bool,
        /// Fail (exit 2) when the maximum residual exceeds this.
        #[arg(long)]
        tol: Option<f64>,
        #[command(flatten)]
        out: Out,
    },
    /// Bucketed sign test of `U_t(X_t)` increments along simulated paths.
    Martingale {
        /// Directory written by `sim run`.
        #[arg(long)]
        paths: PathBuf,
        /// Performance process description (JSON, e.g. fpp.json from `sim run`).
        #[arg(long)]
        fpp: PathBuf,
        /// Strategy names; all when omitted.
        #[arg(long)]
        strategy: Vec<String>,
        /// Number of time buckets.
        #[arg(long, default_value_t = 10)]
        buckets: usize,
        #[command(flatten)]
        out: Out,
    },
}

/// Parses `args` (including the program name), runs the command, and returns
/// the process exit code.
pub fn run<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let args: Vec<OsString> = args.into_iter().collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let recorded: Vec<String> = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    let result = match cli.command {
        Command::Eve(c) => cmd_eve(c, recorded),
        Command::Affine(c) => cmd_affine(c, recorded),
        Command::Spectral(c) => cmd_spectral(c, recorded),
        Command::Sim(c) => cmd_sim(c, recorded),
        Command::Verify(c) => cmd_verify(c, recorded),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("fpp: {e}");
            e.exit_code()
        }
    }
}

fn read_matrix(run: &mut Run, path: &Path) -> CliResult<DMatrix<f64>> {
    let text = run.read(path)?;
    let rows: Vec<Vec<f64>> = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?
    } else {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(text.as_bytes());
        let mut rows = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| invalid(format!("{}: {e}", path.display())))?;
            let row = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|_| invalid(format!("{}: row {}: `{s}` is not a number", path.display(), i + 1))))
                .collect::<CliResult<Vec<f64>>>()?;
            rows.push(row);
        }
        rows
    };
    if rows.is_empty() || rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(invalid(format!("{}: matrix rows must be non-empty and of equal length", path.display())));
    }
    Ok(linalg::from_rows(&rows))
}

#[derive(Serialize)]
struct ProjectionReport {
    r_star: f64,
    q_star: Vec<Vec<f64>>,
    frobenius_distance: f64,
    r_unclamped: f64,
    clamped: bool,
    gram_eigenvalues: Vec<f64>,
    p: BTreeMap<String, f64>,
}

fn norm_name(n: PNorm) -> String {
    format!("{n:?}").to_lowercase()
}

fn cmd_eve(cmd: EveCmd, args: Vec<String>) -> CliResult<()> {
    match cmd {
        EveCmd::Project { input, out } => {
            let mut run = Run::new("eve project", args, &out.out, None)?;
            let rho = read_matrix(&mut run, &input)?;
            let proj = eve::project_eve(&rho)?;
            let theta = eve::gram_eigenvalues(&rho);
            let p = PNorm::ALL.iter().map(|&n| (norm_name(n), eve::select_p_from_eigenvalues(&theta, n))).collect();
            run.write_json(
                "eve_projection.json",
                &ProjectionReport {
                    r_star: proj.r_star,
                    q_star: linalg::to_rows(&proj.q_star),
                    frobenius_distance: proj.frobenius_distance,
                    r_unclamped: proj.r_unclamped,
                    clamped: proj.clamped,
                    gram_eigenvalues: theta,
                    p,
                },
            )?;
            run.finish()
        }
        EveCmd::SelectP { input, norm, out } => {
            let mut run = Run::new("eve select-p", args, &out.out, None)?;
            let rho = read_matrix(&mut run, &input)?;
            let norms: Vec<PNorm> = match norm {
                NormArg::Operator => vec![PNorm::Operator],
                NormArg::Frobenius => vec![PNorm::Frobenius],
                NormArg::Trace => vec![PNorm::Trace],
                NormArg::All => PNorm::ALL.to_vec(),
            };
            let theta = eve::gram_eigenvalues(&rho);
            let mut report = BTreeMap::new();
            for n in norms {
                let p = eve::select_p_from_eigenvalues(&theta, n);
                report.insert(norm_name(n), serde_json::json!({ "p": p, "distance": n.distance(&theta, p) }));
            }
            run.write_json("eve_select_p.json", &serde_json::json!({ "gram_eigenvalues": theta, "norms": report }))?;
            run.finish()
        }
    }
}

fn load_model(run: &mut Run, path: &Path) -> CliResult<ModelSpec> {
    let text = run.read(path)?;
    ModelSpec::from_json(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn load_affine_spec(run: &mut Run, source: &AffineSource, model: &ModelSpec, rp: &RiskParams) -> CliResult<AffineSpec> {
    match &source.spec {
        Some(path) => {
            let spec: AffineSpec = run.read_json(path)?;
            spec.check()?;
            Ok(spec)
        }
        None => {
            let h = if source.h.is_empty() { vec![0.0; model.k] } else { source.h.clone() };
            Ok(AffineSpec::from_model(model, rp, h, source.h0)?)
        }
    }
}

fn write_riccati_csv(sol: &RiccatiSolution, samples: usize) -> String {
    let k = sol.k();
    let mut s = String::from("t");
    for i in 1..=k {
        let _ = write!(s, ",phi_{i}");
    }
    s.push_str(",theta\n");
    for (t, phi, theta) in sol.uniform_grid(samples) {
        let _ = write!(s, "{t:e}");
        for v in phi.iter() {
            let _ = write!(s, ",{v:e}");
        }
        let _ = writeln!(s, ",{theta:e}");
    }
    s
}

fn cmd_affine(cmd: AffineCmd, args: Vec<String>) -> CliResult<()> {
    match cmd {
        AffineCmd::Solve { spec, risk, p, horizon, direction, method, samples, out } => {
            if samples < 2 {
                return Err(invalid("--samples must be at least 2"));
            }
            let mut run = Run::new("affine solve", args, &out.out, None)?;
            let spec: AffineSpec = run.read_json(&spec)?;
            let rp = RiskParams::new(risk.gamma, p)?;
            let dir = Direction::from(direction);
            let sol = match method {
                MethodArg::Auto => affine::solve_riccati(&spec, &rp, horizon, dir)?,
                MethodArg::ClosedForm => affine::solve_riccati_closed_form(&spec, &rp, horizon, dir)?,
                MethodArg::Numeric => affine::solve_riccati_numeric(&spec, &rp, horizon, dir)?,
            };
            run.write("riccati.csv", write_riccati_csv(&sol, samples).as_bytes())?;
            let (phi_res, theta_res) = sol.max_residuals(samples);
            run.write_json(
                "riccati_components.json",
                &serde_json::json!({
                    "method": sol.method,
                    "direction": sol.direction,
                    "horizon": sol.horizon,
                    "components": sol.components(),
                    "max_phi_residual": phi_res,
                    "max_theta_residual": theta_res,
                }),
            )?;
            run.finish()
        }
        AffineCmd::Portfolio { model, risk, source, horizon, direction, t, y, out } => {
            let mut run = Run::new("affine portfolio", args, &out.out, None)?;
            let model = load_model(&mut run, &model)?;
            let rp = RiskParams::for_model(risk.gamma, &model)?;
            let spec = load_affine_spec(&mut run, &source, &model, &rp)?;
            let sol = affine::solve_riccati(&spec, &rp, horizon, direction.into())?;
            let pi = affine::optimal_portfolio_affine(&sol, &model, &rp, t, &y)?;
            let u = affine::evaluate_u_affine(&sol, t, &y)?;
            let residual = verify::optimal_portfolio_residual(&model, &rp, u, &(sol.phi(t) * u), &y, &pi)?;
            run.write_json(
                "portfolio.json",
                &serde_json::json!({
                    "t": t,
                    "y": y,
                    "p": rp.p(),
                    "pi": pi.as_slice(),
                    "u": u,
                    "identity_residual": residual,
                }),
            )?;
            run.finish()
        }
    }
}

fn parse_grid(s: &str) -> CliResult<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    let bad = || invalid(format!("--grid `{s}`: expected lo:hi:n"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].trim().parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].trim().parse().map_err(|_| bad())?;
    let n: usize = parts[2].trim().parse().map_err(|_| bad())?;
    if n < 2 || !(hi > lo) {
        return Err(bad());
    }
    Ok((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect())
}

fn cmd_spectral(cmd: SpectralCmd, args: Vec<String>) -> CliResult<()> {
    match cmd {
        SpectralCmd::Evaluate { measure, selection, t, y, gamma, p, x, out } => {
            let mut run = Run::new("spectral evaluate", args, &out.out, None)?;
            let nu: SpectralMeasure = run.read_json(&measure)?;
            let sel: EigenfunctionSelection = run.read_json(&selection)?;
            let u = spectral::widder_evaluate(&nu, &sel, t, &y)?;
            let mut report = serde_json::json!({ "t": t, "y": y, "u": u });
            if let (Some(g), Some(x)) = (gamma, x) {
                let rp = RiskParams::new(g, p)?;
                report["x"] = x.into();
                report["value"] = spectral::fpp_from_measure(&nu, &sel, &rp, t, x, &y)?.into();
            }
            run.write_json("spectral_value.json", &report)?;
            run.finish()
        }
        SpectralCmd::Invert { series, atoms, y0, tol, out } => {
            let mut run = Run::new("spectral invert", args, &out.out, None)?;
            run.hash_existing(&series)?;
            let samples = spectral::read_series_csv(&series)?;
            let fit = spectral::invert_laplace_discrete(&samples, atoms)?;
            if let Some(tol) = tol {
                if fit.max_residual > tol {
                    return Err(numerical(format!("fit residual {:.3e} exceeds --tol {tol:e}", fit.max_residual)));
                }
            }
            run.write_json("laplace_fit.json", &fit)?;
            run.write_json("measure.json", &fit.into_measure(y0)?)?;
            run.finish()
        }
        SpectralCmd::Eigenfn1d { model, gamma, a, b, potential, zeta, y0, slope, grid, out } => {
            let mut run = Run::new("spectral eigenfn-1d", args, &out.out, None)?;
            let gen = match model {
                Some(path) => {
                    let m = load_model(&mut run, &path)?;
                    let g = gamma.ok_or_else(|| invalid("--gamma is required with --model"))?;
                    model::generator_coefficients(&m, &RiskParams::for_model(g, &m)?)?
                }
                None => GeneratorCoefficients::constant(DMatrix::from_element(1, 1, a), DVector::from_element(1, b), potential),
            };
            let grid = parse_grid(&grid)?;
            let ef = spectral::solve_eigenfunction_1d(&gen, zeta, y0, slope, &grid)?;
            let mut csv = String::from("y,psi,dpsi\n");
            for i in 0..ef.grid.len() {
                let _ = writeln!(csv, "{:e},{:e},{:e}", ef.grid[i], ef.psi[i], ef.dpsi[i]);
            }
            run.write("eigenfunction.csv", csv.as_bytes())?;
            run.write_json(
                "eigenfunction.json",
                &serde_json::json!({
                    "zeta": ef.zeta,
                    "y0": ef.y0,
                    "slope": ef.slope,
                    "positive": ef.is_positive(),
                    "first_sign_change": ef.first_sign_change,
                    "eigenfunction": ef.to_eigenfunction(),
                }),
            )?;
            run.finish()
        }
        SpectralCmd::Radial { zeta, k, r_max, samples, p0, out } => {
            let mut run = Run::new("spectral radial", args, &out.out, None)?;
            let p = |r: f64| p0.iter().enumerate().map(|(j, c)| c * r.powi(-(j as i32))).sum::<f64>();
            let diag = spectral::radial_ode_diagnostic(&p, zeta, k, r_max, samples)?;
            let mut csv = String::from("r,g0\n");
            for (r, g) in diag.r.iter().zip(&diag.g0) {
                let _ = writeln!(csv, "{r:e},{g:e}");
            }
            run.write("radial.csv", csv.as_bytes())?;
            run.write_json(
                "radial.json",
                &serde_json::json!({
                    "truncated_integral": diag.truncated_integral.map(json_f64),
                    "partial_integrals": diag.partial_integrals.iter().map(|&(r, v)| (r, json_f64(v))).collect::<Vec<_>>(),
                    "growth_flag": diag.growth_flag,
                    "first_zero": diag.first_zero,
                }),
            )?;
            run.finish()
        }
    }
}

/// JSON has no infinity; encode it as a string.
fn json_f64(v: f64) -> serde_json::Value {
    if v.is_finite() {
        v.into()
    } else {
        format!("{v}").into()
    }
}

fn cmd_sim(cmd: SimCmd, args: Vec<String>) -> CliResult<()> {
    match cmd {
        SimCmd::Run { model, config, strategy, perturb, gamma, source, seed, paths, dt, csv, out } => {
            let mut run = Run::new("sim run", args, &out.out, None)?;
            let model = load_model(&mut run, &model)?;
            let mut cfg: SimulationConfig = run.read_json(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = paths {
                cfg.n_paths = n;
            }
            if let Some(d) = dt {
                cfg.dt = d;
            }
            run.manifest.seed = Some(cfg.seed);
            let needs_affine = strategy.contains(&StrategyArg::AffineOptimal) || !perturb.is_empty();
            let needs_gamma = needs_affine || strategy.contains(&StrategyArg::Myopic);
            let gamma = match (gamma, needs_gamma) {
                (Some(g), _) => Some(g),
                (None, false) => None,
                (None, true) => return Err(invalid("--gamma is required for myopic and affine-optimal strategies")),
            };
            let mut owned: Vec<Arc<dyn Strategy>> = Vec::new();
            let mut fpp = None;
            let mut optimal: Option<Arc<dyn Strategy>> = None;
            if needs_affine {
                let rp = RiskParams::for_model(gamma.unwrap_or(1.0), &model)?;
                let spec = load_affine_spec(&mut run, &source, &model, &rp)?;
                let sol = affine::solve_riccati(&spec, &rp, cfg.horizon, Direction::Forward)?;
                fpp = Some(FppDescription::Affine {
                    spec,
                    gamma: rp.gamma(),
                    p: rp.p(),
                    horizon: cfg.horizon,
                    direction: Direction::Forward,
                    method: Some(sol.method),
                });
                optimal = Some(Arc::new(AffineOptimalStrategy { solution: Arc::new(sol), rp }));
            }
            for s in &strategy {
                match s {
                    StrategyArg::Zero => owned.push(Arc::new(ZeroStrategy)),
                    StrategyArg::Myopic => owned.push(Arc::new(MyopicStrategy { gamma: gamma.unwrap_or(1.0) })),
                    StrategyArg::AffineOptimal => owned.push(optimal.clone().expect("built above")),
                }
            }
            for &d in &perturb {
                let base = optimal.clone().expect("built above");
                owned.push(Arc::new(PerturbedStrategy { base, delta: DVector::from_element(model.n, d) }));
            }
            let refs: Vec<&dyn Strategy> = owned.iter().map(|s| s.as_ref()).collect();
            let bundle = sim::simulate(&model, &cfg, &refs)?;
            bundle.write_binary(&run.out.join("paths.bin"))?;
            run.record("paths.bin")?;
            if csv {
                for p in bundle.write_csv(&run.out)? {
                    let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                    run.record(&name)?;
                }
            }
            let adm: Vec<_> = (0..bundle.strategy_names.len()).map(|i| sim::admissibility_check(&bundle, i)).collect();
            run.write_json("admissibility.json", &adm)?;
            if let Some(f) = fpp {
                run.write_json("fpp.json", &f)?;
            }
            run.finish()
        }
        SimCmd::FeynmanKac { model, risk, source, horizon, probe, seed, paths, dt, boundary_policy, tol, out } => {
            let mut run = Run::new("sim feynman-kac", args, &out.out, Some(seed))?;
            let model = load_model(&mut run, &model)?;
            let rp = RiskParams::for_model(risk.gamma, &model)?;
            let spec = load_affine_spec(&mut run, &source, &model, &rp)?;
            let sol = affine::solve_riccati(&spec, &rp, horizon, Direction::Backward)?;
            let gen = model::generator_coefficients(&model, &rp)?;
            let h = |y: &[f64]| (spec.h.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() + spec.h0).exp();
            let mut cfg = SimulationConfig::new(dt, horizon, paths, seed, vec![]);
            cfg.boundary_policy = boundary_policy.into();
            let mut rows = Vec::new();
            let mut worst = 0.0f64;
            for pr in &probe {
                let (tau, y) = parse_probe(pr)?;
                cfg.y0 = y.clone();
                let est = sim::feynman_kac_estimate(&gen, &model.domain, &h, tau, &y, &cfg)?;
                let exact = affine::evaluate_u_affine(&sol, horizon - tau, &y)?;
                let z = est.z_score(exact);
                worst = worst.max(z.abs());
                rows.push(serde_json::json!({
                    "tau": tau, "y": y, "estimate": est.mean, "std_error": est.std_error, "closed_form": exact, "z": z,
                }));
            }
            run.write_json("feynman_kac.json", &rows)?;
            run.finish()?;
            match tol {
                Some(t) if worst > t => Err(numerical(format!("largest |z| = {worst:.3} exceeds --tol {t}"))),
                _ => Ok(()),
            }
        }
    }
}

fn parse_probe(s: &str) -> CliResult<(f64, Vec<f64>)> {
    let bad = || invalid(format!("--probe `{s}`: expected tau:y1,y2,…"));
    let (tau, y) = s.split_once(':').ok_or_else(bad)?;
    let tau: f64 = tau.trim().parse().map_err(|_| bad())?;
    let y = y.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| bad())).collect::<CliResult<Vec<f64>>>()?;
    Ok((tau, y))
}

fn cmd_verify(cmd: VerifyCmd, args: Vec<String>) -> CliResult<()> {
    match cmd {
        VerifyCmd::Residual { which, fpp, model, grid, step, stencil, fd, tol, out } => {
            let mut run = Run::new("verify residual", args, &out.out, None)?;
            let desc: FppDescription = run.read_json(&fpp)?;
            let model = load_model(&mut run, &model)?;
            let grid: ResidualGrid = run.read_json(&grid)?;
            if grid.y.len() != model.k {
                return Err(invalid(format!("grid has {} factor axes, model has k = {}", grid.y.len(), model.k)));
            }
            let f = desc.build()?;
            let rp = f.risk_params();
            let opts = FdOptions {
                step,
                stencil: if stencil == StencilArg::Four { Stencil::Central4 } else { Stencil::Central2 },
                keep_points: false,
            };
            let ys = grid.y_points();
            let report = match which {
                Which::Hjb => {
                    let mut pts = Vec::new();
                    for &t in &grid.t {
                        for &x in &grid.x {
                            pts.extend(ys.iter().map(|y| (t, x, y.clone())));
                        }
                    }
                    let v = |t: f64, x: f64, y: &[f64]| f.value(t, x, y).unwrap_or(f64::NAN);
                    verify::hjb_residual(&v, &model, &pts, opts)?
                }
                Which::Linear | Which::Nonlinear => {
                    let gen = model::generator_coefficients(&model, &rp)?;
                    let pts: Vec<(f64, Vec<f64>)> =
                        grid.t.iter().flat_map(|&t| ys.iter().map(move |y| (t, y.clone()))).collect();
                    let values = |t: f64, y: &[f64]| f.u(t, y).unwrap_or(f64::NAN);
                    let nan_jet = |k: usize| (f64::NAN, f64::NAN, DVector::zeros(k), DMatrix::zeros(k, k));
                    let jet = |t: f64, y: &[f64]| f.jet(t, y).unwrap_or_else(|| nan_jet(y.len()));
                    let exact = !fd && pts.first().is_some_and(|(t, y)| f.jet(*t, y).is_some());
                    let cand = if exact { Candidate::Jet(&jet) } else { Candidate::Values(&values) };
                    let r = verify::distortion_roundtrip(cand, &rp, &gen, &pts, opts)?;
                    if which == Which::Linear { r.linear } else { r.nonlinear }
                }
            };
            let name = format!("residual_{}.json", format!("{which:?}").to_lowercase());
            run.write_json(&name, &report)?;
            run.finish()?;
            match tol {
                Some(t) if report.max_abs_residual > t => {
                    Err(numerical(format!("max residual {:.3e} exceeds --tol {t:e}", report.max_abs_residual)))
                }
                _ => Ok(()),
            }
        }
        VerifyCmd::Martingale { paths, fpp, strategy, buckets, out } => {
            let mut run = Run::new("verify martingale", args, &out.out, None)?;
            let bin = if paths.is_dir() { paths.join("paths.bin") } else { paths.clone() };
            run.hash_existing(&bin)?;
            let bundle = PathBundle::read_binary(&bin)?;
            let desc: FppDescription = run.read_json(&fpp)?;
            let f = desc.build()?;
            let idx: Vec<usize> = if strategy.is_empty() {
                (0..bundle.strategy_names.len()).collect()
            } else {
                strategy
                    .iter()
                    .map(|s| bundle.strategy_index(s).ok_or_else(|| invalid(format!("no strategy `{s}` in {}", bin.display()))))
                    .collect::<CliResult<_>>()?
            };
            let eval = |t: f64, x: f64, y: &[f64]| f.value(t, x, y);
            let reports = idx.iter().map(|&i| verify::martingale_test(&bundle, i, &eval, buckets)).collect::<Result<Vec<_>, _>>()?;
            run.write_json("martingale.json", &reports)?;
            run.finish()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(args: &[&str]) -> i32 {
        run(std::iter::once("fpp").chain(args.iter().copied()).map(OsString::from))
    }

    #[test]
    fn unknown_flag_exits_one() {
        assert_eq!(code(&["eve", "project", "--bogus"]), 1);
        assert_eq!(code(&["nonsense"]), 1);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(code(&["--help"]), 0);
        assert_eq!(code(&["sim", "run", "--help"]), 0);
    }

    #[test]
    fn grid_and_probe_parsing() {
        assert_eq!(parse_grid("0:1:3").unwrap(), vec![0.0, 0.5, 1.0]);
        assert!(parse_grid("1:0:3").is_err());
        assert_eq!(parse_probe("0.5:0.1,0.2").unwrap(), (0.5, vec![0.1, 0.2]));
        assert!(parse_probe("0.5").is_err());
    }

    #[test]
    fn residual_grid_points() {
        let g = ResidualGrid { t: vec![0.5], x: vec![1.0], y: vec![vec![1.0, 2.0], vec![3.0, 4.0, 5.0]] };
        let pts = g.y_points();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0], vec![1.0, 3.0]);
        assert_eq!(pts[5], vec![2.0, 5.0]);
    }

    #[test]
    fn error_classification() {
        assert_eq!(CliError::from(AffineError::BlowUp { time: 0.5, component: 0 }).exit_code(), 2);
        assert_eq!(CliError::from(AffineError::Horizon(-1.0)).exit_code(), 1);
        let cond = SpectralError::Conditioning { condition: 1e13, limit: 1e12 };
        assert_eq!(CliError::from(cond).exit_code(), 2);
    }
}
