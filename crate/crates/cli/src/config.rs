//! TOML experiment configuration.
//!
//! ```toml
//! [plant]
//! preset = "paper_iv_a"
//!
//! [history]
//! p = [2, 4, 8]
//!
//! [anneal]
//! window = "conventional"
//!
//! [run]
//! seed = 1
//! out = "out"
//! ```

use std::path::{Path, PathBuf};

use pglqg::annealing::{AcceptanceWindow, WindowMode};
use pglqg::{CostWeights, Mat, OffsetMode, PlantModel};
use serde::Deserialize;
use toml::Spanned;

use crate::CliError;

type Rows = Spanned<Vec<Vec<f64>>>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub plant: PlantSection,
    #[serde(default)]
    pub cost: CostSection,
    pub history: HistorySection,
    #[serde(default)]
    pub model_based: ModelBasedSection,
    #[serde(default)]
    pub model_free: ModelFreeSection,
    /// Present iff annealing supplies the initial controller when no `k0` is given.
    pub anneal: Option<AnnealSection>,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    pub preset: Option<Spanned<String>>,
    pub a: Option<Rows>,
    pub b: Option<Rows>,
    pub c: Option<Rows>,
    pub w: Option<Rows>,
    pub v: Option<Rows>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    /// Output weight; identity when unset.
    pub q: Option<Rows>,
    /// Input weight; identity when unset.
    pub r: Option<Rows>,
    #[serde(default)]
    pub offset: OffsetChoice,
}

#[derive(Debug, Default, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OffsetChoice {
    #[default]
    AsPrinted,
    FilterError,
}

impl From<OffsetChoice> for OffsetMode {
    fn from(c: OffsetChoice) -> Self {
        match c {
            OffsetChoice::AsPrinted => OffsetMode::AsPrinted,
            OffsetChoice::FilterError => OffsetMode::FilterError,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistorySection {
    pub p: Spanned<HistoryLengths>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum HistoryLengths {
    One(usize),
    Many(Vec<usize>),
}

impl HistoryLengths {
    pub fn to_vec(&self) -> Vec<usize> {
        match self {
            Self::One(p) => vec![*p],
            Self::Many(ps) => ps.clone(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelBasedSection {
    /// Initial controller file; any history length is re-expressed at each `p`.
    pub k0: Option<PathBuf>,
    pub eta: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Stop once the gap falls below this fraction of the initial gap.
    pub rel_gap_tol: Option<f64>,
    pub line_search: bool,
    pub log_every: usize,
}

impl Default for ModelBasedSection {
    fn default() -> Self {
        Self {
            k0: None,
            eta: 1.0,
            max_iter: 200_000,
            grad_tol: 1e-10,
            rel_gap_tol: Some(1e-6),
            line_search: true,
            log_every: 1,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelFreeSection {
    pub k0: Option<PathBuf>,
    pub n_s: usize,
    pub r: f64,
    pub eta: f64,
    pub sigma_r: Option<f64>,
    pub max_retries: usize,
}

impl Default for ModelFreeSection {
    fn default() -> Self {
        Self {
            k0: None,
            n_s: 1000,
            r: 0.1,
            eta: 5e-9,
            sigma_r: None,
            max_retries: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowPreset {
    Conventional,
    Printed,
    Custom,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowModeKey {
    Multiplicative,
    Absolute,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerSolver {
    ModelBased,
    ModelFree,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnealSection {
    /// History length of the annealed controller; the first requested `p` when unset.
    pub p: Option<usize>,
    pub gamma0: Option<f64>,
    pub window: WindowPreset,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub window_mode: WindowModeKey,
    pub max_outer: usize,
    pub bisection_steps: usize,
    pub gamma_tol: f64,
    pub inner: InnerSolver,
    /// Inner step size; 1 for the model-based solver and `model_free.eta` otherwise.
    pub inner_eta: Option<f64>,
    pub inner_max_iter: usize,
    /// Rollouts per cost evaluation with the model-free inner solver.
    pub n_eval: usize,
}

impl Default for AnnealSection {
    fn default() -> Self {
        Self {
            p: None,
            gamma0: None,
            window: WindowPreset::Conventional,
            c1: None,
            c2: None,
            window_mode: WindowModeKey::Multiplicative,
            max_outer: 50,
            bisection_steps: 30,
            gamma_tol: 1e-9,
            inner: InnerSolver::ModelBased,
            inner_eta: None,
            inner_max_iter: 100,
            n_eval: 20,
        }
    }
}

impl AnnealSection {
    pub fn acceptance_window(&self) -> Result<AcceptanceWindow, CliError> {
        let mode = match self.window_mode {
            WindowModeKey::Multiplicative => WindowMode::Multiplicative,
            WindowModeKey::Absolute => WindowMode::Absolute,
        };
        let base = match self.window {
            WindowPreset::Conventional => AcceptanceWindow::conventional(),
            WindowPreset::Printed => AcceptanceWindow::printed(),
            WindowPreset::Custom => match (self.c1, self.c2) {
                (Some(c1), Some(c2)) => AcceptanceWindow { c1, c2, mode },
                _ => {
                    return Err(CliError::Config(
                        "anneal.window = \"custom\" needs both anneal.c1 and anneal.c2".into(),
                    ))
                }
            },
        };
        AcceptanceWindow::new(self.c1.unwrap_or(base.c1), self.c2.unwrap_or(base.c2), mode)
            .map_err(|e| CliError::Config(format!("anneal window: {e}")))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub seed: u64,
    pub out: PathBuf,
    /// Rollout horizon `T`.
    pub horizon: usize,
    /// Model-free iterations `N`.
    pub iterations: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            horizon: 100,
            iterations: 200,
        }
    }
}

/// Parsed configuration with the plant and weights assembled.
#[derive(Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    /// Rank conditions are not checked here so `validate` can report them.
    pub plant: PlantModel,
    pub cost: CostWeights,
    pub ps: Vec<usize>,
    pub p_line: usize,
    pub base_dir: PathBuf,
    pub seed: u64,
    pub out: PathBuf,
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].matches('\n').count() + 1
}

fn matrix(src: &str, rows: &Rows, name: &str) -> Result<Mat, CliError> {
    let line = line_of(src, rows.span().start);
    let data = rows.get_ref();
    let ncols = data.first().map_or(0, Vec::len);
    if ncols == 0 {
        return Err(CliError::Config(format!("line {line}: matrix {name} is empty")));
    }
    if let Some(i) = data.iter().position(|r| r.len() != ncols) {
        return Err(CliError::Config(format!(
            "line {line}: matrix {name} row {i} has {} entries, expected {ncols}",
            data[i].len()
        )));
    }
    if data.iter().flatten().any(|x| !x.is_finite()) {
        return Err(CliError::Config(format!("line {line}: matrix {name} has a non-finite entry")));
    }
    Ok(Mat::from_row_iterator(data.len(), ncols, data.iter().flatten().copied()))
}

fn expect_shape(
    src: &str,
    rows: &Rows,
    m: &Mat,
    name: &str,
    shape: (usize, usize),
) -> Result<(), CliError> {
    if m.shape() != shape {
        return Err(CliError::Config(format!(
            "line {}: {name} is {}x{}, expected {}x{}",
            line_of(src, rows.span().start),
            m.nrows(),
            m.ncols(),
            shape.0,
            shape.1
        )));
    }
    Ok(())
}

fn required<'a>(rows: &'a Option<Rows>, name: &str) -> Result<&'a Rows, CliError> {
    rows.as_ref()
        .ok_or_else(|| CliError::Config(format!("plant.{name} is required without a preset")))
}

fn build_plant(src: &str, plant: &PlantSection) -> Result<PlantModel, CliError> {
    let explicit = [&plant.a, &plant.b, &plant.c, &plant.w, &plant.v];
    if let Some(preset) = &plant.preset {
        if explicit.iter().any(|m| m.is_some()) {
            return Err(CliError::Config(format!(
                "line {}: plant.preset cannot be combined with explicit matrices",
                line_of(src, preset.span().start)
            )));
        }
        return match preset.get_ref().as_str() {
            "paper_iv_a" => Ok(PlantModel::benchmark()),
            other => Err(CliError::Config(format!(
                "line {}: unknown plant preset {other:?} (known: \"paper_iv_a\")",
                line_of(src, preset.span().start)
            ))),
        };
    }
    let (ra, rb, rc, rw, rv) = (
        required(&plant.a, "a")?,
        required(&plant.b, "b")?,
        required(&plant.c, "c")?,
        required(&plant.w, "w")?,
        required(&plant.v, "v")?,
    );
    let a = matrix(src, ra, "a")?;
    let nx = a.nrows();
    expect_shape(src, ra, &a, "a", (nx, nx))?;
    let b = matrix(src, rb, "b")?;
    expect_shape(src, rb, &b, "b", (nx, b.ncols()))?;
    let c = matrix(src, rc, "c")?;
    expect_shape(src, rc, &c, "c", (c.nrows(), nx))?;
    let w = matrix(src, rw, "w")?;
    expect_shape(src, rw, &w, "w", (nx, nx))?;
    let v = matrix(src, rv, "v")?;
    expect_shape(src, rv, &v, "v", (c.nrows(), c.nrows()))?;
    PlantModel::new_unchecked_rank(a, b, c, w, v).map_err(|e| CliError::Config(format!("plant: {e}")))
}

fn build_cost(src: &str, cost: &CostSection, plant: &PlantModel) -> Result<CostWeights, CliError> {
    let (nu, ny) = (plant.nu(), plant.ny());
    let q = match &cost.q {
        Some(rows) => {
            let q = matrix(src, rows, "q")?;
            expect_shape(src, rows, &q, "q", (ny, ny))?;
            q
        }
        None => Mat::identity(ny, ny),
    };
    let r = match &cost.r {
        Some(rows) => {
            let r = matrix(src, rows, "r")?;
            expect_shape(src, rows, &r, "r", (nu, nu))?;
            r
        }
        None => Mat::identity(nu, nu),
    };
    CostWeights::new(q, r).map_err(|e| CliError::Config(format!("cost: {e}")))
}

impl Experiment {
    pub fn from_str(src: &str, base_dir: &Path) -> Result<Self, CliError> {
        let config: ExperimentConfig =
            toml::from_str(src).map_err(|e| CliError::Config(e.to_string()))?;
        let plant = build_plant(src, &config.plant)?;
        let cost = build_cost(src, &config.cost, &plant)?;
        let ps = config.history.p.get_ref().to_vec();
        let p_line = line_of(src, config.history.p.span().start);
        if ps.is_empty() {
            return Err(CliError::Config(format!("line {p_line}: history.p is empty")));
        }
        let seed = config.run.seed;
        let out = config.run.out.clone();
        Ok(Self {
            config,
            plant,
            cost,
            ps,
            p_line,
            base_dir: base_dir.to_path_buf(),
            seed,
            out,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let src = std::fs::read_to_string(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_str(&src, base).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Paths in the config are relative to the config file.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn offset_mode(&self) -> OffsetMode {
        self.config.cost.offset.into()
    }
}
