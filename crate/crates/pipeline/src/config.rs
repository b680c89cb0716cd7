//! Plain-text `key = value` configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ember_core::emulator::{EmulatorConfig, Mode};
use ember_core::losses::{Base, LossWeights, Norm, TermFlags};
use ember_core::sim::{IgnitionKind, DEFAULT_MOISTURE};

use crate::error::{self, PipelineError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub out: PathBuf,
    pub mode: Mode,
    pub rows: usize,
    pub cols: usize,
    pub steps: usize,
    pub epochs: usize,
    pub lr: f64,
    pub hidden: usize,
    pub layers: usize,
    pub kernel: usize,
    pub patterns: Vec<IgnitionKind>,
    pub speeds: Vec<f64>,
    pub directions: Vec<f64>,
    pub train_fraction: f64,
    pub source_speed: f64,
    pub source_direction: f64,
    pub initial_moisture: f64,
    /// Physics terms for the physics-guided modes; ignored in CL mode.
    pub loss: LossWeights,
    pub timing_reps: usize,
    pub port: u16,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            seed: 7,
            out: PathBuf::from("work"),
            mode: Mode::PgclPlus,
            rows: 32,
            cols: 32,
            steps: 20,
            epochs: 40,
            lr: 0.001,
            hidden: 4,
            layers: 4,
            kernel: 3,
            patterns: IgnitionKind::ALL.to_vec(),
            speeds: vec![1.0, 4.0, 8.0],
            directions: vec![230.0, 270.0, 310.0, 330.0],
            train_fraction: 0.5,
            source_speed: 1.0,
            source_direction: 230.0,
            initial_moisture: DEFAULT_MOISTURE,
            loss: LossWeights::default(),
            timing_reps: 10,
            port: 8080,
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub mode: Option<Mode>,
    pub grid: Option<(usize, usize)>,
    pub steps: Option<usize>,
    pub epochs: Option<usize>,
    pub port: Option<u16>,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| PipelineError::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(PipelineError::Config(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

/// Parses `MxP`.
pub fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let (m, p) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| PipelineError::Config(format!("grid must look like 32x32, got `{s}`")))?;
    Ok((parse("grid", m.trim())?, parse("grid", p.trim())?))
}

/// Parses a comma list of physics terms: `ft`, `ros`, `ba`, `fm` (ros and
/// ba), `burned`/`b`, `unburned`/`u`, or `all` / `none`.
pub fn parse_terms(s: &str) -> Result<TermFlags> {
    let mut f = TermFlags::NONE;
    for term in s.split(',').map(|t| t.trim().to_ascii_lowercase()) {
        match term.as_str() {
            "" | "none" => {}
            "all" => f = TermFlags::ALL,
            "ft" => f.ft = true,
            "ros" => f.ros = true,
            "ba" => f.ba = true,
            "fm" => {
                f.ros = true;
                f.ba = true;
            }
            "b" | "burned" => f.burned = true,
            "u" | "unburned" => f.unburned = true,
            other => return Err(PipelineError::Config(format!("unknown loss term `{other}`"))),
        }
    }
    Ok(f)
}

pub fn terms_text(f: TermFlags) -> String {
    let names = [
        (f.ft, "ft"),
        (f.ros, "ros"),
        (f.ba, "ba"),
        (f.burned, "burned"),
        (f.unburned, "unburned"),
    ];
    let on: Vec<&str> = names.iter().filter(|(b, _)| *b).map(|(_, n)| *n).collect();
    if on.is_empty() {
        "none".into()
    } else {
        on.join(",")
    }
}

impl Settings {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut s = Settings::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                PipelineError::Config(format!("line {}: expected `key = value`, got `{raw}`", n + 1))
            })?;
            s.set(key.trim(), value.trim())?;
        }
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&error::read_to_string(path)?).map_err(|e| match e {
            PipelineError::Config(msg) => PipelineError::Format {
                path: path.to_path_buf(),
                msg,
            },
            other => other,
        })
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "mode" => self.mode = v.parse()?,
            "grid" => (self.rows, self.cols) = parse_grid(v)?,
            "steps" => self.steps = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "kernel" => self.kernel = parse(key, v)?,
            "patterns" => {
                self.patterns = v
                    .split(',')
                    .map(str::trim)
                    .filter(|p| !p.is_empty())
                    .map(|p| p.parse::<IgnitionKind>().map_err(PipelineError::from))
                    .collect::<Result<_>>()?
            }
            "speeds" => self.speeds = parse_list(key, v)?,
            "directions" => self.directions = parse_list(key, v)?,
            "train_fraction" => self.train_fraction = parse(key, v)?,
            "source_speed" => self.source_speed = parse(key, v)?,
            "source_direction" => self.source_direction = parse(key, v)?,
            "initial_moisture" => self.initial_moisture = parse(key, v)?,
            "lambda_ft" => self.loss.lambda_ft = parse(key, v)?,
            "lambda_ros" => self.loss.lambda_ros = parse(key, v)?,
            "lambda_ba" => self.loss.lambda_ba = parse(key, v)?,
            "lambda_fm" => {
                let w = parse(key, v)?;
                self.loss.lambda_ros = w;
                self.loss.lambda_ba = w;
            }
            "lambda_burned" => self.loss.lambda_burned = parse(key, v)?,
            "lambda_unburned" => self.loss.lambda_unburned = parse(key, v)?,
            "eps" => self.loss.eps = parse(key, v)?,
            "eps_b" => self.loss.eps_b = parse(key, v)?,
            "eps_u" => self.loss.eps_u = parse(key, v)?,
            "terms" => self.loss.enabled = parse_terms(v)?,
            "norm" => {
                self.loss.style.norm = match v {
                    "squared" => Norm::Squared,
                    "absolute" => Norm::Absolute,
                    _ => return Err(PipelineError::Config(format!("`norm`: expected squared or absolute, got `{v}`"))),
                }
            }
            "per_cell" => self.loss.style.per_cell = parse_bool(key, v)?,
            "timing_reps" => self.timing_reps = parse(key, v)?,
            "port" => self.port = parse(key, v)?,
            _ => return Err(PipelineError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.out {
            self.out = v.clone();
        }
        if let Some(v) = o.mode {
            self.mode = v;
        }
        if let Some((r, c)) = o.grid {
            self.rows = r;
            self.cols = c;
        }
        if let Some(v) = o.steps {
            self.steps = v;
        }
        if let Some(v) = o.epochs {
            self.epochs = v;
        }
        if let Some(v) = o.port {
            self.port = v;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(PipelineError::Config(m));
        if self.rows == 0 || self.cols == 0 || self.steps == 0 {
            return fail(format!("grid {}x{} with {} steps is empty", self.rows, self.cols, self.steps));
        }
        if !(self.lr > 0.0) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0 < self.train_fraction && self.train_fraction < 1.0) {
            return fail(format!("train_fraction must be in (0, 1), got {}", self.train_fraction));
        }
        if self.timing_reps == 0 {
            return fail("timing_reps must be >= 1".into());
        }
        if self.speeds.iter().chain(&self.directions).any(|v| !v.is_finite()) {
            return fail("wind values must be finite".into());
        }
        self.loss.validate()?;
        Ok(())
    }

    pub fn emulator_config(&self) -> EmulatorConfig {
        EmulatorConfig {
            hidden: self.hidden,
            layers: self.layers,
            kernel: self.kernel,
            ..EmulatorConfig::default()
        }
    }

    /// Loss configuration for `mode`: CL trains on plain MSE, PGCL adds the
    /// configured physics terms, PGCL+ swaps the base for the mixture NLL.
    pub fn loss_for(&self, mode: Mode) -> LossWeights {
        match mode {
            Mode::Cl => LossWeights {
                enabled: TermFlags::NONE,
                base: Base::Mse,
                ..self.loss
            },
            Mode::Pgcl => LossWeights {
                base: Base::Mse,
                ..self.loss
            },
            Mode::PgclPlus => LossWeights {
                base: Base::MdnNll,
                ..self.loss
            },
        }
    }

    /// Round-trips through [`Settings::from_text`] (except `out`'s encoding).
    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let l = &self.loss;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("out", self.out.display().to_string());
        kv("mode", self.mode.to_string());
        kv("grid", format!("{}x{}", self.rows, self.cols));
        kv("steps", self.steps.to_string());
        kv("epochs", self.epochs.to_string());
        kv("lr", self.lr.to_string());
        kv("hidden", self.hidden.to_string());
        kv("layers", self.layers.to_string());
        kv("kernel", self.kernel.to_string());
        kv(
            "patterns",
            self.patterns.iter().map(|p| p.name()).collect::<Vec<_>>().join(","),
        );
        kv("speeds", list(&self.speeds));
        kv("directions", list(&self.directions));
        kv("train_fraction", self.train_fraction.to_string());
        kv("source_speed", self.source_speed.to_string());
        kv("source_direction", self.source_direction.to_string());
        kv("initial_moisture", self.initial_moisture.to_string());
        kv("lambda_ft", l.lambda_ft.to_string());
        kv("lambda_ros", l.lambda_ros.to_string());
        kv("lambda_ba", l.lambda_ba.to_string());
        kv("lambda_burned", l.lambda_burned.to_string());
        kv("lambda_unburned", l.lambda_unburned.to_string());
        kv("eps", l.eps.to_string());
        kv("eps_b", l.eps_b.to_string());
        kv("eps_u", l.eps_u.to_string());
        kv("terms", terms_text(l.enabled));
        kv(
            "norm",
            match l.style.norm {
                Norm::Squared => "squared".into(),
                Norm::Absolute => "absolute".into(),
            },
        );
        kv("per_cell", l.style.per_cell.to_string());
        kv("timing_reps", self.timing_reps.to_string());
        kv("port", self.port.to_string());
        s
    }
}
