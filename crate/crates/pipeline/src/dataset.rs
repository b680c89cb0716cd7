//! Synthetic dataset: simulator sweeps, manifest, split, wind scaling and
//! model-input assembly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ember_core::sim::{simulate, FuelFieldSequence, IgnitionKind, ScenarioConfig};
use ember_core::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::Settings;
use crate::container;
use crate::error::{self, PipelineError, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Input channel order.
pub const CH_SPEED: usize = 0;
pub const CH_DIRECTION: usize = 1;
pub const CH_IGNITION: usize = 2;
pub const CH_SOURCE: usize = 3;
pub const CHANNELS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub id: usize,
    pub pattern: IgnitionKind,
    pub wind_speed: f64,
    pub wind_direction: f64,
    pub seed: u64,
    /// Relative to the dataset root.
    pub file: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceRecord {
    pub pattern: IgnitionKind,
    pub seed: u64,
    pub file: PathBuf,
}

/// Min-max bounds for the two wind channels, from training runs only.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scaling {
    pub speed_min: f64,
    pub speed_max: f64,
    pub direction_min: f64,
    pub direction_max: f64,
}

impl Scaling {
    pub fn from_runs<'a>(runs: impl IntoIterator<Item = &'a RunRecord>) -> Self {
        let mut s = Scaling {
            speed_min: f64::INFINITY,
            speed_max: f64::NEG_INFINITY,
            direction_min: f64::INFINITY,
            direction_max: f64::NEG_INFINITY,
        };
        let mut any = false;
        for r in runs {
            any = true;
            s.speed_min = s.speed_min.min(r.wind_speed);
            s.speed_max = s.speed_max.max(r.wind_speed);
            s.direction_min = s.direction_min.min(r.wind_direction);
            s.direction_max = s.direction_max.max(r.wind_direction);
        }
        if any {
            s
        } else {
            Scaling {
                speed_min: 0.0,
                speed_max: 0.0,
                direction_min: 0.0,
                direction_max: 0.0,
            }
        }
    }

    pub fn speed(&self, v: f64) -> f64 {
        min_max("wind speed", v, self.speed_min, self.speed_max)
    }

    pub fn direction(&self, v: f64) -> f64 {
        min_max("wind direction", v, self.direction_min, self.direction_max)
    }
}

/// `(v - lo) / (hi - lo)` clamped to `[0, 1]`; 0 when the range is empty.
fn min_max(what: &str, v: f64, lo: f64, hi: f64) -> f64 {
    if !(hi > lo) {
        return 0.0;
    }
    if v < lo || v > hi {
        log::warn!("{what} {v} outside training range [{lo}, {hi}], clamped");
    }
    ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub rows: usize,
    pub cols: usize,
    pub steps: usize,
    /// Seed of the ignition layouts, shared by every run of a pattern.
    pub layout_seed: u64,
    pub initial_moisture: f64,
    pub runs: Vec<RunRecord>,
    pub sources: Vec<SourceRecord>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub scaling: Scaling,
    /// `(speed, direction)` of the source-domain runs.
    pub source_setting: (f64, f64),
}

impl DatasetManifest {
    pub fn run(&self, id: usize) -> Result<&RunRecord> {
        self.runs
            .iter()
            .find(|r| r.id == id)
            .ok_or_else(|| PipelineError::Config(format!("no run with id {id}")))
    }

    /// Scenario of any pattern and wind on this dataset's grid.
    pub fn scenario(&self, pattern: IgnitionKind, speed: f64, direction: f64, seed: u64) -> Result<ScenarioConfig> {
        let mut c = ScenarioConfig::new(pattern, self.rows, self.cols, self.steps, speed, direction, self.layout_seed)?;
        c.seed = seed;
        c.initial_moisture = self.initial_moisture;
        c.validate()?;
        Ok(c)
    }

    pub fn run_scenario(&self, run: &RunRecord) -> Result<ScenarioConfig> {
        self.scenario(run.pattern, run.wind_speed, run.wind_direction, run.seed)
    }

    pub fn to_text(&self) -> String {
        let ids = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let sc = &self.scaling;
        let mut s = String::new();
        let _ = writeln!(s, "rows = {}", self.rows);
        let _ = writeln!(s, "cols = {}", self.cols);
        let _ = writeln!(s, "steps = {}", self.steps);
        let _ = writeln!(s, "layout_seed = {}", self.layout_seed);
        let _ = writeln!(s, "initial_moisture = {}", self.initial_moisture);
        let _ = writeln!(s, "source_setting = {},{}", self.source_setting.0, self.source_setting.1);
        let _ = writeln!(
            s,
            "scaling = {},{},{},{}",
            sc.speed_min, sc.speed_max, sc.direction_min, sc.direction_max
        );
        let _ = writeln!(s, "train = {}", ids(&self.train));
        let _ = writeln!(s, "test = {}", ids(&self.test));
        for r in &self.runs {
            let _ = writeln!(
                s,
                "run = {} {} {} {} {} {}",
                r.id,
                r.pattern,
                r.wind_speed,
                r.wind_direction,
                r.seed,
                r.file.display()
            );
        }
        for src in &self.sources {
            let _ = writeln!(s, "source = {} {} {}", src.pattern, src.seed, src.file.display());
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| PipelineError::Config(m);
        let num = |k: &str, v: &str| -> Result<f64> { v.trim().parse().map_err(|_| bad(format!("`{k}`: bad number `{v}`"))) };
        let int = |k: &str, v: &str| -> Result<u64> { v.trim().parse().map_err(|_| bad(format!("`{k}`: bad integer `{v}`"))) };
        let mut m = DatasetManifest {
            rows: 0,
            cols: 0,
            steps: 0,
            layout_seed: 0,
            initial_moisture: ember_core::sim::DEFAULT_MOISTURE,
            runs: Vec::new(),
            sources: Vec::new(),
            train: Vec::new(),
            test: Vec::new(),
            scaling: Scaling::from_runs([]),
            source_setting: (1.0, 230.0),
        };
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("manifest line `{line}` is not `key = value`")))?;
            let (k, v) = (k.trim(), v.trim());
            let fields: Vec<&str> = v.split_whitespace().collect();
            let csv: Vec<&str> = v.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            match k {
                "rows" => m.rows = int(k, v)? as usize,
                "cols" => m.cols = int(k, v)? as usize,
                "steps" => m.steps = int(k, v)? as usize,
                "layout_seed" => m.layout_seed = int(k, v)?,
                "initial_moisture" => m.initial_moisture = num(k, v)?,
                "source_setting" if csv.len() == 2 => m.source_setting = (num(k, csv[0])?, num(k, csv[1])?),
                "scaling" if csv.len() == 4 => {
                    m.scaling = Scaling {
                        speed_min: num(k, csv[0])?,
                        speed_max: num(k, csv[1])?,
                        direction_min: num(k, csv[2])?,
                        direction_max: num(k, csv[3])?,
                    }
                }
                "train" => m.train = csv.iter().map(|x| int(k, x).map(|i| i as usize)).collect::<Result<_>>()?,
                "test" => m.test = csv.iter().map(|x| int(k, x).map(|i| i as usize)).collect::<Result<_>>()?,
                "run" if fields.len() == 6 => m.runs.push(RunRecord {
                    id: int(k, fields[0])? as usize,
                    pattern: fields[1].parse()?,
                    wind_speed: num(k, fields[2])?,
                    wind_direction: num(k, fields[3])?,
                    seed: int(k, fields[4])?,
                    file: PathBuf::from(fields[5]),
                }),
                "source" if fields.len() == 3 => m.sources.push(SourceRecord {
                    pattern: fields[0].parse()?,
                    seed: int(k, fields[1])?,
                    file: PathBuf::from(fields[2]),
                }),
                _ => return Err(bad(format!("unrecognized manifest line `{line}`"))),
            }
        }
        if m.train.iter().any(|id| m.test.contains(id)) {
            return Err(bad("train and test splits overlap".into()));
        }
        Ok(m)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        error::write(&root.join(MANIFEST_FILE), self.to_text())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        Self::from_text(&error::read_to_string(&path)?).map_err(|e| match e {
            PipelineError::Config(msg) => PipelineError::Format { path, msg },
            other => other,
        })
    }
}

/// Directory holding the dataset under a work directory.
pub fn dataset_dir(out: &Path) -> PathBuf {
    out.join("dataset")
}

/// Seeded shuffle of run ids; the first `round(fraction * n)` train.
pub fn split_runs(ids: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order = ids.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5011);
    order.shuffle(&mut rng);
    let n_train = ((fraction * ids.len() as f64).round() as usize).min(ids.len());
    let mut train = order[..n_train].to_vec();
    let mut test = order[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn sequence_tensor(seq: &FuelFieldSequence) -> Result<Tensor> {
    Ok(Tensor::new(&[seq.steps, seq.rows, seq.cols], seq.values.clone())?)
}

fn tensor_sequence(t: Tensor, path: &Path) -> Result<FuelFieldSequence> {
    let &[steps, rows, cols] = t.shape() else {
        return Err(PipelineError::Format {
            path: path.to_path_buf(),
            msg: format!("expected a [T, M, P] sequence, got {:?}", t.shape()),
        });
    };
    Ok(FuelFieldSequence::new(steps, rows, cols, t.into_data())?)
}

pub fn save_sequence(path: &Path, seq: &FuelFieldSequence) -> Result<()> {
    container::save(path, &sequence_tensor(seq)?)
}

pub fn load_sequence(path: &Path) -> Result<FuelFieldSequence> {
    tensor_sequence(container::load(path)?, path)
}

/// Runs the sweep, writes one container per run plus one source-domain run
/// per pattern, then the manifest. An empty sweep writes nothing.
pub fn generate_dataset(settings: &Settings) -> Result<DatasetManifest> {
    let root = dataset_dir(&settings.out);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut runs = Vec::new();
    for &pattern in &settings.patterns {
        for &speed in &settings.speeds {
            for &direction in &settings.directions {
                let id = runs.len();
                runs.push(RunRecord {
                    id,
                    pattern,
                    wind_speed: speed,
                    wind_direction: direction,
                    seed: rng.next_u64(),
                    file: PathBuf::from(format!("runs/run_{id:04}.embr")),
                });
            }
        }
    }
    let sources: Vec<SourceRecord> = if runs.is_empty() {
        Vec::new()
    } else {
        let mut kinds = settings.patterns.clone();
        kinds.sort_unstable();
        kinds.dedup();
        kinds
            .into_iter()
            .map(|pattern| SourceRecord {
                pattern,
                seed: rng.next_u64(),
                file: PathBuf::from(format!("sources/{pattern}.embr")),
            })
            .collect()
    };
    let ids: Vec<usize> = runs.iter().map(|r| r.id).collect();
    let (train, test) = split_runs(&ids, settings.train_fraction, settings.seed);
    let scaling = Scaling::from_runs(runs.iter().filter(|r| train.contains(&r.id)));
    let manifest = DatasetManifest {
        rows: settings.rows,
        cols: settings.cols,
        steps: settings.steps,
        layout_seed: settings.seed,
        initial_moisture: settings.initial_moisture,
        runs,
        sources,
        train,
        test,
        scaling,
        source_setting: (settings.source_speed, settings.source_direction),
    };
    if manifest.runs.is_empty() {
        return Ok(manifest);
    }

    let mut jobs: Vec<(ScenarioConfig, PathBuf)> = Vec::new();
    for r in &manifest.runs {
        jobs.push((manifest.run_scenario(r)?, root.join(&r.file)));
    }
    let (ss, sd) = manifest.source_setting;
    for s in &manifest.sources {
        jobs.push((manifest.scenario(s.pattern, ss, sd, s.seed)?, root.join(&s.file)));
    }
    jobs.par_iter().try_for_each(|(cfg, path)| save_sequence(path, &simulate(cfg)?))?;
    manifest.save(&root)?;
    Ok(manifest)
}

/// Model input `[T, M, P, 4]`: scaled wind speed, scaled wind direction,
/// cumulative ignition indicator and the unscaled source-domain fuel.
pub fn assemble_channels(
    scenario: &ScenarioConfig,
    scaling: &Scaling,
    sources: &BTreeMap<IgnitionKind, FuelFieldSequence>,
) -> Result<Tensor> {
    let kind = scenario.ignition.kind;
    let source = sources.get(&kind).ok_or_else(|| {
        PipelineError::Config(format!("no source-domain run for ignition pattern `{kind}`"))
    })?;
    let (t_n, rows, cols) = (scenario.steps, scenario.rows, scenario.cols);
    if source.dims() != (t_n, rows, cols) {
        return Err(PipelineError::Config(format!(
            "source run for `{kind}` has dims {:?}, scenario needs {:?}",
            source.dims(),
            (t_n, rows, cols)
        )));
    }
    let speed = scaling.speed(scenario.wind_speed);
    let direction = scaling.direction(scenario.wind_direction);
    let n = rows * cols;
    let mut data = vec![0.0; t_n * n * CHANNELS];
    for t in 0..t_n {
        let lit = scenario.ignition.mask_until(rows, cols, t);
        let src = source.frame(t);
        for i in 0..n {
            let px = &mut data[(t * n + i) * CHANNELS..(t * n + i + 1) * CHANNELS];
            px[CH_SPEED] = speed;
            px[CH_DIRECTION] = direction;
            px[CH_IGNITION] = f64::from(u8::from(lit[i]));
            px[CH_SOURCE] = src[i];
        }
    }
    Ok(Tensor::new(&[t_n, rows, cols, CHANNELS], data)?)
}

/// A manifest with every sequence loaded.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub sequences: BTreeMap<usize, FuelFieldSequence>,
    pub sources: BTreeMap<IgnitionKind, FuelFieldSequence>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let manifest = DatasetManifest::load(root)?;
        let mut sequences = BTreeMap::new();
        for r in &manifest.runs {
            sequences.insert(r.id, load_sequence(&root.join(&r.file))?);
        }
        let mut sources = BTreeMap::new();
        for s in &manifest.sources {
            sources.insert(s.pattern, load_sequence(&root.join(&s.file))?);
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            sequences,
            sources,
        })
    }

    pub fn sequence(&self, id: usize) -> Result<&FuelFieldSequence> {
        self.sequences
            .get(&id)
            .ok_or_else(|| PipelineError::Config(format!("no sequence for run {id}")))
    }

    pub fn inputs(&self, id: usize) -> Result<Tensor> {
        let scenario = self.manifest.run_scenario(self.manifest.run(id)?)?;
        assemble_channels(&scenario, &self.manifest.scaling, &self.sources)
    }

    pub fn target(&self, id: usize) -> Result<Tensor> {
        sequence_tensor(self.sequence(id)?)
    }
}
