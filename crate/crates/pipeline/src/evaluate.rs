//! Test-split evaluation of a model and of the retrieval baselines, with
//! subgroup tables by pattern, wind speed and wind direction.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use ember_core::baselines::{match_ignition, match_wind, HistoricalLibrary};
use ember_core::emulator::EmulatorModel;
use ember_core::metrics::{timing_report, MetricsReport, Thresholds, TimingStats};
use ember_core::sim::FuelFieldSequence;

use crate::dataset::Dataset;
use crate::error::{self, PipelineError, Result};
use crate::train::CheckpointMeta;

pub const METRICS_TXT: &str = "metrics.txt";
pub const METRICS_KV: &str = "metrics.kv";
pub const TIMING_TXT: &str = "timing.txt";

pub const MATCH_IGNITION: &str = "match_ignition";
pub const MATCH_WIND: &str = "match_wind";

#[derive(Debug, Clone, PartialEq)]
pub struct RunEval {
    pub id: usize,
    pub report: MetricsReport,
}

/// Per-run results for one prediction method.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodEval {
    pub name: String,
    pub runs: Vec<RunEval>,
    pub mean: MetricsReport,
}

impl MethodEval {
    fn new(name: &str, runs: Vec<RunEval>) -> Self {
        let reports: Vec<MetricsReport> = runs.iter().map(|r| r.report).collect();
        Self {
            name: name.to_string(),
            mean: MetricsReport::mean(&reports),
            runs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subgroup {
    pub method: String,
    pub axis: &'static str,
    pub value: String,
    pub runs: usize,
    pub mean: MetricsReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub methods: Vec<MethodEval>,
    pub subgroups: Vec<Subgroup>,
    pub timing: Option<TimingStats>,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodEval> {
        self.methods.iter().find(|m| m.name == name)
    }
}

/// Rejects a checkpoint whose grid or channels differ from the dataset.
pub fn check_compatible(meta: &CheckpointMeta, data: &Dataset) -> Result<()> {
    let m = &data.manifest;
    if (meta.rows, meta.cols, meta.steps) != (m.rows, m.cols, m.steps) {
        return Err(PipelineError::Config(format!(
            "checkpoint was trained on {}x{} grids with {} steps, dataset has {}x{} with {}",
            meta.rows, meta.cols, meta.steps, m.rows, m.cols, m.steps
        )));
    }
    if meta.config.in_channels != crate::dataset::CHANNELS {
        return Err(PipelineError::Config(format!(
            "checkpoint expects {} input channels, dataset provides {}",
            meta.config.in_channels,
            crate::dataset::CHANNELS
        )));
    }
    Ok(())
}

fn score(data: &Dataset, id: usize, yhat: &[f64], th: &Thresholds) -> Result<RunEval> {
    let y = data.sequence(id)?;
    let shape = [y.steps, y.rows, y.cols];
    Ok(RunEval {
        id,
        report: MetricsReport::compute(&y.values, yhat, &shape, th)?,
    })
}

/// Scores the model on `ids`; with `timing_reps`, also times inference
/// over every run and repetition.
pub fn evaluate_model(
    name: &str,
    model: &EmulatorModel,
    data: &Dataset,
    ids: &[usize],
    th: &Thresholds,
    timing_reps: Option<usize>,
) -> Result<(MethodEval, Option<TimingStats>)> {
    if ids.is_empty() {
        return Err(PipelineError::Config("evaluation split is empty".into()));
    }
    let mut runs = Vec::with_capacity(ids.len());
    let mut samples: Vec<TimingStats> = Vec::new();
    for &id in ids {
        let x = data.inputs(id)?;
        let yhat = model.predict(&x)?;
        runs.push(score(data, id, yhat.data(), th)?);
        if let Some(reps) = timing_reps {
            samples.push(timing_report(|| model.predict(&x), reps)?);
        }
    }
    let timing = (!samples.is_empty()).then(|| TimingStats {
        min: samples.iter().map(|t| t.min).fold(f64::INFINITY, f64::min),
        mean: samples.iter().map(|t| t.mean).sum::<f64>() / samples.len() as f64,
        max: samples.iter().map(|t| t.max).fold(0.0, f64::max),
    });
    Ok((MethodEval::new(name, runs), timing))
}

/// The training split as a retrieval library.
pub fn training_library(data: &Dataset) -> Result<HistoricalLibrary> {
    let m = &data.manifest;
    let mut lib = HistoricalLibrary::new();
    for &id in &m.train {
        lib.push(m.run_scenario(m.run(id)?)?, data.sequence(id)?.clone())?;
    }
    Ok(lib)
}

/// Scores both retrieval baselines on `ids`.
pub fn evaluate_baselines(data: &Dataset, ids: &[usize], th: &Thresholds) -> Result<Vec<MethodEval>> {
    let lib = training_library(data)?;
    let m = &data.manifest;
    let mut by_ignition = Vec::with_capacity(ids.len());
    let mut by_wind = Vec::with_capacity(ids.len());
    for &id in ids {
        let q = m.run_scenario(m.run(id)?)?;
        let pick: &FuelFieldSequence = match_ignition(&q, &lib)?.sequence;
        by_ignition.push(score(data, id, &pick.values, th)?);
        let pick = match_wind(&q, &lib)?.sequence;
        by_wind.push(score(data, id, &pick.values, th)?);
    }
    Ok(vec![
        MethodEval::new(MATCH_IGNITION, by_ignition),
        MethodEval::new(MATCH_WIND, by_wind),
    ])
}

/// Mean metrics per method over runs sharing a pattern, speed or direction.
pub fn subgroups(data: &Dataset, methods: &[MethodEval]) -> Result<Vec<Subgroup>> {
    let mut out = Vec::new();
    for method in methods {
        for axis in ["pattern", "speed", "direction"] {
            let mut groups: BTreeMap<String, Vec<MetricsReport>> = BTreeMap::new();
            for r in &method.runs {
                let rec = data.manifest.run(r.id)?;
                let key = match axis {
                    "pattern" => rec.pattern.to_string(),
                    "speed" => rec.wind_speed.to_string(),
                    _ => rec.wind_direction.to_string(),
                };
                groups.entry(key).or_default().push(r.report);
            }
            for (value, reports) in groups {
                out.push(Subgroup {
                    method: method.name.clone(),
                    axis,
                    value,
                    runs: reports.len(),
                    mean: MetricsReport::mean(&reports),
                });
            }
        }
    }
    Ok(out)
}

/// Model plus baselines on the test split.
pub fn evaluate(
    name: &str,
    model: &EmulatorModel,
    data: &Dataset,
    th: &Thresholds,
    timing_reps: Option<usize>,
) -> Result<EvalReport> {
    let ids = data.manifest.test.clone();
    let (model_eval, timing) = evaluate_model(name, model, data, &ids, th, timing_reps)?;
    let mut methods = vec![model_eval];
    methods.extend(evaluate_baselines(data, &ids, th)?);
    let subgroups = subgroups(data, &methods)?;
    Ok(EvalReport {
        methods,
        subgroups,
        timing,
    })
}

const COLUMNS: [&str; 10] = [
    "mse", "burned", "unburned", "fire", "dmse", "ft%", "burned%", "unburned%", "fp%", "fn%",
];

fn table_row(s: &mut String, label: &str, r: &MetricsReport) {
    let _ = write!(s, "{label:<28}");
    for (_, v) in r.fields().into_iter().take(COLUMNS.len()) {
        let _ = write!(s, " {v:>10.5}");
    }
    s.push('\n');
}

fn table_header(s: &mut String, first: &str) {
    let _ = write!(s, "{first:<28}");
    for c in COLUMNS {
        let _ = write!(s, " {c:>10}");
    }
    s.push('\n');
}

pub fn report_text(report: &EvalReport) -> String {
    let mut s = String::new();
    s.push_str("Test set performance\n");
    table_header(&mut s, "method");
    for m in &report.methods {
        table_row(&mut s, &m.name, &m.mean);
    }
    for axis in ["pattern", "speed", "direction"] {
        let _ = writeln!(s, "\nBy {axis}");
        table_header(&mut s, "method / group");
        for g in report.subgroups.iter().filter(|g| g.axis == axis) {
            table_row(&mut s, &format!("{} {}={}", g.method, axis, g.value), &g.mean);
        }
    }
    s
}

/// `key=value` lines; timing is left out so reruns compare equal.
pub fn report_kv(report: &EvalReport) -> String {
    let mut s = String::new();
    for m in &report.methods {
        for (k, v) in m.mean.fields() {
            let _ = writeln!(s, "{}.{k}={v}", m.name);
        }
    }
    for m in &report.methods {
        for r in &m.runs {
            for (k, v) in r.report.fields() {
                let _ = writeln!(s, "{}.run{}.{k}={v}", m.name, r.id);
            }
        }
    }
    for g in &report.subgroups {
        for (k, v) in g.mean.fields() {
            let _ = writeln!(s, "{}.{}.{}.{k}={v}", g.method, g.axis, g.value);
        }
    }
    s
}

pub fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    error::write(&dir.join(METRICS_TXT), report_text(report))?;
    error::write(&dir.join(METRICS_KV), report_kv(report))?;
    if let Some(t) = report.timing {
        error::write(
            &dir.join(TIMING_TXT),
            format!("time_min_s={}\ntime_mean_s={}\ntime_max_s={}\n", t.min, t.mean, t.max),
        )?;
    }
    Ok(())
}
