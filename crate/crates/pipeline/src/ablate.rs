//! One-at-a-time physics-term ablation.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ember_core::emulator::Mode;
use ember_core::losses::TermFlags;
use ember_core::metrics::{MetricsReport, Thresholds};

use crate::config::{parse_terms, Settings};
use crate::dataset::Dataset;
use crate::error::{self, Result};
use crate::evaluate::evaluate_model;
use crate::train::train;

/// Row label and the single term it enables.
pub const ABLATIONS: [(&str, &str); 4] = [("FT", "ft"), ("B", "burned"), ("U", "unburned"), ("FM", "fm")];

/// Label of the run without any physics term.
pub const REFERENCE: &str = "none";

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub terms: TermFlags,
    pub mean: MetricsReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub reference: AblationRow,
    pub rows: Vec<AblationRow>,
}

pub fn ablation_dir(out: &Path) -> PathBuf {
    out.join("ablation")
}

fn run_one(settings: &Settings, data: &Dataset, name: &str, terms: TermFlags) -> Result<AblationRow> {
    let mut loss = settings.loss_for(Mode::Pgcl);
    loss.enabled = terms;
    let dir = ablation_dir(&settings.out).join(name.to_ascii_lowercase());
    let outcome = train(settings, data, Mode::Pgcl, &loss, &dir)?;
    let th = Thresholds::from(&loss);
    let (eval, _) = evaluate_model(name, &outcome.model, data, &data.manifest.test, &th, None)?;
    Ok(AblationRow {
        name: name.to_string(),
        terms,
        mean: eval.mean,
    })
}

/// Retrains with the shared seed once without constraints and once per
/// ablation row, and scores each on the test split.
pub fn ablate(settings: &Settings, data: &Dataset) -> Result<AblationTable> {
    let reference = run_one(settings, data, REFERENCE, TermFlags::NONE)?;
    let mut rows = Vec::with_capacity(ABLATIONS.len());
    for (name, terms) in ABLATIONS {
        rows.push(run_one(settings, data, name, parse_terms(terms)?)?);
    }
    Ok(AblationTable { reference, rows })
}

pub fn table_text(t: &AblationTable) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<6} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "terms", "mse", "ft%", "burned%", "unburned%", "fire"
    );
    let row = |s: &mut String, r: &AblationRow| {
        let m = &r.mean;
        let _ = writeln!(
            s,
            "{:<6} {:>10.5} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            r.name, m.mse, m.metric_ft, m.metric_burned, m.metric_unburned, m.fire_metrics_mse
        );
    };
    for r in &t.rows {
        row(&mut s, r);
    }
    let _ = writeln!(s, "reference:");
    row(&mut s, &t.reference);
    s
}

pub fn table_kv(t: &AblationTable) -> String {
    let mut s = String::new();
    for r in std::iter::once(&t.reference).chain(&t.rows) {
        for (k, v) in r.mean.fields() {
            let _ = writeln!(s, "{}.{k}={v}", r.name);
        }
    }
    s
}

pub fn write_table(dir: &Path, t: &AblationTable) -> Result<()> {
    error::write(&dir.join("ablation.txt"), table_text(t))?;
    error::write(&dir.join("ablation.kv"), table_kv(t))
}
