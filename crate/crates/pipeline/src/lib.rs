//! Dataset generation, training, evaluation, ablation and serving for the
//! fire-spread emulator.
//!
//! A work directory holds everything one pipeline produces:
//!
//! ```text
//! <out>/dataset/            manifest.txt, runs/*.embr, sources/*.embr
//! <out>/checkpoints/<mode>/ tensors, model.txt, settings.txt, train_log.txt
//! <out>/eval/<mode>/        metrics.txt, metrics.kv, timing.txt
//! <out>/eval/baselines/     metrics.txt, metrics.kv
//! <out>/ablation/           per-row checkpoints, ablation.txt, ablation.kv
//! ```

pub mod ablate;
pub mod config;
pub mod container;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod serve;
pub mod train;

use std::path::PathBuf;

use ember_core::emulator::Mode;
use ember_core::metrics::Thresholds;

use crate::config::Settings;
use crate::dataset::{dataset_dir, Dataset, DatasetManifest};
use crate::error::Result;
use crate::evaluate::EvalReport;
use crate::train::{checkpoint_dir, load_checkpoint, mode_slug, TrainOutcome};

pub use crate::error::PipelineError;

pub fn eval_dir(settings: &Settings, name: &str) -> PathBuf {
    settings.out.join("eval").join(name)
}

pub fn generate(settings: &Settings) -> Result<DatasetManifest> {
    dataset::generate_dataset(settings)
}

pub fn load_dataset(settings: &Settings) -> Result<Dataset> {
    Dataset::load(&dataset_dir(&settings.out))
}

/// Trains `settings.mode` on the work directory's dataset.
pub fn train_mode(settings: &Settings) -> Result<TrainOutcome> {
    let data = load_dataset(settings)?;
    let mode = settings.mode;
    train::train(settings, &data, mode, &settings.loss_for(mode), &checkpoint_dir(&settings.out, mode))
}

/// Evaluates the `settings.mode` checkpoint plus both baselines on the
/// test split and writes the report.
pub fn evaluate_mode(settings: &Settings) -> Result<EvalReport> {
    let data = load_dataset(settings)?;
    let (model, meta) = load_checkpoint(&checkpoint_dir(&settings.out, settings.mode))?;
    evaluate::check_compatible(&meta, &data)?;
    let th = Thresholds::from(&settings.loss);
    let report = evaluate::evaluate(meta.mode.name(), &model, &data, &th, Some(settings.timing_reps))?;
    evaluate::write_report(&eval_dir(settings, mode_slug(meta.mode)), &report)?;
    Ok(report)
}

/// Scores only the retrieval baselines on the test split.
pub fn evaluate_baselines(settings: &Settings) -> Result<EvalReport> {
    let data = load_dataset(settings)?;
    let th = Thresholds::from(&settings.loss);
    let methods = evaluate::evaluate_baselines(&data, &data.manifest.test, &th)?;
    let subgroups = evaluate::subgroups(&data, &methods)?;
    let report = EvalReport {
        methods,
        subgroups,
        timing: None,
    };
    evaluate::write_report(&eval_dir(settings, "baselines"), &report)?;
    Ok(report)
}

pub fn run_ablation(settings: &Settings) -> Result<ablate::AblationTable> {
    let data = load_dataset(settings)?;
    let table = ablate::ablate(settings, &data)?;
    ablate::write_table(&ablate::ablation_dir(&settings.out), &table)?;
    Ok(table)
}

pub fn serve_state(settings: &Settings) -> Result<serve::ServeState> {
    let data = load_dataset(settings)?;
    let (model, meta) = load_checkpoint(&checkpoint_dir(&settings.out, settings.mode))?;
    evaluate::check_compatible(&meta, &data)?;
    Ok(serve::ServeState {
        model,
        data,
        eps_b: settings.loss.eps_b,
    })
}

/// Mode names accepted on the command line.
pub fn parse_mode(s: &str) -> std::result::Result<Mode, String> {
    s.parse::<Mode>().map_err(|e| e.to_string())
}
