//! Training loop and checkpoints.
//!
//! One run per step: forward the sequence, score it with the mode's loss,
//! back-propagate and take an Adam step. Run order within an epoch is a
//! seeded shuffle.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ember_core::emulator::{burned_counts, poisson_head, EmulatorConfig, EmulatorModel, Mode, Phase};
use ember_core::losses::{total_loss, LossBreakdown, LossWeights, Prediction};
use ember_core::tensor::{Adam, Graph, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Settings;
use crate::container;
use crate::dataset::{Dataset, CHANNELS};
use crate::error::{self, PipelineError, Result};

pub const MODEL_FILE: &str = "model.txt";
pub const SETTINGS_FILE: &str = "settings.txt";
pub const LOG_FILE: &str = "train_log.txt";

/// Filesystem-friendly mode name.
pub fn mode_slug(mode: Mode) -> &'static str {
    match mode {
        Mode::Cl => "cl",
        Mode::Pgcl => "pgcl",
        Mode::PgclPlus => "pgcl_plus",
    }
}

pub fn checkpoint_dir(out: &Path, mode: Mode) -> PathBuf {
    out.join("checkpoints").join(mode_slug(mode))
}

/// Mean per-step loss terms over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: EmulatorModel,
    pub epochs: Vec<EpochLog>,
    /// Every step's loss breakdown, in order.
    pub steps: Vec<LossBreakdown>,
    pub prior_rate: Option<f64>,
    pub checkpoint: PathBuf,
}

/// What a checkpoint records besides the tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub mode: Mode,
    pub config: EmulatorConfig,
    pub rows: usize,
    pub cols: usize,
    pub steps: usize,
    pub prior_rate: Option<f64>,
}

fn tensor_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.embr"))
}

pub fn save_checkpoint(
    dir: &Path,
    model: &EmulatorModel,
    meta: &CheckpointMeta,
    settings: &Settings,
) -> Result<()> {
    for (name, t) in model.named_params() {
        let plain = Tensor::new(t.shape(), t.data().to_vec())?;
        container::save(&tensor_file(dir, &name), &plain)?;
    }
    for (l, bn) in model.norms.iter().enumerate() {
        for (suffix, rows) in [("mean", &bn.running_mean), ("var", &bn.running_var)] {
            let t = Tensor::new(&[rows.len(), bn.channels()], rows.concat())?;
            container::save(&tensor_file(dir, &format!("layer{l}.bn_running_{suffix}")), &t)?;
        }
    }
    let c = &meta.config;
    let mut s = String::new();
    let _ = writeln!(s, "mode = {}", meta.mode);
    let _ = writeln!(s, "in_channels = {}", c.in_channels);
    let _ = writeln!(s, "hidden = {}", c.hidden);
    let _ = writeln!(s, "layers = {}", c.layers);
    let _ = writeln!(s, "kernel = {}", c.kernel);
    let _ = writeln!(s, "components = {}", c.components);
    let _ = writeln!(s, "grid = {}x{}", meta.rows, meta.cols);
    let _ = writeln!(s, "steps = {}", meta.steps);
    if let Some(p) = meta.prior_rate {
        let _ = writeln!(s, "prior_rate = {p}");
    }
    error::write(&dir.join(MODEL_FILE), s)?;
    error::write(&dir.join(SETTINGS_FILE), settings.to_text())
}

fn parse_meta(text: &str, path: &Path) -> Result<CheckpointMeta> {
    let bad = |msg: String| PipelineError::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut config = EmulatorConfig::default();
    let (mut mode, mut rows, mut cols, mut steps, mut prior) = (None, 0, 0, 0, None);
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| bad(format!("bad line `{line}`")))?;
        let int = |v: &str| v.parse::<usize>().map_err(|_| bad(format!("`{k}`: bad integer `{v}`")));
        match k {
            "mode" => mode = Some(v.parse::<Mode>()?),
            "in_channels" => config.in_channels = int(v)?,
            "hidden" => config.hidden = int(v)?,
            "layers" => config.layers = int(v)?,
            "kernel" => config.kernel = int(v)?,
            "components" => config.components = int(v)?,
            "grid" => (rows, cols) = crate::config::parse_grid(v)?,
            "steps" => steps = int(v)?,
            "prior_rate" => prior = Some(v.parse::<f64>().map_err(|_| bad(format!("bad prior `{v}`")))?),
            _ => return Err(bad(format!("unknown key `{k}`"))),
        }
    }
    Ok(CheckpointMeta {
        mode: mode.ok_or_else(|| bad("missing mode".into()))?,
        config,
        rows,
        cols,
        steps,
        prior_rate: prior,
    })
}

pub fn load_checkpoint(dir: &Path) -> Result<(EmulatorModel, CheckpointMeta)> {
    let meta_path = dir.join(MODEL_FILE);
    let meta = parse_meta(&error::read_to_string(&meta_path)?, &meta_path)?;
    let mut model = EmulatorModel::new(meta.config.clone(), meta.mode, 0)?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    for (name, p) in names.iter().zip(model.params_mut()) {
        let path = tensor_file(dir, name);
        let t = container::load(&path)?;
        if t.shape() != p.shape() {
            return Err(PipelineError::Format {
                path,
                msg: format!("expected shape {:?}, found {:?}", p.shape(), t.shape()),
            });
        }
        p.data_mut().copy_from_slice(t.data());
    }
    for (l, bn) in model.norms.iter_mut().enumerate() {
        let c = bn.channels();
        for (suffix, target) in [("mean", &mut bn.running_mean), ("var", &mut bn.running_var)] {
            let path = tensor_file(dir, &format!("layer{l}.bn_running_{suffix}"));
            let t = container::load(&path)?;
            if t.shape().len() != 2 || t.shape()[1] != c {
                return Err(PipelineError::Format {
                    path,
                    msg: format!("expected [steps, {c}] running statistics, found {:?}", t.shape()),
                });
            }
            *target = t.data().chunks_exact(c).map(<[f64]>::to_vec).collect();
        }
    }
    Ok((model, meta))
}

/// Mean count of burned cells per frame over the given runs.
pub fn mean_burned_count(data: &Dataset, ids: &[usize], eps_b: f64) -> Result<f64> {
    let (mut total, mut frames) = (0u64, 0usize);
    for &id in ids {
        let seq = data.sequence(id)?;
        let counts = burned_counts(&seq.values, seq.frame_len(), eps_b);
        total += counts.iter().sum::<u64>();
        frames += counts.len();
    }
    if frames == 0 {
        return Err(PipelineError::Config("no training frames".into()));
    }
    Ok(total as f64 / frames as f64)
}

fn mean_breakdown(items: &[LossBreakdown]) -> LossBreakdown {
    let n = items.len().max(1) as f64;
    let sum = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        base: sum(|b| b.base),
        ft: sum(|b| b.ft),
        ros: sum(|b| b.ros),
        ba: sum(|b| b.ba),
        burned: sum(|b| b.burned),
        unburned: sum(|b| b.unburned),
        pp: sum(|b| b.pp),
        total: sum(|b| b.total),
    }
}

pub fn log_text(epochs: &[EpochLog]) -> String {
    let mut s = String::new();
    for e in epochs {
        let b = &e.mean;
        let _ = writeln!(
            s,
            "epoch={} total={} base={} ft={} ros={} ba={} burned={} unburned={} pp={}",
            e.epoch, b.total, b.base, b.ft, b.ros, b.ba, b.burned, b.unburned, b.pp
        );
    }
    s
}

/// Trains one model on the dataset's training split and writes its
/// checkpoint to `dir`.
pub fn train(
    settings: &Settings,
    data: &Dataset,
    mode: Mode,
    loss: &LossWeights,
    dir: &Path,
) -> Result<TrainOutcome> {
    loss.validate()?;
    let m = &data.manifest;
    if m.train.is_empty() {
        return Err(PipelineError::Config("training split is empty".into()));
    }
    let config = EmulatorConfig {
        in_channels: CHANNELS,
        ..settings.emulator_config()
    };
    let mut model = EmulatorModel::new(config.clone(), mode, settings.seed)?;
    let prior_rate = if mode.uses_mixture() {
        Some(mean_burned_count(data, &m.train, loss.eps_b)?)
    } else {
        None
    };
    let meta = CheckpointMeta {
        mode,
        config,
        rows: m.rows,
        cols: m.cols,
        steps: m.steps,
        prior_rate,
    };
    let mut runs = Vec::with_capacity(m.train.len());
    for &id in &m.train {
        runs.push((id, data.inputs(id)?, data.target(id)?));
    }

    let mut opt = Adam::new(settings.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut order: Vec<usize> = (0..runs.len()).collect();
    let mut epochs = Vec::with_capacity(settings.epochs);
    let mut steps = Vec::with_capacity(settings.epochs * runs.len());
    for epoch in 0..settings.epochs {
        order.shuffle(&mut rng);
        let mut this_epoch = Vec::with_capacity(runs.len());
        for (step, &k) in order.iter().enumerate() {
            let (_, x, y) = &runs[k];
            let mut g = Graph::new();
            let bound = model.bind(&mut g);
            let out = model.forward(&mut g, &bound, x, Phase::Train)?;
            let yv = g.constant(y.shape(), y.data().to_vec())?;
            let (pred, pp) = match out.mixture {
                Some(params) => {
                    let frame_len = m.rows * m.cols;
                    let prior = prior_rate.expect("mixture mode has a prior");
                    let pois = poisson_head(&mut g, params.rate, y.data(), frame_len, loss.eps_b, prior, &mut rng)?;
                    (
                        Prediction::Mixture {
                            params,
                            mean: out.yhat,
                        },
                        Some(pois.loss),
                    )
                }
                None => (Prediction::Point(out.yhat), None),
            };
            let (total, breakdown) = total_loss(&mut g, yv, pred, loss, pp)?;
            let diverged = |model: &EmulatorModel| -> Result<PipelineError> {
                save_checkpoint(dir, model, &meta, settings)?;
                Ok(PipelineError::NonFinite {
                    epoch,
                    step,
                    checkpoint: dir.to_path_buf(),
                })
            };
            if !breakdown.total.is_finite() {
                return Err(diverged(&model)?);
            }
            g.backward(total)?;
            model.zero_grad();
            model.accumulate_grads(&g, &bound)?;
            if opt.step(&mut model.params_mut()).is_err() {
                return Err(diverged(&model)?);
            }
            model.apply_bn_stats(&out.bn_stats);
            this_epoch.push(breakdown);
            steps.push(breakdown);
        }
        let log = EpochLog {
            epoch,
            mean: mean_breakdown(&this_epoch),
        };
        log::info!("{} epoch {epoch}: loss {}", mode, log.mean.total);
        epochs.push(log);
    }
    save_checkpoint(dir, &model, &meta, settings)?;
    error::write(&dir.join(LOG_FILE), log_text(&epochs))?;
    Ok(TrainOutcome {
        model,
        epochs,
        steps,
        prior_rate,
        checkpoint: dir.to_path_buf(),
    })
}
