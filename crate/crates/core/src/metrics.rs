//! Evaluation metrics: MSE family, change-weighted MSE, physical-consistency
//! percentages and wall-clock timing.
//!
//! Sequences are flat `[T, M, P]` slices with an explicit shape.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::losses::{loss_ba, loss_ros, LossWeights};

/// Thresholds shared by the metric functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    /// Fuel-transport tolerance.
    pub eps: f64,
    pub eps_b: f64,
    pub eps_u: f64,
    /// A cell counts as underestimated when `Y - Yhat > under_tol`.
    pub under_tol: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self::from(&LossWeights::default())
    }
}

impl From<&LossWeights> for Thresholds {
    fn from(w: &LossWeights) -> Self {
        Self {
            eps: w.eps,
            eps_b: w.eps_b,
            eps_u: w.eps_u,
            under_tol: 0.0,
        }
    }
}

fn check(y: &[f64], yhat: &[f64], shape: &[usize]) -> Result<(usize, usize)> {
    let [steps, rows, cols] = *shape else {
        return Err(Error::Shape(format!("expected [T, M, P], got {shape:?}")));
    };
    let n = rows * cols;
    if y.len() != steps * n || yhat.len() != y.len() {
        return Err(Error::Shape(format!(
            "{} target and {} predicted values do not fill {shape:?}",
            y.len(),
            yhat.len()
        )));
    }
    Ok((steps, n))
}

fn masked_mse(y: &[f64], yhat: &[f64], keep: impl Fn(f64) -> bool) -> Option<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for (&a, &b) in y.iter().zip(yhat) {
        if keep(a) {
            sum += (a - b) * (a - b);
            count += 1;
        }
    }
    (count > 0).then(|| sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MseSuite {
    pub mse: f64,
    pub burned_mse: f64,
    pub unburned_mse: f64,
    pub fire_metrics_mse: f64,
    pub burned_empty: bool,
    pub unburned_empty: bool,
}

pub fn mse_suite(y: &[f64], yhat: &[f64], shape: &[usize], th: &Thresholds) -> Result<MseSuite> {
    let (_, n) = check(y, yhat, shape)?;
    let mse = masked_mse(y, yhat, |_| true).unwrap_or(0.0);
    let burned = masked_mse(y, yhat, |v| v < th.eps_b);
    let unburned = masked_mse(y, yhat, |v| v > th.eps_u);
    let fire = loss_ros(y, yhat, shape, th.eps_b)? + loss_ba(y, yhat, n.max(1), th.eps_b)?;
    Ok(MseSuite {
        mse,
        burned_mse: burned.unwrap_or(0.0),
        unburned_mse: unburned.unwrap_or(0.0),
        fire_metrics_mse: fire,
        burned_empty: burned.is_none(),
        unburned_empty: unburned.is_none(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dmse {
    pub value: f64,
    /// Set when the target never changes, so every weight is zero.
    pub degenerate: bool,
}

/// Squared error weighted by the target's absolute frame-to-frame change.
pub fn dmse(y: &[f64], yhat: &[f64], shape: &[usize]) -> Result<Dmse> {
    let (steps, n) = check(y, yhat, shape)?;
    if steps < 2 {
        return Err(Error::Shape(format!("DMSE needs T >= 2, got {steps}")));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for i in n..y.len() {
        let w = (y[i] - y[i - n]).abs();
        num += w * (yhat[i] - y[i]) * (yhat[i] - y[i]);
        den += w;
    }
    if den == 0.0 {
        return Ok(Dmse {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Dmse {
        value: num / den,
        degenerate: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Consistency {
    pub metric_ft: f64,
    pub metric_burned: f64,
    pub metric_unburned: f64,
    pub metric_fp: f64,
    pub metric_fn: f64,
    pub unburned_empty: bool,
    pub burning_empty: bool,
}

fn pct(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

/// Consistency percentages over a burned / burning / unburned partition of
/// the ground truth.
pub fn consistency_metrics(
    y: &[f64],
    yhat: &[f64],
    shape: &[usize],
    th: &Thresholds,
) -> Result<Consistency> {
    let (steps, n) = check(y, yhat, shape)?;
    let increases = (n..yhat.len()).filter(|&i| yhat[i] - yhat[i - n] > th.eps).count();
    let transitions = n * steps.saturating_sub(1);

    let (mut unburned, mut pred_burned, mut under) = (0, 0, 0);
    let (mut burning, mut fp, mut fneg) = (0, 0, 0);
    for (&a, &b) in y.iter().zip(yhat) {
        if a > th.eps_u {
            unburned += 1;
            pred_burned += usize::from(b < th.eps_b);
            under += usize::from(a - b > th.under_tol);
        } else if a >= th.eps_b {
            burning += 1;
            fp += usize::from(b < th.eps_b);
            fneg += usize::from(b > th.eps_u);
        }
    }
    Ok(Consistency {
        metric_ft: pct(increases, transitions),
        metric_burned: pct(pred_burned, unburned),
        metric_unburned: pct(under, unburned),
        metric_fp: pct(fp, burning),
        metric_fn: pct(fneg, burning),
        unburned_empty: unburned == 0,
        burning_empty: burning == 0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TimingStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

pub const DEFAULT_REPETITIONS: usize = 10;

/// Wall-clock seconds per call of `run`, over `repetitions` calls.
pub fn timing_report<R>(mut run: impl FnMut() -> R, repetitions: usize) -> Result<TimingStats> {
    if repetitions == 0 {
        return Err(Error::Config("timing needs at least one repetition".into()));
    }
    let mut samples = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        std::hint::black_box(run());
        samples.push(start.elapsed().as_secs_f64());
    }
    Ok(TimingStats {
        min: samples.iter().copied().fold(f64::INFINITY, f64::min),
        mean: samples.iter().sum::<f64>() / repetitions as f64,
        max: samples.iter().copied().fold(0.0, f64::max),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricsReport {
    pub mse: f64,
    pub burned_mse: f64,
    pub unburned_mse: f64,
    pub fire_metrics_mse: f64,
    pub dmse: f64,
    pub metric_ft: f64,
    pub metric_burned: f64,
    pub metric_unburned: f64,
    pub metric_fp: f64,
    pub metric_fn: f64,
    pub timing: Option<TimingStats>,
}

impl MetricsReport {
    /// Every metric for one run. DMSE reads 0 for single-frame sequences.
    pub fn compute(y: &[f64], yhat: &[f64], shape: &[usize], th: &Thresholds) -> Result<Self> {
        let suite = mse_suite(y, yhat, shape, th)?;
        let d = if shape.first().copied().unwrap_or(0) >= 2 {
            dmse(y, yhat, shape)?.value
        } else {
            0.0
        };
        let c = consistency_metrics(y, yhat, shape, th)?;
        Ok(Self {
            mse: suite.mse,
            burned_mse: suite.burned_mse,
            unburned_mse: suite.unburned_mse,
            fire_metrics_mse: suite.fire_metrics_mse,
            dmse: d,
            metric_ft: c.metric_ft,
            metric_burned: c.metric_burned,
            metric_unburned: c.metric_unburned,
            metric_fp: c.metric_fp,
            metric_fn: c.metric_fn,
            timing: None,
        })
    }

    /// Field-wise mean; timing is averaged over the reports that carry it.
    pub fn mean(reports: &[MetricsReport]) -> MetricsReport {
        if reports.is_empty() {
            return MetricsReport::default();
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let timed: Vec<TimingStats> = reports.iter().filter_map(|r| r.timing).collect();
        let timing = (!timed.is_empty()).then(|| TimingStats {
            min: timed.iter().map(|t| t.min).fold(f64::INFINITY, f64::min),
            mean: timed.iter().map(|t| t.mean).sum::<f64>() / timed.len() as f64,
            max: timed.iter().map(|t| t.max).fold(0.0, f64::max),
        });
        MetricsReport {
            mse: avg(|r| r.mse),
            burned_mse: avg(|r| r.burned_mse),
            unburned_mse: avg(|r| r.unburned_mse),
            fire_metrics_mse: avg(|r| r.fire_metrics_mse),
            dmse: avg(|r| r.dmse),
            metric_ft: avg(|r| r.metric_ft),
            metric_burned: avg(|r| r.metric_burned),
            metric_unburned: avg(|r| r.metric_unburned),
            metric_fp: avg(|r| r.metric_fp),
            metric_fn: avg(|r| r.metric_fn),
            timing,
        }
    }

    /// Named values in a fixed order, timing last when present.
    pub fn fields(&self) -> Vec<(&'static str, f64)> {
        let mut out = vec![
            ("mse", self.mse),
            ("burned_mse", self.burned_mse),
            ("unburned_mse", self.unburned_mse),
            ("fire_metrics_mse", self.fire_metrics_mse),
            ("dmse", self.dmse),
            ("metric_ft", self.metric_ft),
            ("metric_burned", self.metric_burned),
            ("metric_unburned", self.metric_unburned),
            ("metric_fp", self.metric_fp),
            ("metric_fn", self.metric_fn),
        ];
        if let Some(t) = self.timing {
            out.extend([("time_min_s", t.min), ("time_mean_s", t.mean), ("time_max_s", t.max)]);
        }
        out
    }
}
