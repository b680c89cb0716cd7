//! Physics-guided loss terms and their weighted combination.
//!
//! Predictions and targets are `[T, M, P]` graph nodes. Indicator masks are
//! evaluated on the forward values and enter the graph as constants, so no
//! gradient flows through a threshold. The fire-metric terms (rate of spread
//! and burned area) are counts of thresholded cells and therefore carry a
//! value but no gradient.

use crate::emulator::{mdn_nll, MixtureParams};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Per-cell error inside the masked terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Norm {
    #[default]
    Squared,
    Absolute,
}

/// Likelihood the physics terms are added to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Base {
    #[default]
    Mse,
    MdnNll,
}

/// How masked per-cell errors are reduced to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ErrorStyle {
    pub norm: Norm,
    /// Divide by the number of masked cells instead of by `T`.
    pub per_cell: bool,
}

/// Which physics terms participate in [`total_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TermFlags {
    pub ft: bool,
    pub ros: bool,
    pub ba: bool,
    pub burned: bool,
    pub unburned: bool,
}

impl TermFlags {
    pub const ALL: TermFlags = TermFlags {
        ft: true,
        ros: true,
        ba: true,
        burned: true,
        unburned: true,
    };
    pub const NONE: TermFlags = TermFlags {
        ft: false,
        ros: false,
        ba: false,
        burned: false,
        unburned: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_ft: f64,
    pub lambda_ros: f64,
    pub lambda_ba: f64,
    pub lambda_burned: f64,
    pub lambda_unburned: f64,
    /// Fuel-transport tolerance.
    pub eps: f64,
    /// Burned threshold.
    pub eps_b: f64,
    /// Unburned threshold.
    pub eps_u: f64,
    pub enabled: TermFlags,
    pub base: Base,
    pub style: ErrorStyle,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ft: 0.001,
            lambda_ros: 0.0001,
            lambda_ba: 0.0001,
            lambda_burned: 0.001,
            lambda_unburned: 0.0001,
            eps: 0.001,
            eps_b: 0.1,
            eps_u: 0.65,
            enabled: TermFlags::ALL,
            base: Base::Mse,
            style: ErrorStyle::default(),
        }
    }
}

impl LossWeights {
    /// Default weights with every physics term switched off.
    pub fn plain() -> Self {
        Self {
            enabled: TermFlags::NONE,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lambdas = [
            ("lambda_ft", self.lambda_ft),
            ("lambda_ros", self.lambda_ros),
            ("lambda_ba", self.lambda_ba),
            ("lambda_burned", self.lambda_burned),
            ("lambda_unburned", self.lambda_unburned),
        ];
        for (name, v) in lambdas {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.eps >= 0.0) {
            return Err(Error::Config(format!("eps must be >= 0, got {}", self.eps)));
        }
        if !(0.0 < self.eps_b && self.eps_b < self.eps_u && self.eps_u <= crate::sim::MAX_FUEL) {
            return Err(Error::Config(format!(
                "thresholds must satisfy 0 < eps_b < eps_u <= {}, got eps_b={} eps_u={}",
                crate::sim::MAX_FUEL,
                self.eps_b,
                self.eps_u
            )));
        }
        Ok(())
    }

    /// Weights as applied: zero for disabled terms.
    /// Order: ft, ros, ba, burned, unburned.
    pub fn effective(&self) -> [f64; 5] {
        let on = |flag: bool, w: f64| if flag { w } else { 0.0 };
        let e = self.enabled;
        [
            on(e.ft, self.lambda_ft),
            on(e.ros, self.lambda_ros),
            on(e.ba, self.lambda_ba),
            on(e.burned, self.lambda_burned),
            on(e.unburned, self.lambda_unburned),
        ]
    }
}

fn dims3(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [t, m, p] => Ok((t, m, p)),
        _ => Err(Error::Shape(format!("{what} must be [T, M, P], got {shape:?}"))),
    }
}

fn pair_dims(g: &Graph, y: Var, yhat: Var) -> Result<(usize, usize, usize)> {
    let d = dims3(g.shape(y), "target")?;
    if g.shape(yhat) != g.shape(y) {
        return Err(Error::Shape(format!(
            "prediction {:?} does not match target {:?}",
            g.shape(yhat),
            g.shape(y)
        )));
    }
    Ok(d)
}

fn masked_error(
    g: &mut Graph,
    y: Var,
    yhat: Var,
    mask: Vec<f64>,
    steps: usize,
    style: ErrorStyle,
) -> Result<Var> {
    let count = mask.iter().filter(|&&m| m != 0.0).count();
    let shape = g.shape(y).to_vec();
    let diff = g.sub(yhat, y)?;
    let err = match style.norm {
        Norm::Squared => g.square(diff),
        Norm::Absolute => g.abs(diff),
    };
    let mask = g.constant(&shape, mask)?;
    let masked = g.mul(err, mask)?;
    let total = g.sum_all(masked);
    let denom = if style.per_cell { count.max(1) } else { steps };
    Ok(g.scale(total, 1.0 / denom as f64))
}

/// Penalizes predicted fuel that grows by more than `eps` between frames.
pub fn loss_ft(g: &mut Graph, y: Var, yhat: Var, eps: f64, style: ErrorStyle) -> Result<Var> {
    let (steps, rows, cols) = pair_dims(g, y, yhat)?;
    if steps < 2 {
        return Err(Error::Shape(format!("fuel transport needs T >= 2, got {steps}")));
    }
    let n = rows * cols;
    let pred = g.value(yhat);
    let mut mask = vec![0.0; pred.len()];
    for i in n..pred.len() {
        if pred[i] - pred[i - n] > eps {
            mask[i] = 1.0;
        }
    }
    masked_error(g, y, yhat, mask, steps, style)
}

/// Error on cells the ground truth marks as burned (`Y < eps_b`).
pub fn loss_burned(g: &mut Graph, y: Var, yhat: Var, eps_b: f64, style: ErrorStyle) -> Result<Var> {
    let (steps, _, _) = pair_dims(g, y, yhat)?;
    let mask = g.value(y).iter().map(|&v| f64::from(u8::from(v < eps_b))).collect();
    masked_error(g, y, yhat, mask, steps, style)
}

/// Error on cells the ground truth marks as unburned (`Y > eps_u`).
pub fn loss_unburned(
    g: &mut Graph,
    y: Var,
    yhat: Var,
    eps_u: f64,
    style: ErrorStyle,
) -> Result<Var> {
    let (steps, _, _) = pair_dims(g, y, yhat)?;
    let mask = g.value(y).iter().map(|&v| f64::from(u8::from(v > eps_u))).collect();
    masked_error(g, y, yhat, mask, steps, style)
}

/// Number of distinct columns holding at least one cell below `eps_b`.
pub fn burned_columns(frame: &[f64], cols: usize, eps_b: f64) -> usize {
    (0..cols)
        .filter(|&c| frame.iter().skip(c).step_by(cols).any(|&v| v < eps_b))
        .count()
}

/// Rate of spread in burned columns per step between frames `t0` and `t`.
pub fn ros(frame: &[f64], frame0: &[f64], cols: usize, t: usize, t0: usize, eps_b: f64) -> Result<f64> {
    if t == t0 {
        return Err(Error::Domain(format!("rate of spread needs t != t0, both are {t}")));
    }
    if frame.len() != frame0.len() || cols == 0 || frame.len() % cols != 0 {
        return Err(Error::Shape(format!(
            "frames of {} and {} cells do not share a {cols}-column grid",
            frame.len(),
            frame0.len()
        )));
    }
    let now = burned_columns(frame, cols, eps_b) as f64;
    let before = burned_columns(frame0, cols, eps_b) as f64;
    Ok((now - before) / (t as f64 - t0 as f64))
}

/// Per-frame rate of spread relative to frame 0, for `t >= 1`.
pub fn ros_series(seq: &[f64], shape: &[usize], eps_b: f64) -> Result<Vec<f64>> {
    let (steps, rows, cols) = dims3(shape, "sequence")?;
    let n = rows * cols;
    if seq.len() != steps * n {
        return Err(Error::Shape(format!("{} values do not fill {shape:?}", seq.len())));
    }
    (1..steps)
        .map(|t| ros(&seq[t * n..(t + 1) * n], &seq[..n], cols, t, 0, eps_b))
        .collect()
}

/// Mean squared rate-of-spread difference over frames `t >= 1` (0 when `T < 2`).
pub fn loss_ros(y: &[f64], yhat: &[f64], shape: &[usize], eps_b: f64) -> Result<f64> {
    if y.len() != yhat.len() {
        return Err(Error::Shape(format!("{} vs {} values", y.len(), yhat.len())));
    }
    let a = ros_series(y, shape, eps_b)?;
    let b = ros_series(yhat, shape, eps_b)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    Ok(a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / a.len() as f64)
}

/// Percentage of cells below `eps_b`.
pub fn ba(frame: &[f64], eps_b: f64) -> f64 {
    if frame.is_empty() {
        return 0.0;
    }
    100.0 * frame.iter().filter(|&&v| v < eps_b).count() as f64 / frame.len() as f64
}

/// Mean squared burned-area difference over frames.
pub fn loss_ba(y: &[f64], yhat: &[f64], frame_len: usize, eps_b: f64) -> Result<f64> {
    if y.len() != yhat.len() || frame_len == 0 || y.len() % frame_len != 0 {
        return Err(Error::Shape(format!(
            "{} and {} values do not form frames of {frame_len}",
            y.len(),
            yhat.len()
        )));
    }
    let frames = y.len() / frame_len;
    if frames == 0 {
        return Ok(0.0);
    }
    let total: f64 = y
        .chunks_exact(frame_len)
        .zip(yhat.chunks_exact(frame_len))
        .map(|(a, b)| {
            let d = ba(a, eps_b) - ba(b, eps_b);
            d * d
        })
        .sum();
    Ok(total / frames as f64)
}

/// Mean squared difference between the frame-by-frame Gram matrices
/// `G_st = <v_s, v_t> / (M P)` of target and prediction.
pub fn loss_gram(g: &mut Graph, y: Var, yhat: Var) -> Result<Var> {
    let (steps, rows, cols) = pair_dims(g, y, yhat)?;
    if steps == 0 {
        return Err(Error::Shape("Gram loss needs T >= 1".into()));
    }
    let n = (rows * cols) as f64;
    let yv = g.value(y).to_vec();
    let frame = rows * cols;
    let frames: Vec<Var> = (0..steps).map(|t| g.select0(yhat, t)).collect::<std::result::Result<_, _>>()?;
    let mut diffs = Vec::with_capacity(steps * steps);
    for s in 0..steps {
        for t in 0..steps {
            let target: f64 = yv[s * frame..(s + 1) * frame]
                .iter()
                .zip(&yv[t * frame..(t + 1) * frame])
                .map(|(a, b)| a * b)
                .sum::<f64>()
                * (1.0 / n);
            let prod = g.mul(frames[s], frames[t])?;
            let dot = g.sum_all(prod);
            let gram = g.scale(dot, 1.0 / n);
            let d = g.add_const(gram, -target);
            diffs.push(g.square(d));
        }
    }
    let all = g.stack(&diffs)?;
    Ok(g.mean_all(all))
}

/// Prediction handed to [`total_loss`].
#[derive(Debug, Clone, Copy)]
pub enum Prediction {
    Point(Var),
    /// Mixture parameters plus their mean, which the physics terms score.
    Mixture { params: MixtureParams, mean: Var },
}

impl Prediction {
    pub fn point(&self) -> Var {
        match *self {
            Prediction::Point(v) => v,
            Prediction::Mixture { mean, .. } => mean,
        }
    }
}

/// Unweighted value of every term. Disabled terms read 0.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub base: f64,
    pub ft: f64,
    pub ros: f64,
    pub ba: f64,
    pub burned: f64,
    pub unburned: f64,
    pub pp: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [f64; 5] {
        [self.ft, self.ros, self.ba, self.burned, self.unburned]
    }

    /// `base + w . terms + pp`, summed in the same order as [`total_loss`].
    pub fn recombine(&self, weights: &LossWeights) -> f64 {
        let mut acc = self.base;
        for (w, v) in weights.effective().iter().zip(self.terms()) {
            acc += w * v;
        }
        acc + self.pp
    }
}

/// Base likelihood plus weighted physics terms, plus `pp` (the Poisson
/// free energy) when given.
pub fn total_loss(
    g: &mut Graph,
    y: Var,
    pred: Prediction,
    weights: &LossWeights,
    pp: Option<Var>,
) -> Result<(Var, LossBreakdown)> {
    weights.validate()?;
    let yhat = pred.point();
    let (_, rows, cols) = pair_dims(g, y, yhat)?;
    let base = match (weights.base, pred) {
        (Base::Mse, Prediction::Point(p)) => {
            let d = g.sub(p, y)?;
            let sq = g.square(d);
            g.mean_all(sq)
        }
        (Base::MdnNll, Prediction::Mixture { params, .. }) => mdn_nll(g, &params, y)?,
        (Base::Mse, Prediction::Mixture { .. }) => {
            return Err(Error::Config("MSE base needs a point prediction".into()))
        }
        (Base::MdnNll, Prediction::Point(_)) => {
            return Err(Error::Config("MDN base needs mixture parameters".into()))
        }
    };
    let mut br = LossBreakdown {
        base: g.scalar(base),
        ..LossBreakdown::default()
    };
    let e = weights.enabled;
    let style = weights.style;
    let shape = g.shape(y).to_vec();
    let mut terms: [Option<Var>; 5] = [None; 5];
    if e.ft {
        terms[0] = Some(loss_ft(g, y, yhat, weights.eps, style)?);
    }
    if e.ros {
        let v = loss_ros(g.value(y), g.value(yhat), &shape, weights.eps_b)?;
        terms[1] = Some(g.scalar_constant(v));
    }
    if e.ba {
        let v = loss_ba(g.value(y), g.value(yhat), rows * cols, weights.eps_b)?;
        terms[2] = Some(g.scalar_constant(v));
    }
    if e.burned {
        terms[3] = Some(loss_burned(g, y, yhat, weights.eps_b, style)?);
    }
    if e.unburned {
        terms[4] = Some(loss_unburned(g, y, yhat, weights.eps_u, style)?);
    }
    let values: Vec<f64> = terms.iter().map(|t| t.map_or(0.0, |v| g.scalar(v))).collect();
    br.ft = values[0];
    br.ros = values[1];
    br.ba = values[2];
    br.burned = values[3];
    br.unburned = values[4];

    let mut total = base;
    for (w, term) in weights.effective().iter().zip(terms) {
        if let Some(v) = term {
            let weighted = g.scale(v, *w);
            total = g.add(total, weighted)?;
        }
    }
    if let Some(pp) = pp {
        br.pp = g.scalar(pp);
        total = g.add(total, pp)?;
    }
    br.total = g.scalar(total);
    Ok((total, br))
}
