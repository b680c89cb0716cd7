//! Stacked ConvLSTM emulator with a point head or a mixture-density +
//! Poisson head.

mod cell;
mod heads;

pub use cell::{convlstm_cell_forward, CellVars, ConvLstmCell};
pub use heads::{
    burned_counts, ln_factorial, mdn_nll, poisson_head, poisson_kl, poisson_nll, MixtureParams,
    PoissonOutcome,
};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{BatchNormStats, Graph, Tensor, Var};

/// Training objective family; decides which head the model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Plain ConvLSTM trained on MSE.
    Cl,
    /// ConvLSTM with the physics-guided penalty terms.
    Pgcl,
    /// Physics-guided with mixture-density and Poisson heads.
    PgclPlus,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Cl, Mode::Pgcl, Mode::PgclPlus];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Cl => "cl",
            Mode::Pgcl => "pgcl",
            Mode::PgclPlus => "pgcl+",
        }
    }

    pub fn uses_mixture(self) -> bool {
        self == Mode::PgclPlus
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cl" => Ok(Mode::Cl),
            "pgcl" => Ok(Mode::Pgcl),
            "pgcl+" | "pgclplus" | "pgcl_plus" => Ok(Mode::PgclPlus),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmulatorConfig {
    pub in_channels: usize,
    pub hidden: usize,
    pub layers: usize,
    pub kernel: usize,
    pub components: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Added to the softplus output so log-sigma stays finite.
    pub sigma_floor: f64,
}

impl Default for EmulatorConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            hidden: 16,
            layers: 4,
            kernel: 3,
            components: 2,
            bn_momentum: 0.9,
            bn_eps: 1e-5,
            sigma_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub gamma: Tensor,
    pub beta: Tensor,
    /// Running averages per time step, `[step][channel]`.
    pub running_mean: Vec<Vec<f64>>,
    pub running_var: Vec<Vec<f64>>,
}

impl BatchNormLayer {
    fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0).with_grad(),
            beta: Tensor::zeros(&[channels]).with_grad(),
            running_mean: Vec::new(),
            running_var: Vec::new(),
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Statistics for step `t`; steps past the trained length reuse the
    /// last one, and an untrained layer uses zero mean and unit variance.
    pub fn running(&self, t: usize) -> (Vec<f64>, Vec<f64>) {
        match self.running_mean.len() {
            0 => (vec![0.0; self.channels()], vec![1.0; self.channels()]),
            n => {
                let i = t.min(n - 1);
                (self.running_mean[i].clone(), self.running_var[i].clone())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Head {
    /// 1x1 conv to a single fuel-density channel.
    Point { weight: Tensor, bias: Tensor },
    /// 1x1 conv to `3k` channels (logits, means, raw sigmas) plus a pooled
    /// 1x1 conv to the Poisson rate.
    Mixture {
        weight: Tensor,
        bias: Tensor,
        rate_weight: Tensor,
        rate_bias: Tensor,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Batch statistics in batch norm; the caller folds them into the
    /// running averages with [`EmulatorModel::apply_bn_stats`].
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// Graph handles for every trainable tensor, in [`EmulatorModel::params`] order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Point prediction `[T, M, P]`; the mixture mean in PGCL+ mode.
    pub yhat: Var,
    pub mixture: Option<MixtureParams>,
    /// Batch-norm statistics per frame, per layer (train phase only).
    pub bn_stats: Vec<Vec<BatchNormStats>>,
}

#[derive(Debug, Clone)]
pub struct EmulatorModel {
    pub config: EmulatorConfig,
    pub mode: Mode,
    pub cells: Vec<ConvLstmCell>,
    pub norms: Vec<BatchNormLayer>,
    pub head: Head,
}

impl EmulatorModel {
    /// Kernels uniform in `+-sqrt(1/fan_in)`, forget-gate bias 1, other biases 0.
    pub fn new(config: EmulatorConfig, mode: Mode, seed: u64) -> Result<Self> {
        if config.layers == 0 || config.hidden == 0 || config.in_channels == 0 {
            return Err(Error::Config("layers, hidden and in_channels must be >= 1".into()));
        }
        if config.kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel must be odd, got {}", config.kernel)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        let cells = (0..config.layers)
            .map(|l| {
                let cin = if l == 0 { config.in_channels } else { h };
                ConvLstmCell::new(cin, h, config.kernel, &mut rng)
            })
            .collect();
        let norms = (0..config.layers).map(|_| BatchNormLayer::new(h)).collect();
        let bound = (1.0 / h as f64).sqrt();
        let mut uniform =
            |shape: &[usize]| Tensor::from_fn(shape, |_| rng.random_range(-bound..bound)).with_grad();
        let head = if mode.uses_mixture() {
            let k = config.components;
            Head::Mixture {
                weight: uniform(&[1, 1, h, 3 * k]),
                bias: Tensor::zeros(&[3 * k]).with_grad(),
                rate_weight: uniform(&[1, 1, h, 1]),
                rate_bias: Tensor::zeros(&[1]).with_grad(),
            }
        } else {
            Head::Point {
                weight: uniform(&[1, 1, h, 1]),
                bias: Tensor::zeros(&[1]).with_grad(),
            }
        };
        Ok(Self {
            config,
            mode,
            cells,
            norms,
            head,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, cell) in self.cells.iter().enumerate() {
            for (name, t) in ["w_x", "w_h", "w_c", "w_co", "bias"].iter().zip(cell.params()) {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        for (l, bn) in self.norms.iter().enumerate() {
            out.push((format!("layer{l}.bn_gamma"), &bn.gamma));
            out.push((format!("layer{l}.bn_beta"), &bn.beta));
        }
        match &self.head {
            Head::Point { weight, bias } => {
                out.push(("head.weight".into(), weight));
                out.push(("head.bias".into(), bias));
            }
            Head::Mixture {
                weight,
                bias,
                rate_weight,
                rate_bias,
            } => {
                out.push(("head.weight".into(), weight));
                out.push(("head.bias".into(), bias));
                out.push(("head.rate_weight".into(), rate_weight));
                out.push(("head.rate_bias".into(), rate_bias));
            }
        }
        out
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.named_params().into_iter().map(|(_, t)| t).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for cell in &mut self.cells {
            out.extend(cell.params_mut());
        }
        for bn in &mut self.norms {
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        match &mut self.head {
            Head::Point { weight, bias } => {
                out.push(weight);
                out.push(bias);
            }
            Head::Mixture {
                weight,
                bias,
                rate_weight,
                rate_bias,
            } => {
                out.push(weight);
                out.push(bias);
                out.push(rate_weight);
                out.push(rate_bias);
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        BoundParams {
            vars: self.params().into_iter().map(|t| g.leaf(t)).collect(),
        }
    }

    /// Copies the graph's gradients into each parameter's buffer.
    pub fn accumulate_grads(&mut self, g: &Graph, bound: &BoundParams) -> Result<()> {
        for (p, &v) in self.params_mut().into_iter().zip(&bound.vars) {
            g.accumulate_grad(v, p)?;
        }
        Ok(())
    }

    /// Folds each frame's batch statistics into that step's running
    /// averages.
    pub fn apply_bn_stats(&mut self, stats: &[Vec<BatchNormStats>]) {
        let m = self.config.bn_momentum;
        for (t, frame) in stats.iter().enumerate() {
            for (bn, s) in self.norms.iter_mut().zip(frame) {
                let c = bn.channels();
                bn.running_mean.resize(bn.running_mean.len().max(t + 1), vec![0.0; c]);
                bn.running_var.resize(bn.running_var.len().max(t + 1), vec![1.0; c]);
                for (r, b) in bn.running_mean[t].iter_mut().zip(&s.mean) {
                    *r = m * *r + (1.0 - m) * b;
                }
                for (r, b) in bn.running_var[t].iter_mut().zip(&s.var) {
                    *r = m * *r + (1.0 - m) * b;
                }
            }
        }
    }

    /// Runs the stacked cells over `x` (`[T, M, P, C]`), zero initial state.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        x: &Tensor,
        phase: Phase,
    ) -> Result<ForwardOutput> {
        let shape = x.shape();
        if shape.len() != 4 {
            return Err(Error::Shape(format!("input must be [T, M, P, C], got {shape:?}")));
        }
        let (steps, rows, cols, chans) = (shape[0], shape[1], shape[2], shape[3]);
        if chans != self.config.in_channels {
            return Err(Error::Config(format!(
                "model expects {} input channels, got {chans}",
                self.config.in_channels
            )));
        }
        if bound.vars.len() != self.params().len() {
            return Err(Error::Config("bound parameters belong to another model".into()));
        }
        let h = self.config.hidden;
        let layers = self.config.layers;
        let cell_vars: Vec<CellVars> = (0..layers)
            .map(|l| {
                let v = &bound.vars[l * 5..l * 5 + 5];
                CellVars {
                    w_x: v[0],
                    w_h: v[1],
                    w_c: v[2],
                    w_co: v[3],
                    bias: v[4],
                }
            })
            .collect();
        let bn_base = layers * 5;
        let head_base = bn_base + 2 * layers;

        let zero_state = g.constant(&[rows, cols, h], vec![0.0; rows * cols * h])?;
        let mut hs = vec![zero_state; layers];
        let mut cs = vec![zero_state; layers];
        let frame_len = rows * cols * chans;
        let mut bn_stats = Vec::new();
        let mut point_frames = Vec::with_capacity(steps);
        let (mut logit_frames, mut mu_frames, mut sigma_frames, mut rate_frames) =
            (Vec::new(), Vec::new(), Vec::new(), Vec::new());

        for t in 0..steps {
            let xt = x.data()[t * frame_len..(t + 1) * frame_len].to_vec();
            let mut act = g.constant(&[rows, cols, chans], xt)?;
            let mut frame_stats = Vec::with_capacity(layers);
            for l in 0..layers {
                let (hn, cn) = convlstm_cell_forward(g, &cell_vars[l], h, act, hs[l], cs[l])?;
                hs[l] = hn;
                cs[l] = cn;
                let gamma = bound.vars[bn_base + 2 * l];
                let beta = bound.vars[bn_base + 2 * l + 1];
                let norm = &self.norms[l];
                let running = match phase {
                    Phase::Train => None,
                    Phase::Eval => Some(norm.running(t)),
                };
                let running = running.as_ref().map(|(m, v)| (&m[..], &v[..]));
                let (normed, stats) = g.batch_norm(hn, gamma, beta, running, self.config.bn_eps)?;
                if let Some(s) = stats {
                    frame_stats.push(s);
                }
                act = g.relu(normed);
            }
            if phase == Phase::Train {
                bn_stats.push(frame_stats);
            }
            match &self.head {
                Head::Point { .. } => {
                    let (w, b) = (bound.vars[head_base], bound.vars[head_base + 1]);
                    let out = g.conv2d_same(act, w, b)?;
                    point_frames.push(g.reshape(out, &[rows, cols])?);
                }
                Head::Mixture { .. } => {
                    let k = self.config.components;
                    let (w, b) = (bound.vars[head_base], bound.vars[head_base + 1]);
                    let (rw, rb) = (bound.vars[head_base + 2], bound.vars[head_base + 3]);
                    let out = g.conv2d_same(act, w, b)?;
                    logit_frames.push(g.slice_last(out, 0, k)?);
                    mu_frames.push(g.slice_last(out, k, k)?);
                    let raw = g.slice_last(out, 2 * k, k)?;
                    let sp = g.softplus(raw);
                    sigma_frames.push(g.add_const(sp, self.config.sigma_floor));
                    let pooled = g.mean(act, &[0, 1])?;
                    let pooled = g.reshape(pooled, &[1, 1, h])?;
                    let z = g.conv2d_same(pooled, rw, rb)?;
                    let z = g.reshape(z, &[])?;
                    let r = g.softplus(z);
                    rate_frames.push(g.scale(r, (rows * cols) as f64));
                }
            }
        }

        let (yhat, mixture) = match &self.head {
            Head::Point { .. } => (g.stack(&point_frames)?, None),
            Head::Mixture { .. } => {
                let logits = g.stack(&logit_frames)?;
                let pi = g.softmax_last(logits)?;
                let mu = g.stack(&mu_frames)?;
                let sigma = g.stack(&sigma_frames)?;
                let rate = g.stack(&rate_frames)?;
                let params = MixtureParams {
                    logits,
                    pi,
                    mu,
                    sigma,
                    rate,
                };
                (params.mean(g)?, Some(params))
            }
        };
        Ok(ForwardOutput {
            yhat,
            mixture,
            bn_stats,
        })
    }

    /// Inference-only point prediction `[T, M, P]`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g);
        let out = self.forward(&mut g, &bound, x, Phase::Eval)?;
        Ok(g.tensor(out.yhat))
    }
}
