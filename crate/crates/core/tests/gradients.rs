//! Tape gradients against central finite differences.

mod common;

use common::{grad_check, rel_err, uniform, STEP};
use ember_core::emulator::{mdn_nll, poisson_head, EmulatorConfig, EmulatorModel, MixtureParams, Mode, Phase};
use ember_core::losses::{Base, loss_burned, loss_ft, loss_gram, loss_unburned, total_loss, ErrorStyle, LossWeights, Norm, Prediction};
use ember_core::tensor::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-6;

fn assert_close(name: &str, err: f64, tol: f64) {
    assert!(err < tol, "{name}: relative error {err:e} exceeds {tol:e}");
}

type Unary = fn(&mut Graph, Var) -> Var;

#[test]
fn elementwise_unary_ops() {
    let shape = [2, 3, 4];
    let x = uniform(24, -2.0, 2.0, 1);
    let pos = uniform(24, 0.2, 3.0, 2);
    let cases: [(&str, Unary, &[f64]); 10] = [
        ("sigmoid", |g, a| g.sigmoid(a), &x),
        ("tanh", |g, a| g.tanh(a), &x),
        ("relu", |g, a| g.relu(a), &pos),
        ("exp", |g, a| g.exp(a), &x),
        ("softplus", |g, a| g.softplus(a), &x),
        ("log", |g, a| g.log(a).unwrap(), &pos),
        ("square", |g, a| g.square(a), &x),
        ("abs", |g, a| g.abs(a), &pos),
        ("neg", |g, a| g.neg(a), &x),
        ("scale", |g, a| g.scale(a, -1.7), &x),
    ];
    for (name, f, input) in cases {
        assert_close(name, grad_check(&shape, input, f), TOL);
    }
    assert_close("add_const", grad_check(&shape, &x, |g, a| g.add_const(a, 0.3)), TOL);
}

#[test]
fn relu_and_abs_on_negative_side() {
    let neg = uniform(12, -3.0, -0.2, 3);
    assert_close("relu", grad_check(&[12], &neg, |g, a| g.relu(a)), TOL);
    assert_close("abs", grad_check(&[12], &neg, |g, a| g.abs(a)), TOL);
}

#[test]
fn binary_ops_both_operands() {
    let shape = [3, 5];
    let a = uniform(15, -2.0, 2.0, 4);
    let b = uniform(15, 0.5, 2.5, 5);
    type Bin = fn(&mut Graph, Var, Var) -> Var;
    let ops: [(&str, Bin); 4] = [
        ("add", |g, x, y| g.add(x, y).unwrap()),
        ("sub", |g, x, y| g.sub(x, y).unwrap()),
        ("mul", |g, x, y| g.mul(x, y).unwrap()),
        ("div", |g, x, y| g.div(x, y).unwrap()),
    ];
    for (name, op) in ops {
        let lhs = grad_check(&shape, &a, |g, x| {
            let y = g.constant(&shape, b.clone()).unwrap();
            op(g, x, y)
        });
        assert_close(&format!("{name} lhs"), lhs, TOL);
        let rhs = grad_check(&shape, &b, |g, y| {
            let x = g.constant(&shape, a.clone()).unwrap();
            op(g, x, y)
        });
        assert_close(&format!("{name} rhs"), rhs, TOL);
    }
}

#[test]
fn scalar_broadcast_accumulates() {
    let shape = [4, 3];
    let big = uniform(12, 0.5, 2.0, 6);
    for (name, op) in [
        ("mul", (|g: &mut Graph, x, y| g.mul(x, y).unwrap()) as fn(&mut Graph, Var, Var) -> Var),
        ("div", |g: &mut Graph, x, y| g.div(x, y).unwrap()),
        ("sub", |g: &mut Graph, x, y| g.sub(x, y).unwrap()),
    ] {
        let err = grad_check(&[], &[1.3], |g, s| {
            let x = g.constant(&shape, big.clone()).unwrap();
            op(g, x, s)
        });
        assert_close(&format!("{name} scalar rhs"), err, TOL);
        let err = grad_check(&[], &[0.7], |g, s| {
            let x = g.constant(&shape, big.clone()).unwrap();
            op(g, s, x)
        });
        assert_close(&format!("{name} scalar lhs"), err, TOL);
    }
}

#[test]
fn reductions() {
    let shape = [2, 3, 4];
    let x = uniform(24, -1.0, 1.0, 7);
    for axes in [vec![0], vec![1], vec![2], vec![0, 2], vec![0, 1, 2]] {
        let s = grad_check(&shape, &x, |g, a| g.sum(a, &axes).unwrap());
        assert_close(&format!("sum {axes:?}"), s, TOL);
        let m = grad_check(&shape, &x, |g, a| g.mean(a, &axes).unwrap());
        assert_close(&format!("mean {axes:?}"), m, TOL);
    }
    assert_close("sum_all", grad_check(&shape, &x, |g, a| g.sum_all(a)), TOL);
    assert_close("mean_all", grad_check(&shape, &x, |g, a| g.mean_all(a)), TOL);
}

#[test]
fn structural_ops() {
    let shape = [2, 3, 5];
    let x = uniform(30, -1.0, 1.0, 8);
    let err = grad_check(&shape, &x, |g, a| g.slice_last(a, 1, 3).unwrap());
    assert_close("slice_last", err, TOL);
    let err = grad_check(&shape, &x, |g, a| g.select0(a, 1).unwrap());
    assert_close("select0", err, TOL);
    let err = grad_check(&shape, &x, |g, a| g.reshape(a, &[6, 5]).unwrap());
    assert_close("reshape", err, TOL);
    let err = grad_check(&shape, &x, |g, a| {
        let b = g.select0(a, 0).unwrap();
        let c = g.select0(a, 1).unwrap();
        let sq = g.square(c);
        g.stack(&[sq, b, c]).unwrap()
    });
    assert_close("stack", err, TOL);
}

#[test]
fn softmax_and_logsumexp() {
    let shape = [3, 4, 3];
    let x = uniform(36, -3.0, 3.0, 9);
    assert_close("softmax", grad_check(&shape, &x, |g, a| g.softmax_last(a).unwrap()), TOL);
    assert_close("logsumexp", grad_check(&shape, &x, |g, a| g.logsumexp_last(a).unwrap()), TOL);
}

#[test]
fn conv2d_every_operand() {
    let (k, cin, cout) = (3, 2, 3);
    let in_shape = [5, 4, cin];
    let k_shape = [k, k, cin, cout];
    let input = uniform(40, -1.0, 1.0, 10);
    let kernel = uniform(k * k * cin * cout, -0.5, 0.5, 11);
    let bias = uniform(cout, -0.2, 0.2, 12);
    let conv = |g: &mut Graph, i: Var, w: Var, b: Var| g.conv2d_same(i, w, b).unwrap();
    let err = grad_check(&in_shape, &input, |g, i| {
        let w = g.constant(&k_shape, kernel.clone()).unwrap();
        let b = g.constant(&[cout], bias.clone()).unwrap();
        conv(g, i, w, b)
    });
    assert_close("conv input", err, TOL);
    let err = grad_check(&k_shape, &kernel, |g, w| {
        let i = g.constant(&in_shape, input.clone()).unwrap();
        let b = g.constant(&[cout], bias.clone()).unwrap();
        conv(g, i, w, b)
    });
    assert_close("conv kernel", err, TOL);
    let err = grad_check(&[cout], &bias, |g, b| {
        let i = g.constant(&in_shape, input.clone()).unwrap();
        let w = g.constant(&k_shape, kernel.clone()).unwrap();
        conv(g, i, w, b)
    });
    assert_close("conv bias", err, TOL);
}

#[test]
fn batch_norm_batch_and_running_statistics() {
    let shape = [3, 4, 2];
    let x = uniform(24, -1.0, 2.0, 14);
    let gamma = vec![1.3, 0.7];
    let beta = vec![0.1, -0.2];
    let bn = |g: &mut Graph, i: Var, ga: Var, be: Var, running: Option<(&[f64], &[f64])>| {
        g.batch_norm(i, ga, be, running, 1e-5).unwrap().0
    };
    let err = grad_check(&shape, &x, |g, i| {
        let ga = g.constant(&[2], gamma.clone()).unwrap();
        let be = g.constant(&[2], beta.clone()).unwrap();
        bn(g, i, ga, be, None)
    });
    assert_close("batch_norm input", err, TOL);
    let err = grad_check(&[2], &gamma, |g, ga| {
        let i = g.constant(&shape, x.clone()).unwrap();
        let be = g.constant(&[2], beta.clone()).unwrap();
        bn(g, i, ga, be, None)
    });
    assert_close("batch_norm gamma", err, TOL);
    let err = grad_check(&[2], &beta, |g, be| {
        let i = g.constant(&shape, x.clone()).unwrap();
        let ga = g.constant(&[2], gamma.clone()).unwrap();
        bn(g, i, ga, be, None)
    });
    assert_close("batch_norm beta", err, TOL);
    let (mean, var) = ([0.2, -0.1], [0.9, 1.4]);
    let err = grad_check(&shape, &x, |g, i| {
        let ga = g.constant(&[2], gamma.clone()).unwrap();
        let be = g.constant(&[2], beta.clone()).unwrap();
        bn(g, i, ga, be, Some((&mean, &var)))
    });
    assert_close("batch_norm running input", err, TOL);
}

/// Target on a coarse lattice and prediction offsets kept away from every
/// mask threshold, so a finite-difference step never flips a mask.
fn loss_instance(seed: u64) -> (Vec<f64>, Vec<f64>) {
    let n = 2 * 4 * 4;
    let y: Vec<f64> = uniform(n, 0.0, 1.0, seed)
        .into_iter()
        .map(|v| [0.02, 0.05, 0.3, 0.5, 0.8, 0.95][(v * 6.0) as usize % 6])
        .collect();
    let yhat = uniform(n, 0.0, 1.0, seed + 100)
        .into_iter()
        .map(|v| (v * 20.0).floor() / 20.0 + 0.0123)
        .collect();
    (y, yhat)
}

#[test]
fn physics_terms_random_instances() {
    let shape = [2, 4, 4];
    let styles = [
        ErrorStyle { norm: Norm::Squared, per_cell: false },
        ErrorStyle { norm: Norm::Squared, per_cell: true },
        ErrorStyle { norm: Norm::Absolute, per_cell: false },
    ];
    for seed in 0..5 {
        let (y, yhat) = loss_instance(seed);
        for style in styles {
            let with_y = |g: &mut Graph| g.constant(&shape, y.clone()).unwrap();
            let err = grad_check(&shape, &yhat, |g, p| {
                let t = with_y(g);
                loss_ft(g, t, p, 0.001, style).unwrap()
            });
            assert_close("loss_ft", err, TOL);
            let err = grad_check(&shape, &yhat, |g, p| {
                let t = with_y(g);
                loss_burned(g, t, p, 0.1, style).unwrap()
            });
            assert_close("loss_burned", err, TOL);
            let err = grad_check(&shape, &yhat, |g, p| {
                let t = with_y(g);
                loss_unburned(g, t, p, 0.65, style).unwrap()
            });
            assert_close("loss_unburned", err, TOL);
        }
        let err = grad_check(&shape, &yhat, |g, p| {
            let t = g.constant(&shape, y.clone()).unwrap();
            loss_gram(g, t, p).unwrap()
        });
        assert_close("loss_gram", err, TOL);
        let err = grad_check(&shape, &yhat, |g, p| {
            let t = g.constant(&shape, y.clone()).unwrap();
            total_loss(g, t, Prediction::Point(p), &LossWeights::default(), None).unwrap().0
        });
        assert_close("total_loss", err, TOL);
    }
}

fn mixture_from(g: &mut Graph, logits: Var, mu: Var, sigma_raw: Var, rate: Var) -> MixtureParams {
    let pi = g.softmax_last(logits).unwrap();
    let sp = g.softplus(sigma_raw);
    let sigma = g.add_const(sp, 1e-6);
    MixtureParams { logits, pi, mu, sigma, rate }
}

#[test]
fn mixture_likelihood_every_parameter() {
    let (t, m, p, k) = (2, 3, 3, 2);
    let shape = [t, m, p, k];
    let n = t * m * p * k;
    let logits = uniform(n, -1.0, 1.0, 20);
    let mu = uniform(n, 0.0, 1.0, 21);
    let sraw = uniform(n, -2.0, 0.5, 22);
    let y = uniform(t * m * p, 0.0, 1.0, 23);
    let rate = [40.0, 41.0];
    let nll = |g: &mut Graph, which: usize, v: Var| {
        let mut vars = [None; 3];
        vars[which] = Some(v);
        let mut pick = |i: usize, src: &[f64]| vars[i].unwrap_or_else(|| g.constant(&shape, src.to_vec()).unwrap());
        let (l, u, s) = (pick(0, &logits), pick(1, &mu), pick(2, &sraw));
        let r = g.constant(&[t], rate.to_vec()).unwrap();
        let params = mixture_from(g, l, u, s, r);
        let yv = g.constant(&[t, m, p], y.clone()).unwrap();
        mdn_nll(g, &params, yv).unwrap()
    };
    assert_close("mdn logits", grad_check(&shape, &logits, |g, v| nll(g, 0, v)), TOL);
    assert_close("mdn mu", grad_check(&shape, &mu, |g, v| nll(g, 1, v)), TOL);
    assert_close("mdn sigma", grad_check(&shape, &sraw, |g, v| nll(g, 2, v)), TOL);
    let err = grad_check(&shape, &logits, |g, l| {
        let u = g.constant(&shape, mu.clone()).unwrap();
        let s = g.constant(&shape, sraw.clone()).unwrap();
        let r = g.constant(&[t], rate.to_vec()).unwrap();
        mixture_from(g, l, u, s, r).mean(g).unwrap()
    });
    assert_close("mixture mean", err, TOL);
}

#[test]
fn poisson_free_energy_rate() {
    let frame_len = 16;
    let y: Vec<f64> = uniform(3 * frame_len, 0.0, 1.0, 30);
    let rates = [2.5, 7.0, 11.0];
    let err = grad_check(&[3], &rates, |g, r| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        poisson_head(g, r, &y, frame_len, 0.1, 5.0, &mut rng).unwrap().loss
    });
    assert_close("poisson rate", err, TOL);
}

fn model_loss(model: &EmulatorModel, x: &Tensor, y: &Tensor, weights: &LossWeights) -> f64 {
    let mut probe = model.clone();
    loss_and_grads(&mut probe, x, y, weights, false)
}

/// Builds the full training loss; with `grads`, back-propagates and stores
/// the gradients on `model`.
fn loss_and_grads(model: &mut EmulatorModel, x: &Tensor, y: &Tensor, weights: &LossWeights, grads: bool) -> f64 {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let out = model.forward(&mut g, &bound, x, Phase::Train).unwrap();
    let yv = g.constant(y.shape(), y.data().to_vec()).unwrap();
    let (pred, pp) = match out.mixture {
        Some(params) => {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let frame_len = y.shape()[1] * y.shape()[2];
            let pois = poisson_head(&mut g, params.rate, y.data(), frame_len, weights.eps_b, 20.0, &mut rng).unwrap();
            (Prediction::Mixture { params, mean: out.yhat }, Some(pois.loss))
        }
        None => (Prediction::Point(out.yhat), None),
    };
    let (total, _) = total_loss(&mut g, yv, pred, weights, pp).unwrap();
    if grads {
        g.backward(total).unwrap();
        model.zero_grad();
        model.accumulate_grads(&g, &bound).unwrap();
    }
    g.scalar(total)
}

#[test]
fn end_to_end_model_parameters() {
    let (t, m, p, c) = (2, 8, 8, 4);
    let x = Tensor::new(&[t, m, p, c], uniform(t * m * p * c, 0.0, 1.0, 40)).unwrap();
    let y = Tensor::new(&[t, m, p], uniform(t * m * p, 0.0, 1.0, 41)).unwrap();
    let config = EmulatorConfig { in_channels: c, hidden: 3, ..EmulatorConfig::default() };
    for (n, mode) in Mode::ALL.into_iter().enumerate() {
        let weights = match mode {
            Mode::Cl => LossWeights::plain(),
            Mode::Pgcl => LossWeights::default(),
            Mode::PgclPlus => LossWeights { base: Base::MdnNll, ..LossWeights::default() },
        };
        let mut model = EmulatorModel::new(config.clone(), mode, 3).unwrap();
        loss_and_grads(&mut model, &x, &y, &weights, true);
        let names: Vec<String> = model.named_params().into_iter().map(|(k, _)| k).collect();
        let count = names.len();
        let draws = uniform(20, 0.0, 1.0, 42 + n as u64);
        for pair in draws.chunks_exact(2) {
            let which = (pair[0] * count as f64) as usize;
            let len = model.params()[which].len();
            let i = (pair[1] * len as f64) as usize;
            let analytic = model.params()[which].grad().unwrap()[i];
            let base = model.params()[which].data()[i];
            let eval = |v: f64| {
                let mut probe = model.clone();
                probe.params_mut()[which].data_mut()[i] = v;
                model_loss(&probe, &x, &y, &weights)
            };
            let numeric = (eval(base + STEP) - eval(base - STEP)) / (2.0 * STEP);
            let err = rel_err(analytic, numeric);
            assert!(
                err < 1e-5,
                "{mode}: {}[{i}] analytic {analytic} numeric {numeric} err {err:e}",
                names[which]
            );
        }
    }
}

#[test]
fn convlstm_cell_step_every_parameter() {
    use ember_core::emulator::{convlstm_cell_forward, ConvLstmCell};
    let (m, p, cin, h) = (4, 3, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let cell = ConvLstmCell::new(cin, h, 3, &mut rng);
    let x = uniform(m * p * cin, -1.0, 1.0, 51);
    let h0 = uniform(m * p * h, -0.5, 0.5, 52);
    let c0 = uniform(m * p * h, -0.5, 0.5, 53);
    let params = cell.params();
    for which in 0..params.len() {
        let shape = params[which].shape().to_vec();
        let values = params[which].data().to_vec();
        let err = grad_check(&shape, &values, |g, v| {
            let mut vars: Vec<Var> = params.iter().map(|t| g.constant(t.shape(), t.data().to_vec()).unwrap()).collect();
            vars[which] = v;
            let cv = ember_core::emulator::CellVars { w_x: vars[0], w_h: vars[1], w_c: vars[2], w_co: vars[3], bias: vars[4] };
            let xv = g.constant(&[m, p, cin], x.clone()).unwrap();
            let hv = g.constant(&[m, p, h], h0.clone()).unwrap();
            let cvv = g.constant(&[m, p, h], c0.clone()).unwrap();
            let (ht, ct) = convlstm_cell_forward(g, &cv, h, xv, hv, cvv).unwrap();
            let both = g.stack(&[ht, ct]).unwrap();
            both
        });
        assert_close(&format!("cell param {which}"), err, TOL);
    }
}
