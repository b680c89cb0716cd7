//! Central finite-difference checks for tape gradients.

use super::{Graph, Tensor, Var};

pub const STEP: f64 = 1e-6;

/// Gradients smaller than this in magnitude are compared absolutely.
pub const FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.3 + 0.7 * ((i as f64) * 1.7 + 0.4).sin()).collect()
}

/// Non-scalar outputs are reduced with fixed, asymmetric weights.
fn to_scalar(g: &mut Graph, out: Var) -> Var {
    if g.shape(out).is_empty() {
        return out;
    }
    let shape = g.shape(out).to_vec();
    let w = weights(g.value(out).len());
    let w = g.constant(&shape, w).expect("weights match the output");
    let prod = g.mul(out, w).expect("shapes agree");
    g.sum_all(prod)
}

fn eval(shape: &[usize], x: &[f64], f: &impl Fn(&mut Graph, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = g.constant(shape, x.to_vec()).expect("input matches shape");
    let out = f(&mut g, v);
    let s = to_scalar(&mut g, out);
    g.scalar(s)
}

/// Largest [`rel_err`] between the tape gradient of `f` at `x` and a
/// central difference, over every input element.
pub fn grad_check(shape: &[usize], x: &[f64], f: impl Fn(&mut Graph, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let t = Tensor::new(shape, x.to_vec()).expect("input matches shape").with_grad();
    let v = g.leaf(&t);
    let out = f(&mut g, v);
    let root = to_scalar(&mut g, out);
    g.backward(root).expect("scalar root");
    let analytic = g.grad(v).map_or_else(|| vec![0.0; x.len()], <[f64]>::to_vec);
    let mut worst = 0.0f64;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + STEP;
        let up = eval(shape, &xp, &f);
        xp[i] = x[i] - STEP;
        let down = eval(shape, &xp, &f);
        xp[i] = x[i];
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * STEP)));
    }
    worst
}
