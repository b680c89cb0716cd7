use rand::Rng;

use crate::error::Result;
use crate::tensor::{Graph, Tensor, Var};

/// One ConvLSTM layer with peephole access to the cell state.
///
/// The gate convolution over `[x; h; c]` is split into three kernels so that
/// the candidate `g` can skip the cell state and the output gate can see the
/// *updated* cell state:
///
/// ```text
/// i = sigmoid(Wx_i*x + Wh_i*h' + Wc_i*c' + b_i)
/// f = sigmoid(Wx_f*x + Wh_f*h' + Wc_f*c' + b_f)
/// g = tanh   (Wx_g*x + Wh_g*h'            + b_g)
/// c = f . c' + i . g
/// o = sigmoid(Wx_o*x + Wh_o*h' + Wco*c    + b_o)
/// h = o . tanh(c)
/// ```
#[derive(Debug, Clone)]
pub struct ConvLstmCell {
    pub in_channels: usize,
    pub hidden: usize,
    pub kernel: usize,
    /// `[k, k, Cin, 4H]`, gate order i, f, g, o.
    pub w_x: Tensor,
    /// `[k, k, H, 4H]`.
    pub w_h: Tensor,
    /// `[k, k, H, 2H]`, cell-state contribution to i and f.
    pub w_c: Tensor,
    /// `[k, k, H, H]`, updated-cell contribution to o.
    pub w_co: Tensor,
    /// `[4H]`.
    pub bias: Tensor,
}

/// Graph handles for one cell's parameters.
#[derive(Debug, Clone, Copy)]
pub struct CellVars {
    pub w_x: Var,
    pub w_h: Var,
    pub w_c: Var,
    pub w_co: Var,
    pub bias: Var,
}

impl ConvLstmCell {
    pub fn new(in_channels: usize, hidden: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (kernel * kernel * (in_channels + 2 * hidden)) as f64;
        let bound = (1.0 / fan_in).sqrt();
        let mut uniform = |shape: &[usize]| {
            Tensor::from_fn(shape, |_| rng.random_range(-bound..bound)).with_grad()
        };
        let k = kernel;
        let w_x = uniform(&[k, k, in_channels, 4 * hidden]);
        let w_h = uniform(&[k, k, hidden, 4 * hidden]);
        let w_c = uniform(&[k, k, hidden, 2 * hidden]);
        let w_co = uniform(&[k, k, hidden, hidden]);
        let mut bias = Tensor::zeros(&[4 * hidden]).with_grad();
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        Self {
            in_channels,
            hidden,
            kernel,
            w_x,
            w_h,
            w_c,
            w_co,
            bias,
        }
    }

    pub fn params(&self) -> [&Tensor; 5] {
        [&self.w_x, &self.w_h, &self.w_c, &self.w_co, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 5] {
        [
            &mut self.w_x,
            &mut self.w_h,
            &mut self.w_c,
            &mut self.w_co,
            &mut self.bias,
        ]
    }

    pub fn bind(&self, g: &mut Graph) -> CellVars {
        CellVars {
            w_x: g.leaf(&self.w_x),
            w_h: g.leaf(&self.w_h),
            w_c: g.leaf(&self.w_c),
            w_co: g.leaf(&self.w_co),
            bias: g.leaf(&self.bias),
        }
    }
}

/// One recurrent step: `(x_t, h_{t-1}, c_{t-1}) -> (h_t, c_t)`.
pub fn convlstm_cell_forward(
    g: &mut Graph,
    cell: &CellVars,
    hidden: usize,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let zeros4 = g.constant(&[4 * hidden], vec![0.0; 4 * hidden])?;
    let zeros2 = g.constant(&[2 * hidden], vec![0.0; 2 * hidden])?;
    let zeros1 = g.constant(&[hidden], vec![0.0; hidden])?;

    let ax = g.conv2d_same(x, cell.w_x, cell.bias)?;
    let ah = g.conv2d_same(h_prev, cell.w_h, zeros4)?;
    let a = g.add(ax, ah)?;
    let peep = g.conv2d_same(c_prev, cell.w_c, zeros2)?;

    let a_i = g.slice_last(a, 0, hidden)?;
    let p_i = g.slice_last(peep, 0, hidden)?;
    let pre_i = g.add(a_i, p_i)?;
    let i = g.sigmoid(pre_i);

    let a_f = g.slice_last(a, hidden, hidden)?;
    let p_f = g.slice_last(peep, hidden, hidden)?;
    let pre_f = g.add(a_f, p_f)?;
    let f = g.sigmoid(pre_f);

    let a_g = g.slice_last(a, 2 * hidden, hidden)?;
    let cand = g.tanh(a_g);

    let keep = g.mul(f, c_prev)?;
    let write = g.mul(i, cand)?;
    let c = g.add(keep, write)?;

    let a_o = g.slice_last(a, 3 * hidden, hidden)?;
    let p_o = g.conv2d_same(c, cell.w_co, zeros1)?;
    let pre_o = g.add(a_o, p_o)?;
    let o = g.sigmoid(pre_o);

    let tc = g.tanh(c);
    let h = g.mul(o, tc)?;
    Ok((h, c))
}
