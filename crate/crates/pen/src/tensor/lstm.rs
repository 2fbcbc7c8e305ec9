//! Single-layer LSTM built from graph ops.
//!
//! Gate weights are packed column-wise as `[input | forget | candidate |
//! output]`, so `wx` is `[d_in, 4h]`, `wh` is `[h, 4h]` and `b` is `[4h]`.

use super::{Graph, Scalar, TensorRef};
use crate::error::{PenError, Result};

#[derive(Debug, Clone, Copy)]
pub struct LstmRefs {
    pub wx: TensorRef,
    pub wh: TensorRef,
    pub b: TensorRef,
    pub hidden: usize,
}

fn check_params<F: Scalar>(g: &Graph<F>, p: &LstmRefs, d_in: usize) -> Result<()> {
    let h = p.hidden;
    if g.shape(p.wx) != [d_in, 4 * h] || g.shape(p.wh) != [h, 4 * h] || g.shape(p.b) != [4 * h] {
        return Err(PenError::Shape {
            op: "lstm",
            detail: format!(
                "wx {:?}, wh {:?}, b {:?} incompatible with d_in {d_in}, hidden {h}",
                g.shape(p.wx),
                g.shape(p.wh),
                g.shape(p.b)
            ),
        });
    }
    Ok(())
}

/// Run the recurrence over `steps` inputs (each rank-1 `[d_in]`) from a zero
/// initial state, returning the hidden state after every step.
pub fn lstm_states<F: Scalar>(
    g: &mut Graph<F>,
    inputs: &[TensorRef],
    p: &LstmRefs,
    steps: usize,
) -> Result<Vec<TensorRef>> {
    if steps > inputs.len() {
        return Err(PenError::Shape {
            op: "lstm",
            detail: format!("steps {steps} exceeds input length {}", inputs.len()),
        });
    }
    let h = p.hidden;
    if steps > 0 {
        let d_in = g.shape(inputs[0]).first().copied().unwrap_or(0);
        check_params(g, p, d_in)?;
    }
    let mut hs = Vec::with_capacity(steps);
    let mut h_prev = g.zeros(&[h]);
    let mut c_prev = g.zeros(&[h]);
    for &x in inputs.iter().take(steps) {
        let zx = g.matmul(x, p.wx)?;
        let zh = g.matmul(h_prev, p.wh)?;
        let z0 = g.add(zx, zh)?;
        let z = g.add(z0, p.b)?;
        let zi = g.slice(z, 0, 0, h)?;
        let zf = g.slice(z, 0, h, h)?;
        let zg = g.slice(z, 0, 2 * h, h)?;
        let zo = g.slice(z, 0, 3 * h, h)?;
        let i = g.sigmoid(zi);
        let f = g.sigmoid(zf);
        let cand = g.tanh(zg);
        let o = g.sigmoid(zo);
        let fc = g.mul(f, c_prev)?;
        let ig = g.mul(i, cand)?;
        let c = g.add(fc, ig)?;
        let tc = g.tanh(c);
        let hn = g.mul(o, tc)?;
        hs.push(hn);
        h_prev = hn;
        c_prev = c;
    }
    Ok(hs)
}

/// Hidden state at step `real_length` (the last non-pad token). A region of
/// real length 0 yields the zero vector.
pub fn lstm_forward<F: Scalar>(
    g: &mut Graph<F>,
    inputs: &[TensorRef],
    p: &LstmRefs,
    real_length: usize,
) -> Result<TensorRef> {
    if real_length == 0 {
        return Ok(g.zeros(&[p.hidden]));
    }
    let hs = lstm_states(g, inputs, p, real_length)?;
    Ok(*hs.last().unwrap())
}

/// Same, but taking the inputs as one `[T, d_in]` tensor.
pub fn lstm_forward_matrix<F: Scalar>(
    g: &mut Graph<F>,
    inputs: TensorRef,
    p: &LstmRefs,
    real_length: usize,
) -> Result<TensorRef> {
    let t = g.shape(inputs)[0];
    if real_length > t {
        return Err(PenError::Shape {
            op: "lstm",
            detail: format!("real_length {real_length} exceeds T {t}"),
        });
    }
    let rows: Vec<TensorRef> = (0..real_length).map(|i| g.row(inputs, i)).collect::<Result<_>>()?;
    lstm_forward(g, &rows, p, real_length)
}
