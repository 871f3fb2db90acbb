//! Layer building blocks on a tape.

use std::sync::Arc;

use crate::diffcore::{column_index, tile_index, Tape, Var};
use crate::error::Result;

/// `x · w + b` for `x: [n, d]`, `w: [d, h]`, `b: [h]`.
pub fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    let (n, h) = (tape.shape(y)[0], tape.shape(y)[1]);
    let bt = tape.gather(b, tile_index(n, h), &[n, h])?;
    tape.add(y, bt)
}

pub fn linear_relu(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = linear(tape, x, w, b)?;
    tape.relu(y)
}

/// Repeat a `[h]` vector over `n` rows.
pub fn tile(tape: &mut Tape, v: Var, n: usize) -> Result<Var> {
    let h = tape.shape(v)[0];
    tape.gather(v, tile_index(n, h), &[n, h])
}

/// `x + mask ⊙ tile(v)` where `mask` marks the rows receiving `v`.
pub fn add_where(tape: &mut Tape, x: Var, v: Var, rows: &[bool]) -> Result<Var> {
    if !rows.iter().any(|&r| r) {
        return Ok(x);
    }
    let h = tape.shape(v)[0];
    let idx: Arc<[usize]> = rows
        .iter()
        .flat_map(|&r| (0..h).map(move |c| if r { c } else { crate::diffcore::PAD }))
        .collect();
    let t = tape.gather(v, idx, &[rows.len(), h])?;
    tape.add(x, t)
}

/// Single-layer LSTM parameters, gate order `i, f, g, o`.
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub wx: Var,
    pub wh: Var,
    pub b: Var,
    pub h0: Var,
    pub c0: Var,
}

/// Run an LSTM over a time-major input `[steps * batch, features]` and
/// return the final hidden state `[batch, hidden]`.
pub fn lstm(tape: &mut Tape, p: &LstmVars, xs: Var, steps: usize, batch: usize) -> Result<Var> {
    let hidden = tape.shape(p.wh)[0];
    if batch == 0 {
        return tape.constant(Vec::new(), &[0, hidden]);
    }
    let g4 = 4 * hidden;
    let xw = linear(tape, xs, p.wx, p.b)?;
    let mut h = tile(tape, p.h0, batch)?;
    let mut c = tile(tape, p.c0, batch)?;
    let cols: Vec<Arc<[usize]>> = (0..4).map(|q| column_index(batch, g4, q * hidden, hidden)).collect();
    for t in 0..steps {
        let rows: Arc<[usize]> = (t * batch * g4..(t + 1) * batch * g4).collect();
        let xt = tape.gather(xw, rows, &[batch, g4])?;
        let hw = tape.matmul(h, p.wh)?;
        let z = tape.add(xt, hw)?;
        let i = tape.gather(z, cols[0].clone(), &[batch, hidden])?;
        let i = tape.sigmoid(i)?;
        let f = tape.gather(z, cols[1].clone(), &[batch, hidden])?;
        let f = tape.sigmoid(f)?;
        let g = tape.gather(z, cols[2].clone(), &[batch, hidden])?;
        let g = tape.tanh(g)?;
        let o = tape.gather(z, cols[3].clone(), &[batch, hidden])?;
        let o = tape.sigmoid(o)?;
        let fc = tape.mul(f, c)?;
        let ig = tape.mul(i, g)?;
        c = tape.add(fc, ig)?;
        let tc = tape.tanh(c)?;
        h = tape.mul(o, tc)?;
    }
    Ok(h)
}
