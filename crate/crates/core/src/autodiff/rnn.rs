//! Recurrent cells assembled from tape primitives.
//!
//! Gate blocks are stacked row-wise in the weight matrices: `i, f, g, o` for
//! the LSTM and `r, z, n` for the GRU.

use crate::error::{Error, Result};

use super::tape::{Tape, Var};

#[derive(Debug, Clone, Copy)]
pub struct LstmWeights {
    /// `[4H, in]`
    pub w_ih: Var,
    /// `[4H, H]`
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct GruWeights {
    /// `[3H, in]`
    pub w_ih: Var,
    /// `[3H, H]`
    pub w_hh: Var,
    pub b_ih: Var,
    pub b_hh: Var,
}

fn hidden_size(tape: &Tape, h: Var, w_hh: Var, gates: usize) -> Result<usize> {
    let hs = tape.shape(h)[1];
    if tape.shape(w_hh) != [gates * hs, hs] {
        return Err(Error::Dimension(format!(
            "recurrent weight {:?} does not fit hidden size {hs}",
            tape.shape(w_hh)
        )));
    }
    Ok(hs)
}

/// One LSTM step on `x[N, in]`, `h[N, H]`, `c[N, H]`; returns `(h', c')`.
pub fn lstm_cell(tape: &mut Tape, x: Var, h: Var, c: Var, w: &LstmWeights) -> Result<(Var, Var)> {
    let hs = hidden_size(tape, h, w.w_hh, 4)?;
    let a = tape.linear(x, w.w_ih, Some(w.b_ih))?;
    let b = tape.linear(h, w.w_hh, Some(w.b_hh))?;
    let pre = tape.add(a, b)?;
    let gate = |tape: &mut Tape, k: usize| tape.slice_cols(pre, k * hs, hs);
    let i = gate(tape, 0)?;
    let f = gate(tape, 1)?;
    let g = gate(tape, 2)?;
    let o = gate(tape, 3)?;
    let i = tape.sigmoid(i);
    let f = tape.sigmoid(f);
    let g = tape.tanh(g);
    let o = tape.sigmoid(o);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next);
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// One GRU step: `h' = (1 - z) * h + z * n`.
pub fn gru_cell(tape: &mut Tape, x: Var, h: Var, w: &GruWeights) -> Result<Var> {
    let hs = hidden_size(tape, h, w.w_hh, 3)?;
    let a = tape.linear(x, w.w_ih, Some(w.b_ih))?;
    let b = tape.linear(h, w.w_hh, Some(w.b_hh))?;
    let ar = tape.slice_cols(a, 0, hs)?;
    let az = tape.slice_cols(a, hs, hs)?;
    let an = tape.slice_cols(a, 2 * hs, hs)?;
    let br = tape.slice_cols(b, 0, hs)?;
    let bz = tape.slice_cols(b, hs, hs)?;
    let bn = tape.slice_cols(b, 2 * hs, hs)?;
    let r = tape.add(ar, br)?;
    let r = tape.sigmoid(r);
    let z = tape.add(az, bz)?;
    let z = tape.sigmoid(z);
    let rb = tape.mul(r, bn)?;
    let n = tape.add(an, rb)?;
    let n = tape.tanh(n);
    let keep = tape.affine(z, -1.0, 1.0);
    let carried = tape.mul(keep, h)?;
    let fresh = tape.mul(z, n)?;
    tape.add(carried, fresh)
}
