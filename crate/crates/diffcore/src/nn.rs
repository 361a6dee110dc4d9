//! Composite layers built from tape primitives. Their gradients come
//! from the primitives, so they stay exact by construction.

use crate::error::{DiffError, Result};
use crate::tape::{NodeId, Tape};

/// One LSTM cell step for a batch.
///
/// `x` is [B, din], `h`/`c` are [B, dh], `w_ih` is [4*dh, din],
/// `w_hh` is [4*dh, dh], `bias` is [4*dh]. Gate order is input, forget,
/// cell, output. Returns the new (h, c).
pub fn lstm_cell(
    tape: &mut Tape,
    x: NodeId,
    h: NodeId,
    c: NodeId,
    w_ih: NodeId,
    w_hh: NodeId,
    bias: NodeId,
) -> Result<(NodeId, NodeId)> {
    let dh4 = tape.shape(w_ih)[0];
    if dh4 % 4 != 0 {
        return Err(DiffError::shape(
            "lstm_cell",
            format!("gate dimension {dh4} is not a multiple of 4"),
        ));
    }
    let dh = dh4 / 4;
    if tape.shape(h) != [tape.shape(x)[0], dh] {
        return Err(DiffError::shape(
            "lstm_cell",
            format!("hidden shape {:?} does not match [batch, {dh}]", tape.shape(h)),
        ));
    }
    let gx = tape.linear(x, w_ih, Some(bias))?;
    let gh = tape.linear(h, w_hh, None)?;
    let gates = tape.add(gx, gh)?;
    let i_raw = tape.slice(gates, 1, 0, dh)?;
    let f_raw = tape.slice(gates, 1, dh, dh)?;
    let g_raw = tape.slice(gates, 1, 2 * dh, dh)?;
    let o_raw = tape.slice(gates, 1, 3 * dh, dh)?;
    let i = tape.sigmoid(i_raw)?;
    let f = tape.sigmoid(f_raw)?;
    let g = tape.tanh(g_raw)?;
    let o = tape.sigmoid(o_raw)?;
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_new = tape.add(fc, ig)?;
    let c_act = tape.tanh(c_new)?;
    let h_new = tape.mul(o, c_act)?;
    Ok((h_new, c_new))
}
