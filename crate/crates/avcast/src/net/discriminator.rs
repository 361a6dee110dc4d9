//! Multimodal discriminator: a per-frame classifier and a recurrent
//! judge that reads the frame neighborhood with its paired audio.

use super::{Binding, NetConfig, RecurrentState};
use crate::error::{AvError, Result};
use diffcore::{NodeId, Tape};

fn conv_trunk(
    cfg: &NetConfig,
    tape: &mut Tape,
    bind: &Binding,
    trunk: &str,
    frame: NodeId,
) -> Result<NodeId> {
    let shape = tape.shape(frame).to_vec();
    if shape.len() != 4 || shape[1] != 1 || shape[2] != cfg.frame_h || shape[3] != cfg.frame_w {
        return Err(AvError::invalid(
            "discriminator",
            format!(
                "expected frames [B, 1, {}, {}], got {shape:?}",
                cfg.frame_h, cfg.frame_w
            ),
        ));
    }
    let mut cur = frame;
    for i in 0..3 {
        let w = bind.id(&format!("{trunk}.conv{i}.w"))?;
        let b = bind.id(&format!("{trunk}.conv{i}.b"))?;
        let conv = tape.conv2d(cur, w, b, 2, 1)?;
        cur = tape.leaky_relu(conv, cfg.leaky_slope)?;
    }
    let (h8, w8) = cfg.bottom_hw();
    tape.reshape(cur, vec![shape[0], cfg.disc_channels[2] * h8 * w8])
        .map_err(Into::into)
}

/// Frame realism probability in (0, 1), [B, 1].
pub fn discriminate_std(
    cfg: &NetConfig,
    tape: &mut Tape,
    bind: &Binding,
    frame: NodeId,
) -> Result<NodeId> {
    let flat = conv_trunk(cfg, tape, bind, "dstd", frame)?;
    let w = bind.id("dstd.out.w")?;
    let b = bind.id("dstd.out.b")?;
    let logit = tape.linear(flat, w, Some(b))?;
    Ok(tape.sigmoid(logit)?)
}

/// One chronological (frame, audio block) pair fed to the judge.
#[derive(Clone, Copy, Debug)]
pub struct JudgeStep {
    /// [B, 1, H, W]
    pub frame: NodeId,
    /// [B, d_HA * d_WA]
    pub audio: NodeId,
}

/// Sequence judge: per step concat(conv features, audio embedding) into
/// an LSTM; the final hidden state maps to a probability.
///
/// `past` must hold R steps and `future` k-1 steps; together with the
/// judged center pair the LSTM processes R + k steps in chronological
/// order (past, center, future).
pub fn discriminate_seq(
    cfg: &NetConfig,
    tape: &mut Tape,
    bind: &Binding,
    center: JudgeStep,
    past: &[JudgeStep],
    future: &[JudgeStep],
) -> Result<NodeId> {
    if past.len() != cfg.r_history || future.len() != cfg.k_lookahead - 1 {
        return Err(AvError::invalid(
            "discriminate_seq",
            format!(
                "neighborhood must be R={} past and k-1={} future steps, got {} and {}",
                cfg.r_history,
                cfg.k_lookahead - 1,
                past.len(),
                future.len()
            ),
        ));
    }
    let batch = tape.shape(center.frame)[0];
    let mut state = RecurrentState::zeros(tape, batch, cfg.lstm_hidden)?;
    let order: Vec<JudgeStep> = past
        .iter()
        .copied()
        .chain(std::iter::once(center))
        .chain(future.iter().copied())
        .collect();
    for step in order {
        let feats = conv_trunk(cfg, tape, bind, "dseq", step.frame)?;
        let fw = bind.id("dseq.feat.w")?;
        let fb = bind.id("dseq.feat.b")?;
        let fcode = tape.linear(feats, fw, Some(fb))?;
        let fcode = tape.leaky_relu(fcode, cfg.leaky_slope)?;
        let aw = bind.id("dseq.aud.w")?;
        let ab = bind.id("dseq.aud.b")?;
        let acode = tape.linear(step.audio, aw, Some(ab))?;
        let acode = tape.leaky_relu(acode, cfg.leaky_slope)?;
        let x = tape.concat(&[fcode, acode], 1)?;
        let w_ih = bind.id("dseq.lstm.w_ih")?;
        let w_hh = bind.id("dseq.lstm.w_hh")?;
        let b = bind.id("dseq.lstm.b")?;
        let (h, c) = diffcore::lstm_cell(tape, x, state.h, state.c, w_ih, w_hh, b)?;
        state = RecurrentState { h, c };
    }
    let ow = bind.id("dseq.out.w")?;
    let ob = bind.id("dseq.out.b")?;
    let logit = tape.linear(state.h, ow, Some(ob))?;
    Ok(tape.sigmoid(logit)?)
}
