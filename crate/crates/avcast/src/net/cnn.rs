//! Frame encoder (conv / batch-norm / leaky-ReLU stages with skip
//! outputs) and the mirrored decoder (skip concatenation, deconv
//! stages, sigmoid output).

use super::{Binding, NetConfig};
use crate::error::{AvError, Result};
use diffcore::{NodeId, Tape};

/// Encodes frames [B, 1, H, W] to a tanh-bounded embedding [B, d] plus
/// the per-stage activations used as decoder skip inputs.
pub fn encode_frame(
    cfg: &NetConfig,
    tape: &mut Tape,
    bind: &mut Binding,
    x: NodeId,
) -> Result<(NodeId, Vec<NodeId>)> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 4 || shape[1] != 1 || shape[2] != cfg.frame_h || shape[3] != cfg.frame_w {
        return Err(AvError::invalid(
            "encode_frame",
            format!(
                "expected [B, 1, {}, {}], got {shape:?}",
                cfg.frame_h, cfg.frame_w
            ),
        ));
    }
    let b = shape[0];
    let mut skips = Vec::with_capacity(3);
    let mut cur = x;
    for i in 0..3 {
        let w = bind.id(&format!("enc.conv{i}.w"))?;
        let bb = bind.id(&format!("enc.conv{i}.b"))?;
        let conv = tape.conv2d(cur, w, bb, 2, 1)?;
        let norm = bind.batchnorm(tape, &format!("enc.bn{i}"), conv, cfg.bn_eps)?;
        cur = tape.leaky_relu(norm, cfg.leaky_slope)?;
        skips.push(cur);
    }
    let (h8, w8) = cfg.bottom_hw();
    let flat = tape.reshape(cur, vec![b, cfg.enc_channels[2] * h8 * w8])?;
    let fw = bind.id("enc.fc.w")?;
    let fb = bind.id("enc.fc.b")?;
    let lin = tape.linear(flat, fw, Some(fb))?;
    let code = tape.tanh(lin)?;
    Ok((code, skips))
}

/// Decodes the prediction-LSTM output [B, hidden] back to a frame in
/// [0, 1], concatenating the paired encoder skips stage by stage.
pub fn decode_frame(
    cfg: &NetConfig,
    tape: &mut Tape,
    bind: &mut Binding,
    eta: NodeId,
    skips: &[NodeId],
) -> Result<NodeId> {
    if skips.len() != 3 {
        return Err(AvError::invalid(
            "decode_frame",
            format!("expected 3 skip tensors, got {}", skips.len()),
        ));
    }
    let b = tape.shape(eta)[0];
    let [c1, c2, c3] = cfg.enc_channels;
    let (h8, w8) = cfg.bottom_hw();

    let fw = bind.id("dec.fc.w")?;
    let fb = bind.id("dec.fc.b")?;
    let lin = tape.linear(eta, fw, Some(fb))?;
    let grid = tape.reshape(lin, vec![b, c3, h8, w8])?;
    let norm0 = bind.batchnorm(tape, "dec.bn0", grid, cfg.bn_eps)?;
    let mut cur = tape.leaky_relu(norm0, cfg.leaky_slope)?;

    // Stages walk the skips from deepest to shallowest.
    let plan: [(usize, NodeId, Option<&str>); 3] = [
        (0, skips[2], Some("dec.bn1")),
        (1, skips[1], Some("dec.bn2")),
        (2, skips[0], None),
    ];
    for (i, skip, bn) in plan {
        let expect_c = match i {
            0 => c3,
            1 => c2,
            _ => c1,
        };
        let s_shape = tape.shape(skip).to_vec();
        if s_shape != tape.shape(cur) || s_shape[1] != expect_c {
            return Err(AvError::invalid(
                "decode_frame",
                format!(
                    "skip {} shape {:?} does not pair with decoder state {:?}",
                    i,
                    s_shape,
                    tape.shape(cur)
                ),
            ));
        }
        let merged = tape.concat(&[cur, skip], 1)?;
        let w = bind.id(&format!("dec.deconv{i}.w"))?;
        let bb = bind.id(&format!("dec.deconv{i}.b"))?;
        let up = tape.deconv2d(merged, w, bb, 2, 1)?;
        cur = match bn {
            Some(prefix) => {
                let n = bind.batchnorm(tape, prefix, up, cfg.bn_eps)?;
                tape.leaky_relu(n, cfg.leaky_slope)?
            }
            None => tape.sigmoid(up)?,
        };
    }
    Ok(cur)
}
