//! The autoregressive sequence model: per step the prior (and, in
//! training, posterior) LSTMs read the attention-encoded audio/visual
//! streams, a latent is sampled, and the prediction LSTM plus decoder
//! emit the next frame. Training consumes real frames in the streams;
//! inference reads nothing beyond the seen prefix and the audio.

use super::attention::{stream_encode_all_causal, stream_encode_last};
use super::cnn::{decode_frame, encode_frame};
use super::stoch::{
    pn_step, posterior_step, prior_step, sample_latent_node, LatentNodes, PnState, RecurrentState,
};
use super::{Binding, NetConfig};
use crate::error::{AvError, Result};
use diffcore::{NodeId, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    /// Real frames feed the transformer streams; `pn_feed_real` selects
    /// whether the prediction LSTM also sees real frames (standard) or
    /// its own generated feedback (teacher-forcing "synthesized" draws).
    Train { pn_feed_real: bool },
    /// Only frames 1..=f_seen and the audio are read.
    Infer,
}

#[derive(Clone, Debug)]
pub enum ZSource<'a> {
    Prior,
    Posterior,
    /// Externally supplied latents, one per step t = 2..=T.
    Given(&'a [Tensor]),
}

pub struct SeqInputs<'a> {
    /// Per-frame batches [B, 1, H, W]; training needs all T, inference
    /// at least the seen prefix (extra frames are ignored, never read).
    pub frames: &'a [Tensor],
    /// Per-frame audio blocks [B, d_HA * d_WA], all T.
    pub audio_blocks: &'a [Tensor],
    pub f_seen: usize,
    pub t_total: usize,
}

pub struct SeqOut {
    /// Generated frames for t = f_seen+1 ..= t_total, in order.
    pub xhat: Vec<NodeId>,
    /// Prior (mu, log_var) per step t = 2..=T.
    pub prior: Vec<LatentNodes>,
    /// Posterior (mu, log_var) per step t = 2..=T (training only).
    pub posterior: Vec<LatentNodes>,
}

struct EncodedFrame {
    /// Position-augmented embedding [B, D].
    pe_code: NodeId,
    /// Raw embedding [B, D] (prediction-LSTM input).
    code: NodeId,
    skips: Vec<NodeId>,
}

/// Stacks per-position codes [B, D] into a sequence [B, L, D].
fn stack_seq(tape: &mut Tape, codes: &[NodeId]) -> Result<NodeId> {
    let (b, d) = {
        let s = tape.shape(codes[0]);
        (s[0], s[1])
    };
    let mut pieces = Vec::with_capacity(codes.len());
    for &c in codes {
        pieces.push(tape.reshape(c, vec![b, 1, d])?);
    }
    tape.concat(&pieces, 1).map_err(Into::into)
}

pub fn run_sequence(
    cfg: &NetConfig,
    tape: &mut Tape,
    bind: &mut Binding,
    pe_table: &Tensor,
    inputs: &SeqInputs,
    mode: RunMode,
    z_source: ZSource,
    noise: &[Tensor],
) -> Result<SeqOut> {
    let (f_seen, t_total) = (inputs.f_seen, inputs.t_total);
    if f_seen > t_total {
        return Err(AvError::invalid(
            "run_sequence",
            format!("f_seen {f_seen} exceeds t_total {t_total}"),
        ));
    }
    if f_seen == 0 {
        return Err(AvError::invalid("run_sequence", "need at least one seen frame"));
    }
    let visible = match mode {
        RunMode::Train { .. } => t_total,
        RunMode::Infer => f_seen,
    };
    if inputs.frames.len() < visible {
        return Err(AvError::invalid(
            "run_sequence",
            format!("{} frames supplied, {visible} required", inputs.frames.len()),
        ));
    }
    if inputs.audio_blocks.len() < t_total {
        return Err(AvError::invalid(
            "run_sequence",
            format!(
                "{} audio blocks supplied, {t_total} required",
                inputs.audio_blocks.len()
            ),
        ));
    }
    let steps = t_total.saturating_sub(1);
    match &z_source {
        ZSource::Given(zs) if zs.len() < steps => {
            return Err(AvError::invalid(
                "run_sequence",
                format!("{} latents supplied, {steps} required", zs.len()),
            ));
        }
        ZSource::Prior | ZSource::Posterior if noise.len() < steps => {
            return Err(AvError::invalid(
                "run_sequence",
                format!("{} noise vectors supplied, {steps} required", noise.len()),
            ));
        }
        _ => {}
    }
    if pe_table.shape()[0] < t_total {
        return Err(AvError::invalid(
            "run_sequence",
            format!("position table covers {}, need {t_total}", pe_table.shape()[0]),
        ));
    }
    let is_train = matches!(mode, RunMode::Train { .. });
    if matches!(z_source, ZSource::Posterior) && !is_train {
        return Err(AvError::invalid(
            "run_sequence",
            "posterior latents are a training-only source",
        ));
    }

    let mut out = SeqOut {
        xhat: Vec::new(),
        prior: Vec::new(),
        posterior: Vec::new(),
    };
    if t_total < 2 {
        return Ok(out);
    }
    let batch = inputs.frames[0].shape()[0];
    let d = cfg.embed_dim;

    let pe_rows: Vec<NodeId> = (0..t_total)
        .map(|i| super::position_row(tape, pe_table, i))
        .collect::<Result<Vec<_>>>()?;

    // Encode every visible real frame once; embeddings, skips and the
    // position-augmented codes are shared by all consumers.
    let mut enc: Vec<EncodedFrame> = Vec::with_capacity(t_total);
    for i in 0..visible {
        let x = tape.constant(inputs.frames[i].clone())?;
        let (code, skips) = encode_frame(cfg, tape, bind, x)?;
        let pe_code = tape.add_bcast(code, pe_rows[i])?;
        enc.push(EncodedFrame { pe_code, code, skips });
    }

    // Audio codes with position augmentation.
    let mut audio_pe: Vec<NodeId> = Vec::with_capacity(t_total);
    for i in 0..t_total {
        let a = tape.constant(inputs.audio_blocks[i].clone())?;
        let w = bind.id("aud.embed.w")?;
        let b = bind.id("aud.embed.b")?;
        let lin = tape.linear(a, w, Some(b))?;
        let code = tape.tanh(lin)?;
        audio_pe.push(tape.add_bcast(code, pe_rows[i])?);
    }

    // Audio stream: position i of the causal pass encodes blocks 1..=i+1,
    // so O^A_t is row min(t+k-1, T)-1. The audio is fully known up front
    // in both modes, and the causal pass never reads past its row.
    let single_layer = cfg.tf_layers == 1;
    let audio_all = if single_layer {
        let seq = stack_seq(tape, &audio_pe)?;
        Some(stream_encode_all_causal(cfg, tape, bind, "tfa", seq)?)
    } else {
        None
    };
    let audio_at = |tape: &mut Tape, bind: &Binding, pos: usize| -> Result<NodeId> {
        match audio_all {
            Some(all) => {
                let row = tape.slice(all, 1, pos, 1)?;
                tape.reshape(row, vec![batch, d]).map_err(Into::into)
            }
            None => {
                let seq = stack_seq(tape, &audio_pe[..=pos])?;
                stream_encode_last(cfg, tape, bind, "tfa", seq)
            }
        }
    };

    // Visual streams. In training all positions are real, so a single
    // causal pass serves every step; at inference the prior stream grows
    // with generated frames and is re-encoded per prefix.
    let (vm_all, vq_all) = if is_train && single_layer {
        let vm_codes: Vec<NodeId> = enc[..t_total - 1].iter().map(|e| e.pe_code).collect();
        let vq_codes: Vec<NodeId> = enc[..t_total].iter().map(|e| e.pe_code).collect();
        let vm_seq = stack_seq(tape, &vm_codes)?;
        let vq_seq = stack_seq(tape, &vq_codes)?;
        (
            Some(stream_encode_all_causal(cfg, tape, bind, "tfvm", vm_seq)?),
            Some(stream_encode_all_causal(cfg, tape, bind, "tfvq", vq_seq)?),
        )
    } else {
        (None, None)
    };

    let mut pn_state = PnState::zeros(cfg, tape, batch)?;
    let mut prior_state = RecurrentState::zeros(tape, batch, cfg.lstm_hidden)?;
    let mut post_state = RecurrentState::zeros(tape, batch, cfg.lstm_hidden)?;

    for t in 2..=t_total {
        // Prior visual context M^V_{t-1}: frames 1..=t-1.
        let m_v = match vm_all {
            Some(all) => {
                let row = tape.slice(all, 1, t - 2, 1)?;
                tape.reshape(row, vec![batch, d])?
            }
            None => {
                let codes: Vec<NodeId> = enc[..t - 1].iter().map(|e| e.pe_code).collect();
                let seq = stack_seq(tape, &codes)?;
                stream_encode_last(cfg, tape, bind, "tfvm", seq)?
            }
        };
        let audio_pos = (t + cfg.k_lookahead - 1).min(t_total) - 1;
        let o_a = audio_at(tape, bind, audio_pos)?;

        let (prior_latent, next_prior) = prior_step(tape, bind, o_a, m_v, prior_state)?;
        prior_state = next_prior;
        out.prior.push(prior_latent);

        let post_latent = if is_train {
            // Posterior visual context Q^V_t: frames 1..=t.
            let q_v = match vq_all {
                Some(all) => {
                    let row = tape.slice(all, 1, t - 1, 1)?;
                    tape.reshape(row, vec![batch, d])?
                }
                None => {
                    let codes: Vec<NodeId> = enc[..t].iter().map(|e| e.pe_code).collect();
                    let seq = stack_seq(tape, &codes)?;
                    stream_encode_last(cfg, tape, bind, "tfvq", seq)?
                }
            };
            let (latent, next_post) = posterior_step(tape, bind, o_a, q_v, post_state)?;
            post_state = next_post;
            out.posterior.push(latent);
            Some(latent)
        } else {
            None
        };

        let z = match &z_source {
            ZSource::Prior => {
                let n = tape.constant(noise[t - 2].clone())?;
                sample_latent_node(tape, prior_latent, n)?
            }
            ZSource::Posterior => {
                let n = tape.constant(noise[t - 2].clone())?;
                sample_latent_node(tape, post_latent.expect("train mode"), n)?
            }
            ZSource::Given(zs) => tape.constant(zs[t - 2].clone())?,
        };

        // Prediction-network input: frame t-1. The enc table already
        // holds the right entry: real frames for the seen prefix (and
        // throughout standard training), generated feedback otherwise.
        let (code, skips) = {
            let src = &enc[t - 2];
            (src.code, src.skips.clone())
        };

        let (eta, next_pn) = pn_step(cfg, tape, bind, code, z, &pn_state)?;
        pn_state = next_pn;

        if t > f_seen {
            let frame = decode_frame(cfg, tape, bind, eta, &skips)?;
            out.xhat.push(frame);
            // Autoregressive feedback: encode the generated frame when a
            // later step will consume it.
            let need_feedback = match mode {
                RunMode::Infer => t < t_total,
                RunMode::Train { pn_feed_real } => !pn_feed_real && t < t_total,
            };
            if need_feedback {
                let (gcode, gskips) = encode_frame(cfg, tape, bind, frame)?;
                match mode {
                    RunMode::Infer => {
                        let g_pe = tape.add_bcast(gcode, pe_rows[t - 1])?;
                        enc.push(EncodedFrame {
                            pe_code: g_pe,
                            code: gcode,
                            skips: gskips,
                        });
                    }
                    RunMode::Train { .. } => {
                        // Streams keep reading the real frames; only the
                        // prediction input switches to the feedback.
                        let real_pe = enc[t - 1].pe_code;
                        enc[t - 1] = EncodedFrame {
                            pe_code: real_pe,
                            code: gcode,
                            skips: gskips,
                        };
                    }
                }
            }
        }
    }
    Ok(out)
}
