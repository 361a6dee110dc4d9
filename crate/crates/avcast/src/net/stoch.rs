//! Stochastic machinery: prior/posterior LSTMs with Gaussian heads,
//! the reparameterized sampler, and the prediction LSTM step.

use super::{Binding, NetConfig};
use crate::error::{AvError, Result};
use diffcore::{lstm_cell, NodeId, Tape, Tensor};

/// Diagonal Gaussian over the latent code.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGaussian {
    pub mu: Tensor,
    pub log_var: Tensor,
}

impl LatentGaussian {
    pub fn new(mu: Tensor, log_var: Tensor) -> Result<Self> {
        if mu.shape() != log_var.shape() {
            return Err(AvError::invalid(
                "latent_gaussian",
                format!("mu {:?} vs log_var {:?}", mu.shape(), log_var.shape()),
            ));
        }
        Ok(LatentGaussian { mu, log_var })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }
}

/// Tape node pair (mu, log_var).
#[derive(Clone, Copy, Debug)]
pub struct LatentNodes {
    pub mu: NodeId,
    pub log_var: NodeId,
}

/// Hidden/cell pair of one LSTM layer, [B, hidden] each.
#[derive(Clone, Copy, Debug)]
pub struct RecurrentState {
    pub h: NodeId,
    pub c: NodeId,
}

impl RecurrentState {
    pub fn zeros(tape: &mut Tape, batch: usize, hidden: usize) -> Result<Self> {
        Ok(RecurrentState {
            h: tape.constant(Tensor::zeros(vec![batch, hidden]))?,
            c: tape.constant(Tensor::zeros(vec![batch, hidden]))?,
        })
    }
}

/// Multi-layer prediction-LSTM state.
#[derive(Clone, Debug)]
pub struct PnState {
    pub layers: Vec<RecurrentState>,
}

impl PnState {
    pub fn zeros(cfg: &NetConfig, tape: &mut Tape, batch: usize) -> Result<Self> {
        let layers = (0..cfg.pn_layers)
            .map(|_| RecurrentState::zeros(tape, batch, cfg.lstm_hidden))
            .collect::<Result<Vec<_>>>()?;
        Ok(PnState { layers })
    }
}

fn lstm_step(
    tape: &mut Tape,
    bind: &Binding,
    prefix: &str,
    x: NodeId,
    state: RecurrentState,
) -> Result<RecurrentState> {
    let w_ih = bind.id(&format!("{prefix}.w_ih"))?;
    let w_hh = bind.id(&format!("{prefix}.w_hh"))?;
    let b = bind.id(&format!("{prefix}.b"))?;
    let (h, c) = lstm_cell(tape, x, state.h, state.c, w_ih, w_hh, b)?;
    Ok(RecurrentState { h, c })
}

fn gaussian_head(
    tape: &mut Tape,
    bind: &Binding,
    stream: &str,
    h: NodeId,
) -> Result<LatentNodes> {
    let mu_w = bind.id(&format!("{stream}.mu.w"))?;
    let mu_b = bind.id(&format!("{stream}.mu.b"))?;
    let lv_w = bind.id(&format!("{stream}.logvar.w"))?;
    let lv_b = bind.id(&format!("{stream}.logvar.b"))?;
    Ok(LatentNodes {
        mu: tape.linear(h, mu_w, Some(mu_b))?,
        log_var: tape.linear(h, lv_w, Some(lv_b))?,
    })
}

/// One prior step: LSTM over concat(audio code, prior-stream visual
/// code), then linear heads for (mu, log Sigma).
pub fn prior_step(
    tape: &mut Tape,
    bind: &Binding,
    o_a: NodeId,
    m_v: NodeId,
    state: RecurrentState,
) -> Result<(LatentNodes, RecurrentState)> {
    let x = tape.concat(&[o_a, m_v], 1)?;
    let next = lstm_step(tape, bind, "prior.lstm", x, state)?;
    Ok((gaussian_head(tape, bind, "prior", next.h)?, next))
}

/// Posterior analogue, conditioned on the posterior visual stream.
pub fn posterior_step(
    tape: &mut Tape,
    bind: &Binding,
    o_a: NodeId,
    q_v: NodeId,
    state: RecurrentState,
) -> Result<(LatentNodes, RecurrentState)> {
    let x = tape.concat(&[o_a, q_v], 1)?;
    let next = lstm_step(tape, bind, "post.lstm", x, state)?;
    Ok((gaussian_head(tape, bind, "post", next.h)?, next))
}

/// z = mu + exp(log_var / 2) .* noise on the tape.
pub fn sample_latent_node(
    tape: &mut Tape,
    latent: LatentNodes,
    noise: NodeId,
) -> Result<NodeId> {
    let half = tape.scale(latent.log_var, 0.5)?;
    let std = tape.exp(half)?;
    let scaled = tape.mul(std, noise)?;
    Ok(tape.add(latent.mu, scaled)?)
}

/// Plain-value reparameterized sample.
pub fn sample_latent(g: &LatentGaussian, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != g.dim() {
        return Err(AvError::invalid(
            "sample_latent",
            format!("noise dim {} != latent dim {}", noise.len(), g.dim()),
        ));
    }
    Ok(g.mu
        .data()
        .iter()
        .zip(g.log_var.data())
        .zip(noise)
        .map(|((&m, &lv), &n)| m + (lv / 2.0).exp() * n)
        .collect())
}

/// One prediction-network step: concat(frame embedding, z) through the
/// stacked LSTM; eta is the top layer's hidden state.
pub fn pn_step(
    cfg: &NetConfig,
    tape: &mut Tape,
    bind: &Binding,
    embedding: NodeId,
    z: NodeId,
    state: &PnState,
) -> Result<(NodeId, PnState)> {
    let din = tape.shape(embedding)[1] + tape.shape(z)[1];
    if din != cfg.pn_input_dim() {
        return Err(AvError::invalid(
            "pn_step",
            format!("input dim {} != {}", din, cfg.pn_input_dim()),
        ));
    }
    let mut x = tape.concat(&[embedding, z], 1)?;
    let mut layers = Vec::with_capacity(state.layers.len());
    for (l, st) in state.layers.iter().enumerate() {
        let next = lstm_step(tape, bind, &format!("pn.l{l}"), x, *st)?;
        x = next.h;
        layers.push(next);
    }
    Ok((x, PnState { layers }))
}
