//! Learnable networks: the frame encoder/decoder with skip connections,
//! the two-layer prediction LSTM, audio/visual self-attention encoders
//! feeding single-layer prior/posterior LSTMs, reparameterized latent
//! sampling, and the two-part multimodal discriminator.

mod attention;
mod cnn;
mod discriminator;
mod sequence;
mod stoch;

pub use attention::{stream_encode_all_causal, stream_encode_last, transformer_encode};
pub use cnn::{decode_frame, encode_frame};
pub use discriminator::{discriminate_seq, discriminate_std, JudgeStep};
pub use sequence::{run_sequence, RunMode, SeqInputs, SeqOut, ZSource};
pub use stoch::{
    pn_step, posterior_step, prior_step, sample_latent, sample_latent_node, LatentGaussian,
    LatentNodes, PnState, RecurrentState,
};

use crate::error::{AvError, Result};
use diffcore::{NodeId, ParamStore, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub frame_h: usize,
    pub frame_w: usize,
    /// Channels of the three encoder stages.
    pub enc_channels: [usize; 3],
    /// Frame embedding width (128 throughout).
    pub embed_dim: usize,
    pub z_dim: usize,
    pub lstm_hidden: usize,
    pub pn_layers: usize,
    pub heads: usize,
    pub tf_layers: usize,
    pub ff_dim: usize,
    pub ff_enabled: bool,
    pub leaky_slope: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    /// STFT block shape (rows, cols) of one audio frame.
    pub audio_bins: usize,
    pub audio_cols: usize,
    pub disc_channels: [usize; 3],
    pub disc_audio_dim: usize,
    /// Discriminator frame history R and audio look-ahead k.
    pub r_history: usize,
    pub k_lookahead: usize,
    /// Maximum sequence length for the position-code table.
    pub max_positions: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            frame_h: 48,
            frame_w: 48,
            enc_channels: [32, 64, 128],
            embed_dim: 128,
            z_dim: 10,
            lstm_hidden: 256,
            pn_layers: 2,
            heads: 4,
            tf_layers: 1,
            ff_dim: 128,
            ff_enabled: true,
            leaky_slope: 0.2,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            audio_bins: 128,
            audio_cols: 9,
            disc_channels: [16, 32, 64],
            disc_audio_dim: 64,
            r_history: 2,
            k_lookahead: 1,
            max_positions: 160,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frame_h % 8 != 0 || self.frame_w % 8 != 0 {
            return Err(AvError::Config(format!(
                "frame size {}x{} must be divisible by 8",
                self.frame_h, self.frame_w
            )));
        }
        if self.embed_dim % 2 != 0 {
            return Err(AvError::Config("embed_dim must be even".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(AvError::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.pn_layers == 0 || self.tf_layers == 0 {
            return Err(AvError::Config("layer counts must be positive".into()));
        }
        if self.k_lookahead == 0 {
            return Err(AvError::Config("k_lookahead must be >= 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn audio_block_elems(&self) -> usize {
        self.audio_bins * self.audio_cols
    }

    /// Spatial size after the three stride-2 encoder stages.
    pub fn bottom_hw(&self) -> (usize, usize) {
        (self.frame_h / 8, self.frame_w / 8)
    }

    pub fn pn_input_dim(&self) -> usize {
        self.embed_dim + self.z_dim
    }
}

/// Batch-norm evaluation mode for graph building.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Parameter bindings for one tape, plus the batch-norm bookkeeping
/// needed to update running statistics after a training step.
pub struct Binding<'s> {
    map: HashMap<String, NodeId>,
    store: &'s ParamStore,
    pub bn_mode: BnMode,
    bn_nodes: Vec<(String, NodeId)>,
}

impl<'s> Binding<'s> {
    pub fn new(tape: &mut Tape, store: &'s ParamStore, bn_mode: BnMode) -> Result<Self> {
        let map = tape.bind_store(store)?;
        Ok(Binding {
            map,
            store,
            bn_mode,
            bn_nodes: Vec::new(),
        })
    }

    /// Binds every entry as a constant, even on a gradient tape. Used
    /// for the discriminator inside the generator's objective.
    pub fn new_frozen(tape: &mut Tape, store: &'s ParamStore) -> Result<Self> {
        let mut map = HashMap::new();
        for entry in store.iter() {
            map.insert(entry.name.clone(), tape.constant(entry.tensor.clone())?);
        }
        Ok(Binding {
            map,
            store,
            bn_mode: BnMode::Infer,
            bn_nodes: Vec::new(),
        })
    }

    pub fn id(&self, name: &str) -> Result<NodeId> {
        self.map
            .get(name)
            .copied()
            .ok_or_else(|| AvError::invalid("binding", format!("unknown parameter '{name}'")))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.store
            .get(name)
            .ok_or_else(|| AvError::invalid("binding", format!("unknown tensor '{name}'")))
    }

    /// Batch norm under the binding's mode. `prefix` owns gamma/beta and
    /// the running statistics; training-mode nodes are logged so the
    /// trainer can fold their batch statistics into the running averages.
    pub fn batchnorm(
        &mut self,
        tape: &mut Tape,
        prefix: &str,
        x: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let gamma = self.id(&format!("{prefix}.gamma"))?;
        let beta = self.id(&format!("{prefix}.beta"))?;
        match self.bn_mode {
            BnMode::Train => {
                let y = tape.batchnorm2d_train(x, gamma, beta, eps)?;
                self.bn_nodes.push((prefix.to_string(), y));
                Ok(y)
            }
            BnMode::Infer => {
                let rmean = self.tensor(&format!("{prefix}.rmean"))?.clone();
                let rvar = self.tensor(&format!("{prefix}.rvar"))?.clone();
                Ok(tape.batchnorm2d_infer(x, gamma, beta, &rmean, &rvar, eps)?)
            }
        }
    }

    /// (bn prefix, node) pairs created in training mode.
    pub fn bn_nodes(&self) -> &[(String, NodeId)] {
        &self.bn_nodes
    }
}

fn bn_params(store: &mut ParamStore, prefix: &str, c: usize) -> Result<()> {
    store.insert_const(&format!("{prefix}.gamma"), vec![c], 1.0, true)?;
    store.insert_const(&format!("{prefix}.beta"), vec![c], 0.0, true)?;
    store.insert_const(&format!("{prefix}.rmean"), vec![c], 0.0, false)?;
    store.insert_const(&format!("{prefix}.rvar"), vec![c], 1.0, false)?;
    Ok(())
}

fn lstm_params(
    store: &mut ParamStore,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    store.insert_fan_in(&format!("{prefix}.w_ih"), vec![4 * hidden, input], input, rng)?;
    store.insert_fan_in(&format!("{prefix}.w_hh"), vec![4 * hidden, hidden], hidden, rng)?;
    store.insert_fan_in(&format!("{prefix}.b"), vec![4 * hidden], hidden, rng)?;
    Ok(())
}

fn linear_params(
    store: &mut ParamStore,
    prefix: &str,
    din: usize,
    dout: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    store.insert_fan_in(&format!("{prefix}.w"), vec![dout, din], din, rng)?;
    store.insert_fan_in(&format!("{prefix}.b"), vec![dout], din, rng)?;
    Ok(())
}

fn transformer_params(
    store: &mut ParamStore,
    stream: &str,
    cfg: &NetConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let d = cfg.embed_dim;
    for l in 0..cfg.tf_layers {
        for w in ["wq", "wk", "wv", "wh"] {
            store.insert_fan_in(&format!("{stream}.l{l}.{w}"), vec![d, d], d, rng)?;
        }
        if cfg.ff_enabled {
            linear_params(store, &format!("{stream}.l{l}.ff1"), d, cfg.ff_dim, rng)?;
            linear_params(store, &format!("{stream}.l{l}.ff2"), cfg.ff_dim, d, rng)?;
        }
    }
    Ok(())
}

/// Builds the generator parameter store (encoder, decoder, prediction
/// LSTM, three transformer streams, audio embedding, prior/posterior).
pub fn init_generator_params(cfg: &NetConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(seed);
    let [c1, c2, c3] = cfg.enc_channels;
    let (h8, w8) = cfg.bottom_hw();
    let d = cfg.embed_dim;

    // Encoder.
    let chans = [(1usize, c1), (c1, c2), (c2, c3)];
    for (i, (cin, cout)) in chans.iter().enumerate() {
        store.insert_fan_in(
            &format!("enc.conv{i}.w"),
            vec![*cout, *cin, 4, 4],
            cin * 16,
            &mut rng,
        )?;
        store.insert_fan_in(&format!("enc.conv{i}.b"), vec![*cout], cin * 16, &mut rng)?;
        bn_params(&mut store, &format!("enc.bn{i}"), *cout)?;
    }
    linear_params(&mut store, "enc.fc", c3 * h8 * w8, d, &mut rng)?;

    // Decoder.
    linear_params(&mut store, "dec.fc", cfg.lstm_hidden, c3 * h8 * w8, &mut rng)?;
    bn_params(&mut store, "dec.bn0", c3)?;
    let dchans = [(2 * c3, c2), (2 * c2, c1), (2 * c1, 1)];
    for (i, (cin, cout)) in dchans.iter().enumerate() {
        store.insert_fan_in(
            &format!("dec.deconv{i}.w"),
            vec![*cin, *cout, 4, 4],
            cin * 16,
            &mut rng,
        )?;
        store.insert_fan_in(&format!("dec.deconv{i}.b"), vec![*cout], cin * 16, &mut rng)?;
        if i < 2 {
            bn_params(&mut store, &format!("dec.bn{}", i + 1), *cout)?;
        }
    }

    // Prediction LSTM (two layers by default).
    for l in 0..cfg.pn_layers {
        let input = if l == 0 { cfg.pn_input_dim() } else { cfg.lstm_hidden };
        lstm_params(&mut store, &format!("pn.l{l}"), input, cfg.lstm_hidden, &mut rng)?;
    }

    // Audio block embedding.
    linear_params(&mut store, "aud.embed", cfg.audio_block_elems(), d, &mut rng)?;

    // Transformer streams: audio, visual-prior, visual-posterior.
    transformer_params(&mut store, "tfa", cfg, &mut rng)?;
    transformer_params(&mut store, "tfvm", cfg, &mut rng)?;
    transformer_params(&mut store, "tfvq", cfg, &mut rng)?;

    // Prior / posterior LSTMs with Gaussian heads.
    for stream in ["prior", "post"] {
        lstm_params(&mut store, &format!("{stream}.lstm"), 2 * d, cfg.lstm_hidden, &mut rng)?;
        linear_params(&mut store, &format!("{stream}.mu"), cfg.lstm_hidden, cfg.z_dim, &mut rng)?;
        linear_params(
            &mut store,
            &format!("{stream}.logvar"),
            cfg.lstm_hidden,
            cfg.z_dim,
            &mut rng,
        )?;
    }
    Ok(store)
}

/// Builds the discriminator parameter store (frame classifier plus the
/// recurrent audio-visual sequence judge).
pub fn init_discriminator_params(cfg: &NetConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(seed);
    let [d1, d2, d3] = cfg.disc_channels;
    let (h8, w8) = cfg.bottom_hw();
    for trunk in ["dstd", "dseq"] {
        let chans = [(1usize, d1), (d1, d2), (d2, d3)];
        for (i, (cin, cout)) in chans.iter().enumerate() {
            store.insert_fan_in(
                &format!("{trunk}.conv{i}.w"),
                vec![*cout, *cin, 4, 4],
                cin * 16,
                &mut rng,
            )?;
            store.insert_fan_in(&format!("{trunk}.conv{i}.b"), vec![*cout], cin * 16, &mut rng)?;
        }
    }
    linear_params(&mut store, "dstd.out", d3 * h8 * w8, 1, &mut rng)?;
    linear_params(&mut store, "dseq.feat", d3 * h8 * w8, cfg.embed_dim, &mut rng)?;
    linear_params(
        &mut store,
        "dseq.aud",
        cfg.audio_block_elems(),
        cfg.disc_audio_dim,
        &mut rng,
    )?;
    lstm_params(
        &mut store,
        "dseq.lstm",
        cfg.embed_dim + cfg.disc_audio_dim,
        cfg.lstm_hidden,
        &mut rng,
    )?;
    linear_params(&mut store, "dseq.out", cfg.lstm_hidden, 1, &mut rng)?;
    Ok(store)
}

/// Looks up the position-code row `pos` as a tape constant.
pub fn position_row(tape: &mut Tape, table: &Tensor, pos: usize) -> Result<NodeId> {
    let d = table.shape()[1];
    if pos >= table.shape()[0] {
        return Err(AvError::invalid(
            "position_row",
            format!("position {pos} beyond table of {}", table.shape()[0]),
        ));
    }
    let row = Tensor::new(vec![d], table.data()[pos * d..(pos + 1) * d].to_vec())?;
    Ok(tape.constant(row)?)
}
