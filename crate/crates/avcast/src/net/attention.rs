//! Multi-head self-attention encoder.
//!
//! One layer applies scaled dot-product attention per head, concatenates
//! the heads through the output projection, and (when enabled) adds a
//! residual feed-forward sublayer. Callers always read the last position
//! of a prefix; with a single layer that equals a causally-masked pass
//! over the full sequence, which is the fast path used in training.

use super::{Binding, NetConfig};
use crate::error::{AvError, Result};
use diffcore::{NodeId, Tape};

/// One attention layer over x [B, L, D]. `causal` masks row i to
/// columns 0..=i.
fn mha_layer(
    cfg: &NetConfig,
    tape: &mut Tape,
    bind: &Binding,
    stream: &str,
    layer: usize,
    x: NodeId,
    causal: bool,
) -> Result<NodeId> {
    let shape = tape.shape(x).to_vec();
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let heads = cfg.heads;
    let dk = cfg.head_dim();

    let flat = tape.reshape(x, vec![b * l, d])?;
    let proj = |name: &str, t: &mut Tape| -> Result<NodeId> {
        let w = bind.id(&format!("{stream}.l{layer}.{name}"))?;
        let y = t.linear(flat, w, None)?;
        // [B*L, D] -> [B, L, heads, dk] -> [B, heads, L, dk] -> [B*heads, L, dk]
        let y = t.reshape(y, vec![b, l, heads, dk])?;
        let y = t.permute(y, &[0, 2, 1, 3])?;
        Ok(t.reshape(y, vec![b * heads, l, dk])?)
    };
    let q = proj("wq", tape)?;
    let k = proj("wk", tape)?;
    let v = proj("wv", tape)?;

    let kt = tape.transpose_last2(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
    let att = if causal {
        tape.softmax_causal(scaled)?
    } else {
        tape.softmax(scaled)?
    };
    let ctx = tape.matmul(att, v)?;
    let ctx = tape.reshape(ctx, vec![b, heads, l, dk])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, vec![b * l, d])?;
    let wh = bind.id(&format!("{stream}.l{layer}.wh"))?;
    let out = tape.linear(ctx, wh, None)?;

    let y = if cfg.ff_enabled {
        let f1w = bind.id(&format!("{stream}.l{layer}.ff1.w"))?;
        let f1b = bind.id(&format!("{stream}.l{layer}.ff1.b"))?;
        let f2w = bind.id(&format!("{stream}.l{layer}.ff2.w"))?;
        let f2b = bind.id(&format!("{stream}.l{layer}.ff2.b"))?;
        let h = tape.linear(out, f1w, Some(f1b))?;
        let h = tape.leaky_relu(h, cfg.leaky_slope)?;
        let h = tape.linear(h, f2w, Some(f2b))?;
        tape.add(out, h)?
    } else {
        out
    };
    tape.reshape(y, vec![b, l, d])
        .map_err(Into::into)
}

/// Full (unmasked) transformer over a sequence of position-augmented
/// codes; returns all per-position encodings [B, L, D].
pub fn transformer_encode(
    cfg: &NetConfig,
    tape: &mut Tape,
    bind: &Binding,
    stream: &str,
    seq: NodeId,
) -> Result<NodeId> {
    let shape = tape.shape(seq).to_vec();
    if shape.len() != 3 || shape[2] != cfg.embed_dim {
        return Err(AvError::invalid(
            "transformer_encode",
            format!("expected [B, L, {}], got {shape:?}", cfg.embed_dim),
        ));
    }
    if shape[1] == 0 {
        return Err(AvError::invalid("transformer_encode", "empty sequence"));
    }
    let mut cur = seq;
    for l in 0..cfg.tf_layers {
        cur = mha_layer(cfg, tape, bind, stream, l, cur, false)?;
    }
    Ok(cur)
}

/// Causally masked single pass: position i of the output equals the
/// last position of an unmasked encode over the prefix 0..=i. Only
/// valid for a one-layer transformer (the default); deeper stacks must
/// recompute per prefix.
pub fn stream_encode_all_causal(
    cfg: &NetConfig,
    tape: &mut Tape,
    bind: &Binding,
    stream: &str,
    seq: NodeId,
) -> Result<NodeId> {
    if cfg.tf_layers != 1 {
        return Err(AvError::invalid(
            "stream_encode_all_causal",
            "causal fast path requires tf_layers == 1",
        ));
    }
    mha_layer(cfg, tape, bind, stream, 0, seq, true)
}

/// Unmasked encode of the given prefix, sliced to its last position
/// [B, D]. This is the reading every caller makes of a stream.
pub fn stream_encode_last(
    cfg: &NetConfig,
    tape: &mut Tape,
    bind: &Binding,
    stream: &str,
    seq: NodeId,
) -> Result<NodeId> {
    let all = transformer_encode(cfg, tape, bind, stream, seq)?;
    let shape = tape.shape(all).to_vec();
    let last = tape.slice(all, 1, shape[1] - 1, 1)?;
    tape.reshape(last, vec![shape[0], shape[2]])
        .map_err(Into::into)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{init_generator_params, Binding, BnMode, NetConfig};
    use diffcore::{ParamStore, Tape, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> NetConfig {
        NetConfig {
            frame_h: 16,
            frame_w: 16,
            enc_channels: [8, 12, 16],
            ..NetConfig::default()
        }
    }

    fn rand_seq(b: usize, l: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![b, l, d], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn single_key_identity_attention() {
        // Length-1 sequence, identity projections, feed-forward disabled:
        // softmax over one key is 1, so the output equals the input.
        let c = NetConfig {
            heads: 1,
            ff_enabled: false,
            ..cfg()
        };
        let mut store = ParamStore::new(0);
        let d = c.embed_dim;
        let eye = Tensor::from_fn(vec![d, d], |i| if i % (d + 1) == 0 { 1.0 } else { 0.0 });
        for name in ["tfa.l0.wq", "tfa.l0.wk", "tfa.l0.wv", "tfa.l0.wh"] {
            store.insert(name, eye.clone(), true).unwrap();
        }
        let mut tape = Tape::inference();
        let bind = Binding::new(&mut tape, &store, BnMode::Infer).unwrap();
        let x = rand_seq(2, 1, d, 1);
        let xid = tape.constant(x.clone()).unwrap();
        let y = transformer_encode(&c, &mut tape, &bind, "tfa", xid).unwrap();
        assert!(tape.value(y).max_abs_diff(&x).unwrap() < 1e-12);
    }

    #[test]
    fn permutation_equivariance() {
        // Permuting positions together with their position codes permutes
        // the (unmasked) outputs identically.
        let c = cfg();
        let params = init_generator_params(&c, 11).unwrap();
        let x = rand_seq(1, 5, c.embed_dim, 2);
        let perm = [3usize, 0, 4, 1, 2];

        let run = |seq: &Tensor| {
            let mut tape = Tape::inference();
            let bind = Binding::new(&mut tape, &params, BnMode::Infer).unwrap();
            let id = tape.constant(seq.clone()).unwrap();
            let y = transformer_encode(&c, &mut tape, &bind, "tfvm", id).unwrap();
            tape.value(y).clone()
        };
        let y = run(&x);
        let d = c.embed_dim;
        let permuted = Tensor::from_fn(vec![1, 5, d], |i| {
            let (pos, col) = (i / d, i % d);
            x.data()[perm[pos] * d + col]
        });
        let y_perm = run(&permuted);
        for (pos, &src) in perm.iter().enumerate() {
            for col in 0..d {
                let a = y_perm.data()[pos * d + col];
                let b = y.data()[src * d + col];
                assert!((a - b).abs() < 1e-9, "pos {pos} col {col}");
            }
        }
    }

    #[test]
    fn causal_pass_matches_prefix_recompute() {
        let c = cfg();
        let params = init_generator_params(&c, 12).unwrap();
        let x = rand_seq(2, 6, c.embed_dim, 3);
        let mut tape = Tape::inference();
        let bind = Binding::new(&mut tape, &params, BnMode::Infer).unwrap();
        let xid = tape.constant(x.clone()).unwrap();
        let causal = stream_encode_all_causal(&c, &mut tape, &bind, "tfvq", xid).unwrap();
        let causal_val = tape.value(causal).clone();
        let d = c.embed_dim;
        for l in 1..=6usize {
            let prefix = Tensor::new(vec![2, l, d], {
                let mut v = Vec::new();
                for b in 0..2 {
                    v.extend_from_slice(&x.data()[b * 6 * d..(b * 6 + l) * d]);
                }
                v
            })
            .unwrap();
            let mut t2 = Tape::inference();
            let b2 = Binding::new(&mut t2, &params, BnMode::Infer).unwrap();
            let pid = t2.constant(prefix).unwrap();
            let last = stream_encode_last(&c, &mut t2, &b2, "tfvq", pid).unwrap();
            let last_val = t2.value(last).clone();
            for b in 0..2 {
                for col in 0..d {
                    let a = causal_val.data()[(b * 6 + (l - 1)) * d + col];
                    let e = last_val.data()[b * d + col];
                    assert!((a - e).abs() < 1e-9, "prefix {l} b {b} col {col}: {a} vs {e}");
                }
            }
        }
    }

    #[test]
    fn empty_sequence_rejected() {
        let c = cfg();
        let params = init_generator_params(&c, 13).unwrap();
        let mut tape = Tape::inference();
        let bind = Binding::new(&mut tape, &params, BnMode::Infer).unwrap();
        // A zero-length axis cannot even be constructed as a tensor.
        assert!(Tensor::new(vec![1, 0, c.embed_dim], vec![]).is_err());
        // Rank mismatch is rejected by the encoder itself.
        let bad = tape.constant(Tensor::zeros(vec![1, c.embed_dim])).unwrap();
        assert!(transformer_encode(&c, &mut tape, &bind, "tfa", bad).is_err());
    }
}
