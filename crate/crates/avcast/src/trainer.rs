//! Joint generator/discriminator training: per step one discriminator
//! ADAM update on the six-term adversarial loss, then one generator
//! update on reconstruction + beta*KL - gamma*adv, with the gamma
//! schedule, optional teacher forcing, gradient clipping and
//! checkpointing. The whole trajectory is a pure function of
//! (seed, config, dataset).

use crate::data::{blocks_at, frames_at, PreparedClip};
use crate::error::{AvError, Result};
use crate::evalkit;
use crate::net::{
    discriminate_seq, discriminate_std, init_discriminator_params, init_generator_params,
    run_sequence, Binding, BnMode, JudgeStep, NetConfig, RunMode, SeqInputs, ZSource,
};
use crate::objective::{
    discriminator_loss, generator_adv_term, kl_diag_gauss_node, recon_loss_node, total_losses,
    DiscTermNodes, FakeTermNodes, LossBreakdown, LossParts,
};
use crate::util::{derived_rng, std_normal_vec};
use diffcore::{adam_update, AdamState, Gradients, NodeId, ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, tag = "mode", rename_all = "snake_case")]
pub enum TeacherForcing {
    Off,
    Bernoulli { p: f64, warmup_epochs: usize },
}

impl Default for TeacherForcing {
    fn default() -> Self {
        TeacherForcing::Off
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta: f64,
    pub gamma0: f64,
    pub gamma_step_epochs: usize,
    pub gamma_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub f_seen: usize,
    pub t_total: usize,
    pub teacher_forcing: TeacherForcing,
    pub seed: u64,
    /// Judged time steps per clip for the adversarial terms
    /// (None = every generated step).
    pub adv_t_samples: Option<usize>,
    pub grad_clip: f64,
    /// Checkpoint cadence in epochs (0 = only at the end).
    pub ckpt_every: usize,
    /// Validation cadence in epochs (0 = never).
    pub val_every: usize,
    pub val_k: usize,
    pub val_clips: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-3,
            beta: 1e-4,
            gamma0: 1e-4,
            gamma_step_epochs: 300,
            gamma_factor: 10.0,
            epochs: 600,
            batch_size: 16,
            f_seen: 5,
            t_total: 20,
            teacher_forcing: TeacherForcing::Off,
            seed: 0,
            adv_t_samples: Some(3),
            grad_clip: 5.0,
            ckpt_every: 0,
            val_every: 0,
            val_k: 10,
            val_clips: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.f_seen == 0 || self.f_seen >= self.t_total {
            return Err(AvError::Config(format!(
                "need 0 < f_seen < t_total, got {} / {}",
                self.f_seen, self.t_total
            )));
        }
        if self.lr < 0.0 {
            return Err(AvError::Config("lr must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(AvError::Config("batch_size must be positive".into()));
        }
        if let TeacherForcing::Bernoulli { p, .. } = self.teacher_forcing {
            if !(0.0..=1.0).contains(&p) {
                return Err(AvError::Config(format!("teacher forcing p {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// gamma0 * factor^(floor(epoch / step_epochs)).
pub fn gamma_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if cfg.gamma_step_epochs == 0 {
        return cfg.gamma0;
    }
    cfg.gamma0 * cfg.gamma_factor.powi((epoch / cfg.gamma_step_epochs) as i32)
}

/// True = feed ground-truth frames this batch. Always true during the
/// warmup epochs, then a Bernoulli(p) draw per batch.
pub fn teacher_gate(
    epoch: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
    tf: &TeacherForcing,
) -> bool {
    match tf {
        TeacherForcing::Off => true,
        TeacherForcing::Bernoulli { p, warmup_epochs } => {
            if epoch < *warmup_epochs {
                true
            } else {
                rng.gen_range(0.0..1.0) < *p
            }
        }
    }
}

fn clip_gradients(grads: &mut Gradients, max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale_all(max_norm / norm);
    }
}

pub struct Trainer {
    pub net_cfg: NetConfig,
    pub cfg: TrainConfig,
    pub gen: ParamStore,
    pub disc: ParamStore,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
    /// Next epoch to run (also the count of completed epochs).
    pub epoch: usize,
    pub global_step: u64,
    pe_table: Tensor,
}

impl Trainer {
    pub fn new(net_cfg: NetConfig, cfg: TrainConfig) -> Result<Self> {
        net_cfg.validate()?;
        cfg.validate()?;
        if cfg.t_total > net_cfg.max_positions {
            return Err(AvError::Config(format!(
                "t_total {} exceeds max_positions {}",
                cfg.t_total, net_cfg.max_positions
            )));
        }
        let gen = init_generator_params(&net_cfg, cfg.seed)?;
        let disc = init_discriminator_params(&net_cfg, cfg.seed.wrapping_add(1))?;
        let adam_g = AdamState::defaults(&gen);
        let adam_d = AdamState::defaults(&disc);
        let pe_table = crate::avfeat::position_table(net_cfg.max_positions, net_cfg.embed_dim)?;
        Ok(Trainer {
            net_cfg,
            cfg,
            gen,
            disc,
            adam_g,
            adam_d,
            epoch: 0,
            global_step: 0,
            pe_table,
        })
    }

    pub fn pe_table(&self) -> &Tensor {
        &self.pe_table
    }

    /// One optimization step: discriminator first, then the generator
    /// against the updated discriminator.
    pub fn train_step(
        &mut self,
        clips: &[&PreparedClip],
        epoch: usize,
        step: usize,
    ) -> Result<LossBreakdown> {
        let b = clips.len();
        let (f, t_total) = (self.cfg.f_seen, self.cfg.t_total);
        let gamma = gamma_schedule(epoch, &self.cfg);
        let seed = self.cfg.seed;
        let (eu, su) = (epoch as u64, step as u64);

        let frames: Vec<Tensor> = (0..t_total)
            .map(|t| frames_at(clips, t))
            .collect::<Result<_>>()?;
        let blocks: Vec<Tensor> = (0..t_total)
            .map(|t| blocks_at(clips, t))
            .collect::<Result<_>>()?;
        let mut nrng = derived_rng(seed, &[2, eu, su]);
        let noise: Vec<Tensor> = (0..t_total - 1)
            .map(|_| {
                Tensor::new(
                    vec![b, self.net_cfg.z_dim],
                    std_normal_vec(&mut nrng, b * self.net_cfg.z_dim),
                )
                .map_err(Into::into)
            })
            .collect::<Result<_>>()?;
        let mut trng = derived_rng(seed, &[3, eu, su]);
        let feed_real = teacher_gate(epoch, &mut trng, &self.cfg.teacher_forcing);

        // ── Generator graph: reconstruction + KL ──────────────────────
        let mut tape = Tape::new();
        let mut bind = Binding::new(&mut tape, &self.gen, BnMode::Train)?;
        let seq = run_sequence(
            &self.net_cfg,
            &mut tape,
            &mut bind,
            &self.pe_table,
            &SeqInputs {
                frames: &frames,
                audio_blocks: &blocks,
                f_seen: f,
                t_total,
            },
            RunMode::Train {
                pn_feed_real: feed_real,
            },
            ZSource::Posterior,
            &noise,
        )?;
        let mut pairs = Vec::with_capacity(seq.xhat.len());
        for (i, &x) in seq.xhat.iter().enumerate() {
            let target = tape.constant(frames[f + i].clone())?;
            pairs.push((x, target));
        }
        let recon_node = recon_loss_node(&mut tape, &pairs)?;
        let mut kl_node: Option<NodeId> = None;
        for t in (f + 1)..=t_total {
            let idx = t - 2;
            let (p, q) = (seq.posterior[idx], seq.prior[idx]);
            let k = kl_diag_gauss_node(&mut tape, p.mu, p.log_var, q.mu, q.log_var)?;
            kl_node = Some(match kl_node {
                Some(acc) => tape.add(acc, k)?,
                None => k,
            });
        }
        let kl_node = match kl_node {
            Some(n) => n,
            None => tape.constant(Tensor::scalar(0.0))?,
        };

        // Batch-norm statistics, captured before the binding goes away.
        let bn_stats: Vec<(String, Vec<f64>, Vec<f64>)> = bind
            .bn_nodes()
            .iter()
            .map(|(prefix, node)| {
                let (mean, var) = tape.bn_batch_stats(*node).expect("train-mode bn node");
                (prefix.clone(), mean.to_vec(), var.to_vec())
            })
            .collect();
        drop(bind);

        // ── Judged steps for the adversarial terms ─────────────────────
        let r = self.net_cfg.r_history;
        let k_look = self.net_cfg.k_lookahead;
        let valid_t: Vec<usize> = ((f + 1)..=t_total)
            .filter(|&t| t > r && t + k_look - 1 <= t_total)
            .collect();
        let mut arng = derived_rng(seed, &[4, eu, su]);
        let judged: Vec<usize> = match self.cfg.adv_t_samples {
            Some(n) if n < valid_t.len() => {
                let mut picked = valid_t.clone();
                picked.shuffle(&mut arng);
                let mut sel: Vec<usize> = picked.into_iter().take(n).collect();
                sel.sort_unstable();
                sel
            }
            _ => valid_t.clone(),
        };
        // Mismatched audio index t' != t, valid for the whole window.
        let tprime: Vec<usize> = judged
            .iter()
            .map(|&t| loop {
                let c = arng.gen_range((r + 1)..=(t_total - (k_look - 1)));
                if c != t {
                    break c;
                }
            })
            .collect();

        let mut total_d = 0.0;
        if !judged.is_empty() {
            // Detached generated frames for the discriminator update.
            let fakes: HashMap<usize, Tensor> = judged
                .iter()
                .map(|&t| (t, tape.value(seq.xhat[t - f - 1]).clone()))
                .collect();
            let partner: Vec<&PreparedClip> = (0..b).map(|i| clips[(i + 1) % b]).collect();

            let mut dtape = Tape::new();
            let dbind = Binding::new(&mut dtape, &self.disc, BnMode::Infer)?;
            let mut term_sets = Vec::with_capacity(judged.len());
            for (&t, &tp) in judged.iter().zip(&tprime) {
                let real_center = dtape.constant(frames_at(&partner, t - 1)?)?;
                let fake_center = dtape.constant(fakes[&t].clone())?;
                let real_std = discriminate_std(&self.net_cfg, &mut dtape, &dbind, real_center)?;
                let fake_std = discriminate_std(&self.net_cfg, &mut dtape, &dbind, fake_center)?;
                let (ra, rp, rf) = judge_context(&mut dtape, &partner, t, t, r, k_look)?;
                let real_md = discriminate_seq(
                    &self.net_cfg,
                    &mut dtape,
                    &dbind,
                    JudgeStep {
                        frame: real_center,
                        audio: ra,
                    },
                    &rp,
                    &rf,
                )?;
                let (aa, ap, af) = judge_context(&mut dtape, &partner, t, tp, r, k_look)?;
                let real_aa = discriminate_seq(
                    &self.net_cfg,
                    &mut dtape,
                    &dbind,
                    JudgeStep {
                        frame: real_center,
                        audio: aa,
                    },
                    &ap,
                    &af,
                )?;
                let (fa, fp, ff) = judge_context(&mut dtape, clips, t, t, r, k_look)?;
                let fake_md = discriminate_seq(
                    &self.net_cfg,
                    &mut dtape,
                    &dbind,
                    JudgeStep {
                        frame: fake_center,
                        audio: fa,
                    },
                    &fp,
                    &ff,
                )?;
                let (ma, mp, mf) = judge_context(&mut dtape, clips, t, tp, r, k_look)?;
                let fake_aa = discriminate_seq(
                    &self.net_cfg,
                    &mut dtape,
                    &dbind,
                    JudgeStep {
                        frame: fake_center,
                        audio: ma,
                    },
                    &mp,
                    &mf,
                )?;
                term_sets.push(DiscTermNodes {
                    real_std,
                    fake_std,
                    real_md,
                    real_aa,
                    fake_md,
                    fake_aa,
                });
            }
            let d_loss = discriminator_loss(&mut dtape, &term_sets)?;
            total_d = dtape.value(d_loss).item()?;
            let mut d_grads = dtape.backward(d_loss)?;
            clip_gradients(&mut d_grads, self.cfg.grad_clip);
            adam_update(&mut self.disc, &d_grads, &mut self.adam_d, self.cfg.lr)?;
        }

        // ── Generator adversarial term against the updated D ──────────
        let adv_node = if judged.is_empty() {
            tape.constant(Tensor::scalar(0.0))?
        } else {
            let frozen = Binding::new_frozen(&mut tape, &self.disc)?;
            let mut fake_sets = Vec::with_capacity(judged.len());
            for (&t, &tp) in judged.iter().zip(&tprime) {
                let x_node = seq.xhat[t - f - 1];
                let fake_std = discriminate_std(&self.net_cfg, &mut tape, &frozen, x_node)?;
                let (fa, fp, ff) = judge_context(&mut tape, clips, t, t, r, k_look)?;
                let fake_md = discriminate_seq(
                    &self.net_cfg,
                    &mut tape,
                    &frozen,
                    JudgeStep {
                        frame: x_node,
                        audio: fa,
                    },
                    &fp,
                    &ff,
                )?;
                let (ma, mp, mf) = judge_context(&mut tape, clips, t, tp, r, k_look)?;
                let fake_aa = discriminate_seq(
                    &self.net_cfg,
                    &mut tape,
                    &frozen,
                    JudgeStep {
                        frame: x_node,
                        audio: ma,
                    },
                    &mp,
                    &mf,
                )?;
                fake_sets.push(FakeTermNodes {
                    fake_std,
                    fake_md,
                    fake_aa,
                });
            }
            generator_adv_term(&mut tape, &fake_sets)?
        };

        let inv_b = 1.0 / b as f64;
        let recon_b = tape.scale(recon_node, inv_b)?;
        let kl_b = tape.scale(kl_node, inv_b)?;
        let kl_w = tape.scale(kl_b, self.cfg.beta)?;
        let adv_w = tape.scale(adv_node, -gamma)?;
        let partial = tape.add(recon_b, kl_w)?;
        let total_g = tape.add(partial, adv_w)?;

        let breakdown = total_losses(
            LossParts {
                recon: tape.value(recon_b).item()?,
                kl: tape.value(kl_b).item()?,
                adv_g: tape.value(adv_node).item()?,
                total_d,
            },
            self.cfg.beta,
            gamma,
        )?;

        let mut g_grads = tape.backward(total_g)?;
        clip_gradients(&mut g_grads, self.cfg.grad_clip);
        adam_update(&mut self.gen, &g_grads, &mut self.adam_g, self.cfg.lr)?;

        self.apply_bn_running(&bn_stats, b)?;
        self.global_step += 1;
        Ok(breakdown)
    }

    /// Folds the step's batch statistics into the running averages:
    /// one momentum update per BN layer per step, averaging over the
    /// layer's invocations within the step.
    fn apply_bn_running(&mut self, stats: &[(String, Vec<f64>, Vec<f64>)], batch: usize) -> Result<()> {
        let mut grouped: Vec<(String, Vec<f64>, Vec<f64>, usize)> = Vec::new();
        for (prefix, mean, var) in stats {
            match grouped.iter_mut().find(|(p, ..)| p == prefix) {
                Some((_, macc, vacc, n)) => {
                    for (a, b) in macc.iter_mut().zip(mean) {
                        *a += b;
                    }
                    for (a, b) in vacc.iter_mut().zip(var) {
                        *a += b;
                    }
                    *n += 1;
                }
                None => grouped.push((prefix.clone(), mean.clone(), var.clone(), 1)),
            }
        }
        let m = self.net_cfg.bn_momentum;
        for (prefix, mean_sum, var_sum, n) in grouped {
            let inv = 1.0 / n as f64;
            // Unbiased variance for the running estimate.
            let plane = self.plane_for(&prefix);
            let count = (batch * plane).max(2) as f64;
            let correction = count / (count - 1.0);
            let rmean = self
                .gen
                .get_mut(&format!("{prefix}.rmean"))
                .ok_or_else(|| AvError::invalid("bn_running", prefix.clone()))?;
            for (r, s) in rmean.data_mut().iter_mut().zip(&mean_sum) {
                *r = (1.0 - m) * *r + m * (s * inv);
            }
            let rvar = self
                .gen
                .get_mut(&format!("{prefix}.rvar"))
                .ok_or_else(|| AvError::invalid("bn_running", prefix.clone()))?;
            for (r, s) in rvar.data_mut().iter_mut().zip(&var_sum) {
                *r = (1.0 - m) * *r + m * (s * inv * correction);
            }
        }
        Ok(())
    }

    /// Spatial element count of the layer a BN prefix normalizes over.
    fn plane_for(&self, prefix: &str) -> usize {
        let (h, w) = (self.net_cfg.frame_h, self.net_cfg.frame_w);
        match prefix {
            "enc.bn0" => (h / 2) * (w / 2),
            "enc.bn1" => (h / 4) * (w / 4),
            "enc.bn2" | "dec.bn0" => (h / 8) * (w / 8),
            "dec.bn1" => (h / 4) * (w / 4),
            "dec.bn2" => (h / 2) * (w / 2),
            _ => 1,
        }
    }

    /// One pass over the dataset in shuffled batches. Returns the mean
    /// breakdown; appends CSV rows to `log` when given.
    pub fn run_epoch(
        &mut self,
        data: &[PreparedClip],
        mut log: Option<&mut dyn Write>,
    ) -> Result<LossBreakdown> {
        if data.is_empty() {
            return Err(AvError::invalid("run_epoch", "empty dataset"));
        }
        let epoch = self.epoch;
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut srng = derived_rng(self.cfg.seed, &[1, epoch as u64]);
        order.shuffle(&mut srng);
        let mut acc = LossBreakdown {
            recon: 0.0,
            kl: 0.0,
            adv_g: 0.0,
            total_g: 0.0,
            total_d: 0.0,
            beta: self.cfg.beta,
            gamma: gamma_schedule(epoch, &self.cfg),
        };
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let batch: Vec<&PreparedClip> = chunk.iter().map(|&i| &data[i]).collect();
            let lb = self.train_step(&batch, epoch, step)?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(
                    w,
                    "{},{},{},{},{},{},{}",
                    epoch, step, lb.recon, lb.kl, lb.adv_g, lb.total_g, lb.total_d
                )?;
            }
            acc.recon += lb.recon;
            acc.kl += lb.kl;
            acc.adv_g += lb.adv_g;
            acc.total_g += lb.total_g;
            acc.total_d += lb.total_d;
            steps += 1;
        }
        if let Some(name) = self.gen.first_non_finite().or(self.disc.first_non_finite()) {
            return Err(AvError::invalid(
                "run_epoch",
                format!("parameter '{name}' became non-finite"),
            ));
        }
        let inv = 1.0 / steps as f64;
        acc.recon *= inv;
        acc.kl *= inv;
        acc.adv_g *= inv;
        acc.total_g *= inv;
        acc.total_d *= inv;
        self.epoch += 1;
        Ok(acc)
    }

    /// Mean best-of-K SSIM over a validation pool (model selection).
    pub fn validate(&self, clips: &[PreparedClip], seed: u64) -> Result<f64> {
        if clips.is_empty() {
            return Err(AvError::invalid("validate", "empty validation pool"));
        }
        let mut acc = 0.0;
        for (i, clip) in clips.iter().enumerate() {
            let rollouts = evalkit::rollout_futures(
                &self.net_cfg,
                &self.gen,
                &self.pe_table,
                clip,
                self.cfg.f_seen,
                self.cfg.t_total,
                self.cfg.val_k,
                seed.wrapping_add(i as u64),
            )?;
            let gt: Vec<Tensor> = (self.cfg.f_seen..self.cfg.t_total)
                .map(|t| clip.frame_tensor(t))
                .collect();
            acc += evalkit::best_of_k(&rollouts, &gt)?.mean_ssim;
        }
        Ok(acc / clips.len() as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let meta_g = serde_json::json!({
            "role": "generator",
            "net": self.net_cfg,
            "train": self.cfg,
            "epoch": self.epoch,
            "global_step": self.global_step,
        });
        diffcore::save_checkpoint(&dir.join("gen.ckpt"), &self.gen, Some(&self.adam_g), meta_g)?;
        let meta_d = serde_json::json!({ "role": "discriminator" });
        diffcore::save_checkpoint(&dir.join("disc.ckpt"), &self.disc, Some(&self.adam_d), meta_d)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let g = diffcore::load_checkpoint(&dir.join("gen.ckpt"))?;
        let d = diffcore::load_checkpoint(&dir.join("disc.ckpt"))?;
        let net_cfg: NetConfig = serde_json::from_value(g.meta["net"].clone())?;
        let cfg: TrainConfig = serde_json::from_value(g.meta["train"].clone())?;
        let epoch = g.meta["epoch"].as_u64().unwrap_or(0) as usize;
        let global_step = g.meta["global_step"].as_u64().unwrap_or(0);
        let adam_g = g
            .adam
            .ok_or_else(|| AvError::invalid("trainer_load", "generator checkpoint lacks ADAM state"))?;
        let adam_d = d
            .adam
            .ok_or_else(|| AvError::invalid("trainer_load", "discriminator checkpoint lacks ADAM state"))?;
        let pe_table = crate::avfeat::position_table(net_cfg.max_positions, net_cfg.embed_dim)?;
        Ok(Trainer {
            net_cfg,
            cfg,
            gen: g.store,
            disc: d.store,
            adam_g,
            adam_d,
            epoch,
            global_step,
            pe_table,
        })
    }
}

/// Builds the judge context for center frame `t` (1-based) with audio
/// centered at `audio_t`: past pairs (X_{t-j}, A_{audio_t-j}) for
/// j = r..1 and future pairs for j = 1..k-1, as tape constants.
fn judge_context(
    tape: &mut Tape,
    clips: &[&PreparedClip],
    t: usize,
    audio_t: usize,
    r: usize,
    k_look: usize,
) -> Result<(NodeId, Vec<JudgeStep>, Vec<JudgeStep>)> {
    let center_audio = tape.constant(blocks_at(clips, audio_t - 1)?)?;
    let mut past = Vec::with_capacity(r);
    for j in (1..=r).rev() {
        let frame = tape.constant(frames_at(clips, t - 1 - j)?)?;
        let audio = tape.constant(blocks_at(clips, audio_t - 1 - j)?)?;
        past.push(JudgeStep { frame, audio });
    }
    let mut future = Vec::with_capacity(k_look - 1);
    for j in 1..k_look {
        let frame = tape.constant(frames_at(clips, t - 1 + j)?)?;
        let audio = tape.constant(blocks_at(clips, audio_t - 1 + j)?)?;
        future.push(JudgeStep { frame, audio });
    }
    Ok((center_audio, past, future))
}
