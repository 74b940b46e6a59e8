//! The training harness: mask, encode, decode, contrast, update, EMA.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{checkpoint_path, load_checkpoint, save_checkpoint, Manifest};
use crate::config::TrainConfig;
use crate::contrastive::{contrastive_loss, total_loss, BilinearSimilarity};
use crate::decoder::{build_token_sequence, ActionEmbedder, Decoder};
use crate::encoder::EncoderPair;
use crate::env::{self, generate_episode, sample_batch, stack_windows, ReplayBuffer};
use crate::error::Error;
use crate::evaluate::{eval_probe, eval_smoothness, SmoothnessReport};
use crate::graph_mask::{apply_mask, build_graph, random_walk_mask, StGraph};
use crate::metrics::{MetricsRow, MetricsWriter};
use crate::optim::Adam;
use crate::param::{ParamId, ParamStore};
use crate::rngstream::stream;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub struct Trainer {
    pub cfg: TrainConfig,
    pub store: ParamStore,
    pub encoders: EncoderPair,
    pub decoder: Decoder,
    pub embedder: ActionEmbedder,
    pub sim: BilinearSimilarity,
    optimizer: Adam,
    graph: StGraph,
    pub train_buffer: ReplayBuffer,
    pub eval_buffer: ReplayBuffer,
    rng_mask: ChaCha8Rng,
    rng_batch: ChaCha8Rng,
    pub step: usize,
}

impl Trainer {
    /// Builds models, fills both replay buffers, and wires the optimizer
    /// over every trainable component (the key encoder is excluded).
    pub fn new(cfg: TrainConfig) -> Result<Self, Error> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng_init = stream(cfg.seed, "init");
        let encoders = EncoderPair::new(&mut store, cfg.encoder_config(), cfg.ema_m, &mut rng_init);
        let decoder = Decoder::new(&mut store, "dec", cfg.decoder_config(), &mut rng_init);
        let embedder = ActionEmbedder::new(&mut store, "act", env::N_ACTIONS, cfg.d, &mut rng_init);
        let sim = BilinearSimilarity::new(&mut store, "sim", cfg.d);

        let mut trainable: Vec<ParamId> = Vec::new();
        for prefix in ["enc_q.", "dec.", "act.", "sim."] {
            trainable.extend(store.ids_with_prefix(prefix));
        }
        let optimizer =
            Adam::new(&store, trainable, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);

        let graph = build_graph(cfg.seq_len, cfg.env.h, cfg.env.w, cfg.cube);

        let mut rng_env = stream(cfg.seed, "env");
        let mut train_buffer = ReplayBuffer::new(cfg.train_episodes);
        for _ in 0..cfg.train_episodes {
            train_buffer.push(generate_episode(&cfg.env, &mut rng_env));
        }
        let mut rng_env_eval = stream(cfg.seed, "env_eval");
        let mut eval_buffer = ReplayBuffer::new(cfg.eval_episodes);
        for _ in 0..cfg.eval_episodes {
            eval_buffer.push(generate_episode(&cfg.env, &mut rng_env_eval));
        }

        let rng_mask = stream(cfg.seed, "mask");
        let rng_batch = stream(cfg.seed, "batch");
        Ok(Trainer {
            cfg,
            store,
            encoders,
            decoder,
            embedder,
            sim,
            optimizer,
            graph,
            train_buffer,
            eval_buffer,
            rng_mask,
            rng_batch,
            step: 0,
        })
    }

    /// Rebuilds the model from the config embedded in a checkpoint manifest
    /// and loads the stored parameter values.
    pub fn from_checkpoint(dir: &Path) -> Result<(Self, Manifest), Error> {
        let manifest = crate::checkpoint::read_manifest(dir)?;
        let cfg = TrainConfig::parse(&manifest.config_text)?;
        let mut trainer = Trainer::new(cfg)?;
        let manifest = load_checkpoint(dir, &mut trainer.store)?;
        Ok((trainer, manifest))
    }

    pub fn trainable_ids(&self) -> &[ParamId] {
        self.optimizer.ids()
    }

    /// One optimization step over a fresh batch. Per sequence: sample a
    /// mask, zero the cubes, encode the masked view with the query encoder,
    /// decode query states conditioned on actions, contrast against
    /// momentum-encoder keys from the unmasked view, then update and EMA.
    pub fn train_step(&mut self) -> Result<MetricsRow, Error> {
        let t0 = Instant::now();
        let cfg = &self.cfg;
        let windows = sample_batch(&self.train_buffer, cfg.batch, cfg.seq_len, &mut self.rng_batch);

        let masked: Vec<_> = windows
            .iter()
            .map(|w| {
                let mask = random_walk_mask(&self.graph, cfg.mask_ratio, &mut self.rng_mask);
                env::SampledWindow {
                    seq: apply_mask(&w.seq, &mask, cfg.cube),
                    latents: w.latents.clone(),
                }
            })
            .collect();
        let (masked_frames, actions) = stack_windows(&masked);
        let (clean_frames, _) = stack_windows(&windows);

        // Key path: momentum encoder on the unmasked view, no gradients.
        let keys = self.encoders.key.encode_value(&self.store, &clean_frames);
        if !keys.all_finite() {
            return Err(Error::Runtime("non-finite values produced by momentum key encoder".into()));
        }

        let mut tape = Tape::new();
        let s_tilde = self.encoders.query.encode(&mut tape, &self.store, &masked_frames);
        tape.check_finite(s_tilde, "query encoder")?;
        let tokens = build_token_sequence(&mut tape, &self.store, s_tilde, &actions, &self.embedder);
        let q_states = self.decoder.decode(&mut tape, &self.store, &tokens);
        tape.check_finite(q_states, "predictive decoder")?;

        let ccfg = cfg.contrastive_config();
        let loss = contrastive_loss(&mut tape, &self.store, &self.sim, q_states, &keys, &ccfg);
        tape.check_finite(loss.total, "contrastive loss")?;
        let task = tape.constant(Tensor::scalar(0.0));
        let total = total_loss(&mut tape, task, loss.total, cfg.lambda);
        let total_value = tape.value(total).data[0];
        if !total_value.is_finite() {
            return Err(Error::Runtime(format!(
                "non-finite total loss at step {}",
                self.step
            )));
        }

        let trainable = self.optimizer.ids().to_vec();
        self.store.zero_grad(&trainable);
        tape.backward(total, &mut self.store);
        let grad_norm = self.store.grad_norm(&trainable);
        let lr_scale = if cfg.warmup_steps == 0 {
            1.0
        } else {
            ((self.step + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
        };
        self.optimizer.step(&mut self.store, lr_scale);
        self.encoders.ema_update(&mut self.store);

        let (sim_means, sim_cross) = bucket_sims(
            tape.value(loss.sims),
            cfg.batch,
            cfg.seq_len,
            cfg.window,
        );
        self.step += 1;
        Ok(MetricsRow {
            step: self.step,
            total_loss: total_value,
            level_losses: loss.level_means,
            sim_means,
            sim_cross,
            grad_norm,
            probe_mse: None,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        })
    }

    /// Held-out smoothness buckets using the query encoder and current W.
    pub fn smoothness(&self) -> SmoothnessReport {
        let mut rng = stream(self.cfg.seed, "eval");
        eval_smoothness(
            &self.encoders.query,
            &self.store,
            self.store.value(self.sim.w),
            &self.eval_buffer,
            self.cfg.eval_batches,
            self.cfg.batch,
            self.cfg.seq_len,
            self.cfg.window,
            &mut rng,
        )
    }

    pub fn probe_mse(&self) -> f64 {
        eval_probe(&self.encoders.query, &self.store, &self.eval_buffer)
    }
}

/// Mean similarity per temporal-distance bucket plus the cross-sequence
/// bucket, from a (B*F, B*F) similarity matrix.
fn bucket_sims(sims: &Tensor, b: usize, f: usize, window: usize) -> (Vec<f64>, f64) {
    let n = b * f;
    let mut sums = vec![0.0f64; window + 1];
    let mut counts = vec![0usize; window + 1];
    let mut cross_sum = 0.0;
    let mut cross_n = 0usize;
    for m in 0..n {
        for k in 0..n {
            let v = sims.data[m * n + k];
            if m / f == k / f {
                let delta = (m % f).abs_diff(k % f);
                if delta <= window {
                    sums[delta] += v;
                    counts[delta] += 1;
                }
            } else {
                cross_sum += v;
                cross_n += 1;
            }
        }
    }
    let means = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    (means, if cross_n > 0 { cross_sum / cross_n as f64 } else { 0.0 })
}

pub struct TrainingSummary {
    pub smoothness: SmoothnessReport,
    pub probe_mse: f64,
    pub checkpoint_dir: PathBuf,
    pub steps_run: usize,
}

/// Full training run with metrics logging, periodic evaluation, and
/// checkpointing. Aborts with the last-good checkpoint path on a
/// non-finite loss.
pub fn run_training(cfg: TrainConfig, quiet: bool) -> Result<TrainingSummary, Error> {
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    let mut writer = MetricsWriter::create(&out_dir.join("metrics.csv"), cfg.window)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut last_good: Option<PathBuf> = None;

    for _ in 0..cfg.steps {
        let mut row = match trainer.train_step() {
            Ok(row) => row,
            Err(e) => {
                let hint = match &last_good {
                    Some(p) => format!("; last good checkpoint: {}", p.display()),
                    None => "; no checkpoint written yet".to_string(),
                };
                return Err(Error::Runtime(format!("{e}{hint}")));
            }
        };
        if trainer.step % cfg.eval_every == 0 || trainer.step == cfg.steps {
            let probe = trainer.probe_mse();
            row.probe_mse = Some(probe);
            let smooth = trainer.smoothness();
            let ckpt = checkpoint_path(&out_dir, "last");
            save_checkpoint(&ckpt, &trainer.store, &cfg.hash(), &cfg.canonical_text(), trainer.step)?;
            last_good = Some(ckpt);
            if !quiet {
                println!(
                    "step {:>6}  loss {:>9.4}  grad {:>8.3}  probe {:>9.6}  rho {:>6.3}  sims {:?}",
                    trainer.step,
                    row.total_loss,
                    row.grad_norm,
                    probe,
                    smooth.spearman,
                    smooth
                        .per_delta
                        .iter()
                        .map(|v| (v * 1e3).round() / 1e3)
                        .collect::<Vec<_>>()
                );
            }
        }
        writer.append(&row)?;
    }

    let final_dir = checkpoint_path(&out_dir, "final");
    save_checkpoint(&final_dir, &trainer.store, &cfg.hash(), &cfg.canonical_text(), trainer.step)?;
    Ok(TrainingSummary {
        smoothness: trainer.smoothness(),
        probe_mse: trainer.probe_mse(),
        checkpoint_dir: final_dir,
        steps_run: trainer.step,
    })
}
