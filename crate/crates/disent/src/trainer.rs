//! Alternating training of the generative model and the adversary, the
//! combined lambda-weighted objective, checkpointing, and diagnostics.

use crate::bytes::{self, Reader};
use crate::data::{LabeledImageSet, PairBatch, TripletBatch, TripletSampler};
use crate::model::{
    adversary_loss, generator_loss, kl_divergence, reconstruction_loss, reparameterize,
    ArchConfig, ArchVariant, Model, ReconKind,
};
use crate::nn::{self, Linear, Module, Phase};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};
use crate::{Error, Real, Result};
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DVC1";
pub const CHECKPOINT_VERSION: u32 = 1;

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub arch: ArchConfig,
    /// Non-negative weight of the adversarial terms in the generator loss.
    pub lambda_gan: Real,
    pub kl_weight: Real,
    pub lr_generator: Real,
    pub lr_adversary: Real,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Also apply the adversarial loss to a prior-sampled generation.
    pub enable_prior_sample_gan_term: bool,
    /// Supervised warm-up of the specified encoder, then freeze it.
    pub freeze_specified_encoder: bool,
    pub warmup_iterations: usize,
    /// Allow x2 to share the label of x1 (off by default).
    pub allow_same_label_swap: bool,
    pub recon: ReconKind,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.lambda_gan < 0.0 {
            return Err(Error::InvalidArgument {
                op: "train_config",
                msg: format!("lambda_gan must be non-negative, got {}", self.lambda_gan),
            });
        }
        if self.kl_weight < 0.0 || self.lr_generator < 0.0 || self.lr_adversary < 0.0 {
            return Err(Error::InvalidArgument {
                op: "train_config",
                msg: "weights and learning rates must be non-negative".into(),
            });
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument {
                op: "train_config",
                msg: "iterations and batch_size must be positive".into(),
            });
        }
        Ok(())
    }

    /// Canonical key=value form, embedded in checkpoints.
    pub fn to_kv(&self) -> String {
        let variant = match self.arch.variant {
            ArchVariant::Shallow => "shallow",
            ArchVariant::Deep => "deep",
        };
        let recon = match self.recon {
            ReconKind::Bce => "bce",
            ReconKind::L2 => "l2",
        };
        format!(
            "arch={variant}\n\
             dim_s={}\n\
             dim_z={}\n\
             image_channels={}\n\
             image_side={}\n\
             num_labels={}\n\
             channels={},{},{}\n\
             lambda_gan={}\n\
             kl_weight={}\n\
             lr_generator={}\n\
             lr_adversary={}\n\
             iterations={}\n\
             batch_size={}\n\
             seed={}\n\
             enable_prior_sample_gan_term={}\n\
             freeze_specified_encoder={}\n\
             warmup_iterations={}\n\
             allow_same_label_swap={}\n\
             recon_loss={recon}\n\
             checkpoint_every={}\n\
             log_every={}\n",
            self.arch.dim_s,
            self.arch.dim_z,
            self.arch.image_channels,
            self.arch.image_side,
            self.arch.num_labels,
            self.arch.channels[0],
            self.arch.channels[1],
            self.arch.channels[2],
            self.lambda_gan,
            self.kl_weight,
            self.lr_generator,
            self.lr_adversary,
            self.iterations,
            self.batch_size,
            self.seed,
            self.enable_prior_sample_gan_term,
            self.freeze_specified_encoder,
            self.warmup_iterations,
            self.allow_same_label_swap,
            self.checkpoint_every,
            self.log_every,
        )
    }

    /// Parses the canonical form; every key must be present exactly once.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = std::collections::BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: lineno + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut get = |k: &str| -> Result<String> {
            map.remove(k).ok_or_else(|| Error::Config {
                line: 0,
                msg: format!("missing key {k:?}"),
            })
        };
        fn parse<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config {
                line: 0,
                msg: format!("invalid value for {k}: {v:?}"),
            })
        }
        let variant = match get("arch")?.as_str() {
            "shallow" => ArchVariant::Shallow,
            "deep" => ArchVariant::Deep,
            other => {
                return Err(Error::Config {
                    line: 0,
                    msg: format!("unknown arch variant {other:?}"),
                })
            }
        };
        let channels_raw = get("channels")?;
        let parts: Vec<&str> = channels_raw.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Config {
                line: 0,
                msg: format!("channels must be three comma-separated values, got {channels_raw:?}"),
            });
        }
        let channels = [
            parse("channels", parts[0].trim())?,
            parse("channels", parts[1].trim())?,
            parse("channels", parts[2].trim())?,
        ];
        let recon = match get("recon_loss")?.as_str() {
            "bce" => ReconKind::Bce,
            "l2" => ReconKind::L2,
            other => {
                return Err(Error::Config {
                    line: 0,
                    msg: format!("unknown recon_loss {other:?}"),
                })
            }
        };
        let cfg = TrainConfig {
            arch: ArchConfig {
                variant,
                dim_s: parse("dim_s", &get("dim_s")?)?,
                dim_z: parse("dim_z", &get("dim_z")?)?,
                image_channels: parse("image_channels", &get("image_channels")?)?,
                image_side: parse("image_side", &get("image_side")?)?,
                num_labels: parse("num_labels", &get("num_labels")?)?,
                channels,
            },
            lambda_gan: parse("lambda_gan", &get("lambda_gan")?)?,
            kl_weight: parse("kl_weight", &get("kl_weight")?)?,
            lr_generator: parse("lr_generator", &get("lr_generator")?)?,
            lr_adversary: parse("lr_adversary", &get("lr_adversary")?)?,
            iterations: parse("iterations", &get("iterations")?)?,
            batch_size: parse("batch_size", &get("batch_size")?)?,
            seed: parse("seed", &get("seed")?)?,
            enable_prior_sample_gan_term: parse(
                "enable_prior_sample_gan_term",
                &get("enable_prior_sample_gan_term")?,
            )?,
            freeze_specified_encoder: parse(
                "freeze_specified_encoder",
                &get("freeze_specified_encoder")?,
            )?,
            warmup_iterations: parse("warmup_iterations", &get("warmup_iterations")?)?,
            allow_same_label_swap: parse(
                "allow_same_label_swap",
                &get("allow_same_label_swap")?,
            )?,
            recon,
            checkpoint_every: parse("checkpoint_every", &get("checkpoint_every")?)?,
            log_every: parse("log_every", &get("log_every")?)?,
        };
        if let Some(extra) = map.keys().next() {
            return Err(Error::Config {
                line: 0,
                msg: format!("unknown key {extra:?}"),
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

// ── Diagnostics ─────────────────────────────────────────────────────────

/// Scalar record of one training iteration. Generator-phase and
/// adversary-phase calls each fill their own fields; `merged` combines
/// them into the per-iteration record.
#[derive(Debug, Clone, Default)]
pub struct StepDiagnostics {
    pub recon_x11: Real,
    pub recon_x11p: Real,
    pub kl: Real,
    pub gen_adv_swapped: Real,
    pub gen_adv_prior: Real,
    pub total_generator_loss: Real,
    pub adversary_loss: Real,
    pub mean_real_prob: Real,
    pub mean_fake_prob: Real,
    pub clamp_events: usize,
}

impl StepDiagnostics {
    pub fn merged(&self, adv: &StepDiagnostics) -> StepDiagnostics {
        StepDiagnostics {
            adversary_loss: adv.adversary_loss,
            mean_real_prob: adv.mean_real_prob,
            mean_fake_prob: adv.mean_fake_prob,
            clamp_events: self.clamp_events + adv.clamp_events,
            ..self.clone()
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.recon_x11,
            self.recon_x11p,
            self.kl,
            self.gen_adv_swapped,
            self.gen_adv_prior,
            self.total_generator_loss,
            self.adversary_loss,
            self.mean_real_prob,
            self.mean_fake_prob,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    pub fn log_line(&self, iteration: usize) -> String {
        format!(
            "iter {iteration} total {:.4} recon {:.4}/{:.4} kl {:.4} gan {:.4}/{:.4} adv {:.4} d(real) {:.3} d(fake) {:.3} clamps {}",
            self.total_generator_loss,
            self.recon_x11,
            self.recon_x11p,
            self.kl,
            self.gen_adv_swapped,
            self.gen_adv_prior,
            self.adversary_loss,
            self.mean_real_prob,
            self.mean_fake_prob,
            self.clamp_events
        )
    }
}

// ── Training steps ──────────────────────────────────────────────────────

/// Generator-side update with injected posterior/prior noise, so tests can
/// replay the exact computation. `noise_post` must be [N, dim_z]; the
/// prior noise is only read when the prior-sample term is active.
pub fn generator_step_with_noise(
    model: &mut Model,
    cfg: &TrainConfig,
    batch: &TripletBatch,
    noise_post: &Tensor,
    noise_prior: &Tensor,
) -> Result<StepDiagnostics> {
    let mut tape = Tape::new();
    let x1 = tape.constant_tensor(&batch.x1)?;
    let x1p = tape.constant_tensor(&batch.x1p)?;
    let x2 = tape.constant_tensor(&batch.x2)?;

    let e1 = model.encoder.forward(&mut tape, x1, Phase::Train)?;
    let e1p = model.encoder.forward(&mut tape, x1p, Phase::Train)?;
    // Enc(x2) feeds only the adversarial branch; skip it when that branch
    // carries no weight.
    let e2 = if cfg.lambda_gan > 0.0 {
        Some(model.encoder.forward(&mut tape, x2, Phase::Train)?)
    } else {
        None
    };

    let z1 = reparameterize(&mut tape, e1.mu, e1.sigma, noise_post)?;
    let x11 = model.decoder.forward(&mut tape, z1, e1.s, Phase::Train)?;
    let x11p = model.decoder.forward(&mut tape, z1, e1p.s, Phase::Train)?;

    let r11 = reconstruction_loss(&mut tape, x11, &batch.x1, cfg.recon)?;
    let r11p = reconstruction_loss(&mut tape, x11p, &batch.x1, cfg.recon)?;
    // Both reconstructions weigh equally; the pair averages to one
    // reconstruction term so the lambda=0, x1'==x1 case is exactly the
    // conditional VAE bound.
    let rsum = tape.add(r11, r11p)?;
    let recon_total = tape.scale(rsum, 0.5)?;
    let kl = kl_divergence(&mut tape, e1.mu, e1.sigma)?;
    let klw = tape.scale(kl, cfg.kl_weight)?;
    let mut total = tape.add(recon_total, klw)?;

    let mut diag = StepDiagnostics {
        recon_x11: tape.item(r11),
        recon_x11p: tape.item(r11p),
        kl: tape.item(kl),
        ..Default::default()
    };

    if let Some(e2) = e2 {
        let x12 = model.decoder.forward(&mut tape, z1, e2.s, Phase::Train)?;
        let p12 =
            model
                .discriminator
                .forward(&mut tape, x12, &batch.id2, Phase::TrainFrozen)?;
        let g12 = generator_loss(&mut tape, p12)?;
        diag.gen_adv_swapped = tape.item(g12);
        let adv_sum = if cfg.enable_prior_sample_gan_term {
            let zp = tape.constant_tensor(noise_prior)?;
            let xp = model.decoder.forward(&mut tape, zp, e2.s, Phase::Train)?;
            let pp =
                model
                    .discriminator
                    .forward(&mut tape, xp, &batch.id2, Phase::TrainFrozen)?;
            let gp = generator_loss(&mut tape, pp)?;
            diag.gen_adv_prior = tape.item(gp);
            tape.add(g12, gp)?
        } else {
            g12
        };
        let scaled = tape.scale(adv_sum, cfg.lambda_gan)?;
        total = tape.add(total, scaled)?;
    }

    diag.total_generator_loss = tape.item(total);
    diag.clamp_events = tape.clamp_events();

    tape.backward(total)?;
    nn::absorb_grads(&tape, &mut model.encoder);
    nn::absorb_grads(&tape, &mut model.decoder);
    nn::sgd_step(&mut model.encoder, cfg.lr_generator)?;
    nn::sgd_step(&mut model.decoder, cfg.lr_generator)?;
    Ok(diag)
}

/// One generator update on a sampled triplet; adversary weights stay frozen.
pub fn generator_step(
    model: &mut Model,
    cfg: &TrainConfig,
    batch: &TripletBatch,
    rng: &mut Rng,
) -> Result<StepDiagnostics> {
    for (a, b) in batch.id1.iter().zip(batch.id1.iter()) {
        debug_assert_eq!(a, b);
    }
    let n = batch.id1.len();
    let mut noise = Tensor::zeros(&[n, cfg.arch.dim_z]);
    rng.fill_normal(noise.data_mut(), 0.0, 1.0);
    let mut prior = Tensor::zeros(&[n, cfg.arch.dim_z]);
    if cfg.lambda_gan > 0.0 && cfg.enable_prior_sample_gan_term {
        rng.fill_normal(prior.data_mut(), 0.0, 1.0);
    }
    generator_step_with_noise(model, cfg, batch, &noise, &prior)
}

/// Adversary-side update with injected noise.
pub fn adversary_step_with_noise(
    model: &mut Model,
    cfg: &TrainConfig,
    pair: &PairBatch,
    noise_post: &Tensor,
) -> Result<StepDiagnostics> {
    let mut tape = Tape::new();
    let x1 = tape.constant_tensor(&pair.x1)?;
    let x2 = tape.constant_tensor(&pair.x2)?;

    // Build the swapped generation with encoder and decoder frozen.
    let e1 = model.encoder.forward(&mut tape, x1, Phase::TrainFrozen)?;
    let e2 = model.encoder.forward(&mut tape, x2, Phase::TrainFrozen)?;
    let z1 = reparameterize(&mut tape, e1.mu, e1.sigma, noise_post)?;
    let x12 = model.decoder.forward(&mut tape, z1, e2.s, Phase::TrainFrozen)?;
    let fake = tape.detach(x12)?;

    let p_real = model
        .discriminator
        .forward(&mut tape, x2, &pair.id2, Phase::Train)?;
    let p_fake = model
        .discriminator
        .forward(&mut tape, fake, &pair.id2, Phase::Train)?;
    let loss = adversary_loss(&mut tape, p_real, p_fake)?;

    let mean = |v: &[Real]| v.iter().sum::<Real>() / v.len() as Real;
    let diag = StepDiagnostics {
        adversary_loss: tape.item(loss),
        mean_real_prob: mean(tape.data(p_real)),
        mean_fake_prob: mean(tape.data(p_fake)),
        clamp_events: tape.clamp_events(),
        ..Default::default()
    };

    tape.backward(loss)?;
    nn::absorb_grads(&tape, &mut model.discriminator);
    nn::sgd_step(&mut model.discriminator, cfg.lr_adversary)?;
    Ok(diag)
}

/// One adversary update on a sampled pair; encoder/decoder stay frozen.
pub fn adversary_step(
    model: &mut Model,
    cfg: &TrainConfig,
    pair: &PairBatch,
    rng: &mut Rng,
) -> Result<StepDiagnostics> {
    let n = pair.id1.len();
    let mut noise = Tensor::zeros(&[n, cfg.arch.dim_z]);
    rng.fill_normal(noise.data_mut(), 0.0, 1.0);
    adversary_step_with_noise(model, cfg, pair, &noise)
}

// ── Supervised warm-up for the pre-trained-embedding scheme ────────────

/// Trains the shared trunk and specified head with a two-layer classifier
/// on top of s, then leaves the model ready to be frozen.
fn warmup_specified(
    model: &mut Model,
    cfg: &TrainConfig,
    data: &LabeledImageSet,
    rng: &mut Rng,
) -> Result<()> {
    let mut head1 = Linear::init(cfg.arch.dim_s, 256, rng);
    let mut head2 = Linear::init(256, cfg.arch.num_labels, rng);
    // The z head is not part of the supervised task.
    model.encoder.fc_z.weight.requires_grad = false;
    model.encoder.fc_z.bias.requires_grad = false;
    for _ in 0..cfg.warmup_iterations {
        let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.below(data.len())).collect();
        let x = data.gather(&idx);
        let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let mut tape = Tape::new();
        let xv = tape.constant_tensor(&x)?;
        let enc = model.encoder.forward(&mut tape, xv, Phase::Train)?;
        let h = head1.forward(&mut tape, enc.s, Phase::Train)?;
        let h = tape.relu(h)?;
        let logits = head2.forward(&mut tape, h, Phase::Train)?;
        let loss = tape.cross_entropy(logits, &y)?;
        tape.backward(loss)?;
        nn::absorb_grads(&tape, &mut model.encoder);
        nn::absorb_grads(&tape, &mut head1);
        nn::absorb_grads(&tape, &mut head2);
        nn::sgd_step(&mut model.encoder, cfg.lr_generator)?;
        nn::sgd_step(&mut head1, cfg.lr_generator)?;
        nn::sgd_step(&mut head2, cfg.lr_generator)?;
    }
    model.encoder.fc_z.weight.requires_grad = true;
    model.encoder.fc_z.bias.requires_grad = true;
    Ok(())
}

// ── Training loop ───────────────────────────────────────────────────────

pub struct TrainOutcome {
    pub model: Model,
    pub iterations_run: usize,
    /// (iteration, record) sampled every `log_every` iterations.
    pub log: Vec<(usize, StepDiagnostics)>,
    pub rng: Rng,
}

/// Runs Algorithm-style alternating training: one generator update and one
/// adversary update per iteration. Fully deterministic given the seed.
pub fn train(cfg: &TrainConfig, data: &LabeledImageSet, run_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (c, h, w) = data.image_dims();
    if c != cfg.arch.image_channels
        || h != cfg.arch.image_side
        || w != cfg.arch.image_side
        || data.num_labels != cfg.arch.num_labels
    {
        return Err(Error::InvalidArgument {
            op: "train",
            msg: format!(
                "dataset ({c}x{h}x{w}, {} labels) does not match the architecture ({}x{}x{}, {} labels)",
                data.num_labels,
                cfg.arch.image_channels,
                cfg.arch.image_side,
                cfg.arch.image_side,
                cfg.arch.num_labels
            ),
        });
    }

    let mut model = Model::init(&cfg.arch, cfg.seed)?;
    let mut rng = Rng::derive(cfg.seed, 0x747261696e);

    if cfg.freeze_specified_encoder {
        warmup_specified(&mut model, cfg, data, &mut rng)?;
        model.freeze_specified();
    }

    let sampler = TripletSampler::new(data, cfg.allow_same_label_swap)?;
    let mut log = Vec::new();

    for it in 0..cfg.iterations {
        let triplet = sampler.triplet_batch(data, &mut rng, cfg.batch_size);
        let gen = generator_step(&mut model, cfg, &triplet, &mut rng).map_err(|e| {
            Error::TrainingAborted {
                iteration: it,
                msg: e.to_string(),
            }
        })?;
        let pair = sampler.pair_batch(data, &mut rng, cfg.batch_size);
        let adv = adversary_step(&mut model, cfg, &pair, &mut rng).map_err(|e| {
            Error::TrainingAborted {
                iteration: it,
                msg: e.to_string(),
            }
        })?;
        let diag = gen.merged(&adv);
        if !diag.is_finite() {
            return Err(Error::TrainingAborted {
                iteration: it,
                msg: "non-finite diagnostics".into(),
            });
        }

        if it == 0 || (it + 1) % cfg.log_every == 0 {
            if let Some(dir) = run_dir {
                append_line(&dir.join("diagnostics.log"), &diag.log_line(it + 1))?;
            }
            log.push((it + 1, diag));
        }
        if let Some(dir) = run_dir {
            if (it + 1) % cfg.checkpoint_every == 0 {
                save_checkpoint(&dir.join("checkpoint.dvc"), &model, cfg, it + 1, &rng)?;
            }
        }
    }

    if let Some(dir) = run_dir {
        save_checkpoint(&dir.join("final.dvc"), &model, cfg, cfg.iterations, &rng)?;
    }
    Ok(TrainOutcome {
        model,
        iterations_run: cfg.iterations,
        log,
        rng,
    })
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    writeln!(f, "{line}")?;
    Ok(())
}

// ── Checkpoints ─────────────────────────────────────────────────────────

/// Parameters, training config, iteration counter, and RNG state, as read
/// back from the binary checkpoint format.
pub struct ModelCheckpoint {
    pub params: Vec<(String, Tensor)>,
    pub config: TrainConfig,
    pub iteration: usize,
    pub rng_state: [u8; 32],
}

pub fn checkpoint_bytes(
    model: &Model,
    cfg: &TrainConfig,
    iteration: usize,
    rng: &Rng,
) -> Vec<u8> {
    let mut names = Vec::new();
    model.visit("", &mut |name, _| names.push(name.to_string()));
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    bytes::put_u32(&mut out, CHECKPOINT_VERSION);
    bytes::put_u64(&mut out, names.len() as u64);
    model.visit("", &mut |name, t| {
        bytes::put_tensor(&mut out, name, t);
    });
    let config_text = format!("{}iteration={iteration}\n", cfg.to_kv());
    bytes::put_text(&mut out, &config_text);
    out.extend_from_slice(&rng.state_bytes());
    out
}

pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    cfg: &TrainConfig,
    iteration: usize,
    rng: &Rng,
) -> Result<()> {
    let bytes = checkpoint_bytes(model, cfg, iteration, rng);
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let buf = std::fs::read(path)?;
    let mut r = Reader::new(&buf, "checkpoint");
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointBadMagic {
            found: magic,
            expected: CHECKPOINT_MAGIC,
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointBadVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = r.u64()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        params.push(bytes::get_tensor(&mut r)?);
    }
    let config_text = bytes::get_text(&mut r)?;
    let state: [u8; 32] = r
        .take(32)?
        .try_into()
        .expect("reader returned wrong length");
    if !r.is_done() {
        return Err(Error::CheckpointInvalid {
            msg: "trailing bytes after RNG state".into(),
        });
    }

    // Split the iteration counter off the embedded config block.
    let mut iteration = None;
    let mut cfg_lines = String::new();
    for line in config_text.lines() {
        if let Some(v) = line.strip_prefix("iteration=") {
            iteration = Some(v.parse().map_err(|_| Error::CheckpointInvalid {
                msg: format!("invalid iteration {v:?}"),
            })?);
        } else {
            cfg_lines.push_str(line);
            cfg_lines.push('\n');
        }
    }
    let iteration = iteration.ok_or_else(|| Error::CheckpointInvalid {
        msg: "missing iteration counter".into(),
    })?;
    let config = TrainConfig::from_kv(&cfg_lines)?;
    Ok(ModelCheckpoint {
        params,
        config,
        iteration,
        rng_state: state,
    })
}

impl ModelCheckpoint {
    /// Reconstructs the model, validating that the stored parameters match
    /// the architecture exactly (names, count, shapes).
    pub fn into_model(self) -> Result<Model> {
        let mut model = Model::init(&self.config.arch, self.config.seed)?;
        let mut by_name: std::collections::HashMap<String, Tensor> =
            self.params.into_iter().collect();
        let mut missing = Vec::new();
        let mut shape_err = None;
        model.visit_mut("", &mut |name, t| {
            match by_name.remove(name) {
                None => missing.push(name.to_string()),
                Some(loaded) => {
                    if loaded.shape() != t.shape() {
                        if shape_err.is_none() {
                            shape_err = Some(Error::CheckpointShapeMismatch {
                                name: name.to_string(),
                                found: loaded.shape().to_vec(),
                                expected: t.shape().to_vec(),
                            });
                        }
                    } else {
                        t.data_mut().copy_from_slice(loaded.data());
                        t.grad = None;
                    }
                }
            }
        });
        if let Some(e) = shape_err {
            return Err(e);
        }
        if !missing.is_empty() {
            return Err(Error::CheckpointInvalid {
                msg: format!("missing parameters: {missing:?}"),
            });
        }
        if !by_name.is_empty() {
            let extra: Vec<String> = by_name.into_keys().collect();
            return Err(Error::CheckpointInvalid {
                msg: format!("unexpected parameters: {extra:?}"),
            });
        }
        if self.config.freeze_specified_encoder {
            model.freeze_specified();
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticFactorSpec};
    use crate::nn::parameter_bytes;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            arch: ArchConfig {
                variant: ArchVariant::Shallow,
                dim_s: 4,
                dim_z: 4,
                image_channels: 1,
                image_side: 16,
                num_labels: 4,
                channels: [4, 6, 8],
            },
            lambda_gan: 0.5,
            kl_weight: 1.0,
            lr_generator: 0.01,
            lr_adversary: 0.01,
            iterations: 10,
            batch_size: 2,
            seed: 1,
            enable_prior_sample_gan_term: true,
            freeze_specified_encoder: false,
            warmup_iterations: 5,
            allow_same_label_swap: false,
            recon: ReconKind::Bce,
            checkpoint_every: 1000,
            log_every: 5,
        }
    }

    fn tiny_data() -> LabeledImageSet {
        generate_synthetic(
            &SyntheticFactorSpec {
                num_identities: 4,
                samples_per_identity: 6,
                image_side: 16,
                ..Default::default()
            },
            21,
        )
        .unwrap()
    }

    fn sample_triplet(cfg: &TrainConfig, data: &LabeledImageSet, seed: u64) -> TripletBatch {
        let sampler = TripletSampler::new(data, false).unwrap();
        let mut rng = Rng::seed_from(seed);
        sampler.triplet_batch(data, &mut rng, cfg.batch_size)
    }

    #[test]
    fn config_kv_round_trips() {
        let cfg = tiny_cfg();
        let text = cfg.to_kv();
        let back = TrainConfig::from_kv(&text).unwrap();
        assert_eq!(cfg, back);
        assert!(TrainConfig::from_kv(&format!("{text}mystery=1\n")).is_err());
        assert!(TrainConfig::from_kv(&text.replace("lambda_gan=0.5", "lambda_gan=-1")).is_err());
    }

    #[test]
    fn generator_step_leaves_discriminator_untouched() {
        let cfg = tiny_cfg();
        let data = tiny_data();
        let mut model = Model::init(&cfg.arch, 3).unwrap();
        let batch = sample_triplet(&cfg, &data, 5);
        let before = parameter_bytes(&model.discriminator);
        let enc_before = parameter_bytes(&model.encoder);
        let mut rng = Rng::seed_from(9);
        generator_step(&mut model, &cfg, &batch, &mut rng).unwrap();
        assert_eq!(before, parameter_bytes(&model.discriminator));
        assert_ne!(enc_before, parameter_bytes(&model.encoder));
    }

    #[test]
    fn adversary_step_leaves_generator_untouched() {
        let cfg = tiny_cfg();
        let data = tiny_data();
        let mut model = Model::init(&cfg.arch, 3).unwrap();
        let sampler = TripletSampler::new(&data, false).unwrap();
        let mut rng = Rng::seed_from(11);
        let pair = sampler.pair_batch(&data, &mut rng, cfg.batch_size);
        let enc_before = parameter_bytes(&model.encoder);
        let dec_before = parameter_bytes(&model.decoder);
        let disc_before = parameter_bytes(&model.discriminator);
        adversary_step(&mut model, &cfg, &pair, &mut rng).unwrap();
        assert_eq!(enc_before, parameter_bytes(&model.encoder));
        assert_eq!(dec_before, parameter_bytes(&model.decoder));
        assert_ne!(disc_before, parameter_bytes(&model.discriminator));
    }

    #[test]
    fn pinned_half_discriminator_contributes_lambda_ln2_per_image() {
        let cfg = tiny_cfg();
        let data = tiny_data();
        let mut model = Model::init(&cfg.arch, 3).unwrap();
        // Zeroing the final layer pins D to sigmoid(0) = 0.5 exactly.
        model.discriminator.fc.weight.data_mut().fill(0.0);
        model.discriminator.fc.bias.data_mut().fill(0.0);
        let batch = sample_triplet(&cfg, &data, 7);
        let n = batch.id1.len();
        let noise = Tensor::zeros(&[n, cfg.arch.dim_z]);
        let prior = Tensor::zeros(&[n, cfg.arch.dim_z]);
        let diag =
            generator_step_with_noise(&mut model, &cfg, &batch, &noise, &prior).unwrap();
        let ln2 = (2.0 as Real).ln();
        assert!((diag.gen_adv_swapped - ln2).abs() < 1e-12);
        assert!((diag.gen_adv_prior - ln2).abs() < 1e-12);
        // and the assembled total carries them with weight lambda
        let expect = 0.5 * (diag.recon_x11 + diag.recon_x11p)
            + cfg.kl_weight * diag.kl
            + cfg.lambda_gan * (diag.gen_adv_swapped + diag.gen_adv_prior);
        assert!((diag.total_generator_loss - expect).abs() < 1e-12);
    }

    #[test]
    fn lambda_zero_reduces_to_plain_vae_objective() {
        let mut cfg = tiny_cfg();
        cfg.lambda_gan = 0.0;
        let data = tiny_data();
        let mut model = Model::init(&cfg.arch, 3).unwrap();
        let batch = sample_triplet(&cfg, &data, 7);
        let n = batch.id1.len();
        let noise = Tensor::zeros(&[n, cfg.arch.dim_z]);
        let prior = Tensor::zeros(&[n, cfg.arch.dim_z]);
        let diag =
            generator_step_with_noise(&mut model, &cfg, &batch, &noise, &prior).unwrap();
        assert_eq!(diag.gen_adv_swapped, 0.0);
        assert_eq!(diag.gen_adv_prior, 0.0);
        let expect = 0.5 * (diag.recon_x11 + diag.recon_x11p) + diag.kl;
        assert!((diag.total_generator_loss - expect).abs() < 1e-12);
    }

    #[test]
    fn repeated_generator_steps_reduce_loss_on_fixed_triplet() {
        let mut cfg = tiny_cfg();
        cfg.lambda_gan = 0.0;
        let data = tiny_data();
        let mut model = Model::init(&cfg.arch, 3).unwrap();
        let batch = sample_triplet(&cfg, &data, 13);
        let n = batch.id1.len();
        let noise = Tensor::zeros(&[n, cfg.arch.dim_z]);
        let prior = Tensor::zeros(&[n, cfg.arch.dim_z]);
        let mut first = 0.0;
        let mut last = 0.0;
        for step in 0..50 {
            let d = generator_step_with_noise(&mut model, &cfg, &batch, &noise, &prior)
                .unwrap();
            if step == 0 {
                first = d.total_generator_loss;
            }
            last = d.total_generator_loss;
        }
        assert!(
            last < first,
            "loss did not decrease: {first} -> {last}"
        );
    }

    #[test]
    fn repeated_adversary_steps_reduce_loss_on_fixed_pair() {
        let cfg = tiny_cfg();
        let data = tiny_data();
        let mut model = Model::init(&cfg.arch, 3).unwrap();
        let sampler = TripletSampler::new(&data, false).unwrap();
        let mut rng = Rng::seed_from(15);
        let pair = sampler.pair_batch(&data, &mut rng, cfg.batch_size);
        let n = pair.id1.len();
        let noise = Tensor::zeros(&[n, cfg.arch.dim_z]);
        let mut first = 0.0;
        let mut last = 0.0;
        for step in 0..50 {
            let d = adversary_step_with_noise(&mut model, &cfg, &pair, &noise).unwrap();
            if step == 0 {
                first = d.adversary_loss;
            }
            last = d.adversary_loss;
        }
        assert!(last < first, "adversary loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn identical_real_and_fake_floor_at_two_ln2() {
        let cfg = tiny_cfg();
        let data = tiny_data();
        let mut model = Model::init(&cfg.arch, 3).unwrap();
        // Same image on both sides of the adversary loss: optimum is 0.5.
        let x = data.gather(&[0, 1]);
        let ln2 = (2.0 as Real).ln();
        let mut last = 0.0;
        for _ in 0..120 {
            let mut tape = Tape::new();
            let xv = tape.constant_tensor(&x).unwrap();
            let p_real = model
                .discriminator
                .forward(&mut tape, xv, &[0, 1], Phase::Train)
                .unwrap();
            let p_fake = model
                .discriminator
                .forward(&mut tape, xv, &[0, 1], Phase::Train)
                .unwrap();
            let loss = adversary_loss(&mut tape, p_real, p_fake).unwrap();
            last = tape.item(loss);
            assert!(last >= 2.0 * ln2 - 1e-9, "loss {last} below floor");
            tape.backward(loss).unwrap();
            nn::absorb_grads(&tape, &mut model.discriminator);
            nn::sgd_step(&mut model.discriminator, 0.05).unwrap();
        }
        assert!((last - 2.0 * ln2).abs() < 0.05, "loss {last} far from floor");
    }

    #[test]
    fn train_is_bitwise_reproducible() {
        let mut cfg = tiny_cfg();
        cfg.iterations = 6;
        let data = tiny_data();
        let a = train(&cfg, &data, None).unwrap();
        let b = train(&cfg, &data, None).unwrap();
        let bytes_a = checkpoint_bytes(&a.model, &cfg, 6, &a.rng);
        let bytes_b = checkpoint_bytes(&b.model, &cfg, 6, &b.rng);
        assert_eq!(bytes_a, bytes_b);
        let mut cfg2 = cfg.clone();
        cfg2.seed = 2;
        let c = train(&cfg2, &data, None).unwrap();
        assert_ne!(bytes_a, checkpoint_bytes(&c.model, &cfg2, 6, &c.rng));
    }

    #[test]
    fn train_rejects_mismatched_dataset() {
        let cfg = tiny_cfg();
        let data = generate_synthetic(
            &SyntheticFactorSpec {
                num_identities: 4,
                samples_per_identity: 4,
                image_side: 32,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        assert!(train(&cfg, &data, None).is_err());
    }

    #[test]
    fn freeze_ablation_trains_and_keeps_specified_frozen() {
        let mut cfg = tiny_cfg();
        cfg.freeze_specified_encoder = true;
        cfg.warmup_iterations = 8;
        cfg.iterations = 4;
        let data = tiny_data();
        let out = train(&cfg, &data, None).unwrap();
        assert!(out.model.encoder.frozen_specified);
        assert!(!out.model.encoder.fc_s.weight.requires_grad);
        assert!(out.model.encoder.fc_z.weight.requires_grad);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise_identity() {
        let cfg = tiny_cfg();
        let model = Model::init(&cfg.arch, 5).unwrap();
        let rng = Rng::seed_from(77);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dvc");
        save_checkpoint(&path, &model, &cfg, 123, &rng).unwrap();
        let first = std::fs::read(&path).unwrap();

        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.iteration, 123);
        assert_eq!(ck.rng_state, rng.state_bytes());
        let mut count = 0;
        model.visit("", &mut |_, _| count += 1);
        assert_eq!(ck.params.len(), count);
        let config = ck.config.clone();
        let restored = ck.into_model().unwrap();
        let restored_rng = Rng::from_state_bytes(&rng.state_bytes());
        let path2 = dir.path().join("m2.dvc");
        save_checkpoint(&path2, &restored, &config, 123, &restored_rng).unwrap();
        let second = std::fs::read(&path2).unwrap();
        assert_eq!(first, second, "save -> load -> save changed bytes");
    }

    #[test]
    fn checkpoint_error_kinds_are_distinct() {
        let cfg = tiny_cfg();
        let model = Model::init(&cfg.arch, 5).unwrap();
        let rng = Rng::seed_from(1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dvc");
        save_checkpoint(&path, &model, &cfg, 1, &rng).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CheckpointBadMagic { .. })
        ));

        let mut bad_version = good.clone();
        bad_version[4] = 99;
        std::fs::write(&path, &bad_version).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CheckpointBadVersion { found: 99, .. })
        ));

        let mut truncated = good.clone();
        truncated.truncate(good.len() / 2);
        std::fs::write(&path, &truncated).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::CheckpointTruncated { .. })
        ));

        // shape disagreement with the architecture in the config block
        std::fs::write(&path, &good).unwrap();
        let mut ck = load_checkpoint(&path).unwrap();
        ck.config.arch.dim_s = 5;
        assert!(matches!(
            ck.into_model(),
            Err(Error::CheckpointShapeMismatch { .. })
        ));
    }
}
