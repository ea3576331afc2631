//! Run configuration: plain key=value files (one pair per line, `#`
//! comments), command-line overrides, defaults, and the effective-config
//! echo written into every run directory.

use crate::data::{self, LabeledImageSet, SyntheticFactorSpec};
use crate::model::{ArchConfig, ArchVariant, ReconKind};
use crate::trainer::TrainConfig;
use crate::{Error, Result};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Mnist,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub mnist_images: PathBuf,
    pub mnist_labels: PathBuf,
    /// Cap on the number of MNIST images used (0 = all).
    pub mnist_limit: usize,
    pub synth: SyntheticFactorSpec,
    pub synth_seed: u64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub holdout_identities: usize,
    pub variant: ArchVariant,
    pub dim_s: usize,
    pub dim_z: usize,
    pub channels: [usize; 3],
    pub lambda_gan: f64,
    pub kl_weight: f64,
    pub lr_generator: f64,
    pub lr_adversary: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub enable_prior_sample_gan_term: bool,
    pub freeze_specified_encoder: bool,
    pub warmup_iterations: usize,
    pub allow_same_label_swap: bool,
    pub recon: ReconKind,
    pub checkpoint_every: usize,
    pub log_every: usize,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: DatasetKind::Synthetic,
            mnist_images: "data/mnist/mnist-subset-images-idx3-ubyte".into(),
            mnist_labels: "data/mnist/mnist-subset-labels-idx1-ubyte".into(),
            mnist_limit: 0,
            synth: SyntheticFactorSpec::default(),
            synth_seed: 11,
            val_fraction: 0.1,
            test_fraction: 0.1,
            holdout_identities: 0,
            variant: ArchVariant::Shallow,
            dim_s: 16,
            dim_z: 16,
            channels: [64, 128, 256],
            lambda_gan: 1.0,
            kl_weight: 1.0,
            lr_generator: 0.01,
            lr_adversary: 0.01,
            iterations: 20_000,
            batch_size: 64,
            seed: 1,
            enable_prior_sample_gan_term: true,
            freeze_specified_encoder: false,
            warmup_iterations: 2000,
            allow_same_label_swap: false,
            recon: ReconKind::Bce,
            checkpoint_every: 1000,
            log_every: 100,
            out_dir: "runs".into(),
        }
    }
}

impl RunConfig {
    /// Reads the file (if given) and applies `key=value` overrides on top,
    /// which take precedence over file values.
    pub fn parse(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)?;
            for (lineno, raw) in text.lines().enumerate() {
                cfg.apply_line(raw, lineno + 1)?;
            }
        }
        for ov in overrides {
            cfg.apply_line(ov, 0)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_line(&mut self, raw: &str, line: usize) -> Result<()> {
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            return Ok(());
        }
        let (key, value) = content.split_once('=').ok_or_else(|| Error::Config {
            line,
            msg: format!("expected key=value, got {content:?}"),
        })?;
        self.apply(key.trim(), value.trim(), line)
    }

    fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
            value.parse().map_err(|_| Error::Config {
                line,
                msg: format!("invalid value for {key}: {value:?}"),
            })
        }
        match key {
            "dataset" => {
                self.dataset = match value {
                    "synthetic" => DatasetKind::Synthetic,
                    "mnist" => DatasetKind::Mnist,
                    other => {
                        return Err(Error::Config {
                            line,
                            msg: format!("unknown dataset {other:?} (synthetic|mnist)"),
                        })
                    }
                }
            }
            "mnist_images" => self.mnist_images = value.into(),
            "mnist_labels" => self.mnist_labels = value.into(),
            "mnist_limit" => self.mnist_limit = p(key, value, line)?,
            "synth_identities" => self.synth.num_identities = p(key, value, line)?,
            "synth_samples_per_identity" => {
                self.synth.samples_per_identity = p(key, value, line)?
            }
            "synth_image_side" => self.synth.image_side = p(key, value, line)?,
            "synth_seed" => self.synth_seed = p(key, value, line)?,
            "synth_translate_px" => self.synth.translate_px = p(key, value, line)?,
            "synth_rotate_deg" => self.synth.rotate_deg = p(key, value, line)?,
            "synth_scale_lo" => self.synth.scale_lo = p(key, value, line)?,
            "synth_scale_hi" => self.synth.scale_hi = p(key, value, line)?,
            "synth_bright_lo" => self.synth.bright_lo = p(key, value, line)?,
            "synth_bright_hi" => self.synth.bright_hi = p(key, value, line)?,
            "val_fraction" => self.val_fraction = p(key, value, line)?,
            "test_fraction" => self.test_fraction = p(key, value, line)?,
            "holdout_identities" => self.holdout_identities = p(key, value, line)?,
            "arch" => {
                self.variant = match value {
                    "shallow" => ArchVariant::Shallow,
                    "deep" => ArchVariant::Deep,
                    other => {
                        return Err(Error::Config {
                            line,
                            msg: format!("unknown arch {other:?} (shallow|deep)"),
                        })
                    }
                }
            }
            "dim_s" => self.dim_s = p(key, value, line)?,
            "dim_z" => self.dim_z = p(key, value, line)?,
            "channels" => {
                let parts: Vec<&str> = value.split(',').map(str::trim).collect();
                if parts.len() != 3 {
                    return Err(Error::Config {
                        line,
                        msg: format!("channels needs three comma-separated values, got {value:?}"),
                    });
                }
                self.channels = [
                    p(key, parts[0], line)?,
                    p(key, parts[1], line)?,
                    p(key, parts[2], line)?,
                ];
            }
            "lambda_gan" => self.lambda_gan = p(key, value, line)?,
            "kl_weight" => self.kl_weight = p(key, value, line)?,
            "lr_generator" => self.lr_generator = p(key, value, line)?,
            "lr_adversary" => self.lr_adversary = p(key, value, line)?,
            "iterations" => self.iterations = p(key, value, line)?,
            "batch_size" => self.batch_size = p(key, value, line)?,
            "seed" => self.seed = p(key, value, line)?,
            "enable_prior_sample_gan_term" => {
                self.enable_prior_sample_gan_term = p(key, value, line)?
            }
            "freeze_specified_encoder" => self.freeze_specified_encoder = p(key, value, line)?,
            "warmup_iterations" => self.warmup_iterations = p(key, value, line)?,
            "allow_same_label_swap" => self.allow_same_label_swap = p(key, value, line)?,
            "recon_loss" => {
                self.recon = match value {
                    "bce" => ReconKind::Bce,
                    "l2" => ReconKind::L2,
                    other => {
                        return Err(Error::Config {
                            line,
                            msg: format!("unknown recon_loss {other:?} (bce|l2)"),
                        })
                    }
                }
            }
            "checkpoint_every" => self.checkpoint_every = p(key, value, line)?,
            "log_every" => self.log_every = p(key, value, line)?,
            "out_dir" => self.out_dir = value.into(),
            other => {
                return Err(Error::Config {
                    line,
                    msg: format!("unknown key {other:?}"),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let reject = |msg: String| Err(Error::Config { line: 0, msg });
        if self.lambda_gan < 0.0 {
            return reject(format!(
                "lambda_gan must be non-negative, got {}",
                self.lambda_gan
            ));
        }
        if self.kl_weight < 0.0 || self.lr_generator < 0.0 || self.lr_adversary < 0.0 {
            return reject("weights and learning rates must be non-negative".into());
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return reject("iterations and batch_size must be positive".into());
        }
        if !(0.0..0.5).contains(&self.val_fraction) || !(0.0..0.5).contains(&self.test_fraction) {
            return reject("val/test fractions must lie in [0, 0.5)".into());
        }
        if self.dataset == DatasetKind::Synthetic {
            self.synth.validate()?;
        }
        Ok(())
    }

    /// Effective configuration in canonical order; parsing this text
    /// reproduces the configuration exactly.
    pub fn to_text(&self) -> String {
        let dataset = match self.dataset {
            DatasetKind::Synthetic => "synthetic",
            DatasetKind::Mnist => "mnist",
        };
        let variant = match self.variant {
            ArchVariant::Shallow => "shallow",
            ArchVariant::Deep => "deep",
        };
        let recon = match self.recon {
            ReconKind::Bce => "bce",
            ReconKind::L2 => "l2",
        };
        format!(
            "dataset={dataset}\n\
             mnist_images={}\n\
             mnist_labels={}\n\
             mnist_limit={}\n\
             synth_identities={}\n\
             synth_samples_per_identity={}\n\
             synth_image_side={}\n\
             synth_seed={}\n\
             synth_translate_px={}\n\
             synth_rotate_deg={}\n\
             synth_scale_lo={}\n\
             synth_scale_hi={}\n\
             synth_bright_lo={}\n\
             synth_bright_hi={}\n\
             val_fraction={}\n\
             test_fraction={}\n\
             holdout_identities={}\n\
             arch={variant}\n\
             dim_s={}\n\
             dim_z={}\n\
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
             log_every={}\n\
             out_dir={}\n",
            self.mnist_images.display(),
            self.mnist_labels.display(),
            self.mnist_limit,
            self.synth.num_identities,
            self.synth.samples_per_identity,
            self.synth.image_side,
            self.synth_seed,
            self.synth.translate_px,
            self.synth.rotate_deg,
            self.synth.scale_lo,
            self.synth.scale_hi,
            self.synth.bright_lo,
            self.synth.bright_hi,
            self.val_fraction,
            self.test_fraction,
            self.holdout_identities,
            self.dim_s,
            self.dim_z,
            self.channels[0],
            self.channels[1],
            self.channels[2],
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
            self.out_dir.display(),
        )
    }

    /// Loads or generates the full dataset named by the configuration.
    pub fn load_dataset(&self) -> Result<LabeledImageSet> {
        match self.dataset {
            DatasetKind::Synthetic => data::generate_synthetic(&self.synth, self.synth_seed),
            DatasetKind::Mnist => {
                let set = data::load_idx(&self.mnist_images, &self.mnist_labels)?;
                if self.mnist_limit > 0 && self.mnist_limit < set.len() {
                    let idx: Vec<usize> = (0..self.mnist_limit).collect();
                    Ok(set.subset(&idx, crate::data::SplitTag::Full))
                } else {
                    Ok(set)
                }
            }
        }
    }

    /// Architecture for a loaded dataset (image geometry and label count
    /// come from the data).
    pub fn arch_for(&self, data: &LabeledImageSet) -> ArchConfig {
        let (c, h, _) = data.image_dims();
        ArchConfig {
            variant: self.variant,
            dim_s: self.dim_s,
            dim_z: self.dim_z,
            image_channels: c,
            image_side: h,
            num_labels: data.num_labels,
            channels: self.channels,
        }
    }

    pub fn train_config(&self, data: &LabeledImageSet) -> TrainConfig {
        TrainConfig {
            arch: self.arch_for(data),
            lambda_gan: self.lambda_gan as crate::Real,
            kl_weight: self.kl_weight as crate::Real,
            lr_generator: self.lr_generator as crate::Real,
            lr_adversary: self.lr_adversary as crate::Real,
            iterations: self.iterations,
            batch_size: self.batch_size,
            seed: self.seed,
            enable_prior_sample_gan_term: self.enable_prior_sample_gan_term,
            freeze_specified_encoder: self.freeze_specified_encoder,
            warmup_iterations: self.warmup_iterations,
            allow_same_label_swap: self.allow_same_label_swap,
            recon: self.recon,
            checkpoint_every: self.checkpoint_every,
            log_every: self.log_every,
        }
    }
}
