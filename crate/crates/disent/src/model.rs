//! The conditional generative model: an encoder with a shared convolutional
//! trunk and two heads (specified code `s`, posterior parameters `mu`,
//! `sigma`), a decoder that merges both codes additively, and a
//! label-conditioned discriminator. Loss primitives for the variational
//! bound and the adversarial game live here too.

use crate::nn::{BatchNorm2d, Conv2d, ConvTranspose2d, Linear, LookupTable, Module, Phase};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Val};
use crate::{Error, Real, Result};

/// Probabilities are clamped to [PROB_CLAMP, 1-PROB_CLAMP] before logs in
/// the adversarial losses; clamp events are counted on the tape.
pub const PROB_CLAMP: Real = 1e-7;

pub const LEAKY_SLOPE: Real = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchVariant {
    /// Three 5x5 stride-2 convolutions.
    Shallow,
    /// Six 3x3 convolutions, stride 2 every other layer.
    Deep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconKind {
    /// Pixelwise Bernoulli negative log-likelihood.
    Bce,
    /// Gaussian (squared error) likelihood.
    L2,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchConfig {
    pub variant: ArchVariant,
    pub dim_s: usize,
    pub dim_z: usize,
    pub image_channels: usize,
    pub image_side: usize,
    pub num_labels: usize,
    /// Channel widths of the three stages (the deep variant repeats each).
    pub channels: [usize; 3],
}

/// One convolution stage: (c_out, kernel, stride, padding).
type Stage = (usize, usize, usize, usize);

impl ArchConfig {
    fn stages(&self) -> Vec<Stage> {
        let [c1, c2, c3] = self.channels;
        match self.variant {
            ArchVariant::Shallow => vec![(c1, 5, 2, 2), (c2, 5, 2, 2), (c3, 5, 2, 2)],
            ArchVariant::Deep => vec![
                (c1, 3, 1, 1),
                (c1, 3, 2, 1),
                (c2, 3, 1, 1),
                (c2, 3, 2, 1),
                (c3, 3, 1, 1),
                (c3, 3, 2, 1),
            ],
        }
    }

    /// Spatial side at every stage boundary, starting at the image side.
    fn trace(&self) -> Vec<usize> {
        let mut sides = vec![self.image_side];
        for (_, k, s, p) in self.stages() {
            let side = *sides.last().unwrap();
            sides.push((side + 2 * p - k) / s + 1);
        }
        sides
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim_s == 0
            || self.dim_z == 0
            || self.num_labels == 0
            || self.image_channels == 0
            || self.channels.iter().any(|&c| c == 0)
        {
            return Err(Error::InvalidArgument {
                op: "arch",
                msg: "dimensions and channel counts must be positive".into(),
            });
        }
        let mut side = self.image_side;
        for (_, k, s, p) in self.stages() {
            if side + 2 * p < k {
                return Err(Error::InvalidArgument {
                    op: "arch",
                    msg: format!("image side {} too small for this variant", self.image_side),
                });
            }
            side = (side + 2 * p - k) / s + 1;
        }
        if side == 0 {
            return Err(Error::InvalidArgument {
                op: "arch",
                msg: format!("image side {} collapses to zero", self.image_side),
            });
        }
        Ok(())
    }
}

/// Per-image codes produced by the encoder.
#[derive(Debug, Clone)]
pub struct LatentCodes {
    pub s: Tensor,
    pub mu: Tensor,
    pub sigma: Tensor,
}

/// Tape handles for one encoded batch.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub s: Val,
    pub mu: Val,
    pub sigma: Val,
}

// ── Encoder ─────────────────────────────────────────────────────────────

pub struct Encoder {
    pub convs: Vec<Conv2d>,
    pub bns: Vec<BatchNorm2d>,
    pub fc_s: Linear,
    pub fc_z: Linear,
    dim_z: usize,
    trunk_feat: usize,
    input_shape: (usize, usize),
    /// When set, the shared trunk and the specified head run as frozen
    /// constants in eval mode (pre-trained embedding training scheme).
    pub frozen_specified: bool,
}

impl Encoder {
    fn init(arch: &ArchConfig, rng: &mut Rng) -> Self {
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        let mut c_in = arch.image_channels;
        for (c_out, k, s, p) in arch.stages() {
            convs.push(Conv2d::init(c_in, c_out, k, s, p, rng));
            bns.push(BatchNorm2d::init(c_out));
            c_in = c_out;
        }
        let side = *arch.trace().last().unwrap();
        let trunk_feat = c_in * side * side;
        Encoder {
            convs,
            bns,
            fc_s: Linear::init(trunk_feat, arch.dim_s, rng),
            fc_z: Linear::init(trunk_feat, 2 * arch.dim_z, rng),
            dim_z: arch.dim_z,
            trunk_feat,
            input_shape: (arch.image_channels, arch.image_side),
            frozen_specified: false,
        }
    }

    pub fn forward(&mut self, tape: &mut Tape, x: Val, phase: Phase) -> Result<Encoded> {
        let shape = tape.shape(x).to_vec();
        let (c, side) = self.input_shape;
        if shape.len() != 4 || shape[1] != c || shape[2] != side || shape[3] != side {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: shape,
                rhs: vec![0, c, side, side],
            });
        }
        let n = shape[0];
        let trunk_phase = if self.frozen_specified {
            Phase::Eval
        } else {
            phase
        };
        let mut h = x;
        for (conv, bn) in self.convs.iter().zip(self.bns.iter_mut()) {
            h = conv.forward(tape, h, trunk_phase)?;
            h = bn.forward(tape, h, trunk_phase)?;
            h = tape.relu(h)?;
        }
        let flat = tape.reshape(h, &[n, self.trunk_feat])?;
        let s = self.fc_s.forward(tape, flat, trunk_phase)?;
        let zz = self.fc_z.forward(tape, flat, phase)?;
        let mu = tape.slice_cols(zz, 0, self.dim_z)?;
        let logvar = tape.slice_cols(zz, self.dim_z, self.dim_z)?;
        // Bounding the log-variance keeps sigma = exp(logvar/2) inside
        // [e^-8, e^8], so a transient spike cannot overflow the exp.
        let logvar = tape.clamp(logvar, -16.0, 16.0)?;
        let half = tape.scale(logvar, 0.5)?;
        let sigma = tape.exp(half)?;
        Ok(Encoded { s, mu, sigma })
    }
}

impl Module for Encoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&format!("{prefix}.conv{}", i + 1), f);
        }
        for (i, b) in self.bns.iter().enumerate() {
            b.visit(&format!("{prefix}.bn{}", i + 1), f);
        }
        self.fc_s.visit(&format!("{prefix}.fc_s"), f);
        self.fc_z.visit(&format!("{prefix}.fc_z"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&format!("{prefix}.conv{}", i + 1), f);
        }
        for (i, b) in self.bns.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.bn{}", i + 1), f);
        }
        self.fc_s.visit_mut(&format!("{prefix}.fc_s"), f);
        self.fc_z.visit_mut(&format!("{prefix}.fc_z"), f);
    }
}

// ── Decoder ─────────────────────────────────────────────────────────────

pub struct Decoder {
    pub fc_z: Linear,
    pub fc_s: Linear,
    pub bn_in: BatchNorm2d,
    pub deconvs: Vec<ConvTranspose2d>,
    pub bns: Vec<BatchNorm2d>,
    dims: (usize, usize),
    trunk_shape: (usize, usize),
}

impl Decoder {
    fn init(arch: &ArchConfig, rng: &mut Rng) -> Self {
        let stages = arch.stages();
        let trace = arch.trace();
        let last = stages.len();
        let c_top = stages[last - 1].0;
        let side_top = trace[last];
        let feat = c_top * side_top * side_top;

        // Mirror the encoder stack: deconv j inverts encoder stage last-1-j,
        // with output_padding recovering the exact input side.
        let mut deconvs = Vec::new();
        let mut bns = Vec::new();
        for j in 0..last {
            let enc_idx = last - 1 - j;
            let (_, k, s, p) = stages[enc_idx];
            let c_in = stages[enc_idx].0;
            let c_out = if enc_idx == 0 {
                arch.image_channels
            } else {
                stages[enc_idx - 1].0
            };
            let h_in = trace[enc_idx + 1];
            let h_out = trace[enc_idx];
            let natural = (h_in - 1) * s + k - 2 * p;
            let output_padding = h_out - natural;
            deconvs.push(ConvTranspose2d::init(
                c_in,
                c_out,
                k,
                s,
                p,
                output_padding,
                rng,
            ));
            if j + 1 < last {
                bns.push(BatchNorm2d::init(c_out));
            }
        }
        Decoder {
            fc_z: Linear::init(arch.dim_z, feat, rng),
            fc_s: Linear::init(arch.dim_s, feat, rng),
            bn_in: BatchNorm2d::init(c_top),
            deconvs,
            bns,
            dims: (arch.dim_z, arch.dim_s),
            trunk_shape: (c_top, side_top),
        }
    }

    pub fn forward(&mut self, tape: &mut Tape, z: Val, s: Val, phase: Phase) -> Result<Val> {
        let zs = tape.shape(z).to_vec();
        let ss = tape.shape(s).to_vec();
        let (dz, ds) = self.dims;
        if zs.len() != 2 || zs[1] != dz {
            return Err(Error::ShapeMismatch {
                op: "decode: z",
                lhs: zs,
                rhs: vec![0, dz],
            });
        }
        if ss.len() != 2 || ss[1] != ds || ss[0] != zs[0] {
            return Err(Error::ShapeMismatch {
                op: "decode: s",
                lhs: ss,
                rhs: vec![zs[0], ds],
            });
        }
        let n = zs[0];
        let hz = self.fc_z.forward(tape, z, phase)?;
        let hs = self.fc_s.forward(tape, s, phase)?;
        let merged = tape.add(hz, hs)?;
        let (c_top, side_top) = self.trunk_shape;
        let mut h = tape.reshape(merged, &[n, c_top, side_top, side_top])?;
        h = self.bn_in.forward(tape, h, phase)?;
        h = tape.relu(h)?;
        let last = self.deconvs.len();
        for j in 0..last {
            h = self.deconvs[j].forward(tape, h, phase)?;
            if j + 1 < last {
                h = self.bns[j].forward(tape, h, phase)?;
                h = tape.relu(h)?;
            }
        }
        tape.sigmoid(h)
    }
}

impl Module for Decoder {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.fc_z.visit(&format!("{prefix}.fc_z"), f);
        self.fc_s.visit(&format!("{prefix}.fc_s"), f);
        self.bn_in.visit(&format!("{prefix}.bn_in"), f);
        for (i, d) in self.deconvs.iter().enumerate() {
            d.visit(&format!("{prefix}.deconv{}", i + 1), f);
        }
        for (i, b) in self.bns.iter().enumerate() {
            b.visit(&format!("{prefix}.bn{}", i + 1), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.fc_z.visit_mut(&format!("{prefix}.fc_z"), f);
        self.fc_s.visit_mut(&format!("{prefix}.fc_s"), f);
        self.bn_in.visit_mut(&format!("{prefix}.bn_in"), f);
        for (i, d) in self.deconvs.iter_mut().enumerate() {
            d.visit_mut(&format!("{prefix}.deconv{}", i + 1), f);
        }
        for (i, b) in self.bns.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.bn{}", i + 1), f);
        }
    }
}

// ── Discriminator ───────────────────────────────────────────────────────

/// Conditional discriminator: three 5x5 stride-2 convolutions with BN and
/// leaky-relu. The label id selects one row from each of three lookup
/// tables; each embedding is added to the corresponding post-BN activation,
/// broadcast over spatial positions. (Adding before BN would cancel: a
/// per-channel shift shared by the whole batch is exactly what the mean
/// subtraction removes.)
pub struct Discriminator {
    pub convs: Vec<Conv2d>,
    pub bns: Vec<BatchNorm2d>,
    pub embeds: Vec<LookupTable>,
    pub fc: Linear,
    input_shape: (usize, usize),
}

impl Discriminator {
    fn init(arch: &ArchConfig, rng: &mut Rng) -> Self {
        let widths = arch.channels;
        let mut convs = Vec::new();
        let mut bns = Vec::new();
        let mut embeds = Vec::new();
        let mut c_in = arch.image_channels;
        let mut side = arch.image_side;
        for &c_out in &widths {
            convs.push(Conv2d::init(c_in, c_out, 5, 2, 2, rng));
            bns.push(BatchNorm2d::init(c_out));
            embeds.push(LookupTable::init(arch.num_labels, c_out, rng));
            c_in = c_out;
            side = (side + 4 - 5) / 2 + 1;
        }
        Discriminator {
            convs,
            bns,
            embeds,
            fc: Linear::init(widths[2] * side * side, 1, rng),
            input_shape: (arch.image_channels, arch.image_side),
        }
    }

    /// Probability in (0,1) that `x` is a genuine member of class `ids[n]`.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        x: Val,
        ids: &[usize],
        phase: Phase,
    ) -> Result<Val> {
        let shape = tape.shape(x).to_vec();
        let (c, side) = self.input_shape;
        if shape.len() != 4 || shape[1] != c || shape[2] != side || shape[3] != side {
            return Err(Error::ShapeMismatch {
                op: "discriminate",
                lhs: shape,
                rhs: vec![0, c, side, side],
            });
        }
        let n = shape[0];
        if ids.len() != n {
            return Err(Error::InvalidArgument {
                op: "discriminate",
                msg: format!("{} ids for a batch of {n}", ids.len()),
            });
        }
        let mut h = x;
        for i in 0..self.convs.len() {
            h = self.convs[i].forward(tape, h, phase)?;
            h = self.bns[i].forward(tape, h, phase)?;
            let e = self.embeds[i].forward(tape, ids, phase)?;
            h = tape.add_channel_map(h, e)?;
            h = tape.leaky_relu(h, LEAKY_SLOPE)?;
        }
        let hs = tape.shape(h).to_vec();
        let flat = tape.reshape(h, &[n, hs[1] * hs[2] * hs[3]])?;
        let logit = self.fc.forward(tape, flat, phase)?;
        tape.sigmoid(logit)
    }
}

impl Module for Discriminator {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit(&format!("{prefix}.conv{}", i + 1), f);
        }
        for (i, b) in self.bns.iter().enumerate() {
            b.visit(&format!("{prefix}.bn{}", i + 1), f);
        }
        for (i, e) in self.embeds.iter().enumerate() {
            e.visit(&format!("{prefix}.embed{}", i + 1), f);
        }
        self.fc.visit(&format!("{prefix}.fc"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&format!("{prefix}.conv{}", i + 1), f);
        }
        for (i, b) in self.bns.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.bn{}", i + 1), f);
        }
        for (i, e) in self.embeds.iter_mut().enumerate() {
            e.visit_mut(&format!("{prefix}.embed{}", i + 1), f);
        }
        self.fc.visit_mut(&format!("{prefix}.fc"), f);
    }
}

// ── Model ───────────────────────────────────────────────────────────────

pub struct Model {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub discriminator: Discriminator,
    pub arch: ArchConfig,
}

impl Model {
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = Rng::derive(seed, 0x6d6f64656c);
        Ok(Model {
            encoder: Encoder::init(arch, &mut rng),
            decoder: Decoder::init(arch, &mut rng),
            discriminator: Discriminator::init(arch, &mut rng),
            arch: arch.clone(),
        })
    }

    /// Marks the shared trunk and the specified head as frozen constants.
    pub fn freeze_specified(&mut self) {
        for conv in &mut self.encoder.convs {
            conv.weight.requires_grad = false;
            conv.bias.requires_grad = false;
        }
        for bn in &mut self.encoder.bns {
            bn.gamma.requires_grad = false;
            bn.beta.requires_grad = false;
        }
        self.encoder.fc_s.weight.requires_grad = false;
        self.encoder.fc_s.bias.requires_grad = false;
        self.encoder.frozen_specified = true;
    }

    /// Eval-mode encoding of a batch, returning plain tensors.
    pub fn encode_batch(&mut self, x: &Tensor) -> Result<LatentCodes> {
        let mut tape = Tape::new();
        let xv = tape.constant_tensor(x)?;
        let enc = self.encoder.forward(&mut tape, xv, Phase::Eval)?;
        let n = x.shape()[0];
        Ok(LatentCodes {
            s: Tensor::new(tape.data(enc.s).to_vec(), &[n, self.arch.dim_s])?,
            mu: Tensor::new(tape.data(enc.mu).to_vec(), &[n, self.arch.dim_z])?,
            sigma: Tensor::new(tape.data(enc.sigma).to_vec(), &[n, self.arch.dim_z])?,
        })
    }

    /// Eval-mode decoding of a batch of (z, s) codes.
    pub fn decode_batch(&mut self, z: &Tensor, s: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant_tensor(z)?;
        let sv = tape.constant_tensor(s)?;
        let y = self.decoder.forward(&mut tape, zv, sv, Phase::Eval)?;
        let shape = tape.shape(y).to_vec();
        Tensor::new(tape.data(y).to_vec(), &shape)
    }

    /// Eval-mode reconstruction Dec(mu, s) of each image in the batch.
    pub fn reconstruct_batch(&mut self, x: &Tensor) -> Result<Tensor> {
        let codes = self.encode_batch(x)?;
        self.decode_batch(&codes.mu, &codes.s)
    }

    /// Eval-mode discriminator probabilities.
    pub fn discriminate_batch(&mut self, x: &Tensor, ids: &[usize]) -> Result<Vec<Real>> {
        let mut tape = Tape::new();
        let xv = tape.constant_tensor(x)?;
        let p = self.discriminator.forward(&mut tape, xv, ids, Phase::Eval)?;
        Ok(tape.data(p).to_vec())
    }
}

impl Module for Model {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        self.encoder.visit(&p("enc"), f);
        self.decoder.visit(&p("dec"), f);
        self.discriminator.visit(&p("disc"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let p = |s: &str| {
            if prefix.is_empty() {
                s.to_string()
            } else {
                format!("{prefix}.{s}")
            }
        };
        let (pe, pd, pa) = (p("enc"), p("dec"), p("disc"));
        self.encoder.visit_mut(&pe, f);
        self.decoder.visit_mut(&pd, f);
        self.discriminator.visit_mut(&pa, f);
    }
}

// ── Loss primitives ─────────────────────────────────────────────────────

/// z = mu + sigma (.) noise; differentiable in mu and sigma.
pub fn reparameterize(tape: &mut Tape, mu: Val, sigma: Val, noise: &Tensor) -> Result<Val> {
    if tape.shape(mu) != noise.shape() || tape.shape(sigma) != noise.shape() {
        return Err(Error::ShapeMismatch {
            op: "reparameterize",
            lhs: tape.shape(mu).to_vec(),
            rhs: noise.shape().to_vec(),
        });
    }
    let eps = tape.constant_tensor(noise)?;
    let scaled = tape.mul(sigma, eps)?;
    tape.add(mu, scaled)
}

/// Closed-form KL(N(mu, diag(sigma^2)) || N(0, I)), summed over dimensions
/// and averaged over the batch: 0.5 * sum(mu^2 + sigma^2 - log sigma^2 - 1).
pub fn kl_divergence(tape: &mut Tape, mu: Val, sigma: Val) -> Result<Val> {
    if tape.shape(mu) != tape.shape(sigma) {
        return Err(Error::ShapeMismatch {
            op: "kl_divergence",
            lhs: tape.shape(mu).to_vec(),
            rhs: tape.shape(sigma).to_vec(),
        });
    }
    if let Some(&bad) = tape.data(sigma).iter().find(|v| **v <= 0.0) {
        return Err(Error::Domain {
            op: "kl_divergence",
            msg: format!("sigma must be strictly positive, got {bad}"),
        });
    }
    let n = tape.shape(mu)[0] as Real;
    let mu2 = tape.mul(mu, mu)?;
    let sig2 = tape.mul(sigma, sigma)?;
    let logsig = tape.log(sigma)?;
    // -2*log(sigma) - 1 == -log(sigma^2) - 1
    let tail = tape.affine(logsig, -2.0, -1.0)?;
    let a = tape.add(mu2, sig2)?;
    let b = tape.add(a, tail)?;
    let total = tape.sum(b)?;
    tape.scale(total, 0.5 / n)
}

/// Reconstruction negative log-likelihood of `target` under the decoder
/// output, summed over pixels and averaged over the batch.
pub fn reconstruction_loss(
    tape: &mut Tape,
    xhat: Val,
    target: &Tensor,
    kind: ReconKind,
) -> Result<Val> {
    match kind {
        ReconKind::Bce => tape.bce_loss(xhat, target),
        ReconKind::L2 => tape.l2_loss(xhat, target),
    }
}

/// -mean(log D(real)) - mean(log(1 - D(fake))): minimized by the adversary.
pub fn adversary_loss(tape: &mut Tape, real_prob: Val, fake_prob: Val) -> Result<Val> {
    let lr = tape.ln_clamped(real_prob, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let one_minus = tape.affine(fake_prob, -1.0, 1.0)?;
    let lf = tape.ln_clamped(one_minus, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let mr = tape.mean(lr)?;
    let mf = tape.mean(lf)?;
    let s = tape.add(mr, mf)?;
    tape.scale(s, -1.0)
}

/// -mean(log D(fake)): the non-saturating generator objective.
pub fn generator_loss(tape: &mut Tape, fake_prob: Val) -> Result<Val> {
    let lf = tape.ln_clamped(fake_prob, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let m = tape.mean(lf)?;
    tape.scale(m, -1.0)
}

/// Both sides of the adversarial game for given probabilities.
pub fn gan_losses(tape: &mut Tape, real_prob: Val, fake_prob: Val) -> Result<(Val, Val)> {
    let adv = adversary_loss(tape, real_prob, fake_prob)?;
    let gen = generator_loss(tape, fake_prob)?;
    Ok((adv, gen))
}
