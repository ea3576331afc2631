//! Gradient verification of the model losses: used by the `gradcheck` CLI
//! subcommand and the acceptance suite.

use crate::model::{
    adversary_loss, generator_loss, kl_divergence, reconstruction_loss, reparameterize,
    ArchConfig, ArchVariant, Model, ReconKind,
};
use crate::nn::Phase;
use crate::rng::Rng;
use crate::tensor::gradcheck::{check_gradients, GradCheckReport};
use crate::tensor::{BnMode, Tensor};
use crate::{Real, Result};

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::seed_from(seed);
    let mut t = Tensor::zeros(shape);
    rng.fill_normal(t.data_mut(), 0.0, 1.0);
    t
}

fn rand_pixels(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::seed_from(seed);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.uniform() as Real;
    }
    t
}

/// Finite-difference checks of every differentiable primitive on small
/// random inputs.
pub fn check_primitive_gradients(tolerance: f64, step: f64) -> Result<GradCheckReport> {
    let mut entries = Vec::new();
    let mut run = |report: Result<GradCheckReport>| -> Result<()> {
        entries.extend(report?.entries);
        Ok(())
    };

    run(check_gradients(
        &[("add.mul.affine.x", rand_tensor(&[2, 3], 1)), ("add.mul.affine.y", rand_tensor(&[2, 3], 2))],
        &mut |tape, ts| {
            let a = tape.bind(&ts[0])?;
            let b = tape.bind(&ts[1])?;
            let s = tape.add(a, b)?;
            let m = tape.mul(s, a)?;
            let f = tape.affine(m, 1.3, 0.2)?;
            tape.sum(f)
        },
        tolerance,
        step,
    ))?;

    run(check_gradients(
        &[("activations.x", rand_tensor(&[3, 4], 3))],
        &mut |tape, ts| {
            let a = tape.bind(&ts[0])?;
            let r = tape.relu(a)?;
            let l = tape.leaky_relu(a, 0.2)?;
            let sg = tape.sigmoid(a)?;
            let th = tape.tanh(a)?;
            let e = tape.exp(th)?;
            let c = tape.clamp(a, -2.5, 2.5)?;
            let s1 = tape.add(r, l)?;
            let s2 = tape.add(sg, e)?;
            let s3 = tape.add(s1, s2)?;
            let s4 = tape.add(s3, c)?;
            tape.mean(s4)
        },
        tolerance,
        step,
    ))?;

    let pos = Tensor::new(
        rand_tensor(&[2, 5], 4).data().iter().map(|v| v.abs() + 0.4).collect(),
        &[2, 5],
    )?;
    run(check_gradients(
        &[("log.x", pos)],
        &mut |tape, ts| {
            let a = tape.bind(&ts[0])?;
            let l = tape.log(a)?;
            tape.sum(l)
        },
        tolerance,
        step,
    ))?;

    run(check_gradients(
        &[
            ("matmul.x", rand_tensor(&[3, 4], 5)),
            ("matmul.w", rand_tensor(&[4, 6], 6)),
            ("matmul.b", rand_tensor(&[6], 7)),
        ],
        &mut |tape, ts| {
            let x = tape.bind(&ts[0])?;
            let w = tape.bind(&ts[1])?;
            let b = tape.bind(&ts[2])?;
            let y = tape.matmul(x, w)?;
            let y = tape.add_row_bias(y, b)?;
            let s = tape.slice_cols(y, 1, 4)?;
            let r = tape.reshape(s, &[4, 3])?;
            let sq = tape.mul(r, r)?;
            tape.sum(sq)
        },
        tolerance,
        step,
    ))?;

    run(check_gradients(
        &[
            ("conv2d.x", rand_tensor(&[2, 2, 7, 7], 8)),
            ("conv2d.w", rand_tensor(&[3, 2, 5, 5], 9)),
            ("conv2d.b", rand_tensor(&[3], 10)),
        ],
        &mut |tape, ts| {
            let x = tape.bind(&ts[0])?;
            let w = tape.bind(&ts[1])?;
            let b = tape.bind(&ts[2])?;
            let y = tape.conv2d(x, w, b, 2, 2)?;
            let sq = tape.mul(y, y)?;
            tape.sum(sq)
        },
        tolerance,
        step,
    ))?;

    run(check_gradients(
        &[
            ("conv_transpose2d.x", rand_tensor(&[2, 3, 4, 4], 11)),
            ("conv_transpose2d.w", rand_tensor(&[3, 2, 5, 5], 12)),
            ("conv_transpose2d.b", rand_tensor(&[2], 13)),
        ],
        &mut |tape, ts| {
            let x = tape.bind(&ts[0])?;
            let w = tape.bind(&ts[1])?;
            let b = tape.bind(&ts[2])?;
            let y = tape.conv_transpose2d(x, w, b, 2, 2, 1)?;
            let sq = tape.mul(y, y)?;
            tape.sum(sq)
        },
        tolerance,
        step,
    ))?;

    let bn_weights = rand_tensor(&[2, 2, 4, 4], 17);
    run(check_gradients(
        &[
            ("batch_norm.x", rand_tensor(&[2, 2, 4, 4], 14)),
            ("batch_norm.gamma", rand_tensor(&[2], 15)),
            ("batch_norm.beta", rand_tensor(&[2], 16)),
        ],
        &mut |tape, ts| {
            let x = tape.bind(&ts[0])?;
            let g = tape.bind(&ts[1])?;
            let b = tape.bind(&ts[2])?;
            let (y, _) = tape.batch_norm2d(x, g, b, BnMode::TrainFrozen, 1e-5)?;
            let w = tape.constant_tensor(&bn_weights)?;
            let yw = tape.mul(y, w)?;
            let sq = tape.mul(yw, yw)?;
            tape.sum(sq)
        },
        tolerance,
        step,
    ))?;

    run(check_gradients(
        &[
            ("embed.table", rand_tensor(&[5, 3], 18)),
            ("embed.x", rand_tensor(&[2, 3, 3, 3], 19)),
        ],
        &mut |tape, ts| {
            let t = tape.bind(&ts[0])?;
            let x = tape.bind(&ts[1])?;
            let e = tape.embed(t, &[0, 4])?;
            let y = tape.add_channel_map(x, e)?;
            let sq = tape.mul(y, y)?;
            tape.sum(sq)
        },
        tolerance,
        step,
    ))?;

    let target = rand_pixels(&[2, 1, 3, 3], 20);
    run(check_gradients(
        &[("bce.pre", rand_tensor(&[2, 1, 3, 3], 21))],
        &mut |tape, ts| {
            let p = tape.bind(&ts[0])?;
            let xh = tape.sigmoid(p)?;
            tape.bce_loss(xh, &target)
        },
        tolerance,
        step,
    ))?;
    run(check_gradients(
        &[("l2.pre", rand_tensor(&[2, 1, 3, 3], 22))],
        &mut |tape, ts| {
            let p = tape.bind(&ts[0])?;
            tape.l2_loss(p, &target)
        },
        tolerance,
        step,
    ))?;
    run(check_gradients(
        &[("cross_entropy.logits", rand_tensor(&[3, 4], 23))],
        &mut |tape, ts| {
            let l = tape.bind(&ts[0])?;
            tape.cross_entropy(l, &[1, 0, 3])
        },
        tolerance,
        step,
    ))?;
    run(check_gradients(
        &[
            ("gan.real_pre", rand_tensor(&[3, 1], 24)),
            ("gan.fake_pre", rand_tensor(&[3, 1], 25)),
        ],
        &mut |tape, ts| {
            let rp = tape.bind(&ts[0])?;
            let fp = tape.bind(&ts[1])?;
            let real = tape.sigmoid(rp)?;
            let fake = tape.sigmoid(fp)?;
            let adv = adversary_loss(tape, real, fake)?;
            let gen = generator_loss(tape, fake)?;
            tape.add(adv, gen)
        },
        tolerance,
        step,
    ))?;
    run(check_gradients(
        &[
            ("kl.mu", rand_tensor(&[2, 4], 26)),
            ("kl.pre_sigma", rand_tensor(&[2, 4], 27)),
        ],
        &mut |tape, ts| {
            let mu = tape.bind(&ts[0])?;
            let pre = tape.bind(&ts[1])?;
            let sigma = tape.exp(pre)?;
            kl_divergence(tape, mu, sigma)
        },
        tolerance,
        step,
    ))?;

    Ok(GradCheckReport {
        tolerance,
        step,
        entries,
    })
}

/// The tiny architecture used for whole-model gradient verification:
/// 8x8 images, 4-dimensional codes.
pub fn tiny_arch() -> ArchConfig {
    ArchConfig {
        variant: ArchVariant::Shallow,
        dim_s: 4,
        dim_z: 4,
        image_channels: 1,
        image_side: 8,
        num_labels: 3,
        channels: [4, 6, 8],
    }
}

/// Checks every parameter of a tiny model through the full combined loss
/// (both reconstructions, the KL term, both adversarial generator terms,
/// and the adversary loss), with batch norm in eval mode.
pub fn check_model_gradients(tolerance: f64, step: f64) -> Result<GradCheckReport> {
    let arch = tiny_arch();
    let mut model = Model::init(&arch, 42)?;
    let x1 = rand_pixels(&[2, 1, 8, 8], 50);
    let x1p = rand_pixels(&[2, 1, 8, 8], 51);
    let x2 = rand_pixels(&[2, 1, 8, 8], 52);
    let ids2 = vec![1usize, 2];
    let noise = rand_tensor(&[2, 4], 53);
    let prior = rand_tensor(&[2, 4], 54);
    let lambda: Real = 0.7;

    let mut inputs: Vec<(String, Tensor)> = Vec::new();
    crate::nn::Module::visit(&model, "", &mut |name, t| {
        if t.requires_grad {
            inputs.push((name.to_string(), t.clone()));
        }
    });
    let named: Vec<(&str, Tensor)> = inputs
        .iter()
        .map(|(n, t)| (n.as_str(), t.clone()))
        .collect();

    fn swap_params(model: &mut Model, ts: &mut [Tensor]) {
        let mut i = 0;
        crate::nn::Module::visit_mut(model, "", &mut |_, t| {
            if t.requires_grad {
                std::mem::swap(t, &mut ts[i]);
                i += 1;
            }
        });
    }

    check_gradients(
        &named,
        &mut |tape, ts| {
            // run the forward pass on the checker's own tensors so their
            // gradients land where it can read them
            swap_params(&mut model, ts);
            let result = (|| -> Result<crate::tensor::Val> {
            let x1v = tape.constant_tensor(&x1)?;
            let x1pv = tape.constant_tensor(&x1p)?;
            let x2v = tape.constant_tensor(&x2)?;
            let e1 = model.encoder.forward(tape, x1v, Phase::Eval)?;
            let e1p = model.encoder.forward(tape, x1pv, Phase::Eval)?;
            let e2 = model.encoder.forward(tape, x2v, Phase::Eval)?;
            let z1 = reparameterize(tape, e1.mu, e1.sigma, &noise)?;
            let x11 = model.decoder.forward(tape, z1, e1.s, Phase::Eval)?;
            let x11p = model.decoder.forward(tape, z1, e1p.s, Phase::Eval)?;
            let r11 = reconstruction_loss(tape, x11, &x1, ReconKind::Bce)?;
            let r11p = reconstruction_loss(tape, x11p, &x1, ReconKind::Bce)?;
            let rsum = tape.add(r11, r11p)?;
            let recon = tape.scale(rsum, 0.5)?;
            let kl = kl_divergence(tape, e1.mu, e1.sigma)?;
            let mut total = tape.add(recon, kl)?;

            let x12 = model.decoder.forward(tape, z1, e2.s, Phase::Eval)?;
            let p12 = model.discriminator.forward(tape, x12, &ids2, Phase::Eval)?;
            let g12 = generator_loss(tape, p12)?;
            let zp = tape.constant_tensor(&prior)?;
            let xp = model.decoder.forward(tape, zp, e2.s, Phase::Eval)?;
            let pp = model.discriminator.forward(tape, xp, &ids2, Phase::Eval)?;
            let gp = generator_loss(tape, pp)?;
            let gsum = tape.add(g12, gp)?;
            let weighted = tape.scale(gsum, lambda)?;
            total = tape.add(total, weighted)?;

            // adversary side on the same graph so discriminator parameters
            // receive gradients from both roles
            let p_real = model.discriminator.forward(tape, x2v, &ids2, Phase::Eval)?;
            let x12d = tape.detach(x12)?;
            let p_fake = model.discriminator.forward(tape, x12d, &ids2, Phase::Eval)?;
            let adv = adversary_loss(tape, p_real, p_fake)?;
            tape.add(total, adv)
            })();
            swap_params(&mut model, ts);
            result
        },
        tolerance,
        step,
    )
}
