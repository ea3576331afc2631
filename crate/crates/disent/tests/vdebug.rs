use disent::model::*;
use disent::nn::{Module, Phase};
use disent::rng::Rng;
use disent::tensor::{Tape, Tensor};
use disent::Real;

fn rand_pixels(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::seed_from(seed);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() { *v = rng.uniform() as Real; }
    t
}
fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::seed_from(seed);
    let mut t = Tensor::zeros(shape);
    rng.fill_normal(t.data_mut(), 0.0, 1.0);
    t
}

#[test]
fn probe_one_element() {
    let arch = disent::verify::tiny_arch();
    let mut model = Model::init(&arch, 42).unwrap();
    let x1 = rand_pixels(&[2, 1, 8, 8], 50);
    let noise = rand_tensor(&[2, 4], 53);

    let mut eval = |model: &mut Model| -> Real {
        let mut tape = Tape::new();
        let xv = tape.constant_tensor(&x1).unwrap();
        let e1 = model.encoder.forward(&mut tape, xv, Phase::Eval).unwrap();
        let z = reparameterize(&mut tape, e1.mu, e1.sigma, &noise).unwrap();
        let xh = model.decoder.forward(&mut tape, z, e1.s, Phase::Eval).unwrap();
        let r = reconstruction_loss(&mut tape, xh, &x1, ReconKind::Bce).unwrap();
        let kl = kl_divergence(&mut tape, e1.mu, e1.sigma).unwrap();
        let loss = tape.add(r, kl).unwrap();
        tape.item(loss)
    };

    // determinism check
    let f0 = eval(&mut model);
    let f1 = eval(&mut model);
    println!("det: {:.17e} vs {:.17e} equal={}", f0, f1, f0 == f1);

    // analytic grad of enc.conv3.bias[0]
    let mut tape = Tape::new();
    let xv = tape.constant_tensor(&x1).unwrap();
    let e1 = model.encoder.forward(&mut tape, xv, Phase::Eval).unwrap();
    let z = reparameterize(&mut tape, e1.mu, e1.sigma, &noise).unwrap();
    let xh = model.decoder.forward(&mut tape, z, e1.s, Phase::Eval).unwrap();
    let r = reconstruction_loss(&mut tape, xh, &x1, ReconKind::Bce).unwrap();
    let kl = kl_divergence(&mut tape, e1.mu, e1.sigma).unwrap();
    let loss = tape.add(r, kl).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad_of(&model.encoder.convs[2].bias).unwrap().to_vec();
    println!("analytic conv3.bias[0] = {:.12e}", g[0]);

    for h in [1e-4f64, 1e-5, 1e-6] {
        let orig = model.encoder.convs[2].bias.data()[0];
        model.encoder.convs[2].bias.data_mut()[0] = orig + h as Real;
        let fp = eval(&mut model);
        model.encoder.convs[2].bias.data_mut()[0] = orig - h as Real;
        let fm = eval(&mut model);
        model.encoder.convs[2].bias.data_mut()[0] = orig;
        let num = (fp - fm) / (2.0 * h as Real);
        println!("h={h:.0e}: numeric {:.12e} relerr {:.3e}", num, ((num - g[0]) / g[0]).abs());
    }
}
