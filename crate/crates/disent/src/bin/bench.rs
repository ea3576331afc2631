use disent::data::{generate_synthetic, SyntheticFactorSpec, TripletSampler};
use disent::model::{ArchConfig, ArchVariant, Model, ReconKind};
use disent::rng::Rng;
use disent::trainer::{adversary_step, generator_step, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let c1: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(16);
    let batch: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let iters: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(30);
    let side: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(32);

    let spec = SyntheticFactorSpec { image_side: side, ..Default::default() };
    let data = generate_synthetic(&spec, 11).unwrap();
    let cfg = TrainConfig {
        arch: ArchConfig {
            variant: ArchVariant::Shallow,
            dim_s: 16,
            dim_z: 16,
            image_channels: 1,
            image_side: side,
            num_labels: 10,
            channels: [c1, c1 * 2, c1 * 4],
        },
        lambda_gan: 1.0,
        kl_weight: 1.0,
        lr_generator: 0.002,
        lr_adversary: 0.002,
        iterations: iters,
        batch_size: batch,
        seed: 1,
        enable_prior_sample_gan_term: true,
        freeze_specified_encoder: false,
        warmup_iterations: 0,
        allow_same_label_swap: false,
        recon: ReconKind::Bce,
        checkpoint_every: 100000,
        log_every: 100000,
    };
    let mut model = Model::init(&cfg.arch, 1).unwrap();
    let sampler = TripletSampler::new(&data, false).unwrap();
    let mut rng = Rng::seed_from(1);
    // warm up once
    let t = sampler.triplet_batch(&data, &mut rng, batch);
    generator_step(&mut model, &cfg, &t, &mut rng).unwrap();
    let start = Instant::now();
    for _ in 0..iters {
        let t = sampler.triplet_batch(&data, &mut rng, batch);
        generator_step(&mut model, &cfg, &t, &mut rng).unwrap();
        let p = sampler.pair_batch(&data, &mut rng, batch);
        adversary_step(&mut model, &cfg, &p, &mut rng).unwrap();
    }
    let dt = start.elapsed().as_secs_f64();
    println!(
        "channels {c1}/{}/{} batch {batch} side {side}: {:.1} ms/iter -> 20k iters = {:.1} min",
        c1 * 2, c1 * 4, dt / iters as f64 * 1e3, dt / iters as f64 * 20_000.0 / 60.0
    );
}
