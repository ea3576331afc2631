use disent::tensor::kernels::*;
use disent::tensor::{Tape, Tensor};
use disent::rng::Rng;
use disent::Real;
use std::time::Instant;

fn t(shape: &[usize], rng: &mut Rng) -> Tensor {
    let mut x = Tensor::zeros(shape);
    rng.fill_normal(x.data_mut(), 0.0, 1.0);
    x
}

fn main() {
    let mut rng = Rng::seed_from(1);
    // conv2 shape: batch 8, 8->16, 16x16 -> 8x8, k5
    let reps = 200;
    for (cin, cout, side, k, s, p) in [
        (1usize, 8usize, 32usize, 5usize, 2usize, 2usize),
        (8, 16, 16, 5, 2, 2),
        (16, 32, 8, 5, 2, 2),
    ] {
        let n = 8;
        let g = ConvGeom::new(cin, side, side, k, k, s, p);
        let x = t(&[n, cin, side, side], &mut rng);
        let w = t(&[cout, cin, k, k], &mut rng);
        let b = t(&[cout], &mut rng);
        let mut out = vec![0.0 as Real; n * cout * g.l()];
        let start = Instant::now();
        for _ in 0..reps {
            conv2d_forward(x.data(), w.data(), b.data(), n, cout, &g, &mut out);
        }
        let fwd = start.elapsed().as_secs_f64() / reps as f64;
        let dout: Vec<Real> = out.clone();
        let mut dx = vec![0.0 as Real; x.numel()];
        let mut dw = vec![0.0 as Real; w.numel()];
        let mut db = vec![0.0 as Real; b.numel()];
        let start = Instant::now();
        for _ in 0..reps {
            conv2d_backward(x.data(), w.data(), &dout, n, cout, &g,
                Some(&mut dx), Some(&mut dw), Some(&mut db));
        }
        let bwd = start.elapsed().as_secs_f64() / reps as f64;
        let macs = (n * cout * g.l() * g.k()) as f64;
        println!(
            "conv {cin}->{cout} side {side}: fwd {:.3} ms ({:.2} GFLOP/s), bwd {:.3} ms ({:.2} GFLOP/s)",
            fwd * 1e3, 2.0 * macs / fwd / 1e9, bwd * 1e3, 3.0 * 2.0 * macs / bwd / 1e9
        );
    }

    // tape overhead: elementwise chain on conv-sized tensors
    let x = t(&[8, 16, 16, 16], &mut rng);
    let start = Instant::now();
    let reps2 = 500;
    for _ in 0..reps2 {
        let mut tape = Tape::new();
        let v = tape.constant_tensor(&x).unwrap();
        let r = tape.relu(v).unwrap();
        let s2 = tape.sigmoid(r).unwrap();
        let m = tape.mean(s2).unwrap();
        let _ = tape.item(m);
    }
    println!("elementwise chain (3 ops, 32k elems): {:.3} ms", start.elapsed().as_secs_f64() / reps2 as f64 * 1e3);

    // matmul sizes in FC layers
    for (m, k2, n2) in [(8usize, 512usize, 32usize), (8, 16, 512), (512, 8, 16)] {
        let a = t(&[m, k2], &mut rng);
        let b2 = t(&[k2, n2], &mut rng);
        let mut out = vec![0.0 as Real; m * n2];
        let start = Instant::now();
        for _ in 0..reps {
            matmul(a.data(), b2.data(), m, k2, n2, &mut out);
        }
        let dt = start.elapsed().as_secs_f64() / reps as f64;
        println!("matmul {m}x{k2}x{n2}: {:.4} ms ({:.2} GFLOP/s)", dt * 1e3, 2.0 * (m * k2 * n2) as f64 / dt / 1e9);
    }
}
