//! Evaluation protocols: swap grids, interpolation grids, nearest-neighbor
//! retrieval, conditional generation, and the classifier-based
//! disentanglement metric.

use crate::data::LabeledImageSet;
use crate::model::Model;
use crate::nn::{self, Linear, Phase};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};
use crate::{Error, Real, Result};

// ── Grid assembly ───────────────────────────────────────────────────────

const SEPARATOR: Real = 0.5;
const SEPARATOR_PX: usize = 2;

/// A rows x cols arrangement of equally sized images, rendered with
/// 2-pixel mid-gray separators around and between cells.
#[derive(Debug, Clone)]
pub struct GridImage {
    pub rows: usize,
    pub cols: usize,
    /// Row-major cells, each [C,H,W].
    pub cells: Vec<Tensor>,
}

impl GridImage {
    pub fn new(rows: usize, cols: usize, cells: Vec<Tensor>) -> Result<Self> {
        if cells.len() != rows * cols || cells.is_empty() {
            return Err(Error::InvalidArgument {
                op: "grid",
                msg: format!("{rows}x{cols} grid needs {} cells, got {}", rows * cols, cells.len()),
            });
        }
        let shape = cells[0].shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::InvalidArgument {
                op: "grid",
                msg: format!("cells must be [C,H,W], got {shape:?}"),
            });
        }
        if let Some(bad) = cells.iter().find(|c| c.shape() != shape) {
            return Err(Error::ShapeMismatch {
                op: "grid",
                lhs: bad.shape().to_vec(),
                rhs: shape,
            });
        }
        Ok(GridImage { rows, cols, cells })
    }

    pub fn cell(&self, row: usize, col: usize) -> &Tensor {
        &self.cells[row * self.cols + col]
    }

    /// Raster [C, rows*(H+2)+2, cols*(W+2)+2].
    pub fn assemble(&self) -> Tensor {
        let cs = self.cells[0].shape();
        let (c, h, w) = (cs[0], cs[1], cs[2]);
        let out_h = self.rows * (h + SEPARATOR_PX) + SEPARATOR_PX;
        let out_w = self.cols * (w + SEPARATOR_PX) + SEPARATOR_PX;
        let mut data = vec![SEPARATOR; c * out_h * out_w];
        for (idx, cell) in self.cells.iter().enumerate() {
            let (gr, gc) = (idx / self.cols, idx % self.cols);
            let top = SEPARATOR_PX + gr * (h + SEPARATOR_PX);
            let left = SEPARATOR_PX + gc * (w + SEPARATOR_PX);
            for ch in 0..c {
                for r in 0..h {
                    let src = &cell.data()[(ch * h + r) * w..(ch * h + r + 1) * w];
                    let dst_base = (ch * out_h + top + r) * out_w + left;
                    data[dst_base..dst_base + w].copy_from_slice(src);
                }
            }
        }
        Tensor::new(data, &[c, out_h, out_w]).unwrap()
    }
}

fn cell_from_batch(batch: &Tensor, i: usize) -> Tensor {
    let s = batch.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let px = c * h * w;
    Tensor::new(batch.data()[i * px..(i + 1) * px].to_vec(), &[c, h, w]).unwrap()
}

/// Linear interpolation with exact endpoints: t=0 returns a bitwise copy
/// of `a`, t=1 a bitwise copy of `b`.
pub fn lerp(a: &Tensor, b: &Tensor, t: Real) -> Tensor {
    if t == 0.0 {
        return a.clone();
    }
    if t == 1.0 {
        return b.clone();
    }
    let data: Vec<Real> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (1.0 - t) * x + t * y)
        .collect();
    Tensor::new(data, a.shape()).unwrap()
}

// ── Swapping ────────────────────────────────────────────────────────────

/// (n+1) x (n+1) analogy grid: the border row and column hold the original
/// images; inner cell (i,j) decodes the posterior mean of image i with the
/// specified code of image j, so the diagonal holds reconstructions.
pub fn swap_grid(model: &mut Model, images: &Tensor) -> Result<GridImage> {
    let shape = images.shape().to_vec();
    if shape.len() != 4 || shape[0] < 2 {
        return Err(Error::InvalidArgument {
            op: "swap_grid",
            msg: format!("need a batch of at least 2 images, got {shape:?}"),
        });
    }
    let n = shape[0];
    let codes = model.encode_batch(images)?;
    let dz = codes.mu.shape()[1];
    let ds = codes.s.shape()[1];

    // Batch all n^2 inner cells: z varies over rows, s over columns.
    let mut z_data = Vec::with_capacity(n * n * dz);
    let mut s_data = Vec::with_capacity(n * n * ds);
    for i in 0..n {
        for j in 0..n {
            z_data.extend_from_slice(&codes.mu.data()[i * dz..(i + 1) * dz]);
            s_data.extend_from_slice(&codes.s.data()[j * ds..(j + 1) * ds]);
        }
    }
    let decoded = model.decode_batch(
        &Tensor::new(z_data, &[n * n, dz])?,
        &Tensor::new(s_data, &[n * n, ds])?,
    )?;

    let (c, h, w) = (shape[1], shape[2], shape[3]);
    let mut cells = Vec::with_capacity((n + 1) * (n + 1));
    cells.push(Tensor::zeros(&[c, h, w]));
    for j in 0..n {
        cells.push(cell_from_batch(images, j));
    }
    for i in 0..n {
        cells.push(cell_from_batch(images, i));
        for j in 0..n {
            cells.push(cell_from_batch(&decoded, i * n + j));
        }
    }
    GridImage::new(n + 1, n + 1, cells)
}

// ── Interpolation ───────────────────────────────────────────────────────

/// steps x steps grid decoding linear blends of the two images' codes:
/// rows interpolate the unspecified code, columns the specified code, so
/// corner (0,0) is xa's reconstruction and the far corner is xb's.
pub fn interpolation_grid(
    model: &mut Model,
    xa: &Tensor,
    xb: &Tensor,
    steps: usize,
) -> Result<GridImage> {
    if steps < 2 {
        return Err(Error::InvalidArgument {
            op: "interpolation_grid",
            msg: format!("need at least 2 steps, got {steps}"),
        });
    }
    let pair = {
        let mut data = xa.data().to_vec();
        data.extend_from_slice(xb.data());
        let s = xa.shape();
        Tensor::new(data, &[2, s[1], s[2], s[3]])?
    };
    let codes = model.encode_batch(&pair)?;
    let dz = codes.mu.shape()[1];
    let ds = codes.s.shape()[1];
    let mu_a = Tensor::new(codes.mu.data()[..dz].to_vec(), &[1, dz])?;
    let mu_b = Tensor::new(codes.mu.data()[dz..].to_vec(), &[1, dz])?;
    let s_a = Tensor::new(codes.s.data()[..ds].to_vec(), &[1, ds])?;
    let s_b = Tensor::new(codes.s.data()[ds..].to_vec(), &[1, ds])?;

    let mut z_data = Vec::with_capacity(steps * steps * dz);
    let mut s_data = Vec::with_capacity(steps * steps * ds);
    for i in 0..steps {
        let alpha = i as Real / (steps - 1) as Real;
        let z = lerp(&mu_a, &mu_b, alpha);
        for j in 0..steps {
            let beta = j as Real / (steps - 1) as Real;
            let s = lerp(&s_a, &s_b, beta);
            z_data.extend_from_slice(z.data());
            s_data.extend_from_slice(s.data());
        }
    }
    let decoded = model.decode_batch(
        &Tensor::new(z_data, &[steps * steps, dz])?,
        &Tensor::new(s_data, &[steps * steps, ds])?,
    )?;
    let cells = (0..steps * steps)
        .map(|i| cell_from_batch(&decoded, i))
        .collect();
    GridImage::new(steps, steps, cells)
}

// ── Retrieval ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReprSpace {
    /// The specified code s.
    Specified,
    /// The mean of the approximate posterior over z.
    Unspecified,
}

/// Embeds every image and returns the k gallery indices nearest to the
/// query in Euclidean distance, ties broken by index. k larger than the
/// gallery is clamped with a warning.
pub fn retrieve(
    model: &mut Model,
    query: &Tensor,
    gallery: &LabeledImageSet,
    space: ReprSpace,
    k: usize,
) -> Result<Vec<(usize, Real)>> {
    if gallery.is_empty() {
        return Err(Error::InvalidArgument {
            op: "retrieve",
            msg: "empty gallery".into(),
        });
    }
    let k = if k > gallery.len() {
        eprintln!(
            "retrieve: k={k} exceeds gallery size {}; clamping",
            gallery.len()
        );
        gallery.len()
    } else {
        k
    };
    if k == 0 {
        return Ok(Vec::new());
    }
    let q = embed_features(model, query, space)?;
    let g = embed_set_features(model, gallery, space)?;
    let d = q.shape()[1];
    let mut scored: Vec<(usize, Real)> = (0..gallery.len())
        .map(|i| {
            let row = &g.data()[i * d..(i + 1) * d];
            let dist = row
                .iter()
                .zip(q.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<Real>()
                .sqrt();
            (i, dist)
        })
        .collect();
    scored.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

// ── Conditional generation ──────────────────────────────────────────────

/// Decodes `count` prior samples z ~ N(0, I) against the specified code of
/// `x`. Deterministic for a given seed.
pub fn conditional_samples(
    model: &mut Model,
    x: &Tensor,
    count: usize,
    seed: u64,
) -> Result<Tensor> {
    if count == 0 {
        return Err(Error::InvalidArgument {
            op: "conditional_samples",
            msg: "count must be at least 1".into(),
        });
    }
    let codes = model.encode_batch(x)?;
    let ds = codes.s.shape()[1];
    let dz = codes.mu.shape()[1];
    let mut rng = Rng::derive(seed, 0x636f6e64);
    let mut z = Tensor::zeros(&[count, dz]);
    rng.fill_normal(z.data_mut(), 0.0, 1.0);
    let mut s_data = Vec::with_capacity(count * ds);
    for _ in 0..count {
        s_data.extend_from_slice(&codes.s.data()[..ds]);
    }
    model.decode_batch(&z, &Tensor::new(s_data, &[count, ds])?)
}

// ── Disentanglement metric ──────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub lr: Real,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 256,
            lr: 0.1,
            max_epochs: 200,
            patience: 10,
            batch: 128,
            seed: 0,
        }
    }
}

/// Outcome of one probe training run.
#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub train_error: f64,
    pub test_error: f64,
    pub chance_error: f64,
    pub epochs_run: usize,
    pub best_epoch: usize,
}

/// Table-shaped report: identity-classification error of a fixed probe on
/// each representation, next to the random-chance baseline.
#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub z: Option<ProbeResult>,
    pub s: Option<ProbeResult>,
    pub chance_error: f64,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str("representation  train_error  test_error\n");
        if let Some(z) = &self.z {
            out.push_str(&format!(
                "z               {:>10.4}  {:>10.4}\n",
                z.train_error, z.test_error
            ));
        }
        if let Some(s) = &self.s {
            out.push_str(&format!(
                "s               {:>10.4}  {:>10.4}\n",
                s.train_error, s.test_error
            ));
        }
        out.push_str(&format!("random-chance   {:>23.4}\n\n", self.chance_error));
        out.push_str(&self.to_kv());
        out
    }

    /// Machine-readable key=value block.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        if let Some(z) = &self.z {
            out.push_str(&format!(
                "z.train_error={}\nz.test_error={}\nz.epochs_run={}\nz.best_epoch={}\n",
                z.train_error, z.test_error, z.epochs_run, z.best_epoch
            ));
        }
        if let Some(s) = &self.s {
            out.push_str(&format!(
                "s.train_error={}\ns.test_error={}\ns.epochs_run={}\ns.best_epoch={}\n",
                s.train_error, s.test_error, s.epochs_run, s.best_epoch
            ));
        }
        out.push_str(&format!("chance_error={}\n", self.chance_error));
        out
    }
}

fn embed_features(model: &mut Model, x: &Tensor, space: ReprSpace) -> Result<Tensor> {
    let codes = model.encode_batch(x)?;
    Ok(match space {
        ReprSpace::Specified => codes.s,
        ReprSpace::Unspecified => codes.mu,
    })
}

/// Encoder features for a whole set, in chunks to bound memory.
pub fn embed_set_features(
    model: &mut Model,
    set: &LabeledImageSet,
    space: ReprSpace,
) -> Result<Tensor> {
    let chunk = 256;
    let mut rows: Vec<Real> = Vec::new();
    let mut dim = 0;
    let mut start = 0;
    while start < set.len() {
        let end = (start + chunk).min(set.len());
        let idx: Vec<usize> = (start..end).collect();
        let batch = set.gather(&idx);
        let feats = embed_features(model, &batch, space)?;
        dim = feats.shape()[1];
        rows.extend_from_slice(feats.data());
        start = end;
    }
    Tensor::new(rows, &[set.len(), dim])
}

struct Probe {
    lin1: Linear,
    lin2: Linear,
}

impl Probe {
    fn errors(&self, features: &Tensor, labels: &[usize]) -> f64 {
        let mut tape = Tape::new();
        let x = tape.constant_tensor(features).unwrap();
        let h = self.lin1.forward(&mut tape, x, Phase::Eval).unwrap();
        let h = tape.relu(h).unwrap();
        let logits = self.lin2.forward(&mut tape, h, Phase::Eval).unwrap();
        let data = tape.data(logits);
        let classes = self.lin2.bias.numel();
        let mut wrong = 0;
        for (i, &label) in labels.iter().enumerate() {
            let row = &data[i * classes..(i + 1) * classes];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            if pred != label {
                wrong += 1;
            }
        }
        wrong as f64 / labels.len() as f64
    }
}

/// Trains the two-layer probe on raw feature matrices with early stopping
/// on validation error, then reports errors at the best epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_probe(
    train_features: &Tensor,
    train_labels: &[usize],
    val_features: &Tensor,
    val_labels: &[usize],
    test_features: &Tensor,
    test_labels: &[usize],
    num_labels: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let distinct: std::collections::HashSet<usize> = train_labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Dataset(
            "probe training needs at least two classes".into(),
        ));
    }
    let dim = train_features.shape()[1];
    let n = train_features.shape()[0];
    let mut rng = Rng::derive(cfg.seed, 0x70726f6265);
    let mut probe = Probe {
        lin1: Linear::init(dim, cfg.hidden, &mut rng),
        lin2: Linear::init(cfg.hidden, num_labels, &mut rng),
    };

    let mut best: Option<(f64, Linear, Linear, usize)> = None;
    let mut since_best = 0;
    let mut epochs_run = 0;
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch) {
            let mut xb = Vec::with_capacity(chunk.len() * dim);
            let mut yb = Vec::with_capacity(chunk.len());
            for &i in chunk {
                xb.extend_from_slice(&train_features.data()[i * dim..(i + 1) * dim]);
                yb.push(train_labels[i]);
            }
            let xb = Tensor::new(xb, &[chunk.len(), dim])?;
            let mut tape = Tape::new();
            let x = tape.constant_tensor(&xb)?;
            let h = probe.lin1.forward(&mut tape, x, Phase::Train)?;
            let h = tape.relu(h)?;
            let logits = probe.lin2.forward(&mut tape, h, Phase::Train)?;
            let loss = tape.cross_entropy(logits, &yb)?;
            tape.backward(loss)?;
            nn::absorb_grads(&tape, &mut probe.lin1);
            nn::absorb_grads(&tape, &mut probe.lin2);
            nn::sgd_step(&mut probe.lin1, cfg.lr)?;
            nn::sgd_step(&mut probe.lin2, cfg.lr)?;
        }
        let val_err = probe.errors(val_features, val_labels);
        let improved = best.as_ref().map(|(b, ..)| val_err < *b).unwrap_or(true);
        if improved {
            best = Some((val_err, probe.lin1.clone(), probe.lin2.clone(), epoch));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (_, lin1, lin2, best_epoch) = best.expect("at least one epoch ran");
    let probe = Probe { lin1, lin2 };
    let mut counts = vec![0usize; num_labels];
    for &l in test_labels {
        counts[l] += 1;
    }
    let chance = 1.0 - counts.into_iter().max().unwrap_or(0) as f64 / test_labels.len() as f64;
    Ok(ProbeResult {
        train_error: probe.errors(train_features, train_labels),
        test_error: probe.errors(test_features, test_labels),
        chance_error: chance,
        epochs_run,
        best_epoch,
    })
}

/// Freezes the encoder, extracts the chosen representation for each split,
/// and trains the identity probe. Deterministic given (model, seed).
pub fn disentanglement_metric(
    model: &mut Model,
    train: &LabeledImageSet,
    val: &LabeledImageSet,
    test: &LabeledImageSet,
    space: ReprSpace,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let f_train = embed_set_features(model, train, space)?;
    let f_val = embed_set_features(model, val, space)?;
    let f_test = embed_set_features(model, test, space)?;
    train_probe(
        &f_train,
        &train.labels,
        &f_val,
        &val.labels,
        &f_test,
        &test.labels,
        train.num_labels,
        cfg,
    )
}
