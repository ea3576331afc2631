//! Datasets and sampling: MNIST IDX ingestion, a procedurally generated
//! labeled glyph dataset with known nuisance factors, split utilities, and
//! the triplet/pair samplers that drive training.

use crate::bytes::{self, Reader};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::{Error, Real, Result};
use std::path::Path;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

const DSYN_MAGIC: [u8; 4] = *b"DSYN";
const DSYN_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Full,
    Train,
    Val,
    Test,
}

impl SplitTag {
    pub fn name(self) -> &'static str {
        match self {
            SplitTag::Full => "full",
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        }
    }
}

/// Ground-truth nuisance parameters of one synthetic sample:
/// dx, dy (pixels), rotation (radians), scale, brightness. Retained for
/// diagnostics only; the model never sees them.
pub type Nuisance = [f64; 5];

#[derive(Debug, Clone)]
pub struct LabeledImageSet {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_labels: usize,
    pub split: SplitTag,
    pub nuisance: Option<Vec<Nuisance>>,
}

impl LabeledImageSet {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        num_labels: usize,
        split: SplitTag,
    ) -> Result<Self> {
        let set = LabeledImageSet {
            images,
            labels,
            num_labels,
            split,
            nuisance: None,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.images.shape();
        if shape.len() != 4 {
            return Err(Error::Dataset(format!(
                "images must be [N,C,H,W], got {shape:?}"
            )));
        }
        if shape[0] != self.labels.len() || self.labels.is_empty() {
            return Err(Error::Dataset(format!(
                "{} images vs {} labels",
                shape[0],
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_labels) {
            return Err(Error::Dataset(format!(
                "label {bad} out of range (num_labels {})",
                self.num_labels
            )));
        }
        if let Some(&bad) = self
            .images
            .data()
            .iter()
            .find(|v| **v < 0.0 || **v > 1.0 || !v.is_finite())
        {
            return Err(Error::Dataset(format!(
                "pixel value {bad} outside [0,1]"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// (C, H, W) of each image.
    pub fn image_dims(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    fn image_numel(&self) -> usize {
        let (c, h, w) = self.image_dims();
        c * h * w
    }

    /// One image as a [1,C,H,W] tensor.
    pub fn image(&self, i: usize) -> Tensor {
        let px = self.image_numel();
        let (c, h, w) = self.image_dims();
        Tensor::new(self.images.data()[i * px..(i + 1) * px].to_vec(), &[1, c, h, w]).unwrap()
    }

    /// Rows `indices` gathered into a batch tensor.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let px = self.image_numel();
        let (c, h, w) = self.image_dims();
        let mut data = Vec::with_capacity(indices.len() * px);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * px..(i + 1) * px]);
        }
        Tensor::new(data, &[indices.len(), c, h, w]).unwrap()
    }

    pub fn subset(&self, indices: &[usize], split: SplitTag) -> LabeledImageSet {
        LabeledImageSet {
            images: self.gather(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_labels: self.num_labels,
            split,
            nuisance: self
                .nuisance
                .as_ref()
                .map(|n| indices.iter().map(|&i| n[i]).collect()),
        }
    }

    /// Error rate of always guessing the most frequent class.
    pub fn chance_error(&self) -> f64 {
        let mut counts = vec![0usize; self.num_labels];
        for &l in &self.labels {
            counts[l] += 1;
        }
        let max = counts.into_iter().max().unwrap_or(0);
        1.0 - max as f64 / self.labels.len() as f64
    }
}

// ── IDX ingestion ───────────────────────────────────────────────────────

fn read_be_u32(buf: &[u8], pos: usize, path: &str) -> Result<u32> {
    buf.get(pos..pos + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
        .ok_or_else(|| Error::IdxTruncated {
            path: path.to_string(),
            msg: format!("header needs {} bytes", pos + 4),
        })
}

/// Parses the big-endian IDX pair used by MNIST; bytes scale to [0,1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledImageSet> {
    let img_buf = std::fs::read(images_path)?;
    let img_name = images_path.display().to_string();
    let magic = read_be_u32(&img_buf, 0, &img_name)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxBadMagic {
            path: img_name,
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let count = read_be_u32(&img_buf, 4, &img_name)? as usize;
    let rows = read_be_u32(&img_buf, 8, &img_name)? as usize;
    let cols = read_be_u32(&img_buf, 12, &img_name)? as usize;
    let expected = 16 + count * rows * cols;
    if img_buf.len() != expected {
        return Err(Error::IdxTruncated {
            path: img_name,
            msg: format!("expected {expected} bytes, found {}", img_buf.len()),
        });
    }

    let lab_buf = std::fs::read(labels_path)?;
    let lab_name = labels_path.display().to_string();
    let magic = read_be_u32(&lab_buf, 0, &lab_name)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxBadMagic {
            path: lab_name,
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let lab_count = read_be_u32(&lab_buf, 4, &lab_name)? as usize;
    if lab_buf.len() != 8 + lab_count {
        return Err(Error::IdxTruncated {
            path: lab_name,
            msg: format!("expected {} bytes, found {}", 8 + lab_count, lab_buf.len()),
        });
    }
    if lab_count != count {
        return Err(Error::IdxCountMismatch {
            images: count,
            labels: lab_count,
        });
    }

    let data: Vec<Real> = img_buf[16..]
        .iter()
        .map(|&b| b as Real / 255.0)
        .collect();
    let labels: Vec<usize> = lab_buf[8..].iter().map(|&b| b as usize).collect();
    let num_labels = labels.iter().copied().max().unwrap_or(0) + 1;
    LabeledImageSet::new(
        Tensor::new(data, &[count, 1, rows, cols])?,
        labels,
        num_labels,
        SplitTag::Full,
    )
}

// ── Synthetic glyph dataset ─────────────────────────────────────────────

/// Procedural stand-in for a multi-identity image corpus: each identity is
/// a fixed random stroke glyph, and intra-class variation comes from
/// sampled translation, rotation, scale, and brightness.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFactorSpec {
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub image_side: usize,
    /// Translation range in pixels (+-).
    pub translate_px: f64,
    /// Rotation range in degrees (+-).
    pub rotate_deg: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    pub bright_lo: f64,
    pub bright_hi: f64,
}

impl Default for SyntheticFactorSpec {
    fn default() -> Self {
        SyntheticFactorSpec {
            num_identities: 10,
            samples_per_identity: 200,
            image_side: 32,
            translate_px: 3.0,
            rotate_deg: 25.0,
            scale_lo: 0.85,
            scale_hi: 1.15,
            bright_lo: 0.7,
            bright_hi: 1.0,
        }
    }
}

impl SyntheticFactorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities == 0 || self.samples_per_identity == 0 || self.image_side < 8 {
            return Err(Error::Dataset(
                "synthetic spec needs identities, samples, and image side >= 8".into(),
            ));
        }
        if self.scale_lo > self.scale_hi
            || self.bright_lo > self.bright_hi
            || self.scale_lo <= 0.0
            || self.bright_lo < 0.0
            || self.bright_hi > 1.0
            || self.translate_px < 0.0
            || self.rotate_deg < 0.0
        {
            return Err(Error::Dataset("synthetic spec has an empty or invalid range".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        format!(
            "num_identities={}\nsamples_per_identity={}\nimage_side={}\ntranslate_px={}\nrotate_deg={}\nscale_lo={}\nscale_hi={}\nbright_lo={}\nbright_hi={}\n",
            self.num_identities,
            self.samples_per_identity,
            self.image_side,
            self.translate_px,
            self.rotate_deg,
            self.scale_lo,
            self.scale_hi,
            self.bright_lo,
            self.bright_hi
        )
    }
}

enum Prim {
    Segment {
        ax: f64,
        ay: f64,
        bx: f64,
        by: f64,
        r: f64,
    },
    Ring {
        cx: f64,
        cy: f64,
        rad: f64,
        r: f64,
    },
}

impl Prim {
    fn distance(&self, x: f64, y: f64) -> (f64, f64) {
        match *self {
            Prim::Segment { ax, ay, bx, by, r } => {
                let (dx, dy) = (bx - ax, by - ay);
                let len2 = dx * dx + dy * dy;
                let t = if len2 > 0.0 {
                    (((x - ax) * dx + (y - ay) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (px, py) = (ax + t * dx, ay + t * dy);
                (((x - px).powi(2) + (y - py).powi(2)).sqrt(), r)
            }
            Prim::Ring { cx, cy, rad, r } => {
                let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
                ((d - rad).abs(), r)
            }
        }
    }
}

/// Smooth ink profile: ~1 inside the stroke, soft falloff at the edge.
fn ink(dist: f64, radius: f64) -> f64 {
    1.0 / (1.0 + ((dist - radius) / (0.25 * radius)).exp())
}

fn glyph_prims(seed: u64, identity: usize) -> Vec<Prim> {
    let mut rng = Rng::derive(seed, 0x676c796608 + identity as u64);
    let mut prims = Vec::new();
    let n_strokes = 4 + rng.below(3);
    let mut px = rng.uniform_in(-0.8, 0.8);
    let mut py = rng.uniform_in(-0.8, 0.8);
    for _ in 0..n_strokes {
        let nx = rng.uniform_in(-0.8, 0.8);
        let ny = rng.uniform_in(-0.8, 0.8);
        prims.push(Prim::Segment {
            ax: px,
            ay: py,
            bx: nx,
            by: ny,
            r: rng.uniform_in(0.10, 0.20),
        });
        px = nx;
        py = ny;
    }
    if rng.uniform() < 0.5 {
        prims.push(Prim::Ring {
            cx: rng.uniform_in(-0.3, 0.3),
            cy: rng.uniform_in(-0.3, 0.3),
            rad: rng.uniform_in(0.3, 0.6),
            r: rng.uniform_in(0.08, 0.14),
        });
    }
    prims
}

fn render_glyph(prims: &[Prim], side: usize, nuis: &Nuisance, out: &mut [Real]) {
    let [dx, dy, theta, scale, bright] = *nuis;
    let radius_px = 0.36 * side as f64;
    let (cos_t, sin_t) = ((-theta).cos(), (-theta).sin());
    let half = side as f64 / 2.0;
    for r in 0..side {
        for c in 0..side {
            let x = c as f64 + 0.5 - half - dx;
            let y = r as f64 + 0.5 - half - dy;
            let qx = (cos_t * x - sin_t * y) / (scale * radius_px);
            let qy = (sin_t * x + cos_t * y) / (scale * radius_px);
            let mut v: f64 = 0.0;
            for p in prims {
                let (d, rad) = p.distance(qx, qy);
                v = v.max(ink(d, rad));
            }
            out[r * side + c] = (bright * v).clamp(0.0, 1.0) as Real;
        }
    }
}

/// Renders the dataset. Identity determines the glyph exactly; nuisance
/// parameters are sampled independently per image and retained alongside.
pub fn generate_synthetic(spec: &SyntheticFactorSpec, seed: u64) -> Result<LabeledImageSet> {
    spec.validate()?;
    let side = spec.image_side;
    let n = spec.num_identities * spec.samples_per_identity;
    let mut data = vec![0.0 as Real; n * side * side];
    let mut labels = Vec::with_capacity(n);
    let mut nuisance = Vec::with_capacity(n);
    let mut rng = Rng::derive(seed, 0x64736574);
    let deg = std::f64::consts::PI / 180.0;
    let mut idx = 0;
    for identity in 0..spec.num_identities {
        let prims = glyph_prims(seed, identity);
        for _ in 0..spec.samples_per_identity {
            let nuis: Nuisance = [
                rng.uniform_in(-spec.translate_px, spec.translate_px),
                rng.uniform_in(-spec.translate_px, spec.translate_px),
                rng.uniform_in(-spec.rotate_deg, spec.rotate_deg) * deg,
                rng.uniform_in(spec.scale_lo, spec.scale_hi),
                rng.uniform_in(spec.bright_lo, spec.bright_hi),
            ];
            render_glyph(
                &prims,
                side,
                &nuis,
                &mut data[idx * side * side..(idx + 1) * side * side],
            );
            labels.push(identity);
            nuisance.push(nuis);
            idx += 1;
        }
    }
    let mut set = LabeledImageSet::new(
        Tensor::new(data, &[n, 1, side, side])?,
        labels,
        spec.num_identities,
        SplitTag::Full,
    )?;
    set.nuisance = Some(nuisance);
    Ok(set)
}

// ── Splits ──────────────────────────────────────────────────────────────

/// Per-label proportional split into train/val/test, disjoint by index.
pub fn split_train_val_test(
    set: &LabeledImageSet,
    val_fraction: f64,
    test_fraction: f64,
    seed: u64,
) -> (LabeledImageSet, LabeledImageSet, LabeledImageSet) {
    let mut rng = Rng::derive(seed, 0x73706c6974);
    let mut per_label: Vec<Vec<usize>> = vec![Vec::new(); set.num_labels];
    for (i, &l) in set.labels.iter().enumerate() {
        per_label[l].push(i);
    }
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for mut idxs in per_label {
        rng.shuffle(&mut idxs);
        let n = idxs.len();
        let n_val = (n as f64 * val_fraction).floor() as usize;
        let n_test = (n as f64 * test_fraction).floor() as usize;
        for (k, i) in idxs.into_iter().enumerate() {
            if k < n_val {
                val.push(i);
            } else if k < n_val + n_test {
                test.push(i);
            } else {
                train.push(i);
            }
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    (
        set.subset(&train, SplitTag::Train),
        set.subset(&val, SplitTag::Val),
        set.subset(&test, SplitTag::Test),
    )
}

/// Excludes whole identities from training; they appear only in the
/// returned held-out set.
pub fn split_holdout_identities(
    set: &LabeledImageSet,
    holdout: usize,
    seed: u64,
) -> Result<(LabeledImageSet, LabeledImageSet)> {
    if holdout >= set.num_labels {
        return Err(Error::Dataset(format!(
            "cannot hold out {holdout} of {} identities",
            set.num_labels
        )));
    }
    let mut rng = Rng::derive(seed, 0x686f6c64);
    let mut ids: Vec<usize> = (0..set.num_labels).collect();
    rng.shuffle(&mut ids);
    let held: Vec<usize> = ids[..holdout].to_vec();
    let is_held = |l: usize| held.contains(&l);
    let train_idx: Vec<usize> = (0..set.len()).filter(|&i| !is_held(set.labels[i])).collect();
    let held_idx: Vec<usize> = (0..set.len()).filter(|&i| is_held(set.labels[i])).collect();
    Ok((
        set.subset(&train_idx, SplitTag::Train),
        set.subset(&held_idx, SplitTag::Test),
    ))
}

// ── Samplers ────────────────────────────────────────────────────────────

/// One batch of Algorithm-style triplets: x1 and x1' share a label, x2 is
/// drawn from another class unless same-label swaps are allowed.
#[derive(Debug, Clone)]
pub struct TripletBatch {
    pub x1: Tensor,
    pub x1p: Tensor,
    pub x2: Tensor,
    pub id1: Vec<usize>,
    pub id2: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct PairBatch {
    pub x1: Tensor,
    pub x2: Tensor,
    pub id1: Vec<usize>,
    pub id2: Vec<usize>,
}

pub struct TripletSampler {
    per_label: Vec<Vec<usize>>,
    /// Labels with at least two samples (eligible to provide x1, x1').
    eligible: Vec<usize>,
    /// Labels with at least one sample.
    nonempty: Vec<usize>,
    pub allow_same_label: bool,
}

impl TripletSampler {
    pub fn new(set: &LabeledImageSet, allow_same_label: bool) -> Result<Self> {
        let mut per_label: Vec<Vec<usize>> = vec![Vec::new(); set.num_labels];
        for (i, &l) in set.labels.iter().enumerate() {
            per_label[l].push(i);
        }
        let eligible: Vec<usize> = (0..set.num_labels)
            .filter(|&l| per_label[l].len() >= 2)
            .collect();
        let nonempty: Vec<usize> = (0..set.num_labels)
            .filter(|&l| !per_label[l].is_empty())
            .collect();
        if eligible.is_empty() {
            return Err(Error::Dataset(
                "triplet sampling needs a label with at least two samples".into(),
            ));
        }
        if !allow_same_label && nonempty.len() < 2 {
            return Err(Error::Dataset(
                "triplet sampling needs at least two labels".into(),
            ));
        }
        Ok(TripletSampler {
            per_label,
            eligible,
            nonempty,
            allow_same_label,
        })
    }

    /// (i1, i1', i2) with label(i1) == label(i1'), i1 != i1'.
    pub fn triplet_indices(&self, rng: &mut Rng) -> (usize, usize, usize) {
        let l1 = self.eligible[rng.below(self.eligible.len())];
        let class = &self.per_label[l1];
        let a = rng.below(class.len());
        let mut b = rng.below(class.len() - 1);
        if b >= a {
            b += 1;
        }
        let i2 = self.other_class_index(rng, l1);
        (class[a], class[b], i2)
    }

    /// (i1, i2) for the adversary phase, same label rule as triplets.
    pub fn pair_indices(&self, rng: &mut Rng) -> (usize, usize) {
        let l1 = self.eligible[rng.below(self.eligible.len())];
        let class = &self.per_label[l1];
        let i1 = class[rng.below(class.len())];
        let i2 = self.other_class_index(rng, l1);
        (i1, i2)
    }

    fn other_class_index(&self, rng: &mut Rng, l1: usize) -> usize {
        let l2 = if self.allow_same_label {
            self.nonempty[rng.below(self.nonempty.len())]
        } else {
            let choices: Vec<usize> = self
                .nonempty
                .iter()
                .copied()
                .filter(|&l| l != l1)
                .collect();
            choices[rng.below(choices.len())]
        };
        let class = &self.per_label[l2];
        class[rng.below(class.len())]
    }

    pub fn triplet_batch(
        &self,
        set: &LabeledImageSet,
        rng: &mut Rng,
        batch: usize,
    ) -> TripletBatch {
        let mut i1 = Vec::with_capacity(batch);
        let mut i1p = Vec::with_capacity(batch);
        let mut i2 = Vec::with_capacity(batch);
        for _ in 0..batch {
            let (a, b, c) = self.triplet_indices(rng);
            i1.push(a);
            i1p.push(b);
            i2.push(c);
        }
        TripletBatch {
            x1: set.gather(&i1),
            x1p: set.gather(&i1p),
            x2: set.gather(&i2),
            id1: i1.iter().map(|&i| set.labels[i]).collect(),
            id2: i2.iter().map(|&i| set.labels[i]).collect(),
        }
    }

    pub fn pair_batch(&self, set: &LabeledImageSet, rng: &mut Rng, batch: usize) -> PairBatch {
        let mut i1 = Vec::with_capacity(batch);
        let mut i2 = Vec::with_capacity(batch);
        for _ in 0..batch {
            let (a, b) = self.pair_indices(rng);
            i1.push(a);
            i2.push(b);
        }
        PairBatch {
            x1: set.gather(&i1),
            x2: set.gather(&i2),
            id1: i1.iter().map(|&i| set.labels[i]).collect(),
            id2: i2.iter().map(|&i| set.labels[i]).collect(),
        }
    }
}

// ── Synthetic dataset cache ─────────────────────────────────────────────

/// Writes a generated dataset to the DSYN container: magic, version,
/// spec echo, then tensors in the checkpoint record layout.
pub fn save_synthetic_cache(
    path: &Path,
    spec: &SyntheticFactorSpec,
    set: &LabeledImageSet,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&DSYN_MAGIC);
    bytes::put_u32(&mut out, DSYN_VERSION);
    bytes::put_text(&mut out, &spec.to_kv());
    bytes::put_tensor(&mut out, "images", &set.images);
    let labels = Tensor::new(
        set.labels.iter().map(|&l| l as Real).collect(),
        &[set.labels.len()],
    )?;
    bytes::put_tensor(&mut out, "labels", &labels);
    if let Some(nuis) = &set.nuisance {
        let flat: Vec<Real> = nuis.iter().flat_map(|n| n.iter().map(|&v| v as Real)).collect();
        let t = Tensor::new(flat, &[nuis.len(), 5])?;
        bytes::put_tensor(&mut out, "nuisance", &t);
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_synthetic_cache(path: &Path) -> Result<(SyntheticFactorSpec, LabeledImageSet)> {
    let buf = std::fs::read(path)?;
    let mut r = Reader::new(&buf, "DSYN");
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != DSYN_MAGIC {
        return Err(Error::Dataset(format!(
            "bad DSYN magic {magic:?}, expected {DSYN_MAGIC:?}"
        )));
    }
    let version = r.u32()?;
    if version != DSYN_VERSION {
        return Err(Error::Dataset(format!(
            "unsupported DSYN version {version}"
        )));
    }
    let spec_text = bytes::get_text(&mut r)?;
    let spec = parse_spec_kv(&spec_text)?;
    let mut images = None;
    let mut labels = None;
    let mut nuisance = None;
    while !r.is_done() {
        let (name, t) = bytes::get_tensor(&mut r)?;
        match name.as_str() {
            "images" => images = Some(t),
            "labels" => labels = Some(t),
            "nuisance" => nuisance = Some(t),
            other => {
                return Err(Error::Dataset(format!(
                    "unknown DSYN tensor {other}"
                )))
            }
        }
    }
    let images = images.ok_or_else(|| Error::Dataset("DSYN missing images".into()))?;
    let labels = labels.ok_or_else(|| Error::Dataset("DSYN missing labels".into()))?;
    let labels: Vec<usize> = labels.data().iter().map(|&v| v as usize).collect();
    let mut set = LabeledImageSet::new(images, labels, spec.num_identities, SplitTag::Full)?;
    if let Some(n) = nuisance {
        let rows = n.shape()[0];
        let mut v = Vec::with_capacity(rows);
        for i in 0..rows {
            let mut arr = [0.0; 5];
            for j in 0..5 {
                arr[j] = n.data()[i * 5 + j] as f64;
            }
            v.push(arr);
        }
        set.nuisance = Some(v);
    }
    Ok((spec, set))
}

fn parse_spec_kv(text: &str) -> Result<SyntheticFactorSpec> {
    let mut spec = SyntheticFactorSpec::default();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
            line: lineno + 1,
            msg: format!("expected key=value, got {line:?}"),
        })?;
        let bad = |what: &str| Error::Config {
            line: lineno + 1,
            msg: format!("invalid {what}: {value:?}"),
        };
        match key.trim() {
            "num_identities" => spec.num_identities = value.trim().parse().map_err(|_| bad("integer"))?,
            "samples_per_identity" => spec.samples_per_identity = value.trim().parse().map_err(|_| bad("integer"))?,
            "image_side" => spec.image_side = value.trim().parse().map_err(|_| bad("integer"))?,
            "translate_px" => spec.translate_px = value.trim().parse().map_err(|_| bad("number"))?,
            "rotate_deg" => spec.rotate_deg = value.trim().parse().map_err(|_| bad("number"))?,
            "scale_lo" => spec.scale_lo = value.trim().parse().map_err(|_| bad("number"))?,
            "scale_hi" => spec.scale_hi = value.trim().parse().map_err(|_| bad("number"))?,
            "bright_lo" => spec.bright_lo = value.trim().parse().map_err(|_| bad("number"))?,
            "bright_hi" => spec.bright_hi = value.trim().parse().map_err(|_| bad("number"))?,
            other => {
                return Err(Error::Config {
                    line: lineno + 1,
                    msg: format!("unknown key {other:?}"),
                })
            }
        }
    }
    Ok(spec)
}
