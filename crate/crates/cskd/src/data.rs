//! Datasets, synthetic data, the same-label pair sampler, and input-space
//! regularizers (flip/pad-crop augmentation, mixup).

use std::f64::consts::PI;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled samples with a per-class index for pair sampling.
#[derive(Clone, Debug)]
pub struct Dataset {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    class_index: Vec<Vec<usize>>,
    sample_shape: Vec<usize>,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let shape = inputs.shape();
        if shape.is_empty() || shape[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "inputs {:?} do not carry one row per label ({} labels)",
                shape,
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::Domain("dataset needs at least one class".into()));
        }
        let mut class_index = vec![Vec::new(); num_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(Error::Domain(format!(
                    "label {y} at sample {i} is outside [0, {num_classes})"
                )));
            }
            class_index[y].push(i);
        }
        let sample_shape = shape[1..].to_vec();
        Ok(Self { inputs, labels, num_classes, class_index, sample_shape })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_index(&self) -> &[Vec<usize>] {
        &self.class_index
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn sample_numel(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.sample_numel();
        &self.inputs.data()[i * n..(i + 1) * n]
    }

    /// Reinterprets each sample under a new shape of equal element count
    /// (e.g. viewing a flat feature vector as a 1-channel image).
    pub fn with_sample_shape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.sample_numel() {
            return Err(Error::Dimension(format!(
                "sample shape {:?} has {} elements, dataset samples have {}",
                shape,
                numel,
                self.sample_numel()
            )));
        }
        let mut full = vec![self.len()];
        full.extend_from_slice(shape);
        self.inputs = self.inputs.reshape(&full)?;
        self.sample_shape = shape.to_vec();
        Ok(self)
    }

    /// Gathers rows into a `[b x sample...]` batch tensor.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let n = self.sample_numel();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        Tensor::new(data, &shape).expect("gather shape consistent")
    }

    pub fn gather_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Deterministic 80/20 split by index hash: sample `i` lands in the test
    /// half iff `splitmix64(i) % 5 == 0`.
    pub fn split_by_index_hash(&self) -> (Dataset, Dataset) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for i in 0..self.len() {
            if splitmix64(i as u64) % 5 == 0 {
                test.push(i);
            } else {
                train.push(i);
            }
        }
        (self.subset(&train), self.subset(&test))
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        let inputs = self.gather(indices);
        let labels = self.gather_labels(indices);
        Dataset::new(inputs, labels, self.num_classes).expect("subset of a valid dataset")
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Gaussian blobs with class centers spaced on a radius-3 circle in the
/// first two coordinates (remaining coordinates zero). Samples are drawn
/// class-major, so sample `c * per_class + s` belongs to class `c`.
pub fn synth_gaussians(
    classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 || per_class < 2 || dim == 0 {
        return Err(Error::Domain(format!(
            "synthetic dataset needs classes >= 2, per_class >= 2, dim >= 1; got {classes}, {per_class}, {dim}"
        )));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::Domain(format!("spread must be finite and >= 0, got {spread}")));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for c in 0..classes {
        let theta = 2.0 * PI * c as f64 / classes as f64;
        let mut center = vec![0.0; dim];
        center[0] = 3.0 * theta.cos();
        if dim > 1 {
            center[1] = 3.0 * theta.sin();
        }
        for _ in 0..per_class {
            for &m in center.iter() {
                data.push(m + spread * normal.sample(&mut rng));
            }
            labels.push(c);
        }
    }
    let inputs = Tensor::new(data, &[classes * per_class, dim])?;
    Dataset::new(inputs, labels, classes)
}

use rand::SeedableRng;

/// One training step's worth of inputs, labels, and same-label partners.
#[derive(Clone, Debug)]
pub struct PairedBatch {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub x_prime: Tensor,
    /// Source row of each partner, kept for invariant checks.
    pub partner_indices: Vec<usize>,
}

/// Draws a same-label partner for every index. The partner is uniform over
/// the other samples of the class; a singleton class falls back to the
/// sample itself (its divergence term then vanishes).
pub fn paired_batch<R: Rng>(ds: &Dataset, indices: &[usize], rng: &mut R) -> Result<PairedBatch> {
    for &i in indices {
        if i >= ds.len() {
            return Err(Error::Domain(format!("index {i} out of range for dataset of {}", ds.len())));
        }
    }
    let y = ds.gather_labels(indices);
    let mut partner_indices = Vec::with_capacity(indices.len());
    for (&i, &label) in indices.iter().zip(&y) {
        let peers = &ds.class_index()[label];
        if peers.len() < 2 {
            partner_indices.push(i);
            continue;
        }
        // Uniform over peers excluding i itself: draw a slot among the
        // len-1 others and skip over i's own position.
        let own = peers.iter().position(|&p| p == i).expect("i indexed under its label");
        let slot = rng.random_range(0..peers.len() - 1);
        let pick = if slot >= own { slot + 1 } else { slot };
        partner_indices.push(peers[pick]);
    }
    Ok(PairedBatch {
        x: ds.gather(indices),
        y,
        x_prime: ds.gather(&partner_indices),
        partner_indices,
    })
}

/// Horizontal flip and zero-pad/random-crop policy; both legs preserve the
/// input shape.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugPolicy {
    pub flip_prob: f64,
    pub pad: usize,
}

impl Default for AugPolicy {
    fn default() -> Self {
        Self { flip_prob: 0.5, pad: 2 }
    }
}

impl AugPolicy {
    pub fn disabled() -> Self {
        Self { flip_prob: 0.0, pad: 0 }
    }

    pub fn is_disabled(&self) -> bool {
        self.flip_prob == 0.0 && self.pad == 0
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Domain(format!(
                "flip probability must lie in [0, 1], got {}",
                self.flip_prob
            )));
        }
        Ok(())
    }
}

/// Per-sample independent flip (probability `flip_prob`) followed by zero
/// padding of `pad` pixels and a uniform-offset crop back to the original
/// extent. Expects `[b x c x h x w]`.
pub fn augment<R: Rng>(x: &Tensor, policy: &AugPolicy, rng: &mut R) -> Result<Tensor> {
    policy.validate()?;
    let shape = x.shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Dimension(format!(
            "augment expects [b x c x h x w] input, got {shape:?}"
        )));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let p = policy.pad;
    let mut out = vec![0.0; x.numel()];
    let src = x.data();
    for bi in 0..b {
        let flip = rng.random_bool(policy.flip_prob);
        let (oy, ox) = if p > 0 {
            (rng.random_range(0..=2 * p), rng.random_range(0..=2 * p))
        } else {
            (0, 0)
        };
        for ci in 0..c {
            let base = (bi * c + ci) * h * w;
            for i in 0..h {
                for j in 0..w {
                    // position in the padded image this output pixel reads from
                    let sy = (i + oy) as isize - p as isize;
                    let sx = (j + ox) as isize - p as isize;
                    let v = if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                        0.0
                    } else {
                        let sx = if flip { w - 1 - sx as usize } else { sx as usize };
                        src[base + sy as usize * w + sx]
                    };
                    out[base + i * w + j] = v;
                }
            }
        }
    }
    Tensor::new(out, &shape)
}

/// Convex combination of two batches and their soft labels:
/// `x = lam*x1 + (1-lam)*x2`, same for labels. `lam = 1` and `lam = 0`
/// return the untouched endpoint batches.
pub fn mixup_batch(
    x1: &Tensor,
    y1: &Tensor,
    x2: &Tensor,
    y2: &Tensor,
    lam: f64,
) -> Result<(Tensor, Tensor)> {
    if !(0.0..=1.0).contains(&lam) {
        return Err(Error::Domain(format!("mixup coefficient must lie in [0, 1], got {lam}")));
    }
    if x1.shape() != x2.shape() || y1.shape() != y2.shape() {
        return Err(Error::Dimension(format!(
            "mixup shapes differ: x {:?} vs {:?}, y {:?} vs {:?}",
            x1.shape(),
            x2.shape(),
            y1.shape(),
            y2.shape()
        )));
    }
    if lam == 1.0 {
        return Ok((x1.clone(), y1.clone()));
    }
    if lam == 0.0 {
        return Ok((x2.clone(), y2.clone()));
    }
    let mix = |a: &Tensor, b: &Tensor| -> Tensor {
        let data: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(u, v)| lam * u + (1.0 - lam) * v)
            .collect();
        Tensor::new(data, a.shape()).expect("same shape by check above")
    };
    Ok((mix(x1, x2), mix(y1, y2)))
}

/// One-hot rows for a batch of hard labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Domain(format!("label {y} outside [0, {classes})")));
        }
        data[i * classes + y] = 1.0;
    }
    Tensor::new(data, &[labels.len(), classes])
}

// ---- file formats --------------------------------------------------------

fn read_be_u32(bytes: &[u8], offset: usize, path: &Path, what: &str) -> Result<u32> {
    if offset + 4 > bytes.len() {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset,
            message: format!("truncated while reading {what}"),
        });
    }
    Ok(u32::from_be_bytes(bytes[offset..offset + 4].try_into().expect("4 bytes")))
}

/// Loads an IDX image/label file pair: big-endian extents, unsigned byte
/// payloads, pixels rescaled to [0, 1]. Sample shape is `[rows x cols]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut img_bytes = Vec::new();
    std::fs::File::open(images_path)?.read_to_end(&mut img_bytes)?;
    let magic = read_be_u32(&img_bytes, 0, images_path, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            path: images_path.to_path_buf(),
            offset: 0,
            message: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = read_be_u32(&img_bytes, 4, images_path, "image count")? as usize;
    let rows = read_be_u32(&img_bytes, 8, images_path, "row extent")? as usize;
    let cols = read_be_u32(&img_bytes, 12, images_path, "column extent")? as usize;
    let expected = 16 + count * rows * cols;
    if img_bytes.len() != expected {
        return Err(Error::Format {
            path: images_path.to_path_buf(),
            offset: img_bytes.len().min(expected),
            message: format!(
                "image payload is {} bytes, header implies {expected}",
                img_bytes.len()
            ),
        });
    }

    let mut lbl_bytes = Vec::new();
    std::fs::File::open(labels_path)?.read_to_end(&mut lbl_bytes)?;
    let magic = read_be_u32(&lbl_bytes, 0, labels_path, "label magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            offset: 0,
            message: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let label_count = read_be_u32(&lbl_bytes, 4, labels_path, "label count")? as usize;
    if label_count != count {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            offset: 4,
            message: format!("{label_count} labels for {count} images"),
        });
    }
    if lbl_bytes.len() != 8 + count {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            offset: lbl_bytes.len().min(8 + count),
            message: format!("label payload is {} bytes, header implies {}", lbl_bytes.len(), 8 + count),
        });
    }

    let data: Vec<f64> = img_bytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lbl_bytes[8..].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let inputs = Tensor::new(data, &[count, rows, cols])?;
    Dataset::new(inputs, labels, num_classes)
}

/// Loads the CSV dataset format: header `label,f0,f1,...`, one sample per
/// row, integer label first.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        message: "empty file".into(),
    })?;
    let cols = header.split(',').count();
    if cols < 2 || !header.starts_with("label") {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("expected header `label,f0,...`, got `{header}`"),
        });
    }
    let dim = cols - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label: usize = fields
            .next()
            .unwrap_or_default()
            .trim()
            .parse()
            .map_err(|_| Error::Format {
                path: path.to_path_buf(),
                offset: lineno,
                message: format!("line {}: bad label", lineno + 1),
            })?;
        labels.push(label);
        let mut seen = 0;
        for field in fields {
            let v: f64 = field.trim().parse().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                offset: lineno,
                message: format!("line {}: bad feature value `{field}`", lineno + 1),
            })?;
            data.push(v);
            seen += 1;
        }
        if seen != dim {
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: lineno,
                message: format!("line {}: {seen} features, header implies {dim}", lineno + 1),
            });
        }
    }
    let n = labels.len();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let inputs = Tensor::new(data, &[n, dim])?;
    Dataset::new(inputs, labels, num_classes)
}

/// Writes the CSV dataset format used by [`load_csv`].
pub fn save_csv(ds: &Dataset, path: &Path) -> Result<()> {
    use std::fmt::Write as _;
    let dim = ds.sample_numel();
    let mut out = String::from("label");
    for j in 0..dim {
        write!(out, ",f{j}").expect("string write");
    }
    out.push('\n');
    for i in 0..ds.len() {
        write!(out, "{}", ds.labels()[i]).expect("string write");
        for v in ds.sample(i) {
            write!(out, ",{v}").expect("string write");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
