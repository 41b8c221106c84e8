//! Reference classifiers: an MLP and a small ConvNet, both exposing logits
//! and the penultimate activation that feeds the final linear layer.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{GradGraph, Tensor, Var};

const CHECKPOINT_MAGIC: &[u8; 4] = b"CSKD";
const CHECKPOINT_VERSION: u32 = 1;

/// Architecture description. The ConvNet is fixed to the
/// conv3x3(32) - pool - conv3x3(64) - pool - fc(128) - fc(classes) stem;
/// the MLP takes arbitrary hidden widths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Mlp {
        input: usize,
        hidden: Vec<usize>,
        classes: usize,
    },
    ConvNet {
        in_channels: usize,
        height: usize,
        width: usize,
        classes: usize,
    },
}

impl ModelSpec {
    pub fn classes(&self) -> usize {
        match self {
            ModelSpec::Mlp { classes, .. } | ModelSpec::ConvNet { classes, .. } => *classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Mlp { input, hidden, classes } => {
                if *input == 0 || *classes == 0 || hidden.iter().any(|&h| h == 0) {
                    return Err(Error::Config(format!("zero-size layer in model spec {self:?}")));
                }
            }
            ModelSpec::ConvNet { in_channels, height, width, classes } => {
                if *in_channels == 0 || *classes == 0 {
                    return Err(Error::Config(format!("zero-size layer in model spec {self:?}")));
                }
                if height / 4 == 0 || width / 4 == 0 {
                    return Err(Error::Config(format!(
                        "conv net needs height and width >= 4 after two 2x2 pools, got {height}x{width}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Flattened input size a batch row must have.
    pub fn input_numel(&self) -> usize {
        match self {
            ModelSpec::Mlp { input, .. } => *input,
            ModelSpec::ConvNet { in_channels, height, width, .. } => in_channels * height * width,
        }
    }

    /// Width of the penultimate activation.
    pub fn penultimate_dim(&self) -> usize {
        match self {
            ModelSpec::Mlp { input, hidden, .. } => *hidden.last().unwrap_or(input),
            ModelSpec::ConvNet { .. } => 128,
        }
    }
}

/// Ordered, named parameter tensors for one model.
#[derive(Clone, Debug)]
pub struct ModelParams {
    spec: ModelSpec,
    tensors: Vec<(String, Tensor)>,
}

/// Logit and penultimate-activation nodes of one forward pass.
pub struct ForwardOutput {
    pub logits: Var,
    pub penultimate: Var,
}

/// Parameter leaves registered in one graph, ready for forward passes.
pub struct BoundModel {
    spec: ModelSpec,
    vars: Vec<Var>,
}

fn kaiming_uniform(rng: &mut ChaCha8Rng, fan_in: usize, shape: &[usize]) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(data, shape).expect("shape/data consistent").with_requires_grad(true)
}

impl ModelParams {
    /// Seeded initialization: weights Kaiming-uniform with bound
    /// sqrt(6 / fan_in), biases zero. Bit-reproducible per (spec, seed).
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        match spec {
            ModelSpec::Mlp { input, hidden, classes } => {
                let mut sizes = vec![*input];
                sizes.extend_from_slice(hidden);
                sizes.push(*classes);
                for i in 0..sizes.len() - 1 {
                    let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
                    tensors.push((format!("w{i}"), kaiming_uniform(&mut rng, fan_in, &[fan_in, fan_out])));
                    tensors.push((format!("b{i}"), Tensor::zeros(&[fan_out]).with_requires_grad(true)));
                }
            }
            ModelSpec::ConvNet { in_channels, height, width, classes } => {
                tensors.push((
                    "conv1.w".into(),
                    kaiming_uniform(&mut rng, in_channels * 9, &[32, *in_channels, 3, 3]),
                ));
                tensors.push(("conv1.b".into(), Tensor::zeros(&[32]).with_requires_grad(true)));
                tensors.push(("conv2.w".into(), kaiming_uniform(&mut rng, 32 * 9, &[64, 32, 3, 3])));
                tensors.push(("conv2.b".into(), Tensor::zeros(&[64]).with_requires_grad(true)));
                let flat = 64 * (height / 4) * (width / 4);
                tensors.push(("fc1.w".into(), kaiming_uniform(&mut rng, flat, &[flat, 128])));
                tensors.push(("fc1.b".into(), Tensor::zeros(&[128]).with_requires_grad(true)));
                tensors.push(("fc2.w".into(), kaiming_uniform(&mut rng, 128, &[128, *classes])));
                tensors.push(("fc2.b".into(), Tensor::zeros(&[*classes]).with_requires_grad(true)));
            }
        }
        Ok(Self { spec: spec.clone(), tensors })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn tensors(&self) -> &[(String, Tensor)] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut Vec<(String, Tensor)> {
        &mut self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Deep copy with `requires_grad` cleared on every tensor; no gradient
    /// flows through a forward pass of the copy. Later updates to the
    /// original leave the copy untouched.
    pub fn snapshot(&self) -> Self {
        let tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let mut frozen = t.clone();
                frozen.set_requires_grad(false);
                frozen.clear_grad();
                (name.clone(), frozen)
            })
            .collect();
        Self { spec: self.spec.clone(), tensors }
    }

    /// Registers every parameter as a graph leaf.
    pub fn bind(&self, g: &mut GradGraph) -> BoundModel {
        let vars = self.tensors.iter().map(|(_, t)| g.leaf(t)).collect();
        BoundModel { spec: self.spec.clone(), vars }
    }

    /// One-shot forward for inference: builds a throwaway graph and returns
    /// (logits, penultimate) as plain tensors.
    pub fn infer(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = GradGraph::new();
        let bound = self.snapshot().bind(&mut g);
        let out = bound.forward(&mut g, x)?;
        Ok((g.tensor_of(out.logits), g.tensor_of(out.penultimate)))
    }

    // ---- checkpoint format ----------------------------------------------
    //
    // magic "CSKD" | version u32 | spec-json (u32 len + bytes)
    // | tensor count u32 | per tensor: name (u32 len + bytes), rank u32,
    //   extents u32 each, payload f64 little-endian.

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let spec_json = serde_json::to_string(&self.spec)?;
        buf.extend_from_slice(&(spec_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(spec_json.as_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut cur = Cursor { bytes: &bytes, pos: 0, path };
        let magic = cur.take(4)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(cur.format_err(0, "bad checkpoint magic"));
        }
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(cur.format_err(4, &format!("unsupported checkpoint version {version}")));
        }
        let spec_len = cur.u32()? as usize;
        let spec_bytes = cur.take(spec_len)?;
        let spec: ModelSpec = serde_json::from_slice(spec_bytes)?;
        let count = cur.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| cur.format_err(cur.pos, "tensor name is not utf-8"))?;
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let raw = cur.take(8)?;
                data.push(f64::from_le_bytes(raw.try_into().expect("8 bytes")));
            }
            tensors.push((name, Tensor::new(data, &shape)?.with_requires_grad(true)));
        }
        Ok(Self { spec, tensors })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn format_err(&self, offset: usize, message: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset,
            message: message.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.format_err(self.pos, "truncated checkpoint"));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let raw = self.take(4)?;
        Ok(u32::from_le_bytes(raw.try_into().expect("4 bytes")))
    }
}

impl BoundModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Forward pass on a batch. `x` may arrive flattened (`[b x numel]`) or
    /// in its natural shape; it is reshaped to whatever the architecture
    /// expects. Pure function of (bound parameters, x).
    pub fn forward(&self, g: &mut GradGraph, x: &Tensor) -> Result<ForwardOutput> {
        let numel = self.spec.input_numel();
        if x.shape().is_empty() || x.numel() % x.shape()[0] != 0
            || x.numel() / x.shape()[0] != numel
        {
            return Err(Error::Dimension(format!(
                "input {:?} does not match model input size {} per sample",
                x.shape(),
                numel
            )));
        }
        let batch = x.shape()[0];
        let xv = g.constant(x);
        match &self.spec {
            ModelSpec::Mlp { hidden, classes, .. } => {
                let mut h = g.reshape(xv, &[batch, numel])?;
                for i in 0..hidden.len() {
                    let z = g.matmul(h, self.vars[2 * i])?;
                    let z = g.add_bias(z, self.vars[2 * i + 1])?;
                    h = g.relu(z);
                }
                let penultimate = h;
                let k = hidden.len();
                let z = g.matmul(penultimate, self.vars[2 * k])?;
                let logits = g.add_bias(z, self.vars[2 * k + 1])?;
                debug_assert_eq!(g.shape(logits), &[batch, *classes]);
                Ok(ForwardOutput { logits, penultimate })
            }
            ModelSpec::ConvNet { in_channels, height, width, .. } => {
                let x4 = g.reshape(xv, &[batch, *in_channels, *height, *width])?;
                let c1 = g.conv2d(x4, self.vars[0])?;
                let c1 = g.add_chan_bias(c1, self.vars[1])?;
                let c1 = g.relu(c1);
                let p1 = g.max_pool2(c1)?;
                let c2 = g.conv2d(p1, self.vars[2])?;
                let c2 = g.add_chan_bias(c2, self.vars[3])?;
                let c2 = g.relu(c2);
                let p2 = g.max_pool2(c2)?;
                let flat = 64 * (height / 4) * (width / 4);
                let fl = g.reshape(p2, &[batch, flat])?;
                let z1 = g.matmul(fl, self.vars[4])?;
                let z1 = g.add_bias(z1, self.vars[5])?;
                let penultimate = g.relu(z1);
                let z2 = g.matmul(penultimate, self.vars[6])?;
                let logits = g.add_bias(z2, self.vars[7])?;
                Ok(ForwardOutput { logits, penultimate })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp(input: usize, hidden: &[usize], classes: usize) -> ModelSpec {
        ModelSpec::Mlp { input, hidden: hidden.to_vec(), classes }
    }

    #[test]
    fn init_is_bit_reproducible() {
        let spec = mlp(5, &[7, 3], 4);
        let a = ModelParams::init(&spec, 42).unwrap();
        let b = ModelParams::init(&spec, 42).unwrap();
        for ((n1, t1), (n2, t2)) in a.tensors().iter().zip(b.tensors()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.data(), t2.data());
        }
        let c = ModelParams::init(&spec, 43).unwrap();
        assert_ne!(a.tensors()[0].1.data(), c.tensors()[0].1.data());
    }

    #[test]
    fn mlp_param_count() {
        let spec = mlp(784, &[256, 128], 10);
        let p = ModelParams::init(&spec, 0).unwrap();
        assert_eq!(p.param_count(), 235_146);
    }

    #[test]
    fn biases_start_at_zero() {
        let p = ModelParams::init(&mlp(4, &[8], 3), 7).unwrap();
        for (name, t) in p.tensors() {
            if name.starts_with('b') {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name} not zero");
            }
        }
    }

    #[test]
    fn zero_size_layer_rejected() {
        assert!(ModelParams::init(&mlp(4, &[0], 3), 0).is_err());
        assert!(ModelParams::init(&mlp(0, &[4], 3), 0).is_err());
    }

    #[test]
    fn zero_params_give_uniform_softmax() {
        let spec = mlp(3, &[4], 5);
        let mut p = ModelParams::init(&spec, 0).unwrap();
        for (_, t) in p.tensors_mut().iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::new(vec![0.2, -0.4, 1.0], &[1, 3]).unwrap();
        let (logits, _) = p.infer(&x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_rows_are_independent() {
        let spec = mlp(3, &[6, 4], 2);
        let p = ModelParams::init(&spec, 11).unwrap();
        let row = [0.5, -1.0, 0.25];
        let single = Tensor::new(row.to_vec(), &[1, 3]).unwrap();
        let mut batch_data = vec![0.0; 8 * 3];
        batch_data[3 * 5..3 * 6].copy_from_slice(&row);
        let batch = Tensor::new(batch_data, &[8, 3]).unwrap();

        let (l1, _) = p.infer(&single).unwrap();
        let (l8, _) = p.infer(&batch).unwrap();
        assert_eq!(l1.data(), &l8.data()[5 * 2..6 * 2]);
    }

    #[test]
    fn hand_set_weights_match_pencil_forward() {
        // 2 -> 4 -> 3, x = [1, 0]: logits = relu(x.W0 + b0).W1 + b1
        let spec = mlp(2, &[4], 3);
        let mut p = ModelParams::init(&spec, 0).unwrap();
        let w0 = vec![
            1.0, -1.0, 0.5, 2.0, // row for x0
            0.0, 1.0, -0.5, 1.0, // row for x1
        ];
        let b0 = vec![0.1, 0.0, -0.2, 0.0];
        let w1 = vec![
            1.0, 0.0, -1.0, //
            0.5, 0.5, 0.0, //
            0.0, 1.0, 1.0, //
            -1.0, 0.0, 2.0,
        ];
        let b1 = vec![0.0, 0.25, -0.5];
        let sets = [w0, b0, w1, b1];
        for ((_, t), vals) in p.tensors_mut().iter_mut().zip(sets.iter()) {
            t.data_mut().copy_from_slice(vals);
        }
        // hidden pre = [1.1, -1.0, 0.3, 2.0] -> relu [1.1, 0, 0.3, 2.0]
        // logits = [1.1*1 + 0.3*0 + 2.0*(-1), 1.1*0 + 0.3*1 + 0.25, -1.1 + 0.3 + 4.0 - 0.5]
        let x = Tensor::new(vec![1.0, 0.0], &[1, 2]).unwrap();
        let (logits, penult) = p.infer(&x).unwrap();
        let expect = [1.1 - 2.0, 0.3 + 0.25, -1.1 + 0.3 + 4.0 - 0.5];
        for (got, want) in logits.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert_eq!(penult.data(), &[1.1, 0.0, 0.3, 2.0]);
    }

    #[test]
    fn snapshot_is_frozen_and_detached() {
        let spec = mlp(3, &[5], 2);
        let mut p = ModelParams::init(&spec, 3).unwrap();
        let frozen = p.snapshot();
        assert!(frozen.tensors().iter().all(|(_, t)| !t.requires_grad()));

        let x = Tensor::new(vec![0.1, 0.2, 0.3], &[1, 3]).unwrap();
        let (before, _) = frozen.infer(&x).unwrap();
        let (orig, _) = p.infer(&x).unwrap();
        assert_eq!(before.data(), orig.data(), "frozen forward equals original at snapshot time");

        // mutate the original; frozen output must not move
        p.tensors_mut()[0].1.data_mut()[0] += 10.0;
        let (after, _) = frozen.infer(&x).unwrap();
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn backward_through_frozen_only_leaves_no_grads() {
        let spec = mlp(2, &[3], 2);
        let p = ModelParams::init(&spec, 5).unwrap();
        let frozen = p.snapshot();
        let mut g = GradGraph::new();
        let bound = frozen.bind(&mut g);
        let x = Tensor::new(vec![0.5, -0.5], &[1, 2]).unwrap();
        let out = bound.forward(&mut g, &x).unwrap();
        let root = g.sum_all(out.logits);
        g.backward(root).unwrap();
        for &v in bound.vars() {
            assert!(g.grad(v).is_none());
        }
    }

    #[test]
    fn convnet_shapes_and_checkpoint_roundtrip() {
        let spec = ModelSpec::ConvNet { in_channels: 1, height: 8, width: 8, classes: 3 };
        let p = ModelParams::init(&spec, 9).unwrap();
        let x = Tensor::new((0..64).map(|v| v as f64 / 64.0).collect(), &[1, 1, 8, 8]).unwrap();
        let (logits, penult) = p.infer(&x).unwrap();
        assert_eq!(logits.shape(), &[1, 3]);
        assert_eq!(penult.shape(), &[1, 128]);

        let dir = std::env::temp_dir().join(format!("cskd-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.bin");
        p.save(&path).unwrap();
        let q = ModelParams::load(&path).unwrap();
        assert_eq!(q.spec(), p.spec());
        for ((n1, t1), (n2, t2)) in p.tensors().iter().zip(q.tensors()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert_eq!(t1.data(), t2.data());
        }
        let (l2, _) = q.infer(&x).unwrap();
        assert_eq!(logits.data(), l2.data());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn checkpoint_rejects_bad_magic() {
        let dir = std::env::temp_dir().join(format!("cskd-badmagic-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("junk.bin");
        std::fs::write(&path, b"NOPE0000").unwrap();
        assert!(matches!(ModelParams::load(&path), Err(Error::Format { .. })));
        std::fs::remove_dir_all(&dir).ok();
    }
}
