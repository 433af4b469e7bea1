//! The VGG-style embedding network: 3x3 conv blocks with ReLU and 2x2 max pooling
//! between blocks, global average pooling, a 1024-unit hidden layer with dropout,
//! and an L2-normalized embedding layer. A classification head sits on top.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::layers::*;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    /// `(conv layers, channels)` per block. Max pooling follows every block but the last.
    pub blocks: Vec<(usize, usize)>,
    pub in_channels: usize,
    pub hidden_dim: usize,
    pub dropout_p: f64,
    pub embedding_dim: usize,
    pub num_classes: usize,
}

impl NetworkConfig {
    /// The modified VGG16 backbone.
    pub fn vgg16m(num_classes: usize) -> Self {
        Self {
            blocks: vec![(2, 64), (2, 128), (2, 256), (3, 512), (3, 512)],
            ..Self::tiny(num_classes)
        }
    }

    /// The same five-block layout with one conv per block and 1/16 of the
    /// channels, for tests and desk-scale experiments.
    pub fn tiny(num_classes: usize) -> Self {
        Self {
            blocks: vec![(1, 4), (1, 8), (1, 16), (1, 32), (1, 64)],
            in_channels: 3,
            hidden_dim: 1024,
            dropout_p: 0.3,
            embedding_dim: 256,
            num_classes,
        }
    }

    pub fn preset(name: &str, num_classes: usize) -> Result<Self> {
        match name {
            "vgg16m" => Ok(Self::vgg16m(num_classes)),
            "tiny" => Ok(Self::tiny(num_classes)),
            other => Err(Error::Config(format!("unknown network preset {other:?} (expected vgg16m or tiny)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() || self.blocks.iter().any(|&(n, c)| n == 0 || c == 0) {
            return Err(Error::Config("every conv block needs at least one layer and one channel".into()));
        }
        if self.in_channels == 0 || self.hidden_dim == 0 || self.embedding_dim == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p must be in [0, 1), got {}", self.dropout_p)));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        Ok(())
    }

    /// Spatial downsampling factor applied before global pooling.
    pub fn downsample(&self) -> usize {
        1 << (self.blocks.len() - 1)
    }

    pub fn final_channels(&self) -> usize {
        self.blocks.last().map(|b| b.1).unwrap_or(0)
    }

    /// Names and shapes of all parameters, in a fixed order.
    pub fn param_shapes(&self, head: HeadKind) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = self.in_channels;
        for (b, &(count, c_out)) in self.blocks.iter().enumerate() {
            for l in 0..count {
                out.push((format!("block{b}.conv{l}.weight"), vec![c_out, c_in, 3, 3]));
                out.push((format!("block{b}.conv{l}.bias"), vec![c_out]));
                c_in = c_out;
            }
        }
        out.push(("fc1.weight".into(), vec![self.hidden_dim, c_in]));
        out.push(("fc1.bias".into(), vec![self.hidden_dim]));
        out.push(("fc2.weight".into(), vec![self.embedding_dim, self.hidden_dim]));
        out.push(("fc2.bias".into(), vec![self.embedding_dim]));
        out.push(("head.weight".into(), vec![self.num_classes, self.embedding_dim]));
        if head == HeadKind::Dense {
            out.push(("head.bias".into(), vec![self.num_classes]));
        }
        out
    }

    pub fn param_count(&self, head: HeadKind) -> usize {
        self.param_shapes(head).iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Classification head on top of the embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Affine layer with bias, for plain softmax cross-entropy.
    Dense,
    /// Unit-norm class weight rows producing cosine logits (no bias).
    Cosine,
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadKind::Dense => "dense",
            HeadKind::Cosine => "cosine",
        })
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(HeadKind::Dense),
            "cosine" => Ok(HeadKind::Cosine),
            other => Err(Error::Parse(format!("unknown head kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active with masks drawn from this seed.
    Train { dropout_seed: u64 },
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Conv { weight: usize, bias: usize },
    Relu,
    Pool,
    Gap,
    Dense { weight: usize, bias: usize },
    Dropout,
    L2,
}

enum Saved<T: Scalar> {
    Input(Tensor<T>),
    Output(Tensor<T>),
    Pool { shape: Vec<usize>, argmax: Vec<usize> },
    Shape(Vec<usize>),
    Mask(Option<Vec<T>>),
    Normalized { output: Tensor<T>, norms: Vec<T> },
}

/// Activations retained by a training forward pass.
pub struct ForwardCache<T: Scalar> {
    saved: Vec<Saved<T>>,
    pub embeddings: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar = f32> {
    config: NetworkConfig,
    head: HeadKind,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> Model<T> {
    /// He-uniform weights, zero biases; cosine heads get random unit rows.
    pub fn init(config: NetworkConfig, head: HeadKind, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (name, shape) in config.param_shapes(head) {
            let n: usize = shape.iter().product();
            let values: Vec<f64> = if name.ends_with(".bias") {
                vec![0.0; n]
            } else if name == "head.weight" && head == HeadKind::Cosine {
                let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                normalize_rows(&mut v, shape[1]);
                v
            } else {
                let fan_in: usize = shape[1..].iter().product();
                let limit = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| rng.random_range(-limit..limit)).collect()
            };
            names.push(name);
            params.push(Tensor::from_f64(&shape, &values)?);
        }
        Ok(Self { config, head, names, params })
    }

    pub fn from_parts(config: NetworkConfig, head: HeadKind, named: Vec<(String, Tensor<T>)>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes(head);
        if named.len() != expected.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, got {}",
                expected.len(),
                named.len()
            )));
        }
        let mut names = Vec::new();
        let mut params = Vec::new();
        for ((name, t), (want_name, want_shape)) in named.into_iter().zip(expected) {
            if name != want_name || t.shape() != want_shape.as_slice() {
                return Err(Error::Shape(format!(
                    "parameter {name} {:?} does not match expected {want_name} {want_shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            params.push(t);
        }
        Ok(Self { config, head, names, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn head(&self) -> HeadKind {
        self.head
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            head: self.head,
            names: self.names.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
        }
    }

    /// Rescales every class-weight row of a cosine head to unit length.
    pub fn renormalize_head(&mut self) {
        if self.head != HeadKind::Cosine {
            return;
        }
        let d = self.config.embedding_dim;
        let idx = self.param_index("head.weight").expect("head weight exists");
        for row in self.params[idx].data_mut().chunks_exact_mut(d) {
            let norm = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
            if norm > 0.0 {
                let inv = T::from_f64_lossy(1.0 / norm);
                row.iter_mut().for_each(|v| *v = *v * inv);
            }
        }
    }

    fn ops(&self) -> Vec<Op> {
        let mut ops = Vec::new();
        let mut p = 0;
        let last = self.config.blocks.len() - 1;
        for (b, &(count, _)) in self.config.blocks.iter().enumerate() {
            for _ in 0..count {
                ops.push(Op::Conv { weight: p, bias: p + 1 });
                ops.push(Op::Relu);
                p += 2;
            }
            if b != last {
                ops.push(Op::Pool);
            }
        }
        ops.push(Op::Gap);
        ops.push(Op::Dense { weight: p, bias: p + 1 });
        ops.push(Op::Relu);
        ops.push(Op::Dropout);
        ops.push(Op::Dense { weight: p + 2, bias: p + 3 });
        ops.push(Op::Relu);
        ops.push(Op::L2);
        ops
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "network expects {} input channels, got {c}",
                self.config.in_channels
            )));
        }
        let d = self.config.downsample();
        if h % d != 0 || w % d != 0 {
            return Err(Error::Shape(format!("input {h}x{w} is not divisible by the pooling factor {d}")));
        }
        Ok(())
    }

    fn run(&self, x: &Tensor<T>, mode: Mode, keep: bool) -> Result<ForwardCache<T>> {
        self.check_input(x)?;
        let mut saved = Vec::new();
        let mut cur = x.clone();
        for op in self.ops() {
            let (next, record) = match op {
                Op::Conv { weight, bias } => {
                    let y = conv2d_forward(&cur, &self.params[weight], &self.params[bias])?;
                    (y, Saved::Input(cur))
                }
                Op::Relu => {
                    let y = relu_forward(&cur);
                    let rec = if keep { Saved::Output(y.clone()) } else { Saved::Shape(vec![]) };
                    (y, rec)
                }
                Op::Pool => {
                    let shape = cur.shape().to_vec();
                    let p = maxpool2_forward(&cur)?;
                    (p.output, Saved::Pool { shape, argmax: p.argmax })
                }
                Op::Gap => {
                    let shape = cur.shape().to_vec();
                    (global_avg_pool(&cur)?, Saved::Shape(shape))
                }
                Op::Dense { weight, bias } => {
                    let y = dense_forward(&cur, &self.params[weight], &self.params[bias])?;
                    (y, Saved::Input(cur))
                }
                Op::Dropout => {
                    let (train, seed) = match mode {
                        Mode::Eval => (false, 0),
                        Mode::Train { dropout_seed } => (true, dropout_seed),
                    };
                    let (y, mask) = dropout(&cur, self.config.dropout_p, train, seed)?;
                    (y, Saved::Mask(mask))
                }
                Op::L2 => {
                    let (y, norms) = l2_normalize(&cur)?;
                    let rec = Saved::Normalized { output: y.clone(), norms };
                    (y, rec)
                }
            };
            if keep {
                saved.push(record);
            }
            cur = next;
        }
        Ok(ForwardCache { saved, embeddings: cur })
    }

    /// Unit-norm embeddings `[N, embedding_dim]` for a batch `[N, C, H, W]` in
    /// evaluation mode. Any spatial size divisible by the pooling factor works.
    pub fn forward_embed(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(x, Mode::Eval, false)?.embeddings)
    }

    /// Forward pass retaining what [`Model::backward`] needs.
    pub fn forward_train(&self, x: &Tensor<T>, mode: Mode) -> Result<ForwardCache<T>> {
        self.run(x, mode, true)
    }

    /// Back-propagates `grad_embeddings` and returns gradients for every
    /// parameter in [`Model::params`] order. The head parameters receive zeros;
    /// their gradients come from the loss.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_embeddings: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let ops = self.ops();
        if cache.saved.len() != ops.len() {
            return Err(Error::State("forward cache was not recorded for training".into()));
        }
        let mut grads: Vec<Tensor<T>> = self.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let mut g = grad_embeddings.clone();
        for (i, (op, saved)) in ops.iter().zip(&cache.saved).enumerate().rev() {
            g = match (op, saved) {
                (Op::Conv { weight, bias }, Saved::Input(x)) => {
                    let cg = conv2d_backward_with(x, &self.params[*weight], &g, i > 0)?;
                    grads[*weight] = cg.grad_weight;
                    grads[*bias] = cg.grad_bias;
                    match cg.grad_x {
                        Some(gx) => gx,
                        None => break,
                    }
                }
                (Op::Relu, Saved::Output(y)) => relu_backward(y, &g)?,
                (Op::Pool, Saved::Pool { shape, argmax }) => maxpool2_backward(shape, argmax, &g)?,
                (Op::Gap, Saved::Shape(shape)) => global_avg_pool_backward(shape, &g)?,
                (Op::Dense { weight, bias }, Saved::Input(x)) => {
                    let dg = dense_backward(x, &self.params[*weight], &g)?;
                    grads[*weight] = dg.grad_weight;
                    grads[*bias] = dg.grad_bias;
                    dg.grad_x
                }
                (Op::Dropout, Saved::Mask(mask)) => dropout_backward(mask.as_deref(), &g),
                (Op::L2, Saved::Normalized { output, norms }) => l2_normalize_backward(output, norms, &g)?,
                _ => return Err(Error::State("forward cache does not match the network".into())),
            };
        }
        Ok(grads)
    }

    /// Margin-free class scores for embeddings `[N, D]`: `E W^T + b` for a dense
    /// head, the cosines `E W^T` for a cosine head.
    pub fn head_scores(&self, embeddings: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, d) = embeddings.dims2()?;
        if d != self.config.embedding_dim {
            return Err(Error::Shape(format!(
                "embeddings have dim {d}, the head expects {}",
                self.config.embedding_dim
            )));
        }
        let k = self.config.num_classes;
        let w = self.param("head.weight").expect("head weight exists");
        let mut out = Tensor::zeros(&[n, k]);
        T::gemm(n, d, k, embeddings.data(), false, w.data(), true, out.data_mut(), false);
        if let Some(b) = self.param("head.bias") {
            for row in out.data_mut().chunks_exact_mut(k) {
                row.iter_mut().zip(b.data()).for_each(|(v, &bj)| *v = *v + bj);
            }
        }
        Ok(out)
    }
}

pub(crate) fn normalize_rows(v: &mut [f64], d: usize) {
    for row in v.chunks_exact_mut(d) {
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|x| *x /= norm);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vgg16m_parameter_count_is_frozen() {
        // Closed form: conv layers (in*out*9 + out) for
        // 3-64, 64-64, 64-128, 128-128, 128-256, 256-256, 256-512, 512-512 x5,
        // then 512-1024, 1024-256 dense layers and a 256-1251 head.
        let cfg = NetworkConfig::vgg16m(1251);
        assert_eq!(cfg.param_count(HeadKind::Dense), 15_233_827);
        assert_eq!(cfg.param_count(HeadKind::Cosine), 15_232_576);
        let backbone = cfg.param_count(HeadKind::Cosine) - 1251 * 256;
        assert_eq!(backbone, 14_912_320);
    }

    #[test]
    fn tiny_forward_shapes_and_norms() {
        let model = Model::<f64>::init(NetworkConfig::tiny(4), HeadKind::Cosine, 3).unwrap();
        let x = Tensor::from_f64(&[2, 3, 32, 16], &(0..2 * 3 * 32 * 16).map(|i| ((i * 37) % 11) as f64 - 5.0).collect::<Vec<_>>()).unwrap();
        let e = model.forward_embed(&x).unwrap();
        assert_eq!(e.shape(), &[2, 256]);
        for r in 0..2 {
            let n: f64 = e.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn init_is_deterministic_and_precision_independent() {
        let a = Model::<f64>::init(NetworkConfig::tiny(3), HeadKind::Dense, 11).unwrap();
        let b = Model::<f64>::init(NetworkConfig::tiny(3), HeadKind::Dense, 11).unwrap();
        assert_eq!(a, b);
        let c = Model::<f32>::init(NetworkConfig::tiny(3), HeadKind::Dense, 11).unwrap();
        assert_eq!(a.cast::<f32>(), c);
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = Model::<f32>::init(NetworkConfig::tiny(2), HeadKind::Dense, 0).unwrap();
        assert!(model.forward_embed(&Tensor::zeros(&[1, 1, 8, 8])).is_err());
        assert!(model.forward_embed(&Tensor::zeros(&[1, 3, 7, 8])).is_err());
        assert!(NetworkConfig::preset("resnet", 2).is_err());
        let mut cfg = NetworkConfig::tiny(2);
        cfg.dropout_p = 1.0;
        assert!(cfg.validate().is_err());
    }
}
