//! Softmax classifier, its flat parameter vector, and the EMA teacher.

mod checkpoint;

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_VERSION};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LikelihoodBatch;
use crate::numcore::{Bindings, Graph, NodeId, Tensor};

/// Height, width and channel count of image inputs (stored HWC).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl ImageShape {
    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Two stride-2 valid convolutions with ReLU ahead of the dense layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvFrontend {
    pub channels: usize,
    pub kernel: usize,
}

pub const CONV_STRIDE: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_layers: Vec<usize>,
    pub classes: usize,
    #[serde(default)]
    pub dropout_rate: f64,
    #[serde(default)]
    pub use_dropout: bool,
    #[serde(default)]
    pub conv_frontend: Option<ConvFrontend>,
    /// Required when `conv_frontend` is set.
    #[serde(default)]
    pub image: Option<ImageShape>,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

impl ClassifierConfig {
    pub fn mlp(input_dim: usize, classes: usize) -> Self {
        Self {
            input_dim,
            hidden_layers: default_hidden(),
            classes,
            dropout_rate: 0.0,
            use_dropout: false,
            conv_frontend: None,
            image: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.input_dim == 0 || self.hidden_layers.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if let Some(conv) = self.conv_frontend {
            let img = self
                .image
                .ok_or_else(|| Error::Config("conv front-end needs an image shape".into()))?;
            if img.len() != self.input_dim {
                return Err(Error::Config(format!(
                    "image {}x{}x{} does not match input dim {}",
                    img.height, img.width, img.channels, self.input_dim
                )));
            }
            if conv.channels == 0 || conv.kernel == 0 {
                return Err(Error::Config("conv channels and kernel must be positive".into()));
            }
            let (mut h, mut w) = (img.height, img.width);
            for _ in 0..2 {
                if h < conv.kernel || w < conv.kernel {
                    return Err(Error::Config(format!(
                        "kernel {} too large for {h}x{w} feature map",
                        conv.kernel
                    )));
                }
                h = (h - conv.kernel) / CONV_STRIDE + 1;
                w = (w - conv.kernel) / CONV_STRIDE + 1;
            }
        }
        Ok(())
    }

    /// Output spatial size and channels of each conv layer.
    fn conv_geometry(&self) -> Vec<ConvLayer> {
        let (Some(conv), Some(img)) = (self.conv_frontend, self.image) else {
            return vec![];
        };
        let mut layers = Vec::new();
        let (mut h, mut w, mut c) = (img.height, img.width, img.channels);
        for _ in 0..2 {
            let oh = (h - conv.kernel) / CONV_STRIDE + 1;
            let ow = (w - conv.kernel) / CONV_STRIDE + 1;
            layers.push(ConvLayer {
                in_h: h,
                in_w: w,
                in_c: c,
                out_h: oh,
                out_w: ow,
                out_c: conv.channels,
                kernel: conv.kernel,
            });
            (h, w, c) = (oh, ow, conv.channels);
        }
        layers
    }

    /// Parameter layout implied by the configuration.
    pub fn layout(&self) -> Vec<ParamSlice> {
        let mut slices = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>, kind: SliceKind, fan_in: usize| {
            let len: usize = shape.iter().product();
            slices.push(ParamSlice {
                name,
                shape,
                offset,
                kind,
                fan_in,
            });
            offset += len;
        };
        let mut width = self.input_dim;
        for (i, conv) in self.conv_geometry().iter().enumerate() {
            let fan_in = conv.kernel * conv.kernel * conv.in_c;
            push(format!("conv{i}.w"), vec![fan_in, conv.out_c], SliceKind::Weight, fan_in);
            push(format!("conv{i}.b"), vec![conv.out_c], SliceKind::Bias, fan_in);
            width = conv.out_h * conv.out_w * conv.out_c;
        }
        for (i, &h) in self.hidden_layers.iter().enumerate() {
            push(format!("dense{i}.w"), vec![width, h], SliceKind::Weight, width);
            push(format!("dense{i}.b"), vec![h], SliceKind::Bias, width);
            width = h;
        }
        push("out.w".into(), vec![width, self.classes], SliceKind::Weight, width);
        push("out.b".into(), vec![self.classes], SliceKind::Bias, width);
        slices
    }

    /// Width of the penultimate representation.
    pub fn embedding_dim(&self) -> usize {
        if let Some(&h) = self.hidden_layers.last() {
            return h;
        }
        match self.conv_geometry().last() {
            Some(c) => c.out_h * c.out_w * c.out_c,
            None => self.input_dim,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvLayer {
    in_h: usize,
    in_w: usize,
    in_c: usize,
    out_h: usize,
    out_w: usize,
    out_c: usize,
    kernel: usize,
}

impl ConvLayer {
    /// im2col indices for `rows` stacked images.
    fn patch_indices(&self, rows: usize) -> Vec<usize> {
        let k = self.kernel;
        let in_len = self.in_h * self.in_w * self.in_c;
        let mut idx = Vec::with_capacity(rows * self.out_h * self.out_w * k * k * self.in_c);
        for n in 0..rows {
            for oy in 0..self.out_h {
                for ox in 0..self.out_w {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = oy * CONV_STRIDE + ky;
                            let x = ox * CONV_STRIDE + kx;
                            for c in 0..self.in_c {
                                idx.push(n * in_len + (y * self.in_w + x) * self.in_c + c);
                            }
                        }
                    }
                }
            }
        }
        idx
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SliceKind {
    Weight,
    Bias,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlice {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub kind: SliceKind,
    pub fan_in: usize,
}

impl ParamSlice {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat parameter vector with its layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    config: ClassifierConfig,
    layout: Vec<ParamSlice>,
    values: Vec<f64>,
}

impl ParamSet {
    pub fn from_values(config: ClassifierConfig, values: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let expected = layout.last().map_or(0, |s| s.offset + s.len());
        if values.len() != expected {
            return Err(Error::Layout(format!(
                "layout needs {expected} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidValue("parameters must be finite".into()));
        }
        Ok(Self {
            config,
            layout,
            values,
        })
    }

    pub fn zeros(config: ClassifierConfig) -> Result<Self> {
        config.validate()?;
        let n = config.layout().last().map_or(0, |s| s.offset + s.len());
        Self::from_values(config, vec![0.0; n])
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn layout(&self) -> &[ParamSlice] {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.layout
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.range()])
    }

    /// Replaces the values, keeping the layout.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::from_values(self.config.clone(), values)
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.layout == other.layout
    }

    /// Binds each slice as an input named `{prefix}{slice}`.
    pub fn bind(&self, prefix: &str, bindings: &mut Bindings) {
        for s in &self.layout {
            let t = Tensor::new(s.shape.clone(), self.values[s.range()].to_vec())
                .expect("parameter slices are finite and well shaped");
            bindings.insert(format!("{prefix}{}", s.name), t);
        }
    }

    /// Concatenates per-slice gradients back into a flat vector ordered like
    /// the parameters.
    pub fn flatten_grads(&self, prefix: &str, grads: &BTreeMap<String, Tensor>) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.values.len()];
        for s in &self.layout {
            let key = format!("{prefix}{}", s.name);
            let g = grads
                .get(&key)
                .ok_or_else(|| Error::Layout(format!("missing gradient for {key}")))?;
            out[s.range()].copy_from_slice(g.values());
        }
        Ok(out)
    }

    pub fn input_names(&self, prefix: &str) -> Vec<String> {
        self.layout.iter().map(|s| format!("{prefix}{}", s.name)).collect()
    }
}

/// Weights ~ N(0, 1/fan_in), biases zero.
pub fn init_params(config: &ClassifierConfig, seed: u64) -> Result<ParamSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = config.layout();
    let mut values = Vec::with_capacity(layout.last().map_or(0, |s| s.offset + s.len()));
    for s in &layout {
        match s.kind {
            SliceKind::Bias => values.extend(std::iter::repeat_n(0.0, s.len())),
            SliceKind::Weight => {
                let dist = Normal::new(0.0, 1.0 / (s.fan_in as f64).sqrt())
                    .map_err(|e| Error::Config(e.to_string()))?;
                values.extend((0..s.len()).map(|_| dist.sample(&mut rng)));
            }
        }
    }
    ParamSet::from_values(config.clone(), values)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Train,
    Eval,
}

/// Dropout masks for one forward pass: hidden layer `l` draws
/// `rows * width_l` uniforms in row-major order, in layer order.
pub struct DropoutMasks {
    rng: ChaCha8Rng,
    rate: f64,
}

impl DropoutMasks {
    pub fn new(seed: u64, rate: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            rate,
        }
    }

    fn next_mask(&mut self, rows: usize, width: usize) -> Tensor {
        let keep = 1.0 / (1.0 - self.rate);
        let values = (0..rows * width)
            .map(|_| if self.rng.random::<f64>() < self.rate { 0.0 } else { keep })
            .collect();
        Tensor::matrix(rows, width, values).expect("mask values are finite")
    }
}

/// Graph input nodes for one parameter set.
#[derive(Clone, Debug)]
pub struct ParamNodes {
    nodes: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    pub fn declare(g: &mut Graph, params: &ParamSet, prefix: &str) -> Self {
        let nodes = params
            .layout
            .iter()
            .map(|s| (s.name.clone(), g.input(&format!("{prefix}{}", s.name))))
            .collect();
        Self { nodes }
    }

    fn get(&self, name: &str) -> NodeId {
        self.nodes[name]
    }
}

/// Nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    /// Penultimate activations (before the output layer).
    pub embedding: NodeId,
    pub logits: NodeId,
    pub probs: NodeId,
}

/// Adds a forward pass over `rows` inputs. Dropout is applied after each
/// hidden dense layer when `dropout` is given.
pub fn build_forward(
    g: &mut Graph,
    config: &ClassifierConfig,
    params: &ParamNodes,
    x: NodeId,
    rows: usize,
    mut dropout: Option<&mut DropoutMasks>,
) -> ForwardNodes {
    let mut h = x;
    for (i, conv) in config.conv_geometry().iter().enumerate() {
        let patch = conv.kernel * conv.kernel * conv.in_c;
        let positions = rows * conv.out_h * conv.out_w;
        let cols = g.gather(h, conv.patch_indices(rows), vec![positions, patch]);
        let z = g.matmul(cols, params.get(&format!("conv{i}.w")));
        let z = g.add(z, params.get(&format!("conv{i}.b")));
        let a = g.relu(z);
        h = g.reshape(a, vec![rows, conv.out_h * conv.out_w * conv.out_c]);
    }
    for (i, &width) in config.hidden_layers.iter().enumerate() {
        let z = g.matmul(h, params.get(&format!("dense{i}.w")));
        let z = g.add(z, params.get(&format!("dense{i}.b")));
        h = g.relu(z);
        if let Some(masks) = dropout.as_deref_mut() {
            let m = g.constant(masks.next_mask(rows, width));
            h = g.mul(h, m);
        }
    }
    let embedding = h;
    let z = g.matmul(h, params.get("out.w"));
    let logits = g.add(z, params.get("out.b"));
    let probs = g.softmax(logits);
    ForwardNodes {
        embedding,
        logits,
        probs,
    }
}

fn check_inputs(config: &ClassifierConfig, inputs: &Tensor) -> Result<usize> {
    if inputs.shape().len() != 2 || inputs.shape()[1] != config.input_dim {
        return Err(Error::Shape(format!(
            "inputs {:?} do not match input dim {}",
            inputs.shape(),
            config.input_dim
        )));
    }
    Ok(inputs.shape()[0])
}

fn run_forward(
    params: &ParamSet,
    inputs: &Tensor,
    mode: Mode,
    seed: u64,
) -> Result<(Tensor, Tensor)> {
    let rows = check_inputs(&params.config, inputs)?;
    let mut g = Graph::new();
    let p = ParamNodes::declare(&mut g, params, "");
    let x = g.input("x");
    let mut masks = DropoutMasks::new(seed, params.config.dropout_rate);
    let use_dropout = mode == Mode::Train && params.config.use_dropout;
    let fwd = build_forward(
        &mut g,
        &params.config,
        &p,
        x,
        rows,
        use_dropout.then_some(&mut masks),
    );
    let mut b = Bindings::new();
    params.bind("", &mut b);
    b.insert("x".into(), inputs.clone());
    let mut out = g.evaluate_nodes(&b, &[fwd.probs, fwd.embedding])?;
    let emb = out.pop().unwrap();
    let probs = out.pop().unwrap();
    Ok((probs, emb))
}

/// Class probabilities for each input row. `seed` only matters in train mode
/// with dropout enabled.
pub fn predict(params: &ParamSet, inputs: &Tensor, mode: Mode, seed: u64) -> Result<LikelihoodBatch> {
    let (probs, _) = run_forward(params, inputs, mode, seed)?;
    LikelihoodBatch::from_tensor(&probs)
}

/// Eval-mode penultimate activations.
pub fn penultimate(params: &ParamSet, inputs: &Tensor) -> Result<Tensor> {
    Ok(run_forward(params, inputs, Mode::Eval, 0)?.1)
}

/// Shadow parameters updated as `(1 - mu) * student + mu * teacher`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmaTeacher {
    params: ParamSet,
    mu: f64,
}

impl EmaTeacher {
    pub fn new(params: ParamSet, mu: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&mu) {
            return Err(Error::Config(format!("EMA factor must lie in [0, 1], got {mu}")));
        }
        Ok(Self { params, mu })
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    /// In-place form of [`ema_update`].
    pub fn update(&mut self, student: &ParamSet) -> Result<()> {
        if !self.params.same_layout(student) {
            return Err(Error::Layout("teacher and student layouts differ".into()));
        }
        let mu = self.mu;
        for (t, s) in self.params.values.iter_mut().zip(&student.values) {
            *t = (1.0 - mu) * s + mu * *t;
        }
        Ok(())
    }
}

pub fn ema_update(teacher: &EmaTeacher, student: &ParamSet) -> Result<EmaTeacher> {
    let mut next = teacher.clone();
    next.update(student)?;
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    fn small_config() -> ClassifierConfig {
        ClassifierConfig {
            input_dim: 3,
            hidden_layers: vec![5, 4],
            classes: 3,
            dropout_rate: 0.5,
            use_dropout: true,
            conv_frontend: None,
            image: None,
        }
    }

    fn random_inputs(seed: u64, rows: usize, dim: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(rows, dim, (0..rows * dim).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let cfg = ClassifierConfig::mlp(4, 3);
        let a = init_params(&cfg, 9).unwrap();
        let b = init_params(&cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(&cfg, 10).unwrap());
        for s in a.layout() {
            if s.kind == SliceKind::Bias {
                assert!(a.values()[s.range()].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn init_weight_scale_follows_fan_in() {
        let cfg = ClassifierConfig {
            hidden_layers: vec![1000, 10],
            ..ClassifierConfig::mlp(8, 2)
        };
        let p = init_params(&cfg, 3).unwrap();
        let w = p.slice("dense1.w").unwrap();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64).sqrt();
        let target = 1.0 / 1000f64.sqrt();
        assert!((std - target).abs() < 0.2 * target, "std {std} vs {target}");
    }

    #[test]
    fn zero_network_predicts_uniform() {
        let p = ParamSet::zeros(ClassifierConfig::mlp(3, 4)).unwrap();
        let z = predict(&p, &random_inputs(1, 5, 3), Mode::Eval, 0).unwrap();
        assert!(z.values().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let cfg = small_config();
        let p = init_params(&cfg, 2).unwrap();
        let x = random_inputs(2, 6, 3);
        let a = predict(&p, &x, Mode::Eval, 1).unwrap();
        let b = predict(&p, &x, Mode::Eval, 99).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = init_params(&small_config(), 2).unwrap();
        assert!(matches!(
            predict(&p, &random_inputs(0, 2, 4), Mode::Eval, 0),
            Err(Error::Shape(_))
        ));
    }

    /// Replays the dropout masks by hand and recomputes the forward pass
    /// without the graph.
    #[test]
    fn train_mode_dropout_matches_replayed_masks() {
        let cfg = small_config();
        let p = init_params(&cfg, 4).unwrap();
        let rows = 7;
        let x = random_inputs(5, rows, 3);
        let got = predict(&p, &x, Mode::Train, 1234).unwrap();
        assert_eq!(got, predict(&p, &x, Mode::Train, 1234).unwrap());
        assert_ne!(got, predict(&p, &x, Mode::Eval, 1234).unwrap());

        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut h: Vec<Vec<f64>> = (0..rows).map(|r| x.row(r).to_vec()).collect();
        for (li, &width) in cfg.hidden_layers.iter().enumerate() {
            let w = p.slice(&format!("dense{li}.w")).unwrap();
            let b = p.slice(&format!("dense{li}.b")).unwrap();
            let inw = h[0].len();
            let mut next = vec![vec![0.0; width]; rows];
            for r in 0..rows {
                for j in 0..width {
                    let mut acc = 0.0;
                    for k in 0..inw {
                        acc += h[r][k] * w[k * width + j];
                    }
                    next[r][j] = (acc + b[j]).max(0.0);
                }
            }
            for row in next.iter_mut() {
                for v in row.iter_mut() {
                    let drop = rng.random::<f64>() < 0.5;
                    *v = if drop { 0.0 } else { *v * 2.0 };
                }
            }
            h = next;
        }
        let w = p.slice("out.w").unwrap();
        for r in 0..rows {
            let logits: Vec<f64> = (0..3)
                .map(|j| (0..4).map(|k| h[r][k] * w[k * 3 + j]).sum::<f64>())
                .collect();
            let m = logits.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            for j in 0..3 {
                assert!((got.row(r)[j] - e[j] / s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_frontend_runs_and_matches_direct_convolution() {
        let img = ImageShape {
            height: 7,
            width: 7,
            channels: 2,
        };
        let cfg = ClassifierConfig {
            input_dim: img.len(),
            hidden_layers: vec![],
            classes: 3,
            dropout_rate: 0.0,
            use_dropout: false,
            conv_frontend: Some(ConvFrontend {
                channels: 3,
                kernel: 3,
            }),
            image: Some(img),
        };
        cfg.validate().unwrap();
        let p = init_params(&cfg, 8).unwrap();
        let x = random_inputs(9, 2, img.len());
        let emb = penultimate(&p, &x).unwrap();
        // 7x7 -> 3x3 -> 1x1, 3 channels
        assert_eq!(emb.shape(), &[2, 3]);

        let conv = |input: &[f64], h: usize, w: usize, c: usize, wt: &[f64], b: &[f64]| {
            let (oh, ow) = ((h - 3) / 2 + 1, (w - 3) / 2 + 1);
            let mut out = vec![0.0; oh * ow * 3];
            for oy in 0..oh {
                for ox in 0..ow {
                    for f in 0..3 {
                        let mut acc = b[f];
                        for ky in 0..3 {
                            for kx in 0..3 {
                                for ci in 0..c {
                                    let iv = input[((oy * 2 + ky) * w + ox * 2 + kx) * c + ci];
                                    acc += iv * wt[((ky * 3 + kx) * c + ci) * 3 + f];
                                }
                            }
                        }
                        out[(oy * ow + ox) * 3 + f] = acc.max(0.0);
                    }
                }
            }
            out
        };
        for r in 0..2 {
            let a = conv(x.row(r), 7, 7, 2, p.slice("conv0.w").unwrap(), p.slice("conv0.b").unwrap());
            let b = conv(&a, 3, 3, 3, p.slice("conv1.w").unwrap(), p.slice("conv1.b").unwrap());
            for (u, v) in b.iter().zip(emb.row(r)) {
                assert!((u - v).abs() < 1e-12);
            }
        }
        let z = predict(&p, &x, Mode::Eval, 0).unwrap();
        assert_eq!(z.rows(), 2);
    }

    #[test]
    fn config_validation() {
        let mut c = ClassifierConfig::mlp(2, 1);
        assert!(c.validate().is_err());
        c.classes = 2;
        c.dropout_rate = 1.0;
        assert!(c.validate().is_err());
        c.dropout_rate = 0.0;
        c.conv_frontend = Some(ConvFrontend { channels: 2, kernel: 3 });
        assert!(c.validate().is_err());
    }

    #[test]
    fn ema_boundaries() {
        let cfg = ClassifierConfig::mlp(2, 2);
        let s = init_params(&cfg, 1).unwrap();
        let t0 = init_params(&cfg, 2).unwrap();
        let t = ema_update(&EmaTeacher::new(t0.clone(), 0.0).unwrap(), &s).unwrap();
        assert_eq!(t.params(), &s);
        let t = ema_update(&EmaTeacher::new(t0.clone(), 1.0).unwrap(), &s).unwrap();
        assert_eq!(t.params(), &t0);
        assert!(EmaTeacher::new(t0, 1.5).is_err());
        let other = init_params(&ClassifierConfig::mlp(3, 2), 1).unwrap();
        assert!(matches!(
            ema_update(&EmaTeacher::new(s, 0.5).unwrap(), &other),
            Err(Error::Layout(_))
        ));
    }

    fn dist(a: &ParamSet, b: &ParamSet) -> f64 {
        a.values()
            .iter()
            .zip(b.values())
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn ema_contracts_geometrically() {
        let cfg = ClassifierConfig::mlp(2, 2);
        let s = init_params(&cfg, 1).unwrap();
        let t0 = init_params(&cfg, 2).unwrap();
        let d0 = dist(&t0, &s);
        for mu in [0.5, 0.9, 0.99] {
            let mut t = EmaTeacher::new(t0.clone(), mu).unwrap();
            for k in 1..=50 {
                t.update(&s).unwrap();
                let expected = mu.powi(k) * d0;
                assert!((dist(t.params(), &s) - expected).abs() < 1e-10);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn predictions_are_distributions(seed in any::<u64>(), scale in 0.1f64..20.0) {
            let cfg = ClassifierConfig { hidden_layers: vec![6], ..small_config() };
            let p = init_params(&cfg, seed).unwrap();
            let p = p.with_values(p.values().iter().map(|v| v * scale).collect()).unwrap();
            let z = predict(&p, &random_inputs(seed, 4, 3), Mode::Train, seed).unwrap();
            for r in 0..z.rows() {
                prop_assert!(z.row(r).iter().all(|&v| v >= 0.0));
                prop_assert!((z.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn ema_is_affine(mu in 0.0f64..=1.0, a in 0.0f64..1.0) {
            let cfg = ClassifierConfig { hidden_layers: vec![2], ..ClassifierConfig::mlp(2, 2) };
            let s1 = init_params(&cfg, 1).unwrap();
            let s2 = init_params(&cfg, 2).unwrap();
            let t1 = init_params(&cfg, 3).unwrap();
            let t2 = init_params(&cfg, 4).unwrap();
            let mix = |x: &ParamSet, y: &ParamSet| {
                x.with_values(x.values().iter().zip(y.values()).map(|(u, v)| a * u + (1.0 - a) * v).collect()).unwrap()
            };
            let lhs = ema_update(&EmaTeacher::new(mix(&t1, &t2), mu).unwrap(), &mix(&s1, &s2)).unwrap();
            let r1 = ema_update(&EmaTeacher::new(t1.clone(), mu).unwrap(), &s1).unwrap();
            let r2 = ema_update(&EmaTeacher::new(t2.clone(), mu).unwrap(), &s2).unwrap();
            let rhs = mix(r1.params(), r2.params());
            prop_assert!(dist(lhs.params(), &rhs) < 1e-12);
        }
    }
}
