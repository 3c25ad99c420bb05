//! Small MLP/CNN classifiers and their checkpoint file format.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{self, AutodiffError, Graph, Objective, ParamLayout, ParamVector, Var};
use crate::data::Sample;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("cannot evaluate on an empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic: expected {expected:?}, found {actual:?}")]
    BadMagic { expected: [u8; 4], actual: [u8; 4] },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint holds {actual} parameters, spec needs {expected}")]
    ParamCount { expected: usize, actual: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Softplus,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Avg,
    Max,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlock {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    Mlp {
        hidden: Vec<usize>,
    },
    /// Conv blocks, each followed by the activation and a 2×2 pool, then an
    /// optional hidden dense layer before the logits.
    Cnn {
        blocks: Vec<ConvBlock>,
        pooling: Pooling,
        head: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub activation: Activation,
    /// `[channels, height, width]`.
    pub input_shape: [usize; 3],
    pub classes: usize,
}

impl ModelSpec {
    /// Two conv blocks (16 and 32 channels, 3×3, stride 1, 2×2 average
    /// pooling), a 128-wide tanh head.
    pub fn default_cnn(input_shape: [usize; 3], classes: usize) -> Self {
        Self {
            architecture: Architecture::Cnn {
                blocks: vec![
                    ConvBlock { channels: 16, kernel: 3, stride: 1 },
                    ConvBlock { channels: 32, kernel: 3, stride: 1 },
                ],
                pooling: Pooling::Avg,
                head: Some(128),
            },
            activation: Activation::Tanh,
            input_shape,
            classes,
        }
    }

    pub fn mlp(input_shape: [usize; 3], hidden: Vec<usize>, activation: Activation, classes: usize) -> Self {
        Self {
            architecture: Architecture::Mlp { hidden },
            activation,
            input_shape,
            classes,
        }
    }
}

const POOL: usize = 2;

#[derive(Debug, Clone)]
enum Layer {
    Conv { name: String, w: usize, b: usize, stride: usize },
    Pool(Pooling),
    Flatten(usize),
    Dense { name: String, w: usize, b: usize },
    Activation,
}

/// A validated [`ModelSpec`] with its parameter layout and layer plan.
#[derive(Debug)]
pub struct Model {
    spec: ModelSpec,
    layout: ParamLayout,
    layout_arc: Arc<ParamLayout>,
    plan: Vec<Layer>,
    fans: Vec<(usize, usize)>,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self, ModelError> {
        let bad = |m: String| Err(ModelError::InvalidSpec(m));
        if spec.classes < 2 {
            return bad(format!("class count must be at least 2, got {}", spec.classes));
        }
        let [mut c, mut h, mut w] = spec.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return bad(format!("input shape {:?} has a zero dimension", spec.input_shape));
        }
        let mut shapes: Vec<(String, Vec<usize>)> = Vec::new();
        let mut fans = Vec::new();
        let mut plan = Vec::new();
        let mut dense_in = c * h * w;
        let mut hidden: Vec<usize> = Vec::new();
        match &spec.architecture {
            Architecture::Mlp { hidden: widths } => {
                plan.push(Layer::Flatten(dense_in));
                hidden.extend(widths);
            }
            Architecture::Cnn { blocks, pooling, head } => {
                for (i, blk) in blocks.iter().enumerate() {
                    let name = format!("conv{}", i + 1);
                    if blk.channels == 0 || blk.kernel == 0 || blk.stride == 0 {
                        return bad(format!("{name}: channels, kernel and stride must be positive"));
                    }
                    if blk.kernel > h || blk.kernel > w {
                        return bad(format!("{name}: kernel {} exceeds feature map {h}×{w}", blk.kernel));
                    }
                    let w_idx = shapes.len();
                    shapes.push((format!("{name}.weight"), vec![blk.channels, c, blk.kernel, blk.kernel]));
                    shapes.push((format!("{name}.bias"), vec![blk.channels]));
                    fans.push((c * blk.kernel * blk.kernel, blk.channels * blk.kernel * blk.kernel));
                    fans.push((0, 0));
                    plan.push(Layer::Conv {
                        name,
                        w: w_idx,
                        b: w_idx + 1,
                        stride: blk.stride,
                    });
                    plan.push(Layer::Activation);
                    c = blk.channels;
                    h = (h - blk.kernel) / blk.stride + 1;
                    w = (w - blk.kernel) / blk.stride + 1;
                    if *pooling != Pooling::None {
                        if h < POOL || w < POOL {
                            return bad(format!("conv{}: {h}×{w} feature map too small to pool", i + 1));
                        }
                        plan.push(Layer::Pool(*pooling));
                        h /= POOL;
                        w /= POOL;
                    }
                }
                dense_in = c * h * w;
                plan.push(Layer::Flatten(dense_in));
                hidden.extend(head.iter());
            }
        }
        let mut width_in = dense_in;
        let n_hidden = hidden.len();
        for (i, &width) in hidden.iter().chain(std::iter::once(&spec.classes)).enumerate() {
            if width == 0 {
                return bad("dense widths must be positive".into());
            }
            let name = if i == n_hidden { "out".to_string() } else { format!("fc{}", i + 1) };
            let w_idx = shapes.len();
            shapes.push((format!("{name}.weight"), vec![width, width_in]));
            shapes.push((format!("{name}.bias"), vec![width]));
            fans.push((width_in, width));
            fans.push((0, 0));
            plan.push(Layer::Dense { name, w: w_idx, b: w_idx + 1 });
            if i < n_hidden {
                plan.push(Layer::Activation);
            }
            width_in = width;
        }
        let layout = ParamLayout::from_shapes(shapes);
        Ok(Self {
            spec,
            layout_arc: Arc::new(layout.clone()),
            layout,
            plan,
            fans,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout_arc(&self) -> &Arc<ParamLayout> {
        &self.layout_arc
    }

    pub fn param_count(&self) -> usize {
        self.layout.len()
    }

    fn activate(&self, g: &mut Graph, x: Var) -> autodiff::Result<Var> {
        match self.spec.activation {
            Activation::Tanh => g.tanh(x),
            Activation::Softplus => g.softplus(x),
            Activation::Relu => g.relu(x),
        }
    }

    /// Records the forward pass and returns the logits node.
    pub fn build_logits(&self, g: &mut Graph, params: &[Var], input: Var) -> autodiff::Result<Var> {
        let mut x = input;
        for layer in &self.plan {
            x = match layer {
                Layer::Conv { name, w, b, stride } => {
                    g.set_layer(name);
                    let y = g.conv2d(x, params[*w], *stride)?;
                    let (h, wd) = (g.shape(y)[1], g.shape(y)[2]);
                    let bias = g.broadcast_channel(params[*b], h, wd)?;
                    g.add(y, bias)?
                }
                Layer::Pool(Pooling::Avg) => g.avg_pool(x, POOL)?,
                Layer::Pool(Pooling::Max) => g.max_pool(x, POOL)?,
                Layer::Pool(Pooling::None) => x,
                Layer::Flatten(n) => g.reshape(x, &[*n])?,
                Layer::Dense { name, w, b } => {
                    g.set_layer(name);
                    let y = g.matvec(params[*w], x)?;
                    g.add(y, params[*b])?
                }
                Layer::Activation => self.activate(g, x)?,
            };
        }
        Ok(x)
    }
}

impl Objective for Model {
    fn input_shape(&self) -> &[usize] {
        &self.spec.input_shape
    }

    fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    fn build_loss(&self, g: &mut Graph, params: &[Var], input: Var, label: usize) -> autodiff::Result<Var> {
        let logits = self.build_logits(g, params, input)?;
        g.set_layer("loss");
        g.softmax_cross_entropy(logits, label)
    }

    fn second_order_blocker(&self) -> Option<&'static str> {
        if self.spec.activation == Activation::Relu {
            return Some("relu");
        }
        match self.spec.architecture {
            Architecture::Cnn { pooling: Pooling::Max, ref blocks, .. } if !blocks.is_empty() => Some("max_pool"),
            _ => None,
        }
    }
}

/// Parameters of a [`Model`] together with the seed that initialized them.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub model: Arc<Model>,
    pub params: ParamVector,
    pub init_seed: u64,
}

impl PartialEq for ModelState {
    fn eq(&self, other: &Self) -> bool {
        self.model.spec == other.model.spec && self.params == other.params && self.init_seed == other.init_seed
    }
}

/// Glorot-uniform weights, zero biases; deterministic per seed.
pub fn init_model(spec: ModelSpec, seed: u64) -> Result<ModelState, ModelError> {
    let model = Arc::new(Model::new(spec)?);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut params = ParamVector::zeros(model.layout_arc().clone());
    let blocks = model.layout.blocks().to_vec();
    for (block, &(fan_in, fan_out)) in blocks.iter().zip(&model.fans) {
        if fan_in + fan_out == 0 {
            continue;
        }
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in &mut params.data_mut()[block.range()] {
            *v = rng.random_range(-limit..limit);
        }
    }
    Ok(ModelState {
        model,
        params,
        init_seed: seed,
    })
}

impl ModelState {
    pub fn spec(&self) -> &ModelSpec {
        self.model.spec()
    }

    pub fn with_params(&self, params: ParamVector) -> Self {
        Self {
            model: self.model.clone(),
            params,
            init_seed: self.init_seed,
        }
    }

    pub fn logits(&self, input: &Tensor) -> Result<Tensor, ModelError> {
        if input.shape() != self.model.input_shape() {
            return Err(AutodiffError::Shape {
                op: "input",
                expected: format!("{:?}", self.model.input_shape()),
                actual: format!("{:?}", input.shape()),
            }
            .into());
        }
        let mut g = Graph::new();
        let x = g.leaf(input.clone());
        let ps: Vec<Var> = self.params.tensors().into_iter().map(|t| g.leaf(t)).collect();
        let out = self.model.build_logits(&mut g, &ps, x)?;
        Ok(g.value(out).clone())
    }

    /// Arg-max class; ties go to the lowest index.
    pub fn predict(&self, input: &Tensor) -> Result<usize, ModelError> {
        let logits = self.logits(input)?;
        Ok(argmax(logits.data()))
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), ModelError> {
        let header = serde_json::to_vec(&CheckpointHeader {
            spec: self.model.spec.clone(),
            init_seed: self.init_seed,
        })?;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        for v in self.params.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self, ModelError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ModelError::BadMagic {
                expected: *CHECKPOINT_MAGIC,
                actual: magic,
            });
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::Version(version));
        }
        r.read_exact(&mut word)?;
        let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        let model = Arc::new(Model::new(header.spec)?);
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        let expected = model.param_count();
        if rest.len() != expected * 8 {
            return Err(ModelError::ParamCount {
                expected,
                actual: rest.len() / 8,
            });
        }
        let data: Vec<f64> = rest
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidSpec("checkpoint holds non-finite parameters".into()));
        }
        let params = ParamVector::from_data(model.layout_arc().clone(), data).expect("length checked");
        Ok(Self {
            model,
            params,
            init_seed: header.init_seed,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    spec: ModelSpec,
    init_seed: u64,
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose arg-max prediction equals the label.
pub fn accuracy(state: &ModelState, samples: &[Sample]) -> Result<f64, ModelError> {
    if samples.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let hits: Vec<bool> = samples
        .par_iter()
        .map(|s| state.predict(&s.image).map(|p| p == s.label))
        .collect::<Result<_, _>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / samples.len() as f64)
}
