//! Convolutional feature extractor + MLP classifier, in two input geometries.
//!
//! The narrow variant reads one 2×1024 segment, the wide variant a 2×5120
//! window. Only the first convolution differs (kernel and stride scaled by the
//! window factor), so both land on the same latent size and the student's
//! features can be regressed onto the teacher's.

mod checkpoint;

pub use checkpoint::{load_checkpoint, load_checkpoint_variant, save_checkpoint, Provenance, CHECKPOINT_FORMAT_VERSION};

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{conv_output_len, softmax_rows, Graph, Padding, Parameter, Tensor, TensorError, Var};
use crate::signal::{CHANNELS, DEFAULT_SEG_LEN, WINDOW_SEGMENTS};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid architecture: {0}")]
    InvalidSpec(String),
    #[error("narrow and wide variants disagree on latent size: narrow {narrow}, wide {wide}")]
    LatentMismatch { narrow: usize, wide: usize },
    #[error("input length {found} does not match the {variant} model (expects {expected} samples per channel)")]
    LengthMismatch {
        variant: Variant,
        expected: usize,
        found: usize,
    },
    #[error("expected a {expected} model, got a {found} model")]
    Variant { expected: Variant, found: Variant },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint tensor `{name}` has shape {found:?}, architecture needs {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint truncated: need {expected} bytes, file has {actual}")]
    Truncated { expected: u64, actual: u64 },
    #[error("checkpoint tensor `{name}` failed its checksum (stored {stored:08x}, computed {computed:08x})")]
    Checksum { name: String, stored: u32, computed: u32 },
    #[error("malformed checkpoint: {0}")]
    Manifest(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Single segment input (baseline and student).
    Narrow,
    /// Five-segment window input (teacher).
    Wide,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Narrow => "narrow",
            Variant::Wide => "wide",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub variant: Variant,
    pub in_channels: usize,
    pub in_length: usize,
    pub conv_stack: Vec<ConvLayer>,
    pub latent_dim: usize,
    pub mlp_hidden: [usize; 2],
    pub num_classes: usize,
}

pub const CONV_LAYERS: usize = 5;

impl ArchitectureSpec {
    /// Default narrow geometry: 1024 → 64 → 32 → 16 → 8 → 4 → 2 time steps,
    /// 128 channels at the end, latent 256.
    pub fn narrow(num_classes: usize) -> Self {
        let layer = |out_channels, kernel, stride| ConvLayer {
            out_channels,
            kernel,
            stride,
            pool: 2,
        };
        Self {
            variant: Variant::Narrow,
            in_channels: CHANNELS,
            in_length: DEFAULT_SEG_LEN,
            conv_stack: vec![
                layer(16, 64, 16),
                layer(32, 3, 1),
                layer(64, 3, 1),
                layer(64, 3, 1),
                layer(128, 3, 1),
            ],
            latent_dim: 256,
            mlp_hidden: [128, 64],
            num_classes,
        }
    }

    pub fn wide(num_classes: usize) -> Self {
        Self::narrow(num_classes).widened()
    }

    pub fn for_variant(variant: Variant, num_classes: usize) -> Self {
        match variant {
            Variant::Narrow => Self::narrow(num_classes),
            Variant::Wide => Self::wide(num_classes),
        }
    }

    /// The other variant: first-layer kernel, stride and input length scaled
    /// by the window factor (or divided back down).
    pub fn widened(&self) -> Self {
        let mut s = self.clone();
        let f = WINDOW_SEGMENTS;
        match self.variant {
            Variant::Narrow => {
                s.variant = Variant::Wide;
                s.in_length *= f;
                if let Some(l) = s.conv_stack.first_mut() {
                    l.kernel *= f;
                    l.stride *= f;
                }
            }
            Variant::Wide => {
                s.variant = Variant::Narrow;
                s.in_length /= f;
                if let Some(l) = s.conv_stack.first_mut() {
                    l.kernel /= f;
                    l.stride /= f;
                }
            }
        }
        s
    }

    /// Flattened length of the last conv block, computed from the geometry.
    pub fn feature_len(&self) -> Result<usize> {
        let mut len = self.in_length;
        for (i, l) in self.conv_stack.iter().enumerate() {
            if l.out_channels == 0 || l.pool == 0 {
                return Err(ModelError::InvalidSpec(format!("layer {}: zero channels or pool", i + 1)));
            }
            len = conv_output_len(len, l.kernel, l.stride, Padding::Same)?.0;
            len = len.div_ceil(l.pool);
        }
        Ok(len * self.conv_stack.last().map_or(0, |l| l.out_channels))
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_stack.len() != CONV_LAYERS {
            return Err(ModelError::InvalidSpec(format!(
                "{} conv layers, the architecture has exactly {CONV_LAYERS}",
                self.conv_stack.len()
            )));
        }
        if self.num_classes < 2 {
            return Err(ModelError::InvalidSpec(format!("num_classes {} < 2", self.num_classes)));
        }
        if self.in_channels != CHANNELS || self.in_length == 0 {
            return Err(ModelError::InvalidSpec(format!(
                "input {}×{} (expected {CHANNELS} channels)",
                self.in_channels, self.in_length
            )));
        }
        if self.mlp_hidden.contains(&0) {
            return Err(ModelError::InvalidSpec("zero-width hidden layer".into()));
        }
        let own = self.feature_len()?;
        if own != self.latent_dim {
            return Err(ModelError::InvalidSpec(format!(
                "conv stack yields {own} features, latent_dim is {}",
                self.latent_dim
            )));
        }
        let other = self.widened().feature_len()?;
        if other != own {
            let (narrow, wide) = match self.variant {
                Variant::Narrow => (own, other),
                Variant::Wide => (other, own),
            };
            return Err(ModelError::LatentMismatch { narrow, wide });
        }
        Ok(())
    }

    /// Names and shapes of every parameter, feature extractor first.
    pub fn parameter_shapes(&self) -> (Vec<(String, Vec<usize>)>, Vec<(String, Vec<usize>)>) {
        let mut fe = Vec::new();
        let mut c_in = self.in_channels;
        for (i, l) in self.conv_stack.iter().enumerate() {
            fe.push((format!("fe.conv{}.weight", i + 1), vec![l.out_channels, c_in, l.kernel]));
            fe.push((format!("fe.conv{}.bias", i + 1), vec![l.out_channels]));
            c_in = l.out_channels;
        }
        let dims = [self.latent_dim, self.mlp_hidden[0], self.mlp_hidden[1], self.num_classes];
        let clf = (0..3)
            .flat_map(|i| {
                [
                    (format!("clf.fc{}.weight", i + 1), vec![dims[i + 1], dims[i]]),
                    (format!("clf.fc{}.bias", i + 1), vec![dims[i + 1]]),
                ]
            })
            .collect();
        (fe, clf)
    }
}

/// Parameters bound as leaves of one graph.
pub struct Bound {
    pub fe: Vec<Var>,
    pub clf: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ArchitectureSpec,
    /// Feature extractor: conv weight/bias pairs.
    pub fe_params: Vec<Parameter<f32>>,
    /// Classifier: linear weight/bias pairs.
    pub clf_params: Vec<Parameter<f32>>,
    pub rng_seed: u64,
}

/// Logits plus row-wise softmax.
#[derive(Clone, Debug)]
pub struct Classification {
    pub logits: Tensor<f32>,
    pub probabilities: Vec<f64>,
    pub num_classes: usize,
}

impl Classification {
    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(self.logits.values(), self.num_classes)
    }
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn argmax_rows(values: &[f32], classes: usize) -> Vec<usize> {
    values
        .chunks_exact(classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

pub fn build_model(variant: Variant, num_classes: usize, seed: u64) -> Result<Model> {
    Model::new(ArchitectureSpec::for_variant(variant, num_classes), seed)
}

impl Model {
    /// He-uniform weights (`±sqrt(6 / fan_in)`), biases uniform in
    /// `±1 / sqrt(fan_in)`, drawn in parameter order from `seed`.
    pub fn new(spec: ArchitectureSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (fe_shapes, clf_shapes) = spec.parameter_shapes();
        let mut init = |shapes: Vec<(String, Vec<usize>)>| -> Result<Vec<Parameter<f32>>> {
            let mut fan_in = 1;
            shapes
                .into_iter()
                .map(|(name, shape)| {
                    let bound = if shape.len() > 1 {
                        fan_in = shape[1..].iter().product::<usize>();
                        (6.0 / fan_in as f64).sqrt()
                    } else {
                        1.0 / (fan_in as f64).sqrt()
                    };
                    let n: usize = shape.iter().product();
                    let values: Vec<f32> = (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect();
                    Ok(Parameter::new(name, Tensor::new(shape, values)?))
                })
                .collect()
        };
        let fe_params = init(fe_shapes)?;
        let clf_params = init(clf_shapes)?;
        Ok(Self {
            spec,
            fe_params,
            clf_params,
            rng_seed: seed,
        })
    }

    pub fn variant(&self) -> Variant {
        self.spec.variant
    }

    pub fn expect_variant(&self, expected: Variant) -> Result<()> {
        if self.variant() != expected {
            return Err(ModelError::Variant {
                expected,
                found: self.variant(),
            });
        }
        Ok(())
    }

    pub fn parameters(&self) -> impl Iterator<Item = &Parameter<f32>> {
        self.fe_params.iter().chain(&self.clf_params)
    }

    /// Records the parameters as leaves. `fe_grad` / `clf_grad` choose which
    /// blocks collect gradients.
    pub fn bind(&self, g: &mut Graph<f32>, fe_grad: bool, clf_grad: bool) -> Result<Bound> {
        let mut leaves = |ps: &[Parameter<f32>], rg: bool| -> Result<Vec<Var>> {
            ps.iter()
                .map(|p| Ok(g.leaf(p.shape(), p.tensor.values(), rg)?))
                .collect()
        };
        let fe = leaves(&self.fe_params, fe_grad)?;
        let clf = leaves(&self.clf_params, clf_grad)?;
        Ok(Bound { fe, clf })
    }

    /// Stacks row-major `[channel][sample]` inputs into a `[B, C, L]` leaf.
    pub fn input(&self, g: &mut Graph<f32>, samples: &[&[f32]]) -> Result<Var> {
        let expected = self.spec.in_channels * self.spec.in_length;
        let mut data = Vec::with_capacity(samples.len() * expected);
        for s in samples {
            if s.len() != expected {
                return Err(ModelError::LengthMismatch {
                    variant: self.variant(),
                    expected: self.spec.in_length,
                    found: s.len() / self.spec.in_channels,
                });
            }
            data.extend_from_slice(s);
        }
        if samples.is_empty() {
            return Err(ModelError::InvalidSpec("empty batch".into()));
        }
        Ok(g.leaf(&[samples.len(), self.spec.in_channels, self.spec.in_length], &data, false)?)
    }

    /// φ: `[B, C, L]` → `[B, latent_dim]`.
    pub fn features_on(&self, g: &mut Graph<f32>, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, l) in self.spec.conv_stack.iter().enumerate() {
            h = g.conv1d(h, bound.fe[2 * i], bound.fe[2 * i + 1], l.stride, Padding::Same)?;
            h = g.relu(h);
            h = g.max_pool1d(h, l.pool)?;
        }
        let b = g.shape(h)[0];
        Ok(g.reshape(h, vec![b, self.spec.latent_dim])?)
    }

    /// f: `[B, latent_dim]` → logits `[B, num_classes]`.
    pub fn head_on(&self, g: &mut Graph<f32>, bound: &Bound, z: Var) -> Result<Var> {
        let mut h = z;
        for i in 0..3 {
            h = g.linear(h, bound.clf[2 * i], bound.clf[2 * i + 1])?;
            if i < 2 {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Adds the graph's leaf gradients into the parameters.
    pub fn collect_grads(&mut self, g: &Graph<f32>, bound: &Bound, fe: bool, clf: bool) -> Result<()> {
        let pull = |ps: &mut [Parameter<f32>], vars: &[Var]| -> Result<()> {
            for (p, &v) in ps.iter_mut().zip(vars) {
                let grad = g.grad(v).ok_or_else(|| TensorError::MissingGradient(p.name.clone()))?;
                p.tensor.accumulate_grad(grad)?;
            }
            Ok(())
        };
        if fe {
            pull(&mut self.fe_params, &bound.fe)?;
        }
        if clf {
            pull(&mut self.clf_params, &bound.clf)?;
        }
        Ok(())
    }

    pub fn forward_features(&self, samples: &[&[f32]]) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false, false)?;
        let x = self.input(&mut g, samples)?;
        let z = self.features_on(&mut g, &bound, x)?;
        Ok(g.to_tensor(z))
    }

    /// Applies the classifier head to precomputed latents.
    pub fn classify_latents(&self, latents: &Tensor<f32>) -> Result<Classification> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false, false)?;
        let z = g.leaf(latents.shape(), latents.values(), false)?;
        let logits = self.head_on(&mut g, &bound, z)?;
        Ok(self.classification(g.to_tensor(logits)))
    }

    pub fn forward_classify(&self, samples: &[&[f32]]) -> Result<Classification> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false, false)?;
        let x = self.input(&mut g, samples)?;
        let z = self.features_on(&mut g, &bound, x)?;
        let logits = self.head_on(&mut g, &bound, z)?;
        Ok(self.classification(g.to_tensor(logits)))
    }

    fn classification(&self, logits: Tensor<f32>) -> Classification {
        let probabilities = softmax_rows(logits.values(), self.spec.num_classes);
        Classification {
            logits,
            probabilities,
            num_classes: self.spec.num_classes,
        }
    }

    /// Bit-level snapshot of every parameter value, for frozen-model checks.
    pub fn fingerprint(&self) -> Vec<u32> {
        self.parameters()
            .flat_map(|p| p.tensor.values().iter().map(|v| v.to_bits()))
            .collect()
    }
}
