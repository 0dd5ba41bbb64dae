//! Small vision models over the autodiff tape.
//!
//! Parameters live in one flat vector; layers view their slice of it through
//! cached gather indices. Gradients therefore come back as a single flat
//! vector aligned with `ParamLayout`, which is what the masking and
//! significance code operate on.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    MaxPool,
    Activation(Activation),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    /// Input as [channels, height, width].
    pub input_shape: [usize; 3],
    pub classes: usize,
}

impl ModelSpec {
    /// Two 5x5 conv blocks (6 then 16 channels, tanh, 2x2 pool) into an
    /// 84-wide dense head. Spatial dims must be divisible by 4.
    pub fn lenet_small(input_shape: [usize; 3], classes: usize) -> ModelSpec {
        let [c, h, w] = input_shape;
        let flat = 16 * (h / 4) * (w / 4);
        ModelSpec {
            layers: vec![
                LayerSpec::Conv {
                    in_channels: c,
                    out_channels: 6,
                    kernel: 5,
                    padding: 2,
                },
                LayerSpec::Activation(Activation::Tanh),
                LayerSpec::MaxPool,
                LayerSpec::Conv {
                    in_channels: 6,
                    out_channels: 16,
                    kernel: 5,
                    padding: 2,
                },
                LayerSpec::Activation(Activation::Tanh),
                LayerSpec::MaxPool,
                LayerSpec::Dense {
                    inputs: flat,
                    outputs: 84,
                },
                LayerSpec::Activation(Activation::Tanh),
                LayerSpec::Dense {
                    inputs: 84,
                    outputs: classes,
                },
            ],
            input_shape,
            classes,
        }
    }

    /// Two 3x3 conv blocks with relu into a 64-wide dense head.
    pub fn cnn_small(input_shape: [usize; 3], classes: usize) -> ModelSpec {
        let [c, h, w] = input_shape;
        let flat = 16 * (h / 4) * (w / 4);
        ModelSpec {
            layers: vec![
                LayerSpec::Conv {
                    in_channels: c,
                    out_channels: 8,
                    kernel: 3,
                    padding: 1,
                },
                LayerSpec::Activation(Activation::Relu),
                LayerSpec::MaxPool,
                LayerSpec::Conv {
                    in_channels: 8,
                    out_channels: 16,
                    kernel: 3,
                    padding: 1,
                },
                LayerSpec::Activation(Activation::Relu),
                LayerSpec::MaxPool,
                LayerSpec::Dense {
                    inputs: flat,
                    outputs: 64,
                },
                LayerSpec::Activation(Activation::Relu),
                LayerSpec::Dense {
                    inputs: 64,
                    outputs: classes,
                },
            ],
            input_shape,
            classes,
        }
    }

    pub fn by_name(name: &str, input_shape: [usize; 3], classes: usize) -> Result<ModelSpec> {
        match name {
            "lenet-small" => Ok(ModelSpec::lenet_small(input_shape, classes)),
            "cnn-small" => Ok(ModelSpec::cnn_small(input_shape, classes)),
            other => Err(Error::Config(format!(
                "unknown model `{other}` (expected lenet-small or cnn-small)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
}

/// Half-open range [start, end) of one weight or bias block in the flat
/// parameter vector. `layer` counts parameterized layers only.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamRange {
    pub layer: usize,
    pub role: ParamRole,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLayout {
    pub ranges: Vec<ParamRange>,
    pub total: usize,
    /// Number of parameterized (conv/dense) layers.
    pub layers: usize,
}

impl ParamLayout {
    /// Parameterized-layer index owning flat coordinate `i`.
    pub fn layer_of(&self, i: usize) -> Option<usize> {
        self.ranges
            .iter()
            .find(|r| i >= r.start && i < r.end)
            .map(|r| r.layer)
    }
}

#[derive(Clone, Debug)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Arc<ParamLayout>,
}

/// Loss gradient aligned with the flat parameter vector.
#[derive(Clone, Debug)]
pub struct FlatGradient {
    pub values: Vec<f64>,
    pub layout: Arc<ParamLayout>,
}

pub fn one_hot(classes: usize, label: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    v
}

/// Index of the single 1.0 in a strict one-hot vector.
pub fn one_hot_label(y: &[f64]) -> Result<usize> {
    let mut label = None;
    for (i, &v) in y.iter().enumerate() {
        if v == 1.0 {
            if label.is_some() {
                return Err(Error::NotOneHot {
                    detail: "more than one coordinate equals 1".into(),
                });
            }
            label = Some(i);
        } else if v != 0.0 {
            return Err(Error::NotOneHot {
                detail: format!("coordinate {i} is {v}, expected 0 or 1"),
            });
        }
    }
    label.ok_or(Error::NotOneHot {
        detail: "no coordinate equals 1".into(),
    })
}

struct LayerView {
    weight_idx: Arc<Vec<usize>>,
    bias_idx: Arc<Vec<usize>>,
    weight_shape: Vec<usize>,
}

enum Step {
    Conv { view: usize, padding: usize },
    Dense { view: usize, inputs: usize, outputs: usize },
    MaxPool,
    Activation(Activation),
}

/// Compiled model: validated shapes plus cached parameter views.
pub struct Model {
    spec: ModelSpec,
    layout: Arc<ParamLayout>,
    views: Vec<LayerView>,
    steps: Vec<Step>,
}

impl std::fmt::Debug for Model {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Model")
            .field("input_shape", &self.spec.input_shape)
            .field("classes", &self.spec.classes)
            .field("params", &self.layout.total)
            .finish()
    }
}

impl Model {
    /// Validates the layer chain and caches parameter gather indices.
    pub fn compile(spec: ModelSpec) -> Result<Model> {
        let [c, h, w] = spec.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::IncompatibleLayers {
                detail: format!("input shape {:?} has a zero dim", spec.input_shape),
            });
        }
        if spec.classes < 2 {
            return Err(Error::IncompatibleLayers {
                detail: format!("classes must be at least 2, got {}", spec.classes),
            });
        }
        if spec.layers.is_empty() {
            return Err(Error::IncompatibleLayers {
                detail: "empty layer list".into(),
            });
        }

        // cur = Some([c,h,w]) while spatial, None once flattened by a dense.
        let mut cur: Option<[usize; 3]> = Some([c, h, w]);
        let mut flat_len = c * h * w;
        let mut ranges = Vec::new();
        let mut views = Vec::new();
        let mut steps = Vec::new();
        let mut offset = 0usize;
        let mut player = 0usize;

        for (li, layer) in spec.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    padding,
                } => {
                    let Some([cc, ch, cw]) = cur else {
                        return Err(Error::IncompatibleLayers {
                            detail: format!("layer {li}: conv after dense output"),
                        });
                    };
                    if in_channels != cc {
                        return Err(Error::IncompatibleLayers {
                            detail: format!(
                                "layer {li}: conv declares {in_channels} input channels, previous layer provides {cc}"
                            ),
                        });
                    }
                    if out_channels == 0 || kernel == 0 {
                        return Err(Error::IncompatibleLayers {
                            detail: format!("layer {li}: zero-sized conv"),
                        });
                    }
                    let (ph, pw) = (ch + 2 * padding, cw + 2 * padding);
                    if ph < kernel || pw < kernel {
                        return Err(Error::IncompatibleLayers {
                            detail: format!(
                                "layer {li}: kernel {kernel} exceeds padded input {ph}x{pw}"
                            ),
                        });
                    }
                    let (oh, ow) = (ph - kernel + 1, pw - kernel + 1);
                    let wlen = out_channels * in_channels * kernel * kernel;
                    let wstart = offset;
                    ranges.push(ParamRange {
                        layer: player,
                        role: ParamRole::Weight,
                        start: wstart,
                        end: wstart + wlen,
                    });
                    ranges.push(ParamRange {
                        layer: player,
                        role: ParamRole::Bias,
                        start: wstart + wlen,
                        end: wstart + wlen + out_channels,
                    });
                    views.push(LayerView {
                        weight_idx: Arc::new((wstart..wstart + wlen).collect()),
                        bias_idx: Arc::new(
                            (wstart + wlen..wstart + wlen + out_channels).collect(),
                        ),
                        weight_shape: vec![out_channels, in_channels, kernel, kernel],
                    });
                    steps.push(Step::Conv {
                        view: player,
                        padding,
                    });
                    offset += wlen + out_channels;
                    player += 1;
                    cur = Some([out_channels, oh, ow]);
                    flat_len = out_channels * oh * ow;
                }
                LayerSpec::Dense { inputs, outputs } => {
                    if inputs != flat_len {
                        return Err(Error::IncompatibleLayers {
                            detail: format!(
                                "layer {li}: dense declares {inputs} inputs, previous layer provides {flat_len}"
                            ),
                        });
                    }
                    if outputs == 0 {
                        return Err(Error::IncompatibleLayers {
                            detail: format!("layer {li}: dense with zero outputs"),
                        });
                    }
                    let wlen = outputs * inputs;
                    let wstart = offset;
                    ranges.push(ParamRange {
                        layer: player,
                        role: ParamRole::Weight,
                        start: wstart,
                        end: wstart + wlen,
                    });
                    ranges.push(ParamRange {
                        layer: player,
                        role: ParamRole::Bias,
                        start: wstart + wlen,
                        end: wstart + wlen + outputs,
                    });
                    views.push(LayerView {
                        weight_idx: Arc::new((wstart..wstart + wlen).collect()),
                        bias_idx: Arc::new((wstart + wlen..wstart + wlen + outputs).collect()),
                        weight_shape: vec![outputs, inputs],
                    });
                    steps.push(Step::Dense {
                        view: player,
                        inputs,
                        outputs,
                    });
                    offset += wlen + outputs;
                    player += 1;
                    cur = None;
                    flat_len = outputs;
                }
                LayerSpec::MaxPool => {
                    let Some([cc, ch, cw]) = cur else {
                        return Err(Error::IncompatibleLayers {
                            detail: format!("layer {li}: pool after dense output"),
                        });
                    };
                    if ch % 2 != 0 || cw % 2 != 0 || ch == 0 || cw == 0 {
                        return Err(Error::IncompatibleLayers {
                            detail: format!("layer {li}: pool needs even dims, got {ch}x{cw}"),
                        });
                    }
                    steps.push(Step::MaxPool);
                    cur = Some([cc, ch / 2, cw / 2]);
                    flat_len = cc * (ch / 2) * (cw / 2);
                }
                LayerSpec::Activation(a) => {
                    steps.push(Step::Activation(a));
                }
            }
        }

        if flat_len != spec.classes {
            return Err(Error::IncompatibleLayers {
                detail: format!(
                    "final layer produces {flat_len} outputs, expected {} classes",
                    spec.classes
                ),
            });
        }

        Ok(Model {
            spec,
            layout: Arc::new(ParamLayout {
                ranges,
                total: offset,
                layers: player,
            }),
            views,
            steps,
        })
    }

    /// Compile plus a fresh deterministic initialization.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<(Model, ParamVector)> {
        let model = Model::compile(spec)?;
        let params = model.init_params(seed);
        Ok((model, params))
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn input_len(&self) -> usize {
        let [c, h, w] = self.spec.input_shape;
        c * h * w
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.spec.input_shape
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per layer, weights then bias,
    /// drawn from a single seeded stream.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; self.layout.total];
        for (view, step) in self.views.iter().zip(self.param_steps()) {
            let fan_in = match step {
                Step::Conv { .. } => {
                    // weight_shape = [oc, ic, k, k]
                    view.weight_shape[1] * view.weight_shape[2] * view.weight_shape[3]
                }
                Step::Dense { inputs, .. } => *inputs,
                _ => unreachable!("param_steps yields parameterized steps only"),
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            for &i in view.weight_idx.iter().chain(view.bias_idx.iter()) {
                values[i] = rng.random_range(-bound..bound);
            }
        }
        ParamVector {
            values,
            layout: Arc::clone(&self.layout),
        }
    }

    fn param_steps(&self) -> impl Iterator<Item = &Step> {
        self.steps
            .iter()
            .filter(|s| matches!(s, Step::Conv { .. } | Step::Dense { .. }))
    }

    /// Forward pass over tape tensors. `theta` must be the flat [m] vector.
    pub fn forward_tensor(&self, theta: &Tensor, x: &Tensor) -> Tensor {
        assert_eq!(theta.len(), self.layout.total, "theta length");
        let [c, h, w] = self.spec.input_shape;
        assert_eq!(x.len(), c * h * w, "input length");
        let mut cur = if x.shape() == [c, h, w] {
            x.clone()
        } else {
            x.reshape(vec![c, h, w])
        };
        for step in &self.steps {
            cur = match step {
                Step::Conv { view, padding } => {
                    let v = &self.views[*view];
                    let k = theta
                        .gather(Arc::clone(&v.weight_idx))
                        .reshape(v.weight_shape.clone());
                    let b = theta.gather(Arc::clone(&v.bias_idx));
                    cur.conv2d(&k, Some(&b), *padding)
                }
                Step::Dense {
                    view,
                    inputs,
                    outputs,
                } => {
                    let v = &self.views[*view];
                    let wm = theta
                        .gather(Arc::clone(&v.weight_idx))
                        .reshape(vec![*outputs, *inputs]);
                    let b = theta.gather(Arc::clone(&v.bias_idx));
                    let col = cur.flatten().reshape(vec![*inputs, 1]);
                    wm.matmul(&col).reshape(vec![*outputs]).add(&b)
                }
                Step::MaxPool => cur.max_pool2x2(),
                Step::Activation(Activation::Relu) => cur.relu(),
                Step::Activation(Activation::Tanh) => cur.tanh(),
                Step::Activation(Activation::Sigmoid) => cur.sigmoid(),
            };
        }
        cur.flatten()
    }

    /// Cross-entropy of softmax(logits) against `label`, as a tape scalar.
    /// The max shift is a constant, which softmax's shift invariance makes
    /// gradient-exact.
    pub fn loss_tensor(&self, theta: &Tensor, x: &Tensor, label: usize) -> Tensor {
        assert!(label < self.spec.classes, "label out of range");
        let logits = self.forward_tensor(theta, x);
        let max = logits
            .data()
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = logits
            .add_scalar(-max)
            .exp()
            .sum()
            .log()
            .add_scalar(max);
        let picked = logits.gather_slice(&[label]).sum();
        lse.sub(&picked)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        let want = self.input_len();
        if x.len() != want {
            return Err(Error::LengthMismatch {
                context: "model input",
                expected: want,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.values.len() != self.layout.total {
            return Err(Error::LengthMismatch {
                context: "parameter vector",
                expected: self.layout.total,
                got: params.values.len(),
            });
        }
        Ok(())
    }

    /// Eager logits.
    pub fn forward(&self, params: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
        self.check_params(params)?;
        self.check_input(x)?;
        let theta = Tensor::detached(params.values.clone(), vec![self.layout.total]);
        let xt = Tensor::detached(x.to_vec(), self.spec.input_shape.to_vec());
        Ok(self.forward_tensor(&theta, &xt).data().to_vec())
    }

    /// Loss and flat parameter gradient for a one-hot target.
    pub fn loss_and_grad(
        &self,
        params: &ParamVector,
        x: &[f64],
        y: &[f64],
    ) -> Result<(f64, FlatGradient)> {
        let label = one_hot_label(y)?;
        if y.len() != self.spec.classes {
            return Err(Error::LengthMismatch {
                context: "one-hot target",
                expected: self.spec.classes,
                got: y.len(),
            });
        }
        self.loss_and_grad_label(params, x, label)
    }

    pub fn loss_and_grad_label(
        &self,
        params: &ParamVector,
        x: &[f64],
        label: usize,
    ) -> Result<(f64, FlatGradient)> {
        self.check_params(params)?;
        self.check_input(x)?;
        if label >= self.spec.classes {
            return Err(Error::Config(format!(
                "label {label} out of range for {} classes",
                self.spec.classes
            )));
        }
        let tape = Tape::new();
        let theta = tape.var(params.values.clone(), vec![self.layout.total]);
        let xt = tape.constant(x.to_vec(), self.spec.input_shape.to_vec());
        let loss = self.loss_tensor(&theta, &xt, label);
        tape.check_finite()?;
        let g = tape.grad(&loss, &[&theta], false)?;
        Ok((
            loss.item(),
            FlatGradient {
                values: g[0].data().to_vec(),
                layout: Arc::clone(&self.layout),
            },
        ))
    }
}
