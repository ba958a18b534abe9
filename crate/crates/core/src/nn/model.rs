//! Model assembly and the forward/backward passes through the layer stack.
//!
//! The architecture is four time-axis conv+pool layers followed by two
//! band-axis conv+pool layers, a dropout on the flattened activations and a
//! single dense head (one output per estimated parameter).

use ndarray::{Array1, Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    avg_pool_backward, avg_pool_forward, cast, dropout_mask, Conv2d, Dense, Grads, Layer,
    LayerGrads, NetFloat, Value,
};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    Volume,
    Rt60,
    Joint,
}

impl TargetMode {
    pub fn output_dim(self) -> usize {
        match self {
            TargetMode::Joint => 2,
            _ => 1,
        }
    }
}

impl std::str::FromStr for TargetMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "volume" => Ok(TargetMode::Volume),
            "rt60" => Ok(TargetMode::Rt60),
            "joint" => Ok(TargetMode::Joint),
            other => Err(format!("unknown target mode '{other}'")),
        }
    }
}

impl std::fmt::Display for TargetMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TargetMode::Volume => f.write_str("volume"),
            TargetMode::Rt60 => f.write_str("rt60"),
            TargetMode::Joint => f.write_str("joint"),
        }
    }
}

/// Mapping between network outputs and log-label space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetScaler {
    /// Outputs are the log labels directly.
    Identity,
    /// label = out * std + mean (single-target training).
    Standardized { mean: f64, std: f64 },
    /// label = out * absmax per target (joint training).
    JointMax { volume_absmax: f64, rt60_absmax: f64 },
}

impl TargetScaler {
    /// Log-label -> network target space.
    pub fn scale(&self, mode: TargetMode, log10_volume: f64, log_rt60: f64) -> Vec<f64> {
        match (self, mode) {
            (TargetScaler::Identity, TargetMode::Volume) => vec![log10_volume],
            (TargetScaler::Identity, TargetMode::Rt60) => vec![log_rt60],
            (TargetScaler::Identity, TargetMode::Joint) => vec![log10_volume, log_rt60],
            (TargetScaler::Standardized { mean, std }, TargetMode::Volume) => {
                vec![(log10_volume - mean) / std]
            }
            (TargetScaler::Standardized { mean, std }, TargetMode::Rt60) => {
                vec![(log_rt60 - mean) / std]
            }
            (TargetScaler::Standardized { .. }, TargetMode::Joint) => {
                panic!("joint mode uses JointMax normalization")
            }
            (TargetScaler::JointMax { volume_absmax, rt60_absmax }, TargetMode::Joint) => {
                vec![log10_volume / volume_absmax, log_rt60 / rt60_absmax]
            }
            (TargetScaler::JointMax { volume_absmax, .. }, TargetMode::Volume) => {
                vec![log10_volume / volume_absmax]
            }
            (TargetScaler::JointMax { rt60_absmax, .. }, TargetMode::Rt60) => {
                vec![log_rt60 / rt60_absmax]
            }
        }
    }

    /// Network output -> log-label space.
    pub fn unscale(&self, mode: TargetMode, outputs: &[f64]) -> (Option<f64>, Option<f64>) {
        match mode {
            TargetMode::Volume => (Some(self.unscale_one(outputs[0], 0)), None),
            TargetMode::Rt60 => (None, Some(self.unscale_one(outputs[0], 1))),
            TargetMode::Joint => (
                Some(self.unscale_one(outputs[0], 0)),
                Some(self.unscale_one(outputs[1], 1)),
            ),
        }
    }

    fn unscale_one(&self, out: f64, target_idx: usize) -> f64 {
        match self {
            TargetScaler::Identity => out,
            TargetScaler::Standardized { mean, std } => out * std + mean,
            TargetScaler::JointMax { volume_absmax, rt60_absmax } => {
                if target_idx == 0 {
                    out * volume_absmax
                } else {
                    out * rt60_absmax
                }
            }
        }
    }
}

/// Architecture hyperparameters. The defaults pin the reproducible reference
/// configuration; all of them can be overridden through the train config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub time_kernel: usize,
    pub band_kernel: usize,
    pub channels: [usize; 6],
    pub dropout: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { time_kernel: 10, band_kernel: 3, channels: [8, 8, 16, 16, 32, 32], dropout: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct Model<F> {
    pub layers: Vec<Layer<F>>,
    pub input_shape: (usize, usize, usize),
    pub target_mode: TargetMode,
}

/// Per-layer values cached by the forward pass for backprop.
pub enum CachedLayer<F> {
    Conv(super::layers::ConvTrace<F>),
    AvgPool { input_shape: (usize, usize, usize) },
    Flatten { input_shape: (usize, usize, usize) },
    Dropout { mask: Array1<F> },
    Dense { input: Array1<F> },
}

pub struct Cache<F> {
    pub layers: Vec<CachedLayer<F>>,
}

fn he_uniform<F: NetFloat>(
    rng: &mut ChaCha8Rng,
    fan_in: usize,
    n: usize,
) -> Vec<F> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| cast(rng.gen_range(-limit..limit))).collect()
}

/// Builds the reference stack for an input of (channels, bands, frames),
/// tracing shapes and reporting the first layer that cannot fit.
pub fn build_model<F: NetFloat>(
    input_channels: usize,
    input_bands: usize,
    input_frames: usize,
    target_mode: TargetMode,
    arch: &ArchConfig,
    seed: u64,
) -> Result<Model<F>, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers: Vec<Layer<F>> = Vec::new();
    let mut shape = (input_channels, input_bands, input_frames);

    let push_conv_pool = |layers: &mut Vec<Layer<F>>,
                              shape: &mut (usize, usize, usize),
                              rng: &mut ChaCha8Rng,
                              out_ch: usize,
                              kh: usize,
                              kw: usize,
                              pool: (usize, usize)|
     -> Result<(), NnError> {
        let layer_idx = layers.len();
        let (c, h, w) = *shape;
        if h < kh || w < kw {
            return Err(NnError::BadShape {
                layer: layer_idx,
                shape: vec![c, h, w],
                reason: format!("conv kernel {kh}x{kw} larger than input"),
            });
        }
        let fan_in = c * kh * kw;
        let weights = Array4::from_shape_vec(
            (out_ch, c, kh, kw),
            he_uniform(rng, fan_in, out_ch * fan_in),
        )
        .expect("init vector matches shape");
        layers.push(Layer::Conv(Conv2d { weights, bias: Array1::zeros(out_ch), relu: true }));
        let (h2, w2) = (h - kh + 1, w - kw + 1);
        let layer_idx = layers.len();
        let (ph, pw) = pool;
        if h2 / ph == 0 || w2 / pw == 0 {
            return Err(NnError::BadShape {
                layer: layer_idx,
                shape: vec![out_ch, h2, w2],
                reason: format!("pool {ph}x{pw} empties the plane"),
            });
        }
        layers.push(Layer::AvgPool { kh: ph, kw: pw });
        *shape = (out_ch, h2 / ph, w2 / pw);
        Ok(())
    };

    // Four time-axis convolutions (1 x k kernels, 1 x 2 pooling).
    for i in 0..4 {
        push_conv_pool(
            &mut layers,
            &mut shape,
            &mut rng,
            arch.channels[i],
            1,
            arch.time_kernel,
            (1, 2),
        )?;
    }
    // Two band-axis convolutions (k x 1 kernels, 2 x 1 pooling).
    for i in 4..6 {
        push_conv_pool(
            &mut layers,
            &mut shape,
            &mut rng,
            arch.channels[i],
            arch.band_kernel,
            1,
            (2, 1),
        )?;
    }

    layers.push(Layer::Flatten);
    let flat_dim = shape.0 * shape.1 * shape.2;
    layers.push(Layer::Dropout { rate: arch.dropout });

    let out_dim = target_mode.output_dim();
    let weights = Array2::from_shape_vec(
        (out_dim, flat_dim),
        he_uniform(&mut rng, flat_dim, out_dim * flat_dim),
    )
    .expect("init vector matches shape");
    layers.push(Layer::Dense(Dense { weights, bias: Array1::zeros(out_dim) }));

    Ok(Model { layers, input_shape: (input_channels, input_bands, input_frames), target_mode })
}

impl<F: NetFloat> Model<F> {
    pub fn output_dim(&self) -> usize {
        self.target_mode.output_dim()
    }

    /// Forward pass. In train mode dropout masks are drawn from
    /// `dropout_seed`; eval mode is deterministic and mask-free.
    pub fn forward(&self, input: &Array3<F>, mode: Mode, dropout_seed: u64) -> (Array1<F>, Cache<F>) {
        assert_eq!(input.dim(), self.input_shape, "input shape mismatch");
        let mut value = Value::Planes(input.clone());
        let mut cache = Cache { layers: Vec::with_capacity(self.layers.len()) };
        for layer in &self.layers {
            value = match layer {
                Layer::Conv(conv) => {
                    let planes = value.planes();
                    let (post, trace) = conv.forward_owned(planes);
                    cache.layers.push(CachedLayer::Conv(trace));
                    Value::Planes(post)
                }
                Layer::AvgPool { kh, kw } => {
                    let planes = value.planes();
                    let out = avg_pool_forward(&planes, *kh, *kw);
                    cache.layers.push(CachedLayer::AvgPool { input_shape: planes.dim() });
                    Value::Planes(out)
                }
                Layer::Flatten => {
                    let planes = value.planes();
                    let shape = planes.dim();
                    let flat = planes
                        .into_shape_with_order(shape.0 * shape.1 * shape.2)
                        .expect("standard layout flattens");
                    cache.layers.push(CachedLayer::Flatten { input_shape: shape });
                    Value::Vector(flat)
                }
                Layer::Dropout { rate } => {
                    let v = value.vector();
                    match mode {
                        Mode::Train => {
                            let mask = dropout_mask::<F>(v.len(), *rate, dropout_seed);
                            let out = &v * &mask;
                            cache.layers.push(CachedLayer::Dropout { mask });
                            Value::Vector(out)
                        }
                        Mode::Eval => {
                            cache
                                .layers
                                .push(CachedLayer::Dropout { mask: Array1::ones(v.len()) });
                            Value::Vector(v)
                        }
                    }
                }
                Layer::Dense(dense) => {
                    let v = value.vector();
                    let out = dense.forward(&v);
                    cache.layers.push(CachedLayer::Dense { input: v });
                    Value::Vector(out)
                }
            };
        }
        (value.vector(), cache)
    }

    pub fn forward_eval(&self, input: &Array3<F>) -> Array1<F> {
        self.forward(input, Mode::Eval, 0).0
    }

    /// Backpropagates `loss_grad` (d loss / d output) through the cached
    /// forward pass. Every parameter gradient includes the L2 term
    /// `l2_lambda * param`.
    pub fn backward(&self, cache: &Cache<F>, loss_grad: Array1<F>, l2_lambda: f64) -> Grads<F> {
        assert_eq!(cache.layers.len(), self.layers.len(), "stale cache");
        let lambda = cast::<F>(l2_lambda);
        let mut grads: Vec<LayerGrads<F>> = Vec::with_capacity(self.layers.len());
        let mut grad_vec: Option<Array1<F>> = Some(loss_grad);
        let mut grad_planes: Option<Array3<F>> = None;

        for (idx, (layer, cached)) in
            self.layers.iter().zip(cache.layers.iter()).enumerate().rev()
        {
            match (layer, cached) {
                (Layer::Dense(dense), CachedLayer::Dense { input }) => {
                    let g = grad_vec.take().expect("vector grad");
                    let (mut dw, mut db, dx) = dense.backward(input, &g);
                    if l2_lambda != 0.0 {
                        dw.zip_mut_with(&dense.weights, |d, w| *d += lambda * *w);
                        db.zip_mut_with(&dense.bias, |d, b| *d += lambda * *b);
                    }
                    grads.push(LayerGrads::Dense { dw, db });
                    grad_vec = Some(dx);
                }
                (Layer::Dropout { .. }, CachedLayer::Dropout { mask }) => {
                    let g = grad_vec.take().expect("vector grad");
                    grad_vec = Some(&g * mask);
                    grads.push(LayerGrads::None);
                }
                (Layer::Flatten, CachedLayer::Flatten { input_shape }) => {
                    let g = grad_vec.take().expect("vector grad");
                    grad_planes = Some(
                        g.into_shape_with_order(*input_shape).expect("unflatten grad"),
                    );
                    grads.push(LayerGrads::None);
                }
                (Layer::AvgPool { kh, kw }, CachedLayer::AvgPool { input_shape }) => {
                    let g = grad_planes.take().expect("plane grad");
                    grad_planes = Some(avg_pool_backward(&g, *input_shape, *kh, *kw));
                    grads.push(LayerGrads::None);
                }
                (Layer::Conv(conv), CachedLayer::Conv(trace)) => {
                    let g = grad_planes.take().expect("plane grad");
                    let (mut dw, mut db, dx) = conv.backward(trace, &g, idx > 0);
                    if l2_lambda != 0.0 {
                        dw.zip_mut_with(&conv.weights, |d, w| *d += lambda * *w);
                        db.zip_mut_with(&conv.bias, |d, b| *d += lambda * *b);
                    }
                    grads.push(LayerGrads::Conv { dw, db });
                    grad_planes = dx;
                }
                _ => panic!("cache does not match layer stack"),
            }
        }
        grads.reverse();
        Grads { layers: grads }
    }

    /// Flat parameter access, used by the finite-difference checks and the
    /// checkpoint writer. Order: layers in sequence, weights then bias.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => c.weights.len() + c.bias.len(),
                Layer::Dense(d) => d.weights.len() + d.bias.len(),
                _ => 0,
            })
            .sum()
    }

    pub fn params_flat(&self) -> Vec<F> {
        let mut out = Vec::with_capacity(self.param_count());
        for layer in &self.layers {
            match layer {
                Layer::Conv(c) => {
                    out.extend(c.weights.iter().cloned());
                    out.extend(c.bias.iter().cloned());
                }
                Layer::Dense(d) => {
                    out.extend(d.weights.iter().cloned());
                    out.extend(d.bias.iter().cloned());
                }
                _ => {}
            }
        }
        out
    }

    pub fn set_params_flat(&mut self, values: &[F]) {
        let mut it = values.iter();
        for layer in self.layers.iter_mut() {
            match layer {
                Layer::Conv(c) => {
                    for w in c.weights.iter_mut() {
                        *w = *it.next().expect("enough params");
                    }
                    for b in c.bias.iter_mut() {
                        *b = *it.next().expect("enough params");
                    }
                }
                Layer::Dense(d) => {
                    for w in d.weights.iter_mut() {
                        *w = *it.next().expect("enough params");
                    }
                    for b in d.bias.iter_mut() {
                        *b = *it.next().expect("enough params");
                    }
                }
                _ => {}
            }
        }
        assert!(it.next().is_none(), "too many params");
    }

    /// Squared L2 norm of all weights and biases.
    pub fn param_sq_norm(&self) -> f64 {
        self.params_flat()
            .iter()
            .map(|v| {
                let x = v.to_f64().unwrap_or(0.0);
                x * x
            })
            .sum()
    }
}

/// Sum of squared errors over output dims and its gradient 2*(o - y).
pub fn loss_and_grad<F: NetFloat>(
    output: &Array1<F>,
    target: &Array1<F>,
) -> (f64, Array1<F>) {
    let mut loss = 0.0;
    let two = cast::<F>(2.0);
    let grad = Array1::from_iter(output.iter().zip(target.iter()).map(|(o, y)| {
        let d = *o - *y;
        loss += d.to_f64().unwrap_or(f64::NAN).powi(2);
        two * d
    }));
    (loss, grad)
}
