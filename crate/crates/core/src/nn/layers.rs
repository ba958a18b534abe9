//! Layer primitives: valid 2-D convolution (im2col + GEMM), truncating
//! average pooling, inverted dropout, flatten and dense.

use ndarray::{Array1, Array2, Array3, Array4, NdFloat};
use num_traits::FromPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Raw strided GEMM, dispatched to matrixmultiply's f32/f64 kernels.
pub trait Gemm: Copy {
    /// C (m x n) = alpha * A (m x k) * B (k x n) + beta * C, with arbitrary
    /// (possibly overlapping-read) strides.
    ///
    /// # Safety
    /// Pointers must cover every index reachable through the strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize, k: usize, n: usize,
        alpha: Self,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        beta: Self,
        c: *mut Self, rsc: isize, csc: isize,
    );
}

impl Gemm for f32 {
    unsafe fn gemm(
        m: usize, k: usize, n: usize,
        alpha: Self,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        beta: Self,
        c: *mut Self, rsc: isize, csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Gemm for f64 {
    unsafe fn gemm(
        m: usize, k: usize, n: usize,
        alpha: Self,
        a: *const Self, rsa: isize, csa: isize,
        b: *const Self, rsb: isize, csb: isize,
        beta: Self,
        c: *mut Self, rsc: isize, csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Element type the network runs on.
pub trait NetFloat: NdFloat + FromPrimitive + Gemm {}
impl<T: NdFloat + FromPrimitive + Gemm> NetFloat for T {}

pub fn cast<F: NetFloat>(x: f64) -> F {
    F::from_f64(x).expect("f64 fits the element type")
}

/// Activation/value flowing between layers.
#[derive(Debug, Clone)]
pub enum Value<F> {
    Planes(Array3<F>),
    Vector(Array1<F>),
}

impl<F: NdFloat> Value<F> {
    pub fn planes(self) -> Array3<F> {
        match self {
            Value::Planes(p) => p,
            Value::Vector(_) => panic!("expected planes"),
        }
    }

    pub fn vector(self) -> Array1<F> {
        match self {
            Value::Vector(v) => v,
            Value::Planes(_) => panic!("expected vector"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    /// (out_ch, in_ch, kh, kw)
    pub weights: Array4<F>,
    pub bias: Array1<F>,
    pub relu: bool,
}

#[derive(Debug, Clone)]
pub struct Dense<F> {
    /// (out, in)
    pub weights: Array2<F>,
    pub bias: Array1<F>,
}

#[derive(Debug, Clone)]
pub enum Layer<F> {
    Conv(Conv2d<F>),
    AvgPool { kh: usize, kw: usize },
    Flatten,
    Dropout { rate: f64 },
    Dense(Dense<F>),
}

impl<F: NdFloat> Layer<F> {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv2d",
            Layer::AvgPool { .. } => "avg_pool",
            Layer::Flatten => "flatten",
            Layer::Dropout { .. } => "dropout",
            Layer::Dense(_) => "dense",
        }
    }
}

/// Unfolds valid convolution windows into a (C_in*kh*kw, H_out*W_out)
/// matrix. Each matrix row is h_out contiguous runs of w_out input samples,
/// so the copy is pure memmove.
pub fn im2col<F: NdFloat>(input: &Array3<F>, kh: usize, kw: usize) -> Array2<F> {
    let (c_in, h, w) = input.dim();
    let h_out = h - kh + 1;
    let w_out = w - kw + 1;
    let l = h_out * w_out;
    let src = input.as_slice().expect("input is standard layout");
    let mut cols = Array2::zeros((c_in * kh * kw, l));
    {
        let dst = cols.as_slice_mut().expect("fresh array is standard layout");
        for c in 0..c_in {
            for dh in 0..kh {
                for dw in 0..kw {
                    let row = (c * kh + dh) * kw + dw;
                    for oh in 0..h_out {
                        let s = c * h * w + (oh + dh) * w + dw;
                        let d = row * l + oh * w_out;
                        dst[d..d + w_out].copy_from_slice(&src[s..s + w_out]);
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a (C_in*kh*kw, H_out*W_out) gradient back onto input shape.
pub fn col2im<F: NdFloat>(
    cols: &Array2<F>,
    shape: (usize, usize, usize),
    kh: usize,
    kw: usize,
) -> Array3<F> {
    let (c_in, h, w) = shape;
    let h_out = h - kh + 1;
    let w_out = w - kw + 1;
    let l = h_out * w_out;
    let src = cols.as_slice().expect("cols is standard layout");
    let mut out = Array3::zeros(shape);
    {
        let dst = out.as_slice_mut().expect("fresh array is standard layout");
        for c in 0..c_in {
            for dh in 0..kh {
                for dw in 0..kw {
                    let row = (c * kh + dh) * kw + dw;
                    for oh in 0..h_out {
                        let d = c * h * w + (oh + dh) * w + dw;
                        let s = row * l + oh * w_out;
                        let (dst_run, src_run) = (&mut dst[d..d + w_out], &src[s..s + w_out]);
                        for (a, b) in dst_run.iter_mut().zip(src_run.iter()) {
                            *a += *b;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Forward-pass byproducts a conv layer needs for its backward pass.
/// The im2col matrix is rebuilt on demand: keeping the (much smaller) input
/// beats holding tens of MB of unfolded windows across the whole pass.
pub struct ConvTrace<F> {
    pub input: Array3<F>,
    /// ReLU keep-mask over the output (empty when the layer is linear).
    pub mask: Vec<u8>,
}

impl<F: NetFloat> Conv2d<F> {
    /// Forward from an owned input; the input moves into the trace.
    ///
    /// The convolution runs as strided GEMMs straight on the input (the
    /// k x w_out window matrix is an overlapping view with unit strides),
    /// so no im2col buffer is materialized.
    pub fn forward_owned(&self, input: Array3<F>) -> (Array3<F>, ConvTrace<F>) {
        let (out_ch, in_ch, kh, kw) = self.weights.dim();
        let (_, h, w) = input.dim();
        let h_out = h - kh + 1;
        let w_out = w - kw + 1;
        let mut out = Array3::zeros((out_ch, h_out, w_out));
        {
            let in_s = input.as_slice().expect("input is standard layout");
            let w_s = self.weights.as_slice().expect("weights are standard layout");
            let out_s: &mut [F] = out.as_slice_mut().expect("fresh array is standard layout");
            let one = F::one();
            for c in 0..in_ch {
                for dh in 0..kh {
                    for oh in 0..h_out {
                        // out[:, oh, :] += W[:, c, dh, :] * T, with
                        // T[dw, ow] = input[c, oh+dh, ow+dw].
                        unsafe {
                            F::gemm(
                                out_ch, kw, w_out,
                                one,
                                w_s.as_ptr().add(c * kh * kw + dh * kw),
                                (in_ch * kh * kw) as isize, 1,
                                in_s.as_ptr().add(c * h * w + (oh + dh) * w),
                                1, 1,
                                one,
                                out_s.as_mut_ptr().add(oh * w_out),
                                (h_out * w_out) as isize, 1,
                            );
                        }
                    }
                }
            }
            for (oc, b) in self.bias.iter().enumerate() {
                for v in out_s[oc * h_out * w_out..(oc + 1) * h_out * w_out].iter_mut() {
                    *v += *b;
                }
            }
        }
        let mut mask = Vec::new();
        if self.relu {
            mask.reserve(out.len());
            for v in out.iter_mut() {
                if *v > F::zero() {
                    mask.push(1);
                } else {
                    *v = F::zero();
                    mask.push(0);
                }
            }
        }
        (out, ConvTrace { input, mask })
    }

    pub fn forward(&self, input: &Array3<F>) -> (Array3<F>, ConvTrace<F>) {
        self.forward_owned(input.clone())
    }

    /// Backward through activation + convolution. `need_input_grad` is false
    /// for the first layer, whose input gradient nobody consumes.
    pub fn backward(
        &self,
        trace: &ConvTrace<F>,
        grad_out: &Array3<F>,
        need_input_grad: bool,
    ) -> (Array4<F>, Array1<F>, Option<Array3<F>>) {
        let (out_ch, in_ch, kh, kw) = self.weights.dim();
        let (_, h_out, w_out) = grad_out.dim();
        let (_, h, w) = trace.input.dim();
        let mut g = grad_out.clone();
        if self.relu {
            for (gv, keep) in g.iter_mut().zip(trace.mask.iter()) {
                if *keep == 0 {
                    *gv = F::zero();
                }
            }
        }

        let mut dw = Array4::zeros((out_ch, in_ch, kh, kw));
        {
            let g_s = g.as_slice().expect("grad is standard layout");
            let in_s = trace.input.as_slice().expect("input is standard layout");
            let dw_s: &mut [F] = dw.as_slice_mut().expect("fresh array is standard layout");
            let one = F::one();
            for c in 0..in_ch {
                for dh in 0..kh {
                    for oh in 0..h_out {
                        // dW[:, c, dh, :] += G[:, oh, :] * T, with
                        // T[ow, dw] = input[c, oh+dh, ow+dw].
                        unsafe {
                            F::gemm(
                                out_ch, w_out, kw,
                                one,
                                g_s.as_ptr().add(oh * w_out),
                                (h_out * w_out) as isize, 1,
                                in_s.as_ptr().add(c * h * w + (oh + dh) * w),
                                1, 1,
                                one,
                                dw_s.as_mut_ptr().add(c * kh * kw + dh * kw),
                                (in_ch * kh * kw) as isize, 1,
                            );
                        }
                    }
                }
            }
        }

        let g_flat = g
            .into_shape_with_order((out_ch, h_out * w_out))
            .expect("grad reshapes");
        let db = g_flat.sum_axis(ndarray::Axis(1));
        let dx = if need_input_grad {
            let w_flat = self
                .weights
                .view()
                .into_shape_with_order((out_ch, in_ch * kh * kw))
                .expect("conv weights are contiguous");
            let dcols = w_flat.t().dot(&g_flat);
            Some(col2im(&dcols, trace.input.dim(), kh, kw))
        } else {
            None
        };
        (dw, db, dx)
    }
}

/// Truncating average pooling: output dims are floor divisions, trailing
/// rows/cols that do not fill a window are dropped.
pub fn avg_pool_forward<F: NetFloat>(
    input: &Array3<F>,
    kh: usize,
    kw: usize,
) -> Array3<F> {
    let (c, h, w) = input.dim();
    let h_out = h / kh;
    let w_out = w / kw;
    let inv = cast::<F>(1.0 / (kh * kw) as f64);
    let src = input.as_slice().expect("input is standard layout");
    let mut out = Array3::zeros((c, h_out, w_out));
    {
        let dst = out.as_slice_mut().expect("fresh array is standard layout");
        for ci in 0..c {
            for oh in 0..h_out {
                let d0 = (ci * h_out + oh) * w_out;
                for dh in 0..kh {
                    let s0 = ci * h * w + (oh * kh + dh) * w;
                    let row = &src[s0..s0 + w_out * kw];
                    let acc = &mut dst[d0..d0 + w_out];
                    for (ow, a) in acc.iter_mut().enumerate() {
                        let mut sum = F::zero();
                        for dw in 0..kw {
                            sum += row[ow * kw + dw];
                        }
                        *a += sum;
                    }
                }
            }
        }
        for v in dst.iter_mut() {
            *v = *v * inv;
        }
    }
    out
}

pub fn avg_pool_backward<F: NetFloat>(
    grad_out: &Array3<F>,
    input_shape: (usize, usize, usize),
    kh: usize,
    kw: usize,
) -> Array3<F> {
    let (c, h_out, w_out) = grad_out.dim();
    let (_, h, w) = input_shape;
    let inv = cast::<F>(1.0 / (kh * kw) as f64);
    let src = grad_out.as_slice().expect("grad is standard layout");
    let mut dx = Array3::zeros(input_shape);
    {
        let dst = dx.as_slice_mut().expect("fresh array is standard layout");
        for ci in 0..c {
            for oh in 0..h_out {
                let s0 = (ci * h_out + oh) * w_out;
                let g_row = &src[s0..s0 + w_out];
                for dh in 0..kh {
                    let d0 = ci * h * w + (oh * kh + dh) * w;
                    let out_row = &mut dst[d0..d0 + w_out * kw];
                    for (ow, g) in g_row.iter().enumerate() {
                        let gv = *g * inv;
                        for dw in 0..kw {
                            out_row[ow * kw + dw] += gv;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Inverted dropout mask: kept elements are scaled by 1/(1-rate).
pub fn dropout_mask<F: NetFloat>(len: usize, rate: f64, seed: u64) -> Array1<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 - rate;
    let scale = cast::<F>(1.0 / keep);
    Array1::from_iter((0..len).map(|_| {
        if rng.gen::<f64>() < keep {
            scale
        } else {
            F::zero()
        }
    }))
}

impl<F: NdFloat> Dense<F> {
    pub fn forward(&self, input: &Array1<F>) -> Array1<F> {
        self.weights.dot(input) + &self.bias
    }

    pub fn backward(
        &self,
        input: &Array1<F>,
        grad_out: &Array1<F>,
    ) -> (Array2<F>, Array1<F>, Array1<F>) {
        let (out_dim, in_dim) = self.weights.dim();
        let mut dw = Array2::zeros((out_dim, in_dim));
        for o in 0..out_dim {
            let g = grad_out[o];
            for i in 0..in_dim {
                dw[(o, i)] = g * input[i];
            }
        }
        let dx = self.weights.t().dot(grad_out);
        (dw, grad_out.clone(), dx)
    }
}

/// Parameter gradients, one slot per layer (layers without parameters get
/// `LayerGrads::None`).
#[derive(Debug, Clone)]
pub enum LayerGrads<F> {
    Conv { dw: Array4<F>, db: Array1<F> },
    Dense { dw: Array2<F>, db: Array1<F> },
    None,
}

#[derive(Debug, Clone)]
pub struct Grads<F> {
    pub layers: Vec<LayerGrads<F>>,
}

impl<F: NdFloat> Grads<F> {
    pub fn add_assign(&mut self, other: &Grads<F>) {
        for (a, b) in self.layers.iter_mut().zip(other.layers.iter()) {
            match (a, b) {
                (
                    LayerGrads::Conv { dw, db },
                    LayerGrads::Conv { dw: dw2, db: db2 },
                ) => {
                    *dw += dw2;
                    *db += db2;
                }
                (
                    LayerGrads::Dense { dw, db },
                    LayerGrads::Dense { dw: dw2, db: db2 },
                ) => {
                    *dw += dw2;
                    *db += db2;
                }
                (LayerGrads::None, LayerGrads::None) => {}
                _ => panic!("gradient layout mismatch"),
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for layer in self.layers.iter_mut() {
            match layer {
                LayerGrads::Conv { dw, db } => {
                    dw.mapv_inplace(|v| v * factor);
                    db.mapv_inplace(|v| v * factor);
                }
                LayerGrads::Dense { dw, db } => {
                    dw.mapv_inplace(|v| v * factor);
                    db.mapv_inplace(|v| v * factor);
                }
                LayerGrads::None => {}
            }
        }
    }

    pub fn flat(&self) -> Vec<F> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                LayerGrads::Conv { dw, db } => {
                    out.extend(dw.iter().cloned());
                    out.extend(db.iter().cloned());
                }
                LayerGrads::Dense { dw, db } => {
                    out.extend(dw.iter().cloned());
                    out.extend(db.iter().cloned());
                }
                LayerGrads::None => {}
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|layer| match layer {
            LayerGrads::Conv { dw, db } => {
                dw.iter().all(|v| v.is_finite()) && db.iter().all(|v| v.is_finite())
            }
            LayerGrads::Dense { dw, db } => {
                dw.iter().all(|v| v.is_finite()) && db.iter().all(|v| v.is_finite())
            }
            LayerGrads::None => true,
        })
    }
}
