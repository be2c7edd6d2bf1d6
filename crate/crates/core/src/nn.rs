//! A small deterministic feed-forward stack in double precision.
//!
//! Tensors travel as row-major `[batch, channels * height * width]` matrices;
//! each layer knows its spatial input/output shape. A [`Network`] is a trunk
//! (whose output is the penultimate feature vector consumed by the
//! feature-separability loss) plus a linear classification head. Forward
//! passes cache activations so one backward pass can produce parameter
//! gradients, input gradients, or both, with gradient injection at the
//! feature tap.
//!
//! Convolutions lower to im2col + matrix multiplication. All randomness in
//! initialization comes from a dedicated seeded stream, so identical specs
//! and seeds yield bit-identical parameters.

use ndarray::{Array1, Array2, ArrayView1};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AtfsError, Result};
use crate::rng::{stream_rng, Stream};

/// Spatial shape `(channels, height, width)`.
pub type Shape = (usize, usize, usize);

fn shape_len(s: Shape) -> usize {
    s.0 * s.1 * s.2
}

/// Model output: classification logits plus the penultimate feature rows.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub logits: Array2<f64>,
    pub features: Array2<f64>,
}

/// Anything that can be attacked and analyzed: exposes logits, penultimate
/// features, and gradients of logit-level losses with respect to the input.
pub trait Model {
    fn num_classes(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn input_dim(&self) -> usize;

    fn predict(&self, x: &Array2<f64>) -> Result<Prediction>;

    /// Runs one forward pass, lets `make_grad` turn the prediction into a
    /// gradient with respect to the logits, and backpropagates it to the
    /// input. Implementations must not recompute the forward pass.
    fn predict_with_input_grad(
        &self,
        x: &Array2<f64>,
        make_grad: &mut dyn FnMut(&Prediction) -> Result<Array2<f64>>,
    ) -> Result<(Prediction, Array2<f64>)>;
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear {
    /// `[out, in]`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w: Array2::zeros((out_dim, in_dim)),
            b: Array1::zeros(out_dim),
        }
    }

    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.t());
        for mut row in y.rows_mut() {
            row += &self.b;
        }
        y
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    /// `[out_c, in_c * k * k]`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub in_shape: Shape,
    pub out_shape: Shape,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(in_shape: Shape, out_c: usize, kernel: usize, stride: usize, pad: usize) -> Result<Self> {
        let (c, h, w) = in_shape;
        if kernel == 0 || stride == 0 {
            return Err(AtfsError::InvalidArgument(
                "conv kernel and stride must be positive".into(),
            ));
        }
        if h + 2 * pad < kernel || w + 2 * pad < kernel {
            return Err(AtfsError::InvalidArgument(format!(
                "conv kernel {kernel} larger than padded input {h}x{w}+{pad}"
            )));
        }
        let oh = (h + 2 * pad - kernel) / stride + 1;
        let ow = (w + 2 * pad - kernel) / stride + 1;
        Ok(Conv2d {
            w: Array2::zeros((out_c, c * kernel * kernel)),
            b: Array1::zeros(out_c),
            in_shape,
            out_shape: (out_c, oh, ow),
            kernel,
            stride,
            pad,
        })
    }

    /// Lowers the batch to a `[in_c*k*k, batch * oh*ow]` patch matrix.
    fn im2col(&self, x: &Array2<f64>) -> Array2<f64> {
        let (c, h, w) = self.in_shape;
        let (_, oh, ow) = self.out_shape;
        let k = self.kernel;
        let p = oh * ow;
        let batch = x.nrows();
        let xs = x.as_slice().expect("input is standard layout");
        let mut col = Array2::zeros((c * k * k, batch * p));
        let cs = col.as_slice_mut().expect("fresh array is standard layout");
        let row_len = batch * p;
        for i in 0..batch {
            let sample = &xs[i * c * h * w..(i + 1) * c * h * w];
            for ic in 0..c {
                let plane = &sample[ic * h * w..(ic + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let krow = (ic * k + ky) * k + kx;
                        let out_base = krow * row_len + i * p;
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                cs[out_base + oy * ow + ox] = plane[iy * w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    /// Scatters a patch-matrix gradient back onto the input layout.
    fn col2im(&self, dcol: &Array2<f64>, batch: usize) -> Array2<f64> {
        let (c, h, w) = self.in_shape;
        let (_, oh, ow) = self.out_shape;
        let k = self.kernel;
        let p = oh * ow;
        let mut dx = Array2::zeros((batch, c * h * w));
        let dxs = dx.as_slice_mut().expect("fresh array is standard layout");
        let ds = dcol.as_slice().expect("gradient is standard layout");
        let row_len = batch * p;
        for i in 0..batch {
            let sample = &mut dxs[i * c * h * w..(i + 1) * c * h * w];
            for ic in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let krow = (ic * k + ky) * k + kx;
                        let in_base = krow * row_len + i * p;
                        for oy in 0..oh {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            for ox in 0..ow {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                sample[ic * h * w + iy * w + ix as usize] +=
                                    ds[in_base + oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let (oc, oh, ow) = self.out_shape;
        let p = oh * ow;
        let batch = x.nrows();
        let col = self.im2col(x);
        let prod = self.w.dot(&col); // [oc, batch * p]
        let mut y = Array2::zeros((batch, oc * p));
        let ys = y.as_slice_mut().expect("fresh array is standard layout");
        let ps = prod.as_slice().expect("gemm result is standard layout");
        for o in 0..oc {
            let bias = self.b[o];
            for i in 0..batch {
                let src = &ps[o * batch * p + i * p..o * batch * p + (i + 1) * p];
                let dst = &mut ys[i * oc * p + o * p..i * oc * p + (o + 1) * p];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bias;
                }
            }
        }
        (y, col)
    }

    /// Reshapes `[batch, oc * p]` gradients to the gemm layout `[oc, batch*p]`.
    fn grad_to_mat(&self, grad_out: &Array2<f64>) -> Array2<f64> {
        let (oc, oh, ow) = self.out_shape;
        let p = oh * ow;
        let batch = grad_out.nrows();
        let mut m = Array2::zeros((oc, batch * p));
        let ms = m.as_slice_mut().expect("fresh array is standard layout");
        let gs = grad_out.as_slice().expect("gradient is standard layout");
        for i in 0..batch {
            for o in 0..oc {
                let src = &gs[i * oc * p + o * p..i * oc * p + (o + 1) * p];
                let dst = &mut ms[o * batch * p + i * p..o * batch * p + (i + 1) * p];
                dst.copy_from_slice(src);
            }
        }
        m
    }
}

#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub in_shape: Shape,
    pub out_shape: Shape,
    pub size: usize,
}

impl MaxPool2d {
    pub fn new(in_shape: Shape, size: usize) -> Result<Self> {
        let (c, h, w) = in_shape;
        if size == 0 || h < size || w < size {
            return Err(AtfsError::InvalidArgument(format!(
                "pool size {size} invalid for input {h}x{w}"
            )));
        }
        Ok(MaxPool2d {
            in_shape,
            out_shape: (c, h / size, w / size),
            size,
        })
    }

    fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, Vec<u32>) {
        let (c, h, w) = self.in_shape;
        let (_, oh, ow) = self.out_shape;
        let batch = x.nrows();
        let xs = x.as_slice().expect("input is standard layout");
        let mut y = Array2::zeros((batch, c * oh * ow));
        let ys = y.as_slice_mut().expect("fresh array is standard layout");
        let mut argmax = vec![0u32; batch * c * oh * ow];
        for i in 0..batch {
            let sample = &xs[i * c * h * w..(i + 1) * c * h * w];
            for ic in 0..c {
                let plane = &sample[ic * h * w..(ic + 1) * h * w];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for dy in 0..self.size {
                            for dx in 0..self.size {
                                let idx = (oy * self.size + dy) * w + ox * self.size + dx;
                                if plane[idx] > best {
                                    best = plane[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        let out_idx = i * c * oh * ow + ic * oh * ow + oy * ow + ox;
                        ys[out_idx] = best;
                        argmax[out_idx] = (ic * h * w + best_idx) as u32;
                    }
                }
            }
        }
        (y, argmax)
    }

    fn backward(&self, grad_out: &Array2<f64>, argmax: &[u32]) -> Array2<f64> {
        let (c, h, w) = self.in_shape;
        let batch = grad_out.nrows();
        let mut dx = Array2::zeros((batch, c * h * w));
        let dxs = dx.as_slice_mut().expect("fresh array is standard layout");
        let gs = grad_out.as_slice().expect("gradient is standard layout");
        let out_len = grad_out.ncols();
        for i in 0..batch {
            for o in 0..out_len {
                dxs[i * c * h * w + argmax[i * out_len + o] as usize] += gs[i * out_len + o];
            }
        }
        dx
    }
}

#[derive(Debug, Clone)]
pub struct GlobalAvgPool {
    pub in_shape: Shape,
}

impl GlobalAvgPool {
    fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let (c, h, w) = self.in_shape;
        let plane = h * w;
        let batch = x.nrows();
        let mut y = Array2::zeros((batch, c));
        for i in 0..batch {
            let row = x.row(i);
            for ic in 0..c {
                let mut sum = 0.0;
                for j in 0..plane {
                    sum += row[ic * plane + j];
                }
                y[[i, ic]] = sum / plane as f64;
            }
        }
        y
    }

    fn backward(&self, grad_out: &Array2<f64>) -> Array2<f64> {
        let (c, h, w) = self.in_shape;
        let plane = h * w;
        let batch = grad_out.nrows();
        let mut dx = Array2::zeros((batch, c * plane));
        for i in 0..batch {
            for ic in 0..c {
                let g = grad_out[[i, ic]] / plane as f64;
                for j in 0..plane {
                    dx[[i, ic * plane + j]] = g;
                }
            }
        }
        dx
    }
}

/// Residual block: `relu(main(x) + shortcut(x))`, identity shortcut when the
/// shortcut chain is empty.
#[derive(Debug, Clone)]
pub struct Residual {
    pub main: Vec<Layer>,
    pub shortcut: Vec<Layer>,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Linear(Linear),
    Relu,
    Conv2d(Conv2d),
    MaxPool2d(MaxPool2d),
    GlobalAvgPool(GlobalAvgPool),
    /// Marks the transition from spatial to flat layout; identity on data.
    Flatten,
    Residual(Residual),
}

impl Layer {
    fn param_count(&self) -> usize {
        match self {
            Layer::Linear(l) => l.w.len() + l.b.len(),
            Layer::Conv2d(c) => c.w.len() + c.b.len(),
            Layer::Residual(r) => chain_param_count(&r.main) + chain_param_count(&r.shortcut),
            _ => 0,
        }
    }

    fn append_params(&self, out: &mut Vec<f64>) {
        match self {
            Layer::Linear(l) => {
                out.extend(l.w.iter());
                out.extend(l.b.iter());
            }
            Layer::Conv2d(c) => {
                out.extend(c.w.iter());
                out.extend(c.b.iter());
            }
            Layer::Residual(r) => {
                for l in r.main.iter().chain(r.shortcut.iter()) {
                    l.append_params(out);
                }
            }
            _ => {}
        }
    }

    fn load_params(&mut self, src: &mut std::slice::Iter<'_, f64>) {
        match self {
            Layer::Linear(l) => {
                for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                    *v = *src.next().expect("parameter count verified by caller");
                }
            }
            Layer::Conv2d(c) => {
                for v in c.w.iter_mut().chain(c.b.iter_mut()) {
                    *v = *src.next().expect("parameter count verified by caller");
                }
            }
            Layer::Residual(r) => {
                for l in r.main.iter_mut().chain(r.shortcut.iter_mut()) {
                    l.load_params(src);
                }
            }
            _ => {}
        }
    }

    fn out_len(&self, in_len: usize) -> usize {
        match self {
            Layer::Linear(l) => l.w.nrows(),
            Layer::Conv2d(c) => shape_len(c.out_shape),
            Layer::MaxPool2d(p) => shape_len(p.out_shape),
            Layer::GlobalAvgPool(g) => g.in_shape.0,
            Layer::Residual(r) => chain_out_len(&r.main, in_len),
            Layer::Relu | Layer::Flatten => in_len,
        }
    }
}

fn chain_param_count(layers: &[Layer]) -> usize {
    layers.iter().map(Layer::param_count).sum()
}

fn chain_out_len(layers: &[Layer], mut len: usize) -> usize {
    for l in layers {
        len = l.out_len(len);
    }
    len
}

// ---------------------------------------------------------------------------
// Forward / backward over layer chains
// ---------------------------------------------------------------------------

enum LayerCache {
    None,
    /// im2col patch matrix of a convolution.
    Col(Array2<f64>),
    /// Flat argmax indices of a max-pool.
    Pool(Vec<u32>),
    /// Nested caches plus the pre-activation sum of a residual block.
    Res(Box<ResCache>),
}

struct ResCache {
    main: ChainCache,
    shortcut: Option<ChainCache>,
    pre_relu: Array2<f64>,
}

struct ChainCache {
    /// `activations[i]` is the input of layer `i`; the final output iskept by
    /// the caller.
    activations: Vec<Array2<f64>>,
    caches: Vec<LayerCache>,
}

fn forward_chain(layers: &[Layer], x: &Array2<f64>) -> Result<(Array2<f64>, ChainCache)> {
    let mut activations = Vec::with_capacity(layers.len());
    let mut caches = Vec::with_capacity(layers.len());
    let mut cur = x.clone();
    for layer in layers {
        activations.push(cur.clone());
        let (next, cache) = match layer {
            Layer::Linear(l) => {
                if cur.ncols() != l.w.ncols() {
                    return Err(AtfsError::ShapeMismatch(format!(
                        "linear expected {} inputs, got {}",
                        l.w.ncols(),
                        cur.ncols()
                    )));
                }
                (l.forward(&cur), LayerCache::None)
            }
            Layer::Relu => (cur.mapv(|v| v.max(0.0)), LayerCache::None),
            Layer::Conv2d(c) => {
                if cur.ncols() != shape_len(c.in_shape) {
                    return Err(AtfsError::ShapeMismatch(format!(
                        "conv expected {} inputs, got {}",
                        shape_len(c.in_shape),
                        cur.ncols()
                    )));
                }
                let (y, col) = c.forward(&cur);
                (y, LayerCache::Col(col))
            }
            Layer::MaxPool2d(p) => {
                let (y, idx) = p.forward(&cur);
                (y, LayerCache::Pool(idx))
            }
            Layer::GlobalAvgPool(g) => (g.forward(&cur), LayerCache::None),
            Layer::Flatten => (cur.clone(), LayerCache::None),
            Layer::Residual(r) => {
                let (m, main_cache) = forward_chain(&r.main, &cur)?;
                let (s, shortcut_cache) = if r.shortcut.is_empty() {
                    (cur.clone(), None)
                } else {
                    let (s, c) = forward_chain(&r.shortcut, &cur)?;
                    (s, Some(c))
                };
                if m.dim() != s.dim() {
                    return Err(AtfsError::ShapeMismatch(format!(
                        "residual branch shapes {:?} vs {:?}",
                        m.dim(),
                        s.dim()
                    )));
                }
                let pre = m + s;
                let y = pre.mapv(|v| v.max(0.0));
                (
                    y,
                    LayerCache::Res(Box::new(ResCache {
                        main: main_cache,
                        shortcut: shortcut_cache,
                        pre_relu: pre,
                    })),
                )
            }
        };
        caches.push(cache);
        cur = next;
    }
    Ok((cur, ChainCache { activations, caches }))
}

/// Backpropagates `grad_out` through a chain. Parameter gradients accumulate
/// into `grad_sink` (flat, chain order); pass `None` to skip them. Returns
/// the gradient with respect to the chain input when `need_input_grad`.
fn backward_chain(
    layers: &[Layer],
    cache: &ChainCache,
    mut grad: Array2<f64>,
    mut grad_sink: Option<&mut [f64]>,
    need_input_grad: bool,
) -> Result<Option<Array2<f64>>> {
    // Parameter slice offsets in forward order.
    let mut offsets = Vec::with_capacity(layers.len());
    let mut off = 0usize;
    for l in layers {
        offsets.push(off);
        off += l.param_count();
    }
    if let Some(sink) = &grad_sink {
        debug_assert_eq!(sink.len(), off);
    }

    for (i, layer) in layers.iter().enumerate().rev() {
        let input = &cache.activations[i];
        let last = i == 0 && !need_input_grad;
        let need_dx = !(i == 0 && !need_input_grad);
        grad = match (layer, &cache.caches[i]) {
            (Layer::Linear(l), _) => {
                if let Some(sink) = grad_sink.as_deref_mut() {
                    let slice = &mut sink[offsets[i]..offsets[i] + layer.param_count()];
                    let dw = grad.t().dot(input); // [out, in]
                    let (wlen, _) = (l.w.len(), l.b.len());
                    for (dst, src) in slice[..wlen].iter_mut().zip(dw.iter()) {
                        *dst += *src;
                    }
                    for (j, dst) in slice[wlen..].iter_mut().enumerate() {
                        *dst += grad.column(j).sum();
                    }
                }
                if need_dx {
                    grad.dot(&l.w)
                } else {
                    break_grad()
                }
            }
            (Layer::Relu, _) => {
                let mut dx = grad;
                ndarray::Zip::from(&mut dx).and(input).for_each(|g, &v| {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                });
                dx
            }
            (Layer::Conv2d(c), LayerCache::Col(col)) => {
                let gmat = c.grad_to_mat(&grad); // [oc, batch*p]
                if let Some(sink) = grad_sink.as_deref_mut() {
                    let slice = &mut sink[offsets[i]..offsets[i] + layer.param_count()];
                    let dw = gmat.dot(&col.t()); // [oc, ic*k*k]
                    let wlen = c.w.len();
                    for (dst, src) in slice[..wlen].iter_mut().zip(dw.iter()) {
                        *dst += *src;
                    }
                    for (o, dst) in slice[wlen..].iter_mut().enumerate() {
                        *dst += gmat.row(o).sum();
                    }
                }
                if need_dx {
                    let dcol = c.w.t().dot(&gmat);
                    c.col2im(&dcol, grad.nrows())
                } else {
                    break_grad()
                }
            }
            (Layer::Conv2d(_), _) => unreachable!("conv cache mismatch"),
            (Layer::MaxPool2d(p), LayerCache::Pool(idx)) => p.backward(&grad, idx),
            (Layer::MaxPool2d(_), _) => unreachable!("pool cache mismatch"),
            (Layer::GlobalAvgPool(g), _) => g.backward(&grad),
            (Layer::Flatten, _) => grad,
            (Layer::Residual(r), LayerCache::Res(rc)) => {
                let mut dpre = grad;
                ndarray::Zip::from(&mut dpre).and(&rc.pre_relu).for_each(|g, &v| {
                    if v <= 0.0 {
                        *g = 0.0;
                    }
                });
                let main_params = chain_param_count(&r.main);
                let total = layer.param_count();
                let (main_sink, shortcut_sink) = match grad_sink.as_deref_mut() {
                    Some(sink) => {
                        let slice = &mut sink[offsets[i]..offsets[i] + total];
                        let (a, b) = slice.split_at_mut(main_params);
                        (Some(a), Some(b))
                    }
                    None => (None, None),
                };
                let d_main =
                    backward_chain(&r.main, &rc.main, dpre.clone(), main_sink, need_dx)?;
                let d_short = match (&rc.shortcut, shortcut_sink) {
                    (Some(sc), sink) => {
                        backward_chain(&r.shortcut, sc, dpre.clone(), sink, need_dx)?
                    }
                    (None, _) => {
                        if need_dx {
                            Some(dpre)
                        } else {
                            None
                        }
                    }
                };
                if need_dx {
                    let mut dx = d_main.expect("requested input grad");
                    dx += &d_short.expect("requested input grad");
                    dx
                } else {
                    break_grad()
                }
            }
            (Layer::Residual(_), _) => unreachable!("residual cache mismatch"),
        };
        if last {
            return Ok(None);
        }
    }
    Ok(Some(grad))
}

/// Placeholder gradient returned when the caller asked to stop before the
/// chain input; never read.
fn break_grad() -> Array2<f64> {
    Array2::zeros((0, 0))
}

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

/// Trunk-plus-head network. The trunk output is the penultimate feature
/// vector; the head is a linear classifier over it.
#[derive(Debug, Clone)]
pub struct Network {
    input_shape: Shape,
    num_classes: usize,
    trunk: Vec<Layer>,
    head: Linear,
}

/// Cached activations of one forward pass, consumed by the backward calls.
pub struct NetCache {
    trunk: ChainCache,
    features: Array2<f64>,
}

impl Network {
    /// Assembles a network from explicit parts, validating the layer chain.
    pub fn from_parts(
        input_shape: Shape,
        num_classes: usize,
        trunk: Vec<Layer>,
        head: Linear,
    ) -> Result<Self> {
        let feat = chain_out_len(&trunk, shape_len(input_shape));
        if head.w.ncols() != feat {
            return Err(AtfsError::ShapeMismatch(format!(
                "head expects {} features, trunk produces {feat}",
                head.w.ncols()
            )));
        }
        if head.w.nrows() != num_classes {
            return Err(AtfsError::ShapeMismatch(format!(
                "head produces {} logits for {num_classes} classes",
                head.w.nrows()
            )));
        }
        Ok(Network {
            input_shape,
            num_classes,
            trunk,
            head,
        })
    }

    pub fn input_shape(&self) -> Shape {
        self.input_shape
    }

    pub fn param_count(&self) -> usize {
        chain_param_count(&self.trunk) + self.head.w.len() + self.head.b.len()
    }

    /// All parameters as one flat vector (trunk in layer order, then head).
    pub fn param_vector(&self) -> Array1<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.trunk {
            l.append_params(&mut out);
        }
        out.extend(self.head.w.iter());
        out.extend(self.head.b.iter());
        Array1::from(out)
    }

    pub fn load_param_vector(&mut self, v: ArrayView1<f64>) -> Result<()> {
        if v.len() != self.param_count() {
            return Err(AtfsError::ShapeMismatch(format!(
                "parameter vector length {} != {}",
                v.len(),
                self.param_count()
            )));
        }
        let flat: Vec<f64> = v.iter().cloned().collect();
        let mut it = flat.iter();
        for l in &mut self.trunk {
            l.load_params(&mut it);
        }
        for dst in self.head.w.iter_mut().chain(self.head.b.iter_mut()) {
            *dst = *it.next().expect("length checked");
        }
        Ok(())
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != shape_len(self.input_shape) {
            return Err(AtfsError::ShapeMismatch(format!(
                "input dim {} != expected {}",
                x.ncols(),
                shape_len(self.input_shape)
            )));
        }
        if x.nrows() == 0 {
            return Err(AtfsError::InvalidArgument("empty batch".into()));
        }
        Ok(())
    }

    /// Forward pass returning prediction plus the cache for backward calls.
    pub fn forward_full(&self, x: &Array2<f64>) -> Result<(Prediction, NetCache)> {
        self.check_input(x)?;
        let (features, trunk_cache) = forward_chain(&self.trunk, x)?;
        let logits = self.head.forward(&features);
        Ok((
            Prediction {
                logits,
                features: features.clone(),
            },
            NetCache {
                trunk: trunk_cache,
                features,
            },
        ))
    }

    /// Parameter gradients of a scalar objective given its gradient with
    /// respect to the logits and, optionally, an extra gradient injected at
    /// the feature tap (used by the feature-separability term).
    pub fn backward_full(
        &self,
        cache: &NetCache,
        grad_logits: &Array2<f64>,
        grad_features: Option<&Array2<f64>>,
    ) -> Result<Array1<f64>> {
        let mut grads = vec![0.0; self.param_count()];
        let trunk_params = chain_param_count(&self.trunk);

        // Head gradients.
        let dw = grad_logits.t().dot(&cache.features);
        let wlen = self.head.w.len();
        grads[trunk_params..trunk_params + wlen].copy_from_slice(dw.as_slice().unwrap());
        for (j, slot) in grads[trunk_params + wlen..].iter_mut().enumerate() {
            *slot = grad_logits.column(j).sum();
        }

        // Feature gradient: head backprop plus the injected term.
        let mut dfeat = grad_logits.dot(&self.head.w);
        if let Some(extra) = grad_features {
            if extra.dim() != dfeat.dim() {
                return Err(AtfsError::ShapeMismatch(format!(
                    "injected feature grad {:?} != {:?}",
                    extra.dim(),
                    dfeat.dim()
                )));
            }
            dfeat += extra;
        }

        backward_chain(
            &self.trunk,
            &cache.trunk,
            dfeat,
            Some(&mut grads[..trunk_params]),
            false,
        )?;
        Ok(Array1::from(grads))
    }

    /// Gradient of a logit-level scalar with respect to the input batch.
    pub fn backward_input(&self, cache: &NetCache, grad_logits: &Array2<f64>) -> Result<Array2<f64>> {
        let dfeat = grad_logits.dot(&self.head.w);
        let dx = backward_chain(&self.trunk, &cache.trunk, dfeat, None, true)?;
        Ok(dx.expect("input gradient requested"))
    }
}

impl Model for Network {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn feature_dim(&self) -> usize {
        self.head.w.ncols()
    }

    fn input_dim(&self) -> usize {
        shape_len(self.input_shape)
    }

    fn predict(&self, x: &Array2<f64>) -> Result<Prediction> {
        self.forward_full(x).map(|(p, _)| p)
    }

    fn predict_with_input_grad(
        &self,
        x: &Array2<f64>,
        make_grad: &mut dyn FnMut(&Prediction) -> Result<Array2<f64>>,
    ) -> Result<(Prediction, Array2<f64>)> {
        let (pred, cache) = self.forward_full(x)?;
        let grad_logits = make_grad(&pred)?;
        let dx = self.backward_input(&cache, &grad_logits)?;
        Ok((pred, dx))
    }
}

// ---------------------------------------------------------------------------
// Model specifications and the factory
// ---------------------------------------------------------------------------

fn default_mlp_hidden() -> Vec<usize> {
    vec![32]
}

fn default_mlp_feature_dim() -> usize {
    8
}

fn default_cnn_channels() -> [usize; 2] {
    [8, 16]
}

fn default_cnn_feature_dim() -> usize {
    64
}

fn default_base_width() -> usize {
    64
}

/// Architecture selection. Every variant exposes a penultimate feature tap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "architecture", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ModelSpec {
    /// Fully connected ReLU stack on flattened input.
    Mlp {
        #[serde(default = "default_mlp_hidden")]
        hidden: Vec<usize>,
        #[serde(default = "default_mlp_feature_dim")]
        feature_dim: usize,
    },
    /// Two conv/pool stages plus one hidden linear layer.
    SmallCnn {
        #[serde(default = "default_cnn_channels")]
        channels: [usize; 2],
        #[serde(default = "default_cnn_feature_dim")]
        feature_dim: usize,
    },
    /// The standard 2-2-2-2 basic-block layout with widths x1/x2/x4/x8 and a
    /// global average pool; `base_width` 64 reproduces the familiar
    /// 512-dimensional feature tap on 32x32x3 input.
    Resnet18Shape {
        #[serde(default = "default_base_width")]
        base_width: usize,
    },
}

impl ModelSpec {
    /// Dimension of the penultimate feature vector this spec produces.
    pub fn feature_dim(&self) -> usize {
        match self {
            ModelSpec::Mlp { feature_dim, .. } => *feature_dim,
            ModelSpec::SmallCnn { feature_dim, .. } => *feature_dim,
            ModelSpec::Resnet18Shape { base_width } => 8 * base_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            ModelSpec::Mlp { hidden, feature_dim } => {
                *feature_dim > 0 && hidden.iter().all(|&h| h > 0)
            }
            ModelSpec::SmallCnn { channels, feature_dim } => {
                *feature_dim > 0 && channels.iter().all(|&c| c > 0)
            }
            ModelSpec::Resnet18Shape { base_width } => *base_width > 0,
        };
        if ok {
            Ok(())
        } else {
            Err(AtfsError::InvalidArgument(format!(
                "model spec has a zero-sized dimension: {self:?}"
            )))
        }
    }
}

/// He-uniform initialization over the layer chain, in parameter order.
fn init_chain(layers: &mut [Layer], rng: &mut impl Rng) {
    for layer in layers {
        match layer {
            Layer::Linear(l) => {
                let bound = (6.0 / l.w.ncols() as f64).sqrt();
                for v in l.w.iter_mut() {
                    *v = (2.0 * rng.random::<f64>() - 1.0) * bound;
                }
            }
            Layer::Conv2d(c) => {
                let bound = (6.0 / c.w.ncols() as f64).sqrt();
                for v in c.w.iter_mut() {
                    *v = (2.0 * rng.random::<f64>() - 1.0) * bound;
                }
            }
            Layer::Residual(r) => {
                init_chain(&mut r.main, rng);
                init_chain(&mut r.shortcut, rng);
            }
            _ => {}
        }
    }
}

fn basic_block(in_shape: Shape, out_c: usize, stride: usize) -> Result<Layer> {
    let conv1 = Conv2d::new(in_shape, out_c, 3, stride, 1)?;
    let mid_shape = conv1.out_shape;
    let conv2 = Conv2d::new(mid_shape, out_c, 3, 1, 1)?;
    let main = vec![Layer::Conv2d(conv1), Layer::Relu, Layer::Conv2d(conv2)];
    let shortcut = if stride != 1 || in_shape.0 != out_c {
        vec![Layer::Conv2d(Conv2d::new(in_shape, out_c, 1, stride, 0)?)]
    } else {
        vec![]
    };
    Ok(Layer::Residual(Residual { main, shortcut }))
}

/// Builds and initializes the network described by `spec` for the given
/// input shape and class count. Identical arguments produce bit-identical
/// parameters.
pub fn build_model(
    spec: &ModelSpec,
    input_shape: Shape,
    num_classes: usize,
    seed: u64,
) -> Result<Network> {
    spec.validate()?;
    if num_classes < 2 {
        return Err(AtfsError::InvalidArgument(
            "need at least two classes".into(),
        ));
    }
    let input_len = shape_len(input_shape);
    if input_len == 0 {
        return Err(AtfsError::InvalidArgument("empty input shape".into()));
    }

    let mut trunk: Vec<Layer> = Vec::new();
    match spec {
        ModelSpec::Mlp { hidden, feature_dim } => {
            let mut dim = input_len;
            trunk.push(Layer::Flatten);
            for &h in hidden {
                trunk.push(Layer::Linear(Linear::new(dim, h)));
                trunk.push(Layer::Relu);
                dim = h;
            }
            trunk.push(Layer::Linear(Linear::new(dim, *feature_dim)));
            trunk.push(Layer::Relu);
        }
        ModelSpec::SmallCnn { channels, feature_dim } => {
            let conv1 = Conv2d::new(input_shape, channels[0], 3, 1, 1)?;
            let pool1 = MaxPool2d::new(conv1.out_shape, 2)?;
            let conv2 = Conv2d::new(pool1.out_shape, channels[1], 3, 1, 1)?;
            let pool2 = MaxPool2d::new(conv2.out_shape, 2)?;
            let flat = shape_len(pool2.out_shape);
            trunk.push(Layer::Conv2d(conv1));
            trunk.push(Layer::Relu);
            trunk.push(Layer::MaxPool2d(pool1));
            trunk.push(Layer::Conv2d(conv2));
            trunk.push(Layer::Relu);
            trunk.push(Layer::MaxPool2d(pool2));
            trunk.push(Layer::Flatten);
            trunk.push(Layer::Linear(Linear::new(flat, *feature_dim)));
            trunk.push(Layer::Relu);
        }
        ModelSpec::Resnet18Shape { base_width } => {
            let stem = Conv2d::new(input_shape, *base_width, 3, 1, 1)?;
            let mut shape = stem.out_shape;
            trunk.push(Layer::Conv2d(stem));
            trunk.push(Layer::Relu);
            for (stage, &mult) in [1usize, 2, 4, 8].iter().enumerate() {
                let out_c = base_width * mult;
                let stride = if stage == 0 { 1 } else { 2 };
                let block1 = basic_block(shape, out_c, stride)?;
                shape = match &block1 {
                    Layer::Residual(r) => match &r.main[2] {
                        Layer::Conv2d(c) => c.out_shape,
                        _ => unreachable!(),
                    },
                    _ => unreachable!(),
                };
                let block2 = basic_block(shape, out_c, 1)?;
                trunk.push(block1);
                trunk.push(block2);
            }
            trunk.push(Layer::GlobalAvgPool(GlobalAvgPool { in_shape: shape }));
            trunk.push(Layer::Flatten);
        }
    }

    let feature_dim = spec.feature_dim();
    let mut head = Linear::new(feature_dim, num_classes);

    let mut rng = stream_rng(seed, Stream::Init, 0, 0);
    init_chain(&mut trunk, &mut rng);
    let bound = (6.0 / head.w.ncols() as f64).sqrt();
    for v in head.w.iter_mut() {
        *v = (2.0 * rng.random::<f64>() - 1.0) * bound;
    }

    Network::from_parts(input_shape, num_classes, trunk, head)
}
