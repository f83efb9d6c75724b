use super::{BatchNorm2d, Conv2d, Dense, EngineError, Layer, Model, Pool2d, Scalar, Tensor};

/// Batch-norm behaviour for a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics normalize the batch; they are cached for a later running-stat update.
    Train,
    /// Running statistics normalize the batch.
    Eval,
}

/// Collects per-neuron outputs during forward passes, in neuron-id order.
///
/// For every sample the neuron's output values (one per spatial position for
/// conv/BN channels, a single value for dense units) are appended, so after
/// several batches each buffer holds the concatenation over all samples.
#[derive(Clone, Debug, Default)]
pub struct OutputSink {
    /// `(layer index, first neuron id)` for every neuron-owning layer.
    layers: Vec<(usize, usize)>,
    outputs: Vec<Vec<f64>>,
}

impl OutputSink {
    pub fn for_model<F: Scalar>(model: &Model<F>) -> Self {
        let mut layers = Vec::new();
        let mut next = 0;
        for (index, layer) in model.layers().iter().enumerate() {
            let n = layer.neuron_count();
            if n > 0 {
                layers.push((index, next));
                next += n;
            }
        }
        Self {
            layers,
            outputs: vec![Vec::new(); next],
        }
    }

    pub fn neuron_count(&self) -> usize {
        self.outputs.len()
    }

    pub fn outputs(&self) -> &[Vec<f64>] {
        &self.outputs
    }

    pub fn into_outputs(self) -> Vec<Vec<f64>> {
        self.outputs
    }

    fn record<F: Scalar>(&mut self, layer: usize, output: &Tensor<F>) {
        let Some(&(_, first)) = self.layers.iter().find(|(l, _)| *l == layer) else {
            return;
        };
        let shape = output.shape();
        let batch = shape[0];
        let channels = shape[1];
        let spatial: usize = shape[2..].iter().product();
        let data = output.data();
        for n in 0..batch {
            for c in 0..channels {
                let start = (n * channels + c) * spatial;
                self.outputs[first + c]
                    .extend(data[start..start + spatial].iter().map(|v| v.as_f64()));
            }
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Aux<F> {
    None,
    /// Flat input index of the max for every output element.
    ArgMax(Vec<usize>),
    BatchNorm {
        xhat: Vec<F>,
        inv_std: Vec<F>,
        mean: Vec<F>,
        var: Vec<F>,
    },
}

/// Activations kept by `forward` for the matching `backward`.
#[derive(Clone, Debug)]
pub struct ForwardCache<F> {
    pub(crate) mode: Mode,
    /// Input of every layer, batch-major.
    pub(crate) inputs: Vec<Tensor<F>>,
    pub(crate) aux: Vec<Aux<F>>,
}

impl<F: Scalar> ForwardCache<F> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn batch_size(&self) -> usize {
        self.inputs.first().map_or(0, |t| t.shape()[0])
    }

    /// Input tensor fed to layer `index`.
    pub fn layer_input(&self, index: usize) -> &Tensor<F> {
        &self.inputs[index]
    }
}

/// Runs the chain on `batch` (`[N, ..input_shape]`) and returns the logits.
pub fn forward<F: Scalar>(
    model: &Model<F>,
    batch: &Tensor<F>,
    mode: Mode,
    mut sink: Option<&mut OutputSink>,
) -> Result<(Tensor<F>, ForwardCache<F>), EngineError> {
    let expected: Vec<usize> = std::iter::once(batch.shape()[0])
        .chain(model.input_shape().iter().copied())
        .collect();
    if batch.shape() != expected.as_slice() {
        return Err(EngineError::ShapeMismatch {
            layer: 0,
            expected,
            actual: batch.shape().to_vec(),
        });
    }
    let mut inputs = Vec::with_capacity(model.len());
    let mut aux = Vec::with_capacity(model.len());
    let mut current = batch.clone();
    for (index, layer) in model.layers().iter().enumerate() {
        let (out, a) = match layer {
            Layer::Dense(d) => (dense_forward(d, &current), Aux::None),
            Layer::Conv2d(c) => (conv_forward(c, &current), Aux::None),
            Layer::Relu => (relu_forward(&current), Aux::None),
            Layer::MaxPool2d(p) => {
                let (out, idx) = maxpool_forward(p, &current);
                (out, Aux::ArgMax(idx))
            }
            Layer::AvgPool2d(p) => (avgpool_forward(p, &current), Aux::None),
            Layer::Flatten => {
                let n = current.shape()[0];
                let rest = current.len() / n;
                (current.clone().reshape(vec![n, rest])?, Aux::None)
            }
            Layer::BatchNorm2d(b) => batchnorm_forward(b, &current, mode),
            Layer::SoftmaxXent => (current.clone(), Aux::None),
        };
        if let Some(sink) = sink.as_deref_mut() {
            if layer.neuron_count() > 0 {
                sink.record(index, &out);
            }
        }
        inputs.push(current);
        aux.push(a);
        current = out;
    }
    Ok((current, ForwardCache { mode, inputs, aux }))
}

fn dense_forward<F: Scalar>(d: &Dense<F>, x: &Tensor<F>) -> Tensor<F> {
    let n = x.shape()[0];
    let (fan_out, fan_in) = (d.weight.shape()[0], d.weight.shape()[1]);
    let w = d.weight.data();
    let xs = x.data();
    let mut out = vec![F::zero(); n * fan_out];
    for s in 0..n {
        let row = &xs[s * fan_in..(s + 1) * fan_in];
        for o in 0..fan_out {
            let mut acc = dot(&w[o * fan_in..(o + 1) * fan_in], row);
            if let Some(b) = &d.bias {
                acc = acc + b.data()[o];
            }
            out[s * fan_out + o] = acc;
        }
    }
    Tensor::new(vec![n, fan_out], out).expect("dense output shape")
}

pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub(crate) fn new<F: Scalar>(c: &Conv2d<F>, x_shape: &[usize]) -> Self {
        let ws = c.weight.shape();
        let (h, w) = (x_shape[2], x_shape[3]);
        let k = ws[2];
        Self {
            n: x_shape[0],
            c_in: ws[1],
            h,
            w,
            c_out: ws[0],
            k,
            stride: c.stride,
            pad: c.padding,
            oh: (h + 2 * c.padding - k) / c.stride + 1,
            ow: (w + 2 * c.padding - k) / c.stride + 1,
        }
    }

    /// Input row for output row `o` and kernel row `kk`, if inside the unpadded input.
    #[inline]
    pub(crate) fn src(&self, o: usize, kk: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + kk) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }

    /// Output positions in `0..out` whose source for kernel offset `kk` lies inside `0..limit`,
    /// and the source of the first of them.
    #[inline]
    pub(crate) fn span(
        &self,
        kk: usize,
        limit: usize,
        out: usize,
    ) -> (std::ops::Range<usize>, usize) {
        let lo = if self.pad > kk {
            (self.pad - kk).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if limit + self.pad > kk {
            ((limit - 1 + self.pad - kk) / self.stride + 1).min(out)
        } else {
            0
        };
        let lo = lo.min(hi);
        (lo..hi, (lo * self.stride + kk).saturating_sub(self.pad))
    }
}

/// Sum of `a[i]·b[i]` over eight interleaved partial sums.
#[inline]
pub(crate) fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut lanes = [F::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] = lanes[l] + x[l] * y[l];
        }
    }
    let mut tail = F::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail = tail + *x * *y;
    }
    lanes.iter().fold(tail, |acc, &v| acc + v)
}

/// `dst[i] += alpha·src[i]`
#[inline]
pub(crate) fn axpy<F: Scalar>(dst: &mut [F], alpha: F, src: &[F]) {
    for (d, &v) in dst.iter_mut().zip(src) {
        *d = *d + alpha * v;
    }
}

/// Unfolds sample `s` of `xs` into `col`, laid out `[c_in·k·k, oh·ow]` with
/// rows in weight order. Padding positions are zero.
pub(crate) fn im2col<F: Scalar>(g: &ConvGeom, xs: &[F], s: usize, col: &mut [F]) {
    let plane = g.oh * g.ow;
    col.fill(F::zero());
    for ci in 0..g.c_in {
        let x_base = (s * g.c_in + ci) * g.h * g.w;
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut col[((ci * g.k + ky) * g.k + kx) * plane..][..plane];
                let (xr, ix0) = g.span(kx, g.w, g.ow);
                if xr.is_empty() {
                    continue;
                }
                for oy in 0..g.oh {
                    let Some(iy) = g.src(oy, ky, g.h) else {
                        continue;
                    };
                    let src = &xs[x_base + iy * g.w + ix0..];
                    for (j, d) in row[oy * g.ow + xr.start..oy * g.ow + xr.end]
                        .iter_mut()
                        .enumerate()
                    {
                        *d = src[j * g.stride];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: adds every entry of `col` into its source position of sample `s`.
pub(crate) fn col2im_add<F: Scalar>(g: &ConvGeom, col: &[F], s: usize, dx: &mut [F]) {
    let plane = g.oh * g.ow;
    for ci in 0..g.c_in {
        let x_base = (s * g.c_in + ci) * g.h * g.w;
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &col[((ci * g.k + ky) * g.k + kx) * plane..][..plane];
                let (xr, ix0) = g.span(kx, g.w, g.ow);
                if xr.is_empty() {
                    continue;
                }
                for oy in 0..g.oh {
                    let Some(iy) = g.src(oy, ky, g.h) else {
                        continue;
                    };
                    let base = x_base + iy * g.w + ix0;
                    for (j, &v) in row[oy * g.ow + xr.start..oy * g.ow + xr.end]
                        .iter()
                        .enumerate()
                    {
                        let i = base + j * g.stride;
                        dx[i] = dx[i] + v;
                    }
                }
            }
        }
    }
}

fn conv_forward<F: Scalar>(c: &Conv2d<F>, x: &Tensor<F>) -> Tensor<F> {
    let g = ConvGeom::new(c, x.shape());
    let w = c.weight.data();
    let plane = g.oh * g.ow;
    let kdim = g.c_in * g.k * g.k;
    let mut col = vec![F::zero(); kdim * plane];
    let mut out = vec![F::zero(); g.n * g.c_out * plane];
    for s in 0..g.n {
        im2col(&g, x.data(), s, &mut col);
        for co in 0..g.c_out {
            let dst = &mut out[(s * g.c_out + co) * plane..][..plane];
            if let Some(b) = &c.bias {
                dst.fill(b.data()[co]);
            }
            for (kk, &wv) in w[co * kdim..(co + 1) * kdim].iter().enumerate() {
                axpy(dst, wv, &col[kk * plane..(kk + 1) * plane]);
            }
        }
    }
    Tensor::new(vec![g.n, g.c_out, g.oh, g.ow], out).expect("conv output shape")
}

fn relu_forward<F: Scalar>(x: &Tensor<F>) -> Tensor<F> {
    let data = x
        .data()
        .iter()
        .map(|&v| if v > F::zero() { v } else { F::zero() })
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn pool_shape(p: &Pool2d, shape: &[usize]) -> (usize, usize, usize, usize, usize, usize) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let oh = (h - p.window) / p.stride + 1;
    let ow = (w - p.window) / p.stride + 1;
    (n, c, h, w, oh, ow)
}

fn maxpool_forward<F: Scalar>(p: &Pool2d, x: &Tensor<F>) -> (Tensor<F>, Vec<usize>) {
    let (n, c, h, w, oh, ow) = pool_shape(p, x.shape());
    let xs = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut idx = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * p.stride * w + ox * p.stride;
                for ky in 0..p.window {
                    for kx in 0..p.window {
                        let i = base + (oy * p.stride + ky) * w + ox * p.stride + kx;
                        if xs[i] > xs[best] {
                            best = i;
                        }
                    }
                }
                out.push(xs[best]);
                idx.push(best);
            }
        }
    }
    (
        Tensor::new(vec![n, c, oh, ow], out).expect("pool shape"),
        idx,
    )
}

fn avgpool_forward<F: Scalar>(p: &Pool2d, x: &Tensor<F>) -> Tensor<F> {
    let (n, c, h, w, oh, ow) = pool_shape(p, x.shape());
    let xs = x.data();
    let scale = F::from_f64(1.0 / (p.window * p.window) as f64);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = F::zero();
                for ky in 0..p.window {
                    for kx in 0..p.window {
                        acc = acc + xs[base + (oy * p.stride + ky) * w + ox * p.stride + kx];
                    }
                }
                out.push(acc * scale);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out).expect("pool shape")
}

fn batchnorm_forward<F: Scalar>(
    b: &BatchNorm2d<F>,
    x: &Tensor<F>,
    mode: Mode,
) -> (Tensor<F>, Aux<F>) {
    let shape = x.shape();
    let (n, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let count = F::from_f64((n * spatial) as f64);
    let eps = F::from_f64(b.eps);
    let xs = x.data();
    let mut mean = vec![F::zero(); c];
    let mut var = vec![F::zero(); c];
    match mode {
        Mode::Train => {
            for ch in 0..c {
                let mut sum = F::zero();
                for s in 0..n {
                    let base = (s * c + ch) * spatial;
                    for v in &xs[base..base + spatial] {
                        sum = sum + *v;
                    }
                }
                let m = sum / count;
                let mut sq = F::zero();
                for s in 0..n {
                    let base = (s * c + ch) * spatial;
                    for v in &xs[base..base + spatial] {
                        let d = *v - m;
                        sq = sq + d * d;
                    }
                }
                mean[ch] = m;
                var[ch] = sq / count;
            }
        }
        Mode::Eval => {
            mean.copy_from_slice(b.running_mean.data());
            var.copy_from_slice(b.running_var.data());
        }
    }
    let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![F::zero(); xs.len()];
    let mut out = vec![F::zero(); xs.len()];
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * spatial;
            let (g, bt) = (b.gamma.data()[ch], b.beta.data()[ch]);
            for i in base..base + spatial {
                let h = (xs[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                out[i] = g * h + bt;
            }
        }
    }
    (
        Tensor::new(shape.to_vec(), out).expect("same shape"),
        Aux::BatchNorm {
            xhat,
            inv_std,
            mean,
            var,
        },
    )
}
