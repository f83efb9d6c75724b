use super::forward::{axpy, col2im_add, dot, im2col, Aux, ConvGeom};
use super::{EngineError, ForwardCache, Layer, Mode, Model, Scalar, Tensor};
use crate::selection::{NeuronUpdate, UpdateMask};

/// Gradients of one layer's parameters. Both are `None` for parameterless layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads<F> {
    pub weight: Option<Tensor<F>>,
    pub bias: Option<Tensor<F>>,
}

/// Batch statistics observed by a training-mode batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnBatchStats<F> {
    pub mean: Vec<F>,
    /// Biased (population) variance.
    pub var: Vec<F>,
    pub count: usize,
}

/// A weight-gradient computation executed for one neuron.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WgradEvent {
    pub layer: usize,
    pub channel: usize,
    pub bias_only: bool,
}

/// Record of the work `backward` actually performed.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BackwardTrace {
    pub wgrad: Vec<WgradEvent>,
    /// Layers whose input gradient was computed.
    pub igrad: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct GradientBundle<F> {
    layers: Vec<ParamGrads<F>>,
    updates: Vec<Vec<NeuronUpdate>>,
    bn_stats: Vec<Option<BnBatchStats<F>>>,
    mask_applied: bool,
    trace: BackwardTrace,
}

impl<F: Scalar> GradientBundle<F> {
    pub fn layer(&self, index: usize) -> &ParamGrads<F> {
        &self.layers[index]
    }

    pub fn layers(&self) -> &[ParamGrads<F>] {
        &self.layers
    }

    /// Per-layer, per-neuron update state the bundle was computed under.
    pub fn updates(&self) -> &[Vec<NeuronUpdate>] {
        &self.updates
    }

    pub fn bn_stats(&self, index: usize) -> Option<&BnBatchStats<F>> {
        self.bn_stats[index].as_ref()
    }

    pub fn mask_applied(&self) -> bool {
        self.mask_applied
    }

    pub fn trace(&self) -> &BackwardTrace {
        &self.trace
    }
}

/// Resolves a mask into per-layer, per-channel update states.
pub fn layer_updates<F: Scalar>(
    model: &Model<F>,
    mask: &UpdateMask,
) -> Result<Vec<Vec<NeuronUpdate>>, EngineError> {
    let mut next = 0;
    let mut out = Vec::with_capacity(model.len());
    for layer in model.layers() {
        let n = layer.neuron_count();
        let mut row = Vec::with_capacity(n);
        for c in 0..n {
            let u = mask.update_of(next + c);
            if u == NeuronUpdate::BiasOnly && !layer.has_bias() {
                return Err(EngineError::BiasOnlyWithoutBias(next + c));
            }
            row.push(u);
        }
        next += n;
        out.push(row);
    }
    if let Some(id) = mask.max_id().filter(|&id| id >= next) {
        return Err(EngineError::UnknownNeuron { id, count: next });
    }
    Ok(out)
}

/// Reverse pass through the chain.
///
/// Weight gradients are computed only for neurons the mask updates; all other
/// entries of the bundle stay exactly zero. The input gradient of layer `l` is
/// computed only while some layer strictly before `l` has an updated neuron.
pub fn backward<F: Scalar>(
    model: &Model<F>,
    cache: &ForwardCache<F>,
    loss_grad: &Tensor<F>,
    mask: &UpdateMask,
) -> Result<GradientBundle<F>, EngineError> {
    if cache.inputs.len() != model.len() {
        return Err(EngineError::Topology(format!(
            "cache holds {} layers, model has {}",
            cache.inputs.len(),
            model.len()
        )));
    }
    let updates = layer_updates(model, mask)?;
    let n = cache.batch_size();
    let expected: Vec<usize> = std::iter::once(n)
        .chain(model.output_shape().iter().copied())
        .collect();
    if loss_grad.shape() != expected.as_slice() {
        return Err(EngineError::ShapeMismatch {
            layer: model.len(),
            expected,
            actual: loss_grad.shape().to_vec(),
        });
    }

    // upstream[l]: some neuron in a layer before l is updated.
    let mut upstream = Vec::with_capacity(model.len());
    let mut any = false;
    for row in &updates {
        upstream.push(any);
        any |= row.iter().any(|&u| u != NeuronUpdate::Frozen);
    }

    let mut layers: Vec<ParamGrads<F>> = model
        .layers()
        .iter()
        .map(|l| ParamGrads {
            weight: l.weight().map(|w| Tensor::zeros(w.shape().to_vec())),
            bias: l.bias().map(|b| Tensor::zeros(b.shape().to_vec())),
        })
        .collect();
    let mut bn_stats = vec![None; model.len()];
    let mut trace = BackwardTrace::default();

    let mut grad = loss_grad.clone();
    for index in (0..model.len()).rev() {
        let layer = &model.layers()[index];
        let input = &cache.inputs[index];
        let aux = &cache.aux[index];
        let row = &updates[index];
        let grads = &mut layers[index];
        match layer {
            Layer::Dense(_) => dense_wgrad(input, &grad, row, grads, index, &mut trace),
            Layer::Conv2d(c) => conv_wgrad(c, input, &grad, row, grads, index, &mut trace),
            Layer::BatchNorm2d(_) => {
                bn_wgrad(aux, &grad, row, grads, index, &mut trace);
                if cache.mode == Mode::Train {
                    if let Aux::BatchNorm { mean, var, .. } = aux {
                        let spatial: usize = input.shape()[2..].iter().product();
                        bn_stats[index] = Some(BnBatchStats {
                            mean: mean.clone(),
                            var: var.clone(),
                            count: n * spatial,
                        });
                    }
                }
            }
            _ => {}
        }
        if !upstream[index] {
            break;
        }
        grad = input_grad(layer, input, aux, cache.mode, &grad);
        trace.igrad.push(index);
    }

    Ok(GradientBundle {
        layers,
        updates,
        bn_stats,
        mask_applied: true,
        trace,
    })
}

fn dense_wgrad<F: Scalar>(
    x: &Tensor<F>,
    g: &Tensor<F>,
    row: &[NeuronUpdate],
    grads: &mut ParamGrads<F>,
    layer: usize,
    trace: &mut BackwardTrace,
) {
    let n = x.shape()[0];
    let fan_in = x.shape()[1];
    let fan_out = g.shape()[1];
    let (xs, gs) = (x.data(), g.data());
    for (o, &u) in row.iter().enumerate() {
        if u == NeuronUpdate::Frozen {
            continue;
        }
        trace.wgrad.push(WgradEvent {
            layer,
            channel: o,
            bias_only: u == NeuronUpdate::BiasOnly,
        });
        if u == NeuronUpdate::Full {
            let w = grads.weight.as_mut().expect("dense weight").data_mut();
            let dst = &mut w[o * fan_in..(o + 1) * fan_in];
            for s in 0..n {
                let go = gs[s * fan_out + o];
                let xr = &xs[s * fan_in..(s + 1) * fan_in];
                for i in 0..fan_in {
                    dst[i] = dst[i] + go * xr[i];
                }
            }
        }
        if let Some(b) = grads.bias.as_mut() {
            let mut acc = F::zero();
            for s in 0..n {
                acc = acc + gs[s * fan_out + o];
            }
            b.data_mut()[o] = acc;
        }
    }
}

fn conv_wgrad<F: Scalar>(
    c: &super::Conv2d<F>,
    x: &Tensor<F>,
    g: &Tensor<F>,
    row: &[NeuronUpdate],
    grads: &mut ParamGrads<F>,
    layer: usize,
    trace: &mut BackwardTrace,
) {
    let geo = ConvGeom::new(c, x.shape());
    let gs = g.data();
    let plane = geo.oh * geo.ow;
    let kdim = geo.c_in * geo.k * geo.k;
    let full: Vec<usize> = (0..row.len())
        .filter(|&co| row[co] == NeuronUpdate::Full)
        .collect();
    if !full.is_empty() {
        let w = grads.weight.as_mut().expect("conv weight").data_mut();
        let mut col = vec![F::zero(); kdim * plane];
        for s in 0..geo.n {
            im2col(&geo, x.data(), s, &mut col);
            for &co in &full {
                let gp = &gs[(s * geo.c_out + co) * plane..][..plane];
                let dst = &mut w[co * kdim..(co + 1) * kdim];
                for (kk, d) in dst.iter_mut().enumerate() {
                    *d = *d + dot(gp, &col[kk * plane..(kk + 1) * plane]);
                }
            }
        }
    }
    for (co, &u) in row.iter().enumerate() {
        if u == NeuronUpdate::Frozen {
            continue;
        }
        trace.wgrad.push(WgradEvent {
            layer,
            channel: co,
            bias_only: u == NeuronUpdate::BiasOnly,
        });
        if let Some(b) = grads.bias.as_mut() {
            let mut acc = F::zero();
            for s in 0..geo.n {
                for v in &gs[(s * geo.c_out + co) * plane..(s * geo.c_out + co + 1) * plane] {
                    acc = acc + *v;
                }
            }
            b.data_mut()[co] = acc;
        }
    }
}

fn bn_wgrad<F: Scalar>(
    aux: &Aux<F>,
    g: &Tensor<F>,
    row: &[NeuronUpdate],
    grads: &mut ParamGrads<F>,
    layer: usize,
    trace: &mut BackwardTrace,
) {
    let Aux::BatchNorm { xhat, .. } = aux else {
        unreachable!("batch norm cache")
    };
    let shape = g.shape();
    let (n, c) = (shape[0], shape[1]);
    let spatial: usize = shape[2..].iter().product();
    let gs = g.data();
    for (ch, &u) in row.iter().enumerate() {
        if u == NeuronUpdate::Frozen {
            continue;
        }
        trace.wgrad.push(WgradEvent {
            layer,
            channel: ch,
            bias_only: u == NeuronUpdate::BiasOnly,
        });
        let (mut dg, mut db) = (F::zero(), F::zero());
        for s in 0..n {
            let base = (s * c + ch) * spatial;
            for i in base..base + spatial {
                dg = dg + gs[i] * xhat[i];
                db = db + gs[i];
            }
        }
        if u == NeuronUpdate::Full {
            grads.weight.as_mut().expect("gamma").data_mut()[ch] = dg;
        }
        grads.bias.as_mut().expect("beta").data_mut()[ch] = db;
    }
}

fn input_grad<F: Scalar>(
    layer: &Layer<F>,
    x: &Tensor<F>,
    aux: &Aux<F>,
    mode: Mode,
    g: &Tensor<F>,
) -> Tensor<F> {
    let gs = g.data();
    let mut dx = vec![F::zero(); x.len()];
    match layer {
        Layer::Dense(d) => {
            let (fan_out, fan_in) = (d.weight.shape()[0], d.weight.shape()[1]);
            let w = d.weight.data();
            let n = x.shape()[0];
            for s in 0..n {
                let dst = &mut dx[s * fan_in..(s + 1) * fan_in];
                for o in 0..fan_out {
                    let go = gs[s * fan_out + o];
                    let wr = &w[o * fan_in..(o + 1) * fan_in];
                    for i in 0..fan_in {
                        dst[i] = dst[i] + go * wr[i];
                    }
                }
            }
        }
        Layer::Conv2d(c) => {
            let geo = ConvGeom::new(c, x.shape());
            let w = c.weight.data();
            let plane = geo.oh * geo.ow;
            let kdim = geo.c_in * geo.k * geo.k;
            let mut col = vec![F::zero(); kdim * plane];
            for s in 0..geo.n {
                col.fill(F::zero());
                for co in 0..geo.c_out {
                    let gp = &gs[(s * geo.c_out + co) * plane..][..plane];
                    for (kk, &wv) in w[co * kdim..(co + 1) * kdim].iter().enumerate() {
                        axpy(&mut col[kk * plane..(kk + 1) * plane], wv, gp);
                    }
                }
                col2im_add(&geo, &col, s, &mut dx);
            }
        }
        Layer::Relu => {
            for (i, (&xv, &gv)) in x.data().iter().zip(gs).enumerate() {
                if xv > F::zero() {
                    dx[i] = gv;
                }
            }
        }
        Layer::MaxPool2d(_) => {
            let Aux::ArgMax(idx) = aux else {
                unreachable!("maxpool cache")
            };
            for (&src, &gv) in idx.iter().zip(gs) {
                dx[src] = dx[src] + gv;
            }
        }
        Layer::AvgPool2d(p) => {
            let s = x.shape();
            let (h, w) = (s[2], s[3]);
            let (oh, ow) = (g.shape()[2], g.shape()[3]);
            let scale = F::from_f64(1.0 / (p.window * p.window) as f64);
            for plane in 0..s[0] * s[1] {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = gs[(plane * oh + oy) * ow + ox] * scale;
                        for ky in 0..p.window {
                            for kx in 0..p.window {
                                let i =
                                    plane * h * w + (oy * p.stride + ky) * w + ox * p.stride + kx;
                                dx[i] = dx[i] + gv;
                            }
                        }
                    }
                }
            }
        }
        Layer::BatchNorm2d(b) => {
            let Aux::BatchNorm { xhat, inv_std, .. } = aux else {
                unreachable!("batch norm cache")
            };
            let shape = x.shape();
            let (n, c) = (shape[0], shape[1]);
            let spatial: usize = shape[2..].iter().product();
            for ch in 0..c {
                let scale = b.gamma.data()[ch] * inv_std[ch];
                match mode {
                    Mode::Eval => {
                        for s in 0..n {
                            let base = (s * c + ch) * spatial;
                            for i in base..base + spatial {
                                dx[i] = gs[i] * scale;
                            }
                        }
                    }
                    Mode::Train => {
                        let m = F::from_f64((n * spatial) as f64);
                        let (mut sg, mut sgx) = (F::zero(), F::zero());
                        for s in 0..n {
                            let base = (s * c + ch) * spatial;
                            for i in base..base + spatial {
                                sg = sg + gs[i];
                                sgx = sgx + gs[i] * xhat[i];
                            }
                        }
                        let (mg, mgx) = (sg / m, sgx / m);
                        for s in 0..n {
                            let base = (s * c + ch) * spatial;
                            for i in base..base + spatial {
                                dx[i] = scale * (gs[i] - mg - xhat[i] * mgx);
                            }
                        }
                    }
                }
            }
        }
        Layer::Flatten | Layer::SoftmaxXent => dx.copy_from_slice(gs),
    }
    Tensor::new(x.shape().to_vec(), dx).expect("input shape")
}
