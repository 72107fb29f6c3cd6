//! Forward and reverse-mode evaluation of a [`NetworkGraph`] on `f64`
//! batches in `(N, C, H, W)` layout.

use ndarray::{Array2, Array4, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::netgraph::{LayerKind, LayerSpec, NetworkGraph};
use crate::params::{LayerParams, ParamStore, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch-norm layers.
    Train,
    /// Running statistics in batch-norm layers.
    Eval,
}

/// Parameter lookup over one or more disjoint stores (e.g. backbone + decoder).
#[derive(Clone, Copy)]
pub struct Weights<'a> {
    stores: &'a [&'a ParamStore],
}

impl<'a> Weights<'a> {
    pub fn new(stores: &'a [&'a ParamStore]) -> Self {
        Weights { stores }
    }

    fn params(&self, id: &str) -> Result<&'a LayerParams> {
        self.stores
            .iter()
            .find_map(|s| s.layers.get(id))
            .ok_or_else(|| Error::Structure(format!("no parameters for layer `{id}`")))
    }

    fn stats(&self, id: &str) -> Option<(&'a [f64], &'a [f64])> {
        self.stores
            .iter()
            .find_map(|s| s.stats.get(id))
            .map(|s| (s.mean.as_slice(), s.var.as_slice()))
    }
}

enum Cache {
    None,
    Conv { cols: Array2<f64>, in_dims: [usize; 4] },
    Norm { xhat: Array4<f64>, inv_std: Vec<f64> },
}

/// Batch statistics observed by one batch-norm layer in train mode.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub layer: String,
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

/// Activations retained for a backward pass.
pub struct Forward {
    outputs: Vec<Option<Array4<f64>>>,
    caches: Vec<Cache>,
    needed: Vec<bool>,
    producers: Vec<Vec<usize>>,
    mode: Mode,
    pub batch_stats: Vec<BatchStats>,
}

impl Forward {
    pub fn output(&self, graph: &NetworkGraph, id: &str) -> Option<&Array4<f64>> {
        graph.index_of(id).and_then(|i| self.outputs[i].as_ref())
    }
}

/// Runs the layers needed for `targets`.
pub fn forward(
    graph: &NetworkGraph,
    weights: Weights<'_>,
    input: &Array4<f64>,
    targets: &[&str],
    mode: Mode,
) -> Result<Forward> {
    let producers = graph.producer_indices()?;
    let n = graph.layers.len();
    let mut needed = vec![false; n];
    let mut stack: Vec<usize> = targets
        .iter()
        .map(|t| {
            graph
                .index_of(t)
                .ok_or_else(|| Error::Structure(format!("unknown target layer `{t}`")))
        })
        .collect::<Result<_>>()?;
    while let Some(i) = stack.pop() {
        if !needed[i] {
            needed[i] = true;
            stack.extend(&producers[i]);
        }
    }

    let mut outputs: Vec<Option<Array4<f64>>> = (0..n).map(|_| None).collect();
    let mut caches: Vec<Cache> = (0..n).map(|_| Cache::None).collect();
    let mut batch_stats = Vec::new();

    for i in 0..n {
        if !needed[i] {
            continue;
        }
        let layer = &graph.layers[i];
        let ins: Vec<&Array4<f64>> = if producers[i].is_empty() {
            vec![input]
        } else {
            producers[i]
                .iter()
                .map(|&p| outputs[p].as_ref().expect("producer computed earlier"))
                .collect()
        };
        let x = ins[0];
        if layer.kind != LayerKind::Concat && x.dim().1 != layer.in_channels {
            return Err(Error::Shape(format!(
                "layer `{}` expects {} channels, got {}",
                layer.id,
                layer.in_channels,
                x.dim().1
            )));
        }
        let (out, cache) = match layer.kind {
            LayerKind::Conv | LayerKind::ClassifierHead | LayerKind::SegmentationHead => {
                let LayerParams::Conv { weight, bias } = weights.params(&layer.id)? else {
                    return Err(Error::Structure(format!("`{}` needs conv parameters", layer.id)));
                };
                check_conv_weight(layer, weight)?;
                let (y, cols) = conv_forward(layer, weight, bias.as_deref(), x);
                let d = x.dim();
                (y, Cache::Conv { cols, in_dims: [d.0, d.1, d.2, d.3] })
            }
            LayerKind::Batchnorm => {
                let LayerParams::Norm { gamma, beta } = weights.params(&layer.id)? else {
                    return Err(Error::Structure(format!("`{}` needs batch-norm parameters", layer.id)));
                };
                if gamma.len() != layer.out_channels {
                    return Err(Error::Shape(format!("`{}` scale length mismatch", layer.id)));
                }
                let (y, xhat, inv_std, stats) = match mode {
                    Mode::Train => bn_train_forward(x, gamma, beta),
                    Mode::Eval => {
                        let (m, v) = weights.stats(&layer.id).ok_or_else(|| {
                            Error::Structure(format!("no running statistics for `{}`", layer.id))
                        })?;
                        bn_eval_forward(x, gamma, beta, m, v)
                    }
                };
                if let Some((mean, var)) = stats {
                    batch_stats.push(BatchStats {
                        layer: layer.id.clone(),
                        mean,
                        var,
                    });
                }
                (y, Cache::Norm { xhat, inv_std })
            }
            LayerKind::Activation => (x.mapv(|v| v.max(0.0)), Cache::None),
            LayerKind::Pool => {
                let (nb, c, h, w) = x.dim();
                let hw = (h * w) as f64;
                let mut y = Array4::zeros((nb, c, 1, 1));
                for b in 0..nb {
                    for ch in 0..c {
                        y[[b, ch, 0, 0]] = x.slice(ndarray::s![b, ch, .., ..]).sum() / hw;
                    }
                }
                (y, Cache::None)
            }
            LayerKind::Upsample => (upsample_nearest(x, layer.scale), Cache::None),
            LayerKind::ElementwiseAdd => {
                let mut y = x.clone();
                for other in &ins[1..] {
                    if other.dim() != y.dim() {
                        return Err(Error::Shape(format!("add `{}` input shapes differ", layer.id)));
                    }
                    y += *other;
                }
                (y, Cache::None)
            }
            LayerKind::Concat => {
                let views: Vec<_> = ins.iter().map(|a| a.view()).collect();
                let y = ndarray::concatenate(Axis(1), &views)
                    .map_err(|e| Error::Shape(format!("concat `{}`: {e}", layer.id)))?;
                (y, Cache::None)
            }
        };
        outputs[i] = Some(out);
        caches[i] = cache;
    }

    Ok(Forward {
        outputs,
        caches,
        needed,
        producers,
        mode,
        batch_stats,
    })
}

/// Back-propagates `seeds` (gradients of the loss with respect to layer
/// outputs) and returns parameter gradients for layers accepted by `wanted`.
///
/// Layers that neither own wanted parameters nor feed one are skipped.
pub fn backward(
    graph: &NetworkGraph,
    weights: Weights<'_>,
    fwd: &Forward,
    seeds: Vec<(&str, Array4<f64>)>,
    wanted: &dyn Fn(&LayerSpec) -> bool,
) -> Result<ParamStore> {
    let n = graph.layers.len();
    let mut requires = vec![false; n];
    for i in 0..n {
        if !fwd.needed[i] {
            continue;
        }
        let l = &graph.layers[i];
        let owns = (l.kind.is_conv_like() || l.kind == LayerKind::Batchnorm) && wanted(l);
        requires[i] = owns || fwd.producers[i].iter().any(|&p| requires[p]);
    }

    let mut grads: Vec<Option<Array4<f64>>> = (0..n).map(|_| None).collect();
    for (id, g) in seeds {
        let i = graph
            .index_of(id)
            .ok_or_else(|| Error::Structure(format!("unknown seed layer `{id}`")))?;
        accumulate(&mut grads[i], g);
    }

    let mut out = ParamStore::new();
    for i in (0..n).rev() {
        if !requires[i] {
            continue;
        }
        let Some(dy) = grads[i].take() else { continue };
        let layer = &graph.layers[i];
        let propagate = fwd.producers[i].iter().any(|&p| requires[p]);
        let wants_params = wanted(layer);
        let mut input_grads: Vec<Array4<f64>> = Vec::new();

        match layer.kind {
            LayerKind::Conv | LayerKind::ClassifierHead | LayerKind::SegmentationHead => {
                let LayerParams::Conv { weight, bias } = weights.params(&layer.id)? else {
                    unreachable!("checked in forward")
                };
                let Cache::Conv { cols, in_dims } = &fwd.caches[i] else {
                    unreachable!("conv cache")
                };
                let (dw, db, dx) = conv_backward(layer, weight, bias.is_some(), cols, *in_dims, &dy, propagate);
                if wants_params {
                    out.layers.insert(layer.id.clone(), LayerParams::Conv { weight: dw, bias: db });
                }
                if let Some(dx) = dx {
                    input_grads.push(dx);
                }
            }
            LayerKind::Batchnorm => {
                let LayerParams::Norm { gamma, .. } = weights.params(&layer.id)? else {
                    unreachable!("checked in forward")
                };
                let Cache::Norm { xhat, inv_std } = &fwd.caches[i] else {
                    unreachable!("norm cache")
                };
                let (dgamma, dbeta, dx) = bn_backward(fwd.mode, gamma, xhat, inv_std, &dy);
                if wants_params {
                    out.layers.insert(
                        layer.id.clone(),
                        LayerParams::Norm {
                            gamma: dgamma,
                            beta: dbeta,
                        },
                    );
                }
                input_grads.push(dx);
            }
            LayerKind::Activation => {
                let y = fwd.outputs[i].as_ref().expect("activation output");
                let mut dx = dy;
                ndarray::Zip::from(&mut dx).and(y).for_each(|d, &v| {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                });
                input_grads.push(dx);
            }
            LayerKind::Pool => {
                let p = fwd.producers[i].first().copied();
                let (nb, c, h, w) = match p {
                    Some(p) => fwd.outputs[p].as_ref().expect("pool input").dim(),
                    None => return Err(Error::Structure("pool cannot read the graph input".into())),
                };
                let hw = (h * w) as f64;
                let mut dx = Array4::zeros((nb, c, h, w));
                for b in 0..nb {
                    for ch in 0..c {
                        let g = dy[[b, ch, 0, 0]] / hw;
                        dx.slice_mut(ndarray::s![b, ch, .., ..]).fill(g);
                    }
                }
                input_grads.push(dx);
            }
            LayerKind::Upsample => input_grads.push(upsample_backward(&dy, layer.scale)),
            LayerKind::ElementwiseAdd => {
                for _ in 0..fwd.producers[i].len() {
                    input_grads.push(dy.clone());
                }
            }
            LayerKind::Concat => {
                let mut start = 0;
                for &p in &fwd.producers[i] {
                    let c = fwd.outputs[p].as_ref().expect("concat input").dim().1;
                    input_grads.push(dy.slice(ndarray::s![.., start..start + c, .., ..]).to_owned());
                    start += c;
                }
            }
        }

        if propagate {
            for (&p, g) in fwd.producers[i].iter().zip(input_grads) {
                if requires[p] {
                    accumulate(&mut grads[p], g);
                }
            }
        }
    }
    Ok(out)
}

fn accumulate(slot: &mut Option<Array4<f64>>, g: Array4<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

fn check_conv_weight(layer: &LayerSpec, weight: &Tensor) -> Result<()> {
    let k = layer.kernel_size;
    let expected = [layer.out_channels, layer.in_channels, k, k];
    if weight.shape != expected || weight.data.len() != expected.iter().product::<usize>() {
        return Err(Error::Shape(format!(
            "`{}` weight shape {:?}, expected {:?}",
            layer.id, weight.shape, expected
        )));
    }
    Ok(())
}

fn out_size(size: usize, layer: &LayerSpec) -> usize {
    let span = layer.dilation * (layer.kernel_size - 1) + 1;
    (size + 2 * layer.padding() - span) / layer.stride + 1
}

fn im2col(x: &Array4<f64>, layer: &LayerSpec, ho: usize, wo: usize) -> Array2<f64> {
    let (nb, c, h, w) = x.dim();
    let k = layer.kernel_size;
    let (s, d, pad) = (layer.stride as isize, layer.dilation as isize, layer.padding() as isize);
    let plane = ho * wo;
    let mut cols = Array2::<f64>::zeros((c * k * k, nb * plane));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let cs = cols.as_slice_mut().expect("fresh array");
    let ncols = nb * plane;
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let dst = &mut cs[row * ncols..(row + 1) * ncols];
                for b in 0..nb {
                    let src = &xs[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    for oh in 0..ho {
                        let ih = oh as isize * s + ki as isize * d - pad;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let srow = &src[ih as usize * w..(ih as usize + 1) * w];
                        let drow = &mut dst[b * plane + oh * wo..b * plane + (oh + 1) * wo];
                        for (ow, slot) in drow.iter_mut().enumerate() {
                            let iw = ow as isize * s + kj as isize * d - pad;
                            if iw >= 0 && iw < w as isize {
                                *slot = srow[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &Array2<f64>, layer: &LayerSpec, in_dims: [usize; 4], ho: usize, wo: usize) -> Array4<f64> {
    let [nb, c, h, w] = in_dims;
    let k = layer.kernel_size;
    let (s, d, pad) = (layer.stride as isize, layer.dilation as isize, layer.padding() as isize);
    let plane = ho * wo;
    let ncols = nb * plane;
    let mut dx = Array4::<f64>::zeros((nb, c, h, w));
    let dxs = dx.as_slice_mut().expect("fresh array");
    let dc = dcols.as_standard_layout();
    let dc = dc.as_slice().expect("standard layout");
    for ch in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ch * k + ki) * k + kj;
                let src = &dc[row * ncols..(row + 1) * ncols];
                for b in 0..nb {
                    let dst = &mut dxs[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
                    for oh in 0..ho {
                        let ih = oh as isize * s + ki as isize * d - pad;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let srow = &src[b * plane + oh * wo..b * plane + (oh + 1) * wo];
                        for (ow, &g) in srow.iter().enumerate() {
                            let iw = ow as isize * s + kj as isize * d - pad;
                            if iw >= 0 && iw < w as isize {
                                dst[ih as usize * w + iw as usize] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn weight_matrix(weight: &Tensor) -> ArrayView2<'_, f64> {
    let rows = weight.shape[0];
    let cols = weight.data.len() / rows.max(1);
    ArrayView2::from_shape((rows, cols), &weight.data).expect("weight matrix shape")
}

fn conv_forward(
    layer: &LayerSpec,
    weight: &Tensor,
    bias: Option<&[f64]>,
    x: &Array4<f64>,
) -> (Array4<f64>, Array2<f64>) {
    let (nb, _, h, w) = x.dim();
    let (ho, wo) = (out_size(h, layer), out_size(w, layer));
    let cols = im2col(x, layer, ho, wo);
    let out2 = weight_matrix(weight).dot(&cols);
    let cout = layer.out_channels;
    let plane = ho * wo;
    let mut y = Array4::<f64>::zeros((nb, cout, ho, wo));
    let ys = y.as_slice_mut().expect("fresh array");
    let o = out2.as_slice().expect("dot result is standard");
    for co in 0..cout {
        let bval = bias.map_or(0.0, |b| b[co]);
        for b in 0..nb {
            let src = &o[co * nb * plane + b * plane..co * nb * plane + (b + 1) * plane];
            let dst = &mut ys[(b * cout + co) * plane..(b * cout + co + 1) * plane];
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = v + bval;
            }
        }
    }
    (y, cols)
}

type ConvGrads = (Tensor, Option<Vec<f64>>, Option<Array4<f64>>);

fn conv_backward(
    layer: &LayerSpec,
    weight: &Tensor,
    has_bias: bool,
    cols: &Array2<f64>,
    in_dims: [usize; 4],
    dy: &Array4<f64>,
    propagate: bool,
) -> ConvGrads {
    let (nb, cout, ho, wo) = dy.dim();
    let plane = ho * wo;
    let mut d2 = Array2::<f64>::zeros((cout, nb * plane));
    {
        let dys = dy.as_standard_layout();
        let dys = dys.as_slice().expect("standard layout");
        let ds = d2.as_slice_mut().expect("fresh array");
        for b in 0..nb {
            for co in 0..cout {
                let src = &dys[(b * cout + co) * plane..(b * cout + co + 1) * plane];
                ds[co * nb * plane + b * plane..co * nb * plane + (b + 1) * plane].copy_from_slice(src);
            }
        }
    }
    let dw = d2.dot(&cols.t());
    let dweight = Tensor {
        shape: weight.shape.clone(),
        data: dw.into_raw_vec_and_offset().0,
    };
    let dbias = has_bias.then(|| d2.sum_axis(Axis(1)).to_vec());
    let dx = propagate.then(|| {
        let dcols = weight_matrix(weight).t().dot(&d2);
        col2im(&dcols, layer, in_dims, ho, wo)
    });
    (dweight, dbias, dx)
}

type NormOut = (Array4<f64>, Array4<f64>, Vec<f64>, Option<(Vec<f64>, Vec<f64>)>);

fn bn_train_forward(x: &Array4<f64>, gamma: &[f64], beta: &[f64]) -> NormOut {
    let (nb, c, h, w) = x.dim();
    let m = (nb * h * w) as f64;
    let mut xhat = Array4::<f64>::zeros(x.dim());
    let mut y = Array4::<f64>::zeros(x.dim());
    let mut inv_std = vec![0.0; c];
    let mut means = vec![0.0; c];
    let mut vars = vec![0.0; c];
    for ch in 0..c {
        let xc = x.slice(ndarray::s![.., ch, .., ..]);
        let mean = xc.sum() / m;
        let var = xc.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / m;
        let is = 1.0 / (var + BN_EPS).sqrt();
        inv_std[ch] = is;
        means[ch] = mean;
        vars[ch] = if m > 1.0 { var * m / (m - 1.0) } else { var };
        ndarray::Zip::from(xhat.slice_mut(ndarray::s![.., ch, .., ..]))
            .and(y.slice_mut(ndarray::s![.., ch, .., ..]))
            .and(&xc)
            .for_each(|xh, yy, &v| {
                *xh = (v - mean) * is;
                *yy = gamma[ch] * *xh + beta[ch];
            });
    }
    (y, xhat, inv_std, Some((means, vars)))
}

fn bn_eval_forward(x: &Array4<f64>, gamma: &[f64], beta: &[f64], mean: &[f64], var: &[f64]) -> NormOut {
    let c = x.dim().1;
    let mut xhat = Array4::<f64>::zeros(x.dim());
    let mut y = Array4::<f64>::zeros(x.dim());
    let mut inv_std = vec![0.0; c];
    for ch in 0..c {
        let is = 1.0 / (var[ch] + BN_EPS).sqrt();
        inv_std[ch] = is;
        ndarray::Zip::from(xhat.slice_mut(ndarray::s![.., ch, .., ..]))
            .and(y.slice_mut(ndarray::s![.., ch, .., ..]))
            .and(x.slice(ndarray::s![.., ch, .., ..]))
            .for_each(|xh, yy, &v| {
                *xh = (v - mean[ch]) * is;
                *yy = gamma[ch] * *xh + beta[ch];
            });
    }
    (y, xhat, inv_std, None)
}

fn bn_backward(
    mode: Mode,
    gamma: &[f64],
    xhat: &Array4<f64>,
    inv_std: &[f64],
    dy: &Array4<f64>,
) -> (Vec<f64>, Vec<f64>, Array4<f64>) {
    let (nb, c, h, w) = dy.dim();
    let m = (nb * h * w) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut dx = Array4::<f64>::zeros(dy.dim());
    for ch in 0..c {
        let dyc = dy.slice(ndarray::s![.., ch, .., ..]);
        let xc = xhat.slice(ndarray::s![.., ch, .., ..]);
        let sum_dy = dyc.sum();
        let sum_dy_xhat = ndarray::Zip::from(&dyc)
            .and(&xc)
            .fold(0.0, |acc, &a, &b| acc + a * b);
        dgamma[ch] = sum_dy_xhat;
        dbeta[ch] = sum_dy;
        let scale = gamma[ch] * inv_std[ch];
        let dxc = dx.slice_mut(ndarray::s![.., ch, .., ..]);
        match mode {
            Mode::Train => {
                ndarray::Zip::from(dxc).and(&dyc).and(&xc).for_each(|d, &g, &xh| {
                    *d = scale * (g - sum_dy / m - xh * sum_dy_xhat / m);
                });
            }
            Mode::Eval => {
                ndarray::Zip::from(dxc).and(&dyc).for_each(|d, &g| *d = scale * g);
            }
        }
    }
    (dgamma, dbeta, dx)
}

fn upsample_nearest(x: &Array4<f64>, s: usize) -> Array4<f64> {
    let (nb, c, h, w) = x.dim();
    Array4::from_shape_fn((nb, c, h * s, w * s), |(b, ch, i, j)| x[[b, ch, i / s, j / s]])
}

fn upsample_backward(dy: &Array4<f64>, s: usize) -> Array4<f64> {
    let (nb, c, ho, wo) = dy.dim();
    let mut dx = Array4::<f64>::zeros((nb, c, ho / s, wo / s));
    for ((b, ch, i, j), &g) in dy.indexed_iter() {
        dx[[b, ch, i / s, j / s]] += g;
    }
    dx
}

/// Mean softmax cross-entropy over every `(n, h, w)` position, and its
/// gradient with respect to the logits.
pub fn cross_entropy(logits: &Array4<f64>, labels: &[usize]) -> Result<(f64, Array4<f64>)> {
    let (nb, c, h, w) = logits.dim();
    if labels.len() != nb * h * w {
        return Err(Error::Shape(format!(
            "{} labels for {} positions",
            labels.len(),
            nb * h * w
        )));
    }
    let count = (nb * h * w) as f64;
    let mut grad = Array4::<f64>::zeros(logits.dim());
    let mut loss = 0.0;
    let mut probs = vec![0.0; c];
    for b in 0..nb {
        for i in 0..h {
            for j in 0..w {
                let label = labels[(b * h + i) * w + j];
                if label >= c {
                    return Err(Error::Shape(format!("label {label} out of range for {c} classes")));
                }
                let mut mx = f64::NEG_INFINITY;
                for k in 0..c {
                    mx = mx.max(logits[[b, k, i, j]]);
                }
                let mut z = 0.0;
                for (k, p) in probs.iter_mut().enumerate() {
                    *p = (logits[[b, k, i, j]] - mx).exp();
                    z += *p;
                }
                loss += z.ln() + mx - logits[[b, label, i, j]];
                for (k, p) in probs.iter().enumerate() {
                    let t = if k == label { 1.0 } else { 0.0 };
                    grad[[b, k, i, j]] = (p / z - t) / count;
                }
            }
        }
    }
    Ok((loss / count, grad))
}

/// Argmax over channels at every `(n, h, w)` position, flattened.
pub fn argmax_channels(logits: &Array4<f64>) -> Vec<usize> {
    let (nb, c, h, w) = logits.dim();
    let mut out = Vec::with_capacity(nb * h * w);
    for b in 0..nb {
        for i in 0..h {
            for j in 0..w {
                let mut best = 0;
                for k in 1..c {
                    if logits[[b, k, i, j]] > logits[[b, best, i, j]] {
                        best = k;
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

/// Evaluation-mode logits of one output layer.
pub fn predict(graph: &NetworkGraph, weights: Weights<'_>, input: &Array4<f64>, target: &str) -> Result<Array4<f64>> {
    let mut fwd = forward(graph, weights, input, &[target], Mode::Eval)?;
    let i = graph.index_of(target).expect("target resolved in forward");
    Ok(fwd.outputs[i].take().expect("target computed"))
}
