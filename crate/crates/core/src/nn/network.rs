//! Forward and backward passes over the fixed layer vocabulary.
//!
//! Convolutions are lowered to matrix products through an im2col buffer so
//! that the bulk of the work runs in `matrixmultiply::dgemm`.

use super::arch::{LayerSpec, NetworkArchitecture};
use super::params::{GradientSet, ParamEntry, ParameterSet};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Lower clip applied to the true-class probability before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Per-example probabilities, shape `[batch, num_classes]`.
pub fn forward(arch: &NetworkArchitecture, params: &ParameterSet, batch: &Tensor) -> Result<Tensor> {
    let batch_size = check_inputs(arch, params, batch)?;
    let lookup = entry_lookup(arch, params);
    let mut act = batch.data().to_vec();
    for (i, layer) in arch.layers().iter().enumerate() {
        let in_shape = arch.layer_input_shape(i);
        act = match *layer {
            LayerSpec::Conv2d { .. } => conv_forward(layer, &in_shape, lookup(i), &act, batch_size),
            LayerSpec::Dense { inputs, outputs } => dense_forward(inputs, outputs, lookup(i), &act, batch_size),
            LayerSpec::Relu => {
                act.iter_mut().for_each(|v| *v = v.max(0.0));
                act
            }
            LayerSpec::MaxPool2x2 => maxpool_forward(&in_shape, &act, batch_size).0,
            LayerSpec::Flatten => act,
            LayerSpec::Softmax => {
                softmax_rows(&mut act, arch.num_classes());
                act
            }
        };
    }
    Ok(Tensor::from_parts(vec![batch_size, arch.num_classes()], act))
}

/// Forward over an arbitrarily large batch in fixed-size chunks.
pub fn forward_chunked(
    arch: &NetworkArchitecture,
    params: &ParameterSet,
    images: &[&Tensor],
    chunk: usize,
) -> Result<Tensor> {
    let m = arch.num_classes();
    let mut out = Vec::with_capacity(images.len() * m);
    for part in images.chunks(chunk.max(1)) {
        let batch = Tensor::stack(part.iter().copied())?;
        out.extend_from_slice(forward(arch, params, &batch)?.data());
    }
    Ok(Tensor::from_parts(vec![images.len(), m], out))
}

/// Mean cross-entropy over the batch and its exact gradient.
pub fn loss_and_grad(
    arch: &NetworkArchitecture,
    params: &ParameterSet,
    batch: &Tensor,
    labels: &[usize],
) -> Result<(f64, GradientSet)> {
    let batch_size = check_inputs(arch, params, batch)?;
    let m = arch.num_classes();
    if labels.len() != batch_size {
        return Err(Error::ShapeMismatch {
            context: "labels".into(),
            expected: vec![batch_size],
            found: vec![labels.len()],
        });
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= m) {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: m,
        });
    }

    let lookup = entry_lookup(arch, params);
    let layers = arch.layers();
    // inputs[i] is the input activation of layer i
    let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    let mut pool_argmax: Vec<Option<Vec<usize>>> = vec![None; layers.len()];
    let mut act = batch.data().to_vec();
    for (i, layer) in layers.iter().enumerate() {
        let in_shape = arch.layer_input_shape(i);
        let next = match *layer {
            LayerSpec::Conv2d { .. } => conv_forward(layer, &in_shape, lookup(i), &act, batch_size),
            LayerSpec::Dense { inputs, outputs } => dense_forward(inputs, outputs, lookup(i), &act, batch_size),
            LayerSpec::Relu => act.iter().map(|v| v.max(0.0)).collect(),
            LayerSpec::MaxPool2x2 => {
                let (out, arg) = maxpool_forward(&in_shape, &act, batch_size);
                pool_argmax[i] = Some(arg);
                out
            }
            LayerSpec::Flatten => act.clone(),
            LayerSpec::Softmax => {
                let mut p = act.clone();
                softmax_rows(&mut p, m);
                p
            }
        };
        inputs.push(act);
        act = next;
    }
    let probs = act;

    let scale = 1.0 / batch_size as f64;
    let mut loss = 0.0;
    let mut delta = vec![0.0; batch_size * m];
    for (b, &y) in labels.iter().enumerate() {
        let row = &probs[b * m..(b + 1) * m];
        let p_true = row[y].clamp(PROB_FLOOR, 1.0);
        loss -= p_true.ln();
        // inside the clipped region the loss is flat, so the gradient vanishes
        if row[y] >= PROB_FLOOR {
            let d = &mut delta[b * m..(b + 1) * m];
            for (j, dj) in d.iter_mut().enumerate() {
                *dj = (row[j] - if j == y { 1.0 } else { 0.0 }) * scale;
            }
        }
    }
    loss *= scale;

    let mut grads = GradientSet::zeros_like(params);
    let entry_pos = entry_positions(arch);
    // delta now holds dL/d(logits), the input of the softmax layer
    for i in (0..layers.len() - 1).rev() {
        let in_shape = arch.layer_input_shape(i);
        let x = &inputs[i];
        delta = match layers[i] {
            LayerSpec::Conv2d { .. } => {
                let entry = lookup(i);
                let g = &mut grads.entries_mut()[entry_pos[i]];
                conv_backward(&layers[i], &in_shape, entry, x, &delta, batch_size, g, i > 0)
            }
            LayerSpec::Dense { inputs, outputs } => {
                let entry = lookup(i);
                let g = &mut grads.entries_mut()[entry_pos[i]];
                dense_backward(inputs, outputs, entry, x, &delta, batch_size, g)
            }
            LayerSpec::Relu => delta
                .iter()
                .zip(x)
                .map(|(d, &xi)| if xi > 0.0 { *d } else { 0.0 })
                .collect(),
            LayerSpec::MaxPool2x2 => {
                let arg = pool_argmax[i].as_ref().expect("pool forward recorded argmax");
                let mut dx = vec![0.0; x.len()];
                for (d, &src) in delta.iter().zip(arg) {
                    dx[src] += d;
                }
                dx
            }
            LayerSpec::Flatten => delta,
            LayerSpec::Softmax => unreachable!("softmax is terminal"),
        };
    }
    Ok((loss, grads))
}

/// Mean cross-entropy without gradients.
pub fn loss(
    arch: &NetworkArchitecture,
    params: &ParameterSet,
    batch: &Tensor,
    labels: &[usize],
) -> Result<f64> {
    let probs = forward(arch, params, batch)?;
    let m = arch.num_classes();
    if labels.len() != probs.shape()[0] {
        return Err(Error::ShapeMismatch {
            context: "labels".into(),
            expected: vec![probs.shape()[0]],
            found: vec![labels.len()],
        });
    }
    let mut total = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        if y >= m {
            return Err(Error::LabelOutOfRange {
                label: y,
                num_classes: m,
            });
        }
        total -= probs.row(b)[y].clamp(PROB_FLOOR, 1.0).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn check_inputs(arch: &NetworkArchitecture, params: &ParameterSet, batch: &Tensor) -> Result<usize> {
    params.check_arch(arch)?;
    let shape = batch.shape();
    let input = arch.input_shape();
    if shape.len() != 4 || shape[1..] != input[..] {
        let mut expected = vec![shape.first().copied().unwrap_or(0)];
        expected.extend_from_slice(&input);
        return Err(Error::ShapeMismatch {
            context: format!("input of layer 0 ({})", arch.layers()[0].kind()),
            expected,
            found: shape.to_vec(),
        });
    }
    if shape[0] == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(shape[0])
}

fn entry_positions(arch: &NetworkArchitecture) -> Vec<usize> {
    let mut pos = vec![usize::MAX; arch.layers().len()];
    for (k, i) in arch.parameterized_layers().into_iter().enumerate() {
        pos[i] = k;
    }
    pos
}

fn entry_lookup<'a>(arch: &NetworkArchitecture, params: &'a ParameterSet) -> impl Fn(usize) -> &'a ParamEntry {
    let pos = entry_positions(arch);
    move |i| &params.entries()[pos[i]]
}

fn softmax_rows(values: &mut [f64], m: usize) {
    for row in values.chunks_mut(m) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// `c = a * b` (or `c += a * b`) with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oc: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(layer: &LayerSpec, in_shape: &[usize]) -> Self {
        let LayerSpec::Conv2d {
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } = *layer
        else {
            unreachable!("conv geometry on a non-conv layer")
        };
        let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
        ConvGeom {
            c,
            h,
            w,
            k: kernel,
            stride,
            pad: padding,
            oc: out_channels,
            oh: (h + 2 * padding - kernel) / stride + 1,
            ow: (w + 2 * padding - kernel) / stride + 1,
        }
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let ncol = self.cols();
        for ch in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let r = (ch * self.k + ki) * self.k + kj;
                    let dst = &mut cols[r * ncol..(r + 1) * ncol];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let row = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            row.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &x[(ch * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, v) in row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let ncol = self.cols();
        for ch in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let r = (ch * self.k + ki) * self.k + kj;
                    let src = &cols[r * ncol..(r + 1) * ncol];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(ch * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward(layer: &LayerSpec, in_shape: &[usize], entry: &ParamEntry, x: &[f64], batch: usize) -> Vec<f64> {
    let g = ConvGeom::new(layer, in_shape);
    let (rows, ncol) = (g.rows(), g.cols());
    let in_len = g.c * g.h * g.w;
    let out_len = g.oc * ncol;
    let mut cols = vec![0.0; rows * ncol];
    let mut out = vec![0.0; batch * out_len];
    let weight = entry.weight.data();
    let bias = entry.bias.data();
    for b in 0..batch {
        g.im2col(&x[b * in_len..(b + 1) * in_len], &mut cols);
        let y = &mut out[b * out_len..(b + 1) * out_len];
        for (o, chunk) in y.chunks_mut(ncol).enumerate() {
            chunk.iter_mut().for_each(|v| *v = bias[o]);
        }
        gemm(g.oc, rows, ncol, weight, (rows, 1), &cols, (ncol, 1), y, true);
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    layer: &LayerSpec,
    in_shape: &[usize],
    entry: &ParamEntry,
    x: &[f64],
    dy: &[f64],
    batch: usize,
    grad: &mut ParamEntry,
    need_dx: bool,
) -> Vec<f64> {
    let g = ConvGeom::new(layer, in_shape);
    let (rows, ncol) = (g.rows(), g.cols());
    let in_len = g.c * g.h * g.w;
    let out_len = g.oc * ncol;
    let mut cols = vec![0.0; rows * ncol];
    let mut dcols = vec![0.0; rows * ncol];
    let mut dx = if need_dx { vec![0.0; batch * in_len] } else { Vec::new() };
    let weight = entry.weight.data();
    for b in 0..batch {
        let dyb = &dy[b * out_len..(b + 1) * out_len];
        g.im2col(&x[b * in_len..(b + 1) * in_len], &mut cols);
        // dW += dY * cols^T
        gemm(g.oc, ncol, rows, dyb, (ncol, 1), &cols, (1, ncol), grad.weight.data_mut(), true);
        for (o, chunk) in dyb.chunks(ncol).enumerate() {
            grad.bias.data_mut()[o] += chunk.iter().sum::<f64>();
        }
        if need_dx {
            // dcols = W^T * dY
            gemm(rows, g.oc, ncol, weight, (1, rows), dyb, (ncol, 1), &mut dcols, false);
            g.col2im(&dcols, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    dx
}

fn dense_forward(inputs: usize, outputs: usize, entry: &ParamEntry, x: &[f64], batch: usize) -> Vec<f64> {
    let bias = entry.bias.data();
    let mut out = Vec::with_capacity(batch * outputs);
    for _ in 0..batch {
        out.extend_from_slice(bias);
    }
    // Y = X * W^T
    gemm(batch, inputs, outputs, x, (inputs, 1), entry.weight.data(), (1, inputs), &mut out, true);
    out
}

fn dense_backward(
    inputs: usize,
    outputs: usize,
    entry: &ParamEntry,
    x: &[f64],
    dy: &[f64],
    batch: usize,
    grad: &mut ParamEntry,
) -> Vec<f64> {
    // dW += dY^T * X
    gemm(outputs, batch, inputs, dy, (1, outputs), x, (inputs, 1), grad.weight.data_mut(), true);
    let db = grad.bias.data_mut();
    for row in dy.chunks(outputs) {
        for (d, v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    // dX = dY * W
    let mut dx = vec![0.0; batch * inputs];
    gemm(batch, outputs, inputs, dy, (outputs, 1), entry.weight.data(), (inputs, 1), &mut dx, false);
    dx
}

fn maxpool_forward(in_shape: &[usize], x: &[f64], batch: usize) -> (Vec<f64>, Vec<usize>) {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (h / 2, w / 2);
    let in_len = c * h * w;
    let mut out = Vec::with_capacity(batch * c * oh * ow);
    let mut arg = Vec::with_capacity(batch * c * oh * ow);
    for b in 0..batch {
        for ch in 0..c {
            let base = b * in_len + ch * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + (2 * i) * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    arg.push(best);
                }
            }
        }
    }
    (out, arg)
}
