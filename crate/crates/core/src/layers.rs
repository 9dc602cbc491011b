//! The five layer primitives: dense convolution, ReLU, 2x2 max pooling with
//! memorized argmax indices, index-driven unpooling, and the per-pixel
//! soft-max classifier.
//!
//! Convolution is cross-correlation (no kernel flip) with zero same-padding,
//! so spatial dims are preserved and only pooling changes resolution.

use crate::error::{Result, SegError};
use crate::tensor::{axpy, dot, Tensor4};

/// One convolution: a kernel bank of dims `(out_ch, in_ch, k, k)` plus a
/// per-output-channel bias, and a flag deciding whether the optimizer may
/// touch it.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernels: Tensor4,
    pub biases: Vec<f64>,
    pub trainable: bool,
}

impl ConvLayer {
    pub fn new(kernels: Tensor4, biases: Vec<f64>) -> Result<ConvLayer> {
        let [oc, _ic, kh, kw] = kernels.dims();
        if kh != kw || kh % 2 == 0 {
            return Err(SegError::Config(format!(
                "kernels must be square with odd size, got {kh}x{kw}"
            )));
        }
        if biases.len() != oc {
            return Err(SegError::Config(format!(
                "{} biases for {} output channels",
                biases.len(),
                oc
            )));
        }
        Ok(ConvLayer {
            kernels,
            biases,
            trainable: true,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.kernels.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernels.dims()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels.dims()[2]
    }
}

/// Per-window argmax offsets recorded by max pooling. Offset `o` in `0..4`
/// addresses position `(o / 2, o % 2)` inside the 2x2 source window.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndices {
    dims: [usize; 4],
    offsets: Vec<u8>,
}

impl PoolIndices {
    /// Dims of the pooled output these indices belong to.
    pub fn pooled_dims(&self) -> [usize; 4] {
        self.dims
    }

    /// Dims of the tensor the pooling consumed.
    pub fn source_dims(&self) -> [usize; 4] {
        let [n, c, ph, pw] = self.dims;
        [n, c, ph * 2, pw * 2]
    }

    pub fn offsets(&self) -> &[u8] {
        &self.offsets
    }
}

/// Bias-free 1x1 convolution weights feeding the per-pixel soft-max.
/// Weight dims are `(classes, in_ch, 1, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxLayer {
    pub weights: Tensor4,
    pub trainable: bool,
}

impl SoftmaxLayer {
    pub fn new(weights: Tensor4) -> Result<SoftmaxLayer> {
        let [_k, _c, kh, kw] = weights.dims();
        if kh != 1 || kw != 1 {
            return Err(SegError::Config(format!(
                "soft-max weights must be 1x1, got {kh}x{kw}"
            )));
        }
        Ok(SoftmaxLayer {
            weights,
            trainable: true,
        })
    }

    pub fn classes(&self) -> usize {
        self.weights.dims()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.dims()[1]
    }
}

/// Same-padded cross-correlation plus per-channel bias. Output spatial dims
/// equal input spatial dims.
pub fn conv_forward(x: &Tensor4, layer: &ConvLayer) -> Result<Tensor4> {
    let [n, ci, h, w] = x.dims();
    let [co, kci, k, _] = layer.kernels.dims();
    if ci != kci {
        return Err(SegError::shape("conv_forward", x.dims(), layer.kernels.dims()));
    }
    let pad = k / 2;
    let mut out = Tensor4::zeros([n, co, h, w]);
    for b in 0..n {
        for oc in 0..co {
            out.plane_mut(b, oc).fill(layer.biases[oc]);
            for ic in 0..ci {
                accumulate_correlation(
                    out.plane_mut(b, oc),
                    x.plane(b, ic),
                    layer.kernels.plane(oc, ic),
                    h,
                    w,
                    k,
                    pad,
                );
            }
        }
    }
    Ok(out)
}

/// out[y, x] += sum_{ky,kx} kern[ky,kx] * in[y+ky-pad, x+kx-pad] over valid taps.
#[inline]
fn accumulate_correlation(
    out: &mut [f64],
    input: &[f64],
    kern: &[f64],
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
) {
    for ky in 0..k {
        let dy = ky as isize - pad as isize;
        for kx in 0..k {
            let dx = kx as isize - pad as isize;
            let weight = kern[ky * k + kx];
            if weight == 0.0 {
                continue;
            }
            let y0 = (-dy).max(0) as usize;
            let y1 = ((h as isize - dy).min(h as isize)) as usize;
            let x0 = (-dx).max(0) as usize;
            let x1 = ((w as isize - dx).min(w as isize)) as usize;
            if x0 >= x1 {
                continue;
            }
            for y in y0..y1 {
                let sy = (y as isize + dy) as usize;
                let dst = &mut out[y * w + x0..y * w + x1];
                let src = &input[sy * w + (x0 as isize + dx) as usize
                    ..sy * w + (x1 as isize + dx) as usize];
                axpy(dst, weight, src);
            }
        }
    }
}

/// Analytic gradients of [`conv_forward`] with respect to input, kernels,
/// and biases.
pub fn conv_backward(
    x: &Tensor4,
    layer: &ConvLayer,
    grad_out: &Tensor4,
) -> Result<(Tensor4, Tensor4, Vec<f64>)> {
    let grad_x = conv_grad_input(x.dims(), layer, grad_out)?;
    let (grad_k, grad_b) = conv_grad_params(x, layer, grad_out)?;
    Ok((grad_x, grad_k, grad_b))
}

/// Gradient with respect to the convolution input only. Needs the input
/// dims but not the input values.
pub(crate) fn conv_grad_input(
    x_dims: [usize; 4],
    layer: &ConvLayer,
    grad_out: &Tensor4,
) -> Result<Tensor4> {
    let [n, _ci, h, w] = x_dims;
    let [co, _, k, _] = layer.kernels.dims();
    let expected = [n, co, h, w];
    if grad_out.dims() != expected {
        return Err(SegError::shape("conv_backward", grad_out.dims(), expected));
    }
    let pad = k / 2;
    let mut grad_x = Tensor4::zeros(x_dims);
    let ci = x_dims[1];
    for b in 0..n {
        for oc in 0..co {
            let go = grad_out.plane(b, oc);
            for ic in 0..ci {
                let kern = layer.kernels.plane(oc, ic);
                let gx = grad_x.plane_mut(b, ic);
                for ky in 0..k {
                    let dy = ky as isize - pad as isize;
                    for kx in 0..k {
                        let dx = kx as isize - pad as isize;
                        let weight = kern[ky * k + kx];
                        if weight == 0.0 {
                            continue;
                        }
                        let y0 = (-dy).max(0) as usize;
                        let y1 = ((h as isize - dy).min(h as isize)) as usize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = ((w as isize - dx).min(w as isize)) as usize;
                        if x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx0 = (x0 as isize + dx) as usize;
                            let sx1 = (x1 as isize + dx) as usize;
                            axpy(&mut gx[sy * w + sx0..sy * w + sx1], weight, &go[y * w + x0..y * w + x1]);
                        }
                    }
                }
            }
        }
    }
    Ok(grad_x)
}

/// Gradients with respect to kernels and biases only.
pub(crate) fn conv_grad_params(
    x: &Tensor4,
    layer: &ConvLayer,
    grad_out: &Tensor4,
) -> Result<(Tensor4, Vec<f64>)> {
    let [n, ci, h, w] = x.dims();
    let [co, _, k, _] = layer.kernels.dims();
    let expected = [n, co, h, w];
    if grad_out.dims() != expected {
        return Err(SegError::shape("conv_backward", grad_out.dims(), expected));
    }
    let pad = k / 2;
    let mut grad_b = vec![0.0; co];
    for b in 0..n {
        for (oc, gb) in grad_b.iter_mut().enumerate() {
            *gb += grad_out.plane(b, oc).iter().sum::<f64>();
        }
    }
    let mut grad_k = Tensor4::zeros(layer.kernels.dims());
    for b in 0..n {
        for oc in 0..co {
            let go = grad_out.plane(b, oc);
            for ic in 0..ci {
                let input = x.plane(b, ic);
                let gk = grad_k.plane_mut(oc, ic);
                for ky in 0..k {
                    let dy = ky as isize - pad as isize;
                    for kx in 0..k {
                        let dx = kx as isize - pad as isize;
                        let y0 = (-dy).max(0) as usize;
                        let y1 = ((h as isize - dy).min(h as isize)) as usize;
                        let x0 = (-dx).max(0) as usize;
                        let x1 = ((w as isize - dx).min(w as isize)) as usize;
                        if x0 >= x1 {
                            continue;
                        }
                        let mut tap_grad = 0.0;
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let sx0 = (x0 as isize + dx) as usize;
                            let sx1 = (x1 as isize + dx) as usize;
                            tap_grad += dot(&go[y * w + x0..y * w + x1], &input[sy * w + sx0..sy * w + sx1]);
                        }
                        gk[ky * k + kx] += tap_grad;
                    }
                }
            }
        }
    }
    Ok((grad_k, grad_b))
}

pub fn relu_forward(x: &Tensor4) -> Tensor4 {
    x.map(|v| v.max(0.0))
}

/// Gradient gated by `x > 0`; the subgradient at exactly 0 is 0.
pub fn relu_backward(x: &Tensor4, grad_out: &Tensor4) -> Result<Tensor4> {
    x.zip_with(grad_out, |v, g| if v > 0.0 { g } else { 0.0 })
}

/// Non-overlapping 2x2 max pooling. Ties resolve to the first maximum in
/// row-major window order. Spatial dims must be even.
pub fn maxpool_forward(x: &Tensor4) -> Result<(Tensor4, PoolIndices)> {
    let [n, c, h, w] = x.dims();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(SegError::Config(format!(
            "max pooling needs even spatial dims, got {h}x{w}; pad the input first"
        )));
    }
    let (ph, pw) = (h / 2, w / 2);
    let mut out = Tensor4::zeros([n, c, ph, pw]);
    let mut offsets = vec![0u8; n * c * ph * pw];
    let mut slot = 0;
    for b in 0..n {
        for ch in 0..c {
            let plane = x.plane(b, ch);
            let out_plane = out.plane_mut(b, ch);
            for py in 0..ph {
                let r0 = 2 * py * w;
                let r1 = (2 * py + 1) * w;
                for px in 0..pw {
                    let xx = 2 * px;
                    let window = [
                        plane[r0 + xx],
                        plane[r0 + xx + 1],
                        plane[r1 + xx],
                        plane[r1 + xx + 1],
                    ];
                    let mut best = 0u8;
                    for (o, &v) in window.iter().enumerate().skip(1) {
                        if v > window[best as usize] {
                            best = o as u8;
                        }
                    }
                    out_plane[py * pw + px] = window[best as usize];
                    offsets[slot] = best;
                    slot += 1;
                }
            }
        }
    }
    let indices = PoolIndices {
        dims: [n, c, ph, pw],
        offsets,
    };
    Ok((out, indices))
}

/// Routes the pooled gradient back to each window's argmax position.
pub fn maxpool_backward(indices: &PoolIndices, grad_out: &Tensor4) -> Result<Tensor4> {
    if grad_out.dims() != indices.dims {
        return Err(SegError::shape(
            "maxpool_backward",
            grad_out.dims(),
            indices.dims,
        ));
    }
    scatter_to_windows(indices, grad_out)
}

/// Places each value at its memorized offset inside a 2x2 window; the other
/// three positions stay zero.
pub fn unpool_forward(y: &Tensor4, indices: &PoolIndices) -> Result<Tensor4> {
    if y.dims() != indices.dims {
        return Err(SegError::shape("unpool_forward", y.dims(), indices.dims));
    }
    scatter_to_windows(indices, y)
}

fn scatter_to_windows(indices: &PoolIndices, values: &Tensor4) -> Result<Tensor4> {
    let [n, c, ph, pw] = indices.dims;
    let w = pw * 2;
    let mut out = Tensor4::zeros(indices.source_dims());
    let mut slot = 0;
    for b in 0..n {
        for ch in 0..c {
            let vals = values.plane(b, ch);
            let out_plane = out.plane_mut(b, ch);
            for py in 0..ph {
                for px in 0..pw {
                    let o = indices.offsets[slot] as usize;
                    let y = 2 * py + o / 2;
                    let x = 2 * px + o % 2;
                    out_plane[y * w + x] = vals[py * pw + px];
                    slot += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`unpool_forward`]: gathers the gradient at each memorized
/// position back to pooled resolution.
pub fn unpool_backward(indices: &PoolIndices, grad_out: &Tensor4) -> Result<Tensor4> {
    if grad_out.dims() != indices.source_dims() {
        return Err(SegError::shape(
            "unpool_backward",
            grad_out.dims(),
            indices.source_dims(),
        ));
    }
    let [n, c, ph, pw] = indices.dims;
    let w = pw * 2;
    let mut out = Tensor4::zeros(indices.dims);
    let mut slot = 0;
    for b in 0..n {
        for ch in 0..c {
            let go = grad_out.plane(b, ch);
            let out_plane = out.plane_mut(b, ch);
            for py in 0..ph {
                for px in 0..pw {
                    let o = indices.offsets[slot] as usize;
                    let y = 2 * py + o / 2;
                    let x = 2 * px + o % 2;
                    out_plane[py * pw + px] = go[y * w + x];
                    slot += 1;
                }
            }
        }
    }
    Ok(out)
}

/// 1x1 convolution (no bias) followed by a channel-wise soft-max at every
/// pixel, stabilized by subtracting the per-pixel maximum logit.
pub fn softmax_forward(x: &Tensor4, layer: &SoftmaxLayer) -> Result<Tensor4> {
    let logits = logits_forward(x, layer)?;
    Ok(softmax_over_channels(&logits))
}

/// The pre-soft-max linear map; exposed so losses can work in logit space.
pub fn logits_forward(x: &Tensor4, layer: &SoftmaxLayer) -> Result<Tensor4> {
    let [n, ci, h, w] = x.dims();
    let klasses = layer.classes();
    if ci != layer.in_channels() {
        return Err(SegError::shape("softmax_forward", x.dims(), layer.weights.dims()));
    }
    let mut logits = Tensor4::zeros([n, klasses, h, w]);
    for b in 0..n {
        for k in 0..klasses {
            let plane = logits.plane_mut(b, k);
            for ic in 0..ci {
                axpy(plane, layer.weights.at(k, ic, 0, 0), x.plane(b, ic));
            }
        }
    }
    Ok(logits)
}

/// Channel-wise soft-max of a logit tensor.
pub fn softmax_over_channels(logits: &Tensor4) -> Tensor4 {
    let [n, klasses, h, w] = logits.dims();
    let hw = h * w;
    let mut probs = Tensor4::zeros(logits.dims());
    for b in 0..n {
        for i in 0..hw {
            let mut max_logit = f64::NEG_INFINITY;
            for k in 0..klasses {
                max_logit = max_logit.max(logits.plane(b, k)[i]);
            }
            let mut total = 0.0;
            for k in 0..klasses {
                let e = (logits.plane(b, k)[i] - max_logit).exp();
                probs.plane_mut(b, k)[i] = e;
                total += e;
            }
            for k in 0..klasses {
                probs.plane_mut(b, k)[i] /= total;
            }
        }
    }
    probs
}

/// Backward pass of the classifier given the gradient with respect to the
/// logits (losses fold the soft-max Jacobian into that gradient).
pub fn softmax_backward(
    x: &Tensor4,
    layer: &SoftmaxLayer,
    grad_logits: &Tensor4,
) -> Result<(Tensor4, Tensor4)> {
    let grad_x = softmax_grad_input(x.dims(), layer, grad_logits)?;
    let grad_w = softmax_grad_weights(x, layer, grad_logits)?;
    Ok((grad_x, grad_w))
}

pub(crate) fn softmax_grad_input(
    x_dims: [usize; 4],
    layer: &SoftmaxLayer,
    grad_logits: &Tensor4,
) -> Result<Tensor4> {
    let [n, ci, h, w] = x_dims;
    let klasses = layer.classes();
    let expected = [n, klasses, h, w];
    if grad_logits.dims() != expected {
        return Err(SegError::shape("softmax_backward", grad_logits.dims(), expected));
    }
    let mut grad_x = Tensor4::zeros(x_dims);
    for b in 0..n {
        for k in 0..klasses {
            let gl = grad_logits.plane(b, k);
            for ic in 0..ci {
                axpy(grad_x.plane_mut(b, ic), layer.weights.at(k, ic, 0, 0), gl);
            }
        }
    }
    Ok(grad_x)
}

pub(crate) fn softmax_grad_weights(
    x: &Tensor4,
    layer: &SoftmaxLayer,
    grad_logits: &Tensor4,
) -> Result<Tensor4> {
    let [n, ci, h, w] = x.dims();
    let klasses = layer.classes();
    let expected = [n, klasses, h, w];
    if grad_logits.dims() != expected {
        return Err(SegError::shape("softmax_backward", grad_logits.dims(), expected));
    }
    let mut grad_w = Tensor4::zeros(layer.weights.dims());
    for b in 0..n {
        for k in 0..klasses {
            let gl = grad_logits.plane(b, k);
            for ic in 0..ci {
                *grad_w.at_mut(k, ic, 0, 0) += dot(gl, x.plane(b, ic));
            }
        }
    }
    Ok(grad_w)
}

/// Pulls a gradient with respect to soft-max outputs back to logit space:
/// `g_k = p_k * (gp_k - sum_j gp_j * p_j)` per pixel.
pub fn softmax_jacobian_vjp(probs: &Tensor4, grad_probs: &Tensor4) -> Result<Tensor4> {
    if probs.dims() != grad_probs.dims() {
        return Err(SegError::shape("softmax_jacobian", probs.dims(), grad_probs.dims()));
    }
    let [n, klasses, h, w] = probs.dims();
    let hw = h * w;
    let mut out = Tensor4::zeros(probs.dims());
    for b in 0..n {
        for i in 0..hw {
            let mut inner = 0.0;
            for k in 0..klasses {
                inner += grad_probs.plane(b, k)[i] * probs.plane(b, k)[i];
            }
            for k in 0..klasses {
                out.plane_mut(b, k)[i] =
                    probs.plane(b, k)[i] * (grad_probs.plane(b, k)[i] - inner);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(dims: [usize; 4], data: &[f64]) -> Tensor4 {
        Tensor4::from_vec(dims, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_padded_ones() {
        let x = Tensor4::full([1, 1, 3, 3], 1.0);
        let layer = ConvLayer::new(Tensor4::full([1, 1, 3, 3], 1.0), vec![0.0]).unwrap();
        let out = conv_forward(&x, &layer).unwrap();
        assert_eq!(out.at(0, 0, 1, 1), 9.0);
        for &(y, x_) in &[(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(out.at(0, 0, y, x_), 4.0);
        }
        for &(y, x_) in &[(0, 1), (1, 0), (1, 2), (2, 1)] {
            assert_eq!(out.at(0, 0, y, x_), 6.0);
        }
    }

    #[test]
    fn conv_zero_kernels_yield_bias() {
        let x = tensor([1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let layer = ConvLayer::new(Tensor4::zeros([3, 2, 3, 3]), vec![0.5, -1.0, 2.0]).unwrap();
        let out = conv_forward(&x, &layer).unwrap();
        for oc in 0..3 {
            for v in out.plane(0, oc) {
                assert_eq!(*v, layer.biases[oc]);
            }
        }
    }

    #[test]
    fn conv_channel_mismatch_is_shape_error() {
        let x = Tensor4::zeros([1, 2, 4, 4]);
        let layer = ConvLayer::new(Tensor4::zeros([1, 3, 3, 3]), vec![0.0]).unwrap();
        assert!(matches!(conv_forward(&x, &layer), Err(SegError::Shape { .. })));
    }

    #[test]
    fn conv_backward_zero_grad() {
        let x = Tensor4::full([1, 2, 4, 4], 1.0);
        let layer = ConvLayer::new(Tensor4::full([3, 2, 3, 3], 0.3), vec![0.0; 3]).unwrap();
        let grad_out = Tensor4::zeros([1, 3, 4, 4]);
        let (gx, gk, gb) = conv_backward(&x, &layer, &grad_out).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(gk.data().iter().all(|&v| v == 0.0));
        assert!(gb.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_backward_single_pixel_grad_recovers_input_patch() {
        // grad_out is 1 at the centre pixel (1,1) of a 3x3 map, so the kernel
        // gradient is exactly the input patch under the kernel at that pixel.
        let x = tensor([1, 1, 3, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        let layer = ConvLayer::new(Tensor4::full([1, 1, 3, 3], 0.1), vec![0.0]).unwrap();
        let mut grad_out = Tensor4::zeros([1, 1, 3, 3]);
        *grad_out.at_mut(0, 0, 1, 1) = 1.0;
        let (_, gk, gb) = conv_backward(&x, &layer, &grad_out).unwrap();
        assert_eq!(gk.data(), x.data());
        assert_eq!(gb, vec![1.0]);

        // At a corner pixel the patch is zero-padded.
        let mut grad_out = Tensor4::zeros([1, 1, 3, 3]);
        *grad_out.at_mut(0, 0, 0, 0) = 1.0;
        let (_, gk, _) = conv_backward(&x, &layer, &grad_out).unwrap();
        assert_eq!(gk.data(), &[0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 0.0, 4.0, 5.0]);
    }

    #[test]
    fn relu_examples() {
        let x = tensor([1, 1, 1, 3], &[-1.0, 0.0, 2.0]);
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);

        let x = tensor([1, 1, 1, 2], &[-1.0, 2.0]);
        let g = tensor([1, 1, 1, 2], &[5.0, 5.0]);
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0, 5.0]);

        // Subgradient at exactly zero is zero.
        let x = tensor([1, 1, 1, 1], &[0.0]);
        let g = tensor([1, 1, 1, 1], &[7.0]);
        assert_eq!(relu_backward(&x, &g).unwrap().data(), &[0.0]);
    }

    #[test]
    fn maxpool_window_and_tie_break() {
        let x = tensor([1, 1, 2, 2], &[1.0, 3.0, 2.0, 0.0]);
        let (out, idx) = maxpool_forward(&x).unwrap();
        assert_eq!(out.data(), &[3.0]);
        assert_eq!(idx.offsets(), &[1]);

        let x = Tensor4::full([1, 1, 2, 2], 7.0);
        let (out, idx) = maxpool_forward(&x).unwrap();
        assert_eq!(out.data(), &[7.0]);
        assert_eq!(idx.offsets(), &[0]);
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let x = Tensor4::zeros([1, 1, 3, 4]);
        let err = maxpool_forward(&x).unwrap_err();
        assert!(err.to_string().contains("pad"), "{err}");
    }

    #[test]
    fn maxpool_backward_scatters_to_argmax() {
        let x = tensor([1, 1, 2, 2], &[1.0, 3.0, 2.0, 0.0]);
        let (_, idx) = maxpool_forward(&x).unwrap();
        let g = tensor([1, 1, 1, 1], &[5.0]);
        let gx = maxpool_backward(&idx, &g).unwrap();
        assert_eq!(gx.data(), &[0.0, 5.0, 0.0, 0.0]);

        let zeros = Tensor4::zeros([1, 1, 1, 1]);
        assert!(maxpool_backward(&idx, &zeros).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unpool_places_value_at_memorized_offset() {
        let x = tensor([1, 1, 2, 2], &[0.0, 0.0, 9.0, 0.0]);
        let (pooled, idx) = maxpool_forward(&x).unwrap();
        assert_eq!(idx.offsets(), &[2]);
        let y = tensor([1, 1, 1, 1], &[5.0]);
        let up = unpool_forward(&y, &idx).unwrap();
        assert_eq!(up.data(), &[0.0, 0.0, 5.0, 0.0]);
        assert_eq!(pooled.data(), &[9.0]);
    }

    #[test]
    fn unpool_backward_gathers_from_memorized_offset() {
        let x = tensor([1, 1, 2, 2], &[0.0, 0.0, 9.0, 0.0]);
        let (_, idx) = maxpool_forward(&x).unwrap();
        let g = tensor([1, 1, 2, 2], &[1.0, 2.0, 9.0, 4.0]);
        let gy = unpool_backward(&idx, &g).unwrap();
        assert_eq!(gy.data(), &[9.0]);

        let zeros = Tensor4::zeros([1, 1, 2, 2]);
        assert_eq!(unpool_backward(&idx, &zeros).unwrap().data(), &[0.0]);
    }

    #[test]
    fn pool_then_unpool_keeps_only_argmax_values() {
        let x = tensor(
            [1, 1, 4, 4],
            &[
                1.0, 2.0, 5.0, 1.0, //
                3.0, 0.0, 2.0, 0.0, //
                0.0, 1.0, 1.0, 1.0, //
                4.0, 0.0, 1.0, 2.0,
            ],
        );
        let (pooled, idx) = maxpool_forward(&x).unwrap();
        let up = unpool_forward(&pooled, &idx).unwrap();
        let mut nonzero = 0;
        for i in 0..x.len() {
            let v = up.data()[i];
            if v != 0.0 {
                nonzero += 1;
                assert_eq!(v, x.data()[i]);
            }
        }
        assert_eq!(nonzero, 4);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        // Two channels engineered to produce equal logits.
        let x = Tensor4::full([1, 1, 1, 1], 1.0);
        let layer = SoftmaxLayer::new(tensor([2, 1, 1, 1], &[0.0, 0.0])).unwrap();
        let p = softmax_forward(&x, &layer).unwrap();
        assert!((p.at(0, 0, 0, 0) - 0.5).abs() < 1e-15);
        assert!((p.at(0, 1, 0, 0) - 0.5).abs() < 1e-15);

        // Huge logits [1000, 1000 + ln 3] must not overflow.
        let x = tensor([1, 2, 1, 1], &[1000.0, 3.0f64.ln()]);
        let layer = SoftmaxLayer::new(tensor([2, 2, 1, 1], &[1.0, 0.0, 1.0, 1.0])).unwrap();
        let p = softmax_forward(&x, &layer).unwrap();
        assert!((p.at(0, 0, 0, 0) - 0.25).abs() < 1e-12);
        assert!((p.at(0, 1, 0, 0) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_pixels_sum_to_one() {
        let x = tensor(
            [1, 2, 2, 2],
            &[0.3, -1.0, 2.0, 0.0, 1.5, 0.2, -0.7, 4.0],
        );
        let layer =
            SoftmaxLayer::new(tensor([3, 2, 1, 1], &[0.5, -0.3, 1.0, 0.7, -0.2, 0.1])).unwrap();
        let p = softmax_forward(&x, &layer).unwrap();
        for i in 0..4 {
            let s: f64 = (0..3).map(|k| p.plane(0, k)[i]).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
