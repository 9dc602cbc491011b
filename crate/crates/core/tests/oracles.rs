//! Brute-force reference implementations checked against the layer kernels.
//! The oracles here are written independently of the library's loop
//! structure: direct six-loop convolution, windowed max scans, and
//! inner-product identities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segkit_core::layers::{
    conv_forward, maxpool_forward, unpool_backward, unpool_forward, ConvLayer,
};
use segkit_core::tensor::Tensor4;

fn random_tensor(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4 {
    let len = dims.iter().product();
    Tensor4::from_vec(dims, (0..len).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

/// Direct translation of the definition: six nested loops, zero padding.
fn naive_conv(x: &Tensor4, kernels: &Tensor4, biases: &[f64]) -> Tensor4 {
    let [n, ci, h, w] = x.dims();
    let [co, _, k, _] = kernels.dims();
    let pad = (k / 2) as isize;
    let mut out = Tensor4::zeros([n, co, h, w]);
    for b in 0..n {
        for (oc, &bias) in biases.iter().enumerate() {
            for y in 0..h as isize {
                for xx in 0..w as isize {
                    let mut acc = bias;
                    for ic in 0..ci {
                        for ky in 0..k as isize {
                            for kx in 0..k as isize {
                                let sy = y + ky - pad;
                                let sx = xx + kx - pad;
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                                    acc += kernels.at(oc, ic, ky as usize, kx as usize)
                                        * x.at(b, ic, sy as usize, sx as usize);
                                }
                            }
                        }
                    }
                    *out.at_mut(b, oc, y as usize, xx as usize) = acc;
                }
            }
        }
    }
    out
}

#[test]
fn conv_forward_equals_naive_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    // Mixed-channel case: 1x2x5x5 input against 3x2x3x3 kernels.
    let cases = [
        ([1, 2, 5, 5], [3, 2, 3, 3]),
        ([2, 3, 8, 6], [4, 3, 5, 5]),
        ([1, 1, 4, 4], [1, 1, 7, 7]),
        ([2, 4, 6, 6], [2, 4, 1, 1]),
    ];
    for (x_dims, k_dims) in cases {
        let x = random_tensor(x_dims, &mut rng);
        let kernels = random_tensor(k_dims, &mut rng);
        let biases: Vec<f64> = (0..k_dims[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let layer = ConvLayer::new(kernels.clone(), biases.clone()).unwrap();
        let fast = conv_forward(&x, &layer).unwrap();
        let slow = naive_conv(&x, &kernels, &biases);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn conv_is_linear_with_zero_bias() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let kernels = random_tensor([3, 2, 3, 3], &mut rng);
    let layer = ConvLayer::new(kernels, vec![0.0; 3]).unwrap();
    let x = random_tensor([1, 2, 6, 6], &mut rng);
    let y = random_tensor([1, 2, 6, 6], &mut rng);
    let (a, b) = (1.7, -0.4);
    let combined = x.zip_with(&y, |u, v| a * u + b * v).unwrap();
    let lhs = conv_forward(&combined, &layer).unwrap();
    let fx = conv_forward(&x, &layer).unwrap();
    let fy = conv_forward(&y, &layer).unwrap();
    for i in 0..lhs.len() {
        let rhs = a * fx.data()[i] + b * fy.data()[i];
        assert!((lhs.data()[i] - rhs).abs() < 1e-10);
    }
}

#[test]
fn maxpool_matches_windowed_scan_and_indices_point_at_maxima() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let x = random_tensor([1, 1, 8, 8], &mut rng);
    let (pooled, indices) = maxpool_forward(&x).unwrap();
    for py in 0..4 {
        for px in 0..4 {
            let mut expected = f64::NEG_INFINITY;
            for dy in 0..2 {
                for dx in 0..2 {
                    expected = expected.max(x.at(0, 0, 2 * py + dy, 2 * px + dx));
                }
            }
            assert_eq!(pooled.at(0, 0, py, px), expected);
            let o = indices.offsets()[py * 4 + px] as usize;
            assert_eq!(x.at(0, 0, 2 * py + o / 2, 2 * px + o % 2), expected);
        }
    }
}

#[test]
fn unpool_has_at_most_one_nonzero_per_window() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for _ in 0..50 {
        let x = random_tensor([1, 2, 4, 4], &mut rng);
        let (pooled, indices) = maxpool_forward(&x).unwrap();
        let y = random_tensor(pooled.dims(), &mut rng);
        let up = unpool_forward(&y, &indices).unwrap();
        for ch in 0..2 {
            for py in 0..2 {
                for px in 0..2 {
                    let nonzero = (0..2)
                        .flat_map(|dy| (0..2).map(move |dx| (dy, dx)))
                        .filter(|&(dy, dx)| up.at(0, ch, 2 * py + dy, 2 * px + dx) != 0.0)
                        .count();
                    assert!(nonzero <= 1);
                }
            }
        }
    }
}

#[test]
fn unpool_adjoint_inner_product_identity() {
    // <unpool(y), g> == <y, unpool_backward(g)> for arbitrary y and g.
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    for _ in 0..100 {
        let x = random_tensor([1, 3, 6, 6], &mut rng);
        let (pooled, indices) = maxpool_forward(&x).unwrap();
        let y = random_tensor(pooled.dims(), &mut rng);
        let g = random_tensor(x.dims(), &mut rng);
        let up = unpool_forward(&y, &indices).unwrap();
        let down = unpool_backward(&indices, &g).unwrap();
        let lhs: f64 = up.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = y.data().iter().zip(down.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }
}

#[test]
fn pool_of_unpool_recovers_pooled_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    for _ in 0..50 {
        // Pooling always runs on post-ReLU maps, so the contract case is
        // non-negative input: re-pooling the unpooled tensor is lossless.
        let x = random_tensor([2, 2, 8, 8], &mut rng).map(|v| v.max(0.0));
        let (pooled, indices) = maxpool_forward(&x).unwrap();
        let up = unpool_forward(&pooled, &indices).unwrap();
        let (re_pooled, _) = maxpool_forward(&up).unwrap();
        assert_eq!(re_pooled.data(), pooled.data());

        // For signed values the other three zeros in each window cap the
        // recovery at zero.
        let x = random_tensor([2, 2, 8, 8], &mut rng);
        let (pooled, indices) = maxpool_forward(&x).unwrap();
        let up = unpool_forward(&pooled, &indices).unwrap();
        let (re_pooled, _) = maxpool_forward(&up).unwrap();
        for (a, b) in re_pooled.data().iter().zip(pooled.data()) {
            assert_eq!(*a, b.max(0.0));
        }
    }
}
