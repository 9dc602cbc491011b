//! Central finite-difference checks of every analytic backward pass, from
//! single layers up to a whole network trained end to end. The numerical
//! side never touches the backward code it validates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segkit_core::data::LabelMap;
use segkit_core::layers::{
    conv_backward, conv_forward, maxpool_backward, maxpool_forward, relu_backward, relu_forward,
    softmax_backward, softmax_forward, softmax_jacobian_vjp, ConvLayer, SoftmaxLayer,
};
use segkit_core::loss::{weighted_cross_entropy, ClassWeights};
use segkit_core::model::{Network, NetworkConfig};
use segkit_core::tensor::Tensor4;

/// Conv, ReLU, pooling, and unpooling are piecewise linear in every
/// argument, so a comparatively large step has zero truncation error and
/// keeps the cancellation noise floor two orders below the tolerances.
/// The genuinely nonlinear paths (soft-max, whole network) use a smaller
/// step.
const EPS_LINEAR: f64 = 1e-4;
const EPS_SMOOTH: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

fn random_tensor(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4 {
    let len = dims.iter().product();
    Tensor4::from_vec(dims, (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Central difference of a scalar-valued function along one coordinate of a
/// tensor copy.
fn central_diff(f: &dyn Fn(&Tensor4) -> f64, at: &Tensor4, index: usize, eps: f64) -> f64 {
    let mut plus = at.clone();
    plus.data_mut()[index] += eps;
    let mut minus = at.clone();
    minus.data_mut()[index] -= eps;
    (f(&plus) - f(&minus)) / (2.0 * eps)
}

/// A fixed projection turns a tensor-valued map into a scalar so that the
/// chain rule gives grad = J^T proj, which the backward pass must reproduce.
fn projection(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4 {
    random_tensor(dims, rng)
}

fn project(t: &Tensor4, proj: &Tensor4) -> f64 {
    t.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
}

#[test]
fn conv_backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let x = random_tensor([1, 2, 5, 5], &mut rng);
    let kernels = random_tensor([3, 2, 3, 3], &mut rng);
    let biases: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
    let layer = ConvLayer::new(kernels.clone(), biases.clone()).unwrap();
    let proj = projection([1, 3, 5, 5], &mut rng);

    let grad_out = proj.clone();
    let (grad_x, grad_k, grad_b) = conv_backward(&x, &layer, &grad_out).unwrap();

    let f_of_x = |t: &Tensor4| project(&conv_forward(t, &layer).unwrap(), &proj);
    for i in 0..x.len() {
        let numeric = central_diff(&f_of_x, &x, i, EPS_LINEAR);
        assert!(
            rel_err(numeric, grad_x.data()[i]) < 1e-6,
            "grad_x[{i}]: {numeric} vs {}",
            grad_x.data()[i]
        );
    }

    let f_of_k = |t: &Tensor4| {
        let layer = ConvLayer::new(t.clone(), biases.clone()).unwrap();
        project(&conv_forward(&x, &layer).unwrap(), &proj)
    };
    for i in 0..kernels.len() {
        let numeric = central_diff(&f_of_k, &kernels, i, EPS_LINEAR);
        assert!(
            rel_err(numeric, grad_k.data()[i]) < 1e-6,
            "grad_k[{i}]: {numeric} vs {}",
            grad_k.data()[i]
        );
    }

    for (oc, &analytic) in grad_b.iter().enumerate() {
        let mut plus = biases.clone();
        plus[oc] += EPS_LINEAR;
        let mut minus = biases.clone();
        minus[oc] -= EPS_LINEAR;
        let fp = project(
            &conv_forward(&x, &ConvLayer::new(kernels.clone(), plus).unwrap()).unwrap(),
            &proj,
        );
        let fm = project(
            &conv_forward(&x, &ConvLayer::new(kernels.clone(), minus).unwrap()).unwrap(),
            &proj,
        );
        let numeric = (fp - fm) / (2.0 * EPS_LINEAR);
        assert!(rel_err(numeric, analytic) < 1e-6, "bias {oc}");
    }
}

#[test]
fn relu_backward_matches_finite_differences_away_from_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    // Keep activations away from the kink so central differences are valid.
    let x = random_tensor([1, 2, 4, 4], &mut rng).map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    let proj = projection(x.dims(), &mut rng);
    let grad = relu_backward(&x, &proj).unwrap();
    let f = |t: &Tensor4| project(&relu_forward(t), &proj);
    for i in 0..x.len() {
        let numeric = central_diff(&f, &x, i, EPS_LINEAR);
        assert!(rel_err(numeric, grad.data()[i]) < 1e-6, "relu grad[{i}]");
    }
}

#[test]
fn maxpool_backward_matches_finite_differences_away_from_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = random_tensor([1, 2, 6, 6], &mut rng);
    let proj = projection([1, 2, 3, 3], &mut rng);
    let (_, indices) = maxpool_forward(&x).unwrap();
    let grad = maxpool_backward(&indices, &proj).unwrap();
    let f = |t: &Tensor4| project(&maxpool_forward(t).unwrap().0, &proj);
    for i in 0..x.len() {
        let numeric = central_diff(&f, &x, i, EPS_LINEAR);
        assert!(
            rel_err(numeric, grad.data()[i]) < 1e-6,
            "pool grad[{i}]: {numeric} vs {}",
            grad.data()[i]
        );
    }
}

#[test]
fn softmax_with_cross_entropy_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let x = random_tensor([1, 4, 4, 4], &mut rng);
    let weights_t = random_tensor([3, 4, 1, 1], &mut rng);
    let layer = SoftmaxLayer::new(weights_t.clone()).unwrap();
    let labels = LabelMap::new(
        4,
        4,
        (0..16).map(|i| if i == 5 { 255 } else { (i % 3) as u8 }).collect(),
    )
    .unwrap();
    let class_weights = ClassWeights {
        weights: vec![1.0, 0.5, 2.0],
    };

    let probs = softmax_forward(&x, &layer).unwrap();
    let (_, grad_logits) = weighted_cross_entropy(&probs, &labels, &class_weights).unwrap();
    let (grad_x, grad_w) = softmax_backward(&x, &layer, &grad_logits).unwrap();

    let loss_of_x = |t: &Tensor4| {
        let p = softmax_forward(t, &layer).unwrap();
        weighted_cross_entropy(&p, &labels, &class_weights).unwrap().0
    };
    for i in 0..x.len() {
        let numeric = central_diff(&loss_of_x, &x, i, EPS_SMOOTH);
        assert!(
            rel_err(numeric, grad_x.data()[i]) < 1e-6,
            "grad_x[{i}]: {numeric} vs {}",
            grad_x.data()[i]
        );
    }

    let loss_of_w = |t: &Tensor4| {
        let layer = SoftmaxLayer::new(t.clone()).unwrap();
        let p = softmax_forward(&x, &layer).unwrap();
        weighted_cross_entropy(&p, &labels, &class_weights).unwrap().0
    };
    for i in 0..weights_t.len() {
        let numeric = central_diff(&loss_of_w, &weights_t, i, EPS_SMOOTH);
        assert!(
            rel_err(numeric, grad_w.data()[i]) < 1e-6,
            "grad_w[{i}]: {numeric} vs {}",
            grad_w.data()[i]
        );
    }
}

#[test]
fn probability_space_gradient_agrees_with_logit_space() {
    // dL/dprobs pushed through the soft-max Jacobian must equal the fused
    // w * (p - onehot) / P gradient the loss returns.
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let x = random_tensor([1, 3, 4, 4], &mut rng);
    let layer = SoftmaxLayer::new(random_tensor([3, 3, 1, 1], &mut rng)).unwrap();
    let labels = LabelMap::new(4, 4, (0..16).map(|i| (i % 3) as u8).collect()).unwrap();
    let weights = ClassWeights {
        weights: vec![0.7, 1.1, 1.9],
    };
    let probs = softmax_forward(&x, &layer).unwrap();
    let (_, grad_logits) = weighted_cross_entropy(&probs, &labels, &weights).unwrap();

    let pixels = 16.0;
    let mut grad_probs = Tensor4::zeros(probs.dims());
    for i in 0..16 {
        let c = labels.data[i] as usize;
        grad_probs.plane_mut(0, c)[i] = -weights.weights[c] / (pixels * probs.plane(0, c)[i]);
    }
    let via_jacobian = softmax_jacobian_vjp(&probs, &grad_probs).unwrap();
    for (a, b) in via_jacobian.data().iter().zip(grad_logits.data()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

fn network_loss(
    net: &Network,
    input: &Tensor4,
    labels: &LabelMap,
    weights: &ClassWeights,
) -> f64 {
    let trace = net.forward(input).unwrap();
    weighted_cross_entropy(trace.probs(), labels, weights).unwrap().0
}

#[test]
fn full_network_gradient_matches_finite_differences() {
    let config = NetworkConfig {
        depth: 2,
        features: 3,
        kernel_size: 3,
        input_channels: 3,
        classes: 3,
    };
    let mut net = Network::init(&config, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let input = random_tensor([1, 3, 8, 8], &mut rng);
    let labels = LabelMap::new(8, 8, (0..64).map(|i| (i % 3) as u8).collect()).unwrap();
    let weights = ClassWeights {
        weights: vec![1.0, 1.3, 0.6],
    };

    let trace = net.forward(&input).unwrap();
    let (_, grad_logits) = weighted_cross_entropy(trace.probs(), &labels, &weights).unwrap();
    let (analytic, input_grad) = net.backward_with_input_grad(&trace, &grad_logits).unwrap();

    let x0 = net.param_vector(true);
    let mut worst: f64 = 0.0;
    for i in 0..x0.len() {
        let mut plus = x0.clone();
        plus.data[i] += EPS_SMOOTH;
        let mut minus = x0.clone();
        minus.data[i] -= EPS_SMOOTH;
        net.set_param_vector(&plus).unwrap();
        let fp = network_loss(&net, &input, &labels, &weights);
        net.set_param_vector(&minus).unwrap();
        let fm = network_loss(&net, &input, &labels, &weights);
        let numeric = (fp - fm) / (2.0 * EPS_SMOOTH);
        worst = worst.max(rel_err(numeric, analytic.data[i]));
    }
    net.set_param_vector(&x0).unwrap();
    assert!(worst < 1e-5, "worst parameter-gradient relative error {worst}");

    // Input gradient through the whole stack.
    let f = |t: &Tensor4| network_loss(&net, t, &labels, &weights);
    let mut worst_in: f64 = 0.0;
    for i in 0..input.len() {
        let numeric = central_diff(&f, &input, i, EPS_SMOOTH);
        worst_in = worst_in.max(rel_err(numeric, input_grad.data()[i]));
    }
    assert!(worst_in < 1e-5, "worst input-gradient relative error {worst_in}");
}

#[test]
fn frozen_layers_receive_no_gradient_but_inner_ones_match() {
    let config = NetworkConfig {
        depth: 2,
        features: 3,
        kernel_size: 3,
        input_channels: 3,
        classes: 3,
    };
    let mut net = Network::init(&config, 8).unwrap();
    net.set_freeze(&["enc2", "dec2"]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let input = random_tensor([1, 3, 8, 8], &mut rng);
    let labels = LabelMap::new(8, 8, (0..64).map(|i| (i % 3) as u8).collect()).unwrap();
    let weights = ClassWeights::uniform(3);

    let trace = net.forward(&input).unwrap();
    let (_, grad_logits) = weighted_cross_entropy(trace.probs(), &labels, &weights).unwrap();
    let grads = net.backward(&trace, &grad_logits).unwrap();
    let names: Vec<&str> = grads.layout.iter().map(|s| s.id.as_str()).collect();
    assert_eq!(names, vec!["enc2.kernels", "enc2.biases", "dec2.kernels", "dec2.biases"]);

    let x0 = net.param_vector(true);
    for i in 0..x0.len() {
        let mut plus = x0.clone();
        plus.data[i] += EPS_SMOOTH;
        let mut minus = x0.clone();
        minus.data[i] -= EPS_SMOOTH;
        net.set_param_vector(&plus).unwrap();
        let fp = network_loss(&net, &input, &labels, &weights);
        net.set_param_vector(&minus).unwrap();
        let fm = network_loss(&net, &input, &labels, &weights);
        let numeric = (fp - fm) / (2.0 * EPS_SMOOTH);
        assert!(rel_err(numeric, grads.data[i]) < 1e-5, "param {i}");
    }
}
