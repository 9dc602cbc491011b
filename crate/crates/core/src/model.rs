//! Network assembly: a stack of encoders (conv, ReLU, 2x2 max pool) followed
//! by mirrored decoders (unpool with the matching encoder's indices, conv,
//! no non-linearity) and a per-pixel soft-max classifier. Encoder and
//! decoder kernels are separate parameters, every layer carries the same
//! feature count, and spatial resolution changes only at pool/unpool.

use crate::error::{Result, SegError};
use crate::layers::{
    conv_forward, conv_grad_input, conv_grad_params, logits_forward, maxpool_backward,
    maxpool_forward, relu_backward, relu_forward, softmax_grad_input, softmax_grad_weights,
    softmax_over_channels, unpool_backward, unpool_forward, ConvLayer, PoolIndices, SoftmaxLayer,
};
use crate::lcn::LcnConfig;
use crate::tensor::{FlatVector, Slot, Tensor4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::Read;
use std::path::Path;

/// Architecture hyper-parameters; these fully determine parameter shapes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    /// Number of encoder-decoder pairs.
    #[serde(default = "default_depth")]
    pub depth: usize,
    /// Feature maps per layer, constant across the stack.
    #[serde(default = "default_features")]
    pub features: usize,
    #[serde(default = "default_kernel")]
    pub kernel_size: usize,
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    /// Number of classes K.
    pub classes: usize,
}

fn default_depth() -> usize {
    4
}
fn default_features() -> usize {
    64
}
fn default_kernel() -> usize {
    7
}
fn default_input_channels() -> usize {
    3
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0
            || self.features == 0
            || self.input_channels == 0
            || self.classes < 2
        {
            return Err(SegError::Config(format!(
                "invalid network config: depth {}, features {}, input channels {}, classes {}",
                self.depth, self.features, self.input_channels, self.classes
            )));
        }
        if self.kernel_size.is_multiple_of(2) || self.kernel_size == 0 {
            return Err(SegError::Config(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// Inputs must be divisible by this in both spatial dims.
    pub fn resolution_multiple(&self) -> usize {
        1 << self.depth
    }

    /// Total convolution weights across encoders and decoders:
    /// `k^2 * (Cin*F + (2L-1)*F^2)`.
    pub fn conv_weight_count(&self) -> usize {
        let k2 = self.kernel_size * self.kernel_size;
        let f = self.features;
        k2 * (self.input_channels * f + (2 * self.depth - 1) * f * f)
    }
}

/// Side length in input pixels of the square context window seen by one
/// element of the pooled feature map at `layer_index` encoder depth.
pub fn receptive_field(config: &NetworkConfig, layer_index: usize) -> usize {
    let k = config.kernel_size;
    let mut rf = 1usize;
    let mut stride = 1usize;
    for _ in 0..layer_index {
        rf += (k - 1) * stride; // conv
        rf += stride; // 2x2 pool
        stride *= 2;
    }
    rf
}

/// Classifier head attached after the last decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Just the bias-free soft-max.
    Plain,
    /// A trainable 1x1 conv of the given width plus ReLU before the soft-max.
    Hidden { width: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum HeadDescriptor {
    Plain,
    Hidden { width: usize },
}

/// The full encoder-decoder network.
#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    encoders: Vec<ConvLayer>,
    decoders: Vec<ConvLayer>,
    hidden_head: Option<ConvLayer>,
    softmax: SoftmaxLayer,
    softmax_trainable: bool,
    /// Preprocessing the network was trained with; rides along in checkpoints.
    pub preprocess: Option<LcnConfig>,
    revision: u64,
}

/// Everything retained from a forward pass for the backward pass: per-layer
/// activations, the pooling indices consumed by the decoders, and the final
/// probability map.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    revision: u64,
    depth: usize,
    input: Tensor4,
    enc_pre_relu: Vec<Tensor4>,
    enc_post_relu: Vec<Tensor4>,
    pooled: Vec<Tensor4>,
    indices: Vec<PoolIndices>,
    dec_inputs: Vec<Tensor4>,
    features: Tensor4,
    head_pre_relu: Option<Tensor4>,
    classifier_input: Tensor4,
    probs: Tensor4,
}

impl ForwardTrace {
    pub fn probs(&self) -> &Tensor4 {
        &self.probs
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Post-ReLU encoder output (before pooling) at 1-based layer index.
    pub fn encoder_activation(&self, layer: usize) -> &Tensor4 {
        &self.enc_post_relu[layer - 1]
    }

    pub fn pool_indices(&self, layer: usize) -> &PoolIndices {
        &self.indices[layer - 1]
    }
}

impl Network {
    /// Gaussian init: every kernel is drawn from N(0,1) and scaled so each
    /// per-output-channel slice has unit L2 norm; biases start at zero; the
    /// soft-max rows are unit-L2 as well. Deterministic for a fixed seed.
    pub fn init(config: &NetworkConfig, seed: u64) -> Result<Network> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = config.features;
        let k = config.kernel_size;
        let mut encoders = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let cin = if i == 0 { config.input_channels } else { f };
            encoders.push(ConvLayer::new(
                gaussian_kernels([f, cin, k, k], &mut rng),
                vec![0.0; f],
            )?);
        }
        let mut decoders = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            decoders.push(ConvLayer::new(
                gaussian_kernels([f, f, k, k], &mut rng),
                vec![0.0; f],
            )?);
        }
        let softmax = SoftmaxLayer::new(gaussian_kernels([config.classes, f, 1, 1], &mut rng))?;
        Ok(Network {
            config: config.clone(),
            encoders,
            decoders,
            hidden_head: None,
            softmax,
            softmax_trainable: true,
            preprocess: None,
            revision: 0,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn head_kind(&self) -> HeadKind {
        match &self.hidden_head {
            None => HeadKind::Plain,
            Some(conv) => HeadKind::Hidden {
                width: conv.out_channels(),
            },
        }
    }

    pub fn encoder(&self, layer: usize) -> &ConvLayer {
        &self.encoders[layer - 1]
    }

    pub fn decoder(&self, layer: usize) -> &ConvLayer {
        &self.decoders[layer - 1]
    }

    pub fn softmax(&self) -> &SoftmaxLayer {
        &self.softmax
    }

    /// Names accepted by [`Network::set_freeze`], in parameter order.
    pub fn layer_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 1..=self.config.depth {
            names.push(format!("enc{i}"));
        }
        for i in 1..=self.config.depth {
            names.push(format!("dec{i}"));
        }
        if self.hidden_head.is_some() {
            names.push("head".into());
        }
        names.push("softmax".into());
        names
    }

    /// Marks exactly the named layers trainable and freezes the rest.
    /// Parameter values are untouched.
    pub fn set_freeze(&mut self, trainable: &[&str]) -> Result<()> {
        let known = self.layer_names();
        for name in trainable {
            if !known.iter().any(|n| n == name) {
                return Err(SegError::Config(format!(
                    "unknown layer {name:?}; expected one of {known:?}"
                )));
            }
        }
        for i in 0..self.config.depth {
            self.encoders[i].trainable = trainable.contains(&format!("enc{}", i + 1).as_str());
            self.decoders[i].trainable = trainable.contains(&format!("dec{}", i + 1).as_str());
        }
        if let Some(head) = &mut self.hidden_head {
            head.trainable = trainable.contains(&"head");
        }
        self.softmax_trainable = trainable.contains(&"softmax");
        Ok(())
    }

    pub fn trainable_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, enc) in self.encoders.iter().enumerate() {
            if enc.trainable {
                out.push(format!("enc{}", i + 1));
            }
        }
        for (i, dec) in self.decoders.iter().enumerate() {
            if dec.trainable {
                out.push(format!("dec{}", i + 1));
            }
        }
        if let Some(head) = &self.hidden_head {
            if head.trainable {
                out.push("head".into());
            }
        }
        if self.softmax_trainable {
            out.push("softmax".into());
        }
        out
    }

    /// Replaces the classification head. The body is frozen; the new head is
    /// trainable and freshly initialized from `seed`.
    pub fn attach_head(&mut self, kind: HeadKind, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = self.config.features;
        match kind {
            HeadKind::Plain => {
                self.hidden_head = None;
                self.softmax =
                    SoftmaxLayer::new(gaussian_kernels([self.config.classes, f, 1, 1], &mut rng))?;
            }
            HeadKind::Hidden { width } => {
                if width == 0 {
                    return Err(SegError::Config("hidden head width must be positive".into()));
                }
                self.hidden_head = Some(ConvLayer::new(
                    gaussian_kernels([width, f, 1, 1], &mut rng),
                    vec![0.0; width],
                )?);
                self.softmax = SoftmaxLayer::new(gaussian_kernels(
                    [self.config.classes, width, 1, 1],
                    &mut rng,
                ))?;
            }
        }
        for enc in &mut self.encoders {
            enc.trainable = false;
        }
        for dec in &mut self.decoders {
            dec.trainable = false;
        }
        if let Some(head) = &mut self.hidden_head {
            head.trainable = true;
        }
        self.softmax_trainable = true;
        self.revision += 1;
        Ok(())
    }

    /// Full-depth forward pass.
    pub fn forward(&self, x: &Tensor4) -> Result<ForwardTrace> {
        self.forward_depth(x, self.config.depth)
    }

    /// Forward through the first `depth` encoder-decoder pairs only; staged
    /// training grows the active depth one pair at a time.
    pub fn forward_depth(&self, x: &Tensor4, depth: usize) -> Result<ForwardTrace> {
        self.check_input(x, depth)?;
        let mut enc_pre_relu = Vec::with_capacity(depth);
        let mut enc_post_relu = Vec::with_capacity(depth);
        let mut pooled = Vec::with_capacity(depth);
        let mut indices = Vec::with_capacity(depth);
        let mut current = x.clone();
        for i in 0..depth {
            let a = conv_forward(&current, &self.encoders[i])?;
            let r = relu_forward(&a);
            let (p, idx) = maxpool_forward(&r)?;
            enc_pre_relu.push(a);
            enc_post_relu.push(r);
            indices.push(idx);
            current = p.clone();
            pooled.push(p);
        }
        let (dec_inputs, features) = self.decode(&current, &indices, depth)?;
        let (head_pre_relu, classifier_input) = self.apply_head(&features)?;
        let probs = softmax_over_channels(&logits_forward(&classifier_input, &self.softmax)?);
        Ok(ForwardTrace {
            revision: self.revision,
            depth,
            input: x.clone(),
            enc_pre_relu,
            enc_post_relu,
            pooled,
            indices,
            dec_inputs,
            features,
            head_pre_relu,
            classifier_input,
            probs,
        })
    }

    fn decode(
        &self,
        bottleneck: &Tensor4,
        indices: &[PoolIndices],
        depth: usize,
    ) -> Result<(Vec<Tensor4>, Tensor4)> {
        // dec_inputs[j-1] is the unpooled input consumed by decoder j.
        let mut dec_inputs = vec![Tensor4::zeros([0, 0, 0, 0]); depth];
        let mut current = bottleneck.clone();
        for j in (1..=depth).rev() {
            let up = unpool_forward(&current, &indices[j - 1])?;
            current = conv_forward(&up, &self.decoders[j - 1])?;
            dec_inputs[j - 1] = up;
        }
        Ok((dec_inputs, current))
    }

    fn apply_head(&self, features: &Tensor4) -> Result<(Option<Tensor4>, Tensor4)> {
        match &self.hidden_head {
            None => Ok((None, features.clone())),
            Some(conv) => {
                let pre = conv_forward(features, conv)?;
                let post = relu_forward(&pre);
                Ok((Some(pre), post))
            }
        }
    }

    /// Runs the forward pass but zeroes every encoder feature map at layer
    /// `layer` (post-ReLU, before pooling) whose index is not in `keep`.
    pub fn forward_ablated(&self, x: &Tensor4, layer: usize, keep: &[bool]) -> Result<ForwardTrace> {
        let depth = self.config.depth;
        if layer == 0 || layer > depth {
            return Err(SegError::Config(format!(
                "ablation layer {layer} out of range 1..={depth}"
            )));
        }
        if keep.len() != self.config.features {
            return Err(SegError::Config(format!(
                "keep mask has {} entries for {} feature maps",
                keep.len(),
                self.config.features
            )));
        }
        self.check_input(x, depth)?;
        let mut enc_pre_relu = Vec::with_capacity(depth);
        let mut enc_post_relu = Vec::with_capacity(depth);
        let mut pooled = Vec::with_capacity(depth);
        let mut indices = Vec::with_capacity(depth);
        let mut current = x.clone();
        for i in 0..depth {
            let a = conv_forward(&current, &self.encoders[i])?;
            let mut r = relu_forward(&a);
            if i + 1 == layer {
                for b in 0..r.batch() {
                    for (ch, &keep_map) in keep.iter().enumerate() {
                        if !keep_map {
                            r.plane_mut(b, ch).fill(0.0);
                        }
                    }
                }
            }
            let (p, idx) = maxpool_forward(&r)?;
            enc_pre_relu.push(a);
            enc_post_relu.push(r);
            indices.push(idx);
            current = p.clone();
            pooled.push(p);
        }
        let (dec_inputs, features) = self.decode(&current, &indices, depth)?;
        let (head_pre_relu, classifier_input) = self.apply_head(&features)?;
        let probs = softmax_over_channels(&logits_forward(&classifier_input, &self.softmax)?);
        Ok(ForwardTrace {
            revision: self.revision,
            depth,
            input: x.clone(),
            enc_pre_relu,
            enc_post_relu,
            pooled,
            indices,
            dec_inputs,
            features,
            head_pre_relu,
            classifier_input,
            probs,
        })
    }

    fn check_input(&self, x: &Tensor4, depth: usize) -> Result<()> {
        if depth == 0 || depth > self.config.depth {
            return Err(SegError::Config(format!(
                "forward depth {depth} out of range 1..={}",
                self.config.depth
            )));
        }
        let [n, c, h, w] = x.dims();
        if c != self.config.input_channels {
            return Err(SegError::shape(
                "forward input channels",
                x.dims(),
                [n, self.config.input_channels, h, w],
            ));
        }
        let m = 1 << depth;
        if n == 0 || h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(SegError::Config(format!(
                "input {h}x{w} must be a positive multiple of {m} for depth {depth}"
            )));
        }
        Ok(())
    }

    /// Gradient of a scalar loss with respect to all trainable parameters,
    /// given the loss gradient in logit space. Layout matches
    /// [`Network::param_vector`] over the trainable set.
    pub fn backward(&self, trace: &ForwardTrace, grad_logits: &Tensor4) -> Result<FlatVector> {
        Ok(self.backward_impl(trace, grad_logits, false)?.0)
    }

    /// Same as [`Network::backward`] but also returns the gradient with
    /// respect to the network input.
    pub fn backward_with_input_grad(
        &self,
        trace: &ForwardTrace,
        grad_logits: &Tensor4,
    ) -> Result<(FlatVector, Tensor4)> {
        let (grads, input_grad) = self.backward_impl(trace, grad_logits, true)?;
        Ok((grads, input_grad.expect("input grad requested")))
    }

    fn backward_impl(
        &self,
        trace: &ForwardTrace,
        grad_logits: &Tensor4,
        need_input_grad: bool,
    ) -> Result<(FlatVector, Option<Tensor4>)> {
        if trace.revision != self.revision {
            return Err(SegError::StaleTrace(
                "forward trace predates a parameter update; rerun forward".into(),
            ));
        }
        let depth = trace.depth;
        let mut grads = ParamGrads::default();

        // Classifier.
        if self.softmax_trainable {
            grads.softmax = Some(softmax_grad_weights(
                &trace.classifier_input,
                &self.softmax,
                grad_logits,
            )?);
        }
        let mut grad =
            softmax_grad_input(trace.classifier_input.dims(), &self.softmax, grad_logits)?;
        if let (Some(head), Some(pre)) = (&self.hidden_head, &trace.head_pre_relu) {
            grad = relu_backward(pre, &grad)?;
            if head.trainable {
                grads.head = Some(conv_grad_params(&trace.features, head, &grad)?);
            }
            grad = conv_grad_input(trace.features.dims(), head, &grad)?;
        }

        // Decoders, shallowest first: the trace's `features` came from
        // decoder 1, whose input feeds back toward the bottleneck.
        for j in 1..=depth {
            let dec = &self.decoders[j - 1];
            let up = &trace.dec_inputs[j - 1];
            if dec.trainable {
                grads.decoders.push((j, conv_grad_params(up, dec, &grad)?));
            }
            let grad_up = conv_grad_input(up.dims(), dec, &grad)?;
            grad = unpool_backward(&trace.indices[j - 1], &grad_up)?;
        }

        // Encoders, deepest first. Stop once no gradient consumer remains.
        let lowest_needed = if need_input_grad {
            0
        } else {
            match (1..=depth).find(|&i| self.encoders[i - 1].trainable) {
                Some(i) => i,
                None => depth + 1,
            }
        };
        let mut input_grad = None;
        for i in (1..=depth).rev() {
            if i < lowest_needed && !need_input_grad {
                break;
            }
            let enc = &self.encoders[i - 1];
            let grad_r = maxpool_backward(&trace.indices[i - 1], &grad)?;
            let grad_a = relu_backward(&trace.enc_pre_relu[i - 1], &grad_r)?;
            let conv_in = if i == 1 {
                &trace.input
            } else {
                &trace.pooled[i - 2]
            };
            if enc.trainable {
                grads.encoders.push((i, conv_grad_params(conv_in, enc, &grad_a)?));
            }
            if i > lowest_needed || need_input_grad {
                grad = conv_grad_input(conv_in.dims(), enc, &grad_a)?;
                if i == 1 && need_input_grad {
                    input_grad = Some(grad.clone());
                }
            } else {
                break;
            }
        }

        Ok((self.grads_to_flat(grads), input_grad))
    }

    fn grads_to_flat(&self, grads: ParamGrads) -> FlatVector {
        let mut data = Vec::new();
        let mut layout = Vec::new();
        let mut push = |name: String, dims: [usize; 4], values: &[f64], data: &mut Vec<f64>| {
            layout.push(Slot {
                id: name,
                dims,
                offset: data.len(),
            });
            data.extend_from_slice(values);
        };
        let mut enc_by_index: Vec<Option<(Tensor4, Vec<f64>)>> = vec![None; self.config.depth];
        for (i, g) in grads.encoders {
            enc_by_index[i - 1] = Some(g);
        }
        for (i, enc) in self.encoders.iter().enumerate() {
            if enc.trainable {
                let (gk, gb) = enc_by_index[i]
                    .take()
                    .unwrap_or_else(|| (Tensor4::zeros(enc.kernels.dims()), vec![0.0; enc.biases.len()]));
                push(format!("enc{}.kernels", i + 1), gk.dims(), gk.data(), &mut data);
                push(format!("enc{}.biases", i + 1), [1, 1, 1, gb.len()], &gb, &mut data);
            }
        }
        let mut dec_by_index: Vec<Option<(Tensor4, Vec<f64>)>> = vec![None; self.config.depth];
        for (j, g) in grads.decoders {
            dec_by_index[j - 1] = Some(g);
        }
        for (j, dec) in self.decoders.iter().enumerate() {
            if dec.trainable {
                let (gk, gb) = dec_by_index[j]
                    .take()
                    .unwrap_or_else(|| (Tensor4::zeros(dec.kernels.dims()), vec![0.0; dec.biases.len()]));
                push(format!("dec{}.kernels", j + 1), gk.dims(), gk.data(), &mut data);
                push(format!("dec{}.biases", j + 1), [1, 1, 1, gb.len()], &gb, &mut data);
            }
        }
        if let Some(head) = &self.hidden_head {
            if head.trainable {
                let (gk, gb) = grads
                    .head
                    .unwrap_or_else(|| (Tensor4::zeros(head.kernels.dims()), vec![0.0; head.biases.len()]));
                push("head.kernels".into(), gk.dims(), gk.data(), &mut data);
                push("head.biases".into(), [1, 1, 1, gb.len()], &gb, &mut data);
            }
        }
        if self.softmax_trainable {
            let gw = grads
                .softmax
                .unwrap_or_else(|| Tensor4::zeros(self.softmax.weights.dims()));
            push("softmax.weights".into(), gw.dims(), gw.data(), &mut data);
        }
        FlatVector { data, layout }
    }

    /// Concatenates parameters into a flat vector; `only_trainable` restricts
    /// to trainable layers. Order: encoders, decoders, head, soft-max.
    pub fn param_vector(&self, only_trainable: bool) -> FlatVector {
        let mut data = Vec::new();
        let mut layout = Vec::new();
        for (name, values, dims, trainable) in self.param_slots() {
            if only_trainable && !trainable {
                continue;
            }
            layout.push(Slot {
                id: name,
                dims,
                offset: data.len(),
            });
            data.extend_from_slice(values);
        }
        FlatVector { data, layout }
    }

    fn param_slots(&self) -> Vec<(String, &[f64], [usize; 4], bool)> {
        let mut out = Vec::new();
        for (i, enc) in self.encoders.iter().enumerate() {
            out.push((
                format!("enc{}.kernels", i + 1),
                enc.kernels.data(),
                enc.kernels.dims(),
                enc.trainable,
            ));
            out.push((
                format!("enc{}.biases", i + 1),
                enc.biases.as_slice(),
                [1, 1, 1, enc.biases.len()],
                enc.trainable,
            ));
        }
        for (j, dec) in self.decoders.iter().enumerate() {
            out.push((
                format!("dec{}.kernels", j + 1),
                dec.kernels.data(),
                dec.kernels.dims(),
                dec.trainable,
            ));
            out.push((
                format!("dec{}.biases", j + 1),
                dec.biases.as_slice(),
                [1, 1, 1, dec.biases.len()],
                dec.trainable,
            ));
        }
        if let Some(head) = &self.hidden_head {
            out.push((
                "head.kernels".into(),
                head.kernels.data(),
                head.kernels.dims(),
                head.trainable,
            ));
            out.push((
                "head.biases".into(),
                head.biases.as_slice(),
                [1, 1, 1, head.biases.len()],
                head.trainable,
            ));
        }
        out.push((
            "softmax.weights".into(),
            self.softmax.weights.data(),
            self.softmax.weights.dims(),
            self.softmax_trainable,
        ));
        out
    }

    /// Fast path for the optimizer: writes values straight into the current
    /// trainable slots, in [`Network::param_vector`] order.
    pub fn set_trainable_values(&mut self, values: &[f64]) -> Result<()> {
        let mut offset = 0;
        let slots: Vec<(String, usize)> = self
            .param_slots()
            .into_iter()
            .filter(|(_, _, _, trainable)| *trainable)
            .map(|(name, vals, _, _)| (name, vals.len()))
            .collect();
        let total: usize = slots.iter().map(|(_, len)| len).sum();
        if values.len() != total {
            return Err(SegError::Corrupt(format!(
                "{} values for {} trainable parameters",
                values.len(),
                total
            )));
        }
        for (name, len) in slots {
            self.write_slot(&name, &values[offset..offset + len])?;
            offset += len;
        }
        self.revision += 1;
        Ok(())
    }

    /// Writes a flat vector back into the parameters it was collected from.
    /// The layout must match the current trainable selection exactly.
    pub fn set_param_vector(&mut self, v: &FlatVector) -> Result<()> {
        let expected = self.param_vector(true);
        if !expected.same_layout(v) {
            return Err(SegError::Corrupt(
                "flat vector layout does not match the trainable parameter layout".into(),
            ));
        }
        if v.data.len() != expected.data.len() {
            return Err(SegError::Corrupt(format!(
                "flat vector holds {} values, expected {}",
                v.data.len(),
                expected.data.len()
            )));
        }
        for slot in &v.layout {
            let src = &v.data[slot.offset..slot.offset + slot.len()];
            self.write_slot(&slot.id, src)?;
        }
        self.revision += 1;
        Ok(())
    }

    fn write_slot(&mut self, id: &str, src: &[f64]) -> Result<()> {
        let (layer, field) = id
            .split_once('.')
            .ok_or_else(|| SegError::Corrupt(format!("malformed slot id {id:?}")))?;
        let dest: &mut [f64] = match (layer, field) {
            ("softmax", "weights") => self.softmax.weights.data_mut(),
            ("head", "kernels") => self
                .hidden_head
                .as_mut()
                .ok_or_else(|| SegError::Corrupt("no hidden head attached".into()))?
                .kernels
                .data_mut(),
            ("head", "biases") => self
                .hidden_head
                .as_mut()
                .ok_or_else(|| SegError::Corrupt("no hidden head attached".into()))?
                .biases
                .as_mut_slice(),
            _ => {
                let idx: usize = layer[3..]
                    .parse()
                    .map_err(|_| SegError::Corrupt(format!("bad layer id {id:?}")))?;
                if idx == 0 || idx > self.config.depth {
                    return Err(SegError::Corrupt(format!("layer index {idx} out of range")));
                }
                let conv = if layer.starts_with("enc") {
                    &mut self.encoders[idx - 1]
                } else if layer.starts_with("dec") {
                    &mut self.decoders[idx - 1]
                } else {
                    return Err(SegError::Corrupt(format!("bad layer id {id:?}")));
                };
                match field {
                    "kernels" => conv.kernels.data_mut(),
                    "biases" => conv.biases.as_mut_slice(),
                    _ => return Err(SegError::Corrupt(format!("bad field in {id:?}"))),
                }
            }
        };
        if dest.len() != src.len() {
            return Err(SegError::Corrupt(format!(
                "slot {id} length {} does not match parameter length {}",
                src.len(),
                dest.len()
            )));
        }
        dest.copy_from_slice(src);
        Ok(())
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Network> {
        let bytes = std::fs::read(path)?;
        Network::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest: Vec<LayerManifestEntry> = self
            .param_slots()
            .into_iter()
            .map(|(name, values, dims, _)| LayerManifestEntry {
                name,
                dims: natural_dims(dims, values.len()),
            })
            .collect();
        let header = CheckpointHeader {
            config: self.config.clone(),
            head: match self.head_kind() {
                HeadKind::Plain => HeadDescriptor::Plain,
                HeadKind::Hidden { width } => HeadDescriptor::Hidden { width },
            },
            lcn: self.preprocess.clone(),
            layers: manifest,
        };
        let header_json = serde_json::to_vec(&header)
            .map_err(|e| SegError::Corrupt(format!("header serialization failed: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&header_json);
        for (_, values, _, _) in self.param_slots() {
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
        let mut cursor = std::io::Cursor::new(bytes);
        let mut magic = [0u8; 4];
        cursor
            .read_exact(&mut magic)
            .map_err(|_| parse_err(0, "file too short for magic"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(parse_err(0, format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut cursor)?;
        if version != CHECKPOINT_VERSION {
            return Err(parse_err(4, format!("unsupported version {version}")));
        }
        let header_len = read_u32(&mut cursor)? as usize;
        let mut header_json = vec![0u8; header_len];
        cursor
            .read_exact(&mut header_json)
            .map_err(|_| parse_err(12, "truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(&header_json)
            .map_err(|e| parse_err(12, format!("header json: {e}")))?;

        let mut net = Network::init(&header.config, 0)?;
        match header.head {
            HeadDescriptor::Plain => {}
            HeadDescriptor::Hidden { width } => {
                net.attach_head(HeadKind::Hidden { width }, 0)?;
            }
        }
        net.preprocess = header.lcn;

        // The manifest must describe exactly the parameters this config
        // implies, in order.
        let expected: Vec<LayerManifestEntry> = net
            .param_slots()
            .into_iter()
            .map(|(name, values, dims, _)| LayerManifestEntry {
                name,
                dims: natural_dims(dims, values.len()),
            })
            .collect();
        if header.layers != expected {
            return Err(SegError::Corrupt(
                "checkpoint layer manifest does not match its config".into(),
            ));
        }

        let payload_offset = 12 + header_len;
        let expected_values: usize = expected.iter().map(|e| e.dims.iter().product::<usize>()).sum();
        let payload = &bytes[payload_offset..];
        if payload.len() != expected_values * 8 {
            return Err(SegError::Corrupt(format!(
                "checkpoint payload holds {} bytes, expected {}",
                payload.len(),
                expected_values * 8
            )));
        }
        let mut values = Vec::with_capacity(expected_values);
        for chunk in payload.chunks_exact(8) {
            values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        // All layers are trainable right after init, so the full vector
        // writes straight through.
        net.set_freeze(
            &net.layer_names().iter().map(String::as_str).collect::<Vec<_>>(),
        )?;
        let mut full = net.param_vector(true);
        full.data = values;
        net.set_param_vector(&full)?;
        Ok(net)
    }
}

#[derive(Default)]
struct ParamGrads {
    encoders: Vec<(usize, (Tensor4, Vec<f64>))>,
    decoders: Vec<(usize, (Tensor4, Vec<f64>))>,
    head: Option<(Tensor4, Vec<f64>)>,
    softmax: Option<Tensor4>,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SGNW";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    config: NetworkConfig,
    head: HeadDescriptor,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    lcn: Option<LcnConfig>,
    layers: Vec<LayerManifestEntry>,
}

#[derive(Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
struct LayerManifestEntry {
    name: String,
    dims: Vec<usize>,
}

/// Biases are stored as rank-1 entries in the manifest; kernels keep all
/// four dims.
fn natural_dims(dims: [usize; 4], len: usize) -> Vec<usize> {
    if dims[0] == 1 && dims[1] == 1 && dims[2] == 1 {
        vec![len]
    } else {
        dims.to_vec()
    }
}

fn parse_err(offset: usize, message: impl Into<String>) -> SegError {
    SegError::Parse {
        offset,
        message: message.into(),
    }
}

fn read_u32(cursor: &mut std::io::Cursor<&[u8]>) -> Result<u32> {
    let mut buf = [0u8; 4];
    let pos = cursor.position() as usize;
    cursor
        .read_exact(&mut buf)
        .map_err(|_| parse_err(pos, "truncated u32"))?;
    Ok(u32::from_le_bytes(buf))
}

fn gaussian_kernels(dims: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor4 {
    let mut t = Tensor4::zeros(dims);
    for v in t.data_mut() {
        *v = StandardNormal.sample(rng);
    }
    // Unit L2 norm per output-channel slice.
    let slice_len = dims[1] * dims[2] * dims[3];
    for oc in 0..dims[0] {
        let start = oc * slice_len;
        let slice = &mut t.data_mut()[start..start + slice_len];
        let norm = slice.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in slice {
                *v /= norm;
            }
        }
    }
    t
}
