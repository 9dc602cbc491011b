//! Class-weighted cross-entropy and the evaluation metrics: per-class
//! recall, class average, and global average, all computed over non-void
//! pixels only.

use crate::data::{LabelMap, PreparedSample, VOID_LABEL};
use crate::error::{Result, SegError};
use crate::model::Network;
use crate::tensor::Tensor4;
use rayon::prelude::*;
use serde::Serialize;

/// Per-class loss weights. With `w[c] = 1 / (K * f[c])` uniform class
/// frequencies give unit weights, so the weighted loss reduces to the
/// unweighted one exactly. Classes absent from the training split get
/// weight zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(classes: usize) -> ClassWeights {
        ClassWeights {
            weights: vec![1.0; classes],
        }
    }

    pub fn inverse_frequency(frequencies: &[f64]) -> ClassWeights {
        let k = frequencies.len() as f64;
        ClassWeights {
            weights: frequencies
                .iter()
                .map(|&f| if f > 0.0 { 1.0 / (k * f) } else { 0.0 })
                .collect(),
        }
    }

    pub fn classes(&self) -> usize {
        self.weights.len()
    }
}

/// Pixel frequency of each class over a label set; sums to 1 over non-void
/// pixels.
pub fn class_frequencies<'a>(
    labels: impl IntoIterator<Item = &'a LabelMap>,
    classes: usize,
) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; classes];
    let mut total = 0u64;
    for map in labels {
        for &v in &map.data {
            if v == VOID_LABEL {
                continue;
            }
            if v as usize >= classes {
                return Err(SegError::Data(format!(
                    "label {v} exceeds class count {classes}"
                )));
            }
            counts[v as usize] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(SegError::Data(
            "dataset has no labeled (non-void) pixels".into(),
        ));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Mean weighted negative log-likelihood over non-void pixels, and its
/// gradient with respect to the logits: `w[label] * (probs - onehot) / P`
/// per pixel. Void pixels contribute nothing to either.
pub fn weighted_cross_entropy(
    probs: &Tensor4,
    labels: &LabelMap,
    weights: &ClassWeights,
) -> Result<(f64, Tensor4)> {
    let [n, k, h, w] = probs.dims();
    if n != 1 {
        return Err(SegError::Config(
            "weighted_cross_entropy expects a single-sample tensor".into(),
        ));
    }
    if k != weights.classes() {
        return Err(SegError::Config(format!(
            "{k} probability channels vs {} class weights",
            weights.classes()
        )));
    }
    if h != labels.height || w != labels.width {
        return Err(SegError::shape(
            "weighted_cross_entropy",
            probs.dims(),
            [1, k, labels.height, labels.width],
        ));
    }

    let hw = h * w;
    let mut labeled = 0usize;
    for (i, &label) in labels.data.iter().enumerate() {
        if label == VOID_LABEL {
            continue;
        }
        if label as usize >= k {
            return Err(SegError::Data(format!(
                "label {label} at pixel ({},{}) exceeds class count {k}",
                i / w,
                i % w
            )));
        }
        labeled += 1;
    }
    let mut grad = Tensor4::zeros(probs.dims());
    if labeled == 0 {
        return Ok((0.0, grad));
    }
    let inv_p = 1.0 / labeled as f64;
    let mut loss = 0.0;
    for i in 0..hw {
        let label = labels.data[i];
        if label == VOID_LABEL {
            continue;
        }
        let c = label as usize;
        let weight = weights.weights[c];
        if weight == 0.0 {
            continue;
        }
        // Floor at the smallest positive double: a soft-max output can
        // underflow to exactly zero at extreme logits, and the line search
        // needs a finite (huge) loss to reject such trial points.
        loss -= weight * probs.plane(0, c)[i].max(f64::MIN_POSITIVE).ln() * inv_p;
        for class in 0..k {
            let p = probs.plane(0, class)[i];
            let target = if class == c { 1.0 } else { 0.0 };
            grad.plane_mut(0, class)[i] = weight * (p - target) * inv_p;
        }
    }
    Ok((loss, grad))
}

/// K x K pixel counts, row = true class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> ConfusionMatrix {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn record(&mut self, true_class: usize, predicted: usize) {
        self.counts[true_class * self.classes + predicted] += 1;
    }

    pub fn count(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.classes + predicted]
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, true_class: usize) -> u64 {
        (0..self.classes).map(|p| self.count(true_class, p)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.count(c, c)).sum()
    }

    /// Accumulates every non-void pixel of one prediction.
    pub fn accumulate(&mut self, truth: &LabelMap, predicted: &LabelMap) -> Result<()> {
        if truth.height != predicted.height || truth.width != predicted.width {
            return Err(SegError::Data(format!(
                "prediction {}x{} does not match labels {}x{}",
                predicted.height, predicted.width, truth.height, truth.width
            )));
        }
        for (&t, &p) in truth.data.iter().zip(&predicted.data) {
            if t == VOID_LABEL {
                continue;
            }
            self.record(t as usize, p as usize);
        }
        Ok(())
    }
}

/// Evaluation summary in percent, matching the class-average / global-average
/// reporting convention.
#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    /// Recall per class; `None` for classes with no labeled pixels.
    pub per_class: Vec<Option<f64>>,
    pub class_avg: f64,
    pub global_avg: f64,
    #[serde(skip)]
    pub confusion: ConfusionMatrix,
}

/// Metrics from an already-accumulated confusion matrix.
pub fn metrics_from_confusion(confusion: ConfusionMatrix) -> EvalReport {
    let classes = confusion.classes();
    let mut per_class = Vec::with_capacity(classes);
    let mut class_sum = 0.0;
    let mut class_count = 0usize;
    for c in 0..classes {
        let row = confusion.row_sum(c);
        if row == 0 {
            per_class.push(None);
        } else {
            let recall = 100.0 * confusion.count(c, c) as f64 / row as f64;
            per_class.push(Some(recall));
            class_sum += recall;
            class_count += 1;
        }
    }
    let class_avg = if class_count > 0 {
        class_sum / class_count as f64
    } else {
        0.0
    };
    let total = confusion.total();
    let global_avg = if total > 0 {
        100.0 * confusion.trace() as f64 / total as f64
    } else {
        0.0
    };
    EvalReport {
        per_class,
        class_avg,
        global_avg,
        confusion,
    }
}

/// Arg-max labels of a single-sample probability tensor; ties go to the
/// lowest class index.
pub fn argmax_labels(probs: &Tensor4) -> LabelMap {
    let [_, k, h, w] = probs.dims();
    let mut data = vec![0u8; h * w];
    for (i, out) in data.iter_mut().enumerate() {
        let mut best = 0usize;
        let mut best_p = probs.plane(0, 0)[i];
        for class in 1..k {
            let p = probs.plane(0, class)[i];
            if p > best_p {
                best_p = p;
                best = class;
            }
        }
        *out = best as u8;
    }
    LabelMap {
        height: h,
        width: w,
        data,
    }
}

/// Runs the network over the dataset and reports the confusion matrix,
/// per-class recall, class average, and global average. Parallel over
/// samples with a deterministic merge.
pub fn evaluate(net: &Network, data: &[PreparedSample]) -> Result<EvalReport> {
    let classes = net.config().classes;
    let partials: Result<Vec<ConfusionMatrix>> = data
        .par_iter()
        .map(|s| {
            let trace = net.forward(&s.input)?;
            let predicted = argmax_labels(trace.probs());
            let mut confusion = ConfusionMatrix::new(classes);
            confusion.accumulate(&s.labels, &predicted)?;
            Ok(confusion)
        })
        .collect();
    let mut confusion = ConfusionMatrix::new(classes);
    for partial in partials? {
        confusion.merge(&partial);
    }
    Ok(metrics_from_confusion(confusion))
}
