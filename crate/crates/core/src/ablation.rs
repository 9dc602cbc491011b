//! Feature-ablation study: per-map RMS statistics, top-N membership
//! histograms over a dataset, and label-space decoding with all but a chosen
//! set of feature maps zeroed.
//!
//! RMS is measured on post-ReLU encoder outputs before pooling, where the
//! per-map pixel count matches the layer's working resolution.

use crate::data::{render_labels, tensor_to_bytes, LabelMap, Palette, PreparedSample, Sample};
use crate::error::{Result, SegError};
use crate::lcn::{lcn, LcnConfig};
use crate::loss::argmax_labels;
use crate::model::Network;
use crate::pnm;
use crate::tensor::Tensor4;
use rayon::prelude::*;
use std::path::{Path, PathBuf};

/// Root mean square of each feature map of a single-sample activation
/// tensor: one non-negative value per map.
pub fn rms_per_map(activations: &Tensor4) -> Vec<f64> {
    let [n, c, h, w] = activations.dims();
    assert_eq!(n, 1, "rms_per_map expects a single sample");
    let pixels = (h * w) as f64;
    (0..c)
        .map(|ch| {
            let sum_sq: f64 = activations.plane(0, ch).iter().map(|v| v * v).sum();
            (sum_sq / pixels).sqrt()
        })
        .collect()
}

/// Indices of the `n` largest values, ties broken toward the lower index.
pub fn top_n_indices(values: &[f64], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.truncate(n);
    order
}

/// Aggregated top-N membership per feature map over a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationProfile {
    pub layer: usize,
    pub n: usize,
    pub dataset_size: usize,
    /// How many samples placed each map in their top N.
    pub histogram: Vec<u64>,
    /// Fraction of maps that ever appear in any sample's top N.
    pub activated_fraction: f64,
}

impl AblationProfile {
    pub fn histogram_csv(&self) -> String {
        histogram_csv(&self.histogram)
    }
}

fn histogram_csv(histogram: &[u64]) -> String {
    let mut out = String::from("map_index,count\n");
    for (i, c) in histogram.iter().enumerate() {
        out.push_str(&format!("{i},{c}\n"));
    }
    out
}

/// For each sample, finds the N maps with the largest RMS at `layer` and
/// accumulates their histogram bins.
pub fn topn_histogram(
    net: &Network,
    data: &[PreparedSample],
    layer: usize,
    n: usize,
) -> Result<AblationProfile> {
    let features = net.config().features;
    if n == 0 || n > features {
        return Err(SegError::Config(format!(
            "top-N must be in 1..={features}, got {n}"
        )));
    }
    if layer == 0 || layer > net.depth() {
        return Err(SegError::Config(format!(
            "layer {layer} out of range 1..={}",
            net.depth()
        )));
    }
    let tops: Result<Vec<Vec<usize>>> = data
        .par_iter()
        .map(|s| {
            let trace = net.forward(&s.input)?;
            let rms = rms_per_map(trace.encoder_activation(layer));
            Ok(top_n_indices(&rms, n))
        })
        .collect();
    let mut histogram = vec![0u64; features];
    for top in tops? {
        for idx in top {
            histogram[idx] += 1;
        }
    }
    let activated = histogram.iter().filter(|&&c| c > 0).count();
    Ok(AblationProfile {
        layer,
        n,
        dataset_size: data.len(),
        histogram,
        activated_fraction: activated as f64 / features as f64,
    })
}

/// Decodes pixel labels with every feature map at `layer` outside `keep`
/// forced to zero. An empty keep set decodes the pure bias response.
pub fn ablated_predict(
    net: &Network,
    input: &Tensor4,
    layer: usize,
    keep: &[usize],
) -> Result<LabelMap> {
    let features = net.config().features;
    let mut mask = vec![false; features];
    for &idx in keep {
        if idx >= features {
            return Err(SegError::Config(format!(
                "keep set references map {idx} of {features}"
            )));
        }
        mask[idx] = true;
    }
    let trace = net.forward_ablated(input, layer, &mask)?;
    Ok(argmax_labels(trace.probs()))
}

/// Rendered comparison grids: one file per (layer, N) with a row per sample
/// holding the input, the full prediction, and the prediction decoded from
/// that sample's own top-N maps. Returns the written panel paths.
#[allow(clippy::too_many_arguments)]
pub fn ablation_panel(
    net: &Network,
    samples: &[Sample],
    lcn_cfg: &LcnConfig,
    layers: &[usize],
    n_list: &[usize],
    palette: &Palette,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    if samples.is_empty() {
        return Err(SegError::Config("ablation panel needs at least one sample".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut stats = String::from("layer,n,activated_fraction\n");
    for &layer in layers {
        for &n in n_list {
            let mut rows = Vec::with_capacity(samples.len());
            let mut histogram = vec![0u64; net.config().features];
            for sample in samples {
                let input = lcn(&sample.image, lcn_cfg)?;
                let full_trace = net.forward(&input)?;
                let full = argmax_labels(full_trace.probs());
                let rms = rms_per_map(full_trace.encoder_activation(layer));
                let keep = top_n_indices(&rms, n);
                for &idx in &keep {
                    histogram[idx] += 1;
                }
                let ablated = ablated_predict(net, &input, layer, &keep)?;
                rows.push([
                    tensor_to_bytes(&sample.image),
                    render_labels(&full, palette),
                    render_labels(&ablated, palette),
                ]);
            }
            let activated = histogram.iter().filter(|&&c| c > 0).count() as f64
                / net.config().features as f64;
            stats.push_str(&format!("{layer},{n},{activated}\n"));

            let [_, _, h, w] = samples[0].image.dims();
            let panel = compose_grid(&rows, h, w);
            let path = out_dir.join(format!("panel_layer{layer}_top{n}.ppm"));
            pnm::write_ppm(&path, 3 * w + 4 * BORDER, rows.len() * (h + BORDER) + BORDER, &panel)?;
            written.push(path);

            std::fs::write(
                out_dir.join(format!("histogram_layer{layer}_top{n}.csv")),
                histogram_csv(&histogram),
            )?;
        }
    }
    std::fs::write(out_dir.join("ablation_stats.csv"), stats)?;
    Ok(written)
}

const BORDER: usize = 2;

fn compose_grid(rows: &[[Vec<u8>; 3]], cell_h: usize, cell_w: usize) -> Vec<u8> {
    let width = 3 * cell_w + 4 * BORDER;
    let height = rows.len() * (cell_h + BORDER) + BORDER;
    let mut canvas = vec![255u8; width * height * 3];
    for (r, row) in rows.iter().enumerate() {
        let y0 = BORDER + r * (cell_h + BORDER);
        for (c, cell) in row.iter().enumerate() {
            let x0 = BORDER + c * (cell_w + BORDER);
            for y in 0..cell_h {
                let dst = ((y0 + y) * width + x0) * 3;
                let src = y * cell_w * 3;
                canvas[dst..dst + cell_w * 3].copy_from_slice(&cell[src..src + cell_w * 3]);
            }
        }
    }
    canvas
}
