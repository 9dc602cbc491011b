//! Local contrast normalization.
//!
//! Each modality group (e.g. RGB as one group, depth as another) is
//! normalized on its own: subtract the Gaussian-weighted local mean computed
//! jointly over the group's channels, then divide by the floored local
//! standard deviation. Truncated border windows are renormalized so a
//! constant image maps to exactly zero everywhere, borders included.

use crate::error::{Result, SegError};
use crate::tensor::Tensor4;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LcnConfig {
    /// Window radius; the window spans `2*radius + 1` pixels per axis.
    pub radius: usize,
    pub sigma: f64,
    /// Floor for the divisive step: divide by `max(epsilon, local std)`.
    pub epsilon: f64,
    /// Channel-index groups normalized independently. Every input channel
    /// must appear in exactly one group.
    pub groups: Vec<Vec<usize>>,
}

impl Default for LcnConfig {
    fn default() -> Self {
        LcnConfig {
            radius: 4,
            sigma: 2.0,
            epsilon: 1e-4,
            groups: vec![vec![0, 1, 2]],
        }
    }
}

impl LcnConfig {
    /// Single-group config covering `channels` consecutive channels.
    pub fn single_group(channels: usize) -> LcnConfig {
        LcnConfig {
            groups: vec![(0..channels).collect()],
            ..LcnConfig::default()
        }
    }

    /// RGB channels as one modality and depth as another.
    pub fn rgbd() -> LcnConfig {
        LcnConfig {
            groups: vec![vec![0, 1, 2], vec![3]],
            ..LcnConfig::default()
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.sigma <= 0.0 || self.epsilon <= 0.0 {
            return Err(SegError::Config(
                "lcn sigma and epsilon must be positive".into(),
            ));
        }
        let mut seen = vec![false; channels];
        for group in &self.groups {
            for &ch in group {
                if ch >= channels {
                    return Err(SegError::Config(format!(
                        "lcn group references channel {ch} but the input has {channels}"
                    )));
                }
                if seen[ch] {
                    return Err(SegError::Config(format!(
                        "lcn channel {ch} appears in more than one group"
                    )));
                }
                seen[ch] = true;
            }
        }
        if let Some(ch) = seen.iter().position(|covered| !covered) {
            return Err(SegError::Config(format!(
                "lcn groups do not cover channel {ch}"
            )));
        }
        Ok(())
    }

    fn window(&self) -> Vec<f64> {
        let r = self.radius as isize;
        let mut weights: Vec<f64> = (-r..=r)
            .map(|t| (-((t * t) as f64) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        weights
    }
}

/// Applies local contrast normalization to every batch item.
pub fn lcn(x: &Tensor4, cfg: &LcnConfig) -> Result<Tensor4> {
    cfg.validate(x.channels())?;
    let n = x.batch();
    let window = cfg.window();
    let mut out = Tensor4::zeros(x.dims());
    for b in 0..n {
        for group in &cfg.groups {
            normalize_group(x, &mut out, b, group, &window, cfg);
        }
    }
    Ok(out)
}

fn normalize_group(
    x: &Tensor4,
    out: &mut Tensor4,
    b: usize,
    group: &[usize],
    window: &[f64],
    cfg: &LcnConfig,
) {
    let (h, w) = (x.height(), x.width());
    let inv = 1.0 / group.len() as f64;

    // Joint local mean: blur of the channel-averaged image.
    let mut chan_mean = vec![0.0; h * w];
    for &ch in group {
        for (m, v) in chan_mean.iter_mut().zip(x.plane(b, ch)) {
            *m += v * inv;
        }
    }
    let local_mean = blur2d(&chan_mean, h, w, window);

    // Centered values per channel, plus the channel-averaged square.
    let mut centered: Vec<Vec<f64>> = Vec::with_capacity(group.len());
    let mut sq_mean = vec![0.0; h * w];
    for &ch in group {
        let plane = x.plane(b, ch);
        let mut v = vec![0.0; h * w];
        for i in 0..h * w {
            v[i] = plane[i] - local_mean[i];
            sq_mean[i] += v[i] * v[i] * inv;
        }
        centered.push(v);
    }
    let local_var = blur2d(&sq_mean, h, w, window);

    for (g, &ch) in group.iter().enumerate() {
        let out_plane = out.plane_mut(b, ch);
        for i in 0..h * w {
            let std = local_var[i].max(0.0).sqrt();
            out_plane[i] = centered[g][i] / std.max(cfg.epsilon);
        }
    }
}

/// Separable Gaussian blur with truncated-window renormalization. Because
/// truncation regions are rectangles, renormalizing each 1-D pass equals
/// renormalizing the full 2-D window.
fn blur2d(values: &[f64], h: usize, w: usize, window: &[f64]) -> Vec<f64> {
    let mut rows = vec![0.0; h * w];
    for y in 0..h {
        blur1d(&values[y * w..(y + 1) * w], &mut rows[y * w..(y + 1) * w], window);
    }
    let mut out = vec![0.0; h * w];
    let mut col = vec![0.0; h];
    let mut blurred = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = rows[y * w + x];
        }
        blur1d(&col, &mut blurred, window);
        for y in 0..h {
            out[y * w + x] = blurred[y];
        }
    }
    out
}

fn blur1d(src: &[f64], dst: &mut [f64], window: &[f64]) {
    let n = src.len() as isize;
    let r = (window.len() / 2) as isize;
    for (i, d) in dst.iter_mut().enumerate() {
        let i = i as isize;
        let t0 = (-r).max(-i);
        let t1 = r.min(n - 1 - i);
        let mut acc = 0.0;
        let mut weight = 0.0;
        for t in t0..=t1 {
            let wgt = window[(t + r) as usize];
            acc += wgt * src[(i + t) as usize];
            weight += wgt;
        }
        *d = acc / weight;
    }
}
