//! Synthetic shapes dataset: anti-aliased rectangles, disks, and thin poles
//! over an illumination-gradient background with Gaussian noise, plus exact
//! ground-truth label masks derived from the same geometry.
//!
//! Class layout: 0 background, 1 rectangle, 2 disk, 3 pole. Poles are one
//! or two pixels wide, so their pixel frequency stays far below the
//! background's and inverse-frequency weighting has something to correct.

use crate::data::{LabelMap, Palette, PaletteEntry, Sample};
use crate::error::{Result, SegError};
use crate::tensor::Tensor4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Square image side length.
    pub size: usize,
    /// 2..=4: background plus up to rectangle, disk, pole.
    pub classes: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub shapes_min: usize,
    pub shapes_max: usize,
    pub noise_sigma: f64,
    /// Peak-to-center amplitude of the multiplicative illumination ramp.
    pub illumination: f64,
    /// Per-channel illumination gains; a color cast shared by every image.
    pub channel_gain: [f64; 3],
    /// 1.0 keeps the pole class at its own color; smaller values pull it
    /// toward the background color, making poles harder to separate.
    pub pole_contrast: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 64,
            classes: 4,
            train_count: 80,
            test_count: 20,
            shapes_min: 3,
            shapes_max: 6,
            noise_sigma: 0.02,
            illumination: 0.25,
            channel_gain: [1.0, 1.0, 1.0],
            pole_contrast: 1.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(SegError::Config("synth size must be at least 8".into()));
        }
        if !(2..=4).contains(&self.classes) {
            return Err(SegError::Config(format!(
                "synth classes must be 2..=4, got {}",
                self.classes
            )));
        }
        if self.shapes_min > self.shapes_max || self.shapes_max == 0 {
            return Err(SegError::Config(format!(
                "bad shape count range {}..={}",
                self.shapes_min, self.shapes_max
            )));
        }
        if self.noise_sigma < 0.0 || self.illumination < 0.0 {
            return Err(SegError::Config(
                "noise sigma and illumination must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn palette(&self) -> Palette {
        let names = ["background", "rectangle", "disk", "pole"];
        let colors: [[u8; 3]; 4] = [[96, 96, 96], [200, 70, 60], [70, 100, 210], [230, 210, 70]];
        let mut entries = BTreeMap::new();
        for c in 0..self.classes {
            entries.insert(
                c as u8,
                PaletteEntry {
                    name: names[c].into(),
                    rgb: colors[c],
                },
            );
        }
        Palette::new(entries).expect("synth palette colors are distinct")
    }
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub palette: Palette,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Disk { cx: f64, cy: f64, r: f64 },
    /// Axis-aligned thin bar.
    Pole {
        vertical: bool,
        pos: f64,
        thickness: f64,
        lo: f64,
        hi: f64,
    },
}

impl Shape {
    fn class(&self) -> u8 {
        match self {
            Shape::Rect { .. } => 1,
            Shape::Disk { .. } => 2,
            Shape::Pole { .. } => 3,
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Shape::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Pole {
                vertical,
                pos,
                thickness,
                lo,
                hi,
            } => {
                let (across, along) = if vertical { (x, y) } else { (y, x) };
                across >= pos && across < pos + thickness && along >= lo && along < hi
            }
        }
    }

    /// Fraction of the pixel covered, estimated on a 4x4 subgrid.
    fn coverage(&self, px: usize, py: usize) -> f64 {
        let mut hits = 0;
        for sy in 0..4 {
            for sx in 0..4 {
                let x = px as f64 + (sx as f64 + 0.5) / 4.0;
                let y = py as f64 + (sy as f64 + 0.5) / 4.0;
                if self.contains(x, y) {
                    hits += 1;
                }
            }
        }
        hits as f64 / 16.0
    }
}

const BASE_COLORS: [[f64; 3]; 4] = [
    [0.38, 0.38, 0.38], // background
    [0.78, 0.27, 0.24], // rectangle
    [0.27, 0.39, 0.82], // disk
    [0.90, 0.82, 0.27], // pole
];

/// Generates the train and test splits. Bit-identical for a fixed config.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let total = cfg.train_count + cfg.test_count;
    let mut samples = Vec::with_capacity(total);
    for i in 0..total {
        // Independent per-image streams keep content stable under count changes.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64));
        let split = if i < cfg.train_count { "train" } else { "test" };
        let index = if i < cfg.train_count { i } else { i - cfg.train_count };
        samples.push(generate_image(cfg, &mut rng, format!("{split}_{index:03}")));
    }
    let test = samples.split_off(cfg.train_count);
    Ok(SynthDataset {
        train: samples,
        test,
        palette: cfg.palette(),
    })
}

fn generate_image(cfg: &SynthConfig, rng: &mut ChaCha8Rng, id: String) -> Sample {
    let n = cfg.size;
    let shapes = sample_shapes(cfg, rng);

    // Exact labels from geometry: topmost shape containing the pixel center.
    let mut labels = LabelMap::filled(n, n, 0);
    for y in 0..n {
        for x in 0..n {
            let (cx, cy) = (x as f64 + 0.5, y as f64 + 0.5);
            for shape in shapes.iter().rev() {
                if shape.contains(cx, cy) {
                    labels.data[y * n + x] = shape.class();
                    break;
                }
            }
        }
    }

    // Anti-aliased rendering in draw order over the background.
    let gx: f64 = rng.random_range(-1.0..1.0);
    let gy: f64 = rng.random_range(-1.0..1.0);
    let mut image = Tensor4::zeros([1, 3, n, n]);
    let mut pixel = [0.0f64; 3];
    for y in 0..n {
        for x in 0..n {
            pixel.copy_from_slice(&BASE_COLORS[0]);
            for shape in &shapes {
                let alpha = shape.coverage(x, y);
                if alpha == 0.0 {
                    continue;
                }
                let color = shape_color(cfg, shape.class());
                for (p, c) in pixel.iter_mut().zip(&color) {
                    *p = *p * (1.0 - alpha) + c * alpha;
                }
            }
            let ramp = 1.0
                + cfg.illumination
                    * (gx * (x as f64 / n as f64 - 0.5) + gy * (y as f64 / n as f64 - 0.5));
            for (c, (&p, &gain)) in pixel.iter().zip(&cfg.channel_gain).enumerate() {
                let noise: f64 = if cfg.noise_sigma > 0.0 {
                    let z: f64 = StandardNormal.sample(rng);
                    z * cfg.noise_sigma
                } else {
                    0.0
                };
                *image.at_mut(0, c, y, x) = (p * ramp * gain + noise).clamp(0.0, 1.0);
            }
        }
    }

    Sample {
        id,
        image,
        labels,
        original_height: n,
        original_width: n,
    }
}

fn shape_color(cfg: &SynthConfig, class: u8) -> [f64; 3] {
    let base = BASE_COLORS[class as usize];
    if class == 3 {
        let bg = BASE_COLORS[0];
        let t = cfg.pole_contrast;
        [
            bg[0] + (base[0] - bg[0]) * t,
            bg[1] + (base[1] - bg[1]) * t,
            bg[2] + (base[2] - bg[2]) * t,
        ]
    } else {
        base
    }
}

fn sample_shapes(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<Shape> {
    let n = cfg.size as f64;
    let count = rng.random_range(cfg.shapes_min..=cfg.shapes_max);
    let mut shapes = Vec::with_capacity(count);
    for s in 0..count {
        // Cycle the available kinds so every class appears regularly.
        let kind = (s % (cfg.classes - 1)) as u8 + 1;
        shapes.push(match kind {
            1 => {
                let w = rng.random_range(n * 0.15..n * 0.4);
                let h = rng.random_range(n * 0.15..n * 0.4);
                let x0 = rng.random_range(0.0..n - w);
                let y0 = rng.random_range(0.0..n - h);
                Shape::Rect {
                    x0,
                    y0,
                    x1: x0 + w,
                    y1: y0 + h,
                }
            }
            2 => Shape::Disk {
                cx: rng.random_range(n * 0.15..n * 0.85),
                cy: rng.random_range(n * 0.15..n * 0.85),
                r: rng.random_range(n * 0.08..n * 0.2),
            },
            _ => {
                let vertical = rng.random_bool(0.5);
                let span = rng.random_range(n * 0.4..n * 0.95);
                let lo = rng.random_range(0.0..n - span);
                Shape::Pole {
                    vertical,
                    pos: rng.random_range(1.0..n - 3.0),
                    thickness: rng.random_range(1.0..2.0),
                    lo,
                    hi: lo + span,
                }
            }
        });
    }
    shapes
}
