//! Dataset ingestion: image/label pairs, the label palette, reflection
//! padding to pooling-compatible sizes, and LCN preparation.
//!
//! On-disk formats are deliberately plain: P6 for images, P5 with raw class
//! indices for label maps, a tab-separated manifest pairing them, and a JSON
//! palette. The void sentinel 255 marks unlabeled pixels; it is excluded
//! from loss and metrics and renders black.

use crate::error::{Result, SegError};
use crate::lcn::{lcn, LcnConfig};
use crate::pnm;
use crate::tensor::Tensor4;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const VOID_LABEL: u8 = 255;

/// Per-pixel class indices with the void sentinel 255.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<LabelMap> {
        if data.len() != height * width {
            return Err(SegError::Data(format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> LabelMap {
        LabelMap {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// First (y, x, value) whose value is neither a valid class nor void.
    pub fn find_invalid(&self, classes: usize) -> Option<(usize, usize, u8)> {
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.at(y, x);
                if v != VOID_LABEL && v as usize >= classes {
                    return Some((y, x, v));
                }
            }
        }
        None
    }

    pub fn crop(&self, height: usize, width: usize) -> LabelMap {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            data.extend_from_slice(&self.data[y * self.width..y * self.width + width]);
        }
        LabelMap {
            height,
            width,
            data,
        }
    }
}

/// One dataset entry: an image tensor in `[0, 1]`, its labels, the id it is
/// reported under, and the pre-padding size for cropping predictions back.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    /// Dims `(1, channels, H, W)`, padded to the network's multiple.
    pub image: Tensor4,
    pub labels: LabelMap,
    pub original_height: usize,
    pub original_width: usize,
}

/// A sample after preprocessing: the LCN output the network actually sees.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub input: Tensor4,
    pub labels: LabelMap,
}

/// Applies LCN to every sample; parallel over samples, order preserved.
pub fn prepare(samples: &[Sample], cfg: &LcnConfig) -> Result<Vec<PreparedSample>> {
    samples
        .par_iter()
        .map(|s| {
            Ok(PreparedSample {
                id: s.id.clone(),
                input: lcn(&s.image, cfg)?,
                labels: s.labels.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PaletteEntry {
    pub name: String,
    pub rgb: [u8; 3],
}

/// Class index to color and name. Injective over defined classes; the void
/// label always renders black.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    entries: BTreeMap<u8, PaletteEntry>,
}

impl Palette {
    pub fn new(entries: BTreeMap<u8, PaletteEntry>) -> Result<Palette> {
        let mut seen = std::collections::HashSet::new();
        for (idx, entry) in &entries {
            if *idx == VOID_LABEL {
                return Err(SegError::Config(
                    "label 255 is the void sentinel and cannot be in the palette".into(),
                ));
            }
            if !seen.insert(entry.rgb) {
                return Err(SegError::Config(format!(
                    "palette color {:?} assigned to more than one class (class {idx})",
                    entry.rgb
                )));
            }
        }
        Ok(Palette { entries })
    }

    /// Evenly spaced fallback colors for `classes` classes.
    pub fn generate(classes: usize) -> Palette {
        let mut entries = BTreeMap::new();
        for c in 0..classes.min(254) {
            let hue = c as f64 / classes.max(1) as f64;
            entries.insert(
                c as u8,
                PaletteEntry {
                    name: format!("class{c}"),
                    rgb: hue_to_rgb(hue, if c == 0 { 0.25 } else { 0.85 }),
                },
            );
        }
        Palette { entries }
    }

    pub fn color_of(&self, label: u8) -> [u8; 3] {
        self.entries.get(&label).map(|e| e.rgb).unwrap_or([0, 0, 0])
    }

    pub fn name_of(&self, label: u8) -> Option<&str> {
        self.entries.get(&label).map(|e| e.name.as_str())
    }

    pub fn classes(&self) -> usize {
        self.entries.len()
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<String, &PaletteEntry> = self
            .entries
            .iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        serde_json::to_string_pretty(&map).expect("palette serializes")
    }

    pub fn from_json(text: &str) -> Result<Palette> {
        let map: BTreeMap<String, PaletteEntry> = serde_json::from_str(text)
            .map_err(|e| SegError::Parse {
                offset: e.column(),
                message: format!("palette json: {e}"),
            })?;
        let mut entries = BTreeMap::new();
        for (k, v) in map {
            let idx: u8 = k
                .parse()
                .map_err(|_| SegError::Config(format!("palette key {k:?} is not a class index")))?;
            entries.insert(idx, v);
        }
        Palette::new(entries)
    }

    pub fn load(path: &Path) -> Result<Palette> {
        Palette::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

fn hue_to_rgb(hue: f64, value: f64) -> [u8; 3] {
    let h = (hue * 6.0) % 6.0;
    let f = h - h.floor();
    let (r, g, b) = match h as usize {
        0 => (1.0, f, 0.0),
        1 => (1.0 - f, 1.0, 0.0),
        2 => (0.0, 1.0, f),
        3 => (0.0, 1.0 - f, 1.0),
        4 => (f, 0.0, 1.0),
        _ => (1.0, 0.0, 1.0 - f),
    };
    [
        (r * value * 255.0).round() as u8,
        (g * value * 255.0).round() as u8,
        (b * value * 255.0).round() as u8,
    ]
}

/// Renders a label map through the palette; void pixels come out black.
pub fn render_labels(labels: &LabelMap, palette: &Palette) -> Vec<u8> {
    let mut rgb = Vec::with_capacity(labels.data.len() * 3);
    for &v in &labels.data {
        rgb.extend_from_slice(&palette.color_of(v));
    }
    rgb
}

pub fn write_label_render(labels: &LabelMap, palette: &Palette, path: &Path) -> Result<()> {
    pnm::write_ppm(path, labels.width, labels.height, &render_labels(labels, palette))
}

/// Raw class indices as a P5 file; lossless for label maps.
pub fn write_label_map(labels: &LabelMap, path: &Path) -> Result<()> {
    pnm::write_pgm(path, labels.width, labels.height, &labels.data)
}

pub fn read_label_map(path: &Path) -> Result<LabelMap> {
    let img = pnm::read_pnm(path)?;
    if img.channels != 1 {
        return Err(SegError::Data(format!(
            "{}: label maps must be single-channel P5",
            path.display()
        )));
    }
    LabelMap::new(img.height, img.width, img.data)
}

/// Converts a decoded PNM image to a `[0, 1]` tensor of dims `(1, C, H, W)`.
pub fn image_to_tensor(img: &pnm::PnmImage) -> Tensor4 {
    let (h, w, c) = (img.height, img.width, img.channels);
    let mut t = Tensor4::zeros([1, c, h, w]);
    for ch in 0..c {
        for (i, v) in t.plane_mut(0, ch).iter_mut().enumerate() {
            *v = img.data[i * c + ch] as f64 / 255.0;
        }
    }
    t
}

/// Quantizes a `[0, 1]` tensor of dims `(1, C, H, W)` back to interleaved bytes.
pub fn tensor_to_bytes(t: &Tensor4) -> Vec<u8> {
    let [_, c, h, w] = t.dims();
    let mut out = vec![0u8; h * w * c];
    for ch in 0..c {
        for (i, &v) in t.plane(0, ch).iter().enumerate() {
            out[i * c + ch] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    out
}

/// Pads spatial dims up to the next multiple of `multiple` by reflecting
/// rows and columns at the bottom and right edges. Original pixels are
/// untouched.
pub fn pad_image_reflect(image: &Tensor4, multiple: usize) -> Result<Tensor4> {
    let [n, c, h, w] = image.dims();
    let (nh, nw) = (round_up(h, multiple), round_up(w, multiple));
    if nh == h && nw == w {
        return Ok(image.clone());
    }
    if nh - h >= h || nw - w >= w {
        return Err(SegError::Data(format!(
            "image {h}x{w} too small to reflect-pad to a multiple of {multiple}"
        )));
    }
    let mut out = Tensor4::zeros([n, c, nh, nw]);
    for b in 0..n {
        for ch in 0..c {
            let src = image.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for y in 0..nh {
                let sy = reflect_index(y, h);
                for x in 0..nw {
                    dst[y * nw + x] = src[sy * w + reflect_index(x, w)];
                }
            }
        }
    }
    Ok(out)
}

/// Pads a label map to the same multiple, filling new pixels with void.
pub fn pad_labels_void(labels: &LabelMap, multiple: usize) -> LabelMap {
    let (nh, nw) = (
        round_up(labels.height, multiple),
        round_up(labels.width, multiple),
    );
    if nh == labels.height && nw == labels.width {
        return labels.clone();
    }
    let mut out = LabelMap::filled(nh, nw, VOID_LABEL);
    for y in 0..labels.height {
        out.data[y * nw..y * nw + labels.width]
            .copy_from_slice(&labels.data[y * labels.width..(y + 1) * labels.width]);
    }
    out
}

fn round_up(v: usize, multiple: usize) -> usize {
    v.div_ceil(multiple) * multiple
}

/// Mirror reflection without repeating the edge sample: 0 1 2 | 1 0.
fn reflect_index(i: usize, len: usize) -> usize {
    if i < len {
        i
    } else {
        2 * len - 2 - i
    }
}

/// Crops a prediction tensor back to pre-padding size.
pub fn crop_tensor(t: &Tensor4, height: usize, width: usize) -> Tensor4 {
    let [n, c, _h, w] = t.dims();
    let mut out = Tensor4::zeros([n, c, height, width]);
    for b in 0..n {
        for ch in 0..c {
            let src = t.plane(b, ch);
            let dst = out.plane_mut(b, ch);
            for y in 0..height {
                dst[y * width..(y + 1) * width].copy_from_slice(&src[y * w..y * w + width]);
            }
        }
    }
    out
}

/// One manifest line: image path, tab, label path. Relative paths resolve
/// against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (img, lbl) = line.split_once('\t').ok_or_else(|| {
            SegError::Data(format!(
                "{}:{}: expected image<TAB>label, got {line:?}",
                path.display(),
                lineno + 1
            ))
        })?;
        pairs.push((base.join(img), base.join(lbl)));
    }
    Ok(pairs)
}

/// Loads and validates every manifest entry, padding images by reflection
/// and labels with void to a multiple of `multiple`. Per-file failures are
/// collected and reported together.
pub fn load_dataset(manifest: &Path, classes: usize, multiple: usize) -> Result<Vec<Sample>> {
    let pairs = load_manifest(manifest)?;
    let mut samples = Vec::with_capacity(pairs.len());
    let mut problems = Vec::new();
    for (img_path, lbl_path) in &pairs {
        match load_sample(img_path, lbl_path, classes, multiple) {
            Ok(s) => samples.push(s),
            Err(e) => problems.push(format!("{}: {e}", img_path.display())),
        }
    }
    if !problems.is_empty() {
        return Err(SegError::Data(format!(
            "{} of {} dataset entries failed:\n  {}",
            problems.len(),
            pairs.len(),
            problems.join("\n  ")
        )));
    }
    Ok(samples)
}

fn load_sample(img_path: &Path, lbl_path: &Path, classes: usize, multiple: usize) -> Result<Sample> {
    let img = pnm::read_pnm(img_path)?;
    let labels = read_label_map(lbl_path)?;
    if img.height != labels.height || img.width != labels.width {
        return Err(SegError::Data(format!(
            "image is {}x{} but labels are {}x{}",
            img.height, img.width, labels.height, labels.width
        )));
    }
    if let Some((y, x, v)) = labels.find_invalid(classes) {
        return Err(SegError::Data(format!(
            "{}: label {v} at pixel ({y},{x}) exceeds class count {classes}",
            lbl_path.display()
        )));
    }
    let id = img_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| img_path.display().to_string());
    let tensor = image_to_tensor(&img);
    Ok(Sample {
        id,
        image: pad_image_reflect(&tensor, multiple)?,
        labels: pad_labels_void(&labels, multiple),
        original_height: img.height,
        original_width: img.width,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_map_roundtrip_through_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.pgm");
        let labels = LabelMap::new(2, 3, vec![0, 1, 2, VOID_LABEL, 1, 0]).unwrap();
        write_label_map(&labels, &path).unwrap();
        assert_eq!(read_label_map(&path).unwrap(), labels);
    }

    #[test]
    fn padding_preserves_originals_and_fills_void() {
        // 360x480 at multiple 16 pads to 368x480.
        let mut img = Tensor4::zeros([1, 1, 6, 8]);
        for (i, v) in img.plane_mut(0, 0).iter_mut().enumerate() {
            *v = i as f64;
        }
        let padded = pad_image_reflect(&img, 4).unwrap();
        assert_eq!(padded.dims(), [1, 1, 8, 8]);
        for y in 0..6 {
            for x in 0..8 {
                assert_eq!(padded.at(0, 0, y, x), img.at(0, 0, y, x));
            }
        }
        // Reflection: row 6 mirrors row 4, row 7 mirrors row 3.
        for x in 0..8 {
            assert_eq!(padded.at(0, 0, 6, x), img.at(0, 0, 4, x));
            assert_eq!(padded.at(0, 0, 7, x), img.at(0, 0, 3, x));
        }

        let labels = LabelMap::filled(6, 8, 2);
        let padded_labels = pad_labels_void(&labels, 4);
        assert_eq!(padded_labels.height, 8);
        for y in 0..8 {
            for x in 0..8 {
                let expect = if y < 6 { 2 } else { VOID_LABEL };
                assert_eq!(padded_labels.at(y, x), expect);
            }
        }

        // Cropping recovers the original exactly.
        let cropped = crop_tensor(&padded, 6, 8);
        assert_eq!(cropped, img);
        assert_eq!(padded_labels.crop(6, 8), labels);
    }

    #[test]
    fn video_frame_sized_padding() {
        let img = Tensor4::zeros([1, 3, 360, 480]);
        let padded = pad_image_reflect(&img, 16).unwrap();
        assert_eq!(padded.dims(), [1, 3, 368, 480]);
    }

    #[test]
    fn manifest_parsing_and_dataset_validation() {
        let dir = tempfile::tempdir().unwrap();
        let img = pnm::encode_ppm(2, 2, &[10u8; 12]).unwrap();
        std::fs::write(dir.path().join("a.ppm"), &img).unwrap();
        write_label_map(
            &LabelMap::new(2, 2, vec![0, 1, VOID_LABEL, 1]).unwrap(),
            &dir.path().join("a.pgm"),
        )
        .unwrap();
        let manifest = dir.path().join("list.manifest");
        std::fs::write(&manifest, "# comment\na.ppm\ta.pgm\n").unwrap();

        let samples = load_dataset(&manifest, 2, 2).unwrap();
        assert_eq!(samples.len(), 1);
        assert_eq!(samples[0].id, "a");
        assert_eq!(samples[0].image.dims(), [1, 3, 2, 2]);

        // Empty manifest loads an empty dataset.
        let empty = dir.path().join("empty.manifest");
        std::fs::write(&empty, "# nothing\n").unwrap();
        assert!(load_dataset(&empty, 2, 2).unwrap().is_empty());

        // Label 12 with 11 classes is rejected with the pixel named.
        write_label_map(
            &LabelMap::new(2, 2, vec![0, 12, 0, 0]).unwrap(),
            &dir.path().join("bad.pgm"),
        )
        .unwrap();
        std::fs::write(dir.path().join("b.ppm"), &img).unwrap();
        let manifest2 = dir.path().join("bad.manifest");
        std::fs::write(&manifest2, "b.ppm\tbad.pgm\n").unwrap();
        let err = load_dataset(&manifest2, 11, 2).unwrap_err().to_string();
        assert!(err.contains("label 12") && err.contains("(0,1)"), "{err}");
    }

    #[test]
    fn palette_roundtrip_and_injectivity() {
        let palette = Palette::generate(4);
        let json = palette.to_json();
        assert_eq!(Palette::from_json(&json).unwrap(), palette);

        let mut entries = BTreeMap::new();
        entries.insert(
            0,
            PaletteEntry {
                name: "a".into(),
                rgb: [1, 2, 3],
            },
        );
        entries.insert(
            1,
            PaletteEntry {
                name: "b".into(),
                rgb: [1, 2, 3],
            },
        );
        assert!(Palette::new(entries).is_err());
    }

    #[test]
    fn void_renders_black() {
        let labels = LabelMap::new(1, 2, vec![VOID_LABEL, VOID_LABEL]).unwrap();
        let rgb = render_labels(&labels, &Palette::generate(3));
        assert_eq!(rgb, vec![0, 0, 0, 0, 0, 0]);
    }
}
