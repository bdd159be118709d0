//! Dataset manifests, image decoding, and model-input preprocessing.
//!
//! A manifest is a CSV file with header `path,label`, one row per image.
//! The category list is the sorted set of distinct labels unless a JSON
//! sidecar (`<manifest>.categories.json`) pins an explicit order.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::Array3;

use crate::{Error, Result};

/// Side length of the network input.
pub const INPUT_SIZE: usize = 224;

/// Per-channel means subtracted during preprocessing, in B, G, R order.
pub const CHANNEL_MEANS_BGR: [f32; 3] = [103.939, 116.779, 123.68];

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    /// Index into the manifest's category list.
    pub label: usize,
}

/// An ordered list of categories plus the images belonging to them.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub categories: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Builds a manifest from labelled paths, validating the invariants:
    /// non-empty, unique paths, every label index valid, every category
    /// populated.
    pub fn new(
        name: impl Into<String>,
        categories: Vec<String>,
        entries: Vec<ManifestEntry>,
    ) -> Result<Self> {
        let manifest = DatasetManifest {
            name: name.into(),
            categories,
            entries,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Manifest("empty manifest".into()));
        }
        if self.categories.is_empty() {
            return Err(Error::Manifest("no categories".into()));
        }
        let mut seen = std::collections::HashSet::new();
        let mut counts = vec![0usize; self.categories.len()];
        for entry in &self.entries {
            if !seen.insert(entry.path.as_str()) {
                return Err(Error::Manifest(format!(
                    "duplicate image path {:?}",
                    entry.path
                )));
            }
            match counts.get_mut(entry.label) {
                Some(c) => *c += 1,
                None => {
                    return Err(Error::Manifest(format!(
                        "label index {} out of range for {:?}",
                        entry.label, entry.path
                    )))
                }
            }
        }
        if let Some(i) = counts.iter().position(|&c| c == 0) {
            return Err(Error::Manifest(format!(
                "category {:?} has no entries",
                self.categories[i]
            )));
        }
        Ok(())
    }

    pub fn label_name(&self, index: usize) -> &str {
        &self.categories[index]
    }

    /// Entry indices grouped per category, in manifest order.
    pub fn indices_by_category(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.categories.len()];
        for (i, entry) in self.entries.iter().enumerate() {
            groups[entry.label].push(i);
        }
        groups
    }
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut p = path.to_path_buf();
    p.set_extension("categories.json");
    p
}

/// Loads and validates a manifest CSV. If `<manifest>.categories.json`
/// exists it fixes the category order, otherwise categories are the sorted
/// distinct labels.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Manifest(format!("cannot open {}: {e}", path.display())))?;

    let headers = reader
        .headers()
        .map_err(|e| Error::Manifest(format!("bad header in {}: {e}", path.display())))?;
    if headers.len() < 2 || &headers[0] != "path" || &headers[1] != "label" {
        return Err(Error::Manifest(format!(
            "expected header `path,label`, got {:?}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }

    let mut rows: Vec<(String, String)> = Vec::new();
    for record in reader.records() {
        let record =
            record.map_err(|e| Error::Manifest(format!("malformed record: {e}")))?;
        if record.len() != 2 {
            return Err(Error::Manifest(format!(
                "malformed record (expected 2 fields, got {})",
                record.len()
            )));
        }
        rows.push((record[0].to_string(), record[1].to_string()));
    }

    let categories = match load_category_sidecar(&sidecar_path(path))? {
        Some(order) => order,
        None => {
            let mut cats: Vec<String> = rows.iter().map(|(_, l)| l.clone()).collect();
            cats.sort();
            cats.dedup();
            cats
        }
    };
    let index: HashMap<&str, usize> = categories
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();

    let mut entries = Vec::with_capacity(rows.len());
    for (p, label) in &rows {
        let label_idx = *index.get(label.as_str()).ok_or_else(|| {
            Error::Manifest(format!("label {label:?} not in category list"))
        })?;
        entries.push(ManifestEntry {
            path: p.clone(),
            label: label_idx,
        });
    }

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    DatasetManifest::new(name, categories, entries)
}

fn load_category_sidecar(path: &Path) -> Result<Option<Vec<String>>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cats: Vec<String> = serde_json::from_str(&text)
        .map_err(|e| Error::format(path, format!("bad category sidecar: {e}")))?;
    Ok(Some(cats))
}

/// Writes a manifest back to CSV (plus the category sidecar so order
/// survives the round trip).
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Manifest(format!("cannot write {}: {e}", path.display())))?;
    writer
        .write_record(["path", "label"])
        .map_err(|e| Error::Manifest(e.to_string()))?;
    for entry in &manifest.entries {
        writer
            .write_record([
                entry.path.as_str(),
                manifest.categories[entry.label].as_str(),
            ])
            .map_err(|e| Error::Manifest(e.to_string()))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    let sidecar = sidecar_path(path);
    let text = serde_json::to_string_pretty(&manifest.categories)
        .expect("category list serializes");
    std::fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))?;
    Ok(())
}

/// Decoded 8-bit pixel buffer, grayscale or RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Invalid(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::Invalid("zero-dimension image".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::Invalid(format!(
                "pixel buffer length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(RawImage {
            height,
            width,
            channels,
            data,
        })
    }
}

/// Decodes a PNG or JPEG file. Grayscale files keep a single channel;
/// anything with color (including alpha variants) is flattened to RGB.
pub fn load_image(path: &Path) -> Result<RawImage> {
    let decoded = image::open(path).map_err(|e| Error::ImageDecode {
        path: path.into(),
        reason: e.to_string(),
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    match decoded {
        image::DynamicImage::ImageLuma8(img) => RawImage::new(h, w, 1, img.into_raw()),
        image::DynamicImage::ImageLuma16(img) => {
            let data = img.into_raw().into_iter().map(|v| (v >> 8) as u8).collect();
            RawImage::new(h, w, 1, data)
        }
        other => {
            let rgb = other.into_rgb8();
            RawImage::new(h, w, 3, rgb.into_raw())
        }
    }
}

/// The 224x224x3 tensor handed to the network, in B,G,R channel order with
/// per-channel means already subtracted.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    /// Shape (224, 224, 3); axis order (row, column, channel).
    pub tensor: Array3<f32>,
    pub provenance: String,
}

/// Resizes to 224x224 with a bilinear filter, replicates grayscale to three
/// channels, reorders channels to B,G,R, and subtracts the fixed channel
/// means. No scaling to [0,1].
pub fn preprocess(image: &RawImage, provenance: impl Into<String>) -> ModelInput {
    // Work on f32 planes so resizing never quantizes back through u8.
    let resized = resize_bilinear(image, INPUT_SIZE, INPUT_SIZE);
    let mut tensor = Array3::<f32>::zeros((INPUT_SIZE, INPUT_SIZE, 3));
    for y in 0..INPUT_SIZE {
        for x in 0..INPUT_SIZE {
            // resized is RGB (or replicated gray); output is BGR.
            let base = (y * INPUT_SIZE + x) * 3;
            let (r, g, b) = (resized[base], resized[base + 1], resized[base + 2]);
            tensor[[y, x, 0]] = b - CHANNEL_MEANS_BGR[0];
            tensor[[y, x, 1]] = g - CHANNEL_MEANS_BGR[1];
            tensor[[y, x, 2]] = r - CHANNEL_MEANS_BGR[2];
        }
    }
    ModelInput {
        tensor,
        provenance: provenance.into(),
    }
}

/// Bilinear resize to `out_h` x `out_w`, returning interleaved RGB f32
/// (grayscale input is replicated across the three output channels).
/// Sample positions follow the usual half-pixel-center convention.
fn resize_bilinear(image: &RawImage, out_h: usize, out_w: usize) -> Vec<f32> {
    let (h, w, c) = (image.height, image.width, image.channels);
    let scale_y = h as f32 / out_h as f32;
    let scale_x = w as f32 / out_w as f32;
    let mut out = vec![0f32; out_h * out_w * 3];

    let sample = |y: usize, x: usize, ch: usize| -> f32 {
        let ch = if c == 1 { 0 } else { ch };
        image.data[(y * w + x) * c + ch] as f32
    };

    for oy in 0..out_h {
        let sy = ((oy as f32 + 0.5) * scale_y - 0.5).max(0.0);
        let y0 = (sy as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f32;
        for ox in 0..out_w {
            let sx = ((ox as f32 + 0.5) * scale_x - 0.5).max(0.0);
            let x0 = (sx as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f32;
            for ch in 0..3 {
                let top = sample(y0, x0, ch) * (1.0 - fx) + sample(y0, x1, ch) * fx;
                let bottom = sample(y1, x0, ch) * (1.0 - fx) + sample(y1, x1, ch) * fx;
                out[(oy * out_w + ox) * 3 + ch] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_manifest(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("data.csv");
        std::fs::write(&path, body).unwrap();
        path
    }

    #[test]
    fn manifest_four_categories() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(
            dir.path(),
            "path,label\na.png,Covid\nb.png,Normal\nc.png,PneumoniaB\nd.png,PneumoniaV\n",
        );
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.categories, ["Covid", "Normal", "PneumoniaB", "PneumoniaV"]);
        assert_eq!(m.entries.len(), 4);
    }

    #[test]
    fn manifest_empty_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), "path,label\n");
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("empty manifest"), "{err}");
    }

    #[test]
    fn manifest_duplicate_path_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), "path,label\na.png,X\na.png,Y\n");
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn manifest_sidecar_fixes_category_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), "path,label\na.png,B\nb.png,A\n");
        std::fs::write(dir.path().join("data.categories.json"), r#"["B","A"]"#).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.categories, ["B", "A"]);
        assert_eq!(m.entries[0].label, 0);
        assert_eq!(m.entries[1].label, 1);
    }

    #[test]
    fn manifest_unknown_label_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), "path,label\na.png,A\nb.png,C\n");
        std::fs::write(dir.path().join("data.categories.json"), r#"["A","B"]"#).unwrap();
        let err = load_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("not in category list"), "{err}");
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest::new(
            "out",
            vec!["Z".into(), "A".into()],
            vec![
                ManifestEntry { path: "x.png".into(), label: 1 },
                ManifestEntry { path: "y.png".into(), label: 0 },
            ],
        )
        .unwrap();
        let path = dir.path().join("out.csv");
        save_manifest(&m, &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.categories, m.categories);
        assert_eq!(loaded.entries, m.entries);
    }

    #[test]
    fn load_png_grayscale_and_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let gray_path = dir.path().join("gray.png");
        image::GrayImage::from_pixel(16, 24, image::Luma([128]))
            .save(&gray_path)
            .unwrap();
        let gray = load_image(&gray_path).unwrap();
        assert_eq!((gray.height, gray.width, gray.channels), (16, 24, 1));

        let rgb_path = dir.path().join("rgb.jpg");
        image::RgbImage::from_pixel(8, 8, image::Rgb([10, 20, 30]))
            .save(&rgb_path)
            .unwrap();
        let rgb = load_image(&rgb_path).unwrap();
        assert_eq!((rgb.height, rgb.width, rgb.channels), (8, 8, 3));
    }

    #[test]
    fn load_truncated_file_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"\x89PNG\r\n\x1a\nnot really a png").unwrap();
        assert!(load_image(&path).is_err());
    }

    #[test]
    fn preprocess_zero_image_gives_negated_means() {
        let img = RawImage::new(224, 224, 3, vec![0u8; 224 * 224 * 3]).unwrap();
        let input = preprocess(&img, "zero");
        assert_eq!(input.tensor.dim(), (224, 224, 3));
        for y in [0, 100, 223] {
            assert_eq!(input.tensor[[y, y, 0]], -103.939);
            assert_eq!(input.tensor[[y, y, 1]], -116.779);
            assert_eq!(input.tensor[[y, y, 2]], -123.68);
        }
    }

    #[test]
    fn preprocess_replicates_grayscale() {
        let img = RawImage::new(50, 50, 1, vec![128u8; 50 * 50]).unwrap();
        let input = preprocess(&img, "gray");
        assert_eq!(input.tensor.dim(), (224, 224, 3));
        for ch in 0..3 {
            let expect = 128.0 - CHANNEL_MEANS_BGR[ch];
            assert!((input.tensor[[7, 99, ch]] - expect).abs() < 1e-4);
        }
    }

    #[test]
    fn preprocess_resizes_any_input() {
        let img = RawImage::new(448, 448, 3, vec![7u8; 448 * 448 * 3]).unwrap();
        let input = preprocess(&img, "big");
        assert_eq!(input.tensor.dim(), (224, 224, 3));
        assert!(input.tensor.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn preprocess_is_deterministic() {
        let data: Vec<u8> = (0..96 * 64 * 3).map(|i| (i % 251) as u8).collect();
        let img = RawImage::new(96, 64, 3, data).unwrap();
        let a = preprocess(&img, "p");
        let b = preprocess(&img, "p");
        assert_eq!(a, b);
    }
}
