//! Pooling-layer feature extraction from a VGG16 network stored as an ONNX
//! file, plus the on-disk feature-map cache that lets codebook training and
//! ablations run without re-running inference.

mod exec;
mod onnx;

use std::collections::HashMap;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use ndarray::Array3;
use sha2::{Digest, Sha256};

use crate::imageio::ModelInput;
use crate::{Error, Result};

pub use exec::GraphExecutor;

/// One of the five max-pooling layers of VGG16, named `p_1` through `p_5`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PoolingLayerId(u8);

impl PoolingLayerId {
    pub const ALL: [PoolingLayerId; 5] = [
        PoolingLayerId(1),
        PoolingLayerId(2),
        PoolingLayerId(3),
        PoolingLayerId(4),
        PoolingLayerId(5),
    ];

    pub const P4: PoolingLayerId = PoolingLayerId(4);

    pub fn new(index: u8) -> Result<Self> {
        if (1..=5).contains(&index) {
            Ok(PoolingLayerId(index))
        } else {
            Err(Error::Invalid(format!(
                "pooling layer index must be in 1..=5, got {index}"
            )))
        }
    }

    pub fn index(&self) -> u8 {
        self.0
    }

    pub fn parse(s: &str) -> Result<Self> {
        let trimmed = s.trim().trim_start_matches("p_").trim_start_matches('p');
        trimmed
            .parse::<u8>()
            .ok()
            .and_then(|i| PoolingLayerId::new(i).ok())
            .ok_or_else(|| {
                Error::Invalid(format!("cannot parse pooling layer from {s:?}"))
            })
    }

    /// Reverse lookup from a feature-map shape; shapes are distinct per layer.
    pub fn from_shape(h: usize, w: usize, l: usize) -> Option<Self> {
        PoolingLayerId::ALL
            .into_iter()
            .find(|layer| layer_shape(*layer) == (h, w, l))
    }
}

impl std::fmt::Display for PoolingLayerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "p_{}", self.0)
    }
}

/// Static (height, width, depth) of each pooling layer's output for a
/// 224x224x3 input.
pub fn layer_shape(layer: PoolingLayerId) -> (usize, usize, usize) {
    match layer.index() {
        1 => (112, 112, 64),
        2 => (56, 56, 128),
        3 => (28, 28, 256),
        4 => (14, 14, 512),
        5 => (7, 7, 512),
        _ => unreachable!(),
    }
}

/// The output tensor of one pooling layer for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    layer: PoolingLayerId,
    /// Shape (H, W, L).
    values: Array3<f32>,
    provenance: String,
}

impl FeatureMap {
    /// Validates shape against the layer table, finiteness, and
    /// non-negativity (pooled ReLU activations cannot be negative).
    pub fn new(
        layer: PoolingLayerId,
        values: Array3<f32>,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        let (h, w, l) = layer_shape(layer);
        if values.dim() != (h, w, l) {
            return Err(Error::Shape(format!(
                "feature map for {layer} must be {h}x{w}x{l}, got {:?}",
                values.dim()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Invalid(format!(
                "feature map contains invalid activation {bad}"
            )));
        }
        Ok(FeatureMap {
            layer,
            values,
            provenance: provenance.into(),
        })
    }

    pub fn layer(&self) -> PoolingLayerId {
        self.layer
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn depth(&self) -> usize {
        self.values.dim().2
    }

    pub fn values(&self) -> &Array3<f32> {
        &self.values
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }
}

/// Anything that can produce the feature map of an image at a given layer:
/// a live inference session, a warm disk cache, or a synthetic generator in
/// tests.
pub trait FeatureMapSource: Sync {
    fn feature_map(&self, image_path: &str, layer: PoolingLayerId) -> Result<FeatureMap>;

    /// Short human-readable description recorded in reports.
    fn describe(&self) -> String;
}

const FMAP_MAGIC: &[u8; 8] = b"BDVWFMAP";
const FMAP_VERSION: u32 = 1;

/// Writes a feature map in the cache format: magic, u32 version, u32 H,
/// u32 W, u32 L, H*W*L little-endian f32 in (h, w, l) row-major order, then
/// a u32-length-prefixed UTF-8 provenance string.
pub fn write_feature_map(map: &FeatureMap, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(24 + map.values.len() * 4 + map.provenance.len());
    buf.extend_from_slice(FMAP_MAGIC);
    buf.extend_from_slice(&FMAP_VERSION.to_le_bytes());
    let (h, w, l) = map.values.dim();
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&(l as u32).to_le_bytes());
    for v in map.values.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&(map.provenance.len() as u32).to_le_bytes());
    buf.extend_from_slice(map.provenance.as_bytes());
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_feature_map(path: &Path) -> Result<FeatureMap> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = [0u8; 24];
    file.read_exact(&mut header)
        .map_err(|_| Error::format(path, "truncated header"))?;
    if &header[..8] != FMAP_MAGIC {
        return Err(Error::format(path, "wrong magic"));
    }
    let version = u32::from_le_bytes(header[8..12].try_into().unwrap());
    if version != FMAP_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let h = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
    let l = u32::from_le_bytes(header[20..24].try_into().unwrap()) as usize;
    let layer = PoolingLayerId::from_shape(h, w, l)
        .ok_or_else(|| Error::format(path, format!("shape {h}x{w}x{l} matches no layer")))?;

    let mut data = vec![0u8; h * w * l * 4];
    file.read_exact(&mut data)
        .map_err(|_| Error::format(path, "truncated tensor data"))?;
    let values: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let values = Array3::from_shape_vec((h, w, l), values).expect("length checked");

    let mut len_buf = [0u8; 4];
    file.read_exact(&mut len_buf)
        .map_err(|_| Error::format(path, "missing provenance"))?;
    let len = u32::from_le_bytes(len_buf) as usize;
    let mut prov = vec![0u8; len];
    file.read_exact(&mut prov)
        .map_err(|_| Error::format(path, "truncated provenance"))?;
    let provenance = String::from_utf8(prov)
        .map_err(|_| Error::format(path, "provenance is not UTF-8"))?;

    FeatureMap::new(layer, values, provenance)
}

/// Reads only the header and trailing provenance of a cache file, skipping
/// the tensor payload.
fn read_fmap_summary(path: &Path) -> Result<(PoolingLayerId, String)> {
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header = [0u8; 24];
    file.read_exact(&mut header)
        .map_err(|_| Error::format(path, "truncated header"))?;
    if &header[..8] != FMAP_MAGIC {
        return Err(Error::format(path, "wrong magic"));
    }
    let h = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(header[16..20].try_into().unwrap()) as usize;
    let l = u32::from_le_bytes(header[20..24].try_into().unwrap()) as usize;
    let layer = PoolingLayerId::from_shape(h, w, l)
        .ok_or_else(|| Error::format(path, format!("shape {h}x{w}x{l} matches no layer")))?;
    file.seek(SeekFrom::Current((h * w * l * 4) as i64))
        .map_err(|e| Error::io(path, e))?;
    let mut len_buf = [0u8; 4];
    file.read_exact(&mut len_buf)
        .map_err(|_| Error::format(path, "missing provenance"))?;
    let len = u32::from_le_bytes(len_buf) as usize;
    let mut prov = vec![0u8; len];
    file.read_exact(&mut prov)
        .map_err(|_| Error::format(path, "truncated provenance"))?;
    let provenance =
        String::from_utf8(prov).map_err(|_| Error::format(path, "provenance is not UTF-8"))?;
    Ok((layer, provenance))
}

/// A VGG16 network loaded from an ONNX file, ready to extract pooling-layer
/// outputs.
pub struct CnnModel {
    executor: GraphExecutor,
    model_hash: String,
    path: PathBuf,
    /// Optional user override of tap-point tensor names, indexed by layer.
    tap_overrides: HashMap<PoolingLayerId, String>,
}

impl CnnModel {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let model_hash = hex_digest(&bytes);
        let graph = onnx::parse_model(&bytes)
            .map_err(|e| Error::Model(format!("{}: {e}", path.display())))?;
        let executor = GraphExecutor::new(graph)?;
        Ok(CnnModel {
            executor,
            model_hash,
            path: path.to_path_buf(),
            tap_overrides: HashMap::new(),
        })
    }

    /// Overrides the tensor name tapped for one layer (for exports whose
    /// graphs defeat both the name table and positional lookup).
    pub fn set_tap_override(&mut self, layer: PoolingLayerId, tensor_name: impl Into<String>) {
        self.tap_overrides.insert(layer, tensor_name.into());
    }

    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Runs the network on one preprocessed input and returns the output of
    /// the chosen pooling layer. Deterministic for a fixed model and input.
    pub fn extract_feature_map(
        &self,
        input: &ModelInput,
        layer: PoolingLayerId,
    ) -> Result<FeatureMap> {
        let tap = self.tap_overrides.get(&layer).map(|s| s.as_str());
        let values = self.executor.pooling_output(&input.tensor, layer, tap)?;
        FeatureMap::new(layer, values, input.provenance.clone())
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic cache file name for one (image, layer, model,
/// preprocessing) combination.
pub fn cache_file_name(
    image_path: &str,
    image_content_hash: &str,
    layer: PoolingLayerId,
    model_hash: &str,
) -> String {
    let mut hasher = Sha256::new();
    hasher.update(image_path.as_bytes());
    hasher.update([0]);
    hasher.update(image_content_hash.as_bytes());
    hasher.update([0]);
    hasher.update(layer.to_string().as_bytes());
    hasher.update([0]);
    hasher.update(model_hash.as_bytes());
    hasher.update([0]);
    hasher.update(crate::PREPROCESSING_TAG.as_bytes());
    let digest = hasher.finalize();
    let hex: String = digest.iter().take(16).map(|b| format!("{b:02x}")).collect();
    format!("{hex}.fmap")
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex_digest(&bytes))
}

/// Feature-map provider backed by a cache directory, optionally falling
/// back to live inference (and filling the cache) on a miss.
pub struct CachedSource {
    dir: PathBuf,
    model: Option<CnnModel>,
    index: RwLock<HashMap<(String, PoolingLayerId), PathBuf>>,
}

impl CachedSource {
    /// Scans `dir` for cache files and indexes them by (provenance, layer).
    pub fn open(dir: &Path, model: Option<CnnModel>) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = HashMap::new();
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "fmap"))
            .collect();
        files.sort();
        for path in files {
            if let Ok((layer, provenance)) = read_fmap_summary(&path) {
                index.insert((provenance, layer), path);
            }
        }
        Ok(CachedSource {
            dir: dir.to_path_buf(),
            model,
            index: RwLock::new(index),
        })
    }

    pub fn cached_count(&self) -> usize {
        self.index.read().unwrap().len()
    }

    fn extract_and_store(&self, image_path: &str, layer: PoolingLayerId) -> Result<FeatureMap> {
        let model = self.model.as_ref().ok_or_else(|| {
            Error::Model(format!(
                "no cached feature map for {image_path:?} at {layer} and no model to extract it"
            ))
        })?;
        let raw = crate::imageio::load_image(Path::new(image_path))?;
        let input = crate::imageio::preprocess(&raw, image_path);
        let map = model.extract_feature_map(&input, layer)?;
        let content_hash = hash_file(Path::new(image_path))?;
        let file = self.dir.join(cache_file_name(
            image_path,
            &content_hash,
            layer,
            model.model_hash(),
        ));
        write_feature_map(&map, &file)?;
        self.index
            .write()
            .unwrap()
            .insert((image_path.to_string(), layer), file);
        Ok(map)
    }
}

impl FeatureMapSource for CachedSource {
    fn feature_map(&self, image_path: &str, layer: PoolingLayerId) -> Result<FeatureMap> {
        let hit = self
            .index
            .read()
            .unwrap()
            .get(&(image_path.to_string(), layer))
            .cloned();
        match hit {
            Some(path) => read_feature_map(&path),
            None => self.extract_and_store(image_path, layer),
        }
    }

    fn describe(&self) -> String {
        match &self.model {
            Some(m) => format!(
                "cache:{} + onnx:{} ({})",
                self.dir.display(),
                m.path().display(),
                &m.model_hash()[..12]
            ),
            None => format!("cache:{}", self.dir.display()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_shape_table() {
        assert_eq!(layer_shape(PoolingLayerId::new(4).unwrap()), (14, 14, 512));
        assert_eq!(layer_shape(PoolingLayerId::new(5).unwrap()), (7, 7, 512));
        assert_eq!(layer_shape(PoolingLayerId::new(1).unwrap()), (112, 112, 64));
    }

    #[test]
    fn layer_shapes_follow_halving_topology() {
        // Independent derivation: each pooling stage halves the spatial
        // side starting from 224, with the fixed channel progression.
        let channels = [64, 128, 256, 512, 512];
        for (i, layer) in PoolingLayerId::ALL.into_iter().enumerate() {
            let side = 224 >> (i + 1);
            assert_eq!(layer_shape(layer), (side, side, channels[i]));
        }
    }

    #[test]
    fn layer_id_parsing() {
        assert_eq!(PoolingLayerId::parse("p_4").unwrap().index(), 4);
        assert_eq!(PoolingLayerId::parse("p5").unwrap().index(), 5);
        assert_eq!(PoolingLayerId::parse("2").unwrap().index(), 2);
        assert!(PoolingLayerId::parse("p_0").is_err());
        assert!(PoolingLayerId::parse("p_6").is_err());
    }

    #[test]
    fn feature_map_rejects_wrong_shape_and_negative_values() {
        let layer = PoolingLayerId::new(5).unwrap();
        let bad_shape = Array3::<f32>::zeros((7, 7, 100));
        assert!(FeatureMap::new(layer, bad_shape, "x").is_err());
        let mut neg = Array3::<f32>::zeros((7, 7, 512));
        neg[[0, 0, 0]] = -1.0;
        assert!(FeatureMap::new(layer, neg, "x").is_err());
    }

    #[test]
    fn fmap_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let layer = PoolingLayerId::new(5).unwrap();
        let values = Array3::from_shape_fn((7, 7, 512), |(h, w, l)| {
            ((h * 31 + w * 7 + l) % 97) as f32 * 0.25
        });
        let map = FeatureMap::new(layer, values, "images/a.png").unwrap();
        let path = dir.path().join("a.fmap");
        write_feature_map(&map, &path).unwrap();
        let loaded = read_feature_map(&path).unwrap();
        assert_eq!(loaded, map);
    }

    #[test]
    fn fmap_rejects_wrong_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.fmap");
        std::fs::write(&path, b"NOTMAGICxxxxxxxxxxxxxxxxxxxx").unwrap();
        let err = read_feature_map(&path).unwrap_err();
        assert!(err.to_string().contains("wrong magic"), "{err}");
    }

    #[test]
    fn cache_names_are_stable_and_key_sensitive() {
        let layer = PoolingLayerId::P4;
        let a = cache_file_name("img.png", "abc", layer, "model1");
        let b = cache_file_name("img.png", "abc", layer, "model1");
        assert_eq!(a, b);
        assert_ne!(a, cache_file_name("img.png", "abc", layer, "model2"));
        assert_ne!(a, cache_file_name("img.png", "def", layer, "model1"));
        assert_ne!(
            a,
            cache_file_name("img.png", "abc", PoolingLayerId::new(5).unwrap(), "model1")
        );
    }

    #[test]
    fn cached_source_reads_back_what_it_scanned() {
        let dir = tempfile::tempdir().unwrap();
        let layer = PoolingLayerId::P4;
        let values = Array3::from_elem((14, 14, 512), 0.5f32);
        let map = FeatureMap::new(layer, values, "virtual/img1.png").unwrap();
        write_feature_map(&map, &dir.path().join("x.fmap")).unwrap();

        let source = CachedSource::open(dir.path(), None).unwrap();
        assert_eq!(source.cached_count(), 1);
        let loaded = source.feature_map("virtual/img1.png", layer).unwrap();
        assert_eq!(loaded, map);
        assert!(source.feature_map("missing.png", layer).is_err());
    }
}
