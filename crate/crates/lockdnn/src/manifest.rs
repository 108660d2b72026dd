//! `model.json` + `model.bin` model files.
//!
//! The blob holds every parameter word as little-endian two's complement,
//! two bytes per word for widths up to 16 and four bytes above that.
//! Each conv/fc layer names its weight and bias tensors by byte offset and
//! byte length into the blob.

use std::path::{Path, PathBuf};

use lockdnn_core::model::ObfuscationMeta;
use lockdnn_core::{Accumulator, Layer, LayerKind, Model, QFormat, Shape};
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::report::write_atomic;

pub const MODEL_SCHEMA: &str = "lockdnn.model.v1";
pub const MAXPOOL_BEFORE_RELU: &str = "before_relu";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QSpec {
    pub width: u32,
    pub frac: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Span {
    pub offset: u64,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerParams {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Fc {
        in_features: usize,
        out_features: usize,
    },
    #[serde(rename = "maxpool")]
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    Relu,
}

impl From<&LayerKind> for LayerParams {
    fn from(k: &LayerKind) -> Self {
        match *k {
            LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                LayerParams::Conv2d { in_channels, out_channels, kernel, stride, padding }
            }
            LayerKind::Fc { in_features, out_features } => LayerParams::Fc { in_features, out_features },
            LayerKind::MaxPool { kernel, stride } => LayerParams::MaxPool { kernel, stride },
            LayerKind::Relu => LayerParams::Relu,
        }
    }
}

impl From<&LayerParams> for LayerKind {
    fn from(p: &LayerParams) -> Self {
        match *p {
            LayerParams::Conv2d { in_channels, out_channels, kernel, stride, padding } => {
                LayerKind::Conv2d { in_channels, out_channels, kernel, stride, padding }
            }
            LayerParams::Fc { in_features, out_features } => LayerKind::Fc { in_features, out_features },
            LayerParams::MaxPool { kernel, stride } => LayerKind::MaxPool { kernel, stride },
            LayerParams::Relu => LayerKind::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    #[serde(flatten)]
    pub params: LayerParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<Span>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<Span>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema: String,
    pub name: String,
    pub qformat: QSpec,
    pub accumulator: Accumulator,
    pub classes: usize,
    pub input: Shape,
    pub maxpool_placement: String,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub layers: Vec<LayerEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obfuscation: Option<ObfuscationMeta>,
}

/// Bytes per parameter word in the blob.
pub fn word_bytes(q: QFormat) -> u64 {
    if q.width() <= 16 {
        2
    } else {
        4
    }
}

/// Manifest and blob contents for `model`, with the blob named `blob_name`.
pub fn encode_model(model: &Model, blob_name: &str) -> Result<(Manifest, Vec<u8>), Error> {
    model.validate()?;
    let q = model.qformat;
    let wb = word_bytes(q);
    let mut blob = Vec::new();
    let mut push = |words: &[i32]| -> Span {
        let offset = blob.len() as u64;
        for &w in words {
            let bits = q.to_bits(w);
            if wb == 2 {
                blob.extend_from_slice(&(bits as u16).to_le_bytes());
            } else {
                blob.extend_from_slice(&bits.to_le_bytes());
            }
        }
        Span { offset, len: words.len() as u64 * wb }
    };
    let layers = model
        .layers
        .iter()
        .map(|l| {
            let (weight, bias) =
                if l.kind.has_params() { (Some(push(&l.weight)), Some(push(&l.bias))) } else { (None, None) };
            LayerEntry { params: LayerParams::from(&l.kind), weight, bias }
        })
        .collect();
    let manifest = Manifest {
        schema: MODEL_SCHEMA.into(),
        name: model.name.clone(),
        qformat: QSpec { width: q.width(), frac: q.frac() },
        accumulator: model.accumulator,
        classes: model.classes,
        input: model.input,
        maxpool_placement: MAXPOOL_BEFORE_RELU.into(),
        blob: blob_name.into(),
        layers,
        obfuscation: model.obfuscation.clone(),
    };
    Ok((manifest, blob))
}

/// Parses manifest text and rebuilds the model from `blob`.
pub fn decode_model(manifest_text: &[u8], blob: &[u8]) -> Result<Model, Error> {
    let m: Manifest = serde_json::from_slice(manifest_text).map_err(|e| Error::Malformed(e.to_string()))?;
    if m.schema != MODEL_SCHEMA {
        return Err(Error::Malformed(format!("unsupported schema {:?}", m.schema)));
    }
    if m.maxpool_placement != MAXPOOL_BEFORE_RELU {
        return Err(Error::Malformed(format!("unsupported maxpool placement {:?}", m.maxpool_placement)));
    }
    let q = QFormat::new(m.qformat.width, m.qformat.frac).map_err(|e| Error::Malformed(e.to_string()))?;
    let wb = word_bytes(q);
    let mut covered = 0u64;
    let mut read = |span: Option<Span>, want: usize, what: &str, i: usize| -> Result<Vec<i32>, Error> {
        let span = span.ok_or_else(|| Error::Malformed(format!("layer {i} has no {what} tensor")))?;
        if span.offset % wb != 0 || span.len % wb != 0 {
            return Err(Error::Malformed(format!("layer {i} {what}: span not aligned to {wb}-byte words")));
        }
        if span.len / wb != want as u64 {
            return Err(Error::DimMismatch(format!(
                "layer {i} {what}: {} words in blob, layer dims need {want}",
                span.len / wb
            )));
        }
        let end = span.offset.checked_add(span.len).ok_or_else(|| Error::Malformed("span overflows".into()))?;
        if end > blob.len() as u64 {
            return Err(Error::BlobLengthMismatch { expected: end, actual: blob.len() as u64 });
        }
        covered = covered.max(end);
        let bytes = &blob[span.offset as usize..end as usize];
        Ok(bytes
            .chunks_exact(wb as usize)
            .map(|c| {
                let bits = if wb == 2 {
                    u16::from_le_bytes([c[0], c[1]]) as u32
                } else {
                    u32::from_le_bytes([c[0], c[1], c[2], c[3]])
                };
                q.from_bits(bits)
            })
            .collect())
    };
    let mut layers = Vec::with_capacity(m.layers.len());
    for (i, e) in m.layers.iter().enumerate() {
        let kind = LayerKind::from(&e.params);
        if kind.has_params() {
            let weight = read(e.weight, kind.weight_len(), "weight", i)?;
            let bias = read(e.bias, kind.bias_len(), "bias", i)?;
            layers.push(Layer::new(kind, weight, bias));
        } else {
            if e.weight.is_some() || e.bias.is_some() {
                return Err(Error::Malformed(format!("layer {i} ({}) takes no parameters", kind.name())));
            }
            layers.push(Layer::new(kind, Vec::new(), Vec::new()));
        }
    }
    if covered != blob.len() as u64 {
        return Err(Error::BlobLengthMismatch { expected: covered, actual: blob.len() as u64 });
    }
    let model = Model {
        name: m.name,
        qformat: q,
        accumulator: m.accumulator,
        classes: m.classes,
        input: m.input,
        layers,
        obfuscation: m.obfuscation,
    };
    let shapes = model.validate()?;
    if let Some(meta) = &model.obfuscation {
        if meta.group_map.len() != model.layers.len()
            || meta.group_map.iter().zip(&model.layers).any(|(g, l)| g.len() != l.bias.len())
        {
            return Err(Error::DimMismatch("group map does not cover every bias".into()));
        }
        if meta.group_map.iter().flatten().chain(&meta.masked_groups).any(|&g| g >= meta.groups) {
            return Err(Error::Malformed("group id out of range".into()));
        }
    }
    debug_assert_eq!(shapes.len(), model.layers.len());
    Ok(model)
}

/// Blob path for a manifest path: same stem, `.bin` extension.
pub fn blob_path_for(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save_model(model: &Model, manifest_path: &Path) -> Result<(), Error> {
    let blob_path = blob_path_for(manifest_path);
    let blob_name = blob_path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Usage(format!("bad model path {}", manifest_path.display())))?
        .to_string();
    let (manifest, blob) = encode_model(model, &blob_name)?;
    let mut text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    text.push(b'\n');
    write_atomic(&blob_path, &blob)?;
    write_atomic(manifest_path, &text)
}

pub fn load_model(manifest_path: &Path) -> Result<Model, Error> {
    let text = std::fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let m: Manifest = serde_json::from_slice(&text).map_err(|e| Error::Malformed(e.to_string()))?;
    let blob_path = manifest_path.parent().unwrap_or(Path::new(".")).join(&m.blob);
    let blob = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    decode_model(&text, &blob)
}

const BUNDLED_MANIFEST: &[u8] = include_bytes!("../assets/toy_cnn.json");
const BUNDLED_BLOB: &[u8] = include_bytes!("../assets/toy_cnn.bin");

/// The toy CNN shipped with the tool, trained on the 10-class blob set
/// generated with seed 0.
pub fn bundled_model() -> Model {
    decode_model(BUNDLED_MANIFEST, BUNDLED_BLOB).expect("bundled model is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Model {
        Model {
            name: "small".into(),
            qformat: QFormat::Q8_8,
            accumulator: Accumulator::Saturating,
            classes: 3,
            input: Shape::new(1, 4, 4),
            layers: vec![
                Layer::new(
                    LayerKind::Conv2d { in_channels: 1, out_channels: 2, kernel: 3, stride: 1, padding: 1 },
                    (0..18).map(|i| i * 300 - 2700).collect(),
                    vec![-32768, 32767],
                ),
                Layer::maxpool(2, 2),
                Layer::relu(),
                Layer::new(
                    LayerKind::Fc { in_features: 8, out_features: 3 },
                    (0..24).map(|i| -i).collect(),
                    vec![1, 2, 3],
                ),
            ],
            obfuscation: None,
        }
    }

    #[test]
    fn round_trip() {
        let m = small();
        let (man, blob) = encode_model(&m, "small.bin").unwrap();
        assert_eq!(blob.len(), 2 * (18 + 2 + 24 + 3));
        // -32768 little-endian
        assert_eq!(&blob[36..38], &[0x00, 0x80]);
        let text = serde_json::to_vec(&man).unwrap();
        assert_eq!(decode_model(&text, &blob).unwrap(), m);
    }

    #[test]
    fn wide_words() {
        let mut m = small();
        m.qformat = QFormat::new(24, 12).unwrap();
        m.layers[0].bias = vec![-(1 << 23), (1 << 23) - 1];
        let (man, blob) = encode_model(&m, "w.bin").unwrap();
        assert_eq!(blob.len(), 4 * 47);
        assert_eq!(decode_model(&serde_json::to_vec(&man).unwrap(), &blob).unwrap(), m);
    }

    #[test]
    fn manifest_shape() {
        let (man, _) = encode_model(&small(), "small.bin").unwrap();
        let v = serde_json::to_value(&man).unwrap();
        assert_eq!(v["qformat"], serde_json::json!({"width": 16, "frac": 8}));
        assert_eq!(v["layers"][0]["kind"], "conv2d");
        assert_eq!(v["layers"][0]["params"]["kernel"], 3);
        assert_eq!(v["layers"][0]["weight"], serde_json::json!({"offset": 0, "len": 36}));
        assert_eq!(v["layers"][1]["kind"], "maxpool");
        assert_eq!(v["layers"][2], serde_json::json!({"kind": "relu"}));
        assert!(v.get("obfuscation").is_none());
    }

    #[test]
    fn distinct_errors() {
        let m = small();
        let (man, blob) = encode_model(&m, "s.bin").unwrap();
        let text = serde_json::to_vec(&man).unwrap();

        assert!(matches!(decode_model(b"{not json", &blob), Err(Error::Malformed(_))));
        let mut bad = man.clone();
        bad.schema = "other".into();
        assert!(matches!(decode_model(&serde_json::to_vec(&bad).unwrap(), &blob), Err(Error::Malformed(_))));

        assert!(matches!(decode_model(&text, &blob[..blob.len() - 2]), Err(Error::BlobLengthMismatch { .. })));
        let mut long = blob.clone();
        long.extend([0, 0]);
        assert!(matches!(decode_model(&text, &long), Err(Error::BlobLengthMismatch { expected: 94, actual: 96 })));

        let mut dims = man.clone();
        if let LayerParams::Fc { in_features, .. } = &mut dims.layers[3].params {
            *in_features = 9;
        }
        assert!(matches!(decode_model(&serde_json::to_vec(&dims).unwrap(), &blob), Err(Error::DimMismatch(_))));

        let mut odd = man;
        odd.layers[0].weight.as_mut().unwrap().offset = 1;
        assert!(matches!(decode_model(&serde_json::to_vec(&odd).unwrap(), &blob), Err(Error::Malformed(_))));
    }

    #[test]
    fn bundled_model_loads() {
        let m = bundled_model();
        assert_eq!(m.classes, 10);
        assert!(!m.is_obfuscated());
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        save_model(&small(), &p).unwrap();
        assert!(dir.path().join("m.bin").exists());
        assert_eq!(load_model(&p).unwrap(), small());
    }
}
