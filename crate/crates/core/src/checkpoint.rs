//! Checkpoint files.
//!
//! Layout: the magic `MCN1`, a little-endian `u32` header length, a JSON
//! header, then little-endian `f32` blobs. Blob offsets in the header count
//! bytes from the start of the blob section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::comparison::{condition_order, NormStats, NUM_TYPES};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::param::Param;
use crate::training::TrainConfig;
use crate::vse::Vocabulary;

const MAGIC: &[u8; 4] = b"MCN1";
const FORMAT_VERSION: u32 = 1;
const MEAN_IMAGES: &str = "pad.mean_images";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub train_config: Option<TrainConfig>,
    pub best_val_auc: Option<f64>,
    pub best_epoch: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    length: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    dtype: String,
    condition_order: Vec<String>,
    vocabulary: Vocabulary,
    model_config: ModelConfig,
    train_config: Option<TrainConfig>,
    best_val_auc: Option<f64>,
    best_epoch: Option<usize>,
    norm: NormStats,
    tensors: Vec<BlobEntry>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut data = Vec::new();
        let mut tensors = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, values: &mut dyn Iterator<Item = f64>| {
            let offset = data.len();
            let mut n = 0;
            for v in values {
                data.extend_from_slice(&(v as f32).to_le_bytes());
                n += 1;
            }
            tensors.push(BlobEntry { name, shape, offset, length: n * 4 });
        };
        for (name, _, p) in self.model.params() {
            push(name, p.shape.clone(), &mut p.values.iter().copied());
        }
        let mut shape = vec![NUM_TYPES];
        shape.extend(self.model.image_shape());
        push(MEAN_IMAGES.to_string(), shape, &mut self.model.mean_images.iter().flatten().copied());
        let header = Header {
            format_version: FORMAT_VERSION,
            dtype: "f32".into(),
            condition_order: condition_order(),
            vocabulary: self.model.vocab.clone(),
            model_config: self.model.config.clone(),
            train_config: self.train_config.clone(),
            best_val_auc: self.best_val_auc,
            best_epoch: self.best_epoch,
            norm: self.model.norm.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(8 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::format(0, "not a checkpoint (bad magic)"));
        }
        if bytes.len() < 8 {
            return Err(Error::format(bytes.len(), "truncated header length"));
        }
        let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let data_start = 8 + len;
        if bytes.len() < data_start {
            return Err(Error::format(bytes.len(), format!("header of {len} bytes is truncated")));
        }
        let header: Header = serde_json::from_slice(&bytes[8..data_start]).map_err(|e| {
            let text = &bytes[8..data_start];
            let line_start: usize = text.split_inclusive(|&b| b == b'\n').take(e.line().saturating_sub(1)).map(<[u8]>::len).sum();
            Error::format(8 + line_start + e.column().saturating_sub(1), format!("bad header: {e}"))
        })?;
        if header.format_version != FORMAT_VERSION || header.dtype != "f32" {
            return Err(Error::format(8, format!("unsupported format {} / {}", header.format_version, header.dtype)));
        }
        if header.condition_order != condition_order() {
            return Err(Error::format(8, "condition order differs from this build"));
        }
        header
            .model_config
            .validate()
            .map_err(|e| Error::format(8, format!("bad model configuration: {e}")))?;
        let data = &bytes[data_start..];
        let mut blobs = std::collections::HashMap::new();
        for t in &header.tensors {
            let numel: usize = t.shape.iter().product();
            if t.length != numel * 4 {
                return Err(Error::format(8, format!("{}: length {} does not match shape {:?}", t.name, t.length, t.shape)));
            }
            let end = t.offset.checked_add(t.length).filter(|&e| e <= data.len()).ok_or_else(|| {
                Error::format(data_start + data.len(), format!("{}: blob at {}+{} runs past the end", t.name, t.offset, t.length))
            })?;
            let values: Vec<f64> = data[t.offset..end]
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                .collect();
            if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::format(data_start + t.offset + 4 * i, format!("{}: non-finite value", t.name)));
            }
            blobs.insert(t.name.clone(), (t.shape.clone(), values));
        }

        // Rebuild a model of the recorded shape, then overwrite every array.
        let cfg = &header.model_config;
        let pixels = cfg.backbone.input_channels * cfg.backbone.input_side * cfg.backbone.input_side;
        let mut model = Model::new(cfg, cfg.backbone.seed, header.vocabulary.clone(), vec![vec![0.0; pixels]; NUM_TYPES])
            .map_err(|e| Error::format(8, format!("cannot rebuild model: {e}")))?;
        let mut take = |name: &str, want: &[usize]| -> Result<Vec<f64>> {
            let (shape, values) = blobs.remove(name).ok_or_else(|| Error::format(8, format!("missing tensor {name}")))?;
            if shape != want {
                return Err(Error::format(8, format!("{name}: shape {shape:?}, expected {want:?}")));
            }
            Ok(values)
        };
        for (name, _, p) in model.params_mut() {
            let shape = p.shape.clone();
            *p = Param { values: take(&name, &shape)?, shape };
        }
        let mut mean_shape = vec![NUM_TYPES];
        mean_shape.extend(model.image_shape());
        let means = take(MEAN_IMAGES, &mean_shape)?;
        model.mean_images = means.chunks(pixels).map(<[f64]>::to_vec).collect();
        if let Some(extra) = blobs.keys().next() {
            return Err(Error::format(8, format!("unexpected tensor {extra}")));
        }
        if header.norm.mean.len() != header.norm.var.len() || header.norm.mean.len() != model.norm.mean.len() {
            return Err(Error::format(8, "normalization statistics have the wrong length"));
        }
        model.norm = header.norm;
        Ok(Checkpoint {
            model,
            train_config: header.train_config,
            best_val_auc: header.best_val_auc,
            best_epoch: header.best_epoch,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::{tiny_config, tiny_setup};

    fn sample() -> Checkpoint {
        let (_, mut model) = tiny_setup(&tiny_config(), 5);
        model.norm.mean[3] = 0.123456789;
        model.masks.layers[1].values[2] = -0.7;
        Checkpoint {
            model,
            train_config: Some(TrainConfig::default()),
            best_val_auc: Some(0.8125),
            best_epoch: Some(3),
        }
    }

    #[test]
    fn round_trip_is_within_f32_and_a_fixpoint() {
        let ck = sample();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"MCN1");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        for ((n, _, a), (_, _, b)) in ck.model.params().iter().zip(back.model.params()) {
            let drift = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(drift < 1e-6, "{n}: {drift}");
        }
        assert_eq!(back.model.norm, ck.model.norm);
        assert_eq!(back.model.vocab, ck.model.vocab);
        assert_eq!(back.best_val_auc, Some(0.8125));
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.model, ck.model.quantized());
    }

    #[test]
    fn corruption_is_reported_with_offsets() {
        let bytes = sample().to_bytes();
        assert!(matches!(Checkpoint::from_bytes(b"MCN2...."), Err(Error::Format { offset: 0, .. })));
        match Checkpoint::from_bytes(&bytes[..bytes.len() - 10]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, bytes.len() - 10),
            other => panic!("{other:?}"),
        }
        // point one blob offset far past the end
        let len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[8..8 + len]).unwrap();
        let bad = header.replacen("\"offset\":0,", "\"offset\":9999999,", 1);
        assert_ne!(bad, header);
        let mut corrupt = Vec::new();
        corrupt.extend_from_slice(b"MCN1");
        corrupt.extend_from_slice(&(bad.len() as u32).to_le_bytes());
        corrupt.extend_from_slice(bad.as_bytes());
        corrupt.extend_from_slice(&bytes[8 + len..]);
        assert!(matches!(Checkpoint::from_bytes(&corrupt), Err(Error::Format { .. })));
        let mut garbled = bytes.clone();
        garbled[10] = b'!';
        assert!(matches!(Checkpoint::from_bytes(&garbled), Err(Error::Format { offset, .. }) if offset >= 8));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&sample(), &p).unwrap();
        let a = load_checkpoint(&p).unwrap();
        let p2 = dir.path().join("m2.ckpt");
        save_checkpoint(&a, &p2).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());
        assert!(matches!(load_checkpoint(&dir.path().join("nope")), Err(Error::Io { .. })));
    }
}
