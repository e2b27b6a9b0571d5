//! On-disk checkpoints.
//!
//! A base checkpoint directory holds:
//!
//! * `model.json`: manifest: model config, precision, tying flag, the name of
//!   the tokenizer manifest, and a tensor index `name → (offset, shape)`.
//! * `model.bin`: every tensor concatenated in index order, row-major,
//!   little-endian `f32`. Offsets are in bytes from the start of the blob.
//! * `tokenizer.json`: special-token ids.
//!
//! An adapter checkpoint holds `adapter.json` (LoRA config, SHA-256 of the
//! base `model.bin`, tensor index) and `adapter.bin` with only the `lora_a` /
//! `lora_b` tensors. Loading an adapter refuses a base whose blob hash
//! differs from the recorded one.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lora::LoraConfig;
use crate::model::{ModelConfig, ParamKind, Transformer};
use crate::tensor::{Matrix, Scalar};
use crate::tokenizer::TokenizerManifest;

pub const BASE_MANIFEST: &str = "model.json";
pub const BASE_BLOB: &str = "model.bin";
pub const TOKENIZER_MANIFEST: &str = "tokenizer.json";
pub const ADAPTER_MANIFEST: &str = "adapter.json";
pub const ADAPTER_BLOB: &str = "adapter.bin";

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub offset: u64,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub tokenizer_manifest: String,
    pub precision: String,
    pub byte_order: String,
    pub tied_embeddings: bool,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterManifest {
    pub format_version: u32,
    pub lora: LoraConfig,
    pub base_sha256: String,
    pub precision: String,
    pub byte_order: String,
    pub tensors: Vec<TensorEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn pack<'a, T: Scalar>(tensors: impl Iterator<Item = (String, &'a Matrix<T>)>) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut index = Vec::new();
    let mut blob = Vec::new();
    for (name, t) in tensors {
        index.push(TensorEntry {
            name,
            offset: blob.len() as u64,
            shape: [t.rows, t.cols],
        });
        T::to_le_bytes_vec(&t.data, &mut blob);
    }
    (index, blob)
}

fn unpack<T: Scalar>(entry: &TensorEntry, blob: &[u8]) -> Result<Matrix<T>> {
    let width = std::mem::size_of::<T>();
    let [rows, cols] = entry.shape;
    let start = entry.offset as usize;
    let end = start + rows * cols * width;
    let bytes = blob
        .get(start..end)
        .ok_or_else(|| Error::Checkpoint(format!("tensor {} runs past the end of the blob", entry.name)))?;
    Ok(Matrix::from_vec(rows, cols, T::from_le_bytes_slice(bytes)))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Writes the frozen base tensors. Adapter factors are not part of a base
/// checkpoint; merged adapters are rejected since the base weights would
/// then contain the update.
pub fn save_base<T: Scalar>(model: &Transformer<T>, dir: &Path) -> Result<String> {
    if model.is_merged() {
        return Err(Error::Checkpoint("refusing to save a base with merged adapters".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tensors = model.tensors();
    let (index, blob) = pack(
        tensors
            .iter()
            .filter(|(_, k, _)| *k == ParamKind::Base)
            .map(|(n, _, t)| (n.clone(), *t)),
    );
    let manifest = BaseManifest {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        tokenizer_manifest: TOKENIZER_MANIFEST.to_string(),
        precision: T::DTYPE.to_string(),
        byte_order: "little".to_string(),
        tied_embeddings: false,
        tensors: index,
    };
    write_file(&dir.join(BASE_BLOB), &blob)?;
    write_file(&dir.join(BASE_MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    write_file(
        &dir.join(TOKENIZER_MANIFEST),
        serde_json::to_string_pretty(&TokenizerManifest::default())?.as_bytes(),
    )?;
    Ok(sha256_hex(&blob))
}

/// Loads a base checkpoint and returns it with the SHA-256 of its blob.
pub fn load_base<T: Scalar>(dir: &Path) -> Result<(Transformer<T>, String)> {
    let manifest: BaseManifest = read_json(&dir.join(BASE_MANIFEST))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", manifest.format_version)));
    }
    if manifest.precision != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint precision {} does not match requested {}",
            manifest.precision,
            T::DTYPE
        )));
    }
    if manifest.byte_order != "little" || manifest.tied_embeddings {
        return Err(Error::Checkpoint("only untied little-endian checkpoints are supported".into()));
    }
    let tok_path = dir.join(&manifest.tokenizer_manifest);
    if tok_path.exists() {
        let tok: TokenizerManifest = read_json(&tok_path)?;
        if tok != TokenizerManifest::default() {
            return Err(Error::Checkpoint("tokenizer manifest does not match the byte-level tokenizer".into()));
        }
    }
    let blob_path = dir.join(BASE_BLOB);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut model = Transformer::<T>::zeros(manifest.config.clone())?;
    fill(&mut model, &manifest.tensors, &blob, |k| k == ParamKind::Base)?;
    model.validate()?;
    Ok((model, sha256_hex(&blob)))
}

fn fill<T: Scalar>(
    model: &mut Transformer<T>,
    index: &[TensorEntry],
    blob: &[u8],
    wanted: impl Fn(ParamKind) -> bool,
) -> Result<()> {
    let mut slots = model.tensors_mut();
    let expected = slots.iter().filter(|(_, k, _)| wanted(*k)).count();
    if index.len() != expected {
        return Err(Error::Checkpoint(format!("expected {expected} tensors, index lists {}", index.len())));
    }
    for entry in index {
        let (_, _, slot) = slots
            .iter_mut()
            .find(|(n, k, _)| *n == entry.name && wanted(*k))
            .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {}", entry.name)))?;
        let t = unpack::<T>(entry, blob)?;
        if t.shape() != slot.shape() {
            return Err(Error::Shape(format!(
                "{}: checkpoint has {:?}, model expects {:?}",
                entry.name,
                t.shape(),
                slot.shape()
            )));
        }
        **slot = t;
    }
    Ok(())
}

/// Writes only the adapter factors, tagged with the base blob hash.
pub fn save_adapter<T: Scalar>(
    model: &Transformer<T>,
    lora: &LoraConfig,
    base_sha256: &str,
    dir: &Path,
) -> Result<()> {
    if model.is_merged() {
        return Err(Error::Checkpoint("unmerge adapters before saving them".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tensors = model.tensors();
    let (index, blob) = pack(
        tensors
            .iter()
            .filter(|(_, k, _)| *k != ParamKind::Base)
            .map(|(n, _, t)| (n.clone(), *t)),
    );
    let manifest = AdapterManifest {
        format_version: FORMAT_VERSION,
        lora: lora.clone(),
        base_sha256: base_sha256.to_string(),
        precision: T::DTYPE.to_string(),
        byte_order: "little".to_string(),
        tensors: index,
    };
    write_file(&dir.join(ADAPTER_BLOB), &blob)?;
    write_file(&dir.join(ADAPTER_MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())
}

pub fn read_adapter_manifest(dir: &Path) -> Result<AdapterManifest> {
    read_json(&dir.join(ADAPTER_MANIFEST))
}

/// Wraps `base` with the adapter stored in `dir`. Fails with
/// [`Error::BaseHashMismatch`] when the adapter was trained on another base.
pub fn load_adapter<T: Scalar>(base: &mut Transformer<T>, base_sha256: &str, dir: &Path) -> Result<LoraConfig> {
    let manifest = read_adapter_manifest(dir)?;
    if manifest.base_sha256 != base_sha256 {
        return Err(Error::BaseHashMismatch {
            expected: manifest.base_sha256,
            actual: base_sha256.to_string(),
        });
    }
    if manifest.precision != T::DTYPE {
        return Err(Error::Checkpoint(format!("adapter precision {} is not {}", manifest.precision, T::DTYPE)));
    }
    let blob_path = dir.join(ADAPTER_BLOB);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    base.wrap_lora(&manifest.lora, 0)?;
    fill(base, &manifest.tensors, &blob, |k| k != ParamKind::Base)?;
    base.validate()?;
    Ok(manifest.lora)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            vocab_size: 20,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            n_kv_heads: 1,
            d_ff: 12,
            max_seq_len: 16,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn base_round_trip_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let model = Transformer::<f32>::init(tiny(), 3).unwrap();
        let hash = save_base(&model, dir.path()).unwrap();
        let (loaded, loaded_hash) = load_base::<f32>(dir.path()).unwrap();
        assert_eq!(loaded, model);
        assert_eq!(hash, loaded_hash);
        assert_eq!(hash, sha256_file(&dir.path().join(BASE_BLOB)).unwrap());
        let manifest: BaseManifest = read_json(&dir.path().join(BASE_MANIFEST)).unwrap();
        assert_eq!(manifest.tensors[0].name, "tok_embeddings");
        assert_eq!(manifest.tensors[1].offset, 20 * 8 * 4);
        assert!(!manifest.tied_embeddings);
    }

    #[test]
    fn adapter_round_trip_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let base = Transformer::<f32>::init(tiny(), 3).unwrap();
        let hash = save_base(&base, &dir.path().join("base")).unwrap();
        let cfg = LoraConfig { r: 2, ..LoraConfig::default() };
        let mut adapted = base.clone();
        adapted.wrap_lora(&cfg, 9).unwrap();
        adapted.layers[0].wq.lora.as_mut().unwrap().b.data[0] = 0.5;
        save_adapter(&adapted, &cfg, &hash, &dir.path().join("adapter")).unwrap();

        let mut reloaded = base.clone();
        load_adapter(&mut reloaded, &hash, &dir.path().join("adapter")).unwrap();
        assert_eq!(reloaded, adapted);

        let other = Transformer::<f32>::init(tiny(), 4).unwrap();
        let other_hash = save_base(&other, &dir.path().join("other")).unwrap();
        let mut wrong = other.clone();
        let err = load_adapter(&mut wrong, &other_hash, &dir.path().join("adapter")).unwrap_err();
        assert!(matches!(err, Error::BaseHashMismatch { .. }));
    }

    #[test]
    fn truncated_blob_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let model = Transformer::<f32>::init(tiny(), 3).unwrap();
        save_base(&model, dir.path()).unwrap();
        let blob = dir.path().join(BASE_BLOB);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_base::<f32>(dir.path()).is_err());
    }
}
