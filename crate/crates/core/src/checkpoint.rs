//! `.stpk` checkpoint container.
//!
//! Layout: the magic bytes `STPK\x01`, a little-endian `u64` manifest length,
//! a UTF-8 JSON manifest, then a blob of little-endian `f64` values. Every
//! numeric array (model tensors and preprocessing arrays) lives in the blob so
//! a save/load round trip is bit-exact.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::autoencoder::{ModelParams, ModelShape};
use crate::error::{Error, Result};
use crate::optim::TrainConfig;
use crate::preprocess::{PreprocessState, TransformKind};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 5] = b"STPK\x01";
pub const FORMAT_VERSION: u32 = 1;

/// Location of one tensor inside the blob.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

/// Non-numeric part of a preprocessing pipeline.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineMeta {
    pub transform_kind: TransformKind,
    pub selected_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub blob_len: u64,
    pub blob_crc32: u32,
    pub model: ModelShape,
    pub config: TrainConfig,
    pub rna_pipeline: PipelineMeta,
    pub protein_pipeline: PipelineMeta,
    pub tensors: Vec<TensorEntry>,
}

/// Everything needed to predict with a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ModelParams<T>,
    pub config: TrainConfig,
    pub rna_pipeline: PreprocessState<T>,
    pub protein_pipeline: PreprocessState<T>,
}

fn manifest_err(msg: impl Into<String>) -> Error {
    Error::Manifest(msg.into())
}

struct BlobWriter {
    tensors: Vec<TensorEntry>,
    blob: Vec<u8>,
}

impl BlobWriter {
    fn push<T: Scalar>(&mut self, name: String, shape: Vec<usize>, values: impl IntoIterator<Item = T>) {
        self.tensors.push(TensorEntry {
            name,
            shape,
            byte_offset: self.blob.len() as u64,
        });
        for v in values {
            self.blob.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }

    fn push_pipeline<T: Scalar>(&mut self, prefix: &str, state: &PreprocessState<T>) {
        self.push(format!("{prefix}.library_size"), vec![1], [state.library_size]);
        self.push(format!("{prefix}.per_spot_scale"), vec![state.per_spot_scale.len()], state.per_spot_scale.iter().copied());
        self.push(format!("{prefix}.pca_mean"), vec![state.pca_mean.len()], state.pca_mean.iter().copied());
        self.push(format!("{prefix}.pca_components"), state.pca_components.shape().to_vec(), state.pca_components.iter().copied());
        self.push(format!("{prefix}.explained_variance"), vec![state.explained_variance.len()], state.explained_variance.iter().copied());
    }
}

/// Serializes a checkpoint to bytes.
pub fn to_bytes<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<Vec<u8>> {
    if !ckpt.params.is_finite() {
        return Err(Error::InvalidValue("refusing to save non-finite parameters".into()));
    }
    let mut w = BlobWriter {
        tensors: Vec::new(),
        blob: Vec::new(),
    };
    for (info, data) in ckpt.params.named_tensors() {
        w.push(info.name, info.shape, data.iter().copied());
    }
    w.push_pipeline("rna", &ckpt.rna_pipeline);
    w.push_pipeline("protein", &ckpt.protein_pipeline);
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        blob_len: w.blob.len() as u64,
        blob_crc32: crc32fast::hash(&w.blob),
        model: ckpt.params.shape(),
        config: ckpt.config.clone(),
        rna_pipeline: PipelineMeta {
            transform_kind: ckpt.rna_pipeline.transform_kind,
            selected_names: ckpt.rna_pipeline.selected_names.clone(),
        },
        protein_pipeline: PipelineMeta {
            transform_kind: ckpt.protein_pipeline.transform_kind,
            selected_names: ckpt.protein_pipeline.selected_names.clone(),
        },
        tensors: w.tensors,
    };
    assemble(&manifest, &w.blob)
}

/// Joins a manifest and a blob into the on-disk layout.
pub fn assemble(manifest: &Manifest, blob: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(manifest).map_err(|e| manifest_err(e.to_string()))?;
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(blob);
    Ok(out)
}

/// Splits raw bytes into the parsed manifest and the blob, checking the CRC.
pub fn split(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    let header = MAGIC.len() + 8;
    if bytes.len() < header {
        return Err(manifest_err(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(manifest_err("bad magic bytes"));
    }
    let len_bytes: [u8; 8] = bytes[MAGIC.len()..header].try_into().expect("8 bytes");
    let json_len = u64::from_le_bytes(len_bytes);
    let rest = &bytes[header..];
    if json_len > rest.len() as u64 {
        return Err(manifest_err(format!(
            "manifest length {json_len} exceeds remaining {} bytes",
            rest.len()
        )));
    }
    let (json, blob) = rest.split_at(json_len as usize);
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| manifest_err(e.to_string()))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(manifest_err(format!("unsupported format version {}", manifest.format_version)));
    }
    let crc = crc32fast::hash(blob);
    if blob.len() as u64 != manifest.blob_len || crc != manifest.blob_crc32 {
        return Err(Error::Checksum(format!(
            "blob has {} bytes with crc {crc:08x}, manifest expects {} bytes with crc {:08x}",
            blob.len(),
            manifest.blob_len,
            manifest.blob_crc32
        )));
    }
    Ok((manifest, blob))
}

/// Validated tensor lookup over a blob.
struct BlobReader<'a> {
    blob: &'a [u8],
    index: HashMap<&'a str, &'a TensorEntry>,
}

impl<'a> BlobReader<'a> {
    fn new(manifest: &'a Manifest, blob: &'a [u8]) -> Result<Self> {
        let mut index = HashMap::new();
        let mut spans = Vec::with_capacity(manifest.tensors.len());
        for entry in &manifest.tensors {
            if index.insert(entry.name.as_str(), entry).is_some() {
                return Err(manifest_err(format!("tensor {} listed twice", entry.name)));
            }
            let bytes = entry
                .shape
                .iter()
                .try_fold(8u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| manifest_err(format!("tensor {} is too large", entry.name)))?;
            let end = entry.byte_offset.checked_add(bytes).filter(|&e| e <= blob.len() as u64);
            if entry.byte_offset % 8 != 0 || end.is_none() {
                return Err(manifest_err(format!(
                    "tensor {} with shape {:?} at offset {} does not fit a {}-byte blob",
                    entry.name,
                    entry.shape,
                    entry.byte_offset,
                    blob.len()
                )));
            }
            spans.push((entry.byte_offset, bytes));
        }
        spans.sort_unstable();
        let mut covered = 0u64;
        for (start, len) in spans {
            if start != covered {
                return Err(manifest_err(format!("tensors overlap or leave a gap at byte {covered}")));
            }
            covered += len;
        }
        if covered != blob.len() as u64 {
            return Err(manifest_err(format!(
                "tensor shapes cover {covered} bytes of a {}-byte blob",
                blob.len()
            )));
        }
        Ok(Self { blob, index })
    }

    fn read<T: Scalar>(&self, name: &str, shape: &[usize]) -> Result<Vec<T>> {
        let entry = self
            .index
            .get(name)
            .ok_or_else(|| manifest_err(format!("missing tensor {name}")))?;
        if entry.shape != shape {
            return Err(manifest_err(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                entry.shape
            )));
        }
        let len: usize = shape.iter().product();
        let start = entry.byte_offset as usize;
        Ok(self.blob[start..start + 8 * len]
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect())
    }

    fn read_dynamic<T: Scalar>(&self, name: &str) -> Result<(Vec<usize>, Vec<T>)> {
        let shape = self
            .index
            .get(name)
            .ok_or_else(|| manifest_err(format!("missing tensor {name}")))?
            .shape
            .clone();
        let values = self.read(name, &shape)?;
        Ok((shape, values))
    }

    fn pipeline<T: Scalar>(&self, prefix: &str, meta: &PipelineMeta) -> Result<PreprocessState<T>> {
        let library_size = self.read::<T>(&format!("{prefix}.library_size"), &[1])?[0];
        let (_, per_spot_scale) = self.read_dynamic(&format!("{prefix}.per_spot_scale"))?;
        let (_, mean) = self.read_dynamic::<T>(&format!("{prefix}.pca_mean"))?;
        let (shape, components) = self.read_dynamic::<T>(&format!("{prefix}.pca_components"))?;
        let (_, explained) = self.read_dynamic::<T>(&format!("{prefix}.explained_variance"))?;
        if shape.len() != 2 || shape[0] != mean.len() || shape[0] != meta.selected_names.len() {
            return Err(manifest_err(format!(
                "{prefix} pipeline: components {shape:?} inconsistent with {} features",
                meta.selected_names.len()
            )));
        }
        Ok(PreprocessState {
            transform_kind: meta.transform_kind,
            selected_names: meta.selected_names.clone(),
            library_size,
            per_spot_scale,
            pca_mean: Array1::from(mean),
            pca_components: Array2::from_shape_vec((shape[0], shape[1]), components)
                .map_err(|e| manifest_err(e.to_string()))?,
            explained_variance: Array1::from(explained),
        })
    }
}

/// Parses a checkpoint from bytes.
pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let (manifest, blob) = split(bytes)?;
    let reader = BlobReader::new(&manifest, blob)?;
    let shape = manifest.model;
    if shape.features == 0 || shape.hidden1 == 0 || shape.hidden2 == 0 || shape.heads == 0 {
        return Err(manifest_err(format!("invalid model shape {shape:?}")));
    }
    let mut params = ModelParams::<T>::zeros(shape);
    let expected: Vec<_> = params.named_tensors().into_iter().map(|(info, _)| info).collect();
    for (info, slot) in expected.iter().zip(params.tensors_mut()) {
        let values = reader.read::<T>(&info.name, &info.shape)?;
        slot.copy_from_slice(&values);
    }
    let rna_pipeline = reader.pipeline("rna", &manifest.rna_pipeline)?;
    let protein_pipeline = reader.pipeline("protein", &manifest.protein_pipeline)?;
    let n_named = expected.len() + 10;
    if manifest.tensors.len() != n_named {
        return Err(manifest_err(format!(
            "manifest lists {} tensors, expected {n_named}",
            manifest.tensors.len()
        )));
    }
    Ok(Checkpoint {
        params,
        config: manifest.config,
        rna_pipeline,
        protein_pipeline,
    })
}

/// Writes the checkpoint atomically (temporary file, then rename).
pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    let bytes = to_bytes(ckpt)?;
    write_atomic(path, &bytes)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Writes `bytes` next to `path` and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidValue(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    let mut file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::Tying;
    use ndarray::array;

    fn pipeline(kind: TransformKind, names: &[&str], spots: usize) -> PreprocessState<f64> {
        let d = names.len();
        PreprocessState {
            transform_kind: kind,
            selected_names: names.iter().map(|s| s.to_string()).collect(),
            library_size: 1234.5,
            per_spot_scale: (0..spots).map(|i| 1.0 / (i as f64 + 3.0)).collect(),
            pca_mean: Array1::from_shape_fn(d, |i| (i as f64).sin()),
            pca_components: Array2::from_shape_fn((d, 2), |(i, j)| ((i * 7 + j) as f64).cos() / 3.0),
            explained_variance: array![2.5, 0.1],
        }
    }

    fn sample(tying: Tying) -> Checkpoint<f64> {
        let params = ModelParams::init(ModelShape::new(2, 5, 4, 2).with_tying(tying), 77).unwrap();
        Checkpoint {
            params,
            config: TrainConfig { seed: 77, epochs: 3, tying, ..TrainConfig::default() },
            rna_pipeline: pipeline(TransformKind::RnaLognormPca, &["g1", "g2", "g3"], 4),
            protein_pipeline: PreprocessState {
                per_spot_scale: Vec::new(),
                library_size: 0.0,
                ..pipeline(TransformKind::ProteinClrPca, &["p1", "p2"], 0)
            },
        }
    }

    fn bits(c: &Checkpoint<f64>) -> Vec<u64> {
        c.params
            .named_tensors()
            .into_iter()
            .flat_map(|(_, t)| t.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for tying in [Tying::Tied, Tying::SharedAttention, Tying::Untied] {
            let ckpt = sample(tying);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("model.stpk");
            save_checkpoint(&ckpt, &path).unwrap();
            let back: Checkpoint<f64> = load_checkpoint(&path).unwrap();
            assert_eq!(bits(&back), bits(&ckpt));
            assert_eq!(back, ckpt);
            assert_eq!(back.params.tying(), tying);
        }
    }

    #[test]
    fn f32_round_trip() {
        let params = ModelParams::<f32>::init(ModelShape::new(2, 3, 3, 1), 5).unwrap();
        let to32 = |s: PreprocessState<f64>| PreprocessState {
            transform_kind: s.transform_kind,
            selected_names: s.selected_names,
            library_size: s.library_size as f32,
            per_spot_scale: s.per_spot_scale.iter().map(|&v| v as f32).collect(),
            pca_mean: s.pca_mean.mapv(|v| v as f32),
            pca_components: s.pca_components.mapv(|v| v as f32),
            explained_variance: s.explained_variance.mapv(|v| v as f32),
        };
        let ckpt = Checkpoint {
            params,
            config: TrainConfig::default(),
            rna_pipeline: to32(pipeline(TransformKind::RnaLognormPca, &["a", "b"], 2)),
            protein_pipeline: to32(pipeline(TransformKind::ProteinClrPca, &["p", "q"], 0)),
        };
        let back: Checkpoint<f32> = from_bytes(&to_bytes(&ckpt).unwrap()).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn truncated_blob_is_a_checksum_error() {
        let bytes = to_bytes(&sample(Tying::Tied)).unwrap();
        let cut = &bytes[..bytes.len() - 8];
        assert!(matches!(from_bytes::<f64>(cut), Err(Error::Checksum(_))));
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 1;
        assert!(matches!(from_bytes::<f64>(&flipped), Err(Error::Checksum(_))));
    }

    #[test]
    fn empty_or_garbage_file_is_a_manifest_error() {
        assert!(matches!(from_bytes::<f64>(&[]), Err(Error::Manifest(_))));
        assert!(matches!(from_bytes::<f64>(b"STPK\x02\0\0\0\0\0\0\0\0"), Err(Error::Manifest(_))));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.stpk");
        std::fs::write(&path, b"").unwrap();
        assert!(matches!(load_checkpoint::<f64>(&path), Err(Error::Manifest(_))));
    }

    #[test]
    fn shape_blob_mismatch_is_a_manifest_error() {
        let bytes = to_bytes(&sample(Tying::Tied)).unwrap();
        let (mut manifest, blob) = split(&bytes).unwrap();
        let blob = blob.to_vec();
        let first = manifest.tensors.iter_mut().find(|t| t.name == "enc_fc.b").unwrap();
        first.shape = vec![first.shape[0] + 1];
        let broken = assemble(&manifest, &blob).unwrap();
        assert!(matches!(from_bytes::<f64>(&broken), Err(Error::Manifest(_))));

        let (mut manifest, _) = split(&bytes).unwrap();
        manifest.tensors.pop();
        let broken = assemble(&manifest, &blob).unwrap();
        assert!(matches!(from_bytes::<f64>(&broken), Err(Error::Manifest(_))));
    }

    #[test]
    fn manifest_order_does_not_matter() {
        let ckpt = sample(Tying::Untied);
        let bytes = to_bytes(&ckpt).unwrap();
        let (mut manifest, blob) = split(&bytes).unwrap();
        let blob = blob.to_vec();
        manifest.tensors.reverse();
        manifest.tensors.swap(0, 3);
        let shuffled = assemble(&manifest, &blob).unwrap();
        assert_ne!(shuffled, bytes);
        let back: Checkpoint<f64> = from_bytes(&shuffled).unwrap();
        assert_eq!(bits(&back), bits(&ckpt));
        assert_eq!(back, ckpt);
    }

    #[test]
    fn tied_tensors_stored_once() {
        let bytes = to_bytes(&sample(Tying::Tied)).unwrap();
        let (manifest, _) = split(&bytes).unwrap();
        let mut names: Vec<&str> = manifest.tensors.iter().map(|t| t.name.as_str()).collect();
        let n = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), n);
        assert!(!names.iter().any(|n| n.starts_with("dec1") || n.starts_with("dec2")));
    }

    #[test]
    fn non_finite_params_refused() {
        let mut ckpt = sample(Tying::Tied);
        ckpt.params.enc_fc_b[0] = f64::NAN;
        assert!(to_bytes(&ckpt).is_err());
    }
}
