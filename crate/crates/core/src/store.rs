//! On-disk formats: encoder checkpoints, embedding tables, and dataset
//! manifests.
//!
//! Checkpoint (`.tclp`): magic `TCLP`, version `u32` LE, header length
//! `u64` LE, a UTF-8 JSON header (space-padded so the payload starts on an
//! 8-byte boundary), then a payload of f32 LE tensor data. Every tensor
//! offset in the directory is 8-byte aligned relative to the payload start.
//!
//! Embedding table (`.temb`): magic `TEMB`, version `u32` LE, dim `u32` LE,
//! count `u64` LE, then `count` records of `id_len u32 LE, id bytes,
//! dim x f32 LE`.
//!
//! Manifest (`.jsonl`): one JSON object per line with `id`, `wav_path`, and
//! an optional `label`. Relative paths resolve against the manifest's
//! directory.
//!
//! All writers go through a temporary sibling file and an atomic rename, so
//! a crash never leaves a half-written artifact at the target path.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::{PhiNetConfig, StudentEncoder};
use crate::error::{Error, Result};
use crate::frontend::MelConfig;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const TCLP_MAGIC: &[u8; 4] = b"TCLP";
pub const TCLP_VERSION: u32 = 1;
pub const TEMB_MAGIC: &[u8; 4] = b"TEMB";
pub const TEMB_VERSION: u32 = 1;

/// Provenance of a physically pruned checkpoint. The projection in the
/// payload is already reduced to `r` rows; `indices` records which of the
/// original `full_dim` latent coordinates survived, in ranking order, so
/// the text side of a classifier can be cut down to match.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneInfo {
    pub r: usize,
    pub indices: Vec<usize>,
    pub full_dim: usize,
}

/// Frontend settings a checkpoint was trained with, restored verbatim so
/// inference reproduces the training features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub mel: MelConfig,
    pub crop_seconds: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self { mel: MelConfig::default(), crop_seconds: 5.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the payload start; always a multiple of 8.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: PhiNetConfig,
    pub preset: Option<String>,
    pub seed: u64,
    pub frontend: FrontendConfig,
    pub prune: Option<PruneInfo>,
    pub tensors: Vec<TensorEntry>,
}

/// Everything in the header except the tensor directory, which the writer
/// derives.
#[derive(Clone, Debug)]
pub struct CheckpointMeta {
    pub preset: Option<String>,
    pub seed: u64,
    pub frontend: FrontendConfig,
    pub prune: Option<PruneInfo>,
}

impl Default for CheckpointMeta {
    fn default() -> Self {
        Self { preset: None, seed: 0, frontend: FrontendConfig::default(), prune: None }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn align8(n: usize) -> usize {
    (n + 7) & !7
}

/// Serializes a checkpoint from explicit parts. The tensor directory is
/// built here; `header.tensors` on input is ignored.
pub fn write_tclp(
    path: &Path,
    mut header: CheckpointHeader,
    tensors: &[(String, Tensor<f32>)],
) -> Result<()> {
    let mut offset = 0usize;
    header.tensors = tensors
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset: offset as u64 };
            offset = align8(offset + 4 * t.numel());
            e
        })
        .collect();
    let payload_len = offset;

    let mut json = serde_json::to_vec(&header)
        .map_err(|e| Error::format(format!("checkpoint header serialization failed: {e}")))?;
    json.resize(align8(json.len()), b' ');

    let mut out = Vec::with_capacity(16 + json.len() + payload_len);
    out.extend_from_slice(TCLP_MAGIC);
    out.extend_from_slice(&TCLP_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let payload_start = out.len();
    out.resize(payload_start + payload_len, 0);
    for (entry, (_, t)) in header.tensors.iter().zip(tensors) {
        let base = payload_start + entry.offset as usize;
        for (i, v) in t.data().iter().enumerate() {
            out[base + 4 * i..base + 4 * i + 4].copy_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &out)
}

/// Reads and fully validates a checkpoint file.
pub fn read_tclp(path: &Path) -> Result<(CheckpointHeader, Vec<(String, Tensor<f32>)>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path.display();
    if bytes.len() < 16 {
        return Err(Error::format(format!(
            "{name}: file is {} bytes, shorter than the 16-byte preamble",
            bytes.len()
        )));
    }
    if &bytes[0..4] != TCLP_MAGIC {
        return Err(Error::format(format!("{name}: missing TCLP magic at byte 0")));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != TCLP_VERSION {
        return Err(Error::format(format!(
            "{name}: checkpoint version {version} found, {TCLP_VERSION} expected"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if 16 + header_len > bytes.len() {
        return Err(Error::format(format!(
            "{name}: header length {header_len} overruns the {}-byte file",
            bytes.len()
        )));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| Error::format(format!("{name}: header JSON is invalid: {e}")))?;

    let payload = &bytes[16 + header_len..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let numel: usize = entry.shape.iter().product();
        let offset = entry.offset as usize;
        if offset % 8 != 0 {
            return Err(Error::format(format!(
                "{name}: tensor {:?} offset {offset} is not 8-byte aligned",
                entry.name
            )));
        }
        let end = offset + 4 * numel;
        if end > payload.len() {
            return Err(Error::format(format!(
                "{name}: tensor {:?} spans payload bytes {offset}..{end} but the payload holds {}",
                entry.name,
                payload.len()
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let b = &payload[offset + 4 * i..offset + 4 * i + 4];
            let v = f32::from_le_bytes(b.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format(format!(
                    "{name}: tensor {:?} holds a non-finite value at element {i}; \
                     the payload is corrupt",
                    entry.name
                )));
            }
            data.push(v);
        }
        tensors.push((
            entry.name.clone(),
            Tensor::from_vec(entry.shape.clone(), data, &format!("tensor {:?}", entry.name))?,
        ));
    }
    Ok((header, tensors))
}

/// Saves an encoder with its metadata. Values are stored as f32 regardless
/// of the in-memory scalar width.
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    enc: &StudentEncoder<S>,
    meta: &CheckpointMeta,
) -> Result<()> {
    if let Some(p) = &meta.prune {
        validate_prune(p, enc.latent_dim())?;
    }
    let header = CheckpointHeader {
        config: enc.config().clone(),
        preset: meta.preset.clone(),
        seed: meta.seed,
        frontend: meta.frontend.clone(),
        prune: meta.prune.clone(),
        tensors: Vec::new(),
    };
    let tensors: Vec<(String, Tensor<f32>)> =
        enc.tensors().map(|(n, t)| (n.to_string(), t.cast::<f32>())).collect();
    write_tclp(path, header, &tensors)
}

fn validate_prune(p: &PruneInfo, latent_dim: usize) -> Result<()> {
    if p.r == 0 || p.r > p.full_dim {
        return Err(Error::contract(format!(
            "pruned width {} must be in 1..={}",
            p.r, p.full_dim
        )));
    }
    if p.r != latent_dim {
        return Err(Error::contract(format!(
            "prune metadata says r = {} but the checkpoint's latent width is {latent_dim}",
            p.r
        )));
    }
    if p.indices.len() != p.r {
        return Err(Error::format(format!(
            "prune metadata lists {} indices but r = {}",
            p.indices.len(),
            p.r
        )));
    }
    let mut seen = BTreeSet::new();
    for &i in &p.indices {
        if i >= p.full_dim {
            return Err(Error::format(format!(
                "prune index {i} is outside the original {}-wide latent space",
                p.full_dim
            )));
        }
        if !seen.insert(i) {
            return Err(Error::format(format!("prune index {i} is listed twice")));
        }
    }
    Ok(())
}

/// Loads a checkpoint into an encoder of the requested scalar width.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(StudentEncoder<S>, CheckpointHeader)> {
    let (header, tensors) = read_tclp(path)?;
    if let Some(p) = &header.prune {
        validate_prune(p, header.config.latent_dim)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    }
    let mut enc = StudentEncoder::<S>::new(header.config.clone(), 0)?;
    let expected: BTreeSet<String> = enc.tensor_names().into_iter().collect();
    let found: BTreeSet<String> = tensors.iter().map(|(n, _)| n.clone()).collect();
    if expected != found {
        let missing: Vec<_> = expected.difference(&found).cloned().collect();
        let extra: Vec<_> = found.difference(&expected).cloned().collect();
        return Err(Error::format(format!(
            "{}: tensor directory does not match the architecture \
             (missing: {missing:?}, unexpected: {extra:?})",
            path.display()
        )));
    }
    if tensors.len() != expected.len() {
        return Err(Error::format(format!(
            "{}: tensor directory lists {} entries, {} expected (duplicate names)",
            path.display(),
            tensors.len(),
            expected.len()
        )));
    }
    for (name, t) in tensors {
        enc.set_tensor(&name, t.cast::<S>())
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    }
    Ok((enc, header))
}

/// Embedding table: ids paired with fixed-width vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub entries: Vec<(String, Vec<f32>)>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Self {
        Self { dim, entries: Vec::new() }
    }

    pub fn push(&mut self, id: String, vector: Vec<f32>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::contract(format!(
                "embedding for {id:?} has {} values, table dim is {}",
                vector.len(),
                self.dim
            )));
        }
        self.entries.push((id, vector));
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.entries.iter().find(|(n, _)| n == id).map(|(_, v)| v.as_slice())
    }
}

pub fn write_temb(path: &Path, table: &EmbeddingTable) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(TEMB_MAGIC);
    out.extend_from_slice(&TEMB_VERSION.to_le_bytes());
    out.extend_from_slice(&(table.dim as u32).to_le_bytes());
    out.extend_from_slice(&(table.entries.len() as u64).to_le_bytes());
    for (id, vec) in &table.entries {
        if vec.len() != table.dim {
            return Err(Error::contract(format!(
                "embedding for {id:?} has {} values, table dim is {}",
                vec.len(),
                table.dim
            )));
        }
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for v in vec {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &out)
}

pub fn read_temb(path: &Path) -> Result<EmbeddingTable> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path.display();
    if bytes.len() < 20 {
        return Err(Error::format(format!(
            "{name}: file is {} bytes, shorter than the 20-byte preamble",
            bytes.len()
        )));
    }
    if &bytes[0..4] != TEMB_MAGIC {
        return Err(Error::format(format!("{name}: missing TEMB magic at byte 0")));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != TEMB_VERSION {
        return Err(Error::format(format!(
            "{name}: embedding table version {version} found, {TEMB_VERSION} expected"
        )));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(Error::format(format!("{name}: embedding dim is zero")));
    }

    let mut pos = 20usize;
    let mut table = EmbeddingTable::new(dim);
    let mut seen = BTreeSet::new();
    for rec in 0..count {
        if pos + 4 > bytes.len() {
            return Err(Error::format(format!(
                "{name}: truncated at byte {pos} while reading record {rec}"
            )));
        }
        let id_len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        if pos + id_len + 4 * dim > bytes.len() {
            return Err(Error::format(format!(
                "{name}: truncated at byte {pos} while reading record {rec}"
            )));
        }
        let id = std::str::from_utf8(&bytes[pos..pos + id_len])
            .map_err(|_| Error::format(format!("{name}: record {rec} id is not UTF-8")))?
            .to_string();
        if id.is_empty() {
            return Err(Error::format(format!("{name}: record {rec} has an empty id")));
        }
        if !seen.insert(id.clone()) {
            return Err(Error::data(format!("{name}: duplicate embedding id {id:?}")));
        }
        pos += id_len;
        let mut vec = Vec::with_capacity(dim);
        for i in 0..dim {
            let v = f32::from_le_bytes(bytes[pos + 4 * i..pos + 4 * i + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::format(format!(
                    "{name}: record {rec} ({id:?}) holds a non-finite value at element {i}"
                )));
            }
            vec.push(v);
        }
        pos += 4 * dim;
        table.entries.push((id, vec));
    }
    if pos != bytes.len() {
        return Err(Error::format(format!(
            "{name}: {} trailing bytes after the last record",
            bytes.len() - pos
        )));
    }
    Ok(table)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub wav_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// Dataset listing, one clip per line.
#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    root: PathBuf,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        let mut entries = Vec::new();
        let mut seen = BTreeSet::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| {
                Error::format(format!("{}:{}: bad manifest line: {e}", path.display(), lineno + 1))
            })?;
            if entry.id.is_empty() {
                return Err(Error::format(format!(
                    "{}:{}: manifest entry has an empty id",
                    path.display(),
                    lineno + 1
                )));
            }
            if !seen.insert(entry.id.clone()) {
                return Err(Error::data(format!(
                    "{}:{}: duplicate clip id {:?}",
                    path.display(),
                    lineno + 1,
                    entry.id
                )));
            }
            entries.push(entry);
        }
        if entries.is_empty() {
            return Err(Error::data(format!(
                "{}: manifest lists no clips",
                path.display()
            )));
        }
        Ok(Self { entries, root })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
            out.push('\n');
        }
        write_atomic(path, out.as_bytes())
    }

    pub fn from_entries(entries: Vec<ManifestEntry>, root: PathBuf) -> Self {
        Self { entries, root }
    }

    /// Absolute path of one clip; relative paths resolve against the
    /// manifest's directory.
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        let p = Path::new(&entry.wav_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Distinct labels in first-appearance order; errors if any entry has
    /// no label.
    pub fn labels_required(&self) -> Result<Vec<String>> {
        let mut labels = Vec::new();
        for e in &self.entries {
            match &e.label {
                Some(l) => {
                    if !labels.contains(l) {
                        labels.push(l.clone());
                    }
                }
                None => {
                    return Err(Error::data(format!(
                        "clip {:?} has no label; this operation needs labeled data",
                        e.id
                    )))
                }
            }
        }
        Ok(labels)
    }
}

/// Digest over manifest ids and paths, used to bind derived artifacts to
/// the dataset they came from.
pub fn manifest_fingerprint(m: &DatasetManifest) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for e in &m.entries {
        h.update(e.id.as_bytes());
        h.update([0u8]);
        h.update(e.wav_path.as_bytes());
        h.update([0u8]);
    }
    let digest = h.finalize();
    digest.iter().take(16).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{PhiNetConfig, StudentEncoder};

    fn tiny_encoder() -> StudentEncoder<f32> {
        StudentEncoder::new(PhiNetConfig::preset("tiny").unwrap(), 42).unwrap()
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.tclp");
        // A physically pruned checkpoint: 3-wide projection cut from an
        // 8-wide latent space.
        let cfg = PhiNetConfig::new(0.25, 0.75, 2.0, 2, 3).unwrap();
        let enc = StudentEncoder::<f32>::new(cfg, 42).unwrap();
        let meta = CheckpointMeta {
            preset: Some("tiny".into()),
            seed: 42,
            frontend: FrontendConfig::default(),
            prune: Some(PruneInfo { r: 3, indices: vec![5, 1, 2], full_dim: 8 }),
        };
        save_checkpoint(&path, &enc, &meta).unwrap();
        let (loaded, header) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(header.preset.as_deref(), Some("tiny"));
        assert_eq!(header.seed, 42);
        assert_eq!(header.prune, meta.prune);
        assert_eq!(header.config, *enc.config());
        for ((na, ta), (nb, tb)) in enc.tensors().zip(loaded.tensors()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data(), "{na}");
        }
        assert_eq!(enc.fingerprint(), loaded.fingerprint());
    }

    #[test]
    fn tensor_offsets_are_aligned() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.tclp");
        save_checkpoint(&path, &tiny_encoder(), &CheckpointMeta::default()).unwrap();
        let (header, _) = read_tclp(&path).unwrap();
        for e in &header.tensors {
            assert_eq!(e.offset % 8, 0, "{}", e.name);
        }
        // Payload must start on an 8-byte boundary too.
        let bytes = std::fs::read(&path).unwrap();
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        assert_eq!((16 + header_len) % 8, 0);
    }

    #[test]
    fn version_mismatch_reports_found_and_expected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.tclp");
        save_checkpoint(&path, &tiny_encoder(), &CheckpointMeta::default()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 9;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("version 9 found, 1 expected"), "{msg}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn corrupt_payload_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.tclp");
        save_checkpoint(&path, &tiny_encoder(), &CheckpointMeta::default()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // Stamp a NaN into the first tensor's data.
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let base = 16 + header_len;
        bytes[base..base + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("non-finite"), "{err}");
    }

    #[test]
    fn truncated_checkpoint_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.tclp");
        save_checkpoint(&path, &tiny_encoder(), &CheckpointMeta::default()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 16]).unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("payload"), "{err}");
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = load_checkpoint::<f32>(Path::new("/nonexistent/enc.tclp")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn mismatched_directory_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.tclp");
        let enc = tiny_encoder();
        let mut tensors: Vec<(String, Tensor<f32>)> =
            enc.tensors().map(|(n, t)| (n.to_string(), t.clone())).collect();
        tensors.push(("rogue.weight".into(), Tensor::full(&[2], 1.0f32)));
        let header = CheckpointHeader {
            config: enc.config().clone(),
            preset: None,
            seed: 0,
            frontend: FrontendConfig::default(),
            prune: None,
            tensors: Vec::new(),
        };
        write_tclp(&path, header, &tensors).unwrap();
        let err = load_checkpoint::<f32>(&path).unwrap_err();
        assert!(err.to_string().contains("rogue.weight"), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn invalid_prune_metadata_is_rejected() {
        let enc = tiny_encoder();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.tclp");
        // The tiny encoder is 8-wide, so a valid record needs r = 8.
        for bad in [
            PruneInfo { r: 0, indices: vec![], full_dim: 16 },
            PruneInfo { r: 3, indices: vec![0, 1, 2], full_dim: 16 },
            PruneInfo { r: 8, indices: vec![1; 8], full_dim: 16 },
            PruneInfo { r: 8, indices: (0..8).collect(), full_dim: 4 },
            PruneInfo { r: 8, indices: vec![0, 1, 2, 3, 4, 5, 6, 99], full_dim: 16 },
            PruneInfo { r: 8, indices: (0..7).collect(), full_dim: 16 },
        ] {
            let meta = CheckpointMeta { prune: Some(bad), ..CheckpointMeta::default() };
            assert!(save_checkpoint(&path, &enc, &meta).is_err());
        }
    }

    #[test]
    fn embedding_table_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.temb");
        let mut table = EmbeddingTable::new(3);
        table.push("a".into(), vec![1.0, 2.0, 3.0]).unwrap();
        table.push("b/с юникодом".into(), vec![-1.0, 0.5, 0.25]).unwrap();
        write_temb(&path, &table).unwrap();
        let back = read_temb(&path).unwrap();
        assert_eq!(back, table);
        assert_eq!(back.get("a"), Some([1.0f32, 2.0, 3.0].as_slice()));
    }

    #[test]
    fn embedding_table_rejects_duplicates_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.temb");
        let mut table = EmbeddingTable::new(2);
        table.push("x".into(), vec![1.0, 2.0]).unwrap();
        table.push("x".into(), vec![3.0, 4.0]).unwrap();
        write_temb(&path, &table).unwrap();
        let err = read_temb(&path).unwrap_err();
        assert_eq!(err.exit_code(), 5);
        assert!(err.to_string().contains("duplicate"), "{err}");

        let mut table = EmbeddingTable::new(2);
        table.push("x".into(), vec![1.0, 2.0]).unwrap();
        write_temb(&path, &table).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let err = read_temb(&path).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("truncated at byte"), "{err}");
    }

    #[test]
    fn embedding_table_rejects_trailing_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.temb");
        let mut table = EmbeddingTable::new(1);
        table.push("x".into(), vec![0.5]).unwrap();
        write_temb(&path, &table).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        let err = read_temb(&path).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }

    #[test]
    fn manifest_parses_resolves_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"id":"c1","wav_path":"audio/c1.wav","label":"dog"}"#,
                "\n\n",
                r#"{"id":"c2","wav_path":"/abs/c2.wav"}"#,
                "\n",
            ),
        )
        .unwrap();
        let m = DatasetManifest::read(&path).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.resolve(&m.entries[0]), dir.path().join("audio/c1.wav"));
        assert_eq!(m.resolve(&m.entries[1]), PathBuf::from("/abs/c2.wav"));
        assert_eq!(m.entries[0].label.as_deref(), Some("dog"));

        let err = m.labels_required().unwrap_err();
        assert_eq!(err.exit_code(), 5);
        assert!(err.to_string().contains("c2"), "{err}");
    }

    #[test]
    fn manifest_rejects_bad_lines_with_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        std::fs::write(&path, "{\"id\":\"a\",\"wav_path\":\"a.wav\"}\nnot json\n").unwrap();
        let err = DatasetManifest::read(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
        assert_eq!(err.exit_code(), 3);

        std::fs::write(
            &path,
            "{\"id\":\"a\",\"wav_path\":\"a.wav\"}\n{\"id\":\"a\",\"wav_path\":\"b.wav\"}\n",
        )
        .unwrap();
        let err = DatasetManifest::read(&path).unwrap_err();
        assert_eq!(err.exit_code(), 5);

        std::fs::write(&path, "\n\n").unwrap();
        let err = DatasetManifest::read(&path).unwrap_err();
        assert_eq!(err.exit_code(), 5);
        assert!(err.to_string().contains("no clips"), "{err}");
    }

    #[test]
    fn manifest_fingerprint_tracks_content() {
        let a = DatasetManifest::from_entries(
            vec![ManifestEntry { id: "x".into(), wav_path: "x.wav".into(), label: None }],
            PathBuf::from("."),
        );
        let b = DatasetManifest::from_entries(
            vec![ManifestEntry { id: "y".into(), wav_path: "x.wav".into(), label: None }],
            PathBuf::from("."),
        );
        assert_ne!(manifest_fingerprint(&a), manifest_fingerprint(&b));
        assert_eq!(manifest_fingerprint(&a), manifest_fingerprint(&a));
    }

    #[test]
    fn writes_are_atomic_against_existing_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.temb");
        let mut table = EmbeddingTable::new(1);
        table.push("x".into(), vec![0.5]).unwrap();
        write_temb(&path, &table).unwrap();
        table.push("y".into(), vec![0.7]).unwrap();
        write_temb(&path, &table).unwrap();
        let back = read_temb(&path).unwrap();
        assert_eq!(back.entries.len(), 2);
        assert!(!dir.path().join("t.temb.tmp").exists());
    }
}
