//! Byte-level contract tests for the two on-disk formats. The reference
//! fixtures were authored independently from the format description, so
//! they cross-check the reader and writer rather than echoing them.

use std::path::Path;

use tinyclap_core::encoder::{PhiNetConfig, StudentEncoder};
use tinyclap_core::store::{
    read_tclp, read_temb, save_checkpoint, write_temb, CheckpointMeta, EmbeddingTable,
};

/// dim 3; entries "alpha" = [1.0, -2.5, 0.25], "β tone" = [0.5, 0.0, -1.0].
const TEMB_FIXTURE_HEX: &str = "54454d420100000003000000020000000000000005000000616c7068610000803f000020c00000803e07000000ceb220746f6e650000003f00000000000080bf";

/// tiny-config header (preset "tiny", seed 7, default frontend, no prune)
/// with tensors head.bias = [1.5, -2.0, 0.125] at offset 0 and
/// gate = [0.5, 4.0] at offset 16 (12 bytes of bias, aligned up to 16).
const TCLP_FIXTURE_HEX: &str = "54434c500100000050010000000000007b22636f6e666967223a7b22616c706861223a302e32352c2262657461223a302e37352c22745f7a65726f223a322e302c226e756d5f626c6f636b73223a322c226c6174656e745f64696d223a387d2c22707265736574223a2274696e79222c2273656564223a372c2266726f6e74656e64223a7b226d656c223a7b2273616d706c655f72617465223a34343130302c226e5f666674223a313032342c22686f70223a3332302c226e5f6d656c73223a36342c22666d696e223a302e302c22666d6178223a32323035302e307d2c2263726f705f7365636f6e6473223a352e307d2c227072756e65223a6e756c6c2c2274656e736f7273223a5b7b226e616d65223a22686561642e62696173222c227368617065223a5b335d2c226f6666736574223a307d2c7b226e616d65223a2267617465222c227368617065223a5b325d2c226f6666736574223a31367d5d7d200000c03f000000c00000003e000000000000003f00008040";

fn enhex(b: &[u8]) -> String {
    b.iter().map(|x| format!("{x:02x}")).collect()
}

fn unhex(s: &str) -> Vec<u8> {
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(&s[i..i + 2], 16).unwrap())
        .collect()
}

fn write_fixture(dir: &Path, name: &str, hex: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, unhex(hex)).unwrap();
    path
}

fn reference_table() -> EmbeddingTable {
    let mut table = EmbeddingTable::new(3);
    table.push("alpha".into(), vec![1.0, -2.5, 0.25]).unwrap();
    table.push("β tone".into(), vec![0.5, 0.0, -1.0]).unwrap();
    table
}

#[test]
fn independently_authored_embedding_file_parses() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_fixture(dir.path(), "ref.temb", TEMB_FIXTURE_HEX);
    let table = read_temb(&path).unwrap();
    assert_eq!(table, reference_table());
}

#[test]
fn embedding_writer_reproduces_the_reference_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out.temb");
    write_temb(&path, &reference_table()).unwrap();
    let written = std::fs::read(&path).unwrap();
    assert_eq!(written, unhex(TEMB_FIXTURE_HEX), "writer drifted from the format");
}

#[test]
fn independently_authored_checkpoint_parses() {
    let dir = tempfile::tempdir().unwrap();
    let path = write_fixture(dir.path(), "ref.tclp", TCLP_FIXTURE_HEX);
    let (header, tensors) = read_tclp(&path).unwrap();
    assert_eq!(header.preset.as_deref(), Some("tiny"));
    assert_eq!(header.seed, 7);
    assert_eq!(header.config.latent_dim, 8);
    assert!(header.prune.is_none());
    assert_eq!(header.frontend.crop_seconds, 5.0);
    assert_eq!(header.frontend.mel.n_fft, 1024);

    assert_eq!(tensors.len(), 2);
    assert_eq!(tensors[0].0, "head.bias");
    assert_eq!(tensors[0].1.data(), &[1.5f32, -2.0, 0.125]);
    assert_eq!(tensors[1].0, "gate");
    assert_eq!(tensors[1].1.data(), &[0.5f32, 4.0]);
}

#[test]
fn checkpoint_preamble_is_the_documented_layout() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.tclp");
    let enc = StudentEncoder::<f32>::new(PhiNetConfig::preset("tiny").unwrap(), 3).unwrap();
    save_checkpoint(&path, &enc, &CheckpointMeta::default()).unwrap();
    let bytes = std::fs::read(&path).unwrap();

    assert_eq!(&bytes[0..4], b"TCLP");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    assert_eq!(header_len % 8, 0, "header must pad to an 8-byte boundary");
    let json = &bytes[16..16 + header_len];
    serde_json::from_slice::<serde_json::Value>(json).unwrap();
    assert_eq!((16 + header_len) % 8, 0, "payload must start 8-aligned");
}

#[test]
fn identical_saves_are_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let enc = StudentEncoder::<f32>::new(PhiNetConfig::preset("tiny").unwrap(), 9).unwrap();
    let a = dir.path().join("a.tclp");
    let b = dir.path().join("b.tclp");
    save_checkpoint(&a, &enc, &CheckpointMeta::default()).unwrap();
    save_checkpoint(&b, &enc, &CheckpointMeta::default()).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn corrupted_files_map_to_the_documented_exit_codes() {
    let dir = tempfile::tempdir().unwrap();

    // Wrong magic: format error, message names found and expected.
    let mut bad_magic = unhex(TEMB_FIXTURE_HEX);
    bad_magic[0..4].copy_from_slice(b"NOPE");
    let p = dir.path().join("magic.temb");
    std::fs::write(&p, &bad_magic).unwrap();
    let err = read_temb(&p).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("TEMB"), "{err}");

    // Unsupported version.
    let mut bad_version = unhex(TEMB_FIXTURE_HEX);
    bad_version[4] = 9;
    let p = dir.path().join("version.temb");
    std::fs::write(&p, &bad_version).unwrap();
    let err = read_temb(&p).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains('9'), "{err}");

    // Truncation mid-record.
    let whole = unhex(TEMB_FIXTURE_HEX);
    let p = dir.path().join("cut.temb");
    std::fs::write(&p, &whole[..whole.len() - 5]).unwrap();
    let err = read_temb(&p).unwrap_err();
    assert_eq!(err.exit_code(), 3);

    // Duplicate id: a data error, not a format error.
    let mut table = EmbeddingTable::new(2);
    table.push("same".into(), vec![1.0, 2.0]).unwrap();
    let p = dir.path().join("dup.temb");
    write_temb(&p, &table).unwrap();
    let mut bytes = std::fs::read(&p).unwrap();
    // Bump the count and append a second record with the same id.
    bytes[12] = 2;
    let mut extra = (4u32).to_le_bytes().to_vec();
    extra.extend_from_slice(b"same");
    extra.extend_from_slice(&1.0f32.to_le_bytes());
    extra.extend_from_slice(&2.0f32.to_le_bytes());
    bytes.extend_from_slice(&extra);
    std::fs::write(&p, &bytes).unwrap();
    let err = read_temb(&p).unwrap_err();
    assert_eq!(err.exit_code(), 5);
    assert!(err.to_string().contains("same"), "{err}");

    // Non-finite checkpoint payload: corrupt file, format error.
    let mut nan_payload = unhex(TCLP_FIXTURE_HEX);
    let n = nan_payload.len();
    nan_payload[n - 8..n - 4].copy_from_slice(&f32::NAN.to_le_bytes());
    let p = dir.path().join("nan.tclp");
    std::fs::write(&p, &nan_payload).unwrap();
    let err = read_tclp(&p).unwrap_err();
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("corrupt"), "{err}");

    // Tensor offset pointing outside the payload.
    let hacked = String::from(TCLP_FIXTURE_HEX).replace(
        &enhex(b"\"offset\":16"),
        &enhex(b"\"offset\":99"),
    );
    let p = dir.path().join("oob.tclp");
    std::fs::write(&p, unhex(&hacked)).unwrap();
    let err = read_tclp(&p).unwrap_err();
    assert_eq!(err.exit_code(), 3);

    // Misaligned tensor offset.
    let hacked = String::from(TCLP_FIXTURE_HEX).replace(
        &enhex(b"\"offset\":16"),
        &enhex(b"\"offset\":17"),
    );
    let p = dir.path().join("align.tclp");
    std::fs::write(&p, unhex(&hacked)).unwrap();
    let err = read_tclp(&p).unwrap_err();
    assert_eq!(err.exit_code(), 3);

    // Missing file: an I/O problem, exit code 2.
    let err = read_temb(&dir.path().join("absent.temb")).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
