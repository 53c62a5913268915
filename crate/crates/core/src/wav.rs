//! Minimal RIFF/WAVE decoding and encoding.
//!
//! The reader accepts little-endian integer PCM at 16, 24, or 32 bits and
//! 32-bit IEEE float, mixes multi-channel streams to mono by averaging, and
//! scales everything to `[-1, 1]`. Anything else is rejected with a format
//! error naming the chunk (and value) that failed. The writer exists for
//! fixtures and synthetic corpora; it emits mono 16-bit PCM or 32-bit float.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug)]
pub struct WavData {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(format!(
                "{}: truncated while reading {what} at byte {}",
                self.path, self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

struct Format {
    tag: u16,
    channels: u16,
    sample_rate: u32,
    bits: u16,
}

/// Reads a WAV file into mono `[-1, 1]` samples.
pub fn read_wav(path: &Path) -> Result<WavData> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes, &path.display().to_string())
}

/// Decodes WAV bytes; `name` labels error messages.
pub fn decode_wav(bytes: &[u8], name: &str) -> Result<WavData> {
    let mut c = Cursor { bytes, pos: 0, path: name.to_string() };
    if c.take(4, "RIFF magic")? != b"RIFF" {
        return Err(Error::format(format!("{name}: missing RIFF magic in header chunk")));
    }
    let _riff_size = c.u32("RIFF size")?;
    if c.take(4, "WAVE magic")? != b"WAVE" {
        return Err(Error::format(format!("{name}: RIFF form type is not WAVE")));
    }

    let mut fmt: Option<Format> = None;
    let mut data: Option<&[u8]> = None;
    while c.pos < bytes.len() {
        let id: [u8; 4] = c.take(4, "chunk id")?.try_into().unwrap();
        let size = c.u32("chunk size")? as usize;
        let body = c.take(size, &format!("chunk {:?}", String::from_utf8_lossy(&id)))?;
        if size % 2 == 1 && c.pos < bytes.len() {
            c.pos += 1; // chunk bodies are word-aligned
        }
        match &id {
            b"fmt " => {
                if body.len() < 16 {
                    return Err(Error::format(format!("{name}: fmt chunk shorter than 16 bytes")));
                }
                let tag = u16::from_le_bytes([body[0], body[1]]);
                let channels = u16::from_le_bytes([body[2], body[3]]);
                let sample_rate = u32::from_le_bytes([body[4], body[5], body[6], body[7]]);
                let bits = u16::from_le_bytes([body[14], body[15]]);
                fmt = Some(Format { tag, channels, sample_rate, bits });
            }
            b"data" => data = Some(body),
            _ => {} // LIST, fact, cue and friends are skipped
        }
    }

    let fmt = fmt.ok_or_else(|| Error::format(format!("{name}: no fmt chunk present")))?;
    let data = data.ok_or_else(|| Error::format(format!("{name}: no data chunk present")))?;
    if fmt.channels == 0 {
        return Err(Error::format(format!("{name}: fmt chunk declares zero channels")));
    }
    if fmt.sample_rate == 0 {
        return Err(Error::format(format!("{name}: fmt chunk declares zero sample rate")));
    }

    let decode: fn(&[u8]) -> f32 = match (fmt.tag, fmt.bits) {
        (1, 16) => |b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0,
        (1, 24) => |b| {
            let v = ((b[2] as i32) << 24 | (b[1] as i32) << 16 | (b[0] as i32) << 8) >> 8;
            v as f32 / 8_388_608.0
        },
        (1, 32) => |b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f32 / 2_147_483_648.0,
        (3, 32) => |b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]),
        (tag, bits) => {
            return Err(Error::format(format!(
                "{name}: fmt chunk has unsupported codec (format tag {tag}, {bits} bits); \
                 supported: PCM 16/24/32-bit and IEEE float 32-bit"
            )))
        }
    };

    let bytes_per_sample = (fmt.bits / 8) as usize;
    let frame_size = bytes_per_sample * fmt.channels as usize;
    if frame_size == 0 || data.len() % frame_size != 0 {
        return Err(Error::format(format!(
            "{name}: data chunk length {} is not a multiple of the {frame_size}-byte frame",
            data.len()
        )));
    }
    let n_frames = data.len() / frame_size;
    if n_frames == 0 {
        return Err(Error::format(format!("{name}: data chunk holds no samples")));
    }

    let channels = fmt.channels as usize;
    let mut samples = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let frame = &data[f * frame_size..(f + 1) * frame_size];
        let mut acc = 0.0f32;
        for ch in 0..channels {
            acc += decode(&frame[ch * bytes_per_sample..(ch + 1) * bytes_per_sample]);
        }
        samples.push((acc / channels as f32).clamp(-1.0, 1.0));
    }
    Ok(WavData { samples, sample_rate: fmt.sample_rate })
}

fn wav_header(format_tag: u16, bits: u16, sample_rate: u32, data_len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&format_tag.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&sample_rate.to_le_bytes());
    let byte_rate = sample_rate * (bits as u32 / 8);
    out.extend_from_slice(&byte_rate.to_le_bytes());
    out.extend_from_slice(&(bits / 8).to_le_bytes());
    out.extend_from_slice(&bits.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    out
}

/// Encodes mono samples as a 32-bit float WAV.
pub fn encode_wav_f32(samples: &[f32], sample_rate: u32) -> Vec<u8> {
    let mut out = wav_header(3, 32, sample_rate, samples.len() * 4);
    for s in samples {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

/// Encodes mono samples as 16-bit PCM.
pub fn encode_wav_i16(samples: &[f32], sample_rate: u32) -> Vec<u8> {
    let mut out = wav_header(1, 16, sample_rate, samples.len() * 2);
    for s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Writes mono samples to `path` as a 32-bit float WAV.
pub fn write_wav_f32(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    std::fs::write(path, encode_wav_f32(samples, sample_rate)).map_err(|e| Error::io(path, e))
}
