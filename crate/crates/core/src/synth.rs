//! Deterministic synthetic tone corpus.
//!
//! Four harmonic-stack classes with per-clip amplitude, phase, and detune
//! jitter plus a little noise. Small enough to train against in seconds,
//! structured enough that the classes are separable, and fully determined
//! by one seed. Used by the training tests and the end-to-end pipeline
//! checks.
//!
//! Class design note: the encoder shares convolution weights across
//! frequency and ends in a global average pool, so absolute band position
//! is a weak cue; and the frontend normalizes each band over time, so
//! constant energy profiles wash out. Classes therefore differ in
//! translation-invariant, time-varying structure (harmonic count and
//! tremolo rate) in addition to carrier frequency.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::store::{DatasetManifest, ManifestEntry};
use crate::wav::write_wav_f32;

/// One synthetic sound class: a harmonic stack on a carrier with a
/// characteristic tremolo rate.
#[derive(Clone, Copy, Debug)]
pub struct ToneClass {
    pub label: &'static str,
    pub freq: f64,
    pub harmonics: usize,
    pub trem_rate: f64,
}

pub const TONE_CLASSES: [ToneClass; 4] = [
    ToneClass { label: "tone_220", freq: 220.0, harmonics: 1, trem_rate: 2.5 },
    ToneClass { label: "tone_440", freq: 440.0, harmonics: 2, trem_rate: 5.0 },
    ToneClass { label: "tone_880", freq: 880.0, harmonics: 3, trem_rate: 10.0 },
    ToneClass { label: "tone_1760", freq: 1760.0, harmonics: 4, trem_rate: 20.0 },
];

#[derive(Clone, Debug)]
pub struct SynthSpec {
    pub seed: u64,
    pub per_class: usize,
    pub seconds: f64,
    pub sample_rate: u32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { seed: 7, per_class: 16, seconds: 1.2, sample_rate: 44100 }
    }
}

/// One jittered tone: amplitude in [0.3, 0.8), detune within two percent,
/// random phase, one percent white noise, and a tremolo near 5 Hz.
pub fn tone_clip(freq: f64, seconds: f64, sample_rate: u32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let single = ToneClass { label: "", freq, harmonics: 1, trem_rate: 5.0 };
    render_clip(&single, 0.6, seconds, sample_rate, rng)
}

/// One clip of a synthetic class: the class's harmonic stack (amplitudes
/// 1/k, jointly normalized) under its tremolo, with per-clip jitter in
/// amplitude, detune, phases, and tremolo rate, plus one percent noise.
pub fn class_clip(class: &ToneClass, seconds: f64, sample_rate: u32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    render_clip(class, 0.6, seconds, sample_rate, rng)
}

fn render_clip(
    class: &ToneClass,
    rate_jitter: f64,
    seconds: f64,
    sample_rate: u32,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let tau = 2.0 * std::f64::consts::PI;
    let n = (seconds * sample_rate as f64).round() as usize;
    let amp = 0.3 + 0.5 * rng.gen::<f64>();
    let detune = 1.0 + 0.04 * (rng.gen::<f64>() - 0.5);
    let trem_rate = class.trem_rate * (1.0 - rate_jitter / 2.0 + rate_jitter * rng.gen::<f64>());
    let trem_phase = tau * rng.gen::<f64>();
    let phases: Vec<f64> = (0..class.harmonics).map(|_| tau * rng.gen::<f64>()).collect();
    let w = tau * class.freq * detune / sample_rate as f64;
    let wm = tau * trem_rate / sample_rate as f64;
    let stack_norm: f64 = (1..=class.harmonics).map(|k| 1.0 / k as f64).sum();
    (0..n)
        .map(|i| {
            let t = i as f64;
            let noise = 0.01 * (2.0 * rng.gen::<f64>() - 1.0);
            let env = 0.55 + 0.45 * (wm * t + trem_phase).sin();
            let stack: f64 = (1..=class.harmonics)
                .map(|k| (w * k as f64 * t + phases[k - 1]).sin() / k as f64)
                .sum();
            ((amp * env * stack / stack_norm + noise).clamp(-1.0, 1.0)) as f32
        })
        .collect()
}

/// Writes WAVs under `dir/wavs/` and a labeled manifest at
/// `dir/manifest.jsonl`. Returns the manifest path and its parsed form.
pub fn generate_corpus(dir: &Path, spec: &SynthSpec) -> Result<(PathBuf, DatasetManifest)> {
    if spec.per_class == 0 || !(spec.seconds > 0.0) {
        return Err(Error::contract("corpus needs at least one clip per class of positive length"));
    }
    let wav_dir = dir.join("wavs");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;

    let mut entries = Vec::new();
    for class in &TONE_CLASSES {
        for i in 0..spec.per_class {
            let id = format!("{}_{i:02}", class.label);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &["clip", &id]));
            let samples = class_clip(class, spec.seconds, spec.sample_rate, &mut rng);
            let rel = format!("wavs/{id}.wav");
            write_wav_f32(&dir.join(&rel), &samples, spec.sample_rate)?;
            entries.push(ManifestEntry {
                id,
                wav_path: rel,
                label: Some(class.label.to_string()),
            });
        }
    }
    let manifest = DatasetManifest::from_entries(entries, dir.to_path_buf());
    let path = dir.join("manifest.jsonl");
    manifest.write(&path)?;
    let reread = DatasetManifest::read(&path)?;
    Ok((path, reread))
}
