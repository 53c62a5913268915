//! Waveform-to-feature pipeline: resampling, log-mel extraction, per-band
//! normalization, and crop policies.
//!
//! Kernel math runs in f64 regardless of the scalar width used downstream;
//! the feature tensor is cast once at the end. Every stage is deterministic
//! for a given input (random cropping takes its generator explicitly).

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Mono waveform with samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    /// Wraps samples, enforcing the range invariant.
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::contract("audio clip must hold at least one sample"));
        }
        if sample_rate == 0 {
            return Err(Error::contract("audio clip sample rate must be positive"));
        }
        for (i, &s) in samples.iter().enumerate() {
            if !s.is_finite() {
                return Err(Error::data(format!("audio sample {i} is not finite")));
            }
            if !(-1.0..=1.0).contains(&s) {
                return Err(Error::contract(format!(
                    "audio sample {i} is {s}, outside [-1, 1]"
                )));
            }
        }
        Ok(Self { samples, sample_rate })
    }

    /// Wraps samples after clamping them into `[-1, 1]`.
    pub fn clamped(mut samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        for s in &mut samples {
            if !s.is_finite() {
                return Err(Error::data("audio sample is not finite".to_string()));
            }
            *s = s.clamp(-1.0, 1.0);
        }
        Self::new(samples, sample_rate)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the constructor rejects empty clips
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

const RESAMPLE_HALF_TAPS: i64 = 32; // 64 taps per output sample
const KAISER_BETA: f64 = 8.6;
const MAX_PHASE_TABLE: u64 = 8192;

/// Zeroth-order modified Bessel function, by power series.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let half = x / 2.0;
    for k in 1..64 {
        term *= (half / k as f64) * (half / k as f64);
        sum += term;
        if term < sum * 1e-16 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Kaiser-windowed sinc tap weights centered at fractional offset `frac`
/// (in source samples, `0 <= frac < 1`), lowpassed at `cutoff` (fraction of
/// the source Nyquist rate). Tap `j` sits at source offset `j - 31 - frac`
/// from the integer base index. Weights are normalized to unit sum so DC
/// passes through exactly.
fn kernel_weights(frac: f64, cutoff: f64, i0_beta: f64) -> [f64; 64] {
    let half = RESAMPLE_HALF_TAPS as f64;
    let mut w = [0.0f64; 64];
    let mut sum = 0.0;
    for (j, slot) in w.iter_mut().enumerate() {
        let x = j as f64 - (half - 1.0) - frac;
        let t = x / half;
        if t.abs() <= 1.0 {
            let window = bessel_i0(KAISER_BETA * (1.0 - t * t).sqrt()) / i0_beta;
            *slot = cutoff * sinc(cutoff * x) * window;
            sum += *slot;
        }
    }
    if sum != 0.0 {
        for slot in &mut w {
            *slot /= sum;
        }
    }
    w
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Resamples a clip to `target_rate` with a 64-tap Kaiser-windowed sinc
/// filter. Matching rates return the clip unchanged. Rational rate pairs
/// with a small phase count use a precomputed polyphase table; anything
/// else evaluates the kernel per output sample with identical math.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::contract("target sample rate must be positive"));
    }
    if target_rate == clip.sample_rate {
        return Ok(clip.clone());
    }
    let src_rate = clip.sample_rate as u64;
    let dst_rate = target_rate as u64;
    let n = clip.samples.len() as u64;
    // Output length: ceil(n * dst / src) keeps duration within one sample.
    let out_len = ((n * dst_rate + src_rate - 1) / src_rate) as usize;

    let g = gcd(src_rate, dst_rate);
    let phases = dst_rate / g; // output i maps to source position i * (src/g) / phases
    let step = src_rate / g;
    let cutoff = (dst_rate as f64 / src_rate as f64).min(1.0);
    let i0_beta = bessel_i0(KAISER_BETA);

    let table: Option<Vec<[f64; 64]>> = if phases <= MAX_PHASE_TABLE {
        Some(
            (0..phases)
                .map(|p| kernel_weights(p as f64 / phases as f64, cutoff, i0_beta))
                .collect(),
        )
    } else {
        None
    };

    let src = &clip.samples;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len as u64 {
        let num = i * step; // source position = num / phases
        let base = (num / phases) as i64;
        let phase = num % phases;
        let local;
        let weights: &[f64; 64] = match &table {
            Some(t) => &t[phase as usize],
            None => {
                local = kernel_weights(phase as f64 / phases as f64, cutoff, i0_beta);
                &local
            }
        };
        let mut acc = 0.0f64;
        for (j, &w) in weights.iter().enumerate() {
            let k = base - (RESAMPLE_HALF_TAPS - 1) + j as i64;
            if k >= 0 && (k as usize) < src.len() {
                acc += w * src[k as usize] as f64;
            }
        }
        out.push(acc as f32);
    }
    AudioClip::clamped(out, target_rate)
}

/// Log-mel extraction parameters. The defaults are the production settings;
/// they are spelled out so fixtures can shrink them.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self { sample_rate: 44100, n_fft: 1024, hop: 320, n_mels: 64, fmin: 0.0, fmax: 22050.0 }
    }
}

impl MelConfig {
    fn validate(&self) -> Result<()> {
        if !self.n_fft.is_power_of_two() || self.n_fft < 2 {
            return Err(Error::contract(format!(
                "window length {} must be a power of two",
                self.n_fft
            )));
        }
        if self.hop == 0 {
            return Err(Error::contract("hop must be positive"));
        }
        if self.n_mels == 0 {
            return Err(Error::contract("mel band count must be positive"));
        }
        if self.sample_rate == 0 {
            return Err(Error::contract("sample rate must be positive"));
        }
        if !(self.fmin >= 0.0 && self.fmax > self.fmin) {
            return Err(Error::contract(format!(
                "mel frequency range [{}, {}] is invalid",
                self.fmin, self.fmax
            )));
        }
        Ok(())
    }
}

/// Log-mel features, `[n_mels, frames]` row-major (one row per band).
#[derive(Clone, Debug)]
pub struct MelSpectrogram {
    data: Tensor<f32>,
    normalized: bool,
}

impl MelSpectrogram {
    pub fn n_mels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn data(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Reshapes to the `[1, 1, bands, frames]` layout the encoder consumes.
    pub fn to_input_tensor<S: Scalar>(&self) -> Result<Tensor<S>> {
        let shape = vec![1, 1, self.n_mels(), self.frames()];
        Tensor::from_vec(
            shape,
            self.data.data().iter().map(|&v| S::from_f64_c(v as f64)).collect(),
            "mel features",
        )
    }
}

/// Stacks equal-shape spectrograms into one `[n, 1, bands, frames]` batch.
pub fn stack_mel_batch<S: Scalar>(mels: &[MelSpectrogram]) -> Result<Tensor<S>> {
    if mels.is_empty() {
        return Err(Error::contract("cannot stack an empty feature batch"));
    }
    let (bands, frames) = (mels[0].n_mels(), mels[0].frames());
    let mut data = Vec::with_capacity(mels.len() * bands * frames);
    for (i, m) in mels.iter().enumerate() {
        if m.n_mels() != bands || m.frames() != frames {
            return Err(Error::contract(format!(
                "feature batch is ragged: clip 0 is [{bands}, {frames}] but clip {i} is [{}, {}]",
                m.n_mels(),
                m.frames()
            )));
        }
        data.extend(m.data.data().iter().map(|&v| S::from_f64_c(v as f64)));
    }
    Tensor::from_vec(vec![mels.len(), 1, bands, frames], data, "mel batch")
}

/// In-place radix-2 decimation-in-time FFT.
fn fft(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    debug_assert!(n.is_power_of_two() && im.len() == n);
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 0..n {
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
        let mut m = n >> 1;
        while m >= 1 && j & m != 0 {
            j ^= m;
            m >>= 1;
        }
        j |= m;
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * std::f64::consts::PI / len as f64;
        let (w_im, w_re) = ang.sin_cos();
        let mut start = 0;
        while start < n {
            let mut cur_re = 1.0f64;
            let mut cur_im = 0.0f64;
            for k in 0..len / 2 {
                let a = start + k;
                let b = a + len / 2;
                let t_re = re[b] * cur_re - im[b] * cur_im;
                let t_im = re[b] * cur_im + im[b] * cur_re;
                re[b] = re[a] - t_re;
                im[b] = im[a] - t_im;
                re[a] += t_re;
                im[a] += t_im;
                let next_re = cur_re * w_re - cur_im * w_im;
                cur_im = cur_re * w_im + cur_im * w_re;
                cur_re = next_re;
            }
            start += len;
        }
        len <<= 1;
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filterbank on the mel scale. Filter `m` rises linearly (in
/// mel) from edge `m` to edge `m+1` and falls to edge `m+2`, sampled at the
/// FFT bin center frequencies. Returned as `n_mels` rows of
/// `(first_bin, weights)` covering only the nonzero span.
fn mel_filterbank(cfg: &MelConfig) -> Vec<(usize, Vec<f64>)> {
    let n_bins = cfg.n_fft / 2 + 1;
    let mel_lo = hz_to_mel(cfg.fmin);
    let mel_hi = hz_to_mel(cfg.fmax);
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64)
        .collect();
    let bin_mels: Vec<f64> = (0..n_bins)
        .map(|b| hz_to_mel(b as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64))
        .collect();

    let mut filters = Vec::with_capacity(cfg.n_mels);
    for m in 0..cfg.n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let mut first = None;
        let mut weights = Vec::new();
        for (b, &bm) in bin_mels.iter().enumerate() {
            let w = if bm <= lo || bm >= hi {
                0.0
            } else if bm <= mid {
                (bm - lo) / (mid - lo)
            } else {
                (hi - bm) / (hi - mid)
            };
            if w > 0.0 {
                if first.is_none() {
                    first = Some(b);
                }
                weights.push(w);
            } else if first.is_some() {
                break; // triangles are contiguous
            }
        }
        match first {
            Some(b) => filters.push((b, weights)),
            // A degenerate triangle narrower than one bin keeps its center bin
            // with zero weight so every band still has a defined row.
            None => filters.push((0, vec![])),
        }
    }
    filters
}

/// Reflects index `i` into `[0, len)` by bouncing off both ends without
/// repeating the boundary samples (period `2 * (len - 1)`).
fn reflect_index(i: i64, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as i64 - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as i64 {
        j = period - j;
    }
    j as usize
}

/// Computes the log-mel spectrogram of a clip.
///
/// The waveform is padded by half a window on each side with bounce
/// reflection, windowed with a periodic Hann window, and transformed; the
/// power spectrum is pooled through the mel filterbank and compressed with
/// `ln(x + 1e-10)`. Frame count is `floor(len / hop) + 1`.
pub fn mel_spectrogram(clip: &AudioClip, cfg: &MelConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    if clip.sample_rate != cfg.sample_rate {
        return Err(Error::contract(format!(
            "clip rate {} does not match feature config rate {}; resample first",
            clip.sample_rate, cfg.sample_rate
        )));
    }
    let n = clip.samples.len();
    let n_fft = cfg.n_fft;
    let pad = n_fft / 2;
    let frames = n / cfg.hop + 1;

    let window: Vec<f64> = (0..n_fft)
        .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n_fft as f64).cos()))
        .collect();
    let filters = mel_filterbank(cfg);
    let n_bins = n_fft / 2 + 1;

    let sample = |i: i64| -> f64 {
        if i >= 0 && (i as usize) < n {
            clip.samples[i as usize] as f64
        } else {
            clip.samples[reflect_index(i, n)] as f64
        }
    };

    let mut data = vec![0.0f32; cfg.n_mels * frames];
    let mut re = vec![0.0f64; n_fft];
    let mut im = vec![0.0f64; n_fft];
    let mut power = vec![0.0f64; n_bins];
    for t in 0..frames {
        let start = t as i64 * cfg.hop as i64 - pad as i64;
        for i in 0..n_fft {
            re[i] = sample(start + i as i64) * window[i];
            im[i] = 0.0;
        }
        fft(&mut re, &mut im);
        for b in 0..n_bins {
            power[b] = re[b] * re[b] + im[b] * im[b];
        }
        for (m, (first, weights)) in filters.iter().enumerate() {
            let mut acc = 0.0f64;
            for (k, &w) in weights.iter().enumerate() {
                acc += w * power[first + k];
            }
            data[m * frames + t] = (acc + 1e-10).ln() as f32;
        }
    }

    Ok(MelSpectrogram {
        data: Tensor::from_vec(vec![cfg.n_mels, frames], data, "mel features")?,
        normalized: false,
    })
}

/// Standardizes each mel band to zero mean and unit variance across time
/// (population statistics, `1e-5` added to the deviation). Rejects features
/// that have already been normalized.
pub fn normalize_freq_axis(mel: &MelSpectrogram) -> Result<MelSpectrogram> {
    if mel.normalized {
        return Err(Error::contract("mel features are already normalized"));
    }
    let (bands, frames) = (mel.n_mels(), mel.frames());
    let src = mel.data.data();
    let mut out = vec![0.0f32; src.len()];
    for m in 0..bands {
        let row = &src[m * frames..(m + 1) * frames];
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / frames as f64;
        let var =
            row.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>() / frames as f64;
        let denom = var.sqrt() + 1e-5;
        for (t, &v) in row.iter().enumerate() {
            out[m * frames + t] = ((v as f64 - mean) / denom) as f32;
        }
    }
    Ok(MelSpectrogram {
        data: Tensor::from_vec(vec![bands, frames], out, "normalized mel features")?,
        normalized: true,
    })
}

fn crop_target_len(clip: &AudioClip, seconds: f64) -> Result<usize> {
    if !(seconds > 0.0) || !seconds.is_finite() {
        return Err(Error::contract(format!("crop length {seconds} s must be positive")));
    }
    let target = (seconds * clip.sample_rate as f64).round() as usize;
    if target == 0 {
        return Err(Error::contract(format!(
            "crop of {seconds} s at {} Hz contains no samples",
            clip.sample_rate
        )));
    }
    Ok(target)
}

fn tile_cyclic(samples: &[f32], target: usize) -> Vec<f32> {
    (0..target).map(|i| samples[i % samples.len()]).collect()
}

/// Cuts a fixed-length window at a uniformly random offset. Clips already at
/// the target length pass through; shorter clips are tiled cyclically from
/// the beginning (no randomness).
pub fn random_crop<R: Rng>(clip: &AudioClip, seconds: f64, rng: &mut R) -> Result<AudioClip> {
    let target = crop_target_len(clip, seconds)?;
    let n = clip.samples.len();
    let samples = if n == target {
        return Ok(clip.clone());
    } else if n > target {
        let offset = rng.gen_range(0..=n - target);
        clip.samples[offset..offset + target].to_vec()
    } else {
        tile_cyclic(&clip.samples, target)
    };
    AudioClip::new(samples, clip.sample_rate)
}

/// Deterministic companion to [`random_crop`]: takes the centered window,
/// rounding the split toward the start. Short clips tile exactly as in the
/// random path.
pub fn center_crop(clip: &AudioClip, seconds: f64) -> Result<AudioClip> {
    let target = crop_target_len(clip, seconds)?;
    let n = clip.samples.len();
    let samples = if n == target {
        return Ok(clip.clone());
    } else if n > target {
        let offset = (n - target) / 2;
        clip.samples[offset..offset + target].to_vec()
    } else {
        tile_cyclic(&clip.samples, target)
    };
    AudioClip::new(samples, clip.sample_rate)
}
