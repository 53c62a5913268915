//! Latent-space distillation: train the compact encoder so its projections
//! align with a frozen teacher's, using audio only.
//!
//! The loss is the negated mean of the diagonal inner products between
//! L2-normalized student and teacher batches; the teacher side carries a
//! stop-gradient. Stage 1 trains everything; stage 2 freezes the body (in
//! eval mode, statistics included) and fine-tunes only the projection.
//!
//! Every stochastic choice (epoch shuffles, per-clip crops, the holdout
//! split) derives its generator from the run seed plus a purpose tag, so a
//! run is reproducible from its config alone, regardless of worker count.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::adam::Adam;
use crate::encoder::{StudentEncoder, BN_MOMENTUM};
use crate::error::{Error, Result};
use crate::frontend::{
    center_crop, mel_spectrogram, normalize_freq_axis, random_crop, resample, stack_mel_batch,
    AudioClip, MelSpectrogram,
};
use crate::rng::derive_seed;
use crate::scalar::Scalar;
use crate::store::{DatasetManifest, EmbeddingTable, FrontendConfig};
use crate::tape::{NodeRef, Tape};
use crate::tensor::Tensor;
use crate::wav::read_wav;

#[derive(Clone, Debug)]
pub struct DistillConfig {
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub batch_size: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            epochs_stage1: 100,
            epochs_stage2: 20,
            lr_stage1: 3e-3,
            lr_stage2: 1e-3,
            batch_size: 32,
            holdout_fraction: 0.125,
            seed: 0,
        }
    }
}

impl DistillConfig {
    fn validate(&self) -> Result<()> {
        if self.lr_stage1 <= 0.0 || self.lr_stage2 <= 0.0 {
            return Err(Error::contract("learning rates must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::contract(format!(
                "holdout fraction {} must be in [0, 1)",
                self.holdout_fraction
            )));
        }
        Ok(())
    }
}

/// A decoded, rate-matched dataset held in memory.
pub struct LoadedClip {
    pub id: String,
    pub label: Option<String>,
    pub clip: AudioClip,
}

pub struct LoadedDataset {
    pub clips: Vec<LoadedClip>,
}

impl LoadedDataset {
    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

/// Decodes every manifest entry and resamples to `target_rate`. Decoding
/// runs in parallel; output order follows the manifest.
pub fn load_dataset(manifest: &DatasetManifest, target_rate: u32) -> Result<LoadedDataset> {
    let clips: Result<Vec<LoadedClip>> = manifest
        .entries
        .par_iter()
        .map(|e| {
            let path = manifest.resolve(e);
            let wav = read_wav(&path)?;
            let clip = AudioClip::new(wav.samples, wav.sample_rate)?;
            let clip = resample(&clip, target_rate)?;
            Ok(LoadedClip { id: e.id.clone(), label: e.label.clone(), clip })
        })
        .collect();
    let clips = clips?;
    if clips.is_empty() {
        return Err(Error::data("dataset is empty".to_string()));
    }
    Ok(LoadedDataset { clips })
}

/// Source of target latent vectors. Read-only for the whole run.
pub enum TeacherProvider<S: Scalar> {
    /// Precomputed id → vector table.
    Table(EmbeddingTable),
    /// A frozen reference encoder, evaluated on the same feature batches
    /// the student sees.
    Frozen(StudentEncoder<S>),
}

impl<S: Scalar> TeacherProvider<S> {
    pub fn dim(&self) -> usize {
        match self {
            Self::Table(t) => t.dim,
            Self::Frozen(e) => e.latent_dim(),
        }
    }

    /// Digest of the provider's state; must be identical before and after
    /// any training run.
    pub fn state_hash(&self) -> String {
        match self {
            Self::Table(t) => {
                let mut h = Sha256::new();
                h.update((t.dim as u64).to_le_bytes());
                for (id, v) in &t.entries {
                    h.update(id.as_bytes());
                    h.update([0u8]);
                    for x in v {
                        h.update(x.to_le_bytes());
                    }
                }
                let d = h.finalize();
                d.iter().take(16).map(|b| format!("{b:02x}")).collect()
            }
            Self::Frozen(e) => e.fingerprint(),
        }
    }

    /// Confirms every clip id has a target (tables only; a frozen encoder
    /// covers anything).
    pub fn check_coverage(&self, ds: &LoadedDataset) -> Result<()> {
        if let Self::Table(t) = self {
            for c in &ds.clips {
                if t.get(&c.id).is_none() {
                    return Err(Error::data(format!(
                        "teacher table has no embedding for clip {:?}",
                        c.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Normalized teacher batch for these clips. Table lookups go by id;
    /// a frozen encoder embeds the very feature batch the student sees.
    pub fn batch(&self, ids: &[&str], mels: &[MelSpectrogram]) -> Result<Tensor<S>> {
        match self {
            Self::Table(t) => {
                let d = t.dim;
                let mut data = Vec::with_capacity(ids.len() * d);
                for id in ids {
                    let v = t.get(id).ok_or_else(|| {
                        Error::data(format!("teacher table has no embedding for clip {id:?}"))
                    })?;
                    let norm: f64 = v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
                    if norm < 1e-12 {
                        return Err(Error::data(format!(
                            "teacher embedding for clip {id:?} is the zero vector"
                        )));
                    }
                    data.extend(v.iter().map(|&x| S::from_f64_c(x as f64 / norm)));
                }
                Tensor::from_vec(vec![ids.len(), d], data, "teacher batch")
            }
            Self::Frozen(e) => e.embed(mels),
        }
    }
}

/// Negated mean diagonal inner product of two row-normalized batches.
/// Rows must already be unit length; this is checked, not fixed up.
pub fn distill_loss<S: Scalar>(student: &Tensor<S>, teacher: &Tensor<S>) -> Result<S> {
    if student.shape() != teacher.shape() || student.shape().len() != 2 {
        return Err(Error::contract(format!(
            "distill_loss needs matching [n, d] batches, got {:?} and {:?}",
            student.shape(),
            teacher.shape()
        )));
    }
    let (n, d) = (student.shape()[0], student.shape()[1]);
    for (name, t) in [("student", student), ("teacher", teacher)] {
        for i in 0..n {
            let row = &t.data()[i * d..(i + 1) * d];
            let norm = row.iter().map(|&v| v.to_f64_c().powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-3 {
                return Err(Error::contract(format!(
                    "distill_loss expects L2-normalized rows; {name} row {i} has norm {norm}"
                )));
            }
        }
    }
    let mut acc = 0.0f64;
    for i in 0..n * d {
        acc += student.data()[i].to_f64_c() * teacher.data()[i].to_f64_c();
    }
    Ok(S::from_f64_c(-acc / n as f64))
}

/// Tape form of the loss: normalizes the raw student projection, wraps the
/// (already normalized) teacher batch in a stop-gradient, and reduces.
pub fn distill_loss_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    student_raw: NodeRef,
    teacher_normalized: Tensor<S>,
) -> Result<NodeRef> {
    let n = teacher_normalized.shape()[0];
    let s = tape.l2_normalize(student_raw, 1)?;
    let t_in = tape.input(teacher_normalized);
    let t = tape.stop_gradient(t_in);
    let prod = tape.mul(s, t)?;
    let total = tape.sum(prod)?;
    tape.scale(total, S::from_f64_c(-1.0 / n as f64))
}

/// One line per epoch; the CSV form expands to a train row and a holdout
/// row with columns `epoch,split,loss,mean_cosine`. Wall-clock seconds are
/// kept for logging only: output files must be bitwise-reproducible from
/// the invocation and seed, and timing is not.
#[derive(Clone, Debug)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_cosine: f64,
    pub holdout_cosine: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn epochs(&self) -> usize {
        self.records.len()
    }

    pub fn final_holdout_cosine(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.holdout_cosine)
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.train_loss)
    }

    /// CSV rows, numbering epochs from `epoch_offset`.
    pub fn csv_rows(&self, epoch_offset: usize) -> String {
        let mut out = String::new();
        for r in &self.records {
            let e = r.epoch + epoch_offset;
            out.push_str(&format!("{e},train,{:.9},{:.9}\n", r.train_loss, r.train_cosine));
            if let Some(hc) = r.holdout_cosine {
                out.push_str(&format!("{e},holdout,{:.9},{:.9}\n", -hc, hc));
            }
        }
        out
    }

    pub const CSV_HEADER: &'static str = "epoch,split,loss,mean_cosine";
}

/// Deterministic holdout split: indices shuffled by a seed-derived stream,
/// the first `floor(frac * n)` held out. Both halves come back sorted.
pub fn split_holdout(n: usize, frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let k = (frac * n as f64).floor() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["holdout-split"]));
    idx.shuffle(&mut rng);
    let mut hold: Vec<usize> = idx[..k].to_vec();
    let mut train: Vec<usize> = idx[k..].to_vec();
    hold.sort_unstable();
    train.sort_unstable();
    (train, hold)
}

fn assemble_batch(
    ds: &LoadedDataset,
    indices: &[usize],
    fe: &FrontendConfig,
    crop: CropPolicy<'_>,
) -> Result<Vec<MelSpectrogram>> {
    indices
        .par_iter()
        .map(|&i| {
            let c = &ds.clips[i];
            let cropped = match crop {
                CropPolicy::Random { seed, stage, epoch } => {
                    let s = derive_seed(seed, &["crop", stage, &epoch.to_string(), &c.id]);
                    let mut rng = ChaCha8Rng::seed_from_u64(s);
                    random_crop(&c.clip, fe.crop_seconds, &mut rng)?
                }
                CropPolicy::Center => center_crop(&c.clip, fe.crop_seconds)?,
            };
            let mel = mel_spectrogram(&cropped, &fe.mel)?;
            normalize_freq_axis(&mel)
        })
        .collect()
}

#[derive(Clone, Copy)]
enum CropPolicy<'a> {
    Random { seed: u64, stage: &'a str, epoch: usize },
    Center,
}

/// Deterministic inference features for the given clips: center crops,
/// normalized per band. Order follows `indices`.
pub fn eval_mels(
    ds: &LoadedDataset,
    indices: &[usize],
    fe: &FrontendConfig,
) -> Result<Vec<MelSpectrogram>> {
    assemble_batch(ds, indices, fe, CropPolicy::Center)
}

/// Eval-mode mean cosine between student and teacher over the given clips
/// (deterministic center crops). `None` when `indices` is empty.
pub fn mean_cosine<S: Scalar>(
    enc: &StudentEncoder<S>,
    teacher: &TeacherProvider<S>,
    ds: &LoadedDataset,
    indices: &[usize],
    fe: &FrontendConfig,
) -> Result<Option<f64>> {
    if indices.is_empty() {
        return Ok(None);
    }
    let mels = assemble_batch(ds, indices, fe, CropPolicy::Center)?;
    let ids: Vec<&str> = indices.iter().map(|&i| ds.clips[i].id.as_str()).collect();
    let s = enc.embed(&mels)?;
    let t = teacher.batch(&ids, &mels)?;
    let loss = distill_loss(&s, &t)?;
    Ok(Some(-loss.to_f64_c()))
}

fn common_checks<S: Scalar>(
    enc: &StudentEncoder<S>,
    ds: &LoadedDataset,
    teacher: &TeacherProvider<S>,
    cfg: &DistillConfig,
) -> Result<()> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::data("dataset is empty".to_string()));
    }
    if teacher.dim() != enc.latent_dim() {
        return Err(Error::contract(format!(
            "teacher dimension {} does not match the student latent width {}",
            teacher.dim(),
            enc.latent_dim()
        )));
    }
    teacher.check_coverage(ds)
}

/// Stage 1: train every parameter against the teacher projections on
/// shuffled random crops.
pub fn train_stage1<S: Scalar>(
    enc: &mut StudentEncoder<S>,
    ds: &LoadedDataset,
    teacher: &TeacherProvider<S>,
    fe: &FrontendConfig,
    cfg: &DistillConfig,
) -> Result<TrainReport> {
    common_checks(enc, ds, teacher, cfg)?;
    let (train_idx, hold_idx) = split_holdout(ds.len(), cfg.holdout_fraction, cfg.seed);
    if train_idx.is_empty() {
        return Err(Error::contract("holdout split leaves no training clips"));
    }

    let mut adam = Adam::<S>::new(cfg.lr_stage1, &enc.param_shapes());
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs_stage1 {
        let started = Instant::now();
        let mut order = train_idx.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            &["shuffle", "stage1", &epoch.to_string()],
        ));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mels =
                assemble_batch(ds, chunk, fe, CropPolicy::Random { seed: cfg.seed, stage: "stage1", epoch })?;
            let ids: Vec<&str> = chunk.iter().map(|&i| ds.clips[i].id.as_str()).collect();
            let teacher_batch = teacher.batch(&ids, &mels)?;
            let x = stack_mel_batch::<S>(&mels)?;

            let mut tape = Tape::new();
            let student = enc.forward_train(&mut tape, &x, Some(BN_MOMENTUM))?;
            let loss = distill_loss_on_tape(&mut tape, student, teacher_batch)?;
            loss_sum += tape.value(loss).scalar_value()?.to_f64_c();
            batches += 1;

            let grads = tape.backward(loss)?;
            let n_params = enc.num_params();
            let grad_refs: Vec<&Tensor<S>> = (0..n_params)
                .map(|i| {
                    grads.get(i).ok_or_else(|| {
                        Error::numeric(format!("no gradient recorded for parameter {i}"))
                    })
                })
                .collect::<Result<_>>()?;
            let mut params = enc.param_values_mut();
            adam.step(&mut params, &grad_refs)?;
        }

        let train_cosine = mean_cosine(enc, teacher, ds, &train_idx, fe)?.unwrap_or(f64::NAN);
        let holdout_cosine = mean_cosine(enc, teacher, ds, &hold_idx, fe)?;
        report.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            train_cosine,
            holdout_cosine,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(report)
}

/// Stage 2: body frozen in eval mode (statistics included), only the
/// projection trains. Crops are re-drawn, not reused from stage 1.
pub fn train_stage2<S: Scalar>(
    enc: &mut StudentEncoder<S>,
    ds: &LoadedDataset,
    teacher: &TeacherProvider<S>,
    fe: &FrontendConfig,
    cfg: &DistillConfig,
) -> Result<TrainReport> {
    common_checks(enc, ds, teacher, cfg)?;
    let (train_idx, hold_idx) = split_holdout(ds.len(), cfg.holdout_fraction, cfg.seed);
    if train_idx.is_empty() {
        return Err(Error::contract("holdout split leaves no training clips"));
    }

    let (wid, bid) = enc.head_param_ids();
    let shapes: Vec<Vec<usize>> = {
        let all = enc.param_shapes();
        vec![all[wid].clone(), all[bid].clone()]
    };
    let mut adam = Adam::<S>::new(cfg.lr_stage2, &shapes);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs_stage2 {
        let started = Instant::now();
        let mut order = train_idx.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            &["shuffle", "stage2", &epoch.to_string()],
        ));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let mels =
                assemble_batch(ds, chunk, fe, CropPolicy::Random { seed: cfg.seed, stage: "stage2", epoch })?;
            let ids: Vec<&str> = chunk.iter().map(|&i| ds.clips[i].id.as_str()).collect();
            let teacher_batch = teacher.batch(&ids, &mels)?;
            let x = stack_mel_batch::<S>(&mels)?;
            let features = enc.forward_eval_features(&x)?;

            let mut tape = Tape::new();
            let (student, _, _) = enc.head_on_tape(&mut tape, &features)?;
            let loss = distill_loss_on_tape(&mut tape, student, teacher_batch)?;
            loss_sum += tape.value(loss).scalar_value()?.to_f64_c();
            batches += 1;

            let grads = tape.backward(loss)?;
            let gw = grads.get(wid).ok_or_else(|| {
                Error::numeric("no gradient recorded for the projection weight".to_string())
            })?;
            let gb = grads.get(bid).ok_or_else(|| {
                Error::numeric("no gradient recorded for the projection bias".to_string())
            })?;
            let grad_refs = [gw, gb];
            let all = enc.param_values_mut();
            let mut picked: Vec<&mut Tensor<S>> = Vec::with_capacity(2);
            let mut rest: Vec<(usize, &mut Tensor<S>)> = all.into_iter().enumerate().collect();
            // Pull out w then b, preserving that order for the optimizer.
            let mut w_slot = None;
            let mut b_slot = None;
            for (i, t) in rest.drain(..) {
                if i == wid {
                    w_slot = Some(t);
                } else if i == bid {
                    b_slot = Some(t);
                }
            }
            picked.push(w_slot.expect("projection weight exists"));
            picked.push(b_slot.expect("projection bias exists"));
            adam.step(&mut picked, &grad_refs)?;
        }

        let train_cosine = mean_cosine(enc, teacher, ds, &train_idx, fe)?.unwrap_or(f64::NAN);
        let holdout_cosine = mean_cosine(enc, teacher, ds, &hold_idx, fe)?;
        report.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches.max(1) as f64,
            train_cosine,
            holdout_cosine,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(report)
}
