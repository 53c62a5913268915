//! Command-line surface for the distill → rank → prune → classify
//! pipeline. Machine-readable results go to standard out or --out files;
//! diagnostics go to standard error. Exit codes: 0 success, 2 argument or
//! contract error, 3 file-format error, 4 numeric failure, 5 data error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use tinyclap_core::distill::{
    eval_mels, load_dataset, train_stage1, train_stage2, DistillConfig, TeacherProvider,
    TrainReport,
};
use tinyclap_core::encoder::{PhiNetConfig, StudentEncoder};
use tinyclap_core::error::{Error, Result};
use tinyclap_core::prune::{prune_encoder, rank_latents, PruneRanking};
use tinyclap_core::store::{
    load_checkpoint, manifest_fingerprint, read_temb, save_checkpoint, write_temb,
    CheckpointHeader, CheckpointMeta, DatasetManifest, EmbeddingTable, FrontendConfig,
};
use tinyclap_core::wav::read_wav;
use tinyclap_core::zeroshot::{
    build_caption, classify, evaluate_latents, ClassEmbeddingSet, Selection,
};
use tinyclap_core::frontend::{center_crop, mel_spectrogram, normalize_freq_axis, resample, AudioClip};

#[derive(Parser)]
#[command(
    name = "tinyclap",
    version,
    about = "Distill a compact audio encoder into a shared audio-text latent space, \
             prune that space, and classify audio zero-shot"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalOpts {
    /// Base seed for every stochastic choice (shuffles, crops, init).
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for audio preprocessing. Affects speed only; results
    /// are identical for any thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log filter: off, error, warn, info, debug, trace. Overrides the
    /// TINYCLAP_LOG environment variable.
    #[arg(long, global = true)]
    log_level: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a student encoder against frozen teacher projections.
    Distill(DistillArgs),
    /// Rank latent coordinates by mean absolute activation.
    Rank(RankArgs),
    /// Cut a checkpoint's projection down to the top-r ranked coordinates.
    Prune(PruneArgs),
    /// Project one audio file into the shared latent space.
    Embed(EmbedArgs),
    /// Zero-shot classify one audio file against class embeddings.
    Classify(ClassifyArgs),
    /// Score a labeled manifest; writes accuracy and a confusion table.
    Eval(EvalArgs),
    /// Print the caption template for each class label.
    Captions(CaptionsArgs),
}

#[derive(Args)]
struct DistillArgs {
    /// JSONL manifest of training clips.
    #[arg(long)]
    manifest: PathBuf,
    /// Teacher projection table (.temb), keyed by clip id.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Frozen teacher encoder checkpoint (.tclp), embedded on the fly.
    #[arg(long)]
    teacher_ckpt: Option<PathBuf>,
    /// Named architecture. Mutually exclusive with the scaling flags.
    #[arg(long)]
    preset: Option<String>,
    /// Width multiplier.
    #[arg(long)]
    alpha: Option<f64>,
    /// Shape factor.
    #[arg(long)]
    beta: Option<f64>,
    /// Base expansion factor.
    #[arg(long)]
    t0: Option<f64>,
    /// Number of inverted-residual blocks.
    #[arg(long)]
    n_blocks: Option<usize>,
    /// Checkpoint to write. The training report goes next to it as
    /// <out>.train.csv.
    #[arg(long)]
    out: PathBuf,
    /// Stage-1 epochs (whole network).
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    /// Stage-2 epochs (projection only, body frozen).
    #[arg(long, default_value_t = 20)]
    epochs_stage2: usize,
    /// Stage-1 learning rate.
    #[arg(long, default_value_t = 3e-3)]
    lr: f64,
    /// Stage-2 learning rate.
    #[arg(long, default_value_t = 1e-3)]
    lr_stage2: f64,
    /// Clips per optimizer step.
    #[arg(long, default_value_t = 32)]
    batch: usize,
    /// Training crop length in seconds.
    #[arg(long, default_value_t = 5.0)]
    crop_seconds: f64,
    /// Fraction of clips held out for the per-epoch cosine metric.
    #[arg(long, default_value_t = 0.125)]
    holdout: f64,
}

#[derive(Args)]
struct RankArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Clips whose projections define the importance scores.
    #[arg(long)]
    manifest: PathBuf,
    /// Ranking JSON to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Ranking JSON produced by `rank` from this same checkpoint.
    #[arg(long)]
    ranking: PathBuf,
    /// Latent coordinates to keep.
    #[arg(long)]
    r: usize,
    /// Pruned checkpoint to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    audio: PathBuf,
    /// Optional .temb to write (one entry, id = audio file stem).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ClassifyArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Class anchor table (.temb); ids are the class labels.
    #[arg(long)]
    classes: PathBuf,
    #[arg(long)]
    audio: PathBuf,
    /// Score in the top-r latent subspace. On a full checkpoint this
    /// needs --ranking; on a pruned one it must not exceed the stored r.
    #[arg(long)]
    r: Option<usize>,
    /// Ranking JSON (required with --r on an unpruned checkpoint).
    #[arg(long)]
    ranking: Option<PathBuf>,
    /// Softmax temperature.
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    classes: PathBuf,
    /// Labeled manifest to score.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    ranking: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    /// Results CSV to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CaptionsArgs {
    /// Comma-separated class labels.
    #[arg(long)]
    labels: String,
}

fn main() {
    let cli = Cli::parse();
    init_logging(&cli.global);
    if let Some(n) = cli.global.threads {
        // Preprocessing parallelism only; every numeric result is
        // order-independent by construction.
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already initialized: {e}");
        }
    }
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn init_logging(global: &GlobalOpts) {
    let env = env_logger::Env::new().filter_or("TINYCLAP_LOG", "info");
    let mut builder = env_logger::Builder::from_env(env);
    if let Some(level) = &global.log_level {
        builder.parse_filters(level);
    }
    builder.target(env_logger::Target::Stderr).init();
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Distill(a) => cmd_distill(&cli.global, a),
        Command::Rank(a) => cmd_rank(&cli.global, a),
        Command::Prune(a) => cmd_prune(&cli.global, a),
        Command::Embed(a) => cmd_embed(&cli.global, a),
        Command::Classify(a) => cmd_classify(&cli.global, a),
        Command::Eval(a) => cmd_eval(&cli.global, a),
        Command::Captions(a) => cmd_captions(&cli.global, a),
    }
}

fn log_config(command: &str, resolved: serde_json::Value) {
    log::info!("resolved config: {}", json!({ "command": command, "config": resolved }));
}

fn resolve_architecture(a: &DistillArgs, teacher_dim: usize) -> Result<(PhiNetConfig, Option<String>)> {
    let scaling_given =
        a.alpha.is_some() || a.beta.is_some() || a.t0.is_some() || a.n_blocks.is_some();
    match (&a.preset, scaling_given) {
        (Some(_), true) => Err(Error::contract(
            "--preset and the scaling flags (--alpha/--beta/--t0/--n-blocks) are mutually exclusive",
        )),
        (Some(name), false) => {
            let cfg = PhiNetConfig::preset(name)?;
            if cfg.latent_dim != teacher_dim {
                return Err(Error::contract(format!(
                    "preset {name} projects into {} dimensions but the teacher provides {}",
                    cfg.latent_dim, teacher_dim
                )));
            }
            Ok((cfg, Some(name.clone())))
        }
        (None, true) => {
            let (alpha, beta, t0, n) = match (a.alpha, a.beta, a.t0, a.n_blocks) {
                (Some(alpha), Some(beta), Some(t0), Some(n)) => (alpha, beta, t0, n),
                _ => {
                    return Err(Error::contract(
                        "custom architecture needs all of --alpha, --beta, --t0, --n-blocks",
                    ))
                }
            };
            Ok((PhiNetConfig::new(alpha, beta, t0, n, teacher_dim)?, None))
        }
        (None, false) => Err(Error::contract(
            "choose an architecture: --preset NAME, or --alpha/--beta/--t0/--n-blocks",
        )),
    }
}

fn cmd_distill(global: &GlobalOpts, a: DistillArgs) -> Result<()> {
    let teacher: TeacherProvider<f32> = match (&a.teacher, &a.teacher_ckpt) {
        (Some(path), None) => TeacherProvider::Table(read_temb(path)?),
        (None, Some(path)) => {
            let (enc, _) = load_checkpoint::<f32>(path)?;
            TeacherProvider::Frozen(enc)
        }
        _ => {
            return Err(Error::contract(
                "provide exactly one teacher: --teacher TABLE.temb or --teacher-ckpt ENC.tclp",
            ))
        }
    };

    let (arch, preset) = resolve_architecture(&a, teacher.dim())?;
    let fe = FrontendConfig { crop_seconds: a.crop_seconds, ..FrontendConfig::default() };
    let cfg = DistillConfig {
        epochs_stage1: a.epochs,
        epochs_stage2: a.epochs_stage2,
        lr_stage1: a.lr,
        lr_stage2: a.lr_stage2,
        batch_size: a.batch,
        holdout_fraction: a.holdout,
        seed: global.seed,
    };
    log_config(
        "distill",
        json!({
            "manifest": a.manifest, "teacher": a.teacher, "teacher_ckpt": a.teacher_ckpt,
            "arch": arch, "preset": preset, "out": a.out,
            "epochs": cfg.epochs_stage1, "epochs_stage2": cfg.epochs_stage2,
            "lr": cfg.lr_stage1, "lr_stage2": cfg.lr_stage2, "batch": cfg.batch_size,
            "crop_seconds": fe.crop_seconds, "holdout": cfg.holdout_fraction,
            "seed": global.seed,
        }),
    );

    let manifest = DatasetManifest::read(&a.manifest)?;
    let ds = load_dataset(&manifest, fe.mel.sample_rate)?;
    let teacher_hash = teacher.state_hash();
    log::info!("loaded {} clips; teacher state {}", ds.len(), teacher_hash);

    let mut enc = StudentEncoder::<f32>::new(arch, global.seed)?;
    let stage1 = train_stage1(&mut enc, &ds, &teacher, &fe, &cfg)?;
    log_epochs("stage1", &stage1, 0);
    let stage2 = train_stage2(&mut enc, &ds, &teacher, &fe, &cfg)?;
    log_epochs("stage2", &stage2, cfg.epochs_stage1);
    debug_assert_eq!(teacher.state_hash(), teacher_hash);

    let meta = CheckpointMeta { preset, seed: global.seed, frontend: fe, prune: None };
    save_checkpoint(&a.out, &enc, &meta)?;

    let report_path = report_path_for(&a.out);
    let mut csv = String::from(TrainReport::CSV_HEADER);
    csv.push('\n');
    csv.push_str(&stage1.csv_rows(0));
    csv.push_str(&stage2.csv_rows(cfg.epochs_stage1));
    std::fs::write(&report_path, csv).map_err(|e| Error::io(&report_path, e))?;

    println!(
        "{}",
        json!({
            "checkpoint": a.out,
            "report": report_path,
            "params": enc.param_count(),
            "final_train_loss": stage1.final_train_loss().or(stage2.final_train_loss()),
            "final_holdout_cosine": stage2.final_holdout_cosine().or(stage1.final_holdout_cosine()),
        })
    );
    Ok(())
}

fn log_epochs(stage: &str, report: &TrainReport, offset: usize) {
    for r in &report.records {
        log::info!(
            "{stage} epoch {} loss {:.6} train cosine {:.6} holdout {} ({:.1}s)",
            r.epoch + offset,
            r.train_loss,
            r.train_cosine,
            r.holdout_cosine.map_or("-".to_string(), |c| format!("{c:.6}")),
            r.seconds
        );
    }
}

fn report_path_for(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".train.csv");
    out.with_file_name(name)
}

fn cmd_rank(global: &GlobalOpts, a: RankArgs) -> Result<()> {
    log_config(
        "rank",
        json!({ "ckpt": a.ckpt, "manifest": a.manifest, "out": a.out, "seed": global.seed }),
    );
    let (enc, header) = load_checkpoint::<f32>(&a.ckpt)?;
    let manifest = DatasetManifest::read(&a.manifest)?;
    let ds = load_dataset(&manifest, header.frontend.mel.sample_rate)?;
    let ranking = rank_latents(&enc, &ds, &header.frontend, manifest_fingerprint(&manifest))?;
    let body = serde_json::to_string_pretty(&ranking)
        .map_err(|e| Error::format(format!("ranking serialization failed: {e}")))?;
    std::fs::write(&a.out, body).map_err(|e| Error::io(&a.out, e))?;
    println!(
        "{}",
        json!({
            "out": a.out,
            "dim": ranking.dim,
            "leading": &ranking.order[..ranking.dim.min(8)],
        })
    );
    Ok(())
}

fn read_ranking(path: &Path) -> Result<PruneRanking> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ranking: PruneRanking = serde_json::from_str(&body)
        .map_err(|e| Error::format(format!("{}: not a ranking file: {e}", path.display())))?;
    ranking.validate()?;
    Ok(ranking)
}

fn cmd_prune(global: &GlobalOpts, a: PruneArgs) -> Result<()> {
    log_config(
        "prune",
        json!({ "ckpt": a.ckpt, "ranking": a.ranking, "r": a.r, "out": a.out, "seed": global.seed }),
    );
    let (enc, header) = load_checkpoint::<f32>(&a.ckpt)?;
    if header.prune.is_some() {
        return Err(Error::contract(
            "checkpoint is already pruned; rank and prune from the full checkpoint instead",
        ));
    }
    let ranking = read_ranking(&a.ranking)?;
    let (pruned, info) = prune_encoder(&enc, &ranking, a.r)?;
    let meta = CheckpointMeta {
        preset: header.preset.clone(),
        seed: header.seed,
        frontend: header.frontend.clone(),
        prune: Some(info.clone()),
    };
    save_checkpoint(&a.out, &pruned, &meta)?;
    println!(
        "{}",
        json!({
            "out": a.out,
            "r": info.r,
            "kept": info.indices,
            "params_before": enc.param_count(),
            "params_after": pruned.param_count(),
        })
    );
    Ok(())
}

/// Decode, rate-match, center-crop, and featurize one audio file using the
/// checkpoint's stored frontend.
fn features_for(path: &Path, fe: &FrontendConfig) -> Result<tinyclap_core::frontend::MelSpectrogram> {
    let wav = read_wav(path)?;
    let clip = AudioClip::new(wav.samples, wav.sample_rate)?;
    let clip = resample(&clip, fe.mel.sample_rate)?;
    let cropped = center_crop(&clip, fe.crop_seconds)?;
    let mel = mel_spectrogram(&cropped, &fe.mel)?;
    normalize_freq_axis(&mel)
}

fn cmd_embed(global: &GlobalOpts, a: EmbedArgs) -> Result<()> {
    log_config(
        "embed",
        json!({ "ckpt": a.ckpt, "audio": a.audio, "out": a.out, "seed": global.seed }),
    );
    let (enc, header) = load_checkpoint::<f32>(&a.ckpt)?;
    let mel = features_for(&a.audio, &header.frontend)?;
    let emb = enc.embed(&[mel])?;
    let vector: Vec<f32> = emb.data().to_vec();
    let id = a
        .audio
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "clip".to_string());
    if let Some(out) = &a.out {
        let mut table = EmbeddingTable::new(vector.len());
        table.push(id.clone(), vector.clone())?;
        write_temb(out, &table)?;
    }
    println!("{}", json!({ "id": id, "dim": vector.len(), "embedding": vector }));
    Ok(())
}

/// Works out which latent coordinates score a clip, from the checkpoint's
/// prune state and the --r/--ranking flags. Returns the effective r and
/// the index set (None = full width).
fn resolve_selection(
    header: &CheckpointHeader,
    enc_fingerprint: &str,
    r: Option<usize>,
    ranking: Option<&Path>,
) -> Result<(usize, Option<Vec<usize>>, bool)> {
    match &header.prune {
        Some(info) => {
            if ranking.is_some() {
                return Err(Error::contract(
                    "checkpoint is already pruned; --ranking does not apply",
                ));
            }
            let r = r.unwrap_or(info.r);
            if r == 0 || r > info.r {
                return Err(Error::contract(format!(
                    "r = {r} is outside the valid range 1..={} for this pruned checkpoint",
                    info.r
                )));
            }
            Ok((r, Some(info.indices[..r].to_vec()), true))
        }
        None => match r {
            None => Ok((header.config.latent_dim, None, false)),
            Some(r) => {
                let path = ranking.ok_or_else(|| {
                    Error::contract("--r on an unpruned checkpoint needs --ranking RANKING.json")
                })?;
                let ranking = read_ranking(path)?;
                if ranking.encoder_fingerprint != enc_fingerprint {
                    return Err(Error::contract(format!(
                        "ranking was computed from a different encoder (fingerprint {}, \
                         this checkpoint is {})",
                        ranking.encoder_fingerprint, enc_fingerprint
                    )));
                }
                if ranking.dim != header.config.latent_dim {
                    return Err(Error::contract(format!(
                        "ranking covers {} dimensions but the checkpoint projects into {}",
                        ranking.dim, header.config.latent_dim
                    )));
                }
                Ok((r, Some(ranking.top_indices(r)?), false))
            }
        },
    }
}

fn selection_of<'a>(indices: &'a Option<Vec<usize>>, pruned: bool) -> Selection<'a> {
    match indices {
        None => Selection::Full,
        Some(idx) if pruned => Selection::TextOnly(idx),
        Some(idx) => Selection::Both(idx),
    }
}

fn cmd_classify(global: &GlobalOpts, a: ClassifyArgs) -> Result<()> {
    log_config(
        "classify",
        json!({
            "ckpt": a.ckpt, "classes": a.classes, "audio": a.audio,
            "r": a.r, "ranking": a.ranking, "tau": a.tau, "seed": global.seed,
        }),
    );
    let (enc, header) = load_checkpoint::<f32>(&a.ckpt)?;
    let classes = ClassEmbeddingSet::<f32>::from_table(&read_temb(&a.classes)?)?;
    let (r, indices, pruned) =
        resolve_selection(&header, &enc.fingerprint(), a.r, a.ranking.as_deref())?;

    let mel = features_for(&a.audio, &header.frontend)?;
    let latent = enc.embed_raw(&[mel])?;
    // A pruned checkpoint stores rows in ranking order, so its top-r
    // subspace is a prefix. An unpruned one stays full width; the
    // selection cuts both sides during scoring.
    let width = if pruned { r } else { latent.data().len() };
    let student = &latent.data()[..width];
    let prediction = classify(student, &classes, selection_of(&indices, pruned), a.tau)?;

    println!(
        "{}",
        json!({
            "label": prediction.predicted_label,
            "probabilities": prediction.probabilities,
            "classes": classes.labels(),
            "similarities": prediction.similarities,
            "r": r,
        })
    );
    Ok(())
}

fn cmd_eval(global: &GlobalOpts, a: EvalArgs) -> Result<()> {
    log_config(
        "eval",
        json!({
            "ckpt": a.ckpt, "classes": a.classes, "manifest": a.manifest,
            "r": a.r, "ranking": a.ranking, "tau": a.tau, "out": a.out, "seed": global.seed,
        }),
    );
    let (enc, header) = load_checkpoint::<f32>(&a.ckpt)?;
    let classes = ClassEmbeddingSet::<f32>::from_table(&read_temb(&a.classes)?)?;
    let (r, indices, pruned) =
        resolve_selection(&header, &enc.fingerprint(), a.r, a.ranking.as_deref())?;

    let manifest = DatasetManifest::read(&a.manifest)?;
    manifest.labels_required()?;
    let ds = load_dataset(&manifest, header.frontend.mel.sample_rate)?;
    let selection = selection_of(&indices, pruned);

    let all: Vec<usize> = (0..ds.len()).collect();
    let mels = eval_mels(&ds, &all, &header.frontend)?;
    let latents = enc.embed_raw(&mels)?;
    let latents = slice_latents(latents, r, pruned)?;
    let labels: Vec<&str> = ds
        .clips
        .iter()
        .map(|c| {
            c.label
                .as_deref()
                .ok_or_else(|| Error::data(format!("clip {:?} has no label", c.id)))
        })
        .collect::<Result<_>>()?;
    let outcome = evaluate_latents(&latents, &labels, &classes, selection, a.tau)?;

    let params = params_at(&header, r)?;
    let mut csv = String::from("r,accuracy,params\n");
    csv.push_str(&format!("{r},{:.6},{params}\n\n", outcome.accuracy()));
    csv.push_str(&outcome.confusion_csv());
    std::fs::write(&a.out, csv).map_err(|e| Error::io(&a.out, e))?;

    println!(
        "{}",
        json!({
            "out": a.out,
            "r": r,
            "accuracy": outcome.accuracy(),
            "params": params,
            "n": outcome.n,
        })
    );
    Ok(())
}

/// Keep the first `r` columns of each projection row (pruned checkpoints
/// store rows in ranking order, so the prefix is the top-r subspace).
fn slice_latents(
    latents: tinyclap_core::tensor::Tensor<f32>,
    r: usize,
    pruned: bool,
) -> Result<tinyclap_core::tensor::Tensor<f32>> {
    let w = latents.shape()[1];
    if !pruned || r == w {
        return Ok(latents);
    }
    let n = latents.shape()[0];
    let mut data = Vec::with_capacity(n * r);
    for i in 0..n {
        data.extend_from_slice(&latents.data()[i * w..i * w + r]);
    }
    tinyclap_core::tensor::Tensor::from_vec(vec![n, r], data, "sliced latents")
}

/// Parameter count at latent width r: identical body, r projection rows.
fn params_at(header: &CheckpointHeader, r: usize) -> Result<usize> {
    let cfg = PhiNetConfig::new(
        header.config.alpha,
        header.config.beta,
        header.config.t_zero,
        header.config.num_blocks,
        r,
    )?;
    Ok(cfg.param_count())
}

fn cmd_captions(global: &GlobalOpts, a: CaptionsArgs) -> Result<()> {
    log_config("captions", json!({ "labels": a.labels, "seed": global.seed }));
    let labels: Vec<&str> = a.labels.split(',').collect();
    let mut lines = Vec::with_capacity(labels.len());
    for label in labels {
        lines.push(build_caption(label)?);
    }
    for line in lines {
        println!("{line}");
    }
    Ok(())
}
