//! Subcommand implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::Device;
use clap::{Args, Parser, Subcommand, ValueEnum};
use elf_core::audio::write_wav;
use elf_core::blending::{load_blend_spec, parse_blend_arg, read_blend_file, synthesize_blend};
use elf_core::checkpoint::{Checkpoint, ModelKind};
use elf_core::codebook::{build_codebook, load_codebook, save_codebook, SpeakerCodebook};
use elf_core::config::{PipelineConfig, WORK_DIR_ENV};
use elf_core::data::{by_speaker, load_dataset, preprocess, Clip, Manifest};
use elf_core::latents::{cosine_similarity, encode_speaker, extract_mu_frames, parse_vector};
use elf_core::sfen::{check_clips, Sfen, SfenTrainer};
use elf_core::training::{latest_checkpoint, LossLog, TrainConfig};
use elf_core::tts::train::check_examples;
use elf_core::tts::{init_decoder_from_sfen, SynthesisOptions, Tts, TtsExample, TtsTrainer};
use elf_core::Error;

pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_PARTIAL: u8 = 3;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_)
            | Error::Input(_)
            | Error::ModelKind { .. }
            | Error::ShapeMismatch(_) => EXIT_VALIDATION,
            _ => EXIT_RUNTIME,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn validation(msg: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_VALIDATION,
        message: msg.into(),
    }
}

type Outcome = std::result::Result<(), Failure>;

#[derive(Debug, Parser)]
#[command(
    name = "elf",
    version,
    about = "Speech feature codebooks and codebook-conditioned speech synthesis"
)]
pub struct Cli {
    /// Pipeline configuration (TOML). Built-in toy settings when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for training, clustering and synthesis noise.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for preprocessing and codebook building.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Override a config leaf, e.g. `--set training.max_steps=100`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Trim, resample and analyse every manifest clip into the work dir.
    Preprocess(PreprocessArgs),
    /// Train the speech feature encoding network.
    TrainSfen(TrainArgs),
    /// Train the codebook-fused TTS model.
    TrainTts(TrainTtsArgs),
    /// Train the codebook-only prior variant from random initialization.
    TrainFts(TrainArgs),
    /// Cluster encoded frames into per-speaker codebooks.
    BuildCodebook(CodebookArgs),
    /// Synthesize a WAV file.
    Synth(SynthArgs),
    /// Write per-frame latent means and scales of one speaker.
    ExportLatents(ExportArgs),
    /// Cosine similarity of two vectors stored as text.
    Cosine(CosineArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Manifest path; defaults to `paths.data_root/paths.manifest`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Continue from the newest checkpoint in the work dir.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct TrainTtsArgs {
    #[arg(long)]
    pub resume: bool,
    /// Copy the later decoder stages and the discriminator from this SFEN
    /// checkpoint before training.
    #[arg(long, value_name = "CKPT")]
    pub init_from_sfen: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CodebookArgs {
    /// Speaker to build; see `--all`.
    pub speaker: Option<String>,
    #[arg(long, conflicts_with = "speaker")]
    pub all: bool,
    /// SFEN checkpoint; the newest in the work dir when omitted.
    #[arg(long)]
    pub sfen: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelArg {
    Tts,
    Fts,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub text: String,
    #[arg(long, conflicts_with_all = ["blend", "blend_file"])]
    pub codebook: Option<PathBuf>,
    /// Inline blend, `path:weight,path:weight`.
    #[arg(long, conflicts_with = "blend_file")]
    pub blend: Option<String>,
    /// Blend spec TOML with `[[speakers]]` entries.
    #[arg(long)]
    pub blend_file: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "tts")]
    pub model: ModelArg,
    /// Model checkpoint; the newest of the chosen kind when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0.8)]
    pub duration_noise: f64,
    #[arg(long, default_value_t = 0.667)]
    pub prior_noise: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    pub speaker: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub sfen: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CosineArgs {
    pub a: PathBuf,
    pub b: PathBuf,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p, &cli.overrides)?,
        None => PipelineConfig::from_toml(&PipelineConfig::toy().to_toml()?, &cli.overrides)?,
    };
    if let Some(s) = cli.seed {
        cfg.training.seed = s;
        cfg.codebook.seed = s;
    }
    if cli.jobs == 0 {
        return Err(validation("--jobs must be at least 1"));
    }
    Ok(cfg.with_work_dir_override(std::env::var(WORK_DIR_ENV).ok().as_deref()))
}

pub fn run(cli: Cli) -> Outcome {
    if let Command::Cosine(a) = &cli.command {
        return cosine(a);
    }
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Preprocess(a) => cmd_preprocess(&cfg, a, cli.jobs),
        Command::TrainSfen(a) => train_sfen(&cfg, a),
        Command::TrainTts(a) => {
            train_tts(&cfg, ModelKind::Tts, a.resume, a.init_from_sfen.as_deref())
        }
        Command::TrainFts(a) => train_tts(&cfg, ModelKind::Fts, a.resume, None),
        Command::BuildCodebook(a) => cmd_build_codebook(&cfg, a, cli.jobs),
        Command::Synth(a) => synth(&cfg, a, cli.seed.unwrap_or(0)),
        Command::ExportLatents(a) => export_latents(&cfg, a),
        Command::Cosine(_) => unreachable!("handled above"),
    }
}

fn cmd_preprocess(cfg: &PipelineConfig, a: &PreprocessArgs, jobs: usize) -> Outcome {
    let manifest_path = a.manifest.clone().unwrap_or_else(|| cfg.manifest_path());
    let manifest = Manifest::read(&manifest_path)?;
    let base = manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .to_path_buf();
    let base = if a.manifest.is_some() {
        base
    } else {
        cfg.paths.data_root.clone()
    };
    let report = preprocess(
        &manifest,
        &base,
        &cfg.prep_config(),
        &cfg.dataset_dir(),
        jobs,
    )?;
    println!(
        "processed {} cached {} failed {}",
        report.processed.len(),
        report.cached.len(),
        report.failures.len()
    );
    for (id, msg) in &report.failures {
        println!("failed {id}: {msg}");
    }
    if report.failures.is_empty() {
        Ok(())
    } else {
        Err(Failure {
            code: EXIT_PARTIAL,
            message: format!(
                "{} of {} clips failed",
                report.failures.len(),
                manifest.entries.len()
            ),
        })
    }
}

fn dataset(cfg: &PipelineConfig) -> Result<Vec<Clip>, Failure> {
    if !cfg.dataset_dir().join("index.jsonl").is_file() {
        return Err(validation(format!(
            "no preprocessed dataset in {}; run preprocess first",
            cfg.dataset_dir().display()
        )));
    }
    let clips = load_dataset(&cfg.dataset_dir(), &cfg.audio)?;
    if clips.is_empty() {
        return Err(validation("dataset is empty; run preprocess first"));
    }
    Ok(clips)
}

fn resume_point(
    cfg: &PipelineConfig,
    kind: ModelKind,
    resume: bool,
) -> Result<Option<Checkpoint>, Failure> {
    if !resume {
        return Ok(None);
    }
    match latest_checkpoint(&cfg.checkpoint_dir(), kind)? {
        Some(p) => Ok(Some(Checkpoint::load_kind(&p, kind)?)),
        None => Err(validation(format!(
            "--resume: no {kind} checkpoint in {}",
            cfg.checkpoint_dir().display()
        ))),
    }
}

fn report_training(kind: ModelKind, step: u64, dir: &Path) {
    println!(
        "{kind} trained to step {step}; checkpoints in {}",
        dir.display()
    );
}

fn train_sfen(cfg: &PipelineConfig, a: &TrainArgs) -> Outcome {
    let clips = dataset(cfg)?;
    check_clips(&clips, &cfg.sfen)?;
    let dev = Device::Cpu;
    let mut trainer = match resume_point(cfg, ModelKind::Sfen, a.resume)? {
        Some(ck) => SfenTrainer::resume(&ck, &cfg.training, clips.len(), &dev)?,
        None => {
            let model = Sfen::new(
                &cfg.sfen,
                &cfg.audio,
                cfg.training.seed,
                candle_core::DType::F32,
                &dev,
            )?;
            SfenTrainer::new(model, &cfg.training, clips.len())?
        }
    };
    let mut log = LossLog::append(&cfg.loss_log_path(ModelKind::Sfen))?;
    trainer.run(&clips, &cfg.checkpoint_dir(), &mut log)?;
    report_training(ModelKind::Sfen, trainer.step(), &cfg.checkpoint_dir());
    Ok(())
}

fn load_all_codebooks(
    cfg: &PipelineConfig,
    clips: &[Clip],
) -> Result<BTreeMap<String, SpeakerCodebook>, Failure> {
    let mut out = BTreeMap::new();
    for speaker in by_speaker(clips).keys() {
        let path = cfg.codebook_path(speaker);
        if !path.exists() {
            return Err(validation(format!(
                "missing codebook {} for speaker `{speaker}`; run build-codebook",
                path.display()
            )));
        }
        out.insert(speaker.clone(), load_codebook(&path)?);
    }
    Ok(out)
}

fn train_tts(
    cfg: &PipelineConfig,
    kind: ModelKind,
    resume: bool,
    init_from: Option<&Path>,
) -> Outcome {
    let model_cfg = if kind == ModelKind::Fts {
        &cfg.fts
    } else {
        &cfg.tts
    };
    let clips = dataset(cfg)?;
    let codebooks = load_all_codebooks(cfg, &clips)?;
    let dev = Device::Cpu;
    let train: &TrainConfig = &cfg.training;
    let resumed = resume_point(cfg, kind, resume)?;
    if resumed.is_some() && init_from.is_some() {
        return Err(validation(
            "--resume and --init-from-sfen are mutually exclusive",
        ));
    }
    let model = match &resumed {
        Some(ck) => Tts::from_checkpoint(ck, candle_core::DType::F32, &dev)?,
        None => Tts::new(
            model_cfg,
            &cfg.audio,
            train.seed,
            candle_core::DType::F32,
            &dev,
        )?,
    };
    let examples = clips
        .iter()
        .map(|c| TtsExample::from_clip(c, &model.tokenizer))
        .collect::<elf_core::Result<Vec<_>>>()?;
    check_examples(&examples, &codebooks, &model)?;
    if let Some(path) = init_from {
        let sfen = Checkpoint::load_kind(path, ModelKind::Sfen)?;
        let copied = init_decoder_from_sfen(&model, &sfen)?;
        println!(
            "initialized {} tensors from {}",
            copied.len(),
            path.display()
        );
    }
    let mut trainer = match resumed {
        Some(ck) => TtsTrainer::resume(&ck, train, examples.len(), &dev)?,
        None => TtsTrainer::new(model, train, examples.len())?,
    };
    let mut log = LossLog::append(&cfg.loss_log_path(kind))?;
    trainer.run(&examples, &codebooks, &cfg.checkpoint_dir(), &mut log)?;
    report_training(kind, trainer.step(), &cfg.checkpoint_dir());
    Ok(())
}

fn sfen_model(cfg: &PipelineConfig, explicit: Option<&Path>) -> Result<Sfen, Failure> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => latest_checkpoint(&cfg.checkpoint_dir(), ModelKind::Sfen)?
            .ok_or_else(|| validation("no SFEN checkpoint; run train-sfen or pass --sfen"))?,
    };
    Ok(Sfen::load(&path, &Device::Cpu)?)
}

fn speaker_clips<'a>(clips: &'a [Clip], speaker: &str) -> Result<Vec<&'a Clip>, Failure> {
    let groups = by_speaker(clips);
    groups.get(speaker).cloned().ok_or_else(|| {
        let known: Vec<&str> = groups.keys().map(String::as_str).collect();
        validation(format!(
            "unknown speaker `{speaker}`; known: {}",
            known.join(", ")
        ))
    })
}

fn cmd_build_codebook(cfg: &PipelineConfig, a: &CodebookArgs, jobs: usize) -> Outcome {
    let clips = dataset(cfg)?;
    let speakers: Vec<String> = match (&a.speaker, a.all) {
        (Some(s), false) => {
            speaker_clips(&clips, s)?;
            vec![s.clone()]
        }
        (None, true) => by_speaker(&clips).keys().cloned().collect(),
        _ => return Err(validation("name a speaker or pass --all")),
    };
    let sfen = sfen_model(cfg, a.sfen.as_deref())?;
    let cluster = cfg.codebook.cluster_config();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Failure {
            code: EXIT_RUNTIME,
            message: e.to_string(),
        })?;
    let results: Vec<Result<SpeakerCodebook, Failure>> = pool.install(|| {
        use rayon::prelude::*;
        speakers
            .par_iter()
            .map(|s| {
                let own = speaker_clips(&clips, s)?;
                let frames = extract_mu_frames(&own, &sfen)?;
                let cb = build_codebook(&frames, &cluster)?;
                save_codebook(&cb, &cfg.codebook_path(s))?;
                Ok(cb)
            })
            .collect()
    });
    std::fs::create_dir_all(cfg.codebook_dir()).ok();
    for r in results {
        let cb = r?;
        println!(
            "{} frames={} k={} clustered={}",
            cb.speaker_id,
            cb.provenance.n_source_frames,
            cb.size(),
            cb.clustered
        );
    }
    Ok(())
}

fn synth(cfg: &PipelineConfig, a: &SynthArgs, seed: u64) -> Outcome {
    let kind = match a.model {
        ModelArg::Tts => ModelKind::Tts,
        ModelArg::Fts => ModelKind::Fts,
    };
    let ckpt = match &a.checkpoint {
        Some(p) => p.clone(),
        None => latest_checkpoint(&cfg.checkpoint_dir(), kind)?.ok_or_else(|| {
            validation(format!(
                "no {kind} checkpoint; train first or pass --checkpoint"
            ))
        })?,
    };
    let model = Tts::load(&ckpt, kind, &Device::Cpu)?;
    let seq = model.encode_text(&a.text)?;
    let opts = SynthesisOptions {
        duration_noise_scale: a.duration_noise,
        prior_noise_scale: a.prior_noise,
        seed,
        ..SynthesisOptions::default()
    };
    let out = match (&a.codebook, &a.blend, &a.blend_file) {
        (Some(p), None, None) => model.synthesize(&seq, &load_codebook(p)?, &opts)?,
        (None, Some(inline), None) => {
            let spec = load_blend_spec(&parse_blend_arg(inline)?, Path::new(""))?;
            synthesize_blend(&model, &seq, &spec, &opts)?
        }
        (None, None, Some(file)) => {
            let base = file.parent().unwrap_or(Path::new(""));
            let spec = load_blend_spec(&read_blend_file(file)?, base)?;
            synthesize_blend(&model, &seq, &spec, &opts)?
        }
        _ => {
            return Err(validation(
                "give exactly one of --codebook, --blend, --blend-file",
            ))
        }
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure {
            code: EXIT_RUNTIME,
            message: format!("{}: {e}", dir.display()),
        })?;
    }
    write_wav(&a.out, &out.wave)?;
    println!(
        "wrote {} ({:.2} s, {} frames, {} symbols)",
        a.out.display(),
        out.wave.duration_secs(),
        out.n_frames(),
        seq.len()
    );
    Ok(())
}

fn export_latents(cfg: &PipelineConfig, a: &ExportArgs) -> Outcome {
    let clips = dataset(cfg)?;
    let own = speaker_clips(&clips, &a.speaker)?;
    let sfen = sfen_model(cfg, a.sfen.as_deref())?;
    let dump = encode_speaker(&own, &sfen)?;
    dump.save(&a.out)?;
    println!(
        "{} frames={} dim={} -> {}",
        dump.speaker_id,
        dump.mu.nrows(),
        dump.mu.ncols(),
        a.out.display()
    );
    Ok(())
}

fn read_vector(path: &Path) -> Result<Vec<f64>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure {
        code: EXIT_RUNTIME,
        message: format!("{}: {e}", path.display()),
    })?;
    parse_vector(&text).map_err(|e| validation(format!("{}: {e}", path.display())))
}

fn cosine(a: &CosineArgs) -> Outcome {
    let va = read_vector(&a.a)?;
    let vb = read_vector(&a.b)?;
    let c = cosine_similarity(&va, &vb).map_err(|e| match e {
        Error::Domain(m) | Error::Dimension(m) => validation(m),
        other => other.into(),
    })?;
    println!("{c:.6}");
    Ok(())
}
