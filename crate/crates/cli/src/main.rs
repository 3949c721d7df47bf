mod render;
mod settings;

use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use rollnet::eval::{evaluate, Predictor, DEFAULT_THRESHOLD};
use rollnet::midi::{events_to_smf, parse_midi, CorpusConfig, CorpusManifest, Split};
use rollnet::model::{load_checkpoint, predict, ModelConfig, ModelError, ModelParams, StepRecord, TrainConfig, TrainError, TrainingSet};
use rollnet::pipeline::{align_events, build_corpus, write_roll};
use rollnet::rolls::{read_prl, AnyRoll, InstrumentVocab};
use rollnet::synth::read_wav;

use settings::Settings;

/// Multitask pianoroll transcription toolkit.
#[derive(Parser)]
#[command(name = "rollnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat key=value settings file; flags take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (0 = all cores); ROLLNET_THREADS also sets this
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Args, Clone, Default)]
struct VocabArgs {
    /// Vocabulary file (key=value, one instrument per line)
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Comma-separated subset of the default eight instruments
    #[arg(long)]
    instruments: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus: MIDI, WAV, PRL labels and a manifest
    Corpus {
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        clips: Option<usize>,
        /// Seconds per clip
        #[arg(long)]
        seconds: Option<f64>,
        /// Fraction of clips in the train split
        #[arg(long)]
        split: Option<f64>,
        #[command(flatten)]
        vocab: VocabArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Train the network on a manifest's train split
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory for checkpoint.unw and loss.log
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after this many steps
        #[arg(long)]
        max_steps: Option<usize>,
        /// Encoder channel widths, e.g. 16,32,64,128
        #[arg(long)]
        widths: Option<String>,
        #[command(flatten)]
        vocab: VocabArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint (or the ground truth itself) on a split
    Eval {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use the labels as predictions instead of a model
        #[arg(long)]
        ground_truth: bool,
        /// train or test
        #[arg(long)]
        split: Option<Split>,
        #[arg(long)]
        threshold: Option<f32>,
        /// Directory for report.txt and records.tsv
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        vocab: VocabArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Transcribe a WAV file into pianoroll, pitch and instrument rolls
    Predict {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        wav: Option<PathBuf>,
        /// Output directory
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also render roll.png from the thresholded pianoroll
        #[arg(long)]
        png: bool,
        #[arg(long)]
        threshold: Option<f32>,
        #[command(flatten)]
        vocab: VocabArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Align a MIDI file to a recording and write the retimed MIDI
    Align {
        #[arg(long)]
        wav: Option<PathBuf>,
        #[arg(long)]
        midi: Option<PathBuf>,
        /// Output directory for aligned.mid and path.tsv
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        vocab: VocabArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Render a PRL pianoroll as a PNG image with a legend sidecar
    Render {
        /// Input .prl file (pianoroll, or probabilities to threshold)
        #[arg(long)]
        roll: Option<PathBuf>,
        /// Output .png path
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f32>,
        #[command(flatten)]
        vocab: VocabArgs,
        #[command(flatten)]
        common: Common,
    },
}

/// Failure classes with distinct exit codes.
#[derive(Debug)]
enum Failure {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Numeric(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }
}

trait Classify<T> {
    fn usage(self) -> Result<T, Failure>;
    fn data(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
    fn data(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Data(e.into()))
    }
}

fn is_numeric(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        matches!(c.downcast_ref::<ModelError>(), Some(ModelError::NonFinite(_)))
            || matches!(c.downcast_ref::<TrainError>(), Some(TrainError::Model(ModelError::NonFinite(_))))
    })
}

fn setup(common: &Common) -> Result<Settings, Failure> {
    let mut s = Settings::load(common.config.as_deref()).usage()?;
    let n = s.threads(common.threads).usage()?;
    if n > 0 {
        // fails only if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(s)
}

fn resolve_vocab(s: &mut Settings, args: &VocabArgs, corpus_dir: Option<&Path>) -> Result<InstrumentVocab, Failure> {
    if let Some(path) = s.get_opt::<String>("vocab", args.vocab.as_ref().map(|p| p.display().to_string())).usage()? {
        let text = fs::read_to_string(&path).with_context(|| format!("reading vocabulary {path}")).data()?;
        return InstrumentVocab::parse(&text).data();
    }
    if let Some(list) = s.get_opt::<String>("instruments", args.instruments.clone()).usage()? {
        let names: Vec<&str> = list.split(',').map(str::trim).collect();
        return InstrumentVocab::default8()
            .subset(names.join("+"), &names)
            .ok_or_else(|| anyhow!("unknown instrument in `{list}`"))
            .usage();
    }
    if let Some(file) = corpus_dir.map(|d| d.join("vocab.txt")).filter(|f| f.exists()) {
        let text = fs::read_to_string(&file).data()?;
        return InstrumentVocab::parse(&text).data();
    }
    Ok(InstrumentVocab::default8())
}

fn parse_widths(text: &str) -> Result<Vec<usize>> {
    text.split(',').map(|w| w.trim().parse::<usize>().map_err(|_| anyhow!("bad channel width `{w}`"))).collect()
}

fn manifest_dir(p: &Path) -> PathBuf {
    p.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Corpus { seed, out, clips, seconds, split, vocab, common } => {
            let mut s = setup(&common)?;
            let out: PathBuf = s.require("out", out.map(|p| p.display().to_string())).usage()?.into();
            let vocab = resolve_vocab(&mut s, &vocab, None)?;
            let mut cfg = CorpusConfig::new(vocab);
            let seed = s.get("seed", seed, 7).usage()?;
            cfg.n_clips = s.get("clips", clips, cfg.n_clips).usage()?;
            cfg.clip_seconds = s.get("seconds", seconds, cfg.clip_seconds).usage()?;
            cfg.split_fraction = s.get("split", split, cfg.split_fraction).usage()?;
            let m = build_corpus(seed, &cfg, &out).map_err(|e| match e {
                rollnet::pipeline::PipelineError::Corpus(rollnet::midi::CorpusError::Config(_)) => Failure::Usage(e.into()),
                e => Failure::Data(e.into()),
            })?;
            s.write_to(&out).data()?;
            println!(
                "wrote {} clips ({} train, {} test) to {}",
                m.entries.len(),
                m.split(Split::Train).count(),
                m.split(Split::Test).count(),
                out.display()
            );
        }
        Command::Train { manifest, out, epochs, batch_size, lr, seed, max_steps, widths, vocab, common } => {
            let mut s = setup(&common)?;
            let manifest_path: PathBuf = s.require("manifest", manifest.map(|p| p.display().to_string())).usage()?.into();
            let out: PathBuf = s.require("out", out.map(|p| p.display().to_string())).usage()?.into();
            let m = CorpusManifest::load(&manifest_path).data()?;
            let vocab = resolve_vocab(&mut s, &vocab, Some(&manifest_dir(&manifest_path)))?;
            let tc = TrainConfig {
                epochs: s.get("epochs", epochs, 100).usage()?,
                batch_size: s.get("batch_size", batch_size, 8).usage()?,
                lr: s.get("lr", lr, 0.005).usage()?,
                seed: s.get("seed", seed, 0).usage()?,
                max_steps: s.get_opt("max_steps", max_steps).usage()?,
            };
            let mut mc = ModelConfig::new(vocab.len(), vocab.id());
            let w = s.get("widths", widths, "16,32,64,128".to_string()).usage()?;
            mc.widths = parse_widths(&w).usage()?;
            let mut params = ModelParams::<f32>::init(mc, tc.seed).usage()?;
            let data = TrainingSet::load(&m, Split::Train, vocab.len(), params.config().n_bins).data()?;
            for (id, why) in &data.skipped {
                eprintln!("warning: skipped clip {id}: {why}");
            }
            fs::create_dir_all(&out).data()?;
            s.write_to(&out).data()?;
            let mut log = format!("{}\n", StepRecord::HEADER);
            let records = rollnet::model::train(&mut params, &data, &tc, Some(&out), |r| {
                log::info!("{}", r.to_line());
            })
            .map_err(|e| {
                let e = anyhow::Error::from(e);
                if is_numeric(&e) {
                    Failure::Numeric(e)
                } else {
                    Failure::Data(e)
                }
            })?;
            for r in &records {
                log.push_str(&r.to_line());
                log.push('\n');
            }
            fs::write(out.join("loss.log"), log).data()?;
            let last = records.last().map_or(f64::NAN, |r| r.loss.total());
            println!(
                "trained {} steps on {} segments from {} clips ({} skipped); final loss {last:.6}",
                records.len(),
                data.segments.len(),
                data.clips,
                data.skipped.len()
            );
        }
        Command::Eval { manifest, checkpoint, ground_truth, split, threshold, out, vocab, common } => {
            let mut s = setup(&common)?;
            let manifest_path: PathBuf = s.require("manifest", manifest.map(|p| p.display().to_string())).usage()?.into();
            let m = CorpusManifest::load(&manifest_path).data()?;
            let vocab = resolve_vocab(&mut s, &vocab, Some(&manifest_dir(&manifest_path)))?;
            let split = s.get("split", split, Split::Test).usage()?;
            let threshold = s.get("threshold", threshold, DEFAULT_THRESHOLD).usage()?;
            let ground_truth = s.get("ground_truth", ground_truth.then_some(true), false).usage()?;
            let report = if ground_truth {
                evaluate::<f32>(Predictor::GroundTruth, &m, split, &vocab, threshold).data()?
            } else {
                let path: PathBuf = s
                    .require("checkpoint", checkpoint.map(|p| p.display().to_string()))
                    .map_err(|e| Failure::Usage(e.context("pass --checkpoint or --ground-truth")))?
                    .into();
                let ckpt = load_checkpoint::<f32>(&path).data()?;
                ckpt.check_vocab(&vocab).data()?;
                evaluate(Predictor::Model(&ckpt.params), &m, split, &vocab, threshold).data()?
            };
            print!("{}", report.to_table());
            if let Some(out) = s.get_opt::<String>("out", out.map(|p| p.display().to_string())).usage()? {
                let out = PathBuf::from(out);
                s.write_to(&out).data()?;
                fs::write(out.join("report.txt"), report.to_table()).data()?;
                fs::write(out.join("records.tsv"), report.to_records()).data()?;
            }
        }
        Command::Predict { checkpoint, wav, out, png, threshold, vocab, common } => {
            let mut s = setup(&common)?;
            let ckpt_path: PathBuf = s.require("checkpoint", checkpoint.map(|p| p.display().to_string())).usage()?.into();
            let wav: PathBuf = s.require("wav", wav.map(|p| p.display().to_string())).usage()?.into();
            let out: PathBuf = s.require("out", out.map(|p| p.display().to_string())).usage()?.into();
            let png = s.get("png", png.then_some(true), false).usage()?;
            let threshold = s.get("threshold", threshold, DEFAULT_THRESHOLD).usage()?;
            let ckpt = load_checkpoint::<f32>(&ckpt_path).data()?;
            let explicit = vocab.vocab.is_some() || vocab.instruments.is_some();
            let vocab = resolve_vocab(&mut s, &vocab, None)?;
            let vocab = if explicit {
                ckpt.check_vocab(&vocab).data()?;
                vocab
            } else {
                vocab_from_id(&ckpt.params.config().vocab_id).unwrap_or(vocab)
            };
            let wave = read_wav(&wav).data()?;
            let pred = predict(&ckpt.params, &wave).map_err(|e| {
                let e = anyhow::Error::from(e);
                if is_numeric(&e) {
                    Failure::Numeric(e)
                } else {
                    Failure::Data(e)
                }
            })?;
            fs::create_dir_all(&out).data()?;
            s.write_to(&out).data()?;
            write_roll(&out.join("roll.prl"), pred.roll.clone()).data()?;
            write_roll(&out.join("pitch.prl"), pred.pitch.clone()).data()?;
            write_roll(&out.join("instrument.prl"), pred.instrument.clone()).data()?;
            if png {
                let names = instrument_names(&vocab, ckpt.params.config().n_instruments);
                let bin = pred.roll.binarize(threshold).usage()?;
                render::render_png(&bin, &names, &out.join("roll.png")).data()?;
            }
            println!(
                "{} frames x {} pitches x {} instruments written to {}",
                pred.roll.n_frames(),
                pred.roll.n_pitch(),
                pred.roll.n_instruments(),
                out.display()
            );
        }
        Command::Align { wav, midi, out, vocab, common } => {
            let mut s = setup(&common)?;
            let wav: PathBuf = s.require("wav", wav.map(|p| p.display().to_string())).usage()?.into();
            let midi: PathBuf = s.require("midi", midi.map(|p| p.display().to_string())).usage()?.into();
            let out: PathBuf = s.require("out", out.map(|p| p.display().to_string())).usage()?.into();
            let vocab = resolve_vocab(&mut s, &vocab, None)?;
            let wave = read_wav(&wav).data()?;
            let bytes = fs::read(&midi).with_context(|| format!("reading {}", midi.display())).data()?;
            let events = parse_midi(&bytes).data()?;
            let (path, warped) = align_events(&wave, &events, &vocab).data()?;
            fs::create_dir_all(&out).data()?;
            s.write_to(&out).data()?;
            fs::write(out.join("aligned.mid"), events_to_smf(&warped)).data()?;
            fs::write(out.join("path.tsv"), path.to_text()).data()?;
            println!("path of {} steps, normalized cost {:.6}", path.pairs.len(), path.normalized_cost);
        }
        Command::Render { roll, out, threshold, vocab, common } => {
            let mut s = setup(&common)?;
            let roll_path: PathBuf = s.require("roll", roll.map(|p| p.display().to_string())).usage()?.into();
            let out: PathBuf = s.require("out", out.map(|p| p.display().to_string())).usage()?.into();
            let threshold = s.get("threshold", threshold, DEFAULT_THRESHOLD).usage()?;
            let vocab = resolve_vocab(&mut s, &vocab, None)?;
            let file = File::open(&roll_path).with_context(|| format!("opening {}", roll_path.display())).data()?;
            let roll = match read_prl(BufReader::new(file)).data()? {
                AnyRoll::Pianoroll(r) => r,
                other => return Err(Failure::Usage(anyhow!("{:?} files cannot be rendered; pass a pianoroll", other.kind()))),
            };
            let roll = if roll.is_binary() { roll } else { roll.binarize(threshold).usage()? };
            let names = instrument_names(&vocab, roll.n_instruments());
            render::render_png(&roll, &names, &out).map_err(|e| {
                if roll.n_instruments() > render::PALETTE.len() {
                    Failure::Usage(e)
                } else {
                    Failure::Data(e)
                }
            })?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                s.write_to(dir).data()?;
            }
            println!("rendered {}x{} cells to {}", roll.n_frames(), roll.n_pitch(), out.display());
        }
    }
    Ok(())
}

/// Rebuilds a default-instrument subset from its id (names joined by `+`).
fn vocab_from_id(id: &str) -> Option<InstrumentVocab> {
    let full = InstrumentVocab::default8();
    if id == full.id() {
        return Some(full);
    }
    let names: Vec<&str> = id.split('+').collect();
    full.subset(id, &names)
}

fn instrument_names(vocab: &InstrumentVocab, m: usize) -> Vec<String> {
    (0..m).map(|i| if i < vocab.len() { vocab.name(i).to_string() } else { format!("instrument {i}") }).collect()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (Failure::Usage(e) | Failure::Data(e) | Failure::Numeric(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}
