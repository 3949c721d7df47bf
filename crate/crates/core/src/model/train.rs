use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use super::checkpoint::{save_checkpoint, CheckpointError};
use super::loss::{multitask_loss, LossBreakdown};
use super::tensor::Tensor;
use super::unet::ModelParams;
use super::ModelError;
use crate::dsp::{cqt, segment, DspError, Segment, Spectrogram};
use crate::midi::{CorpusManifest, ManifestEntry, Split};
use crate::rolls::{read_prl, Pianoroll, PrlError};
use crate::synth::{read_wav, SynthError};

#[derive(Debug, Error)]
pub enum ClipError {
    #[error("audio: {0}")]
    Audio(#[from] SynthError),
    #[error("labels: {0}")]
    Labels(#[from] PrlError),
    #[error("label file does not hold a pianoroll")]
    LabelKind,
    #[error("labels have {got} instruments, model expects {expected}")]
    Instruments { got: usize, expected: usize },
    #[error("labels cover {got} pitches, expected {expected}")]
    Pitches { got: usize, expected: usize },
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("cannot open {0}: {1}")]
    Open(String, std::io::Error),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("the {0} split has no usable clips")]
    EmptySplit(Split),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("invalid training config: {0}")]
    Config(String),
}

/// Reads one clip's audio features and pianoroll labels.
pub fn load_clip(manifest: &CorpusManifest, entry: &ManifestEntry) -> Result<(Spectrogram, Pianoroll), ClipError> {
    let wave = read_wav(&manifest.resolve(&entry.audio_path))?;
    let spec = cqt(&wave)?;
    let path = manifest.resolve(&entry.label_path());
    let f = File::open(&path).map_err(|e| ClipError::Open(path.display().to_string(), e))?;
    let labels = read_prl(BufReader::new(f))?.into_pianoroll().ok_or(ClipError::LabelKind)?;
    Ok((spec, labels))
}

/// Segments of every readable clip in a split. Unreadable clips are listed, not fatal.
#[derive(Debug, Default)]
pub struct TrainingSet {
    pub segments: Vec<Segment>,
    pub clips: usize,
    pub skipped: Vec<(String, String)>,
}

impl TrainingSet {
    pub fn load(manifest: &CorpusManifest, split: Split, n_instruments: usize, n_bins: usize) -> Result<Self, TrainError> {
        let entries: Vec<&ManifestEntry> = manifest.split(split).collect();
        let loaded: Vec<Result<Vec<Segment>, ClipError>> = entries
            .par_iter()
            .map(|e| {
                let (spec, labels) = load_clip(manifest, e)?;
                if labels.n_instruments() != n_instruments {
                    return Err(ClipError::Instruments { got: labels.n_instruments(), expected: n_instruments });
                }
                if labels.n_pitch() != n_bins {
                    return Err(ClipError::Pitches { got: labels.n_pitch(), expected: n_bins });
                }
                Ok(segment(&spec, &labels)?)
            })
            .collect();
        let mut set = TrainingSet::default();
        for (e, r) in entries.iter().zip(loaded) {
            match r {
                Ok(segs) => {
                    set.clips += 1;
                    set.segments.extend(segs);
                }
                Err(err) => {
                    log::warn!("skipping clip {}: {err}", e.clip_id);
                    set.skipped.push((e.clip_id.clone(), err.to_string()));
                }
            }
        }
        if set.segments.is_empty() {
            return Err(TrainError::EmptySplit(split));
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stop after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 1, batch_size: 8, lr: 0.005, seed: 0, max_steps: None }
    }
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: LossBreakdown,
}

impl StepRecord {
    pub const HEADER: &'static str = "step\tl_roll\tl_p\tl_i\ttotal";

    /// Tab-separated; the three terms are weighted (mean BCE per target).
    pub fn to_line(&self) -> String {
        let [r, p, i] = self.loss.weighted();
        format!("{}\t{r:.9}\t{p:.9}\t{i:.9}\t{:.9}", self.step, self.loss.total())
    }
}

/// Builds an `(n, 1, T, F)` input batch from segments.
pub fn batch_input<T: crate::scalar::Scalar>(segs: &[&Segment], frames: usize, bins: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(segs.len() * frames * bins);
    for s in segs {
        data.extend(s.spec.iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Tensor::from_vec([segs.len(), 1, frames, bins], data)
}

/// Runs minibatch SGD. Batch order comes from a seeded shuffle per epoch.
///
/// `on_step` sees every step record; a checkpoint is written to `out_dir`
/// (if given) after each epoch and after the final step.
pub fn train<T: crate::scalar::Scalar>(
    params: &mut ModelParams<T>,
    data: &TrainingSet,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>, TrainError> {
    if cfg.batch_size == 0 || !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(TrainError::Config("batch size must be positive and lr finite".into()));
    }
    if data.segments.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    let (frames, bins) = (params.config().segment_frames, params.config().n_bins);
    let lr = T::from_f64_lossy(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..data.segments.len()).collect();
    let limit = cfg.max_steps.unwrap_or(usize::MAX);
    let save = |params: &ModelParams<T>, step: usize| -> Result<(), TrainError> {
        if let Some(dir) = out_dir {
            save_checkpoint(params, step as u64, &dir.join("checkpoint.unw"))?;
        }
        Ok(())
    };
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if log.len() >= limit {
                break 'epochs;
            }
            let segs: Vec<&Segment> = chunk.iter().map(|&i| &data.segments[i]).collect();
            let x = batch_input::<T>(&segs, frames, bins);
            let labels: Vec<&Pianoroll> = segs.iter().map(|s| s.labels.as_ref().expect("training segments carry labels")).collect();
            let valid: Vec<usize> = segs.iter().map(|s| s.valid_frames).collect();
            let (logits, cache) = params.forward_train(&x)?;
            let (loss, dlogits) = multitask_loss(&logits, &labels, &valid)?;
            if !loss.total().is_finite() {
                return Err(ModelError::NonFinite(format!("loss at step {}", log.len() + 1)).into());
            }
            let grads = params.backward(&cache, &dlogits)?;
            params.update_running_stats(&cache);
            drop(cache);
            params.sgd_step(&grads, lr)?;
            let rec = StepRecord { step: log.len() + 1, loss };
            on_step(&rec);
            log.push(rec);
        }
        log::info!("epoch {} done after {} steps", epoch + 1, log.len());
        save(params, log.len())?;
    }
    save(params, log.len())?;
    Ok(log)
}
