//! Corpus building: MIDI generation, synthesis, and label files.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::align::{cost_matrix, dtw, warp_events, AlignError, AlignmentPath};
use crate::dsp::{cqt, DspError};
use crate::midi::{
    events_to_pianoroll, generate_corpus, map_program, parse_midi, CorpusConfig, CorpusError, CorpusManifest, NoteEvent, SmfError,
};
use crate::rolls::{write_prl, AnyRoll, InstrumentVocab, Pianoroll, PrlError, DEFAULT_FRAME_RATE};
use crate::synth::{render, write_wav, SynthError, TimbreProfile, Waveform, SAMPLE_RATE};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Midi(#[from] SmfError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Prl(#[from] PrlError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Frame-level labels of an SMF file over `duration_s`.
pub fn labels_from_midi(bytes: &[u8], duration_s: f64, vocab: &InstrumentVocab) -> Result<Pianoroll, SmfError> {
    Ok(events_to_pianoroll(&parse_midi(bytes)?, DEFAULT_FRAME_RATE, duration_s, vocab))
}

pub fn write_roll(path: &Path, roll: impl Into<AnyRoll>) -> Result<(), PrlError> {
    write_prl(&roll.into(), BufWriter::new(File::create(path)?))?;
    Ok(())
}

/// Generates MIDI, renders WAV and writes PRL labels for every clip.
///
/// Labels come from re-parsing the written MIDI bytes, so they can be
/// re-derived from the corpus alone.
pub fn build_corpus(seed: u64, cfg: &CorpusConfig, out_dir: &Path) -> Result<CorpusManifest, PipelineError> {
    let (manifest, plans) = generate_corpus(seed, cfg, out_dir)?;
    let profiles = TimbreProfile::for_vocab(&cfg.vocab);
    plans.par_iter().zip(&manifest.entries).try_for_each(|(plan, entry)| -> Result<(), PipelineError> {
        let events = parse_midi(&plan.smf)?;
        let wave = render(&events, &cfg.vocab, &profiles, SAMPLE_RATE, entry.duration_s)?;
        write_wav(&manifest.resolve(&entry.audio_path), &wave)?;
        let labels = events_to_pianoroll(&events, DEFAULT_FRAME_RATE, entry.duration_s, &cfg.vocab);
        write_roll(&manifest.resolve(&entry.label_path()), labels)?;
        Ok(())
    })?;
    fs::write(out_dir.join("vocab.txt"), cfg.vocab.to_string())?;
    Ok(manifest)
}

/// Aligns notes to a recording: the notes are synthesized, both sides go
/// through the CQT, and DTW on the frame sequences retimes the notes.
pub fn align_events(
    audio: &Waveform,
    events: &[NoteEvent],
    vocab: &InstrumentVocab,
) -> Result<(AlignmentPath, Vec<NoteEvent>), PipelineError> {
    let profiles = TimbreProfile::for_vocab(vocab);
    // unmapped notes (drums, foreign programs) are retimed but not heard
    let audible: Vec<NoteEvent> = events.iter().filter(|e| map_program(e.program, e.channel, vocab).is_some()).copied().collect();
    let score = render(&audible, vocab, &profiles, audio.sample_rate, 0.0)?;
    let a = cqt(audio)?;
    let b = cqt(&score)?;
    let path = dtw(&cost_matrix(&a, &b)?)?;
    let warped = warp_events(events, &path, a.frame_rate())?;
    Ok((path, warped))
}
