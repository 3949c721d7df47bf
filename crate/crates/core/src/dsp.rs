//! Constant-Q front end and fixed-length segmentation.

use std::f64::consts::PI;
use std::sync::OnceLock;

use rayon::prelude::*;
use thiserror::Error;

use crate::rolls::{Pianoroll, RollError};
use crate::synth::{Waveform, HOP, SAMPLE_RATE};

pub const N_BINS: usize = 88;
pub const BINS_PER_OCTAVE: usize = 12;
pub const FMIN_HZ: f64 = 27.5;
pub const LOG_GAMMA: f64 = 20.0;
/// Frames per training segment (10.24 s).
pub const SEGMENT_FRAMES: usize = 320;

#[derive(Debug, Error, PartialEq)]
pub enum DspError {
    #[error("expected {expected} Hz audio, got {got} Hz")]
    SampleRate { expected: u32, got: u32 },
    #[error("waveform is empty")]
    Empty,
    #[error("spectrogram has {spec} frames but labels have {labels}")]
    FrameMismatch { spec: usize, labels: usize },
    #[error("spectrogram and labels disagree on frame rate ({spec} vs {labels})")]
    FrameRate { spec: f64, labels: f64 },
    #[error(transparent)]
    Roll(#[from] RollError),
}

/// Magnitude CQT, `[t][bin]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    data: Vec<f32>,
    n_frames: usize,
    n_bins: usize,
    pub sample_rate: u32,
    pub hop: usize,
}

impl Spectrogram {
    pub fn new(data: Vec<f32>, n_frames: usize, n_bins: usize, sample_rate: u32, hop: usize) -> Self {
        assert_eq!(data.len(), n_frames * n_bins);
        Self { data, n_frames, n_bins, sample_rate, hop }
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_bins(&self) -> usize {
        self.n_bins
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.n_bins..(t + 1) * self.n_bins]
    }

    pub fn get(&self, bin: usize, t: usize) -> f32 {
        self.data[t * self.n_bins + bin]
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.hop as f64
    }

    pub fn slice_frames(&self, start: usize, end: usize) -> Spectrogram {
        Spectrogram { data: self.data[start * self.n_bins..end * self.n_bins].to_vec(), n_frames: end - start, ..*self }
    }
}

pub fn bin_frequency(bin: usize) -> f64 {
    FMIN_HZ * 2f64.powf(bin as f64 / BINS_PER_OCTAVE as f64)
}

pub fn quality_factor() -> f64 {
    1.0 / (2f64.powf(1.0 / BINS_PER_OCTAVE as f64) - 1.0)
}

pub fn window_length(bin: usize, sample_rate: u32) -> usize {
    (quality_factor() * sample_rate as f64 / bin_frequency(bin)).ceil() as usize
}

/// Periodic Hann window of length `n`.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|j| 0.5 - 0.5 * (2.0 * PI * j as f64 / n as f64).cos()).collect()
}

/// Frames produced for `len` samples with centered hops.
pub fn frame_count(len: usize) -> usize {
    if len == 0 {
        0
    } else {
        1 + (len - 1) / HOP
    }
}

/// Index into `[0, len)` under repeated mirror reflection (edge samples not repeated).
pub fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m >= len as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

struct BinKernel {
    /// Start offset relative to the frame center.
    start: isize,
    re: Vec<f64>,
    im: Vec<f64>,
}

/// Precomputed per-bin complex kernels: Hann window times a complex
/// exponential at the bin frequency, normalized by the window sum.
pub struct Cqt {
    kernels: Vec<BinKernel>,
    max_half: usize,
    sample_rate: u32,
}

impl Cqt {
    pub fn new(sample_rate: u32) -> Self {
        let kernels: Vec<BinKernel> = (0..N_BINS)
            .map(|bin| {
                let n = window_length(bin, sample_rate);
                let w = hann(n);
                let norm: f64 = w.iter().sum();
                let freq = bin_frequency(bin);
                let half = (n / 2) as isize;
                let (re, im) = w
                    .iter()
                    .enumerate()
                    .map(|(j, wj)| {
                        let ph = -2.0 * PI * freq * (j as isize - half) as f64 / sample_rate as f64;
                        (wj * ph.cos() / norm, wj * ph.sin() / norm)
                    })
                    .unzip();
                BinKernel { start: -half, re, im }
            })
            .collect();
        let max_half = kernels.iter().map(|k| k.re.len()).max().unwrap_or(0) / 2 + 1;
        Self { kernels, max_half, sample_rate }
    }

    /// Linear magnitudes, `[t][bin]`.
    pub fn magnitudes(&self, wave: &Waveform) -> Result<Vec<f64>, DspError> {
        if wave.sample_rate != self.sample_rate {
            return Err(DspError::SampleRate { expected: self.sample_rate, got: wave.sample_rate });
        }
        if wave.samples.is_empty() {
            return Err(DspError::Empty);
        }
        let len = wave.samples.len();
        let pad = self.max_half;
        let padded: Vec<f64> = (-(pad as isize)..(len + pad) as isize).map(|i| wave.samples[reflect_index(i, len)] as f64).collect();
        let n_frames = frame_count(len);
        let mut out = vec![0.0f64; n_frames * N_BINS];
        out.par_chunks_mut(N_BINS).enumerate().for_each(|(t, row)| {
            let center = (t * HOP + pad) as isize;
            for (bin, k) in self.kernels.iter().enumerate() {
                let s = (center + k.start) as usize;
                let x = &padded[s..s + k.re.len()];
                let (mut re, mut im) = (0.0, 0.0);
                for ((xv, kr), ki) in x.iter().zip(&k.re).zip(&k.im) {
                    re += xv * kr;
                    im += xv * ki;
                }
                row[bin] = (re * re + im * im).sqrt();
            }
        });
        Ok(out)
    }

    /// Log-compressed magnitudes `ln(1 + 20 |X|)`.
    pub fn transform(&self, wave: &Waveform) -> Result<Spectrogram, DspError> {
        let mags = self.magnitudes(wave)?;
        let n_frames = mags.len() / N_BINS;
        let data = mags.iter().map(|m| (LOG_GAMMA * m).ln_1p() as f32).collect();
        Ok(Spectrogram::new(data, n_frames, N_BINS, self.sample_rate, HOP))
    }
}

/// CQT of 16 kHz audio with the shared kernel bank.
pub fn cqt(wave: &Waveform) -> Result<Spectrogram, DspError> {
    static BANK: OnceLock<Cqt> = OnceLock::new();
    if wave.sample_rate != SAMPLE_RATE {
        return Err(DspError::SampleRate { expected: SAMPLE_RATE, got: wave.sample_rate });
    }
    BANK.get_or_init(|| Cqt::new(SAMPLE_RATE)).transform(wave)
}

/// One fixed-length training window.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    /// `SEGMENT_FRAMES x N_BINS`, zero past `valid_frames`.
    pub spec: Vec<f32>,
    pub labels: Option<Pianoroll>,
    pub valid_frames: usize,
    /// First frame of this segment in the source clip.
    pub start_frame: usize,
}

impl Segment {
    pub fn mask(&self) -> Vec<bool> {
        (0..SEGMENT_FRAMES).map(|t| t < self.valid_frames).collect()
    }
}

fn split_spec(spec: &Spectrogram, seg_frames: usize) -> Vec<(usize, usize, Vec<f32>)> {
    let bins = spec.n_bins();
    (0..spec.n_frames())
        .step_by(seg_frames)
        .map(|start| {
            let end = (start + seg_frames).min(spec.n_frames());
            let mut data = vec![0.0f32; seg_frames * bins];
            data[..(end - start) * bins].copy_from_slice(&spec.data()[start * bins..end * bins]);
            (start, end - start, data)
        })
        .collect()
}

/// Cuts a spectrogram into consecutive 320-frame windows, zero-padding the last.
pub fn segment_spectrogram(spec: &Spectrogram) -> Vec<Segment> {
    split_spec(spec, SEGMENT_FRAMES)
        .into_iter()
        .map(|(start_frame, valid_frames, spec)| Segment { spec, labels: None, valid_frames, start_frame })
        .collect()
}

/// Cuts spectrogram and labels identically. Lengths may differ by one frame;
/// both are trimmed to the shorter.
pub fn segment(spec: &Spectrogram, labels: &Pianoroll) -> Result<Vec<Segment>, DspError> {
    if spec.frame_rate() != labels.frame_rate() {
        return Err(DspError::FrameRate { spec: spec.frame_rate(), labels: labels.frame_rate() });
    }
    if spec.n_frames().abs_diff(labels.n_frames()) > 1 {
        return Err(DspError::FrameMismatch { spec: spec.n_frames(), labels: labels.n_frames() });
    }
    let n = spec.n_frames().min(labels.n_frames());
    let spec = spec.slice_frames(0, n);
    let mut out = Vec::new();
    for (start_frame, valid_frames, data) in split_spec(&spec, SEGMENT_FRAMES) {
        let part = labels.slice_frames(start_frame, start_frame + valid_frames);
        let pad = Pianoroll::zeros(
            labels.n_pitch(),
            SEGMENT_FRAMES - valid_frames,
            labels.n_instruments(),
            labels.frame_rate(),
            labels.vocab_id(),
        )?;
        let seg_labels = Pianoroll::concat_frames(&[part, pad])?;
        out.push(Segment { spec: data, labels: Some(seg_labels), valid_frames, start_frame });
    }
    Ok(out)
}
