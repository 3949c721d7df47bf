//! Deterministic additive synthesizer and 16-bit WAV I/O.
//!
//! Each note is a sum of harmonic sine partials under a linear ADSR
//! envelope, starting at zero phase. Partials at or above Nyquist are
//! skipped. The final mix is scaled down only when its peak exceeds
//! [`MIX_CEILING`].

use std::f64::consts::PI;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::midi::{map_program, NoteEvent};
use crate::rolls::InstrumentVocab;

pub const SAMPLE_RATE: u32 = 16_000;
/// One analysis hop, appended as trailing silence.
pub const HOP: usize = 512;
pub const MIX_CEILING: f32 = 0.9;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("note with program {program} on channel {channel} has no instrument profile")]
    Unmapped { program: u8, channel: u8 },
    #[error("{profiles} profiles supplied for a vocabulary of {vocab}")]
    ProfileCount { profiles: usize, vocab: usize },
    #[error("invalid timbre profile {name:?}: {reason}")]
    Profile { name: String, reason: &'static str },
    #[error("unsupported WAV layout: {0}")]
    WavFormat(String),
    #[error(transparent)]
    Wav(#[from] hound::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adsr {
    pub attack_s: f64,
    pub decay_s: f64,
    pub sustain_level: f64,
    pub release_s: f64,
}

impl Adsr {
    fn held_level(&self, t: f64) -> f64 {
        if t < self.attack_s {
            t / self.attack_s
        } else if t < self.attack_s + self.decay_s {
            1.0 + (self.sustain_level - 1.0) * (t - self.attack_s) / self.decay_s
        } else {
            self.sustain_level
        }
    }
}

/// Piecewise-linear ADSR gain at `t_s` seconds after note-on.
///
/// The release ramp starts from whatever level the note had reached at
/// `note_duration_s` and lands on zero `release_s` later.
pub fn envelope(t_s: f64, note_duration_s: f64, adsr: &Adsr) -> f64 {
    if t_s < 0.0 {
        return 0.0;
    }
    if t_s < note_duration_s {
        return adsr.held_level(t_s);
    }
    let since = t_s - note_duration_s;
    if since >= adsr.release_s {
        return 0.0;
    }
    adsr.held_level(note_duration_s) * (1.0 - since / adsr.release_s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimbreProfile {
    pub name: String,
    /// Relative gain of partial `k + 1`.
    pub harmonics: Vec<f64>,
    pub adsr: Adsr,
    pub gain: f64,
}

impl TimbreProfile {
    pub fn new(name: impl Into<String>, harmonics: Vec<f64>, adsr: Adsr, gain: f64) -> Result<Self, SynthError> {
        let name = name.into();
        let bad = |reason| Err(SynthError::Profile { name: name.clone(), reason });
        if harmonics.is_empty() {
            return bad("needs at least one partial");
        }
        if harmonics.iter().any(|a| !(*a >= 0.0 && a.is_finite())) || !(gain >= 0.0 && gain.is_finite()) {
            return bad("amplitudes must be finite and non-negative");
        }
        let Adsr { attack_s, decay_s, sustain_level, release_s } = adsr;
        if [attack_s, decay_s, release_s].iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
            return bad("envelope times must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&sustain_level) {
            return bad("sustain level must lie in [0, 1]");
        }
        Ok(Self { name, harmonics, adsr, gain })
    }

    /// Built-in recipe for an instrument name; unknown names get a plain three-partial tone.
    pub fn for_instrument(name: &str) -> Self {
        let (h, a, d, s, r): (&[f64], f64, f64, f64, f64) = match name {
            "piano" => (&[1.0, 0.5, 0.3, 0.2, 0.1, 0.05], 0.005, 0.4, 0.2, 0.2),
            "acoustic guitar" => (&[1.0, 0.7, 0.5, 0.35, 0.25, 0.15, 0.1], 0.003, 0.6, 0.05, 0.15),
            "electric guitar" => (&[1.0, 0.8, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1], 0.005, 0.3, 0.5, 0.1),
            "trumpet" => (&[0.6, 1.0, 0.8, 0.6, 0.45, 0.3, 0.2, 0.12], 0.03, 0.1, 0.8, 0.08),
            "sax" => (&[1.0, 0.3, 0.6, 0.2, 0.4, 0.15, 0.2], 0.04, 0.1, 0.75, 0.1),
            "violin" => (&[1.0, 0.6, 0.55, 0.45, 0.35, 0.3, 0.25, 0.2, 0.15], 0.08, 0.1, 0.85, 0.15),
            "cello" => (&[1.0, 0.8, 0.5, 0.4, 0.3, 0.2], 0.1, 0.1, 0.85, 0.2),
            "flute" => (&[1.0, 0.15, 0.05], 0.06, 0.05, 0.9, 0.08),
            _ => (&[1.0, 0.5, 0.25], 0.01, 0.1, 0.7, 0.1),
        };
        let adsr = Adsr { attack_s: a, decay_s: d, sustain_level: s, release_s: r };
        Self::new(name, h.to_vec(), adsr, 0.15).expect("built-in profile is valid")
    }

    pub fn for_vocab(vocab: &InstrumentVocab) -> Vec<Self> {
        vocab.entries().iter().map(|e| Self::for_instrument(&e.name)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self { samples: vec![0.0; len], sample_rate }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()))
    }

    /// Prepends `n` zero samples.
    pub fn delayed(&self, n: usize) -> Self {
        let mut samples = vec![0.0; n];
        samples.extend_from_slice(&self.samples);
        Self { samples, sample_rate: self.sample_rate }
    }
}

pub fn midi_to_hz(pitch: f64) -> f64 {
    440.0 * 2f64.powf((pitch - 69.0) / 12.0)
}

/// Adds one note into `out` (f64 accumulator) without normalization.
fn add_note(out: &mut [f64], ev: &NoteEvent, profile: &TimbreProfile, sample_rate: u32) {
    let sr = sample_rate as f64;
    let f0 = midi_to_hz(ev.pitch as f64);
    let nyquist = sr / 2.0;
    let dur = ev.duration_s();
    let first = (ev.onset_s * sr).ceil().max(0.0) as usize;
    let last = (((ev.offset_s + profile.adsr.release_s) * sr).ceil() as usize).min(out.len());
    let partials: Vec<(f64, f64)> = profile
        .harmonics
        .iter()
        .enumerate()
        .map(|(k, &a)| ((k + 1) as f64 * f0, a))
        .filter(|&(f, a)| f < nyquist && a > 0.0)
        .map(|(f, a)| (2.0 * PI * f, a * profile.gain))
        .collect();
    for (i, slot) in out.iter_mut().enumerate().take(last).skip(first) {
        let t = i as f64 / sr - ev.onset_s;
        let env = envelope(t, dur, &profile.adsr);
        if env == 0.0 {
            continue;
        }
        let s: f64 = partials.iter().map(|&(w, a)| a * (w * t).sin()).sum();
        *slot += env * s;
    }
}

/// Number of samples [`render`] produces for these events.
pub fn rendered_len(events: &[NoteEvent], profiles: &[TimbreProfile], sample_rate: u32, min_duration_s: f64) -> usize {
    let sr = sample_rate as f64;
    let requested = (min_duration_s * sr).ceil().max(0.0) as usize;
    if events.is_empty() {
        return requested;
    }
    let max_off = events.iter().map(|e| e.offset_s).fold(0.0, f64::max);
    let max_rel = profiles.iter().map(|p| p.adsr.release_s).fold(0.0, f64::max);
    let natural = ((max_off + max_rel) * sr).ceil() as usize + HOP;
    natural.max(requested)
}

/// Renders events without peak normalization, in f64.
pub fn render_unnormalized(
    events: &[NoteEvent],
    vocab: &InstrumentVocab,
    profiles: &[TimbreProfile],
    sample_rate: u32,
    min_duration_s: f64,
) -> Result<Vec<f64>, SynthError> {
    if profiles.len() != vocab.len() {
        return Err(SynthError::ProfileCount { profiles: profiles.len(), vocab: vocab.len() });
    }
    let mapped = events
        .iter()
        .map(|e| {
            map_program(e.program, e.channel, vocab).map(|m| (e, m)).ok_or(SynthError::Unmapped { program: e.program, channel: e.channel })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut out = vec![0.0f64; rendered_len(events, profiles, sample_rate, min_duration_s)];
    for (ev, m) in mapped {
        add_note(&mut out, ev, &profiles[m], sample_rate);
    }
    Ok(out)
}

/// Renders a mono mix. Length is `max offset + max release + one hop`, or
/// `min_duration_s` if that is longer.
pub fn render(
    events: &[NoteEvent],
    vocab: &InstrumentVocab,
    profiles: &[TimbreProfile],
    sample_rate: u32,
    min_duration_s: f64,
) -> Result<Waveform, SynthError> {
    let mix = render_unnormalized(events, vocab, profiles, sample_rate, min_duration_s)?;
    let peak = mix.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let scale = if peak > MIX_CEILING as f64 { MIX_CEILING as f64 / peak } else { 1.0 };
    let samples = mix.iter().map(|s| (s * scale) as f32).collect();
    Ok(Waveform { samples, sample_rate })
}

pub fn write_wav(path: &Path, wave: &Waveform) -> Result<(), SynthError> {
    let spec = hound::WavSpec { channels: 1, sample_rate: wave.sample_rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in &wave.samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

/// Reads 16-bit PCM; multichannel files are averaged to mono.
pub fn read_wav(path: &Path) -> Result<Waveform, SynthError> {
    let mut r = hound::WavReader::open(path)?;
    let spec = r.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(SynthError::WavFormat(format!("{:?} {}-bit", spec.sample_format, spec.bits_per_sample)));
    }
    let raw = r.samples::<i16>().collect::<Result<Vec<_>, _>>()?;
    let ch = spec.channels.max(1) as usize;
    let samples = raw.chunks(ch).map(|frame| frame.iter().map(|&s| s as f32 / 32767.0).sum::<f32>() / ch as f32).collect();
    Ok(Waveform { samples, sample_rate: spec.sample_rate })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn adsr() -> Adsr {
        Adsr { attack_s: 0.1, decay_s: 0.2, sustain_level: 0.6, release_s: 0.3 }
    }

    fn note(pitch: u8, on: f64, off: f64, program: u8) -> NoteEvent {
        NoteEvent { pitch, onset_s: on, offset_s: off, program, channel: 0, velocity: 100 }
    }

    fn one_partial(vocab: &InstrumentVocab) -> Vec<TimbreProfile> {
        let a = Adsr { attack_s: 0.01, decay_s: 0.0, sustain_level: 1.0, release_s: 0.01 };
        vec![TimbreProfile::new("sine", vec![1.0], a, 0.3).unwrap(); vocab.len()]
    }

    #[test]
    fn envelope_key_points() {
        let e = adsr();
        assert_eq!(envelope(0.0, 1.0, &e), 0.0);
        assert_eq!(envelope(0.1, 1.0, &e), 1.0);
        // mid-decay against the line through (0.1, 1.0) and (0.3, 0.6)
        for t in [0.12, 0.2, 0.27] {
            let line = 1.0 + (0.6 - 1.0) / (0.3 - 0.1) * (t - 0.1);
            assert!((envelope(t, 1.0, &e) - line).abs() < 1e-12);
        }
        assert_eq!(envelope(0.5, 1.0, &e), 0.6);
        assert!((envelope(1.15, 1.0, &e) - 0.3).abs() < 1e-12);
        assert_eq!(envelope(1.3, 1.0, &e), 0.0);
        assert_eq!(envelope(5.0, 1.0, &e), 0.0);
    }

    #[test]
    fn early_release_starts_from_current_level() {
        let e = adsr();
        // released halfway up the attack
        assert!((envelope(0.05, 0.05, &e) - 0.5).abs() < 1e-12);
        assert!((envelope(0.2, 0.05, &e) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn empty_render_is_silence_of_requested_length() {
        let vocab = InstrumentVocab::default8();
        let w = render(&[], &vocab, &TimbreProfile::for_vocab(&vocab), SAMPLE_RATE, 1.0).unwrap();
        assert_eq!(w.samples.len(), 16000);
        assert!(w.samples.iter().all(|s| *s == 0.0));
    }

    #[test]
    fn a4_peaks_at_440_hz_by_direct_dft() {
        let vocab = InstrumentVocab::parse("id = s\nsine = 0").unwrap();
        let w = render(&[note(69, 0.0, 1.0, 0)], &vocab, &one_partial(&vocab), SAMPLE_RATE, 0.0).unwrap();
        let x = &w.samples[..16000];
        let mag = |hz: f64| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, &s) in x.iter().enumerate() {
                let ph = 2.0 * PI * hz * n as f64 / 16000.0;
                re += s as f64 * ph.cos();
                im -= s as f64 * ph.sin();
            }
            (re * re + im * im).sqrt()
        };
        let best = (100..2000).max_by(|&a, &b| mag(a as f64).total_cmp(&mag(b as f64))).unwrap();
        assert_eq!(best, 440);
    }

    #[test]
    fn simultaneous_notes_mix_linearly() {
        let vocab = InstrumentVocab::default8();
        let profiles = TimbreProfile::for_vocab(&vocab);
        let a = note(60, 0.1, 0.8, 0);
        let b = note(67, 0.1, 0.8, 73);
        let both = render(&[a, b], &vocab, &profiles, SAMPLE_RATE, 1.5).unwrap();
        let ra = render(&[a], &vocab, &profiles, SAMPLE_RATE, 1.5).unwrap();
        let rb = render(&[b], &vocab, &profiles, SAMPLE_RATE, 1.5).unwrap();
        assert!(both.peak() <= MIX_CEILING);
        for i in 0..both.samples.len() {
            assert!((both.samples[i] - (ra.samples[i] + rb.samples[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn loud_mix_is_normalized_to_ceiling() {
        let vocab = InstrumentVocab::default8();
        let profiles = TimbreProfile::for_vocab(&vocab);
        let chord: Vec<_> = (48..72).map(|p| note(p, 0.0, 0.5, 0)).collect();
        let w = render(&chord, &vocab, &profiles, SAMPLE_RATE, 0.0).unwrap();
        assert!((w.peak() - MIX_CEILING).abs() < 1e-6);
    }

    #[test]
    fn output_length_covers_release_plus_hop() {
        let vocab = InstrumentVocab::default8();
        let profiles = TimbreProfile::for_vocab(&vocab);
        let max_rel = profiles.iter().map(|p| p.adsr.release_s).fold(0.0, f64::max);
        let w = render(&[note(60, 0.0, 1.0, 0)], &vocab, &profiles, SAMPLE_RATE, 0.0).unwrap();
        assert_eq!(w.samples.len(), ((1.0 + max_rel) * 16000.0).ceil() as usize + HOP);
        assert!(w.samples[w.samples.len() - HOP..].iter().all(|s| *s == 0.0));
    }

    #[test]
    fn deterministic_and_unmapped_error() {
        let vocab = InstrumentVocab::default8();
        let profiles = TimbreProfile::for_vocab(&vocab);
        let ev = [note(50, 0.0, 0.3, 42), note(70, 0.1, 0.4, 26)];
        let a = render(&ev, &vocab, &profiles, SAMPLE_RATE, 0.0).unwrap();
        let b = render(&ev, &vocab, &profiles, SAMPLE_RATE, 0.0).unwrap();
        assert!(a.samples.iter().zip(&b.samples).all(|(x, y)| x.to_bits() == y.to_bits()));
        let mut drum = note(40, 0.0, 0.1, 0);
        drum.channel = 9;
        assert!(matches!(render(&[drum], &vocab, &profiles, SAMPLE_RATE, 0.0), Err(SynthError::Unmapped { .. })));
    }

    #[test]
    fn culled_partials_leave_no_folded_energy() {
        // C8 = 4186 Hz: partials 2.. land above 8 kHz and must be dropped.
        let vocab = InstrumentVocab::parse("id = s\nbright = 0").unwrap();
        let a = Adsr { attack_s: 0.01, decay_s: 0.0, sustain_level: 1.0, release_s: 0.01 };
        let p = vec![TimbreProfile::new("bright", vec![1.0, 1.0, 1.0], a, 0.3).unwrap()];
        let w = render(&[note(108, 0.0, 1.0, 0)], &vocab, &p, SAMPLE_RATE, 0.0).unwrap();
        let x = &w.samples[1000..9000];
        let mag = |hz: f64| {
            let (mut re, mut im) = (0.0f64, 0.0f64);
            for (n, &s) in x.iter().enumerate() {
                let win = 0.5 - 0.5 * (2.0 * PI * n as f64 / x.len() as f64).cos();
                let ph = 2.0 * PI * hz * n as f64 / 16000.0;
                re += win * s as f64 * ph.cos();
                im -= win * s as f64 * ph.sin();
            }
            (re * re + im * im).sqrt()
        };
        let f0 = midi_to_hz(108.0);
        let peak = mag(f0);
        // 2*f0 and 3*f0 would alias to 16000 - 2*f0 and 3*f0 - 16000
        for ghost in [16000.0 - 2.0 * f0, 3.0 * f0 - 16000.0] {
            assert!(20.0 * (mag(ghost) / peak).log10() < -60.0);
        }
    }

    #[test]
    fn wav_roundtrip_is_within_one_lsb() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.wav");
        let w = Waveform { samples: (0..1000).map(|i| ((i as f32) * 0.01).sin() * 0.8).collect(), sample_rate: SAMPLE_RATE };
        write_wav(&path, &w).unwrap();
        let r = read_wav(&path).unwrap();
        assert_eq!(r.sample_rate, SAMPLE_RATE);
        assert!(w.samples.iter().zip(&r.samples).all(|(a, b)| (a - b).abs() <= 1.0 / 32767.0));
    }
}
