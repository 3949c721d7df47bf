//! Pianoroll tensors and their marginals.
//!
//! A [`Pianoroll`] is a `pitch x time x instrument` tensor of activations in
//! `[0, 1]`. Its two marginals, the [`PitchRoll`] and the [`InstrumentRoll`],
//! are obtained by element-wise max over the dropped axis, which is logical
//! OR on binary labels and stays bounded for probabilities.
//!
//! Memory layout matches the PRL payload order: `[m][t][f]`, pitch fastest.

mod prl;
mod vocab;

pub use prl::{read_prl, write_prl, AnyRoll, PrlError, PrlKind};
pub use vocab::{InstrumentVocab, VocabEntry, VocabError};

use thiserror::Error;

/// MIDI note number of pitch row 0 (A0).
pub const PITCH_OFFSET: u8 = 21;
/// Number of pitch rows, A0 through C8.
pub const N_PITCHES: usize = 88;
/// Frames per second for 16 kHz audio with a 512-sample hop.
pub const DEFAULT_FRAME_RATE: f64 = 16000.0 / 512.0;

#[derive(Debug, Error, PartialEq)]
pub enum RollError {
    #[error("data length {got} does not match shape {shape:?}")]
    Shape { got: usize, shape: Vec<usize> },
    #[error("value {value} at flat index {index} is outside [0, 1]")]
    ValueOutOfRange { index: usize, value: f32 },
    #[error("frame rate must be finite and positive, got {0}")]
    FrameRate(f64),
    #[error("threshold must lie strictly inside (0, 1), got {0}")]
    Threshold(f32),
    #[error("shape mismatch: {0}")]
    Mismatch(String),
}

fn validate(data: &[f32], shape: &[usize], frame_rate: f64) -> Result<(), RollError> {
    let expected = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    if expected != Some(data.len()) {
        return Err(RollError::Shape { got: data.len(), shape: shape.to_vec() });
    }
    if !(frame_rate.is_finite() && frame_rate > 0.0) {
        return Err(RollError::FrameRate(frame_rate));
    }
    // bit-level check so -0.0 and NaN are both rejected
    if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !(v.is_sign_positive() && **v <= 1.0)) {
        return Err(RollError::ValueOutOfRange { index, value });
    }
    Ok(())
}

fn all_binary(data: &[f32]) -> bool {
    data.iter().all(|v| *v == 0.0 || *v == 1.0)
}

fn threshold_slice(data: &[f32], threshold: f32) -> Result<Vec<f32>, RollError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(RollError::Threshold(threshold));
    }
    Ok(data.iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect())
}

/// Max over the instrument axis of an `[m][t][f]` tensor, giving `[t][f]`.
pub fn max_over_instruments<T: PartialOrd + Copy>(data: &[T], n_pitch: usize, n_frames: usize, n_instruments: usize) -> Vec<T> {
    let plane = n_pitch * n_frames;
    assert_eq!(data.len(), plane * n_instruments);
    assert!(n_instruments > 0, "cannot marginalize over zero instruments");
    let mut out = data[..plane].to_vec();
    for m in 1..n_instruments {
        for (o, &v) in out.iter_mut().zip(&data[m * plane..(m + 1) * plane]) {
            if v > *o {
                *o = v;
            }
        }
    }
    out
}

/// Max over the pitch axis of an `[m][t][f]` tensor, giving `[m][t]`.
pub fn max_over_pitches<T: PartialOrd + Copy>(data: &[T], n_pitch: usize, n_frames: usize, n_instruments: usize) -> Vec<T> {
    assert_eq!(data.len(), n_pitch * n_frames * n_instruments);
    assert!(n_pitch > 0, "cannot marginalize over zero pitches");
    data.chunks_exact(n_pitch).map(|row| row[1..].iter().fold(row[0], |acc, &v| if v > acc { v } else { acc })).collect()
}

/// Pitch x time x instrument activation tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Pianoroll {
    data: Vec<f32>,
    n_pitch: usize,
    n_frames: usize,
    n_instruments: usize,
    frame_rate: f64,
    vocab_id: String,
}

impl Pianoroll {
    pub fn new(
        data: Vec<f32>,
        n_pitch: usize,
        n_frames: usize,
        n_instruments: usize,
        frame_rate: f64,
        vocab_id: impl Into<String>,
    ) -> Result<Self, RollError> {
        validate(&data, &[n_instruments, n_frames, n_pitch], frame_rate)?;
        Ok(Self { data, n_pitch, n_frames, n_instruments, frame_rate, vocab_id: vocab_id.into() })
    }

    pub fn zeros(
        n_pitch: usize,
        n_frames: usize,
        n_instruments: usize,
        frame_rate: f64,
        vocab_id: impl Into<String>,
    ) -> Result<Self, RollError> {
        let len = n_pitch
            .checked_mul(n_frames)
            .and_then(|x| x.checked_mul(n_instruments))
            .ok_or_else(|| RollError::Mismatch("roll dimensions overflow".into()))?;
        Self::new(vec![0.0; len], n_pitch, n_frames, n_instruments, frame_rate, vocab_id)
    }

    #[inline]
    pub fn index(&self, f: usize, t: usize, m: usize) -> usize {
        debug_assert!(f < self.n_pitch && t < self.n_frames && m < self.n_instruments);
        (m * self.n_frames + t) * self.n_pitch + f
    }

    pub fn get(&self, f: usize, t: usize, m: usize) -> f32 {
        self.data[self.index(f, t, m)]
    }

    /// Sets one cell. Panics if `value` is outside `[0, 1]`.
    pub fn set(&mut self, f: usize, t: usize, m: usize, value: f32) {
        assert!(value.is_sign_positive() && value <= 1.0, "roll value {value} outside [0, 1]");
        let i = self.index(f, t, m);
        self.data[i] = value;
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn n_pitch(&self) -> usize {
        self.n_pitch
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_instruments(&self) -> usize {
        self.n_instruments
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn pitch_offset(&self) -> u8 {
        PITCH_OFFSET
    }

    pub fn vocab_id(&self) -> &str {
        &self.vocab_id
    }

    pub fn is_binary(&self) -> bool {
        all_binary(&self.data)
    }

    pub fn active_cells(&self) -> usize {
        self.data.iter().filter(|v| **v > 0.0).count()
    }

    /// Frames `[start, end)` of every instrument plane.
    pub fn slice_frames(&self, start: usize, end: usize) -> Pianoroll {
        assert!(start <= end && end <= self.n_frames);
        let f = self.n_pitch;
        let mut data = Vec::with_capacity((end - start) * f * self.n_instruments);
        for m in 0..self.n_instruments {
            let base = m * self.n_frames * f;
            data.extend_from_slice(&self.data[base + start * f..base + end * f]);
        }
        Pianoroll { data, n_frames: end - start, vocab_id: self.vocab_id.clone(), ..*self }
    }

    /// Concatenates rolls along time. All parts must share every other dimension.
    pub fn concat_frames(parts: &[Pianoroll]) -> Result<Pianoroll, RollError> {
        let first = parts.first().ok_or_else(|| RollError::Mismatch("nothing to concatenate".into()))?;
        if parts.iter().any(|p| {
            p.n_pitch != first.n_pitch
                || p.n_instruments != first.n_instruments
                || p.frame_rate != first.frame_rate
                || p.vocab_id != first.vocab_id
        }) {
            return Err(RollError::Mismatch("rolls disagree on pitch/instrument/rate".into()));
        }
        let n_frames: usize = parts.iter().map(|p| p.n_frames).sum();
        let f = first.n_pitch;
        let mut data = Vec::with_capacity(n_frames * f * first.n_instruments);
        for m in 0..first.n_instruments {
            for p in parts {
                let base = m * p.n_frames * f;
                data.extend_from_slice(&p.data[base..base + p.n_frames * f]);
            }
        }
        Ok(Pianoroll { data, n_frames, vocab_id: first.vocab_id.clone(), ..*first })
    }

    /// `out[f,t] = max_m roll[f,t,m]`.
    pub fn marginalize_pitch(&self) -> PitchRoll {
        let data = if self.n_instruments == 0 {
            vec![0.0; self.n_pitch * self.n_frames]
        } else {
            max_over_instruments(&self.data, self.n_pitch, self.n_frames, self.n_instruments)
        };
        PitchRoll { data, n_pitch: self.n_pitch, n_frames: self.n_frames, frame_rate: self.frame_rate }
    }

    /// `out[m,t] = max_f roll[f,t,m]`.
    pub fn marginalize_instrument(&self) -> InstrumentRoll {
        let data = if self.n_pitch == 0 {
            vec![0.0; self.n_instruments * self.n_frames]
        } else {
            max_over_pitches(&self.data, self.n_pitch, self.n_frames, self.n_instruments)
        };
        InstrumentRoll {
            data,
            n_instruments: self.n_instruments,
            n_frames: self.n_frames,
            frame_rate: self.frame_rate,
            vocab_id: self.vocab_id.clone(),
        }
    }

    /// Cells `>= threshold` become 1, the rest 0. Metadata is kept.
    pub fn binarize(&self, threshold: f32) -> Result<Pianoroll, RollError> {
        Ok(Pianoroll { data: threshold_slice(&self.data, threshold)?, vocab_id: self.vocab_id.clone(), ..*self })
    }
}

/// Pitch x time marginal.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchRoll {
    data: Vec<f32>,
    n_pitch: usize,
    n_frames: usize,
    frame_rate: f64,
}

impl PitchRoll {
    pub fn new(data: Vec<f32>, n_pitch: usize, n_frames: usize, frame_rate: f64) -> Result<Self, RollError> {
        validate(&data, &[n_frames, n_pitch], frame_rate)?;
        Ok(Self { data, n_pitch, n_frames, frame_rate })
    }

    pub fn get(&self, f: usize, t: usize) -> f32 {
        self.data[t * self.n_pitch + f]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn n_pitch(&self) -> usize {
        self.n_pitch
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn pitch_offset(&self) -> u8 {
        PITCH_OFFSET
    }

    pub fn is_binary(&self) -> bool {
        all_binary(&self.data)
    }

    pub fn binarize(&self, threshold: f32) -> Result<PitchRoll, RollError> {
        Ok(PitchRoll { data: threshold_slice(&self.data, threshold)?, ..*self })
    }
}

/// Instrument x time marginal.
#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentRoll {
    data: Vec<f32>,
    n_instruments: usize,
    n_frames: usize,
    frame_rate: f64,
    vocab_id: String,
}

impl InstrumentRoll {
    pub fn new(
        data: Vec<f32>,
        n_instruments: usize,
        n_frames: usize,
        frame_rate: f64,
        vocab_id: impl Into<String>,
    ) -> Result<Self, RollError> {
        validate(&data, &[n_instruments, n_frames], frame_rate)?;
        Ok(Self { data, n_instruments, n_frames, frame_rate, vocab_id: vocab_id.into() })
    }

    pub fn get(&self, m: usize, t: usize) -> f32 {
        self.data[m * self.n_frames + t]
    }

    /// Activations of instrument `m` over time.
    pub fn track(&self, m: usize) -> &[f32] {
        &self.data[m * self.n_frames..(m + 1) * self.n_frames]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn n_instruments(&self) -> usize {
        self.n_instruments
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn vocab_id(&self) -> &str {
        &self.vocab_id
    }

    pub fn is_binary(&self) -> bool {
        all_binary(&self.data)
    }

    pub fn binarize(&self, threshold: f32) -> Result<InstrumentRoll, RollError> {
        Ok(InstrumentRoll { data: threshold_slice(&self.data, threshold)?, vocab_id: self.vocab_id.clone(), ..*self })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_binary(rng: &mut impl Rng, f: usize, t: usize, m: usize) -> Pianoroll {
        let data = (0..f * t * m).map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 }).collect();
        Pianoroll::new(data, f, t, m, DEFAULT_FRAME_RATE, "test").unwrap()
    }

    #[test]
    fn zero_roll_marginals_are_zero() {
        let roll = Pianoroll::zeros(88, 4, 3, DEFAULT_FRAME_RATE, "v").unwrap();
        let p = roll.marginalize_pitch();
        let i = roll.marginalize_instrument();
        assert_eq!((p.n_pitch(), p.n_frames()), (88, 4));
        assert_eq!((i.n_instruments(), i.n_frames()), (3, 4));
        assert!(p.data().iter().all(|v| *v == 0.0));
        assert!(i.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_cell_marginals() {
        let mut roll = Pianoroll::zeros(88, 4, 3, DEFAULT_FRAME_RATE, "v").unwrap();
        roll.set(48, 2, 1, 1.0);
        let p = roll.marginalize_pitch();
        let i = roll.marginalize_instrument();
        for t in 0..4 {
            for f in 0..88 {
                assert_eq!(p.get(f, t), if (f, t) == (48, 2) { 1.0 } else { 0.0 });
            }
            for m in 0..3 {
                assert_eq!(i.get(m, t), if (m, t) == (1, 2) { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn marginals_match_triple_loop_or() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let roll = random_binary(&mut rng, 4, 5, 3);
            let p = roll.marginalize_pitch();
            let i = roll.marginalize_instrument();
            for f in 0..4 {
                for t in 0..5 {
                    let mut any = false;
                    for m in 0..3 {
                        any |= roll.get(f, t, m) == 1.0;
                    }
                    assert_eq!(p.get(f, t) == 1.0, any);
                }
            }
            for m in 0..3 {
                for t in 0..5 {
                    let mut any = false;
                    for f in 0..4 {
                        any |= roll.get(f, t, m) == 1.0;
                    }
                    assert_eq!(i.get(m, t) == 1.0, any);
                }
            }
        }
    }

    #[test]
    fn binarize_boundary_is_inclusive() {
        let roll = Pianoroll::new(vec![0.5, 0.49], 2, 1, 1, 10.0, "v").unwrap();
        assert_eq!(roll.binarize(0.5).unwrap().data(), &[1.0, 0.0]);
        let low = Pianoroll::new(vec![0.49; 6], 2, 3, 1, 10.0, "v").unwrap();
        assert!(low.binarize(0.5).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn binarize_matches_cellwise_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..88 * 10 * 2).map(|_| rng.gen::<f32>()).collect();
        let roll = Pianoroll::new(data.clone(), 88, 10, 2, DEFAULT_FRAME_RATE, "v").unwrap();
        let b = roll.binarize(0.5).unwrap();
        for (i, v) in data.iter().enumerate() {
            assert_eq!(b.data()[i], if *v >= 0.5 { 1.0 } else { 0.0 });
        }
        assert_eq!(b.frame_rate(), roll.frame_rate());
        assert_eq!(b.vocab_id(), "v");
    }

    #[test]
    fn binarize_rejects_bad_threshold() {
        let roll = Pianoroll::zeros(2, 2, 1, 1.0, "v").unwrap();
        for t in [0.0, 1.0, -0.1, 1.5, f32::NAN] {
            assert!(matches!(roll.binarize(t), Err(RollError::Threshold(_))));
        }
    }

    #[test]
    fn constructor_rejects_invalid_values() {
        assert!(matches!(Pianoroll::new(vec![1.5], 1, 1, 1, 1.0, "v"), Err(RollError::ValueOutOfRange { .. })));
        assert!(matches!(Pianoroll::new(vec![-0.0], 1, 1, 1, 1.0, "v"), Err(RollError::ValueOutOfRange { .. })));
        assert!(matches!(Pianoroll::new(vec![0.0], 1, 1, 1, 0.0, "v"), Err(RollError::FrameRate(_))));
        assert!(matches!(Pianoroll::new(vec![0.0; 3], 1, 1, 1, 1.0, "v"), Err(RollError::Shape { .. })));
    }

    #[test]
    fn slice_and_concat_invert() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let roll = random_binary(&mut rng, 6, 17, 3);
        let parts = vec![roll.slice_frames(0, 5), roll.slice_frames(5, 5), roll.slice_frames(5, 17)];
        assert_eq!(Pianoroll::concat_frames(&parts).unwrap(), roll);
    }

    proptest! {
        #[test]
        fn max_dominance_and_attainment(
            f in 1usize..6, t in 1usize..6, m in 1usize..5,
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..f * t * m).map(|_| rng.gen::<f32>()).collect();
            let roll = Pianoroll::new(data, f, t, m, 31.25, "p").unwrap();
            let p = roll.marginalize_pitch();
            for ff in 0..f {
                for tt in 0..t {
                    let vals: Vec<f32> = (0..m).map(|mm| roll.get(ff, tt, mm)).collect();
                    prop_assert!(vals.iter().all(|v| p.get(ff, tt) >= *v));
                    prop_assert!(vals.iter().any(|v| p.get(ff, tt) == *v));
                }
            }
            let i = roll.marginalize_instrument();
            for mm in 0..m {
                for tt in 0..t {
                    let vals: Vec<f32> = (0..f).map(|ff| roll.get(ff, tt, mm)).collect();
                    prop_assert!(vals.iter().all(|v| i.get(mm, tt) >= *v));
                    prop_assert!(vals.iter().any(|v| i.get(mm, tt) == *v));
                }
            }
        }

        #[test]
        fn binary_marginal_counts_bounded(f in 1usize..8, t in 1usize..8, m in 1usize..5, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let roll = random_binary(&mut rng, f, t, m);
            let p = roll.marginalize_pitch();
            let active_p = p.data().iter().filter(|v| **v == 1.0).count();
            prop_assert!(active_p <= roll.active_cells());
            let b = roll.binarize(0.5).unwrap();
            prop_assert_eq!(&b, &roll);
        }
    }
}
