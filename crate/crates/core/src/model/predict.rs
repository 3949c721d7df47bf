use thiserror::Error;

use super::loss::sigmoid;
use super::train::batch_input;
use super::unet::ModelParams;
use super::ModelError;
use crate::dsp::{cqt, segment_spectrogram, DspError, Segment, Spectrogram};
use crate::rolls::{InstrumentRoll, Pianoroll, PitchRoll, RollError};
use crate::scalar::Scalar;
use crate::synth::Waveform;

const PREDICT_BATCH: usize = 8;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Roll(#[from] RollError),
    #[error("spectrogram has {got} bins, model expects {expected}")]
    Bins { got: usize, expected: usize },
    #[error("marginal roll disagrees with its pianoroll at {0}")]
    Marginal(String),
}

/// Probabilistic outputs on a shared time axis.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub roll: Pianoroll,
    pub pitch: PitchRoll,
    pub instrument: InstrumentRoll,
}

/// Checks by direct scan that `pitch` and `instrument` are the max-marginals of `roll`.
pub fn check_marginals(roll: &Pianoroll, pitch: &PitchRoll, instrument: &InstrumentRoll) -> Result<(), PredictError> {
    let (f_n, t_n, m_n) = (roll.n_pitch(), roll.n_frames(), roll.n_instruments());
    if pitch.n_frames() != t_n || instrument.n_frames() != t_n || pitch.n_pitch() != f_n || instrument.n_instruments() != m_n {
        return Err(PredictError::Marginal("shape".into()));
    }
    for t in 0..t_n {
        for f in 0..f_n {
            let want = (0..m_n).map(|m| roll.get(f, t, m)).fold(0.0f32, f32::max);
            if pitch.get(f, t).to_bits() != want.to_bits() {
                return Err(PredictError::Marginal(format!("pitch {f}, frame {t}")));
            }
        }
        for m in 0..m_n {
            let want = (0..f_n).map(|f| roll.get(f, t, m)).fold(0.0f32, f32::max);
            if instrument.get(m, t).to_bits() != want.to_bits() {
                return Err(PredictError::Marginal(format!("instrument {m}, frame {t}")));
            }
        }
    }
    Ok(())
}

pub fn predict_spectrogram<T: Scalar>(params: &ModelParams<T>, spec: &Spectrogram) -> Result<Prediction, PredictError> {
    let cfg = params.config();
    if spec.n_bins() != cfg.n_bins {
        return Err(PredictError::Bins { got: spec.n_bins(), expected: cfg.n_bins });
    }
    let (frames, f_n, m_n) = (cfg.segment_frames, cfg.n_bins, cfg.n_instruments);
    let segs = segment_spectrogram(spec);
    let t_total = spec.n_frames();
    let mut data = vec![0.0f32; f_n * t_total * m_n];
    for group in segs.chunks(PREDICT_BATCH) {
        let refs: Vec<&Segment> = group.iter().collect();
        let logits = params.forward_infer(&batch_input::<T>(&refs, frames, f_n))?;
        for (s, seg) in group.iter().enumerate() {
            let z = logits.sample(s);
            for m in 0..m_n {
                for t in 0..seg.valid_frames {
                    let src = &z[(m * frames + t) * f_n..(m * frames + t + 1) * f_n];
                    let dst_start = (m * t_total + seg.start_frame + t) * f_n;
                    for (d, v) in data[dst_start..dst_start + f_n].iter_mut().zip(src) {
                        *d = sigmoid(v.to_f64_lossy()) as f32;
                    }
                }
            }
        }
    }
    let roll = Pianoroll::new(data, f_n, t_total, m_n, spec.frame_rate(), cfg.vocab_id.clone())?;
    let pitch = roll.marginalize_pitch();
    let instrument = roll.marginalize_instrument();
    check_marginals(&roll, &pitch, &instrument)?;
    Ok(Prediction { roll, pitch, instrument })
}

/// CQT, segment, infer, sigmoid, stitch, marginalize.
pub fn predict<T: Scalar>(params: &ModelParams<T>, wave: &Waveform) -> Result<Prediction, PredictError> {
    predict_spectrogram(params, &cqt(wave)?)
}
