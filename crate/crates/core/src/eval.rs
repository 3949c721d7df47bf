//! Frame-level accuracy, instrument F1 and per-second AUC.

use std::fmt::Write as _;

use rayon::prelude::*;
use thiserror::Error;

use crate::midi::{CorpusManifest, Split};
use crate::model::{load_clip, predict_spectrogram, ModelParams, PredictError, Prediction};
use crate::rolls::{InstrumentRoll, InstrumentVocab, Pianoroll, PitchRoll, RollError};
use crate::scalar::Scalar;

pub const DEFAULT_THRESHOLD: f32 = 0.5;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("roll is not binary")]
    NotBinary,
    #[error("the {0} split is empty")]
    EmptySplit(Split),
    #[error("no clip in the {0} split could be evaluated")]
    NothingEvaluated(Split),
    #[error(transparent)]
    Roll(#[from] RollError),
}

/// Cell-level confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn from_cells(pred: &[f32], truth: &[f32]) -> Self {
        let mut c = Counts::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p > 0.0, t > 0.0) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                _ => {}
            }
        }
        c
    }

    pub fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// `TP / (TP + FP + FN)`, 1 when nothing is active on either side.
    pub fn accuracy(&self) -> f64 {
        let d = self.tp + self.fp + self.fn_;
        if d == 0 {
            1.0
        } else {
            self.tp as f64 / d as f64
        }
    }

    /// `2PR / (P + R)`, 1 when nothing is active on either side.
    pub fn f1(&self) -> f64 {
        let d = 2 * self.tp + self.fp + self.fn_;
        if d == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / d as f64
        }
    }

    pub fn precision(&self) -> Option<f64> {
        let d = self.tp + self.fp;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    pub fn recall(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }

    pub fn truth_active(&self) -> bool {
        self.tp + self.fn_ > 0
    }
}

/// Rolls that can be compared cell by cell.
pub trait Cells {
    fn cells(&self) -> &[f32];
    fn dims(&self) -> [usize; 3];
}

impl Cells for Pianoroll {
    fn cells(&self) -> &[f32] {
        self.data()
    }
    fn dims(&self) -> [usize; 3] {
        [self.n_pitch(), self.n_frames(), self.n_instruments()]
    }
}

impl Cells for PitchRoll {
    fn cells(&self) -> &[f32] {
        self.data()
    }
    fn dims(&self) -> [usize; 3] {
        [self.n_pitch(), self.n_frames(), 1]
    }
}

impl Cells for InstrumentRoll {
    fn cells(&self) -> &[f32] {
        self.data()
    }
    fn dims(&self) -> [usize; 3] {
        [1, self.n_frames(), self.n_instruments()]
    }
}

fn check_pair<R: Cells>(pred: &R, truth: &R) -> Result<(), EvalError> {
    if pred.dims() != truth.dims() {
        return Err(EvalError::Shape(format!("{:?} vs {:?}", pred.dims(), truth.dims())));
    }
    let binary = |r: &R| r.cells().iter().all(|&v| v == 0.0 || v == 1.0);
    if !binary(pred) || !binary(truth) {
        return Err(EvalError::NotBinary);
    }
    Ok(())
}

/// Multipitch accuracy pooled over all cells.
pub fn frame_accuracy<R: Cells>(pred: &R, truth: &R) -> Result<f64, EvalError> {
    check_pair(pred, truth)?;
    Ok(Counts::from_cells(pred.cells(), truth.cells()).accuracy())
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentF1 {
    pub counts: Vec<Counts>,
    pub per_instrument: Vec<f64>,
    /// Mean over instruments active in the truth; `None` if there are none.
    pub macro_f1: Option<f64>,
    pub micro_f1: f64,
}

impl InstrumentF1 {
    pub fn from_counts(counts: Vec<Counts>) -> Self {
        let per_instrument: Vec<f64> = counts.iter().map(Counts::f1).collect();
        let active: Vec<f64> = counts.iter().zip(&per_instrument).filter(|(c, _)| c.truth_active()).map(|(_, f)| *f).collect();
        let macro_f1 = (!active.is_empty()).then(|| active.iter().sum::<f64>() / active.len() as f64);
        let mut pooled = Counts::default();
        counts.iter().for_each(|c| pooled.add(*c));
        Self { counts, per_instrument, macro_f1, micro_f1: pooled.f1() }
    }
}

pub fn instrument_counts(pred: &InstrumentRoll, truth: &InstrumentRoll) -> Result<Vec<Counts>, EvalError> {
    check_pair(pred, truth)?;
    Ok((0..truth.n_instruments()).map(|m| Counts::from_cells(pred.track(m), truth.track(m))).collect())
}

pub fn instrument_f1(pred: &InstrumentRoll, truth: &InstrumentRoll) -> Result<InstrumentF1, EvalError> {
    Ok(InstrumentF1::from_counts(instrument_counts(pred, truth)?))
}

/// Max over the frames of each second `[floor(s*fr), floor((s+1)*fr))`, trailing partial second included.
pub fn per_second_max(frames: &[f32], frame_rate: f64) -> Vec<f32> {
    assert!(frame_rate > 0.0, "frame rate must be positive");
    let mut out = Vec::new();
    let mut s = 0usize;
    loop {
        let lo = (s as f64 * frame_rate).floor() as usize;
        if lo >= frames.len() {
            break;
        }
        let hi = (((s + 1) as f64 * frame_rate).floor() as usize).min(frames.len());
        out.push(frames[lo..hi].iter().copied().fold(0.0f32, f32::max));
        s += 1;
    }
    out
}

/// Per-second scores (or labels, for a binary roll), `[instrument][second]`.
pub fn per_second_aggregate(roll: &InstrumentRoll) -> Vec<Vec<f32>> {
    (0..roll.n_instruments()).map(|m| per_second_max(roll.track(m), roll.frame_rate())).collect()
}

/// Mann-Whitney AUC with ties counted half. `None` unless both classes occur.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // midranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += mid * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Some((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstrumentReport {
    pub name: String,
    pub counts: Counts,
    pub f1: f64,
    pub auc: Option<f64>,
    pub active_in_truth: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub threshold: f32,
    pub clips: usize,
    pub skipped: Vec<(String, String)>,
    pub roll_counts: Counts,
    pub pitch_counts: Counts,
    pub roll_acc: f64,
    pub pitch_acc: f64,
    pub instruments: Vec<InstrumentReport>,
    pub macro_f1: Option<f64>,
    pub micro_f1: f64,
    /// Mean AUC over instruments where it is defined.
    pub mean_auc: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "clips evaluated: {} (skipped {}), threshold {}", self.clips, self.skipped.len(), self.threshold);
        let _ = writeln!(s, "{:<20} {:>8} {:>8} {:>8} {:>8} {:>8}", "instrument", "F1", "AUC", "TP", "FP", "FN");
        for r in &self.instruments {
            let mark = if r.active_in_truth { "" } else { " *" };
            let _ = writeln!(
                s,
                "{:<20} {:>8.4} {:>8} {:>8} {:>8} {:>8}{mark}",
                r.name,
                r.f1,
                fmt_opt(r.auc),
                r.counts.tp,
                r.counts.fp,
                r.counts.fn_
            );
        }
        let _ =
            writeln!(s, "instrument F1 macro {} micro {:.4}, mean AUC {}", fmt_opt(self.macro_f1), self.micro_f1, fmt_opt(self.mean_auc));
        let _ = writeln!(s, "pitch Acc {:.4}, pianoroll Acc {:.4}", self.pitch_acc, self.roll_acc);
        if self.instruments.iter().any(|r| !r.active_in_truth) {
            let _ = writeln!(s, "* absent from the ground truth, excluded from the macro mean");
        }
        for (id, why) in &self.skipped {
            let _ = writeln!(s, "skipped {id}: {why}");
        }
        s
    }

    /// `metric<TAB>instrument<TAB>value` lines; `-` marks a whole-split metric.
    pub fn to_records(&self) -> String {
        let mut s = String::new();
        let mut rec = |metric: &str, inst: &str, v: String| {
            let _ = writeln!(s, "{metric}\t{inst}\t{v}");
        };
        rec("pianoroll_acc", "-", format!("{}", self.roll_acc));
        rec("pitch_acc", "-", format!("{}", self.pitch_acc));
        rec("instrument_f1_macro", "-", self.macro_f1.map_or("nan".into(), |v| v.to_string()));
        rec("instrument_f1_micro", "-", format!("{}", self.micro_f1));
        rec("auc_mean", "-", self.mean_auc.map_or("nan".into(), |v| v.to_string()));
        rec("clips", "-", self.clips.to_string());
        rec("threshold", "-", self.threshold.to_string());
        for r in &self.instruments {
            rec("f1", &r.name, r.f1.to_string());
            rec("auc", &r.name, r.auc.map_or("nan".into(), |v| v.to_string()));
            rec("tp", &r.name, r.counts.tp.to_string());
            rec("fp", &r.name, r.counts.fp.to_string());
            rec("fn", &r.name, r.counts.fn_.to_string());
        }
        s
    }
}

/// Pools counts and per-second scores across clips.
#[derive(Debug, Clone)]
pub struct EvalAccumulator {
    threshold: f32,
    names: Vec<String>,
    clips: usize,
    roll: Counts,
    pitch: Counts,
    inst: Vec<Counts>,
    scores: Vec<Vec<f64>>,
    labels: Vec<Vec<bool>>,
}

impl EvalAccumulator {
    pub fn new(vocab: &InstrumentVocab, threshold: f32) -> Self {
        let m = vocab.len();
        Self {
            threshold,
            names: (0..m).map(|i| vocab.name(i).to_string()).collect(),
            clips: 0,
            roll: Counts::default(),
            pitch: Counts::default(),
            inst: vec![Counts::default(); m],
            scores: vec![Vec::new(); m],
            labels: vec![Vec::new(); m],
        }
    }

    /// Adds one clip. Time axes may differ by a frame; both are cut to the shorter.
    pub fn add(&mut self, pred: &Prediction, truth: &Pianoroll) -> Result<(), EvalError> {
        let t = pred.roll.n_frames().min(truth.n_frames());
        if pred.roll.n_frames().abs_diff(truth.n_frames()) > 1 {
            return Err(EvalError::Shape(format!("{} predicted frames vs {} labelled", pred.roll.n_frames(), truth.n_frames())));
        }
        if truth.n_instruments() != self.names.len() || pred.roll.n_instruments() != self.names.len() {
            return Err(EvalError::Shape("instrument count differs from the vocabulary".into()));
        }
        let truth = truth.slice_frames(0, t);
        let prob = pred.roll.slice_frames(0, t);
        let bin = prob.binarize(self.threshold)?;
        self.roll.add(Counts::from_cells(bin.data(), truth.data()));
        let (bp, tp) = (bin.marginalize_pitch(), truth.marginalize_pitch());
        self.pitch.add(Counts::from_cells(bp.data(), tp.data()));
        let (bi, ti) = (bin.marginalize_instrument(), truth.marginalize_instrument());
        for (m, c) in instrument_counts(&bi, &ti)?.into_iter().enumerate() {
            self.inst[m].add(c);
        }
        let pi = prob.marginalize_instrument();
        for (m, (s, l)) in per_second_aggregate(&pi).into_iter().zip(per_second_aggregate(&ti)).enumerate() {
            self.scores[m].extend(s.iter().map(|&v| v as f64));
            self.labels[m].extend(l.iter().map(|&v| v > 0.0));
        }
        self.clips += 1;
        Ok(())
    }

    pub fn report(&self, skipped: Vec<(String, String)>) -> EvalReport {
        let f1 = InstrumentF1::from_counts(self.inst.clone());
        let instruments: Vec<InstrumentReport> = (0..self.names.len())
            .map(|m| InstrumentReport {
                name: self.names[m].clone(),
                counts: self.inst[m],
                f1: f1.per_instrument[m],
                auc: auc(&self.scores[m], &self.labels[m]),
                active_in_truth: self.inst[m].truth_active(),
            })
            .collect();
        let aucs: Vec<f64> = instruments.iter().filter_map(|r| r.auc).collect();
        EvalReport {
            threshold: self.threshold,
            clips: self.clips,
            skipped,
            roll_counts: self.roll,
            pitch_counts: self.pitch,
            roll_acc: self.roll.accuracy(),
            pitch_acc: self.pitch.accuracy(),
            instruments,
            macro_f1: f1.macro_f1,
            micro_f1: f1.micro_f1,
            mean_auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
        }
    }
}

/// A prediction that reproduces the labels exactly.
pub fn oracle_prediction(truth: &Pianoroll) -> Prediction {
    Prediction { roll: truth.clone(), pitch: truth.marginalize_pitch(), instrument: truth.marginalize_instrument() }
}

/// What produces per-clip predictions during evaluation.
pub enum Predictor<'a, T> {
    Model(&'a ModelParams<T>),
    /// Ground-truth labels stand in for the model.
    GroundTruth,
}

/// Evaluates a split, pooling counts before computing rates. Unreadable clips are skipped and listed.
pub fn evaluate<T: Scalar>(
    predictor: Predictor<'_, T>,
    manifest: &CorpusManifest,
    split: Split,
    vocab: &InstrumentVocab,
    threshold: f32,
) -> Result<EvalReport, EvalError> {
    let entries: Vec<_> = manifest.split(split).collect();
    if entries.is_empty() {
        return Err(EvalError::EmptySplit(split));
    }
    let results: Vec<Result<(Prediction, Pianoroll), String>> = entries
        .par_iter()
        .map(|e| {
            let (spec, truth) = load_clip(manifest, e).map_err(|err| err.to_string())?;
            let pred = match &predictor {
                Predictor::Model(p) => predict_spectrogram(*p, &spec).map_err(|err: PredictError| err.to_string())?,
                Predictor::GroundTruth => oracle_prediction(&truth),
            };
            Ok((pred, truth))
        })
        .collect();
    let mut acc = EvalAccumulator::new(vocab, threshold);
    let mut skipped = Vec::new();
    for (e, r) in entries.iter().zip(results) {
        match r.and_then(|(p, t)| acc.add(&p, &t).map_err(|err| err.to_string())) {
            Ok(()) => {}
            Err(why) => {
                log::warn!("skipping clip {}: {why}", e.clip_id);
                skipped.push((e.clip_id.clone(), why));
            }
        }
    }
    if acc.clips == 0 {
        return Err(EvalError::NothingEvaluated(split));
    }
    Ok(acc.report(skipped))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iroll(m: usize, t: usize, on: &[(usize, usize)]) -> InstrumentRoll {
        let mut d = vec![0.0; m * t];
        for &(a, b) in on {
            d[a * t + b] = 1.0;
        }
        InstrumentRoll::new(d, m, t, 31.25, "v").unwrap()
    }

    #[test]
    fn accuracy_worked_example() {
        let truth = PitchRoll::new(vec![1.0, 1.0, 1.0, 0.0, 0.0], 5, 1, 31.25).unwrap();
        let pred = PitchRoll::new(vec![1.0, 1.0, 0.0, 1.0, 0.0], 5, 1, 31.25).unwrap();
        assert_eq!(frame_accuracy(&pred, &truth).unwrap(), 0.5);
        assert_eq!(frame_accuracy(&truth, &truth).unwrap(), 1.0);
        let empty = PitchRoll::new(vec![0.0; 5], 5, 1, 31.25).unwrap();
        assert_eq!(frame_accuracy(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn f1_worked_example() {
        let truth = iroll(2, 4, &[(0, 0), (0, 1), (0, 2)]);
        let pred = iroll(2, 4, &[(0, 0), (0, 1), (0, 3)]);
        let r = instrument_f1(&pred, &truth).unwrap();
        assert!((r.per_instrument[0] - 2.0 / 3.0).abs() < 1e-15);
        // instrument 1 silent on both sides
        assert_eq!(r.per_instrument[1], 1.0);
        assert_eq!(r.macro_f1, Some(r.per_instrument[0]));
        let perfect = instrument_f1(&truth, &truth).unwrap();
        assert!(perfect.per_instrument.iter().all(|&f| f == 1.0));
    }

    #[test]
    fn f1_is_zero_when_one_side_is_empty() {
        let truth = iroll(1, 4, &[(0, 2)]);
        let pred = iroll(1, 4, &[]);
        assert_eq!(instrument_f1(&pred, &truth).unwrap().per_instrument[0], 0.0);
        assert_eq!(instrument_f1(&truth, &pred).unwrap().per_instrument[0], 0.0);
    }

    #[test]
    fn per_second_bins_follow_floor_boundaries() {
        let frames: Vec<f32> = (0..63).map(|i| i as f32 / 100.0).collect();
        let s = per_second_max(&frames, 31.25);
        assert_eq!(s, vec![0.30, 0.61, 0.62]);
        assert!(per_second_max(&[0.7; 100], 31.25).iter().all(|&v| v == 0.7));
    }

    #[test]
    fn auc_worked_examples() {
        let s = [0.9, 0.8, 0.4, 0.2];
        assert_eq!(auc(&s, &[true, true, false, false]), Some(1.0));
        assert_eq!(auc(&s, &[true, false, true, false]), Some(0.75));
        assert_eq!(auc(&[0.5, 0.5], &[true, false]), Some(0.5));
        assert_eq!(auc(&s, &[true; 4]), None);
    }

    #[test]
    fn shape_and_binary_errors() {
        let a = iroll(2, 4, &[]);
        let b = iroll(2, 5, &[]);
        assert!(matches!(instrument_f1(&a, &b), Err(EvalError::Shape(_))));
        let soft = InstrumentRoll::new(vec![0.5; 8], 2, 4, 31.25, "v").unwrap();
        assert!(matches!(instrument_f1(&soft, &a), Err(EvalError::NotBinary)));
    }
}
