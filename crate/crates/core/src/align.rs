//! Audio-to-MIDI alignment by dynamic time warping over CQT frames.
//!
//! The MIDI side is rendered and transformed with the same front end as the
//! audio, so both sequences live in one feature space. Frames are compared
//! with cosine distance and the path pays an extra `median(cost)` for every
//! horizontal or vertical step.

use thiserror::Error;

use crate::dsp::Spectrogram;
use crate::midi::NoteEvent;

#[derive(Debug, Error, PartialEq)]
pub enum AlignError {
    #[error("cannot align an empty spectrogram")]
    Empty,
    #[error("spectrograms have {0} and {1} bins")]
    BinMismatch(usize, usize),
    #[error("alignment path is empty")]
    EmptyPath,
}

/// Dense row-major cost matrix, rows = audio frames, cols = MIDI frames.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn median(&self) -> f64 {
        let mut v = self.data.clone();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n == 0 {
            0.0
        } else if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }
}

/// `1 - cos(a_i, b_j)` for every frame pair; zero-norm frames sit at distance 1.
pub fn cost_matrix(a: &Spectrogram, b: &Spectrogram) -> Result<CostMatrix, AlignError> {
    if a.n_frames() == 0 || b.n_frames() == 0 {
        return Err(AlignError::Empty);
    }
    if a.n_bins() != b.n_bins() {
        return Err(AlignError::BinMismatch(a.n_bins(), b.n_bins()));
    }
    let norms = |s: &Spectrogram| -> Vec<f64> {
        (0..s.n_frames()).map(|t| s.frame(t).iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()).collect()
    };
    let (na, nb) = (norms(a), norms(b));
    let mut data = Vec::with_capacity(a.n_frames() * b.n_frames());
    for i in 0..a.n_frames() {
        let fa = a.frame(i);
        for j in 0..b.n_frames() {
            if na[i] == 0.0 || nb[j] == 0.0 {
                data.push(1.0);
                continue;
            }
            let dot: f64 = fa.iter().zip(b.frame(j)).map(|(&x, &y)| x as f64 * y as f64).sum();
            data.push(1.0 - dot / (na[i] * nb[j]));
        }
    }
    Ok(CostMatrix::new(a.n_frames(), b.n_frames(), data))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentPath {
    /// `(audio_frame, midi_frame)` from `(0, 0)` to the last cell.
    pub pairs: Vec<(usize, usize)>,
    /// Accumulated cost including step penalties.
    pub total_cost: f64,
    /// `total_cost / pairs.len()`.
    pub normalized_cost: f64,
}

impl AlignmentPath {
    /// Two-column text dump, one `audio<TAB>midi` pair per line.
    pub fn to_text(&self) -> String {
        self.pairs.iter().map(|(a, m)| format!("{a}\t{m}\n")).collect()
    }
}

#[derive(Clone, Copy)]
enum Step {
    Start,
    Diagonal,
    Audio,
    Midi,
}

/// Minimum-cost monotone path through `cost` with penalty `median(cost)` on
/// non-diagonal steps. Ties prefer the diagonal, then an audio-only step.
pub fn dtw(cost: &CostMatrix) -> Result<AlignmentPath, AlignError> {
    dtw_with_penalty(cost, cost.median())
}

pub fn dtw_with_penalty(cost: &CostMatrix, penalty: f64) -> Result<AlignmentPath, AlignError> {
    let (rows, cols) = (cost.rows, cost.cols);
    if rows == 0 || cols == 0 {
        return Err(AlignError::Empty);
    }
    let mut acc = vec![f64::INFINITY; rows * cols];
    let mut step = vec![Step::Start; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            let here = cost.get(i, j);
            if i == 0 && j == 0 {
                acc[0] = here;
                continue;
            }
            let mut best = f64::INFINITY;
            let mut how = Step::Start;
            if i > 0 && j > 0 {
                best = acc[(i - 1) * cols + j - 1];
                how = Step::Diagonal;
            }
            if i > 0 {
                let c = acc[(i - 1) * cols + j] + penalty;
                if c < best {
                    best = c;
                    how = Step::Audio;
                }
            }
            if j > 0 {
                let c = acc[i * cols + j - 1] + penalty;
                if c < best {
                    best = c;
                    how = Step::Midi;
                }
            }
            acc[i * cols + j] = here + best;
            step[i * cols + j] = how;
        }
    }
    let (mut i, mut j) = (rows - 1, cols - 1);
    let mut pairs = vec![(i, j)];
    loop {
        match step[i * cols + j] {
            Step::Start => break,
            Step::Diagonal => {
                i -= 1;
                j -= 1;
            }
            Step::Audio => i -= 1,
            Step::Midi => j -= 1,
        }
        pairs.push((i, j));
    }
    pairs.reverse();
    let total_cost = acc[rows * cols - 1];
    Ok(AlignmentPath { normalized_cost: total_cost / pairs.len() as f64, total_cost, pairs })
}

/// Piecewise-linear map from MIDI frame position to audio frame position.
/// MIDI frames visited by several audio frames map to their mean.
fn frame_map(path: &AlignmentPath) -> Vec<f64> {
    let n = path.pairs.last().map_or(0, |p| p.1 + 1);
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    for &(a, m) in &path.pairs {
        sum[m] += a as f64;
        count[m] += 1;
    }
    sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect()
}

fn interpolate(map: &[f64], x: f64) -> f64 {
    let last = map.len() - 1;
    if x <= 0.0 {
        return map[0];
    }
    if x >= last as f64 {
        return map[last];
    }
    let j = x.floor() as usize;
    let frac = x - j as f64;
    map[j] + (map[j + 1] - map[j]) * frac
}

/// Retimes events through `path`. Times past either end clamp to the path
/// ends; offsets stay at least 1 ms after their onsets.
pub fn warp_events(events: &[NoteEvent], path: &AlignmentPath, frame_rate: f64) -> Result<Vec<NoteEvent>, AlignError> {
    if path.pairs.is_empty() {
        return Err(AlignError::EmptyPath);
    }
    let map = frame_map(path);
    Ok(events
        .iter()
        .map(|e| {
            let onset_s = interpolate(&map, e.onset_s * frame_rate) / frame_rate;
            let offset_s = (interpolate(&map, e.offset_s * frame_rate) / frame_rate).max(onset_s + 1e-3);
            NoteEvent { onset_s, offset_s, ..*e }
        })
        .collect())
}
