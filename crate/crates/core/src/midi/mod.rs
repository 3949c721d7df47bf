//! MIDI ingestion: note events, instrument mapping, and label rasterization.

mod corpus;
pub mod smf;

pub use corpus::{generate_corpus, plan_corpus, ClipPlan, CorpusConfig, CorpusError, CorpusManifest, ManifestEntry, ManifestError, Split};
pub use smf::{Smf, SmfError, Timing, TrackEvent};

use std::collections::HashMap;

use crate::rolls::{InstrumentVocab, Pianoroll, N_PITCHES, PITCH_OFFSET};

/// General MIDI percussion channel (zero-based).
pub const PERCUSSION_CHANNEL: u8 = 9;
const DEFAULT_TEMPO: u32 = 500_000;

/// One sounding note.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoteEvent {
    pub pitch: u8,
    pub onset_s: f64,
    pub offset_s: f64,
    pub program: u8,
    pub channel: u8,
    pub velocity: u8,
}

impl NoteEvent {
    pub fn duration_s(&self) -> f64 {
        self.offset_s - self.onset_s
    }
}

/// Piecewise-constant tempo map converting ticks to seconds.
#[derive(Debug, Clone)]
pub struct TempoMap {
    timing: Timing,
    /// `(tick, seconds at tick, microseconds per quarter)`, sorted by tick.
    segments: Vec<(u64, f64, u32)>,
}

impl TempoMap {
    pub fn new(timing: Timing, mut changes: Vec<(u64, u32)>) -> Self {
        changes.sort_by_key(|(t, _)| *t);
        let mut segments = vec![(0u64, 0.0f64, DEFAULT_TEMPO)];
        if let Timing::Metrical(tpq) = timing {
            for (tick, us) in changes {
                let &(t0, s0, us0) = segments.last().unwrap();
                let s = s0 + (tick - t0) as f64 * us0 as f64 / (1e6 * tpq as f64);
                if tick == t0 {
                    segments.last_mut().unwrap().2 = us;
                } else {
                    segments.push((tick, s, us));
                }
            }
        }
        Self { timing, segments }
    }

    pub fn seconds(&self, tick: u64) -> f64 {
        match self.timing {
            Timing::Timecode(tps) => tick as f64 / tps,
            Timing::Metrical(tpq) => {
                let i = self.segments.partition_point(|(t, _, _)| *t <= tick) - 1;
                let (t0, s0, us) = self.segments[i];
                s0 + (tick - t0) as f64 * us as f64 / (1e6 * tpq as f64)
            }
        }
    }
}

/// Extracts note events from a format 0/1 Standard MIDI File.
///
/// Tempo changes from every track form one global map. Each note takes the
/// program active on its channel at its onset tick. Overlapping note-ons of
/// the same key are closed first-in first-out; notes still open when their
/// track ends are closed there. Zero-length notes are dropped.
pub fn parse_midi(bytes: &[u8]) -> Result<Vec<NoteEvent>, SmfError> {
    let smf = Smf::parse(bytes)?;
    Ok(events_from_smf(&smf))
}

pub fn events_from_smf(smf: &Smf) -> Vec<NoteEvent> {
    let mut tempo_changes = Vec::new();
    // (tick, track, sequence, channel, program)
    let mut programs: Vec<(u64, usize, usize, u8, u8)> = Vec::new();
    for (ti, track) in smf.tracks.iter().enumerate() {
        for (seq, (tick, ev)) in track.iter().enumerate() {
            match ev {
                TrackEvent::Tempo(us) => tempo_changes.push((*tick, *us)),
                TrackEvent::ProgramChange { channel, program } => programs.push((*tick, ti, seq, *channel, *program)),
                _ => {}
            }
        }
    }
    let tempo = TempoMap::new(smf.timing, tempo_changes);
    programs.sort_by_key(|&(tick, ti, seq, _, _)| (tick, ti, seq));
    let program_at =
        |channel: u8, tick: u64| -> u8 { programs.iter().take_while(|p| p.0 <= tick).filter(|p| p.3 == channel).last().map_or(0, |p| p.4) };

    let mut notes = Vec::new();
    for track in &smf.tracks {
        let mut open: HashMap<(u8, u8), Vec<(u64, u8)>> = HashMap::new();
        let end_tick = track.last().map_or(0, |(t, _)| *t);
        let close = |channel: u8, key: u8, start: u64, vel: u8, stop: u64, notes: &mut Vec<(u64, u64, u8, u8, u8)>| {
            if stop > start {
                notes.push((start, stop, channel, key, vel));
            }
        };
        let mut raw = Vec::new();
        for (tick, ev) in track {
            match *ev {
                TrackEvent::NoteOn { channel, key, velocity } => {
                    open.entry((channel, key)).or_default().push((*tick, velocity));
                }
                TrackEvent::NoteOff { channel, key, .. } => {
                    if let Some(stack) = open.get_mut(&(channel, key)) {
                        if !stack.is_empty() {
                            let (start, vel) = stack.remove(0);
                            close(channel, key, start, vel, *tick, &mut raw);
                        }
                    }
                }
                _ => {}
            }
        }
        let mut dangling: Vec<_> = open.into_iter().flat_map(|((c, k), v)| v.into_iter().map(move |(s, vel)| (c, k, s, vel))).collect();
        dangling.sort();
        for (c, k, s, vel) in dangling {
            close(c, k, s, vel, end_tick, &mut raw);
        }
        raw.sort_by_key(|&(start, stop, channel, key, _)| (start, channel, key, stop));
        for (start, stop, channel, key, vel) in raw {
            notes.push(NoteEvent {
                pitch: key,
                onset_s: tempo.seconds(start),
                offset_s: tempo.seconds(stop),
                program: program_at(channel, start),
                channel,
                velocity: vel,
            });
        }
    }
    notes.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s).then(a.channel.cmp(&b.channel)).then(a.pitch.cmp(&b.pitch)));
    notes
}

/// Vocabulary index for a program on a channel. Percussion never maps.
pub fn map_program(program: u8, channel: u8, vocab: &InstrumentVocab) -> Option<usize> {
    if channel == PERCUSSION_CHANNEL {
        return None;
    }
    vocab.index_of_program(program)
}

/// Half-open frame range `[start, end)` whose intervals `[t/fr, (t+1)/fr)`
/// overlap `[onset, offset)` by a positive amount.
pub fn overlapping_frames(onset_s: f64, offset_s: f64, frame_rate: f64) -> (usize, usize) {
    if !(offset_s > onset_s) || offset_s <= 0.0 {
        return (0, 0);
    }
    let mut start = (onset_s * frame_rate).floor().max(0.0) as usize;
    let mut end = (offset_s * frame_rate).ceil().max(0.0) as usize;
    // settle boundary rounding against the exact predicates
    while start > 0 && (start as f64) / frame_rate > onset_s {
        start -= 1;
    }
    while ((start + 1) as f64) / frame_rate <= onset_s {
        start += 1;
    }
    while end > 0 && ((end - 1) as f64) / frame_rate >= offset_s {
        end -= 1;
    }
    while (end as f64) / frame_rate < offset_s {
        end += 1;
    }
    (start, end.max(start))
}

/// Number of label frames covering `duration_s`.
pub fn frame_count(duration_s: f64, frame_rate: f64) -> usize {
    (duration_s * frame_rate).ceil().max(0.0) as usize
}

/// Rasterizes events into a binary 88-row label roll.
///
/// A cell is active when some mapped, in-range event overlaps that frame by
/// any positive amount. Events past `duration_s` are clipped.
pub fn events_to_pianoroll(events: &[NoteEvent], frame_rate: f64, duration_s: f64, vocab: &InstrumentVocab) -> Pianoroll {
    let n_frames = frame_count(duration_s, frame_rate);
    let mut roll = Pianoroll::zeros(N_PITCHES, n_frames, vocab.len(), frame_rate, vocab.id()).expect("frame rate validated by caller");
    for ev in events {
        let Some(m) = map_program(ev.program, ev.channel, vocab) else { continue };
        if ev.pitch < PITCH_OFFSET || ev.pitch as usize >= PITCH_OFFSET as usize + N_PITCHES {
            continue;
        }
        let f = (ev.pitch - PITCH_OFFSET) as usize;
        let (start, end) = overlapping_frames(ev.onset_s, ev.offset_s, frame_rate);
        for t in start..end.min(n_frames) {
            roll.set(f, t, m, 1.0);
        }
    }
    roll
}

/// Encodes notes as SMF type 1 at 120 BPM, 480 ticks per quarter, one track per channel.
///
/// Onsets and offsets are rounded to the nearest tick (about 1 ms).
pub fn events_to_smf(events: &[NoteEvent]) -> Vec<u8> {
    let ticks_per_s = corpus::TICKS_PER_QUARTER as f64 * 1e6 / DEFAULT_TEMPO as f64;
    let tick = |s: f64| (s.max(0.0) * ticks_per_s).round() as u64;
    let mut by_channel: std::collections::BTreeMap<u8, Vec<&NoteEvent>> = Default::default();
    for e in events {
        by_channel.entry(e.channel & 0x0f).or_default().push(e);
    }
    let mut tracks = vec![vec![(0u64, TrackEvent::Tempo(DEFAULT_TEMPO))]];
    for (channel, mut notes) in by_channel {
        notes.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s));
        let mut track = Vec::new();
        let mut program = None;
        for e in notes {
            let on = tick(e.onset_s);
            let off = tick(e.offset_s).max(on + 1);
            if program != Some(e.program) {
                track.push((on, TrackEvent::ProgramChange { channel, program: e.program }));
                program = Some(e.program);
            }
            track.push((on, TrackEvent::NoteOn { channel, key: e.pitch, velocity: e.velocity.max(1) }));
            track.push((off, TrackEvent::NoteOff { channel, key: e.pitch, velocity: 0 }));
        }
        // offs, then program changes, then ons at a shared tick
        track.sort_by_key(|(t, e)| {
            let rank = match e {
                TrackEvent::NoteOff { .. } => 0,
                TrackEvent::ProgramChange { .. } => 1,
                _ => 2,
            };
            (*t, rank)
        });
        tracks.push(track);
    }
    Smf { format: 1, timing: Timing::Metrical(corpus::TICKS_PER_QUARTER), tracks }.to_bytes()
}
