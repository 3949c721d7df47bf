//! Procedural corpus generation and the tab-separated manifest.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::smf::{Smf, Timing, TrackEvent};
use super::{NoteEvent, PERCUSSION_CHANNEL};
use crate::rolls::InstrumentVocab;

pub const TICKS_PER_QUARTER: u16 = 480;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("vocabulary is empty")]
    EmptyVocab,
    #[error("invalid corpus configuration: {0}")]
    Config(String),
    #[error("cannot write corpus: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("manifest line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("duplicate clip id {0:?}")]
    DuplicateId(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub clip_id: String,
    /// Relative to the manifest directory unless absolute.
    pub midi_path: PathBuf,
    pub audio_path: PathBuf,
    pub split: Split,
    pub duration_s: f64,
}

impl ManifestEntry {
    /// Label file that sits next to the audio: same stem, `.prl` extension.
    pub fn label_path(&self) -> PathBuf {
        self.audio_path.with_extension("prl")
    }
}

/// Clip list plus the vocabulary id and generation seed.
///
/// On disk: optional `# key<TAB>value` header lines, then one record per
/// clip: `clip_id  midi_path  audio_path  split  duration_s`, tab-separated.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
    pub vocab_id: String,
    pub seed: Option<u64>,
    /// Directory relative paths resolve against.
    pub root: PathBuf,
}

impl CorpusManifest {
    pub fn to_tsv(&self) -> String {
        let mut s = format!("# vocab_id\t{}\n", self.vocab_id);
        if let Some(seed) = self.seed {
            s.push_str(&format!("# seed\t{seed}\n"));
        }
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", e.clip_id, e.midi_path.display(), e.audio_path.display(), e.split, e.duration_s));
        }
        s
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self, ManifestError> {
        let mut m = CorpusManifest { entries: Vec::new(), vocab_id: String::new(), seed: None, root: root.into() };
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let err = |message: String| ManifestError::Syntax { line: i + 1, message };
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some((k, v)) = rest.trim().split_once('\t') {
                    match k.trim() {
                        "vocab_id" => m.vocab_id = v.trim().to_string(),
                        "seed" => m.seed = Some(v.trim().parse().map_err(|_| err("bad seed".into()))?),
                        _ => {}
                    }
                }
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(err(format!("expected 5 tab-separated fields, got {}", cols.len())));
            }
            let duration_s: f64 = cols[4].parse().map_err(|_| err("bad duration".into()))?;
            if !(duration_s.is_finite() && duration_s >= 0.0) {
                return Err(err("bad duration".into()));
            }
            if !seen.insert(cols[0].to_string()) {
                return Err(ManifestError::DuplicateId(cols[0].to_string()));
            }
            m.entries.push(ManifestEntry {
                clip_id: cols[0].to_string(),
                midi_path: cols[1].into(),
                audio_path: cols[2].into(),
                split: cols[3].parse().map_err(err)?,
                duration_s,
            });
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}

/// Generator settings. `ranges[i]` is the inclusive MIDI pitch range for vocabulary entry `i`.
#[derive(Debug, Clone)]
pub struct CorpusConfig {
    pub n_clips: usize,
    pub clip_seconds: f64,
    pub vocab: InstrumentVocab,
    pub ranges: Vec<(u8, u8)>,
    /// Inclusive range of simultaneous notes per instrument at a grid step.
    pub polyphony: (usize, usize),
    pub tempo_bpm: (f64, f64),
    pub split_fraction: f64,
    /// Trailing seconds left free of note-offs so releases fit inside the clip.
    pub tail_s: f64,
}

/// Typical playing range for an instrument name, falling back to the middle of the keyboard.
pub fn default_range(name: &str) -> (u8, u8) {
    match name {
        "piano" => (36, 96),
        "acoustic guitar" => (40, 76),
        "electric guitar" => (40, 84),
        "trumpet" => (55, 82),
        "sax" => (49, 81),
        "violin" => (55, 96),
        "cello" => (36, 67),
        "flute" => (60, 96),
        _ => (48, 72),
    }
}

impl CorpusConfig {
    pub fn new(vocab: InstrumentVocab) -> Self {
        let ranges = vocab.entries().iter().map(|e| default_range(&e.name)).collect();
        Self {
            n_clips: 8,
            clip_seconds: 20.0,
            vocab,
            ranges,
            polyphony: (1, 2),
            tempo_bpm: (80.0, 140.0),
            split_fraction: 0.75,
            tail_s: 1.0,
        }
    }

    pub fn n_train(&self) -> usize {
        (self.n_clips as f64 * self.split_fraction).round() as usize
    }

    fn validate(&self) -> Result<(), CorpusError> {
        if self.vocab.is_empty() {
            return Err(CorpusError::EmptyVocab);
        }
        let bad = |m: &str| Err(CorpusError::Config(m.to_string()));
        if self.n_clips < 2 {
            return bad("n_clips must be at least 2");
        }
        if !(self.clip_seconds >= 2.0) || !self.clip_seconds.is_finite() {
            return bad("clip_seconds must be at least 2");
        }
        if self.ranges.len() != self.vocab.len() {
            return bad("one pitch range per vocabulary entry is required");
        }
        if self.ranges.iter().any(|&(lo, hi)| lo > hi || hi > 127) {
            return bad("pitch ranges must be ascending within [0, 127]");
        }
        let (pmin, pmax) = self.polyphony;
        if pmin < 1 || pmin > pmax {
            return bad("polyphony range must satisfy 1 <= min <= max");
        }
        if self.ranges.iter().any(|&(lo, hi)| ((hi - lo) as usize + 1) < pmax) {
            return bad("a pitch range is narrower than the maximum polyphony");
        }
        let (tlo, thi) = self.tempo_bpm;
        if !(tlo > 0.0 && tlo <= thi && thi.is_finite()) {
            return bad("tempo range must be positive and ascending");
        }
        if !(0.0..=1.0).contains(&self.split_fraction) {
            return bad("split fraction must be in [0, 1]");
        }
        if !(self.tail_s >= 0.0 && self.tail_s < self.clip_seconds - 1.0) {
            return bad("tail must leave at least one second of music");
        }
        Ok(())
    }
}

/// One generated clip: its intended notes and the SMF-1 bytes encoding them.
#[derive(Debug, Clone)]
pub struct ClipPlan {
    pub clip_id: String,
    pub instruments: Vec<usize>,
    pub bpm: f64,
    pub events: Vec<NoteEvent>,
    pub smf: Vec<u8>,
    pub split: Split,
}

fn channel_for(slot: usize) -> u8 {
    // skip the percussion channel
    let c = slot as u8;
    if c >= PERCUSSION_CHANNEL {
        c + 1
    } else {
        c
    }
}

fn plan_clip(rng: &mut ChaCha8Rng, cfg: &CorpusConfig, clip_id: String, split: Split) -> ClipPlan {
    let m = cfg.vocab.len();
    let k = rng.gen_range(1..=m.min(4));
    let mut pool: Vec<usize> = (0..m).collect();
    pool.shuffle(rng);
    let mut instruments = pool[..k].to_vec();
    instruments.sort_unstable();

    let bpm = rng.gen_range(cfg.tempo_bpm.0..=cfg.tempo_bpm.1).round();
    let us_per_quarter = (60e6 / bpm).round() as u32;
    let sec_per_tick = us_per_quarter as f64 / 1e6 / TICKS_PER_QUARTER as f64;
    let last_tick = ((cfg.clip_seconds - cfg.tail_s) / sec_per_tick).floor() as u64;
    let tpq = TICKS_PER_QUARTER as u64;

    let mut tracks = vec![vec![(0u64, TrackEvent::Tempo(us_per_quarter))]];
    let mut events = Vec::new();
    for (slot, &inst) in instruments.iter().enumerate() {
        let channel = channel_for(slot);
        let program = cfg.vocab.representative_program(inst);
        let (lo, hi) = cfg.ranges[inst];
        // eighth- or quarter-note grid
        let grid = if rng.gen_bool(0.5) { tpq / 2 } else { tpq };
        let gap = grid / 8;
        let mut track =
            vec![(0, TrackEvent::TrackName(cfg.vocab.name(inst).to_string())), (0, TrackEvent::ProgramChange { channel, program })];
        let mut tick = 0u64;
        while tick + grid <= last_tick {
            let units = if rng.gen_bool(0.3) { 2 } else { 1 };
            let len = (units * grid).min(last_tick - tick);
            if rng.gen_bool(0.2) {
                tick += len;
                continue;
            }
            let voices = rng.gen_range(cfg.polyphony.0..=cfg.polyphony.1);
            let mut keys: Vec<u8> = (lo..=hi).collect();
            keys.shuffle(rng);
            let mut chord = keys[..voices].to_vec();
            chord.sort_unstable();
            let velocity = rng.gen_range(60..=110);
            let stop = tick + len - gap;
            for &key in &chord {
                track.push((tick, TrackEvent::NoteOn { channel, key, velocity }));
                track.push((stop, TrackEvent::NoteOff { channel, key, velocity: 0 }));
                events.push(NoteEvent {
                    pitch: key,
                    onset_s: tick as f64 * sec_per_tick,
                    offset_s: stop as f64 * sec_per_tick,
                    program,
                    channel,
                    velocity,
                });
            }
            tick += len;
        }
        // note-offs before note-ons at a shared tick
        track.sort_by_key(|(t, e)| (*t, !matches!(e, TrackEvent::NoteOff { .. })));
        tracks.push(track);
    }
    events.sort_by(|a, b| a.onset_s.total_cmp(&b.onset_s).then(a.channel.cmp(&b.channel)).then(a.pitch.cmp(&b.pitch)));
    let smf = Smf { format: 1, timing: Timing::Metrical(TICKS_PER_QUARTER), tracks }.to_bytes();
    ClipPlan { clip_id, instruments, bpm, events, smf, split }
}

/// Deterministically plans every clip of a corpus without touching the filesystem.
pub fn plan_corpus(seed: u64, cfg: &CorpusConfig) -> Result<Vec<ClipPlan>, CorpusError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_train = cfg.n_train();
    Ok((0..cfg.n_clips)
        .map(|i| {
            let split = if i < n_train { Split::Train } else { Split::Test };
            plan_clip(&mut rng, cfg, format!("clip{i:04}"), split)
        })
        .collect())
}

/// Writes `<out>/midi/<id>.mid` for every clip and `<out>/manifest.tsv`.
///
/// Audio paths in the manifest point at `audio/<id>.wav`; rendering them is
/// left to the caller.
pub fn generate_corpus(seed: u64, cfg: &CorpusConfig, out_dir: &Path) -> Result<(CorpusManifest, Vec<ClipPlan>), CorpusError> {
    let plans = plan_corpus(seed, cfg)?;
    fs::create_dir_all(out_dir.join("midi"))?;
    fs::create_dir_all(out_dir.join("audio"))?;
    let mut entries = Vec::with_capacity(plans.len());
    for plan in &plans {
        let midi_path = PathBuf::from("midi").join(format!("{}.mid", plan.clip_id));
        fs::write(out_dir.join(&midi_path), &plan.smf)?;
        entries.push(ManifestEntry {
            clip_id: plan.clip_id.clone(),
            midi_path,
            audio_path: PathBuf::from("audio").join(format!("{}.wav", plan.clip_id)),
            split: plan.split,
            duration_s: cfg.clip_seconds,
        });
    }
    let manifest = CorpusManifest { entries, vocab_id: cfg.vocab.id().to_string(), seed: Some(seed), root: out_dir.to_path_buf() };
    fs::write(out_dir.join("manifest.tsv"), manifest.to_tsv())?;
    Ok((manifest, plans))
}
