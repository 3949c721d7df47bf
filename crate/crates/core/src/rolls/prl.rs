//! PRL: little-endian binary container for rolls.
//!
//! ```text
//! "PRL1"  u8 kind  u8 payload  u32 F  u32 T  u32 M  f64 frame_rate
//! u16 vocab_len  vocab bytes  payload in [m][t][f] order
//! ```
//!
//! kind: 0 pianoroll, 1 pitch roll (M = 1), 2 instrument roll (F = 1).
//! payload: 0 one byte per cell holding 0 or 1, 1 f32 per cell.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::{InstrumentRoll, Pianoroll, PitchRoll, RollError};

const MAGIC: &[u8; 3] = b"PRL";
const VERSION: u8 = b'1';
/// Upper bound on cells in one file (16 GiB of f32).
const MAX_CELLS: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum PrlError {
    #[error("not a PRL stream (bad magic)")]
    BadMagic,
    #[error("unsupported PRL version byte {0:#04x}")]
    Version(u8),
    #[error("truncated PRL stream")]
    Truncated,
    #[error("dimensions {f}x{t}x{m} overflow the supported size")]
    DimensionOverflow { f: u32, t: u32, m: u32 },
    #[error("unknown roll kind {0}")]
    Kind(u8),
    #[error("unknown payload type {0}")]
    PayloadType(u8),
    #[error("{kind:?} roll requires unit dimension, got {f}x{t}x{m}")]
    InconsistentDims { kind: PrlKind, f: u32, t: u32, m: u32 },
    #[error("vocabulary id is not valid UTF-8")]
    Utf8,
    #[error("vocabulary id longer than 65535 bytes")]
    VocabTooLong,
    #[error("invalid roll contents: {0}")]
    Invalid(#[from] RollError),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for PrlError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            PrlError::Truncated
        } else {
            PrlError::Io(e)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrlKind {
    Pianoroll = 0,
    Pitch = 1,
    Instrument = 2,
}

/// Any of the three roll types, as read back from a PRL stream.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyRoll {
    Pianoroll(Pianoroll),
    Pitch(PitchRoll),
    Instrument(InstrumentRoll),
}

impl AnyRoll {
    pub fn kind(&self) -> PrlKind {
        match self {
            AnyRoll::Pianoroll(_) => PrlKind::Pianoroll,
            AnyRoll::Pitch(_) => PrlKind::Pitch,
            AnyRoll::Instrument(_) => PrlKind::Instrument,
        }
    }

    pub fn into_pianoroll(self) -> Option<Pianoroll> {
        match self {
            AnyRoll::Pianoroll(p) => Some(p),
            _ => None,
        }
    }
}

impl From<Pianoroll> for AnyRoll {
    fn from(r: Pianoroll) -> Self {
        AnyRoll::Pianoroll(r)
    }
}

impl From<PitchRoll> for AnyRoll {
    fn from(r: PitchRoll) -> Self {
        AnyRoll::Pitch(r)
    }
}

impl From<InstrumentRoll> for AnyRoll {
    fn from(r: InstrumentRoll) -> Self {
        AnyRoll::Instrument(r)
    }
}

struct Header<'a> {
    kind: PrlKind,
    dims: [usize; 3],
    frame_rate: f64,
    vocab_id: &'a str,
    data: &'a [f32],
    binary: bool,
}

fn header_of(roll: &AnyRoll) -> Header<'_> {
    match roll {
        AnyRoll::Pianoroll(r) => Header {
            kind: PrlKind::Pianoroll,
            dims: [r.n_pitch(), r.n_frames(), r.n_instruments()],
            frame_rate: r.frame_rate(),
            vocab_id: r.vocab_id(),
            data: r.data(),
            binary: r.is_binary(),
        },
        AnyRoll::Pitch(r) => Header {
            kind: PrlKind::Pitch,
            dims: [r.n_pitch(), r.n_frames(), 1],
            frame_rate: r.frame_rate(),
            vocab_id: "",
            data: r.data(),
            binary: r.is_binary(),
        },
        AnyRoll::Instrument(r) => Header {
            kind: PrlKind::Instrument,
            dims: [1, r.n_frames(), r.n_instruments()],
            frame_rate: r.frame_rate(),
            vocab_id: r.vocab_id(),
            data: r.data(),
            binary: r.is_binary(),
        },
    }
}

/// Writes `roll` and returns the number of bytes written.
///
/// Binary rolls are stored one byte per cell; anything else as f32.
pub fn write_prl<W: Write>(roll: &AnyRoll, mut out: W) -> Result<usize, PrlError> {
    let h = header_of(roll);
    let vocab = h.vocab_id.as_bytes();
    if vocab.len() > u16::MAX as usize {
        return Err(PrlError::VocabTooLong);
    }
    let dim = |d: usize| -> Result<u32, PrlError> {
        u32::try_from(d).map_err(|_| PrlError::DimensionOverflow { f: h.dims[0] as u32, t: h.dims[1] as u32, m: h.dims[2] as u32 })
    };
    let mut buf = Vec::with_capacity(32 + vocab.len() + h.data.len() * if h.binary { 1 } else { 4 });
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(h.kind as u8);
    buf.push(if h.binary { 0 } else { 1 });
    for d in h.dims {
        buf.extend_from_slice(&dim(d)?.to_le_bytes());
    }
    buf.extend_from_slice(&h.frame_rate.to_le_bytes());
    buf.extend_from_slice(&(vocab.len() as u16).to_le_bytes());
    buf.extend_from_slice(vocab);
    if h.binary {
        buf.extend(h.data.iter().map(|&v| v as u8));
    } else {
        for v in h.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(buf.len())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, PrlError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads one roll. Nothing is returned unless the whole stream validates.
pub fn read_prl<R: Read>(mut src: R) -> Result<AnyRoll, PrlError> {
    let mut magic = [0u8; 4];
    src.read_exact(&mut magic)?;
    if &magic[..3] != MAGIC {
        return Err(PrlError::BadMagic);
    }
    if magic[3] != VERSION {
        return Err(PrlError::Version(magic[3]));
    }
    let mut kp = [0u8; 2];
    src.read_exact(&mut kp)?;
    let kind = match kp[0] {
        0 => PrlKind::Pianoroll,
        1 => PrlKind::Pitch,
        2 => PrlKind::Instrument,
        k => return Err(PrlError::Kind(k)),
    };
    let binary = match kp[1] {
        0 => true,
        1 => false,
        p => return Err(PrlError::PayloadType(p)),
    };
    let (f, t, m) = (read_u32(&mut src)?, read_u32(&mut src)?, read_u32(&mut src)?);
    let cells = (f as u64)
        .checked_mul(t as u64)
        .and_then(|x| x.checked_mul(m as u64))
        .filter(|&c| c <= MAX_CELLS && usize::try_from(c).is_ok())
        .ok_or(PrlError::DimensionOverflow { f, t, m })? as usize;
    let consistent = match kind {
        PrlKind::Pianoroll => true,
        PrlKind::Pitch => m == 1,
        PrlKind::Instrument => f == 1,
    };
    if !consistent {
        return Err(PrlError::InconsistentDims { kind, f, t, m });
    }
    let mut fr = [0u8; 8];
    src.read_exact(&mut fr)?;
    let frame_rate = f64::from_le_bytes(fr);
    let mut vl = [0u8; 2];
    src.read_exact(&mut vl)?;
    let mut vocab = vec![0u8; u16::from_le_bytes(vl) as usize];
    src.read_exact(&mut vocab)?;
    let vocab_id = String::from_utf8(vocab).map_err(|_| PrlError::Utf8)?;

    // Grow the buffer as bytes arrive so a lying header cannot force a huge allocation.
    let width = if binary { 1 } else { 4 };
    let mut raw = Vec::new();
    let got = src.by_ref().take((cells * width) as u64).read_to_end(&mut raw)?;
    if got != cells * width {
        return Err(PrlError::Truncated);
    }
    let data: Vec<f32> = if binary {
        raw.iter()
            .map(|&b| match b {
                0 => Ok(0.0),
                1 => Ok(1.0),
                other => Err(RollError::ValueOutOfRange { index: 0, value: other as f32 }),
            })
            .collect::<Result<_, _>>()?
    } else {
        raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect()
    };
    let (f, t, m) = (f as usize, t as usize, m as usize);
    Ok(match kind {
        PrlKind::Pianoroll => AnyRoll::Pianoroll(Pianoroll::new(data, f, t, m, frame_rate, vocab_id)?),
        PrlKind::Pitch => AnyRoll::Pitch(PitchRoll::new(data, f, t, frame_rate)?),
        PrlKind::Instrument => AnyRoll::Instrument(InstrumentRoll::new(data, m, t, frame_rate, vocab_id)?),
    })
}
