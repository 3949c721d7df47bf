//! Minimal Standard MIDI File reader and writer (formats 0 and 1).

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SmfError {
    #[error("missing or malformed MThd header chunk")]
    BadHeader,
    #[error("SMF format {0} is not supported")]
    UnsupportedFormat(u16),
    #[error("division of zero ticks per quarter note")]
    ZeroDivision,
    #[error("unexpected end of data in {0}")]
    Truncated(&'static str),
    #[error("running status without a previous status byte at offset {0}")]
    RunningStatus(usize),
    #[error("variable-length quantity longer than four bytes")]
    VarLen,
}

/// Tick resolution of a file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Timing {
    /// Ticks per quarter note; tempo events apply.
    Metrical(u16),
    /// Absolute ticks per second (SMPTE frames x subframes); tempo events are ignored.
    Timecode(f64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrackEvent {
    NoteOn {
        channel: u8,
        key: u8,
        velocity: u8,
    },
    NoteOff {
        channel: u8,
        key: u8,
        velocity: u8,
    },
    ProgramChange {
        channel: u8,
        program: u8,
    },
    /// Microseconds per quarter note.
    Tempo(u32),
    TrackName(String),
    EndOfTrack,
    Other,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Smf {
    pub format: u16,
    pub timing: Timing,
    /// Per track: `(absolute tick, event)` in file order.
    pub tracks: Vec<Vec<(u64, TrackEvent)>>,
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], SmfError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or(SmfError::Truncated(what))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn byte(&mut self, what: &'static str) -> Result<u8, SmfError> {
        Ok(self.take(1, what)?[0])
    }

    fn varlen(&mut self) -> Result<u32, SmfError> {
        let mut v = 0u32;
        for _ in 0..4 {
            let b = self.byte("variable-length quantity")?;
            v = (v << 7) | (b & 0x7f) as u32;
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(SmfError::VarLen)
    }

    fn done(&self) -> bool {
        self.pos >= self.data.len()
    }
}

fn parse_track(data: &[u8]) -> Result<Vec<(u64, TrackEvent)>, SmfError> {
    let mut cur = Cursor { data, pos: 0 };
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    let mut out = Vec::new();
    while !cur.done() {
        tick += cur.varlen()? as u64;
        let first = cur.byte("event")?;
        let event = match first {
            0xff => {
                running = None;
                let kind = cur.byte("meta type")?;
                let len = cur.varlen()? as usize;
                let body = cur.take(len, "meta event")?;
                match kind {
                    0x51 if len == 3 => TrackEvent::Tempo(u32::from_be_bytes([0, body[0], body[1], body[2]])),
                    0x03 => TrackEvent::TrackName(String::from_utf8_lossy(body).into_owned()),
                    0x2f => TrackEvent::EndOfTrack,
                    _ => TrackEvent::Other,
                }
            }
            0xf0 | 0xf7 => {
                running = None;
                let len = cur.varlen()? as usize;
                cur.take(len, "sysex")?;
                TrackEvent::Other
            }
            _ => {
                let (status, d1) = if first & 0x80 != 0 {
                    running = Some(first);
                    (first, None)
                } else {
                    (running.ok_or(SmfError::RunningStatus(cur.pos - 1))?, Some(first))
                };
                let mut data1 = || -> Result<u8, SmfError> {
                    match d1 {
                        Some(b) => Ok(b),
                        None => cur.byte("channel message"),
                    }
                };
                let channel = status & 0x0f;
                match status & 0xf0 {
                    0x80 => {
                        let key = data1()?;
                        let velocity = cur.byte("note off")?;
                        TrackEvent::NoteOff { channel, key, velocity }
                    }
                    0x90 => {
                        let key = data1()?;
                        let velocity = cur.byte("note on")?;
                        if velocity == 0 {
                            TrackEvent::NoteOff { channel, key, velocity: 0 }
                        } else {
                            TrackEvent::NoteOn { channel, key, velocity }
                        }
                    }
                    0xa0 | 0xb0 | 0xe0 => {
                        data1()?;
                        cur.byte("channel message")?;
                        TrackEvent::Other
                    }
                    0xc0 => TrackEvent::ProgramChange { channel, program: data1()? & 0x7f },
                    0xd0 => {
                        data1()?;
                        TrackEvent::Other
                    }
                    // system common/realtime bytes inside a track: skip the byte
                    _ => TrackEvent::Other,
                }
            }
        };
        let end = event == TrackEvent::EndOfTrack;
        out.push((tick, event));
        if end {
            break;
        }
    }
    Ok(out)
}

impl Smf {
    pub fn parse(bytes: &[u8]) -> Result<Smf, SmfError> {
        let mut cur = Cursor { data: bytes, pos: 0 };
        let id = cur.take(4, "header").map_err(|_| SmfError::BadHeader)?;
        if id != b"MThd" {
            return Err(SmfError::BadHeader);
        }
        let len = u32::from_be_bytes(cur.take(4, "header").map_err(|_| SmfError::BadHeader)?.try_into().unwrap());
        if len < 6 {
            return Err(SmfError::BadHeader);
        }
        let hdr = cur.take(len as usize, "header").map_err(|_| SmfError::BadHeader)?;
        let format = u16::from_be_bytes([hdr[0], hdr[1]]);
        let ntracks = u16::from_be_bytes([hdr[2], hdr[3]]);
        let division = u16::from_be_bytes([hdr[4], hdr[5]]);
        match format {
            0 | 1 => {}
            2 => return Err(SmfError::UnsupportedFormat(2)),
            _ => return Err(SmfError::BadHeader),
        }
        let timing = if division & 0x8000 == 0 {
            if division == 0 {
                return Err(SmfError::ZeroDivision);
            }
            Timing::Metrical(division)
        } else {
            let fps = match (division >> 8) as u8 as i8 {
                -24 => 24.0,
                -25 => 25.0,
                -29 => 29.97,
                -30 => 30.0,
                _ => return Err(SmfError::BadHeader),
            };
            let sub = (division & 0xff) as f64;
            if sub == 0.0 {
                return Err(SmfError::ZeroDivision);
            }
            Timing::Timecode(fps * sub)
        };
        let mut tracks = Vec::with_capacity(ntracks as usize);
        while tracks.len() < ntracks as usize && !cur.done() {
            let id = cur.take(4, "chunk id")?;
            let len = u32::from_be_bytes(cur.take(4, "chunk length")?.try_into().unwrap()) as usize;
            let body = cur.take(len, "track chunk")?;
            if id == b"MTrk" {
                tracks.push(parse_track(body)?);
            }
        }
        if tracks.len() < ntracks as usize {
            return Err(SmfError::Truncated("track list"));
        }
        Ok(Smf { format, timing, tracks })
    }

    /// Serializes to bytes. Events within a track are stably sorted by tick;
    /// an end-of-track meta event is appended if missing.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"MThd");
        out.extend_from_slice(&6u32.to_be_bytes());
        out.extend_from_slice(&self.format.to_be_bytes());
        out.extend_from_slice(&(self.tracks.len() as u16).to_be_bytes());
        let division = match self.timing {
            Timing::Metrical(tpq) => tpq,
            Timing::Timecode(_) => panic!("writing timecode files is not supported"),
        };
        out.extend_from_slice(&division.to_be_bytes());
        for track in &self.tracks {
            let mut events: Vec<&(u64, TrackEvent)> =
                track.iter().filter(|(_, e)| *e != TrackEvent::EndOfTrack && *e != TrackEvent::Other).collect();
            events.sort_by_key(|(t, _)| *t);
            let end_tick = track.iter().map(|(t, _)| *t).max().unwrap_or(0);
            let mut body = Vec::new();
            let mut last = 0u64;
            for (tick, ev) in events.into_iter().chain(std::iter::once(&(end_tick, TrackEvent::EndOfTrack))) {
                write_varlen(&mut body, (tick - last) as u32);
                last = *tick;
                match ev {
                    TrackEvent::NoteOn { channel, key, velocity } => body.extend_from_slice(&[0x90 | channel, *key, *velocity]),
                    TrackEvent::NoteOff { channel, key, velocity } => body.extend_from_slice(&[0x80 | channel, *key, *velocity]),
                    TrackEvent::ProgramChange { channel, program } => body.extend_from_slice(&[0xc0 | channel, *program]),
                    TrackEvent::Tempo(us) => {
                        let b = us.to_be_bytes();
                        body.extend_from_slice(&[0xff, 0x51, 0x03, b[1], b[2], b[3]]);
                    }
                    TrackEvent::TrackName(name) => {
                        body.extend_from_slice(&[0xff, 0x03]);
                        write_varlen(&mut body, name.len() as u32);
                        body.extend_from_slice(name.as_bytes());
                    }
                    TrackEvent::EndOfTrack => body.extend_from_slice(&[0xff, 0x2f, 0x00]),
                    TrackEvent::Other => unreachable!(),
                }
            }
            out.extend_from_slice(b"MTrk");
            out.extend_from_slice(&(body.len() as u32).to_be_bytes());
            out.extend_from_slice(&body);
        }
        out
    }
}

fn write_varlen(out: &mut Vec<u8>, mut v: u32) {
    let mut buf = [0u8; 5];
    let mut i = buf.len() - 1;
    buf[i] = (v & 0x7f) as u8;
    v >>= 7;
    while v > 0 {
        i -= 1;
        buf[i] = 0x80 | (v & 0x7f) as u8;
        v >>= 7;
    }
    out.extend_from_slice(&buf[i..]);
}
