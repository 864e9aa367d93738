//! Standard MIDI File (format 0 and 1) reader producing timed note events.

use std::collections::{HashMap, VecDeque};

use crate::error::{Error, Result};

/// Lowest and highest MIDI pitch on an 88-key keyboard.
pub const PITCH_MIN: u8 = 21;
pub const PITCH_MAX: u8 = 108;

const DEFAULT_TEMPO: u32 = 500_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoteEvent {
    pub onset_seconds: f64,
    pub offset_seconds: f64,
    pub pitch: u8,
    pub velocity: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Division {
    TicksPerQuarter(u16),
    /// Frames per second and ticks per frame.
    Smpte { fps: u8, ticks_per_frame: u8 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedMidi {
    pub format: u16,
    pub tracks: u16,
    pub division: Division,
    /// Sorted by onset, then pitch.
    pub events: Vec<NoteEvent>,
    /// Notes outside 21..=108.
    pub dropped_out_of_range: usize,
    /// Notes whose on and off fell on the same tick.
    pub dropped_zero_length: usize,
    /// Note-ons never released, closed at the end of their track.
    pub dangling: usize,
}

impl ParsedMidi {
    pub fn has_warnings(&self) -> bool {
        self.dangling > 0
    }

    pub fn duration_seconds(&self) -> f64 {
        self.events.iter().map(|e| e.offset_seconds).fold(0.0, f64::max)
    }
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    end: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.end {
            return Err(parse_err(self.pos, format!("unexpected end of data reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32> {
        let start = self.pos;
        let mut v = 0u32;
        for _ in 0..4 {
            let b = self.u8("variable-length quantity")?;
            v = (v << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Ok(v);
            }
        }
        Err(parse_err(start, "variable-length quantity longer than 4 bytes"))
    }
}

#[derive(Debug, Clone, Copy)]
struct RawNote {
    on_tick: u64,
    off_tick: u64,
    pitch: u8,
    velocity: u8,
}

struct TrackData {
    notes: Vec<RawNote>,
    tempos: Vec<(u64, u32)>,
    dangling: usize,
}

fn parse_track(r: &mut Reader<'_>) -> Result<TrackData> {
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    let mut open: HashMap<(u8, u8), VecDeque<(u64, u8)>> = HashMap::new();
    let mut notes = Vec::new();
    let mut tempos = Vec::new();

    while r.pos < r.end {
        tick += u64::from(r.vlq()?);
        let at = r.pos;
        let first = r.u8("event status")?;
        match first {
            0xff => {
                let kind = r.u8("meta type")?;
                let len = r.vlq()? as usize;
                let data = r.take(len, "meta payload")?;
                match kind {
                    0x51 => {
                        if len != 3 {
                            return Err(parse_err(at, format!("tempo meta event of length {len}")));
                        }
                        let us = u32::from_be_bytes([0, data[0], data[1], data[2]]);
                        if us == 0 {
                            return Err(parse_err(at, "zero tempo"));
                        }
                        tempos.push((tick, us));
                    }
                    0x2f => break,
                    _ => {}
                }
                running = None;
            }
            0xf0 | 0xf7 => {
                let len = r.vlq()? as usize;
                r.take(len, "sysex payload")?;
                running = None;
            }
            0xf1..=0xfe => {
                return Err(parse_err(at, format!("system message 0x{first:02x} inside a track")));
            }
            _ => {
                let (status, d1) = if first & 0x80 != 0 {
                    running = Some(first);
                    (first, r.u8("data byte")?)
                } else {
                    let s = running.ok_or_else(|| parse_err(at, "data byte without running status"))?;
                    (s, first)
                };
                let kind = status & 0xf0;
                let channel = status & 0x0f;
                let d2 = match kind {
                    0xc0 | 0xd0 => 0,
                    _ => r.u8("data byte")?,
                };
                if d1 & 0x80 != 0 || d2 & 0x80 != 0 {
                    return Err(parse_err(at, "data byte with high bit set"));
                }
                let on = kind == 0x90 && d2 > 0;
                let off = kind == 0x80 || (kind == 0x90 && d2 == 0);
                if on {
                    open.entry((channel, d1)).or_default().push_back((tick, d2));
                } else if off {
                    if let Some((on_tick, velocity)) = open.get_mut(&(channel, d1)).and_then(VecDeque::pop_front) {
                        notes.push(RawNote {
                            on_tick,
                            off_tick: tick,
                            pitch: d1,
                            velocity,
                        });
                    }
                }
            }
        }
    }

    let mut dangling = 0;
    let mut leftovers: Vec<_> = open.into_iter().collect();
    leftovers.sort_by_key(|(key, _)| *key);
    for ((_, pitch), queue) in leftovers {
        for (on_tick, velocity) in queue {
            dangling += 1;
            notes.push(RawNote {
                on_tick,
                off_tick: tick,
                pitch,
                velocity,
            });
        }
    }
    Ok(TrackData {
        notes,
        tempos,
        dangling,
    })
}

/// Tick to seconds conversion under a piecewise-constant tempo map.
struct TempoMap {
    /// (tick, seconds at that tick, seconds per tick from there on)
    segments: Vec<(u64, f64, f64)>,
}

impl TempoMap {
    fn new(division: Division, mut tempos: Vec<(u64, u32)>) -> Self {
        match division {
            Division::Smpte { fps, ticks_per_frame } => {
                let rate = if fps == 29 { 29.97 } else { f64::from(fps) };
                Self {
                    segments: vec![(0, 0.0, 1.0 / (rate * f64::from(ticks_per_frame)))],
                }
            }
            Division::TicksPerQuarter(tpq) => {
                let per_tick = |us: u32| f64::from(us) * 1e-6 / f64::from(tpq);
                tempos.sort_by_key(|&(t, _)| t);
                let mut segments = vec![(0u64, 0.0, per_tick(DEFAULT_TEMPO))];
                for (tick, us) in tempos {
                    let &(t0, s0, spt) = segments.last().expect("non-empty");
                    let seconds = s0 + (tick - t0) as f64 * spt;
                    if tick == t0 {
                        segments.pop();
                    }
                    segments.push((tick, seconds, per_tick(us)));
                }
                Self { segments }
            }
        }
    }

    fn seconds(&self, tick: u64) -> f64 {
        let i = self.segments.partition_point(|&(t, _, _)| t <= tick) - 1;
        let (t0, s0, spt) = self.segments[i];
        s0 + (tick - t0) as f64 * spt
    }
}

pub fn parse_midi_file(bytes: &[u8]) -> Result<ParsedMidi> {
    let mut r = Reader {
        bytes,
        pos: 0,
        end: bytes.len(),
    };
    if bytes.len() < 4 || &bytes[..4] != b"MThd" {
        return Err(parse_err(0, "missing MThd header chunk"));
    }
    r.pos = 4;
    let header_len = r.u32("header length")? as usize;
    if header_len < 6 {
        return Err(parse_err(4, format!("header length {header_len} is shorter than 6")));
    }
    let format_at = r.pos;
    let format = r.u16("format")?;
    let tracks = r.u16("track count")?;
    let div_at = r.pos;
    let raw_div = r.u16("division")?;
    r.take(header_len - 6, "header padding")?;
    if format > 1 {
        return Err(parse_err(format_at, format!("unsupported SMF format {format}")));
    }
    let division = if raw_div & 0x8000 != 0 {
        let fps = (-((raw_div >> 8) as u8 as i8)) as u8;
        let ticks_per_frame = (raw_div & 0xff) as u8;
        if ![24, 25, 29, 30].contains(&fps) || ticks_per_frame == 0 {
            return Err(parse_err(div_at, "invalid SMPTE division"));
        }
        Division::Smpte { fps, ticks_per_frame }
    } else {
        if raw_div == 0 {
            return Err(parse_err(div_at, "zero ticks per quarter note"));
        }
        Division::TicksPerQuarter(raw_div)
    };

    let mut notes = Vec::new();
    let mut tempos = Vec::new();
    let mut dangling = 0;
    let mut found = 0u16;
    while r.pos < bytes.len() && found < tracks {
        let at = r.pos;
        let id = r.take(4, "chunk id")?;
        let len = r.u32("chunk length")? as usize;
        if r.pos + len > bytes.len() {
            return Err(parse_err(at, format!("chunk length {len} runs past end of file")));
        }
        if id != b"MTrk" {
            r.pos += len;
            continue;
        }
        let mut tr = Reader {
            bytes,
            pos: r.pos,
            end: r.pos + len,
        };
        let data = parse_track(&mut tr)?;
        notes.extend(data.notes);
        tempos.extend(data.tempos);
        dangling += data.dangling;
        r.pos += len;
        found += 1;
    }
    if found < tracks {
        return Err(parse_err(r.pos, format!("header declares {tracks} tracks, found {found}")));
    }

    let map = TempoMap::new(division, tempos);
    let mut events = Vec::new();
    let mut dropped_out_of_range = 0;
    let mut dropped_zero_length = 0;
    for n in notes {
        if !(PITCH_MIN..=PITCH_MAX).contains(&n.pitch) {
            dropped_out_of_range += 1;
            continue;
        }
        let onset = map.seconds(n.on_tick);
        let offset = map.seconds(n.off_tick);
        if offset <= onset {
            dropped_zero_length += 1;
            continue;
        }
        events.push(NoteEvent {
            onset_seconds: onset,
            offset_seconds: offset,
            pitch: n.pitch,
            velocity: n.velocity,
        });
    }
    events.sort_by(|a, b| {
        a.onset_seconds
            .total_cmp(&b.onset_seconds)
            .then(a.pitch.cmp(&b.pitch))
    });
    Ok(ParsedMidi {
        format,
        tracks,
        division,
        events,
        dropped_out_of_range,
        dropped_zero_length,
        dangling,
    })
}

/// Minimal SMF writer, used to build fixtures.
pub mod write {
    /// One track event: delta ticks plus raw bytes (status included).
    pub type TrackEvent = (u32, Vec<u8>);

    pub fn vlq(mut v: u32) -> Vec<u8> {
        let mut out = vec![(v & 0x7f) as u8];
        v >>= 7;
        while v > 0 {
            out.push((v & 0x7f) as u8 | 0x80);
            v >>= 7;
        }
        out.reverse();
        out
    }

    pub fn tempo(us_per_quarter: u32) -> Vec<u8> {
        let b = us_per_quarter.to_be_bytes();
        vec![0xff, 0x51, 0x03, b[1], b[2], b[3]]
    }

    pub fn end_of_track() -> Vec<u8> {
        vec![0xff, 0x2f, 0x00]
    }

    pub fn smf(format: u16, division: u16, tracks: &[Vec<TrackEvent>]) -> Vec<u8> {
        let mut out = b"MThd".to_vec();
        out.extend_from_slice(&6u32.to_be_bytes());
        out.extend_from_slice(&format.to_be_bytes());
        out.extend_from_slice(&(tracks.len() as u16).to_be_bytes());
        out.extend_from_slice(&division.to_be_bytes());
        for track in tracks {
            let mut body = Vec::new();
            for (delta, bytes) in track {
                body.extend(vlq(*delta));
                body.extend_from_slice(bytes);
            }
            out.extend_from_slice(b"MTrk");
            out.extend_from_slice(&(body.len() as u32).to_be_bytes());
            out.extend(body);
        }
        out
    }
}
