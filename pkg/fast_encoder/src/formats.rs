//! EVT1 and VGF1 binary formats (little endian).
//!
//! EVT1: magic "EVT1" | u32 version=1 | u32 width | u32 height | u64 count |
//! count * { u16 x | u16 y | i16 p | u16 reserved | u64 t_us } (16 bytes).
//!
//! VGF1: magic "VGF1" | u32 version=1 | u32 bins | u32 height | u32 width |
//! u8 normalized | 3 pad bytes | bins*height*width f32 values, bin-major,
//! then row, then column.

use std::fmt;
use std::io::{self, Read, Write};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub p: i16,
    pub t: u64,
}

#[derive(Debug)]
pub enum FormatError {
    Io(io::Error),
    /// message plus the byte offset of the failure
    Malformed(String, usize),
}

impl fmt::Display for FormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FormatError::Io(e) => write!(f, "io error: {e}"),
            FormatError::Malformed(msg, off) => write!(f, "{msg} (byte offset {off})"),
        }
    }
}

impl std::error::Error for FormatError {}

impl From<io::Error> for FormatError {
    fn from(e: io::Error) -> Self {
        FormatError::Io(e)
    }
}

pub const EVT1_HEADER_LEN: usize = 24;
pub const EVENT_RECORD_LEN: usize = 16;
pub const VGF1_HEADER_LEN: usize = 24;

pub struct Evt1 {
    pub width: u32,
    pub height: u32,
    pub events: Vec<Event>,
}

pub fn read_evt1<R: Read>(mut reader: R) -> Result<Evt1, FormatError> {
    let mut raw = Vec::new();
    reader.read_to_end(&mut raw)?;
    if raw.len() < EVT1_HEADER_LEN {
        return Err(FormatError::Malformed("truncated EVT1 header".into(), raw.len()));
    }
    if &raw[0..4] != b"EVT1" {
        return Err(FormatError::Malformed(format!("bad magic {:?}", &raw[0..4]), 0));
    }
    let version = u32::from_le_bytes(raw[4..8].try_into().unwrap());
    if version != 1 {
        return Err(FormatError::Malformed(format!("unsupported EVT1 version {version}"), 4));
    }
    let width = u32::from_le_bytes(raw[8..12].try_into().unwrap());
    let height = u32::from_le_bytes(raw[12..16].try_into().unwrap());
    let count = u64::from_le_bytes(raw[16..24].try_into().unwrap()) as usize;
    let need = EVT1_HEADER_LEN + count * EVENT_RECORD_LEN;
    if raw.len() < need {
        return Err(FormatError::Malformed(
            format!("truncated EVT1 payload: need {need} bytes, have {}", raw.len()),
            raw.len(),
        ));
    }
    let mut events = Vec::with_capacity(count);
    let mut prev_t = 0u64;
    for k in 0..count {
        let off = EVT1_HEADER_LEN + k * EVENT_RECORD_LEN;
        let rec = &raw[off..off + EVENT_RECORD_LEN];
        let ev = Event {
            x: u16::from_le_bytes(rec[0..2].try_into().unwrap()),
            y: u16::from_le_bytes(rec[2..4].try_into().unwrap()),
            p: i16::from_le_bytes(rec[4..6].try_into().unwrap()),
            t: u64::from_le_bytes(rec[8..16].try_into().unwrap()),
        };
        if ev.p != 1 && ev.p != -1 {
            return Err(FormatError::Malformed(format!("bad polarity at record {k}"), off));
        }
        if k > 0 && ev.t < prev_t {
            return Err(FormatError::Malformed(format!("nonmonotone timestamp at record {k}"), off));
        }
        prev_t = ev.t;
        events.push(ev);
    }
    Ok(Evt1 { width, height, events })
}

pub fn write_evt1<W: Write>(mut w: W, width: u32, height: u32, events: &[Event]) -> io::Result<()> {
    w.write_all(b"EVT1")?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&width.to_le_bytes())?;
    w.write_all(&height.to_le_bytes())?;
    w.write_all(&(events.len() as u64).to_le_bytes())?;
    for ev in events {
        w.write_all(&ev.x.to_le_bytes())?;
        w.write_all(&ev.y.to_le_bytes())?;
        w.write_all(&ev.p.to_le_bytes())?;
        w.write_all(&0u16.to_le_bytes())?;
        w.write_all(&ev.t.to_le_bytes())?;
    }
    Ok(())
}

#[derive(Debug)]
pub struct VoxelGrid {
    pub bins: u32,
    pub height: u32,
    pub width: u32,
    pub normalized: bool,
    pub values: Vec<f32>, // bin-major, then row, then column
}

pub fn write_vgf1<W: Write>(mut w: W, grid: &VoxelGrid) -> io::Result<()> {
    w.write_all(b"VGF1")?;
    w.write_all(&1u32.to_le_bytes())?;
    w.write_all(&grid.bins.to_le_bytes())?;
    w.write_all(&grid.height.to_le_bytes())?;
    w.write_all(&grid.width.to_le_bytes())?;
    w.write_all(&[grid.normalized as u8, 0, 0, 0])?;
    for v in &grid.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_vgf1<R: Read>(mut reader: R) -> Result<VoxelGrid, FormatError> {
    let mut raw = Vec::new();
    reader.read_to_end(&mut raw)?;
    if raw.len() < VGF1_HEADER_LEN {
        return Err(FormatError::Malformed("truncated VGF1 header".into(), raw.len()));
    }
    if &raw[0..4] != b"VGF1" {
        return Err(FormatError::Malformed(format!("bad magic {:?}", &raw[0..4]), 0));
    }
    let version = u32::from_le_bytes(raw[4..8].try_into().unwrap());
    if version != 1 {
        return Err(FormatError::Malformed(format!("unsupported VGF1 version {version}"), 4));
    }
    let bins = u32::from_le_bytes(raw[8..12].try_into().unwrap());
    let height = u32::from_le_bytes(raw[12..16].try_into().unwrap());
    let width = u32::from_le_bytes(raw[16..20].try_into().unwrap());
    let normalized = raw[20] != 0;
    let n = (bins as usize) * (height as usize) * (width as usize);
    let need = VGF1_HEADER_LEN + 4 * n;
    if raw.len() != need {
        return Err(FormatError::Malformed(
            format!("VGF1 payload length {} does not match {}x{}x{} f32", raw.len() - VGF1_HEADER_LEN, bins, height, width),
            raw.len().min(need),
        ));
    }
    let values = raw[VGF1_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(VoxelGrid { bins, height, width, normalized, values })
}
