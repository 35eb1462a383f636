//! Event file formats.
//!
//! * EVCL: little-endian binary. Magic `EVCL`, `u16` width, `u16` height,
//!   `u64` event count, then per event `u16 x, u16 y, i64 t, u8 p`.
//! * CSV: a `# W=<w> H=<h>` header line followed by `t,x,y,p` rows.
//! * N-MNIST: 5-byte records (`x`, `y`, polarity in bit 7 of byte 2, and a
//!   23-bit microsecond timestamp in the remaining bits), 34x34 sensor.
//! * Sample stores: EVCL records concatenated into one file, with a text
//!   sidecar `<file>.idx` mapping sample ids to byte offsets.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::event::{RawEvent, SensorGeometry};

pub const EVCL_MAGIC: [u8; 4] = *b"EVCL";
const EVCL_HEADER: usize = 4 + 2 + 2 + 8;
const EVCL_RECORD: usize = 2 + 2 + 8 + 1;

pub const NMNIST_SIZE: u16 = 34;

/// Serializes one EVCL record.
pub fn encode_evcl(events: &[RawEvent], geometry: SensorGeometry) -> Vec<u8> {
    let mut buf = Vec::with_capacity(EVCL_HEADER + events.len() * EVCL_RECORD);
    buf.extend_from_slice(&EVCL_MAGIC);
    buf.extend_from_slice(&geometry.width.to_le_bytes());
    buf.extend_from_slice(&geometry.height.to_le_bytes());
    buf.extend_from_slice(&(events.len() as u64).to_le_bytes());
    for e in events {
        buf.extend_from_slice(&e.x.to_le_bytes());
        buf.extend_from_slice(&e.y.to_le_bytes());
        buf.extend_from_slice(&e.t.to_le_bytes());
        buf.push(e.p);
    }
    buf
}

/// Decodes one EVCL record starting at `buf[0]`. Returns the events, the
/// sensor geometry and the number of bytes consumed. `base` is only used to
/// report absolute offsets in errors.
pub fn decode_evcl(buf: &[u8], base: u64) -> Result<(Vec<RawEvent>, SensorGeometry, usize)> {
    if buf.len() < EVCL_HEADER {
        return Err(Error::format(base, "truncated EVCL header"));
    }
    if buf[..4] != EVCL_MAGIC {
        return Err(Error::format(base, "bad EVCL magic"));
    }
    let width = u16::from_le_bytes([buf[4], buf[5]]);
    let height = u16::from_le_bytes([buf[6], buf[7]]);
    let geometry = SensorGeometry::new(width, height)
        .map_err(|e| Error::format(base + 4, e.to_string()))?;
    let count = u64::from_le_bytes(buf[8..16].try_into().expect("8 bytes"));
    let body = (count as usize)
        .checked_mul(EVCL_RECORD)
        .filter(|&b| b <= buf.len() - EVCL_HEADER)
        .ok_or_else(|| {
            Error::format(
                base + EVCL_HEADER as u64,
                format!("truncated EVCL body: {count} events declared"),
            )
        })?;
    let mut events = Vec::with_capacity(count as usize);
    for (i, rec) in buf[EVCL_HEADER..EVCL_HEADER + body]
        .chunks_exact(EVCL_RECORD)
        .enumerate()
    {
        let offset = base + (EVCL_HEADER + i * EVCL_RECORD) as u64;
        let ev = RawEvent {
            x: u16::from_le_bytes([rec[0], rec[1]]),
            y: u16::from_le_bytes([rec[2], rec[3]]),
            t: i64::from_le_bytes(rec[4..12].try_into().expect("8 bytes")),
            p: rec[12],
        };
        if !geometry.contains(&ev) || ev.p > 1 {
            return Err(Error::format(offset, format!("invalid event {ev:?}")));
        }
        events.push(ev);
    }
    Ok((events, geometry, EVCL_HEADER + body))
}

pub fn write_evcl(path: &Path, events: &[RawEvent], geometry: SensorGeometry) -> Result<()> {
    fs::write(path, encode_evcl(events, geometry))?;
    Ok(())
}

pub fn read_evcl(path: &Path) -> Result<(Vec<RawEvent>, SensorGeometry)> {
    let buf = fs::read(path)?;
    let (events, geometry, used) = decode_evcl(&buf, 0)?;
    if used != buf.len() {
        return Err(Error::format(used as u64, "trailing bytes after EVCL record"));
    }
    Ok((events, geometry))
}

/// Decodes an N-MNIST `.bin` file.
pub fn decode_nmnist(buf: &[u8]) -> Result<Vec<RawEvent>> {
    if buf.len() % 5 != 0 {
        return Err(Error::format(
            (buf.len() - buf.len() % 5) as u64,
            "truncated N-MNIST record",
        ));
    }
    let mut events = Vec::with_capacity(buf.len() / 5);
    let mut last_t = i64::MIN;
    for (i, rec) in buf.chunks_exact(5).enumerate() {
        let offset = (i * 5) as u64;
        let (x, y) = (u16::from(rec[0]), u16::from(rec[1]));
        if x >= NMNIST_SIZE || y >= NMNIST_SIZE {
            return Err(Error::format(
                offset,
                format!("coordinate ({x}, {y}) outside 34x34"),
            ));
        }
        let p = rec[2] >> 7;
        let t = (i64::from(rec[2] & 0x7f) << 16) | (i64::from(rec[3]) << 8) | i64::from(rec[4]);
        if t < last_t {
            return Err(Error::format(offset, format!("timestamp {t} goes backwards")));
        }
        last_t = t;
        events.push(RawEvent { x, y, t, p });
    }
    Ok(events)
}

pub fn read_nmnist_bin(path: &Path) -> Result<(Vec<RawEvent>, SensorGeometry)> {
    let buf = fs::read(path)?;
    let events = decode_nmnist(&buf)?;
    Ok((events, SensorGeometry::new(NMNIST_SIZE, NMNIST_SIZE)?))
}

pub fn write_csv(path: &Path, events: &[RawEvent], geometry: SensorGeometry) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# W={} H={}", geometry.width, geometry.height)?;
    for e in events {
        writeln!(w, "{},{},{},{}", e.t, e.x, e.y, e.p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<(Vec<RawEvent>, SensorGeometry)> {
    let reader = BufReader::new(File::open(path)?);
    let mut offset = 0u64;
    let mut geometry = None;
    let mut events = Vec::new();
    for line in reader.lines() {
        let line = line?;
        let here = offset;
        offset += line.len() as u64 + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(header) = trimmed.strip_prefix('#') {
            geometry = Some(parse_csv_header(header).map_err(|m| Error::format(here, m))?);
            continue;
        }
        let g = geometry.ok_or_else(|| Error::format(here, "missing `# W= H=` header"))?;
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(Error::format(here, format!("expected 4 fields, got {}", fields.len())));
        }
        let parse = |s: &str| -> Result<i64> {
            s.parse::<i64>()
                .map_err(|_| Error::format(here, format!("bad integer `{s}`")))
        };
        let (t, x, y, p) = (parse(fields[0])?, parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if !(0..i64::from(g.width)).contains(&x)
            || !(0..i64::from(g.height)).contains(&y)
            || !(0..=1).contains(&p)
            || t < 0
        {
            return Err(Error::format(here, format!("invalid event t={t} x={x} y={y} p={p}")));
        }
        events.push(RawEvent::new(x as u16, y as u16, t, p as u8));
    }
    let geometry = geometry.ok_or_else(|| Error::format(0, "missing `# W= H=` header"))?;
    Ok((events, geometry))
}

fn parse_csv_header(header: &str) -> std::result::Result<SensorGeometry, String> {
    let mut w = None;
    let mut h = None;
    for tok in header.split_whitespace() {
        if let Some(v) = tok.strip_prefix("W=") {
            w = v.parse::<u16>().ok();
        } else if let Some(v) = tok.strip_prefix("H=") {
            h = v.parse::<u16>().ok();
        }
    }
    match (w, h) {
        (Some(w), Some(h)) => SensorGeometry::new(w, h).map_err(|e| e.to_string()),
        _ => Err(format!("malformed header `#{header}`")),
    }
}

/// Reads events from any supported format, chosen by file extension:
/// `.csv`, `.bin` (N-MNIST), anything else as EVCL.
pub fn read_events(path: &Path) -> Result<(Vec<RawEvent>, SensorGeometry)> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => read_csv(path),
        Some("bin") => read_nmnist_bin(path),
        _ => read_evcl(path),
    }
}

fn index_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".idx");
    PathBuf::from(s)
}

/// Writes a sample store: every sample as an EVCL record in one file, plus
/// the `<path>.idx` sidecar listing `id offset` per line.
pub fn write_store(
    path: &Path,
    samples: &[(u64, Vec<RawEvent>)],
    geometry: SensorGeometry,
) -> Result<()> {
    let mut data = BufWriter::new(File::create(path)?);
    let mut index = BufWriter::new(File::create(index_path(path))?);
    let mut offset = 0u64;
    for (id, events) in samples {
        let rec = encode_evcl(events, geometry);
        data.write_all(&rec)?;
        writeln!(index, "{id} {offset}")?;
        offset += rec.len() as u64;
    }
    data.flush()?;
    index.flush()?;
    Ok(())
}

/// Reads every sample listed in the store's sidecar, in index order.
pub fn read_store(path: &Path) -> Result<Vec<(u64, Vec<RawEvent>, SensorGeometry)>> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;
    let index = fs::read_to_string(index_path(path))?;
    let mut out = Vec::new();
    for (line_no, line) in index.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let parsed = (
            it.next().and_then(|s| s.parse::<u64>().ok()),
            it.next().and_then(|s| s.parse::<u64>().ok()),
        );
        let (Some(id), Some(offset)) = parsed else {
            return Err(Error::format(
                line_no as u64,
                format!("malformed index line `{line}` in {}", index_path(path).display()),
            ));
        };
        if offset as usize > buf.len() {
            return Err(Error::format(offset, format!("sample {id} offset past end of store")));
        }
        let (events, geometry, _) = decode_evcl(&buf[offset as usize..], offset)?;
        out.push((id, events, geometry));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_events() -> Vec<RawEvent> {
        vec![
            RawEvent::new(1, 2, 10, 1),
            RawEvent::new(3, 0, 12, 0),
            RawEvent::new(33, 33, 1 << 40, 1),
        ]
    }

    #[test]
    fn evcl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.evcl");
        let g = SensorGeometry::new(34, 34).unwrap();
        write_evcl(&path, &sample_events(), g).unwrap();
        let (events, geometry) = read_evcl(&path).unwrap();
        assert_eq!(events, sample_events());
        assert_eq!(geometry, g);

        write_evcl(&path, &[], g).unwrap();
        assert!(read_evcl(&path).unwrap().0.is_empty());
    }

    #[test]
    fn evcl_layout_is_bit_exact() {
        let g = SensorGeometry::new(0x0102, 0x0304).unwrap();
        let bytes = encode_evcl(&[RawEvent::new(5, 6, 7, 1)], g);
        let expected: Vec<u8> = [
            &b"EVCL"[..],
            &[0x02, 0x01, 0x04, 0x03],
            &1u64.to_le_bytes(),
            &[5, 0, 6, 0],
            &7i64.to_le_bytes(),
            &[1],
        ]
        .concat();
        assert_eq!(bytes, expected);
    }

    #[test]
    fn evcl_errors() {
        let g = SensorGeometry::new(34, 34).unwrap();
        let mut bytes = encode_evcl(&sample_events(), g);
        bytes[0] = b'X';
        assert!(matches!(decode_evcl(&bytes, 0), Err(Error::Format { offset: 0, .. })));
        let bytes = encode_evcl(&sample_events(), g);
        assert!(matches!(
            decode_evcl(&bytes[..bytes.len() - 1], 0),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn nmnist_decoding() {
        let evs = decode_nmnist(&[0x05, 0x07, 0x80, 0x00, 0x0A]).unwrap();
        assert_eq!(evs, vec![RawEvent::new(5, 7, 10, 1)]);
        assert!(decode_nmnist(&[]).unwrap().is_empty());
        assert!(matches!(
            decode_nmnist(&[200, 0, 0, 0, 1]),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            decode_nmnist(&[1, 1, 0, 0, 1, 2]),
            Err(Error::Format { offset: 5, .. })
        ));
        assert!(decode_nmnist(&[1, 1, 0, 0, 9, 1, 1, 0, 0, 3]).is_err());
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        let g = SensorGeometry::new(34, 34).unwrap();
        write_csv(&path, &sample_events(), g).unwrap();
        assert_eq!(read_csv(&path).unwrap(), (sample_events(), g));
        fs::write(&path, "# W=4 H=4\n1,9,0,1\n").unwrap();
        assert!(matches!(read_csv(&path), Err(Error::Format { offset: 10, .. })));
        fs::write(&path, "1,0,0,1\n").unwrap();
        assert!(read_csv(&path).is_err());
    }

    #[test]
    fn store_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.evcl");
        let g = SensorGeometry::new(34, 34).unwrap();
        let samples = vec![(4, sample_events()), (9, vec![]), (2, sample_events()[..1].to_vec())];
        write_store(&path, &samples, g).unwrap();
        let back = read_store(&path).unwrap();
        assert_eq!(back.len(), 3);
        for ((id, evs), (id2, evs2, g2)) in samples.iter().zip(&back) {
            assert_eq!(id, id2);
            assert_eq!(evs, evs2);
            assert_eq!(*g2, g);
        }
    }
}
