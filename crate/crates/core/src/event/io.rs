//! Event files.
//!
//! Binary `EVST` layout, little-endian: magic, `u32` version, `u16` width,
//! `u16` height, `u64` count, then 14-byte records `u64 t, u16 x, u16 y,
//! i8 p, pad`. A text variant with one `t,x,y,p` line per event is also
//! accepted; it may start with a `# width=W height=H` line, otherwise the
//! sensor extent is taken from the largest coordinates.

use std::fs;
use std::path::Path;

use super::{Event, EventStream};
use crate::error::{Error, Result};

pub const EVST_MAGIC: &[u8; 4] = b"EVST";
pub const EVST_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 2 + 2 + 8;
const RECORD_LEN: usize = 14;

/// A decoded stream plus whether the file's events had to be re-sorted.
#[derive(Clone, Debug)]
pub struct LoadedEvents {
    pub stream: EventStream,
    pub resorted: bool,
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        what: "event file",
        offset: offset as u64,
        message: message.into(),
    }
}

pub fn encode_evst(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * stream.len());
    out.extend_from_slice(EVST_MAGIC);
    out.extend_from_slice(&EVST_VERSION.to_le_bytes());
    out.extend_from_slice(&stream.width().to_le_bytes());
    out.extend_from_slice(&stream.height().to_le_bytes());
    out.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    for e in stream.events() {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.p as u8);
        out.push(0);
    }
    out
}

pub fn decode_evst(buf: &[u8]) -> Result<LoadedEvents> {
    if buf.len() < HEADER_LEN {
        return Err(parse_err(buf.len(), "truncated header"));
    }
    if &buf[..4] != EVST_MAGIC {
        return Err(parse_err(0, "bad magic, expected EVST"));
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
    if version != EVST_VERSION {
        return Err(parse_err(4, format!("unsupported version {version}")));
    }
    let width = u16::from_le_bytes(buf[8..10].try_into().unwrap());
    let height = u16::from_le_bytes(buf[10..12].try_into().unwrap());
    if width == 0 || height == 0 {
        return Err(parse_err(8, "zero sensor extent"));
    }
    let count = u64::from_le_bytes(buf[12..20].try_into().unwrap());
    let body = buf.len() - HEADER_LEN;
    if (body / RECORD_LEN) as u64 != count || body % RECORD_LEN != 0 {
        let offset = HEADER_LEN + (body / RECORD_LEN) * RECORD_LEN;
        return Err(parse_err(
            offset,
            format!("truncated record: header says {count} events, body holds {body} bytes"),
        ));
    }
    let mut events = Vec::with_capacity(count as usize);
    for (i, rec) in buf[HEADER_LEN..].chunks_exact(RECORD_LEN).enumerate() {
        let offset = HEADER_LEN + i * RECORD_LEN;
        let t = u64::from_le_bytes(rec[..8].try_into().unwrap());
        let x = u16::from_le_bytes(rec[8..10].try_into().unwrap());
        let y = u16::from_le_bytes(rec[10..12].try_into().unwrap());
        let p = rec[12] as i8;
        if x >= width || y >= height {
            return Err(parse_err(
                offset + 8,
                format!("coordinate ({x}, {y}) outside {width}x{height} sensor"),
            ));
        }
        if p != 1 && p != -1 {
            return Err(parse_err(offset + 12, format!("polarity {p} is not +1 or -1")));
        }
        events.push(Event { t, x, y, p });
    }
    let (stream, resorted) = EventStream::from_unsorted(width, height, events)?;
    Ok(LoadedEvents { stream, resorted })
}

pub fn decode_csv(text: &str) -> Result<LoadedEvents> {
    let mut extent: Option<(u16, u16)> = None;
    let mut events = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len();
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(comment) = trimmed.strip_prefix('#') {
            if let Some(dims) = parse_extent(comment) {
                extent = Some(dims);
            }
            continue;
        }
        if trimmed.eq_ignore_ascii_case("t,x,y,p") {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(parse_err(start, format!("expected 4 fields t,x,y,p, found {}", fields.len())));
        }
        let num = |i: usize, what: &str| -> Result<i64> {
            fields[i]
                .parse::<i64>()
                .map_err(|_| parse_err(start, format!("invalid {what} `{}`", fields[i])))
        };
        let (t, x, y, p) = (num(0, "time")?, num(1, "x")?, num(2, "y")?, num(3, "polarity")?);
        if t < 0 {
            return Err(parse_err(start, "negative timestamp"));
        }
        if !(0..=u16::MAX as i64).contains(&x) || !(0..=u16::MAX as i64).contains(&y) {
            return Err(parse_err(start, format!("coordinate ({x}, {y}) out of range")));
        }
        if p != 1 && p != -1 {
            return Err(parse_err(start, format!("polarity {p} is not +1 or -1")));
        }
        if let Some((w, h)) = extent {
            if x >= w as i64 || y >= h as i64 {
                return Err(parse_err(start, format!("coordinate ({x}, {y}) outside {w}x{h} sensor")));
            }
        }
        events.push((start, Event::new(t as u64, x as u16, y as u16, p as i8)));
    }
    let (w, h) = match extent {
        Some(e) => e,
        None => {
            let w = events.iter().map(|(_, e)| e.x).max().map_or(1, |m| m.saturating_add(1));
            let h = events.iter().map(|(_, e)| e.y).max().map_or(1, |m| m.saturating_add(1));
            (w, h)
        }
    };
    let (stream, resorted) = EventStream::from_unsorted(w, h, events.into_iter().map(|(_, e)| e).collect())?;
    Ok(LoadedEvents { stream, resorted })
}

fn parse_extent(comment: &str) -> Option<(u16, u16)> {
    let mut w = None;
    let mut h = None;
    for tok in comment.split_whitespace() {
        if let Some(v) = tok.strip_prefix("width=") {
            w = v.parse().ok();
        } else if let Some(v) = tok.strip_prefix("height=") {
            h = v.parse().ok();
        }
    }
    Some((w?, h?)).filter(|&(w, h)| w > 0 && h > 0)
}

/// Reads `EVST` or, when the magic is absent, the CSV variant.
pub fn read_events(path: &Path) -> Result<LoadedEvents> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let loaded = if buf.starts_with(EVST_MAGIC) {
        decode_evst(&buf)?
    } else {
        let text = std::str::from_utf8(&buf)
            .map_err(|e| parse_err(e.valid_up_to(), "neither EVST nor UTF-8 text"))?;
        decode_csv(text)?
    };
    if loaded.resorted {
        log::warn!("{}: events were not time-ordered and have been re-sorted", path.display());
    }
    Ok(loaded)
}

/// Writes `EVST`, or CSV when the extension is `.csv`.
pub fn write_events(stream: &EventStream, path: &Path) -> Result<()> {
    let is_csv = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let bytes = if is_csv {
        let mut s = format!("# width={} height={}\nt,x,y,p\n", stream.width(), stream.height());
        for e in stream.events() {
            s.push_str(&format!("{},{},{},{}\n", e.t, e.x, e.y, e.p));
        }
        s.into_bytes()
    } else {
        encode_evst(stream)
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_stream() -> impl Strategy<Value = EventStream> {
        (1u16..64, 1u16..64).prop_flat_map(|(w, h)| {
            prop::collection::vec(
                (0u64..u64::MAX / 2, 0..w, 0..h, prop::bool::ANY),
                0..200,
            )
            .prop_map(move |raw| {
                let mut ev: Vec<Event> = raw
                    .into_iter()
                    .map(|(t, x, y, pos)| Event::new(t, x, y, if pos { 1 } else { -1 }))
                    .collect();
                ev.sort_by_key(|e| e.t);
                EventStream::new(w, h, ev).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn evst_roundtrip(stream in arb_stream()) {
            let back = decode_evst(&encode_evst(&stream)).unwrap();
            prop_assert!(!back.resorted);
            prop_assert_eq!(back.stream, stream);
        }
    }

    #[test]
    fn thousand_random_events_roundtrip_through_file() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut ev: Vec<Event> = (0..1000)
            .map(|_| Event::new(rng.random_range(0..10_000_000), rng.random_range(0..346), rng.random_range(0..260), if rng.random_bool(0.5) { 1 } else { -1 }))
            .collect();
        ev.sort_by_key(|e| e.t);
        let stream = EventStream::new(346, 260, ev).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.evst", "a.csv"] {
            let path = dir.path().join(name);
            write_events(&stream, &path).unwrap();
            assert_eq!(read_events(&path).unwrap().stream, stream);
        }
    }

    #[test]
    fn empty_body_is_empty_stream() {
        let s = EventStream::empty(8, 6);
        let bytes = encode_evst(&s);
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(decode_evst(&bytes).unwrap().stream, s);
    }

    #[test]
    fn out_of_bounds_record_names_offset() {
        let s = EventStream::new(8, 6, vec![Event::new(1, 0, 0, 1), Event::new(2, 7, 5, -1)]).unwrap();
        let mut bytes = encode_evst(&s);
        // second record's x := width
        let x_at = HEADER_LEN + RECORD_LEN + 8;
        bytes[x_at..x_at + 2].copy_from_slice(&8u16.to_le_bytes());
        match decode_evst(&bytes).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, x_at as u64),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn bad_polarity_and_truncation() {
        let s = EventStream::new(8, 6, vec![Event::new(1, 0, 0, 1)]).unwrap();
        let mut bytes = encode_evst(&s);
        bytes[HEADER_LEN + 12] = 0;
        assert!(matches!(decode_evst(&bytes), Err(Error::Parse { offset, .. }) if offset == (HEADER_LEN + 12) as u64));
        let bytes = encode_evst(&s);
        assert!(matches!(decode_evst(&bytes[..bytes.len() - 3]), Err(Error::Parse { offset, .. }) if offset == HEADER_LEN as u64));
    }

    #[test]
    fn unsorted_input_is_flagged() {
        let s = EventStream::new(8, 6, vec![Event::new(1, 0, 0, 1), Event::new(2, 1, 0, 1)]).unwrap();
        let mut bytes = encode_evst(&s);
        bytes[HEADER_LEN..HEADER_LEN + 8].copy_from_slice(&5u64.to_le_bytes());
        let loaded = decode_evst(&bytes).unwrap();
        assert!(loaded.resorted);
        assert_eq!(loaded.stream.events()[0].t, 2);
    }

    #[test]
    fn csv_variants() {
        let loaded = decode_csv("t,x,y,p\n10,3,1,1\n5,0,2,-1\n").unwrap();
        assert!(loaded.resorted);
        assert_eq!((loaded.stream.width(), loaded.stream.height()), (4, 3));
        let loaded = decode_csv("# width=10 height=10\n1,9,9,1\n").unwrap();
        assert_eq!(loaded.stream.width(), 10);
        let err = decode_csv("# width=4 height=4\n1,0,0,1\n2,4,0,1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 27, .. }), "{err}");
        assert!(decode_csv("1,0,0,2\n").is_err());
    }
}
