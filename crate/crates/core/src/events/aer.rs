//! Little-endian event file:
//!
//! ```text
//! "AER1" | width u16 | height u16 | count u64
//! count x { x u16 | y u16 | t u64 (us) | p i8 (+1/-1) | pad u8 = 0 }
//! ```

use std::fs;
use std::path::Path;

use super::{Event, EventStream, Polarity};
use crate::error::{Error, Result};

pub const AER_MAGIC: &[u8; 4] = b"AER1";
const HEADER_BYTES: usize = 4 + 2 + 2 + 8;
pub const RECORD_BYTES: usize = 2 + 2 + 8 + 1 + 1;

pub fn encode_events(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_BYTES + RECORD_BYTES * stream.len());
    out.extend_from_slice(AER_MAGIC);
    out.extend_from_slice(&stream.width().to_le_bytes());
    out.extend_from_slice(&stream.height().to_le_bytes());
    out.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    for e in stream.events() {
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.extend_from_slice(&e.t.to_le_bytes());
        out.push(e.p.as_i8() as u8);
        out.push(0);
    }
    out
}

pub fn decode_events(bytes: &[u8]) -> Result<EventStream> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::format(format!("event file too short for header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != AER_MAGIC {
        return Err(Error::format(format!("bad magic {:?}, expected \"AER1\"", &bytes[..4])));
    }
    let width = u16::from_le_bytes([bytes[4], bytes[5]]);
    let height = u16::from_le_bytes([bytes[6], bytes[7]]);
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let body = &bytes[HEADER_BYTES..];
    let expected = (count as u128) * RECORD_BYTES as u128;
    if body.len() as u128 != expected {
        return Err(Error::format(format!(
            "header declares {count} records ({expected} bytes) but {} bytes follow",
            body.len()
        )));
    }
    let mut events = Vec::with_capacity(count as usize);
    for (i, rec) in body.chunks_exact(RECORD_BYTES).enumerate() {
        let index = i as u64;
        let x = u16::from_le_bytes([rec[0], rec[1]]);
        let y = u16::from_le_bytes([rec[2], rec[3]]);
        let t = u64::from_le_bytes(rec[4..12].try_into().expect("8 bytes"));
        let p = Polarity::from_i8(rec[12] as i8).ok_or_else(|| Error::Data {
            index,
            detail: format!("polarity byte {} is neither +1 nor -1", rec[12] as i8),
        })?;
        if rec[13] != 0 {
            return Err(Error::Data { index, detail: "nonzero padding byte".into() });
        }
        if let Some(prev) = events.last() {
            let prev: &Event = prev;
            if t < prev.t {
                return Err(Error::Data { index, detail: format!("timestamp {t} precedes previous {}", prev.t) });
            }
        }
        events.push(Event { x, y, t, p });
    }
    EventStream::new(width, height, events)
}

pub fn read_event_file(path: impl AsRef<Path>) -> Result<EventStream> {
    decode_events(&fs::read(path)?)
}

pub fn write_event_file(path: impl AsRef<Path>, stream: &EventStream) -> Result<()> {
    fs::write(path, encode_events(stream))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Vec<u8> {
        // 3 records on a 6x5 sensor, written out byte by byte.
        let mut b = b"AER1".to_vec();
        b.extend_from_slice(&[6, 0, 5, 0]);
        b.extend_from_slice(&[3, 0, 0, 0, 0, 0, 0, 0]);
        b.extend_from_slice(&[1, 0, 2, 0, 10, 0, 0, 0, 0, 0, 0, 0, 0x01, 0]);
        b.extend_from_slice(&[5, 0, 4, 0, 10, 0, 0, 0, 0, 0, 0, 0, 0xff, 0]);
        b.extend_from_slice(&[0, 0, 0, 0, 0x00, 0x01, 0, 0, 0, 0, 0, 0, 0x01, 0]);
        b
    }

    #[test]
    fn hand_written_file_parses() {
        let s = decode_events(&fixture()).unwrap();
        assert_eq!((s.width(), s.height()), (6, 5));
        assert_eq!(
            s.events(),
            &[
                Event { x: 1, y: 2, t: 10, p: Polarity::On },
                Event { x: 5, y: 4, t: 10, p: Polarity::Off },
                Event { x: 0, y: 0, t: 256, p: Polarity::On },
            ]
        );
        assert_eq!(encode_events(&s), fixture());
    }

    #[test]
    fn empty_file_keeps_dims() {
        let s = EventStream::empty(640, 480).unwrap();
        let bytes = encode_events(&s);
        assert_eq!(bytes.len(), 16);
        let back = decode_events(&bytes).unwrap();
        assert!(back.is_empty());
        assert_eq!((back.width(), back.height()), (640, 480));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut b = fixture();
        b[3] = b'2';
        assert!(matches!(decode_events(&b), Err(Error::Format(_))));
    }

    #[test]
    fn unsorted_names_first_offending_record() {
        let mut b = fixture();
        // record 2 timestamp -> 3, earlier than 10
        let off = 16 + 2 * RECORD_BYTES + 4;
        b[off] = 3;
        b[off + 1] = 0;
        match decode_events(&b) {
            Err(Error::Data { index, .. }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn truncated_body_rejected() {
        let b = fixture();
        assert!(matches!(decode_events(&b[..b.len() - 1]), Err(Error::Format(_))));
    }
}
