//! The `KDF1` binary field format.
//!
//! Layout, all little-endian: the magic `KDF1`, `u32 n`, `f64 mu`,
//! `u32` segment count, each segment as `x0 y0 x1 y1` in `f64`, then `n * n`
//! displacement pairs in row-major order (row 0 is the bottom row). The
//! domain is `(-mu, mu)^2`; fields centered elsewhere are written in the
//! shifted frame.

use std::fs;
use std::path::Path;

use crate::field::DisplacementField;
use crate::geometry::{Point, Segment, SegmentSet};
use crate::KornError;

pub const MAGIC: &[u8; 4] = b"KDF1";

pub fn encode(u: &DisplacementField) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 32 * u.jumps.len() + 16 * u.values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(u.n as u32).to_le_bytes());
    out.extend_from_slice(&u.mu.to_le_bytes());
    out.extend_from_slice(&(u.jumps.len() as u32).to_le_bytes());
    for s in u.jumps.iter() {
        for c in [s.a.x - u.center.x, s.a.y - u.center.y, s.b.x - u.center.x, s.b.y - u.center.y] {
            out.extend_from_slice(&c.to_le_bytes());
        }
    }
    for v in &u.values {
        out.extend_from_slice(&v[0].to_le_bytes());
        out.extend_from_slice(&v[1].to_le_bytes());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N], KornError> {
        let end = self.pos + N;
        let bytes = self
            .buf
            .get(self.pos..end)
            .ok_or_else(|| KornError::Format(format!("truncated while reading {what} at byte {}", self.pos)))?;
        self.pos = end;
        Ok(bytes.try_into().expect("slice length checked"))
    }

    fn u32(&mut self, what: &str) -> Result<u32, KornError> {
        Ok(u32::from_le_bytes(self.take(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64, KornError> {
        Ok(f64::from_le_bytes(self.take(what)?))
    }
}

pub fn decode(buf: &[u8]) -> Result<DisplacementField, KornError> {
    let mut r = Reader { buf, pos: 0 };
    if &r.take::<4>("magic")? != MAGIC {
        return Err(KornError::Format("bad magic, expected KDF1".into()));
    }
    let n = r.u32("n")? as usize;
    let mu = r.f64("mu")?;
    let nseg = r.u32("segment count")? as usize;
    let need = 20usize
        .checked_add(nseg.checked_mul(32).ok_or_else(|| KornError::Format("segment count overflows".into()))?)
        .and_then(|x| n.checked_mul(n).and_then(|m| m.checked_mul(16)).and_then(|m| x.checked_add(m)))
        .ok_or_else(|| KornError::Format("header sizes overflow".into()))?;
    if buf.len() != need {
        return Err(KornError::Format(format!("expected {need} bytes for n = {n} and {nseg} segments, found {}", buf.len())));
    }
    let mut jumps = SegmentSet::new();
    for k in 0..nseg {
        let c = [r.f64("segment")?, r.f64("segment")?, r.f64("segment")?, r.f64("segment")?];
        let s = Segment::new(Point::new(c[0], c[1]), Point::new(c[2], c[3]))
            .map_err(|e| KornError::Format(format!("segment {k}: {e}")))?;
        jumps.push(s);
    }
    let mut values = Vec::with_capacity(n * n);
    for _ in 0..n * n {
        values.push([r.f64("values")?, r.f64("values")?]);
    }
    DisplacementField::new(n, mu, values, jumps).map_err(|e| KornError::Format(e.to_string()))
}

pub fn read_field(path: &Path) -> Result<DisplacementField, KornError> {
    let buf = fs::read(path).map_err(|source| KornError::Io { path: path.display().to_string(), source })?;
    decode(&buf).map_err(|e| match e {
        KornError::Format(m) => KornError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_field(path: &Path, u: &DisplacementField) -> Result<(), KornError> {
    fs::write(path, encode(u)).map_err(|source| KornError::Io { path: path.display().to_string(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn round_trip_is_bit_exact() {
        let u = fixtures::crack_forest(7, 32).unwrap();
        let bytes = encode(&u);
        assert_eq!(&bytes[..4], b"KDF1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 32);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, u);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn off_center_fields_are_shifted() {
        let u = fixtures::detached_corner(0.2, 16).unwrap();
        let back = decode(&encode(&u)).unwrap();
        assert_eq!(back.center, Point::ORIGIN);
        assert_eq!(back.values, u.values);
        let s = back.jumps.segments[0];
        assert!((s.a.x - 0.3).abs() < 1e-15 && (s.a.y - 0.5).abs() < 1e-15);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.kdf");
        let u = fixtures::ramp(8).unwrap();
        write_field(&p, &u).unwrap();
        let back = read_field(&p).unwrap();
        assert_eq!(back.values, u.values);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        let u = fixtures::ramp(4).unwrap();
        let mut b = encode(&u);
        assert!(matches!(decode(&b[..b.len() - 1]), Err(KornError::Format(_))));
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(KornError::Format(_))));
        let missing = Path::new("/nonexistent/dir/field.kdf");
        match read_field(missing) {
            Err(KornError::Io { path, .. }) => assert!(path.contains("field.kdf")),
            other => panic!("{other:?}"),
        }
    }
}
