//! UVOL volume container.
//!
//! All integers and floats little-endian.
//!
//! | offset | size | field                                   |
//! |-------:|-----:|-----------------------------------------|
//! | 0      | 4    | magic `UVOL`                            |
//! | 4      | 2    | format version (u16, currently 1)       |
//! | 6      | 1    | dtype code (u8, 1 = f64)                |
//! | 7      | 1    | reserved, 0                             |
//! | 8      | 12   | dims D, H, W (u32 each)                 |
//! | 20     | 24   | spacing depth, height, width (f64 each) |
//! | 44     | 16   | value range min, max (f64 each)         |
//! | 60     | 8·N  | voxels, depth-major then row-major      |
//! | 60+8N  | 4    | CRC32 (IEEE) of all preceding bytes     |

use std::path::Path;

use super::{Dims3, Volume};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"UVOL";
pub const VERSION: u16 = 1;
pub const DTYPE_F64: u8 = 1;
pub const HEADER_LEN: usize = 60;

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let d = v.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * d.numel() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F64);
    out.push(0);
    for n in [d.d, d.h, d.w] {
        out.extend_from_slice(&(n as u32).to_le_bytes());
    }
    for s in v.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out.extend_from_slice(&v.value_range.0.to_le_bytes());
    out.extend_from_slice(&v.value_range.1.to_le_bytes());
    for x in v.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn f64_at(b: &[u8], at: usize) -> f64 {
    f64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

/// Checks run in order: magic, version, header/body length, CRC, dtype, contents.
pub fn decode_volume(bytes: &[u8], path: &Path) -> Result<Volume> {
    if bytes.len() < 6 {
        return Err(Error::Truncated(format!(
            "{}: {} bytes",
            path.display(),
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: VERSION,
        });
    }
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::Truncated(format!(
            "{}: header needs {} bytes",
            path.display(),
            HEADER_LEN + 4
        )));
    }
    let dims = Dims3::new(
        u32_at(bytes, 8) as usize,
        u32_at(bytes, 12) as usize,
        u32_at(bytes, 16) as usize,
    );
    let expected = dims
        .d
        .checked_mul(dims.h)
        .and_then(|n| n.checked_mul(dims.w))
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER_LEN + 4))
        .ok_or_else(|| Error::Malformed(format!("{}: dims {dims} overflow", path.display())))?;
    if bytes.len() < expected {
        return Err(Error::Truncated(format!(
            "{}: dims {dims} need {expected} bytes, file has {}",
            path.display(),
            bytes.len()
        )));
    }
    if bytes.len() > expected {
        return Err(Error::Malformed(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - expected
        )));
    }
    let body = &bytes[..expected - 4];
    let stored = u32_at(bytes, expected - 4);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    if bytes[6] != DTYPE_F64 {
        return Err(Error::Malformed(format!(
            "{}: unknown dtype code {}",
            path.display(),
            bytes[6]
        )));
    }
    let data: Vec<f64> = body[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64_at(c, 0))
        .collect();
    let mut v =
        Volume::new(dims, data).map_err(|e| e.context(format!("reading {}", path.display())))?;
    v.spacing = [f64_at(bytes, 20), f64_at(bytes, 28), f64_at(bytes, 36)];
    v.value_range = (f64_at(bytes, 44), f64_at(bytes, 52));
    Ok(v)
}

pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    std::fs::write(path, encode_volume(v)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Volume {
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut v = Volume::new(Dims3::new(2, 3, 4), data).unwrap();
        v.spacing = [2.0, 0.5, 0.5];
        v.value_range = (300.0, 4200.0);
        v
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.uvol");
        let v = sample();
        write_volume(&v, &p).unwrap();
        let back = read_volume(&p).unwrap();
        assert_eq!(back, v);
        assert!(back
            .data()
            .iter()
            .zip(v.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn header_offsets() {
        let b = encode_volume(&sample());
        assert_eq!(b.len(), 60 + 24 * 8 + 4);
        assert_eq!(&b[0..4], b"UVOL");
        assert_eq!(&b[4..6], &[1, 0]);
        assert_eq!(b[6], 1);
        assert_eq!(b[7], 0);
        assert_eq!(&b[8..20], &[2, 0, 0, 0, 3, 0, 0, 0, 4, 0, 0, 0]);
        assert_eq!(&b[20..28], &2.0f64.to_le_bytes());
        assert_eq!(&b[44..52], &300.0f64.to_le_bytes());
        assert_eq!(&b[52..60], &4200.0f64.to_le_bytes());
        assert_eq!(&b[60..68], &0.0f64.to_le_bytes());
        assert_eq!(&b[68..76], &0.37f64.sin().to_le_bytes());
        let crc = crc32fast::hash(&b[..b.len() - 4]);
        assert_eq!(&b[b.len() - 4..], &crc.to_le_bytes());
    }

    #[test]
    fn distinct_errors() {
        let p = Path::new("x.uvol");
        let good = encode_volume(&sample());

        let mut flipped = good.clone();
        flipped[100] ^= 0x10;
        assert!(matches!(
            decode_volume(&flipped, p),
            Err(Error::Checksum { .. })
        ));

        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(matches!(
            decode_volume(&magic, p),
            Err(Error::BadMagic { .. })
        ));

        let mut version = good.clone();
        version[4] = 9;
        assert!(matches!(
            decode_volume(&version, p),
            Err(Error::UnsupportedVersion {
                found: 9,
                expected: 1
            })
        ));

        assert!(matches!(
            decode_volume(&good[..good.len() - 9], p),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(
            decode_volume(&good[..30], p),
            Err(Error::Truncated(_))
        ));
        assert!(matches!(
            decode_volume(&good[..3], p),
            Err(Error::Truncated(_))
        ));

        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode_volume(&long, p), Err(Error::Malformed(_))));

        let mut dtype = good[..good.len() - 4].to_vec();
        dtype[6] = 7;
        let crc = crc32fast::hash(&dtype);
        dtype.extend_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode_volume(&dtype, p), Err(Error::Malformed(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        let e = read_volume(Path::new("/nonexistent/dir/v.uvol")).unwrap_err();
        assert!(matches!(e, Error::Io { .. }));
    }
}
