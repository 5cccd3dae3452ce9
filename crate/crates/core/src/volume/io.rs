//! The ADXV1 binary volume format.
//!
//! ```text
//! offset  size       field
//! 0       6          magic "ADXV1\0"
//! 6       3 x u32    nx, ny, nz           (little endian)
//! 18      3 x f32    spacing x, y, z (mm) (little endian IEEE-754)
//! 30      3 x f32    origin x, y, z (mm)
//! 42      N x f32    intensities, x fastest, N = nx * ny * nz
//! ```
//!
//! No compression, no trailing bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Volume;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 6] = *b"ADXV1\0";
const HEADER_LEN: usize = 42;

pub fn write_to<W: Write>(v: &Volume, mut w: W) -> Result<()> {
    w.write_all(&MAGIC)?;
    for d in v.dims() {
        let d = u32::try_from(d).map_err(|_| Error::invalid("dimension exceeds u32"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for s in v.spacing() {
        w.write_all(&s.to_le_bytes())?;
    }
    for o in v.origin() {
        w.write_all(&o.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(v.data().len() * 4);
    for x in v.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn save(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let f = File::create(path)?;
    write_to(v, BufWriter::new(f))
}

pub fn read_from<R: Read>(mut r: R) -> Result<Volume> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        let n = r.read(&mut header[got..])?;
        if n == 0 {
            break;
        }
        got += n;
    }
    if got < MAGIC.len() || header[..MAGIC.len()] != MAGIC {
        let offset = header[..got.min(MAGIC.len())]
            .iter()
            .zip(MAGIC.iter())
            .position(|(a, b)| a != b)
            .unwrap_or(got.min(MAGIC.len()));
        return Err(Error::format(offset as u64, "bad magic, expected ADXV1"));
    }
    if got < HEADER_LEN {
        return Err(Error::format(got as u64, "truncated header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(header[o..o + 4].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(header[o..o + 4].try_into().unwrap());
    let dims = [u32_at(6) as usize, u32_at(10) as usize, u32_at(14) as usize];
    let spacing = [f32_at(18), f32_at(22), f32_at(26)];
    let origin = [f32_at(30), f32_at(34), f32_at(38)];

    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4).map(|_| n))
        .ok_or_else(|| Error::format(6, "dimension product overflows"))?;
    if count == 0 {
        return Err(Error::format(6, "zero dimension"));
    }

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let expected = count * 4;
    if payload.len() != expected {
        let what = if payload.len() < expected {
            "truncated payload"
        } else {
            "trailing bytes after payload"
        };
        return Err(Error::format(
            (HEADER_LEN + payload.len().min(expected)) as u64,
            format!(
                "{what}: header declares {count} voxels ({expected} bytes), found {} bytes",
                payload.len()
            ),
        ));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(bad) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::format(
            (HEADER_LEN + 4 * bad) as u64,
            "non-finite intensity",
        ));
    }
    Volume::new(dims, spacing, origin, data).map_err(|e| Error::format(6, e.to_string()))
}

pub fn load(path: impl AsRef<Path>) -> Result<Volume> {
    let f = File::open(path)?;
    read_from(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bytes_of(v: &Volume) -> Vec<u8> {
        let mut out = Vec::new();
        write_to(v, &mut out).unwrap();
        out
    }

    #[test]
    fn header_layout() {
        let v = Volume::new(
            [2, 1, 1],
            [0.5, 0.7, 1.0],
            [1.0, -2.0, 3.0],
            vec![1.5, -4.0],
        )
        .unwrap();
        let b = bytes_of(&v);
        assert_eq!(&b[..6], &[0x41, 0x44, 0x58, 0x56, 0x31, 0x00]);
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(&b[18..22], &0.5f32.to_le_bytes());
        assert_eq!(&b[30..34], &1.0f32.to_le_bytes());
        assert_eq!(&b[42..46], &1.5f32.to_le_bytes());
        assert_eq!(b.len(), 42 + 8);
    }

    #[test]
    fn wrong_magic() {
        let v = Volume::filled([2, 2, 2], [1.0; 3], [0.0; 3], 1.0).unwrap();
        let mut b = bytes_of(&v);
        b[3] = b'X';
        match read_from(&b[..]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 3),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn payload_mismatch() {
        let v = Volume::filled([2, 2, 2], [1.0; 3], [0.0; 3], 1.0).unwrap();
        let b = bytes_of(&v);
        match read_from(&b[..b.len() - 4]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, b.len() - 4),
            other => panic!("expected format error, got {other:?}"),
        }
        let mut longer = b.clone();
        longer.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(read_from(&longer[..]), Err(Error::Format { .. })));
        assert!(matches!(
            read_from(&b[..20]),
            Err(Error::Format { offset: 20, .. })
        ));
    }

    #[test]
    fn dimension_overflow() {
        let mut b = MAGIC.to_vec();
        for _ in 0..3 {
            b.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        b.extend_from_slice(&[0u8; 24]);
        assert!(matches!(
            read_from(&b[..]),
            Err(Error::Format { offset: 6, .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn round_trip_bit_exact(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..16 * 16 * 16).map(|_| rng.gen::<f32>() * 2000.0 - 1000.0).collect();
            let v = Volume::new([16, 16, 16], [rng.gen_range(0.1..2.0), 0.7, 0.7], [rng.gen(), -1.25, 1e3], data).unwrap();
            let back = read_from(&bytes_of(&v)[..]).unwrap();
            prop_assert_eq!(back.dims(), v.dims());
            prop_assert_eq!(back.spacing().map(f32::to_bits), v.spacing().map(f32::to_bits));
            prop_assert_eq!(back.origin().map(f32::to_bits), v.origin().map(f32::to_bits));
            prop_assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
