//! On-disk formats: the `TRSLAT1` latent dump and 8-bit PGM frame export.
//!
//! Latent dump layout: one ASCII header line
//! `TRSLAT1 N C H W dtype=f32 endian=LE\n` followed by `N*C*H*W`
//! little-endian `f32` values in frame-major order.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use ndarray::Array4;

use crate::error::{Error, Result};
use crate::tensor::VideoLatent;

const MAGIC: &str = "TRSLAT1";

pub fn write_latent<W: Write>(mut out: W, x: &VideoLatent) -> Result<()> {
    let (n, c, h, w) = x.as_array().dim();
    writeln!(out, "{MAGIC} {n} {c} {h} {w} dtype=f32 endian=LE")?;
    let mut buf = Vec::with_capacity(x.len() * 4);
    for &v in x.as_array().iter() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

pub fn read_latent<R: Read>(input: R) -> Result<VideoLatent> {
    let mut reader = BufReader::new(input);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let header = header
        .strip_suffix('\n')
        .ok_or_else(|| Error::Format("missing header terminator".into()))?;
    let fields: Vec<&str> = header.split(' ').collect();
    if fields.len() != 7 || fields[0] != MAGIC || fields[5] != "dtype=f32" || fields[6] != "endian=LE" {
        return Err(Error::Format(format!("unrecognised header {header:?}")));
    }
    let dims: Vec<usize> = fields[1..5]
        .iter()
        .map(|s| s.parse().map_err(|_| Error::Format(format!("bad dimension {s:?}"))))
        .collect::<Result<_>>()?;
    let count = dims.iter().product::<usize>();
    let mut bytes = vec![0u8; count * 4];
    reader.read_exact(&mut bytes)?;
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    let data = Array4::from_shape_vec((dims[0], dims[1], dims[2], dims[3]), values)
        .map_err(|e| Error::Format(e.to_string()))?;
    VideoLatent::new(data)
}

pub fn save_latent(path: &Path, x: &VideoLatent) -> Result<()> {
    let mut buf = Vec::new();
    write_latent(&mut buf, x)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_latent(path: &Path) -> Result<VideoLatent> {
    read_latent(fs::File::open(path)?)
}

/// Writes one binary PGM per frame into `dir` as `frame_000.pgm`, ...
///
/// Intensities are min-max normalised over the whole video so frames stay
/// comparable. Multi-channel frames are stacked vertically.
pub fn write_frames_pgm(dir: &Path, x: &VideoLatent) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (lo, hi) = x
        .as_array()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (c, h, w) = x.frame_shape();
    for (i, frame) in x.frames().enumerate() {
        let mut bytes = format!("P5\n{w} {}\n255\n", c * h).into_bytes();
        bytes.extend(
            frame
                .iter()
                .map(|&v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8),
        );
        fs::write(dir.join(format!("frame_{i:03}.pgm")), bytes)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngStream;
    use proptest::prelude::*;

    #[test]
    fn header_is_bit_exact() {
        let x = VideoLatent::zeros(2, (1, 3, 4)).unwrap();
        let mut buf = Vec::new();
        write_latent(&mut buf, &x).unwrap();
        let header = b"TRSLAT1 2 1 3 4 dtype=f32 endian=LE\n";
        assert_eq!(&buf[..header.len()], header);
        assert_eq!(buf.len(), header.len() + 2 * 3 * 4 * 4);
    }

    #[test]
    fn payload_is_little_endian_frame_major() {
        let x = VideoLatent::from_fn(2, (1, 1, 2), |i| i as f64 + 0.5).unwrap();
        let mut buf = Vec::new();
        write_latent(&mut buf, &x).unwrap();
        let payload = &buf[buf.iter().position(|&b| b == b'\n').unwrap() + 1..];
        let expect: Vec<u8> = [0.5f32, 1.5, 2.5, 3.5].iter().flat_map(|v| v.to_le_bytes()).collect();
        assert_eq!(payload, expect.as_slice());
    }

    #[test]
    fn rejects_truncated_and_foreign_dumps() {
        assert!(read_latent(&b"TRSLAT2 2 1 1 1 dtype=f32 endian=LE\n"[..]).is_err());
        assert!(read_latent(&b"TRSLAT1 2 1 1 1 dtype=f32 endian=LE\n\0\0\0\0"[..]).is_err());
        let mut long = b"TRSLAT1 2 1 1 1 dtype=f32 endian=LE\n".to_vec();
        long.extend_from_slice(&[0u8; 12]);
        assert!(read_latent(&long[..]).is_err());
    }

    #[test]
    fn pgm_frames_are_normalised_per_video() {
        let dir = tempfile::tempdir().unwrap();
        let x = VideoLatent::from_fn(2, (1, 1, 2), |i| i as f64).unwrap();
        write_frames_pgm(dir.path(), &x).unwrap();
        let f0 = fs::read(dir.path().join("frame_000.pgm")).unwrap();
        let f1 = fs::read(dir.path().join("frame_001.pgm")).unwrap();
        assert!(f0.starts_with(b"P5\n2 1\n255\n"));
        assert_eq!(&f0[f0.len() - 2..], &[0, 85]);
        assert_eq!(&f1[f1.len() - 2..], &[170, 255]);
    }

    proptest! {
        #[test]
        fn round_trip_is_lossless_at_f32(seed in 0u64..500, n in 2usize..5) {
            let x = RngStream::new(seed).normal_latent(n, (2, 3, 2), 3.0).unwrap();
            let narrowed = x.map(|v| v as f32 as f64);
            let mut buf = Vec::new();
            write_latent(&mut buf, &x).unwrap();
            prop_assert_eq!(read_latent(&buf[..]).unwrap(), narrowed);
        }
    }
}
