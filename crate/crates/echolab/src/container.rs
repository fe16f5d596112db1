//! The `ECV1` clip container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic   b"ECV1"
//! header  T, H, W as u32
//! payload T*H*W f32, frame-major row-major
//! tensors zero or more records until EOF:
//!           name_len u32, name bytes (UTF-8),
//!           rank u32, dims u32 * rank,
//!           prod(dims) f32
//! ```
//!
//! A header of `0,0,0` makes a tensor-only file; checkpoints and embedding
//! caches use that form. All stored values must be finite.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::video::Video;

const MAGIC: &[u8; 4] = b"ECV1";

/// Clip provenance seeds ride along as a named tensor of four u16 limbs,
/// which f32 holds exactly.
pub const SEED_TENSOR: &str = "provenance_seed";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Self {
        let t = NamedTensor { name: name.into(), dims, data };
        assert_eq!(
            t.data.len(),
            t.dims.iter().product::<usize>(),
            "tensor `{}`: data length {} does not match dims {:?}",
            t.name,
            t.data.len(),
            t.dims
        );
        t
    }
}

fn seed_to_tensor(seed: u64) -> NamedTensor {
    let limbs: Vec<f32> = (0..4).map(|i| ((seed >> (16 * i)) & 0xffff) as f32).collect();
    NamedTensor::new(SEED_TENSOR, vec![4], limbs)
}

fn seed_from_tensor(t: &NamedTensor) -> u64 {
    let mut seed = 0u64;
    for (i, &v) in t.data.iter().take(4).enumerate() {
        seed |= ((v as u64) & 0xffff) << (16 * i);
    }
    seed
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f32s(w: &mut impl Write, data: &[f32]) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for v in data {
        if !v.is_finite() {
            return Err(Error::Container("refusing to write non-finite value".into()));
        }
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    let out: Vec<f32> = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Container("non-finite value in payload".into()));
    }
    Ok(out)
}

fn write_stream(w: &mut impl Write, video: Option<&Video>, tensors: &[NamedTensor]) -> Result<()> {
    w.write_all(MAGIC)?;
    match video {
        Some(v) => {
            write_u32(w, v.t as u32)?;
            write_u32(w, v.h as u32)?;
            write_u32(w, v.w as u32)?;
            write_f32s(w, &v.data)?;
        }
        None => {
            for _ in 0..3 {
                write_u32(w, 0)?;
            }
        }
    }
    for t in tensors {
        write_u32(w, t.name.len() as u32)?;
        w.write_all(t.name.as_bytes())?;
        write_u32(w, t.dims.len() as u32)?;
        for &d in &t.dims {
            write_u32(w, d as u32)?;
        }
        write_f32s(w, &t.data)?;
    }
    Ok(())
}

fn read_stream(r: &mut impl Read) -> Result<(Option<Video>, Vec<NamedTensor>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Container(format!("bad magic {magic:?}, expected \"ECV1\"")));
    }
    let t = read_u32(r)? as usize;
    let h = read_u32(r)? as usize;
    let w = read_u32(r)? as usize;
    let video = if t * h * w > 0 {
        let data = read_f32s(r, t * h * w)?;
        Some(Video { t, h, w, data, seed: 0 })
    } else {
        None
    };
    let mut tensors = Vec::new();
    loop {
        let mut b = [0u8; 4];
        match r.read_exact(&mut b) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(b) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Container("tensor name is not UTF-8".into()))?;
        let rank = read_u32(r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(r)? as usize);
        }
        let n: usize = dims.iter().product();
        let data = read_f32s(r, n)?;
        tensors.push(NamedTensor { name, dims, data });
    }
    Ok((video, tensors))
}

/// Writes a clip (and its provenance seed) to `path`.
pub fn write_clip(path: &Path, video: &Video) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_stream(&mut w, Some(video), &[seed_to_tensor(video.seed)])?;
    w.flush()?;
    Ok(())
}

/// Reads a clip written by [`write_clip`].
pub fn read_clip(path: &Path) -> Result<Video> {
    let mut r = BufReader::new(File::open(path)?);
    let (video, tensors) = read_stream(&mut r)?;
    let mut video = video.ok_or_else(|| Error::Container(format!("{} holds no video payload", path.display())))?;
    if let Some(t) = tensors.iter().find(|t| t.name == SEED_TENSOR) {
        video.seed = seed_from_tensor(t);
    }
    Ok(video)
}

/// Writes a tensor-only container (checkpoints, embedding caches).
pub fn write_tensors(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_stream(&mut w, None, tensors)?;
    w.flush()?;
    Ok(())
}

/// Reads every named tensor from a container (video payload, if any, is skipped).
pub fn read_tensors(path: &Path) -> Result<Vec<NamedTensor>> {
    let mut r = BufReader::new(File::open(path)?);
    let (_, tensors) = read_stream(&mut r)?;
    Ok(tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn clip_roundtrip_preserves_bytes_and_seed() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("clip.ecv");
        let mut v = Video::zeros(2, 3, 4);
        for (i, p) in v.data.iter_mut().enumerate() {
            *p = i as f32 / 24.0;
        }
        v.seed = 0xDEAD_BEEF_1234_5678;
        write_clip(&path, &v).unwrap();
        let back = read_clip(&path).unwrap();
        assert_eq!(back.data, v.data);
        assert_eq!((back.t, back.h, back.w), (2, 3, 4));
        assert_eq!(back.seed, v.seed);
    }

    #[test]
    fn tensor_only_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.ecv");
        let tensors = vec![
            NamedTensor::new("enc/w", vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
            NamedTensor::new("enc/b", vec![3], vec![-0.5, 0.0, 0.5]),
        ];
        write_tensors(&path, &tensors).unwrap();
        let back = read_tensors(&path).unwrap();
        assert_eq!(back, tensors);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.ecv");
        std::fs::write(&path, b"NOPE0000000000000000").unwrap();
        assert!(read_clip(&path).is_err());
    }

    #[test]
    fn non_finite_rejected_on_write() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("clip.ecv");
        let mut v = Video::zeros(1, 1, 2);
        v.data[1] = f32::NAN;
        assert!(write_clip(&path, &v).is_err());
    }
}
