//! Little-endian float32 raster dumps.
//!
//! Layout: 16-byte header `{magic "P4DF", u32 height, u32 width, u32 channels}`
//! followed by `height * width * channels` f32 values, row-major, channel-interleaved.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::Raster;

pub const MAGIC: &[u8; 4] = b"P4DF";
pub const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct RawArray {
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub data: Vec<f32>,
}

impl RawArray {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.channels.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let parse = |offset: usize, msg: &str| Error::Parse {
            path: path.to_path_buf(),
            offset,
            msg: msg.to_string(),
        };
        if bytes.len() < HEADER_LEN {
            return Err(parse(bytes.len(), "truncated header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(parse(0, "bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let (height, width, channels) = (word(4), word(8), word(12));
        let count = height as usize * width as usize * channels as usize;
        let expected = HEADER_LEN + 4 * count;
        if bytes.len() != expected {
            return Err(parse(
                bytes.len().min(expected),
                &format!(
                    "payload length {} does not match header ({expected})",
                    bytes.len()
                ),
            ));
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }
}

/// Channel-flattening conversion to and from [`RawArray`].
pub trait RawChannels: Sized {
    const CHANNELS: u32;
    fn push(&self, out: &mut Vec<f32>);
    fn pull(src: &[f32]) -> Self;
}

impl RawChannels for f64 {
    const CHANNELS: u32 = 1;
    fn push(&self, out: &mut Vec<f32>) {
        out.push(*self as f32);
    }
    fn pull(src: &[f32]) -> Self {
        src[0] as f64
    }
}

impl<const N: usize> RawChannels for [f64; N] {
    const CHANNELS: u32 = N as u32;
    fn push(&self, out: &mut Vec<f32>) {
        out.extend(self.iter().map(|&v| v as f32));
    }
    fn pull(src: &[f32]) -> Self {
        std::array::from_fn(|i| src[i] as f64)
    }
}

impl<T: RawChannels> Raster<T> {
    pub fn to_raw(&self) -> RawArray {
        let mut data = Vec::with_capacity(self.len() * T::CHANNELS as usize);
        for v in self.as_slice() {
            v.push(&mut data);
        }
        RawArray {
            height: self.height() as u32,
            width: self.width() as u32,
            channels: T::CHANNELS,
            data,
        }
    }

    pub fn from_raw(raw: &RawArray) -> Result<Self> {
        if raw.channels != T::CHANNELS {
            return Err(Error::Shape(format!(
                "expected {} channels, file has {}",
                T::CHANNELS,
                raw.channels
            )));
        }
        let c = T::CHANNELS as usize;
        let data = raw.data.chunks_exact(c).map(T::pull).collect();
        Raster::from_vec(raw.width as usize, raw.height as usize, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let raw = RawArray {
            height: 2,
            width: 3,
            channels: 2,
            data: vec![0.0; 12],
        };
        let b = raw.encode();
        assert_eq!(&b[..4], b"P4DF");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 2);
        assert_eq!(b.len(), 16 + 48);
    }

    #[test]
    fn infinity_survives() {
        let r = Raster::from_vec(2, 1, vec![1.5, f64::INFINITY]).unwrap();
        let back: Raster<f64> =
            Raster::from_raw(&RawArray::decode(&r.to_raw().encode(), Path::new("x")).unwrap())
                .unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn truncated_payload_rejected() {
        let raw = RawArray {
            height: 2,
            width: 2,
            channels: 1,
            data: vec![1.0; 4],
        };
        let mut b = raw.encode();
        b.truncate(b.len() - 3);
        match RawArray::decode(&b, Path::new("t")) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, b.len()),
            other => panic!("unexpected {other:?}"),
        }
    }
}
