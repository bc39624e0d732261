//! Binary spike streams and the SPKS file codec.
//!
//! SPKS layout (little-endian):
//!
//! | offset | size | field                    |
//! |--------|------|--------------------------|
//! | 0      | 4    | magic `"SPKS"`           |
//! | 4      | 2    | version (`1`)            |
//! | 6      | 2    | reserved (`0`)           |
//! | 8      | 4    | height                   |
//! | 12     | 4    | width                    |
//! | 16     | 4    | number of frames         |
//! | 20     | 4    | threshold (f32)          |
//! | 24     | 4    | readout period, µs (f32) |
//! | 28     | ...  | payload                  |
//!
//! The payload is one block per frame, each `ceil(H*W/8)` bytes, pixels in
//! row-major order packed MSB-first. Pad bits at the end of a frame are zero.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::write_atomic;

pub const SPKS_MAGIC: [u8; 4] = *b"SPKS";
pub const SPKS_VERSION: u16 = 1;
pub const SPKS_HEADER_LEN: usize = 28;

/// An immutable H×W×N binary spike tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SpikeStream {
    height: usize,
    width: usize,
    num_frames: usize,
    threshold: f32,
    readout_period_us: f32,
    bits: Vec<u8>,
}

#[inline]
fn frame_bytes_for(height: usize, width: usize) -> usize {
    (height * width).div_ceil(8)
}

fn check_meta(height: usize, width: usize, num_frames: usize, threshold: f32, period: f32) -> Result<()> {
    if height == 0 || width == 0 || num_frames == 0 {
        return Err(Error::config(
            "shape",
            format!("H, W, N must be >= 1, got {height}x{width}x{num_frames}"),
        ));
    }
    if !(threshold > 0.0) || !threshold.is_finite() {
        return Err(Error::config("threshold", format!("must be positive, got {threshold}")));
    }
    if !(period > 0.0) || !period.is_finite() {
        return Err(Error::config(
            "readout_period",
            format!("must be positive, got {period}"),
        ));
    }
    Ok(())
}

impl SpikeStream {
    /// Builds a stream from one boolean slice per frame (row-major, `H*W` entries each).
    pub fn from_frames<F: AsRef<[bool]>>(
        height: usize,
        width: usize,
        threshold: f32,
        readout_period_us: f32,
        frames: &[F],
    ) -> Result<Self> {
        check_meta(height, width, frames.len(), threshold, readout_period_us)?;
        let fb = frame_bytes_for(height, width);
        let mut bits = vec![0u8; fb * frames.len()];
        for (t, frame) in frames.iter().enumerate() {
            let frame = frame.as_ref();
            if frame.len() != height * width {
                return Err(Error::Shape(format!(
                    "frame {t} has {} pixels, expected {}",
                    frame.len(),
                    height * width
                )));
            }
            let block = &mut bits[t * fb..(t + 1) * fb];
            for (i, _) in frame.iter().enumerate().filter(|(_, &b)| b) {
                block[i / 8] |= 0x80 >> (i % 8);
            }
        }
        Ok(Self {
            height,
            width,
            num_frames: frames.len(),
            threshold,
            readout_period_us,
            bits,
        })
    }

    /// Wraps an already packed payload. Pad bits must be zero.
    pub fn from_packed(
        height: usize,
        width: usize,
        num_frames: usize,
        threshold: f32,
        readout_period_us: f32,
        bits: Vec<u8>,
    ) -> Result<Self> {
        check_meta(height, width, num_frames, threshold, readout_period_us)?;
        let fb = frame_bytes_for(height, width);
        if bits.len() != fb * num_frames {
            return Err(Error::Shape(format!(
                "packed payload is {} bytes, expected {}",
                bits.len(),
                fb * num_frames
            )));
        }
        let pad = fb * 8 - height * width;
        if pad > 0 {
            let mask = (1u8 << pad) - 1;
            if bits.chunks_exact(fb).any(|f| f[fb - 1] & mask != 0) {
                return Err(Error::Malformed("non-zero pad bits in frame".into()));
            }
        }
        Ok(Self {
            height,
            width,
            num_frames,
            threshold,
            readout_period_us,
            bits,
        })
    }

    pub fn zeros(height: usize, width: usize, num_frames: usize, threshold: f32) -> Result<Self> {
        let fb = frame_bytes_for(height, width);
        Self::from_packed(height, width, num_frames, threshold, 1.0, vec![0; fb * num_frames])
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn num_frames(&self) -> usize {
        self.num_frames
    }
    pub fn threshold(&self) -> f32 {
        self.threshold
    }
    pub fn readout_period_us(&self) -> f32 {
        self.readout_period_us
    }
    pub fn packed(&self) -> &[u8] {
        &self.bits
    }
    pub fn frame_bytes(&self) -> usize {
        frame_bytes_for(self.height, self.width)
    }

    pub fn get_spike(&self, x: usize, y: usize, t: usize) -> Result<bool> {
        if x >= self.width {
            return Err(Error::OutOfBounds { axis: "x", index: x, len: self.width });
        }
        if y >= self.height {
            return Err(Error::OutOfBounds { axis: "y", index: y, len: self.height });
        }
        if t >= self.num_frames {
            return Err(Error::OutOfBounds { axis: "t", index: t, len: self.num_frames });
        }
        Ok(self.bit(y * self.width + x, t))
    }

    /// Unchecked read by flat pixel index.
    #[inline]
    pub fn bit(&self, pixel: usize, t: usize) -> bool {
        let byte = self.bits[t * self.frame_bytes() + pixel / 8];
        byte & (0x80 >> (pixel % 8)) != 0
    }

    /// Frames `[t0, t1]`, inclusive, with metadata copied.
    pub fn slice_window(&self, t0: usize, t1: usize) -> Result<SpikeStream> {
        if t0 > t1 || t1 >= self.num_frames {
            return Err(Error::BadWindow {
                start: t0,
                end: t1,
                len: self.num_frames,
            });
        }
        let fb = self.frame_bytes();
        Ok(SpikeStream {
            num_frames: t1 - t0 + 1,
            bits: self.bits[t0 * fb..(t1 + 1) * fb].to_vec(),
            ..self.clone_meta()
        })
    }

    fn clone_meta(&self) -> SpikeStream {
        SpikeStream {
            height: self.height,
            width: self.width,
            num_frames: 0,
            threshold: self.threshold,
            readout_period_us: self.readout_period_us,
            bits: Vec::new(),
        }
    }

    pub fn popcount(&self) -> u64 {
        self.bits.iter().map(|b| b.count_ones() as u64).sum()
    }

    /// Per-pixel spike counts over frames `[t0, t1]`.
    pub fn counts(&self, t0: usize, t1: usize) -> Result<Vec<u32>> {
        if t0 > t1 || t1 >= self.num_frames {
            return Err(Error::BadWindow { start: t0, end: t1, len: self.num_frames });
        }
        let n = self.height * self.width;
        let mut counts = vec![0u32; n];
        for t in t0..=t1 {
            for (p, c) in counts.iter_mut().enumerate() {
                *c += self.bit(p, t) as u32;
            }
        }
        Ok(counts)
    }

    /// Spike frame indices for one pixel, ascending.
    pub fn spike_times(&self, pixel: usize) -> Vec<usize> {
        (0..self.num_frames).filter(|&t| self.bit(pixel, t)).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(SPKS_HEADER_LEN + self.bits.len());
        out.extend_from_slice(&SPKS_MAGIC);
        out.extend_from_slice(&SPKS_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.num_frames as u32).to_le_bytes());
        out.extend_from_slice(&self.threshold.to_le_bytes());
        out.extend_from_slice(&self.readout_period_us.to_le_bytes());
        out.extend_from_slice(&self.bits);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<SpikeStream> {
        if bytes.len() < 4 {
            return Err(Error::Truncated {
                what: "SPKS magic",
                needed: 4,
                available: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != SPKS_MAGIC {
            return Err(Error::BadMagic { expected: SPKS_MAGIC, found: magic });
        }
        if bytes.len() < SPKS_HEADER_LEN {
            return Err(Error::Truncated {
                what: "SPKS header",
                needed: SPKS_HEADER_LEN,
                available: bytes.len(),
            });
        }
        let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u16_at(4);
        if version != SPKS_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        if u16_at(6) != 0 {
            return Err(Error::Malformed("reserved header field is non-zero".into()));
        }
        let (h, w, n) = (u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize);
        let (threshold, period) = (f32_at(20), f32_at(24));
        let needed = frame_bytes_for(h, w)
            .checked_mul(n)
            .ok_or_else(|| Error::Malformed("payload size overflows".into()))?;
        let payload = &bytes[SPKS_HEADER_LEN..];
        if payload.len() < needed {
            return Err(Error::Truncated {
                what: "SPKS payload",
                needed,
                available: payload.len(),
            });
        }
        if payload.len() > needed {
            return Err(Error::Malformed(format!(
                "{} trailing bytes after payload",
                payload.len() - needed
            )));
        }
        SpikeStream::from_packed(h, w, n, threshold, period, payload.to_vec())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<SpikeStream> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        SpikeStream::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stream(h: usize, w: usize, n: usize, seed: u64) -> SpikeStream {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frames: Vec<Vec<bool>> = (0..n)
            .map(|_| (0..h * w).map(|_| rng.random_bool(0.3)).collect())
            .collect();
        SpikeStream::from_frames(h, w, 1.0, 20.0, &frames).unwrap()
    }

    #[test]
    fn zero_stream_reads_zero() {
        let s = SpikeStream::zeros(3, 5, 4, 1.0).unwrap();
        for t in 0..4 {
            for y in 0..3 {
                for x in 0..5 {
                    assert!(!s.get_spike(x, y, t).unwrap());
                }
            }
        }
    }

    #[test]
    fn single_bit() {
        let mut frame = vec![false; 4];
        frame[0] = true;
        let s = SpikeStream::from_frames(2, 2, 1.0, 1.0, &[frame]).unwrap();
        assert!(s.get_spike(0, 0, 0).unwrap());
        assert!(!s.get_spike(1, 0, 0).unwrap());
    }

    #[test]
    fn bounds_errors_name_axis() {
        let s = SpikeStream::zeros(2, 3, 4, 1.0).unwrap();
        let axis = |r: Result<bool>| match r {
            Err(Error::OutOfBounds { axis, .. }) => axis,
            other => panic!("expected bounds error, got {other:?}"),
        };
        assert_eq!(axis(s.get_spike(3, 0, 0)), "x");
        assert_eq!(axis(s.get_spike(0, 2, 0)), "y");
        assert_eq!(axis(s.get_spike(0, 0, 4)), "t");
    }

    #[test]
    fn round_trip_4x4x8_exhaustive() {
        let s = random_stream(4, 4, 8, 7);
        let d = SpikeStream::decode(&s.encode()).unwrap();
        for t in 0..8 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(s.get_spike(x, y, t).unwrap(), d.get_spike(x, y, t).unwrap());
                }
            }
        }
    }

    #[test]
    fn encode_1x1x8_alternating() {
        let frames: Vec<Vec<bool>> = [1, 0, 1, 0, 1, 0, 1, 0].iter().map(|&b| vec![b == 1]).collect();
        let s = SpikeStream::from_frames(1, 1, 1.0, 1.0, &frames).unwrap();
        let bytes = s.encode();
        // one byte per frame since each frame pads to a byte boundary
        assert_eq!(bytes.len(), SPKS_HEADER_LEN + 8);
        assert_eq!(&bytes[SPKS_HEADER_LEN..], &[0x80, 0, 0x80, 0, 0x80, 0, 0x80, 0]);
    }

    #[test]
    fn encode_all_zero_2x2x1() {
        let s = SpikeStream::zeros(2, 2, 1, 1.0).unwrap();
        assert_eq!(&s.encode()[SPKS_HEADER_LEN..], &[0x00]);
    }

    #[test]
    fn decode_errors() {
        let mut bytes = random_stream(3, 3, 10, 1).encode();
        let mut bad = bytes.clone();
        bad[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(SpikeStream::decode(&bad), Err(Error::BadMagic { .. })));

        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(SpikeStream::decode(&v2), Err(Error::UnsupportedVersion(2))));

        // drop the last frame: header still says N=10
        let fb = 2;
        bytes.truncate(bytes.len() - fb);
        assert!(matches!(SpikeStream::decode(&bytes), Err(Error::Truncated { .. })));
        assert!(matches!(SpikeStream::decode(&bytes[..10]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn decode_rejects_nonzero_pad_bits() {
        let mut bytes = SpikeStream::zeros(1, 3, 1, 1.0).unwrap().encode();
        bytes[SPKS_HEADER_LEN] = 0x01;
        assert!(matches!(SpikeStream::decode(&bytes), Err(Error::Malformed(_))));
    }

    #[test]
    fn slice_window_cases() {
        let s = random_stream(4, 3, 12, 3);
        assert_eq!(s.slice_window(0, 11).unwrap(), s);
        assert_eq!(s.slice_window(5, 5).unwrap().num_frames(), 1);
        assert!(matches!(s.slice_window(6, 5), Err(Error::BadWindow { .. })));
        assert!(matches!(s.slice_window(0, 12), Err(Error::BadWindow { .. })));
    }

    #[test]
    fn spike_times_and_counts_agree() {
        let s = random_stream(3, 3, 20, 9);
        let counts = s.counts(0, 19).unwrap();
        for (p, c) in counts.iter().enumerate() {
            assert_eq!(s.spike_times(p).len(), *c as usize);
        }
    }

    proptest! {
        #[test]
        fn round_trip(h in 1usize..9, w in 1usize..9, n in 1usize..17, seed: u64) {
            let s = random_stream(h, w, n, seed);
            prop_assert_eq!(SpikeStream::decode(&s.encode()).unwrap(), s);
        }

        #[test]
        fn partition_conserves_spikes(n in 2usize..20, k_frac in 0.0f64..1.0, seed: u64) {
            let s = random_stream(5, 3, n, seed);
            let k = ((n - 2) as f64 * k_frac) as usize;
            let a = s.slice_window(0, k).unwrap();
            let b = s.slice_window(k + 1, n - 1).unwrap();
            prop_assert_eq!(a.popcount() + b.popcount(), s.popcount());
            let mut joined = a.packed().to_vec();
            joined.extend_from_slice(b.packed());
            prop_assert_eq!(joined.as_slice(), s.packed());
        }
    }
}
