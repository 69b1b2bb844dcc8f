//! `.dbcc` container: a fixed little-endian header followed by one range-coded
//! payload. Also the reflect padding that brings images to a multiple of 64.

use crate::config::Metric;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"DBCC";
pub const VERSION: u8 = 1;
/// Header size in bytes.
pub const HEADER_LEN: usize = 30;
/// `lambda_index` value for a lambda outside the preset list.
pub const CUSTOM_LAMBDA: u8 = 255;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u8,
    pub metric: Metric,
    pub lambda_index: u8,
    pub groups: u8,
    pub m: u16,
    pub n: u16,
    pub hyper_channels: u16,
    pub width: u32,
    pub height: u32,
    pub payload_len: u64,
}

impl Header {
    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..4].copy_from_slice(&MAGIC);
        b[4] = self.version;
        b[5] = self.metric.code();
        b[6] = self.lambda_index;
        b[7] = self.groups;
        b[8..10].copy_from_slice(&self.m.to_le_bytes());
        b[10..12].copy_from_slice(&self.n.to_le_bytes());
        b[12..14].copy_from_slice(&self.hyper_channels.to_le_bytes());
        b[14..18].copy_from_slice(&self.width.to_le_bytes());
        b[18..22].copy_from_slice(&self.height.to_le_bytes());
        b[22..30].copy_from_slice(&self.payload_len.to_le_bytes());
        b
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < HEADER_LEN {
            return Err(Error::Format(format!("header needs {HEADER_LEN} bytes, got {}", b.len())));
        }
        if b[0..4] != MAGIC {
            return Err(Error::Format("bad magic, not a .dbcc file".into()));
        }
        if b[4] != VERSION {
            return Err(Error::Format(format!("unsupported version {}", b[4])));
        }
        let u16_at = |i: usize| u16::from_le_bytes([b[i], b[i + 1]]);
        let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().expect("4 bytes"));
        let h = Self {
            version: b[4],
            metric: Metric::from_code(b[5])?,
            lambda_index: b[6],
            groups: b[7],
            m: u16_at(8),
            n: u16_at(10),
            hyper_channels: u16_at(12),
            width: u32_at(14),
            height: u32_at(18),
            payload_len: u64::from_le_bytes(b[22..30].try_into().expect("8 bytes")),
        };
        if h.width == 0 || h.height == 0 {
            return Err(Error::Format("image dims must be at least 1".into()));
        }
        Ok(h)
    }

    /// Payload bits per original pixel.
    pub fn bpp(&self) -> f64 {
        8.0 * self.payload_len as f64 / (self.width as f64 * self.height as f64)
    }
}

/// Header then payload, no gaps.
pub fn pack(header: &Header, payload: &[u8]) -> Result<Vec<u8>> {
    if header.payload_len != payload.len() as u64 {
        return Err(Error::Contract(format!(
            "header declares {} payload bytes, got {}",
            header.payload_len,
            payload.len()
        )));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    out.extend_from_slice(&header.to_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

pub fn unpack(bytes: &[u8]) -> Result<(Header, Vec<u8>)> {
    let h = Header::from_bytes(bytes)?;
    let body = &bytes[HEADER_LEN..];
    if body.len() as u64 != h.payload_len {
        return Err(Error::Format(format!(
            "header declares {} payload bytes, file has {}",
            h.payload_len,
            body.len()
        )));
    }
    Ok((h, body.to_vec()))
}

/// Smallest multiple of `m` not below `v`.
pub fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Mirror index without repeating the edge sample; periodic beyond one
/// reflection.
fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let j = i % period;
    if j < n {
        j
    } else {
        period - j
    }
}

/// Reflect-pads an image `[C,H,W]` or `[C,1,H,W]` on the right and bottom to
/// multiples of `m`. Returns the padded image (same rank) and the original
/// `(height, width)`.
pub fn pad_to_multiple<T: Scalar>(x: &Tensor<T>, m: usize) -> Result<(Tensor<T>, (usize, usize))> {
    let d = x.dims4()?;
    if d.b != 1 || m == 0 {
        return Err(Error::Contract("padding works on single images with m > 0".into()));
    }
    let (hp, wp) = (round_up(d.h, m), round_up(d.w, m));
    let mut data = Vec::with_capacity(d.c * hp * wp);
    for c in 0..d.c {
        let plane = &x.data()[c * d.h * d.w..(c + 1) * d.h * d.w];
        for y in 0..hp {
            let row = &plane[reflect(y, d.h) * d.w..(reflect(y, d.h) + 1) * d.w];
            data.extend_from_slice(row);
            data.extend((d.w..wp).map(|xx| row[reflect(xx, d.w)]));
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = hp;
    shape[r - 1] = wp;
    Ok((Tensor::new(shape, data)?, (d.h, d.w)))
}

/// Keeps the top-left `height x width` region.
pub fn crop<T: Scalar>(x: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let d = x.dims4()?;
    if d.b != 1 || height > d.h || width > d.w {
        return Err(Error::Contract(format!(
            "cannot crop {}x{} to {}x{}",
            d.h, d.w, height, width
        )));
    }
    let mut data = Vec::with_capacity(d.c * height * width);
    for c in 0..d.c {
        for y in 0..height {
            let off = (c * d.h + y) * d.w;
            data.extend_from_slice(&x.data()[off..off + width]);
        }
    }
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = height;
    shape[r - 1] = width;
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn header(w: u32, h: u32, len: u64) -> Header {
        Header {
            version: VERSION,
            metric: Metric::Mse,
            lambda_index: 3,
            groups: 5,
            m: 320,
            n: 128,
            hyper_channels: 128,
            width: w,
            height: h,
            payload_len: len,
        }
    }

    #[test]
    fn header_layout() {
        let h = header(768, 512, 3);
        let b = pack(&h, &[7, 8, 9]).unwrap();
        assert_eq!(b.len(), HEADER_LEN + 3);
        assert_eq!(&b[0..4], b"DBCC");
        assert_eq!(u32::from_le_bytes(b[14..18].try_into().unwrap()), 768);
        assert_eq!(u32::from_le_bytes(b[18..22].try_into().unwrap()), 512);
        assert_eq!(&b[HEADER_LEN..], &[7, 8, 9]);
        assert_eq!(unpack(&b).unwrap(), (h, vec![7, 8, 9]));
    }

    #[test]
    fn rejects_bad_input() {
        let mut b = pack(&header(4, 4, 1), &[0]).unwrap();
        b[0] = b'X';
        assert!(matches!(unpack(&b), Err(Error::Format(_))));
        let mut b = pack(&header(4, 4, 1), &[0]).unwrap();
        b[4] = 9;
        assert!(matches!(unpack(&b), Err(Error::Format(_))));
        let b = pack(&header(4, 4, 2), &[0, 1]).unwrap();
        assert!(matches!(unpack(&b[..b.len() - 1]), Err(Error::Format(_))));
        assert!(matches!(unpack(&pack(&header(0, 4, 0), &[]).unwrap()), Err(Error::Format(_))));
        assert!(pack(&header(4, 4, 5), &[0]).is_err());
    }

    #[test]
    fn bpp_definition() {
        let h = header(768, 512, 12345);
        assert!((h.bpp() - 8.0 * 12345.0 / (768.0 * 512.0)).abs() < 1e-12);
    }

    #[test]
    fn padding_arithmetic_and_inverse() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f32>::uniform(&[3, 333, 500], 0.0, 1.0, &mut rng);
        let (p, (h, w)) = pad_to_multiple(&x, 64).unwrap();
        assert_eq!(p.shape(), &[3, 384, 512]);
        assert_eq!((h, w), (333, 500));
        assert_eq!(crop(&p, h, w).unwrap(), x);
        let x = Tensor::<f32>::zeros(&[3, 1, 512, 768]);
        assert_eq!(pad_to_multiple(&x, 64).unwrap().0, x);
    }

    #[test]
    fn reflect_mirrors_without_edge_repeat() {
        let x = Tensor::<f64>::new(vec![1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let (p, _) = pad_to_multiple(&x, 8).unwrap();
        assert_eq!(&p.data()[..8], &[1.0, 2.0, 3.0, 2.0, 1.0, 2.0, 3.0, 2.0]);
        let x = Tensor::<f64>::new(vec![1, 1, 1], vec![5.0]).unwrap();
        let (p, _) = pad_to_multiple(&x, 4).unwrap();
        assert!(p.data().iter().all(|&v| v == 5.0));
    }
}
