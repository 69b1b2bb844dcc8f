//! Whole-image compression and decompression.
//!
//! Payload order: every element of `z_hat` (channel-major, raster order, one
//! learned table per channel), then the slices of `y1_hat`, then the slices of
//! `y2_hat`, all in one range-coded stream.

use crate::bitstream::{self, crop, pad_to_multiple, Header, CUSTOM_LAMBDA, VERSION};
use crate::codec::{CodecNet, LatentBundle, SPATIAL_MULTIPLE};
use crate::coder::{RangeDecoder, RangeEncoder};
use crate::config::lambda_index;
use crate::entropy::{gaussian_tables, QuantizedCdf, ScaleTable};
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Result of [`compress`].
#[derive(Clone, Debug)]
pub struct Compressed<T> {
    /// Complete `.dbcc` file.
    pub bytes: Vec<u8>,
    pub header: Header,
    /// Encoder-side latents of the padded image.
    pub latents: LatentBundle<T>,
}

impl<T> Compressed<T> {
    pub fn payload_bits(&self) -> u64 {
        8 * self.header.payload_len
    }

    pub fn bpp(&self) -> f64 {
        self.header.bpp()
    }
}

/// Result of [`decompress`].
#[derive(Clone, Debug)]
pub struct Decompressed<T> {
    /// `[3,H,W]` in `[0,1]` at the original size.
    pub image: Tensor<T>,
    pub header: Header,
    pub y1_hat: Tensor<T>,
    pub y2_hat: Option<Tensor<T>>,
    pub z_hat: Tensor<T>,
}

fn as_batch<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let d = image.dims4()?;
    if d.c != 3 || d.b != 1 {
        return Err(shape_err!("expected a single RGB image, got {:?}", image.shape()));
    }
    image.clone().reshape(&[3, 1, d.h, d.w])
}

fn header_for<T: Scalar>(net: &CodecNet<T>, height: usize, width: usize, payload_len: usize) -> Result<Header> {
    let c = &net.config;
    let dim = |v: usize, what: &str| u32::try_from(v).map_err(|_| Error::Contract(format!("{what} {v} too large")));
    Ok(Header {
        version: VERSION,
        metric: c.metric,
        lambda_index: lambda_index(c.metric, c.lambda).unwrap_or(CUSTOM_LAMBDA),
        groups: c.groups as u8,
        m: c.m as u16,
        n: c.n as u16,
        hyper_channels: c.hyper_channels as u16,
        width: dim(width, "width")?,
        height: dim(height, "height")?,
        payload_len: payload_len as u64,
    })
}

/// Errors naming the first field in which the bitstream and model disagree.
pub fn check_compatible<T: Scalar>(net: &CodecNet<T>, header: &Header) -> Result<()> {
    let expect = header_for(net, 1, 1, 0)?;
    let fields: [(&str, u64, u64); 6] = [
        ("metric", header.metric.code() as u64, expect.metric.code() as u64),
        ("lambda index", header.lambda_index as u64, expect.lambda_index as u64),
        ("groups", header.groups as u64, expect.groups as u64),
        ("M", header.m as u64, expect.m as u64),
        ("N", header.n as u64, expect.n as u64),
        ("hyper channels", header.hyper_channels as u64, expect.hyper_channels as u64),
    ];
    for (name, got, want) in fields {
        if got != want {
            return Err(Error::Config(format!(
                "bitstream {name} is {got} but the model has {want}"
            )));
        }
    }
    Ok(())
}

fn z_channel_len<T: Scalar>(z: &Tensor<T>) -> usize {
    z.len() / z.channels().max(1)
}

fn to_symbol<T: Scalar>(v: T) -> i64 {
    v.f64() as i64
}

/// Range-codes `z_hat` and then the slices of `y1` (and of `y2` when
/// `with_y2`) in decoding order. Quantization is identical either way.
fn encode_latents<T: Scalar>(net: &CodecNet<T>, padded: &Tensor<T>, with_y2: bool) -> Result<(Vec<u8>, LatentBundle<T>)> {
    let (y1, y2, z, z_hat) = net.analyze(padded)?;

    let mut enc = RangeEncoder::new();
    let prior_tables = net.prior.tables(&net.store)?;
    let per = z_channel_len(&z_hat);
    for (i, &v) in z_hat.data().iter().enumerate() {
        enc.encode(&prior_tables[i / per], to_symbol(v))?;
    }

    let ctx = net.context(&z_hat)?;
    let layout = net.layout();
    let scales = ScaleTable::default();
    let tables = gaussian_tables();
    let (y1_hat, y2_hat) = net.walk_slices(&ctx, |s, mean, scale| {
        let src = if s.latent == 0 { &y1 } else { y2.as_ref().expect("two-branch walk") };
        let r = layout.range(s.index);
        let ys = src.slice_channels(r.start, r.end)?;
        let coded = s.latent == 0 || with_y2;
        let mut out = Vec::with_capacity(ys.len());
        for ((&v, &m), &sd) in ys.data().iter().zip(mean.data()).zip(scale.data()) {
            let q = (v - m).round();
            if coded {
                enc.encode(&tables[scales.index_of(sd.f64())], to_symbol(q))?;
            }
            out.push(q + m);
        }
        Tensor::new(ys.shape().to_vec(), out)
    })?;
    let bundle = LatentBundle {
        y1,
        y2,
        z,
        y1_hat,
        y2_hat,
        z_hat,
    };
    Ok((enc.finish(), bundle))
}

/// Compresses a `[3,H,W]` (or `[3,1,H,W]`) image with values in `[0,1]`.
pub fn compress<T: Scalar>(net: &CodecNet<T>, image: &Tensor<T>) -> Result<Compressed<T>> {
    let x = as_batch(image)?;
    let (padded, (h, w)) = pad_to_multiple(&x, SPATIAL_MULTIPLE)?;
    let (payload, latents) = encode_latents(net, &padded, true)?;
    let header = header_for(net, h, w, payload.len())?;
    let bytes = bitstream::pack(&header, &payload)?;
    Ok(Compressed {
        bytes,
        header,
        latents,
    })
}

/// Payload holding only `z_hat` and `y1_hat`, coded exactly as [`compress`]
/// codes them. Two models that agree on everything feeding the first
/// latent produce identical bytes here.
pub fn y1_path_bytes<T: Scalar>(net: &CodecNet<T>, image: &Tensor<T>) -> Result<Vec<u8>> {
    let x = as_batch(image)?;
    let (padded, _) = pad_to_multiple(&x, SPATIAL_MULTIPLE)?;
    Ok(encode_latents(net, &padded, false)?.0)
}

/// Inverse of [`compress`].
pub fn decompress<T: Scalar>(net: &CodecNet<T>, bytes: &[u8]) -> Result<Decompressed<T>> {
    let (header, payload) = bitstream::unpack(bytes)?;
    check_compatible(net, &header)?;
    let (h, w) = (header.height as usize, header.width as usize);
    let hp = bitstream::round_up(h, SPATIAL_MULTIPLE);
    let wp = bitstream::round_up(w, SPATIAL_MULTIPLE);

    let mut dec = RangeDecoder::new(&payload)?;
    let prior_tables: Vec<QuantizedCdf> = net.prior.tables(&net.store)?;
    let hc = net.config.hyper_channels;
    let zshape = [hc, 1, hp / SPATIAL_MULTIPLE, wp / SPATIAL_MULTIPLE];
    let per = zshape[2] * zshape[3];
    let mut zdata = Vec::with_capacity(hc * per);
    for i in 0..hc * per {
        zdata.push(T::cst(dec.decode(&prior_tables[i / per])? as f64));
    }
    let z_hat = Tensor::new(zshape.to_vec(), zdata)?;

    let ctx = net.context(&z_hat)?;
    let scales = ScaleTable::default();
    let tables = gaussian_tables();
    let (y1_hat, y2_hat) = net.walk_slices(&ctx, |_, mean, scale| {
        let mut out = Vec::with_capacity(mean.len());
        for (&m, &sd) in mean.data().iter().zip(scale.data()) {
            let s = dec.decode(&tables[scales.index_of(sd.f64())])?;
            out.push(T::cst(s as f64) + m);
        }
        Tensor::new(mean.shape().to_vec(), out)
    })?;
    dec.finish()?;

    let x = net.reconstruct(&y1_hat, y2_hat.as_ref())?;
    let x = crop(&x, h, w)?.reshape(&[3, h, w])?;
    Ok(Decompressed {
        image: x,
        header,
        y1_hat,
        y2_hat,
        z_hat,
    })
}

/// Clamped reconstruction of a padded image through the code-mode path
/// without entropy coding, cropped back to `[3,H,W]`.
pub fn roundtrip_eval<T: Scalar>(net: &CodecNet<T>, image: &Tensor<T>) -> Result<(Tensor<T>, LatentBundle<T>)> {
    let x = as_batch(image)?;
    let (padded, (h, w)) = pad_to_multiple(&x, SPATIAL_MULTIPLE)?;
    let bundle = net.quantize_image(&padded)?;
    let xh = net.reconstruct(&bundle.y1_hat, bundle.y2_hat.as_ref())?;
    Ok((crop(&xh, h, w)?.reshape(&[3, h, w])?, bundle))
}

/// Estimated bits `(y, z)` of an image under the code-mode path.
pub fn estimate_bits<T: Scalar>(net: &CodecNet<T>, image: &Tensor<T>) -> Result<(f64, f64)> {
    let (_, bundle) = roundtrip_eval(net, image)?;
    net.estimate_rate(&bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Metric, ModelConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> CodecNet<f32> {
        let cfg = ModelConfig {
            n: 8,
            m: 10,
            groups: 5,
            use_ci: true,
            use_tb: true,
            hyper_channels: 4,
            lambda: 0.015,
            metric: Metric::Mse,
        };
        CodecNet::new(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    fn smooth(h: usize, w: usize) -> Tensor<f32> {
        Tensor::from_fn(&[3, h, w], |i| {
            let (c, y, x) = (i / (h * w), (i / w) % h, i % w);
            0.5 + 0.4 * ((x as f32 * 0.05 + c as f32).sin() * (y as f32 * 0.07).cos())
        })
    }

    #[test]
    fn round_trip_is_lossless_on_latents() {
        let net = tiny();
        let img = smooth(70, 90);
        let c = compress(&net, &img).unwrap();
        assert_eq!((c.header.width, c.header.height), (90, 70));
        let d = decompress(&net, &c.bytes).unwrap();
        assert_eq!(d.image.shape(), &[3, 70, 90]);
        assert_eq!(d.z_hat, c.latents.z_hat);
        assert_eq!(d.y1_hat, c.latents.y1_hat);
        assert_eq!(d.y2_hat, c.latents.y2_hat);
        let (eval, _) = roundtrip_eval(&net, &img).unwrap();
        assert_eq!(eval, d.image);
    }

    #[test]
    fn mismatched_model_is_a_config_error() {
        let net = tiny();
        let c = compress(&net, &smooth(64, 64)).unwrap();
        let mut other = net.clone();
        other.config.lambda = 0.03;
        let err = decompress(&other, &c.bytes).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("lambda")), "{err}");
    }

    #[test]
    fn corrupted_payload_detected() {
        let net = tiny();
        let img = smooth(64, 64);
        let c = compress(&net, &img).unwrap();
        let mut bad = c.bytes.clone();
        let n = bad.len();
        bad.truncate(n - 3);
        assert!(decompress(&net, &bad).is_err());
    }
}
