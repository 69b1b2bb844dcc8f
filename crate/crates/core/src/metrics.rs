//! Image quality and rate-distortion metrics.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::autodiff::{Backend, Eager};
use crate::error::{shape_err, Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
/// MS-SSIM dB reported for a perfect score.
pub const MSSSIM_DB_CAP: f64 = 100.0;

pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Smallest side accepted by [`ms_ssim`]: the coarsest of the five scales
/// must still hold one full window.
pub const MSSSIM_MIN_SIDE: usize = SSIM_WINDOW << (MSSSIM_WEIGHTS.len() - 1);

pub fn mse<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    x.same_shape(y)?;
    if x.is_empty() {
        return Err(shape_err!("empty image"));
    }
    let s: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| (a.f64() - b.f64()).powi(2))
        .sum();
    Ok(s / x.len() as f64)
}

/// PSNR in dB for images scaled to `[0,1]`, capped at [`PSNR_CAP`].
pub fn psnr<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (-10.0 * mse.log10()).min(PSNR_CAP)
    }
}

/// `-10 log10(1 - v)`, capped at [`MSSSIM_DB_CAP`].
pub fn msssim_db(v: f64) -> f64 {
    if v >= 1.0 {
        MSSSIM_DB_CAP
    } else {
        (-10.0 * (1.0 - v).log10()).min(MSSSIM_DB_CAP)
    }
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

fn window<T: Scalar>() -> Tensor<T> {
    let g = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    Tensor::from_fn(&[1, 1, SSIM_WINDOW, SSIM_WINDOW], |i| {
        T::cst(g[i / SSIM_WINDOW] * g[i % SSIM_WINDOW])
    })
}

/// Stacks same-shaped `[1,n,H,W]` planes along the batch axis.
fn stack<T: Scalar, B: Backend<T>>(b: &mut B, parts: &[&B::Var]) -> Result<B::Var> {
    let shape = b.value(parts[0]).shape().to_vec();
    let cat = b.concat(parts)?;
    b.reshape(&cat, &[1, parts.len() * shape[1], shape[2], shape[3]])
}

/// Splits a `[1,k*n,H,W]` tensor back into `k` planes of `[1,n,H,W]`.
fn unstack<T: Scalar, B: Backend<T>>(b: &mut B, v: &B::Var, k: usize) -> Result<Vec<B::Var>> {
    let s = b.value(v).shape().to_vec();
    let n = s[1] / k;
    let r = b.reshape(v, &[k, n, s[2], s[3]])?;
    (0..k)
        .map(|i| {
            let p = b.slice_channels(&r, i, i + 1)?;
            b.reshape(&p, &[1, n, s[2], s[3]])
        })
        .collect()
}

/// Per-plane `(mean luminance term, mean contrast-structure term)`, each
/// `[1,n,1,1]`.
fn ssim_terms<T: Scalar, B: Backend<T>>(b: &mut B, x: &B::Var, y: &B::Var, win: &B::Var) -> Result<(B::Var, B::Var)> {
    let (c1, c2) = (K1 * K1, K2 * K2);
    let xx = b.mul(x, x)?;
    let yy = b.mul(y, y)?;
    let xy = b.mul(x, y)?;
    let all = stack(b, &[x, y, &xx, &yy, &xy])?;
    let f = b.conv2d(&all, win, 1, 0)?;
    let m = unstack(b, &f, 5)?;
    let (mx, my) = (&m[0], &m[1]);
    let mx2 = b.mul(mx, mx)?;
    let my2 = b.mul(my, my)?;
    let mxy = b.mul(mx, my)?;
    let sx = b.sub(&m[2], &mx2)?;
    let sy = b.sub(&m[3], &my2)?;
    let sxy = b.sub(&m[4], &mxy)?;

    let num = b.scale(&sxy, 2.0)?;
    let num = b.add_scalar(&num, c2)?;
    let den = b.add(&sx, &sy)?;
    let den = b.add_scalar(&den, c2)?;
    let cs = b.div(&num, &den)?;

    let num = b.scale(&mxy, 2.0)?;
    let num = b.add_scalar(&num, c1)?;
    let den = b.add(&mx2, &my2)?;
    let den = b.add_scalar(&den, c1)?;
    let l = b.div(&num, &den)?;

    let ssim = b.mul(&l, &cs)?;
    Ok((b.spatial_mean(&ssim)?, b.spatial_mean(&cs)?))
}

/// MS-SSIM of two `[C,B,H,W]` (or `[C,H,W]`) batches with values in `[0,1]`,
/// averaged over every channel of every image. Differentiable on a
/// [`crate::Graph`].
pub fn ms_ssim_var<T: Scalar, B: Backend<T>>(b: &mut B, x: &B::Var, y: &B::Var) -> Result<B::Var> {
    let (sx, sy) = (b.value(x).shape().to_vec(), b.value(y).shape().to_vec());
    if sx != sy {
        return Err(shape_err!("ms_ssim inputs differ: {sx:?} vs {sy:?}"));
    }
    let d = b.value(x).dims4()?;
    if d.h.min(d.w) < MSSSIM_MIN_SIDE {
        return Err(shape_err!(
            "ms_ssim needs images of at least {MSSSIM_MIN_SIDE}x{MSSSIM_MIN_SIDE}, got {}x{}",
            d.h,
            d.w
        ));
    }
    let planes = d.c * d.b;
    let win = b.constant(window());
    let pool = b.constant(Tensor::full(&[1, 1, 2, 2], T::cst(0.25)));
    let mut x = b.reshape(x, &[1, planes, d.h, d.w])?;
    let mut y = b.reshape(y, &[1, planes, d.h, d.w])?;
    let mut acc: Option<B::Var> = None;
    for (j, &w) in MSSSIM_WEIGHTS.iter().enumerate() {
        let (ssim, cs) = ssim_terms(b, &x, &y, &win)?;
        let last = j + 1 == MSSSIM_WEIGHTS.len();
        let term = if last { ssim } else { cs };
        // Negative means would make the power undefined.
        let term = b.clamp(&term, 1e-10, f64::INFINITY)?;
        let lg = b.ln(&term)?;
        let lg = b.scale(&lg, w)?;
        acc = Some(match acc {
            Some(a) => b.add(&a, &lg)?,
            None => lg,
        });
        if !last {
            let both = stack(b, &[&x, &y])?;
            let p = b.conv2d(&both, &pool, 2, 0)?;
            let mut halves = unstack(b, &p, 2)?;
            y = halves.pop().expect("two halves");
            x = halves.pop().expect("two halves");
        }
    }
    let per_plane = b.exp(&acc.expect("at least one scale"))?;
    let total = b.sum(&per_plane)?;
    b.scale(&total, 1.0 / planes as f64)
}

/// MS-SSIM of two images (`[3,H,W]` or batched), computed in 64-bit.
pub fn ms_ssim<T: Scalar>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    x.same_shape(y)?;
    let store = ParamStore::<f64>::new();
    let mut e = Eager::new(&store);
    let xv = e.constant(x.cast());
    let yv = e.constant(y.cast());
    let v = ms_ssim_var(&mut e, &xv, &yv)?;
    Ok(v.data()[0])
}

/// A point on a rate-distortion curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    pub bpp: f64,
    pub quality: f64,
}

impl RdPoint {
    pub fn new(bpp: f64, quality: f64) -> Result<Self> {
        if !(bpp > 0.0 && bpp.is_finite()) || !quality.is_finite() {
            return Err(Error::Data(format!("invalid RD point ({bpp}, {quality})")));
        }
        Ok(Self { bpp, quality })
    }
}

/// Least-squares cubic through `(q, log10 bpp)`, with `q` normalized by
/// `(q - shift) / span` for conditioning. Returns coefficients low to high.
fn cubic_fit(points: &[RdPoint], shift: f64, span: f64) -> Result<[f64; 4]> {
    let n = points.len();
    let a = DMatrix::from_fn(n, 4, |r, c| ((points[r].quality - shift) / span).powi(c as i32));
    let rhs = DVector::from_iterator(n, points.iter().map(|p| p.bpp.log10()));
    let sol = a
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::Data(format!("cubic fit failed: {e}")))?;
    Ok([sol[0], sol[1], sol[2], sol[3]])
}

fn integral(c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let f = |t: f64| c[0] * t + c[1] * t * t / 2.0 + c[2] * t.powi(3) / 3.0 + c[3] * t.powi(4) / 4.0;
    f(hi) - f(lo)
}

/// Bjøntegaard delta rate of `test` against `anchor` in percent (negative
/// means `test` needs fewer bits at equal quality).
pub fn bd_rate(anchor: &[RdPoint], test: &[RdPoint]) -> Result<f64> {
    if anchor.len() < 4 || test.len() < 4 {
        return Err(Error::Data(format!(
            "BD-rate needs at least 4 points per curve, got {} and {}",
            anchor.len(),
            test.len()
        )));
    }
    for p in anchor.iter().chain(test) {
        RdPoint::new(p.bpp, p.quality)?;
    }
    let range = |v: &[RdPoint]| {
        v.iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.quality), hi.max(p.quality)))
    };
    let (alo, ahi) = range(anchor);
    let (tlo, thi) = range(test);
    let (lo, hi) = (alo.max(tlo), ahi.min(thi));
    if hi <= lo {
        return Err(Error::Data(format!(
            "quality ranges [{alo}, {ahi}] and [{tlo}, {thi}] do not overlap"
        )));
    }
    let shift = (alo.min(tlo) + ahi.max(thi)) / 2.0;
    let span = ((ahi.max(thi) - alo.min(tlo)) / 2.0).max(f64::MIN_POSITIVE);
    let ca = cubic_fit(anchor, shift, span)?;
    let ct = cubic_fit(test, shift, span)?;
    let (nlo, nhi) = ((lo - shift) / span, (hi - shift) / span);
    let avg = (integral(&ct, nlo, nhi) - integral(&ca, nlo, nhi)) / (nhi - nlo);
    Ok(100.0 * (10f64.powf(avg) - 1.0))
}

/// One row of an RD results table.
#[derive(Clone, Debug, PartialEq)]
pub struct RdRow {
    pub codec: String,
    pub image: String,
    pub bpp: f64,
    pub psnr: f64,
    pub msssim_db: Option<f64>,
}

pub const RD_CSV_HEADER: &str = "codec,image,bpp,psnr,msssim_db";

fn csv_field(s: &str) -> Result<&str> {
    if s.contains([',', '"', '\n']) {
        return Err(Error::Data(format!("CSV field {s:?} contains a delimiter")));
    }
    Ok(s)
}

pub fn rd_rows_to_csv(rows: &[RdRow]) -> Result<String> {
    let mut out = format!("{RD_CSV_HEADER}\n");
    for r in rows {
        let ms = r.msssim_db.map(|v| format!("{v:.6}")).unwrap_or_default();
        writeln!(
            out,
            "{},{},{:.6},{:.6},{}",
            csv_field(&r.codec)?,
            csv_field(&r.image)?,
            r.bpp,
            r.psnr,
            ms
        )
        .expect("write to string");
    }
    Ok(out)
}

pub fn rd_rows_from_csv(text: &str) -> Result<Vec<RdRow>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    match lines.next() {
        Some(h) if h.trim() == RD_CSV_HEADER => {}
        other => return Err(Error::Format(format!("expected CSV header {RD_CSV_HEADER:?}, got {other:?}"))),
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 5 {
                return Err(Error::Format(format!("row {}: expected 5 fields", i + 1)));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Format(format!("row {}: bad number {s:?}", i + 1)))
            };
            Ok(RdRow {
                codec: f[0].to_string(),
                image: f[1].to_string(),
                bpp: num(f[2])?,
                psnr: num(f[3])?,
                msssim_db: if f[4].is_empty() { None } else { Some(num(f[4])?) },
            })
        })
        .collect()
}

pub fn write_rd_csv(path: &Path, rows: &[RdRow]) -> Result<()> {
    std::fs::write(path, rd_rows_to_csv(rows)?)?;
    Ok(())
}

pub fn read_rd_csv(path: &Path) -> Result<Vec<RdRow>> {
    rd_rows_from_csv(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noisy_pair(h: usize, w: usize, seed: u64) -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::from_fn(&[3, h, w], |i| {
            let (y, xx) = ((i / w) % h, i % w);
            0.5 + 0.3 * ((xx as f64 * 0.11).sin() * (y as f64 * 0.07).cos())
        });
        let y = Tensor::from_fn(x.shape(), |i| (x.data()[i] + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0));
        (x, y)
    }

    #[test]
    fn psnr_values() {
        let x = Tensor::<f64>::full(&[3, 4, 4], 0.5);
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP);
        let y = x.map(|v| v + 1.0 / 255.0);
        assert!((psnr(&x, &y).unwrap() - 20.0 * 255f64.log10()).abs() < 1e-9);
        let a = Tensor::<f64>::zeros(&[3, 2, 2]);
        let b = Tensor::<f64>::full(&[3, 2, 2], 1.0);
        assert!(psnr(&a, &b).unwrap().abs() < 1e-12);
    }

    #[test]
    fn msssim_db_values() {
        assert!((msssim_db(0.9) - 10.0).abs() < 1e-12);
        let v = 1.0 - 10f64.powf(-1.267);
        assert!((msssim_db(v) - 12.67).abs() < 1e-9);
        assert_eq!(msssim_db(1.0), MSSSIM_DB_CAP);
        assert!(msssim_db(0.5) < msssim_db(0.6));
    }

    #[test]
    fn ms_ssim_identity_symmetry_and_size() {
        let (x, y) = noisy_pair(176, 180, 1);
        assert!((ms_ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let a = ms_ssim(&x, &y).unwrap();
        let b = ms_ssim(&y, &x).unwrap();
        assert!(a > 0.0 && a < 1.0);
        assert!((a - b).abs() < 1e-12);
        let small = Tensor::<f64>::zeros(&[3, 175, 200]);
        let err = ms_ssim(&small, &small).unwrap_err();
        assert!(err.to_string().contains("176"), "{err}");
    }

    #[test]
    fn ms_ssim_channel_permutation_invariant() {
        let (x, y) = noisy_pair(176, 176, 2);
        let perm = |t: &Tensor<f64>| {
            let p = 176 * 176;
            Tensor::from_fn(&[3, 176, 176], |i| t.data()[((i / p + 1) % 3) * p + i % p])
        };
        let a = ms_ssim(&x, &y).unwrap();
        let b = ms_ssim(&perm(&x), &perm(&y)).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ms_ssim_gradient_matches_finite_difference() {
        let (x, y) = noisy_pair(176, 176, 3);
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let xv = g.input(x.clone().reshape(&[3, 1, 176, 176]).unwrap());
        let yv = g.constant(y.clone().reshape(&[3, 1, 176, 176]).unwrap());
        let s = ms_ssim_var(&mut g, &xv, &yv).unwrap();
        let grads = g.backward(s).unwrap();
        let gx = grads.wrt(xv).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let i = rng.gen_range(0..x.len());
            let h = 1e-5;
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            let fd = (ms_ssim(&xp, &y).unwrap() - ms_ssim(&xm, &y).unwrap()) / (2.0 * h);
            let an = gx.data()[i];
            assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()) + 1e-9, "{fd} vs {an}");
        }
    }

    fn curve() -> Vec<RdPoint> {
        [(0.1, 28.0), (0.25, 30.5), (0.5, 33.0), (0.9, 35.6), (1.4, 37.9)]
            .iter()
            .map(|&(b, q)| RdPoint::new(b, q).unwrap())
            .collect()
    }

    #[test]
    fn bd_rate_closed_cases() {
        let a = curve();
        assert!(bd_rate(&a, &a).unwrap().abs() < 1e-9);
        let shifted: Vec<_> = a.iter().map(|p| RdPoint::new(p.bpp * 1.1, p.quality).unwrap()).collect();
        assert!((bd_rate(&a, &shifted).unwrap() - 10.0).abs() < 1e-6);
        let better: Vec<_> = a.iter().map(|p| RdPoint::new(p.bpp, p.quality + 0.5).unwrap()).collect();
        assert!(bd_rate(&a, &better).unwrap() < 0.0);
    }

    #[test]
    fn bd_rate_reciprocity() {
        let a = curve();
        let b: Vec<_> = a
            .iter()
            .enumerate()
            .map(|(i, p)| RdPoint::new(p.bpp * (0.85 + 0.02 * i as f64), p.quality + 0.1).unwrap())
            .collect();
        let ab = bd_rate(&a, &b).unwrap();
        let ba = bd_rate(&b, &a).unwrap();
        assert!((ab + ba / (1.0 + ba / 100.0)).abs() < 0.01, "{ab} {ba}");
    }

    #[test]
    fn bd_rate_errors() {
        let a = curve();
        assert!(bd_rate(&a[..3], &a).is_err());
        let far: Vec<_> = a.iter().map(|p| RdPoint::new(p.bpp, p.quality + 50.0).unwrap()).collect();
        assert!(bd_rate(&a, &far).is_err());
    }

    #[test]
    fn rd_csv_round_trip() {
        let rows = vec![
            RdRow {
                codec: "dbcc".into(),
                image: "a.png".into(),
                bpp: 0.5,
                psnr: 31.25,
                msssim_db: Some(12.5),
            },
            RdRow {
                codec: "dbcc".into(),
                image: "small.png".into(),
                bpp: 0.75,
                psnr: 29.0,
                msssim_db: None,
            },
        ];
        let text = rd_rows_to_csv(&rows).unwrap();
        assert!(text.starts_with(RD_CSV_HEADER));
        assert_eq!(rd_rows_from_csv(&text).unwrap(), rows);
        assert!(rd_rows_from_csv("x,y\n").is_err());
    }
}
