//! Seeded procedural RGB scenes: smooth backgrounds with overlapping shapes,
//! a striped texture and mild sensor noise. Used where no photo corpus is
//! available (tests, smoke training).

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

fn color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// A `width x height` scene determined entirely by `seed`.
pub fn scene(width: u32, height: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (width as f64, height as f64);
    let c0 = color(&mut rng);
    let c1 = color(&mut rng);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());

    struct Shape {
        cx: f64,
        cy: f64,
        rx: f64,
        ry: f64,
        ellipse: bool,
        color: [f64; 3],
    }
    let shapes: Vec<Shape> = (0..rng.gen_range(3..9))
        .map(|_| Shape {
            cx: rng.gen_range(0.0..w),
            cy: rng.gen_range(0.0..h),
            rx: rng.gen_range(0.05..0.35) * w,
            ry: rng.gen_range(0.05..0.35) * h,
            ellipse: rng.gen_bool(0.5),
            color: color(&mut rng),
        })
        .collect();
    let freq = rng.gen_range(0.1..0.6);
    let stripe_amp = rng.gen_range(0.0..0.15);
    let (sx0, sy0) = (rng.gen_range(0.0..w * 0.6), rng.gen_range(0.0..h * 0.6));
    let (sx1, sy1) = (sx0 + w * 0.4, sy0 + h * 0.4);
    let noise = rng.gen_range(0.0..3.0) / 255.0;

    RgbImage::from_fn(width, height, |x, y| {
        let (fx, fy) = (x as f64, y as f64);
        let t = (((fx / w - 0.5) * ca + (fy / h - 0.5) * sa) + 0.5).clamp(0.0, 1.0);
        let mut c = [0.0; 3];
        for k in 0..3 {
            c[k] = c0[k] * (1.0 - t) + c1[k] * t;
        }
        for s in &shapes {
            let (dx, dy) = ((fx - s.cx) / s.rx, (fy - s.cy) / s.ry);
            let inside = if s.ellipse {
                dx * dx + dy * dy <= 1.0
            } else {
                dx.abs() <= 1.0 && dy.abs() <= 1.0
            };
            if inside {
                c = s.color;
            }
        }
        if fx >= sx0 && fx < sx1 && fy >= sy0 && fy < sy1 {
            let v = stripe_amp * ((fx + fy) * freq).sin();
            c.iter_mut().for_each(|ch| *ch += v);
        }
        let px = c.map(|v| {
            let n = if noise > 0.0 { rng.gen_range(-noise..noise) } else { 0.0 };
            ((v + n).clamp(0.0, 1.0) * 255.0).round() as u8
        });
        Rgb(px)
    })
}

/// Writes `count` PNG scenes named `scene_000.png`, ... into `dir`, with
/// sides drawn from `min_side..=max_side`.
pub fn write_scenes(dir: &Path, count: usize, min_side: u32, max_side: u32, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let w = rng.gen_range(min_side..=max_side);
            let h = rng.gen_range(min_side..=max_side);
            let p = dir.join(format!("scene_{i:03}.png"));
            scene(w, h, rng.gen()).save(&p)?;
            Ok(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_seeded() {
        assert_eq!(scene(40, 30, 7), scene(40, 30, 7));
        assert_ne!(scene(40, 30, 7), scene(40, 30, 8));
        let dir = tempfile::tempdir().unwrap();
        let files = write_scenes(dir.path(), 3, 64, 80, 1).unwrap();
        assert_eq!(files.len(), 3);
        let img = image::open(&files[0]).unwrap();
        assert!(img.width() >= 64 && img.width() <= 80);
    }
}
