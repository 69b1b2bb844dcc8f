//! Rate-distortion training.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Backend, Graph};
use crate::checkpoint::{self, TrainState};
use crate::codec::{CodecNet, SPATIAL_MULTIPLE};
use crate::config::Metric;
use crate::error::{shape_err, Error, Result};
use crate::imageio;
use crate::metrics::{self, MSSSIM_MIN_SIDE};
use crate::optim::AdamState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub metric: Metric,
    pub batch: usize,
    pub patch: usize,
    pub total_iters: u64,
    pub lr0: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale schedule: batch 8 at 384x384 for 1.5M iterations.
    pub fn full(lambda: f64, metric: Metric) -> Self {
        Self {
            lambda,
            metric,
            batch: 8,
            patch: 384,
            total_iters: 1_500_000,
            lr0: 1e-4,
            seed: 0,
        }
    }

    /// Small CPU runs: batch 8 at 64x64.
    pub fn desk(lambda: f64, total_iters: u64) -> Self {
        Self {
            lambda,
            metric: Metric::Mse,
            batch: 8,
            patch: 64,
            total_iters,
            lr0: 1e-3,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.patch == 0 || !self.patch.is_multiple_of(SPATIAL_MULTIPLE) {
            return Err(Error::Config(format!(
                "patch must be a positive multiple of {SPATIAL_MULTIPLE}, got {}",
                self.patch
            )));
        }
        if self.metric == Metric::MsSsim && self.patch < MSSSIM_MIN_SIDE {
            return Err(Error::Config(format!(
                "ms_ssim training needs patches of at least {MSSSIM_MIN_SIDE}, got {}",
                self.patch
            )));
        }
        if self.batch == 0 || self.total_iters == 0 {
            return Err(Error::Config("batch and total_iters must be positive".into()));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        Ok(())
    }
}

/// Rate-distortion loss on a backend.
///
/// MSE: `lambda * 255^2 * mse + bits / pixels`.
/// MS-SSIM: `lambda * (1 - ms_ssim) + bits / pixels`.
pub fn rd_loss<T: Scalar, B: Backend<T>>(
    b: &mut B,
    x: &B::Var,
    x_hat: &B::Var,
    bits: &B::Var,
    lambda: f64,
    metric: Metric,
    num_pixels: usize,
) -> Result<B::Var> {
    let (sx, sh) = (b.value(x).shape().to_vec(), b.value(x_hat).shape().to_vec());
    if sx != sh {
        return Err(shape_err!("loss inputs differ: {sx:?} vs {sh:?}"));
    }
    if num_pixels == 0 {
        return Err(Error::Contract("num_pixels must be positive".into()));
    }
    let distortion = match metric {
        Metric::Mse => {
            let d = b.sub(x, x_hat)?;
            let d2 = b.square(&d)?;
            let s = b.sum(&d2)?;
            b.scale(&s, lambda * 255.0 * 255.0 / sx.iter().product::<usize>() as f64)?
        }
        Metric::MsSsim => {
            let m = metrics::ms_ssim_var(b, x, x_hat)?;
            let one_minus = b.scale(&m, -lambda)?;
            b.add_scalar(&one_minus, lambda)?
        }
    };
    let total_bits = b.sum(bits)?;
    let rate = b.scale(&total_bits, 1.0 / num_pixels as f64)?;
    b.add(&distortion, &rate)
}

/// Step size: `lr0` for the first half of training, then halved every
/// `total / 15` iterations.
pub fn lr_schedule(iter: u64, lr0: f64, total: u64) -> f64 {
    let half = total as f64 * 0.5;
    let it = iter as f64;
    if it < half {
        return lr0;
    }
    let step = (total as f64 / 15.0).max(1.0);
    let k = ((it - half) / step).floor() + 1.0;
    lr0 * 0.5f64.powf(k)
}

/// Source images for patch sampling, with the files that were skipped.
pub struct ImageSet {
    pub images: Vec<(PathBuf, RgbImage)>,
    pub skipped: Vec<(PathBuf, String)>,
}

/// Loads every supported image in `dir` (sorted by name) whose sides are at
/// least `min_side`. Others are skipped with a warning.
pub fn load_images(dir: &Path, min_side: usize) -> Result<ImageSet> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && imageio::is_image_path(p))
        .collect();
    paths.sort();
    let mut set = ImageSet {
        images: Vec::new(),
        skipped: Vec::new(),
    };
    for p in paths {
        let img = imageio::load_rgb::<f32>(&p).and_then(|t| imageio::tensor_to_rgb(&t));
        match img {
            Ok(img) if (img.width().min(img.height()) as usize) < min_side => {
                let why = format!("{}x{} is smaller than {min_side}", img.width(), img.height());
                log::warn!("skipping {}: {why}", p.display());
                set.skipped.push((p, why));
            }
            Ok(img) => set.images.push((p, img)),
            Err(e) => {
                log::warn!("skipping {}: {e}", p.display());
                set.skipped.push((p, e.to_string()));
            }
        }
    }
    Ok(set)
}

/// Cuts one square patch: optional scale jitter in `[0.75, 1.25]`, a random
/// crop, then optional rotation by a multiple of 90 degrees and a horizontal
/// flip.
pub fn sample_patch<R: Rng + ?Sized>(img: &RgbImage, patch: usize, augment: bool, rng: &mut R) -> RgbImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let scale = if augment { rng.gen_range(0.75..=1.25) } else { 1.0 };
    // Source window that maps to `patch` pixels after scaling.
    let side = ((patch as f64 / scale).round() as usize).clamp(1, w.min(h));
    let x0 = rng.gen_range(0..=w - side) as u32;
    let y0 = rng.gen_range(0..=h - side) as u32;
    let crop = imageops::crop_imm(img, x0, y0, side as u32, side as u32).to_image();
    let mut out = if side == patch {
        crop
    } else {
        imageops::resize(&crop, patch as u32, patch as u32, FilterType::Triangle)
    };
    if augment {
        out = match rng.gen_range(0..4) {
            1 => imageops::rotate90(&out),
            2 => imageops::rotate180(&out),
            3 => imageops::rotate270(&out),
            _ => out,
        };
        if rng.gen_bool(0.5) {
            imageops::flip_horizontal_in_place(&mut out);
        }
    }
    out
}

/// `count` seeded `[3,patch,patch]` training patches from the images in
/// `dir`. Unreadable or too-small files are skipped; having nothing usable is
/// an error.
pub fn make_patches<T: Scalar>(dir: &Path, patch: usize, count: usize, seed: u64, augment: bool) -> Result<Vec<Tensor<T>>> {
    let set = load_images(dir, patch)?;
    patches_from(&set.images, patch, count, seed, augment)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))
}

pub fn patches_from<T: Scalar>(
    images: &[(PathBuf, RgbImage)],
    patch: usize,
    count: usize,
    seed: u64,
    augment: bool,
) -> Result<Vec<Tensor<T>>> {
    let usable: Vec<&RgbImage> = images
        .iter()
        .map(|(_, i)| i)
        .filter(|i| i.width().min(i.height()) as usize >= patch)
        .collect();
    if usable.is_empty() {
        return Err(Error::Data(format!("no usable RGB images of at least {patch}x{patch}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let img = usable[rng.gen_range(0..usable.len())];
            imageio::rgb_to_tensor(&sample_patch(img, patch, augment, &mut rng))
        })
        .collect())
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iter: u64,
    pub loss: f64,
    pub bpp: f64,
    pub psnr: f64,
}

pub const LOG_HEADER: &str = "iter,loss,bpp,psnr";

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!("{},{:.9},{:.9},{:.6}", self.iter, self.loss, self.bpp, self.psnr)
    }
}

/// Owns the model and optimizer during training.
pub struct Trainer<T> {
    pub net: CodecNet<T>,
    pub adam: AdamState<T>,
    /// Number of completed iterations.
    pub iteration: u64,
    pub config: TrainConfig,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(net: CodecNet<T>, config: TrainConfig) -> Result<Self> {
        Self::resume(net, None, config)
    }

    /// Continues from a saved state (or starts fresh when `state` is `None`).
    pub fn resume(net: CodecNet<T>, state: Option<TrainState<T>>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        net.config.validate()?;
        if net.config.metric != config.metric || (net.config.lambda - config.lambda).abs() > 1e-12 * config.lambda {
            return Err(Error::Config(format!(
                "model is configured for {} lambda {}, training asks for {} lambda {}",
                net.config.metric.as_str(),
                net.config.lambda,
                config.metric.as_str(),
                config.lambda
            )));
        }
        let (adam, iteration) = match state {
            Some(s) => (s.adam, s.iteration),
            None => (AdamState::new(&net.store), 0),
        };
        Ok(Self {
            net,
            adam,
            iteration,
            config,
        })
    }

    pub fn state(&self) -> TrainState<T> {
        TrainState {
            iteration: self.iteration,
            adam: self.adam.clone(),
        }
    }

    /// Random source for iteration `iter`, independent of earlier draws so
    /// that resumed runs see the same batches and noise.
    pub fn iteration_rng(&self, iter: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(iter);
        rng
    }

    fn batch(&self, data: &[Tensor<T>], rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
        let picks: Vec<Tensor<T>> = (0..self.config.batch)
            .map(|_| {
                let t = data.choose(rng).expect("non-empty dataset");
                let d = t.dims4()?;
                t.clone().reshape(&[d.c, 1, d.h, d.w])
            })
            .collect::<Result<_>>()?;
        Tensor::stack_batch(&picks)
    }

    fn diverged(&self, iter: u64, lr: f64, detail: String) -> Error {
        Error::Diverged {
            iter: iter as usize,
            lambda: self.config.lambda,
            lr,
            detail,
        }
    }

    /// Loss, rate and PSNR of one batch under noise quantization, without
    /// updating anything.
    pub fn evaluate_batch(&self, x: &Tensor<T>, rng: &mut ChaCha8Rng) -> Result<LogRow> {
        let mut g = Graph::new(&self.net.store);
        let (row, _) = self.forward(&mut g, x, rng)?;
        Ok(row)
    }

    fn forward(&self, g: &mut Graph<'_, T>, x: &Tensor<T>, rng: &mut ChaCha8Rng) -> Result<(LogRow, crate::Var)> {
        let d = x.dims4()?;
        let pixels = d.b * d.h * d.w;
        let xv = g.constant(x.clone());
        let fwd = self.net.forward_train(g, &xv, rng)?;
        let loss = rd_loss(g, &xv, &fwd.x_hat, &fwd.bits, self.config.lambda, self.config.metric, pixels)?;
        let row = LogRow {
            iter: self.iteration + 1,
            loss: g.value(&loss).data()[0].f64(),
            bpp: g.value(&fwd.bits).sum().f64() / pixels as f64,
            psnr: metrics::psnr(x, g.value(&fwd.x_hat))?,
        };
        Ok((row, loss))
    }

    /// One optimization step on a batch drawn from `data`.
    pub fn step(&mut self, data: &[Tensor<T>]) -> Result<LogRow> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let iter = self.iteration;
        let lr = lr_schedule(iter, self.config.lr0, self.config.total_iters);
        let mut rng = self.iteration_rng(iter);
        let x = self.batch(data, &mut rng)?;
        let grads = {
            let mut g = Graph::new(&self.net.store);
            let (row, loss) = match self.forward(&mut g, &x, &mut rng) {
                Ok(v) => v,
                Err(Error::NonFinite(what)) => return Err(self.diverged(iter, lr, format!("non-finite {what}"))),
                Err(e) => return Err(e),
            };
            if !row.loss.is_finite() {
                return Err(self.diverged(iter, lr, format!("loss is {}", row.loss)));
            }
            (g.backward(loss)?, row)
        };
        let (grads, row) = grads;
        self.net.store.zero_grad();
        grads.accumulate_into(&mut self.net.store)?;
        self.adam.step(&mut self.net.store, lr)?;
        for (_, name, p) in self.net.store.iter() {
            if !p.all_finite() {
                return Err(self.diverged(iter, lr, format!("parameter {name} became non-finite")));
            }
        }
        self.iteration += 1;
        Ok(row)
    }
}

/// Where [`train_loop`] writes its outputs.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    /// Also checkpoint every this many iterations (0 = only at the end).
    pub checkpoint_every: u64,
}

/// Runs until `total_iters` iterations are complete. Log rows are appended to
/// the CSV (created with a header when starting from iteration 0) and
/// returned.
pub fn train_loop<T: Scalar>(
    trainer: &mut Trainer<T>,
    data: &[Tensor<T>],
    out: &TrainOutputs,
    mut on_step: impl FnMut(&LogRow),
) -> Result<Vec<LogRow>> {
    let mut log = match &out.log {
        Some(p) => {
            let f = if trainer.iteration == 0 {
                let mut f = File::create(p)?;
                writeln!(f, "{LOG_HEADER}")?;
                f
            } else {
                OpenOptions::new().append(true).open(p)?
            };
            Some(BufWriter::new(f))
        }
        None => None,
    };
    let mut rows = Vec::new();
    while trainer.iteration < trainer.config.total_iters {
        let row = trainer.step(data)?;
        if let Some(w) = &mut log {
            writeln!(w, "{}", row.to_csv())?;
        }
        on_step(&row);
        rows.push(row);
        let every = out.checkpoint_every;
        if let Some(p) = &out.checkpoint {
            if every > 0 && trainer.iteration.is_multiple_of(every) && trainer.iteration < trainer.config.total_iters {
                if let Some(w) = &mut log {
                    w.flush()?;
                }
                checkpoint::save(p, &trainer.net, Some(&trainer.state()))?;
            }
        }
    }
    if let Some(w) = &mut log {
        w.flush()?;
    }
    if let Some(p) = &out.checkpoint {
        checkpoint::save(p, &trainer.net, Some(&trainer.state()))?;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Eager;
    use crate::config::ModelConfig;
    use crate::params::ParamStore;

    fn tiny_net(lambda: f64) -> CodecNet<f32> {
        let cfg = ModelConfig {
            n: 4,
            m: 10,
            groups: 5,
            use_ci: true,
            use_tb: true,
            hyper_channels: 3,
            lambda,
            metric: Metric::Mse,
        };
        CodecNet::new(cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    fn loss_of(x: &Tensor<f64>, xh: &Tensor<f64>, bits: f64, lambda: f64, metric: Metric) -> f64 {
        let store = ParamStore::new();
        let mut e = Eager::new(&store);
        let (a, b) = (e.constant(x.clone()), e.constant(xh.clone()));
        let bits = e.constant(Tensor::scalar(bits));
        let l = rd_loss(&mut e, &a, &b, &bits, lambda, metric, 100).unwrap();
        l.data()[0]
    }

    #[test]
    fn rd_loss_terms() {
        let x = Tensor::<f64>::full(&[3, 1, 10, 10], 0.5);
        assert!((loss_of(&x, &x, 250.0, 0.015, Metric::Mse) - 2.5).abs() < 1e-12);
        let y = x.map(|v| v + 0.1);
        let l = loss_of(&x, &y, 0.0, 0.015, Metric::Mse);
        assert!((l - 0.015 * 255.0 * 255.0 * 0.01).abs() < 1e-9);
        let l2 = loss_of(&x, &y, 0.0, 0.03, Metric::Mse);
        assert!((l2 - 2.0 * l).abs() < 1e-9);
        let big = Tensor::<f64>::full(&[3, 1, 176, 176], 0.3);
        assert!((loss_of(&big, &big, 100.0, 40.0, Metric::MsSsim) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn schedule_matches_full_scale_points() {
        let t = 1_500_000;
        assert_eq!(lr_schedule(0, 1e-4, t), 1e-4);
        assert_eq!(lr_schedule(749_999, 1e-4, t), 1e-4);
        assert!((lr_schedule(750_000, 1e-4, t) - 5e-5).abs() < 1e-18);
        assert!((lr_schedule(850_000, 1e-4, t) - 2.5e-5).abs() < 1e-18);
        let mut prev = f64::INFINITY;
        for i in (0..2000).step_by(7) {
            let lr = lr_schedule(i, 1e-3, 2000);
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::desk(0.015, 10).validate().is_ok());
        let mut c = TrainConfig::desk(0.0, 10);
        assert!(c.validate().is_err());
        c.lambda = 0.015;
        c.patch = 100;
        assert!(c.validate().is_err());
        c.patch = 128;
        c.metric = Metric::MsSsim;
        assert!(c.validate().is_err());
        assert!(TrainConfig::full(40.0, Metric::MsSsim).validate().is_ok());
    }

    fn image_dir() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for (i, (w, h)) in [(80u32, 96u32), (128, 70), (40, 40)].iter().enumerate() {
            let img = RgbImage::from_fn(*w, *h, |x, y| image::Rgb([(x * 3) as u8, (y * 2) as u8, (i * 60) as u8]));
            img.save(dir.path().join(format!("img{i}.png"))).unwrap();
        }
        image::RgbaImage::new(90, 90).save(dir.path().join("alpha.png")).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        dir
    }

    #[test]
    fn patches_are_seeded_and_skip_bad_files() {
        let dir = image_dir();
        let a = make_patches::<f32>(dir.path(), 64, 256, 3, true).unwrap();
        assert_eq!(a.len(), 256);
        assert!(a.iter().all(|p| p.shape() == [3, 64, 64]));
        assert_eq!(a, make_patches::<f32>(dir.path(), 64, 256, 3, true).unwrap());
        assert_ne!(a, make_patches::<f32>(dir.path(), 64, 256, 4, true).unwrap());
        let set = load_images(dir.path(), 64).unwrap();
        assert_eq!(set.images.len(), 2);
        assert_eq!(set.skipped.len(), 2);
        assert!(matches!(make_patches::<f32>(dir.path(), 192, 4, 0, false), Err(Error::Data(_))));
    }

    #[test]
    fn resume_reproduces_the_next_step() {
        let data: Vec<Tensor<f32>> = (0..6)
            .map(|s| Tensor::uniform(&[3, 64, 64], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(s)))
            .collect();
        let mut cfg = TrainConfig::desk(0.015, 4);
        cfg.batch = 2;
        let mut full = Trainer::new(tiny_net(0.015), cfg.clone()).unwrap();
        let r1 = full.step(&data).unwrap();
        let bytes = checkpoint::to_bytes(&full.net, Some(&full.state())).unwrap();
        let r2 = full.step(&data).unwrap();
        let (net, st) = checkpoint::from_bytes::<f32>(&bytes).unwrap();
        let mut resumed = Trainer::resume(net, st, cfg).unwrap();
        let r2b = resumed.step(&data).unwrap();
        assert!(r1.loss.is_finite());
        assert_eq!(r2.iter, 2);
        assert_eq!(r2, r2b);
    }

    #[test]
    fn loop_writes_log_and_checkpoint() {
        let data = vec![Tensor::<f32>::full(&[3, 64, 64], 0.4)];
        let mut cfg = TrainConfig::desk(0.015, 3);
        cfg.batch = 1;
        let dir = tempfile::tempdir().unwrap();
        let out = TrainOutputs {
            checkpoint: Some(dir.path().join("m.ckpt")),
            log: Some(dir.path().join("log.csv")),
            checkpoint_every: 2,
        };
        let mut t = Trainer::new(tiny_net(0.015), cfg).unwrap();
        let rows = train_loop(&mut t, &data, &out, |_| {}).unwrap();
        assert_eq!(rows.len(), 3);
        let log = std::fs::read_to_string(dir.path().join("log.csv")).unwrap();
        assert_eq!(log.lines().count(), 4);
        assert!(log.starts_with(LOG_HEADER));
        let (_, st) = checkpoint::load::<f32>(&dir.path().join("m.ckpt")).unwrap();
        assert_eq!(st.unwrap().iteration, 3);
    }

    #[test]
    fn mismatched_lambda_rejected() {
        assert!(matches!(
            Trainer::new(tiny_net(0.03), TrainConfig::desk(0.015, 1)),
            Err(Error::Config(_))
        ));
    }
}
