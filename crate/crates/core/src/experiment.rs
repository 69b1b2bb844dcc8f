//! Evaluation over image folders and the desk-scale ablation matrix.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::CodecNet;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::imageio;
use crate::metrics::{self, RdRow, MSSSIM_MIN_SIDE};
use crate::pipeline;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{self, TrainConfig, Trainer};

/// Codec name written to RD CSV rows.
pub const CODEC_NAME: &str = "dbcc";
/// Image name of the per-folder average row.
pub const AVERAGE_ROW: &str = "average";

/// Rate and quality of one decoded image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScore {
    pub bpp: f64,
    pub psnr: f64,
    /// `None` when a side is below the MS-SSIM minimum.
    pub msssim_db: Option<f64>,
}

/// Encodes and decodes `image` (`[3,H,W]`) through the real bitstream.
pub fn score_image<T: Scalar>(net: &CodecNet<T>, image: &Tensor<T>) -> Result<ImageScore> {
    let c = pipeline::compress(net, image)?;
    let d = pipeline::decompress(net, &c.bytes)?;
    let psnr = metrics::psnr(image, &d.image)?;
    let d4 = image.dims4()?;
    let msssim_db = if d4.h.min(d4.w) >= MSSSIM_MIN_SIDE {
        Some(metrics::msssim_db(metrics::ms_ssim(image, &d.image)?))
    } else {
        None
    };
    Ok(ImageScore {
        bpp: c.bpp(),
        psnr,
        msssim_db,
    })
}

/// Means of bpp, PSNR and (if every image has one) MS-SSIM dB.
pub fn average(scores: &[ImageScore]) -> Option<ImageScore> {
    if scores.is_empty() {
        return None;
    }
    let n = scores.len() as f64;
    let ms: Option<Vec<f64>> = scores.iter().map(|s| s.msssim_db).collect();
    Some(ImageScore {
        bpp: scores.iter().map(|s| s.bpp).sum::<f64>() / n,
        psnr: scores.iter().map(|s| s.psnr).sum::<f64>() / n,
        msssim_db: ms.map(|v| v.iter().sum::<f64>() / n),
    })
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && imageio::is_image_path(p))
        .collect();
    paths.sort();
    Ok(paths)
}

/// One RD row per image in `dir` plus an average row. Unreadable images are
/// errors here, unlike in training.
pub fn evaluate_dir<T: Scalar>(net: &CodecNet<T>, dir: &Path) -> Result<Vec<RdRow>> {
    let paths = image_files(dir)?;
    if paths.is_empty() {
        return Err(Error::Data(format!("no PNG/PPM images in {}", dir.display())));
    }
    let mut rows = Vec::with_capacity(paths.len() + 1);
    let mut scores = Vec::with_capacity(paths.len());
    for p in &paths {
        let img = imageio::load_rgb::<T>(p)?;
        let s = score_image(net, &img)?;
        log::info!("{}: {:.4} bpp, {:.3} dB", p.display(), s.bpp, s.psnr);
        rows.push(RdRow {
            codec: CODEC_NAME.to_string(),
            image: p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
            bpp: s.bpp,
            psnr: s.psnr,
            msssim_db: s.msssim_db,
        });
        scores.push(s);
    }
    let avg = average(&scores).expect("at least one image");
    rows.push(RdRow {
        codec: CODEC_NAME.to_string(),
        image: AVERAGE_ROW.to_string(),
        bpp: avg.bpp,
        psnr: avg.psnr,
        msssim_db: avg.msssim_db,
    });
    Ok(rows)
}

/// A model variant of the ablation matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    /// Second latent coded without the first as side information.
    NoCi,
    /// Single 3x3 encoder branch.
    NoTb,
    /// Ten slices instead of five.
    Groups10,
}

impl Variant {
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCi => "w/o CI",
            Variant::NoTb => "w/o TB",
            Variant::Groups10 => "groups=10",
        }
    }

    /// Model of this variant derived from the full configuration.
    pub fn config(self, full: &ModelConfig) -> ModelConfig {
        let mut c = full.clone();
        match self {
            Variant::Full => {}
            Variant::NoCi => c.use_ci = false,
            Variant::NoTb => {
                c.use_tb = false;
                c.use_ci = false;
            }
            Variant::Groups10 => c.groups = 10,
        }
        c
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Selector keys as given on the command line.
pub const VARIANT_KEYS: [&str; 3] = ["ci", "tb", "groups"];

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "full" => Ok(Variant::Full),
            "ci" => Ok(Variant::NoCi),
            "tb" => Ok(Variant::NoTb),
            "groups" => Ok(Variant::Groups10),
            other => Err(Error::Config(format!(
                "unknown variant {other:?}; expected a comma list of {}",
                VARIANT_KEYS.join(", ")
            ))),
        }
    }
}

/// Parses `ci,tb,groups`. The full model is always first.
pub fn parse_variants(list: &str) -> Result<Vec<Variant>> {
    let mut out = vec![Variant::Full];
    for part in list.split(',').filter(|p| !p.trim().is_empty()) {
        let v: Variant = part.parse()?;
        if !out.contains(&v) {
            out.push(v);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub bpp: f64,
    pub psnr_db: f64,
    pub msssim_db: Option<f64>,
    pub model_bytes: usize,
}

pub const ABLATION_HEADER: &str = "variant,bpp,psnr_db,msssim_db,model_bytes";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let ms = r.msssim_db.map(|v| format!("{v:.4}")).unwrap_or_default();
        s.push_str(&format!(
            "{},{:.6},{:.4},{},{}\n",
            r.variant, r.bpp, r.psnr_db, ms, r.model_bytes
        ));
    }
    s
}

/// Settings shared by every variant.
#[derive(Clone, Debug)]
pub struct AblationOptions {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl AblationOptions {
    pub fn desk(lambda: f64, iters: u64, seed: u64) -> Self {
        let mut train = TrainConfig::desk(lambda, iters);
        train.seed = seed;
        Self {
            model: ModelConfig::desk(lambda),
            train,
        }
    }
}

/// Ablation table plus the structural checks run on it.
#[derive(Clone, Debug)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// With the full model's weights copied into a model without side
    /// information, both produce identical `z`+`y1` bitstreams on every
    /// evaluation image. `None` unless the `ci` variant was requested.
    pub y1_path_identical: Option<bool>,
    /// Parameters copied for that comparison, of the total in the target.
    pub shared_params: Option<(usize, usize)>,
}

impl AblationReport {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }
}

/// Trains every variant from the same seed on the same patches and scores it
/// on `eval_images` (`[3,H,W]` each).
pub fn run_ablation(
    variants: &[Variant],
    opts: &AblationOptions,
    patches: &[Tensor<f32>],
    eval_images: &[Tensor<f32>],
    mut progress: impl FnMut(Variant, &train::LogRow),
) -> Result<AblationReport> {
    if eval_images.is_empty() {
        return Err(Error::Data("ablation needs at least one evaluation image".into()));
    }
    let mut rows = Vec::new();
    let mut full_net = None;
    for &v in variants {
        let cfg = v.config(&opts.model);
        let net = CodecNet::<f32>::new(cfg, &mut ChaCha8Rng::seed_from_u64(opts.train.seed))?;
        let mut trainer = Trainer::new(net, opts.train.clone())?;
        train::train_loop(&mut trainer, patches, &Default::default(), |r| progress(v, r))?;
        let net = trainer.net;
        let scores = eval_images.iter().map(|img| score_image(&net, img)).collect::<Result<Vec<_>>>()?;
        let avg = average(&scores).expect("non-empty");
        rows.push(AblationRow {
            variant: v,
            bpp: avg.bpp,
            psnr_db: avg.psnr,
            msssim_db: avg.msssim_db,
            model_bytes: net.model_bytes(),
        });
        if v == Variant::Full {
            full_net = Some(net);
        }
    }
    let (mut y1_path_identical, mut shared_params) = (None, None);
    if let (Some(full), true) = (&full_net, variants.contains(&Variant::NoCi)) {
        let mut no_ci = CodecNet::<f32>::new(Variant::NoCi.config(&full.config), &mut ChaCha8Rng::seed_from_u64(opts.train.seed))?;
        let copied = no_ci.copy_shared_from(full);
        shared_params = Some((copied, no_ci.store.len()));
        let mut same = true;
        for img in eval_images {
            same &= pipeline::y1_path_bytes(full, img)? == pipeline::y1_path_bytes(&no_ci, img)?;
        }
        y1_path_identical = Some(same);
    }
    Ok(AblationReport {
        rows,
        y1_path_identical,
        shared_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_parsing() {
        assert_eq!(
            parse_variants("ci,tb,groups").unwrap(),
            vec![Variant::Full, Variant::NoCi, Variant::NoTb, Variant::Groups10]
        );
        assert_eq!(parse_variants("").unwrap(), vec![Variant::Full]);
        assert!(matches!(parse_variants("ci,depth"), Err(Error::Config(_))));
    }

    #[test]
    fn variant_configs_validate() {
        let full = ModelConfig::desk(0.015);
        for v in [Variant::Full, Variant::NoCi, Variant::NoTb, Variant::Groups10] {
            v.config(&full).validate().unwrap();
        }
    }

    #[test]
    fn average_drops_partial_msssim() {
        let a = ImageScore { bpp: 1.0, psnr: 30.0, msssim_db: Some(10.0) };
        let b = ImageScore { bpp: 3.0, psnr: 32.0, msssim_db: None };
        let m = average(&[a.clone(), b]).unwrap();
        assert_eq!((m.bpp, m.psnr, m.msssim_db), (2.0, 31.0, None));
        assert_eq!(average(&[a.clone(), a]).unwrap().msssim_db, Some(10.0));
        assert!(average(&[]).is_none());
    }

    #[test]
    fn csv_shape() {
        let rows = vec![AblationRow {
            variant: Variant::NoCi,
            bpp: 0.5,
            psnr_db: 30.0,
            msssim_db: None,
            model_bytes: 400,
        }];
        let csv = ablation_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "variant,bpp,psnr_db,msssim_db,model_bytes");
        assert_eq!(lines[1], "w/o CI,0.500000,30.0000,,400");
    }

    #[test]
    fn tiny_ablation_runs() {
        let mut opts = AblationOptions::desk(0.015, 2, 3);
        opts.model = ModelConfig {
            n: 4,
            m: 10,
            groups: 5,
            use_ci: true,
            use_tb: true,
            hyper_channels: 3,
            lambda: 0.015,
            metric: crate::config::Metric::Mse,
        };
        opts.train.batch = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let patches: Vec<Tensor<f32>> = (0..4).map(|_| Tensor::uniform(&[3, 64, 64], 0.0, 1.0, &mut rng)).collect();
        let eval = vec![imageio::rgb_to_tensor(&crate::synth::scene(70, 50, 2))];
        let vs = parse_variants("ci,tb,groups").unwrap();
        let rep = run_ablation(&vs, &opts, &patches, &eval, |_, _| {}).unwrap();
        assert_eq!(rep.rows.len(), 4);
        assert_eq!(rep.y1_path_identical, Some(true));
        let (copied, total) = rep.shared_params.unwrap();
        // Only the first layer of each stage-2 slice network changes shape.
        assert_eq!(total - copied, 5);
        assert!(rep.row(Variant::Groups10).unwrap().model_bytes > rep.row(Variant::Full).unwrap().model_bytes);
        assert!(rep.row(Variant::NoTb).unwrap().model_bytes < rep.row(Variant::Full).unwrap().model_bytes);
    }
}
