use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dbcc::experiment::{self, Variant};
use dbcc::{checkpoint, imageio, pipeline, synth, CodecNet32, Metric, ModelConfig};

fn tiny(use_tb: bool, use_ci: bool) -> ModelConfig {
    ModelConfig {
        n: 4,
        m: 10,
        groups: 5,
        use_ci,
        use_tb,
        hyper_channels: 3,
        lambda: 0.0075,
        metric: Metric::Mse,
    }
}

#[test]
fn checkpointed_model_reproduces_bitstream() {
    let net = CodecNet32::new(tiny(true, true), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let img = imageio::rgb_to_tensor::<f32>(&synth::scene(90, 130, 4));
    let a = pipeline::compress(&net, &img).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.ckpt");
    checkpoint::save(&path, &net, None).unwrap();
    let (loaded, _) = checkpoint::load::<f32>(&path).unwrap();
    let b = pipeline::compress(&loaded, &img).unwrap();
    assert_eq!(a.bytes, b.bytes);

    let d = pipeline::decompress(&loaded, &a.bytes).unwrap();
    assert_eq!(d.image.shape(), &[3, 130, 90]);
    assert_eq!(d.y1_hat, a.latents.y1_hat);
    assert_eq!(d.y2_hat, a.latents.y2_hat);
    assert_eq!(d.z_hat, a.latents.z_hat);
    let (eval, _) = pipeline::roundtrip_eval(&loaded, &img).unwrap();
    assert_eq!(eval, d.image);
}

#[test]
fn every_variant_round_trips() {
    let img = imageio::rgb_to_tensor::<f32>(&synth::scene(64, 80, 6));
    for v in [Variant::Full, Variant::NoCi, Variant::NoTb, Variant::Groups10] {
        let net = CodecNet32::new(v.config(&tiny(true, true)), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let c = pipeline::compress(&net, &img).unwrap();
        let d = pipeline::decompress(&net, &c.bytes).unwrap();
        assert_eq!(d.y1_hat, c.latents.y1_hat, "{v}");
        assert_eq!(d.y2_hat.is_some(), v != Variant::NoTb, "{v}");
        let s = experiment::score_image(&net, &img).unwrap();
        assert!((s.bpp - c.bpp()).abs() < 1e-12);
        assert!(s.msssim_db.is_none(), "80 px is below the MS-SSIM minimum");
    }
}

#[test]
fn y1_path_is_shared_without_side_information() {
    let full = CodecNet32::new(tiny(true, true), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut no_ci = CodecNet32::new(tiny(true, false), &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    let img = imageio::rgb_to_tensor::<f32>(&synth::scene(128, 64, 2));
    let copied = no_ci.copy_shared_from(&full);
    assert!(copied > 0 && copied < no_ci.store.len());
    assert_eq!(pipeline::y1_path_bytes(&full, &img).unwrap(), pipeline::y1_path_bytes(&no_ci, &img).unwrap());
}
