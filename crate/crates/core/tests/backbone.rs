mod common;

use vstain::backbone::{extract_subcrop_tokens, read_token_cache, write_token_cache, Backbone, SpatialTokenGrid, ToyBackbone, ToyBackboneConfig};
use vstain::error::Result;
use vstain::image::{RgbImage, ValueRange};
use vstain::training::{StepContext, TrainState};
use vstain_tensor::no_grad;

use common::{micro, random_image};

/// Emits a per-crop constant token equal to the crop's mean intensity scaled by 16.
struct MeanBackbone;

impl Backbone for MeanBackbone {
    fn id(&self) -> String {
        "mean".into()
    }
    fn token_dim(&self) -> usize {
        2
    }
    fn native_side(&self) -> usize {
        8
    }
    fn grid_side(&self) -> usize {
        2
    }
    fn patch_tokens(&self, img: &RgbImage) -> Result<SpatialTokenGrid> {
        let v = (img.mean_intensity() * 16.0).round();
        SpatialTokenGrid::new(2, 2, img.height(), vec![v; 8])
    }
    fn cls_embedding(&self, img: &RgbImage) -> Result<Vec<f64>> {
        Ok(vec![img.mean_intensity(); 2])
    }
}

#[test]
fn crop_constants_reassemble_as_blocks() {
    // sub-crop k (row-major) has intensity k/16
    let img = RgbImage::from_fn(32, 32, ValueRange::Unit, |y, x| [((y / 8) * 4 + x / 8) as f64 / 16.0; 3]).unwrap();
    let grid = extract_subcrop_tokens(&img, &MeanBackbone, 8).unwrap();
    for y in 0..8 {
        for x in 0..8 {
            let k = (y / 2) * 4 + x / 2;
            assert_eq!(grid.token(y, x), &[k as f64, k as f64]);
        }
    }
}

#[test]
fn identical_subcrops_give_identical_blocks() {
    let tile = random_image(8, 1);
    let mut img = RgbImage::constant(32, 32, [0.0; 3], ValueRange::Unit).unwrap();
    for by in 0..4 {
        for bx in 0..4 {
            img.paste(&tile, by * 8, bx * 8).unwrap();
        }
    }
    let bb = ToyBackbone::new(3, ToyBackboneConfig { token_dim: 4, native_side: 16, patch: 4 }).unwrap();
    let g = extract_subcrop_tokens(&img, &bb, 16).unwrap();
    for y in 0..16 {
        for x in 0..16 {
            assert_eq!(g.token(y, x), g.token(y % 4, x % 4));
        }
    }
}

#[test]
fn native_1024_input_gives_the_same_grid_side() {
    let bb = ToyBackbone::new(0, ToyBackboneConfig { token_dim: 4, native_side: 224, patch: 16 }).unwrap();
    let sub = random_image(128, 2);
    let per_crop = bb.patch_tokens(&sub.resize(224, 224, vstain::resample::Filter::Bicubic)).unwrap();
    assert_eq!(per_crop.side, bb.grid_side());
    let big = random_image(1024, 3);
    let g = extract_subcrop_tokens(&big, &bb, 32).unwrap();
    assert_eq!((g.side, g.dim, g.source_resolution), (32, 4, 32));
}

#[test]
fn toy_backbone_is_seeded_and_discriminative() {
    let cfg = ToyBackboneConfig { token_dim: 8, native_side: 16, patch: 4 };
    let (a, b) = (ToyBackbone::new(5, cfg.clone()).unwrap(), ToyBackbone::new(5, cfg).unwrap());
    let img = random_image(32, 4);
    let ga = extract_subcrop_tokens(&img, &a, 8).unwrap();
    assert_eq!(ga, extract_subcrop_tokens(&img, &b, 8).unwrap());
    let mut seen = std::collections::HashSet::new();
    for s in 0..10 {
        let g = extract_subcrop_tokens(&random_image(32, 100 + s), &a, 8).unwrap();
        seen.insert(g.data.iter().map(|v| v.to_bits()).collect::<Vec<u64>>());
    }
    assert_eq!(seen.len(), 10);
}

#[test]
fn cached_tokens_equal_fresh_tokens() {
    let bb = ToyBackbone::new(9, ToyBackboneConfig { token_dim: 8, native_side: 16, patch: 4 }).unwrap();
    let img = random_image(32, 6);
    let fresh = extract_subcrop_tokens(&img, &bb, 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.vstk");
    write_token_cache(&p, "a", &fresh).unwrap();
    let (id, cached) = read_token_cache(&p).unwrap();
    assert_eq!(id, "a");
    assert!(cached.data.iter().zip(&fresh.data).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn backbone_is_untouched_by_training() {
    let c = micro();
    let bb = c.backbone().unwrap();
    let probe = random_image(16, 7);
    let before = extract_subcrop_tokens(&probe, bb.as_ref(), c.processor.grid_side).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let man = vstain::training::data::write_synthetic_dataset(dir.path(), &common::micro_synthetic(), 1).unwrap();
    let samples = vstain::training::data::read_manifest(&man).unwrap();
    let data = vstain::training::TrainingData::load(&samples, &c.train.tokens, c.train.balancing).unwrap();
    let mut st = TrainState::new(1, &c.generator, &c.processor, &c.disc, &c.train).unwrap();
    let ext = c.perceptual_extractor().unwrap();
    let m = c.stain.stain_matrix().unwrap();
    let ctx = StepContext { train: &c.train, loss: &c.loss, stain: &c.stain, stain_matrix: &m, perceptual: &ext };
    for s in 0..3 {
        let b = data.batch(1, s, &c.train, bb.as_ref(), c.processor.grid_side, 1).unwrap();
        vstain::training::training_step(&mut st, &b, &ctx).unwrap();
    }
    let after = no_grad(|| extract_subcrop_tokens(&probe, bb.as_ref(), c.processor.grid_side)).unwrap();
    assert_eq!(before, after);
    // no backbone parameter lives in either optimized map
    assert!(st.gvars.params().iter().chain(st.dvars.params().iter()).all(|p| !p.name().contains("backbone")));
}
