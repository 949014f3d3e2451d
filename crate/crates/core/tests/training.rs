mod common;

use std::collections::BTreeMap;

use statrs::distribution::{ChiSquared, ContinuousCDF};
use vstain::config::RunConfig;
use vstain::error::Error;
use vstain::image::RgbImage;
use vstain::nn::{Init, VarMap};
use vstain::training::data::{read_manifest, sample_training_pair, write_synthetic_dataset};
use vstain::training::{
    run_training, sample_conditioning_drops, warmup_lr, Balancing, Checkpoint, CropSpec, DropRates, Drops, Ema, RunSinks, StepContext,
    TrainState, TrainingData, UnifiedSampler,
};

use common::{micro, micro_synthetic, random_image, rng};

struct Fixture {
    cfg: RunConfig,
    data: TrainingData,
    _dir: tempfile::TempDir,
}

fn fixture(cfg: RunConfig) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let man = write_synthetic_dataset(dir.path(), &micro_synthetic(), 3).unwrap();
    let samples = read_manifest(&man).unwrap();
    let data = TrainingData::load(&samples, &cfg.train.tokens, cfg.train.balancing).unwrap();
    Fixture { cfg, data, _dir: dir }
}

fn snapshot_bits(vm: &VarMap) -> Vec<(String, Vec<u64>)> {
    vm.snapshot().into_iter().map(|(n, _, d)| (n, d.iter().map(|v| v.to_bits()).collect())).collect()
}

/// Runs `f` with a step context borrowed from `cfg`.
fn with_ctx<T>(cfg: &RunConfig, f: impl FnOnce(&StepContext) -> T) -> T {
    let ext = cfg.perceptual_extractor().unwrap();
    let m = cfg.stain.stain_matrix().unwrap();
    let ctx = StepContext { train: &cfg.train, loss: &cfg.loss, stain: &cfg.stain, stain_matrix: &m, perceptual: &ext };
    f(&ctx)
}

#[test]
fn crop_origins_are_uniform_and_flips_fair() {
    let (h, w, size) = (40, 40, 32);
    let mut r = rng(1);
    let cells = (h - size + 1) * (w - size + 1);
    let n = 200 * cells;
    let mut counts = vec![0usize; cells];
    let (mut fh, mut fv) = (0usize, 0usize);
    for _ in 0..n {
        let c = CropSpec::draw(h, w, size, &mut r).unwrap();
        counts[c.y * (w - size + 1) + c.x] += 1;
        fh += c.flip_h as usize;
        fv += c.flip_v as usize;
    }
    let e = n as f64 / cells as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
    let p = 1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(chi2);
    assert!(p > 1e-3, "chi2 {chi2} p {p}");
    for f in [fh, fv] {
        assert!((f as f64 / n as f64 - 0.5).abs() < 0.01);
    }
    assert!(CropSpec::draw(16, 40, 32, &mut r).is_err());
}

#[test]
fn paired_crops_share_origin_and_flips() {
    let hne = random_image(24, 2);
    let ihc = RgbImage::from_fn(24, 24, vstain::image::ValueRange::Unit, |y, x| hne.pixel(y, x).map(|v| 1.0 - v)).unwrap();
    let mut r = rng(3);
    for _ in 0..50 {
        let (a, b, _) = sample_training_pair(&hne, &ihc, 8, &mut r).unwrap();
        // signed range: inversion is negation
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| (p + q).abs() < 1e-12));
    }
}

#[test]
fn conditioning_drop_rates_match_configuration() {
    let rates = DropRates::default();
    let mut r = rng(4);
    let n = 100_000;
    let mut counts: BTreeMap<(bool, bool), usize> = BTreeMap::new();
    for _ in 0..n {
        let d = sample_conditioning_drops(&rates, &mut r);
        *counts.entry((d.cls, d.uni)).or_default() += 1;
    }
    let rate = |k| *counts.get(&k).unwrap_or(&0) as f64 / n as f64;
    assert!((rate((true, false)) - 0.10).abs() < 0.01);
    assert!((rate((false, true)) - 0.10).abs() < 0.01);
    assert!((rate((true, true)) - 0.05).abs() < 0.01);
    assert!((rate((false, false)) - 0.75).abs() < 0.01);
}

#[test]
fn ema_matches_closed_form() {
    let vm = VarMap::new(0);
    let p = vm.builder().get("w", &[3], Init::Values(vec![2.0, -1.0, 0.5]));
    let ema = Ema::new(&vm, 0.999);
    let s0 = [2.0, -1.0, 0.5];
    let theta = [0.3, 4.0, -2.0];
    p.set_data(theta.to_vec());
    for k in 1..=10_000u32 {
        ema.update(&vm);
        if [1, 10, 100, 1000, 10_000].contains(&k) {
            let dk = 0.999f64.powi(k as i32);
            let got = ema.shadow.get("w").unwrap().get().to_vec();
            for i in 0..3 {
                let want = dk * s0[i] + (1.0 - dk) * theta[i];
                assert!((got[i] - want).abs() < 1e-9, "k={k}: {} vs {want}", got[i]);
            }
        }
    }
}

#[test]
fn sampler_follows_balancing_mode() {
    let groups: BTreeMap<String, Vec<usize>> =
        [("A", 0..1), ("B", 1..3), ("C", 3..6), ("D", 6..10)].into_iter().map(|(k, r)| (k.to_string(), r.collect())).collect();
    let stain_of = |i: usize| match i {
        0 => 0,
        1..=2 => 1,
        3..=5 => 2,
        _ => 3,
    };
    let n = 100_000;
    for (mode, want) in [(Balancing::Proportional, [0.1, 0.2, 0.3, 0.4]), (Balancing::Uniform, [0.25; 4])] {
        let s = UnifiedSampler::new(groups.clone(), mode).unwrap();
        let mut r = rng(5);
        let mut counts = [0usize; 4];
        for i in s.batch(n, &mut r) {
            counts[stain_of(i)] += 1;
        }
        for k in 0..4 {
            assert!((counts[k] as f64 / n as f64 - want[k]).abs() < 0.02, "{mode:?} {counts:?}");
        }
    }
    assert!(UnifiedSampler::new(BTreeMap::new(), Balancing::Uniform).is_err());
}

#[test]
fn warmup_is_linear_then_constant() {
    assert_eq!(warmup_lr(1e-4, 500, 1000), 0.5e-4);
    assert_eq!(warmup_lr(1e-4, 1000, 1000), 1e-4);
    assert_eq!(warmup_lr(1e-4, 5000, 1000), 1e-4);
    let mut prev = -1.0;
    for s in 0..1200 {
        let v = warmup_lr(4e-4, s, 1000);
        assert!(v >= prev);
        prev = v;
    }
}

#[test]
fn ttur_requires_faster_discriminator() {
    let mut c = micro();
    c.train.d_opt.lr = c.train.g_opt.lr;
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    c.train.d_opt.lr = c.train.g_opt.lr * 4.0;
    assert!(c.validate().is_ok());
}

#[test]
fn batches_do_not_depend_on_worker_count() {
    let f = fixture(micro());
    let bb = f.cfg.backbone().unwrap();
    for step in [0, 7] {
        let a = f.data.batch(9, step, &f.cfg.train, bb.as_ref(), f.cfg.processor.grid_side, 1).unwrap();
        let b = f.data.batch(9, step, &f.cfg.train, bb.as_ref(), f.cfg.processor.grid_side, 3).unwrap();
        assert!(a.hne.bitwise_eq(&b.hne) && a.ihc.bitwise_eq(&b.ihc) && a.token_grid.bitwise_eq(&b.token_grid));
        assert_eq!((a.tokens, a.drops), (b.tokens, b.drops));
    }
}

#[test]
fn warmup_step_zero_leaves_both_networks_unchanged() {
    let mut cfg = micro();
    cfg.train.warmup = 5;
    cfg.train.adv_start = 0;
    let f = fixture(cfg);
    let bb = f.cfg.backbone().unwrap();
    let mut st = TrainState::new(2, &f.cfg.generator, &f.cfg.processor, &f.cfg.disc, &f.cfg.train).unwrap();
    let (g0, d0) = (snapshot_bits(&st.gvars), snapshot_bits(&st.dvars));
    with_ctx(&f.cfg, |ctx| run_training(&mut st, &f.data, ctx, bb.as_ref(), 4, 1, 1, &RunSinks::default())).unwrap();
    assert_eq!(snapshot_bits(&st.gvars), g0);
    assert_eq!(snapshot_bits(&st.dvars), d0);
    with_ctx(&f.cfg, |ctx| run_training(&mut st, &f.data, ctx, bb.as_ref(), 4, 1, 2, &RunSinks::default())).unwrap();
    assert_ne!(snapshot_bits(&st.gvars), g0);
    assert_ne!(snapshot_bits(&st.dvars), d0);
}

#[test]
fn discriminator_is_frozen_until_adversarial_start() {
    let mut cfg = micro();
    cfg.train.adv_start = 3;
    let f = fixture(cfg);
    let bb = f.cfg.backbone().unwrap();
    let mut st = TrainState::new(3, &f.cfg.generator, &f.cfg.processor, &f.cfg.disc, &f.cfg.train).unwrap();
    let d0 = snapshot_bits(&st.dvars);
    let log = with_ctx(&f.cfg, |ctx| run_training(&mut st, &f.data, ctx, bb.as_ref(), 4, 1, 3, &RunSinks::default())).unwrap().log;
    assert_eq!(snapshot_bits(&st.dvars), d0);
    assert!(log.iter().all(|b| b.components.adv == 0.0 && b.components.fm == 0.0));
    let log = with_ctx(&f.cfg, |ctx| run_training(&mut st, &f.data, ctx, bb.as_ref(), 4, 1, 4, &RunSinks::default())).unwrap().log;
    assert_ne!(snapshot_bits(&st.dvars), d0);
    assert!(log[0].components.fm > 0.0);
}

#[test]
fn resumed_training_matches_uninterrupted_training_bitwise() {
    let mut cfg = micro();
    cfg.train.adv_start = 1;
    cfg.train.warmup = 2;
    cfg.train.checkpoint_every = 2;
    let f = fixture(cfg);
    let bb = f.cfg.backbone().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let sinks = RunSinks { log: Some(&dir.path().join("loss.jsonl")), checkpoints: Some(dir.path()), config: f.cfg.to_json() };
    let mut a = TrainState::new(4, &f.cfg.generator, &f.cfg.processor, &f.cfg.disc, &f.cfg.train).unwrap();
    let out = with_ctx(&f.cfg, |ctx| run_training(&mut a, &f.data, ctx, bb.as_ref(), 4, 1, 4, &sinks)).unwrap();
    assert_eq!(out.checkpoints.iter().map(|p| p.file_name().unwrap().to_str().unwrap().to_string()).collect::<Vec<_>>(), [
        "step_00000002.vsck",
        "step_00000004.vsck",
        "last.vsck"
    ]);
    assert_eq!(vstain::losses::read_log(&dir.path().join("loss.jsonl")).unwrap(), out.log);

    let ck = Checkpoint::load(&dir.path().join("step_00000002.vsck")).unwrap();
    assert_eq!(ck.step, 2);
    let mut b = ck.restore(&f.cfg.generator, &f.cfg.processor, &f.cfg.disc, &f.cfg.train).unwrap();
    with_ctx(&f.cfg, |ctx| run_training(&mut b, &f.data, ctx, bb.as_ref(), 4, 1, 4, &RunSinks::default())).unwrap();
    assert_eq!(b.step, 4);
    assert_eq!(snapshot_bits(&a.gvars), snapshot_bits(&b.gvars));
    assert_eq!(snapshot_bits(&a.dvars), snapshot_bits(&b.dvars));
    assert_eq!(snapshot_bits(&a.ema.shadow), snapshot_bits(&b.ema.shadow));

    // the EMA weights survive on their own and differ from the live weights
    let last = Checkpoint::load(&dir.path().join("last.vsck")).unwrap();
    assert_eq!(snapshot_bits(&last.ema_vars().unwrap()), snapshot_bits(&a.ema.shadow));
    assert_ne!(snapshot_bits(&a.ema.shadow), snapshot_bits(&a.gvars));
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let f = fixture(micro());
    let st = TrainState::new(5, &f.cfg.generator, &f.cfg.processor, &f.cfg.disc, &f.cfg.train).unwrap();
    let bytes = Checkpoint::from_state(&st, f.cfg.to_json()).to_bytes();
    assert!(Checkpoint::from_bytes(&bytes).is_ok());
    for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
    }
    let mut flipped = bytes.clone();
    let mid = flipped.len() / 2;
    flipped[mid] ^= 0x40;
    assert!(matches!(Checkpoint::from_bytes(&flipped), Err(Error::Checkpoint(_))));
    // a checkpoint from another architecture does not restore
    let mut other = micro();
    other.generator.head_channels = 4;
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    assert!(ck.restore(&other.generator, &other.processor, &other.disc, &other.train).is_err());
}

#[test]
fn token_drops_are_sampled_per_item() {
    let mut cfg = micro();
    cfg.train.batch_size = 64;
    let f = fixture(cfg);
    let bb = f.cfg.backbone().unwrap();
    let b = f.data.batch(6, 0, &f.cfg.train, bb.as_ref(), f.cfg.processor.grid_side, 1).unwrap();
    let kinds: std::collections::HashSet<Drops> = b.drops.iter().copied().collect();
    assert!(kinds.len() >= 3);
}
