mod common;

use vstain::error::Error;
use vstain::generator::{build_1024_variant, Generator, GeneratorConfig, Modulation};
use vstain::nn::{instance_norm, VarMap};
use vstain::processor::{FeatureProcessor, ProcessorConfig};
use vstain::training::{Drops, StepContext, TrainState};
use vstain_tensor::{no_grad, Tensor};

use common::{micro, uniform};

fn micro_generator(seed: u64) -> (VarMap, Generator) {
    let c = micro();
    let vm = VarMap::new(seed);
    let g = Generator::new(&vm, &c.generator, &c.processor).unwrap();
    (vm, g)
}

fn inputs(n: usize, seed: u64) -> (Tensor, Tensor) {
    let c = micro();
    let r = c.generator.resolution;
    let g = c.processor.grid_side;
    (uniform(&[n, 3, r, r], -1.0, 1.0, seed), uniform(&[n, c.processor.token_dim, g, g], -1.0, 1.0, seed + 1))
}

fn randomize(vm: &VarMap, seed: u64) {
    for (k, p) in vm.params().into_iter().enumerate() {
        let n = p.shape().iter().product();
        p.set_data(uniform(&[n], -0.3, 0.3, seed + k as u64).to_vec());
    }
}

#[test]
fn output_is_aligned_bounded_and_deterministic() {
    let (_, g) = micro_generator(1);
    let (x, t) = inputs(2, 10);
    let off = [false, false];
    let a = no_grad(|| g.forward_tokens(&x, &t, &[0, 3], &off, &off)).unwrap();
    let b = no_grad(|| g.forward_tokens(&x, &t, &[0, 3], &off, &off)).unwrap();
    assert_eq!(a.shape(), x.shape());
    assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    assert!(a.bitwise_eq(&b));
}

#[test]
fn init_output_ignores_tokens_and_class() {
    let (_, g) = micro_generator(2);
    let (x, t1) = inputs(2, 20);
    let t2 = uniform(t1.shape(), -5.0, 5.0, 99);
    let off = [false, false];
    let a = no_grad(|| g.forward_tokens(&x, &t1, &[0, 1], &off, &off)).unwrap();
    let b = no_grad(|| g.forward_tokens(&x, &t2, &[3, 2], &off, &off)).unwrap();
    let c = no_grad(|| g.forward_tokens(&x, &t2, &[3, 2], &[true, true], &[true, true])).unwrap();
    assert!(a.bitwise_eq(&b));
    assert!(a.bitwise_eq(&c));
}

#[test]
fn drop_flags_equal_zero_maps_and_null_token() {
    let (vm, g) = micro_generator(3);
    randomize(&vm, 300);
    let (x, t) = inputs(2, 30);
    let cond = no_grad(|| g.processor.forward(&t)).unwrap();
    let zeros = cond.zeros_like();
    let null = g.config().null_index();
    let off = [false, false];
    let dropped_uni = no_grad(|| g.generate(&x, &cond, &[1, 2], &[true, false], &off)).unwrap();
    let mixed = cond.drop_samples(&[true, false]);
    let manual = no_grad(|| g.generate(&x, &mixed, &[1, 2], &off, &off)).unwrap();
    assert!(dropped_uni.bitwise_eq(&manual));
    let all_zero = no_grad(|| g.generate(&x, &zeros, &[1, 2], &[true, true], &off)).unwrap();
    let zero_maps = no_grad(|| g.generate(&x, &zeros, &[1, 2], &off, &off)).unwrap();
    assert!(all_zero.bitwise_eq(&zero_maps));
    // the null index is reachable only through the drop flag
    let dropped_cls = no_grad(|| g.generate(&x, &cond, &[1, 2], &off, &[true, true])).unwrap();
    assert!(matches!(g.generate(&x, &cond, &[null, null], &off, &off), Err(Error::InvalidToken { .. })));
    let emb_out = no_grad(|| g.generate(&x, &cond, &[1, 2], &off, &off)).unwrap();
    assert!(!dropped_cls.bitwise_eq(&emb_out));
}

#[test]
fn invalid_token_lists_valid_range() {
    let (_, g) = micro_generator(4);
    let (x, t) = inputs(1, 40);
    match g.forward_tokens(&x, &t, &[7], &[false], &[false]) {
        Err(Error::InvalidToken { token, valid }) => {
            assert_eq!(token, "7");
            assert_eq!(valid, "0..=3");
        }
        other => panic!("expected an invalid-token error, got {other:?}"),
    }
}

#[test]
fn tokens_diverge_after_training() {
    let c = micro();
    let mut st = TrainState::new(5, &c.generator, &c.processor, &c.disc, &c.train).unwrap();
    let ext = c.perceptual_extractor().unwrap();
    let m = c.stain.stain_matrix().unwrap();
    let ctx = StepContext { train: &c.train, loss: &c.loss, stain: &c.stain, stain_matrix: &m, perceptual: &ext };
    let (x, t) = inputs(2, 50);
    let target = uniform(&[2, 3, 16, 16], -1.0, 1.0, 51);
    let batch = vstain::training::Batch {
        hne: x.clone(),
        ihc: target,
        token_grid: t.clone(),
        tokens: vec![0, 1],
        drops: vec![Drops { cls: false, uni: false }; 2],
    };
    let off = [false];
    let x0 = x.narrow(0, 0, 1);
    let t0 = t.narrow(0, 0, 1);
    let before = [0, 1].map(|k| no_grad(|| st.generator.forward_tokens(&x0, &t0, &[k], &off, &off)).unwrap());
    assert!(before[0].bitwise_eq(&before[1]));
    for _ in 0..3 {
        vstain::training::training_step(&mut st, &batch, &ctx).unwrap();
    }
    let after = [0, 1].map(|k| no_grad(|| st.generator.forward_tokens(&x0, &t0, &[k], &off, &off)).unwrap());
    assert!(after[0].max_abs_diff(&after[1]) > 0.0);
}

#[test]
fn every_parameter_receives_gradient() {
    let c = micro();
    let mut st = TrainState::new(6, &c.generator, &c.processor, &c.disc, &c.train).unwrap();
    let ext = c.perceptual_extractor().unwrap();
    let m = c.stain.stain_matrix().unwrap();
    let ctx = StepContext { train: &c.train, loss: &c.loss, stain: &c.stain, stain_matrix: &m, perceptual: &ext };
    let (x, t) = inputs(2, 60);
    let batch = vstain::training::Batch {
        hne: x.clone(),
        ihc: uniform(&[2, 3, 16, 16], -1.0, 1.0, 61),
        token_grid: t.clone(),
        tokens: vec![0, 1],
        drops: vec![Drops { cls: false, uni: false }; 2],
    };
    // one update moves the zero-initialized modulation weights off zero
    vstain::training::training_step(&mut st, &batch, &ctx).unwrap();
    let out = st.generator.forward_tokens(&x, &t, &[2, 3], &[false, false], &[false, true]).unwrap();
    let loss = vstain::losses::l1_full(&out, &batch.ihc);
    let grads = loss.backward();
    let dead: Vec<String> = st
        .gvars
        .params()
        .iter()
        .filter(|p| grads.get(&p.get()).is_none_or(|g| g.data().iter().all(|&v| v == 0.0)))
        .map(|p| p.name().to_string())
        .collect();
    assert!(dead.is_empty(), "parameters without gradient: {dead:?}");
}

#[test]
fn zero_conditioning_leaves_only_film_terms() {
    let vm = VarMap::new(7);
    let vb = vm.builder().pp("m");
    let with_spade = Modulation::new(&vb, 4, Some((3, 5)), Some(6));
    let film_only = Modulation::new(&vb, 4, None, Some(6));
    randomize(&vm, 700);
    let h = uniform(&[2, 4, 5, 5], -2.0, 2.0, 70);
    let e = uniform(&[2, 6], -1.0, 1.0, 71);
    let u = Tensor::zeros(&[2, 3, 5, 5]);
    let a = with_spade.forward(&h, Some(&u), Some(&e)).unwrap();
    let b = film_only.forward(&h, None, Some(&e)).unwrap();
    assert!(a.bitwise_eq(&b));
    // a fresh FiLM layer is the identity affine, so modulation reduces to instance norm
    let fresh = Modulation::new(&VarMap::new(70).builder().pp("fresh"), 4, Some((3, 5)), Some(6));
    let c = fresh.forward(&h, Some(&uniform(&[2, 3, 5, 5], -1.0, 1.0, 72)), Some(&e)).unwrap();
    assert!(c.max_abs_diff(&instance_norm(&h, 1e-5)) < 1e-12);
}

#[test]
fn edge_encoder_ablation_gives_zero_features() {
    let mut c = micro();
    c.generator.use_edge_encoder = false;
    let vm = VarMap::new(8);
    let g = Generator::new(&vm, &c.generator, &c.processor).unwrap();
    let (x, _) = inputs(2, 80);
    let feats = g.edge_encode(&x);
    let sides: Vec<usize> = feats.iter().map(|f| f.dim(2)).collect();
    assert_eq!(sides, c.generator.edge_scales());
    assert!(feats.iter().all(|f| f.dim(1) == c.generator.edge_channels && f.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn processor_emits_one_map_per_scale() {
    let pcfg = ProcessorConfig { token_dim: 6, grid_side: 32, channels: 4, num_scales: 4, res_blocks: 2, groups: 2 };
    let vm = VarMap::new(9);
    let p = FeatureProcessor::new(&vm.builder(), &pcfg).unwrap();
    let maps = no_grad(|| p.forward(&uniform(&[1, 6, 32, 32], -1.0, 1.0, 90))).unwrap();
    let shapes: Vec<Vec<usize>> = maps.maps.iter().map(|m| m.shape().to_vec()).collect();
    assert_eq!(shapes, vec![vec![1, 4, 32, 32], vec![1, 4, 64, 64], vec![1, 4, 128, 128], vec![1, 4, 256, 256]]);
    // with every bias at zero the processor is positively homogeneous, so zero in gives zero out
    for q in vm.params() {
        if q.name().ends_with("bias") {
            q.set_data(vec![0.0; q.shape().iter().product()]);
        }
    }
    let zero = no_grad(|| p.forward(&Tensor::zeros(&[1, 6, 32, 32]))).unwrap();
    assert!(zero.maps.iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn scale_mismatch_is_a_construction_error() {
    let c = micro();
    let mut p = c.processor.clone();
    p.num_scales = 3;
    assert!(matches!(Generator::new(&VarMap::new(0), &c.generator, &p), Err(Error::Config(_))));
}

#[test]
fn variant_1024_keeps_bottleneck_and_runs_at_full_size() {
    let base = GeneratorConfig {
        encoder_channels: vec![3, 4, 4, 4, 4, 4],
        bottleneck_blocks: 1,
        head_channels: 4,
        edge_channels: 2,
        spade_hidden: 4,
        embedding_dim: 4,
        ..GeneratorConfig::default()
    };
    let pcfg = ProcessorConfig { token_dim: 4, grid_side: 32, channels: 4, num_scales: 4, res_blocks: 1, groups: 1 };
    let v = build_1024_variant(&base, 4).unwrap();
    assert_eq!(base.bottleneck_side(), 16);
    assert_eq!(v.bottleneck_side(), 16);
    assert_eq!(v.decoder_scales(), vec![32, 64, 128, 256, 512, 1024]);
    assert!(build_1024_variant(&v, 4).is_err());
    let vm = VarMap::new(10);
    let g = Generator::new(&vm, &v, &pcfg).unwrap();
    let x = uniform(&[1, 3, 1024, 1024], -1.0, 1.0, 100);
    let t = uniform(&[1, 4, 32, 32], -1.0, 1.0, 101);
    let y = no_grad(|| g.forward_tokens(&x, &t, &[0], &[false], &[false])).unwrap();
    assert_eq!(y.shape(), &[1, 3, 1024, 1024]);
}
