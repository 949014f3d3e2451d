mod common;

use vstain::discriminator::{feature_matching_loss, hinge_d_loss, hinge_g_loss, r1_penalty, Discriminator, DiscriminatorConfig};
use vstain::nn::{frozen, VarMap};
use vstain_tensor::Tensor;

use common::uniform;

fn small() -> DiscriminatorConfig {
    DiscriminatorConfig { scales: 2, channels: vec![4, 8], r1_gamma: 1.0, fm_layers: vec![] }
}

#[test]
fn output_per_scale_follows_stride_arithmetic_and_is_deterministic() {
    let d = Discriminator::new(&VarMap::new(1), &small()).unwrap();
    let x = uniform(&[2, 3, 16, 16], -1.0, 1.0, 1);
    let a = d.discriminate(&x);
    let b = d.discriminate(&x);
    let sides: Vec<usize> = a.logits.iter().map(|l| l.dim(2)).collect();
    assert_eq!(sides, vec![4, 2]);
    assert_eq!(a.features.len(), 2);
    assert!(a.features.iter().all(|f| f.len() == 2));
    assert!(a.logits.iter().zip(&b.logits).all(|(p, q)| p.bitwise_eq(q)));
}

#[test]
fn feature_matching_is_zero_symmetric_and_matches_hand_values() {
    let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[1, 1, 2, 2]);
    let b = Tensor::from_vec(vec![0.0, 2.5, 3.0, 1.0], &[1, 1, 2, 2]);
    let c = Tensor::from_vec(vec![1.0, 1.0, 1.0, 1.0], &[1, 1, 2, 2]);
    let fake = vec![vec![a.clone(), c.clone()]];
    let real = vec![vec![b.clone(), c.clone()]];
    assert_eq!(feature_matching_loss(&fake, &fake).unwrap().item(), 0.0);
    // layer 0: (1 + 0.5 + 0 + 3) / 4; layer 1 identical
    assert_eq!(feature_matching_loss(&fake, &real).unwrap().item(), 1.125);
    assert_eq!(feature_matching_loss(&real, &fake).unwrap().item(), 1.125);
    // scales are averaged
    let two = |x: &Vec<Vec<Tensor>>, y: &Vec<Tensor>| vec![x[0].clone(), y.clone()];
    let l = feature_matching_loss(&two(&fake, &vec![c.clone(), c.clone()]), &two(&real, &vec![c.clone(), c.clone()])).unwrap();
    assert_eq!(l.item(), 0.5625);
    assert!(feature_matching_loss(&fake, &[vec![b]]).is_err());
}

#[test]
fn hinge_saturates_and_generator_loss_falls_with_fake_logits() {
    let hi = [Tensor::full(&[1, 1, 2, 2], 3.0), Tensor::full(&[1, 1, 1, 1], 2.0)];
    let lo = [Tensor::full(&[1, 1, 2, 2], -3.0), Tensor::full(&[1, 1, 1, 1], -2.0)];
    assert_eq!(hinge_d_loss(&hi, &lo).item(), 0.0);
    let mut prev = f64::INFINITY;
    for v in [-2.0, -0.5, 0.0, 0.7, 4.0] {
        let g = hinge_g_loss(&[Tensor::full(&[1, 1, 2, 2], v)]).item();
        assert!(g < prev);
        prev = g;
    }
}

#[test]
fn r1_of_an_input_blind_critic_is_zero() {
    let x = uniform(&[2, 3, 16, 16], -1.0, 1.0, 2);
    let p = r1_penalty(&x, 1.0, |t| vec![t.scale(0.0).sum_all().add_scalar(3.0)]);
    assert_eq!(p.item(), 0.0);
    let vm = VarMap::new(3);
    let d = Discriminator::new(&vm, &small()).unwrap();
    for p in vm.params().iter().filter(|p| p.name().contains("conv0.weight")) {
        p.set_data(vec![0.0; p.shape().iter().product()]);
    }
    assert_eq!(r1_penalty(&x, 1.0, |t| d.discriminate(t).logits).item(), 0.0);
}

#[test]
fn r1_of_a_single_pixel_linear_critic_is_half_gamma_w_squared() {
    let x = uniform(&[3, 3, 4, 4], -1.0, 1.0, 4);
    for (gamma, w) in [(1.0, 0.7), (2.5, -1.3)] {
        let p = r1_penalty(&x, gamma, |t| vec![t.narrow(1, 0, 1).narrow(2, 1, 1).narrow(3, 2, 1).scale(w)]);
        assert!((p.item() - gamma / 2.0 * w * w).abs() < 1e-12);
    }
}

#[test]
fn feature_matching_under_freezing_sends_no_gradient_to_discriminator() {
    let vm = VarMap::new(5);
    let d = Discriminator::new(&vm, &small()).unwrap();
    let fake = Tensor::var(uniform(&[1, 3, 16, 16], -1.0, 1.0, 6).to_vec(), &[1, 3, 16, 16]);
    let real = uniform(&[1, 3, 16, 16], -1.0, 1.0, 7);
    let fo = frozen(|| d.discriminate(&fake));
    let ro = frozen(|| d.discriminate(&real));
    let fm = feature_matching_loss(&d.fm_features(&fo), &d.fm_features(&ro)).unwrap();
    let grads = fm.backward();
    assert!(vm.params().iter().all(|p| grads.get(&p.get()).is_none()));
    assert!(grads.get(&fake).is_some_and(|g| g.data().iter().any(|&v| v != 0.0)));
    // unfrozen, the same loss does reach the discriminator
    let fo = d.discriminate(&fake);
    let fm = feature_matching_loss(&d.fm_features(&fo), &d.fm_features(&ro)).unwrap();
    let grads = fm.backward();
    assert!(vm.params().iter().any(|p| grads.get(&p.get()).is_some()));
}
