mod common;

use vstain::discriminator::{hinge_d_loss, hinge_g_loss, r1_penalty, Discriminator, DiscriminatorConfig};
use vstain::losses::{edge_loss, l1_at};
use vstain::nn::VarMap;
use vstain::stain::{dab_loss, StainConfig, StainMatrix};
use vstain_tensor::Tensor;

use common::{gradcheck, uniform};

const SHAPE: [usize; 4] = [1, 3, 16, 16];
const TOL: f64 = 1e-2;

fn point(seed: u64) -> Vec<f64> {
    uniform(&SHAPE, -0.9, 0.9, seed).to_vec()
}

fn all() -> Vec<usize> {
    (0..SHAPE.iter().product()).collect()
}

#[test]
fn dab_loss_gradient() {
    let m = StainMatrix::hdab();
    let target = uniform(&SHAPE, -0.9, 0.9, 1);
    let err = gradcheck(|x| dab_loss(x, &target, &m, &StainConfig::default()), &point(2), &SHAPE, &all(), 1e-5);
    assert!(err < TOL, "{err}");
}

#[test]
fn edge_loss_gradient() {
    let hne = uniform(&SHAPE, -0.9, 0.9, 3);
    let err = gradcheck(|x| edge_loss(x, &hne, &[16, 8]), &point(4), &SHAPE, &all(), 1e-6);
    assert!(err < TOL, "{err}");
}

#[test]
fn low_resolution_l1_gradient() {
    let target = uniform(&SHAPE, -0.9, 0.9, 5);
    let err = gradcheck(|x| l1_at(x, &target, 4), &point(6), &SHAPE, &all(), 1e-6);
    assert!(err < TOL, "{err}");
}

#[test]
fn hinge_gradients() {
    let shape = [2, 1, 4, 4];
    let logits = uniform(&shape, -3.0, 3.0, 7).to_vec();
    let other = uniform(&shape, -3.0, 3.0, 8);
    let coords: Vec<usize> = (0..32).collect();
    let e1 = gradcheck(|x| hinge_d_loss(&[x.clone()], &[other.clone()]), &logits, &shape, &coords, 1e-6);
    let e2 = gradcheck(|x| hinge_d_loss(&[other.clone()], &[x.clone()]), &logits, &shape, &coords, 1e-6);
    let e3 = gradcheck(|x| hinge_g_loss(&[x.clone()]), &logits, &shape, &coords, 1e-6);
    assert!(e1 < TOL && e2 < TOL && e3 < TOL, "{e1} {e2} {e3}");
}

#[test]
fn r1_gradient_with_respect_to_discriminator_weights() {
    let vm = VarMap::new(9);
    let d = Discriminator::new(&vm, &DiscriminatorConfig { scales: 2, channels: vec![4, 4], r1_gamma: 1.0, fm_layers: vec![] }).unwrap();
    let real = uniform(&[2, 3, 16, 16], -1.0, 1.0, 10);
    let penalty = || r1_penalty(&real, 1.0, |t| d.discriminate(t).logits);
    let grads = penalty().backward();
    let h = 1e-6;
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for p in vm.params() {
        let base = p.get().to_vec();
        let analytic = grads.get(&p.get()).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; base.len()]);
        for i in (0..base.len()).step_by(base.len().div_ceil(6)) {
            let mut v = base.clone();
            v[i] = base[i] + h;
            p.set_data(v.clone());
            let up = penalty().item();
            v[i] = base[i] - h;
            p.set_data(v);
            let down = penalty().item();
            p.set_data(base.clone());
            let num = (up - down) / (2.0 * h);
            diff += (analytic[i] - num).powi(2);
            na += analytic[i].powi(2);
            nn += num * num;
        }
    }
    let err = diff.sqrt() / na.sqrt().max(nn.sqrt());
    assert!(na > 0.0 && err < TOL, "{err}");
}

#[test]
fn r1_gradient_with_respect_to_real_images() {
    let vm = VarMap::new(11);
    let d = Discriminator::new(&vm, &DiscriminatorConfig { scales: 1, channels: vec![4, 4], r1_gamma: 2.0, fm_layers: vec![] }).unwrap();
    let coords: Vec<usize> = (0..768).step_by(7).collect();
    let err = gradcheck(|x: &Tensor| r1_penalty(x, 2.0, |t| d.discriminate(t).logits), &point(12), &SHAPE, &coords, 1e-5);
    assert!(err < TOL, "{err}");
}
