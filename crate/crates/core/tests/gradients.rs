mod common;

use candle_core::{DType, Device, Tensor};
use common::{binary, grad_rel_error, random};
use geoprompt::fusion::{Bfu, Sga};
use geoprompt::losses::{bce_loss, dice_loss, segmentation_loss};
use geoprompt::nn::sigmoid;
use geoprompt::params::ParamStore;
use geoprompt::prompt_geometry::{
    contrastive_prompt_loss, prompt_attention, AttentionMode, GeometricPrompts, ReferenceEmbeddings, Similarity,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

#[test]
fn dice_gradient_wrt_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (h, w) = (rng.random_range(2..6), rng.random_range(2..6));
        let z = random(&mut rng, &[2, 3, h, w], -3.0, 3.0);
        let t = binary(&mut rng, &[2, 3, h, w], 0.3);
        let err = grad_rel_error(&|z| dice_loss(&sigmoid(z).unwrap(), &t).unwrap(), &z);
        assert!(err < TOL, "dice rel error {err}");
    }
}

#[test]
fn bce_gradient_wrt_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let (h, w) = (rng.random_range(2..6), rng.random_range(2..6));
        let z = random(&mut rng, &[1, 3, h, w], -6.0, 6.0);
        let t = binary(&mut rng, &[1, 3, h, w], 0.4);
        let err = grad_rel_error(&|z| bce_loss(z, &t).unwrap(), &z);
        assert!(err < TOL, "bce rel error {err}");
    }
}

#[test]
fn segmentation_gradient_wrt_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let b = rng.random_range(1..3);
        let z = random(&mut rng, &[b, 3, 4, 4], -4.0, 4.0);
        let t = binary(&mut rng, &[b, 3, 4, 4], 0.25);
        let err = grad_rel_error(&|z| segmentation_loss(z, &t).unwrap().seg, &z);
        assert!(err < TOL, "segmentation rel error {err}");
    }
}

#[test]
fn contrastive_gradient_wrt_prompts() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut done = 0;
    while done < 24 {
        let c = rng.random_range(3..10);
        let valid = [rng.random_bool(0.8), rng.random_bool(0.8), rng.random_bool(0.8)];
        if !valid.iter().any(|&v| v) {
            continue;
        }
        let r = random(&mut rng, &[3, c], -1.0, 1.0);
        let keep = Tensor::from_vec(valid.map(|v| if v { 1.0 } else { 0.0 }).to_vec(), (3, 1), &Device::Cpu).unwrap();
        let refs = ReferenceEmbeddings { r: r.broadcast_mul(&keep).unwrap(), valid };
        let p = random(&mut rng, &[3, c], -1.0, 1.0);
        let similarity = if done % 2 == 0 { Similarity::Cosine } else { Similarity::Dot };
        let tau = if similarity == Similarity::Cosine { 0.07 } else { 1.0 };
        let err = grad_rel_error(&|p| contrastive_prompt_loss(p, &refs, tau, similarity).unwrap().loss, &p);
        assert!(err < TOL, "contrastive rel error {err} ({similarity:?})");
        done += 1;
    }
}

#[test]
fn fusion_gradient_end_to_end() {
    let (c, s) = (8, 4);
    let store = ParamStore::new(DType::F64, 11);
    let bfu = Bfu::new(c, 4, store.root().pp("bfu")).unwrap();
    let sga = Sga::new(c, store.root().pp("sga")).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f_rgb = random(&mut rng, &[2, c, s, s], -1.0, 1.0);
    let f_d = random(&mut rng, &[2, c, s, s], -1.0, 1.0);
    let prompts = random(&mut rng, &[3, c], -0.5, 0.5);
    let weights = random(&mut rng, &[2, c, s, s], -1.0, 1.0);
    let head_weights = random(&mut rng, &[2, 1, s, s], -1.0, 1.0);

    let run = |f_rgb: &Tensor, f_d: &Tensor, prompts: &Tensor| -> Tensor {
        let p = GeometricPrompts::from_tensor(prompts).unwrap();
        let cf = prompt_attention(f_d, &p, AttentionMode::Sigmoid).unwrap();
        let fused = bfu.fuse(f_rgb, f_d).unwrap();
        let blocks = [cf.class(0).unwrap(), cf.class(1).unwrap(), cf.class(2).unwrap()];
        let aug = sga.augment(&blocks, &fused).unwrap();
        let a = (&aug.decoder_input * &weights).unwrap().sum_all().unwrap();
        let b = (&aug.anatomic_logits * &head_weights).unwrap().sum_all().unwrap();
        (a + b).unwrap()
    };
    let e = grad_rel_error(&|x| run(&f_rgb, &f_d, x), &prompts);
    assert!(e < TOL, "wrt prompts: {e}");
    let e = grad_rel_error(&|x| run(&f_rgb, x, &prompts), &f_d);
    assert!(e < TOL, "wrt depth features: {e}");
    let e = grad_rel_error(&|x| run(x, &f_d, &prompts), &f_rgb);
    assert!(e < TOL, "wrt rgb features: {e}");
}
