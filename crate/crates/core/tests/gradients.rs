mod support;

use latbridge_core::losses::TranslationMode;
use support::gradcheck::{check, Loss, ALL};

fn assert_close(loss: Loss) {
    for seed in [1, 2] {
        let r = check(loss, seed);
        assert!(r.params <= 1000, "{loss:?}: {} parameters is not miniature", r.params);
        assert!(r.max_rel_f64 <= 1e-3, "{loss:?} seed {seed}: f64 rel error {:e}", r.max_rel_f64);
        assert!(r.max_rel_f32 <= 1e-2, "{loss:?} seed {seed}: f32 rel error {:e}", r.max_rel_f32);
        // A kink within the step is rare; many would mean a broken check.
        assert!(r.kinked * 50 <= r.params, "{loss:?}: {} kinked coordinates", r.kinked);
    }
}

#[test]
fn kl_gradient() {
    assert_close(Loss::Kl);
}

#[test]
fn reconstruction_gradient() {
    assert_close(Loss::Reconstruction);
}

#[test]
fn lsgan_discriminator_gradient() {
    assert_close(Loss::LsganDiscriminator);
}

#[test]
fn lsgan_generator_gradient() {
    assert_close(Loss::LsganGenerator);
}

#[test]
fn feature_matching_gradient() {
    assert_close(Loss::FeatureMatching);
}

#[test]
fn feature_l1_gradient() {
    assert_close(Loss::FeatureL1);
}

#[test]
fn vaegan_objective_gradient() {
    assert_close(Loss::VaeganObjective);
}

#[test]
fn translation_objective_gradient_every_mode() {
    for mode in [TranslationMode::L1Only, TranslationMode::FeatAdv, TranslationMode::Full] {
        assert_close(Loss::TranslationObjective(mode));
    }
}

#[test]
fn every_case_is_listed() {
    assert_eq!(ALL.len(), 10);
}

