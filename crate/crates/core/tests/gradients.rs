mod common;

use common::*;

fn assert_passes(r: GradReport) {
    assert!(
        r.passed(),
        "{}: max relative error {:.2e} over {} seeds ({} checked, {} skipped)",
        r.name,
        r.max_rel_error,
        r.seeds,
        r.checked,
        r.skipped
    );
}

#[test]
fn conv2d() {
    assert_passes(grad_conv());
}

#[test]
fn linear() {
    assert_passes(grad_linear());
}

#[test]
fn relu() {
    assert_passes(grad_relu());
}

#[test]
fn batch_norm() {
    assert_passes(grad_batch_norm());
}

#[test]
fn dropout() {
    assert_passes(grad_dropout());
}

#[test]
fn upsample() {
    assert_passes(grad_upsample());
}

#[test]
fn cosine() {
    assert_passes(grad_cosine());
}

#[test]
fn cross_entropy() {
    assert_passes(grad_cross_entropy());
}

#[test]
fn pseudo_cls_loss() {
    assert_passes(grad_pseudo_cls());
}

#[test]
fn bce() {
    assert_passes(grad_bce());
}

#[test]
fn seg_loss() {
    assert_passes(grad_seg_loss());
}

#[test]
fn seg_loss_through_pooling() {
    assert_passes(grad_episode_loss());
}

#[test]
fn seg_loss_through_encoder() {
    assert_passes(grad_seg_end_to_end());
}

#[test]
fn pseudo_loss_through_decoder() {
    assert_passes(grad_pseudo_end_to_end());
}

#[test]
fn refinement_objective() {
    assert_passes(grad_refinement());
}
