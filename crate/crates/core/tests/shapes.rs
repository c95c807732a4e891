mod common;

use common::*;
use vidseg::bilateral::stride8_side;
use vidseg::model::{ModelConfig, SegmentationModel, Variant};
use vidseg::Error;

fn toy() -> SegmentationModel {
    SegmentationModel::new(&ModelConfig::toy(4, Variant::SingleFrame), 0).unwrap()
}

#[test]
fn square_sizes_across_the_range() {
    let model = toy();
    for s in sweep_sides() {
        check_shapes(&model, s, s).unwrap();
    }
}

#[test]
fn non_square_sizes() {
    let model = toy();
    for (h, w) in [(32, 479), (479, 33), (64, 97), (121, 45)] {
        check_shapes(&model, h, w).unwrap();
    }
}

#[test]
fn full_crop_spatial_side() {
    assert_eq!(stride8_side(479), 60);
    assert_eq!(stride8_side(64), 8);
    assert_eq!(stride8_side(33), 5);
}

#[test]
fn too_small_inputs_are_rejected() {
    let model = toy();
    let x = randn(&[1, 3, 31, 64], 0);
    let err = model.forward_single(&x, &vidseg::nn::Ctx::eval()).unwrap_err();
    assert!(matches!(err, Error::Config(_) | Error::Contract(_)), "{err}");
}
