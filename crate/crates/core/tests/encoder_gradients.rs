//! Parameter gradients of the full multi-task triplet loss, through both
//! encoders, against central differences.

mod common;

use common::full_loss::{cnn_worst, vit_worst};
use common::ops::TOL;

#[test]
fn cnn_encoders_global_and_spatial() {
    let worst = cnn_worst();
    assert!(worst < TOL, "cnn worst relative error {worst:e}");
}

#[test]
fn vit_encoders() {
    let worst = vit_worst();
    assert!(worst < TOL, "vit worst relative error {worst:e}");
}
