//! Analytic vs central-difference gradients, in f64.

use std::collections::BTreeSet;

use uie_dal::autodiff::GradCheckConfig;
use uie_dal::verification::{composite_case, negative_control, op_cases};

const ALL_OPS: [&str; 12] = [
    "conv2d",
    "leaky_relu",
    "max_pool2d",
    "upsample_nearest",
    "concat_channels",
    "linear",
    "softmax",
    "sigmoid",
    "global_avg_pool",
    "mse_reduce",
    "cross_entropy_reduce",
    "neg_entropy_reduce",
];

#[test]
fn every_op_kind_passes_in_isolation() {
    let cases = op_cases(&GradCheckConfig::default()).unwrap();
    let mut covered = BTreeSet::new();
    for c in &cases {
        assert!(c.report.passed(), "{}: {}", c.name, c.report);
        assert!(c.report.checked > 0, "{}", c.name);
        covered.extend(c.ops.iter().copied());
    }
    for op in ALL_OPS {
        assert!(covered.contains(op), "op {op} has no gradient check");
    }
}

#[test]
fn composed_unet_with_all_losses_passes() {
    let c = composite_case(&GradCheckConfig::default()).unwrap();
    assert!(c.report.passed(), "{}", c.report);
    // the skipped fraction must stay small or the check means little
    assert!(c.report.skipped_branch_changes * 20 < c.report.checked, "{}", c.report);
    for op in ALL_OPS {
        assert!(c.ops.contains(&op), "composite lacks {op}");
    }
}

#[test]
fn sign_flip_control_fails() {
    let c = negative_control(&GradCheckConfig::default()).unwrap();
    assert!(!c.report.passed(), "{}", c.report);
    assert!(c.ok());
}
