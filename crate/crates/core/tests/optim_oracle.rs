//! Optimizer updates against independent scalar-loop oracles.

mod common;

use common::optim_cases as c;

#[test]
fn adamw_matches_scalar_oracle() {
    c::adamw_matches_scalar_oracle();
}

#[test]
fn adamw_rms_matches_scalar_oracle() {
    c::adamw_rms_matches_scalar_oracle();
}

#[test]
fn rms_scaling_is_adamw_times_scale() {
    c::rms_scaling_is_adamw_times_scale();
}

#[test]
fn unit_rms_weights_give_identical_update() {
    c::unit_rms_weights_give_identical_update();
}

#[test]
fn zero_weights_use_the_floor() {
    c::zero_weights_use_the_floor();
}

#[test]
fn first_adam_step_moves_by_lr() {
    c::first_adam_step_moves_by_lr();
}

#[test]
fn adafactor_matches_scalar_oracle() {
    c::adafactor_matches_scalar_oracle();
}

#[test]
fn adafactor_rank_one_is_exact() {
    c::adafactor_rank_one_is_exact();
}

#[test]
fn adafactor_update_rms_is_clipped() {
    c::adafactor_update_rms_is_clipped();
}

#[test]
fn zero_gradient_is_a_fixed_point() {
    c::zero_gradient_is_a_fixed_point();
}

#[test]
fn clip_bounds_norm() {
    c::clip_bounds_norm();
}

#[test]
fn non_finite_gradient_names_the_parameter_and_changes_nothing() {
    c::non_finite_gradient_names_the_parameter_and_changes_nothing();
}

#[test]
fn optimizer_applies_tensor_level_updates() {
    c::optimizer_applies_tensor_level_updates();
}
