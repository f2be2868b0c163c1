mod common;

#[test]
fn dilated_residual_block_with_projection() {
    common::gradients::dilated_residual_block_with_projection();
}

#[test]
fn dilated_residual_block_identity_shortcut() {
    common::gradients::dilated_residual_block_identity_shortcut();
}

#[test]
fn mixed_depthwise_conv() {
    common::gradients::mixed_depthwise_conv();
}

#[test]
fn squeeze_excitation() {
    common::gradients::squeeze_excitation();
}

#[test]
fn joint_pyramid_upsampling_both_inputs() {
    common::gradients::joint_pyramid_upsampling_both_inputs();
}

#[test]
fn attention_branch_and_gate() {
    common::gradients::attention_branch_and_gate();
}

#[test]
fn desk_drn_classifier() {
    common::gradients::desk_drn_classifier();
}

#[test]
fn desk_mixnet_classifier() {
    common::gradients::desk_mixnet_classifier();
}

#[test]
fn desk_segmenter() {
    common::gradients::desk_segmenter();
}

#[test]
fn loss_gradients_match_finite_differences() {
    common::gradients::loss_gradients_match_finite_differences();
}
