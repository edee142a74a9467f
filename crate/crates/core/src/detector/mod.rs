//! Two-stage hierarchical reasoning detector over a tiny strided pyramid.

pub mod backbone;
pub mod loss;
pub mod params;
pub mod stages;
pub mod train;

pub use backbone::{backbone_forward, backbone_forward_tape, FeaturePyramid, PyramidVars};
pub use loss::{assign_targets, detector_loss, StageTargets};
pub use params::{
    apply_named_tensors, bind_model, BackboneParams, BoundHr, BoxHeadParams, ConvLayer, HrParams,
};
pub use stages::{
    decode_stage_boxes, hr_forward, pixel_roi_stage, scale_roi_stage, stage_outputs, HrForward,
    Stage1Trace, Stage2Trace, StageOutputs, StageVars,
};
pub use train::{
    eval_proposal_seed, evaluate_split, infer, inspect_attention, nms, scene_indices, sgd_apply,
    train_loop, train_proposal_seed, train_step, GraphDump, Split, TrainResult,
};
