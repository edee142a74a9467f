//! The two reasoning stages and their composition.
//!
//! Stage 1 reasons over the pixel graph of each RoI plus the RoI graph over
//! all proposals; stage 2 pools each RoI from every pyramid level, reasons
//! over the scale graph, then again over the RoI graph. Stage 1's decoded
//! boxes, clipped to the image, become stage 2's proposals. One box head
//! serves both stages unless sharing is disabled.

use crate::detector::backbone::PyramidVars;
use crate::detector::params::{BoundHr, BoxHeadVars};
use crate::error::{Error, Result};
use crate::gam::gam_forward;
use crate::geometry::{assign_pyramid_level, decode_deltas, roi_align_taps, roi_bin_centers, Box};
use crate::graphs::{build_skeleton, NodeGeometry};
use crate::runcfg::RunConfig;
use crate::tensor::{Tape, Tensor, Var};

/// Tape handles for one stage's raw head outputs.
#[derive(Debug, Clone, Copy)]
pub struct StageVars {
    /// [R, num_classes + 1] logits.
    pub scores: Var,
    /// [R, 4] box deltas relative to the stage's own proposals.
    pub deltas: Var,
}

/// Concrete per-RoI outputs of one stage.
#[derive(Debug, Clone)]
pub struct StageOutputs {
    pub scores: Tensor,
    pub deltas: Tensor,
    /// Deltas decoded against the stage's proposals and clipped to the image.
    pub boxes: Vec<Box>,
}

/// Intermediate tape handles kept for oracles and attention inspection.
#[derive(Debug, Clone)]
pub struct Stage1Trace {
    /// Per RoI: pooled pixel nodes [S², C] before the pixel GAM.
    pub pixel_nodes: Vec<Var>,
    /// [R, D] RoI vectors before the RoI GAM.
    pub pre_roi: Var,
    /// [R, D] RoI vectors after the RoI GAM (same as pre_roi when disabled).
    pub roi_vectors: Var,
    pub outputs: StageVars,
}

#[derive(Debug, Clone)]
pub struct Stage2Trace {
    /// Per RoI: per-level projected nodes [P, D] before the scale GAM.
    pub scale_nodes: Vec<Var>,
    pub pre_roi: Var,
    pub roi_vectors: Var,
    pub outputs: StageVars,
}

fn level_of(box_: &Box, cfg: &RunConfig) -> usize {
    assign_pyramid_level(box_, cfg.levels, cfg.canonical_level(), cfg.canonical_size).level
}

fn pool_roi(
    tape: &mut Tape,
    pyramid: &PyramidVars,
    box_: &Box,
    level: usize,
    cfg: &RunConfig,
) -> Result<Var> {
    let shape = tape.shape(pyramid.levels[level]);
    let (fh, fw) = (shape[1], shape[2]);
    let taps = roi_align_taps(box_, pyramid.strides[level], cfg.roi_size, fh, fw);
    tape.roi_align(pyramid.levels[level], &taps, cfg.roi_size)
}

fn box_head(tape: &mut Tape, head: &BoxHeadVars, x: Var) -> Result<StageVars> {
    let h1 = tape.linear(x, head.fc1.w, head.fc1.b)?;
    let h1 = tape.relu(h1)?;
    let h2 = tape.linear(h1, head.fc2.w, head.fc2.b)?;
    let h2 = tape.relu(h2)?;
    Ok(StageVars {
        scores: tape.linear(h2, head.cls.w, head.cls.b)?,
        deltas: tape.linear(h2, head.reg.w, head.reg.b)?,
    })
}

fn roi_graph_pass(
    tape: &mut Tape,
    bound: &BoundHr,
    vectors: Var,
    proposals: &[Box],
    cfg: &RunConfig,
) -> Result<Var> {
    if !cfg.enable_roi {
        return Ok(vectors);
    }
    let skel = build_skeleton(&NodeGeometry::Roi {
        boxes: proposals.to_vec(),
    })?;
    gam_forward(
        tape,
        vectors,
        &skel,
        &bound.roi_gam,
        &cfg.gam_config(cfg.feature_dim),
    )
}

/// Stage 1: pixel-graph reasoning inside each RoI, then RoI-graph reasoning
/// across proposals, then the shared box head.
pub fn pixel_roi_stage(
    tape: &mut Tape,
    bound: &BoundHr,
    pyramid: &PyramidVars,
    proposals: &[Box],
    cfg: &RunConfig,
) -> Result<Stage1Trace> {
    if proposals.is_empty() {
        return Err(Error::Input(
            "stage 1 needs at least one proposal".to_string(),
        ));
    }
    let s = cfg.roi_size;
    let mut pixel_nodes = Vec::with_capacity(proposals.len());
    let mut rows = Vec::with_capacity(proposals.len());
    for box_ in proposals {
        let level = level_of(box_, cfg);
        let pooled = pool_roi(tape, pyramid, box_, level, cfg)?;
        // [C, S, S] → [S², C]: one node per bin, channels as features.
        let cs = tape.reshape(pooled, vec![cfg.channels, s * s])?;
        let nodes = tape.transpose(cs)?;
        pixel_nodes.push(nodes);

        let enhanced = if cfg.enable_pixel {
            let skel = build_skeleton(&NodeGeometry::Pixel {
                pixels: roi_bin_centers(box_, s),
                roi: *box_,
            })?;
            gam_forward(
                tape,
                nodes,
                &skel,
                &bound.pixel_gam,
                &cfg.gam_config(cfg.channels),
            )?
        } else {
            nodes
        };
        let flat = tape.reshape(enhanced, vec![1, s * s * cfg.channels])?;
        rows.push(tape.linear(flat, bound.pixel_proj.w, bound.pixel_proj.b)?);
    }
    let pre_roi = tape.concat_rows(&rows)?;
    let roi_vectors = roi_graph_pass(tape, bound, pre_roi, proposals, cfg)?;
    let outputs = box_head(tape, &bound.box_head, roi_vectors)?;
    Ok(Stage1Trace {
        pixel_nodes,
        pre_roi,
        roi_vectors,
        outputs,
    })
}

/// Stage 2: per-level pooling into the scale graph, canonical-level readout,
/// RoI-graph reasoning, and the (shared) box head.
pub fn scale_roi_stage(
    tape: &mut Tape,
    bound: &BoundHr,
    pyramid: &PyramidVars,
    proposals: &[Box],
    cfg: &RunConfig,
) -> Result<Stage2Trace> {
    if proposals.is_empty() {
        return Err(Error::Input(
            "stage 2 needs at least one proposal".to_string(),
        ));
    }
    let s = cfg.roi_size;
    let flat_dim = s * s * cfg.channels;
    let mut scale_nodes = Vec::with_capacity(proposals.len());
    let mut rows = Vec::with_capacity(proposals.len());
    for box_ in proposals {
        let assigned = level_of(box_, cfg);
        let node_vec = if cfg.enable_scale {
            let mut level_rows = Vec::with_capacity(cfg.levels);
            for level in 0..cfg.levels {
                let pooled = pool_roi(tape, pyramid, box_, level, cfg)?;
                let flat = tape.reshape(pooled, vec![1, flat_dim])?;
                level_rows.push(tape.linear(flat, bound.scale_proj.w, bound.scale_proj.b)?);
            }
            let nodes = tape.concat_rows(&level_rows)?;
            scale_nodes.push(nodes);
            let skel = build_skeleton(&NodeGeometry::Scale {
                levels: (0..cfg.levels).collect(),
                level_count: cfg.levels,
            })?;
            let enhanced = gam_forward(
                tape,
                nodes,
                &skel,
                &bound.scale_gam,
                &cfg.gam_config(cfg.feature_dim),
            )?;
            tape.gather_rows(enhanced, &[assigned])?
        } else {
            let pooled = pool_roi(tape, pyramid, box_, assigned, cfg)?;
            let flat = tape.reshape(pooled, vec![1, flat_dim])?;
            tape.linear(flat, bound.scale_proj.w, bound.scale_proj.b)?
        };
        rows.push(node_vec);
    }
    let pre_roi = tape.concat_rows(&rows)?;
    let roi_vectors = roi_graph_pass(tape, bound, pre_roi, proposals, cfg)?;
    let outputs = box_head(tape, bound.stage2_head(), roi_vectors)?;
    Ok(Stage2Trace {
        scale_nodes,
        pre_roi,
        roi_vectors,
        outputs,
    })
}

/// Decode a stage's deltas against its proposals and clip to the image.
pub fn decode_stage_boxes(
    tape: &Tape,
    stage: &StageVars,
    proposals: &[Box],
    image_w: f64,
    image_h: f64,
) -> Vec<Box> {
    let deltas = tape.value(stage.deltas);
    proposals
        .iter()
        .enumerate()
        .map(|(r, p)| {
            let d = [
                deltas[r * 4],
                deltas[r * 4 + 1],
                deltas[r * 4 + 2],
                deltas[r * 4 + 3],
            ];
            decode_deltas(p, &d).clip(image_w, image_h)
        })
        .collect()
}

pub fn stage_outputs(
    tape: &Tape,
    stage: &StageVars,
    proposals: &[Box],
    image_w: f64,
    image_h: f64,
) -> StageOutputs {
    StageOutputs {
        scores: tape.value_tensor(stage.scores),
        deltas: tape.value_tensor(stage.deltas),
        boxes: decode_stage_boxes(tape, stage, proposals, image_w, image_h),
    }
}

/// One full recorded forward pass.
#[derive(Debug, Clone)]
pub struct HrForward {
    pub stage1: Stage1Trace,
    /// Stage 1's decoded, clipped boxes; stage 2's proposals when enabled.
    pub stage1_boxes: Vec<Box>,
    pub stage2: Option<Stage2Trace>,
}

/// Backbone → stage 1 → (decode, clip) → stage 2.
pub fn hr_forward(
    tape: &mut Tape,
    bound: &BoundHr,
    image: Var,
    proposals: &[Box],
    cfg: &RunConfig,
) -> Result<HrForward> {
    let shape = tape.shape(image);
    let (h, w) = (shape[1] as f64, shape[2] as f64);
    let pyramid =
        crate::detector::backbone::backbone_forward_tape(tape, image, &bound.backbone, cfg)?;
    let stage1 = pixel_roi_stage(tape, bound, &pyramid, proposals, cfg)?;
    let stage1_boxes = decode_stage_boxes(tape, &stage1.outputs, proposals, w, h);
    let stage2 = if cfg.enable_stage2 {
        Some(scale_roi_stage(tape, bound, &pyramid, &stage1_boxes, cfg)?)
    } else {
        None
    };
    Ok(HrForward {
        stage1,
        stage1_boxes,
        stage2,
    })
}
