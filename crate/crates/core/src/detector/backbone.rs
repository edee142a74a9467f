//! Tiny strided-convolution pyramid with top-down lateral merges. Stands in
//! for a full pyramid backbone at desk scale: levels at strides 4, 8, ...,
//! shared channel width, relu trunk, 1×1 laterals, nearest-neighbor merge.

use crate::detector::params::{BackboneVars, BoundHr, HrParams};
use crate::error::{Error, Result};
use crate::runcfg::RunConfig;
use crate::tensor::{Tape, Tensor, Var};

/// Materialized pyramid: `levels[p]` is [C, H/2^(p+2), W/2^(p+2)].
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub strides: Vec<f64>,
}

/// Tape handles for each pyramid level plus their strides.
#[derive(Debug, Clone)]
pub struct PyramidVars {
    pub levels: Vec<Var>,
    pub strides: Vec<f64>,
}

fn check_image(shape: &[usize], levels: usize) -> Result<(usize, usize)> {
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::Input(format!(
            "image must be [3, H, W], got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let div = 1usize << (levels + 1);
    if h % div != 0 || w % div != 0 || h < div || w < div {
        return Err(Error::Input(format!(
            "image {h}x{w} must be a positive multiple of 2^(levels+1) = {div}"
        )));
    }
    Ok((h, w))
}

/// Record the backbone on a tape.
pub fn backbone_forward_tape(
    tape: &mut Tape,
    image: Var,
    bb: &BackboneVars,
    cfg: &RunConfig,
) -> Result<PyramidVars> {
    check_image(tape.shape(image), cfg.levels)?;

    // Trunk: stem at stride 2, then one stride-2 conv per level.
    let stem = tape.conv2d(image, bb.stem.w, bb.stem.b, 2, 1)?;
    let mut trunk = tape.relu(stem)?;
    let mut stages = Vec::with_capacity(cfg.levels);
    for down in &bb.downs {
        let conv = tape.conv2d(trunk, down.w, down.b, 2, 1)?;
        trunk = tape.relu(conv)?;
        stages.push(trunk);
    }

    // Top-down: coarsest lateral first, then lateral + upsampled coarser map.
    let mut merged: Vec<Option<Var>> = vec![None; cfg.levels];
    for p in (0..cfg.levels).rev() {
        let lat = &bb.laterals[p];
        let lateral = tape.conv2d(stages[p], lat.w, lat.b, 1, 0)?;
        merged[p] = Some(match merged.get(p + 1).and_then(|m| *m) {
            Some(coarser) => {
                let up = tape.upsample2x(coarser)?;
                tape.add(lateral, up)?
            }
            None => lateral,
        });
    }

    Ok(PyramidVars {
        levels: merged.into_iter().map(|m| m.expect("filled")).collect(),
        strides: cfg.strides(),
    })
}

/// Forward the backbone outside any training recording.
pub fn backbone_forward(
    image: &Tensor,
    params: &HrParams,
    cfg: &RunConfig,
) -> Result<FeaturePyramid> {
    let mut tape = Tape::new();
    let img = tape.leaf(image);
    let bound = crate::detector::params::bind_model(&mut tape, params);
    let pyr = backbone_forward_tape(&mut tape, img, &bound.backbone, cfg)?;
    Ok(FeaturePyramid {
        levels: pyr.levels.iter().map(|&v| tape.value_tensor(v)).collect(),
        strides: pyr.strides,
    })
}

/// Convenience used by stages when the caller already holds a [`BoundHr`].
pub fn backbone_of(
    tape: &mut Tape,
    image: Var,
    bound: &BoundHr,
    cfg: &RunConfig,
) -> Result<PyramidVars> {
    backbone_forward_tape(tape, image, &bound.backbone, cfg)
}
