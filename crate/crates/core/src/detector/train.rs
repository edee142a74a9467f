//! Momentum-SGD training over synthetic scenes, deterministic in the seed,
//! plus inference (threshold + class-wise NMS), split evaluation, and
//! attention inspection.

use crate::detector::loss::{assign_targets, detector_loss};
use crate::detector::params::{bind_model, HrParams};
use crate::detector::stages::{hr_forward, stage_outputs};
use crate::error::{Error, Result};
use crate::eval::{ap_report, ApReport, Detection, GtInstance};
use crate::gam::gam_attention_tensors;
use crate::geometry::{iou, roi_bin_centers, Box};
use crate::graphs::{build_graph, NodeGeometry};
use crate::runcfg::RunConfig;
use crate::synth::{generate_scene, mix_seed, sample_proposals, SyntheticScene, NUM_CLASSES};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Scene indices for a split; train and val ranges never overlap.
pub fn scene_indices(cfg: &RunConfig, split: Split) -> std::ops::Range<u64> {
    let train = cfg.scenes_train as u64;
    match split {
        Split::Train => 0..train,
        Split::Val => train..train + cfg.scenes_val as u64,
    }
}

/// Proposal stream seed for one training step.
pub fn train_proposal_seed(seed: u64, scene_index: u64, step: usize) -> u64 {
    mix_seed(
        mix_seed(seed, 0x74726169),
        scene_index ^ ((step as u64) << 20),
    )
}

/// Fixed proposal seed used whenever a split is evaluated.
pub fn eval_proposal_seed(seed: u64, scene_index: u64) -> u64 {
    mix_seed(mix_seed(seed, 0x6576616c), scene_index)
}

/// One gradient evaluation on one scene. Returns the loss value and the
/// gradient of every registered parameter, in registry order.
pub fn train_step(
    params: &HrParams,
    scene: &SyntheticScene,
    proposals: &[Box],
    cfg: &RunConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, params);
    let image = tape.constant(scene.image.data().to_vec(), scene.image.shape().to_vec());
    let fwd = hr_forward(&mut tape, &bound, image, proposals, cfg)?;

    let targets1 = assign_targets(proposals, &scene.gt, cfg.fg_iou);
    let targets2;
    let mut stages = vec![(&fwd.stage1.outputs, &targets1)];
    if let Some(stage2) = &fwd.stage2 {
        targets2 = assign_targets(&fwd.stage1_boxes, &scene.gt, cfg.fg_iou);
        stages.push((&stage2.outputs, &targets2));
    }
    let loss = detector_loss(&mut tape, &stages)?;
    let loss_value = tape.value(loss)[0];
    if !loss_value.is_finite() {
        return Err(Error::Diverged(format!("loss is {loss_value}")));
    }
    let grads = tape.backward(loss)?;
    let by_param = tape
        .param_bindings()
        .iter()
        .map(|&(_, var)| grads.wrt_or_zero(var, tape.value(var).len()))
        .collect();
    Ok((loss_value, by_param))
}

/// v ← μ·v + g; θ ← θ − lr·v, in registry order.
pub fn sgd_apply(
    params: &mut HrParams,
    grads: &[Vec<f64>],
    velocity: &mut [Vec<f64>],
    lr: f64,
    momentum: f64,
) {
    let mut idx = 0;
    params.visit_mut(&mut |_, t| {
        let g = &grads[idx];
        let v = &mut velocity[idx];
        let data = t.data_mut();
        for k in 0..data.len() {
            v[k] = momentum * v[k] + g[k];
            data[k] -= lr * v[k];
        }
        idx += 1;
    });
}

#[derive(Debug)]
pub struct TrainResult {
    pub params: HrParams,
    /// Deterministic metric log: identical config + seed gives identical
    /// lines, byte for byte.
    pub log: Vec<String>,
}

pub fn train_loop(cfg: &RunConfig) -> Result<TrainResult> {
    cfg.validate()?;
    let spec = cfg.scene_spec();
    let mut params = HrParams::init(cfg, cfg.seed)?;
    let mut velocity: Vec<Vec<f64>> = params
        .named_tensors()
        .iter()
        .map(|(_, t)| vec![0.0; t.numel()])
        .collect();
    let mut log = vec![format!("manifest_hash={:016x}", spec.manifest_hash())];

    for step in 0..cfg.steps {
        let scene_index = (step % cfg.scenes_train) as u64;
        let scene = generate_scene(&spec, scene_index)?;
        let proposals = sample_proposals(
            &scene,
            cfg.n_per_gt,
            cfg.n_bg,
            cfg.jitter,
            train_proposal_seed(cfg.seed, scene_index, step),
        )?;
        let (loss_value, grads) =
            train_step(&params, &scene, &proposals, cfg).map_err(|e| match e {
                Error::Diverged(msg) => Error::Diverged(format!("step {step}: {msg}")),
                other => other,
            })?;
        sgd_apply(&mut params, &grads, &mut velocity, cfg.lr, cfg.momentum);

        if cfg.eval_interval > 0 && (step + 1) % cfg.eval_interval == 0 {
            let report = evaluate_split(&params, cfg, Split::Train)?;
            log.push(format!(
                "step={} loss={:.12e} train_ap50={:.6} train_map={:.6}",
                step + 1,
                loss_value,
                report.mean_ap50,
                report.mean_ap
            ));
        }
    }
    Ok(TrainResult { params, log })
}

/// Forward one image and post-process into detections: stage-2 outputs when
/// the second stage is enabled, class probabilities by plain softmax, score
/// threshold, then class-wise greedy NMS.
pub fn infer(
    image: &Tensor,
    proposals: &[Box],
    params: &HrParams,
    cfg: &RunConfig,
) -> Result<Vec<Detection>> {
    if proposals.is_empty() {
        return Err(Error::Input(
            "inference needs at least one proposal".to_string(),
        ));
    }
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, params);
    let img = tape.constant(image.data().to_vec(), image.shape().to_vec());
    let fwd = hr_forward(&mut tape, &bound, img, proposals, cfg)?;
    let (h, w) = (image.shape()[1] as f64, image.shape()[2] as f64);
    let owned_proposals;
    let (stage, stage_proposals) = match &fwd.stage2 {
        Some(stage2) => (&stage2.outputs, &fwd.stage1_boxes),
        None => {
            owned_proposals = proposals.to_vec();
            (&fwd.stage1.outputs, &owned_proposals)
        }
    };
    let outs = stage_outputs(&tape, stage, stage_proposals, w, h);

    let classes = NUM_CLASSES + 1;
    let mut candidates = Vec::new();
    for (r, box_) in outs.boxes.iter().enumerate() {
        let logits = &outs.scores.data()[r * classes..(r + 1) * classes];
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for class_id in 1..classes {
            let score = exps[class_id] / z;
            if score >= cfg.score_thresh {
                candidates.push(Detection {
                    box_: *box_,
                    class_id,
                    score,
                    image_id: 0,
                });
            }
        }
    }
    Ok(nms(candidates, cfg.nms_iou))
}

/// Class-wise greedy non-maximum suppression.
pub fn nms(mut dets: Vec<Detection>, iou_thr: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));
    let mut kept: Vec<Detection> = Vec::new();
    for det in dets {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == det.class_id && iou(&k.box_, &det.box_) > iou_thr);
        if !suppressed {
            kept.push(det);
        }
    }
    kept
}

/// AP over one split, with the split's fixed deterministic proposal streams.
pub fn evaluate_split(params: &HrParams, cfg: &RunConfig, split: Split) -> Result<ApReport> {
    let spec = cfg.scene_spec();
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for (image_id, scene_index) in scene_indices(cfg, split).enumerate() {
        let scene = generate_scene(&spec, scene_index)?;
        let proposals = sample_proposals(
            &scene,
            cfg.n_per_gt,
            cfg.n_bg,
            cfg.jitter,
            eval_proposal_seed(cfg.seed, scene_index),
        )?;
        for mut det in infer(&scene.image, &proposals, params, cfg)? {
            det.image_id = image_id;
            dets.push(det);
        }
        gts.extend(scene.gt.iter().map(|&(box_, class_id)| GtInstance {
            box_,
            class_id,
            image_id,
        }));
    }
    Ok(ap_report(&dets, &gts, NUM_CLASSES))
}

/// Attention matrices and edge attributes of each relation graph for one
/// RoI of one scene, at the current parameters.
#[derive(Debug, Clone)]
pub struct GraphDump {
    pub name: &'static str,
    /// [N, N] normalized attention.
    pub weights: Tensor,
    /// [N, N, e] edge attributes.
    pub edges: Tensor,
}

pub fn inspect_attention(
    params: &HrParams,
    cfg: &RunConfig,
    scene_index: u64,
    roi_index: usize,
) -> Result<Vec<GraphDump>> {
    let spec = cfg.scene_spec();
    let scene = generate_scene(&spec, scene_index)?;
    let proposals = sample_proposals(
        &scene,
        cfg.n_per_gt,
        cfg.n_bg,
        cfg.jitter,
        eval_proposal_seed(cfg.seed, scene_index),
    )?;
    if roi_index >= proposals.len() {
        return Err(Error::Input(format!(
            "roi index {roi_index} out of range ({} proposals)",
            proposals.len()
        )));
    }
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, params);
    let img = tape.constant(scene.image.data().to_vec(), scene.image.shape().to_vec());
    let fwd = hr_forward(&mut tape, &bound, img, &proposals, cfg)?;
    let metric = cfg.metric();
    let mut dumps = Vec::new();

    let pixel_feats = tape.value_tensor(fwd.stage1.pixel_nodes[roi_index]);
    let roi_box = proposals[roi_index];
    let pixel_graph = build_graph(
        &pixel_feats,
        NodeGeometry::Pixel {
            pixels: roi_bin_centers(&roi_box, cfg.roi_size),
            roi: roi_box,
        },
        &metric,
    )?;
    dumps.push(GraphDump {
        name: "pixel",
        weights: gam_attention_tensors(
            &pixel_graph,
            &params.pixel_gam,
            &cfg.gam_config(cfg.channels),
        )?,
        edges: pixel_graph.edge_attrs.clone(),
    });

    if let Some(stage2) = &fwd.stage2 {
        if cfg.enable_scale {
            let nodes = tape.value_tensor(stage2.scale_nodes[roi_index]);
            let scale_graph = build_graph(
                &nodes,
                NodeGeometry::Scale {
                    levels: (0..cfg.levels).collect(),
                    level_count: cfg.levels,
                },
                &metric,
            )?;
            dumps.push(GraphDump {
                name: "scale",
                weights: gam_attention_tensors(
                    &scale_graph,
                    &params.scale_gam,
                    &cfg.gam_config(cfg.feature_dim),
                )?,
                edges: scale_graph.edge_attrs.clone(),
            });
        }
    }

    let pre_roi = tape.value_tensor(fwd.stage1.pre_roi);
    let roi_graph = build_graph(
        &pre_roi,
        NodeGeometry::Roi {
            boxes: proposals.clone(),
        },
        &metric,
    )?;
    dumps.push(GraphDump {
        name: "roi",
        weights: gam_attention_tensors(
            &roi_graph,
            &params.roi_gam,
            &cfg.gam_config(cfg.feature_dim),
        )?,
        edges: roi_graph.edge_attrs.clone(),
    });

    Ok(dumps)
}
