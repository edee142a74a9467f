//! Deterministic gradient-verification battery: every differentiable
//! primitive, each GAM in isolation, and the full detector loss, checked
//! against central finite differences. Shared by the `gradcheck` command,
//! the test suite, and the acceptance run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::detector::loss::{assign_targets, detector_loss};
use crate::detector::params::{assemble_bound, HrParams};
use crate::detector::stages::{hr_forward, pixel_roi_stage, scale_roi_stage};
use crate::error::Result;
use crate::gam::{gam_forward, DenseVars, GamConfig, GamParams, GamVars};
use crate::geometry::{roi_align_taps, Box};
use crate::graphs::{build_skeleton, GraphKind, NodeGeometry, SemanticKind, SemanticMetric};
use crate::runcfg::RunConfig;
use crate::synth::generate_scene;
use crate::tensor::{grad_check, PairKind, Tape, Tensor, Var};

pub const EPS: f64 = 1e-5;
pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const DETECTOR_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckRow {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub threshold: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.threshold
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("consistent")
}

/// Values bounded away from zero, for kinked ops like relu.
fn rand_tensor_off_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.random_range(0.2..1.5);
            if rng.random::<f64>() < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    Tensor::new(shape, data).expect("consistent")
}

fn sum_squares(tape: &mut Tape, x: Var) -> Result<Var> {
    let sq = tape.mul(x, x)?;
    tape.sum(sq)
}

fn row(name: &'static str, threshold: f64, err: Result<f64>) -> Result<CheckRow> {
    Ok(CheckRow {
        name,
        max_rel_err: err?,
        threshold,
    })
}

/// Gradient checks for every recorded primitive.
pub fn primitive_checks() -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x67726164);
    let mut rows = Vec::new();

    {
        let x = rand_tensor(&mut rng, vec![3, 4], -1.0, 1.0);
        let w = rand_tensor(&mut rng, vec![4, 2], -1.0, 1.0);
        let b = rand_tensor(&mut rng, vec![2], -0.5, 0.5);
        rows.push(row(
            "linear",
            PRIMITIVE_TOL,
            grad_check(&[x, w, b], EPS, |tape, v| {
                let y = tape.linear(v[0], v[1], v[2])?;
                sum_squares(tape, y)
            }),
        )?);
    }
    {
        let x = rand_tensor_off_zero(&mut rng, vec![3, 5]);
        rows.push(row(
            "relu",
            PRIMITIVE_TOL,
            grad_check(&[x], EPS, |tape, v| {
                let y = tape.relu(v[0])?;
                sum_squares(tape, y)
            }),
        )?);
    }
    {
        // Weighted sum keeps the softmax gradient nontrivial.
        let logits = rand_tensor(&mut rng, vec![5], -2.0, 2.0);
        let weights: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        rows.push(row(
            "softmax_scaled",
            PRIMITIVE_TOL,
            grad_check(&[logits], EPS, move |tape, v| {
                let p = tape.softmax_scaled(v[0], 2.0)?;
                let c = tape.constant(weights.clone(), vec![5]);
                let weighted = tape.mul(p, c)?;
                tape.sum(weighted)
            }),
        )?);
    }
    {
        let a = rand_tensor(&mut rng, vec![3, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, vec![4, 2], -1.0, 1.0);
        rows.push(row(
            "matmul",
            PRIMITIVE_TOL,
            grad_check(&[a, b], EPS, |tape, v| {
                let y = tape.matmul(v[0], v[1])?;
                sum_squares(tape, y)
            }),
        )?);
    }
    {
        let x = rand_tensor(&mut rng, vec![2, 6, 6], -1.0, 1.0);
        let w = rand_tensor(&mut rng, vec![3, 2, 3, 3], -0.5, 0.5);
        let b = rand_tensor(&mut rng, vec![3], -0.2, 0.2);
        rows.push(row(
            "conv2d",
            PRIMITIVE_TOL,
            grad_check(&[x, w, b], EPS, |tape, v| {
                let y = tape.conv2d(v[0], v[1], v[2], 1, 1)?;
                sum_squares(tape, y)
            }),
        )?);
    }
    {
        let x = rand_tensor(&mut rng, vec![2, 6, 6], -1.0, 1.0);
        let w = rand_tensor(&mut rng, vec![3, 2, 3, 3], -0.5, 0.5);
        let b = rand_tensor(&mut rng, vec![3], -0.2, 0.2);
        rows.push(row(
            "conv2d_stride2_relu",
            PRIMITIVE_TOL,
            grad_check(&[x, w, b], EPS, |tape, v| {
                let y = tape.conv2d(v[0], v[1], v[2], 2, 1)?;
                let y = tape.relu(y)?;
                sum_squares(tape, y)
            }),
        )?);
    }
    {
        let x = rand_tensor(&mut rng, vec![2, 3, 3], -1.0, 1.0);
        rows.push(row(
            "upsample2x",
            PRIMITIVE_TOL,
            grad_check(&[x], EPS, |tape, v| {
                let y = tape.upsample2x(v[0])?;
                sum_squares(tape, y)
            }),
        )?);
    }
    {
        let feat = rand_tensor(&mut rng, vec![2, 8, 8], -1.0, 1.0);
        let box_ = Box::new(4.3, 3.7, 5.1, 4.6).expect("valid");
        let taps = roi_align_taps(&box_, 1.0, 3, 8, 8);
        rows.push(row(
            "roi_align",
            PRIMITIVE_TOL,
            grad_check(&[feat], EPS, move |tape, v| {
                let y = tape.roi_align(v[0], &taps, 3)?;
                sum_squares(tape, y)
            }),
        )?);
    }
    for (name, kind) in [
        (
            "pairwise_dot",
            PairKind::ScaledDot {
                scale: 1.0 / 2.0f64.sqrt(),
            },
        ),
        ("pairwise_cosine", PairKind::Cosine),
        ("pairwise_euclid", PairKind::Euclid),
    ] {
        let f = rand_tensor(&mut rng, vec![4, 6], -1.0, 1.0);
        rows.push(row(
            name,
            PRIMITIVE_TOL,
            grad_check(&[f], EPS, move |tape, v| {
                let y = tape.pairwise_semantic(v[0], 3, kind)?;
                sum_squares(tape, y)
            }),
        )?);
    }
    {
        let logits = rand_tensor(&mut rng, vec![3, 4], -1.5, 1.5);
        rows.push(row(
            "cross_entropy",
            PRIMITIVE_TOL,
            grad_check(&[logits], EPS, |tape, v| {
                tape.cross_entropy_sum(v[0], &[1, 0, 2])
            }),
        )?);
    }
    {
        let pred = rand_tensor(&mut rng, vec![3, 4], -0.4, 0.4);
        let target: Vec<f64> = (0..12).map(|_| rng.random_range(-0.4..0.4)).collect();
        rows.push(row(
            "smooth_l1",
            PRIMITIVE_TOL,
            grad_check(&[pred], EPS, move |tape, v| {
                tape.smooth_l1_sum(v[0], &target, &[0, 2])
            }),
        )?);
    }
    {
        let x = rand_tensor(&mut rng, vec![3, 4], -1.0, 1.0);
        let w = rand_tensor(&mut rng, vec![7, 2], -1.0, 1.0);
        rows.push(row(
            "reshape_transpose_gather_concat",
            PRIMITIVE_TOL,
            grad_check(&[x, w], EPS, |tape, v| {
                let t = tape.transpose(v[0])?; // [4,3]
                let g = tape.gather_rows(t, &[0, 2, 3, 1, 0])?; // [5,3]
                let c = tape.constant(vec![0.3; 10], vec![5, 2]);
                let cc = tape.concat_cols(g, c)?; // [5,5]
                let r = tape.reshape(cc, vec![5, 5])?;
                let picked = tape.gather_rows(r, &[0, 1, 2])?; // [3,5]
                let folded = tape.reshape(picked, vec![15, 1])?;
                let squashed = tape.gather_rows(folded, &(0..14).collect::<Vec<_>>())?; // [14,1]
                let lhs = tape.reshape(squashed, vec![2, 7])?;
                let y = tape.matmul(lhs, v[1])?;
                sum_squares(tape, y)
            }),
        )?);
    }
    Ok(rows)
}

fn gam_isolation_check(kind: GraphKind, seed: u64, knobs: &CheckKnobs) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 4;
    let d = 8;
    let mut cfg = GamConfig::new(d);
    cfg.temperature = knobs.temperature;
    cfg.mlp_hidden = knobs.mlp_hidden;
    cfg.metric = SemanticMetric::new(knobs.metric, 2);
    let edge_dim = cfg.metric.groups + kind.spatial_dim();
    let geometry = match kind {
        GraphKind::Pixel => NodeGeometry::Pixel {
            pixels: vec![(11.5, 9.0), (14.0, 12.5), (9.25, 13.0), (15.5, 8.5)],
            roi: Box::new(12.0, 11.0, 9.0, 8.0).expect("valid"),
        },
        GraphKind::Scale => NodeGeometry::Scale {
            levels: vec![0, 1, 2, 3],
            level_count: 4,
        },
        GraphKind::Roi => NodeGeometry::Roi {
            boxes: vec![
                Box::new(10.0, 12.0, 6.0, 5.0).expect("valid"),
                Box::new(18.0, 9.0, 4.0, 7.0).expect("valid"),
                Box::new(14.0, 20.0, 9.0, 6.0).expect("valid"),
                Box::new(22.0, 16.0, 5.0, 5.0).expect("valid"),
            ],
        },
    };
    let skel = build_skeleton(&geometry)?;
    let params = GamParams::init(&cfg, edge_dim, &mut rng)?;
    let features = rand_tensor(&mut rng, vec![n, d], -1.0, 1.0);

    // Parameter list: edge-MLP layers, fusion, then the node features.
    let mut tensors: Vec<Tensor> = Vec::new();
    for layer in &params.edge_mlp {
        tensors.push(layer.w.clone());
        tensors.push(layer.b.clone());
    }
    tensors.push(params.fusion.w.clone());
    tensors.push(params.fusion.b.clone());
    tensors.push(features);
    let n_mlp = params.edge_mlp.len();

    grad_check(&tensors, EPS, move |tape, vars| {
        let edge_mlp: Vec<DenseVars> = (0..n_mlp)
            .map(|i| DenseVars {
                w: vars[2 * i],
                b: vars[2 * i + 1],
            })
            .collect();
        let gam = GamVars {
            edge_mlp,
            fusion: DenseVars {
                w: vars[2 * n_mlp],
                b: vars[2 * n_mlp + 1],
            },
        };
        let features = vars[2 * n_mlp + 2];
        let out = gam_forward(tape, features, &skel, &gam, &cfg)?;
        sum_squares(tape, out)
    })
}

/// Temperature, metric kind, and edge-MLP width carried from a run
/// configuration into the battery; dimensions stay reduced so the
/// finite-difference sweeps remain fast.
#[derive(Debug, Clone, Copy)]
pub struct CheckKnobs {
    pub temperature: f64,
    pub metric: SemanticKind,
    pub mlp_hidden: usize,
}

impl Default for CheckKnobs {
    fn default() -> Self {
        CheckKnobs {
            temperature: 2.0,
            metric: SemanticKind::GroupedDot,
            mlp_hidden: 4,
        }
    }
}

impl CheckKnobs {
    pub fn from_config(cfg: &RunConfig) -> Self {
        CheckKnobs {
            temperature: cfg.temperature,
            metric: cfg.metric,
            mlp_hidden: cfg.mlp_hidden,
        }
    }
}

/// Gradient checks for each GAM kind in isolation (loss = Σ output²) over
/// all module parameters and the node features.
pub fn gam_checks_with(knobs: &CheckKnobs) -> Result<Vec<CheckRow>> {
    Ok(vec![
        CheckRow {
            name: "gam_pixel",
            max_rel_err: gam_isolation_check(GraphKind::Pixel, 0xa1, knobs)?,
            threshold: PRIMITIVE_TOL,
        },
        CheckRow {
            name: "gam_scale",
            max_rel_err: gam_isolation_check(GraphKind::Scale, 0xa2, knobs)?,
            threshold: PRIMITIVE_TOL,
        },
        CheckRow {
            name: "gam_roi",
            max_rel_err: gam_isolation_check(GraphKind::Roi, 0xa3, knobs)?,
            threshold: PRIMITIVE_TOL,
        },
    ])
}

pub fn gam_checks() -> Result<Vec<CheckRow>> {
    gam_checks_with(&CheckKnobs::default())
}

/// Reduced-width configuration for the end-to-end check: a 32×32 image and
/// two proposals keep the finite-difference sweep tractable.
pub fn detector_check_config() -> RunConfig {
    RunConfig {
        seed: 99,
        image_h: 32,
        image_w: 32,
        size_min: 8.0,
        size_max: 16.0,
        channels: 8,
        feature_dim: 16,
        roi_size: 3,
        mlp_hidden: 4,
        canonical_size: 8.0,
        ..RunConfig::default()
    }
}

/// End-to-end gradient of the joint two-stage loss over every model
/// parameter. Stage-2 proposals come from decoding stage-1 boxes, a
/// non-recorded data path, so they are computed once at the base point and
/// held fixed while the perturbed evaluations re-run the recorded
/// computation.
pub fn detector_loss_check() -> Result<f64> {
    detector_loss_check_with(&CheckKnobs::default())
}

pub fn detector_loss_check_with(knobs: &CheckKnobs) -> Result<f64> {
    let mut cfg = detector_check_config();
    cfg.temperature = knobs.temperature;
    cfg.metric = knobs.metric;
    cfg.mlp_hidden = knobs.mlp_hidden;
    let params = HrParams::init(&cfg, cfg.seed)?;
    let scene = generate_scene(&cfg.scene_spec(), 0)?;
    let proposals = vec![
        Box::new(12.0, 13.0, 9.0, 8.0).expect("valid"),
        Box::new(20.0, 18.0, 12.0, 11.0).expect("valid"),
    ];

    // Fixed stage-2 proposals from the base parameters.
    let stage2_boxes = {
        let mut tape = Tape::new();
        let bound = crate::detector::params::bind_model(&mut tape, &params);
        let img = tape.constant(scene.image.data().to_vec(), scene.image.shape().to_vec());
        let fwd = hr_forward(&mut tape, &bound, img, &proposals, &cfg)?;
        fwd.stage1_boxes
    };
    let targets1 = assign_targets(&proposals, &scene.gt, cfg.fg_iou);
    let targets2 = assign_targets(&stage2_boxes, &scene.gt, cfg.fg_iou);

    let tensors: Vec<Tensor> = params
        .named_tensors()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    let image_data = scene.image.data().to_vec();
    let image_shape = scene.image.shape().to_vec();

    grad_check(&tensors, EPS, move |tape, vars| {
        let bound = assemble_bound(vars, &params);
        let img = tape.constant(image_data.clone(), image_shape.clone());
        let pyramid =
            crate::detector::backbone::backbone_forward_tape(tape, img, &bound.backbone, &cfg)?;
        let stage1 = pixel_roi_stage(tape, &bound, &pyramid, &proposals, &cfg)?;
        let stage2 = scale_roi_stage(tape, &bound, &pyramid, &stage2_boxes, &cfg)?;
        detector_loss(
            tape,
            &[(&stage1.outputs, &targets1), (&stage2.outputs, &targets2)],
        )
    })
}

/// The whole battery, in print order.
pub fn gradient_battery_with(knobs: &CheckKnobs) -> Result<Vec<CheckRow>> {
    let mut rows = primitive_checks()?;
    rows.extend(gam_checks_with(knobs)?);
    rows.push(CheckRow {
        name: "detector_loss_full",
        max_rel_err: detector_loss_check_with(knobs)?,
        threshold: DETECTOR_TOL,
    });
    Ok(rows)
}

pub fn gradient_battery() -> Result<Vec<CheckRow>> {
    gradient_battery_with(&CheckKnobs::default())
}

/// Render rows as an aligned pass/fail table.
pub fn format_table(rows: &[CheckRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<32} {:>14} {:>10} {:>6}\n",
        "check", "max_rel_err", "threshold", "ok"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<32} {:>14.3e} {:>10.0e} {:>6}\n",
            r.name,
            r.max_rel_err,
            r.threshold,
            if r.passed() { "PASS" } else { "FAIL" }
        ));
    }
    out
}
