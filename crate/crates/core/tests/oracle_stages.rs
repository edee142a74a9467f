//! Composition oracles for the two reasoning stages: the recorded stage
//! implementations must match a step-by-step path that pools, builds each
//! graph, and applies the module pieces one at a time.

use graphdet::detector::{
    backbone_forward, bind_model, hr_forward, pixel_roi_stage, scale_roi_stage, HrParams,
};
use graphdet::gam::{gam_forward_tensors, Dense, GamParams};
use graphdet::geometry::{assign_pyramid_level, decode_deltas, roi_align, roi_bin_centers, Box};
use graphdet::graphs::{build_graph, NodeGeometry};
use graphdet::runcfg::RunConfig;
use graphdet::synth::generate_scene;
use graphdet::tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_cfg() -> RunConfig {
    RunConfig {
        seed: 7,
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

fn manual_linear(x: &[f64], layer: &Dense) -> Vec<f64> {
    let (din, dout) = (layer.in_dim(), layer.out_dim());
    assert_eq!(x.len(), din);
    let mut y = layer.b.data().to_vec();
    for d in 0..din {
        for o in 0..dout {
            y[o] += x[d] * layer.w.data()[d * dout + o];
        }
    }
    y
}

fn manual_relu(x: &mut [f64]) {
    for v in x.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn manual_head(vec: &[f64], head: &graphdet::detector::BoxHeadParams) -> (Vec<f64>, Vec<f64>) {
    let mut h = manual_linear(vec, &head.fc1);
    manual_relu(&mut h);
    let mut h = manual_linear(&h, &head.fc2);
    manual_relu(&mut h);
    (manual_linear(&h, &head.cls), manual_linear(&h, &head.reg))
}

/// Pooled [C,S,S] tensor as node-major [S², C] rows.
fn to_nodes(pooled: &Tensor, s: usize, c: usize) -> Tensor {
    let mut rows = vec![vec![0.0; c]; s * s];
    for ci in 0..c {
        for k in 0..s * s {
            rows[k][ci] = pooled.data()[ci * s * s + k];
        }
    }
    Tensor::matrix(&rows).unwrap()
}

fn random_proposals(rng: &mut ChaCha8Rng, n: usize, image: f64) -> Vec<Box> {
    (0..n)
        .map(|_| {
            let w = rng.random_range(6.0..16.0);
            let h = rng.random_range(6.0..16.0);
            Box::new(
                rng.random_range(w / 2.0..image - w / 2.0),
                rng.random_range(h / 2.0..image - h / 2.0),
                w,
                h,
            )
            .unwrap()
        })
        .collect()
}

#[test]
fn pixel_roi_stage_matches_composition_oracle() {
    let cfg = tiny_cfg();
    let params = HrParams::init(&cfg, 41).unwrap();
    let scene = generate_scene(&cfg.scene_spec(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0xabc);
    let proposals = random_proposals(&mut rng, 3, 32.0);

    // Recorded path.
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, &params);
    let img = tape.constant(scene.image.data().to_vec(), scene.image.shape().to_vec());
    let pyr =
        graphdet::detector::backbone_forward_tape(&mut tape, img, &bound.backbone, &cfg).unwrap();
    let trace = pixel_roi_stage(&mut tape, &bound, &pyr, &proposals, &cfg).unwrap();

    // Step-by-step oracle on materialized tensors.
    let pyramid = backbone_forward(&scene.image, &params, &cfg).unwrap();
    let metric = cfg.metric();
    let s = cfg.roi_size;
    let c = cfg.channels;
    let mut vec_rows = Vec::new();
    for box_ in &proposals {
        let level =
            assign_pyramid_level(box_, cfg.levels, cfg.canonical_level(), cfg.canonical_size).level;
        let pooled = roi_align(&pyramid.levels[level], box_, pyramid.strides[level], s).unwrap();
        let nodes = to_nodes(&pooled, s, c);
        let graph = build_graph(
            &nodes,
            NodeGeometry::Pixel {
                pixels: roi_bin_centers(box_, s),
                roi: *box_,
            },
            &metric,
        )
        .unwrap();
        let enhanced = gam_forward_tensors(&graph, &params.pixel_gam, &cfg.gam_config(c)).unwrap();
        vec_rows.push(manual_linear(enhanced.data(), &params.pixel_proj));
    }
    let pre_roi = Tensor::matrix(&vec_rows).unwrap();
    let roi_graph = build_graph(
        &pre_roi,
        NodeGeometry::Roi {
            boxes: proposals.clone(),
        },
        &metric,
    )
    .unwrap();
    let roi_vecs = gam_forward_tensors(
        &roi_graph,
        &params.roi_gam,
        &cfg.gam_config(cfg.feature_dim),
    )
    .unwrap();

    let got_vecs = tape.value_tensor(trace.roi_vectors);
    for (a, b) in got_vecs.data().iter().zip(roi_vecs.data()) {
        assert!((a - b).abs() < 1e-12, "roi vector mismatch: {a} vs {b}");
    }
    let got_scores = tape.value(trace.outputs.scores);
    let got_deltas = tape.value(trace.outputs.deltas);
    for (r, _) in proposals.iter().enumerate() {
        let row = &roi_vecs.data()[r * cfg.feature_dim..(r + 1) * cfg.feature_dim];
        let (scores, deltas) = manual_head(row, &params.box_head);
        for (k, v) in scores.iter().enumerate() {
            assert!((got_scores[r * scores.len() + k] - v).abs() < 1e-12);
        }
        for (k, v) in deltas.iter().enumerate() {
            assert!((got_deltas[r * 4 + k] - v).abs() < 1e-12);
        }
    }
}

#[test]
fn scale_roi_stage_matches_composition_oracle() {
    let cfg = tiny_cfg();
    let params = HrParams::init(&cfg, 43).unwrap();
    let scene = generate_scene(&cfg.scene_spec(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0xdef);
    let proposals = random_proposals(&mut rng, 2, 32.0);

    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, &params);
    let img = tape.constant(scene.image.data().to_vec(), scene.image.shape().to_vec());
    let pyr =
        graphdet::detector::backbone_forward_tape(&mut tape, img, &bound.backbone, &cfg).unwrap();
    let trace = scale_roi_stage(&mut tape, &bound, &pyr, &proposals, &cfg).unwrap();

    let pyramid = backbone_forward(&scene.image, &params, &cfg).unwrap();
    let metric = cfg.metric();
    let s = cfg.roi_size;
    let d = cfg.feature_dim;
    let mut vec_rows = Vec::new();
    for box_ in &proposals {
        let assigned =
            assign_pyramid_level(box_, cfg.levels, cfg.canonical_level(), cfg.canonical_size).level;
        let mut node_rows = Vec::new();
        for level in 0..cfg.levels {
            let pooled =
                roi_align(&pyramid.levels[level], box_, pyramid.strides[level], s).unwrap();
            node_rows.push(manual_linear(pooled.data(), &params.scale_proj));
        }
        let nodes = Tensor::matrix(&node_rows).unwrap();
        let graph = build_graph(
            &nodes,
            NodeGeometry::Scale {
                levels: (0..cfg.levels).collect(),
                level_count: cfg.levels,
            },
            &metric,
        )
        .unwrap();
        let enhanced = gam_forward_tensors(&graph, &params.scale_gam, &cfg.gam_config(d)).unwrap();
        vec_rows.push(enhanced.data()[assigned * d..(assigned + 1) * d].to_vec());
    }
    let pre_roi = Tensor::matrix(&vec_rows).unwrap();
    let roi_graph = build_graph(
        &pre_roi,
        NodeGeometry::Roi {
            boxes: proposals.clone(),
        },
        &metric,
    )
    .unwrap();
    let roi_vecs = gam_forward_tensors(&roi_graph, &params.roi_gam, &cfg.gam_config(d)).unwrap();

    let got_scores = tape.value(trace.outputs.scores);
    for (r, _) in proposals.iter().enumerate() {
        let row = &roi_vecs.data()[r * d..(r + 1) * d];
        let (scores, _) = manual_head(row, &params.box_head);
        for (k, v) in scores.iter().enumerate() {
            assert!(
                (got_scores[r * scores.len() + k] - v).abs() < 1e-12,
                "score mismatch at roi {r} class {k}"
            );
        }
    }
}

#[test]
fn constant_pyramid_doubles_the_scale_residual() {
    // All pyramid levels constant: every scale node is the same vector v, so
    // any row-stochastic attention gives v + Σ w v = 2v; with identity
    // fusion the readout is exactly the single-level vector doubled.
    let cfg = tiny_cfg();
    let mut params = HrParams::init(&cfg, 47).unwrap();
    params.scale_gam.fusion = Dense::identity(cfg.feature_dim);

    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, &params);
    let s = cfg.roi_size;
    let sizes = [(8usize, 8usize), (4, 4), (2, 2)];
    let levels: Vec<_> = sizes
        .iter()
        .map(|&(h, w)| tape.constant(vec![0.37; cfg.channels * h * w], vec![cfg.channels, h, w]))
        .collect();
    let pyr = graphdet::detector::PyramidVars {
        levels,
        strides: cfg.strides(),
    };

    let proposals = vec![Box::new(16.0, 16.0, 10.0, 10.0).unwrap()];
    let trace = scale_roi_stage(&mut tape, &bound, &pyr, &proposals, &cfg).unwrap();

    let flat = vec![0.37; s * s * cfg.channels];
    let single_level = manual_linear(&flat, &params.scale_proj);
    let pre = tape.value(trace.pre_roi);
    for (got, want) in pre.iter().zip(&single_level) {
        assert!((got - 2.0 * want).abs() < 1e-12, "{got} vs 2·{want}");
    }
}

#[test]
fn uniform_attention_forward_equals_mean_pool_reference() {
    // Zero edge MLPs + identity fusions reduce every GAM to
    // out = f + mean(f); the whole detector must then agree with a
    // hand-built cascade that adds mean-pooled context.
    let cfg = tiny_cfg();
    let mut params = HrParams::init(&cfg, 53).unwrap();
    let zero = |gp: &mut GamParams| {
        for layer in gp.edge_mlp.iter_mut() {
            layer.w.data_mut().fill(0.0);
            layer.b.data_mut().fill(0.0);
        }
    };
    zero(&mut params.pixel_gam);
    zero(&mut params.scale_gam);
    zero(&mut params.roi_gam);
    params.pixel_gam.fusion = Dense::identity(cfg.channels);
    params.scale_gam.fusion = Dense::identity(cfg.feature_dim);
    params.roi_gam.fusion = Dense::identity(cfg.feature_dim);

    let scene = generate_scene(&cfg.scene_spec(), 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0x111);
    let proposals = random_proposals(&mut rng, 3, 32.0);

    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, &params);
    let img = tape.constant(scene.image.data().to_vec(), scene.image.shape().to_vec());
    let fwd = hr_forward(&mut tape, &bound, img, &proposals, &cfg).unwrap();

    // Reference: plain two-stage cascade with mean-pooled context added.
    let pyramid = backbone_forward(&scene.image, &params, &cfg).unwrap();
    let s = cfg.roi_size;
    let c = cfg.channels;
    let add_mean_rows = |rows: &mut Vec<Vec<f64>>| {
        let n = rows.len();
        let width = rows[0].len();
        let mut mean = vec![0.0; width];
        for row in rows.iter() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n as f64;
            }
        }
        for row in rows.iter_mut() {
            for (v, m) in row.iter_mut().zip(&mean) {
                *v += m;
            }
        }
    };

    let stage_vectors = |boxes: &[Box], pixel_path: bool| -> Vec<Vec<f64>> {
        let mut vecs = Vec::new();
        for box_ in boxes {
            let assigned =
                assign_pyramid_level(box_, cfg.levels, cfg.canonical_level(), cfg.canonical_size)
                    .level;
            if pixel_path {
                let pooled = roi_align(
                    &pyramid.levels[assigned],
                    box_,
                    pyramid.strides[assigned],
                    s,
                )
                .unwrap();
                let nodes = to_nodes(&pooled, s, c);
                let mut rows: Vec<Vec<f64>> = (0..s * s)
                    .map(|k| nodes.data()[k * c..(k + 1) * c].to_vec())
                    .collect();
                add_mean_rows(&mut rows);
                let flat: Vec<f64> = rows.into_iter().flatten().collect();
                vecs.push(manual_linear(&flat, &params.pixel_proj));
            } else {
                let mut rows: Vec<Vec<f64>> = (0..cfg.levels)
                    .map(|level| {
                        let pooled =
                            roi_align(&pyramid.levels[level], box_, pyramid.strides[level], s)
                                .unwrap();
                        manual_linear(pooled.data(), &params.scale_proj)
                    })
                    .collect();
                add_mean_rows(&mut rows);
                vecs.push(rows[assigned].clone());
            }
        }
        add_mean_rows(&mut vecs);
        vecs
    };

    // Stage 1.
    let vec1 = stage_vectors(&proposals, true);
    let mut boxes1 = Vec::new();
    for (r, box_) in proposals.iter().enumerate() {
        let (scores, deltas) = manual_head(&vec1[r], &params.box_head);
        let got = tape.value(fwd.stage1.outputs.scores);
        for (k, v) in scores.iter().enumerate() {
            assert!(
                (got[r * scores.len() + k] - v).abs() < 1e-9,
                "stage1 score {r},{k}"
            );
        }
        let decoded =
            decode_deltas(box_, &[deltas[0], deltas[1], deltas[2], deltas[3]]).clip(32.0, 32.0);
        boxes1.push(decoded);
    }
    for (a, b) in boxes1.iter().zip(&fwd.stage1_boxes) {
        assert!((a.cx - b.cx).abs() < 1e-9 && (a.w - b.w).abs() < 1e-9);
    }

    // Stage 2 on the decoded boxes.
    let vec2 = stage_vectors(&boxes1, false);
    let stage2 = fwd.stage2.as_ref().unwrap();
    let got2 = tape.value(stage2.outputs.scores);
    for (r, _) in boxes1.iter().enumerate() {
        let (scores, _) = manual_head(&vec2[r], &params.box_head);
        for (k, v) in scores.iter().enumerate() {
            assert!(
                (got2[r * scores.len() + k] - v).abs() < 1e-9,
                "stage2 score {r},{k}"
            );
        }
    }
}
