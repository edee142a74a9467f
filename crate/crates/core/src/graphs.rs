//! Fully-connected relation graphs over pixels, pyramid scales, and RoIs.
//!
//! Every ordered node pair (i, j), self-loops included, carries an edge
//! attribute [s_ij ∥ d_ij]: grouped semantic distances followed by the
//! graph-kind-specific spatial distances.

use crate::error::{Error, Result};
use crate::geometry::Box;
use crate::tensor::{PairKind, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphKind {
    Pixel,
    Scale,
    Roi,
}

impl GraphKind {
    /// Spatial attribute width: 2 for pixel, 1 for scale, 4 for RoI edges.
    pub fn spatial_dim(&self) -> usize {
        match self {
            GraphKind::Pixel => 2,
            GraphKind::Scale => 1,
            GraphKind::Roi => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SemanticKind {
    GroupedDot,
    GroupedCosine,
    GroupedEuclidean,
}

/// Grouped semantic distance: node features are split into `groups`
/// contiguous chunks and compared chunk by chunk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemanticMetric {
    pub kind: SemanticKind,
    pub groups: usize,
}

impl SemanticMetric {
    pub fn new(kind: SemanticKind, groups: usize) -> Self {
        SemanticMetric { kind, groups }
    }

    /// Default metric: scaled dot product over two groups.
    pub fn default_dot() -> Self {
        SemanticMetric {
            kind: SemanticKind::GroupedDot,
            groups: 2,
        }
    }

    /// Tape-level pairwise kind for features of width `dim`.
    pub fn pair_kind(&self, dim: usize) -> Result<PairKind> {
        if self.groups == 0 || dim % self.groups != 0 {
            return Err(Error::Config(format!(
                "group count {} must divide feature dim {dim}",
                self.groups
            )));
        }
        let gw = dim / self.groups;
        Ok(match self.kind {
            SemanticKind::GroupedDot => PairKind::ScaledDot {
                scale: 1.0 / (gw as f64).sqrt(),
            },
            SemanticKind::GroupedCosine => PairKind::Cosine,
            SemanticKind::GroupedEuclidean => PairKind::Euclid,
        })
    }
}

/// Grouped semantic distance between two feature vectors.
///
/// Per chunk: dot(u,v)/sqrt(D/g) for GroupedDot; cosine (0 when either norm
/// is < 1e-12) for GroupedCosine; −‖u−v‖ for GroupedEuclidean.
pub fn semantic_distance(f_i: &[f64], f_j: &[f64], metric: &SemanticMetric) -> Result<Vec<f64>> {
    if f_i.len() != f_j.len() {
        return Err(Error::shape(
            "semantic_distance",
            "feature dims differ".to_string(),
        ));
    }
    let kind = metric.pair_kind(f_i.len())?;
    let gw = f_i.len() / metric.groups;
    let mut out = Vec::with_capacity(metric.groups);
    for q in 0..metric.groups {
        let u = &f_i[q * gw..(q + 1) * gw];
        let v = &f_j[q * gw..(q + 1) * gw];
        out.push(match kind {
            PairKind::ScaledDot { scale } => {
                u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() * scale
            }
            PairKind::Cosine => {
                let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
                let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                if nu < 1e-12 || nv < 1e-12 {
                    0.0
                } else {
                    u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (nu * nv)
                }
            }
            PairKind::Euclid => -u
                .iter()
                .zip(v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
        });
    }
    Ok(out)
}

/// d^P: pixel offsets normalized by the owning RoI extent.
pub fn pixel_spatial(pix_i: (f64, f64), pix_j: (f64, f64), roi: &Box) -> [f64; 2] {
    [(pix_i.0 - pix_j.0) / roi.w, (pix_i.1 - pix_j.1) / roi.h]
}

/// d^S: level offset normalized by the pyramid depth.
pub fn scale_spatial(p_i: usize, p_j: usize, level_count: usize) -> Result<[f64; 1]> {
    if p_i >= level_count || p_j >= level_count {
        return Err(Error::Parameter(format!(
            "levels ({p_i}, {p_j}) out of range for P={level_count}"
        )));
    }
    Ok([(p_i as f64 - p_j as f64) / level_count as f64])
}

/// d^R: center offsets normalized by box i, plus raw size ratios.
pub fn roi_spatial(box_i: &Box, box_j: &Box) -> [f64; 4] {
    [
        (box_i.cx - box_j.cx) / box_i.w,
        (box_i.cy - box_j.cy) / box_i.h,
        box_j.w / box_i.w,
        box_j.h / box_i.h,
    ]
}

/// Per-kind node placement. Lengths must match the node count.
#[derive(Debug, Clone)]
pub enum NodeGeometry {
    /// Pixel coordinates in image space, all inside one owning RoI.
    Pixel {
        pixels: Vec<(f64, f64)>,
        roi: Box,
    },
    /// One node per pyramid level; `levels.len()` must equal `level_count`.
    Scale {
        levels: Vec<usize>,
        level_count: usize,
    },
    Roi {
        boxes: Vec<Box>,
    },
}

impl NodeGeometry {
    pub fn kind(&self) -> GraphKind {
        match self {
            NodeGeometry::Pixel { .. } => GraphKind::Pixel,
            NodeGeometry::Scale { .. } => GraphKind::Scale,
            NodeGeometry::Roi { .. } => GraphKind::Roi,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            NodeGeometry::Pixel { pixels, .. } => pixels.len(),
            NodeGeometry::Scale { levels, .. } => levels.len(),
            NodeGeometry::Roi { boxes } => boxes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Geometry-only part of a graph: the N²·k spatial edge attributes, computed
/// once and treated as constants under differentiation.
#[derive(Debug, Clone)]
pub struct GraphSkeleton {
    pub kind: GraphKind,
    pub n: usize,
    pub spatial: Vec<f64>,
}

/// Spatial edge attributes for all ordered pairs, row-major by (i·N + j).
pub fn build_skeleton(geometry: &NodeGeometry) -> Result<GraphSkeleton> {
    let n = geometry.len();
    if n == 0 {
        return Err(Error::Construction(
            "graph needs at least one node".to_string(),
        ));
    }
    let kind = geometry.kind();
    let k = kind.spatial_dim();
    let mut spatial = Vec::with_capacity(n * n * k);
    match geometry {
        NodeGeometry::Pixel { pixels, roi } => {
            for &pi in pixels {
                for &pj in pixels {
                    spatial.extend_from_slice(&pixel_spatial(pi, pj, roi));
                }
            }
        }
        NodeGeometry::Scale {
            levels,
            level_count,
        } => {
            if levels.len() != *level_count {
                return Err(Error::Construction(format!(
                    "scale graph must have one node per level: {} nodes for P={level_count}",
                    levels.len()
                )));
            }
            for &pi in levels {
                for &pj in levels {
                    spatial.extend_from_slice(&scale_spatial(pi, pj, *level_count)?);
                }
            }
        }
        NodeGeometry::Roi { boxes } => {
            for bi in boxes {
                for bj in boxes {
                    spatial.extend_from_slice(&roi_spatial(bi, bj));
                }
            }
        }
    }
    Ok(GraphSkeleton { kind, n, spatial })
}

/// Record the full [N², g+k] edge-attribute matrix on a tape. The semantic
/// half differentiates back into `features`; the spatial half is constant.
pub fn edge_attrs_on_tape(
    tape: &mut Tape,
    features: Var,
    skel: &GraphSkeleton,
    metric: &SemanticMetric,
) -> Result<Var> {
    let fs = tape.shape(features);
    if fs.len() != 2 || fs[0] != skel.n {
        return Err(Error::Construction(format!(
            "features {fs:?} do not match {} graph nodes",
            skel.n
        )));
    }
    let d = fs[1];
    let kind = metric.pair_kind(d)?;
    let semantic = tape.pairwise_semantic(features, metric.groups, kind)?;
    let k = skel.kind.spatial_dim();
    let spatial = tape.constant(skel.spatial.clone(), vec![skel.n * skel.n, k]);
    tape.concat_cols(semantic, spatial)
}

/// A fully materialized relation graph.
#[derive(Debug, Clone)]
pub struct RelationGraph {
    pub kind: GraphKind,
    pub node_features: Tensor,
    pub geometry: NodeGeometry,
    /// [N, N, g + k], edge (i, j) at row-major position (i·N + j).
    pub edge_attrs: Tensor,
}

impl RelationGraph {
    pub fn node_count(&self) -> usize {
        self.node_features.shape()[0]
    }

    pub fn edge_dim(&self) -> usize {
        *self.edge_attrs.shape().last().unwrap()
    }

    /// Edge attribute vector for the ordered pair (i, j).
    pub fn edge(&self, i: usize, j: usize) -> &[f64] {
        let n = self.node_count();
        let e = self.edge_dim();
        &self.edge_attrs.data()[(i * n + j) * e..(i * n + j + 1) * e]
    }

    pub fn skeleton(&self) -> Result<GraphSkeleton> {
        build_skeleton(&self.geometry)
    }
}

/// Build a graph of the geometry's kind over `features` ([N, D]).
pub fn build_graph(
    features: &Tensor,
    geometry: NodeGeometry,
    metric: &SemanticMetric,
) -> Result<RelationGraph> {
    let fs = features.shape();
    if fs.len() != 2 {
        return Err(Error::Construction(format!(
            "features must be [N, D], got {fs:?}"
        )));
    }
    if fs[0] != geometry.len() {
        return Err(Error::Construction(format!(
            "{} feature rows vs {} geometry entries",
            fs[0],
            geometry.len()
        )));
    }
    let skel = build_skeleton(&geometry)?;
    // The same recorded path the training stages use, on a scratch tape.
    let mut tape = Tape::new();
    let f = tape.leaf(features);
    let attrs = edge_attrs_on_tape(&mut tape, f, &skel, metric)?;
    let n = skel.n;
    let e = metric.groups + skel.kind.spatial_dim();
    let edge_attrs = Tensor::new(vec![n, n, e], tape.value(attrs).to_vec())?;
    Ok(RelationGraph {
        kind: skel.kind,
        node_features: features.clone(),
        geometry,
        edge_attrs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(cx: f64, cy: f64, w: f64, h: f64) -> Box {
        Box::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn semantic_dot_hand_case() {
        let m = SemanticMetric::new(SemanticKind::GroupedDot, 2);
        let s = semantic_distance(&[1.0, 2.0, 3.0, 4.0], &[1.0, 0.0, 0.0, 1.0], &m).unwrap();
        let r2 = 2.0f64.sqrt();
        assert!((s[0] - 1.0 / r2).abs() < 1e-15);
        assert!((s[1] - 4.0 / r2).abs() < 1e-15);
    }

    #[test]
    fn semantic_cosine_identical_is_one() {
        let m = SemanticMetric::new(SemanticKind::GroupedCosine, 2);
        let f = [0.3, -1.2, 4.0, 0.5];
        let s = semantic_distance(&f, &f, &m).unwrap();
        for v in s {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn semantic_euclid_identical_is_zero() {
        let m = SemanticMetric::new(SemanticKind::GroupedEuclidean, 2);
        let f = [0.3, -1.2, 4.0, 0.5];
        assert_eq!(semantic_distance(&f, &f, &m).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn semantic_rejects_indivisible_groups() {
        let m = SemanticMetric::new(SemanticKind::GroupedDot, 3);
        assert!(semantic_distance(&[1.0; 4], &[1.0; 4], &m).is_err());
    }

    #[test]
    fn pixel_spatial_hand_case() {
        let roi = b(0.0, 0.0, 10.0, 20.0);
        let d = pixel_spatial((2.0, 4.0), (5.0, 8.0), &roi);
        assert_eq!(d, [-0.3, -0.2]);
    }

    #[test]
    fn pixel_spatial_self_and_antisymmetry() {
        let roi = b(0.0, 0.0, 8.0, 4.0);
        assert_eq!(pixel_spatial((3.0, 1.0), (3.0, 1.0), &roi), [0.0, 0.0]);
        let ij = pixel_spatial((2.0, 3.0), (5.0, 1.0), &roi);
        let ji = pixel_spatial((5.0, 1.0), (2.0, 3.0), &roi);
        assert_eq!(ij, [-ji[0], -ji[1]]);
    }

    #[test]
    fn scale_spatial_hand_cases() {
        assert_eq!(scale_spatial(1, 3, 4).unwrap(), [-0.5]);
        assert_eq!(scale_spatial(3, 0, 4).unwrap(), [0.75]);
        assert_eq!(scale_spatial(2, 2, 4).unwrap(), [0.0]);
    }

    #[test]
    fn scale_spatial_rejects_out_of_range_levels() {
        assert!(scale_spatial(2, 4, 4).is_err());
        assert!(scale_spatial(4, 0, 4).is_err());
    }

    #[test]
    fn roi_spatial_hand_case() {
        let d = roi_spatial(&b(10.0, 10.0, 4.0, 8.0), &b(12.0, 6.0, 8.0, 4.0));
        assert_eq!(d, [-0.5, 0.5, 2.0, 0.5]);
    }

    #[test]
    fn roi_spatial_self_edge() {
        let a = b(3.0, 4.0, 5.0, 6.0);
        assert_eq!(roi_spatial(&a, &a), [0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn roi_spatial_translation_invariant() {
        let a = b(10.0, 10.0, 4.0, 8.0);
        let c = b(12.0, 6.0, 8.0, 4.0);
        let (tx, ty) = (17.0, -5.0);
        let a2 = b(a.cx + tx, a.cy + ty, a.w, a.h);
        let c2 = b(c.cx + tx, c.cy + ty, c.w, c.h);
        assert_eq!(roi_spatial(&a, &c), roi_spatial(&a2, &c2));
    }

    #[test]
    fn singleton_graphs_have_expected_self_edges() {
        let m = SemanticMetric::default_dot();
        let f = Tensor::matrix(&[vec![1.0, 0.0]]).unwrap();

        let g = build_graph(
            &f,
            NodeGeometry::Pixel {
                pixels: vec![(4.0, 4.0)],
                roi: b(4.0, 4.0, 8.0, 8.0),
            },
            &m,
        )
        .unwrap();
        assert_eq!(g.edge(0, 0)[m.groups..], [0.0, 0.0]);

        let g = build_graph(
            &f,
            NodeGeometry::Roi {
                boxes: vec![b(4.0, 4.0, 8.0, 8.0)],
            },
            &m,
        )
        .unwrap();
        assert_eq!(g.edge(0, 0)[m.groups..], [0.0, 0.0, 1.0, 1.0]);

        let g = build_graph(
            &f,
            NodeGeometry::Scale {
                levels: vec![0],
                level_count: 1,
            },
            &m,
        )
        .unwrap();
        assert_eq!(g.edge(0, 0)[m.groups..], [0.0]);
    }

    #[test]
    fn pixel_graph_counts() {
        // 7×7 grid: 49 nodes, 2401 ordered edges, edge dim g+2.
        let s = 7;
        let roi = b(14.0, 14.0, 14.0, 14.0);
        let pixels = crate::geometry::roi_bin_centers(&roi, s);
        let feats =
            Tensor::new(vec![49, 4], (0..49 * 4).map(|i| i as f64 * 0.01).collect()).unwrap();
        let m = SemanticMetric::default_dot();
        let g = build_graph(&feats, NodeGeometry::Pixel { pixels, roi }, &m).unwrap();
        assert_eq!(g.node_count(), 49);
        assert_eq!(g.edge_attrs.shape(), &[49, 49, 4]);
        assert_eq!(g.edge_attrs.numel(), 2401 * 4);
    }

    #[test]
    fn scale_graph_shape() {
        let p = 4;
        let feats = Tensor::new(vec![p, 6], vec![0.5; p * 6]).unwrap();
        let m = SemanticMetric::default_dot();
        let g = build_graph(
            &feats,
            NodeGeometry::Scale {
                levels: (0..p).collect(),
                level_count: p,
            },
            &m,
        )
        .unwrap();
        assert_eq!(g.edge_attrs.shape(), &[4, 4, 3]);
    }

    #[test]
    fn build_graph_rejects_length_mismatch() {
        let feats = Tensor::new(vec![2, 4], vec![0.0; 8]).unwrap();
        let m = SemanticMetric::default_dot();
        let r = build_graph(
            &feats,
            NodeGeometry::Roi {
                boxes: vec![b(1.0, 1.0, 2.0, 2.0)],
            },
            &m,
        );
        assert!(r.is_err());
    }

    #[test]
    fn edge_attrs_match_double_loop_oracle() {
        // Independent oracle: per-pair calls to the three distance functions.
        let n = 5;
        let d = 6;
        let feats = Tensor::new(
            vec![n, d],
            (0..n * d)
                .map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3)
                .collect(),
        )
        .unwrap();
        let boxes: Vec<Box> = (0..n)
            .map(|i| {
                b(
                    10.0 + 3.0 * i as f64,
                    20.0 - 2.0 * i as f64,
                    4.0 + i as f64,
                    6.0,
                )
            })
            .collect();
        let m = SemanticMetric::new(SemanticKind::GroupedDot, 3);
        let g = build_graph(
            &feats,
            NodeGeometry::Roi {
                boxes: boxes.clone(),
            },
            &m,
        )
        .unwrap();
        for i in 0..n {
            let fi = &feats.data()[i * d..(i + 1) * d];
            for j in 0..n {
                let fj = &feats.data()[j * d..(j + 1) * d];
                let mut expect = semantic_distance(fi, fj, &m).unwrap();
                expect.extend_from_slice(&roi_spatial(&boxes[i], &boxes[j]));
                for (a, e) in g.edge(i, j).iter().zip(&expect) {
                    assert!((a - e).abs() < 1e-12);
                }
            }
        }
    }
}
