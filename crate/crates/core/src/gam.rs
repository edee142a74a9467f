//! Graph Attention Module: per-edge MLP logits, temperature softmax
//! normalization, residual weighted aggregation, and a fusion layer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graphs::{edge_attrs_on_tape, GraphSkeleton, RelationGraph, SemanticMetric};
use crate::tensor::{Tape, Tensor, Var};

/// A linear layer's parameters: w is [d_in, d_out], b is [d_out].
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
}

impl Dense {
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Dense {
            w: Tensor::zeros(vec![d_in, d_out]),
            b: Tensor::zeros(vec![d_out]),
        }
    }

    /// Uniform(±sqrt(6/(fan_in+fan_out))) weights, zero bias.
    pub fn xavier(rng: &mut impl Rng, d_in: usize, d_out: usize) -> Self {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let data = (0..d_in * d_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Dense {
            w: Tensor::new(vec![d_in, d_out], data).expect("consistent"),
            b: Tensor::zeros(vec![d_out]),
        }
    }

    /// Uniform(±sqrt(6/fan_in)) weights, zero bias; preserves variance
    /// through relu chains.
    pub fn he(rng: &mut impl Rng, d_in: usize, d_out: usize) -> Self {
        let bound = (6.0 / d_in as f64).sqrt();
        let data = (0..d_in * d_out)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Dense {
            w: Tensor::new(vec![d_in, d_out], data).expect("consistent"),
            b: Tensor::zeros(vec![d_out]),
        }
    }

    /// Xavier weights shrunk by `gain`; output heads start near zero so the
    /// initial predictions are close to uniform scores and zero deltas.
    pub fn xavier_scaled(rng: &mut impl Rng, d_in: usize, d_out: usize, gain: f64) -> Self {
        let mut layer = Dense::xavier(rng, d_in, d_out);
        for v in layer.w.data_mut() {
            *v *= gain;
        }
        layer
    }

    /// Identity map with zero bias (requires d_in == d_out).
    pub fn identity(d: usize) -> Self {
        let mut w = Tensor::zeros(vec![d, d]);
        for i in 0..d {
            w.data_mut()[i * d + i] = 1.0;
        }
        Dense {
            w,
            b: Tensor::zeros(vec![d]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.w.numel() + self.b.numel()
    }
}

/// Tape bindings for one [`Dense`].
#[derive(Debug, Clone, Copy)]
pub struct DenseVars {
    pub w: Var,
    pub b: Var,
}

pub fn bind_dense(tape: &mut Tape, prefix: &str, layer: &Dense) -> DenseVars {
    DenseVars {
        w: tape.bind_param(&format!("{prefix}.w"), &layer.w),
        b: tape.bind_param(&format!("{prefix}.b"), &layer.b),
    }
}

/// Static configuration of one GAM instance.
#[derive(Debug, Clone)]
pub struct GamConfig {
    /// Softmax temperature; attention flattens toward uniform as it grows.
    pub temperature: f64,
    pub metric: SemanticMetric,
    /// Hidden width of the edge MLP; 0 selects a single linear layer.
    pub mlp_hidden: usize,
    /// Node feature dimension handled by this instance.
    pub feature_dim: usize,
}

impl GamConfig {
    pub fn new(feature_dim: usize) -> Self {
        GamConfig {
            temperature: 2.0,
            metric: SemanticMetric::default_dot(),
            mlp_hidden: 16,
            feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Parameter(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.metric.groups == 0 || self.feature_dim % self.metric.groups != 0 {
            return Err(Error::Config(format!(
                "group count {} must divide feature dim {}",
                self.metric.groups, self.feature_dim
            )));
        }
        Ok(())
    }
}

/// Learnable state of one GAM instance: the edge MLP mapping edge attributes
/// to a scalar logit, and the post-aggregation fusion layer.
#[derive(Debug, Clone)]
pub struct GamParams {
    /// One layer (edge_dim → 1) or two (edge_dim → hidden → 1, relu between).
    pub edge_mlp: Vec<Dense>,
    /// feature_dim → feature_dim, identity + zero bias at initialization so
    /// the module starts as a pure residual enhancement.
    pub fusion: Dense,
}

impl GamParams {
    pub fn init(cfg: &GamConfig, edge_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let edge_mlp = if cfg.mlp_hidden == 0 {
            vec![Dense::xavier(rng, edge_dim, 1)]
        } else {
            vec![
                Dense::xavier(rng, edge_dim, cfg.mlp_hidden),
                Dense::xavier(rng, cfg.mlp_hidden, 1),
            ]
        };
        Ok(GamParams {
            edge_mlp,
            fusion: Dense::identity(cfg.feature_dim),
        })
    }

    /// Zero edge MLP (uniform attention) with identity fusion; the module
    /// reduces to mean-pooled residual enhancement.
    pub fn uniform_attention(cfg: &GamConfig, edge_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let edge_mlp = if cfg.mlp_hidden == 0 {
            vec![Dense::zeros(edge_dim, 1)]
        } else {
            vec![
                Dense::zeros(edge_dim, cfg.mlp_hidden),
                Dense::zeros(cfg.mlp_hidden, 1),
            ]
        };
        Ok(GamParams {
            edge_mlp,
            fusion: Dense::identity(cfg.feature_dim),
        })
    }

    pub fn edge_input_dim(&self) -> usize {
        self.edge_mlp[0].in_dim()
    }

    /// Parameters in the attention path (edge MLP only).
    pub fn attention_param_count(&self) -> usize {
        self.edge_mlp.iter().map(Dense::param_count).sum()
    }

    pub fn fusion_param_count(&self) -> usize {
        self.fusion.param_count()
    }
}

/// Tape bindings for one [`GamParams`].
#[derive(Debug, Clone)]
pub struct GamVars {
    pub edge_mlp: Vec<DenseVars>,
    pub fusion: DenseVars,
}

pub fn bind_gam(tape: &mut Tape, prefix: &str, params: &GamParams) -> GamVars {
    let edge_mlp = params
        .edge_mlp
        .iter()
        .enumerate()
        .map(|(i, l)| bind_dense(tape, &format!("{prefix}.edge_mlp{i}"), l))
        .collect();
    GamVars {
        edge_mlp,
        fusion: bind_dense(tape, &format!("{prefix}.fusion"), &params.fusion),
    }
}

/// α[i,j] = edge-MLP(e_ij) over all ordered pairs; output is [n, n].
pub fn edge_scores(tape: &mut Tape, edge_attrs: Var, n: usize, mlp: &[DenseVars]) -> Result<Var> {
    let shape = tape.shape(edge_attrs);
    if shape.len() != 2 || shape[0] != n * n {
        return Err(Error::Config(format!("edge attrs {shape:?} for {n} nodes")));
    }
    if shape[1] != tape.shape(mlp[0].w)[0] {
        return Err(Error::Config(format!(
            "edge attr dim {} does not match edge-MLP input dim {}",
            shape[1],
            tape.shape(mlp[0].w)[0]
        )));
    }
    let mut x = edge_attrs;
    for (li, layer) in mlp.iter().enumerate() {
        x = tape.linear(x, layer.w, layer.b)?;
        if li + 1 < mlp.len() {
            x = tape.relu(x)?;
        }
    }
    if tape.shape(x)[1] != 1 {
        return Err(Error::Config(format!(
            "edge MLP must end in one logit, got {}",
            tape.shape(x)[1]
        )));
    }
    tape.reshape(x, vec![n, n])
}

/// Row-wise temperature softmax of the logits (Eq. 1 normalization).
pub fn normalize_attention(tape: &mut Tape, alpha: Var, temperature: f64) -> Result<Var> {
    tape.softmax_rows(alpha, temperature)
}

/// Residual weighted aggregation: out = f + W·f.
pub fn aggregate(tape: &mut Tape, features: Var, weights: Var) -> Result<Var> {
    let fs = tape.shape(features);
    let ws = tape.shape(weights);
    if fs.len() != 2 || ws.len() != 2 || ws[0] != ws[1] || ws[0] != fs[0] {
        return Err(Error::shape(
            "aggregate",
            format!("features {fs:?} weights {ws:?}"),
        ));
    }
    let mixed = tape.matmul(weights, features)?;
    tape.add(features, mixed)
}

/// Attention and enhanced features for one graph:
/// fusion(f + softmax_rows(mlp(e)/T)·f).
///
/// Returns (normalized attention [n,n], output features [n,d]).
pub fn gam_forward_with_attention(
    tape: &mut Tape,
    features: Var,
    skel: &GraphSkeleton,
    gam: &GamVars,
    cfg: &GamConfig,
) -> Result<(Var, Var)> {
    cfg.validate()?;
    let attrs = edge_attrs_on_tape(tape, features, skel, &cfg.metric)?;
    let alpha = edge_scores(tape, attrs, skel.n, &gam.edge_mlp)?;
    let weights = normalize_attention(tape, alpha, cfg.temperature)?;
    let agg = aggregate(tape, features, weights)?;
    let out = tape.linear(agg, gam.fusion.w, gam.fusion.b)?;
    Ok((weights, out))
}

/// Enhanced node features for one graph.
pub fn gam_forward(
    tape: &mut Tape,
    features: Var,
    skel: &GraphSkeleton,
    gam: &GamVars,
    cfg: &GamConfig,
) -> Result<Var> {
    Ok(gam_forward_with_attention(tape, features, skel, gam, cfg)?.1)
}

/// Convenience: run one GAM over a materialized graph, returning tensors.
pub fn gam_forward_tensors(
    graph: &RelationGraph,
    params: &GamParams,
    cfg: &GamConfig,
) -> Result<Tensor> {
    let (_, out) = gam_apply_tensors(graph, params, cfg)?;
    Ok(out)
}

/// Normalized attention matrix for a materialized graph.
pub fn gam_attention_tensors(
    graph: &RelationGraph,
    params: &GamParams,
    cfg: &GamConfig,
) -> Result<Tensor> {
    let (w, _) = gam_apply_tensors(graph, params, cfg)?;
    Ok(w)
}

fn gam_apply_tensors(
    graph: &RelationGraph,
    params: &GamParams,
    cfg: &GamConfig,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let f = tape.leaf(&graph.node_features);
    let gam = bind_gam(&mut tape, "gam", params);
    let skel = graph.skeleton()?;
    let (w, out) = gam_forward_with_attention(&mut tape, f, &skel, &gam, cfg)?;
    Ok((tape.value_tensor(w), tape.value_tensor(out)))
}
