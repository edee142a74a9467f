//! Parameter containers for the detector, their initialization, and the
//! single flat registry view used by the optimizer and checkpoints.
//!
//! The box head exists once; both reasoning stages reference that one
//! instance unless head sharing is disabled, in which case a second,
//! independently initialized copy is created for stage 2.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gam::{Dense, DenseVars, GamParams, GamVars};
use crate::runcfg::RunConfig;
use crate::synth::{mix_seed, NUM_CLASSES};
use crate::tensor::{Tape, Tensor, Var};

/// One convolution layer: w is [c_out, c_in, k, k], b is [c_out].
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub w: Tensor,
    pub b: Tensor,
}

impl ConvLayer {
    /// Uniform(±sqrt(6/fan_in)) weights, zero bias; suits the relu trunk.
    pub fn he(rng: &mut impl Rng, c_in: usize, c_out: usize, k: usize) -> Self {
        let fan_in = c_in * k * k;
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..c_out * c_in * k * k)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        ConvLayer {
            w: Tensor::new(vec![c_out, c_in, k, k], data).expect("consistent"),
            b: Tensor::zeros(vec![c_out]),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.numel() + self.b.numel()
    }
}

/// Strided 3×3 trunk with 1×1 lateral layers for the top-down merge.
#[derive(Debug, Clone)]
pub struct BackboneParams {
    /// 3 → C, stride 2.
    pub stem: ConvLayer,
    /// C → C, stride 2 each; `downs[p]` feeds pyramid level p (stride 2^(p+2)).
    pub downs: Vec<ConvLayer>,
    /// 1×1 C → C per level.
    pub laterals: Vec<ConvLayer>,
}

#[derive(Debug, Clone)]
pub struct BoxHeadParams {
    pub fc1: Dense,
    pub fc2: Dense,
    pub cls: Dense,
    pub reg: Dense,
}

impl BoxHeadParams {
    fn init(rng: &mut impl Rng, d: usize) -> Self {
        BoxHeadParams {
            fc1: Dense::he(rng, d, d),
            fc2: Dense::he(rng, d, d),
            cls: Dense::xavier_scaled(rng, d, NUM_CLASSES + 1, 0.01),
            reg: Dense::xavier_scaled(rng, d, 4, 0.01),
        }
    }

    pub fn param_count(&self) -> usize {
        self.fc1.param_count()
            + self.fc2.param_count()
            + self.cls.param_count()
            + self.reg.param_count()
    }
}

/// The whole model: backbone, three GAM instances (pixel and RoI drive
/// stage 1, scale and RoI drive stage 2), per-stage projections, and the
/// shared box head.
#[derive(Debug, Clone)]
pub struct HrParams {
    pub backbone: BackboneParams,
    pub pixel_gam: GamParams,
    pub scale_gam: GamParams,
    pub roi_gam: GamParams,
    /// Flattened pixel-graph output (S²·C) → D.
    pub pixel_proj: Dense,
    /// Flattened per-level pooled feature (S²·C) → D.
    pub scale_proj: Dense,
    pub box_head: BoxHeadParams,
    /// Present only when head sharing is disabled.
    pub box_head_stage2: Option<BoxHeadParams>,
}

impl HrParams {
    pub fn init(cfg: &RunConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x696e6974));
        let c = cfg.channels;
        let d = cfg.feature_dim;
        let flat = cfg.roi_size * cfg.roi_size * c;
        let g = cfg.groups;

        let backbone = BackboneParams {
            stem: ConvLayer::he(&mut rng, 3, c, 3),
            downs: (0..cfg.levels)
                .map(|_| ConvLayer::he(&mut rng, c, c, 3))
                .collect(),
            laterals: (0..cfg.levels)
                .map(|_| ConvLayer::he(&mut rng, c, c, 1))
                .collect(),
        };
        let pixel_gam = GamParams::init(&cfg.gam_config(c), g + 2, &mut rng)?;
        let scale_gam = GamParams::init(&cfg.gam_config(d), g + 1, &mut rng)?;
        let roi_gam = GamParams::init(&cfg.gam_config(d), g + 4, &mut rng)?;
        let pixel_proj = Dense::he(&mut rng, flat, d);
        let scale_proj = Dense::he(&mut rng, flat, d);
        let box_head = BoxHeadParams::init(&mut rng, d);
        let box_head_stage2 = if cfg.share_head {
            None
        } else {
            let mut rng2 = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x68656164));
            Some(BoxHeadParams::init(&mut rng2, d))
        };

        Ok(HrParams {
            backbone,
            pixel_gam,
            scale_gam,
            roi_gam,
            pixel_proj,
            scale_proj,
            box_head,
            box_head_stage2,
        })
    }

    /// Visit every tensor once, in the fixed registry order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        visit_conv("backbone.stem", &self.backbone.stem, f);
        for (i, l) in self.backbone.downs.iter().enumerate() {
            visit_conv(&format!("backbone.down{i}"), l, f);
        }
        for (i, l) in self.backbone.laterals.iter().enumerate() {
            visit_conv(&format!("backbone.lateral{i}"), l, f);
        }
        visit_gam("pixel_gam", &self.pixel_gam, f);
        visit_gam("scale_gam", &self.scale_gam, f);
        visit_gam("roi_gam", &self.roi_gam, f);
        visit_dense("pixel_proj", &self.pixel_proj, f);
        visit_dense("scale_proj", &self.scale_proj, f);
        visit_head("box_head", &self.box_head, f);
        if let Some(head2) = &self.box_head_stage2 {
            visit_head("box_head2", head2, f);
        }
    }

    /// Mutable visit in exactly the same order as [`HrParams::visit`].
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        visit_conv_mut("backbone.stem", &mut self.backbone.stem, f);
        for (i, l) in self.backbone.downs.iter_mut().enumerate() {
            visit_conv_mut(&format!("backbone.down{i}"), l, f);
        }
        for (i, l) in self.backbone.laterals.iter_mut().enumerate() {
            visit_conv_mut(&format!("backbone.lateral{i}"), l, f);
        }
        visit_gam_mut("pixel_gam", &mut self.pixel_gam, f);
        visit_gam_mut("scale_gam", &mut self.scale_gam, f);
        visit_gam_mut("roi_gam", &mut self.roi_gam, f);
        visit_dense_mut("pixel_proj", &mut self.pixel_proj, f);
        visit_dense_mut("scale_proj", &mut self.scale_proj, f);
        visit_head_mut("box_head", &mut self.box_head, f);
        if let Some(head2) = &mut self.box_head_stage2 {
            visit_head_mut("box_head2", head2, f);
        }
    }

    /// Registry snapshot: (name, tensor) in visit order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t)));
        out
    }

    pub fn total_param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }
}

fn visit_dense<'a>(prefix: &str, d: &'a Dense, f: &mut dyn FnMut(String, &'a Tensor)) {
    f(format!("{prefix}.w"), &d.w);
    f(format!("{prefix}.b"), &d.b);
}

fn visit_dense_mut(prefix: &str, d: &mut Dense, f: &mut dyn FnMut(String, &mut Tensor)) {
    f(format!("{prefix}.w"), &mut d.w);
    f(format!("{prefix}.b"), &mut d.b);
}

fn visit_conv<'a>(prefix: &str, l: &'a ConvLayer, f: &mut dyn FnMut(String, &'a Tensor)) {
    f(format!("{prefix}.w"), &l.w);
    f(format!("{prefix}.b"), &l.b);
}

fn visit_conv_mut(prefix: &str, l: &mut ConvLayer, f: &mut dyn FnMut(String, &mut Tensor)) {
    f(format!("{prefix}.w"), &mut l.w);
    f(format!("{prefix}.b"), &mut l.b);
}

fn visit_gam<'a>(prefix: &str, g: &'a GamParams, f: &mut dyn FnMut(String, &'a Tensor)) {
    for (i, l) in g.edge_mlp.iter().enumerate() {
        visit_dense(&format!("{prefix}.edge_mlp{i}"), l, f);
    }
    visit_dense(&format!("{prefix}.fusion"), &g.fusion, f);
}

fn visit_gam_mut(prefix: &str, g: &mut GamParams, f: &mut dyn FnMut(String, &mut Tensor)) {
    for (i, l) in g.edge_mlp.iter_mut().enumerate() {
        visit_dense_mut(&format!("{prefix}.edge_mlp{i}"), l, f);
    }
    visit_dense_mut(&format!("{prefix}.fusion"), &mut g.fusion, f);
}

fn visit_head<'a>(prefix: &str, h: &'a BoxHeadParams, f: &mut dyn FnMut(String, &'a Tensor)) {
    visit_dense(&format!("{prefix}.fc1"), &h.fc1, f);
    visit_dense(&format!("{prefix}.fc2"), &h.fc2, f);
    visit_dense(&format!("{prefix}.cls"), &h.cls, f);
    visit_dense(&format!("{prefix}.reg"), &h.reg, f);
}

fn visit_head_mut(prefix: &str, h: &mut BoxHeadParams, f: &mut dyn FnMut(String, &mut Tensor)) {
    visit_dense_mut(&format!("{prefix}.fc1"), &mut h.fc1, f);
    visit_dense_mut(&format!("{prefix}.fc2"), &mut h.fc2, f);
    visit_dense_mut(&format!("{prefix}.cls"), &mut h.cls, f);
    visit_dense_mut(&format!("{prefix}.reg"), &mut h.reg, f);
}

/// Tape bindings for one convolution layer.
#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub w: Var,
    pub b: Var,
}

#[derive(Debug, Clone)]
pub struct BackboneVars {
    pub stem: ConvVars,
    pub downs: Vec<ConvVars>,
    pub laterals: Vec<ConvVars>,
}

#[derive(Debug, Clone)]
pub struct BoxHeadVars {
    pub fc1: DenseVars,
    pub fc2: DenseVars,
    pub cls: DenseVars,
    pub reg: DenseVars,
}

/// All parameter bindings for one recorded forward pass. When the head is
/// shared, both stages hold the very same `Var`s, so gradient contributions
/// from the two stages accumulate into one storage.
#[derive(Debug, Clone)]
pub struct BoundHr {
    pub backbone: BackboneVars,
    pub pixel_gam: GamVars,
    pub scale_gam: GamVars,
    pub roi_gam: GamVars,
    pub pixel_proj: DenseVars,
    pub scale_proj: DenseVars,
    pub box_head: BoxHeadVars,
    pub box_head_stage2: Option<BoxHeadVars>,
}

impl BoundHr {
    pub fn stage2_head(&self) -> &BoxHeadVars {
        self.box_head_stage2.as_ref().unwrap_or(&self.box_head)
    }
}

/// Bind every tensor in registry order; names mirror [`HrParams::visit`].
pub fn bind_model(tape: &mut Tape, params: &HrParams) -> BoundHr {
    let mut vars = Vec::new();
    params.visit(&mut |name, t| vars.push(tape.bind_param(&name, t)));
    assemble_bound(&vars, params)
}

/// Build the structured binding from leaves laid out in registry order.
/// `params` supplies the structure only (layer counts, head sharing).
pub fn assemble_bound(vars: &[Var], params: &HrParams) -> BoundHr {
    fn next_dense(it: &mut impl Iterator<Item = Var>) -> DenseVars {
        DenseVars {
            w: it.next().expect("var layout"),
            b: it.next().expect("var layout"),
        }
    }
    fn next_conv(it: &mut impl Iterator<Item = Var>) -> ConvVars {
        ConvVars {
            w: it.next().expect("var layout"),
            b: it.next().expect("var layout"),
        }
    }
    fn next_gam(it: &mut impl Iterator<Item = Var>, g: &GamParams) -> GamVars {
        GamVars {
            edge_mlp: g.edge_mlp.iter().map(|_| next_dense(it)).collect(),
            fusion: next_dense(it),
        }
    }
    fn next_head(it: &mut impl Iterator<Item = Var>) -> BoxHeadVars {
        BoxHeadVars {
            fc1: next_dense(it),
            fc2: next_dense(it),
            cls: next_dense(it),
            reg: next_dense(it),
        }
    }
    let mut it = vars.iter().copied();
    let backbone = BackboneVars {
        stem: next_conv(&mut it),
        downs: params
            .backbone
            .downs
            .iter()
            .map(|_| next_conv(&mut it))
            .collect(),
        laterals: params
            .backbone
            .laterals
            .iter()
            .map(|_| next_conv(&mut it))
            .collect(),
    };
    let bound = BoundHr {
        backbone,
        pixel_gam: next_gam(&mut it, &params.pixel_gam),
        scale_gam: next_gam(&mut it, &params.scale_gam),
        roi_gam: next_gam(&mut it, &params.roi_gam),
        pixel_proj: next_dense(&mut it),
        scale_proj: next_dense(&mut it),
        box_head: next_head(&mut it),
        box_head_stage2: params.box_head_stage2.as_ref().map(|_| next_head(&mut it)),
    };
    assert!(it.next().is_none(), "var layout mismatch");
    bound
}

/// Apply loaded tensors to the model by registry name.
pub fn apply_named_tensors(params: &mut HrParams, loaded: &[(String, Tensor)]) -> Result<()> {
    let mut remaining: std::collections::BTreeMap<&str, &Tensor> =
        loaded.iter().map(|(n, t)| (n.as_str(), t)).collect();
    if remaining.len() != loaded.len() {
        return Err(Error::Checkpoint("duplicate tensor names".to_string()));
    }
    let mut failure: Option<String> = None;
    params.visit_mut(&mut |name, slot| {
        if failure.is_some() {
            return;
        }
        match remaining.remove(name.as_str()) {
            Some(t) if t.shape() == slot.shape() => {
                slot.data_mut().copy_from_slice(t.data());
            }
            Some(t) => {
                failure = Some(format!(
                    "tensor {name}: shape {:?} does not match model {:?}",
                    t.shape(),
                    slot.shape()
                ));
            }
            None => failure = Some(format!("missing tensor: {name}")),
        }
    });
    if let Some(msg) = failure {
        return Err(Error::Checkpoint(msg));
    }
    if let Some((name, _)) = remaining.into_iter().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor: {name}")));
    }
    Ok(())
}
