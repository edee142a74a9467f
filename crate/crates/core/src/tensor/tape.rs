//! Operation recording and reverse-mode gradient computation.
//!
//! A [`Tape`] owns every intermediate value of one recorded computation.
//! Operations are appended in execution order; `backward` replays them in
//! exact reverse order, accumulating adjoints. A tape can run backward once;
//! afterwards it is spent and further recording or backward calls error.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// One bilinear sample tap: flat index into a feature plane plus its weight.
#[derive(Debug, Clone, Copy)]
pub struct Tap {
    pub idx: usize,
    pub weight: f64,
}

/// Pairwise semantic-distance kind, with any precomputed scaling baked in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PairKind {
    /// Per-group dot product times `scale` (1/sqrt(group width)).
    ScaledDot { scale: f64 },
    /// Per-group cosine similarity; zero when either norm is below 1e-12.
    Cosine,
    /// Negated per-group euclidean distance.
    Euclid,
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    needs_grad: bool,
}

struct ConvDims {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

enum Op {
    Linear {
        x: Var,
        w: Var,
        b: Var,
        out: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        out: Var,
    },
    Add {
        a: Var,
        b: Var,
        out: Var,
    },
    Sub {
        a: Var,
        b: Var,
        out: Var,
    },
    Mul {
        a: Var,
        b: Var,
        out: Var,
    },
    Scale {
        x: Var,
        c: f64,
        out: Var,
    },
    Relu {
        x: Var,
        out: Var,
    },
    SoftmaxRows {
        x: Var,
        t: f64,
        out: Var,
        rows: usize,
        cols: usize,
    },
    Sum {
        x: Var,
        out: Var,
    },
    ConcatCols {
        a: Var,
        b: Var,
        out: Var,
        rows: usize,
        ca: usize,
        cb: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
        out: Var,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
        out: Var,
        cols: usize,
    },
    Reshape {
        x: Var,
        out: Var,
    },
    Transpose {
        x: Var,
        out: Var,
        rows: usize,
        cols: usize,
    },
    PairwiseSemantic {
        f: Var,
        out: Var,
        n: usize,
        d: usize,
        groups: usize,
        kind: PairKind,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        out: Var,
        dims: ConvDims,
    },
    Upsample2x {
        x: Var,
        out: Var,
        c: usize,
        h: usize,
        w: usize,
    },
    RoiAlign {
        feat: Var,
        out: Var,
        taps: Vec<[Tap; 4]>,
        channels: usize,
        plane: usize,
    },
    CrossEntropySum {
        logits: Var,
        out: Var,
        targets: Vec<usize>,
        rows: usize,
        cols: usize,
    },
    SmoothL1Sum {
        pred: Var,
        out: Var,
        target: Vec<f64>,
        sel: Vec<usize>,
        cols: usize,
    },
}

/// Records operations in execution order and differentiates them in reverse.
/// Also carries a registry of named parameter bindings for checkpointing and
/// gradient read-back.
pub struct Tape {
    nodes: Vec<Node>,
    ops: Vec<Op>,
    params: Vec<(String, Var)>,
    spent: bool,
}

/// Adjoints produced by one backward pass, indexed by [`Var`].
pub struct Grads {
    by_node: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient with respect to `v`, if any gradient flowed to it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.by_node[v.0].as_deref()
    }

    /// Gradient of a leaf, defaulting to zeros of length `numel`.
    pub fn wrt_or_zero(&self, v: Var, numel: usize) -> Vec<f64> {
        match &self.by_node[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; numel],
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            ops: Vec::new(),
            params: Vec::new(),
            spent: false,
        }
    }

    fn push_node(&mut self, data: Vec<f64>, shape: Vec<usize>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            data,
            shape,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Bind a tensor as a leaf; gradient participation follows `requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push_node(t.data().to_vec(), t.shape().to_vec(), t.requires_grad)
    }

    /// Leaf that never receives gradient (edge geometry, targets, inputs).
    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Var {
        self.push_node(data, shape, false)
    }

    /// Bind a named parameter leaf and register it for gradient read-back.
    pub fn bind_param(&mut self, name: &str, t: &Tensor) -> Var {
        let v = self.push_node(t.data().to_vec(), t.shape().to_vec(), true);
        self.params.push((name.to_string(), v));
        v
    }

    /// Named parameter bindings in registration order.
    pub fn param_bindings(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node is consistent")
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    fn check_live(&self, op: &'static str) -> Result<()> {
        if self.spent {
            return Err(Error::Tape(format!(
                "{op}: tape already ran backward; re-record first"
            )));
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::shape(op, format!("expected 2-D, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    // ── recorded operations ──────────────────────────────────────────

    /// out[n,j] = Σ_d x[n,d]·w[d,j] + b[j]
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.check_live("linear")?;
        let (n, di) = self.dims2(x, "linear")?;
        let (wi, wo) = self.dims2(w, "linear")?;
        let bs = self.shape(b);
        if wi != di || bs != [wo] {
            return Err(Error::shape(
                "linear",
                format!("x[{n},{di}] w[{wi},{wo}] b{bs:?} do not conform"),
            ));
        }
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let mut out = vec![0.0; n * wo];
        for r in 0..n {
            let xrow = &xv[r * di..(r + 1) * di];
            let orow = &mut out[r * wo..(r + 1) * wo];
            orow.copy_from_slice(bv);
            for (d, &xd) in xrow.iter().enumerate() {
                if xd != 0.0 {
                    let wrow = &wv[d * wo..(d + 1) * wo];
                    for (o, &wdj) in orow.iter_mut().zip(wrow) {
                        *o += xd * wdj;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let out = self.push_node(out, vec![n, wo], needs);
        self.ops.push(Op::Linear { x, w, b, out });
        Ok(out)
    }

    /// Plain matrix product [m,k]·[k,n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live("matmul")?;
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for (kk, &ark) in av[r * k..(r + 1) * k].iter().enumerate() {
                if ark != 0.0 {
                    let brow = &bv[kk * n..(kk + 1) * n];
                    let orow = &mut out[r * n..(r + 1) * n];
                    for (o, &bkn) in orow.iter_mut().zip(brow) {
                        *o += ark * bkn;
                    }
                }
            }
        }
        let needs = self.needs(a) || self.needs(b);
        let out = self.push_node(out, vec![m, n], needs);
        self.ops.push(Op::MatMul { a, b, out });
        Ok(out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live("add")?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        let out = self.push_node(data, shape, needs);
        self.ops.push(Op::Add { a, b, out });
        Ok(out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live("sub")?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "sub",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        let out = self.push_node(data, shape, needs);
        self.ops.push(Op::Sub { a, b, out });
        Ok(out)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live("mul")?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        let shape = self.shape(a).to_vec();
        let out = self.push_node(data, shape, needs);
        self.ops.push(Op::Mul { a, b, out });
        Ok(out)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.check_live("scale")?;
        let data: Vec<f64> = self.value(x).iter().map(|v| v * c).collect();
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        let out = self.push_node(data, shape, needs);
        self.ops.push(Op::Scale { x, c, out });
        Ok(out)
    }

    /// Elementwise max(0, x); the subgradient at 0 is taken as 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.check_live("relu")?;
        let data: Vec<f64> = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let needs = self.needs(x);
        let shape = self.shape(x).to_vec();
        let out = self.push_node(data, shape, needs);
        self.ops.push(Op::Relu { x, out });
        Ok(out)
    }

    /// Temperature softmax over a 1-D vector, computed with max-subtraction.
    pub fn softmax_scaled(&mut self, x: Var, t: f64) -> Result<Var> {
        self.check_live("softmax_scaled")?;
        let s = self.shape(x);
        if s.len() != 1 {
            return Err(Error::shape(
                "softmax_scaled",
                format!("expected 1-D, got {s:?}"),
            ));
        }
        let n = s[0];
        self.softmax_impl(x, t, 1, n, vec![n])
    }

    /// Row-wise temperature softmax over a 2-D matrix.
    pub fn softmax_rows(&mut self, x: Var, t: f64) -> Result<Var> {
        self.check_live("softmax_rows")?;
        let (r, c) = self.dims2(x, "softmax_rows")?;
        self.softmax_impl(x, t, r, c, vec![r, c])
    }

    fn softmax_impl(
        &mut self,
        x: Var,
        t: f64,
        rows: usize,
        cols: usize,
        shape: Vec<usize>,
    ) -> Result<Var> {
        if !(t > 0.0) {
            return Err(Error::Parameter(format!(
                "softmax temperature must be > 0, got {t}"
            )));
        }
        let xv = self.value(x);
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut data[r * cols..(r + 1) * cols];
            let mut z = 0.0;
            for (o, &l) in orow.iter_mut().zip(row) {
                *o = ((l - m) / t).exp();
                z += *o;
            }
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        let needs = self.needs(x);
        let out = self.push_node(data, shape, needs);
        self.ops.push(Op::SoftmaxRows {
            x,
            t,
            out,
            rows,
            cols,
        });
        Ok(out)
    }

    /// Sum of all entries, as a scalar node.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_live("sum")?;
        let s: f64 = self.value(x).iter().sum();
        let needs = self.needs(x);
        let out = self.push_node(vec![s], vec![1], needs);
        self.ops.push(Op::Sum { x, out });
        Ok(out)
    }

    /// [r,ca] ∥ [r,cb] → [r, ca+cb]
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live("concat_cols")?;
        let (ra, ca) = self.dims2(a, "concat_cols")?;
        let (rb, cb) = self.dims2(b, "concat_cols")?;
        if ra != rb {
            return Err(Error::shape(
                "concat_cols",
                format!("{ra} rows vs {rb} rows"),
            ));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(&av[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
        }
        let needs = self.needs(a) || self.needs(b);
        let out = self.push_node(data, vec![ra, ca + cb], needs);
        self.ops.push(Op::ConcatCols {
            a,
            b,
            out,
            rows: ra,
            ca,
            cb,
        });
        Ok(out)
    }

    /// Stack 2-D parts with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        self.check_live("concat_rows")?;
        if parts.is_empty() {
            return Err(Error::shape("concat_rows", "no parts".to_string()));
        }
        let (_, c0) = self.dims2(parts[0], "concat_rows")?;
        let mut data = Vec::new();
        let mut rows = 0;
        let mut needs = false;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != c0 {
                return Err(Error::shape(
                    "concat_rows",
                    format!("{c} cols vs {c0} cols"),
                ));
            }
            rows += r;
            needs |= self.needs(p);
            data.extend_from_slice(self.value(p));
        }
        let out = self.push_node(data, vec![rows, c0], needs);
        self.ops.push(Op::ConcatRows {
            parts: parts.to_vec(),
            out,
        });
        Ok(out)
    }

    /// Select rows of a 2-D matrix by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        self.check_live("gather_rows")?;
        let (r, c) = self.dims2(x, "gather_rows")?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of {r}")));
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let needs = self.needs(x);
        let out = self.push_node(data, vec![idx.len(), c], needs);
        self.ops.push(Op::GatherRows {
            x,
            idx: idx.to_vec(),
            out,
            cols: c,
        });
        Ok(out)
    }

    /// [r,c] → [c,r]
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check_live("transpose")?;
        let (r, c) = self.dims2(x, "transpose")?;
        let xv = self.value(x);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xv[i * c + j];
            }
        }
        let needs = self.needs(x);
        let out = self.push_node(data, vec![c, r], needs);
        self.ops.push(Op::Transpose {
            x,
            out,
            rows: r,
            cols: c,
        });
        Ok(out)
    }

    /// Row-major reinterpretation with the same element count.
    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.check_live("reshape")?;
        let numel: usize = shape.iter().product();
        if numel != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?} changes element count", self.shape(x)),
            ));
        }
        let data = self.value(x).to_vec();
        let needs = self.needs(x);
        let out = self.push_node(data, shape, needs);
        self.ops.push(Op::Reshape { x, out });
        Ok(out)
    }

    /// Grouped semantic distances for all ordered node pairs.
    ///
    /// f is [n,d]; the output is [n·n, groups] with row i·n+j holding the
    /// per-group distance between query node i and key node j.
    pub fn pairwise_semantic(&mut self, f: Var, groups: usize, kind: PairKind) -> Result<Var> {
        self.check_live("pairwise_semantic")?;
        let (n, d) = self.dims2(f, "pairwise_semantic")?;
        if groups == 0 || d % groups != 0 {
            return Err(Error::Config(format!(
                "group count {groups} must divide feature dim {d}"
            )));
        }
        let gw = d / groups;
        let fv = self.value(f);
        let mut data = vec![0.0; n * n * groups];
        for i in 0..n {
            let fi = &fv[i * d..(i + 1) * d];
            for j in 0..n {
                let fj = &fv[j * d..(j + 1) * d];
                let orow = &mut data[(i * n + j) * groups..(i * n + j + 1) * groups];
                for (q, o) in orow.iter_mut().enumerate() {
                    let u = &fi[q * gw..(q + 1) * gw];
                    let v = &fj[q * gw..(q + 1) * gw];
                    *o = pair_value(u, v, kind);
                }
            }
        }
        let needs = self.needs(f);
        let out = self.push_node(data, vec![n * n, groups], needs);
        self.ops.push(Op::PairwiseSemantic {
            f,
            out,
            n,
            d,
            groups,
            kind,
        });
        Ok(out)
    }

    /// 2-D convolution, square kernel, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        self.check_live("conv2d")?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", format!("x{xs:?} w{ws:?}")));
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        if self.shape(b) != [cout] {
            return Err(Error::shape("conv2d", format!("bias {:?}", self.shape(b))));
        }
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                "kernel larger than padded input".to_string(),
            ));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bv[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += xv[ci * h * wd + iy as usize * wd + ix as usize]
                                    * wv[((co * cin + ci) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[co * oh * ow + oy * ow + ox] = acc;
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let out = self.push_node(out, vec![cout, oh, ow], needs);
        self.ops.push(Op::Conv2d {
            x,
            w,
            b,
            out,
            dims: ConvDims {
                cin,
                h,
                w: wd,
                cout,
                k,
                oh,
                ow,
                stride,
                pad,
            },
        });
        Ok(out)
    }

    /// Nearest-neighbor 2x upsampling of a [c,h,w] map.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        self.check_live("upsample2x")?;
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("upsample2x", format!("{xs:?}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x);
        let mut out = vec![0.0; c * 4 * h * w];
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let v = xv[ci * h * w + y * w + xx];
                    let base = ci * 4 * h * w;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        out[base + (2 * y + dy) * 2 * w + 2 * xx + dx] = v;
                    }
                }
            }
        }
        let needs = self.needs(x);
        let out = self.push_node(out, vec![c, 2 * h, 2 * w], needs);
        self.ops.push(Op::Upsample2x { x, out, c, h, w });
        Ok(out)
    }

    /// Bilinear pooling with precomputed taps (one sample per output bin).
    ///
    /// `feat` is [c, h, w] with plane = h·w; `taps` holds one 4-tap bilinear
    /// stencil per output bin, shared across channels. Output is [c, s, s]
    /// with s·s == taps.len().
    pub fn roi_align(&mut self, feat: Var, taps: &[[Tap; 4]], s: usize) -> Result<Var> {
        self.check_live("roi_align")?;
        let fs = self.shape(feat).to_vec();
        if fs.len() != 3 {
            return Err(Error::shape("roi_align", format!("{fs:?}")));
        }
        if taps.len() != s * s {
            return Err(Error::shape(
                "roi_align",
                format!("{} taps for s={s}", taps.len()),
            ));
        }
        let (c, h, w) = (fs[0], fs[1], fs[2]);
        let plane = h * w;
        let fv = self.value(feat);
        let mut out = vec![0.0; c * s * s];
        for ci in 0..c {
            let fplane = &fv[ci * plane..(ci + 1) * plane];
            let oplane = &mut out[ci * s * s..(ci + 1) * s * s];
            for (o, stencil) in oplane.iter_mut().zip(taps) {
                let mut acc = 0.0;
                for tap in stencil {
                    acc += tap.weight * fplane[tap.idx];
                }
                *o = acc;
            }
        }
        let needs = self.needs(feat);
        let out = self.push_node(out, vec![c, s, s], needs);
        self.ops.push(Op::RoiAlign {
            feat,
            out,
            taps: taps.to_vec(),
            channels: c,
            plane,
        });
        Ok(out)
    }

    /// Σ over rows of −log softmax(logits_row)[target_row].
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check_live("cross_entropy_sum")?;
        let (r, c) = self.dims2(logits, "cross_entropy_sum")?;
        if targets.len() != r {
            return Err(Error::shape(
                "cross_entropy_sum",
                format!("{} targets for {r} rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape(
                "cross_entropy_sum",
                format!("target {bad} out of {c}"),
            ));
        }
        let lv = self.value(logits);
        let mut total = 0.0;
        for (row, &t) in targets.iter().enumerate() {
            let l = &lv[row * c..(row + 1) * c];
            let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + l.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - l[t];
        }
        let needs = self.needs(logits);
        let out = self.push_node(vec![total], vec![1], needs);
        self.ops.push(Op::CrossEntropySum {
            logits,
            out,
            targets: targets.to_vec(),
            rows: r,
            cols: c,
        });
        Ok(out)
    }

    /// Smooth-L1 (beta = 1) summed over the selected rows of pred − target.
    pub fn smooth_l1_sum(&mut self, pred: Var, target: &[f64], sel: &[usize]) -> Result<Var> {
        self.check_live("smooth_l1_sum")?;
        let (r, c) = self.dims2(pred, "smooth_l1_sum")?;
        if target.len() != r * c {
            return Err(Error::shape(
                "smooth_l1_sum",
                format!("target length {} vs {}", target.len(), r * c),
            ));
        }
        if let Some(&bad) = sel.iter().find(|&&i| i >= r) {
            return Err(Error::shape(
                "smooth_l1_sum",
                format!("row {bad} out of {r}"),
            ));
        }
        let pv = self.value(pred);
        let mut total = 0.0;
        for &row in sel {
            for col in 0..c {
                let d = pv[row * c + col] - target[row * c + col];
                total += if d.abs() < 1.0 {
                    0.5 * d * d
                } else {
                    d.abs() - 0.5
                };
            }
        }
        let needs = self.needs(pred);
        let out = self.push_node(vec![total], vec![1], needs);
        self.ops.push(Op::SmoothL1Sum {
            pred,
            out,
            target: target.to_vec(),
            sel: sel.to_vec(),
            cols: c,
        });
        Ok(out)
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Consumes the recording: a second
    /// call without re-recording is an error.
    pub fn backward(&mut self, loss: Var) -> Result<Grads> {
        if self.spent {
            return Err(Error::Tape(
                "backward called twice without re-recording".to_string(),
            ));
        }
        self.spent = true;
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", "loss must be scalar".to_string()));
        }
        if !self.value(loss)[0].is_finite() {
            return Err(Error::Evaluation("loss is non-finite".to_string()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for oi in (0..self.ops.len()).rev() {
            self.backward_op(oi, &mut grads);
        }
        Ok(Grads { by_node: grads })
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => grads[v.0] = Some(delta.to_vec()),
        }
    }

    fn backward_op(&self, oi: usize, grads: &mut [Option<Vec<f64>>]) {
        // Each arm: fetch upstream adjoint of the output (if any flowed),
        // push the vector-Jacobian product into each differentiable input.
        match &self.ops[oi] {
            Op::Linear { x, w, b, out } => {
                let Some(dout) = grads[out.0].clone() else {
                    return;
                };
                let (n, di) = (self.shape(*x)[0], self.shape(*x)[1]);
                let wo = self.shape(*w)[1];
                let xv = &self.nodes[x.0].data;
                let wv = &self.nodes[w.0].data;
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * di];
                    for r in 0..n {
                        for d in 0..di {
                            let mut acc = 0.0;
                            let wrow = &wv[d * wo..(d + 1) * wo];
                            let drow = &dout[r * wo..(r + 1) * wo];
                            for (wdj, doj) in wrow.iter().zip(drow) {
                                acc += wdj * doj;
                            }
                            dx[r * di + d] = acc;
                        }
                    }
                    self.accum(grads, *x, &dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; di * wo];
                    for r in 0..n {
                        let xrow = &xv[r * di..(r + 1) * di];
                        let drow = &dout[r * wo..(r + 1) * wo];
                        for (d, &xd) in xrow.iter().enumerate() {
                            if xd != 0.0 {
                                let wrow = &mut dw[d * wo..(d + 1) * wo];
                                for (o, &doj) in wrow.iter_mut().zip(drow) {
                                    *o += xd * doj;
                                }
                            }
                        }
                    }
                    self.accum(grads, *w, &dw);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; wo];
                    for r in 0..n {
                        for (o, &doj) in db.iter_mut().zip(&dout[r * wo..(r + 1) * wo]) {
                            *o += doj;
                        }
                    }
                    self.accum(grads, *b, &db);
                }
            }
            Op::MatMul { a, b, out } => {
                let Some(dout) = grads[out.0].clone() else {
                    return;
                };
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let av = &self.nodes[a.0].data;
                let bv = &self.nodes[b.0].data;
                if self.needs(*a) {
                    // dA = dOut · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for r in 0..m {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            let brow = &bv[kk * n..(kk + 1) * n];
                            let drow = &dout[r * n..(r + 1) * n];
                            for (bkn, don) in brow.iter().zip(drow) {
                                acc += bkn * don;
                            }
                            da[r * k + kk] = acc;
                        }
                    }
                    self.accum(grads, *a, &da);
                }
                if self.needs(*b) {
                    // dB = Aᵀ · dOut
                    let mut db = vec![0.0; k * n];
                    for r in 0..m {
                        let drow = &dout[r * n..(r + 1) * n];
                        for kk in 0..k {
                            let ark = av[r * k + kk];
                            if ark != 0.0 {
                                let brow = &mut db[kk * n..(kk + 1) * n];
                                for (o, &don) in brow.iter_mut().zip(drow) {
                                    *o += ark * don;
                                }
                            }
                        }
                    }
                    self.accum(grads, *b, &db);
                }
            }
            Op::Add { a, b, out } => {
                let Some(dout) = grads[out.0].clone() else {
                    return;
                };
                self.accum(grads, *a, &dout);
                self.accum(grads, *b, &dout);
            }
            Op::Sub { a, b, out } => {
                let Some(dout) = grads[out.0].clone() else {
                    return;
                };
                self.accum(grads, *a, &dout);
                let neg: Vec<f64> = dout.iter().map(|v| -v).collect();
                self.accum(grads, *b, &neg);
            }
            Op::Mul { a, b, out } => {
                let Some(dout) = grads[out.0].clone() else {
                    return;
                };
                if self.needs(*a) {
                    let da: Vec<f64> = dout
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(d, v)| d * v)
                        .collect();
                    self.accum(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db: Vec<f64> = dout
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(d, v)| d * v)
                        .collect();
                    self.accum(grads, *b, &db);
                }
            }
            Op::Scale { x, c, out } => {
                let Some(dout) = grads[out.0].clone() else {
                    return;
                };
                let dx: Vec<f64> = dout.iter().map(|d| d * c).collect();
                self.accum(grads, *x, &dx);
            }
            Op::Relu { x, out } => {
                let Some(dout) = grads[out.0].clone() else {
                    return;
                };
                let dx: Vec<f64> = dout
                    .iter()
                    .zip(&self.nodes[x.0].data)
                    .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
                    .collect();
                self.accum(grads, *x, &dx);
            }
            Op::SoftmaxRows {
                x,
                t,
                out,
                rows,
                cols,
            } => {
                let Some(dout) = grads[out.0].clone() else {
                    return;
                };
                let ov = &self.nodes[out.0].data;
                let mut dx = vec![0.0; rows * cols];
                for r in 0..*rows {
                    let o = &ov[r * cols..(r + 1) * cols];
                    let d = &dout[r * cols..(r + 1) * cols];
                    let dot: f64 = o.iter().zip(d).map(|(oi, di)| oi * di).sum();
                    for c in 0..*cols {
                        dx[r * cols + c] = o[c] * (d[c] - dot) / t;
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::Sum { x, out } => {
                let Some(dout) = grads[out.0].clone() else {
                    return;
                };
                let dx = vec![dout[0]; self.nodes[x.0].data.len()];
                self.accum(grads, *x, &dx);
            }
            Op::ConcatCols {
                a,
                b,
                out,
                rows,
                ca,
                cb,
            } => {
                let Some(dout) = grads[out.0].clone() else {
                    return;
                };
                if self.needs(*a) {
                    let mut da = vec![0.0; rows * ca];
                    for r in 0..*rows {
                        da[r * ca..(r + 1) * ca]
                            .copy_from_slice(&dout[r * (ca + cb)..r * (ca + cb) + ca]);
                    }
                    self.accum(grads, *a, &da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; rows * cb];
                    for r in 0..*rows {
                        db[r * cb..(r + 1) * cb]
                            .copy_from_slice(&dout[r * (ca + cb) + ca..(r + 1) * (ca + cb)]);
                    }
                    self.accum(grads, *b, &db);
                }
            }
            Op::ConcatRows { parts, out } => {
                let Some(dout) = grads[out.0].clone() else {
                    return;
                };
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].data.len();
                    self.accum(grads, p, &dout[offset..offset + len]);
                    offset += len;
                }
            }
            Op::GatherRows { x, idx, out, cols } => {
                let Some(dout) = grads[out.0].clone() else {
                    return;
                };
                let mut dx = vec![0.0; self.nodes[x.0].data.len()];
                for (k, &i) in idx.iter().enumerate() {
                    for c in 0..*cols {
                        dx[i * cols + c] += dout[k * cols + c];
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::Reshape { x, out } => {
                let Some(dout) = grads[out.0].clone() else {
                    return;
                };
                self.accum(grads, *x, &dout);
            }
            Op::Transpose { x, out, rows, cols } => {
                let Some(dout) = grads[out.0].clone() else {
                    return;
                };
                let mut dx = vec![0.0; rows * cols];
                for i in 0..*rows {
                    for j in 0..*cols {
                        dx[i * cols + j] = dout[j * rows + i];
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::PairwiseSemantic {
                f,
                out,
                n,
                d,
                groups,
                kind,
            } => {
                let Some(dout) = grads[out.0].clone() else {
                    return;
                };
                if !self.needs(*f) {
                    return;
                }
                let gw = d / groups;
                let fv = &self.nodes[f.0].data;
                let mut df = vec![0.0; n * d];
                for i in 0..*n {
                    for j in 0..*n {
                        let drow = &dout[(i * n + j) * groups..(i * n + j + 1) * groups];
                        for (q, &dq) in drow.iter().enumerate() {
                            if dq == 0.0 {
                                continue;
                            }
                            let ui = i * d + q * gw;
                            let vj = j * d + q * gw;
                            let (du, dv) = pair_grad(&fv[ui..ui + gw], &fv[vj..vj + gw], *kind);
                            for k in 0..gw {
                                df[ui + k] += dq * du[k];
                                df[vj + k] += dq * dv[k];
                            }
                        }
                    }
                }
                self.accum(grads, *f, &df);
            }
            Op::Conv2d { x, w, b, out, dims } => {
                let Some(dout) = grads[out.0].clone() else {
                    return;
                };
                let ConvDims {
                    cin,
                    h,
                    w: wd,
                    cout,
                    k,
                    oh,
                    ow,
                    stride,
                    pad,
                } = *dims;
                let xv = &self.nodes[x.0].data;
                let wv = &self.nodes[w.0].data;
                let need_x = self.needs(*x);
                let need_w = self.needs(*w);
                let mut dx = vec![0.0; cin * h * wd];
                let mut dw = vec![0.0; cout * cin * k * k];
                for co in 0..cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = dout[co * oh * ow + oy * ow + ox];
                            if g == 0.0 {
                                continue;
                            }
                            for ci in 0..cin {
                                for ky in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = ci * h * wd + iy as usize * wd + ix as usize;
                                        let wi = ((co * cin + ci) * k + ky) * k + kx;
                                        if need_x {
                                            dx[xi] += g * wv[wi];
                                        }
                                        if need_w {
                                            dw[wi] += g * xv[xi];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if need_x {
                    self.accum(grads, *x, &dx);
                }
                if need_w {
                    self.accum(grads, *w, &dw);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; cout];
                    for co in 0..cout {
                        db[co] = dout[co * oh * ow..(co + 1) * oh * ow].iter().sum();
                    }
                    self.accum(grads, *b, &db);
                }
            }
            Op::Upsample2x { x, out, c, h, w } => {
                let Some(dout) = grads[out.0].clone() else {
                    return;
                };
                let mut dx = vec![0.0; c * h * w];
                for ci in 0..*c {
                    let base = ci * 4 * h * w;
                    for y in 0..*h {
                        for xx in 0..*w {
                            let mut acc = 0.0;
                            for (dy, dx2) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                                acc += dout[base + (2 * y + dy) * 2 * w + 2 * xx + dx2];
                            }
                            dx[ci * h * w + y * w + xx] = acc;
                        }
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::RoiAlign {
                feat,
                out,
                taps,
                channels,
                plane,
            } => {
                let Some(dout) = grads[out.0].clone() else {
                    return;
                };
                let bins = taps.len();
                let mut df = vec![0.0; channels * plane];
                for ci in 0..*channels {
                    for (kidx, stencil) in taps.iter().enumerate() {
                        let g = dout[ci * bins + kidx];
                        if g == 0.0 {
                            continue;
                        }
                        for tap in stencil {
                            df[ci * plane + tap.idx] += g * tap.weight;
                        }
                    }
                }
                self.accum(grads, *feat, &df);
            }
            Op::CrossEntropySum {
                logits,
                out,
                targets,
                rows,
                cols,
            } => {
                let Some(dout) = grads[out.0].clone() else {
                    return;
                };
                let g = dout[0];
                let lv = &self.nodes[logits.0].data;
                let mut dl = vec![0.0; rows * cols];
                for (row, &t) in targets.iter().enumerate() {
                    let l = &lv[row * cols..(row + 1) * cols];
                    let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
                    let z: f64 = exps.iter().sum();
                    for c in 0..*cols {
                        let p = exps[c] / z;
                        dl[row * cols + c] = g * (p - if c == t { 1.0 } else { 0.0 });
                    }
                }
                self.accum(grads, *logits, &dl);
            }
            Op::SmoothL1Sum {
                pred,
                out,
                target,
                sel,
                cols,
            } => {
                let Some(dout) = grads[out.0].clone() else {
                    return;
                };
                let g = dout[0];
                let pv = &self.nodes[pred.0].data;
                let mut dp = vec![0.0; pv.len()];
                for &row in sel {
                    for col in 0..*cols {
                        let d = pv[row * cols + col] - target[row * cols + col];
                        dp[row * cols + col] = g * if d.abs() < 1.0 { d } else { d.signum() };
                    }
                }
                self.accum(grads, *pred, &dp);
            }
        }
    }
}

fn pair_value(u: &[f64], v: &[f64], kind: PairKind) -> f64 {
    match kind {
        PairKind::ScaledDot { scale } => u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() * scale,
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
    }
}

/// Gradients of `pair_value` with respect to u and v.
fn pair_grad(u: &[f64], v: &[f64], kind: PairKind) -> (Vec<f64>, Vec<f64>) {
    match kind {
        PairKind::ScaledDot { scale } => {
            let du: Vec<f64> = v.iter().map(|b| b * scale).collect();
            let dv: Vec<f64> = u.iter().map(|a| a * scale).collect();
            (du, dv)
        }
        PairKind::Cosine => {
            let nu = u.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nv = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if nu < 1e-12 || nv < 1e-12 {
                return (vec![0.0; u.len()], vec![0.0; v.len()]);
            }
            let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
            let c = dot / (nu * nv);
            let du: Vec<f64> = u
                .iter()
                .zip(v)
                .map(|(a, b)| b / (nu * nv) - c * a / (nu * nu))
                .collect();
            let dv: Vec<f64> = u
                .iter()
                .zip(v)
                .map(|(a, b)| a / (nu * nv) - c * b / (nv * nv))
                .collect();
            (du, dv)
        }
        PairKind::Euclid => {
            let dist = u
                .iter()
                .zip(v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if dist < 1e-12 {
                // Subgradient 0 at coincident points; central differences agree.
                return (vec![0.0; u.len()], vec![0.0; v.len()]);
            }
            let du: Vec<f64> = u.iter().zip(v).map(|(a, b)| -(a - b) / dist).collect();
            let dv: Vec<f64> = u.iter().zip(v).map(|(a, b)| (a - b) / dist).collect();
            (du, dv)
        }
    }
}
