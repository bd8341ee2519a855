//! Operation tape: forward recording and reverse-mode gradient replay.

use rayon::prelude::*;

use super::{Shape, Tensor};
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    /// Stats per (sample, channel) over H*W.
    Instance,
    /// Stats per channel over B*H*W; gradients flow through the statistics.
    BatchTrain,
    /// Frozen statistics (running mean/var); affine path only.
    BatchEval,
}

enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        bias: NodeId,
        stride: usize,
    },
    BilinearResize {
        x: NodeId,
    },
    LeakyRelu {
        x: NodeId,
        slope: f64,
    },
    Norm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        kind: NormKind,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        k: f64,
    },
    AddScalar {
        x: NodeId,
    },
    Square {
        x: NodeId,
    },
    Abs {
        x: NodeId,
    },
    Mean {
        x: NodeId,
    },
    MeanPerSample {
        x: NodeId,
    },
}

struct Node {
    shape: Shape,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Records operations in order; `backward` traverses them in exact reverse,
/// accumulating gradients additively. A tape is single-use: build a fresh one
/// per optimization step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> NodeId {
        self.push(t.shape(), t.data().to_vec(), requires_grad, Op::Leaf)
    }

    pub fn shape(&self, id: NodeId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor::from_vec(self.nodes[id.0].shape, self.nodes[id.0].data.clone())
            .expect("node buffers always match their shape")
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].shape.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, shape: Shape, data: Vec<f64>, requires_grad: bool, op: Op) -> NodeId {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced on tape"
        );
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    // ---- forward ops -------------------------------------------------

    /// 3x3 convolution with same padding and stride 1 or 2; bias has shape
    /// (1, out_channels, 1, 1). Spatial dims halve (ceil) at stride 2.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, bias: NodeId, stride: usize) -> Result<NodeId> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let bs = self.shape(bias);
        if ws.h != 3 || ws.w != 3 {
            return Err(Error::Shape(format!("conv kernel must be 3x3, got {ws}")));
        }
        if ws.c != xs.c {
            return Err(Error::Shape(format!(
                "kernel expects {} input channels, input has {}",
                ws.c, xs.c
            )));
        }
        if bs != Shape::new(1, ws.b, 1, 1) {
            return Err(Error::Shape(format!("bias shape {bs} != (1,{},1,1)", ws.b)));
        }
        if stride != 1 && stride != 2 {
            return Err(Error::Parameter(format!("conv stride must be 1 or 2, got {stride}")));
        }
        let os = Shape::new(xs.b, ws.b, (xs.h - 1) / stride + 1, (xs.w - 1) / stride + 1);

        let xd = &self.nodes[x.0].data;
        let wd = &self.nodes[w.0].data;
        let bd = &self.nodes[bias.0].data;
        let mut out = vec![0.0; os.len()];
        let plane = os.h * os.w;
        out.par_chunks_mut(plane).enumerate().for_each(|(p, dst)| {
            let b = p / os.c;
            let co = p % os.c;
            for oy in 0..os.h {
                for ox in 0..os.w {
                    let mut acc = bd[co];
                    for ci in 0..xs.c {
                        for ky in 0..3usize {
                            let iy = oy * stride + ky;
                            if iy == 0 || iy > xs.h {
                                continue;
                            }
                            let iy = iy - 1;
                            for kx in 0..3usize {
                                let ix = ox * stride + kx;
                                if ix == 0 || ix > xs.w {
                                    continue;
                                }
                                let ix = ix - 1;
                                acc += xd[xs.idx(b, ci, iy, ix)] * wd[ws.idx(co, ci, ky, kx)];
                            }
                        }
                    }
                    dst[oy * os.w + ox] = acc;
                }
            }
        });

        let rg = self.rg(x) || self.rg(w) || self.rg(bias);
        Ok(self.push(os, out, rg, Op::Conv2d { x, w, bias, stride }))
    }

    /// Bilinear interpolation to (out_h, out_w) with corner alignment;
    /// exact identity when the size is unchanged.
    pub fn bilinear_resize(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::Parameter("resize target must be positive".into()));
        }
        let xs = self.shape(x);
        let os = Shape::new(xs.b, xs.c, out_h, out_w);
        let xd = &self.nodes[x.0].data;
        let mut out = vec![0.0; os.len()];
        let sy = if out_h > 1 {
            (xs.h - 1) as f64 / (out_h - 1) as f64
        } else {
            0.0
        };
        let sx = if out_w > 1 {
            (xs.w - 1) as f64 / (out_w - 1) as f64
        } else {
            0.0
        };
        for b in 0..xs.b {
            for c in 0..xs.c {
                for oy in 0..out_h {
                    let fy = oy as f64 * sy;
                    let y0 = (fy.floor() as usize).min(xs.h - 1);
                    let y1 = (y0 + 1).min(xs.h - 1);
                    let ty = fy - y0 as f64;
                    for ox in 0..out_w {
                        let fx = ox as f64 * sx;
                        let x0 = (fx.floor() as usize).min(xs.w - 1);
                        let x1 = (x0 + 1).min(xs.w - 1);
                        let tx = fx - x0 as f64;
                        let v = (1.0 - ty) * (1.0 - tx) * xd[xs.idx(b, c, y0, x0)]
                            + (1.0 - ty) * tx * xd[xs.idx(b, c, y0, x1)]
                            + ty * (1.0 - tx) * xd[xs.idx(b, c, y1, x0)]
                            + ty * tx * xd[xs.idx(b, c, y1, x1)];
                        out[os.idx(b, c, oy, ox)] = v;
                    }
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(os, out, rg, Op::BilinearResize { x }))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let xs = self.shape(x);
        let out: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        let rg = self.rg(x);
        self.push(xs, out, rg, Op::LeakyRelu { x, slope })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.leaky_relu(x, 0.0)
    }

    /// Instance normalization: zero mean / unit variance per (sample, channel)
    /// before the affine (gamma, beta), both shaped (1, C, 1, 1).
    pub fn instance_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        let xs = self.shape(x);
        if xs.h * xs.w <= 1 {
            return Err(Error::Parameter(
                "instance_norm requires spatial size > 1".into(),
            ));
        }
        self.norm(x, gamma, beta, NormKind::Instance, None)
    }

    /// Batch normalization over (B, H, W) per channel. In training mode the
    /// batch statistics are used (and pushed into `running` when given);
    /// in eval mode `running` supplies frozen statistics.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        training: bool,
        running: Option<&mut RunningStats>,
    ) -> Result<NodeId> {
        if training {
            let id = self.norm(x, gamma, beta, NormKind::BatchTrain, None)?;
            if let Some(rs) = running {
                // Recompute per-channel stats for the running update.
                let xs = self.shape(x);
                let (mus, vars) = channel_stats(&self.nodes[x.0].data, xs);
                rs.update(&mus, &vars);
            }
            Ok(id)
        } else {
            let rs = running.ok_or_else(|| {
                Error::Parameter("batch_norm eval mode requires running stats".into())
            })?;
            self.norm(x, gamma, beta, NormKind::BatchEval, Some((&rs.mean, &rs.var)))
        }
    }

    fn norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        kind: NormKind,
        frozen: Option<(&[f64], &[f64])>,
    ) -> Result<NodeId> {
        let xs = self.shape(x);
        let gs = self.shape(gamma);
        if gs != Shape::new(1, xs.c, 1, 1) || self.shape(beta) != gs {
            return Err(Error::Shape(format!(
                "norm affine params must be (1,{},1,1)",
                xs.c
            )));
        }
        let hw = xs.h * xs.w;
        let groups: Vec<Vec<usize>> = match kind {
            NormKind::Instance => (0..xs.b * xs.c)
                .map(|g| {
                    let (b, c) = (g / xs.c, g % xs.c);
                    (0..hw).map(|i| xs.idx(b, c, i / xs.w, i % xs.w)).collect()
                })
                .collect(),
            NormKind::BatchTrain | NormKind::BatchEval => (0..xs.c)
                .map(|c| {
                    (0..xs.b)
                        .flat_map(|b| (0..hw).map(move |i| (b, i)))
                        .map(|(b, i)| xs.idx(b, c, i / xs.w, i % xs.w))
                        .collect()
                })
                .collect(),
        };

        let xd = &self.nodes[x.0].data;
        let gd = &self.nodes[gamma.0].data;
        let bd = &self.nodes[beta.0].data;
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; groups.len()];
        let mut out = vec![0.0; xd.len()];
        for (g, idxs) in groups.iter().enumerate() {
            let (mu, var) = match (kind, frozen) {
                (NormKind::BatchEval, Some((m, v))) => (m[g], v[g]),
                _ => {
                    let n = idxs.len() as f64;
                    let mu = idxs.iter().map(|&i| xd[i]).sum::<f64>() / n;
                    let var = idxs.iter().map(|&i| (xd[i] - mu) * (xd[i] - mu)).sum::<f64>() / n;
                    (mu, var)
                }
            };
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[g] = inv;
            let c = match kind {
                NormKind::Instance => g % xs.c,
                _ => g,
            };
            for &i in idxs {
                let xh = (xd[i] - mu) * inv;
                xhat[i] = xh;
                out[i] = gd[c] * xh + bd[c];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            xs,
            out,
            rg,
            Op::Norm {
                x,
                gamma,
                beta,
                kind,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip(a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a), out, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip(a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a), out, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.zip(a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a), out, rg, Op::Mul { a, b }))
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape(format!(
                "elementwise op on {sa} vs {sb} (no implicit broadcasting)"
            )));
        }
        Ok(self.nodes[a.0]
            .data
            .iter()
            .zip(self.nodes[b.0].data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect())
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v * k).collect();
        let rg = self.rg(x);
        self.push(self.shape(x), out, rg, Op::Scale { x, k })
    }

    pub fn add_scalar(&mut self, x: NodeId, k: f64) -> NodeId {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v + k).collect();
        let rg = self.rg(x);
        self.push(self.shape(x), out, rg, Op::AddScalar { x })
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v * v).collect();
        let rg = self.rg(x);
        self.push(self.shape(x), out, rg, Op::Square { x })
    }

    /// Elementwise absolute value; subgradient 0 at 0.
    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| v.abs()).collect();
        let rg = self.rg(x);
        self.push(self.shape(x), out, rg, Op::Abs { x })
    }

    /// Full reduction to a (1,1,1,1) scalar.
    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let d = &self.nodes[x.0].data;
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(x);
        self.push(Shape::new(1, 1, 1, 1), vec![m], rg, Op::Mean { x })
    }

    /// Mean over (channels, height, width) per sample -> (B,1,1,1).
    pub fn mean_per_sample(&mut self, x: NodeId) -> NodeId {
        let xs = self.shape(x);
        let per = xs.c * xs.h * xs.w;
        let out: Vec<f64> = (0..xs.b)
            .map(|b| {
                self.nodes[x.0].data[b * per..(b + 1) * per]
                    .iter()
                    .sum::<f64>()
                    / per as f64
            })
            .collect();
        let rg = self.rg(x);
        self.push(Shape::new(xs.b, 1, 1, 1), out, rg, Op::MeanPerSample { x })
    }

    // ---- backward ----------------------------------------------------

    fn accumulate(&mut self, id: NodeId, contrib: &[f64]) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let node = &mut self.nodes[id.0];
        let grad = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
        for (g, c) in grad.iter_mut().zip(contrib.iter()) {
            *g += c;
        }
    }

    /// Reverse pass from a scalar loss. Consumes the recorded operations;
    /// gradients stay readable via [`Tape::grad`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes[loss.0].shape.len() != 1 {
            return Err(Error::Shape("backward requires a scalar loss".into()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Parameter(
                "loss does not depend on any gradient-tracked leaf".into(),
            ));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
            let gout = self.nodes[id]
                .grad
                .clone()
                .expect("grad present by the check above");
            match op {
                Op::Leaf => {}
                Op::Conv2d { x, w, bias, stride } => {
                    self.conv2d_backward(id, x, w, bias, stride, &gout);
                }
                Op::BilinearResize { x } => {
                    let os = self.nodes[id].shape;
                    let xs = self.shape(x);
                    let mut dx = vec![0.0; xs.len()];
                    let sy = if os.h > 1 {
                        (xs.h - 1) as f64 / (os.h - 1) as f64
                    } else {
                        0.0
                    };
                    let sx = if os.w > 1 {
                        (xs.w - 1) as f64 / (os.w - 1) as f64
                    } else {
                        0.0
                    };
                    for b in 0..xs.b {
                        for c in 0..xs.c {
                            for oy in 0..os.h {
                                let fy = oy as f64 * sy;
                                let y0 = (fy.floor() as usize).min(xs.h - 1);
                                let y1 = (y0 + 1).min(xs.h - 1);
                                let ty = fy - y0 as f64;
                                for ox in 0..os.w {
                                    let fx = ox as f64 * sx;
                                    let x0 = (fx.floor() as usize).min(xs.w - 1);
                                    let x1 = (x0 + 1).min(xs.w - 1);
                                    let tx = fx - x0 as f64;
                                    let g = gout[os.idx(b, c, oy, ox)];
                                    dx[xs.idx(b, c, y0, x0)] += (1.0 - ty) * (1.0 - tx) * g;
                                    dx[xs.idx(b, c, y0, x1)] += (1.0 - ty) * tx * g;
                                    dx[xs.idx(b, c, y1, x0)] += ty * (1.0 - tx) * g;
                                    dx[xs.idx(b, c, y1, x1)] += ty * tx * g;
                                }
                            }
                        }
                    }
                    self.accumulate(x, &dx);
                }
                Op::LeakyRelu { x, slope } => {
                    let dx: Vec<f64> = self.nodes[x.0]
                        .data
                        .iter()
                        .zip(gout.iter())
                        .map(|(&v, &g)| if v > 0.0 { g } else if v < 0.0 { slope * g } else { 0.0 })
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Norm {
                    x,
                    gamma,
                    beta,
                    kind,
                    xhat,
                    inv_std,
                } => {
                    self.norm_backward(x, gamma, beta, kind, &xhat, &inv_std, &gout);
                }
                Op::Add { a, b } => {
                    self.accumulate(a, &gout);
                    self.accumulate(b, &gout);
                }
                Op::Sub { a, b } => {
                    self.accumulate(a, &gout);
                    let neg: Vec<f64> = gout.iter().map(|g| -g).collect();
                    self.accumulate(b, &neg);
                }
                Op::Mul { a, b } => {
                    let da: Vec<f64> = self.nodes[b.0]
                        .data
                        .iter()
                        .zip(gout.iter())
                        .map(|(&v, &g)| v * g)
                        .collect();
                    let db: Vec<f64> = self.nodes[a.0]
                        .data
                        .iter()
                        .zip(gout.iter())
                        .map(|(&v, &g)| v * g)
                        .collect();
                    self.accumulate(a, &da);
                    self.accumulate(b, &db);
                }
                Op::Scale { x, k } => {
                    let dx: Vec<f64> = gout.iter().map(|g| g * k).collect();
                    self.accumulate(x, &dx);
                }
                Op::AddScalar { x } => {
                    self.accumulate(x, &gout);
                }
                Op::Square { x } => {
                    let dx: Vec<f64> = self.nodes[x.0]
                        .data
                        .iter()
                        .zip(gout.iter())
                        .map(|(&v, &g)| 2.0 * v * g)
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Abs { x } => {
                    let dx: Vec<f64> = self.nodes[x.0]
                        .data
                        .iter()
                        .zip(gout.iter())
                        .map(|(&v, &g)| {
                            if v > 0.0 {
                                g
                            } else if v < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    self.accumulate(x, &dx);
                }
                Op::Mean { x } => {
                    let n = self.nodes[x.0].data.len();
                    let dx = vec![gout[0] / n as f64; n];
                    self.accumulate(x, &dx);
                }
                Op::MeanPerSample { x } => {
                    let xs = self.shape(x);
                    let per = xs.c * xs.h * xs.w;
                    let mut dx = vec![0.0; xs.len()];
                    for b in 0..xs.b {
                        let g = gout[b] / per as f64;
                        for v in dx[b * per..(b + 1) * per].iter_mut() {
                            *v = g;
                        }
                    }
                    self.accumulate(x, &dx);
                }
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &mut self,
        out: usize,
        x: NodeId,
        w: NodeId,
        bias: NodeId,
        stride: usize,
        gout: &[f64],
    ) {
        let os = self.nodes[out].shape;
        let xs = self.shape(x);
        let ws = self.shape(w);

        if self.rg(bias) {
            let mut db = vec![0.0; ws.b];
            for b in 0..os.b {
                for (co, dbv) in db.iter_mut().enumerate() {
                    for oy in 0..os.h {
                        for ox in 0..os.w {
                            *dbv += gout[os.idx(b, co, oy, ox)];
                        }
                    }
                }
            }
            self.accumulate(bias, &db);
        }

        if self.rg(w) {
            let xd = &self.nodes[x.0].data;
            let mut dw = vec![0.0; ws.len()];
            dw.par_chunks_mut(9).enumerate().for_each(|(p, dst)| {
                let co = p / ws.c;
                let ci = p % ws.c;
                for ky in 0..3usize {
                    for kx in 0..3usize {
                        let mut acc = 0.0;
                        for b in 0..os.b {
                            for oy in 0..os.h {
                                let iy = oy * stride + ky;
                                if iy == 0 || iy > xs.h {
                                    continue;
                                }
                                for ox in 0..os.w {
                                    let ix = ox * stride + kx;
                                    if ix == 0 || ix > xs.w {
                                        continue;
                                    }
                                    acc += gout[os.idx(b, co, oy, ox)]
                                        * xd[xs.idx(b, ci, iy - 1, ix - 1)];
                                }
                            }
                        }
                        dst[ky * 3 + kx] = acc;
                    }
                }
            });
            self.accumulate(w, &dw);
        }

        if self.rg(x) {
            let wd = &self.nodes[w.0].data;
            let mut dx = vec![0.0; xs.len()];
            let plane = xs.h * xs.w;
            dx.par_chunks_mut(plane).enumerate().for_each(|(p, dst)| {
                let b = p / xs.c;
                let ci = p % xs.c;
                for iy in 0..xs.h {
                    for ix in 0..xs.w {
                        let mut acc = 0.0;
                        for ky in 0..3usize {
                            let oy_num = iy + 1;
                            if oy_num < ky || (oy_num - ky) % stride != 0 {
                                continue;
                            }
                            let oy = (oy_num - ky) / stride;
                            if oy >= os.h {
                                continue;
                            }
                            for kx in 0..3usize {
                                let ox_num = ix + 1;
                                if ox_num < kx || (ox_num - kx) % stride != 0 {
                                    continue;
                                }
                                let ox = (ox_num - kx) / stride;
                                if ox >= os.w {
                                    continue;
                                }
                                for co in 0..os.c {
                                    acc += gout[os.idx(b, co, oy, ox)]
                                        * wd[ws.idx(co, ci, ky, kx)];
                                }
                            }
                        }
                        dst[iy * xs.w + ix] = acc;
                    }
                }
            });
            self.accumulate(x, &dx);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_backward(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        kind: NormKind,
        xhat: &[f64],
        inv_std: &[f64],
        gout: &[f64],
    ) {
        let xs = self.shape(x);
        let hw = xs.h * xs.w;
        let gd = self.nodes[gamma.0].data.clone();

        let group_of = |g: usize| -> (usize, Vec<usize>) {
            match kind {
                NormKind::Instance => {
                    let (b, c) = (g / xs.c, g % xs.c);
                    (
                        c,
                        (0..hw).map(|i| xs.idx(b, c, i / xs.w, i % xs.w)).collect(),
                    )
                }
                _ => (
                    g,
                    (0..xs.b)
                        .flat_map(|b| (0..hw).map(move |i| (b, i)))
                        .map(|(b, i)| xs.idx(b, g, i / xs.w, i % xs.w))
                        .collect(),
                ),
            }
        };
        let n_groups = inv_std.len();

        if self.rg(gamma) || self.rg(beta) {
            let mut dgamma = vec![0.0; xs.c];
            let mut dbeta = vec![0.0; xs.c];
            for g in 0..n_groups {
                let (c, idxs) = group_of(g);
                for &i in &idxs {
                    dgamma[c] += gout[i] * xhat[i];
                    dbeta[c] += gout[i];
                }
            }
            self.accumulate(gamma, &dgamma);
            self.accumulate(beta, &dbeta);
        }

        if self.rg(x) {
            let mut dx = vec![0.0; xs.len()];
            for g in 0..n_groups {
                let (c, idxs) = group_of(g);
                let inv = inv_std[g];
                match kind {
                    NormKind::BatchEval => {
                        for &i in &idxs {
                            dx[i] = gout[i] * gd[c] * inv;
                        }
                    }
                    _ => {
                        let n = idxs.len() as f64;
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for &i in &idxs {
                            let dxh = gout[i] * gd[c];
                            m1 += dxh;
                            m2 += dxh * xhat[i];
                        }
                        m1 /= n;
                        m2 /= n;
                        for &i in &idxs {
                            let dxh = gout[i] * gd[c];
                            dx[i] = inv * (dxh - m1 - xhat[i] * m2);
                        }
                    }
                }
            }
            self.accumulate(x, &dx);
        }
    }
}

/// Exponential running mean/variance for batch norm inference.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub momentum: f64,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum: 0.1,
        }
    }

    fn update(&mut self, mus: &[f64], vars: &[f64]) {
        for (r, &m) in self.mean.iter_mut().zip(mus) {
            *r = (1.0 - self.momentum) * *r + self.momentum * m;
        }
        for (r, &v) in self.var.iter_mut().zip(vars) {
            *r = (1.0 - self.momentum) * *r + self.momentum * v;
        }
    }
}

fn channel_stats(data: &[f64], xs: Shape) -> (Vec<f64>, Vec<f64>) {
    let hw = xs.h * xs.w;
    let n = (xs.b * hw) as f64;
    let mut mus = vec![0.0; xs.c];
    let mut vars = vec![0.0; xs.c];
    for c in 0..xs.c {
        let mut s = 0.0;
        for b in 0..xs.b {
            for i in 0..hw {
                s += data[xs.idx(b, c, i / xs.w, i % xs.w)];
            }
        }
        let mu = s / n;
        let mut v = 0.0;
        for b in 0..xs.b {
            for i in 0..hw {
                let d = data[xs.idx(b, c, i / xs.w, i % xs.w)] - mu;
                v += d * d;
            }
        }
        mus[c] = mu;
        vars[c] = v / n;
    }
    (mus, vars)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{central_diff, max_rel_error, FD_STEP, GRAD_TOL};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..shape.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv_identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(Shape::new(1, 1, 6, 7), &mut rng);
        let mut w = Tensor::zeros(Shape::new(1, 1, 3, 3));
        w.data_mut()[4] = 1.0; // center tap
        let bias = Tensor::zeros(Shape::new(1, 1, 1, 1));

        let mut tape = Tape::new();
        let xn = tape.leaf(&x, false);
        let wn = tape.leaf(&w, false);
        let bn = tape.leaf(&bias, false);
        let y = tape.conv2d(xn, wn, bn, 1).unwrap();
        assert_eq!(tape.value(y), x.data());
    }

    #[test]
    fn conv_all_ones_kernel_sums_constant_interior() {
        let c = 0.5;
        let x = Tensor::filled(Shape::new(1, 1, 5, 5), c);
        let w = Tensor::filled(Shape::new(1, 1, 3, 3), 1.0);
        let bias = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let mut tape = Tape::new();
        let xn = tape.leaf(&x, false);
        let wn = tape.leaf(&w, false);
        let bn = tape.leaf(&bias, false);
        let y = tape.conv2d(xn, wn, bn, 1).unwrap();
        let s = tape.shape(y);
        for iy in 1..4 {
            for ix in 1..4 {
                assert!((tape.value(y)[s.idx(0, 0, iy, ix)] - 9.0 * c).abs() < 1e-12);
            }
        }
        // corner sees a 2x2 patch
        assert!((tape.value(y)[s.idx(0, 0, 0, 0)] - 4.0 * c).abs() < 1e-12);
    }

    #[test]
    fn conv_stride2_halves_spatial_dims_ceil() {
        let x = Tensor::zeros(Shape::new(2, 3, 5, 8));
        let w = Tensor::zeros(Shape::new(4, 3, 3, 3));
        let bias = Tensor::zeros(Shape::new(1, 4, 1, 1));
        let mut tape = Tape::new();
        let xn = tape.leaf(&x, false);
        let wn = tape.leaf(&w, false);
        let bn = tape.leaf(&bias, false);
        let y = tape.conv2d(xn, wn, bn, 2).unwrap();
        assert_eq!(tape.shape(y), Shape::new(2, 4, 3, 4));
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(Shape::new(1, 2, 4, 4));
        let w = Tensor::zeros(Shape::new(1, 3, 3, 3));
        let bias = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let mut tape = Tape::new();
        let xn = tape.leaf(&x, false);
        let wn = tape.leaf(&w, false);
        let bn = tape.leaf(&bias, false);
        assert!(matches!(tape.conv2d(xn, wn, bn, 1), Err(Error::Shape(_))));
    }

    /// Scalar loss used by all gradient checks: mean of squared conv output
    /// keeps values well-scaled.
    fn conv_loss(xv: &[f64], wv: &[f64], bv: &[f64], stride: usize) -> f64 {
        let x = Tensor::from_vec(Shape::new(2, 3, 5, 5), xv.to_vec()).unwrap();
        let w = Tensor::from_vec(Shape::new(2, 3, 3, 3), wv.to_vec()).unwrap();
        let b = Tensor::from_vec(Shape::new(1, 2, 1, 1), bv.to_vec()).unwrap();
        let mut tape = Tape::new();
        let xn = tape.leaf(&x, false);
        let wn = tape.leaf(&w, false);
        let bn = tape.leaf(&b, false);
        let y = tape.conv2d(xn, wn, bn, stride).unwrap();
        let sq = tape.square(y);
        let m = tape.mean(sq);
        tape.scalar_value(m)
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for stride in [1usize, 2] {
            let x = rand_tensor(Shape::new(2, 3, 5, 5), &mut rng);
            let w = rand_tensor(Shape::new(2, 3, 3, 3), &mut rng);
            let b = rand_tensor(Shape::new(1, 2, 1, 1), &mut rng);

            let mut tape = Tape::new();
            let xn = tape.leaf(&x, true);
            let wn = tape.leaf(&w, true);
            let bn = tape.leaf(&b, true);
            let y = tape.conv2d(xn, wn, bn, stride).unwrap();
            let sq = tape.square(y);
            let m = tape.mean(sq);
            tape.backward(m).unwrap();

            let fd_x = central_diff(
                |v| conv_loss(v, w.data(), b.data(), stride),
                x.data(),
                FD_STEP,
            );
            let fd_w = central_diff(
                |v| conv_loss(x.data(), v, b.data(), stride),
                w.data(),
                FD_STEP,
            );
            let fd_b = central_diff(
                |v| conv_loss(x.data(), w.data(), v, stride),
                b.data(),
                FD_STEP,
            );
            assert!(max_rel_error(tape.grad(xn).unwrap(), &fd_x) < GRAD_TOL);
            assert!(max_rel_error(tape.grad(wn).unwrap(), &fd_w) < GRAD_TOL);
            assert!(max_rel_error(tape.grad(bn).unwrap(), &fd_b) < GRAD_TOL);
        }
    }

    #[test]
    fn bilinear_same_size_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(Shape::new(1, 2, 4, 5), &mut rng);
        let mut tape = Tape::new();
        let xn = tape.leaf(&x, false);
        let y = tape.bilinear_resize(xn, 4, 5).unwrap();
        assert_eq!(tape.value(y), x.data());
    }

    #[test]
    fn bilinear_midpoint_of_2x2_grid() {
        let x = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0, 2.0, 2.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let xn = tape.leaf(&x, false);
        let y = tape.bilinear_resize(xn, 3, 3).unwrap();
        let s = tape.shape(y);
        assert!((tape.value(y)[s.idx(0, 0, 1, 1)] - 2.0).abs() < 1e-12);
        // corners preserved under corner alignment
        assert_eq!(tape.value(y)[s.idx(0, 0, 0, 0)], 0.0);
        assert_eq!(tape.value(y)[s.idx(0, 0, 2, 2)], 4.0);
    }

    #[test]
    fn bilinear_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(Shape::new(2, 2, 3, 4), &mut rng);
        let loss = |v: &[f64]| {
            let t = Tensor::from_vec(Shape::new(2, 2, 3, 4), v.to_vec()).unwrap();
            let mut tape = Tape::new();
            let xn = tape.leaf(&t, false);
            let y = tape.bilinear_resize(xn, 5, 7).unwrap();
            let sq = tape.square(y);
            let m = tape.mean(sq);
            tape.scalar_value(m)
        };
        let mut tape = Tape::new();
        let xn = tape.leaf(&x, true);
        let y = tape.bilinear_resize(xn, 5, 7).unwrap();
        let sq = tape.square(y);
        let m = tape.mean(sq);
        tape.backward(m).unwrap();
        let fd = central_diff(loss, x.data(), FD_STEP);
        assert!(max_rel_error(tape.grad(xn).unwrap(), &fd) < GRAD_TOL);
    }

    #[test]
    fn leaky_relu_slope_on_negatives() {
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let xn = tape.leaf(&x, false);
        let y = tape.leaky_relu(xn, 0.3);
        assert_eq!(tape.value(y), &[-0.3, 0.0, 2.0]);
    }

    #[test]
    fn relu_gradient_matches_finite_differences_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // avoid |x| < 1e-3 so the FD probe does not straddle the kink
        let data: Vec<f64> = (0..24)
            .map(|_| {
                let v: f64 = rng.gen_range(1e-3..1.0);
                if rng.gen_bool(0.5) {
                    v
                } else {
                    -v
                }
            })
            .collect();
        let x = Tensor::from_vec(Shape::new(1, 2, 3, 4), data).unwrap();
        let loss = |v: &[f64]| {
            let t = Tensor::from_vec(Shape::new(1, 2, 3, 4), v.to_vec()).unwrap();
            let mut tape = Tape::new();
            let xn = tape.leaf(&t, false);
            let y = tape.relu(xn);
            let sq = tape.square(y);
            let m = tape.mean(sq);
            tape.scalar_value(m)
        };
        let mut tape = Tape::new();
        let xn = tape.leaf(&x, true);
        let y = tape.relu(xn);
        let sq = tape.square(y);
        let m = tape.mean(sq);
        tape.backward(m).unwrap();
        let fd = central_diff(loss, x.data(), FD_STEP);
        assert!(max_rel_error(tape.grad(xn).unwrap(), &fd) < GRAD_TOL);
    }

    #[test]
    fn instance_norm_standardizes_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(Shape::new(2, 3, 4, 4), &mut rng);
        let gamma = Tensor::filled(Shape::new(1, 3, 1, 1), 1.0);
        let beta = Tensor::zeros(Shape::new(1, 3, 1, 1));
        let mut tape = Tape::new();
        let xn = tape.leaf(&x, false);
        let gn = tape.leaf(&gamma, false);
        let bn = tape.leaf(&beta, false);
        let y = tape.instance_norm(xn, gn, bn).unwrap();
        let s = tape.shape(y);
        for b in 0..2 {
            for c in 0..3 {
                let vals: Vec<f64> = (0..16)
                    .map(|i| tape.value(y)[s.idx(b, c, i / 4, i % 4)])
                    .collect();
                let mu = vals.iter().sum::<f64>() / 16.0;
                let var = vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / 16.0;
                assert!(mu.abs() < 1e-7, "mean {mu}");
                assert!((var - 1.0).abs() < 1e-3, "var {var}"); // eps shifts variance slightly
            }
        }
    }

    #[test]
    fn instance_norm_constant_channel_outputs_beta() {
        let x = Tensor::filled(Shape::new(1, 2, 3, 3), 7.0);
        let gamma = Tensor::filled(Shape::new(1, 2, 1, 1), 2.0);
        let beta = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![0.5, -0.25]).unwrap();
        let mut tape = Tape::new();
        let xn = tape.leaf(&x, false);
        let gn = tape.leaf(&gamma, false);
        let bn = tape.leaf(&beta, false);
        let y = tape.instance_norm(xn, gn, bn).unwrap();
        let s = tape.shape(y);
        for i in 0..9 {
            assert_eq!(tape.value(y)[s.idx(0, 0, i / 3, i % 3)], 0.5);
            assert_eq!(tape.value(y)[s.idx(0, 1, i / 3, i % 3)], -0.25);
        }
    }

    #[test]
    fn instance_norm_rejects_single_pixel() {
        let x = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let gamma = Tensor::filled(Shape::new(1, 1, 1, 1), 1.0);
        let beta = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let mut tape = Tape::new();
        let xn = tape.leaf(&x, false);
        let gn = tape.leaf(&gamma, false);
        let bn = tape.leaf(&beta, false);
        assert!(tape.instance_norm(xn, gn, bn).is_err());
    }

    fn norm_loss(xv: &[f64], gv: &[f64], bv: &[f64], instance: bool) -> f64 {
        let x = Tensor::from_vec(Shape::new(2, 2, 3, 3), xv.to_vec()).unwrap();
        let g = Tensor::from_vec(Shape::new(1, 2, 1, 1), gv.to_vec()).unwrap();
        let b = Tensor::from_vec(Shape::new(1, 2, 1, 1), bv.to_vec()).unwrap();
        let mut tape = Tape::new();
        let xn = tape.leaf(&x, false);
        let gn = tape.leaf(&g, false);
        let bn = tape.leaf(&b, false);
        let y = if instance {
            tape.instance_norm(xn, gn, bn).unwrap()
        } else {
            tape.batch_norm(xn, gn, bn, true, None).unwrap()
        };
        let sq = tape.square(y);
        let m = tape.mean(sq);
        tape.scalar_value(m)
    }

    #[test]
    fn norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for instance in [true, false] {
            let x = rand_tensor(Shape::new(2, 2, 3, 3), &mut rng);
            let g = rand_tensor(Shape::new(1, 2, 1, 1), &mut rng);
            let b = rand_tensor(Shape::new(1, 2, 1, 1), &mut rng);
            let mut tape = Tape::new();
            let xn = tape.leaf(&x, true);
            let gn = tape.leaf(&g, true);
            let bn = tape.leaf(&b, true);
            let y = if instance {
                tape.instance_norm(xn, gn, bn).unwrap()
            } else {
                tape.batch_norm(xn, gn, bn, true, None).unwrap()
            };
            let sq = tape.square(y);
            let m = tape.mean(sq);
            tape.backward(m).unwrap();

            let fd_x = central_diff(|v| norm_loss(v, g.data(), b.data(), instance), x.data(), FD_STEP);
            let fd_g = central_diff(|v| norm_loss(x.data(), v, b.data(), instance), g.data(), FD_STEP);
            let fd_b = central_diff(|v| norm_loss(x.data(), g.data(), v, instance), b.data(), FD_STEP);
            assert!(max_rel_error(tape.grad(xn).unwrap(), &fd_x) < GRAD_TOL, "x ({instance})");
            assert!(max_rel_error(tape.grad(gn).unwrap(), &fd_g) < GRAD_TOL, "gamma");
            assert!(max_rel_error(tape.grad(bn).unwrap(), &fd_b) < GRAD_TOL, "beta");
        }
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut rs = RunningStats::new(1);
        rs.mean = vec![2.0];
        rs.var = vec![4.0];
        let x = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![2.0, 6.0]).unwrap();
        let gamma = Tensor::filled(Shape::new(1, 1, 1, 1), 1.0);
        let beta = Tensor::zeros(Shape::new(1, 1, 1, 1));
        let mut tape = Tape::new();
        let xn = tape.leaf(&x, false);
        let gn = tape.leaf(&gamma, false);
        let bn = tape.leaf(&beta, false);
        let y = tape.batch_norm(xn, gn, bn, false, Some(&mut rs)).unwrap();
        // (2-2)/2 = 0, (6-2)/2 = 2 (up to eps)
        assert!(tape.value(y)[0].abs() < 1e-6);
        assert!((tape.value(y)[1] - 2.0).abs() < 1e-4);
    }

    #[test]
    fn mean_of_abs_of_zero_tensor_is_zero() {
        let x = Tensor::zeros(Shape::new(2, 1, 3, 3));
        let mut tape = Tape::new();
        let xn = tape.leaf(&x, false);
        let a = tape.abs(xn);
        let m = tape.mean(a);
        assert_eq!(tape.scalar_value(m), 0.0);
    }

    #[test]
    fn square_then_mean_of_constant_is_its_square() {
        let c = -1.7;
        let x = Tensor::filled(Shape::new(1, 2, 2, 2), c);
        let mut tape = Tape::new();
        let xn = tape.leaf(&x, false);
        let sq = tape.square(xn);
        let m = tape.mean(sq);
        assert!((tape.scalar_value(m) - c * c).abs() < 1e-12);
    }

    #[test]
    fn elementwise_ops_reject_shape_mismatch() {
        let a = Tensor::zeros(Shape::new(1, 1, 2, 2));
        let b = Tensor::zeros(Shape::new(1, 1, 2, 3));
        let mut tape = Tape::new();
        let an = tape.leaf(&a, false);
        let bn = tape.leaf(&b, false);
        assert!(matches!(tape.add(an, bn), Err(Error::Shape(_))));
        assert!(matches!(tape.mul(an, bn), Err(Error::Shape(_))));
    }

    #[test]
    fn composite_expression_gradient_matches_finite_differences() {
        // f = mean(abs(a*b + 0.5*a^2 - b)) exercised through a chain of ops
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let shape = Shape::new(1, 2, 3, 2);
        let a = rand_tensor(shape, &mut rng);
        let b = rand_tensor(shape, &mut rng);

        let eval = |av: &[f64], bv: &[f64]| {
            let at = Tensor::from_vec(shape, av.to_vec()).unwrap();
            let bt = Tensor::from_vec(shape, bv.to_vec()).unwrap();
            let mut tape = Tape::new();
            let an = tape.leaf(&at, false);
            let bn = tape.leaf(&bt, false);
            let prod = tape.mul(an, bn).unwrap();
            let asq = tape.square(an);
            let half = tape.scale(asq, 0.5);
            let sum = tape.add(prod, half).unwrap();
            let diff = tape.sub(sum, bn).unwrap();
            let ab = tape.abs(diff);
            let m = tape.mean(ab);
            tape.scalar_value(m)
        };

        let mut tape = Tape::new();
        let an = tape.leaf(&a, true);
        let bn = tape.leaf(&b, true);
        let prod = tape.mul(an, bn).unwrap();
        let asq = tape.square(an);
        let half = tape.scale(asq, 0.5);
        let sum = tape.add(prod, half).unwrap();
        let diff = tape.sub(sum, bn).unwrap();
        let ab = tape.abs(diff);
        let m = tape.mean(ab);
        tape.backward(m).unwrap();

        let fd_a = central_diff(|v| eval(v, b.data()), a.data(), FD_STEP);
        let fd_b = central_diff(|v| eval(a.data(), v), b.data(), FD_STEP);
        assert!(max_rel_error(tape.grad(an).unwrap(), &fd_a) < GRAD_TOL);
        assert!(max_rel_error(tape.grad(bn).unwrap(), &fd_b) < GRAD_TOL);
    }

    #[test]
    fn mean_per_sample_reduces_to_batch_column() {
        let x = Tensor::from_vec(
            Shape::new(2, 1, 1, 3),
            vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0],
        )
        .unwrap();
        let mut tape = Tape::new();
        let xn = tape.leaf(&x, false);
        let y = tape.mean_per_sample(xn);
        assert_eq!(tape.shape(y), Shape::new(2, 1, 1, 1));
        assert_eq!(tape.value(y), &[2.0, 20.0]);
    }

    #[test]
    fn gradients_accumulate_across_shared_subexpressions() {
        // f = mean(x + x) => df/dx = 2/n
        let x = Tensor::filled(Shape::new(1, 1, 2, 2), 3.0);
        let mut tape = Tape::new();
        let xn = tape.leaf(&x, true);
        let s = tape.add(xn, xn).unwrap();
        let m = tape.mean(s);
        tape.backward(m).unwrap();
        for g in tape.grad(xn).unwrap() {
            assert!((g - 0.5).abs() < 1e-12);
        }
    }
}
