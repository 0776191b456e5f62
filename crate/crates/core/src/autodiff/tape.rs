//! The recording tape: every operation computes its result immediately
//! and pushes a record; `backward` walks the records in reverse to
//! accumulate gradients. Node ids are append-only indices, so parents
//! always precede children.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::{Real, Shape, SparseMatrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(pub(crate) usize);

enum Op<F: Real> {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Div(VarId, VarId),
    Scale(VarId, f64),
    AddScalar(VarId),
    Relu(VarId),
    SqrtEps(VarId),
    PointwiseLinear {
        x: VarId,
        w: VarId,
    },
    DepthwiseConvT {
        x: VarId,
        w: VarId,
    },
    DepthwiseConvN {
        x: VarId,
        w: VarId,
    },
    BatchNormTrain {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        xhat: Vec<F>,
        inv_std: Vec<F>,
    },
    SoftmaxC(VarId),
    Reduce {
        x: VarId,
        axes: [bool; 4],
        mean: bool,
    },
    SparsePropagate {
        x: VarId,
        bwd: Arc<SparseMatrix<F>>,
    },
    ConcatC(Vec<VarId>),
    SelectC {
        x: VarId,
        c0: usize,
        c1: usize,
    },
    CircShiftT {
        x: VarId,
        shift: i64,
    },
    DiffT(VarId),
    SecondDiffT(VarId),
    PoolNodes {
        x: VarId,
        assignment: Arc<Vec<u32>>,
        sizes: Arc<Vec<usize>>,
    },
    BandpassT {
        x: VarId,
        mask: Arc<Vec<bool>>,
    },
}

struct Node<F: Real> {
    shape: Shape,
    value: Vec<F>,
    op: Op<F>,
    requires: bool,
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

/// Per-node gradients produced by `backward`.
pub struct Gradients<F: Real> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn wrt(&self, id: VarId) -> Option<&[F]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Shape, value: Vec<F>, op: Op<F>, requires: bool) -> VarId {
        debug_assert_eq!(shape.len(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires,
        });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, shape: Shape, data: Vec<F>) -> Result<VarId> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "constant data length {} != shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    pub fn constant_scalar(&mut self, v: f64) -> VarId {
        self.push(Shape::scalar(), vec![F::cast(v)], Op::Leaf, false)
    }

    /// A differentiable leaf (model parameter or probed input).
    pub fn param(&mut self, shape: Shape, data: Vec<F>) -> Result<VarId> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "param data length {} != shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(self.push(shape, data, Op::Leaf, true))
    }

    pub fn value(&self, id: VarId) -> &[F] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: VarId) -> Shape {
        self.nodes[id.0].shape
    }

    pub fn scalar_value(&self, id: VarId) -> Result<f64> {
        let v = self.value(id);
        if v.len() != 1 {
            return Err(Error::Shape("expected a scalar node".into()));
        }
        Ok(v[0].as_f64())
    }

    fn binary(&mut self, a: VarId, b: VarId, kind: u8) -> Result<VarId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = sa.broadcast(&sb).ok_or_else(|| {
            Error::Shape(format!("cannot broadcast {sa:?} with {sb:?}"))
        })?;
        let apply = |x: F, y: F| match kind {
            0 => x + y,
            1 => x - y,
            2 => x * y,
            _ => x / y,
        };
        let value = if sa == sb {
            self.value(a)
                .iter()
                .zip(self.value(b))
                .map(|(&x, &y)| apply(x, y))
                .collect()
        } else {
            let mut v = Vec::with_capacity(out.len());
            let (va, vb) = (self.value(a), self.value(b));
            for bb in 0..out.b {
                for cc in 0..out.c {
                    for tt in 0..out.t {
                        for nn in 0..out.n {
                            let ia = map_idx(&sa, bb, cc, tt, nn);
                            let ib = map_idx(&sb, bb, cc, tt, nn);
                            v.push(apply(va[ia], vb[ib]));
                        }
                    }
                }
            }
            v
        };
        let requires = self.needs(&[a, b]);
        let op = match kind {
            0 => Op::Add(a, b),
            1 => Op::Sub(a, b),
            2 => Op::Mul(a, b),
            _ => Op::Div(a, b),
        };
        Ok(self.push(out, value, op, requires))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(a, b, 0)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(a, b, 1)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(a, b, 2)
    }

    pub fn div(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary(a, b, 3)
    }

    pub fn scale(&mut self, x: VarId, k: f64) -> VarId {
        let kf = F::cast(k);
        let value = self.value(x).iter().map(|&v| v * kf).collect();
        let requires = self.needs(&[x]);
        self.push(self.shape(x), value, Op::Scale(x, k), requires)
    }

    pub fn add_scalar(&mut self, x: VarId, k: f64) -> VarId {
        let kf = F::cast(k);
        let value = self.value(x).iter().map(|&v| v + kf).collect();
        let requires = self.needs(&[x]);
        self.push(self.shape(x), value, Op::AddScalar(x), requires)
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let value = self
            .value(x)
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        let requires = self.needs(&[x]);
        self.push(self.shape(x), value, Op::Relu(x), requires)
    }

    /// `sqrt(x + eps)`; the offset keeps the derivative finite at zero.
    pub fn sqrt_eps(&mut self, x: VarId, eps: f64) -> VarId {
        let e = F::cast(eps);
        let value = self.value(x).iter().map(|&v| (v + e).sqrt()).collect();
        let requires = self.needs(&[x]);
        self.push(self.shape(x), value, Op::SqrtEps(x), requires)
    }

    /// Channel-mixing linear map. Weights have shape `(1, c_out, c_in, 1)`;
    /// biases are added separately with a broadcast `add`.
    pub fn pointwise_linear(&mut self, x: VarId, w: VarId) -> Result<VarId> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sw.b != 1 || sw.n != 1 || sw.t != sx.c {
            return Err(Error::Shape(format!(
                "pointwise weights {sw:?} incompatible with input {sx:?}"
            )));
        }
        let (cin, cout) = (sx.c, sw.c);
        let inner = sx.t * sx.n;
        let out = Shape::new(sx.b, cout, sx.t, sx.n);
        let mut value = vec![F::zero(); out.len()];
        let (vx, vw) = (self.value(x), self.value(w));
        for b in 0..sx.b {
            for co in 0..cout {
                let yoff = (b * cout + co) * inner;
                for ci in 0..cin {
                    let wv = vw[co * cin + ci];
                    if wv != F::zero() {
                        let xoff = (b * cin + ci) * inner;
                        for i in 0..inner {
                            value[yoff + i] = value[yoff + i] + wv * vx[xoff + i];
                        }
                    }
                }
            }
        }
        let requires = self.needs(&[x, w]);
        Ok(self.push(out, value, Op::PointwiseLinear { x, w }, requires))
    }

    fn depthwise_conv(&mut self, x: VarId, w: VarId, along_t: bool) -> Result<VarId> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let k = sw.t;
        if sw.b != 1 || sw.n != 1 || sw.c != sx.c || k % 2 == 0 {
            return Err(Error::Shape(format!(
                "depthwise kernel {sw:?} incompatible with input {sx:?} (odd kernel required)"
            )));
        }
        let value = depthwise_forward(self.value(x), &sx, self.value(w), k, along_t);
        let requires = self.needs(&[x, w]);
        let op = if along_t {
            Op::DepthwiseConvT { x, w }
        } else {
            Op::DepthwiseConvN { x, w }
        };
        Ok(self.push(sx, value, op, requires))
    }

    /// Per-channel temporal convolution, zero padded to the same length.
    /// Kernel shape `(1, c, k, 1)` with odd `k`; no bias.
    pub fn depthwise_conv_t(&mut self, x: VarId, w: VarId) -> Result<VarId> {
        self.depthwise_conv(x, w, true)
    }

    /// Per-channel convolution along the node axis (same conventions).
    pub fn depthwise_conv_n(&mut self, x: VarId, w: VarId) -> Result<VarId> {
        self.depthwise_conv(x, w, false)
    }

    /// Batch normalization in training mode: statistics over `(b, t, n)`
    /// per channel, biased variance. Returns the output node plus the
    /// batch mean and variance so callers can maintain running statistics.
    pub fn batchnorm_train(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f64,
    ) -> Result<(VarId, Vec<F>, Vec<F>)> {
        let sx = self.shape(x);
        let (sg, sb) = (self.shape(gamma), self.shape(beta));
        let want = Shape::new(1, sx.c, 1, 1);
        if sg != want || sb != want {
            return Err(Error::Shape(format!(
                "batchnorm scale/shift must be {want:?}, got {sg:?}/{sb:?}"
            )));
        }
        let m = (sx.b * sx.t * sx.n) as f64;
        if m < 1.0 {
            return Err(Error::Shape("batchnorm over empty reduction".into()));
        }
        let vx = self.value(x);
        let inner = sx.t * sx.n;
        let mut mean = vec![F::zero(); sx.c];
        let mut var = vec![F::zero(); sx.c];
        for c in 0..sx.c {
            let mut acc = F::zero();
            for b in 0..sx.b {
                let off = (b * sx.c + c) * inner;
                for i in 0..inner {
                    acc = acc + vx[off + i];
                }
            }
            mean[c] = acc / F::cast(m);
        }
        for c in 0..sx.c {
            let mut acc = F::zero();
            for b in 0..sx.b {
                let off = (b * sx.c + c) * inner;
                for i in 0..inner {
                    let d = vx[off + i] - mean[c];
                    acc = acc + d * d;
                }
            }
            var[c] = acc / F::cast(m);
        }
        let inv_std: Vec<F> = var
            .iter()
            .map(|&v| F::one() / (v + F::cast(eps)).sqrt())
            .collect();
        let mut xhat = vec![F::zero(); vx.len()];
        let mut value = vec![F::zero(); vx.len()];
        let (vg, vb) = (self.value(gamma), self.value(beta));
        for b in 0..sx.b {
            for c in 0..sx.c {
                let off = (b * sx.c + c) * inner;
                for i in 0..inner {
                    let h = (vx[off + i] - mean[c]) * inv_std[c];
                    xhat[off + i] = h;
                    value[off + i] = vg[c] * h + vb[c];
                }
            }
        }
        let requires = self.needs(&[x, gamma, beta]);
        let id = self.push(
            sx,
            value,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            requires,
        );
        Ok((id, mean, var))
    }

    /// Batch normalization in inference mode: a pure affine map using the
    /// provided running statistics (expressed with basic tape ops).
    pub fn batchnorm_eval(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        running_mean: &[F],
        running_var: &[F],
        eps: f64,
    ) -> Result<VarId> {
        let c = self.shape(x).c;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::Shape("running statistics length mismatch".into()));
        }
        let shape = Shape::new(1, c, 1, 1);
        let mean = self.constant(shape, running_mean.to_vec())?;
        let inv: Vec<F> = running_var
            .iter()
            .map(|&v| F::one() / (v + F::cast(eps)).sqrt())
            .collect();
        let inv = self.constant(shape, inv)?;
        let centered = self.sub(x, mean)?;
        let scaled = self.mul(centered, inv)?;
        let with_gamma = self.mul(scaled, gamma)?;
        self.add(with_gamma, beta)
    }

    /// Softmax over the channel axis, per `(b, t, n)` location.
    pub fn softmax_c(&mut self, x: VarId) -> VarId {
        let s = self.shape(x);
        let vx = self.value(x);
        let mut value = vec![F::zero(); vx.len()];
        for b in 0..s.b {
            for t in 0..s.t {
                for n in 0..s.n {
                    let mut mx = F::neg_infinity();
                    for c in 0..s.c {
                        mx = mx.max(vx[s.idx(b, c, t, n)]);
                    }
                    let mut total = F::zero();
                    for c in 0..s.c {
                        let e = (vx[s.idx(b, c, t, n)] - mx).exp();
                        value[s.idx(b, c, t, n)] = e;
                        total = total + e;
                    }
                    for c in 0..s.c {
                        let i = s.idx(b, c, t, n);
                        value[i] = value[i] / total;
                    }
                }
            }
        }
        let requires = self.needs(&[x]);
        self.push(s, value, Op::SoftmaxC(x), requires)
    }

    fn reduce(&mut self, x: VarId, axes: [bool; 4], mean: bool) -> VarId {
        let s = self.shape(x);
        let out = Shape::new(
            if axes[0] { 1 } else { s.b },
            if axes[1] { 1 } else { s.c },
            if axes[2] { 1 } else { s.t },
            if axes[3] { 1 } else { s.n },
        );
        let count: usize = s
            .axes()
            .iter()
            .zip(axes)
            .map(|(&e, r)| if r { e } else { 1 })
            .product();
        let vx = self.value(x);
        let mut value = vec![F::zero(); out.len()];
        for b in 0..s.b {
            for c in 0..s.c {
                for t in 0..s.t {
                    for n in 0..s.n {
                        let o = map_idx(&out, b, c, t, n);
                        value[o] = value[o] + vx[s.idx(b, c, t, n)];
                    }
                }
            }
        }
        if mean {
            let inv = F::cast(1.0 / count as f64);
            for v in value.iter_mut() {
                *v = *v * inv;
            }
        }
        let requires = self.needs(&[x]);
        self.push(out, value, Op::Reduce { x, axes, mean }, requires)
    }

    pub fn reduce_sum(&mut self, x: VarId, axes: [bool; 4]) -> VarId {
        self.reduce(x, axes, false)
    }

    pub fn reduce_mean(&mut self, x: VarId, axes: [bool; 4]) -> VarId {
        self.reduce(x, axes, true)
    }

    /// Global average pool over time and nodes.
    pub fn gap(&mut self, x: VarId) -> VarId {
        self.reduce_mean(x, [false, false, true, true])
    }

    /// Multiplies along the node axis by a fixed sparse matrix; gradients
    /// flow through its transpose.
    pub fn sparse_propagate(&mut self, x: VarId, mat: &Arc<SparseMatrix<F>>) -> Result<VarId> {
        let s = self.shape(x);
        if mat.cols() != s.n {
            return Err(Error::Shape(format!(
                "matrix of {} columns applied to {} nodes",
                mat.cols(),
                s.n
            )));
        }
        let outer = s.b * s.c * s.t;
        let value = mat.apply_node_axis(self.value(x), outer);
        let out = Shape::new(s.b, s.c, s.t, mat.rows());
        let requires = self.needs(&[x]);
        let bwd = Arc::new(mat.transposed());
        Ok(self.push(out, value, Op::SparsePropagate { x, bwd }, requires))
    }

    pub fn concat_c(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of nothing".into()));
        }
        let s0 = self.shape(parts[0]);
        let mut c_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if (s.b, s.t, s.n) != (s0.b, s0.t, s0.n) {
                return Err(Error::Shape("concat shapes disagree".into()));
            }
            c_total += s.c;
        }
        let out = Shape::new(s0.b, c_total, s0.t, s0.n);
        let inner = s0.t * s0.n;
        let mut value = vec![F::zero(); out.len()];
        for b in 0..s0.b {
            let mut c_off = 0;
            for &p in parts {
                let sp = self.shape(p);
                let vp = self.value(p);
                for c in 0..sp.c {
                    let src = (b * sp.c + c) * inner;
                    let dst = (b * c_total + c_off + c) * inner;
                    value[dst..dst + inner].copy_from_slice(&vp[src..src + inner]);
                }
                c_off += sp.c;
            }
        }
        let requires = self.needs(parts);
        Ok(self.push(out, value, Op::ConcatC(parts.to_vec()), requires))
    }

    /// Channel slice `[c0, c1)`.
    pub fn select_c(&mut self, x: VarId, c0: usize, c1: usize) -> Result<VarId> {
        let s = self.shape(x);
        if c0 >= c1 || c1 > s.c {
            return Err(Error::Shape(format!(
                "channel slice {c0}..{c1} outside 0..{}",
                s.c
            )));
        }
        let out = Shape::new(s.b, c1 - c0, s.t, s.n);
        let inner = s.t * s.n;
        let vx = self.value(x);
        let mut value = vec![F::zero(); out.len()];
        for b in 0..s.b {
            for c in c0..c1 {
                let src = (b * s.c + c) * inner;
                let dst = (b * out.c + (c - c0)) * inner;
                value[dst..dst + inner].copy_from_slice(&vx[src..src + inner]);
            }
        }
        let requires = self.needs(&[x]);
        Ok(self.push(out, value, Op::SelectC { x, c0, c1 }, requires))
    }

    /// Circular shift along time; positive shifts delay the series.
    pub fn circ_shift_t(&mut self, x: VarId, shift: i64) -> VarId {
        let s = self.shape(x);
        let vx = self.value(x);
        let mut value = vec![F::zero(); vx.len()];
        let t_len = s.t as i64;
        for b in 0..s.b {
            for c in 0..s.c {
                for t in 0..s.t {
                    let src = (t as i64 - shift).rem_euclid(t_len) as usize;
                    for n in 0..s.n {
                        value[s.idx(b, c, t, n)] = vx[s.idx(b, c, src, n)];
                    }
                }
            }
        }
        let requires = self.needs(&[x]);
        self.push(s, value, Op::CircShiftT { x, shift }, requires)
    }

    /// First difference along time: output length `t - 1`.
    pub fn diff_t(&mut self, x: VarId) -> Result<VarId> {
        let s = self.shape(x);
        if s.t < 2 {
            return Err(Error::Shape("difference needs at least 2 steps".into()));
        }
        let out = Shape::new(s.b, s.c, s.t - 1, s.n);
        let vx = self.value(x);
        let mut value = vec![F::zero(); out.len()];
        for b in 0..s.b {
            for c in 0..s.c {
                for t in 0..out.t {
                    for n in 0..s.n {
                        value[out.idx(b, c, t, n)] =
                            vx[s.idx(b, c, t + 1, n)] - vx[s.idx(b, c, t, n)];
                    }
                }
            }
        }
        let requires = self.needs(&[x]);
        Ok(self.push(out, value, Op::DiffT(x), requires))
    }

    /// Second difference along time: output length `t - 2`.
    pub fn second_diff_t(&mut self, x: VarId) -> Result<VarId> {
        let s = self.shape(x);
        if s.t < 3 {
            return Err(Error::Shape("second difference needs at least 3 steps".into()));
        }
        let out = Shape::new(s.b, s.c, s.t - 2, s.n);
        let vx = self.value(x);
        let mut value = vec![F::zero(); out.len()];
        let two = F::cast(2.0);
        for b in 0..s.b {
            for c in 0..s.c {
                for t in 0..out.t {
                    for n in 0..s.n {
                        value[out.idx(b, c, t, n)] = vx[s.idx(b, c, t + 2, n)]
                            - two * vx[s.idx(b, c, t + 1, n)]
                            + vx[s.idx(b, c, t, n)];
                    }
                }
            }
        }
        let requires = self.needs(&[x]);
        Ok(self.push(out, value, Op::SecondDiffT(x), requires))
    }

    /// Pools the node axis into `k` clusters by unweighted means.
    pub fn pool_nodes(&mut self, x: VarId, assignment: &Arc<Vec<u32>>, k: usize) -> Result<VarId> {
        let s = self.shape(x);
        if assignment.len() != s.n {
            return Err(Error::Shape(format!(
                "assignment covers {} nodes, input has {}",
                assignment.len(),
                s.n
            )));
        }
        let mut sizes = vec![0usize; k];
        for &a in assignment.iter() {
            if a as usize >= k {
                return Err(Error::Shape("cluster index out of range".into()));
            }
            sizes[a as usize] += 1;
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::Shape("empty cluster in pooling assignment".into()));
        }
        let out = Shape::new(s.b, s.c, s.t, k);
        let vx = self.value(x);
        let mut value = vec![F::zero(); out.len()];
        let outer = s.b * s.c * s.t;
        for o in 0..outer {
            let xoff = o * s.n;
            let yoff = o * k;
            for (j, &a) in assignment.iter().enumerate() {
                let a = a as usize;
                value[yoff + a] = value[yoff + a] + vx[xoff + j] / F::cast(sizes[a] as f64);
            }
        }
        let requires = self.needs(&[x]);
        let sizes = Arc::new(sizes);
        Ok(self.push(
            out,
            value,
            Op::PoolNodes {
                x,
                assignment: assignment.clone(),
                sizes,
            },
            requires,
        ))
    }

    /// Hard spectral bandpass along time: FFT, zero every bin whose
    /// frequency falls outside `[lo_hz, hi_hz]`, inverse FFT. The mask is
    /// symmetric, so the operation is linear and self-adjoint.
    pub fn bandpass_t(&mut self, x: VarId, fs: f64, lo_hz: f64, hi_hz: f64) -> Result<VarId> {
        let s = self.shape(x);
        if s.t < 2 {
            return Err(Error::Shape("bandpass needs a time axis".into()));
        }
        if !(0.0 <= lo_hz && lo_hz < hi_hz) {
            return Err(Error::Config(format!("bad band [{lo_hz}, {hi_hz}]")));
        }
        let mask: Vec<bool> = (0..s.t)
            .map(|k| {
                let k_f = k.min(s.t - k) as f64;
                let f = k_f * fs / s.t as f64;
                (lo_hz..=hi_hz).contains(&f)
            })
            .collect();
        let mask = Arc::new(mask);
        let value = bandpass_apply(self.value(x), &s, &mask);
        let requires = self.needs(&[x]);
        Ok(self.push(s, value, Op::BandpassT { x, mask }, requires))
    }

    /// Reverse-mode sweep from a scalar root.
    pub fn backward(&mut self, root: VarId) -> Result<Gradients<F>> {
        if self.shape(root).len() != 1 {
            return Err(Error::Shape("backward root must be a scalar".into()));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![F::one()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires {
                grads[i] = None;
                continue;
            }
            let Some(gy) = std::mem::take(&mut grads[i]) else {
                continue;
            };
            self.accumulate_parents(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Vec<F>>], id: VarId, mut write: impl FnMut(&mut [F])) {
        if !self.nodes[id.0].requires {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| vec![F::zero(); self.shape(id).len()]);
        write(slot);
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate_parents(&self, i: usize, gy: &[F], grads: &mut [Option<Vec<F>>]) {
        let out_shape = self.nodes[i].shape;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (&p, sign) in [(*a, 1.0), (*b, 1.0)].iter().map(|(p, s)| (p, *s)) {
                    self.accum_broadcast(grads, p, &out_shape, gy, |g, _| {
                        g * F::cast(sign)
                    });
                }
            }
            Op::Sub(a, b) => {
                self.accum_broadcast(grads, *a, &out_shape, gy, |g, _| g);
                self.accum_broadcast(grads, *b, &out_shape, gy, |g, _| -g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                self.accum_broadcast(grads, *a, &out_shape, gy, |g, coord| {
                    g * vb[map_idx4(&sb, coord)]
                });
                self.accum_broadcast(grads, *b, &out_shape, gy, |g, coord| {
                    g * va[map_idx4(&sa, coord)]
                });
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                self.accum_broadcast(grads, *a, &out_shape, gy, |g, coord| {
                    g / vb[map_idx4(&sb, coord)]
                });
                self.accum_broadcast(grads, *b, &out_shape, gy, |g, coord| {
                    let bv = vb[map_idx4(&sb, coord)];
                    -g * va[map_idx4(&sa, coord)] / (bv * bv)
                });
            }
            Op::Scale(x, k) => {
                let kf = F::cast(*k);
                self.accum(grads, *x, |gx| {
                    for (g, &y) in gx.iter_mut().zip(gy) {
                        *g = *g + y * kf;
                    }
                });
            }
            Op::AddScalar(x) => {
                self.accum(grads, *x, |gx| {
                    for (g, &y) in gx.iter_mut().zip(gy) {
                        *g = *g + y;
                    }
                });
            }
            Op::Relu(x) => {
                let vx = self.value(*x);
                self.accum(grads, *x, |gx| {
                    for ((g, &y), &v) in gx.iter_mut().zip(gy).zip(vx) {
                        if v > F::zero() {
                            *g = *g + y;
                        }
                    }
                });
            }
            Op::SqrtEps(x) => {
                let vy = &self.nodes[i].value;
                let half = F::cast(0.5);
                self.accum(grads, *x, |gx| {
                    for ((g, &y), &s) in gx.iter_mut().zip(gy).zip(vy) {
                        *g = *g + y * half / s;
                    }
                });
            }
            Op::PointwiseLinear { x, w } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let (cin, cout) = (sx.c, sw.c);
                let inner = sx.t * sx.n;
                let vw = self.value(*w);
                let vx = self.value(*x);
                self.accum(grads, *x, |gx| {
                    for b in 0..sx.b {
                        for co in 0..cout {
                            let yoff = (b * cout + co) * inner;
                            for ci in 0..cin {
                                let wv = vw[co * cin + ci];
                                if wv != F::zero() {
                                    let xoff = (b * cin + ci) * inner;
                                    for k in 0..inner {
                                        gx[xoff + k] = gx[xoff + k] + wv * gy[yoff + k];
                                    }
                                }
                            }
                        }
                    }
                });
                self.accum(grads, *w, |gw| {
                    for b in 0..sx.b {
                        for co in 0..cout {
                            let yoff = (b * cout + co) * inner;
                            for ci in 0..cin {
                                let xoff = (b * cin + ci) * inner;
                                let mut acc = F::zero();
                                for k in 0..inner {
                                    acc = acc + gy[yoff + k] * vx[xoff + k];
                                }
                                gw[co * cin + ci] = gw[co * cin + ci] + acc;
                            }
                        }
                    }
                });
            }
            Op::DepthwiseConvT { x, w } | Op::DepthwiseConvN { x, w } => {
                let along_t = matches!(self.nodes[i].op, Op::DepthwiseConvT { .. });
                let sx = self.shape(*x);
                let k = self.shape(*w).t;
                let vw = self.value(*w);
                let vx = self.value(*x);
                self.accum(grads, *x, |gx| {
                    depthwise_backward_x(gx, gy, &sx, vw, k, along_t);
                });
                self.accum(grads, *w, |gw| {
                    depthwise_backward_w(gw, gy, &sx, vx, k, along_t);
                });
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let sx = self.shape(*x);
                let inner = sx.t * sx.n;
                let m = F::cast((sx.b * inner) as f64);
                let vg = self.value(*gamma);
                let mut sum_gy = vec![F::zero(); sx.c];
                let mut sum_gy_xhat = vec![F::zero(); sx.c];
                for b in 0..sx.b {
                    for c in 0..sx.c {
                        let off = (b * sx.c + c) * inner;
                        for k in 0..inner {
                            sum_gy[c] = sum_gy[c] + gy[off + k];
                            sum_gy_xhat[c] = sum_gy_xhat[c] + gy[off + k] * xhat[off + k];
                        }
                    }
                }
                self.accum(grads, *beta, |gb| {
                    for c in 0..sx.c {
                        gb[c] = gb[c] + sum_gy[c];
                    }
                });
                self.accum(grads, *gamma, |gg| {
                    for c in 0..sx.c {
                        gg[c] = gg[c] + sum_gy_xhat[c];
                    }
                });
                self.accum(grads, *x, |gx| {
                    for b in 0..sx.b {
                        for c in 0..sx.c {
                            let off = (b * sx.c + c) * inner;
                            let coef = vg[c] * inv_std[c];
                            for k in 0..inner {
                                let term = gy[off + k] - sum_gy[c] / m
                                    - xhat[off + k] * sum_gy_xhat[c] / m;
                                gx[off + k] = gx[off + k] + coef * term;
                            }
                        }
                    }
                });
            }
            Op::SoftmaxC(x) => {
                let s = out_shape;
                let vy = &self.nodes[i].value;
                self.accum(grads, *x, |gx| {
                    for b in 0..s.b {
                        for t in 0..s.t {
                            for n in 0..s.n {
                                let mut dot = F::zero();
                                for c in 0..s.c {
                                    let idx = s.idx(b, c, t, n);
                                    dot = dot + gy[idx] * vy[idx];
                                }
                                for c in 0..s.c {
                                    let idx = s.idx(b, c, t, n);
                                    gx[idx] = gx[idx] + vy[idx] * (gy[idx] - dot);
                                }
                            }
                        }
                    }
                });
            }
            Op::Reduce { x, axes, mean } => {
                let sx = self.shape(*x);
                let count: usize = sx
                    .axes()
                    .iter()
                    .zip(*axes)
                    .map(|(&e, r)| if r { e } else { 1 })
                    .product();
                let scale = if *mean {
                    F::cast(1.0 / count as f64)
                } else {
                    F::one()
                };
                self.accum(grads, *x, |gx| {
                    for b in 0..sx.b {
                        for c in 0..sx.c {
                            for t in 0..sx.t {
                                for n in 0..sx.n {
                                    let o = map_idx(&out_shape, b, c, t, n);
                                    let xi = sx.idx(b, c, t, n);
                                    gx[xi] = gx[xi] + gy[o] * scale;
                                }
                            }
                        }
                    }
                });
            }
            Op::SparsePropagate { x, bwd } => {
                let sx = self.shape(*x);
                let outer = sx.b * sx.c * sx.t;
                let gx_add = bwd.apply_node_axis(gy, outer);
                self.accum(grads, *x, |gx| {
                    for (g, &a) in gx.iter_mut().zip(&gx_add) {
                        *g = *g + a;
                    }
                });
            }
            Op::ConcatC(parts) => {
                let inner = out_shape.t * out_shape.n;
                let mut c_off = 0usize;
                for &p in parts {
                    let sp = self.shape(p);
                    self.accum(grads, p, |gp| {
                        for b in 0..sp.b {
                            for c in 0..sp.c {
                                let src = (b * out_shape.c + c_off + c) * inner;
                                let dst = (b * sp.c + c) * inner;
                                for k in 0..inner {
                                    gp[dst + k] = gp[dst + k] + gy[src + k];
                                }
                            }
                        }
                    });
                    c_off += sp.c;
                }
            }
            Op::SelectC { x, c0, c1 } => {
                let sx = self.shape(*x);
                let inner = sx.t * sx.n;
                let width = c1 - c0;
                self.accum(grads, *x, |gx| {
                    for b in 0..sx.b {
                        for c in 0..width {
                            let src = (b * width + c) * inner;
                            let dst = (b * sx.c + c0 + c) * inner;
                            for k in 0..inner {
                                gx[dst + k] = gx[dst + k] + gy[src + k];
                            }
                        }
                    }
                });
            }
            Op::CircShiftT { x, shift } => {
                let s = out_shape;
                let t_len = s.t as i64;
                self.accum(grads, *x, |gx| {
                    for b in 0..s.b {
                        for c in 0..s.c {
                            for t in 0..s.t {
                                let src = (t as i64 - shift).rem_euclid(t_len) as usize;
                                for n in 0..s.n {
                                    gx[s.idx(b, c, src, n)] =
                                        gx[s.idx(b, c, src, n)] + gy[s.idx(b, c, t, n)];
                                }
                            }
                        }
                    }
                });
            }
            Op::DiffT(x) => {
                let sx = self.shape(*x);
                self.accum(grads, *x, |gx| {
                    for b in 0..out_shape.b {
                        for c in 0..out_shape.c {
                            for t in 0..out_shape.t {
                                for n in 0..out_shape.n {
                                    let g = gy[out_shape.idx(b, c, t, n)];
                                    gx[sx.idx(b, c, t + 1, n)] = gx[sx.idx(b, c, t + 1, n)] + g;
                                    gx[sx.idx(b, c, t, n)] = gx[sx.idx(b, c, t, n)] - g;
                                }
                            }
                        }
                    }
                });
            }
            Op::SecondDiffT(x) => {
                let sx = self.shape(*x);
                let two = F::cast(2.0);
                self.accum(grads, *x, |gx| {
                    for b in 0..out_shape.b {
                        for c in 0..out_shape.c {
                            for t in 0..out_shape.t {
                                for n in 0..out_shape.n {
                                    let g = gy[out_shape.idx(b, c, t, n)];
                                    gx[sx.idx(b, c, t + 2, n)] = gx[sx.idx(b, c, t + 2, n)] + g;
                                    gx[sx.idx(b, c, t + 1, n)] =
                                        gx[sx.idx(b, c, t + 1, n)] - two * g;
                                    gx[sx.idx(b, c, t, n)] = gx[sx.idx(b, c, t, n)] + g;
                                }
                            }
                        }
                    }
                });
            }
            Op::PoolNodes {
                x,
                assignment,
                sizes,
            } => {
                let sx = self.shape(*x);
                let k = out_shape.n;
                let outer = sx.b * sx.c * sx.t;
                self.accum(grads, *x, |gx| {
                    for o in 0..outer {
                        let xoff = o * sx.n;
                        let yoff = o * k;
                        for (j, &a) in assignment.iter().enumerate() {
                            let a = a as usize;
                            gx[xoff + j] =
                                gx[xoff + j] + gy[yoff + a] / F::cast(sizes[a] as f64);
                        }
                    }
                });
            }
            Op::BandpassT { x, mask } => {
                let filtered = bandpass_apply(gy, &out_shape, mask);
                self.accum(grads, *x, |gx| {
                    for (g, &a) in gx.iter_mut().zip(&filtered) {
                        *g = *g + a;
                    }
                });
            }
        }
    }

    fn accum_broadcast(
        &self,
        grads: &mut [Option<Vec<F>>],
        parent: VarId,
        out_shape: &Shape,
        gy: &[F],
        f: impl Fn(F, [usize; 4]) -> F,
    ) {
        let sp = self.shape(parent);
        self.accum(grads, parent, |gp| {
            if sp == *out_shape {
                for (idx, g) in gp.iter_mut().enumerate() {
                    let coord = decompose(out_shape, idx);
                    *g = *g + f(gy[idx], coord);
                }
            } else {
                for b in 0..out_shape.b {
                    for c in 0..out_shape.c {
                        for t in 0..out_shape.t {
                            for n in 0..out_shape.n {
                                let coord = [b, c, t, n];
                                let g = gy[out_shape.idx(b, c, t, n)];
                                let pi = map_idx4(&sp, coord);
                                gp[pi] = gp[pi] + f(g, coord);
                            }
                        }
                    }
                }
            }
        });
    }
}

#[inline]
fn map_idx(s: &Shape, b: usize, c: usize, t: usize, n: usize) -> usize {
    s.idx(
        if s.b == 1 { 0 } else { b },
        if s.c == 1 { 0 } else { c },
        if s.t == 1 { 0 } else { t },
        if s.n == 1 { 0 } else { n },
    )
}

#[inline]
fn map_idx4(s: &Shape, coord: [usize; 4]) -> usize {
    map_idx(s, coord[0], coord[1], coord[2], coord[3])
}

#[inline]
fn decompose(s: &Shape, idx: usize) -> [usize; 4] {
    let n = idx % s.n;
    let rest = idx / s.n;
    let t = rest % s.t;
    let rest = rest / s.t;
    let c = rest % s.c;
    let b = rest / s.c;
    [b, c, t, n]
}

fn depthwise_forward<F: Real>(vx: &[F], sx: &Shape, vw: &[F], k: usize, along_t: bool) -> Vec<F> {
    let pad = (k - 1) / 2;
    let mut value = vec![F::zero(); vx.len()];
    let len = if along_t { sx.t } else { sx.n };
    for b in 0..sx.b {
        for c in 0..sx.c {
            for j in 0..k {
                let wv = vw[c * k + j];
                if wv == F::zero() {
                    continue;
                }
                let off = j as i64 - pad as i64;
                for p in 0..len {
                    let src = p as i64 + off;
                    if src < 0 || src >= len as i64 {
                        continue;
                    }
                    let src = src as usize;
                    if along_t {
                        for n in 0..sx.n {
                            let yi = sx.idx(b, c, p, n);
                            value[yi] = value[yi] + wv * vx[sx.idx(b, c, src, n)];
                        }
                    } else {
                        for t in 0..sx.t {
                            let yi = sx.idx(b, c, t, p);
                            value[yi] = value[yi] + wv * vx[sx.idx(b, c, t, src)];
                        }
                    }
                }
            }
        }
    }
    value
}

fn depthwise_backward_x<F: Real>(
    gx: &mut [F],
    gy: &[F],
    sx: &Shape,
    vw: &[F],
    k: usize,
    along_t: bool,
) {
    let pad = (k - 1) / 2;
    let len = if along_t { sx.t } else { sx.n };
    for b in 0..sx.b {
        for c in 0..sx.c {
            for j in 0..k {
                let wv = vw[c * k + j];
                if wv == F::zero() {
                    continue;
                }
                let off = j as i64 - pad as i64;
                for p in 0..len {
                    let src = p as i64 + off;
                    if src < 0 || src >= len as i64 {
                        continue;
                    }
                    let src = src as usize;
                    if along_t {
                        for n in 0..sx.n {
                            gx[sx.idx(b, c, src, n)] =
                                gx[sx.idx(b, c, src, n)] + wv * gy[sx.idx(b, c, p, n)];
                        }
                    } else {
                        for t in 0..sx.t {
                            gx[sx.idx(b, c, t, src)] =
                                gx[sx.idx(b, c, t, src)] + wv * gy[sx.idx(b, c, t, p)];
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward_w<F: Real>(
    gw: &mut [F],
    gy: &[F],
    sx: &Shape,
    vx: &[F],
    k: usize,
    along_t: bool,
) {
    let pad = (k - 1) / 2;
    let len = if along_t { sx.t } else { sx.n };
    for b in 0..sx.b {
        for c in 0..sx.c {
            for j in 0..k {
                let off = j as i64 - pad as i64;
                let mut acc = F::zero();
                for p in 0..len {
                    let src = p as i64 + off;
                    if src < 0 || src >= len as i64 {
                        continue;
                    }
                    let src = src as usize;
                    if along_t {
                        for n in 0..sx.n {
                            acc = acc + gy[sx.idx(b, c, p, n)] * vx[sx.idx(b, c, src, n)];
                        }
                    } else {
                        for t in 0..sx.t {
                            acc = acc + gy[sx.idx(b, c, t, p)] * vx[sx.idx(b, c, t, src)];
                        }
                    }
                }
                gw[c * k + j] = gw[c * k + j] + acc;
            }
        }
    }
}

fn bandpass_apply<F: Real>(v: &[F], s: &Shape, mask: &[bool]) -> Vec<F> {
    let mut out = vec![F::zero(); v.len()];
    let mut planner = FftPlanner::<F>::new();
    let fwd = planner.plan_fft_forward(s.t);
    let inv = planner.plan_fft_inverse(s.t);
    let norm = F::cast(1.0 / s.t as f64);
    let mut buf: Vec<Complex<F>> = vec![Complex::new(F::zero(), F::zero()); s.t];
    for b in 0..s.b {
        for c in 0..s.c {
            for n in 0..s.n {
                for t in 0..s.t {
                    buf[t] = Complex::new(v[s.idx(b, c, t, n)], F::zero());
                }
                fwd.process(&mut buf);
                for (t, keep) in mask.iter().enumerate() {
                    if !keep {
                        buf[t] = Complex::new(F::zero(), F::zero());
                    }
                }
                inv.process(&mut buf);
                for t in 0..s.t {
                    out[s.idx(b, c, t, n)] = buf[t].re * norm;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randv(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Values away from zero so relu kinks cannot sit under the probe.
    fn randv_pos(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(0.2..1.2)).collect()
    }

    #[test]
    fn broadcast_add_and_reduce_values() {
        let mut tape: Tape<f64> = Tape::new();
        let a = tape
            .param(Shape::new(1, 2, 1, 1), vec![1.0, 10.0])
            .unwrap();
        let b = tape
            .param(Shape::new(1, 1, 1, 3), vec![0.1, 0.2, 0.3])
            .unwrap();
        let y = tape.add(a, b).unwrap();
        assert_eq!(tape.shape(y), Shape::new(1, 2, 1, 3));
        assert_eq!(tape.value(y), &[1.1, 1.2, 1.3, 10.1, 10.2, 10.3]);
        let s = tape.reduce_sum(y, [false, true, false, true]);
        assert!((tape.value(s)[0] - 34.2).abs() < 1e-9);
    }

    #[test]
    fn scalar_chain_gradient_is_exact() {
        // y = sum((2x + 1)^2) has gradient 4(2x + 1).
        let mut tape: Tape<f64> = Tape::new();
        let x = tape
            .param(Shape::new(1, 1, 1, 3), vec![0.5, -1.0, 2.0])
            .unwrap();
        let two = tape.scale(x, 2.0);
        let shifted = tape.add_scalar(two, 1.0);
        let sq = tape.mul(shifted, shifted).unwrap();
        let y = tape.reduce_sum(sq, [true, true, true, true]);
        let g = tape.backward(y).unwrap();
        let gx = g.wrt(x).unwrap();
        for (i, &xv) in [0.5, -1.0, 2.0].iter().enumerate() {
            assert!((gx[i] - 4.0 * (2.0 * xv + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn gradcheck_binary_and_unary_ops() {
        let shapes = [Shape::new(2, 3, 4, 5), Shape::new(1, 3, 1, 5)];
        let report = grad_check(
            |tape, ids| {
                let sum = tape.add(ids[0], ids[1]).unwrap();
                let prod = tape.mul(sum, ids[0]).unwrap();
                let q = tape.div(prod, ids[1]).unwrap();
                let r = tape.sqrt_eps(q, 2.5);
                tape.reduce_mean(r, [true, true, true, true])
            },
            &shapes,
            &[randv_pos(120, 1), randv_pos(15, 2)],
            1e-5,
            1e-6,
        );
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn gradcheck_pointwise_linear() {
        let shapes = [Shape::new(2, 3, 4, 2), Shape::new(1, 5, 3, 1)];
        let report = grad_check(
            |tape, ids| {
                let y = tape.pointwise_linear(ids[0], ids[1]).unwrap();
                let sq = tape.mul(y, y).unwrap();
                tape.reduce_mean(sq, [true, true, true, true])
            },
            &shapes,
            &[randv(48, 3), randv(15, 4)],
            1e-5,
            1e-6,
        );
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn gradcheck_depthwise_conv_both_axes() {
        for along_t in [true, false] {
            let shapes = [Shape::new(2, 2, 6, 5), Shape::new(1, 2, 3, 1)];
            let report = grad_check(
                move |tape, ids| {
                    let y = if along_t {
                        tape.depthwise_conv_t(ids[0], ids[1]).unwrap()
                    } else {
                        tape.depthwise_conv_n(ids[0], ids[1]).unwrap()
                    };
                    let sq = tape.mul(y, y).unwrap();
                    tape.reduce_mean(sq, [true, true, true, true])
                },
                &shapes,
                &[randv(120, 5), randv(6, 6)],
                1e-5,
                1e-6,
            );
            assert!(report.max_rel_error < 1e-7, "along_t={along_t} {report:?}");
        }
    }

    #[test]
    fn gradcheck_batchnorm_softmax_reductions() {
        let shapes = [
            Shape::new(2, 3, 4, 2),
            Shape::new(1, 3, 1, 1),
            Shape::new(1, 3, 1, 1),
        ];
        let report = grad_check(
            |tape, ids| {
                let (y, _, _) = tape.batchnorm_train(ids[0], ids[1], ids[2], 1e-5).unwrap();
                let sm = tape.softmax_c(y);
                let picked = tape.select_c(sm, 1, 3).unwrap();
                let sq = tape.mul(picked, picked).unwrap();
                tape.reduce_mean(sq, [true, true, true, true])
            },
            &shapes,
            &[randv(48, 7), randv_pos(3, 8), randv(3, 9)],
            1e-5,
            1e-6,
        );
        assert!(report.max_rel_error < 1e-7, "{report:?}");
    }

    #[test]
    fn gradcheck_graph_and_time_ops() {
        use crate::graph::SparseAdjacency;
        let adj =
            SparseAdjacency::from_pairs_symmetrized(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0)])
                .unwrap();
        let mat: Arc<SparseMatrix<f64>> =
            Arc::new(SparseMatrix::normalized_adjacency(&adj).unwrap());
        let assignment = Arc::new(vec![0u32, 0, 1, 1, 1]);
        let shapes = [Shape::new(2, 2, 8, 5)];
        let report = grad_check(
            move |tape, ids| {
                let prop = tape.sparse_propagate(ids[0], &mat).unwrap();
                let shifted = tape.circ_shift_t(prop, 3);
                let pooled = tape.pool_nodes(shifted, &assignment, 2).unwrap();
                let d1 = tape.diff_t(pooled).unwrap();
                let d2 = tape.second_diff_t(pooled).unwrap();
                let bp = tape.bandpass_t(pooled, 8.0, 0.5, 3.0).unwrap();
                let s1 = tape.reduce_sum(d1, [true, true, true, true]);
                let sq2 = tape.mul(d2, d2).unwrap();
                let s2 = tape.reduce_sum(sq2, [true, true, true, true]);
                let sq3 = tape.mul(bp, bp).unwrap();
                let s3 = tape.reduce_sum(sq3, [true, true, true, true]);
                let a = tape.add(s1, s2).unwrap();
                tape.add(a, s3).unwrap()
            },
            &shapes,
            &[randv(160, 10)],
            1e-5,
            1e-6,
        );
        assert!(report.max_rel_error < 1e-7, "{report:?}");
    }

    #[test]
    fn gradcheck_concat_and_gating_pattern() {
        let shapes = [Shape::new(2, 3, 4, 3), Shape::new(2, 3, 4, 3)];
        let report = grad_check(
            |tape, ids| {
                let cat = tape.concat_c(&[ids[0], ids[1]]).unwrap();
                let gapped = tape.gap(cat);
                let weights = tape.softmax_c(gapped);
                let gated = tape.mul(cat, weights).unwrap();
                let r = tape.relu(gated);
                tape.reduce_mean(r, [true, true, true, true])
            },
            &shapes,
            &[randv_pos(72, 11), randv_pos(72, 12)],
            1e-5,
            1e-6,
        );
        assert!(report.max_rel_error < 1e-7, "{report:?}");
    }

    #[test]
    fn bandpass_removes_out_of_band_energy() {
        let mut tape: Tape<f64> = Tape::new();
        let t_len = 64;
        let fs = 16.0;
        let tau = 2.0 * std::f64::consts::PI;
        // 1 Hz (in band) + 6 Hz (out of band) + offset.
        let x: Vec<f64> = (0..t_len)
            .map(|i| {
                let t = i as f64 / fs;
                (tau * 1.0 * t).sin() + 0.5 * (tau * 6.0 * t).sin() + 2.0
            })
            .collect();
        let id = tape.constant(Shape::new(1, 1, t_len, 1), x).unwrap();
        let y = tape.bandpass_t(id, fs, 0.5, 3.0).unwrap();
        let vy = tape.value(y);
        // The surviving signal is the unit 1 Hz tone (bin-aligned).
        for (i, &v) in vy.iter().enumerate() {
            let t = i as f64 / fs;
            assert!((v - (tau * t).sin()).abs() < 1e-9, "t={t}: {v}");
        }
    }

    #[test]
    fn eval_batchnorm_is_pure_affine() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape
            .param(Shape::new(1, 2, 2, 1), vec![1.0, 2.0, 3.0, 4.0])
            .unwrap();
        let gamma = tape.param(Shape::new(1, 2, 1, 1), vec![2.0, 0.5]).unwrap();
        let beta = tape.param(Shape::new(1, 2, 1, 1), vec![0.0, 1.0]).unwrap();
        let y = tape
            .batchnorm_eval(x, gamma, beta, &[1.5, 3.5], &[0.25, 0.25], 0.0)
            .unwrap();
        let vy = tape.value(y);
        // Channel 0: (x - 1.5) / 0.5 * 2.0; channel 1: (x - 3.5) / 0.5 * 0.5 + 1.
        assert!((vy[0] - (-2.0)).abs() < 1e-12);
        assert!((vy[1] - 2.0).abs() < 1e-12);
        assert!((vy[2] - 0.5).abs() < 1e-12);
        assert!((vy[3] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.param(Shape::scalar(), vec![3.0]).unwrap();
        let c = tape.constant_scalar(4.0);
        let y = tape.mul(x, c).unwrap();
        let g = tape.backward(y).unwrap();
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(x).unwrap(), &[4.0]);
    }

    #[test]
    fn circular_shift_wraps_and_inverts() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape
            .param(Shape::new(1, 1, 4, 1), vec![1.0, 2.0, 3.0, 4.0])
            .unwrap();
        let y = tape.circ_shift_t(x, 1);
        assert_eq!(tape.value(y), &[4.0, 1.0, 2.0, 3.0]);
        let z = tape.circ_shift_t(x, -1);
        assert_eq!(tape.value(z), &[2.0, 3.0, 4.0, 1.0]);
        let w = tape.circ_shift_t(x, 5);
        assert_eq!(tape.value(w), &[4.0, 1.0, 2.0, 3.0]);
    }
}
