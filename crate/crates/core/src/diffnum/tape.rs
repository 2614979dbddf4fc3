//! Reverse-mode differentiation over a per-pass op graph.
//!
//! A `GradTape` is built fresh for each forward pass: ops execute eagerly and
//! record themselves, `gradient` replays the record backwards once. Values
//! flowing through the tape are `[batch, dim]` matrices (or vectors treated as
//! a single row); losses are scalars.

use std::collections::HashMap;

use crate::diffnum::linalg;
use crate::diffnum::mlp::{Activation, Mlp};
use crate::diffnum::tensor::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
}

/// Identity of one parameter tensor: (net uid, layer index, weight-or-bias).
pub type ParamKey = (u64, usize, ParamKind);

enum Op {
    /// y = x @ W^T + b, shapes x:[B,in] W:[out,in] b:[out] y:[B,out]
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        out: NodeId,
        batch: usize,
        din: usize,
        dout: usize,
    },
    /// Elementwise activation; gradient computed from the stored output.
    Activation {
        x: NodeId,
        out: NodeId,
        kind: Activation,
    },
    Add {
        a: NodeId,
        b: NodeId,
        out: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
        out: NodeId,
    },
    Scale {
        x: NodeId,
        c: f32,
        out: NodeId,
    },
    /// Per-column affine broadcast over rows: y[r,j] = offset[j] + scale[j]*x[r,j]
    ColAffine {
        x: NodeId,
        out: NodeId,
        scale: Vec<f32>,
    },
    /// Row-wise concatenation along the last dim.
    Concat2 {
        a: NodeId,
        b: NodeId,
        out: NodeId,
        da: usize,
        db: usize,
    },
    /// Scalar: mean over rows of the row L2 norm.
    MeanRowL2 {
        x: NodeId,
        out: NodeId,
    },
    /// Scalar: mean of squared entries over all elements.
    MeanSqAll {
        x: NodeId,
        out: NodeId,
    },
    /// Scalar: mean of all elements.
    MeanAll {
        x: NodeId,
        out: NodeId,
    },
}

#[derive(Default)]
pub struct GradTape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    params: HashMap<ParamKey, NodeId>,
    consumed: bool,
}

/// Gradients keyed by parameter identity, one tensor per requested parameter.
pub struct GradientMap {
    grads: HashMap<ParamKey, Tensor>,
}

impl GradientMap {
    pub fn weight(&self, net: &Mlp, layer: usize) -> Option<&Tensor> {
        self.grads.get(&(net.uid(), layer, ParamKind::Weight))
    }

    pub fn bias(&self, net: &Mlp, layer: usize) -> Option<&Tensor> {
        self.grads.get(&(net.uid(), layer, ParamKind::Bias))
    }

    pub fn contains_net(&self, net: &Mlp) -> bool {
        (0..net.num_layers()).all(|l| self.weight(net, l).is_some() && self.bias(net, l).is_some())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl GradTape {
    pub fn new() -> Self {
        GradTape::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    /// Register a constant (non-differentiated) input.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push_value(t)
    }

    /// Register a parameter, snapshotting its current values. Registering the
    /// same key again returns the existing node so gradients accumulate.
    pub fn param(&mut self, key: ParamKey, t: &Tensor) -> NodeId {
        if let Some(&id) = self.params.get(&key) {
            return id;
        }
        let id = self.push_value(t.clone());
        self.params.insert(key, id);
        id
    }

    fn push_value(&mut self, t: Tensor) -> NodeId {
        self.values.push(t);
        self.values.len() - 1
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (batch, din) = (self.values[x].rows(), self.values[x].last_dim());
        let (dout, win) = (self.values[w].shape()[0], self.values[w].shape()[1]);
        if din != win {
            return Err(Error::dims("linear", win, din));
        }
        if self.values[b].numel() != dout {
            return Err(Error::dims("linear bias", dout, self.values[b].numel()));
        }
        let mut y = vec![0.0f32; batch * dout];
        for r in 0..batch {
            y[r * dout..(r + 1) * dout].copy_from_slice(self.values[b].data());
        }
        linalg::matmul_xwt(self.values[x].data(), self.values[w].data(), &mut y, batch, din, dout);
        let out = self.push_value(Tensor::matrix(batch, dout, y)?);
        self.ops.push(Op::Linear {
            x,
            w,
            b,
            out,
            batch,
            din,
            dout,
        });
        Ok(out)
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        if kind == Activation::Identity {
            return x;
        }
        let mut y = self.values[x].clone();
        for v in y.data_mut() {
            *v = kind.apply(*v);
        }
        let out = self.push_value(y);
        self.ops.push(Op::Activation { x, out, kind });
        out
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "add", true)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise(a, b, "sub", false)
    }

    fn elementwise(&mut self, a: NodeId, b: NodeId, op: &'static str, add: bool) -> Result<NodeId> {
        if self.values[a].shape() != self.values[b].shape() {
            return Err(Error::dims(
                op,
                format!("{:?}", self.values[a].shape()),
                format!("{:?}", self.values[b].shape()),
            ));
        }
        let mut y = self.values[a].clone();
        for (yv, bv) in y.data_mut().iter_mut().zip(self.values[b].data()) {
            if add {
                *yv += bv;
            } else {
                *yv -= bv;
            }
        }
        let out = self.push_value(y);
        self.ops.push(if add {
            Op::Add { a, b, out }
        } else {
            Op::Sub { a, b, out }
        });
        Ok(out)
    }

    pub fn scale(&mut self, x: NodeId, c: f32) -> NodeId {
        let mut y = self.values[x].clone();
        for v in y.data_mut() {
            *v *= c;
        }
        let out = self.push_value(y);
        self.ops.push(Op::Scale { x, c, out });
        out
    }

    /// y[r,j] = offset[j] + scale[j] * x[r,j]
    pub fn col_affine(&mut self, x: NodeId, scale: &[f32], offset: &[f32]) -> Result<NodeId> {
        let d = self.values[x].last_dim();
        if scale.len() != d || offset.len() != d {
            return Err(Error::dims("col_affine", d, scale.len().max(offset.len())));
        }
        let mut y = self.values[x].clone();
        for r in 0..y.rows() {
            let row = &mut y.data_mut()[r * d..(r + 1) * d];
            for ((v, s), o) in row.iter_mut().zip(scale).zip(offset) {
                *v = o + s * *v;
            }
        }
        let out = self.push_value(y);
        self.ops.push(Op::ColAffine {
            x,
            out,
            scale: scale.to_vec(),
        });
        Ok(out)
    }

    pub fn concat2(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, da) = (self.values[a].rows(), self.values[a].last_dim());
        let (rb, db) = (self.values[b].rows(), self.values[b].last_dim());
        if ra != rb {
            return Err(Error::dims("concat2 rows", ra, rb));
        }
        let mut y = vec![0.0f32; ra * (da + db)];
        for r in 0..ra {
            y[r * (da + db)..r * (da + db) + da].copy_from_slice(self.values[a].row(r));
            y[r * (da + db) + da..(r + 1) * (da + db)].copy_from_slice(self.values[b].row(r));
        }
        let out = self.push_value(Tensor::matrix(ra, da + db, y)?);
        self.ops.push(Op::Concat2 { a, b, out, da, db });
        Ok(out)
    }

    pub fn mean_row_l2(&mut self, x: NodeId) -> NodeId {
        let rows = self.values[x].rows();
        let mut acc = 0.0f32;
        for r in 0..rows {
            acc += crate::diffnum::tensor::l2_norm(self.values[x].row(r));
        }
        let out = self.push_value(Tensor::scalar(acc / rows as f32));
        self.ops.push(Op::MeanRowL2 { x, out });
        out
    }

    pub fn mean_sq_all(&mut self, x: NodeId) -> NodeId {
        let n = self.values[x].numel();
        let acc: f32 = self.values[x].data().iter().map(|v| v * v).sum();
        let out = self.push_value(Tensor::scalar(acc / n as f32));
        self.ops.push(Op::MeanSqAll { x, out });
        out
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let n = self.values[x].numel();
        let acc: f32 = self.values[x].data().iter().sum();
        let out = self.push_value(Tensor::scalar(acc / n as f32));
        self.ops.push(Op::MeanAll { x, out });
        out
    }

    /// Backpropagate from `loss` and return gradients for every parameter of
    /// the nets in `wrt`. A tape can produce gradients once; run a new forward
    /// pass for the next step.
    pub fn gradient(&mut self, loss: NodeId, wrt: &[&Mlp]) -> Result<GradientMap> {
        if self.consumed {
            return Err(Error::contract(
                "gradient already taken from this tape; record a new forward pass",
            ));
        }
        self.consumed = true;
        if self.values[loss].numel() != 1 {
            return Err(Error::contract(format!(
                "loss must be scalar, got {} elements",
                self.values[loss].numel()
            )));
        }
        for net in wrt {
            for layer in 0..net.num_layers() {
                if !self.params.contains_key(&(net.uid(), layer, ParamKind::Weight)) {
                    return Err(Error::contract(format!(
                        "parameter (net {}, layer {layer}) did not participate in the taped pass",
                        net.uid()
                    )));
                }
            }
        }

        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.values.len()];
        grads[loss] = Some(vec![1.0]);

        for op in self.ops.iter().rev() {
            self.backward_op(op, &mut grads);
        }

        let mut map = HashMap::new();
        for net in wrt {
            for layer in 0..net.num_layers() {
                for kind in [ParamKind::Weight, ParamKind::Bias] {
                    let key = (net.uid(), layer, kind);
                    let node = self.params[&key];
                    let shape = self.values[node].shape().to_vec();
                    let data = match &grads[node] {
                        Some(g) => g.clone(),
                        None => vec![0.0; self.values[node].numel()],
                    };
                    map.insert(key, Tensor::new(shape, data)?);
                }
            }
        }
        Ok(GradientMap { grads: map })
    }

    fn backward_op(&self, op: &Op, grads: &mut [Option<Vec<f32>>]) {
        fn take(grads: &[Option<Vec<f32>>], id: NodeId) -> Option<Vec<f32>> {
            grads[id].clone()
        }
        fn accum(grads: &mut [Option<Vec<f32>>], id: NodeId, delta: &[f32]) {
            match &mut grads[id] {
                Some(g) => {
                    for (gv, dv) in g.iter_mut().zip(delta) {
                        *gv += dv;
                    }
                }
                None => grads[id] = Some(delta.to_vec()),
            }
        }

        match op {
            Op::Linear {
                x,
                w,
                b,
                out,
                batch,
                din,
                dout,
            } => {
                let Some(dy) = take(grads, *out) else { return };
                let mut dx = vec![0.0f32; batch * din];
                linalg::matmul_dyw(&dy, self.values[*w].data(), &mut dx, *batch, *din, *dout);
                accum(grads, *x, &dx);
                let mut dw = vec![0.0f32; dout * din];
                linalg::matmul_dytx(&dy, self.values[*x].data(), &mut dw, *batch, *din, *dout);
                accum(grads, *w, &dw);
                let mut db = vec![0.0f32; *dout];
                linalg::colsum(&dy, &mut db, *batch, *dout);
                accum(grads, *b, &db);
            }
            Op::Activation { x, out, kind } => {
                let Some(dy) = take(grads, *out) else { return };
                let y = self.values[*out].data();
                let dx: Vec<f32> = dy
                    .iter()
                    .zip(y)
                    .map(|(g, yv)| g * kind.grad_from_output(*yv))
                    .collect();
                accum(grads, *x, &dx);
            }
            Op::Add { a, b, out } => {
                let Some(dy) = take(grads, *out) else { return };
                accum(grads, *a, &dy);
                accum(grads, *b, &dy);
            }
            Op::Sub { a, b, out } => {
                let Some(dy) = take(grads, *out) else { return };
                accum(grads, *a, &dy);
                let neg: Vec<f32> = dy.iter().map(|v| -v).collect();
                accum(grads, *b, &neg);
            }
            Op::Scale { x, c, out } => {
                let Some(dy) = take(grads, *out) else { return };
                let dx: Vec<f32> = dy.iter().map(|v| c * v).collect();
                accum(grads, *x, &dx);
            }
            Op::ColAffine { x, out, scale } => {
                let Some(dy) = take(grads, *out) else { return };
                let d = scale.len();
                let dx: Vec<f32> = dy
                    .iter()
                    .enumerate()
                    .map(|(i, g)| g * scale[i % d])
                    .collect();
                accum(grads, *x, &dx);
            }
            Op::Concat2 { a, b, out, da, db } => {
                let Some(dy) = take(grads, *out) else { return };
                let rows = self.values[*out].rows();
                let w = da + db;
                let mut ga = vec![0.0f32; rows * da];
                let mut gb = vec![0.0f32; rows * db];
                for r in 0..rows {
                    ga[r * da..(r + 1) * da].copy_from_slice(&dy[r * w..r * w + da]);
                    gb[r * db..(r + 1) * db].copy_from_slice(&dy[r * w + da..(r + 1) * w]);
                }
                accum(grads, *a, &ga);
                accum(grads, *b, &gb);
            }
            Op::MeanRowL2 { x, out } => {
                let Some(dy) = take(grads, *out) else { return };
                let g = dy[0];
                let xv = &self.values[*x];
                let rows = xv.rows();
                let d = xv.last_dim();
                let mut dx = vec![0.0f32; rows * d];
                for r in 0..rows {
                    let row = xv.row(r);
                    let norm = crate::diffnum::tensor::l2_norm(row);
                    if norm > 1e-12 {
                        let c = g / (rows as f32 * norm);
                        for (dv, v) in dx[r * d..(r + 1) * d].iter_mut().zip(row) {
                            *dv = c * v;
                        }
                    }
                }
                accum(grads, *x, &dx);
            }
            Op::MeanSqAll { x, out } => {
                let Some(dy) = take(grads, *out) else { return };
                let g = dy[0];
                let n = self.values[*x].numel() as f32;
                let dx: Vec<f32> = self.values[*x]
                    .data()
                    .iter()
                    .map(|v| g * 2.0 * v / n)
                    .collect();
                accum(grads, *x, &dx);
            }
            Op::MeanAll { x, out } => {
                let Some(dy) = take(grads, *out) else { return };
                let n = self.values[*x].numel() as f32;
                let dx = vec![dy[0] / n; self.values[*x].numel()];
                accum(grads, *x, &dx);
            }
        }
    }
}
