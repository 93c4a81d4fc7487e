//! Tape-recorded reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of a forward pass as an
//! append-only list of nodes; node ids are topologically ordered by
//! construction. [`Tape::backward`] walks the list once in reverse,
//! applying each node's local gradient and accumulating parameter
//! gradients into a [`ParamStore`].
//!
//! Arrays are immutable once written by an op. A fresh tape is built
//! per training step; tapes are single-threaded.

use std::cell::RefCell;
use std::collections::HashMap;
use std::ops::Range;
use std::rc::Rc;

use super::array::{stable_sum, Array, Real};
use super::params::ParamStore;

/// Activation kinds accepted by [`Var::activation`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    /// Softmax normalized along the last dimension.
    SoftmaxLastDim,
}

/// Local gradient: (out value, upstream grad, input values) -> one
/// gradient array per input, in input order.
type BackwardFn = Box<dyn Fn(&Array, &Array, &[&Array]) -> Vec<Array>>;

struct Node {
    op: &'static str,
    inputs: Vec<usize>,
    value: Array,
    backward: Option<BackwardFn>,
}

struct TapeInner {
    nodes: Vec<Node>,
    /// Named parameter leaves in bind order, for gradient scatter-back.
    leaves: Vec<(String, usize)>,
    leaf_ids: HashMap<String, usize>,
    /// Gradients from the most recent backward pass.
    grads: Vec<Option<Array>>,
}

/// Recording tape. Cheap to clone (shared handle).
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to one recorded value on a tape. Cheap to clone.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                leaves: Vec::new(),
                leaf_ids: HashMap::new(),
                grads: Vec::new(),
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(
        &self,
        op: &'static str,
        inputs: Vec<usize>,
        value: Array,
        backward: Option<BackwardFn>,
    ) -> Var {
        debug_assert!(
            value.all_finite(),
            "non-finite value produced by op `{}`",
            op
        );
        let mut inner = self.inner.borrow_mut();
        let id = inner.nodes.len();
        inner.nodes.push(Node {
            op,
            inputs,
            value,
            backward,
        });
        Var {
            tape: self.clone(),
            id,
        }
    }

    /// Record a constant (an input; receives no parameter gradient).
    pub fn constant(&self, value: Array) -> Var {
        self.push("constant", vec![], value, None)
    }

    pub fn scalar(&self, v: Real) -> Var {
        self.constant(Array::scalar(v))
    }

    /// Bind a named parameter from the store as a leaf. Binding the
    /// same name twice returns the same node.
    pub fn leaf(&self, store: &ParamStore, name: &str) -> Var {
        if let Some(&id) = self.inner.borrow().leaf_ids.get(name) {
            return Var {
                tape: self.clone(),
                id,
            };
        }
        let value = store.value(name).clone();
        let var = self.push("leaf", vec![], value, None);
        let mut inner = self.inner.borrow_mut();
        inner.leaves.push((name.to_string(), var.id));
        inner.leaf_ids.insert(name.to_string(), var.id);
        var
    }

    /// Reverse pass from a scalar loss; gradients stay on the tape and
    /// are readable through [`Var::grad`]. Does not touch any store.
    pub fn run_backward(&self, loss: &Var) {
        assert!(
            Rc::ptr_eq(&self.inner, &loss.tape.inner),
            "loss belongs to a different tape"
        );
        let mut grads: Vec<Option<Array>>;
        {
            let inner = self.inner.borrow();
            let nodes = &inner.nodes;
            assert_eq!(
                nodes[loss.id].value.numel(),
                1,
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            );
            grads = vec![None; nodes.len()];
            grads[loss.id] = Some(Array::full(
                nodes[loss.id].value.shape().to_vec(),
                1.0,
            ));
            for id in (0..=loss.id).rev() {
                let node = &nodes[id];
                let Some(backward) = node.backward.as_ref() else {
                    continue;
                };
                let Some(grad_out) = grads[id].take() else {
                    continue;
                };
                let input_vals: Vec<&Array> =
                    node.inputs.iter().map(|&i| &nodes[i].value).collect();
                let input_grads = backward(&node.value, &grad_out, &input_vals);
                assert_eq!(input_grads.len(), node.inputs.len());
                for (&inp, g) in node.inputs.iter().zip(input_grads) {
                    debug_assert_eq!(
                        g.shape(),
                        nodes[inp].value.shape(),
                        "op `{}` produced a gradient of wrong shape for input {}",
                        node.op,
                        inp
                    );
                    match &mut grads[inp] {
                        Some(acc) => acc.add_assign(&g),
                        slot => *slot = Some(g),
                    }
                }
                grads[id] = Some(grad_out);
            }
        }
        self.inner.borrow_mut().grads = grads;
    }

    /// Reverse pass from a scalar loss, then add each named leaf's
    /// gradient into the store's accumulators. Repeated calls
    /// accumulate.
    pub fn backward(&self, loss: &Var, store: &mut ParamStore) {
        self.run_backward(loss);
        let inner = self.inner.borrow();
        for (name, id) in &inner.leaves {
            if let Some(g) = &inner.grads[*id] {
                store.grad_mut(name).add_assign(g);
            }
        }
    }

    /// Vertically concatenate 2-D vars sharing a column count.
    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let inner = self.inner.borrow();
        let cols = inner.nodes[parts[0].id].value.cols();
        let mut data = Vec::new();
        let mut total_rows = 0usize;
        let mut splits = Vec::with_capacity(parts.len());
        for p in parts {
            let v = &inner.nodes[p.id].value;
            assert_eq!(
                v.cols(),
                cols,
                "concat_rows column mismatch: {:?} vs {} cols",
                v.shape(),
                cols
            );
            splits.push(v.rows());
            total_rows += v.rows();
            data.extend_from_slice(v.data());
        }
        drop(inner);
        let value = Array::new(vec![total_rows, cols], data);
        let ids = parts.iter().map(|p| p.id).collect();
        self.push(
            "concat_rows",
            ids,
            value,
            Some(Box::new(move |_out, grad, inputs| {
                let mut gs = Vec::with_capacity(inputs.len());
                let mut offset = 0usize;
                for (inp, &rows) in inputs.iter().zip(&splits) {
                    let n = rows * cols;
                    gs.push(Array::new(
                        inp.shape().to_vec(),
                        grad.data()[offset..offset + n].to_vec(),
                    ));
                    offset += n;
                }
                gs
            })),
        )
    }

    /// Horizontally concatenate 2-D vars sharing a row count.
    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let inner = self.inner.borrow();
        let rows = inner.nodes[parts[0].id].value.rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let v = &inner.nodes[p.id].value;
                assert_eq!(
                    v.rows(),
                    rows,
                    "concat_cols row mismatch: {:?} vs {} rows",
                    v.shape(),
                    rows
                );
                v.cols()
            })
            .collect();
        let total_cols: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(inner.nodes[p.id].value.row(r));
            }
        }
        drop(inner);
        let value = Array::new(vec![rows, total_cols], data);
        let ids = parts.iter().map(|p| p.id).collect();
        self.push(
            "concat_cols",
            ids,
            value,
            Some(Box::new(move |_out, grad, inputs| {
                let mut gs: Vec<Array> = inputs
                    .iter()
                    .map(|inp| Array::zeros(inp.shape().to_vec()))
                    .collect();
                for r in 0..rows {
                    let grow = grad.row(r);
                    let mut offset = 0usize;
                    for (k, &w) in widths.iter().enumerate() {
                        let c = gs[k].cols();
                        gs[k].data_mut()[r * c..(r + 1) * c]
                            .copy_from_slice(&grow[offset..offset + w]);
                        offset += w;
                    }
                }
                gs
            })),
        )
    }
}

impl Var {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Snapshot of this node's value.
    pub fn value(&self) -> Array {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().nodes[self.id].value.shape().to_vec()
    }

    /// Value of a single-element var.
    pub fn item(&self) -> Real {
        self.tape.inner.borrow().nodes[self.id].value.item()
    }

    /// Gradient from the most recent backward pass (zeros if none
    /// reached this node).
    pub fn grad(&self) -> Array {
        let inner = self.tape.inner.borrow();
        match inner.grads.get(self.id) {
            Some(Some(g)) => g.clone(),
            _ => Array::zeros(inner.nodes[self.id].value.shape().to_vec()),
        }
    }

    fn with_value<R>(&self, f: impl FnOnce(&Array) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id].value)
    }

    fn unary(
        &self,
        op: &'static str,
        value: Array,
        backward: impl Fn(&Array, &Array, &[&Array]) -> Vec<Array> + 'static,
    ) -> Var {
        self.tape
            .push(op, vec![self.id], value, Some(Box::new(backward)))
    }

    fn binary(
        &self,
        other: &Var,
        op: &'static str,
        value: Array,
        backward: impl Fn(&Array, &Array, &[&Array]) -> Vec<Array> + 'static,
    ) -> Var {
        assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "vars from different tapes in op `{}`",
            op
        );
        self.tape.push(
            op,
            vec![self.id, other.id],
            value,
            Some(Box::new(backward)),
        )
    }

    // ---- arithmetic ----

    pub fn add(&self, other: &Var) -> Var {
        let value = self.with_value(|a| other.with_value(|b| a.zip_map(b, |x, y| x + y)));
        self.binary(other, "add", value, |_out, g, _ins| {
            vec![g.clone(), g.clone()]
        })
    }

    pub fn sub(&self, other: &Var) -> Var {
        let value = self.with_value(|a| other.with_value(|b| a.zip_map(b, |x, y| x - y)));
        self.binary(other, "sub", value, |_out, g, _ins| {
            vec![g.clone(), g.map(|x| -x)]
        })
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Var) -> Var {
        let value = self.with_value(|a| other.with_value(|b| a.zip_map(b, |x, y| x * y)));
        self.binary(other, "mul", value, |_out, g, ins| {
            vec![g.zip_map(ins[1], |gv, b| gv * b), g.zip_map(ins[0], |gv, a| gv * a)]
        })
    }

    /// Elementwise `a*x + c` with constant coefficients.
    pub fn affine(&self, a: Real, c: Real) -> Var {
        let value = self.with_value(|x| x.map(|v| a * v + c));
        self.unary("affine", value, move |_out, g, _ins| vec![g.map(|gv| a * gv)])
    }

    pub fn neg(&self) -> Var {
        self.affine(-1.0, 0.0)
    }

    pub fn scale(&self, s: Real) -> Var {
        self.affine(s, 0.0)
    }

    /// Matrix product `[n,m] x [m,p] -> [n,p]`.
    pub fn matmul(&self, other: &Var) -> Var {
        let value = self.with_value(|a| other.with_value(|b| host_matmul(a, b, false)));
        self.binary(other, "matmul", value, |_out, g, ins| {
            matmul_backward(g, ins[0], ins[1])
        })
    }

    /// Matrix product whose inner sums are permutation-stable: used
    /// where reordering the contraction axis (e.g. region rows feeding
    /// an attention context) must reproduce bit-identical outputs.
    pub fn matmul_stable(&self, other: &Var) -> Var {
        let value = self.with_value(|a| other.with_value(|b| host_matmul(a, b, true)));
        self.binary(other, "matmul_stable", value, |_out, g, ins| {
            matmul_backward(g, ins[0], ins[1])
        })
    }

    pub fn transpose(&self) -> Var {
        let value = self.with_value(host_transpose);
        self.unary("transpose", value, |_out, g, _ins| {
            vec![host_transpose(g)]
        })
    }

    /// Fully-connected layer: `x [n,in] * w [out,in]^T + b [out]`.
    pub fn linear(&self, w: &Var, b: &Var) -> Var {
        let tape = self.tape.clone();
        let value = {
            let inner = tape.inner.borrow();
            let x = &inner.nodes[self.id].value;
            let wv = &inner.nodes[w.id].value;
            let bv = &inner.nodes[b.id].value;
            assert_eq!(
                x.cols(),
                wv.cols(),
                "linear dimension mismatch: x {:?} vs w {:?}",
                x.shape(),
                wv.shape()
            );
            assert_eq!(
                bv.numel(),
                wv.rows(),
                "linear bias mismatch: b {:?} vs w {:?}",
                bv.shape(),
                wv.shape()
            );
            let (n, d_in, d_out) = (x.rows(), x.cols(), wv.rows());
            let mut out = Array::zeros(vec![n, d_out]);
            for i in 0..n {
                let xi = x.row(i);
                for o in 0..d_out {
                    let wo = wv.row(o);
                    let mut acc = bv.data()[o];
                    for k in 0..d_in {
                        acc += wo[k] * xi[k];
                    }
                    out.set(i, o, acc);
                }
            }
            out
        };
        assert!(Rc::ptr_eq(&tape.inner, &w.tape.inner));
        assert!(Rc::ptr_eq(&tape.inner, &b.tape.inner));
        tape.push(
            "linear",
            vec![self.id, w.id, b.id],
            value,
            Some(Box::new(|_out, g, ins| {
                let (x, w, b) = (ins[0], ins[1], ins[2]);
                let (n, d_in, d_out) = (x.rows(), x.cols(), w.rows());
                let mut gx = Array::zeros(x.shape().to_vec());
                let mut gw = Array::zeros(w.shape().to_vec());
                let mut gb = Array::zeros(b.shape().to_vec());
                for i in 0..n {
                    let gi = g.row(i);
                    let xi = x.row(i);
                    for o in 0..d_out {
                        let go = gi[o];
                        gb.data_mut()[o] += go;
                        let wo = w.row(o);
                        for k in 0..d_in {
                            gx.data_mut()[i * d_in + k] += go * wo[k];
                            gw.data_mut()[o * d_in + k] += go * xi[k];
                        }
                    }
                }
                vec![gx, gw, gb]
            })),
        )
    }

    /// Add a row vector `[d]` or `[1,d]` to each row of `[n,d]`.
    pub fn add_row(&self, bias: &Var) -> Var {
        let value = self.with_value(|x| {
            bias.with_value(|b| {
                assert_eq!(
                    x.cols(),
                    b.numel(),
                    "add_row mismatch: {:?} vs {:?}",
                    x.shape(),
                    b.shape()
                );
                let mut out = x.clone();
                let c = out.cols();
                for r in 0..out.rows() {
                    for j in 0..c {
                        out.data_mut()[r * c + j] += b.data()[j];
                    }
                }
                out
            })
        });
        self.binary(bias, "add_row", value, |_out, g, ins| {
            let b = ins[1];
            let mut gb = Array::zeros(b.shape().to_vec());
            let c = g.cols();
            for r in 0..g.rows() {
                for j in 0..c {
                    gb.data_mut()[j] += g.data()[r * c + j];
                }
            }
            vec![g.clone(), gb]
        })
    }

    // ---- nonlinearities ----

    pub fn relu(&self) -> Var {
        let value = self.with_value(|x| x.map(|v| v.max(0.0)));
        self.unary("relu", value, |_out, g, ins| {
            vec![g.zip_map(ins[0], |gv, x| if x > 0.0 { gv } else { 0.0 })]
        })
    }

    pub fn sigmoid(&self) -> Var {
        let value = self.with_value(|x| x.map(|v| 1.0 / (1.0 + (-v).exp())));
        self.unary("sigmoid", value, |out, g, _ins| {
            vec![g.zip_map(out, |gv, y| gv * y * (1.0 - y))]
        })
    }

    pub fn tanh(&self) -> Var {
        let value = self.with_value(|x| x.map(|v| v.tanh()));
        self.unary("tanh", value, |out, g, _ins| {
            vec![g.zip_map(out, |gv, y| gv * (1.0 - y * y))]
        })
    }

    pub fn ln(&self) -> Var {
        let value = self.with_value(|x| x.map(|v| v.ln()));
        self.unary("ln", value, |_out, g, ins| {
            vec![g.zip_map(ins[0], |gv, x| gv / x)]
        })
    }

    /// Clamp to `[lo, hi]`; gradient passes only where the input was
    /// within the range.
    pub fn clamp(&self, lo: Real, hi: Real) -> Var {
        let value = self.with_value(|x| x.map(|v| v.clamp(lo, hi)));
        self.unary("clamp", value, move |_out, g, ins| {
            vec![g.zip_map(ins[0], |gv, x| if x >= lo && x <= hi { gv } else { 0.0 })]
        })
    }

    pub fn activation(&self, kind: Activation) -> Var {
        match kind {
            Activation::Relu => self.relu(),
            Activation::Sigmoid => self.sigmoid(),
            Activation::Tanh => self.tanh(),
            Activation::SoftmaxLastDim => self.softmax_lastdim(),
        }
    }

    /// Softmax along the last dimension, computed with max
    /// subtraction. Each row's normalizer is a permutation-stable sum.
    pub fn softmax_lastdim(&self) -> Var {
        let value = self.with_value(host_softmax_lastdim);
        self.unary("softmax_lastdim", value, |out, g, _ins| {
            let c = out.cols();
            let mut gx = Array::zeros(out.shape().to_vec());
            for r in 0..out.rows() {
                let y = out.row(r);
                let gr = g.row(r);
                let dot: Real = y.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                for j in 0..c {
                    gx.data_mut()[r * c + j] = y[j] * (gr[j] - dot);
                }
            }
            vec![gx]
        })
    }

    /// Log-softmax along the last dimension (stable log-sum-exp).
    pub fn log_softmax_lastdim(&self) -> Var {
        let value = self.with_value(|x| {
            let c = x.cols();
            let mut out = x.clone();
            for r in 0..x.rows() {
                let row = x.row(r);
                let m = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
                let mut exps: Vec<Real> = row.iter().map(|&v| (v - m).exp()).collect();
                let lse = m + stable_sum(&mut exps).ln();
                for j in 0..c {
                    out.data_mut()[r * c + j] = row[j] - lse;
                }
            }
            out
        });
        self.unary("log_softmax_lastdim", value, |out, g, _ins| {
            let c = out.cols();
            let mut gx = Array::zeros(out.shape().to_vec());
            for r in 0..out.rows() {
                let gr = g.row(r);
                let gsum: Real = gr.iter().sum();
                for j in 0..c {
                    gx.data_mut()[r * c + j] = gr[j] - out.row(r)[j].exp() * gsum;
                }
            }
            vec![gx]
        })
    }

    /// Per-row normalization to zero mean / unit variance followed by
    /// the affine `gamma * xhat + beta`; `eps` sits inside the square
    /// root of the variance.
    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: Real) -> Var {
        let tape = self.tape.clone();
        let value = {
            let inner = tape.inner.borrow();
            let x = &inner.nodes[self.id].value;
            let gm = &inner.nodes[gamma.id].value;
            let bt = &inner.nodes[beta.id].value;
            assert_eq!(
                x.cols(),
                gm.numel(),
                "layer_norm gamma mismatch: {:?} vs {:?}",
                x.shape(),
                gm.shape()
            );
            assert_eq!(gm.numel(), bt.numel());
            host_layer_norm(x, gm, bt, eps)
        };
        tape.push(
            "layer_norm",
            vec![self.id, gamma.id, beta.id],
            value,
            Some(Box::new(move |_out, g, ins| {
                let (x, gm, bt) = (ins[0], ins[1], ins[2]);
                let (n, d) = (x.rows(), x.cols());
                let mut gx = Array::zeros(x.shape().to_vec());
                let mut ggm = Array::zeros(gm.shape().to_vec());
                let mut gbt = Array::zeros(bt.shape().to_vec());
                for r in 0..n {
                    let row = x.row(r);
                    let mean: Real = row.iter().sum::<Real>() / d as Real;
                    let var: Real =
                        row.iter().map(|&v| (v - mean) * (v - mean)).sum::<Real>() / d as Real;
                    let std = (var + eps).sqrt();
                    let xhat: Vec<Real> = row.iter().map(|&v| (v - mean) / std).collect();
                    let gr = g.row(r);
                    // d/dxhat, then the two row means the normalization couples in.
                    let dxhat: Vec<Real> = (0..d).map(|j| gr[j] * gm.data()[j]).collect();
                    let m1: Real = dxhat.iter().sum::<Real>() / d as Real;
                    let m2: Real =
                        dxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<Real>() / d as Real;
                    for j in 0..d {
                        gx.data_mut()[r * d + j] = (dxhat[j] - m1 - xhat[j] * m2) / std;
                        ggm.data_mut()[j] += gr[j] * xhat[j];
                        gbt.data_mut()[j] += gr[j];
                    }
                }
                vec![gx, ggm, gbt]
            })),
        )
    }

    // ---- reductions / reshaping ----

    pub fn sum_all(&self) -> Var {
        let value = self.with_value(|x| Array::scalar(x.data().iter().sum()));
        self.unary("sum_all", value, |_out, g, ins| {
            vec![Array::full(ins[0].shape().to_vec(), g.item())]
        })
    }

    /// Column-wise mean over rows: `[n,d] -> [1,d]`.
    pub fn mean_rows(&self) -> Var {
        let value = self.with_value(|x| {
            let (n, d) = (x.rows(), x.cols());
            let mut out = Array::zeros(vec![1, d]);
            for r in 0..n {
                for j in 0..d {
                    out.data_mut()[j] += x.at(r, j);
                }
            }
            out.scale_assign(1.0 / n as Real);
            out
        });
        self.unary("mean_rows", value, |_out, g, ins| {
            let (n, d) = (ins[0].rows(), ins[0].cols());
            let mut gx = Array::zeros(ins[0].shape().to_vec());
            for r in 0..n {
                for j in 0..d {
                    gx.data_mut()[r * d + j] = g.data()[j] / n as Real;
                }
            }
            vec![gx]
        })
    }

    pub fn slice_rows(&self, range: Range<usize>) -> Var {
        let value = self.with_value(|x| {
            assert!(
                range.end <= x.rows(),
                "slice_rows {:?} out of bounds for {:?}",
                range,
                x.shape()
            );
            let c = x.cols();
            Array::new(
                vec![range.len(), c],
                x.data()[range.start * c..range.end * c].to_vec(),
            )
        });
        let range_b = range.clone();
        self.unary("slice_rows", value, move |_out, g, ins| {
            let c = ins[0].cols();
            let mut gx = Array::zeros(ins[0].shape().to_vec());
            gx.data_mut()[range_b.start * c..range_b.end * c].copy_from_slice(g.data());
            vec![gx]
        })
    }

    pub fn row_var(&self, i: usize) -> Var {
        self.slice_rows(i..i + 1)
    }

    pub fn slice_cols(&self, range: Range<usize>) -> Var {
        let value = self.with_value(|x| {
            assert!(
                range.end <= x.cols(),
                "slice_cols {:?} out of bounds for {:?}",
                range,
                x.shape()
            );
            let mut data = Vec::with_capacity(x.rows() * range.len());
            for r in 0..x.rows() {
                data.extend_from_slice(&x.row(r)[range.clone()]);
            }
            Array::new(vec![x.rows(), range.len()], data)
        });
        let range_b = range.clone();
        self.unary("slice_cols", value, move |_out, g, ins| {
            let c = ins[0].cols();
            let w = range_b.len();
            let mut gx = Array::zeros(ins[0].shape().to_vec());
            for r in 0..g.rows() {
                gx.data_mut()[r * c + range_b.start..r * c + range_b.start + w]
                    .copy_from_slice(g.row(r));
            }
            vec![gx]
        })
    }
}

fn host_matmul(a: &Array, b: &Array, stable: bool) -> Array {
    assert_eq!(
        a.cols(),
        b.rows(),
        "matmul dimension mismatch: {:?} x {:?}",
        a.shape(),
        b.shape()
    );
    let (n, m, p) = (a.rows(), a.cols(), b.cols());
    let mut out = Array::zeros(vec![n, p]);
    let mut scratch = vec![0.0; m];
    for i in 0..n {
        let ai = a.row(i);
        for j in 0..p {
            let v = if stable {
                for k in 0..m {
                    scratch[k] = ai[k] * b.at(k, j);
                }
                stable_sum(&mut scratch)
            } else {
                let mut acc = 0.0;
                for k in 0..m {
                    acc += ai[k] * b.at(k, j);
                }
                acc
            };
            out.set(i, j, v);
        }
    }
    out
}

fn matmul_backward(g: &Array, a: &Array, b: &Array) -> Vec<Array> {
    // da = g b^T ; db = a^T g
    let (n, m, p) = (a.rows(), a.cols(), b.cols());
    let mut ga = Array::zeros(a.shape().to_vec());
    let mut gb = Array::zeros(b.shape().to_vec());
    for i in 0..n {
        for k in 0..m {
            let mut acc = 0.0;
            for j in 0..p {
                acc += g.at(i, j) * b.at(k, j);
            }
            ga.data_mut()[i * m + k] = acc;
        }
    }
    for k in 0..m {
        for j in 0..p {
            let mut acc = 0.0;
            for i in 0..n {
                acc += a.at(i, k) * g.at(i, j);
            }
            gb.data_mut()[k * p + j] = acc;
        }
    }
    vec![ga, gb]
}

fn host_transpose(a: &Array) -> Array {
    let (n, m) = (a.rows(), a.cols());
    let mut out = Array::zeros(vec![m, n]);
    for i in 0..n {
        for j in 0..m {
            out.set(j, i, a.at(i, j));
        }
    }
    out
}

pub(crate) fn host_softmax_lastdim(x: &Array) -> Array {
    let c = x.cols();
    assert!(c >= 1, "softmax needs a non-empty last dimension");
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = x.row(r);
        let m = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
        let mut exps: Vec<Real> = row.iter().map(|&v| (v - m).exp()).collect();
        let denom = {
            let mut tmp = exps.clone();
            stable_sum(&mut tmp)
        };
        for j in 0..c {
            exps[j] /= denom;
        }
        out.data_mut()[r * c..(r + 1) * c].copy_from_slice(&exps);
    }
    out
}

pub(crate) fn host_layer_norm(x: &Array, gamma: &Array, beta: &Array, eps: Real) -> Array {
    let (n, d) = (x.rows(), x.cols());
    let mut out = Array::zeros(vec![n, d]);
    for r in 0..n {
        let row = x.row(r);
        let mean: Real = row.iter().sum::<Real>() / d as Real;
        let var: Real = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<Real>() / d as Real;
        let std = (var + eps).sqrt();
        for j in 0..d {
            out.set(r, j, gamma.data()[j] * (row[j] - mean) / std + beta.data()[j]);
        }
    }
    out
}
