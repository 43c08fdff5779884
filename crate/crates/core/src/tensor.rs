//! Reverse-mode differentiable f64 tensors.
//!
//! A [`Tensor`] is a node in a single-use computation graph: forward ops
//! record a backward closure and the input handles they need, and
//! [`Tensor::backward`] walks the graph once in reverse topological
//! order, accumulating `dL/dx` into every node that asked for it.
//! Storage is always a flat row-major `Vec<f64>` with the shape kept
//! alongside; matrix ops interpret shapes as `[rows, cols]`.
//!
//! The op set is deliberately small: exactly what a small ViT, its
//! losses, and the analysis probes need. Graphs are thread-local
//! (`Rc`-based); concurrency happens one level up, across independent
//! training runs and episodes.
//!
//! Non-finite values are an error, never silent: constructors and every
//! op that can create a NaN/Inf from finite inputs validate their
//! output.

use std::cell::{Cell, Ref, RefCell};
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch, left shape {lhs:?} vs right shape {rhs:?}")]
    DimensionMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

type BackFn = Box<dyn FnOnce(&[f64])>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    needs_grad: bool,
    prev: Vec<Tensor>,
    backward: Option<BackFn>,
    consumed: bool,
    id: u64,
}

/// Shared handle to a graph node. Cloning is cheap and aliases the node.
#[derive(Clone)]
pub struct Tensor(Rc<RefCell<Node>>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.0.borrow();
        write!(
            f,
            "Tensor{:?}[requires_grad={}, id={}]",
            n.shape, n.requires_grad, n.id
        )
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<(), TensorError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

impl Tensor {
    fn new_node(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        prev: Vec<Tensor>,
        backward: Option<BackFn>,
    ) -> Tensor {
        let needs_grad = requires_grad || prev.iter().any(|p| p.0.borrow().needs_grad);
        // Nodes outside any differentiable path drop their history so
        // evaluation-only forwards never build a graph.
        let (prev, backward) = if needs_grad {
            (prev, backward)
        } else {
            (Vec::new(), None)
        };
        Tensor(Rc::new(RefCell::new(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            needs_grad,
            prev,
            backward,
            consumed: false,
            id: next_id(),
        })))
    }

    /// Constant (non-differentiable) tensor.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(invalid(
                "from_vec",
                format!("shape {shape:?} implies {numel} values, got {}", data.len()),
            ));
        }
        check_finite("from_vec", &data)?;
        Ok(Tensor::new_node(shape.to_vec(), data, false, vec![], None))
    }

    /// Trainable leaf: participates in backward and keeps its gradient.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor, TensorError> {
        let t = Tensor::from_vec(shape, data)?;
        t.0.borrow_mut().requires_grad = true;
        t.0.borrow_mut().needs_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor::new_node(shape.to_vec(), vec![0.0; numel], false, vec![], None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![v]).expect("scalar is finite")
    }

    pub fn shape(&self) -> Vec<usize> {
        self.0.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.0.borrow().data.len()
    }

    /// Rows of a 2-D tensor (1 for a vector).
    pub fn rows(&self) -> usize {
        let n = self.0.borrow();
        if n.shape.len() >= 2 {
            n.shape[0]
        } else {
            1
        }
    }

    /// Last-dimension width.
    pub fn cols(&self) -> usize {
        let n = self.0.borrow();
        n.shape.last().copied().unwrap_or(1)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    /// Borrow the raw values.
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.0.borrow(), |n| n.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.borrow().data.clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let n = self.0.borrow();
        assert_eq!(n.data.len(), 1, "item() on tensor of shape {:?}", n.shape);
        n.data[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.borrow().grad.clone()
    }

    /// Overwrite values in place, keeping the graph identity.
    ///
    /// Escape hatch for optimizers, finite-difference probes, and
    /// weight-noise restoration; not an autodiff op.
    pub fn mutate_data(&self, f: impl FnOnce(&mut [f64])) {
        f(&mut self.0.borrow_mut().data);
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    /// Constant copy of the current values, detached from any graph.
    pub fn detach(&self) -> Tensor {
        let n = self.0.borrow();
        Tensor::new_node(n.shape.clone(), n.data.clone(), false, vec![], None)
    }

    /// Fresh trainable leaf with copied values (copy-on-finetune).
    pub fn clone_as_param(&self) -> Tensor {
        let n = self.0.borrow();
        Tensor::param(&n.shape, n.data.clone()).expect("existing tensor is finite")
    }

    fn accumulate_grad(&self, delta: &[f64]) {
        let mut n = self.0.borrow_mut();
        match &mut n.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => n.grad = Some(delta.to_vec()),
        }
    }

    /// Reverse-mode sweep from a single-element tensor.
    ///
    /// The graph is single-use: each node's backward closure runs once
    /// and is consumed. Leaves created with [`Tensor::param`] keep their
    /// accumulated gradient afterwards.
    pub fn backward(&self) -> Result<(), TensorError> {
        {
            let n = self.0.borrow();
            if n.data.len() != 1 {
                return Err(invalid(
                    "backward",
                    format!("expected a scalar root, got shape {:?}", n.shape),
                ));
            }
            if n.consumed {
                return Err(invalid("backward", "graph already consumed"));
            }
        }

        // Iterative DFS for reverse topological order.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: std::collections::HashSet<u64> = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.0.borrow().id);
        while let Some((node, child_idx)) = stack.pop() {
            let next_child = {
                let n = node.0.borrow();
                n.prev.get(child_idx).cloned()
            };
            match next_child {
                Some(child) => {
                    stack.push((node, child_idx + 1));
                    let id = child.0.borrow().id;
                    if visited.insert(id) {
                        stack.push((child, 0));
                    }
                }
                None => order.push(node),
            }
        }

        self.0.borrow_mut().grad = Some(vec![1.0]);
        for node in order.iter().rev() {
            let back = {
                let mut n = node.0.borrow_mut();
                n.consumed = true;
                n.backward.take()
            };
            if let Some(f) = back {
                let g = {
                    let n = node.0.borrow();
                    match &n.grad {
                        Some(g) => g.clone(),
                        None => continue, // never reached by the root
                    }
                };
                f(&g);
            }
        }
        Ok(())
    }

    // ------------------------------------------------------------------
    // Elementwise and broadcast ops
    // ------------------------------------------------------------------

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::DimensionMismatch {
                op: "add",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let out: Vec<f64> = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(x, y)| x + y).collect()
        };
        let (l, r) = (self.clone(), other.clone());
        Ok(Tensor::new_node(
            self.shape(),
            out,
            false,
            vec![self.clone(), other.clone()],
            Some(Box::new(move |g| {
                l.accumulate_grad(g);
                r.accumulate_grad(g);
            })),
        ))
    }

    /// Add a `[cols]` bias vector to every row of a `[rows, cols]` tensor.
    pub fn add_bias_row(&self, bias: &Tensor) -> Result<Tensor, TensorError> {
        let c = self.cols();
        if bias.shape() != vec![c] {
            return Err(TensorError::DimensionMismatch {
                op: "add_bias_row",
                lhs: self.shape(),
                rhs: bias.shape(),
            });
        }
        let out: Vec<f64> = {
            let a = self.data();
            let b = bias.data();
            a.chunks(c)
                .flat_map(|row| row.iter().zip(b.iter()).map(|(x, y)| x + y))
                .collect()
        };
        let (l, r) = (self.clone(), bias.clone());
        Ok(Tensor::new_node(
            self.shape(),
            out,
            false,
            vec![self.clone(), bias.clone()],
            Some(Box::new(move |g| {
                l.accumulate_grad(g);
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    for (d, gi) in db.iter_mut().zip(row) {
                        *d += gi;
                    }
                }
                r.accumulate_grad(&db);
            })),
        ))
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape() != other.shape() {
            return Err(TensorError::DimensionMismatch {
                op: "mul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let out: Vec<f64> = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(x, y)| x * y).collect()
        };
        let (l, r) = (self.clone(), other.clone());
        Ok(Tensor::new_node(
            self.shape(),
            out,
            false,
            vec![self.clone(), other.clone()],
            Some(Box::new(move |g| {
                // Read phase first: `l` and `r` may alias.
                let dl: Vec<f64> = {
                    let b = r.data();
                    g.iter().zip(b.iter()).map(|(gi, y)| gi * y).collect()
                };
                let dr: Vec<f64> = {
                    let a = l.data();
                    g.iter().zip(a.iter()).map(|(gi, x)| gi * x).collect()
                };
                l.accumulate_grad(&dl);
                r.accumulate_grad(&dr);
            })),
        ))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, c: f64) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|x| x * c).collect();
        let l = self.clone();
        Tensor::new_node(
            self.shape(),
            out,
            false,
            vec![self.clone()],
            Some(Box::new(move |g| {
                let dl: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                l.accumulate_grad(&dl);
            })),
        )
    }

    /// Multiply every element by a single-element tensor (e.g. a
    /// learnable noise scale). Gradient flows to both factors.
    pub fn mul_scalar(&self, s: &Tensor) -> Result<Tensor, TensorError> {
        if s.numel() != 1 {
            return Err(invalid(
                "mul_scalar",
                format!("scale must be a single element, got {:?}", s.shape()),
            ));
        }
        let sv = s.item();
        let out: Vec<f64> = self.data().iter().map(|x| x * sv).collect();
        let (l, r) = (self.clone(), s.clone());
        Ok(Tensor::new_node(
            self.shape(),
            out,
            false,
            vec![self.clone(), s.clone()],
            Some(Box::new(move |g| {
                let dl: Vec<f64> = g.iter().map(|gi| gi * sv).collect();
                let ds: f64 = {
                    let a = l.data();
                    g.iter().zip(a.iter()).map(|(gi, x)| gi * x).sum()
                };
                l.accumulate_grad(&dl);
                r.accumulate_grad(&[ds]);
            })),
        ))
    }

    pub fn exp(&self) -> Result<Tensor, TensorError> {
        let out: Vec<f64> = self.data().iter().map(|x| x.exp()).collect();
        check_finite("exp", &out)?;
        let l = self.clone();
        let cache = out.clone();
        Ok(Tensor::new_node(
            self.shape(),
            out,
            false,
            vec![self.clone()],
            Some(Box::new(move |g| {
                let dl: Vec<f64> = g.iter().zip(cache.iter()).map(|(gi, y)| gi * y).collect();
                l.accumulate_grad(&dl);
            })),
        ))
    }

    /// GELU with the tanh approximation:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&self) -> Result<Tensor, TensorError> {
        const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const A: f64 = 0.044715;
        let xs = self.to_vec();
        let out: Vec<f64> = xs
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (K * (x + A * x * x * x)).tanh()))
            .collect();
        check_finite("gelu", &out)?;
        let l = self.clone();
        Ok(Tensor::new_node(
            self.shape(),
            out,
            false,
            vec![self.clone()],
            Some(Box::new(move |g| {
                let dl: Vec<f64> = g
                    .iter()
                    .zip(xs.iter())
                    .map(|(gi, &x)| {
                        let t = (K * (x + A * x * x * x)).tanh();
                        let d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * A * x * x);
                        gi * d
                    })
                    .collect();
                l.accumulate_grad(&dl);
            })),
        ))
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f64 = self.data().iter().sum();
        let l = self.clone();
        let numel = self.numel();
        Tensor::new_node(
            vec![1],
            vec![s],
            false,
            vec![self.clone()],
            Some(Box::new(move |g| {
                l.accumulate_grad(&vec![g[0]; numel]);
            })),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum_all().scale(1.0 / n)
    }

    // ------------------------------------------------------------------
    // Matrix ops
    // ------------------------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]` matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (ls, rs) = (self.shape(), other.shape());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(TensorError::DimensionMismatch {
                op: "matmul",
                lhs: ls,
                rhs: rs,
            });
        }
        let (m, k, n) = (ls[0], ls[1], rs[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data(), &other.data(), &mut out);
        let (l, r) = (self.clone(), other.clone());
        let (l_needs, r_needs) = (
            self.0.borrow().needs_grad,
            other.0.borrow().needs_grad,
        );
        Ok(Tensor::new_node(
            vec![m, n],
            out,
            false,
            vec![self.clone(), other.clone()],
            Some(Box::new(move |g| {
                // dA = dC . B^T, dB = A^T . dC; constants skip their side.
                if l_needs {
                    let da = {
                        let b = r.data();
                        let mut da = vec![0.0; m * k];
                        gemm_nt(m, k, n, g, &b, &mut da);
                        da
                    };
                    l.accumulate_grad(&da);
                }
                if r_needs {
                    let db = {
                        let a = l.data();
                        let mut db = vec![0.0; k * n];
                        gemm_tn(m, k, n, &a, g, &mut db);
                        db
                    };
                    r.accumulate_grad(&db);
                }
            })),
        ))
    }

    /// Row-wise softmax with max subtraction. Rows sum to 1.
    pub fn softmax_rows(&self) -> Result<Tensor, TensorError> {
        let c = self.cols();
        let r = self.numel() / c;
        let mut out = vec![0.0; r * c];
        softmax_rows_raw(&self.data(), r, c, &mut out);
        check_finite("softmax_rows", &out)?;
        let l = self.clone();
        let cache = out.clone();
        Ok(Tensor::new_node(
            self.shape(),
            out,
            false,
            vec![self.clone()],
            Some(Box::new(move |g| {
                let mut dx = vec![0.0; cache.len()];
                softmax_backward_raw(&cache, g, r, c, &mut dx);
                l.accumulate_grad(&dx);
            })),
        ))
    }

    /// Mean of `-log softmax(logits)[i, label_i]` over the batch.
    pub fn cross_entropy_mean(&self, labels: &[usize]) -> Result<Tensor, TensorError> {
        let shp = self.shape();
        if shp.len() != 2 || shp[0] != labels.len() {
            return Err(TensorError::DimensionMismatch {
                op: "cross_entropy",
                lhs: shp,
                rhs: vec![labels.len()],
            });
        }
        let (b, c) = (shp[0], shp[1]);
        for &y in labels {
            if y >= c {
                return Err(TensorError::LabelOutOfRange {
                    label: y,
                    classes: c,
                });
            }
        }
        // loss_i = logsumexp(z_i) - z_i[y_i]; stable via max subtraction.
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        {
            let z = self.data();
            softmax_rows_raw(&z, b, c, &mut probs);
            for (i, &y) in labels.iter().enumerate() {
                let row = &z[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                loss += lse - row[y];
            }
        }
        loss /= b as f64;
        if !loss.is_finite() {
            return Err(TensorError::NonFinite { op: "cross_entropy" });
        }
        let l = self.clone();
        let labels = labels.to_vec();
        Ok(Tensor::new_node(
            vec![1],
            vec![loss],
            false,
            vec![self.clone()],
            Some(Box::new(move |g| {
                let scale = g[0] / b as f64;
                let mut dz = probs;
                for (i, &y) in labels.iter().enumerate() {
                    dz[i * c + y] -= 1.0;
                }
                for v in dz.iter_mut() {
                    *v *= scale;
                }
                l.accumulate_grad(&dz);
            })),
        ))
    }

    /// Per-row layer normalization over the last dimension, then an
    /// affine transform by `gamma` / `beta` (both `[cols]`).
    pub fn layer_norm(
        &self,
        gamma: &Tensor,
        beta: &Tensor,
        eps: f64,
    ) -> Result<Tensor, TensorError> {
        let c = self.cols();
        if gamma.shape() != vec![c] || beta.shape() != vec![c] {
            return Err(TensorError::DimensionMismatch {
                op: "layer_norm",
                lhs: self.shape(),
                rhs: gamma.shape(),
            });
        }
        let r = self.numel() / c;
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        {
            let x = self.data();
            let gm = gamma.data();
            let bt = beta.data();
            for i in 0..r {
                let row = &x[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[i] = is;
                for j in 0..c {
                    let xh = (row[j] - mean) * is;
                    xhat[i * c + j] = xh;
                    out[i * c + j] = gm[j] * xh + bt[j];
                }
            }
        }
        check_finite("layer_norm", &out)?;
        let (lx, lg, lb) = (self.clone(), gamma.clone(), beta.clone());
        Ok(Tensor::new_node(
            self.shape(),
            out,
            false,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Some(Box::new(move |g| {
                let mut dx = vec![0.0; r * c];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                {
                    let gm = lg.data();
                    for i in 0..r {
                        let go = &g[i * c..(i + 1) * c];
                        let xh = &xhat[i * c..(i + 1) * c];
                        let is = inv_std[i];
                        let mut sum_gd = 0.0;
                        let mut sum_gd_xh = 0.0;
                        for j in 0..c {
                            dgamma[j] += go[j] * xh[j];
                            dbeta[j] += go[j];
                            let gd = go[j] * gm[j];
                            sum_gd += gd;
                            sum_gd_xh += gd * xh[j];
                        }
                        let mean_gd = sum_gd / c as f64;
                        let mean_gd_xh = sum_gd_xh / c as f64;
                        for j in 0..c {
                            let gd = go[j] * gm[j];
                            dx[i * c + j] = is * (gd - mean_gd - xh[j] * mean_gd_xh);
                        }
                    }
                }
                lx.accumulate_grad(&dx);
                lg.accumulate_grad(&dgamma);
                lb.accumulate_grad(&dbeta);
            })),
        ))
    }

    // ------------------------------------------------------------------
    // Row plumbing (sequence assembly)
    // ------------------------------------------------------------------

    /// Tile the whole tensor `times` times along rows: `[r, c] -> [times*r, c]`.
    pub fn repeat_rows(&self, times: usize) -> Result<Tensor, TensorError> {
        let c = self.cols();
        let r = self.numel() / c;
        let src = self.to_vec();
        let mut out = Vec::with_capacity(times * r * c);
        for _ in 0..times {
            out.extend_from_slice(&src);
        }
        let l = self.clone();
        Ok(Tensor::new_node(
            vec![times * r, c],
            out,
            false,
            vec![self.clone()],
            Some(Box::new(move |g| {
                let mut dl = vec![0.0; r * c];
                for t in 0..times {
                    let block = &g[t * r * c..(t + 1) * r * c];
                    for (d, gi) in dl.iter_mut().zip(block) {
                        *d += gi;
                    }
                }
                l.accumulate_grad(&dl);
            })),
        ))
    }

    /// Gather rows: output row `i` is input row `indices[i]`.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Tensor, TensorError> {
        let c = self.cols();
        let r = self.numel() / c;
        for &i in indices {
            if i >= r {
                return Err(invalid(
                    "select_rows",
                    format!("row index {i} out of range for {r} rows"),
                ));
            }
        }
        let mut out = Vec::with_capacity(indices.len() * c);
        {
            let x = self.data();
            for &i in indices {
                out.extend_from_slice(&x[i * c..(i + 1) * c]);
            }
        }
        let l = self.clone();
        let idx = indices.to_vec();
        Ok(Tensor::new_node(
            vec![idx.len(), c],
            out,
            false,
            vec![self.clone()],
            Some(Box::new(move |g| {
                let mut dl = vec![0.0; r * c];
                for (o, &i) in idx.iter().enumerate() {
                    let src = &g[o * c..(o + 1) * c];
                    let dst = &mut dl[i * c..(i + 1) * c];
                    for (d, gi) in dst.iter_mut().zip(src) {
                        *d += gi;
                    }
                }
                l.accumulate_grad(&dl);
            })),
        ))
    }

    /// Overwrite the listed rows with rows of `replacement` (row `j` of
    /// the replacement goes to `rows[j]`). Gradients route to the
    /// replacement on those rows and to `self` elsewhere.
    pub fn replace_rows(
        &self,
        rows: &[usize],
        replacement: &Tensor,
    ) -> Result<Tensor, TensorError> {
        let c = self.cols();
        let r = self.numel() / c;
        if replacement.cols() != c || replacement.numel() / c != rows.len() {
            return Err(TensorError::DimensionMismatch {
                op: "replace_rows",
                lhs: vec![rows.len(), c],
                rhs: replacement.shape(),
            });
        }
        let mut seen = vec![false; r];
        for &i in rows {
            if i >= r {
                return Err(invalid(
                    "replace_rows",
                    format!("row index {i} out of range for {r} rows"),
                ));
            }
            if seen[i] {
                return Err(invalid("replace_rows", format!("duplicate row index {i}")));
            }
            seen[i] = true;
        }
        let mut out = self.to_vec();
        {
            let rep = replacement.data();
            for (j, &i) in rows.iter().enumerate() {
                out[i * c..(i + 1) * c].copy_from_slice(&rep[j * c..(j + 1) * c]);
            }
        }
        let (l, rr) = (self.clone(), replacement.clone());
        let rows_v = rows.to_vec();
        Ok(Tensor::new_node(
            vec![r, c],
            out,
            false,
            vec![self.clone(), replacement.clone()],
            Some(Box::new(move |g| {
                let mut replaced = vec![false; r];
                for &i in &rows_v {
                    replaced[i] = true;
                }
                let mut dl = vec![0.0; r * c];
                for i in 0..r {
                    if !replaced[i] {
                        dl[i * c..(i + 1) * c].copy_from_slice(&g[i * c..(i + 1) * c]);
                    }
                }
                let mut dr = vec![0.0; rows_v.len() * c];
                for (j, &i) in rows_v.iter().enumerate() {
                    dr[j * c..(j + 1) * c].copy_from_slice(&g[i * c..(i + 1) * c]);
                }
                l.accumulate_grad(&dl);
                rr.accumulate_grad(&dr);
            })),
        ))
    }
}

/// Concatenate per-image row groups from several tensors.
///
/// Every part holds `batch` equal groups of rows; the output interleaves
/// them so image `b` contributes part 0's group `b`, then part 1's group
/// `b`, and so on. With `batch == 1` this is plain row concatenation.
pub fn concat_interleaved(parts: &[&Tensor], batch: usize) -> Result<Tensor, TensorError> {
    if parts.is_empty() || batch == 0 {
        return Err(invalid("concat_interleaved", "no parts or zero batch"));
    }
    let c = parts[0].cols();
    let mut group_rows = Vec::with_capacity(parts.len());
    for p in parts {
        if p.cols() != c {
            return Err(TensorError::DimensionMismatch {
                op: "concat_interleaved",
                lhs: parts[0].shape(),
                rhs: p.shape(),
            });
        }
        let rows = p.numel() / c;
        if rows % batch != 0 {
            return Err(invalid(
                "concat_interleaved",
                format!("{rows} rows not divisible by batch {batch}"),
            ));
        }
        group_rows.push(rows / batch);
    }
    let seq: usize = group_rows.iter().sum();
    let mut out = Vec::with_capacity(batch * seq * c);
    for b in 0..batch {
        for (p, &gr) in parts.iter().zip(&group_rows) {
            let data = p.data();
            out.extend_from_slice(&data[b * gr * c..(b + 1) * gr * c]);
        }
    }
    let handles: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
    let handles_back = handles.clone();
    let group_rows_back = group_rows.clone();
    Ok(Tensor::new_node(
        vec![batch * seq, c],
        out,
        false,
        handles,
        Some(Box::new(move |g| {
            let mut offsets = Vec::with_capacity(group_rows_back.len());
            let mut acc = 0;
            for &gr in &group_rows_back {
                offsets.push(acc);
                acc += gr;
            }
            for (p, (&gr, &off)) in handles_back
                .iter()
                .zip(group_rows_back.iter().zip(&offsets))
            {
                let mut dp = vec![0.0; batch * gr * c];
                for b in 0..batch {
                    let src = &g[(b * seq + off) * c..(b * seq + off + gr) * c];
                    dp[b * gr * c..(b + 1) * gr * c].copy_from_slice(src);
                }
                p.accumulate_grad(&dp);
            }
        })),
    ))
}

// ----------------------------------------------------------------------
// Fused multi-head attention
// ----------------------------------------------------------------------

/// Geometry of a fused attention call.
#[derive(Debug, Clone, Copy)]
pub struct AttentionSpec {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    /// Logit scale (1/sqrt(head_dim) for standard attention).
    pub scale: f64,
}

/// Raw copies of one block's attention, `[batch, heads, seq, seq]`
/// row-major. `post` is the softmax output before any noise.
#[derive(Debug, Clone)]
pub struct AttentionCapture {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub post: Vec<f64>,
    pub pre: Vec<f64>,
}

impl AttentionCapture {
    /// Post-softmax attention row `i` for `(image, head)`.
    pub fn post_row(&self, image: usize, head: usize, i: usize) -> &[f64] {
        let l = self.seq;
        let base = ((image * self.heads + head) * l + i) * l;
        &self.post[base..base + l]
    }
}

/// Scaled dot-product attention over a packed `[batch*seq, 3*dim]`
/// query/key/value tensor (columns `[Q | K | V]`), one softmax per head.
///
/// `noise`, when given, is added elementwise to the post-softmax
/// attention of every head and the sum is used as-is (no
/// renormalization); its layout is `[batch, heads, seq, seq]`.
pub fn multi_head_attention(
    qkv: &Tensor,
    spec: &AttentionSpec,
    noise: Option<Vec<f64>>,
    capture: bool,
) -> Result<(Tensor, Option<AttentionCapture>), TensorError> {
    let shp = qkv.shape();
    let (b, l, h) = (spec.batch, spec.seq, spec.heads);
    if shp.len() != 2 || shp[0] != b * l || shp[1] % 3 != 0 {
        return Err(invalid(
            "attention",
            format!("qkv shape {shp:?} does not match batch {b} x seq {l}"),
        ));
    }
    let dim = shp[1] / 3;
    if dim % h != 0 {
        return Err(invalid(
            "attention",
            format!("dim {dim} not divisible by {h} heads"),
        ));
    }
    if let Some(n) = &noise {
        if n.len() != b * h * l * l {
            return Err(invalid(
                "attention",
                format!("noise length {} != {}", n.len(), b * h * l * l),
            ));
        }
    }
    let hd = dim / h;
    let w = 3 * dim;

    let mut out = vec![0.0; b * l * dim];
    let mut post = vec![0.0; b * h * l * l];
    let mut pre = if capture {
        vec![0.0; b * h * l * l]
    } else {
        Vec::new()
    };

    {
        let x = qkv.data();
        let mut qh = vec![0.0; l * hd];
        let mut kh = vec![0.0; l * hd];
        let mut vh = vec![0.0; l * hd];
        let mut s = vec![0.0; l * l];
        let mut oh = vec![0.0; l * hd];
        for bi in 0..b {
            for hi in 0..h {
                gather_head(&x, bi, hi, l, w, hd, 0, &mut qh);
                gather_head(&x, bi, hi, l, w, hd, dim, &mut kh);
                gather_head(&x, bi, hi, l, w, hd, 2 * dim, &mut vh);
                gemm_nt(l, l, hd, &qh, &kh, &mut s);
                for v in s.iter_mut() {
                    *v *= spec.scale;
                }
                let slot = (bi * h + hi) * l * l;
                if capture {
                    pre[slot..slot + l * l].copy_from_slice(&s);
                }
                let a = &mut post[slot..slot + l * l];
                softmax_rows_raw(&s, l, l, a);
                if let Some(n) = &noise {
                    let nz = &n[slot..slot + l * l];
                    for i in 0..l * l {
                        s[i] = a[i] + nz[i];
                    }
                } else {
                    s.copy_from_slice(a);
                }
                gemm(l, l, hd, &s, &vh, &mut oh);
                scatter_head(&oh, bi, hi, l, dim, hd, &mut out);
            }
        }
    }
    check_finite("attention", &out)?;

    let cap = if capture {
        Some(AttentionCapture {
            batch: b,
            seq: l,
            heads: h,
            post: post.clone(),
            pre,
        })
    } else {
        None
    };

    let qkv_h = qkv.clone();
    let scale = spec.scale;
    let back: BackFn = Box::new(move |g| {
        let mut dqkv = vec![0.0; b * l * w];
        {
            let x = qkv_h.data();
            let mut qh = vec![0.0; l * hd];
            let mut kh = vec![0.0; l * hd];
            let mut vh = vec![0.0; l * hd];
            let mut gh = vec![0.0; l * hd];
            let mut ap = vec![0.0; l * l];
            let mut dap = vec![0.0; l * l];
            let mut ds = vec![0.0; l * l];
            let mut dqh = vec![0.0; l * hd];
            let mut dkh = vec![0.0; l * hd];
            let mut dvh = vec![0.0; l * hd];
            for bi in 0..b {
                for hi in 0..h {
                    gather_head(&x, bi, hi, l, w, hd, 0, &mut qh);
                    gather_head(&x, bi, hi, l, w, hd, dim, &mut kh);
                    gather_head(&x, bi, hi, l, w, hd, 2 * dim, &mut vh);
                    gather_head(g, bi, hi, l, dim, hd, 0, &mut gh);
                    let slot = (bi * h + hi) * l * l;
                    let a = &post[slot..slot + l * l];
                    if let Some(n) = &noise {
                        let nz = &n[slot..slot + l * l];
                        for i in 0..l * l {
                            ap[i] = a[i] + nz[i];
                        }
                    } else {
                        ap.copy_from_slice(a);
                    }
                    // dV = (A+eps)^T . dOut ; d(A+eps) = dOut . V^T
                    gemm_tn(l, l, hd, &ap, &gh, &mut dvh);
                    gemm_nt(l, l, hd, &gh, &vh, &mut dap);
                    // Softmax backward on the clean A, then the logit scale.
                    softmax_backward_raw(a, &dap, l, l, &mut ds);
                    for v in ds.iter_mut() {
                        *v *= scale;
                    }
                    gemm(l, l, hd, &ds, &kh, &mut dqh);
                    gemm_tn(l, l, hd, &ds, &qh, &mut dkh);
                    scatter_head_add(&dqh, bi, hi, l, w, hd, 0, &mut dqkv);
                    scatter_head_add(&dkh, bi, hi, l, w, hd, dim, &mut dqkv);
                    scatter_head_add(&dvh, bi, hi, l, w, hd, 2 * dim, &mut dqkv);
                }
            }
        }
        qkv_h.accumulate_grad(&dqkv);
    });

    let out_t = Tensor::new_node(vec![b * l, dim], out, false, vec![qkv.clone()], Some(back));
    Ok((out_t, cap))
}

fn gather_head(
    x: &[f64],
    image: usize,
    head: usize,
    seq: usize,
    row_width: usize,
    hd: usize,
    col_offset: usize,
    out: &mut [f64],
) {
    for i in 0..seq {
        let src = (image * seq + i) * row_width + col_offset + head * hd;
        out[i * hd..(i + 1) * hd].copy_from_slice(&x[src..src + hd]);
    }
}

fn scatter_head(
    oh: &[f64],
    image: usize,
    head: usize,
    seq: usize,
    row_width: usize,
    hd: usize,
    out: &mut [f64],
) {
    for i in 0..seq {
        let dst = (image * seq + i) * row_width + head * hd;
        out[dst..dst + hd].copy_from_slice(&oh[i * hd..(i + 1) * hd]);
    }
}

fn scatter_head_add(
    oh: &[f64],
    image: usize,
    head: usize,
    seq: usize,
    row_width: usize,
    hd: usize,
    col_offset: usize,
    out: &mut [f64],
) {
    for i in 0..seq {
        let dst = (image * seq + i) * row_width + col_offset + head * hd;
        for t in 0..hd {
            out[dst + t] += oh[i * hd + t];
        }
    }
}

// ----------------------------------------------------------------------
// Raw kernels
// ----------------------------------------------------------------------

/// out = a[m,k] . b[k,n] (overwrites out).
///
/// Axpy-style with the k loop unrolled by 4: every inner statement is
/// elementwise-independent over j, so it vectorizes without reassociating
/// any reduction.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    let kb = k / 4 * 4;
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        let mut p = 0;
        while p < kb {
            let (a0, a1, a2, a3) = (arow[p], arow[p + 1], arow[p + 2], arow[p + 3]);
            let b0 = &b[p * n..p * n + n];
            let b1 = &b[(p + 1) * n..(p + 1) * n + n];
            let b2 = &b[(p + 2) * n..(p + 2) * n + n];
            let b3 = &b[(p + 3) * n..(p + 3) * n + n];
            for j in 0..n {
                orow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            p += 4;
        }
        while p < k {
            let av = arow[p];
            let brow = &b[p * n..p * n + n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
            p += 1;
        }
    }
}

/// out = a[m,k] . b[n,k]^T -> [m,n] (overwrites out).
///
/// Implemented as transpose-then-gemm: a dot-product formulation would be
/// a serial float reduction and cannot vectorize.
pub(crate) fn gemm_nt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    let mut bt = vec![0.0; k * n];
    transpose(n, k, b, &mut bt);
    gemm(m, k, n, a, &bt, out);
}

/// out = a[m,k]^T . b[m,n] -> [k,n] (overwrites out).
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    let mb = m / 4 * 4;
    let mut i = 0;
    while i < mb {
        let b0 = &b[i * n..i * n + n];
        let b1 = &b[(i + 1) * n..(i + 1) * n + n];
        let b2 = &b[(i + 2) * n..(i + 2) * n + n];
        let b3 = &b[(i + 3) * n..(i + 3) * n + n];
        for p in 0..k {
            let (a0, a1, a2, a3) = (
                a[i * k + p],
                a[(i + 1) * k + p],
                a[(i + 2) * k + p],
                a[(i + 3) * k + p],
            );
            let orow = &mut out[p * n..p * n + n];
            for j in 0..n {
                orow[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
        }
        i += 4;
    }
    while i < m {
        let brow = &b[i * n..i * n + n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..p * n + n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
        i += 1;
    }
}

/// out[j, i] = x[i, j] for x of shape [r, c].
pub(crate) fn transpose(r: usize, c: usize, x: &[f64], out: &mut [f64]) {
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
}

pub(crate) fn softmax_rows_raw(x: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * cols..(i + 1) * cols];
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - m).exp();
            *o = e;
            sum += e;
        }
        let inv = 1.0 / sum;
        for o in orow.iter_mut() {
            *o *= inv;
        }
    }
}

/// dx for y = softmax_rows(x): `dx = y * (dy - sum(dy * y))` per row.
pub(crate) fn softmax_backward_raw(y: &[f64], dy: &[f64], rows: usize, cols: usize, dx: &mut [f64]) {
    for i in 0..rows {
        let yr = &y[i * cols..(i + 1) * cols];
        let dyr = &dy[i * cols..(i + 1) * cols];
        let dot: f64 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
        let dxr = &mut dx[i * cols..(i + 1) * cols];
        for j in 0..cols {
            dxr[j] = yr[j] * (dyr[j] - dot);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn rand_tensor(shape: &[usize], rng: &mut RngStream, param: bool) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.next_range(-1.0, 1.0)).collect();
        if param {
            Tensor::param(shape, data).unwrap()
        } else {
            Tensor::from_vec(shape, data).unwrap()
        }
    }

    #[test]
    fn matmul_identity() {
        let mut rng = RngStream::new(1, "mm");
        let x = rand_tensor(&[3, 3], &mut rng, false);
        let eye = Tensor::from_vec(
            &[3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let y = eye.matmul(&x).unwrap();
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn matmul_hand_checked_2x2() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![5.0, 6.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.to_vec(), vec![17.0, 39.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = RngStream::new(2, "mm");
        let a = rand_tensor(&[4, 5], &mut rng, false);
        let b = rand_tensor(&[5, 3], &mut rng, false);
        let c = a.matmul(&b).unwrap();
        // Independent naive oracle.
        let (av, bv) = (a.to_vec(), b.to_vec());
        let mut expect = vec![0.0; 4 * 3];
        for i in 0..4 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..5 {
                    s += av[i * 5 + p] * bv[p * 3 + j];
                }
                expect[i * 3 + j] = s;
            }
        }
        for (got, want) in c.to_vec().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_backward_formula() {
        // c = a.b, loss = sum(c): dL/da = ones.b^T, dL/db = a^T.ones
        let a = Tensor::param(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::param(&[3, 2], vec![1.0, -1.0, 0.5, 2.0, -2.0, 1.0]).unwrap();
        let loss = a.matmul(&b).unwrap().sum_all();
        loss.backward().unwrap();
        let da = a.grad().unwrap();
        let db = b.grad().unwrap();
        // row sums of b: [0, 2.5, -1]
        assert_eq!(da, vec![0.0, 2.5, -1.0, 0.0, 2.5, -1.0]);
        // column sums of a: [5, 7, 9] broadcast over b's columns
        assert_eq!(db, vec![5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn softmax_uniform_and_shift_invariance() {
        let x = Tensor::from_vec(&[1, 4], vec![2.0, 2.0, 2.0, 2.0]).unwrap();
        let y = x.softmax_rows().unwrap();
        for v in y.to_vec() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let mut rng = RngStream::new(3, "sm");
        let x = rand_tensor(&[3, 5], &mut rng, false);
        let shifted = Tensor::from_vec(&[3, 5], x.to_vec().iter().map(|v| v + 7.3).collect())
            .unwrap();
        let y0 = x.softmax_rows().unwrap().to_vec();
        let y1 = shifted.softmax_rows().unwrap().to_vec();
        for (a, b) in y0.iter().zip(&y1) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form_row() {
        // [0, ln 3] -> [1/4, 3/4]
        let x = Tensor::from_vec(&[1, 2], vec![0.0, 3.0f64.ln()]).unwrap();
        let y = x.softmax_rows().unwrap().to_vec();
        assert!((y[0] - 0.25).abs() < 1e-12);
        assert!((y[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = RngStream::new(4, "sm");
        for _ in 0..20 {
            let x = rand_tensor(&[6, 9], &mut rng, false);
            let y = x.softmax_rows().unwrap();
            let v = y.to_vec();
            for i in 0..6 {
                let s: f64 = v[i * 9..(i + 1) * 9].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(v[i * 9..(i + 1) * 9].iter().all(|&p| p > 0.0 && p < 1.0));
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        for c in [2usize, 3, 7] {
            let logits = Tensor::from_vec(&[2, c], vec![0.4; 2 * c]).unwrap();
            let loss = logits.cross_entropy_mean(&[0, c - 1]).unwrap();
            assert!((loss.item() - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_huge_margin_goes_to_zero() {
        let logits = Tensor::from_vec(&[1, 3], vec![60.0, 0.0, 0.0]).unwrap();
        let loss = logits.cross_entropy_mean(&[0]).unwrap();
        assert!(loss.item() < 1e-12);
    }

    #[test]
    fn cross_entropy_matches_per_sample_oracle() {
        let mut rng = RngStream::new(5, "ce");
        let logits = rand_tensor(&[2, 3], &mut rng, false);
        let labels = [2usize, 0];
        let loss = logits.cross_entropy_mean(&labels).unwrap().item();
        // Scalar-by-scalar oracle: -log(exp(z_y)/sum exp(z_j)) averaged.
        let z = logits.to_vec();
        let mut expect = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &z[i * 3..(i + 1) * 3];
            let denom: f64 = row.iter().map(|v| v.exp()).sum();
            expect += -(row[y].exp() / denom).ln();
        }
        expect /= 2.0;
        assert!((loss - expect).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_label() {
        let logits = Tensor::zeros(&[2, 3]);
        let err = logits.cross_entropy_mean(&[0, 3]).unwrap_err();
        assert!(matches!(err, TensorError::LabelOutOfRange { label: 3, classes: 3 }));
    }

    #[test]
    fn layer_norm_constant_row_collapses_to_beta() {
        let x = Tensor::from_vec(&[2, 4], vec![5.0; 8]).unwrap();
        let gamma = Tensor::from_vec(&[4], vec![1.0; 4]).unwrap();
        let beta = Tensor::from_vec(&[4], vec![0.25, -1.0, 0.0, 2.0]).unwrap();
        let y = x.layer_norm(&gamma, &beta, 1e-6).unwrap().to_vec();
        for i in 0..2 {
            for j in 0..4 {
                assert!((y[i * 4 + j] - beta.to_vec()[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn layer_norm_statistics() {
        let mut rng = RngStream::new(6, "ln");
        let x = rand_tensor(&[5, 16], &mut rng, false);
        let gamma = Tensor::from_vec(&[16], vec![1.5; 16]).unwrap();
        let beta = Tensor::from_vec(&[16], vec![0.3; 16]).unwrap();
        let y = x.layer_norm(&gamma, &beta, 1e-10).unwrap().to_vec();
        for i in 0..5 {
            let row = &y[i * 16..(i + 1) * 16];
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
            assert!((mean - 0.3).abs() < 1e-9, "row mean should equal beta");
            assert!((var.sqrt() - 1.5).abs() < 1e-6, "row std should equal gamma");
        }
    }

    #[test]
    fn layer_norm_zero_gamma_gives_beta() {
        let mut rng = RngStream::new(7, "ln");
        let x = rand_tensor(&[3, 8], &mut rng, false);
        let gamma = Tensor::from_vec(&[8], vec![0.0; 8]).unwrap();
        let beta = Tensor::from_vec(&[8], vec![0.7; 8]).unwrap();
        let y = x.layer_norm(&gamma, &beta, 1e-6).unwrap().to_vec();
        assert!(y.iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn replace_and_select_round_trip() {
        let x = Tensor::from_vec(&[4, 2], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap();
        let rep = Tensor::from_vec(&[2, 2], vec![9.0, 9.5, 8.0, 8.5]).unwrap();
        let y = x.replace_rows(&[1, 3], &rep).unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 1.0, 9.0, 9.5, 4.0, 5.0, 8.0, 8.5]);
        let kept = y.select_rows(&[0, 2]).unwrap();
        assert_eq!(kept.to_vec(), vec![0.0, 1.0, 4.0, 5.0]);
    }

    #[test]
    fn replace_rows_gradient_routing() {
        let x = Tensor::param(&[3, 2], vec![1.0; 6]).unwrap();
        let rep = Tensor::param(&[1, 2], vec![2.0, 2.0]).unwrap();
        // loss = sum(replace(x, [1], rep) * w) with w distinct per row
        let w = Tensor::from_vec(&[3, 2], vec![1.0, 1.0, 10.0, 10.0, 100.0, 100.0]).unwrap();
        let loss = x.replace_rows(&[1], &rep).unwrap().mul(&w).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 100.0, 100.0]);
        assert_eq!(rep.grad().unwrap(), vec![10.0, 10.0]);
    }

    #[test]
    fn concat_interleaved_layout_and_grads() {
        // batch=2: part a has 1 row/img, part b has 2 rows/img
        let a = Tensor::param(&[2, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::param(&[4, 1], vec![10.0, 11.0, 20.0, 21.0]).unwrap();
        let y = concat_interleaved(&[&a, &b], 2).unwrap();
        assert_eq!(y.to_vec(), vec![1.0, 10.0, 11.0, 2.0, 20.0, 21.0]);
        let w = Tensor::from_vec(&[6, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let loss = y.mul(&w).unwrap().sum_all();
        loss.backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 4.0]);
        assert_eq!(b.grad().unwrap(), vec![2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn repeat_rows_sums_gradient() {
        let x = Tensor::param(&[2, 1], vec![3.0, 4.0]).unwrap();
        let y = x.repeat_rows(3).unwrap();
        assert_eq!(y.to_vec(), vec![3.0, 4.0, 3.0, 4.0, 3.0, 4.0]);
        let loss = y.sum_all();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![3.0, 3.0]);
    }

    #[test]
    fn mul_scalar_routes_gradient_to_scale() {
        let z = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let tau = Tensor::param(&[1], vec![0.5]).unwrap();
        let y = z.mul_scalar(&tau).unwrap();
        assert_eq!(y.to_vec(), vec![0.5, 1.0, 1.5, 2.0]);
        let loss = y.sum_all();
        loss.backward().unwrap();
        assert_eq!(tau.grad().unwrap(), vec![10.0]);
    }

    #[test]
    fn eval_mode_builds_no_graph() {
        // No inputs require grad, so the product node keeps no history.
        let a = Tensor::zeros(&[2, 2]);
        let b = Tensor::zeros(&[2, 2]);
        let c = a.matmul(&b).unwrap();
        assert!(c.0.borrow().prev.is_empty());
        assert!(c.0.borrow().backward.is_none());
    }

    #[test]
    fn backward_requires_scalar_and_single_use() {
        let x = Tensor::param(&[2, 1], vec![1.0, 2.0]).unwrap();
        let y = x.scale(2.0);
        assert!(y.backward().is_err());
        let loss = y.sum_all();
        loss.backward().unwrap();
        assert!(loss.backward().is_err(), "graph must be single-use");
    }

    #[test]
    fn diamond_graph_accumulates_once_per_path() {
        // y = x*x + x: dy/dx = 2x + 1
        let x = Tensor::param(&[1], vec![3.0]).unwrap();
        let y = x.mul(&x).unwrap().add(&x).unwrap().sum_all();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![7.0]);
    }

    #[test]
    fn non_finite_input_rejected() {
        assert!(Tensor::from_vec(&[2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::from_vec(&[1], vec![f64::INFINITY]).is_err());
        let big = Tensor::from_vec(&[1], vec![800.0]).unwrap();
        assert!(big.exp().is_err(), "exp overflow must surface");
    }

    #[test]
    fn attention_uniform_rows_for_identical_keys() {
        // Two tokens with identical keys -> every attention row [0.5, 0.5].
        let dim = 4;
        let mut qkv = vec![0.0; 2 * 3 * dim];
        for (i, row) in qkv.chunks_mut(3 * dim).enumerate() {
            for j in 0..dim {
                row[j] = (i * dim + j) as f64 * 0.1; // distinct queries
                row[dim + j] = 0.3; // identical keys
                row[2 * dim + j] = if i == 0 { 1.0 } else { 3.0 }; // values
            }
        }
        let qkv = Tensor::from_vec(&[2, 3 * dim], qkv).unwrap();
        let spec = AttentionSpec {
            batch: 1,
            seq: 2,
            heads: 2,
            scale: 1.0 / (2f64).sqrt(),
        };
        let (out, cap) = multi_head_attention(&qkv, &spec, None, true).unwrap();
        let cap = cap.unwrap();
        for h in 0..2 {
            for i in 0..2 {
                let row = cap.post_row(0, h, i);
                assert!((row[0] - 0.5).abs() < 1e-12);
                assert!((row[1] - 0.5).abs() < 1e-12);
            }
        }
        // Uniform attention -> output = mean of values = 2.0 everywhere.
        for v in out.to_vec() {
            assert!((v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = RngStream::new(8, "attn");
        let (b, l, h, dim) = (2, 5, 2, 8);
        let qkv = rand_tensor(&[b * l, 3 * dim], &mut rng, false);
        let spec = AttentionSpec {
            batch: b,
            seq: l,
            heads: h,
            scale: 0.5,
        };
        let (_, cap) = multi_head_attention(&qkv, &spec, None, true).unwrap();
        let cap = cap.unwrap();
        for bi in 0..b {
            for hi in 0..h {
                for i in 0..l {
                    let s: f64 = cap.post_row(bi, hi, i).iter().sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn attention_zero_noise_is_bitwise_identical() {
        let mut rng = RngStream::new(9, "attn");
        let (b, l, h, dim) = (2, 4, 2, 8);
        let qkv = rand_tensor(&[b * l, 3 * dim], &mut rng, false);
        let spec = AttentionSpec {
            batch: b,
            seq: l,
            heads: h,
            scale: 0.5,
        };
        let (clean, _) = multi_head_attention(&qkv, &spec, None, false).unwrap();
        let zeros = vec![0.0; b * h * l * l];
        let (noisy, _) = multi_head_attention(&qkv, &spec, Some(zeros), false).unwrap();
        assert_eq!(clean.to_vec(), noisy.to_vec());
    }
}

/// Raw kernel access for the `bench_kernels` example; not a public API.
#[doc(hidden)]
pub mod bench_kernels {
    pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
        super::gemm(m, k, n, a, b, out)
    }
    pub fn gemm_nt(m: usize, k: usize, n: usize, g: &[f64], b: &[f64], out: &mut [f64]) {
        super::gemm_nt(m, k, n, g, b, out)
    }
    pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], g: &[f64], out: &mut [f64]) {
        super::gemm_tn(m, k, n, a, g, out)
    }
}
