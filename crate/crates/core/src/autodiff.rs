//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A `Tape` records one computation as a flat list of nodes. Model
//! parameters register once as persistent leaves; every forward pass then
//! appends ephemeral nodes which `reset` discards, so parameter ids stay
//! stable across training steps. `backward` walks the nodes in reverse and
//! accumulates gradients in deterministic order; parallel sections only
//! ever split over independent output elements, so results are
//! bit-reproducible regardless of thread count.
//!
//! Shape mismatches inside ops are programmer errors and panic; fallible
//! validation belongs at the public API boundary.

use ndarray::{concatenate, ArrayD, Axis, IxDyn, Slice};
use rayon::prelude::*;
use std::rc::Rc;

pub type Arr = ArrayD<f64>;

/// Handle to one node on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type GradFn = Box<dyn Fn(&Arr, &mut GradSink<'_>)>;

struct Node {
    value: Rc<Arr>,
    grad_fn: Option<GradFn>,
    needs_grad: bool,
}

/// Accumulates gradient contributions during the backward pass.
pub struct GradSink<'a> {
    grads: &'a mut Vec<Option<Arr>>,
    needs: &'a [bool],
}

impl GradSink<'_> {
    pub fn wants(&self, v: usize) -> bool {
        self.needs[v]
    }

    pub fn add(&mut self, id: usize, g: Arr) {
        if !self.needs[id] {
            return;
        }
        let g = standardize(g);
        match &mut self.grads[id] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Like `add`, but skips computing the gradient when nobody needs it.
    pub fn add_with(&mut self, id: usize, f: impl FnOnce() -> Arr) {
        if self.needs[id] {
            let g = f();
            self.add(id, g);
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    n_persistent: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push_rc(&mut self, value: Rc<Arr>, needs_grad: bool, grad_fn: Option<GradFn>) -> Var {
        self.nodes.push(Node { value, grad_fn, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Arr, needs_grad: bool, grad_fn: Option<GradFn>) -> Var {
        self.push_rc(Rc::new(standardize(value)), needs_grad, grad_fn)
    }

    /// Register a persistent leaf (parameter or buffer). All persistent
    /// leaves must be created before the first ephemeral node.
    pub fn persistent(&mut self, value: Arr, needs_grad: bool) -> Var {
        assert_eq!(
            self.nodes.len(),
            self.n_persistent,
            "persistent leaves must be registered before any ephemeral node"
        );
        let v = self.push(value, needs_grad, None);
        self.n_persistent = self.nodes.len();
        v
    }

    /// Register an ephemeral constant (inputs, masks, targets).
    pub fn leaf(&mut self, value: Arr) -> Var {
        self.push(value, false, None)
    }

    /// Drop all ephemeral nodes, keeping persistent leaves and their ids.
    pub fn reset(&mut self) {
        self.nodes.truncate(self.n_persistent);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.nodes[v.0].value
    }

    fn rc(&self, v: Var) -> Rc<Arr> {
        Rc::clone(&self.nodes[v.0].value)
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar_value on non-scalar node");
        val.iter().next().copied().unwrap()
    }

    /// Replace a persistent leaf's value (optimizer steps, buffer updates,
    /// checkpoint restore). The shape must not change.
    pub fn set_value(&mut self, v: Var, value: Arr) {
        assert!(v.0 < self.n_persistent, "set_value on ephemeral node");
        assert_eq!(
            self.nodes[v.0].value.shape(),
            value.shape(),
            "set_value changes shape"
        );
        self.nodes[v.0].value = Rc::new(standardize(value));
    }

    /// Gradients of `loss` with respect to every node that wants one.
    /// Returns a slot per node; untouched slots are `None`.
    pub fn backward(&self, loss: Var) -> Vec<Option<Arr>> {
        let needs: Vec<bool> = self.nodes.iter().map(|n| n.needs_grad).collect();
        let mut grads: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Arr::ones(self.nodes[loss.0].value.raw_dim()));
        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad_fn.is_none() {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut sink = GradSink { grads: &mut grads, needs: &needs };
            (self.nodes[id].grad_fn.as_ref().unwrap())(&g, &mut sink);
        }
        grads
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b));
        assert_eq!(av.shape(), bv.shape(), "add shapes");
        let out = &*av + &*bv;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(ai, || g.clone());
                sink.add_with(bi, || g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b));
        assert_eq!(av.shape(), bv.shape(), "sub shapes");
        let out = &*av - &*bv;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(ai, || g.clone());
                sink.add_with(bi, || g.mapv(|v| -v));
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b));
        assert_eq!(av.shape(), bv.shape(), "mul shapes");
        let out = &*av * &*bv;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let (ai, bi) = (a.0, b.0);
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(ai, || g * &*bv);
                sink.add_with(bi, || g * &*av);
            })),
        )
    }

    /// `a * mul + add`, elementwise with scalar constants.
    pub fn affine(&mut self, a: Var, mul: f64, add: f64) -> Var {
        let av = self.rc(a);
        let out = av.mapv(|v| v * mul + add);
        let needs = self.needs_grad(a);
        let ai = a.0;
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(ai, || g.mapv(|v| v * mul));
            })),
        )
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.affine(a, factor, 0.0)
    }

    // ---- activations ----

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let out = av.mapv(|v| v.max(0.0));
        let needs = self.needs_grad(a);
        let ai = a.0;
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(ai, || {
                    let mut dg = g.clone();
                    dg.zip_mut_with(&av, |d, &x| {
                        if x <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    dg
                });
            })),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let out = Rc::new(av.mapv(f64::tanh));
        let needs = self.needs_grad(a);
        let ai = a.0;
        let saved = Rc::clone(&out);
        self.push_rc(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(ai, || {
                    let mut dg = g.clone();
                    dg.zip_mut_with(&saved, |d, &y| *d *= 1.0 - y * y);
                    dg
                });
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let out = Rc::new(av.mapv(|v| 1.0 / (1.0 + (-v).exp())));
        let needs = self.needs_grad(a);
        let ai = a.0;
        let saved = Rc::clone(&out);
        self.push_rc(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(ai, || {
                    let mut dg = g.clone();
                    dg.zip_mut_with(&saved, |d, &y| *d *= y * (1.0 - y));
                    dg
                });
            })),
        )
    }

    /// Tanh-form approximation: `0.5 x (1 + tanh(c (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, a: Var) -> Var {
        const C: f64 = 0.7978845608028654; // sqrt(2 / pi)
        const A: f64 = 0.044715;
        let av = self.rc(a);
        let out = av.mapv(|x| 0.5 * x * (1.0 + (C * (x + A * x.powi(3))).tanh()));
        let needs = self.needs_grad(a);
        let ai = a.0;
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(ai, || {
                    let mut dg = g.clone();
                    dg.zip_mut_with(&av, |d, &x| {
                        let t = (C * (x + A * x.powi(3))).tanh();
                        let du = C * (1.0 + 3.0 * A * x * x);
                        *d *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                    });
                    dg
                });
            })),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let last = av.ndim() - 1;
        let mut out = (*av).clone();
        for mut lane in out.lanes_mut(Axis(last)) {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in lane.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in lane.iter_mut() {
                *v /= sum;
            }
        }
        let out = Rc::new(out);
        let needs = self.needs_grad(a);
        let ai = a.0;
        let saved = Rc::clone(&out);
        self.push_rc(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(ai, || {
                    let mut dg = g.clone();
                    for (mut dl, yl) in dg.lanes_mut(Axis(last)).into_iter().zip(saved.lanes(Axis(last))) {
                        let dot: f64 = dl.iter().zip(yl.iter()).map(|(d, y)| d * y).sum();
                        for (d, y) in dl.iter_mut().zip(yl.iter()) {
                            *d = y * (*d - dot);
                        }
                    }
                    dg
                });
            })),
        )
    }

    // ---- linear algebra ----

    /// Multiply along the last axis: `(..., K) x (K, N) -> (..., N)`.
    pub fn matmul_last(&mut self, x: Var, w: Var) -> Var {
        let (xv, wv) = (self.rc(x), self.rc(w));
        assert_eq!(wv.ndim(), 2, "weight must be 2-d");
        let k = wv.shape()[0];
        let n = wv.shape()[1];
        assert_eq!(xv.shape()[xv.ndim() - 1], k, "matmul_last inner dim");
        let m = xv.len() / k;
        let x2 = as2(&xv, m, k);
        let w2 = as2(&wv, k, n);
        let out2 = x2.dot(&w2);
        let mut out_shape: Vec<usize> = xv.shape().to_vec();
        *out_shape.last_mut().unwrap() = n;
        let out = standardize(out2.into_dyn())
            .into_shape_with_order(IxDyn(&out_shape))
            .unwrap();
        let needs = self.needs_grad(x) || self.needs_grad(w);
        let (xi, wi) = (x.0, w.0);
        let x_shape: Vec<usize> = xv.shape().to_vec();
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                let g2 = as2(g, m, n);
                sink.add_with(xi, || {
                    let w2 = as2(&wv, k, n);
                    standardize(g2.dot(&w2.t()).into_dyn())
                        .into_shape_with_order(IxDyn(&x_shape))
                        .unwrap()
                });
                sink.add_with(wi, || {
                    let x2 = as2(&xv, m, k);
                    x2.t().dot(&g2).into_dyn()
                });
            })),
        )
    }

    /// Batched matrix product `(B, M, K) x (B, K, N) -> (B, M, N)`; with
    /// `transpose_b` the second operand is `(B, N, K)`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b));
        assert_eq!(av.ndim(), 3);
        assert_eq!(bv.ndim(), 3);
        let (bt, m, ka) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (n, kb) = if transpose_b {
            (bv.shape()[1], bv.shape()[2])
        } else {
            (bv.shape()[2], bv.shape()[1])
        };
        assert_eq!(bv.shape()[0], bt, "batch dims");
        assert_eq!(ka, kb, "inner dims");
        let mut out = Arr::zeros(IxDyn(&[bt, m, n]));
        for i in 0..bt {
            let ai2 = index3(&av, i);
            let bi2 = index3(&bv, i);
            let prod = if transpose_b {
                ai2.dot(&bi2.t())
            } else {
                ai2.dot(&bi2)
            };
            out.index_axis_mut(Axis(0), i)
                .assign(&prod.into_dimensionality::<ndarray::Ix2>().unwrap());
        }
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let (aid, bid) = (a.0, b.0);
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(aid, || {
                    let mut da = Arr::zeros(av.raw_dim());
                    for i in 0..bt {
                        let gi = index3(g, i);
                        let bi2 = index3(&bv, i);
                        let d = if transpose_b { gi.dot(&bi2) } else { gi.dot(&bi2.t()) };
                        da.index_axis_mut(Axis(0), i)
                            .assign(&d.into_dimensionality::<ndarray::Ix2>().unwrap());
                    }
                    da
                });
                sink.add_with(bid, || {
                    let mut db = Arr::zeros(bv.raw_dim());
                    for i in 0..bt {
                        let gi = index3(g, i);
                        let ai2 = index3(&av, i);
                        let d = if transpose_b { gi.t().dot(&ai2) } else { ai2.t().dot(&gi) };
                        db.index_axis_mut(Axis(0), i)
                            .assign(&d.into_dimensionality::<ndarray::Ix2>().unwrap());
                    }
                    db
                });
            })),
        )
    }

    // ---- bias and broadcasting ----

    /// Add a bias vector over the last axis.
    pub fn add_bias_last(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.rc(x), self.rc(b));
        assert_eq!(bv.ndim(), 1);
        let d = bv.len();
        assert_eq!(xv.shape()[xv.ndim() - 1], d, "bias length");
        let mut out = (*xv).clone();
        for mut lane in out.lanes_mut(Axis(xv.ndim() - 1)) {
            for (o, bb) in lane.iter_mut().zip(bv.iter()) {
                *o += bb;
            }
        }
        let needs = self.needs_grad(x) || self.needs_grad(b);
        let (xi, bi) = (x.0, b.0);
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(xi, || g.clone());
                sink.add_with(bi, || {
                    let last = g.ndim() - 1;
                    let mut db = Arr::zeros(IxDyn(&[d]));
                    for lane in g.lanes(Axis(last)) {
                        for (acc, gg) in db.iter_mut().zip(lane.iter()) {
                            *acc += gg;
                        }
                    }
                    db
                });
            })),
        )
    }

    /// Add a per-channel bias to a `(N, C, H, W)` tensor.
    pub fn add_bias_chan(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.rc(x), self.rc(b));
        assert_eq!(xv.ndim(), 4);
        let c = xv.shape()[1];
        assert_eq!(bv.len(), c, "channel bias length");
        let mut out = (*xv).clone();
        for (ch, bb) in (0..c).zip(bv.iter()) {
            out.index_axis_mut(Axis(1), ch).mapv_inplace(|v| v + bb);
        }
        let needs = self.needs_grad(x) || self.needs_grad(b);
        let (xi, bi) = (x.0, b.0);
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(xi, || g.clone());
                sink.add_with(bi, || {
                    let mut db = Arr::zeros(IxDyn(&[c]));
                    for ch in 0..c {
                        db[[ch]] = g.index_axis(Axis(1), ch).sum();
                    }
                    db
                });
            })),
        )
    }

    // ---- convolution ----

    /// Grouped 2-d convolution with same padding (odd kernels only).
    /// `x: (N, C_in, H, W)`, `w: (C_out, C_in/groups, kh, kw)`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, groups: usize) -> Var {
        let (xv, wv) = (self.rc(x), self.rc(w));
        let bv = bias.map(|b| self.rc(b));
        let out = conv2d_forward(&xv, &wv, bv.as_deref(), groups);
        let needs =
            self.needs_grad(x) || self.needs_grad(w) || bias.map_or(false, |b| self.needs_grad(b));
        let (xi, wi) = (x.0, w.0);
        let bi = bias.map(|b| b.0);
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(xi, || conv2d_backward_x(&xv, &wv, g, groups));
                sink.add_with(wi, || conv2d_backward_w(&xv, &wv, g, groups));
                if let Some(bi) = bi {
                    sink.add_with(bi, || {
                        let cout = wv.shape()[0];
                        let mut db = Arr::zeros(IxDyn(&[cout]));
                        for co in 0..cout {
                            db[[co]] = g.index_axis(Axis(1), co).sum();
                        }
                        db
                    });
                }
            })),
        )
    }

    // ---- normalization ----

    /// Batch normalization over `(N, H, W)` per channel using the batch's
    /// own statistics. Returns the output plus (mean, biased variance) for
    /// running-buffer updates.
    pub fn batch_norm2d(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, Arr, Arr) {
        let (xv, gv, bv) = (self.rc(x), self.rc(gamma), self.rc(beta));
        assert_eq!(xv.ndim(), 4);
        let c = xv.shape()[1];
        assert_eq!(gv.len(), c);
        assert_eq!(bv.len(), c);
        let m = (xv.len() / c) as f64;
        let mut mean = Arr::zeros(IxDyn(&[c]));
        let mut var = Arr::zeros(IxDyn(&[c]));
        for ch in 0..c {
            let lane = xv.index_axis(Axis(1), ch);
            let mu = lane.sum() / m;
            let v = lane.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / m;
            mean[[ch]] = mu;
            var[[ch]] = v;
        }
        let mut xhat = (*xv).clone();
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let istd = 1.0 / (var[[ch]] + eps).sqrt();
            inv_std[ch] = istd;
            let mu = mean[[ch]];
            xhat.index_axis_mut(Axis(1), ch)
                .mapv_inplace(|v| (v - mu) * istd);
        }
        let xhat = Rc::new(xhat);
        let mut out = (*xhat).clone();
        for ch in 0..c {
            let (ga, be) = (gv[[ch]], bv[[ch]]);
            out.index_axis_mut(Axis(1), ch).mapv_inplace(|v| v * ga + be);
        }
        let needs = self.needs_grad(x) || self.needs_grad(gamma) || self.needs_grad(beta);
        let (xi, gi, bi) = (x.0, gamma.0, beta.0);
        let xhat_b = Rc::clone(&xhat);
        let node = self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(bi, || {
                    let mut db = Arr::zeros(IxDyn(&[c]));
                    for ch in 0..c {
                        db[[ch]] = g.index_axis(Axis(1), ch).sum();
                    }
                    db
                });
                sink.add_with(gi, || {
                    let mut dg = Arr::zeros(IxDyn(&[c]));
                    for ch in 0..c {
                        dg[[ch]] = g
                            .index_axis(Axis(1), ch)
                            .iter()
                            .zip(xhat_b.index_axis(Axis(1), ch).iter())
                            .map(|(a, b)| a * b)
                            .sum();
                    }
                    dg
                });
                sink.add_with(xi, || {
                    let mut dx = g.clone();
                    for ch in 0..c {
                        let gl = g.index_axis(Axis(1), ch);
                        let xl = xhat_b.index_axis(Axis(1), ch);
                        let sum_g: f64 = gl.sum();
                        let sum_gx: f64 = gl.iter().zip(xl.iter()).map(|(a, b)| a * b).sum();
                        let ga = gv[[ch]];
                        let istd = inv_std[ch];
                        let mut dl = dx.index_axis_mut(Axis(1), ch);
                        for (d, &xh) in dl.iter_mut().zip(xl.iter()) {
                            *d = ga * istd * (*d - sum_g / m - xh * sum_gx / m);
                        }
                    }
                    dx
                });
            })),
        );
        (node, mean, var)
    }

    /// Batch normalization with frozen statistics (inference mode).
    pub fn batch_norm2d_frozen(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Arr,
        var: &Arr,
        eps: f64,
    ) -> Var {
        let (xv, gv, bv) = (self.rc(x), self.rc(gamma), self.rc(beta));
        assert_eq!(xv.ndim(), 4);
        let c = xv.shape()[1];
        let mut xhat = (*xv).clone();
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let istd = 1.0 / (var[[ch]] + eps).sqrt();
            inv_std[ch] = istd;
            let mu = mean[[ch]];
            xhat.index_axis_mut(Axis(1), ch)
                .mapv_inplace(|v| (v - mu) * istd);
        }
        let xhat = Rc::new(xhat);
        let mut out = (*xhat).clone();
        for ch in 0..c {
            let (ga, be) = (gv[[ch]], bv[[ch]]);
            out.index_axis_mut(Axis(1), ch).mapv_inplace(|v| v * ga + be);
        }
        let needs = self.needs_grad(x) || self.needs_grad(gamma) || self.needs_grad(beta);
        let (xi, gi, bi) = (x.0, gamma.0, beta.0);
        let xhat_b = Rc::clone(&xhat);
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(bi, || {
                    let mut db = Arr::zeros(IxDyn(&[c]));
                    for ch in 0..c {
                        db[[ch]] = g.index_axis(Axis(1), ch).sum();
                    }
                    db
                });
                sink.add_with(gi, || {
                    let mut dg = Arr::zeros(IxDyn(&[c]));
                    for ch in 0..c {
                        dg[[ch]] = g
                            .index_axis(Axis(1), ch)
                            .iter()
                            .zip(xhat_b.index_axis(Axis(1), ch).iter())
                            .map(|(a, b)| a * b)
                            .sum();
                    }
                    dg
                });
                sink.add_with(xi, || {
                    let mut dx = g.clone();
                    for ch in 0..c {
                        let scale = gv[[ch]] * inv_std[ch];
                        dx.index_axis_mut(Axis(1), ch).mapv_inplace(|v| v * scale);
                    }
                    dx
                });
            })),
        )
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (xv, gv, bv) = (self.rc(x), self.rc(gamma), self.rc(beta));
        let last = xv.ndim() - 1;
        let d = xv.shape()[last];
        assert_eq!(gv.len(), d);
        assert_eq!(bv.len(), d);
        let mut xhat = (*xv).clone();
        let mut inv_stds = Vec::with_capacity(xv.len() / d);
        for mut lane in xhat.lanes_mut(Axis(last)) {
            let mu = lane.sum() / d as f64;
            let var = lane.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_stds.push(istd);
            for v in lane.iter_mut() {
                *v = (*v - mu) * istd;
            }
        }
        let xhat = Rc::new(xhat);
        let mut out = (*xhat).clone();
        for mut lane in out.lanes_mut(Axis(last)) {
            for ((o, ga), be) in lane.iter_mut().zip(gv.iter()).zip(bv.iter()) {
                *o = *o * ga + be;
            }
        }
        let needs = self.needs_grad(x) || self.needs_grad(gamma) || self.needs_grad(beta);
        let (xi, gi, bi) = (x.0, gamma.0, beta.0);
        let xhat_b = Rc::clone(&xhat);
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(bi, || {
                    let mut db = Arr::zeros(IxDyn(&[d]));
                    for lane in g.lanes(Axis(last)) {
                        for (acc, gg) in db.iter_mut().zip(lane.iter()) {
                            *acc += gg;
                        }
                    }
                    db
                });
                sink.add_with(gi, || {
                    let mut dga = Arr::zeros(IxDyn(&[d]));
                    for (gl, xl) in g.lanes(Axis(last)).into_iter().zip(xhat_b.lanes(Axis(last))) {
                        for ((acc, gg), xh) in dga.iter_mut().zip(gl.iter()).zip(xl.iter()) {
                            *acc += gg * xh;
                        }
                    }
                    dga
                });
                sink.add_with(xi, || {
                    let mut dx = g.clone();
                    for ((mut dl, xl), istd) in dx
                        .lanes_mut(Axis(last))
                        .into_iter()
                        .zip(xhat_b.lanes(Axis(last)))
                        .zip(inv_stds.iter())
                    {
                        let dn = d as f64;
                        let mut sum_h = 0.0;
                        let mut sum_hx = 0.0;
                        for ((dd, ga), xh) in dl.iter().zip(gv.iter()).zip(xl.iter()) {
                            let h = dd * ga;
                            sum_h += h;
                            sum_hx += h * xh;
                        }
                        for ((dd, ga), xh) in dl.iter_mut().zip(gv.iter()).zip(xl.iter()) {
                            let h = *dd * ga;
                            *dd = istd * (h - sum_h / dn - xh * sum_hx / dn);
                        }
                    }
                    dx
                });
            })),
        )
    }

    // ---- pooling and gating ----

    /// Mean over the spatial axes: `(N, C, H, W) -> (N, C)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.rc(x);
        assert_eq!(xv.ndim(), 4);
        let (n, c, h, w) = dims4(&xv);
        let hw = (h * w) as f64;
        let mut out = Arr::zeros(IxDyn(&[n, c]));
        for i in 0..n {
            for ch in 0..c {
                out[[i, ch]] = xv
                    .index_axis(Axis(0), i)
                    .index_axis(Axis(0), ch)
                    .sum()
                    / hw;
            }
        }
        let needs = self.needs_grad(x);
        let xi = x.0;
        let shape: Vec<usize> = xv.shape().to_vec();
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(xi, || {
                    let mut dx = Arr::zeros(IxDyn(&shape));
                    for i in 0..n {
                        for ch in 0..c {
                            let gv = g[[i, ch]] / hw;
                            dx.index_axis_mut(Axis(0), i)
                                .index_axis_mut(Axis(0), ch)
                                .fill(gv);
                        }
                    }
                    dx
                });
            })),
        )
    }

    /// Multiply each `(H, W)` plane of `x: (N, C, H, W)` by `gate[n, c]`.
    pub fn mul_chan_gate(&mut self, x: Var, gate: Var) -> Var {
        let (xv, gv) = (self.rc(x), self.rc(gate));
        assert_eq!(xv.ndim(), 4);
        let (n, c, _, _) = dims4(&xv);
        assert_eq!(gv.shape(), &[n, c], "gate shape");
        let mut out = (*xv).clone();
        for i in 0..n {
            for ch in 0..c {
                let gval = gv[[i, ch]];
                out.index_axis_mut(Axis(0), i)
                    .index_axis_mut(Axis(0), ch)
                    .mapv_inplace(|v| v * gval);
            }
        }
        let needs = self.needs_grad(x) || self.needs_grad(gate);
        let (xi, gi) = (x.0, gate.0);
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(xi, || {
                    let mut dx = g.clone();
                    for i in 0..n {
                        for ch in 0..c {
                            let gval = gv[[i, ch]];
                            dx.index_axis_mut(Axis(0), i)
                                .index_axis_mut(Axis(0), ch)
                                .mapv_inplace(|v| v * gval);
                        }
                    }
                    dx
                });
                sink.add_with(gi, || {
                    let mut dg = Arr::zeros(IxDyn(&[n, c]));
                    for i in 0..n {
                        for ch in 0..c {
                            dg[[i, ch]] = g
                                .index_axis(Axis(0), i)
                                .index_axis(Axis(0), ch)
                                .iter()
                                .zip(xv.index_axis(Axis(0), i).index_axis(Axis(0), ch).iter())
                                .map(|(a, b)| a * b)
                                .sum();
                        }
                    }
                    dg
                });
            })),
        )
    }

    // ---- shape manipulation ----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let xv = self.rc(x);
        assert_eq!(xv.len(), shape.iter().product::<usize>(), "reshape size");
        let out = xv
            .view()
            .into_shape_with_order(IxDyn(shape))
            .unwrap()
            .to_owned();
        let needs = self.needs_grad(x);
        let xi = x.0;
        let old_shape: Vec<usize> = xv.shape().to_vec();
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(xi, || {
                    g.view()
                        .into_shape_with_order(IxDyn(&old_shape))
                        .unwrap()
                        .to_owned()
                });
            })),
        )
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let xv = self.rc(x);
        assert_eq!(axes.len(), xv.ndim(), "permute rank");
        let out = xv
            .view()
            .permuted_axes(axes.to_vec())
            .as_standard_layout()
            .to_owned();
        let needs = self.needs_grad(x);
        let xi = x.0;
        let mut inverse = vec![0usize; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(xi, || {
                    g.view()
                        .permuted_axes(inverse.clone())
                        .as_standard_layout()
                        .to_owned()
                });
            })),
        )
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b));
        let out = concatenate(Axis(axis), &[av.view(), bv.view()]).unwrap();
        let needs = self.needs_grad(a) || self.needs_grad(b);
        let (ai, bi) = (a.0, b.0);
        let split = av.shape()[axis];
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(ai, || {
                    g.slice_axis(Axis(axis), Slice::from(0..split)).to_owned()
                });
                sink.add_with(bi, || {
                    g.slice_axis(Axis(axis), Slice::from(split..)).to_owned()
                });
            })),
        )
    }

    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let xv = self.rc(x);
        let out = xv
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let needs = self.needs_grad(x);
        let xi = x.0;
        let shape: Vec<usize> = xv.shape().to_vec();
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(xi, || {
                    let mut dx = Arr::zeros(IxDyn(&shape));
                    dx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                        .assign(g);
                    dx
                });
            })),
        )
    }

    // ---- reductions ----

    /// Sum everything except the leading axis: `(N, ...) -> (N,)`.
    pub fn sum_to_batch(&mut self, x: Var) -> Var {
        let xv = self.rc(x);
        let n = xv.shape()[0];
        let mut out = Arr::zeros(IxDyn(&[n]));
        for i in 0..n {
            out[[i]] = xv.index_axis(Axis(0), i).sum();
        }
        let needs = self.needs_grad(x);
        let xi = x.0;
        let shape: Vec<usize> = xv.shape().to_vec();
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(xi, || {
                    let mut dx = Arr::zeros(IxDyn(&shape));
                    for i in 0..n {
                        dx.index_axis_mut(Axis(0), i).fill(g[[i]]);
                    }
                    dx
                });
            })),
        )
    }

    /// Sum every element into a single-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let xv = self.rc(x);
        let out = Arr::from_elem(IxDyn(&[1]), xv.sum());
        let needs = self.needs_grad(x);
        let xi = x.0;
        let shape: Vec<usize> = xv.shape().to_vec();
        self.push(
            out,
            needs,
            Some(Box::new(move |g, sink| {
                sink.add_with(xi, || Arr::from_elem(IxDyn(&shape), g[[0]]));
            })),
        )
    }
}

/// Force row-major contiguous storage; a no-op for arrays already in it.
fn standardize(a: Arr) -> Arr {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

fn as2(a: &Arr, m: usize, k: usize) -> ndarray::ArrayView2<'_, f64> {
    a.view()
        .into_shape_with_order((m, k))
        .expect("contiguous standard-layout tensor")
}

fn index3(a: &Arr, i: usize) -> ndarray::ArrayView2<'_, f64> {
    a.index_axis(Axis(0), i)
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
}

fn dims4(a: &Arr) -> (usize, usize, usize, usize) {
    let s = a.shape();
    (s[0], s[1], s[2], s[3])
}

fn conv_dims(x: &Arr, w: &Arr, groups: usize) -> (usize, usize, usize, usize, usize, usize, usize, usize) {
    let (n, cin, h, wd) = dims4(x);
    let (cout, cing, kh, kw) = dims4(w);
    assert_eq!(cin % groups, 0, "input channels divisible by groups");
    assert_eq!(cout % groups, 0, "output channels divisible by groups");
    assert_eq!(cing, cin / groups, "kernel input-channel slice");
    assert_eq!(kh % 2, 1, "odd kernel height");
    assert_eq!(kw % 2, 1, "odd kernel width");
    (n, cin, h, wd, cout, cing, kh, kw)
}

thread_local! {
    static SEQUENTIAL: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
}

/// While alive, kernels launched from this thread stay on it instead of
/// fanning out to the worker pool; used for stable latency measurement.
/// Restores the previous mode on drop.
pub struct SequentialGuard {
    prev: bool,
}

pub fn sequential_mode_guard() -> SequentialGuard {
    let prev = SEQUENTIAL.with(|s| s.replace(true));
    SequentialGuard { prev }
}

impl Drop for SequentialGuard {
    fn drop(&mut self) {
        let prev = self.prev;
        SEQUENTIAL.with(|s| s.set(prev));
    }
}

fn for_chunks_mut<F>(data: &mut [f64], chunk: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Send + Sync,
{
    if SEQUENTIAL.with(|s| s.get()) {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

fn conv2d_forward(x: &Arr, w: &Arr, bias: Option<&Arr>, groups: usize) -> Arr {
    let (n, cin, h, wd, cout, cing, kh, kw) = conv_dims(x, w, groups);
    let (ph, pw) = (kh / 2, kw / 2);
    let cpg = cout / groups;
    let xs = x.as_slice().expect("standard layout");
    let ws = w.as_slice().expect("standard layout");
    let mut out = vec![0.0; n * cout * h * wd];
    for_chunks_mut(&mut out, cout * h * wd, |ni, on| {
        for co in 0..cout {
            let ci0 = (co / cpg) * cing;
            let b = bias.map_or(0.0, |b| b[[co]]);
            for y in 0..h {
                for xw in 0..wd {
                    let mut acc = b;
                    for cil in 0..cing {
                        let ci = ci0 + cil;
                        for dy in 0..kh {
                            let sy = y as isize + dy as isize - ph as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let xbase = ((ni * cin + ci) * h + sy as usize) * wd;
                            let wbase = ((co * cing + cil) * kh + dy) * kw;
                            for dx in 0..kw {
                                let sx = xw as isize + dx as isize - pw as isize;
                                if sx < 0 || sx >= wd as isize {
                                    continue;
                                }
                                acc += xs[xbase + sx as usize] * ws[wbase + dx];
                            }
                        }
                    }
                    on[(co * h + y) * wd + xw] = acc;
                }
            }
        }
    });
    Arr::from_shape_vec(IxDyn(&[n, cout, h, wd]), out).unwrap()
}

fn conv2d_backward_x(x: &Arr, w: &Arr, g: &Arr, groups: usize) -> Arr {
    let (n, cin, h, wd, cout, cing, kh, kw) = conv_dims(x, w, groups);
    let (ph, pw) = (kh / 2, kw / 2);
    let cpg = cout / groups;
    let ws = w.as_slice().expect("standard layout");
    let gs = g.as_slice().expect("standard layout");
    let mut dx = vec![0.0; n * cin * h * wd];
    for_chunks_mut(&mut dx, cin * h * wd, |ni, dn| {
        for ci in 0..cin {
            let gi = ci / cing;
            let cil = ci - gi * cing;
            for sy in 0..h {
                for sx in 0..wd {
                    let mut acc = 0.0;
                    for cop in 0..cpg {
                        let co = gi * cpg + cop;
                        for dy in 0..kh {
                            let y = sy as isize - dy as isize + ph as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            let gbase = ((ni * cout + co) * h + y as usize) * wd;
                            let wbase = ((co * cing + cil) * kh + dy) * kw;
                            for dxk in 0..kw {
                                let xcol = sx as isize - dxk as isize + pw as isize;
                                if xcol < 0 || xcol >= wd as isize {
                                    continue;
                                }
                                acc += gs[gbase + xcol as usize] * ws[wbase + dxk];
                            }
                        }
                    }
                    dn[(ci * h + sy) * wd + sx] = acc;
                }
            }
        }
    });
    Arr::from_shape_vec(IxDyn(&[n, cin, h, wd]), dx).unwrap()
}

fn conv2d_backward_w(x: &Arr, w: &Arr, g: &Arr, groups: usize) -> Arr {
    let (n, cin, h, wd, cout, cing, kh, kw) = conv_dims(x, w, groups);
    let (ph, pw) = (kh / 2, kw / 2);
    let cpg = cout / groups;
    let xs = x.as_slice().expect("standard layout");
    let gs = g.as_slice().expect("standard layout");
    let mut dw = vec![0.0; cout * cing * kh * kw];
    for_chunks_mut(&mut dw, cing * kh * kw, |co, dc| {
        let ci0 = (co / cpg) * cing;
        for cil in 0..cing {
            let ci = ci0 + cil;
            for dy in 0..kh {
                for dxk in 0..kw {
                    let mut acc = 0.0;
                    for ni in 0..n {
                        for y in 0..h {
                            let sy = y as isize + dy as isize - ph as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let gbase = ((ni * cout + co) * h + y) * wd;
                            let xbase = ((ni * cin + ci) * h + sy as usize) * wd;
                            for xw in 0..wd {
                                let sx = xw as isize + dxk as isize - pw as isize;
                                if sx < 0 || sx >= wd as isize {
                                    continue;
                                }
                                acc += gs[gbase + xw] * xs[xbase + sx as usize];
                            }
                        }
                    }
                    dc[(cil * kh + dy) * kw + dxk] = acc;
                }
            }
        }
    });
    Arr::from_shape_vec(IxDyn(&[cout, cing, kh, kw]), dw).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_arr(shape: &[usize], seed: u64) -> Arr {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Arr::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of d(weighted sum of output)/d(inputs).
    fn check_grads(
        inputs: &[Arr],
        build: impl Fn(&mut Tape, &[Var]) -> Var,
        tol: f64,
    ) {
        let run = |vals: &[Arr]| -> (f64, Vec<Arr>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals
                .iter()
                .map(|v| tape.persistent(v.clone(), true))
                .collect();
            let out = build(&mut tape, &vars);
            let weights = random_arr(tape.value(out).shape(), 999);
            let wleaf = tape.leaf(weights);
            let prod = tape.mul(out, wleaf);
            let loss = tape.sum_all(prod);
            let grads = tape.backward(loss);
            let loss_val = tape.scalar_value(loss);
            let input_grads: Vec<Arr> = vars
                .iter()
                .map(|v| grads[v.index()].clone().unwrap_or_else(|| {
                    Arr::zeros(tape.value(*v).raw_dim())
                }))
                .collect();
            (loss_val, input_grads)
        };

        let (_, analytic) = run(inputs);
        let h = 1e-6;
        for (i, input) in inputs.iter().enumerate() {
            let mut numeric = Arr::zeros(input.raw_dim());
            for idx in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[i].as_slice_mut().unwrap()[idx] += h;
                let mut minus = inputs.to_vec();
                minus[i].as_slice_mut().unwrap()[idx] -= h;
                let (lp, _) = run(&plus);
                let (lm, _) = run(&minus);
                numeric.as_slice_mut().unwrap()[idx] = (lp - lm) / (2.0 * h);
            }
            let diff = (&analytic[i] - &numeric).mapv(f64::abs).sum();
            let scale = analytic[i].mapv(f64::abs).sum() + numeric.mapv(f64::abs).sum();
            let rel = if scale == 0.0 { 0.0 } else { diff / scale };
            assert!(
                rel < tol,
                "input {i}: relative gradient error {rel:e} exceeds {tol:e}"
            );
        }
    }

    #[test]
    fn elementwise_op_gradients() {
        let a = random_arr(&[3, 4], 1);
        let b = random_arr(&[3, 4], 2);
        check_grads(&[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]), 1e-7);
        check_grads(&[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]), 1e-7);
        check_grads(&[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]), 1e-7);
        check_grads(&[a.clone()], |t, v| t.affine(v[0], -2.5, 0.7), 1e-7);
    }

    #[test]
    fn activation_gradients() {
        let x = random_arr(&[2, 5], 3) * 2.0;
        check_grads(&[x.clone()], |t, v| t.relu(v[0]), 1e-6);
        check_grads(&[x.clone()], |t, v| t.tanh(v[0]), 1e-7);
        check_grads(&[x.clone()], |t, v| t.sigmoid(v[0]), 1e-7);
        check_grads(&[x.clone()], |t, v| t.gelu(v[0]), 1e-7);
        check_grads(&[x.clone()], |t, v| t.softmax_last(v[0]), 1e-6);
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let x = random_arr(&[4, 7], 5) * 3.0;
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let y = tape.softmax_last(xv);
        for lane in tape.value(y).lanes(Axis(1)) {
            let sum: f64 = lane.sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(lane.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn matmul_gradients() {
        let x = random_arr(&[2, 3, 4], 6);
        let w = random_arr(&[4, 5], 7);
        check_grads(&[x, w], |t, v| t.matmul_last(v[0], v[1]), 1e-7);

        let a = random_arr(&[3, 2, 4], 8);
        let b = random_arr(&[3, 4, 5], 9);
        check_grads(&[a.clone(), b], |t, v| t.batch_matmul(v[0], v[1], false), 1e-7);
        let bt = random_arr(&[3, 5, 4], 10);
        check_grads(&[a, bt], |t, v| t.batch_matmul(v[0], v[1], true), 1e-7);
    }

    #[test]
    fn matmul_last_matches_hand_product() {
        let mut tape = Tape::new();
        let x = tape.leaf(Arr::from_shape_vec(IxDyn(&[2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = tape.leaf(Arr::from_shape_vec(IxDyn(&[2, 2]), vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let y = tape.matmul_last(x, w);
        let expect = [19.0, 22.0, 43.0, 50.0];
        for (got, want) in tape.value(y).iter().zip(expect.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn bias_gradients() {
        let x = random_arr(&[3, 4], 11);
        let b = random_arr(&[4], 12);
        check_grads(&[x, b], |t, v| t.add_bias_last(v[0], v[1]), 1e-7);

        let x4 = random_arr(&[2, 3, 2, 2], 13);
        let bc = random_arr(&[3], 14);
        check_grads(&[x4, bc], |t, v| t.add_bias_chan(v[0], v[1]), 1e-7);
    }

    #[test]
    fn conv2d_gradients_across_grouping() {
        let x = random_arr(&[2, 4, 3, 3], 15);
        let w1 = random_arr(&[4, 4, 3, 3], 16);
        let b = random_arr(&[4], 17);
        check_grads(&[x.clone(), w1, b.clone()], |t, v| {
            t.conv2d(v[0], v[1], Some(v[2]), 1)
        }, 1e-6);

        let wg = random_arr(&[4, 2, 3, 3], 18);
        check_grads(&[x.clone(), wg], |t, v| t.conv2d(v[0], v[1], None, 2), 1e-6);

        let wd = random_arr(&[4, 1, 3, 3], 19);
        check_grads(&[x, wd, b], |t, v| t.conv2d(v[0], v[1], Some(v[2]), 4), 1e-6);
    }

    #[test]
    fn conv2d_identity_kernel_preserves_input() {
        let x = random_arr(&[1, 2, 4, 4], 20);
        let mut w = Arr::zeros(IxDyn(&[2, 2, 3, 3]));
        w[[0, 0, 1, 1]] = 1.0;
        w[[1, 1, 1, 1]] = 1.0;
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let wv = tape.leaf(w);
        let y = tape.conv2d(xv, wv, None, 1);
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn norm_layer_gradients() {
        let x = random_arr(&[3, 2, 2, 2], 21);
        let gamma = random_arr(&[2], 22) + 1.5;
        let beta = random_arr(&[2], 23);
        check_grads(&[x.clone(), gamma.clone(), beta.clone()], |t, v| {
            t.batch_norm2d(v[0], v[1], v[2], 1e-5).0
        }, 1e-5);

        let mean = random_arr(&[2], 24);
        let var = random_arr(&[2], 25).mapv(f64::abs) + 0.5;
        check_grads(&[x.clone(), gamma.clone(), beta.clone()], |t, v| {
            t.batch_norm2d_frozen(v[0], v[1], v[2], &mean, &var, 1e-5)
        }, 1e-6);

        let x2 = random_arr(&[4, 6], 26);
        let g2 = random_arr(&[6], 27) + 1.5;
        let b2 = random_arr(&[6], 28);
        check_grads(&[x2, g2, b2], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5), 1e-5);
    }

    #[test]
    fn batch_norm_standardizes_each_channel() {
        let x = random_arr(&[8, 3, 4, 4], 29) * 3.0 + 1.0;
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let gamma = tape.leaf(Arr::ones(IxDyn(&[3])));
        let beta = tape.leaf(Arr::zeros(IxDyn(&[3])));
        let (y, mean, var) = tape.batch_norm2d(xv, gamma, beta, 1e-8);
        for ch in 0..3 {
            let lane = tape.value(y).index_axis(Axis(1), ch).to_owned();
            let m = lane.mean().unwrap();
            let v = lane.mapv(|a| a * a).mean().unwrap();
            assert!(m.abs() < 1e-10);
            assert!((v - 1.0).abs() < 1e-6);
            assert!(mean[[ch]].is_finite() && var[[ch]] > 0.0);
        }
    }

    #[test]
    fn pool_gate_and_shape_gradients() {
        let x = random_arr(&[2, 3, 2, 2], 30);
        check_grads(&[x.clone()], |t, v| t.global_avg_pool(v[0]), 1e-7);

        let gate = random_arr(&[2, 3], 31);
        check_grads(&[x.clone(), gate], |t, v| t.mul_chan_gate(v[0], v[1]), 1e-7);

        check_grads(&[x.clone()], |t, v| t.reshape(v[0], &[2, 12]), 1e-7);
        check_grads(&[x.clone()], |t, v| t.permute(v[0], &[2, 0, 3, 1]), 1e-7);

        let b = random_arr(&[2, 5, 2, 2], 32);
        check_grads(&[x.clone(), b], |t, v| t.concat(v[0], v[1], 1), 1e-7);
        check_grads(&[x.clone()], |t, v| t.slice_axis(v[0], 1, 1, 2), 1e-7);

        check_grads(&[x.clone()], |t, v| t.sum_to_batch(v[0]), 1e-7);
        check_grads(&[x], |t, v| t.sum_all(v[0]), 1e-7);
    }

    #[test]
    fn permute_then_inverse_restores_layout() {
        let x = random_arr(&[2, 3, 4], 33);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let p = tape.permute(xv, &[1, 2, 0]);
        let back = tape.permute(p, &[2, 0, 1]);
        assert_eq!(tape.value(back), &x);
    }

    #[test]
    fn reset_keeps_persistent_ids_stable() {
        let mut tape = Tape::new();
        let w = tape.persistent(random_arr(&[3, 3], 34), true);
        let b = tape.persistent(random_arr(&[3], 35), true);
        for step in 0..3 {
            let x = tape.leaf(random_arr(&[2, 3], 40 + step));
            let y = tape.matmul_last(x, w);
            let y = tape.add_bias_last(y, b);
            let loss = tape.sum_all(y);
            let grads = tape.backward(loss);
            assert!(grads[w.index()].is_some());
            assert!(grads[b.index()].is_some());
            tape.reset();
            assert_eq!(tape.len(), 2);
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.persistent(random_arr(&[2, 2], 36), true);
        let x = tape.leaf(random_arr(&[1, 2], 37));
        let y = tape.matmul_last(x, w);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        assert!(grads[x.index()].is_none());
        assert!(grads[w.index()].is_some());
    }

    #[test]
    fn repeated_operand_accumulates_gradient() {
        // d(x*x)/dx = 2x, exercising two contributions to one slot.
        let x = Arr::from_elem(IxDyn(&[1]), 3.0);
        let mut tape = Tape::new();
        let xv = tape.persistent(x, true);
        let sq = tape.mul(xv, xv);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss);
        let g = grads[xv.index()].as_ref().unwrap();
        assert!((g[[0]] - 6.0).abs() < 1e-12);
    }
}
