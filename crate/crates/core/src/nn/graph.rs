//! A small reverse-mode tape over CHW tensors.
//!
//! The network forward pass appends nodes to a [`Graph`]; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients for any subset of
//! output nodes, each seeded with an externally computed adjoint. Losses stay
//! outside the tape: the trainer differentiates them analytically and feeds
//! the seeds in.

use ndarray::{Array1, Array3};

use super::kernels::{self, BnContext};
use super::{Grads, ParamId, ParamStore, Scalar};

/// Index of a node (an activation tensor) in the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Forward mode: train uses batch statistics in BatchNorm and collects
/// running-stat updates; eval uses the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Momentum-blended running statistics for one BatchNorm layer, to be written
/// back by the owner of the parameter store after the step.
#[derive(Debug)]
pub struct BnStatUpdate<T> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub new_mean: Array1<T>,
    pub new_var: Array1<T>,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: NodeId,
        w: ParamId,
        b: ParamId,
        pad: usize,
    },
    BatchNorm {
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        ctx: BnContext<T>,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Tanh {
        x: NodeId,
    },
    Clamp {
        x: NodeId,
        lo: T,
        hi: T,
    },
    AvgPool2 {
        x: NodeId,
    },
    UpNearest2 {
        x: NodeId,
    },
    UpBilinear2 {
        x: NodeId,
    },
    Concat {
        xs: Vec<NodeId>,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    AffineScalar {
        x: NodeId,
        scale: T,
    },
}

struct Node<T> {
    value: Array3<T>,
    op: Op<T>,
}

/// Tape of tensor operations against a borrowed parameter store.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    mode: Mode,
    nodes: Vec<Node<T>>,
    bn_updates: Vec<BnStatUpdate<T>>,
}

/// Gradients from one backward pass: per-parameter and per-node.
pub struct GradResult<T> {
    pub params: Grads<T>,
    node_grads: Vec<Option<Array3<T>>>,
}

impl<T: Scalar> GradResult<T> {
    /// Gradient that reached a node (e.g. a leaf input). `None` when no seed
    /// flowed there.
    pub fn node(&self, id: NodeId) -> Option<&Array3<T>> {
        self.node_grads[id.0].as_ref()
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>, mode: Mode) -> Self {
        Self {
            params,
            mode,
            nodes: Vec::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// BatchNorm running-stat updates collected during a train-mode forward.
    pub fn take_bn_updates(&mut self) -> Vec<BnStatUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    pub fn value(&self, id: NodeId) -> &Array3<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Array3<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a constant/input tensor (a leaf).
    pub fn input(&mut self, value: Array3<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn conv2d(&mut self, x: NodeId, w: ParamId, b: ParamId, pad: usize) -> NodeId {
        let y = kernels::conv2d_forward(self.value(x), self.params.get(w), self.params.get(b), pad);
        self.push(y, Op::Conv2d { x, w, b, pad })
    }

    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> NodeId {
        let (y, ctx, updates) = kernels::batch_norm_forward(
            self.value(x),
            self.params.get(gamma),
            self.params.get(beta),
            self.params.get(running_mean),
            self.params.get(running_var),
            self.mode == Mode::Train,
        );
        if let Some((new_mean, new_var)) = updates {
            self.bn_updates.push(BnStatUpdate {
                mean_id: running_mean,
                var_id: running_var,
                new_mean,
                new_var,
            });
        }
        self.push(y, Op::BatchNorm { x, gamma, beta, ctx })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).mapv(|v| if v > T::zero() { v } else { T::zero() });
        self.push(y, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let one = T::one();
        let y = self.value(x).mapv(|v| one / (one + (-v).exp()));
        self.push(y, Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).mapv(|v| v.tanh());
        self.push(y, Op::Tanh { x })
    }

    pub fn clamp(&mut self, x: NodeId, lo: T, hi: T) -> NodeId {
        let y = self.value(x).mapv(|v| if v < lo { lo } else if v > hi { hi } else { v });
        self.push(y, Op::Clamp { x, lo, hi })
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> NodeId {
        let y = kernels::avg_pool2_forward(self.value(x));
        self.push(y, Op::AvgPool2 { x })
    }

    pub fn up_nearest2(&mut self, x: NodeId) -> NodeId {
        let y = kernels::up_nearest2_forward(self.value(x));
        self.push(y, Op::UpNearest2 { x })
    }

    pub fn up_bilinear2(&mut self, x: NodeId) -> NodeId {
        let y = kernels::up_bilinear2_forward(self.value(x));
        self.push(y, Op::UpBilinear2 { x })
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let (_, h, w) = self.value(xs[0]).dim();
        let total_c: usize = xs.iter().map(|&id| self.value(id).dim().0).sum();
        let mut out = Array3::zeros((total_c, h, w));
        let mut off = 0;
        for &id in xs {
            let v = self.value(id);
            let (c, vh, vw) = v.dim();
            assert_eq!((vh, vw), (h, w), "concat spatial mismatch");
            out.slice_mut(ndarray::s![off..off + c, .., ..]).assign(v);
            off += c;
        }
        self.push(out, Op::Concat { xs: xs.to_vec() })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = self.value(a) * self.value(b);
        self.push(y, Op::Mul { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let y = self.value(a) - self.value(b);
        self.push(y, Op::Sub { a, b })
    }

    pub fn affine_scalar(&mut self, x: NodeId, scale: T, shift: T) -> NodeId {
        let y = self.value(x).mapv(|v| v * scale + shift);
        self.push(y, Op::AffineScalar { x, scale })
    }

    /// Reverse pass. `seeds` pairs output nodes with their adjoints; gradients
    /// are accumulated for every parameter and node on a path to a seed.
    pub fn backward(&self, seeds: Vec<(NodeId, Array3<T>)>) -> GradResult<T> {
        let mut node_grads: Vec<Option<Array3<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut grads = Grads::zeros(self.params.len());
        for (id, seed) in seeds {
            assert_eq!(
                seed.dim(),
                self.nodes[id.0].value.dim(),
                "seed shape mismatch at node {}",
                id.0
            );
            match &mut node_grads[id.0] {
                Some(g) => *g += &seed,
                slot @ None => *slot = Some(seed),
            }
        }
        for idx in (0..self.nodes.len()).rev() {
            let Some(dy) = node_grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let send = |to: NodeId, grad: Array3<T>, slots: &mut Vec<Option<Array3<T>>>| {
                match &mut slots[to.0] {
                    Some(g) => *g += &grad,
                    slot @ None => *slot = Some(grad),
                }
            };
            match &node.op {
                Op::Leaf => {
                    // Keep the gradient so callers can inspect input adjoints.
                    node_grads[idx] = Some(dy);
                }
                Op::Conv2d { x, w, b, pad } => {
                    let (dx, dw, db) =
                        kernels::conv2d_backward(self.value(*x), self.params.get(*w), *pad, &dy);
                    grads.accumulate(*w, dw);
                    grads.accumulate(*b, db);
                    send(*x, dx, &mut node_grads);
                }
                Op::BatchNorm { x, gamma, beta, ctx } => {
                    let (dx, dgamma, dbeta) =
                        kernels::batch_norm_backward(ctx, self.params.get(*gamma), &dy);
                    grads.accumulate(*gamma, dgamma);
                    grads.accumulate(*beta, dbeta);
                    send(*x, dx, &mut node_grads);
                }
                Op::Relu { x } => {
                    let mut dx = dy;
                    dx.zip_mut_with(&node.value, |g, &y| {
                        if y <= T::zero() {
                            *g = T::zero();
                        }
                    });
                    send(*x, dx, &mut node_grads);
                }
                Op::Sigmoid { x } => {
                    let one = T::one();
                    let mut dx = dy;
                    dx.zip_mut_with(&node.value, |g, &y| *g *= y * (one - y));
                    send(*x, dx, &mut node_grads);
                }
                Op::Tanh { x } => {
                    let one = T::one();
                    let mut dx = dy;
                    dx.zip_mut_with(&node.value, |g, &y| *g *= one - y * y);
                    send(*x, dx, &mut node_grads);
                }
                Op::Clamp { x, lo, hi } => {
                    let mut dx = dy;
                    dx.zip_mut_with(self.value(*x), |g, &v| {
                        if v < *lo || v > *hi {
                            *g = T::zero();
                        }
                    });
                    send(*x, dx, &mut node_grads);
                }
                Op::AvgPool2 { x } => {
                    let (_, h, w) = self.value(*x).dim();
                    send(*x, kernels::avg_pool2_backward(&dy, h, w), &mut node_grads);
                }
                Op::UpNearest2 { x } => {
                    send(*x, kernels::up_nearest2_backward(&dy), &mut node_grads);
                }
                Op::UpBilinear2 { x } => {
                    let (_, h, w) = self.value(*x).dim();
                    send(*x, kernels::up_bilinear2_backward(&dy, h, w), &mut node_grads);
                }
                Op::Concat { xs } => {
                    let mut off = 0;
                    for &xid in xs {
                        let c = self.value(xid).dim().0;
                        let part = dy.slice(ndarray::s![off..off + c, .., ..]).to_owned();
                        send(xid, part, &mut node_grads);
                        off += c;
                    }
                }
                Op::Mul { a, b } => {
                    let da = &dy * self.value(*b);
                    let db = &dy * self.value(*a);
                    send(*a, da, &mut node_grads);
                    send(*b, db, &mut node_grads);
                }
                Op::Sub { a, b } => {
                    let db = dy.mapv(|v| -v);
                    send(*a, dy, &mut node_grads);
                    send(*b, db, &mut node_grads);
                }
                Op::AffineScalar { x, scale } => {
                    let dx = dy.mapv(|v| v * *scale);
                    send(*x, dx, &mut node_grads);
                }
            }
        }
        GradResult {
            params: grads,
            node_grads,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;
    use ndarray::ArrayD;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_arr3(rng: &mut ChaCha20Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((c, h, w), |_| rng.random_range(-1.0..1.0))
    }

    fn rand_arrd(rng: &mut ChaCha20Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    /// Scalar objective: fixed random projection of an output tensor.
    fn proj_loss(out: &Array3<f64>, proj: &Array3<f64>) -> f64 {
        (out * proj).sum()
    }

    /// Check every parameter/input gradient of `build` (a forward closure
    /// producing one output node) against central finite differences.
    fn check_param_grads<F>(params: &mut ParamStore<f64>, inputs: &[Array3<f64>], build: F)
    where
        F: Fn(&mut Graph<'_, f64>, &[NodeId]) -> NodeId,
    {
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        // Analytic pass.
        let (analytic, proj, input_ids) = {
            let mut g = Graph::new(params, Mode::Train);
            let ids: Vec<NodeId> = inputs.iter().map(|x| g.input(x.clone())).collect();
            let out = build(&mut g, &ids);
            let (c, h, w) = g.value(out).dim();
            let proj = rand_arr3(&mut rng, c, h, w);
            let res = g.backward(vec![(out, proj.clone())]);
            (res, proj, ids)
        };
        let eval = |params: &ParamStore<f64>, proj: &Array3<f64>| -> f64 {
            let mut g = Graph::new(params, Mode::Train);
            let ids: Vec<NodeId> = inputs.iter().map(|x| g.input(x.clone())).collect();
            let out = build(&mut g, &ids);
            proj_loss(g.value(out), proj)
        };
        let eps = 1e-6;
        // Parameters.
        for pid in 0..params.len() {
            let id = ParamId(pid);
            if params.entry(id).kind != ParamKind::Trainable {
                continue;
            }
            let n = params.get(id).len();
            for i in 0..n {
                let orig = params.get(id).as_slice().unwrap()[i];
                params.get_mut(id).as_slice_mut().unwrap()[i] = orig + eps;
                let up = eval(params, &proj);
                params.get_mut(id).as_slice_mut().unwrap()[i] = orig - eps;
                let down = eval(params, &proj);
                params.get_mut(id).as_slice_mut().unwrap()[i] = orig;
                let fd = (up - down) / (2.0 * eps);
                let an = analytic.params.get(id).map_or(0.0, |g| g.as_slice().unwrap()[i]);
                let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-4);
                assert!(
                    err < 1e-5,
                    "param {} [{i}]: analytic {an} vs fd {fd}",
                    params.entry(id).name
                );
            }
        }
        // Inputs.
        for (k, x) in inputs.iter().enumerate() {
            let mut xs = inputs.to_vec();
            for i in 0..x.len() {
                let orig = xs[k].as_slice().unwrap()[i];
                xs[k].as_slice_mut().unwrap()[i] = orig + eps;
                let up = {
                    let mut g = Graph::new(params, Mode::Train);
                    let ids: Vec<NodeId> = xs.iter().map(|x| g.input(x.clone())).collect();
                    let out = build(&mut g, &ids);
                    proj_loss(g.value(out), &proj)
                };
                xs[k].as_slice_mut().unwrap()[i] = orig - eps;
                let down = {
                    let mut g = Graph::new(params, Mode::Train);
                    let ids: Vec<NodeId> = xs.iter().map(|x| g.input(x.clone())).collect();
                    let out = build(&mut g, &ids);
                    proj_loss(g.value(out), &proj)
                };
                xs[k].as_slice_mut().unwrap()[i] = orig;
                let fd = (up - down) / (2.0 * eps);
                let an = analytic
                    .node(input_ids[k])
                    .map_or(0.0, |g| g.as_slice().unwrap()[i]);
                let err = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-4);
                assert!(err < 1e-5, "input {k} [{i}]: analytic {an} vs fd {fd}");
            }
        }
    }

    #[test]
    fn conv2d_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let mut params = ParamStore::new();
        let w = params.add("w", ParamKind::Trainable, rand_arrd(&mut rng, &[3, 2, 3, 3]));
        let b = params.add("b", ParamKind::Trainable, rand_arrd(&mut rng, &[3]));
        let x = rand_arr3(&mut rng, 2, 5, 6);
        check_param_grads(&mut params, &[x], |g, ids| g.conv2d(ids[0], w, b, 1));
    }

    #[test]
    fn conv2d_7x7_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let mut params = ParamStore::new();
        let w = params.add("w", ParamKind::Trainable, rand_arrd(&mut rng, &[1, 1, 7, 7]));
        let b = params.add("b", ParamKind::Trainable, rand_arrd(&mut rng, &[1]));
        let x = rand_arr3(&mut rng, 1, 8, 8);
        check_param_grads(&mut params, &[x], |g, ids| g.conv2d(ids[0], w, b, 3));
    }

    #[test]
    fn batch_norm_train_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let mut params = ParamStore::new();
        let gamma = params.add("gamma", ParamKind::Trainable, rand_arrd(&mut rng, &[2]));
        let beta = params.add("beta", ParamKind::Trainable, rand_arrd(&mut rng, &[2]));
        let rm = params.add("rm", ParamKind::Buffer, ArrayD::zeros(vec![2]));
        let rv = params.add(
            "rv",
            ParamKind::Buffer,
            ArrayD::from_elem(vec![2], 1.0),
        );
        let x = rand_arr3(&mut rng, 2, 4, 4);
        check_param_grads(&mut params, &[x], |g, ids| {
            g.batch_norm(ids[0], gamma, beta, rm, rv)
        });
    }

    #[test]
    fn pointwise_and_resample_ops_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let mut params = ParamStore::new();
        let x = rand_arr3(&mut rng, 2, 4, 4);
        // Chain enough ops to cover relu/sigmoid/tanh/clamp/pool/upsample/
        // affine in one pass; offsets keep values away from kinks.
        check_param_grads(&mut params, &[x], |g, ids| {
            let a = g.affine_scalar(ids[0], 1.3, 0.05);
            let r = g.relu(a);
            let s = g.sigmoid(r);
            let t = g.tanh(s);
            let c = g.clamp(t, 0.05, 0.95);
            let p = g.avg_pool2(c);
            let un = g.up_nearest2(p);
            g.up_bilinear2(un)
        });
    }

    #[test]
    fn dag_ops_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut params = ParamStore::new();
        let a = rand_arr3(&mut rng, 2, 3, 3);
        let b = rand_arr3(&mut rng, 2, 3, 3);
        let c = rand_arr3(&mut rng, 1, 3, 3);
        // Shared subexpressions force gradient accumulation across branches.
        check_param_grads(&mut params, &[a, b, c], |g, ids| {
            let m = g.mul(ids[0], ids[1]);
            let s = g.sub(m, ids[0]);
            g.concat(&[s, ids[2], m])
        });
    }

    #[test]
    fn bn_updates_collected_in_train_mode_only() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let mut params = ParamStore::new();
        let gamma = params.add("gamma", ParamKind::Trainable, ArrayD::from_elem(vec![2], 1.0));
        let beta = params.add("beta", ParamKind::Trainable, ArrayD::zeros(vec![2]));
        let rm = params.add("rm", ParamKind::Buffer, ArrayD::zeros(vec![2]));
        let rv = params.add("rv", ParamKind::Buffer, ArrayD::from_elem(vec![2], 1.0));
        let x = rand_arr3(&mut rng, 2, 4, 4);
        for (mode, expect) in [(Mode::Train, 1), (Mode::Eval, 0)] {
            let mut g = Graph::new(&params, mode);
            let id = g.input(x.clone());
            let _ = g.batch_norm(id, gamma, beta, rm, rv);
            assert_eq!(g.take_bn_updates().len(), expect);
        }
    }

    #[test]
    fn eval_mode_bn_uses_running_stats() {
        let mut params = ParamStore::new();
        let gamma = params.add("gamma", ParamKind::Trainable, ArrayD::from_elem(vec![1], 2.0));
        let beta = params.add("beta", ParamKind::Trainable, ArrayD::from_elem(vec![1], 0.5));
        let rm = params.add("rm", ParamKind::Buffer, ArrayD::from_elem(vec![1], 1.0));
        let rv = params.add(
            "rv",
            ParamKind::Buffer,
            ArrayD::from_elem(vec![1], 1.0 - kernels::BN_EPS),
        );
        let x = Array3::from_elem((1, 2, 2), 3.0);
        let mut g = Graph::new(&params, Mode::Eval);
        let id = g.input(x);
        let y = g.batch_norm(id, gamma, beta, rm, rv);
        // (3 - 1) / sqrt(1) * 2 + 0.5 = 4.5 with rv chosen to cancel eps.
        for &v in g.value(y).iter() {
            assert!((v - 4.5).abs() < 1e-12, "{v}");
        }
    }
}
