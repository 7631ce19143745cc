//! Minimal reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records eager operations as nodes; [`Tape::backward`] walks the
//! record in reverse and accumulates gradients. Everything is `f64`. The op
//! set is exactly what the denoising UNet needs: broadcast arithmetic,
//! matrix/batched products, convolution, group/layer norm, SiLU, softmax,
//! shape surgery, and a mean reduction for the loss.
//!
//! Shape errors are programming errors and panic, like `ndarray` itself;
//! model-level configuration problems are validated before ops are recorded.

mod params;

pub use params::{clip_global_norm, global_norm, Adam, Arr, BoundParams, ParamStore};

use ndarray::{Array2, Array4, ArrayD, Axis, Ix2, Ix3, Ix4, IxDyn};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Bmm(Var, Var),
    SwapAxes(Var, usize, usize),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize, len: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Silu(Var),
    Softmax(Var),
    MeanAll(Var),
    UpsampleNearest2(Var),
}

struct Node {
    value: Arr,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by `Var`.
pub struct Gradients {
    grads: Vec<Option<Arr>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.grads[v.0].as_ref()
    }
}

const NORM_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    fn push(&mut self, value: Arr, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Arr) -> Var {
        self.push(value, Op::Leaf)
    }

    /// `a + b` with `b` broadcast to `a`'s shape (the left operand carries
    /// the output shape).
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            let bb = bv.broadcast(av.raw_dim()).unwrap_or_else(|| {
                panic!("add: cannot broadcast {:?} to {:?}", bv.shape(), av.shape())
            });
            av + &bb
        };
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            let bb = bv.broadcast(av.raw_dim()).unwrap_or_else(|| {
                panic!("sub: cannot broadcast {:?} to {:?}", bv.shape(), av.shape())
            });
            av - &bb
        };
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = {
            let (av, bv) = (self.value(a), self.value(b));
            let bb = bv.broadcast(av.raw_dim()).unwrap_or_else(|| {
                panic!("mul: cannot broadcast {:?} to {:?}", bv.shape(), av.shape())
            });
            av * &bb
        };
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a) * s;
        self.push(out, Op::Scale(a, s))
    }

    /// 2-D matrix product `(m,k)·(k,n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = {
            let av = self.value(a).view().into_dimensionality::<Ix2>().expect("matmul lhs 2-D");
            let bv = self.value(b).view().into_dimensionality::<Ix2>().expect("matmul rhs 2-D");
            av.dot(&bv).into_dyn()
        };
        self.push(out, Op::MatMul(a, b))
    }

    /// Batched matrix product `(b,m,k)·(b,k,n)`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let out = {
            let av = self.value(a).view().into_dimensionality::<Ix3>().expect("bmm lhs 3-D");
            let bv = self.value(b).view().into_dimensionality::<Ix3>().expect("bmm rhs 3-D");
            assert_eq!(av.shape()[0], bv.shape()[0], "bmm batch mismatch");
            let (bs, m, n) = (av.shape()[0], av.shape()[1], bv.shape()[2]);
            let mut out = ndarray::Array3::<f64>::zeros((bs, m, n));
            for i in 0..bs {
                let prod = av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i));
                out.index_axis_mut(Axis(0), i).assign(&prod);
            }
            out.into_dyn()
        };
        self.push(out, Op::Bmm(a, b))
    }

    pub fn swap_axes(&mut self, a: Var, i: usize, j: usize) -> Var {
        let mut view = self.value(a).view();
        view.swap_axes(i, j);
        let out = view.as_standard_layout().to_owned();
        self.push(out, Op::SwapAxes(a, i, j))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = {
            let v = self.value(a);
            assert_eq!(v.len(), shape.iter().product::<usize>(), "reshape element count");
            v.to_shape(IxDyn(shape)).expect("reshape").to_owned()
        };
        self.push(out, Op::Reshape(a))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Var {
        assert!(!inputs.is_empty());
        let views: Vec<_> = inputs.iter().map(|v| self.value(*v).view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        self.push(out, Op::Concat(inputs.to_vec(), axis))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let out = {
            let v = self.value(x);
            v.slice_axis(Axis(axis), ndarray::Slice::from(start as isize..(start + len) as isize))
                .to_owned()
        };
        self.push(out, Op::Slice { x, axis, start, len })
    }

    /// 2-D convolution: `x` is (cin,h,w), `w` is (cout,cin,kh,kw), optional
    /// per-channel bias, square stride and zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = {
            let xv = self.value(x).view().into_dimensionality::<Ix3>().expect("conv input 3-D").to_owned();
            let wv = self.value(w).view().into_dimensionality::<Ix4>().expect("conv weight 4-D").to_owned();
            let bias = b.map(|bb| {
                self.value(bb)
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .expect("bias 1-D")
                    .to_owned()
            });
            conv2d_forward(&xv, &wv, bias.as_ref(), stride, pad)
        };
        self.push(out.into_dyn(), Op::Conv2d { x, w, b, stride, pad })
    }

    /// GroupNorm over a (c,h,w) tensor: statistics per group of channels,
    /// then a per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let out = {
            let xv = self.value(x).view().into_dimensionality::<Ix3>().expect("group_norm input 3-D");
            let c = xv.shape()[0];
            assert!(c % groups == 0, "channels {c} not divisible by groups {groups}");
            let g = self.value(gamma);
            let bt = self.value(beta);
            let mut out = xv.to_owned();
            let per = c / groups;
            for gi in 0..groups {
                let sl = ndarray::Slice::from((gi * per) as isize..((gi + 1) * per) as isize);
                let chunk = xv.slice_axis(Axis(0), sl);
                let mean = chunk.mean().unwrap();
                let var = chunk.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
                let inv = 1.0 / (var + NORM_EPS).sqrt();
                let mut dst = out.slice_axis_mut(Axis(0), sl);
                dst.mapv_inplace(|v| (v - mean) * inv);
            }
            for ci in 0..c {
                let (gc, bc) = (g[[ci]], bt[[ci]]);
                out.index_axis_mut(Axis(0), ci).mapv_inplace(|v| v * gc + bc);
            }
            out.into_dyn()
        };
        self.push(out, Op::GroupNorm { x, gamma, beta, groups })
    }

    /// LayerNorm over the last axis of a (n,c) tensor with per-feature affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let out = {
            let xv = self.value(x).view().into_dimensionality::<Ix2>().expect("layer_norm input 2-D");
            let g = self.value(gamma);
            let bt = self.value(beta);
            let mut out = xv.to_owned();
            for mut row in out.rows_mut() {
                let mean = row.mean().unwrap();
                let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
                let inv = 1.0 / (var + NORM_EPS).sqrt();
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (*v - mean) * inv * g[[j]] + bt[[j]];
                }
            }
            out.into_dyn()
        };
        self.push(out, Op::LayerNorm { x, gamma, beta })
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v * sigmoid(v));
        self.push(out, Op::Silu(a))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let last = out.ndim() - 1;
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
        self.push(out, Op::Softmax(a))
    }

    /// Mean over all elements; the output is a 0-d tensor.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.value(a).mean().unwrap();
        self.push(ArrayD::from_elem(IxDyn(&[]), m), Op::MeanAll(a))
    }

    /// Nearest-neighbor 2× upsampling of a (c,h,w) tensor.
    pub fn upsample_nearest2(&mut self, a: Var) -> Var {
        let out = {
            let v = self.value(a).view().into_dimensionality::<Ix3>().expect("upsample input 3-D");
            let (c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2]);
            let mut out = ndarray::Array3::<f64>::zeros((c, 2 * h, 2 * w));
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let val = v[[ci, y, x]];
                        out[[ci, 2 * y, 2 * x]] = val;
                        out[[ci, 2 * y, 2 * x + 1]] = val;
                        out[[ci, 2 * y + 1, 2 * x]] = val;
                        out[[ci, 2 * y + 1, 2 * x + 1]] = val;
                    }
                }
            }
            out.into_dyn()
        };
        self.push(out, Op::UpsampleNearest2(a))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward expects a scalar loss");
        let mut grads: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::from_elem(self.value(loss).raw_dim(), 1.0));

        for i in (0..self.nodes.len()).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    let gb = reduce_to_shape(upstream.clone(), self.value(*b).shape());
                    accumulate(&mut grads, *a, upstream);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Sub(a, b) => {
                    let gb = reduce_to_shape(upstream.mapv(|v| -v), self.value(*b).shape());
                    accumulate(&mut grads, *a, upstream);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Mul(a, b) => {
                    let (ga, gb) = {
                        let av = self.value(*a);
                        let bv = self.value(*b);
                        let bb = bv.broadcast(av.raw_dim()).unwrap();
                        let ga = &upstream * &bb;
                        let gb = reduce_to_shape(&upstream * av, bv.shape());
                        (ga, gb)
                    };
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, upstream.mapv(|v| v * s));
                }
                Op::MatMul(a, b) => {
                    let (ga, gb) = {
                        let av = self.value(*a).view().into_dimensionality::<Ix2>().unwrap();
                        let bv = self.value(*b).view().into_dimensionality::<Ix2>().unwrap();
                        let up = upstream.view().into_dimensionality::<Ix2>().unwrap();
                        (up.dot(&bv.t()).into_dyn(), av.t().dot(&up).into_dyn())
                    };
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Bmm(a, b) => {
                    let (ga, gb) = {
                        let av = self.value(*a).view().into_dimensionality::<Ix3>().unwrap();
                        let bv = self.value(*b).view().into_dimensionality::<Ix3>().unwrap();
                        let up = upstream.view().into_dimensionality::<Ix3>().unwrap();
                        let bs = av.shape()[0];
                        let mut ga = ndarray::Array3::<f64>::zeros(av.raw_dim());
                        let mut gb = ndarray::Array3::<f64>::zeros(bv.raw_dim());
                        for i in 0..bs {
                            let u = up.index_axis(Axis(0), i);
                            ga.index_axis_mut(Axis(0), i)
                                .assign(&u.dot(&bv.index_axis(Axis(0), i).t()));
                            gb.index_axis_mut(Axis(0), i)
                                .assign(&av.index_axis(Axis(0), i).t().dot(&u));
                        }
                        (ga.into_dyn(), gb.into_dyn())
                    };
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::SwapAxes(a, i_ax, j_ax) => {
                    let mut view = upstream.view();
                    view.swap_axes(*i_ax, *j_ax);
                    let g = view.as_standard_layout().to_owned();
                    accumulate(&mut grads, *a, g);
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    let g = upstream.to_shape(IxDyn(&shape)).expect("reshape grad").to_owned();
                    accumulate(&mut grads, *a, g);
                }
                Op::Concat(inputs, axis) => {
                    let mut start = 0usize;
                    for inp in inputs.clone() {
                        let len = self.value(inp).shape()[*axis];
                        let g = upstream
                            .slice_axis(
                                Axis(*axis),
                                ndarray::Slice::from(start as isize..(start + len) as isize),
                            )
                            .to_owned();
                        accumulate(&mut grads, inp, g);
                        start += len;
                    }
                }
                Op::Slice { x, axis, start, len } => {
                    let mut g = Arr::zeros(self.value(*x).raw_dim());
                    g.slice_axis_mut(
                        Axis(*axis),
                        ndarray::Slice::from(*start as isize..(*start + *len) as isize),
                    )
                    .assign(&upstream);
                    accumulate(&mut grads, *x, g);
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (gx, gw, gb) = {
                        let xv = self.value(*x).view().into_dimensionality::<Ix3>().unwrap().to_owned();
                        let wv = self.value(*w).view().into_dimensionality::<Ix4>().unwrap().to_owned();
                        let up = upstream.view().into_dimensionality::<Ix3>().unwrap().to_owned();
                        conv2d_backward(&xv, &wv, &up, *stride, *pad)
                    };
                    accumulate(&mut grads, *x, gx.into_dyn());
                    accumulate(&mut grads, *w, gw.into_dyn());
                    if let Some(bb) = b {
                        accumulate(&mut grads, *bb, gb.into_dyn());
                    }
                }
                Op::GroupNorm { x, gamma, beta, groups } => {
                    let (gx, ggamma, gbeta) = {
                        let xv = self.value(*x).view().into_dimensionality::<Ix3>().unwrap();
                        let g = self.value(*gamma);
                        let up = upstream.view().into_dimensionality::<Ix3>().unwrap();
                        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                        let per = c / groups;
                        let m = (per * h * w) as f64;
                        let mut gx = ndarray::Array3::<f64>::zeros(xv.raw_dim());
                        let mut ggamma = ndarray::Array1::<f64>::zeros(c);
                        let mut gbeta = ndarray::Array1::<f64>::zeros(c);
                        for gi in 0..*groups {
                            let sl = ndarray::Slice::from(
                                (gi * per) as isize..((gi + 1) * per) as isize,
                            );
                            let chunk = xv.slice_axis(Axis(0), sl);
                            let upc = up.slice_axis(Axis(0), sl);
                            let mean = chunk.mean().unwrap();
                            let var = chunk.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
                            let inv = 1.0 / (var + NORM_EPS).sqrt();
                            let mut dxhat = upc.to_owned();
                            for (ci_local, mut plane) in dxhat.axis_iter_mut(Axis(0)).enumerate() {
                                let gc = g[[gi * per + ci_local]];
                                plane.mapv_inplace(|v| v * gc);
                            }
                            let xc = chunk.mapv(|v| v - mean);
                            let sum_dxhat = dxhat.sum();
                            let sum_dxhat_xc = (&dxhat * &xc).sum();
                            let mut dst = gx.slice_axis_mut(Axis(0), sl);
                            ndarray::Zip::from(&mut dst).and(&dxhat).and(&xc).for_each(
                                |d, &dh, &xcv| {
                                    *d = inv
                                        * (dh
                                            - sum_dxhat / m
                                            - xcv * inv * inv * sum_dxhat_xc / m);
                                },
                            );
                            for ci_local in 0..per {
                                let ci = gi * per + ci_local;
                                let xhat = xc.index_axis(Axis(0), ci_local).mapv(|v| v * inv);
                                let up_plane = upc.index_axis(Axis(0), ci_local);
                                ggamma[ci] = (&xhat * &up_plane).sum();
                                gbeta[ci] = up_plane.sum();
                            }
                        }
                        (gx.into_dyn(), ggamma.into_dyn(), gbeta.into_dyn())
                    };
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gamma, ggamma);
                    accumulate(&mut grads, *beta, gbeta);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let (gx, ggamma, gbeta) = {
                        let xv = self.value(*x).view().into_dimensionality::<Ix2>().unwrap();
                        let g = self.value(*gamma);
                        let up = upstream.view().into_dimensionality::<Ix2>().unwrap();
                        let (n, c) = (xv.shape()[0], xv.shape()[1]);
                        let m = c as f64;
                        let mut gx = Array2::<f64>::zeros((n, c));
                        let mut ggamma = ndarray::Array1::<f64>::zeros(c);
                        let mut gbeta = ndarray::Array1::<f64>::zeros(c);
                        for r in 0..n {
                            let row = xv.row(r);
                            let urow = up.row(r);
                            let mean = row.mean().unwrap();
                            let var = row.mapv(|v| (v - mean) * (v - mean)).mean().unwrap();
                            let inv = 1.0 / (var + NORM_EPS).sqrt();
                            let mut sum_dxhat = 0.0;
                            let mut sum_dxhat_xc = 0.0;
                            for j in 0..c {
                                let dxhat = urow[j] * g[[j]];
                                let xc = row[j] - mean;
                                sum_dxhat += dxhat;
                                sum_dxhat_xc += dxhat * xc;
                                ggamma[j] += urow[j] * xc * inv;
                                gbeta[j] += urow[j];
                            }
                            for j in 0..c {
                                let dxhat = urow[j] * g[[j]];
                                let xc = row[j] - mean;
                                gx[[r, j]] = inv
                                    * (dxhat - sum_dxhat / m - xc * inv * inv * sum_dxhat_xc / m);
                            }
                        }
                        (gx.into_dyn(), ggamma.into_dyn(), gbeta.into_dyn())
                    };
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *gamma, ggamma);
                    accumulate(&mut grads, *beta, gbeta);
                }
                Op::Silu(a) => {
                    let g = self.value(*a).mapv(|v| {
                        let s = sigmoid(v);
                        s * (1.0 + v * (1.0 - s))
                    });
                    accumulate(&mut grads, *a, &upstream * &g);
                }
                Op::Softmax(a) => {
                    let y = &self.nodes[i].value;
                    let last = y.ndim() - 1;
                    let mut gx = upstream;
                    for (mut glane, ylane) in
                        gx.lanes_mut(Axis(last)).into_iter().zip(y.lanes(Axis(last)))
                    {
                        let dot: f64 = glane.iter().zip(ylane.iter()).map(|(g, y)| g * y).sum();
                        for (g, y) in glane.iter_mut().zip(ylane.iter()) {
                            *g = y * (*g - dot);
                        }
                    }
                    accumulate(&mut grads, *a, gx);
                }
                Op::MeanAll(a) => {
                    let n = self.value(*a).len() as f64;
                    let u = upstream.iter().next().copied().unwrap_or(0.0);
                    let g = Arr::from_elem(self.value(*a).raw_dim(), u / n);
                    accumulate(&mut grads, *a, g);
                }
                Op::UpsampleNearest2(a) => {
                    let up = upstream.view().into_dimensionality::<Ix3>().unwrap();
                    let (c, h2, w2) = (up.shape()[0], up.shape()[1], up.shape()[2]);
                    let (h, w) = (h2 / 2, w2 / 2);
                    let mut g = ndarray::Array3::<f64>::zeros((c, h, w));
                    for ci in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                g[[ci, y, x]] = up[[ci, 2 * y, 2 * x]]
                                    + up[[ci, 2 * y, 2 * x + 1]]
                                    + up[[ci, 2 * y + 1, 2 * x]]
                                    + up[[ci, 2 * y + 1, 2 * x + 1]];
                            }
                        }
                    }
                    accumulate(&mut grads, *a, g.into_dyn());
                }
            }
        }
        Gradients { grads }
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn accumulate(grads: &mut [Option<Arr>], v: Var, g: Arr) {
    match &mut grads[v.0] {
        Some(acc) => *acc += &g,
        slot => *slot = Some(g),
    }
}

/// Sum `g` down to `shape` (inverse of broadcasting).
fn reduce_to_shape(mut g: Arr, shape: &[usize]) -> Arr {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for ax in 0..shape.len() {
        if shape[ax] == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn conv_out_size(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - k) / stride + 1
}

/// Unfold (cin,h,w) into (cin*kh*kw, oh*ow) patches.
fn im2col(
    x: &ndarray::Array3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut cols = Array2::<f64>::zeros((cin * kh * kw, oh * ow));
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * ow + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn conv2d_forward(
    x: &ndarray::Array3<f64>,
    w: &Array4<f64>,
    bias: Option<&ndarray::Array1<f64>>,
    stride: usize,
    pad: usize,
) -> ndarray::Array3<f64> {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, cin_w, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cin, cin_w, "conv2d channel mismatch");
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(wd, kw, stride, pad);
    let cols = im2col(x, kh, kw, stride, pad, oh, ow);
    let wmat = w.view().into_shape_with_order((cout, cin * kh * kw)).expect("weight reshape");
    let mut out_mat = wmat.dot(&cols); // (cout, oh*ow)
    if let Some(b) = bias {
        for (mut row, bv) in out_mat.rows_mut().into_iter().zip(b.iter()) {
            row.mapv_inplace(|v| v + bv);
        }
    }
    out_mat.into_shape_with_order((cout, oh, ow)).expect("output reshape")
}

fn conv2d_backward(
    x: &ndarray::Array3<f64>,
    w: &Array4<f64>,
    upstream: &ndarray::Array3<f64>,
    stride: usize,
    pad: usize,
) -> (ndarray::Array3<f64>, Array4<f64>, ndarray::Array1<f64>) {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (oh, ow) = (upstream.shape()[1], upstream.shape()[2]);
    let up_mat =
        upstream.view().into_shape_with_order((cout, oh * ow)).expect("upstream reshape");
    let cols = im2col(x, kh, kw, stride, pad, oh, ow);
    let gw_mat = up_mat.dot(&cols.t()); // (cout, cin*kh*kw)
    let gw = gw_mat.into_shape_with_order((cout, cin, kh, kw)).expect("gw reshape");
    let gb = up_mat.sum_axis(Axis(1));
    let wmat = w.view().into_shape_with_order((cout, cin * kh * kw)).expect("weight reshape");
    let gcols = wmat.t().dot(&up_mat); // (cin*kh*kw, oh*ow)
    // col2im: scatter-add patches back onto the input grid.
    let mut gx = ndarray::Array3::<f64>::zeros((cin, h, wd));
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        gx[[ci, iy as usize, ix as usize]] += gcols[[row, oy * ow + ox]];
                    }
                }
            }
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn randn(rng: &mut ChaCha12Rng, shape: &[usize]) -> Arr {
        use rand_distr::{Distribution, StandardNormal};
        ArrayD::from_shape_simple_fn(IxDyn(shape), || StandardNormal.sample(rng))
    }

    /// Central-difference check of `builder` (tensor graph ending in a
    /// scalar) against the tape's analytic gradients.
    fn grad_check(inputs: &[Arr], builder: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = builder(&mut tape, &vars);
        let grads = tape.backward(loss);

        let h = 1e-5;
        for (idx, input) in inputs.iter().enumerate() {
            let analytic =
                grads.get(vars[idx]).cloned().unwrap_or_else(|| Arr::zeros(input.raw_dim()));
            let n = input.len();
            let probes: Vec<usize> = (0..n).step_by((n / 7).max(1)).take(8).collect();
            for &flat in &probes {
                let eval = |delta: f64| -> f64 {
                    let mut xs: Vec<Arr> = inputs.to_vec();
                    xs[idx].as_slice_mut().unwrap()[flat] += delta;
                    let mut t = Tape::new();
                    let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
                    let l = builder(&mut t, &vs);
                    *t.value(l).iter().next().unwrap()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let got = analytic.as_slice().unwrap()[flat];
                let denom = numeric.abs().max(got.abs()).max(1e-6);
                assert!(
                    ((numeric - got) / denom).abs() < 1e-5,
                    "input {idx} flat {flat}: numeric {numeric} vs analytic {got}"
                );
            }
        }
    }

    #[test]
    fn add_mul_broadcast_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let a = randn(&mut rng, &[4, 3, 5]);
        let b = randn(&mut rng, &[4, 1, 1]);
        grad_check(&[a.clone(), b], |t, v| {
            let s = t.add(v[0], v[1]);
            let m = t.mul(s, v[0]);
            t.mean_all(m)
        });
        let c = randn(&mut rng, &[5]);
        grad_check(&[a, c], |t, v| {
            let s = t.sub(v[0], v[1]);
            let sq = t.mul(s, s);
            t.mean_all(sq)
        });
    }

    #[test]
    fn matmul_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let a = randn(&mut rng, &[3, 4]);
        let b = randn(&mut rng, &[4, 2]);
        grad_check(&[a, b], |t, v| {
            let p = t.matmul(v[0], v[1]);
            let sq = t.mul(p, p);
            t.mean_all(sq)
        });
    }

    #[test]
    fn bmm_and_swap_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let a = randn(&mut rng, &[2, 3, 4]);
        let b = randn(&mut rng, &[2, 3, 4]);
        grad_check(&[a, b], |t, v| {
            let bt = t.swap_axes(v[1], 1, 2);
            let p = t.bmm(v[0], bt);
            let sq = t.mul(p, p);
            t.mean_all(sq)
        });
    }

    #[test]
    fn conv2d_grads_and_hand_case() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let x = randn(&mut rng, &[2, 5, 5]);
        let w = randn(&mut rng, &[3, 2, 3, 3]);
        let b = randn(&mut rng, &[3]);
        grad_check(&[x, w, b], |t, v| {
            let c = t.conv2d(v[0], v[1], Some(v[2]), 2, 1);
            let sq = t.mul(c, c);
            t.mean_all(sq)
        });

        // Hand case: 1-channel 4x4 ramp input, all-ones 4x4 kernel,
        // stride 2, pad 1.
        let x = Array3::from_shape_fn((1, 4, 4), |(_, y, xx)| (y * 4 + xx) as f64).into_dyn();
        let w = Array4::from_elem((1, 1, 4, 4), 1.0).into_dyn();
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let wv = tape.leaf(w);
        let out = tape.conv2d(xv, wv, None, 2, 1);
        let v = tape.value(out);
        assert_eq!(v.shape(), &[1, 2, 2]);
        // Window at (0,0) covers input rows/cols 0..3 after clipping.
        let s00: f64 = (0..3).flat_map(|y| (0..3).map(move |x| (y * 4 + x) as f64)).sum();
        assert_eq!(v[[0, 0, 0]], s00);
        let s01: f64 = (0..3).flat_map(|y| (1..4).map(move |x| (y * 4 + x) as f64)).sum();
        assert_eq!(v[[0, 0, 1]], s01);
    }

    #[test]
    fn norm_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let x = randn(&mut rng, &[4, 3, 3]);
        let gamma = randn(&mut rng, &[4]);
        let beta = randn(&mut rng, &[4]);
        grad_check(&[x, gamma, beta], |t, v| {
            let y = t.group_norm(v[0], v[1], v[2], 2);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
        let x = randn(&mut rng, &[5, 6]);
        let gamma = randn(&mut rng, &[6]);
        let beta = randn(&mut rng, &[6]);
        grad_check(&[x, gamma, beta], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
    }

    #[test]
    fn silu_softmax_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let x = randn(&mut rng, &[3, 7]);
        grad_check(&[x.clone()], |t, v| {
            let y = t.silu(v[0]);
            t.mean_all(y)
        });
        grad_check(&[x], |t, v| {
            let y = t.softmax(v[0]);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
    }

    #[test]
    fn shape_ops_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let a = randn(&mut rng, &[2, 6]);
        let b = randn(&mut rng, &[2, 4]);
        grad_check(&[a.clone(), b], |t, v| {
            let c = t.concat(&[v[0], v[1]], 1);
            let s = t.slice(c, 1, 2, 5);
            let r = t.reshape(s, &[10]);
            let sq = t.mul(r, r);
            t.mean_all(sq)
        });
        grad_check(&[a], |t, v| {
            let r = t.reshape(v[0], &[2, 2, 3]);
            let u = t.swap_axes(r, 0, 2);
            let sq = t.mul(u, u);
            t.mean_all(sq)
        });
    }

    #[test]
    fn upsample_grads() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let x = randn(&mut rng, &[2, 3, 3]);
        grad_check(&[x], |t, v| {
            let y = t.upsample_nearest2(v[0]);
            let sq = t.mul(y, y);
            t.mean_all(sq)
        });
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let x = randn(&mut rng, &[4, 5]);
        let mut tape = Tape::new();
        let v = tape.leaf(x);
        let y = tape.softmax(v);
        for row in tape.value(y).view().into_dimensionality::<Ix2>().unwrap().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_moves_toward_minimum() {
        // Minimize (p - 3)^2 elementwise.
        let mut store = ParamStore::new();
        store.insert("p", Array1::from(vec![0.0, 5.0]).into_dyn());
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let mut bound = BoundParams::new(&store);
            let p = bound.var(&mut tape, "p");
            let target = tape.leaf(Array1::from(vec![3.0, 3.0]).into_dyn());
            let d = tape.sub(p, target);
            let sq = tape.mul(d, d);
            let loss = tape.mean_all(sq);
            let grads = tape.backward(loss);
            let g = bound.harvest(&grads);
            adam.step(&mut store, &g);
        }
        let p = store.get("p").unwrap();
        assert!((p[[0]] - 3.0).abs() < 1e-2 && (p[[1]] - 3.0).abs() < 1e-2, "{p:?}");
    }
}
