//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding the forward
//! value plus a closure that scatters the node's gradient back to its
//! parents. Calling [`Graph::backward`] on a scalar node walks the tape in
//! reverse and returns gradients for every `input` leaf.
//!
//! The tape is rebuilt for every loss evaluation, which keeps the
//! implementation simple and makes each evaluation a pure function of the
//! injected tensors — the property the finite-difference checks in the test
//! suite rely on. Graphs built with [`Graph::forward_only`] skip closure
//! allocation entirely; rollouts use that mode.

use crate::tensor::Tensor;

type BackwardFn = Box<dyn Fn(&Tensor, &[Tensor], &mut GradSink)>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Accumulates gradients per node during the backward sweep.
pub struct GradSink {
    grads: Vec<Option<Tensor>>,
    needs_grad: Vec<bool>,
}

impl GradSink {
    fn add(&mut self, id: usize, g: Tensor) {
        if !self.needs_grad[id] {
            return;
        }
        match &mut self.grads[id] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }
}

/// Gradients of a scalar loss with respect to graph leaves.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient for `v`, or a zero tensor of matching shape if the loss did
    /// not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

pub struct Graph {
    values: Vec<Tensor>,
    backwards: Vec<Option<BackwardFn>>,
    needs_grad: Vec<bool>,
    no_grad: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self { values: Vec::new(), backwards: Vec::new(), needs_grad: Vec::new(), no_grad: false }
    }

    /// A graph that records values only; `backward` must not be called.
    pub fn forward_only() -> Self {
        Self { no_grad: true, ..Self::new() }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn num_nodes(&self) -> usize {
        self.values.len()
    }

    /// Differentiable leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, !self.no_grad, None)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, None)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, back: Option<BackwardFn>) -> Var {
        self.values.push(value);
        self.needs_grad.push(needs_grad);
        self.backwards.push(if self.no_grad { None } else { back });
        Var(self.values.len() - 1)
    }

    fn unary(
        &mut self,
        a: Var,
        value: Tensor,
        back: impl Fn(&Tensor, &[Tensor], usize) -> Tensor + 'static,
    ) -> Var {
        let needs = self.needs_grad[a.0];
        let out_id = self.values.len();
        let back: Option<BackwardFn> = if needs {
            Some(Box::new(move |gout, values, sink| {
                sink.add(a.0, back(gout, values, out_id));
            }))
        } else {
            None
        };
        self.push(value, needs, back)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.values[a.0].add(&self.values[b.0]);
        self.binary(
            a,
            b,
            value,
            |g, _, _| g.clone(),
            |g, _, _| g.clone(),
        )
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        value: Tensor,
        back_a: impl Fn(&Tensor, &[Tensor], usize) -> Tensor + 'static,
        back_b: impl Fn(&Tensor, &[Tensor], usize) -> Tensor + 'static,
    ) -> Var {
        let (na, nb) = (self.needs_grad[a.0], self.needs_grad[b.0]);
        let needs = na || nb;
        let out_id = self.values.len();
        let back: Option<BackwardFn> = if needs {
            Some(Box::new(move |gout, values, sink| {
                if na {
                    sink.add(a.0, back_a(gout, values, out_id));
                }
                if nb {
                    sink.add(b.0, back_b(gout, values, out_id));
                }
            }))
        } else {
            None
        };
        self.push(value, needs, back)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.values[a.0].sub(&self.values[b.0]);
        self.binary(
            a,
            b,
            value,
            |g, _, _| g.clone(),
            |g, _, _| g.scale(-1.0),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.values[a.0].mul(&self.values[b.0]);
        self.binary(
            a,
            b,
            value,
            move |g, values, _| g.mul(&values[b.0]),
            move |g, values, _| g.mul(&values[a.0]),
        )
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.values[a.0].scale(k);
        self.unary(a, value, move |g, _, _| g.scale(k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.values[a.0].map(|x| x + k);
        self.unary(a, value, |g, _, _| g.clone())
    }

    /// `a (n x m) + row (1 x m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let av = &self.values[a.0];
        let rv = &self.values[row.0];
        assert_eq!(rv.rows, 1, "add_row expects a 1 x m row vector");
        assert_eq!(av.cols, rv.cols, "add_row width mismatch");
        let mut value = av.clone();
        for r in 0..value.rows {
            for c in 0..value.cols {
                value.data[r * value.cols + c] += rv.data[c];
            }
        }
        self.binary(
            a,
            row,
            value,
            |g, _, _| g.clone(),
            |g, _, _| {
                let mut out = Tensor::zeros(1, g.cols);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        out.data[c] += g.get(r, c);
                    }
                }
                out
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.values[a.0].matmul(&self.values[b.0]);
        self.binary(
            a,
            b,
            value,
            move |g, values, _| g.matmul_nt(&values[b.0]),
            move |g, values, _| values[a.0].matmul_tn(g),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.values[a.0].map(f64::tanh);
        self.unary(a, value, |g, values, out| {
            g.zip_map(&values[out], |gi, y| gi * (1.0 - y * y))
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.values[a.0].map(|x| 1.0 / (1.0 + (-x).exp()));
        self.unary(a, value, |g, values, out| {
            g.zip_map(&values[out], |gi, y| gi * y * (1.0 - y))
        })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.values[a.0].map(f64::exp);
        self.unary(a, value, |g, values, out| g.mul(&values[out]))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.values[a.0].map(f64::ln);
        self.unary(a, value, move |g, values, _| {
            g.zip_map(&values[a.0], |gi, x| gi / x)
        })
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.values[a.0].map(|x| x * x);
        self.unary(a, value, move |g, values, _| {
            g.zip_map(&values[a.0], |gi, x| gi * 2.0 * x)
        })
    }

    /// Elementwise clamp; subgradient is zero outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.values[a.0].map(|x| x.clamp(lo, hi));
        self.unary(a, value, move |g, values, _| {
            g.zip_map(&values[a.0], |gi, x| if (lo..=hi).contains(&x) { gi } else { 0.0 })
        })
    }

    /// Elementwise minimum; gradient routes to the smaller argument (ties to `a`).
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let value = self.values[a.0].zip_map(&self.values[b.0], f64::min);
        self.binary(
            a,
            b,
            value,
            move |g, values, _| {
                let (av, bv) = (&values[a.0], &values[b.0]);
                Tensor::new(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(av.data.iter().zip(bv.data.iter()))
                        .map(|(&gi, (&x, &y))| if x <= y { gi } else { 0.0 })
                        .collect(),
                )
            },
            move |g, values, _| {
                let (av, bv) = (&values[a.0], &values[b.0]);
                Tensor::new(
                    g.rows,
                    g.cols,
                    g.data
                        .iter()
                        .zip(av.data.iter().zip(bv.data.iter()))
                        .map(|(&gi, (&x, &y))| if x <= y { 0.0 } else { gi })
                        .collect(),
                )
            },
        )
    }

    /// Elementwise Huber penalty: `x^2 / 2` inside `|x| <= delta`, linear outside.
    pub fn huber(&mut self, a: Var, delta: f64) -> Var {
        let value = self.values[a.0].map(|x| {
            if x.abs() <= delta {
                0.5 * x * x
            } else {
                delta * (x.abs() - 0.5 * delta)
            }
        });
        self.unary(a, value, move |g, values, _| {
            g.zip_map(&values[a.0], |gi, x| {
                gi * if x.abs() <= delta { x } else { delta * x.signum() }
            })
        })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.values[a.0].sum());
        self.unary(a, value, move |g, values, _| {
            let (r, c) = values[a.0].shape();
            Tensor::full(r, c, g.data[0])
        })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len() as f64;
        let value = Tensor::scalar(self.values[a.0].sum() / n);
        self.unary(a, value, move |g, values, _| {
            let (r, c) = values[a.0].shape();
            Tensor::full(r, c, g.data[0] / n)
        })
    }

    /// Row-wise sum: `(n x m) -> (n x 1)`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = &self.values[a.0];
        let value = Tensor::from_fn(av.rows, 1, |r, _| av.row_slice(r).iter().sum());
        self.unary(a, value, move |g, values, _| {
            let (r, c) = values[a.0].shape();
            Tensor::from_fn(r, c, |i, _| g.data[i])
        })
    }

    /// Numerically stable row-wise softmax.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_tensor(&self.values[a.0]);
        self.unary(a, value, |g, values, out| {
            let y = &values[out];
            let mut gx = Tensor::zeros(y.rows, y.cols);
            for r in 0..y.rows {
                let yr = y.row_slice(r);
                let gr = g.row_slice(r);
                let dot: f64 = yr.iter().zip(gr.iter()).map(|(&p, &gi)| p * gi).sum();
                for c in 0..y.cols {
                    gx.data[r * y.cols + c] = yr[c] * (gr[c] - dot);
                }
            }
            gx
        })
    }

    /// Numerically stable row-wise log-softmax.
    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = log_softmax_tensor(&self.values[a.0]);
        self.unary(a, value, |g, values, out| {
            let ly = &values[out];
            let mut gx = Tensor::zeros(ly.rows, ly.cols);
            for r in 0..ly.rows {
                let lr = ly.row_slice(r);
                let gr = g.row_slice(r);
                let gsum: f64 = gr.iter().sum();
                for c in 0..ly.cols {
                    gx.data[r * ly.cols + c] = gr[c] - lr[c].exp() * gsum;
                }
            }
            gx
        })
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(av.rows, bv.rows, "concat_cols row mismatch");
        let (n, ca, cb) = (av.rows, av.cols, bv.cols);
        let mut data = Vec::with_capacity(n * (ca + cb));
        for r in 0..n {
            data.extend_from_slice(av.row_slice(r));
            data.extend_from_slice(bv.row_slice(r));
        }
        let value = Tensor::new(n, ca + cb, data);
        self.binary(
            a,
            b,
            value,
            move |g, _, _| {
                Tensor::from_fn(g.rows, ca, |r, c| g.get(r, c))
            },
            move |g, _, _| {
                Tensor::from_fn(g.rows, cb, |r, c| g.get(r, ca + c))
            },
        )
    }

    /// Columns `from..to` of `a`.
    pub fn slice_cols(&mut self, a: Var, from: usize, to: usize) -> Var {
        let av = &self.values[a.0];
        assert!(from < to && to <= av.cols, "slice_cols out of range");
        let value = Tensor::from_fn(av.rows, to - from, |r, c| av.get(r, from + c));
        self.unary(a, value, move |g, values, _| {
            let (rows, cols) = values[a.0].shape();
            let mut gx = Tensor::zeros(rows, cols);
            for r in 0..g.rows {
                for c in 0..g.cols {
                    gx.data[r * cols + from + c] = g.get(r, c);
                }
            }
            gx
        })
    }

    /// Row `r` of `a` as a `1 x m` tensor.
    pub fn select_row(&mut self, a: Var, row: usize) -> Var {
        let av = &self.values[a.0];
        assert!(row < av.rows, "select_row out of range");
        let value = Tensor::row(av.row_slice(row));
        self.unary(a, value, move |g, values, _| {
            let (rows, cols) = values[a.0].shape();
            let mut gx = Tensor::zeros(rows, cols);
            gx.data[row * cols..(row + 1) * cols].copy_from_slice(&g.data);
            gx
        })
    }

    /// Tile a `1 x m` row vector into `k x m`.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        let av = &self.values[a.0];
        assert_eq!(av.rows, 1, "repeat_rows expects a row vector");
        let value = Tensor::from_fn(k, av.cols, |_, c| av.data[c]);
        self.unary(a, value, |g, _, _| {
            let mut out = Tensor::zeros(1, g.cols);
            for r in 0..g.rows {
                for c in 0..g.cols {
                    out.data[c] += g.get(r, c);
                }
            }
            out
        })
    }

    /// Identity in the forward pass; blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let value = self.values[a.0].clone();
        self.push(value, false, None)
    }

    /// Reverse sweep from a scalar `loss` node.
    pub fn backward(&mut self, loss: Var) -> Gradients {
        assert!(!self.no_grad, "backward called on a forward-only graph");
        assert!(self.values[loss.0].is_scalar(), "loss must be a scalar");
        let n = self.values.len();
        let mut sink = GradSink { grads: vec![None; n], needs_grad: self.needs_grad.clone() };
        sink.grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut backwards = std::mem::take(&mut self.backwards);
        for i in (0..=loss.0).rev() {
            let Some(gout) = sink.grads[i].take() else { continue };
            if let Some(f) = backwards[i].take() {
                f(&gout, &self.values, &mut sink);
            }
            sink.grads[i] = Some(gout);
        }
        Gradients {
            grads: sink.grads,
            shapes: self.values.iter().map(Tensor::shape).collect(),
        }
    }
}

pub fn softmax_tensor(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row_slice(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..x.cols {
            let e = (row[c] - m).exp();
            out.data[r * x.cols + c] = e;
            sum += e;
        }
        for c in 0..x.cols {
            out.data[r * x.cols + c] /= sum;
        }
    }
    out
}

pub fn log_softmax_tensor(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row_slice(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        for c in 0..x.cols {
            out.data[r * x.cols + c] = row[c] - lse;
        }
    }
    out
}
