//! Network building blocks: linear layers, GRU cells, MLPs, and Adam.
//!
//! Parameter structs own plain [`Tensor`]s and can be injected into a
//! [`Graph`] either as trainable inputs (loss evaluation) or as constants
//! (rollouts). The `tensors` / `tensors_mut` pair fixes a canonical
//! parameter order shared by injection, gradients, and the optimizer.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-a..a))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub w: Tensor, // in x out
    pub b: Tensor, // 1 x out
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        Self { w: xavier(input, output, rng), b: Tensor::zeros(1, output) }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.b]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }

    pub fn inject(&self, g: &mut Graph, trainable: bool) -> LinearVars {
        let mut leaf = |t: &Tensor| if trainable { g.input(t.clone()) } else { g.constant(t.clone()) };
        LinearVars { w: leaf(&self.w), b: leaf(&self.b) }
    }

    /// Forward pass without a graph, for rollouts.
    pub fn forward_plain(&self, x: &Tensor) -> Tensor {
        let mut out = x.matmul(&self.w);
        for r in 0..out.rows {
            for c in 0..out.cols {
                out.data[r * out.cols + c] += self.b.data[c];
            }
        }
        out
    }
}

#[derive(Clone, Copy)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl LinearVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let xw = g.matmul(x, self.w);
        g.add_row(xw, self.b)
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![self.w, self.b]
    }
}

/// Gated recurrent unit cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GruCell {
    pub hidden: usize,
    pub update: GruGate,
    pub reset: GruGate,
    pub candidate: GruGate,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GruGate {
    pub w: Tensor, // in x hidden
    pub u: Tensor, // hidden x hidden
    pub b: Tensor, // 1 x hidden
}

impl GruGate {
    fn new(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: xavier(input, hidden, rng),
            u: xavier(hidden, hidden, rng),
            b: Tensor::zeros(1, hidden),
        }
    }
}

impl GruCell {
    pub fn new(input: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            hidden,
            update: GruGate::new(input, hidden, rng),
            reset: GruGate::new(input, hidden, rng),
            candidate: GruGate::new(input, hidden, rng),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.update.w,
            &self.update.u,
            &self.update.b,
            &self.reset.w,
            &self.reset.u,
            &self.reset.b,
            &self.candidate.w,
            &self.candidate.u,
            &self.candidate.b,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.update.w,
            &mut self.update.u,
            &mut self.update.b,
            &mut self.reset.w,
            &mut self.reset.u,
            &mut self.reset.b,
            &mut self.candidate.w,
            &mut self.candidate.u,
            &mut self.candidate.b,
        ]
    }

    pub fn inject(&self, g: &mut Graph, trainable: bool) -> GruVars {
        let mut leaf = |t: &Tensor| if trainable { g.input(t.clone()) } else { g.constant(t.clone()) };
        GruVars {
            update: (leaf(&self.update.w), leaf(&self.update.u), leaf(&self.update.b)),
            reset: (leaf(&self.reset.w), leaf(&self.reset.u), leaf(&self.reset.b)),
            candidate: (leaf(&self.candidate.w), leaf(&self.candidate.u), leaf(&self.candidate.b)),
        }
    }

    /// One recurrence step without a graph, for rollouts.
    pub fn step_plain(&self, x: &Tensor, h: &Tensor) -> Tensor {
        let gate = |g: &GruGate, hin: &Tensor| {
            let mut pre = x.matmul(&g.w);
            pre.add_assign(&hin.matmul(&g.u));
            pre.add_assign(&g.b);
            pre
        };
        let z = gate(&self.update, h).map(|v| 1.0 / (1.0 + (-v).exp()));
        let r = gate(&self.reset, h).map(|v| 1.0 / (1.0 + (-v).exp()));
        let rh = r.mul(h);
        let cand = gate(&self.candidate, &rh).map(f64::tanh);
        Tensor::from_fn(1, self.hidden, |_, c| {
            z.data[c] * h.data[c] + (1.0 - z.data[c]) * cand.data[c]
        })
    }
}

#[derive(Clone, Copy)]
pub struct GruVars {
    pub update: (Var, Var, Var),
    pub reset: (Var, Var, Var),
    pub candidate: (Var, Var, Var),
}

impl GruVars {
    fn gate(g: &mut Graph, x: Var, h: Var, (w, u, b): (Var, Var, Var)) -> Var {
        let xw = g.matmul(x, w);
        let hu = g.matmul(h, u);
        let s = g.add(xw, hu);
        g.add_row(s, b)
    }

    /// One step: `(x 1 x in, h 1 x hidden) -> h' 1 x hidden`.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Var {
        let z_pre = Self::gate(g, x, h, self.update);
        let z = g.sigmoid(z_pre);
        let r_pre = Self::gate(g, x, h, self.reset);
        let r = g.sigmoid(r_pre);
        let rh = g.mul(r, h);
        let cand_pre = Self::gate(g, x, rh, self.candidate);
        let cand = g.tanh(cand_pre);
        // h' = z * h + (1 - z) * cand
        let zh = g.mul(z, h);
        let zc = g.mul(z, cand);
        let c_minus = g.sub(cand, zc);
        g.add(zh, c_minus)
    }

    pub fn vars(&self) -> Vec<Var> {
        vec![
            self.update.0,
            self.update.1,
            self.update.2,
            self.reset.0,
            self.reset.1,
            self.reset.2,
            self.candidate.0,
            self.candidate.1,
            self.candidate.2,
        ]
    }
}

/// Feedforward network with tanh hidden activations and a linear output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        Self { layers }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(Linear::tensors).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(Linear::tensors_mut).collect()
    }

    pub fn inject(&self, g: &mut Graph, trainable: bool) -> MlpVars {
        MlpVars { layers: self.layers.iter().map(|l| l.inject(g, trainable)).collect() }
    }

    pub fn forward_plain(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward_plain(&h);
            if i != last {
                h = h.map(f64::tanh);
            }
        }
        h
    }
}

#[derive(Clone)]
pub struct MlpVars {
    pub layers: Vec<LinearVars>,
}

impl MlpVars {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h);
            if i != last {
                h = g.tanh(h);
            }
        }
        h
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(LinearVars::vars).collect()
    }
}

/// Adam with bias correction. Moment buffers are created on first use and
/// serialized with checkpoints so resumed runs continue identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len(), "param/grad count mismatch");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.rows, p.cols)).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads.iter()).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape(), "param/grad shape mismatch");
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m.data[i] / b1t;
                let vhat = v.data[i] / b2t;
                p.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm: f64 = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data.iter_mut() {
                *x *= k;
            }
        }
    }
    norm
}
