//! Residual MLP used as the raw denoiser network, with a hand-written
//! reverse pass for training and a forward-mode pass for Jacobian-vector
//! products.
//!
//! Architecture, for input `x` (dim) and noise label `c`:
//!
//! ```text
//! h_0     = W_in x + b_in + W_t emb(c)
//! h_{l+1} = h_l + W_l act(h_l) + b_l          l = 0..depth
//! F       = W_out act(h_depth) + b_out
//! ```
//!
//! `emb` is a fixed sinusoidal embedding of the noise label.

use rand::Rng;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{gemm, linear, Matrix};
use crate::rng::gaussian;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// `x * sigmoid(x)`.
    Silu,
    /// Linear network; used to check derivative code against closed forms.
    Identity,
}

impl Activation {
    pub fn code(self) -> u32 {
        match self {
            Activation::Silu => 0,
            Activation::Identity => 1,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Activation::Silu),
            1 => Ok(Activation::Identity),
            c => Err(Error::Format(format!("unknown activation code {c}"))),
        }
    }

    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x * sigmoid(x),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Architecture constants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpConfig {
    pub dim: usize,
    pub width: usize,
    pub depth: usize,
    pub time_dim: usize,
    pub activation: Activation,
}

impl MlpConfig {
    pub const DEFAULT_WIDTH: usize = 1024;
    pub const DEFAULT_DEPTH: usize = 6;
    pub const DEFAULT_TIME_DIM: usize = 256;

    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            width: Self::DEFAULT_WIDTH,
            depth: Self::DEFAULT_DEPTH,
            time_dim: Self::DEFAULT_TIME_DIM,
            activation: Activation::Silu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.width == 0 {
            return Err(Error::Argument("MLP dim and width must be positive".into()));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::Argument(format!(
                "time embedding dimension must be even and >= 2, got {}",
                self.time_dim
            )));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let (d, w, t) = (self.dim, self.width, self.time_dim);
        w * d + w + w * t + self.depth * (w * w + w) + d * w + d
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub w: Matrix,
    pub b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    config: MlpConfig,
    pub w_in: Matrix,
    pub b_in: Vec<f64>,
    pub w_time: Matrix,
    pub blocks: Vec<ResidualBlock>,
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

/// Sinusoidal features of a scalar noise label: `[cos(c f_i), sin(c f_i)]`
/// with frequencies `f_i = 10000^(-i/(half-1))`.
pub fn time_embedding(c_noise: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = if half > 1 {
            (1.0f64 / 10000.0).powf(i as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        let (s, c) = (c_noise * freq).sin_cos();
        out[i] = c;
        out[half + i] = s;
    }
    out
}

/// Activations kept from a batched forward pass.
pub struct ForwardCache {
    input: Matrix,
    embedding: Matrix,
    hidden: Vec<Matrix>,
}

impl MlpParams {
    /// All-zero parameters.
    pub fn zeros(config: MlpConfig) -> Self {
        let (d, w, t) = (config.dim, config.width, config.time_dim);
        Self {
            config,
            w_in: Matrix::zeros(w, d),
            b_in: vec![0.0; w],
            w_time: Matrix::zeros(w, t),
            blocks: (0..config.depth)
                .map(|_| ResidualBlock {
                    w: Matrix::zeros(w, w),
                    b: vec![0.0; w],
                })
                .collect(),
            w_out: Matrix::zeros(d, w),
            b_out: vec![0.0; d],
        }
    }

    /// Gaussian weights with standard deviation `1/sqrt(fan_in)`, zero biases
    /// and a zero output layer.
    pub fn init(config: MlpConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        fill_gaussian(&mut p.w_in, rng);
        fill_gaussian(&mut p.w_time, rng);
        for b in &mut p.blocks {
            fill_gaussian(&mut b.w, rng);
        }
        Ok(p)
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    /// Parameter tensors in canonical order (the on-disk order).
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![self.w_in.as_slice(), &self.b_in, self.w_time.as_slice()];
        for b in &self.blocks {
            v.push(b.w.as_slice());
            v.push(&b.b);
        }
        v.push(self.w_out.as_slice());
        v.push(&self.b_out);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![
            self.w_in.as_mut_slice(),
            &mut self.b_in,
            self.w_time.as_mut_slice(),
        ];
        for b in &mut self.blocks {
            v.push(b.w.as_mut_slice());
            v.push(&mut b.b);
        }
        v.push(self.w_out.as_mut_slice());
        v.push(&mut self.b_out);
        v
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_dim(self.param_count(), flat.len())?;
        let mut off = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[off..off + t.len()]);
            off += t.len();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn activate(&self, h: &Matrix) -> Matrix {
        let act = self.config.activation;
        let data = h.as_slice().iter().map(|&x| act.apply(x)).collect();
        Matrix::from_vec(h.rows(), h.cols(), data).unwrap()
    }

    /// Forward pass over a batch (`batch x dim`) with one noise label per row.
    pub fn forward_batch(&self, x: &Matrix, c_noise: &[f64]) -> Result<(Matrix, ForwardCache)> {
        check_dim(self.config.dim, x.cols())?;
        check_dim(x.rows(), c_noise.len())?;
        let t = self.config.time_dim;
        let mut emb = Matrix::zeros(x.rows(), t);
        for (r, &c) in c_noise.iter().enumerate() {
            emb.row_mut(r).copy_from_slice(&time_embedding(c, t));
        }
        let mut h = linear(x, &self.w_in, Some(&self.b_in));
        gemm(1.0, &emb, false, &self.w_time, true, 1.0, &mut h);
        let mut hidden = Vec::with_capacity(self.config.depth + 1);
        for block in &self.blocks {
            let branch = linear(&self.activate(&h), &block.w, Some(&block.b));
            let mut next = h.clone();
            for (n, b) in next.as_mut_slice().iter_mut().zip(branch.as_slice()) {
                *n += b;
            }
            hidden.push(h);
            h = next;
        }
        let out = linear(&self.activate(&h), &self.w_out, Some(&self.b_out));
        hidden.push(h);
        Ok((
            out,
            ForwardCache {
                input: x.clone(),
                embedding: emb,
                hidden,
            },
        ))
    }

    /// Reverse pass: given `dL/dF` for every row of the cached batch, returns
    /// the parameter gradients and `dL/dx`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Matrix) -> Result<(MlpParams, Matrix)> {
        check_dim(cache.input.rows(), grad_out.rows())?;
        check_dim(self.config.dim, grad_out.cols())?;
        let act = self.config.activation;
        let batch = grad_out.rows();
        let width = self.config.width;
        let mut grads = MlpParams::zeros(self.config);

        let h_last = &cache.hidden[self.config.depth];
        gemm(1.0, grad_out, true, &self.activate(h_last), false, 0.0, &mut grads.w_out);
        column_sums_into(grad_out, &mut grads.b_out);

        let mut d_act = Matrix::zeros(batch, width);
        gemm(1.0, grad_out, false, &self.w_out, false, 0.0, &mut d_act);
        let mut d_h = hadamard_derivative(&d_act, h_last, act);

        for l in (0..self.config.depth).rev() {
            let h = &cache.hidden[l];
            let g = &mut grads.blocks[l];
            gemm(1.0, &d_h, true, &self.activate(h), false, 0.0, &mut g.w);
            column_sums_into(&d_h, &mut g.b);
            gemm(1.0, &d_h, false, &self.blocks[l].w, false, 0.0, &mut d_act);
            let through_branch = hadamard_derivative(&d_act, h, act);
            for (a, b) in d_h.as_mut_slice().iter_mut().zip(through_branch.as_slice()) {
                *a += b;
            }
        }

        gemm(1.0, &d_h, true, &cache.input, false, 0.0, &mut grads.w_in);
        column_sums_into(&d_h, &mut grads.b_in);
        gemm(1.0, &d_h, true, &cache.embedding, false, 0.0, &mut grads.w_time);
        let mut d_x = Matrix::zeros(batch, self.config.dim);
        gemm(1.0, &d_h, false, &self.w_in, false, 0.0, &mut d_x);
        Ok((grads, d_x))
    }

    /// Single-input forward pass that also pushes tangent directions through
    /// the network. Returns `F(x)` and `J_x F * v` for every `v` in `tangents`.
    ///
    /// The primal and all tangents share one matrix, so every layer reads its
    /// weights once regardless of the number of tangents.
    pub fn forward_with_tangents(
        &self,
        x: &[f64],
        c_noise: f64,
        tangents: &[&[f64]],
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let d = self.config.dim;
        check_dim(d, x.len())?;
        for v in tangents {
            check_dim(d, v.len())?;
        }
        let act = self.config.activation;
        let rows = 1 + tangents.len();
        let mut m = Matrix::zeros(rows, d);
        m.row_mut(0).copy_from_slice(x);
        for (k, v) in tangents.iter().enumerate() {
            m.row_mut(k + 1).copy_from_slice(v);
        }
        let emb = Matrix::from_vec(1, self.config.time_dim, time_embedding(c_noise, self.config.time_dim))?;
        let t_proj = linear(&emb, &self.w_time, None);

        let mut h = linear(&m, &self.w_in, None);
        for ((o, b), t) in h.row_mut(0).iter_mut().zip(&self.b_in).zip(t_proj.row(0)) {
            *o += b + t;
        }
        for block in &self.blocks {
            let a = tangent_activate(&h, act);
            let branch = linear(&a, &block.w, None);
            for (o, b) in h.as_mut_slice().iter_mut().zip(branch.as_slice()) {
                *o += b;
            }
            for (o, b) in h.row_mut(0).iter_mut().zip(&block.b) {
                *o += b;
            }
        }
        let a = tangent_activate(&h, act);
        let mut out = linear(&a, &self.w_out, None);
        for (o, b) in out.row_mut(0).iter_mut().zip(&self.b_out) {
            *o += b;
        }
        let primal = out.row(0).to_vec();
        let tangents_out = (1..rows).map(|k| out.row(k).to_vec()).collect();
        Ok((primal, tangents_out))
    }

    pub fn forward(&self, x: &[f64], c_noise: f64) -> Result<Vec<f64>> {
        Ok(self.forward_with_tangents(x, c_noise, &[])?.0)
    }

    /// `(dF/dx) v` with parameters and noise label held fixed.
    pub fn jvp(&self, x: &[f64], c_noise: f64, v: &[f64]) -> Result<Vec<f64>> {
        let (_, mut t) = self.forward_with_tangents(x, c_noise, &[v])?;
        Ok(t.pop().unwrap())
    }
}

fn fill_gaussian(m: &mut Matrix, rng: &mut impl Rng) {
    let scale = 1.0 / (m.cols() as f64).sqrt();
    for v in m.as_mut_slice() {
        *v = gaussian(rng) * scale;
    }
}

fn column_sums_into(m: &Matrix, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for r in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
}

fn hadamard_derivative(grad: &Matrix, pre: &Matrix, act: Activation) -> Matrix {
    let data = grad
        .as_slice()
        .iter()
        .zip(pre.as_slice())
        .map(|(g, &x)| g * act.derivative(x))
        .collect();
    Matrix::from_vec(grad.rows(), grad.cols(), data).unwrap()
}

/// Row 0 holds the primal pre-activation; rows 1.. hold tangents.
fn tangent_activate(h: &Matrix, act: Activation) -> Matrix {
    let mut a = Matrix::zeros(h.rows(), h.cols());
    let primal = h.row(0);
    for (o, &x) in a.row_mut(0).iter_mut().zip(primal) {
        *o = act.apply(x);
    }
    if h.rows() > 1 {
        let slope: Vec<f64> = primal.iter().map(|&x| act.derivative(x)).collect();
        for r in 1..h.rows() {
            for ((o, t), s) in a.row_mut(r).iter_mut().zip(h.row(r)).zip(&slope) {
                *o = t * s;
            }
        }
    }
    a
}

/// Cosine decay from `base` at step 0 to zero at `total`.
pub fn cosine_lr(base: f64, step: u64, total: u64) -> f64 {
    if total == 0 {
        return base;
    }
    let progress = (step as f64 / total as f64).min(1.0);
    0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(params: &MlpParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut MlpParams, grads: &MlpParams, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
