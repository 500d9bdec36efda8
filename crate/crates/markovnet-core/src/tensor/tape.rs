//! Reverse-mode autodiff on a linear tape.
//!
//! Each recorded operation stores the ids of its inputs, so the tape is in
//! topological order by construction and one backward sweep visits every op
//! exactly once, in reverse. Graphs are rebuilt per training step; leaves
//! copy their tensors in, and gradients are read back out by id.

use rayon::prelude::*;

use super::conv::{self, ConvDims, Padding};
use super::Tensor;
use crate::scalar::Real;
use crate::{Error, Result};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VarId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running batch-norm statistics, owned by the layer, updated at forward
/// time in train mode.
#[derive(Clone, Debug)]
pub struct RunningStats<R> {
    pub mean: Vec<R>,
    pub var: Vec<R>,
    pub momentum: R,
    pub eps: R,
}

impl<R: Real> RunningStats<R> {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        RunningStats {
            mean: vec![R::zero(); channels],
            var: vec![R::one(); channels],
            momentum: R::of(momentum),
            eps: R::of(eps),
        }
    }
}

enum Op<R> {
    Leaf,
    Conv2d {
        input: VarId,
        kernels: VarId,
        bias: VarId,
        dims: ConvDims,
    },
    Affine {
        input: VarId,
        weight: VarId,
        bias: VarId,
    },
    BatchNorm {
        input: VarId,
        gamma: VarId,
        beta: VarId,
        // Statistics actually used for normalization (batch stats in train
        // mode, running stats in eval mode), saved for the backward pass.
        mean: Vec<R>,
        inv_std: Vec<R>,
        train: bool,
    },
    Tanh {
        input: VarId,
    },
    LeakyRelu {
        input: VarId,
        slope: R,
    },
    Reshape {
        input: VarId,
    },
    MseLoss {
        pred: VarId,
        target: VarId,
    },
}

struct Node<R> {
    shape: Vec<usize>,
    data: Vec<R>,
    grad: Option<Vec<R>>,
    needs_grad: bool,
    op: Op<R>,
}

/// Autodiff tape: ops are recorded in call order and replayed backward.
pub struct Tape<R: Real> {
    nodes: Vec<Node<R>>,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Copy a tensor onto the tape as a leaf node.
    pub fn leaf(&mut self, t: &Tensor<R>) -> VarId {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    pub fn shape(&self, id: VarId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: VarId) -> &[R] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: VarId) -> Option<&[R]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn to_tensor(&self, id: VarId) -> Tensor<R> {
        Tensor::from_vec(&self.nodes[id.0].shape, self.nodes[id.0].data.clone())
            .expect("tape node is internally consistent")
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<R>, needs_grad: bool, op: Op<R>) -> VarId {
        self.nodes.push(Node { shape, data, grad: None, needs_grad, op });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Standard cross-correlation with zero padding, stride 1.
    pub fn conv2d(&mut self, input: VarId, kernels: VarId, bias: VarId, padding: Padding) -> Result<VarId> {
        let dims = ConvDims::resolve(
            self.shape(input),
            self.shape(kernels),
            self.shape(bias),
            padding,
        )?;
        let out = conv::forward(self.data(input), self.data(kernels), self.data(bias), &dims);
        let needs = self.needs(&[input, kernels, bias]);
        Ok(self.push(
            vec![dims.n, dims.cout, dims.oh, dims.ow],
            out,
            needs,
            Op::Conv2d { input, kernels, bias, dims },
        ))
    }

    /// `y = x·Wᵀ + b` for `x: [N, Din]`, `W: [Dout, Din]`, `b: [Dout]`.
    pub fn affine(&mut self, input: VarId, weight: VarId, bias: VarId) -> Result<VarId> {
        let (n, din) = match self.shape(input) {
            [n, d] => (*n, *d),
            s => return Err(Error::contract(format!("affine input must be 2-D, got {s:?}"))),
        };
        let (dout, wdin) = match self.shape(weight) {
            [o, i] => (*o, *i),
            s => return Err(Error::contract(format!("affine weight must be 2-D, got {s:?}"))),
        };
        if wdin != din {
            return Err(Error::contract(format!(
                "affine dimension mismatch: input width {din}, weight expects {wdin}"
            )));
        }
        if self.shape(bias) != [dout] {
            return Err(Error::contract(format!(
                "affine bias shape {:?} does not match {dout} outputs",
                self.shape(bias)
            )));
        }
        let mut out = vec![R::zero(); n * dout];
        // x[N,Din] · Wᵀ — W is stored [Dout,Din], so use transposed strides.
        R::gemm_strided(n, din, dout, R::one(), self.data(input), din, 1, self.data(weight), 1, din, R::zero(), &mut out);
        let b = self.data(bias);
        for row in out.chunks_mut(dout) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let needs = self.needs(&[input, weight, bias]);
        Ok(self.push(vec![n, dout], out, needs, Op::Affine { input, weight, bias }))
    }

    /// Per-channel batch normalization over `[N, C, H, W]`.
    ///
    /// Train mode normalizes by batch statistics and updates `running` with
    /// its momentum; eval mode normalizes by the running statistics.
    pub fn batch_norm(
        &mut self,
        input: VarId,
        gamma: VarId,
        beta: VarId,
        running: &mut RunningStats<R>,
        mode: BnMode,
    ) -> Result<VarId> {
        let [n, c, h, w]: [usize; 4] = self
            .shape(input)
            .try_into()
            .map_err(|_| Error::contract(format!("batch_norm input must be 4-D, got {:?}", self.shape(input))))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::contract("batch_norm gamma/beta must have one entry per channel".to_string()));
        }
        if running.mean.len() != c {
            return Err(Error::contract("batch_norm running stats channel mismatch".to_string()));
        }
        if mode == BnMode::Train && n < 2 {
            return Err(Error::contract(format!(
                "batch_norm train mode needs at least 2 samples, got {n}"
            )));
        }

        let hw = h * w;
        let m = n * hw;
        let x = &self.nodes[input.0].data;
        let (mean, var) = match mode {
            BnMode::Train => {
                let mut mean = vec![R::zero(); c];
                let mut var = vec![R::zero(); c];
                for ch in 0..c {
                    let mut s = R::zero();
                    for ni in 0..n {
                        for &v in &x[(ni * c + ch) * hw..(ni * c + ch + 1) * hw] {
                            s += v;
                        }
                    }
                    let mu = s / R::of(m as f64);
                    let mut sq = R::zero();
                    for ni in 0..n {
                        for &v in &x[(ni * c + ch) * hw..(ni * c + ch + 1) * hw] {
                            let d = v - mu;
                            sq += d * d;
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = sq / R::of(m as f64);
                }
                let mom = running.momentum;
                for ch in 0..c {
                    running.mean[ch] = mom * running.mean[ch] + (R::one() - mom) * mean[ch];
                    running.var[ch] = mom * running.var[ch] + (R::one() - mom) * var[ch];
                }
                (mean, var)
            }
            BnMode::Eval => (running.mean.clone(), running.var.clone()),
        };
        let inv_std: Vec<R> = var.iter().map(|&v| (v + running.eps).sqrt().recip()).collect();

        let g = &self.nodes[gamma.0].data;
        let b = &self.nodes[beta.0].data;
        let mut out = vec![R::zero(); x.len()];
        for ni in 0..n {
            for ch in 0..c {
                let base = (ni * c + ch) * hw;
                let (mu, istd, gv, bv) = (mean[ch], inv_std[ch], g[ch], b[ch]);
                for i in 0..hw {
                    out[base + i] = (x[base + i] - mu) * istd * gv + bv;
                }
            }
        }
        let needs = self.needs(&[input, gamma, beta]);
        Ok(self.push(
            vec![n, c, h, w],
            out,
            needs,
            Op::BatchNorm { input, gamma, beta, mean, inv_std, train: mode == BnMode::Train },
        ))
    }

    pub fn tanh(&mut self, input: VarId) -> VarId {
        let data: Vec<R> = self.nodes[input.0].data.par_iter().map(|&x| x.tanh()).collect();
        let shape = self.nodes[input.0].shape.clone();
        let needs = self.needs(&[input]);
        self.push(shape, data, needs, Op::Tanh { input })
    }

    pub fn leaky_relu(&mut self, input: VarId, slope: f64) -> VarId {
        let s = R::of(slope);
        let data: Vec<R> = self.nodes[input.0]
            .data
            .par_iter()
            .map(|&x| if x > R::zero() { x } else { s * x })
            .collect();
        let shape = self.nodes[input.0].shape.clone();
        let needs = self.needs(&[input]);
        self.push(shape, data, needs, Op::LeakyRelu { input, slope: s })
    }

    pub fn reshape(&mut self, input: VarId, shape: &[usize]) -> Result<VarId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[input.0].data.len() {
            return Err(Error::contract(format!(
                "cannot reshape {:?} into {:?}",
                self.nodes[input.0].shape, shape
            )));
        }
        let data = self.nodes[input.0].data.clone();
        let needs = self.needs(&[input]);
        Ok(self.push(shape.to_vec(), data, needs, Op::Reshape { input }))
    }

    /// `(1/N)·Σₙ‖pred − target‖²`: mean over the batch axis of per-sample
    /// squared Frobenius error.
    pub fn mse_loss(&mut self, pred: VarId, target: VarId) -> Result<VarId> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::contract(format!(
                "mse_loss shape mismatch: {:?} vs {:?}",
                self.shape(pred),
                self.shape(target)
            )));
        }
        let n = self.shape(pred)[0];
        let p = &self.nodes[pred.0].data;
        let t = &self.nodes[target.0].data;
        let mut acc = R::zero();
        for (&a, &b) in p.iter().zip(t) {
            let d = a - b;
            acc += d * d;
        }
        // A non-finite loss is the trainer's divergence signal, not an op
        // error: the value is surfaced, never silently replaced.
        let loss = acc / R::of(n as f64);
        let needs = self.needs(&[pred, target]);
        Ok(self.push(vec![1], vec![loss], needs, Op::MseLoss { pred, target }))
    }

    fn accum(grad: &mut Option<Vec<R>>, len: usize, src: impl Fn(&mut [R])) {
        let g = grad.get_or_insert_with(|| vec![R::zero(); len]);
        src(g);
    }

    /// Reverse sweep from `root` (typically the loss), accumulating
    /// gradients into every node that needs them.
    pub fn backward(&mut self, root: VarId) -> Result<()> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(Error::contract("backward root must be a scalar".to_string()));
        }
        self.nodes[root.0].grad = Some(vec![R::one()]);

        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = self.nodes[i].grad.take() else {
                continue;
            };
            // Split so input nodes can be mutated while op data is read.
            match &self.nodes[i].op {
                Op::Leaf => {}
                &Op::Conv2d { input, kernels, bias, ref dims } => {
                    let dims = *dims;
                    let (dx, dk, db) = conv::backward(
                        &self.nodes[input.0].data,
                        &self.nodes[kernels.0].data,
                        &gout,
                        &dims,
                    );
                    if self.nodes[input.0].needs_grad {
                        let len = dx.len();
                        Self::accum(&mut self.nodes[input.0].grad, len, |g| {
                            for (a, b) in g.iter_mut().zip(&dx) {
                                *a += *b;
                            }
                        });
                    }
                    if self.nodes[kernels.0].needs_grad {
                        let len = dk.len();
                        Self::accum(&mut self.nodes[kernels.0].grad, len, |g| {
                            for (a, b) in g.iter_mut().zip(&dk) {
                                *a += *b;
                            }
                        });
                    }
                    if self.nodes[bias.0].needs_grad {
                        let len = db.len();
                        Self::accum(&mut self.nodes[bias.0].grad, len, |g| {
                            for (a, b) in g.iter_mut().zip(&db) {
                                *a += *b;
                            }
                        });
                    }
                }
                &Op::Affine { input, weight, bias } => {
                    let n = self.nodes[input.0].shape[0];
                    let din = self.nodes[input.0].shape[1];
                    let dout = self.nodes[weight.0].shape[0];
                    if self.nodes[input.0].needs_grad {
                        // dX = dY · W
                        let mut dx = vec![R::zero(); n * din];
                        R::gemm(n, dout, din, R::one(), &gout, &self.nodes[weight.0].data, R::zero(), &mut dx);
                        Self::accum(&mut self.nodes[input.0].grad, n * din, |g| {
                            for (a, b) in g.iter_mut().zip(&dx) {
                                *a += *b;
                            }
                        });
                    }
                    if self.nodes[weight.0].needs_grad {
                        // dW = dYᵀ · X
                        let mut dw = vec![R::zero(); dout * din];
                        R::gemm_strided(dout, n, din, R::one(), &gout, 1, dout, &self.nodes[input.0].data, din, 1, R::zero(), &mut dw);
                        Self::accum(&mut self.nodes[weight.0].grad, dout * din, |g| {
                            for (a, b) in g.iter_mut().zip(&dw) {
                                *a += *b;
                            }
                        });
                    }
                    if self.nodes[bias.0].needs_grad {
                        let mut db = vec![R::zero(); dout];
                        for row in gout.chunks(dout) {
                            for (a, &b) in db.iter_mut().zip(row) {
                                *a += b;
                            }
                        }
                        Self::accum(&mut self.nodes[bias.0].grad, dout, |g| {
                            for (a, b) in g.iter_mut().zip(&db) {
                                *a += *b;
                            }
                        });
                    }
                }
                Op::BatchNorm { input, gamma, beta, mean, inv_std, train } => {
                    let (input, gamma, beta, train) = (*input, *gamma, *beta, *train);
                    let (mean, inv_std) = (mean.clone(), inv_std.clone());
                    let shape = self.nodes[i].shape.clone();
                    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
                    let m = R::of((n * hw) as f64);
                    let x = &self.nodes[input.0].data;
                    let g = &self.nodes[gamma.0].data;

                    let mut dgamma = vec![R::zero(); c];
                    let mut dbeta = vec![R::zero(); c];
                    let mut sum_dy = vec![R::zero(); c];
                    let mut sum_dy_xhat = vec![R::zero(); c];
                    for ni in 0..n {
                        for ch in 0..c {
                            let base = (ni * c + ch) * hw;
                            let (mu, istd) = (mean[ch], inv_std[ch]);
                            for k in 0..hw {
                                let dy = gout[base + k];
                                let xhat = (x[base + k] - mu) * istd;
                                sum_dy[ch] += dy;
                                sum_dy_xhat[ch] += dy * xhat;
                            }
                        }
                    }
                    for ch in 0..c {
                        dgamma[ch] = sum_dy_xhat[ch];
                        dbeta[ch] = sum_dy[ch];
                    }

                    if self.nodes[input.0].needs_grad {
                        let mut dx = vec![R::zero(); x.len()];
                        for ni in 0..n {
                            for ch in 0..c {
                                let base = (ni * c + ch) * hw;
                                let (mu, istd, gv) = (mean[ch], inv_std[ch], g[ch]);
                                if train {
                                    // Batch statistics depend on x.
                                    let a = gv * istd / m;
                                    for k in 0..hw {
                                        let xhat = (x[base + k] - mu) * istd;
                                        dx[base + k] = a * (m * gout[base + k] - sum_dy[ch] - xhat * sum_dy_xhat[ch]);
                                    }
                                } else {
                                    // Running statistics are constants.
                                    let a = gv * istd;
                                    for k in 0..hw {
                                        dx[base + k] = a * gout[base + k];
                                    }
                                }
                            }
                        }
                        let len = dx.len();
                        Self::accum(&mut self.nodes[input.0].grad, len, |gr| {
                            for (a, b) in gr.iter_mut().zip(&dx) {
                                *a += *b;
                            }
                        });
                    }
                    if self.nodes[gamma.0].needs_grad {
                        Self::accum(&mut self.nodes[gamma.0].grad, c, |gr| {
                            for (a, b) in gr.iter_mut().zip(&dgamma) {
                                *a += *b;
                            }
                        });
                    }
                    if self.nodes[beta.0].needs_grad {
                        Self::accum(&mut self.nodes[beta.0].grad, c, |gr| {
                            for (a, b) in gr.iter_mut().zip(&dbeta) {
                                *a += *b;
                            }
                        });
                    }
                }
                &Op::Tanh { input } => {
                    if self.nodes[input.0].needs_grad {
                        let y = &self.nodes[i].data;
                        let dg: Vec<R> = gout
                            .iter()
                            .zip(y)
                            .map(|(&g, &t)| g * (R::one() - t * t))
                            .collect();
                        let len = dg.len();
                        Self::accum(&mut self.nodes[input.0].grad, len, |gr| {
                            for (a, b) in gr.iter_mut().zip(&dg) {
                                *a += *b;
                            }
                        });
                    }
                }
                &Op::LeakyRelu { input, slope } => {
                    if self.nodes[input.0].needs_grad {
                        let x = &self.nodes[input.0].data;
                        let dg: Vec<R> = gout
                            .iter()
                            .zip(x)
                            .map(|(&g, &v)| if v > R::zero() { g } else { g * slope })
                            .collect();
                        let len = dg.len();
                        Self::accum(&mut self.nodes[input.0].grad, len, |gr| {
                            for (a, b) in gr.iter_mut().zip(&dg) {
                                *a += *b;
                            }
                        });
                    }
                }
                &Op::Reshape { input } => {
                    if self.nodes[input.0].needs_grad {
                        let len = gout.len();
                        Self::accum(&mut self.nodes[input.0].grad, len, |gr| {
                            for (a, b) in gr.iter_mut().zip(&gout) {
                                *a += *b;
                            }
                        });
                    }
                }
                &Op::MseLoss { pred, target } => {
                    let n = R::of(self.nodes[pred.0].shape[0] as f64);
                    let scale = gout[0] * R::of(2.0) / n;
                    let diff: Vec<R> = self.nodes[pred.0]
                        .data
                        .iter()
                        .zip(&self.nodes[target.0].data)
                        .map(|(&a, &b)| scale * (a - b))
                        .collect();
                    if self.nodes[pred.0].needs_grad {
                        let len = diff.len();
                        Self::accum(&mut self.nodes[pred.0].grad, len, |gr| {
                            for (a, b) in gr.iter_mut().zip(&diff) {
                                *a += *b;
                            }
                        });
                    }
                    if self.nodes[target.0].needs_grad {
                        let len = diff.len();
                        Self::accum(&mut self.nodes[target.0].grad, len, |gr| {
                            for (a, b) in gr.iter_mut().zip(&diff) {
                                *a -= *b;
                            }
                        });
                    }
                }
            }
            // Interior activations are finished with; leaves keep theirs.
            if !matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad = None;
                if i == root.0 {
                    self.nodes[i].grad = Some(gout);
                }
            } else {
                self.nodes[i].grad = Some(gout);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::{finite_diff_gradient, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let mut t = Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        t.set_requires_grad(true);
        t
    }

    /// Compare the tape gradient of `leaves[check]` against central finite
    /// differences of the scalar loss built by `graph`.
    fn gradcheck(
        graph: &dyn Fn(&mut Tape<f64>, &[Tensor<f64>]) -> VarId,
        leaves: &[Tensor<f64>],
        check: usize,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let loss = graph(&mut tape, leaves);
        tape.backward(loss).unwrap();
        // Leaves are pushed first by every graph builder here, in order.
        let analytic = tape.grad(VarId(check)).expect("leaf gradient").to_vec();

        let base = leaves[check].data().to_vec();
        let mut eval = |x: &[f64]| {
            let mut probe = leaves.to_vec();
            probe[check] =
                Tensor::from_vec(leaves[check].shape(), x.to_vec()).unwrap();
            let mut t = Tape::new();
            let loss = graph(&mut t, &probe);
            t.data(loss)[0]
        };
        let numeric = finite_diff_gradient(&mut eval, &base, 1e-5);
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < tol, "gradient mismatch {err} (tol {tol})");
    }

    #[test]
    fn conv_of_ones_counts_overlap() {
        // 1x1x3x3 ones ⋆ 1x1x3x3 ones, same padding: centre 9, corners 4.
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap());
        let k = tape.leaf(&Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]).unwrap());
        let b = tape.leaf(&Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let y = tape.conv2d(x, k, b, Padding::Same).unwrap();
        let d = tape.data(y);
        assert_eq!(d[4], 9.0);
        for corner in [0, 2, 6, 8] {
            assert_eq!(d[corner], 4.0);
        }
    }

    #[test]
    fn identity_kernel_preserves_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[2, 1, 5, 5]);
        let mut kdata = vec![0.0; 9];
        kdata[4] = 1.0;
        let mut tape = Tape::new();
        let xi = tape.leaf(&x);
        let k = tape.leaf(&Tensor::from_vec(&[1, 1, 3, 3], kdata).unwrap());
        let b = tape.leaf(&Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let y = tape.conv2d(xi, k, b, Padding::Same).unwrap();
        assert_eq!(tape.data(y), x.data());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[2, 2, 8, 8]);
        let k = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        let graph = |t: &mut Tape<f64>, leaves: &[Tensor<f64>]| {
            let x = t.leaf(&leaves[0]);
            let k = t.leaf(&leaves[1]);
            let b = t.leaf(&leaves[2]);
            let y = t.conv2d(x, k, b, Padding::Same).unwrap();
            let zeros = Tensor::zeros(t.shape(y));
            let tgt = t.leaf(&zeros);
            t.mse_loss(y, tgt).unwrap()
        };
        let leaves = [x, k, b];
        for check in 0..3 {
            gradcheck(&graph, &leaves, check, 1e-4);
        }
    }

    #[test]
    fn affine_identity_and_bias_rows() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let eye = tape.leaf(
            &Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let zero_b = tape.leaf(&Tensor::from_vec(&[3], vec![0.0; 3]).unwrap());
        let y = tape.affine(x, eye, zero_b).unwrap();
        assert_eq!(tape.data(y), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);

        let zero_w = tape.leaf(&Tensor::from_vec(&[2, 3], vec![0.0; 6]).unwrap());
        let b = tape.leaf(&Tensor::from_vec(&[2], vec![0.5, -1.5]).unwrap());
        let y2 = tape.affine(x, zero_w, b).unwrap();
        assert_eq!(tape.data(y2), &[0.5, -1.5, 0.5, -1.5]);
    }

    #[test]
    fn affine_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, &[4, 6]);
        let w = rand_tensor(&mut rng, &[5, 6]);
        let b = rand_tensor(&mut rng, &[5]);
        let graph = |t: &mut Tape<f64>, leaves: &[Tensor<f64>]| {
            let x = t.leaf(&leaves[0]);
            let w = t.leaf(&leaves[1]);
            let b = t.leaf(&leaves[2]);
            let y = t.affine(x, w, b).unwrap();
            let zeros = Tensor::zeros(t.shape(y));
            let tgt = t.leaf(&zeros);
            t.mse_loss(y, tgt).unwrap()
        };
        let leaves = [x, w, b];
        for check in 0..3 {
            gradcheck(&graph, &leaves, check, 1e-4);
        }
    }

    #[test]
    fn batch_norm_train_standardizes_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, &[4, 3, 2, 2]);
        let mut tape = Tape::new();
        let xi = tape.leaf(&x);
        let g = tape.leaf(&Tensor::from_vec(&[3], vec![1.0; 3]).unwrap());
        let b = tape.leaf(&Tensor::from_vec(&[3], vec![0.0; 3]).unwrap());
        let mut stats = RunningStats::new(3, 0.9, 1e-5);
        let y = tape.batch_norm(xi, g, b, &mut stats, BnMode::Train).unwrap();
        let d = tape.data(y);
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| d[(n * 3 + ch) * 4..(n * 3 + ch + 1) * 4].to_vec())
                .collect();
            let mean: f64 = vals.iter().sum::<f64>() / 16.0;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6, "channel {ch} mean {mean}");
            // Normalized variance is var/(var+eps), slightly below 1.
            assert!((var - 1.0).abs() < 1e-3, "channel {ch} var {var}");
        }
    }

    #[test]
    fn batch_norm_eval_with_unit_stats_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = rand_tensor(&mut rng, &[2, 2, 3, 3]);
        let mut tape = Tape::new();
        let xi = tape.leaf(&x);
        let g = tape.leaf(&Tensor::from_vec(&[2], vec![1.0; 2]).unwrap());
        let b = tape.leaf(&Tensor::from_vec(&[2], vec![0.0; 2]).unwrap());
        let mut stats = RunningStats::new(2, 0.9, 1e-12);
        let y = tape.batch_norm(xi, g, b, &mut stats, BnMode::Eval).unwrap();
        for (a, e) in tape.data(y).iter().zip(x.data()) {
            assert!((a - e).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_train_requires_two_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[1, 2, 3, 3]);
        let mut tape = Tape::new();
        let xi = tape.leaf(&x);
        let g = tape.leaf(&Tensor::from_vec(&[2], vec![1.0; 2]).unwrap());
        let b = tape.leaf(&Tensor::from_vec(&[2], vec![0.0; 2]).unwrap());
        let mut stats = RunningStats::new(2, 0.9, 1e-5);
        let r = tape.batch_norm(xi, g, b, &mut stats, BnMode::Train);
        assert!(matches!(r, Err(crate::Error::Contract(_))));
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_tensor(&mut rng, &[3, 2, 2, 2]);
        let g = rand_tensor(&mut rng, &[2]);
        let b = rand_tensor(&mut rng, &[2]);
        let skew = {
            // A fixed non-uniform target keeps the loss sensitive to the
            // normalization statistics.
            let mut t = Tensor::zeros(&[3, 2, 2, 2]);
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = (i as f64 * 0.37).sin();
            }
            t
        };
        let graph = move |t: &mut Tape<f64>, leaves: &[Tensor<f64>]| {
            let x = t.leaf(&leaves[0]);
            let g = t.leaf(&leaves[1]);
            let b = t.leaf(&leaves[2]);
            let mut stats = RunningStats::new(2, 0.9, 1e-5);
            let y = t.batch_norm(x, g, b, &mut stats, BnMode::Train).unwrap();
            let tgt = t.leaf(&skew);
            t.mse_loss(y, tgt).unwrap()
        };
        let leaves = [x, g, b];
        for check in 0..3 {
            gradcheck(&graph, &leaves, check, 1e-3);
        }
    }

    #[test]
    fn activation_values_and_ranges() {
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.leaf(&Tensor::from_vec(&[1, 4], vec![0.0, -1.0, 3.0, -15.0]).unwrap());
        let t = tape.tanh(x);
        let d = tape.data(t);
        assert_eq!(d[0], 0.0);
        assert!(d.iter().all(|&v| v > -1.0 && v < 1.0));
        assert!(d[3] < -0.999);

        let l = tape.leaky_relu(x, 0.3);
        let d = tape.data(l);
        assert_eq!(d[1], -0.3);
        assert_eq!(d[2], 3.0);
    }

    #[test]
    fn activation_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        // Keep leaky-relu inputs away from its kink at 0.
        let mut x = rand_tensor(&mut rng, &[3, 7]);
        for v in x.data_mut().iter_mut() {
            if v.abs() < 1e-2 {
                *v += 0.05;
            }
        }
        let tanh_graph = |t: &mut Tape<f64>, leaves: &[Tensor<f64>]| {
            let x = t.leaf(&leaves[0]);
            let y = t.tanh(x);
            let zeros = Tensor::zeros(t.shape(y));
            let tgt = t.leaf(&zeros);
            t.mse_loss(y, tgt).unwrap()
        };
        let lrelu_graph = |t: &mut Tape<f64>, leaves: &[Tensor<f64>]| {
            let x = t.leaf(&leaves[0]);
            let y = t.leaky_relu(x, 0.3);
            let zeros = Tensor::zeros(t.shape(y));
            let tgt = t.leaf(&zeros);
            t.mse_loss(y, tgt).unwrap()
        };
        let leaves = [x];
        gradcheck(&tanh_graph, &leaves, 0, 1e-6);
        gradcheck(&lrelu_graph, &leaves, 0, 1e-6);
    }

    #[test]
    fn mse_loss_examples() {
        let mut tape: Tape<f64> = Tape::new();
        let p = tape.leaf(&Tensor::from_vec(&[2, 6], vec![0.25; 12]).unwrap());
        let same = tape.leaf(&Tensor::from_vec(&[2, 6], vec![0.25; 12]).unwrap());
        let zero = tape.mse_loss(p, same).unwrap();
        assert_eq!(tape.data(zero)[0], 0.0);

        // pred = target + c with E = 6 elements per sample: loss = c²·E.
        let c = 0.3;
        let shifted = tape.leaf(&Tensor::from_vec(&[2, 6], vec![0.25 + c; 12]).unwrap());
        let loss = tape.mse_loss(shifted, p).unwrap();
        assert!((tape.data(loss)[0] - c * c * 6.0).abs() < 1e-12);

        let bad = tape.leaf(&Tensor::from_vec(&[3, 4], vec![0.0; 12]).unwrap());
        assert!(tape.mse_loss(p, bad).is_err());
    }

    #[test]
    fn mse_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let p = rand_tensor(&mut rng, &[4, 5]);
        let mut tgt = rand_tensor(&mut rng, &[4, 5]);
        tgt.set_requires_grad(false);
        let graph = move |t: &mut Tape<f64>, leaves: &[Tensor<f64>]| {
            let p = t.leaf(&leaves[0]);
            let tg = t.leaf(&tgt);
            t.mse_loss(p, tg).unwrap()
        };
        gradcheck(&graph, &[p], 0, 1e-6);
    }

    #[test]
    fn composed_graph_gradient_matches_end_to_end_finite_differences() {
        // conv → leaky_relu → reshape → affine → tanh → mse: one check that
        // the chain rule holds across op boundaries, not just per op.
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = rand_tensor(&mut rng, &[2, 2, 4, 4]);
        let k = rand_tensor(&mut rng, &[2, 2, 3, 3]);
        let kb = rand_tensor(&mut rng, &[2]);
        let w = rand_tensor(&mut rng, &[3, 32]);
        let wb = rand_tensor(&mut rng, &[3]);
        let graph = |t: &mut Tape<f64>, leaves: &[Tensor<f64>]| {
            let x = t.leaf(&leaves[0]);
            let k = t.leaf(&leaves[1]);
            let kb = t.leaf(&leaves[2]);
            let w = t.leaf(&leaves[3]);
            let wb = t.leaf(&leaves[4]);
            let y = t.conv2d(x, k, kb, Padding::Same).unwrap();
            let y = t.leaky_relu(y, 0.3);
            let y = t.reshape(y, &[2, 32]).unwrap();
            let y = t.affine(y, w, wb).unwrap();
            let y = t.tanh(y);
            let zeros = Tensor::zeros(t.shape(y));
            let tgt = t.leaf(&zeros);
            t.mse_loss(y, tgt).unwrap()
        };
        let leaves = [x, k, kb, w, wb];
        for check in 0..5 {
            gradcheck(&graph, &leaves, check, 1e-4);
        }
    }

    #[test]
    fn results_do_not_depend_on_worker_count() {
        // Batch parallelism uses fixed chunking with ordered reduction, so
        // a single-threaded pool must reproduce the default pool bit for
        // bit, forward and backward.
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let x = rand_tensor(&mut rng, &[13, 3, 8, 8]);
        let k = rand_tensor(&mut rng, &[4, 3, 7, 7]);
        let b = rand_tensor(&mut rng, &[4]);
        let run = || {
            let mut t = Tape::new();
            let xi = t.leaf(&x);
            let ki = t.leaf(&k);
            let bi = t.leaf(&b);
            let y = t.conv2d(xi, ki, bi, Padding::Same).unwrap();
            let zeros = Tensor::zeros(t.shape(y));
            let tg = t.leaf(&zeros);
            let loss = t.mse_loss(y, tg).unwrap();
            t.backward(loss).unwrap();
            (t.data(y).to_vec(), t.grad(ki).unwrap().to_vec(), t.grad(xi).unwrap().to_vec())
        };
        let single = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(run);
        let multi = run();
        assert_eq!(single.0, multi.0);
        assert_eq!(single.1, multi.1);
        assert_eq!(single.2, multi.2);
    }

    #[test]
    fn generic_core_also_runs_in_f32() {
        let mut tape: Tape<f32> = Tape::new();
        let x = tape.leaf(
            Tensor::from_vec(&[2, 1, 4, 4], (0..32).map(|i| (i as f32 * 0.37).sin()).collect())
                .unwrap()
                .set_requires_grad(true),
        );
        let k = tape.leaf(
            Tensor::from_vec(&[2, 1, 3, 3], vec![0.1f32; 18]).unwrap().set_requires_grad(true),
        );
        let b = tape.leaf(&Tensor::<f32>::zeros(&[2]));
        let y = tape.conv2d(x, k, b, Padding::Same).unwrap();
        let y = tape.tanh(y);
        let zeros = Tensor::zeros(tape.shape(y));
        let tg = tape.leaf(&zeros);
        let loss = tape.mse_loss(y, tg).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.data(loss)[0].is_finite());
        assert!(tape.grad(k).is_some());
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = rand_tensor(&mut rng, &[8, 2, 8, 8]);
        let k = rand_tensor(&mut rng, &[4, 2, 7, 7]);
        let b = rand_tensor(&mut rng, &[4]);
        let run = || {
            let mut t = Tape::new();
            let xi = t.leaf(&x);
            let ki = t.leaf(&k);
            let bi = t.leaf(&b);
            let y = t.conv2d(xi, ki, bi, Padding::Same).unwrap();
            let zeros = Tensor::zeros(t.shape(y));
            let tg = t.leaf(&zeros);
            let loss = t.mse_loss(y, tg).unwrap();
            t.backward(loss).unwrap();
            (t.data(y).to_vec(), t.grad(ki).unwrap().to_vec())
        };
        let (y1, g1) = run();
        let (y2, g2) = run();
        assert_eq!(y1, y2);
        assert_eq!(g1, g2);
    }
}
