//! Fixed-topology tanh MLP velocity network with hand-chained reverse-mode
//! gradients.
//!
//! The network maps `latent ⊕ condition ⊕ t` to a velocity with the latent's
//! dimension. Hidden layers use `tanh`; the head is linear. Everything is
//! batched over rows so that sampling a whole rollout group, or evaluating a
//! surrogate over many `(member, step)` pairs, is a handful of GEMM calls.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Architecture descriptor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArch {
    pub latent_dim: usize,
    pub cond_dim: usize,
    pub hidden: Vec<usize>,
}

impl MlpArch {
    pub fn new(latent_dim: usize, cond_dim: usize, hidden: Vec<usize>) -> Self {
        Self {
            latent_dim,
            cond_dim,
            hidden,
        }
    }

    /// `latent ⊕ cond ⊕ t`
    pub fn input_dim(&self) -> usize {
        self.latent_dim + self.cond_dim + 1
    }

    pub fn output_dim(&self) -> usize {
        self.latent_dim
    }

    /// `(fan_in, fan_out)` for every layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim();
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output_dim()));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Shapes of the parameter tensors in declaration order
    /// (`w0, b0, w1, b1, ...`, weights stored `[fan_out, fan_in]`).
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layer_dims()
            .into_iter()
            .flat_map(|(i, o)| [vec![o, i], vec![o]])
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::invalid(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }
}

/// Anything that is an ordered list of parameter tensors.
pub trait ParamTensors {
    fn tensors(&self) -> &[Tensor];
    fn tensors_mut(&mut self) -> &mut [Tensor];

    fn num_params(&self) -> usize {
        self.tensors().iter().map(Tensor::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    arch: MlpArch,
    tensors: Vec<Tensor>,
}

/// One tensor per parameter tensor, same order and shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub tensors: Vec<Tensor>,
}

impl ParamTensors for MlpParams {
    fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }
    fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }
}

impl ParamTensors for GradientBundle {
    fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }
    fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }
}

impl GradientBundle {
    pub fn zeros_like<P: ParamTensors + ?Sized>(params: &P) -> Self {
        Self {
            tensors: params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
        }
    }

    pub fn is_congruent<P: ParamTensors + ?Sized>(&self, params: &P) -> bool {
        self.tensors.len() == params.tensors().len()
            && self
                .tensors
                .iter()
                .zip(params.tensors())
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn scale(&mut self, k: f64) {
        for t in &mut self.tensors {
            for x in t.data_mut() {
                *x *= k;
            }
        }
    }

    pub fn add_scaled(&mut self, k: f64, other: &GradientBundle) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::invalid("gradient bundles of different length"));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.axpy(k, b)?;
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::norm_sq).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &GradientBundle) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// `(tensor, element)` of the first non-finite entry.
    pub fn first_non_finite(&self) -> Option<(usize, usize)> {
        self.tensors
            .iter()
            .enumerate()
            .find_map(|(i, t)| t.first_non_finite().map(|j| (i, j)))
    }
}

/// Activations recorded by [`MlpParams::forward_batch`], consumed by
/// [`MlpParams::backward`].
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    arch: Option<MlpArch>,
    rows: usize,
    /// Input to every layer: the assembled input, then each hidden activation.
    layer_inputs: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn rows(&self) -> usize {
        self.rows
    }
}

impl MlpParams {
    pub fn zeros(arch: MlpArch) -> Result<Self> {
        arch.validate()?;
        let tensors = arch.param_shapes().iter().map(|s| Tensor::zeros(s)).collect();
        Ok(Self { arch, tensors })
    }

    /// He-style uniform init, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`; zero biases.
    pub fn init<R: Rng + ?Sized>(arch: MlpArch, rng: &mut R) -> Result<Self> {
        let mut params = Self::zeros(arch)?;
        let dims = params.arch.layer_dims();
        for (l, (fan_in, _)) in dims.into_iter().enumerate() {
            let bound = (6.0 / fan_in as f64).sqrt();
            for w in params.tensors[2 * l].data_mut() {
                *w = rng.gen_range(-bound..bound);
            }
        }
        Ok(params)
    }

    pub fn from_tensors(arch: MlpArch, tensors: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        if shapes.len() != tensors.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (s, t) in shapes.iter().zip(&tensors) {
            if s.as_slice() != t.shape() {
                return Err(Error::Shape {
                    expected: s.clone(),
                    actual: t.shape().to_vec(),
                });
            }
        }
        Ok(Self { arch, tensors })
    }

    pub fn arch(&self) -> &MlpArch {
        &self.arch
    }

    pub fn weight(&self, layer: usize) -> &Tensor {
        &self.tensors[2 * layer]
    }

    pub fn bias(&self, layer: usize) -> &Tensor {
        &self.tensors[2 * layer + 1]
    }

    pub fn weight_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.tensors[2 * layer]
    }

    pub fn bias_mut(&mut self, layer: usize) -> &mut Tensor {
        &mut self.tensors[2 * layer + 1]
    }

    pub fn num_layers(&self) -> usize {
        self.tensors.len() / 2
    }

    /// FNV-1a over the parameter bit patterns; identifies a policy snapshot.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for x in t.data() {
                for byte in x.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Single-sample forward pass. `latent` may have any shape whose size is
    /// the latent dimension; the result has the same shape.
    pub fn forward(&self, latent: &Tensor, cond: &Tensor, t: f64) -> Result<Tensor> {
        let out = self.evaluate_batch(latent.data(), cond.data(), &[t])?;
        Tensor::new(latent.shape().to_vec(), out)
    }

    /// Forward pass over `rows = ts.len()` samples without recording activations.
    pub fn evaluate_batch(&self, latents: &[f64], conds: &[f64], ts: &[f64]) -> Result<Vec<f64>> {
        let mut h = self.assemble(latents, conds, ts)?;
        let rows = ts.len();
        let n_layers = self.num_layers();
        for l in 0..n_layers {
            h = self.layer_forward(l, &h, rows);
            if l + 1 < n_layers {
                h.iter_mut().for_each(|x| *x = x.tanh());
            }
        }
        Ok(h)
    }

    /// Forward pass that keeps what the backward pass needs.
    pub fn forward_batch(
        &self,
        latents: &[f64],
        conds: &[f64],
        ts: &[f64],
    ) -> Result<(Vec<f64>, ForwardCache)> {
        let rows = ts.len();
        let mut layer_inputs = Vec::with_capacity(self.num_layers());
        let mut h = self.assemble(latents, conds, ts)?;
        let n_layers = self.num_layers();
        for l in 0..n_layers {
            let mut next = self.layer_forward(l, &h, rows);
            if l + 1 < n_layers {
                next.iter_mut().for_each(|x| *x = x.tanh());
            }
            layer_inputs.push(h);
            h = next;
        }
        let cache = ForwardCache {
            arch: Some(self.arch.clone()),
            rows,
            layer_inputs,
        };
        Ok((h, cache))
    }

    /// Gradient of `sum(upstream ⊙ output)` with respect to every parameter.
    /// `upstream` is `rows × latent_dim`, row-major.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64]) -> Result<GradientBundle> {
        match &cache.arch {
            None => return Err(Error::State("backward called without a forward pass".into())),
            Some(a) if *a != self.arch => {
                return Err(Error::State("forward cache belongs to a different architecture".into()))
            }
            _ => {}
        }
        let rows = cache.rows;
        let out_dim = self.arch.output_dim();
        if upstream.len() != rows * out_dim {
            return Err(Error::Shape {
                expected: vec![rows, out_dim],
                actual: vec![upstream.len()],
            });
        }
        let mut grads = GradientBundle::zeros_like(self);
        let n_layers = self.num_layers();
        let mut delta = upstream.to_vec();
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.weight(l).shape()[1], self.weight(l).shape()[0]);
            let input = &cache.layer_inputs[l];
            // dW = delta^T · input
            unsafe {
                matrixmultiply::dgemm(
                    fan_out,
                    rows,
                    fan_in,
                    1.0,
                    delta.as_ptr(),
                    1,
                    fan_out as isize,
                    input.as_ptr(),
                    fan_in as isize,
                    1,
                    0.0,
                    grads.tensors[2 * l].data_mut().as_mut_ptr(),
                    fan_in as isize,
                    1,
                );
            }
            let db = grads.tensors[2 * l + 1].data_mut();
            for r in 0..rows {
                for (o, g) in db.iter_mut().enumerate() {
                    *g += delta[r * fan_out + o];
                }
            }
            if l == 0 {
                break;
            }
            // delta_prev = (delta · W) ⊙ (1 - h²), h = tanh output of layer l-1
            let mut prev = vec![0.0; rows * fan_in];
            unsafe {
                matrixmultiply::dgemm(
                    rows,
                    fan_out,
                    fan_in,
                    1.0,
                    delta.as_ptr(),
                    fan_out as isize,
                    1,
                    self.weight(l).data().as_ptr(),
                    fan_in as isize,
                    1,
                    0.0,
                    prev.as_mut_ptr(),
                    fan_in as isize,
                    1,
                );
            }
            for (p, &h) in prev.iter_mut().zip(input) {
                *p *= 1.0 - h * h;
            }
            delta = prev;
        }
        Ok(grads)
    }

    fn assemble(&self, latents: &[f64], conds: &[f64], ts: &[f64]) -> Result<Vec<f64>> {
        let rows = ts.len();
        let (d, c) = (self.arch.latent_dim, self.arch.cond_dim);
        if rows == 0 {
            return Err(Error::invalid("empty batch"));
        }
        if latents.len() != rows * d {
            return Err(Error::Shape {
                expected: vec![rows, d],
                actual: vec![latents.len()],
            });
        }
        if conds.len() != rows * c {
            return Err(Error::Shape {
                expected: vec![rows, c],
                actual: vec![conds.len()],
            });
        }
        if let Some(t) = ts.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::invalid(format!("time {t} outside [0, 1]")));
        }
        let width = self.arch.input_dim();
        let mut x = Vec::with_capacity(rows * width);
        for r in 0..rows {
            x.extend_from_slice(&latents[r * d..(r + 1) * d]);
            x.extend_from_slice(&conds[r * c..(r + 1) * c]);
            x.push(ts[r]);
        }
        Ok(x)
    }

    fn layer_forward(&self, l: usize, input: &[f64], rows: usize) -> Vec<f64> {
        let w = self.weight(l);
        let (fan_out, fan_in) = (w.shape()[0], w.shape()[1]);
        let b = self.bias(l).data();
        let mut out = Vec::with_capacity(rows * fan_out);
        for _ in 0..rows {
            out.extend_from_slice(b);
        }
        // out += input · W^T
        unsafe {
            matrixmultiply::dgemm(
                rows,
                fan_in,
                fan_out,
                1.0,
                input.as_ptr(),
                fan_in as isize,
                1,
                w.data().as_ptr(),
                1,
                fan_in as isize,
                1.0,
                out.as_mut_ptr(),
                fan_out as isize,
                1,
            );
        }
        out
    }
}

/// Central-difference gradient of `loss` at `params`, one coordinate at a time.
pub fn finite_diff_gradient<P, F>(mut loss: F, params: &P, h: f64) -> GradientBundle
where
    P: ParamTensors + Clone,
    F: FnMut(&P) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut grads = GradientBundle::zeros_like(params);
    let mut probe = params.clone();
    for ti in 0..params.tensors().len() {
        for j in 0..params.tensors()[ti].len() {
            let orig = params.tensors()[ti].data()[j];
            probe.tensors_mut()[ti].data_mut()[j] = orig + h;
            let plus = loss(&probe);
            probe.tensors_mut()[ti].data_mut()[j] = orig - h;
            let minus = loss(&probe);
            probe.tensors_mut()[ti].data_mut()[j] = orig;
            grads.tensors[ti].data_mut()[j] = (plus - minus) / (2.0 * h);
        }
    }
    grads
}
