//! Small conditional noise-prediction MLP with hand-written reverse-mode
//! gradients.
//!
//! Input row: `[x (d), sin/cos time features (2F), condition embedding (E)]`.
//! Hidden layers use SiLU; the output layer is linear. All parameters live in
//! one flat vector so optimizers and checkpoints see a single slice:
//!
//! ```text
//! [embedding table (classes + 1) x E, row-major; null row last]
//! for each layer: [W (in x out), row-major] [b (out)]
//! ```

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, EmbeddingDenoiser};
use crate::error::{param, Result};
use crate::schedule::Condition;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub time_frequencies: usize,
    pub embed_dim: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128; 4],
            time_frequencies: 8,
            embed_dim: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerSlot {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

/// A batch of noised training examples for the noise-prediction loss.
#[derive(Debug, Clone)]
pub struct NoiseBatch {
    pub x_t: Array2<f64>,
    pub t: Vec<usize>,
    pub cond: Vec<Condition>,
    pub eps: Array2<f64>,
}

impl NoiseBatch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserMlp {
    dim: usize,
    classes: usize,
    t_max: usize,
    config: MlpConfig,
    layers: Vec<LayerSlot>,
    params: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

fn silu_grad(z: f64) -> f64 {
    let s = sigmoid(z);
    s * (1.0 + z * (1.0 - s))
}

impl DenoiserMlp {
    /// Randomly initialized network; `t_max` normalizes the time features.
    pub fn new(
        dim: usize,
        classes: usize,
        t_max: usize,
        config: MlpConfig,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 || t_max == 0 {
            return Err(param("network dimension and t_max must be positive"));
        }
        if config.hidden.contains(&0) {
            return Err(param("hidden widths must be positive"));
        }
        let mut net = Self::zeroed(dim, classes, t_max, config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let emb_len = (classes + 1) * net.config.embed_dim;
        for p in &mut net.params[..emb_len] {
            *p = unit.sample(&mut rng);
        }
        for slot in net.layers.clone() {
            let scale = (1.0 / slot.fan_in as f64).sqrt();
            for p in &mut net.params[slot.w..slot.w + slot.fan_in * slot.fan_out] {
                *p = scale * unit.sample(&mut rng);
            }
        }
        Ok(net)
    }

    fn zeroed(dim: usize, classes: usize, t_max: usize, config: MlpConfig) -> Self {
        let input = dim + 2 * config.time_frequencies + config.embed_dim;
        let mut offset = (classes + 1) * config.embed_dim;
        let mut layers = Vec::new();
        let mut fan_in = input;
        for &fan_out in config.hidden.iter().chain(std::iter::once(&dim)) {
            let w = offset;
            let b = w + fan_in * fan_out;
            offset = b + fan_out;
            layers.push(LayerSlot {
                w,
                b,
                fan_in,
                fan_out,
            });
            fan_in = fan_out;
        }
        Self {
            dim,
            classes,
            t_max,
            config,
            layers,
            params: vec![0.0; offset],
        }
    }

    /// Rebuilds a network from a stored flat parameter vector.
    pub fn from_params(
        dim: usize,
        classes: usize,
        t_max: usize,
        config: MlpConfig,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut net = Self::zeroed(dim, classes, t_max, config);
        if params.len() != net.params.len() {
            return Err(param(format!(
                "parameter count {} does not match architecture ({})",
                params.len(),
                net.params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn input_width(&self) -> usize {
        self.dim + 2 * self.config.time_frequencies + self.config.embed_dim
    }

    fn embed_offset(&self) -> usize {
        self.dim + 2 * self.config.time_frequencies
    }

    fn embedding_row(&self, cond: Condition) -> Result<usize> {
        match cond {
            Condition::Null => Ok(self.classes),
            Condition::Class(k) if k < self.classes => Ok(k),
            Condition::Class(k) => Err(param(format!("network has no class {k}"))),
        }
    }

    fn embedding_slice(&self, row: usize) -> &[f64] {
        let e = self.config.embed_dim;
        &self.params[row * e..(row + 1) * e]
    }

    fn write_time_features(&self, t: usize, out: &mut [f64]) {
        let tau = t as f64 / self.t_max as f64;
        for j in 0..self.config.time_frequencies {
            let arg = std::f64::consts::PI * (1u64 << j) as f64 * tau;
            out[2 * j] = arg.sin();
            out[2 * j + 1] = arg.cos();
        }
    }

    fn input_row(&self, x: &[f64], t: usize, embedding: &[f64], out: &mut [f64]) {
        out[..self.dim].copy_from_slice(x);
        self.write_time_features(t, &mut out[self.dim..self.embed_offset()]);
        out[self.embed_offset()..].copy_from_slice(embedding);
    }

    fn weights(&self, slot: LayerSlot) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let w = ArrayView2::from_shape(
            (slot.fan_in, slot.fan_out),
            &self.params[slot.w..slot.w + slot.fan_in * slot.fan_out],
        )
        .expect("layer shape");
        let b = ArrayView1::from(&self.params[slot.b..slot.b + slot.fan_out]);
        (w, b)
    }

    /// Forward pass keeping every pre-activation for backprop.
    fn forward_cached(
        &self,
        input: Array2<f64>,
    ) -> (Array2<f64>, Vec<Array2<f64>>, Vec<Array2<f64>>) {
        let mut acts = vec![input];
        let mut pres = Vec::with_capacity(self.layers.len());
        let last = self.layers.len() - 1;
        for (l, slot) in self.layers.iter().enumerate() {
            let (w, b) = self.weights(*slot);
            let z = acts[l].dot(&w) + b;
            if l == last {
                pres.push(z.clone());
                return (z, acts, pres);
            }
            let a = z.mapv(silu);
            pres.push(z);
            acts.push(a);
        }
        unreachable!("network has at least one layer")
    }

    fn forward(&self, input: Array2<f64>) -> Array2<f64> {
        let mut a = input;
        let last = self.layers.len() - 1;
        for (l, slot) in self.layers.iter().enumerate() {
            let (w, b) = self.weights(*slot);
            let z = a.dot(&w) + b;
            a = if l == last { z } else { z.mapv(silu) };
        }
        a
    }

    /// Backprop of `d_out` through cached activations. Returns parameter
    /// gradients (layers only; embedding rows untouched) and input gradients.
    fn backward(
        &self,
        d_out: Array2<f64>,
        acts: &[Array2<f64>],
        pres: &[Array2<f64>],
        grads: &mut [f64],
    ) -> Array2<f64> {
        let mut dz = d_out;
        for l in (0..self.layers.len()).rev() {
            let slot = self.layers[l];
            let (w, _) = self.weights(slot);
            let dw = acts[l].t().dot(&dz);
            let db = dz.sum_axis(Axis(0));
            for (g, v) in grads[slot.w..slot.w + slot.fan_in * slot.fan_out]
                .iter_mut()
                .zip(dw.iter())
            {
                *g += v;
            }
            for (g, v) in grads[slot.b..slot.b + slot.fan_out]
                .iter_mut()
                .zip(db.iter())
            {
                *g += v;
            }
            let da = dz.dot(&w.t());
            if l == 0 {
                return da;
            }
            dz = da * &pres[l - 1].mapv(silu_grad);
        }
        unreachable!("network has at least one layer")
    }

    fn batch_input(&self, batch: &NoiseBatch) -> Result<(Array2<f64>, Vec<usize>)> {
        let n = batch.len();
        if n == 0 {
            return Err(param("empty batch"));
        }
        if batch.x_t.ncols() != self.dim || batch.eps.ncols() != self.dim {
            return Err(param("batch dimension does not match network"));
        }
        let mut input = Array2::zeros((n, self.input_width()));
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let row = self.embedding_row(batch.cond[i])?;
            rows.push(row);
            let x = batch.x_t.row(i);
            let x = x.as_slice().expect("contiguous batch row");
            let mut dst = input.row_mut(i);
            let dst = dst.as_slice_mut().expect("contiguous input row");
            self.input_row(x, batch.t[i], self.embedding_slice(row), dst);
        }
        Ok((input, rows))
    }

    /// Mean over the batch of `||eps_hat - eps||^2`.
    pub fn loss(&self, batch: &NoiseBatch) -> Result<f64> {
        let (input, _) = self.batch_input(batch)?;
        let out = self.forward(input);
        let diff = out - &batch.eps;
        Ok(diff.mapv(|v| v * v).sum() / batch.len() as f64)
    }

    /// Loss and its gradient with respect to every parameter, including the
    /// embedding rows used by the batch.
    pub fn loss_and_grad(&self, batch: &NoiseBatch) -> Result<(f64, Vec<f64>)> {
        let (input, rows) = self.batch_input(batch)?;
        let n = batch.len() as f64;
        let (out, acts, pres) = self.forward_cached(input);
        let diff = out - &batch.eps;
        let loss = diff.mapv(|v| v * v).sum() / n;
        let d_out = diff * (2.0 / n);
        let mut grads = vec![0.0; self.params.len()];
        let d_in = self.backward(d_out, &acts, &pres, &mut grads);
        let e = self.config.embed_dim;
        let off = self.embed_offset();
        for (i, &row) in rows.iter().enumerate() {
            for j in 0..e {
                grads[row * e + j] += d_in[[i, off + j]];
            }
        }
        Ok((loss, grads))
    }

    fn single_input(&self, x: &[f64], t: usize, embedding: &[f64]) -> Result<Array2<f64>> {
        if x.len() != self.dim {
            return Err(param("input dimension does not match network"));
        }
        if embedding.len() != self.config.embed_dim {
            return Err(param("embedding dimension does not match network"));
        }
        let mut input = Array2::zeros((1, self.input_width()));
        let mut row = input.row_mut(0);
        self.input_row(x, t, embedding, row.as_slice_mut().expect("contiguous"));
        Ok(input)
    }
}

impl Denoiser for DenoiserMlp {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict_noise(&self, x: &[f64], t: usize, cond: Condition) -> Result<Vec<f64>> {
        let row = self.embedding_row(cond)?;
        self.predict_noise_embedded(x, t, self.embedding_slice(row))
    }
}

impl EmbeddingDenoiser for DenoiserMlp {
    fn embedding_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn embedding(&self, cond: Condition) -> Result<Vec<f64>> {
        Ok(self.embedding_slice(self.embedding_row(cond)?).to_vec())
    }

    fn predict_noise_embedded(&self, x: &[f64], t: usize, embedding: &[f64]) -> Result<Vec<f64>> {
        let out = self.forward(self.single_input(x, t, embedding)?);
        Ok(out.row(0).to_vec())
    }

    fn embedding_vjp(
        &self,
        x: &[f64],
        t: usize,
        embedding: &[f64],
        upstream: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        if upstream.len() != self.dim {
            return Err(param("upstream gradient dimension mismatch"));
        }
        let (out, acts, pres) = self.forward_cached(self.single_input(x, t, embedding)?);
        let d_out = Array2::from_shape_vec((1, self.dim), upstream.to_vec()).expect("shape");
        let mut scratch = vec![0.0; self.params.len()];
        let d_in = self.backward(d_out, &acts, &pres, &mut scratch);
        let off = self.embed_offset();
        let grad = (0..self.config.embed_dim)
            .map(|j| d_in[[0, off + j]])
            .collect();
        Ok((out.row(0).to_vec(), grad))
    }
}

/// Stacks equal-length rows into a matrix.
pub(crate) fn rows_to_array(rows: &[Vec<f64>], dim: usize) -> Array2<f64> {
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Array2::from_shape_vec((rows.len(), dim), flat).expect("rectangular rows")
}
