//! The two-layer model: a single-head softmax attention layer with
//! trainable query, key and value matrices, followed by a linear head that
//! averages the value rows with weights `+1/m_v` (for `F_{+1}`) and
//! `-1/m_v` (for `F_{-1}`).
//!
//! With `v` the readout direction (the mean value by default), the output is
//!
//! ```text
//! f(X) = sum_l sum_a s_{l,a} <v, x_a>,   s_{l,.} = softmax_a(z_{l,a}),
//! z_{l,a} = sum_k <w_{Q,k}, x_l> <w_{K,k}, x_a>
//! ```
//!
//! Logits are not scaled by `1/sqrt(m_k)`.

use std::io::{Read, Write};

use ndarray::Array2;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{generate_test_samples, DataConfig, Dataset, Sample};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub m_k: usize,
    pub m_v: usize,
    #[serde(rename = "L", alias = "context_len", default = "default_context_len")]
    pub context_len: usize,
    pub sigma_0: f64,
    #[serde(default)]
    pub init_seed: u64,
}

fn default_context_len() -> usize {
    2
}

impl ModelConfig {
    /// Row (a) widths: `m_v = 0.01 d`, `m_k = 0.05 d`, `sigma_0 = 0.1 / sqrt(d)`.
    pub fn row_a(d: usize, init_seed: u64) -> Self {
        Self {
            d,
            m_k: d * 5 / 100,
            m_v: d / 100,
            context_len: 2,
            sigma_0: 0.1 / (d as f64).sqrt(),
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 1 || self.m_k < 1 || self.m_v < 1 {
            return Err(Error::Config("d, m_k and m_v must be at least 1".into()));
        }
        if self.context_len < 2 {
            return Err(Error::Config("L must be at least 2".into()));
        }
        if !(self.sigma_0 >= 0.0 && self.sigma_0.is_finite()) {
            return Err(Error::Config(format!("sigma_0 = {} must be non-negative", self.sigma_0)));
        }
        Ok(())
    }
}

/// Trainable attention weights. Row `k` of `wq` is the query neuron `w_{Q,k}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv_pos: Array2<f64>,
    pub wv_neg: Array2<f64>,
}

pub const TENSOR_NAMES: [&str; 4] = ["W_Q", "W_K", "W_V_pos", "W_V_neg"];

impl Params {
    pub fn zeros(m_k: usize, m_v: usize, d: usize) -> Self {
        Self {
            wq: Array2::zeros((m_k, d)),
            wk: Array2::zeros((m_k, d)),
            wv_pos: Array2::zeros((m_v, d)),
            wv_neg: Array2::zeros((m_v, d)),
        }
    }

    pub fn d(&self) -> usize {
        self.wq.ncols()
    }

    pub fn m_k(&self) -> usize {
        self.wq.nrows()
    }

    pub fn m_v(&self) -> usize {
        self.wv_pos.nrows()
    }

    pub fn tensors(&self) -> [&Array2<f64>; 4] {
        [&self.wq, &self.wk, &self.wv_pos, &self.wv_neg]
    }

    pub fn tensors_mut(&mut self) -> [&mut Array2<f64>; 4] {
        [&mut self.wq, &mut self.wk, &mut self.wv_pos, &mut self.wv_neg]
    }

    pub fn num_entries(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.tensors()
            .iter()
            .zip(TENSOR_NAMES)
            .find(|(t, _)| t.iter().any(|x| !x.is_finite()))
            .map(|(_, name)| name)
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.d();
        if self.wk.dim() != self.wq.dim() || self.wv_pos.ncols() != d || self.wv_neg.dim() != self.wv_pos.dim() {
            return Err(Error::Shape(format!(
                "inconsistent parameter shapes {:?} {:?} {:?} {:?}",
                self.wq.dim(),
                self.wk.dim(),
                self.wv_pos.dim(),
                self.wv_neg.dim()
            )));
        }
        Ok(())
    }
}

/// Every entry drawn i.i.d. from `N(0, sigma_0^2)`. Each row has its own
/// seed stream, so the draw does not depend on fill order.
pub fn init_params(config: &ModelConfig) -> Result<Params> {
    config.validate()?;
    let mut params = Params::zeros(config.m_k, config.m_v, config.d);
    for (which, tensor) in params.tensors_mut().into_iter().enumerate() {
        for (r, mut row) in tensor.rows_mut().into_iter().enumerate() {
            let mut rng = substream(config.init_seed, Stream::Init, which as u64, r as u64);
            for x in row.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x = config.sigma_0 * z;
            }
        }
    }
    Ok(params)
}

/// Second-layer weights. `F_j` uses `pos[r]` (for `j = +1`) or `neg[r]`
/// (for `j = -1`) on value row `r`, and `f = F_{+1} - F_{-1}`. The fixed
/// head has every weight equal to `1/m_v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
}

impl Head {
    pub fn fixed(m_v: usize) -> Self {
        let w = 1.0 / m_v as f64;
        Self { pos: vec![w; m_v], neg: vec![w; m_v] }
    }
}

/// The readout direction `v = sum_r pos[r] w_{V,+1,r} - sum_r neg[r] w_{V,-1,r}`.
/// With the fixed head this is the mean value.
pub fn readout(params: &Params, head: &Head) -> Vec<f64> {
    let mut v = vec![0.0; params.d()];
    let rows = params.wv_pos.rows().into_iter().zip(params.wv_neg.rows());
    for ((pos_row, neg_row), (&a, &b)) in rows.zip(head.pos.iter().zip(&head.neg)) {
        for ((acc, x), z) in v.iter_mut().zip(pos_row).zip(neg_row) {
            *acc += a * x - b * z;
        }
    }
    v
}

/// Mean row of `W_{V,+1}` minus mean row of `W_{V,-1}`.
pub fn mean_value(params: &Params) -> Vec<f64> {
    readout(params, &Head::fixed(params.m_v()))
}

/// Row-wise softmax of an `L x L` logit block, stabilised by subtracting the
/// row maximum.
pub fn softmax_rows(logits: &[f64], len: usize) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    for (row, out_row) in logits.chunks_exact(len).zip(out.chunks_exact_mut(len)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (o, &z) in out_row.iter_mut().zip(row) {
            *o = (z - max).exp();
            total += *o;
        }
        for o in out_row.iter_mut() {
            *o /= total;
        }
    }
    out
}

/// `log(1 + exp(-margin))` without overflow.
pub fn logistic_loss(margin: f64) -> f64 {
    if margin > 0.0 {
        (-margin).exp().ln_1p()
    } else {
        -margin + margin.exp().ln_1p()
    }
}

/// `-l'(margin) = 1 / (1 + exp(margin))`, the positive loss derivative.
pub fn logistic_deriv(margin: f64) -> f64 {
    if margin > 0.0 {
        let e = (-margin).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + margin.exp())
    }
}

/// Per-sample forward quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardCache {
    pub len: usize,
    /// `z[l * L + a]`
    pub logits: Vec<f64>,
    /// `s[l * L + a]`
    pub attn: Vec<f64>,
    /// `<w_{Q,k}, x_l>` at `[k * L + l]`
    pub query_proj: Vec<f64>,
    /// `<w_{K,k}, x_a>` at `[k * L + a]`
    pub key_proj: Vec<f64>,
    /// `<v, x_a>`
    pub value_proj: Vec<f64>,
    pub output: f64,
    pub margin: f64,
    pub loss: f64,
    /// `-l'(margin)`, in `(0, 1)`.
    pub loss_deriv: f64,
}

impl ForwardCache {
    pub fn attn(&self, query: usize, key: usize) -> f64 {
        self.attn[query * self.len + key]
    }

    /// Total attention each patch receives as a key, `c_a = sum_l s_{l,a}`.
    pub fn key_mass(&self) -> Vec<f64> {
        let mut mass = vec![0.0; self.len];
        for row in self.attn.chunks_exact(self.len) {
            for (m, s) in mass.iter_mut().zip(row) {
                *m += s;
            }
        }
        mass
    }
}

fn check_sample(params: &Params, sample: &Sample) -> Result<()> {
    if sample.patches.iter().any(|p| p.dim != params.d()) {
        return Err(Error::Shape(format!(
            "sample dimension {} does not match parameter dimension {}",
            sample.dim(),
            params.d()
        )));
    }
    Ok(())
}

fn projections(weights: &Array2<f64>, sample: &Sample) -> Vec<f64> {
    let len = sample.context_len();
    let mut out = vec![0.0; weights.nrows() * len];
    for (k, row) in weights.rows().into_iter().enumerate() {
        let row = row.as_slice().expect("standard layout");
        for (l, patch) in sample.patches.iter().enumerate() {
            out[k * len + l] = patch.dot(row);
        }
    }
    out
}

fn logits_from(query_proj: &[f64], key_proj: &[f64], len: usize) -> Vec<f64> {
    let mut z = vec![0.0; len * len];
    for (q, k) in query_proj.chunks_exact(len).zip(key_proj.chunks_exact(len)) {
        for l in 0..len {
            for a in 0..len {
                z[l * len + a] += q[l] * k[a];
            }
        }
    }
    z
}

/// `Z[l][a] = (W_Q x_l) . (W_K x_a)`, row-major `L x L`.
pub fn attention_logits(params: &Params, sample: &Sample) -> Result<Vec<f64>> {
    params.check_shapes()?;
    check_sample(params, sample)?;
    let len = sample.context_len();
    Ok(logits_from(&projections(&params.wq, sample), &projections(&params.wk, sample), len))
}

/// Forward pass with a precomputed readout direction `v`.
pub fn forward_with_readout(params: &Params, v: &[f64], sample: &Sample) -> Result<ForwardCache> {
    params.check_shapes()?;
    check_sample(params, sample)?;
    let len = sample.context_len();
    let query_proj = projections(&params.wq, sample);
    let key_proj = projections(&params.wk, sample);
    let logits = logits_from(&query_proj, &key_proj, len);
    let attn = softmax_rows(&logits, len);
    let value_proj: Vec<f64> = sample.patches.iter().map(|p| p.dot(v)).collect();
    let mut output = 0.0;
    for row in attn.chunks_exact(len) {
        for (s, p) in row.iter().zip(&value_proj) {
            output += s * p;
        }
    }
    let margin = sample.label() * output;
    Ok(ForwardCache {
        len,
        logits,
        attn,
        query_proj,
        key_proj,
        value_proj,
        output,
        margin,
        loss: logistic_loss(margin),
        loss_deriv: logistic_deriv(margin),
    })
}

pub fn forward_with_head(params: &Params, head: &Head, sample: &Sample) -> Result<ForwardCache> {
    forward_with_readout(params, &readout(params, head), sample)
}

/// Forward pass under the fixed `±1/m_v` head.
pub fn forward(params: &Params, sample: &Sample) -> Result<ForwardCache> {
    forward_with_readout(params, &mean_value(params), sample)
}

pub fn forward_all(params: &Params, head: &Head, samples: &[Sample]) -> Result<Vec<ForwardCache>> {
    let v = readout(params, head);
    samples.iter().map(|s| forward_with_readout(params, &v, s)).collect()
}

/// The two-patch closed form `(s11 + s21) <v, x1> + (s12 + s22) <v, x2>`.
pub fn two_patch_output(cache: &ForwardCache) -> f64 {
    assert_eq!(cache.len, 2, "two-patch formula needs L = 2");
    let s = &cache.attn;
    (s[0] + s[2]) * cache.value_proj[0] + (s[1] + s[3]) * cache.value_proj[1]
}

pub fn mean_loss(caches: &[ForwardCache]) -> f64 {
    caches.iter().map(|c| c.loss).sum::<f64>() / caches.len() as f64
}

/// Mean logistic loss over the training set.
pub fn empirical_loss(params: &Params, dataset: &Dataset) -> Result<f64> {
    empirical_loss_with_head(params, &Head::fixed(params.m_v()), dataset)
}

pub fn empirical_loss_with_head(params: &Params, head: &Head, dataset: &Dataset) -> Result<f64> {
    Ok(mean_loss(&forward_all(params, head, &dataset.samples)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestLoss {
    pub logistic: f64,
    /// Misclassification rate; `y f <= 0` counts as an error.
    pub zero_one: f64,
}

pub fn loss_on_samples(params: &Params, head: &Head, samples: &[Sample]) -> Result<TestLoss> {
    let caches = forward_all(params, head, samples)?;
    let errors = caches.iter().filter(|c| c.margin <= 0.0).count();
    Ok(TestLoss {
        logistic: mean_loss(&caches),
        zero_one: errors as f64 / caches.len() as f64,
    })
}

/// Monte Carlo estimate of the population loss on `n_test` fresh samples.
pub fn test_loss(params: &Params, config: &DataConfig, n_test: usize, seed: u64) -> Result<TestLoss> {
    if n_test < 1 {
        return Err(Error::Config("n_test must be at least 1".into()));
    }
    let samples = generate_test_samples(config, n_test, seed)?;
    loss_on_samples(params, &Head::fixed(params.m_v()), &samples)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"SLCKPT01";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    model: ModelConfig,
    head: bool,
}

/// Binary checkpoint: magic, a length-prefixed JSON header with the model
/// config, then the four matrices as row-major little-endian `f64`, then the
/// head weights when present.
pub fn write_checkpoint<W: Write>(
    config: &ModelConfig,
    params: &Params,
    head: Option<&Head>,
    mut out: W,
) -> Result<()> {
    if params.d() != config.d || params.m_k() != config.m_k || params.m_v() != config.m_v {
        return Err(Error::Shape("parameters do not match the model config".into()));
    }
    let header = serde_json::to_vec(&CheckpointHeader { model: config.clone(), head: head.is_some() })?;
    out.write_all(CHECKPOINT_MAGIC)?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    for tensor in params.tensors() {
        for x in tensor.iter() {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    if let Some(head) = head {
        for x in head.pos.iter().chain(&head.neg) {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_f64s<R: Read>(input: &mut R, count: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    input.read_exact(&mut bytes)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(ModelConfig, Params, Option<Head>)> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Parse("not a parameter checkpoint".into()));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    input.read_exact(&mut header)?;
    let header: CheckpointHeader = serde_json::from_slice(&header)?;
    let config = header.model;
    let mut params = Params::zeros(config.m_k, config.m_v, config.d);
    for tensor in params.tensors_mut() {
        let (rows, cols) = tensor.dim();
        *tensor = Array2::from_shape_vec((rows, cols), read_f64s(&mut input, rows * cols)?)
            .map_err(|e| Error::Shape(e.to_string()))?;
    }
    let head = if header.head {
        let pos = read_f64s(&mut input, config.m_v)?;
        let neg = read_f64s(&mut input, config.m_v)?;
        Some(Head { pos, neg })
    } else {
        None
    };
    Ok((config, params, head))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::SparseVec;
    use ndarray::array;

    fn two_patch(d: usize, y: i8, noise: SparseVec) -> Sample {
        Sample::new(d, y, vec![0], vec![noise])
    }

    #[test]
    fn zero_sigma_gives_zero_params() {
        let cfg = ModelConfig { d: 5, m_k: 2, m_v: 3, context_len: 2, sigma_0: 0.0, init_seed: 1 };
        let p = init_params(&cfg).unwrap();
        assert!(p.tensors().iter().all(|t| t.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig { d: 7, m_k: 2, m_v: 3, context_len: 2, sigma_0: 0.3, init_seed: 9 };
        assert_eq!(init_params(&cfg).unwrap(), init_params(&cfg).unwrap());
        let other = ModelConfig { init_seed: 10, ..cfg.clone() };
        assert_ne!(init_params(&cfg).unwrap(), init_params(&other).unwrap());
    }

    #[test]
    fn init_std_row_a() {
        let cfg = ModelConfig::row_a(2000, 3);
        let p = init_params(&cfg).unwrap();
        let all: Vec<f64> = p.tensors().iter().flat_map(|t| t.iter().copied()).collect();
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        let std = (all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        let target = 0.1 / 2000f64.sqrt();
        assert!((std / target - 1.0).abs() < 0.03, "std {std} vs {target}");
    }

    #[test]
    fn logits_by_hand() {
        let mut p = Params::zeros(1, 1, 2);
        p.wq[[0, 0]] = 1.0;
        p.wk[[0, 1]] = 1.0;
        let sample = Sample {
            patches: vec![SparseVec::new(2, vec![0], vec![1.0]), SparseVec::new(2, vec![1], vec![2.0])],
            y: 1,
            signal_positions: vec![0],
            noise_positions: vec![1],
        };
        assert_eq!(attention_logits(&p, &sample).unwrap(), vec![0.0, 2.0, 0.0, 0.0]);
        let zero = Params::zeros(1, 1, 2);
        assert_eq!(attention_logits(&zero, &sample).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = Params::zeros(1, 1, 3);
        let sample = two_patch(2, 1, SparseVec::new(2, vec![1], vec![1.0]));
        assert!(matches!(forward(&p, &sample), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_cases() {
        assert_eq!(softmax_rows(&[0.0, 0.0], 2), vec![0.5, 0.5]);
        let big = softmax_rows(&[1000.0, 0.0], 2);
        assert_eq!(big[0], 1.0);
        assert!(big[1] >= 0.0 && big[1] < 1e-300);
        let s = softmax_rows(&[3f64.ln(), 0.0], 2);
        assert!((s[0] - 0.75).abs() < 1e-15 && (s[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn zero_params_forward() {
        let p = Params::zeros(2, 2, 4);
        let sample = two_patch(4, -1, SparseVec::new(4, vec![1, 2], vec![0.5, -1.0]));
        let c = forward(&p, &sample).unwrap();
        assert_eq!(c.output, 0.0);
        assert_eq!(c.loss, 2f64.ln());
        assert_eq!(c.loss_deriv, 0.5);
    }

    #[test]
    fn uniform_attention_margin() {
        // v = mu, <v, xi> = 0, uniform softmax
        let mut p = Params::zeros(1, 1, 3);
        p.wv_pos[[0, 0]] = 0.5;
        p.wv_neg[[0, 0]] = -0.5;
        let sample = two_patch(3, 1, SparseVec::new(3, vec![1, 2], vec![1.0, 1.0]));
        let c = forward(&p, &sample).unwrap();
        assert_eq!(c.margin, 1.0);
        assert!((c.loss - 0.313_261_687_518_222_8).abs() < 1e-15);
    }

    #[test]
    fn logistic_kernel_matches_reference() {
        for k in -500..=500 {
            let m = f64::from(k) * 0.1;
            let reference = (-m).exp().ln_1p();
            let rel = (logistic_loss(m) - reference).abs() / reference;
            assert!(rel < 1e-14, "margin {m}: {rel}");
            let d = 1.0 / (1.0 + m.exp());
            assert!((logistic_deriv(m) - d).abs() <= 1e-15 * d.max(1e-300) + 1e-300);
        }
        assert!(logistic_loss(700.0) < 1e-12);
        assert!((logistic_loss(-700.0) - 700.0).abs() < 1e-9);
    }

    #[test]
    fn zero_params_test_loss() {
        let cfg = DataConfig { d: 20, s: 3, n: 4, context_len: 2, sigma_p: 1.0, orthogonal: true, seed: 1 };
        let loss = test_loss(&Params::zeros(2, 2, 20), &cfg, 50, 7).unwrap();
        // mean of 50 identical terms, exact up to summation rounding
        assert!((loss.logistic - 2f64.ln()).abs() < 1e-15);
        assert_eq!(loss.zero_one, 1.0);
        assert!(test_loss(&Params::zeros(2, 2, 20), &cfg, 0, 7).is_err());
    }

    #[test]
    fn mean_value_is_difference_of_means() {
        let mut p = Params::zeros(1, 2, 2);
        p.wv_pos = array![[1.0, 2.0], [3.0, 4.0]];
        p.wv_neg = array![[0.0, 1.0], [1.0, 0.0]];
        assert_eq!(mean_value(&p), vec![1.5, 2.5]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ModelConfig { d: 6, m_k: 2, m_v: 3, context_len: 2, sigma_0: 0.7, init_seed: 4 };
        let p = init_params(&cfg).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&cfg, &p, None, &mut buf).unwrap();
        let (c2, p2, h2) = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!((c2, h2), (cfg.clone(), None));
        for (a, b) in p.tensors().iter().zip(p2.tensors()) {
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let head = Head { pos: vec![0.1, 0.2, 0.3], neg: vec![-1.0, 0.0, 1.0] };
        let mut buf = Vec::new();
        write_checkpoint(&cfg, &p, Some(&head), &mut buf).unwrap();
        assert_eq!(read_checkpoint(buf.as_slice()).unwrap().2, Some(head));
    }
}
