//! Analytic gradients of the empirical loss `L_S = (1/n) sum_i l(y_i f(X_i))`.
//!
//! Attention gradients follow the softmax Jacobian
//! `ds_{l,a}/dz_{l,b} = s_{l,a} (1{a=b} - s_{l,b})`, which gives
//! `df/dz_{l,b} = s_{l,b} (p_b - sum_a s_{l,a} p_a)` with `p_a = <v, x_a>`.
//! The two-patch closed forms are kept in [`two_patch_query_key`] as a
//! second route for cross-checking.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{forward_all, mean_loss, ForwardCache, Head, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grads {
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v_pos: Array2<f64>,
    pub v_neg: Array2<f64>,
    /// Present only when the linear head is trained.
    pub head: Option<Head>,
}

impl Grads {
    pub fn zeros_like(params: &Params) -> Self {
        let p = Params::zeros(params.m_k(), params.m_v(), params.d());
        Self { q: p.wq, k: p.wk, v_pos: p.wv_pos, v_neg: p.wv_neg, head: None }
    }

    pub fn tensors(&self) -> [&Array2<f64>; 4] {
        [&self.q, &self.k, &self.v_pos, &self.v_neg]
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        let names = ["grad W_Q", "grad W_K", "grad W_V_pos", "grad W_V_neg"];
        if let Some((_, name)) = self.tensors().iter().zip(names).find(|(t, _)| t.iter().any(|x| !x.is_finite())) {
            return Some(name);
        }
        match &self.head {
            Some(h) if h.pos.iter().chain(&h.neg).any(|x| !x.is_finite()) => Some("grad head"),
            _ => None,
        }
    }
}

fn check(params: &Params, samples: &[Sample], caches: &[ForwardCache]) -> Result<()> {
    if samples.len() != caches.len() {
        return Err(Error::Shape(format!("{} samples but {} caches", samples.len(), caches.len())));
    }
    if samples.is_empty() {
        return Err(Error::Shape("empty dataset".into()));
    }
    if samples.iter().flat_map(|s| &s.patches).any(|p| p.dim != params.d()) {
        return Err(Error::Shape("sample dimension does not match parameters".into()));
    }
    Ok(())
}

/// `dL_S/df_i = l'(y_i f_i) y_i / n = -loss_deriv_i * y_i / n`.
fn output_weight(sample: &Sample, cache: &ForwardCache, n: usize) -> f64 {
    -cache.loss_deriv * sample.label() / n as f64
}

/// `df/dz_{l,b}` at `[l * L + b]`.
fn logit_sensitivity(cache: &ForwardCache) -> Vec<f64> {
    let len = cache.len;
    let mut out = vec![0.0; len * len];
    for l in 0..len {
        let row = &cache.attn[l * len..(l + 1) * len];
        let avg: f64 = row.iter().zip(&cache.value_proj).map(|(s, p)| s * p).sum();
        for b in 0..len {
            out[l * len + b] = row[b] * (cache.value_proj[b] - avg);
        }
    }
    out
}

/// `u = sum_i (dL/df_i) sum_a c_{i,a} x_{i,a}`, the direction shared by every
/// value row.
fn value_direction(d: usize, samples: &[Sample], caches: &[ForwardCache]) -> Vec<f64> {
    let n = samples.len();
    let mut u = vec![0.0; d];
    for (sample, cache) in samples.iter().zip(caches) {
        let w = output_weight(sample, cache, n);
        for (patch, c) in sample.patches.iter().zip(cache.key_mass()) {
            patch.axpy_into(w * c, &mut u);
        }
    }
    u
}

fn rows_scaled(u: &[f64], scales: impl Iterator<Item = f64>) -> Array2<f64> {
    let rows: Vec<Vec<f64>> = scales.map(|a| u.iter().map(|x| a * x).collect()).collect();
    let m = rows.len();
    Array2::from_shape_vec((m, u.len()), rows.concat()).expect("rectangular")
}

/// Gradients with respect to `W_{V,+1}` and `W_{V,-1}`. Row `r` of the
/// `j` block is `j * theta_{j,r} * u`; with the fixed head every row is the
/// same and the two blocks are exact negatives.
pub fn grad_value(
    params: &Params,
    head: &Head,
    samples: &[Sample],
    caches: &[ForwardCache],
) -> Result<(Array2<f64>, Array2<f64>)> {
    check(params, samples, caches)?;
    let u = value_direction(params.d(), samples, caches);
    let pos = rows_scaled(&u, head.pos.iter().copied());
    let neg = rows_scaled(&u, head.neg.iter().map(|w| -w));
    Ok((pos, neg))
}

/// Gradients with respect to the query and key matrices, for any `L`.
pub fn grad_query_key(
    params: &Params,
    samples: &[Sample],
    caches: &[ForwardCache],
) -> Result<(Array2<f64>, Array2<f64>)> {
    check(params, samples, caches)?;
    let (m_k, d) = (params.m_k(), params.d());
    let n = samples.len();
    let mut gq = Array2::zeros((m_k, d));
    let mut gk = Array2::zeros((m_k, d));
    for (sample, cache) in samples.iter().zip(caches) {
        let w = output_weight(sample, cache, n);
        let len = cache.len;
        let delta = logit_sensitivity(cache);
        for k in 0..m_k {
            let q = &cache.query_proj[k * len..(k + 1) * len];
            let kp = &cache.key_proj[k * len..(k + 1) * len];
            let mut gq_row = gq.row_mut(k);
            let gq_row = gq_row.as_slice_mut().expect("standard layout");
            for (l, patch) in sample.patches.iter().enumerate() {
                let coef: f64 = (0..len).map(|b| delta[l * len + b] * kp[b]).sum();
                if coef != 0.0 {
                    patch.axpy_into(w * coef, gq_row);
                }
            }
            let mut gk_row = gk.row_mut(k);
            let gk_row = gk_row.as_slice_mut().expect("standard layout");
            for (b, patch) in sample.patches.iter().enumerate() {
                let coef: f64 = (0..len).map(|l| delta[l * len + b] * q[l]).sum();
                if coef != 0.0 {
                    patch.axpy_into(w * coef, gk_row);
                }
            }
        }
    }
    Ok((gq, gk))
}

/// Gradient with respect to the head weights, `j * sum_a c_a <w_{V,j,r}, x_a>`
/// averaged with the loss weights. Requires a trainable head.
pub fn grad_head(
    params: &Params,
    head: Option<&Head>,
    samples: &[Sample],
    caches: &[ForwardCache],
) -> Result<Head> {
    if head.is_none() {
        return Err(Error::Mode("head gradient requested but the head is fixed".into()));
    }
    check(params, samples, caches)?;
    let n = samples.len();
    let m_v = params.m_v();
    let mut out = Head { pos: vec![0.0; m_v], neg: vec![0.0; m_v] };
    for (sample, cache) in samples.iter().zip(caches) {
        let w = output_weight(sample, cache, n);
        let mass = cache.key_mass();
        for r in 0..m_v {
            let pos_row = params.wv_pos.row(r);
            let neg_row = params.wv_neg.row(r);
            let (pos_row, neg_row) = (pos_row.as_slice().unwrap(), neg_row.as_slice().unwrap());
            let mut pos = 0.0;
            let mut neg = 0.0;
            for (patch, c) in sample.patches.iter().zip(&mass) {
                pos += c * patch.dot(pos_row);
                neg += c * patch.dot(neg_row);
            }
            out.pos[r] += w * pos;
            out.neg[r] -= w * neg;
        }
    }
    Ok(out)
}

/// All gradients. `trainable_head` selects whether the head gradient is
/// included; `head` is the head used in the forward pass.
pub fn gradients(
    params: &Params,
    head: &Head,
    trainable_head: bool,
    samples: &[Sample],
    caches: &[ForwardCache],
) -> Result<Grads> {
    let (v_pos, v_neg) = grad_value(params, head, samples, caches)?;
    let (q, k) = grad_query_key(params, samples, caches)?;
    let head = if trainable_head { Some(grad_head(params, Some(head), samples, caches)?) } else { None };
    Ok(Grads { q, k, v_pos, v_neg, head })
}

/// Closed-form two-patch query/key gradients, written in terms of signal and
/// noise roles:
///
/// ```text
/// dL/dw_{Q,k} = (1/n) sum_i l'_i y_i <v, y_i mu - xi_i> <w_{K,k}, y_i mu - xi_i>
///                        (s_{i,11} s_{i,12} y_i mu + s_{i,21} s_{i,22} xi_i)
/// dL/dw_{K,k} = (1/n) sum_i l'_i y_i <v, y_i mu - xi_i>
///                        <w_{Q,k}, s_{i,11} s_{i,12} y_i mu + s_{i,21} s_{i,22} xi_i> (y_i mu - xi_i)
/// ```
pub fn two_patch_query_key(
    params: &Params,
    samples: &[Sample],
    caches: &[ForwardCache],
) -> Result<(Array2<f64>, Array2<f64>)> {
    check(params, samples, caches)?;
    let (m_k, d) = (params.m_k(), params.d());
    let n = samples.len() as f64;
    let mut gq = Array2::zeros((m_k, d));
    let mut gk = Array2::zeros((m_k, d));
    for (sample, cache) in samples.iter().zip(caches) {
        if cache.len != 2 {
            return Err(Error::Shape("two-patch formula needs L = 2".into()));
        }
        let (sig, noi) = (sample.signal_position(), sample.noise_positions[0]);
        let s = |a: usize, b: usize| cache.attn(a, b);
        let (s11, s12, s21, s22) = (s(sig, sig), s(sig, noi), s(noi, sig), s(noi, noi));
        let lp = -cache.loss_deriv;
        let y = sample.label();
        let v_diff = cache.value_proj[sig] - cache.value_proj[noi];
        let signal = &sample.patches[sig];
        let noise = &sample.patches[noi];
        for k in 0..m_k {
            let key_diff = cache.key_proj[k * 2 + sig] - cache.key_proj[k * 2 + noi];
            let q_mix = s11 * s12 * cache.query_proj[k * 2 + sig] + s21 * s22 * cache.query_proj[k * 2 + noi];
            let common = lp * y * v_diff / n;
            let mut row = gq.row_mut(k);
            let row = row.as_slice_mut().unwrap();
            signal.axpy_into(common * key_diff * s11 * s12, row);
            noise.axpy_into(common * key_diff * s21 * s22, row);
            let mut row = gk.row_mut(k);
            let row = row.as_slice_mut().unwrap();
            signal.axpy_into(common * q_mix, row);
            noise.axpy_into(-common * q_mix, row);
        }
    }
    Ok((gq, gk))
}

/// Richardson-extrapolated central difference of a scalar function:
/// `(4 D(h/2) - D(h)) / 3` with `D(h) = (f(x+h) - f(x-h)) / 2h`. Exact for
/// polynomials up to degree four.
pub fn central_difference<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
    let d = |f: &mut F, h: f64| (f(x + h) - f(x - h)) / (2.0 * h);
    let coarse = d(&mut f, h);
    let fine = d(&mut f, h / 2.0);
    (4.0 * fine - coarse) / 3.0
}

/// Finite-difference estimate of every gradient entry. The step for entry
/// `theta` is `h * max(1, |theta|)`. Costs four loss evaluations per entry.
pub fn finite_difference_oracle(
    params: &Params,
    head: &Head,
    trainable_head: bool,
    samples: &[Sample],
    h: f64,
) -> Result<Grads> {
    let loss = |p: &Params, hd: &Head| -> Result<f64> { Ok(mean_loss(&forward_all(p, hd, samples)?)) };
    let mut work = params.clone();
    let mut out = Grads::zeros_like(params);
    let mut failure = None;
    let targets = [&mut out.q, &mut out.k, &mut out.v_pos, &mut out.v_neg];
    for (which, target) in targets.into_iter().enumerate() {
        let (rows, cols) = target.dim();
        for r in 0..rows {
            for c in 0..cols {
                let x0 = work.tensors()[which][[r, c]];
                let step = h * x0.abs().max(1.0);
                target[[r, c]] = central_difference(
                    |x| {
                        work.tensors_mut()[which][[r, c]] = x;
                        loss(&work, head).unwrap_or_else(|e| {
                            failure.get_or_insert(e);
                            f64::NAN
                        })
                    },
                    x0,
                    step,
                );
                work.tensors_mut()[which][[r, c]] = x0;
            }
        }
    }
    if trainable_head {
        let mut hd = head.clone();
        let mut g = Head { pos: vec![0.0; head.pos.len()], neg: vec![0.0; head.neg.len()] };
        for side in 0..2 {
            for r in 0..head.pos.len() {
                let x0 = if side == 0 { hd.pos[r] } else { hd.neg[r] };
                let step = h * x0.abs().max(1.0);
                let est = central_difference(
                    |x| {
                        if side == 0 { hd.pos[r] = x } else { hd.neg[r] = x }
                        loss(params, &hd).unwrap_or(f64::NAN)
                    },
                    x0,
                    step,
                );
                if side == 0 {
                    hd.pos[r] = x0;
                    g.pos[r] = est;
                } else {
                    hd.neg[r] = x0;
                    g.neg[r] = est;
                }
            }
        }
        out.head = Some(g);
    }
    match failure {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Location and size of the worst disagreement between two gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradComparison {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub tensor: String,
    pub index: (usize, usize),
}

/// Denominator floor for relative errors: entries smaller than this in
/// magnitude are compared absolutely. Central differences of an O(1) loss
/// carry absolute noise near `eps_mach / h`, about 1e-13 at `h = 1e-3`, so
/// smaller entries cannot be resolved to a relative 1e-6.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Entrywise relative error `|a - b| / max(|a|, |b|, REL_ERROR_FLOOR)`,
/// reporting the worst entry.
pub fn compare_grads(a: &Grads, b: &Grads) -> GradComparison {
    let mut worst = GradComparison {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        tensor: String::new(),
        index: (0, 0),
    };
    let mut visit = |name: &str, idx: (usize, usize), x: f64, y: f64| {
        let abs = (x - y).abs();
        let rel = abs / x.abs().max(y.abs()).max(REL_ERROR_FLOOR);
        worst.max_abs_error = worst.max_abs_error.max(abs);
        if rel > worst.max_rel_error || rel.is_nan() {
            worst.max_rel_error = rel;
            worst.tensor = name.to_string();
            worst.index = idx;
        }
    };
    let names = ["W_Q", "W_K", "W_V_pos", "W_V_neg"];
    for ((ta, tb), name) in a.tensors().iter().zip(b.tensors()).zip(names) {
        for (((r, c), x), y) in ta.indexed_iter().zip(tb.iter()) {
            visit(name, (r, c), *x, *y);
        }
    }
    if let (Some(ha), Some(hb)) = (&a.head, &b.head) {
        for (r, (x, y)) in ha.pos.iter().zip(&hb.pos).enumerate() {
            visit("head_pos", (r, 0), *x, *y);
        }
        for (r, (x, y)) in ha.neg.iter().zip(&hb.neg).enumerate() {
            visit("head_neg", (r, 0), *x, *y);
        }
    }
    worst
}
