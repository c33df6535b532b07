//! Theory-level observables of a run: parameter-data inner products,
//! softmax outputs and loss derivatives, captured as immutable snapshots.
//!
//! Index conventions: `q_xi[k][i] = <w_{Q,k}, y_i xi_i>` where `xi_i` is the
//! sample's dominant noise patch, `q_mu[k] = <w_{Q,k}, mu>`. Signal and noise
//! roles come from the sample's recorded positions, never from values.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{mean_loss, readout, ForwardCache, Head, Params};
use crate::optim::{OptimizerKind, OptimizerSpec};
use crate::stats::sgn;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSnapshot {
    /// Iteration count in units of the main run's steps.
    pub t: f64,
    pub q_mu: Vec<f64>,
    pub k_mu: Vec<f64>,
    pub q_xi: Vec<Vec<f64>>,
    pub k_xi: Vec<Vec<f64>>,
    pub v_mu: f64,
    pub v_xi: Vec<f64>,
    /// Signal query attending to the signal key.
    pub s11: Vec<f64>,
    /// Noise query attending to the signal key (max over noise queries when `L > 2`).
    pub s21: Vec<f64>,
    /// Key position receiving the most attention from the signal query.
    pub attn_argmax: Vec<usize>,
    pub loss_deriv: Vec<f64>,
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_zero_one: Option<f64>,
}

impl ProbeSnapshot {
    pub fn m_k(&self) -> usize {
        self.q_mu.len()
    }

    pub fn n(&self) -> usize {
        self.v_xi.len()
    }
}

/// Run constants the analysis needs alongside the snapshots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunContext {
    pub optimizer: OptimizerKind,
    /// Step size actually applied per iteration.
    pub eta: f64,
    /// Snapshot time per iteration (1 for ordinary runs, `1/zoom` for zoomed ones).
    pub time_scale: f64,
    pub n: usize,
    pub m_k: usize,
    pub m_v: usize,
    pub signal_norm: f64,
    /// `||xi_i||_1` per sample (dominant noise patch).
    pub noise_l1: Vec<f64>,
    /// Whether any two noise patches share a coordinate.
    pub supports_disjoint: bool,
}

impl RunContext {
    pub fn new(dataset: &Dataset, params: &Params, spec: &OptimizerSpec, time_scale: f64) -> Self {
        Self {
            optimizer: spec.kind,
            eta: spec.eta,
            time_scale,
            n: dataset.len(),
            m_k: params.m_k(),
            m_v: params.m_v(),
            signal_norm: dataset.signal_norm(),
            noise_l1: dataset.noise_l1(),
            supports_disjoint: crate::data::supports_disjoint(dataset),
        }
    }

    /// Step size per unit of snapshot time.
    pub fn eta_per_time(&self) -> f64 {
        self.eta / self.time_scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub context: RunContext,
    pub snapshots: Vec<ProbeSnapshot>,
}

impl Trace {
    pub fn at(&self, t: f64) -> Option<&ProbeSnapshot> {
        self.snapshots.iter().find(|s| s.t == t)
    }

    /// Last snapshot at or before `t`.
    pub fn at_or_before(&self, t: f64) -> Option<&ProbeSnapshot> {
        self.snapshots.iter().take_while(|s| s.t <= t).last()
    }

    pub fn last(&self) -> Option<&ProbeSnapshot> {
        self.snapshots.last()
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.snapshots.windows(2).all(|w| w[0].t < w[1].t)
    }
}

/// Captures every probed quantity for the given parameters. `caches` must
/// come from a forward pass with the same parameters and head.
pub fn snapshot(
    params: &Params,
    head: &Head,
    dataset: &Dataset,
    t: f64,
    caches: &[ForwardCache],
) -> Result<ProbeSnapshot> {
    if caches.len() != dataset.len() {
        return Err(Error::Shape(format!("{} caches for {} samples", caches.len(), dataset.len())));
    }
    let m_k = params.m_k();
    let v = readout(params, head);
    let mut snap = ProbeSnapshot {
        t,
        q_mu: params.wq.column(0).to_vec(),
        k_mu: params.wk.column(0).to_vec(),
        q_xi: vec![Vec::with_capacity(dataset.len()); m_k],
        k_xi: vec![Vec::with_capacity(dataset.len()); m_k],
        v_mu: v[0],
        v_xi: Vec::with_capacity(dataset.len()),
        s11: Vec::with_capacity(dataset.len()),
        s21: Vec::with_capacity(dataset.len()),
        attn_argmax: Vec::with_capacity(dataset.len()),
        loss_deriv: caches.iter().map(|c| c.loss_deriv).collect(),
        train_loss: mean_loss(caches),
        test_loss: None,
        test_zero_one: None,
    };
    for (sample, cache) in dataset.samples.iter().zip(caches) {
        let len = cache.len;
        let y = sample.label();
        let sig = sample.signal_position();
        let noi = sample.dominant_noise_position();
        for k in 0..m_k {
            snap.q_xi[k].push(y * cache.query_proj[k * len + noi]);
            snap.k_xi[k].push(y * cache.key_proj[k * len + noi]);
        }
        snap.v_xi.push(y * cache.value_proj[noi]);
        snap.s11.push(cache.attn(sig, sig));
        let s21 = sample
            .noise_positions
            .iter()
            .map(|&l| cache.attn(l, sig))
            .fold(f64::NEG_INFINITY, f64::max);
        snap.s21.push(s21);
        let argmax = (0..len)
            .max_by(|&a, &b| cache.attn(sig, a).total_cmp(&cache.attn(sig, b)).then(b.cmp(&a)))
            .expect("nonempty");
        snap.attn_argmax.push(argmax);
    }
    Ok(snap)
}

/// Joint sign class of a (key noise, query noise) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SignClass {
    KposQpos,
    KposQneg,
    KnegQpos,
    KnegQneg,
}

impl SignClass {
    pub const ALL: [SignClass; 4] =
        [SignClass::KposQpos, SignClass::KposQneg, SignClass::KnegQpos, SignClass::KnegQneg];

    /// `None` when either value is exactly zero.
    pub fn of(key: f64, query: f64) -> Option<Self> {
        match (sgn(key), sgn(query)) {
            (k, q) if k == 0.0 || q == 0.0 => None,
            (k, q) if k > 0.0 && q > 0.0 => Some(SignClass::KposQpos),
            (k, _) if k > 0.0 => Some(SignClass::KposQneg),
            (_, q) if q > 0.0 => Some(SignClass::KnegQpos),
            _ => Some(SignClass::KnegQneg),
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn label(self) -> &'static str {
        match self {
            SignClass::KposQpos => "K+Q+",
            SignClass::KposQneg => "K+Q-",
            SignClass::KnegQpos => "K-Q+",
            SignClass::KnegQneg => "K-Q-",
        }
    }

    pub fn is_mixed(self) -> bool {
        matches!(self, SignClass::KposQneg | SignClass::KnegQpos)
    }
}

/// Contingency table of sign classes at a reference time (rows) against a
/// later time (columns). Pairs with an exact zero at either time are
/// counted in `degenerate` instead.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignTable {
    pub t_ref: String,
    pub t: String,
    pub counts: [[u64; 4]; 4],
    pub degenerate: u64,
}

impl SignTable {
    pub fn row_sums(&self) -> [u64; 4] {
        self.counts.map(|row| row.iter().sum())
    }

    pub fn column_sums(&self) -> [u64; 4] {
        let mut out = [0; 4];
        for row in &self.counts {
            for (o, c) in out.iter_mut().zip(row) {
                *o += c;
            }
        }
        out
    }

    pub fn total(&self) -> u64 {
        self.row_sums().iter().sum::<u64>() + self.degenerate
    }

    /// Share of all pairs whose later-time class is mixed (K+Q- or K-Q+).
    pub fn mixed_column_fraction(&self) -> f64 {
        let cols = self.column_sums();
        (cols[SignClass::KposQneg.index()] + cols[SignClass::KnegQpos.index()]) as f64 / self.total() as f64
    }
}

pub fn sign_table(reference: &ProbeSnapshot, later: &ProbeSnapshot) -> Result<SignTable> {
    if reference.m_k() != later.m_k() || reference.n() != later.n() {
        return Err(Error::Shape("snapshots have different dimensions".into()));
    }
    let mut table = SignTable {
        t_ref: reference.t.to_string(),
        t: later.t.to_string(),
        counts: [[0; 4]; 4],
        degenerate: 0,
    };
    for k in 0..reference.m_k() {
        for i in 0..reference.n() {
            let before = SignClass::of(reference.k_xi[k][i], reference.q_xi[k][i]);
            let after = SignClass::of(later.k_xi[k][i], later.q_xi[k][i]);
            match (before, after) {
                (Some(a), Some(b)) => table.counts[a.index()][b.index()] += 1,
                _ => table.degenerate += 1,
            }
        }
    }
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaStats {
    /// Largest initial `|<w, xi_i>|` over query, key and value neurons.
    pub beta_xi: f64,
    /// Largest initial `|<w, mu>|` over query, key and value neurons.
    pub beta_mu: f64,
}

pub fn beta_stats(init: &Params, dataset: &Dataset) -> BetaStats {
    let mut beta_xi: f64 = 0.0;
    let mut beta_mu: f64 = 0.0;
    for tensor in init.tensors() {
        for row in tensor.rows() {
            let row = row.as_slice().expect("standard layout");
            beta_mu = beta_mu.max(row[0].abs() * dataset.signal_norm());
            for noise in dataset.samples.iter().flat_map(|s| s.noise_patches()) {
                beta_xi = beta_xi.max(noise.dot(row).abs());
            }
        }
    }
    BetaStats { beta_xi, beta_mu }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// Fraction of `(k, i)` with `sgn q_xi = sgn k_xi != 0`.
    pub qk_noise: f64,
    /// Fraction that additionally matches `sgn q_mu[k]` and `-sgn k_mu[k]`.
    pub final_: f64,
}

pub fn alignment_fraction(snap: &ProbeSnapshot) -> Alignment {
    let (mut qk, mut fin) = (0usize, 0usize);
    for k in 0..snap.m_k() {
        let qm = sgn(snap.q_mu[k]);
        let km = sgn(snap.k_mu[k]);
        for i in 0..snap.n() {
            let q = sgn(snap.q_xi[k][i]);
            if q != 0.0 && q == sgn(snap.k_xi[k][i]) {
                qk += 1;
                if q == qm && q == -km {
                    fin += 1;
                }
            }
        }
    }
    let total = (snap.m_k() * snap.n()) as f64;
    Alignment { qk_noise: qk as f64 / total, final_: fin as f64 / total }
}

/// Which probed quantity an audit flag refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    QMu,
    KMu,
    QXi,
    KXi,
    VMu,
    VXi,
}

impl Quantity {
    pub fn name(self) -> &'static str {
        match self {
            Quantity::QMu => "q_mu",
            Quantity::KMu => "k_mu",
            Quantity::QXi => "q_xi",
            Quantity::KXi => "k_xi",
            Quantity::VMu => "v_mu",
            Quantity::VXi => "v_xi",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditFlag {
    pub t: f64,
    pub quantity: Quantity,
    /// Neuron index (for query/key quantities).
    pub neuron: Option<usize>,
    /// Sample index (for noise quantities).
    pub sample: Option<usize>,
    pub observed: f64,
    pub expected: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    /// Set when the audit does not apply.
    pub skipped: Option<String>,
    pub steps_checked: usize,
    pub increments_checked: usize,
    pub max_rel_deviation: f64,
    pub flags: Vec<AuditFlag>,
}

/// Relative tolerance for the increment audit.
pub const AUDIT_TOLERANCE: f64 = 1e-10;

/// Checks that every probed inner product moves by exactly `0` or its
/// SignGD quantum between consecutive single-step snapshots: `eta ||mu||`
/// or `eta ||xi_i||_1` per neuron, twice that for the mean value (both value
/// blocks move). Only single-step pairs are audited.
pub fn increment_audit(trace: &Trace) -> AuditReport {
    let ctx = &trace.context;
    let mut report = AuditReport {
        skipped: None,
        steps_checked: 0,
        increments_checked: 0,
        max_rel_deviation: 0.0,
        flags: Vec::new(),
    };
    if ctx.optimizer != OptimizerKind::Signgd {
        report.skipped = Some(format!("increment audit applies to SignGD only, trace uses {}", ctx.optimizer.name()));
        return report;
    }
    let eta = ctx.eta;
    for pair in trace.snapshots.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let steps = (b.t - a.t) / ctx.time_scale;
        if (steps - 1.0).abs() > 1e-9 {
            continue;
        }
        report.steps_checked += 1;
        let mut check = |quantity: Quantity, neuron: Option<usize>, sample: Option<usize>, before: f64, after: f64, quantum: f64| {
            let observed = (after - before).abs();
            report.increments_checked += 1;
            let dev = observed.min((observed - quantum).abs()) / quantum;
            report.max_rel_deviation = report.max_rel_deviation.max(dev);
            if dev > AUDIT_TOLERANCE {
                report.flags.push(AuditFlag { t: b.t, quantity, neuron, sample, observed, expected: quantum });
            }
        };
        let mu_q = eta * ctx.signal_norm;
        for k in 0..a.m_k() {
            check(Quantity::QMu, Some(k), None, a.q_mu[k], b.q_mu[k], mu_q);
            check(Quantity::KMu, Some(k), None, a.k_mu[k], b.k_mu[k], mu_q);
            for i in 0..a.n() {
                let xi_q = eta * ctx.noise_l1[i];
                check(Quantity::QXi, Some(k), Some(i), a.q_xi[k][i], b.q_xi[k][i], xi_q);
                check(Quantity::KXi, Some(k), Some(i), a.k_xi[k][i], b.k_xi[k][i], xi_q);
            }
        }
        check(Quantity::VMu, None, None, a.v_mu, b.v_mu, 2.0 * mu_q);
        for i in 0..a.n() {
            check(Quantity::VXi, None, Some(i), a.v_xi[i], b.v_xi[i], 2.0 * eta * ctx.noise_l1[i]);
        }
    }
    report
}
