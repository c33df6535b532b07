//! Predicted stage timesteps, transition detection on traces, and the
//! per-stage, convergence, generalization and sparsity verdicts.
//!
//! Every verdict here is computed from probe snapshots only (the
//! generalization check is the exception: it needs trained parameters).

use std::f64::consts::{LN_2, PI};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{DataConfig, Dataset};
use crate::error::{Error, Result};
use crate::model::{loss_on_samples, Head, ModelConfig, Params};
use crate::optim::OptimizerKind;
use crate::probe::{alignment_fraction, sign_table, BetaStats, ProbeSnapshot, SignClass, Trace};
use crate::stats::{binomial_std_error, linear_fit, sgn, LinearFit};

/// Order-one absolute constants in the time predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryConstants {
    pub c3: f64,
    pub theta_c: f64,
    pub delta: f64,
}

impl Default for TheoryConstants {
    fn default() -> Self {
        Self { c3: 1.0, theta_c: 0.1, delta: 0.01 }
    }
}

/// Numeric readings of the o(1) and Θ(1) statements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// Half-width of the band around 1/2 for concentrated softmax outputs.
    pub softmax_band: f64,
    /// `max_i s21` below this counts as decayed.
    pub decayed: f64,
    /// Both `max_i s11` and `max_i s21` below this counts as sparse attention.
    pub sparsity: f64,
    pub mixed_mass: f64,
    pub leaving_mass: f64,
    pub r_squared: f64,
    pub loss_lo: f64,
    pub loss_hi: f64,
    /// Relative tolerance on the mean value noise rate at the end of Stage I.
    pub stage1_rate: f64,
    /// Allowed query/key noise drift in Stage I, as a fraction of the
    /// largest initial noise magnitude.
    pub stage1_drift: f64,
    /// Net query signal movement, in steps, that marks departure.
    pub departure_steps: f64,
    /// Snapshots past the query flip before final alignment is required.
    pub alignment_margin: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            softmax_band: 0.05,
            decayed: 0.05,
            sparsity: 0.1,
            mixed_mass: 0.05,
            leaving_mass: 0.02,
            r_squared: 0.99,
            loss_lo: 0.2,
            loss_hi: LN_2,
            stage1_rate: 0.01,
            stage1_drift: 0.2,
            departure_steps: 5.0,
            alignment_margin: 0.0,
        }
    }
}

/// Run constants entering the timestep formulas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeInputs {
    pub eta: f64,
    pub sigma_p: f64,
    pub s: usize,
    pub n: usize,
    pub m_k: usize,
    pub m_v: usize,
    pub signal_norm: f64,
}

impl TimeInputs {
    pub fn new(data: &DataConfig, model: &ModelConfig, eta: f64) -> Self {
        Self {
            eta,
            sigma_p: data.sigma_p,
            s: data.s,
            n: data.n,
            m_k: model.m_k,
            m_v: model.m_v,
            signal_norm: 1.0,
        }
    }

    fn noise_scale(&self) -> f64 {
        self.sigma_p * self.s as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedTimes {
    #[serde(rename = "T1")]
    pub t1: f64,
    #[serde(rename = "T2_prime")]
    pub t2_prime: f64,
    #[serde(rename = "T2_sgn")]
    pub t2_sgn: f64,
    #[serde(rename = "T2")]
    pub t2: f64,
    #[serde(rename = "T3")]
    pub t3: f64,
    /// Absent when its logarithm's argument is at most 1.
    #[serde(rename = "T4_minus_lo")]
    pub t4_minus_lo: Option<f64>,
    #[serde(rename = "T4_minus_hi")]
    pub t4_minus_hi: f64,
    #[serde(rename = "T4")]
    pub t4: f64,
    pub monotone: bool,
    pub notes: Vec<String>,
    pub constants_used: TheoryConstants,
}

impl PredictedTimes {
    pub fn ordered(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("T1", Some(self.t1)),
            ("T2_sgn", Some(self.t2_sgn)),
            ("T2", Some(self.t2)),
            ("T3", Some(self.t3)),
            ("T4_minus_lo", self.t4_minus_lo),
            ("T4_minus_hi", Some(self.t4_minus_hi)),
            ("T4", Some(self.t4)),
        ]
    }
}

/// Checks that the timestep formulas are defined for these inputs.
pub fn check_regime(inputs: &TimeInputs, constants: TheoryConstants) -> Result<()> {
    let TimeInputs { eta, m_k, m_v, signal_norm, .. } = *inputs;
    let noise = inputs.noise_scale();
    if !(eta > 0.0) || !(noise > 0.0) || !(signal_norm > 0.0) || m_k == 0 || m_v == 0 {
        return Err(Error::Config("timestep formulas need positive eta, sigma_p s, ||mu||, m_k and m_v".into()));
    }
    if noise <= signal_norm {
        return Err(Error::Regime(format!(
            "sigma_p s = {noise:.6} does not exceed ||mu|| = {signal_norm:.6}; the low-SNR separation needed by T4 fails"
        )));
    }
    let c3_arg = constants.c3 * noise / signal_norm;
    if c3_arg <= 1.0 {
        return Err(Error::Regime(format!("C3 sigma_p s / ||mu|| = {c3_arg:.6} is at most 1; T4 is undefined")));
    }
    Ok(())
}

pub fn predicted_times(inputs: &TimeInputs, beta: &BetaStats, constants: TheoryConstants) -> Result<PredictedTimes> {
    check_regime(inputs, constants)?;
    let TimeInputs { eta, n, m_k, m_v, signal_norm, .. } = *inputs;
    let noise = inputs.noise_scale();
    let per_noise = 1.0 / (eta * noise);
    let t2_prime = 2f64.sqrt() * beta.beta_xi * per_noise;
    let c3_arg = constants.c3 * noise / signal_norm;
    let stage4_unit = per_noise / (m_k as f64).sqrt();
    let lo_arg = noise / (3.0 * 2f64.sqrt() * n as f64 * signal_norm);
    let mut notes = Vec::new();
    let t4_minus_lo = if lo_arg > 1.0 {
        Some((0.99 * PI / 2.0).sqrt() * lo_arg.ln().sqrt() * stage4_unit)
    } else {
        notes.push(format!(
            "T4_minus_lo unavailable: sigma_p s / (3 sqrt2 n ||mu||) = {lo_arg:.6} is at most 1 (sigma_p s is not large against n ||mu||)"
        ));
        None
    };
    let mut out = PredictedTimes {
        t1: 4.0 * beta.beta_xi / (m_v as f64).sqrt() * per_noise,
        t2_prime,
        t2_sgn: 3.0 * t2_prime,
        t2: 50.0 * n as f64 * t2_prime,
        t3: 3.0 * beta.beta_mu / (eta * signal_norm),
        t4_minus_lo,
        t4_minus_hi: (1.01 * PI / 2.0).sqrt() * (noise / signal_norm).ln().sqrt() * stage4_unit,
        t4: constants.c3 * c3_arg.ln() * stage4_unit,
        monotone: true,
        notes,
        constants_used: constants,
    };
    let checks: [(&str, Option<f64>, &str, Option<f64>, bool); 6] = [
        ("T1", Some(out.t1), "T2_sgn", Some(out.t2_sgn), true),
        ("T2_sgn", Some(out.t2_sgn), "T2", Some(out.t2), false),
        ("T2", Some(out.t2), "T3", Some(out.t3), true),
        ("T3", Some(out.t3), "T4_minus_lo", out.t4_minus_lo, true),
        ("T4_minus_lo", out.t4_minus_lo, "T4_minus_hi", Some(out.t4_minus_hi), false),
        ("T4_minus_hi", Some(out.t4_minus_hi), "T4", Some(out.t4), true),
    ];
    for (a, x, b, y, strict) in checks {
        match (x, y) {
            (Some(x), Some(y)) if (strict && x < y) || (!strict && x <= y) => {}
            (Some(x), Some(y)) => {
                out.monotone = false;
                out.notes.push(format!("non-monotone: {a} = {x:.4} vs {b} = {y:.4}"));
            }
            _ => {
                out.monotone = false;
                out.notes.push(format!("non-monotone: cannot order {a} and {b}"));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MeasuredTimes {
    pub t_stage1_end: Option<f64>,
    pub t_qk_aligned: Option<f64>,
    pub t_signal_departure: Option<f64>,
    pub t_s21_decayed: Option<f64>,
    /// Median time at which initially opposite key noise turns toward the
    /// query signal (its opposite-signed magnitude peaks), over entries that
    /// later cross zero for good.
    pub t_key_flip: Option<f64>,
    pub t_query_flip: Option<f64>,
    /// Median last zero crossing of the same entries.
    pub t_key_cross: Option<f64>,
    pub t_query_cross: Option<f64>,
    pub t_final_aligned: Option<f64>,
}

fn max_of(xs: &[f64]) -> f64 {
    xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

fn min_of(xs: &[f64]) -> f64 {
    xs.iter().cloned().fold(f64::INFINITY, f64::min)
}

fn median(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(|a, b| a.total_cmp(b));
    let m = xs.len() / 2;
    Some(if xs.len() % 2 == 1 { xs[m] } else { 0.5 * (xs[m - 1] + xs[m]) })
}

fn preflight(trace: &Trace) -> Result<()> {
    if trace.snapshots.is_empty() {
        return Err(Error::Inconclusive("trace has no snapshots".into()));
    }
    if !trace.is_strictly_increasing() {
        return Err(Error::Inconclusive("snapshot times are not strictly increasing".into()));
    }
    Ok(())
}

fn first_time(trace: &Trace, pred: impl Fn(&ProbeSnapshot) -> bool) -> Option<f64> {
    trace.snapshots.iter().find(|s| pred(s)).map(|s| s.t)
}

/// `v_xi` growth rate per unit time between two snapshots.
fn value_noise_rates(a: &ProbeSnapshot, b: &ProbeSnapshot) -> Vec<f64> {
    let dt = b.t - a.t;
    a.v_xi.iter().zip(&b.v_xi).map(|(x, y)| (y - x) / dt).collect()
}

fn detect_stage1_end(trace: &Trace, th: &Thresholds) -> Option<f64> {
    let ctx = &trace.context;
    let snaps = &trace.snapshots;
    for j in 1..snaps.len() {
        let b = &snaps[j];
        if !b.v_xi.iter().all(|&v| v > 0.0) {
            continue;
        }
        let rates = value_noise_rates(&snaps[j - 1], b);
        // Disjoint supports fix the rate at 2 eta ||xi||_1; otherwise the
        // rate is only required to have settled.
        let expected: Vec<f64> = if ctx.supports_disjoint {
            ctx.noise_l1.iter().map(|l1| 2.0 * ctx.eta_per_time() * l1).collect()
        } else {
            match snaps.get(j + 1) {
                Some(c) => value_noise_rates(b, c),
                None => continue,
            }
        };
        let settled = rates
            .iter()
            .zip(&expected)
            .all(|(r, e)| *e > 0.0 && (r - e).abs() <= th.stage1_rate * e);
        if settled {
            return Some(b.t);
        }
    }
    None
}

/// Index of the reference snapshot for flip detection (the later of signal
/// departure and query/key noise alignment) and the query signal signs the
/// noise is expected to align with.
fn flip_reference(trace: &Trace, departure: Option<f64>, aligned: Option<f64>) -> Option<(usize, Vec<f64>)> {
    let t_ref = departure?.max(aligned.unwrap_or(0.0));
    let r = trace.snapshots.iter().position(|s| s.t >= t_ref)?;
    let last = trace.last()?;
    Some((r, last.q_mu.iter().map(|&q| sgn(q)).collect()))
}

/// Median onset (turning point) and median crossing of entries of `series`
/// (key or query noise) that are opposite to the target at the reference
/// and stay aligned from their crossing to the end of the trace.
fn flip_times(trace: &Trace, r: usize, target: &[f64], pick: impl Fn(&ProbeSnapshot) -> &Vec<Vec<f64>>) -> (Option<f64>, Option<f64>) {
    let snaps = &trace.snapshots[r..];
    let reference = pick(&snaps[0]);
    let mut onsets = Vec::new();
    let mut crossings = Vec::new();
    for (k, &sign) in target.iter().enumerate() {
        if sign == 0.0 {
            continue;
        }
        for i in 0..reference[k].len() {
            if sgn(reference[k][i]) != -sign {
                continue;
            }
            let opposite = |s: &ProbeSnapshot| -sign * pick(s)[k][i];
            let Some(last_opposite) = snaps.iter().rposition(|s| opposite(s) >= 0.0) else {
                continue;
            };
            let Some(crossed) = snaps.get(last_opposite + 1) else {
                continue;
            };
            let mut peak = (snaps[0].t, opposite(&snaps[0]));
            for s in &snaps[..=last_opposite] {
                if opposite(s) > peak.1 {
                    peak = (s.t, opposite(s));
                }
            }
            onsets.push(peak.0);
            crossings.push(crossed.t);
        }
    }
    (median(onsets), median(crossings))
}

pub fn detect_transitions(trace: &Trace, th: &Thresholds) -> Result<MeasuredTimes> {
    preflight(trace)?;
    let ctx = &trace.context;
    let first = &trace.snapshots[0];
    let step = ctx.eta_per_time() * ctx.signal_norm;
    let t_signal_departure = first_time(trace, |s| {
        s.q_mu.iter().zip(&first.q_mu).all(|(q, q0)| (q - q0).abs() > th.departure_steps * step)
    });
    let mut out = MeasuredTimes {
        t_stage1_end: detect_stage1_end(trace, th),
        t_qk_aligned: first_time(trace, |s| alignment_fraction(s).qk_noise == 1.0),
        t_signal_departure,
        t_s21_decayed: first_time(trace, |s| max_of(&s.s21) < th.decayed),
        t_final_aligned: first_time(trace, |s| alignment_fraction(s).final_ == 1.0),
        ..Default::default()
    };
    if let Some((r, target)) = flip_reference(trace, t_signal_departure, out.t_qk_aligned) {
        (out.t_key_flip, out.t_key_cross) = flip_times(trace, r, &target, |s| &s.k_xi);
        (out.t_query_flip, out.t_query_cross) = flip_times(trace, r, &target, |s| &s.q_xi);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
    NotApplicable,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Inconclusive => "inconclusive",
            Verdict::NotApplicable => "not applicable",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageVerdict {
    pub stage: String,
    pub verdict: Verdict,
    pub evidence: Vec<String>,
    /// Indices into the trace's snapshots that the verdict used.
    pub snapshots: Vec<usize>,
}

impl StageVerdict {
    fn new(stage: &str) -> Self {
        Self { stage: stage.into(), verdict: Verdict::Pass, evidence: Vec::new(), snapshots: Vec::new() }
    }

    fn check(&mut self, ok: bool, text: String) {
        self.evidence.push(format!("[{}] {text}", if ok { "ok" } else { "FAIL" }));
        if !ok && self.verdict == Verdict::Pass {
            self.verdict = Verdict::Fail;
        }
    }

    fn inconclusive(mut self, why: String) -> Self {
        self.verdict = Verdict::Inconclusive;
        self.evidence.push(why);
        self
    }

    fn not_applicable(mut self, why: String) -> Self {
        self.verdict = Verdict::NotApplicable;
        self.evidence.push(why);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub predicted: PredictedTimes,
    pub measured: MeasuredTimes,
    pub verdicts: Vec<StageVerdict>,
    /// Set when the trace failed the preflight checks.
    pub preflight: Option<String>,
}

impl StageReport {
    /// Inconclusive if any stage could not be decided, else fail if any
    /// stage failed, else pass.
    pub fn overall(&self) -> Verdict {
        if self.preflight.is_some() {
            return Verdict::Inconclusive;
        }
        let vs: Vec<Verdict> = self.verdicts.iter().map(|v| v.verdict).collect();
        if vs.contains(&Verdict::Inconclusive) {
            Verdict::Inconclusive
        } else if vs.contains(&Verdict::Fail) {
            Verdict::Fail
        } else if vs.iter().all(|v| *v == Verdict::NotApplicable) {
            Verdict::NotApplicable
        } else {
            Verdict::Pass
        }
    }

    pub fn verdict(&self, stage: &str) -> Option<&StageVerdict> {
        self.verdicts.iter().find(|v| v.stage == stage)
    }
}

fn index_at(trace: &Trace, t: f64) -> Option<usize> {
    trace.snapshots.iter().position(|s| s.t == t)
}

fn index_at_or_before(trace: &Trace, t: f64) -> Option<usize> {
    trace.snapshots.iter().rposition(|s| s.t <= t)
}

fn stage_one(trace: &Trace, predicted: &PredictedTimes, measured: &MeasuredTimes, th: &Thresholds) -> StageVerdict {
    let v = StageVerdict::new("I");
    let snaps = &trace.snapshots;
    let Some(t_end) = measured.t_stage1_end else {
        let dense = snaps.len() > 1 && snaps[1].t - snaps[0].t <= 1.0;
        return if dense {
            let mut v = v;
            v.check(false, "mean value noise never became positive at a settled rate".into());
            v
        } else {
            v.inconclusive("window [0, T1] needs at least one snapshot per step".into())
        };
    };
    let mut v = v;
    let j = index_at(trace, t_end).expect("detected time is a snapshot time");
    let (s0, s) = (&snaps[0], &snaps[j]);
    let scale = s0.q_xi.iter().chain(&s0.k_xi).flatten().fold(0.0f64, |m, x| m.max(x.abs()));
    let drift = s
        .q_xi
        .iter()
        .chain(&s.k_xi)
        .flatten()
        .zip(s0.q_xi.iter().chain(&s0.k_xi).flatten())
        .fold(0.0f64, |m, (x, x0)| m.max((x - x0).abs()));
    v.check(
        drift <= th.stage1_drift * scale,
        format!("t = {}: query/key noise drift {drift:.3e} against {} x max initial magnitude {scale:.3e}", s.t, th.stage1_drift),
    );
    // Negligibility of the mean value signal is stated from T1 on.
    let t1 = predicted.t1.round().max(t_end);
    let Some(k) = index_at_or_before(trace, t1).filter(|_| trace.last().map_or(false, |l| l.t >= t1)) else {
        return v.inconclusive(format!("trace ends before T1 = {t1}"));
    };
    v.snapshots = vec![0, j, k];
    let s = &snaps[k];
    let min_vxi = min_of(&s.v_xi);
    v.check(
        s.v_mu.abs() < 0.1 * min_vxi,
        format!("t = {}: |v_mu| = {:.3e} against 0.1 min_i v_xi = {:.3e}", s.t, s.v_mu.abs(), 0.1 * min_vxi),
    );
    v
}

fn stage_two(trace: &Trace, predicted: &PredictedTimes, th: &Thresholds) -> StageVerdict {
    let v = StageVerdict::new("II");
    let t2 = predicted.t2_sgn.round().max(1.0);
    let Some(j) = index_at(trace, t2) else {
        return v.inconclusive(format!("no snapshot at t = {t2} (T2_sgn rounded)"));
    };
    let mut v = v;
    v.snapshots = vec![0, j];
    let table = match sign_table(&trace.snapshots[0], &trace.snapshots[j]) {
        Ok(t) => t,
        Err(e) => return v.inconclusive(e.to_string()),
    };
    let mixed = table.mixed_column_fraction();
    v.check(mixed < th.mixed_mass, format!("t = {t2}: mixed-class column mass {:.2}% (limit {:.0}%)", 100.0 * mixed, 100.0 * th.mixed_mass));
    for class in [SignClass::KposQpos, SignClass::KnegQneg] {
        let row = table.counts[class.index()];
        let total: u64 = row.iter().sum();
        let left = total - row[class.index()];
        let frac = if total == 0 { 0.0 } else { left as f64 / total as f64 };
        v.check(
            frac < th.leaving_mass,
            format!("{} at t=0: {left}/{total} = {:.2}% changed class (limit {:.0}%)", class.label(), 100.0 * frac, 100.0 * th.leaving_mass),
        );
    }
    v
}

/// Per-neuron majority voting outcome at one snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MajorityVote {
    pub neurons: usize,
    /// `sgn q_mu = sgn sum_i k_xi`.
    pub query_follows_key_noise: usize,
    /// `sgn q_mu = sgn sum_i q_xi`.
    pub query_follows_query_noise: usize,
    /// `sgn k_mu = -sgn q_mu`.
    pub opposite_signals: usize,
}

pub fn majority_vote(snap: &ProbeSnapshot) -> MajorityVote {
    let mut out = MajorityVote { neurons: snap.m_k(), query_follows_key_noise: 0, query_follows_query_noise: 0, opposite_signals: 0 };
    for k in 0..snap.m_k() {
        let q = sgn(snap.q_mu[k]);
        if q == 0.0 {
            continue;
        }
        out.query_follows_key_noise += (q == sgn(snap.k_xi[k].iter().sum())) as usize;
        out.query_follows_query_noise += (q == sgn(snap.q_xi[k].iter().sum())) as usize;
        out.opposite_signals += (q == -sgn(snap.k_mu[k])) as usize;
    }
    out
}

/// Largest `|s - 1/2|` over samples for `s11` and `s21`.
pub fn softmax_spread(snap: &ProbeSnapshot) -> (f64, f64) {
    let spread = |xs: &[f64]| xs.iter().fold(0.0f64, |m, x| m.max((x - 0.5).abs()));
    (spread(&snap.s11), spread(&snap.s21))
}

fn stage_three(trace: &Trace, predicted: &PredictedTimes, th: &Thresholds) -> StageVerdict {
    let v = StageVerdict::new("III");
    let t3 = predicted.t3.round();
    let last = trace.last().map_or(0.0, |s| s.t);
    if last < t3 {
        return v.inconclusive(format!("trace ends at t = {last} before T3 = {t3}"));
    }
    let j = index_at_or_before(trace, t3).expect("trace starts at 0");
    let mut v = v;
    v.snapshots = vec![j];
    let s = &trace.snapshots[j];
    let vote = majority_vote(s);
    v.check(
        vote.query_follows_query_noise == vote.neurons,
        format!("t = {}: sgn q_mu = sgn sum_i q_xi for {}/{} neurons", s.t, vote.query_follows_query_noise, vote.neurons),
    );
    v.check(
        vote.opposite_signals == vote.neurons,
        format!("t = {}: sgn k_mu = -sgn q_mu for {}/{} neurons", s.t, vote.opposite_signals, vote.neurons),
    );
    let (d11, d21) = softmax_spread(s);
    v.check(d11 <= th.softmax_band, format!("max_i |s11 - 1/2| = {d11:.4} (band {})", th.softmax_band));
    v.check(d21 <= th.softmax_band, format!("max_i |s21 - 1/2| = {d21:.4} (band {})", th.softmax_band));
    v
}

/// Fit of `ln(mean_i s21)` on `t^2` over `[t0, t1]`, plus the smallest
/// per-sample R^2 over the same window.
pub fn s21_decay_fit(trace: &Trace, t0: f64, t1: f64) -> Option<(LinearFit, f64)> {
    let window: Vec<&ProbeSnapshot> = trace.snapshots.iter().filter(|s| s.t >= t0 && s.t <= t1).collect();
    let x: Vec<f64> = window.iter().map(|s| s.t * s.t).collect();
    let y: Vec<f64> = window.iter().map(|s| (s.s21.iter().sum::<f64>() / s.s21.len() as f64).ln()).collect();
    let fit = linear_fit(&x, &y)?;
    let n = window.first()?.s21.len();
    let worst = (0..n)
        .filter_map(|i| {
            let yi: Vec<f64> = window.iter().map(|s| s.s21[i].ln()).collect();
            linear_fit(&x, &yi).map(|f| f.r_squared)
        })
        .fold(f64::INFINITY, f64::min);
    Some((fit, worst))
}

fn stage_four(trace: &Trace, predicted: &PredictedTimes, measured: &MeasuredTimes, th: &Thresholds, require_query_alignment: bool) -> StageVerdict {
    let v = StageVerdict::new("IV");
    let last = trace.last().map_or(0.0, |s| s.t);
    let Some(t_dec) = measured.t_s21_decayed else {
        return v.inconclusive(format!("s21 has not decayed below {} by the end of the trace (t = {last})", th.decayed));
    };
    let t3 = predicted.t3.round();
    let (start, origin) = if t3 < t_dec {
        (t3, "T3")
    } else {
        match measured.t_signal_departure {
            Some(t) if t < t_dec => (t, "measured signal departure (T3 lies past the decay)"),
            _ => return v.inconclusive(format!("no decay window: T3 = {t3} and signal departure are not before t_s21_decayed = {t_dec}")),
        }
    };
    let mut v = v;
    let Some((fit, worst)) = s21_decay_fit(trace, start, t_dec) else {
        return v.inconclusive(format!("window [{start}, {t_dec}] has fewer than two snapshots"));
    };
    v.snapshots = trace.snapshots.iter().enumerate().filter(|(_, s)| s.t >= start && s.t <= t_dec).map(|(j, _)| j).collect();
    v.check(
        fit.r_squared >= th.r_squared && fit.slope < 0.0,
        format!(
            "ln mean_i s21 on t^2 over [{start}, {t_dec}] (start from {origin}): slope {:.3e}, R^2 {:.5}; worst per-sample R^2 {worst:.5}",
            fit.slope, fit.r_squared
        ),
    );
    let band = v
        .snapshots
        .iter()
        .map(|&j| softmax_spread(&trace.snapshots[j]).0)
        .fold(0.0f64, f64::max);
    v.check(band <= th.softmax_band, format!("max |s11 - 1/2| on the window = {band:.4} (band {})", th.softmax_band));

    let t4 = predicted.t4.round();
    match index_at_or_before(trace, t4) {
        Some(j) if last >= t4 => {
            v.snapshots.push(j);
            let l = trace.snapshots[j].train_loss;
            v.check(
                l >= th.loss_lo && l <= th.loss_hi,
                format!("L_S at t = {} (T4 = {:.1}) = {l:.4}, band [{}, {:.4}]", trace.snapshots[j].t, predicted.t4, th.loss_lo, th.loss_hi),
            );
        }
        _ => return v.inconclusive(format!("trace ends at t = {last} before T4 = {t4}")),
    }
    if require_query_alignment {
        match (measured.t_query_flip, measured.t_final_aligned) {
            (Some(tq), Some(tf)) => {
                let ok = tf >= tq && trace.last().map(|s| alignment_fraction(s).final_) == Some(1.0);
                v.snapshots.push(trace.snapshots.len() - 1);
                v.check(ok, format!("query flip onset t = {tq}, full final alignment from t = {tf}, held at the last snapshot"));
            }
            (None, _) => return v.inconclusive("no query noise flip observed in the trace".into()),
            (Some(tq), None) => {
                if last < tq + th.alignment_margin.max(1.0) {
                    return v.inconclusive(format!("trace ends at t = {last} within the margin after the query flip"));
                }
                v.check(false, format!("query flip onset t = {tq} but final alignment never reached 1"));
            }
        }
    }
    v
}

/// Evaluates all four stage predicates. GD-family traces get
/// not-applicable verdicts; Adam traces skip Stage I and the final query
/// noise alignment.
pub fn verify_stage_predicates(trace: &Trace, predicted: &PredictedTimes, th: &Thresholds) -> StageReport {
    let mut report = StageReport { predicted: predicted.clone(), measured: MeasuredTimes::default(), verdicts: Vec::new(), preflight: None };
    let measured = match detect_transitions(trace, th) {
        Ok(m) => m,
        Err(e) => {
            report.preflight = Some(e.to_string());
            for stage in ["I", "II", "III", "IV"] {
                report.verdicts.push(StageVerdict::new(stage).inconclusive(format!("preflight failed: {e}")));
            }
            return report;
        }
    };
    report.measured = measured.clone();
    let kind = trace.context.optimizer;
    if matches!(kind, OptimizerKind::Gd | OptimizerKind::GdMomentum) {
        for stage in ["I", "II", "III", "IV"] {
            report
                .verdicts
                .push(StageVerdict::new(stage).not_applicable(format!("stage predicates describe sign-based updates, trace uses {}", kind.name())));
        }
        return report;
    }
    let signgd = kind == OptimizerKind::Signgd;
    report.verdicts.push(if signgd {
        stage_one(trace, predicted, &measured, th)
    } else {
        StageVerdict::new("I").not_applicable("Stage I rates are stated for SignGD".into())
    });
    report.verdicts.push(stage_two(trace, predicted, th));
    report.verdicts.push(stage_three(trace, predicted, th));
    report.verdicts.push(stage_four(trace, predicted, &measured, th, signgd));
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceVerdict {
    pub verdict: Verdict,
    pub epsilon: f64,
    /// `ceil(2 ln(1/eps) / (eta sigma_p s))`.
    pub budget: f64,
    pub first_below: Option<f64>,
    pub final_loss: f64,
    pub final_t: f64,
    /// Fit of `ln L_S` on `t` over the post-T4 window.
    pub rate_fit: Option<LinearFit>,
    pub evidence: Vec<String>,
}

pub fn verify_convergence(trace: &Trace, epsilon: f64, inputs: &TimeInputs, t4: f64, th: &Thresholds) -> Result<ConvergenceVerdict> {
    preflight(trace)?;
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon = {epsilon} must be positive")));
    }
    let budget = (2.0 * (1.0 / epsilon).ln().max(0.0) / (inputs.eta * inputs.noise_scale())).ceil();
    let last = trace.last().expect("preflight");
    let first_below = first_time(trace, |s| s.train_loss <= epsilon);
    let mut out = ConvergenceVerdict {
        verdict: Verdict::Pass,
        epsilon,
        budget,
        first_below,
        final_loss: last.train_loss,
        final_t: last.t,
        rate_fit: None,
        evidence: Vec::new(),
    };
    match first_below {
        Some(t) if t <= budget => out.evidence.push(format!("[ok] L_S <= {epsilon} first at t = {t} within T = {budget}")),
        Some(t) => {
            out.verdict = Verdict::Fail;
            out.evidence.push(format!("[FAIL] L_S <= {epsilon} only at t = {t}, past T = {budget}"));
        }
        None => {
            out.verdict = Verdict::Fail;
            out.evidence.push(format!("[FAIL] budget exhausted at t = {}: attained L_S = {:.4e}", last.t, last.train_loss));
        }
    }
    let window: Vec<&ProbeSnapshot> = trace.snapshots.iter().filter(|s| s.t >= t4 && s.train_loss > 0.0).collect();
    let x: Vec<f64> = window.iter().map(|s| s.t).collect();
    let y: Vec<f64> = window.iter().map(|s| s.train_loss.ln()).collect();
    out.rate_fit = linear_fit(&x, &y);
    match out.rate_fit {
        Some(fit) if fit.r_squared >= th.r_squared && fit.slope < 0.0 => out
            .evidence
            .push(format!("[ok] ln L_S on t over t >= {t4:.1}: slope {:.4e}, R^2 {:.5}", fit.slope, fit.r_squared)),
        Some(fit) => {
            out.verdict = Verdict::Fail;
            out.evidence
                .push(format!("[FAIL] ln L_S on t over t >= {t4:.1}: slope {:.4e}, R^2 {:.5}", fit.slope, fit.r_squared));
        }
        None => {
            if out.verdict == Verdict::Pass {
                out.verdict = Verdict::Inconclusive;
            }
            out.evidence.push(format!("too few snapshots after T4 = {t4:.1} for a rate fit"));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizationVerdict {
    pub verdict: Verdict,
    pub logistic: f64,
    pub zero_one: f64,
    pub n_test: usize,
    pub lower_bound: f64,
}

/// Logistic test loss on fresh samples must stay at least 0.1.
pub fn verify_generalization(params: &Params, head: &Head, config: &DataConfig, n_test: usize, seed: u64) -> Result<GeneralizationVerdict> {
    if n_test == 0 {
        return Err(Error::Config("n_test must be at least 1".into()));
    }
    let samples = crate::data::generate_test_samples(config, n_test, seed)?;
    let loss = loss_on_samples(params, head, &samples)?;
    let lower_bound = 0.1;
    Ok(GeneralizationVerdict {
        verdict: if loss.logistic >= lower_bound { Verdict::Pass } else { Verdict::Fail },
        logistic: loss.logistic,
        zero_one: loss.zero_one,
        n_test,
        lower_bound,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityVerdict {
    pub verdict: Verdict,
    pub first_sparse: Option<f64>,
    /// Smallest `max(max_i s11, max_i s21)` over the trace.
    pub best: f64,
    pub best_t: f64,
}

pub fn verify_attention_sparsity(trace: &Trace, th: &Thresholds) -> Result<SparsityVerdict> {
    preflight(trace)?;
    let level = |s: &ProbeSnapshot| max_of(&s.s11).max(max_of(&s.s21));
    let first_sparse = first_time(trace, |s| level(s) < th.sparsity);
    let (best_t, best) = trace
        .snapshots
        .iter()
        .map(|s| (s.t, level(s)))
        .fold((0.0, f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
    Ok(SparsityVerdict {
        verdict: if first_sparse.is_some() { Verdict::Pass } else { Verdict::Fail },
        first_sparse,
        best,
        best_t,
    })
}

/// Fraction of samples whose signal query attends most to a noise patch.
pub fn argmax_on_noise(snap: &ProbeSnapshot, dataset: &Dataset) -> f64 {
    let hits = snap
        .attn_argmax
        .iter()
        .zip(&dataset.samples)
        .filter(|(a, s)| !s.signal_positions.contains(a))
        .count();
    hits as f64 / dataset.len().max(1) as f64
}

/// Initially opposite `(k, i)` query/key noise pairs and how many ended in
/// the jointly positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OppositeResolution {
    pub opposite: u64,
    pub to_positive: u64,
    pub to_negative: u64,
    pub unresolved: u64,
}

impl std::ops::AddAssign for OppositeResolution {
    fn add_assign(&mut self, o: Self) {
        self.opposite += o.opposite;
        self.to_positive += o.to_positive;
        self.to_negative += o.to_negative;
        self.unresolved += o.unresolved;
    }
}

pub fn opposite_resolution(initial: &ProbeSnapshot, later: &ProbeSnapshot) -> Result<OppositeResolution> {
    let table = sign_table(initial, later)?;
    let mut out = OppositeResolution::default();
    for class in [SignClass::KposQneg, SignClass::KnegQpos] {
        let row = table.counts[class.index()];
        out.opposite += row.iter().sum::<u64>();
        out.to_positive += row[SignClass::KposQpos.index()];
        out.to_negative += row[SignClass::KnegQneg.index()];
        out.unresolved += row[SignClass::KposQneg.index()] + row[SignClass::KnegQpos.index()];
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinomialHalfTest {
    pub successes: u64,
    pub trials: u64,
    pub fraction: f64,
    pub std_error: f64,
    /// `(fraction - 1/2) / std_error`.
    pub z: f64,
    pub pass: bool,
}

/// Is the fraction of resolved pairs that went positive within
/// `k` binomial standard errors (at p = 1/2) of one half?
pub fn binomial_half_test(res: &OppositeResolution, k: f64) -> Result<BinomialHalfTest> {
    let trials = res.to_positive + res.to_negative;
    if trials == 0 {
        return Err(Error::Inconclusive("no initially opposite pair resolved".into()));
    }
    let fraction = res.to_positive as f64 / trials as f64;
    let std_error = binomial_std_error(0.5, trials as usize);
    let z = (fraction - 0.5) / std_error;
    Ok(BinomialHalfTest { successes: res.to_positive, trials, fraction, std_error, z, pass: z.abs() <= k })
}

/// Replaces the main trace's first `zoom_end` time units with a zoomed
/// segment. Snapshot times of both traces are in main-step units.
pub fn merge_zoom(zoom: &Trace, main: &Trace) -> Result<Trace> {
    preflight(zoom)?;
    preflight(main)?;
    let zoom_end = zoom.last().expect("preflight").t;
    if zoom.snapshots[0].t != main.snapshots[0].t {
        return Err(Error::Shape("zoom and main traces start at different times".into()));
    }
    let mut snapshots: Vec<ProbeSnapshot> = zoom.snapshots.iter().filter(|s| s.t < zoom_end).cloned().collect();
    snapshots.extend(main.snapshots.iter().filter(|s| s.t >= zoom_end).cloned());
    Ok(Trace { context: main.context.clone(), snapshots })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::RunContext;

    fn inputs() -> TimeInputs {
        TimeInputs { eta: 1e-4, sigma_p: 2.0 / 80f64.sqrt(), s: 80, n: 20, m_k: 100, m_v: 20, signal_norm: 1.0 }
    }

    const BETA: BetaStats = BetaStats { beta_xi: 0.015, beta_mu: 0.0067 };

    #[test]
    fn times_by_hand() {
        let p = predicted_times(&inputs(), &BETA, TheoryConstants::default()).unwrap();
        let noise = 2.0 * 80f64.sqrt();
        let unit = 1.0 / (1e-4 * noise);
        assert!((p.t1 - 4.0 * 0.015 / 20f64.sqrt() * unit).abs() < 1e-9);
        assert!((p.t2_sgn - 3.0 * 2f64.sqrt() * 0.015 * unit).abs() < 1e-9);
        assert!((p.t2 - 1000.0 * 2f64.sqrt() * 0.015 * unit).abs() < 1e-6);
        assert!((p.t3 - 3.0 * 0.0067 / 1e-4).abs() < 1e-9);
        let hi = (1.01 * PI / 2.0).sqrt() * noise.ln().sqrt() * unit / 10.0;
        assert!((p.t4_minus_hi - hi).abs() < 1e-9);
        assert!((p.t4 - noise.ln() * unit / 10.0).abs() < 1e-9);
        // sigma_p s = 17.9 < 3 sqrt2 n = 84.9, so the lower bound is unavailable.
        assert!(p.t4_minus_lo.is_none());
        assert!(!p.monotone);
    }

    #[test]
    fn doubling_eta_halves_times() {
        let a = predicted_times(&inputs(), &BETA, TheoryConstants::default()).unwrap();
        let b = predicted_times(&TimeInputs { eta: 2e-4, ..inputs() }, &BETA, TheoryConstants::default()).unwrap();
        for ((_, x), (_, y)) in a.ordered().into_iter().zip(b.ordered()) {
            if let (Some(x), Some(y)) = (x, y) {
                assert!((x / y - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn high_snr_is_a_regime_error() {
        let hi = TimeInputs { sigma_p: 0.01, s: 10, ..inputs() };
        assert!(matches!(predicted_times(&hi, &BETA, TheoryConstants::default()), Err(Error::Regime(_))));
    }

    #[test]
    fn separated_regime_is_monotone() {
        // T1 0.009, T2_sgn 0.04, T2 1.4, T3 15, T4- in [27, 33], T4 about 2000.
        let wide = TimeInputs { sigma_p: 1.0, s: 1000, n: 2, m_k: 1, ..inputs() };
        let beta = BetaStats { beta_xi: 1e-3, beta_mu: 5e-4 };
        let p = predicted_times(&wide, &beta, TheoryConstants { c3: 20.0, ..Default::default() }).unwrap();
        assert!(p.monotone, "{:?}", p.notes);
    }

    fn context() -> RunContext {
        RunContext {
            optimizer: OptimizerKind::Signgd,
            eta: 1.0,
            time_scale: 1.0,
            n: 1,
            m_k: 1,
            m_v: 1,
            signal_norm: 1.0,
            noise_l1: vec![1.0],
            supports_disjoint: true,
        }
    }

    fn snap(t: f64, q_mu: f64, k_xi: f64) -> ProbeSnapshot {
        ProbeSnapshot {
            t,
            q_mu: vec![q_mu],
            k_mu: vec![-q_mu],
            q_xi: vec![vec![-1.0]],
            k_xi: vec![vec![k_xi]],
            v_mu: 0.0,
            v_xi: vec![2.0 * t - 1.0],
            s11: vec![0.5],
            s21: vec![0.5 * (-0.01 * t * t).exp()],
            attn_argmax: vec![0],
            loss_deriv: vec![0.5],
            train_loss: LN_2,
            test_loss: None,
            test_zero_one: None,
        }
    }

    #[test]
    fn planted_key_flip() {
        let snapshots = (0..15)
            .map(|t| {
                let t = t as f64;
                let k = if t <= 7.0 { -1.0 - t } else { -8.0 + 3.0 * (t - 7.0) };
                snap(t, 10.0 + t, k)
            })
            .collect();
        let trace = Trace { context: context(), snapshots };
        let m = detect_transitions(&trace, &Thresholds::default()).unwrap();
        assert_eq!(m.t_signal_departure, Some(6.0));
        assert_eq!(m.t_key_flip, Some(7.0));
        assert_eq!(m.t_key_cross, Some(10.0));
        assert_eq!(m.t_query_flip, None);
        // v_xi = 2t - 1 is positive from t = 1 and grows at 2 eta ||xi||_1.
        assert_eq!(m.t_stage1_end, Some(1.0));
        assert_eq!(detect_transitions(&trace, &Thresholds::default()).unwrap(), m);
    }

    #[test]
    fn shuffled_trace_is_inconclusive() {
        let mut snapshots: Vec<_> = (0..5).map(|t| snap(t as f64, 1.0, 1.0)).collect();
        snapshots.swap(1, 3);
        let trace = Trace { context: context(), snapshots };
        assert!(matches!(detect_transitions(&trace, &Thresholds::default()), Err(Error::Inconclusive(_))));
        let p = predicted_times(&inputs(), &BETA, TheoryConstants::default()).unwrap();
        let report = verify_stage_predicates(&trace, &p, &Thresholds::default());
        assert_eq!(report.overall(), Verdict::Inconclusive);
        assert!(report.verdicts.iter().all(|v| v.verdict == Verdict::Inconclusive));
    }

    #[test]
    fn planted_gaussian_decay_fits() {
        let snapshots = (0..30).map(|t| snap(t as f64, 1.0, 1.0)).collect();
        let trace = Trace { context: context(), snapshots };
        let (fit, worst) = s21_decay_fit(&trace, 3.0, 20.0).unwrap();
        assert!((fit.slope + 0.01).abs() < 1e-12 && fit.r_squared > 1.0 - 1e-12 && worst > 1.0 - 1e-12);
    }

    #[test]
    fn gd_traces_are_not_applicable() {
        let snapshots = (0..5).map(|t| snap(t as f64, 1.0, 1.0)).collect();
        let trace = Trace { context: RunContext { optimizer: OptimizerKind::Gd, ..context() }, snapshots };
        let p = predicted_times(&inputs(), &BETA, TheoryConstants::default()).unwrap();
        let report = verify_stage_predicates(&trace, &p, &Thresholds::default());
        assert_eq!(report.overall(), Verdict::NotApplicable);
    }

    #[test]
    fn binomial_half() {
        let res = OppositeResolution { opposite: 100, to_positive: 50, to_negative: 50, unresolved: 0 };
        let t = binomial_half_test(&res, 3.0).unwrap();
        assert_eq!(t.z, 0.0);
        assert!(t.pass);
        let skew = OppositeResolution { opposite: 100, to_positive: 80, to_negative: 20, unresolved: 0 };
        assert!(!binomial_half_test(&skew, 3.0).unwrap().pass);
        assert!(binomial_half_test(&OppositeResolution::default(), 3.0).is_err());
    }

    #[test]
    fn convergence_trivial_epsilon() {
        let snapshots = (0..5).map(|t| snap(t as f64, 1.0, 1.0)).collect();
        let trace = Trace { context: context(), snapshots };
        let v = verify_convergence(&trace, 1.0, &inputs(), 0.0, &Thresholds::default()).unwrap();
        assert_eq!(v.budget, 0.0);
        assert_eq!(v.first_below, Some(0.0));
    }

    #[test]
    fn zoom_merge_keeps_order() {
        let zoom = Trace { context: context(), snapshots: (0..=20).map(|t| snap(t as f64 * 0.1, 1.0, 1.0)).collect() };
        let main = Trace { context: context(), snapshots: (0..6).map(|t| snap(t as f64, 1.0, 1.0)).collect() };
        let merged = merge_zoom(&zoom, &main).unwrap();
        assert!(merged.is_strictly_increasing());
        assert_eq!(merged.snapshots.len(), 20 + 4);
        assert_eq!(merged.snapshots[20].t, 2.0);
    }
}
