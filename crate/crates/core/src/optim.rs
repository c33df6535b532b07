//! Optimizers as state transitions over the parameters, and the full-batch
//! training loop that drives them.

use serde::{Deserialize, Serialize};

use crate::data::{generate_test_samples, Dataset, Sample, DEFAULT_TEST_SIZE};
use crate::error::{Error, Result};
use crate::grad::{gradients, Grads};
use crate::model::{forward_all, loss_on_samples, mean_loss, Head, Params};
use crate::probe::{snapshot, RunContext, Trace};
use crate::stats::sgn;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Signgd,
    Gd,
    GdMomentum,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Signgd => "signgd",
            OptimizerKind::Gd => "gd",
            OptimizerKind::GdMomentum => "gd_momentum",
            OptimizerKind::Adam => "adam",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "signgd" | "sign" => Ok(OptimizerKind::Signgd),
            "gd" => Ok(OptimizerKind::Gd),
            "gd_momentum" | "momentum" => Ok(OptimizerKind::GdMomentum),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub eta: f64,
    #[serde(default)]
    pub beta1: f64,
    #[serde(default)]
    pub beta2: f64,
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default = "default_true")]
    pub bias_correction: bool,
}

fn default_true() -> bool {
    true
}

impl OptimizerSpec {
    pub fn signgd(eta: f64) -> Self {
        Self { kind: OptimizerKind::Signgd, eta, beta1: 0.0, beta2: 0.0, epsilon: 0.0, bias_correction: true }
    }

    pub fn gd(eta: f64) -> Self {
        Self { kind: OptimizerKind::Gd, ..Self::signgd(eta) }
    }

    pub fn gd_momentum(eta: f64, beta1: f64) -> Self {
        Self { kind: OptimizerKind::GdMomentum, beta1, ..Self::signgd(eta) }
    }

    pub fn adam(eta: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self { kind: OptimizerKind::Adam, eta, beta1, beta2, epsilon, bias_correction: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta = {} must be positive", self.eta)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} = {b} must lie in [0, 1)")));
            }
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config(format!("epsilon = {} must be non-negative", self.epsilon)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step_count: u64,
    /// One buffer per tensor, in `[W_Q, W_K, W_V_pos, W_V_neg, head_pos, head_neg]` order.
    pub first_moment: Option<Vec<Vec<f64>>>,
    pub second_moment: Option<Vec<Vec<f64>>>,
}

fn param_slices<'a>(params: &'a mut Params, head: Option<&'a mut Head>) -> Vec<&'a mut [f64]> {
    let mut out: Vec<&mut [f64]> = params
        .tensors_mut()
        .into_iter()
        .map(|t| t.as_slice_mut().expect("standard layout"))
        .collect();
    if let Some(h) = head {
        out.push(&mut h.pos);
        out.push(&mut h.neg);
    }
    out
}

fn grad_slices(grads: &Grads, with_head: bool) -> Vec<&[f64]> {
    let mut out: Vec<&[f64]> =
        grads.tensors().into_iter().map(|t| t.as_slice().expect("standard layout")).collect();
    if with_head {
        let h = grads.head.as_ref().expect("head gradient present when the head is trained");
        out.push(&h.pos);
        out.push(&h.neg);
    }
    out
}

fn zeros_like(slices: &[&[f64]]) -> Vec<Vec<f64>> {
    slices.iter().map(|s| vec![0.0; s.len()]).collect()
}

/// Applies one update in place.
pub fn apply_step(
    spec: &OptimizerSpec,
    state: &mut OptimizerState,
    params: &mut Params,
    head: Option<&mut Head>,
    grads: &Grads,
) {
    let with_head = head.is_some();
    let gs = grad_slices(grads, with_head);
    let mut ps = param_slices(params, head);
    let eta = spec.eta;
    state.step_count += 1;
    match spec.kind {
        OptimizerKind::Signgd => {
            for (p, g) in ps.iter_mut().zip(&gs) {
                for (x, &gx) in p.iter_mut().zip(g.iter()) {
                    *x -= eta * sgn(gx);
                }
            }
        }
        OptimizerKind::Gd => {
            for (p, g) in ps.iter_mut().zip(&gs) {
                for (x, &gx) in p.iter_mut().zip(g.iter()) {
                    *x -= eta * gx;
                }
            }
        }
        OptimizerKind::GdMomentum => {
            let m = state.first_moment.get_or_insert_with(|| zeros_like(&gs));
            for ((p, g), m) in ps.iter_mut().zip(&gs).zip(m.iter_mut()) {
                for ((x, &gx), mx) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()) {
                    *mx = spec.beta1 * *mx + gx;
                    *x -= eta * *mx;
                }
            }
        }
        OptimizerKind::Adam => {
            let (b1, b2) = (spec.beta1, spec.beta2);
            let t = state.step_count as i32;
            let (c1, c2) = if spec.bias_correction {
                (1.0 - b1.powi(t), 1.0 - b2.powi(t))
            } else {
                (1.0, 1.0)
            };
            let m = state.first_moment.get_or_insert_with(|| zeros_like(&gs));
            let v = state.second_moment.get_or_insert_with(|| zeros_like(&gs));
            for (((p, g), m), v) in ps.iter_mut().zip(&gs).zip(m.iter_mut()).zip(v.iter_mut()) {
                for (((x, &gx), mx), vx) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mx = b1 * *mx + (1.0 - b1) * gx;
                    *vx = b2 * *vx + (1.0 - b2) * gx * gx;
                    let m_hat = *mx / c1;
                    let v_hat = *vx / c2;
                    let denom = v_hat.sqrt() + spec.epsilon;
                    if denom != 0.0 {
                        *x -= eta * m_hat / denom;
                    }
                }
            }
        }
    }
}

/// `theta - eta * sgn(g)` with `sgn(0) = 0`.
pub fn signgd_step(params: &Params, grads: &Grads, eta: f64) -> Params {
    let mut out = params.clone();
    apply_step(&OptimizerSpec::signgd(eta), &mut OptimizerState::default(), &mut out, None, grads);
    out
}

/// Plain GD when `momentum` is `None`; heavy-ball `m <- beta1 m + g` otherwise.
pub fn gd_step(
    params: &Params,
    grads: &Grads,
    eta: f64,
    momentum: Option<(f64, OptimizerState)>,
) -> (Params, Option<OptimizerState>) {
    let mut out = params.clone();
    match momentum {
        None => {
            apply_step(&OptimizerSpec::gd(eta), &mut OptimizerState::default(), &mut out, None, grads);
            (out, None)
        }
        Some((beta1, mut state)) => {
            apply_step(&OptimizerSpec::gd_momentum(eta, beta1), &mut state, &mut out, None, grads);
            (out, Some(state))
        }
    }
}

pub fn adam_step(
    params: &Params,
    grads: &Grads,
    spec: &OptimizerSpec,
    mut state: OptimizerState,
) -> (Params, OptimizerState) {
    let mut out = params.clone();
    apply_step(spec, &mut state, &mut out, None, grads);
    (out, state)
}

/// When snapshots are taken: every step up to `dense_until`, then every
/// `every` steps, plus the final step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cadence {
    pub dense_until: u64,
    pub every: u64,
}

impl Default for Cadence {
    fn default() -> Self {
        Self { dense_until: 50, every: 10 }
    }
}

impl Cadence {
    pub fn every_step() -> Self {
        Self { dense_until: u64::MAX, every: 1 }
    }

    pub fn fixed(every: u64) -> Self {
        Self { dense_until: 0, every: every.max(1) }
    }

    pub fn includes(&self, t: u64, last: u64) -> bool {
        t <= self.dense_until || t % self.every.max(1) == 0 || t == last
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub iters: u64,
    pub cadence: Cadence,
    /// Evaluate the test loss at snapshots whose step is a multiple of this
    /// (and at the last step). `None` disables test evaluation.
    pub test_every: Option<u64>,
    pub n_test: usize,
    pub test_seed: u64,
    pub trainable_head: bool,
    /// Snapshot time is `step * time_scale`; below 1 for zoomed runs.
    pub time_scale: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            iters: 0,
            cadence: Cadence::default(),
            test_every: None,
            n_test: DEFAULT_TEST_SIZE,
            test_seed: 0,
            trainable_head: false,
            time_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trace: Trace,
    pub params: Params,
    pub head: Option<Head>,
    pub final_train_loss: f64,
}

fn check_caches(caches: &[crate::model::ForwardCache], t: u64) -> Result<()> {
    if caches.iter().any(|c| !c.loss.is_finite() || !c.output.is_finite()) {
        return Err(Error::NonFinite { tensor: "training loss".into(), iteration: t });
    }
    Ok(())
}

/// Full-batch deterministic loop: forward, analytic gradients, optimizer
/// step. Snapshots are emitted at `t = 0` and then per the cadence.
pub fn run_training(
    params: Params,
    dataset: &Dataset,
    spec: &OptimizerSpec,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    spec.validate()?;
    let m_v = params.m_v();
    let mut params = params;
    let mut head = Head::fixed(m_v);
    let mut state = OptimizerState::default();
    let test_samples: Vec<Sample> = match options.test_every {
        Some(_) => generate_test_samples(&dataset.config, options.n_test, options.test_seed)?,
        None => Vec::new(),
    };
    let context = RunContext::new(dataset, &params, spec, options.time_scale);
    let mut trace = Trace { context, snapshots: Vec::new() };

    let mut caches = forward_all(&params, &head, &dataset.samples)?;
    check_caches(&caches, 0)?;
    let last = options.iters;
    let record = |t: u64, params: &Params, head: &Head, caches: &[_], trace: &mut Trace| -> Result<()> {
        if !options.cadence.includes(t, last) {
            return Ok(());
        }
        let mut snap = snapshot(params, head, dataset, t as f64 * options.time_scale, caches)?;
        if let Some(every) = options.test_every {
            if t % every.max(1) == 0 || t == last {
                let loss = loss_on_samples(params, head, &test_samples)?;
                snap.test_loss = Some(loss.logistic);
                snap.test_zero_one = Some(loss.zero_one);
            }
        }
        trace.snapshots.push(snap);
        Ok(())
    };
    record(0, &params, &head, &caches, &mut trace)?;

    for t in 0..options.iters {
        let grads = gradients(&params, &head, options.trainable_head, &dataset.samples, &caches)?;
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::NonFinite { tensor: name.into(), iteration: t });
        }
        let head_ref = options.trainable_head.then_some(&mut head);
        apply_step(spec, &mut state, &mut params, head_ref, &grads);
        if let Some(name) = params.first_non_finite() {
            return Err(Error::NonFinite { tensor: name.into(), iteration: t + 1 });
        }
        caches = forward_all(&params, &head, &dataset.samples)?;
        check_caches(&caches, t + 1)?;
        record(t + 1, &params, &head, &caches, &mut trace)?;
    }
    let final_train_loss = mean_loss(&caches);
    Ok(TrainOutcome {
        trace,
        params,
        head: options.trainable_head.then_some(head),
        final_train_loss,
    })
}
