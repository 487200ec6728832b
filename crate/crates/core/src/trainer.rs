//! The training loop. Every step takes an elementary step on a T1 batch; in
//! T1–T2 mode every `K`-th step first moves the hyperparameters along the
//! hypergradient computed from that same T1 batch and a T2 batch.
//!
//! Step order at a hyper-update step `t`:
//!
//! 1. noisy forward/backward on the T1 batch with `λ_t`, giving `∇θ C̃1`;
//! 2. clean forward/backward on the T2 batch, giving `∇θ C2`;
//! 3. `G` from both, then `λ_{t+1} = project(λ_t + η2·G)`;
//! 4. elementary step on `θ` with the gradient from 1.
//!
//! So the new `λ` is first consumed by step `t + 1`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::{self, Dataset, DatasetSplit};
use crate::error::{Error, Result};
use crate::hypergrad::{self, HyperGradient, NoiseRoute};
use crate::network::{self, BatchNormState, InitScheme, LossHead, Mode, ModelParams};
use crate::optim::{self, AdamState, HyperOptConfig, OptimizerKind};
use crate::regularization::{self, Families, HyperIndex, HyperParams};
use crate::rng::{streams, RngStream};
use crate::tensor::{self, Tensor};

/// Source of wall-clock seconds. The core never reads a clock itself.
pub trait Clock {
    fn seconds(&self) -> f64;
}

/// Always zero: timings drop out and outputs stay bit-reproducible.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullClock;

impl Clock for NullClock {
    fn seconds(&self) -> f64 {
        0.0
    }
}

/// Passes spent on training and hyper-updates. Evaluation and logging
/// passes are not counted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PassCounters {
    pub forward: u64,
    pub backward: u64,
    pub tangent: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    T1T2,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seeds {
    pub init: u64,
    pub noise: u64,
    pub shuffle: u64,
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            init: seed,
            noise: seed,
            shuffle: seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    /// Hidden widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    pub batch_norm: bool,
    pub init: InitScheme,
    pub initial_hypers: HyperParams,
    /// Families moved by the hyper-updates in T1–T2 mode.
    pub families: Families,
    pub optimizer: OptimizerKind,
    /// Elementary step size η1.
    pub lr: f64,
    pub anneal_start: f64,
    pub hyper: HyperOptConfig,
    pub route: NoiseRoute,
    /// Batch norm on T2 batch statistics instead of running statistics.
    pub t2_batch_stats: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub seeds: Seeds,
    /// Steps between batch-metric records.
    pub log_interval: u64,
    /// Epochs between full-set evaluations; 0 evaluates only at the end.
    pub eval_interval: usize,
}

impl TrainConfig {
    /// ADAM at 1e-3 annealed from half-way, batch 100, zero initial
    /// regularization in per-layer layout, every family tuned by SGD.
    pub fn new(hidden: Vec<usize>) -> Self {
        let depth = hidden.len() + 1;
        Self {
            mode: TrainMode::T1T2,
            hidden,
            batch_norm: false,
            init: InitScheme::He,
            initial_hypers: HyperParams::per_layer(vec![0.0; depth], vec![0.0; depth]),
            families: Families {
                input_noise: true,
                hidden_noise: true,
                l2: true,
            },
            optimizer: OptimizerKind::Adam,
            lr: 1e-3,
            anneal_start: 0.5,
            hyper: HyperOptConfig::SGD_DEFAULT,
            route: NoiseRoute::Joint,
            t2_batch_stats: false,
            epochs: 30,
            batch_size: 100,
            seeds: Seeds::all(1),
            log_interval: 50,
            eval_interval: 1,
        }
    }

    pub fn depth(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config(format!("bad hidden widths {:?}", self.hidden)));
        }
        self.initial_hypers
            .check_depth(self.depth())
            .map_err(|e| Error::Config(format!("{e}")))?;
        if regularization::project(&self.initial_hypers) != self.initial_hypers {
            return Err(Error::Config("initial hyperparameters must be non-negative".into()));
        }
        if !self.initial_hypers.is_finite() {
            return Err(Error::Config("initial hyperparameters must be finite".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("step size {} must be positive", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.anneal_start) {
            return Err(Error::Config(format!(
                "anneal start {} outside [0, 1]",
                self.anneal_start
            )));
        }
        self.hyper.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.log_interval == 0 {
            return Err(Error::Config("epochs, batch size and log interval must be positive".into()));
        }
        Ok(())
    }

    fn check_data(&self, split: &DatasetSplit) -> Result<()> {
        for (name, set) in [("T1", &split.t1), ("T2", &split.t2), ("test", &split.test)] {
            if set.is_empty() {
                return Err(Error::Config(format!("{name} is empty")));
            }
            if set.dims() != split.t1.dims() || set.classes != split.t1.classes {
                return Err(Error::Config(format!("{name} does not match T1")));
            }
        }
        if self.batch_size > split.t1.len() || self.batch_size > split.t2.len() {
            return Err(Error::Config(format!(
                "batch size {} exceeds T1 ({}) or T2 ({})",
                self.batch_size,
                split.t1.len(),
                split.t2.len()
            )));
        }
        Ok(())
    }

    pub fn layer_sizes(&self, inputs: usize, classes: usize) -> Vec<usize> {
        let mut sizes = vec![inputs];
        sizes.extend(&self.hidden);
        sizes.push(classes);
        sizes
    }
}

#[derive(Debug, Clone)]
enum ElementaryOpt {
    Sgd,
    Adam(AdamState),
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub hypers: HyperParams,
    pub bn_state: BatchNormState,
    /// Elementary steps taken.
    pub step: u64,
    pub epoch: usize,
    pub counters: PassCounters,
    pub hyper_updates: u64,
    pub noise_rng: RngStream,
    opt: ElementaryOpt,
    hyper_adam: Option<AdamState>,
    t2_round: u64,
    t2_order: Vec<Vec<usize>>,
    t2_next: usize,
    shuffle_seed: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, inputs: usize, classes: usize) -> Result<Self> {
        cfg.validate()?;
        let sizes = cfg.layer_sizes(inputs, classes);
        let mut init_rng = RngStream::new(cfg.seeds.init, streams::INIT);
        let params = network::init_params(&sizes, cfg.init, cfg.batch_norm, &mut init_rng)?;
        let opt = match cfg.optimizer {
            OptimizerKind::Sgd => ElementaryOpt::Sgd,
            OptimizerKind::Adam => ElementaryOpt::Adam(AdamState::for_params(&params, cfg.lr)),
        };
        let hyper_adam = (cfg.hyper.kind == OptimizerKind::Adam).then(|| {
            let h = &cfg.initial_hypers;
            AdamState::new(&[h.noise_std.len() + h.l2.len()], 0.0)
        });
        Ok(Self {
            bn_state: BatchNormState::new(&params),
            params,
            hypers: cfg.initial_hypers.clone(),
            step: 0,
            epoch: 0,
            counters: PassCounters::default(),
            hyper_updates: 0,
            noise_rng: RngStream::new(cfg.seeds.noise, streams::NOISE),
            opt,
            hyper_adam,
            t2_round: 0,
            t2_order: Vec::new(),
            t2_next: 0,
            shuffle_seed: cfg.seeds.shuffle,
        })
    }

    /// Next T2 batch. T2 is reshuffled from its own stream whenever it runs
    /// out, independently of the T1 epochs.
    fn next_t2_rows(&mut self, n: usize, batch: usize) -> Result<Vec<usize>> {
        if self.t2_next >= self.t2_order.len() {
            self.t2_order = data::batches(n, batch, self.shuffle_seed, streams::SHUFFLE_T2, self.t2_round)?;
            self.t2_round += 1;
            self.t2_next = 0;
        }
        self.t2_next += 1;
        Ok(self.t2_order[self.t2_next - 1].clone())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseSeconds {
    pub elementary: f64,
    pub hyper: f64,
    pub eval: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub xent: f64,
    pub error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FullEval {
    pub t1: Metrics,
    pub t2: Metrics,
    pub test: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub step: u64,
    pub epoch: usize,
    /// `C̃1` on the step's T1 batch: noisy cross-entropy plus L2 penalty.
    pub c1_batch: f64,
    /// Clean cross-entropy on the step's T2 batch, at the parameters the
    /// step started from.
    pub c2_batch: f64,
    /// Hyperparameters after this step.
    pub hypers: HyperParams,
    /// Hypergradient computed at this step, if any.
    pub hypergrad: Option<HyperGradient>,
    /// Full-set metrics at an epoch boundary.
    pub full: Option<FullEval>,
    /// Cumulative seconds per phase.
    pub seconds: PhaseSeconds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub initial_hypers: HyperParams,
    pub final_hypers: HyperParams,
    pub final_eval: FullEval,
    pub steps: u64,
    pub hyper_update_count: u64,
    pub pass_counters: PassCounters,
    pub seconds: PhaseSeconds,
    pub wallclock_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub trajectory: Vec<TrajectoryRecord>,
    pub summary: Summary,
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub c1_batch: f64,
    /// Clean cross-entropy on the T2 batch, when one was given.
    pub c2_batch: Option<f64>,
    pub hypergrad: Option<HyperGradient>,
}

fn hyper_step_sizes(hypers: &HyperParams, cfg: &TrainConfig) -> Vec<f64> {
    let (eta_noise, eta_l2) = cfg.hyper.effective_lrs();
    let tuned = hypers.tuned_indices(cfg.families);
    hypers
        .indices()
        .into_iter()
        .map(|ix| match ix {
            _ if !tuned.contains(&ix) => 0.0,
            HyperIndex::Noise(_) => eta_noise,
            HyperIndex::L2(_) => eta_l2,
        })
        .collect()
}

/// `λ ← project(λ + η2·G)`; with ADAM the ascent direction comes from
/// feeding `−G`.
fn apply_hyper_update(state: &mut TrainState, g: &HyperGradient, cfg: &TrainConfig) -> Result<()> {
    let etas = hyper_step_sizes(&state.hypers, cfg);
    let indices = state.hypers.indices();
    let grads: Vec<f64> = indices.iter().map(|&ix| g.values.get(ix)).collect();
    let mut next = state.hypers.clone();
    match &mut state.hyper_adam {
        None => {
            for ((&ix, &eta), &gi) in indices.iter().zip(&etas).zip(&grads) {
                next.set(ix, next.get(ix) + eta * gi);
            }
        }
        Some(adam) => {
            let neg: Vec<f64> = grads.iter().map(|v| -v).collect();
            let dir = adam.direction(&neg)?;
            for ((&ix, &eta), &d) in indices.iter().zip(&etas).zip(&dir) {
                next.set(ix, next.get(ix) - eta * d);
            }
        }
    }
    if !next.is_finite() {
        return Err(Error::NonFinite("hyperparameter update".into()));
    }
    state.hypers = regularization::project(&next);
    state.hyper_updates += 1;
    Ok(())
}

/// One training step on `(t1_x, t1_y)` with elementary step size `lr`.
/// `t2` must be given when a hyper-update is due.
#[allow(clippy::too_many_arguments)]
pub fn t1t2_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    t1_x: &Tensor,
    t1_y: &[usize],
    t2: Option<(&Tensor, &[usize])>,
    lr: f64,
    clock: &dyn Clock,
    seconds: &mut PhaseSeconds,
) -> Result<StepReport> {
    let step = state.step + 1;
    let run = |state: &mut TrainState, seconds: &mut PhaseSeconds| -> Result<StepReport> {
        let t0 = clock.seconds();
        let depth = state.params.depth();
        let view = state.hypers.per_layer_view(depth)?;
        let (logits, trace) = network::forward(
            &state.params,
            t1_x,
            &view.noise_std,
            Mode::TrainNoisy,
            Some(&mut state.noise_rng),
            &mut state.bn_state,
        )?;
        let head = LossHead::SoftmaxXent(t1_y);
        let (loss, grad_logits) = head.loss_and_grad(&logits)?;
        let bp = network::backward(&trace, &state.params, &grad_logits)?;
        state.counters.forward += 1;
        state.counters.backward += 1;
        let (penalty, l2_grad) = regularization::l2_penalty_and_grad(&state.params, &view)?;
        let mut grad = bp.grads.clone();
        grad.axpy(1.0, &l2_grad);
        let t1 = clock.seconds();
        seconds.elementary += t1 - t0;

        let mut report = StepReport {
            c1_batch: loss + penalty,
            c2_batch: None,
            hypergrad: None,
        };
        if cfg.mode == TrainMode::T1T2 && optim::due_for_hyper_update(step, cfg.hyper.interval) {
            let (x2, y2) =
                t2.ok_or_else(|| Error::Contract("hyper-update due without a T2 batch".into()))?;
            let mode = if cfg.t2_batch_stats {
                Mode::EvalBatchStats
            } else {
                Mode::EvalClean
            };
            let (c2, g2) = hypergrad::validation_gradient(&state.params, x2, y2, &state.bn_state, mode)?;
            state.counters.forward += 1;
            state.counters.backward += 1;
            let g = hypergrad::compute(
                step,
                &g2,
                &state.params,
                &state.hypers,
                cfg.families,
                &trace,
                &bp,
                &head,
                cfg.route,
            )?;
            state.counters.tangent += match (cfg.families.any_noise(), cfg.route) {
                (false, _) => 0,
                (true, NoiseRoute::Joint) => 1,
                (true, NoiseRoute::PerSite) => {
                    (0..depth).filter(|&s| cfg.families.noise_site(s)).count() as u64
                }
            };
            apply_hyper_update(state, &g, cfg)?;
            report.c2_batch = Some(c2);
            report.hypergrad = Some(g);
        }
        let t2_time = clock.seconds();
        seconds.hyper += t2_time - t1;
        if let (None, Some((x2, y2))) = (report.c2_batch, t2) {
            let mut bn = state.bn_state.clone();
            let clean = vec![0.0; depth];
            let (logits, _) = network::forward(&state.params, x2, &clean, Mode::EvalClean, None, &mut bn)?;
            report.c2_batch = Some(tensor::softmax_xent(&logits, y2)?.0);
        }
        let t3 = clock.seconds();
        seconds.eval += t3 - t2_time;

        match &mut state.opt {
            ElementaryOpt::Sgd => optim::sgd_step_params(&mut state.params, &grad, lr)?,
            ElementaryOpt::Adam(adam) => adam.step_params(&mut state.params, &grad, lr)?,
        }
        seconds.elementary += clock.seconds() - t3;
        state.step = step;
        Ok(report)
    };
    run(state, seconds).map_err(|e| e.at_step(step))
}

/// Mean cross-entropy and classification error of `logits`.
pub fn logit_metrics(logits: &Tensor, labels: &[usize]) -> Result<Metrics> {
    let (xent, _) = tensor::softmax_xent(logits, labels)?;
    let c = logits.cols();
    let wrong = logits
        .data()
        .chunks_exact(c)
        .zip(labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best != y
        })
        .count();
    Ok(Metrics {
        xent,
        error: wrong as f64 / labels.len() as f64,
    })
}

const EVAL_CHUNK: usize = 1000;

/// Clean forward over the whole set with running batch-norm statistics.
pub fn evaluate(params: &ModelParams, bn_state: &BatchNormState, set: &Dataset) -> Result<Metrics> {
    if set.is_empty() {
        return Err(Error::Input("cannot evaluate an empty set".into()));
    }
    let zeros = vec![0.0; params.depth()];
    let mut bn = bn_state.clone();
    let (mut xent, mut wrong) = (0.0, 0.0);
    let rows: Vec<usize> = (0..set.len()).collect();
    for chunk in rows.chunks(EVAL_CHUNK) {
        let (x, y) = set.batch(chunk);
        let (logits, _) = network::forward(params, &x, &zeros, Mode::EvalClean, None, &mut bn)?;
        let m = logit_metrics(&logits, &y)?;
        xent += m.xent * chunk.len() as f64;
        wrong += m.error * chunk.len() as f64;
    }
    let n = set.len() as f64;
    Ok(Metrics {
        xent: xent / n,
        error: wrong / n,
    })
}

pub fn evaluate_split(params: &ModelParams, bn_state: &BatchNormState, split: &DatasetSplit) -> Result<FullEval> {
    Ok(FullEval {
        t1: evaluate(params, bn_state, &split.t1)?,
        t2: evaluate(params, bn_state, &split.t2)?,
        test: evaluate(params, bn_state, &split.test)?,
    })
}

/// Full run in `cfg.mode`, with records every `log_interval` steps and at
/// full evaluations.
pub fn train(cfg: &TrainConfig, split: &DatasetSplit, clock: &dyn Clock) -> Result<TrainOutcome> {
    cfg.validate()?;
    cfg.check_data(split)?;
    let start = clock.seconds();
    let mut state = TrainState::new(cfg, split.t1.dims(), split.t1.classes)?;
    let mut trajectory = Vec::new();
    let mut seconds = PhaseSeconds::default();
    let mut last_eval = None;
    let clean = vec![0.0; state.params.depth()];

    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let lr = optim::anneal(cfg.lr, epoch, cfg.epochs, cfg.anneal_start)?;
        let order = data::batches(
            split.t1.len(),
            cfg.batch_size,
            cfg.seeds.shuffle,
            streams::SHUFFLE_T1,
            epoch as u64,
        )?;
        let last_batch = order.len() - 1;
        for (b, rows) in order.iter().enumerate() {
            let step = state.step + 1;
            let t2_rows = state.next_t2_rows(split.t2.len(), cfg.batch_size)?;
            let due = cfg.mode == TrainMode::T1T2 && optim::due_for_hyper_update(step, cfg.hyper.interval);
            let log = step % cfg.log_interval == 0;
            let (x1, y1) = split.t1.batch(rows);
            let eval_now = b == last_batch
                && ((cfg.eval_interval > 0 && (epoch + 1) % cfg.eval_interval == 0)
                    || epoch + 1 == cfg.epochs);
            let t2 = (due || log || eval_now).then(|| split.t2.batch(&t2_rows));
            let report = t1t2_step(
                &mut state,
                cfg,
                &x1,
                &y1,
                t2.as_ref().map(|(x, y)| (x, y.as_slice())),
                lr,
                clock,
                &mut seconds,
            )?;
            if !(log || eval_now) {
                continue;
            }
            let t0 = clock.seconds();
            let c2_batch = match report.c2_batch {
                Some(c2) => c2,
                None => {
                    let (x2, y2) = split.t2.batch(&t2_rows);
                    let mut bn = state.bn_state.clone();
                    let (logits, _) =
                        network::forward(&state.params, &x2, &clean, Mode::EvalClean, None, &mut bn)?;
                    tensor::softmax_xent(&logits, &y2)?.0
                }
            };
            let full = if eval_now {
                let e = evaluate_split(&state.params, &state.bn_state, split).map_err(|e| e.at_step(step))?;
                last_eval = Some(e);
                Some(e)
            } else {
                None
            };
            seconds.eval += clock.seconds() - t0;
            trajectory.push(TrajectoryRecord {
                step,
                epoch,
                c1_batch: report.c1_batch,
                c2_batch,
                hypers: state.hypers.clone(),
                hypergrad: report.hypergrad,
                full,
                seconds,
            });
        }
    }
    let final_eval = last_eval.expect("final epoch always evaluates");
    let summary = Summary {
        initial_hypers: cfg.initial_hypers.clone(),
        final_hypers: state.hypers.clone(),
        final_eval,
        steps: state.step,
        hyper_update_count: state.hyper_updates,
        pass_counters: state.counters,
        seconds,
        wallclock_s: clock.seconds() - start,
    };
    Ok(TrainOutcome {
        state,
        trajectory,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_clusters;

    fn tiny_split(seed: u64) -> DatasetSplit {
        let pool = synth_clusters(3, 260, 8, 1.2, seed).unwrap();
        let (pool, test) = pool.carve(60, seed, streams::HARNESS).unwrap();
        data::split(&pool, test, 100, seed).unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        let mut c = TrainConfig::new(vec![16, 16]);
        c.epochs = 4;
        c.batch_size = 20;
        c.log_interval = 5;
        c.hyper.interval = 3;
        c.lr = 1e-2;
        c.initial_hypers = HyperParams::per_layer(vec![0.1, 0.05, 0.0], vec![1e-3, 0.0, 0.0]);
        c
    }

    #[test]
    fn disabled_tuner_matches_fixed_run() {
        let split = tiny_split(2);
        let mut a = tiny_cfg();
        a.hyper.noise_lr = 0.0;
        a.hyper.l2_lr = 0.0;
        let mut b = a.clone();
        b.mode = TrainMode::Fixed;
        let ra = train(&a, &split, &NullClock).unwrap();
        let rb = train(&b, &split, &NullClock).unwrap();
        assert_eq!(ra.state.params, rb.state.params);
        assert_eq!(ra.summary.final_eval, rb.summary.final_eval);
        assert_eq!(ra.trajectory.len(), rb.trajectory.len());
        for (x, y) in ra.trajectory.iter().zip(&rb.trajectory) {
            assert_eq!((x.step, x.c1_batch, x.c2_batch, &x.hypers, x.full), (y.step, y.c1_batch, y.c2_batch, &y.hypers, y.full));
        }
        assert!(ra.summary.hyper_update_count > 0);
        assert_eq!(rb.summary.hyper_update_count, 0);
    }

    #[test]
    fn hypers_frozen_between_updates() {
        let split = tiny_split(3);
        let mut cfg = tiny_cfg();
        cfg.hyper.interval = 10;
        let mut state = TrainState::new(&cfg, split.t1.dims(), 3).unwrap();
        let initial = state.hypers.clone();
        let mut secs = PhaseSeconds::default();
        let rows: Vec<usize> = (0..20).collect();
        let (x, y) = split.t1.batch(&rows);
        let (x2, y2) = split.t2.batch(&rows);
        for s in 1..=10u64 {
            let t2 = (s == 10).then_some((&x2, y2.as_slice()));
            let r = t1t2_step(&mut state, &cfg, &x, &y, t2, 1e-2, &NullClock, &mut secs).unwrap();
            if s < 10 {
                assert_eq!(state.hypers, initial, "step {s}");
                assert!(r.hypergrad.is_none());
            } else {
                assert!(r.hypergrad.is_some());
            }
        }
        assert_eq!(state.hyper_updates, 1);
    }

    #[test]
    fn missing_t2_batch_is_a_contract_error() {
        let split = tiny_split(3);
        let mut cfg = tiny_cfg();
        cfg.hyper.interval = 1;
        let mut state = TrainState::new(&cfg, split.t1.dims(), 3).unwrap();
        let rows: Vec<usize> = (0..20).collect();
        let (x, y) = split.t1.batch(&rows);
        let err = t1t2_step(&mut state, &cfg, &x, &y, None, 1e-2, &NullClock, &mut PhaseSeconds::default())
            .unwrap_err();
        assert!(matches!(err, Error::AtStep { step: 1, .. }), "{err}");
    }

    #[test]
    fn runs_are_deterministic_and_feasible() {
        let split = tiny_split(4);
        let mut cfg = tiny_cfg();
        cfg.hyper.noise_lr = 5.0;
        cfg.hyper.l2_lr = 1.0;
        let a = train(&cfg, &split, &NullClock).unwrap();
        let b = train(&cfg, &split, &NullClock).unwrap();
        assert_eq!(a.summary, b.summary);
        assert_eq!(a.trajectory, b.trajectory);
        for r in &a.trajectory {
            assert!(r.hypers.noise_std.iter().chain(&r.hypers.l2).all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn pass_accounting() {
        let split = tiny_split(5);
        let mut cfg = tiny_cfg();
        cfg.hyper.interval = 10;
        cfg.epochs = 5;
        let steps = (split.t1.len() / cfg.batch_size * cfg.epochs) as u64;
        let r = train(&cfg, &split, &NullClock).unwrap();
        assert_eq!(r.summary.steps, steps);
        assert_eq!(r.summary.hyper_update_count, steps / 10);
        let c = r.summary.pass_counters;
        assert_eq!(c.forward, steps + steps / 10);
        assert_eq!(c.backward, c.forward);
        assert_eq!(c.tangent, steps / 10);

        cfg.families = Families {
            input_noise: false,
            hidden_noise: false,
            l2: true,
        };
        let r = train(&cfg, &split, &NullClock).unwrap();
        assert_eq!(r.summary.pass_counters.tangent, 0);
        assert_eq!(r.summary.pass_counters.forward, steps + steps / 10);
    }

    #[test]
    fn metric_examples() {
        let mut logits = Tensor::zeros(&[4, 10]);
        let labels = [3usize, 0, 9, 5];
        for (r, &y) in labels.iter().enumerate() {
            logits.row_mut(r)[y] = 20.0;
        }
        let m = logit_metrics(&logits, &labels).unwrap();
        assert_eq!(m.error, 0.0);
        assert!(m.xent < 1e-4);
        let uniform = logit_metrics(&Tensor::zeros(&[4, 10]), &labels).unwrap();
        assert!((uniform.xent - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn random_net_on_random_labels_is_at_chance() {
        let mut rng = RngStream::new(8, streams::HARNESS);
        let x = rng.gaussian(&[1000, 20]);
        let labels: Vec<usize> = (0..1000).map(|_| rng.below(10)).collect();
        let set = Dataset::new(x, labels, 10).unwrap();
        let params = network::init_params(&[20, 32, 10], InitScheme::He, false, &mut rng).unwrap();
        let m = evaluate(&params, &BatchNormState::new(&params), &set).unwrap();
        assert!((m.error - 0.9).abs() <= 0.03, "{}", m.error);
    }
}
