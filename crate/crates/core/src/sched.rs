//! Training schedulers over segment-recurrent models.
//!
//! Four gradient routes over the same per-segment forward:
//!
//! * `run_bptt` — every loss is backpropagated, then each encoder graph
//!   is seeded once with its fully accumulated memory gradient. The
//!   exact reference under structural memory independence.
//! * `run_tbptt` — vanilla truncation: at each step the losses within a
//!   sliding window of size `S` seed the window's encoder graphs
//!   directly, costing O(T*S) encoder backward passes and retaining all
//!   T encoder graphs.
//! * `run_incremental_tbptt` — the same truncated sum reordered so each
//!   encoder graph is backpropagated exactly once when it leaves the
//!   window: O(T) cost, at most S+1 graphs alive.
//! * `run_unbiased_incremental_tbptt` — incremental with
//!   reservoir-sampled retention and the compensation factor
//!   `max(1, (t-1)/S)`, an unbiased stochastic estimator of the full
//!   gradient.

use thiserror::Error;

use crate::nets::SegmentModel;
use crate::params::{GradReport, ParamSet};
use crate::rng::{seed_rng, split, Rng};
use crate::tape::{Tape, TapeError, TapeStats, TensorId};

use rand::Rng as _;

#[derive(Debug, Error)]
pub enum SchedError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("slot for step {0} flushed twice")]
    DoubleFlush(usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{active} retained graphs exceed max_retained_graphs={cap} after step {step}")]
    GraphCap { active: usize, cap: usize, step: usize },
}

pub type SchedResult<T> = Result<T, SchedError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Bptt,
    Tbptt,
    Incremental,
    Unbiased,
}

impl Mode {
    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "bptt" => Some(Mode::Bptt),
            "tbptt" => Some(Mode::Tbptt),
            "incremental" => Some(Mode::Incremental),
            "unbiased" => Some(Mode::Unbiased),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Bptt => "bptt",
            Mode::Tbptt => "tbptt",
            Mode::Incremental => "incremental",
            Mode::Unbiased => "unbiased",
        }
    }
}

/// Scheduler-level configuration for one training run.
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub mode: Mode,
    pub window: usize,
    pub segments: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub max_retained_graphs: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> SchedResult<()> {
        if self.window < 1 {
            return Err(SchedError::Config("window S must be >= 1".into()));
        }
        if self.segments < 1 {
            return Err(SchedError::Config("segment count T must be >= 1".into()));
        }
        if let Some(cap) = self.max_retained_graphs {
            if cap < self.window {
                return Err(SchedError::Config(format!(
                    "max_retained_graphs={cap} is below window S={}",
                    self.window
                )));
            }
        }
        Ok(())
    }
}

/// Gradient snapshot plus per-run accounting.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: GradReport,
    /// Per-segment loss values in step order.
    pub losses: Vec<f64>,
    pub stats: TapeStats,
    /// Peak number of simultaneously alive encoder graphs.
    pub max_active_graphs: usize,
}

/// `max(1, (t-1)/S)` for 1-based step index `t`.
pub fn compensation_factor(t: usize, window: usize) -> f64 {
    debug_assert!(t >= 1 && window >= 1);
    ((t - 1) as f64 / window as f64).max(1.0)
}

/// Streaming uniform retention over step indices, capacity `S`.
#[derive(Debug, Clone)]
pub struct Reservoir {
    capacity: usize,
    retained: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReservoirDecision {
    KeepAll,
    /// The listed prior step leaves the window; the new step enters.
    Evict(usize),
    /// The new step itself is not retained.
    RejectNew,
}

impl Reservoir {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1);
        Reservoir {
            capacity,
            retained: Vec::with_capacity(capacity),
        }
    }

    pub fn retained(&self) -> &[usize] {
        &self.retained
    }

    /// Offer the 1-based step `t`. Marginally, each prior step stays
    /// retained with probability `min(1, S/(t-1))` as seen by step t+1.
    pub fn step(&mut self, t: usize, rng: &mut Rng) -> ReservoirDecision {
        if self.retained.len() < self.capacity {
            self.retained.push(t);
            return ReservoirDecision::KeepAll;
        }
        let j = rng.gen_range(0..t);
        if j < self.capacity {
            let evicted = std::mem::replace(&mut self.retained[j], t);
            ReservoirDecision::Evict(evicted)
        } else {
            ReservoirDecision::RejectNew
        }
    }
}

struct Slot {
    live: TensorId,
    leaf: TensorId,
    flushed: bool,
}

struct Run<'a, M: SegmentModel> {
    model: &'a M,
    params: &'a ParamSet,
    tape: Tape,
    bound: crate::params::BoundParams,
    slots: Vec<Slot>,
    leaves: Vec<TensorId>,
    /// Pinned decoder-side views of each leaf, shared by later steps.
    prepared: Vec<Vec<TensorId>>,
    losses: Vec<f64>,
    max_active: usize,
}

impl<'a, M: SegmentModel> Run<'a, M> {
    fn new(model: &'a M, params: &'a ParamSet) -> Self {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        Run {
            model,
            params,
            tape,
            bound,
            slots: Vec::new(),
            leaves: Vec::new(),
            prepared: Vec::new(),
            losses: Vec::new(),
            max_active: 0,
        }
    }

    fn active_graphs(&self) -> usize {
        self.slots.iter().filter(|s| !s.flushed).count()
    }

    fn note_active(&mut self) {
        self.max_active = self.max_active.max(self.active_graphs());
    }

    /// Forward one segment against all prior memory leaves and run the
    /// phase-one backward (direct parameter paths plus leaf gradients).
    fn step(&mut self, input: &M::Input) -> SchedResult<()> {
        let out = self
            .model
            .forward(&mut self.tape, &self.bound, input, &self.prepared)?;
        self.losses.push(self.tape.values(out.loss)[0]);
        self.tape.backward(out.loss, None, false)?;
        let leaf = self.tape.detach(out.memory);
        let prep = self.model.prepare_memory(&mut self.tape, &self.bound, leaf)?;
        for &id in &prep {
            self.tape.pin_graph(id);
        }
        self.slots.push(Slot {
            live: out.memory,
            leaf,
            flushed: false,
        });
        self.leaves.push(leaf);
        self.prepared.push(prep);
        self.note_active();
        Ok(())
    }

    /// Phase-two backward for slot `idx`: inject the leaf's accumulated
    /// gradient into the live memory and destroy the encoder graph.
    fn flush(&mut self, idx: usize) -> SchedResult<()> {
        let slot = &mut self.slots[idx];
        if slot.flushed {
            return Err(SchedError::DoubleFlush(idx + 1));
        }
        slot.flushed = true;
        let (live, leaf) = (slot.live, slot.leaf);
        match self.tape.take_grad(leaf) {
            Some(grad) => self.tape.backward(live, Some(&grad), false)?,
            None => self.tape.free_graph(live),
        }
        Ok(())
    }

    fn finish(mut self) -> RunOutput {
        for prep in std::mem::take(&mut self.prepared) {
            for id in prep {
                self.tape.free_graph(id);
            }
        }
        // Leftover leaf gradients (window-truncated or flushed-slot
        // deposits) are not part of the report.
        for leaf in &self.leaves {
            self.tape.clear_grad(*leaf);
        }
        let report = GradReport::collect(&self.tape, self.params, &self.bound);
        debug_assert!(crate::params::frozen_grads_zero(
            &self.tape,
            self.params,
            &self.bound
        ));
        RunOutput {
            report,
            losses: self.losses,
            stats: self.tape.stats(),
            max_active_graphs: self.max_active,
        }
    }
}

/// Exact reference gradient: accumulate every loss, then seed each
/// encoder graph once with its total memory gradient.
pub fn run_bptt<M: SegmentModel>(
    model: &M,
    segments: &[M::Input],
    params: &ParamSet,
) -> SchedResult<RunOutput> {
    let mut run = Run::new(model, params);
    for input in segments {
        run.step(input)?;
    }
    for idx in (0..run.slots.len()).rev() {
        run.flush(idx)?;
    }
    Ok(run.finish())
}

/// Vanilla truncated route: each step seeds the encoder graphs of the
/// window `max(1, t-S)..t-1` with that step's memory gradients.
pub fn run_tbptt<M: SegmentModel>(
    model: &M,
    segments: &[M::Input],
    window: usize,
    params: &ParamSet,
) -> SchedResult<RunOutput> {
    assert!(window >= 1);
    let mut run = Run::new(model, params);
    for (idx, input) in segments.iter().enumerate() {
        // Per-step memory gradients: clear before the loss backward so
        // each leaf grad is exactly dJ_t/dm_s.
        for leaf in &run.leaves {
            run.tape.clear_grad(*leaf);
        }
        run.step(input)?;
        for s in idx.saturating_sub(window)..idx {
            if let Some(grad) = run.tape.grad(run.slots[s].leaf).map(|g| g.to_vec()) {
                run.tape.backward(run.slots[s].live, Some(&grad), true)?;
            }
        }
    }
    for idx in (0..run.slots.len()).rev() {
        let slot = &mut run.slots[idx];
        slot.flushed = true;
        run.tape.free_graph(slot.live);
    }
    Ok(run.finish())
}

/// Reordered truncation: identical gradients to `run_tbptt`, but each
/// encoder graph is backpropagated exactly once when it exits the window.
pub fn run_incremental_tbptt<M: SegmentModel>(
    model: &M,
    segments: &[M::Input],
    window: usize,
    params: &ParamSet,
) -> SchedResult<RunOutput> {
    assert!(window >= 1);
    let mut run = Run::new(model, params);
    for (idx, input) in segments.iter().enumerate() {
        run.step(input)?;
        if idx >= window {
            run.flush(idx - window)?;
        }
    }
    for idx in (0..run.slots.len()).rev() {
        if !run.slots[idx].flushed {
            run.flush(idx)?;
        }
    }
    Ok(run.finish())
}

/// Unbiased stochastic route: reservoir-sampled retention plus the
/// compensation factor. With `with_factor == false` the factor is
/// forced to 1 (the biased ablation).
pub fn run_unbiased_incremental_tbptt<M: SegmentModel>(
    model: &M,
    segments: &[M::Input],
    window: usize,
    params: &ParamSet,
    seed: u64,
    with_factor: bool,
    max_retained_graphs: Option<usize>,
) -> SchedResult<RunOutput> {
    assert!(window >= 1);
    if let Some(cap) = max_retained_graphs {
        if cap < window {
            return Err(SchedError::Config(format!(
                "max_retained_graphs={cap} is below window S={window}"
            )));
        }
    }
    let mut rng = seed_rng(split(seed, 0x7e5e));
    let mut reservoir = Reservoir::new(window);
    let mut run = Run::new(model, params);
    for (idx, input) in segments.iter().enumerate() {
        let t = idx + 1;
        // Save and clear each active leaf's gradient so the compensation
        // factor scales only the fresh dJ_t/dm contribution.
        let saved: Vec<(usize, Option<Vec<f64>>)> = run
            .slots
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.flushed)
            .map(|(i, s)| (i, s.leaf))
            .collect::<Vec<_>>()
            .into_iter()
            .map(|(i, leaf)| (i, run.tape.take_grad(leaf)))
            .collect();
        run.step(input)?;
        let factor = if with_factor {
            compensation_factor(t, window)
        } else {
            1.0
        };
        for (i, old) in &saved {
            run.tape
                .grad_scale_add(run.slots[*i].leaf, factor, old.as_deref())?;
        }
        match reservoir.step(t, &mut rng) {
            ReservoirDecision::KeepAll => {}
            ReservoirDecision::Evict(s) => run.flush(s - 1)?,
            ReservoirDecision::RejectNew => run.flush(idx)?,
        }
        if let Some(cap) = max_retained_graphs {
            let active = run.active_graphs();
            if active > cap {
                return Err(SchedError::GraphCap {
                    active,
                    cap,
                    step: t,
                });
            }
        }
    }
    let mut remaining: Vec<usize> = reservoir.retained().to_vec();
    remaining.sort_unstable_by(|a, b| b.cmp(a));
    for t in remaining {
        run.flush(t - 1)?;
    }
    Ok(run.finish())
}

/// One benchmark measurement: a fixed (mode, window) pair timed over
/// repeated full passes of the same segment chain.
#[derive(Debug, Clone, Copy)]
pub struct BenchRow {
    pub mode: Mode,
    pub window: usize,
    pub mean_step_ms: f64,
    pub peak_live_nodes: usize,
    pub backward_passes: usize,
}

/// Time `iterations` full runs after `warmup` discarded ones, on a
/// monotonic clock. All runs share data, params, and seed.
pub fn bench_mode<M: SegmentModel>(
    model: &M,
    segments: &[M::Input],
    mode: Mode,
    window: usize,
    params: &ParamSet,
    seed: u64,
    iterations: usize,
    warmup: usize,
) -> SchedResult<BenchRow> {
    assert!(iterations >= 1);
    let mut peak = 0;
    let mut backward = 0;
    let mut elapsed = std::time::Duration::ZERO;
    for i in 0..warmup + iterations {
        let start = std::time::Instant::now();
        let out = run_mode(mode, model, segments, window, params, seed, None)?;
        let took = start.elapsed();
        if i >= warmup {
            elapsed += took;
            peak = peak.max(out.stats.peak_live_node_count);
            backward = backward.max(out.stats.backward_pass_count);
        }
    }
    Ok(BenchRow {
        mode,
        window,
        mean_step_ms: elapsed.as_secs_f64() * 1e3 / (iterations * segments.len()) as f64,
        peak_live_nodes: peak,
        backward_passes: backward,
    })
}

/// Dispatch over [`Mode`].
pub fn run_mode<M: SegmentModel>(
    mode: Mode,
    model: &M,
    segments: &[M::Input],
    window: usize,
    params: &ParamSet,
    seed: u64,
    max_retained_graphs: Option<usize>,
) -> SchedResult<RunOutput> {
    match mode {
        Mode::Bptt => run_bptt(model, segments, params),
        Mode::Tbptt => run_tbptt(model, segments, window, params),
        Mode::Incremental => run_incremental_tbptt(model, segments, window, params),
        Mode::Unbiased => run_unbiased_incremental_tbptt(
            model,
            segments,
            window,
            params,
            seed,
            true,
            max_retained_graphs,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ToyRnn;

    #[test]
    fn compensation_factor_values() {
        assert_eq!(compensation_factor(5, 2), 2.0);
        assert_eq!(compensation_factor(2, 4), 1.0);
        assert_eq!(compensation_factor(1, 3), 1.0);
        assert_eq!(compensation_factor(9, 2), 4.0);
    }

    #[test]
    fn reservoir_fill_phase_keeps_everything() {
        let mut rng = seed_rng(1);
        let mut res = Reservoir::new(3);
        for t in 1..=3 {
            assert_eq!(res.step(t, &mut rng), ReservoirDecision::KeepAll);
        }
        assert_eq!(res.retained(), &[1, 2, 3]);
    }

    #[test]
    fn reservoir_decision_frequencies_at_t5() {
        // S=3, t=5: P(reject) = 2/5, P(evict) = 3/5.
        let trials = 100_000;
        let mut rejects = 0;
        for seed in 0..trials {
            let mut rng = seed_rng(split(99, seed));
            let mut res = Reservoir::new(3);
            for t in 1..=4 {
                res.step(t, &mut rng);
            }
            if res.step(5, &mut rng) == ReservoirDecision::RejectNew {
                rejects += 1;
            }
        }
        let p = rejects as f64 / trials as f64;
        assert!((p - 0.4).abs() < 0.01, "P(reject_new) = {p}");
    }

    #[test]
    fn single_segment_has_no_memory_terms() {
        let model = ToyRnn::default();
        let params = model.init_params(11);
        let segments = model.random_segments(1, 12);
        let out = run_bptt(&model, &segments, &params).unwrap();
        assert_eq!(out.losses.len(), 1);
        assert_eq!(out.stats.live_node_count, 0);
    }

    #[test]
    fn incremental_matches_vanilla_tbptt() {
        let model = ToyRnn::default();
        let params = model.init_params(21);
        let segments = model.random_segments(8, 22);
        for window in [1, 2, 3, 5] {
            let vanilla = run_tbptt(&model, &segments, window, &params).unwrap();
            let incremental = run_incremental_tbptt(&model, &segments, window, &params).unwrap();
            let delta = vanilla.report.max_abs_diff(&incremental.report);
            assert!(delta < 1e-10, "window {window}: max delta {delta}");
            assert_eq!(vanilla.losses, incremental.losses);
        }
    }

    #[test]
    fn untruncated_window_matches_bptt() {
        let model = ToyRnn::default();
        let params = model.init_params(31);
        let segments = model.random_segments(6, 32);
        let bptt = run_bptt(&model, &segments, &params).unwrap();
        let tbptt = run_tbptt(&model, &segments, 5, &params).unwrap();
        let incr = run_incremental_tbptt(&model, &segments, 5, &params).unwrap();
        assert!(bptt.report.max_abs_diff(&tbptt.report) < 1e-12);
        assert!(bptt.report.max_abs_diff(&incr.report) < 1e-12);
    }

    #[test]
    fn degenerate_unbiased_window_is_deterministic() {
        let model = ToyRnn::default();
        let params = model.init_params(41);
        let segments = model.random_segments(6, 42);
        let bptt = run_bptt(&model, &segments, &params).unwrap();
        for seed in [0, 1, 2] {
            let uio =
                run_unbiased_incremental_tbptt(&model, &segments, 8, &params, seed, true, None)
                    .unwrap();
            assert!(bptt.report.max_abs_diff(&uio.report) < 1e-12);
        }
    }

    #[test]
    fn no_graph_leaks_and_bounded_retention() {
        let model = ToyRnn::default();
        let params = model.init_params(51);
        let segments = model.random_segments(10, 52);
        let window = 3;
        let incr = run_incremental_tbptt(&model, &segments, window, &params).unwrap();
        assert_eq!(incr.stats.live_node_count, 0);
        assert!(incr.max_active_graphs <= window + 1);
        let uio =
            run_unbiased_incremental_tbptt(&model, &segments, window, &params, 7, true, Some(4))
                .unwrap();
        assert_eq!(uio.stats.live_node_count, 0);
        assert!(uio.max_active_graphs <= window + 1);
    }

    #[test]
    fn cap_below_window_is_refused() {
        let model = ToyRnn::default();
        let params = model.init_params(61);
        let segments = model.random_segments(4, 62);
        let err = run_unbiased_incremental_tbptt(&model, &segments, 3, &params, 1, true, Some(2));
        assert!(matches!(err, Err(SchedError::Config(_))));
    }

    #[test]
    fn incremental_backward_pass_budget() {
        let model = ToyRnn::default();
        let params = model.init_params(71);
        let segments = model.random_segments(8, 72);
        let out = run_incremental_tbptt(&model, &segments, 3, &params).unwrap();
        // Phase one per step plus at most one phase-two per slot.
        assert!(out.stats.backward_pass_count <= 2 * segments.len());
    }
}
