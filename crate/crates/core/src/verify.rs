//! Oracles and statistics: finite-difference gradient checks,
//! gradient-norm ratio statistics, unbiasedness z-tests, retention
//! frequency histograms, and loss-vs-window training sweeps.

use rand::Rng as _;
use thiserror::Error;

use crate::nets::SegmentModel;
use crate::opt::{LrSchedule, Optimizer};
use crate::params::{GradReport, ParamSet};
use crate::rng::{seed_rng, split};
use crate::sched::{
    run_bptt, run_unbiased_incremental_tbptt, Reservoir, SchedError,
};
use crate::tape::Tape;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("{count} trainable scalars exceed the finite-difference cap of {cap}")]
    TooManyParams { count: usize, cap: usize },
    #[error("epsilon {0} outside [1e-7, 1e-4]")]
    BadEpsilon(f64),
    #[error(transparent)]
    Sched(#[from] SchedError),
}

pub type VerifyResult<T> = Result<T, VerifyError>;

const FD_PARAM_CAP: usize = 5_000;

/// Central finite differences over every trainable scalar.
///
/// Independent of the tape: `loss_fn` only ever sees parameter values.
pub fn finite_difference_oracle<F>(
    loss_fn: F,
    params: &ParamSet,
    epsilon: f64,
) -> VerifyResult<GradReport>
where
    F: Fn(&ParamSet) -> f64,
{
    if !(1e-7..=1e-4).contains(&epsilon) {
        return Err(VerifyError::BadEpsilon(epsilon));
    }
    let count = params.trainable_scalar_count();
    if count > FD_PARAM_CAP {
        return Err(VerifyError::TooManyParams {
            count,
            cap: FD_PARAM_CAP,
        });
    }
    let mut work = params.clone();
    let mut report = GradReport::zeros_like(params);
    let names: Vec<String> = params.trainable_names().cloned().collect();
    for name in names {
        let len = params.get(&name).values.len();
        for i in 0..len {
            let orig = work.get(&name).values[i];
            work.get_mut(&name).values[i] = orig + epsilon;
            let plus = loss_fn(&work);
            work.get_mut(&name).values[i] = orig - epsilon;
            let minus = loss_fn(&work);
            work.get_mut(&name).values[i] = orig;
            report.entry_mut(&name)[i] = (plus - minus) / (2.0 * epsilon);
        }
    }
    Ok(report)
}

/// Total loss of the full segment chain, memories fed forward by value.
pub fn chain_total_loss<M: SegmentModel>(
    model: &M,
    segments: &[M::Input],
    params: &ParamSet,
) -> f64 {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut prepared = Vec::new();
    let mut total = 0.0;
    for input in segments {
        let out = model
            .forward(&mut tape, &bound, input, &prepared)
            .expect("chain forward");
        total += tape.values(out.loss)[0];
        let leaf = tape.detach(out.memory);
        prepared.push(
            model
                .prepare_memory(&mut tape, &bound, leaf)
                .expect("prepare memory"),
        );
    }
    total
}

/// The truncated objective made explicit: memories inside each step's
/// window are recomputed from `params`, memories outside it are frozen
/// constants taken from `frozen`. Differentiating this numerically
/// yields exactly the windowed gradient plus the direct paths.
pub fn truncated_chain_loss<M: SegmentModel>(
    model: &M,
    segments: &[M::Input],
    window: usize,
    params: &ParamSet,
    frozen: &ParamSet,
) -> f64 {
    let live_mems = chain_memories(model, segments, params);
    let frozen_mems = chain_memories(model, segments, frozen);
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut total = 0.0;
    for (idx, input) in segments.iter().enumerate() {
        let prepared: Vec<_> = (0..idx)
            .map(|s| {
                let src = if s + window >= idx {
                    &live_mems[s]
                } else {
                    &frozen_mems[s]
                };
                let leaf = tape.leaf(src.0.clone(), src.1.clone(), true);
                model
                    .prepare_memory(&mut tape, &bound, leaf)
                    .expect("prepare memory")
            })
            .collect();
        let out = model
            .forward(&mut tape, &bound, input, &prepared)
            .expect("chain forward");
        total += tape.values(out.loss)[0];
    }
    total
}

fn chain_memories<M: SegmentModel>(
    model: &M,
    segments: &[M::Input],
    params: &ParamSet,
) -> Vec<(Vec<f64>, Vec<usize>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    segments
        .iter()
        .map(|input| {
            let out = model
                .forward(&mut tape, &bound, input, &[])
                .expect("memory forward");
            (
                tape.values(out.memory).to_vec(),
                tape.shape(out.memory).to_vec(),
            )
        })
        .collect()
}

// ── gradient ratio statistics ───────────────────────────────────────

/// Mean and variance of `r = ||grad_stochastic|| / ||grad_oracle||`
/// over trials of mini-batched gradient computations.
#[derive(Debug, Clone, Copy)]
pub struct RatioStats {
    pub window: usize,
    pub with_factor: bool,
    pub mean_r: f64,
    pub var_r: f64,
    pub n_trials: usize,
    pub rejected_trials: usize,
}

pub fn grad_ratio_stats<M: SegmentModel>(
    model: &M,
    params: &ParamSet,
    documents: &[Vec<M::Input>],
    window: usize,
    with_factor: bool,
    n_trials: usize,
    batch: usize,
    seed: u64,
) -> VerifyResult<RatioStats> {
    assert!(n_trials >= 2 && batch >= 1 && !documents.is_empty());
    let mut rng = seed_rng(split(seed, 0xa11));
    let mut ratios = Vec::with_capacity(n_trials);
    let mut rejected = 0;
    while ratios.len() < n_trials {
        let mut oracle = GradReport::zeros_like(params);
        let mut stochastic = GradReport::zeros_like(params);
        for _ in 0..batch {
            let doc = &documents[rng.gen_range(0..documents.len())];
            let run_seed: u64 = rng.gen();
            let exact = run_bptt(model, doc, params)?;
            let est = run_unbiased_incremental_tbptt(
                model, doc, window, params, run_seed, with_factor, None,
            )?;
            oracle.add_scaled(&exact.report, 1.0 / batch as f64);
            stochastic.add_scaled(&est.report, 1.0 / batch as f64);
        }
        let denom = oracle.l2_norm();
        if denom == 0.0 {
            rejected += 1;
            continue;
        }
        ratios.push(stochastic.l2_norm() / denom);
    }
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let var = ratios.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>()
        / (ratios.len() - 1) as f64;
    Ok(RatioStats {
        window,
        with_factor,
        mean_r: mean,
        var_r: var,
        n_trials,
        rejected_trials: rejected,
    })
}

// ── unbiasedness z-test ─────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct UnbiasednessReport {
    pub window: usize,
    pub with_factor: bool,
    pub n_seeds: usize,
    pub n_components: usize,
    /// Fraction of components with |z| > 3.
    pub frac_bad_z: f64,
    /// ||mean - oracle||_2 / ||oracle||_2.
    pub relative_l2: f64,
    pub pass: bool,
}

/// Compare the sample mean of the stochastic gradient over `n_seeds`
/// independent reservoir draws against the exact gradient, component by
/// component, via `z = (mean - oracle) / se(mean)`.
pub fn unbiasedness_test<M: SegmentModel>(
    model: &M,
    params: &ParamSet,
    segments: &[M::Input],
    window: usize,
    n_seeds: usize,
    with_factor: bool,
    seed: u64,
) -> VerifyResult<UnbiasednessReport> {
    assert!(n_seeds >= 2);
    let oracle = run_bptt(model, segments, params)?.report.flatten();
    let dim = oracle.len();
    let mut sum = vec![0.0; dim];
    let mut sum_sq = vec![0.0; dim];
    for i in 0..n_seeds {
        let out = run_unbiased_incremental_tbptt(
            model,
            segments,
            window,
            params,
            split(seed, i as u64),
            with_factor,
            None,
        )?;
        for (k, g) in out.report.flatten().into_iter().enumerate() {
            sum[k] += g;
            sum_sq[k] += g * g;
        }
    }
    let n = n_seeds as f64;
    let mut bad = 0usize;
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..dim {
        let mean = sum[k] / n;
        let var = (sum_sq[k] - n * mean * mean).max(0.0) / (n - 1.0);
        let se = (var / n).sqrt();
        let diff = mean - oracle[k];
        num += diff * diff;
        den += oracle[k] * oracle[k];
        // deterministic components agree up to accumulation-order
        // rounding; anything beyond that with zero spread is a failure
        let z = if diff.abs() <= 1e-9 * (1.0 + oracle[k].abs()) {
            0.0
        } else if se > 0.0 {
            diff / se
        } else {
            f64::INFINITY
        };
        if z.abs() > 3.0 {
            bad += 1;
        }
    }
    let frac_bad_z = bad as f64 / dim as f64;
    let relative_l2 = num.sqrt() / den.sqrt();
    Ok(UnbiasednessReport {
        window,
        with_factor,
        n_seeds,
        n_components: dim,
        frac_bad_z,
        relative_l2,
        pass: frac_bad_z <= 0.01 && relative_l2 < 0.05,
    })
}

// ── retention histogram ─────────────────────────────────────────────

/// `counts[t-1][s-1]` = trials in which prior step `s` was retained in
/// step `t`'s window (recorded just before step `t` is offered).
#[derive(Debug, Clone)]
pub struct RetentionHistogram {
    pub window: usize,
    pub t_max: usize,
    pub trials: usize,
    counts: Vec<Vec<u64>>,
}

impl RetentionHistogram {
    pub fn empirical(&self, t: usize, s: usize) -> f64 {
        assert!(s >= 1 && s < t && t <= self.t_max);
        self.counts[t - 1][s - 1] as f64 / self.trials as f64
    }

    /// `min(1, S/(t-1))`.
    pub fn expected(&self, t: usize, s: usize) -> f64 {
        assert!(s >= 1 && s < t);
        (self.window as f64 / (t - 1) as f64).min(1.0)
    }

    pub fn max_abs_deviation(&self) -> f64 {
        let mut max = 0.0_f64;
        for t in 2..=self.t_max {
            for s in 1..t {
                max = max.max((self.empirical(t, s) - self.expected(t, s)).abs());
            }
        }
        max
    }
}

pub fn retention_histogram(
    window: usize,
    t_max: usize,
    trials: usize,
    seed: u64,
) -> RetentionHistogram {
    let mut counts = vec![vec![0u64; t_max]; t_max];
    for trial in 0..trials {
        let mut rng = seed_rng(split(seed, trial as u64));
        let mut reservoir = Reservoir::new(window);
        for t in 1..=t_max {
            for &s in reservoir.retained() {
                counts[t - 1][s - 1] += 1;
            }
            reservoir.step(t, &mut rng);
        }
    }
    RetentionHistogram {
        window,
        t_max,
        trials,
        counts,
    }
}

// ── loss vs window ──────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct LossCurve {
    pub window: usize,
    pub per_step: Vec<f64>,
    pub smoothed: Vec<f64>,
}

impl LossCurve {
    pub fn final_smoothed(&self) -> f64 {
        *self.smoothed.last().expect("non-empty curve")
    }
}

/// Train one model per window size with identical init, data order, and
/// per-step reservoir seeds; record sliding-window smoothed losses.
pub fn loss_vs_window<M: SegmentModel>(
    model: &M,
    documents: &[Vec<M::Input>],
    windows: &[usize],
    steps: usize,
    learning_rate: f64,
    smooth_width: usize,
    seed: u64,
) -> VerifyResult<Vec<LossCurve>> {
    let mut curves = Vec::with_capacity(windows.len());
    for &window in windows {
        let mut params = model.init_params(split(seed, 0x1417));
        let mut opt = Optimizer::adam(learning_rate, LrSchedule::Constant);
        let mut per_step = Vec::with_capacity(steps);
        for step in 0..steps {
            let doc = &documents[step % documents.len()];
            let out = run_unbiased_incremental_tbptt(
                model,
                doc,
                window,
                &params,
                split(seed, step as u64),
                true,
                None,
            )?;
            per_step.push(out.losses.iter().sum::<f64>() / out.losses.len() as f64);
            opt.step(&mut params, &out.report);
        }
        let smoothed = (0..per_step.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(smooth_width);
                per_step[lo..=i].iter().sum::<f64>() / (i - lo + 1) as f64
            })
            .collect();
        curves.push(LossCurve {
            window,
            per_step,
            smoothed,
        });
    }
    Ok(curves)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::ToyRnn;
    use crate::sched::{run_incremental_tbptt, run_tbptt};

    #[test]
    fn fd_matches_tape_on_full_chain() {
        let model = ToyRnn::default();
        let params = model.init_params(3);
        let segments = model.random_segments(4, 4);
        let exact = run_bptt(&model, &segments, &params).unwrap().report;
        let fd = finite_difference_oracle(
            |p| chain_total_loss(&model, &segments, p),
            &params,
            1e-5,
        )
        .unwrap();
        assert!(fd.relative_l2_distance(&exact) < 1e-5);
    }

    #[test]
    fn fd_matches_truncated_objective() {
        let model = ToyRnn::default();
        let params = model.init_params(13);
        let segments = model.random_segments(6, 14);
        let window = 2;
        let exact = run_incremental_tbptt(&model, &segments, window, &params)
            .unwrap()
            .report;
        let frozen = params.clone();
        let fd = finite_difference_oracle(
            |p| truncated_chain_loss(&model, &segments, window, p, &frozen),
            &params,
            1e-5,
        )
        .unwrap();
        assert!(fd.relative_l2_distance(&exact) < 1e-5);
        // and the truncated gradient genuinely differs from the full one
        let full = run_bptt(&model, &segments, &params).unwrap().report;
        assert!(full.relative_l2_distance(&exact) > 1e-4);
    }

    #[test]
    fn fd_rejects_bad_epsilon() {
        let model = ToyRnn::default();
        let params = model.init_params(1);
        let err = finite_difference_oracle(|_| 0.0, &params, 1e-3);
        assert!(matches!(err, Err(VerifyError::BadEpsilon(_))));
    }

    #[test]
    fn retention_matches_marginal_law() {
        let hist = retention_histogram(2, 8, 20_000, 5);
        assert!(hist.max_abs_deviation() < 0.02);
        assert!((hist.expected(7, 3) - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn unbiased_estimator_passes_z_test_small() {
        let model = ToyRnn::default();
        let params = model.init_params(23);
        let segments = model.random_segments(6, 24);
        let report =
            unbiasedness_test(&model, &params, &segments, 2, 400, true, 77).unwrap();
        assert!(report.pass, "frac_bad_z={} rel_l2={}", report.frac_bad_z, report.relative_l2);
    }

    #[test]
    fn truncated_window_shrinks_mean_ratio_without_factor() {
        let model = ToyRnn::default();
        let params = model.init_params(33);
        let docs: Vec<_> = (0..4).map(|i| model.random_segments(8, 100 + i)).collect();
        let narrow =
            grad_ratio_stats(&model, &params, &docs, 1, false, 20, 4, 9).unwrap();
        let wide =
            grad_ratio_stats(&model, &params, &docs, 7, false, 20, 4, 9).unwrap();
        assert!(narrow.mean_r < wide.mean_r);
        assert!((wide.mean_r - 1.0).abs() < 0.05);
    }

    #[test]
    fn loss_curves_have_requested_shape() {
        let model = ToyRnn::default();
        let docs: Vec<_> = (0..2).map(|i| model.random_segments(4, 200 + i)).collect();
        let curves = loss_vs_window(&model, &docs, &[1, 2], 6, 0.01, 3, 8).unwrap();
        assert_eq!(curves.len(), 2);
        assert!(curves.iter().all(|c| c.per_step.len() == 6));
        assert!(curves.iter().all(|c| c.smoothed.len() == 6));
        let c = &curves[0];
        let tail: f64 = c.per_step[3..6].iter().sum::<f64>() / 3.0;
        assert!((c.final_smoothed() - tail).abs() < 1e-12);
    }

    #[test]
    fn vanilla_tbptt_agrees_with_fd_too() {
        let model = ToyRnn::default();
        let params = model.init_params(43);
        let segments = model.random_segments(5, 44);
        let vanilla = run_tbptt(&model, &segments, 2, &params).unwrap().report;
        let frozen = params.clone();
        let fd = finite_difference_oracle(
            |p| truncated_chain_loss(&model, &segments, 2, p, &frozen),
            &params,
            1e-5,
        )
        .unwrap();
        assert!(fd.relative_l2_distance(&vanilla) < 1e-5);
    }
}
