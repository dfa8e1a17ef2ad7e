//! One function per subcommand. Each returns `Ok(true)` on pass so the
//! caller can translate verify failures into a nonzero exit.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use uio_core::data;
use uio_core::pipeline;
use uio_core::rng::split;
use uio_core::verify;
use uio_core::{
    bench_mode, run_mode, Mode, ParamSet, SegmentModel, ToyRnn, ToyTransformer,
};
use uio_core::opt::{LrSchedule, Optimizer};

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::out::{fmt, write_csv};

fn out_path(cfg: &ExperimentConfig, ext: &str) -> PathBuf {
    PathBuf::from(format!("{}.{ext}", cfg.output_path))
}

fn mode_of(cfg: &ExperimentConfig, default: Mode) -> Result<Mode> {
    match cfg.mode.as_deref() {
        None => Ok(default),
        Some(name) => {
            Mode::parse(name).with_context(|| format!("unknown scheduler mode `{name}`"))
        }
    }
}

fn train_loop<M: SegmentModel>(
    model: &M,
    docs: &[Vec<M::Input>],
    params: &mut ParamSet,
    cfg: &ExperimentConfig,
    mode: Mode,
) -> Result<Vec<f64>> {
    let mut opt = Optimizer::adam(cfg.lr, LrSchedule::Constant);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let doc = &docs[step % docs.len()];
        let out = run_mode(
            mode,
            model,
            doc,
            cfg.window,
            params,
            split(cfg.seed, step as u64),
            None,
        )?;
        opt.step(params, &out.report);
        losses.push(out.losses.iter().sum::<f64>() / out.losses.len() as f64);
    }
    Ok(losses)
}

pub fn train(cfg: &ExperimentConfig) -> Result<bool> {
    let mode = mode_of(cfg, Mode::Unbiased)?;
    let n_docs = 8;
    let mut params;
    let losses = match cfg.model.as_str() {
        "toy-transformer" => {
            let model = ToyTransformer::new(cfg.transformer());
            let docs = data::token_documents(
                n_docs,
                cfg.segments,
                cfg.seg_len,
                cfg.vocab,
                split(cfg.seed, 0xd0c),
            );
            params = model.init_params(cfg.seed);
            train_loop(&model, &docs, &mut params, cfg, mode)?
        }
        "toy-rnn" => {
            let model = ToyRnn::default();
            let docs: Vec<_> = (0..n_docs as u64)
                .map(|d| model.random_segments(cfg.segments, split(cfg.seed, 0xd0c + d)))
                .collect();
            params = model.init_params(cfg.seed);
            train_loop(&model, &docs, &mut params, cfg, mode)?
        }
        other => bail!("unknown model `{other}`"),
    };

    let rows: Vec<Vec<String>> = losses
        .iter()
        .enumerate()
        .map(|(step, loss)| vec![step.to_string(), fmt(*loss)])
        .collect();
    let csv = out_path(cfg, "csv");
    write_csv(&csv, "train", &cfg.hash(), &["step", "loss"], &rows)?;
    let ckpt = out_path(cfg, "ckpt");
    checkpoint::save(&ckpt, &cfg.canonical(), &params)?;
    println!(
        "train: {} steps, mode={}, final loss {:.6} -> {} + {}",
        losses.len(),
        mode.name(),
        losses.last().copied().unwrap_or(f64::NAN),
        csv.display(),
        ckpt.display()
    );
    Ok(true)
}

fn equivalence_trial<M: SegmentModel>(
    model: &M,
    segments: &[M::Input],
    window: usize,
    seed: u64,
) -> Result<f64> {
    let params = model.init_params(seed);
    let incremental = run_mode(Mode::Incremental, model, segments, window, &params, seed, None)?;
    let truncated = run_mode(Mode::Tbptt, model, segments, window, &params, seed, None)?;
    Ok(incremental.report.max_abs_diff(&truncated.report))
}

pub fn verify_equivalence(cfg: &ExperimentConfig) -> Result<bool> {
    const TOLERANCE: f64 = 1e-10;
    let windows = [1usize, 2, 4, 8];
    let rnn = ToyRnn::default();
    let transformer = ToyTransformer::new(cfg.transformer());
    let mut rows = Vec::new();
    let mut worst = 0.0_f64;
    for trial in 0..cfg.n_trials {
        let seed = split(cfg.seed, 0xe9_u64.wrapping_add(trial as u64));
        let t_count = 2 + (seed % 15) as usize; // T in 2..=16
        let window = windows[(seed >> 8) as usize % windows.len()];
        let (name, delta) = if trial % 2 == 0 {
            let segments = rnn.random_segments(t_count, seed);
            ("toy-rnn", equivalence_trial(&rnn, &segments, window, seed)?)
        } else {
            let segments = data::token_samples(t_count, cfg.seg_len, cfg.vocab, seed);
            (
                "toy-transformer",
                equivalence_trial(&transformer, &segments, window, seed)?,
            )
        };
        worst = worst.max(delta);
        rows.push(vec![
            trial.to_string(),
            name.to_string(),
            t_count.to_string(),
            window.to_string(),
            seed.to_string(),
            fmt(delta),
            (delta <= TOLERANCE).to_string(),
        ]);
    }
    let csv = out_path(cfg, "csv");
    write_csv(
        &csv,
        "verify-equivalence",
        &cfg.hash(),
        &["trial", "model", "T", "S", "seed", "max_delta", "pass"],
        &rows,
    )?;
    let pass = worst <= TOLERANCE;
    println!(
        "verify-equivalence: {} trials, worst component delta {worst:.3e} (tolerance {TOLERANCE:.0e}) -> {} [{}]",
        cfg.n_trials,
        csv.display(),
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(pass)
}

pub fn verify_unbiased(cfg: &ExperimentConfig) -> Result<bool> {
    let n_seeds = if cfg.is_set("n_trials") { cfg.n_trials } else { 2000 };
    let model = ToyRnn::default();
    let params = model.init_params(cfg.seed);
    let segments = model.random_segments(cfg.segments, split(cfg.seed, 0x5e9));
    let report = verify::unbiasedness_test(
        &model,
        &params,
        &segments,
        cfg.window,
        n_seeds,
        true,
        cfg.seed,
    )?;
    let json = serde_json::json!({
        "command": "verify-unbiased",
        "config_hash": cfg.hash(),
        "model": "toy-rnn",
        "T": cfg.segments,
        "S": report.window,
        "n_seeds": report.n_seeds,
        "n_components": report.n_components,
        "frac_bad_z": report.frac_bad_z,
        "relative_l2": report.relative_l2,
        "pass": report.pass,
    });
    let path = out_path(cfg, "json");
    std::fs::write(&path, serde_json::to_string_pretty(&json)?)?;
    println!(
        "verify-unbiased: T={} S={} seeds={} frac(|z|>3)={:.4} rel_l2={:.4} -> {} [{}]",
        cfg.segments,
        report.window,
        report.n_seeds,
        report.frac_bad_z,
        report.relative_l2,
        path.display(),
        if report.pass { "PASS" } else { "FAIL" }
    );
    Ok(report.pass)
}

pub fn verify_retention(cfg: &ExperimentConfig) -> Result<bool> {
    const TOLERANCE: f64 = 0.02;
    let trials = if cfg.is_set("n_trials") { cfg.n_trials } else { 100_000 };
    let t_max = if cfg.is_set("T") { cfg.segments } else { 12 };
    let hist = verify::retention_histogram(cfg.window, t_max, trials, cfg.seed);
    let mut rows = Vec::new();
    for t in 2..=t_max {
        for s in 1..t {
            let emp = hist.empirical(t, s);
            let exp = hist.expected(t, s);
            rows.push(vec![
                t.to_string(),
                s.to_string(),
                fmt(emp),
                fmt(exp),
                fmt((emp - exp).abs()),
            ]);
        }
    }
    let csv = out_path(cfg, "csv");
    write_csv(
        &csv,
        "verify-retention",
        &cfg.hash(),
        &["t", "s", "empirical", "expected", "abs_dev"],
        &rows,
    )?;
    let worst = hist.max_abs_deviation();
    let pass = worst <= TOLERANCE;
    println!(
        "verify-retention: S={} T={t_max} trials={trials} max |empirical - min(1,S/(t-1))| = {worst:.4} -> {} [{}]",
        cfg.window,
        csv.display(),
        if pass { "PASS" } else { "FAIL" }
    );
    Ok(pass)
}

pub fn ratio_stats(cfg: &ExperimentConfig) -> Result<bool> {
    let n_trials = if cfg.is_set("n_trials") { cfg.n_trials } else { 200 };
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for with_factor in [true, false] {
        let stats = match cfg.model.as_str() {
            "toy-transformer" => {
                let model = ToyTransformer::new(cfg.transformer());
                let params = model.init_params(cfg.seed);
                let docs = data::token_documents(
                    8,
                    cfg.segments,
                    cfg.seg_len,
                    cfg.vocab,
                    split(cfg.seed, 0xd0c),
                );
                verify::grad_ratio_stats(
                    &model, &params, &docs, cfg.window, with_factor, n_trials, cfg.batch,
                    cfg.seed,
                )?
            }
            "toy-rnn" => {
                let model = ToyRnn::default();
                let params = model.init_params(cfg.seed);
                let docs: Vec<_> = (0..8)
                    .map(|d| model.random_segments(cfg.segments, split(cfg.seed, 0xd0c + d)))
                    .collect();
                verify::grad_ratio_stats(
                    &model, &params, &docs, cfg.window, with_factor, n_trials, cfg.batch,
                    cfg.seed,
                )?
            }
            other => bail!("unknown model `{other}`"),
        };
        summary.push(format!(
            "{}factor mean_r={:.4} var_r={:.2e}",
            if with_factor { "+" } else { "-" },
            stats.mean_r,
            stats.var_r
        ));
        rows.push(vec![
            stats.window.to_string(),
            with_factor.to_string(),
            fmt(stats.mean_r),
            fmt(stats.var_r),
            stats.n_trials.to_string(),
            stats.rejected_trials.to_string(),
        ]);
    }
    let csv = out_path(cfg, "csv");
    write_csv(
        &csv,
        "ratio-stats",
        &cfg.hash(),
        &["S", "with_factor", "mean_r", "var_r", "n_trials", "rejected_trials"],
        &rows,
    )?;
    println!(
        "ratio-stats: S={} T={} {} -> {}",
        cfg.window,
        cfg.segments,
        summary.join(" | "),
        csv.display()
    );
    Ok(true)
}

pub fn bench(cfg: &ExperimentConfig) -> Result<bool> {
    const WARMUP: usize = 2;
    let mut model_cfg = cfg.transformer();
    if !cfg.is_set("ffn_mult") {
        // wide FFN so per-segment backward cost dominates graph bookkeeping
        model_cfg.ffn_mult = 96;
    }
    let segments = if cfg.is_set("T") { cfg.segments } else { 128 };
    let windows: Vec<usize> = if cfg.is_set("S") {
        vec![cfg.window]
    } else {
        vec![1, 2, 4, 8]
    };
    let modes: Vec<Mode> = match cfg.mode.as_deref() {
        None => vec![Mode::Tbptt, Mode::Incremental],
        Some(name) => vec![Mode::parse(name).context("unknown scheduler mode")?],
    };
    let model = ToyTransformer::new(model_cfg);
    let params = model.init_params(cfg.seed);
    let docs = data::token_samples(segments, model_cfg.seg_len, model_cfg.vocab, split(cfg.seed, 0xb));
    let mut rows = Vec::new();
    for &mode in &modes {
        for &window in &windows {
            let row = bench_mode(
                &model,
                &docs,
                mode,
                window,
                &params,
                cfg.seed,
                cfg.iterations,
                WARMUP,
            )?;
            println!(
                "bench: mode={} S={} mean_step_ms={:.3} peak_live_nodes={} backward_passes={}",
                row.mode.name(),
                row.window,
                row.mean_step_ms,
                row.peak_live_nodes,
                row.backward_passes
            );
            rows.push(vec![
                row.mode.name().to_string(),
                row.window.to_string(),
                fmt(row.mean_step_ms),
                row.peak_live_nodes.to_string(),
                row.backward_passes.to_string(),
            ]);
        }
    }
    let csv = out_path(cfg, "csv");
    write_csv(
        &csv,
        "bench",
        &cfg.hash(),
        &["mode", "S", "mean_step_ms", "peak_live_nodes", "backward_passes"],
        &rows,
    )?;
    println!(
        "bench: {} segments x {} iterations ({} warmup discarded) -> {}",
        segments,
        cfg.iterations,
        WARMUP,
        csv.display()
    );
    Ok(true)
}

pub fn autoencode(cfg: &ExperimentConfig) -> Result<bool> {
    if cfg.model != "toy-transformer" {
        bail!("autoencode requires model=toy-transformer");
    }
    let model_cfg = cfg.transformer();
    let model = ToyTransformer::new(model_cfg);
    let mut params = model.init_params(cfg.seed);
    let train = data::token_samples(64, cfg.seg_len, cfg.vocab, split(cfg.seed, 1));
    let held_out = data::token_samples(32, cfg.seg_len, cfg.vocab, split(cfg.seed, 2));
    let report = pipeline::auto_encode_run(
        &model,
        &mut params,
        &train,
        &held_out,
        cfg.steps,
        cfg.batch,
        cfg.lr,
        cfg.seed,
    )?;
    let json = serde_json::json!({
        "command": "autoencode",
        "config_hash": cfg.hash(),
        "compression_ratio": cfg.seg_len / cfg.k_mem,
        "train_steps": report.train_steps,
        "first_loss": report.first_loss,
        "final_loss": report.final_loss,
        "accuracy": report.accuracy,
    });
    let path = out_path(cfg, "json");
    std::fs::write(&path, serde_json::to_string_pretty(&json)?)?;
    let ckpt = out_path(cfg, "ckpt");
    checkpoint::save(&ckpt, &cfg.canonical(), &params)?;
    println!(
        "autoencode: ratio {}x, {} steps, loss {:.4} -> {:.4}, held-out accuracy {:.4} -> {} + {}",
        cfg.seg_len / cfg.k_mem,
        report.train_steps,
        report.first_loss,
        report.final_loss,
        report.accuracy,
        path.display(),
        ckpt.display()
    );
    Ok(true)
}
