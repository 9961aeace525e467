//! Scratch calibration harness: measures the margins behind the synthetic-task
//! acceptance gates (rare-class recovery, method ordering, epoch curve) over a
//! small grid of desk-scale training protocols so the frozen protocol has
//! known headroom.

use std::time::Instant;

use swat_core::augment::MsdaMethod;
use swat_core::config::ExperimentConfig;
use swat_core::data::{mix_pools, split_common_rare};
use swat_core::eval::{evaluate, mean_std};
use swat_core::experiment::prepare_seed;
use swat_core::synth::SyntheticTaskSpec;
use swat_core::train::{
    fsft, stage1_finetune, stage2_retrain_classifier, train_linear_probe, TrainConfig,
};
use swat_core::Result;

struct Combo {
    lr_encoder: f64,
    lr_head: f64,
    separation: f64,
}

fn config_for(combo: &Combo) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.task.synthetic =
        Some(SyntheticTaskSpec { class_separation: combo.separation, ..Default::default() });
    cfg.train = TrainConfig {
        lr_encoder: combo.lr_encoder,
        lr_head: combo.lr_head,
        lr_temperature: 1e-4,
        ..TrainConfig::default()
    };
    cfg
}

fn ordering_pass(cfg: &ExperimentConfig, seeds: u64) -> Result<()> {
    let t0 = Instant::now();
    let mut acc: std::collections::BTreeMap<&str, Vec<f64>> = Default::default();
    for seed in 0..seeds {
        let prepared = prepare_seed(cfg, seed)?;
        let split = split_common_rare(&prepared.retrieved_counts)?;
        let mut tc = cfg.train.clone();
        tc.seed = seed;

        let zs = evaluate(&prepared.model, &prepared.test, &split, "zeroshot", seed)?.overall;
        let (probe_m, _) =
            train_linear_probe(prepared.model.clone(), &prepared.fewshot, &tc, None)?;
        let probe = evaluate(&probe_m, &prepared.test, &split, "probe", seed)?.overall;
        let (fsft_m, _) = fsft(prepared.model.clone(), &prepared.fewshot, &tc, None)?;
        let fs = evaluate(&fsft_m, &prepared.test, &split, "fsft", seed)?.overall;
        let pool = mix_pools(&prepared.retrieved, &prepared.fewshot)?;
        let (m1, _) = stage1_finetune(prepared.model, &pool, &tc, None)?;
        let (m2, _) = stage2_retrain_classifier(m1, &prepared.fewshot, &tc, None)?;
        let sw = evaluate(&m2, &prepared.test, &split, "swat", seed)?.overall;

        for (k, v) in [("zeroshot", zs), ("probe", probe), ("fsft", fs), ("swat", sw)] {
            acc.entry(k).or_default().push(v);
        }
    }
    let m = |k: &str| mean_std(&acc[k]).0;
    println!(
        "  zs {:6.2}  probe {:6.2}  fsft {:6.2}  swat {:6.2} | swat-probe {:+5.2} fsft-probe {:+5.2} swat-fsft {:+5.2} ({:.0}s)",
        m("zeroshot"),
        m("probe"),
        m("fsft"),
        m("swat"),
        m("swat") - m("probe"),
        m("fsft") - m("probe"),
        m("swat") - m("fsft"),
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

fn rare_recovery_pass(cfg: &ExperimentConfig, seeds: u64) -> Result<()> {
    let t0 = Instant::now();
    let (mut d_rare, mut d_common) = (Vec::new(), Vec::new());
    for seed in 0..seeds {
        let prepared = prepare_seed(cfg, seed)?;
        let split = split_common_rare(&prepared.retrieved_counts)?;
        let mut tc = cfg.train.clone();
        tc.seed = seed;
        tc.msda.method = MsdaMethod::None;
        let (m1, _) = stage1_finetune(prepared.model, &prepared.retrieved, &tc, None)?;
        let r1 = evaluate(&m1, &prepared.test, &split, "stage1", seed)?;
        let (m2, _) = stage2_retrain_classifier(m1, &prepared.fewshot, &tc, None)?;
        let r2 = evaluate(&m2, &prepared.test, &split, "stage2", seed)?;
        d_rare.push(r2.rare - r1.rare);
        d_common.push(r2.common - r1.common);
    }
    let (mr, sr) = mean_std(&d_rare);
    let (mc, sc) = mean_std(&d_common);
    println!(
        "  c5 d_rare {:+6.2}±{:.2}  d_common {:+6.2}±{:.2}  ({:.0}s)",
        mr,
        sr,
        mc,
        sc,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}

fn curve_pass(cfg: &ExperimentConfig, seeds: u64) -> Result<()> {
    let grid = [5usize, 10, 20, 50];
    let mut per_epoch: Vec<Vec<f64>> = vec![Vec::new(); grid.len()];
    for seed in 0..seeds {
        let prepared = prepare_seed(cfg, seed)?;
        let split = split_common_rare(&prepared.retrieved_counts)?;
        let mut tc = cfg.train.clone();
        tc.seed = seed;
        let pool = mix_pools(&prepared.retrieved, &prepared.fewshot)?;
        let (m1, _) = stage1_finetune(prepared.model, &pool, &tc, None)?;
        for (gi, &e) in grid.iter().enumerate() {
            let mut tce = tc.clone();
            tce.epochs_stage2 = e;
            let (m2, _) = stage2_retrain_classifier(m1.clone(), &prepared.fewshot, &tce, None)?;
            per_epoch[gi].push(evaluate(&m2, &prepared.test, &split, "swat", seed)?.overall);
        }
    }
    let means: Vec<f64> = per_epoch.iter().map(|v| mean_std(v).0).collect();
    let max = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    println!(
        "  c8 curve {:?} final-vs-max {:+.2}",
        means.iter().map(|m| format!("{:.1}", m)).collect::<Vec<_>>(),
        means[means.len() - 1] - max
    );
    Ok(())
}

fn main() -> Result<()> {
    let combos = [Combo { lr_encoder: 3e-4, lr_head: 1e-4, separation: 3.0 }];
    for combo in &combos {
        println!(
            "lr_enc {:>7.0e} lr_head {:>7.0e} sep {}",
            combo.lr_encoder, combo.lr_head, combo.separation
        );
        let cfg = config_for(combo);
        ordering_pass(&cfg, 5)?;
        rare_recovery_pass(&cfg, 5)?;
        curve_pass(&cfg, 3)?;
    }
    Ok(())
}
