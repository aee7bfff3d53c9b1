//! Command implementations. Each one is thin orchestration over the core
//! modules and writes a manifest with the resolved config, input hashes,
//! and metrics.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use tensorslice_core::data::{cnn_baseline, grid_blobs, mlp_baseline, spirals};
use tensorslice_core::decompose::CompressionPlan;
use tensorslice_core::distill::{
    capture_features, global_finetune, hybrid_local_global, local_tensorize, train_baseline,
    TrainReport,
};
use tensorslice_core::model::{
    compression_rate, evaluate, plan_for_global_cr, plan_uniform_per_layer, Dataset, Network,
    Slice, Split,
};
use tensorslice_core::optim::LossKind;
use tensorslice_core::profile::{layer_sensitivity, select_exclusions, sensitivity_csv};
use tensorslice_core::schedule::{timing_summary, ScheduleReport};
use tensorslice_core::{Error, Result};

use crate::config::RunConfig;
use crate::manifest::RunManifest;

pub fn build_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.dataset;
    let test_seed = d.data_seed + 1_000_000;
    match d.kind.as_str() {
        "spirals" => Ok((
            spirals(d.train_per_class, d.noise, d.data_seed, Split::Train),
            spirals(d.test_per_class, d.noise, test_seed, Split::Test),
        )),
        "blobs" => Ok((
            grid_blobs(d.train_per_class, d.noise, d.data_seed, Split::Train),
            grid_blobs(d.test_per_class, d.noise, test_seed, Split::Test),
        )),
        other => Err(Error::InvalidConfig(format!("unknown dataset kind {other}"))),
    }
}

fn baseline_arch(cfg: &RunConfig) -> Result<Network> {
    match cfg.dataset.kind.as_str() {
        "spirals" => mlp_baseline(cfg.seed),
        "blobs" => cnn_baseline(cfg.seed),
        other => Err(Error::InvalidConfig(format!("unknown dataset kind {other}"))),
    }
}

fn load_model(path: &Path) -> Result<Network> {
    Network::load(path)
}

fn slices_of(cfg: &RunConfig, net: &Network) -> Result<Vec<Slice>> {
    if cfg.slices.cuts.is_empty() {
        net.partition(&[])
    } else {
        net.partition(&cfg.slices.cuts)
    }
}

fn tensorizable_candidates(net: &Network) -> Vec<usize> {
    net.layers()
        .iter()
        .enumerate()
        .filter(|(_, l)| matches!(l.kind_name(), "dense" | "conv2d"))
        .map(|(i, _)| i)
        .collect()
}

/// Exclusions come from the config when given, otherwise from profiling
/// when `profile.exclude_count` asks for it.
fn resolve_exclusions(cfg: &RunConfig, net: &Network, test: &Dataset) -> Result<BTreeSet<usize>> {
    let explicit = cfg.exclusions();
    if !explicit.is_empty() || cfg.profile.exclude_count == 0 {
        return Ok(explicit);
    }
    let candidates = tensorizable_candidates(net);
    let records = layer_sensitivity(net, test, &candidates)?;
    Ok(select_exclusions(&records, cfg.profile.exclude_count))
}

fn build_plan(cfg: &RunConfig, net: &Network, test: &Dataset) -> Result<CompressionPlan> {
    let exclude = resolve_exclusions(cfg, net, test)?;
    if cfg.compress.per_layer {
        plan_uniform_per_layer(net, cfg.compress.target_cr, &exclude)
    } else {
        plan_for_global_cr(net, cfg.compress.target_cr, &exclude)
    }
}

fn write_reports(out: &Path, reports: &[TrainReport], manifest: &mut RunManifest) -> Result<()> {
    for report in reports {
        let name = format!("report-{}.csv", report.label);
        std::fs::write(out.join(&name), report.to_csv())?;
        manifest.record_output(&name);
        manifest.record_metric(&format!("{}_best_loss", report.label), report.best_metric);
        manifest.record_metric(&format!("{}_wall_ms", report.label), report.wall_ms);
    }
    Ok(())
}

fn write_schedule(out: &Path, report: &ScheduleReport, manifest: &mut RunManifest) -> Result<()> {
    std::fs::write(out.join("schedule.csv"), timing_summary(std::slice::from_ref(report)))?;
    manifest.record_output("schedule.csv");
    manifest.record_metric("makespan_ms", report.makespan_ms);
    manifest.record_metric("serial_ms", report.serial_ms);
    manifest.record_metric("speedup", report.speedup);
    manifest.record_metric("efficiency", report.efficiency);
    Ok(())
}

fn eval_into(
    net: &Network,
    test: &Dataset,
    prefix: &str,
    manifest: &mut RunManifest,
) -> Result<f64> {
    let metrics = evaluate(net, test)?;
    manifest.record_metric(&format!("{prefix}accuracy"), metrics.accuracy);
    manifest.record_metric(&format!("{prefix}mean_loss"), metrics.mean_loss);
    if let Some(top5) = metrics.top5 {
        manifest.record_metric(&format!("{prefix}top5"), top5);
    }
    Ok(metrics.accuracy)
}

pub fn cmd_train_baseline(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new("train-baseline", cfg);
    let (train, test) = build_datasets(cfg)?;
    let net = baseline_arch(cfg)?;
    let train_cfg = cfg
        .baseline
        .to_train_config(cfg.seed, LossKind::CrossEntropy);
    let (trained, report) = train_baseline(&net, &train, &train_cfg)?;
    trained.save(&out.join("model.tsnw"))?;
    manifest.record_output("model.tsnw");
    std::fs::write(out.join("metrics.csv"), report.to_csv())?;
    manifest.record_output("metrics.csv");
    manifest.record_metric("train_best_loss", report.best_metric);
    manifest.record_metric("train_wall_ms", report.wall_ms);
    let acc = eval_into(&trained, &test, "", &mut manifest)?;
    manifest.write(out)?;
    println!(
        "trained baseline: accuracy {acc:.4}, params {}, model {}",
        trained.param_count(),
        out.join("model.tsnw").display()
    );
    Ok(())
}

pub fn cmd_profile(cfg: &RunConfig, model: &Path, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new("profile", cfg);
    manifest.record_input(model)?;
    let net = load_model(model)?;
    let (_, test) = build_datasets(cfg)?;
    let candidates = if cfg.profile.candidates.is_empty() {
        tensorizable_candidates(&net)
    } else {
        cfg.profile.candidates.clone()
    };
    let records = layer_sensitivity(&net, &test, &candidates)?;
    std::fs::write(out.join("profile.csv"), sensitivity_csv(&records))?;
    manifest.record_output("profile.csv");
    for r in &records {
        manifest.record_metric(&format!("delta_layer_{}", r.layer), r.delta);
    }
    manifest.write(out)?;
    println!("profiled {} layers:", records.len());
    for r in &records {
        println!("  layer {:>2}  accuracy {:.4}  delta {:+.4}", r.layer, r.accuracy, r.delta);
    }
    Ok(())
}

pub fn cmd_compress(cfg: &RunConfig, model: &Path, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new("compress", cfg);
    manifest.record_input(model)?;
    let net = load_model(model)?;
    let (_, test) = build_datasets(cfg)?;
    let plan = build_plan(cfg, &net, &test)?;
    let compressed = net.tensorize_slice(Slice::new(0, net.len()), &plan)?;
    let achieved = compression_rate(&net, &compressed);
    std::fs::write(out.join("plan.toml"), plan.to_toml()?)?;
    manifest.record_output("plan.toml");
    compressed.save(&out.join("model.tsnw"))?;
    manifest.record_output("model.tsnw");
    manifest.record_metric("target_cr", plan.target_cr);
    manifest.record_metric("achieved_cr", achieved);
    manifest.record_metric("params_before", net.param_count() as f64);
    manifest.record_metric("params_after", compressed.param_count() as f64);
    eval_into(&compressed, &test, "raw_", &mut manifest)?;
    manifest.write(out)?;
    println!(
        "compressed: target cr {:.3}, achieved cr {achieved:.4}, params {} -> {}",
        plan.target_cr,
        net.param_count(),
        compressed.param_count()
    );
    Ok(())
}

fn load_or_build_plan(
    cfg: &RunConfig,
    net: &Network,
    test: &Dataset,
    plan_path: Option<&Path>,
    manifest: &mut RunManifest,
) -> Result<CompressionPlan> {
    match plan_path {
        Some(path) => {
            manifest.record_input(path)?;
            CompressionPlan::from_toml(&std::fs::read_to_string(path)?)
        }
        None => build_plan(cfg, net, test),
    }
}

pub fn cmd_distill(
    cfg: &RunConfig,
    model: &Path,
    plan_path: Option<&Path>,
    out: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new("distill", cfg);
    manifest.record_input(model)?;
    let net = load_model(model)?;
    let (train, test) = build_datasets(cfg)?;
    let plan = load_or_build_plan(cfg, &net, &test, plan_path, &mut manifest)?;
    let slices = slices_of(cfg, &net)?;
    let local_cfg = cfg.local.to_train_config(cfg.seed, LossKind::Mse);

    let caches = capture_features(&net, &train, &slices, local_cfg.data_fraction, cfg.seed)?;
    for cache in &caches {
        cache.save(&out.join("cache"))?;
    }
    let (healed, reports, schedule) =
        local_tensorize(&net, &slices, &plan, &caches, &local_cfg, cfg.workers)?;
    healed.save(&out.join("model.tsnw"))?;
    manifest.record_output("model.tsnw");
    std::fs::write(out.join("plan.toml"), plan.to_toml()?)?;
    manifest.record_output("plan.toml");
    write_reports(out, &reports, &mut manifest)?;
    write_schedule(out, &schedule, &mut manifest)?;
    let compressed = net.tensorize_slice(Slice::new(0, net.len()), &plan)?;
    manifest.record_metric("achieved_cr", compression_rate(&net, &compressed));
    let acc = eval_into(&healed, &test, "", &mut manifest)?;
    manifest.write(out)?;
    println!(
        "locally tensorized {} slices on {} workers: accuracy {acc:.4}, cr {:.4}",
        slices.len(),
        schedule.workers,
        compression_rate(&net, &healed)
    );
    Ok(())
}

pub fn cmd_finetune(cfg: &RunConfig, model: &Path, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new("finetune", cfg);
    manifest.record_input(model)?;
    let net = load_model(model)?;
    let (train, test) = build_datasets(cfg)?;
    let global_cfg = cfg.global.to_train_config(cfg.seed, LossKind::CrossEntropy);
    let (tuned, report) = global_finetune(&net, &train, &global_cfg)?;
    tuned.save(&out.join("model.tsnw"))?;
    manifest.record_output("model.tsnw");
    write_reports(out, &[report], &mut manifest)?;
    let acc = eval_into(&tuned, &test, "", &mut manifest)?;
    manifest.write(out)?;
    println!("globally fine-tuned: accuracy {acc:.4}");
    Ok(())
}

pub fn cmd_hybrid(
    cfg: &RunConfig,
    model: &Path,
    plan_path: Option<&Path>,
    out: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new("hybrid", cfg);
    manifest.record_input(model)?;
    let net = load_model(model)?;
    let (train, test) = build_datasets(cfg)?;
    let plan = load_or_build_plan(cfg, &net, &test, plan_path, &mut manifest)?;
    let slices = slices_of(cfg, &net)?;
    let local_cfg = cfg.local.to_train_config(cfg.seed, LossKind::Mse);
    let global_cfg = cfg.global.to_train_config(cfg.seed, LossKind::CrossEntropy);
    let caches = capture_features(&net, &train, &slices, local_cfg.data_fraction, cfg.seed)?;
    let (final_net, reports) = hybrid_local_global(
        &net,
        &slices,
        &plan,
        &caches,
        &train,
        &local_cfg,
        &global_cfg,
        cfg.workers,
    )?;
    final_net.save(&out.join("model.tsnw"))?;
    manifest.record_output("model.tsnw");
    std::fs::write(out.join("plan.toml"), plan.to_toml()?)?;
    manifest.record_output("plan.toml");
    write_reports(out, &reports, &mut manifest)?;
    let acc = eval_into(&final_net, &test, "", &mut manifest)?;
    manifest.write(out)?;
    println!("hybrid local+global: accuracy {acc:.4}");
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig, model: &Path, out: Option<&Path>) -> Result<()> {
    let mut manifest = RunManifest::new("eval", cfg);
    manifest.record_input(model)?;
    let net = load_model(model)?;
    let (_, test) = build_datasets(cfg)?;
    let metrics = evaluate(&net, &test)?;
    manifest.record_metric("accuracy", metrics.accuracy);
    manifest.record_metric("mean_loss", metrics.mean_loss);
    if let Some(top5) = metrics.top5 {
        manifest.record_metric("top5", top5);
    }
    if let Some(out) = out {
        manifest.write(out)?;
    }
    println!(
        "accuracy {:.4}, mean loss {:.6}{}",
        metrics.accuracy,
        metrics.mean_loss,
        metrics
            .top5
            .map_or(String::new(), |t| format!(", top5 {t:.4}"))
    );
    Ok(())
}

pub fn cmd_report(runs: &[PathBuf], out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let mut csv = String::from("run,command,seed,metric,value\n");
    let mut count = 0usize;
    for dir in runs {
        let manifest = RunManifest::load(dir)?;
        for (metric, value) in &manifest.metrics {
            csv.push_str(&format!(
                "{},{},{},{},{:.10e}\n",
                dir.display(),
                manifest.command,
                manifest.seed,
                metric,
                value
            ));
        }
        count += 1;
    }
    std::fs::write(out.join("summary.csv"), &csv)?;
    print!("{csv}");
    println!("summarized {count} runs into {}", out.join("summary.csv").display());
    Ok(())
}
