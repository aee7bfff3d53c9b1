//! Slice-wise feature distillation: capture pretrained activations once,
//! heal each tensorized slice independently against them, and optionally
//! fine-tune the assembled network end to end.
//!
//! The local objective is the mean squared error between the tensorized
//! slice output and the recorded pretrained slice output, normalized by the
//! number of data points in the batch. Slices never touch parameters
//! outside their own range, which is what makes the jobs independent and
//! the scheduler deterministic: each slice trains under a seed derived from
//! `(global seed, slice index)`, so serial and parallel runs produce
//! identical parameters.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{collect_grads, taped_forward, Tape, TrainScope};
use crate::error::{Error, Result};
use crate::model::{Dataset, Layer, Network, Slice};
use crate::optim::{AdamState, LossKind, TrainConfig};
use crate::rng::{derive_seed, Rng};
use crate::schedule::{run_jobs, ScheduleReport};
use crate::tensor::Tensor;

/// Loss explosion factor that aborts a slice job.
const DIVERGENCE_FACTOR: f64 = 1e6;

/// Recorded pretrained activations for one slice: what the slice consumed
/// and what it produced, over the captured sample subset.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    pub slice_index: usize,
    pub input_batches: Vec<Tensor>,
    pub output_batches: Vec<Tensor>,
    pub sample_count: usize,
    /// Checksum of the model the features were captured from.
    pub source_checksum: u64,
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    slice_index: usize,
    sample_count: usize,
    /// Hex, to keep the document readable.
    source_checksum: String,
    batches: usize,
}

impl FeatureCache {
    pub fn verify(&self, expected_checksum: u64) -> Result<()> {
        if self.source_checksum != expected_checksum {
            return Err(Error::ChecksumMismatch(format!(
                "cache for slice {} was captured from {:016x}, expected {:016x}",
                self.slice_index, self.source_checksum, expected_checksum
            )));
        }
        let in_count: usize = self.input_batches.iter().map(|b| b.shape()[0]).sum();
        let out_count: usize = self.output_batches.iter().map(|b| b.shape()[0]).sum();
        if in_count != out_count || in_count != self.sample_count {
            return Err(Error::ShapeMismatch(format!(
                "cache batches disagree: {in_count} inputs, {out_count} outputs, {} expected",
                self.sample_count
            )));
        }
        Ok(())
    }

    /// All captured batches stacked along the sample axis.
    pub fn stacked_inputs(&self) -> Result<Tensor> {
        stack_batches(&self.input_batches)
    }

    pub fn stacked_outputs(&self) -> Result<Tensor> {
        stack_batches(&self.output_batches)
    }

    /// Persists under `root/<checksum>/slice-<i>/{inputs.bin, outputs.bin,
    /// meta.toml}` and returns the slice directory.
    pub fn save(&self, root: &Path) -> Result<PathBuf> {
        let dir = root
            .join(format!("{:016x}", self.source_checksum))
            .join(format!("slice-{}", self.slice_index));
        std::fs::create_dir_all(&dir)?;
        write_batches(&dir.join("inputs.bin"), &self.input_batches)?;
        write_batches(&dir.join("outputs.bin"), &self.output_batches)?;
        let meta = CacheMeta {
            slice_index: self.slice_index,
            sample_count: self.sample_count,
            source_checksum: format!("{:016x}", self.source_checksum),
            batches: self.input_batches.len(),
        };
        std::fs::write(dir.join("meta.toml"), toml::to_string(&meta)?)?;
        Ok(dir)
    }

    /// Loads a cache saved by [`FeatureCache::save`]; fails on checksum
    /// mismatch.
    pub fn load(root: &Path, checksum: u64, slice_index: usize) -> Result<FeatureCache> {
        let dir = root
            .join(format!("{checksum:016x}"))
            .join(format!("slice-{slice_index}"));
        let meta: CacheMeta = toml::from_str(&std::fs::read_to_string(dir.join("meta.toml"))?)?;
        let stored = u64::from_str_radix(&meta.source_checksum, 16)
            .map_err(|e| Error::Format(format!("bad checksum in cache meta: {e}")))?;
        let cache = FeatureCache {
            slice_index: meta.slice_index,
            input_batches: read_batches(&dir.join("inputs.bin"))?,
            output_batches: read_batches(&dir.join("outputs.bin"))?,
            sample_count: meta.sample_count,
            source_checksum: stored,
        };
        cache.verify(checksum)?;
        Ok(cache)
    }
}

fn stack_batches(batches: &[Tensor]) -> Result<Tensor> {
    if batches.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut shape = batches[0].shape().to_vec();
    let row: usize = shape[1..].iter().product();
    let total: usize = batches.iter().map(|b| b.shape()[0]).sum();
    shape[0] = total;
    let mut data = Vec::with_capacity(total * row);
    for b in batches {
        if b.shape()[1..] != batches[0].shape()[1..] {
            return Err(Error::ShapeMismatch("ragged cache batches".into()));
        }
        data.extend_from_slice(b.data());
    }
    Tensor::new(shape, data)
}

fn write_batches(path: &Path, batches: &[Tensor]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&(batches.len() as u32).to_le_bytes())?;
    for b in batches {
        b.write_to(&mut f)?;
    }
    Ok(())
}

fn read_batches(path: &Path) -> Result<Vec<Tensor>> {
    let mut f = std::fs::File::open(path)?;
    let mut b4 = [0u8; 4];
    f.read_exact(&mut b4)?;
    let count = u32::from_le_bytes(b4) as usize;
    if count > 1 << 20 {
        return Err(Error::Format("implausible cache batch count".into()));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        out.push(Tensor::read_from(&mut f)?);
    }
    Ok(out)
}

/// One point of a loss curve; `wall_ms` is cumulative optimization time
/// (forward + backward only).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub wall_ms: f64,
}

/// Outcome of one local or global training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// `"slice-<i>"` or `"global"`.
    pub label: String,
    pub curve: Vec<CurvePoint>,
    /// Lowest full-set loss observed (initial state included).
    pub best_metric: f64,
    /// Forward + backward wall time; capture and I/O excluded.
    pub wall_ms: f64,
    pub steps: usize,
    pub config: TrainConfig,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,loss,wall_ms\n");
        for p in &self.curve {
            out.push_str(&format!(
                "{},{},{:.12e},{:.3}\n",
                p.step, p.epoch, p.loss, p.wall_ms
            ));
        }
        out
    }
}

/// Deterministic sample subset: the first `ceil(fraction * n)` entries of a
/// seeded permutation, so smaller fractions are subsets of larger ones.
pub fn fraction_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(0.0 < fraction && fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "fraction must be in (0, 1], got {fraction}"
        )));
    }
    let keep = ((fraction * n as f64).ceil() as usize).clamp(1, n.max(1));
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    order.truncate(keep);
    Ok(order)
}

/// Runs the pretrained model over a seeded subset of the dataset once and
/// records each requested slice's input and output activations.
pub fn capture_features(
    net: &Network,
    dataset: &Dataset,
    slices: &[Slice],
    fraction: f64,
    seed: u64,
) -> Result<Vec<FeatureCache>> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let indices = fraction_indices(dataset.len(), fraction, seed)?;
    let checksum = net.checksum()?;
    let chunk = 64usize;
    let mut caches: Vec<FeatureCache> = slices
        .iter()
        .enumerate()
        .map(|(i, _)| FeatureCache {
            slice_index: i,
            input_batches: Vec::new(),
            output_batches: Vec::new(),
            sample_count: indices.len(),
            source_checksum: checksum,
        })
        .collect();
    let mut start = 0usize;
    while start < indices.len() {
        let end = (start + chunk).min(indices.len());
        let batch = dataset.select(&indices[start..end]);
        // one sweep, snapshotting the activation at every layer boundary
        let mut boundary = vec![batch.inputs.clone()];
        let mut cur = batch.inputs;
        for (idx, layer) in net.layers().iter().enumerate() {
            cur = layer
                .forward(&cur)
                .map_err(|e| Error::ShapeMismatch(format!("layer {idx}: {e}")))?;
            boundary.push(cur.clone());
        }
        for (i, slice) in slices.iter().enumerate() {
            caches[i].input_batches.push(boundary[slice.start].clone());
            caches[i].output_batches.push(boundary[slice.end].clone());
        }
        start = end;
    }
    Ok(caches)
}

/// Minimizes the feature-matching MSE of one tensorized slice against its
/// cache via Adam over shuffled minibatches. Only the slice's own
/// parameters change; by default only the tensorized ones
/// (`config.train_all` lifts that). The loss kind in `config` is ignored:
/// slice healing is MSE by construction.
pub fn distill_slice(
    layers: Vec<Layer>,
    base_idx: usize,
    cache: &FeatureCache,
    config: &TrainConfig,
    expected_checksum: u64,
) -> Result<(Vec<Layer>, TrainReport)> {
    config.validate()?;
    cache.verify(expected_checksum)?;
    let inputs = cache.stacked_inputs()?;
    let targets = cache.stacked_outputs()?;
    let label = format!("slice-{}", cache.slice_index);
    let scope = if config.train_all {
        TrainScope::All
    } else {
        TrainScope::TensorizedOnly
    };
    train_loop(
        layers,
        base_idx,
        config,
        label,
        scope,
        &inputs,
        LossTarget::Features(&targets),
    )
}

enum LossTarget<'a> {
    /// Feature matching against cached activations (MSE).
    Features(&'a Tensor),
    /// Task supervision against integer labels (cross entropy).
    Labels(&'a [usize]),
}

fn train_loop(
    mut layers: Vec<Layer>,
    base_idx: usize,
    config: &TrainConfig,
    label: String,
    scope: TrainScope,
    inputs: &Tensor,
    target: LossTarget<'_>,
) -> Result<(Vec<Layer>, TrainReport)> {
    let n = inputs.shape()[0];
    let full_loss = |layers: &[Layer]| -> Result<f64> {
        let mut cur = inputs.clone();
        for l in layers {
            cur = l.forward(&cur)?;
        }
        match &target {
            LossTarget::Features(t) => {
                let batch = cur.shape()[0] as f64;
                Ok(cur
                    .data()
                    .iter()
                    .zip(t.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / batch)
            }
            LossTarget::Labels(labels) => crate::model::cross_entropy_value(&cur, labels),
        }
    };

    // Below this, a batch loss is floating-point residue, not signal: the
    // optimizer step is skipped so exact decompositions heal as a no-op
    // instead of letting Adam's epsilon-normalization amplify 1e-28-scale
    // gradients into lr-sized drift.
    let zero_floor = match &target {
        LossTarget::Features(t) => {
            let scale = t.data().iter().map(|v| v * v).sum::<f64>() / t.shape()[0] as f64;
            1e4 * f64::EPSILON * f64::EPSILON * scale.max(1.0)
        }
        LossTarget::Labels(_) => 0.0,
    };

    let initial_loss = full_loss(&layers)?;
    let divergence_limit = DIVERGENCE_FACTOR * initial_loss.max(1e-9);
    let mut best = initial_loss;
    let mut adam = AdamState::new(config.learning_rate);
    let mut rng = Rng::new(config.seed);
    let mut curve = Vec::new();
    let mut wall_ms = 0.0f64;
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            let xb = crate::model::gather_rows(inputs, chunk);
            let (loss_value, grads) = {
                let t0 = Instant::now();
                let mut tape = Tape::new();
                let x_id = tape.leaf(xb);
                let fwd = taped_forward(&mut tape, &layers, base_idx, x_id, scope)?;
                let loss_id = match &target {
                    LossTarget::Features(t) => {
                        let tb = crate::model::gather_rows(t, chunk);
                        tape.mse(fwd.output, &tb)?
                    }
                    LossTarget::Labels(labels) => {
                        let lb: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
                        tape.cross_entropy(fwd.output, &lb)?
                    }
                };
                let all = tape.backward(loss_id)?;
                wall_ms += t0.elapsed().as_secs_f64() * 1e3;
                let loss_value = tape.value(loss_id).data()[0];
                (loss_value, collect_grads(&tape, &all, &fwd.params))
            };
            if !loss_value.is_finite() || loss_value > divergence_limit {
                return Err(Error::Divergence(format!(
                    "{label}: loss {loss_value:.3e} at step {step} exceeds {divergence_limit:.3e} \
                     (initial {initial_loss:.3e})"
                )));
            }
            if loss_value > zero_floor {
                adam.apply(&mut layers, base_idx, &grads)?;
            }
            step += 1;
            curve.push(CurvePoint {
                step,
                epoch,
                loss: loss_value,
                wall_ms,
            });
        }
        best = best.min(full_loss(&layers)?);
    }

    let report = TrainReport {
        label,
        curve,
        best_metric: best,
        wall_ms,
        steps: step,
        config: config.clone(),
    };
    Ok((layers, report))
}

/// Tensorizes and heals every slice independently, then splices the healed
/// slices back together. `caches` must line up with `slices` (as produced
/// by [`capture_features`]). Slice jobs run on a worker pool; per-slice
/// seeds are derived from the config seed and the slice index, so the
/// result is bit-identical for any worker count.
pub fn local_tensorize(
    net: &Network,
    slices: &[Slice],
    plan: &crate::decompose::CompressionPlan,
    caches: &[FeatureCache],
    config: &TrainConfig,
    workers: usize,
) -> Result<(Network, Vec<TrainReport>, ScheduleReport)> {
    if slices.len() != caches.len() {
        return Err(Error::InvalidConfig(format!(
            "{} slices but {} caches",
            slices.len(),
            caches.len()
        )));
    }
    let expected = net.checksum()?;
    let jobs: Vec<_> = slices
        .iter()
        .enumerate()
        .map(|(i, &slice)| {
            let cache = &caches[i];
            let slice_config = TrainConfig {
                seed: derive_seed(config.seed, i as u64),
                ..config.clone()
            };
            move || -> Result<(Vec<Layer>, TrainReport)> {
                let tensorized = net.tensorize_slice(slice, plan)?;
                let layers = tensorized.slice_layers(slice).to_vec();
                distill_slice(layers, slice.start, cache, &slice_config, expected)
            }
        })
        .collect();
    let (results, schedule) = run_jobs(jobs, workers)?;

    let mut healed = net.clone();
    let mut reports = Vec::with_capacity(slices.len());
    for (i, result) in results.into_iter().enumerate() {
        let (layers, report) = result?;
        healed = healed.replace_slice(slices[i], layers)?;
        reports.push(report);
    }
    Ok((healed, reports, schedule))
}

/// End-to-end fine-tuning with task supervision (cross entropy). By default
/// non-tensorized layers are frozen; `config.train_all` lifts that.
pub fn global_finetune(
    net: &Network,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<(Network, TrainReport)> {
    config.validate()?;
    if config.loss != LossKind::CrossEntropy {
        return Err(Error::InvalidConfig(
            "global fine-tuning uses task supervision (cross_entropy loss)".into(),
        ));
    }
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let indices = fraction_indices(dataset.len(), config.data_fraction, config.seed)?;
    let subset = dataset.select(&indices);
    let scope = if config.train_all {
        TrainScope::All
    } else {
        TrainScope::TensorizedOnly
    };
    let (layers, report) = train_loop(
        net.layers().to_vec(),
        0,
        config,
        "global".to_string(),
        scope,
        &subset.inputs,
        LossTarget::Labels(&subset.labels),
    )?;
    Ok((Network::new(layers, net.input_shape().to_vec())?, report))
}

/// Local healing as initialization, then global fine-tuning. Reports carry
/// one entry per slice plus the global phase.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_local_global(
    net: &Network,
    slices: &[Slice],
    plan: &crate::decompose::CompressionPlan,
    caches: &[FeatureCache],
    dataset: &Dataset,
    local_config: &TrainConfig,
    global_config: &TrainConfig,
    workers: usize,
) -> Result<(Network, Vec<TrainReport>)> {
    let (local_net, mut reports, _) =
        local_tensorize(net, slices, plan, caches, local_config, workers)?;
    let (final_net, global_report) = global_finetune(&local_net, dataset, global_config)?;
    reports.push(global_report);
    Ok((final_net, reports))
}

/// Supervised training of a fresh network (all parameters, cross entropy).
/// This is how the toy pretrained baselines are produced.
pub fn train_baseline(
    net: &Network,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<(Network, TrainReport)> {
    let config = TrainConfig {
        train_all: true,
        loss: LossKind::CrossEntropy,
        ..config.clone()
    };
    global_finetune(net, dataset, &config)
}

/// Serializes the parameters of the layers outside `slice`, for
/// bit-exactness checks.
pub fn params_outside_slice(net: &Network, slice: Slice) -> Vec<u8> {
    let mut bytes = Vec::new();
    for (idx, layer) in net.layers().iter().enumerate() {
        if slice.contains(idx) {
            continue;
        }
        layer.visit_params(idx, &mut |name, t| {
            bytes.extend_from_slice(name.as_bytes());
            for &x in t.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        });
    }
    bytes
}
