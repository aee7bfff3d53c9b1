//! Layer-sensitivity profiling: decompose one layer at a time at probe
//! ranks, evaluate test accuracy with no healing, and rank layers by how
//! much the probe hurts. The most-negative deltas identify layers to
//! exclude from compression.
//!
//! Probe ranks follow the half-channel convention: a conv kernel
//! `[a, b, c, d]` is probed at ranks `[ceil(a/2), ceil(b/2), c, d]`; a dense
//! layer is probed as a balanced 2-site MPO at half of its maximum bond.
//! Profiling never mutates the input network; every probe builds a fresh
//! copy. A healed-probe variant (distill the probe before evaluating) is
//! available behind [`ProbeOptions::heal`].

use std::collections::BTreeSet;

use crate::decompose::{balanced_factor, CompressionPlan, LayerPlan};
use crate::distill::{capture_features, distill_slice};
use crate::error::{Error, Result};
use crate::model::{evaluate, Dataset, Layer, Network, Slice};
use crate::optim::TrainConfig;

/// Outcome of probing one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityRecord {
    pub layer: usize,
    /// Weight shape of the probed layer.
    pub shape: Vec<usize>,
    /// The decomposition the probe applied.
    pub probe: LayerPlan,
    /// Test accuracy after tensorizing only this layer.
    pub accuracy: f64,
    /// `accuracy - baseline accuracy`; negative means the layer is
    /// sensitive to tensorization.
    pub delta: f64,
}

/// Probe rank policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeRanks {
    /// Half channel ranks / half bond dimension.
    Half,
    /// Full ranks; every delta should be numerically zero. Useful for
    /// validating the probe machinery itself.
    Full,
}

#[derive(Debug, Clone)]
pub struct ProbeOptions {
    pub ranks: ProbeRanks,
    /// Heal the probed layer against captured features before evaluating
    /// (train dataset, config). Default off: the plain probe is cheap.
    pub heal: Option<(Dataset, TrainConfig)>,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            ranks: ProbeRanks::Half,
            heal: None,
        }
    }
}

/// Probe plan for a single layer under the given rank policy.
pub fn probe_plan(layer: &Layer, ranks: ProbeRanks) -> Result<LayerPlan> {
    match layer {
        Layer::Dense { w, .. } => {
            let (out, inp) = (w.shape()[0], w.shape()[1]);
            let (i1, i2) = balanced_factor(inp);
            let (j1, j2) = balanced_factor(out);
            let max_bond = (i1 * j1).min(i2 * j2);
            let bond = match ranks {
                ProbeRanks::Half => max_bond.div_ceil(2),
                ProbeRanks::Full => max_bond,
            };
            Ok(LayerPlan::Mpo {
                in_dims: vec![i1, i2],
                out_dims: vec![j1, j2],
                bond,
            })
        }
        Layer::Conv2d { k, .. } => {
            let (s1, s2) = (k.shape()[0], k.shape()[1]);
            let (r1, r2) = match ranks {
                ProbeRanks::Half => (s1.div_ceil(2), s2.div_ceil(2)),
                ProbeRanks::Full => (s1, s2),
            };
            Ok(LayerPlan::Tucker { r1, r2 })
        }
        other => Err(Error::PlanMismatch(format!(
            "layer kind {} is not tensorizable",
            other.kind_name()
        ))),
    }
}

/// Probes each candidate layer independently and reports accuracy deltas,
/// sorted most-sensitive (most negative delta) first. The input network is
/// never modified.
pub fn layer_sensitivity(
    net: &Network,
    dataset: &Dataset,
    candidates: &[usize],
) -> Result<Vec<SensitivityRecord>> {
    layer_sensitivity_opts(net, dataset, candidates, &ProbeOptions::default())
}

pub fn layer_sensitivity_opts(
    net: &Network,
    dataset: &Dataset,
    candidates: &[usize],
    opts: &ProbeOptions,
) -> Result<Vec<SensitivityRecord>> {
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let baseline = evaluate(net, dataset)?.accuracy;
    let mut records = Vec::with_capacity(candidates.len());
    for &idx in candidates {
        if idx >= net.len() {
            return Err(Error::InvalidConfig(format!(
                "candidate layer {idx} out of range ({} layers)",
                net.len()
            )));
        }
        let layer = &net.layers()[idx];
        let probe = probe_plan(layer, opts.ranks)
            .map_err(|e| Error::PlanMismatch(format!("layer {idx}: {e}")))?;
        let mut plan = CompressionPlan::new(0.0);
        plan.set(idx, probe.clone());
        let slice = Slice::new(idx, idx + 1);
        let mut probed = net
            .tensorize_slice(slice, &plan)
            .map_err(|e| Error::PlanMismatch(format!("layer {idx}: {e}")))?;
        if let Some((train_ds, config)) = &opts.heal {
            let caches = capture_features(net, train_ds, &[slice], config.data_fraction, config.seed)?;
            let (healed, _) = distill_slice(
                probed.slice_layers(slice).to_vec(),
                slice.start,
                &caches[0],
                config,
                net.checksum()?,
            )?;
            probed = probed.replace_slice(slice, healed)?;
        }
        let accuracy = evaluate(&probed, dataset)
            .map_err(|e| Error::InvalidConfig(format!("layer {idx}: {e}")))?
            .accuracy;
        let shape = match layer {
            Layer::Dense { w, .. } => w.shape().to_vec(),
            Layer::Conv2d { k, .. } => k.shape().to_vec(),
            _ => unreachable!("probe_plan rejected non-tensorizable kinds"),
        };
        records.push(SensitivityRecord {
            layer: idx,
            shape,
            probe,
            accuracy,
            delta: accuracy - baseline,
        });
    }
    sort_by_delta(&mut records);
    Ok(records)
}

fn sort_by_delta(records: &mut [SensitivityRecord]) {
    records.sort_by(|a, b| {
        a.delta
            .partial_cmp(&b.delta)
            .unwrap()
            .then(a.layer.cmp(&b.layer))
    });
}

/// The `k` layers whose probe hurt accuracy the most.
pub fn select_exclusions(records: &[SensitivityRecord], k: usize) -> BTreeSet<usize> {
    let mut sorted = records.to_vec();
    sort_by_delta(&mut sorted);
    sorted.iter().take(k).map(|r| r.layer).collect()
}

pub fn sensitivity_csv(records: &[SensitivityRecord]) -> String {
    let mut out = String::from("layer,shape,probe,accuracy,delta\n");
    for r in records {
        let shape = r
            .shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        let probe = match &r.probe {
            LayerPlan::Skip => "skip".to_string(),
            LayerPlan::Mpo { bond, .. } => format!("mpo-bond{bond}"),
            LayerPlan::Tucker { r1, r2 } => format!("tucker-{r1}-{r2}"),
        };
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            r.layer, shape, probe, r.accuracy, r.delta
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Split;
    use crate::rng::Rng;
    use crate::tensor::Tensor;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(shape, |_| rng.normal())
    }

    /// A 16x16 dense weight whose (i1 j1)(i2 j2)-interleaved matrix has rank
    /// at most `r`, so a balanced 2-site MPO probe with bond >= r is exact.
    fn low_interleaved_rank(seed: u64, r: usize) -> Tensor {
        let a = random(&[16, r], seed);
        let b = random(&[r, 16], seed + 1);
        let m = a.matmul(&b).unwrap().scale(0.4);
        // un-interleave: W[row, col] = M[(row/4)*4 + col/4, (row%4)*4 + col%4]
        Tensor::from_fn(&[16, 16], |idx| {
            let (row, col) = (idx[0], idx[1]);
            m.get(&[(row / 4) * 4 + col / 4, (row % 4) * 4 + col % 4])
        })
    }

    /// A 4-dense-layer net where layer 6 (the third square dense) is
    /// engineered to be the only one hurt by half-rank probing: the other
    /// square layers are exactly representable at the probe bond.
    fn engineered_net_and_data() -> (Network, Dataset) {
        let mut rng = Rng::new(42);
        let w1 = low_interleaved_rank(100, 4);
        let w2 = low_interleaved_rank(200, 4);
        let w3 = random(&[16, 16], 300).scale(0.4); // full rank, sensitive
        let w_in = random(&[16, 4], 400).scale(0.6);
        let w_out = random(&[3, 16], 500).scale(0.6);
        let net = Network::new(
            vec![
                Layer::Dense {
                    w: w_in,
                    b: Some(Tensor::zeros(&[16])),
                },
                Layer::Relu,
                Layer::Dense {
                    w: w1,
                    b: Some(Tensor::zeros(&[16])),
                },
                Layer::Relu,
                Layer::Dense {
                    w: w2,
                    b: Some(Tensor::zeros(&[16])),
                },
                Layer::Relu,
                Layer::Dense {
                    w: w3,
                    b: Some(Tensor::zeros(&[16])),
                },
                Layer::Relu,
                Layer::Dense {
                    w: w_out,
                    b: Some(Tensor::zeros(&[3])),
                },
            ],
            vec![4],
        )
        .unwrap();
        // label by the net's own argmax: perfectly separable, accuracy 1.0
        let inputs = Tensor::from_fn(&[240, 4], |_| rng.normal());
        let logits = net.forward(&inputs).unwrap();
        let labels: Vec<usize> = (0..240)
            .map(|i| {
                let row = &logits.data()[i * 3..(i + 1) * 3];
                let mut arg = 0;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[arg] {
                        arg = c;
                    }
                }
                arg
            })
            .collect();
        let ds = Dataset::new(inputs, labels, Split::Test).unwrap();
        (net, ds)
    }

    #[test]
    fn full_rank_probe_has_zero_delta_everywhere() {
        let (net, ds) = engineered_net_and_data();
        let candidates = vec![2usize, 4, 6];
        let opts = ProbeOptions {
            ranks: ProbeRanks::Full,
            heal: None,
        };
        let records = layer_sensitivity_opts(&net, &ds, &candidates, &opts).unwrap();
        for r in &records {
            assert_eq!(r.delta, 0.0, "layer {} delta {}", r.layer, r.delta);
        }
    }

    #[test]
    fn probe_finds_the_engineered_sensitive_layer() {
        let (net, ds) = engineered_net_and_data();
        let baseline = evaluate(&net, &ds).unwrap().accuracy;
        assert_eq!(baseline, 1.0);

        let candidates = vec![2usize, 4, 6];
        let records = layer_sensitivity(&net, &ds, &candidates).unwrap();
        // most sensitive first
        assert_eq!(records[0].layer, 6);
        assert!(records[0].delta < 0.0);
        // the low-rank layers decompose exactly at half rank
        for r in &records[1..] {
            assert_eq!(r.delta, 0.0, "layer {} delta {}", r.layer, r.delta);
        }

        // exhaustive exclusion oracle: compressing all candidates except one
        // gives the best accuracy exactly when the sensitive layer is the
        // excluded one
        let mut best_excl = None;
        let mut best_acc = -1.0;
        for &excl in &candidates {
            let mut plan = CompressionPlan::new(0.0);
            for &idx in &candidates {
                if idx == excl {
                    continue;
                }
                plan.set(idx, probe_plan(&net.layers()[idx], ProbeRanks::Half).unwrap());
            }
            let probed = net.tensorize_slice(Slice::new(0, net.len()), &plan).unwrap();
            let acc = evaluate(&probed, &ds).unwrap().accuracy;
            if acc > best_acc {
                best_acc = acc;
                best_excl = Some(excl);
            }
        }
        assert_eq!(best_excl, Some(records[0].layer));
    }

    #[test]
    fn probe_does_not_modify_the_network() {
        let (net, ds) = engineered_net_and_data();
        let before = net.to_bytes().unwrap();
        let _ = layer_sensitivity(&net, &ds, &[2, 4, 6]).unwrap();
        assert_eq!(net.to_bytes().unwrap(), before);
    }

    #[test]
    fn empty_candidates_empty_report() {
        let (net, ds) = engineered_net_and_data();
        assert!(layer_sensitivity(&net, &ds, &[]).unwrap().is_empty());
    }

    #[test]
    fn select_exclusions_matches_manual_sort() {
        let records = vec![
            SensitivityRecord {
                layer: 1,
                shape: vec![4, 4],
                probe: LayerPlan::Skip,
                accuracy: 0.9,
                delta: -0.05,
            },
            SensitivityRecord {
                layer: 3,
                shape: vec![4, 4],
                probe: LayerPlan::Skip,
                accuracy: 0.7,
                delta: -0.25,
            },
            SensitivityRecord {
                layer: 5,
                shape: vec![4, 4],
                probe: LayerPlan::Skip,
                accuracy: 0.95,
                delta: 0.0,
            },
        ];
        assert!(select_exclusions(&records, 0).is_empty());
        assert_eq!(select_exclusions(&records, 1), BTreeSet::from([3]));
        assert_eq!(select_exclusions(&records, 2), BTreeSet::from([1, 3]));
        assert_eq!(select_exclusions(&records, 3), BTreeSet::from([1, 3, 5]));
    }

    #[test]
    fn healed_probe_runs() {
        let (net, ds) = engineered_net_and_data();
        let config = TrainConfig {
            epochs: 1,
            batch_size: 32,
            ..TrainConfig::local_default()
        };
        let opts = ProbeOptions {
            ranks: ProbeRanks::Half,
            heal: Some((ds.clone(), config)),
        };
        let records = layer_sensitivity_opts(&net, &ds, &[6], &opts).unwrap();
        assert_eq!(records.len(), 1);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let (net, ds) = engineered_net_and_data();
        let records = layer_sensitivity(&net, &ds, &[2, 6]).unwrap();
        let csv = sensitivity_csv(&records);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("layer,"));
    }
}
