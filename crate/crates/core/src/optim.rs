//! Adam and training configuration.
//!
//! Default hyperparameters mirror the tuned values of the training protocol:
//! slice-local healing uses batch 8 with learning rate 1e-3 (the harder
//! multi-class analog prefers 5e-4), global fine-tuning uses batch 16 with
//! learning rate 5e-4. Both are plain fields, not hard-coded anywhere.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Layer;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

/// Configuration for one local or global training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// 0 is allowed and means "no optimization steps".
    pub epochs: usize,
    pub seed: u64,
    pub loss: LossKind,
    /// Fraction of the available samples to use, in (0, 1].
    pub data_fraction: f64,
    /// Train every parameter instead of only the tensorized ones.
    #[serde(default)]
    pub train_all: bool,
}

impl TrainConfig {
    /// Slice-local healing defaults (batch 8, lr 1e-3, MSE).
    pub fn local_default() -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 1e-3,
            epochs: 5,
            seed: 0,
            loss: LossKind::Mse,
            data_fraction: 1.0,
            train_all: false,
        }
    }

    /// Global fine-tuning defaults (batch 16, lr 5e-4, cross entropy).
    pub fn global_default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 5e-4,
            epochs: 5,
            seed: 0,
            loss: LossKind::CrossEntropy,
            data_fraction: 1.0,
            train_all: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".to_string());
        }
        if !(self.learning_rate > 0.0) {
            problems.push(format!("learning_rate must be > 0, got {}", self.learning_rate));
        }
        if !(0.0 < self.data_fraction && self.data_fraction <= 1.0) {
            problems.push(format!(
                "data_fraction must be in (0, 1], got {}",
                self.data_fraction
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(problems.join("; ")))
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }
}

const ADAM_MAGIC: &[u8; 4] = b"TSAD";
const ADAM_VERSION: u32 = 1;

/// Bias-corrected Adam. Moments are keyed by parameter name; iteration over
/// the map is ordered, so updates apply in deterministic name order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over the named gradients. Parameters without a gradient
    /// entry are left untouched (that is how freezing works).
    pub fn apply(
        &mut self,
        layers: &mut [Layer],
        base_idx: usize,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut failure: Option<Error> = None;
        for (offset, layer) in layers.iter_mut().enumerate() {
            let idx = base_idx + offset;
            layer.visit_params_mut(idx, &mut |name, param| {
                if failure.is_some() {
                    return;
                }
                let Some(g) = grads.get(&name) else { return };
                if g.shape() != param.shape() {
                    failure = Some(Error::ShapeMismatch(format!(
                        "gradient {:?} vs parameter {:?} for {name}",
                        g.shape(),
                        param.shape()
                    )));
                    return;
                }
                let m = self
                    .m
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(param.shape()));
                let v = self
                    .v
                    .entry(name.clone())
                    .or_insert_with(|| Tensor::zeros(param.shape()));
                if m.shape() != param.shape() || v.shape() != param.shape() {
                    failure = Some(Error::ShapeMismatch(format!(
                        "adam moment shape drifted for {name}"
                    )));
                    return;
                }
                for i in 0..param.len() {
                    let gi = g.data()[i];
                    let mi = self.beta1 * m.data()[i] + (1.0 - self.beta1) * gi;
                    let vi = self.beta2 * v.data()[i] + (1.0 - self.beta2) * gi * gi;
                    m.data_mut()[i] = mi;
                    v.data_mut()[i] = vi;
                    let m_hat = mi / bc1;
                    let v_hat = vi / bc2;
                    param.data_mut()[i] -=
                        self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
                }
            });
        }
        match failure {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(ADAM_MAGIC)?;
        w.write_all(&ADAM_VERSION.to_le_bytes())?;
        for x in [self.learning_rate, self.beta1, self.beta2, self.epsilon] {
            w.write_all(&x.to_le_bytes())?;
        }
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.m.len() as u32).to_le_bytes())?;
        for (name, m) in &self.m {
            let v = &self.v[name];
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            m.write_to(w)?;
            v.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<AdamState> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != ADAM_MAGIC {
            return Err(Error::Format("bad optimizer state magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != ADAM_VERSION {
            return Err(Error::Version {
                found: version,
                expected: ADAM_VERSION,
            });
        }
        let mut b8 = [0u8; 8];
        let mut next_f64 = |r: &mut R| -> Result<f64> {
            r.read_exact(&mut b8)?;
            Ok(f64::from_le_bytes(b8))
        };
        let learning_rate = next_f64(r)?;
        let beta1 = next_f64(r)?;
        let beta2 = next_f64(r)?;
        let epsilon = next_f64(r)?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let step = u64::from_le_bytes(b8);
        r.read_exact(&mut b4)?;
        let count = u32::from_le_bytes(b4) as usize;
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for _ in 0..count {
            r.read_exact(&mut b4)?;
            let len = u32::from_le_bytes(b4) as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
            m.insert(name.clone(), Tensor::read_from(r)?);
            v.insert(name, Tensor::read_from(r)?);
        }
        Ok(AdamState {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            step,
            m,
            v,
        })
    }
}
