//! Minibatch training: Adam on cross-entropy, deterministic given seed.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::{AblationVariant, PipelineConfig, PreparedExample};
use crate::rng::StreamRng;
use crate::scalar::Scalar;
use crate::tensor::graph::{Graph, Mode};
use crate::tensor::ParamStore;

use super::{forward_logits, prediction_from_logits};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 16,
            epochs: 30,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must be in [0, 1)".into()));
        }
        if self.lr < 0.0 || self.eps <= 0.0 {
            return Err(Error::Config("lr must be >= 0 and eps > 0".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction. Parameters without a gradient this step
/// (or matching a frozen prefix) are left untouched.
pub struct Adam<S> {
    lr: S,
    beta1: S,
    beta2: S,
    eps: S,
    step: i32,
    first: BTreeMap<String, Vec<S>>,
    second: BTreeMap<String, Vec<S>>,
    frozen_prefixes: Vec<String>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: &TrainConfig, frozen_prefixes: Vec<String>) -> Self {
        Adam {
            lr: S::from_f64(cfg.lr),
            beta1: S::from_f64(cfg.beta1),
            beta2: S::from_f64(cfg.beta2),
            eps: S::from_f64(cfg.eps),
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            frozen_prefixes,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<()> {
        self.step += 1;
        let t = self.step;
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            if self.frozen_prefixes.iter().any(|p| name.starts_with(p.as_str())) {
                continue;
            }
            let (beta1, beta2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| vec![S::zero(); store.get(&name).unwrap().numel()]);
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| vec![S::zero(); store.get(&name).unwrap().numel()]);
            store.update(&name, |data, grad| {
                let Some(grad) = grad else { return };
                let bc1 = S::one() - beta1.powi(t);
                let bc2 = S::one() - beta2.powi(t);
                for i in 0..data.len() {
                    let g = grad[i];
                    m[i] = beta1 * m[i] + (S::one() - beta1) * g;
                    v[i] = beta2 * v[i] + (S::one() - beta2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
                }
            })?;
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub dev_loss: Option<f64>,
    pub dev_acc: Option<f64>,
}

/// Eval-mode pass over a set: mean loss, accuracy, predictions and
/// per-class probabilities.
pub struct EvalPass {
    pub loss: f64,
    pub accuracy: f64,
    pub preds: Vec<usize>,
    pub probs: Vec<[f64; 3]>,
}

pub fn evaluate<S: Scalar>(
    store: &ParamStore<S>,
    examples: &[PreparedExample],
    cfg: &PipelineConfig,
    variant: AblationVariant,
) -> Result<EvalPass> {
    if examples.is_empty() {
        return Err(Error::data("evaluate on an empty example set"));
    }
    let mut rng = StreamRng::new(store.rng_seed(), "eval");
    let mut preds = Vec::with_capacity(examples.len());
    let mut probs = Vec::with_capacity(examples.len());
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for ex in examples {
        let mut graph = Graph::new();
        let logits = forward_logits(&mut graph, store, ex, cfg, variant, Mode::Eval, &mut rng)?;
        let loss = graph.cross_entropy(logits, &[ex.label.index()])?;
        loss_sum += graph.value(loss).item().as_f64();
        let pred = prediction_from_logits(graph.value(logits))?;
        if pred.label == ex.label {
            correct += 1;
        }
        preds.push(pred.label.index());
        probs.push(pred.probabilities);
    }
    Ok(EvalPass {
        loss: loss_sum / examples.len() as f64,
        accuracy: correct as f64 / examples.len() as f64,
        preds,
        probs,
    })
}

/// Minibatch gradient descent over the training set. Batches reshuffle
/// per epoch from the seed; the dropout stream is keyed by (seed, epoch)
/// so runs replay exactly. Non-finite losses abort with the epoch/batch
/// position.
pub fn train<S: Scalar>(
    store: &mut ParamStore<S>,
    train_set: &[PreparedExample],
    dev_set: &[PreparedExample],
    cfg: &PipelineConfig,
    variant: AblationVariant,
    tcfg: &TrainConfig,
) -> Result<Vec<EpochRecord>> {
    tcfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::data("train split is empty"));
    }
    let frozen = if cfg.freeze_encoders {
        vec!["text_enc.".to_string(), "vision_enc.".to_string()]
    } else {
        Vec::new()
    };
    let mut adam = Adam::new(tcfg, frozen);
    let mut log = Vec::with_capacity(tcfg.epochs);

    for epoch in 0..tcfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng = StreamRng::new(tcfg.seed, &format!("shuffle.epoch{epoch}"));
        shuffle_rng.shuffle(&mut order);
        let mut dropout_rng = StreamRng::new(tcfg.seed, &format!("dropout.epoch{epoch}"));

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (batch_no, batch) in order.chunks(tcfg.batch_size).enumerate() {
            let mut graph = Graph::new();
            let mut logit_rows = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &idx in batch {
                let ex = &train_set[idx];
                let logits = forward_logits(
                    &mut graph,
                    store,
                    ex,
                    cfg,
                    variant,
                    Mode::Train,
                    &mut dropout_rng,
                )
                .map_err(|e| at_position(e, epoch, batch_no))?;
                logit_rows.push(logits);
                labels.push(ex.label.index());
            }
            let stacked = graph.concat_rows(&logit_rows)?;
            let loss = graph
                .cross_entropy(stacked, &labels)
                .map_err(|e| at_position(e, epoch, batch_no))?;
            let loss_value = graph.value(loss).item().as_f64();
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged: non-finite loss at epoch {epoch} batch {batch_no}"
                )));
            }
            loss_sum += loss_value * batch.len() as f64;
            let logits_tensor = graph.value(stacked);
            for (row, &label) in labels.iter().enumerate() {
                let mut best = 0usize;
                for c in 1..3 {
                    if logits_tensor.at(row, c) > logits_tensor.at(row, best) {
                        best = c;
                    }
                }
                if best == label {
                    correct += 1;
                }
            }

            graph
                .backward_params(loss, store)
                .map_err(|e| at_position(e, epoch, batch_no))?;
            adam.step(store).map_err(|e| at_position(e, epoch, batch_no))?;
            store.zero_grads();
        }

        let (dev_loss, dev_acc) = if dev_set.is_empty() {
            (None, None)
        } else {
            let pass = evaluate(store, dev_set, cfg, variant)?;
            (Some(pass.loss), Some(pass.accuracy))
        };
        log.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_acc: correct as f64 / train_set.len() as f64,
            dev_loss,
            dev_acc,
        });
    }
    Ok(log)
}

fn at_position(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("epoch {epoch} batch {batch}: {msg}")),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::StanceLabel;
    use crate::encoders::vocab::TokenSeq;
    use crate::pipeline::init_params;
    use crate::tensor::Tensor;

    fn toy_cfg() -> PipelineConfig {
        PipelineConfig {
            encoder: crate::encoders::EncoderConfig {
                d_t: 8,
                d_v: 8,
                layers: 1,
                heads: 2,
                max_len: 16,
                image_size: 16,
                patch_size: 8,
                ffn_multiplier: 2,
                dropout_p: 0.0,
            },
            jtmo: crate::jtmo::JtmoConfig {
                width: 8,
                layers: 1,
                heads: 2,
                max_len: 16,
                ffn_multiplier: 2,
                dropout_p: 0.0,
                ..crate::jtmo::JtmoConfig::default()
            },
            fusion_d: 8,
            fusion_dropout_p: 0.0,
            ..PipelineConfig::default()
        }
    }

    fn example(label: StanceLabel, token: usize, brightness: f64) -> PreparedExample {
        let s = 16;
        let data = vec![brightness; 3 * s * s];
        PreparedExample {
            id: format!("ex-{token}"),
            label,
            summary: TokenSeq {
                ids: vec![token, token + 1],
                mask: vec![true; 2],
            },
            reply: TokenSeq {
                ids: vec![token],
                mask: vec![true],
            },
            caption: TokenSeq {
                ids: vec![token + 2],
                mask: vec![true],
            },
            image: crate::encoders::image::ImageTensor {
                pixels: Tensor::from_vec(vec![3, s, s], data).unwrap(),
                source_id: format!("img-{token}"),
            },
        }
    }

    fn tiny_set() -> Vec<PreparedExample> {
        vec![
            example(StanceLabel::Support, 4, 0.9),
            example(StanceLabel::Oppose, 8, 0.1),
            example(StanceLabel::Neutral, 12, 0.5),
            example(StanceLabel::Support, 4, 0.85),
            example(StanceLabel::Oppose, 8, 0.15),
            example(StanceLabel::Neutral, 12, 0.55),
        ]
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let cfg = toy_cfg();
        let mut store: ParamStore<f64> = init_params(&cfg, AblationVariant::Full, 20, 7).unwrap();
        let before: Vec<(String, Vec<u64>)> = store
            .iter()
            .map(|(n, t)| (n.to_string(), t.data().iter().map(|v| v.to_bits()).collect()))
            .collect();

        let tcfg = TrainConfig {
            lr: 0.0,
            epochs: 3,
            batch_size: 2,
            ..TrainConfig::default()
        };
        train(&mut store, &tiny_set(), &[], &cfg, AblationVariant::Full, &tcfg).unwrap();

        for (name, bits) in before {
            let after: Vec<u64> = store
                .get(&name)
                .unwrap()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            assert_eq!(bits, after, "{name} changed under lr=0");
        }
    }

    #[test]
    fn zero_epochs_keeps_the_initialization() {
        let cfg = toy_cfg();
        let mut store: ParamStore<f64> = init_params(&cfg, AblationVariant::Full, 20, 7).unwrap();
        let reference: ParamStore<f64> = init_params(&cfg, AblationVariant::Full, 20, 7).unwrap();
        let tcfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let log = train(&mut store, &tiny_set(), &[], &cfg, AblationVariant::Full, &tcfg).unwrap();
        assert!(log.is_empty());
        for (name, t) in reference.iter() {
            assert_eq!(store.get(name).unwrap().data(), t.data(), "{name}");
        }
    }

    #[test]
    fn loss_decreases_on_tiny_separable_set() {
        let cfg = toy_cfg();
        let mut store: ParamStore<f64> = init_params(&cfg, AblationVariant::Full, 20, 7).unwrap();
        let tcfg = TrainConfig {
            epochs: 40,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let log = train(&mut store, &tiny_set(), &[], &cfg, AblationVariant::Full, &tcfg).unwrap();
        let first = log.first().unwrap().train_loss;
        let last = log.last().unwrap().train_loss;
        assert!(last < first, "loss should fall: {first} -> {last}");
        assert!(log.last().unwrap().train_acc > 0.8, "{log:?}");
    }

    #[test]
    fn same_seed_gives_bit_identical_checkpoints() {
        let cfg = toy_cfg();
        let run = || {
            let mut store: ParamStore<f64> =
                init_params(&cfg, AblationVariant::Full, 20, 7).unwrap();
            let tcfg = TrainConfig {
                epochs: 4,
                batch_size: 2,
                ..TrainConfig::default()
            };
            train(&mut store, &tiny_set(), &[], &cfg, AblationVariant::Full, &tcfg).unwrap();
            store
                .iter()
                .map(|(n, t)| {
                    (
                        n.to_string(),
                        t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                    )
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn frozen_encoders_stay_fixed() {
        let cfg = PipelineConfig {
            freeze_encoders: true,
            ..toy_cfg()
        };
        let mut store: ParamStore<f64> = init_params(&cfg, AblationVariant::Full, 20, 7).unwrap();
        let frozen_before: Vec<u64> = store
            .get("text_enc.embed.tok")
            .unwrap()
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        let live_before: Vec<u64> = store
            .get("fusion.cls.w")
            .unwrap()
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();

        let tcfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::default()
        };
        train(&mut store, &tiny_set(), &[], &cfg, AblationVariant::Full, &tcfg).unwrap();

        let frozen_after: Vec<u64> = store
            .get("text_enc.embed.tok")
            .unwrap()
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        let live_after: Vec<u64> = store
            .get("fusion.cls.w")
            .unwrap()
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(frozen_before, frozen_after);
        assert_ne!(live_before, live_after);
    }
}
