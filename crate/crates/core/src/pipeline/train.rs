//! Deterministic Adam training on synthetic pairs.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalResult};
use crate::params::Parameterized;
use crate::pipeline::head::CLASS_NAMES;
use crate::pipeline::model::{LossBreakdown, Model, ModelParams};
use crate::pipeline::synth::{dataset, Split, SynthConfig, SynthSample};

/// Default step size. `1e-4` leaves the attention taps nearly frozen within
/// a 10-epoch desk-scale run.
pub const DEFAULT_LR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
        }
    }
}

/// Adam over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update; entries with `mask[i] == false` are left untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], mask: Option<&[bool]>) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() || mask.is_some_and(|m| m.len() != self.m.len()) {
            return Err(Error::shape(format!(
                "optimizer holds {} slots, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            let g = grads[i] + c.weight_decay * params[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub train_samples: usize,
    pub synth: SynthConfig,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 1,
            seed: 42,
            train_samples: 200,
            synth: SynthConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

/// Dataset means for one epoch. Epoch 0 is measured at initialization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: u64,
    pub total_loss: f64,
    pub detection_loss: f64,
    pub mean_lm: f64,
    pub lm_per_scale: Vec<f64>,
    pub distribution_gap_before: f64,
    pub distribution_gap_after: f64,
}

#[derive(Default)]
struct Accum {
    n: usize,
    total: f64,
    detection: f64,
    lm: Vec<f64>,
    gap_before: f64,
    gap_after: f64,
}

impl Accum {
    fn add(&mut self, l: &LossBreakdown) {
        self.n += 1;
        self.total += l.total;
        self.detection += l.detection;
        if self.lm.is_empty() {
            self.lm = vec![0.0; l.lm_per_scale.len()];
        }
        self.lm.iter_mut().zip(&l.lm_per_scale).for_each(|(a, b)| *a += b);
        self.gap_before += l.gap_before;
        self.gap_after += l.gap_after;
    }

    fn record(&self, epoch: usize, steps: u64) -> EpochRecord {
        let n = self.n.max(1) as f64;
        let lm_per_scale: Vec<f64> = self.lm.iter().map(|v| v / n).collect();
        EpochRecord {
            epoch,
            steps,
            total_loss: self.total / n,
            detection_loss: self.detection / n,
            mean_lm: lm_per_scale.iter().sum::<f64>() / lm_per_scale.len().max(1) as f64,
            lm_per_scale,
            distribution_gap_before: self.gap_before / n,
            distribution_gap_after: self.gap_after / n,
        }
    }
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
}

fn finite_or_diverged(l: &LossBreakdown, epoch: usize, step: u64) -> Result<()> {
    if l.total.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            epoch,
            step: step as usize,
            value: l.total,
        })
    }
}

/// Trains `model` in place on a seeded synthetic set, calling `on_epoch`
/// after every record.
pub fn train_with(
    model: &mut Model,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if cfg.batch == 0 || cfg.train_samples == 0 {
        return Err(Error::config("batch and train_samples must be positive"));
    }
    if !(cfg.adam.lr >= 0.0 && cfg.adam.lr.is_finite()) {
        return Err(Error::config(format!("lr must be finite and >= 0, got {}", cfg.adam.lr)));
    }
    let samples = dataset(cfg.seed, Split::Train, cfg.train_samples, &cfg.synth);
    train_on(model, cfg, &samples, &mut on_epoch)
}

pub fn train(model: &mut Model, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, cfg, |_| {})
}

fn train_on(
    model: &mut Model,
    cfg: &TrainConfig,
    samples: &[SynthSample],
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let mut mask = Vec::with_capacity(model.params.num_params());
    let probe = &model.params;
    probe.visit("", &mut |name, _, d| {
        let on = probe.is_trainable(&name);
        mask.extend(std::iter::repeat_n(on, d.len()));
    });
    let mut adam = Adam::new(cfg.adam, mask.len());
    let mut log = Vec::with_capacity(cfg.epochs + 1);

    let mut init = Accum::default();
    for s in samples {
        let l = model.total_loss(s)?;
        finite_or_diverged(&l, 0, 0)?;
        init.add(&l);
    }
    let rec = init.record(0, 0);
    on_epoch(&rec);
    log.push(rec);

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut flat = model.params.flat();
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        order.shuffle(&mut rng);
        let mut acc = Accum::default();
        for batch in order.chunks(cfg.batch) {
            let mut grad = vec![0.0; flat.len()];
            for &i in batch {
                let (l, g) = model.loss_and_grad(&samples[i])?;
                finite_or_diverged(&l, epoch, adam.steps() + 1)?;
                acc.add(&l);
                let mut at = 0;
                g.visit("", &mut |_, _, d| {
                    grad[at..at + d.len()].iter_mut().zip(d).for_each(|(a, b)| *a += b);
                    at += d.len();
                });
            }
            let inv = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            adam.step(&mut flat, &grad, Some(&mask))?;
            if let Some(bad) = flat.iter().position(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step: adam.steps() as usize,
                    value: flat[bad],
                });
            }
            model.params.set_flat(&flat)?;
        }
        let rec = acc.record(epoch, adam.steps());
        on_epoch(&rec);
        log.push(rec);
    }
    Ok(TrainOutcome {
        params: model.params.clone(),
        log,
    })
}

/// Detection quality on a seeded held-out synthetic set.
pub fn evaluate_model(model: &Model, seed: u64, count: usize, synth: &SynthConfig) -> Result<EvalResult> {
    let samples = dataset(seed, Split::Test, count, synth);
    let mut images = Vec::with_capacity(samples.len());
    for s in &samples {
        images.push((model.detect(&s.visible, &s.infrared)?, s.boxes.clone()));
    }
    evaluate(&images, &CLASS_NAMES)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::encoder::EncoderConfig;
    use crate::pipeline::model::ModelConfig;

    #[test]
    fn single_step_matches_hand_computation() {
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.5,
        };
        let mut adam = Adam::new(cfg, 2);
        let mut p = vec![1.0, -2.0];
        adam.step(&mut p, &[0.2, 0.0], None).unwrap();
        // g' = g + wd * p = [0.7, -1.0]; m_hat = g', v_hat = g'^2 → step = lr * sign
        let expect = [1.0 - 0.1 * 0.7 / (0.7 + 1e-8), -2.0 + 0.1 * 1.0 / (1.0 + 1e-8)];
        assert!((p[0] - expect[0]).abs() < 1e-15 && (p[1] - expect[1]).abs() < 1e-15);
        // second step by hand
        adam.step(&mut p, &[0.2, 0.0], None).unwrap();
        let mut q = expect;
        let g0 = [0.7, -1.0];
        for (i, q) in q.iter_mut().enumerate() {
            let g = [0.2, 0.0][i] + 0.5 * *q;
            let m = 0.9 * 0.1 * g0[i] + 0.1 * g;
            let v = 0.999 * 0.001 * g0[i] * g0[i] + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.81);
            let v_hat = v / (1.0 - 0.999f64 * 0.999);
            *q -= 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        }
        assert!((p[0] - q[0]).abs() < 1e-14 && (p[1] - q[1]).abs() < 1e-14);
    }

    #[test]
    fn masked_entries_untouched() {
        let mut adam = Adam::new(AdamConfig::default(), 2);
        let mut p = vec![1.0, 1.0];
        adam.step(&mut p, &[1.0, 1.0], Some(&[true, false])).unwrap();
        assert!(p[0] < 1.0);
        assert_eq!(p[1], 1.0);
    }

    fn tiny() -> (Model, TrainConfig) {
        let mcfg = ModelConfig {
            encoder: EncoderConfig::with_scales(2),
            image_size: 16,
            head_hidden: 8,
            ..ModelConfig::default()
        };
        let tcfg = TrainConfig {
            epochs: 2,
            batch: 3,
            train_samples: 6,
            synth: SynthConfig {
                image_size: 16,
                min_radius: 2.5,
                max_radius: 4.0,
                ..SynthConfig::default()
            },
            ..TrainConfig::default()
        };
        (Model::new(mcfg, 7).unwrap(), tcfg)
    }

    #[test]
    fn zero_lr_leaves_params() {
        let (mut m, mut cfg) = tiny();
        cfg.adam.lr = 0.0;
        cfg.adam.weight_decay = 0.0;
        let before = m.params.clone();
        let out = train(&mut m, &cfg).unwrap();
        assert_eq!(out.params, before);
        assert_eq!(out.log.len(), 3);
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let run = || {
            let (mut m, cfg) = tiny();
            let out = train(&mut m, &cfg).unwrap();
            (serde_json::to_string(&out.log).unwrap(), out.params)
        };
        let (a, b) = (run(), run());
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn frozen_fusion_stays_fixed() {
        let (mut m, cfg) = tiny();
        let before = m.params.wdaf[0].clone();
        let out = train(&mut m, &cfg).unwrap();
        assert_eq!(out.params.wdaf[0], before);
        assert_ne!(out.params.wdaf[1], Model::new(m.config.clone(), 7).unwrap().params.wdaf[1]);
    }

    #[test]
    fn divergence_is_reported() {
        let (mut m, mut cfg) = tiny();
        cfg.adam.lr = f64::MAX;
        match train(&mut m, &cfg) {
            Err(Error::Diverged { epoch, step, .. }) => assert_eq!((epoch, step), (1, 2)),
            other => panic!("expected divergence, got {:?}", other.map(|o| o.log)),
        }
    }
}
