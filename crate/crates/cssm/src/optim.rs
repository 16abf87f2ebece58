//! Adam with bias correction, moments keyed by parameter name so optimizer
//! state serializes into the checkpoint tensor table.

use crate::checkpoint::TensorEntry;
use crate::scalar::Scalar;
use std::collections::HashMap;

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam<F> {
    pub cfg: AdamConfig,
    pub step: u64,
    m: HashMap<String, Vec<F>>,
    v: HashMap<String, Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Advance the shared step counter; call once per batch, before the
    /// per-tensor updates of that batch.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, name: &str, value: &mut [F], grad: &[F], lr: f64) {
        assert_eq!(value.len(), grad.len(), "grad length mismatch for {name}");
        assert!(self.step > 0, "begin_step before update");
        let b1 = F::from_f64(self.cfg.beta1);
        let b2 = F::from_f64(self.cfg.beta2);
        let eps = F::from_f64(self.cfg.eps);
        let one = F::one();
        let c1 = F::from_f64(1.0 - self.cfg.beta1.powi(self.step as i32));
        let c2 = F::from_f64(1.0 - self.cfg.beta2.powi(self.step as i32));
        let lr = F::from_f64(lr);
        let m = self
            .m
            .entry(name.to_string())
            .or_insert_with(|| vec![F::zero(); value.len()]);
        let v = self
            .v
            .entry(name.to_string())
            .or_insert_with(|| vec![F::zero(); value.len()]);
        for i in 0..value.len() {
            m[i] = b1 * m[i] + (one - b1) * grad[i];
            v[i] = b2 * v[i] + (one - b2) * grad[i] * grad[i];
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            value[i] = value[i] - lr * mhat / (vhat.sqrt() + eps);
        }
    }

    /// Serialize as checkpoint tensor entries: `step` scalar plus
    /// `m.<name>` / `v.<name>` moment tensors.
    pub fn to_entries(&self) -> Vec<TensorEntry> {
        let mut out = vec![TensorEntry {
            name: "step".into(),
            shape: vec![1],
            data: vec![self.step as f32],
        }];
        let mut names: Vec<&String> = self.m.keys().collect();
        names.sort();
        for name in names {
            for (prefix, table) in [("m", &self.m), ("v", &self.v)] {
                let data = &table[name];
                out.push(TensorEntry {
                    name: format!("{prefix}.{name}"),
                    shape: vec![data.len()],
                    data: data.iter().map(|&x| Scalar::to_f64(x) as f32).collect(),
                });
            }
        }
        out
    }

    pub fn from_entries(cfg: AdamConfig, entries: &[TensorEntry]) -> Result<Adam<F>, String> {
        let mut adam = Adam::new(cfg);
        for e in entries {
            if e.name == "step" {
                adam.step = e.data.first().copied().ok_or("empty step tensor")? as u64;
            } else if let Some(name) = e.name.strip_prefix("m.") {
                adam.m
                    .insert(name.into(), e.data.iter().map(|&x| F::from_f64(x as f64)).collect());
            } else if let Some(name) = e.name.strip_prefix("v.") {
                adam.v
                    .insert(name.into(), e.data.iter().map(|&x| F::from_f64(x as f64)).collect());
            } else {
                return Err(format!("unknown optimizer entry {}", e.name));
            }
        }
        if adam.m.len() != adam.v.len() {
            return Err("optimizer moments incomplete".into());
        }
        Ok(adam)
    }
}

/// StepLR: `lr0 * gamma^(epoch / step_every)`.
pub fn step_lr(lr0: f64, gamma: f64, step_every: usize, epoch: usize) -> f64 {
    lr0 * gamma.powi((epoch / step_every.max(1)) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_reference_recurrence() {
        // Independent transcription of the Adam update on a 1-D quadratic
        // loss f(x) = x^2 / 2, gradient x.
        let cfg = AdamConfig::default();
        let mut adam: Adam<f64> = Adam::new(cfg);
        let mut x = [1.0f64];
        let (mut rm, mut rv, mut rx) = (0.0f64, 0.0f64, 1.0f64);
        let lr = 0.01;
        for t in 1..=25 {
            let g = x[0];
            adam.begin_step();
            adam.update("x", &mut x, &[g], lr);

            let rg = rx;
            rm = 0.9 * rm + 0.1 * rg;
            rv = 0.999 * rv + 0.001 * rg * rg;
            let mh = rm / (1.0 - 0.9f64.powi(t));
            let vh = rv / (1.0 - 0.999f64.powi(t));
            rx -= lr * mh / (vh.sqrt() + 1e-8);
            assert!((x[0] - rx).abs() < 1e-14, "step {t}: {} vs {rx}", x[0]);
        }
        assert!(x[0] < 1.0);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // With bias correction, |Δx| ≈ lr on step 1 regardless of grad scale.
        for g in [1e-4, 1.0, 1e4] {
            let mut adam: Adam<f64> = Adam::new(AdamConfig::default());
            let mut x = [0.0f64];
            adam.begin_step();
            adam.update(&format!("x{g}"), &mut x, &[g], 0.001);
            assert!((x[0].abs() - 0.001).abs() < 1e-6, "grad {g}: moved {}", x[0]);
        }
    }

    #[test]
    fn entries_round_trip() {
        let mut adam: Adam<f32> = Adam::new(AdamConfig::default());
        let mut a = [1.0f32, 2.0];
        let mut b = [0.5f32];
        for _ in 0..3 {
            adam.begin_step();
            adam.update("a", &mut a, &[0.1, -0.2], 0.01);
            adam.update("b", &mut b, &[0.3], 0.01);
        }
        let entries = adam.to_entries();
        let restored: Adam<f32> = Adam::from_entries(AdamConfig::default(), &entries).unwrap();
        assert_eq!(restored.step, adam.step);
        // identical state must produce identical subsequent updates
        let (mut a1, mut a2) = (a, a);
        let mut x = adam.clone();
        let mut y = restored;
        x.begin_step();
        y.begin_step();
        x.update("a", &mut a1, &[0.05, 0.05], 0.01);
        y.update("a", &mut a2, &[0.05, 0.05], 0.01);
        assert_eq!(a1, a2);
    }

    #[test]
    fn step_lr_schedule() {
        assert_eq!(step_lr(1e-3, 0.5, 10, 0), 1e-3);
        assert_eq!(step_lr(1e-3, 0.5, 10, 9), 1e-3);
        assert_eq!(step_lr(1e-3, 0.5, 10, 10), 5e-4);
        assert_eq!(step_lr(1e-3, 0.5, 10, 25), 2.5e-4);
    }

    #[test]
    fn unknown_entry_rejected() {
        let entries = vec![TensorEntry {
            name: "bogus".into(),
            shape: vec![1],
            data: vec![0.0],
        }];
        assert!(Adam::<f32>::from_entries(AdamConfig::default(), &entries).is_err());
    }
}
