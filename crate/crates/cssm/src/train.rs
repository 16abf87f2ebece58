//! Training loop (Adam + StepLR, combined CE + Lovász loss), evaluation,
//! prediction, and gradient×activation saliency.
//!
//! Training is sequential over samples and bitwise deterministic given a
//! seed; the per-epoch shuffle draws from an epoch-indexed RNG stream so a
//! resumed run replays the exact remaining schedule.

use crate::checkpoint::TensorEntry;
use crate::data::LoadedSample;
use crate::loss;
use crate::metrics::{self, ConfusionCounts, Metrics};
use crate::network::Model;
use crate::optim::{step_lr, Adam, AdamConfig};
use crate::rng::CounterRng;
use crate::ssm::ScanImpl;
use crate::tensor::{Tape, Tensor};
use std::collections::HashMap;

pub const TRAIN_LOG_HEADER: &str =
    "epoch,lr,loss,ce,lovasz,val_oa,val_precision,val_recall,val_f1,val_iou";

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// StepLR decay factor, applied every `step_every` epochs.
    pub gamma: f64,
    pub step_every: usize,
    pub seed: u64,
    pub scan: ScanImpl,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 8,
            lr: 1e-3,
            gamma: 0.5,
            step_every: 10,
            seed: 0,
            scan: ScanImpl::Sequential,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite value produced by op `{op}` (epoch {epoch}, sample {sample})")]
    NonFinite {
        op: String,
        epoch: usize,
        sample: usize,
    },
}

#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub ce: f64,
    pub lovasz: f64,
    pub val: Metrics,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6e},{:.6},{:.6},{:.6},{:.4},{:.4},{:.4},{:.4},{:.4}",
            self.epoch,
            self.lr,
            self.loss,
            self.ce,
            self.lovasz,
            self.val.oa,
            self.val.precision,
            self.val.recall,
            self.val.f1,
            self.val.iou
        )
    }
}

pub struct TrainResult {
    pub best_f1: f64,
    pub best_epoch: usize,
    /// Model tensors at the best-F1 epoch.
    pub best_tensors: Vec<TensorEntry>,
    pub adam: Adam<f32>,
    pub logs: Vec<EpochLog>,
}

/// Optimizer state + epoch position carried across a resume.
pub struct TrainState {
    pub adam: Adam<f32>,
    pub start_epoch: usize,
}

fn deterministic_shuffle(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = CounterRng::with_stream(seed, 10_000 + epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        idx.swap(i, j);
    }
    idx
}

/// Binary prediction (argmax over the two logit channels).
pub fn predict(model: &Model<f32>, scan: ScanImpl, s: &LoadedSample, h: usize, w: usize) -> Vec<u8> {
    let mut tape = Tape::new();
    let a = tape.leaf(&Tensor::new(vec![3, h, w], s.pre.clone()));
    let b = tape.leaf(&Tensor::new(vec![3, h, w], s.post.clone()));
    let y = model.forward(&mut tape, scan, a, b);
    let l = tape.value(y);
    let p = h * w;
    (0..p).map(|i| (l[p + i] > l[i]) as u8).collect()
}

/// Dataset-level metrics from integer confusion counts.
pub fn evaluate(
    model: &Model<f32>,
    scan: ScanImpl,
    set: &[LoadedSample],
    h: usize,
    w: usize,
) -> (Metrics, ConfusionCounts) {
    let mut counts = ConfusionCounts::default();
    for s in set {
        let pred = predict(model, scan, s, h, w);
        metrics::accumulate(&mut counts, &pred, &s.mask);
    }
    (metrics::metrics(&counts), counts)
}

/// Train `model` in place. `on_epoch` fires after each epoch with the log
/// line and the current optimizer (for periodic checkpointing).
pub fn train(
    model: &mut Model<f32>,
    train_set: &[LoadedSample],
    val_set: &[LoadedSample],
    h: usize,
    w: usize,
    tc: &TrainConfig,
    state: Option<TrainState>,
    on_epoch: &mut dyn FnMut(&EpochLog, &Model<f32>, &Adam<f32>),
) -> Result<TrainResult, TrainError> {
    assert!(!train_set.is_empty(), "empty training set");
    let (mut adam, start_epoch) = match state {
        Some(s) => (s.adam, s.start_epoch),
        None => (Adam::new(AdamConfig::default()), 0),
    };
    let mut id_to_name: HashMap<usize, String> = HashMap::new();
    model.visit(&mut |name, p| {
        id_to_name.insert(p.id, name);
    });

    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_tensors = crate::checkpoint::model_tensors(model);
    let mut logs = Vec::new();

    for epoch in start_epoch..tc.epochs {
        let lr = step_lr(tc.lr, tc.gamma, tc.step_every, epoch);
        let order = deterministic_shuffle(train_set.len(), tc.seed, epoch);
        let (mut ep_loss, mut ep_ce, mut ep_lov) = (0.0, 0.0, 0.0);

        for batch in order.chunks(tc.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut grads: HashMap<usize, Vec<f32>> = HashMap::new();
            for &si in batch {
                let s = &train_set[si];
                let mut tape: Tape<f32> = Tape::new();
                let a = tape.leaf(&Tensor::new(vec![3, h, w], s.pre.clone()));
                let b = tape.leaf(&Tensor::new(vec![3, h, w], s.post.clone()));
                let logits = model.forward(&mut tape, tc.scan, a, b);
                if let Some(op) = tape.first_nonfinite() {
                    return Err(TrainError::NonFinite {
                        op: op.to_string(),
                        epoch,
                        sample: si,
                    });
                }
                let ce = loss::cross_entropy(&mut tape, logits, &s.mask);
                let lov = loss::lovasz_softmax(&mut tape, logits, &s.mask);
                let total = tape.add(ce, lov);
                let scaled = tape.mul_scalar(total, scale as f32);
                tape.backward(scaled);
                if let Some(op) = tape.first_nonfinite() {
                    return Err(TrainError::NonFinite {
                        op: op.to_string(),
                        epoch,
                        sample: si,
                    });
                }
                ep_ce += tape.value(ce)[0] as f64;
                ep_lov += tape.value(lov)[0] as f64;
                ep_loss += tape.value(total)[0] as f64;
                for (id, g) in tape.param_grads() {
                    match grads.get_mut(&id) {
                        Some(acc) => {
                            for (a, &b) in acc.iter_mut().zip(g) {
                                *a += b;
                            }
                        }
                        None => {
                            grads.insert(id, g.to_vec());
                        }
                    }
                }
            }
            adam.begin_step();
            model.visit_mut(&mut |name, p| {
                if let Some(g) = grads.get(&p.id) {
                    adam.update(&name, &mut p.value.data, g, lr);
                }
            });
        }

        let n = train_set.len() as f64;
        let (val, _) = evaluate(model, tc.scan, val_set, h, w);
        let log = EpochLog {
            epoch,
            lr,
            loss: ep_loss / n,
            ce: ep_ce / n,
            lovasz: ep_lov / n,
            val,
        };
        if val.f1 > best_f1 {
            best_f1 = val.f1;
            best_epoch = epoch;
            best_tensors = crate::checkpoint::model_tensors(model);
        }
        on_epoch(&log, model, &adam);
        logs.push(log);
    }

    Ok(TrainResult {
        best_f1,
        best_epoch,
        best_tensors,
        adam,
        logs,
    })
}

/// Gradient×activation saliency at the pre-decoder feature map:
/// relu(Σ_c ∂(Σ changed-class logits)/∂a ⊙ a), min-max normalized (0/0
/// guarded), bilinearly upsampled to input resolution. Values in [0, 1].
pub fn saliency(
    model: &Model<f32>,
    scan: ScanImpl,
    s: &LoadedSample,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let mut tape: Tape<f32> = Tape::new();
    let a = tape.leaf(&Tensor::new(vec![3, h, w], s.pre.clone()));
    let b = tape.leaf(&Tensor::new(vec![3, h, w], s.post.clone()));
    let (logits, feat, (hf, wf)) = model.forward_features(&mut tape, scan, a, b);
    let changed = tape.narrow0(logits, 1, 1);
    let score = tape.sum(changed);
    tape.backward(score);
    let act = tape.value(feat).to_vec();
    let grad = tape.grad(feat);
    let c = act.len() / (hf * wf);
    let mut map = vec![0.0f64; hf * wf];
    for p in 0..hf * wf {
        let mut acc = 0.0f64;
        for ci in 0..c {
            acc += (grad[ci * hf * wf + p] * act[ci * hf * wf + p]) as f64;
        }
        map[p] = acc.max(0.0);
    }
    let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        for v in map.iter_mut() {
            *v = (*v - lo) / (hi - lo);
        }
    } else {
        map.iter_mut().for_each(|v| *v = 0.0);
    }
    bilinear_upsample(&map, hf, wf, h, w)
}

/// Bilinear resize of a single-plane map.
pub fn bilinear_upsample(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    assert_eq!(src.len(), sh * sw);
    let mut out = vec![0.0; dh * dw];
    for y in 0..dh {
        let fy = ((y as f64 + 0.5) * sh as f64 / dh as f64 - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let ty = fy - y0 as f64;
        for x in 0..dw {
            let fx = ((x as f64 + 0.5) * sw as f64 / dw as f64 - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * sw + x0] * (1.0 - tx) + src[y0 * sw + x1] * tx;
            let bot = src[y1 * sw + x0] * (1.0 - tx) + src[y1 * sw + x1] * tx;
            out[y * dw + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}
