//! Segmentation loss: cross-entropy plus Lovász-Softmax, summed 1:1.
//!
//! Both terms are recorded as custom tape ops with hand-derived backward
//! rules; the Lovász term treats the error sort order as constant, which is
//! the standard subgradient of the Jaccard extension.

use crate::scalar::Scalar;
use crate::tensor::{CustomOp, Tape, Var};

fn softmax2<F: Scalar>(l0: F, l1: F) -> (F, F) {
    let m = l0.max(l1);
    let e0 = (l0 - m).exp();
    let e1 = (l1 - m).exp();
    let z = e0 + e1;
    (e0 / z, e1 / z)
}

fn check_mask(mask: &[u8]) {
    for &m in mask {
        assert!(m <= 1, "mask value {m} outside {{0,1}}");
    }
}

struct CrossEntropyCtx<F> {
    mask: Vec<u8>,
    /// Softmax probabilities, `[2, P]`.
    probs: Vec<F>,
}

impl<F: Scalar> CustomOp<F> for CrossEntropyCtx<F> {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }
    fn backward(&self, grad_out: &[F], inputs: &[&[F]]) -> Vec<Vec<F>> {
        let p = self.mask.len();
        let g = grad_out[0] * F::from_f64(1.0 / p as f64);
        let mut dl = vec![F::zero(); inputs[0].len()];
        for i in 0..p {
            let y = self.mask[i] as usize;
            for c in 0..2 {
                let onehot = if c == y { F::one() } else { F::zero() };
                dl[c * p + i] = g * (self.probs[c * p + i] - onehot);
            }
        }
        vec![dl]
    }
}

/// Mean per-pixel negative log-likelihood of the true class.
/// `logits: [2, H, W]`, `mask: [H*W]` of {0, 1}.
pub fn cross_entropy<F: Scalar>(tape: &mut Tape<F>, logits: Var, mask: &[u8]) -> Var {
    check_mask(mask);
    let shape = tape.shape(logits).to_vec();
    assert_eq!(shape[0], 2, "expected 2-class logits");
    let p: usize = shape[1..].iter().product();
    assert_eq!(p, mask.len(), "mask size mismatch");
    let l = tape.value(logits);
    let mut probs = vec![F::zero(); 2 * p];
    let mut total = F::zero();
    for i in 0..p {
        let (p0, p1) = softmax2(l[i], l[p + i]);
        probs[i] = p0;
        probs[p + i] = p1;
        // stable -log softmax(class)
        let m = l[i].max(l[p + i]);
        let lse = m + ((l[i] - m).exp() + (l[p + i] - m).exp()).ln();
        let cls = if mask[i] == 0 { l[i] } else { l[p + i] };
        total = total + (lse - cls);
    }
    let loss = total * F::from_f64(1.0 / p as f64);
    let ctx = CrossEntropyCtx {
        mask: mask.to_vec(),
        probs,
    };
    tape.custom(&[logits], vec![1], vec![loss], Box::new(ctx))
}

/// Gradient of the Jaccard extension over sorted ground-truth indicators.
fn lovasz_grad<F: Scalar>(gt_sorted: &[u8]) -> Vec<F> {
    let n = gt_sorted.len();
    let gts: usize = gt_sorted.iter().map(|&x| x as usize).sum();
    let mut grad = vec![F::zero(); n];
    let mut inter = gts as f64;
    let mut union = gts as f64;
    let mut prev = 0.0f64;
    for i in 0..n {
        inter -= gt_sorted[i] as f64;
        union += 1.0 - gt_sorted[i] as f64;
        let jac = if union > 0.0 { 1.0 - inter / union } else { 0.0 };
        grad[i] = F::from_f64(jac - prev);
        prev = jac;
    }
    grad
}

struct LovaszCtx<F> {
    mask: Vec<u8>,
    probs: Vec<F>,
    /// Per present class: (class, sort permutation, Jaccard-extension grad).
    classes: Vec<(usize, Vec<usize>, Vec<F>)>,
    weight: F,
}

impl<F: Scalar> CustomOp<F> for LovaszCtx<F> {
    fn name(&self) -> &'static str {
        "lovasz_softmax"
    }
    fn backward(&self, grad_out: &[F], inputs: &[&[F]]) -> Vec<Vec<F>> {
        let p = self.mask.len();
        let g = grad_out[0] * self.weight;
        // dL/dp_c accumulated per pixel, then chained through softmax.
        let mut dprob = vec![F::zero(); 2 * p];
        for (c, perm, coef) in &self.classes {
            for (rank, &i) in perm.iter().enumerate() {
                // e_i = 1 - p_i(c) for gt pixels, p_i(c) otherwise
                let sign = if self.mask[i] as usize == *c {
                    -F::one()
                } else {
                    F::one()
                };
                dprob[c * p + i] = dprob[c * p + i] + g * coef[rank] * sign;
            }
        }
        let mut dl = vec![F::zero(); inputs[0].len()];
        for i in 0..p {
            let p0 = self.probs[i];
            let p1 = self.probs[p + i];
            // softmax jacobian: dp_c/dl_k = p_c (δ_ck − p_k)
            dl[i] = dprob[i] * p0 * (F::one() - p0) + dprob[p + i] * (-p1 * p0);
            dl[p + i] = dprob[i] * (-p0 * p1) + dprob[p + i] * p1 * (F::one() - p1);
        }
        vec![dl]
    }
}

/// Lovász-Softmax loss over the classes present in the ground truth.
pub fn lovasz_softmax<F: Scalar>(tape: &mut Tape<F>, logits: Var, mask: &[u8]) -> Var {
    check_mask(mask);
    let shape = tape.shape(logits).to_vec();
    assert_eq!(shape[0], 2);
    let p: usize = shape[1..].iter().product();
    assert_eq!(p, mask.len());
    assert!(p >= 1, "at least one pixel required");
    let l = tape.value(logits);
    let mut probs = vec![F::zero(); 2 * p];
    for i in 0..p {
        let (p0, p1) = softmax2(l[i], l[p + i]);
        probs[i] = p0;
        probs[p + i] = p1;
    }
    let present: Vec<usize> = (0..2)
        .filter(|&c| mask.iter().any(|&m| m as usize == c))
        .collect();
    let weight = F::from_f64(1.0 / present.len() as f64);
    let mut total = F::zero();
    let mut classes = Vec::new();
    for &c in &present {
        let errors: Vec<F> = (0..p)
            .map(|i| {
                if self_class(mask[i], c) {
                    F::one() - probs[c * p + i]
                } else {
                    probs[c * p + i]
                }
            })
            .collect();
        // descending sort, ties broken by index for determinism
        let mut perm: Vec<usize> = (0..p).collect();
        perm.sort_by(|&a, &b| {
            errors[b]
                .partial_cmp(&errors[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let gt_sorted: Vec<u8> = perm
            .iter()
            .map(|&i| (mask[i] as usize == c) as u8)
            .collect();
        let coef = lovasz_grad::<F>(&gt_sorted);
        let mut cls_loss = F::zero();
        for (rank, &i) in perm.iter().enumerate() {
            cls_loss = cls_loss + errors[i] * coef[rank];
        }
        total = total + cls_loss;
        classes.push((c, perm, coef));
    }
    let loss = total * weight;
    let ctx = LovaszCtx {
        mask: mask.to_vec(),
        probs,
        classes,
        weight,
    };
    tape.custom(&[logits], vec![1], vec![loss], Box::new(ctx))
}

fn self_class(m: u8, c: usize) -> bool {
    m as usize == c
}

/// `L_seg = L_CE + L_lov`, unweighted.
pub fn total_loss<F: Scalar>(tape: &mut Tape<F>, logits: Var, mask: &[u8]) -> Var {
    let ce = cross_entropy(tape, logits, mask);
    let lov = lovasz_softmax(tape, logits, mask);
    tape.add(ce, lov)
}
