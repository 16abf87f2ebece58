//! Confusion-count accumulation and the evaluation metrics derived from it
//! (OA, Precision, Recall, F1, IoU, all in percent, 0/0 -> 0).

/// Pixel counts for the "changed" class. Integer sums, so batch merging is
/// associative and order-independent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

/// Accumulate one image pair of binary masks into `counts`.
pub fn accumulate(counts: &mut ConfusionCounts, pred: &[u8], truth: &[u8]) {
    assert_eq!(pred.len(), truth.len(), "mask shape mismatch");
    for (&p, &t) in pred.iter().zip(truth) {
        assert!(p <= 1 && t <= 1, "masks must be binary");
        match (p, t) {
            (1, 1) => counts.tp += 1,
            (1, 0) => counts.fp += 1,
            (0, 0) => counts.tn += 1,
            (0, 1) => counts.fn_ += 1,
            _ => unreachable!(),
        }
    }
}

/// Metric values in percent.
#[derive(Clone, Copy, Debug, Default)]
pub struct Metrics {
    pub oa: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// OA = (TP+TN)/all, Pre = TP/(TP+FP), Rec = TP/(TP+FN),
/// F1 = 2·Pre·Rec/(Pre+Rec), IoU = TP/(TP+FP+FN); 0/0 -> 0.
pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let pre = ratio(c.tp, c.tp + c.fp);
    let rec = ratio(c.tp, c.tp + c.fn_);
    let f1 = if pre + rec == 0.0 {
        0.0
    } else {
        2.0 * pre * rec / (pre + rec)
    };
    let iou = ratio(c.tp, c.tp + c.fp + c.fn_);
    Metrics {
        oa: 100.0 * ratio(c.tp + c.tn, c.total()),
        precision: 100.0 * pre,
        recall: 100.0 * rec,
        f1: 100.0 * f1,
        iou: 100.0 * iou,
    }
}

/// Header for the metrics CSV emitted by the CLI.
pub const METRICS_CSV_HEADER: &str = "run,dataset,variant,L,metric_name,value";

/// One row per metric, matching `METRICS_CSV_HEADER`.
pub fn metrics_csv_rows(run: &str, dataset: &str, variant: &str, l: usize, m: &Metrics) -> String {
    let mut out = String::new();
    for (name, value) in [
        ("oa", m.oa),
        ("precision", m.precision),
        ("recall", m.recall),
        ("f1", m.f1),
        ("iou", m.iou),
    ] {
        out.push_str(&format!("{run},{dataset},{variant},{l},{name},{value:.6}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction() {
        let mut c = ConfusionCounts::default();
        let truth = vec![1u8, 1, 0, 0];
        accumulate(&mut c, &truth, &truth);
        let m = metrics(&c);
        assert_eq!(m.oa, 100.0);
        assert_eq!(m.f1, 100.0);
        assert_eq!(m.iou, 100.0);
    }

    #[test]
    fn hand_derived_example() {
        let c = ConfusionCounts {
            tp: 94,
            fp: 5,
            tn: 896,
            fn_: 5,
        };
        let m = metrics(&c);
        assert!((m.precision - 94.95).abs() < 0.005, "{}", m.precision);
        assert!((m.recall - 94.95).abs() < 0.005);
        assert!((m.f1 - 94.95).abs() < 0.005);
        assert!((m.oa - 99.00).abs() < 0.005);
        assert!((m.iou - 90.38).abs() < 0.005);
    }

    #[test]
    fn degenerate_all_unchanged() {
        let mut c = ConfusionCounts::default();
        accumulate(&mut c, &[0, 0, 0], &[0, 0, 0]);
        let m = metrics(&c);
        assert_eq!(m.precision, 0.0);
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.f1, 0.0);
        assert_eq!(m.iou, 0.0);
        assert_eq!(m.oa, 100.0);
    }

    #[test]
    fn merge_is_order_independent() {
        let mut a = ConfusionCounts::default();
        accumulate(&mut a, &[1, 0], &[1, 1]);
        let mut b = ConfusionCounts::default();
        accumulate(&mut b, &[0, 1], &[0, 0]);
        let mut ab = a;
        ab.merge(&b);
        let mut ba = b;
        ba.merge(&a);
        assert_eq!(ab, ba);
    }

    proptest! {
        /// IoU = F1 / (2 - F1), exact in rational arithmetic:
        /// both reduce to tp / (tp + fp + fn).
        #[test]
        fn iou_f1_identity(tp in 0u64..10_000, fp in 0u64..10_000, fn_ in 0u64..10_000, tn in 0u64..10_000) {
            let c = ConfusionCounts { tp, fp, tn, fn_ };
            let m = metrics(&c);
            let f1 = m.f1 / 100.0;
            let iou = m.iou / 100.0;
            let derived = if f1 == 0.0 { 0.0 } else { f1 / (2.0 - f1) };
            prop_assert!((iou - derived).abs() < 1e-12);
            // exact rational check: iou_num/iou_den == tp/(tp+fp+fn)
            if tp + fp + fn_ > 0 {
                let lhs = (tp as u128) * ((2 * tp + fp + fn_) as u128 - tp as u128);
                let rhs = (tp as u128) * ((tp + fp + fn_) as u128);
                prop_assert_eq!(lhs, rhs);
            }
        }

        #[test]
        fn accumulate_associative(masks in proptest::collection::vec((0u8..2, 0u8..2), 1..200)) {
            let pred: Vec<u8> = masks.iter().map(|&(p, _)| p).collect();
            let truth: Vec<u8> = masks.iter().map(|&(_, t)| t).collect();
            let mut whole = ConfusionCounts::default();
            accumulate(&mut whole, &pred, &truth);
            let split = pred.len() / 2;
            let mut left = ConfusionCounts::default();
            accumulate(&mut left, &pred[..split], &truth[..split]);
            let mut right = ConfusionCounts::default();
            accumulate(&mut right, &pred[split..], &truth[split..]);
            left.merge(&right);
            prop_assert_eq!(whole, left);
            prop_assert_eq!(whole.total() as usize, pred.len());
        }
    }
}
