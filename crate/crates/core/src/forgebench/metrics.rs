//! Challenge metrics: detection AUC, localization F1 and IoU (IoU over
//! forged samples only), and the overall score (their mean).

use crate::error::{Error, Result};

/// Mann–Whitney AUC: P(score_pos > score_neg) + ½·P(tie), computed through
/// tie-averaged ranks. Needs at least one positive and one negative label.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc: scores/labels length mismatch".to_string()));
    }
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::data("auc needs both classes present".to_string()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // Tie-averaged ranks (1-based).
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let r_pos: f64 = ranks.iter().zip(labels).filter(|(_, &l)| l != 0).map(|(r, _)| r).sum();
    let u = r_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

fn confusion(pred: &[u8], gt: &[u8]) -> (usize, usize, usize) {
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for (&p, &g) in pred.iter().zip(gt) {
        match (p != 0, g != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    (tp, fp, fn_)
}

/// Per-image pixel F1 = 2TP/(2TP+FP+FN); defined as 1.0 when both masks are
/// empty.
pub fn pixel_f1(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("pixel_f1: mask shape mismatch".to_string()));
    }
    let (tp, fp, fn_) = confusion(pred, gt);
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// Per-image IoU = TP/(TP+FP+FN); 1.0 when both masks are empty (unused in
/// the fake-only aggregate, where ground truth is never empty).
pub fn pixel_iou(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape("pixel_iou: mask shape mismatch".to_string()));
    }
    let (tp, fp, fn_) = confusion(pred, gt);
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(tp as f64 / (tp + fp + fn_) as f64)
}

/// Mean per-image F1 over all samples (macro averaging, the default
/// aggregation), or micro: one confusion pool over every pixel.
pub fn aggregate_f1(pairs: &[(Vec<u8>, Vec<u8>)], micro: bool) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::data("aggregate_f1 on empty split".to_string()));
    }
    if micro {
        let mut acc = (0usize, 0usize, 0usize);
        for (p, g) in pairs {
            let (tp, fp, fn_) = confusion(p, g);
            acc = (acc.0 + tp, acc.1 + fp, acc.2 + fn_);
        }
        if acc.0 + acc.1 + acc.2 == 0 {
            return Ok(1.0);
        }
        return Ok(2.0 * acc.0 as f64 / (2 * acc.0 + acc.1 + acc.2) as f64);
    }
    let mut sum = 0.0;
    for (p, g) in pairs {
        sum += pixel_f1(p, g)?;
    }
    Ok(sum / pairs.len() as f64)
}

/// Mean IoU over forged samples only; errors when no forged sample exists.
pub fn iou_fake_only(pairs: &[(Vec<u8>, Vec<u8>, bool)]) -> Result<f64> {
    let forged: Vec<_> = pairs.iter().filter(|(_, _, is_forged)| *is_forged).collect();
    if forged.is_empty() {
        return Err(Error::data("iou_fake_only: no forged samples in split".to_string()));
    }
    let mut sum = 0.0;
    for (p, g, _) in &forged {
        sum += pixel_iou(p, g)?;
    }
    Ok(sum / forged.len() as f64)
}

/// Arithmetic mean of the three scores.
pub fn overall(auc: f64, f1: f64, iou: f64) -> Result<f64> {
    for (name, v) in [("auc", auc), ("f1", f1), ("iou", iou)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::numeric(format!("{name} value {v} outside [0,1]")));
        }
    }
    Ok((auc + f1 + iou) / 3.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub auc: f64,
    pub f1: f64,
    pub iou: f64,
    pub overall: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl MetricsReport {
    /// Flat key-value document with fixed key names.
    pub fn render(&self) -> String {
        format!(
            "auc = {:.6}\nf1 = {:.6}\niou = {:.6}\noverall = {:.6}\nn_train = {}\nn_val = {}\nn_test = {}\n",
            self.auc, self.f1, self.iou, self.overall, self.n_train, self.n_val, self.n_test
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::stream;
    use rand::Rng;

    #[test]
    fn auc_frozen_cases() {
        // Perfect separation.
        assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        // All ties → 0.5.
        assert_eq!(auc(&[0.5, 0.5, 0.5], &[1, 0, 1]).unwrap(), 0.5);
        // Pairwise oracle: scores (0.4 neg, 0.3 pos, 0.9 pos): pairs
        // (0.3 vs 0.4) loses, (0.9 vs 0.4) wins → 0.5.
        assert_eq!(auc(&[0.4, 0.3, 0.9], &[0, 1, 1]).unwrap(), 0.5);
        // Single-class input errors.
        assert!(auc(&[0.4, 0.6], &[1, 1]).is_err());
    }

    #[test]
    fn auc_invariant_under_monotone_transforms() {
        let mut rng = stream(120, "auc");
        let scores: Vec<f64> = (0..50).map(|_| rng.random::<f64>()).collect();
        let labels: Vec<u8> = (0..50).map(|_| (rng.random::<u64>() % 2) as u8).collect();
        let base = auc(&scores, &labels).unwrap();
        let exp_scores: Vec<f64> = scores.iter().map(|&s| s.exp()).collect();
        let aff_scores: Vec<f64> = scores.iter().map(|&s| 3.0 * s + 7.0).collect();
        assert!((auc(&exp_scores, &labels).unwrap() - base).abs() < 1e-12);
        assert!((auc(&aff_scores, &labels).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn auc_matches_pairwise_counting_oracle() {
        let mut rng = stream(121, "auc-oracle");
        for _ in 0..50 {
            let n = 3 + (rng.random::<u64>() % 20) as usize;
            let scores: Vec<f64> = (0..n).map(|_| (rng.random::<u64>() % 8) as f64 / 8.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| (rng.random::<u64>() % 2) as u8).collect();
            labels[0] = 1;
            labels[n - 1] = 0;
            let got = auc(&scores, &labels).unwrap();
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if labels[i] != 0 && labels[j] == 0 {
                        den += 1.0;
                        if scores[i] > scores[j] {
                            num += 1.0;
                        } else if scores[i] == scores[j] {
                            num += 0.5;
                        }
                    }
                }
            }
            assert!((got - num / den).abs() < 1e-12);
        }
    }

    #[test]
    fn f1_iou_frozen_cases() {
        let a = vec![1u8, 1, 0, 0];
        assert_eq!(pixel_f1(&a, &a).unwrap(), 1.0);
        let b = vec![0u8, 0, 1, 1];
        assert_eq!(pixel_f1(&a, &b).unwrap(), 0.0);
        // pred 2 px, gt 2 px, 1 shared → F1 0.5, IoU 1/3.
        let p = vec![1u8, 1, 0, 0];
        let g = vec![0u8, 1, 1, 0];
        assert_eq!(pixel_f1(&p, &g).unwrap(), 0.5);
        assert!((pixel_iou(&p, &g).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        // Empty-empty convention.
        let e = vec![0u8; 4];
        assert_eq!(pixel_f1(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn f1_symmetry_and_iou_bound() {
        let mut rng = stream(122, "f1-sym");
        for _ in 0..50 {
            let n = 16;
            let p: Vec<u8> = (0..n).map(|_| (rng.random::<u64>() % 2) as u8).collect();
            let g: Vec<u8> = (0..n).map(|_| (rng.random::<u64>() % 2) as u8).collect();
            assert_eq!(pixel_f1(&p, &g).unwrap(), pixel_f1(&g, &p).unwrap());
            assert_eq!(pixel_iou(&p, &g).unwrap(), pixel_iou(&g, &p).unwrap());
            assert!(pixel_iou(&p, &g).unwrap() <= pixel_f1(&p, &g).unwrap() + 1e-12);
        }
    }

    #[test]
    fn iou_ignores_authentic_samples() {
        let forged = (vec![1u8, 1, 0, 0], vec![1u8, 0, 1, 0], true);
        let authentic = (vec![1u8, 1, 1, 1], vec![0u8, 0, 0, 0], false);
        let base = iou_fake_only(&[forged.clone()]).unwrap();
        let mixed = iou_fake_only(&[forged, authentic]).unwrap();
        assert_eq!(base, mixed);
        assert!(iou_fake_only(&[(vec![0u8], vec![0u8], false)]).is_err());
    }

    #[test]
    fn overall_is_the_mean() {
        // Table-1 row: (0.963, 0.756, 0.819) → 0.846.
        let got = overall(0.963, 0.756, 0.819).unwrap();
        assert!((got - 0.846).abs() < 5e-4);
        assert_eq!(overall(1.0, 1.0, 1.0).unwrap(), 1.0);
        assert_eq!(overall(0.0, 0.0, 0.0).unwrap(), 0.0);
        assert!(overall(1.2, 0.5, 0.5).is_err());
    }
}
