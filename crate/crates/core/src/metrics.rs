//! Evaluation metrics: box IOU, accuracy at an IOU threshold, Dice, top-1.

use serde::{Deserialize, Serialize};

use crate::encode::BBox;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Intersection over union of two boxes; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let ih = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Fraction of pairs whose IOU is at least `threshold`.
pub fn acc_at_iou(preds: &[BBox], targets: &[BBox], threshold: f64) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(invalid(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Empty("acc_at_iou"));
    }
    let hits = preds
        .iter()
        .zip(targets)
        .filter(|(p, t)| iou(p, t) >= threshold)
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Dice coefficient of two masks, each binarized at 0.5. Two empty masks score 1.
pub fn dsc(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "dsc",
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x >= 0.5, y >= 0.5);
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows of `(n, c)` logits whose argmax equals the label.
pub fn top1(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "top1",
            detail: format!("logits {s:?} for {} labels", labels.len()),
        });
    }
    if labels.is_empty() {
        return Err(Error::Empty("top1"));
    }
    let hits = logits
        .data()
        .chunks(s[1])
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Metrics for one stage over a test set. Only the fields that apply to the
/// task are filled in.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_iou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_at_05: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dsc_mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dsc_std: Option<f64>,
}

impl MetricSummary {
    pub fn from_boxes(preds: &[BBox], targets: &[BBox]) -> Result<Self> {
        let acc = acc_at_iou(preds, targets, 0.5)?;
        let ious: Vec<f64> = preds.iter().zip(targets).map(|(p, t)| iou(p, t)).collect();
        Ok(Self {
            n: preds.len(),
            mean_iou: Some(mean_std(&ious).0),
            acc_at_05: Some(acc),
            ..Default::default()
        })
    }

    pub fn from_logits(logits: &Tensor, labels: &[usize]) -> Result<Self> {
        Ok(Self {
            n: labels.len(),
            top1: Some(top1(logits, labels)?),
            ..Default::default()
        })
    }

    pub fn from_masks(preds: &[Tensor], targets: &[Tensor]) -> Result<Self> {
        if preds.len() != targets.len() {
            return Err(invalid("mask count mismatch"));
        }
        if preds.is_empty() {
            return Err(Error::Empty("mask metrics"));
        }
        let scores = preds
            .iter()
            .zip(targets)
            .map(|(p, t)| dsc(p, t))
            .collect::<Result<Vec<_>>>()?;
        let (m, s) = mean_std(&scores);
        Ok(Self {
            n: preds.len(),
            dsc_mean: Some(m),
            dsc_std: Some(s),
            ..Default::default()
        })
    }

    /// The task's headline number: mean IOU, top-1 or mean DSC.
    pub fn primary(&self) -> f64 {
        self.mean_iou
            .or(self.top1)
            .or(self.dsc_mean)
            .unwrap_or(f64::NAN)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_examples() {
        let a = BBox::from_corners(0.0, 0.0, 2.0, 2.0);
        let b = BBox::from_corners(1.0, 1.0, 3.0, 3.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-12);
        let far = BBox::from_corners(5.0, 5.0, 6.0, 6.0);
        assert_eq!(iou(&a, &far), 0.0);
        let empty = BBox::new(0.5, 0.5, 0.0, 0.0);
        assert_eq!(iou(&empty, &empty), 0.0);
    }

    #[test]
    fn acc_examples() {
        // Boxes with IOUs 0.4, 0.5 and 0.9 against the unit square.
        let t = BBox::from_corners(0.0, 0.0, 1.0, 1.0);
        let preds = [
            BBox::from_corners(0.0, 0.0, 1.0, 0.4),
            BBox::from_corners(0.0, 0.0, 1.0, 0.5),
            BBox::from_corners(0.0, 0.0, 1.0, 0.9),
        ];
        let ious: Vec<f64> = preds.iter().map(|p| iou(p, &t)).collect();
        assert!((ious[1] - 0.5).abs() < 1e-15);
        let acc = acc_at_iou(&preds, &[t; 3], 0.5).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(acc_at_iou(&[t, t], &[t, t], 0.5).unwrap(), 1.0);
        assert!(acc_at_iou(&[], &[], 0.5).is_err());
    }

    #[test]
    fn dsc_examples() {
        let a = Tensor::new([1, 3, 3], vec![1., 1., 1., 0., 0., 0., 0., 0., 0.]).unwrap();
        let b = Tensor::new([1, 3, 3], vec![0., 1., 1., 1., 1., 0., 0., 0., 0.]).unwrap();
        assert!((dsc(&a, &b).unwrap() - 4.0 / 7.0).abs() < 1e-15);
        assert_eq!(dsc(&a, &a).unwrap(), 1.0);
        let empty = Tensor::zeros([1, 3, 3]);
        assert_eq!(dsc(&a, &empty).unwrap(), 0.0);
        assert_eq!(dsc(&empty, &empty).unwrap(), 1.0);
        assert!(dsc(&a, &Tensor::zeros([1, 3, 2])).is_err());
    }

    #[test]
    fn top1_examples() {
        let logits = Tensor::new(
            [5, 2],
            vec![1., 0., 0., 1., 1., 0., 0., 1., 1., 0.],
        )
        .unwrap();
        assert_eq!(top1(&logits, &[0, 1, 0, 1, 0]).unwrap(), 1.0);
        assert!((top1(&logits, &[0, 1, 0, 0, 1]).unwrap() - 0.6).abs() < 1e-15);
        let uniform = Tensor::zeros([4, 3]);
        assert_eq!(top1(&uniform, &[0; 4]).unwrap(), 1.0);
        assert!(top1(&Tensor::zeros([1, 2]), &[]).is_err());
    }
}
