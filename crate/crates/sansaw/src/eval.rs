//! Segmentation metrics and feature-alignment diagnostics.

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::norm::covariance;
use crate::saw::ChannelIndexMatrix;
use crate::tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Per-pixel confusion counts; rows index ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn accumulate(&mut self, gt: &LabelMap, pred: &LabelMap) -> Result<()> {
        if gt.dims() != pred.dims() {
            return Err(Error::ShapeMismatch(format!(
                "gt {:?} vs pred {:?}",
                gt.dims(),
                pred.dims()
            )));
        }
        for (&g, &p) in gt.data().iter().zip(pred.data()) {
            let (g, p) = (g as usize, p as usize);
            if g >= self.num_classes || p >= self.num_classes {
                return Err(Error::ShapeMismatch(format!(
                    "label id out of range: gt {g}, pred {p}, classes {}",
                    self.num_classes
                )));
            }
            self.counts[g * self.num_classes + p] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    #[inline]
    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    /// Per-class intersection over union; `None` when the class appears in
    /// neither map (excluded from the mean rather than scored 0 or 1).
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.num_classes)
            .map(|c| {
                let tp = self.count(c, c);
                let fp: u64 = (0..self.num_classes)
                    .filter(|&g| g != c)
                    .map(|g| self.count(g, c))
                    .sum();
                let fn_: u64 = (0..self.num_classes)
                    .filter(|&p| p != c)
                    .map(|p| self.count(c, p))
                    .sum();
                let denom = tp + fp + fn_;
                if denom == 0 {
                    None
                } else {
                    Some(tp as f64 / denom as f64)
                }
            })
            .collect()
    }

    pub fn miou(&self) -> f64 {
        let ious = self.per_class_iou();
        let present: Vec<f64> = ious.into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

/// Convenience over prediction/ground-truth pairs.
pub fn miou(
    preds: &LabelMap,
    gts: &LabelMap,
    num_classes: usize,
) -> Result<(Vec<Option<f64>>, f64)> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.accumulate(gts, preds)?;
    Ok((cm.per_class_iou(), cm.miou()))
}

/// Per-category (mean, std) of one domain's features over that category's
/// ground-truth pixels, all channels pooled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryStats {
    pub domain: usize,
    pub category: usize,
    pub mean: f64,
    pub std: f64,
    pub pixels: usize,
}

/// Cross-domain category alignment summary: how far apart the per-domain
/// category centers sit, and how correlated the channels are.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    /// Mean pairwise L2 distance between per-domain centers, per category
    /// (`None` when fewer than two domains contain the category).
    pub center_distance: Vec<Option<f64>>,
    /// Mean of the per-category distances that exist.
    pub mean_center_distance: f64,
    /// Mean absolute off-diagonal covariance entry, over all samples.
    pub offdiag: f64,
    pub per_domain: Vec<CategoryStats>,
    /// Mean whitening residual under a supplied channel grouping.
    pub grouped_residual: Option<f64>,
}

/// Build the report from per-domain stacked features `(N, K, H, W)` and
/// matching labels. Labels index categories `0..num_categories`.
pub fn alignment_report<T: Scalar>(
    features: &[Tensor<T>],
    labels: &[LabelMap],
    num_categories: usize,
    idx: Option<&ChannelIndexMatrix>,
) -> Result<AlignmentReport> {
    if features.len() < 2 {
        return Err(Error::Config(
            "alignment report needs at least two domains".into(),
        ));
    }
    if features.len() != labels.len() {
        return Err(Error::ShapeMismatch(
            "one label map per feature tensor".into(),
        ));
    }
    let k = features[0].dims()[1];

    // per-domain per-category channel-mean centers
    let mut centers: Vec<Vec<Option<Vec<f64>>>> = Vec::new();
    let mut per_domain = Vec::new();
    for (d, (f, lab)) in features.iter().zip(labels).enumerate() {
        let (n, fk, h, w) = f.dim4()?;
        if fk != k {
            return Err(Error::ShapeMismatch("channel counts differ".into()));
        }
        let plane = h * w;
        let mut domain_centers = Vec::with_capacity(num_categories);
        for c in 0..num_categories {
            let mut acc = vec![0f64; k];
            let mut count = 0usize;
            let mut scalar_sum = 0.0;
            let mut scalar_sq = 0.0;
            for ni in 0..n {
                let l = lab.sample(ni);
                for p in 0..plane {
                    if l[p] as usize == c {
                        count += 1;
                        for ki in 0..k {
                            let v = f.channel(ni, ki)[p].into_f64();
                            acc[ki] += v;
                            scalar_sum += v;
                            scalar_sq += v * v;
                        }
                    }
                }
            }
            if count == 0 {
                domain_centers.push(None);
            } else {
                for a in acc.iter_mut() {
                    *a /= count as f64;
                }
                let total = (count * k) as f64;
                let mean = scalar_sum / total;
                let var = (scalar_sq / total - mean * mean).max(0.0);
                per_domain.push(CategoryStats {
                    domain: d,
                    category: c,
                    mean,
                    std: var.sqrt(),
                    pixels: count,
                });
                domain_centers.push(Some(acc));
            }
        }
        centers.push(domain_centers);
    }

    let mut center_distance = Vec::with_capacity(num_categories);
    for c in 0..num_categories {
        let present: Vec<&Vec<f64>> = centers.iter().filter_map(|d| d[c].as_ref()).collect();
        if present.len() < 2 {
            center_distance.push(None);
            continue;
        }
        let mut acc = 0.0;
        let mut pairs = 0usize;
        for i in 0..present.len() {
            for j in i + 1..present.len() {
                let d2: f64 = present[i]
                    .iter()
                    .zip(present[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                acc += d2.sqrt();
                pairs += 1;
            }
        }
        center_distance.push(Some(acc / pairs as f64));
    }
    let existing: Vec<f64> = center_distance.iter().flatten().copied().collect();
    let mean_center_distance = if existing.is_empty() {
        0.0
    } else {
        existing.iter().sum::<f64>() / existing.len() as f64
    };

    // channel correlation: mean |off-diagonal| of per-sample covariance
    let mut offdiag_acc = 0.0;
    let mut offdiag_n = 0usize;
    let mut grouped_acc = 0.0;
    let mut grouped_n = 0usize;
    for f in features {
        let (n, fk, h, w) = f.dim4()?;
        for ni in 0..n {
            let sample = Tensor::from_vec(&[fk, h, w], f.sample(ni).to_vec())?;
            offdiag_acc += covariance(&sample)?.mean_abs_offdiag();
            offdiag_n += 1;
            if let Some(idx) = idx {
                let batch = Tensor::from_vec(&[1, fk, h, w], f.sample(ni).to_vec())?;
                for g in crate::saw::build_groups(&batch, idx)? {
                    let rows: Vec<&[T]> =
                        (0..idx.categories).map(|c| g.channel(0, c)).collect();
                    grouped_acc += crate::norm::cov_of_rows(&rows).l1_to_identity();
                    grouped_n += 1;
                }
            }
        }
    }
    Ok(AlignmentReport {
        center_distance,
        mean_center_distance,
        offdiag: offdiag_acc / offdiag_n.max(1) as f64,
        per_domain,
        grouped_residual: (grouped_n > 0).then(|| grouped_acc / grouped_n as f64),
    })
}

/// One metrics row: per-class rows carry the class id, summary rows use
/// class_id = -1 and the domain mIoU.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub run_id: String,
    pub domain: String,
    pub class_id: i64,
    pub iou: Option<f64>,
    pub miou: f64,
    pub center_dist: Option<f64>,
    pub offdiag: f64,
}

pub const METRICS_HEADER: &str = "run_id,domain,class_id,iou,miou,center_dist,offdiag";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

pub fn format_metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.run_id,
            r.domain,
            r.class_id,
            opt(r.iou),
            r.miou,
            opt(r.center_dist),
            r.offdiag
        ));
    }
    out
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    std::fs::write(path.as_ref(), format_metrics_csv(rows))
        .map_err(|e| Error::io(format!("writing {}", path.as_ref().display()), e))
}
