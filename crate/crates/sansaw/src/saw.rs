//! Semantic-aware whitening: channels are ranked per category by the
//! absolute classifier weights, the top K/C indexes per category form the
//! channel index matrix, and each of the K/C groups stacks one
//! weight-scaled channel per category. The group whitening loss pushes each
//! group's covariance toward the identity and sends gradients both to the
//! features and (through the multiplicative weighting) to the classifier
//! weights. Nothing here touches the forward pass; the loss is train-only.
//!
//! A channel picked by several categories appears in several groups (or
//! twice in one group) with its respective weights; the grouping formula is
//! applied literally and duplicates are kept.

use crate::error::{Error, Result};
use crate::norm::whiten_rows_grad;
use crate::tensor::{Scalar, Tensor};

/// The C x (K/C) table of selected channel indexes with the matching signed
/// classifier weights. Rows are per category, in descending |weight| order;
/// group m is column m.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelIndexMatrix {
    pub categories: usize,
    pub group_count: usize,
    /// Row-major `categories x group_count` channel indexes.
    pub entries: Vec<usize>,
    /// Signed weights matching `entries`.
    pub weights: Vec<f64>,
}

impl ChannelIndexMatrix {
    #[inline]
    pub fn index(&self, c: usize, m: usize) -> usize {
        self.entries[c * self.group_count + m]
    }

    #[inline]
    pub fn weight(&self, c: usize, m: usize) -> f64 {
        self.weights[c * self.group_count + m]
    }
}

/// Extract the first `categories` rows of a classifier weight tensor as a
/// dense (rows, K) matrix. Accepts rank-2 `(rows, K)` or a 1x1-convolution
/// weight `(rows, K, 1, 1)`.
fn weight_rows<T: Scalar>(weights: &Tensor<T>, categories: usize) -> Result<(usize, Vec<f64>)> {
    let dims = weights.dims();
    let (rows, k) = match dims.len() {
        2 => (dims[0], dims[1]),
        4 if dims[2] == 1 && dims[3] == 1 => (dims[0], dims[1]),
        _ => {
            return Err(Error::Shape {
                dims: dims.to_vec(),
                reason: "classifier weights must be (rows, K) or (rows, K, 1, 1)".into(),
            })
        }
    };
    if rows < categories {
        return Err(Error::Config(format!(
            "classifier has {rows} rows, need at least {categories}"
        )));
    }
    let flat: Vec<f64> = weights
        .data()
        .iter()
        .take(categories * k)
        .map(|v| v.into_f64())
        .collect();
    Ok((k, flat))
}

/// Rank each category's weights by absolute value (ties to the lower channel
/// index) and keep the top K/C indexes per category.
pub fn select_channel_indexes<T: Scalar>(
    classifier_weights: &Tensor<T>,
    categories: usize,
) -> Result<ChannelIndexMatrix> {
    let (k, flat) = weight_rows(classifier_weights, categories)?;
    if categories == 0 || k % categories != 0 {
        return Err(Error::Config(format!(
            "channel count {k} not divisible by {categories} categories"
        )));
    }
    let group_count = k / categories;
    let mut entries = Vec::with_capacity(categories * group_count);
    let mut weights = Vec::with_capacity(categories * group_count);
    for c in 0..categories {
        let row = &flat[c * k..(c + 1) * k];
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| {
            row[b]
                .abs()
                .total_cmp(&row[a].abs())
                .then(a.cmp(&b))
        });
        for &idx in order.iter().take(group_count) {
            entries.push(idx);
            weights.push(row[idx]);
        }
    }
    Ok(ChannelIndexMatrix {
        categories,
        group_count,
        entries,
        weights,
    })
}

/// Keep the selection of `idx` but refresh the weight values from a new
/// weight tensor. This is the straight-through view used when
/// differentiating: the argsort is a constant, the weight values are not.
pub fn refresh_weights<T: Scalar>(
    idx: &ChannelIndexMatrix,
    classifier_weights: &Tensor<T>,
) -> Result<ChannelIndexMatrix> {
    let (k, flat) = weight_rows(classifier_weights, idx.categories)?;
    let mut out = idx.clone();
    for c in 0..idx.categories {
        for m in 0..idx.group_count {
            out.weights[c * idx.group_count + m] = flat[c * k + idx.index(c, m)];
        }
    }
    Ok(out)
}

/// Materialize the K/C weighted groups, each `(N, C, H, W)`.
pub fn build_groups<T: Scalar>(
    f: &Tensor<T>,
    idx: &ChannelIndexMatrix,
) -> Result<Vec<Tensor<T>>> {
    let (n, k, h, w) = f.dim4()?;
    if idx.categories * idx.group_count != k {
        return Err(Error::ShapeMismatch(format!(
            "index matrix covers {} channels, features have {k}",
            idx.categories * idx.group_count
        )));
    }
    let plane = h * w;
    let mut groups = Vec::with_capacity(idx.group_count);
    for m in 0..idx.group_count {
        let mut g = Tensor::zeros(&[n, idx.categories, h, w])?;
        for ni in 0..n {
            for c in 0..idx.categories {
                let src = f.channel(ni, idx.index(c, m));
                let wv = T::from_f64s(idx.weight(c, m));
                let dst = g.channel_mut(ni, c);
                for p in 0..plane {
                    dst[p] = src[p] * wv;
                }
            }
        }
        groups.push(g);
    }
    Ok(groups)
}

/// The group whitening loss `(1/N) sum_n sum_m ||Psi(G_n^m) - I||_1` with
/// gradients w.r.t. the features and the selected classifier weights.
/// The weight gradient comes back as a dense `(C, K)` matrix with zeros at
/// unselected positions.
pub fn saw_loss<T: Scalar>(
    f: &Tensor<T>,
    idx: &ChannelIndexMatrix,
) -> Result<(f64, Tensor<T>, Tensor<T>)> {
    let (n, k, h, w) = f.dim4()?;
    if idx.categories * idx.group_count != k {
        return Err(Error::ShapeMismatch(format!(
            "index matrix covers {} channels, features have {k}",
            idx.categories * idx.group_count
        )));
    }
    let plane = h * w;
    let inv_n = 1.0 / n as f64;
    let mut loss = 0.0;
    let mut grad_f = Tensor::zeros(f.dims())?;
    let mut grad_w = vec![0f64; idx.categories * k];
    let mut rows: Vec<Vec<T>> = vec![vec![T::zero(); plane]; idx.categories];
    for ni in 0..n {
        for m in 0..idx.group_count {
            for c in 0..idx.categories {
                let src = f.channel(ni, idx.index(c, m));
                let wv = T::from_f64s(idx.weight(c, m));
                for (dst, &s) in rows[c].iter_mut().zip(src) {
                    *dst = s * wv;
                }
            }
            let row_refs: Vec<&[T]> = rows.iter().map(|r| r.as_slice()).collect();
            let (l, drows) = whiten_rows_grad(&row_refs);
            loss += l * inv_n;
            for c in 0..idx.categories {
                let chan = idx.index(c, m);
                let wv = idx.weight(c, m);
                let src = f.channel(ni, chan);
                let mut dw_acc = 0.0;
                {
                    let dst = grad_f.channel_mut(ni, chan);
                    for p in 0..plane {
                        let dr = drows[c][p] * inv_n;
                        dst[p] = dst[p] + T::from_f64s(dr * wv);
                        dw_acc += dr * src[p].into_f64();
                    }
                }
                grad_w[c * k + chan] += dw_acc;
            }
        }
    }
    let grad_w = Tensor::from_vec(
        &[idx.categories, k],
        grad_w.into_iter().map(T::from_f64s).collect(),
    )?;
    Ok((loss, grad_f, grad_w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::norm::{cov_of_rows, giw_loss};
    use crate::rng::SeededRng;

    fn idx_from_rows(rows: &[Vec<f64>]) -> ChannelIndexMatrix {
        let c = rows.len();
        let k = rows[0].len();
        let mut flat = Vec::new();
        for r in rows {
            flat.extend_from_slice(r);
        }
        let w = Tensor::<f64>::from_vec(&[c, k], flat).unwrap();
        select_channel_indexes(&w, c).unwrap()
    }

    #[test]
    fn selection_ranks_by_absolute_weight() {
        let idx = idx_from_rows(&[
            vec![0.9, -0.1, 0.5, 0.2],
            vec![0.1, 0.8, -0.6, 0.3],
        ]);
        assert_eq!(idx.entries, vec![0, 2, 1, 2]);
        assert_eq!(idx.weights, vec![0.9, 0.5, 0.8, -0.6]);
    }

    #[test]
    fn ties_break_toward_lower_channel() {
        let idx = idx_from_rows(&[vec![0.5; 4], vec![0.5; 4]]);
        assert_eq!(idx.entries, vec![0, 1, 0, 1]);
    }

    #[test]
    fn disjoint_dominant_weights_lead_rows() {
        let idx = idx_from_rows(&[
            vec![3.0, 0.1, 0.2, 0.1],
            vec![0.1, 0.2, -4.0, 0.1],
        ]);
        assert_eq!(idx.index(0, 0), 0);
        assert_eq!(idx.index(1, 0), 2);
    }

    #[test]
    fn groups_follow_the_index_columns() {
        let mut rng = SeededRng::new(1);
        let f = Tensor::<f64>::uniform(&[1, 4, 2, 2], -1.0, 1.0, &mut rng).unwrap();
        let idx = idx_from_rows(&[
            vec![0.9, -0.1, 0.5, 0.2],
            vec![0.1, 0.8, -0.6, 0.3],
        ]);
        let groups = build_groups(&f, &idx).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].dims(), &[1, 2, 2, 2]);
        for p in 0..4 {
            assert!((groups[0].channel(0, 0)[p] - f.channel(0, 0)[p] * 0.9).abs() < 1e-12);
            assert!((groups[0].channel(0, 1)[p] - f.channel(0, 1)[p] * 0.8).abs() < 1e-12);
            // channel 2 appears twice in group 1 with different weights
            assert!((groups[1].channel(0, 0)[p] - f.channel(0, 2)[p] * 0.5).abs() < 1e-12);
            assert!((groups[1].channel(0, 1)[p] - f.channel(0, 2)[p] * -0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_weight_zeroes_its_group_row() {
        let f = Tensor::<f64>::ones(&[1, 2, 2, 2]).unwrap();
        let idx = idx_from_rows(&[vec![0.0, 0.0], vec![1.0, 0.5]]);
        let groups = build_groups(&f, &idx).unwrap();
        assert!(groups[0].channel(0, 0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_weights_and_block_rows_reduce_to_contiguous_giw() {
        // category c owns the contiguous block of channels [c*K/C, ...); with
        // unit weights, group m gathers channel c*K/C + m of every category,
        // which is plain contiguous grouping after a channel permutation
        let mut rng = SeededRng::new(2);
        let (c_total, k) = (2usize, 4usize);
        let per = k / c_total;
        let f = Tensor::<f64>::uniform(&[2, k, 3, 3], -1.0, 1.0, &mut rng).unwrap();
        let mut rows = vec![vec![0.0; k]; c_total];
        for (c, row) in rows.iter_mut().enumerate() {
            for m in 0..per {
                // strictly decreasing so the ranked order is the block order
                row[c * per + m] = 1.0 - 1e-9 * m as f64;
            }
        }
        let mut idx = idx_from_rows(&rows);
        idx.weights.iter_mut().for_each(|w| *w = 1.0);
        let (saw, _, _) = saw_loss(&f, &idx).unwrap();

        // permute channels so SAW's group m becomes the contiguous block m
        let (n, _, h, w_) = f.dim4().unwrap();
        let mut perm = Tensor::<f64>::zeros(&[n, k, h, w_]).unwrap();
        for ni in 0..n {
            for m in 0..per {
                for c in 0..c_total {
                    perm.channel_mut(ni, m * c_total + c)
                        .copy_from_slice(f.channel(ni, c * per + m));
                }
            }
        }
        let (giw, _) = giw_loss(&perm, per).unwrap();
        assert!((saw - giw).abs() < 1e-9, "{saw} vs {giw}");
    }

    #[test]
    fn standardized_decorrelated_groups_have_zero_loss() {
        let a = [1.0, -1.0, 1.0, -1.0];
        let b = [1.0, 1.0, -1.0, -1.0];
        // weights pick channels (0,1) for category 0 and (2,3) for category 1;
        // scale channels 1 and 3 so the weighted rows are exactly a and b
        let mut data = Vec::new();
        for chan in [a.to_vec(), a.iter().map(|v| v / 0.9).collect(), b.to_vec(),
                     b.iter().map(|v| v / 0.9).collect()] {
            data.extend_from_slice(&chan);
        }
        let f = Tensor::<f64>::from_vec(&[1, 4, 2, 2], data).unwrap();
        let idx = idx_from_rows(&[vec![1.0, 0.9, 0.0, 0.0], vec![0.0, 0.0, 1.0, 0.9]]);
        // groups: m=0 -> [ch0*1, ch2*1] = [a, b]; m=1 -> [ch1*0.9, ch3*0.9] = [a, b]
        let (loss, _, _) = saw_loss(&f, &idx).unwrap();
        assert!(loss.abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn all_zero_weights_leave_the_diagonal_deficit() {
        let mut rng = SeededRng::new(3);
        let f = Tensor::<f64>::uniform(&[2, 8, 3, 3], -1.0, 1.0, &mut rng).unwrap();
        let rows: Vec<Vec<f64>> = (0..4).map(|_| vec![0.0; 8]).collect();
        let idx = idx_from_rows(&rows);
        let (loss, grad_f, grad_w) = saw_loss(&f, &idx).unwrap();
        assert!((loss - 8.0).abs() < 1e-12); // (K/C) groups x C diagonal ones
        assert!(grad_f.data().iter().all(|&v| v == 0.0));
        assert!(grad_w.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_brute_force_group_assembly() {
        let mut rng = SeededRng::new(4);
        let f = Tensor::<f64>::uniform(&[2, 8, 3, 3], -1.0, 1.0, &mut rng).unwrap();
        let w = Tensor::<f64>::uniform(&[4, 8], -1.0, 1.0, &mut rng).unwrap();
        let idx = select_channel_indexes(&w, 4).unwrap();
        let (loss, _, _) = saw_loss(&f, &idx).unwrap();

        let groups = build_groups(&f, &idx).unwrap();
        let mut brute = 0.0;
        for g in &groups {
            let (n, c, _, _) = g.dim4().unwrap();
            for ni in 0..n {
                let rows: Vec<&[f64]> = (0..c).map(|ci| g.channel(ni, ci)).collect();
                brute += cov_of_rows(&rows).l1_to_identity();
            }
        }
        brute /= 2.0;
        assert!((loss - brute).abs() < 1e-9, "{loss} vs {brute}");
    }

    #[test]
    fn permuting_channels_and_weight_columns_is_invariant() {
        let mut rng = SeededRng::new(5);
        let k = 8usize;
        let f = Tensor::<f64>::uniform(&[2, k, 3, 3], -1.0, 1.0, &mut rng).unwrap();
        let w = Tensor::<f64>::uniform(&[4, k], -1.0, 1.0, &mut rng).unwrap();
        let idx = select_channel_indexes(&w, 4).unwrap();
        let (loss, _, _) = saw_loss(&f, &idx).unwrap();

        let perm: Vec<usize> = vec![3, 6, 0, 7, 2, 5, 1, 4];
        let (n, _, h, w_) = f.dim4().unwrap();
        let mut fp = Tensor::<f64>::zeros(&[n, k, h, w_]).unwrap();
        for ni in 0..n {
            for (new, &old) in perm.iter().enumerate() {
                fp.channel_mut(ni, new).copy_from_slice(f.channel(ni, old));
            }
        }
        let mut wp = Tensor::<f64>::zeros(&[4, k]).unwrap();
        for c in 0..4 {
            for (new, &old) in perm.iter().enumerate() {
                wp.data_mut()[c * k + new] = w.data()[c * k + old];
            }
        }
        let idx_p = select_channel_indexes(&wp, 4).unwrap();
        let (loss_p, _, _) = saw_loss(&fp, &idx_p).unwrap();
        assert!((loss - loss_p).abs() < 1e-6, "{loss} vs {loss_p}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        // resample until covariance residuals stay away from the L1 kink
        let (f0, w0, idx) = (0..)
            .find_map(|attempt| {
                let mut rng = SeededRng::new(60 + attempt);
                let f = Tensor::<f64>::uniform(&[2, 4, 3, 3], -1.5, 1.5, &mut rng).unwrap();
                let w = Tensor::<f64>::uniform(&[2, 4], 0.3, 1.2, &mut rng).unwrap();
                let idx = select_channel_indexes(&w, 2).unwrap();
                let groups = build_groups(&f, &idx).unwrap();
                for g in &groups {
                    for ni in 0..2 {
                        let rows: Vec<&[f64]> = (0..2).map(|c| g.channel(ni, c)).collect();
                        let cov = cov_of_rows(&rows);
                        for i in 0..2 {
                            for j in 0..2 {
                                let target = if i == j { 1.0 } else { 0.0 };
                                if (cov.get(i, j) - target).abs() < gradcheck::KINK_MARGIN {
                                    return None;
                                }
                            }
                        }
                    }
                }
                Some((f, w, idx))
            })
            .unwrap();

        let (_, grad_f, grad_w) = saw_loss(&f0, &idx).unwrap();
        let f_err = gradcheck::check(
            |v: &[f64]| {
                let f = Tensor::from_vec(f0.dims(), v.to_vec()).unwrap();
                saw_loss(&f, &idx).unwrap().0
            },
            f0.data(),
            grad_f.data(),
            gradcheck::DEFAULT_STEP,
        );
        assert!(f_err < 1e-3, "feature grad err {f_err}");

        // straight-through: selection frozen, weight values refreshed
        let w_err = gradcheck::check(
            |v: &[f64]| {
                let w = Tensor::<f64>::from_vec(&[2, 4], v.to_vec()).unwrap();
                let refreshed = refresh_weights(&idx, &w).unwrap();
                saw_loss(&f0, &refreshed).unwrap().0
            },
            w0.data(),
            grad_w.data(),
            gradcheck::DEFAULT_STEP,
        );
        assert!(w_err < 1e-3, "weight grad err {w_err}");
    }
}
