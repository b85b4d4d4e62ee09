//! One-dimensional Lloyd k-means used for region partitioning.
//!
//! Initialization is deterministic: centers are placed at the (i + 0.5)/k
//! quantiles of the *distinct* sorted values, which keeps initial centers
//! separated even on heavily repeated data (a plain quantile over all values
//! collapses to duplicate centers when a value dominates). Assignment ties go
//! to the lower center index. Clusters that lose all members are dropped, so
//! the effective cluster count can shrink below k.
//!
//! Because values are scalar, clusters of sorted data are contiguous runs;
//! each Lloyd iteration moves the run boundaries to the midpoints between
//! adjacent centers and recomputes means from prefix sums.

/// Clustering result. `centers` are sorted ascending; `assignment[i]` is the
/// cluster of `values[i]` as an index into `centers`.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub centers: Vec<f64>,
    pub assignment: Vec<u32>,
}

impl Clustering {
    pub fn effective_k(&self) -> usize {
        self.centers.len()
    }
}

pub fn kmeans_1d<T: crate::tensor::Scalar>(
    values: &[T],
    k: usize,
    max_iters: usize,
) -> Clustering {
    assert!(k >= 1 && !values.is_empty());
    let n = values.len();
    let vals: Vec<f64> = values.iter().map(|v| v.into_f64()).collect();

    // sort (value, original index)
    let mut order: Vec<u32> = (0..n as u32).collect();
    order.sort_unstable_by(|&a, &b| vals[a as usize].total_cmp(&vals[b as usize]));
    let sorted: Vec<f64> = order.iter().map(|&i| vals[i as usize]).collect();

    // prefix sums over sorted values for O(1) run means
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0f64);
    for &v in &sorted {
        prefix.push(prefix.last().unwrap() + v);
    }

    // quantile init over distinct values
    let mut distinct = sorted.clone();
    distinct.dedup();
    let k_eff = k.min(distinct.len());
    let mut centers: Vec<f64> = (0..k_eff)
        .map(|i| {
            let q = (i as f64 + 0.5) / k_eff as f64;
            let idx = ((q * distinct.len() as f64) as usize).min(distinct.len() - 1);
            distinct[idx]
        })
        .collect();
    centers.dedup();

    // bounds[c] = first sorted index belonging to cluster c+1
    let mut bounds: Vec<usize> = Vec::new();
    for iter in 0..max_iters.max(1) {
        let mut new_bounds = Vec::with_capacity(centers.len().saturating_sub(1));
        for c in 0..centers.len() - 1 {
            // equidistant points go to the lower cluster
            let mid = 0.5 * (centers[c] + centers[c + 1]);
            let cut = sorted.partition_point(|&v| v <= mid);
            new_bounds.push(cut);
        }
        // recompute means per run, dropping empty runs
        let mut next_centers = Vec::with_capacity(centers.len());
        let mut start = 0usize;
        for c in 0..centers.len() {
            let end = if c < new_bounds.len() {
                new_bounds[c].max(start)
            } else {
                n
            };
            if end > start {
                next_centers.push((prefix[end] - prefix[start]) / (end - start) as f64);
            }
            start = end.max(start);
        }
        let converged = next_centers == centers && new_bounds == bounds && iter > 0;
        centers = next_centers;
        bounds = if centers.len() > 1 {
            // bounds were built for the previous center list; rebuild cheaply
            // when clusters were dropped
            let mut b = Vec::with_capacity(centers.len() - 1);
            for c in 0..centers.len() - 1 {
                let mid = 0.5 * (centers[c] + centers[c + 1]);
                b.push(sorted.partition_point(|&v| v <= mid));
            }
            b
        } else {
            Vec::new()
        };
        if converged || centers.len() == 1 {
            break;
        }
    }

    // map sorted runs back to original indices
    let mut assignment = vec![0u32; n];
    let mut cluster = 0usize;
    for (pos, &orig) in order.iter().enumerate() {
        while cluster < bounds.len() && pos >= bounds[cluster] {
            cluster += 1;
        }
        assignment[orig as usize] = cluster as u32;
    }
    Clustering {
        centers,
        assignment,
    }
}
