//! Semantic-aware normalization: per-category masked branches, gated 3x3
//! refinement, k-means region partitioning, regional normalization, and the
//! shared per-category affine recombination, together with the objective
//! features and the alignment loss.
//!
//! The transform runs identically at train and test time. For each category
//! branch the pipeline is: mask the features with the predicted per-pixel
//! mask, refine them with a sigmoid-gated 3x3 convolution over
//! [channel-max; channel-avg; mask], cluster the channel-averaged branch map
//! to find the category region, standardize each channel inside that region,
//! then scale and shift by the category's affine parameters. An extra
//! identity branch weighted by the "other" mask keeps unaligned content from
//! being suppressed.
//!
//! Because channel pooling commutes with the (non-negative) mask and gate
//! factors, the branch pipeline never materializes the masked feature map:
//! pooled maps are the shared channel pools of the input scaled per pixel,
//! and regional statistics read `gate * mask * f` on the fly. The k-means
//! assignment is a constant of backpropagation (selection is
//! straight-through); callers that need finite-difference agreement freeze
//! the regions of the base point and re-run the forward with them.

use crate::error::{Error, Result};
use crate::kmeans::kmeans_1d;
use crate::labels::LabelMap;
use crate::nn::{softmax_backward, softmax_channels, Conv2d};
use crate::norm::{region_norm_grad_channel, RegionMask};
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};

/// Region partition parameters: cluster the branch map into `k` clusters and
/// take the `t` clusters with the highest centers as the category region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionConfig {
    pub k: usize,
    pub t: usize,
    pub max_iters: usize,
}

impl Default for RegionConfig {
    fn default() -> Self {
        RegionConfig {
            k: 5,
            t: 1,
            max_iters: 50,
        }
    }
}

impl RegionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t < 1 || self.t >= self.k {
            return Err(Error::Config(format!(
                "region config requires 1 <= t < k, got t={} k={}",
                self.t, self.k
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SanConfig {
    pub region: RegionConfig,
    pub epsilon: f64,
    pub cfr_enabled: bool,
}

impl Default for SanConfig {
    fn default() -> Self {
        SanConfig {
            region: RegionConfig::default(),
            epsilon: 1e-5,
            cfr_enabled: true,
        }
    }
}

/// Learnable state: per-category affines (shared across the batch), the
/// auxiliary 1x1 classifier emitting C+1 mask logits (the extra channel is
/// "other"), and one 3x3 refinement convolution per category.
#[derive(Debug, Clone, PartialEq)]
pub struct SanState<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub classifier: Conv2d<T>,
    pub cfr: Vec<Conv2d<T>>,
}

impl<T: Scalar> SanState<T> {
    pub fn new(channels: usize, categories: usize, rng: &mut SeededRng) -> Result<Self> {
        let classifier = Conv2d::new(channels, categories + 1, 1, 0.1, rng)?;
        let cfr = (0..categories)
            .map(|_| Conv2d::new(3, 1, 3, 0.1, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(SanState {
            gamma: Tensor::ones(&[categories])?,
            beta: Tensor::zeros(&[categories])?,
            classifier,
            cfr,
        })
    }

    pub fn num_categories(&self) -> usize {
        self.gamma.len()
    }

    pub fn channels(&self) -> usize {
        self.classifier.cin()
    }
}

/// Mask prediction: per-pixel softmax over the C+1 classifier logits.
pub fn predict_masks<T: Scalar>(
    f: &Tensor<T>,
    state: &SanState<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let logits = state.classifier.forward(f)?;
    let masks = softmax_channels(&logits)?;
    Ok((logits, masks))
}

/// One masked branch: the feature map scaled per pixel by category mask `c`.
pub fn mask_branch<T: Scalar>(f: &Tensor<T>, masks: &Tensor<T>, c: usize) -> Result<Tensor<T>> {
    let (n, _, h, w) = f.dim4()?;
    let mut map = Tensor::zeros(&[n, 1, h, w])?;
    for ni in 0..n {
        map.channel_mut(ni, 0).copy_from_slice(masks.channel(ni, c));
    }
    f.mul_broadcast_map(&map)
}

/// Category-level feature refinement: gate the masked branch with
/// `sigmoid(conv3x3([max-pool; avg-pool; mask]))`, broadcast over channels.
/// Returns the refined map and the gate.
pub fn cfr_refine<T: Scalar>(
    fp: &Tensor<T>,
    mask_c: &Tensor<T>,
    conv: &Conv2d<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, _, h, w) = fp.dim4()?;
    let mx = fp.pool_channels(crate::tensor::PoolMode::Max)?;
    let av = fp.pool_channels(crate::tensor::PoolMode::Avg)?;
    let mut cat = Tensor::zeros(&[n, 3, h, w])?;
    for ni in 0..n {
        cat.channel_mut(ni, 0).copy_from_slice(mx.channel(ni, 0));
        cat.channel_mut(ni, 1).copy_from_slice(av.channel(ni, 0));
        cat.channel_mut(ni, 2).copy_from_slice(mask_c.channel(ni, 0));
    }
    let gate = conv.forward(&cat)?.sigmoid();
    Ok((fp.mul_broadcast_map(&gate)?, gate))
}

/// Partition each sample of a refined branch map into category region and
/// remainder: channel-average, cluster the H*W values, keep the top-t
/// clusters by center. A constant map yields the full image.
pub fn partition_region<T: Scalar>(
    fpp: &Tensor<T>,
    cfg: &RegionConfig,
) -> Result<Vec<RegionMask>> {
    let (n, _, h, w) = fpp.dim4()?;
    let map = fpp.pool_channels(crate::tensor::PoolMode::Avg)?;
    (0..n)
        .map(|ni| partition_values(map.channel(ni, 0), h, w, cfg))
        .collect()
}

fn partition_values<T: Scalar>(
    values: &[T],
    h: usize,
    w: usize,
    cfg: &RegionConfig,
) -> Result<RegionMask> {
    let clustering = kmeans_1d(values, cfg.k, cfg.max_iters);
    let k_eff = clustering.effective_k();
    let t = cfg.t.min(k_eff);
    let cutoff = (k_eff - t) as u32;
    let inside: Vec<bool> = clustering.assignment.iter().map(|&a| a >= cutoff).collect();
    RegionMask::new(h, w, inside)
}

struct BranchCache<T: Scalar> {
    gate: Option<Tensor<T>>,
    cat: Option<Tensor<T>>,
    /// gate * mask (just the mask when refinement is disabled), `(N,1,H,W)`.
    gm: Tensor<T>,
    /// Regional (mean, std) of the implied refined branch, `[N][K]`.
    stats: Vec<Vec<(f64, f64)>>,
}

/// Forward result. Branch intermediates are kept only when requested
/// (training); inference carries just the transformed features and masks.
pub struct SanForward<T: Scalar> {
    pub logits: Tensor<T>,
    pub masks: Tensor<T>,
    pub f_tilde: Tensor<T>,
    /// Per-category, per-sample region masks actually used.
    pub regions: Vec<Vec<RegionMask>>,
    branches: Vec<BranchCache<T>>,
    favg: Tensor<T>,
    fmax: Tensor<T>,
    amax: Vec<u16>,
}

/// Run the SAN transform. `frozen_regions`, when given, bypasses the k-means
/// partition (indexed `[category][sample]`); that is how finite-difference
/// checks hold the selection fixed.
pub fn forward<T: Scalar>(
    f: &Tensor<T>,
    state: &SanState<T>,
    cfg: &SanConfig,
    frozen_regions: Option<&[Vec<RegionMask>]>,
    want_cache: bool,
) -> Result<SanForward<T>> {
    cfg.region.validate()?;
    let (n, k, h, w) = f.dim4()?;
    let c_total = state.num_categories();
    if state.channels() != k {
        return Err(Error::ShapeMismatch(format!(
            "classifier expects {} channels, features have {k}",
            state.channels()
        )));
    }
    let plane = h * w;
    let (logits, masks) = predict_masks(f, state)?;

    // shared channel pools of the raw features; masked-branch pools are these
    // maps scaled by the (non-negative) mask
    let mut favg = Tensor::zeros(&[n, 1, h, w])?;
    let mut fmax = Tensor::zeros(&[n, 1, h, w])?;
    let mut amax = vec![0u16; n * plane];
    for ni in 0..n {
        {
            let dst = fmax.channel_mut(ni, 0);
            dst.copy_from_slice(f.channel(ni, 0));
        }
        let mut acc = vec![0f64; plane];
        for ki in 0..k {
            let chan = f.channel(ni, ki);
            for (a, &v) in acc.iter_mut().zip(chan) {
                *a += v.into_f64();
            }
            if ki > 0 {
                let dst = fmax.channel_mut(ni, 0);
                let base = ni * plane;
                for p in 0..plane {
                    if chan[p] > dst[p] {
                        dst[p] = chan[p];
                        amax[base + p] = ki as u16;
                    }
                }
            }
        }
        let inv = 1.0 / k as f64;
        for (o, a) in favg.channel_mut(ni, 0).iter_mut().zip(acc) {
            *o = T::from_f64s(a * inv);
        }
    }

    let mut f_tilde = Tensor::zeros(f.dims())?;
    let mut regions_all = Vec::with_capacity(c_total);
    let mut branches = Vec::with_capacity(c_total);

    for c in 0..c_total {
        // refinement gate over [max; avg; mask] of the masked branch
        let (gate, cat, gm) = if cfg.cfr_enabled {
            let mut cat = Tensor::zeros(&[n, 3, h, w])?;
            for ni in 0..n {
                {
                    let m = masks.channel(ni, c);
                    let fm = fmax.channel(ni, 0);
                    let dst = cat.channel_mut(ni, 0);
                    for p in 0..plane {
                        dst[p] = m[p] * fm[p];
                    }
                }
                {
                    let m = masks.channel(ni, c);
                    let fa = favg.channel(ni, 0);
                    let dst = cat.channel_mut(ni, 1);
                    for p in 0..plane {
                        dst[p] = m[p] * fa[p];
                    }
                }
                cat.channel_mut(ni, 2).copy_from_slice(masks.channel(ni, c));
            }
            let gate = state.cfr[c].forward(&cat)?.sigmoid();
            let mut gm = Tensor::zeros(&[n, 1, h, w])?;
            for ni in 0..n {
                let g = gate.channel(ni, 0);
                let m = masks.channel(ni, c);
                let dst = gm.channel_mut(ni, 0);
                for p in 0..plane {
                    dst[p] = g[p] * m[p];
                }
            }
            (Some(gate), Some(cat), gm)
        } else {
            let mut gm = Tensor::zeros(&[n, 1, h, w])?;
            for ni in 0..n {
                gm.channel_mut(ni, 0).copy_from_slice(masks.channel(ni, c));
            }
            (None, None, gm)
        };

        // category region from the channel-averaged branch map
        let regions: Vec<RegionMask> = match frozen_regions {
            Some(frozen) => frozen[c].clone(),
            None => (0..n)
                .map(|ni| {
                    let g = gm.channel(ni, 0);
                    let fa = favg.channel(ni, 0);
                    let map: Vec<f64> =
                        (0..plane).map(|p| g[p].into_f64() * fa[p].into_f64()).collect();
                    partition_values(&map, h, w, &cfg.region)
                })
                .collect::<Result<Vec<_>>>()?,
        };

        // regional normalization + affine, accumulated into the output.
        // Stats come from mask-weighted full-plane sums and the per-pixel
        // select is a branchless blend so the loops vectorize.
        let gamma_t = state.gamma.data()[c];
        let beta_t = state.beta.data()[c];
        let mut stats = Vec::with_capacity(n);
        let mut u_buf = vec![T::zero(); plane];
        for ni in 0..n {
            let region = &regions[ni];
            let inv_m = 1.0 / region.count() as f64;
            let gm_p = gm.channel(ni, 0);
            let mut mask = vec![T::zero(); plane];
            for &p in region.indices() {
                mask[p as usize] = T::one();
            }
            let full = region.is_full();
            let mut stats_k = Vec::with_capacity(k);
            for ki in 0..k {
                let fc = f.channel(ni, ki);
                // one pass: masked raw moments of u = gm * f
                const LANES: usize = 8;
                let mut s1 = [T::zero(); LANES];
                let mut s2 = [T::zero(); LANES];
                let chunks = plane / LANES;
                if full {
                    for i in 0..chunks {
                        let off = i * LANES;
                        for l in 0..LANES {
                            let u = gm_p[off + l] * fc[off + l];
                            u_buf[off + l] = u;
                            s1[l] = s1[l] + u;
                            s2[l] = s2[l] + u * u;
                        }
                    }
                } else {
                    for i in 0..chunks {
                        let off = i * LANES;
                        for l in 0..LANES {
                            let u = gm_p[off + l] * fc[off + l];
                            u_buf[off + l] = u;
                            let mu = mask[off + l] * u;
                            s1[l] = s1[l] + mu;
                            s2[l] = s2[l] + mu * u;
                        }
                    }
                }
                let mut sum = 0.0f64;
                let mut sumsq = 0.0f64;
                for l in 0..LANES {
                    sum += s1[l].into_f64();
                    sumsq += s2[l].into_f64();
                }
                for p in chunks * LANES..plane {
                    let u = gm_p[p] * fc[p];
                    u_buf[p] = u;
                    let m = if full { T::one() } else { mask[p] };
                    sum += (m * u).into_f64();
                    sumsq += (m * u * u).into_f64();
                }
                let mean = sum * inv_m;
                let var = (sumsq * inv_m - mean * mean).max(0.0);
                let std = var.sqrt();
                let mean_t = T::from_f64s(mean);
                let inv_t = T::from_f64s(1.0 / (std + cfg.epsilon));
                stats_k.push((mean, std));
                let out = f_tilde.channel_mut(ni, ki);
                if full {
                    for p in 0..plane {
                        let v = (u_buf[p] - mean_t) * inv_t;
                        out[p] = out[p] + gamma_t * v + beta_t;
                    }
                } else {
                    for p in 0..plane {
                        let u = u_buf[p];
                        let v = u + mask[p] * ((u - mean_t) * inv_t - u);
                        out[p] = out[p] + gamma_t * v + beta_t;
                    }
                }
            }
            stats.push(stats_k);
        }

        regions_all.push(regions);
        branches.push(BranchCache {
            gate,
            cat,
            gm,
            stats: if want_cache { stats } else { Vec::new() },
        });
    }

    // identity branch weighted by the "other" mask
    for ni in 0..n {
        let m_other = masks.channel(ni, c_total);
        for ki in 0..k {
            let fc = f.channel(ni, ki);
            let out = f_tilde.channel_mut(ni, ki);
            for p in 0..plane {
                out[p] = out[p] + m_other[p] * fc[p];
            }
        }
    }

    if !want_cache {
        branches.iter_mut().for_each(|b| {
            b.cat = None;
        });
    }

    Ok(SanForward {
        logits,
        masks,
        f_tilde,
        regions: regions_all,
        branches,
        favg,
        fmax,
        amax,
    })
}

/// Gradients of a downstream scalar through the SAN transform.
pub struct SanGrads<T: Scalar> {
    pub df: Tensor<T>,
    pub dgamma: Tensor<T>,
    pub dbeta: Tensor<T>,
    pub dcls_w: Tensor<T>,
    pub dcls_b: Tensor<T>,
    pub dcfr: Vec<(Tensor<T>, Tensor<T>)>,
}

/// Backpropagate `d_ftilde` (gradient w.r.t. the transformed features) and an
/// optional direct logits gradient (the mask cross-entropy term) through the
/// forward pass cached in `fwd`. Regions and channel argmaxes are treated as
/// constants.
pub fn backward<T: Scalar>(
    f: &Tensor<T>,
    state: &SanState<T>,
    cfg: &SanConfig,
    fwd: &SanForward<T>,
    d_ftilde: &Tensor<T>,
    dlogits_extra: Option<&Tensor<T>>,
) -> Result<SanGrads<T>> {
    let (n, k, h, w) = f.dim4()?;
    let c_total = state.num_categories();
    let plane = h * w;
    if d_ftilde.dims() != f.dims() {
        return Err(Error::ShapeMismatch("san backward gradient shape".into()));
    }

    let mut df = Tensor::zeros(f.dims())?;
    let mut dmasks = Tensor::zeros(fwd.masks.dims())?;
    let mut dgamma = vec![0f64; c_total];
    let mut dcfr = Vec::with_capacity(c_total);
    let mut dfavg = vec![T::zero(); n * plane];
    let mut dfmax = vec![T::zero(); n * plane];

    // every branch adds its shift everywhere, so each beta sees the full
    // upstream gradient
    let dbeta_all: f64 = d_ftilde.data().iter().map(|v| v.into_f64()).sum();
    let dbeta = vec![dbeta_all; c_total];

    let mut u_buf = vec![T::zero(); plane];
    for c in 0..c_total {
        let cache = &fwd.branches[c];
        if cache.stats.is_empty() {
            return Err(Error::Config(
                "san backward requires a forward pass with caching enabled".into(),
            ));
        }
        let gamma_t = state.gamma.data()[c];
        let mut dgm = vec![T::zero(); n * plane];

        for ni in 0..n {
            let region = &fwd.regions[c][ni];
            let inv_m = 1.0 / region.count() as f64;
            let gm_p = cache.gm.channel(ni, 0);
            let mut mask = vec![T::zero(); plane];
            for &p in region.indices() {
                mask[p as usize] = T::one();
            }
            let full = region.is_full();
            for ki in 0..k {
                let (mean, std) = cache.stats[ni][ki];
                let s = std + cfg.epsilon;
                let inv = 1.0 / s;
                let mean_t = T::from_f64s(mean);
                let inv_t = T::from_f64s(inv);
                let fc = f.channel(ni, ki);
                let g = d_ftilde.channel(ni, ki);

                // one pass: u plus the three reductions every downstream
                // quantity needs (all-pixel g.u, masked g.u, masked g)
                const LANES: usize = 8;
                let mut a_l = [T::zero(); LANES];
                let mut b_l = [T::zero(); LANES];
                let mut c_l = [T::zero(); LANES];
                let chunks = plane / LANES;
                for i in 0..chunks {
                    let off = i * LANES;
                    for l in 0..LANES {
                        let u = gm_p[off + l] * fc[off + l];
                        u_buf[off + l] = u;
                        let gv = g[off + l];
                        let mg = if full { gv } else { mask[off + l] * gv };
                        a_l[l] = a_l[l] + gv * u;
                        b_l[l] = b_l[l] + mg * u;
                        c_l[l] = c_l[l] + mg;
                    }
                }
                let (mut a, mut b, mut cc) = (0.0f64, 0.0f64, 0.0f64);
                for l in 0..LANES {
                    a += a_l[l].into_f64();
                    b += b_l[l].into_f64();
                    cc += c_l[l].into_f64();
                }
                for p in chunks * LANES..plane {
                    let u = gm_p[p] * fc[p];
                    u_buf[p] = u;
                    let gv = g[p];
                    let mg = if full { gv } else { mask[p] * gv };
                    a += (gv * u).into_f64();
                    b += (mg * u).into_f64();
                    cc += mg.into_f64();
                }
                // sum g * rn-value expands into the same raw moments
                dgamma[c] += a - b + inv * (b - mean * cc);
                let gamma_f = gamma_t.into_f64();
                let dy_mean_t = T::from_f64s(gamma_f * cc * inv_m);
                let sigma_safe = std.max(1e-300);
                let coef_t =
                    T::from_f64s(gamma_f * (b - mean * cc) / (s * s * sigma_safe) * inv_m);

                let dst = df.channel_mut(ni, ki);
                let base = ni * plane;
                let dgm_n = &mut dgm[base..base + plane];
                if full {
                    for p in 0..plane {
                        let dy = gamma_t * g[p];
                        let du = (dy - dy_mean_t) * inv_t - coef_t * (u_buf[p] - mean_t);
                        dst[p] = dst[p] + du * gm_p[p];
                        dgm_n[p] = dgm_n[p] + du * fc[p];
                    }
                } else {
                    for p in 0..plane {
                        let u = u_buf[p];
                        let dy = gamma_t * g[p];
                        let du = dy
                            + mask[p] * ((dy - dy_mean_t) * inv_t - coef_t * (u - mean_t) - dy);
                        dst[p] = dst[p] + du * gm_p[p];
                        dgm_n[p] = dgm_n[p] + du * fc[p];
                    }
                }
            }
        }

        // through the gate and the refinement convolution
        if cfg.cfr_enabled {
            let gate = cache.gate.as_ref().expect("gate cached");
            let cat = cache.cat.as_ref().expect("cat cached");
            let mut dz = Tensor::zeros(&[n, 1, h, w])?;
            for ni in 0..n {
                let gt = gate.channel(ni, 0);
                let mk = fwd.masks.channel(ni, c);
                let base = ni * plane;
                let dzc = dz.channel_mut(ni, 0);
                for p in 0..plane {
                    let gtv = gt[p];
                    let dgate = dgm[base + p] * mk[p];
                    dzc[p] = dgate * gtv * (T::one() - gtv);
                }
            }
            let (dcat, dw_c, db_c) = state.cfr[c].backward(cat, &dz)?;
            dcfr.push((dw_c, db_c));
            for ni in 0..n {
                let gt = gate.channel(ni, 0);
                let mk = fwd.masks.channel(ni, c);
                let fm = fwd.fmax.channel(ni, 0);
                let fa = fwd.favg.channel(ni, 0);
                let dmx = dcat.channel(ni, 0);
                let dav = dcat.channel(ni, 1);
                let dmk_direct = dcat.channel(ni, 2);
                let base = ni * plane;
                let dm = dmasks.channel_mut(ni, c);
                for p in 0..plane {
                    let dm_p = dgm[base + p] * gt[p]
                        + dmx[p] * fm[p]
                        + dav[p] * fa[p]
                        + dmk_direct[p];
                    dm[p] = dm[p] + dm_p;
                    dfmax[base + p] = dfmax[base + p] + dmx[p] * mk[p];
                    dfavg[base + p] = dfavg[base + p] + dav[p] * mk[p];
                }
            }
        } else {
            dcfr.push((Tensor::zeros(&[1, 3, 3, 3])?, Tensor::zeros(&[1])?));
            for ni in 0..n {
                let base = ni * plane;
                let dm = dmasks.channel_mut(ni, c);
                for p in 0..plane {
                    dm[p] = dm[p] + dgm[base + p];
                }
            }
        }
    }

    // identity branch
    for ni in 0..n {
        let m_other = fwd.masks.channel(ni, c_total);
        let dm = dmasks.channel_mut(ni, c_total);
        for ki in 0..k {
            let fc = f.channel(ni, ki);
            let g = d_ftilde.channel(ni, ki);
            for p in 0..plane {
                dm[p] = dm[p] + g[p] * fc[p];
            }
        }
        for ki in 0..k {
            let fc_grad = d_ftilde.channel(ni, ki);
            let dst = df.channel_mut(ni, ki);
            for p in 0..plane {
                dst[p] = dst[p] + fc_grad[p] * m_other[p];
            }
        }
    }

    // shared channel pools route back into every (avg) or the argmax (max)
    // channel
    let inv_k = T::from_f64s(1.0 / k as f64);
    for ni in 0..n {
        let base = ni * plane;
        for ki in 0..k {
            let dst = df.channel_mut(ni, ki);
            for p in 0..plane {
                dst[p] = dst[p] + dfavg[base + p] * inv_k;
            }
        }
        for p in 0..plane {
            let ki = fwd.amax[base + p] as usize;
            let dst = df.channel_mut(ni, ki);
            dst[p] = dst[p] + dfmax[base + p];
        }
    }

    // masks -> logits -> classifier
    let mut dlogits = softmax_backward(&fwd.masks, &dmasks)?;
    if let Some(extra) = dlogits_extra {
        dlogits.add_assign(extra)?;
    }
    let (df_cls, dcls_w, dcls_b) = state.classifier.backward(f, &dlogits)?;
    df.add_assign(&df_cls)?;

    Ok(SanGrads {
        df,
        dgamma: Tensor::from_vec(&[c_total], dgamma.into_iter().map(T::from_f64s).collect())?,
        dbeta: Tensor::from_vec(&[c_total], dbeta.into_iter().map(T::from_f64s).collect())?,
        dcls_w,
        dcls_b,
        dcfr,
    })
}

/// Label-derived target features: pixels of category `c < C` are standardized
/// with statistics over that category's ground-truth region (per sample and
/// channel) and then shifted by the category affine; "other" pixels copy the
/// input unchanged.
pub fn objective_features<T: Scalar>(
    f: &Tensor<T>,
    labels: &LabelMap,
    state: &SanState<T>,
    epsilon: f64,
) -> Result<Tensor<T>> {
    let (n, k, h, w) = f.dim4()?;
    let c_total = state.num_categories();
    check_labels(labels, n, h, w)?;
    let plane = h * w;
    let mut out = f.clone();
    for ni in 0..n {
        let lab = labels.sample(ni);
        for c in 0..c_total {
            let indices: Vec<u32> = (0..plane as u32)
                .filter(|&p| lab[p as usize] as usize == c)
                .collect();
            if indices.is_empty() {
                continue;
            }
            let m = indices.len() as f64;
            let gamma_c = state.gamma.data()[c].into_f64();
            let beta_c = state.beta.data()[c].into_f64();
            for ki in 0..k {
                let fc = f.channel(ni, ki);
                let mut sum = 0.0;
                for &p in &indices {
                    sum += fc[p as usize].into_f64();
                }
                let mean = sum / m;
                let mut sq = 0.0;
                for &p in &indices {
                    let d = fc[p as usize].into_f64() - mean;
                    sq += d * d;
                }
                let std = (sq / m).max(0.0).sqrt();
                let inv = 1.0 / (std + epsilon);
                let dst = out.channel_mut(ni, ki);
                for &p in &indices {
                    let p = p as usize;
                    dst[p] =
                        T::from_f64s((fc[p].into_f64() - mean) * inv * gamma_c + beta_c);
                }
            }
        }
    }
    Ok(out)
}

/// Gradients through [`objective_features`]: returns the feature gradient and
/// the affine gradients. Label regions are constants.
pub fn objective_features_backward<T: Scalar>(
    f: &Tensor<T>,
    labels: &LabelMap,
    state: &SanState<T>,
    epsilon: f64,
    d_fobj: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, k, h, w) = f.dim4()?;
    let c_total = state.num_categories();
    check_labels(labels, n, h, w)?;
    if d_fobj.dims() != f.dims() {
        return Err(Error::ShapeMismatch("objective backward gradient".into()));
    }
    let mut df = d_fobj.clone(); // "other" pixels pass through
    let mut dgamma = vec![0f64; c_total];
    let mut dbeta = vec![0f64; c_total];
    for ni in 0..n {
        let lab = labels.sample(ni);
        for c in 0..c_total {
            let membership: Vec<bool> =
                lab.iter().map(|&v| v as usize == c).collect();
            if !membership.iter().any(|&b| b) {
                continue;
            }
            let region = RegionMask::new(h, w, membership)?;
            let gamma_c = state.gamma.data()[c].into_f64();
            for ki in 0..k {
                let fc = f.channel(ni, ki);
                let g = d_fobj.channel(ni, ki);
                let (mean, std) = crate::norm::region_stats(fc, &region);
                let inv = 1.0 / (std + epsilon);
                for &p in region.indices() {
                    let p = p as usize;
                    let gv = g[p].into_f64();
                    dgamma[c] += gv * (fc[p].into_f64() - mean) * inv;
                    dbeta[c] += gv;
                }
                // standardization backward, scaled by gamma
                let scaled: Vec<T> = g
                    .iter()
                    .map(|&v| T::from_f64s(v.into_f64() * gamma_c))
                    .collect();
                region_norm_grad_channel(fc, &scaled, &region, epsilon, df.channel_mut(ni, ki));
            }
        }
    }
    Ok((
        df,
        Tensor::from_vec(&[c_total], dgamma.into_iter().map(T::from_f64s).collect())?,
        Tensor::from_vec(&[c_total], dbeta.into_iter().map(T::from_f64s).collect())?,
    ))
}

fn check_labels(labels: &LabelMap, n: usize, h: usize, w: usize) -> Result<()> {
    if labels.dims() != (n, h, w) {
        return Err(Error::ShapeMismatch(format!(
            "labels {:?} vs features ({n},{h},{w})",
            labels.dims()
        )));
    }
    Ok(())
}

/// The two alignment loss terms with their input gradients: pixel-mean
/// cross-entropy of the mask logits over C+1 classes, and the elementwise
/// mean absolute difference between transformed and objective features over
/// the pixels labeled with an aligned category (`label < C`).
pub struct SanLoss<T: Scalar> {
    pub ce: f64,
    pub l1: f64,
    pub dlogits: Tensor<T>,
    pub d_ftilde: Tensor<T>,
    pub d_fobj: Tensor<T>,
}

impl<T: Scalar> SanLoss<T> {
    pub fn total(&self) -> f64 {
        self.ce + self.l1
    }
}

pub fn san_loss<T: Scalar>(
    f_tilde: &Tensor<T>,
    f_obj: &Tensor<T>,
    logits: &Tensor<T>,
    labels_remapped: &LabelMap,
    categories: usize,
) -> Result<SanLoss<T>> {
    if f_tilde.dims() != f_obj.dims() {
        return Err(Error::ShapeMismatch("san loss feature shapes".into()));
    }
    let (n, k, h, w) = f_tilde.dim4()?;
    check_labels(labels_remapped, n, h, w)?;
    let (ce, dlogits) = crate::nn::cross_entropy(logits, labels_remapped)?;

    let plane = h * w;
    let mut counted = 0usize;
    for ni in 0..n {
        counted += labels_remapped
            .sample(ni)
            .iter()
            .filter(|&&v| (v as usize) < categories)
            .count();
    }
    let mut d_ftilde = Tensor::zeros(f_tilde.dims())?;
    let mut d_fobj = Tensor::zeros(f_obj.dims())?;
    let mut l1 = 0.0;
    if counted > 0 {
        let scale = 1.0 / (counted * k) as f64;
        for ni in 0..n {
            let lab = labels_remapped.sample(ni);
            for ki in 0..k {
                let a = f_tilde.channel(ni, ki);
                let b = f_obj.channel(ni, ki);
                let da = d_ftilde.channel_mut(ni, ki);
                for p in 0..plane {
                    if (lab[p] as usize) < categories {
                        let r = a[p].into_f64() - b[p].into_f64();
                        l1 += r.abs() * scale;
                        let s = if r > 0.0 {
                            scale
                        } else if r < 0.0 {
                            -scale
                        } else {
                            0.0
                        };
                        da[p] = T::from_f64s(s);
                    }
                }
            }
            for ki in 0..k {
                let da = d_ftilde.channel(ni, ki).to_vec();
                let db = d_fobj.channel_mut(ni, ki);
                for p in 0..plane {
                    db[p] = -da[p];
                }
            }
        }
    }
    Ok(SanLoss {
        ce,
        l1,
        dlogits,
        d_ftilde,
        d_fobj,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::norm::{instance_normalize, NormConfig};

    #[test]
    fn masks_are_uniform_for_zero_classifier() {
        let mut rng = SeededRng::new(1);
        let f = Tensor::<f64>::uniform(&[1, 4, 3, 3], -1.0, 1.0, &mut rng).unwrap();
        let mut state = SanState::<f64>::new(4, 3, &mut rng).unwrap();
        state.classifier = Conv2d::zeroed(4, 4, 1).unwrap();
        let (_, masks) = predict_masks(&f, &state).unwrap();
        for &v in masks.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn masks_form_a_simplex() {
        let mut rng = SeededRng::new(2);
        let f = Tensor::<f64>::uniform(&[2, 4, 3, 3], -1.0, 1.0, &mut rng).unwrap();
        let state = SanState::<f64>::new(4, 3, &mut rng).unwrap();
        let (_, masks) = predict_masks(&f, &state).unwrap();
        for ni in 0..2 {
            for p in 0..9 {
                let sum: f64 = (0..4).map(|c| masks.channel(ni, c)[p]).sum();
                assert!((sum - 1.0).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn mask_branch_scales_features() {
        let f = Tensor::<f64>::filled(&[1, 2, 1, 1], 4.0).unwrap();
        let masks =
            Tensor::<f64>::from_vec(&[1, 2, 1, 1], vec![0.25, 0.75]).unwrap();
        let b = mask_branch(&f, &masks, 0).unwrap();
        assert_eq!(b.data(), &[1.0, 1.0]);
        let ones = Tensor::<f64>::ones(&[1, 2, 1, 1]).unwrap();
        assert_eq!(mask_branch(&f, &ones, 0).unwrap().data(), f.data());
        let zeros = Tensor::<f64>::zeros(&[1, 2, 1, 1]).unwrap();
        assert!(mask_branch(&f, &zeros, 0)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn cfr_zero_weights_halve_the_branch() {
        let mut rng = SeededRng::new(3);
        let fp = Tensor::<f64>::uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng).unwrap();
        let mask = Tensor::<f64>::filled(&[1, 1, 4, 4], 0.5).unwrap();
        let conv = Conv2d::zeroed(3, 1, 3).unwrap();
        let (refined, gate) = cfr_refine(&fp, &mask, &conv).unwrap();
        assert!(gate.data().iter().all(|&g| g == 0.5));
        for (r, x) in refined.data().iter().zip(fp.data()) {
            assert!((r - 0.5 * x).abs() < 1e-12);
        }
        let zero_branch = Tensor::<f64>::zeros(&[1, 2, 4, 4]).unwrap();
        let (refined, _) = cfr_refine(&zero_branch, &mask, &conv).unwrap();
        assert!(refined.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn partition_region_examples() {
        let cfg = RegionConfig {
            k: 2,
            t: 1,
            max_iters: 50,
        };
        let mut vals = vec![0.0f64; 14];
        vals.extend_from_slice(&[1.0, 1.0]);
        let f = Tensor::from_vec(&[1, 1, 4, 4], vals).unwrap();
        let regions = partition_region(&f, &cfg).unwrap();
        assert_eq!(regions[0].count(), 2);
        assert!(regions[0].contains(14) && regions[0].contains(15));

        let constant = Tensor::<f64>::filled(&[1, 1, 4, 4], 0.3).unwrap();
        let regions = partition_region(&constant, &cfg).unwrap();
        assert!(regions[0].is_full());

        // bimodal map, t = k - 1 keeps everything but the lowest cluster
        let cfg = RegionConfig {
            k: 3,
            t: 2,
            max_iters: 50,
        };
        let mut vals = vec![0.0f64; 8];
        vals.extend_from_slice(&[5.0; 4]);
        vals.extend_from_slice(&[10.0; 4]);
        let f = Tensor::from_vec(&[1, 1, 4, 4], vals).unwrap();
        let regions = partition_region(&f, &cfg).unwrap();
        assert_eq!(regions[0].count(), 8);
        assert!(!regions[0].contains(0));
        assert!(regions[0].contains(8) && regions[0].contains(15));
    }

    #[test]
    fn san_forward_reduces_to_instance_norm() {
        // C = 1, saturated mask, zero refinement weights (constant gate), and
        // a frozen full-image region: the transform is IN up to epsilon
        let mut rng = SeededRng::new(4);
        let f = Tensor::<f64>::uniform(&[1, 3, 4, 4], -2.0, 2.0, &mut rng).unwrap();
        let mut state = SanState::<f64>::new(3, 1, &mut rng).unwrap();
        state.classifier = Conv2d::zeroed(3, 2, 1).unwrap();
        state.classifier.bias.data_mut()[0] = 50.0;
        state.cfr[0] = Conv2d::zeroed(3, 1, 3).unwrap();
        let cfg = SanConfig::default();
        let frozen = vec![vec![RegionMask::full(4, 4)]];
        let fwd = forward(&f, &state, &cfg, Some(&frozen), false).unwrap();
        let want = instance_normalize(&f, &NormConfig::default()).unwrap();
        for (got, want) in fwd.f_tilde.data().iter().zip(want.data()) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
    }

    #[test]
    fn san_forward_shape_and_mode_consistency() {
        let mut rng = SeededRng::new(5);
        let f = Tensor::<f64>::uniform(&[2, 4, 6, 6], 0.0, 2.0, &mut rng).unwrap();
        let state = SanState::<f64>::new(4, 2, &mut rng).unwrap();
        let cfg = SanConfig::default();
        let with_cache = forward(&f, &state, &cfg, None, true).unwrap();
        let without = forward(&f, &state, &cfg, None, false).unwrap();
        assert_eq!(with_cache.f_tilde.dims(), f.dims());
        assert_eq!(with_cache.f_tilde, without.f_tilde);
        assert_eq!(with_cache.masks, without.masks);
    }

    #[test]
    fn objective_features_standardize_category_pixels() {
        // region values [2, 4] with gamma 2, beta 1 -> [-1, 3]
        let f = Tensor::<f64>::from_vec(&[1, 1, 1, 4], vec![2.0, 4.0, 7.0, 9.0]).unwrap();
        let labels = LabelMap::new(1, 1, 4, vec![0, 0, 1, 1]).unwrap();
        let mut rng = SeededRng::new(6);
        let mut state = SanState::<f64>::new(1, 1, &mut rng).unwrap();
        state.gamma.data_mut()[0] = 2.0;
        state.beta.data_mut()[0] = 1.0;
        let obj = objective_features(&f, &labels, &state, 1e-5).unwrap();
        assert!((obj.data()[0] + 1.0).abs() < 1e-4);
        assert!((obj.data()[1] - 3.0).abs() < 1e-4);
        // "other" pixels (label == C) are untouched
        assert_eq!(obj.data()[2], 7.0);
        assert_eq!(obj.data()[3], 9.0);
    }

    #[test]
    fn objective_single_category_is_regional_standardization() {
        let mut rng = SeededRng::new(7);
        let f = Tensor::<f64>::uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut rng).unwrap();
        let labels = LabelMap::zeros(1, 3, 3);
        let state = SanState::<f64>::new(2, 1, &mut rng).unwrap();
        let obj = objective_features(&f, &labels, &state, 1e-5).unwrap();
        let want = instance_normalize(&f, &NormConfig::default()).unwrap();
        for (a, b) in obj.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn san_loss_examples() {
        // identical features and uniform logits over 2 classes -> ln 2
        let ft = Tensor::<f64>::ones(&[1, 1, 1, 2]).unwrap();
        let logits = Tensor::<f64>::zeros(&[1, 2, 1, 2]).unwrap();
        let labels = LabelMap::new(1, 1, 2, vec![0, 0]).unwrap();
        let loss = san_loss(&ft, &ft, &logits, &labels, 1).unwrap();
        assert!((loss.ce - (2f64).ln()).abs() < 1e-12);
        assert_eq!(loss.l1, 0.0);

        // near one-hot logits and matching features -> approximately 0
        let mut sharp = Tensor::<f64>::zeros(&[1, 2, 1, 2]).unwrap();
        sharp.channel_mut(0, 0)[0] = 50.0;
        sharp.channel_mut(0, 0)[1] = 50.0;
        let loss = san_loss(&ft, &ft, &sharp, &labels, 1).unwrap();
        assert!(loss.total() < 1e-9);

        // two counted pixels with residuals [1, -1] -> mean absolute 1.0
        let fo = Tensor::<f64>::from_vec(&[1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        let loss = san_loss(&ft, &fo, &logits, &labels, 1).unwrap();
        assert!((loss.l1 - 1.0).abs() < 1e-12);
        assert_eq!(loss.d_ftilde.data()[0], 0.5);
        assert_eq!(loss.d_ftilde.data()[1], -0.5);
        assert_eq!(loss.d_fobj.data()[0], -0.5);
    }

    /// Build a case where the classifier emits near-one-hot masks: channel c
    /// carries category c as a noisy indicator, and classifier row c reads
    /// exactly that channel with a large weight. Quadrant layout, C = K = 4.
    pub(crate) fn hard_mask_setup(
        seed: u64,
        h: usize,
        w: usize,
    ) -> (Tensor<f64>, SanState<f64>, LabelMap) {
        let mut rng = SeededRng::new(seed);
        let c_total = 4usize;
        let mut layout = LabelMap::zeros(1, h, w);
        for hh in 0..h {
            for ww in 0..w {
                let c = (hh >= h / 2) as u8 * 2 + (ww >= w / 2) as u8;
                layout.data_mut()[hh * w + ww] = c;
            }
        }
        let mut f = Tensor::<f64>::zeros(&[1, c_total, h, w]).unwrap();
        for ki in 0..c_total {
            let chan = f.channel_mut(0, ki);
            for (p, v) in chan.iter_mut().enumerate() {
                let c = layout.data()[p] as usize;
                *v = if c == ki {
                    rng.uniform(0.5, 1.5)
                } else {
                    rng.uniform(0.0, 0.05)
                };
            }
        }
        let mut state = SanState::<f64>::new(c_total, c_total, &mut rng).unwrap();
        state.classifier = Conv2d::zeroed(c_total, c_total + 1, 1).unwrap();
        for c in 0..c_total {
            // weight layout (Cout, Cin, 1, 1)
            state.classifier.weight.data_mut()[c * c_total + c] = 60.0;
        }
        for c in 0..c_total {
            state.cfr[c] = Conv2d::zeroed(3, 1, 3).unwrap();
        }
        (f, state, layout)
    }

    #[test]
    fn regional_standardization_under_hard_masks() {
        let (h, w) = (8, 8);
        let (f, state, layout) = hard_mask_setup(8, h, w);
        let cfg = SanConfig::default();
        let fwd = forward(&f, &state, &cfg, None, false).unwrap();
        for c in 0..4usize {
            let region = &fwd.regions[c][0];
            // the discovered region is the category's quadrant
            let want: Vec<usize> = (0..h * w)
                .filter(|&p| layout.data()[p] as usize == c)
                .collect();
            let got: Vec<usize> = region.indices().iter().map(|&p| p as usize).collect();
            assert_eq!(got, want, "category {c} region");
            for k in 0..4 {
                let (mean, std) =
                    crate::norm::region_stats(fwd.f_tilde.channel(0, k), region);
                assert!(mean.abs() < 1e-3, "category {c} ch {k} mean {mean}");
                assert!((std - 1.0).abs() < 1e-2, "category {c} ch {k} std {std}");
            }
        }
    }

    #[test]
    fn san_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(9);
        let f0 = Tensor::<f64>::uniform(&[1, 4, 6, 6], 0.2, 1.8, &mut rng).unwrap();
        let state0 = SanState::<f64>::new(4, 2, &mut rng).unwrap();
        let cfg = SanConfig::default();
        let labels = {
            let mut l = LabelMap::zeros(1, 6, 6);
            for p in 0..36 {
                l.data_mut()[p] = ((p / 3) % 3) as u8; // categories 0, 1, other
            }
            l
        };
        let base = forward(&f0, &state0, &cfg, None, true).unwrap();
        let frozen = base.regions.clone();

        let loss_fn = |f: &Tensor<f64>, state: &SanState<f64>| -> f64 {
            let fwd = forward(f, state, &cfg, Some(&frozen), true).unwrap();
            let fobj = objective_features(f, &labels, state, cfg.epsilon).unwrap();
            san_loss(&fwd.f_tilde, &fobj, &fwd.logits, &labels, 2)
                .unwrap()
                .total()
        };

        // analytic gradients assembled from the three backward pieces
        let fobj = objective_features(&f0, &labels, &state0, cfg.epsilon).unwrap();
        let loss = san_loss(&base.f_tilde, &fobj, &base.logits, &labels, 2).unwrap();
        let grads = backward(&f0, &state0, &cfg, &base, &loss.d_ftilde, Some(&loss.dlogits))
            .unwrap();
        let (df_obj, dgamma_obj, dbeta_obj) =
            objective_features_backward(&f0, &labels, &state0, cfg.epsilon, &loss.d_fobj)
                .unwrap();

        let mut df = grads.df.clone();
        df.add_assign(&df_obj).unwrap();
        let f_err = gradcheck::check(
            |v: &[f64]| {
                let f = Tensor::from_vec(f0.dims(), v.to_vec()).unwrap();
                loss_fn(&f, &state0)
            },
            f0.data(),
            df.data(),
            gradcheck::DEFAULT_STEP,
        );
        assert!(f_err < 1e-3, "feature grad err {f_err}");

        let mut dgamma = grads.dgamma.clone();
        dgamma.add_assign(&dgamma_obj).unwrap();
        let g_err = gradcheck::check(
            |v: &[f64]| {
                let mut s = state0.clone();
                s.gamma = Tensor::from_vec(&[2], v.to_vec()).unwrap();
                loss_fn(&f0, &s)
            },
            state0.gamma.data(),
            dgamma.data(),
            gradcheck::DEFAULT_STEP,
        );
        assert!(g_err < 1e-3, "gamma grad err {g_err}");

        let mut dbeta = grads.dbeta.clone();
        dbeta.add_assign(&dbeta_obj).unwrap();
        let b_err = gradcheck::check(
            |v: &[f64]| {
                let mut s = state0.clone();
                s.beta = Tensor::from_vec(&[2], v.to_vec()).unwrap();
                loss_fn(&f0, &s)
            },
            state0.beta.data(),
            dbeta.data(),
            gradcheck::DEFAULT_STEP,
        );
        assert!(b_err < 1e-3, "beta grad err {b_err}");

        let w_err = gradcheck::check(
            |v: &[f64]| {
                let mut s = state0.clone();
                s.classifier.weight =
                    Tensor::from_vec(state0.classifier.weight.dims(), v.to_vec()).unwrap();
                loss_fn(&f0, &s)
            },
            state0.classifier.weight.data(),
            grads.dcls_w.data(),
            gradcheck::DEFAULT_STEP,
        );
        assert!(w_err < 1e-3, "classifier weight grad err {w_err}");

        let cfr_err = gradcheck::check(
            |v: &[f64]| {
                let mut s = state0.clone();
                s.cfr[0].weight = Tensor::from_vec(state0.cfr[0].weight.dims(), v.to_vec()).unwrap();
                loss_fn(&f0, &s)
            },
            state0.cfr[0].weight.data(),
            grads.dcfr[0].0.data(),
            gradcheck::DEFAULT_STEP,
        );
        assert!(cfr_err < 1e-3, "cfr weight grad err {cfr_err}");
    }
}
