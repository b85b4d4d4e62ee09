//! Experiment runner: dataset generation, training, evaluation, the
//! four-configuration ablation, diagnostics dumps, and the operator
//! gradient-check suite. Each command reads/writes plain artifacts (SAWT
//! tensors, SAWM checkpoints, JSON records, CSV metrics) so runs are
//! independent and reproducible.

use crate::config::RunConfig;
use crate::domains::{self, Benchmark, DomainSample};
use crate::error::{Error, Result};
use crate::eval::{self, AlignmentReport, ConfusionMatrix, MetricsRow};
use crate::gradcheck::{self, OpReport};
use crate::labels::LabelMap;
use crate::net::{
    self, forward, FrozenSelections, NetConfig, SanMode, ToyNet, TrainConfig, WhitenMode,
};
use crate::nn::Conv2d;
use crate::norm::{self, NormConfig, RegionMask};
use crate::rng::SeededRng;
use crate::san::{self, SanConfig, SanState};
use crate::saw;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

/// Everything one training run produced. Two runs of the same config and
/// seed agree on every field except the wall-clock timings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config: RunConfig,
    pub losses: Vec<net::LossBreakdown>,
    /// (domain name, mIoU); domain 0 is the source.
    pub per_domain_miou: Vec<(String, f64)>,
    pub mean_step_seconds: f64,
    pub inference_ms: f64,
    pub alignment: Option<AlignmentReport>,
}

impl RunRecord {
    pub fn source_miou(&self) -> f64 {
        self.per_domain_miou
            .first()
            .map(|(_, m)| *m)
            .unwrap_or(0.0)
    }

    pub fn mean_target_miou(&self) -> f64 {
        let targets = &self.per_domain_miou[1..];
        if targets.is_empty() {
            return 0.0;
        }
        targets.iter().map(|(_, m)| m).sum::<f64>() / targets.len() as f64
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), serde_json::to_string_pretty(self)?)
            .map_err(|e| Error::io(format!("writing {}", path.as_ref().display()), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunRecord> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::io(format!("reading {}", path.as_ref().display()), e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Generate the synthetic benchmark and write it as a dataset directory.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<Benchmark> {
    let bench = domains::gen_benchmark(
        cfg.seed,
        &cfg.data,
        &domains::source_range(),
        &domains::target_ranges(),
    )?;
    domains::save_benchmark(&bench, out)?;
    Ok(bench)
}

/// Train a fresh network of the given layout on the bundle's source split.
pub fn train_on_benchmark(
    net_cfg: NetConfig,
    tc: &TrainConfig,
    bench: &Benchmark,
) -> Result<(ToyNet<f32>, net::TrainOutcome)> {
    let mut init_rng = SeededRng::new(tc.seed).derive(0x6e65_7477);
    let mut model = ToyNet::<f32>::new(net_cfg, &mut init_rng)?;
    let images: Vec<Tensor<f32>> = bench.train.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<LabelMap> = bench.train.iter().map(|s| s.labels.clone()).collect();
    let outcome = net::train(&mut model, &images, &labels, tc)?;
    Ok((model, outcome))
}

/// Per-domain mIoU of a trained model over every test split.
pub fn evaluate_on_benchmark(
    model: &ToyNet<f32>,
    bench: &Benchmark,
) -> Result<Vec<(String, f64, Vec<Option<f64>>)>> {
    let mut out = Vec::new();
    let mut splits: Vec<(String, &[DomainSample])> =
        vec![("test0".into(), &bench.test_source)];
    for (i, t) in bench.test_targets.iter().enumerate() {
        splits.push((format!("test{}", i + 1), t));
    }
    for (name, samples) in splits {
        let mut cm = ConfusionMatrix::new(model.cfg.num_classes);
        for s in samples {
            let pred = net::predict(model, &s.image)?;
            cm.accumulate(&s.labels, &pred)?;
        }
        out.push((name, cm.miou(), cm.per_class_iou()));
    }
    Ok(out)
}

/// Mean per-image forward time in milliseconds (a few warm-up passes, then
/// timed passes over the given samples).
pub fn measure_inference_ms(model: &ToyNet<f32>, samples: &[DomainSample], timed: usize) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    for s in samples.iter().take(3) {
        let _ = net::predict(model, &s.image);
    }
    let mut acc = 0.0;
    let mut count = 0usize;
    for s in samples.iter().cycle().take(timed.max(1)) {
        let start = Instant::now();
        let _ = net::predict(model, &s.image);
        acc += start.elapsed().as_secs_f64() * 1e3;
        count += 1;
    }
    acc / count as f64
}

/// Stage-2 feature taps (after the alignment transform) for the first
/// `limit` samples of a split, stacked into one batch.
pub fn stage_taps(
    model: &ToyNet<f32>,
    samples: &[DomainSample],
    limit: usize,
) -> Result<(Tensor<f32>, Tensor<f32>, LabelMap)> {
    let take = samples.len().min(limit).max(1);
    let mut t1_data = Vec::new();
    let mut t2_data = Vec::new();
    let mut labels = Vec::new();
    let (mut h, mut w) = (0, 0);
    for s in samples.iter().take(take) {
        let dims = s.image.dims();
        h = dims[1];
        w = dims[2];
        let batch = Tensor::from_vec(&[1, 3, h, w], s.image.data().to_vec())?;
        let cache = forward(model, &batch, false, None)?;
        t1_data.extend_from_slice(cache.t1.data());
        t2_data.extend_from_slice(cache.t2.data());
        labels.push(&s.labels);
    }
    let k1 = model.cfg.k1;
    let k2 = model.cfg.k2;
    Ok((
        Tensor::from_vec(&[take, k1, h, w], t1_data)?,
        Tensor::from_vec(&[take, k2, h, w], t2_data)?,
        LabelMap::stack(&labels.iter().map(|l| &**l).collect::<Vec<_>>())?,
    ))
}

fn alignment_over_domains(
    model: &ToyNet<f32>,
    bench: &Benchmark,
    limit: usize,
) -> Result<AlignmentReport> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut splits: Vec<&[DomainSample]> = vec![&bench.test_source];
    for t in &bench.test_targets {
        splits.push(t);
    }
    for samples in splits {
        let (_, t2, lab) = stage_taps(model, samples, limit)?;
        features.push(t2);
        labels.push(lab);
    }
    let idx = model.san2.as_ref().and_then(|s| {
        saw::select_channel_indexes(&s.classifier.weight, model.cfg.categories).ok()
    });
    eval::alignment_report(&features, &labels, model.cfg.categories, idx.as_ref())
}

/// Full training command: train, evaluate every domain, time inference,
/// build the alignment summary, and write checkpoint + record + metrics.
pub fn cmd_train(cfg: &RunConfig, data_dir: &Path, out_dir: &Path) -> Result<RunRecord> {
    cfg.validate()?;
    let bench = domains::load_benchmark(data_dir)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let net_cfg = cfg.net_config(bench.config.num_classes);
    let tc = cfg.train_config();
    let (model, outcome) = train_on_benchmark(net_cfg, &tc, &bench)?;
    let per_domain = evaluate_on_benchmark(&model, &bench)?;
    let inference_ms = measure_inference_ms(&model, &bench.test_source, 20);
    let alignment = alignment_over_domains(&model, &bench, 8).ok();

    let run_id = format!("run-{:08x}", cfg.seed);
    let record = RunRecord {
        run_id: run_id.clone(),
        config: cfg.clone(),
        losses: outcome.losses,
        per_domain_miou: per_domain.iter().map(|(n, m, _)| (n.clone(), *m)).collect(),
        mean_step_seconds: outcome.mean_step_seconds,
        inference_ms,
        alignment,
    };
    net::save_checkpoint(&model, out_dir.join("checkpoint.sawm"))?;
    record.save(out_dir.join("run_record.json"))?;
    let rows = metrics_rows(&run_id, &model, &bench, &per_domain)?;
    eval::write_metrics_csv(out_dir.join("metrics.csv"), &rows)?;
    Ok(record)
}

fn metrics_rows(
    run_id: &str,
    model: &ToyNet<f32>,
    bench: &Benchmark,
    per_domain: &[(String, f64, Vec<Option<f64>>)],
) -> Result<Vec<MetricsRow>> {
    // center distances of every domain against the source, per class, over
    // stage-2 taps
    let (_, src_t2, src_lab) = stage_taps(model, &bench.test_source, 8)?;
    let mut splits: Vec<&[DomainSample]> = vec![&bench.test_source];
    for t in &bench.test_targets {
        splits.push(t);
    }
    let mut rows = Vec::new();
    for ((name, miou, per_class), samples) in per_domain.iter().zip(splits) {
        let (_, t2, lab) = stage_taps(model, samples, 8)?;
        let report = eval::alignment_report(
            &[src_t2.clone(), t2],
            &[src_lab.clone(), lab],
            bench.config.num_classes,
            None,
        )?;
        for (class_id, iou) in per_class.iter().enumerate() {
            rows.push(MetricsRow {
                run_id: run_id.to_string(),
                domain: name.clone(),
                class_id: class_id as i64,
                iou: *iou,
                miou: *miou,
                center_dist: report.center_distance.get(class_id).copied().flatten(),
                offdiag: report.offdiag,
            });
        }
        rows.push(MetricsRow {
            run_id: run_id.to_string(),
            domain: name.clone(),
            class_id: -1,
            iou: None,
            miou: *miou,
            center_dist: Some(report.mean_center_distance),
            offdiag: report.offdiag,
        });
    }
    Ok(rows)
}

/// Evaluate a saved checkpoint on a dataset bundle and write metrics.
pub fn cmd_eval(
    checkpoint: &Path,
    data_dir: &Path,
    out_dir: &Path,
    run_id: &str,
) -> Result<Vec<MetricsRow>> {
    let model = net::load_checkpoint(checkpoint)?;
    let bench = domains::load_benchmark(data_dir)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let per_domain = evaluate_on_benchmark(&model, &bench)?;
    let rows = metrics_rows(run_id, &model, &bench, &per_domain)?;
    eval::write_metrics_csv(out_dir.join("metrics.csv"), &rows)?;
    Ok(rows)
}

/// One ablation configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationArm {
    Baseline,
    SanOnly,
    SawOnly,
    Full,
}

impl AblationArm {
    pub const ALL: [AblationArm; 4] = [
        AblationArm::Baseline,
        AblationArm::SanOnly,
        AblationArm::SawOnly,
        AblationArm::Full,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            AblationArm::Baseline => "baseline",
            AblationArm::SanOnly => "san",
            AblationArm::SawOnly => "saw",
            AblationArm::Full => "all",
        }
    }

    /// Network layout for this arm. The whitening-only arm keeps the
    /// auxiliary classifier (trained by its mask cross-entropy) because the
    /// category-related grouping ranks channels by its weights.
    pub fn net_config(&self, base: NetConfig) -> NetConfig {
        let mut cfg = base;
        match self {
            AblationArm::Baseline => {
                cfg.san_mode = SanMode::Off;
                cfg.whiten = WhitenMode::Off;
            }
            AblationArm::SanOnly => {
                cfg.san_mode = SanMode::Full;
                cfg.whiten = WhitenMode::Off;
            }
            AblationArm::SawOnly => {
                cfg.san_mode = SanMode::ClassifierOnly;
                cfg.whiten = WhitenMode::Saw;
            }
            AblationArm::Full => {
                cfg.san_mode = SanMode::Full;
                cfg.whiten = WhitenMode::Saw;
            }
        }
        cfg
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblateRow {
    pub arm: String,
    pub seed: u64,
    pub per_domain_miou: Vec<(String, f64)>,
    pub mean_step_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblateTable {
    pub rows: Vec<AblateRow>,
}

impl AblateTable {
    /// Mean mIoU per (arm, domain) across seeds, arms in canonical order.
    pub fn aggregated(&self) -> Vec<(String, Vec<(String, f64)>)> {
        let mut out = Vec::new();
        for arm in AblationArm::ALL {
            let rows: Vec<&AblateRow> = self
                .rows
                .iter()
                .filter(|r| r.arm == arm.label())
                .collect();
            if rows.is_empty() {
                continue;
            }
            let domains = rows[0].per_domain_miou.len();
            let mut means = Vec::new();
            for d in 0..domains {
                let name = rows[0].per_domain_miou[d].0.clone();
                let mean = rows
                    .iter()
                    .map(|r| r.per_domain_miou[d].1)
                    .sum::<f64>()
                    / rows.len() as f64;
                means.push((name, mean));
            }
            out.push((arm.label().to_string(), means));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("config,seed,domain,miou\n");
        for r in &self.rows {
            for (domain, miou) in &r.per_domain_miou {
                out.push_str(&format!("{},{},{},{}\n", r.arm, r.seed, domain, miou));
            }
        }
        out
    }
}

/// Run one ablation arm for one seed.
pub fn run_ablation_arm(
    arm: AblationArm,
    cfg: &RunConfig,
    bench: &Benchmark,
    seed: u64,
) -> Result<AblateRow> {
    let net_cfg = arm.net_config(cfg.net_config(bench.config.num_classes));
    let mut tc = cfg.train_config();
    tc.seed = seed;
    // the arm switches also gate the loss terms
    tc.lambda_san = match arm {
        AblationArm::SanOnly | AblationArm::Full | AblationArm::SawOnly => cfg.lambda_san,
        AblationArm::Baseline => 0.0,
    };
    tc.lambda_saw = match arm {
        AblationArm::SawOnly | AblationArm::Full => cfg.lambda_saw,
        _ => 0.0,
    };
    let (model, outcome) = train_on_benchmark(net_cfg, &tc, bench)?;
    let per_domain = evaluate_on_benchmark(&model, bench)?;
    Ok(AblateRow {
        arm: arm.label().to_string(),
        seed,
        per_domain_miou: per_domain.into_iter().map(|(n, m, _)| (n, m)).collect(),
        mean_step_seconds: outcome.mean_step_seconds,
    })
}

/// The four-arm ablation over the given number of seeds. Writes
/// `ablate.csv` (per-run rows) and `ablate_summary.csv` (seed means).
pub fn cmd_ablate(
    cfg: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
    seeds: usize,
) -> Result<AblateTable> {
    cfg.validate()?;
    let bench = domains::load_benchmark(data_dir)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let mut rows = Vec::new();
    for arm in AblationArm::ALL {
        for s in 0..seeds {
            let seed = cfg.seed + s as u64;
            let row = run_ablation_arm(arm, cfg, &bench, seed)?;
            println!(
                "{:<8} seed {}: {}",
                row.arm,
                row.seed,
                row.per_domain_miou
                    .iter()
                    .map(|(n, m)| format!("{n}={m:.4}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            );
            rows.push(row);
        }
    }
    let table = AblateTable { rows };
    std::fs::write(out_dir.join("ablate.csv"), table.to_csv())
        .map_err(|e| Error::io("writing ablate.csv", e))?;
    let mut summary = String::from("config,domain,mean_miou\n");
    for (arm, means) in table.aggregated() {
        for (domain, miou) in means {
            summary.push_str(&format!("{arm},{domain},{miou}\n"));
        }
    }
    std::fs::write(out_dir.join("ablate_summary.csv"), summary)
        .map_err(|e| Error::io("writing ablate_summary.csv", e))?;
    Ok(table)
}

/// Dump stage-tap features per domain and the cross-domain alignment report.
pub fn cmd_diagnose(checkpoint: &Path, data_dir: &Path, out_dir: &Path) -> Result<AlignmentReport> {
    let model = net::load_checkpoint(checkpoint)?;
    let bench = domains::load_benchmark(data_dir)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let mut splits: Vec<(String, &[DomainSample])> =
        vec![("test0".into(), &bench.test_source)];
    for (i, t) in bench.test_targets.iter().enumerate() {
        splits.push((format!("test{}", i + 1), t));
    }
    for (name, samples) in &splits {
        let (t1, t2, _) = stage_taps(&model, samples, 4)?;
        crate::io::save_tensor(out_dir.join(format!("tap_stage1_{name}.sawt")), &t1)?;
        crate::io::save_tensor(out_dir.join(format!("tap_stage2_{name}.sawt")), &t2)?;
    }
    let report = alignment_over_domains(&model, &bench, 8)?;
    std::fs::write(
        out_dir.join("alignment.json"),
        serde_json::to_string_pretty(&report)?,
    )
    .map_err(|e| Error::io("writing alignment.json", e))?;
    Ok(report)
}

const GRAD_TOLERANCE: f64 = 1e-3;

fn probe_loss(out: &Tensor<f64>, probe: &Tensor<f64>) -> f64 {
    out.data()
        .iter()
        .zip(probe.data())
        .map(|(a, b)| a * b)
        .sum()
}

/// The operator gradient-check suite: central differences at 64 bits with
/// step 1e-4 against every analytic gradient, three instances per operator.
/// Returns one report per operator.
pub fn cmd_gradcheck() -> Result<Vec<OpReport>> {
    let step = gradcheck::DEFAULT_STEP;
    let mut reports = Vec::new();
    let mut check_op =
        |name: &str, worst: f64, instances: usize| {
            reports.push(OpReport {
                name: name.to_string(),
                instances,
                worst_rel_error: worst,
                tolerance: GRAD_TOLERANCE,
            });
        };

    // instance normalization path
    let mut worst = 0.0f64;
    for inst in 0..3u64 {
        let mut rng = SeededRng::new(100 + inst);
        let f0 = Tensor::<f64>::uniform(&[2, 3, 3, 3], -2.0, 2.0, &mut rng)?;
        let probe = Tensor::<f64>::uniform(f0.dims(), -1.0, 1.0, &mut rng)?;
        let cfg = NormConfig::default();
        let analytic = norm::instance_normalize_backward(&f0, &cfg, &probe)?;
        let err = gradcheck::check(
            |v| {
                let f = Tensor::from_vec(f0.dims(), v.to_vec()).unwrap();
                probe_loss(&norm::instance_normalize(&f, &cfg).unwrap(), &probe)
            },
            f0.data(),
            analytic.data(),
            step,
        );
        worst = worst.max(err);
    }
    check_op("instance_normalize", worst, 3);

    // regional normalization path
    let mut worst = 0.0f64;
    for inst in 0..3u64 {
        let mut rng = SeededRng::new(200 + inst);
        let f0 = Tensor::<f64>::uniform(&[2, 3, 3, 3], -2.0, 2.0, &mut rng)?;
        let probe = Tensor::<f64>::uniform(f0.dims(), -1.0, 1.0, &mut rng)?;
        let membership: Vec<bool> = (0..9).map(|p| p % 2 == 0 || p == 3).collect();
        let regions: Vec<RegionMask> = (0..2)
            .map(|_| RegionMask::new(3, 3, membership.clone()).unwrap())
            .collect();
        let cfg = NormConfig::default();
        let analytic = norm::regional_normalize_backward(&f0, &regions, &cfg, &probe)?;
        let err = gradcheck::check(
            |v| {
                let f = Tensor::from_vec(f0.dims(), v.to_vec()).unwrap();
                probe_loss(
                    &norm::regional_normalize(&f, &regions, &cfg).unwrap(),
                    &probe,
                )
            },
            f0.data(),
            analytic.data(),
            step,
        );
        worst = worst.max(err);
    }
    check_op("regional_normalize", worst, 3);

    // refinement block (weight gradient through a full san backward)
    let mut worst = 0.0f64;
    for inst in 0..3u64 {
        let mut rng = SeededRng::new(300 + inst);
        let f0 = Tensor::<f64>::uniform(&[1, 2, 4, 4], 0.2, 1.5, &mut rng)?;
        let state0 = SanState::<f64>::new(2, 1, &mut rng)?;
        let cfg = SanConfig::default();
        let base = san::forward(&f0, &state0, &cfg, None, true)?;
        let frozen = base.regions.clone();
        let probe = Tensor::<f64>::uniform(f0.dims(), -1.0, 1.0, &mut rng)?;
        let grads = san::backward(&f0, &state0, &cfg, &base, &probe, None)?;
        let err = gradcheck::check(
            |v| {
                let mut s = state0.clone();
                s.cfr[0].weight = Tensor::from_vec(state0.cfr[0].weight.dims(), v.to_vec()).unwrap();
                let fwd = san::forward(&f0, &s, &cfg, Some(&frozen), false).unwrap();
                probe_loss(&fwd.f_tilde, &probe)
            },
            state0.cfr[0].weight.data(),
            grads.dcfr[0].0.data(),
            step,
        );
        worst = worst.max(err);
    }
    check_op("cfr_refine", worst, 3);

    // alignment loss (features, affines, classifier)
    let mut worst = 0.0f64;
    for inst in 0..3u64 {
        let mut rng = SeededRng::new(400 + inst);
        let f0 = Tensor::<f64>::uniform(&[1, 4, 6, 6], 0.2, 1.8, &mut rng)?;
        let state0 = SanState::<f64>::new(4, 2, &mut rng)?;
        let cfg = SanConfig::default();
        let labels = {
            let mut l = LabelMap::zeros(1, 6, 6);
            for p in 0..36 {
                l.data_mut()[p] = ((p / 3) % 3) as u8;
            }
            l
        };
        let base = san::forward(&f0, &state0, &cfg, None, true)?;
        let frozen = base.regions.clone();
        let fobj = san::objective_features(&f0, &labels, &state0, cfg.epsilon)?;
        let loss = san::san_loss(&base.f_tilde, &fobj, &base.logits, &labels, 2)?;
        let grads = san::backward(&f0, &state0, &cfg, &base, &loss.d_ftilde, Some(&loss.dlogits))?;
        let (df_obj, _, _) =
            san::objective_features_backward(&f0, &labels, &state0, cfg.epsilon, &loss.d_fobj)?;
        let mut df = grads.df.clone();
        df.add_assign(&df_obj)?;
        let err = gradcheck::check(
            |v| {
                let f = Tensor::from_vec(f0.dims(), v.to_vec()).unwrap();
                let fwd = san::forward(&f, &state0, &cfg, Some(&frozen), false).unwrap();
                let fobj = san::objective_features(&f, &labels, &state0, cfg.epsilon).unwrap();
                san::san_loss(&fwd.f_tilde, &fobj, &fwd.logits, &labels, 2)
                    .unwrap()
                    .total()
            },
            f0.data(),
            df.data(),
            step,
        );
        worst = worst.max(err);
    }
    check_op("san_loss", worst, 3);

    // whitening losses
    let kink_free = |dims: &[usize], groups: usize, seed0: u64| -> Tensor<f64> {
        for seed in seed0.. {
            let mut rng = SeededRng::new(seed);
            let f = Tensor::<f64>::uniform(dims, -1.5, 1.5, &mut rng).unwrap();
            let (n, k, _, _) = f.dim4().unwrap();
            let per = k / groups;
            let mut ok = true;
            for ni in 0..n {
                for g in 0..groups {
                    let rows: Vec<&[f64]> = (0..per).map(|r| f.channel(ni, g * per + r)).collect();
                    let cov = norm::cov_of_rows(&rows);
                    for i in 0..per {
                        for j in 0..per {
                            let target = if i == j { 1.0 } else { 0.0 };
                            if (cov.get(i, j) - target).abs() < gradcheck::KINK_MARGIN {
                                ok = false;
                            }
                        }
                    }
                }
            }
            if ok {
                return f;
            }
        }
        unreachable!()
    };
    let mut worst = 0.0f64;
    for inst in 0..3u64 {
        let f0 = kink_free(&[1, 3, 3, 3], 1, 500 + inst * 7);
        let (_, grad) = norm::iw_loss(&f0)?;
        let err = gradcheck::check(
            |v| {
                let f = Tensor::from_vec(f0.dims(), v.to_vec()).unwrap();
                norm::iw_loss(&f).unwrap().0
            },
            f0.data(),
            grad.data(),
            step,
        );
        worst = worst.max(err);
    }
    check_op("iw_loss", worst, 3);

    let mut worst = 0.0f64;
    for inst in 0..3u64 {
        let f0 = kink_free(&[2, 4, 3, 3], 2, 600 + inst * 7);
        let (_, grad) = norm::giw_loss(&f0, 2)?;
        let err = gradcheck::check(
            |v| {
                let f = Tensor::from_vec(f0.dims(), v.to_vec()).unwrap();
                norm::giw_loss(&f, 2).unwrap().0
            },
            f0.data(),
            grad.data(),
            step,
        );
        worst = worst.max(err);
    }
    check_op("giw_loss", worst, 3);

    let mut worst = 0.0f64;
    for inst in 0..3u64 {
        let mut found = None;
        for seed in (700 + inst * 17).. {
            let mut rng = SeededRng::new(seed);
            let f = Tensor::<f64>::uniform(&[2, 4, 3, 3], -1.5, 1.5, &mut rng)?;
            let w = Tensor::<f64>::uniform(&[2, 4], 0.3, 1.2, &mut rng)?;
            let idx = saw::select_channel_indexes(&w, 2)?;
            let groups = saw::build_groups(&f, &idx)?;
            let mut ok = true;
            for g in &groups {
                for ni in 0..2 {
                    let rows: Vec<&[f64]> = (0..2).map(|c| g.channel(ni, c)).collect();
                    let cov = norm::cov_of_rows(&rows);
                    for i in 0..2 {
                        for j in 0..2 {
                            let target = if i == j { 1.0 } else { 0.0 };
                            if (cov.get(i, j) - target).abs() < gradcheck::KINK_MARGIN {
                                ok = false;
                            }
                        }
                    }
                }
            }
            if ok {
                found = Some((f, w, idx));
                break;
            }
        }
        let (f0, w0, idx) = found.unwrap();
        let (_, grad_f, grad_w) = saw::saw_loss(&f0, &idx)?;
        let err_f = gradcheck::check(
            |v| {
                let f = Tensor::from_vec(f0.dims(), v.to_vec()).unwrap();
                saw::saw_loss(&f, &idx).unwrap().0
            },
            f0.data(),
            grad_f.data(),
            step,
        );
        let err_w = gradcheck::check(
            |v| {
                let w = Tensor::<f64>::from_vec(&[2, 4], v.to_vec()).unwrap();
                let refreshed = saw::refresh_weights(&idx, &w).unwrap();
                saw::saw_loss(&f0, &refreshed).unwrap().0
            },
            w0.data(),
            grad_w.data(),
            step,
        );
        worst = worst.max(err_f).max(err_w);
    }
    check_op("saw_loss", worst, 3);

    // convolution
    let mut worst = 0.0f64;
    for inst in 0..3u64 {
        let mut rng = SeededRng::new(800 + inst);
        let kernel = if inst == 2 { 1 } else { 3 };
        let x0 = Tensor::<f64>::uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng)?;
        let conv0 = Conv2d::<f64>::new(2, 2, kernel, 0.5, &mut rng)?;
        let probe = Tensor::<f64>::uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng)?;
        let (dx, dw, db) = conv0.backward(&x0, &probe)?;
        let ex = gradcheck::check(
            |v| {
                let x = Tensor::from_vec(x0.dims(), v.to_vec()).unwrap();
                probe_loss(&conv0.forward(&x).unwrap(), &probe)
            },
            x0.data(),
            dx.data(),
            step,
        );
        let ew = gradcheck::check(
            |v| {
                let mut c = conv0.clone();
                c.weight = Tensor::from_vec(conv0.weight.dims(), v.to_vec()).unwrap();
                probe_loss(&c.forward(&x0).unwrap(), &probe)
            },
            conv0.weight.data(),
            dw.data(),
            step,
        );
        let eb = gradcheck::check(
            |v| {
                let mut c = conv0.clone();
                c.bias = Tensor::from_vec(&[2], v.to_vec()).unwrap();
                probe_loss(&c.forward(&x0).unwrap(), &probe)
            },
            conv0.bias.data(),
            db.data(),
            step,
        );
        worst = worst.max(ex).max(ew).max(eb);
    }
    check_op("conv2d", worst, 3);

    // pixel-mean cross-entropy
    let mut worst = 0.0f64;
    for inst in 0..3u64 {
        let mut rng = SeededRng::new(900 + inst);
        let logits0 = Tensor::<f64>::uniform(&[1, 3, 3, 3], -1.0, 1.0, &mut rng)?;
        let ids: Vec<u8> = (0..9).map(|_| rng.below(3) as u8).collect();
        let labels = LabelMap::new(1, 3, 3, ids)?;
        let (_, grad) = crate::nn::cross_entropy(&logits0, &labels)?;
        let err = gradcheck::check(
            |v| {
                let l = Tensor::from_vec(logits0.dims(), v.to_vec()).unwrap();
                crate::nn::cross_entropy(&l, &labels).unwrap().0
            },
            logits0.data(),
            grad.data(),
            step,
        );
        worst = worst.max(err);
    }
    check_op("cross_entropy", worst, 3);

    // full model end to end
    let mut worst = 0.0f64;
    for inst in 0..3u64 {
        let cfg = NetConfig {
            k1: 4,
            k2: 4,
            num_classes: 3,
            categories: 2,
            san_mode: SanMode::Full,
            whiten: WhitenMode::Saw,
            san: SanConfig::default(),
        };
        let labels = {
            let mut l = LabelMap::zeros(1, 8, 8);
            for p in 0..64 {
                l.data_mut()[p] = ((p / 4) % 3) as u8;
            }
            l
        };
        let (model, x) = net::kink_free_instance(cfg, &labels, 1000 + inst * 911, 2000)
            .ok_or_else(|| Error::Config("no kink-free end-to-end instance found".into()))?;
        let cache = forward(&model, &x, true, None)?;
        let frozen = FrozenSelections {
            regions1: cache.san1.as_ref().map(|s| s.regions.clone()),
            regions2: cache.san2.as_ref().map(|s| s.regions.clone()),
            idx1: model
                .san1
                .as_ref()
                .map(|s| saw::select_channel_indexes(&s.classifier.weight, 2).unwrap()),
            idx2: model
                .san2
                .as_ref()
                .map(|s| saw::select_channel_indexes(&s.classifier.weight, 2).unwrap()),
        };
        let (_, grads, _) = net::total_loss(&model, &x, &labels, 1.0, 1.0, Some(&frozen))?;
        let mut flat = Vec::new();
        let mut analytic = Vec::new();
        for (name, t) in model.param_entries() {
            flat.extend_from_slice(t.data());
            analytic.extend_from_slice(grads.get(&name).unwrap().data());
        }
        let err = gradcheck::check(
            |v| {
                let mut probe_net = model.clone();
                let mut off = 0usize;
                for (_, t) in probe_net.param_entries_mut() {
                    let len = t.len();
                    t.data_mut().copy_from_slice(&v[off..off + len]);
                    off += len;
                }
                net::total_loss(&probe_net, &x, &labels, 1.0, 1.0, Some(&frozen))
                    .unwrap()
                    .0
                    .total
            },
            &flat,
            &analytic,
            step,
        );
        worst = worst.max(err);
    }
    check_op("total_loss", worst, 3);

    Ok(reports)
}
