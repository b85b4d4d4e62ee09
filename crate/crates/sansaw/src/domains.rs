//! Procedural multi-domain synthetic segmentation benchmark.
//!
//! Scenes have fixed semantics (layered geometry: background, rectangle,
//! disk, horizontal stripe, painted in saturated per-class colors with mild
//! texture) and per-domain photometric styles (per-channel gain and bias,
//! gamma, additive noise) drawn from disjoint ranges. Labels come from the
//! exact geometry and never change with styling, so the only train/test gap
//! is the style axis. Everything is a pure function of the seeds.

use crate::error::{Error, Result};
use crate::io;
use crate::labels::LabelMap;
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Per-parameter sampling intervals for one domain's style.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleRange {
    pub gain: (f64, f64),
    pub bias: (f64, f64),
    pub gamma: (f64, f64),
    pub noise: (f64, f64),
}

impl StyleRange {
    /// Two ranges count as disjoint when at least one photometric parameter
    /// cannot overlap, which is what guarantees a measurable style gap.
    pub fn disjoint_from(&self, other: &StyleRange) -> bool {
        fn apart(a: (f64, f64), b: (f64, f64)) -> bool {
            a.1 < b.0 || b.1 < a.0
        }
        apart(self.gain, other.gain)
            || apart(self.bias, other.bias)
            || apart(self.gamma, other.gamma)
    }
}

/// Identity-centered source style.
pub fn source_range() -> StyleRange {
    StyleRange {
        gain: (0.9, 1.1),
        bias: (-0.04, 0.04),
        gamma: (0.9, 1.1),
        noise: (0.0, 0.02),
    }
}

/// Three target styles: dark/compressed, bright/expanded, washed out/noisy.
pub fn target_ranges() -> Vec<StyleRange> {
    vec![
        StyleRange {
            gain: (0.45, 0.6),
            bias: (-0.12, -0.06),
            gamma: (1.4, 1.8),
            noise: (0.01, 0.03),
        },
        StyleRange {
            gain: (1.35, 1.6),
            bias: (0.05, 0.15),
            gamma: (0.55, 0.75),
            noise: (0.0, 0.02),
        },
        StyleRange {
            gain: (0.75, 0.85),
            bias: (0.16, 0.28),
            gamma: (0.9, 1.1),
            noise: (0.04, 0.08),
        },
    ]
}

/// A concrete style: per-channel gain/bias, shared gamma, noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: u32,
    pub channel_gain: [f64; 3],
    pub channel_bias: [f64; 3],
    pub gamma: f64,
    pub noise_std: f64,
}

impl DomainSpec {
    pub fn sample(id: u32, range: &StyleRange, rng: &mut SeededRng) -> Self {
        let mut gain = [0.0; 3];
        let mut bias = [0.0; 3];
        for ch in 0..3 {
            gain[ch] = rng.uniform(range.gain.0, range.gain.1);
            bias[ch] = rng.uniform(range.bias.0, range.bias.1);
        }
        DomainSpec {
            id,
            channel_gain: gain,
            channel_bias: bias,
            gamma: rng.uniform(range.gamma.0, range.gamma.1),
            noise_std: rng.uniform(range.noise.0, range.noise.1),
        }
    }

    pub fn identity(id: u32) -> Self {
        DomainSpec {
            id,
            channel_gain: [1.0; 3],
            channel_bias: [0.0; 3],
            gamma: 1.0,
            noise_std: 0.0,
        }
    }
}

/// One styled image with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSample {
    pub image: Tensor<f32>,
    pub labels: LabelMap,
    pub domain: u32,
    pub scene_seed: u64,
}

// saturated, well-separated base colors per class id
const PALETTE: [[f64; 3]; 9] = [
    [0.15, 0.25, 0.75], // background blue
    [0.85, 0.15, 0.15], // rectangle red
    [0.15, 0.8, 0.2],   // disk green
    [0.9, 0.85, 0.15],  // stripe yellow
    [0.8, 0.2, 0.8],    // magenta
    [0.15, 0.8, 0.8],   // cyan
    [0.9, 0.55, 0.15],  // orange
    [0.55, 0.3, 0.75],  // purple
    [0.5, 0.5, 0.5],    // gray
];

/// Deterministic layered scene: background, one axis-aligned rectangle, one
/// disk, one horizontal stripe (classes painted in that z-order); extra
/// classes beyond 4 cycle through the same shape kinds. Labels follow the
/// exact geometry.
pub fn gen_scene(seed: u64, h: usize, w: usize, num_classes: usize) -> (Tensor<f32>, LabelMap) {
    assert!((2..=8).contains(&num_classes), "num_classes in 2..=8");
    assert!(h >= 32 && w >= 32, "scene size at least 32x32");
    let mut rng = SeededRng::new(seed).derive(0x7363_656e);
    let mut labels = LabelMap::zeros(1, h, w);

    for class in 1..num_classes {
        let shape_kind = (class - 1) % 3;
        match shape_kind {
            0 => {
                // axis-aligned rectangle, up to a quarter of the image
                let rw = (rng.uniform(0.25, 0.5) * w as f64) as usize;
                let rh = (rng.uniform(0.25, 0.5) * h as f64) as usize;
                let x0 = rng.below(w - rw);
                let y0 = rng.below(h - rh);
                for y in y0..y0 + rh {
                    for x in x0..x0 + rw {
                        labels.data_mut()[y * w + x] = class as u8;
                    }
                }
            }
            1 => {
                // disk
                let r = rng.uniform(0.09, 0.16) * h.min(w) as f64;
                let cx = rng.uniform(r, w as f64 - r);
                let cy = rng.uniform(r, h as f64 - r);
                for y in 0..h {
                    for x in 0..w {
                        let dx = x as f64 + 0.5 - cx;
                        let dy = y as f64 + 0.5 - cy;
                        if dx * dx + dy * dy <= r * r {
                            labels.data_mut()[y * w + x] = class as u8;
                        }
                    }
                }
            }
            _ => {
                // horizontal stripe band
                let sh = ((rng.uniform(0.06, 0.12) * h as f64) as usize).max(2);
                let y0 = rng.below(h - sh);
                for y in y0..y0 + sh {
                    for x in 0..w {
                        labels.data_mut()[y * w + x] = class as u8;
                    }
                }
            }
        }
    }

    let mut image = Tensor::<f32>::zeros(&[3, h, w]).unwrap();
    let plane = h * w;
    for p in 0..plane {
        let class = labels.data()[p] as usize;
        let color = PALETTE[class];
        for ch in 0..3 {
            let texture = 0.03 * rng.uniform(-1.0, 1.0);
            image.data_mut()[ch * plane + p] = (color[ch] + texture).clamp(0.0, 1.0) as f32;
        }
    }
    (image, labels)
}

/// Photometric styling: `clip(gain * x^gamma + bias + noise, 0, 1)` per
/// channel. Labels are untouched by construction.
pub fn apply_style(image: &Tensor<f32>, spec: &DomainSpec, rng: &mut SeededRng) -> Tensor<f32> {
    let dims = image.dims();
    let plane: usize = dims[1] * dims[2];
    let mut out = image.clone();
    for ch in 0..3 {
        let gain = spec.channel_gain[ch];
        let bias = spec.channel_bias[ch];
        for p in 0..plane {
            let x = out.data()[ch * plane + p] as f64;
            let noise = if spec.noise_std > 0.0 {
                spec.noise_std * rng.normal()
            } else {
                0.0
            };
            let v = gain * x.max(0.0).powf(spec.gamma) + bias + noise;
            out.data_mut()[ch * plane + p] = v.clamp(0.0, 1.0) as f32;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub n_train: usize,
    pub n_test_per_domain: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            height: 64,
            width: 64,
            num_classes: 4,
            n_train: 200,
            n_test_per_domain: 50,
        }
    }
}

/// A generated dataset bundle: source train/test plus one held-out test set
/// per target domain. Scene seeds are drawn independently per split so no
/// scene leaks between splits.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub seed: u64,
    pub config: BenchmarkConfig,
    pub specs: Vec<DomainSpec>,
    pub train: Vec<DomainSample>,
    pub test_source: Vec<DomainSample>,
    pub test_targets: Vec<Vec<DomainSample>>,
}

impl Benchmark {
    pub fn domain_count(&self) -> usize {
        self.specs.len()
    }

    /// Split names in file order: train, test0 (source), test1..testD.
    pub fn split_names(&self) -> Vec<String> {
        let mut names = vec!["train".to_string(), "test0".to_string()];
        for i in 1..self.specs.len() {
            names.push(format!("test{i}"));
        }
        names
    }
}

fn mean_intensity(samples: &[DomainSample]) -> f64 {
    let mut acc = 0.0;
    let mut count = 0usize;
    for s in samples {
        acc += s.image.data().iter().map(|&v| v as f64).sum::<f64>();
        count += s.image.len();
    }
    acc / count as f64
}

fn gen_split(
    rng: &SeededRng,
    tag: u64,
    count: usize,
    spec: &DomainSpec,
    cfg: &BenchmarkConfig,
) -> Vec<DomainSample> {
    let mut scene_rng = rng.derive(tag);
    (0..count)
        .map(|i| {
            let scene_seed = scene_rng.next_u64();
            let (base, labels) = gen_scene(scene_seed, cfg.height, cfg.width, cfg.num_classes);
            let mut style_rng = rng.derive(tag ^ 0x7374_796c).derive(i as u64);
            let image = apply_style(&base, spec, &mut style_rng);
            DomainSample {
                image,
                labels,
                domain: spec.id,
                scene_seed,
            }
        })
        .collect()
}

/// Generate the full bundle. Target ranges must be disjoint from the source
/// range; domain specs are resampled (bounded retries) until every target's
/// mean intensity differs from the source by more than 0.05.
pub fn gen_benchmark(
    seed: u64,
    cfg: &BenchmarkConfig,
    source: &StyleRange,
    targets: &[StyleRange],
) -> Result<Benchmark> {
    for (i, t) in targets.iter().enumerate() {
        if !t.disjoint_from(source) {
            return Err(Error::Config(format!(
                "target style range {i} overlaps the source range"
            )));
        }
    }
    let root = SeededRng::new(seed).derive(0x6265_6e63);
    let mut spec_rng = root.derive(0x7370_6563);

    for _attempt in 0..32 {
        let source_spec = DomainSpec::sample(0, source, &mut spec_rng);
        let target_specs: Vec<DomainSpec> = targets
            .iter()
            .enumerate()
            .map(|(i, r)| DomainSpec::sample(i as u32 + 1, r, &mut spec_rng))
            .collect();

        let train = gen_split(&root, 1, cfg.n_train, &source_spec, cfg);
        let test_source = gen_split(&root, 2, cfg.n_test_per_domain, &source_spec, cfg);
        let test_targets: Vec<Vec<DomainSample>> = target_specs
            .iter()
            .enumerate()
            .map(|(i, spec)| gen_split(&root, 3 + i as u64, cfg.n_test_per_domain, spec, cfg))
            .collect();

        let src_mean = mean_intensity(&test_source);
        let gap_ok = test_targets
            .iter()
            .all(|t| (mean_intensity(t) - src_mean).abs() > 0.05);
        if gap_ok {
            let mut specs = vec![source_spec];
            specs.extend(target_specs);
            return Ok(Benchmark {
                seed,
                config: cfg.clone(),
                specs,
                train,
                test_source,
                test_targets,
            });
        }
    }
    Err(Error::Config(
        "could not realize a style gap above 0.05 within 32 spec draws".into(),
    ))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    seed: u64,
    config: BenchmarkConfig,
    specs: Vec<DomainSpec>,
    splits: Vec<String>,
    counts: Vec<usize>,
}

fn labels_to_tensor(labels: &LabelMap) -> Tensor<f32> {
    let (_, h, w) = labels.dims();
    Tensor::from_vec(&[h, w], labels.data().iter().map(|&v| v as f32).collect())
        .expect("label tensor")
}

fn tensor_to_labels(t: &Tensor<f32>) -> Result<LabelMap> {
    let dims = t.dims();
    if dims.len() != 2 {
        return Err(Error::Format("label tensor must be rank 2".into()));
    }
    LabelMap::new(
        1,
        dims[0],
        dims[1],
        t.data().iter().map(|&v| v as u8).collect(),
    )
}

/// Write the bundle as a dataset directory: `manifest.json` plus
/// `img_<split>_<i>.sawt` / `lbl_<split>_<i>.sawt`.
pub fn save_benchmark(bench: &Benchmark, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let splits = bench.split_names();
    let all: Vec<&[DomainSample]> = {
        let mut v: Vec<&[DomainSample]> = vec![&bench.train, &bench.test_source];
        for t in &bench.test_targets {
            v.push(t);
        }
        v
    };
    let manifest = Manifest {
        seed: bench.seed,
        config: bench.config.clone(),
        specs: bench.specs.clone(),
        splits: splits.clone(),
        counts: all.iter().map(|s| s.len()).collect(),
    };
    let manifest_json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), manifest_json)
        .map_err(|e| Error::io("writing manifest.json", e))?;
    for (split, samples) in splits.iter().zip(all) {
        for (i, s) in samples.iter().enumerate() {
            io::save_tensor(dir.join(format!("img_{split}_{i}.sawt")), &s.image)?;
            io::save_tensor(
                dir.join(format!("lbl_{split}_{i}.sawt")),
                &labels_to_tensor(&s.labels),
            )?;
        }
    }
    Ok(())
}

pub fn load_benchmark(dir: impl AsRef<Path>) -> Result<Benchmark> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_str(
        &std::fs::read_to_string(dir.join("manifest.json"))
            .map_err(|e| Error::io(format!("reading {}/manifest.json", dir.display()), e))?,
    )?;
    let mut splits = Vec::new();
    for (split, &count) in manifest.splits.iter().zip(&manifest.counts) {
        let domain = if split == "train" {
            0u32
        } else {
            split
                .trim_start_matches("test")
                .parse::<u32>()
                .map_err(|_| Error::Format(format!("unrecognized split name `{split}`")))?
        };
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let image = io::load_tensor(dir.join(format!("img_{split}_{i}.sawt")))?;
            let labels =
                tensor_to_labels(&io::load_tensor(dir.join(format!("lbl_{split}_{i}.sawt")))?)?;
            samples.push(DomainSample {
                image,
                labels,
                domain,
                scene_seed: 0, // not persisted; identity lives in the manifest seed
            });
        }
        splits.push(samples);
    }
    let mut it = splits.into_iter();
    let train = it.next().unwrap_or_default();
    let test_source = it.next().unwrap_or_default();
    let test_targets: Vec<Vec<DomainSample>> = it.collect();
    Ok(Benchmark {
        seed: manifest.seed,
        config: manifest.config,
        specs: manifest.specs,
        train,
        test_source,
        test_targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_deterministic() {
        let (img_a, lab_a) = gen_scene(42, 32, 32, 4);
        let (img_b, lab_b) = gen_scene(42, 32, 32, 4);
        assert_eq!(img_a, img_b);
        assert_eq!(lab_a, lab_b);
        let (img_c, _) = gen_scene(43, 32, 32, 4);
        assert_ne!(img_a, img_c);
    }

    #[test]
    fn every_class_appears_across_the_dataset() {
        for num_classes in [2usize, 4, 6] {
            let mut seen = vec![false; num_classes];
            for seed in 0..30u64 {
                let (_, labels) = gen_scene(seed, 32, 32, num_classes);
                for &v in labels.data() {
                    seen[v as usize] = true;
                }
            }
            assert!(seen.iter().all(|&s| s), "classes missing at {num_classes}");
        }
    }

    #[test]
    fn background_fraction_stays_above_threshold() {
        for seed in 0..100u64 {
            let (_, labels) = gen_scene(seed, 64, 64, 4);
            let bg = labels.data().iter().filter(|&&v| v == 0).count();
            let frac = bg as f64 / labels.data().len() as f64;
            assert!(frac > 0.3, "seed {seed}: background fraction {frac}");
        }
    }

    #[test]
    fn stripe_band_spans_full_rows() {
        // the stripe is painted last, so its rows survive intact
        let (_, labels) = gen_scene(7, 48, 48, 4);
        let (_, h, w) = labels.dims();
        let full_rows = (0..h)
            .filter(|&y| (0..w).all(|x| labels.get(0, y, x) == 3))
            .count();
        assert!(full_rows >= 2, "stripe rows {full_rows}");
    }

    #[test]
    fn identity_style_is_identity() {
        let (img, _) = gen_scene(1, 32, 32, 4);
        let spec = DomainSpec::identity(0);
        let styled = apply_style(&img, &spec, &mut SeededRng::new(5));
        assert_eq!(img, styled);
    }

    #[test]
    fn gamma_two_squares_values() {
        let img = Tensor::<f32>::filled(&[3, 32, 32], 0.5).unwrap();
        let spec = DomainSpec {
            id: 0,
            channel_gain: [1.0; 3],
            channel_bias: [0.0; 3],
            gamma: 2.0,
            noise_std: 0.0,
        };
        let styled = apply_style(&img, &spec, &mut SeededRng::new(5));
        for &v in styled.data() {
            assert!((v - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn noise_is_reproducible_from_seed() {
        let (img, _) = gen_scene(2, 32, 32, 4);
        let spec = DomainSpec {
            id: 1,
            channel_gain: [1.0; 3],
            channel_bias: [0.0; 3],
            gamma: 1.0,
            noise_std: 0.05,
        };
        let a = apply_style(&img, &spec, &mut SeededRng::new(9));
        let b = apply_style(&img, &spec, &mut SeededRng::new(9));
        assert_eq!(a, b);
        let c = apply_style(&img, &spec, &mut SeededRng::new(10));
        assert_ne!(a, c);
    }

    fn small_cfg() -> BenchmarkConfig {
        BenchmarkConfig {
            height: 32,
            width: 32,
            num_classes: 4,
            n_train: 12,
            n_test_per_domain: 6,
        }
    }

    #[test]
    fn benchmark_counts_and_determinism() {
        let cfg = small_cfg();
        let a = gen_benchmark(11, &cfg, &source_range(), &target_ranges()).unwrap();
        assert_eq!(a.train.len(), 12);
        assert_eq!(a.test_source.len(), 6);
        assert_eq!(a.test_targets.len(), 3);
        for t in &a.test_targets {
            assert_eq!(t.len(), 6);
        }
        let b = gen_benchmark(11, &cfg, &source_range(), &target_ranges()).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test_targets, b.test_targets);
    }

    #[test]
    fn labels_are_invariant_across_styles() {
        let (base, labels) = gen_scene(77, 32, 32, 4);
        let mut rng = SeededRng::new(4);
        for range in target_ranges() {
            let spec = DomainSpec::sample(1, &range, &mut rng);
            let styled = apply_style(&base, &spec, &mut SeededRng::new(6));
            assert!(styled.data().iter().all(|v| v.is_finite()));
            assert!(styled.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        let (_, labels_again) = gen_scene(77, 32, 32, 4);
        assert_eq!(labels, labels_again);
    }

    #[test]
    fn overlapping_ranges_are_rejected() {
        let cfg = small_cfg();
        let bad = vec![source_range()];
        assert!(gen_benchmark(1, &cfg, &source_range(), &bad).is_err());
    }

    #[test]
    fn intensity_gap_exceeds_threshold() {
        let cfg = small_cfg();
        let b = gen_benchmark(13, &cfg, &source_range(), &target_ranges()).unwrap();
        let src = mean_intensity(&b.test_source);
        for t in &b.test_targets {
            assert!((mean_intensity(t) - src).abs() > 0.05);
        }
    }

    #[test]
    fn color_mean_classifier_separates_domains() {
        // nearest-centroid on per-image mean color distinguishes source from
        // each target with > 90% accuracy, confirming a real style shift
        let cfg = BenchmarkConfig {
            n_train: 20,
            n_test_per_domain: 20,
            ..small_cfg()
        };
        let b = gen_benchmark(17, &cfg, &source_range(), &target_ranges()).unwrap();
        let mean_color = |s: &DomainSample| -> [f64; 3] {
            let plane = 32 * 32;
            let mut m = [0.0; 3];
            for ch in 0..3 {
                m[ch] = s.image.data()[ch * plane..(ch + 1) * plane]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>()
                    / plane as f64;
            }
            m
        };
        let dist = |a: &[f64; 3], b: &[f64; 3]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
        };
        for target in &b.test_targets {
            let centroid = |samples: &[DomainSample]| -> [f64; 3] {
                let mut c = [0.0; 3];
                let half = &samples[..samples.len() / 2];
                for s in half {
                    let m = mean_color(s);
                    for ch in 0..3 {
                        c[ch] += m[ch] / half.len() as f64;
                    }
                }
                c
            };
            let c_src = centroid(&b.test_source);
            let c_tgt = centroid(target);
            let mut correct = 0usize;
            let mut total = 0usize;
            for s in &b.test_source[b.test_source.len() / 2..] {
                let m = mean_color(s);
                if dist(&m, &c_src) < dist(&m, &c_tgt) {
                    correct += 1;
                }
                total += 1;
            }
            for s in &target[target.len() / 2..] {
                let m = mean_color(s);
                if dist(&m, &c_tgt) < dist(&m, &c_src) {
                    correct += 1;
                }
                total += 1;
            }
            let acc = correct as f64 / total as f64;
            assert!(acc > 0.9, "style gap accuracy {acc}");
        }
    }

    #[test]
    fn save_and_load_round_trip() {
        let cfg = BenchmarkConfig {
            n_train: 3,
            n_test_per_domain: 2,
            ..small_cfg()
        };
        let b = gen_benchmark(19, &cfg, &source_range(), &target_ranges()).unwrap();
        let dir = std::env::temp_dir().join("sansaw_domains_test");
        let _ = std::fs::remove_dir_all(&dir);
        save_benchmark(&b, &dir).unwrap();
        let loaded = load_benchmark(&dir).unwrap();
        assert_eq!(b.specs, loaded.specs);
        assert_eq!(b.train.len(), loaded.train.len());
        for (a, l) in b.train.iter().zip(&loaded.train) {
            assert_eq!(a.image, l.image);
            assert_eq!(a.labels, l.labels);
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
