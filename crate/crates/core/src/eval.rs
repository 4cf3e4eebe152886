//! Image-quality metrics, test-set evaluation and the benchmark harness
//! (source-only vs one-shot adapted, plus the ablation ladder).

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::damma::{adapt, AdaptConfig, AdaptVariant};
use crate::datagen::{make_source_test, make_target_partition, DatagenConfig, Sample};
use crate::error::{Error, Result};
use crate::image::{hconcat, Image};
use crate::losses::{FeatureExtractor, StyleStatistic};
use crate::model::Model;
use crate::rng::derive_seed;

pub use crate::losses::feature_distance;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Contract(format!("image shapes {:?} and {:?} differ", a.dims(), b.dims())));
    }
    Ok(())
}

/// Peak-1 PSNR in dB; `f64::INFINITY` when the images are identical.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

fn gray(img: &Image) -> Vec<f64> {
    let (h, w, c) = img.dims();
    (0..h * w)
        .map(|p| (0..c).map(|k| img.data()[p * c + k]).sum::<f64>() / c as f64)
        .collect()
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = taps.iter().enumerate().map(|(j, t)| t * x[y * w + x0 + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = taps.iter().enumerate().map(|(i, t)| t * rows[(y0 + i) * ow + x0]).sum();
        }
    }
    out
}

/// Mean windowed SSIM on the channel-mean grayscale images (11x11 Gaussian
/// window, sigma 1.5, dynamic range 1, no padding).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    let (h, w, _) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Config(format!("{h}x{w} image is smaller than the {SSIM_WINDOW}px SSIM window")));
    }
    let (x, y) = (gray(a), gray(b));
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter_valid(&x, h, w, &taps);
    let my = filter_valid(&y, h, w, &taps);
    let xx = filter_valid(&prod(&x, &x), h, w, &taps);
    let yy = filter_valid(&prod(&y, &y), h, w, &taps);
    let xy = filter_valid(&prod(&x, &y), h, w, &taps);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let total: f64 = (0..mx.len())
        .map(|i| ssim_index(mx[i], my[i], xx[i] - mx[i] * mx[i], yy[i] - my[i] * my[i], xy[i] - mx[i] * my[i], c1, c2))
        .sum();
    Ok(total / mx.len() as f64)
}

fn ssim_index(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Anything that turns LR inputs into HR estimates.
pub trait Upsampler {
    fn name(&self) -> String;
    /// Content hash identifying the exact parameters used.
    fn hash(&self) -> String;
    fn upsample_batch(&self, lrs: &[Image]) -> Result<Vec<Image>>;
}

impl Upsampler for Model {
    fn name(&self) -> String {
        "model".into()
    }

    fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.decoder.checksum());
        h.update(self.encoder.checksum());
        h.update(self.stats.mu.content_hash());
        h.update(self.stats.sigma.content_hash());
        hex::encode(h.finalize())
    }

    fn upsample_batch(&self, lrs: &[Image]) -> Result<Vec<Image>> {
        self.super_resolve_batch(lrs)
    }
}

/// Bicubic interpolation baseline.
#[derive(Clone, Copy, Debug)]
pub struct Bicubic {
    pub size: usize,
}

impl Upsampler for Bicubic {
    fn name(&self) -> String {
        "bicubic".into()
    }

    fn hash(&self) -> String {
        format!("bicubic-{}", self.size)
    }

    fn upsample_batch(&self, lrs: &[Image]) -> Result<Vec<Image>> {
        Ok(lrs.iter().map(|i| i.resize_bicubic(self.size, self.size)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    /// `None` marks identical images (infinite PSNR).
    pub psnr: Option<f64>,
    pub ssim: f64,
    pub feature_distance_proxy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub model_hash: String,
    pub extractor_hash: String,
    pub dataset_hash: String,
    pub split_id: String,
    pub exemplar_id: String,
    pub psnr_peak: f64,
    /// Mean PSNR over images; `None` if any pair was identical.
    pub psnr: Option<f64>,
    pub ssim: f64,
    pub feature_distance_proxy: f64,
    pub identical: usize,
    pub per_image: Vec<ImageMetrics>,
}

impl MetricsReport {
    /// PSNR with identical pairs reported as infinity.
    pub fn psnr_value(&self) -> f64 {
        self.psnr.unwrap_or(f64::INFINITY)
    }
}

/// Order-sensitive hash over every sample's LR and HR content.
pub fn dataset_hash(samples: &[Sample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update(s.id.as_bytes());
        h.update(s.lr.content_hash());
        h.update(s.hr.content_hash());
    }
    hex::encode(h.finalize())
}

/// Metrics of `sr` against `hr` for one image.
pub fn image_metrics(id: &str, sr: &Image, hr: &Image, f: &FeatureExtractor) -> Result<ImageMetrics> {
    let p = psnr(sr, hr)?;
    Ok(ImageMetrics {
        id: id.to_string(),
        psnr: p.is_finite().then_some(p),
        ssim: ssim(sr, hr)?,
        feature_distance_proxy: feature_distance(sr, hr, f)?,
    })
}

/// Aggregates per-image metrics by arithmetic mean.
pub fn aggregate(per_image: Vec<ImageMetrics>) -> (Option<f64>, f64, f64, usize, Vec<ImageMetrics>) {
    let n = per_image.len().max(1) as f64;
    let identical = per_image.iter().filter(|m| m.psnr.is_none()).count();
    let psnr = (identical == 0).then(|| per_image.iter().map(|m| m.psnr.unwrap_or(0.0)).sum::<f64>() / n);
    let ssim = per_image.iter().map(|m| m.ssim).sum::<f64>() / n;
    let fd = per_image.iter().map(|m| m.feature_distance_proxy).sum::<f64>() / n;
    (psnr, ssim, fd, identical, per_image)
}

/// Super-resolves every test LR image and scores it against its HR.
pub fn evaluate(
    model: &dyn Upsampler,
    test: &[Sample],
    f: &FeatureExtractor,
    split_id: &str,
    exemplar_id: &str,
) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    let lrs: Vec<Image> = test.iter().map(|s| s.lr.clone()).collect();
    let srs = model.upsample_batch(&lrs)?;
    let per_image = test
        .iter()
        .zip(&srs)
        .map(|(s, sr)| image_metrics(&s.id, sr, &s.hr, f))
        .collect::<Result<Vec<_>>>()?;
    let (psnr, ssim, fd, identical, per_image) = aggregate(per_image);
    Ok(MetricsReport {
        model: model.name(),
        model_hash: model.hash(),
        extractor_hash: f.checksum(),
        dataset_hash: dataset_hash(test),
        split_id: split_id.to_string(),
        exemplar_id: exemplar_id.to_string(),
        psnr_peak: 1.0,
        psnr,
        ssim,
        feature_distance_proxy: fd,
        identical,
        per_image,
    })
}

/// Nearest-neighbour enlargement, used only for visual grids.
pub fn nearest_upscale(img: &Image, size: usize) -> Image {
    let (h, w, c) = img.dims();
    Image::from_fn(size, size, c, |y, x, k| img.get(y * h / size, x * w / size, k))
}

/// `LR | bicubic | source-only | adapted | HR`.
pub fn comparison_grid(lr: &Image, source_only: &Image, adapted: &Image, hr: &Image) -> Image {
    let size = hr.height();
    hconcat(&[
        nearest_upscale(lr, size),
        lr.resize_bicubic(size, size),
        source_only.clone(),
        adapted.clone(),
        hr.clone(),
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_splits: usize,
    pub exemplar_draws: usize,
    pub split_seed: u64,
    /// Also run the hard-mixing and full-decoder soft-mixing rungs.
    pub ablations: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_splits: 5,
            exemplar_draws: 2,
            split_seed: 0,
            ablations: true,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_splits == 0 || self.exemplar_draws == 0 {
            return Err(Error::Config("n_splits and exemplar_draws must be at least 1".into()));
        }
        Ok(())
    }
}

pub const METHOD_BICUBIC: &str = "bicubic";
pub const METHOD_SOURCE_ONLY: &str = "source-only";
pub const METHOD_DIRECT: &str = "direct-finetune";
pub const METHOD_DAMMA: &str = "damma";
pub const METHOD_HARD_MIX: &str = "ablation-hard-mixing";
pub const METHOD_SOFT_FULL: &str = "ablation-soft-mixing";

/// Ladder order: style mixing examples, soft weight, constrained adaptation.
pub const LADDER: [&str; 3] = [METHOD_HARD_MIX, METHOD_SOFT_FULL, METHOD_DAMMA];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub split: usize,
    pub draw: usize,
    pub method: String,
    pub exemplar_id: String,
    pub model_hash: String,
    pub psnr: f64,
    pub ssim: f64,
    pub feature_distance_proxy: f64,
    pub source_psnr: f64,
    pub source_retention: f64,
    pub adapt_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub psnr: f64,
    pub ssim: f64,
    pub feature_distance_proxy: f64,
    pub source_psnr: f64,
    pub source_retention: f64,
    pub min_source_retention: f64,
    pub adapt_seconds: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub rows: Vec<TableRow>,
    pub runs: Vec<RunRecord>,
}

impl BenchmarkTable {
    /// Groups runs by method (first-appearance order) and averages them.
    pub fn from_runs(runs: Vec<RunRecord>) -> Self {
        let mut methods: Vec<String> = Vec::new();
        for r in &runs {
            if !methods.contains(&r.method) {
                methods.push(r.method.clone());
            }
        }
        let rows = methods
            .into_iter()
            .map(|m| {
                let mut group: Vec<&RunRecord> = runs.iter().filter(|r| r.method == m).collect();
                // fixed summation order keeps aggregates independent of run order
                group.sort_by_key(|r| (r.split, r.draw));
                let n = group.len() as f64;
                let mean = |f: &dyn Fn(&RunRecord) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / n;
                TableRow {
                    psnr: mean(&|r| r.psnr),
                    ssim: mean(&|r| r.ssim),
                    feature_distance_proxy: mean(&|r| r.feature_distance_proxy),
                    source_psnr: mean(&|r| r.source_psnr),
                    source_retention: mean(&|r| r.source_retention),
                    min_source_retention: group.iter().map(|r| r.source_retention).fold(f64::INFINITY, f64::min),
                    adapt_seconds: mean(&|r| r.adapt_seconds),
                    runs: group.len(),
                    method: m,
                }
            })
            .collect();
        Self { rows, runs }
    }

    pub fn row(&self, method: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// Mean target PSNR of `method` per split, averaged over draws.
    pub fn per_split_psnr(&self, method: &str) -> Vec<f64> {
        let mut splits: Vec<usize> = self.runs.iter().filter(|r| r.method == method).map(|r| r.split).collect();
        splits.sort_unstable();
        splits.dedup();
        splits
            .into_iter()
            .map(|s| {
                let v: Vec<f64> = self
                    .runs
                    .iter()
                    .filter(|r| r.method == method && r.split == s)
                    .map(|r| r.psnr)
                    .collect();
                v.iter().sum::<f64>() / v.len() as f64
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "method,psnr_db,ssim,feature_distance_proxy,source_test_psnr_db,source_retention,min_source_retention,adapt_seconds,runs\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.3},{}\n",
                r.method,
                r.psnr,
                r.ssim,
                r.feature_distance_proxy,
                r.source_psnr,
                r.source_retention,
                r.min_source_retention,
                r.adapt_seconds,
                r.runs
            ));
        }
        s
    }

    pub fn runs_csv(&self) -> String {
        let mut s = String::from(RUNS_CSV_HEADER);
        for r in &self.runs {
            s.push_str(&run_csv_line(r));
        }
        s
    }
}

pub const RUNS_CSV_HEADER: &str =
    "split,draw,method,exemplar_id,model_hash,psnr_db,ssim,feature_distance_proxy,source_test_psnr_db,source_retention,adapt_seconds\n";

pub fn run_csv_line(r: &RunRecord) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{:.3}\n",
        r.split,
        r.draw,
        r.method,
        r.exemplar_id,
        r.model_hash,
        r.psnr,
        r.ssim,
        r.feature_distance_proxy,
        r.source_psnr,
        r.source_retention,
        r.adapt_seconds
    )
}

fn finite_psnr(r: &MetricsReport) -> f64 {
    r.psnr_value()
}

/// Adaptation variants run per split, keyed by method name.
fn variants(cfg: &EvalConfig) -> Vec<(&'static str, AdaptVariant)> {
    let mut v = vec![(METHOD_DIRECT, AdaptVariant::Direct), (METHOD_DAMMA, AdaptVariant::Damma)];
    if cfg.ablations {
        v.push((METHOD_HARD_MIX, AdaptVariant::HardFull));
        v.push((METHOD_SOFT_FULL, AdaptVariant::SoftFull));
    }
    v
}

/// Evaluates bicubic and the source-only model, then each adaptation
/// variant, on every `(split, draw)`; `on_run` sees each record as soon as
/// it exists so partial results survive a later failure.
#[allow(clippy::too_many_arguments)]
pub fn run_benchmark(
    model: &Model,
    f: &FeatureExtractor,
    stat: StyleStatistic,
    datagen: &DatagenConfig,
    adapt_cfg: &AdaptConfig,
    cfg: &EvalConfig,
    on_run: &mut dyn FnMut(&RunRecord) -> Result<()>,
) -> Result<BenchmarkTable> {
    cfg.validate()?;
    datagen.validate()?;
    let source_test = make_source_test(datagen.n_source_test, &datagen.source, datagen)?;
    let source_base = finite_psnr(&evaluate(model, &source_test, f, "source-test", "")?);
    let bicubic = Bicubic { size: datagen.hr_size };
    let bicubic_source = finite_psnr(&evaluate(&bicubic, &source_test, f, "source-test", "")?);
    let mut runs = Vec::new();
    let mut push = |r: RunRecord, runs: &mut Vec<RunRecord>| -> Result<()> {
        on_run(&r)?;
        runs.push(r);
        Ok(())
    };
    for split in 0..cfg.n_splits {
        let seed = cfg.split_seed + split as u64;
        for draw in 0..cfg.exemplar_draws {
            let (exemplar, test) =
                make_target_partition(datagen.n_target_test, &datagen.target, seed, draw as u64, datagen)?;
            let split_id = format!("split-{seed}");
            for (method, up, src) in [
                (METHOD_BICUBIC, &bicubic as &dyn Upsampler, bicubic_source),
                (METHOD_SOURCE_ONLY, model as &dyn Upsampler, source_base),
            ] {
                let rep = evaluate(up, &test, f, &split_id, &exemplar.id)?;
                push(
                    RunRecord {
                        split,
                        draw,
                        method: method.into(),
                        exemplar_id: exemplar.id.clone(),
                        model_hash: rep.model_hash.clone(),
                        psnr: finite_psnr(&rep),
                        ssim: rep.ssim,
                        feature_distance_proxy: rep.feature_distance_proxy,
                        source_psnr: src,
                        source_retention: 1.0,
                        adapt_seconds: 0.0,
                    },
                    &mut runs,
                )?;
            }
            for (method, variant) in variants(cfg) {
                let acfg = AdaptConfig {
                    variant,
                    seed: derive_seed(adapt_cfg.seed, &[seed, draw as u64]),
                    ..adapt_cfg.clone()
                };
                let start = Instant::now();
                let (dec, _) = adapt(model, f, stat, &exemplar.lr, &exemplar.hr, &acfg)?;
                let secs = start.elapsed().as_secs_f64();
                let adapted = Model::new(dec, model.encoder.clone(), model.stats.clone())?;
                let rep = evaluate(&adapted, &test, f, &split_id, &exemplar.id)?;
                let src = finite_psnr(&evaluate(&adapted, &source_test, f, "source-test", "")?);
                log::info!(
                    "split {split} draw {draw} {method}: psnr {:.3} ssim {:.4} retention {:.3} ({secs:.1}s)",
                    finite_psnr(&rep),
                    rep.ssim,
                    src / source_base
                );
                push(
                    RunRecord {
                        split,
                        draw,
                        method: method.into(),
                        exemplar_id: exemplar.id.clone(),
                        model_hash: rep.model_hash.clone(),
                        psnr: finite_psnr(&rep),
                        ssim: rep.ssim,
                        feature_distance_proxy: rep.feature_distance_proxy,
                        source_psnr: src,
                        source_retention: src / source_base,
                        adapt_seconds: secs,
                    },
                    &mut runs,
                )?;
            }
        }
    }
    Ok(BenchmarkTable::from_runs(runs))
}
