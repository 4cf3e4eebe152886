//! Reconstruction, feature and style objectives over a frozen random
//! convolutional feature extractor.
//!
//! All norms use the mean-squared convention: squared differences are
//! averaged over every element (batch included), so magnitudes do not depend
//! on resolution and batch objectives are means of per-sample objectives.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::latent::mix_latents_var;
use crate::tensor::{Graph, Tensor, Var};

/// Added under the square root of style standard deviations.
pub const STYLE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleStatistic {
    Std,
    Variance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub extractor_seed: u64,
    pub extractor_channels: [usize; 4],
    pub style_statistic: StyleStatistic,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            extractor_seed: 1234,
            extractor_channels: [16, 32, 64, 64],
            style_statistic: StyleStatistic::Std,
        }
    }
}

/// Four stride-2 conv + ReLU stages with fixed seeded weights.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub seed: u64,
    weights: Vec<Tensor>,
}

impl FeatureExtractor {
    pub fn new(seed: u64, channels: [usize; 4]) -> Result<Self> {
        if channels.contains(&0) {
            return Err(Error::Config("extractor channels must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prev = 3;
        let weights = channels
            .iter()
            .map(|&c| {
                let std = (2.0 / (prev * 9) as f64).sqrt();
                let w = Tensor::randn(&[c, prev, 3, 3], std, &mut rng);
                prev = c;
                w
            })
            .collect();
        Ok(Self { seed, weights })
    }

    pub fn from_config(cfg: &LossConfig) -> Result<Self> {
        Self::new(cfg.extractor_seed, cfg.extractor_channels)
    }

    /// SHA-256 over the frozen weights.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.weights {
            h.update(w.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Feature taps `F_1..F_4` of an `[N, 3, H, W]` batch.
    pub fn features<'g>(&self, x: Var<'g>) -> Vec<Var<'g>> {
        let g = x.graph();
        let mut h = x.shift(-0.5);
        self.weights
            .iter()
            .map(|w| {
                h = h.conv2d(g.constant(w.clone()), 2, 1).leaky_relu(0.0);
                h
            })
            .collect()
    }

    pub fn extract(&self, img: &Image) -> Vec<Tensor> {
        let g = Graph::new();
        let x = g.constant(Image::batch(std::slice::from_ref(img)));
        self.features(x).iter().map(|f| (*f.value()).clone()).collect()
    }
}

fn check_shapes(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Contract(format!("shape mismatch {a:?} vs {b:?}")));
    }
    Ok(())
}

pub fn mse_var<'g>(hr: Var<'g>, sr: Var<'g>) -> Result<Var<'g>> {
    check_shapes(&hr.shape(), &sr.shape())?;
    Ok(hr.sub(sr).square().mean_all())
}

/// Equal-weight sum over stages of mean-squared feature differences.
pub fn feature_loss_var<'g>(a: Var<'g>, b: Var<'g>, f: &FeatureExtractor) -> Result<Var<'g>> {
    check_shapes(&a.shape(), &b.shape())?;
    let fa = f.features(a);
    let fb = f.features(b);
    let terms: Vec<Var<'g>> = fa
        .into_iter()
        .zip(fb)
        .map(|(x, y)| x.sub(y).square().mean_all())
        .collect();
    Ok(Var::concat(&terms, 0).sum_all())
}

pub fn perceptual_var<'g>(hr: Var<'g>, sr: Var<'g>, f: &FeatureExtractor) -> Result<Var<'g>> {
    feature_loss_var(hr, sr, f)
}

/// Reconstruction plus perceptual, unit weights.
pub fn total_var<'g>(hr: Var<'g>, sr: Var<'g>, f: &FeatureExtractor) -> Result<Var<'g>> {
    Ok(mse_var(hr, sr)?.add(perceptual_var(hr, sr, f)?))
}

/// Feature distance between the mixed-latent and pure-source images.
pub fn content_var<'g>(i_m: Var<'g>, i_s: Var<'g>, f: &FeatureExtractor) -> Result<Var<'g>> {
    feature_loss_var(i_m, i_s, f)
}

/// Per-channel spatial mean and spread `[N, C, 1, 1]` of a feature map.
pub fn style_stats_var<'g>(feat: Var<'g>, stat: StyleStatistic) -> (Var<'g>, Var<'g>) {
    let mu = feat.mean_axes(&[2, 3]);
    let var = feat.sub(mu).square().mean_axes(&[2, 3]);
    let spread = match stat {
        StyleStatistic::Std => var.shift(STYLE_EPS).sqrt(),
        StyleStatistic::Variance => var,
    };
    (mu, spread)
}

/// Sum over stages of mean-squared differences between feature means plus
/// between feature spreads. A single-image `i_t` is broadcast over `i_m`'s batch.
pub fn style_var<'g>(
    i_t: Var<'g>,
    i_m: Var<'g>,
    f: &FeatureExtractor,
    stat: StyleStatistic,
) -> Result<Var<'g>> {
    let (st, sm) = (i_t.shape(), i_m.shape());
    if st.len() != 4 || sm.len() != 4 || st[1] != sm[1] || (st[0] != 1 && st[0] != sm[0]) {
        return Err(Error::Contract(format!("style loss on {st:?} vs {sm:?}")));
    }
    let n = sm[0];
    let terms: Vec<Var<'g>> = f
        .features(i_t)
        .into_iter()
        .zip(f.features(i_m))
        .map(|(ft, fm)| {
            let (mt, vt) = style_stats_var(ft, stat);
            let (mm, vm) = style_stats_var(fm, stat);
            let c = mm.shape()[1];
            let norm = 1.0 / (n * c) as f64;
            let dm = mt.sub(mm).square().sum_all().scale(norm);
            let dv = vt.sub(vm).square().sum_all().scale(norm);
            dm.add(dv)
        })
        .collect();
    Ok(Var::concat(&terms, 0).sum_all())
}

/// Mixing-weight objective averaged over the source batch:
/// `content(G(mix), G(w_s)) + style(I_t, G(mix))`.
///
/// `w_t` is `[1, l, d_w]`, `w_s` is `[B, l, d_w]`, `raw` is `[l]`, `i_t` is
/// `[1, 3, H, W]`; `dec_vars` are the decoder parameters bound on the same tape.
#[allow(clippy::too_many_arguments)]
pub fn alpha_objective_var<'g>(
    dec: &Decoder,
    dec_vars: &[Var<'g>],
    f: &FeatureExtractor,
    w_t: Var<'g>,
    w_s: Var<'g>,
    raw: Var<'g>,
    i_t: Var<'g>,
    stat: StyleStatistic,
) -> Result<Var<'g>> {
    let mixed = mix_latents_var(w_t, w_s, raw);
    let i_m = dec.forward(dec_vars, mixed, None).image;
    let i_s = dec.forward(dec_vars, w_s, None).image;
    Ok(content_var(i_m, i_s, f)?.add(style_var(i_t, i_m, f, stat)?))
}

fn with_images(
    a: &Image,
    b: &Image,
    body: impl for<'g> FnOnce(Var<'g>, Var<'g>) -> Result<Var<'g>>,
) -> Result<f64> {
    let g = Graph::new();
    let va = g.constant(Image::batch(std::slice::from_ref(a)));
    let vb = g.constant(Image::batch(std::slice::from_ref(b)));
    Ok(body(va, vb)?.item())
}

pub fn mse_loss(hr: &Image, sr: &Image) -> Result<f64> {
    with_images(hr, sr, |a, b| mse_var(a, b))
}

pub fn perceptual_loss(hr: &Image, sr: &Image, f: &FeatureExtractor) -> Result<f64> {
    with_images(hr, sr, |a, b| perceptual_var(a, b, f))
}

pub fn total_loss(hr: &Image, sr: &Image, f: &FeatureExtractor) -> Result<f64> {
    with_images(hr, sr, |a, b| total_var(a, b, f))
}

pub fn content_loss(i_m: &Image, i_s: &Image, f: &FeatureExtractor) -> Result<f64> {
    with_images(i_m, i_s, |a, b| content_var(a, b, f))
}

pub fn style_loss(i_t: &Image, i_m: &Image, f: &FeatureExtractor, stat: StyleStatistic) -> Result<f64> {
    with_images(i_t, i_m, |a, b| style_var(a, b, f, stat))
}

/// Per-stage, per-channel `(mean, spread)` of an image's features.
pub fn style_stats(img: &Image, f: &FeatureExtractor, stat: StyleStatistic) -> Vec<(Vec<f64>, Vec<f64>)> {
    f.extract(img)
        .into_iter()
        .map(|t| stats_of_features(&t, stat))
        .collect()
}

/// `(mean, spread)` per channel of one `[1, C, H, W]` feature map.
pub fn stats_of_features(t: &Tensor, stat: StyleStatistic) -> (Vec<f64>, Vec<f64>) {
    let g = Graph::new();
    let (m, s) = style_stats_var(g.constant(t.clone()), stat);
    (m.value().data().to_vec(), s.value().data().to_vec())
}

/// Stage-averaged distance between channel-unit-normalised features.
pub fn feature_distance(a: &Image, b: &Image, f: &FeatureExtractor) -> Result<f64> {
    check_shapes(&[a.height(), a.width(), a.channels()], &[b.height(), b.width(), b.channels()])?;
    let (fa, fb) = (f.extract(a), f.extract(b));
    let mut total = 0.0;
    for (x, y) in fa.iter().zip(&fb) {
        let s = x.shape();
        let (c, hw) = (s[1], s[2] * s[3]);
        let mut acc = 0.0;
        for p in 0..hw {
            let norm = |t: &Tensor| {
                (0..c).map(|k| t.data()[k * hw + p].powi(2)).sum::<f64>().sqrt() + 1e-10
            };
            let (na, nb) = (norm(x), norm(y));
            for k in 0..c {
                let d = x.data()[k * hw + p] / na - y.data()[k * hw + p] / nb;
                acc += d * d;
            }
        }
        total += acc / hw as f64;
    }
    Ok(total / fa.len() as f64)
}
