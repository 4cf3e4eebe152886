//! Procurement: adversarial decoder training on source HR faces, then encoder
//! training against the frozen decoder.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datagen::Sample;
use crate::decoder::{Decoder, DecoderConfig, LEAKY_SLOPE};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::image::{hconcat, Image};
use crate::latent::{LatentCode, LatentStatistics};
use crate::losses::{total_var, FeatureExtractor};
use crate::model::Model;
use crate::tensor::{Adam, Graph, Optimizer, OptimizerKind, ParamStore, ParamTag, Tensor, Var};

/// Discriminator loss below this for `COLLAPSE_STEPS` steps triggers a warning.
pub const COLLAPSE_LOSS: f64 = 1e-3;
pub const COLLAPSE_STEPS: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    pub r1_gamma: f64,
    /// Probe step of the finite-difference gradient-norm estimate.
    pub r1_sigma: f64,
    pub disc_channels: Vec<usize>,
    pub stats_samples: usize,
    pub seed: u64,
}

impl Default for DecoderTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            lr_g: 1e-3,
            lr_d: 2e-3,
            r1_gamma: 10.0,
            r1_sigma: 1e-2,
            disc_channels: vec![16, 32, 64],
            stats_samples: 10_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 8,
            lr: 1e-2,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub decoder: DecoderTrainConfig,
    pub encoder: EncoderTrainConfig,
    /// Steps between loss log lines and sample grids; 0 disables them.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            decoder: DecoderTrainConfig::default(),
            encoder: EncoderTrainConfig::default(),
            eval_every: 250,
        }
    }
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {v}")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.decoder;
        positive("train.decoder.lr_g", d.lr_g)?;
        positive("train.decoder.lr_d", d.lr_d)?;
        positive("train.decoder.r1_sigma", d.r1_sigma)?;
        if !(d.r1_gamma >= 0.0 && d.r1_gamma.is_finite()) {
            return Err(Error::Config("train.decoder.r1_gamma must be non-negative".into()));
        }
        positive("train.encoder.lr", self.encoder.lr)?;
        if d.steps == 0 || d.batch == 0 || self.encoder.steps == 0 || self.encoder.batch == 0 {
            return Err(Error::Config("training steps and batches must be at least 1".into()));
        }
        if d.disc_channels.is_empty() || d.disc_channels.contains(&0) {
            return Err(Error::Config("discriminator channels must be non-empty and positive".into()));
        }
        if d.stats_samples < 2 {
            return Err(Error::Config("stats_samples must be at least 2".into()));
        }
        Ok(())
    }
}

/// Stride-2 conv stack with a linear logit head.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub params: ParamStore,
    convs: Vec<(usize, usize)>,
    head: (usize, usize),
}

impl Discriminator {
    pub fn new(size: usize, channels: &[usize], seed: u64) -> Result<Self> {
        let mut side = size;
        for _ in channels {
            if side < 2 || side % 2 != 0 {
                return Err(Error::Config(format!(
                    "{} stride-2 stages do not fit a {size}px input",
                    channels.len()
                )));
            }
            side /= 2;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let mut prev = 3;
        let convs = channels
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let w = p.add(
                    format!("d.{k}.weight"),
                    Tensor::randn(&[c, prev, 3, 3], (2.0 / (prev * 9) as f64).sqrt(), &mut rng),
                    ParamTag::Other,
                );
                let b = p.add(format!("d.{k}.bias"), Tensor::zeros(&[1, c, 1, 1]), ParamTag::Other);
                prev = c;
                (w, b)
            })
            .collect();
        let flat = prev * side * side;
        let head = (
            p.add("d.head.weight", Tensor::randn(&[flat, 1], (1.0 / flat as f64).sqrt(), &mut rng), ParamTag::Other),
            p.add("d.head.bias", Tensor::zeros(&[1]), ParamTag::Other),
        );
        Ok(Self { params: p, convs, head })
    }

    /// Logits `[N, 1]`.
    pub fn forward<'g>(&self, vars: &[Var<'g>], x: Var<'g>) -> Var<'g> {
        let n = x.shape()[0];
        let mut h = x.shift(-0.5);
        for &(w, b) in &self.convs {
            h = h.conv2d(vars[w], 2, 1).add(vars[b]).leaky_relu(LEAKY_SLOPE);
        }
        let flat: usize = h.shape()[1..].iter().product();
        h.reshape(&[n, flat]).matmul(vars[self.head.0]).add(vars[self.head.1].reshape(&[1, 1]))
    }
}

/// `(γ/2)·mean_k ((D(x_k + σu_k) − D(x_k))/σ)²` with `u_k ~ N(0, I)`, an
/// unbiased-in-the-limit estimate of the squared input-gradient norm that
/// needs no second-order differentiation.
pub fn r1_penalty<'g>(
    d: &Discriminator,
    vars: &[Var<'g>],
    real: Var<'g>,
    d_real: Var<'g>,
    gamma: f64,
    sigma: f64,
    rng: &mut impl Rng,
) -> Var<'g> {
    let g = real.graph();
    let shape = real.shape();
    let u = Tensor::from_fn(&shape, |_| rng.sample::<f64, _>(StandardNormal) * sigma);
    let probed = d.forward(vars, real.add(g.constant(u)));
    probed.sub(d_real).scale(1.0 / sigma).square().mean_all().scale(gamma / 2.0)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecoderStep {
    pub step: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub r1: f64,
}

#[derive(Clone, Debug, Default)]
pub struct DecoderTrainLog {
    pub steps: Vec<DecoderStep>,
    pub collapse_warnings: usize,
    /// `(step, grid)` sample snapshots.
    pub samples: Vec<(usize, Image)>,
}

impl DecoderTrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,d_loss,g_loss,r1\n");
        for r in &self.steps {
            s.push_str(&format!("{},{},{},{}\n", r.step, r.d_loss, r.g_loss, r.r1));
        }
        s
    }
}

fn gaussian_z(n: usize, d: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(&[n, d], |_| rng.sample(StandardNormal))
}

/// `z [N, d_w]` through the mapping network, broadcast to every style layer.
fn generate<'g>(dec: &Decoder, vars: &[Var<'g>], z: Var<'g>) -> Var<'g> {
    let n = z.shape()[0];
    let (l, d) = (dec.l(), dec.d_w());
    let w = dec.map_var(vars, z).reshape(&[n, 1, d]);
    let w = Var::concat(&vec![w; l], 1);
    dec.forward(vars, w, None).image
}

/// Side-by-side grid of decoder samples from fixed seeds.
pub fn sample_grid(dec: &Decoder, n: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codes: Vec<LatentCode> = (0..n)
        .map(|_| {
            let z: Vec<f64> = (0..dec.d_w()).map(|_| rng.sample(StandardNormal)).collect();
            LatentCode::broadcast(&dec.map_latent(&z), dec.l())
        })
        .collect();
    hconcat(&dec.synthesize_batch(&codes).expect("codes match decoder"))
}

/// Median of pixel MSE over all unordered pairs.
pub fn pairwise_mse_median(images: &[Image]) -> f64 {
    let mut v = Vec::new();
    for i in 0..images.len() {
        for j in i + 1..images.len() {
            let (a, b) = (images[i].data(), images[j].data());
            v.push(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64);
        }
    }
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

/// Non-saturating GAN training with the R1 penalty; latent statistics are
/// computed from the trained mapping network at the end.
pub fn train_decoder(
    hr_images: &[Image],
    dec_cfg: &DecoderConfig,
    cfg: &TrainConfig,
) -> Result<(Decoder, LatentStatistics, DecoderTrainLog)> {
    cfg.validate()?;
    let tc = &cfg.decoder;
    let size = dec_cfg.output_size();
    if hr_images.is_empty() {
        return Err(Error::Config("decoder training needs at least one HR image".into()));
    }
    if let Some(bad) = hr_images.iter().find(|i| i.dims() != (size, size, 3)) {
        return Err(Error::Contract(format!("HR image is {:?}, decoder produces {size}px", bad.dims())));
    }
    let mut dec = Decoder::new(dec_cfg.clone(), tc.seed)?;
    let mut disc = Discriminator::new(size, &tc.disc_channels, tc.seed.wrapping_add(1))?;
    let mut opt_g = Adam::with_betas(tc.lr_g, 0.0, 0.99);
    let mut opt_d = Adam::with_betas(tc.lr_d, 0.0, 0.99);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(2));
    let mut log = DecoderTrainLog::default();
    let mut low_streak = 0usize;
    let mut indices: Vec<usize> = Vec::new();
    for step in 0..tc.steps {
        if indices.len() < tc.batch {
            let mut fresh: Vec<usize> = (0..hr_images.len()).collect();
            fresh.shuffle(&mut rng);
            indices.extend(fresh);
        }
        let picked: Vec<Image> = indices.drain(..tc.batch).map(|i| hr_images[i].clone()).collect();
        let real_t = Image::batch(&picked);
        let z_d = gaussian_z(tc.batch, dec.d_w(), &mut rng);
        let z_g = gaussian_z(tc.batch, dec.d_w(), &mut rng);

        let (d_loss, r1) = {
            let g = Graph::new();
            let gv = dec.params.bind(&g, |_| false);
            let fake = generate(&dec, &gv, g.constant(z_d)).value();
            let dv = disc.params.bind(&g, |_| true);
            let real = g.constant(real_t);
            let d_real = disc.forward(&dv, real);
            let d_fake = disc.forward(&dv, g.constant((*fake).clone()));
            let adv = d_fake.softplus().mean_all().add(d_real.neg().softplus().mean_all());
            let r1 = r1_penalty(&disc, &dv, real, d_real, tc.r1_gamma, tc.r1_sigma, &mut rng);
            let loss = adv.add(r1);
            let (a, r) = (adv.item(), r1.item());
            let mut grads = g.backward(loss);
            let collected = disc.params.collect_grads(&dv, &mut grads);
            opt_d.step(&mut disc.params, &collected);
            (a, r)
        };
        let g_loss = {
            let g = Graph::new();
            let gv = dec.params.bind(&g, |_| true);
            let dv = disc.params.bind(&g, |_| false);
            let fake = generate(&dec, &gv, g.constant(z_g));
            let loss = disc.forward(&dv, fake).neg().softplus().mean_all();
            let v = loss.item();
            let mut grads = g.backward(loss);
            let collected = dec.params.collect_grads(&gv, &mut grads);
            opt_g.step(&mut dec.params, &collected);
            v
        };
        if !(d_loss.is_finite() && g_loss.is_finite() && r1.is_finite()) {
            return Err(Error::Divergence {
                iteration: step,
                message: format!("GAN losses d={d_loss} g={g_loss} r1={r1}"),
            });
        }
        low_streak = if d_loss < COLLAPSE_LOSS { low_streak + 1 } else { 0 };
        if low_streak == COLLAPSE_STEPS {
            log::warn!("discriminator loss below {COLLAPSE_LOSS} for {COLLAPSE_STEPS} steps at step {step}; possible mode collapse");
            log.collapse_warnings += 1;
            low_streak = 0;
        }
        log.steps.push(DecoderStep { step, d_loss, g_loss, r1 });
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            log::info!("decoder step {} d={d_loss:.4} g={g_loss:.4} r1={r1:.4}", step + 1);
            log.samples.push((step + 1, sample_grid(&dec, 4, tc.seed)));
        }
    }
    let stats = dec.latent_statistics(tc.stats_samples, tc.seed.wrapping_add(3))?;
    Ok((dec, stats, log))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EncoderTrainLog {
    pub losses: Vec<f64>,
    /// `(step, grid)` snapshots of LR | SR | HR on a fixed training pair.
    #[serde(skip)]
    pub samples: Vec<(usize, Image)>,
}

impl EncoderTrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{i},{l}\n"));
        }
        s
    }
}

/// Minimises the reconstruction-plus-perceptual loss of `G(E(lr))` against
/// `hr` over the encoder only. The decoder checksum is re-verified once per
/// pass over the data.
pub fn train_encoder(
    pairs: &[Sample],
    decoder: &Decoder,
    stats: &LatentStatistics,
    enc_cfg: &EncoderConfig,
    f: &FeatureExtractor,
    cfg: &TrainConfig,
) -> Result<(Model, EncoderTrainLog)> {
    cfg.validate()?;
    let tc = &cfg.encoder;
    if pairs.is_empty() {
        return Err(Error::Config("encoder training needs at least one pair".into()));
    }
    let mut enc = Encoder::new(enc_cfg.clone(), decoder.l(), decoder.d_w(), tc.seed)?;
    let frozen = decoder.checksum();
    let mut opt = tc.optimizer.build(tc.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(1));
    let mut log = EncoderTrainLog::default();
    let epoch = pairs.len().div_ceil(tc.batch).max(1);
    let mut indices: Vec<usize> = Vec::new();
    for step in 0..tc.steps {
        if indices.len() < tc.batch {
            let mut fresh: Vec<usize> = (0..pairs.len()).collect();
            fresh.shuffle(&mut rng);
            indices.extend(fresh);
        }
        let picked: Vec<&Sample> = indices.drain(..tc.batch).map(|i| &pairs[i]).collect();
        let lr: Vec<Image> = picked.iter().map(|s| s.lr.clone()).collect();
        let hr: Vec<Image> = picked.iter().map(|s| s.hr.clone()).collect();
        let g = Graph::new();
        let ev = enc.params.bind(&g, |_| true);
        let dv = decoder.params.bind(&g, |_| false);
        let w = enc.forward(&ev, g.constant(Image::batch(&lr)), stats)?.w;
        let sr = decoder.forward(&dv, w, None).image;
        let loss = total_var(g.constant(Image::batch(&hr)), sr, f)?;
        let v = loss.item();
        if !v.is_finite() {
            return Err(Error::Divergence {
                iteration: step,
                message: format!("encoder loss became {v}"),
            });
        }
        let mut grads = g.backward(loss);
        let collected = enc.params.collect_grads(&ev, &mut grads);
        opt.step(&mut enc.params, &collected);
        log.losses.push(v);
        if (step + 1) % epoch == 0 && decoder.checksum() != frozen {
            return Err(Error::Contract("decoder parameters changed during encoder training".into()));
        }
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            log::info!("encoder step {} loss={v:.5}", step + 1);
            let probe = &pairs[0];
            let sr = decoder.synthesize(&enc.encode(&probe.lr, stats)?)?;
            let up = probe.lr.resize_bicubic(sr.dims().0, sr.dims().1);
            log.samples.push((step + 1, hconcat(&[up, sr, probe.hr.clone()])));
        }
    }
    if decoder.checksum() != frozen {
        return Err(Error::Contract("decoder parameters changed during encoder training".into()));
    }
    Ok((Model::new(decoder.clone(), enc, stats.clone())?, log))
}
