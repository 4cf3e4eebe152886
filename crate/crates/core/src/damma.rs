//! One-shot adaptation: alternate soft mixing-weight descent with AdaIN-only
//! fine-tuning of the decoder, driven by a single target exemplar.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{degrade, AffinePerturbation, PerturbationRanges};
use crate::decoder::Decoder;
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::latent::{
    mix_latents, sample_source_latents, Alpha0Policy, LatentCode, LatentStatistics, MixingWeight, HARD_RAW,
};
use crate::losses::{alpha_objective_var, total_var, FeatureExtractor, StyleStatistic};
use crate::model::Model;
use crate::rng::derive_seed;
use crate::tensor::{Graph, Optimizer, OptimizerKind, Param, ParamTag, Tensor};

/// Where the α-steps and φ-steps sit inside one outer iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interleave {
    /// α-step, regenerate, φ-step, repeated `inner_steps` times.
    PerStep,
    /// `inner_steps` α-steps, then one regeneration and `phi_steps` φ-steps.
    Blocked,
}

/// Supervision used for the generated samples in the φ-step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiTarget {
    /// Degrade `I^m`, encode it, and reconstruct `I^m` from the code.
    EncodedPairs,
    /// Reconstruct `I^m` from its own `w^m` (zero gradient at regeneration time).
    Resynthesis,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptVariant {
    /// Soft weight, AdaIN affines only.
    Damma,
    /// Soft weight, every decoder parameter.
    SoftFull,
    /// Weight frozen at its initial hard assignment, every decoder parameter.
    HardFull,
    /// No generated samples; every decoder parameter on the exemplar alone.
    Direct,
}

impl AdaptVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            AdaptVariant::Damma => "damma",
            AdaptVariant::SoftFull => "soft_full",
            AdaptVariant::HardFull => "hard_full",
            AdaptVariant::Direct => "direct",
        }
    }

    fn scope(self) -> UpdateScope {
        match self {
            AdaptVariant::Damma => UpdateScope::Phi,
            _ => UpdateScope::Full,
        }
    }

    fn learns_alpha(self) -> bool {
        matches!(self, AdaptVariant::Damma | AdaptVariant::SoftFull)
    }

    fn mixes(self) -> bool {
        self != AdaptVariant::Direct
    }
}

/// Which decoder parameters a fine-tuning step may write.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateScope {
    Phi,
    Full,
}

impl UpdateScope {
    fn admits(self, p: &Param) -> bool {
        match self {
            UpdateScope::Phi => p.tag == ParamTag::Phi,
            UpdateScope::Full => matches!(p.tag, ParamTag::Phi | ParamTag::Other),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub xi: f64,
    pub eta: f64,
    pub inner_steps: usize,
    pub outer_budget: usize,
    pub batch_size: usize,
    pub convergence_tol: f64,
    pub convergence_window: usize,
    pub seed: u64,
    pub alpha0: Alpha0Policy,
    pub alpha0_k: usize,
    /// Magnitude of the raw weight at a hard assignment.
    pub alpha0_raw: f64,
    pub interleave: Interleave,
    pub phi_steps: usize,
    pub optimizer: OptimizerKind,
    pub phi_target: PhiTarget,
    pub perturbation: PerturbationRanges,
    pub variant: AdaptVariant,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            xi: 1e-2,
            eta: 1e-3,
            inner_steps: 20,
            outer_budget: 10,
            batch_size: 8,
            convergence_tol: 1e-4,
            convergence_window: 3,
            seed: 0,
            alpha0: Alpha0Policy::LastKTarget,
            alpha0_k: 3,
            alpha0_raw: HARD_RAW,
            interleave: Interleave::PerStep,
            phi_steps: 1,
            optimizer: OptimizerKind::Sgd,
            phi_target: PhiTarget::EncodedPairs,
            perturbation: PerturbationRanges::default(),
            variant: AdaptVariant::Damma,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.xi >= 0.0 && self.xi.is_finite() && self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!(
                "learning rates must be finite and non-negative (xi={}, eta={})",
                self.xi, self.eta
            )));
        }
        if !(self.alpha0_raw > 0.0 && self.alpha0_raw.is_finite()) {
            return Err(Error::Config(format!("alpha0_raw must be positive, got {}", self.alpha0_raw)));
        }
        if self.inner_steps == 0 || self.batch_size == 0 || self.phi_steps == 0 {
            return Err(Error::Config("inner_steps, batch_size and phi_steps must be at least 1".into()));
        }
        self.perturbation.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub iteration: usize,
    pub alpha_initial: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_losses: Vec<f64>,
    pub phi_losses: Vec<f64>,
    pub phi_loss: f64,
    pub phi_delta_norm: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptTrace {
    pub variant: AdaptVariant,
    pub records: Vec<OuterRecord>,
    pub converged: bool,
    pub stop_reason: String,
}

impl AdaptTrace {
    pub fn new(variant: AdaptVariant) -> Self {
        Self {
            variant,
            records: Vec::new(),
            converged: false,
            stop_reason: String::new(),
        }
    }

    /// One JSON object per outer iteration.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("trace record serialises") + "\n")
            .collect()
    }

    /// Equality ignoring wall-clock fields.
    pub fn same_numbers(&self, other: &AdaptTrace) -> bool {
        let strip = |t: &AdaptTrace| {
            let mut t = t.clone();
            t.records.iter_mut().for_each(|r| r.wall_ms = 0.0);
            t
        };
        strip(self) == strip(other)
    }
}

/// `w^t = E(I_LR^t)`.
pub fn project_exemplar(exemplar_lr: &Image, encoder: &Encoder, stats: &LatentStatistics) -> Result<LatentCode> {
    encoder.encode(exemplar_lr, stats)
}

/// Plain gradient descent on a raw weight; returns the `steps + 1` losses
/// seen at each iterate, the last one after the final update.
pub fn descend_alpha(
    raw: &mut [f64],
    xi: f64,
    steps: usize,
    mut objective: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
) -> Result<Vec<f64>> {
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let (loss, grad) = objective(raw)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                iteration: step,
                message: format!("mixing-weight loss became {loss}"),
            });
        }
        losses.push(loss);
        if step == steps {
            break;
        }
        if xi != 0.0 {
            for (r, g) in raw.iter_mut().zip(&grad) {
                *r -= xi * g;
            }
        }
    }
    Ok(losses)
}

/// Mixing-weight objective and its gradient w.r.t. the raw weight.
pub fn alpha_objective(
    dec: &Decoder,
    f: &FeatureExtractor,
    stat: StyleStatistic,
    w_t: &LatentCode,
    w_s: &[LatentCode],
    raw: &[f64],
    i_t: &Image,
) -> Result<(f64, Vec<f64>)> {
    let g = Graph::new();
    let vars = dec.params.bind(&g, |_| false);
    let r = g.var(Tensor::new(&[raw.len()], raw.to_vec()));
    let shape = [1, w_t.l(), w_t.d_w()];
    let loss = alpha_objective_var(
        dec,
        &vars,
        f,
        g.constant(w_t.tensor().clone().reshape(&shape)),
        g.constant(LatentCode::batch(w_s)),
        r,
        g.constant(Image::batch(std::slice::from_ref(i_t))),
        stat,
    )?;
    let grads = g.backward(loss);
    let grad = grads.get(r).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; raw.len()]);
    Ok((loss.item(), grad))
}

/// `n` descent steps on the mixing objective averaged over `w_s`.
#[allow(clippy::too_many_arguments)]
pub fn learn_mixing_weight(
    w_t: &LatentCode,
    w_s: &[LatentCode],
    weight: &MixingWeight,
    dec: &Decoder,
    f: &FeatureExtractor,
    stat: StyleStatistic,
    i_t: &Image,
    xi: f64,
    steps: usize,
) -> Result<(MixingWeight, Vec<f64>)> {
    let mut out = weight.clone();
    let losses = descend_alpha(&mut out.raw, xi, steps, |raw| {
        alpha_objective(dec, f, stat, w_t, w_s, raw, i_t)
    })?;
    Ok((out, losses))
}

/// Mixes each source code with `w_t` and synthesises the result.
pub fn mix_and_synthesize(
    w_t: &LatentCode,
    w_s: &[LatentCode],
    weight: &MixingWeight,
    dec: &Decoder,
) -> Result<Vec<(LatentCode, Image)>> {
    let mixed = w_s
        .iter()
        .map(|s| mix_latents(w_t, s, weight))
        .collect::<Result<Vec<_>>>()?;
    let images = dec.synthesize_batch(&mixed)?;
    Ok(mixed.into_iter().zip(images).collect())
}

/// Samples `batch` source codes, mixes each with `w_t`, and synthesises.
pub fn generate_target_style_batch(
    w_t: &LatentCode,
    stats: &LatentStatistics,
    weight: &MixingWeight,
    dec: &Decoder,
    batch: usize,
    seed: u64,
) -> Result<Vec<(LatentCode, Image)>> {
    let w_s = sample_source_latents(stats, batch, seed)?;
    mix_and_synthesize(w_t, &w_s, weight, dec)
}

/// One gradient step on `mean_k total(target_k, G(code_k))` restricted to
/// `scope`; returns the loss before the step.
pub fn constrained_finetune(
    dec: &mut Decoder,
    codes: &[LatentCode],
    targets: &[Image],
    f: &FeatureExtractor,
    opt: &mut dyn Optimizer,
    scope: UpdateScope,
) -> Result<f64> {
    if codes.len() != targets.len() || codes.is_empty() {
        return Err(Error::Contract(format!(
            "{} codes for {} targets",
            codes.len(),
            targets.len()
        )));
    }
    let g = Graph::new();
    let vars = dec.params.bind(&g, |p| scope.admits(p));
    let out = dec.forward(&vars, g.constant(LatentCode::batch(codes)), None).image;
    let loss = total_var(g.constant(Image::batch(targets)), out, f)?;
    let value = loss.item();
    if !value.is_finite() {
        return Err(Error::Divergence {
            iteration: 0,
            message: format!("fine-tuning loss became {value}"),
        });
    }
    let mut grads = g.backward(loss);
    let collected = dec.params.collect_grads(&vars, &mut grads);
    for (i, _) in &collected {
        let p = dec.params.get(*i);
        assert!(scope.admits(p), "gradient reached frozen parameter {}", p.name);
    }
    opt.step(&mut dec.params, &collected);
    Ok(value)
}

fn snapshot(dec: &Decoder, scope: UpdateScope) -> Vec<f64> {
    dec.params
        .iter()
        .filter(|p| scope.admits(p))
        .flat_map(|p| p.value.data().iter().copied())
        .collect()
}

/// Synthetic φ-step inputs: `(codes, targets)` with the exemplar pair first.
#[allow(clippy::too_many_arguments)]
fn phi_batch(
    model: &Model,
    dec: &Decoder,
    cfg: &AdaptConfig,
    w_t: &LatentCode,
    hr_t: &Image,
    w_s: &[LatentCode],
    weight: &MixingWeight,
    seed: u64,
) -> Result<(Vec<LatentCode>, Vec<Image>)> {
    let mut codes = vec![w_t.clone()];
    let mut targets = vec![hr_t.clone()];
    if !cfg.variant.mixes() {
        return Ok((codes, targets));
    }
    let generated = mix_and_synthesize(w_t, w_s, weight, dec)?;
    match cfg.phi_target {
        PhiTarget::Resynthesis => {
            for (w, img) in generated {
                codes.push(w);
                targets.push(img);
            }
        }
        PhiTarget::EncodedPairs => {
            let factor = model.factor();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lrs = generated
                .iter()
                .map(|(_, img)| {
                    let p = AffinePerturbation::sample(&cfg.perturbation, &mut rng);
                    degrade(img, &p, factor)
                })
                .collect::<Result<Vec<_>>>()?;
            codes.extend(model.encoder.encode_batch(&lrs, &model.stats)?);
            targets.extend(generated.into_iter().map(|(_, img)| img));
        }
    }
    Ok((codes, targets))
}

/// Runs the adaptation loop, recording progress into `trace` even when it
/// stops with an error. The encoder and non-admitted decoder parameters are
/// never written.
#[allow(clippy::too_many_arguments)]
pub fn adapt_into(
    model: &Model,
    f: &FeatureExtractor,
    stat: StyleStatistic,
    exemplar_lr: &Image,
    exemplar_hr: &Image,
    cfg: &AdaptConfig,
    trace: &mut AdaptTrace,
) -> Result<Decoder> {
    cfg.validate()?;
    let out = model.decoder.config.output_size();
    if exemplar_hr.dims() != (out, out, 3) {
        return Err(Error::Contract(format!(
            "exemplar HR is {:?}, decoder produces {out}x{out}x3",
            exemplar_hr.dims()
        )));
    }
    *trace = AdaptTrace::new(cfg.variant);
    let mut dec = model.decoder.clone();
    let scope = cfg.variant.scope();
    let mut opt = cfg.optimizer.build(cfg.eta);
    let l = dec.l();
    let initial = || {
        let mut w = MixingWeight::initial(l, cfg.alpha0, cfg.alpha0_k);
        w.raw.iter_mut().for_each(|r| *r *= cfg.alpha0_raw / HARD_RAW);
        w
    };
    let mut history: Vec<f64> = Vec::new();
    trace.stop_reason = "budget".into();
    for t in 0..cfg.outer_budget {
        let start = Instant::now();
        let w_t = project_exemplar(exemplar_lr, &model.encoder, &model.stats)?;
        let w_s = sample_source_latents(&model.stats, cfg.batch_size, derive_seed(cfg.seed, &[t as u64, 0]))?;
        let mut weight = initial();
        let alpha_initial = weight.alpha();
        let before = snapshot(&dec, scope);
        let mut alpha_losses = Vec::new();
        let mut phi_losses = Vec::new();
        let diverged = |iteration: usize, what: &str, v: f64| Error::Divergence {
            iteration,
            message: format!("{what} loss became {v}"),
        };
        let mut alpha_step = |weight: &mut MixingWeight, dec: &Decoder| -> Result<()> {
            let (loss, grad) = alpha_objective(dec, f, stat, &w_t, &w_s, &weight.raw, exemplar_hr)?;
            alpha_losses.push(loss);
            if !loss.is_finite() {
                return Err(diverged(t, "mixing-weight", loss));
            }
            for (r, g) in weight.raw.iter_mut().zip(&grad) {
                *r -= cfg.xi * g;
            }
            Ok(())
        };
        let result: Result<()> = (|| {
            let mut phi_step = |dec: &mut Decoder, weight: &MixingWeight, j: usize| -> Result<()> {
                let seed = derive_seed(cfg.seed, &[t as u64, 1, j as u64]);
                let (codes, targets) = phi_batch(model, dec, cfg, &w_t, exemplar_hr, &w_s, weight, seed)?;
                let loss = constrained_finetune(dec, &codes, &targets, f, opt.as_mut(), scope)
                    .map_err(|e| match e {
                        Error::Divergence { message, .. } => Error::Divergence { iteration: t, message },
                        other => other,
                    })?;
                phi_losses.push(loss);
                Ok(())
            };
            match cfg.interleave {
                Interleave::PerStep => {
                    for j in 0..cfg.inner_steps {
                        if cfg.variant.learns_alpha() {
                            alpha_step(&mut weight, &dec)?;
                        }
                        phi_step(&mut dec, &weight, j)?;
                    }
                }
                Interleave::Blocked => {
                    if cfg.variant.learns_alpha() {
                        for _ in 0..cfg.inner_steps {
                            alpha_step(&mut weight, &dec)?;
                        }
                    }
                    for j in 0..cfg.phi_steps {
                        phi_step(&mut dec, &weight, j)?;
                    }
                }
            }
            Ok(())
        })();
        let after = snapshot(&dec, scope);
        let delta = before
            .iter()
            .zip(&after)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let phi_loss = if phi_losses.is_empty() {
            f64::NAN
        } else {
            phi_losses.iter().sum::<f64>() / phi_losses.len() as f64
        };
        trace.records.push(OuterRecord {
            iteration: t,
            alpha_initial,
            alpha: weight.alpha(),
            alpha_losses,
            phi_losses,
            phi_loss,
            phi_delta_norm: delta,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if let Err(e) = result {
            trace.stop_reason = format!("error: {e}");
            return Err(e);
        }
        history.push(phi_loss);
        let win = cfg.convergence_window;
        if win > 0 && history.len() > win {
            let old = history[history.len() - 1 - win];
            let rel = (old - phi_loss) / old.abs().max(1e-12);
            if rel < cfg.convergence_tol {
                trace.converged = true;
                trace.stop_reason = format!("relative improvement {rel:.3e} over {win} iterations");
                break;
            }
        }
    }
    Ok(dec)
}

/// [`adapt_into`] returning the adapted decoder with its trace.
pub fn adapt(
    model: &Model,
    f: &FeatureExtractor,
    stat: StyleStatistic,
    exemplar_lr: &Image,
    exemplar_hr: &Image,
    cfg: &AdaptConfig,
) -> Result<(Decoder, AdaptTrace)> {
    let mut trace = AdaptTrace::new(cfg.variant);
    let dec = adapt_into(model, f, stat, exemplar_lr, exemplar_hr, cfg, &mut trace)?;
    Ok((dec, trace))
}
