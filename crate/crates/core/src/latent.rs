//! W+ latent codes, their empirical statistics, and layer-wise soft mixing.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{logistic, Tensor, Var};

/// An `l × d_w` code; row `i` is the style input of decoder layer `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    values: Tensor,
}

impl LatentCode {
    pub fn new(l: usize, d_w: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != l * d_w {
            return Err(Error::Contract(format!(
                "{} values for a {l}x{d_w} latent code",
                values.len()
            )));
        }
        Ok(Self {
            values: Tensor::new(&[l, d_w], values),
        })
    }

    pub fn from_tensor(values: Tensor) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::Contract(format!(
                "latent code must be 2-D, got {:?}",
                values.shape()
            )));
        }
        Ok(Self { values })
    }

    /// W-space code `w` copied to all `l` rows.
    pub fn broadcast(w: &[f64], l: usize) -> Self {
        Self {
            values: Tensor::new(&[l, w.len()], w.repeat(l)),
        }
    }

    pub fn l(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn d_w(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.d_w();
        &self.values.data()[i * d..(i + 1) * d]
    }

    pub fn data(&self) -> &[f64] {
        self.values.data()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.is_finite()
    }

    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.values.to_le_bytes()))
    }

    fn check_same(&self, other: &LatentCode) -> Result<()> {
        if self.values.shape() != other.values.shape() {
            return Err(Error::Contract(format!(
                "latent shapes {:?} and {:?} differ",
                self.values.shape(),
                other.values.shape()
            )));
        }
        Ok(())
    }

    /// Stacks codes into an `[N, l, d_w]` batch tensor.
    pub fn batch(codes: &[LatentCode]) -> Tensor {
        let parts: Vec<Tensor> = codes.iter().map(|c| c.values.clone()).collect();
        Tensor::stack(&parts)
    }
}

/// Per-element mean and population std of the decoder's latent family.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStatistics {
    pub mu: LatentCode,
    pub sigma: LatentCode,
    pub n_samples: usize,
    pub seed: u64,
}

impl LatentStatistics {
    pub fn l(&self) -> usize {
        self.mu.l()
    }

    pub fn d_w(&self) -> usize {
        self.mu.d_w()
    }
}

/// Maps `n_samples` standard-normal vectors through `map`, broadcasts each to
/// `l` rows, and returns elementwise mean and population std.
pub fn compute_latent_statistics(
    map: impl Fn(&[f64]) -> Vec<f64>,
    d_w: usize,
    l: usize,
    n_samples: usize,
    seed: u64,
) -> Result<LatentStatistics> {
    if n_samples < 2 {
        return Err(Error::Config(format!(
            "latent statistics need at least 2 samples, got {n_samples}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_samples * d_w);
    for i in 0..n_samples {
        let z: Vec<f64> = (0..d_w).map(|_| StandardNormal.sample(&mut rng)).collect();
        let w = map(&z);
        if w.len() != d_w {
            return Err(Error::Contract(format!(
                "mapping returned {} values, expected {d_w}",
                w.len()
            )));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "mapping produced a non-finite latent at sample {i}"
            )));
        }
        samples.extend(w);
    }
    let n = n_samples as f64;
    // Accumulating offsets from the first sample keeps constant maps exact.
    let first = samples[..d_w].to_vec();
    let mut mu = vec![0.0; d_w];
    for s in samples.chunks(d_w) {
        for ((m, v), f) in mu.iter_mut().zip(s).zip(&first) {
            *m += v - f;
        }
    }
    mu.iter_mut().zip(&first).for_each(|(m, f)| *m = f + *m / n);
    let mut var = vec![0.0; d_w];
    for s in samples.chunks(d_w) {
        for ((acc, v), m) in var.iter_mut().zip(s).zip(&mu) {
            *acc += (v - m) * (v - m);
        }
    }
    let sigma: Vec<f64> = var.iter().map(|v| (v / n).sqrt()).collect();
    Ok(LatentStatistics {
        mu: LatentCode::broadcast(&mu, l),
        sigma: LatentCode::broadcast(&sigma, l),
        n_samples,
        seed,
    })
}

/// `mu + sigma ⊙ ε` with fresh `ε ~ N(0, 1)`; also returns the draws.
pub fn sample_source_latents_with_noise(
    stats: &LatentStatistics,
    batch: usize,
    seed: u64,
) -> Result<Vec<(LatentCode, LatentCode)>> {
    if batch == 0 {
        return Err(Error::Config("latent batch must be at least 1".into()));
    }
    let (l, d) = (stats.l(), stats.d_w());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch)
        .map(|_| {
            let eps: Vec<f64> = (0..l * d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let w = stats
                .mu
                .data()
                .iter()
                .zip(stats.sigma.data())
                .zip(&eps)
                .map(|((m, s), e)| m + s * e)
                .collect();
            Ok((LatentCode::new(l, d, w)?, LatentCode::new(l, d, eps)?))
        })
        .collect()
}

pub fn sample_source_latents(
    stats: &LatentStatistics,
    batch: usize,
    seed: u64,
) -> Result<Vec<LatentCode>> {
    Ok(sample_source_latents_with_noise(stats, batch, seed)?
        .into_iter()
        .map(|(w, _)| w)
        .collect())
}

/// How the mixing weight is initialised at the start of each outer iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alpha0Policy {
    UniformHalf,
    /// Target code on the last `k` layers, source elsewhere.
    LastKTarget,
    /// Target code on the first `k` layers, source elsewhere.
    FirstKTarget,
}

/// Saturation used for hard initial assignments; `logistic(8) ≈ 1 − 3.4e-4`.
pub const HARD_RAW: f64 = 8.0;

#[derive(Clone, Debug, PartialEq)]
pub struct MixingWeight {
    pub raw: Vec<f64>,
    pub policy: Alpha0Policy,
    pub k: usize,
}

impl MixingWeight {
    pub fn initial(l: usize, policy: Alpha0Policy, k: usize) -> Self {
        let raw = (0..l)
            .map(|i| {
                let target = match policy {
                    Alpha0Policy::UniformHalf => return 0.0,
                    Alpha0Policy::LastKTarget => i + k >= l,
                    Alpha0Policy::FirstKTarget => i < k,
                };
                if target {
                    -HARD_RAW
                } else {
                    HARD_RAW
                }
            })
            .collect();
        Self { raw, policy, k }
    }

    pub fn reset(&mut self) {
        *self = Self::initial(self.raw.len(), self.policy, self.k);
    }

    pub fn alpha(&self) -> Vec<f64> {
        constrain_alpha(&self.raw)
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

/// Elementwise logistic map into `(0, 1)`.
pub fn constrain_alpha(raw: &[f64]) -> Vec<f64> {
    raw.iter().map(|&r| logistic(r)).collect()
}

/// `w_i^m = (1 − α_i) w_i^t + α_i w_i^s`, row by row.
pub fn mix_latents(w_t: &LatentCode, w_s: &LatentCode, weight: &MixingWeight) -> Result<LatentCode> {
    w_t.check_same(w_s)?;
    if weight.len() != w_t.l() {
        return Err(Error::Contract(format!(
            "mixing weight has {} entries for {} layers",
            weight.len(),
            w_t.l()
        )));
    }
    let alpha = weight.alpha();
    let d = w_t.d_w();
    let values = w_t
        .data()
        .iter()
        .zip(w_s.data())
        .enumerate()
        .map(|(i, (t, s))| t + alpha[i / d] * (s - t))
        .collect();
    LatentCode::new(w_t.l(), d, values)
}

/// Differentiable mixing of `[N, l, d_w]` (or `[l, d_w]`) codes with a raw
/// weight of shape `[l]`; same arithmetic as [`mix_latents`].
pub fn mix_latents_var<'g>(w_t: Var<'g>, w_s: Var<'g>, raw: Var<'g>) -> Var<'g> {
    let shape = w_t.shape();
    let l = raw.shape()[0];
    let mut alpha_shape = vec![1; shape.len()];
    alpha_shape[shape.len() - 2] = l;
    let alpha = raw.sigmoid().reshape(&alpha_shape);
    w_t.add(alpha.mul(w_s.sub(w_t)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Graph;
    use proptest::prelude::*;

    fn code(l: usize, d: usize, f: impl Fn(usize) -> f64) -> LatentCode {
        LatentCode::new(l, d, (0..l * d).map(f).collect()).unwrap()
    }

    #[test]
    fn constant_mapping_statistics() {
        let s = compute_latent_statistics(|_| vec![0.7; 3], 3, 4, 50, 1).unwrap();
        assert!(s.mu.data().iter().all(|&m| m == 0.7));
        assert!(s.sigma.data().iter().all(|&v| v == 0.0));
        assert_eq!((s.l(), s.d_w()), (4, 3));
    }

    #[test]
    fn identity_mapping_statistics_are_standard() {
        let n = 100_000;
        let s = compute_latent_statistics(|z| z.to_vec(), 4, 2, n, 9).unwrap();
        for (&m, &sd) in s.mu.data().iter().zip(s.sigma.data()) {
            assert!(m.abs() <= 0.02, "mean {m}");
            assert!((sd - 1.0).abs() <= 0.02, "std {sd}");
        }
        let again = compute_latent_statistics(|z| z.to_vec(), 4, 2, n, 9).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn statistics_errors() {
        assert!(matches!(
            compute_latent_statistics(|z| z.to_vec(), 2, 2, 1, 0),
            Err(Error::Config(_))
        ));
        let err = compute_latent_statistics(|_| vec![f64::NAN, 0.0], 2, 2, 5, 0).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("sample 0")));
    }

    fn stats(mu: f64, sigma: f64, l: usize, d: usize) -> LatentStatistics {
        LatentStatistics {
            mu: code(l, d, |i| mu + i as f64 * 0.1),
            sigma: code(l, d, |_| sigma),
            n_samples: 2,
            seed: 0,
        }
    }

    #[test]
    fn zero_sigma_samples_equal_mu() {
        let s = stats(0.3, 0.0, 3, 2);
        for w in sample_source_latents(&s, 5, 4).unwrap() {
            assert_eq!(w, s.mu);
        }
    }

    #[test]
    fn sample_mean_matches_mu() {
        let s = stats(0.5, 2.0, 1, 3);
        let n = 100_000;
        let samples = sample_source_latents(&s, n, 11).unwrap();
        for j in 0..3 {
            let mean = samples.iter().map(|w| w.data()[j]).sum::<f64>() / n as f64;
            assert!((mean - s.mu.data()[j]).abs() <= 3.0 * 2.0 / (n as f64).sqrt());
        }
        assert!(samples.iter().all(|w| (w.l(), w.d_w()) == (1, 3)));
        assert!(matches!(sample_source_latents(&s, 0, 1), Err(Error::Config(_))));
    }

    #[test]
    fn samples_recover_recorded_noise() {
        let s = stats(-0.2, 1.5, 2, 3);
        for (w, eps) in sample_source_latents_with_noise(&s, 4, 3).unwrap() {
            for ((v, m), e) in w.data().iter().zip(s.mu.data()).zip(eps.data()) {
                assert!(((v - m) / 1.5 - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mixing_endpoints_and_midpoint() {
        let t = code(3, 2, |i| i as f64 * 0.5 - 1.0);
        let s = code(3, 2, |i| 2.0 - i as f64 * 0.3);
        let lo = MixingWeight {
            raw: vec![-20.0; 3],
            policy: Alpha0Policy::UniformHalf,
            k: 0,
        };
        let hi = MixingWeight {
            raw: vec![20.0; 3],
            ..lo.clone()
        };
        let m0 = mix_latents(&t, &s, &lo).unwrap();
        let m1 = mix_latents(&t, &s, &hi).unwrap();
        for i in 0..6 {
            assert!((m0.data()[i] - t.data()[i]).abs() <= 1e-8);
            assert!((m1.data()[i] - s.data()[i]).abs() <= 1e-8);
        }
        let half = MixingWeight::initial(1, Alpha0Policy::UniformHalf, 0);
        let mid = mix_latents(
            &LatentCode::new(1, 2, vec![0.0, 2.0]).unwrap(),
            &LatentCode::new(1, 2, vec![2.0, 0.0]).unwrap(),
            &half,
        )
        .unwrap();
        assert_eq!(mid.data(), &[1.0, 1.0]);
    }

    #[test]
    fn mixing_shape_mismatch_is_contract_error() {
        let t = code(3, 2, |_| 0.0);
        let w = MixingWeight::initial(2, Alpha0Policy::UniformHalf, 0);
        assert!(matches!(mix_latents(&t, &t, &w), Err(Error::Contract(_))));
        let s = code(2, 3, |_| 0.0);
        let w = MixingWeight::initial(3, Alpha0Policy::UniformHalf, 0);
        assert!(matches!(mix_latents(&t, &s, &w), Err(Error::Contract(_))));
    }

    #[test]
    fn logistic_values() {
        assert_eq!(constrain_alpha(&[0.0]), vec![0.5]);
        assert!((constrain_alpha(&[3f64.ln()])[0] - 0.75).abs() < 1e-15);
        let xs = [-50.0, -5.0, 0.0, 5.0, 50.0, 800.0];
        let a = constrain_alpha(&xs);
        assert!(a.windows(2).all(|p| p[0] <= p[1]));
        assert_eq!(a[5], 1.0);
    }

    #[test]
    fn last_k_target_initialisation() {
        let w = MixingWeight::initial(10, Alpha0Policy::LastKTarget, 3);
        let a = w.alpha();
        for (i, v) in a.iter().enumerate() {
            let expect = if i >= 7 { 0.0 } else { 1.0 };
            assert!((v - expect).abs() < 1e-3);
        }
        let f = MixingWeight::initial(10, Alpha0Policy::FirstKTarget, 3).alpha();
        assert!(f[0] < 1e-3 && f[3] > 1.0 - 1e-3);
    }

    #[test]
    fn mix_var_matches_scalar_and_finite_differences() {
        let (l, d) = (3, 2);
        let t = code(l, d, |i| (i as f64 * 0.7).sin());
        let s = code(l, d, |i| (i as f64 * 1.3).cos());
        let raw = vec![0.3, -1.2, 2.0];
        let weight = MixingWeight {
            raw: raw.clone(),
            policy: Alpha0Policy::UniformHalf,
            k: 0,
        };
        let expect = mix_latents(&t, &s, &weight).unwrap();
        let coeffs: Vec<f64> = (0..l * d).map(|i| 1.0 + i as f64 * 0.25).collect();
        let objective = |raw: &[f64]| -> (f64, Vec<f64>) {
            let g = Graph::new();
            let r = g.var(Tensor::new(&[l], raw.to_vec()));
            let m = mix_latents_var(
                g.constant(t.tensor().clone()),
                g.constant(s.tensor().clone()),
                r,
            );
            let c = g.constant(Tensor::new(&[l, d], coeffs.clone()));
            let out = m.mul(c).sum_all();
            let grads = g.backward(out);
            (out.item(), grads.get(r).unwrap().data().to_vec())
        };
        {
            let g = Graph::new();
            let m = mix_latents_var(
                g.constant(t.tensor().clone()),
                g.constant(s.tensor().clone()),
                g.constant(Tensor::new(&[l], raw.clone())),
            );
            assert_eq!(m.value().data(), expect.data());
        }
        let (_, grad) = objective(&raw);
        let h = 1e-5;
        for i in 0..l {
            let mut p = raw.clone();
            p[i] += h;
            let mut m = raw.clone();
            m[i] -= h;
            let fd = (objective(&p).0 - objective(&m).0) / (2.0 * h);
            assert!((fd - grad[i]).abs() <= 1e-4 * fd.abs().max(1e-8), "{fd} vs {}", grad[i]);
        }
    }

    proptest! {
        #[test]
        fn mixing_is_rowwise_convex(
            t in prop::collection::vec(-5.0f64..5.0, 6),
            s in prop::collection::vec(-5.0f64..5.0, 6),
            raw in prop::collection::vec(-10.0f64..10.0, 3),
        ) {
            let t = LatentCode::new(3, 2, t).unwrap();
            let s = LatentCode::new(3, 2, s).unwrap();
            let w = MixingWeight { raw, policy: Alpha0Policy::UniformHalf, k: 0 };
            let m = mix_latents(&t, &s, &w).unwrap();
            for i in 0..6 {
                let (a, b) = (t.data()[i], s.data()[i]);
                let tol = 1e-12 * (a.abs() + b.abs());
                prop_assert!(m.data()[i] >= a.min(b) - tol && m.data()[i] <= a.max(b) + tol);
            }
        }

        #[test]
        fn self_mixing_is_identity(
            t in prop::collection::vec(-5.0f64..5.0, 6),
            raw in prop::collection::vec(-30.0f64..30.0, 3),
        ) {
            let t = LatentCode::new(3, 2, t).unwrap();
            let w = MixingWeight { raw, policy: Alpha0Policy::UniformHalf, k: 0 };
            prop_assert_eq!(mix_latents(&t, &t, &w).unwrap(), t);
        }
    }
}
