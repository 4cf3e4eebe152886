//! Style-based upsampling generator with AdaIN modulation.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::latent::{compute_latent_statistics, LatentCode, LatentStatistics};
use crate::tensor::{Graph, ParamStore, ParamTag, Tensor, Var};

pub const ADAIN_EPS: f64 = 1e-5;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub resolutions: Vec<usize>,
    pub channels: Vec<usize>,
    pub d_w: usize,
    pub styles_per_level: usize,
    pub mapping_depth: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            resolutions: vec![4, 8, 16, 32, 64],
            channels: vec![256, 256, 128, 64, 32],
            d_w: 64,
            styles_per_level: 2,
            mapping_depth: 3,
        }
    }
}

impl DecoderConfig {
    pub fn l(&self) -> usize {
        self.resolutions.len() * self.styles_per_level
    }

    pub fn output_size(&self) -> usize {
        *self.resolutions.last().unwrap_or(&0)
    }

    /// Channel count seen by style layer `i`.
    pub fn style_channels(&self, i: usize) -> usize {
        self.channels[i / self.styles_per_level]
    }

    /// Closed-form size of the AdaIN affine set: `Σ_i 2·c_i·(d_w + 1)`.
    pub fn phi_count(&self) -> usize {
        (0..self.l())
            .map(|i| 2 * self.style_channels(i) * (self.d_w + 1))
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.resolutions.is_empty() || self.resolutions.len() != self.channels.len() {
            return bad(format!(
                "{} resolutions but {} channel entries",
                self.resolutions.len(),
                self.channels.len()
            ));
        }
        if self.resolutions[0] < 2 || !self.resolutions[0].is_power_of_two() {
            return bad(format!("base resolution {} is not a power of two", self.resolutions[0]));
        }
        if self.resolutions.windows(2).any(|p| p[1] != 2 * p[0]) {
            return bad(format!("resolutions {:?} must double per level", self.resolutions));
        }
        if self.channels.contains(&0) || self.d_w == 0 || self.styles_per_level == 0 {
            return bad("channel counts, d_w and styles_per_level must be positive".into());
        }
        if self.l() < 2 {
            return bad(format!("need at least 2 style layers, got {}", self.l()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct StyleSlot {
    conv: Option<(usize, usize)>,
    upsample: bool,
    noise: usize,
    scale_w: usize,
    scale_b: usize,
    shift_w: usize,
    shift_b: usize,
}

/// Generator parameters plus their positions in the store.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub params: ParamStore,
    mapping: Vec<(usize, usize)>,
    constant: usize,
    styles: Vec<StyleSlot>,
    to_rgb: (usize, usize),
}

/// Result of one forward pass: the image and every pre-AdaIN activation.
pub struct Synthesis<'g> {
    pub image: Var<'g>,
    pub pre_adain: Vec<Var<'g>>,
}

fn randn(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, std, rng)
}

impl Decoder {
    pub fn new(config: DecoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let d = config.d_w;
        let mapping = (0..config.mapping_depth)
            .map(|k| {
                let w = p.add(
                    format!("mapping.{k}.weight"),
                    randn(&[d, d], (2.0 / d as f64).sqrt(), &mut rng),
                    ParamTag::Other,
                );
                let b = p.add(format!("mapping.{k}.bias"), Tensor::zeros(&[d]), ParamTag::Other);
                (w, b)
            })
            .collect();
        let r0 = config.resolutions[0];
        let c0 = config.channels[0];
        let constant = p.add("synthesis.const", randn(&[1, c0, r0, r0], 1.0, &mut rng), ParamTag::Other);
        let mut styles = Vec::with_capacity(config.l());
        let mut prev = c0;
        for i in 0..config.l() {
            let level = i / config.styles_per_level;
            let first = i % config.styles_per_level == 0;
            let c = config.style_channels(i);
            let conv = if i == 0 {
                None
            } else {
                let fan_in = prev * 9;
                let w = p.add(
                    format!("synthesis.{i}.conv.weight"),
                    randn(&[c, prev, 3, 3], (2.0 / fan_in as f64).sqrt(), &mut rng),
                    ParamTag::Other,
                );
                let b = p.add(
                    format!("synthesis.{i}.conv.bias"),
                    Tensor::zeros(&[1, c, 1, 1]),
                    ParamTag::Other,
                );
                Some((w, b))
            };
            let noise = p.add(
                format!("synthesis.{i}.noise_scale"),
                Tensor::zeros(&[1, c, 1, 1]),
                ParamTag::Other,
            );
            let std = 1.0 / (d as f64).sqrt();
            let scale_w = p.add(format!("style.{i}.scale.weight"), randn(&[d, c], std, &mut rng), ParamTag::Phi);
            let scale_b = p.add(format!("style.{i}.scale.bias"), Tensor::ones(&[c]), ParamTag::Phi);
            let shift_w = p.add(format!("style.{i}.shift.weight"), randn(&[d, c], std, &mut rng), ParamTag::Phi);
            let shift_b = p.add(format!("style.{i}.shift.bias"), Tensor::zeros(&[c]), ParamTag::Phi);
            styles.push(StyleSlot {
                conv,
                upsample: first && level > 0,
                noise,
                scale_w,
                scale_b,
                shift_w,
                shift_b,
            });
            prev = c;
        }
        let to_rgb = (
            p.add(
                "to_rgb.weight",
                randn(&[3, prev, 1, 1], (1.0 / prev as f64).sqrt(), &mut rng),
                ParamTag::Other,
            ),
            p.add("to_rgb.bias", Tensor::zeros(&[1, 3, 1, 1]), ParamTag::Other),
        );
        Ok(Self {
            config,
            params: p,
            mapping,
            constant,
            styles,
            to_rgb,
        })
    }

    /// Rebuilds a decoder around externally loaded parameters; names, shapes
    /// and tags must match the layout implied by `config` exactly.
    pub fn from_params(config: DecoderConfig, params: ParamStore) -> Result<Self> {
        let mut dec = Self::new(config, 0)?;
        check_layout(&dec.params, &params)?;
        dec.params = params;
        Ok(dec)
    }

    pub fn l(&self) -> usize {
        self.config.l()
    }

    pub fn d_w(&self) -> usize {
        self.config.d_w
    }

    /// `(φ, other)` parameter indices: disjoint, exhaustive, in store order.
    pub fn partition_parameters(&self) -> (Vec<usize>, Vec<usize>) {
        (
            self.params.indices_with_tag(ParamTag::Phi),
            self.params.indices_with_tag(ParamTag::Other),
        )
    }

    pub fn checksum_phi(&self) -> String {
        self.params.checksum(|p| p.tag == ParamTag::Phi)
    }

    pub fn checksum_other(&self) -> String {
        self.params.checksum(|p| p.tag == ParamTag::Other)
    }

    pub fn checksum(&self) -> String {
        self.params.checksum(|_| true)
    }

    /// Mapping network on a `[N, d_w]` batch.
    pub fn map_var<'g>(&self, vars: &[Var<'g>], z: Var<'g>) -> Var<'g> {
        let d = self.config.d_w;
        self.mapping.iter().fold(z, |x, &(w, b)| {
            x.matmul(vars[w])
                .add(vars[b].reshape(&[1, d]))
                .leaky_relu(LEAKY_SLOPE)
        })
    }

    pub fn map_latent(&self, z: &[f64]) -> Vec<f64> {
        let d = self.config.d_w;
        let mut x = z.to_vec();
        for &(wi, bi) in &self.mapping {
            let w = self.params.get(wi).value.data();
            let b = self.params.get(bi).value.data();
            x = (0..d)
                .map(|j| {
                    let v = b[j] + (0..d).map(|k| x[k] * w[k * d + j]).sum::<f64>();
                    if v >= 0.0 {
                        v
                    } else {
                        LEAKY_SLOPE * v
                    }
                })
                .collect();
        }
        x
    }

    pub fn latent_statistics(&self, n_samples: usize, seed: u64) -> Result<LatentStatistics> {
        compute_latent_statistics(|z| self.map_latent(z), self.d_w(), self.l(), n_samples, seed)
    }

    /// Synthesis from a `[N, l, d_w]` code batch. `noise = None` is the
    /// deterministic mode.
    pub fn forward<'g>(
        &self,
        vars: &[Var<'g>],
        w: Var<'g>,
        mut noise: Option<&mut dyn RngCore>,
    ) -> Synthesis<'g> {
        let g = w.graph();
        let ws = w.shape();
        assert!(
            ws.len() == 3 && ws[1] == self.l() && ws[2] == self.d_w(),
            "latent batch {ws:?} does not match decoder (l={}, d_w={})",
            self.l(),
            self.d_w()
        );
        let n = ws[0];
        let d = self.d_w();
        let r0 = self.config.resolutions[0];
        let c0 = self.config.channels[0];
        let mut x = g
            .constant(Tensor::zeros(&[n, c0, r0, r0]))
            .add(vars[self.constant]);
        let mut pre_adain = Vec::with_capacity(self.l());
        for (i, s) in self.styles.iter().enumerate() {
            if s.upsample {
                x = x.upsample2x();
            }
            if let Some((cw, cb)) = s.conv {
                x = x.conv2d(vars[cw], 1, 1).add(vars[cb]).leaky_relu(LEAKY_SLOPE);
            }
            if let Some(rng) = noise.as_deref_mut() {
                let sh = x.shape();
                let mut field = Tensor::zeros(&[n, 1, sh[2], sh[3]]);
                for v in field.data_mut() {
                    *v = StandardNormal.sample(rng);
                }
                x = x.add(g.constant(field).mul(vars[s.noise]));
            }
            pre_adain.push(x);
            let c = x.shape()[1];
            let wi = w.narrow(1, i, 1).reshape(&[n, d]);
            let scale = wi.matmul(vars[s.scale_w]).add(vars[s.scale_b].reshape(&[1, c]));
            let shift = wi.matmul(vars[s.shift_w]).add(vars[s.shift_b].reshape(&[1, c]));
            x = adain_var(x, scale, shift);
        }
        let image = x
            .conv2d(vars[self.to_rgb.0], 1, 0)
            .add(vars[self.to_rgb.1])
            .sigmoid();
        Synthesis { image, pre_adain }
    }

    fn check_code(&self, w: &LatentCode) -> Result<()> {
        if w.l() != self.l() || w.d_w() != self.d_w() {
            return Err(Error::Contract(format!(
                "latent {}x{} does not match decoder {}x{}",
                w.l(),
                w.d_w(),
                self.l(),
                self.d_w()
            )));
        }
        Ok(())
    }

    /// Deterministic synthesis of a batch of codes.
    pub fn synthesize_batch(&self, ws: &[LatentCode]) -> Result<Vec<Image>> {
        for w in ws {
            self.check_code(w)?;
        }
        if ws.is_empty() {
            return Ok(Vec::new());
        }
        let g = Graph::new();
        let vars = self.params.bind(&g, |_| false);
        let out = self.forward(&vars, g.constant(LatentCode::batch(ws)), None);
        Ok(Image::unbatch(&out.image.value()))
    }

    pub fn synthesize(&self, w: &LatentCode) -> Result<Image> {
        Ok(self.synthesize_batch(std::slice::from_ref(w))?.remove(0))
    }
}

/// Checks that `loaded` has exactly the names, shapes and tags of `expected`.
pub(crate) fn check_layout(expected: &ParamStore, loaded: &ParamStore) -> Result<()> {
    for p in loaded.iter() {
        if expected.index_of(&p.name).is_none() {
            return Err(Error::Load(format!("unknown parameter {}", p.name)));
        }
    }
    for (i, e) in expected.iter().enumerate() {
        let Some(j) = loaded.index_of(&e.name) else {
            return Err(Error::Load(format!("missing parameter {}", e.name)));
        };
        let l = loaded.get(j);
        if i != j || l.value.shape() != e.value.shape() || l.tag != e.tag {
            return Err(Error::Load(format!(
                "parameter {} has shape {:?}/{:?} at position {j}, expected {:?}/{:?} at {i}",
                e.name,
                l.value.shape(),
                l.tag,
                e.value.shape(),
                e.tag
            )));
        }
    }
    Ok(())
}

/// Per-instance, per-channel normalisation followed by `scale ⊙ x̂ + shift`,
/// with `scale`/`shift` of shape `[N, C]`.
pub fn adain_var<'g>(x: Var<'g>, scale: Var<'g>, shift: Var<'g>) -> Var<'g> {
    let s = x.shape();
    let (n, c) = (s[0], s[1]);
    let centred = x.sub(x.mean_axes(&[2, 3]));
    let std = centred.square().mean_axes(&[2, 3]).shift(ADAIN_EPS).sqrt();
    centred
        .div(std)
        .mul(scale.reshape(&[n, c, 1, 1]))
        .add(shift.reshape(&[n, c, 1, 1]))
}

/// AdaIN on a single `[C, H, W]` feature map.
pub fn adain(features: &Tensor, style_scale: &[f64], style_shift: &[f64]) -> Result<Tensor> {
    let s = features.shape();
    if s.len() != 3 || style_scale.len() != s[0] || style_shift.len() != s[0] {
        return Err(Error::Contract(format!(
            "adain: features {s:?} with {} scales and {} shifts",
            style_scale.len(),
            style_shift.len()
        )));
    }
    let c = s[0];
    let g = Graph::new();
    let x = g.constant(features.clone().reshape(&[1, s[0], s[1], s[2]]));
    let out = adain_var(
        x,
        g.constant(Tensor::new(&[1, c], style_scale.to_vec())),
        g.constant(Tensor::new(&[1, c], style_shift.to_vec())),
    );
    Ok((*out.value()).clone().reshape(s))
}
