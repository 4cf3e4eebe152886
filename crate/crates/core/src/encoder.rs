//! Pyramid encoder: instance-normalised spatial transformers, a small
//! residual backbone, multi-scale context and per-layer attention heads that
//! predict offsets on the decoder's latent family.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::latent::{LatentCode, LatentStatistics};
use crate::tensor::{kernels, Graph, ParamStore, ParamTag, Tensor, Var};

/// Instance-norm stabiliser inside the transformer heads. Kept far below the
/// AdaIN one so that per-channel restyling cancels to ~1e-8.
pub const ISTN_EPS: f64 = 1e-8;
const SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub lr_size: usize,
    /// Bilinear pre-upsampling factor applied to the LR input.
    pub upsample: usize,
    pub stage_channels: [usize; 4],
    /// Stage indices hosting a transformer: 0 is the raw input, `k` the
    /// output of stage `k`.
    pub istn_sites: Vec<usize>,
    pub istn_hidden: usize,
    pub context_channels: usize,
    pub ale_reduction: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            lr_size: 8,
            upsample: 4,
            stage_channels: [64, 128, 256, 256],
            istn_sites: vec![0, 2],
            istn_hidden: 32,
            context_channels: 128,
            ale_reduction: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let size = self.lr_size * self.upsample;
        if size < 16 || size % 8 != 0 {
            return Err(Error::Config(format!(
                "upsampled LR size {size} must be a multiple of 8 and at least 16"
            )));
        }
        if self.stage_channels.contains(&0)
            || self.istn_hidden == 0
            || self.context_channels == 0
            || self.ale_reduction == 0
        {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if self.istn_sites.iter().any(|&s| s > 4) {
            return Err(Error::Config(format!("ISTN sites {:?} outside 0..=4", self.istn_sites)));
        }
        Ok(())
    }

    fn site_channels(&self, site: usize) -> usize {
        if site == 0 {
            3
        } else {
            self.stage_channels[site - 1]
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct Istn {
    site: usize,
    conv1: Lin,
    conv2: Lin,
    head: Lin,
}

#[derive(Clone, Debug)]
struct Stage {
    conv_a: Lin,
    conv_b: Lin,
    skip: Lin,
    stride: usize,
}

#[derive(Clone, Debug)]
struct Ale {
    squeeze: Lin,
    excite: Lin,
    proj: Lin,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub l: usize,
    pub d_w: usize,
    pub params: ParamStore,
    istns: Vec<Istn>,
    stages: Vec<Stage>,
    fuse: Lin,
    ales: Vec<Ale>,
}

/// Everything one forward pass exposes.
pub struct EncodeOutput<'g> {
    /// `[N, l, d_w]` codes `mu + e ⊙ sigma`.
    pub w: Var<'g>,
    /// `[N, l, d_w]` ALE offsets `e`.
    pub offsets: Var<'g>,
    /// `[N, 2, 3]` transform predicted at each ISTN site.
    pub thetas: Vec<Var<'g>>,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    fn conv(&mut self, name: &str, o: usize, i: usize, k: usize) -> Lin {
        let std = (2.0 / (i * k * k) as f64).sqrt();
        Lin {
            w: self.store.add(
                format!("{name}.weight"),
                Tensor::randn(&[o, i, k, k], std, &mut self.rng),
                ParamTag::Theta,
            ),
            b: self.store.add(format!("{name}.bias"), Tensor::zeros(&[1, o, 1, 1]), ParamTag::Theta),
        }
    }

    fn linear(&mut self, name: &str, i: usize, o: usize, std: f64) -> Lin {
        Lin {
            w: self.store.add(
                format!("{name}.weight"),
                Tensor::randn(&[i, o], std, &mut self.rng),
                ParamTag::Theta,
            ),
            b: self.store.add(format!("{name}.bias"), Tensor::zeros(&[o]), ParamTag::Theta),
        }
    }
}

fn conv<'g>(vars: &[Var<'g>], x: Var<'g>, p: Lin, stride: usize) -> Var<'g> {
    let k = vars[p.w].shape()[2];
    x.conv2d(vars[p.w], stride, k / 2).add(vars[p.b])
}

fn linear<'g>(vars: &[Var<'g>], x: Var<'g>, p: Lin) -> Var<'g> {
    let o = vars[p.w].shape()[1];
    x.matmul(vars[p.w]).add(vars[p.b].reshape(&[1, o]))
}

/// Per-instance, per-channel standardisation with [`ISTN_EPS`].
pub fn instance_norm<'g>(x: Var<'g>) -> Var<'g> {
    let centred = x.sub(x.mean_axes(&[2, 3]));
    centred.div(centred.square().mean_axes(&[2, 3]).shift(ISTN_EPS).sqrt())
}

/// Maps unconstrained head outputs `[N, 6]` to `[N, 2, 3]` transforms
/// `[R(a)·[[sx, h], [0, sy]] | t]` with every factor soft-clamped, so the
/// linear block keeps `det = sx·sy ≥ e⁻¹` and zero input gives the identity.
pub fn affine_from_raw<'g>(raw: Var<'g>) -> Var<'g> {
    let n = raw.shape()[0];
    let col = |i: usize| raw.narrow(1, i, 1).tanh();
    let angle = col(0).scale(std::f64::consts::FRAC_PI_4);
    let sx = col(1).scale(0.5).exp();
    let sy = col(2).scale(0.5).exp();
    let shear = col(3).scale(0.5);
    let tx = col(4).scale(0.5);
    let ty = col(5).scale(0.5);
    let (c, s) = (angle.cos(), angle.sin());
    let a11 = c.mul(sx);
    let a12 = c.mul(shear).sub(s.mul(sy));
    let a21 = s.mul(sx);
    let a22 = s.mul(shear).add(c.mul(sy));
    Var::concat(&[a11, a12, tx, a21, a22, ty], 1).reshape(&[n, 2, 3])
}

/// Bilinear warp of an NCHW tensor by `[N, 2, 3]` transforms.
pub fn warp_var<'g>(x: Var<'g>, theta: Var<'g>) -> Var<'g> {
    let s = x.shape();
    x.grid_sample(theta.affine_grid(s[2], s[3]))
}

/// Plain-value warp of a `[N, C, H, W]` tensor by one transform.
pub fn warp(x: &Tensor, theta: &[f64; 6]) -> Tensor {
    let s = x.shape();
    let n = s[0];
    let grid = kernels::affine_grid_forward(&theta.repeat(n), n, s[2], s[3]);
    let out = kernels::grid_sample_forward(x.data(), [s[0], s[1], s[2], s[3]], &grid, s[2], s[3]);
    Tensor::new(s, out)
}

impl Encoder {
    pub fn new(config: EncoderConfig, l: usize, d_w: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if l == 0 || d_w == 0 {
            return Err(Error::Config(format!("encoder needs l, d_w > 0 (got {l}, {d_w})")));
        }
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let h = config.istn_hidden;
        let mut istns = Vec::new();
        let mut stages = Vec::new();
        let mut sites = config.istn_sites.clone();
        sites.sort_unstable();
        sites.dedup();
        let mut prev = 3;
        for s in 0..=4 {
            if sites.contains(&s) {
                let c = config.site_channels(s);
                let conv1 = init.conv(&format!("istn{s}.conv1"), h, c, 3);
                let conv2 = init.conv(&format!("istn{s}.conv2"), h, h, 3);
                let head = init.linear(&format!("istn{s}.head"), h, 6, 0.0);
                istns.push(Istn {
                    site: s,
                    conv1,
                    conv2,
                    head,
                });
            }
            if s < 4 {
                let c = config.stage_channels[s];
                let stride = if s == 0 { 1 } else { 2 };
                stages.push(Stage {
                    conv_a: init.conv(&format!("stage{}.conv_a", s + 1), c, prev, 3),
                    conv_b: init.conv(&format!("stage{}.conv_b", s + 1), c, c, 3),
                    skip: init.conv(&format!("stage{}.skip", s + 1), c, prev, 1),
                    stride,
                });
                prev = c;
            }
        }
        let [_, c3, c4, c5] = config.stage_channels;
        let ctx = config.context_channels;
        let fuse = init.conv("pyramid.fuse", ctx, c3 + c4 + c5 + c5, 1);
        let hidden = (ctx / config.ale_reduction).max(1);
        let ales = (0..l)
            .map(|i| Ale {
                squeeze: init.linear(&format!("ale{i}.squeeze"), ctx, hidden, (2.0 / ctx as f64).sqrt()),
                excite: init.linear(&format!("ale{i}.excite"), hidden, ctx, (1.0 / hidden as f64).sqrt()),
                proj: init.linear(&format!("ale{i}.proj"), ctx, d_w, 0.1 / (ctx as f64).sqrt()),
            })
            .collect();
        Ok(Self {
            config,
            l,
            d_w,
            params: store,
            istns,
            stages,
            fuse,
            ales,
        })
    }

    pub fn from_params(config: EncoderConfig, l: usize, d_w: usize, params: ParamStore) -> Result<Self> {
        let mut enc = Self::new(config, l, d_w, 0)?;
        crate::decoder::check_layout(&enc.params, &params)?;
        enc.params = params;
        Ok(enc)
    }

    pub fn checksum(&self) -> String {
        self.params.checksum(|_| true)
    }

    pub fn istn_sites(&self) -> Vec<usize> {
        self.istns.iter().map(|t| t.site).collect()
    }

    fn istn(&self, site: usize) -> Result<&Istn> {
        self.istns
            .iter()
            .find(|t| t.site == site)
            .ok_or_else(|| Error::Contract(format!("no ISTN at site {site}")))
    }

    /// Transform predicted by the ISTN at `site` for NCHW `features`.
    pub fn istn_theta<'g>(&self, vars: &[Var<'g>], site: usize, features: Var<'g>) -> Var<'g> {
        let t = self.istn(site).expect("ISTN site");
        let h = instance_norm(features);
        let h = conv(vars, h, t.conv1, 2).leaky_relu(SLOPE);
        let h = conv(vars, h, t.conv2, 2).leaky_relu(SLOPE);
        let n = h.shape()[0];
        let c = h.shape()[1];
        let pooled = h.mean_axes(&[2, 3]).reshape(&[n, c]);
        affine_from_raw(linear(vars, pooled, t.head))
    }

    /// Plain-value ISTN prediction for one `[C, H, W]` feature map.
    pub fn istn_predict(&self, site: usize, features: &Tensor) -> Result<[f64; 6]> {
        self.istn(site)?;
        let s = features.shape();
        if s.len() != 3 || s[0] != self.config.site_channels(site) || s[1] < 4 || s[2] < 4 {
            return Err(Error::Contract(format!("ISTN site {site} cannot take features {s:?}")));
        }
        let g = Graph::new();
        let vars = self.params.bind(&g, |_| false);
        let x = g.constant(features.clone().reshape(&[1, s[0], s[1], s[2]]));
        let theta = self.istn_theta(&vars, site, x).value();
        let mut out = [0.0; 6];
        out.copy_from_slice(theta.data());
        Ok(out)
    }

    /// Upsample C4, C5 to C3's size, broadcast the global vector, concatenate
    /// and fuse with a 1×1 convolution.
    pub fn build_pyramid_context<'g>(
        &self,
        vars: &[Var<'g>],
        c3: Var<'g>,
        c4: Var<'g>,
        c5: Var<'g>,
        global: Var<'g>,
    ) -> Result<Var<'g>> {
        let s3 = c3.shape();
        let n = s3[0];
        if [c4.shape()[0], c5.shape()[0], global.shape()[0]].iter().any(|&b| b != n) {
            return Err(Error::Contract("pyramid stages have different batch sizes".into()));
        }
        let (h, w) = (s3[2], s3[3]);
        let g = c3.graph();
        let ones = g.constant(Tensor::ones(&[1, 1, h, w]));
        let stacked = Var::concat(
            &[
                c3,
                c4.resize_bilinear(h, w),
                c5.resize_bilinear(h, w),
                global.mul(ones),
            ],
            1,
        );
        Ok(conv(vars, stacked, self.fuse, 1).leaky_relu(SLOPE))
    }

    /// ALE head `i`: channel attention over the context, pooled and projected
    /// to a `[N, d_w]` offset.
    pub fn ale<'g>(&self, vars: &[Var<'g>], context: Var<'g>, i: usize) -> Result<Var<'g>> {
        let a = self
            .ales
            .get(i)
            .ok_or_else(|| Error::Contract(format!("ALE index {i} outside 0..{}", self.l)))?;
        let s = context.shape();
        let (n, c) = (s[0], s[1]);
        let squeezed = context.mean_axes(&[2, 3]).reshape(&[n, c]);
        let hidden = linear(vars, squeezed, a.squeeze).leaky_relu(SLOPE);
        let gate = linear(vars, hidden, a.excite).sigmoid();
        let gated = context.mul(gate.reshape(&[n, c, 1, 1]));
        let pooled = gated.mean_axes(&[2, 3]).reshape(&[n, c]);
        Ok(linear(vars, pooled, a.proj))
    }

    fn check_stats(&self, stats: &LatentStatistics) -> Result<()> {
        if stats.l() != self.l || stats.d_w() != self.d_w {
            return Err(Error::Config(format!(
                "latent statistics are {}x{} but the encoder predicts {}x{}",
                stats.l(),
                stats.d_w(),
                self.l,
                self.d_w
            )));
        }
        Ok(())
    }

    /// Full forward pass on an `[N, 3, h, w]` LR batch.
    pub fn forward<'g>(
        &self,
        vars: &[Var<'g>],
        lr: Var<'g>,
        stats: &LatentStatistics,
    ) -> Result<EncodeOutput<'g>> {
        self.check_stats(stats)?;
        let s = lr.shape();
        let size = self.config.lr_size;
        if s.len() != 4 || s[1] != 3 || s[2] != size || s[3] != size {
            return Err(Error::Contract(format!(
                "encoder expects [N, 3, {size}, {size}] input, got {s:?}"
            )));
        }
        let n = s[0];
        let up = size * self.config.upsample;
        let mut x = lr.resize_bilinear(up, up);
        let mut thetas = Vec::new();
        let mut taps = Vec::with_capacity(4);
        for site in 0..=4 {
            if self.istns.iter().any(|t| t.site == site) {
                let theta = self.istn_theta(vars, site, x);
                x = warp_var(x, theta);
                thetas.push(theta);
            }
            if site < 4 {
                let st = &self.stages[site];
                let y = conv(vars, x, st.conv_a, st.stride).leaky_relu(SLOPE);
                let y = conv(vars, y, st.conv_b, 1);
                let skip = conv(vars, x, st.skip, st.stride);
                x = y.add(skip).leaky_relu(SLOPE);
                taps.push(x);
            }
        }
        let global = taps[3].mean_axes(&[2, 3]);
        let context = self.build_pyramid_context(vars, taps[1], taps[2], taps[3], global)?;
        let rows = (0..self.l)
            .map(|i| Ok(self.ale(vars, context, i)?.reshape(&[n, 1, self.d_w])))
            .collect::<Result<Vec<_>>>()?;
        let offsets = Var::concat(&rows, 1);
        let g = lr.graph();
        let shape = [1, self.l, self.d_w];
        let mu = g.constant(stats.mu.tensor().clone().reshape(&shape));
        let sigma = g.constant(stats.sigma.tensor().clone().reshape(&shape));
        let w = mu.add(offsets.mul(sigma));
        Ok(EncodeOutput { w, offsets, thetas })
    }

    pub fn encode_batch(&self, lrs: &[Image], stats: &LatentStatistics) -> Result<Vec<LatentCode>> {
        self.check_stats(stats)?;
        if lrs.is_empty() {
            return Ok(Vec::new());
        }
        let g = Graph::new();
        let vars = self.params.bind(&g, |_| false);
        let out = self.forward(&vars, g.constant(Image::batch(lrs)), stats)?;
        let w = out.w.value();
        (0..lrs.len())
            .map(|i| LatentCode::from_tensor(w.index0(i)))
            .collect()
    }

    /// `w = mu + E(I_LR) ⊙ sigma`.
    pub fn encode(&self, lr: &Image, stats: &LatentStatistics) -> Result<LatentCode> {
        Ok(self.encode_batch(std::slice::from_ref(lr), stats)?.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            lr_size: 4,
            upsample: 4,
            stage_channels: [3, 4, 4, 3],
            istn_sites: vec![0, 2],
            istn_hidden: 3,
            context_channels: 4,
            ale_reduction: 2,
        }
    }

    fn stats(l: usize, d: usize, sigma: f64) -> LatentStatistics {
        LatentStatistics {
            mu: LatentCode::new(l, d, (0..l * d).map(|i| i as f64 * 0.1 - 0.3).collect()).unwrap(),
            sigma: LatentCode::new(l, d, (0..l * d).map(|i| sigma * (1.0 + (i % 3) as f64)).collect()).unwrap(),
            n_samples: 2,
            seed: 0,
        }
    }

    fn random_lr(seed: u64, size: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(size, size, 3, |_, _, _| rng.gen())
    }

    fn randomise_heads(enc: &mut Encoder, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..enc.params.len() {
            if enc.params.get(i).name.contains(".head.") {
                let shape = enc.params.get(i).value.shape().to_vec();
                enc.params.get_mut(i).value = Tensor::randn(&shape, 0.5, &mut rng);
            }
        }
    }

    #[test]
    fn fresh_istn_predicts_identity() {
        let enc = Encoder::new(tiny_config(), 2, 3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = Tensor::randn(&[4, 8, 8], 1.0, &mut rng);
        assert_eq!(enc.istn_predict(2, &f).unwrap(), [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn istn_is_invariant_to_channel_restyling() {
        let mut enc = Encoder::new(tiny_config(), 2, 3, 1).unwrap();
        randomise_heads(&mut enc, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let f = Tensor::randn(&[4, 8, 8], 1.0, &mut rng);
            let a: Vec<f64> = (0..4).map(|_| rng.gen_range(0.5..2.0)).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let restyled = Tensor::from_fn(&[4, 8, 8], |i| a[i / 64] * f.data()[i] + b[i / 64]);
            let p = enc.istn_predict(2, &f).unwrap();
            let q = enc.istn_predict(2, &restyled).unwrap();
            assert!(p != [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
            for k in 0..6 {
                worst = worst.max((p[k] - q[k]).abs());
            }
        }
        assert!(worst <= 1e-5, "max deviation {worst}");
    }

    #[test]
    fn affine_parameterisation_guards_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Graph::new();
        let raw = g.constant(Tensor::randn(&[200, 6], 5.0, &mut rng));
        let t = affine_from_raw(raw).value();
        for m in t.data().chunks(6) {
            let det = m[0] * m[4] - m[1] * m[3];
            assert!(det > 0.25, "det {det}");
        }
        let zero = affine_from_raw(g.constant(Tensor::zeros(&[1, 6]))).value();
        assert_eq!(zero.data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    fn smooth_image(size: usize) -> Tensor {
        Tensor::from_fn(&[1, 3, size, size], |i| {
            let c = i / (size * size);
            let y = (i / size) % size;
            let x = i % size;
            let (u, v) = (x as f64 / size as f64, y as f64 / size as f64);
            0.5 + 0.3 * (3.0 * u + c as f64).sin() * (2.0 * v).cos()
        })
    }

    fn rotation(deg: f64) -> [f64; 6] {
        let (s, c) = deg.to_radians().sin_cos();
        [c, -s, 0.0, s, c, 0.0]
    }

    #[test]
    fn warp_identity_constant_and_composition() {
        let x = smooth_image(32);
        assert_eq!(warp(&x, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]), x);
        let flat = Tensor::full(&[1, 3, 16, 16], 0.42);
        let odd = [0.9, 0.3, 0.1, -0.2, 1.1, -0.05];
        assert!(warp(&flat, &odd).data().iter().all(|v| (v - 0.42).abs() < 1e-12));
        let twice = warp(&warp(&x, &rotation(15.0)), &rotation(10.0));
        let once = warp(&x, &rotation(25.0));
        let mae = twice
            .data()
            .iter()
            .zip(once.data())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / once.numel() as f64;
        assert!(mae <= 2.0 / 255.0, "mae {mae}");
    }

    #[test]
    fn pyramid_shapes_and_c3_only_path() {
        let enc = Encoder::new(tiny_config(), 2, 3, 2).unwrap();
        let g = Graph::new();
        let vars = enc.params.bind(&g, |_| false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c3 = g.constant(Tensor::randn(&[2, 4, 8, 8], 1.0, &mut rng));
        let c4 = g.constant(Tensor::zeros(&[2, 4, 4, 4]));
        let c5 = g.constant(Tensor::zeros(&[2, 3, 2, 2]));
        let cg = g.constant(Tensor::zeros(&[2, 3, 1, 1]));
        let ctx = enc.build_pyramid_context(&vars, c3, c4, c5, cg).unwrap();
        assert_eq!(ctx.shape(), vec![2, 4, 8, 8]);
        assert_eq!(enc.params.get(enc.fuse.w).value.shape(), &[4, 4 + 4 + 3 + 3, 1, 1]);
        // Oracle: only the C3 columns of the fuse kernel matter.
        let w3 = g.constant(Tensor::from_fn(&[4, 4, 1, 1], |i| {
            enc.params.get(enc.fuse.w).value.data()[(i / 4) * 14 + i % 4]
        }));
        let oracle = c3.conv2d(w3, 1, 0).add(vars[enc.fuse.b]).leaky_relu(SLOPE);
        assert!(ctx.value().max_abs_diff(&oracle.value()) < 1e-12);
        let bad = g.constant(Tensor::zeros(&[1, 4, 4, 4]));
        assert!(enc.build_pyramid_context(&vars, c3, bad, c5, cg).is_err());
    }

    #[test]
    fn ale_with_open_gates_is_pooled_projection() {
        let mut enc = Encoder::new(tiny_config(), 3, 2, 5).unwrap();
        let ex = enc.ales[1].excite;
        enc.params.get_mut(ex.w).value = Tensor::zeros(&[2, 4]);
        enc.params.get_mut(ex.b).value = Tensor::full(&[4], 40.0);
        let g = Graph::new();
        let vars = enc.params.bind(&g, |_| false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ctx = g.constant(Tensor::randn(&[2, 4, 5, 5], 1.0, &mut rng));
        let e = enc.ale(&vars, ctx, 1).unwrap();
        let plain = linear(&vars, ctx.mean_axes(&[2, 3]).reshape(&[2, 4]), enc.ales[1].proj);
        assert!(e.value().max_abs_diff(&plain.value()) < 1e-12);
        let other = enc.ale(&vars, ctx, 0).unwrap();
        assert!(other.value().max_abs_diff(&e.value()) > 1e-6);
        assert_ne!(enc.ales[0].proj.w, enc.ales[1].proj.w);
        assert!(matches!(enc.ale(&vars, ctx, 3), Err(Error::Contract(_))));
    }

    #[test]
    fn zeroed_context_channel_has_no_projection_sensitivity() {
        let enc = Encoder::new(tiny_config(), 2, 3, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ctx = Tensor::randn(&[1, 4, 4, 4], 1.0, &mut rng);
        ctx.data_mut()[2 * 16..3 * 16].iter_mut().for_each(|v| *v = 0.0);
        let g = Graph::new();
        let vars = enc.params.bind(&g, |p| p.name.starts_with("ale0.proj"));
        let e = enc.ale(&vars, g.constant(ctx), 0).unwrap();
        let grads = g.backward(e.sum_all());
        let dp = grads.get(vars[enc.ales[0].proj.w]).unwrap();
        assert!(dp.data()[2 * 3..3 * 3].iter().all(|&v| v == 0.0));
        assert!(dp.data()[0..3].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zero_offsets_give_mu_and_offsets_invert() {
        let mut enc = Encoder::new(tiny_config(), 2, 3, 7).unwrap();
        let st = stats(2, 3, 0.5);
        let lr = random_lr(1, 4);
        let g = Graph::new();
        let vars = enc.params.bind(&g, |_| false);
        let out = enc.forward(&vars, g.constant(Image::batch(&[lr.clone()])), &st).unwrap();
        let (w, e) = (out.w.value(), out.offsets.value());
        for i in 0..6 {
            let rec = (w.data()[i] - st.mu.data()[i]) / st.sigma.data()[i];
            assert!((rec - e.data()[i]).abs() <= 1e-6);
        }
        for ale in enc.ales.clone() {
            enc.params.get_mut(ale.proj.w).value = Tensor::zeros(&[4, 3]);
        }
        assert_eq!(enc.encode(&lr, &st).unwrap(), st.mu);
        let degenerate = stats(2, 3, 0.0);
        assert_eq!(
            Encoder::new(tiny_config(), 2, 3, 7).unwrap().encode(&lr, &degenerate).unwrap(),
            degenerate.mu
        );
    }

    #[test]
    fn encode_checks_shapes_and_statistics() {
        let enc = Encoder::new(tiny_config(), 2, 3, 7).unwrap();
        assert!(matches!(enc.encode(&random_lr(0, 4), &stats(3, 3, 1.0)), Err(Error::Config(_))));
        assert!(matches!(enc.encode(&random_lr(0, 8), &stats(2, 3, 1.0)), Err(Error::Contract(_))));
        let w = enc.encode(&random_lr(0, 4), &stats(2, 3, 1.0)).unwrap();
        assert_eq!((w.l(), w.d_w()), (2, 3));
    }

    #[test]
    fn untrained_istns_apply_identity_warps() {
        let enc = Encoder::new(tiny_config(), 2, 3, 7).unwrap();
        let g = Graph::new();
        let vars = enc.params.bind(&g, |_| false);
        let out = enc
            .forward(&vars, g.constant(Image::batch(&[random_lr(2, 4)])), &stats(2, 3, 1.0))
            .unwrap();
        assert_eq!(out.thetas.len(), 2);
        for t in out.thetas {
            assert_eq!(t.value().data(), &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        }
    }
}
