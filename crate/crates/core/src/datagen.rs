//! Procedural face-like images, photometric domains, and the LR degradation.
//!
//! Geometry and colour of every face come from the image seed alone; a
//! [`DomainParams`] only changes photometry, so the same seed renders the
//! same face in every domain.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::kernels;

/// Photometric description of a domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainParams {
    pub gamma: f64,
    pub tint: [f64; 3],
    pub contrast: f64,
    pub vignette_strength: f64,
    pub seed: u64,
}

impl DomainParams {
    pub fn identity() -> Self {
        Self {
            gamma: 1.0,
            tint: [0.0; 3],
            contrast: 1.0,
            vignette_strength: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !(self.contrast > 0.0) {
            return Err(Error::Config(format!(
                "domain gamma and contrast must be positive (gamma={}, contrast={})",
                self.gamma, self.contrast
            )));
        }
        if self.tint.iter().any(|t| !(-0.3..=0.3).contains(t)) {
            return Err(Error::Config(format!("tint {:?} outside [-0.3, 0.3]", self.tint)));
        }
        if !(0.0..=1.0).contains(&self.vignette_strength) {
            return Err(Error::Config(format!(
                "vignette strength {} outside [0, 1]",
                self.vignette_strength
            )));
        }
        Ok(())
    }
}

impl Default for DomainParams {
    fn default() -> Self {
        Self::identity()
    }
}

/// In-plane similarity transform applied to HR faces before downsampling.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffinePerturbation {
    /// Radians, counter-clockwise in image coordinates.
    pub rotation: f64,
    /// Fraction of the image size per axis `(x, y)`.
    pub translation: [f64; 2],
    pub scale: f64,
}

impl AffinePerturbation {
    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            translation: [0.0; 2],
            scale: 1.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(ranges: &PerturbationRanges, rng: &mut R) -> Self {
        let r = ranges.max_rotation;
        let t = ranges.max_translation;
        Self {
            rotation: if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 },
            translation: [
                if t > 0.0 { rng.gen_range(-t..=t) } else { 0.0 },
                if t > 0.0 { rng.gen_range(-t..=t) } else { 0.0 },
            ],
            scale: if ranges.scale[1] > ranges.scale[0] {
                rng.gen_range(ranges.scale[0]..=ranges.scale[1])
            } else {
                ranges.scale[0]
            },
        }
    }

    /// Row-major 2×3 sampling matrix in normalized coordinates: output pixel
    /// `p` reads the input at `A·p + b`, i.e. the inverse of the content motion.
    pub fn sampling_matrix(&self) -> [f64; 6] {
        let (s, c) = self.rotation.sin_cos();
        let inv = 1.0 / self.scale;
        // Content moves by q = s·R(r)·p + t; sampling needs p = R(-r)(q - t)/s.
        let a = [c * inv, s * inv, -s * inv, c * inv];
        let (tx, ty) = (2.0 * self.translation[0], 2.0 * self.translation[1]);
        [
            a[0],
            a[1],
            -(a[0] * tx + a[1] * ty),
            a[2],
            a[3],
            -(a[2] * tx + a[3] * ty),
        ]
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerturbationRanges {
    pub max_rotation: f64,
    pub max_translation: f64,
    pub scale: [f64; 2],
}

impl Default for PerturbationRanges {
    fn default() -> Self {
        Self {
            max_rotation: std::f64::consts::PI / 6.0,
            max_translation: 0.10,
            scale: [0.9, 1.1],
        }
    }
}

impl PerturbationRanges {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=std::f64::consts::PI).contains(&self.max_rotation)
            || !(0.0..=0.5).contains(&self.max_translation)
            || !(self.scale[0] > 0.0 && self.scale[0] <= self.scale[1])
        {
            return Err(Error::Config(format!("invalid perturbation ranges {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatagenConfig {
    pub hr_size: usize,
    pub factor: usize,
    pub perturbation: PerturbationRanges,
    pub source: DomainParams,
    pub target: DomainParams,
    pub n_source: usize,
    pub n_source_test: usize,
    pub n_target_test: usize,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            hr_size: 64,
            factor: 8,
            perturbation: PerturbationRanges::default(),
            source: DomainParams::identity(),
            target: DomainParams {
                gamma: 1.4,
                tint: [0.06, 0.0, -0.06],
                contrast: 0.9,
                vignette_strength: 0.3,
                seed: 1,
            },
            n_source: 512,
            n_source_test: 32,
            n_target_test: 32,
        }
    }
}

impl DatagenConfig {
    pub fn lr_size(&self) -> usize {
        self.hr_size / self.factor
    }

    pub fn validate(&self) -> Result<()> {
        check_face_size(self.hr_size)?;
        if self.factor == 0 || self.hr_size % self.factor != 0 {
            return Err(Error::Config(format!(
                "factor {} does not divide HR size {}",
                self.factor, self.hr_size
            )));
        }
        self.perturbation.validate()?;
        self.source.validate()?;
        self.target.validate()
    }
}

fn check_face_size(size: usize) -> Result<()> {
    if size < 32 || !size.is_power_of_two() {
        return Err(Error::Config(format!(
            "face size must be a power of two >= 32, got {size}"
        )));
    }
    Ok(())
}

/// Face part covering a pixel centre.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Part {
    Background = 0,
    Head = 1,
    Eye = 2,
    Mouth = 3,
}

struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    /// Anti-aliased coverage of the pixel at normalized `(x, y)`.
    fn coverage(&self, x: f64, y: f64, pixel: f64) -> f64 {
        let u = (x - self.cx) / self.rx;
        let v = (y - self.cy) / self.ry;
        let f = (u * u + v * v).sqrt() - 1.0;
        let dist = f * self.rx.min(self.ry) / pixel;
        (0.5 - dist).clamp(0.0, 1.0)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let u = (x - self.cx) / self.rx;
        let v = (y - self.cy) / self.ry;
        u * u + v * v <= 1.0
    }
}

struct FaceLayout {
    background: [f64; 3],
    skin: [f64; 3],
    shade: f64,
    eye_color: [f64; 3],
    mouth_color: [f64; 3],
    head: Ellipse,
    eyes: [Ellipse; 2],
    mouth: Ellipse,
}

impl FaceLayout {
    fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut color = |lo: [f64; 3], hi: [f64; 3]| -> [f64; 3] {
            [
                rng.gen_range(lo[0]..hi[0]),
                rng.gen_range(lo[1]..hi[1]),
                rng.gen_range(lo[2]..hi[2]),
            ]
        };
        let background = color([0.15, 0.15, 0.15], [0.6, 0.6, 0.6]);
        let skin = color([0.55, 0.35, 0.25], [0.95, 0.8, 0.7]);
        let eye_color = color([0.02, 0.02, 0.02], [0.3, 0.25, 0.25]);
        let mouth_color = color([0.45, 0.08, 0.1], [0.8, 0.3, 0.3]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let cx = rng.gen_range(-0.06..0.06);
        let cy = rng.gen_range(-0.06..0.06);
        let rx = rng.gen_range(0.48..0.62);
        let ry = rng.gen_range(0.62..0.78);
        let eye_dy = ry * rng.gen_range(0.15..0.3);
        let eye_dx = rx * rng.gen_range(0.32..0.45);
        let eye_rx = rng.gen_range(0.08..0.12);
        let eye_ry = rng.gen_range(0.045..0.075);
        let mouth_dy = ry * rng.gen_range(0.4..0.55);
        let mouth_rx = rx * rng.gen_range(0.3..0.5);
        let mouth_ry = rng.gen_range(0.04..0.08);
        let shade = rng.gen_range(-0.2..0.2);
        Self {
            background,
            skin,
            shade,
            eye_color,
            mouth_color,
            head: Ellipse { cx, cy, rx, ry },
            eyes: [
                Ellipse {
                    cx: cx - eye_dx,
                    cy: cy - eye_dy,
                    rx: eye_rx,
                    ry: eye_ry,
                },
                Ellipse {
                    cx: cx + eye_dx,
                    cy: cy - eye_dy,
                    rx: eye_rx,
                    ry: eye_ry,
                },
            ],
            mouth: Ellipse {
                cx,
                cy: cy + mouth_dy,
                rx: mouth_rx,
                ry: mouth_ry,
            },
        }
    }

    fn part(&self, x: f64, y: f64) -> Part {
        if self.eyes.iter().any(|e| e.contains(x, y)) {
            Part::Eye
        } else if self.mouth.contains(x, y) {
            Part::Mouth
        } else if self.head.contains(x, y) {
            Part::Head
        } else {
            Part::Background
        }
    }
}

fn mix(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [
        a[0] + (b[0] - a[0]) * t,
        a[1] + (b[1] - a[1]) * t,
        a[2] + (b[2] - a[2]) * t,
    ]
}

fn normalized(i: usize, size: usize) -> f64 {
    (2.0 * i as f64 + 1.0) / size as f64 - 1.0
}

/// Renders the canonical (aligned) face for `seed` in `domain`.
pub fn synth_face(seed: u64, domain: &DomainParams, size: usize) -> Result<Image> {
    Ok(synth_face_with_mask(seed, domain, size)?.0)
}

/// Like [`synth_face`], also returning the per-pixel part labels produced by
/// the same rendering pass.
pub fn synth_face_with_mask(
    seed: u64,
    domain: &DomainParams,
    size: usize,
) -> Result<(Image, Vec<Part>)> {
    check_face_size(size)?;
    domain.validate()?;
    let layout = FaceLayout::sample(seed);
    let pixel = 2.0 / size as f64;
    let mut mask = Vec::with_capacity(size * size);
    let mut img = Image::filled(size, size, 3, 0.0);
    for yi in 0..size {
        let y = normalized(yi, size);
        for xi in 0..size {
            let x = normalized(xi, size);
            mask.push(layout.part(x, y));
            let lit = (1.0 + layout.shade * x).clamp(0.0, 2.0);
            let skin = layout.skin.map(|v| (v * lit).clamp(0.0, 1.0));
            let mut rgb = mix(layout.background, skin, layout.head.coverage(x, y, pixel));
            for eye in &layout.eyes {
                rgb = mix(rgb, layout.eye_color, eye.coverage(x, y, pixel));
            }
            rgb = mix(rgb, layout.mouth_color, layout.mouth.coverage(x, y, pixel));
            for (c, v) in rgb.iter().enumerate() {
                img.set(yi, xi, c, v.clamp(0.0, 1.0));
            }
        }
    }
    Ok((apply_domain_shift(&img, domain), mask))
}

/// `clamp(vignette(contrast · img^gamma + tint))`, in that order.
pub fn apply_domain_shift(img: &Image, domain: &DomainParams) -> Image {
    let (h, w, channels) = img.dims();
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let vig = if domain.vignette_strength == 0.0 {
                1.0
            } else {
                let (u, v) = (normalized(x, w), normalized(y, h));
                1.0 - domain.vignette_strength * (u * u + v * v) / 2.0
            };
            for c in 0..channels {
                let mut p = img.get(y, x, c);
                if domain.gamma != 1.0 {
                    p = p.powf(domain.gamma);
                }
                p = domain.contrast * p + domain.tint[c.min(2)];
                p *= vig;
                out.set(y, x, c, p.clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Block-mean downsampling by an integer factor.
pub fn area_downsample(img: &Image, factor: usize) -> Result<Image> {
    let (h, w, c) = img.dims();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Config(format!(
            "factor {factor} does not divide image size {h}x{w}"
        )));
    }
    let (ho, wo) = (h / factor, w / factor);
    let norm = 1.0 / (factor * factor) as f64;
    Ok(Image::from_fn(ho, wo, c, |y, x, ch| {
        let mut acc = 0.0;
        for dy in 0..factor {
            for dx in 0..factor {
                acc += img.get(y * factor + dy, x * factor + dx, ch);
            }
        }
        acc * norm
    }))
}

/// Bilinear affine warp with border replication.
pub fn warp_image(img: &Image, matrix: &[f64; 6]) -> Image {
    let (h, w, c) = img.dims();
    let chw = img.to_chw();
    let grid = kernels::affine_grid_forward(matrix, 1, h, w);
    let out = kernels::grid_sample_forward(chw.data(), [1, c, h, w], &grid, h, w);
    Image::from_chw(&crate::tensor::Tensor::new(&[c, h, w], out))
}

/// Warps `hr` by the perturbation, then area-averages by `factor`.
pub fn degrade(hr: &Image, perturb: &AffinePerturbation, factor: usize) -> Result<Image> {
    let (h, w, _) = hr.dims();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::Config(format!(
            "factor {factor} does not divide HR size {h}x{w}"
        )));
    }
    if !(perturb.scale > 0.0) {
        return Err(Error::Config(format!("perturbation scale {} not positive", perturb.scale)));
    }
    let warped = warp_image(hr, &perturb.sampling_matrix());
    Ok(area_downsample(&warped, factor)?.clamp01())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    SourceTrain,
    SourceTest,
    TargetExemplar,
    TargetTest,
}

impl Partition {
    pub fn as_str(self) -> &'static str {
        match self {
            Partition::SourceTrain => "source_train",
            Partition::SourceTest => "source_test",
            Partition::TargetExemplar => "target_exemplar",
            Partition::TargetTest => "target_test",
        }
    }
}

/// One LR/HR pair together with everything needed to regenerate it.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub partition: Partition,
    pub seed: u64,
    pub domain: DomainParams,
    pub perturbation: AffinePerturbation,
    pub lr: Image,
    pub hr: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub source_train: Vec<Sample>,
    pub target_exemplar: Sample,
    pub target_test: Vec<Sample>,
    pub rng_seed: u64,
}

impl DatasetSplit {
    pub fn exemplar_pair(&self) -> (&Image, &Image) {
        (&self.target_exemplar.lr, &self.target_exemplar.hr)
    }
}

/// Width of the per-partition block of image seeds.
pub const SEED_BLOCK: u64 = 1 << 24;

const SOURCE_TRAIN_BLOCK: u64 = 0;
const SOURCE_TEST_BLOCK: u64 = 1;
const TARGET_BLOCK_BASE: u64 = 2;

fn check_block(n: usize, what: &str) -> Result<()> {
    if n as u64 > SEED_BLOCK {
        return Err(Error::Config(format!(
            "{what} count {n} exceeds the per-partition seed space {SEED_BLOCK}"
        )));
    }
    Ok(())
}

fn perturbation_for(seed: u64, ranges: &PerturbationRanges) -> AffinePerturbation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xd1b5_4a32_d192_ed03) ^ 0x5bd1_e995);
    AffinePerturbation::sample(ranges, &mut rng)
}

/// Renders and degrades one sample with a seeded perturbation.
pub fn make_sample(
    seed: u64,
    partition: Partition,
    domain: &DomainParams,
    cfg: &DatagenConfig,
) -> Result<Sample> {
    let hr = synth_face(seed, domain, cfg.hr_size)?;
    let perturbation = perturbation_for(seed, &cfg.perturbation);
    let lr = degrade(&hr, &perturbation, cfg.factor)?;
    Ok(Sample {
        id: format!("{}-{seed}", partition.as_str()),
        partition,
        seed,
        domain: domain.clone(),
        perturbation,
        lr,
        hr,
    })
}

fn block_samples(
    block: u64,
    n: usize,
    partition: Partition,
    domain: &DomainParams,
    cfg: &DatagenConfig,
) -> Result<Vec<Sample>> {
    (0..n as u64)
        .map(|i| make_sample(block * SEED_BLOCK + i, partition, domain, cfg))
        .collect()
}

/// Held-out source-domain pairs from their own seed block.
pub fn make_source_test(n: usize, source: &DomainParams, cfg: &DatagenConfig) -> Result<Vec<Sample>> {
    check_block(n, "source test")?;
    block_samples(SOURCE_TEST_BLOCK, n, Partition::SourceTest, source, cfg)
}

pub fn make_source_train(n: usize, source: &DomainParams, cfg: &DatagenConfig) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Config("source training set must not be empty".into()));
    }
    check_block(n, "source train")?;
    block_samples(SOURCE_TRAIN_BLOCK, n, Partition::SourceTrain, source, cfg)
}

/// Builds a split: source training pairs, a target pool of
/// `n_target_test + 1` pairs, and one exemplar drawn from the pool by `seed`.
pub fn make_split(
    n_source: usize,
    n_target_test: usize,
    source: &DomainParams,
    target: &DomainParams,
    seed: u64,
    cfg: &DatagenConfig,
) -> Result<DatasetSplit> {
    if n_source == 0 {
        return Err(Error::Config("split sizes must be positive (n_source=0)".into()));
    }
    check_block(n_source, "source")?;
    let (target_exemplar, target_test) = make_target_partition(n_target_test, target, seed, 0, cfg)?;
    Ok(DatasetSplit {
        source_train: make_source_train(n_source, source, cfg)?,
        target_exemplar,
        target_test,
        rng_seed: seed,
    })
}

/// Target pool of `n_target_test + 1` images fixed by `seed`; `draw` picks
/// which of them becomes the exemplar, the rest form the test set.
pub fn make_target_partition(
    n_target_test: usize,
    target: &DomainParams,
    seed: u64,
    draw: u64,
    cfg: &DatagenConfig,
) -> Result<(Sample, Vec<Sample>)> {
    if n_target_test == 0 {
        return Err(Error::Config("split sizes must be positive (n_target_test=0)".into()));
    }
    check_block(n_target_test + 1, "target pool")?;
    let block = TARGET_BLOCK_BASE
        .checked_add(seed)
        .and_then(|b| b.checked_add(target.seed.wrapping_mul(1 << 16)))
        .filter(|b| b.checked_mul(SEED_BLOCK).is_some())
        .ok_or_else(|| Error::Config(format!("split seed {seed} outside seed space")))?;
    let mut pool = block_samples(block, n_target_test + 1, Partition::TargetTest, target, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(draw.wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    let pick = rng.gen_range(0..pool.len());
    let mut exemplar = pool.remove(pick);
    exemplar.partition = Partition::TargetExemplar;
    exemplar.id = format!("{}-{}", Partition::TargetExemplar.as_str(), exemplar.seed);
    Ok((exemplar, pool))
}

/// One line of the on-disk dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub partition: Partition,
    pub seed: u64,
    pub domain: DomainParams,
    pub perturbation: AffinePerturbation,
    pub hr_path: String,
    pub lr_path: String,
}

impl ManifestRecord {
    pub fn for_sample(s: &Sample) -> Self {
        Self {
            id: s.id.clone(),
            partition: s.partition,
            seed: s.seed,
            domain: s.domain.clone(),
            perturbation: s.perturbation,
            hr_path: format!("hr/{}.png", s.id),
            lr_path: format!("lr/{}.png", s.id),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn shifted() -> DomainParams {
        DomainParams {
            gamma: 1.5,
            tint: [0.1, -0.05, 0.0],
            contrast: 0.8,
            vignette_strength: 0.4,
            seed: 3,
        }
    }

    #[test]
    fn synth_face_is_deterministic_and_in_range() {
        let a = synth_face(7, &shifted(), 64).unwrap();
        let b = synth_face(7, &shifted(), 64).unwrap();
        assert_eq!(a, b);
        assert!(a.min() >= 0.0 && a.max() <= 1.0);
        assert_eq!(a.dims(), (64, 64, 3));
    }

    #[test]
    fn synth_face_rejects_bad_sizes() {
        assert!(matches!(synth_face(1, &DomainParams::identity(), 48), Err(Error::Config(_))));
        assert!(matches!(synth_face(1, &DomainParams::identity(), 16), Err(Error::Config(_))));
    }

    #[test]
    fn domain_shift_changes_photometry_only() {
        let (a, ma) = synth_face_with_mask(7, &DomainParams::identity(), 64).unwrap();
        let (b, mb) = synth_face_with_mask(7, &shifted(), 64).unwrap();
        assert_eq!(ma, mb);
        assert!(a.max_abs_diff(&b) > 0.05);
        assert!(ma.contains(&Part::Eye) && ma.contains(&Part::Mouth) && ma.contains(&Part::Head));
    }

    impl Image {
        fn max_abs_diff(&self, o: &Image) -> f64 {
            self.data()
                .iter()
                .zip(o.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max)
        }
    }

    #[test]
    fn identity_domain_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Image::from_fn(9, 11, 3, |_, _, _| rng.gen::<f64>());
        assert_eq!(apply_domain_shift(&img, &DomainParams::identity()), img);
    }

    #[test]
    fn gamma_two_squares_constant() {
        let img = Image::filled(4, 4, 3, 0.25);
        let d = DomainParams {
            gamma: 2.0,
            ..DomainParams::identity()
        };
        let out = apply_domain_shift(&img, &d);
        assert!(out.data().iter().all(|&v| v == 0.0625));
    }

    #[test]
    fn domain_shift_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let img = Image::from_fn(8, 8, 3, |_, _, _| rng.gen::<f64>());
        let d = DomainParams {
            gamma: 1.5,
            tint: [0.1, 0.0, 0.0],
            contrast: 0.8,
            vignette_strength: 0.0,
            seed: 0,
        };
        let out = apply_domain_shift(&img, &d);
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    let expect = (0.8 * img.get(y, x, c).powf(1.5) + d.tint[c]).clamp(0.0, 1.0);
                    assert!((out.get(y, x, c) - expect).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn degrade_sizes_and_errors() {
        let hr = synth_face(3, &DomainParams::identity(), 128).unwrap();
        let lr = degrade(&hr, &AffinePerturbation::identity(), 8).unwrap();
        assert_eq!(lr.dims(), (16, 16, 3));
        assert!(matches!(
            degrade(&hr, &AffinePerturbation::identity(), 3),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn degrade_preserves_constants_under_any_perturbation() {
        let hr = Image::filled(64, 64, 3, 0.37);
        let p = AffinePerturbation {
            rotation: 0.4,
            translation: [0.08, -0.05],
            scale: 1.07,
        };
        for perturb in [AffinePerturbation::identity(), p] {
            let lr = degrade(&hr, &perturb, 8).unwrap();
            assert!(lr.data().iter().all(|v| (v - 0.37).abs() < 1e-12));
        }
    }

    #[test]
    fn identity_degrade_equals_block_mean_oracle() {
        let hr = synth_face(21, &shifted(), 64).unwrap();
        let lr = degrade(&hr, &AffinePerturbation::identity(), 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    let mut s = 0.0;
                    for dy in 0..8 {
                        for dx in 0..8 {
                            s += hr.get(y * 8 + dy, x * 8 + dx, c);
                        }
                    }
                    assert!((lr.get(y, x, c) - s / 64.0).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn perturbation_matrix_is_invertible() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let p = AffinePerturbation::sample(&PerturbationRanges::default(), &mut rng);
            assert!(p.rotation.abs() <= std::f64::consts::PI / 6.0);
            assert!(p.translation.iter().all(|t| t.abs() <= 0.1));
            assert!((0.9..=1.1).contains(&p.scale));
            let m = p.sampling_matrix();
            assert!((m[0] * m[4] - m[1] * m[3]).abs() > 0.5);
        }
    }

    fn small_cfg() -> DatagenConfig {
        DatagenConfig {
            hr_size: 32,
            factor: 8,
            ..DatagenConfig::default()
        }
    }

    #[test]
    fn split_is_reproducible_and_disjoint() {
        let cfg = small_cfg();
        let a = make_split(3, 4, &DomainParams::identity(), &shifted(), 5, &cfg).unwrap();
        let b = make_split(3, 4, &DomainParams::identity(), &shifted(), 5, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.target_test.len(), 4);
        assert!(a.target_test.iter().all(|s| s.seed != a.target_exemplar.seed));
        assert!(a.target_test.iter().all(|s| s.hr != a.target_exemplar.hr));
        let source_seeds: Vec<u64> = a.source_train.iter().map(|s| s.seed).collect();
        assert!(a.target_test.iter().all(|s| !source_seeds.contains(&s.seed)));
    }

    #[test]
    fn split_size_errors() {
        let cfg = small_cfg();
        let id = DomainParams::identity();
        assert!(matches!(make_split(0, 4, &id, &id, 0, &cfg), Err(Error::Config(_))));
        assert!(matches!(make_split(2, 0, &id, &id, 0, &cfg), Err(Error::Config(_))));
        assert!(matches!(
            make_split(SEED_BLOCK as usize + 1, 1, &id, &id, 0, &cfg),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ten_split_seeds_give_distinct_exemplars() {
        let cfg = small_cfg();
        let hashes: std::collections::HashSet<String> = (0..10)
            .map(|seed| {
                make_split(1, 3, &DomainParams::identity(), &shifted(), seed, &cfg)
                    .unwrap()
                    .target_exemplar
                    .hr
                    .content_hash()
            })
            .collect();
        assert_eq!(hashes.len(), 10);
    }
}
