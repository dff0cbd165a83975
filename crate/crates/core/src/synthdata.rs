//! Seeded two-domain segmentation data: rendering, splits, crops and the
//! four perturbation tactics used to build coupling bundles.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::Cell;
use core::fmt;
use core::str::FromStr;

use rand::Rng;

use crate::error::{param, Result};
use crate::math;
use crate::rng::{derive, normal, rng_from, SeededRng};
use crate::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DomainId {
    A,
    B,
}

impl fmt::Display for DomainId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DomainId::A => "A",
            DomainId::B => "B",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    EllipseBlob,
    RibbonCurve,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Smooth,
    Striped,
    Speckled,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IntensityProfile {
    pub fg_mean: f64,
    pub bg_mean: f64,
    pub noise_sigma: f64,
}

/// Appearance model of one imaging domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainSpec {
    pub shape_family: ShapeFamily,
    pub intensity: IntensityProfile,
    pub texture: Texture,
}

impl DomainSpec {
    /// Training domain: bright smooth blobs on a dark background.
    pub fn domain_a() -> Self {
        Self {
            shape_family: ShapeFamily::EllipseBlob,
            intensity: IntensityProfile {
                fg_mean: 0.75,
                bg_mean: 0.25,
                noise_sigma: 0.03,
            },
            texture: Texture::Smooth,
        }
    }

    /// Unseen domain: same anatomy, brighter background, lower contrast,
    /// speckle and heavier noise.
    pub fn domain_b() -> Self {
        Self {
            shape_family: ShapeFamily::EllipseBlob,
            intensity: IntensityProfile {
                fg_mean: 0.70,
                bg_mean: 0.45,
                noise_sigma: 0.06,
            },
            texture: Texture::Speckled,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.intensity;
        if p.fg_mean == p.bg_mean {
            return Err(param("fg_mean must differ from bg_mean"));
        }
        if !(p.noise_sigma >= 0.0) {
            return Err(param("noise_sigma must be >= 0"));
        }
        for (name, v) in [("fg_mean", p.fg_mean), ("bg_mean", p.bg_mean)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(param(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// One grayscale image with its binary mask, both `[1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: Tensor,
    pub mask: Tensor,
    pub domain: DomainId,
    pub seed: u64,
}

impl SegSample {
    pub fn size(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[1], s[2])
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.mask.mean()
    }
}

const MIN_FG: f64 = 0.05;
const MAX_FG: f64 = 0.60;

/// Renders one sample. Output is a pure function of `(seed, spec, size)`.
pub fn render_sample(seed: u64, spec: &DomainSpec, size: usize, domain: DomainId) -> Result<SegSample> {
    if size < 32 || size % 2 != 0 {
        return Err(param(format!("size must be even and >= 32, got {size}")));
    }
    spec.validate()?;
    let mut rng = rng_from(seed);
    let mut mask = vec![0.0; size * size];
    for _ in 0..64 {
        match spec.shape_family {
            ShapeFamily::EllipseBlob => draw_blob(&mut rng, size, &mut mask),
            ShapeFamily::RibbonCurve => draw_ribbon(&mut rng, size, &mut mask),
        }
        let frac = mask.iter().sum::<f64>() / mask.len() as f64;
        if (MIN_FG..=MAX_FG).contains(&frac) {
            break;
        }
    }
    let frac = mask.iter().sum::<f64>() / mask.len() as f64;
    if !(MIN_FG..=MAX_FG).contains(&frac) {
        return Err(param("could not render a shape with a valid foreground fraction"));
    }

    let p = &spec.intensity;
    let mut img: Vec<f64> = mask
        .iter()
        .map(|&m| p.bg_mean + (p.fg_mean - p.bg_mean) * m)
        .collect();
    apply_texture(&mut rng, spec.texture, size, &mut img);
    for v in img.iter_mut() {
        *v = (*v + p.noise_sigma * normal(&mut rng)).clamp(0.0, 1.0);
    }
    Ok(SegSample {
        image: Tensor::new(&[1, size, size], img)?,
        mask: Tensor::new(&[1, size, size], mask)?,
        domain,
        seed,
    })
}

fn draw_blob(rng: &mut SeededRng, size: usize, mask: &mut [f64]) {
    let s = size as f64;
    let cx = rng.gen_range(0.3..0.7) * s;
    let cy = rng.gen_range(0.3..0.7) * s;
    let a = rng.gen_range(0.14..0.32) * s;
    let b = rng.gen_range(0.14..0.32) * s;
    let theta = rng.gen_range(0.0..core::f64::consts::PI);
    let lobes = rng.gen_range(2..5) as f64;
    let amp = rng.gen_range(0.0..0.15);
    let phase = rng.gen_range(0.0..core::f64::consts::TAU);
    let (st, ct) = (math::sin(theta), math::cos(theta));
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            let u = (ct * dx + st * dy) / a;
            let v = (-st * dx + ct * dy) / b;
            let rho = math::sqrt(u * u + v * v);
            let phi = libm::atan2(v, u);
            let edge = 1.0 + amp * math::sin(lobes * phi + phase);
            mask[y * size + x] = if rho <= edge { 1.0 } else { 0.0 };
        }
    }
}

fn draw_ribbon(rng: &mut SeededRng, size: usize, mask: &mut [f64]) {
    let s = size as f64;
    let center = rng.gen_range(0.35..0.65) * s;
    let amp = rng.gen_range(0.1..0.25) * s;
    let freq = rng.gen_range(0.5..1.5);
    let phase = rng.gen_range(0.0..core::f64::consts::TAU);
    let half = rng.gen_range(0.05..0.1) * s;
    let vertical = rng.gen_bool(0.5);
    for y in 0..size {
        for x in 0..size {
            let (along, across) = if vertical { (y, x) } else { (x, y) };
            let c = center + amp * math::sin(core::f64::consts::TAU * freq * (along as f64 + 0.5) / s + phase);
            mask[y * size + x] = if (across as f64 + 0.5 - c).abs() <= half { 1.0 } else { 0.0 };
        }
    }
}

fn apply_texture(rng: &mut SeededRng, texture: Texture, size: usize, img: &mut [f64]) {
    let s = size as f64;
    let alpha = rng.gen_range(0.0..core::f64::consts::TAU);
    let (ca, sa) = (math::cos(alpha), math::sin(alpha));
    match texture {
        Texture::Smooth => {
            let strength = rng.gen_range(0.0..0.1);
            for y in 0..size {
                for x in 0..size {
                    let t = (x as f64 / s - 0.5) * ca + (y as f64 / s - 0.5) * sa;
                    img[y * size + x] += strength * t;
                }
            }
        }
        Texture::Striped => {
            let period = rng.gen_range(6.0..12.0);
            for y in 0..size {
                for x in 0..size {
                    let t = (x as f64 * ca + y as f64 * sa) / period;
                    img[y * size + x] += 0.08 * math::sin(core::f64::consts::TAU * t);
                }
            }
        }
        Texture::Speckled => {
            for v in img.iter_mut() {
                *v *= 1.0 + 0.25 * normal(rng);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SplitName {
    TrainA,
    TestA,
    TestB,
}

impl SplitName {
    pub fn as_str(&self) -> &'static str {
        match self {
            SplitName::TrainA => "train_A",
            SplitName::TestA => "test_A",
            SplitName::TestB => "test_B",
        }
    }

    fn index_base(&self) -> u64 {
        match self {
            SplitName::TrainA => 0,
            SplitName::TestA => 1 << 30,
            SplitName::TestB => 1 << 31,
        }
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitName {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train_A" => Ok(SplitName::TrainA),
            "test_A" => Ok(SplitName::TestA),
            "test_B" => Ok(SplitName::TestB),
            other => Err(param(format!("unknown split `{other}`"))),
        }
    }
}

/// A named list of samples that counts every read, so tests can assert
/// which phases touched which split.
#[derive(Debug)]
pub struct Split {
    name: SplitName,
    samples: Vec<SegSample>,
    reads: Cell<usize>,
}

impl Split {
    pub fn new(name: SplitName, samples: Vec<SegSample>) -> Self {
        Self {
            name,
            samples,
            reads: Cell::new(0),
        }
    }

    pub fn name(&self) -> SplitName {
        self.name
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, i: usize) -> &SegSample {
        self.reads.set(self.reads.get() + 1);
        &self.samples[i]
    }

    /// Number of sample reads since construction.
    pub fn reads(&self) -> usize {
        self.reads.get()
    }

    /// Access without touching the read counter (export, bookkeeping).
    pub fn samples_untracked(&self) -> &[SegSample] {
        &self.samples
    }
}

impl Clone for Split {
    fn clone(&self) -> Self {
        Self::new(self.name, self.samples.clone())
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train_a: Split,
    pub test_a: Split,
    pub test_b: Split,
}

impl Dataset {
    pub fn split(&self, name: SplitName) -> &Split {
        match name {
            SplitName::TrainA => &self.train_a,
            SplitName::TestA => &self.test_a,
            SplitName::TestB => &self.test_b,
        }
    }
}

/// Generator settings shared by all splits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub domain_a: DomainSpec,
    pub domain_b: DomainSpec,
    pub size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            domain_a: DomainSpec::domain_a(),
            domain_b: DomainSpec::domain_b(),
            size: 128,
        }
    }
}

/// Seed of sample `index` of `split`. Splits occupy disjoint index ranges,
/// so within a domain seed no two splits share a sample seed.
pub fn sample_seed(domain_seed: u64, split: SplitName, index: usize) -> u64 {
    (domain_seed << 32) | (split.index_base() + index as u64)
}

/// Builds `train_A` and `test_A` from domain A and `test_B` from domain B.
pub fn make_dataset(seed_a: u64, seed_b: u64, n_train: usize, n_test: usize, cfg: &SynthConfig) -> Result<Dataset> {
    if n_train == 0 || n_test == 0 {
        return Err(param("n_train and n_test must be >= 1"));
    }
    if n_train > (1 << 30) || n_test > (1 << 30) {
        return Err(param("split too large"));
    }
    let build = |name: SplitName, dseed: u64, spec: &DomainSpec, dom: DomainId, n: usize| -> Result<Split> {
        let samples = (0..n)
            .map(|i| render_sample(sample_seed(dseed, name, i), spec, cfg.size, dom))
            .collect::<Result<Vec<_>>>()?;
        Ok(Split::new(name, samples))
    };
    Ok(Dataset {
        train_a: build(SplitName::TrainA, seed_a, &cfg.domain_a, DomainId::A, n_train)?,
        test_a: build(SplitName::TestA, seed_a, &cfg.domain_a, DomainId::A, n_test)?,
        test_b: build(SplitName::TestB, seed_b, &cfg.domain_b, DomainId::B, n_test)?,
    })
}

/// Absolute difference of mean image intensity between two splits.
pub fn domain_shift(a: &Split, b: &Split) -> f64 {
    let mean = |s: &Split| {
        let v = s.samples_untracked();
        v.iter().map(|x| x.image.mean()).sum::<f64>() / v.len() as f64
    };
    (mean(a) - mean(b)).abs()
}

/// Aligned square crop of image and mask.
pub fn crop_patch(sample: &SegSample, top: usize, left: usize, size: usize) -> Result<SegSample> {
    let (h, w) = sample.size();
    if size == 0 || top + size > h || left + size > w {
        return Err(param(format!(
            "crop window ({top}, {left}, {size}) outside {h}x{w} image"
        )));
    }
    let crop = |t: &Tensor| -> Result<Tensor> {
        let d = t.data();
        let mut out = Vec::with_capacity(size * size);
        for y in top..top + size {
            out.extend_from_slice(&d[y * w + left..y * w + left + size]);
        }
        Tensor::new(&[1, size, size], out)
    };
    Ok(SegSample {
        image: crop(&sample.image)?,
        mask: crop(&sample.mask)?,
        domain: sample.domain,
        seed: sample.seed,
    })
}

/// Image perturbation tactic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Tactic {
    Cutout,
    Sobel,
    GaussNoise,
    GaussBlur,
}

impl Tactic {
    pub const ALL: [Tactic; 4] = [Tactic::Cutout, Tactic::Sobel, Tactic::GaussNoise, Tactic::GaussBlur];

    /// Stable index used for per-tactic seed derivation.
    pub fn index(&self) -> u64 {
        match self {
            Tactic::Cutout => 0,
            Tactic::Sobel => 1,
            Tactic::GaussNoise => 2,
            Tactic::GaussBlur => 3,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Tactic::Cutout => "cutout",
            Tactic::Sobel => "sobel",
            Tactic::GaussNoise => "gauss_noise",
            Tactic::GaussBlur => "gauss_blur",
        }
    }
}

impl fmt::Display for Tactic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Tactic {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        Tactic::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| param(format!("unknown tactic `{s}`")))
    }
}

/// Axis-aligned rectangle in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }
}

pub const CUTOUT_MIN_AREA: f64 = 0.10;
pub const CUTOUT_MAX_AREA: f64 = 0.25;
pub const NOISE_SIGMA_RANGE: (f64, f64) = (0.01, 0.05);
pub const BLUR_SIGMA: f64 = 1.0;

/// The rectangle `cutout` zeroes for an `h × w` image under `seed`.
pub fn cutout_rect(h: usize, w: usize, seed: u64) -> Rect {
    let mut rng = rng_from(seed);
    let total = (h * w) as f64;
    for _ in 0..64 {
        let area = rng.gen_range(CUTOUT_MIN_AREA..CUTOUT_MAX_AREA) * total;
        let aspect = rng.gen_range(0.5..2.0);
        let height = (math::round(math::sqrt(area * aspect)) as usize).clamp(1, h);
        let width = (math::round(area / height as f64) as usize).clamp(1, w);
        let frac = (height * width) as f64 / total;
        if (CUTOUT_MIN_AREA..=CUTOUT_MAX_AREA).contains(&frac) {
            let top = rng.gen_range(0..=h - height);
            let left = rng.gen_range(0..=w - width);
            return Rect { top, left, height, width };
        }
    }
    // Degenerate aspect draws only; fall back to a centred square-ish box.
    let height = (h / 2).max(1);
    let width = ((0.15 * total / height as f64) as usize).clamp(1, w);
    Rect {
        top: (h - height) / 2,
        left: (w - width) / 2,
        height,
        width,
    }
}

/// Applies one tactic to a `[C, H, W]` image with values in `[0, 1]`.
/// Masks are never passed through here.
pub fn augment(image: &Tensor, tactic: Tactic, seed: u64) -> Result<Tensor> {
    let (h, w) = match *image.shape() {
        [_, h, w] => (h, w),
        ref s => return Err(param(format!("augment expects [C, H, W], got {:?}", s))),
    };
    if h < 3 || w < 3 {
        return Err(param("augment needs an image of at least 3x3"));
    }
    if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(param("augment expects values in [0, 1]"));
    }
    let mut out = image.clone();
    let hw = h * w;
    match tactic {
        Tactic::Cutout => {
            let r = cutout_rect(h, w, seed);
            for ch in out.data_mut().chunks_mut(hw) {
                for y in r.top..r.top + r.height {
                    ch[y * w + r.left..y * w + r.left + r.width].fill(0.0);
                }
            }
        }
        Tactic::Sobel => {
            for ch in out.data_mut().chunks_mut(hw) {
                let mag = sobel_magnitude(ch, h, w);
                let max = mag.iter().copied().fold(0.0, f64::max);
                for (o, m) in ch.iter_mut().zip(&mag) {
                    *o = if max > 1e-12 { (m / max).clamp(0.0, 1.0) } else { 0.0 };
                }
            }
        }
        Tactic::GaussNoise => {
            let mut rng = rng_from(seed);
            let sigma = rng.gen_range(NOISE_SIGMA_RANGE.0..=NOISE_SIGMA_RANGE.1);
            for v in out.data_mut() {
                *v = (*v + sigma * normal(&mut rng)).clamp(0.0, 1.0);
            }
        }
        Tactic::GaussBlur => {
            let k = gaussian_kernel5(BLUR_SIGMA);
            for ch in out.data_mut().chunks_mut(hw) {
                let blurred = separable_blur(ch, h, w, &k);
                for (o, b) in ch.iter_mut().zip(blurred) {
                    *o = b.clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(out)
}

/// numpy-style `reflect` padding index.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    i as usize
}

pub fn gaussian_kernel5(sigma: f64) -> [f64; 5] {
    let mut k = [0.0; 5];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - 2.0;
        *v = math::exp(-d * d / (2.0 * sigma * sigma));
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

fn separable_blur(x: &[f64], h: usize, w: usize, k: &[f64; 5]) -> Vec<f64> {
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let mut s = 0.0;
            for (t, kv) in k.iter().enumerate() {
                s += kv * x[y * w + reflect(xx as isize + t as isize - 2, w)];
            }
            tmp[y * w + xx] = s;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let mut s = 0.0;
            for (t, kv) in k.iter().enumerate() {
                s += kv * tmp[reflect(y as isize + t as isize - 2, h) * w + xx];
            }
            out[y * w + xx] = s;
        }
    }
    out
}

fn sobel_magnitude(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |y: isize, xx: isize| x[reflect(y, h) * w + reflect(xx, w)];
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for xx in 0..w as isize {
            let gx = (at(y - 1, xx + 1) + 2.0 * at(y, xx + 1) + at(y + 1, xx + 1))
                - (at(y - 1, xx - 1) + 2.0 * at(y, xx - 1) + at(y + 1, xx - 1));
            let gy = (at(y + 1, xx - 1) + 2.0 * at(y + 1, xx) + at(y + 1, xx + 1))
                - (at(y - 1, xx - 1) + 2.0 * at(y - 1, xx) + at(y - 1, xx + 1));
            out[y as usize * w + xx as usize] = math::sqrt(gx * gx + gy * gy);
        }
    }
    out
}

/// An anchor sample and its perturbed variants.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingBundle {
    pub anchor: SegSample,
    pub augmented: Vec<Tensor>,
    pub tactics: Vec<Tactic>,
}

impl CouplingBundle {
    pub fn k(&self) -> usize {
        self.augmented.len()
    }
}

/// Seed handed to `tactic` inside a bundle built with `seed`; independent
/// of the tactic's position in the list.
pub fn tactic_seed(seed: u64, tactic: Tactic) -> u64 {
    derive(seed, tactic.index())
}

pub fn make_coupling_bundle(sample: &SegSample, tactics: &[Tactic], seed: u64) -> Result<CouplingBundle> {
    if tactics.len() < 2 {
        return Err(param(format!("a coupling bundle needs at least 2 tactics, got {}", tactics.len())));
    }
    for (i, t) in tactics.iter().enumerate() {
        if tactics[..i].contains(t) {
            return Err(param(format!("duplicate tactic `{t}`")));
        }
    }
    let augmented = tactics
        .iter()
        .map(|&t| augment(&sample.image, t, tactic_seed(seed, t)))
        .collect::<Result<Vec<_>>>()?;
    Ok(CouplingBundle {
        anchor: sample.clone(),
        augmented,
        tactics: tactics.to_vec(),
    })
}

/// Parses a comma separated tactic list such as `cutout,sobel`.
pub fn parse_tactics(s: &str) -> Result<Vec<Tactic>> {
    s.split(',')
        .map(|p| p.trim())
        .filter(|p| !p.is_empty())
        .map(Tactic::from_str)
        .collect()
}

pub fn tactics_to_string(ts: &[Tactic]) -> String {
    let mut s = String::new();
    for (i, t) in ts.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        s.push_str(t.as_str());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn a128(seed: u64) -> SegSample {
        render_sample(seed, &DomainSpec::domain_a(), 128, DomainId::A).unwrap()
    }

    #[test]
    fn render_is_deterministic() {
        assert_eq!(a128(7), a128(7));
    }

    #[test]
    fn different_seeds_give_different_masks() {
        let (a, b) = (a128(7), a128(8));
        let differing = a.mask.data().iter().zip(b.mask.data()).filter(|(x, y)| x != y).count();
        assert!(differing >= 1);
    }

    #[test]
    fn ranges_hold_for_both_families() {
        let mut ribbon = DomainSpec::domain_b();
        ribbon.shape_family = ShapeFamily::RibbonCurve;
        ribbon.texture = Texture::Striped;
        for spec in [DomainSpec::domain_a(), DomainSpec::domain_b(), ribbon] {
            for seed in 0..20 {
                let s = render_sample(seed, &spec, 64, DomainId::B).unwrap();
                assert!(s.mask.data().iter().all(|&m| m == 0.0 || m == 1.0));
                assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
                let f = s.foreground_fraction();
                assert!((MIN_FG..=MAX_FG).contains(&f), "{f}");
            }
        }
    }

    #[test]
    fn invalid_size_is_rejected() {
        let spec = DomainSpec::domain_a();
        assert!(render_sample(1, &spec, 30, DomainId::A).is_err());
        assert!(render_sample(1, &spec, 33, DomainId::A).is_err());
        let mut bad = spec;
        bad.intensity.bg_mean = bad.intensity.fg_mean;
        assert!(render_sample(1, &bad, 32, DomainId::A).is_err());
    }

    #[test]
    fn dataset_cardinality_tags_and_disjoint_seeds() {
        let cfg = SynthConfig { size: 32, ..Default::default() };
        let d = make_dataset(1, 2, 64, 16, &cfg).unwrap();
        assert_eq!((d.train_a.len(), d.test_a.len(), d.test_b.len()), (64, 16, 16));
        assert!(d.train_a.samples_untracked().iter().all(|s| s.domain == DomainId::A));
        assert!(d.test_a.samples_untracked().iter().all(|s| s.domain == DomainId::A));
        assert!(d.test_b.samples_untracked().iter().all(|s| s.domain == DomainId::B));
        for t in d.test_a.samples_untracked() {
            assert!(d.train_a.samples_untracked().iter().all(|s| s.seed != t.seed));
        }
        assert!(make_dataset(1, 2, 0, 1, &cfg).is_err());
    }

    #[test]
    fn default_domains_are_measurably_shifted() {
        let cfg = SynthConfig { size: 32, ..Default::default() };
        let d = make_dataset(3, 4, 4, 32, &cfg).unwrap();
        assert!(domain_shift(&d.test_a, &d.test_b) > 0.05);
    }

    #[test]
    fn split_counts_reads() {
        let cfg = SynthConfig { size: 32, ..Default::default() };
        let d = make_dataset(1, 2, 3, 2, &cfg).unwrap();
        let _ = d.train_a.get(0);
        let _ = d.train_a.get(2);
        assert_eq!(d.train_a.reads(), 2);
        assert_eq!(d.test_b.reads(), 0);
    }

    #[test]
    fn crop_identity_shape_and_elementwise() {
        let s = a128(3);
        assert_eq!(crop_patch(&s, 0, 0, 128).unwrap(), s);
        let c = crop_patch(&s, 0, 0, 64).unwrap();
        assert_eq!(c.image.shape(), &[1, 64, 64]);
        let c = crop_patch(&s, 10, 20, 50).unwrap();
        for y in 0..50 {
            for x in 0..50 {
                assert_eq!(c.mask.data()[y * 50 + x], s.mask.data()[(y + 10) * 128 + x + 20]);
                assert_eq!(c.image.data()[y * 50 + x], s.image.data()[(y + 10) * 128 + x + 20]);
            }
        }
        assert_eq!(c.domain, s.domain);
        assert!(crop_patch(&s, 100, 0, 64).is_err());
    }

    #[test]
    fn blur_preserves_constants_and_sobel_zeroes_them() {
        let img = Tensor::full(&[1, 32, 32], 0.37);
        let b = augment(&img, Tactic::GaussBlur, 1).unwrap();
        assert!(b.data().iter().all(|v| (v - 0.37).abs() < 1e-6));
        let s = augment(&img, Tactic::Sobel, 1).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cutout_zeroes_exactly_one_rectangle() {
        let s = a128(5);
        for seed in 0..10 {
            let out = augment(&s.image, Tactic::Cutout, seed).unwrap();
            let r = cutout_rect(128, 128, seed);
            let frac = r.area() as f64 / (128.0 * 128.0);
            assert!((CUTOUT_MIN_AREA..=CUTOUT_MAX_AREA).contains(&frac));
            let mut bbox = (usize::MAX, usize::MAX, 0, 0);
            for y in 0..128 {
                for x in 0..128 {
                    let (o, i) = (out.data()[y * 128 + x], s.image.data()[y * 128 + x]);
                    if r.contains(y, x) {
                        assert_eq!(o, 0.0);
                    } else {
                        assert_eq!(o, i);
                    }
                    if o != i {
                        bbox = (bbox.0.min(y), bbox.1.min(x), bbox.2.max(y), bbox.3.max(x));
                    }
                }
            }
            assert!(r.contains(bbox.0, bbox.1) && r.contains(bbox.2, bbox.3));
        }
    }

    #[test]
    fn noise_stays_in_range_and_unknown_tactic_errors() {
        let s = a128(9);
        let n = augment(&s.image, Tactic::GaussNoise, 4).unwrap();
        assert!(n.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_ne!(n, s.image);
        assert!("mixup".parse::<Tactic>().is_err());
        assert_eq!("gauss_blur".parse::<Tactic>().unwrap(), Tactic::GaussBlur);
    }

    #[test]
    fn bundle_contract() {
        let s = a128(2);
        let b = make_coupling_bundle(&s, &Tactic::ALL, 42).unwrap();
        assert_eq!(b.k(), 4);
        assert_eq!(b.anchor.image, s.image);
        assert_eq!(b, make_coupling_bundle(&s, &Tactic::ALL, 42).unwrap());
        assert!(make_coupling_bundle(&s, &[Tactic::Sobel, Tactic::Sobel], 1).is_err());
        // tactic order does not change another tactic's randomness
        let r = make_coupling_bundle(&s, &[Tactic::GaussBlur, Tactic::GaussNoise, Tactic::Sobel, Tactic::Cutout], 42).unwrap();
        assert_eq!(r.augmented[1], b.augmented[2]);
        assert_eq!(r.augmented[3], b.augmented[0]);
    }
}
