//! Two-stage image augmentation.
//!
//! Stage one (`weak_augment`) is random-resized-crop plus horizontal flip;
//! stage two (`aggressive_augment`) applies color jitter, grayscale and
//! Gaussian blur on top of a stage-one output. [`make_views`] produces the
//! four views of a batch — two weak views and the two aggressive views
//! derived from them — with one deterministic random stream per
//! (step seed, sample, branch), so every view is reproducible in isolation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Elem, Tensor};

/// RGB image, values in [0,1], channel-interleaved row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<Elem>,
}

pub const CHANNELS: usize = 3;

impl Image {
    pub fn new(height: usize, width: usize) -> Image {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        Image { height, width, data: vec![0.0; height * width * CHANNELS] }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<Elem>) -> Image {
        assert_eq!(data.len(), height * width * CHANNELS);
        Image { height, width, data }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> Elem {
        self.data[(y * self.width + x) * CHANNELS + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: Elem) {
        self.data[(y * self.width + x) * CHANNELS + c] = v;
    }

    /// Sum of all pixel values, used by mass-conservation checks.
    pub fn total(&self) -> Elem {
        self.data.iter().sum()
    }
}

fn clamp01(v: Elem) -> Elem {
    v.clamp(0.0, 1.0)
}

/// Per-primitive parameters and application probabilities.
#[derive(Debug, Clone)]
pub struct AugSpec {
    pub crop_scale: (Elem, Elem),
    pub crop_size: usize,
    pub flip_p: Elem,
    /// brightness, contrast, saturation, hue strengths
    pub jitter_strength: (Elem, Elem, Elem, Elem),
    pub jitter_p: Elem,
    pub grayscale_p: Elem,
    pub blur_sigma: (Elem, Elem),
    pub blur_p: Elem,
}

impl Default for AugSpec {
    /// The usual contrastive-pretraining recipe at 32x32.
    fn default() -> AugSpec {
        AugSpec {
            crop_scale: (0.2, 1.0),
            crop_size: 32,
            flip_p: 0.5,
            jitter_strength: (0.4, 0.4, 0.4, 0.1),
            jitter_p: 0.8,
            grayscale_p: 0.2,
            blur_sigma: (0.1, 2.0),
            blur_p: 0.5,
        }
    }
}

impl AugSpec {
    /// All-off stage-two: aggressive_augment becomes the identity.
    pub fn with_aggressive_disabled(mut self) -> AugSpec {
        self.jitter_p = 0.0;
        self.grayscale_p = 0.0;
        self.blur_p = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("flip_p", self.flip_p),
            ("jitter_p", self.jitter_p),
            ("grayscale_p", self.grayscale_p),
            ("blur_p", self.blur_p),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0,1], got {p}")));
            }
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "crop_scale must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"
            )));
        }
        if self.crop_size == 0 {
            return Err(Error::Config("crop_size must be positive".into()));
        }
        let (slo, shi) = self.blur_sigma;
        if !(slo > 0.0 && slo <= shi) {
            return Err(Error::Config(format!(
                "blur_sigma must satisfy 0 < lo <= hi, got ({slo}, {shi})"
            )));
        }
        let (b, c, s, h) = self.jitter_strength;
        if b < 0.0 || c < 0.0 || s < 0.0 || !(0.0..=0.5).contains(&h) {
            return Err(Error::Config(format!(
                "jitter strengths must be non-negative (hue in [0,0.5]), got ({b}, {c}, {s}, {h})"
            )));
        }
        Ok(())
    }
}

// ── Deterministic pixel kernels ─────────────────────────────────────────

pub fn hflip(img: &Image) -> Image {
    let mut out = Image::new(img.height, img.width);
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..CHANNELS {
                out.set(y, x, c, img.get(y, img.width - 1 - x, c));
            }
        }
    }
    out
}

fn luminance(r: Elem, g: Elem, b: Elem) -> Elem {
    // Equal channels are already gray; keep them bit-stable.
    if r == g && g == b {
        r
    } else {
        0.299 * r + 0.587 * g + 0.114 * b
    }
}

pub fn grayscale(img: &Image) -> Image {
    let mut out = Image::new(img.height, img.width);
    for y in 0..img.height {
        for x in 0..img.width {
            let l = luminance(img.get(y, x, 0), img.get(y, x, 1), img.get(y, x, 2));
            for c in 0..CHANNELS {
                out.set(y, x, c, clamp01(l));
            }
        }
    }
    out
}

fn brightness(img: &Image, factor: Elem) -> Image {
    let mut out = img.clone();
    for v in &mut out.data {
        *v = clamp01(*v * factor);
    }
    out
}

fn contrast(img: &Image, factor: Elem) -> Image {
    let mut mean = 0.0;
    for y in 0..img.height {
        for x in 0..img.width {
            mean += luminance(img.get(y, x, 0), img.get(y, x, 1), img.get(y, x, 2));
        }
    }
    mean /= (img.height * img.width) as Elem;
    let mut out = img.clone();
    for v in &mut out.data {
        *v = clamp01((*v - mean) * factor + mean);
    }
    out
}

fn saturation(img: &Image, factor: Elem) -> Image {
    let mut out = Image::new(img.height, img.width);
    for y in 0..img.height {
        for x in 0..img.width {
            let l = luminance(img.get(y, x, 0), img.get(y, x, 1), img.get(y, x, 2));
            for c in 0..CHANNELS {
                out.set(y, x, c, clamp01((img.get(y, x, c) - l) * factor + l));
            }
        }
    }
    out
}

/// RGB in [0,1] to (hue, saturation, value), hue in [0,1).
pub fn rgb_to_hsv(r: Elem, g: Elem, b: Elem) -> (Elem, Elem, Elem) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    (hue, sat, max)
}

/// Inverse of [`rgb_to_hsv`].
pub fn hsv_to_rgb(h: Elem, s: Elem, v: Elem) -> (Elem, Elem, Elem) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let sector = (h6.floor() as usize).min(5);
    let f = h6 - sector as Elem;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn hue_shift(img: &Image, delta: Elem) -> Image {
    let mut out = Image::new(img.height, img.width);
    for y in 0..img.height {
        for x in 0..img.width {
            let (h, s, v) =
                rgb_to_hsv(img.get(y, x, 0), img.get(y, x, 1), img.get(y, x, 2));
            let (r, g, b) = hsv_to_rgb(h + delta, s, v);
            out.set(y, x, 0, clamp01(r));
            out.set(y, x, 1, clamp01(g));
            out.set(y, x, 2, clamp01(b));
        }
    }
    out
}

/// Truncated, normalized 1-d Gaussian; kernel size 2*ceil(2*sigma)+1.
fn gaussian_kernel(sigma: Elem) -> Vec<Elem> {
    let radius = (2.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        let x = i as Elem;
        kernel.push((-x * x / (2.0 * sigma * sigma)).exp());
    }
    let total: Elem = kernel.iter().sum();
    for k in &mut kernel {
        *k /= total;
    }
    kernel
}

fn reflect(i: isize, n: isize) -> usize {
    // Reflect without repeating the edge sample: -1 -> 1, n -> n-2.
    if n == 1 {
        return 0;
    }
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

pub fn gaussian_blur(img: &Image, sigma: Elem) -> Image {
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (h, w) = (img.height as isize, img.width as isize);
    // Horizontal then vertical pass, reflect padding.
    let mut mid = Image::new(img.height, img.width);
    for y in 0..img.height {
        for x in 0..w {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sx = reflect(x + ki as isize - radius, w);
                    acc += kv * img.get(y, sx, c);
                }
                mid.set(y, x as usize, c, acc);
            }
        }
    }
    let mut out = Image::new(img.height, img.width);
    for y in 0..h {
        for x in 0..img.width {
            for c in 0..CHANNELS {
                let mut acc = 0.0;
                for (ki, kv) in kernel.iter().enumerate() {
                    let sy = reflect(y + ki as isize - radius, h);
                    acc += kv * mid.get(sy, x, c);
                }
                out.set(y as usize, x, c, clamp01(acc));
            }
        }
    }
    out
}

/// Bilinear resample of the window (top, left, ch, cw) to `out_size`.
fn resize_crop(img: &Image, top: usize, left: usize, ch: usize, cw: usize, out_size: usize) -> Image {
    let mut out = Image::new(out_size, out_size);
    let sy = ch as Elem / out_size as Elem;
    let sx = cw as Elem / out_size as Elem;
    for y in 0..out_size {
        // Align sample centers with source pixel centers.
        let fy = ((y as Elem + 0.5) * sy - 0.5).max(0.0);
        let y0 = (fy.floor() as usize).min(ch - 1);
        let y1 = (y0 + 1).min(ch - 1);
        let wy = fy - y0 as Elem;
        for x in 0..out_size {
            let fx = ((x as Elem + 0.5) * sx - 0.5).max(0.0);
            let x0 = (fx.floor() as usize).min(cw - 1);
            let x1 = (x0 + 1).min(cw - 1);
            let wx = fx - x0 as Elem;
            for c in 0..CHANNELS {
                let p00 = img.get(top + y0, left + x0, c);
                let p01 = img.get(top + y0, left + x1, c);
                let p10 = img.get(top + y1, left + x0, c);
                let p11 = img.get(top + y1, left + x1, c);
                let v = p00 * (1.0 - wy) * (1.0 - wx)
                    + p01 * (1.0 - wy) * wx
                    + p10 * wy * (1.0 - wx)
                    + p11 * wy * wx;
                out.set(y, x, c, clamp01(v));
            }
        }
    }
    out
}

fn random_resized_crop(img: &Image, rng: &mut ChaCha8Rng, spec: &AugSpec) -> Image {
    let (h, w) = (img.height, img.width);
    let area = (h * w) as Elem;
    let (lo, hi) = spec.crop_scale;
    let log_ratio = ((3.0 as Elem / 4.0).ln(), (4.0 as Elem / 3.0).ln());
    for _ in 0..10 {
        let target = area * (lo + (hi - lo) * rng.gen::<f64>() as Elem);
        let aspect = (log_ratio.0 + (log_ratio.1 - log_ratio.0) * rng.gen::<f64>() as Elem).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.gen_range(0..=h - ch);
            let left = rng.gen_range(0..=w - cw);
            return resize_crop(img, top, left, ch, cw, spec.crop_size);
        }
    }
    // Degenerate draws: fall back to a centered square crop.
    let side = h.min(w);
    resize_crop(img, (h - side) / 2, (w - side) / 2, side, side, spec.crop_size)
}

fn color_jitter(img: &Image, rng: &mut ChaCha8Rng, spec: &AugSpec) -> Image {
    let (bs, cs, ss, hs) = spec.jitter_strength;
    // Random application order, then one factor draw per primitive.
    let mut order = [0usize, 1, 2, 3];
    for i in (1..4).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let b_factor = (1.0 - bs).max(0.0) + ((1.0 + bs) - (1.0 - bs).max(0.0)) * rng.gen::<f64>() as Elem;
    let c_factor = (1.0 - cs).max(0.0) + ((1.0 + cs) - (1.0 - cs).max(0.0)) * rng.gen::<f64>() as Elem;
    let s_factor = (1.0 - ss).max(0.0) + ((1.0 + ss) - (1.0 - ss).max(0.0)) * rng.gen::<f64>() as Elem;
    let h_delta = -hs + 2.0 * hs * rng.gen::<f64>() as Elem;
    let mut out = img.clone();
    for op in order {
        out = match op {
            0 => brightness(&out, b_factor),
            1 => contrast(&out, c_factor),
            2 => saturation(&out, s_factor),
            _ => hue_shift(&out, h_delta),
        };
    }
    out
}

/// The five augmentation primitives, name-addressable for previews/tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    RandomResizedCrop,
    HFlip,
    ColorJitter,
    Grayscale,
    GaussianBlur,
}

/// Apply one primitive, consuming its probability and parameter draws from
/// `rng`. The draw order per primitive is fixed: probability first, then
/// parameters.
pub fn apply_primitive(
    primitive: Primitive,
    img: &Image,
    rng: &mut ChaCha8Rng,
    spec: &AugSpec,
) -> Image {
    match primitive {
        Primitive::RandomResizedCrop => random_resized_crop(img, rng, spec),
        Primitive::HFlip => {
            if (rng.gen::<f64>() as Elem) < spec.flip_p {
                hflip(img)
            } else {
                img.clone()
            }
        }
        Primitive::ColorJitter => {
            if (rng.gen::<f64>() as Elem) < spec.jitter_p {
                color_jitter(img, rng, spec)
            } else {
                img.clone()
            }
        }
        Primitive::Grayscale => {
            if (rng.gen::<f64>() as Elem) < spec.grayscale_p {
                grayscale(img)
            } else {
                img.clone()
            }
        }
        Primitive::GaussianBlur => {
            if (rng.gen::<f64>() as Elem) < spec.blur_p {
                let (lo, hi) = spec.blur_sigma;
                let sigma = lo + (hi - lo) * rng.gen::<f64>() as Elem;
                gaussian_blur(img, sigma)
            } else {
                img.clone()
            }
        }
    }
}

/// Stage one: random-resized-crop then horizontal flip.
pub fn weak_augment(img: &Image, rng: &mut ChaCha8Rng, spec: &AugSpec) -> Image {
    let cropped = apply_primitive(Primitive::RandomResizedCrop, img, rng, spec);
    apply_primitive(Primitive::HFlip, &cropped, rng, spec)
}

/// Stage two on a stage-one output: color jitter, grayscale, blur, in that
/// fixed order. Never crops or flips.
pub fn aggressive_augment(img: &Image, rng: &mut ChaCha8Rng, spec: &AugSpec) -> Image {
    let jittered = apply_primitive(Primitive::ColorJitter, img, rng, spec);
    let grayed = apply_primitive(Primitive::Grayscale, &jittered, rng, spec);
    apply_primitive(Primitive::GaussianBlur, &grayed, rng, spec)
}

/// Derived stream seeds for one sample's four views.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewSeeds {
    pub weak: u64,
    pub weak_prime: u64,
    pub aggressive: u64,
    pub aggressive_prime: u64,
}

impl ViewSeeds {
    pub fn derive(step_seed: u64, sample: usize) -> ViewSeeds {
        let s = |branch: u64| rng::derive_seed(step_seed, "view", &[sample as u64, branch]);
        ViewSeeds { weak: s(0), weak_prime: s(1), aggressive: s(2), aggressive_prime: s(3) }
    }
}

/// The four augmented views of a batch plus the seeds that produced them.
#[derive(Debug, Clone)]
pub struct ViewBatch {
    pub v_w: Vec<Image>,
    pub v_w_prime: Vec<Image>,
    pub v_a: Vec<Image>,
    pub v_a_prime: Vec<Image>,
    pub seeds: Vec<ViewSeeds>,
}

/// Build the four views of every image: the weak views from the sources,
/// then each aggressive view from its weak intermediate. Stage-two streams
/// are disjoint from stage-one streams, so the weak views do not depend on
/// aggressive settings.
pub fn make_views(images: &[Image], step_seed: u64, spec: &AugSpec) -> Result<ViewBatch> {
    if images.is_empty() {
        return Err(Error::Config("make_views: empty batch".into()));
    }
    spec.validate()?;
    let mut batch = ViewBatch {
        v_w: Vec::with_capacity(images.len()),
        v_w_prime: Vec::with_capacity(images.len()),
        v_a: Vec::with_capacity(images.len()),
        v_a_prime: Vec::with_capacity(images.len()),
        seeds: Vec::with_capacity(images.len()),
    };
    for (i, img) in images.iter().enumerate() {
        let seeds = ViewSeeds::derive(step_seed, i);
        let v_w = weak_augment(img, &mut rng::stream(seeds.weak), spec);
        let v_w_prime = weak_augment(img, &mut rng::stream(seeds.weak_prime), spec);
        let v_a = aggressive_augment(&v_w, &mut rng::stream(seeds.aggressive), spec);
        let v_a_prime =
            aggressive_augment(&v_w_prime, &mut rng::stream(seeds.aggressive_prime), spec);
        batch.v_w.push(v_w);
        batch.v_w_prime.push(v_w_prime);
        batch.v_a.push(v_a);
        batch.v_a_prime.push(v_a_prime);
        batch.seeds.push(seeds);
    }
    Ok(batch)
}

/// Pack images into a [B, 3, H, W] tensor (planar layout for the nets).
pub fn batch_to_tensor(images: &[Image]) -> Tensor {
    assert!(!images.is_empty());
    let (h, w) = (images[0].height, images[0].width);
    let mut data = vec![0.0; images.len() * CHANNELS * h * w];
    for (b, img) in images.iter().enumerate() {
        assert_eq!((img.height, img.width), (h, w), "mixed image sizes in batch");
        for y in 0..h {
            for x in 0..w {
                for c in 0..CHANNELS {
                    data[((b * CHANNELS + c) * h + y) * w + x] = img.get(y, x, c);
                }
            }
        }
    }
    Tensor::constant(vec![images.len(), CHANNELS, h, w], data)
}

/// Binary PPM (P6, maxval 255) encoding; bit-stable for a given image.
pub fn ppm_bytes(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|v| (v * 255.0).round() as u8));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(seed: u64) -> Image {
        let mut r = rng::stream(seed);
        let mut img = Image::new(32, 32);
        for v in &mut img.data {
            *v = r.gen::<f64>() as Elem;
        }
        img
    }

    #[test]
    fn hflip_is_an_involution() {
        let img = test_image(1);
        assert_eq!(hflip(&hflip(&img)), img);
    }

    #[test]
    fn grayscale_is_idempotent() {
        let img = test_image(2);
        let once = grayscale(&img);
        assert_eq!(grayscale(&once), once);
    }

    #[test]
    fn grayscale_equalizes_channels() {
        let img = test_image(3);
        let gray = grayscale(&img);
        for y in 0..gray.height {
            for x in 0..gray.width {
                assert_eq!(gray.get(y, x, 0), gray.get(y, x, 1));
                assert_eq!(gray.get(y, x, 1), gray.get(y, x, 2));
            }
        }
    }

    #[test]
    fn blur_preserves_constant_images() {
        let mut img = Image::new(16, 16);
        for v in &mut img.data {
            *v = 0.37;
        }
        let blurred = gaussian_blur(&img, 1.3);
        for v in &blurred.data {
            assert!((v - 0.37).abs() < 1e-12);
        }
    }

    #[test]
    fn blur_conserves_impulse_mass() {
        let mut img = Image::new(17, 17);
        img.set(8, 8, 0, 1.0);
        img.set(8, 8, 1, 1.0);
        img.set(8, 8, 2, 1.0);
        let blurred = gaussian_blur(&img, 0.1);
        assert!((blurred.total() - img.total()).abs() < 1e-6);
    }

    #[test]
    fn blur_kernel_is_normalized() {
        for sigma in [0.1, 0.5, 1.0, 2.0] {
            let kernel = gaussian_kernel(sigma);
            assert_eq!(kernel.len() % 2, 1);
            let mass: Elem = kernel.iter().sum();
            assert!((mass - 1.0).abs() < 1e-12, "sigma {sigma}: mass {mass}");
        }
    }

    #[test]
    fn weak_augment_degenerate_params_is_identity_resize() {
        let img = test_image(4);
        let spec = AugSpec {
            crop_scale: (1.0, 1.0),
            flip_p: 0.0,
            ..AugSpec::default()
        };
        // Square input, full-area crop, no flip: identity up to the
        // (here size-preserving) resize.
        let out = weak_augment(&img, &mut rng::stream(9), &spec);
        for (a, b) in out.data.iter().zip(&img.data) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn weak_augment_is_deterministic_and_sized() {
        let img = test_image(5);
        let spec = AugSpec::default();
        let a = weak_augment(&img, &mut rng::stream(77), &spec);
        let b = weak_augment(&img, &mut rng::stream(77), &spec);
        assert_eq!(a, b);
        assert_eq!((a.height, a.width), (32, 32));
    }

    #[test]
    fn aggressive_augment_all_probabilities_zero_is_identity() {
        let img = test_image(6);
        let spec = AugSpec::default().with_aggressive_disabled();
        let out = aggressive_augment(&img, &mut rng::stream(3), &spec);
        assert_eq!(out, img);
    }

    #[test]
    fn forced_grayscale_equalizes_aggressive_output() {
        let img = test_image(7);
        let spec = AugSpec {
            jitter_p: 0.0,
            grayscale_p: 1.0,
            blur_p: 0.0,
            ..AugSpec::default()
        };
        let out = aggressive_augment(&img, &mut rng::stream(4), &spec);
        for y in 0..out.height {
            for x in 0..out.width {
                assert_eq!(out.get(y, x, 0), out.get(y, x, 1));
                assert_eq!(out.get(y, x, 1), out.get(y, x, 2));
            }
        }
    }

    #[test]
    fn make_views_is_bit_reproducible() {
        let images = vec![test_image(8), test_image(9)];
        let spec = AugSpec::default();
        let a = make_views(&images, 1234, &spec).unwrap();
        let b = make_views(&images, 1234, &spec).unwrap();
        assert_eq!(a.v_w, b.v_w);
        assert_eq!(a.v_w_prime, b.v_w_prime);
        assert_eq!(a.v_a, b.v_a);
        assert_eq!(a.v_a_prime, b.v_a_prime);
    }

    #[test]
    fn make_views_with_stage_two_disabled_repeats_weak_views() {
        let images = vec![test_image(10)];
        let spec = AugSpec::default().with_aggressive_disabled();
        let views = make_views(&images, 5, &spec).unwrap();
        assert_eq!(views.v_a, views.v_w);
        assert_eq!(views.v_a_prime, views.v_w_prime);
    }

    #[test]
    fn stage_two_replays_from_recorded_seed() {
        let images = vec![test_image(11), test_image(12)];
        let spec = AugSpec::default();
        let views = make_views(&images, 99, &spec).unwrap();
        for i in 0..images.len() {
            let replay = aggressive_augment(
                &views.v_w[i],
                &mut rng::stream(views.seeds[i].aggressive),
                &spec,
            );
            assert_eq!(replay, views.v_a[i]);
        }
    }

    #[test]
    fn stage_separation_keeps_weak_views_stable() {
        let images = vec![test_image(13)];
        let strong = AugSpec::default();
        let off = AugSpec::default().with_aggressive_disabled();
        let a = make_views(&images, 7, &strong).unwrap();
        let b = make_views(&images, 7, &off).unwrap();
        assert_eq!(a.v_w, b.v_w);
        assert_eq!(a.v_w_prime, b.v_w_prime);
    }

    #[test]
    fn make_views_rejects_empty_batches() {
        assert!(make_views(&[], 0, &AugSpec::default()).is_err());
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let spec = AugSpec {
            jitter_strength: (0.9, 0.9, 0.9, 0.5),
            jitter_p: 1.0,
            blur_p: 1.0,
            grayscale_p: 0.5,
            ..AugSpec::default()
        };
        for seed in 0..20 {
            let img = test_image(100 + seed);
            let views = make_views(std::slice::from_ref(&img), seed, &spec).unwrap();
            for view in [&views.v_w, &views.v_w_prime, &views.v_a, &views.v_a_prime] {
                for v in &view[0].data {
                    assert!((0.0..=1.0).contains(v), "pixel {v} out of range");
                }
            }
        }
    }

    #[test]
    fn ppm_encoding_is_stable() {
        let img = test_image(14);
        assert_eq!(ppm_bytes(&img), ppm_bytes(&img.clone()));
        let bytes = ppm_bytes(&img);
        assert!(bytes.starts_with(b"P6\n32 32\n255\n"));
        assert_eq!(bytes.len(), 13 + 32 * 32 * 3);
    }

    #[test]
    fn batch_to_tensor_is_planar() {
        let mut img = Image::new(2, 2);
        img.set(0, 1, 2, 0.5);
        let t = batch_to_tensor(&[img]);
        assert_eq!(t.shape(), &[1, 3, 2, 2]);
        // channel 2, y 0, x 1
        assert_eq!(t.data()[(2 * 2 + 0) * 2 + 1], 0.5);
    }
}
