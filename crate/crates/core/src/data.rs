//! Dataset ingestion and generation.
//!
//! Two sources: the CIFAR binary record format (10 and 100 class layouts)
//! and a synthetic generator that renders one colored shape per class over
//! a noisy background. The generator exists so the whole pipeline can be
//! exercised hermetically; its classes are separable by mean color alone
//! once the contrast parameter is at or above
//! [`SynthSpec::SEPARABLE_CONTRAST`], while grayscale and strong color
//! jitter genuinely destroy the hue cue.

use std::fs;
use std::path::Path;

use rand::Rng;

use crate::augment::{hsv_to_rgb, Image, CHANNELS};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Elem;

/// Loaded images with labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<u32>,
    pub class_count: u32,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn gather(&self, indices: &[usize]) -> Vec<Image> {
        indices.iter().map(|&i| self.images[i].clone()).collect()
    }
}

const CIFAR_SIDE: usize = 32;
const CIFAR_PIXELS: usize = CIFAR_SIDE * CIFAR_SIDE;
const CIFAR_PIXEL_BYTES: usize = CIFAR_PIXELS * CHANNELS;

/// Load CIFAR-format binary files. `class_count == 100` selects the
/// two-label-byte layout (coarse then fine; the fine label is used); any
/// other count selects the single-label-byte layout.
pub fn load_cifar_binary<P: AsRef<Path>>(paths: &[P], class_count: u32) -> Result<Dataset> {
    let label_bytes = if class_count == 100 { 2 } else { 1 };
    let record = label_bytes + CIFAR_PIXEL_BYTES;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        if bytes.is_empty() || bytes.len() % record != 0 {
            return Err(Error::Format(format!(
                "{}: size {} is not a positive multiple of the record size {record}",
                path.display(),
                bytes.len()
            )));
        }
        for chunk in bytes.chunks_exact(record) {
            let label = chunk[label_bytes - 1] as u32;
            if label >= class_count {
                return Err(Error::Format(format!(
                    "{}: label {label} out of range for {class_count} classes",
                    path.display()
                )));
            }
            let planes = &chunk[label_bytes..];
            let mut img = Image::new(CIFAR_SIDE, CIFAR_SIDE);
            for c in 0..CHANNELS {
                for p in 0..CIFAR_PIXELS {
                    img.data[p * CHANNELS + c] = planes[c * CIFAR_PIXELS + p] as Elem / 255.0;
                }
            }
            images.push(img);
            labels.push(label);
        }
    }
    Ok(Dataset { images, labels, class_count })
}

/// Write a dataset back to the binary layout; inverse of
/// [`load_cifar_binary`] for 32x32 images.
pub fn write_cifar_binary(dataset: &Dataset, path: &Path) -> Result<()> {
    let label_bytes = if dataset.class_count == 100 { 2 } else { 1 };
    let mut out = Vec::with_capacity(dataset.len() * (label_bytes + CIFAR_PIXEL_BYTES));
    for (img, &label) in dataset.images.iter().zip(&dataset.labels) {
        if img.height != CIFAR_SIDE || img.width != CIFAR_SIDE {
            return Err(Error::Format(format!(
                "cannot encode {}x{} image in the 32x32 record layout",
                img.height, img.width
            )));
        }
        if label_bytes == 2 {
            out.push(0); // coarse label, unused
        }
        out.push(label as u8);
        for c in 0..CHANNELS {
            for p in 0..CIFAR_PIXELS {
                out.push((img.data[p * CHANNELS + c] * 255.0).round() as u8);
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Which generative recipe renders the samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthRecipe {
    /// One class shape per image over a lightly textured background.
    Plain,
    /// Adds colored distractor blobs, so global color statistics carry no
    /// class information and features must bind the object itself.
    Cluttered,
}

/// Recipe for the synthetic shape dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub class_count: u32,
    pub per_class: usize,
    pub size: usize,
    pub seed: u64,
    pub recipe: SynthRecipe,
    /// Brightness separation between object color and background; classes
    /// of the `Plain` recipe are linearly separable by mean color alone at
    /// or above [`SynthSpec::SEPARABLE_CONTRAST`].
    pub contrast: Elem,
    /// Amplitude of uniform per-pixel background noise.
    pub bg_noise: Elem,
    /// Saturation of the random background tint; 0 keeps backgrounds gray.
    pub bg_tint: Elem,
}

impl Default for SynthSpec {
    fn default() -> SynthSpec {
        SynthSpec {
            class_count: 4,
            per_class: 500,
            size: 32,
            seed: 7,
            recipe: SynthRecipe::Cluttered,
            contrast: 0.35,
            bg_noise: 0.08,
            bg_tint: 0.9,
        }
    }
}

impl SynthSpec {
    /// Contrast at or above which mean color separates the classes.
    pub const SEPARABLE_CONTRAST: Elem = 0.3;

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Config(format!(
                "synthetic dataset needs at least 2 classes, got {}",
                self.class_count
            )));
        }
        if self.size < 16 {
            return Err(Error::Config(format!(
                "synthetic image size must be at least 16, got {}",
                self.size
            )));
        }
        if self.per_class == 0 {
            return Err(Error::Config("per_class must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.contrast)
            || !(0.0..=0.5).contains(&self.bg_noise)
            || !(0.0..=1.0).contains(&self.bg_tint)
        {
            return Err(Error::Config(
                "contrast/bg_noise/bg_tint outside their documented ranges".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Circle,
    Square,
    Triangle,
    Diamond,
    Cross,
}

const SHAPES: [Shape; 5] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Diamond, Shape::Cross];

impl Shape {
    fn contains(self, dx: Elem, dy: Elem, radius: Elem) -> bool {
        match self {
            Shape::Circle => dx * dx + dy * dy <= radius * radius,
            Shape::Square => dx.abs() <= radius && dy.abs() <= radius,
            Shape::Triangle => {
                // Upward triangle: base at +radius, apex at -radius.
                dy <= radius && dy >= -radius && dx.abs() <= (dy + radius) / 2.0
            }
            Shape::Diamond => dx.abs() + dy.abs() <= radius,
            Shape::Cross => {
                let arm = radius * 0.38;
                (dx.abs() <= arm && dy.abs() <= radius) || (dy.abs() <= arm && dx.abs() <= radius)
            }
        }
    }
}

/// Deterministically render the synthetic dataset: class c gets a fixed
/// (shape, hue) pair, drawn at a random position and scale over a noisy
/// (optionally tinted) background.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let total = spec.class_count as usize * spec.per_class;
    let mut images = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    let size = spec.size;
    for i in 0..total {
        let class = (i % spec.class_count as usize) as u32;
        let mut r = rng::stream(rng::derive_seed(spec.seed, "synth", &[i as u64]));

        // Background: mid-brightness, optional random tint, uniform noise.
        let bg_value = 0.35 + 0.25 * r.gen::<f64>() as Elem;
        let bg_hue = r.gen::<f64>() as Elem;
        let (bg_r, bg_g, bg_b) = hsv_to_rgb(bg_hue, spec.bg_tint, bg_value);

        // Object: class hue with a small wobble, brightness lifted by the
        // contrast parameter.
        let hue_gap = 1.0 / spec.class_count as Elem;
        let hue = class as Elem * hue_gap + hue_gap * 0.3 * (r.gen::<f64>() as Elem - 0.5);
        let obj_value = (bg_value + spec.contrast).min(1.0);
        let (obj_r, obj_g, obj_b) = hsv_to_rgb(hue, 0.85, obj_value);
        let shape = SHAPES[class as usize % SHAPES.len()];

        let cx = size as Elem * (0.5 + 0.3 * (r.gen::<f64>() as Elem - 0.5));
        let cy = size as Elem * (0.5 + 0.3 * (r.gen::<f64>() as Elem - 0.5));
        let radius = size as Elem * (0.14 + 0.10 * r.gen::<f64>() as Elem);

        // Distractor blobs carry random hues at object-like saturation and
        // brightness, so global color statistics are label-independent.
        let mut distractors: Vec<(Elem, Elem, Elem, [Elem; 3])> = Vec::new();
        if spec.recipe == SynthRecipe::Cluttered {
            for _ in 0..4 {
                let dx = size as Elem * r.gen::<f64>() as Elem;
                let dy = size as Elem * r.gen::<f64>() as Elem;
                let dr = size as Elem * (0.07 + 0.06 * r.gen::<f64>() as Elem);
                let hue = r.gen::<f64>() as Elem;
                let (cr, cg, cb) = hsv_to_rgb(hue, 0.85, obj_value);
                distractors.push((dx, dy, dr, [cr, cg, cb]));
            }
        }

        let mut img = Image::new(size, size);
        for y in 0..size {
            for x in 0..size {
                let mut base = [bg_r, bg_g, bg_b];
                for (dx, dy, dr, color) in &distractors {
                    let ddx = x as Elem - dx;
                    let ddy = y as Elem - dy;
                    if ddx * ddx + ddy * ddy <= dr * dr {
                        base = *color;
                    }
                }
                if shape.contains(x as Elem - cx, y as Elem - cy, radius) {
                    base = [obj_r, obj_g, obj_b];
                }
                for c in 0..CHANNELS {
                    let noise = spec.bg_noise * 2.0 * (r.gen::<f64>() as Elem - 0.5);
                    img.set(y, x, c, (base[c] + noise).clamp(0.0, 1.0));
                }
            }
        }
        images.push(img);
        labels.push(class);
    }
    Ok(Dataset { images, labels, class_count: spec.class_count })
}

/// Seeded permutation of `0..len` chunked into batches.
pub fn batches(
    len: usize,
    batch_size: usize,
    epoch_seed: u64,
    drop_last: bool,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if drop_last && batch_size > len {
        return Err(Error::Config(format!(
            "batch_size {batch_size} exceeds dataset size {len} with drop_last"
        )));
    }
    let mut order: Vec<usize> = (0..len).collect();
    let mut r = rng::stream(epoch_seed);
    for i in (1..len).rev() {
        let j = r.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if drop_last {
        out.retain(|b| b.len() == batch_size);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_path(name: &str) -> std::path::PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("msr-data-test-{}-{name}", std::process::id()));
        p
    }

    #[test]
    fn cifar10_record_arithmetic() {
        let path = tmp_path("ten-records.bin");
        let mut bytes = Vec::new();
        for i in 0..10u8 {
            bytes.push(i % 4);
            bytes.extend(std::iter::repeat(i).take(CIFAR_PIXEL_BYTES));
        }
        assert_eq!(bytes.len(), 30730);
        fs::write(&path, &bytes).unwrap();
        let ds = load_cifar_binary(&[&path], 10).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.labels[3], 3);
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn cifar10_rejects_partial_records() {
        let path = tmp_path("partial.bin");
        fs::write(&path, vec![0u8; 3074]).unwrap();
        assert!(matches!(load_cifar_binary(&[&path], 10), Err(Error::Format(_))));
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn cifar10_normalization_endpoints() {
        let path = tmp_path("endpoints.bin");
        let mut bytes = vec![0u8];
        bytes.push(255);
        bytes.extend(vec![0u8; CIFAR_PIXEL_BYTES - 1]);
        fs::write(&path, &bytes).unwrap();
        let ds = load_cifar_binary(&[&path], 10).unwrap();
        // First red-plane byte 255 -> 1.0; everything else 0.0.
        assert_eq!(ds.images[0].get(0, 0, 0), 1.0);
        assert_eq!(ds.images[0].get(0, 0, 1), 0.0);
        assert_eq!(ds.images[0].get(0, 1, 0), 0.0);
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn cifar10_rejects_out_of_range_labels() {
        let path = tmp_path("badlabel.bin");
        let mut bytes = vec![7u8];
        bytes.extend(vec![0u8; CIFAR_PIXEL_BYTES]);
        fs::write(&path, &bytes).unwrap();
        assert!(load_cifar_binary(&[&path], 4).is_err());
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn cifar100_uses_fine_label() {
        let path = tmp_path("c100.bin");
        let mut bytes = vec![3u8, 42u8];
        bytes.extend(vec![128u8; CIFAR_PIXEL_BYTES]);
        fs::write(&path, &bytes).unwrap();
        let ds = load_cifar_binary(&[&path], 100).unwrap();
        assert_eq!(ds.labels[0], 42);
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn binary_round_trip_is_bit_identical() {
        let ds = synth_dataset(&SynthSpec { per_class: 3, ..SynthSpec::default() }).unwrap();
        let path = tmp_path("roundtrip.bin");
        write_cifar_binary(&ds, &path).unwrap();
        let reloaded = load_cifar_binary(&[&path], ds.class_count).unwrap();
        let rewritten = tmp_path("roundtrip2.bin");
        write_cifar_binary(&reloaded, &rewritten).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&rewritten).unwrap());
        assert_eq!(ds.labels, reloaded.labels);
        fs::remove_file(&path).unwrap();
        fs::remove_file(&rewritten).unwrap();
    }

    #[test]
    fn synth_is_balanced_and_deterministic() {
        let spec = SynthSpec { class_count: 4, per_class: 50, ..SynthSpec::default() };
        let a = synth_dataset(&spec).unwrap();
        assert_eq!(a.len(), 200);
        for class in 0..4 {
            assert_eq!(a.labels.iter().filter(|&&l| l == class).count(), 50);
        }
        let b = synth_dataset(&spec).unwrap();
        assert_eq!(a.images, b.images);
    }

    #[test]
    fn synth_seeds_change_pixels() {
        let a = synth_dataset(&SynthSpec { per_class: 2, seed: 1, ..SynthSpec::default() }).unwrap();
        let b = synth_dataset(&SynthSpec { per_class: 2, seed: 2, ..SynthSpec::default() }).unwrap();
        assert_ne!(a.images, b.images);
    }

    #[test]
    fn synth_validates_spec() {
        assert!(synth_dataset(&SynthSpec { class_count: 1, ..SynthSpec::default() }).is_err());
        assert!(synth_dataset(&SynthSpec { size: 8, ..SynthSpec::default() }).is_err());
    }

    #[test]
    fn batches_shape_and_coverage() {
        let b = batches(10, 3, 0, true).unwrap();
        assert_eq!(b.len(), 3);
        let mut seen: Vec<usize> = b.concat();
        assert_eq!(seen.len(), 9);
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
    }

    #[test]
    fn batches_full_epoch_is_a_permutation() {
        let b = batches(10, 3, 5, false).unwrap();
        let mut seen: Vec<usize> = b.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn batches_are_seed_deterministic() {
        assert_eq!(batches(64, 8, 3, true).unwrap(), batches(64, 8, 3, true).unwrap());
        assert_ne!(batches(64, 8, 3, true).unwrap(), batches(64, 8, 4, true).unwrap());
    }

    #[test]
    fn batches_rejects_oversized_batch_with_drop_last() {
        assert!(batches(5, 6, 0, true).is_err());
        assert!(batches(5, 6, 0, false).is_ok());
        assert!(batches(5, 0, 0, false).is_err());
    }
}
