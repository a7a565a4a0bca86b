use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, LabeledImage};
use crate::error::{Error, Result};
use crate::nnet::Tensor;
use crate::rng::{stream, Purpose};

pub const TOY_CLASS_NAMES: [&str; 4] = ["red_gradient", "green_checker", "blue_stripes", "yellow_disk"];

const NOISE_STD: f64 = 0.05;

/// Deterministic synthetic classes with distinct colour and structure:
/// 0 red horizontal gradient, 1 green checkerboard, 2 blue vertical stripes,
/// 3 yellow disk on a dark ground. Each image gets random phase/offset
/// jitter and Gaussian pixel noise, then is clipped to `[-1, 1]`.
pub fn make_toy_dataset(n_per_class: usize, image_size: usize, num_classes: usize, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 || image_size < 2 {
        return Err(Error::invalid("toy dataset needs at least one image per class and size >= 2"));
    }
    if num_classes == 0 || num_classes > TOY_CLASS_NAMES.len() {
        return Err(Error::invalid(format!(
            "toy dataset has 1 to {} classes, asked for {num_classes}",
            TOY_CLASS_NAMES.len()
        )));
    }
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut images = Vec::with_capacity(n_per_class * num_classes);
    for class in 0..num_classes {
        for i in 0..n_per_class {
            let mut rng = stream(seed, Purpose::Toy, (class * n_per_class + i) as u64);
            let mut data = render(class, image_size, &mut rng);
            for v in &mut data {
                *v = (*v + noise.sample(&mut rng)).clamp(-1.0, 1.0);
            }
            images.push(LabeledImage {
                pixels: Tensor::new(&[image_size, image_size, 3], data)?,
                label: class,
                source_id: format!("toy/{}/{i:05}", TOY_CLASS_NAMES[class]),
            });
        }
    }
    Ok(Dataset {
        images,
        class_names: TOY_CLASS_NAMES[..num_classes].iter().map(|s| s.to_string()).collect(),
        image_size,
    })
}

/// Clean image in `[-1, 1]`, row-major `[H, W, 3]`.
fn render(class: usize, s: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; s * s * 3];
    let gain = rng.random_range(0.9..1.1);
    let mut put = |y: usize, x: usize, rgb: [f64; 3]| {
        for (c, v) in rgb.iter().enumerate() {
            // [0,1] intensities to the model domain
            out[(y * s + x) * 3 + c] = 2.0 * (v * gain).clamp(0.0, 1.0) - 1.0;
        }
    };
    let last = (s - 1) as f64;
    match class {
        0 => {
            let offset = rng.random_range(-0.15..0.15);
            for y in 0..s {
                for x in 0..s {
                    let u = (x as f64 / last + offset).clamp(0.0, 1.0);
                    put(y, x, [0.3 + 0.65 * u, 0.1 + 0.1 * u, 0.1]);
                }
            }
        }
        1 => {
            let cell = (s / 4).max(1);
            let (py, px) = (rng.random_range(0..2 * cell), rng.random_range(0..2 * cell));
            for y in 0..s {
                for x in 0..s {
                    let on = ((y + py) / cell + (x + px) / cell) % 2 == 0;
                    let g = if on { 0.85 } else { 0.25 };
                    put(y, x, [0.15, g, 0.15]);
                }
            }
        }
        2 => {
            let phase = rng.random_range(0..2);
            for y in 0..s {
                for x in 0..s {
                    let on = (x + phase) % 2 == 0;
                    let b = if on { 0.9 } else { 0.3 };
                    put(y, x, [0.1, 0.15, b]);
                }
            }
        }
        _ => {
            let c = last / 2.0;
            let (cy, cx) = (c + rng.random_range(-0.75..0.75), c + rng.random_range(-0.75..0.75));
            let r = s as f64 * rng.random_range(0.27..0.35);
            for y in 0..s {
                for x in 0..s {
                    let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
                    let rgb = if d <= r { [0.9, 0.85, 0.1] } else { [0.1, 0.1, 0.15] };
                    put(y, x, rgb);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_bits() {
        let a = make_toy_dataset(5, 8, 4, 42).unwrap();
        let b = make_toy_dataset(5, 8, 4, 42).unwrap();
        assert_eq!(a, b);
        let c = make_toy_dataset(5, 8, 4, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn pixels_within_domain() {
        let d = make_toy_dataset(20, 8, 4, 1).unwrap();
        for im in &d.images {
            assert!(im.pixels.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        assert_eq!(d.counts(), vec![20; 4]);
    }

    #[test]
    fn class_means_are_well_separated() {
        let n = 50;
        let d = make_toy_dataset(n, 8, 4, 9).unwrap();
        let dim = 192;
        let mut means = vec![vec![0.0; dim]; 4];
        for im in &d.images {
            for (m, v) in means[im.label].iter_mut().zip(im.pixels.data()) {
                *m += v / n as f64;
            }
        }
        // within-class std: root mean squared distance to the class mean
        let mut within = 0.0;
        for im in &d.images {
            let dist2: f64 = im
                .pixels
                .data()
                .iter()
                .zip(&means[im.label])
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            within += dist2 / d.len() as f64;
        }
        let within = (within / dim as f64).sqrt();
        for a in 0..4 {
            for b in a + 1..4 {
                let dist: f64 = means[a]
                    .iter()
                    .zip(&means[b])
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(dist > 10.0 * within, "classes {a},{b}: {dist} vs {within}");
            }
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(make_toy_dataset(0, 8, 4, 0).is_err());
        assert!(make_toy_dataset(3, 8, 5, 0).is_err());
        assert!(make_toy_dataset(3, 1, 4, 0).is_err());
    }
}
