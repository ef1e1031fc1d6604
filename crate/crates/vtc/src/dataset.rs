//! Procedural toy dataset: circles, squares, fine stripes, and patch-aligned
//! checkerboards with varying position, size, phase, parity, and intensity.
//! Every sample is a pure function of (seed, index); class ids cycle so the
//! histogram is uniform within one.
//!
//! The checkerboard class is the interesting one: its cells line up with the
//! 4-pixel patch grid, so a 2x2 block of tokens always averages bright and
//! dark patches to the same mid value regardless of parity. Pooling destroys
//! the parity bit, and the whole-image token mean is parity-invariant too —
//! reconstructing these images needs scene-level state that actually reads
//! the token field.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::Image;

#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub image: Image,
    pub class_id: usize,
}

fn fnv1a(label: &str) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for b in label.bytes() {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Independent deterministic RNG stream for a labeled purpose.
pub fn stream_seed(seed: u64, label: &str) -> u64 {
    splitmix(seed ^ fnv1a(label))
}

pub fn make_dataset(
    seed: u64,
    count: usize,
    width: usize,
    height: usize,
    channels: usize,
    classes: usize,
) -> Vec<SyntheticSample> {
    assert!((2..=6).contains(&classes), "classes must be in 2..=6");
    (0..count)
        .map(|index| {
            let class_id = index % classes;
            let mut rng = ChaCha8Rng::seed_from_u64(splitmix(
                seed ^ (index as u64).wrapping_mul(0x9e3779b97f4a7c15),
            ));
            let image = draw(class_id, width, height, channels, &mut rng);
            SyntheticSample { image, class_id }
        })
        .collect()
}

fn draw(
    class_id: usize,
    width: usize,
    height: usize,
    channels: usize,
    rng: &mut ChaCha8Rng,
) -> Image {
    let bg: f64 = rng.gen_range(0.0..0.3);
    let fg: f64 = rng.gen_range(0.7..1.0);
    let mut img = Image::zeros(width, height, channels);
    let paint = |img: &mut Image, x: usize, y: usize, v: f64| {
        for c in 0..channels {
            img.set(x, y, c, v);
        }
    };
    for y in 0..height {
        for x in 0..width {
            paint(&mut img, x, y, bg);
        }
    }
    match class_id {
        0 => {
            // filled circle
            let cx = rng.gen_range(0.3..0.7) * width as f64;
            let cy = rng.gen_range(0.3..0.7) * height as f64;
            let radius = rng.gen_range(0.15..0.3) * width.min(height) as f64;
            for y in 0..height {
                for x in 0..width {
                    let dx = x as f64 + 0.5 - cx;
                    let dy = y as f64 + 0.5 - cy;
                    if dx * dx + dy * dy <= radius * radius {
                        paint(&mut img, x, y, fg);
                    }
                }
            }
        }
        1 => {
            // filled axis-aligned square
            let side = rng.gen_range(0.25..0.5) * width.min(height) as f64;
            let x0 = rng.gen_range(0.0..(width as f64 - side));
            let y0 = rng.gen_range(0.0..(height as f64 - side));
            for y in 0..height {
                for x in 0..width {
                    if (x as f64) >= x0
                        && (x as f64) < x0 + side
                        && (y as f64) >= y0
                        && (y as f64) < y0 + side
                    {
                        paint(&mut img, x, y, fg);
                    }
                }
            }
        }
        2 => {
            // fine stripes, random orientation, period, and phase
            let horizontal = rng.gen_bool(0.5);
            let period = rng.gen_range(2..=3usize);
            let phase = rng.gen_range(0..period);
            for y in 0..height {
                for x in 0..width {
                    let coord = if horizontal { y } else { x };
                    let v = if (coord + phase) % period < period.div_ceil(2) {
                        fg
                    } else {
                        bg
                    };
                    paint(&mut img, x, y, v);
                }
            }
        }
        3 => {
            // patch-aligned checkerboard with a random parity bit; pooling a
            // 2x2 block of cells averages to the same value either way
            let cell = 4usize;
            let parity = rng.gen_range(0..2usize);
            for y in 0..height {
                for x in 0..width {
                    let v = if (x / cell + y / cell) % 2 == parity {
                        fg
                    } else {
                        bg
                    };
                    paint(&mut img, x, y, v);
                }
            }
        }
        4 => {
            // diagonal gradient
            let flip = rng.gen_bool(0.5);
            for y in 0..height {
                for x in 0..width {
                    let t = (x + y) as f64 / (width + height - 2) as f64;
                    let t = if flip { 1.0 - t } else { t };
                    paint(&mut img, x, y, bg + t * (fg - bg));
                }
            }
        }
        _ => {
            // fine checkerboard (sub-patch cells)
            let cell = 2usize;
            for y in 0..height {
                for x in 0..width {
                    let v = if (x / cell + y / cell) % 2 == 0 { fg } else { bg };
                    paint(&mut img, x, y, v);
                }
            }
        }
    }
    img
}
