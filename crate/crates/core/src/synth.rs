//! Seeded procedural images for fixtures, demos and benchmarks.
//!
//! "Natural" images here are tileable: a 1/f-weighted sum of integer-frequency
//! colour gratings, a faint fine texture, and soft-edged discs (some striped)
//! placed with wrap-around.
//! Being periodic, they survive circular shifts without a seam.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::image::{decode_image, encode_png, shift_image, ImageTensor};

const GRATINGS: usize = 24;
const MAX_FREQ: f64 = 12.0;
const TEXTURE_FREQ: std::ops::Range<f64> = 10.0..24.0;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Integer wave vector (cycles per image) with magnitude near `radius`.
fn wave_vector(rng: &mut ChaCha8Rng, radius: f64) -> (f64, f64) {
    let angle = rng.random::<f64>() * TAU;
    let (kx, ky) = ((radius * angle.cos()).round(), (radius * angle.sin()).round());
    if kx == 0.0 && ky == 0.0 {
        (1.0, 0.0)
    } else {
        (kx, ky)
    }
}

/// A tileable natural-looking image.
pub fn natural_image(seed: u64, side: usize) -> ImageTensor {
    let mut rng = rng_for(seed, 1);
    let n = side as f64;
    let mut acc = vec![random_color(&mut rng); side * side];

    let grating = |acc: &mut [[f64; 3]], kx: f64, ky: f64, amp: f64, phase: f64, tint: [f64; 3]| {
        for r in 0..side {
            for c in 0..side {
                let v = amp * (TAU * (kx * c as f64 + ky * r as f64) / n + phase).cos();
                for ch in 0..3 {
                    acc[r * side + c][ch] += v * tint[ch];
                }
            }
        }
    };

    // 1/f background
    for _ in 0..GRATINGS {
        let radius = MAX_FREQ.powf(rng.random::<f64>());
        let (kx, ky) = wave_vector(&mut rng, radius);
        let amp = 0.35 / (kx * kx + ky * ky).sqrt();
        let phase = rng.random::<f64>() * TAU;
        let tint = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        grating(&mut acc, kx, ky, amp, phase, tint);
    }

    // faint fine texture over everything
    for _ in 0..4 {
        let radius = rng.random_range(TEXTURE_FREQ);
        let (kx, ky) = wave_vector(&mut rng, radius);
        let phase = rng.random::<f64>() * TAU;
        let tint = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        grating(&mut acc, kx, ky, 0.03, phase, tint);
    }

    // discs, some carrying a stripe pattern
    let discs = rng.random_range(3..7);
    for _ in 0..discs {
        let (cy, cx) = (rng.random::<f64>() * n, rng.random::<f64>() * n);
        let radius = rng.random_range(0.08..0.25) * n;
        let color = random_color(&mut rng);
        let opacity = rng.random_range(0.6..0.95);
        let stripes = rng.random_bool(0.5).then(|| {
            let radius = rng.random_range(TEXTURE_FREQ);
            let (kx, ky) = wave_vector(&mut rng, radius);
            (kx, ky, rng.random_range(0.1..0.3))
        });
        for r in 0..side {
            for c in 0..side {
                let dy = wrap_delta(r as f64 + 0.5 - cy, n);
                let dx = wrap_delta(c as f64 + 0.5 - cx, n);
                // one-pixel soft edge
                let cover = (radius - (dx * dx + dy * dy).sqrt() + 0.5).clamp(0.0, 1.0) * opacity;
                if cover > 0.0 {
                    let shade = stripes.map_or(0.0, |(kx, ky, depth)| {
                        depth * (TAU * (kx * c as f64 + ky * r as f64) / n).cos()
                    });
                    let px = &mut acc[r * side + c];
                    for ch in 0..3 {
                        px[ch] = px[ch] * (1.0 - cover) + (color[ch] + shade) * cover;
                    }
                }
            }
        }
    }

    // Fit into [0.02, 0.98] without changing structure.
    let (lo, hi) = acc
        .iter()
        .flatten()
        .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(1e-9);
    ImageTensor::from_fn(side, side, |r, c| {
        acc[r * side + c].map(|v| (0.02 + 0.96 * (v - lo) / span) as f32)
    })
}

fn wrap_delta(d: f64, n: f64) -> f64 {
    d - n * (d / n).round()
}

/// Independent uniform samples, no spatial structure.
pub fn noise_image(seed: u64, side: usize) -> ImageTensor {
    let mut rng = rng_for(seed, 2);
    ImageTensor::from_fn(side, side, |_, _| std::array::from_fn(|_| rng.random()))
}

/// Adds zero-mean Gaussian noise of standard deviation `sigma`, clamped to `[0, 1]`.
pub fn add_noise(img: &ImageTensor, sigma: f64, seed: u64) -> ImageTensor {
    let mut rng = rng_for(seed, 3);
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    ImageTensor::from_fn(img.height(), img.width(), |r, c| {
        img.pixel(r, c).map(|v| (v as f64 + normal.sample(&mut rng)) as f32)
    })
}

/// `count` embedding-like vectors of dimension `dim` lying near a
/// `latent`-dimensional linear subspace, with isotropic jitter.
pub fn clustered_vectors(seed: u64, count: usize, dim: usize, latent: usize, jitter: f64) -> Vec<Vec<f32>> {
    let mut rng = rng_for(seed, 4);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let basis: Vec<Vec<f64>> = (0..latent)
        .map(|_| (0..dim).map(|_| normal.sample(&mut rng) / (dim as f64).sqrt()).collect())
        .collect();
    (0..count)
        .map(|_| {
            let z: Vec<f64> = (0..latent).map(|_| normal.sample(&mut rng)).collect();
            (0..dim)
                .map(|d| {
                    let on_manifold: f64 = z.iter().zip(&basis).map(|(zi, b)| zi * b[d]).sum();
                    (on_manifold + jitter * normal.sample(&mut rng)) as f32
                })
                .collect()
        })
        .collect()
}

/// Sizes of a generated demo set.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DemoSpec {
    pub seed: u64,
    pub side: usize,
    pub corpus: usize,
    /// Samples that are byte-identical copies of corpus files.
    pub copies: usize,
    /// Samples that are corpus images shifted by one pixel.
    pub shifts: usize,
    /// Samples generated independently of the corpus.
    pub novel: usize,
    pub similar_pairs: usize,
    pub dissimilar_pairs: usize,
}

impl Default for DemoSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            side: 64,
            corpus: 200,
            copies: 20,
            shifts: 20,
            novel: 60,
            similar_pairs: 50,
            dissimilar_pairs: 50,
        }
    }
}

fn quantized(img: &ImageTensor) -> (Vec<u8>, ImageTensor) {
    let png = encode_png(img);
    let back = decode_image(&png).expect("encoder output decodes");
    (png, back)
}

fn one_pixel_shift(img: &ImageTensor, rng: &mut ChaCha8Rng) -> ImageTensor {
    let (dx, dy) = [(1, 0), (-1, 0), (0, 1), (0, -1)][rng.random_range(0..4)];
    shift_image(img, dx, dy).expect("one pixel is within any image")
}

/// A complete demo: `corpus/` images, `samples/` to audit and a
/// `calibration/` folder with labeled pairs. Returns `(relative path, bytes)`
/// in a fixed order.
///
/// Copies and shifts come from the start of the corpus; similar calibration
/// pairs use entries counted back from its end (half shifted by one pixel,
/// half with faint noise), so the two never share an image when the corpus
/// is large enough.
pub fn demo_files(spec: &DemoSpec) -> Vec<(String, Vec<u8>)> {
    let mut rng = rng_for(spec.seed, 5);
    let corpus: Vec<(Vec<u8>, ImageTensor)> = (0..spec.corpus as u64)
        .map(|i| quantized(&natural_image(spec.seed.wrapping_mul(1_000_003).wrapping_add(i), spec.side)))
        .collect();
    let name = |i: usize| format!("img_{i:04}.png");
    let mut files: Vec<(String, Vec<u8>)> = corpus
        .iter()
        .enumerate()
        .map(|(i, (png, _))| (format!("corpus/{}", name(i)), png.clone()))
        .collect();
    let n = spec.corpus.max(1);
    for i in 0..spec.copies {
        files.push((format!("samples/copy_{i:03}.png"), corpus[i % n].0.clone()));
    }
    for i in 0..spec.shifts {
        let shifted = one_pixel_shift(&corpus[(spec.copies + i) % n].1, &mut rng);
        files.push((format!("samples/shift_{i:03}.png"), encode_png(&shifted)));
    }
    for i in 0..spec.novel as u64 {
        // seeds from a disjoint stream of the generator
        let img = natural_image(!(spec.seed.wrapping_mul(1_000_003).wrapping_add(i)), spec.side);
        files.push((format!("samples/novel_{i:03}.png"), encode_png(&img)));
    }

    let mut csv = String::from("id_a,id_b,label\n");
    for i in 0..spec.similar_pairs {
        let src = (n - 1 - i % n) % n;
        let img = &corpus[src].1;
        let perturbed = if i % 2 == 0 {
            one_pixel_shift(img, &mut rng)
        } else {
            add_noise(img, 0.02, spec.seed.wrapping_add(i as u64))
        };
        let file = format!("similar_{i:03}.png");
        csv.push_str(&format!("{},{file},similar\n", name(src)));
        files.push((format!("calibration/{file}"), encode_png(&perturbed)));
    }
    for _ in 0..spec.dissimilar_pairs {
        let a = rng.random_range(0..n);
        let b = (a + rng.random_range(1..n.max(2))) % n;
        csv.push_str(&format!("{},{},dissimilar\n", name(a), name(b)));
    }
    files.push(("calibration/pairs.csv".into(), csv.into_bytes()));
    files
}
