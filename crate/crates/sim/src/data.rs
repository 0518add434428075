//! Dataset sources for the scenarios: a deterministic synthetic digit
//! generator (rendered 28x28 glyphs plus seeded distortions), a synthetic
//! fading-channel generator (link-power windows with and without deep fades),
//! IDX file ingestion, and label-subset partitioning.

use crate::{Result, SimError};
use chainfuse_core::nn::{self, Example, LabeledDataset, Value};
use ndarray::Array3;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

/// Seven-segment endpoints on a 28x28 canvas: (x1, y1, x2, y2).
const SEG_A: [f64; 4] = [7.0, 5.0, 20.0, 5.0];
const SEG_B: [f64; 4] = [20.0, 5.0, 20.0, 14.0];
const SEG_C: [f64; 4] = [20.0, 14.0, 20.0, 23.0];
const SEG_D: [f64; 4] = [7.0, 23.0, 20.0, 23.0];
const SEG_E: [f64; 4] = [7.0, 14.0, 7.0, 23.0];
const SEG_F: [f64; 4] = [7.0, 5.0, 7.0, 14.0];
const SEG_G: [f64; 4] = [7.0, 14.0, 20.0, 14.0];

fn glyph_segments(digit: usize) -> Vec<[f64; 4]> {
    let segs: &[[f64; 4]] = match digit {
        0 => &[SEG_A, SEG_B, SEG_C, SEG_D, SEG_E, SEG_F],
        1 => &[SEG_B, SEG_C, [14.0, 5.0, 20.0, 5.0]],
        2 => &[SEG_A, SEG_B, SEG_G, SEG_E, SEG_D],
        3 => &[SEG_A, SEG_B, SEG_G, SEG_C, SEG_D],
        4 => &[SEG_F, SEG_G, SEG_B, SEG_C],
        5 => &[SEG_A, SEG_F, SEG_G, SEG_C, SEG_D],
        6 => &[SEG_A, SEG_F, SEG_E, SEG_D, SEG_C, SEG_G],
        7 => &[SEG_A, [20.0, 5.0, 11.0, 23.0]],
        8 => &[SEG_A, SEG_B, SEG_C, SEG_D, SEG_E, SEG_F, SEG_G],
        9 => &[SEG_G, SEG_F, SEG_A, SEG_B, SEG_C, SEG_D],
        _ => &[],
    };
    segs.to_vec()
}

fn dist_to_segment(px: f64, py: f64, seg: &[f64; 4]) -> f64 {
    let (x1, y1, x2, y2) = (seg[0], seg[1], seg[2], seg[3]);
    let (dx, dy) = (x2 - x1, y2 - y1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - x1) * dx + (py - y1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (x1 + t * dx, y1 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Render one distorted digit glyph: scale/shift jitter plus pixel noise.
fn render_digit(digit: usize, rng: &mut ChaCha12Rng) -> Array3<f64> {
    let scale = rng.random_range(0.85..1.12);
    let dx = rng.random_range(-2.5..2.5);
    let dy = rng.random_range(-2.5..2.5);
    let noise_level = 0.12;
    let segments: Vec<[f64; 4]> = glyph_segments(digit)
        .into_iter()
        .map(|s| {
            let cx = 13.5;
            let cy = 14.0;
            [
                cx + (s[0] - cx) * scale + dx,
                cy + (s[1] - cy) * scale + dy,
                cx + (s[2] - cx) * scale + dx,
                cy + (s[3] - cy) * scale + dy,
            ]
        })
        .collect();
    let mut img = Array3::zeros((1, 28, 28));
    for y in 0..28 {
        for x in 0..28 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let d = segments
                .iter()
                .map(|s| dist_to_segment(px, py, s))
                .fold(f64::INFINITY, f64::min);
            let ink = (1.9 - d).clamp(0.0, 1.0);
            let noisy = ink + rng.random_range(-noise_level..noise_level);
            img[[0, y, x]] = noisy.clamp(0.0, 1.0);
        }
    }
    img
}

/// Deterministic synthetic digit dataset over the given label subset, with
/// labels cycling so classes stay balanced to within one example.
pub fn gen_digits(labels: &[usize], n_train: usize, n_verify: usize, seed: u64) -> Result<LabeledDataset> {
    if labels.is_empty() || labels.iter().any(|&l| l > 9) {
        return Err(SimError::Data(format!("digit labels must be within 0..=9, got {labels:?}")));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut make = |count: usize, rng: &mut ChaCha12Rng| -> Vec<Example> {
        (0..count)
            .map(|i| {
                let label = labels[i % labels.len()];
                Example { input: Value::Image(render_digit(label, rng)), label }
            })
            .collect()
    };
    let train = make(n_train, &mut rng);
    let verify = make(n_verify, &mut rng);
    LabeledDataset::new(10, train, verify).map_err(SimError::Nn)
}

const FADING_WINDOW: usize = 64;

/// One link-power window. Class 1 carries a deep multiplicative fade segment,
/// class 0 does not; both share the same slow-varying carrier and noise.
fn render_power_trace(fade: bool, rng: &mut ChaCha12Rng) -> Array3<f64> {
    let base = rng.random_range(0.55..0.75);
    let a1 = rng.random_range(0.05..0.12);
    let f1 = rng.random_range(0.02..0.06);
    let p1 = rng.random_range(0.0..std::f64::consts::TAU);
    let a2 = rng.random_range(0.02..0.06);
    let f2 = rng.random_range(0.09..0.16);
    let p2 = rng.random_range(0.0..std::f64::consts::TAU);
    let noise = 0.02;
    let (fade_start, fade_len, fade_depth) = if fade {
        (
            rng.random_range(4..FADING_WINDOW - 24),
            rng.random_range(10..22),
            rng.random_range(0.15..0.45),
        )
    } else {
        (0, 0, 1.0)
    };
    let mut img = Array3::zeros((1, 1, FADING_WINDOW));
    for t in 0..FADING_WINDOW {
        let mut p = base
            + a1 * (std::f64::consts::TAU * f1 * t as f64 + p1).sin()
            + a2 * (std::f64::consts::TAU * f2 * t as f64 + p2).sin();
        if fade && t >= fade_start && t < fade_start + fade_len {
            p *= fade_depth;
        }
        p += rng.random_range(-noise..noise);
        img[[0, 0, t]] = p.clamp(0.0, 1.0);
    }
    img
}

/// Synthetic fading-channel detection dataset: class 1 = fade present,
/// class 0 = clean trace; balanced to within one example.
pub fn gen_fading(n_train: usize, n_test: usize, seed: u64) -> Result<LabeledDataset> {
    if n_train == 0 || n_test == 0 {
        return Err(SimError::Data("fading dataset needs at least one example per split".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut make = |count: usize, rng: &mut ChaCha12Rng| -> Vec<Example> {
        (0..count)
            .map(|i| {
                let label = i % 2;
                Example { input: Value::Image(render_power_trace(label == 1, rng)), label }
            })
            .collect()
    };
    let train = make(n_train, &mut rng);
    let verify = make(n_test, &mut rng);
    LabeledDataset::new(2, train, verify).map_err(SimError::Nn)
}

/// Load an IDX image/label pair into a dataset (all data in the train split).
pub fn ingest_idx(images: &[u8], labels: &[u8], classes: usize) -> Result<LabeledDataset> {
    let images = nn::read_idx_images(images)?;
    let labels = nn::read_idx_labels(labels)?;
    if images.len() != labels.len() {
        return Err(SimError::Data(format!(
            "{} images against {} labels",
            images.len(),
            labels.len()
        )));
    }
    let train = images
        .into_iter()
        .zip(labels)
        .map(|(img, label)| Example { input: Value::Image(img), label })
        .collect();
    LabeledDataset::new(classes, train, Vec::new()).map_err(SimError::Nn)
}

/// Draw a label-restricted partition from a pooled dataset: shuffle the
/// matching examples with the given seed, then split counts into train/verify.
pub fn partition(
    pool: &LabeledDataset,
    labels: &[usize],
    n_train: usize,
    n_verify: usize,
    seed: u64,
) -> Result<LabeledDataset> {
    let mut matching: Vec<&Example> = pool
        .train
        .iter()
        .chain(&pool.verify)
        .filter(|ex| labels.contains(&ex.label))
        .collect();
    if matching.len() < n_train + n_verify {
        return Err(SimError::Data(format!(
            "partition needs {} examples with labels {labels:?}, pool has {}",
            n_train + n_verify,
            matching.len()
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    matching.shuffle(&mut rng);
    let train = matching[..n_train].iter().map(|e| (*e).clone()).collect();
    let verify = matching[n_train..n_train + n_verify].iter().map(|e| (*e).clone()).collect();
    LabeledDataset::new(pool.classes, train, verify).map_err(SimError::Nn)
}
