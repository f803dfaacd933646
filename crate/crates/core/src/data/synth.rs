//! Seeded stand-ins for the three evaluation datasets, written in the same
//! file layouts as the originals so they exercise the real loaders.
//!
//! * fraud: `Time,V1..V28,Amount,Class`, rare positives shifted along a few
//!   directions on both sides of the default vertical split;
//! * distress: `Company,Time,Financial Distress,x1..x83`, a continuous target
//!   driven by a latent per-company health score, 556 columns once encoded;
//! * digits: 28x28 seven-segment glyphs with random affine jitter, in IDX.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal};

use super::idx::{encode_idx, TRAIN_IMAGES, TRAIN_LABELS};
use crate::error::Result;
use crate::seed::SeedTree;

pub const FRAUD_SCHEMA: &str = "label = Class\ndrop = Time,Amount\n";

pub const DISTRESS_SCHEMA: &str = "label = Financial Distress\n\
     categorical = Company,Time,x80\n\
     label_threshold = -0.5\n\
     label_positive = below\n";

const FRAUD_POSITIVE_RATE: f64 = 0.03;
const FRAUD_DETECTABLE: f64 = 0.88;
/// (column index into V1..V28, shift for a typical positive)
const FRAUD_SHIFT: [(usize, f64); 10] = [
    (2, -1.6),
    (3, 1.3),
    (9, -1.4),
    (11, -1.5),
    (13, -1.8),
    (15, -1.0),
    (16, -1.7),
    (17, -0.9),
    (20, 0.7),
    (26, 0.6),
];

pub fn fraud_csv(n: usize, seed: u64) -> String {
    let mut rng = SeedTree::new(seed).child("synth-fraud").rng();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let amount = LogNormal::new(3.5, 1.2).expect("amount distribution");
    let mut out = String::from("Time");
    for k in 1..=28 {
        let _ = write!(out, ",V{k}");
    }
    out.push_str(",Amount,Class\n");
    let mut time = 0.0;
    let mut v = [0.0f64; 28];
    for _ in 0..n {
        time += rng.gen_range(0.0..2.0f64);
        let fraud = rng.gen_bool(FRAUD_POSITIVE_RATE);
        for x in v.iter_mut() {
            *x = normal.sample(&mut rng);
        }
        if fraud {
            if rng.gen_bool(FRAUD_DETECTABLE) {
                let s = rng.gen_range(0.6..1.4);
                for (j, mu) in FRAUD_SHIFT {
                    v[j] += s * mu;
                }
            }
            v[10] *= 1.5;
        }
        let _ = write!(out, "{time:.0}");
        for x in v {
            let _ = write!(out, ",{x:.6}");
        }
        let _ = writeln!(out, ",{:.2},{}", amount.sample(&mut rng), u8::from(fraud));
    }
    out
}

pub const DISTRESS_COMPANIES: usize = 422;
pub const DISTRESS_ROWS: usize = 3672;
pub const DISTRESS_PERIODS: usize = 14;
pub const DISTRESS_INDUSTRIES: usize = 38;
const DISTRESS_INFORMATIVE: usize = 16;

pub fn distress_csv(seed: u64) -> String {
    let mut rng = SeedTree::new(seed).child("synth-distress").rng();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    // Periods per company: every company has at least one, the rest spread at random.
    let mut periods = vec![1usize; DISTRESS_COMPANIES];
    let mut left = DISTRESS_ROWS - DISTRESS_COMPANIES;
    while left > 0 {
        let c = rng.gen_range(0..DISTRESS_COMPANIES);
        if periods[c] < DISTRESS_PERIODS {
            periods[c] += 1;
            left -= 1;
        }
    }
    let loadings: Vec<f64> = (0..83)
        .map(|k| if k < DISTRESS_INFORMATIVE { rng.gen_range(0.5..0.9) } else { 0.0 })
        .collect();
    let industry_effect: Vec<f64> = (0..DISTRESS_INDUSTRIES).map(|_| 0.3 * normal.sample(&mut rng)).collect();

    let mut out = String::from("Company,Time,Financial Distress");
    for k in 1..=83 {
        let _ = write!(out, ",x{k}");
    }
    out.push('\n');
    for (c, &p) in periods.iter().enumerate() {
        let health: f64 = normal.sample(&mut rng);
        let industry = rng.gen_range(0..DISTRESS_INDUSTRIES);
        let first = rng.gen_range(1..=DISTRESS_PERIODS - p + 1);
        for t in first..first + p {
            let drift = 0.25 * normal.sample(&mut rng);
            let h = health + drift;
            let target = 0.9 + 1.1 * h + industry_effect[industry] + 0.35 * normal.sample(&mut rng);
            let _ = write!(out, "{},{t},{target:.6}", c + 1);
            for (k, &a) in loadings.iter().enumerate() {
                if k == 79 {
                    let _ = write!(out, ",{}", industry + 1);
                } else {
                    let x = a * h + normal.sample(&mut rng) + 2.0 * (k % 7) as f64;
                    let _ = write!(out, ",{x:.6}");
                }
            }
            out.push('\n');
        }
    }
    out
}

/// Segment endpoints on a 28x28 canvas: top, upper right, lower right,
/// bottom, lower left, upper left, middle.
const SEGMENTS: [((f64, f64), (f64, f64)); 7] = [
    ((9.0, 5.0), (19.0, 5.0)),
    ((19.0, 5.0), (19.0, 14.0)),
    ((19.0, 14.0), (19.0, 23.0)),
    ((9.0, 23.0), (19.0, 23.0)),
    ((9.0, 14.0), (9.0, 23.0)),
    ((9.0, 5.0), (9.0, 14.0)),
    ((9.0, 14.0), (19.0, 14.0)),
];

const GLYPHS: [&[usize]; 10] = [
    &[0, 1, 2, 3, 4, 5],
    &[1, 2],
    &[0, 1, 6, 4, 3],
    &[0, 1, 6, 2, 3],
    &[5, 6, 1, 2],
    &[0, 5, 6, 2, 3],
    &[0, 5, 6, 4, 3, 2],
    &[0, 1, 2],
    &[0, 1, 2, 3, 4, 5, 6],
    &[0, 1, 5, 6, 2, 3],
];

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// `n` digit images (row-major `u8`, 784 per image) and their digit labels.
pub fn digits(n: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
    let mut rng = SeedTree::new(seed).child("synth-digits").rng();
    let noise = Normal::new(0.0, 12.0).expect("pixel noise");
    let mut images = Vec::with_capacity(n * 784);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let digit = rng.gen_range(0..10u8);
        let scale = rng.gen_range(0.85..1.15);
        let shear = rng.gen_range(-0.25..0.25);
        let (sx, sy) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let width = rng.gen_range(1.0..2.2);
        // Maps a canvas point to glyph coordinates around the centre.
        let inv = |x: f64, y: f64| {
            let (u, v) = ((x - 14.0 - sx) / scale, (y - 14.0 - sy) / scale);
            (u - shear * v + 14.0, v + 14.0)
        };
        for y in 0..28 {
            for x in 0..28 {
                let p = inv(x as f64, y as f64);
                let d = GLYPHS[digit as usize]
                    .iter()
                    .map(|&s| segment_distance(p, SEGMENTS[s].0, SEGMENTS[s].1))
                    .fold(f64::INFINITY, f64::min);
                let ink = (1.0 - (d - width).max(0.0)).clamp(0.0, 1.0) * 255.0;
                let px = if ink > 0.0 { ink + noise.sample(&mut rng) } else { 0.0 };
                images.push(px.clamp(0.0, 255.0) as u8);
            }
        }
        labels.push(digit);
    }
    (images, labels)
}

/// Writes `train-images-idx3-ubyte` and `train-labels-idx1-ubyte` into `dir`.
pub fn write_digits(dir: &Path, n: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (images, labels) = digits(n, seed);
    std::fs::write(dir.join(TRAIN_IMAGES), encode_idx(&[n, 28, 28], &images)?)?;
    std::fs::write(dir.join(TRAIN_LABELS), encode_idx(&[n], &labels)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_csv_bytes, Schema};

    #[test]
    fn fraud_layout() {
        let ds = load_csv_bytes(fraud_csv(2000, 1).as_bytes(), &Schema::parse(FRAUD_SCHEMA).unwrap()).unwrap();
        assert_eq!(ds.dim(), 28);
        let rate = ds.positives() as f64 / ds.len() as f64;
        assert!((0.015..0.05).contains(&rate), "{rate}");
        assert_eq!(fraud_csv(50, 9), fraud_csv(50, 9));
    }

    #[test]
    fn distress_encodes_to_556_columns() {
        let ds = load_csv_bytes(distress_csv(0).as_bytes(), &Schema::parse(DISTRESS_SCHEMA).unwrap()).unwrap();
        assert_eq!(ds.len(), DISTRESS_ROWS);
        assert_eq!(ds.dim(), 556);
        let rate = ds.positives() as f64 / ds.len() as f64;
        assert!((0.03..0.3).contains(&rate), "{rate}");
    }

    #[test]
    fn digits_have_ink() {
        let (img, lab) = digits(20, 3);
        assert_eq!(img.len(), 20 * 784);
        assert!(lab.iter().all(|&l| l < 10));
        for k in 0..20 {
            let inked = img[k * 784..(k + 1) * 784].iter().filter(|&&p| p > 100).count();
            assert!((20..400).contains(&inked), "{inked}");
        }
    }
}
