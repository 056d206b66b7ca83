//! Deterministic MNIST-like stroke images for desk-scale experiments.
//!
//! Each class is a fixed combination of three strokes drawn from a shared
//! pool of quadratic curves, so classes overlap stroke-wise and must be told
//! apart by combination. Every sample perturbs the control points, applies a
//! small random rotation/scale/shift, varies stroke width and intensity, may
//! add a short distractor stroke, and adds pixel noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::zoo::idx::Dataset;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub side: usize,
    pub classes: usize,
    /// Draws the per-sample variation.
    pub seed: u64,
    /// Draws the class prototypes; keep it fixed across train/test splits.
    pub prototype_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { count: 10_000, side: 28, classes: 10, seed: 0, prototype_seed: 0x5eed }
    }
}

type Point = (f64, f64);
type Stroke = [Point; 3];

const POOL: usize = 8;
const STROKES_PER_CLASS: usize = 3;

fn prototypes(cfg: &SynthConfig) -> Vec<Vec<Stroke>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.prototype_seed);
    let lo = cfg.side as f64 * 0.2;
    let hi = cfg.side as f64 * 0.8;
    let pool: Vec<Stroke> = (0..POOL)
        .map(|_| {
            let mut p = || (rng.random_range(lo..hi), rng.random_range(lo..hi));
            [p(), p(), p()]
        })
        .collect();
    // distinct 3-subsets of the pool, one per class
    let mut combos = Vec::new();
    for a in 0..POOL {
        for b in a + 1..POOL {
            for c in b + 1..POOL {
                combos.push([a, b, c]);
            }
        }
    }
    for i in (1..combos.len()).rev() {
        let j = rng.random_range(0..=i);
        combos.swap(i, j);
    }
    combos
        .iter()
        .cycle()
        .take(cfg.classes)
        .map(|c| c.iter().take(STROKES_PER_CLASS).map(|&k| pool[k]).collect())
        .collect()
}

fn bezier(s: &Stroke, u: f64) -> Point {
    let a = (1.0 - u) * (1.0 - u);
    let b = 2.0 * u * (1.0 - u);
    let c = u * u;
    (a * s[0].0 + b * s[1].0 + c * s[2].0, a * s[0].1 + b * s[1].1 + c * s[2].1)
}

fn render(strokes: &[Stroke], side: usize, width: f64, intensity: f64, canvas: &mut [f64]) {
    let pts: Vec<Point> = strokes
        .iter()
        .flat_map(|s| (0..=24).map(move |k| bezier(s, k as f64 / 24.0)))
        .collect();
    let inv = 1.0 / (2.0 * width * width);
    for y in 0..side {
        for x in 0..side {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let d2 = pts
                .iter()
                .map(|&(qx, qy)| (qx - px).powi(2) + (qy - py).powi(2))
                .fold(f64::INFINITY, f64::min);
            let v = intensity * (-d2 * inv).exp();
            let c = &mut canvas[y * side + x];
            *c = c.max(v);
        }
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    let protos = prototypes(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let jitter = Normal::new(0.0, 0.8).expect("valid");
    let noise = Normal::new(0.0, 0.05).expect("valid");
    let side = cfg.side;
    let centre = side as f64 / 2.0;
    let mut images = Vec::with_capacity(cfg.count * side * side);
    let mut labels = Vec::with_capacity(cfg.count);
    let mut canvas = vec![0.0; side * side];
    for _ in 0..cfg.count {
        let label = rng.random_range(0..cfg.classes);
        let angle: f64 = rng.random_range(-0.25..0.25);
        let scale: f64 = rng.random_range(0.85..1.15);
        let (dx, dy): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let (sin, cos) = angle.sin_cos();
        let mut warp = |p: Point| {
            let (x, y) = (p.0 + jitter.sample(&mut rng) - centre, p.1 + jitter.sample(&mut rng) - centre);
            (
                centre + scale * (cos * x - sin * y) + dx,
                centre + scale * (sin * x + cos * y) + dy,
            )
        };
        let mut strokes: Vec<Stroke> = protos[label].iter().map(|s| [warp(s[0]), warp(s[1]), warp(s[2])]).collect();
        if rng.random_bool(0.15) {
            let mut p = || (rng.random_range(3.0..side as f64 - 3.0), rng.random_range(3.0..side as f64 - 3.0));
            let a = p();
            let b = (a.0 + rng.random_range(-5.0..5.0), a.1 + rng.random_range(-5.0..5.0));
            strokes.push([a, ((a.0 + b.0) / 2.0, (a.1 + b.1) / 2.0), b]);
        }
        let width = rng.random_range(0.7..1.3);
        let intensity = rng.random_range(0.7..1.0);
        canvas.fill(0.0);
        render(&strokes, side, width, intensity, &mut canvas);
        for v in &canvas {
            let px = (v + noise.sample(&mut rng)).clamp(0.0, 1.0);
            images.push((px * 255.0).round() as u8);
        }
        labels.push(label as u8);
    }
    Dataset::new(images, labels, side, side, cfg.classes)
}
