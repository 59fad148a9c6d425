//! Procedural bitemporal scenes: a smooth background with flat-coloured
//! shapes, where the second date inserts and deletes some of them.
//!
//! Shapes never overlap (not even a deleted one with an inserted one), so the
//! change label is exactly the symmetric difference of the two shape masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::grid::{Mask, RgbImage};
use super::BitemporalPair;
use crate::error::{Error, Result};
use crate::rng::mix_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Standard deviation of additive per-pixel noise.
    pub noise_level: f64,
    /// Half-width of the random per-image gain; offsets use half of it.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            size: 64,
            n_train: 200,
            n_val: 20,
            n_test: 50,
            min_shapes: 2,
            max_shapes: 5,
            noise_level: 0.02,
            jitter: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 16 || !self.size.is_multiple_of(8) {
            return Err(Error::InvalidArgument(format!(
                "synthetic size must be a multiple of 8 and at least 16, got {}",
                self.size
            )));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::InvalidArgument("split counts must be at least 1".into()));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::InvalidArgument("min_shapes exceeds max_shapes".into()));
        }
        if self.noise_level < 0.0 || self.jitter < 0.0 {
            return Err(Error::InvalidArgument("noise and jitter must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ShapeKind {
    /// Half-open box `[y0, y1) x [x0, x1)` in pixel coordinates.
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64 },
    /// Convex polygon, vertices as `(y, x)`.
    Polygon { vertices: Vec<(f64, f64)> },
}

impl ShapeKind {
    /// Point-in-shape test at continuous coordinates.
    pub fn contains(&self, y: f64, x: f64) -> bool {
        match self {
            ShapeKind::Rect { y0, x0, y1, x1 } => y >= *y0 && y < *y1 && x >= *x0 && x < *x1,
            ShapeKind::Ellipse { cy, cx, ry, rx } => {
                let dy = (y - cy) / ry;
                let dx = (x - cx) / rx;
                dy * dy + dx * dx <= 1.0
            }
            ShapeKind::Polygon { vertices } => {
                // Even-odd ray casting along +x.
                let mut inside = false;
                let n = vertices.len();
                for i in 0..n {
                    let (yi, xi) = vertices[i];
                    let (yj, xj) = vertices[(i + n - 1) % n];
                    if (yi > y) != (yj > y) {
                        let xc = xi + (y - yi) * (xj - xi) / (yj - yi);
                        if x < xc {
                            inside = !inside;
                        }
                    }
                }
                inside
            }
        }
    }

    /// `(y_min, x_min, y_max, x_max)`.
    pub fn bbox(&self) -> (f64, f64, f64, f64) {
        match self {
            ShapeKind::Rect { y0, x0, y1, x1 } => (*y0, *x0, *y1, *x1),
            ShapeKind::Ellipse { cy, cx, ry, rx } => (cy - ry, cx - rx, cy + ry, cx + rx),
            ShapeKind::Polygon { vertices } => vertices.iter().fold(
                (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
                |(a, b, c, d), &(y, x)| (a.min(y), b.min(x), c.max(y), d.max(x)),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub color: [f32; 3],
}

#[derive(Debug, Clone, PartialEq)]
struct Wave {
    channel: usize,
    amplitude: f64,
    fy: f64,
    fx: f64,
    phase: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Background {
    pub base: [f32; 3],
    waves: Vec<Wave>,
}

impl Background {
    pub fn flat(base: [f32; 3]) -> Self {
        Self { base, waves: Vec::new() }
    }

    fn value(&self, c: usize, y: f64, x: f64) -> f64 {
        let mut v = self.base[c] as f64;
        for w in self.waves.iter().filter(|w| w.channel == c) {
            v += w.amplitude * (w.fy * y + w.fx * x + w.phase).sin();
        }
        v
    }
}

/// Everything needed to render both dates of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub size: usize,
    pub background: Background,
    pub shapes_a: Vec<Shape>,
    pub shapes_b: Vec<Shape>,
}

/// Per-image photometric perturbation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    pub gain: [f32; 3],
    pub offset: [f32; 3],
    pub noise_sigma: f32,
    pub noise_seed: u64,
}

impl Jitter {
    fn draw(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig) -> Self {
        let j = cfg.jitter;
        let mut gain = [1.0f32; 3];
        let mut offset = [0.0f32; 3];
        let g: f64 = if j > 0.0 { rng.random_range(-j..=j) } else { 0.0 };
        for c in 0..3 {
            let tint: f64 = if j > 0.0 { rng.random_range(-j / 4.0..=j / 4.0) } else { 0.0 };
            gain[c] = (1.0 + g + tint) as f32;
            offset[c] = if j > 0.0 { rng.random_range(-j / 2.0..=j / 2.0) as f32 } else { 0.0 };
        }
        Self {
            gain,
            offset,
            noise_sigma: cfg.noise_level as f32,
            noise_seed: rng.random(),
        }
    }

    fn apply(&self, img: &mut RgbImage) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
        let plane = img.height * img.width;
        for (i, v) in img.data.iter_mut().enumerate() {
            let c = i / plane;
            let n: f64 = StandardNormal.sample(&mut rng);
            *v = (*v * self.gain[c] + self.offset[c] + self.noise_sigma * n as f32).clamp(0.0, 1.0);
        }
    }
}

/// Shape mask sampled at pixel centres.
pub fn rasterize(shapes: &[Shape], size: usize) -> Mask {
    let mut m = Mask::new(1, size, size);
    for s in shapes {
        let (ymin, xmin, ymax, xmax) = s.kind.bbox();
        let y_lo = (ymin - 1.0).floor().max(0.0) as usize;
        let x_lo = (xmin - 1.0).floor().max(0.0) as usize;
        let y_hi = ((ymax + 1.0).ceil().max(0.0) as usize).min(size);
        let x_hi = ((xmax + 1.0).ceil().max(0.0) as usize).min(size);
        for y in y_lo..y_hi {
            for x in x_lo..x_hi {
                if s.kind.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    m.set(0, y, x, 1);
                }
            }
        }
    }
    m
}

pub fn render(background: &Background, shapes: &[Shape], size: usize) -> RgbImage {
    let mut img = RgbImage::new(3, size, size);
    for c in 0..3 {
        for y in 0..size {
            for x in 0..size {
                let v = background.value(c, y as f64 + 0.5, x as f64 + 0.5);
                img.set(c, y, x, v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    let mask_of = |s: &Shape| rasterize(std::slice::from_ref(s), size);
    for s in shapes {
        let m = mask_of(s);
        for (i, &on) in m.data.iter().enumerate() {
            if on == 1 {
                for c in 0..3 {
                    img.data[c * size * size + i] = s.color[c];
                }
            }
        }
    }
    img
}

/// Renders both dates and the exact change label.
pub fn render_pair(name: &str, scene: &Scene, jitter: Option<(Jitter, Jitter)>) -> BitemporalPair {
    let mut image_a = render(&scene.background, &scene.shapes_a, scene.size);
    let mut image_b = render(&scene.background, &scene.shapes_b, scene.size);
    if let Some((ja, jb)) = jitter {
        ja.apply(&mut image_a);
        jb.apply(&mut image_b);
    }
    let ma = rasterize(&scene.shapes_a, scene.size);
    let mb = rasterize(&scene.shapes_b, scene.size);
    let label_data = ma.data.iter().zip(&mb.data).map(|(a, b)| a ^ b).collect();
    BitemporalPair {
        name: name.to_string(),
        image_a,
        image_b,
        label: Mask::from_vec(1, scene.size, scene.size, label_data).expect("square mask"),
    }
}

fn boxes_overlap(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64), margin: f64) -> bool {
    !(a.2 + margin <= b.0 || b.2 + margin <= a.0 || a.3 + margin <= b.1 || b.3 + margin <= a.1)
}

fn random_color(rng: &mut ChaCha8Rng, base: [f32; 3]) -> [f32; 3] {
    loop {
        let c = [rng.random::<f32>(), rng.random::<f32>(), rng.random::<f32>()];
        let dist: f32 = c.iter().zip(&base).map(|(a, b)| (a - b).abs()).sum();
        if dist >= 0.6 {
            return c;
        }
    }
}

fn random_kind(rng: &mut ChaCha8Rng, size: f64) -> ShapeKind {
    let lo = size / 10.0;
    let hi = size / 4.0;
    let h = rng.random_range(lo..hi);
    let w = rng.random_range(lo..hi);
    let y0 = rng.random_range(1.0..size - h - 1.0);
    let x0 = rng.random_range(1.0..size - w - 1.0);
    match rng.random_range(0..3) {
        0 => ShapeKind::Rect {
            y0: y0.floor(),
            x0: x0.floor(),
            y1: (y0 + h).floor(),
            x1: (x0 + w).floor(),
        },
        1 => ShapeKind::Ellipse {
            cy: y0 + h / 2.0,
            cx: x0 + w / 2.0,
            ry: h / 2.0,
            rx: w / 2.0,
        },
        _ => {
            // Convex polygon from sorted angles on an inscribed ellipse.
            let n = rng.random_range(3..=6);
            let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
            angles.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
            let (cy, cx) = (y0 + h / 2.0, x0 + w / 2.0);
            ShapeKind::Polygon {
                vertices: angles
                    .iter()
                    .map(|a| (cy + h / 2.0 * a.sin(), cx + w / 2.0 * a.cos()))
                    .collect(),
            }
        }
    }
}

/// Places a new shape that keeps a margin from all `occupied` boxes.
fn place(
    rng: &mut ChaCha8Rng,
    size: usize,
    base: [f32; 3],
    occupied: &[(f64, f64, f64, f64)],
) -> Option<Shape> {
    for _ in 0..60 {
        let kind = random_kind(rng, size as f64);
        let bb = kind.bbox();
        if occupied.iter().all(|&o| !boxes_overlap(bb, o, 2.0)) {
            return Some(Shape {
                kind,
                color: random_color(rng, base),
            });
        }
    }
    None
}

pub fn random_scene(rng: &mut ChaCha8Rng, cfg: &SyntheticConfig) -> Scene {
    let base = [
        rng.random_range(0.2..0.8f32),
        rng.random_range(0.2..0.8f32),
        rng.random_range(0.2..0.8f32),
    ];
    let size = cfg.size;
    let waves = (0..3)
        .flat_map(|c| (0..2).map(move |_| c))
        .map(|channel| {
            let period_y = rng.random_range(size as f64 * 0.5..size as f64 * 2.0);
            let period_x = rng.random_range(size as f64 * 0.5..size as f64 * 2.0);
            Wave {
                channel,
                amplitude: rng.random_range(0.03..0.12),
                fy: std::f64::consts::TAU / period_y,
                fx: std::f64::consts::TAU / period_x,
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect();
    let background = Background { base, waves };

    let n_a = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let mut occupied = Vec::new();
    let mut shapes_a = Vec::new();
    for _ in 0..n_a {
        if let Some(s) = place(rng, size, base, &occupied) {
            occupied.push(s.kind.bbox());
            shapes_a.push(s);
        }
    }
    let mut shapes_b: Vec<Shape> = shapes_a.iter().filter(|_| rng.random_bool(0.7)).cloned().collect();
    let n_insert = rng.random_range(0..=2);
    for _ in 0..n_insert {
        if let Some(s) = place(rng, size, base, &occupied) {
            occupied.push(s.kind.bbox());
            shapes_b.push(s);
        }
    }
    Scene {
        size,
        background,
        shapes_a,
        shapes_b,
    }
}

/// One sample from its own seed.
pub fn synthetic_pair(name: &str, seed: u64, cfg: &SyntheticConfig) -> BitemporalPair {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = random_scene(&mut rng, cfg);
    let ja = Jitter::draw(&mut rng, cfg);
    let jb = Jitter::draw(&mut rng, cfg);
    render_pair(name, &scene, Some((ja, jb)))
}

#[derive(Debug, Clone)]
pub struct SyntheticSplits {
    pub train: Vec<BitemporalPair>,
    pub val: Vec<BitemporalPair>,
    pub test: Vec<BitemporalPair>,
}

impl SyntheticSplits {
    pub fn named(&self) -> [(&'static str, &[BitemporalPair]); 3] {
        [("train", &self.train), ("val", &self.val), ("test", &self.test)]
    }
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticSplits> {
    cfg.validate()?;
    let split = |tag: &str, id: u64, n: usize| -> Vec<BitemporalPair> {
        (0..n)
            .map(|i| synthetic_pair(&format!("{tag}_{i:05}"), mix_seed(cfg.seed, &[id, i as u64]), cfg))
            .collect()
    };
    Ok(SyntheticSplits {
        train: split("train", 1, cfg.n_train),
        val: split("val", 2, cfg.n_val),
        test: split("test", 3, cfg.n_test),
    })
}
