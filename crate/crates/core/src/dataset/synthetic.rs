use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Sample;

pub const NUM_DETAIL_LEVELS: u8 = 10;

const SUPERSAMPLE: usize = 4;
const NOISE_FROM_LEVEL: usize = 3;

/// Renders sample `i` as a pure function of `(seed, i)`.
///
/// Labels are assigned round-robin and pick the dominant hue; the detail
/// level cycles through `0..10` once per `num_classes` samples. Level 0 is a
/// flat canvas, every further level adds shapes and band-limited noise.
#[derive(Clone, Debug)]
pub struct SyntheticGenerator {
    seed: u64,
    size: usize,
    num_classes: usize,
}

enum Shape {
    Rect {
        x0: f32,
        y0: f32,
        x1: f32,
        y1: f32,
    },
    Circle {
        cx: f32,
        cy: f32,
        r: f32,
    },
    Line {
        ax: f32,
        ay: f32,
        bx: f32,
        by: f32,
        half_width: f32,
    },
}

impl Shape {
    fn contains(&self, x: f32, y: f32) -> bool {
        match *self {
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Line {
                ax,
                ay,
                bx,
                by,
                half_width,
            } => {
                let (dx, dy) = (bx - ax, by - ay);
                let len2 = (dx * dx + dy * dy).max(1e-6);
                let t = (((x - ax) * dx + (y - ay) * dy) / len2).clamp(0.0, 1.0);
                let (px, py) = (ax + t * dx, ay + t * dy);
                (x - px).powi(2) + (y - py).powi(2) <= half_width * half_width
            }
        }
    }

    /// Fraction of the pixel at `(col, row)` covered, by supersampling.
    fn coverage(&self, col: usize, row: usize) -> f32 {
        let mut hits = 0;
        for sy in 0..SUPERSAMPLE {
            for sx in 0..SUPERSAMPLE {
                let x = col as f32 + (sx as f32 + 0.5) / SUPERSAMPLE as f32;
                let y = row as f32 + (sy as f32 + 0.5) / SUPERSAMPLE as f32;
                if self.contains(x, y) {
                    hits += 1;
                }
            }
        }
        hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

impl SyntheticGenerator {
    pub fn new(seed: u64, size: usize, num_classes: usize) -> Self {
        SyntheticGenerator {
            seed,
            size,
            num_classes,
        }
    }

    pub fn label_of(&self, index: u64) -> usize {
        (index % self.num_classes as u64) as usize
    }

    pub fn detail_of(&self, index: u64) -> u8 {
        ((index / self.num_classes as u64) % NUM_DETAIL_LEVELS as u64) as u8
    }

    fn rng_for(&self, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        rng
    }

    pub fn sample(&self, index: u64) -> Sample {
        let label = self.label_of(index);
        let detail = self.detail_of(index);
        let mut rng = self.rng_for(index);
        let n = self.size;
        let hue = label as f32 / self.num_classes as f32;

        // RGB planes in [0, 1]
        let bg = hsv_to_rgb(
            hue + rng.gen_range(-0.02..0.02),
            rng.gen_range(0.45..0.75),
            rng.gen_range(0.45..0.75),
        );
        let mut img = vec![0.0f32; 3 * n * n];
        for c in 0..3 {
            img[c * n * n..(c + 1) * n * n].fill(bg[c]);
        }

        let d = detail as usize;
        let sz = n as f32;
        for _ in 0..(3 * d) {
            let color = hsv_to_rgb(
                hue + rng.gen_range(-0.12..0.12),
                rng.gen_range(0.2..1.0),
                rng.gen_range(0.1..1.0),
            );
            // higher levels draw smaller, denser shapes
            let scale = sz * (0.5 - 0.035 * d as f32);
            let shape = match rng.gen_range(0..3) {
                0 => {
                    let (x0, y0) = (rng.gen_range(-0.1 * sz..sz), rng.gen_range(-0.1 * sz..sz));
                    Shape::Rect {
                        x0,
                        y0,
                        x1: x0 + rng.gen_range(0.15..1.0) * scale,
                        y1: y0 + rng.gen_range(0.15..1.0) * scale,
                    }
                }
                1 => Shape::Circle {
                    cx: rng.gen_range(0.0..sz),
                    cy: rng.gen_range(0.0..sz),
                    r: rng.gen_range(0.1..0.6) * scale,
                },
                _ => Shape::Line {
                    ax: rng.gen_range(0.0..sz),
                    ay: rng.gen_range(0.0..sz),
                    bx: rng.gen_range(0.0..sz),
                    by: rng.gen_range(0.0..sz),
                    half_width: rng.gen_range(0.4..1.5),
                },
            };
            for row in 0..n {
                for col in 0..n {
                    let a = shape.coverage(col, row);
                    if a > 0.0 {
                        for (c, &v) in color.iter().enumerate() {
                            let p = &mut img[c * n * n + row * n + col];
                            *p = *p * (1.0 - a) + v * a;
                        }
                    }
                }
            }
        }

        if d > NOISE_FROM_LEVEL {
            // band-limited noise: a coarse random grid, bilinearly upsampled
            let amplitude = 0.003 * (d - NOISE_FROM_LEVEL) as f32;
            let grid = 1 + d;
            for c in 0..3 {
                let cells: Vec<f32> = (0..(grid + 1) * (grid + 1))
                    .map(|_| rng.gen_range(-1.0..1.0))
                    .collect();
                for row in 0..n {
                    let gy = row as f32 / n as f32 * grid as f32;
                    let (y0, ty) = (gy.floor() as usize, gy.fract());
                    for col in 0..n {
                        let gx = col as f32 / n as f32 * grid as f32;
                        let (x0, tx) = (gx.floor() as usize, gx.fract());
                        let at = |y: usize, x: usize| cells[y * (grid + 1) + x];
                        let v = at(y0, x0) * (1.0 - tx) * (1.0 - ty)
                            + at(y0, x0 + 1) * tx * (1.0 - ty)
                            + at(y0 + 1, x0) * (1.0 - tx) * ty
                            + at(y0 + 1, x0 + 1) * tx * ty;
                        img[c * n * n + row * n + col] += amplitude * v;
                    }
                }
            }
        }

        let pixels = img
            .iter()
            .map(|&v| (v * 2.0 - 1.0).clamp(-1.0, 1.0))
            .collect();
        Sample {
            id: index,
            label,
            detail_level: Some(detail),
            pixels,
        }
    }
}
