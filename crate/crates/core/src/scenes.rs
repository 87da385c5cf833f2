//! Procedural clear scenes with synthetic depth, standing in for RGB-D
//! captures at desk scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::formation::{derive_seed, SceneSample};
use crate::image::{DepthMap, Image};

enum Shape {
    Disc { cy: f32, cx: f32, r: f32 },
    Rect { y0: f32, x0: f32, y1: f32, x1: f32 },
}

impl Shape {
    fn contains(&self, y: f32, x: f32) -> bool {
        match *self {
            Shape::Disc { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y <= y1 && x >= x0 && x <= x1,
        }
    }
}

struct Object {
    shape: Shape,
    colour: [f32; 3],
    /// Stripe period in pixels, or none for a flat fill.
    stripes: Option<f32>,
    depth: f32,
}

fn colour(rng: &mut ChaCha8Rng) -> [f32; 3] {
    [
        rng.gen_range(0.05..0.95),
        rng.gen_range(0.05..0.95),
        rng.gen_range(0.05..0.95),
    ]
}

/// Scene `index` of the family seeded by `seed`, id `scene0042` style.
/// The background is a two-colour gradient over a tilted depth plane; two
/// to four discs or rectangles sit in front of it.
pub fn procedural_scene(seed: u64, index: usize, height: usize, width: usize) -> Result<SceneSample<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[b"scene", &(index as u64).to_le_bytes()]));
    let (hf, wf) = (height as f32, width as f32);
    let top = colour(&mut rng);
    let bottom = colour(&mut rng);
    let base = rng.gen_range(2.0..6.0f32);
    let tilt_y = rng.gen_range(-2.0..4.0f32);
    let tilt_x = rng.gen_range(-1.5..1.5f32);

    let n_obj = rng.gen_range(2..=4);
    let objects: Vec<Object> = (0..n_obj)
        .map(|_| {
            let shape = if rng.gen_bool(0.5) {
                Shape::Disc {
                    cy: rng.gen_range(0.0..hf),
                    cx: rng.gen_range(0.0..wf),
                    r: rng.gen_range(0.1..0.3) * hf.min(wf),
                }
            } else {
                let (y0, x0) = (rng.gen_range(0.0..hf * 0.7), rng.gen_range(0.0..wf * 0.7));
                Shape::Rect {
                    y0,
                    x0,
                    y1: y0 + rng.gen_range(0.15..0.45) * hf,
                    x1: x0 + rng.gen_range(0.15..0.45) * wf,
                }
            };
            Object {
                shape,
                colour: colour(&mut rng),
                stripes: rng.gen_bool(0.4).then(|| rng.gen_range(3.0..8.0)),
                depth: rng.gen_range(0.5..2.5),
            }
        })
        .collect();

    let mut depth = vec![0.0f32; height * width];
    let clear = Image::from_fn(height, width, 3, |y, x, c| {
        let (yf, xf) = (y as f32 + 0.5, x as f32 + 0.5);
        let t = yf / hf;
        let mut v = top[c] * (1.0 - t) + bottom[c] * t;
        let mut d = base + tilt_y * t + tilt_x * (xf / wf - 0.5);
        // Later objects are drawn over earlier ones.
        for o in &objects {
            if o.shape.contains(yf, xf) {
                v = match o.stripes {
                    Some(p) if ((yf + xf) / p) as i32 % 2 == 0 => o.colour[c] * 0.6,
                    _ => o.colour[c],
                };
                d = o.depth;
            }
        }
        if c == 0 {
            depth[y * width + x] = d.max(0.1);
        }
        v
    });
    SceneSample::new(clear, DepthMap::new(height, width, depth)?, format!("scene{index:04}"))
}

pub fn procedural_scenes(count: usize, seed: u64, height: usize, width: usize) -> Result<Vec<SceneSample<f32>>> {
    (0..count).map(|i| procedural_scene(seed, i, height, width)).collect()
}
