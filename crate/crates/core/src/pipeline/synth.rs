//! Synthetic unregistered visible/infrared pairs with fire- and smoke-like objects.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::boxes::{BBox, GroundTruthBox};
use crate::image::GrayImage;

pub const SMOKE: usize = 0;
pub const FIRE: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parallax {
    None,
    Small,
    Large,
}

impl Parallax {
    /// Bound on `|dx|` and `|dy|` in pixels.
    pub fn max_offset(self) -> i32 {
        match self {
            Parallax::None => 0,
            Parallax::Small => 2,
            Parallax::Large => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub image_size: usize,
    pub parallax: Parallax,
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub infrared_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            parallax: Parallax::Large,
            min_objects: 1,
            max_objects: 3,
            min_radius: 5.0,
            max_radius: 11.0,
            infrared_noise: 0.02,
        }
    }
}

/// An elliptical object; `theta` orients the smoke gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthObject {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub theta: f64,
}

impl SynthObject {
    /// Intensity profile at a point; positive exactly inside the ellipse.
    pub fn weight(&self, px: f64, py: f64) -> f64 {
        let (u, v) = ((px - self.cx) / self.rx, (py - self.cy) / self.ry);
        let r2 = u * u + v * v;
        if r2 >= 1.0 {
            return 0.0;
        }
        if self.class_id == FIRE {
            (1.0 - r2) * (1.0 - r2)
        } else {
            let along = (px - self.cx) * self.theta.cos() + (py - self.cy) * self.theta.sin();
            let t = 0.5 + 0.5 * along / self.rx.max(self.ry);
            (1.0 - r2).sqrt() * (0.4 + 0.6 * t)
        }
    }

    /// Weight sampled at the center of pixel `(x, y)`.
    pub fn pixel_weight(&self, x: usize, y: usize) -> f64 {
        self.weight(x as f64 + 0.5, y as f64 + 0.5)
    }

    pub fn bbox(&self) -> BBox {
        BBox {
            x1: (self.cx - self.rx).floor(),
            y1: (self.cy - self.ry).floor(),
            x2: (self.cx + self.rx).ceil(),
            y2: (self.cy + self.ry).ceil(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub visible: GrayImage,
    pub infrared: GrayImage,
    pub boxes: Vec<GroundTruthBox>,
    pub objects: Vec<SynthObject>,
    pub parallax: (i32, i32),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Per-sample seed derived from the run seed, the split and the index.
pub fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    let tag = match split {
        Split::Train => 0x7472_6169_6e00_0000u64,
        Split::Test => 0x7465_7374_0000_0000u64,
    };
    let mut z = seed ^ tag ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn dataset(seed: u64, split: Split, count: usize, cfg: &SynthConfig) -> Vec<SynthSample> {
    (0..count).map(|i| synth_pair(sample_seed(seed, split, i), cfg)).collect()
}

struct Texture {
    waves: [(f64, f64, f64, f64); 3],
    base: f64,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, base: f64, amp: f64) -> Self {
        let mut wave = |a: f64| {
            let ang = rng.random_range(0.0..std::f64::consts::TAU);
            let freq = rng.random_range(0.08..0.45);
            (freq * ang.cos(), freq * ang.sin(), rng.random_range(0.0..std::f64::consts::TAU), a)
        };
        Self {
            waves: [wave(amp), wave(amp * 0.6), wave(amp * 0.4)],
            base,
        }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        self.base + self.waves.iter().map(|(fx, fy, ph, a)| a * (fx * x + fy * y + ph).sin()).sum::<f64>()
    }
}

fn place_objects(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Vec<SynthObject> {
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects.max(cfg.min_objects));
    let size = cfg.image_size as f64;
    let max_r = cfg.max_radius.min(size / 2.0 - 1.5).max(cfg.min_radius);
    let mut objects: Vec<SynthObject> = Vec::with_capacity(n);
    for _ in 0..n {
        for _ in 0..100 {
            let rx = rng.random_range(cfg.min_radius..=max_r);
            let ry = rng.random_range(cfg.min_radius..=max_r);
            let obj = SynthObject {
                class_id: rng.random_range(0..2),
                cx: rng.random_range(rx + 1.0..=size - rx - 1.0),
                cy: rng.random_range(ry + 1.0..=size - ry - 1.0),
                rx,
                ry,
                theta: rng.random_range(0.0..std::f64::consts::TAU),
            };
            let b = obj.bbox();
            let clear = objects.iter().all(|o| {
                let c = o.bbox();
                b.x1 >= c.x2 + 2.0 || c.x1 >= b.x2 + 2.0 || b.y1 >= c.y2 + 2.0 || c.y1 >= b.y2 + 2.0
            });
            if clear {
                objects.push(obj);
                break;
            }
        }
    }
    objects
}

fn render(
    size: usize,
    objects: &[SynthObject],
    offset: (i32, i32),
    texture: &Texture,
    paint: impl Fn(f64, &SynthObject, f64) -> f64,
) -> GrayImage {
    let mut img = GrayImage::filled(size, size, 0.0);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v = texture.at(px, py);
            for o in objects {
                let w = o.weight(px - offset.0 as f64, py - offset.1 as f64);
                if w > 0.0 {
                    v = paint(v, o, w);
                }
            }
            img.set(x, y, v);
        }
    }
    img
}

/// Draws the objects with an explicit infrared offset.
pub fn synth_pair_with_offset(seed: u64, cfg: &SynthConfig, offset: (i32, i32)) -> SynthSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = place_objects(&mut rng, cfg);
    synthesize(&mut rng, cfg, objects, offset)
}

pub fn synth_pair(seed: u64, cfg: &SynthConfig) -> SynthSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let objects = place_objects(&mut rng, cfg);
    let m = cfg.parallax.max_offset();
    let offset = (rng.random_range(-m..=m), rng.random_range(-m..=m));
    synthesize(&mut rng, cfg, objects, offset)
}

fn synthesize(rng: &mut ChaCha8Rng, cfg: &SynthConfig, objects: Vec<SynthObject>, offset: (i32, i32)) -> SynthSample {
    let size = cfg.image_size;
    let vis_tex = Texture::random(rng, 0.35, 0.08);
    let ir_tex = Texture::random(rng, 0.18, 0.04);
    let visible = render(size, &objects, (0, 0), &vis_tex, |v, o, w| {
        if o.class_id == FIRE {
            v + (0.97 - v) * w
        } else {
            v + (0.68 - v) * 0.85 * w
        }
    });
    let mut infrared = render(size, &objects, offset, &ir_tex, |v, o, w| {
        if o.class_id == FIRE {
            v + (1.0 - v) * w
        } else {
            v + 0.12 * w
        }
    });
    let noise = Normal::new(0.0, cfg.infrared_noise.max(0.0)).expect("finite sigma");
    infrared.data.iter_mut().for_each(|v| *v += noise.sample(rng));
    let clamp = |img: &mut GrayImage| img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    let mut visible = visible;
    clamp(&mut visible);
    clamp(&mut infrared);
    let boxes = objects
        .iter()
        .map(|o| GroundTruthBox {
            class_id: o.class_id,
            bbox: o.bbox(),
        })
        .collect();
    SynthSample {
        visible,
        infrared,
        boxes,
        objects,
        parallax: offset,
    }
}
