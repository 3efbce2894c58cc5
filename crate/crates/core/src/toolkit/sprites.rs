//! Procedural stick-figure sprites: a seeded identity (palette and
//! accessories) drawn along a COCO skeleton, with alpha equal to the body
//! mask. All colours are multiples of 1/255 so PNG roundtrips are exact.

use std::collections::BTreeSet;

use ndarray::{Array3, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{ImageRGBA, DEFAULT_IMAGE_SIZE};
use crate::control::{bresenham, PoseSpec, NUM_KEYPOINTS};
use crate::tensor::rng_for;
use crate::{Error, Result};

const PALETTE: [(&str, [u8; 3]); 10] = [
    ("red", [204, 40, 40]),
    ("orange", [230, 130, 30]),
    ("yellow", [235, 210, 50]),
    ("green", [50, 160, 70]),
    ("teal", [30, 150, 150]),
    ("blue", [40, 80, 200]),
    ("purple", [130, 60, 180]),
    ("pink", [230, 120, 170]),
    ("brown", [120, 75, 40]),
    ("grey", [128, 128, 128]),
];

const SKIN_LIGHT: [u8; 3] = [250, 218, 185];
const SKIN_DARK: [u8; 3] = [100, 65, 40];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Identity {
    pub skin: [u8; 3],
    pub shirt: usize,
    pub pants: usize,
    pub hair: usize,
    pub eyes: usize,
    pub hat: Option<usize>,
    pub belt: bool,
}

impl Identity {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = rng_for(seed, "sprite.identity");
        let tone: u32 = rng.random_range(0..=255);
        let skin = [0, 1, 2].map(|c| {
            let (l, d) = (u32::from(SKIN_LIGHT[c]), u32::from(SKIN_DARK[c]));
            ((l * (255 - tone) + d * tone) / 255) as u8
        });
        let shirt = rng.random_range(0..PALETTE.len());
        let pants = (shirt + rng.random_range(1..PALETTE.len())) % PALETTE.len();
        let hair = rng.random_range(0..PALETTE.len());
        let eyes = rng.random_range(0..PALETTE.len());
        let hat = rng.random_bool(0.4).then(|| rng.random_range(0..PALETTE.len()));
        let belt = rng.random_bool(0.5);
        Self {
            skin,
            shirt,
            pants,
            hair,
            eyes,
            hat,
            belt,
        }
    }

    /// Appearance text with a `<face>` slot.
    pub fn describe(&self) -> String {
        let mut s = format!(
            "a sprite person with a <face> wearing a {} shirt and {} pants with {} hair and {} eyes",
            PALETTE[self.shirt].0, PALETTE[self.pants].0, PALETTE[self.hair].0, PALETTE[self.eyes].0
        );
        if let Some(h) = self.hat {
            s.push_str(&format!(" and a {} hat", PALETTE[h].0));
        }
        if self.belt {
            s.push_str(" and a black belt");
        }
        s
    }

    /// Every colour the renderer may use for this identity.
    pub fn colors(&self) -> BTreeSet<[u8; 3]> {
        let mut c = BTreeSet::from([
            self.skin,
            PALETTE[self.shirt].1,
            PALETTE[self.pants].1,
            PALETTE[self.hair].1,
            PALETTE[self.eyes].1,
        ]);
        if let Some(h) = self.hat {
            c.insert(PALETTE[h].1);
        }
        if self.belt {
            c.insert(BELT);
        }
        c
    }
}

const BELT: [u8; 3] = [20, 20, 20];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpriteSpec {
    pub identity_seed: u64,
    pub pose: PoseSpec,
    pub size: usize,
}

impl SpriteSpec {
    pub fn new(identity_seed: u64, pose: PoseSpec) -> Self {
        Self {
            identity_seed,
            pose,
            size: DEFAULT_IMAGE_SIZE,
        }
    }
}

/// A standing pose with seeded limb angles and a small horizontal shift.
pub fn random_pose(seed: u64) -> PoseSpec {
    let mut rng = rng_for(seed, "sprite.pose");
    let shift: f64 = rng.random_range(-0.06..0.06);
    let cx = 0.5 + shift;
    let mut k = vec![[0.0, 0.0, 1.0]; NUM_KEYPOINTS];
    let mut set = |j: usize, x: f64, y: f64| k[j] = [x.clamp(0.02, 0.98), y.clamp(0.02, 0.98), 1.0];
    set(0, cx, 0.17);
    set(1, cx - 0.03, 0.15);
    set(2, cx + 0.03, 0.15);
    set(3, cx - 0.06, 0.17);
    set(4, cx + 0.06, 0.17);
    let (ls, rs) = ((cx - 0.12, 0.31), (cx + 0.12, 0.31));
    set(5, ls.0, ls.1);
    set(6, rs.0, rs.1);
    let (lh, rh) = ((cx - 0.08, 0.58), (cx + 0.08, 0.58));
    set(11, lh.0, lh.1);
    set(12, rh.0, rh.1);
    // (joint, parent, side): angles from straight down, positive outwards
    let limb = |rng: &mut rand_chacha::ChaCha8Rng, from: (f64, f64), side: f64, lo: f64, hi: f64, l1: f64, l2: f64| {
        let a1: f64 = rng.random_range(lo..hi);
        let a2: f64 = a1 + rng.random_range(-0.6..0.6);
        let p1 = (from.0 + side * l1 * a1.sin(), from.1 + l1 * a1.cos());
        let p2 = (p1.0 + side * l2 * a2.sin(), p1.1 + l2 * a2.cos());
        (p1, p2)
    };
    let (le, lw) = limb(&mut rng, ls, -1.0, -0.3, 1.6, 0.14, 0.13);
    let (re, rw) = limb(&mut rng, rs, 1.0, -0.3, 1.6, 0.14, 0.13);
    let (lk, la) = limb(&mut rng, lh, -1.0, -0.1, 0.5, 0.18, 0.17);
    let (rk, ra) = limb(&mut rng, rh, 1.0, -0.1, 0.5, 0.18, 0.17);
    for (j, p) in [(7, le), (9, lw), (8, re), (10, rw), (13, lk), (15, la), (14, rk), (16, ra)] {
        set(j, p.0, p.1);
    }
    PoseSpec { keypoints: k }
}

struct Canvas {
    size: usize,
    rgb: Array3<u8>,
    alpha: Vec<bool>,
}

impl Canvas {
    fn new(size: usize) -> Self {
        Self {
            size,
            rgb: Array3::zeros((3, size, size)),
            alpha: vec![false; size * size],
        }
    }

    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if (0..self.size as i64).contains(&x) && (0..self.size as i64).contains(&y) {
            let (x, y) = (x as usize, y as usize);
            for (ch, v) in c.iter().enumerate() {
                self.rgb[[ch, y, x]] = *v;
            }
            self.alpha[y * self.size + x] = true;
        }
    }

    fn stamp(&mut self, x: i64, y: i64, r: i64, c: [u8; 3]) {
        for dy in -r..=r {
            for dx in -r..=r {
                self.put(x + dx, y + dy, c);
            }
        }
    }

    fn thick_line(&mut self, a: (i64, i64), b: (i64, i64), r: i64, c: [u8; 3]) {
        for (x, y) in bresenham(a.0, a.1, b.0, b.1) {
            self.stamp(x, y, r, c);
        }
    }

    fn disk(&mut self, cx: i64, cy: i64, r: i64, c: [u8; 3]) {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy <= r * r {
                    self.put(cx + dx, cy + dy, c);
                }
            }
        }
    }

    /// Scanline fill of a convex quadrilateral.
    fn quad(&mut self, pts: [(i64, i64); 4], c: [u8; 3]) {
        let ymin = pts.iter().map(|p| p.1).min().expect("four points");
        let ymax = pts.iter().map(|p| p.1).max().expect("four points");
        for y in ymin..=ymax {
            let mut xs = Vec::new();
            for i in 0..4 {
                let (p, q) = (pts[i], pts[(i + 1) % 4]);
                if (p.1 <= y && q.1 >= y) || (q.1 <= y && p.1 >= y) {
                    if p.1 == q.1 {
                        xs.push(p.0);
                        xs.push(q.0);
                    } else {
                        let num = (y - p.1) * (q.0 - p.0);
                        xs.push(p.0 + num / (q.1 - p.1));
                    }
                }
            }
            if let (Some(&lo), Some(&hi)) = (xs.iter().min(), xs.iter().max()) {
                for x in lo..=hi {
                    self.put(x, y, c);
                }
            }
        }
    }

    fn into_image(self) -> ImageRGBA {
        let s = self.size;
        let mut px = ArrayD::zeros(IxDyn(&[1, 4, s, s]));
        for y in 0..s {
            for x in 0..s {
                if self.alpha[y * s + x] {
                    for c in 0..3 {
                        px[[0, c, y, x]] = f64::from(self.rgb[[c, y, x]]) / 255.0;
                    }
                    px[[0, 3, y, x]] = 1.0;
                }
            }
        }
        ImageRGBA::new(px).expect("sprite pixels are in range")
    }
}

/// Renders the sprite and returns it with its ground-truth pose.
pub fn generate_sprite(spec: &SpriteSpec) -> Result<(ImageRGBA, PoseSpec)> {
    spec.pose.validate()?;
    if spec.size < 16 || spec.size % 4 != 0 {
        return Err(Error::config(format!("sprite size {} must be a multiple of 4, at least 16", spec.size)));
    }
    let id = Identity::from_seed(spec.identity_seed);
    let s = spec.size;
    let p = &spec.pose;
    let px = |j: usize| {
        let k = p.keypoints[j];
        (
            (k[0] * (s - 1) as f64).round() as i64,
            (k[1] * (s - 1) as f64).round() as i64,
        )
    };
    let vis = |j: usize| p.visible(j);
    let unit = (s as i64 / 32).max(1);
    let shirt = PALETTE[id.shirt].1;
    let pants = PALETTE[id.pants].1;
    let hair = PALETTE[id.hair].1;
    let mut c = Canvas::new(s);

    for (a, b) in [(11, 13), (13, 15), (12, 14), (14, 16)] {
        if vis(a) && vis(b) {
            c.thick_line(px(a), px(b), unit, pants);
        }
    }
    if [5, 6, 11, 12].iter().all(|&j| vis(j)) {
        c.quad([px(5), px(6), px(12), px(11)], shirt);
        if id.belt {
            c.thick_line(px(11), px(12), 0, BELT);
        }
    }
    for (a, b) in [(5, 7), (7, 9), (6, 8), (8, 10)] {
        if vis(a) && vis(b) {
            c.thick_line(px(a), px(b), unit, shirt);
        }
    }
    for j in [9, 10] {
        if vis(j) {
            c.stamp(px(j).0, px(j).1, unit, id.skin);
        }
    }
    if vis(0) {
        let (hx, hy) = px(0);
        let r = 3 * unit;
        c.disk(hx, hy, r, id.skin);
        for dy in 0..=r / 2 {
            for dx in -r..=r {
                if dx * dx + (r - dy) * (r - dy) <= r * r + r {
                    c.put(hx + dx, hy - r + dy, hair);
                }
            }
        }
        let eyes = PALETTE[id.eyes].1;
        c.put(hx - unit, hy - unit / 2, eyes);
        c.put(hx + unit, hy - unit / 2, eyes);
        if let Some(h) = id.hat {
            let hat = PALETTE[h].1;
            for dy in 0..2 * unit {
                for dx in -r - 1..=r + 1 {
                    c.put(hx + dx, hy - r - 1 - dy, hat);
                }
            }
        }
    }
    Ok((c.into_image(), p.clone()))
}

/// Seeded vertical gradient background `[3, size, size]`, quantized to 1/255.
pub fn background(seed: u64, size: usize) -> ndarray::Array3<f64> {
    let mut rng = rng_for(seed, "sprite.background");
    let top: [u8; 3] = [rng.random_range(0..256u32) as u8, rng.random_range(0..256u32) as u8, rng.random_range(0..256u32) as u8];
    let bottom: [u8; 3] = [rng.random_range(0..256u32) as u8, rng.random_range(0..256u32) as u8, rng.random_range(0..256u32) as u8];
    let mut out = Array3::zeros((3, size, size));
    for y in 0..size {
        for c in 0..3 {
            let (a, b) = (i64::from(top[c]), i64::from(bottom[c]));
            let v = a + (b - a) * y as i64 / (size as i64 - 1).max(1);
            for x in 0..size {
                out[[c, y, x]] = v as f64 / 255.0;
            }
        }
    }
    out
}

/// One evaluation pair: the same identity in a source and a target pose.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub id: String,
    pub identity_seed: u64,
    pub description: String,
    pub source: ImageRGBA,
    pub source_pose: PoseSpec,
    pub target: ImageRGBA,
    pub target_pose: PoseSpec,
    pub background: Array3<f64>,
}

pub fn fixture(index: usize, seed: u64, size: usize) -> Result<Fixture> {
    let identity_seed = seed.wrapping_mul(1_000_003).wrapping_add(index as u64);
    let source_pose = random_pose(identity_seed.wrapping_mul(2));
    let target_pose = random_pose(identity_seed.wrapping_mul(2).wrapping_add(1));
    let (source, _) = generate_sprite(&SpriteSpec {
        identity_seed,
        pose: source_pose.clone(),
        size,
    })?;
    let (target, _) = generate_sprite(&SpriteSpec {
        identity_seed,
        pose: target_pose.clone(),
        size,
    })?;
    Ok(Fixture {
        id: format!("pair{index:03}"),
        identity_seed,
        description: Identity::from_seed(identity_seed).describe(),
        source,
        source_pose,
        target,
        target_pose,
        background: background(identity_seed, size),
    })
}

pub fn fixture_set(count: usize, seed: u64, size: usize) -> Result<Vec<Fixture>> {
    (0..count).map(|i| fixture(i, seed, size)).collect()
}

/// The canonical tuning fixture.
pub fn sprite_fixture() -> Fixture {
    fixture(0, 0, DEFAULT_IMAGE_SIZE).expect("default fixture renders")
}
