//! Procedural garment / character pairs with exact masks and attribute
//! tokens.
//!
//! Geometry is specified in unit coordinates (fractions of the image side),
//! so every renderer works at any size. The character's garment is the
//! garment image resampled (nearest neighbour) under a fixed affine warp per
//! pose, which gives exact ground-truth correspondence.

use crate::error::{Error, Result};
use crate::image::{Mask, RgbImage};
use crate::tensor::SeededRng;

pub const PALETTE: [[u8; 3]; 8] = [
    [200, 40, 40],
    [40, 70, 200],
    [235, 205, 40],
    [40, 160, 70],
    [240, 130, 30],
    [130, 50, 170],
    [245, 245, 245],
    [25, 25, 25],
];
pub const GARMENT_BACKGROUND: [u8; 3] = [128, 128, 128];
pub const BACKGROUNDS: [[u8; 3]; 4] = [[140, 195, 240], [225, 200, 150], [165, 230, 175], [240, 175, 205]];
pub const SKIN_TONES: [[u8; 3]; 3] = [[250, 215, 185], [205, 150, 110], [125, 80, 50]];
pub const HAT_COLOR: [u8; 3] = [95, 60, 35];
pub const BAG_COLOR: [u8; 3] = [55, 95, 115];
pub const PANTS_COLOR: [u8; 3] = [70, 70, 85];

pub const POSES: usize = 4;
pub const ACCESSORIES: usize = 3;

/// First token id of each attribute; 0 is the null token.
pub const POSE_TOKEN: usize = 1;
pub const BACKGROUND_TOKEN: usize = POSE_TOKEN + POSES;
pub const ACCESSORY_TOKEN: usize = BACKGROUND_TOKEN + BACKGROUNDS.len();
pub const SKIN_TOKEN: usize = ACCESSORY_TOKEN + ACCESSORIES;
pub const VOCAB_SIZE: usize = SKIN_TOKEN + SKIN_TONES.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Pattern {
    Stripes,
    Checker,
    Dots,
    Glyph,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [Pattern::Stripes, Pattern::Checker, Pattern::Dots, Pattern::Glyph];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Silhouette {
    Tee,
    Vest,
}

impl Silhouette {
    pub const ALL: [Silhouette; 2] = [Silhouette::Tee, Silhouette::Vest];

    /// Whether unit point `(x, y)` lies inside the garment.
    fn contains(self, x: f64, y: f64) -> bool {
        match self {
            Silhouette::Tee => {
                let torso = (0.30..0.70).contains(&x) && (0.25..0.85).contains(&y);
                let sleeves = (0.25..0.45).contains(&y) && ((0.12..0.30).contains(&x) || (0.70..0.88).contains(&x));
                let neck = (x - 0.5).powi(2) + (y - 0.25).powi(2) < 0.08f64.powi(2);
                (torso || sleeves) && !neck
            }
            Silhouette::Vest => {
                let torso = (0.32..0.68).contains(&x) && (0.20..0.85).contains(&y);
                let dx = (x - 0.5).abs();
                let v_neck = dx < 0.12 && y < 0.40 - dx * (0.20 / 0.12);
                torso && !v_neck
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GarmentSpec {
    pub pattern: Pattern,
    /// Indices into [`PALETTE`].
    pub colors: [usize; 2],
    pub silhouette: Silhouette,
    /// Pattern period in pixels at 32 px image size.
    pub scale: usize,
    /// Pattern offset in quarter periods, `0..4`.
    pub phase: usize,
}

impl GarmentSpec {
    pub fn validate(&self) -> Result<()> {
        let [a, b] = self.colors;
        if a >= PALETTE.len() || b >= PALETTE.len() || a == b {
            return Err(Error::Config(format!("invalid garment palette {:?}", self.colors)));
        }
        if !(2..=8).contains(&self.scale) || self.phase >= 4 {
            return Err(Error::Config(format!(
                "invalid pattern scale {} / phase {}",
                self.scale, self.phase
            )));
        }
        Ok(())
    }

    /// Pattern bit at continuous pixel position `(u, v)` of a `size` canvas.
    fn bit(&self, u: f64, v: f64, size: usize) -> bool {
        let period = self.scale as f64 * size as f64 / 32.0;
        let phase = self.phase as f64 / 4.0;
        let (pu, pv) = (u / period + phase, v / period + phase);
        match self.pattern {
            Pattern::Stripes => pv.floor() as i64 % 2 == 0,
            Pattern::Checker => (pu.floor() as i64 + pv.floor() as i64) % 2 == 0,
            Pattern::Dots => {
                let (fu, fv) = (pu - pu.floor(), pv - pv.floor());
                (fu - 0.5).powi(2) + (fv - 0.5).powi(2) < 0.1
            }
            Pattern::Glyph => {
                // a "T" in a 4x4 cell spanning two periods
                const GLYPH: [[bool; 4]; 4] = [
                    [true, true, true, false],
                    [false, true, false, false],
                    [false, true, false, false],
                    [false, false, false, false],
                ];
                let gu = ((pu / 2.0).fract() * 4.0) as usize;
                let gv = ((pv / 2.0).fract() * 4.0) as usize;
                GLYPH[gv.min(3)][gu.min(3)]
            }
        }
    }

    fn color(&self, u: f64, v: f64, size: usize) -> [u8; 3] {
        PALETTE[self.colors[usize::from(!self.bit(u, v, size))]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CharacterSpec {
    pub pose: usize,
    pub background: usize,
    /// 0 none, 1 hat, 2 bag.
    pub accessory: usize,
    pub skin: usize,
}

impl CharacterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.pose >= POSES
            || self.background >= BACKGROUNDS.len()
            || self.accessory >= ACCESSORIES
            || self.skin >= SKIN_TONES.len()
        {
            return Err(Error::Config(format!("character ids out of range: {self:?}")));
        }
        Ok(())
    }

    pub fn tokens(&self) -> Vec<usize> {
        vec![
            POSE_TOKEN + self.pose,
            BACKGROUND_TOKEN + self.background,
            ACCESSORY_TOKEN + self.accessory,
            SKIN_TOKEN + self.skin,
        ]
    }

    pub fn from_tokens(tokens: &[usize]) -> Result<Self> {
        let bad = || Error::Config(format!("not a caption: {tokens:?}"));
        let &[p, b, a, s] = tokens else {
            return Err(bad());
        };
        let spec = CharacterSpec {
            pose: p.checked_sub(POSE_TOKEN).ok_or_else(bad)?,
            background: b.checked_sub(BACKGROUND_TOKEN).ok_or_else(bad)?,
            accessory: a.checked_sub(ACCESSORY_TOKEN).ok_or_else(bad)?,
            skin: s.checked_sub(SKIN_TOKEN).ok_or_else(bad)?,
        };
        spec.validate().map_err(|_| bad())?;
        if spec.tokens() != tokens {
            return Err(bad());
        }
        Ok(spec)
    }
}

/// Affine map from garment canvas to character, in unit coordinates:
/// `p' = m (p - c) + c + t` with `c` the canvas centre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Warp {
    pub m: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Warp {
    pub fn for_pose(pose: usize) -> Warp {
        let rot = |deg: f64, s: f64| {
            let (sn, cs) = deg.to_radians().sin_cos();
            [[s * cs, -s * sn], [s * sn, s * cs]]
        };
        match pose {
            0 => Warp {
                m: rot(0.0, 0.9),
                t: [0.0, 0.04],
            },
            1 => Warp {
                m: rot(7.0, 0.9),
                t: [-0.03, 0.04],
            },
            2 => Warp {
                m: rot(-7.0, 0.9),
                t: [0.03, 0.04],
            },
            _ => Warp {
                m: [[1.0, 0.1], [0.0, 0.85]],
                t: [0.0, 0.06],
            },
        }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - 0.5, y - 0.5);
        (
            self.m[0][0] * dx + self.m[0][1] * dy + 0.5 + self.t[0],
            self.m[1][0] * dx + self.m[1][1] * dy + 0.5 + self.t[1],
        )
    }

    pub fn invert(&self, x: f64, y: f64) -> (f64, f64) {
        let [[a, b], [c, d]] = self.m;
        let det = a * d - b * c;
        let (dx, dy) = (x - 0.5 - self.t[0], y - 0.5 - self.t[1]);
        ((d * dx - b * dy) / det + 0.5, (-c * dx + a * dy) / det + 0.5)
    }
}

fn unit(i: usize, size: usize) -> f64 {
    (i as f64 + 0.5) / size as f64
}

pub fn render_garment(spec: &GarmentSpec, size: usize) -> Result<(RgbImage, Mask)> {
    spec.validate()?;
    if size < 8 {
        return Err(Error::Config(format!("image size {size} too small")));
    }
    let mut img = RgbImage::new(size, size, GARMENT_BACKGROUND);
    let mut mask = Mask::new(size, size);
    for r in 0..size {
        for c in 0..size {
            if spec.silhouette.contains(unit(c, size), unit(r, size)) {
                img.set(r, c, spec.color(c as f64 + 0.5, r as f64 + 0.5, size));
                mask.set(r, c, true);
            }
        }
    }
    Ok((img, mask))
}

fn fill(img: &mut RgbImage, x: (f64, f64), y: (f64, f64), color: [u8; 3]) {
    let s = img.width;
    for r in 0..img.height {
        for c in 0..s {
            let (u, v) = (unit(c, s), unit(r, s));
            if (x.0..x.1).contains(&u) && (y.0..y.1).contains(&v) {
                img.set(r, c, color);
            }
        }
    }
}

fn head_offset(pose: usize) -> f64 {
    match pose {
        1 => -0.03,
        2 => 0.03,
        _ => 0.0,
    }
}

/// Arm rectangles `(x range, y range)` per pose.
fn arms(pose: usize) -> [((f64, f64), (f64, f64)); 2] {
    match pose {
        0 => [((0.18, 0.26), (0.40, 0.70)), ((0.74, 0.82), (0.40, 0.70))],
        1 => [((0.10, 0.18), (0.12, 0.42)), ((0.74, 0.82), (0.40, 0.70))],
        2 => [((0.18, 0.26), (0.40, 0.70)), ((0.82, 0.90), (0.12, 0.42))],
        _ => [((0.05, 0.30), (0.36, 0.44)), ((0.70, 0.95), (0.36, 0.44))],
    }
}

pub fn render_character(cspec: &CharacterSpec, gspec: &GarmentSpec, size: usize) -> Result<(RgbImage, Mask)> {
    cspec.validate()?;
    let (garment, gmask) = render_garment(gspec, size)?;
    let skin = SKIN_TONES[cspec.skin];
    let mut img = RgbImage::new(size, size, BACKGROUNDS[cspec.background]);
    fill(&mut img, (0.38, 0.47), (0.75, 0.94), PANTS_COLOR);
    fill(&mut img, (0.53, 0.62), (0.75, 0.94), PANTS_COLOR);
    for (x, y) in arms(cspec.pose) {
        fill(&mut img, x, y, skin);
    }
    let hx = 0.5 + head_offset(cspec.pose);
    for r in 0..size {
        for c in 0..size {
            if (unit(c, size) - hx).powi(2) + (unit(r, size) - 0.18).powi(2) < 0.09f64.powi(2) {
                img.set(r, c, skin);
            }
        }
    }
    match cspec.accessory {
        1 => {
            fill(&mut img, (hx - 0.10, hx + 0.10), (0.03, 0.10), HAT_COLOR);
            fill(&mut img, (hx - 0.14, hx + 0.14), (0.09, 0.12), HAT_COLOR);
        }
        2 => fill(&mut img, (0.78, 0.93), (0.56, 0.74), BAG_COLOR),
        _ => {}
    }
    // garment last, so the mask is exactly the garment draw
    let warp = Warp::for_pose(cspec.pose);
    let mut mask = Mask::new(size, size);
    for r in 0..size {
        for c in 0..size {
            let (u, v) = warp.invert(unit(c, size), unit(r, size));
            let (gc, gr) = ((u * size as f64).floor(), (v * size as f64).floor());
            if gmask.get_signed(gr as isize, gc as isize) {
                img.set(r, c, garment.get(gr as usize, gc as usize));
                mask.set(r, c, true);
            }
        }
    }
    Ok((img, mask))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub garment_spec: GarmentSpec,
    pub character_spec: CharacterSpec,
    pub garment: RgbImage,
    pub garment_mask: Mask,
    pub character: RgbImage,
    pub character_mask: Mask,
    pub tokens: Vec<usize>,
}

pub fn random_garment(rng: &mut SeededRng) -> GarmentSpec {
    let a = rng.below(PALETTE.len());
    let b = (a + 1 + rng.below(PALETTE.len() - 1)) % PALETTE.len();
    GarmentSpec {
        pattern: Pattern::ALL[rng.below(4)],
        colors: [a, b],
        silhouette: Silhouette::ALL[rng.below(2)],
        scale: 3 + rng.below(2),
        phase: rng.below(4),
    }
}

pub fn random_character(rng: &mut SeededRng) -> CharacterSpec {
    CharacterSpec {
        pose: rng.below(POSES),
        background: rng.below(BACKGROUNDS.len()),
        accessory: rng.below(ACCESSORIES),
        skin: rng.below(SKIN_TONES.len()),
    }
}

pub fn make_sample(g: GarmentSpec, c: CharacterSpec, size: usize) -> Result<PairedSample> {
    let (garment, garment_mask) = render_garment(&g, size)?;
    let (character, character_mask) = render_character(&c, &g, size)?;
    Ok(PairedSample {
        garment_spec: g,
        character_spec: c,
        garment,
        garment_mask,
        character,
        character_mask,
        tokens: c.tokens(),
    })
}

/// `n` samples; item `i` draws from its own split of the seed, so any
/// prefix of a larger dataset equals the smaller dataset.
pub fn make_dataset(n: usize, seed: u64, size: usize) -> Result<Vec<PairedSample>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be >= 1".into()));
    }
    let root = SeededRng::new(seed);
    (0..n)
        .map(|i| {
            let mut rng = root.split(i as u64);
            let g = random_garment(&mut rng);
            let c = random_character(&mut rng);
            make_sample(g, c, size)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeResult {
    pub background: usize,
    /// Share of border pixels voting for `background`.
    pub background_confidence: f64,
    pub accessory: usize,
    pub skin: usize,
    pub low_confidence: bool,
}

fn dist2(a: [u8; 3], b: [u8; 3]) -> i32 {
    (0..3).map(|i| (a[i] as i32 - b[i] as i32).pow(2)).sum()
}

fn nearest(px: [u8; 3], table: &[[u8; 3]]) -> (usize, i32) {
    table
        .iter()
        .enumerate()
        .map(|(i, c)| (i, dist2(px, *c)))
        .min_by_key(|(_, d)| *d)
        .expect("nonempty table")
}

/// Share of pixels in a unit-coordinate box within `tol` of `color`.
fn region_share(img: &RgbImage, x: (f64, f64), y: (f64, f64), color: [u8; 3], tol: i32) -> f64 {
    let s = img.width;
    let (mut hit, mut total) = (0, 0);
    for r in 0..img.height {
        for c in 0..s {
            let (u, v) = (unit(c, s), unit(r, s));
            if (x.0..x.1).contains(&u) && (y.0..y.1).contains(&v) {
                total += 1;
                hit += usize::from(dist2(img.get(r, c), color) <= tol * tol);
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Rule-based attribute readout. Exact on clean renders; on generated
/// images it is a best guess and `low_confidence` flags an unclear border.
pub fn attribute_probe(img: &RgbImage) -> ProbeResult {
    let (w, h) = (img.width, img.height);
    let mut votes = [0usize; BACKGROUNDS.len()];
    let mut border = 0;
    for r in 0..h {
        for c in 0..w {
            if r == 0 || c == 0 || r + 1 == h || c + 1 == w {
                border += 1;
                let (i, d) = nearest(img.get(r, c), &BACKGROUNDS);
                if d <= 40 * 40 {
                    votes[i] += 1;
                }
            }
        }
    }
    let (background, best) = votes
        .iter()
        .enumerate()
        .max_by_key(|(i, v)| (**v, usize::MAX - i))
        .map(|(i, v)| (i, *v))
        .expect("four backgrounds");
    let background_confidence = best as f64 / border.max(1) as f64;

    let hat = region_share(img, (0.44, 0.56), (0.04, 0.09), HAT_COLOR, 45);
    let bag = region_share(img, (0.81, 0.90), (0.60, 0.70), BAG_COLOR, 45);
    let accessory = if hat > 0.5 && hat >= bag {
        1
    } else if bag > 0.5 {
        2
    } else {
        0
    };

    // skin from the face centre, which no pose moves by more than 0.03
    let mut skin_votes = [0usize; SKIN_TONES.len()];
    let s = w;
    for r in 0..h {
        for c in 0..w {
            let (u, v) = (unit(c, s), unit(r, s));
            if (u - 0.5).abs() < 0.04 && (v - 0.18).abs() < 0.04 {
                skin_votes[nearest(img.get(r, c), &SKIN_TONES).0] += 1;
            }
        }
    }
    let skin = (0..SKIN_TONES.len())
        .max_by_key(|i| (skin_votes[*i], usize::MAX - i))
        .unwrap_or(0);

    ProbeResult {
        background,
        background_confidence,
        accessory,
        skin,
        low_confidence: background_confidence < 0.5,
    }
}
