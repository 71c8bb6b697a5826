//! Deterministic synthetic street scenes: layered background bands, static
//! decorations, and moving sprites whose per-frame opacity varies.
//!
//! The generator's whole point is temporal structure: the prior frame shows
//! the same scene a few frames earlier, so static content matches the
//! current frame exactly (up to one global brightness shift), while each
//! moving sprite is displaced by velocity x offset and re-rolls its opacity.
//! A sprite drawn faintly in the current frame may be vivid in the prior,
//! so the prior carries real information about the dynamic classes; labels
//! always describe the current frame's geometry at full strength.
//!
//! Everything derives from integer seeds — scene layout from one RNG stream
//! with a fixed draw order, per-pixel texture and per-frame effects from a
//! stateless hash — so identical inputs give bitwise-identical frames.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{image_io, LabeledFramePair, PairMeta};
use crate::error::DataError;
use crate::tensor::IntTensor;

// Class ids matching `default_class_table` order.
const SKY: u8 = 0;
const BUILDING: u8 = 1;
const POLE: u8 = 2;
const ROAD: u8 = 3;
const SIDEWALK: u8 = 4;
const TREE: u8 = 5;
const SIGN: u8 = 6;
const FENCE: u8 = 7;
const CAR: u8 = 8;
const PEDESTRIAN: u8 = 9;
const BICYCLIST: u8 = 10;

/// Generator knobs. Per-frame opacity of moving sprites is drawn uniformly
/// from [alpha_min, alpha_max]; static content never fades.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    /// Frames between prior and current.
    pub prior_offset: u32,
    /// Moving sprites per scene, inclusive range.
    pub sprites_min: usize,
    pub sprites_max: usize,
    pub alpha_min: f32,
    pub alpha_max: f32,
    /// Max magnitude of the per-frame global brightness shift.
    pub brightness_jitter: f32,
    /// Amplitude of the static per-pixel luminance speckle.
    pub texture_amp: f32,
    /// Whether to place poles, signs, and fences.
    pub static_decorations: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 64,
            prior_offset: 3,
            sprites_min: 2,
            sprites_max: 4,
            alpha_min: 0.25,
            alpha_max: 1.0,
            brightness_jitter: 0.02,
            texture_amp: 0.05,
            static_decorations: true,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), DataError> {
        if self.height % 16 != 0 || self.width % 16 != 0 {
            return Err(DataError::IndivisibleExtents {
                h: self.height,
                w: self.width,
            });
        }
        if self.height < 32 || self.width < 32 {
            return Err(DataError::Invalid(format!(
                "frames must be at least 32x32, got {}x{}",
                self.height, self.width
            )));
        }
        if self.prior_offset == 0 {
            return Err(DataError::Invalid(
                "prior_offset must be at least 1 frame".into(),
            ));
        }
        if self.sprites_min > self.sprites_max {
            return Err(DataError::Invalid(format!(
                "sprites_min {} > sprites_max {}",
                self.sprites_min, self.sprites_max
            )));
        }
        if !(0.0 < self.alpha_min && self.alpha_min <= self.alpha_max && self.alpha_max <= 1.0) {
            return Err(DataError::Invalid(format!(
                "alpha range [{}, {}] must satisfy 0 < min <= max <= 1",
                self.alpha_min, self.alpha_max
            )));
        }
        Ok(())
    }
}

/// One horizontal background stripe; covers rows `top..` until the next
/// band's top.
#[derive(Debug, Clone)]
pub struct Band {
    pub class: u8,
    pub top: usize,
    pub color: [f32; 3],
}

/// A rectangle at `(x, y)` (top-left, frame 0) moving `(vx, vy)` pixels per
/// frame. Decorations use velocity 0 and never fade.
#[derive(Debug, Clone)]
pub struct Sprite {
    pub class: u8,
    pub w: i64,
    pub h: i64,
    pub x: i64,
    pub y: i64,
    pub vx: i64,
    pub vy: i64,
    pub color: [f32; 3],
}

impl Sprite {
    /// Top-left position at frame `t` (frame 0 = current).
    pub fn pos_at(&self, t: i64) -> (i64, i64) {
        (self.x + self.vx * t, self.y + self.vy * t)
    }

    fn covers(&self, t: i64, r: i64, c: i64) -> bool {
        let (x, y) = self.pos_at(t);
        c >= x && c < x + self.w && r >= y && r < y + self.h
    }
}

/// Complete recipe for one scene; rendering any frame of it is a pure
/// function of this struct.
#[derive(Debug, Clone)]
pub struct SceneScript {
    pub source: String,
    pub height: usize,
    pub width: usize,
    pub prior_offset: u32,
    pub bands: Vec<Band>,
    pub decorations: Vec<Sprite>,
    pub sprites: Vec<Sprite>,
    /// Drives per-frame alpha and brightness hashing.
    pub effect_seed: u64,
    pub alpha_min: f32,
    pub alpha_max: f32,
    pub brightness_jitter: f32,
    pub texture_amp: f32,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stateless hash -> [0, 1).
fn hash_unit(a: u64, b: u64, c: u64) -> f32 {
    let z = splitmix64(a ^ b.rotate_left(17) ^ c.rotate_left(41));
    ((z >> 40) as f32) / (1u64 << 24) as f32
}

const SALT_TEXTURE: u64 = 0x5157_0001;
const SALT_SPRITE_TEX: u64 = 0x5157_0002;
const SALT_ALPHA: u64 = 0x5157_0003;
const SALT_BRIGHT: u64 = 0x5157_0004;

impl SceneScript {
    fn band_at(&self, r: usize) -> &Band {
        let mut current = &self.bands[0];
        for b in &self.bands {
            if b.top <= r {
                current = b;
            }
        }
        current
    }

    /// Per-sprite opacity for a frame; uniform in [alpha_min, alpha_max].
    pub fn sprite_alpha(&self, sprite_idx: usize, frame: i64) -> f32 {
        let u = hash_unit(
            self.effect_seed,
            frame as u64,
            SALT_ALPHA.wrapping_add(sprite_idx as u64),
        );
        self.alpha_min + u * (self.alpha_max - self.alpha_min)
    }

    /// Global brightness shift for a frame; uniform in +-jitter.
    pub fn brightness(&self, frame: i64) -> f32 {
        (hash_unit(self.effect_seed, frame as u64, SALT_BRIGHT) * 2.0 - 1.0)
            * self.brightness_jitter
    }

    fn validate(&self) -> Result<(), DataError> {
        for s in self.decorations.iter().chain(&self.sprites) {
            if s.w as usize > self.width || s.h as usize > self.height {
                return Err(DataError::SpriteTooLarge {
                    sw: s.w as usize,
                    sh: s.h as usize,
                    h: self.height,
                    w: self.width,
                });
            }
        }
        Ok(())
    }

    /// Renders frame `frame` to row-major RGB bytes. Background bands and
    /// decorations depend only on pixel position (plus the global
    /// brightness term), so they are identical across frames; moving
    /// sprites composite on top at their per-frame position and opacity.
    pub fn render(&self, frame: i64) -> Vec<u8> {
        let (h, w) = (self.height, self.width);
        let bright = self.brightness(frame);
        let alphas: Vec<f32> = (0..self.sprites.len())
            .map(|i| self.sprite_alpha(i, frame))
            .collect();
        let mut out = vec![0u8; h * w * 3];
        for r in 0..h {
            let band = self.band_at(r);
            for c in 0..w {
                let tex = (hash_unit(self.effect_seed, (r * w + c) as u64, SALT_TEXTURE) - 0.5)
                    * 2.0
                    * self.texture_amp;
                let mut px = [
                    band.color[0] + tex,
                    band.color[1] + tex,
                    band.color[2] + tex,
                ];
                for (i, deco) in self.decorations.iter().enumerate() {
                    if deco.covers(frame, r as i64, c as i64) {
                        px = self.sprite_pixel(deco, SALT_SPRITE_TEX.wrapping_add(1000 + i as u64), frame, r, c);
                    }
                }
                for (i, sprite) in self.sprites.iter().enumerate() {
                    if sprite.covers(frame, r as i64, c as i64) {
                        let s = self.sprite_pixel(sprite, SALT_SPRITE_TEX.wrapping_add(i as u64), frame, r, c);
                        let a = alphas[i];
                        for ch in 0..3 {
                            px[ch] = a * s[ch] + (1.0 - a) * px[ch];
                        }
                    }
                }
                for ch in 0..3 {
                    let v = (px[ch] + bright).clamp(0.0, 1.0);
                    out[(r * w + c) * 3 + ch] = (v * 255.0).round() as u8;
                }
            }
        }
        out
    }

    /// Sprite body color with sprite-local speckle and a darker 1px border;
    /// the pattern travels with the sprite.
    fn sprite_pixel(&self, s: &Sprite, salt: u64, frame: i64, r: usize, c: usize) -> [f32; 3] {
        let (x, y) = s.pos_at(frame);
        let lr = r as i64 - y;
        let lc = c as i64 - x;
        let tex = (hash_unit(self.effect_seed, (lr * s.w + lc) as u64, salt) - 0.5) * 0.1;
        let edge = lr == 0 || lc == 0 || lr == s.h - 1 || lc == s.w - 1;
        let scale = if edge { 0.6 } else { 1.0 };
        [
            s.color[0] * scale + tex,
            s.color[1] * scale + tex,
            s.color[2] * scale + tex,
        ]
    }

    /// Exact label map for frame `frame`, from the same geometry as
    /// [`render`]: band class, overridden by decorations, overridden by
    /// moving sprites (opacity never affects labels — a faint object is
    /// still that object).
    pub fn labels(&self, frame: i64) -> IntTensor {
        let (h, w) = (self.height, self.width);
        let mut data = vec![0u8; h * w];
        for r in 0..h {
            let band_class = self.band_at(r).class;
            for c in 0..w {
                let mut id = band_class;
                for deco in &self.decorations {
                    if deco.covers(frame, r as i64, c as i64) {
                        id = deco.class;
                    }
                }
                for sprite in &self.sprites {
                    if sprite.covers(frame, r as i64, c as i64) {
                        id = sprite.class;
                    }
                }
                data[r * w + c] = id;
            }
        }
        IntTensor::new(vec![h, w], data).expect("positive extents")
    }

    /// Renders the (prior, current, labels) triple: prior at frame
    /// `-prior_offset`, current and labels at frame 0.
    pub fn to_pair(&self) -> Result<LabeledFramePair, DataError> {
        self.validate()?;
        let current = self.render(0);
        let prior = self.render(-(self.prior_offset as i64));
        LabeledFramePair::new(
            image_io::rgb_bytes_to_tensor(self.width, self.height, &prior),
            image_io::rgb_bytes_to_tensor(self.width, self.height, &current),
            self.labels(0),
            PairMeta {
                source: self.source.clone(),
                frame_index: 0,
                prior_offset: self.prior_offset,
                pad_rows: 0,
                pad_cols: 0,
            },
        )
    }
}

fn jitter_color(rng: &mut ChaCha8Rng, base: [f32; 3], amp: f32) -> [f32; 3] {
    let mut out = base;
    for ch in &mut out {
        *ch += rng.random_range(-amp..=amp);
    }
    out
}

/// Samples one scene layout. Draw order is fixed (bands, decorations,
/// sprite count, sprites), so a given `scene_seed` always yields the same
/// script.
pub fn make_scene(
    cfg: &SynthConfig,
    scene_seed: u64,
    source: impl Into<String>,
) -> Result<SceneScript, DataError> {
    cfg.validate()?;
    let source = source.into();
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    let h = cfg.height as i64;
    let w = cfg.width as i64;

    // Horizontal bands, top to bottom. Boundaries get a few pixels of
    // per-scene wobble.
    let fractions = [
        (SKY, 0.00, [0.55, 0.75, 0.95]),
        (BUILDING, 0.22, [0.55, 0.35, 0.30]),
        (TREE, 0.40, [0.20, 0.45, 0.20]),
        (ROAD, 0.52, [0.30, 0.30, 0.33]),
        (SIDEWALK, 0.80, [0.60, 0.60, 0.55]),
    ];
    let mut bands = Vec::new();
    let mut prev_top = 0usize;
    for (i, (class, frac, color)) in fractions.into_iter().enumerate() {
        let top = if i == 0 {
            0
        } else {
            let wobble = rng.random_range(-2i64..=2);
            ((h as f64 * frac) as i64 + wobble).clamp(prev_top as i64 + 1, h - 4) as usize
        };
        prev_top = top;
        bands.push(Band {
            class,
            top,
            color: jitter_color(&mut rng, color, 0.05),
        });
    }
    let band_top = |class: u8| bands.iter().find(|b| b.class == class).unwrap().top as i64;
    let road_top = band_top(ROAD);
    let sidewalk_top = band_top(SIDEWALK);

    // Static decorations: immobile, never faded, so both frames show them
    // identically — the prior adds nothing for these classes.
    let mut decorations = Vec::new();
    if cfg.static_decorations {
        for _ in 0..rng.random_range(1..=2usize) {
            let ph = rng.random_range(10..=14i64).min(h - 2);
            let y = rng.random_range(band_top(TREE)..(h - ph).max(band_top(TREE) + 1));
            decorations.push(Sprite {
                class: POLE,
                w: 2,
                h: ph,
                x: rng.random_range(0..=(w - 2)),
                y,
                vx: 0,
                vy: 0,
                color: jitter_color(&mut rng, [0.45, 0.50, 0.40], 0.04),
            });
        }
        if rng.random_range(0..=1u32) == 1 {
            decorations.push(Sprite {
                class: SIGN,
                w: 5,
                h: 5,
                x: rng.random_range(0..=(w - 5)),
                y: rng.random_range(band_top(BUILDING)..road_top.max(band_top(BUILDING) + 1)),
                vx: 0,
                vy: 0,
                color: jitter_color(&mut rng, [0.80, 0.50, 0.55], 0.04),
            });
        }
        if rng.random_range(0..=1u32) == 1 {
            let fw = rng.random_range(14..=18i64).min(w);
            decorations.push(Sprite {
                class: FENCE,
                w: fw,
                h: 4,
                x: rng.random_range(0..=(w - fw)),
                y: (sidewalk_top - 2).clamp(0, h - 4),
                vx: 0,
                vy: 0,
                color: jitter_color(&mut rng, [0.50, 0.40, 0.25], 0.04),
            });
        }
    }

    // Moving sprites. Spawn x is constrained so the sprite is fully inside
    // the frame horizontally in both the current frame and the prior frame.
    let n_sprites = rng.random_range(cfg.sprites_min..=cfg.sprites_max);
    let mut sprites = Vec::new();
    for _ in 0..n_sprites {
        let class = [CAR, PEDESTRIAN, BICYCLIST][rng.random_range(0..3usize)];
        let (sw, sh, speed_max, base_color) = match class {
            CAR => (
                rng.random_range(11..=15i64),
                rng.random_range(6..=8i64),
                2,
                [0.75, 0.12, 0.12],
            ),
            PEDESTRIAN => (
                rng.random_range(4..=5i64),
                rng.random_range(10..=13i64),
                1,
                [0.85, 0.72, 0.15],
            ),
            _ => (
                rng.random_range(8..=10i64),
                rng.random_range(7..=9i64),
                2,
                [0.05, 0.60, 0.80],
            ),
        };
        let mut vx = rng.random_range(-speed_max..=speed_max);
        if class != PEDESTRIAN && vx == 0 {
            vx = if rng.random_range(0..=1u32) == 1 { 1 } else { -1 };
        }
        let disp = vx * cfg.prior_offset as i64;
        let (x_lo, x_hi) = if disp >= 0 {
            (disp, w - sw)
        } else {
            (0, w - sw + disp)
        };
        let x = if x_lo <= x_hi {
            rng.random_range(x_lo..=x_hi)
        } else {
            // Frame too small for this displacement; park it mid-frame.
            (w - sw) / 2
        };
        let (y_lo, y_hi) = match class {
            PEDESTRIAN => (sidewalk_top, h - sh),
            _ => (road_top, sidewalk_top.min(h - sh)),
        };
        let y = if y_lo < y_hi {
            rng.random_range(y_lo..y_hi)
        } else {
            (h - sh).max(0) / 2
        };
        sprites.push(Sprite {
            class,
            w: sw,
            h: sh,
            x,
            y,
            vx,
            vy: 0,
            color: jitter_color(&mut rng, base_color, 0.06),
        });
    }

    let script = SceneScript {
        source,
        height: cfg.height,
        width: cfg.width,
        prior_offset: cfg.prior_offset,
        bands,
        decorations,
        sprites,
        effect_seed: splitmix64(scene_seed ^ 0xA5A5_A5A5_DEAD_BEEF),
        alpha_min: cfg.alpha_min,
        alpha_max: cfg.alpha_max,
        brightness_jitter: cfg.brightness_jitter,
        texture_amp: cfg.texture_amp,
    };
    script.validate()?;
    Ok(script)
}

/// Renders `n_scenes` independent scenes from one master seed.
pub fn generate_synthetic_with(
    cfg: &SynthConfig,
    seed: u64,
    n_scenes: usize,
) -> Result<Vec<LabeledFramePair>, DataError> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_scenes);
    for s in 0..n_scenes {
        let scene_seed = master.random::<u64>();
        let script = make_scene(cfg, scene_seed, format!("synth-{s:04}"))?;
        out.push(script.to_pair()?);
    }
    Ok(out)
}

/// Default-config generation at an explicit size and prior offset.
pub fn generate_synthetic(
    seed: u64,
    n_scenes: usize,
    height: usize,
    width: usize,
    prior_offset: u32,
) -> Result<Vec<LabeledFramePair>, DataError> {
    let cfg = SynthConfig {
        height,
        width,
        prior_offset,
        ..SynthConfig::default()
    };
    generate_synthetic_with(&cfg, seed, n_scenes)
}
