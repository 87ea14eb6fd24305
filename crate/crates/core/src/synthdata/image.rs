//! Image renderer: per-class object shape on a (possibly class-coloured)
//! background, with small per-class glyphs stamped near the corners.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{
    CueLocation, CueRecord, DatasetConfig, Example, Features, Placement, Region, ShortcutKind,
};
use crate::error::{MimuError, Result};

pub const MAX_CLASSES: usize = 9;

/// Background colour per class.
pub const PALETTE: [[u8; 3]; MAX_CLASSES] = [
    [200, 40, 40],
    [40, 160, 40],
    [40, 70, 200],
    [210, 180, 30],
    [160, 40, 180],
    [30, 170, 170],
    [220, 110, 20],
    [120, 120, 120],
    [150, 90, 50],
];

const OBJECT_BASE: u8 = 235;
const GLYPH_BASE: u8 = 15;
const BG_JITTER: i32 = 15;
const GLYPH_MIN: usize = 5;
const GLYPH_MAX: usize = 7;

// 5x5 bitmaps, MSB is the leftmost column.
const DIGITS: [[u8; 5]; MAX_CLASSES] = [
    [0b01110, 0b10001, 0b10001, 0b10001, 0b01110],
    [0b00100, 0b01100, 0b00100, 0b00100, 0b01110],
    [0b11110, 0b00001, 0b01110, 0b10000, 0b11111],
    [0b11110, 0b00001, 0b00110, 0b00001, 0b11110],
    [0b10010, 0b10010, 0b11111, 0b00010, 0b00010],
    [0b11111, 0b10000, 0b11110, 0b00001, 0b11110],
    [0b01110, 0b10000, 0b11110, 0b10001, 0b01110],
    [0b11111, 0b00010, 0b00100, 0b01000, 0b01000],
    [0b01110, 0b10001, 0b01110, 0b10001, 0b01110],
];

const LETTERS: [[u8; 5]; MAX_CLASSES] = [
    [0b01110, 0b10001, 0b11111, 0b10001, 0b10001],
    [0b11110, 0b10001, 0b11110, 0b10001, 0b11110],
    [0b01111, 0b10000, 0b10000, 0b10000, 0b01111],
    [0b11110, 0b10001, 0b10001, 0b10001, 0b11110],
    [0b11111, 0b10000, 0b11110, 0b10000, 0b11111],
    [0b11111, 0b10000, 0b11110, 0b10000, 0b10000],
    [0b01111, 0b10000, 0b10011, 0b10001, 0b01111],
    [0b10001, 0b10001, 0b11111, 0b10001, 0b10001],
    [0b11111, 0b00100, 0b00100, 0b00100, 0b11111],
];

/// Glyph for `class` rendered at `size x size`; even slots use digits, odd
/// slots letters.
pub fn glyph_bitmap(slot: usize, class: usize, size: usize) -> Vec<bool> {
    let rows = if slot % 2 == 0 { &DIGITS[class] } else { &LETTERS[class] };
    let mut out = vec![false; size * size];
    for r in 0..size {
        for c in 0..size {
            let gr = r * 5 / size;
            let gc = c * 5 / size;
            out[r * size + c] = rows[gr] >> (4 - gc) & 1 == 1;
        }
    }
    out
}

/// Per-class object silhouette at `size x size`.
pub fn object_mask(class: usize, size: usize) -> Vec<bool> {
    let mut out = vec![false; size * size];
    for r in 0..size {
        for c in 0..size {
            let u = (c as f64 + 0.5) / size as f64;
            let v = (r as f64 + 0.5) / size as f64;
            let du = (u - 0.5).abs();
            let dv = (v - 0.5).abs();
            out[r * size + c] = match class {
                0 => du < 0.42 && dv < 0.42,
                1 => {
                    let m = du.max(dv);
                    (0.26..0.47).contains(&m)
                }
                2 => du < 0.14 || dv < 0.14,
                3 => (u - v).abs() < 0.17 || (u + v - 1.0).abs() < 0.17,
                4 => (v * 3.0).fract() < 0.5,
                5 => (u * 3.0).fract() < 0.5,
                6 => v > 0.08 && du < 0.47 * v,
                7 => du + dv < 0.47,
                _ => v < 0.28 || du < 0.14,
            };
        }
    }
    out
}

pub(super) fn validate(config: &DatasetConfig) -> Result<()> {
    let s = &config.image;
    if config.num_classes > MAX_CLASSES {
        return Err(MimuError::config(
            "data.num_classes",
            format!("image generator supports at most {MAX_CLASSES} classes"),
        ));
    }
    if s.patch == 0 || s.height % s.patch != 0 || s.width % s.patch != 0 {
        return Err(MimuError::config(
            "data.image.patch",
            format!(
                "{}x{} image is not divisible into {}-pixel patches",
                s.height, s.width, s.patch
            ),
        ));
    }
    if s.channels != 1 && s.channels != 3 {
        return Err(MimuError::config("data.image.channels", "must be 1 or 3"));
    }
    if s.object_min == 0 || s.object_min > s.object_max {
        return Err(MimuError::config("data.image.object_min", "need 0 < object_min <= object_max"));
    }
    let side = s.height.min(s.width);
    if s.object_max + 2 * (side / 8) > side {
        return Err(MimuError::config("data.image.object_max", "object does not fit the image"));
    }
    // A watermark covers at most 8% of the pixels.
    let has_glyph = config
        .shortcuts
        .iter()
        .any(|s| s.kind == ShortcutKind::WatermarkGlyph);
    if has_glyph && (GLYPH_MAX * GLYPH_MAX * 100 > 8 * s.height * s.width || side < GLYPH_MAX + 9) {
        return Err(MimuError::config(
            "data.image.height",
            "image too small for watermark glyphs",
        ));
    }
    for sc in &config.shortcuts {
        if sc.kind == ShortcutKind::ShortcutToken {
            return Err(MimuError::config(
                "data.shortcuts",
                "shortcut_token cues require text modality",
            ));
        }
        if sc.kind == ShortcutKind::BackgroundColor && sc.slot != 0 {
            return Err(MimuError::config("data.shortcuts", "only one background cue is allowed"));
        }
    }
    Ok(())
}

fn jitter(rng: &mut ChaCha8Rng, randomized: bool, amp: i32) -> i32 {
    let v = rng.gen_range(-amp..=amp);
    if randomized {
        v
    } else {
        0
    }
}

fn clamp_u8(v: i32) -> u8 {
    v.clamp(0, 255) as u8
}

/// Glyph box for a watermark slot; slots cycle through the four corners.
fn glyph_origin(
    slot: usize,
    size: usize,
    h: usize,
    w: usize,
    offset: (usize, usize),
) -> (usize, usize) {
    // offset is in [0, 8) along each axis, measured inward from the corner
    let (ox, oy) = offset;
    let far_x = w - size - 1 - ox;
    let far_y = h - size - 1 - oy;
    let near_x = 1 + ox;
    let near_y = 1 + oy;
    match slot % 4 {
        0 => (far_x, far_y),
        1 => (near_x, near_y),
        2 => (far_x, near_y),
        _ => (near_x, far_y),
    }
}

pub(super) fn render_example(
    config: &DatasetConfig,
    label: usize,
    cue_classes: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Example> {
    let spec = &config.image;
    let (h, w, ch) = (spec.height, spec.width, spec.channels);
    let mut rgb = vec![[0i32; 3]; h * w];

    // Every random draw happens regardless of the cue classes so OOD
    // variants of the same index share geometry and noise.
    let bg_spec = config
        .shortcuts
        .iter()
        .position(|s| s.kind == ShortcutKind::BackgroundColor);
    let bg_randomized = bg_spec
        .map(|i| config.shortcuts[i].placement == Placement::Randomized)
        .unwrap_or(false);
    let bg_jit = [
        jitter(rng, bg_randomized, BG_JITTER),
        jitter(rng, bg_randomized, BG_JITTER),
        jitter(rng, bg_randomized, BG_JITTER),
    ];

    let side = h.min(w);
    let margin = side / 8;
    let size = rng.gen_range(spec.object_min..=spec.object_max);
    let ox = rng.gen_range(margin..=w - margin - size);
    let oy = rng.gen_range(margin..=h - margin - size);
    let obj_shade = rng.gen_range(-15..=15);
    let object = Region { x: ox, y: oy, w: size, h: size };

    let mut glyph_draws = Vec::new();
    for s in &config.shortcuts {
        if s.kind == ShortcutKind::WatermarkGlyph {
            let g = rng.gen_range(GLYPH_MIN..=GLYPH_MAX);
            let off = (rng.gen_range(0..8usize), rng.gen_range(0..8usize));
            let shade = rng.gen_range(-10..=10);
            glyph_draws.push((g, off, shade));
        }
    }

    let bg_color = match bg_spec {
        Some(i) => {
            let p = PALETTE[cue_classes[i]];
            [
                p[0] as i32 + bg_jit[0],
                p[1] as i32 + bg_jit[1],
                p[2] as i32 + bg_jit[2],
            ]
        }
        None => [0, 0, 0],
    };
    rgb.iter_mut().for_each(|px| *px = bg_color);

    let mask = object_mask(label, size);
    let shade = OBJECT_BASE as i32 + obj_shade;
    for r in 0..size {
        for c in 0..size {
            if mask[r * size + c] {
                rgb[(oy + r) * w + ox + c] = [shade; 3];
            }
        }
    }

    let mut cues = Vec::with_capacity(config.shortcuts.len());
    let mut glyph_iter = glyph_draws.into_iter();
    for (i, s) in config.shortcuts.iter().enumerate() {
        let class = cue_classes[i];
        match s.kind {
            ShortcutKind::BackgroundColor => cues.push(CueRecord {
                kind: s.kind,
                slot: s.slot,
                cue_class: class,
                location: CueLocation::Background,
            }),
            ShortcutKind::WatermarkGlyph => {
                let (g_rand, off_rand, shade_rand) = glyph_iter.next().expect("one draw per glyph");
                let randomized = s.placement == Placement::Randomized;
                let g = if randomized { g_rand } else { GLYPH_MIN };
                let off = if randomized { off_rand } else { (1, 1) };
                let (gx, gy) = glyph_origin(s.slot, g, h, w, off);
                let bitmap = glyph_bitmap(s.slot, class, g);
                let shade = GLYPH_BASE as i32 + if randomized { shade_rand } else { 0 };
                for r in 0..g {
                    for c in 0..g {
                        if bitmap[r * g + c] {
                            rgb[(gy + r) * w + gx + c] = [shade; 3];
                        }
                    }
                }
                cues.push(CueRecord {
                    kind: s.kind,
                    slot: s.slot,
                    cue_class: class,
                    location: CueLocation::Pixels {
                        region: Region { x: gx, y: gy, w: g, h: g },
                    },
                });
            }
            ShortcutKind::ShortcutToken => unreachable!("rejected by validate"),
        }
    }

    let amp = spec.noise as i32;
    let mut data = Vec::with_capacity(h * w * ch);
    for px in &rgb {
        if ch == 3 {
            for &v in px {
                let n = if amp > 0 { rng.gen_range(-amp..=amp) } else { 0 };
                data.push(clamp_u8(v + n));
            }
        } else {
            let n = if amp > 0 { rng.gen_range(-amp..=amp) } else { 0 };
            data.push(clamp_u8((px[0] + px[1] + px[2]) / 3 + n));
        }
    }

    Ok(Example {
        features: Features::Image(data),
        label,
        cues,
        object: Some(object),
    })
}
