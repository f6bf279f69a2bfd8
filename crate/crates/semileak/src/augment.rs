//! Stochastic image augmentation.
//!
//! The weak policy is a padded random crop plus a coin-flip horizontal
//! mirror. The strong policy stacks `aug_level` transforms, drawn uniformly
//! from a fixed fourteen-op pool at fixed magnitude, on top of the weak
//! policy. All parameter draws are integers (angle in degrees, pixel shifts,
//! signs), geometric resampling is nearest-neighbor, and out-of-frame pixels
//! are filled with mid gray, so one rng state always yields one output.

use rand::Rng;

use crate::data::Image;

/// Crop padding of the weak policy.
pub const CROP_PAD: usize = 4;
/// Fixed transform magnitude on the conventional 0..=30 scale.
pub const RAND_MAGNITUDE: i64 = 10;
const MAG_SCALE: f64 = 30.0;
/// Fill value for pixels sampled outside the source frame.
const BORDER_FILL: f32 = 0.5;

/// The strong-augmentation transform pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    Identity,
    AutoContrast,
    Equalize,
    Rotate,
    Solarize,
    Posterize,
    Contrast,
    Brightness,
    Color,
    Sharpness,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
}

pub const TRANSFORM_POOL: [Transform; 14] = [
    Transform::Identity,
    Transform::AutoContrast,
    Transform::Equalize,
    Transform::Rotate,
    Transform::Solarize,
    Transform::Posterize,
    Transform::Contrast,
    Transform::Brightness,
    Transform::Color,
    Transform::Sharpness,
    Transform::ShearX,
    Transform::ShearY,
    Transform::TranslateX,
    Transform::TranslateY,
];

/// Weak policy: pad-4 random crop, then horizontal flip with probability 1/2.
/// Draw order: row offset, column offset, flip coin.
pub fn weak_augment(img: &Image, rng: &mut impl Rng) -> Image {
    let oy = rng.gen_range(0..=2 * CROP_PAD);
    let ox = rng.gen_range(0..=2 * CROP_PAD);
    let flip = rng.gen_bool(0.5);
    weak_with(img, oy, ox, flip)
}

/// Deterministic core of the weak policy. Offset `(CROP_PAD, CROP_PAD)`
/// without flip reproduces the input exactly.
pub fn weak_with(img: &Image, oy: usize, ox: usize, flip: bool) -> Image {
    let mut out = Image::new(img.c, img.h, img.w);
    let (h, w) = (img.h as i64, img.w as i64);
    let (oy, ox, pad) = (oy as i64, ox as i64, CROP_PAD as i64);
    for ch in 0..img.c {
        for y in 0..h {
            for x in 0..w {
                let cx = if flip { w - 1 - x } else { x };
                let sy = y + oy - pad;
                let sx = cx + ox - pad;
                let v = if sy >= 0 && sy < h && sx >= 0 && sx < w {
                    img.get(ch, sy as usize, sx as usize)
                } else {
                    BORDER_FILL
                };
                out.set(ch, y as usize, x as usize, v);
            }
        }
    }
    out
}

/// Strong policy: the weak policy followed by `level` pool transforms.
/// `level = 0` degenerates to [`weak_augment`] on the same rng state.
pub fn strong_augment(img: &Image, rng: &mut impl Rng, level: usize) -> Image {
    strong_with_pool(img, rng, level, &TRANSFORM_POOL)
}

/// Strong policy over an explicit pool; the unit tests shrink the pool to
/// isolate single transforms.
pub fn strong_with_pool(
    img: &Image,
    rng: &mut impl Rng,
    level: usize,
    pool: &[Transform],
) -> Image {
    assert!(level <= 4, "aug_level must be in 0..=4");
    assert!(!pool.is_empty(), "transform pool must not be empty");
    let mut out = weak_augment(img, rng);
    for _ in 0..level {
        let t = pool[rng.gen_range(0..pool.len())];
        out = apply_transform(&out, t, rng);
    }
    out
}

/// Apply one pool transform at the fixed magnitude, drawing only its sign or
/// integer strength from the rng.
pub fn apply_transform(img: &Image, t: Transform, rng: &mut impl Rng) -> Image {
    let m = RAND_MAGNITUDE as f64 / MAG_SCALE;
    match t {
        Transform::Identity => img.clone(),
        Transform::AutoContrast => autocontrast(img),
        Transform::Equalize => equalize(img),
        Transform::Rotate => {
            let span = (30.0 * m).round() as i64;
            let deg = rng.gen_range(-span..=span);
            rotate(img, deg as f64)
        }
        Transform::Solarize => solarize(img, (1.0 - m) as f32),
        Transform::Posterize => posterize(img, 8 - (4.0 * m).round() as u32),
        Transform::Contrast => adjust_contrast(img, enhance_factor(m, rng)),
        Transform::Brightness => adjust_brightness(img, enhance_factor(m, rng)),
        Transform::Color => adjust_color(img, enhance_factor(m, rng)),
        Transform::Sharpness => adjust_sharpness(img, enhance_factor(m, rng)),
        Transform::ShearX => shear(img, signed(0.3 * m, rng), true),
        Transform::ShearY => shear(img, signed(0.3 * m, rng), false),
        Transform::TranslateX => {
            let px = (0.3 * m * img.w as f64).round() as i64;
            translate(img, signed_int(px, rng), true)
        }
        Transform::TranslateY => {
            let px = (0.3 * m * img.h as f64).round() as i64;
            translate(img, signed_int(px, rng), false)
        }
    }
}

fn enhance_factor(m: f64, rng: &mut impl Rng) -> f32 {
    let delta = 0.9 * m;
    if rng.gen_bool(0.5) {
        (1.0 + delta) as f32
    } else {
        (1.0 - delta) as f32
    }
}

fn signed(v: f64, rng: &mut impl Rng) -> f64 {
    if rng.gen_bool(0.5) {
        v
    } else {
        -v
    }
}

fn signed_int(v: i64, rng: &mut impl Rng) -> i64 {
    if rng.gen_bool(0.5) {
        v
    } else {
        -v
    }
}

/// Inverse-map geometric warp: for every output pixel, look up the nearest
/// source pixel; outside the frame the mid-gray fill applies.
fn inverse_map(img: &Image, f: impl Fn(f64, f64) -> (f64, f64)) -> Image {
    let mut out = Image::new(img.c, img.h, img.w);
    for y in 0..img.h {
        for x in 0..img.w {
            let (sx, sy) = f(x as f64, y as f64);
            let sxi = sx.round() as i64;
            let syi = sy.round() as i64;
            let inside = sxi >= 0 && sxi < img.w as i64 && syi >= 0 && syi < img.h as i64;
            for ch in 0..img.c {
                let v = if inside {
                    img.get(ch, syi as usize, sxi as usize)
                } else {
                    BORDER_FILL
                };
                out.set(ch, y, x, v);
            }
        }
    }
    out
}

fn rotate(img: &Image, deg: f64) -> Image {
    let a = deg.to_radians();
    let (sin, cos) = a.sin_cos();
    let cx = (img.w as f64 - 1.0) / 2.0;
    let cy = (img.h as f64 - 1.0) / 2.0;
    inverse_map(img, |x, y| {
        let dx = x - cx;
        let dy = y - cy;
        (cx + cos * dx + sin * dy, cy - sin * dx + cos * dy)
    })
}

fn shear(img: &Image, v: f64, horizontal: bool) -> Image {
    let cx = (img.w as f64 - 1.0) / 2.0;
    let cy = (img.h as f64 - 1.0) / 2.0;
    inverse_map(img, |x, y| {
        if horizontal {
            (x + v * (y - cy), y)
        } else {
            (x, y + v * (x - cx))
        }
    })
}

fn translate(img: &Image, px: i64, horizontal: bool) -> Image {
    inverse_map(img, |x, y| {
        if horizontal {
            (x - px as f64, y)
        } else {
            (x, y - px as f64)
        }
    })
}

fn solarize(img: &Image, threshold: f32) -> Image {
    let mut out = img.clone();
    for v in out.data.iter_mut() {
        if *v >= threshold {
            *v = 1.0 - *v;
        }
    }
    out
}

fn posterize(img: &Image, bits: u32) -> Image {
    let bits = bits.clamp(1, 8);
    let mask: u8 = 0xffu8 << (8 - bits);
    let mut out = img.clone();
    for v in out.data.iter_mut() {
        let q = (*v * 255.0).round().clamp(0.0, 255.0) as u8;
        *v = f32::from(q & mask) / 255.0;
    }
    out
}

fn autocontrast(img: &Image) -> Image {
    let mut out = img.clone();
    let plane = img.h * img.w;
    for ch in 0..img.c {
        let slice = &mut out.data[ch * plane..(ch + 1) * plane];
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in slice.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi - lo > 1e-6 {
            let scale = 1.0 / (hi - lo);
            for v in slice.iter_mut() {
                *v = ((*v - lo) * scale).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Per-channel 256-bin histogram equalization over 8-bit quantized values.
fn equalize(img: &Image) -> Image {
    let mut out = img.clone();
    let plane = img.h * img.w;
    for ch in 0..img.c {
        let slice = &mut out.data[ch * plane..(ch + 1) * plane];
        let mut hist = [0u64; 256];
        for &v in slice.iter() {
            hist[quant8(v) as usize] += 1;
        }
        let nonzero: Vec<u64> = hist.iter().copied().filter(|&c| c > 0).collect();
        if nonzero.len() <= 1 {
            continue;
        }
        let total: u64 = nonzero.iter().sum();
        let step = (total - nonzero[nonzero.len() - 1]) / 255;
        if step == 0 {
            continue;
        }
        let mut lut = [0u8; 256];
        let mut n = step / 2;
        for (i, l) in lut.iter_mut().enumerate() {
            *l = (n / step).min(255) as u8;
            n += hist[i];
        }
        for v in slice.iter_mut() {
            *v = f32::from(lut[quant8(*v) as usize]) / 255.0;
        }
    }
    out
}

#[inline]
fn quant8(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn gray_value(img: &Image, y: usize, x: usize) -> f32 {
    if img.c == 3 {
        0.299 * img.get(0, y, x) + 0.587 * img.get(1, y, x) + 0.114 * img.get(2, y, x)
    } else {
        (0..img.c).map(|ch| img.get(ch, y, x)).sum::<f32>() / img.c as f32
    }
}

/// Blend toward the global mean gray; factor 1 is identity.
fn adjust_contrast(img: &Image, factor: f32) -> Image {
    let mut mean = 0.0f32;
    for y in 0..img.h {
        for x in 0..img.w {
            mean += gray_value(img, y, x);
        }
    }
    mean /= (img.h * img.w) as f32;
    let mut out = img.clone();
    for v in out.data.iter_mut() {
        *v = (mean + factor * (*v - mean)).clamp(0.0, 1.0);
    }
    out
}

/// Scale toward black; factor 1 is identity.
fn adjust_brightness(img: &Image, factor: f32) -> Image {
    let mut out = img.clone();
    for v in out.data.iter_mut() {
        *v = (*v * factor).clamp(0.0, 1.0);
    }
    out
}

/// Blend toward the per-pixel gray; factor 1 is identity.
fn adjust_color(img: &Image, factor: f32) -> Image {
    let mut out = img.clone();
    for y in 0..img.h {
        for x in 0..img.w {
            let g = gray_value(img, y, x);
            for ch in 0..img.c {
                let v = img.get(ch, y, x);
                out.set(ch, y, x, (g + factor * (v - g)).clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Blend toward a 3x3 smoothed copy; factor 1 is identity. Border pixels
/// keep their original value.
fn adjust_sharpness(img: &Image, factor: f32) -> Image {
    if img.h < 3 || img.w < 3 {
        return img.clone();
    }
    let mut out = img.clone();
    const KERNEL: [[f32; 3]; 3] = [[1.0, 1.0, 1.0], [1.0, 5.0, 1.0], [1.0, 1.0, 1.0]];
    for ch in 0..img.c {
        for y in 1..img.h - 1 {
            for x in 1..img.w - 1 {
                let mut acc = 0.0f32;
                for (ky, row) in KERNEL.iter().enumerate() {
                    for (kx, &kv) in row.iter().enumerate() {
                        acc += kv * img.get(ch, y + ky - 1, x + kx - 1);
                    }
                }
                let smooth = acc / 13.0;
                let v = smooth + factor * (img.get(ch, y, x) - smooth);
                out.set(ch, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    out
}
