//! Procedural face images for demos and tests.
//!
//! The trainers only need a directory of same-sized RGBA images; this
//! generates simple antialiased smiley faces with enough variation
//! (face shape, palette, eyes, mouth) that edge extraction produces
//! distinct inputs per face. Rendering supersamples 4x and box-filters
//! down, so contours are smooth enough for clean Canny output.

use rand::Rng;

use crate::data::RgbaImage;
use crate::rng;

const SS: usize = 4;

#[derive(Clone, Copy, Debug)]
struct FaceSpec {
    rx: f32,
    ry: f32,
    skin: [f32; 3],
    eye_dx: f32,
    eye_y: f32,
    eye_r: f32,
    pupil_tall: bool,
    mouth_y: f32,
    mouth_w: f32,
    mouth_h: f32,
    mouth: MouthKind,
}

#[derive(Clone, Copy, Debug)]
enum MouthKind {
    Smile,
    Frown,
    Open,
}

fn spec_for(index: usize, seed: u64) -> FaceSpec {
    let mut r = rng::step_stream(seed, "face", index as u64);
    let hue = r.gen_range(0.05f32..0.16); // yellow to orange family
    let sat = r.gen_range(0.75f32..0.95);
    let val = r.gen_range(0.85f32..1.0);
    FaceSpec {
        rx: r.gen_range(0.34f32..0.44),
        ry: r.gen_range(0.34f32..0.44),
        skin: hsv_to_rgb(hue, sat, val),
        eye_dx: r.gen_range(0.13f32..0.20),
        eye_y: r.gen_range(-0.16f32..-0.08),
        eye_r: r.gen_range(0.035f32..0.07),
        pupil_tall: r.gen_bool(0.5),
        mouth_y: r.gen_range(0.10f32..0.20),
        mouth_w: r.gen_range(0.14f32..0.24),
        mouth_h: r.gen_range(0.05f32..0.11),
        mouth: match r.gen_range(0..3u32) {
            0 => MouthKind::Smile,
            1 => MouthKind::Frown,
            _ => MouthKind::Open,
        },
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Color and coverage of one supersampled point, in face-relative
/// coordinates (u, v) in [-0.5, 0.5].
fn shade(spec: &FaceSpec, u: f32, v: f32) -> Option<[f32; 3]> {
    let in_ellipse = |cu: f32, cv: f32, ru: f32, rv: f32| {
        let du = (u - cu) / ru;
        let dv = (v - cv) / rv;
        du * du + dv * dv <= 1.0
    };

    if !in_ellipse(0.0, 0.0, spec.rx, spec.ry) {
        return None;
    }

    let dark = [0.22, 0.14, 0.08];
    // Eyes.
    for side in [-1.0f32, 1.0] {
        let (ru, rv) = if spec.pupil_tall {
            (spec.eye_r * 0.75, spec.eye_r * 1.25)
        } else {
            (spec.eye_r, spec.eye_r)
        };
        if in_ellipse(side * spec.eye_dx, spec.eye_y, ru, rv) {
            return Some(dark);
        }
    }
    // Mouth.
    let mouth = match spec.mouth {
        MouthKind::Open => in_ellipse(0.0, spec.mouth_y, spec.mouth_w * 0.7, spec.mouth_h),
        MouthKind::Smile => {
            let band = in_ellipse(0.0, spec.mouth_y - spec.mouth_h, spec.mouth_w, spec.mouth_h * 2.0)
                && !in_ellipse(
                    0.0,
                    spec.mouth_y - spec.mouth_h,
                    spec.mouth_w * 0.8,
                    spec.mouth_h * 1.4,
                );
            band && v > spec.mouth_y - spec.mouth_h * 0.2
        }
        MouthKind::Frown => {
            let band = in_ellipse(0.0, spec.mouth_y + spec.mouth_h, spec.mouth_w, spec.mouth_h * 2.0)
                && !in_ellipse(
                    0.0,
                    spec.mouth_y + spec.mouth_h,
                    spec.mouth_w * 0.8,
                    spec.mouth_h * 1.4,
                );
            band && v < spec.mouth_y + spec.mouth_h * 0.2
        }
    };
    if mouth {
        return Some([0.45, 0.12, 0.10]);
    }

    Some(spec.skin)
}

/// Renders face number `index` of a deterministic family.
pub fn synth_face(size: usize, index: usize, seed: u64) -> RgbaImage {
    let spec = spec_for(index, seed);
    let mut out = RgbaImage::new(size, size);
    let ss_side = size * SS;
    for y in 0..size {
        for x in 0..size {
            let mut acc = [0.0f32; 3];
            let mut cover = 0.0f32;
            for sy in 0..SS {
                for sx in 0..SS {
                    let u = ((x * SS + sx) as f32 + 0.5) / ss_side as f32 - 0.5;
                    let v = ((y * SS + sy) as f32 + 0.5) / ss_side as f32 - 0.5;
                    if let Some(c) = shade(&spec, u, v) {
                        for k in 0..3 {
                            acc[k] += c[k];
                        }
                        cover += 1.0;
                    }
                }
            }
            let at = (y * size + x) * 4;
            if cover > 0.0 {
                for k in 0..3 {
                    out.pixels[at + k] = acc[k] / cover;
                }
            }
            out.pixels[at + 3] = cover / (SS * SS) as f32;
        }
    }
    out
}

/// Writes `count` faces into a directory as `face_XX.png`.
pub fn write_face_set(
    dir: &std::path::Path,
    count: usize,
    size: usize,
    seed: u64,
) -> crate::error::Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let img = synth_face(size, i, seed);
        let path = dir.join(format!("face_{i:02}.png"));
        crate::data::save_png(&img, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{canny, grayscale};

    #[test]
    fn faces_are_deterministic_and_distinct() {
        let a = synth_face(32, 0, 7);
        let b = synth_face(32, 0, 7);
        let c = synth_face(32, 1, 7);
        assert_eq!(a, b);
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn faces_have_opaque_interior_and_transparent_corners() {
        let img = synth_face(32, 2, 7);
        let center = (16 * 32 + 16) * 4;
        assert!(img.pixels[center + 3] > 0.9);
        assert_eq!(img.pixels[3], 0.0);
    }

    #[test]
    fn faces_produce_nontrivial_edges() {
        for i in 0..4 {
            let img = synth_face(32, i, 7);
            let gray = grayscale(&img);
            let edge = canny(&gray, 32, 32, 1.4, 0.1, 0.2).unwrap();
            let count = edge.edge_pixel_count();
            assert!(
                (20..400).contains(&count),
                "face {i} produced {count} edge pixels"
            );
        }
    }
}
