//! Synthetic out-of-distribution edges.
//!
//! The training edges come from clean renders, so OOD inputs are made by
//! distorting them the way a shaky hand would: smooth row/column jitter,
//! locally thickened line segments, and short deleted runs.

use rand::Rng;

use crate::data::EdgeImage;

/// Distorts a binary edge image; `strength` in [0, 1].
///
/// Row and column displacements are bounded by `ceil(3 * strength)`
/// pixels, up to `5 * strength` percent of edge pixels are deleted as
/// short runs, and a matching share of pixels is dilated to vary line
/// width. Strength 0 returns the input unchanged; the output stays
/// binary.
pub fn perturb_edges(edge: &EdgeImage, rng: &mut impl Rng, strength: f32) -> EdgeImage {
    let strength = strength.clamp(0.0, 1.0);
    if strength == 0.0 {
        return edge.clone();
    }
    let (w, h) = (edge.width, edge.height);
    let amp = (3.0 * strength).ceil();

    // Smooth per-row horizontal and per-column vertical displacement
    // fields: white noise, box-smoothed three times, scaled to +-amp.
    let field = |n: usize, rng: &mut dyn rand::RngCore| -> Vec<isize> {
        let mut f: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        for _ in 0..3 {
            let prev = f.clone();
            for i in 0..n {
                let l = prev[i.saturating_sub(1)];
                let r = prev[(i + 1).min(n - 1)];
                f[i] = (l + prev[i] + r) / 3.0;
            }
        }
        let peak = f.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-6);
        f.iter().map(|v| (v / peak * amp).round() as isize).collect()
    };
    let dx_per_row = field(h, rng);
    let dy_per_col = field(w, rng);

    let mut jittered = EdgeImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let sx = x as isize - dx_per_row[y];
            if (0..w as isize).contains(&sx) && edge.pixels[y * w + sx as usize] > 0.5 {
                jittered.pixels[y * w + x] = 1.0;
            }
        }
    }
    let mut shifted = EdgeImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let sy = y as isize - dy_per_col[x];
            if (0..h as isize).contains(&sy) && jittered.pixels[sy as usize * w + x] > 0.5 {
                shifted.pixels[y * w + x] = 1.0;
            }
        }
    }

    let edge_px: Vec<usize> = (0..w * h).filter(|&p| shifted.pixels[p] > 0.5).collect();
    let n_edge = edge_px.len();
    let mut out = shifted.clone();

    // Thicken around a few randomly chosen edge pixels.
    let dilate_count = ((n_edge as f32 * 0.04 * strength).round() as usize).max(1);
    for _ in 0..dilate_count.min(n_edge) {
        let p = edge_px[rng.gen_range(0..n_edge)];
        let (y, x) = (p / w, p % w);
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if (0..h as isize).contains(&ny) && (0..w as isize).contains(&nx) {
                    out.pixels[ny as usize * w + nx as usize] = 1.0;
                }
            }
        }
    }

    // Delete short runs, bounded by 5 * strength percent of edge pixels.
    let mut budget = (n_edge as f32 * 0.05 * strength).floor() as usize;
    while budget > 0 && n_edge > 0 {
        let p = edge_px[rng.gen_range(0..n_edge)];
        let run = rng.gen_range(1..=3.min(budget));
        let (mut y, mut x) = (p / w, p % w);
        for _ in 0..run {
            if out.pixels[y * w + x] > 0.5 {
                out.pixels[y * w + x] = 0.0;
                budget -= 1;
            }
            // Walk to any edge neighbor to erase a contiguous run.
            let mut moved = false;
            'walk: for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if (0..h as isize).contains(&ny)
                        && (0..w as isize).contains(&nx)
                        && out.pixels[ny as usize * w + nx as usize] > 0.5
                    {
                        y = ny as usize;
                        x = nx as usize;
                        moved = true;
                        break 'walk;
                    }
                }
            }
            if !moved || budget == 0 {
                break;
            }
        }
    }

    out
}
