//! Canny edge detection.
//!
//! The classic pipeline: Gaussian blur, Sobel gradients, non-maximum
//! suppression along the quantized gradient direction (4 bins), double
//! threshold as fractions of the maximum gradient magnitude, hysteresis
//! by 8-connected flood from strong pixels.
//!
//! Numeric contract (any reference implementation must follow it to
//! match pixel for pixel):
//! - all intermediate math in f64; inputs are clamped-to-edge at borders
//! - blur kernel radius is ceil(3 * sigma); weights exp(-(dy^2+dx^2) /
//!   (2 sigma^2)) are accumulated unnormalized in (dy, dx) window order
//!   and the weight sum divides the result once per pixel
//! - Sobel taps accumulate in (dy, dx) order; magnitude is
//!   sqrt(gx^2 + gy^2)
//! - direction is atan2(gy, gx) in degrees folded into [0, 180), binned
//!   at 22.5/67.5/112.5/157.5; a pixel survives suppression when it is
//!   >= both neighbors along its bin; the outermost pixel ring never
//!   carries edges
//! - strong means magnitude > high * max, weak means > low * max

use crate::data::EdgeImage;
use crate::error::{Error, Result};

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Runs Canny on a grayscale image in [0, 1].
///
/// `low` and `high` are hysteresis thresholds as fractions of the
/// maximum gradient magnitude, `0 < low < high <= 1`.
pub fn canny(
    gray: &[f32],
    height: usize,
    width: usize,
    sigma: f32,
    low: f32,
    high: f32,
) -> Result<EdgeImage> {
    if !(0.0 < low && low < high && high <= 1.0) {
        return Err(Error::config(format!(
            "canny thresholds need 0 < low < high <= 1, got low={low} high={high}"
        )));
    }
    if sigma <= 0.0 {
        return Err(Error::config(format!("canny sigma must be positive, got {sigma}")));
    }
    if gray.len() != width * height {
        return Err(Error::config("canny input size mismatch"));
    }

    let clamp_at = |y: isize, x: isize| -> usize {
        let yy = y.clamp(0, height as isize - 1) as usize;
        let xx = x.clamp(0, width as isize - 1) as usize;
        yy * width + xx
    };

    // Gaussian blur.
    let radius = (3.0 * sigma as f64).ceil() as isize;
    let two_s2 = 2.0 * (sigma as f64) * (sigma as f64);
    let side = (2 * radius + 1) as usize;
    let mut kernel = vec![0.0f64; side * side];
    let mut ksum = 0.0f64;
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let v = (-((dy * dy + dx * dx) as f64) / two_s2).exp();
            kernel[((dy + radius) * (2 * radius + 1) + dx + radius) as usize] = v;
            ksum += v;
        }
    }
    let mut blurred = vec![0.0f64; width * height];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut acc = 0.0f64;
            for dy in -radius..=radius {
                for dx in -radius..=radius {
                    let k = kernel[((dy + radius) * (2 * radius + 1) + dx + radius) as usize];
                    acc += k * gray[clamp_at(y + dy, x + dx)] as f64;
                }
            }
            blurred[(y * width as isize + x) as usize] = acc / ksum;
        }
    }

    // Sobel gradients and magnitude.
    let mut gx = vec![0.0f64; width * height];
    let mut gy = vec![0.0f64; width * height];
    let mut mag = vec![0.0f64; width * height];
    let mut max_mag = 0.0f64;
    for y in 0..height as isize {
        for x in 0..width as isize {
            let mut sx = 0.0f64;
            let mut sy = 0.0f64;
            for dy in 0..3isize {
                for dx in 0..3isize {
                    let v = blurred[clamp_at(y + dy - 1, x + dx - 1)];
                    sx += SOBEL_X[dy as usize][dx as usize] * v;
                    sy += SOBEL_Y[dy as usize][dx as usize] * v;
                }
            }
            let at = (y * width as isize + x) as usize;
            gx[at] = sx;
            gy[at] = sy;
            mag[at] = (sx * sx + sy * sy).sqrt();
            max_mag = max_mag.max(mag[at]);
        }
    }

    // Non-maximum suppression on the interior.
    let mut thin = vec![0.0f64; width * height];
    if width >= 3 && height >= 3 {
        for y in 1..height - 1 {
            for x in 1..width - 1 {
                let at = y * width + x;
                let mut angle = gy[at].atan2(gx[at]).to_degrees();
                if angle < 0.0 {
                    angle += 180.0;
                }
                let (n1, n2) = if !(22.5..157.5).contains(&angle) {
                    (at - 1, at + 1)
                } else if angle < 67.5 {
                    (at + width + 1, at - width - 1)
                } else if angle < 112.5 {
                    (at - width, at + width)
                } else {
                    (at + width - 1, at - width + 1)
                };
                if mag[at] >= mag[n1] && mag[at] >= mag[n2] {
                    thin[at] = mag[at];
                }
            }
        }
    }

    // Double threshold and hysteresis flood from strong pixels.
    let high_t = high as f64 * max_mag;
    let low_t = low as f64 * max_mag;
    let mut out = EdgeImage::new(width, height);
    let mut stack = Vec::new();
    for y in 1..height.saturating_sub(1) {
        for x in 1..width.saturating_sub(1) {
            let at = y * width + x;
            if thin[at] > high_t && out.pixels[at] == 0.0 {
                out.pixels[at] = 1.0;
                stack.push((y, x));
                while let Some((cy, cx)) = stack.pop() {
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let (ny, nx) = (cy as isize + dy, cx as isize + dx);
                            if ny < 1
                                || nx < 1
                                || ny >= height as isize - 1
                                || nx >= width as isize - 1
                            {
                                continue;
                            }
                            let nat = ny as usize * width + nx as usize;
                            if out.pixels[nat] == 0.0 && thin[nat] > low_t {
                                out.pixels[nat] = 1.0;
                                stack.push((ny as usize, nx as usize));
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(gray: &[f32], h: usize, w: usize, low: f32, high: f32) -> EdgeImage {
        canny(gray, h, w, 1.4, low, high).unwrap()
    }

    #[test]
    fn constant_image_has_no_edges() {
        let g = vec![0.5f32; 24 * 24];
        let e = run(&g, 24, 24, 0.1, 0.2);
        assert_eq!(e.edge_pixel_count(), 0);
    }

    #[test]
    fn rejects_bad_thresholds() {
        let g = vec![0.0f32; 16];
        assert!(canny(&g, 4, 4, 1.4, 0.2, 0.1).is_err());
        assert!(canny(&g, 4, 4, 1.4, 0.0, 0.2).is_err());
        assert!(canny(&g, 4, 4, 1.4, 0.1, 1.5).is_err());
        assert!(canny(&g, 4, 4, -1.0, 0.1, 0.2).is_err());
    }

    #[test]
    fn output_is_binary_and_near_the_square_border() {
        let (h, w) = (32usize, 32usize);
        let mut g = vec![0.0f32; h * w];
        for y in 11..21 {
            for x in 11..21 {
                g[y * w + x] = 1.0;
            }
        }
        let e = run(&g, h, w, 0.1, 0.2);
        assert!(e.is_binary());
        assert!(e.edge_pixel_count() > 0);
        for y in 0..h {
            for x in 0..w {
                if e.pixels[y * w + x] > 0.5 {
                    // Every edge pixel hugs the square boundary band.
                    let near_y = (8..=23).contains(&y);
                    let near_x = (8..=23).contains(&x);
                    assert!(near_y && near_x, "stray edge at ({y},{x})");
                    let inside_core = (13..=18).contains(&y) && (13..=18).contains(&x);
                    assert!(!inside_core, "edge inside the flat core at ({y},{x})");
                }
            }
        }
    }

    // A vertical step edge whose height ramps from strong to weak: the
    // weak tail survives through hysteresis while the same tail behind
    // a flat gap is isolated and suppressed.
    #[test]
    fn hysteresis_keeps_connected_weak_segments_only() {
        let (h, w) = (24usize, 24usize);
        let make = |gap: bool| {
            let mut g = vec![0.0f32; h * w];
            for y in 0..h {
                let right = if gap && (12..16).contains(&y) {
                    0.0
                } else if y < 8 {
                    1.0
                } else if y < 16 {
                    1.0 - 0.72 * (y - 8) as f32 / 8.0
                } else {
                    0.28
                };
                for x in 12..w {
                    g[y * w + x] = right;
                }
            }
            g
        };
        let connected = run(&make(false), h, w, 0.08, 0.5);
        let severed = run(&make(true), h, w, 0.08, 0.5);
        let weak_tail_count = |e: &EdgeImage| {
            (19..=22)
                .flat_map(|y| (10..16).map(move |x| (y, x)))
                .filter(|&(y, x)| e.pixels[y * w + x] > 0.5)
                .count()
        };
        assert!(
            weak_tail_count(&connected) > 0,
            "connected weak segment should survive"
        );
        assert_eq!(
            weak_tail_count(&severed),
            0,
            "isolated weak segment should be suppressed"
        );
    }

    #[test]
    fn no_isolated_weak_pixels_survive() {
        // Every output pixel must be 8-connected through edges to a
        // strong pixel; verify by recomputing reachability.
        let (h, w) = (20usize, 20usize);
        let mut g = vec![0.0f32; h * w];
        let mut s = 17u64;
        for v in &mut g {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            *v = ((s >> 33) % 1000) as f32 / 1000.0;
        }
        let e = run(&g, h, w, 0.1, 0.2);
        if e.edge_pixel_count() == 0 {
            return;
        }
        // Recompute strong pixels the same way the detector defines them
        // is not available here, so instead check connectivity of the
        // output to itself: every edge pixel has at least one edge
        // neighbor unless it is the lone seed of its component (strong).
        // Flood the output and require one component per seed to touch
        // at least one pixel that also survives a higher-threshold run.
        let strong_only = run(&g, h, w, 0.199, 0.2);
        let mut seen = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let at = y * w + x;
                if e.pixels[at] < 0.5 || seen[at] {
                    continue;
                }
                let mut component = vec![];
                let mut stack = vec![(y, x)];
                seen[at] = true;
                while let Some((cy, cx)) = stack.pop() {
                    component.push((cy, cx));
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let (ny, nx) = (cy as isize + dy, cx as isize + dx);
                            if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                                continue;
                            }
                            let nat = ny as usize * w + nx as usize;
                            if e.pixels[nat] > 0.5 && !seen[nat] {
                                seen[nat] = true;
                                stack.push((ny as usize, nx as usize));
                            }
                        }
                    }
                }
                let has_strong = component
                    .iter()
                    .any(|&(cy, cx)| strong_only.pixels[cy * w + cx] > 0.5);
                assert!(
                    has_strong,
                    "component around ({y},{x}) has no strong pixel"
                );
            }
        }
    }
}
