//! Minimum-eigenvalue corner detector with gradient-histogram descriptors.

use super::Keypoint;
use crate::image::Image;

const WINDOW_RADIUS: usize = 2;
const NMS_RADIUS: f64 = 4.0;
/// Responses below this fraction of the strongest one are discarded.
const QUALITY: f64 = 0.01;
const PATCH: usize = 16;
const CELLS: usize = 4;
const BINS: usize = 8;
pub const DESCRIPTOR_LEN: usize = CELLS * CELLS * BINS;

struct Gray {
    w: usize,
    h: usize,
    px: Vec<f64>,
}

impl Gray {
    fn at(&self, u: isize, v: isize) -> f64 {
        let u = u.clamp(0, self.w as isize - 1) as usize;
        let v = v.clamp(0, self.h as isize - 1) as usize;
        self.px[v * self.w + u]
    }

    /// Central differences with clamped borders.
    fn grad(&self, u: isize, v: isize) -> (f64, f64) {
        (
            (self.at(u + 1, v) - self.at(u - 1, v)) / 2.0,
            (self.at(u, v + 1) - self.at(u, v - 1)) / 2.0,
        )
    }
}

fn min_eigen_map(g: &Gray) -> Vec<f64> {
    let (w, h) = (g.w, g.h);
    let mut xx = vec![0.0; w * h];
    let mut xy = vec![0.0; w * h];
    let mut yy = vec![0.0; w * h];
    for v in 1..h.saturating_sub(1) {
        for u in 1..w.saturating_sub(1) {
            let (gx, gy) = g.grad(u as isize, v as isize);
            xx[v * w + u] = gx * gx;
            xy[v * w + u] = gx * gy;
            yy[v * w + u] = gy * gy;
        }
    }
    let r = WINDOW_RADIUS;
    let mut out = vec![0.0; w * h];
    for v in r..h.saturating_sub(r) {
        for u in r..w.saturating_sub(r) {
            let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
            for y in v - r..=v + r {
                for x in u - r..=u + r {
                    a += xx[y * w + x];
                    b += xy[y * w + x];
                    c += yy[y * w + x];
                }
            }
            let half_diff = (a - c) / 2.0;
            out[v * w + u] = ((a + c) / 2.0 - (half_diff * half_diff + b * b).sqrt()).max(0.0);
        }
    }
    out
}

fn detect(g: &Gray, max_kpts: usize) -> Vec<Keypoint> {
    let (w, h) = (g.w, g.h);
    let resp = min_eigen_map(g);
    let top = resp.iter().cloned().fold(0.0, f64::max);
    if top <= 1e-12 {
        return Vec::new();
    }
    let floor = top * QUALITY;
    let m = WINDOW_RADIUS;
    let mut cands = Vec::new();
    for v in m..h.saturating_sub(m) {
        for u in m..w.saturating_sub(m) {
            let s = resp[v * w + u];
            if s < floor {
                continue;
            }
            let is_max = (v - 1..=v + 1).all(|y| (u - 1..=u + 1).all(|x| resp[y * w + x] <= s));
            if is_max {
                cands.push(Keypoint::new(u as f64, v as f64, s));
            }
        }
    }
    cands.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.y.total_cmp(&b.y)).then(a.x.total_cmp(&b.x)));
    let mut kept: Vec<Keypoint> = Vec::new();
    for c in cands {
        if kept.len() == max_kpts {
            break;
        }
        if kept.iter().all(|k| ((k.x - c.x).powi(2) + (k.y - c.y).powi(2)).sqrt() > NMS_RADIUS) {
            kept.push(c);
        }
    }
    kept
}

fn describe(g: &Gray, k: &Keypoint) -> Vec<f64> {
    let mut d = vec![0.0; DESCRIPTOR_LEN];
    let (cu, cv) = (k.x.round() as isize, k.y.round() as isize);
    let half = (PATCH / 2) as isize;
    let cell = PATCH / CELLS;
    for py in 0..PATCH {
        for px in 0..PATCH {
            let (gx, gy) = g.grad(cu - half + px as isize, cv - half + py as isize);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let angle = gy.atan2(gx) + std::f64::consts::PI;
            let bin = ((angle / std::f64::consts::TAU * BINS as f64) as usize).min(BINS - 1);
            d[((py / cell) * CELLS + px / cell) * BINS + bin] += mag;
        }
    }
    let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        d.iter_mut().for_each(|v| *v /= norm);
    } else {
        d.fill(1.0 / (DESCRIPTOR_LEN as f64).sqrt());
    }
    d
}

/// Up to `max_kpts` corners, strongest first, each with a unit-norm
/// descriptor.
pub fn baseline_detect_describe(image: &Image, max_kpts: usize) -> (Vec<Keypoint>, Vec<Vec<f64>>) {
    let g = Gray {
        w: image.width(),
        h: image.height(),
        px: image.to_gray(),
    };
    let kpts = detect(&g, max_kpts);
    let desc = kpts.iter().map(|k| describe(&g, k)).collect();
    (kpts, desc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::mutual_nn_matches;

    #[test]
    fn constant_image_has_no_keypoints() {
        let (k, d) = baseline_detect_describe(&Image::filled(32, 32, 0.4), 50);
        assert!(k.is_empty() && d.is_empty());
    }

    #[test]
    fn square_corners() {
        let img = Image::from_fn(64, 64, |u, v| {
            let inside = (16..48).contains(&u) && (16..48).contains(&v);
            [inside as u8 as f64; 3]
        });
        let (k, d) = baseline_detect_describe(&img, 8);
        assert_eq!(k.len(), 4, "{k:?}");
        for (cx, cy) in [(16.0, 16.0), (47.0, 16.0), (16.0, 47.0), (47.0, 47.0)] {
            let close = k.iter().filter(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt() <= 2.0).count();
            assert_eq!(close, 1, "corner ({cx}, {cy}) in {k:?}");
        }
        for v in &d {
            assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn copy_matches_identically() {
        let img = Image::from_fn(64, 64, |u, v| {
            let (x, y) = (u as f64, v as f64);
            let t = 0.5 + 0.25 * (x * 0.31).sin() * (y * 0.17).cos() + 0.2 * ((x * y) * 0.013).sin();
            [t, t, t]
        });
        let (k, d) = baseline_detect_describe(&img, 40);
        assert!(k.len() > 5);
        let m = mutual_nn_matches(&d, &d.clone()).unwrap();
        assert_eq!(m.len(), k.len());
        assert!(m.iter().all(|m| m.i1 == m.i2));
    }
}
