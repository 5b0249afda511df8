//! Independent reference implementations used to check library kernels.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use relight_core::eval::{random_homography, Homography, Keypoint, Match};
use relight_core::probe::{render_probe, ProbeSpec};

/// Lambertian sphere pixel with a Blinn highlight, coded from the geometric
/// description of the probe.
pub fn probe_pixel(s: &ProbeSpec, u: usize, v: usize) -> f64 {
    let c = (s.size as f64 - 1.0) / 2.0;
    let r = 0.45 * s.size as f64;
    let x = (u as f64 - c) / r;
    let y = (c - v as f64) / r;
    let rho2 = x * x + y * y;
    if rho2 > 1.0 {
        return s.background;
    }
    let n = [x, y, (1.0 - rho2).sqrt()];
    let (phi, theta) = (s.azimuth_deg.to_radians(), s.elevation_deg.to_radians());
    let l = [theta.cos() * phi.sin(), theta.sin(), theta.cos() * phi.cos()];
    let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let h = [l[0], l[1], l[2] + 1.0];
    let hn = dot(h, h).sqrt();
    let spec = if hn > 0.0 {
        let h = [h[0] / hn, h[1] / hn, h[2] / hn];
        s.specular_strength * dot(n, h).max(0.0).powf(s.specular_exponent)
    } else {
        0.0
    };
    (s.ambient + s.intensity * dot(n, l).max(0.0) + spec).clamp(0.0, 1.0)
}

/// Largest deviation of the rendered probe from [`probe_pixel`].
pub fn probe_error(s: &ProbeSpec) -> f64 {
    let p = render_probe(s).unwrap();
    let mut worst: f64 = 0.0;
    for v in 0..s.size {
        for u in 0..s.size {
            let want = probe_pixel(s, u, v);
            for c in 0..3 {
                worst = worst.max((p.image().get(u, v, c) - want).abs());
            }
        }
    }
    worst
}

pub fn random_spec(rng: &mut ChaCha8Rng) -> ProbeSpec {
    ProbeSpec {
        azimuth_deg: rng.random_range(-180.0..180.0),
        elevation_deg: rng.random_range(-90.0..=90.0),
        intensity: rng.random_range(0.0..1.5),
        ambient: rng.random_range(0.0..0.3),
        specular_strength: if rng.random_bool(0.5) { rng.random_range(0.0..0.8) } else { 0.0 },
        specular_exponent: rng.random_range(1.0..64.0),
        size: [8, 16, 33, 64][rng.random_range(0..4)],
        background: rng.random_range(0.0..1.0),
    }
}

pub fn project(m: &[[f64; 3]; 3], x: f64, y: f64) -> [f64; 2] {
    let w = m[2][0] * x + m[2][1] * y + m[2][2];
    [
        (m[0][0] * x + m[0][1] * y + m[0][2]) / w,
        (m[1][0] * x + m[1][1] * y + m[1][2]) / w,
    ]
}

pub fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub struct Instance {
    pub kpts1: Vec<Keypoint>,
    pub kpts2: Vec<Keypoint>,
    pub matches: Vec<Match>,
    pub h: Homography,
}

/// Up to 50 keypoints per side over a 64×48 frame; about half of the second
/// view sits near the true projection so every regime is exercised.
pub fn instance(rng: &mut ChaCha8Rng) -> Instance {
    let h = random_homography(rng, 64, 48, 1.0).unwrap();
    let n1 = rng.random_range(0..=50);
    let n2 = rng.random_range(0..=50);
    let kpts1: Vec<Keypoint> = (0..n1)
        .map(|_| Keypoint::new(rng.random_range(0.0..64.0), rng.random_range(0.0..48.0), 1.0))
        .collect();
    let kpts2: Vec<Keypoint> = (0..n2)
        .map(|k| {
            if k < n1 && rng.random_bool(0.5) {
                let [x, y] = h.project(kpts1[k].x, kpts1[k].y).unwrap();
                Keypoint::new(x + rng.random_range(-4.0..4.0), y + rng.random_range(-4.0..4.0), 1.0)
            } else {
                Keypoint::new(rng.random_range(0.0..64.0), rng.random_range(0.0..48.0), 1.0)
            }
        })
        .collect();
    let matches = if n1 == 0 || n2 == 0 {
        Vec::new()
    } else {
        (0..rng.random_range(0..=n1.min(n2)))
            .map(|_| Match {
                i1: rng.random_range(0..n1),
                i2: rng.random_range(0..n2),
                dist: 0.0,
            })
            .collect()
    };
    Instance {
        kpts1,
        kpts2,
        matches,
        h,
    }
}

pub fn mask(inst: &Instance, t: f64) -> Vec<bool> {
    let m = inst.h.matrix();
    inst.matches
        .iter()
        .map(|mt| {
            let p = inst.kpts1[mt.i1];
            let q = inst.kpts2[mt.i2];
            dist(project(&m, p.x, p.y), [q.x, q.y]) <= t
        })
        .collect()
}

/// Mean of per-pair correct ratios; pairs without matches count as 0.
pub fn mma(insts: &[Instance], t: f64) -> f64 {
    let mut sum = 0.0;
    for inst in insts {
        let m = mask(inst, t);
        sum += if m.is_empty() {
            0.0
        } else {
            m.iter().filter(|&&c| c).count() as f64 / m.len() as f64
        };
    }
    sum / insts.len() as f64
}

/// Mutual nearest neighbours in position space within `t` pixels, by
/// exhaustive search.
pub fn true_matches(inst: &Instance, t: f64) -> Vec<(usize, usize)> {
    let m = inst.h.matrix();
    let d = |a: usize, b: usize| {
        dist(
            project(&m, inst.kpts1[a].x, inst.kpts1[a].y),
            [inst.kpts2[b].x, inst.kpts2[b].y],
        )
    };
    let mut out = Vec::new();
    for a in 0..inst.kpts1.len() {
        let Some(b) = (0..inst.kpts2.len()).min_by(|&x, &y| d(a, x).total_cmp(&d(a, y))) else {
            continue;
        };
        let back = (0..inst.kpts1.len()).min_by(|&x, &y| d(x, b).total_cmp(&d(y, b))).unwrap();
        if back == a && d(a, b) <= t {
            out.push((a, b));
        }
    }
    out
}

pub fn precision_recall(inst: &Instance, t: f64) -> (f64, f64) {
    let correct = mask(inst, t).iter().filter(|&&c| c).count() as f64;
    let truth = true_matches(inst, t).len();
    let p = if inst.matches.is_empty() { 0.0 } else { correct / inst.matches.len() as f64 };
    let r = if truth == 0 { 0.0 } else { correct / truth as f64 };
    (p, r)
}

/// Mean distance of the four warped frame corners.
pub fn corner_error(a: &Homography, b: &Homography, w: usize, h: usize) -> f64 {
    let (ma, mb) = (a.matrix(), b.matrix());
    let corners = [
        [0.0, 0.0],
        [0.0, h as f64 - 1.0],
        [w as f64 - 1.0, 0.0],
        [w as f64 - 1.0, h as f64 - 1.0],
    ];
    corners
        .iter()
        .map(|&[x, y]| dist(project(&ma, x, y), project(&mb, x, y)))
        .sum::<f64>()
        / 4.0
}
