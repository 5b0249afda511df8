//! Keypoint matching metrics: MMA, homography corner score, precision and
//! recall, plus warped-pair synthesis.

pub mod detect;
pub mod estimate;
pub mod io;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

pub use detect::baseline_detect_describe;

/// Projections whose homogeneous weight falls below this are at infinity.
const W_EPS: f64 = 1e-12;
const DET_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, score: f64) -> Self {
        Self { x, y, score }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub i1: usize,
    pub i2: usize,
    pub dist: f64,
}

pub type MatchSet = Vec<Match>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl Homography {
    /// Normalizes so that `h33 = 1` and rejects singular matrices.
    pub fn new(m: [[f64; 3]; 3]) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("homography", "entries must be finite"));
        }
        let s = m[2][2];
        if s.abs() < W_EPS {
            return Err(Error::invalid("homography", "h33 is zero and cannot be normalized"));
        }
        let h = Self {
            m: m.map(|r| r.map(|v| v / s)),
        };
        if h.det().abs() <= DET_EPS {
            return Err(Error::invalid("homography", format!("singular (det {:e})", h.det())));
        }
        Ok(h)
    }

    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            m: [[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]],
        }
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        self.m
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Result<Self> {
        let m = &self.m;
        let d = self.det();
        let adj = [
            [
                m[1][1] * m[2][2] - m[1][2] * m[2][1],
                m[0][2] * m[2][1] - m[0][1] * m[2][2],
                m[0][1] * m[1][2] - m[0][2] * m[1][1],
            ],
            [
                m[1][2] * m[2][0] - m[1][0] * m[2][2],
                m[0][0] * m[2][2] - m[0][2] * m[2][0],
                m[0][2] * m[1][0] - m[0][0] * m[1][2],
            ],
            [
                m[1][0] * m[2][1] - m[1][1] * m[2][0],
                m[0][1] * m[2][0] - m[0][0] * m[2][1],
                m[0][0] * m[1][1] - m[0][1] * m[1][0],
            ],
        ];
        Self::new(adj.map(|r| r.map(|v| v / d)))
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &Homography) -> Result<Self> {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.m[i][k] * first.m[k][j]).sum();
            }
        }
        Self::new(out)
    }

    /// Perspective projection of `(x, y)`; `None` when the point maps to
    /// infinity.
    pub fn project(&self, x: f64, y: f64) -> Option<[f64; 2]> {
        let m = &self.m;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        if w.abs() < W_EPS {
            return None;
        }
        Some([
            (m[0][0] * x + m[0][1] * y + m[0][2]) / w,
            (m[1][0] * x + m[1][1] * y + m[1][2]) / w,
        ])
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_dims(desc: &[Vec<f64>], dim: usize) -> Result<()> {
    if let Some(bad) = desc.iter().find(|d| d.len() != dim) {
        return Err(Error::shape(format!("descriptor length {dim}"), bad.len()));
    }
    Ok(())
}

/// Index of the nearest row, lowest index on ties.
fn nearest(query: &[f64], rows: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (k, r) in rows.iter().enumerate() {
        let d = sq_dist(query, r);
        if d < best.1 {
            best = (k, d);
        }
    }
    best.0
}

/// Mutual nearest neighbours under Euclidean distance, ordered by `i1`.
pub fn mutual_nn_matches(desc1: &[Vec<f64>], desc2: &[Vec<f64>]) -> Result<MatchSet> {
    if desc1.is_empty() || desc2.is_empty() {
        return Ok(Vec::new());
    }
    let dim = desc1[0].len();
    check_dims(desc1, dim)?;
    check_dims(desc2, dim)?;
    let back: Vec<usize> = desc2.iter().map(|d| nearest(d, desc1)).collect();
    Ok(desc1
        .iter()
        .enumerate()
        .filter_map(|(a, d)| {
            let b = nearest(d, desc2);
            (back[b] == a).then(|| Match {
                i1: a,
                i2: b,
                dist: sq_dist(d, &desc2[b]).sqrt(),
            })
        })
        .collect())
}

fn check_indices(matches: &[Match], n1: usize, n2: usize) -> Result<()> {
    if let Some(m) = matches.iter().find(|m| m.i1 >= n1 || m.i2 >= n2) {
        return Err(Error::invalid("matches", format!("pair ({}, {}) out of range ({n1}, {n2})", m.i1, m.i2)));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectMask {
    pub correct: Vec<bool>,
    /// Matches whose first keypoint projects to infinity (counted incorrect).
    pub at_infinity: Vec<usize>,
}

impl CorrectMask {
    pub fn count(&self) -> usize {
        self.correct.iter().filter(|&&c| c).count()
    }
}

/// A match is correct when `‖H·p1 − p2‖ ≤ t`.
pub fn correct_mask(matches: &[Match], kpts1: &[Keypoint], kpts2: &[Keypoint], h: &Homography, t: f64) -> Result<CorrectMask> {
    check_indices(matches, kpts1.len(), kpts2.len())?;
    let mut at_infinity = Vec::new();
    let correct = matches
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let (p, q) = (kpts1[m.i1], kpts2[m.i2]);
            match h.project(p.x, p.y) {
                Some([x, y]) => ((x - q.x).powi(2) + (y - q.y).powi(2)).sqrt() <= t,
                None => {
                    at_infinity.push(k);
                    false
                }
            }
        })
        .collect();
    Ok(CorrectMask { correct, at_infinity })
}

/// Keypoints, matches and ground truth of one image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairData {
    pub kpts1: Vec<Keypoint>,
    pub kpts2: Vec<Keypoint>,
    pub matches: MatchSet,
    pub h_true: Homography,
}

impl PairData {
    /// Fraction of correct matches; 0 for a pair without matches.
    pub fn ratio(&self, t: f64) -> Result<f64> {
        if self.matches.is_empty() {
            check_indices(&self.matches, self.kpts1.len(), self.kpts2.len())?;
            return Ok(0.0);
        }
        let mask = correct_mask(&self.matches, &self.kpts1, &self.kpts2, &self.h_true, t)?;
        Ok(mask.count() as f64 / self.matches.len() as f64)
    }
}

/// Mean over pairs of the per-pair correct ratio, for every threshold.
pub fn mma(pairs: &[PairData], thresholds: &[f64]) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::Empty("no pairs to evaluate".into()));
    }
    thresholds
        .iter()
        .map(|&t| {
            let sum = pairs.iter().map(|p| p.ratio(t)).sum::<Result<f64>>()?;
            Ok(sum / pairs.len() as f64)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CornerScore {
    pub mean_error: f64,
    pub correct: bool,
}

/// Image corners in the order top-left, bottom-left, top-right,
/// bottom-right.
pub fn image_corners(width: usize, height: usize) -> [[f64; 2]; 4] {
    let (w, h) = ((width as f64 - 1.0).max(0.0), (height as f64 - 1.0).max(0.0));
    [[0.0, 0.0], [0.0, h], [w, 0.0], [w, h]]
}

/// Mean distance between the four corners warped by each homography.
pub fn homography_score(h_true: &Homography, h_est: &Homography, width: usize, height: usize, eps: f64) -> Result<CornerScore> {
    let mut sum = 0.0;
    for [x, y] in image_corners(width, height) {
        let a = h_true.project(x, y);
        let b = h_est.project(x, y);
        let (Some(a), Some(b)) = (a, b) else {
            return Err(Error::invalid("homography", "a corner maps to infinity"));
        };
        sum += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    }
    let mean_error = sum / 4.0;
    Ok(CornerScore {
        mean_error,
        correct: mean_error <= eps,
    })
}

/// Fraction of pairs whose estimate is correct.
pub fn homography_accuracy(scores: &[CornerScore]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Empty("no homography scores".into()));
    }
    Ok(scores.iter().filter(|s| s.correct).count() as f64 / scores.len() as f64)
}

/// Position-space mutual nearest neighbours under `h` within `t` pixels.
pub fn true_matches(kpts1: &[Keypoint], kpts2: &[Keypoint], h: &Homography, t: f64) -> Vec<(usize, usize)> {
    let projected: Vec<Option<[f64; 2]>> = kpts1.iter().map(|k| h.project(k.x, k.y)).collect();
    let d2 = |a: usize, b: usize| -> f64 {
        match projected[a] {
            Some([x, y]) => (x - kpts2[b].x).powi(2) + (y - kpts2[b].y).powi(2),
            None => f64::INFINITY,
        }
    };
    let nearest_in = |n: usize, f: &dyn Fn(usize) -> f64| -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for k in 0..n {
            let d = f(k);
            if d.is_finite() && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((k, d));
            }
        }
        best.map(|b| b.0)
    };
    (0..kpts1.len())
        .filter_map(|a| {
            let b = nearest_in(kpts2.len(), &|b| d2(a, b))?;
            let back = nearest_in(kpts1.len(), &|a2| d2(a2, b))?;
            (back == a && d2(a, b).sqrt() <= t).then_some((a, b))
        })
        .collect()
}

/// `(#correct / #matches, #correct / #true)`, each 0 when its denominator
/// is.
pub fn precision_recall(matches: &[Match], mask: &CorrectMask, true_count: usize) -> Result<(f64, f64)> {
    if mask.correct.len() != matches.len() {
        return Err(Error::shape(format!("{} mask entries", matches.len()), mask.correct.len()));
    }
    let c = mask.count() as f64;
    let p = if matches.is_empty() { 0.0 } else { c / matches.len() as f64 };
    let r = if true_count == 0 { 0.0 } else { c / true_count as f64 };
    Ok((p, r))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhotometricJitter {
    pub gain: f64,
    pub bias: f64,
}

#[derive(Debug, Clone)]
pub struct WarpedPair {
    pub image: Image,
    pub h: Homography,
    pub jitter: Option<PhotometricJitter>,
}

fn bilinear(img: &Image, x: f64, y: f64, c: usize) -> Option<f64> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    if !(x >= 0.0 && y >= 0.0 && x <= w - 1.0 && y <= h - 1.0) {
        return None;
    }
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width() - 1), (y0 + 1).min(img.height() - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = img.get(x0, y0, c) * (1.0 - fx) + img.get(x1, y0, c) * fx;
    let bottom = img.get(x0, y1, c) * (1.0 - fx) + img.get(x1, y1, c) * fx;
    Some(top * (1.0 - fy) + bottom * fy)
}

/// Resamples `image` so that pixel `p` of the result shows `H⁻¹·p` of the
/// input; pixels mapping outside the frame are black.
pub fn warp_image(image: &Image, h: &Homography) -> Result<(Image, f64)> {
    let inv = h.inverse()?;
    let mut inside = 0usize;
    let out = Image::from_fn(image.height(), image.width(), |u, v| {
        let px = inv.project(u as f64, v as f64);
        let sample = |c| px.and_then(|[x, y]| bilinear(image, x, y, c));
        match (sample(0), sample(1), sample(2)) {
            (Some(r), Some(g), Some(b)) => {
                inside += 1;
                [r, g, b]
            }
            _ => [0.0; 3],
        }
    });
    Ok((out, inside as f64 / (image.width() * image.height()) as f64))
}

/// Warped second view of `image`, optionally with a random gain/bias.
pub fn warp_pair(image: &Image, h: &Homography, jitter_rng: Option<&mut dyn rand::RngCore>) -> Result<WarpedPair> {
    let (mut out, inside) = warp_image(image, h)?;
    if inside < 0.5 {
        return Err(Error::invalid("homography", format!("only {:.0}% of pixels stay in frame", inside * 100.0)));
    }
    let jitter = jitter_rng.map(|rng| PhotometricJitter {
        gain: rng.random_range(0.8..1.2),
        bias: rng.random_range(-0.1..0.1),
    });
    if let Some(j) = jitter {
        out = Image::from_fn(out.height(), out.width(), |u, v| {
            [0, 1, 2].map(|c| (out.get(u, v, c) * j.gain + j.bias).clamp(0.0, 1.0))
        });
    }
    Ok(WarpedPair { image: out, h: *h, jitter })
}

/// Random mild perspective warp about the image centre: rotation up to
/// `strength · 15°`, scale `1 ± 0.1·strength`, shift up to `strength · 5%`
/// and a small perspective term.
pub fn random_homography(rng: &mut impl Rng, width: usize, height: usize, strength: f64) -> Result<Homography> {
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let angle = rng.random_range(-1.0..=1.0) * strength * 15f64.to_radians();
    let scale = 1.0 + rng.random_range(-1.0..=1.0) * 0.1 * strength;
    let (tx, ty) = (
        rng.random_range(-1.0..=1.0) * strength * 0.05 * width as f64,
        rng.random_range(-1.0..=1.0) * strength * 0.05 * height as f64,
    );
    let (px, py) = (
        rng.random_range(-1.0..=1.0) * strength * 2e-4,
        rng.random_range(-1.0..=1.0) * strength * 2e-4,
    );
    let (c, s) = (angle.cos() * scale, angle.sin() * scale);
    let to_origin = Homography::translation(-cx, -cy);
    let core = Homography::new([[c, -s, 0.0], [s, c, 0.0], [px, py, 1.0]])?;
    let back = Homography::translation(cx + tx, cy + ty);
    back.compose(&core.compose(&to_origin)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn basis_vectors_match_identically() {
        let d: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| (i == j) as u8 as f64).collect()).collect();
        let m = mutual_nn_matches(&d, &d).unwrap();
        assert_eq!(m.iter().map(|m| (m.i1, m.i2)).collect::<Vec<_>>(), vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        assert!(mutual_nn_matches(&d, &[]).unwrap().is_empty());
        assert!(mutual_nn_matches(&d, &[vec![1.0; 3]]).is_err());
    }

    #[test]
    fn translation_distance_five() {
        let k = [Keypoint::new(10.0, 10.0, 1.0)];
        let m = [Match { i1: 0, i2: 0, dist: 0.0 }];
        let h = Homography::translation(3.0, 4.0);
        assert!(!correct_mask(&m, &k, &k, &h, 3.0).unwrap().correct[0]);
        assert!(correct_mask(&m, &k, &k, &h, 5.0).unwrap().correct[0]);
    }

    #[test]
    fn point_at_infinity_flagged() {
        let h = Homography::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]]).unwrap();
        let k1 = [Keypoint::new(-1.0, 0.0, 1.0)];
        let k2 = [Keypoint::new(0.0, 0.0, 1.0)];
        let mask = correct_mask(&[Match { i1: 0, i2: 0, dist: 0.0 }], &k1, &k2, &h, 3.0).unwrap();
        assert_eq!(mask.correct, vec![false]);
        assert_eq!(mask.at_infinity, vec![0]);
    }

    #[test]
    fn mma_is_mean_of_ratios() {
        let k = vec![Keypoint::new(0.0, 0.0, 1.0), Keypoint::new(50.0, 50.0, 1.0)];
        let good = PairData {
            kpts1: k.clone(),
            kpts2: k.clone(),
            matches: vec![Match { i1: 0, i2: 0, dist: 0.0 }],
            h_true: Homography::identity(),
        };
        let bad = PairData {
            matches: vec![Match { i1: 0, i2: 1, dist: 0.0 }, Match { i1: 1, i2: 0, dist: 0.0 }],
            ..good.clone()
        };
        assert_eq!(mma(&[good.clone(), bad], &[3.0]).unwrap(), vec![0.5]);
        let empty = PairData {
            matches: vec![],
            ..good.clone()
        };
        assert_eq!(mma(&[good, empty], &[3.0]).unwrap(), vec![0.5]);
        assert!(mma(&[], &[3.0]).is_err());
    }

    #[test]
    fn translation_corner_error() {
        let s = homography_score(&Homography::identity(), &Homography::translation(3.0, 4.0), 64, 48, 3.0).unwrap();
        assert_eq!(s.mean_error, 5.0);
        assert!(!s.correct);
        let s = homography_score(&Homography::identity(), &Homography::translation(1.8, 2.4), 64, 48, 3.0).unwrap();
        assert!(s.correct);
        assert!(Homography::new([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]]).is_err());
    }

    #[test]
    fn precision_recall_counting() {
        let matches: Vec<Match> = (0..10).map(|k| Match { i1: k, i2: k, dist: 0.0 }).collect();
        let mask = CorrectMask {
            correct: (0..10).map(|k| k < 6).collect(),
            at_infinity: vec![],
        };
        assert_eq!(precision_recall(&matches, &mask, 12).unwrap(), (0.6, 0.5));
        let none = CorrectMask {
            correct: vec![],
            at_infinity: vec![],
        };
        assert_eq!(precision_recall(&[], &none, 0).unwrap(), (0.0, 0.0));
    }

    #[test]
    fn identity_warp_is_exact() {
        let img = Image::from_fn(20, 24, |u, v| [u as f64 / 24.0, v as f64 / 20.0, 0.5]);
        let pair = warp_pair(&img, &Homography::identity(), None).unwrap();
        assert_eq!(pair.image, img);
        let far = Homography::translation(100.0, 0.0);
        assert!(warp_pair(&img, &far, None).is_err());
    }

    #[test]
    fn seeded_jitter_reproducible() {
        let img = Image::filled(16, 16, 0.5);
        let h = Homography::translation(1.0, 0.0);
        let mut r1 = ChaCha8Rng::seed_from_u64(3);
        let mut r2 = ChaCha8Rng::seed_from_u64(3);
        let a = warp_pair(&img, &h, Some(&mut r1)).unwrap();
        let b = warp_pair(&img, &h, Some(&mut r2)).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.jitter, b.jitter);
    }

    fn arb_h() -> impl Strategy<Value = Homography> {
        (any::<u64>(), 0.1f64..1.5).prop_map(|(seed, s)| {
            random_homography(&mut ChaCha8Rng::seed_from_u64(seed), 200, 150, s).unwrap()
        })
    }

    proptest! {
        #[test]
        fn project_inverse_roundtrip(h in arb_h(), x in 0.0f64..200.0, y in 0.0f64..150.0) {
            let [a, b] = h.project(x, y).unwrap();
            let [x2, y2] = h.inverse().unwrap().project(a, b).unwrap();
            prop_assert!((x2 - x).abs() < 1e-9 && (y2 - y).abs() < 1e-9);
        }

        #[test]
        fn corner_score_scale_invariant(h1 in arb_h(), h2 in arb_h(), k in 0.1f64..10.0) {
            let scaled = |h: &Homography| Homography::new(h.matrix().map(|r| r.map(|v| v * k))).unwrap();
            let a = homography_score(&h1, &h2, 200, 150, 3.0).unwrap();
            let b = homography_score(&scaled(&h1), &scaled(&h2), 200, 150, 3.0).unwrap();
            prop_assert!((a.mean_error - b.mean_error).abs() <= 1e-9 * (1.0 + a.mean_error));
        }

        #[test]
        fn mma_monotone_in_threshold(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k1: Vec<Keypoint> = (0..20).map(|_| Keypoint::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0), 1.0)).collect();
            let k2: Vec<Keypoint> = k1.iter().map(|k| Keypoint::new(k.x + rng.random_range(-6.0..6.0), k.y + rng.random_range(-6.0..6.0), 1.0)).collect();
            let matches = (0..20).map(|i| Match { i1: i, i2: rng.random_range(0..20), dist: 0.0 }).collect();
            let pair = PairData { kpts1: k1, kpts2: k2, matches, h_true: Homography::identity() };
            let curve = mma(&[pair], &[1.0, 2.0, 3.0, 5.0, 8.0, 13.0]).unwrap();
            prop_assert!(curve.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
