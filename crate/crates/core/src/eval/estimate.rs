//! Direct linear transform with RANSAC, for pairs that come without an
//! estimated homography.

use rand::seq::index::sample;
use rand::Rng;

use super::{Homography, Keypoint, Match};

/// Solves `a·x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Least-squares fit with `h33 = 1` over the given correspondences.
pub fn fit_homography(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Option<Homography> {
    if src.len() < 4 || src.len() != dst.len() {
        return None;
    }
    let mut ata = vec![vec![0.0; 8]; 8];
    let mut atb = vec![0.0; 8];
    for (&[x, y], &[u, v]) in src.iter().zip(dst) {
        for (row, rhs) in [
            ([x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y], u),
            ([0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y], v),
        ] {
            for i in 0..8 {
                for j in 0..8 {
                    ata[i][j] += row[i] * row[j];
                }
                atb[i] += row[i] * rhs;
            }
        }
    }
    let h = solve(ata, atb)?;
    Homography::new([[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]]).ok()
}

/// RANSAC over 4-point fits, refit on the largest inlier set.
pub fn estimate_homography(
    kpts1: &[Keypoint],
    kpts2: &[Keypoint],
    matches: &[Match],
    inlier_threshold: f64,
    iterations: usize,
    rng: &mut impl Rng,
) -> Option<Homography> {
    if matches.len() < 4 {
        return None;
    }
    let src: Vec<[f64; 2]> = matches.iter().map(|m| [kpts1[m.i1].x, kpts1[m.i1].y]).collect();
    let dst: Vec<[f64; 2]> = matches.iter().map(|m| [kpts2[m.i2].x, kpts2[m.i2].y]).collect();
    let inliers_of = |h: &Homography| -> Vec<usize> {
        (0..src.len())
            .filter(|&k| {
                h.project(src[k][0], src[k][1])
                    .is_some_and(|[x, y]| ((x - dst[k][0]).powi(2) + (y - dst[k][1]).powi(2)).sqrt() <= inlier_threshold)
            })
            .collect()
    };
    let mut best: Vec<usize> = Vec::new();
    for _ in 0..iterations {
        let pick = sample(rng, src.len(), 4).into_vec();
        let s: Vec<_> = pick.iter().map(|&k| src[k]).collect();
        let d: Vec<_> = pick.iter().map(|&k| dst[k]).collect();
        if let Some(h) = fit_homography(&s, &d) {
            let inl = inliers_of(&h);
            if inl.len() > best.len() {
                best = inl;
            }
        }
    }
    if best.len() < 4 {
        return None;
    }
    let s: Vec<_> = best.iter().map(|&k| src[k]).collect();
    let d: Vec<_> = best.iter().map(|&k| dst[k]).collect();
    fit_homography(&s, &d)
}
