//! Feature-space correspondences and RANSAC outlier rejection.

use nalgebra::Vector3;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::features::FpfhSignature;
use super::transform::{estimate_rigid, is_collinear, RigidTransform};
use super::RegistrationError;

/// `(index in A, index in B)`.
pub type Correspondence = (usize, usize);

/// Nearest neighbour in B's 33-dimensional feature space for every feature
/// of A, by exhaustive search (ties go to the lower index).
pub fn match_correspondences(
    features_a: &[FpfhSignature],
    features_b: &[FpfhSignature],
) -> Result<Vec<Correspondence>, RegistrationError> {
    if features_a.is_empty() || features_b.is_empty() {
        return Err(RegistrationError::EmptyInput);
    }
    Ok(features_a
        .par_iter()
        .enumerate()
        .map(|(i, fa)| {
            let mut best = (0usize, f64::INFINITY);
            for (j, fb) in features_b.iter().enumerate() {
                let d = fa.distance_squared(fb);
                if d < best.1 {
                    best = (j, d);
                }
            }
            (i, best.0)
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct RansacOutcome {
    /// Inliers of the best round, in input order.
    pub inliers: Vec<Correspondence>,
    pub transform: RigidTransform,
    /// Rounds skipped because the sample was collinear or rank deficient.
    pub degenerate_samples: usize,
}

/// Seeded RANSAC over 3-correspondence samples. A correspondence is an
/// inlier when `|T a - b| < inlier_distance`. The first round reaching the
/// highest inlier count wins.
pub fn ransac_reject(
    correspondences: &[Correspondence],
    keypoints_a: &[Vector3<f64>],
    keypoints_b: &[Vector3<f64>],
    inlier_distance: f64,
    iterations: usize,
    seed: u64,
) -> Result<RansacOutcome, RegistrationError> {
    let n = correspondences.len();
    if n < 3 {
        return Err(RegistrationError::TooFewCorrespondences(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let thr2 = inlier_distance * inlier_distance;
    let mut best: Option<(usize, RigidTransform)> = None;
    let mut degenerate = 0usize;
    for _ in 0..iterations {
        let pick = index::sample(&mut rng, n, 3);
        let c: Vec<Correspondence> = pick.iter().map(|k| correspondences[k]).collect();
        let src: Vec<_> = c.iter().map(|&(a, _)| keypoints_a[a]).collect();
        let dst: Vec<_> = c.iter().map(|&(_, b)| keypoints_b[b]).collect();
        if is_collinear(&src[0], &src[1], &src[2]) || is_collinear(&dst[0], &dst[1], &dst[2]) {
            degenerate += 1;
            continue;
        }
        let Ok(t) = estimate_rigid(&src, &dst) else {
            degenerate += 1;
            continue;
        };
        let count = correspondences
            .iter()
            .filter(|&&(a, b)| (t.apply(&keypoints_a[a]) - keypoints_b[b]).norm_squared() < thr2)
            .count();
        if best.as_ref().is_none_or(|(c, _)| count > *c) {
            best = Some((count, t));
        }
    }
    let Some((_, transform)) = best else {
        return Err(RegistrationError::Degenerate);
    };
    let inliers = correspondences
        .iter()
        .copied()
        .filter(|&(a, b)| (transform.apply(&keypoints_a[a]) - keypoints_b[b]).norm_squared() < thr2)
        .collect();
    Ok(RansacOutcome {
        inliers,
        transform,
        degenerate_samples: degenerate,
    })
}

/// Least-squares transform over a correspondence set.
pub fn estimate_svd(
    correspondences: &[Correspondence],
    points_a: &[Vector3<f64>],
    points_b: &[Vector3<f64>],
) -> Result<RigidTransform, RegistrationError> {
    let src: Vec<_> = correspondences.iter().map(|&(a, _)| points_a[a]).collect();
    let dst: Vec<_> = correspondences.iter().map(|&(_, b)| points_b[b]).collect();
    estimate_rigid(&src, &dst)
}
