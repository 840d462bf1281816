//! Point-to-point ICP.

use nalgebra::Vector3;
use rayon::prelude::*;

use super::kdtree::KdTree;
use super::transform::{estimate_rigid, RigidTransform};
use super::RegistrationError;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IcpParams {
    pub max_iterations: usize,
    /// Stop once the update moves less than this (translation plus rotation
    /// angle in radians, both read as meters at unit lever arm).
    pub epsilon: f64,
    /// Pairs farther apart than this are not matched.
    pub max_correspondence_distance: f64,
}

impl Default for IcpParams {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            epsilon: 1e-4,
            max_correspondence_distance: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct IcpOutcome {
    pub transform: RigidTransform,
    /// Mean truncated squared residual at the final transform: each source
    /// point contributes `min(d², d_max²)`.
    pub residual: f64,
    /// Residual before each update, then at the final transform.
    pub residual_history: Vec<f64>,
    /// Source points matched within the correspondence distance at the end.
    pub matched: usize,
    pub iterations: usize,
    pub converged: bool,
}

fn residual(src: &[Vector3<f64>], tree: &KdTree, t: &RigidTransform, d2max: f64) -> (f64, Vec<(usize, usize)>) {
    let hits: Vec<(f64, Option<usize>)> = src
        .par_iter()
        .map(|p| {
            let (j, d2) = tree.nearest(&t.apply(p)).expect("non-empty tree");
            if d2 <= d2max {
                (d2, Some(j))
            } else {
                (d2max, None)
            }
        })
        .collect();
    let total: f64 = hits.iter().map(|h| h.0).sum();
    let pairs = hits.iter().enumerate().filter_map(|(i, h)| h.1.map(|j| (i, j))).collect();
    (total / src.len() as f64, pairs)
}

/// Refine `initial` so that `T a ≈ b`. The truncated residual cannot increase
/// between iterations: each update is the exact least-squares fit to the
/// current pairs, and re-pairing only shortens distances.
pub fn icp_refine(
    cloud_a: &[Vector3<f64>],
    cloud_b: &[Vector3<f64>],
    initial: &RigidTransform,
    params: &IcpParams,
) -> Result<IcpOutcome, RegistrationError> {
    if cloud_b.is_empty() {
        return Err(RegistrationError::EmptyInput);
    }
    let tree = KdTree::build(cloud_b);
    icp_refine_with_tree(cloud_a, &tree, initial, params)
}

pub fn icp_refine_with_tree(
    cloud_a: &[Vector3<f64>],
    tree_b: &KdTree,
    initial: &RigidTransform,
    params: &IcpParams,
) -> Result<IcpOutcome, RegistrationError> {
    if cloud_a.is_empty() || tree_b.is_empty() {
        return Err(RegistrationError::EmptyInput);
    }
    let d2max = params.max_correspondence_distance.powi(2);
    let mut t = *initial;
    let (mut res, mut pairs) = residual(cloud_a, tree_b, &t, d2max);
    if pairs.is_empty() {
        return Err(RegistrationError::NoCorrespondences);
    }
    let mut history = vec![res];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < params.max_iterations {
        iterations += 1;
        let src: Vec<_> = pairs.iter().map(|&(i, _)| cloud_a[i]).collect();
        let dst: Vec<_> = pairs.iter().map(|&(_, j)| *tree_b.point(j)).collect();
        let next = match estimate_rigid(&src, &dst) {
            Ok(n) => n,
            Err(_) => break,
        };
        let (dt, da) = t.difference(&next);
        let (r, p) = residual(cloud_a, tree_b, &next, d2max);
        if r > res || p.is_empty() {
            // only rounding can get here; keep the better transform
            converged = dt + da < params.epsilon;
            break;
        }
        t = next;
        res = r;
        pairs = p;
        history.push(res);
        if dt + da < params.epsilon {
            converged = true;
            break;
        }
    }
    Ok(IcpOutcome {
        transform: t,
        residual: res,
        residual_history: history,
        matched: pairs.len(),
        iterations,
        converged,
    })
}
