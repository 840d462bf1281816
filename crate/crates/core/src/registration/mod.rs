//! Coarse-to-fine scan registration with verification.
//!
//! Both clouds are preprocessed, FPFH signatures are computed on persistent
//! keypoints and matched in feature space, RANSAC rejects outlier
//! correspondences, SVD gives the initial alignment and ICP refines it. A
//! result is accepted only when both processed clouds are large enough,
//! enough inliers survive RANSAC and the final translation is short.

mod features;
mod icp;
mod kdtree;
mod matching;
mod transform;

use std::fmt;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pointcloud::{FilterParams, PointCloud};

pub use crate::pointcloud::preprocess;
pub use features::{
    compute_fpfh, compute_fpfh_with_tree, compute_normals, compute_normals_from, feature_bins, pair_features,
    salient_at_scale, select_persistent, FpfhSignature, FPFH_LEN, FPFH_NORMALIZATION,
};
pub use icp::{icp_refine, icp_refine_with_tree, IcpOutcome, IcpParams};
pub use kdtree::KdTree;
pub use matching::{estimate_svd, match_correspondences, ransac_reject, Correspondence, RansacOutcome};
pub use transform::{estimate_rigid, is_collinear, RigidTransform};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RegistrationError {
    #[error("need at least 3 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("degenerate (collinear or rank-deficient) configuration")]
    Degenerate,
    #[error("empty input")]
    EmptyInput,
    #[error("no correspondences within the match distance")]
    NoCorrespondences,
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationParams {
    pub filter: FilterParams,
    pub normal_radius: f64,
    pub fpfh_radius: f64,
    pub persistence_radii: Vec<f64>,
    /// Deviation factor of the persistence test.
    pub gamma: f64,
    pub ransac_iterations: usize,
    pub ransac_inlier_distance: f64,
    pub icp_max_iterations: usize,
    pub icp_epsilon: f64,
    /// ICP pairs farther apart than this are ignored.
    pub icp_max_distance: f64,
    pub n_p_min: usize,
    pub n_inliers: usize,
    pub t_max: f64,
    /// Optional upper bound on the final ICP residual; catches alignments
    /// that slid along repetitive structure.
    #[serde(default)]
    pub icp_max_residual: Option<f64>,
    pub seed: u64,
}

impl Default for RegistrationParams {
    /// Campus robot values; the feature radii are our own choice.
    fn default() -> Self {
        Self {
            filter: FilterParams::default(),
            normal_radius: 0.5,
            fpfh_radius: 1.0,
            persistence_radii: vec![0.75, 1.0, 1.25],
            gamma: 1.0,
            ransac_iterations: 1000,
            ransac_inlier_distance: 0.5,
            icp_max_iterations: 50,
            icp_epsilon: 1e-4,
            icp_max_distance: 1.0,
            n_p_min: 7_000,
            n_inliers: 1_000,
            t_max: 3.0,
            icp_max_residual: None,
            seed: 0,
        }
    }
}

impl RegistrationParams {
    pub fn campus() -> Self {
        Self::default()
    }

    /// Car-mounted HDL-64 on KITTI sequences.
    pub fn kitti() -> Self {
        Self {
            filter: FilterParams {
                voxel_size: 0.2,
                z_lim: 1.0,
                i_lim: 0.0,
                r_lim: 30.0,
                n_p_max: 10_000,
                seed: 0,
            },
            normal_radius: 1.0,
            fpfh_radius: 2.0,
            persistence_radii: vec![1.5, 2.0, 2.5],
            t_max: 10.0,
            ..Self::default()
        }
    }

    /// Small synthetic scans (a few thousand points) used in tests and demos.
    pub fn desk() -> Self {
        Self {
            filter: FilterParams {
                voxel_size: 0.1,
                z_lim: -0.8,
                i_lim: 0.0,
                r_lim: 30.0,
                n_p_max: 6_000,
                seed: 0,
            },
            normal_radius: 0.9,
            fpfh_radius: 1.8,
            persistence_radii: vec![1.35, 1.8],
            n_p_min: 500,
            n_inliers: 12,
            icp_max_residual: Some(0.25),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RegistrationError> {
        let bad = |s: &str| Err(RegistrationError::InvalidParams(s.to_string()));
        let f = &self.filter;
        if !(f.voxel_size > 0.0) || !(f.r_lim > 0.0) || f.n_p_max == 0 {
            return bad("filter parameters must be positive");
        }
        if !(self.normal_radius > 0.0) || !(self.fpfh_radius > 0.0) {
            return bad("feature radii must be positive");
        }
        if self.persistence_radii.len() < 2 || self.persistence_radii.iter().any(|r| !(*r > 0.0)) {
            return bad("need at least two positive persistence radii");
        }
        if !(self.gamma >= 0.0) || self.ransac_iterations == 0 || !(self.ransac_inlier_distance > 0.0) {
            return bad("ransac parameters must be positive");
        }
        if self.icp_max_iterations == 0 || !(self.icp_epsilon > 0.0) || !(self.icp_max_distance > 0.0) {
            return bad("icp parameters must be positive");
        }
        if self.n_p_min == 0 || self.n_p_min > f.n_p_max || self.n_inliers == 0 || !(self.t_max > 0.0) || self.icp_max_residual.is_some_and(|r| !(r > 0.0)) {
            return bad("verification thresholds out of range");
        }
        Ok(())
    }

    fn icp(&self) -> IcpParams {
        IcpParams {
            max_iterations: self.icp_max_iterations,
            epsilon: self.icp_epsilon,
            max_correspondence_distance: self.icp_max_distance,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    TooFewPoints,
    NoKeypoints,
    TooFewInliers,
    TranslationTooLarge,
    AlignmentFailed,
    PoorFit,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RejectReason::TooFewPoints => "too-few-points",
            RejectReason::NoKeypoints => "no-keypoints",
            RejectReason::TooFewInliers => "too-few-inliers",
            RejectReason::TranslationTooLarge => "translation-too-large",
            RejectReason::AlignmentFailed => "alignment-failed",
            RejectReason::PoorFit => "poor-fit",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "lowercase")]
pub enum Verdict {
    Accepted,
    Rejected(RejectReason),
}

impl Verdict {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Verdict::Accepted)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Accepted => f.write_str("accepted"),
            Verdict::Rejected(r) => write!(f, "rejected({r})"),
        }
    }
}

/// Outcome of [`register_pair`]. `transform` maps the current cloud into
/// the frame of the stored one; it is the identity when rejected early.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    pub inliers: usize,
    pub source_size: usize,
    pub target_size: usize,
    pub source_keypoints: usize,
    pub target_keypoints: usize,
    pub icp_residual: Option<f64>,
    pub verdict: Verdict,
}

impl RegistrationResult {
    fn rejected(source_size: usize, target_size: usize, reason: RejectReason) -> Self {
        Self {
            transform: RigidTransform::identity(),
            inliers: 0,
            source_size,
            target_size,
            source_keypoints: 0,
            target_keypoints: 0,
            icp_residual: None,
            verdict: Verdict::Rejected(reason),
        }
    }
}

struct Prepared {
    points: Vec<Vector3<f64>>,
    tree: KdTree,
    keypoints: Vec<usize>,
    signatures: Vec<Option<FpfhSignature>>,
}

fn prepare(points: Vec<Vector3<f64>>, params: &RegistrationParams) -> Prepared {
    let tree = KdTree::build(&points);
    let normals = compute_normals_from(&points, &tree, params.normal_radius, &Vector3::zeros());
    let mut per_radius: Vec<Vec<Option<FpfhSignature>>> = params
        .persistence_radii
        .iter()
        .map(|r| compute_fpfh_with_tree(&points, &normals, &tree, *r))
        .collect();
    let keypoints: Vec<usize> = select_persistent(&per_radius, params.gamma)
        .into_iter()
        .collect();
    let signatures = match params.persistence_radii.iter().position(|r| *r == params.fpfh_radius) {
        Some(k) => per_radius.swap_remove(k),
        None => compute_fpfh_with_tree(&points, &normals, &tree, params.fpfh_radius),
    };
    let keypoints = keypoints.into_iter().filter(|&i| signatures[i].is_some()).collect();
    Prepared {
        points,
        tree,
        keypoints,
        signatures,
    }
}

/// Register `cloud_c` (current scan) against `cloud_star` (stored scan).
/// Every failure is reported through the verdict.
pub fn register_pair(cloud_c: &PointCloud, cloud_star: &PointCloud, params: &RegistrationParams) -> RegistrationResult {
    let pc = preprocess(cloud_c, &params.filter);
    let ps = preprocess(cloud_star, &params.filter);
    let (nc, ns) = (pc.len(), ps.len());
    if nc < params.n_p_min || ns < params.n_p_min || nc == 0 || ns == 0 {
        return RegistrationResult::rejected(nc, ns, RejectReason::TooFewPoints);
    }
    let (a, b) = rayon::join(|| prepare(pc.positions(), params), || prepare(ps.positions(), params));
    let mut result = RegistrationResult::rejected(nc, ns, RejectReason::NoKeypoints);
    result.source_keypoints = a.keypoints.len();
    result.target_keypoints = b.keypoints.len();
    if a.keypoints.is_empty() || b.keypoints.is_empty() {
        return result;
    }
    let fa: Vec<FpfhSignature> = a.keypoints.iter().map(|&i| a.signatures[i].unwrap()).collect();
    let fb: Vec<FpfhSignature> = b.keypoints.iter().map(|&i| b.signatures[i].unwrap()).collect();
    let ka: Vec<Vector3<f64>> = a.keypoints.iter().map(|&i| a.points[i]).collect();
    let kb: Vec<Vector3<f64>> = b.keypoints.iter().map(|&i| b.points[i]).collect();
    let Ok(corr) = match_correspondences(&fa, &fb) else {
        return result;
    };
    let ransac = match ransac_reject(
        &corr,
        &ka,
        &kb,
        params.ransac_inlier_distance,
        params.ransac_iterations,
        params.seed,
    ) {
        Ok(r) => r,
        Err(_) => {
            result.verdict = Verdict::Rejected(RejectReason::TooFewInliers);
            return result;
        }
    };
    result.inliers = ransac.inliers.len();
    if result.inliers < params.n_inliers {
        result.verdict = Verdict::Rejected(RejectReason::TooFewInliers);
        return result;
    }
    let initial = match estimate_svd(&ransac.inliers, &ka, &kb) {
        Ok(t) => t,
        Err(_) => {
            result.verdict = Verdict::Rejected(RejectReason::AlignmentFailed);
            return result;
        }
    };
    let refined = match icp_refine_with_tree(&a.points, &b.tree, &initial, &params.icp()) {
        Ok(o) => o,
        Err(_) => {
            result.transform = initial;
            result.verdict = Verdict::Rejected(RejectReason::AlignmentFailed);
            return result;
        }
    };
    result.transform = refined.transform;
    result.icp_residual = Some(refined.residual);
    result.verdict = if refined.transform.translation.norm() > params.t_max {
        Verdict::Rejected(RejectReason::TranslationTooLarge)
    } else if params.icp_max_residual.is_some_and(|r| refined.residual > r) {
        Verdict::Rejected(RejectReason::PoorFit)
    } else {
        Verdict::Accepted
    };
    debug_assert!(!result.verdict.is_accepted() || verification_holds(&result, params));
    result
}

/// The three acceptance criteria, checked on a finished result.
pub fn verification_holds(result: &RegistrationResult, params: &RegistrationParams) -> bool {
    result.source_size >= params.n_p_min
        && result.target_size >= params.n_p_min
        && result.inliers >= params.n_inliers
        && result.transform.translation.norm() <= params.t_max
}
