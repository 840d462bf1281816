//! Surface normals, Fast Point Feature Histograms and multi-scale
//! persistence analysis.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;

use super::kdtree::KdTree;

pub const FPFH_BINS_PER_ANGLE: usize = 11;
pub const FPFH_LEN: usize = 3 * FPFH_BINS_PER_ANGLE;
/// Sum of every valid FPFH signature.
pub const FPFH_NORMALIZATION: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FpfhSignature(pub [f64; FPFH_LEN]);

impl FpfhSignature {
    pub fn zeros() -> Self {
        Self([0.0; FPFH_LEN])
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }

    pub fn distance_squared(&self, other: &FpfhSignature) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    pub fn l1(&self, other: &FpfhSignature) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).sum()
    }
}

/// Unit normals from the smallest eigenvector of the neighbourhood
/// covariance, flipped to face `viewpoint`. Points with fewer than three
/// points (themselves included) inside `radius` get `None`.
pub fn compute_normals_from(
    points: &[Vector3<f64>],
    tree: &KdTree,
    radius: f64,
    viewpoint: &Vector3<f64>,
) -> Vec<Option<Vector3<f64>>> {
    points
        .par_iter()
        .map(|p| {
            let nb = tree.within_radius(p, radius);
            if nb.len() < 3 {
                return None;
            }
            let n = nb.len() as f64;
            let mean = nb.iter().map(|(i, _)| tree.point(*i)).sum::<Vector3<f64>>() / n;
            let mut cov = Matrix3::zeros();
            for (i, _) in &nb {
                let d = tree.point(*i) - mean;
                cov += d * d.transpose();
            }
            let eig = SymmetricEigen::new(cov / n);
            let k = eig.eigenvalues.imin();
            let mut normal: Vector3<f64> = eig.eigenvectors.column(k).into_owned();
            let len = normal.norm();
            if !(len > 0.0) {
                return None;
            }
            normal /= len;
            if normal.dot(&(viewpoint - p)) < 0.0 {
                normal = -normal;
            }
            Some(normal)
        })
        .collect()
}

/// Normals oriented toward the sensor origin.
pub fn compute_normals(points: &[Vector3<f64>], radius: f64) -> Vec<Option<Vector3<f64>>> {
    assert!(radius > 0.0, "normal radius must be positive");
    let tree = KdTree::build(points);
    compute_normals_from(points, &tree, radius, &Vector3::zeros())
}

/// Darboux-frame angles `(theta, alpha, phi)` of a point pair, in the
/// convention where the source is the point whose normal makes the smaller
/// angle with the connecting line. `None` for coincident points or a
/// connecting line parallel to the source normal.
pub fn pair_features(
    p1: &Vector3<f64>,
    n1: &Vector3<f64>,
    p2: &Vector3<f64>,
    n2: &Vector3<f64>,
) -> Option<(f64, f64, f64)> {
    let mut dp = p2 - p1;
    let dist = dp.norm();
    if dist == 0.0 {
        return None;
    }
    let (mut ns, mut nt) = (*n1, *n2);
    let angle1 = ns.dot(&dp) / dist;
    let angle2 = nt.dot(&dp) / dist;
    let phi;
    if angle1.abs().acos() > angle2.abs().acos() {
        std::mem::swap(&mut ns, &mut nt);
        dp = -dp;
        phi = -angle2;
    } else {
        phi = angle1;
    }
    let v = dp.cross(&ns);
    let vn = v.norm();
    if vn == 0.0 {
        return None;
    }
    let v = v / vn;
    let w = ns.cross(&v);
    let alpha = v.dot(&nt);
    let theta = w.dot(&nt).atan2(ns.dot(&nt));
    Some((theta, alpha, phi))
}

fn bin(value: f64, lo: f64, hi: f64) -> usize {
    let b = (FPFH_BINS_PER_ANGLE as f64 * (value - lo) / (hi - lo)).floor();
    (b.max(0.0) as usize).min(FPFH_BINS_PER_ANGLE - 1)
}

/// Histogram slots of one pair feature triple.
pub fn feature_bins(theta: f64, alpha: f64, phi: f64) -> [usize; 3] {
    [
        bin(theta, -std::f64::consts::PI, std::f64::consts::PI),
        FPFH_BINS_PER_ANGLE + bin(alpha, -1.0, 1.0),
        2 * FPFH_BINS_PER_ANGLE + bin(phi, -1.0, 1.0),
    ]
}

/// Simplified point feature histogram: each third sums to one over the
/// valid neighbour pairs.
fn spfh(
    i: usize,
    neighbors: &[(usize, f64)],
    points: &[Vector3<f64>],
    normals: &[Option<Vector3<f64>>],
) -> Option<[f64; FPFH_LEN]> {
    let n_i = normals[i]?;
    let mut h = [0.0; FPFH_LEN];
    let mut count = 0usize;
    for &(j, _) in neighbors {
        if j == i {
            continue;
        }
        let Some(n_j) = normals[j] else { continue };
        if let Some((t, a, p)) = pair_features(&points[i], &n_i, &points[j], &n_j) {
            for slot in feature_bins(t, a, p) {
                h[slot] += 1.0;
            }
            count += 1;
        }
    }
    if count == 0 {
        return None;
    }
    for v in &mut h {
        *v /= count as f64;
    }
    Some(h)
}

/// Two-pass FPFH: `FPFH(p) = SPFH(p) + 1/k * sum_k SPFH(p_k) / |p - p_k|`,
/// rescaled to sum to [`FPFH_NORMALIZATION`]. Points without a valid normal
/// or without usable neighbours get `None`.
pub fn compute_fpfh_with_tree(
    points: &[Vector3<f64>],
    normals: &[Option<Vector3<f64>>],
    tree: &KdTree,
    radius: f64,
) -> Vec<Option<FpfhSignature>> {
    let neighborhoods: Vec<Vec<(usize, f64)>> =
        points.par_iter().map(|p| tree.within_radius(p, radius)).collect();
    let spfhs: Vec<Option<[f64; FPFH_LEN]>> = (0..points.len())
        .into_par_iter()
        .map(|i| spfh(i, &neighborhoods[i], points, normals))
        .collect();
    (0..points.len())
        .into_par_iter()
        .map(|i| {
            let own = spfhs[i]?;
            let mut acc = [0.0; FPFH_LEN];
            let mut k = 0usize;
            for &(j, d2) in &neighborhoods[i] {
                if j == i || d2 == 0.0 {
                    continue;
                }
                let Some(s) = &spfhs[j] else { continue };
                let w = 1.0 / d2.sqrt();
                for (a, v) in acc.iter_mut().zip(s) {
                    *a += w * v;
                }
                k += 1;
            }
            let mut h = own;
            if k > 0 {
                for (v, a) in h.iter_mut().zip(&acc) {
                    *v += a / k as f64;
                }
            }
            let total: f64 = h.iter().sum();
            if !(total > 0.0) {
                return None;
            }
            for v in &mut h {
                *v *= FPFH_NORMALIZATION / total;
            }
            Some(FpfhSignature(h))
        })
        .collect()
}

pub fn compute_fpfh(
    points: &[Vector3<f64>],
    normals: &[Option<Vector3<f64>>],
    radius: f64,
) -> Vec<Option<FpfhSignature>> {
    let tree = KdTree::build(points);
    compute_fpfh_with_tree(points, normals, &tree, radius)
}

/// Indices of points whose signature is unusual at every scale: at each
/// radius, a point is salient when the L1 distance of its signature to the
/// mean signature exceeds `mean + gamma * std` of those distances.
pub fn select_persistent(signatures_per_radius: &[Vec<Option<FpfhSignature>>], gamma: f64) -> Vec<usize> {
    assert!(signatures_per_radius.len() >= 2, "persistence needs at least two radii");
    let n = signatures_per_radius[0].len();
    let mut persistent = vec![true; n];
    for sigs in signatures_per_radius {
        assert_eq!(sigs.len(), n);
        let salient = salient_at_scale(sigs, gamma);
        for (p, s) in persistent.iter_mut().zip(salient) {
            *p &= s;
        }
    }
    (0..n).filter(|&i| persistent[i]).collect()
}

pub fn salient_at_scale(sigs: &[Option<FpfhSignature>], gamma: f64) -> Vec<bool> {
    let valid: Vec<&FpfhSignature> = sigs.iter().flatten().collect();
    if valid.is_empty() {
        return vec![false; sigs.len()];
    }
    let m = valid.len() as f64;
    let mut mean = FpfhSignature::zeros();
    for s in &valid {
        for (a, v) in mean.0.iter_mut().zip(&s.0) {
            *a += v / m;
        }
    }
    let dists: Vec<f64> = valid.iter().map(|s| s.l1(&mean)).collect();
    let mu = dists.iter().sum::<f64>() / m;
    let sd = (dists.iter().map(|d| (d - mu).powi(2)).sum::<f64>() / m).sqrt();
    let cut = mu + gamma * sd;
    // identical signatures: rounding in the mean must not make anything salient
    let noise = 1e-9 * FPFH_NORMALIZATION;
    sigs.iter()
        .map(|s| s.is_some_and(|s| {
            let d = s.l1(&mean);
            d > cut && d > noise
        }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use std::f64::consts::PI;

    fn plane(n: usize, step: f64, z: f64) -> Vec<Vector3<f64>> {
        let mut v = Vec::new();
        for i in 0..n {
            for j in 0..n {
                v.push(Vector3::new(i as f64 * step - 2.0, j as f64 * step - 2.0, z));
            }
        }
        v
    }

    fn fibonacci_sphere(n: usize, r: f64, c: Vector3<f64>) -> Vec<Vector3<f64>> {
        let golden = PI * (3.0 - 5f64.sqrt());
        (0..n)
            .map(|i| {
                let y = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let rad = (1.0 - y * y).sqrt();
                let th = golden * i as f64;
                c + r * Vector3::new(rad * th.cos(), y, rad * th.sin())
            })
            .collect()
    }

    #[test]
    fn plane_normals_point_up_or_down() {
        let pts = plane(15, 0.2, -1.0);
        let normals = compute_normals(&pts, 0.5);
        for n in normals {
            let n = n.unwrap();
            assert!((n.z.abs() - 1.0).abs() < 1e-6);
            // sensor above the plane
            assert!(n.z > 0.0);
        }
    }

    #[test]
    fn isolated_point_has_no_normal() {
        let mut pts = plane(5, 0.1, 0.0);
        pts.push(Vector3::new(50.0, 0.0, 0.0));
        let normals = compute_normals(&pts, 0.5);
        assert!(normals.last().unwrap().is_none());
    }

    #[test]
    fn sphere_normals_are_radial() {
        let c = Vector3::new(10.0, 0.0, 0.0);
        let pts = fibonacci_sphere(2000, 2.0, c);
        let normals = compute_normals(&pts, 0.4);
        for (p, n) in pts.iter().zip(&normals) {
            let radial = (p - c).normalize();
            let cos = n.unwrap().dot(&radial).abs();
            assert!(cos > (5f64).to_radians().cos(), "angle {}", cos.acos().to_degrees());
        }
    }

    #[test]
    fn two_point_fixture() {
        let p1 = Vector3::zeros();
        let p2 = Vector3::new(1.0, 0.0, 0.0);
        let up = Vector3::new(0.0, 0.0, 1.0);
        let (t, a, ph) = pair_features(&p1, &up, &p2, &up).unwrap();
        assert_eq!((t, a, ph), (0.0, 0.0, 0.0));
        assert_eq!(feature_bins(t, a, ph), [5, 16, 27]);

        // tilted target normal: the roles swap, theta = pi/4, phi = -cos(pi/4)
        let tilted = Vector3::new(1.0, 0.0, 1.0).normalize();
        let (t, a, ph) = pair_features(&p1, &up, &p2, &tilted).unwrap();
        assert!((t - PI / 4.0).abs() < 1e-12);
        assert!(a.abs() < 1e-12);
        assert!((ph + 0.5f64.sqrt()).abs() < 1e-12);
        assert_eq!(feature_bins(t, a, ph), [6, 16, 23]);
    }

    #[test]
    fn signatures_normalized_and_isolated_points_flagged() {
        let mut pts = fibonacci_sphere(600, 2.0, Vector3::new(5.0, 0.0, 0.0));
        pts.push(Vector3::new(-40.0, 0.0, 0.0));
        let normals = compute_normals(&pts, 0.5);
        let f = compute_fpfh(&pts, &normals, 0.8);
        assert!(f.last().unwrap().is_none());
        for s in f.iter().flatten() {
            assert!((s.sum() - FPFH_NORMALIZATION).abs() < 1e-9);
            assert!(s.0.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn fpfh_invariant_under_rigid_motion() {
        // a smooth bumpy surface with no antiparallel normals
        let mut pts = Vec::new();
        for i in 0..30 {
            for j in 0..30 {
                let (x, y) = (i as f64 * 0.13 + 0.011 * (j % 3) as f64, j as f64 * 0.13);
                pts.push(Vector3::new(x + 3.0, y, 0.3 * (x * 1.3).sin() * (y * 0.9).cos() - 1.5));
            }
        }
        let rot = Rotation3::from_euler_angles(0.2, -0.1, 1.1);
        let shift = Vector3::new(1.0, -2.0, 0.5);
        let moved: Vec<_> = pts.iter().map(|p| rot * p + shift).collect();
        let origin = Vector3::zeros();
        let view_moved = rot * origin + shift;
        let ta = KdTree::build(&pts);
        let tb = KdTree::build(&moved);
        let na = compute_normals_from(&pts, &ta, 0.35, &origin);
        let nb = compute_normals_from(&moved, &tb, 0.35, &view_moved);
        let fa = compute_fpfh_with_tree(&pts, &na, &ta, 0.5);
        let fb = compute_fpfh_with_tree(&moved, &nb, &tb, 0.5);
        let mut compared = 0;
        for (a, b) in fa.iter().zip(&fb) {
            if let (Some(a), Some(b)) = (a, b) {
                for k in 0..FPFH_LEN {
                    assert!((a.0[k] - b.0[k]).abs() < 1e-6);
                }
                compared += 1;
            }
        }
        assert!(compared > 800);
    }

    #[test]
    fn persistence_examples() {
        let pts = plane(20, 0.1, -1.0);
        let normals = compute_normals(&pts, 0.25);
        let sigs: Vec<_> = [0.25, 0.3].iter().map(|r| compute_fpfh(&pts, &normals, *r)).collect();
        // interior of a uniform plane is indistinguishable; only the rim can stand out
        let kp = select_persistent(&sigs, 1.0);
        for i in &kp {
            let p = pts[*i];
            assert!(p.x < -1.6 || p.x > -0.3 || p.y < -1.6 || p.y > -0.3);
        }
        assert!(select_persistent(&sigs, 1e9).is_empty());

        let same = vec![Some(FpfhSignature([100.0 / 33.0; FPFH_LEN])); 10];
        assert!(select_persistent(&[same.clone(), same], 0.0).is_empty());
    }

    #[test]
    fn corner_points_are_persistent() {
        // large floor plus a box corner standing on it
        let mut pts = Vec::new();
        for i in 0..40 {
            for j in 0..40 {
                pts.push(Vector3::new(i as f64 * 0.1, j as f64 * 0.1, -1.0));
            }
        }
        for i in 0..8 {
            for k in 1..8 {
                pts.push(Vector3::new(2.0 + i as f64 * 0.1, 2.0, -1.0 + k as f64 * 0.1));
                pts.push(Vector3::new(2.0, 2.0 + i as f64 * 0.1, -1.0 + k as f64 * 0.1));
            }
        }
        let normals = compute_normals(&pts, 0.25);
        let radii = [0.3, 0.4, 0.5];
        let sigs: Vec<_> = radii.iter().map(|r| compute_fpfh(&pts, &normals, *r)).collect();
        let kp = select_persistent(&sigs, 1.0);
        assert!(!kp.is_empty());
        // brute-force criterion: each keypoint is salient at every radius
        for s in &sigs {
            let sal = salient_at_scale(s, 1.0);
            assert!(kp.iter().all(|&i| sal[i]));
        }
        let near_structure = kp
            .iter()
            .filter(|&&i| {
                let p = pts[i];
                p.z > -0.95 || ((p.x - 2.0).abs() < 0.6 && (p.y - 2.0).abs() < 1.0)
                    || ((p.y - 2.0).abs() < 0.6 && (p.x - 2.0).abs() < 1.0)
                    || p.x < 0.35 || p.y < 0.35 || p.x > 3.55 || p.y > 3.55
            })
            .count();
        assert_eq!(near_structure, kp.len());
    }
}
