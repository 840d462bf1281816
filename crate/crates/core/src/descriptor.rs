//! Global scan descriptor: 32 scalar geometric features plus nine range
//! histograms, and the 41-entry comparison vector fed to the detector.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::pointcloud::{range_clamp, PointCloud};

pub const NUM_TYPE1: usize = 32;
pub const NUM_HISTOGRAMS: usize = 9;
pub const COMPARISON_LEN: usize = NUM_TYPE1 + NUM_HISTOGRAMS;

/// Relative tolerance used to decide whether a point was pulled onto the
/// clamping sphere.
const CLAMP_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum DescriptorError {
    #[error("cannot describe an empty point cloud")]
    EmptyCloud,
    #[error("descriptors were computed under different histogram specs")]
    SpecMismatch,
    #[error("histogram dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("histograms need at least two bins, got {0}")]
    TooFewBins(usize),
    #[error("invalid histogram spec: {0}")]
    InvalidSpec(String),
}

/// Bin widths of the nine range histograms and the clamping range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    #[serde(rename = "bins")]
    pub bin_widths: [f64; NUM_HISTOGRAMS],
    pub r_max: f64,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self {
            bin_widths: [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0, 10.0],
            r_max: 40.0,
        }
    }
}

impl HistogramSpec {
    pub fn new(bin_widths: [f64; NUM_HISTOGRAMS], r_max: f64) -> Result<Self, DescriptorError> {
        let spec = Self { bin_widths, r_max };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_r_max(r_max: f64) -> Self {
        Self {
            r_max,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DescriptorError> {
        if !(self.r_max > 0.0 && self.r_max.is_finite()) {
            return Err(DescriptorError::InvalidSpec(format!("r_max = {}", self.r_max)));
        }
        if let Some(b) = self.bin_widths.iter().find(|b| !(**b > 0.0 && b.is_finite())) {
            return Err(DescriptorError::InvalidSpec(format!("bin width {}", b)));
        }
        Ok(())
    }

    /// Number of annular bins for a histogram of width `b`.
    pub fn dimension(&self, k: usize) -> usize {
        (self.r_max / self.bin_widths[k]).ceil() as usize
    }

    pub fn dimensions(&self) -> [usize; NUM_HISTOGRAMS] {
        std::array::from_fn(|k| self.dimension(k))
    }

    /// Total number of reals in a descriptor under this spec.
    pub fn total_entries(&self) -> usize {
        NUM_TYPE1 + self.dimensions().iter().sum::<usize>()
    }

    /// Short stable hash identifying this spec, stored in detector models.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.r_max.to_le_bytes());
        for b in &self.bin_widths {
            h.update(b.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub type1: Vec<f64>,
    pub type2: Vec<Vec<u32>>,
    pub spec: HistogramSpec,
}

impl Descriptor {
    pub fn type1(&self) -> &[f64] {
        &self.type1
    }

    pub fn histograms(&self) -> &[Vec<u32>] {
        &self.type2
    }
}

/// Input of the loop detector: absolute type-I differences followed by one
/// Pearson correlation per histogram pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ComparisonVector(#[serde(with = "array41")] pub [f64; COMPARISON_LEN]);

mod array41 {
    use super::COMPARISON_LEN;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[f64; COMPARISON_LEN], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<[f64; COMPARISON_LEN], D::Error> {
        let v = Vec::<f64>::deserialize(d)?;
        v.try_into()
            .map_err(|v: Vec<f64>| serde::de::Error::invalid_length(v.len(), &"41 entries"))
    }
}

impl ComparisonVector {
    pub fn zeros() -> Self {
        Self([0.0; COMPARISON_LEN])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::Index<usize> for ComparisonVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Moments of a sample: mean, std, skewness and excess kurtosis. Degenerate
/// (zero-variance) samples report zero for the higher moments.
#[derive(Clone, Copy, Debug, Default)]
struct Moments {
    mean: f64,
    std: f64,
    skewness: f64,
    kurtosis: f64,
}

fn moments(v: &[f64]) -> Moments {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for x in v {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let std = m2.sqrt();
    // relative floor keeps rounding noise on constant data from producing huge moments
    if m2 <= 1e-24 * mean.abs().max(1.0).powi(2) {
        return Moments {
            mean,
            std: 0.0,
            skewness: 0.0,
            kurtosis: 0.0,
        };
    }
    Moments {
        mean,
        std,
        skewness: m3 / (m2 * std),
        kurtosis: m4 / (m2 * m2) - 3.0,
    }
}

/// Linear-interpolated percentile of sorted data, `q` in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let t = pos - lo as f64;
    sorted[lo] * (1.0 - t) + sorted[hi] * t
}

/// Algebraic least-squares sphere: returns (center distance from origin,
/// radius, RMS radial residual).
fn sphere_fit(pts: &[[f64; 3]]) -> (f64, f64, f64) {
    let n = pts.len();
    let mut a = DMatrix::<f64>::zeros(n, 4);
    let mut b = DVector::<f64>::zeros(n);
    for (i, p) in pts.iter().enumerate() {
        a[(i, 0)] = 2.0 * p[0];
        a[(i, 1)] = 2.0 * p[1];
        a[(i, 2)] = 2.0 * p[2];
        a[(i, 3)] = 1.0;
        b[i] = p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
    }
    // normal equations are 4x4; pseudo-inverse handles planar / collinear clouds
    let ata = a.transpose() * &a;
    let atb = a.transpose() * &b;
    let scale = ata.amax().max(1.0);
    let sol = ata
        .svd(true, true)
        .solve(&atb, 1e-12 * scale)
        .unwrap_or_else(|_| DVector::zeros(4));
    let c = [sol[0], sol[1], sol[2]];
    let c_norm2 = c[0] * c[0] + c[1] * c[1] + c[2] * c[2];
    let radius = (sol[3] + c_norm2).max(0.0).sqrt();
    let mut ss = 0.0;
    for p in pts {
        let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2)).sqrt();
        ss += (d - radius).powi(2);
    }
    (c_norm2.sqrt(), radius, (ss / n as f64).sqrt())
}

/// Eigenvalues of the point covariance, sorted descending. Values that are
/// rounding noise relative to the cloud's scale or to the largest
/// eigenvalue are snapped to zero.
fn covariance_eigenvalues(pts: &[[f64; 3]], centroid: [f64; 3]) -> [f64; 3] {
    let mut cov = Matrix3::<f64>::zeros();
    for p in pts {
        let d = nalgebra::Vector3::new(p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]);
        cov += d * d.transpose();
    }
    cov /= pts.len() as f64;
    let mut ev: Vec<f64> = SymmetricEigen::new(cov)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0))
        .collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    let scale2 = centroid.iter().map(|c| c * c).sum::<f64>() + 1.0;
    let floor = (1e-12 * ev[0]).max(1e-20 * scale2);
    for v in &mut ev {
        if *v <= floor {
            *v = 0.0;
        }
    }
    [ev[0], ev[1], ev[2]]
}

fn shape_features(ev: [f64; 3]) -> [f64; 5] {
    let [l1, l2, l3] = ev;
    if l1 <= 0.0 {
        return [0.0; 5];
    }
    let trace = l1 + l2 + l3;
    let entropy = ev
        .iter()
        .map(|l| l / trace)
        .filter(|l| *l > 0.0)
        .map(|l| -l * l.ln())
        .sum();
    [
        (l1 - l2) / l1,
        (l2 - l3) / l1,
        l3 / l1,
        (l1 * l2 * l3).cbrt(),
        entropy,
    ]
}

/// Computes the global descriptor of a scan. The cloud is clamped to
/// `spec.r_max` first; the type-I features are, in order:
///
/// | entries | feature |
/// |---|---|
/// | 1 | point count |
/// | 2-5 | range mean, std, skewness, excess kurtosis |
/// | 6-8 | range median, 25th and 75th percentile |
/// | 9-10 | max range, fraction of points pulled onto `r_max` |
/// | 11-16 | z mean, std, skewness, kurtosis, min, max |
/// | 17-18 | planar range mean and std |
/// | 19-21 | centroid distance, mean and std of distance to centroid |
/// | 22-24 | covariance eigenvalues, descending |
/// | 25-29 | linearity, planarity, sphericity, omnivariance, eigenentropy |
/// | 30-32 | fitted sphere: center distance, radius, RMS residual |
///
/// All of them are invariant to rotations about the sensor z-axis.
pub fn extract(cloud: &PointCloud, spec: &HistogramSpec) -> Result<Descriptor, DescriptorError> {
    if cloud.is_empty() {
        return Err(DescriptorError::EmptyCloud);
    }
    spec.validate()?;
    let n_raw_clamped = cloud
        .iter()
        .filter(|p| p.range() >= spec.r_max * (1.0 - CLAMP_EPS))
        .count();
    let clamped = range_clamp(cloud, spec.r_max);
    let pts: Vec<[f64; 3]> = clamped.iter().map(|p| [p.x, p.y, p.z]).collect();
    let n = pts.len();
    let nf = n as f64;

    let ranges: Vec<f64> = clamped.iter().map(|p| p.range()).collect();
    let zs: Vec<f64> = pts.iter().map(|p| p[2]).collect();
    let planar: Vec<f64> = clamped.iter().map(|p| p.planar_range()).collect();

    let mut sorted = ranges.clone();
    sorted.sort_by(f64::total_cmp);

    let r = moments(&ranges);
    let z = moments(&zs);
    let pl = moments(&planar);

    let mut centroid = [0.0; 3];
    for p in &pts {
        for k in 0..3 {
            centroid[k] += p[k];
        }
    }
    for c in &mut centroid {
        *c /= nf;
    }
    let centroid_dist =
        (centroid[0] * centroid[0] + centroid[1] * centroid[1] + centroid[2] * centroid[2]).sqrt();
    let to_centroid: Vec<f64> = pts
        .iter()
        .map(|p| {
            ((p[0] - centroid[0]).powi(2) + (p[1] - centroid[1]).powi(2) + (p[2] - centroid[2]).powi(2))
                .sqrt()
        })
        .collect();
    let tc = moments(&to_centroid);

    let ev = covariance_eigenvalues(&pts, centroid);
    let shape = shape_features(ev);
    let (sphere_center, sphere_radius, sphere_rms) = sphere_fit(&pts);

    let z_min = zs.iter().copied().fold(f64::INFINITY, f64::min);
    let z_max = zs.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let type1 = vec![
        nf,
        r.mean,
        r.std,
        r.skewness,
        r.kurtosis,
        percentile(&sorted, 0.5),
        percentile(&sorted, 0.25),
        percentile(&sorted, 0.75),
        sorted[n - 1],
        n_raw_clamped as f64 / nf,
        z.mean,
        z.std,
        z.skewness,
        z.kurtosis,
        z_min,
        z_max,
        pl.mean,
        pl.std,
        centroid_dist,
        tc.mean,
        tc.std,
        ev[0],
        ev[1],
        ev[2],
        shape[0],
        shape[1],
        shape[2],
        shape[3],
        shape[4],
        sphere_center,
        sphere_radius,
        sphere_rms,
    ];
    debug_assert_eq!(type1.len(), NUM_TYPE1);

    let type2 = (0..NUM_HISTOGRAMS)
        .map(|k| {
            let b = spec.bin_widths[k];
            let dim = spec.dimension(k);
            let mut h = vec![0u32; dim];
            for &rk in &ranges {
                // a clamped point sits on r_max, which belongs to the last shell
                let bin = ((rk / b).floor() as usize).min(dim - 1);
                h[bin] += 1;
            }
            h
        })
        .collect();

    Ok(Descriptor {
        type1,
        type2,
        spec: spec.clone(),
    })
}

/// Sample Pearson correlation; zero when either input has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, DescriptorError> {
    if a.len() != b.len() {
        return Err(DescriptorError::DimensionMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(DescriptorError::TooFewBins(a.len()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Ok(0.0);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

fn pearson_counts(a: &[u32], b: &[u32]) -> Result<f64, DescriptorError> {
    let a: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    pearson(&a, &b)
}

/// Builds the detector input for a descriptor pair.
pub fn compare(a: &Descriptor, b: &Descriptor) -> Result<ComparisonVector, DescriptorError> {
    if a.spec != b.spec {
        return Err(DescriptorError::SpecMismatch);
    }
    if a.type1.len() != NUM_TYPE1 || b.type1.len() != NUM_TYPE1 {
        return Err(DescriptorError::DimensionMismatch(a.type1.len(), b.type1.len()));
    }
    if a.type2.len() != NUM_HISTOGRAMS || b.type2.len() != NUM_HISTOGRAMS {
        return Err(DescriptorError::DimensionMismatch(a.type2.len(), b.type2.len()));
    }
    let mut out = [0.0; COMPARISON_LEN];
    for (o, (x, y)) in out.iter_mut().zip(a.type1.iter().zip(&b.type1)) {
        *o = (x - y).abs();
    }
    for k in 0..NUM_HISTOGRAMS {
        out[NUM_TYPE1 + k] = pearson_counts(&a.type2[k], &b.type2[k])?;
    }
    Ok(ComparisonVector(out))
}
