//! Point cloud representation, preprocessing filters and file ingestion.
//!
//! Filters are pure functions over [`PointCloud`]. The registration
//! preprocessing chain runs them in a fixed order: voxel grid, height,
//! intensity, range and finally random downsampling.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read};
use std::path::Path;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CloudIoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("malformed cloud file {path}: {reason}")]
    Format { path: String, reason: String },
}

impl CloudIoError {
    fn io(path: &Path, source: io::Error) -> Self {
        CloudIoError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    fn format(path: &Path, reason: impl Into<String>) -> Self {
        CloudIoError::Format {
            path: path.display().to_string(),
            reason: reason.into(),
        }
    }
}

/// A single LiDAR return in the sensor frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, z: f64, intensity: f64) -> Self {
        Self { x, y, z, intensity }
    }

    pub fn xyz(x: f64, y: f64, z: f64) -> Self {
        Self::new(x, y, z, 0.0)
    }

    #[inline]
    pub fn coords(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    /// Euclidean distance to the sensor origin.
    #[inline]
    pub fn range(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    #[inline]
    pub fn planar_range(&self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite() && self.intensity.is_finite()
    }
}

/// Ordered set of points, sensor origin at (0, 0, 0).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Point> {
        self.points.iter()
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.points.iter().map(Point::coords).collect()
    }

    fn retain(&self, keep: impl Fn(&Point) -> bool) -> PointCloud {
        PointCloud::new(self.points.iter().copied().filter(|p| keep(p)).collect())
    }
}

impl FromIterator<Point> for PointCloud {
    fn from_iter<T: IntoIterator<Item = Point>>(iter: T) -> Self {
        PointCloud::new(iter.into_iter().collect())
    }
}

/// Parameters of the registration preprocessing chain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    /// Voxel side length in meters.
    pub voxel_size: f64,
    pub z_lim: f64,
    pub i_lim: f64,
    pub r_lim: f64,
    pub n_p_max: usize,
    pub seed: u64,
}

impl Default for FilterParams {
    /// Values used for the campus robot (VLP-16 at 45k points per scan).
    fn default() -> Self {
        Self {
            voxel_size: 0.03,
            z_lim: 0.3,
            i_lim: 5.0,
            r_lim: 30.0,
            n_p_max: 10_000,
            seed: 0,
        }
    }
}

/// Pulls every point farther than `r_max` back along its ray onto the
/// sphere of radius `r_max`. Points at the origin are left untouched.
pub fn range_clamp(cloud: &PointCloud, r_max: f64) -> PointCloud {
    cloud
        .points
        .iter()
        .map(|p| {
            let r = p.range();
            if r > r_max && r > 0.0 {
                let s = r_max / r;
                Point::new(p.x * s, p.y * s, p.z * s, p.intensity)
            } else {
                *p
            }
        })
        .collect()
}

/// Replaces the points of every occupied cubic cell of side `l` by their
/// centroid (intensity averaged). Output is ordered by cell index.
pub fn voxel_grid_filter(cloud: &PointCloud, l: f64) -> PointCloud {
    assert!(l > 0.0, "voxel side length must be positive");
    let mut cells: BTreeMap<(i64, i64, i64), ([f64; 4], usize)> = BTreeMap::new();
    for p in &cloud.points {
        let key = (
            (p.x / l).floor() as i64,
            (p.y / l).floor() as i64,
            (p.z / l).floor() as i64,
        );
        let entry = cells.entry(key).or_insert(([0.0; 4], 0));
        entry.0[0] += p.x;
        entry.0[1] += p.y;
        entry.0[2] += p.z;
        entry.0[3] += p.intensity;
        entry.1 += 1;
    }
    cells
        .into_values()
        .map(|(sum, n)| {
            let n = n as f64;
            Point::new(sum[0] / n, sum[1] / n, sum[2] / n, sum[3] / n)
        })
        .collect()
}

/// Keeps points with `z >= z_lim`.
pub fn height_filter(cloud: &PointCloud, z_lim: f64) -> PointCloud {
    cloud.retain(|p| p.z >= z_lim)
}

/// Keeps points with `intensity >= i_lim`.
pub fn intensity_filter(cloud: &PointCloud, i_lim: f64) -> PointCloud {
    cloud.retain(|p| p.intensity >= i_lim)
}

/// Keeps points with range `<= r_lim`.
pub fn range_filter(cloud: &PointCloud, r_lim: f64) -> PointCloud {
    cloud.retain(|p| p.range() <= r_lim)
}

/// Uniform random subset of exactly `n_p_max` points (order preserved), or
/// the input itself when it is already small enough.
pub fn random_downsample(cloud: &PointCloud, n_p_max: usize, seed: u64) -> PointCloud {
    assert!(n_p_max > 0, "n_p_max must be positive");
    if cloud.len() <= n_p_max {
        return cloud.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, cloud.len(), n_p_max).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| cloud.points[i]).collect()
}

/// The five registration filters applied consecutively.
pub fn preprocess(cloud: &PointCloud, params: &FilterParams) -> PointCloud {
    let cloud = voxel_grid_filter(cloud, params.voxel_size);
    let cloud = height_filter(&cloud, params.z_lim);
    let cloud = intensity_filter(&cloud, params.i_lim);
    let cloud = range_filter(&cloud, params.r_lim);
    random_downsample(&cloud, params.n_p_max, params.seed)
}

/// Decodes a KITTI velodyne scan: packed little-endian `f32` quadruples.
pub fn load_kitti_bin(path: impl AsRef<Path>) -> Result<PointCloud, CloudIoError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CloudIoError::io(path, e))?;
    decode_kitti_bytes(&bytes).map_err(|reason| CloudIoError::format(path, reason))
}

pub fn decode_kitti_bytes(bytes: &[u8]) -> Result<PointCloud, String> {
    if !bytes.len().is_multiple_of(16) {
        return Err(format!(
            "length {} is not a multiple of 16 bytes",
            bytes.len()
        ));
    }
    Ok(bytes
        .chunks_exact(16)
        .map(|c| {
            let f = |o: usize| f32::from_le_bytes([c[o], c[o + 1], c[o + 2], c[o + 3]]) as f64;
            Point::new(f(0), f(4), f(8), f(12))
        })
        .collect())
}

pub fn write_kitti_bin(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<(), CloudIoError> {
    let path = path.as_ref();
    let mut bytes = Vec::with_capacity(cloud.len() * 16);
    for p in &cloud.points {
        for v in [p.x, p.y, p.z, p.intensity] {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| CloudIoError::io(path, e))
}

#[derive(Deserialize, Serialize)]
struct CsvRow {
    x: f64,
    y: f64,
    z: f64,
    intensity: f64,
}

/// Reads a CSV cloud with header `x,y,z,intensity`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<PointCloud, CloudIoError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| CloudIoError::io(path, e))?;
    read_csv(file).map_err(|reason| CloudIoError::format(path, reason))
}

pub fn read_csv(reader: impl Read) -> Result<PointCloud, String> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| e.to_string())?.clone();
    if headers.iter().collect::<Vec<_>>() != ["x", "y", "z", "intensity"] {
        return Err(format!("expected header x,y,z,intensity, got {:?}", headers));
    }
    let mut points = Vec::new();
    for (i, row) in rdr.deserialize::<CsvRow>().enumerate() {
        let row = row.map_err(|e| format!("row {}: {}", i + 1, e))?;
        let p = Point::new(row.x, row.y, row.z, row.intensity);
        if !p.is_finite() || p.intensity < 0.0 {
            return Err(format!("row {}: non-finite or negative-intensity point", i + 1));
        }
        points.push(p);
    }
    Ok(PointCloud::new(points))
}

pub fn write_csv(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<(), CloudIoError> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| CloudIoError::io(path, e))?;
    let mut w = csv::Writer::from_writer(io::BufWriter::new(file));
    for p in &cloud.points {
        w.serialize(CsvRow {
            x: p.x,
            y: p.y,
            z: p.z,
            intensity: p.intensity,
        })
        .map_err(|e| CloudIoError::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| CloudIoError::io(path, e))
}

/// Loads a cloud by extension: `.bin` as KITTI, anything else as CSV.
pub fn load_cloud(path: impl AsRef<Path>) -> Result<PointCloud, CloudIoError> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") => load_kitti_bin(path),
        _ => load_csv(path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cloud(pts: &[(f64, f64, f64, f64)]) -> PointCloud {
        pts.iter().map(|&(x, y, z, i)| Point::new(x, y, z, i)).collect()
    }

    #[test]
    fn clamp_examples() {
        let c = cloud(&[(50.0, 0.0, 0.0, 1.0), (3.0, 4.0, 0.0, 2.0), (30.0, 40.0, 0.0, 3.0)]);
        let out = range_clamp(&c, 40.0);
        assert_eq!(out.points[0], Point::new(40.0, 0.0, 0.0, 1.0));
        assert_eq!(out.points[1], c.points[1]);
        let p = out.points[2];
        assert!((p.x - 24.0).abs() < 1e-12 && (p.y - 32.0).abs() < 1e-12);
        assert!((p.range() - 40.0).abs() < 1e-12);
        assert!(range_clamp(&PointCloud::default(), 40.0).is_empty());
        let origin = cloud(&[(0.0, 0.0, 0.0, 0.0)]);
        assert_eq!(range_clamp(&origin, 1.0), origin);
    }

    #[test]
    fn voxel_examples() {
        let c = cloud(&[(0.1, 0.0, 0.0, 2.0), (0.2, 0.0, 0.0, 4.0)]);
        let out = voxel_grid_filter(&c, 1.0);
        assert_eq!(out.len(), 1);
        assert!((out.points[0].x - 0.15).abs() < 1e-12);
        assert_eq!(out.points[0].intensity, 3.0);
        assert!(voxel_grid_filter(&PointCloud::default(), 1.0).is_empty());

        let mut corners = Vec::new();
        for &x in &[-1.0, 1.0] {
            for &y in &[-1.0, 1.0] {
                for &z in &[-1.0, 1.0] {
                    corners.push(Point::xyz(x, y, z));
                }
            }
        }
        let corners = PointCloud::new(corners);
        // brute-force cell indices
        let mut keys: Vec<_> = corners
            .iter()
            .map(|p| (p.x.floor() as i64, p.y.floor() as i64, p.z.floor() as i64))
            .collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 8);
        assert_eq!(voxel_grid_filter(&corners, 1.0).len(), 8);
    }

    #[test]
    fn height_intensity_range_examples() {
        let c = cloud(&[(1.0, 0.0, 0.1, 2.0), (1.0, 0.0, 0.5, 7.0)]);
        assert_eq!(height_filter(&c, 0.3).points, vec![c.points[1]]);
        assert_eq!(height_filter(&c, -1e300), c);
        assert!(height_filter(&c, 10.0).is_empty());

        assert_eq!(intensity_filter(&c, 5.0).points, vec![c.points[1]]);
        assert_eq!(intensity_filter(&c, 0.0), c);
        assert!(intensity_filter(&PointCloud::default(), 5.0).is_empty());

        let r = cloud(&[(10.0, 0.0, 0.0, 0.0), (0.0, 35.0, 0.0, 0.0)]);
        assert_eq!(range_filter(&r, 30.0).points, vec![r.points[0]]);
        assert_eq!(range_filter(&r, 35.0), r);
        assert!(range_filter(&r, 5.0).is_empty());
    }

    #[test]
    fn boundary_points_survive() {
        let c = cloud(&[(3.0, 4.0, 0.3, 5.0)]);
        assert_eq!(height_filter(&c, 0.3).len(), 1);
        assert_eq!(intensity_filter(&c, 5.0).len(), 1);
        assert_eq!(range_filter(&c, c.points[0].range()).len(), 1);
    }

    #[test]
    fn downsample_examples() {
        let small = cloud(&[(1.0, 2.0, 3.0, 0.0); 5]);
        assert_eq!(random_downsample(&small, 10, 1), small);
        let big: PointCloud = (0..20_000).map(|i| Point::xyz(i as f64, 0.0, 0.0)).collect();
        let a = random_downsample(&big, 10_000, 42);
        let b = random_downsample(&big, 10_000, 42);
        assert_eq!(a.len(), 10_000);
        assert_eq!(a, b);
        assert!(a.points.windows(2).all(|w| w[0].x < w[1].x));
        assert_ne!(a, random_downsample(&big, 10_000, 43));
    }

    #[test]
    fn kitti_decode() {
        let mut bytes = Vec::new();
        for v in [1.0f32, 2.0, 3.0, 0.5] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let c = decode_kitti_bytes(&bytes).unwrap();
        assert_eq!(c.points, vec![Point::new(1.0, 2.0, 3.0, 0.5)]);
        assert!(decode_kitti_bytes(&[]).unwrap().is_empty());
        assert!(decode_kitti_bytes(&[0u8; 24]).is_err());
    }

    #[test]
    fn kitti_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bin");
        fs::write(&p, [0u8; 24]).unwrap();
        assert!(matches!(load_kitti_bin(&p), Err(CloudIoError::Format { .. })));
        assert!(matches!(
            load_kitti_bin(dir.path().join("missing.bin")),
            Err(CloudIoError::Io { .. })
        ));
    }

    #[test]
    fn csv_roundtrip_and_header_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let c = cloud(&[(1.5, -2.0, 0.25, 3.0), (0.0, 0.0, 1.0, 0.0)]);
        write_csv(&p, &c).unwrap();
        assert_eq!(load_cloud(&p).unwrap(), c);
        assert!(read_csv("a,b,c,d\n1,2,3,4\n".as_bytes()).is_err());
    }

    fn arb_cloud() -> impl Strategy<Value = PointCloud> {
        prop::collection::vec(
            (-60.0..60.0f64, -60.0..60.0f64, -5.0..5.0f64, 0.0..20.0f64),
            0..60,
        )
        .prop_map(|v| v.into_iter().map(|(x, y, z, i)| Point::new(x, y, z, i)).collect())
    }

    proptest! {
        #[test]
        fn clamp_idempotent_and_bounded(c in arb_cloud(), r in 1.0..80.0f64) {
            let once = range_clamp(&c, r);
            prop_assert_eq!(once.len(), c.len());
            prop_assert!(once.iter().all(|p| p.range() <= r * (1.0 + 1e-12)));
            let twice = range_clamp(&once, r);
            for (a, b) in once.iter().zip(twice.iter()) {
                prop_assert!((a.coords() - b.coords()).norm() < 1e-9);
            }
        }

        #[test]
        fn projection_filters_commute(c in arb_cloud(), z in -5.0..5.0f64, i in 0.0..20.0f64, r in 1.0..80.0f64) {
            let a = range_filter(&intensity_filter(&height_filter(&c, z), i), r);
            let b = height_filter(&range_filter(&intensity_filter(&c, i), r), z);
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(height_filter(&a, z), a.clone());
        }

        #[test]
        fn voxel_output_inside_cells(c in arb_cloud(), l in 0.1..10.0f64) {
            let out = voxel_grid_filter(&c, l);
            prop_assert!(out.len() <= c.len());
            let mut cells: Vec<(i64, i64, i64)> = c
                .iter()
                .map(|q| ((q.x / l).floor() as i64, (q.y / l).floor() as i64, (q.z / l).floor() as i64))
                .collect();
            cells.sort();
            cells.dedup();
            prop_assert_eq!(out.len(), cells.len());
            // BTreeMap ordering: output i belongs to the i-th sorted cell
            let tol = 1e-9 * l.max(60.0);
            for (p, k) in out.iter().zip(&cells) {
                for (v, ki) in [(p.x, k.0), (p.y, k.1), (p.z, k.2)] {
                    prop_assert!(v >= ki as f64 * l - tol && v <= (ki + 1) as f64 * l + tol);
                }
            }
        }
    }
}
