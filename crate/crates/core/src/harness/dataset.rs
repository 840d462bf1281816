//! Scan datasets on disk: manifest, pose files and the descriptor cache.

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::descriptor::{extract, Descriptor, DescriptorError, HistogramSpec};
use crate::pointcloud::{load_cloud, CloudIoError, PointCloud};
use crate::posegraph::Pose2;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {reason}")]
    PoseFormat { path: PathBuf, line: usize, reason: String },
    #[error("{scans} scans but {poses} poses")]
    CountMismatch { scans: usize, poses: usize },
    #[error("scan {index} ({path}): {source}")]
    Scan {
        index: usize,
        path: PathBuf,
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("session boundaries must start at 0, increase strictly and stay below {0}")]
    Sessions(usize),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Which plane of the pose file is the ground.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroundPlane {
    /// z up (robot and synthetic data).
    #[default]
    Xy,
    /// Camera convention with y down and z forward (KITTI ground truth).
    Xz,
}

fn default_loop_distance() -> f64 {
    crate::detector::DEFAULT_LOOP_DISTANCE
}

/// Relative paths are resolved against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub scan_dir: PathBuf,
    pub pose_file: PathBuf,
    #[serde(default)]
    pub odometry_file: Option<PathBuf>,
    /// First node index of every session.
    #[serde(default)]
    pub sessions: Vec<usize>,
    #[serde(default)]
    pub spec: HistogramSpec,
    #[serde(default)]
    pub cache: Option<PathBuf>,
    #[serde(default = "default_loop_distance")]
    pub loop_distance: f64,
    #[serde(default)]
    pub ground_plane: GroundPlane,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, PathBuf), DatasetError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| DatasetError::Manifest(e.to_string()))?;
        m.spec.validate()?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((m, base))
    }

    fn resolve(base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }
}

/// One 3x4 row-major pose per line.
pub fn read_kitti_poses(path: impl AsRef<Path>) -> Result<Vec<[f64; 12]>, DatasetError> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
        let vals = vals.map_err(|e| DatasetError::PoseFormat {
            path: path.to_path_buf(),
            line: n + 1,
            reason: e.to_string(),
        })?;
        let row: [f64; 12] = vals.try_into().map_err(|v: Vec<f64>| DatasetError::PoseFormat {
            path: path.to_path_buf(),
            line: n + 1,
            reason: format!("expected 12 values, got {}", v.len()),
        })?;
        out.push(row);
    }
    Ok(out)
}

/// Planar pose and 3D position of a 3x4 pose row.
pub fn planar_pose(m: &[f64; 12], plane: GroundPlane) -> (Pose2, [f64; 3]) {
    let t = [m[3], m[7], m[11]];
    let pose = match plane {
        GroundPlane::Xy => Pose2::new(t[0], t[1], m[4].atan2(m[0])),
        // forward axis z maps to planar x, left (-x) to planar y
        GroundPlane::Xz => Pose2::new(t[2], -t[0], (-m[2]).atan2(m[10])),
    };
    (pose, t)
}

/// Writes planar poses as 3x4 rows with the given height.
pub fn write_kitti_poses(path: impl AsRef<Path>, poses: &[Pose2], height: f64) -> io::Result<()> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    for p in poses {
        let (s, c) = p.theta.sin_cos();
        writeln!(f, "{c:e} {:e} 0e0 {:e} {s:e} {c:e} 0e0 {:e} 0e0 0e0 1e0 {height:e}", -s, p.x, p.y)?;
    }
    f.flush()
}

pub fn list_scans(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>, DatasetError> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("bin" | "csv")))
        .collect();
    files.sort();
    Ok(files)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetNode {
    pub index: usize,
    pub session: u32,
    pub truth: Pose2,
    pub position: [f64; 3],
    pub odometry: Option<Pose2>,
    pub descriptor: Descriptor,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: HistogramSpec,
    pub loop_distance: f64,
    pub sessions: Vec<usize>,
    pub nodes: Vec<DatasetNode>,
    #[serde(skip)]
    pub scan_paths: Vec<PathBuf>,
    #[serde(skip)]
    pub cache_hit: bool,
}

impl Dataset {
    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.nodes.iter().map(|n| n.position).collect()
    }

    pub fn descriptors(&self) -> Vec<Descriptor> {
        self.nodes.iter().map(|n| n.descriptor.clone()).collect()
    }

    pub fn load_scan(&self, index: usize) -> Result<PointCloud, DatasetError> {
        let path = &self.scan_paths[index];
        load_cloud(path).map_err(|e| scan_error(index, path, e))
    }
}

fn scan_error(index: usize, path: &Path, e: CloudIoError) -> DatasetError {
    DatasetError::Scan {
        index,
        path: path.to_path_buf(),
        source: Box::new(e),
    }
}

#[derive(Serialize, Deserialize)]
struct CacheFile {
    key: String,
    nodes: Vec<DatasetNode>,
}

pub fn session_of(sessions: &[usize], index: usize) -> u32 {
    sessions.iter().filter(|&&s| s <= index).count().saturating_sub(1) as u32
}

/// Decode every scan, extract descriptors and attach poses. With a cache
/// path, a cache whose key (a hash of every input file) matches is reused
/// and no descriptor is recomputed.
pub fn build_dataset(manifest: &DatasetManifest, base: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let base = base.as_ref();
    manifest.spec.validate()?;
    let scan_dir = DatasetManifest::resolve(base, &manifest.scan_dir);
    let pose_path = DatasetManifest::resolve(base, &manifest.pose_file);
    let scans = list_scans(&scan_dir)?;
    let poses = read_kitti_poses(&pose_path)?;
    if scans.len() != poses.len() {
        return Err(DatasetError::CountMismatch {
            scans: scans.len(),
            poses: poses.len(),
        });
    }
    let odometry = match &manifest.odometry_file {
        Some(p) => {
            let o = read_kitti_poses(DatasetManifest::resolve(base, p))?;
            if o.len() != scans.len() {
                return Err(DatasetError::CountMismatch {
                    scans: scans.len(),
                    poses: o.len(),
                });
            }
            Some(o)
        }
        None => None,
    };
    let mut sessions = manifest.sessions.clone();
    if sessions.is_empty() {
        sessions.push(0);
    }
    if sessions[0] != 0 || sessions.windows(2).any(|w| w[0] >= w[1]) || *sessions.last().unwrap() >= scans.len().max(1) {
        return Err(DatasetError::Sessions(scans.len()));
    }

    let key = cache_key(manifest, base, &scans, &pose_path)?;
    let cache_path = manifest.cache.as_ref().map(|c| DatasetManifest::resolve(base, c));
    if let Some(cp) = &cache_path {
        if let Ok(text) = fs::read_to_string(cp) {
            if let Ok(cache) = serde_json::from_str::<CacheFile>(&text) {
                if cache.key == key && cache.nodes.len() == scans.len() {
                    log::debug!("descriptor cache hit: {}", cp.display());
                    return Ok(Dataset {
                        spec: manifest.spec.clone(),
                        loop_distance: manifest.loop_distance,
                        sessions,
                        nodes: cache.nodes,
                        scan_paths: scans,
                        cache_hit: true,
                    });
                }
            }
        }
    }

    let descriptors: Vec<Descriptor> = scans
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let cloud = load_cloud(p).map_err(|e| scan_error(i, p, e))?;
            extract(&cloud, &manifest.spec).map_err(|e| DatasetError::Scan {
                index: i,
                path: p.clone(),
                source: Box::new(e),
            })
        })
        .collect::<Result<_, _>>()?;
    let nodes: Vec<DatasetNode> = descriptors
        .into_iter()
        .enumerate()
        .map(|(i, descriptor)| {
            let (truth, position) = planar_pose(&poses[i], manifest.ground_plane);
            DatasetNode {
                index: i,
                session: session_of(&sessions, i),
                truth,
                position,
                odometry: odometry.as_ref().map(|o| planar_pose(&o[i], manifest.ground_plane).0),
                descriptor,
            }
        })
        .collect();
    if let Some(cp) = &cache_path {
        let cache = CacheFile { key, nodes: nodes.clone() };
        let text = serde_json::to_string(&cache).map_err(|e| DatasetError::Manifest(e.to_string()))?;
        fs::write(cp, text).map_err(io_err(cp))?;
    }
    Ok(Dataset {
        spec: manifest.spec.clone(),
        loop_distance: manifest.loop_distance,
        sessions,
        nodes,
        scan_paths: scans,
        cache_hit: false,
    })
}

fn cache_key(manifest: &DatasetManifest, base: &Path, scans: &[PathBuf], pose_path: &Path) -> Result<String, DatasetError> {
    let mut h = Sha256::new();
    h.update(manifest.spec.fingerprint().as_bytes());
    h.update(serde_json::to_vec(&(&manifest.sessions, manifest.ground_plane)).unwrap_or_default());
    h.update(fs::read(pose_path).map_err(io_err(pose_path))?);
    if let Some(o) = &manifest.odometry_file {
        let o = DatasetManifest::resolve(base, o);
        h.update(fs::read(&o).map_err(io_err(&o))?);
    }
    for p in scans {
        h.update(p.file_name().map(|n| n.as_encoded_bytes()).unwrap_or_default());
        h.update(fs::read(p).map_err(io_err(p))?);
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pointcloud::{write_kitti_bin, Point};

    fn fixture(dir: &Path, scans: usize, poses: usize) -> DatasetManifest {
        fs::create_dir_all(dir.join("scans")).unwrap();
        for i in 0..scans {
            let cloud = PointCloud::new(
                (0..50)
                    .map(|k| {
                        let a = k as f64 * 0.3 + i as f64;
                        Point::new(5.0 * a.cos(), 4.0 * a.sin(), 0.1 * k as f64, 10.0)
                    })
                    .collect(),
            );
            write_kitti_bin(dir.join(format!("scans/{i:06}.bin")), &cloud).unwrap();
        }
        let p: Vec<Pose2> = (0..poses).map(|i| Pose2::new(i as f64, 0.0, 0.1 * i as f64)).collect();
        write_kitti_poses(dir.join("poses.txt"), &p, 1.0).unwrap();
        DatasetManifest {
            scan_dir: "scans".into(),
            pose_file: "poses.txt".into(),
            odometry_file: None,
            sessions: vec![0, scans / 2],
            spec: HistogramSpec::default(),
            cache: Some("cache.json".into()),
            loop_distance: 3.0,
            ground_plane: GroundPlane::Xy,
        }
    }

    #[test]
    fn builds_and_caches() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path(), 10, 10);
        let d = build_dataset(&m, dir.path()).unwrap();
        assert_eq!(d.nodes.len(), 10);
        assert!(!d.cache_hit);
        assert_eq!(d.nodes[7].session, 1);
        assert!((d.nodes[3].truth.theta - 0.3).abs() < 1e-12);
        let again = build_dataset(&m, dir.path()).unwrap();
        assert!(again.cache_hit);
        assert_eq!(again.nodes, d.nodes);
    }

    #[test]
    fn count_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path(), 10, 9);
        assert!(matches!(
            build_dataset(&m, dir.path()),
            Err(DatasetError::CountMismatch { scans: 10, poses: 9 })
        ));
    }

    #[test]
    fn broken_scan_is_indexed() {
        let dir = tempfile::tempdir().unwrap();
        let m = fixture(dir.path(), 4, 4);
        fs::write(dir.path().join("scans/000002.bin"), [0u8; 7]).unwrap();
        match build_dataset(&m, dir.path()) {
            Err(DatasetError::Scan { index, .. }) => assert_eq!(index, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn kitti_camera_poses() {
        // camera looking along +x of the world: forward z maps to planar x
        let forward = [1.0, 0.0, 0.0, 2.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 5.0];
        let (p, t) = planar_pose(&forward, GroundPlane::Xz);
        assert_eq!((p.x, p.y, p.theta), (5.0, -2.0, 0.0));
        assert_eq!(t, [2.0, 0.0, 5.0]);
        // yaw to the left (rotation about camera y by -90 deg): forward becomes -x_cam
        let left = [0.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0];
        let (p, _) = planar_pose(&left, GroundPlane::Xz);
        assert!((p.theta - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn pose_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.txt");
        let poses = vec![Pose2::new(1.5, -2.0, 0.7), Pose2::new(0.0, 3.0, -3.0)];
        write_kitti_poses(&path, &poses, 1.0).unwrap();
        let back = read_kitti_poses(&path).unwrap();
        for (row, p) in back.iter().zip(&poses) {
            let (q, _) = planar_pose(row, GroundPlane::Xy);
            assert!(q.distance(p) < 1e-12 && (q.theta - p.theta).abs() < 1e-12);
        }
        fs::write(&path, "1 2 3\n").unwrap();
        assert!(matches!(read_kitti_poses(&path), Err(DatasetError::PoseFormat { line: 1, .. })));
    }
}
