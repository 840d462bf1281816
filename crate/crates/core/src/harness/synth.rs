//! Procedural test worlds: axis-aligned walls, pillars and boxes on a flat
//! ground, a rectangular route driven more than once, and a simulated
//! 16-beam spinning LiDAR.

use std::fs;
use std::io;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{write_kitti_poses, DatasetManifest, GroundPlane};
use crate::descriptor::HistogramSpec;
use crate::pointcloud::{write_kitti_bin, Point, PointCloud};
use crate::posegraph::Pose2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    /// Side of the square world, meters.
    pub world_size: f64,
    pub n_walls: usize,
    pub n_pillars: usize,
    pub n_boxes: usize,
    /// Free corridor kept around the route, meters.
    pub clearance: f64,
    pub route_width: f64,
    pub route_height: f64,
    /// Distance between consecutive nodes, meters.
    pub step: f64,
    pub laps: f64,
    /// The route moves this far inward after the first lap, meters.
    pub lap_offset: f64,
    pub sensor_height: f64,
    pub beams: usize,
    pub azimuth_steps: usize,
    pub fov_down_deg: f64,
    pub fov_up_deg: f64,
    pub max_range: f64,
    pub range_noise: f64,
    /// Standard deviation of the odometry translation error per step, meters.
    pub odom_sigma_xy: f64,
    /// Standard deviation of the odometry heading error per step, radians.
    pub odom_sigma_theta: f64,
    /// Constant heading drift per step, radians.
    pub odom_yaw_bias: f64,
    /// Node indices where a new session (new odometry frame) starts.
    pub session_starts: Vec<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            world_size: 70.0,
            n_walls: 14,
            n_pillars: 30,
            n_boxes: 30,
            clearance: 1.8,
            route_width: 40.0,
            route_height: 26.0,
            step: 1.0,
            laps: 1.5,
            lap_offset: 0.8,
            sensor_height: 1.0,
            beams: 16,
            azimuth_steps: 360,
            fov_down_deg: -15.0,
            fov_up_deg: 15.0,
            max_range: 40.0,
            range_noise: 0.01,
            odom_sigma_xy: 0.02,
            odom_sigma_theta: 0.002,
            odom_yaw_bias: 0.0003,
            session_starts: vec![0],
        }
    }
}

impl SynthConfig {
    /// Square route for end-to-end loop closure checks.
    pub fn square_loop(seed: u64) -> Self {
        Self {
            seed,
            route_width: 30.0,
            route_height: 30.0,
            laps: 1.1,
            // long walls alias under translation, so favour compact objects
            n_walls: 6,
            n_pillars: 50,
            n_boxes: 40,
            odom_yaw_bias: 0.002,
            ..Self::default()
        }
    }

    pub fn without_noise(mut self) -> Self {
        self.odom_sigma_xy = 0.0;
        self.odom_sigma_theta = 0.0;
        self.odom_yaw_bias = 0.0;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub intensity: f64,
}

impl Aabb {
    /// Entry distance along a ray, if it hits within `(0, t_max)`.
    fn hit(&self, o: &Vector3<f64>, inv_d: &Vector3<f64>, t_max: f64) -> Option<f64> {
        let mut t0 = 0.0f64;
        let mut t1 = t_max;
        for k in 0..3 {
            let a = (self.min[k] - o[k]) * inv_d[k];
            let b = (self.max[k] - o[k]) * inv_d[k];
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            t0 = t0.max(lo);
            t1 = t1.min(hi);
            if t0 > t1 {
                return None;
            }
        }
        (t0 > 1e-9).then_some(t0)
    }

    fn footprint_distance(&self, x: f64, y: f64) -> f64 {
        let dx = (self.min[0] - x).max(x - self.max[0]).max(0.0);
        let dy = (self.min[1] - y).max(y - self.max[1]).max(0.0);
        dx.hypot(dy)
    }

    fn footprint_center(&self) -> (f64, f64) {
        (0.5 * (self.min[0] + self.max[0]), 0.5 * (self.min[1] + self.max[1]))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub boxes: Vec<Aabb>,
    pub ground_intensity: f64,
}

impl World {
    /// Closest hit of a ray against the boxes and the ground plane `z = 0`.
    pub fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, max_range: f64, nearby: &[usize]) -> Option<(f64, f64)> {
        let inv = Vector3::new(1.0 / dir.x, 1.0 / dir.y, 1.0 / dir.z);
        let mut best: Option<(f64, f64)> = None;
        if dir.z < 0.0 {
            let t = -origin.z / dir.z;
            if t < max_range {
                best = Some((t, self.ground_intensity));
            }
        }
        for &i in nearby {
            let b = &self.boxes[i];
            let limit = best.map_or(max_range, |h| h.0);
            if let Some(t) = b.hit(origin, &inv, limit) {
                best = Some((t, b.intensity));
            }
        }
        best
    }
}

/// Pose on the rectangular route after `s` meters of driving.
pub fn route_pose(cfg: &SynthConfig, s: f64) -> Pose2 {
    let base = 2.0 * (cfg.route_width + cfg.route_height);
    // blend in the lap offset over the first 10 m of the second lap
    let blend = ((s - base) / 10.0).clamp(0.0, 1.0);
    let o = cfg.lap_offset * blend * blend * (3.0 - 2.0 * blend);
    let (w, h) = (cfg.route_width - 2.0 * o, cfg.route_height - 2.0 * o);
    let per = 2.0 * (w + h);
    let u = (s / base).fract() * per;
    let (x0, y0) = (-0.5 * w, -0.5 * h);
    let (x, y, theta) = if u < w {
        (x0 + u, y0, 0.0)
    } else if u < w + h {
        (x0 + w, y0 + (u - w), std::f64::consts::FRAC_PI_2)
    } else if u < 2.0 * w + h {
        (x0 + w - (u - w - h), y0 + h, std::f64::consts::PI)
    } else {
        (x0, y0 + h - (u - 2.0 * w - h), -std::f64::consts::FRAC_PI_2)
    };
    Pose2::new(x, y, theta)
}

pub fn route(cfg: &SynthConfig) -> Vec<Pose2> {
    let length = cfg.laps * 2.0 * (cfg.route_width + cfg.route_height);
    let n = (length / cfg.step).floor() as usize + 1;
    (0..n).map(|k| route_pose(cfg, k as f64 * cfg.step)).collect()
}

/// Random structured scene that leaves a corridor of `clearance` around
/// every point of `keep_free`.
pub fn random_world(cfg: &SynthConfig, keep_free: &[Pose2], rng: &mut ChaCha8Rng) -> World {
    let half = 0.5 * cfg.world_size;
    let mut boxes = Vec::new();
    // outer walls
    for (min, max) in [
        ([-half, -half, 0.0], [half, -half + 0.3, 3.0]),
        ([-half, half - 0.3, 0.0], [half, half, 3.0]),
        ([-half, -half, 0.0], [-half + 0.3, half, 3.0]),
        ([half - 0.3, -half, 0.0], [half, half, 3.0]),
    ] {
        boxes.push(Aabb { min, max, intensity: 40.0 });
    }
    // dense free-space samples along the route
    let free: Vec<(f64, f64)> = keep_free
        .windows(2)
        .flat_map(|w| {
            (0..4).map(move |k| {
                let f = k as f64 / 4.0;
                (w[0].x + f * (w[1].x - w[0].x), w[0].y + f * (w[1].y - w[0].y))
            })
        })
        .chain(keep_free.iter().map(|p| (p.x, p.y)))
        .collect();
    let place = |rng: &mut ChaCha8Rng, sx: (f64, f64), sy: (f64, f64), sz: (f64, f64), count: usize, boxes: &mut Vec<Aabb>| {
        let mut placed = 0;
        let mut tries = 0;
        while placed < count && tries < 200 * count.max(1) {
            tries += 1;
            let (w, d) = if rng.random_bool(0.5) {
                (rng.random_range(sx.0..sx.1), rng.random_range(sy.0..sy.1))
            } else {
                (rng.random_range(sy.0..sy.1), rng.random_range(sx.0..sx.1))
            };
            let cx = rng.random_range(-half + 1.0..half - 1.0);
            let cy = rng.random_range(-half + 1.0..half - 1.0);
            let b = Aabb {
                min: [cx - 0.5 * w, cy - 0.5 * d, 0.0],
                max: [cx + 0.5 * w, cy + 0.5 * d, rng.random_range(sz.0..sz.1)],
                intensity: rng.random_range(5.0..100.0),
            };
            let (bx, by) = b.footprint_center();
            let reach = 0.5 * w.hypot(d) + cfg.clearance;
            let blocked = free
                .iter()
                .filter(|(x, y)| (x - bx).abs() <= reach && (y - by).abs() <= reach)
                .any(|(x, y)| b.footprint_distance(*x, *y) < cfg.clearance);
            if !blocked {
                boxes.push(b);
                placed += 1;
            }
        }
    };
    place(rng, (4.0, 12.0), (0.25, 0.4), (2.0, 4.0), cfg.n_walls, &mut boxes);
    place(rng, (0.3, 0.8), (0.3, 0.8), (2.5, 5.0), cfg.n_pillars, &mut boxes);
    place(rng, (0.6, 2.5), (0.6, 2.5), (0.4, 1.6), cfg.n_boxes, &mut boxes);
    World {
        boxes,
        ground_intensity: 3.0,
    }
}

/// One sweep from `pose` (sensor `sensor_height` above the ground), in the
/// sensor frame. Coordinates are rounded to `f32` so that clouds survive a
/// round trip through the binary scan format unchanged.
pub fn scan(world: &World, pose: &Pose2, cfg: &SynthConfig, seed: u64) -> PointCloud {
    let origin = Vector3::new(pose.x, pose.y, cfg.sensor_height);
    let nearby: Vec<usize> = (0..world.boxes.len())
        .filter(|&i| world.boxes[i].footprint_distance(pose.x, pose.y) < cfg.max_range)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.range_noise.max(0.0)).expect("finite noise");
    let (sin_h, cos_h) = pose.theta.sin_cos();
    let mut points = Vec::with_capacity(cfg.beams * cfg.azimuth_steps);
    for a in 0..cfg.azimuth_steps {
        let az = 2.0 * std::f64::consts::PI * a as f64 / cfg.azimuth_steps as f64;
        for b in 0..cfg.beams {
            let el = if cfg.beams == 1 {
                0.0
            } else {
                cfg.fov_down_deg + (cfg.fov_up_deg - cfg.fov_down_deg) * b as f64 / (cfg.beams - 1) as f64
            }
            .to_radians();
            // ray in the sensor frame, then rotated into the world
            let local = Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
            let dir = Vector3::new(cos_h * local.x - sin_h * local.y, sin_h * local.x + cos_h * local.y, local.z);
            let jitter = if cfg.range_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            if let Some((t, intensity)) = world.cast(&origin, &dir, cfg.max_range, &nearby) {
                let r = (t + jitter).max(0.0);
                let p = local * r;
                points.push(Point::new(
                    p.x as f32 as f64,
                    p.y as f32 as f64,
                    p.z as f32 as f64,
                    intensity as f32 as f64,
                ));
            }
        }
    }
    PointCloud::new(points)
}

#[derive(Clone, Debug)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub world: World,
    pub truth: Vec<Pose2>,
    /// Dead-reckoned poses; every session starts its own frame, the first
    /// one at the true start pose.
    pub odometry: Vec<Pose2>,
    pub sessions: Vec<usize>,
    pub scans: Vec<PointCloud>,
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.truth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truth.is_empty()
    }

    pub fn positions(&self) -> Vec<[f64; 3]> {
        self.truth.iter().map(|p| [p.x, p.y, self.config.sensor_height]).collect()
    }

    /// Writes `scans/NNNNNN.bin`, `poses.txt`, `odometry.txt` and
    /// `manifest.json` into `dir`.
    pub fn write_to_dir(&self, dir: impl AsRef<Path>, spec: &HistogramSpec) -> io::Result<DatasetManifest> {
        let dir = dir.as_ref();
        let scans = dir.join("scans");
        fs::create_dir_all(&scans)?;
        for (i, s) in self.scans.iter().enumerate() {
            write_kitti_bin(scans.join(format!("{i:06}.bin")), s).map_err(io::Error::other)?;
        }
        let h = self.config.sensor_height;
        write_kitti_poses(dir.join("poses.txt"), &self.truth, h)?;
        write_kitti_poses(dir.join("odometry.txt"), &self.odometry, h)?;
        let manifest = DatasetManifest {
            scan_dir: "scans".into(),
            pose_file: "poses.txt".into(),
            odometry_file: Some("odometry.txt".into()),
            sessions: self.sessions.clone(),
            spec: spec.clone(),
            cache: Some("descriptors.json".into()),
            loop_distance: crate::detector::DEFAULT_LOOP_DISTANCE,
            ground_plane: GroundPlane::Xy,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }
}

/// Build a world, drive the route and record every scan.
pub fn synth_world(cfg: &SynthConfig) -> SynthDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let truth = route(cfg);
    let world = random_world(cfg, &truth, &mut rng);
    let mut sessions: Vec<usize> = cfg.session_starts.iter().copied().filter(|&s| s < truth.len()).collect();
    if sessions.first() != Some(&0) {
        sessions.insert(0, 0);
    }
    sessions.sort_unstable();
    sessions.dedup();

    let n_xy = Normal::new(0.0, cfg.odom_sigma_xy.max(0.0)).expect("finite sigma");
    let n_th = Normal::new(0.0, cfg.odom_sigma_theta.max(0.0)).expect("finite sigma");
    let mut odometry = Vec::with_capacity(truth.len());
    for k in 0..truth.len() {
        if k == 0 {
            odometry.push(truth[0]);
        } else if sessions.contains(&k) {
            odometry.push(Pose2::default());
        } else {
            let d = truth[k - 1].between(&truth[k]);
            let noisy = Pose2::new(
                d.x + n_xy.sample(&mut rng),
                d.y + n_xy.sample(&mut rng),
                d.theta + n_th.sample(&mut rng) + cfg.odom_yaw_bias,
            );
            let prev = odometry[k - 1];
            odometry.push(Pose2::compose(&prev, &noisy));
        }
    }
    let scan_seed = rng.random::<u64>();
    let scans = truth
        .par_iter()
        .enumerate()
        .map(|(k, p)| scan(&world, p, cfg, scan_seed.wrapping_add(k as u64)))
        .collect();
    SynthDataset {
        config: cfg.clone(),
        world,
        truth,
        odometry,
        sessions,
        scans,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            route_width: 16.0,
            route_height: 10.0,
            world_size: 40.0,
            azimuth_steps: 180,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_noise_odometry_is_truth() {
        let d = synth_world(&small(1).without_noise());
        for (a, b) in d.odometry.iter().zip(&d.truth) {
            assert!(a.distance(b) < 1e-9);
        }
    }

    #[test]
    fn fixed_seed_is_byte_identical() {
        let spec = HistogramSpec::default();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        synth_world(&small(5)).write_to_dir(a.path(), &spec).unwrap();
        synth_world(&small(5)).write_to_dir(b.path(), &spec).unwrap();
        for f in ["poses.txt", "odometry.txt", "manifest.json", "scans/000007.bin"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let c = synth_world(&small(6));
        assert_ne!(c.scans[3], synth_world(&small(5)).scans[3]);
    }

    #[test]
    fn revisits_give_positive_pairs() {
        let cfg = small(2);
        let d = synth_world(&cfg);
        let lap = (2.0 * (cfg.route_width + cfg.route_height) / cfg.step).round() as usize;
        // the second lap runs a little inside the first; at the same arc
        // fraction the shrunken rectangle is at most 2 * offset * sqrt 2 away
        let mut revisits = 0;
        for k in lap..d.len() {
            let dist = d.truth[k].distance(&d.truth[k - lap]);
            assert!(dist <= 2.0 * cfg.lap_offset * 2f64.sqrt() + cfg.step + 1e-9, "{k} {dist}");
            revisits += (dist < 3.0) as usize;
        }
        assert!(revisits > 10);
        let pairs = crate::detector::label_pairs(&d.positions(), 3.0);
        assert!(pairs.iter().any(|&(i, j, _, l)| l && j - i >= lap));
    }

    #[test]
    fn scans_see_structure_not_the_route() {
        let cfg = small(3);
        let d = synth_world(&cfg);
        for s in &d.scans {
            assert!(s.len() > 500);
            // nothing closer than the corridor allows, except the ground
            let near = s.iter().filter(|p| p.planar_range() < cfg.clearance - 0.1 && p.z > -cfg.sensor_height + 0.05).count();
            assert_eq!(near, 0);
        }
    }

    #[test]
    fn ray_box_hit() {
        let b = Aabb { min: [1.0, -1.0, 0.0], max: [2.0, 1.0, 2.0], intensity: 7.0 };
        let w = World { boxes: vec![b], ground_intensity: 1.0 };
        let o = Vector3::new(0.0, 0.0, 1.0);
        let (t, i) = w.cast(&o, &Vector3::new(1.0, 0.0, 0.0), 40.0, &[0]).unwrap();
        assert!((t - 1.0).abs() < 1e-12 && i == 7.0);
        let down = Vector3::new(0.0, 1.0, -1.0).normalize();
        let (t, i) = w.cast(&o, &down, 40.0, &[0]).unwrap();
        assert!((t - 2f64.sqrt()).abs() < 1e-12 && i == 1.0);
        assert!(w.cast(&o, &Vector3::new(-1.0, 0.0, 0.0), 40.0, &[0]).is_none());
    }
}
