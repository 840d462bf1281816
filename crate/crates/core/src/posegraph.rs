//! Planar pose graph: odometry chain with covariance accumulation, loop
//! edges from accepted registrations and Gauss-Newton optimization.

use std::collections::VecDeque;
use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use nalgebra::{DVector, Matrix2, Matrix3, Vector3};
use nalgebra_sparse::factorization::CscCholesky;
use nalgebra_sparse::{CooMatrix, CscMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registration::{RegistrationResult, RigidTransform};

/// Position covariance after a loop closure.
pub const COVARIANCE_FLOOR: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("odometry edge {from}->{to} does not extend the chain ending at {last:?}")]
    ChainGap { from: usize, to: usize, last: Option<usize> },
    #[error("node {0} does not exist")]
    MissingNode(usize),
    #[error("registration was rejected; refusing loop edge")]
    RejectedLoop,
    #[error("loop edge must join two different nodes")]
    SelfLoop,
    #[error("covariance must be symmetric positive semi-definite")]
    InvalidCovariance,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub fn wrap_angle(a: f64) -> f64 {
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a <= -PI {
        a += 2.0 * PI;
    }
    a
}

fn rot(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(c, -s, s, c)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self { x, y, theta }
    }

    pub fn position(&self) -> [f64; 2] {
        [self.x, self.y]
    }

    pub fn distance(&self, other: &Pose2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// `self ∘ delta`: `delta` is expressed in the frame of `self`.
    pub fn compose(&self, delta: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            self.x + c * delta.x - s * delta.y,
            self.y + s * delta.x + c * delta.y,
            wrap_angle(self.theta + delta.theta),
        )
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(-(c * self.x + s * self.y), s * self.x - c * self.y, wrap_angle(-self.theta))
    }

    /// Pose of `other` in the frame of `self`.
    pub fn between(&self, other: &Pose2) -> Pose2 {
        self.inverse().compose(other)
    }

    /// Ground-plane projection of a 3D rigid transform (x, y, yaw).
    pub fn from_rigid(t: &RigidTransform) -> Pose2 {
        Pose2::new(t.translation.x, t.translation.y, t.yaw())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: usize,
    pub session: u32,
    pub pose: Pose2,
    /// 2D position covariance in m².
    pub covariance: Matrix2<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdometryEdge {
    pub from: usize,
    pub to: usize,
    pub delta: Pose2,
    pub step_covariance: Matrix2<f64>,
}

/// `pose(to) = pose(from) ∘ delta`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopEdge {
    pub from: usize,
    pub to: usize,
    pub delta: Pose2,
    pub weight: f64,
}

/// Default ratio of heading to position information: an edge is trusted
/// about as much in 0.1 rad as in 1 m.
pub const DEFAULT_HEADING_WEIGHT: f64 = 100.0;

fn default_heading_weight() -> f64 {
    DEFAULT_HEADING_WEIGHT
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PoseGraph {
    pub nodes: Vec<GraphNode>,
    pub odometry: Vec<OdometryEdge>,
    pub loops: Vec<LoopEdge>,
    /// Weight of the squared heading error relative to the squared position
    /// error of the same edge (m^2 / rad^2).
    #[serde(default = "default_heading_weight")]
    pub heading_weight: f64,
}

impl Default for PoseGraph {
    fn default() -> Self {
        Self {
            nodes: Vec::new(),
            odometry: Vec::new(),
            loops: Vec::new(),
            heading_weight: DEFAULT_HEADING_WEIGHT,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OptimizeReport {
    pub iterations: usize,
    /// Total squared residual before the first and after every accepted step.
    pub residual_history: Vec<f64>,
    pub converged: bool,
    /// No step could reduce the residual before the tolerance was reached;
    /// the best poses found are kept.
    pub diverged: bool,
}

fn is_psd(m: &Matrix2<f64>) -> bool {
    let sym = (m[(0, 1)] - m[(1, 0)]).abs() <= 1e-12 * (1.0 + m.amax());
    sym && m.iter().all(|v| v.is_finite()) && m[(0, 0)] >= 0.0 && m[(1, 1)] >= 0.0 && m.determinant() >= -1e-15
}

impl PoseGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: usize) -> Result<&GraphNode, GraphError> {
        self.nodes.get(id).ok_or(GraphError::MissingNode(id))
    }

    /// Start a session: a node with no edge to the previous one. Returns its id.
    pub fn add_session_start(&mut self, session: u32, pose: Pose2) -> usize {
        let id = self.nodes.len();
        self.nodes.push(GraphNode {
            id,
            session,
            pose,
            covariance: Matrix2::zeros(),
        });
        id
    }

    /// Extend the chain. The step covariance is rotated into the world frame
    /// by the heading of the previous node and added to its covariance.
    pub fn add_odometry(&mut self, edge: OdometryEdge) -> Result<&GraphNode, GraphError> {
        let last = self.nodes.len().checked_sub(1);
        if last != Some(edge.from) || edge.to != edge.from + 1 {
            return Err(GraphError::ChainGap {
                from: edge.from,
                to: edge.to,
                last,
            });
        }
        if !is_psd(&edge.step_covariance) {
            return Err(GraphError::InvalidCovariance);
        }
        let prev = &self.nodes[edge.from];
        let r = rot(prev.pose.theta);
        let covariance = prev.covariance + r * edge.step_covariance * r.transpose();
        let node = GraphNode {
            id: edge.to,
            session: prev.session,
            pose: prev.pose.compose(&edge.delta),
            covariance: (covariance + covariance.transpose()) * 0.5,
        };
        self.nodes.push(node);
        self.odometry.push(edge);
        Ok(self.nodes.last().unwrap())
    }

    /// Add a loop edge from an accepted registration of `current` against
    /// `star`. The registration transform maps the current scan into the
    /// frame of the stored one, so it is the pose of `current` seen from
    /// `star`. Resets the covariance of `current`; a second edge between the
    /// same pair replaces the first. `weight` scales the edge relative to an
    /// odometry edge.
    pub fn add_loop(&mut self, star: usize, current: usize, result: &RegistrationResult, weight: f64) -> Result<(), GraphError> {
        if !result.verdict.is_accepted() {
            return Err(GraphError::RejectedLoop);
        }
        self.add_loop_edge(LoopEdge {
            from: star,
            to: current,
            delta: Pose2::from_rigid(&result.transform),
            weight,
        })
    }

    pub fn add_loop_edge(&mut self, edge: LoopEdge) -> Result<(), GraphError> {
        for id in [edge.from, edge.to] {
            self.node(id)?;
        }
        if edge.from == edge.to {
            return Err(GraphError::SelfLoop);
        }
        let key = (edge.from.min(edge.to), edge.from.max(edge.to));
        self.loops.retain(|e| (e.from.min(e.to), e.from.max(e.to)) != key);
        self.align_components(&edge);
        let current = edge.to;
        self.loops.push(edge);
        self.reset_covariance(current);
        Ok(())
    }

    /// When `edge` joins two separate components (a new session meeting the
    /// old map), move the newer component rigidly so that the edge holds
    /// exactly. This gives the optimizer a starting point near the solution.
    fn align_components(&mut self, edge: &LoopEdge) {
        let labels = self.components();
        let (la, lb) = (labels[edge.from], labels[edge.to]);
        if la == lb {
            return;
        }
        let (moved, fixed_pose, node) = if lb > la {
            (lb, self.nodes[edge.from].pose.compose(&edge.delta), edge.to)
        } else {
            (la, self.nodes[edge.to].pose.compose(&edge.delta.inverse()), edge.from)
        };
        let correction = fixed_pose.compose(&self.nodes[node].pose.inverse());
        let r = rot(correction.theta);
        for (n, &l) in self.nodes.iter_mut().zip(&labels) {
            if l == moved {
                n.pose = correction.compose(&n.pose);
                n.covariance = r * n.covariance * r.transpose();
            }
        }
    }

    pub fn reset_covariance(&mut self, id: usize) {
        if let Some(n) = self.nodes.get_mut(id) {
            n.covariance = Matrix2::identity() * COVARIANCE_FLOOR;
        }
    }

    fn edges(&self) -> impl Iterator<Item = (usize, usize, Pose2, f64)> + '_ {
        self.odometry
            .iter()
            .map(|e| (e.from, e.to, e.delta, 1.0))
            .chain(self.loops.iter().map(|e| (e.from, e.to, e.delta, e.weight)))
    }

    /// Translation and absolute angle error of the loop edge between `a`
    /// and `b` at the current poses.
    pub fn loop_error(&self, a: usize, b: usize) -> Option<(f64, f64)> {
        let e = self.loops.iter().find(|e| (e.from, e.to) == (a, b) || (e.from, e.to) == (b, a))?;
        let r = edge_error(&self.nodes[e.from].pose, &self.nodes[e.to].pose, &e.delta);
        Some((r.xy().norm(), r.z.abs()))
    }

    fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for (a, b, _, _) in self.edges() {
            adj[a].push(b);
            adj[b].push(a);
        }
        adj
    }

    /// Component label (lowest node id of the component) for every node.
    pub fn components(&self) -> Vec<usize> {
        let adj = self.adjacency();
        let mut label = vec![usize::MAX; self.nodes.len()];
        for start in 0..self.nodes.len() {
            if label[start] != usize::MAX {
                continue;
            }
            label[start] = start;
            let mut queue = VecDeque::from([start]);
            while let Some(u) = queue.pop_front() {
                for &v in &adj[u] {
                    if label[v] == usize::MAX {
                        label[v] = start;
                        queue.push_back(v);
                    }
                }
            }
        }
        label
    }

    /// Nodes whose position relative to `id` is known: those reachable
    /// through odometry or loop edges, optionally within `max_hops` edges.
    pub fn local_count(&self, id: usize, max_hops: Option<usize>) -> usize {
        if id >= self.nodes.len() {
            return 0;
        }
        let adj = self.adjacency();
        let mut depth = vec![usize::MAX; self.nodes.len()];
        depth[id] = 0;
        let mut queue = VecDeque::from([id]);
        let mut count = 1;
        while let Some(u) = queue.pop_front() {
            if max_hops.is_some_and(|h| depth[u] >= h) {
                continue;
            }
            for &v in &adj[u] {
                if depth[v] == usize::MAX {
                    depth[v] = depth[u] + 1;
                    count += 1;
                    queue.push_back(v);
                }
            }
        }
        count
    }

    /// Sum over edges of the weighted squared planar error.
    pub fn residual(&self) -> f64 {
        self.edges()
            .map(|(i, j, z, w)| {
                let e = edge_error(&self.nodes[i].pose, &self.nodes[j].pose, &z);
                w * (e.x * e.x + e.y * e.y + self.heading_weight * e.z * e.z)
            })
            .sum()
    }

    /// Gauss-Newton with backtracking. The lowest-id node of every connected
    /// component is held fixed. Stops once the largest update component
    /// falls below `tolerance`.
    pub fn optimize(&mut self, max_iterations: usize, tolerance: f64) -> OptimizeReport {
        let mut report = OptimizeReport {
            iterations: 0,
            residual_history: vec![self.residual()],
            converged: false,
            diverged: false,
        };
        let n = self.nodes.len();
        if n < 2 || (self.odometry.is_empty() && self.loops.is_empty()) {
            report.converged = true;
            return report;
        }
        let labels = self.components();
        // variable slot of each free node
        let mut slot = vec![usize::MAX; n];
        let mut free = 0;
        for i in 0..n {
            if labels[i] != i {
                slot[i] = free;
                free += 1;
            }
        }
        let mut current = *report.residual_history.last().unwrap();
        if current <= 1e-20 {
            report.converged = true;
            return report;
        }
        for _ in 0..max_iterations {
            report.iterations += 1;
            let Some(step) = self.gauss_newton_step(&slot, free) else {
                report.diverged = true;
                break;
            };
            let saved: Vec<Pose2> = self.nodes.iter().map(|n| n.pose).collect();
            let mut scale = 1.0;
            let mut improved = false;
            for _ in 0..20 {
                for i in 0..n {
                    if slot[i] != usize::MAX {
                        let k = 3 * slot[i];
                        let p = &mut self.nodes[i].pose;
                        *p = Pose2::new(
                            saved[i].x + scale * step[k],
                            saved[i].y + scale * step[k + 1],
                            wrap_angle(saved[i].theta + scale * step[k + 2]),
                        );
                    }
                }
                let r = self.residual();
                if r <= current {
                    current = r;
                    improved = true;
                    break;
                }
                scale *= 0.5;
            }
            if !improved {
                for (node, p) in self.nodes.iter_mut().zip(&saved) {
                    node.pose = *p;
                }
                // a failed line search at a numerically converged point is fine
                let small = step.amax() < tolerance || current < 1e-20;
                report.converged = small;
                report.diverged = !small;
                break;
            }
            report.residual_history.push(current);
            if scale * step.amax() < tolerance {
                report.converged = true;
                break;
            }
        }
        report
    }

    fn gauss_newton_step(&self, slot: &[usize], free: usize) -> Option<DVector<f64>> {
        let dim = 3 * free;
        if dim == 0 {
            return None;
        }
        let mut coo = CooMatrix::new(dim, dim);
        let mut b = DVector::zeros(dim);
        let info = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, self.heading_weight));
        for (i, j, z, w) in self.edges() {
            let (pi, pj) = (&self.nodes[i].pose, &self.nodes[j].pose);
            let e = edge_error(pi, pj, &z);
            let (ja, jb) = edge_jacobians(pi, pj, &z);
            let blocks = [(slot[i], ja), (slot[j], jb)];
            for (sa, ja) in &blocks {
                if *sa == usize::MAX {
                    continue;
                }
                let g = ja.transpose() * info * e * w;
                for r in 0..3 {
                    b[3 * sa + r] -= g[r];
                }
                for (sb, jb) in &blocks {
                    if *sb == usize::MAX {
                        continue;
                    }
                    let h = ja.transpose() * info * jb * w;
                    for r in 0..3 {
                        for c in 0..3 {
                            coo.push(3 * sa + r, 3 * sb + c, h[(r, c)]);
                        }
                    }
                }
            }
        }
        // tiny damping keeps the factorization defined for weakly constrained headings
        for k in 0..dim {
            coo.push(k, k, 1e-9);
        }
        let h = CscMatrix::from(&coo);
        let chol = CscCholesky::factor(&h).ok()?;
        let sol = chol.solve(&b);
        let step = sol.column(0).into_owned();
        step.iter().all(|v| v.is_finite()).then_some(step)
    }

    /// `id,x,y,theta,cov_xx,cov_xy,cov_yy`
    pub fn write_nodes_csv(&self, out: impl Write) -> Result<(), GraphError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["id", "x", "y", "theta", "cov_xx", "cov_xy", "cov_yy"])?;
        for n in &self.nodes {
            let c = &n.covariance;
            w.write_record(&[
                n.id.to_string(),
                n.pose.x.to_string(),
                n.pose.y.to_string(),
                n.pose.theta.to_string(),
                c[(0, 0)].to_string(),
                c[(0, 1)].to_string(),
                c[(1, 1)].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `kind,from,to,dx,dy,dtheta`
    pub fn write_edges_csv(&self, out: impl Write) -> Result<(), GraphError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["kind", "from", "to", "dx", "dy", "dtheta"])?;
        let rows = self
            .odometry
            .iter()
            .map(|e| ("odometry", e.from, e.to, e.delta))
            .chain(self.loops.iter().map(|e| ("loop", e.from, e.to, e.delta)));
        for (kind, from, to, d) in rows {
            w.write_record(&[
                kind.to_string(),
                from.to_string(),
                to.to_string(),
                d.x.to_string(),
                d.y.to_string(),
                d.theta.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn dump(&self, dir: impl AsRef<Path>) -> Result<(), GraphError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        self.write_nodes_csv(std::fs::File::create(dir.join("nodes.csv"))?)?;
        self.write_edges_csv(std::fs::File::create(dir.join("edges.csv"))?)?;
        Ok(())
    }
}

/// Error of edge `z` between poses `a` and `b`, in the frame of `z`.
fn edge_error(a: &Pose2, b: &Pose2, z: &Pose2) -> Vector3<f64> {
    let dt = nalgebra::Vector2::new(b.x - a.x, b.y - a.y);
    let rz_t = rot(z.theta).transpose();
    let et = rz_t * (rot(a.theta).transpose() * dt - nalgebra::Vector2::new(z.x, z.y));
    Vector3::new(et.x, et.y, wrap_angle(b.theta - a.theta - z.theta))
}

fn edge_jacobians(a: &Pose2, b: &Pose2, z: &Pose2) -> (Matrix3<f64>, Matrix3<f64>) {
    let dt = nalgebra::Vector2::new(b.x - a.x, b.y - a.y);
    let rz_t = rot(z.theta).transpose();
    let ra_t = rot(a.theta).transpose();
    let (s, c) = a.theta.sin_cos();
    let dra_t = Matrix2::new(-s, c, -c, -s);
    let mut ja = Matrix3::zeros();
    let mut jb = Matrix3::zeros();
    let m = rz_t * ra_t;
    let d_theta = rz_t * dra_t * dt;
    for r in 0..2 {
        for k in 0..2 {
            ja[(r, k)] = -m[(r, k)];
            jb[(r, k)] = m[(r, k)];
        }
        ja[(r, 2)] = d_theta[r];
    }
    ja[(2, 2)] = -1.0;
    jb[(2, 2)] = 1.0;
    (ja, jb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn odo(from: usize, delta: Pose2, cov: f64) -> OdometryEdge {
        OdometryEdge {
            from,
            to: from + 1,
            delta,
            step_covariance: Matrix2::identity() * cov,
        }
    }

    fn lambda_max(m: &Matrix2<f64>) -> f64 {
        m.symmetric_eigenvalues().max()
    }

    #[test]
    fn covariance_accumulates() {
        let mut g = PoseGraph::new();
        g.add_session_start(0, Pose2::default());
        for i in 0..10 {
            g.add_odometry(odo(i, Pose2::new(1.0, 0.0, 0.0), 0.01)).unwrap();
        }
        let c = g.nodes[10].covariance;
        assert!((c - Matrix2::identity() * 0.1).amax() < 1e-12);
        g.add_odometry(odo(10, Pose2::new(1.0, 0.0, 0.3), 0.0)).unwrap();
        assert_eq!(g.nodes[11].covariance, c);
        assert!(matches!(
            g.add_odometry(odo(3, Pose2::default(), 0.0)),
            Err(GraphError::ChainGap { .. })
        ));
    }

    #[test]
    fn rotated_step_covariance() {
        let mut g = PoseGraph::new();
        g.add_session_start(0, Pose2::new(0.0, 0.0, PI / 2.0));
        let e = OdometryEdge {
            from: 0,
            to: 1,
            delta: Pose2::new(1.0, 0.0, 0.0),
            step_covariance: Matrix2::new(0.04, 0.0, 0.0, 0.01),
        };
        g.add_odometry(e).unwrap();
        let c = g.nodes[1].covariance;
        assert!((c[(0, 0)] - 0.01).abs() < 1e-12 && (c[(1, 1)] - 0.04).abs() < 1e-12);
        assert!((g.nodes[1].pose.y - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loop_edges_reset_replace_and_validate() {
        let mut g = PoseGraph::new();
        g.add_session_start(0, Pose2::default());
        for i in 0..5 {
            g.add_odometry(odo(i, Pose2::new(1.0, 0.0, 0.1), 0.02)).unwrap();
        }
        let e = LoopEdge {
            from: 0,
            to: 5,
            delta: Pose2::new(4.0, 1.0, 0.5),
            weight: 1.0,
        };
        g.add_loop_edge(e.clone()).unwrap();
        assert_eq!(g.loops.len(), 1);
        assert_eq!(g.nodes[5].covariance, Matrix2::identity() * COVARIANCE_FLOOR);
        g.add_loop_edge(LoopEdge { from: 5, to: 0, ..e.clone() }).unwrap();
        assert_eq!(g.loops.len(), 1);
        assert!(matches!(
            g.add_loop_edge(LoopEdge { to: 9, ..e }),
            Err(GraphError::MissingNode(9))
        ));
    }

    #[test]
    fn zero_noise_chain_is_untouched() {
        let mut g = PoseGraph::new();
        g.add_session_start(0, Pose2::default());
        for i in 0..20 {
            g.add_odometry(odo(i, Pose2::new(1.0, 0.2, 0.05), 0.01)).unwrap();
        }
        let before = g.nodes.clone();
        let r = g.optimize(10, 1e-9);
        assert!(r.converged && r.residual_history[0] < 1e-20);
        assert_eq!(g.nodes, before);

        let mut single = PoseGraph::new();
        single.add_session_start(0, Pose2::new(1.0, 2.0, 3.0));
        let r = single.optimize(10, 1e-9);
        assert!(r.converged && r.iterations == 0);
    }

    /// 4 x 10 m square, 1 m steps, turning left at each corner.
    fn square(drift: f64) -> (PoseGraph, Vec<Pose2>) {
        let mut truth = vec![Pose2::default()];
        let mut steps = Vec::new();
        for side in 0..4 {
            for k in 0..10 {
                let turn = if k == 9 && side < 3 { PI / 2.0 } else { 0.0 };
                steps.push(Pose2::new(1.0, 0.0, turn));
            }
        }
        for s in &steps {
            let p = truth.last().unwrap().compose(s);
            truth.push(p);
        }
        let mut g = PoseGraph::new();
        g.add_session_start(0, Pose2::default());
        for (i, s) in steps.iter().enumerate() {
            let noisy = Pose2::new(s.x, s.y, s.theta + drift);
            g.add_odometry(odo(i, noisy, 0.01)).unwrap();
        }
        (g, truth)
    }

    #[test]
    fn square_loop_closes() {
        let (mut g, truth) = square(0.01);
        let end = truth.len() - 1;
        let before = g.nodes[end].pose.distance(&truth[end]);
        let exact = truth[0].between(&truth[end]);
        g.add_loop_edge(LoopEdge { from: 0, to: end, delta: exact, weight: 1.0 }).unwrap();
        let r = g.optimize(50, 1e-10);
        for w in r.residual_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        assert!(!r.diverged);
        let after = g.nodes[end].pose.distance(&truth[end]);
        assert!(after <= 0.1 * before, "before {before} after {after}");

        // gauge fixed by node 0: a second run changes nothing
        let once: Vec<Pose2> = g.nodes.iter().map(|n| n.pose).collect();
        g.optimize(50, 1e-10);
        for (a, b) in once.iter().zip(&g.nodes) {
            assert!(a.distance(&b.pose) < 1e-6 && wrap_angle(a.theta - b.pose.theta).abs() < 1e-6);
        }
        assert_eq!(g.nodes[0].pose, Pose2::default());
    }

    #[test]
    fn components_and_local_count() {
        let mut g = PoseGraph::new();
        g.add_session_start(0, Pose2::default());
        for i in 0..4 {
            g.add_odometry(odo(i, Pose2::new(1.0, 0.0, 0.0), 0.0)).unwrap();
        }
        let s = g.add_session_start(1, Pose2::new(50.0, 0.0, 0.0));
        g.add_odometry(odo(s, Pose2::new(1.0, 0.0, 0.0), 0.0)).unwrap();
        assert_eq!(g.components(), vec![0, 0, 0, 0, 0, 5, 5]);
        assert_eq!(g.local_count(6, None), 2);
        assert_eq!(g.local_count(2, Some(1)), 3);
        g.add_loop_edge(LoopEdge { from: 4, to: 6, delta: Pose2::default(), weight: 1.0 }).unwrap();
        assert_eq!(g.local_count(6, None), 7);
        assert!(g.nodes[6].session == 1);
        // the second session was moved so that the edge holds
        assert!(g.nodes[6].pose.distance(&g.nodes[4].pose) < 1e-12);
        assert!(g.nodes[5].pose.distance(&Pose2::new(3.0, 0.0, 0.0)) < 1e-12);
        assert!(g.residual() < 1e-20);
    }

    #[test]
    fn loop_error_of_inconsistent_edge() {
        let mut g = PoseGraph::new();
        g.add_session_start(0, Pose2::default());
        for i in 0..3 {
            g.add_odometry(odo(i, Pose2::new(1.0, 0.0, 0.0), 0.01)).unwrap();
        }
        g.add_loop_edge(LoopEdge { from: 0, to: 3, delta: Pose2::new(3.0, 0.0, 0.0), weight: 1.0 }).unwrap();
        assert_eq!(g.loop_error(3, 0), Some((0.0, 0.0)));
        g.add_loop_edge(LoopEdge { from: 0, to: 2, delta: Pose2::new(2.0, 0.5, 0.0), weight: 1.0 }).unwrap();
        let (t, a) = g.loop_error(0, 2).unwrap();
        assert!((t - 0.5).abs() < 1e-12 && a == 0.0);
        assert_eq!(g.loop_error(1, 2), None);
    }

    #[test]
    fn csv_dump() {
        let mut g = PoseGraph::new();
        g.add_session_start(0, Pose2::default());
        g.add_odometry(odo(0, Pose2::new(1.0, 0.0, 0.0), 0.5)).unwrap();
        let mut buf = Vec::new();
        g.write_nodes_csv(&mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert_eq!(s.lines().next().unwrap(), "id,x,y,theta,cov_xx,cov_xy,cov_yy");
        assert_eq!(s.lines().nth(2).unwrap(), "1,1,0,0,0.5,0,0.5");
        let dir = tempfile::tempdir().unwrap();
        g.dump(dir.path()).unwrap();
        assert!(dir.path().join("edges.csv").exists());
    }

    proptest! {
        #[test]
        fn lambda_max_monotone_without_loops(steps in prop::collection::vec((0.0..2.0f64, -0.5..0.5f64, 0.0..0.05f64, 0.0..0.05f64), 1..40)) {
            let mut g = PoseGraph::new();
            g.add_session_start(0, Pose2::default());
            let mut last = 0.0;
            for (i, (dx, dth, sx, sy)) in steps.into_iter().enumerate() {
                let e = OdometryEdge { from: i, to: i + 1, delta: Pose2::new(dx, 0.0, dth), step_covariance: Matrix2::new(sx, 0.0, 0.0, sy) };
                let l = lambda_max(&g.add_odometry(e).unwrap().covariance);
                prop_assert!(l >= last - 1e-12);
                last = l;
            }
        }

        #[test]
        fn pose_algebra(a in (-10.0..10.0f64, -10.0..10.0f64, -3.0..3.0f64), b in (-10.0..10.0f64, -10.0..10.0f64, -3.0..3.0f64)) {
            let a = Pose2::new(a.0, a.1, a.2);
            let b = Pose2::new(b.0, b.1, b.2);
            let d = a.between(&b);
            let back = a.compose(&d);
            prop_assert!(back.distance(&b) < 1e-9);
            prop_assert!(wrap_angle(back.theta - b.theta).abs() < 1e-9);
            prop_assert!(edge_error(&a, &b, &d).norm() < 1e-9);
        }

        #[test]
        fn jacobians_match_finite_differences(a in (-5.0..5.0f64, -5.0..5.0f64, -3.0..3.0f64), b in (-5.0..5.0f64, -5.0..5.0f64, -3.0..3.0f64), z in (-2.0..2.0f64, -2.0..2.0f64, -1.0..1.0f64)) {
            let pa = Pose2::new(a.0, a.1, a.2);
            let pb = Pose2::new(b.0, b.1, b.2);
            let z = Pose2::new(z.0, z.1, z.2);
            let (ja, jb) = edge_jacobians(&pa, &pb, &z);
            let h = 1e-6;
            for k in 0..3 {
                let bump = |p: &Pose2, s: f64| {
                    let mut v = [p.x, p.y, p.theta];
                    v[k] += s;
                    Pose2 { x: v[0], y: v[1], theta: v[2] }
                };
                let num_a = (edge_error(&bump(&pa, h), &pb, &z) - edge_error(&bump(&pa, -h), &pb, &z)) / (2.0 * h);
                let num_b = (edge_error(&pa, &bump(&pb, h), &z) - edge_error(&pa, &bump(&pb, -h), &z)) / (2.0 * h);
                // skip the wrap discontinuity
                if num_a[2].abs() > 10.0 || num_b[2].abs() > 10.0 { continue; }
                for r in 0..3 {
                    prop_assert!((num_a[r] - ja[(r, k)]).abs() < 1e-5);
                    prop_assert!((num_b[r] - jb[(r, k)]).abs() < 1e-5);
                }
            }
        }
    }
}
