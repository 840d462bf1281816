//! Offline replay: feeds recorded nodes in order through the pose graph,
//! the loop search and scan registration, and reports what happened.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::mpsc;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use nalgebra::Matrix2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::{extract, Descriptor, DescriptorError, HistogramSpec};
use crate::detector::{DetectorModel, Rates};
use crate::loopsearch::{process_map_update, LoopRequest, LoopScorer, MapNode, Mode, SearchConfig, SearchError, SearchState, UpdateTrace, WorkingMemory};
use crate::pointcloud::PointCloud;
use crate::posegraph::{OdometryEdge, PoseGraph, Pose2};
use crate::registration::{register_pair, verification_holds, RegistrationParams, RegistrationResult, RigidTransform, Verdict};

use super::dataset::{session_of, Dataset};
use super::synth::SynthDataset;

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("model was trained for descriptor spec {model}, dataset uses {dataset}")]
    SpecMismatch { model: String, dataset: String },
    #[error("replay input is inconsistent: {0}")]
    Input(String),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReplayConfig {
    pub search: SearchConfig,
    pub registration: RegistrationParams,
    /// Standard deviation of the odometry position step, per axis.
    pub step_sigma: f64,
    /// Hop limit when counting nodes localized relative to the current one.
    pub local_hops: Option<usize>,
    pub optimize_iterations: usize,
    pub optimize_tolerance: f64,
    /// A new loop is undone when, after optimization, its own edge is still
    /// off by more than this translation (m) or angle (rad).
    pub max_loop_translation_error: f64,
    pub max_loop_angle_error: f64,
    /// Loop edge weight relative to an odometry edge.
    pub loop_weight: f64,
}

impl Default for ReplayConfig {
    fn default() -> Self {
        Self {
            search: SearchConfig::default(),
            registration: RegistrationParams::default(),
            step_sigma: 0.1,
            local_hops: None,
            optimize_iterations: 20,
            optimize_tolerance: 1e-9,
            max_loop_translation_error: 0.5,
            max_loop_angle_error: 0.1,
            loop_weight: 1.0,
        }
    }
}

/// Everything the replay needs per node, without the scans themselves.
#[derive(Clone, Debug)]
pub struct ReplayInput {
    pub sessions: Vec<usize>,
    pub odometry: Vec<Pose2>,
    pub truth: Option<Vec<Pose2>>,
    pub descriptors: Vec<Descriptor>,
    pub loop_distance: f64,
}

impl ReplayInput {
    /// Nodes without recorded odometry fall back to the ground-truth pose.
    pub fn from_dataset(ds: &Dataset) -> Self {
        Self {
            sessions: ds.sessions.clone(),
            odometry: ds.nodes.iter().map(|n| n.odometry.unwrap_or(n.truth)).collect(),
            truth: Some(ds.nodes.iter().map(|n| n.truth).collect()),
            descriptors: ds.descriptors(),
            loop_distance: ds.loop_distance,
        }
    }

    pub fn from_synth(ds: &SynthDataset, spec: &HistogramSpec) -> Result<Self, ReplayError> {
        let descriptors = ds.scans.par_iter().map(|s| extract(s, spec)).collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            sessions: ds.sessions.clone(),
            odometry: ds.odometry.clone(),
            truth: Some(ds.truth.clone()),
            descriptors,
            loop_distance: crate::detector::DEFAULT_LOOP_DISTANCE,
        })
    }

    pub fn len(&self) -> usize {
        self.odometry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.odometry.is_empty()
    }

    fn check(&self) -> Result<(), ReplayError> {
        let n = self.len();
        if self.descriptors.len() != n || self.truth.as_ref().is_some_and(|t| t.len() != n) {
            return Err(ReplayError::Input("odometry, truth and descriptor counts differ".into()));
        }
        if self.sessions.first().is_some_and(|&s| s != 0) || self.sessions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ReplayError::Input("session starts must begin at 0 and increase".into()));
        }
        Ok(())
    }
}

/// Runs scan registration for a loop hypothesis. Called from the worker
/// thread.
pub trait Registrar: Sync {
    fn register(&self, current: usize, candidate: usize) -> Result<RegistrationResult, String>;
    fn params(&self) -> &RegistrationParams;
}

pub enum ScanSource<'a> {
    Memory(&'a [PointCloud]),
    Dataset(&'a Dataset),
}

impl ScanSource<'_> {
    fn load(&self, index: usize) -> Result<PointCloud, String> {
        match self {
            ScanSource::Memory(scans) => scans.get(index).cloned().ok_or_else(|| format!("no scan {index}")),
            ScanSource::Dataset(ds) => ds.load_scan(index).map_err(|e| e.to_string()),
        }
    }
}

/// Registers the recorded scans with [`register_pair`].
pub struct CloudRegistrar<'a> {
    pub scans: ScanSource<'a>,
    pub params: RegistrationParams,
}

impl Registrar for CloudRegistrar<'_> {
    fn register(&self, current: usize, candidate: usize) -> Result<RegistrationResult, String> {
        let c = self.scans.load(current)?;
        let s = self.scans.load(candidate)?;
        Ok(register_pair(&c, &s, &self.params))
    }

    fn params(&self) -> &RegistrationParams {
        &self.params
    }
}

/// Remembers every probability it hands out, for D/FA bookkeeping.
struct RecordingScorer<'a, S> {
    inner: &'a S,
    seen: RefCell<BTreeMap<(u64, u64), f64>>,
}

impl<S: LoopScorer> LoopScorer for RecordingScorer<'_, S> {
    fn score(&self, current: &MapNode, candidate: &MapNode) -> Result<f64, SearchError> {
        let p = self.inner.score(current, candidate)?;
        let key = (current.id.min(candidate.id), current.id.max(candidate.id));
        self.seen.borrow_mut().insert(key, p);
        Ok(p)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LoopRecord {
    pub current: u64,
    pub candidate: u64,
    pub probability: f64,
    pub mode: Mode,
    /// Update at which the result was applied.
    pub applied_at: usize,
    pub verdict: Verdict,
    /// Accepted registrations only: whether the loop agreed with the rest of
    /// the graph and was kept.
    pub consistent: Option<bool>,
    pub transform: RigidTransform,
    pub inliers: usize,
    pub icp_residual: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct OptimizationRecord {
    pub after_loop: usize,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
    pub converged: bool,
    pub diverged: bool,
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct EndpointError {
    pub node: usize,
    pub odometry: f64,
    pub optimized: f64,
}

impl EndpointError {
    /// Fraction of the odometry error removed by loop closure.
    pub fn reduction(&self) -> f64 {
        if self.odometry > 0.0 {
            1.0 - self.optimized / self.odometry
        } else {
            0.0
        }
    }
}

/// Wall-clock time per stage. Not part of the deterministic output.
#[derive(Clone, Copy, Debug, Default, Serialize)]
pub struct StageTiming {
    pub search_s: f64,
    pub registration_s: f64,
    pub optimization_s: f64,
    pub total_s: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ReplayReport {
    pub nodes: usize,
    /// Updates where the detector fired.
    pub attempted: usize,
    /// Hypotheses that passed neighbour verification or the cluster test.
    pub verified: usize,
    /// Hypotheses that went through registration.
    pub registered: usize,
    /// Accepted registrations kept in the graph.
    pub accepted: usize,
    /// Accepted registrations undone because they contradicted the graph.
    pub inconsistent: usize,
    /// Detector rates over every pair scored during the search, against
    /// ground-truth distances.
    pub rates: Option<Rates>,
    pub loops: Vec<LoopRecord>,
    pub transitions: Vec<(u64, Mode, Mode)>,
    pub optimizations: Vec<OptimizationRecord>,
    /// Last node of the first session.
    pub endpoint: Option<EndpointError>,
    pub final_poses: Vec<Pose2>,
    pub buffer_violations: usize,
    pub verification_violations: usize,
    pub failures: Vec<String>,
    pub traces: Vec<UpdateTrace>,
    pub timing: StageTiming,
    /// Final optimized graph, for CSV dumps.
    #[serde(skip)]
    pub graph: PoseGraph,
}

impl ReplayReport {
    pub fn funnel_holds(&self) -> bool {
        self.accepted + self.inconsistent <= self.registered && self.registered <= self.verified && self.verified <= self.attempted
    }

    /// Serialized report without timing; equal for identical inputs.
    pub fn fingerprint(&self) -> String {
        let mut r = self.clone();
        r.timing = StageTiming::default();
        serde_json::to_string(&r).expect("report serializes")
    }
}

struct Job {
    request: LoopRequest,
}

struct Done {
    request: LoopRequest,
    result: Result<RegistrationResult, String>,
    elapsed: Duration,
}

/// Replay with a trained detector and the recorded scans.
pub fn replay_dataset(ds: &Dataset, model: &DetectorModel, config: &ReplayConfig) -> Result<ReplayReport, ReplayError> {
    let fp = ds.spec.fingerprint();
    if model.spec_fingerprint != fp {
        return Err(ReplayError::SpecMismatch {
            model: model.spec_fingerprint.clone(),
            dataset: fp,
        });
    }
    let registrar = CloudRegistrar {
        scans: ScanSource::Dataset(ds),
        params: config.registration.clone(),
    };
    replay(&ReplayInput::from_dataset(ds), model, &registrar, config)
}

/// Runs the full loop-closure pipeline over `input`. Registration runs on
/// a worker thread; at most one request is in flight and its result is
/// applied at the start of the following update.
pub fn replay<S: LoopScorer, R: Registrar>(
    input: &ReplayInput,
    scorer: &S,
    registrar: &R,
    config: &ReplayConfig,
) -> Result<ReplayReport, ReplayError> {
    input.check()?;
    config.search.validate().map_err(|e| ReplayError::Input(e.to_string()))?;
    let start = Instant::now();
    let scorer = RecordingScorer {
        inner: scorer,
        seen: RefCell::new(BTreeMap::new()),
    };
    let mut report = ReplayReport {
        nodes: input.len(),
        attempted: 0,
        verified: 0,
        registered: 0,
        accepted: 0,
        inconsistent: 0,
        rates: None,
        loops: Vec::new(),
        transitions: Vec::new(),
        optimizations: Vec::new(),
        endpoint: None,
        final_poses: Vec::new(),
        buffer_violations: 0,
        verification_violations: 0,
        failures: Vec::new(),
        traces: Vec::new(),
        timing: StageTiming::default(),
        graph: PoseGraph::new(),
    };
    let mut graph = PoseGraph::new();
    let mut wm = WorkingMemory::new(config.search.n_buffer);
    let mut state = SearchState::default();
    let step_cov = Matrix2::identity() * config.step_sigma.powi(2);

    std::thread::scope(|scope| {
        let (job_tx, job_rx) = mpsc::channel::<Job>();
        let (done_tx, done_rx) = mpsc::channel::<Done>();
        scope.spawn(move || {
            for job in job_rx {
                let t = Instant::now();
                let result = registrar.register(job.request.current as usize, job.request.candidate as usize);
                let done = Done {
                    request: job.request,
                    result,
                    elapsed: t.elapsed(),
                };
                if done_tx.send(done).is_err() {
                    break;
                }
            }
        });

        let mut in_flight = false;
        let apply = |done: Done, boundary: usize, graph: &mut PoseGraph, wm: &mut WorkingMemory, state: &mut SearchState, report: &mut ReplayReport| {
            report.timing.registration_s += done.elapsed.as_secs_f64();
            let req = done.request;
            let result = match done.result {
                Ok(r) => r,
                Err(e) => {
                    warn!("registration {}->{} failed: {e}", req.candidate, req.current);
                    report.failures.push(format!("node {}: registration with {} failed: {e}", req.current, req.candidate));
                    return;
                }
            };
            report.registered += 1;
            debug!("registration {}->{}: {}", req.candidate, req.current, result.verdict);
            report.loops.push(LoopRecord {
                current: req.current,
                candidate: req.candidate,
                probability: req.probability,
                mode: req.mode,
                applied_at: boundary,
                verdict: result.verdict,
                consistent: None,
                transform: result.transform,
                inliers: result.inliers,
                icp_residual: result.icp_residual,
            });
            if !result.verdict.is_accepted() {
                return;
            }
            if !verification_holds(&result, registrar.params()) {
                report.verification_violations += 1;
            }
            let backup = graph.clone();
            if let Err(e) = graph.add_loop(req.candidate as usize, req.current as usize, &result, config.loop_weight) {
                report.failures.push(format!("node {}: loop edge refused: {e}", req.current));
                return;
            }
            let t = Instant::now();
            let opt = graph.optimize(config.optimize_iterations, config.optimize_tolerance);
            report.timing.optimization_s += t.elapsed().as_secs_f64();
            report.optimizations.push(OptimizationRecord {
                after_loop: report.loops.len() - 1,
                iterations: opt.iterations,
                residual_history: opt.residual_history,
                converged: opt.converged,
                diverged: opt.diverged,
            });
            let (et, ea) = graph.loop_error(req.candidate as usize, req.current as usize).unwrap_or((0.0, 0.0));
            let consistent = et <= config.max_loop_translation_error && ea <= config.max_loop_angle_error;
            report.loops.last_mut().unwrap().consistent = Some(consistent);
            if !consistent {
                info!("loop {}->{} contradicts the graph ({et:.2} m, {ea:.3} rad); undone", req.candidate, req.current);
                *graph = backup;
                report.inconsistent += 1;
                return;
            }
            report.accepted += 1;
            state.record_accepted();
            for n in &graph.nodes {
                if let Ok(m) = wm.get_mut(n.id as u64) {
                    m.pose = n.pose;
                    m.covariance = n.covariance;
                }
            }
        };

        for k in 0..input.len() {
            if in_flight {
                let done = done_rx.recv().expect("registration worker alive");
                apply(done, k, &mut graph, &mut wm, &mut state, &mut report);
                in_flight = false;
            }

            let session = session_of(&input.sessions, k);
            if input.sessions.contains(&k) {
                graph.add_session_start(session, input.odometry[k]);
                state.begin_session(session, k > 0);
            } else {
                let edge = OdometryEdge {
                    from: k - 1,
                    to: k,
                    delta: input.odometry[k - 1].between(&input.odometry[k]),
                    step_covariance: step_cov,
                };
                if let Err(e) = graph.add_odometry(edge) {
                    report.failures.push(format!("node {k}: {e}"));
                }
            }
            let g = &graph.nodes[k];
            let node = MapNode {
                id: k as u64,
                session,
                pose: g.pose,
                covariance: g.covariance,
                descriptor: input.descriptors[k].clone(),
            };
            if let Err(e) = wm.push(node) {
                report.failures.push(format!("node {k}: {e}"));
                continue;
            }

            let t = Instant::now();
            let n_local = graph.local_count(k, config.local_hops);
            let trace = process_map_update(&wm, k as u64, &mut state, &config.search, &scorer, n_local);
            report.timing.search_s += t.elapsed().as_secs_f64();
            let trace = match trace {
                Ok(t) => t,
                Err(e) => {
                    warn!("loop search at node {k} failed: {e}");
                    report.failures.push(format!("node {k}: {e}"));
                    continue;
                }
            };
            if let Some((from, to)) = trace.transition {
                info!("node {k}: {from:?} -> {to:?} search");
                report.transitions.push((k as u64, from, to));
            }
            if let Some(d) = trace.detection {
                report.attempted += 1;
                if d.id == k as u64 || trace.excluded.contains(&d.id) {
                    report.buffer_violations += 1;
                }
            }
            if let Some(req) = trace.request {
                report.verified += 1;
                // the queue is drained at every boundary, so the worker is idle
                job_tx.send(Job { request: req }).expect("registration worker alive");
                in_flight = true;
            }
            report.traces.push(trace);
        }
        if in_flight {
            let done = done_rx.recv().expect("registration worker alive");
            apply(done, input.len(), &mut graph, &mut wm, &mut state, &mut report);
        }
        drop(job_tx);
    });

    if let Some(truth) = &input.truth {
        let mut probs = Vec::new();
        let mut labels = Vec::new();
        for (&(i, j), &p) in scorer.seen.borrow().iter() {
            probs.push(p);
            labels.push(truth[i as usize].distance(&truth[j as usize]) < input.loop_distance);
        }
        if !probs.is_empty() {
            report.rates = Some(Rates::from_predictions(&probs, &labels, config.search.p_min));
        }
        if !input.is_empty() {
            let last = input.sessions.get(1).map_or(input.len(), |&s| s) - 1;
            report.endpoint = Some(EndpointError {
                node: last,
                odometry: input.odometry[last].distance(&truth[last]),
                optimized: graph.nodes[last].pose.distance(&truth[last]),
            });
        }
    }
    report.final_poses = graph.nodes.iter().map(|n| n.pose).collect();
    report.graph = graph;
    report.timing.total_s = start.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::HistogramSpec;
    use crate::registration::RejectReason;

    fn descriptor() -> Descriptor {
        let cloud = PointCloud::new(vec![crate::pointcloud::Point::xyz(1.0, 2.0, 0.5); 3]);
        extract(&cloud, &HistogramSpec::default()).unwrap()
    }

    /// Fires for every pair of nodes closer than 2 m in truth.
    struct Oracle(Vec<Pose2>);

    impl LoopScorer for Oracle {
        fn score(&self, c: &MapNode, s: &MapNode) -> Result<f64, SearchError> {
            let d = self.0[c.id as usize].distance(&self.0[s.id as usize]);
            Ok(if d < 2.0 { 0.9 } else { 0.1 })
        }
    }

    /// Returns the true relative transform, optionally rejecting everything.
    struct TruthRegistrar {
        truth: Vec<Pose2>,
        params: RegistrationParams,
        reject: bool,
    }

    impl Registrar for TruthRegistrar {
        fn register(&self, current: usize, candidate: usize) -> Result<RegistrationResult, String> {
            let rel = self.truth[candidate].between(&self.truth[current]);
            Ok(RegistrationResult {
                transform: RigidTransform::from_yaw(rel.theta, nalgebra::Vector3::new(rel.x, rel.y, 0.0)),
                inliers: self.params.n_inliers,
                source_size: self.params.n_p_min,
                target_size: self.params.n_p_min,
                source_keypoints: 10,
                target_keypoints: 10,
                icp_residual: Some(0.0),
                verdict: if self.reject {
                    Verdict::Rejected(RejectReason::TooFewInliers)
                } else {
                    Verdict::Accepted
                },
            })
        }

        fn params(&self) -> &RegistrationParams {
            &self.params
        }
    }

    /// Square of side 10 driven 1.3 times with a yaw drift.
    fn square() -> (Vec<Pose2>, Vec<Pose2>) {
        let mut truth = Vec::new();
        for k in 0..52 {
            let side = (k / 10) % 4;
            let s = (k % 10) as f64;
            let theta = side as f64 * std::f64::consts::FRAC_PI_2;
            let p = match side {
                0 => Pose2::new(s, 0.0, theta),
                1 => Pose2::new(10.0, s, theta),
                2 => Pose2::new(10.0 - s, 10.0, theta),
                _ => Pose2::new(0.0, 10.0 - s, theta),
            };
            truth.push(p);
        }
        let mut odo = vec![truth[0]];
        for k in 1..truth.len() {
            let mut d = truth[k - 1].between(&truth[k]);
            d.theta += 0.01;
            odo.push(odo[k - 1].compose(&d));
        }
        (truth, odo)
    }

    fn input(truth: &[Pose2], odo: &[Pose2]) -> ReplayInput {
        ReplayInput {
            sessions: vec![0],
            odometry: odo.to_vec(),
            truth: Some(truth.to_vec()),
            descriptors: vec![descriptor(); truth.len()],
            loop_distance: 2.0,
        }
    }

    fn config() -> ReplayConfig {
        ReplayConfig {
            search: SearchConfig {
                n_n_max: None,
                r_min: 3.0,
                ..SearchConfig::default()
            },
            ..ReplayConfig::default()
        }
    }

    #[test]
    fn square_loop_is_closed() {
        let (truth, odo) = square();
        let reg = TruthRegistrar {
            truth: truth.clone(),
            params: RegistrationParams::default(),
            reject: false,
        };
        let r = replay(&input(&truth, &odo), &Oracle(truth.clone()), &reg, &config()).unwrap();
        assert!(r.accepted >= 1);
        assert!(r.funnel_holds());
        assert_eq!(r.buffer_violations, 0);
        assert_eq!(r.verification_violations, 0);
        let e = r.endpoint.unwrap();
        assert!(e.reduction() >= 0.9, "{e:?}");
        for o in &r.optimizations {
            assert!(o.residual_history.windows(2).all(|w| w[1] <= w[0]));
        }
        let rates = r.rates.unwrap();
        assert_eq!(rates.false_alarm, Some(0.0));
    }

    #[test]
    fn rejected_registrations_leave_odometry() {
        let (truth, odo) = square();
        let reg = TruthRegistrar {
            truth: truth.clone(),
            params: RegistrationParams::default(),
            reject: true,
        };
        let r = replay(&input(&truth, &odo), &Oracle(truth.clone()), &reg, &config()).unwrap();
        assert!(r.registered >= 1);
        assert_eq!(r.accepted, 0);
        for (p, o) in r.final_poses.iter().zip(&odo) {
            assert!(p.distance(o) < 1e-12);
        }
    }

    #[test]
    fn straight_line_has_no_loops() {
        let truth: Vec<Pose2> = (0..40).map(|k| Pose2::new(k as f64 * 3.0, 0.0, 0.0)).collect();
        let reg = TruthRegistrar {
            truth: truth.clone(),
            params: RegistrationParams::default(),
            reject: false,
        };
        let r = replay(&input(&truth, &truth), &Oracle(truth.clone()), &reg, &config()).unwrap();
        assert_eq!((r.attempted, r.accepted), (0, 0));
    }

    #[test]
    fn deterministic() {
        let (truth, odo) = square();
        let reg = TruthRegistrar {
            truth: truth.clone(),
            params: RegistrationParams::default(),
            reject: false,
        };
        let a = replay(&input(&truth, &odo), &Oracle(truth.clone()), &reg, &config()).unwrap();
        let b = replay(&input(&truth, &odo), &Oracle(truth.clone()), &reg, &config()).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn inconsistent_input() {
        let (truth, odo) = square();
        let mut i = input(&truth, &odo);
        i.descriptors.pop();
        let reg = TruthRegistrar {
            truth: truth.clone(),
            params: RegistrationParams::default(),
            reject: false,
        };
        assert!(replay(&i, &Oracle(truth.clone()), &reg, &config()).is_err());
    }
}
