//! Loop search state machine: a search radius that grows with the position
//! uncertainty, random candidate sampling, probability gating, neighbour
//! verification, and the global multi-session search used until the robot
//! is localized in the previous map.

use nalgebra::Matrix2;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::{compare, Descriptor};
use crate::detector::{DetectorError, DetectorModel};
use crate::posegraph::Pose2;

/// 95% quantile of the chi-square distribution with two degrees of freedom.
pub const CHI2_95_2DOF: f64 = 5.991;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("largest eigenvalue must be non-negative, got {0}")]
    NegativeLambda(f64),
    #[error("covariance must be a finite symmetric matrix")]
    InvalidCovariance,
    #[error("localization ratio needs a non-empty map and n_local <= n_wm ({n_local}/{n_wm})")]
    InvalidRatio { n_local: usize, n_wm: usize },
    #[error("node {0} is not in working memory")]
    UnknownNode(u64),
    #[error("node ids must increase: {0} after {1}")]
    NonMonotoneId(u64, u64),
    #[error("invalid search configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Detector(#[from] DetectorError),
}

/// `r = r_min + beta * 2 * sqrt(chi2 * lambda_max)`: the constant part plus
/// the scaled major axis of the 95% confidence ellipse.
pub fn search_radius(lambda_max: f64, r_min: f64, beta: f64) -> Result<f64, SearchError> {
    if !(lambda_max >= 0.0) {
        return Err(SearchError::NegativeLambda(lambda_max));
    }
    Ok(r_min + beta * 2.0 * (CHI2_95_2DOF * lambda_max).sqrt())
}

/// Larger eigenvalue of a symmetric 2x2 matrix.
pub fn lambda_max(cov: &Matrix2<f64>) -> Result<f64, SearchError> {
    let (a, b, c, d) = (cov[(0, 0)], cov[(0, 1)], cov[(1, 0)], cov[(1, 1)]);
    if !cov.iter().all(|v| v.is_finite()) || (b - c).abs() > 1e-9 * (1.0 + cov.amax()) {
        return Err(SearchError::InvalidCovariance);
    }
    let half_trace = 0.5 * (a + d);
    let disc = (0.25 * (a - d) * (a - d) + b * c).max(0.0).sqrt();
    Ok(half_trace + disc)
}

pub fn localization_ratio(n_local: usize, n_wm: usize) -> Result<f64, SearchError> {
    if n_wm == 0 || n_local > n_wm {
        return Err(SearchError::InvalidRatio { n_local, n_wm });
    }
    Ok(n_local as f64 / n_wm as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapNode {
    pub id: u64,
    pub session: u32,
    pub pose: Pose2,
    pub covariance: Matrix2<f64>,
    pub descriptor: Descriptor,
}

impl MapNode {
    pub fn distance(&self, other: &MapNode) -> f64 {
        self.pose.distance(&other.pose)
    }
}

/// Map nodes in creation order. The newest `n_buffer` nodes (besides the
/// current one) are never loop candidates.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct WorkingMemory {
    pub nodes: Vec<MapNode>,
    pub n_buffer: usize,
}

impl WorkingMemory {
    pub fn new(n_buffer: usize) -> Self {
        Self {
            nodes: Vec::new(),
            n_buffer,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn push(&mut self, node: MapNode) -> Result<(), SearchError> {
        if let Some(last) = self.nodes.last() {
            if node.id <= last.id {
                return Err(SearchError::NonMonotoneId(node.id, last.id));
            }
        }
        self.nodes.push(node);
        Ok(())
    }

    fn index_of(&self, id: u64) -> Result<usize, SearchError> {
        self.nodes
            .binary_search_by_key(&id, |n| n.id)
            .map_err(|_| SearchError::UnknownNode(id))
    }

    pub fn get(&self, id: u64) -> Result<&MapNode, SearchError> {
        Ok(&self.nodes[self.index_of(id)?])
    }

    pub fn get_mut(&mut self, id: u64) -> Result<&mut MapNode, SearchError> {
        let i = self.index_of(id)?;
        Ok(&mut self.nodes[i])
    }

    /// Nodes that may be searched from `current`: everything except the
    /// current node and the `n_buffer` newest other nodes.
    pub fn searchable(&self, current: u64) -> impl Iterator<Item = &MapNode> + '_ {
        let others = self.nodes.len() - self.nodes.iter().any(|n| n.id == current) as usize;
        let keep = others.saturating_sub(self.n_buffer);
        self.nodes.iter().filter(move |n| n.id != current).take(keep)
    }

    /// Ids of the current node plus the buffered nodes.
    pub fn excluded(&self, current: u64) -> Vec<u64> {
        let searchable: Vec<u64> = self.searchable(current).map(|n| n.id).collect();
        self.nodes.iter().map(|n| n.id).filter(|id| !searchable.contains(id)).collect()
    }
}

fn sample_ids(mut ids: Vec<u64>, n_n_max: Option<usize>, seed: u64) -> Vec<u64> {
    if let Some(max) = n_n_max {
        if ids.len() > max {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked: Vec<u64> = index::sample(&mut rng, ids.len(), max).iter().map(|k| ids[k]).collect();
            picked.sort_unstable();
            ids = picked;
        }
    }
    ids
}

/// Ids (ascending) of searchable nodes within `radius` of the current
/// node; at most `n_n_max` of them, drawn uniformly with `seed`.
pub fn candidate_set(
    wm: &WorkingMemory,
    current: u64,
    radius: f64,
    n_n_max: Option<usize>,
    seed: u64,
) -> Result<Vec<u64>, SearchError> {
    let c = wm.get(current)?;
    let ids = wm
        .searchable(current)
        .filter(|n| n.distance(c) <= radius)
        .map(|n| n.id)
        .collect();
    Ok(sample_ids(ids, n_n_max, seed))
}

/// Every searchable node, sampled down to `n_n_max`.
pub fn global_candidates(wm: &WorkingMemory, current: u64, n_n_max: Option<usize>, seed: u64) -> Result<Vec<u64>, SearchError> {
    wm.get(current)?;
    let ids = wm.searchable(current).map(|n| n.id).collect();
    Ok(sample_ids(ids, n_n_max, seed))
}

/// Loop probability of a node pair.
pub trait LoopScorer {
    fn score(&self, current: &MapNode, candidate: &MapNode) -> Result<f64, SearchError>;
}

impl LoopScorer for DetectorModel {
    fn score(&self, current: &MapNode, candidate: &MapNode) -> Result<f64, SearchError> {
        let x = compare(&current.descriptor, &candidate.descriptor).map_err(DetectorError::from)?;
        Ok(self.predict_proba(&x)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub id: u64,
    pub probability: f64,
}

/// Candidate with the highest probability above `p_min` (lowest id on ties).
pub fn detect(
    wm: &WorkingMemory,
    current: &MapNode,
    candidates: &[u64],
    scorer: &impl LoopScorer,
    p_min: f64,
) -> Result<Option<Detection>, SearchError> {
    let mut best: Option<Detection> = None;
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    for id in sorted {
        let p = scorer.score(current, wm.get(id)?)?;
        if p > p_min && best.is_none_or(|b| p > b.probability) {
            best = Some(Detection { id, probability: p });
        }
    }
    Ok(best)
}

/// Checks up to `n_v` searchable nodes of the same session on each side of
/// `i_star` (fewer at the start or end of the map); true when any of them
/// also scores above `p_min` against the current node.
pub fn verify_neighborhood(
    wm: &WorkingMemory,
    current: &MapNode,
    i_star: u64,
    n_v: usize,
    scorer: &impl LoopScorer,
    p_min: f64,
) -> Result<bool, SearchError> {
    let star = wm.get(i_star)?;
    let pool: Vec<&MapNode> = wm.searchable(current.id).filter(|n| n.session == star.session).collect();
    let Some(pos) = pool.iter().position(|n| n.id == i_star) else {
        return Err(SearchError::UnknownNode(i_star));
    };
    let before = &pool[pos.saturating_sub(n_v)..pos];
    let after = &pool[pos + 1..(pos + 1 + n_v).min(pool.len())];
    for n in before.iter().rev().chain(after) {
        if scorer.score(current, n)? > p_min {
            return Ok(true);
        }
    }
    Ok(false)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Global,
    Local,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MultisessionOutcome {
    Accept,
    Pending,
}

/// Appends a candidate to the window of consecutive global candidates.
/// Accepts once `n_ms` consecutive candidates lie pairwise within `r_ms`;
/// a candidate too far from any window member restarts the window.
pub fn multisession_step(window: &mut Vec<(u64, [f64; 2])>, candidate: (u64, [f64; 2]), n_ms: usize, r_ms: f64) -> MultisessionOutcome {
    let p = candidate.1;
    let fits = window
        .iter()
        .all(|(_, q)| (p[0] - q[0]).hypot(p[1] - q[1]) <= r_ms);
    if !fits {
        window.clear();
    }
    window.push(candidate);
    if window.len() > n_ms {
        window.remove(0);
    }
    if window.len() >= n_ms.max(1) {
        window.clear();
        MultisessionOutcome::Accept
    } else {
        MultisessionOutcome::Pending
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub r_min: f64,
    pub beta: f64,
    pub p_min: f64,
    pub n_v: usize,
    /// `None` means no sampling limit.
    pub n_n_max: Option<usize>,
    pub alpha_min: f64,
    pub n_ms: usize,
    pub r_ms: f64,
    pub n_start: usize,
    pub n_buffer: usize,
    pub seed: u64,
}

impl Default for SearchConfig {
    /// Campus robot values.
    fn default() -> Self {
        Self {
            r_min: 3.0,
            beta: 0.25,
            p_min: 0.524,
            n_v: 1,
            n_n_max: Some(200),
            alpha_min: 0.5,
            n_ms: 2,
            r_ms: 5.0,
            n_start: 3,
            n_buffer: 20,
            seed: 0,
        }
    }
}

impl SearchConfig {
    pub fn campus() -> Self {
        Self::default()
    }

    pub fn kitti() -> Self {
        Self {
            r_min: 7.5,
            n_v: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |s: &str| Err(SearchError::InvalidConfig(s.to_string()));
        if !(self.r_min > 0.0) || !(self.beta >= 0.0) {
            return bad("need r_min > 0 and beta >= 0");
        }
        if !(0.0..=1.0).contains(&self.p_min) || !(0.0..=1.0).contains(&self.alpha_min) {
            return bad("p_min and alpha_min must lie in [0, 1]");
        }
        if self.n_v == 0 || self.n_ms == 0 || self.n_start == 0 || self.n_n_max == Some(0) {
            return bad("counts must be at least 1");
        }
        if !(self.r_ms > 0.0) {
            return bad("r_ms must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchState {
    pub mode: Mode,
    /// Loops accepted since the current session started.
    pub accepted_loops: usize,
    pub window: Vec<(u64, [f64; 2])>,
    pub session: u32,
}

impl Default for SearchState {
    fn default() -> Self {
        Self {
            mode: Mode::Local,
            accepted_loops: 0,
            window: Vec::new(),
            session: 0,
        }
    }
}

impl SearchState {
    /// A session that continues an existing map starts in global mode.
    pub fn begin_session(&mut self, session: u32, has_previous_map: bool) {
        self.session = session;
        self.mode = if has_previous_map { Mode::Global } else { Mode::Local };
        self.accepted_loops = 0;
        self.window.clear();
    }

    pub fn record_accepted(&mut self) {
        self.accepted_loops += 1;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopRequest {
    pub current: u64,
    pub candidate: u64,
    pub probability: f64,
    pub mode: Mode,
}

/// What happened during one map update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateTrace {
    pub node: u64,
    pub mode: Mode,
    pub transition: Option<(Mode, Mode)>,
    pub alpha: f64,
    pub accepted_loops: usize,
    pub radius: Option<f64>,
    pub candidates: usize,
    pub detection: Option<Detection>,
    /// Neighbour verification (local) or cluster test (global) passed.
    pub verified: bool,
    pub excluded: Vec<u64>,
    pub request: Option<LoopRequest>,
}

/// One loop search for the newest map data. `n_local` is the number of
/// nodes whose position relative to the current node is known; it feeds
/// the localization ratio that ends the global search.
pub fn process_map_update(
    wm: &WorkingMemory,
    current: u64,
    state: &mut SearchState,
    config: &SearchConfig,
    scorer: &impl LoopScorer,
    n_local: usize,
) -> Result<UpdateTrace, SearchError> {
    let node = wm.get(current)?;
    let alpha = localization_ratio(n_local.min(wm.len()), wm.len())?;
    let mut trace = UpdateTrace {
        node: current,
        mode: state.mode,
        transition: None,
        alpha,
        accepted_loops: state.accepted_loops,
        radius: None,
        candidates: 0,
        detection: None,
        verified: false,
        excluded: wm.excluded(current),
        request: None,
    };
    if state.mode == Mode::Global && state.accepted_loops >= config.n_start && alpha >= config.alpha_min {
        state.mode = Mode::Local;
        state.window.clear();
        trace.transition = Some((Mode::Global, Mode::Local));
        trace.mode = Mode::Local;
    }
    let seed = config.seed ^ current.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let candidates = match state.mode {
        Mode::Local => {
            let r = search_radius(lambda_max(&node.covariance)?, config.r_min, config.beta)?;
            trace.radius = Some(r);
            candidate_set(wm, current, r, config.n_n_max, seed)?
        }
        Mode::Global => global_candidates(wm, current, config.n_n_max, seed)?,
    };
    trace.candidates = candidates.len();
    let Some(best) = detect(wm, node, &candidates, scorer, config.p_min)? else {
        return Ok(trace);
    };
    trace.detection = Some(best);
    trace.verified = match state.mode {
        Mode::Local => verify_neighborhood(wm, node, best.id, config.n_v, scorer, config.p_min)?,
        Mode::Global => {
            let pos = wm.get(best.id)?.pose.position();
            multisession_step(&mut state.window, (best.id, pos), config.n_ms, config.r_ms) == MultisessionOutcome::Accept
        }
    };
    if trace.verified {
        trace.request = Some(LoopRequest {
            current,
            candidate: best.id,
            probability: best.probability,
            mode: state.mode,
        });
    }
    Ok(trace)
}
