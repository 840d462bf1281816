//! Boosted loop detector.
//!
//! Discrete AdaBoost over decision stumps on the 41-entry comparison
//! vector, plus the tooling around it: balanced training-set construction,
//! probability threshold tuning against a false-alarm target, detection and
//! false-alarm rates, ROC points and selection among candidate models.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::descriptor::{compare, ComparisonVector, Descriptor, DescriptorError, COMPARISON_LEN};

pub const MODEL_VERSION: u32 = 1;
pub const DEFAULT_ROUNDS: usize = 50;
/// Ground distance below which a pair counts as the same place.
pub const DEFAULT_LOOP_DISTANCE: f64 = 3.0;

const EPS_CLAMP: f64 = 1e-12;
const TIE_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("training set has no positive pairs")]
    NoPositives,
    #[error("training set has no negative pairs")]
    NoNegatives,
    #[error("need at least two nodes, got {0}")]
    TooFewNodes(usize),
    #[error("{0} positions but {1} descriptors")]
    LengthMismatch(usize, usize),
    #[error("training requires both classes")]
    SingleClass,
    #[error("number of boosting rounds must be at least 1")]
    ZeroRounds,
    #[error("no weak learner beats chance on this data")]
    NoWeakLearner,
    #[error("model has no stumps")]
    EmptyModel,
    #[error("held-out set has no negative pairs")]
    NoHeldOutNegatives,
    #[error("no candidate models given")]
    NoCandidates,
    #[error("model was trained for histogram spec {model}, descriptors use {data}")]
    SpecMismatch { model: String, data: String },
    #[error("unsupported model version {0}")]
    Version(u32),
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error("model i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("model json: {0}")]
    Json(#[from] serde_json::Error),
}

/// One descriptor pair with its ground-truth label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub comparison: ComparisonVector,
    pub is_loop: bool,
    pub i: usize,
    pub j: usize,
    pub distance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionStump {
    /// Zero-based index into the comparison vector.
    pub feature: usize,
    pub threshold: f64,
    /// `+1` votes loop above the threshold, `-1` votes loop at or below it.
    pub polarity: i8,
    pub alpha: f64,
}

impl DecisionStump {
    #[inline]
    pub fn vote(&self, x: &ComparisonVector) -> f64 {
        let above = x.0[self.feature] > self.threshold;
        if above == (self.polarity > 0) {
            1.0
        } else {
            -1.0
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub version: u32,
    /// Requested number of boosting rounds; training may stop early.
    #[serde(rename = "T")]
    pub rounds: usize,
    pub stumps: Vec<DecisionStump>,
    pub p_min: f64,
    pub spec_fingerprint: String,
}

impl DetectorModel {
    /// Weighted vote `H(x) = sum alpha_t h_t(x)`.
    pub fn margin(&self, x: &ComparisonVector) -> f64 {
        self.stumps.iter().map(|s| s.alpha * s.vote(x)).sum()
    }

    /// Loop probability `(1 + H(x) / sum |alpha|) / 2`.
    pub fn predict_proba(&self, x: &ComparisonVector) -> Result<f64, DetectorError> {
        let total: f64 = self.stumps.iter().map(|s| s.alpha.abs()).sum();
        if self.stumps.is_empty() || total <= 0.0 {
            return Err(DetectorError::EmptyModel);
        }
        Ok((0.5 * (1.0 + self.margin(x) / total)).clamp(0.0, 1.0))
    }

    pub fn predict_pair(&self, a: &Descriptor, b: &Descriptor) -> Result<f64, DetectorError> {
        self.predict_proba(&compare(a, b)?)
    }

    pub fn check_fingerprint(&self, fingerprint: &str) -> Result<(), DetectorError> {
        if self.spec_fingerprint != fingerprint {
            return Err(DetectorError::SpecMismatch {
                model: self.spec_fingerprint.clone(),
                data: fingerprint.to_string(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DetectorError> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DetectorError> {
        let model: DetectorModel = serde_json::from_str(&fs::read_to_string(path)?)?;
        if model.version != MODEL_VERSION {
            return Err(DetectorError::Version(model.version));
        }
        Ok(model)
    }
}

/// Per-round diagnostics of a training run.
#[derive(Clone, Debug, Default, Serialize)]
pub struct TrainingReport {
    /// Weighted error of the stump chosen in each round.
    pub round_errors: Vec<f64>,
    /// Fraction of training samples the ensemble misclassifies after each round.
    pub training_errors: Vec<f64>,
    /// Running product of `2 sqrt(eps (1 - eps))`.
    pub error_bounds: Vec<f64>,
    pub stopped_early: bool,
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Every unordered pair `(i, j)` with `i <= j`, labelled by ground distance.
pub fn label_pairs(positions: &[[f64; 3]], loop_distance: f64) -> Vec<(usize, usize, f64, bool)> {
    let n = positions.len();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for i in 0..n {
        for j in i..n {
            let d = distance(&positions[i], &positions[j]);
            out.push((i, j, d, d < loop_distance));
        }
    }
    out
}

fn materialize(
    descriptors: &[Descriptor],
    labels: &[(usize, usize, f64, bool)],
) -> Result<Vec<LabeledPair>, DetectorError> {
    labels
        .par_iter()
        .map(|&(i, j, d, is_loop)| {
            Ok(LabeledPair {
                comparison: compare(&descriptors[i], &descriptors[j])?,
                is_loop,
                i,
                j,
                distance: d,
            })
        })
        .collect()
}

/// All `n (n + 1) / 2` pairs, self-pairs included, without rebalancing.
/// Used for held-out evaluation.
pub fn all_pairs(
    positions: &[[f64; 3]],
    descriptors: &[Descriptor],
    loop_distance: f64,
) -> Result<Vec<LabeledPair>, DetectorError> {
    if positions.len() != descriptors.len() {
        return Err(DetectorError::LengthMismatch(positions.len(), descriptors.len()));
    }
    materialize(descriptors, &label_pairs(positions, loop_distance))
}

/// Balanced training set: all pairs are labelled by distance, then the
/// larger class (normally the negatives) is randomly subsampled to the size
/// of the smaller one.
pub fn build_training_set(
    positions: &[[f64; 3]],
    descriptors: &[Descriptor],
    loop_distance: f64,
    seed: u64,
) -> Result<Vec<LabeledPair>, DetectorError> {
    if positions.len() != descriptors.len() {
        return Err(DetectorError::LengthMismatch(positions.len(), descriptors.len()));
    }
    if positions.len() < 2 {
        return Err(DetectorError::TooFewNodes(positions.len()));
    }
    let (pos, neg): (Vec<_>, Vec<_>) = label_pairs(positions, loop_distance)
        .into_iter()
        .partition(|p| p.3);
    if pos.is_empty() {
        return Err(DetectorError::NoPositives);
    }
    if neg.is_empty() {
        return Err(DetectorError::NoNegatives);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut subsample = |v: Vec<(usize, usize, f64, bool)>, k: usize| {
        if v.len() <= k {
            return v;
        }
        let mut idx = rand::seq::index::sample(&mut rng, v.len(), k).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| v[i]).collect::<Vec<_>>()
    };
    let k = pos.len().min(neg.len());
    let mut chosen = subsample(pos, k);
    chosen.extend(subsample(neg, k));
    materialize(descriptors, &chosen)
}

/// Best stump under the current weights: exhaustive over features and over
/// midpoints between consecutive distinct feature values.
fn best_stump(
    samples: &[ComparisonVector],
    labels: &[f64],
    weights: &[f64],
    sorted: &[Vec<u32>],
) -> Option<(DecisionStump, f64)> {
    let total: f64 = weights.iter().sum();
    let neg_total: f64 = labels
        .iter()
        .zip(weights)
        .filter(|(y, _)| **y < 0.0)
        .map(|(_, w)| w)
        .sum();
    let mut best: Option<(DecisionStump, f64)> = None;
    for (f, order) in sorted.iter().enumerate() {
        // error of "loop iff x > thr" with the threshold below every sample
        let mut err = neg_total;
        for k in 0..order.len().saturating_sub(1) {
            let i = order[k] as usize;
            if labels[i] > 0.0 {
                err += weights[i];
            } else {
                err -= weights[i];
            }
            let x0 = samples[i].0[f];
            let x1 = samples[order[k + 1] as usize].0[f];
            if x1 <= x0 {
                continue;
            }
            let (e, polarity) = if err <= total - err {
                (err, 1)
            } else {
                (total - err, -1)
            };
            if best.is_none_or(|(_, b)| e < b - TIE_TOL) {
                let stump = DecisionStump {
                    feature: f,
                    threshold: 0.5 * (x0 + x1),
                    polarity,
                    alpha: 0.0,
                };
                best = Some((stump, e.max(0.0)));
            }
        }
    }
    best.map(|(s, e)| (s, e / total))
}

/// Discrete AdaBoost on raw samples. `labels[i]` is true for loops.
pub fn train_samples(
    samples: &[ComparisonVector],
    labels: &[bool],
    rounds: usize,
) -> Result<(Vec<DecisionStump>, TrainingReport), DetectorError> {
    if rounds == 0 {
        return Err(DetectorError::ZeroRounds);
    }
    assert_eq!(samples.len(), labels.len());
    if !labels.iter().any(|l| *l) || labels.iter().all(|l| *l) {
        return Err(DetectorError::SingleClass);
    }
    let n = samples.len();
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    let sorted: Vec<Vec<u32>> = (0..COMPARISON_LEN)
        .map(|f| {
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|&a, &b| samples[a as usize].0[f].total_cmp(&samples[b as usize].0[f]));
            idx
        })
        .collect();

    let mut weights = vec![1.0 / n as f64; n];
    let mut margins = vec![0.0; n];
    let mut stumps = Vec::with_capacity(rounds);
    let mut report = TrainingReport::default();
    let mut bound = 1.0;

    for _ in 0..rounds {
        let Some((mut stump, eps)) = best_stump(samples, &y, &weights, &sorted) else {
            report.stopped_early = true;
            break;
        };
        if eps >= 0.5 {
            report.stopped_early = true;
            break;
        }
        let e = eps.clamp(EPS_CLAMP, 1.0 - EPS_CLAMP);
        stump.alpha = 0.5 * ((1.0 - e) / e).ln();

        let mut sum = 0.0;
        for i in 0..n {
            let h = stump.vote(&samples[i]);
            margins[i] += stump.alpha * h;
            weights[i] *= (-stump.alpha * y[i] * h).exp();
            sum += weights[i];
        }
        for w in &mut weights {
            *w /= sum;
        }
        stumps.push(stump);

        bound *= 2.0 * (e * (1.0 - e)).sqrt();
        let wrong = margins
            .iter()
            .zip(&y)
            .filter(|(m, y)| **m * **y <= 0.0)
            .count();
        report.round_errors.push(eps);
        report.training_errors.push(wrong as f64 / n as f64);
        report.error_bounds.push(bound);

        if eps < EPS_CLAMP {
            report.stopped_early = stumps.len() < rounds;
            break;
        }
    }
    if stumps.is_empty() {
        return Err(DetectorError::NoWeakLearner);
    }
    Ok((stumps, report))
}

pub fn train(
    pairs: &[LabeledPair],
    rounds: usize,
    spec_fingerprint: &str,
) -> Result<(DetectorModel, TrainingReport), DetectorError> {
    let samples: Vec<ComparisonVector> = pairs.iter().map(|p| p.comparison).collect();
    let labels: Vec<bool> = pairs.iter().map(|p| p.is_loop).collect();
    let (stumps, report) = train_samples(&samples, &labels, rounds)?;
    let model = DetectorModel {
        version: MODEL_VERSION,
        rounds,
        stumps,
        p_min: 0.5,
        spec_fingerprint: spec_fingerprint.to_string(),
    };
    Ok((model, report))
}

/// Confusion counts and the derived rates. A rate is `None` when its class
/// has no members.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Rates {
    pub true_positives: usize,
    pub false_negatives: usize,
    pub false_positives: usize,
    pub true_negatives: usize,
    pub detection: Option<f64>,
    pub false_alarm: Option<f64>,
}

impl Rates {
    pub fn from_predictions(probs: &[f64], labels: &[bool], p_min: f64) -> Rates {
        let mut r = Rates::default();
        for (&p, &l) in probs.iter().zip(labels) {
            match (l, p > p_min) {
                (true, true) => r.true_positives += 1,
                (true, false) => r.false_negatives += 1,
                (false, true) => r.false_positives += 1,
                (false, false) => r.true_negatives += 1,
            }
        }
        let positives = r.true_positives + r.false_negatives;
        let negatives = r.false_positives + r.true_negatives;
        r.detection = (positives > 0).then(|| r.true_positives as f64 / positives as f64);
        r.false_alarm = (negatives > 0).then(|| r.false_positives as f64 / negatives as f64);
        r
    }
}

fn predictions(model: &DetectorModel, pairs: &[LabeledPair]) -> Result<(Vec<f64>, Vec<bool>), DetectorError> {
    let probs = pairs
        .par_iter()
        .map(|p| model.predict_proba(&p.comparison))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((probs, pairs.iter().map(|p| p.is_loop).collect()))
}

/// Detection rate `TP / P` and false-alarm rate `FP / N` at `p_min`; a pair
/// is classified as loop when its probability exceeds `p_min`.
pub fn evaluate(model: &DetectorModel, p_min: f64, pairs: &[LabeledPair]) -> Result<Rates, DetectorError> {
    let (probs, labels) = predictions(model, pairs)?;
    Ok(Rates::from_predictions(&probs, &labels, p_min))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TuneOutcome {
    pub p_min: f64,
    pub rates: Rates,
    /// False when no candidate threshold met the target; `p_min` is then 1.
    pub achieved: bool,
}

/// Smallest threshold, scanning the distinct predicted probabilities in
/// ascending order, whose false-alarm rate is below `fa_target`.
pub fn tune_threshold_from_predictions(
    probs: &[f64],
    labels: &[bool],
    fa_target: f64,
) -> Result<TuneOutcome, DetectorError> {
    if !labels.iter().any(|l| !*l) {
        return Err(DetectorError::NoHeldOutNegatives);
    }
    let mut candidates = probs.to_vec();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    // negatives strictly above each candidate, via one pass over sorted negatives
    let mut neg: Vec<f64> = probs
        .iter()
        .zip(labels)
        .filter(|(_, l)| !**l)
        .map(|(p, _)| *p)
        .collect();
    neg.sort_by(f64::total_cmp);
    let n_neg = neg.len() as f64;
    let mut k = 0;
    for &t in &candidates {
        while k < neg.len() && neg[k] <= t {
            k += 1;
        }
        let fa = (neg.len() - k) as f64 / n_neg;
        if fa < fa_target {
            return Ok(TuneOutcome {
                p_min: t,
                rates: Rates::from_predictions(probs, labels, t),
                achieved: true,
            });
        }
    }
    log::warn!("no threshold reaches a false-alarm rate below {}", fa_target);
    Ok(TuneOutcome {
        p_min: 1.0,
        rates: Rates::from_predictions(probs, labels, 1.0),
        achieved: false,
    })
}

pub fn tune_threshold(
    model: &DetectorModel,
    heldout: &[LabeledPair],
    fa_target: f64,
) -> Result<TuneOutcome, DetectorError> {
    let (probs, labels) = predictions(model, heldout)?;
    tune_threshold_from_predictions(&probs, &labels, fa_target)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Pairs with probability above this value are classified as loops;
    /// the first point uses -1 so that everything fires.
    pub threshold: f64,
    pub false_alarm: f64,
    pub detection: f64,
}

pub fn roc_from_predictions(probs: &[f64], labels: &[bool]) -> Vec<RocPoint> {
    let mut thresholds = vec![-1.0];
    let mut uniq = probs.to_vec();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    thresholds.extend(uniq);
    thresholds
        .into_iter()
        .map(|t| {
            let r = Rates::from_predictions(probs, labels, t);
            RocPoint {
                threshold: t,
                false_alarm: r.false_alarm.unwrap_or(0.0),
                detection: r.detection.unwrap_or(0.0),
            }
        })
        .collect()
}

/// One (FA, D) point per distinct predicted probability, thresholds ascending.
pub fn roc_points(model: &DetectorModel, pairs: &[LabeledPair]) -> Result<Vec<RocPoint>, DetectorError> {
    let (probs, labels) = predictions(model, pairs)?;
    Ok(roc_from_predictions(&probs, &labels))
}

#[derive(Clone, Debug, Serialize)]
pub struct Selection {
    pub index: usize,
    pub rates: Rates,
    /// Set when no candidate met the false-alarm target.
    pub warning: bool,
}

/// Chooses among candidates, each evaluated at its own `p_min`: the highest
/// detection rate among those with FA below the target, ties broken by lower
/// FA and then lower index. Without any qualifying model, the lowest-FA one
/// is returned with the warning flag set.
pub fn select_best(
    candidates: &[DetectorModel],
    heldout: &[LabeledPair],
    fa_target: f64,
) -> Result<Selection, DetectorError> {
    if candidates.is_empty() {
        return Err(DetectorError::NoCandidates);
    }
    let rates = candidates
        .iter()
        .map(|m| evaluate(m, m.p_min, heldout))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(select_by_rates(&rates, fa_target))
}

pub fn select_by_rates(rates: &[Rates], fa_target: f64) -> Selection {
    let fa = |r: &Rates| r.false_alarm.unwrap_or(0.0);
    let d = |r: &Rates| r.detection.unwrap_or(0.0);
    let mut best: Option<usize> = None;
    for (i, r) in rates.iter().enumerate() {
        if fa(r) >= fa_target {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                let rb = &rates[b];
                if d(r) > d(rb) || (d(r) == d(rb) && fa(r) < fa(rb)) {
                    Some(i)
                } else {
                    Some(b)
                }
            }
        };
    }
    if let Some(index) = best {
        return Selection {
            index,
            rates: rates[index],
            warning: false,
        };
    }
    let index = (0..rates.len())
        .min_by(|&a, &b| fa(&rates[a]).total_cmp(&fa(&rates[b])).then(a.cmp(&b)))
        .expect("non-empty");
    log::warn!("no candidate detector meets the false-alarm target {}", fa_target);
    Selection {
        index,
        rates: rates[index],
        warning: true,
    }
}

/// Trains `count` candidate models, each on its own random negative subset
/// (seeds `base_seed`, `base_seed + 1`, ...). Runs in parallel.
pub fn train_candidates(
    positions: &[[f64; 3]],
    descriptors: &[Descriptor],
    loop_distance: f64,
    rounds: usize,
    count: usize,
    base_seed: u64,
) -> Result<Vec<DetectorModel>, DetectorError> {
    let fingerprint = descriptors
        .first()
        .map(|d| d.spec.fingerprint())
        .ok_or(DetectorError::TooFewNodes(0))?;
    (0..count as u64)
        .into_par_iter()
        .map(|k| {
            let pairs = build_training_set(positions, descriptors, loop_distance, base_seed + k)?;
            Ok(train(&pairs, rounds, &fingerprint)?.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cv(x: f64) -> ComparisonVector {
        let mut v = [0.0; COMPARISON_LEN];
        v[0] = x;
        ComparisonVector(v)
    }

    fn model(stumps: Vec<DecisionStump>) -> DetectorModel {
        DetectorModel {
            version: MODEL_VERSION,
            rounds: stumps.len(),
            stumps,
            p_min: 0.5,
            spec_fingerprint: "x".into(),
        }
    }

    fn stump(feature: usize, threshold: f64, polarity: i8, alpha: f64) -> DecisionStump {
        DecisionStump {
            feature,
            threshold,
            polarity,
            alpha,
        }
    }

    #[test]
    fn hand_computed_first_round() {
        let samples: Vec<_> = [0.0, 1.0, 2.0, 3.0].iter().map(|&x| cv(x)).collect();
        let labels = [true, true, false, true];
        let (stumps, report) = train_samples(&samples, &labels, 1).unwrap();
        assert_eq!(report.round_errors[0], 0.25);
        assert!((stumps[0].alpha - 0.5 * 3f64.ln()).abs() < 1e-12);
        assert_eq!(report.training_errors[0], 0.25);
    }

    #[test]
    fn separable_in_one_round() {
        let samples: Vec<_> = [-3.0, -2.0, -0.5, 1.5, 2.0, 4.0].iter().map(|&x| cv(x)).collect();
        let labels = [true, true, true, false, false, false];
        let (stumps, report) = train_samples(&samples, &labels, 50).unwrap();
        assert_eq!(stumps.len(), 1);
        assert!(report.stopped_early);
        assert_eq!(report.training_errors[0], 0.0);
        assert_eq!(stumps[0].polarity, -1);
        assert!(stumps[0].threshold > -0.5 && stumps[0].threshold < 1.5);
    }

    #[test]
    fn single_class_and_zero_rounds_rejected() {
        let s = vec![cv(1.0), cv(2.0)];
        assert!(matches!(train_samples(&s, &[true, true], 5), Err(DetectorError::SingleClass)));
        assert!(matches!(train_samples(&s, &[true, false], 0), Err(DetectorError::ZeroRounds)));
        // identical samples: no split exists
        let same = vec![cv(1.0), cv(1.0)];
        assert!(matches!(train_samples(&same, &[true, false], 5), Err(DetectorError::NoWeakLearner)));
    }

    #[test]
    fn probability_mapping() {
        let m = model(vec![stump(0, 0.0, 1, 0.6), stump(1, 0.0, 1, 0.4)]);
        let mut x = [0.0; COMPARISON_LEN];
        x[0] = 1.0; // first votes loop, second votes no-loop
        assert!((m.predict_proba(&ComparisonVector(x)).unwrap() - 0.6).abs() < 1e-15);
        x[1] = 1.0;
        assert_eq!(m.predict_proba(&ComparisonVector(x)).unwrap(), 1.0);
        assert_eq!(m.predict_proba(&ComparisonVector::zeros()).unwrap(), 0.0);
        assert!(matches!(model(vec![]).predict_proba(&cv(0.0)), Err(DetectorError::EmptyModel)));
    }

    #[test]
    fn three_collinear_nodes() {
        let positions = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [10.0, 0.0, 0.0]];
        let labels = label_pairs(&positions, 3.0);
        let pos: Vec<_> = labels.iter().filter(|l| l.3).map(|l| (l.0, l.1)).collect();
        let neg: Vec<_> = labels.iter().filter(|l| !l.3).map(|l| (l.0, l.1)).collect();
        assert_eq!(pos, vec![(0, 0), (0, 1), (1, 1), (2, 2)]);
        assert_eq!(neg, vec![(0, 2), (1, 2)]);
        assert_eq!(label_pairs(&vec![[0.0; 3]; 1248], 3.0).len(), 779_376);
    }

    #[test]
    fn rates_and_undefined_classes() {
        let probs = [0.9, 0.9, 0.9, 0.9, 0.9, 0.1, 0.1, 0.1, 0.1, 0.1];
        let labels = [true; 10];
        let r = Rates::from_predictions(&probs, &labels, 0.5);
        assert_eq!(r.detection, Some(0.5));
        assert_eq!(r.false_alarm, None);

        let mut probs = vec![0.1; 200];
        probs[0] = 0.9;
        let r = Rates::from_predictions(&probs, &[false; 200], 0.5);
        assert_eq!(r.false_alarm, Some(0.005));
    }

    #[test]
    fn tune_examples() {
        // perfect separation
        let probs = [0.2, 0.3, 0.8, 0.9];
        let labels = [false, false, true, true];
        let t = tune_threshold_from_predictions(&probs, &labels, 0.01).unwrap();
        assert_eq!(t.p_min, 0.3);
        assert_eq!(t.rates.detection, Some(1.0));
        assert!(t.achieved);

        let flat = [0.5; 6];
        let t = tune_threshold_from_predictions(&flat, &[false; 6], 0.01).unwrap();
        assert_eq!(t.rates.false_alarm, Some(0.0));
        assert_eq!(t.p_min, 0.5);

        let t = tune_threshold_from_predictions(&probs, &labels, 0.0).unwrap();
        assert!(!t.achieved);
        assert_eq!(t.p_min, 1.0);
        assert!(tune_threshold_from_predictions(&probs, &[true; 4], 0.01).is_err());
    }

    #[test]
    fn selection_rule() {
        let mk = |d: f64, fa: f64| Rates {
            detection: Some(d),
            false_alarm: Some(fa),
            ..Rates::default()
        };
        let rates = [mk(0.40, 0.005), mk(0.47, 0.008), mk(0.60, 0.02)];
        let s = select_by_rates(&rates, 0.01);
        assert_eq!((s.index, s.warning), (1, false));
        assert_eq!(select_by_rates(&rates[..1], 0.01).index, 0);
        let bad = [mk(0.9, 0.05), mk(0.8, 0.03), mk(0.7, 0.03)];
        let s = select_by_rates(&bad, 0.01);
        assert_eq!((s.index, s.warning), (1, true));
        let tied = [mk(0.5, 0.008), mk(0.5, 0.002), mk(0.5, 0.002)];
        assert_eq!(select_by_rates(&tied, 0.01).index, 1);
    }

    #[test]
    fn roc_endpoints() {
        let probs = [0.0, 0.2, 0.7, 1.0];
        let labels = [false, false, true, true];
        let roc = roc_from_predictions(&probs, &labels);
        assert_eq!((roc[0].false_alarm, roc[0].detection), (1.0, 1.0));
        let last = roc.last().unwrap();
        assert_eq!((last.false_alarm, last.detection), (0.0, 0.0));
        assert!(roc.iter().any(|p| p.false_alarm == 0.0 && p.detection == 1.0));
    }

    #[test]
    fn model_json_schema() {
        let m = model(vec![stump(3, 0.25, -1, 0.7)]);
        let v = serde_json::to_value(&m).unwrap();
        assert_eq!(v["version"], 1);
        assert_eq!(v["T"], 1);
        assert_eq!(v["stumps"][0]["feature"], 3);
        assert_eq!(v["stumps"][0]["polarity"], -1);
        assert!(v.get("p_min").is_some() && v.get("spec_fingerprint").is_some());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        assert_eq!(DetectorModel::load(&p).unwrap(), m);
    }

    fn arb_dataset() -> impl Strategy<Value = (Vec<ComparisonVector>, Vec<bool>)> {
        prop::collection::vec((prop::array::uniform4(-5.0..5.0f64), any::<bool>()), 8..60).prop_map(|v| {
            let samples = v
                .iter()
                .map(|(a, _)| {
                    let mut x = [0.0; COMPARISON_LEN];
                    x[..4].copy_from_slice(a);
                    ComparisonVector(x)
                })
                .collect();
            (samples, v.iter().map(|(_, l)| *l).collect())
        })
    }

    proptest! {
        #[test]
        fn error_bound_and_probability_range((samples, labels) in arb_dataset()) {
            prop_assume!(labels.iter().any(|l| *l) && labels.iter().any(|l| !*l));
            if let Ok((stumps, report)) = train_samples(&samples, &labels, 20) {
                for (e, b) in report.training_errors.iter().zip(&report.error_bounds) {
                    prop_assert!(*e <= *b + 1e-12);
                }
                let m = model(stumps);
                for x in &samples {
                    let p = m.predict_proba(x).unwrap();
                    prop_assert!((0.0..=1.0).contains(&p));
                    // threshold 0.5 agrees with the sign of the vote
                    let h = m.margin(x);
                    if h.abs() > 1e-9 {
                        prop_assert_eq!(p > 0.5, h > 0.0);
                    }
                }
            }
        }

        #[test]
        fn flipped_labels_flip_polarities((samples, labels) in arb_dataset()) {
            prop_assume!(labels.iter().any(|l| *l) && labels.iter().any(|l| !*l));
            let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
            let a = train_samples(&samples, &labels, 5);
            let b = train_samples(&samples, &flipped, 5);
            if let (Ok((sa, ra)), Ok((sb, rb))) = (a, b) {
                prop_assert_eq!(sa.len(), sb.len());
                for (x, y) in sa.iter().zip(&sb) {
                    prop_assert_eq!(x.feature, y.feature);
                    prop_assert_eq!(x.threshold, y.threshold);
                    prop_assert_eq!(x.polarity, -y.polarity);
                    prop_assert!((x.alpha - y.alpha).abs() < 1e-9);
                }
                let (ma, mb) = (model(sa), model(sb));
                let accuracy = |m: &DetectorModel, labels: &[bool]| {
                    samples.iter().zip(labels).filter(|(x, _)| m.margin(x).abs() > 1e-9)
                        .filter(|(x, l)| (m.margin(x) > 0.0) == **l).count()
                };
                prop_assert_eq!(accuracy(&ma, &labels), accuracy(&mb, &flipped));
                prop_assert_eq!(ra.round_errors.len(), rb.round_errors.len());
            }
        }

        #[test]
        fn alpha_scaling_leaves_probabilities_unchanged((samples, labels) in arb_dataset(), scale in 0.1..10.0f64) {
            prop_assume!(labels.iter().any(|l| *l) && labels.iter().any(|l| !*l));
            if let Ok((stumps, _)) = train_samples(&samples, &labels, 10) {
                let m = model(stumps.clone());
                let scaled = model(stumps.iter().map(|s| DecisionStump { alpha: s.alpha * scale, ..*s }).collect());
                for x in &samples {
                    prop_assert!((m.predict_proba(x).unwrap() - scaled.predict_proba(x).unwrap()).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn tuned_threshold_is_minimal(probs in prop::collection::vec(0.0..1.0f64, 5..120), seed in any::<u64>(), target in 0.0..0.2f64) {
            let labels: Vec<bool> = probs.iter().enumerate().map(|(i, _)| (seed >> (i % 64)) & 1 == 1).collect();
            prop_assume!(labels.iter().any(|l| !*l));
            let t = tune_threshold_from_predictions(&probs, &labels, target).unwrap();
            let fa_at = |thr: f64| Rates::from_predictions(&probs, &labels, thr).false_alarm.unwrap();
            if t.achieved {
                prop_assert!(fa_at(t.p_min) < target);
            }
            for &c in probs.iter().filter(|&&c| c < t.p_min) {
                prop_assert!(fa_at(c) >= target);
            }
        }

        #[test]
        fn roc_monotone(probs in prop::collection::vec(0.0..1.0f64, 2..80), seed in any::<u64>()) {
            let labels: Vec<bool> = probs.iter().enumerate().map(|(i, _)| (seed >> (i % 64)) & 1 == 1).collect();
            let roc = roc_from_predictions(&probs, &labels);
            for w in roc.windows(2) {
                prop_assert!(w[1].threshold > w[0].threshold);
                prop_assert!(w[1].detection <= w[0].detection);
                prop_assert!(w[1].false_alarm <= w[0].false_alarm);
            }
        }
    }
}
