//! Event classification and factorized accuracy.
//!
//! Every prediction is classified into nested events (in-support `A`, correct
//! half `B` or reachable `R`, exact match `C`, plus adjacency and
//! neighborhood probes). Rates are computed from integer counts so the chain
//! rule `P[C] = P[A] P[B|A] P[C|A∩B]` can be checked exactly.

use std::collections::BTreeMap;
use std::fmt;

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chemistry::{Chemistry, ChemistryError, Vertex, NUM_STONES};
use crate::task::{Episode, TaskKind};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("prediction {0} outside 0..108")]
    PredictionOutOfRange(usize),
    #[error("episode lacks oracle context: {0}")]
    MissingOracleContext(&'static str),
    #[error("episode {episode}: {reason}")]
    ForeignEpisode { episode: usize, reason: String },
    #[error("no records to aggregate")]
    Empty,
    #[error("chance baseline {kind} is undefined for task {task}")]
    IncompatibleKind { kind: ChanceKind, task: TaskKind },
    #[error("episodes mix task kinds {0} and {1}")]
    MixedTasks(TaskKind, TaskKind),
    #[error(transparent)]
    Chemistry(#[from] ChemistryError),
}

/// Reward bin of the query start stone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RewardBin {
    #[serde(rename = "-3")]
    Minus3,
    #[serde(rename = "-1")]
    Minus1,
    #[serde(rename = "+1")]
    Plus1,
    #[serde(rename = "+15")]
    Plus15,
}

impl RewardBin {
    pub const ALL: [RewardBin; 4] = [RewardBin::Plus15, RewardBin::Plus1, RewardBin::Minus1, RewardBin::Minus3];

    pub fn from_level(level: u8) -> RewardBin {
        match level {
            0 => RewardBin::Minus3,
            1 => RewardBin::Minus1,
            2 => RewardBin::Plus1,
            _ => RewardBin::Plus15,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            RewardBin::Minus3 => "-3",
            RewardBin::Minus1 => "-1",
            RewardBin::Plus1 => "+1",
            RewardBin::Plus15 => "+15",
        }
    }
}

impl fmt::Display for RewardBin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Event flags for one prediction. Flags that do not apply to the task are `None`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub episode: usize,
    pub task_kind: TaskKind,
    pub k: u8,
    pub reward_bin: RewardBin,
    pub predicted: usize,
    pub target: usize,
    /// Prediction is one of the chemistry's 8 stones.
    pub a: bool,
    /// Prediction lies in the target-bearing half.
    pub b: Option<bool>,
    pub c: bool,
    /// Prediction lies in the k-hop reachable set (composition).
    pub r: Option<bool>,
    /// Extended neighborhood: target half or query neighbors (decomposition).
    pub en: Option<bool>,
    /// Neighborhood refinement: target half (decomposition).
    pub nr: Option<bool>,
    /// Prediction is reward-adjacent to the query start (withheld-pair).
    pub tr: Option<bool>,
    /// Prediction is a geometric neighbor of the query start (withheld-pair).
    pub nbr: Option<bool>,
    /// Prediction is a same-half neighbor reachable through the support (withheld-pair).
    pub rr: Option<bool>,
    /// Target is reward-adjacent to the query start (withheld-pair).
    pub y_in_tr: Option<bool>,
}

impl EventRecord {
    /// Nesting `C ⇒ B ⇒ A`, `C ⇒ R ⇒ A`, `NR ⇒ EN`.
    pub fn nesting_holds(&self) -> bool {
        let implies = |x: bool, y: bool| !x || y;
        let mut ok = implies(self.c, self.a);
        if let Some(b) = self.b {
            ok &= implies(self.c, b) && implies(b, self.a);
        }
        if let Some(r) = self.r {
            ok &= implies(self.c, r) && implies(r, self.a);
        }
        if let (Some(en), Some(nr)) = (self.en, self.nr) {
            ok &= implies(nr, en) && implies(en, self.a);
        }
        ok
    }
}

fn member(set: &[Vertex], v: Option<Vertex>) -> bool {
    v.is_some_and(|v| set.contains(&v))
}

/// Classifies `predicted` for `episode` (indexed `episode_index`) of `chem`.
pub fn classify(
    chem: &Chemistry,
    episode: &Episode,
    episode_index: usize,
    predicted: usize,
) -> Result<EventRecord, MetricsError> {
    if predicted >= NUM_STONES {
        return Err(MetricsError::PredictionOutOfRange(predicted));
    }
    let foreign = |reason: &str| MetricsError::ForeignEpisode {
        episode: episode_index,
        reason: reason.to_string(),
    };
    let x = chem
        .vertex_of(episode.query_start)
        .ok_or_else(|| foreign("query start is not a chemistry stone"))?;
    let y = chem
        .vertex_of(episode.target)
        .ok_or_else(|| foreign("target is not a chemistry stone"))?;
    let p = chem.vertex_of_class(predicted);
    let a = p.is_some();
    let target = episode.target_class();

    let mut rec = EventRecord {
        episode: episode_index,
        task_kind: episode.task_kind,
        k: episode.k,
        reward_bin: RewardBin::from_level(episode.query_start.reward_level()),
        predicted,
        target,
        a,
        b: None,
        c: predicted == target,
        r: None,
        en: None,
        nr: None,
        tr: None,
        nbr: None,
        rr: None,
        y_in_tr: None,
    };

    match episode.task_kind {
        TaskKind::WithheldPair => {
            let axis = episode
                .withheld_axis
                .ok_or(MetricsError::MissingOracleContext("withheld_axis"))? as usize;
            let half = chem.face_of(y, axis)?;
            let t_r = chem.reward_adjacent_set(x);
            rec.b = Some(member(&half, p));
            rec.tr = Some(member(&t_r, p));
            rec.nbr = Some(member(&chem.neighbors(x), p));
            rec.rr = Some(member(&chem.same_half_adjacent_in_support(x, axis)?, p));
            rec.y_in_tr = Some(t_r.contains(&y));
        }
        TaskKind::Composition => {
            let reach = chem.reachable_set(x, episode.hl_query as usize)?;
            rec.r = Some(member(&reach, p));
        }
        TaskKind::Decomposition => {
            let potion = *episode
                .query_potions
                .first()
                .ok_or(MetricsError::MissingOracleContext("query potion"))?;
            let half = chem.face_of(y, chem.axis_of(potion))?;
            let in_half = member(&half, p);
            rec.b = Some(in_half);
            rec.nr = Some(in_half);
            rec.en = Some(in_half || member(&chem.neighbors(x), p));
        }
    }
    Ok(rec)
}

/// A count-derived rate; `value` is `None` when the denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub num: u64,
    pub den: u64,
    pub value: Option<f64>,
}

impl Rate {
    pub fn new(num: u64, den: u64) -> Rate {
        Rate {
            num,
            den,
            value: (den > 0).then(|| num as f64 / den as f64),
        }
    }

    pub fn ratio(&self) -> Option<Ratio<u64>> {
        (self.den > 0).then(|| Ratio::new(self.num, self.den))
    }

    pub fn complement(&self) -> Rate {
        Rate::new(self.den - self.num, self.den)
    }
}

/// Weighted event counts. Weights let exact chance expectations stay integral.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounts {
    pub n: u64,
    pub a: u64,
    pub ab: u64,
    pub c: u64,
    pub ar: u64,
    pub en: u64,
    pub nr: u64,
    pub tr: u64,
    pub nbr: u64,
    pub rr: u64,
    pub y_in_tr: u64,
    pub c_and_y_in_tr: u64,
}

impl EventCounts {
    pub fn add(&mut self, r: &EventRecord, w: u64) {
        let on = |flag: Option<bool>| flag == Some(true);
        self.n += w;
        if r.a {
            self.a += w;
            if on(r.b) {
                self.ab += w;
            }
            if on(r.r) {
                self.ar += w;
            }
            if on(r.en) {
                self.en += w;
            }
            if on(r.en) && on(r.nr) {
                self.nr += w;
            }
            if on(r.tr) {
                self.tr += w;
            }
            if on(r.nbr) {
                self.nbr += w;
            }
            if on(r.rr) {
                self.rr += w;
            }
        }
        if r.c {
            self.c += w;
        }
        if on(r.y_in_tr) {
            self.y_in_tr += w;
            if r.c {
                self.c_and_y_in_tr += w;
            }
        }
    }
}

/// Factorized rates for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizedMetrics {
    pub task_kind: TaskKind,
    pub counts: EventCounts,
    /// `P[C]`.
    pub accuracy: Rate,
    pub p_a: Rate,
    pub p_b_given_a: Option<Rate>,
    pub p_not_b_given_a: Option<Rate>,
    pub p_c_given_ab: Option<Rate>,
    pub p_r_given_a: Option<Rate>,
    pub p_c_given_ar: Option<Rate>,
    pub p_en_given_a: Option<Rate>,
    pub p_nr_given_en: Option<Rate>,
}

impl FactorizedMetrics {
    pub fn from_counts(task_kind: TaskKind, counts: EventCounts) -> Self {
        let halves = task_kind != TaskKind::Composition;
        let composition = task_kind == TaskKind::Composition;
        let decomposition = task_kind == TaskKind::Decomposition;
        FactorizedMetrics {
            task_kind,
            counts,
            accuracy: Rate::new(counts.c, counts.n),
            p_a: Rate::new(counts.a, counts.n),
            p_b_given_a: halves.then(|| Rate::new(counts.ab, counts.a)),
            p_not_b_given_a: halves.then(|| Rate::new(counts.a - counts.ab, counts.a)),
            p_c_given_ab: halves.then(|| Rate::new(counts.c, counts.ab)),
            p_r_given_a: composition.then(|| Rate::new(counts.ar, counts.a)),
            p_c_given_ar: composition.then(|| Rate::new(counts.c, counts.ar)),
            p_en_given_a: decomposition.then(|| Rate::new(counts.en, counts.a)),
            p_nr_given_en: decomposition.then(|| Rate::new(counts.nr, counts.en)),
        }
    }

    /// The middle factor of the chain rule: `B|A`, or `R|A` for composition.
    pub fn middle(&self) -> Rate {
        self.p_b_given_a.or(self.p_r_given_a).expect("one of B|A, R|A")
    }

    /// The last factor: `C|A∩B`, or `C|A∩R` for composition.
    pub fn last(&self) -> Rate {
        self.p_c_given_ab.or(self.p_c_given_ar).expect("one of C|A∩B, C|A∩R")
    }

    /// Floating-point product of the three factors (`None` if any is undefined).
    pub fn product(&self) -> Option<f64> {
        Some(self.p_a.value? * self.middle().value? * self.last().value?)
    }

    /// `n · P[A] · P[mid|A] · P[C|A∩mid]` in exact rational arithmetic.
    ///
    /// Undefined factors only arise when `count(C) = 0`, in which case the
    /// product is taken as 0.
    pub fn chain_rule_count(&self) -> Ratio<u64> {
        match (self.p_a.ratio(), self.middle().ratio(), self.last().ratio()) {
            (Some(a), Some(m), Some(l)) => Ratio::from_integer(self.counts.n) * a * m * l,
            _ => Ratio::from_integer(0),
        }
    }

    pub fn chain_rule_exact(&self) -> bool {
        self.chain_rule_count() == Ratio::from_integer(self.counts.c)
    }

    /// Named columns for logs: rates first, then denominators.
    pub fn columns(&self) -> Vec<(String, Option<f64>)> {
        let mut cols: Vec<(String, Option<f64>)> = vec![
            ("accuracy".into(), self.accuracy.value),
            ("p_a".into(), self.p_a.value),
        ];
        let optional = [
            ("p_b_given_a", self.p_b_given_a),
            ("p_not_b_given_a", self.p_not_b_given_a),
            ("p_c_given_ab", self.p_c_given_ab),
            ("p_r_given_a", self.p_r_given_a),
            ("p_c_given_ar", self.p_c_given_ar),
            ("p_en_given_a", self.p_en_given_a),
            ("p_nr_given_en", self.p_nr_given_en),
        ];
        for (name, rate) in optional {
            if let Some(rate) = rate {
                cols.push((name.into(), rate.value));
            }
        }
        cols.push(("product".into(), self.product()));
        for (name, rate) in optional {
            if let Some(rate) = rate {
                cols.push((format!("den.{name}"), Some(rate.den as f64)));
            }
        }
        cols.push(("den.n".into(), Some(self.counts.n as f64)));
        cols
    }
}

fn single_kind(records: &[EventRecord]) -> Result<TaskKind, MetricsError> {
    let first = records.first().ok_or(MetricsError::Empty)?.task_kind;
    if let Some(other) = records.iter().find(|r| r.task_kind != first) {
        return Err(MetricsError::MixedTasks(first, other.task_kind));
    }
    Ok(first)
}

/// Aggregates records of one task kind.
pub fn factorize(records: &[EventRecord]) -> Result<FactorizedMetrics, MetricsError> {
    let kind = single_kind(records)?;
    let mut counts = EventCounts::default();
    for r in records {
        counts.add(r, 1);
    }
    Ok(FactorizedMetrics::from_counts(kind, counts))
}

/// Per-reward-bin rates for withheld-pair records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBinMetrics {
    pub bin: RewardBin,
    pub counts: EventCounts,
    pub p_c_given_b: Rate,
    pub p_c_given_a: Rate,
    pub p_tr_given_a: Rate,
    pub p_nbr_given_a: Rate,
    pub p_rr_given_a: Rate,
    pub p_c_given_y_in_tr: Rate,
}

impl RewardBinMetrics {
    pub fn from_counts(bin: RewardBin, c: EventCounts) -> Self {
        RewardBinMetrics {
            bin,
            counts: c,
            p_c_given_b: Rate::new(c.c, c.ab),
            p_c_given_a: Rate::new(c.c, c.a),
            p_tr_given_a: Rate::new(c.tr, c.a),
            p_nbr_given_a: Rate::new(c.nbr, c.a),
            p_rr_given_a: Rate::new(c.rr, c.a),
            p_c_given_y_in_tr: Rate::new(c.c_and_y_in_tr, c.y_in_tr),
        }
    }

    pub fn columns(&self) -> Vec<(String, Option<f64>)> {
        let b = self.bin.label();
        vec![
            (format!("r{b}.p_c_given_b"), self.p_c_given_b.value),
            (format!("r{b}.p_c_given_a"), self.p_c_given_a.value),
            (format!("r{b}.p_tr_given_a"), self.p_tr_given_a.value),
            (format!("r{b}.p_nbr_given_a"), self.p_nbr_given_a.value),
            (format!("r{b}.p_rr_given_a"), self.p_rr_given_a.value),
            (format!("r{b}.p_c_given_y_in_tr"), self.p_c_given_y_in_tr.value),
            (format!("r{b}.den.n"), Some(self.counts.n as f64)),
            (format!("r{b}.den.a"), Some(self.counts.a as f64)),
        ]
    }
}

fn binned_weighted<'a>(
    items: impl IntoIterator<Item = (&'a EventRecord, u64)>,
) -> BTreeMap<RewardBin, RewardBinMetrics> {
    let mut counts: BTreeMap<RewardBin, EventCounts> = BTreeMap::new();
    for (r, w) in items {
        counts.entry(r.reward_bin).or_default().add(r, w);
    }
    counts
        .into_iter()
        .map(|(bin, c)| (bin, RewardBinMetrics::from_counts(bin, c)))
        .collect()
}

/// Pools records per reward bin of the query start. Within the ±1 bins this
/// equals averaging over the three stones, since each vertex is queried once
/// per chemistry.
pub fn reward_binned_metrics(records: &[EventRecord]) -> BTreeMap<RewardBin, RewardBinMetrics> {
    binned_weighted(records.iter().map(|r| (r, 1)))
}

/// `(P[EN|A], P[NR|EN])` for decomposition records.
pub fn extended_neighborhood_metrics(records: &[EventRecord]) -> Result<(Rate, Rate), MetricsError> {
    let m = factorize(records)?;
    match (m.p_en_given_a, m.p_nr_given_en) {
        (Some(en), Some(nr)) => Ok((en, nr)),
        _ => Err(MetricsError::MissingOracleContext("extended neighborhood is defined for decomposition only")),
    }
}

/// Reference predictors the curves are read against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChanceKind {
    UniformAll108,
    UniformInSupport,
    UniformReachable,
    UniformCorrectHalf,
}

impl fmt::Display for ChanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChanceKind::UniformAll108 => "uniform_all_108",
            ChanceKind::UniformInSupport => "uniform_in_support",
            ChanceKind::UniformReachable => "uniform_reachable",
            ChanceKind::UniformCorrectHalf => "uniform_correct_half",
        })
    }
}

/// Candidate classes the reference predictor draws from uniformly.
pub fn chance_candidates(kind: ChanceKind, chem: &Chemistry, episode: &Episode) -> Result<Vec<usize>, MetricsError> {
    let task = episode.task_kind;
    let x = chem
        .vertex_of(episode.query_start)
        .ok_or(MetricsError::MissingOracleContext("query start"))?;
    let y = chem
        .vertex_of(episode.target)
        .ok_or(MetricsError::MissingOracleContext("target"))?;
    let classes = |vs: &[Vertex]| vs.iter().map(|&v| chem.stone(v).index()).collect::<Vec<_>>();
    match kind {
        ChanceKind::UniformAll108 => Ok((0..NUM_STONES).collect()),
        ChanceKind::UniformInSupport => Ok(chem.stones.iter().map(|s| s.index()).collect()),
        ChanceKind::UniformReachable => {
            if task != TaskKind::Composition {
                return Err(MetricsError::IncompatibleKind { kind, task });
            }
            Ok(classes(&chem.reachable_set(x, episode.hl_query as usize)?))
        }
        ChanceKind::UniformCorrectHalf => {
            let axis = match task {
                TaskKind::WithheldPair => episode
                    .withheld_axis
                    .ok_or(MetricsError::MissingOracleContext("withheld_axis"))?
                    as usize,
                TaskKind::Decomposition => chem.axis_of(episode.query_potions[0]),
                TaskKind::Composition => return Err(MetricsError::IncompatibleKind { kind, task }),
            };
            Ok(classes(&chem.face_of(y, axis)?))
        }
    }
}

/// Chance-level metrics of a reference predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChanceReport {
    pub kind: ChanceKind,
    pub metrics: FactorizedMetrics,
    pub reward_bins: BTreeMap<RewardBin, RewardBinMetrics>,
}

/// Common multiple of every candidate-set size (3, 4, 8, 108), so that each
/// candidate's weight `LCM / m` is an integer.
const CANDIDATE_LCM: u64 = 216;

/// Exact expectation: every candidate of every episode is classified with
/// weight proportional to `1 / |candidates|`.
pub fn chance_baseline<'a>(
    kind: ChanceKind,
    episodes: impl IntoIterator<Item = (&'a Chemistry, &'a Episode)>,
) -> Result<ChanceReport, MetricsError> {
    let mut weighted = Vec::new();
    let mut task = None;
    for (i, (chem, e)) in episodes.into_iter().enumerate() {
        match task {
            None => task = Some(e.task_kind),
            Some(t) if t != e.task_kind => return Err(MetricsError::MixedTasks(t, e.task_kind)),
            _ => {}
        }
        let candidates = chance_candidates(kind, chem, e)?;
        let m = candidates.len() as u64;
        debug_assert_eq!(CANDIDATE_LCM % m, 0);
        for class in candidates {
            weighted.push((classify(chem, e, i, class)?, CANDIDATE_LCM / m));
        }
    }
    let task = task.ok_or(MetricsError::Empty)?;
    let mut counts = EventCounts::default();
    for (r, w) in &weighted {
        counts.add(r, *w);
    }
    Ok(ChanceReport {
        kind,
        metrics: FactorizedMetrics::from_counts(task, counts),
        reward_bins: binned_weighted(weighted.iter().map(|(r, w)| (r, *w))),
    })
}

/// Monte-Carlo version of [`chance_baseline`]: `samples` draws of a uniform
/// episode and a uniform candidate.
pub fn simulate_chance(
    kind: ChanceKind,
    episodes: &[(&Chemistry, &Episode)],
    samples: usize,
    seed: u64,
) -> Result<ChanceReport, MetricsError> {
    if episodes.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(samples);
    for _ in 0..samples {
        let i = rng.random_range(0..episodes.len());
        let (chem, e) = episodes[i];
        let candidates = chance_candidates(kind, chem, e)?;
        let class = candidates[rng.random_range(0..candidates.len())];
        records.push(classify(chem, e, i, class)?);
    }
    Ok(ChanceReport {
        kind,
        metrics: factorize(&records)?,
        reward_bins: reward_binned_metrics(&records),
    })
}

/// A per-epoch metric curve; `None` marks an undefined rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricCurve {
    pub name: String,
    pub epochs: Vec<usize>,
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageCriteria {
    pub threshold: f64,
    /// Consecutive points that must stay at or above the threshold.
    pub sustain: usize,
}

impl Default for StageCriteria {
    fn default() -> Self {
        StageCriteria {
            threshold: 0.9,
            sustain: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub criteria: StageCriteria,
    /// First sustained crossing epoch per metric, in input order.
    pub crossings: Vec<(String, Option<usize>)>,
    /// Metrics that crossed, ordered by crossing epoch (ties keep input order).
    pub order: Vec<String>,
}

/// First epoch from which the curve stays at or above the threshold for
/// `sustain` consecutive points.
pub fn first_sustained_crossing(curve: &MetricCurve, criteria: StageCriteria) -> Option<usize> {
    let sustain = criteria.sustain.max(1);
    let above: Vec<bool> = curve
        .values
        .iter()
        .map(|v| v.is_some_and(|v| v >= criteria.threshold))
        .collect();
    (0..above.len())
        .find(|&i| i + sustain <= above.len() && above[i..i + sustain].iter().all(|&a| a))
        .map(|i| curve.epochs[i])
}

pub fn stage_report(curves: &[MetricCurve], criteria: StageCriteria) -> StageReport {
    let crossings: Vec<(String, Option<usize>)> = curves
        .iter()
        .map(|c| (c.name.clone(), first_sustained_crossing(c, criteria)))
        .collect();
    let mut crossed: Vec<(usize, usize, String)> = crossings
        .iter()
        .enumerate()
        .filter_map(|(i, (name, e))| e.map(|e| (e, i, name.clone())))
        .collect();
    crossed.sort();
    StageReport {
        criteria,
        crossings,
        order: crossed.into_iter().map(|(_, _, n)| n).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chemistry::generate_chemistry;
    use crate::task::{
        build_composition_episode, build_decomposition_episode, build_withheld_pair_episodes, SupportMode,
    };

    #[test]
    fn exact_prediction_sets_all_flags() {
        let c = generate_chemistry(3).unwrap();
        for e in build_withheld_pair_episodes(&c, 0, 0) {
            let r = classify(&c, &e, 0, e.target_class()).unwrap();
            assert!(r.a && r.c && r.b == Some(true) && r.nbr == Some(true) && r.tr == Some(true));
            assert_eq!(r.rr, Some(false));
        }
        let e = build_decomposition_episode(&c, 0, 3, SupportMode::NoBacktrack, 96, 0).unwrap();
        let r = classify(&c, &e, 0, e.target_class()).unwrap();
        assert!(r.a && r.c && r.b == Some(true) && r.en == Some(true) && r.nr == Some(true));
        let e = build_composition_episode(&c, 0, 4, 0).unwrap();
        let r = classify(&c, &e, 0, e.target_class()).unwrap();
        assert!(r.a && r.c && r.r == Some(true));
    }

    #[test]
    fn outside_support_clears_everything() {
        let c = generate_chemistry(3).unwrap();
        let e = &build_withheld_pair_episodes(&c, 0, 0)[0];
        let outside = (0..108).find(|&i| c.vertex_of_class(i).is_none()).unwrap();
        let r = classify(&c, e, 0, outside).unwrap();
        assert!(!r.a && !r.c);
        assert_eq!((r.b, r.tr, r.nbr, r.rr), (Some(false), Some(false), Some(false), Some(false)));
        assert!(matches!(classify(&c, e, 0, 108), Err(MetricsError::PredictionOutOfRange(108))));
    }

    #[test]
    fn same_half_neighbor_is_rr() {
        let c = generate_chemistry(3).unwrap();
        for e in build_withheld_pair_episodes(&c, 0, 0) {
            let x = c.vertex_of(e.query_start).unwrap();
            let axis = e.withheld_axis.unwrap() as usize;
            for u in c.same_half_adjacent_in_support(x, axis).unwrap() {
                let r = classify(&c, &e, 0, c.stone(u).index()).unwrap();
                assert!(r.a);
                assert_eq!(r.b, Some(false));
                assert_eq!(r.rr, Some(true));
                assert!(!r.c);
            }
        }
    }

    #[test]
    fn missing_axis_is_an_error() {
        let c = generate_chemistry(3).unwrap();
        let mut e = build_withheld_pair_episodes(&c, 0, 0).remove(0);
        e.withheld_axis = None;
        assert_eq!(
            classify(&c, &e, 0, 0),
            Err(MetricsError::MissingOracleContext("withheld_axis"))
        );
    }

    #[test]
    fn wrong_half_neighbor_is_en_not_nr() {
        let c = generate_chemistry(4).unwrap();
        let e = build_decomposition_episode(&c, 0, 2, SupportMode::NoBacktrack, 96, 5).unwrap();
        let x = c.vertex_of(e.query_start).unwrap();
        let axis = c.axis_of(e.query_potions[0]);
        let u = c.neighbors(x).into_iter().find(|&u| u.bit(axis) == x.bit(axis)).unwrap();
        let r = classify(&c, &e, 0, c.stone(u).index()).unwrap();
        assert_eq!((r.en, r.nr), (Some(true), Some(false)));
    }

    #[test]
    fn factorize_arithmetic() {
        let mk = |a: bool, b: bool, c: bool| EventRecord {
            episode: 0,
            task_kind: TaskKind::WithheldPair,
            k: 1,
            reward_bin: RewardBin::Plus1,
            predicted: 0,
            target: 0,
            a,
            b: Some(b),
            c,
            r: None,
            en: None,
            nr: None,
            tr: None,
            nbr: None,
            rr: None,
            y_in_tr: None,
        };
        let mut recs = Vec::new();
        recs.extend((0..125).map(|_| mk(true, true, true)));
        recs.extend((0..375).map(|_| mk(true, true, false)));
        recs.extend((0..500).map(|_| mk(true, false, false)));
        let m = factorize(&recs).unwrap();
        assert_eq!(m.p_a.value, Some(1.0));
        assert_eq!(m.p_b_given_a.unwrap().value, Some(0.5));
        assert_eq!(m.p_c_given_ab.unwrap().value, Some(0.25));
        assert_eq!(m.product(), Some(0.125));
        assert!(m.chain_rule_exact());
        assert_eq!(m.p_not_b_given_a.unwrap().value, Some(0.5));
        assert!(m.p_r_given_a.is_none());
    }

    #[test]
    fn zero_denominators_are_null() {
        let c = generate_chemistry(3).unwrap();
        let e = &build_withheld_pair_episodes(&c, 0, 0)[0];
        let outside = (0..108).find(|&i| c.vertex_of_class(i).is_none()).unwrap();
        let m = factorize(&[classify(&c, e, 0, outside).unwrap()]).unwrap();
        assert_eq!(m.p_a.value, Some(0.0));
        assert_eq!(m.p_b_given_a.unwrap().value, None);
        assert_eq!(m.product(), None);
        assert!(m.chain_rule_exact());
        assert_eq!(factorize(&[]), Err(MetricsError::Empty));
    }

    #[test]
    fn stage_detection() {
        let step = |at: usize, n: usize| MetricCurve {
            name: format!("step{at}"),
            epochs: (0..n).collect(),
            values: (0..n).map(|e| Some(if e >= at { 1.0 } else { 0.1 })).collect(),
        };
        let report = stage_report(&[step(30, 100), step(10, 100), step(60, 100)], StageCriteria::default());
        assert_eq!(
            report.crossings.iter().map(|c| c.1).collect::<Vec<_>>(),
            vec![Some(30), Some(10), Some(60)]
        );
        assert_eq!(report.order, vec!["step10", "step30", "step60"]);

        // Transient spikes above threshold before epoch 120 are ignored.
        let noisy = MetricCurve {
            name: "noisy".into(),
            epochs: (0..200).collect(),
            values: (0..200)
                .map(|e| {
                    let base = e as f64 / 200.0 * 0.9 / 0.6;
                    let v = if e >= 120 { 0.92 + 0.01 * ((e % 3) as f64) } else if e % 17 == 0 && e < 110 { 0.95 } else { base.min(0.85) };
                    Some(v)
                })
                .collect(),
        };
        assert_eq!(first_sustained_crossing(&noisy, StageCriteria::default()), Some(120));
        let flat = MetricCurve {
            name: "flat".into(),
            epochs: (0..50).collect(),
            values: vec![Some(0.5); 50],
        };
        assert_eq!(first_sustained_crossing(&flat, StageCriteria::default()), None);
    }
}
