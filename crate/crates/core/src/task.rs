//! Episode construction for the three task families.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chemistry::{Chemistry, ChemistryError, Potion, Stone, Vertex};
use crate::seed::derive_seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("hop length {k} outside {min}..={max}")]
    InvalidHop { k: usize, min: usize, max: usize },
    #[error("chemistry pool is empty")]
    EmptyPool,
    #[error("split ratio {0} must lie strictly between 0 and 1")]
    InvalidRatio(f64),
    #[error("max_support must be positive")]
    ZeroSupport,
    #[error(transparent)]
    Chemistry(#[from] ChemistryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    WithheldPair,
    Composition,
    Decomposition,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::WithheldPair => "withheld_pair",
            TaskKind::Composition => "composition",
            TaskKind::Decomposition => "decomposition",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "withheld_pair" => Ok(TaskKind::WithheldPair),
            "composition" => Ok(TaskKind::Composition),
            "decomposition" => Ok(TaskKind::Decomposition),
            other => Err(format!("unknown task kind `{other}`")),
        }
    }
}

/// How multi-hop support transitions are enumerated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportMode {
    /// Every applicable length-k sequence from every vertex.
    Exhaustive,
    /// Sequences never apply a potion immediately followed by its complement.
    #[default]
    NoBacktrack,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Transition {
    pub start: Stone,
    pub potions: Vec<Potion>,
    pub end: Stone,
}

impl Transition {
    fn from_path(chem: &Chemistry, start: Vertex, potions: Vec<Potion>) -> Result<Self, ChemistryError> {
        let end = chem.apply_sequence(start, &potions)?;
        Ok(Transition {
            start: chem.stone(start),
            potions,
            end: chem.stone(end),
        })
    }

    /// Re-derives `end` from the chemistry.
    pub fn check(&self, chem: &Chemistry) -> Result<(), String> {
        let start = chem
            .vertex_of(self.start)
            .ok_or_else(|| format!("start stone {} not in chemistry", self.start))?;
        let end = chem
            .apply_sequence(start, &self.potions)
            .map_err(|e| e.to_string())?;
        if chem.stone(end) != self.end {
            return Err(format!(
                "transition from {} ends at {} but the chemistry gives {}",
                self.start,
                self.end,
                chem.stone(end)
            ));
        }
        Ok(())
    }
}

/// One support set plus one query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub chemistry_id: u32,
    pub task_kind: TaskKind,
    /// Varied hop length: 1 for withheld-pair, `hl_query` for composition,
    /// `hl_support` for decomposition.
    pub k: u8,
    pub hl_support: u8,
    pub hl_query: u8,
    pub support: Vec<Transition>,
    pub query_start: Stone,
    pub query_potions: Vec<Potion>,
    pub target: Stone,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub withheld_axis: Option<u8>,
    pub seed: u64,
}

impl Episode {
    pub fn target_class(&self) -> usize {
        self.target.index()
    }

    /// Structural checks against the generating chemistry; returns every problem found.
    pub fn check(&self, chem: &Chemistry) -> Vec<String> {
        let mut problems = Vec::new();
        for (i, t) in self.support.iter().enumerate() {
            if let Err(e) = t.check(chem) {
                problems.push(format!("support[{i}]: {e}"));
            }
            if t.potions.len() != self.hl_support as usize {
                problems.push(format!(
                    "support[{i}]: hop length {} != hl_support {}",
                    t.potions.len(),
                    self.hl_support
                ));
            }
        }
        if self.query_potions.len() != self.hl_query as usize {
            problems.push(format!(
                "query hop length {} != hl_query {}",
                self.query_potions.len(),
                self.hl_query
            ));
        }
        match chem.vertex_of(self.query_start) {
            None => problems.push(format!("query start {} not in chemistry", self.query_start)),
            Some(v) => match chem.apply_sequence(v, &self.query_potions) {
                Ok(end) if chem.stone(end) == self.target => {}
                Ok(end) => problems.push(format!(
                    "target {} but query resolves to {}",
                    self.target,
                    chem.stone(end)
                )),
                Err(e) => problems.push(format!("query: {e}")),
            },
        }
        if self
            .support
            .iter()
            .any(|t| t.start == self.query_start && t.potions == self.query_potions)
        {
            problems.push("query appears in the support set".to_string());
        }
        problems
    }
}

/// All 24 one-hop transitions, ordered by start vertex then axis.
pub fn one_hop_transitions(chem: &Chemistry) -> Vec<Transition> {
    let mut out = Vec::with_capacity(24);
    for v in Vertex::all() {
        for p in chem.applicable_potions(v) {
            out.push(Transition::from_path(chem, v, vec![p]).expect("applicable"));
        }
    }
    out
}

fn extend_paths(
    chem: &Chemistry,
    at: Vertex,
    k: usize,
    mode: SupportMode,
    prefix: &mut Vec<Potion>,
    out: &mut Vec<Vec<Potion>>,
) {
    if prefix.len() == k {
        out.push(prefix.clone());
        return;
    }
    for p in chem.applicable_potions(at) {
        if mode == SupportMode::NoBacktrack && prefix.last() == Some(&p.complement()) {
            continue;
        }
        prefix.push(p);
        extend_paths(chem, at.flip(chem.axis_of(p)), k, mode, prefix, out);
        prefix.pop();
    }
}

/// Applicable length-`k` potion sequences from `start`, in lexicographic axis order.
pub fn potion_paths(chem: &Chemistry, start: Vertex, k: usize, mode: SupportMode) -> Vec<Vec<Potion>> {
    let mut out = Vec::new();
    extend_paths(chem, start, k, mode, &mut Vec::with_capacity(k), &mut out);
    out
}

/// Every length-`k` transition from every vertex.
///
/// Counts are `8 * 3^k` exhaustive and `8 * 3 * 2^(k-1)` without backtracking.
pub fn enumerate_khop_transitions(
    chem: &Chemistry,
    k: usize,
    mode: SupportMode,
) -> Result<Vec<Transition>, TaskError> {
    if k < 2 {
        return Err(TaskError::InvalidHop { k, min: 2, max: usize::MAX });
    }
    let mut out = Vec::new();
    for v in Vertex::all() {
        for path in potion_paths(chem, v, k, mode) {
            out.push(Transition::from_path(chem, v, path)?);
        }
    }
    Ok(out)
}

fn check_hop(k: usize) -> Result<(), TaskError> {
    if (2..=5).contains(&k) {
        Ok(())
    } else {
        Err(TaskError::InvalidHop { k, min: 2, max: 5 })
    }
}

fn shuffled(mut support: Vec<Transition>, rng: &mut ChaCha8Rng) -> Vec<Transition> {
    support.shuffle(rng);
    support
}

/// Withholds one randomly chosen potion pair and asks for its effect.
///
/// Returns 8 episodes: each withheld color is applicable at 4 vertices.
pub fn build_withheld_pair_episodes(chem: &Chemistry, chemistry_id: u32, seed: u64) -> Vec<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pair = rng.random_range(0..3usize);
    let withheld_axis = chem.axis_of_pair[pair];
    let support: Vec<Transition> = one_hop_transitions(chem)
        .into_iter()
        .filter(|t| t.potions[0].pair() != pair)
        .collect();

    let mut episodes = Vec::with_capacity(8);
    for color in Potion::pair_colors(pair) {
        for v in Vertex::all().filter(|&v| chem.is_applicable(v, color)) {
            let episode_seed = derive_seed(seed, &[episodes.len() as u64]);
            let mut shuffle_rng = ChaCha8Rng::seed_from_u64(episode_seed);
            let target = chem.apply_potion(v, color).expect("applicable");
            episodes.push(Episode {
                chemistry_id,
                task_kind: TaskKind::WithheldPair,
                k: 1,
                hl_support: 1,
                hl_query: 1,
                support: shuffled(support.clone(), &mut shuffle_rng),
                query_start: chem.stone(v),
                query_potions: vec![color],
                target: chem.stone(target),
                withheld_axis: Some(withheld_axis),
                seed: episode_seed,
            });
        }
    }
    episodes
}

/// All one-hop support plus a `k`-hop query without immediate backtracking
/// whose end differs from its start.
pub fn build_composition_episode(
    chem: &Chemistry,
    chemistry_id: u32,
    k: usize,
    seed: u64,
) -> Result<Episode, TaskError> {
    check_hop(k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Vertex::new(rng.random_range(0..8u8))?;
    let candidates: Vec<Vec<Potion>> = potion_paths(chem, start, k, SupportMode::NoBacktrack)
        .into_iter()
        .filter(|path| chem.apply_sequence(start, path).map(|e| e != start).unwrap_or(false))
        .collect();
    let query = candidates[rng.random_range(0..candidates.len())].clone();
    let target = chem.apply_sequence(start, &query)?;
    Ok(Episode {
        chemistry_id,
        task_kind: TaskKind::Composition,
        k: k as u8,
        hl_support: 1,
        hl_query: k as u8,
        support: shuffled(one_hop_transitions(chem), &mut rng),
        query_start: chem.stone(start),
        query_potions: query,
        target: chem.stone(target),
        withheld_axis: None,
        seed,
    })
}

/// All `k`-hop support transitions (per `mode`, capped at `max_support` by
/// seeded sampling without replacement) plus a one-hop query.
pub fn build_decomposition_episode(
    chem: &Chemistry,
    chemistry_id: u32,
    k: usize,
    mode: SupportMode,
    max_support: usize,
    seed: u64,
) -> Result<Episode, TaskError> {
    check_hop(k)?;
    if max_support == 0 {
        return Err(TaskError::ZeroSupport);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut support = enumerate_khop_transitions(chem, k, mode)?;
    if support.len() > max_support {
        let mut keep = index::sample(&mut rng, support.len(), max_support).into_vec();
        keep.sort_unstable();
        support = keep.into_iter().map(|i| support[i].clone()).collect();
    }
    let start = Vertex::new(rng.random_range(0..8u8))?;
    let potion = chem.applicable_potions(start)[rng.random_range(0..3usize)];
    let target = chem.apply_potion(start, potion)?;
    Ok(Episode {
        chemistry_id,
        task_kind: TaskKind::Decomposition,
        k: k as u8,
        hl_support: k as u8,
        hl_query: 1,
        support: shuffled(support, &mut rng),
        query_start: chem.stone(start),
        query_potions: vec![potion],
        target: chem.stone(target),
        withheld_axis: None,
        seed,
    })
}

/// Which episodes to draw from each chemistry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Ignored for withheld-pair.
    pub k: usize,
    pub support_mode: SupportMode,
    pub max_support: usize,
    /// Ignored for withheld-pair, which always yields its 8 queries.
    pub episodes_per_chemistry: usize,
}

impl TaskSpec {
    pub fn withheld_pair() -> Self {
        TaskSpec {
            kind: TaskKind::WithheldPair,
            k: 1,
            support_mode: SupportMode::NoBacktrack,
            max_support: 96,
            episodes_per_chemistry: 8,
        }
    }

    pub fn composition(k: usize) -> Self {
        TaskSpec {
            kind: TaskKind::Composition,
            k,
            ..Self::withheld_pair()
        }
    }

    pub fn decomposition(k: usize) -> Self {
        TaskSpec {
            kind: TaskKind::Decomposition,
            k,
            ..Self::withheld_pair()
        }
    }
}

/// Episodes for one chemistry under `spec`; deterministic in `seed`.
pub fn build_episodes(
    chem: &Chemistry,
    chemistry_id: u32,
    spec: &TaskSpec,
    seed: u64,
) -> Result<Vec<Episode>, TaskError> {
    match spec.kind {
        TaskKind::WithheldPair => Ok(build_withheld_pair_episodes(chem, chemistry_id, seed)),
        TaskKind::Composition => (0..spec.episodes_per_chemistry)
            .map(|i| build_composition_episode(chem, chemistry_id, spec.k, derive_seed(seed, &[i as u64])))
            .collect(),
        TaskKind::Decomposition => (0..spec.episodes_per_chemistry)
            .map(|i| {
                build_decomposition_episode(
                    chem,
                    chemistry_id,
                    spec.k,
                    spec.support_mode,
                    spec.max_support,
                    derive_seed(seed, &[i as u64]),
                )
            })
            .collect(),
    }
}

/// Disjoint train/validation chemistry ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_chemistries: Vec<u32>,
    pub val_chemistries: Vec<u32>,
    pub ratio: f64,
    pub seed: u64,
}

/// Shuffles `pool` with `seed` and assigns `round(ratio * n)` ids to training,
/// keeping at least one id on each side when the pool has two or more.
pub fn split_chemistries(pool: &[u32], ratio: f64, seed: u64) -> Result<SplitSpec, TaskError> {
    if pool.is_empty() {
        return Err(TaskError::EmptyPool);
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(TaskError::InvalidRatio(ratio));
    }
    let unique: BTreeSet<u32> = pool.iter().copied().collect();
    let mut ids: Vec<u32> = unique.into_iter().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len();
    let mut n_train = (ratio * n as f64).round() as usize;
    if n >= 2 {
        n_train = n_train.clamp(1, n - 1);
    }
    let val = ids.split_off(n_train);
    Ok(SplitSpec {
        train_chemistries: ids,
        val_chemistries: val,
        ratio,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chemistry::generate_chemistry;

    fn chem() -> Chemistry {
        generate_chemistry(11).unwrap()
    }

    #[test]
    fn withheld_pair_counts_and_halves() {
        let c = chem();
        let eps = build_withheld_pair_episodes(&c, 0, 5);
        assert_eq!(eps.len(), 8);
        let axis = eps[0].withheld_axis.unwrap() as usize;
        for e in &eps {
            assert_eq!(e.support.len(), 16);
            assert!(e.check(&c).is_empty(), "{:?}", e.check(&c));
            let withheld = e.query_potions[0];
            assert!(e
                .support
                .iter()
                .all(|t| t.potions[0].pair() != withheld.pair()));
            let x = c.vertex_of(e.query_start).unwrap();
            let y = c.vertex_of(e.target).unwrap();
            assert_ne!(x.bit(axis), y.bit(axis));
        }
        let queries: BTreeSet<(Stone, Potion)> = eps.iter().map(|e| (e.query_start, e.query_potions[0])).collect();
        assert_eq!(queries.len(), 8);
    }

    #[test]
    fn khop_counts() {
        let c = chem();
        assert_eq!(enumerate_khop_transitions(&c, 2, SupportMode::NoBacktrack).unwrap().len(), 48);
        assert_eq!(enumerate_khop_transitions(&c, 2, SupportMode::Exhaustive).unwrap().len(), 72);
        for k in 2..=5usize {
            let nb = enumerate_khop_transitions(&c, k, SupportMode::NoBacktrack).unwrap();
            let ex = enumerate_khop_transitions(&c, k, SupportMode::Exhaustive).unwrap();
            assert_eq!(nb.len(), 8 * 3 * 2usize.pow(k as u32 - 1));
            assert_eq!(ex.len(), 8 * 3usize.pow(k as u32));
            assert!(nb.iter().chain(&ex).all(|t| t.check(&c).is_ok()));
        }
        assert!(enumerate_khop_transitions(&c, 1, SupportMode::Exhaustive).is_err());
    }

    #[test]
    fn composition_targets_are_reachable() {
        let c = chem();
        for k in 2..=5 {
            for seed in 0..40 {
                let e = build_composition_episode(&c, 3, k, seed).unwrap();
                assert_eq!(e.support.len(), 24);
                assert!(e.check(&c).is_empty());
                let x = c.vertex_of(e.query_start).unwrap();
                let y = c.vertex_of(e.target).unwrap();
                assert!(c.reachable_set(x, k).unwrap().contains(&y));
                if k == 2 {
                    assert_eq!(x.hamming(y), 2);
                }
                for w in e.query_potions.windows(2) {
                    assert_ne!(w[1], w[0].complement());
                }
            }
        }
        assert!(build_composition_episode(&c, 0, 1, 0).is_err());
        assert!(build_composition_episode(&c, 0, 6, 0).is_err());
    }

    #[test]
    fn decomposition_support_and_target_face() {
        let c = chem();
        for k in 2..=5 {
            for seed in 0..20 {
                let e = build_decomposition_episode(&c, 0, k, SupportMode::NoBacktrack, 96, seed).unwrap();
                let full = 8 * 3 * 2usize.pow(k as u32 - 1);
                assert_eq!(e.support.len(), full.min(96));
                assert!(e.check(&c).is_empty());
                let x = c.vertex_of(e.query_start).unwrap();
                let y = c.vertex_of(e.target).unwrap();
                let axis = c.axis_of(e.query_potions[0]);
                assert!(c.face_of(y, axis).unwrap().contains(&y));
                assert!(!c.face_of(x, axis).unwrap().contains(&y));
                let distinct: BTreeSet<_> = e.support.iter().collect();
                assert_eq!(distinct.len(), e.support.len());
            }
        }
        let e = build_decomposition_episode(&c, 0, 2, SupportMode::NoBacktrack, 48, 1).unwrap();
        assert_eq!(e.support.len(), 48);
    }

    #[test]
    fn episodes_are_deterministic() {
        let c = chem();
        for spec in [TaskSpec::withheld_pair(), TaskSpec::composition(3), TaskSpec::decomposition(4)] {
            let a = build_episodes(&c, 1, &spec, 99).unwrap();
            let b = build_episodes(&c, 1, &spec, 99).unwrap();
            assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
            assert_eq!(a.len(), 8);
        }
    }

    #[test]
    fn shuffle_preserves_support_multiset() {
        let c = chem();
        let e = build_composition_episode(&c, 0, 3, 4).unwrap();
        let mut a = e.support.clone();
        let mut b = one_hop_transitions(&c);
        let key = |t: &Transition| (t.start, t.potions.clone());
        a.sort_by_key(key);
        b.sort_by_key(key);
        assert_eq!(a, b);
        assert_ne!(e.support, one_hop_transitions(&c));
    }

    #[test]
    fn splits() {
        let pool: Vec<u32> = (0..1000).collect();
        let s = split_chemistries(&pool, 0.9, 3).unwrap();
        assert_eq!(s.train_chemistries.len(), 900);
        assert_eq!(s.val_chemistries.len(), 100);
        let train: BTreeSet<_> = s.train_chemistries.iter().collect();
        assert!(s.val_chemistries.iter().all(|id| !train.contains(id)));
        assert_eq!(s, split_chemistries(&pool, 0.9, 3).unwrap());
        let two = split_chemistries(&[4, 9], 0.5, 0).unwrap();
        assert_eq!((two.train_chemistries.len(), two.val_chemistries.len()), (1, 1));
        assert_eq!(split_chemistries(&[], 0.9, 0), Err(TaskError::EmptyPool));
        assert!(split_chemistries(&pool, 1.0, 0).is_err());
    }
}
