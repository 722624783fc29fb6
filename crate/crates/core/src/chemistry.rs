//! Stones, potions and the latent cubic chemistry graph.
//!
//! A chemistry places 8 stones on the vertices of a 3-cube. Vertex `v` is a
//! 3-bit integer `(b2, b1, b0)`; potion pairs are bound to cube axes and a
//! potion moves a stone along its axis by writing its direction bit.
//! All structural oracles used by the task sampler and the event metrics live
//! here.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of distinct stones across all chemistries.
pub const NUM_STONES: usize = 108;
/// Vertices of the cube.
pub const NUM_VERTICES: usize = 8;
/// Rejection-sampling cap for [`generate_chemistry`].
pub const MAX_GENERATION_ATTEMPTS: usize = 10_000;

/// Reward values indexed by reward level.
pub const REWARD_VALUES: [i32; 4] = [-3, -1, 1, 15];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ChemistryError {
    #[error("chemistry generation exhausted {attempts} attempts for seed {seed}")]
    GenerationExhausted { seed: u64, attempts: usize },
    #[error("potion {potion} is not applicable at vertex {vertex}")]
    NotApplicable { potion: Potion, vertex: Vertex },
    #[error("potion {potion} at step {step} is not applicable at vertex {vertex}")]
    NotApplicableAt {
        step: usize,
        potion: Potion,
        vertex: Vertex,
    },
    #[error("stone field {field} out of range: {value}")]
    FieldOutOfRange { field: &'static str, value: u8 },
    #[error("class index {0} out of range 0..108")]
    IndexOutOfRange(usize),
    #[error("vertex {0} out of range 0..8")]
    VertexOutOfRange(u8),
    #[error("axis {0} out of range 0..3")]
    AxisOutOfRange(u8),
    #[error("hop count must be at least 1")]
    ZeroHops,
}

/// A stone state: three perceptual levels plus a reward level.
///
/// Serialized as the level tuple `[color, size, roundness, reward_level]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[u8; 4]", into = "[u8; 4]")]
pub struct Stone {
    color: u8,
    size: u8,
    roundness: u8,
    reward_level: u8,
}

impl Stone {
    pub fn new(color: u8, size: u8, roundness: u8, reward_level: u8) -> Result<Self, ChemistryError> {
        for (field, value, limit) in [
            ("color", color, 3),
            ("size", size, 3),
            ("roundness", roundness, 3),
            ("reward_level", reward_level, 4),
        ] {
            if value >= limit {
                return Err(ChemistryError::FieldOutOfRange { field, value });
            }
        }
        Ok(Self {
            color,
            size,
            roundness,
            reward_level,
        })
    }

    pub fn color(&self) -> u8 {
        self.color
    }

    pub fn size(&self) -> u8 {
        self.size
    }

    pub fn roundness(&self) -> u8 {
        self.roundness
    }

    pub fn reward_level(&self) -> u8 {
        self.reward_level
    }

    pub fn reward(&self) -> i32 {
        REWARD_VALUES[self.reward_level as usize]
    }

    pub fn percept(&self) -> [u8; 3] {
        [self.color, self.size, self.roundness]
    }

    /// Class index in `0..108`: `((color*3 + size)*3 + roundness)*4 + reward_level`.
    pub fn index(&self) -> usize {
        ((self.color as usize * 3 + self.size as usize) * 3 + self.roundness as usize) * 4
            + self.reward_level as usize
    }

    pub fn from_index(index: usize) -> Result<Self, ChemistryError> {
        if index >= NUM_STONES {
            return Err(ChemistryError::IndexOutOfRange(index));
        }
        let reward_level = (index % 4) as u8;
        let rest = index / 4;
        Ok(Self {
            color: (rest / 9) as u8,
            size: ((rest / 3) % 3) as u8,
            roundness: (rest % 3) as u8,
            reward_level,
        })
    }

    /// All 108 stones in class-index order.
    pub fn all() -> impl Iterator<Item = Stone> {
        (0..NUM_STONES).map(|i| Stone::from_index(i).expect("index in range"))
    }
}

impl TryFrom<[u8; 4]> for Stone {
    type Error = ChemistryError;

    fn try_from(levels: [u8; 4]) -> Result<Self, Self::Error> {
        Stone::new(levels[0], levels[1], levels[2], levels[3])
    }
}

impl From<Stone> for [u8; 4] {
    fn from(s: Stone) -> Self {
        [s.color, s.size, s.roundness, s.reward_level]
    }
}

const COLOR_NAMES: [&str; 3] = ["pink", "violet", "blue"];
const SIZE_NAMES: [&str; 3] = ["small", "medium", "large"];
const ROUNDNESS_NAMES: [&str; 3] = ["pointy", "medium_round", "round"];

impl fmt::Display for Stone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({}, {}, {}, {:+})",
            COLOR_NAMES[self.color as usize],
            SIZE_NAMES[self.size as usize],
            ROUNDNESS_NAMES[self.roundness as usize],
            self.reward()
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Potion {
    Red,
    Green,
    Yellow,
    Orange,
    Pink,
    Blue,
}

impl Potion {
    pub const ALL: [Potion; 6] = [
        Potion::Red,
        Potion::Green,
        Potion::Yellow,
        Potion::Orange,
        Potion::Pink,
        Potion::Blue,
    ];

    /// Position in [`Potion::ALL`].
    pub fn index(self) -> usize {
        self as usize
    }

    /// Pair index: RED/GREEN = 0, YELLOW/ORANGE = 1, PINK/BLUE = 2.
    pub fn pair(self) -> usize {
        self.index() / 2
    }

    pub fn complement(self) -> Potion {
        Potion::ALL[self.index() ^ 1]
    }

    /// The two colors of pair `pair`, first color first.
    pub fn pair_colors(pair: usize) -> [Potion; 2] {
        [Potion::ALL[2 * pair], Potion::ALL[2 * pair + 1]]
    }

    pub fn name(self) -> &'static str {
        match self {
            Potion::Red => "RED",
            Potion::Green => "GREEN",
            Potion::Yellow => "YELLOW",
            Potion::Orange => "ORANGE",
            Potion::Pink => "PINK",
            Potion::Blue => "BLUE",
        }
    }
}

impl fmt::Display for Potion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A cube vertex; the canonical order is the binary value of `(b2, b1, b0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Vertex(u8);

impl Vertex {
    pub fn new(v: u8) -> Result<Self, ChemistryError> {
        if (v as usize) < NUM_VERTICES {
            Ok(Vertex(v))
        } else {
            Err(ChemistryError::VertexOutOfRange(v))
        }
    }

    pub fn all() -> impl Iterator<Item = Vertex> {
        (0..NUM_VERTICES as u8).map(Vertex)
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn bit(self, axis: usize) -> u8 {
        (self.0 >> axis) & 1
    }

    pub fn flip(self, axis: usize) -> Vertex {
        Vertex(self.0 ^ (1 << axis))
    }

    pub fn hamming(self, other: Vertex) -> u32 {
        (self.0 ^ other.0).count_ones()
    }
}

impl TryFrom<u8> for Vertex {
    type Error = ChemistryError;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        Vertex::new(v)
    }
}

impl From<Vertex> for u8 {
    fn from(v: Vertex) -> u8 {
        v.0
    }
}

impl fmt::Display for Vertex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:03b}", self.0)
    }
}

fn check_axis(axis: usize) -> Result<(), ChemistryError> {
    if axis < 3 {
        Ok(())
    } else {
        Err(ChemistryError::AxisOutOfRange(axis.min(255) as u8))
    }
}

/// A complete cubic chemistry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chemistry {
    /// Cube axis bound to each potion pair.
    pub axis_of_pair: [u8; 3],
    /// Bit written on the potion's axis, indexed in [`Potion::ALL`] order.
    pub direction_of_color: [u8; 6],
    /// Vertex holding the +15 stone.
    pub best_vertex: Vertex,
    /// Perceptual triple of vertex `000`.
    pub base_percept: [u8; 3],
    /// Perceptual delta applied when the axis bit is 1.
    pub axis_delta: [[i8; 3]; 3],
    /// Stone at each vertex in canonical order.
    pub stones: [Stone; 8],
}

/// Axis deltas allowed by the generator: one feature by ±1 or ±2, or two
/// distinct features by ±1 each.
pub fn allowed_axis_deltas() -> Vec<[i8; 3]> {
    let mut out = Vec::with_capacity(24);
    for feature in 0..3 {
        for step in [-2i8, -1, 1, 2] {
            let mut d = [0i8; 3];
            d[feature] = step;
            out.push(d);
        }
    }
    for (f1, f2) in [(0, 1), (0, 2), (1, 2)] {
        for s1 in [-1i8, 1] {
            for s2 in [-1i8, 1] {
                let mut d = [0i8; 3];
                d[f1] = s1;
                d[f2] = s2;
                out.push(d);
            }
        }
    }
    out
}

fn percept_of(base: [u8; 3], deltas: &[[i8; 3]; 3], v: Vertex) -> Option<[u8; 3]> {
    let mut p = [0u8; 3];
    for (feature, slot) in p.iter_mut().enumerate() {
        let mut value = base[feature] as i32;
        for (axis, delta) in deltas.iter().enumerate() {
            value += v.bit(axis) as i32 * delta[feature] as i32;
        }
        if !(0..=2).contains(&value) {
            return None;
        }
        *slot = value as u8;
    }
    Some(p)
}

fn percepts_valid(base: [u8; 3], deltas: &[[i8; 3]; 3]) -> Option<[[u8; 3]; 8]> {
    let mut percepts = [[0u8; 3]; 8];
    for v in Vertex::all() {
        percepts[v.value() as usize] = percept_of(base, deltas, v)?;
    }
    let distinct: BTreeSet<[u8; 3]> = percepts.iter().copied().collect();
    (distinct.len() == NUM_VERTICES).then_some(percepts)
}

/// Builds a chemistry from its latent parameters; stones are derived.
///
/// Returns `None` when the perceptual map leaves `[0, 2]` or is not injective.
pub fn chemistry_from_parts(
    axis_of_pair: [u8; 3],
    first_color_bits: [u8; 3],
    best_vertex: Vertex,
    base_percept: [u8; 3],
    axis_delta: [[i8; 3]; 3],
) -> Option<Chemistry> {
    let percepts = percepts_valid(base_percept, &axis_delta)?;
    let mut direction_of_color = [0u8; 6];
    for pair in 0..3 {
        direction_of_color[2 * pair] = first_color_bits[pair] & 1;
        direction_of_color[2 * pair + 1] = 1 - (first_color_bits[pair] & 1);
    }
    let mut stones = [Stone::default_stone(); 8];
    for v in Vertex::all() {
        let p = percepts[v.value() as usize];
        let level = 3 - v.hamming(best_vertex) as u8;
        stones[v.value() as usize] = Stone::new(p[0], p[1], p[2], level).ok()?;
    }
    Some(Chemistry {
        axis_of_pair,
        direction_of_color,
        best_vertex,
        base_percept,
        axis_delta,
        stones,
    })
}

impl Stone {
    const fn default_stone() -> Stone {
        Stone {
            color: 0,
            size: 0,
            roundness: 0,
            reward_level: 0,
        }
    }
}

/// Samples a chemistry deterministically from `seed`.
///
/// Latent choices (best vertex, axis bijection, direction bits) are drawn once;
/// the perceptual embedding is rejection-sampled until every vertex maps into
/// `[0, 2]^3` and all 8 percepts are distinct.
pub fn generate_chemistry(seed: u64) -> Result<Chemistry, ChemistryError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let best_vertex = Vertex(rng.random_range(0..NUM_VERTICES as u8));
    let mut axis_of_pair = [0u8, 1, 2];
    axis_of_pair.shuffle(&mut rng);
    let first_color_bits = [
        rng.random_range(0..2u8),
        rng.random_range(0..2u8),
        rng.random_range(0..2u8),
    ];
    let deltas = allowed_axis_deltas();
    for _ in 0..MAX_GENERATION_ATTEMPTS {
        let base = [
            rng.random_range(0..3u8),
            rng.random_range(0..3u8),
            rng.random_range(0..3u8),
        ];
        let axis_delta = [
            deltas[rng.random_range(0..deltas.len())],
            deltas[rng.random_range(0..deltas.len())],
            deltas[rng.random_range(0..deltas.len())],
        ];
        if let Some(chem) =
            chemistry_from_parts(axis_of_pair, first_color_bits, best_vertex, base, axis_delta)
        {
            return Ok(chem);
        }
    }
    Err(ChemistryError::GenerationExhausted {
        seed,
        attempts: MAX_GENERATION_ATTEMPTS,
    })
}

impl Chemistry {
    pub fn stone(&self, v: Vertex) -> Stone {
        self.stones[v.value() as usize]
    }

    pub fn vertex_of(&self, stone: Stone) -> Option<Vertex> {
        self.stones
            .iter()
            .position(|s| *s == stone)
            .map(|i| Vertex(i as u8))
    }

    /// Vertex holding the stone with class index `class`, if any.
    pub fn vertex_of_class(&self, class: usize) -> Option<Vertex> {
        self.stones
            .iter()
            .position(|s| s.index() == class)
            .map(|i| Vertex(i as u8))
    }

    pub fn axis_of(&self, p: Potion) -> usize {
        self.axis_of_pair[p.pair()] as usize
    }

    pub fn direction(&self, p: Potion) -> u8 {
        self.direction_of_color[p.index()]
    }

    pub fn is_applicable(&self, v: Vertex, p: Potion) -> bool {
        v.bit(self.axis_of(p)) != self.direction(p)
    }

    pub fn apply_potion(&self, v: Vertex, p: Potion) -> Result<Vertex, ChemistryError> {
        if !self.is_applicable(v, p) {
            return Err(ChemistryError::NotApplicable { potion: p, vertex: v });
        }
        Ok(v.flip(self.axis_of(p)))
    }

    pub fn apply_sequence(&self, v: Vertex, potions: &[Potion]) -> Result<Vertex, ChemistryError> {
        potions.iter().enumerate().try_fold(v, |at, (step, &p)| {
            self.apply_potion(at, p)
                .map_err(|_| ChemistryError::NotApplicableAt { step, potion: p, vertex: at })
        })
    }

    /// The three potions applicable at `v`, ordered by axis.
    pub fn applicable_potions(&self, v: Vertex) -> [Potion; 3] {
        let mut out = [Potion::Red; 3];
        for pair in 0..3 {
            let [first, second] = Potion::pair_colors(pair);
            let chosen = if self.is_applicable(v, first) { first } else { second };
            out[self.axis_of(chosen)] = chosen;
        }
        out
    }

    /// Potion that moves `v` across `axis`.
    pub fn potion_across(&self, v: Vertex, axis: usize) -> Potion {
        self.applicable_potions(v)[axis]
    }

    /// The three Hamming-1 neighbors, ordered by axis.
    pub fn neighbors(&self, v: Vertex) -> [Vertex; 3] {
        [v.flip(0), v.flip(1), v.flip(2)]
    }

    /// Vertices reachable from `v` by exactly `k` applicable hops, excluding `v`.
    pub fn reachable_set(&self, v: Vertex, k: usize) -> Result<Vec<Vertex>, ChemistryError> {
        if k == 0 {
            return Err(ChemistryError::ZeroHops);
        }
        Ok(Vertex::all()
            .filter(|&u| {
                let d = u.hamming(v) as usize;
                u != v && d <= k && d % 2 == k % 2
            })
            .collect())
    }

    /// Faces of `axis`: `(bit = 0, bit = 1)`.
    pub fn half_partition(&self, axis: usize) -> Result<([Vertex; 4], [Vertex; 4]), ChemistryError> {
        check_axis(axis)?;
        let mut a = Vec::with_capacity(4);
        let mut b = Vec::with_capacity(4);
        for v in Vertex::all() {
            if v.bit(axis) == 0 {
                a.push(v);
            } else {
                b.push(v);
            }
        }
        Ok((a.try_into().expect("4"), b.try_into().expect("4")))
    }

    /// The face of `axis` containing `v`.
    pub fn face_of(&self, v: Vertex, axis: usize) -> Result<[Vertex; 4], ChemistryError> {
        let (a, b) = self.half_partition(axis)?;
        Ok(if v.bit(axis) == 0 { a } else { b })
    }

    /// Vertices whose reward level differs from `v`'s by exactly one.
    pub fn reward_adjacent_set(&self, v: Vertex) -> Vec<Vertex> {
        let level = self.stone(v).reward_level as i32;
        Vertex::all()
            .filter(|&u| (self.stone(u).reward_level as i32 - level).abs() == 1)
            .collect()
    }

    /// Neighbors of `v` on `v`'s own face of `withheld_axis`.
    pub fn same_half_adjacent_in_support(
        &self,
        v: Vertex,
        withheld_axis: usize,
    ) -> Result<[Vertex; 2], ChemistryError> {
        check_axis(withheld_axis)?;
        let mut out = Vec::with_capacity(2);
        for axis in 0..3 {
            if axis != withheld_axis {
                out.push(v.flip(axis));
            }
        }
        Ok(out.try_into().expect("2"))
    }

    /// Checks every structural invariant; violations are data.
    pub fn validate(&self) -> ValidationReport {
        validate_chemistry(self)
    }
}

/// One violated invariant.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub invariant: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub passed: bool,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    fn push(&mut self, invariant: &str, description: String) {
        self.violations.push(Violation {
            invariant: invariant.to_string(),
            description,
        });
        self.passed = false;
    }

    pub fn has(&self, invariant: &str) -> bool {
        self.violations.iter().any(|v| v.invariant == invariant)
    }
}

pub fn validate_chemistry(chem: &Chemistry) -> ValidationReport {
    let mut report = ValidationReport {
        passed: true,
        violations: Vec::new(),
    };

    let axes: BTreeSet<u8> = chem.axis_of_pair.iter().copied().collect();
    if axes != BTreeSet::from([0, 1, 2]) {
        report.push(
            "axis-bijection",
            format!("axis_of_pair {:?} is not a permutation of 0..3", chem.axis_of_pair),
        );
        // Every other check indexes axes through this map.
        return report;
    }
    for pair in 0..3 {
        let [a, b] = Potion::pair_colors(pair);
        let (da, db) = (chem.direction(a), chem.direction(b));
        if da > 1 || db > 1 || da == db {
            report.push(
                "complement-direction",
                format!("{a}/{b} write bits {da}/{db}; complements must write opposite bits"),
            );
        }
    }

    for v in Vertex::all() {
        let s = chem.stone(v);
        match percept_of(chem.base_percept, &chem.axis_delta, v) {
            Some(p) if p == s.percept() => {}
            Some(p) => report.push(
                "percept-formula",
                format!("vertex {v}: stone percept {:?} but base + deltas gives {p:?}", s.percept()),
            ),
            None => report.push(
                "percept-bounds",
                format!("vertex {v}: base + deltas leaves [0, 2]"),
            ),
        }
    }

    let percepts: BTreeSet<[u8; 3]> = chem.stones.iter().map(|s| s.percept()).collect();
    if percepts.len() != NUM_VERTICES {
        report.push(
            "distinct-stones",
            format!("only {} distinct perceptual triples among 8 stones", percepts.len()),
        );
    }

    let mut counts = [0usize; 4];
    for s in &chem.stones {
        counts[s.reward_level as usize] += 1;
    }
    if counts != [1, 3, 3, 1] {
        report.push(
            "reward-distribution",
            format!(
                "reward multiset {{-3:{}, -1:{}, +1:{}, +15:{}}} != {{-3:1, -1:3, +1:3, +15:1}}",
                counts[0], counts[1], counts[2], counts[3]
            ),
        );
    }
    for v in Vertex::all() {
        let expected = 3 - v.hamming(chem.best_vertex) as u8;
        if chem.stone(v).reward_level != expected {
            report.push(
                "reward-anchor",
                format!(
                    "vertex {v}: reward level {} but distance to best vertex implies {expected}",
                    chem.stone(v).reward_level
                ),
            );
        }
    }

    for v in Vertex::all() {
        let applicable: Vec<Potion> = Potion::ALL
            .iter()
            .copied()
            .filter(|&p| chem.is_applicable(v, p))
            .collect();
        let axes: BTreeSet<usize> = applicable.iter().map(|&p| chem.axis_of(p)).collect();
        if applicable.len() != 3 || axes.len() != 3 {
            report.push(
                "applicable-count",
                format!("vertex {v}: applicable potions {applicable:?}, expected one per axis"),
            );
        }
        for p in applicable {
            let u = v.flip(chem.axis_of(p));
            if chem.apply_potion(u, p.complement()) != Ok(v) {
                report.push(
                    "complement-inverse",
                    format!("vertex {v}: {p} then {} does not return", p.complement()),
                );
            }
            let step = chem.stone(u).reward_level as i32 - chem.stone(v).reward_level as i32;
            if step.abs() != 1 {
                report.push(
                    "reward-step",
                    format!("vertex {v} --{p}--> {u} changes reward level by {step}"),
                );
            }
        }
    }
    report
}
