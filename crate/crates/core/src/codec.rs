//! Token layout and the 108-way label space.
//!
//! Each support transition is written as
//! `[color size roundness reward] potions... ARROW [color size roundness reward] SEP`
//! and the query as `QUERY [color size roundness reward] potions... ARROW`.
//! Sequences are left-padded with `PAD`, so the last position always holds the
//! query's `ARROW`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chemistry::{ChemistryError, Potion, Stone};
use crate::task::Episode;

pub type TokenId = u8;

pub const VOCAB_SIZE: usize = 23;
pub const NUM_CLASSES: usize = crate::chemistry::NUM_STONES;

const COLOR_BASE: TokenId = 0;
const SIZE_BASE: TokenId = 3;
const ROUNDNESS_BASE: TokenId = 6;
const REWARD_BASE: TokenId = 9;
const POTION_BASE: TokenId = 13;
pub const SEP: TokenId = 19;
pub const ARROW: TokenId = 20;
pub const QUERY: TokenId = 21;
pub const PAD: TokenId = 22;

const TOKEN_NAMES: [&str; VOCAB_SIZE] = [
    "COLOR_PINK",
    "COLOR_VIOLET",
    "COLOR_BLUE",
    "SIZE_SMALL",
    "SIZE_MEDIUM",
    "SIZE_LARGE",
    "ROUND_POINTY",
    "ROUND_MEDIUM",
    "ROUND_ROUND",
    "REWARD_-3",
    "REWARD_-1",
    "REWARD_+1",
    "REWARD_+15",
    "POTION_RED",
    "POTION_GREEN",
    "POTION_YELLOW",
    "POTION_ORANGE",
    "POTION_PINK",
    "POTION_BLUE",
    "SEP",
    "ARROW",
    "QUERY",
    "PAD",
];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("episode needs {needed} tokens but max_seq_len is {max}")]
    EpisodeTooLong { needed: usize, max: usize },
    #[error(transparent)]
    Chemistry(#[from] ChemistryError),
}

/// The fixed token table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    names: Vec<&'static str>,
}

impl Vocabulary {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn name(&self, id: TokenId) -> Option<&'static str> {
        self.names.get(id as usize).copied()
    }

    pub fn id(&self, name: &str) -> Option<TokenId> {
        self.names.iter().position(|n| *n == name).map(|i| i as TokenId)
    }

    pub fn potion_token(p: Potion) -> TokenId {
        POTION_BASE + p.index() as TokenId
    }

    pub fn token_potion(id: TokenId) -> Option<Potion> {
        (POTION_BASE..POTION_BASE + 6)
            .contains(&id)
            .then(|| Potion::ALL[(id - POTION_BASE) as usize])
    }

    /// Token of the complementary potion, for potion tokens only.
    pub fn complement_token(id: TokenId) -> Option<TokenId> {
        Self::token_potion(id).map(|p| Self::potion_token(p.complement()))
    }

    /// `id<TAB>name` lines, one per token.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("id\tname\n");
        for (i, n) in self.names.iter().enumerate() {
            out.push_str(&format!("{i}\t{n}\n"));
        }
        out
    }
}

pub fn vocab_spec() -> Vocabulary {
    Vocabulary {
        names: TOKEN_NAMES.to_vec(),
    }
}

pub fn stone_tokens(s: Stone) -> [TokenId; 4] {
    [
        COLOR_BASE + s.color(),
        SIZE_BASE + s.size(),
        ROUNDNESS_BASE + s.roundness(),
        REWARD_BASE + s.reward_level(),
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedEpisode {
    /// Left-padded to `max_seq_len`.
    pub tokens: Vec<TokenId>,
    pub label: u8,
    /// Number of non-pad tokens.
    pub length: usize,
}

/// Content tokens of an episode, without padding.
pub fn episode_tokens(e: &Episode) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(e.support.len() * (10 + e.hl_support as usize) + 10);
    for t in &e.support {
        out.extend(stone_tokens(t.start));
        out.extend(t.potions.iter().map(|&p| Vocabulary::potion_token(p)));
        out.push(ARROW);
        out.extend(stone_tokens(t.end));
        out.push(SEP);
    }
    out.push(QUERY);
    out.extend(stone_tokens(e.query_start));
    out.extend(e.query_potions.iter().map(|&p| Vocabulary::potion_token(p)));
    out.push(ARROW);
    out
}

pub fn encode_episode(e: &Episode, max_seq_len: usize) -> Result<EncodedEpisode, CodecError> {
    let content = episode_tokens(e);
    if content.len() > max_seq_len {
        return Err(CodecError::EpisodeTooLong {
            needed: content.len(),
            max: max_seq_len,
        });
    }
    let mut tokens = vec![PAD; max_seq_len - content.len()];
    tokens.extend_from_slice(&content);
    Ok(EncodedEpisode {
        tokens,
        label: e.target_class() as u8,
        length: content.len(),
    })
}

pub fn decode_prediction(class: usize) -> Result<Stone, CodecError> {
    Ok(Stone::from_index(class)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chemistry::generate_chemistry;
    use crate::task::{build_composition_episode, build_decomposition_episode, build_withheld_pair_episodes, SupportMode};

    #[test]
    fn vocabulary_table() {
        let v = vocab_spec();
        assert_eq!(v.len(), 23);
        for id in 0..23u8 {
            assert_eq!(v.id(v.name(id).unwrap()), Some(id));
        }
        for p in Potion::ALL {
            let t = Vocabulary::potion_token(p);
            assert_eq!(Vocabulary::token_potion(t), Some(p));
            assert_eq!(Vocabulary::complement_token(t), Some(Vocabulary::potion_token(p.complement())));
        }
        assert_eq!(Vocabulary::complement_token(SEP), None);
        assert_eq!(v.id("PAD"), Some(PAD));
        assert!(v.to_tsv().lines().count() == 24);
    }

    #[test]
    fn layout_lengths() {
        let c = generate_chemistry(2).unwrap();
        let wp = &build_withheld_pair_episodes(&c, 0, 1)[0];
        let enc = encode_episode(wp, 192).unwrap();
        assert_eq!(enc.length, 16 * 11 + 7);
        assert_eq!(enc.length, 183);
        assert_eq!(enc.tokens.len(), 192);
        assert_eq!(*enc.tokens.last().unwrap(), ARROW);
        assert!(enc.tokens[..9].iter().all(|&t| t == PAD));

        let comp = build_composition_episode(&c, 0, 3, 0).unwrap();
        assert_eq!(encode_episode(&comp, 288).unwrap().length, 24 * 11 + 9);

        let dec = build_decomposition_episode(&c, 0, 5, SupportMode::NoBacktrack, 96, 0).unwrap();
        assert_eq!(encode_episode(&dec, 2048).unwrap().length, 96 * 15 + 7);
    }

    #[test]
    fn too_long_is_an_error() {
        let c = generate_chemistry(2).unwrap();
        let wp = &build_withheld_pair_episodes(&c, 0, 1)[0];
        assert_eq!(
            encode_episode(wp, 100),
            Err(CodecError::EpisodeTooLong { needed: 183, max: 100 })
        );
    }

    #[test]
    fn label_is_a_chemistry_stone() {
        let c = generate_chemistry(5).unwrap();
        for e in build_withheld_pair_episodes(&c, 0, 1) {
            let enc = encode_episode(&e, 192).unwrap();
            let stone = decode_prediction(enc.label as usize).unwrap();
            assert!(c.stones.contains(&stone));
            assert_eq!(stone, e.target);
        }
    }

    #[test]
    fn decode_endpoints() {
        assert_eq!(decode_prediction(0).unwrap(), Stone::new(0, 0, 0, 0).unwrap());
        assert_eq!(decode_prediction(107).unwrap(), Stone::new(2, 2, 2, 3).unwrap());
        assert!(decode_prediction(108).is_err());
        for i in 0..108 {
            assert_eq!(decode_prediction(i).unwrap().index(), i);
        }
    }

    #[test]
    fn shuffled_support_permutes_blocks() {
        let c = generate_chemistry(8).unwrap();
        let a = build_composition_episode(&c, 0, 2, 1).unwrap();
        let mut b = a.clone();
        b.support.reverse();
        let ea = encode_episode(&a, 288).unwrap();
        let eb = encode_episode(&b, 288).unwrap();
        assert_eq!(ea.label, eb.label);
        let mut blocks_a: Vec<&[u8]> = ea.tokens[288 - ea.length..].chunks(11).collect();
        let mut blocks_b: Vec<&[u8]> = eb.tokens[288 - eb.length..].chunks(11).collect();
        blocks_a.sort();
        blocks_b.sort();
        assert_eq!(blocks_a, blocks_b);
    }
}
