//! Interaction-history token encoding.
//!
//! Vocabulary of 208 ids: 0..8 special, 8..108 locations, 108..208 objects.
//! A window of `k` past steps becomes
//! `[PAD.., BOS, (obj a_h, loc a_r, loc a_c) x n, obj pick]`, left-padded to
//! the fixed length `3k + 2`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::env::EnvironmentSpec;
use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 208;
pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const SEP_STEP: usize = 2;
pub const SEP_FIELDS: usize = 3;
pub const LOCATION_BASE: usize = 8;
pub const OBJECT_BASE: usize = 108;
pub const DEFAULT_HISTORY: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Token {
    Special(usize),
    Location(usize),
    Object(usize),
}

impl Token {
    pub fn id(self) -> usize {
        match self {
            Token::Special(s) => s,
            Token::Location(l) => LOCATION_BASE + l,
            Token::Object(o) => OBJECT_BASE + o,
        }
    }

    pub fn decode(id: usize) -> Result<Token> {
        match id {
            0..=7 => Ok(Token::Special(id)),
            8..=107 => Ok(Token::Location(id - LOCATION_BASE)),
            108..=207 => Ok(Token::Object(id - OBJECT_BASE)),
            _ => Err(Error::TokenOutOfRange(id)),
        }
    }
}

pub fn location_token(spec: &EnvironmentSpec, l: usize) -> Result<usize> {
    if l >= spec.num_locations {
        return Err(Error::UnknownLocation(l));
    }
    Ok(LOCATION_BASE + l)
}

pub fn object_token(spec: &EnvironmentSpec, o: usize) -> Result<usize> {
    if o >= spec.num_objects {
        return Err(Error::UnknownObject(o));
    }
    Ok(OBJECT_BASE + o)
}

pub const fn sequence_len(k: usize) -> usize {
    3 * k + 2
}

/// Vocabulary constants as stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabInfo {
    pub size: usize,
    pub pad: usize,
    pub bos: usize,
    pub sep_step: usize,
    pub sep_fields: usize,
    pub location_base: usize,
    pub object_base: usize,
}

impl Default for VocabInfo {
    fn default() -> Self {
        VocabInfo {
            size: VOCAB_SIZE,
            pad: PAD,
            bos: BOS,
            sep_step: SEP_STEP,
            sep_fields: SEP_FIELDS,
            location_base: LOCATION_BASE,
            object_base: OBJECT_BASE,
        }
    }
}

/// Up to `k` past `(a_h, a_r, a_c)` triples, oldest first, plus the pick to act on.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HistoryWindow {
    pub k: usize,
    pub entries: Vec<[usize; 3]>,
    pub current_pick: usize,
}

/// Rolling per-preference history that keeps the last `k` steps.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct History {
    k: usize,
    steps: VecDeque<[usize; 3]>,
}

impl History {
    pub fn new(k: usize) -> Self {
        History {
            k,
            steps: VecDeque::with_capacity(k + 1),
        }
    }

    pub fn push(&mut self, step: [usize; 3]) {
        if self.k == 0 {
            return;
        }
        if self.steps.len() == self.k {
            self.steps.pop_front();
        }
        self.steps.push_back(step);
    }

    pub fn clear(&mut self) {
        self.steps.clear();
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn window(&self, current_pick: usize) -> HistoryWindow {
        HistoryWindow {
            k: self.k,
            entries: self.steps.iter().copied().collect(),
            current_pick,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    pub attention_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Index of the first non-PAD position.
    pub fn active_start(&self) -> usize {
        self.attention_mask
            .iter()
            .position(|&m| m)
            .unwrap_or(self.tokens.len())
    }

    pub fn active(&self) -> &[usize] {
        &self.tokens[self.active_start()..]
    }

    /// Parses a fixed-length sequence back into its window.
    pub fn decode(tokens: &[usize], spec: &EnvironmentSpec) -> Result<HistoryWindow> {
        let bad = |msg: &str| Error::MalformedEpisode(format!("token sequence: {msg}"));
        if tokens.len() < 2 || !(tokens.len() - 2).is_multiple_of(3) {
            return Err(bad("length must be 3k + 2"));
        }
        let k = (tokens.len() - 2) / 3;
        let start = tokens
            .iter()
            .position(|&t| t != PAD)
            .ok_or_else(|| bad("all padding"))?;
        let body = &tokens[start..];
        if body[0] != BOS {
            return Err(bad("missing BOS"));
        }
        if body.len() < 2 || !(body.len() - 2).is_multiple_of(3) {
            return Err(bad("partial step"));
        }
        let object = |id: usize| match Token::decode(id)? {
            Token::Object(o) if o < spec.num_objects => Ok(o),
            _ => Err(bad("expected object token")),
        };
        let location = |id: usize| match Token::decode(id)? {
            Token::Location(l) if l < spec.num_locations => Ok(l),
            _ => Err(bad("expected location token")),
        };
        let mut entries = Vec::with_capacity((body.len() - 2) / 3);
        for triple in body[1..body.len() - 1].chunks_exact(3) {
            entries.push([
                object(triple[0])?,
                location(triple[1])?,
                location(triple[2])?,
            ]);
        }
        let current_pick = object(body[body.len() - 1])?;
        Ok(HistoryWindow {
            k,
            entries,
            current_pick,
        })
    }
}

pub fn encode_history(window: &HistoryWindow, spec: &EnvironmentSpec) -> Result<TokenSequence> {
    if window.entries.len() > window.k {
        return Err(Error::DimensionMismatch(format!(
            "window holds {} steps but k = {}",
            window.entries.len(),
            window.k
        )));
    }
    let len = sequence_len(window.k);
    let used = 3 * window.entries.len() + 2;
    let mut tokens = vec![PAD; len];
    let mut at = len - used;
    tokens[at] = BOS;
    at += 1;
    for &[a_h, a_r, a_c] in &window.entries {
        tokens[at] = object_token(spec, a_h)?;
        tokens[at + 1] = location_token(spec, a_r)?;
        tokens[at + 2] = location_token(spec, a_c)?;
        at += 3;
    }
    tokens[at] = object_token(spec, window.current_pick)?;
    let attention_mask = tokens.iter().map(|&t| t != PAD).collect();
    Ok(TokenSequence {
        tokens,
        attention_mask,
    })
}
