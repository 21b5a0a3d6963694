//! The discrete prompt vocabulary: a reserved null prompt, one word per
//! shape kind, and every two-word composite "a and b".

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Ring,
    Star,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 5] = [
        ShapeKind::Circle,
        ShapeKind::Square,
        ShapeKind::Triangle,
        ShapeKind::Ring,
        ShapeKind::Star,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
            ShapeKind::Ring => "ring",
            ShapeKind::Star => "star",
        }
    }
}

/// Number of prompt ids: null + 5 shapes + 10 pairs.
pub const VOCAB_SIZE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptId(pub usize);

impl PromptId {
    /// The unconditional prompt.
    pub const NULL: PromptId = PromptId(0);

    pub fn new(id: usize) -> Result<Self> {
        if id >= VOCAB_SIZE {
            return Err(Error::InvalidArgument(format!("prompt id {id} outside [0, {VOCAB_SIZE})")));
        }
        Ok(PromptId(id))
    }

    pub fn is_null(self) -> bool {
        self == Self::NULL
    }

    pub fn shape(kind: ShapeKind) -> Self {
        PromptId(1 + kind.index())
    }

    /// Shape words named by this prompt, sorted. Empty for the null prompt.
    pub fn words(self) -> Vec<ShapeKind> {
        match self.0 {
            0 => vec![],
            i @ 1..=5 => vec![ShapeKind::ALL[i - 1]],
            i if i < VOCAB_SIZE => {
                let (a, b) = pair_at(i - 6);
                vec![ShapeKind::ALL[a], ShapeKind::ALL[b]]
            }
            _ => vec![],
        }
    }

    /// Prompt naming exactly `words` (duplicates collapse); `None` past two words.
    pub fn from_words(words: &[ShapeKind]) -> Option<Self> {
        let mut w: Vec<ShapeKind> = words.to_vec();
        w.sort();
        w.dedup();
        match w.as_slice() {
            [] => Some(Self::NULL),
            [a] => Some(Self::shape(*a)),
            [a, b] => Some(PromptId(6 + pair_index(a.index(), b.index()))),
            _ => None,
        }
    }

    /// The composite "a and b" of two prompts, when the vocabulary has one.
    pub fn union(self, other: PromptId) -> Option<Self> {
        let mut w = self.words();
        w.extend(other.words());
        Self::from_words(&w)
    }

    pub fn text(self) -> String {
        self.words().iter().map(|k| k.word()).collect::<Vec<_>>().join(" and ")
    }
}

impl fmt::Display for PromptId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_null() {
            write!(f, "<null>")
        } else {
            write!(f, "{}", self.text())
        }
    }
}

fn pair_index(a: usize, b: usize) -> usize {
    debug_assert!(a < b && b < 5);
    // pairs enumerated (0,1) (0,2) .. (0,4) (1,2) ..
    (0..a).map(|i| 4 - i).sum::<usize>() + (b - a - 1)
}

fn pair_at(idx: usize) -> (usize, usize) {
    for a in 0..5 {
        for b in a + 1..5 {
            if pair_index(a, b) == idx {
                return (a, b);
            }
        }
    }
    unreachable!("pair index {idx} out of range")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocabulary_is_a_bijection() {
        let mut seen = std::collections::HashSet::new();
        for id in 0..VOCAB_SIZE {
            let p = PromptId(id);
            assert_eq!(PromptId::from_words(&p.words()), Some(p));
            assert!(seen.insert(p.text()));
        }
    }

    #[test]
    fn union_rules() {
        let c = PromptId::shape(ShapeKind::Circle);
        let s = PromptId::shape(ShapeKind::Star);
        let cs = c.union(s).unwrap();
        assert_eq!(cs.text(), "circle and star");
        assert_eq!(c.union(c), Some(c));
        assert_eq!(c.union(PromptId::NULL), Some(c));
        let t = PromptId::shape(ShapeKind::Triangle);
        assert_eq!(cs.union(t), None);
        assert!(PromptId::new(VOCAB_SIZE).is_err());
    }
}
