use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::Error;

/// Downstream emotion categories, ordered as in the usual four-class setup.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EmotionClass {
    Happy,
    Anger,
    Sadness,
    Neutral,
}

impl EmotionClass {
    pub const ALL: [EmotionClass; 4] = [
        EmotionClass::Happy,
        EmotionClass::Anger,
        EmotionClass::Sadness,
        EmotionClass::Neutral,
    ];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            EmotionClass::Happy => "happy",
            EmotionClass::Anger => "anger",
            EmotionClass::Sadness => "sadness",
            EmotionClass::Neutral => "neutral",
        }
    }
}

impl fmt::Display for EmotionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmotionClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown emotion class `{s}`")))
    }
}
