//! Modalities and modality combinations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    Audio,
    Text,
    Vision,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Audio, Modality::Text, Modality::Vision];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn letter(self) -> char {
        match self {
            Modality::Audio => 'a',
            Modality::Text => 't',
            Modality::Vision => 'v',
        }
    }

    fn bit(self) -> u8 {
        1 << self.index()
    }
}

/// A nonempty subset of {audio, text, vision}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct ModalityCombination(u8);

impl ModalityCombination {
    pub const COUNT: usize = 7;

    /// All combinations in reporting order:
    /// `{a}, {t}, {v}, {a,v}, {a,t}, {t,v}, {a,t,v}`.
    pub const ALL: [ModalityCombination; 7] = [
        ModalityCombination(0b001),
        ModalityCombination(0b010),
        ModalityCombination(0b100),
        ModalityCombination(0b101),
        ModalityCombination(0b011),
        ModalityCombination(0b110),
        ModalityCombination(0b111),
    ];

    pub const FULL: ModalityCombination = ModalityCombination(0b111);

    pub fn from_bits(bits: u8) -> Result<Self> {
        if bits == 0 || bits > 0b111 {
            return Err(Error::contract(format!(
                "invalid modality combination bits {bits:#05b}"
            )));
        }
        Ok(Self(bits))
    }

    pub fn from_modalities(ms: &[Modality]) -> Result<Self> {
        Self::from_bits(ms.iter().fold(0, |acc, m| acc | m.bit()))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & m.bit() != 0
    }

    /// Present modalities in a, t, v order.
    pub fn modalities(self) -> impl Iterator<Item = Modality> {
        Modality::ALL.into_iter().filter(move |&m| self.contains(m))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Position in [`ModalityCombination::ALL`].
    pub fn index(self) -> usize {
        Self::ALL
            .iter()
            .position(|&c| c == self)
            .expect("valid combination")
    }

    pub fn is_full(self) -> bool {
        self == Self::FULL
    }

    /// Compact form such as `at` or `atv`.
    pub fn code(self) -> String {
        self.modalities().map(Modality::letter).collect()
    }
}

impl TryFrom<u8> for ModalityCombination {
    type Error = Error;
    fn try_from(bits: u8) -> Result<Self> {
        Self::from_bits(bits)
    }
}

impl From<ModalityCombination> for u8 {
    fn from(c: ModalityCombination) -> u8 {
        c.0
    }
}

impl fmt::Display for ModalityCombination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let letters: Vec<String> = self.modalities().map(|m| m.letter().to_string()).collect();
        write!(f, "{{{}}}", letters.join(","))
    }
}

impl FromStr for ModalityCombination {
    type Err = Error;

    /// Parses `a`, `tv`, `atv`, or the braced form `{a,t}`; letter order is free.
    fn from_str(s: &str) -> Result<Self> {
        let mut bits = 0u8;
        for ch in s.chars().filter(|c| !matches!(c, '{' | '}' | ',' | ' ')) {
            let m = match ch {
                'a' => Modality::Audio,
                't' | 'l' => Modality::Text,
                'v' => Modality::Vision,
                _ => {
                    return Err(Error::config(
                        "combo",
                        format!("unknown modality letter `{ch}` in `{s}`"),
                    ))
                }
            };
            bits |= m.bit();
        }
        Self::from_bits(bits).map_err(|_| Error::config("combo", format!("empty combination `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seven_distinct_nonempty_combinations() {
        let mut bits: Vec<u8> = ModalityCombination::ALL.iter().map(|c| c.bits()).collect();
        bits.sort_unstable();
        assert_eq!(bits, (1..=7).collect::<Vec<u8>>());
        assert!(ModalityCombination::from_bits(0).is_err());
        assert!(ModalityCombination::from_bits(8).is_err());
    }

    #[test]
    fn reporting_order_and_display() {
        let names: Vec<String> = ModalityCombination::ALL.iter().map(|c| c.to_string()).collect();
        assert_eq!(
            names,
            ["{a}", "{t}", "{v}", "{a,v}", "{a,t}", "{t,v}", "{a,t,v}"]
        );
        for (i, c) in ModalityCombination::ALL.iter().enumerate() {
            assert_eq!(c.index(), i);
        }
    }

    #[test]
    fn parse_codes() {
        assert_eq!("atv".parse::<ModalityCombination>().unwrap(), ModalityCombination::FULL);
        assert_eq!("{t, a}".parse::<ModalityCombination>().unwrap().code(), "at");
        assert!("x".parse::<ModalityCombination>().is_err());
        assert!("".parse::<ModalityCombination>().is_err());
    }
}
