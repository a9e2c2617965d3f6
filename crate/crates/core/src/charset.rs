//! Output vocabulary: special tokens, native characters and reserved
//! historic-variant characters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
const N_SPECIAL: u32 = 3;

/// A variant glyph and the native character it is a historic form of.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantPair {
    pub variant: char,
    pub native: char,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharsetSpec {
    pub native: Vec<char>,
    pub variants: Vec<VariantPair>,
}

impl Default for CharsetSpec {
    fn default() -> Self {
        let mut native: Vec<char> = ('a'..='z').collect();
        native.extend([' ', '.', ',']);
        CharsetSpec {
            native,
            variants: vec![
                VariantPair { variant: 'ſ', native: 's' },
                VariantPair { variant: 'ꝛ', native: 'r' },
                VariantPair { variant: 'ꝺ', native: 'd' },
                VariantPair { variant: 'ů', native: 'u' },
            ],
        }
    }
}

impl CharsetSpec {
    pub fn validate(&self) -> Result<()> {
        for p in &self.variants {
            if self.native.contains(&p.variant) {
                return Err(Error::InvalidConfig(format!("variant {:?} is also native", p.variant)));
            }
            if !self.native.contains(&p.native) {
                return Err(Error::InvalidConfig(format!("variant {:?} maps to non-native {:?}", p.variant, p.native)));
            }
        }
        let mut all: Vec<char> = self.chars().collect();
        all.sort_unstable();
        all.dedup();
        if all.len() != self.native.len() + self.variants.len() {
            return Err(Error::InvalidConfig("duplicate characters in charset".into()));
        }
        Ok(())
    }

    pub fn variant_chars(&self) -> impl Iterator<Item = char> + '_ {
        self.variants.iter().map(|p| p.variant)
    }

    /// Native characters followed by variants, in token order.
    pub fn chars(&self) -> impl Iterator<Item = char> + '_ {
        self.native.iter().copied().chain(self.variant_chars())
    }

    pub fn vocab_size(&self) -> usize {
        N_SPECIAL as usize + self.native.len() + self.variants.len()
    }

    pub fn is_variant(&self, ch: char) -> bool {
        self.variants.iter().any(|p| p.variant == ch)
    }

    pub fn contains(&self, ch: char) -> bool {
        self.chars().any(|c| c == ch)
    }

    pub fn variant_for(&self, native: char) -> Option<char> {
        self.variants.iter().find(|p| p.native == native).map(|p| p.variant)
    }

    pub fn token(&self, ch: char) -> Result<u32> {
        self.chars()
            .position(|c| c == ch)
            .map(|i| i as u32 + N_SPECIAL)
            .ok_or(Error::UnknownCodepoint { ch })
    }

    pub fn char_of(&self, token: u32) -> Option<char> {
        if token < N_SPECIAL {
            return None;
        }
        self.chars().nth((token - N_SPECIAL) as usize)
    }

    /// Token ids for `text` (no BOS/EOS).
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.chars().map(|c| self.token(c)).collect()
    }

    /// Characters of `tokens`, skipping special tokens.
    pub fn decode(&self, tokens: &[u32]) -> String {
        tokens.iter().filter_map(|&t| self.char_of(t)).collect()
    }

    /// Every codepoint in `text` that is outside the charset, deduplicated.
    pub fn unknown_chars(&self, text: &str) -> Vec<char> {
        let mut bad: Vec<char> = text.chars().filter(|&c| !self.contains(c)).collect();
        bad.sort_unstable();
        bad.dedup();
        bad
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_charset_is_disjoint_and_round_trips() {
        let cs = CharsetSpec::default();
        cs.validate().unwrap();
        let ids = cs.encode("ſtraße").unwrap_err();
        assert!(matches!(ids, Error::UnknownCodepoint { ch: 'ß' }));
        let ids = cs.encode("ſtꝛůd, a.").unwrap();
        assert_eq!(cs.decode(&ids), "ſtꝛůd, a.");
        assert_eq!(cs.vocab_size(), 3 + 29 + 4);
    }

    #[test]
    fn unknown_chars_are_listed_once() {
        let cs = CharsetSpec::default();
        assert_eq!(cs.unknown_chars("aXbXß"), vec!['X', 'ß']);
    }
}
