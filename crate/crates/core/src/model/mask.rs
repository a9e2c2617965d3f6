use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Group;

/// Named fine-tuning setups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Setup {
    #[serde(rename = "ALL")]
    All,
    #[serde(rename = "E_CONV")]
    EConv,
    #[serde(rename = "E")]
    E,
    #[serde(rename = "E_MHA")]
    EMha,
    #[serde(rename = "MHA")]
    Mha,
    #[serde(rename = "D")]
    D,
}

impl Setup {
    pub const ALL_SETUPS: [Setup; 6] = [Setup::All, Setup::EConv, Setup::E, Setup::EMha, Setup::Mha, Setup::D];

    pub fn name(self) -> &'static str {
        match self {
            Setup::All => "ALL",
            Setup::EConv => "E_CONV",
            Setup::E => "E",
            Setup::EMha => "E_MHA",
            Setup::Mha => "MHA",
            Setup::D => "D",
        }
    }

    pub fn groups(self) -> Vec<Group> {
        use Group::*;
        match self {
            Setup::All => Group::ALL.to_vec(),
            Setup::EConv => vec![ConvBackbone],
            Setup::E => vec![ConvBackbone, EncoderMha, EncoderRest],
            Setup::EMha => vec![EncoderMha],
            Setup::Mha => vec![EncoderMha, DecoderMha],
            Setup::D => vec![DecoderMha, DecoderRest, EmbedAndHead],
        }
    }

    pub fn mask(self) -> ComponentMask {
        ComponentMask { groups: self.groups().into_iter().collect() }
    }
}

impl fmt::Display for Setup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Setup {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Setup::ALL_SETUPS
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown setup {s:?}")))
    }
}

/// Set of parameter groups that are updated during fine-tuning.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ComponentMask {
    pub groups: BTreeSet<Group>,
}

impl ComponentMask {
    pub fn new(groups: impl IntoIterator<Item = Group>) -> Result<Self> {
        let groups: BTreeSet<Group> = groups.into_iter().collect();
        if groups.is_empty() {
            return Err(Error::EmptyMask);
        }
        Ok(ComponentMask { groups })
    }

    pub fn contains(&self, g: Group) -> bool {
        self.groups.contains(&g)
    }

    /// The named setup with exactly these groups, if any.
    pub fn setup(&self) -> Option<Setup> {
        Setup::ALL_SETUPS.into_iter().find(|s| &s.mask() == self)
    }

    /// Whether any encoder-side group (backbone or transformer encoder) trains.
    pub fn touches_encoder(&self) -> bool {
        [Group::ConvBackbone, Group::EncoderMha, Group::EncoderRest].iter().any(|g| self.contains(*g))
    }

    pub fn label(&self) -> String {
        match self.setup() {
            Some(s) => s.name().to_string(),
            None => self.groups.iter().map(|g| g.name()).collect::<Vec<_>>().join("+"),
        }
    }
}

impl From<Setup> for ComponentMask {
    fn from(s: Setup) -> Self {
        s.mask()
    }
}
