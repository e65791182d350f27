//! Class label sets shared across the pipeline.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Breast cancer molecular subtype. The declared order (LumA, LumB, HER2,
/// Basal) fixes feature column order, tie-breaking and report layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Subtype {
    LumA,
    LumB,
    Her2,
    Basal,
}

impl Subtype {
    pub const ALL: [Subtype; 4] = [Subtype::LumA, Subtype::LumB, Subtype::Her2, Subtype::Basal];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Subtype> {
        Subtype::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Subtype::LumA => "LumA",
            Subtype::LumB => "LumB",
            Subtype::Her2 => "HER2",
            Subtype::Basal => "Basal",
        }
    }
}

impl fmt::Display for Subtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Subtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "LumA" => Ok(Subtype::LumA),
            "LumB" => Ok(Subtype::LumB),
            "HER2" => Ok(Subtype::Her2),
            "Basal" | "BL" => Ok(Subtype::Basal),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }
}

/// Label of a slide in a manifest; which variant is legal depends on the task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SlideLabel {
    Subtype(Subtype),
    Tumor,
    NonTumor,
}

impl SlideLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            SlideLabel::Subtype(s) => s.as_str(),
            SlideLabel::Tumor => "tumor",
            SlideLabel::NonTumor => "non-tumor",
        }
    }

    pub fn task(self) -> Task {
        match self {
            SlideLabel::Subtype(_) => Task::Subtyping,
            SlideLabel::Tumor | SlideLabel::NonTumor => Task::TumorDetection,
        }
    }

    pub fn subtype(self) -> Option<Subtype> {
        match self {
            SlideLabel::Subtype(s) => Some(s),
            _ => None,
        }
    }
}

impl fmt::Display for SlideLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SlideLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tumor" | "tumor-annotated" => Ok(SlideLabel::Tumor),
            "non-tumor" | "non-tumor-annotated" => Ok(SlideLabel::NonTumor),
            other => other.parse().map(SlideLabel::Subtype),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    TumorDetection,
    Subtyping,
}

/// Identity of a tile scorer: the tumor/non-tumor model or one of the
/// four one-vs-rest subtype models.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ClassifierId {
    Tumor,
    Subtype(Subtype),
}

impl ClassifierId {
    pub const SUBTYPES: [ClassifierId; 4] = [
        ClassifierId::Subtype(Subtype::LumA),
        ClassifierId::Subtype(Subtype::LumB),
        ClassifierId::Subtype(Subtype::Her2),
        ClassifierId::Subtype(Subtype::Basal),
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierId::Tumor => "tumor",
            ClassifierId::Subtype(s) => s.as_str(),
        }
    }

    pub fn subtype(self) -> Option<Subtype> {
        match self {
            ClassifierId::Tumor => None,
            ClassifierId::Subtype(s) => Some(s),
        }
    }
}

impl fmt::Display for ClassifierId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassifierId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tumor" => Ok(ClassifierId::Tumor),
            other => other.parse().map(ClassifierId::Subtype),
        }
    }
}
