use std::fmt;

use adaptpoc_core::gmct::CombinationMethod;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    AgmctTippett,
    AgmctFisher,
    AgmctInverseNormal,
    Amct,
}

impl TestKind {
    pub const ALL: [TestKind; 4] = [Self::AgmctTippett, Self::AgmctFisher, Self::AgmctInverseNormal, Self::Amct];

    /// Within-stage combination, for the generalized tests.
    pub fn combination(self) -> Option<CombinationMethod> {
        match self {
            Self::AgmctTippett => Some(CombinationMethod::Tippett),
            Self::AgmctFisher => Some(CombinationMethod::Fisher),
            Self::AgmctInverseNormal => Some(CombinationMethod::InverseNormal),
            Self::Amct => None,
        }
    }

    pub fn from_combination(method: CombinationMethod) -> Self {
        match method {
            CombinationMethod::Tippett => Self::AgmctTippett,
            CombinationMethod::Fisher => Self::AgmctFisher,
            CombinationMethod::InverseNormal => Self::AgmctInverseNormal,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::AgmctTippett => "AGMCT-T",
            Self::AgmctFisher => "AGMCT-F",
            Self::AgmctInverseNormal => "AGMCT-N",
            Self::Amct => "AMCT",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Design {
    Adaptive,
    NonAdaptive,
}

impl Design {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Adaptive => "adaptive",
            Self::NonAdaptive => "non_adaptive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    Known,
    Unknown,
}

impl VarianceMode {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Known => "known",
            Self::Unknown => "unknown",
        }
    }
}

/// One test procedure in one design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub test: TestKind,
    pub design: Design,
    pub variance: VarianceMode,
}

impl MethodSpec {
    pub const fn new(test: TestKind, design: Design, variance: VarianceMode) -> Self {
        Self { test, design, variance }
    }

    /// The comparison set of the published study: every generalized test in
    /// both designs and both variance settings, and the AMCT with σ known.
    pub fn study_set() -> Vec<MethodSpec> {
        let mut out = Vec::new();
        for variance in [VarianceMode::Known, VarianceMode::Unknown] {
            for design in [Design::Adaptive, Design::NonAdaptive] {
                for test in TestKind::ALL {
                    if test != TestKind::Amct || variance == VarianceMode::Known {
                        out.push(MethodSpec::new(test, design, variance));
                    }
                }
            }
        }
        out
    }

    /// Generalized tests only, both designs and variance settings.
    pub fn agmct_set() -> Vec<MethodSpec> {
        Self::study_set().into_iter().filter(|m| m.test != TestKind::Amct).collect()
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.test.label(), self.design.tag(), self.variance.tag())
    }
}
