use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Per-record data-quality markers. Degradation is carried by flags, never
/// by dropping a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Flag {
    /// pH clamped into 0..14.
    #[serde(rename = "PH_RANGE")]
    PhRange,
    #[serde(rename = "PH_STUCK")]
    PhStuck,
    #[serde(rename = "PH_DROP")]
    PhDrop,
    /// No usable node frame this cycle.
    #[serde(rename = "NODE_MISSING")]
    NodeMissing,
    #[serde(rename = "DO_DROP")]
    DoDrop,
    #[serde(rename = "DO_DOMAIN")]
    DoDomain,
    #[serde(rename = "DO_RANGE")]
    DoRange,
    #[serde(rename = "TDS_RANGE")]
    TdsRange,
    #[serde(rename = "TEMP_RANGE")]
    TempRange,
    #[serde(rename = "LEVEL_RANGE")]
    LevelRange,
    /// A burst sample sat on the converter rail.
    #[serde(rename = "ADC_RAIL")]
    AdcRail,
}

impl Flag {
    pub const ALL: [Flag; 11] = [
        Flag::PhRange,
        Flag::PhStuck,
        Flag::PhDrop,
        Flag::NodeMissing,
        Flag::DoDrop,
        Flag::DoDomain,
        Flag::DoRange,
        Flag::TdsRange,
        Flag::TempRange,
        Flag::LevelRange,
        Flag::AdcRail,
    ];

    pub fn code(self) -> &'static str {
        match self {
            Flag::PhRange => "PH_RANGE",
            Flag::PhStuck => "PH_STUCK",
            Flag::PhDrop => "PH_DROP",
            Flag::NodeMissing => "NODE_MISSING",
            Flag::DoDrop => "DO_DROP",
            Flag::DoDomain => "DO_DOMAIN",
            Flag::DoRange => "DO_RANGE",
            Flag::TdsRange => "TDS_RANGE",
            Flag::TempRange => "TEMP_RANGE",
            Flag::LevelRange => "LEVEL_RANGE",
            Flag::AdcRail => "ADC_RAIL",
        }
    }

    /// Flags that mean a probe itself misbehaved.
    pub fn is_sensor_fault(self) -> bool {
        matches!(self, Flag::PhStuck | Flag::PhDrop | Flag::DoDrop)
    }
}

impl fmt::Display for Flag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Flag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Flag::ALL
            .into_iter()
            .find(|f| f.code() == s)
            .ok_or_else(|| format!("unknown flag {s:?}"))
    }
}

pub type FlagSet = BTreeSet<Flag>;

/// `A|B|C` in canonical order.
pub fn join_codes(flags: &FlagSet) -> String {
    flags.iter().map(|f| f.code()).collect::<Vec<_>>().join("|")
}
