use serde::{Deserialize, Serialize};

use super::volume::Volume;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Demographics {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub age: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender: Option<String>,
    /// Years of education.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub education: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hand: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LabResults {
    /// Mini-Mental State Examination, 0-30.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mmse: Option<u32>,
    /// Clinical Dementia Rating.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cdr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logical_memory: Option<u32>,
}

/// The non-imaging part of a subject, as stored in a dataset manifest.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClinicalFields {
    #[serde(default)]
    pub demographics: Demographics,
    #[serde(default)]
    pub lab_results: LabResults,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub narrative: Option<String>,
}

impl ClinicalFields {
    /// Number of optional fields that are present (narrative included).
    pub fn present_count(&self) -> usize {
        let d = &self.demographics;
        let l = &self.lab_results;
        [
            d.age.is_some(),
            d.gender.is_some(),
            d.education.is_some(),
            d.hand.is_some(),
            l.mmse.is_some(),
            l.cdr.is_some(),
            l.logical_memory.is_some(),
            self.narrative.is_some(),
        ]
        .iter()
        .filter(|&&b| b)
        .count()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(m) = self.lab_results.mmse {
            if m > 30 {
                return Err(Error::Config(format!("MMSE {m} outside [0, 30]")));
            }
        }
        if let Some(c) = self.lab_results.cdr {
            if !(c >= 0.0 && c.is_finite()) {
                return Err(Error::Config(format!("CDR {c} must be a nonnegative rating")));
            }
        }
        Ok(())
    }
}

/// Number of optional clinical fields a record can carry.
pub const OPTIONAL_FIELDS: usize = 8;

/// One subject: a volume, optional clinical fields and a class label.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientRecord {
    pub volume: Volume,
    pub fields: ClinicalFields,
    pub label: usize,
}
