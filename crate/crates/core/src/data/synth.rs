//! Class-conditional synthetic subjects.
//!
//! Each volume is a soft-edged sphere of dim tissue on a zero background
//! with one bright Gaussian blob at a class-specific location and width;
//! voxels carry multiplicative noise, so empty space stays empty. The
//! clinical fields are drawn from class-dependent ranges (NC scores high on
//! MMSE, AD low). A per-subject latent severity widens the blob and lowers
//! the test scores together, so image and text also agree within a class.
//! Every optional field is dropped independently with probability
//! `missing_rate` using a dedicated random substream.

use serde::{Deserialize, Serialize};

use super::record::{ClinicalFields, Demographics, LabResults, PatientRecord, OPTIONAL_FIELDS};
use super::volume::Volume;
use crate::error::{Error, Result};
use crate::tensor::RngStream;

/// Substream tag for field values of record `i` (combined with `i`).
pub const VALUE_STREAM: u64 = 0x5641_4c55;
/// Substream tag for the missingness draws of record `i`.
pub const MISSING_STREAM: u64 = 0x4d49_5353;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n: usize,
    pub classes: usize,
    pub side: usize,
    pub noise: f64,
    pub missing_rate: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { n: 64, classes: 3, side: 32, noise: 0.1, missing_rate: 0.2 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Severity {
    Normal,
    Mild,
    Dementia,
}

fn severity(label: usize, classes: usize) -> Severity {
    match (classes, label) {
        (2, 0) | (3, 0) => Severity::Normal,
        (3, 1) => Severity::Mild,
        _ => Severity::Dementia,
    }
}

const HEAD_RADIUS: f64 = 0.42;
const HEAD_EDGE: f64 = 1.0;
const TISSUE: f64 = 0.4;

/// Blob centre as a fraction of the side, and blob width.
pub fn blob_profile(label: usize, classes: usize) -> ([f64; 3], f64) {
    match severity(label, classes) {
        Severity::Normal => ([0.28, 0.28, 0.30], 0.09),
        Severity::Mild => ([0.72, 0.30, 0.70], 0.12),
        Severity::Dementia => ([0.50, 0.72, 0.40], 0.15),
    }
}

const NARRATIVE_NORMAL: &[&str] = &[
    "Subject reports no memory complaints.",
    "Daily activities are performed independently.",
    "Cognition appears intact on interview.",
    "Family notes no change in behavior.",
];
const NARRATIVE_MILD: &[&str] = &[
    "Subject reports occasional forgetfulness of recent events.",
    "Mild difficulty with word finding is noted.",
    "Independent in daily activities with some reminders.",
    "Informant describes slow decline in short term memory.",
];
const NARRATIVE_DEMENTIA: &[&str] = &[
    "Marked memory loss affecting daily life.",
    "Subject is frequently disoriented to time and place.",
    "Requires assistance with finances and medications.",
    "Informant reports progressive confusion and repeated questions.",
];
const NARRATIVE_NEUTRAL: &[&str] = &[
    "Hearing and vision are adequate for testing.",
    "Accompanied by a relative at the visit.",
    "No acute medical events since last visit.",
    "Sleep is reported as fair.",
];

/// Point in `[lo, hi]` reached by latent severity `u` (0 best, 1 worst),
/// counting down from `hi`.
fn scale_down(hi: i64, lo: i64, u: f64) -> u32 {
    (hi as f64 - u * (hi - lo) as f64).round() as u32
}

fn draw_fields(rng: &mut RngStream, sev: Severity, u: f64) -> ClinicalFields {
    let age = match sev {
        Severity::Normal => rng.int_in(60, 80),
        Severity::Mild => rng.int_in(64, 85),
        Severity::Dementia => rng.int_in(68, 90),
    } as u32;
    let gender = if rng.bernoulli(0.5) { "female" } else { "male" }.to_string();
    let education = rng.int_in(8, 20) as u32;
    let hand = if rng.bernoulli(0.9) { "right" } else { "left" }.to_string();
    let mmse = match sev {
        Severity::Normal => scale_down(30, 27, u),
        Severity::Mild => scale_down(26, 23, u),
        Severity::Dementia => scale_down(22, 10, u),
    };
    let cdr = match sev {
        Severity::Normal => 0.0,
        Severity::Mild => 0.5,
        Severity::Dementia if u < 0.6 => 1.0,
        Severity::Dementia => 2.0,
    };
    let logical_memory = match sev {
        Severity::Normal => scale_down(20, 9, u),
        Severity::Mild => scale_down(10, 4, u),
        Severity::Dementia => scale_down(6, 0, u),
    };
    let pool = match sev {
        Severity::Normal => NARRATIVE_NORMAL,
        Severity::Mild => NARRATIVE_MILD,
        Severity::Dementia => NARRATIVE_DEMENTIA,
    };
    let picks = rng.choose(pool.len(), 2);
    let neutral = NARRATIVE_NEUTRAL[rng.below(NARRATIVE_NEUTRAL.len())];
    let narrative = format!("{} {} {}", pool[picks[0]], neutral, pool[picks[1]]);
    ClinicalFields {
        demographics: Demographics {
            age: Some(age),
            gender: Some(gender),
            education: Some(education),
            hand: Some(hand),
        },
        lab_results: LabResults { mmse: Some(mmse), cdr: Some(cdr), logical_memory: Some(logical_memory) },
        narrative: Some(narrative),
    }
}

fn drop_missing(fields: &mut ClinicalFields, rng: &mut RngStream, rate: f64) {
    let mut drops = [false; OPTIONAL_FIELDS];
    for d in drops.iter_mut() {
        *d = rng.bernoulli(rate);
    }
    let d = &mut fields.demographics;
    let l = &mut fields.lab_results;
    if drops[0] {
        d.age = None;
    }
    if drops[1] {
        d.gender = None;
    }
    if drops[2] {
        d.education = None;
    }
    if drops[3] {
        d.hand = None;
    }
    if drops[4] {
        l.mmse = None;
    }
    if drops[5] {
        l.cdr = None;
    }
    if drops[6] {
        l.logical_memory = None;
    }
    if drops[7] {
        fields.narrative = None;
    }
}

fn draw_volume(rng: &mut RngStream, label: usize, u: f64, spec: &SynthSpec) -> Result<Volume> {
    let s = spec.side as f64;
    let (centre, width) = blob_profile(label, spec.classes);
    let c: Vec<f64> = centre.iter().map(|&f| (f + rng.uniform_in(-0.04, 0.04)) * s).collect();
    let sigma = width * s * (0.85 + 0.3 * u);
    let noise = spec.noise;
    let mid = 0.5 * (s - 1.0);
    let radius = HEAD_RADIUS * s;
    Volume::from_fn([spec.side; 3], |i, j, k| {
        let d2 = (i as f64 - c[0]).powi(2) + (j as f64 - c[1]).powi(2) + (k as f64 - c[2]).powi(2);
        let r = ((i as f64 - mid).powi(2) + (j as f64 - mid).powi(2) + (k as f64 - mid).powi(2)).sqrt();
        let tissue = TISSUE / (1.0 + ((r - radius) / HEAD_EDGE).exp());
        let g = (-d2 / (2.0 * sigma * sigma)).exp();
        (tissue + g) * (1.0 + noise * rng.normal())
    })
}

/// Deterministic dataset of `spec.n` records with labels `i % classes`.
pub fn generate_synthetic_dataset(spec: &SynthSpec, seed: u64) -> Result<Vec<PatientRecord>> {
    if spec.n == 0 {
        return Err(Error::Config("synthetic dataset needs n > 0".into()));
    }
    if !(2..=3).contains(&spec.classes) {
        return Err(Error::Config(format!("classes must be 2 or 3, got {}", spec.classes)));
    }
    if spec.side == 0 {
        return Err(Error::Config("volume side must be positive".into()));
    }
    if !(0.0..=1.0).contains(&spec.missing_rate) {
        return Err(Error::Config(format!("missing rate {} outside [0, 1]", spec.missing_rate)));
    }
    let root = RngStream::new(seed);
    let values = root.derive(VALUE_STREAM);
    let missing = root.derive(MISSING_STREAM);
    (0..spec.n)
        .map(|i| {
            let label = i % spec.classes;
            let mut rng = values.derive(i as u64);
            let u = rng.uniform();
            let volume = draw_volume(&mut rng, label, u, spec)?;
            let mut fields = draw_fields(&mut rng, severity(label, spec.classes), u);
            drop_missing(&mut fields, &mut missing.derive(i as u64), spec.missing_rate);
            Ok(PatientRecord { volume, fields, label })
        })
        .collect()
}
