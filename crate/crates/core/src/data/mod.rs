//! Records to model inputs: volume normalisation and patching, clinical
//! text templating and tokenisation, synthetic datasets and their on-disk
//! format.

mod io;
mod record;
mod synth;
mod text;
mod volume;

pub use io::{
    decode_volume, encode_volume, read_dataset, read_manifest, write_dataset, ManifestEntry, MANIFEST_NAME,
    VOLUME_HEADER_LEN, VOLUME_MAGIC, VOLUME_VERSION,
};
pub use record::{ClinicalFields, Demographics, LabResults, PatientRecord, OPTIONAL_FIELDS};
pub use synth::{blob_profile, generate_synthetic_dataset, SynthSpec, MISSING_STREAM, VALUE_STREAM};
pub use text::{
    textualize_record, tokenize, truncate_narrative, words, TemplateSet, TokenSequence, Vocab, CLS_ID, MASK_ID,
    MAX_NARRATIVE_WORDS, PAD_ID, RESERVED, UNK_ID,
};
pub use volume::{normalize_volume, patchify, resample_trilinear, unpatchify, PatchGrid, Volume};

use crate::error::Result;

/// A record converted to model inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub image: PatchGrid,
    pub text: TokenSequence,
    pub label: usize,
}

/// How records become [`Example`]s.
#[derive(Clone, Debug)]
pub struct Preprocess {
    pub side: usize,
    pub patch_size: usize,
    pub max_len: usize,
    pub templates: TemplateSet,
}

impl Preprocess {
    pub fn text(&self, record: &PatientRecord) -> String {
        textualize_record(&record.fields, &self.templates)
    }

    pub fn example(&self, record: &PatientRecord, vocab: &Vocab) -> Result<Example> {
        let volume = normalize_volume(&record.volume, self.side)?;
        let image = patchify(&volume, self.patch_size)?;
        let text = tokenize(&self.text(record), vocab, self.max_len);
        Ok(Example { image, text, label: record.label })
    }

    pub fn examples(&self, records: &[PatientRecord], vocab: &Vocab) -> Result<Vec<Example>> {
        records.iter().map(|r| self.example(r, vocab)).collect()
    }

    /// Vocabulary over the textualised records.
    pub fn vocab(&self, records: &[PatientRecord], min_freq: usize) -> Vocab {
        let corpus: Vec<String> = records.iter().map(|r| self.text(r)).collect();
        Vocab::build(&corpus, min_freq)
    }
}
