//! Seeded synthetic corpora with planted immunotherapy-treatment signal.
//!
//! Every record carries one cancer term and one treatment term plus filler.
//! A fixed number of signal slots per record draw from the record's own class
//! pool with probability `separation` and from an even mix of both pools
//! otherwise, so `separation = 1` gives disjoint signal vocabularies and
//! `separation = 0` identical class distributions. The positive pool holds
//! only immunotherapy keywords and the negative pool none.

use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{write_corpus, Label, StudyRecord};
use crate::error::{Error, Result};

const POSITIVE_POOL: &[&str] = &[
    "pd-1", "pd-l1", "ctla-4", "checkpoint", "nivolumab", "pembrolizumab", "ipilimumab", "immunotherapy",
];
const NEGATIVE_POOL: &[&str] = &[
    "chemotherapy", "cisplatin", "radiation", "knockout", "crispr", "xenograft", "organoid", "methylation",
];
const CANCER_TERMS: &[&str] = &["melanoma", "carcinoma", "glioblastoma", "lymphoma", "nsclc", "tumor", "cancer"];
const TREATMENT_TERMS: &[&str] = &["therapy", "treatment", "dose", "administration", "regimen", "treated"];
const FILLER: &[&str] = &[
    "cells", "gene", "expression", "profiling", "samples", "patients", "analysis", "rna-seq", "sequencing",
    "transcriptome", "mice", "human", "cohort", "biopsy", "tissue", "blood", "single-cell", "bulk", "we",
    "performed", "identified", "signature", "pathway", "genes", "differential", "clinical", "study",
    "data", "were", "collected", "from", "and", "the", "of", "in", "with", "using", "to", "by", "for",
    "baseline", "time", "points", "matched", "control", "group", "primary", "lines", "culture",
    "microarray", "platform", "illumina", "affymetrix", "library", "reads", "aligned", "genome",
    "reference", "quality", "filtered", "clusters", "markers", "stromal", "immune", "infiltration",
    "macrophages", "lymphocytes", "fibroblasts", "endothelial", "epithelial", "proliferation",
    "apoptosis", "signaling", "receptor", "ligand", "protein", "levels", "measured", "compared",
    "between", "conditions", "replicates", "biological", "technical", "validated", "independent",
    "series", "overall", "design", "total", "healthy", "donors", "serum", "plasma", "mutation",
    "variant", "copy", "number", "chromatin", "accessibility", "atac-seq", "chip-seq", "enhancer",
];
/// Field layouts, one character per token: `S` signal slot, `F` filler,
/// `C` cancer term, `T` treatment term. Fixed layouts keep every slot at the
/// same position across records.
const LAYOUTS: [&str; 3] = ["SFCFS", "FSFSFSTSFSFSFSFS", "SFFS"];
/// Per-class records in the fixed train and prototype splits.
pub const TRAIN_PER_CLASS: usize = 20;
pub const PROTOTYPE_PER_CLASS: usize = 10;
/// Smallest per-class count leaving at least one validation and one test record.
pub const MIN_PER_CLASS: usize = TRAIN_PER_CLASS + PROTOTYPE_PER_CLASS + 2;
// Remaining records split validation:test in these ratios (20:71 and 200:765).
const POS_VAL_TEST: (usize, usize) = (20, 71);
const NEG_VAL_TEST: (usize, usize) = (200, 765);

/// Generates one record's fields for `label`.
pub struct RecordGenerator {
    separation: f64,
}

impl RecordGenerator {
    pub fn new(separation: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&separation) {
            return Err(Error::Config(format!("separation must lie in [0, 1], got {separation}")));
        }
        Ok(RecordGenerator { separation })
    }

    fn signal<R: Rng>(&self, label: Label, rng: &mut R) -> &'static str {
        let own = if rng.random::<f64>() < self.separation {
            label
        } else if rng.random::<bool>() {
            Label::Positive
        } else {
            Label::Negative
        };
        let pool = if own.is_positive() { POSITIVE_POOL } else { NEGATIVE_POOL };
        pool.choose(rng).expect("non-empty pool")
    }

    fn field<R: Rng>(&self, label: Label, layout: &str, cancer: &'static str, treatment: &'static str, rng: &mut R) -> String {
        let words: Vec<&str> = layout
            .chars()
            .map(|slot| match slot {
                'S' => self.signal(label, rng),
                'C' => cancer,
                'T' => treatment,
                _ => FILLER.choose(rng).expect("non-empty filler"),
            })
            .collect();
        words.join(" ")
    }

    pub fn record<R: Rng>(&self, id: String, label: Label, rng: &mut R) -> StudyRecord {
        let cancer = *CANCER_TERMS.choose(rng).expect("non-empty");
        let treatment = *TREATMENT_TERMS.choose(rng).expect("non-empty");
        let [title, summary, design] = LAYOUTS.map(|layout| self.field(label, layout, cancer, treatment, rng));
        StudyRecord::new(id, title, summary, design)
    }
}

/// The four labeled splits of a synthetic corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub train: Vec<StudyRecord>,
    pub prototype: Vec<StudyRecord>,
    pub validation: Vec<StudyRecord>,
    pub test: Vec<StudyRecord>,
}

pub const SPLIT_FILES: [&str; 4] = ["train.jsonl", "prototype.jsonl", "validation.jsonl", "test.jsonl"];

impl SynthCorpus {
    pub fn splits(&self) -> [&[StudyRecord]; 4] {
        [&self.train, &self.prototype, &self.validation, &self.test]
    }

    /// Writes the splits into `dir` under [`SPLIT_FILES`].
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, split) in SPLIT_FILES.iter().zip(self.splits()) {
            write_corpus(dir.join(name), split)?;
        }
        Ok(())
    }
}

fn split_remaining(n: usize, (val, test): (usize, usize)) -> usize {
    // Validation share rounded to nearest, leaving at least one for each side.
    let v = ((n * val) as f64 / (val + test) as f64).round() as usize;
    v.clamp(1, n - 1)
}

/// Labeled corpus with `n_pos` positives and `n_neg` negatives split into
/// train (20+20), prototype (10+10) and validation/test from the rest.
pub fn synth_corpus(seed: u64, n_pos: usize, n_neg: usize, separation: f64) -> Result<SynthCorpus> {
    let generator = RecordGenerator::new(separation)?;
    for (class, n) in [("positive", n_pos), ("negative", n_neg)] {
        if n < MIN_PER_CLASS {
            return Err(Error::Config(format!(
                "{class} count {n} is below the minimum of {MIN_PER_CLASS} per class"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next_id = 0usize;
    let mut make = |label: Label, n: usize, rng: &mut ChaCha8Rng| -> Vec<StudyRecord> {
        (0..n)
            .map(|_| {
                next_id += 1;
                generator.record(format!("SYN{next_id:06}"), label, rng).with_label(label)
            })
            .collect()
    };
    let pos = make(Label::Positive, n_pos, &mut rng);
    let neg = make(Label::Negative, n_neg, &mut rng);

    let mut out = SynthCorpus {
        train: Vec::new(),
        prototype: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (records, ratio) in [(pos, POS_VAL_TEST), (neg, NEG_VAL_TEST)] {
        let mut it = records.into_iter();
        out.train.extend(it.by_ref().take(TRAIN_PER_CLASS));
        out.prototype.extend(it.by_ref().take(PROTOTYPE_PER_CLASS));
        let rest: Vec<StudyRecord> = it.collect();
        let n_val = split_remaining(rest.len(), ratio);
        let mut rest = rest.into_iter();
        out.validation.extend(rest.by_ref().take(n_val));
        out.test.extend(rest);
    }
    for split in [&mut out.train, &mut out.prototype, &mut out.validation, &mut out.test] {
        split.shuffle(&mut rng);
    }
    Ok(out)
}

/// Unlabeled corpus of `n` records with `round(n·rate)` planted positives.
/// Returns the records (without labels) and their hidden labels.
pub fn synth_unlabeled(seed: u64, n: usize, positive_rate: f64, separation: f64) -> Result<(Vec<StudyRecord>, Vec<Label>)> {
    if !(0.0..=1.0).contains(&positive_rate) {
        return Err(Error::Config(format!("positive rate must lie in [0, 1], got {positive_rate}")));
    }
    if n == 0 {
        return Err(Error::Config("unlabeled corpus size must be positive".into()));
    }
    let generator = RecordGenerator::new(separation)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_pos = (n as f64 * positive_rate).round() as usize;
    let mut truth = vec![Label::Negative; n];
    for i in rand::seq::index::sample(&mut rng, n, n_pos) {
        truth[i] = Label::Positive;
    }
    let records = truth
        .iter()
        .enumerate()
        .map(|(i, &label)| generator.record(format!("UNL{:06}", i + 1), label, &mut rng))
        .collect();
    Ok((records, truth))
}
