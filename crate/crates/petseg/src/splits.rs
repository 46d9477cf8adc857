//! Cohort-stratified k-fold splitting.
//!
//! Each cohort is shuffled with a seeded generator and dealt round-robin into
//! k folds, so per-cohort unit counts differ by at most one; fold f of the
//! final split is the union of fold f across cohorts. When patient ids are
//! supplied, all images of a patient are dealt as one unit so no patient can
//! straddle folds.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng;

/// One image with its patient and cohort labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseRecord {
    pub case_id: String,
    /// Grouping key; cases sharing it always land in the same fold.
    pub patient_id: Option<String>,
    pub cohort: String,
}

/// What counts as one deal unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SplitMode {
    /// Group images by patient id when available (no cross-fold leakage).
    #[default]
    PerPatient,
    /// Deal each image independently.
    PerImage,
}

/// Assignment of every case id to a fold index.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldAssignment {
    folds: BTreeMap<String, usize>,
    k: usize,
    warnings: Vec<String>,
}

impl FoldAssignment {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fold_of(&self, case_id: &str) -> Option<usize> {
        self.folds.get(case_id).copied()
    }

    /// (case_id, fold) pairs, sorted by case id.
    pub fn entries(&self) -> impl Iterator<Item = (&str, usize)> {
        self.folds.iter().map(|(id, &f)| (id.as_str(), f))
    }

    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }

    /// Number of cases in each fold.
    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.k];
        for &f in self.folds.values() {
            sizes[f] += 1;
        }
        sizes
    }

    /// Non-fatal conditions hit while splitting (e.g. k exceeding a cohort).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }
}

/// Deal cases into `k` folds, stratified by cohort.
///
/// Cohorts are processed in sorted name order, each with its own substream of
/// `seed`, so the assignment is a pure function of (cases, k, seed, mode).
pub fn stratified_split(
    cases: &[CaseRecord],
    k: usize,
    seed: u64,
    mode: SplitMode,
) -> Result<FoldAssignment> {
    if cases.is_empty() {
        return Err(Error::Contract("cannot split an empty case list".into()));
    }
    if k == 0 {
        return Err(Error::InvalidParameter("fold count must be at least 1".into()));
    }
    {
        let mut seen = std::collections::BTreeSet::new();
        let mut patient_cohort: BTreeMap<&str, &str> = BTreeMap::new();
        for c in cases {
            if !seen.insert(c.case_id.as_str()) {
                return Err(Error::Contract(format!("duplicate case id {}", c.case_id)));
            }
            if let Some(p) = c.patient_id.as_deref().filter(|p| !p.is_empty()) {
                let cohort = patient_cohort.entry(p).or_insert(c.cohort.as_str());
                if *cohort != c.cohort {
                    return Err(Error::Contract(format!(
                        "patient {p} appears in cohorts {cohort} and {}; one cohort per \
                         patient is required",
                        c.cohort
                    )));
                }
            }
        }
    }

    // cohort name -> unit key -> case ids; BTreeMaps for deterministic order
    let mut cohorts: BTreeMap<&str, BTreeMap<String, Vec<&str>>> = BTreeMap::new();
    for c in cases {
        let unit_key = match (mode, &c.patient_id) {
            (SplitMode::PerPatient, Some(p)) if !p.is_empty() => format!("p:{p}"),
            _ => format!("c:{}", c.case_id),
        };
        cohorts
            .entry(c.cohort.as_str())
            .or_default()
            .entry(unit_key)
            .or_default()
            .push(&c.case_id);
    }

    let mut folds: BTreeMap<String, usize> = BTreeMap::new();
    let mut warnings = Vec::new();
    for (cohort_index, (cohort, units)) in cohorts.iter().enumerate() {
        if units.len() < k {
            warnings.push(format!(
                "cohort {cohort} has only {} unit(s) for {k} folds; some folds get none",
                units.len()
            ));
        }
        let mut unit_keys: Vec<&String> = units.keys().collect();
        let mut r = rng::stream(seed, 0x5114 + cohort_index as u64);
        unit_keys.shuffle(&mut r);
        for (i, key) in unit_keys.iter().enumerate() {
            let fold = i % k;
            for case_id in &units[*key] {
                folds.insert((*case_id).to_string(), fold);
            }
        }
    }
    Ok(FoldAssignment { folds, k, warnings })
}
