//! Patient records, modality bookkeeping and cohort-level operations.

mod io;
mod synth;

use std::collections::HashSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{
    load_cohort, load_schema, parse_schema, read_cohort, save_cohort, save_schema,
    schema_to_string, write_cohort,
};
pub use synth::{generate_synthetic, MissingMechanism, SynthConfig};

pub const NUM_MODALITIES: usize = 4;
pub const DEFAULT_EMBEDDING_DIM: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityId {
    Radiology,
    Pathology,
    Genomics,
    Demographics,
}

impl ModalityId {
    pub const ALL: [ModalityId; NUM_MODALITIES] = [
        ModalityId::Radiology,
        ModalityId::Pathology,
        ModalityId::Genomics,
        ModalityId::Demographics,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ModalityId::Radiology => "radiology",
            ModalityId::Pathology => "pathology",
            ModalityId::Genomics => "genomics",
            ModalityId::Demographics => "demographics",
        }
    }
}

impl fmt::Display for ModalityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModalityId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "radiology" | "rad" | "mri" => Ok(ModalityId::Radiology),
            "pathology" | "path" => Ok(ModalityId::Pathology),
            "genomics" | "gene" | "genes" | "genomic" => Ok(ModalityId::Genomics),
            "demographics" | "demo" | "demographic" => Ok(ModalityId::Demographics),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}

/// Per-modality availability flags in fixed modality order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Mask([bool; NUM_MODALITIES]);

impl Mask {
    pub const ALL: Mask = Mask([true; NUM_MODALITIES]);
    pub const NONE: Mask = Mask([false; NUM_MODALITIES]);

    pub fn new(flags: [bool; NUM_MODALITIES]) -> Self {
        Mask(flags)
    }

    pub fn from_bits(bits: [u8; NUM_MODALITIES]) -> Self {
        Mask(bits.map(|b| b != 0))
    }

    pub fn of(modalities: &[ModalityId]) -> Self {
        let mut m = Mask::NONE;
        for &v in modalities {
            m.set(v, true);
        }
        m
    }

    pub fn get(&self, m: ModalityId) -> bool {
        self.0[m.index()]
    }

    pub fn set(&mut self, m: ModalityId, on: bool) {
        self.0[m.index()] = on;
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn is_complete(&self) -> bool {
        self.count() == NUM_MODALITIES
    }

    pub fn flags(&self) -> [bool; NUM_MODALITIES] {
        self.0
    }

    pub fn present(&self) -> impl Iterator<Item = ModalityId> + '_ {
        ModalityId::ALL.into_iter().filter(|&m| self.get(m))
    }

    /// Modalities in `self` that are not in `other`.
    pub fn without(&self, other: Mask) -> Mask {
        Mask(std::array::from_fn(|i| self.0[i] && !other.0[i]))
    }

    pub fn is_subset_of(&self, other: Mask) -> bool {
        (0..NUM_MODALITIES).all(|i| !self.0[i] || other.0[i])
    }
}

impl fmt::Display for Mask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b: Vec<&str> = self.0.iter().map(|&x| if x { "1" } else { "0" }).collect();
        write!(f, "({})", b.join(","))
    }
}

/// Raw feature dimension of each modality and the shared embedding width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySchema {
    raw_dims: [usize; NUM_MODALITIES],
    embedding_dim: usize,
}

impl ModalitySchema {
    pub fn new(raw_dims: [usize; NUM_MODALITIES], embedding_dim: usize) -> Result<Self> {
        if raw_dims.contains(&0) || embedding_dim == 0 {
            return Err(Error::Config("schema dimensions must be >= 1".into()));
        }
        Ok(ModalitySchema {
            raw_dims,
            embedding_dim,
        })
    }

    /// Synthetic stand-in: 24-d radiology and pathology, 80 genomic features,
    /// 9 one-hot demographic features, 32-d embeddings.
    pub fn synthetic_default() -> Self {
        ModalitySchema {
            raw_dims: [24, 24, 80, 9],
            embedding_dim: DEFAULT_EMBEDDING_DIM,
        }
    }

    /// Schema for files whose feature blocks are already embeddings.
    pub fn embeddings(dim: usize) -> Result<Self> {
        Self::new([dim; NUM_MODALITIES], dim)
    }

    pub fn raw_dim(&self, m: ModalityId) -> usize {
        self.raw_dims[m.index()]
    }

    pub fn raw_dims(&self) -> [usize; NUM_MODALITIES] {
        self.raw_dims
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub id: String,
    pub time: f64,
    pub event: bool,
    features: [Option<Vec<f64>>; NUM_MODALITIES],
}

impl PatientRecord {
    pub fn new(
        id: impl Into<String>,
        time: f64,
        event: bool,
        features: [Option<Vec<f64>>; NUM_MODALITIES],
    ) -> Self {
        PatientRecord {
            id: id.into(),
            time,
            event,
            features,
        }
    }

    /// Availability is derived from which feature blocks are present.
    pub fn availability(&self) -> Mask {
        Mask(std::array::from_fn(|i| self.features[i].is_some()))
    }

    pub fn features(&self, m: ModalityId) -> Option<&[f64]> {
        self.features[m.index()].as_deref()
    }

    pub fn all_features(&self) -> &[Option<Vec<f64>>; NUM_MODALITIES] {
        &self.features
    }

    pub fn remove(&mut self, m: ModalityId) {
        self.features[m.index()] = None;
    }

    pub fn validate(&self, schema: &ModalitySchema) -> Result<()> {
        if !(self.time.is_finite() && self.time > 0.0) {
            return Err(Error::record(
                &self.id,
                format!("survival time must be positive, got {}", self.time),
            ));
        }
        if self.availability().is_empty() {
            return Err(Error::record(&self.id, "no modality available"));
        }
        for m in ModalityId::ALL {
            if let Some(x) = self.features(m) {
                if x.len() != schema.raw_dim(m) {
                    return Err(Error::record(
                        &self.id,
                        format!(
                            "{m} block has {} features, schema expects {}",
                            x.len(),
                            schema.raw_dim(m)
                        ),
                    ));
                }
                if !x.iter().all(|v| v.is_finite()) {
                    return Err(Error::record(
                        &self.id,
                        format!("{m} block has non-finite values"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Read access to per-record data, so training code can be instrumented.
pub trait RecordSource {
    fn schema(&self) -> &ModalitySchema;
    fn len(&self) -> usize;
    fn availability(&self, i: usize) -> Mask;
    fn time(&self, i: usize) -> f64;
    fn event(&self, i: usize) -> bool;
    fn features(&self, i: usize, m: ModalityId) -> Option<&[f64]>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A validated, non-empty set of records with at least one observed event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    schema: ModalitySchema,
    records: Vec<PatientRecord>,
    ground_truth_risk: Option<Vec<f64>>,
}

impl Cohort {
    pub fn new(
        schema: ModalitySchema,
        records: Vec<PatientRecord>,
        ground_truth_risk: Option<Vec<f64>>,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InvalidCohort("cohort is empty".into()));
        }
        let mut ids = HashSet::with_capacity(records.len());
        for r in &records {
            r.validate(&schema)?;
            if !ids.insert(r.id.as_str()) {
                return Err(Error::record(&r.id, "duplicate id"));
            }
        }
        if !records.iter().any(|r| r.event) {
            return Err(Error::NoEvents("cohort has no observed events".into()));
        }
        if let Some(g) = &ground_truth_risk {
            if g.len() != records.len() {
                return Err(Error::Dimension {
                    context: "ground-truth risk",
                    expected: records.len(),
                    got: g.len(),
                });
            }
        }
        Ok(Cohort {
            schema,
            records,
            ground_truth_risk,
        })
    }

    pub fn schema(&self) -> &ModalitySchema {
        &self.schema
    }

    pub fn records(&self) -> &[PatientRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ground_truth_risk(&self) -> Option<&[f64]> {
        self.ground_truth_risk.as_deref()
    }

    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.time).collect()
    }

    pub fn events(&self) -> Vec<bool> {
        self.records.iter().map(|r| r.event).collect()
    }

    pub fn event_count(&self) -> usize {
        self.records.iter().filter(|r| r.event).count()
    }

    /// Cohort restricted to `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Cohort> {
        let records = indices.iter().map(|&i| self.records[i].clone()).collect();
        let gt = self
            .ground_truth_risk
            .as_ref()
            .map(|g| indices.iter().map(|&i| g[i]).collect());
        Cohort::new(self.schema, records, gt)
    }

    /// Records with all four modalities available.
    pub fn complete_only(&self) -> Result<Cohort> {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| self.records[i].availability().is_complete())
            .collect();
        if idx.is_empty() {
            return Err(Error::InvalidCohort(
                "no record has all four modalities".into(),
            ));
        }
        self.subset(&idx)
    }

    pub fn complete_count(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.availability().is_complete())
            .count()
    }

    /// Per-modality count of records with that modality available.
    pub fn modality_counts(&self) -> [usize; NUM_MODALITIES] {
        let mut counts = [0; NUM_MODALITIES];
        for r in &self.records {
            for m in r.availability().present() {
                counts[m.index()] += 1;
            }
        }
        counts
    }
}

impl RecordSource for Cohort {
    fn schema(&self) -> &ModalitySchema {
        &self.schema
    }

    fn len(&self) -> usize {
        self.records.len()
    }

    fn availability(&self, i: usize) -> Mask {
        self.records[i].availability()
    }

    fn time(&self, i: usize) -> f64 {
        self.records[i].time
    }

    fn event(&self, i: usize) -> bool {
        self.records[i].event
    }

    fn features(&self, i: usize, m: ModalityId) -> Option<&[f64]> {
        self.records[i].features(m)
    }
}

/// Modalities withheld from every test record.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MissingnessScenario {
    name: String,
    drop_set: Mask,
}

impl MissingnessScenario {
    pub fn new(name: impl Into<String>, drop: &[ModalityId]) -> Result<Self> {
        let drop_set = Mask::of(drop);
        if drop_set.is_complete() {
            return Err(Error::Config(
                "a scenario cannot drop all four modalities".into(),
            ));
        }
        Ok(MissingnessScenario {
            name: name.into(),
            drop_set,
        })
    }

    pub fn complete() -> Self {
        Self::new("complete", &[]).unwrap()
    }

    pub fn pathology_missing() -> Self {
        Self::new("pathology-missing", &[ModalityId::Pathology]).unwrap()
    }

    pub fn gene_pathology_missing() -> Self {
        Self::new(
            "gene-pathology-missing",
            &[ModalityId::Genomics, ModalityId::Pathology],
        )
        .unwrap()
    }

    /// The three test conditions reported for the ablation grid.
    pub fn standard() -> Vec<Self> {
        vec![
            Self::complete(),
            Self::pathology_missing(),
            Self::gene_pathology_missing(),
        ]
    }

    /// Accepts a preset name or `drop:<modality>+<modality>...`.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "complete" => Ok(Self::complete()),
            "pathology-missing" => Ok(Self::pathology_missing()),
            "gene-pathology-missing" => Ok(Self::gene_pathology_missing()),
            other => {
                let spec = other.strip_prefix("drop:").ok_or_else(|| {
                    Error::Config(format!(
                        "unknown scenario {other:?} (expected complete, pathology-missing, \
                         gene-pathology-missing or drop:<m>+<m>)"
                    ))
                })?;
                let mods = spec
                    .split('+')
                    .filter(|p| !p.is_empty())
                    .map(str::parse)
                    .collect::<Result<Vec<ModalityId>>>()?;
                Self::new(other, &mods)
            }
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn drop_set(&self) -> Mask {
        self.drop_set
    }
}

/// Result of [`apply_scenario`]: the reduced cohort and how many records were dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioOutcome {
    pub cohort: Cohort,
    pub dropped: usize,
}

/// Removes the scenario's modalities from every record; records left with no
/// modality are dropped and counted.
pub fn apply_scenario(cohort: &Cohort, scenario: &MissingnessScenario) -> Result<ScenarioOutcome> {
    if scenario.drop_set.is_complete() {
        return Err(Error::Config(
            "a scenario cannot drop all four modalities".into(),
        ));
    }
    let mut records = Vec::with_capacity(cohort.len());
    let mut gt = cohort.ground_truth_risk.as_ref().map(|_| Vec::new());
    let mut dropped = 0;
    for (i, r) in cohort.records.iter().enumerate() {
        let mut r = r.clone();
        for m in scenario.drop_set.present() {
            r.remove(m);
        }
        if r.availability().is_empty() {
            dropped += 1;
            continue;
        }
        if let (Some(out), Some(src)) = (gt.as_mut(), cohort.ground_truth_risk.as_ref()) {
            out.push(src[i]);
        }
        records.push(r);
    }
    if dropped > 0 {
        log::info!(
            "scenario {}: dropped {dropped} records left without modalities",
            scenario.name
        );
    }
    Ok(ScenarioOutcome {
        cohort: Cohort::new(cohort.schema, records, gt)?,
        dropped,
    })
}

/// Seeded disjoint train/test partition; both sides keep their original record order.
pub fn split(cohort: &Cohort, train_fraction: f64, seed: u64) -> Result<(Cohort, Cohort)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    let n = cohort.len();
    if n < 2 {
        return Err(Error::InvalidCohort(
            "need at least two records to split".into(),
        ));
    }
    let n_train = ((n as f64 * train_fraction).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train_idx, test_idx) = idx.split_at(n_train);
    let mut train_idx = train_idx.to_vec();
    let mut test_idx = test_idx.to_vec();
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let side = |name: &str, idx: &[usize]| {
        cohort.subset(idx).map_err(|e| match e {
            Error::NoEvents(_) => Error::NoEvents(format!("{name} split has no observed events")),
            other => other,
        })
    };
    Ok((side("train", &train_idx)?, side("test", &test_idx)?))
}
