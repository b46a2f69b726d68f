//! Stage 1: one encoder per modality, trained alone with the Cox loss, then
//! frozen and used to export fixed-width embeddings.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::cohort::{
    Cohort, ModalityId, ModalitySchema, PatientRecord, RecordSource, NUM_MODALITIES,
};
use crate::config::{derive_seed, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::{Activation, DenseNet, GradientSet, OptimizerState};
use crate::survival::{concordance_index, cox_loss_and_grad, SurvivalBatch};
use crate::train::{holdout, shuffled_batches, EarlyStopper, TrainTrace};

/// Encoder (one SELU layer, raw features -> embedding) plus the scalar hazard
/// head used only while training it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnimodalEncoder {
    pub modality: ModalityId,
    pub encoder: DenseNet,
    pub head: DenseNet,
}

impl UnimodalEncoder {
    pub fn init(
        modality: ModalityId,
        raw_dim: usize,
        embedding_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let encoder = DenseNet::new(
            &[raw_dim, embedding_dim],
            &[Activation::Selu],
            derive_seed(seed, 1),
        )?;
        let head = DenseNet::new(
            &[embedding_dim, 1],
            &[Activation::Identity],
            derive_seed(seed, 2),
        )?;
        Ok(UnimodalEncoder {
            modality,
            encoder,
            head,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.encoder.predict(x)
    }

    /// Stage-1 hazard for one record's features.
    pub fn hazard(&self, x: &[f64]) -> Result<f64> {
        Ok(self.head.predict(&self.embed(x)?)?[0])
    }
}

/// How each modality's features become an embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum EncoderSlot {
    /// No encoder: a record carrying this modality cannot be embedded.
    Missing,
    /// Features already are embeddings.
    Passthrough,
    Trained(UnimodalEncoder),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSet {
    embedding_dim: usize,
    slots: Vec<EncoderSlot>,
}

impl EncoderSet {
    pub fn new(embedding_dim: usize) -> Self {
        EncoderSet {
            embedding_dim,
            slots: vec![EncoderSlot::Missing; NUM_MODALITIES],
        }
    }

    /// For cohorts whose feature blocks are precomputed embeddings.
    pub fn passthrough(embedding_dim: usize) -> Self {
        EncoderSet {
            embedding_dim,
            slots: vec![EncoderSlot::Passthrough; NUM_MODALITIES],
        }
    }

    /// Freshly initialised (untrained) encoders for every modality.
    pub fn random(schema: &ModalitySchema, seed: u64) -> Result<Self> {
        let mut set = EncoderSet::new(schema.embedding_dim());
        for m in ModalityId::ALL {
            let enc = UnimodalEncoder::init(
                m,
                schema.raw_dim(m),
                schema.embedding_dim(),
                derive_seed(seed, 100 + m.index() as u64),
            )?;
            set.insert(enc)?;
        }
        Ok(set)
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    pub fn insert(&mut self, enc: UnimodalEncoder) -> Result<()> {
        if enc.embedding_dim() != self.embedding_dim {
            return Err(Error::Dimension {
                context: "encoder embedding width",
                expected: self.embedding_dim,
                got: enc.embedding_dim(),
            });
        }
        let idx = enc.modality.index();
        self.slots[idx] = EncoderSlot::Trained(enc);
        Ok(())
    }

    pub fn slot(&self, m: ModalityId) -> &EncoderSlot {
        &self.slots[m.index()]
    }

    pub fn encoder(&self, m: ModalityId) -> Option<&UnimodalEncoder> {
        match &self.slots[m.index()] {
            EncoderSlot::Trained(e) => Some(e),
            _ => None,
        }
    }

    pub fn encoder_mut(&mut self, m: ModalityId) -> Option<&mut UnimodalEncoder> {
        match &mut self.slots[m.index()] {
            EncoderSlot::Trained(e) => Some(e),
            _ => None,
        }
    }

    pub fn embed(&self, m: ModalityId, x: &[f64]) -> Result<Vec<f64>> {
        match &self.slots[m.index()] {
            EncoderSlot::Trained(e) => e.embed(x),
            EncoderSlot::Passthrough if x.len() == self.embedding_dim => Ok(x.to_vec()),
            EncoderSlot::Passthrough => Err(Error::Dimension {
                context: "passthrough embedding",
                expected: self.embedding_dim,
                got: x.len(),
            }),
            EncoderSlot::Missing => Err(Error::Config(format!("no encoder for modality {m}"))),
        }
    }

    /// Embeddings of the available modalities of one record.
    pub fn embed_record(&self, r: &PatientRecord) -> Result<[Option<Vec<f64>>; NUM_MODALITIES]> {
        let mut out: [Option<Vec<f64>>; NUM_MODALITIES] = Default::default();
        for m in r.availability().present() {
            let x = r.features(m).expect("available modality has features");
            out[m.index()] = Some(self.embed(m, x)?);
        }
        Ok(out)
    }

    pub fn param_count(&self) -> usize {
        self.slots
            .iter()
            .map(|s| match s {
                EncoderSlot::Trained(e) => e.encoder.param_count(),
                _ => 0,
            })
            .sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, "encoders", self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let set: EncoderSet = checkpoint::load(path, "encoders")?;
        if set.slots.len() != NUM_MODALITIES {
            return Err(Error::Config(
                "encoder checkpoint must have four slots".into(),
            ));
        }
        for (i, s) in set.slots.iter().enumerate() {
            if let EncoderSlot::Trained(e) = s {
                e.encoder.validate()?;
                e.head.validate()?;
                if e.modality.index() != i || e.embedding_dim() != set.embedding_dim {
                    return Err(Error::Config(
                        "encoder checkpoint slots are inconsistent".into(),
                    ));
                }
            }
        }
        Ok(set)
    }
}

/// Per-record embeddings with availability, times and events carried over.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    embedding_dim: usize,
    records: Vec<PatientRecord>,
    ground_truth_risk: Option<Vec<f64>>,
}

impl EmbeddingTable {
    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
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

    /// The table as a cohort whose feature blocks are embeddings.
    pub fn to_cohort(&self) -> Result<Cohort> {
        Cohort::new(
            ModalitySchema::embeddings(self.embedding_dim)?,
            self.records.clone(),
            self.ground_truth_risk.clone(),
        )
    }

    /// Writes the table in the cohort file format, plus its schema sidecar.
    pub fn save(&self, path: &Path, schema_path: &Path) -> Result<()> {
        let cohort = self.to_cohort()?;
        crate::cohort::save_cohort(&cohort, path)?;
        crate::cohort::save_schema(cohort.schema(), schema_path)
    }
}

/// Embeds every available modality of every record; masks, times and events pass through.
pub fn export_embeddings(
    encoders: &EncoderSet,
    records: &[PatientRecord],
) -> Result<EmbeddingTable> {
    let records = records
        .iter()
        .map(|r| {
            let emb = encoders.embed_record(r).map_err(|e| match e {
                Error::Config(msg) => Error::record(&r.id, msg),
                other => other,
            })?;
            Ok(PatientRecord::new(r.id.clone(), r.time, r.event, emb))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EmbeddingTable {
        embedding_dim: encoders.embedding_dim(),
        records,
        ground_truth_risk: None,
    })
}

/// [`export_embeddings`] over a whole cohort, keeping its ground-truth risk.
pub fn export_cohort_embeddings(encoders: &EncoderSet, cohort: &Cohort) -> Result<EmbeddingTable> {
    let mut table = export_embeddings(encoders, cohort.records())?;
    table.ground_truth_risk = cohort.ground_truth_risk().map(<[f64]>::to_vec);
    Ok(table)
}

pub fn train_unimodal<S: RecordSource>(
    source: &S,
    modality: ModalityId,
    config: &TrainConfig,
) -> Result<UnimodalEncoder> {
    train_unimodal_traced(source, modality, config).map(|(e, _)| e)
}

/// Trains one modality's encoder and head on the records where it is available,
/// holding out a validation slice for early stopping.
pub fn train_unimodal_traced<S: RecordSource>(
    source: &S,
    modality: ModalityId,
    config: &TrainConfig,
) -> Result<(UnimodalEncoder, TrainTrace)> {
    config.validate()?;
    let pool: Vec<usize> = (0..source.len())
        .filter(|&i| source.availability(i).get(modality))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 50 + modality.index() as u64));
    let (train_idx, val_idx) = holdout(&pool, config.validation_fraction, &mut rng);
    train_unimodal_split(source, modality, config, &train_idx, &val_idx)
}

/// [`train_unimodal_traced`] with explicit training and validation records.
/// Records lacking the modality are ignored in both lists.
pub fn train_unimodal_split<S: RecordSource>(
    source: &S,
    modality: ModalityId,
    config: &TrainConfig,
    train: &[usize],
    validation: &[usize],
) -> Result<(UnimodalEncoder, TrainTrace)> {
    config.validate()?;
    let has = |i: &&usize| **i < source.len() && source.availability(**i).get(modality);
    let train_idx: Vec<usize> = train.iter().filter(has).copied().collect();
    let val_idx: Vec<usize> = validation.iter().filter(has).copied().collect();
    if train_idx.is_empty() {
        return Err(Error::InvalidCohort(format!(
            "no record has {modality} available"
        )));
    }
    if !train_idx.iter().any(|&i| source.event(i)) {
        return Err(Error::NoEvents(format!(
            "no observed event among records with {modality}"
        )));
    }
    let schema = source.schema();
    let seed = derive_seed(config.seed, modality.index() as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let init = UnimodalEncoder::init(
        modality,
        schema.raw_dim(modality),
        schema.embedding_dim(),
        seed,
    )?;
    let split_at = init.encoder.layers().len();
    let mut net = stack(&init.encoder, &init.head)?;
    let mut opt = OptimizerState::new(config.optimizer, config.learning_rate, &net)?;
    let mut grads = GradientSet::zeros_like(&net);
    let mut trace = TrainTrace::default();
    let mut stopper = EarlyStopper::new(config.patience);

    let features = |i: usize| {
        source
            .features(i, modality)
            .expect("pool only holds records with the modality")
    };

    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        let mut used = 0usize;
        for batch in shuffled_batches(&train_idx, config.batch_size, &mut rng) {
            let events: Vec<bool> = batch.iter().map(|&i| source.event(i)).collect();
            if !events.iter().any(|&e| e) {
                trace.skipped_batches += 1;
                continue;
            }
            let times: Vec<f64> = batch.iter().map(|&i| source.time(i)).collect();
            let mut outputs = Vec::with_capacity(batch.len());
            for &i in &batch {
                outputs.push(net.forward(features(i))?);
            }
            let hazards: Vec<f64> = outputs.iter().map(|(y, _)| y[0]).collect();
            let (loss, d_hazard) =
                cox_loss_and_grad(&SurvivalBatch::new(&hazards, &times, &events)?)?;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "{modality} encoder loss diverged at epoch {}",
                    epoch + 1
                )));
            }
            grads.reset();
            for ((_, tape), g) in outputs.iter().zip(&d_hazard) {
                net.backward_into(tape, &[*g], &mut grads)?;
            }
            opt.step(&mut net, &grads)?;
            loss_sum += loss;
            used += 1;
        }
        trace.epoch_loss.push(if used > 0 {
            loss_sum / used as f64
        } else {
            f64::NAN
        });

        let val = validation_cindex(&val_idx, source, |x| Ok(net.predict(x)?[0]), features)?;
        trace.val_cindex.push(val);
        if stopper.observe(val, epoch, || net.clone()) {
            trace.stopped_early = true;
            break;
        }
    }
    trace.best_epoch = trace.epoch_loss.len().saturating_sub(1);
    if config.patience > 0 {
        if let Some((epoch, best)) = stopper.into_best() {
            net = best;
            trace.best_epoch = epoch;
        }
    }
    let (encoder, head) = unstack(&net, split_at)?;
    Ok((
        UnimodalEncoder {
            modality,
            encoder,
            head,
        },
        trace,
    ))
}

fn validation_cindex<'a, S: RecordSource>(
    idx: &[usize],
    source: &'a S,
    hazard: impl Fn(&[f64]) -> Result<f64>,
    features: impl Fn(usize) -> &'a [f64],
) -> Result<Option<f64>> {
    if idx.is_empty() {
        return Ok(None);
    }
    let risks = idx
        .iter()
        .map(|&i| hazard(features(i)))
        .collect::<Result<Vec<_>>>()?;
    let times: Vec<f64> = idx.iter().map(|&i| source.time(i)).collect();
    let events: Vec<bool> = idx.iter().map(|&i| source.event(i)).collect();
    match concordance_index(&risks, &times, &events) {
        Ok(c) => Ok(Some(c)),
        Err(Error::NoComparablePairs) => Ok(None),
        Err(e) => Err(e),
    }
}

fn stack(a: &DenseNet, b: &DenseNet) -> Result<DenseNet> {
    DenseNet::from_layers(a.layers().iter().chain(b.layers()).cloned().collect())
}

fn unstack(net: &DenseNet, at: usize) -> Result<(DenseNet, DenseNet)> {
    let (a, b) = net.layers().split_at(at);
    Ok((
        DenseNet::from_layers(a.to_vec())?,
        DenseNet::from_layers(b.to_vec())?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{Mask, PatientRecord};

    fn tiny_schema() -> ModalitySchema {
        ModalitySchema::new([3, 2, 4, 1], 5).unwrap()
    }

    fn tiny_cohort() -> Cohort {
        let recs = (0..40)
            .map(|i| {
                let x = i as f64 / 40.0;
                let gen = if i % 3 == 0 {
                    None
                } else {
                    Some(vec![x, -x, 0.5 * x, 1.0])
                };
                PatientRecord::new(
                    format!("r{i}"),
                    100.0 - i as f64,
                    i % 4 != 0,
                    [Some(vec![x, 0.0, 1.0]), None, gen, Some(vec![x])],
                )
            })
            .collect();
        Cohort::new(tiny_schema(), recs, None).unwrap()
    }

    #[test]
    fn no_available_records_is_an_error() {
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::stage1(0)
        };
        let err = train_unimodal(&tiny_cohort(), ModalityId::Pathology, &cfg).unwrap_err();
        assert!(matches!(err, Error::InvalidCohort(_)));
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 8,
            ..TrainConfig::stage1(3)
        };
        let a = train_unimodal(&tiny_cohort(), ModalityId::Genomics, &cfg).unwrap();
        let b = train_unimodal(&tiny_cohort(), ModalityId::Genomics, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.embedding_dim(), 5);
        assert_eq!(a.head.output_dim(), 1);
    }

    #[test]
    fn export_respects_masks() {
        let c = tiny_cohort();
        let enc = EncoderSet::random(c.schema(), 1).unwrap();
        let table = export_cohort_embeddings(&enc, &c).unwrap();
        for (r, e) in c.records().iter().zip(table.records()) {
            assert_eq!(r.availability(), e.availability());
            assert_eq!((r.time, r.event), (e.time, e.event));
            for m in e.availability().present() {
                assert_eq!(e.features(m).unwrap().len(), 5);
            }
        }
        assert_eq!(
            table.records()[0].availability(),
            Mask::from_bits([1, 0, 0, 1])
        );
    }

    #[test]
    fn export_of_empty_slice_is_empty() {
        let enc = EncoderSet::random(&tiny_schema(), 1).unwrap();
        let t = export_embeddings(&enc, &[]).unwrap();
        assert!(t.is_empty());
    }

    #[test]
    fn export_without_encoder_fails() {
        let c = tiny_cohort();
        let mut enc = EncoderSet::new(5);
        enc.insert(UnimodalEncoder::init(ModalityId::Radiology, 3, 5, 0).unwrap())
            .unwrap();
        let err = export_cohort_embeddings(&enc, &c).unwrap_err();
        assert!(err.to_string().contains("demographics"), "{err}");
    }

    #[test]
    fn passthrough_checks_width() {
        let enc = EncoderSet::passthrough(2);
        assert_eq!(
            enc.embed(ModalityId::Genomics, &[1.0, 2.0]).unwrap(),
            vec![1.0, 2.0]
        );
        assert!(enc.embed(ModalityId::Genomics, &[1.0]).is_err());
    }

    #[test]
    fn encoder_checkpoint_round_trip() {
        let enc = EncoderSet::random(&tiny_schema(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("enc.json");
        enc.save(&p).unwrap();
        assert_eq!(EncoderSet::load(&p).unwrap(), enc);
    }
}
