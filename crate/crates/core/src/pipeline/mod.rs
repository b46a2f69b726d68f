//! Training and evaluation workflows: two-stage and end-to-end training,
//! bootstrap evaluation under missingness scenarios, and the ablation grid.

mod grid;

use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::cohort::{
    apply_scenario, Cohort, Mask, MissingnessScenario, ModalityId, PatientRecord, NUM_MODALITIES,
};
use crate::config::{derive_seed, TrainConfig};
use crate::error::{Error, Result};
use crate::fusion::{
    batch_loss_and_grad, modality_dropout, DropoutPolicy, FusionConfig, FusionGrads, FusionModel,
    FusionOptimizer, FusionSample, FusionStrategy, ModalityVectors,
};
use crate::nn::{GradientSet, OptimizerState, Tape};
use crate::survival::concordance_index;
use crate::train::{holdout, shuffled_batches, EarlyStopper, TrainTrace};
use crate::unimodal::{
    export_cohort_embeddings, train_unimodal_split, EmbeddingTable, EncoderSet, EncoderSlot,
};

pub use grid::{ablation_cells, run_ablation_grid, AblationReport, GridOptions, ReportRow};

/// Which records a training stage sees: `C` keeps only records with all four
/// modalities, `C+M` keeps everything.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "C")]
    Complete,
    #[serde(rename = "C+M")]
    All,
}

impl Regime {
    pub fn label(self) -> &'static str {
        match self {
            Regime::Complete => "C",
            Regime::All => "C+M",
        }
    }

    pub fn admits(self, availability: Mask) -> bool {
        match self {
            Regime::Complete => availability.is_complete(),
            Regime::All => true,
        }
    }

    /// The cohort restricted to this regime.
    pub fn select(self, cohort: &Cohort) -> Result<Cohort> {
        match self {
            Regime::All => Ok(cohort.clone()),
            Regime::Complete => {
                if cohort.complete_count() == 0 {
                    return Err(Error::InvalidCohort(
                        "regime C needs records with all four modalities, found none".into(),
                    ));
                }
                cohort.complete_only()
            }
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "c" | "complete" => Ok(Regime::Complete),
            "c+m" | "cm" | "all" => Ok(Regime::All),
            other => Err(Error::Config(format!(
                "unknown data regime {other:?} (use C or C+M)"
            ))),
        }
    }
}

/// One row of the ablation table: how stage 1 and stage 2 are trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExperimentCell {
    pub strategy: FusionStrategy,
    pub stage1: Regime,
    pub stage2: Regime,
    pub dropout: bool,
    pub reconstruction: bool,
}

impl ExperimentCell {
    pub fn new(
        strategy: FusionStrategy,
        stage1: Regime,
        stage2: Regime,
        dropout: bool,
        reconstruction: bool,
    ) -> Self {
        ExperimentCell {
            strategy,
            stage1,
            stage2,
            dropout,
            reconstruction,
        }
    }

    /// The full method: mean vector, all data in both stages, dropout and reconstruction.
    pub fn mmd() -> Self {
        ExperimentCell::new(
            FusionStrategy::MeanVector,
            Regime::All,
            Regime::All,
            true,
            true,
        )
    }
}

impl fmt::Display for ExperimentCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {}/{}{}{}",
            self.strategy,
            self.stage1,
            self.stage2,
            if self.dropout { " +dropout" } else { "" },
            if self.reconstruction { " +recon" } else { "" }
        )
    }
}

/// Everything besides the data that a training run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub stage1: TrainConfig,
    pub fusion: TrainConfig,
    pub dropout_rate: f64,
    pub lambda: f64,
    /// Test-set resamples for the c-index spread; 0 disables.
    pub bootstrap: usize,
    pub bootstrap_seed: u64,
}

impl PipelineConfig {
    pub fn new(seed: u64) -> Self {
        PipelineConfig {
            stage1: TrainConfig::stage1(derive_seed(seed, 1)),
            fusion: TrainConfig::fusion(derive_seed(seed, 2)),
            dropout_rate: 0.5,
            lambda: 1.0,
            bootstrap: 1000,
            bootstrap_seed: derive_seed(seed, 3),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.fusion.validate()?;
        DropoutPolicy::new(self.dropout_rate, true)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }

    pub fn fusion_config(&self, cell: &ExperimentCell, embedding_dim: usize) -> FusionConfig {
        FusionConfig::new(cell.strategy)
            .with_embedding_dim(embedding_dim)
            .with_reconstruction(cell.reconstruction)
            .with_lambda(self.lambda)
    }

    fn dropout(&self, cell: &ExperimentCell) -> DropoutPolicy {
        DropoutPolicy {
            rate: self.dropout_rate,
            enabled: cell.dropout,
        }
    }
}

/// Anything that assigns a risk score to a patient record.
pub trait RiskModel {
    fn risk(&self, record: &PatientRecord) -> Result<f64>;
}

/// Encoders plus fusion network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultimodalModel {
    pub encoders: EncoderSet,
    pub fusion: FusionModel,
}

impl MultimodalModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, "multimodal", self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: MultimodalModel = checkpoint::load(path, "multimodal")?;
        m.fusion.validate()?;
        if m.encoders.embedding_dim() != m.fusion.embedding_dim() {
            return Err(Error::Config(
                "encoder and fusion embedding widths differ".into(),
            ));
        }
        Ok(m)
    }
}

impl RiskModel for MultimodalModel {
    fn risk(&self, record: &PatientRecord) -> Result<f64> {
        let emb = self
            .encoders
            .embed_record(record)
            .map_err(|e| Error::record(&record.id, e.to_string()))?;
        self.fusion.risk(&emb, record.availability())
    }
}

/// A fusion model over records whose features already are embeddings.
impl RiskModel for FusionModel {
    fn risk(&self, record: &PatientRecord) -> Result<f64> {
        FusionModel::risk(self, record.all_features(), record.availability())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TwoStageTrace {
    /// One trace per modality, in modality order.
    pub stage1: Vec<TrainTrace>,
    pub fusion: TrainTrace,
}

/// Marks the records held out for validation by both training stages.
/// Nothing is held out when `fraction * n` is under five records.
pub fn validation_split(n: usize, fraction: f64, seed: u64) -> Vec<bool> {
    let all: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, val) = holdout(&all, fraction, &mut rng);
    let mut mask = vec![false; n];
    for i in val {
        mask[i] = true;
    }
    mask
}

/// The validation split [`train_two_stage`] shares between its stages.
pub fn shared_validation(n: usize, config: &PipelineConfig) -> Vec<bool> {
    validation_split(
        n,
        config.stage1.validation_fraction,
        derive_seed(config.stage1.seed, 0x5eed),
    )
}

/// Trains one encoder per modality on the records `regime` admits.
pub fn train_stage1(
    train: &Cohort,
    regime: Regime,
    config: &TrainConfig,
) -> Result<(EncoderSet, Vec<TrainTrace>)> {
    let mask = validation_split(
        train.len(),
        config.validation_fraction,
        derive_seed(config.seed, 0x5eed),
    );
    train_stage1_split(train, regime, config, &mask)
}

/// [`train_stage1`] with validation records given by `validation`.
pub fn train_stage1_split(
    train: &Cohort,
    regime: Regime,
    config: &TrainConfig,
    validation: &[bool],
) -> Result<(EncoderSet, Vec<TrainTrace>)> {
    check_split(train.len(), validation)?;
    regime.select(train)?;
    let records = train.records();
    let (train_idx, val_idx) = split_pool(records, regime, validation);
    let mut set = EncoderSet::new(train.schema().embedding_dim());
    let mut traces = Vec::with_capacity(NUM_MODALITIES);
    for m in ModalityId::ALL {
        let (enc, trace) = train_unimodal_split(train, m, config, &train_idx, &val_idx)?;
        log::debug!(
            "stage 1 {m}: {} epochs, best {}",
            trace.epoch_loss.len(),
            trace.best_epoch + 1
        );
        set.insert(enc)?;
        traces.push(trace);
    }
    Ok((set, traces))
}

/// Trains a fresh fusion model on precomputed embeddings.
pub fn train_fusion(
    table: &EmbeddingTable,
    cell: &ExperimentCell,
    config: &PipelineConfig,
) -> Result<(FusionModel, TrainTrace)> {
    let tc = &config.fusion;
    let records = table.records();
    let pool: Vec<usize> = (0..records.len())
        .filter(|&i| cell.stage2.admits(records[i].availability()))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, 0x5eed));
    let (_, val) = holdout(&pool, tc.validation_fraction, &mut rng);
    let mut mask = vec![false; records.len()];
    for i in val {
        mask[i] = true;
    }
    train_fusion_split(table, cell, config, &mask)
}

/// [`train_fusion`] with validation records given by `validation`, aligned
/// with the table's records.
pub fn train_fusion_split(
    table: &EmbeddingTable,
    cell: &ExperimentCell,
    config: &PipelineConfig,
    validation: &[bool],
) -> Result<(FusionModel, TrainTrace)> {
    config.validate()?;
    let tc = &config.fusion;
    let records = table.records();
    check_split(records.len(), validation)?;
    let (train_idx, val_idx) = split_pool(records, cell.stage2, validation);
    check_pool(&train_idx, records, cell.stage2)?;

    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut model = FusionModel::new(
        config.fusion_config(cell, table.embedding_dim()),
        derive_seed(tc.seed, 7),
    )?;
    let mut opt = FusionOptimizer::new(tc.optimizer, tc.learning_rate, &model)?;
    let mut grads = FusionGrads::zeros_like(&model);
    let policy = config.dropout(cell);
    let mut trace = TrainTrace::default();
    let mut stopper = EarlyStopper::new(tc.patience);

    for epoch in 0..tc.epochs {
        let mut loss_sum = 0.0;
        let mut used = 0usize;
        for batch in shuffled_batches(&train_idx, tc.batch_size, &mut rng) {
            if !batch.iter().any(|&i| records[i].event) {
                trace.skipped_batches += 1;
                continue;
            }
            let samples = batch
                .iter()
                .map(|&i| sample_for(&records[i], records[i].all_features(), &policy, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            grads.reset();
            let out = batch_loss_and_grad(&model, &samples, &mut grads)?;
            if !out.total.is_finite() {
                return Err(diverged(cell, epoch, out.cox, out.recon));
            }
            opt.step(&mut model, &grads)?;
            loss_sum += out.total;
            used += 1;
        }
        trace.epoch_loss.push(if used > 0 {
            loss_sum / used as f64
        } else {
            f64::NAN
        });
        let val = validation_cindex(&val_idx, records, |r| RiskModel::risk(&model, r))?;
        trace.val_cindex.push(val);
        if stopper.observe(val, epoch, || model.clone()) {
            trace.stopped_early = true;
            break;
        }
    }
    trace.best_epoch = trace.epoch_loss.len().saturating_sub(1);
    if tc.patience > 0 {
        if let Some((epoch, best)) = stopper.into_best() {
            model = best;
            trace.best_epoch = epoch;
        }
    }
    Ok((model, trace))
}

/// Stage 1 on the stage-1 regime, freeze, then fusion on the stage-2 regime.
pub fn train_two_stage(
    train: &Cohort,
    cell: &ExperimentCell,
    config: &PipelineConfig,
) -> Result<(MultimodalModel, TwoStageTrace)> {
    config.validate()?;
    cell.stage2.select(train)?;
    let validation = shared_validation(train.len(), config);
    let (encoders, stage1) = train_stage1_split(train, cell.stage1, &config.stage1, &validation)?;
    let table = export_cohort_embeddings(&encoders, train)?;
    let (fusion, fusion_trace) = train_fusion_split(&table, cell, config, &validation)?;
    Ok((
        MultimodalModel { encoders, fusion },
        TwoStageTrace {
            stage1,
            fusion: fusion_trace,
        },
    ))
}

/// Where end-to-end training takes its initial encoders from.
#[derive(Clone, Debug)]
pub enum EndToEndInit {
    Scratch,
    Finetune(EncoderSet),
    FinetuneCheckpoint(PathBuf),
}

/// Encoders and fusion trained jointly against the total loss.
pub fn train_end_to_end(
    train: &Cohort,
    cell: &ExperimentCell,
    config: &PipelineConfig,
    init: EndToEndInit,
) -> Result<(MultimodalModel, TrainTrace)> {
    config.validate()?;
    let tc = &config.fusion;
    let schema = train.schema();
    let mut encoders = match init {
        EndToEndInit::Scratch => EncoderSet::random(schema, derive_seed(tc.seed, 11))?,
        EndToEndInit::Finetune(set) => set,
        EndToEndInit::FinetuneCheckpoint(path) => EncoderSet::load(&path)?,
    };
    for m in ModalityId::ALL {
        match encoders.encoder(m) {
            Some(e) if e.encoder.input_dim() == schema.raw_dim(m) => {}
            Some(_) => {
                return Err(Error::Config(format!(
                    "{m} encoder input width does not match the cohort schema"
                )))
            }
            None => {
                return Err(Error::Config(format!(
                    "end-to-end training needs a trained {m} encoder"
                )))
            }
        }
    }
    if encoders.embedding_dim() != schema.embedding_dim() {
        return Err(Error::Config(
            "encoder embedding width does not match the cohort schema".into(),
        ));
    }

    let records = train.records();
    let validation = shared_validation(records.len(), config);
    let (train_idx, val_idx) = split_pool(records, cell.stage2, &validation);
    check_pool(&train_idx, records, cell.stage2)?;

    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut fusion = FusionModel::new(
        config.fusion_config(cell, schema.embedding_dim()),
        derive_seed(tc.seed, 7),
    )?;
    let mut fusion_opt = FusionOptimizer::new(tc.optimizer, tc.learning_rate, &fusion)?;
    let mut fusion_grads = FusionGrads::zeros_like(&fusion);
    let mut enc_opts = Vec::with_capacity(NUM_MODALITIES);
    let mut enc_grads = Vec::with_capacity(NUM_MODALITIES);
    for m in ModalityId::ALL {
        let net = &encoders.encoder(m).expect("checked above").encoder;
        enc_opts.push(OptimizerState::new(tc.optimizer, tc.learning_rate, net)?);
        enc_grads.push(GradientSet::zeros_like(net));
    }
    let policy = config.dropout(cell);
    let mut trace = TrainTrace::default();
    let mut stopper = EarlyStopper::new(tc.patience);

    for epoch in 0..tc.epochs {
        let mut loss_sum = 0.0;
        let mut used = 0usize;
        for batch in shuffled_batches(&train_idx, tc.batch_size, &mut rng) {
            if !batch.iter().any(|&i| records[i].event) {
                trace.skipped_batches += 1;
                continue;
            }
            let mut embedded: Vec<(ModalityVectors, [Option<Tape>; NUM_MODALITIES])> =
                Vec::with_capacity(batch.len());
            for &i in &batch {
                let mut emb: ModalityVectors = Default::default();
                let mut tapes: [Option<Tape>; NUM_MODALITIES] = Default::default();
                for m in records[i].availability().present() {
                    let net = &encoders.encoder(m).expect("checked above").encoder;
                    let x = records[i].features(m).expect("available");
                    let (y, t) = net.forward(x)?;
                    emb[m.index()] = Some(y);
                    tapes[m.index()] = Some(t);
                }
                embedded.push((emb, tapes));
            }
            let samples = batch
                .iter()
                .zip(&embedded)
                .map(|(&i, (emb, _))| sample_for(&records[i], emb, &policy, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            fusion_grads.reset();
            let out = batch_loss_and_grad(&fusion, &samples, &mut fusion_grads)?;
            if !out.total.is_finite() {
                return Err(diverged(cell, epoch, out.cox, out.recon));
            }
            enc_grads.iter_mut().for_each(GradientSet::reset);
            for ((_, tapes), d_emb) in embedded.iter().zip(&out.embedding_grads) {
                for m in ModalityId::ALL {
                    let v = m.index();
                    if let (Some(t), Some(g)) = (&tapes[v], &d_emb[v]) {
                        let net = &encoders.encoder(m).expect("checked above").encoder;
                        net.backward_into(t, g, &mut enc_grads[v])?;
                    }
                }
            }
            fusion_opt.step(&mut fusion, &fusion_grads)?;
            for m in ModalityId::ALL {
                let v = m.index();
                let net = &mut encoders.encoder_mut(m).expect("checked above").encoder;
                enc_opts[v].step(net, &enc_grads[v])?;
            }
            loss_sum += out.total;
            used += 1;
        }
        trace.epoch_loss.push(if used > 0 {
            loss_sum / used as f64
        } else {
            f64::NAN
        });
        let model = MultimodalModel {
            encoders: encoders.clone(),
            fusion: fusion.clone(),
        };
        let val = validation_cindex(&val_idx, records, |r| model.risk(r))?;
        trace.val_cindex.push(val);
        if stopper.observe(val, epoch, || model.clone()) {
            trace.stopped_early = true;
            break;
        }
    }
    let mut model = MultimodalModel { encoders, fusion };
    trace.best_epoch = trace.epoch_loss.len().saturating_sub(1);
    if tc.patience > 0 {
        if let Some((epoch, best)) = stopper.into_best() {
            model = best;
            trace.best_epoch = epoch;
        }
    }
    Ok((model, trace))
}

fn split_pool(
    records: &[PatientRecord],
    regime: Regime,
    validation: &[bool],
) -> (Vec<usize>, Vec<usize>) {
    (0..records.len())
        .filter(|&i| regime.admits(records[i].availability()))
        .partition(|&i| !validation[i])
}

fn check_split(n: usize, validation: &[bool]) -> Result<()> {
    if validation.len() != n {
        return Err(Error::Config(format!(
            "validation mask covers {} records, data has {n}",
            validation.len()
        )));
    }
    Ok(())
}

fn check_pool(pool: &[usize], records: &[PatientRecord], regime: Regime) -> Result<()> {
    if pool.is_empty() {
        return Err(Error::InvalidCohort(format!(
            "regime {regime} leaves no training records"
        )));
    }
    if !pool.iter().any(|&i| records[i].event) {
        return Err(Error::NoEvents(format!(
            "regime {regime} leaves no observed events"
        )));
    }
    Ok(())
}

fn sample_for<'a, R: Rng>(
    record: &PatientRecord,
    embeddings: &'a ModalityVectors,
    policy: &DropoutPolicy,
    rng: &mut R,
) -> Result<FusionSample<'a>> {
    let alpha = record.availability();
    Ok(FusionSample {
        embeddings,
        alpha,
        mask: modality_dropout(alpha, policy, rng)?,
        time: record.time,
        event: record.event,
    })
}

fn diverged(cell: &ExperimentCell, epoch: usize, cox: f64, recon: Option<f64>) -> Error {
    Error::Numerical(format!(
        "{cell}: loss diverged at epoch {} (cox {cox}, recon {})",
        epoch + 1,
        recon.map(|r| r.to_string()).unwrap_or_else(|| "n/a".into())
    ))
}

fn validation_cindex(
    idx: &[usize],
    records: &[PatientRecord],
    risk: impl Fn(&PatientRecord) -> Result<f64>,
) -> Result<Option<f64>> {
    if idx.is_empty() {
        return Ok(None);
    }
    let risks = idx
        .iter()
        .map(|&i| risk(&records[i]))
        .collect::<Result<Vec<_>>>()?;
    let times: Vec<f64> = idx.iter().map(|&i| records[i].time).collect();
    let events: Vec<bool> = idx.iter().map(|&i| records[i].event).collect();
    match concordance_index(&risks, &times, &events) {
        Ok(c) => Ok(Some(c)),
        Err(Error::NoComparablePairs) => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub scenario: String,
    pub cindex: f64,
    /// Bootstrap standard deviation; absent when no resamples were requested.
    pub std: Option<f64>,
    pub n_test: usize,
    /// Records removed because the scenario left them with no modality.
    pub dropped: usize,
}

/// C-index on the test cohort after applying `scenario`, with a bootstrap spread.
pub fn evaluate<M: RiskModel + ?Sized>(
    model: &M,
    test: &Cohort,
    scenario: &MissingnessScenario,
    bootstrap: usize,
    seed: u64,
) -> Result<Evaluation> {
    let outcome = apply_scenario(test, scenario)?;
    let cohort = &outcome.cohort;
    let risks = cohort
        .records()
        .iter()
        .map(|r| model.risk(r))
        .collect::<Result<Vec<_>>>()?;
    let times = cohort.times();
    let events = cohort.events();
    let cindex = concordance_index(&risks, &times, &events)?;
    let std = (bootstrap > 0).then(|| bootstrap_std(&risks, &times, &events, bootstrap, seed));
    Ok(Evaluation {
        scenario: scenario.name().to_string(),
        cindex,
        std: std.flatten(),
        n_test: cohort.len(),
        dropped: outcome.dropped,
    })
}

/// Sample standard deviation of the c-index over resamples with replacement.
/// Resamples without a comparable pair are skipped.
pub fn bootstrap_std(
    risks: &[f64],
    times: &[f64],
    events: &[bool],
    resamples: usize,
    seed: u64,
) -> Option<f64> {
    let n = risks.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(resamples);
    let (mut r, mut t, mut e) = (vec![0.0; n], vec![0.0; n], vec![false; n]);
    for _ in 0..resamples {
        for k in 0..n {
            let j = rng.random_range(0..n);
            r[k] = risks[j];
            t[k] = times[j];
            e[k] = events[j];
        }
        if let Ok(c) = concordance_index(&r, &t, &e) {
            values.push(c);
        }
    }
    if values.len() < 2 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    Some(var.sqrt())
}

/// Encoder slots that are trained, in modality order; used to compare parameter snapshots.
pub fn encoder_params(set: &EncoderSet) -> Vec<Vec<f64>> {
    ModalityId::ALL
        .iter()
        .map(|&m| match set.slot(m) {
            EncoderSlot::Trained(e) => e.encoder.params(),
            _ => Vec::new(),
        })
        .collect()
}
