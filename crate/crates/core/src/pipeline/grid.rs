use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    evaluate, shared_validation, train_fusion_split, train_stage1_split, ExperimentCell,
    PipelineConfig, Regime,
};
use crate::cohort::{Cohort, MissingnessScenario};
use crate::error::{Error, Result};
use crate::fusion::{FusionModel, FusionStrategy};
use crate::unimodal::{export_cohort_embeddings, EmbeddingTable, EncoderSet};

/// Frozen stage-1 encoders and the training set embedded with them.
struct MultimodalParts {
    encoders: EncoderSet,
    table: EmbeddingTable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridOptions {
    pub pipeline: PipelineConfig,
    pub scenarios: Vec<MissingnessScenario>,
    /// Cells trained concurrently; 1 runs everything on the calling thread.
    pub workers: usize,
}

impl GridOptions {
    pub fn new(pipeline: PipelineConfig) -> Self {
        GridOptions {
            pipeline,
            scenarios: MissingnessScenario::standard(),
            workers: 1,
        }
    }
}

/// One (cell, scenario) result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub strategy: FusionStrategy,
    pub stage1_regime: Regime,
    pub stage2_regime: Regime,
    pub dropout: bool,
    pub recon: bool,
    pub scenario: String,
    /// C-index on the full scenario-applied test set.
    pub cindex_mean: Option<f64>,
    /// Bootstrap standard deviation.
    pub cindex_std: Option<f64>,
    pub n_test: usize,
    /// Trainable fusion parameters.
    pub params: usize,
    pub error: Option<String>,
}

impl ReportRow {
    pub fn cell(&self) -> ExperimentCell {
        ExperimentCell::new(
            self.strategy,
            self.stage1_regime,
            self.stage2_regime,
            self.dropout,
            self.recon,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: PipelineConfig,
    pub scenarios: Vec<String>,
    pub cells: Vec<ExperimentCell>,
    pub rows: Vec<ReportRow>,
}

/// The eighteen rows of the ablation table: concatenation and tensor fusion
/// with four settings each, mean vector with ten.
pub fn ablation_cells() -> Vec<ExperimentCell> {
    use FusionStrategy::*;
    use Regime::{All as CM, Complete as C};
    let mut cells = Vec::new();
    for s in [Concatenation, TensorFusion] {
        for (s2, drop) in [(C, false), (CM, false), (C, true), (CM, true)] {
            cells.push(ExperimentCell::new(s, CM, s2, drop, false));
        }
    }
    for (s1, s2, drop, recon) in [
        (C, C, false, false),
        (CM, C, false, false),
        (CM, CM, false, false),
        (C, C, true, false),
        (CM, C, true, false),
        (CM, CM, true, false),
        (CM, C, false, true),
        (CM, CM, false, true),
        (CM, C, true, true),
        (CM, CM, true, true),
    ] {
        cells.push(ExperimentCell::new(MeanVector, s1, s2, drop, recon));
    }
    cells
}

fn dedupe(cells: &[ExperimentCell]) -> Vec<ExperimentCell> {
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(cells.len());
    for c in cells {
        if seen.insert(*c) {
            out.push(*c);
        } else {
            log::warn!("duplicate cell {c} ignored");
        }
    }
    out
}

/// Trains and evaluates every cell on every scenario. Stage-1 encoders are
/// trained once per stage-1 regime and shared. A failing cell is recorded in
/// its rows and does not stop the others.
pub fn run_ablation_grid(
    train: &Cohort,
    test: &Cohort,
    cells: &[ExperimentCell],
    options: &GridOptions,
) -> Result<AblationReport> {
    options.pipeline.validate()?;
    if cells.is_empty() {
        return Err(Error::Config("the grid has no cells".into()));
    }
    if options.scenarios.is_empty() {
        return Err(Error::Config("the grid has no test scenarios".into()));
    }
    if train.schema() != test.schema() {
        return Err(Error::InvalidCohort(
            "train and test cohorts use different schemas".into(),
        ));
    }
    let cells = dedupe(cells);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;

    let mut regimes: Vec<Regime> = cells.iter().map(|c| c.stage1).collect();
    regimes.sort();
    regimes.dedup();
    let validation = shared_validation(train.len(), &options.pipeline);
    let stage1: BTreeMap<Regime, std::result::Result<MultimodalParts, String>> =
        pool.install(|| {
            regimes
                .par_iter()
                .map(|&r| {
                    let built = train_stage1_split(train, r, &options.pipeline.stage1, &validation)
                        .and_then(|(enc, _)| {
                            let table = export_cohort_embeddings(&enc, train)?;
                            Ok(MultimodalParts {
                                encoders: enc,
                                table,
                            })
                        });
                    (r, built.map_err(|e| e.to_string()))
                })
                .collect()
        });

    let rows: Vec<Vec<ReportRow>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                run_cell(
                    cell,
                    stage1[&cell.stage1].as_ref(),
                    &validation,
                    test,
                    options,
                )
            })
            .collect()
    });

    Ok(AblationReport {
        config: options.pipeline.clone(),
        scenarios: options
            .scenarios
            .iter()
            .map(|s| s.name().to_string())
            .collect(),
        cells,
        rows: rows.into_iter().flatten().collect(),
    })
}

fn run_cell(
    cell: &ExperimentCell,
    stage1: std::result::Result<&MultimodalParts, &String>,
    validation: &[bool],
    test: &Cohort,
    options: &GridOptions,
) -> Vec<ReportRow> {
    let cfg = &options.pipeline;
    let params = FusionModel::new(cfg.fusion_config(cell, test.schema().embedding_dim()), 0)
        .map(|m| m.param_count())
        .unwrap_or(0);
    let row = |scenario: &MissingnessScenario| ReportRow {
        strategy: cell.strategy,
        stage1_regime: cell.stage1,
        stage2_regime: cell.stage2,
        dropout: cell.dropout,
        recon: cell.reconstruction,
        scenario: scenario.name().to_string(),
        cindex_mean: None,
        cindex_std: None,
        n_test: 0,
        params,
        error: None,
    };
    let failed = |msg: String| -> Vec<ReportRow> {
        log::warn!("{cell}: {msg}");
        options
            .scenarios
            .iter()
            .map(|s| ReportRow {
                error: Some(msg.clone()),
                ..row(s)
            })
            .collect()
    };

    let parts = match stage1 {
        Ok(p) => p,
        Err(msg) => return failed(format!("stage 1 failed: {msg}")),
    };
    let fusion = match train_fusion_split(&parts.table, cell, cfg, validation) {
        Ok((m, _)) => m,
        Err(e) => return failed(e.to_string()),
    };
    log::info!("trained {cell}");
    let model = super::MultimodalModel {
        encoders: parts.encoders.clone(),
        fusion,
    };
    options
        .scenarios
        .iter()
        .map(
            |s| match evaluate(&model, test, s, cfg.bootstrap, cfg.bootstrap_seed) {
                Ok(e) => ReportRow {
                    cindex_mean: Some(e.cindex),
                    cindex_std: e.std,
                    n_test: e.n_test,
                    ..row(s)
                },
                Err(e) => ReportRow {
                    error: Some(e.to_string()),
                    ..row(s)
                },
            },
        )
        .collect()
}

fn fmt_opt(v: Option<f64>, digits: usize) -> String {
    v.map(|x| format!("{x:.digits$}"))
        .unwrap_or_else(|| "-".into())
}

impl AblationReport {
    pub fn get(&self, cell: &ExperimentCell, scenario: &str) -> Option<&ReportRow> {
        self.rows
            .iter()
            .find(|r| r.cell() == *cell && r.scenario == scenario)
    }

    pub fn cindex(&self, cell: &ExperimentCell, scenario: &str) -> Option<f64> {
        self.get(cell, scenario).and_then(|r| r.cindex_mean)
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)
                .map_err(|e| Error::Config(format!("csv: {e}")))?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Config(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Config(format!("csv: {e}")))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Wide table (one column per scenario) followed by the long form.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("# Ablation report\n\n");
        let b = if self.config.bootstrap > 0 {
            format!(
                "bootstrap std over {} test resamples",
                self.config.bootstrap
            )
        } else {
            "no bootstrap".to_string()
        };
        let _ = writeln!(
            s,
            "C-index on the test set, mean ± {b}. C = complete records only, C+M = all records.\n"
        );
        let _ = write!(
            s,
            "| Fusion | Stage 1 data | Stage 2 data | Dropout | Recon |"
        );
        for sc in &self.scenarios {
            let _ = write!(s, " {sc} |");
        }
        s.push_str(" Params |\n|---|---|---|---|---|");
        for _ in &self.scenarios {
            s.push_str("---|");
        }
        s.push_str("---|\n");
        for cell in &self.cells {
            let _ = write!(
                s,
                "| {} | {} | {} | {} | {} |",
                cell.strategy,
                cell.stage1,
                cell.stage2,
                if cell.dropout { "yes" } else { "" },
                if cell.reconstruction { "yes" } else { "" }
            );
            let mut params = 0;
            for sc in &self.scenarios {
                let text = match self.get(cell, sc) {
                    Some(r) => {
                        params = r.params;
                        match (&r.error, r.cindex_mean) {
                            (Some(_), _) => "failed".to_string(),
                            (None, Some(c)) => match r.cindex_std {
                                Some(sd) => format!("{c:.4} ± {sd:.3}"),
                                None => format!("{c:.4}"),
                            },
                            (None, None) => "-".to_string(),
                        }
                    }
                    None => "-".to_string(),
                };
                let _ = write!(s, " {text} |");
            }
            let _ = writeln!(s, " {params} |");
        }

        s.push_str("\n## Rows by scenario\n\n");
        s.push_str("| Scenario | Fusion | Stage 1 | Stage 2 | Dropout | Recon | C-index | Std | n | Error |\n");
        s.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
        for sc in &self.scenarios {
            for r in self.rows.iter().filter(|r| &r.scenario == sc) {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} | {} | {} | {} | {} | {} | {} |",
                    r.scenario,
                    r.strategy,
                    r.stage1_regime,
                    r.stage2_regime,
                    r.dropout,
                    r.recon,
                    fmt_opt(r.cindex_mean, 4),
                    fmt_opt(r.cindex_std, 3),
                    r.n_test,
                    r.error.as_deref().unwrap_or("")
                );
            }
        }
        s
    }

    /// Writes `report.csv`, `report.json` and `report.md` into `dir`.
    pub fn write_all(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("report.csv", self.to_csv()?),
            ("report.json", self.to_json()?),
            ("report.md", self.to_markdown()),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_synthetic, split, ModalitySchema, SynthConfig};
    use crate::pipeline::train_two_stage;

    fn data(seed: u64) -> (Cohort, Cohort) {
        let c = generate_synthetic(
            &SynthConfig {
                n: 120,
                ..Default::default()
            },
            &ModalitySchema::synthetic_default(),
            seed,
        )
        .unwrap();
        split(&c, 0.7, seed).unwrap()
    }

    fn quick(seed: u64) -> GridOptions {
        let mut p = PipelineConfig::new(seed);
        p.stage1.epochs = 2;
        p.fusion.epochs = 2;
        p.bootstrap = 10;
        GridOptions::new(p)
    }

    #[test]
    fn preset_has_every_row() {
        let cells = ablation_cells();
        assert_eq!(cells.len(), 18);
        let count = |s| cells.iter().filter(|c| c.strategy == s).count();
        assert_eq!(count(FusionStrategy::Concatenation), 4);
        assert_eq!(count(FusionStrategy::TensorFusion), 4);
        assert_eq!(count(FusionStrategy::MeanVector), 10);
        assert_eq!(dedupe(&cells).len(), 18);
    }

    #[test]
    fn duplicates_are_dropped() {
        let c = ExperimentCell::mmd();
        assert_eq!(dedupe(&[c, c]), vec![c]);
    }

    #[test]
    fn single_cell_grid_equals_train_then_evaluate() {
        let (train, test) = data(3);
        let opts = quick(4);
        let cell = ExperimentCell::mmd();
        let report = run_ablation_grid(&train, &test, &[cell], &opts).unwrap();
        assert_eq!(report.rows.len(), 3);
        let (model, _) = train_two_stage(&train, &cell, &opts.pipeline).unwrap();
        for sc in &opts.scenarios {
            let e = evaluate(
                &model,
                &test,
                sc,
                opts.pipeline.bootstrap,
                opts.pipeline.bootstrap_seed,
            )
            .unwrap();
            let row = report.get(&cell, sc.name()).unwrap();
            assert_eq!(row.cindex_mean, Some(e.cindex));
            assert_eq!(row.cindex_std, e.std);
            assert_eq!(row.n_test, e.n_test);
        }
    }

    #[test]
    fn failing_cell_is_recorded() {
        let (train, test) = data(5);
        // no record keeps all four modalities, but every modality stays represented
        let records = train
            .records()
            .iter()
            .cloned()
            .map(|mut r| {
                if r.availability().is_complete() {
                    r.remove(crate::cohort::ModalityId::Demographics);
                }
                r
            })
            .collect();
        let train = Cohort::new(*train.schema(), records, None).unwrap();
        let bad = ExperimentCell::new(
            FusionStrategy::MeanVector,
            Regime::Complete,
            Regime::All,
            false,
            false,
        );
        let good = ExperimentCell::new(
            FusionStrategy::Concatenation,
            Regime::All,
            Regime::All,
            false,
            false,
        );
        let report = run_ablation_grid(&train, &test, &[bad, good], &quick(1)).unwrap();
        assert_eq!(report.rows.len(), 6);
        assert!(report.get(&bad, "complete").unwrap().error.is_some());
        assert!(report.cindex(&good, "complete").is_some());
        let md = report.to_markdown();
        assert!(md.contains("failed"));
        for sc in ["complete", "pathology-missing", "gene-pathology-missing"] {
            assert!(md.contains(sc));
        }
        let csv = report.to_csv().unwrap();
        assert!(csv.starts_with(
            "strategy,stage1_regime,stage2_regime,dropout,recon,scenario,cindex_mean,cindex_std,n_test,params,error\n"
        ));
    }
}
