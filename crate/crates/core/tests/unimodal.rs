use std::cell::Cell;

use mmsurv::cohort::{
    generate_synthetic, Cohort, Mask, ModalityId, ModalitySchema, RecordSource, SynthConfig,
};
use mmsurv::survival::concordance_index;
use mmsurv::unimodal::{export_cohort_embeddings, train_unimodal, EncoderSet};
use mmsurv::TrainConfig;

fn cohort(n: usize, seed: u64) -> Cohort {
    let cfg = SynthConfig {
        n,
        ..Default::default()
    };
    generate_synthetic(&cfg, &ModalitySchema::synthetic_default(), seed).unwrap()
}

/// Counts feature reads of records lacking the requested modality.
struct Audited<'a> {
    inner: &'a Cohort,
    illegal: Cell<usize>,
}

impl RecordSource for Audited<'_> {
    fn schema(&self) -> &ModalitySchema {
        self.inner.schema()
    }
    fn len(&self) -> usize {
        self.inner.len()
    }
    fn availability(&self, i: usize) -> Mask {
        self.inner.availability(i)
    }
    fn time(&self, i: usize) -> f64 {
        self.inner.time(i)
    }
    fn event(&self, i: usize) -> bool {
        self.inner.event(i)
    }
    fn features(&self, i: usize, m: ModalityId) -> Option<&[f64]> {
        let x = self.inner.features(i, m);
        if x.is_none() {
            self.illegal.set(self.illegal.get() + 1);
        }
        x
    }
}

#[test]
fn genomics_encoder_generalizes() {
    let (train, test) = (cohort(500, 0), cohort(200, 1));
    let enc = train_unimodal(&train, ModalityId::Genomics, &TrainConfig::stage1(3)).unwrap();
    let (mut r, mut t, mut e) = (vec![], vec![], vec![]);
    for rec in test.records() {
        if let Some(x) = rec.features(ModalityId::Genomics) {
            r.push(enc.hazard(x).unwrap());
            t.push(rec.time);
            e.push(rec.event);
        }
    }
    let c = concordance_index(&r, &t, &e).unwrap();
    assert!(c > 0.60, "genomics test c-index {c}");
}

#[test]
fn training_never_reads_absent_modalities() {
    let data = cohort(120, 2);
    let audited = Audited {
        inner: &data,
        illegal: Cell::new(0),
    };
    let mut cfg = TrainConfig::stage1(1);
    cfg.epochs = 3;
    for m in ModalityId::ALL {
        train_unimodal(&audited, m, &cfg).unwrap();
    }
    assert_eq!(audited.illegal.get(), 0);
}

#[test]
fn exported_embeddings_follow_masks_and_width() {
    let data = cohort(80, 4);
    let mut cfg = TrainConfig::stage1(2);
    cfg.epochs = 2;
    let mut set = EncoderSet::new(32);
    for m in ModalityId::ALL {
        set.insert(train_unimodal(&data, m, &cfg).unwrap()).unwrap();
    }
    let table = export_cohort_embeddings(&set, &data).unwrap();
    assert_eq!(table.len(), data.len());
    for (rec, emb) in data.records().iter().zip(table.records()) {
        assert_eq!(emb.availability(), rec.availability());
        assert_eq!((emb.time, emb.event), (rec.time, rec.event));
        for m in emb.availability().present() {
            assert_eq!(emb.features(m).unwrap().len(), 32);
        }
    }
}
