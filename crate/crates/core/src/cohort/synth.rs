//! Synthetic cohorts with a known generative risk.
//!
//! A shared latent `z ~ N(0, I_8)` drives every modality: modality `v` observes
//! `A_v z + sigma_v * noise`. The true risk is `w . z + 0.5 tanh(z_0 z_1)`, event
//! times are exponential with rate `base_rate * exp(risk)`. The maps `A_v` and
//! the weights `w` come from `world_seed`, so cohorts drawn with different
//! sample seeds share one distribution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Cohort, ModalityId, ModalitySchema, PatientRecord, NUM_MODALITIES};
use crate::error::{Error, Result};

pub const LATENT_DIM: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MissingMechanism {
    /// Independent Bernoulli per modality.
    Mcar,
    /// Pathology missingness rises with the record's risk quantile; others stay MCAR.
    Mnar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub missing_rate: [f64; NUM_MODALITIES],
    pub censor_rate: f64,
    pub mechanism: MissingMechanism,
    /// Per-modality observation noise standard deviation.
    pub noise: [f64; NUM_MODALITIES],
    /// Euclidean norm of the linear risk weights.
    pub risk_scale: f64,
    /// Event rate (per day) at zero risk.
    pub base_rate: f64,
    pub world_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 500,
            missing_rate: [0.3; NUM_MODALITIES],
            censor_rate: 0.3,
            mechanism: MissingMechanism::Mcar,
            noise: [1.0; NUM_MODALITIES],
            risk_scale: 2.5,
            base_rate: 1.0 / 365.0,
            world_seed: 2022,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!("need n >= 2, got {}", self.n)));
        }
        let prob_ok = |p: f64| (0.0..1.0).contains(&p);
        if !self.missing_rate.iter().all(|&p| prob_ok(p)) {
            return Err(Error::Config("missing rates must lie in [0, 1)".into()));
        }
        if !prob_ok(self.censor_rate) {
            return Err(Error::Config("censor rate must lie in [0, 1)".into()));
        }
        if !self.noise.iter().all(|s| s.is_finite() && *s >= 0.0) {
            return Err(Error::Config("noise levels must be finite and >= 0".into()));
        }
        if !(self.risk_scale.is_finite() && self.base_rate > 0.0 && self.base_rate.is_finite()) {
            return Err(Error::Config(
                "risk scale and base rate must be finite, base rate > 0".into(),
            ));
        }
        Ok(())
    }
}

struct World {
    maps: Vec<Vec<f64>>, // per modality, row-major raw_dim x LATENT_DIM
    weights: [f64; LATENT_DIM],
}

impl World {
    fn new(schema: &ModalitySchema, cfg: &SynthConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.world_seed);
        let scale = (1.0 / LATENT_DIM as f64).sqrt();
        let maps = ModalityId::ALL
            .iter()
            .map(|&m| {
                (0..schema.raw_dim(m) * LATENT_DIM)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let mut weights: [f64; LATENT_DIM] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let norm = weights.iter().map(|w| w * w).sum::<f64>().sqrt();
        weights.iter_mut().for_each(|w| *w *= cfg.risk_scale / norm);
        World { maps, weights }
    }

    fn risk(&self, z: &[f64; LATENT_DIM]) -> f64 {
        let linear: f64 = self.weights.iter().zip(z).map(|(w, v)| w * v).sum();
        linear + 0.5 * (z[0] * z[1]).tanh()
    }
}

/// Draws `cfg.n` records. Deterministic given `seed` and `cfg`.
pub fn generate_synthetic(cfg: &SynthConfig, schema: &ModalitySchema, seed: u64) -> Result<Cohort> {
    cfg.validate()?;
    let world = World::new(schema, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positive_uniform = |rng: &mut ChaCha8Rng| loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            break u;
        }
    };

    let mut features = Vec::with_capacity(cfg.n);
    let mut risks = Vec::with_capacity(cfg.n);
    let mut times = Vec::with_capacity(cfg.n);
    let mut events = Vec::with_capacity(cfg.n);
    for _ in 0..cfg.n {
        let z: [f64; LATENT_DIM] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let risk = world.risk(&z);
        let blocks: [Vec<f64>; NUM_MODALITIES] = std::array::from_fn(|v| {
            let m = ModalityId::ALL[v];
            (0..schema.raw_dim(m))
                .map(|r| {
                    let row = &world.maps[v][r * LATENT_DIM..(r + 1) * LATENT_DIM];
                    let signal: f64 = row.iter().zip(&z).map(|(a, b)| a * b).sum();
                    signal + cfg.noise[v] * rng.sample::<f64, _>(StandardNormal)
                })
                .collect()
        });
        let rate = cfg.base_rate * risk.exp();
        let mut time = -positive_uniform(&mut rng).ln() / rate;
        let mut event = true;
        if rng.random::<f64>() < cfg.censor_rate {
            time *= positive_uniform(&mut rng);
            event = false;
        }
        features.push(blocks);
        risks.push(risk);
        times.push(time);
        events.push(event);
    }
    if !events.iter().any(|&e| e) {
        return Err(Error::NoEvents(
            "synthetic configuration produced no events after censoring".into(),
        ));
    }
    if let Some(t) = times.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(Error::Numerical(format!(
            "synthetic time {t} out of range; reduce risk scale"
        )));
    }

    // risk quantile in (0, 1), used by the MNAR mechanism
    let mut order: Vec<usize> = (0..cfg.n).collect();
    order.sort_by(|&a, &b| risks[a].total_cmp(&risks[b]));
    let mut quantile = vec![0.0; cfg.n];
    for (rank, &i) in order.iter().enumerate() {
        quantile[i] = (rank as f64 + 0.5) / cfg.n as f64;
    }

    let mut records = Vec::with_capacity(cfg.n);
    for (i, blocks) in features.into_iter().enumerate() {
        let rates: [f64; NUM_MODALITIES] = std::array::from_fn(|v| match cfg.mechanism {
            MissingMechanism::Mnar if v == ModalityId::Pathology.index() => {
                (2.0 * cfg.missing_rate[v] * quantile[i]).min(0.95)
            }
            _ => cfg.missing_rate[v],
        });
        let keep = loop {
            let k: [bool; NUM_MODALITIES] =
                std::array::from_fn(|v| rng.random::<f64>() >= rates[v]);
            if k.iter().any(|&x| x) {
                break k;
            }
        };
        let mut slots: [Option<Vec<f64>>; NUM_MODALITIES] = Default::default();
        for (v, block) in blocks.into_iter().enumerate() {
            if keep[v] {
                slots[v] = Some(block);
            }
        }
        records.push(PatientRecord::new(
            format!("P{i:05}"),
            times[i],
            events[i],
            slots,
        ));
    }
    Cohort::new(*schema, records, Some(risks))
}
