//! Central finite-difference checks for every analytic gradient in the crate.
//!
//! Each check draws randomized instances, compares analytic and numeric
//! derivatives coordinate by coordinate, and reports the worst relative error
//! `|a - n| / max(|a|, |n|, floor * max(1, |f|))`, where `f` is the objective.
//! Scaling the floor by `|f|` keeps gradients that are zero up to roundoff from
//! failing on the `eps * |f| / h` noise of the central difference. Large
//! networks are checked on a random subset of coordinates.
//!
//! ReLU and SELU are not differentiable at 0. A coordinate whose `+h` or `-h`
//! probe moves any pre-activation across 0 is skipped, since the central
//! difference there measures the kink rather than the gradient. The number of
//! skipped coordinates is reported and capped.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::cohort::{Mask, ModalityId, NUM_MODALITIES};
use crate::config::derive_seed;
use crate::error::{Error, Result};
use crate::fusion::{
    batch_loss_and_grad, recon_loss, recon_loss_and_grad, FusionConfig, FusionGrads, FusionModel,
    FusionSample, FusionStrategy, ModalityVectors, Reconstruction,
};
use crate::nn::{Activation, DenseNet};
use crate::survival::{cox_loss, cox_loss_grad, SurvivalBatch};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, per unit of objective magnitude.
    pub floor: f64,
    pub instances: usize,
    /// Most coordinates checked per instance.
    pub max_coords: usize,
    /// Largest tolerated share of kink-skipped coordinates.
    pub max_skip_fraction: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-5,
            tolerance: 1e-4,
            floor: 1e-4,
            instances: 50,
            max_coords: 40,
            max_skip_fraction: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    pub coords: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub max_skip_fraction: f64,
}

impl CheckReport {
    fn new(name: impl Into<String>, opts: &GradCheckOptions) -> Self {
        CheckReport {
            name: name.into(),
            instances: 0,
            coords: 0,
            skipped: 0,
            max_rel_error: 0.0,
            tolerance: opts.tolerance,
            max_skip_fraction: opts.max_skip_fraction,
        }
    }

    pub fn passed(&self) -> bool {
        let total = self.coords + self.skipped;
        self.coords > 0
            && self.max_rel_error <= self.tolerance
            && (self.skipped as f64) <= self.max_skip_fraction * total as f64
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / scale
}

fn coords_to_check(n: usize, max: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= max {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, max).into_vec();
        v.sort_unstable();
        v
    }
}

/// Probes one coordinate. `eval` returns the objective and the kink pattern.
fn probe(
    report: &mut CheckReport,
    opts: &GradCheckOptions,
    analytic: f64,
    base_pattern: &[bool],
    mut eval: impl FnMut(f64) -> Result<(f64, Vec<bool>)>,
) -> Result<()> {
    let (fp, pp) = eval(opts.h)?;
    let (fm, pm) = eval(-opts.h)?;
    if pp != base_pattern || pm != base_pattern {
        report.skipped += 1;
        return Ok(());
    }
    if !fp.is_finite() || !fm.is_finite() {
        return Err(Error::Numerical(format!(
            "{}: non-finite objective while probing",
            report.name
        )));
    }
    let numeric = (fp - fm) / (2.0 * opts.h);
    let floor = opts.floor * fp.abs().max(fm.abs()).max(1.0);
    let err = relative_error(analytic, numeric, floor);
    if err > report.max_rel_error || err.is_nan() {
        report.max_rel_error = if err.is_nan() { f64::INFINITY } else { err };
    }
    report.coords += 1;
    Ok(())
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Gives the zero-initialized biases random values so their gradients are exercised.
fn jitter_biases(net: &mut DenseNet, rng: &mut ChaCha8Rng) {
    for l in net.layers_mut() {
        for b in &mut l.bias {
            *b = 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

/// Checks parameter and input gradients of `upstream . net(x)` on fresh nets of the given shape.
pub fn check_dense_net(
    name: &str,
    dims: &[usize],
    activations: &[Activation],
    opts: &GradCheckOptions,
) -> Result<CheckReport> {
    let mut report = CheckReport::new(name, opts);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, fxhash(name)));
    for _ in 0..opts.instances {
        let mut net = DenseNet::with_rng(dims, activations, &mut rng)?;
        jitter_biases(&mut net, &mut rng);
        check_one_net(&mut net, &mut report, opts, &mut rng)?;
        report.instances += 1;
    }
    Ok(report)
}

/// Random nets with up to three layers, widths up to 32 and random activations.
pub fn check_random_nets(opts: &GradCheckOptions) -> Result<CheckReport> {
    let name = "dense: random shapes";
    let mut report = CheckReport::new(name, opts);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, fxhash(name)));
    let acts = [
        Activation::Relu,
        Activation::Selu,
        Activation::Tanh,
        Activation::Identity,
    ];
    for _ in 0..opts.instances {
        let layers = rng.random_range(1..=3);
        let dims: Vec<usize> = (0..=layers).map(|_| rng.random_range(1..=32)).collect();
        let a: Vec<Activation> = (0..layers)
            .map(|_| acts[rng.random_range(0..acts.len())])
            .collect();
        let mut net = DenseNet::with_rng(&dims, &a, &mut rng)?;
        jitter_biases(&mut net, &mut rng);
        check_one_net(&mut net, &mut report, opts, &mut rng)?;
        report.instances += 1;
    }
    Ok(report)
}

fn check_one_net(
    net: &mut DenseNet,
    report: &mut CheckReport,
    opts: &GradCheckOptions,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut x = normal_vec(rng, net.input_dim(), 1.0);
    let upstream = normal_vec(rng, net.output_dim(), 1.0);
    let objective = |net: &DenseNet, x: &[f64]| -> Result<(f64, Vec<bool>)> {
        let (y, tape) = net.forward(x)?;
        let mut pattern = Vec::new();
        net.kink_pattern(&tape, &mut pattern);
        Ok((y.iter().zip(&upstream).map(|(a, b)| a * b).sum(), pattern))
    };
    let (_, base) = objective(net, &x)?;
    let (y, tape) = net.forward(&x)?;
    debug_assert_eq!(y.len(), upstream.len());
    let (grads, input_grad) = net.backward(&tape, &upstream)?;
    let analytic = grads.flatten();

    for k in coords_to_check(analytic.len(), opts.max_coords, rng) {
        probe(report, opts, analytic[k], &base, |d| {
            let orig = *net.param_mut(k).expect("index in range");
            *net.param_mut(k).expect("index in range") = orig + d;
            let out = objective(net, &x);
            *net.param_mut(k).expect("index in range") = orig;
            out
        })?;
    }
    for k in coords_to_check(x.len(), opts.max_coords / 2, rng) {
        probe(report, opts, input_grad[k], &base, |d| {
            let orig = x[k];
            x[k] = orig + d;
            let out = objective(net, &x);
            x[k] = orig;
            out
        })?;
    }
    Ok(())
}

fn random_survival(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let hazards = normal_vec(rng, n, 2.0);
    // small integer times so ties are common
    let times: Vec<f64> = (0..n).map(|_| rng.random_range(1..=8) as f64).collect();
    let mut events: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
    if !events.iter().any(|&e| e) {
        let i = rng.random_range(0..n);
        events[i] = true;
    }
    (hazards, times, events)
}

pub fn check_cox(opts: &GradCheckOptions) -> Result<CheckReport> {
    let name = "cox loss";
    let mut report = CheckReport::new(name, opts);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, fxhash(name)));
    for _ in 0..opts.instances {
        let n = rng.random_range(1..=20);
        let (mut hazards, times, events) = random_survival(&mut rng, n);
        let analytic = cox_loss_grad(&SurvivalBatch::new(&hazards, &times, &events)?)?;
        for k in 0..n {
            probe(&mut report, opts, analytic[k], &[], |d| {
                let orig = hazards[k];
                hazards[k] = orig + d;
                let l = cox_loss(&SurvivalBatch::new(&hazards, &times, &events)?);
                hazards[k] = orig;
                Ok((l?, Vec::new()))
            })?;
        }
        report.instances += 1;
    }
    Ok(report)
}

fn random_mask(rng: &mut ChaCha8Rng) -> Mask {
    loop {
        let m = Mask::new(std::array::from_fn(|_| rng.random_bool(0.6)));
        if !m.is_empty() {
            return m;
        }
    }
}

fn random_subset(rng: &mut ChaCha8Rng, of: Mask) -> Mask {
    loop {
        let mut m = of;
        for v in of.present() {
            if rng.random_bool(0.4) {
                m.set(v, false);
            }
        }
        if !m.is_empty() {
            return m;
        }
    }
}

/// Gradient of the reconstruction loss with respect to reconstructions and targets.
pub fn check_recon(opts: &GradCheckOptions) -> Result<CheckReport> {
    let name = "reconstruction loss";
    let mut report = CheckReport::new(name, opts);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, fxhash(name)));
    for _ in 0..opts.instances {
        let n = rng.random_range(1..=6);
        let e = rng.random_range(1..=8);
        let alpha: Vec<Mask> = (0..n).map(|_| random_mask(&mut rng)).collect();
        let mut recon: Vec<Reconstruction> = (0..n)
            .map(|_| std::array::from_fn(|_| normal_vec(&mut rng, e, 1.0)))
            .collect();
        let mut targets: Vec<ModalityVectors> = alpha
            .iter()
            .map(|a| std::array::from_fn(|v| a.flags()[v].then(|| normal_vec(&mut rng, e, 1.0))))
            .collect();
        let loss =
            |recon: &[Reconstruction], targets: &[ModalityVectors]| -> Result<(f64, Vec<bool>)> {
                let refs: Vec<&ModalityVectors> = targets.iter().collect();
                Ok((recon_loss(recon, &refs, &alpha)?, Vec::new()))
            };
        let refs: Vec<&ModalityVectors> = targets.iter().collect();
        let (_, grads) = recon_loss_and_grad(&recon, &refs, &alpha)?;
        for i in 0..n {
            for v in 0..NUM_MODALITIES {
                for k in 0..e {
                    probe(&mut report, opts, grads[i][v][k], &[], |d| {
                        let orig = recon[i][v][k];
                        recon[i][v][k] = orig + d;
                        let out = loss(&recon, &targets);
                        recon[i][v][k] = orig;
                        out
                    })?;
                    if alpha[i].flags()[v] {
                        probe(&mut report, opts, -grads[i][v][k], &[], |d| {
                            let t = targets[i][v].as_mut().expect("available target");
                            let orig = t[k];
                            t[k] = orig + d;
                            let out = loss(&recon, &targets);
                            targets[i][v].as_mut().expect("available target")[k] = orig;
                            out
                        })?;
                    }
                }
            }
        }
        report.instances += 1;
    }
    Ok(report)
}

/// Small widths so every parameter of a fusion model can be probed.
pub fn small_fusion_config(strategy: FusionStrategy, reconstruction: bool) -> FusionConfig {
    FusionConfig {
        strategy,
        embedding_dim: 4,
        extender_hidden: 5,
        extended_dim: 6,
        tensor_dim: 2,
        head_hidden: 5,
        recon_hidden: 4,
        reconstruction,
        lambda: 1.0,
    }
}

struct FusionInstance {
    embeddings: Vec<ModalityVectors>,
    alpha: Vec<Mask>,
    mask: Vec<Mask>,
    times: Vec<f64>,
    events: Vec<bool>,
}

impl FusionInstance {
    fn samples(&self) -> Vec<FusionSample<'_>> {
        (0..self.embeddings.len())
            .map(|i| FusionSample {
                embeddings: &self.embeddings[i],
                alpha: self.alpha[i],
                mask: self.mask[i],
                time: self.times[i],
                event: self.events[i],
            })
            .collect()
    }
}

fn fusion_objective(model: &FusionModel, inst: &FusionInstance) -> Result<(f64, Vec<bool>)> {
    let mut grads = FusionGrads::zeros_like(model);
    let samples = inst.samples();
    let out = batch_loss_and_grad(model, &samples, &mut grads)?;
    let mut pattern = Vec::new();
    for s in &samples {
        pattern.extend(model.kink_pattern(&model.forward_sample(s.embeddings, s.mask)?));
    }
    Ok((out.total, pattern))
}

/// Total loss (Cox plus weighted reconstruction) against every parameter and every embedding input.
pub fn check_total_loss(
    strategy: FusionStrategy,
    reconstruction: bool,
    opts: &GradCheckOptions,
) -> Result<CheckReport> {
    let name = format!(
        "total loss: {strategy}{}",
        if reconstruction {
            " + reconstruction"
        } else {
            ""
        }
    );
    let mut report = CheckReport::new(&name, opts);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, fxhash(&name)));
    for inst_no in 0..opts.instances {
        let mut cfg = small_fusion_config(strategy, reconstruction);
        cfg.lambda = rng.random_range(0.5..2.0);
        let mut model = FusionModel::new(cfg, derive_seed(opts.seed, inst_no as u64))?;
        for k in 0..model.param_count() {
            // random perturbation so biases are nonzero
            *model.param_mut(k).expect("in range") += 0.05 * rng.sample::<f64, _>(StandardNormal);
        }
        let n = rng.random_range(2..=8);
        let e = model.embedding_dim();
        let alpha: Vec<Mask> = (0..n).map(|_| random_mask(&mut rng)).collect();
        let mask: Vec<Mask> = alpha.iter().map(|&a| random_subset(&mut rng, a)).collect();
        let (_, times, events) = random_survival(&mut rng, n);
        let embeddings = alpha
            .iter()
            .map(|a| std::array::from_fn(|v| a.flags()[v].then(|| normal_vec(&mut rng, e, 1.0))))
            .collect();
        let mut inst = FusionInstance {
            embeddings,
            alpha,
            mask,
            times,
            events,
        };

        let mut grads = FusionGrads::zeros_like(&model);
        let out = batch_loss_and_grad(&model, &inst.samples(), &mut grads)?;
        let analytic = grads.flatten();
        let (_, base) = fusion_objective(&model, &inst)?;

        for k in coords_to_check(analytic.len(), opts.max_coords * 4, &mut rng) {
            probe(&mut report, opts, analytic[k], &base, |d| {
                let orig = *model.param_mut(k).expect("in range");
                *model.param_mut(k).expect("in range") = orig + d;
                let r = fusion_objective(&model, &inst);
                *model.param_mut(k).expect("in range") = orig;
                r
            })?;
        }
        for i in 0..n {
            for m in ModalityId::ALL {
                let v = m.index();
                if !inst.alpha[i].get(m) {
                    continue;
                }
                let g = out.embedding_grads[i][v]
                    .clone()
                    .unwrap_or_else(|| vec![0.0; e]);
                for (k, &gk) in g.iter().enumerate() {
                    probe(&mut report, opts, gk, &base, |d| {
                        let x = inst.embeddings[i][v].as_mut().expect("available");
                        let orig = x[k];
                        x[k] = orig + d;
                        let r = fusion_objective(&model, &inst);
                        inst.embeddings[i][v].as_mut().expect("available")[k] = orig;
                        r
                    })?;
                }
            }
        }
        report.instances += 1;
    }
    Ok(report)
}

/// Every network shape the stage-1 encoders and fusion models use, at full size.
pub fn production_shapes(
    raw_dims: [usize; NUM_MODALITIES],
    embedding_dim: usize,
) -> Vec<(String, Vec<usize>, Vec<Activation>)> {
    use Activation::*;
    let mut out = Vec::new();
    let mut raws = raw_dims.to_vec();
    raws.sort_unstable();
    raws.dedup();
    for r in raws {
        out.push((
            format!("dense: encoder {r}-{embedding_dim}"),
            vec![r, embedding_dim],
            vec![Selu],
        ));
    }
    out.push((
        format!("dense: stage-1 head {embedding_dim}-1"),
        vec![embedding_dim, 1],
        vec![Identity],
    ));
    let base = FusionConfig::new(FusionStrategy::MeanVector).with_embedding_dim(embedding_dim);
    out.push((
        "dense: mean-vector extender".into(),
        vec![embedding_dim, base.extender_hidden, base.extended_dim],
        vec![Relu, Identity],
    ));
    out.push((
        "dense: tensor reducer".into(),
        vec![embedding_dim, base.tensor_dim],
        vec![Relu],
    ));
    for s in FusionStrategy::ALL {
        let fused = FusionConfig {
            strategy: s,
            ..base.clone()
        }
        .fused_dim();
        let name = format!("dense: hazard head {fused}-{}-1", base.head_hidden);
        if !out.iter().any(|(n, _, _)| *n == name) {
            out.push((name, vec![fused, base.head_hidden, 1], vec![Relu, Identity]));
        }
        let recon_out = NUM_MODALITIES * embedding_dim;
        let name = format!(
            "dense: recon head {fused}-{}-{recon_out}",
            base.recon_hidden
        );
        if !out.iter().any(|(n, _, _)| *n == name) {
            out.push((
                name,
                vec![fused, base.recon_hidden, recon_out],
                vec![Relu, Identity],
            ));
        }
    }
    out
}

/// The full suite: every production network shape, random nets, Cox,
/// reconstruction and total loss for each strategy with and without reconstruction.
pub fn run_suite(opts: &GradCheckOptions) -> Result<Vec<CheckReport>> {
    let mut reports = vec![check_random_nets(opts)?];
    for (name, dims, acts) in production_shapes([24, 24, 80, 9], 32) {
        reports.push(check_dense_net(&name, &dims, &acts, opts)?);
    }
    reports.push(check_cox(opts)?);
    reports.push(check_recon(opts)?);
    for s in FusionStrategy::ALL {
        for recon in [false, true] {
            reports.push(check_total_loss(s, recon, opts)?);
        }
    }
    Ok(reports)
}

/// Stable string hash used to give each check its own random stream.
fn fxhash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}
