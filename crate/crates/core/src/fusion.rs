//! Stage 2: combine whichever modality embeddings a patient has, predict a
//! hazard, and optionally reconstruct every originally observed embedding.
//!
//! Three fusion operators are supported:
//!
//! * **Concatenation**: the four embeddings laid side by side in modality
//!   order; absent slots are zero-filled.
//! * **Mean vector**: each present embedding goes through its modality's
//!   extender (`emb -> 64 -> 128`, ReLU then identity) and the extended
//!   vectors are averaged.
//! * **Tensor fusion**: each present embedding is reduced (`emb -> 8`, ReLU),
//!   a constant 1 is appended, and the four 9-vectors are combined with a
//!   Kronecker product (`9^4 = 6561` features). An absent modality
//!   contributes `(0, ..., 0, 1)`, which keeps the other modalities' terms.
//!
//! The fused vector feeds a two-layer hazard head and, when enabled, a
//! reconstruction head (`fused -> 64 -> 4 * emb`).

use std::fmt;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::cohort::{Mask, ModalityId, NUM_MODALITIES};
use crate::config::derive_seed;
use crate::error::{Error, Result};
use crate::nn::{Activation, DenseNet, GradientSet, OptimizerKind, OptimizerState, Tape};
use crate::survival::{cox_loss_and_grad, SurvivalBatch};

/// Optional per-modality vectors in fixed modality order.
pub type ModalityVectors = [Option<Vec<f64>>; NUM_MODALITIES];

/// Reconstructed embedding for every modality.
pub type Reconstruction = [Vec<f64>; NUM_MODALITIES];

/// Lower bound on the norm when differentiating `||x - x~||`.
pub const RECON_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionStrategy {
    Concatenation,
    MeanVector,
    TensorFusion,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 3] = [
        FusionStrategy::Concatenation,
        FusionStrategy::MeanVector,
        FusionStrategy::TensorFusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::Concatenation => "concatenation",
            FusionStrategy::MeanVector => "mean-vector",
            FusionStrategy::TensorFusion => "tensor-fusion",
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "concat" | "concatenation" => Ok(FusionStrategy::Concatenation),
            "mean" | "mean-vector" | "meanvector" | "mmd" => Ok(FusionStrategy::MeanVector),
            "tensor" | "tensor-fusion" | "kronecker" => Ok(FusionStrategy::TensorFusion),
            other => Err(Error::Config(format!("unknown fusion strategy {other:?}"))),
        }
    }
}

/// Widths of every fusion sub-network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub strategy: FusionStrategy,
    pub embedding_dim: usize,
    pub extender_hidden: usize,
    pub extended_dim: usize,
    pub tensor_dim: usize,
    pub head_hidden: usize,
    pub recon_hidden: usize,
    pub reconstruction: bool,
    pub lambda: f64,
}

impl FusionConfig {
    pub fn new(strategy: FusionStrategy) -> Self {
        FusionConfig {
            strategy,
            embedding_dim: 32,
            extender_hidden: 64,
            extended_dim: 128,
            tensor_dim: 8,
            head_hidden: 64,
            recon_hidden: 64,
            reconstruction: false,
            lambda: 1.0,
        }
    }

    pub fn with_reconstruction(mut self, on: bool) -> Self {
        self.reconstruction = on;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_embedding_dim(mut self, dim: usize) -> Self {
        self.embedding_dim = dim;
        self
    }

    pub fn fused_dim(&self) -> usize {
        match self.strategy {
            FusionStrategy::Concatenation => NUM_MODALITIES * self.embedding_dim,
            FusionStrategy::MeanVector => self.extended_dim,
            FusionStrategy::TensorFusion => (self.tensor_dim + 1).pow(NUM_MODALITIES as u32),
        }
    }

    fn validate(&self) -> Result<()> {
        let dims = [
            self.embedding_dim,
            self.extender_hidden,
            self.extended_dim,
            self.tensor_dim,
            self.head_hidden,
            self.recon_hidden,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("fusion widths must be >= 1".into()));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionModel {
    config: FusionConfig,
    /// Extenders (mean vector) or reducers (tensor fusion), one per modality; empty for concatenation.
    branches: Vec<DenseNet>,
    hazard_head: DenseNet,
    recon_head: Option<DenseNet>,
}

/// Intermediate values of [`FusionModel::fuse`] needed for the backward pass.
#[derive(Clone, Debug)]
pub struct FuseTape {
    mask: Mask,
    branch_tapes: [Option<Tape>; NUM_MODALITIES],
    /// Tensor fusion only: the four `tensor_dim + 1` factors.
    factors: Vec<Vec<f64>>,
}

/// Everything computed for one sample in a forward pass.
#[derive(Clone, Debug)]
pub struct SampleForward {
    pub fused: Vec<f64>,
    pub hazard: f64,
    pub reconstruction: Option<Reconstruction>,
    fuse_tape: FuseTape,
    head_tape: Tape,
    recon_tape: Option<Tape>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionGrads {
    pub branches: Vec<GradientSet>,
    pub head: GradientSet,
    pub recon: Option<GradientSet>,
}

impl FusionGrads {
    pub fn zeros_like(model: &FusionModel) -> Self {
        FusionGrads {
            branches: model.branches.iter().map(GradientSet::zeros_like).collect(),
            head: GradientSet::zeros_like(&model.hazard_head),
            recon: model.recon_head.as_ref().map(GradientSet::zeros_like),
        }
    }

    pub fn reset(&mut self) {
        self.branches.iter_mut().for_each(GradientSet::reset);
        self.head.reset();
        if let Some(r) = &mut self.recon {
            r.reset();
        }
    }

    /// Flattened in [`FusionModel::params`] order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.branches.iter().flat_map(|g| g.iter()).collect();
        out.extend(self.head.iter());
        if let Some(r) = &self.recon {
            out.extend(r.iter());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|g| g.is_finite())
    }
}

impl FusionModel {
    pub fn new(config: FusionConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let e = config.embedding_dim;
        let branches = match config.strategy {
            FusionStrategy::Concatenation => Vec::new(),
            FusionStrategy::MeanVector => ModalityId::ALL
                .iter()
                .map(|m| {
                    DenseNet::new(
                        &[e, config.extender_hidden, config.extended_dim],
                        &[Activation::Relu, Activation::Identity],
                        derive_seed(seed, 10 + m.index() as u64),
                    )
                })
                .collect::<Result<_>>()?,
            FusionStrategy::TensorFusion => ModalityId::ALL
                .iter()
                .map(|m| {
                    DenseNet::new(
                        &[e, config.tensor_dim],
                        &[Activation::Relu],
                        derive_seed(seed, 10 + m.index() as u64),
                    )
                })
                .collect::<Result<_>>()?,
        };
        let fused = config.fused_dim();
        let hazard_head = DenseNet::new(
            &[fused, config.head_hidden, 1],
            &[Activation::Relu, Activation::Identity],
            derive_seed(seed, 20),
        )?;
        let recon_head = if config.reconstruction {
            Some(DenseNet::new(
                &[fused, config.recon_hidden, NUM_MODALITIES * e],
                &[Activation::Relu, Activation::Identity],
                derive_seed(seed, 21),
            )?)
        } else {
            None
        };
        Ok(FusionModel {
            config,
            branches,
            hazard_head,
            recon_head,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn strategy(&self) -> FusionStrategy {
        self.config.strategy
    }

    pub fn lambda(&self) -> f64 {
        self.config.lambda
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim
    }

    pub fn fused_dim(&self) -> usize {
        self.config.fused_dim()
    }

    pub fn branches(&self) -> &[DenseNet] {
        &self.branches
    }

    pub fn branch_mut(&mut self, m: ModalityId) -> Option<&mut DenseNet> {
        self.branches.get_mut(m.index())
    }

    pub fn hazard_head(&self) -> &DenseNet {
        &self.hazard_head
    }

    pub fn hazard_head_mut(&mut self) -> &mut DenseNet {
        &mut self.hazard_head
    }

    pub fn recon_head(&self) -> Option<&DenseNet> {
        self.recon_head.as_ref()
    }

    pub fn recon_head_mut(&mut self) -> Option<&mut DenseNet> {
        self.recon_head.as_mut()
    }

    fn nets(&self) -> impl Iterator<Item = &DenseNet> {
        self.branches
            .iter()
            .chain(std::iter::once(&self.hazard_head))
            .chain(self.recon_head.iter())
    }

    fn nets_mut(&mut self) -> impl Iterator<Item = &mut DenseNet> {
        self.branches
            .iter_mut()
            .chain(std::iter::once(&mut self.hazard_head))
            .chain(self.recon_head.iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.nets().map(DenseNet::param_count).sum()
    }

    /// Branches, then hazard head, then reconstruction head.
    pub fn params(&self) -> Vec<f64> {
        self.nets().flat_map(|n| n.params()).collect()
    }

    /// Mutable access to one parameter by its index in [`FusionModel::params`].
    pub fn param_mut(&mut self, mut k: usize) -> Option<&mut f64> {
        for net in self.nets_mut() {
            let n = net.param_count();
            if k < n {
                return net.param_mut(k);
            }
            k -= n;
        }
        None
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Dimension {
                context: "fusion parameter vector",
                expected: self.param_count(),
                got: params.len(),
            });
        }
        let mut offset = 0;
        for net in self.nets_mut() {
            let n = net.param_count();
            net.set_params(&params[offset..offset + n])?;
            offset += n;
        }
        Ok(())
    }

    pub fn fuse(&self, embeddings: &ModalityVectors, mask: Mask) -> Result<(Vec<f64>, FuseTape)> {
        self.fuse_in_order(embeddings, mask, &ModalityId::ALL)
    }

    /// [`FusionModel::fuse`] with the per-modality branches evaluated in `order`.
    /// The result does not depend on `order`; combination always runs in modality order.
    pub fn fuse_in_order(
        &self,
        embeddings: &ModalityVectors,
        mask: Mask,
        order: &[ModalityId],
    ) -> Result<(Vec<f64>, FuseTape)> {
        if mask.is_empty() {
            return Err(Error::Config(
                "fusion needs at least one present modality".into(),
            ));
        }
        let e = self.config.embedding_dim;
        let mut inputs: [Option<&[f64]>; NUM_MODALITIES] = [None; NUM_MODALITIES];
        for m in mask.present() {
            let x = embeddings[m.index()].as_deref().ok_or_else(|| {
                Error::Config(format!("mask marks {m} present but no embedding given"))
            })?;
            if x.len() != e {
                return Err(Error::Dimension {
                    context: "fusion embedding",
                    expected: e,
                    got: x.len(),
                });
            }
            inputs[m.index()] = Some(x);
        }

        let mut branch_out: [Option<Vec<f64>>; NUM_MODALITIES] = Default::default();
        let mut branch_tapes: [Option<Tape>; NUM_MODALITIES] = Default::default();
        if !self.branches.is_empty() {
            for &m in order {
                if let Some(x) = inputs[m.index()] {
                    let (y, tape) = self.branches[m.index()].forward(x)?;
                    branch_out[m.index()] = Some(y);
                    branch_tapes[m.index()] = Some(tape);
                }
            }
        }

        let mut factors = Vec::new();
        let fused = match self.config.strategy {
            FusionStrategy::Concatenation => {
                let mut h = vec![0.0; NUM_MODALITIES * e];
                for (v, x) in inputs.iter().enumerate() {
                    if let Some(x) = x {
                        h[v * e..(v + 1) * e].copy_from_slice(x);
                    }
                }
                h
            }
            FusionStrategy::MeanVector => {
                let mut h = vec![0.0; self.config.extended_dim];
                for y in branch_out.iter().flatten() {
                    for (a, b) in h.iter_mut().zip(y) {
                        *a += b;
                    }
                }
                let k = mask.count() as f64;
                h.iter_mut().for_each(|a| *a /= k);
                h
            }
            FusionStrategy::TensorFusion => {
                let d = self.config.tensor_dim;
                factors = branch_out
                    .iter()
                    .map(|y| {
                        let mut z = y.clone().unwrap_or_else(|| vec![0.0; d]);
                        z.push(1.0);
                        z
                    })
                    .collect();
                kronecker4(&factors)
            }
        };
        Ok((
            fused,
            FuseTape {
                mask,
                branch_tapes,
                factors,
            },
        ))
    }

    /// Back-propagates `d_fused` through the fusion operator and branches.
    /// Returns the gradient with respect to each fused (masked-in) embedding.
    pub fn fuse_backward(
        &self,
        tape: &FuseTape,
        d_fused: &[f64],
        grads: &mut FusionGrads,
    ) -> Result<ModalityVectors> {
        if d_fused.len() != self.fused_dim() {
            return Err(Error::Dimension {
                context: "fused gradient",
                expected: self.fused_dim(),
                got: d_fused.len(),
            });
        }
        let e = self.config.embedding_dim;
        let mut out: ModalityVectors = Default::default();
        match self.config.strategy {
            FusionStrategy::Concatenation => {
                for m in tape.mask.present() {
                    let v = m.index();
                    out[v] = Some(d_fused[v * e..(v + 1) * e].to_vec());
                }
            }
            FusionStrategy::MeanVector => {
                let k = tape.mask.count() as f64;
                let d_ext: Vec<f64> = d_fused.iter().map(|g| g / k).collect();
                for m in tape.mask.present() {
                    let v = m.index();
                    let t = tape.branch_tapes[v]
                        .as_ref()
                        .expect("tape for present modality");
                    out[v] =
                        Some(self.branches[v].backward_into(t, &d_ext, &mut grads.branches[v])?);
                }
            }
            FusionStrategy::TensorFusion => {
                let d_factors = kronecker4_backward(&tape.factors, d_fused);
                let d = self.config.tensor_dim;
                for m in tape.mask.present() {
                    let v = m.index();
                    let t = tape.branch_tapes[v]
                        .as_ref()
                        .expect("tape for present modality");
                    out[v] = Some(self.branches[v].backward_into(
                        t,
                        &d_factors[v][..d],
                        &mut grads.branches[v],
                    )?);
                }
            }
        }
        Ok(out)
    }

    pub fn predict_hazard(&self, fused: &[f64]) -> Result<f64> {
        self.check_fused(fused)?;
        Ok(self.hazard_head.predict(fused)?[0])
    }

    pub fn reconstruct(&self, fused: &[f64]) -> Result<Reconstruction> {
        self.check_fused(fused)?;
        let head = self
            .recon_head
            .as_ref()
            .ok_or_else(|| Error::Config("reconstruction is disabled for this model".into()))?;
        Ok(split_blocks(
            &head.predict(fused)?,
            self.config.embedding_dim,
        ))
    }

    fn check_fused(&self, fused: &[f64]) -> Result<()> {
        if fused.len() != self.fused_dim() {
            return Err(Error::Dimension {
                context: "fused vector",
                expected: self.fused_dim(),
                got: fused.len(),
            });
        }
        Ok(())
    }

    /// Hazard for a record, fusing the modalities in `mask`.
    pub fn risk(&self, embeddings: &ModalityVectors, mask: Mask) -> Result<f64> {
        let (h, _) = self.fuse(embeddings, mask)?;
        self.predict_hazard(&h)
    }

    pub fn forward_sample(
        &self,
        embeddings: &ModalityVectors,
        mask: Mask,
    ) -> Result<SampleForward> {
        let (fused, fuse_tape) = self.fuse(embeddings, mask)?;
        let (y, head_tape) = self.hazard_head.forward(&fused)?;
        let (reconstruction, recon_tape) = match &self.recon_head {
            Some(r) => {
                let (out, t) = r.forward(&fused)?;
                (Some(split_blocks(&out, self.config.embedding_dim)), Some(t))
            }
            None => (None, None),
        };
        Ok(SampleForward {
            fused,
            hazard: y[0],
            reconstruction,
            fuse_tape,
            head_tape,
            recon_tape,
        })
    }

    /// Accumulates parameter gradients for one sample given the loss gradient
    /// with respect to its hazard and (optionally) its reconstruction.
    /// Returns the gradient with respect to the fused embeddings.
    pub fn backward_sample(
        &self,
        fwd: &SampleForward,
        d_hazard: f64,
        d_recon: Option<&Reconstruction>,
        grads: &mut FusionGrads,
    ) -> Result<ModalityVectors> {
        let mut d_fused =
            self.hazard_head
                .backward_into(&fwd.head_tape, &[d_hazard], &mut grads.head)?;
        if let (Some(dr), Some(head), Some(tape), Some(g)) = (
            d_recon,
            self.recon_head.as_ref(),
            fwd.recon_tape.as_ref(),
            grads.recon.as_mut(),
        ) {
            let upstream: Vec<f64> = dr.iter().flatten().copied().collect();
            let d = head.backward_into(tape, &upstream, g)?;
            for (a, b) in d_fused.iter_mut().zip(&d) {
                *a += b;
            }
        }
        self.fuse_backward(&fwd.fuse_tape, &d_fused, grads)
    }

    /// Which side of every ReLU/SELU kink a forward pass landed on.
    pub fn kink_pattern(&self, fwd: &SampleForward) -> Vec<bool> {
        let mut out = Vec::new();
        for (b, t) in self.branches.iter().zip(&fwd.fuse_tape.branch_tapes) {
            if let Some(t) = t {
                b.kink_pattern(t, &mut out);
            }
        }
        self.hazard_head.kink_pattern(&fwd.head_tape, &mut out);
        if let (Some(r), Some(t)) = (&self.recon_head, &fwd.recon_tape) {
            r.kink_pattern(t, &mut out);
        }
        out
    }

    /// Exact parameter count per sub-network.
    pub fn footprint(&self) -> Footprint {
        let mut parts = Vec::new();
        let branch_kind = match self.config.strategy {
            FusionStrategy::TensorFusion => "reducer",
            _ => "extender",
        };
        for (m, b) in ModalityId::ALL.iter().zip(&self.branches) {
            parts.push((format!("{branch_kind}:{m}"), b.param_count()));
        }
        parts.push(("hazard_head".into(), self.hazard_head.param_count()));
        if let Some(r) = &self.recon_head {
            parts.push(("recon_head".into(), r.param_count()));
        }
        Footprint::new(parts)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, "fusion", self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: FusionModel = checkpoint::load(path, "fusion")?;
        m.validate()?;
        Ok(m)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for n in self.nets() {
            n.validate()?;
        }
        let expected_branches = match self.config.strategy {
            FusionStrategy::Concatenation => 0,
            _ => NUM_MODALITIES,
        };
        if self.branches.len() != expected_branches
            || self.hazard_head.input_dim() != self.fused_dim()
            || self.hazard_head.output_dim() != 1
            || self.recon_head.is_some() != self.config.reconstruction
        {
            return Err(Error::Config(
                "fusion model shapes disagree with its configuration".into(),
            ));
        }
        Ok(())
    }
}

/// Per-sub-network parameter counts; bytes assume 8-byte parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    pub parts: Vec<(String, usize)>,
    pub total: usize,
    pub bytes: usize,
}

impl Footprint {
    pub fn new(parts: Vec<(String, usize)>) -> Self {
        let total = parts.iter().map(|(_, n)| n).sum();
        Footprint {
            parts,
            total,
            bytes: total * std::mem::size_of::<f64>(),
        }
    }
}

pub fn model_footprint(model: &FusionModel) -> Footprint {
    model.footprint()
}

fn split_blocks(v: &[f64], e: usize) -> Reconstruction {
    std::array::from_fn(|k| v[k * e..(k + 1) * e].to_vec())
}

/// Flattened 4-way Kronecker product; index `((a * n1 + b) * n2 + c) * n3 + d`.
pub fn kronecker4(f: &[Vec<f64>]) -> Vec<f64> {
    let (f0, f1, f2, f3) = (&f[0], &f[1], &f[2], &f[3]);
    let mut out = Vec::with_capacity(f0.len() * f1.len() * f2.len() * f3.len());
    for &a in f0 {
        for &b in f1 {
            let ab = a * b;
            for &c in f2 {
                let abc = ab * c;
                out.extend(f3.iter().map(|&d| abc * d));
            }
        }
    }
    out
}

fn kronecker4_backward(f: &[Vec<f64>], d_out: &[f64]) -> Vec<Vec<f64>> {
    let (f0, f1, f2, f3) = (&f[0], &f[1], &f[2], &f[3]);
    let mut g: Vec<Vec<f64>> = f.iter().map(|x| vec![0.0; x.len()]).collect();
    let mut idx = 0;
    for (a, &x0) in f0.iter().enumerate() {
        for (b, &x1) in f1.iter().enumerate() {
            for (c, &x2) in f2.iter().enumerate() {
                for (d, &x3) in f3.iter().enumerate() {
                    let go = d_out[idx];
                    idx += 1;
                    if go == 0.0 {
                        continue;
                    }
                    g[0][a] += go * x1 * x2 * x3;
                    g[1][b] += go * x0 * x2 * x3;
                    g[2][c] += go * x0 * x1 * x3;
                    g[3][d] += go * x0 * x1 * x2;
                }
            }
        }
    }
    g
}

/// Modality dropout settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutPolicy {
    pub rate: f64,
    pub enabled: bool,
}

impl Default for DropoutPolicy {
    fn default() -> Self {
        DropoutPolicy {
            rate: 0.5,
            enabled: true,
        }
    }
}

impl DropoutPolicy {
    pub fn new(rate: f64, enabled: bool) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must lie in [0, 1), got {rate}"
            )));
        }
        Ok(DropoutPolicy { rate, enabled })
    }

    pub fn disabled() -> Self {
        DropoutPolicy {
            rate: 0.5,
            enabled: false,
        }
    }
}

/// Drops each available modality with probability `rate`, redrawing whenever
/// nothing would remain. Unavailable modalities stay off.
pub fn modality_dropout<R: Rng + ?Sized>(
    mask: Mask,
    policy: &DropoutPolicy,
    rng: &mut R,
) -> Result<Mask> {
    if mask.is_empty() {
        return Err(Error::Config(
            "modality dropout needs at least one available modality".into(),
        ));
    }
    if !(0.0..1.0).contains(&policy.rate) {
        return Err(Error::Config(format!(
            "dropout rate must lie in [0, 1), got {}",
            policy.rate
        )));
    }
    if !policy.enabled || policy.rate == 0.0 || mask.count() == 1 {
        return Ok(mask);
    }
    loop {
        let mut out = mask;
        for m in mask.present() {
            if rng.random::<f64>() < policy.rate {
                out.set(m, false);
            }
        }
        if !out.is_empty() {
            return Ok(out);
        }
    }
}

/// Masked reconstruction loss: the summed L2 distances over originally
/// available modalities, divided by the total number of available modalities
/// in the batch.
pub fn recon_loss(
    recon: &[Reconstruction],
    targets: &[&ModalityVectors],
    alpha: &[Mask],
) -> Result<f64> {
    Ok(recon_loss_and_grad(recon, targets, alpha)?.0)
}

/// [`recon_loss`] and its gradient with respect to each reconstruction.
/// The gradient with respect to a target is the negation of this.
pub fn recon_loss_and_grad(
    recon: &[Reconstruction],
    targets: &[&ModalityVectors],
    alpha: &[Mask],
) -> Result<(f64, Vec<Reconstruction>)> {
    if recon.len() != targets.len() || recon.len() != alpha.len() {
        return Err(Error::Dimension {
            context: "reconstruction batch",
            expected: recon.len(),
            got: targets.len().min(alpha.len()),
        });
    }
    let normalizer: usize = alpha.iter().map(Mask::count).sum();
    if normalizer == 0 {
        return Err(Error::Config(
            "no available modality in reconstruction batch".into(),
        ));
    }
    let z = normalizer as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(recon.len());
    for ((r, t), a) in recon.iter().zip(targets).zip(alpha) {
        let mut g: Reconstruction = std::array::from_fn(|v| vec![0.0; r[v].len()]);
        for m in a.present() {
            let v = m.index();
            let x = t[v].as_deref().ok_or_else(|| {
                Error::Config(format!("{m} marked available but has no target embedding"))
            })?;
            if x.len() != r[v].len() {
                return Err(Error::Dimension {
                    context: "reconstruction target",
                    expected: r[v].len(),
                    got: x.len(),
                });
            }
            let diff: Vec<f64> = r[v].iter().zip(x).map(|(a, b)| a - b).collect();
            let norm = diff.iter().map(|d| d * d).sum::<f64>().sqrt();
            total += norm;
            let denom = norm.max(RECON_NORM_EPS) * z;
            for (gk, dk) in g[v].iter_mut().zip(&diff) {
                *gk = dk / denom;
            }
        }
        grads.push(g);
    }
    Ok((total / z, grads))
}

pub fn total_loss(cox: f64, recon: f64, lambda: f64) -> f64 {
    cox + lambda * recon
}

/// One training example for the fusion stage.
#[derive(Clone, Copy, Debug)]
pub struct FusionSample<'a> {
    pub embeddings: &'a ModalityVectors,
    /// Original availability; governs the reconstruction loss.
    pub alpha: Mask,
    /// Modalities actually fused (after dropout).
    pub mask: Mask,
    pub time: f64,
    pub event: bool,
}

#[derive(Clone, Debug)]
pub struct BatchOutcome {
    pub cox: f64,
    pub recon: Option<f64>,
    pub total: f64,
    pub hazards: Vec<f64>,
    /// Gradient of the total loss with respect to each sample's embeddings,
    /// including the reconstruction-target path.
    pub embedding_grads: Vec<ModalityVectors>,
}

fn batch_forward(model: &FusionModel, samples: &[FusionSample]) -> Result<Vec<SampleForward>> {
    samples
        .iter()
        .map(|s| model.forward_sample(s.embeddings, s.mask))
        .collect()
}

/// Total loss of a batch without gradients.
pub fn batch_loss(model: &FusionModel, samples: &[FusionSample]) -> Result<f64> {
    let fwd = batch_forward(model, samples)?;
    let hazards: Vec<f64> = fwd.iter().map(|f| f.hazard).collect();
    let times: Vec<f64> = samples.iter().map(|s| s.time).collect();
    let events: Vec<bool> = samples.iter().map(|s| s.event).collect();
    let (cox, _) = cox_loss_and_grad(&SurvivalBatch::new(&hazards, &times, &events)?)?;
    let recon = match model.recon_head {
        Some(_) => {
            let rec: Vec<Reconstruction> =
                fwd.into_iter().map(|f| f.reconstruction.unwrap()).collect();
            let targets: Vec<&ModalityVectors> = samples.iter().map(|s| s.embeddings).collect();
            let alpha: Vec<Mask> = samples.iter().map(|s| s.alpha).collect();
            recon_loss(&rec, &targets, &alpha)?
        }
        None => 0.0,
    };
    Ok(total_loss(cox, recon, model.lambda()))
}

/// Forward and backward pass over a batch; parameter gradients are added into `grads`.
pub fn batch_loss_and_grad(
    model: &FusionModel,
    samples: &[FusionSample],
    grads: &mut FusionGrads,
) -> Result<BatchOutcome> {
    let fwd = batch_forward(model, samples)?;
    let hazards: Vec<f64> = fwd.iter().map(|f| f.hazard).collect();
    let times: Vec<f64> = samples.iter().map(|s| s.time).collect();
    let events: Vec<bool> = samples.iter().map(|s| s.event).collect();
    let (cox, d_hazard) = cox_loss_and_grad(&SurvivalBatch::new(&hazards, &times, &events)?)?;
    let lambda = model.lambda();

    let recon = match model.recon_head {
        Some(_) => {
            let rec: Vec<Reconstruction> = fwd
                .iter()
                .map(|f| f.reconstruction.clone().expect("recon head present"))
                .collect();
            let targets: Vec<&ModalityVectors> = samples.iter().map(|s| s.embeddings).collect();
            let alpha: Vec<Mask> = samples.iter().map(|s| s.alpha).collect();
            Some(recon_loss_and_grad(&rec, &targets, &alpha)?)
        }
        None => None,
    };

    let mut embedding_grads = Vec::with_capacity(samples.len());
    for (i, (f, s)) in fwd.iter().zip(samples).enumerate() {
        let d_rec: Option<Reconstruction> = recon
            .as_ref()
            .map(|(_, g)| std::array::from_fn(|v| g[i][v].iter().map(|x| lambda * x).collect()));
        let mut d_emb = model.backward_sample(f, d_hazard[i], d_rec.as_ref(), grads)?;
        if let Some(dr) = &d_rec {
            for m in s.alpha.present() {
                let v = m.index();
                let slot = d_emb[v].get_or_insert_with(|| vec![0.0; dr[v].len()]);
                for (a, b) in slot.iter_mut().zip(&dr[v]) {
                    *a -= b;
                }
            }
        }
        embedding_grads.push(d_emb);
    }
    let recon_value = recon.map(|(l, _)| l);
    Ok(BatchOutcome {
        cox,
        recon: recon_value,
        total: total_loss(cox, recon_value.unwrap_or(0.0), lambda),
        hazards,
        embedding_grads,
    })
}

/// One optimizer per fusion sub-network.
#[derive(Clone, Debug)]
pub struct FusionOptimizer {
    branches: Vec<OptimizerState>,
    head: OptimizerState,
    recon: Option<OptimizerState>,
}

impl FusionOptimizer {
    pub fn new(kind: OptimizerKind, lr: f64, model: &FusionModel) -> Result<Self> {
        Ok(FusionOptimizer {
            branches: model
                .branches
                .iter()
                .map(|b| OptimizerState::new(kind, lr, b))
                .collect::<Result<_>>()?,
            head: OptimizerState::new(kind, lr, &model.hazard_head)?,
            recon: model
                .recon_head
                .as_ref()
                .map(|r| OptimizerState::new(kind, lr, r))
                .transpose()?,
        })
    }

    pub fn step(&mut self, model: &mut FusionModel, grads: &FusionGrads) -> Result<()> {
        if !grads.is_finite() {
            return Err(Error::Numerical(
                "non-finite fusion gradient, step refused".into(),
            ));
        }
        for ((opt, net), g) in self
            .branches
            .iter_mut()
            .zip(&mut model.branches)
            .zip(&grads.branches)
        {
            opt.step(net, g)?;
        }
        self.head.step(&mut model.hazard_head, &grads.head)?;
        if let (Some(opt), Some(net), Some(g)) =
            (&mut self.recon, &mut model.recon_head, &grads.recon)
        {
            opt.step(net, g)?;
        }
        Ok(())
    }
}

/// Dropout stream for one training run.
pub fn dropout_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xD50))
}
