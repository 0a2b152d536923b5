//! Fusion of the raw warp updates predicted by every level of a stack so
//! far into the update applied at the current level.
//!
//! Updates are passed newest first: `[dp'_t, dp'_(t-1), ..., dp'_1]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, ParamGroup, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{WarpParams, WARP_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    /// dense to `n*t*kf`, tanh, dropout, dense to `n`, tanh.
    ExpansionContraction,
    /// dense to `n`, tanh.
    Bottleneck,
    /// Returns the newest update unchanged.
    PassThrough,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expansion" => Ok(FusionMode::ExpansionContraction),
            "bottleneck" => Ok(FusionMode::Bottleneck),
            "passthrough" => Ok(FusionMode::PassThrough),
            other => Err(Error::Config(format!(
                "unknown fusion mode '{other}' (expected expansion, bottleneck or passthrough)"
            ))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionMode::ExpansionContraction => "expansion",
            FusionMode::Bottleneck => "bottleneck",
            FusionMode::PassThrough => "passthrough",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct DenseIds {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionBlock {
    mode: FusionMode,
    level: usize,
    n: usize,
    kf: usize,
    keep_prob: f64,
    layers: Vec<DenseIds>,
}

/// Weights and biases of an expansion-contraction block:
/// `(n*t)*(n*t*kf) + n*t*kf + (n*t*kf)*n + n`.
pub fn fusion_param_count(n: usize, t: usize, kf: usize) -> usize {
    let wide = n * t * kf;
    (n * t) * wide + wide + wide * n + n
}

fn lecun_tensor<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let normal = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive std");
    let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
    Tensor::new(vec![fan_in, fan_out], data).expect("shape product matches")
}

impl FusionBlock {
    /// Block for `level` (its arity), registering parameters in `store`.
    ///
    /// Weights start random and biases at zero. Because the inputs (raw
    /// updates from zero-initialized heads) start at zero, the initial fused
    /// update is still exactly zero, while gradients can reach the heads.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        mode: FusionMode,
        level: usize,
        kf: usize,
        keep_prob: f64,
        store: &mut ParamStore,
        prefix: &str,
        rng: &mut R,
    ) -> Result<Self> {
        let n = WARP_DIM;
        if level == 0 || kf == 0 {
            return Err(Error::Config(format!("fusion level ({level}) and kf ({kf}) must be positive")));
        }
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::Config(format!("keep probability {keep_prob} outside (0, 1]")));
        }
        let widths: Vec<(usize, usize)> = match mode {
            FusionMode::ExpansionContraction => vec![(n * level, n * level * kf), (n * level * kf, n)],
            FusionMode::Bottleneck => vec![(n * level, n)],
            FusionMode::PassThrough => vec![],
        };
        let layers = widths
            .into_iter()
            .enumerate()
            .map(|(i, (fan_in, fan_out))| DenseIds {
                weight: store.add(
                    format!("{prefix}.d{i}.weight"),
                    ParamGroup::Alignment,
                    lecun_tensor(fan_in, fan_out, rng),
                ),
                bias: store.add(format!("{prefix}.d{i}.bias"), ParamGroup::Alignment, Tensor::zeros(&[fan_out])),
            })
            .collect();
        Ok(FusionBlock {
            mode,
            level,
            n,
            kf,
            keep_prob,
            layers,
        })
    }

    pub fn mode(&self) -> FusionMode {
        self.mode
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|d| [d.weight, d.bias]).collect()
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.param_ids().into_iter().map(|id| store.get(id).numel()).sum()
    }

    /// Sets every weight and bias of the block to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        for id in self.param_ids() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Records the fusion of `updates` (each `[N, 8]`, newest first).
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        updates: &[Var],
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if updates.len() != self.level {
            return Err(Error::Usage(format!(
                "fusion block of level {} received {} updates",
                self.level,
                updates.len()
            )));
        }
        if self.mode == FusionMode::PassThrough {
            return Ok(updates[0]);
        }
        let mut x = g.concat_cols(updates)?;
        let last = self.layers.len() - 1;
        for (i, d) in self.layers.iter().enumerate() {
            let w = g.param(store, d.weight);
            let b = g.param(store, d.bias);
            let y = g.dense(x, w, b)?;
            x = g.tanh(y);
            if i < last {
                x = g.dropout(x, self.keep_prob, training, rng)?;
            }
        }
        Ok(x)
    }

    /// Value-level fusion of single warp updates (newest first).
    pub fn fuse<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        updates: &[WarpParams],
        training: bool,
        rng: &mut R,
    ) -> Result<WarpParams> {
        let mut g = Graph::new();
        let vars: Vec<Var> = updates
            .iter()
            .map(|p| g.constant(Tensor::new(vec![1, self.n], p.0.to_vec()).expect("8 values")))
            .collect();
        let out = self.forward(&mut g, store, &vars, training, rng)?;
        WarpParams::from_slice(g.data(out))
    }

    pub fn expansion_rate(&self) -> usize {
        self.kf
    }
}
