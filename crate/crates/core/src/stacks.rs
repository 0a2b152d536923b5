//! Alignment stacks: STN (image propagating), CSTN and ICSTN (additive
//! parameter propagation), and DeSTNet (fused parameter propagation).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamGroup, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusion::{FusionBlock, FusionMode};
use crate::geometry::{params_to_homography, Homography, WarpParams, WARP_DIM};
use crate::netbuilder::{build_network, ArchSpec, NetRole, Network};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StackKind {
    Stn,
    Cstn,
    Icstn,
    Destnet,
}

impl std::str::FromStr for StackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stn" => Ok(StackKind::Stn),
            "cstn" => Ok(StackKind::Cstn),
            "icstn" => Ok(StackKind::Icstn),
            "destnet" => Ok(StackKind::Destnet),
            other => Err(Error::Config(format!("unknown stack kind '{other}'"))),
        }
    }
}

impl std::fmt::Display for StackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StackKind::Stn => "stn",
            StackKind::Cstn => "cstn",
            StackKind::Icstn => "icstn",
            StackKind::Destnet => "destnet",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackConfig {
    pub kind: StackKind,
    pub levels: usize,
    /// Localization network; must end in `FC(8)`.
    pub arch: ArchSpec,
    /// DeSTNet only.
    pub fusion: FusionMode,
    pub kf: usize,
    pub keep_prob: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentStack {
    kind: StackKind,
    levels: usize,
    channels: usize,
    raster: (usize, usize),
    loc_nets: Vec<Network>,
    fusions: Vec<FusionBlock>,
}

/// Graph handles produced by [`AlignmentStack::forward`].
#[derive(Clone, Debug)]
pub struct AlignVars {
    /// `[N, 8]`.
    pub final_params: Var,
    pub per_level_params: Vec<Var>,
    /// Input warped by the final parameters, `[N, C, H, W]`.
    pub warped: Var,
    pub per_level_warped: Vec<Var>,
}

/// Values of an alignment pass, one entry per batch sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignResult {
    pub final_params: Vec<WarpParams>,
    /// `per_level_params[t][n]`.
    pub per_level_params: Vec<Vec<WarpParams>>,
    pub warped: Tensor,
    pub per_level_warped: Vec<Tensor>,
}

impl AlignmentStack {
    pub fn build<R: Rng + ?Sized>(
        cfg: &StackConfig,
        channels: usize,
        raster: (usize, usize),
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.levels == 0 {
            return Err(Error::Config("a stack needs at least one level".into()));
        }
        if cfg.arch.output_width() != Some(WARP_DIM) {
            return Err(Error::Config(format!(
                "localization architecture '{}' must end in FC({WARP_DIM})",
                cfg.arch
            )));
        }
        let nets = if cfg.kind == StackKind::Icstn { 1 } else { cfg.levels };
        let loc_nets = (0..nets)
            .map(|t| {
                build_network(
                    &cfg.arch,
                    channels,
                    raster,
                    NetRole::Localization,
                    store,
                    &format!("loc{}", t + 1),
                    ParamGroup::Alignment,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let fusions = if cfg.kind == StackKind::Destnet {
            (1..=cfg.levels)
                .map(|t| FusionBlock::new(cfg.fusion, t, cfg.kf, cfg.keep_prob, store, &format!("fusion{t}"), rng))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(AlignmentStack {
            kind: cfg.kind,
            levels: cfg.levels,
            channels,
            raster,
            loc_nets,
            fusions,
        })
    }

    pub fn kind(&self) -> StackKind {
        self.kind
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn raster(&self) -> (usize, usize) {
        self.raster
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn loc_nets(&self) -> &[Network] {
        &self.loc_nets
    }

    pub fn fusions(&self) -> &[FusionBlock] {
        &self.fusions
    }

    fn loc_net(&self, level: usize) -> &Network {
        &self.loc_nets[if self.kind == StackKind::Icstn { 0 } else { level }]
    }

    /// Total learnable scalars of localization nets and fusion blocks.
    pub fn count_parameters(&self, store: &ParamStore) -> usize {
        self.loc_nets.iter().map(|n| n.param_count(store)).sum::<usize>()
            + self.fusions.iter().map(|f| f.param_count(store)).sum::<usize>()
    }

    fn warp(g: &mut Graph, image: Var, params: Var) -> Result<Var> {
        let s = g.shape(image).to_vec();
        let grid = g.warp_grid(params, s[2], s[3])?;
        g.bilinear_sample(image, grid)
    }

    /// Records the alignment of `image` (`[N,C,H,W]`). `p_init` is `[N,8]`;
    /// `None` means the identity, in which case the first level sees the
    /// image itself (identity resampling is exact, so this only skips work).
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: Var,
        p_init: Option<Var>,
        training: bool,
        rng: &mut R,
    ) -> Result<AlignVars> {
        let s = g.shape(image).to_vec();
        if s.len() != 4 || s[1] != self.channels || (s[2], s[3]) != self.raster {
            return Err(Error::dim(
                "alignment stack",
                format!(
                    "input {s:?} does not match [N,{},{},{}]",
                    self.channels, self.raster.0, self.raster.1
                ),
            ));
        }
        if let Some(p) = p_init {
            if g.shape(p) != [s[0], WARP_DIM] {
                return Err(Error::dim(
                    "alignment stack",
                    format!("p_init {:?} is not [{}, 8]", g.shape(p), s[0]),
                ));
            }
        }
        match self.kind {
            StackKind::Stn => self.stn_forward(g, store, image, p_init),
            _ => self.propagate_params(g, store, image, p_init, training, rng),
        }
    }

    /// Each level warps the current (already warped) image. The reported
    /// parameters are the matrix composition of all levels so far, which is
    /// the single warp equivalent to the chain (values only, no gradient).
    fn stn_forward(&self, g: &mut Graph, store: &ParamStore, image: Var, p_init: Option<Var>) -> Result<AlignVars> {
        let n = g.shape(image)[0];
        let mut current = match p_init {
            Some(p) => Self::warp(g, image, p)?,
            None => image,
        };
        let mut composed: Vec<Homography> = match p_init {
            Some(p) => g
                .data(p)
                .chunks(WARP_DIM)
                .map(|c| params_to_homography(&WarpParams::from_slice(c)?))
                .collect::<Result<_>>()?,
            None => vec![Homography::IDENTITY; n],
        };
        let mut per_level_params = Vec::with_capacity(self.levels);
        let mut per_level_warped = Vec::with_capacity(self.levels);
        for t in 0..self.levels {
            let dp = self.loc_net(t).forward(g, store, current)?;
            current = Self::warp(g, current, dp)?;
            let mut flat = Vec::with_capacity(n * WARP_DIM);
            for (h, chunk) in composed.iter_mut().zip(g.data(dp).chunks(WARP_DIM)) {
                *h = h.mul(&params_to_homography(&WarpParams::from_slice(chunk)?)?).normalized()?;
                flat.extend_from_slice(&h.to_params()?.0);
            }
            per_level_params.push(g.constant(Tensor::new(vec![n, WARP_DIM], flat)?));
            per_level_warped.push(current);
        }
        Ok(AlignVars {
            final_params: *per_level_params.last().expect("at least one level"),
            per_level_params,
            warped: current,
            per_level_warped,
        })
    }

    /// CSTN / ICSTN / DeSTNet: every level looks at the original image warped
    /// by the running parameters; updates are added in parameter space.
    fn propagate_params<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        image: Var,
        p_init: Option<Var>,
        training: bool,
        rng: &mut R,
    ) -> Result<AlignVars> {
        let n = g.shape(image)[0];
        let mut p = match p_init {
            Some(p) => p,
            None => g.constant(Tensor::zeros(&[n, WARP_DIM])),
        };
        let mut level_input = match p_init {
            Some(p) => Self::warp(g, image, p)?,
            None => image,
        };
        let mut raw: Vec<Var> = Vec::with_capacity(self.levels);
        let mut per_level_params = Vec::with_capacity(self.levels);
        let mut per_level_warped = Vec::with_capacity(self.levels);
        for t in 0..self.levels {
            let raw_update = self.loc_net(t).forward(g, store, level_input)?;
            let update = if self.kind == StackKind::Destnet {
                raw.insert(0, raw_update);
                self.fusions[t].forward(g, store, &raw, training, rng)?
            } else {
                raw_update
            };
            p = g.add(p, update)?;
            per_level_params.push(p);
            level_input = Self::warp(g, image, p)?;
            per_level_warped.push(level_input);
        }
        Ok(AlignVars {
            final_params: p,
            per_level_params,
            warped: level_input,
            per_level_warped,
        })
    }

    /// Inference-mode alignment of a batch.
    pub fn align(&self, store: &ParamStore, image: &Tensor, p_init: Option<&[WarpParams]>) -> Result<AlignResult> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let p = match p_init {
            Some(ps) => {
                let flat: Vec<f64> = ps.iter().flat_map(|p| p.0).collect();
                Some(g.constant(Tensor::new(vec![ps.len(), WARP_DIM], flat)?))
            }
            None => None,
        };
        // Inference never draws from the dropout stream.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vars = self.forward(&mut g, store, x, p, false, &mut rng)?;
        let params = |v: Var| -> Result<Vec<WarpParams>> {
            g.data(v).chunks(WARP_DIM).map(WarpParams::from_slice).collect()
        };
        Ok(AlignResult {
            final_params: params(vars.final_params)?,
            per_level_params: vars.per_level_params.iter().map(|&v| params(v)).collect::<Result<_>>()?,
            warped: g.value(vars.warped).clone(),
            per_level_warped: vars.per_level_warped.iter().map(|&v| g.value(v).clone()).collect(),
        })
    }
}
