//! An optional alignment stack followed by an optional classifier, and the
//! two training objectives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, ParamGroup, ParamStore, Tensor, Var};
use crate::data::{Batch, Corners};
use crate::error::{Error, Result};
use crate::geometry::WarpParams;
use crate::netbuilder::{build_network, ArchSpec, NetRole, Network};
use crate::stacks::{AlignResult, AlignmentStack, StackConfig, StackKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    /// Softmax cross-entropy of the classifier on the aligned image.
    Classify,
    /// Smooth-L1 between predicted and ground-truth corner coordinates.
    Corners,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(Task::Classify),
            "corners" => Ok(Task::Corners),
            other => Err(Error::Config(format!("unknown task '{other}'"))),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Task::Classify => "classify",
            Task::Corners => "corners",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub stack: Option<StackConfig>,
    pub classifier: Option<ArchSpec>,
    pub channels: usize,
    pub raster: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub store: ParamStore,
    pub stack: Option<AlignmentStack>,
    pub classifier: Option<Network>,
    channels: usize,
    raster: (usize, usize),
}

/// Logits and alignment of a forward pass.
pub struct ForwardVars {
    pub logits: Option<Var>,
    pub final_params: Option<Var>,
}

impl Model {
    pub fn build<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<Model> {
        if spec.stack.is_none() && spec.classifier.is_none() {
            return Err(Error::Config("a model needs a stack, a classifier, or both".into()));
        }
        let mut store = ParamStore::new();
        let stack = spec
            .stack
            .as_ref()
            .map(|c| AlignmentStack::build(c, spec.channels, spec.raster, &mut store, rng))
            .transpose()?;
        let classifier = spec
            .classifier
            .as_ref()
            .map(|a| {
                build_network(
                    a,
                    spec.channels,
                    spec.raster,
                    NetRole::Classifier,
                    &mut store,
                    "clf",
                    ParamGroup::Classifier,
                    rng,
                )
            })
            .transpose()?;
        Ok(Model {
            store,
            stack,
            classifier,
            channels: spec.channels,
            raster: spec.raster,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn raster(&self) -> (usize, usize) {
        self.raster
    }

    pub fn alignment_param_count(&self) -> usize {
        self.stack.as_ref().map_or(0, |s| s.count_parameters(&self.store))
    }

    pub fn classifier_param_count(&self) -> usize {
        self.classifier.as_ref().map_or(0, |c| c.param_count(&self.store))
    }

    pub fn forward<R: Rng + ?Sized>(&self, g: &mut Graph, images: Var, training: bool, rng: &mut R) -> Result<ForwardVars> {
        let (aligned, final_params) = match &self.stack {
            Some(stack) => {
                let out = stack.forward(g, &self.store, images, None, training, rng)?;
                (out.warped, Some(out.final_params))
            }
            None => (images, None),
        };
        let logits = self
            .classifier
            .as_ref()
            .map(|c| c.forward(g, &self.store, aligned))
            .transpose()?;
        Ok(ForwardVars { logits, final_params })
    }

    /// Records the training objective for `batch`.
    pub fn loss<R: Rng + ?Sized>(&self, g: &mut Graph, batch: &Batch, task: Task, training: bool, rng: &mut R) -> Result<Var> {
        let images = g.constant(batch.images.clone());
        let out = self.forward(g, images, training, rng)?;
        match task {
            Task::Classify => {
                let logits = out
                    .logits
                    .ok_or_else(|| Error::Usage("the classification task needs a classifier".into()))?;
                g.softmax_xent(logits, &batch.labels)
            }
            Task::Corners => {
                let p = out
                    .final_params
                    .ok_or_else(|| Error::Usage("the corner task needs an alignment stack".into()))?;
                if self.stack.as_ref().is_some_and(|s| s.kind() == StackKind::Stn) {
                    return Err(Error::Usage(
                        "the corner task needs a parameter-propagating stack (cstn, icstn or destnet)".into(),
                    ));
                }
                let canonical = shared_canonical(batch)?;
                let (h, w) = self.raster;
                let pred = g.project_points(p, &canonical, w, h)?;
                let target: Vec<f64> = batch.gt_corners.iter().flatten().flatten().copied().collect();
                let target = g.constant(Tensor::new(vec![batch.len(), 4, 2], target)?);
                g.smooth_l1(pred, target)
            }
        }
    }

    /// Inference logits `[N, K]`.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut g, x, false, &mut rng)?;
        let logits = out
            .logits
            .ok_or_else(|| Error::Usage("model has no classifier".into()))?;
        Ok(g.value(logits).clone())
    }

    /// Inference alignment; `None` for a model without a stack.
    pub fn align(&self, images: &Tensor) -> Result<Option<AlignResult>> {
        self.stack
            .as_ref()
            .map(|s| s.align(&self.store, images, None))
            .transpose()
    }

    /// Canonical corners mapped through each predicted warp.
    pub fn predict_corners(&self, batch: &Batch) -> Result<Vec<Corners>> {
        let (h, w) = self.raster;
        let params: Vec<WarpParams> = match self.align(&batch.images)? {
            Some(r) => r.final_params,
            None => vec![WarpParams::IDENTITY; batch.len()],
        };
        let canonical = shared_canonical(batch)?;
        let mut g = Graph::new();
        let flat: Vec<f64> = params.iter().flat_map(|p| p.0).collect();
        let p = g.constant(Tensor::new(vec![params.len(), 8], flat)?);
        let pts = g.project_points(p, &canonical, w, h)?;
        Ok(g.data(pts)
            .chunks(8)
            .map(|c| [[c[0], c[1]], [c[2], c[3]], [c[4], c[5]], [c[6], c[7]]])
            .collect())
    }
}

fn shared_canonical(batch: &Batch) -> Result<Vec<[f64; 2]>> {
    let first = batch.canonical.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    if batch.canonical.iter().any(|c| c != first) {
        return Err(Error::Data("samples in a batch must share their reference corners".into()));
    }
    Ok(first.to_vec())
}
