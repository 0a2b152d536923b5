use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::perturb::{perturb, Corners, PerturbConfig, PerturbSample};
use super::Dataset;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::geometry::Homography;

/// Where batch samples come from.
#[derive(Clone, Debug)]
pub enum SampleSource {
    /// Clean images perturbed afresh each time they are drawn.
    OnTheFly { dataset: Dataset, cfg: PerturbConfig },
    /// A pre-generated set (synthetic documents, frozen test sets).
    Fixed(Vec<PerturbSample>),
}

impl SampleSource {
    pub fn len(&self) -> usize {
        match self {
            SampleSource::OnTheFly { dataset, .. } => dataset.len(),
            SampleSource::Fixed(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(channels, height, width)` of every sample.
    pub fn sample_shape(&self) -> Option<(usize, usize, usize)> {
        match self {
            SampleSource::OnTheFly { dataset, .. } => {
                let s = dataset.images.shape();
                Some((s[1], s[2], s[3]))
            }
            SampleSource::Fixed(s) => s.first().map(|p| {
                let sh = p.image.shape();
                (sh[0], sh[1], sh[2])
            }),
        }
    }

    /// Perturbs every sample of an on-the-fly source once, in order.
    pub fn freeze(&self, seed: u64) -> Result<SampleSource> {
        match self {
            SampleSource::Fixed(s) => Ok(SampleSource::Fixed(s.clone())),
            SampleSource::OnTheFly { dataset, cfg } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let samples = (0..dataset.len())
                    .map(|i| perturb(&dataset.image(i), dataset.labels[i], cfg, &mut rng))
                    .collect::<Result<_>>()?;
                Ok(SampleSource::Fixed(samples))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, C, H, W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub canonical: Vec<Corners>,
    pub gt_corners: Vec<Corners>,
    pub gt_homographies: Vec<Homography>,
}

impl Batch {
    pub fn from_samples(samples: &[PerturbSample]) -> Result<Batch> {
        let first = samples.first().ok_or_else(|| Error::Data("empty batch".into()))?;
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(first.image.shape());
        let mut data = Vec::with_capacity(shape.iter().product());
        for s in samples {
            if s.image.shape() != first.image.shape() {
                return Err(Error::Data(format!(
                    "sample shape {:?} differs from {:?}",
                    s.image.shape(),
                    first.image.shape()
                )));
            }
            data.extend_from_slice(s.image.data());
        }
        Ok(Batch {
            images: Tensor::new(shape, data)?,
            labels: samples.iter().map(|s| s.label).collect(),
            canonical: samples.iter().map(|s| s.canonical).collect(),
            gt_corners: samples.iter().map(|s| s.gt_corners).collect(),
            gt_homographies: samples.iter().map(|s| s.gt_homography).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Resumable position of a [`BatchStream`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamState {
    pub epoch: u64,
    pub position: usize,
    pub perturb_word_pos: u128,
}

/// Endless sequence of batches, epoch after epoch. The last batch of an
/// epoch may be short. With `shuffle`, each epoch's order is a seeded
/// permutation; perturbations come from a separate stream.
pub struct BatchStream<'a> {
    source: &'a SampleSource,
    batch: usize,
    shuffle: bool,
    seed: u64,
    epoch: u64,
    position: usize,
    order: Vec<usize>,
    perturb_rng: ChaCha8Rng,
}

pub fn batches(source: &SampleSource, batch: usize, shuffle: bool, seed: u64) -> Result<BatchStream<'_>> {
    if batch == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if source.is_empty() {
        return Err(Error::Data("no samples to batch".into()));
    }
    let mut perturb_rng = ChaCha8Rng::seed_from_u64(seed);
    perturb_rng.set_stream(0);
    let mut s = BatchStream {
        source,
        batch,
        shuffle,
        seed,
        epoch: 0,
        position: 0,
        order: Vec::new(),
        perturb_rng,
    };
    s.order = s.epoch_order(0);
    Ok(s)
}

impl BatchStream<'_> {
    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.source.len()).collect();
        if self.shuffle {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch + 1);
            order.shuffle(&mut rng);
        }
        order
    }

    pub fn state(&self) -> StreamState {
        StreamState {
            epoch: self.epoch,
            position: self.position,
            perturb_word_pos: self.perturb_rng.get_word_pos(),
        }
    }

    pub fn restore(&mut self, state: StreamState) {
        self.epoch = state.epoch;
        self.position = state.position;
        self.perturb_rng.set_word_pos(state.perturb_word_pos);
        self.order = self.epoch_order(state.epoch);
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        if self.position >= self.order.len() {
            self.epoch += 1;
            self.position = 0;
            self.order = self.epoch_order(self.epoch);
        }
        let end = (self.position + self.batch).min(self.order.len());
        let idx = &self.order[self.position..end];
        let samples: Vec<PerturbSample> = match self.source {
            SampleSource::Fixed(all) => idx.iter().map(|&i| all[i].clone()).collect(),
            SampleSource::OnTheFly { dataset, cfg } => idx
                .iter()
                .map(|&i| perturb(&dataset.image(i), dataset.labels[i], cfg, &mut self.perturb_rng))
                .collect::<Result<_>>()?,
        };
        self.position = end;
        Batch::from_samples(&samples)
    }
}

impl Iterator for BatchStream<'_> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}
