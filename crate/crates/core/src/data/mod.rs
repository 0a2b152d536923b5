//! Datasets, the corner-perturbation model and batch streams.

mod batches;
mod documents;
pub mod mnist;
mod perturb;

pub use batches::{batches, Batch, BatchStream, SampleSource, StreamState};
pub use documents::{card_corners, load_documents, load_manifest, synth_documents, write_manifest, ManifestEntry};
pub use mnist::{load_mnist, MnistSplit};
pub use perturb::{canonical_corners, perturb, warp_image, CornerNoise, Corners, PerturbConfig, PerturbSample};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Labelled images with pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[M, C, H, W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub name: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, name: impl Into<String>) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 {
            return Err(Error::Data(format!("images must be [M,C,H,W], got {s:?}")));
        }
        if s[0] != labels.len() {
            return Err(Error::Data(format!("{} images but {} labels", s[0], labels.len())));
        }
        if let Some(v) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Dataset {
            images,
            labels,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn raster(&self) -> (usize, usize) {
        (self.images.shape()[2], self.images.shape()[3])
    }

    /// Flat pixels of sample `i`.
    pub fn pixels(&self, i: usize) -> &[f64] {
        let per: usize = self.images.shape()[1..].iter().product();
        &self.images.data()[i * per..(i + 1) * per]
    }

    /// Sample `i` as `[C, H, W]`.
    pub fn image(&self, i: usize) -> Tensor {
        Tensor::new(self.images.shape()[1..].to_vec(), self.pixels(i).to_vec()).expect("shape matches")
    }

    /// The first `count` samples.
    pub fn head(&self, count: usize) -> Result<Dataset> {
        if count == 0 || count > self.len() {
            return Err(Error::Data(format!(
                "cannot take {count} samples from {} ({} available)",
                self.name,
                self.len()
            )));
        }
        let per: usize = self.images.shape()[1..].iter().product();
        let mut shape = self.images.shape().to_vec();
        shape[0] = count;
        Dataset::new(
            Tensor::new(shape, self.images.data()[..count * per].to_vec())?,
            self.labels[..count].to_vec(),
            format!("{}[..{count}]", self.name),
        )
    }
}
