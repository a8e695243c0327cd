//! Datasets, loaders and the labeled/unlabeled client partition.

pub mod idx;
pub mod partition;
pub mod raw;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub use idx::load_idx;
pub use partition::{partition, SplitConfig, SplitMode};
pub use raw::{load_raw_tensor, write_raw_tensor};

/// Class count assumed for IDX and raw datasets unless labels exceed it.
pub const DEFAULT_CLASSES: usize = 10;

/// One image with its label. Images are shared, so cloning is cheap.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    image: Arc<Tensor>,
    label: Option<usize>,
    true_label: usize,
}

impl Example {
    pub fn labeled(image: Tensor, label: usize) -> Self {
        Example {
            image: Arc::new(image),
            label: Some(label),
            true_label: label,
        }
    }

    pub fn image(&self) -> &Tensor {
        &self.image
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    /// Ground truth, for evaluation only.
    pub fn true_label(&self) -> usize {
        self.true_label
    }

    pub(crate) fn shared_image(&self) -> Arc<Tensor> {
        Arc::clone(&self.image)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<Example>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, num_classes: usize) -> Result<Self> {
        let first = examples.first().ok_or(Error::EmptyDataset)?;
        let shape = first.image.shape().to_vec();
        for (i, ex) in examples.iter().enumerate() {
            if ex.image.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    context: format!("image {i}"),
                    expected: shape,
                    found: ex.image.shape().to_vec(),
                });
            }
            if ex.true_label >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: ex.true_label,
                    num_classes,
                });
            }
            if ex.label.is_some_and(|l| l != ex.true_label) {
                return Err(Error::InvalidSplit(format!(
                    "example {i} carries a label different from its ground truth"
                )));
            }
        }
        Ok(Dataset {
            examples,
            num_classes,
        })
    }

    /// Builds a dataset from raw `u8` pixels laid out as `count x shape`.
    pub(crate) fn from_bytes(
        image_shape: &[usize],
        pixels: &[u8],
        labels: &[u8],
        num_classes: usize,
    ) -> Result<Self> {
        let per_image: usize = image_shape.iter().product();
        if per_image == 0 || pixels.len() != per_image * labels.len() {
            return Err(Error::CountMismatch {
                images: pixels.len().checked_div(per_image).unwrap_or(0),
                labels: labels.len(),
            });
        }
        let examples = pixels
            .chunks(per_image)
            .zip(labels)
            .map(|(px, &label)| {
                let values = px.iter().map(|&b| f64::from(b) / 255.0).collect();
                Example::labeled(Tensor::from_parts(image_shape.to_vec(), values), usize::from(label))
            })
            .collect();
        Dataset::new(examples, num_classes)
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image_shape(&self) -> &[usize] {
        self.examples[0].image.shape()
    }

    /// The first `n` examples (all of them if `n` exceeds the size).
    pub fn truncated(&self, n: usize) -> Result<Dataset> {
        let examples = self.examples.iter().take(n).cloned().collect();
        Dataset::new(examples, self.num_classes)
    }

    /// Concatenation of two datasets with matching image shape and class count.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        let mut examples = self.examples.clone();
        examples.extend(other.examples.iter().cloned());
        Dataset::new(examples, self.num_classes.max(other.num_classes))
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0; self.num_classes];
        for ex in &self.examples {
            hist[ex.true_label] += 1;
        }
        hist
    }
}

/// A labeled training example on a client.
#[derive(Debug, Clone)]
pub struct LabeledExample {
    pub image: Arc<Tensor>,
    pub label: usize,
    /// Position in the source dataset.
    pub source_index: usize,
}

/// Ground truth of an unlabeled example, kept out of the training path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HiddenLabel(usize);

impl HiddenLabel {
    /// Only for diagnostics such as pseudo-label accuracy.
    pub fn reveal_for_evaluation(&self) -> usize {
        self.0
    }
}

/// An unlabeled training example on a client.
#[derive(Debug, Clone)]
pub struct UnlabeledExample {
    pub image: Arc<Tensor>,
    pub source_index: usize,
    hidden: HiddenLabel,
}

impl UnlabeledExample {
    pub fn hidden_label(&self) -> HiddenLabel {
        self.hidden
    }
}

/// The labeled set D_L and unlabeled set D_U held by one client.
#[derive(Debug, Clone)]
pub struct ClientShard {
    pub client_id: usize,
    pub labeled: Vec<LabeledExample>,
    pub unlabeled: Vec<UnlabeledExample>,
}

impl ClientShard {
    pub(crate) fn from_indices(client_id: usize, dataset: &Dataset, labeled: &[usize], unlabeled: &[usize]) -> Self {
        let ex = dataset.examples();
        ClientShard {
            client_id,
            labeled: labeled
                .iter()
                .map(|&i| LabeledExample {
                    image: ex[i].shared_image(),
                    label: ex[i].true_label,
                    source_index: i,
                })
                .collect(),
            unlabeled: unlabeled
                .iter()
                .map(|&i| UnlabeledExample {
                    image: ex[i].shared_image(),
                    source_index: i,
                    hidden: HiddenLabel(ex[i].true_label),
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Distinct labeled classes, ascending.
    pub fn labeled_classes(&self) -> Vec<usize> {
        let mut classes: Vec<usize> = self.labeled.iter().map(|e| e.label).collect();
        classes.sort_unstable();
        classes.dedup();
        classes
    }
}
