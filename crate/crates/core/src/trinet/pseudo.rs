//! Three-player joint prediction and confidence-filtered pseudo labels.

use crate::data::{LabeledExample, UnlabeledExample};
use crate::error::{Error, Result};
use crate::federation::EVAL_CHUNK;
use crate::nn::{argmax, forward_chunked, NetworkArchitecture, ParameterSet, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct JointPrediction {
    pub probs: Vec<f64>,
    pub pseudo_label: usize,
    pub confidence: f64,
}

impl JointPrediction {
    /// Unweighted mean of the local, global and combined players' outputs.
    pub fn from_players(local: &[f64], global: &[f64], combined: &[f64]) -> Result<Self> {
        if local.len() != global.len() || local.len() != combined.len() || local.is_empty() {
            return Err(Error::ShapeMismatch {
                context: "player outputs".into(),
                expected: vec![local.len()],
                found: vec![global.len(), combined.len()],
            });
        }
        let probs: Vec<f64> = local
            .iter()
            .zip(global)
            .zip(combined)
            .map(|((a, b), c)| (a + b + c) / 3.0)
            .collect();
        let pseudo_label = argmax(&probs);
        Ok(JointPrediction {
            confidence: probs[pseudo_label],
            pseudo_label,
            probs,
        })
    }
}

/// Row-wise joint predictions from the three players' probability tables.
pub fn joint_from_probs(local: &Tensor, global: &Tensor, combined: &Tensor) -> Result<Vec<JointPrediction>> {
    if local.shape() != global.shape() || local.shape() != combined.shape() {
        return Err(Error::ShapeMismatch {
            context: "player probability tables".into(),
            expected: local.shape().to_vec(),
            found: if local.shape() != global.shape() {
                global.shape().to_vec()
            } else {
                combined.shape().to_vec()
            },
        });
    }
    (0..local.shape()[0])
        .map(|i| JointPrediction::from_players(local.row(i), global.row(i), combined.row(i)))
        .collect()
}

/// Joint predictions over `images`, one per image.
pub fn joint_predict(
    arch: &NetworkArchitecture,
    local: &ParameterSet,
    global: &ParameterSet,
    combined: &ParameterSet,
    images: &[&Tensor],
) -> Result<Vec<JointPrediction>> {
    local.check_compatible(global)?;
    local.check_compatible(combined)?;
    let l = forward_chunked(arch, local, images, EVAL_CHUNK)?;
    let g = forward_chunked(arch, global, images, EVAL_CHUNK)?;
    let c = forward_chunked(arch, combined, images, EVAL_CHUNK)?;
    joint_from_probs(&l, &g, &c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoEntry {
    /// Position in the client's unlabeled list.
    pub index: usize,
    pub source_index: usize,
    pub label: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PseudoSet {
    pub entries: Vec<PseudoEntry>,
}

impl PseudoSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries whose pseudo label matches the hidden ground truth.
    pub fn count_correct(&self, unlabeled: &[UnlabeledExample]) -> usize {
        self.entries
            .iter()
            .filter(|e| unlabeled[e.index].hidden_label().reveal_for_evaluation() == e.label)
            .count()
    }

    /// Training examples carrying the pseudo labels.
    pub fn to_examples(&self, unlabeled: &[UnlabeledExample]) -> Vec<LabeledExample> {
        self.entries
            .iter()
            .map(|e| LabeledExample {
                image: unlabeled[e.index].image.clone(),
                label: e.label,
                source_index: e.source_index,
            })
            .collect()
    }
}

/// Positions of the predictions whose confidence is strictly above `theta`.
pub fn select_indices(predictions: &[JointPrediction], theta: f64) -> Vec<usize> {
    predictions
        .iter()
        .enumerate()
        .filter(|(_, p)| p.confidence > theta)
        .map(|(i, _)| i)
        .collect()
}

/// Keeps exactly the predictions whose confidence is strictly above `theta`.
pub fn select_pseudo(
    unlabeled: &[UnlabeledExample],
    predictions: &[JointPrediction],
    theta: f64,
) -> Result<PseudoSet> {
    if unlabeled.len() != predictions.len() {
        return Err(Error::AlignmentMismatch {
            predictions: predictions.len(),
            examples: unlabeled.len(),
        });
    }
    let entries = select_indices(predictions, theta)
        .into_iter()
        .map(|index| PseudoEntry {
            index,
            source_index: unlabeled[index].source_index,
            label: predictions[index].pseudo_label,
            confidence: predictions[index].confidence,
        })
        .collect();
    Ok(PseudoSet { entries })
}
