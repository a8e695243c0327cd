use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::arch::NetworkArchitecture;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Weight and bias of one parameterized layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub layer_index: usize,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ParamEntry {
    fn zeros_like(&self) -> Self {
        ParamEntry {
            layer_index: self.layer_index,
            weight: Tensor::zeros(self.weight.shape().to_vec()),
            bias: Tensor::zeros(self.bias.shape().to_vec()),
        }
    }

    fn same_shape(&self, other: &ParamEntry) -> bool {
        self.layer_index == other.layer_index
            && self.weight.shape() == other.weight.shape()
            && self.bias.shape() == other.bias.shape()
    }
}

/// Per-layer network parameters tagged with the architecture fingerprint.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    entries: Vec<ParamEntry>,
    fingerprint: u64,
}

/// Gradient of a scalar loss with respect to a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    entries: Vec<ParamEntry>,
    fingerprint: u64,
}

fn entries_for(arch: &NetworkArchitecture, fill: f64) -> Vec<ParamEntry> {
    arch.layers()
        .iter()
        .enumerate()
        .filter_map(|(i, l)| {
            l.param_shapes().map(|(w, b)| ParamEntry {
                layer_index: i,
                weight: Tensor::filled(w, fill),
                bias: Tensor::filled(b, fill),
            })
        })
        .collect()
}

/// Glorot-uniform weights and zero biases, reproducible from `seed`.
pub fn init_params(arch: &NetworkArchitecture, seed: u64) -> ParameterSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = entries_for(arch, 0.0);
    for entry in &mut entries {
        let (fan_in, fan_out) = arch.layers()[entry.layer_index]
            .fans()
            .expect("entry layers are parameterized");
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for w in entry.weight.data_mut() {
            *w = rng.gen_range(-limit..limit);
        }
    }
    ParameterSet {
        entries,
        fingerprint: arch.fingerprint(),
    }
}

/// `params - eta * grads`, returned as a new set.
pub fn sgd_step(params: &ParameterSet, grads: &GradientSet, eta: f64) -> Result<ParameterSet> {
    let mut out = params.clone();
    out.apply_sgd(grads, eta)?;
    Ok(out)
}

macro_rules! shared_impl {
    ($ty:ident) => {
        impl $ty {
            pub fn entries(&self) -> &[ParamEntry] {
                &self.entries
            }

            pub fn fingerprint(&self) -> u64 {
                self.fingerprint
            }

            pub fn num_values(&self) -> usize {
                self.entries
                    .iter()
                    .map(|e| e.weight.len() + e.bias.len())
                    .sum()
            }

            /// All values in entry order, weight before bias.
            pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
                self.entries
                    .iter()
                    .flat_map(|e| e.weight.data().iter().chain(e.bias.data()).copied())
            }

            pub(crate) fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
                self.entries.iter_mut().flat_map(|e| {
                    let ParamEntry { weight, bias, .. } = e;
                    weight.data_mut().iter_mut().chain(bias.data_mut().iter_mut())
                })
            }

            pub(crate) fn entries_mut(&mut self) -> &mut [ParamEntry] {
                &mut self.entries
            }

            pub(crate) fn check_congruent(&self, other_entries: &[ParamEntry], other_fp: u64) -> Result<()> {
                if self.fingerprint != other_fp {
                    return Err(Error::FingerprintMismatch {
                        expected: self.fingerprint,
                        found: other_fp,
                    });
                }
                if self.entries.len() != other_entries.len() {
                    return Err(Error::ShapeMismatch {
                        context: "parameter entry count".into(),
                        expected: vec![self.entries.len()],
                        found: vec![other_entries.len()],
                    });
                }
                for (a, b) in self.entries.iter().zip(other_entries) {
                    if !a.same_shape(b) {
                        return Err(Error::ShapeMismatch {
                            context: format!("parameters of layer {}", a.layer_index),
                            expected: a.weight.shape().to_vec(),
                            found: b.weight.shape().to_vec(),
                        });
                    }
                }
                Ok(())
            }
        }
    };
}

shared_impl!(ParameterSet);
shared_impl!(GradientSet);

impl ParameterSet {
    pub fn zeros(arch: &NetworkArchitecture) -> Self {
        Self::filled(arch, 0.0)
    }

    pub fn filled(arch: &NetworkArchitecture, value: f64) -> Self {
        ParameterSet {
            entries: entries_for(arch, value),
            fingerprint: arch.fingerprint(),
        }
    }

    /// Builds a set from raw entries, validating shapes against `arch`.
    pub fn from_entries(arch: &NetworkArchitecture, entries: Vec<ParamEntry>) -> Result<Self> {
        let template = Self::zeros(arch);
        template.check_congruent(&entries, arch.fingerprint())?;
        Ok(ParameterSet {
            entries,
            fingerprint: arch.fingerprint(),
        })
    }

    /// Rebuilds a set with the same layout from a flat value vector.
    pub fn with_values(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.num_values() {
            return Err(Error::ShapeMismatch {
                context: "flat parameter vector".into(),
                expected: vec![self.num_values()],
                found: vec![values.len()],
            });
        }
        let mut out = self.clone();
        for (dst, &src) in out.values_mut().zip(values) {
            *dst = src;
        }
        Ok(out)
    }

    pub fn check_compatible(&self, other: &ParameterSet) -> Result<()> {
        self.check_congruent(&other.entries, other.fingerprint)
    }

    pub fn check_arch(&self, arch: &NetworkArchitecture) -> Result<()> {
        if self.fingerprint != arch.fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: arch.fingerprint(),
                found: self.fingerprint,
            });
        }
        Ok(())
    }

    pub(crate) fn apply_sgd(&mut self, grads: &GradientSet, eta: f64) -> Result<()> {
        if !(eta.is_finite() && eta >= 0.0) {
            return Err(Error::InvalidLearningRate(eta));
        }
        self.check_congruent(&grads.entries, grads.fingerprint)?;
        for (p, g) in self.values_mut().zip(grads.values()) {
            *p -= eta * g;
        }
        Ok(())
    }
}

impl GradientSet {
    pub fn zeros_like(params: &ParameterSet) -> Self {
        GradientSet {
            entries: params.entries.iter().map(ParamEntry::zeros_like).collect(),
            fingerprint: params.fingerprint,
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &GradientSet, scale: f64) -> Result<()> {
        self.check_congruent(&other.entries, other.fingerprint)?;
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn with_values(&self, values: &[f64]) -> Result<Self> {
        if values.len() != self.num_values() {
            return Err(Error::ShapeMismatch {
                context: "flat gradient vector".into(),
                expected: vec![self.num_values()],
                found: vec![values.len()],
            });
        }
        let mut out = self.clone();
        for (dst, &src) in out.values_mut().zip(values) {
            *dst = src;
        }
        Ok(out)
    }
}
