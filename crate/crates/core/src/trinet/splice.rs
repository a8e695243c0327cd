use crate::error::{Error, Result};
use crate::nn::ParameterSet;

/// Number of leading parameterized layers taken from the global model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpliceSpec {
    pub shallow_cutoff: usize,
}

impl Default for SpliceSpec {
    /// The two leading convolutions.
    fn default() -> Self {
        SpliceSpec { shallow_cutoff: 2 }
    }
}

impl SpliceSpec {
    pub fn validate(&self, total_layers: usize) -> Result<()> {
        if self.shallow_cutoff == 0 || self.shallow_cutoff >= total_layers {
            return Err(Error::InvalidSplice {
                cutoff: self.shallow_cutoff,
                total: total_layers,
            });
        }
        Ok(())
    }
}

/// Shallow layers from `global`, deep layers from `local`.
pub fn splice(global: &ParameterSet, local: &ParameterSet, spec: SpliceSpec) -> Result<ParameterSet> {
    global.check_compatible(local)?;
    spec.validate(global.entries().len())?;
    let mut out = local.clone();
    for (dst, src) in out
        .entries_mut()
        .iter_mut()
        .zip(global.entries())
        .take(spec.shallow_cutoff)
    {
        *dst = src.clone();
    }
    Ok(out)
}
