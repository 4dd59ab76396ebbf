//! Coupling strategies between the RGB and thermal models, selected by name.
//!
//! A strategy decides the density layout of the field and which objective
//! terms are active; the trainer consults it once per run.

use crate::field::Coupling;
use crate::losses::LossWeights;
use std::collections::BTreeMap;

pub trait CouplingStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn mode(&self) -> Coupling;
    /// Weights after forcing the terms this strategy disables to zero.
    fn effective_weights(&self, requested: &LossWeights) -> LossWeights;
    /// Whether the density-coupling term is evaluated at all.
    fn uses_sigma_term(&self) -> bool;
}

/// Two density grids tied by the density and cross-channel regularizers.
pub struct Separate;

/// One density grid for both spectra; the density term is identically zero.
pub struct Shared;

/// Two fully unconnected models.
pub struct Independent;

impl CouplingStrategy for Separate {
    fn name(&self) -> &'static str {
        "separate"
    }
    fn mode(&self) -> Coupling {
        Coupling::Separate
    }
    fn effective_weights(&self, requested: &LossWeights) -> LossWeights {
        *requested
    }
    fn uses_sigma_term(&self) -> bool {
        true
    }
}

impl CouplingStrategy for Shared {
    fn name(&self) -> &'static str {
        "shared"
    }
    fn mode(&self) -> Coupling {
        Coupling::Shared
    }
    fn effective_weights(&self, requested: &LossWeights) -> LossWeights {
        LossWeights {
            lambda_sigma_rgb: 0.0,
            lambda_sigma_therm: 0.0,
            ..*requested
        }
    }
    fn uses_sigma_term(&self) -> bool {
        false
    }
}

impl CouplingStrategy for Independent {
    fn name(&self) -> &'static str {
        "independent"
    }
    fn mode(&self) -> Coupling {
        Coupling::Independent
    }
    fn effective_weights(&self, requested: &LossWeights) -> LossWeights {
        LossWeights {
            lambda_sigma_rgb: 0.0,
            lambda_sigma_therm: 0.0,
            lambda_cc: 0.0,
            ..*requested
        }
    }
    fn uses_sigma_term(&self) -> bool {
        false
    }
}

pub struct CouplingRegistry {
    entries: BTreeMap<&'static str, Box<dyn CouplingStrategy>>,
}

impl CouplingRegistry {
    pub fn empty() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(Separate));
        r.register(Box::new(Shared));
        r.register(Box::new(Independent));
        r
    }

    /// Replaces any strategy already registered under the same name.
    pub fn register(&mut self, strategy: Box<dyn CouplingStrategy>) {
        self.entries.insert(strategy.name(), strategy);
    }

    pub fn get(&self, name: &str) -> Option<&dyn CouplingStrategy> {
        self.entries.get(name).map(|b| b.as_ref())
    }

    pub fn for_mode(&self, mode: Coupling) -> Option<&dyn CouplingStrategy> {
        self.get(mode.as_str())
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.entries.keys().copied()
    }
}

impl Default for CouplingRegistry {
    fn default() -> Self {
        Self::with_builtins()
    }
}
