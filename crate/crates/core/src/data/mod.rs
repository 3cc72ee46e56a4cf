//! Feature stores, pair manifests, dataset splits, popularity modelling and
//! the planted synthetic dataset.

mod features;
mod gamma;
mod manifest;
mod split;
mod synth;

pub use features::{EntityKind, FeatureTable};
pub use gamma::{digamma, fit_gamma_mle, trigamma, GammaFit};
pub use manifest::{parse_manifest, parse_popularity, PairRecord, SplitManifest, SplitTag};
pub use split::{popularity_strata, split_strong, split_weak, SplitMode, SplitRatios};
pub use synth::{generate_synthetic, ModalityNoise, PlantedTruth, SynthConfig, SyntheticDataset};

use crate::error::Result;

/// The three feature tables a model is trained and evaluated on.
#[derive(Clone, Debug)]
pub struct FeatureStore {
    pub music: FeatureTable,
    pub visual: FeatureTable,
    pub textual: FeatureTable,
}

impl FeatureStore {
    /// Checks that every pair resolves in the tables.
    pub fn check_pairs(&self, pairs: &[PairRecord]) -> Result<()> {
        for p in pairs {
            self.music.require(&p.music)?;
            self.visual.require(&p.video)?;
            self.textual.require(&p.video)?;
        }
        Ok(())
    }
}

impl From<&SyntheticDataset> for FeatureStore {
    fn from(d: &SyntheticDataset) -> Self {
        FeatureStore {
            music: d.music.clone(),
            visual: d.visual.clone(),
            textual: d.textual.clone(),
        }
    }
}
