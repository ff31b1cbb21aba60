#![allow(dead_code)]

use grounded_audit::model::{argmax, Split};
use grounded_audit::mitigation::erm_train;
use grounded_audit::providers::{Classifier, FeatureRecipe, PooledLogisticClassifier, TrainerConfig};
use grounded_audit::synthdata::{generate_spurious_dataset, SynthConfig, SyntheticDataset};

pub struct Fixture {
    pub data: SyntheticDataset,
    pub erm: PooledLogisticClassifier,
    pub trainer: TrainerConfig,
    pub recipe: FeatureRecipe,
}

/// The default ρ = 0.95 synthetic task with its ERM model.
pub fn fixture(seed: u64) -> Fixture {
    let config = SynthConfig { seed, ..SynthConfig::default() };
    let data = generate_spurious_dataset(&config).unwrap();
    let trainer = TrainerConfig { seed, ..TrainerConfig::default() };
    let recipe = FeatureRecipe::default();
    let erm = erm_train(&trainer, recipe, &data.dataset).unwrap();
    Fixture { data, erm, trainer, recipe }
}

impl Fixture {
    pub fn predictions(&self, split: Split) -> Vec<usize> {
        let ds = &self.data.dataset;
        ds.split_indices(split)
            .iter()
            .map(|&i| argmax(&self.erm.predict_proba(&ds.images[i]).unwrap()))
            .collect()
    }
}
