//! Builds the datasets and runs every configured aggregator.

use anyhow::{bail, Context, Result};
use iowa_fl::data::{generate_synthetic, load_idx};
use iowa_fl::federation::{run_scenario, FederationData};
use iowa_fl::{Dataset, ScenarioResult};

use crate::config::{DatasetSource, Settings};

pub fn load_dataset(settings: &Settings) -> Result<Dataset> {
    match settings.dataset {
        DatasetSource::Synthetic => Ok(generate_synthetic(
            settings.classes,
            settings.dim,
            settings.samples_per_class,
            settings.spread,
            settings.seed,
        )?),
        DatasetSource::Idx => {
            let (Some(images), Some(labels)) = (&settings.idx_images, &settings.idx_labels) else {
                bail!("dataset=idx needs both idx-images and idx-labels");
            };
            load_idx(images, labels)
                .with_context(|| format!("loading {} / {}", images.display(), labels.display()))
        }
    }
}

/// Runs `settings.runs` repetitions for each aggregator, in the order the
/// aggregators were given. All aggregators see the same splits.
pub fn run(settings: &Settings) -> Result<Vec<ScenarioResult>> {
    let aggregators = settings.aggregators()?;
    let dataset = load_dataset(settings)?;
    let data = FederationData::split(
        &dataset,
        settings.validation_fraction,
        settings.test_fraction,
        settings.seed,
    )?;
    aggregators
        .into_iter()
        .map(|agg| {
            let label = agg.label();
            let cfg = settings.federation_config(agg, dataset.dim(), dataset.num_classes());
            run_scenario(&cfg, &data, settings.runs).with_context(|| format!("aggregator {label}"))
        })
        .collect()
}
