//! End-to-end runs of one architecture variant: split, build context tables
//! on the training part, train, and evaluate on the test part.

use serde::{Deserialize, Serialize};

use super::{train, ContextProvider, Model, ModelConfig, TrainConfig, TrainingHistory, Variant};
use crate::data::{split, Dataset, SplitSpec};
use crate::error::{Error, Result};
use crate::fusion::{ContextTables, StreamTables};
use crate::metrics::{evaluate, EvalOptions, MetricsReport};
use crate::stats::{top_k, CooccurrenceStats, StatsConfig, Stream};

/// Everything one ablation run depends on.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub split: SplitSpec,
    pub stats: StatsConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

/// Outcome of one variant.
#[derive(Debug, Clone)]
pub struct AblationResult {
    pub variant: Variant,
    pub report: MetricsReport,
    pub history: TrainingHistory,
    pub model: Model,
    /// Test-set predictions, in test-set order.
    pub predictions: Vec<[f64; crate::N_TARGETS]>,
    pub test: Dataset,
}

/// Context tables over the variant's streams, with each stream's top-κ
/// attributes by mean activation on `train_set`.
pub fn context_tables(
    variant: Variant,
    stats: &CooccurrenceStats,
    train_set: &Dataset,
    kappa: usize,
) -> Result<ContextTables> {
    let (place_means, object_means) = train_set.mean_activations();
    let table = |stream: Stream, means: &[f64]| -> Result<Option<StreamTables>> {
        if !variant.uses(stream) {
            return Ok(None);
        }
        if means.is_empty() {
            return Err(Error::Schema(format!(
                "variant {variant} needs {} attributes but the data has none",
                stream.name()
            )));
        }
        let selected = top_k(means, kappa.min(means.len()))?;
        StreamTables::from_stats(stats, stream, selected).map(Some)
    };
    Ok(ContextTables {
        place: table(Stream::Place, &place_means)?,
        object: table(Stream::Object, &object_means)?,
    })
}

/// Trains and evaluates one variant.
pub fn ablate(variant: Variant, dataset: &Dataset, config: &AblationConfig) -> Result<AblationResult> {
    let parts = split(dataset, &config.split)?;
    for (name, idx) in [("train", &parts.train), ("test", &parts.test), ("validation", &parts.val)] {
        if idx.is_empty() {
            return Err(Error::Input(format!("empty {name} split")));
        }
    }
    let train_set = dataset.subset(&parts.train)?;
    let test_set = dataset.subset(&parts.test)?;
    let val_set = dataset.subset(&parts.val)?;

    let stats = CooccurrenceStats::build(&train_set, &config.stats)?;
    let tables = context_tables(variant, &stats, &train_set, config.model.fusion.kappa)?;
    let mut model = Model::init(
        variant,
        config.model.clone(),
        tables,
        dataset.d_x(),
        dataset.n_place(),
        dataset.n_object(),
    )?;
    let provider = ContextProvider::DatasetColumn;
    let history = train(&mut model, &train_set, &val_set, &provider, &config.train)?;
    let predictions = model.predict(&test_set, &provider)?;
    let report = evaluate(&predictions, test_set.targets(), &config.eval)?;
    Ok(AblationResult {
        variant,
        report,
        history,
        model,
        predictions,
        test: test_set,
    })
}
