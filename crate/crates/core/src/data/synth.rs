//! Synthetic data with planted context/emotion structure.
//!
//! Every sample belongs to a latent context cluster `c`. Emotion `i` is
//! present with probability `table[c][i]`; its label is a confidence on the
//! matching side of 0.5. Each context attribute is owned by one cluster
//! (`a mod C`) and can only fire when the stream shows its owner. A stream
//! shows the true cluster with probability `signal`, otherwise a uniformly
//! drawn one, so `signal` controls how informative the stream is.
//!
//! Features mix a random linear embedding of the emotion labels with an
//! optional embedding of the cluster and Gaussian noise. By default the
//! features carry no direct cluster signal and are noisy, so the context
//! streams have information to add.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::{N_CONTINUOUS, N_DISCRETE};

/// `Pr(emotion i present | cluster c)`, one row per cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedTable {
    pub rows: Vec<Vec<f64>>,
}

impl PlantedTable {
    /// Each cluster has a signature set of emotions (`i mod C == c`) that are
    /// likely, the rest rare.
    pub fn default_for(n_clusters: usize) -> Self {
        let rows = (0..n_clusters)
            .map(|c| {
                (0..N_DISCRETE)
                    .map(|i| if i % n_clusters == c { 0.8 } else { 0.08 })
                    .collect()
            })
            .collect();
        Self { rows }
    }

    pub fn n_clusters(&self) -> usize {
        self.rows.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::Parameter("planted table has no clusters".into()));
        }
        for (c, row) in self.rows.iter().enumerate() {
            if row.len() != N_DISCRETE {
                return Err(Error::Parameter(format!(
                    "planted table row {c} has {} entries, expected {N_DISCRETE}",
                    row.len()
                )));
            }
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Parameter(format!(
                    "planted table row {c} has probability {v} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }
}

/// Generator settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n: usize,
    pub d_x: usize,
    pub n_place: usize,
    pub n_object: usize,
    pub n_clusters: usize,
    /// Label-confidence and continuous-label jitter.
    pub noise: f64,
    /// Probability that the place stream shows the true cluster.
    pub place_signal: f64,
    /// Probability that the object stream shows the true cluster.
    pub object_signal: f64,
    /// Probability that an attribute of the shown cluster fires.
    pub attr_presence: f64,
    pub emotion_embed: f64,
    pub cluster_embed: f64,
    pub feature_noise: f64,
    pub seed: u64,
    /// Overrides the default planted table when set.
    pub table: Option<PlantedTable>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 5000,
            d_x: 20,
            n_place: 30,
            n_object: 15,
            n_clusters: 5,
            noise: 0.2,
            place_signal: 1.0,
            object_signal: 1.0,
            attr_presence: 0.8,
            emotion_embed: 1.0,
            cluster_embed: 0.0,
            feature_noise: 2.5,
            seed: 0,
            table: None,
        }
    }
}

impl SynthConfig {
    pub fn planted_table(&self) -> PlantedTable {
        self.table
            .clone()
            .unwrap_or_else(|| PlantedTable::default_for(self.n_clusters))
    }
}

/// Ground truth emitted alongside a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedStructure {
    pub table: PlantedTable,
    pub place_owner: Vec<usize>,
    pub object_owner: Vec<usize>,
    pub place_signal: f64,
    pub object_signal: f64,
    /// Expected `P⁺`, place rows then object rows.
    pub expected_p_plus: Tensor,
    /// Latent cluster of every sample.
    pub clusters: Vec<usize>,
}

/// A generated dataset and its planted structure.
#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: Dataset,
    pub planted: PlantedStructure,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn mean(values: &[f64], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64
}

const POSITIVE: [usize; 11] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10];
const NEGATIVE: [usize; 15] = [11, 12, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23, 24, 25];
const AROUSED: [usize; 8] = [3, 4, 8, 9, 18, 19, 22, 23];
const CALM: [usize; 4] = [0, 12, 13, 21];
const DOMINANT: [usize; 4] = [2, 5, 16, 19];
const SUBMISSIVE: [usize; 5] = [11, 14, 21, 23, 25];

/// Valence, arousal and dominance in `[0, 1]` from the discrete labels.
fn continuous_from(emotions: &[f64]) -> [f64; N_CONTINUOUS] {
    let axis = |hi: &[usize], lo: &[usize]| 0.5 + 0.5 * (mean(emotions, hi) - mean(emotions, lo));
    [
        axis(&POSITIVE, &NEGATIVE),
        axis(&AROUSED, &CALM),
        axis(&DOMINANT, &SUBMISSIVE),
    ]
}

fn check_probability(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Parameter(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

/// Generates a dataset with planted structure.
pub fn synth_generate(config: &SynthConfig) -> Result<SynthOutput> {
    let table = config.planted_table();
    table.validate()?;
    let k = table.n_clusters();
    check_probability("place_signal", config.place_signal)?;
    check_probability("object_signal", config.object_signal)?;
    check_probability("attr_presence", config.attr_presence)?;
    for (name, v) in [
        ("noise", config.noise),
        ("feature_noise", config.feature_noise),
    ] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::Parameter(format!("{name} must be >= 0, got {v}")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let scale = (N_DISCRETE as f64).sqrt();
    let emotion_embedding: Vec<f64> = (0..N_DISCRETE * config.d_x)
        .map(|_| gauss(&mut rng) / scale * 2.0)
        .collect();
    let cluster_embedding: Vec<f64> = (0..k * config.d_x).map(|_| gauss(&mut rng)).collect();
    let place_owner: Vec<usize> = (0..config.n_place).map(|a| a % k).collect();
    let object_owner: Vec<usize> = (0..config.n_object).map(|a| a % k).collect();

    let mut samples = Vec::with_capacity(config.n);
    let mut clusters = Vec::with_capacity(config.n);
    for s in 0..config.n {
        let c = rng.random_range(0..k);
        clusters.push(c);

        let mut emotions = vec![0.0; N_DISCRETE];
        for (e, &p) in emotions.iter_mut().zip(&table.rows[c]) {
            let present = rng.random::<f64>() < p;
            let jitter = (0.5 * config.noise * gauss(&mut rng)).abs();
            *e = if present {
                (1.0 - jitter).clamp(0.5, 1.0)
            } else {
                jitter.clamp(0.0, 0.49)
            };
        }

        let mut continuous = continuous_from(&emotions);
        for v in &mut continuous {
            *v = (*v + 0.1 * config.noise * gauss(&mut rng)).clamp(0.0, 1.0);
        }
        let raw_continuous: Vec<f64> = continuous.iter().map(|v| 1.0 + 9.0 * v).collect();

        let attrs = |owner: &[usize], signal: f64, rng: &mut ChaCha8Rng| {
            let shown = if rng.random::<f64>() < signal {
                c
            } else {
                rng.random_range(0..k)
            };
            owner
                .iter()
                .map(|&o| {
                    let fire = o == shown && rng.random::<f64>() < config.attr_presence;
                    let u = rng.random::<f64>();
                    if fire {
                        0.3 + 0.7 * u
                    } else {
                        0.009 * u
                    }
                })
                .collect::<Vec<f64>>()
        };
        let place_attrs = attrs(&place_owner, config.place_signal, &mut rng);
        let object_attrs = attrs(&object_owner, config.object_signal, &mut rng);

        let features = (0..config.d_x)
            .map(|d| {
                let from_emotions: f64 = emotions
                    .iter()
                    .enumerate()
                    .map(|(i, e)| e * emotion_embedding[i * config.d_x + d])
                    .sum();
                config.emotion_embed * from_emotions
                    + config.cluster_embed * cluster_embedding[c * config.d_x + d]
                    + config.feature_noise * gauss(&mut rng)
            })
            .collect();

        samples.push(Sample {
            id: format!("synth-{s:06}"),
            features,
            emotions_discrete: emotions,
            emotions_continuous: raw_continuous,
            place_attrs,
            object_attrs,
        });
    }

    let dataset = Dataset::new(samples)?;
    let expected_p_plus = expected_p_plus(&table, &place_owner, config.place_signal, &object_owner, config.object_signal)?;
    Ok(SynthOutput {
        dataset,
        planted: PlantedStructure {
            table,
            place_owner,
            object_owner,
            place_signal: config.place_signal,
            object_signal: config.object_signal,
            expected_p_plus,
            clusters,
        },
    })
}

/// `P⁺[a] = s·T[owner(a)] + (1 − s)·mean_c T[c]` for each stream.
fn expected_p_plus(
    table: &PlantedTable,
    place_owner: &[usize],
    place_signal: f64,
    object_owner: &[usize],
    object_signal: f64,
) -> Result<Tensor> {
    let k = table.n_clusters() as f64;
    let avg: Vec<f64> = (0..N_DISCRETE)
        .map(|i| table.rows.iter().map(|r| r[i]).sum::<f64>() / k)
        .collect();
    let mut data = Vec::new();
    for (owners, signal) in [(place_owner, place_signal), (object_owner, object_signal)] {
        for &o in owners {
            for i in 0..N_DISCRETE {
                data.push(if signal == 1.0 {
                    table.rows[o][i]
                } else {
                    signal * table.rows[o][i] + (1.0 - signal) * avg[i]
                });
            }
        }
    }
    Tensor::matrix(place_owner.len() + object_owner.len(), N_DISCRETE, data)
}
