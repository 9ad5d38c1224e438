//! Dataset schema, JSONL loading and saving, and stratified splitting.
//!
//! One sample per line:
//!
//! ```text
//! {"id":"s0","features":[..],"emotions_discrete":[26 values in [0,1]],
//!  "emotions_continuous":[3 values in [1,10]],"place_attrs":[..],"object_attrs":[..]}
//! ```
//!
//! Continuous labels are kept in their raw `[1, 10]` range on disk and in
//! [`Sample`]; [`Dataset`] exposes them normalized to `[0, 1]` via
//! [`Dataset::target`].

mod synth;

pub use synth::{synth_generate, PlantedStructure, PlantedTable, SynthConfig, SynthOutput};

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{N_CONTINUOUS, N_DISCRETE, N_TARGETS};

/// One labeled observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub features: Vec<f64>,
    pub emotions_discrete: Vec<f64>,
    /// Raw valence / arousal / dominance in `[1, 10]`.
    pub emotions_continuous: Vec<f64>,
    #[serde(default)]
    pub place_attrs: Vec<f64>,
    #[serde(default)]
    pub object_attrs: Vec<f64>,
}

/// Maps a raw continuous label from `[1, 10]` to `[0, 1]`.
pub fn normalize_continuous(raw: f64) -> f64 {
    (raw - 1.0) / 9.0
}

impl Sample {
    fn validate(&self) -> Result<()> {
        let fail = |message: String| Error::Validation {
            id: self.id.clone(),
            message,
        };
        if self.emotions_discrete.len() != N_DISCRETE {
            return Err(fail(format!(
                "expected {N_DISCRETE} discrete emotions, found {}",
                self.emotions_discrete.len()
            )));
        }
        if self.emotions_continuous.len() != N_CONTINUOUS {
            return Err(fail(format!(
                "expected {N_CONTINUOUS} continuous emotions, found {}",
                self.emotions_continuous.len()
            )));
        }
        let check = |name: &str, values: &[f64], lo: f64, hi: f64| -> Result<()> {
            for (i, &v) in values.iter().enumerate() {
                if !(v.is_finite() && v >= lo && v <= hi) {
                    return Err(fail(format!("{name}[{i}] = {v} outside [{lo}, {hi}]")));
                }
            }
            Ok(())
        };
        check("emotions_discrete", &self.emotions_discrete, 0.0, 1.0)?;
        check("emotions_continuous", &self.emotions_continuous, 1.0, 10.0)?;
        check("place_attrs", &self.place_attrs, 0.0, 1.0)?;
        check("object_attrs", &self.object_attrs, 0.0, 1.0)?;
        if let Some(i) = self.features.iter().position(|v| !v.is_finite()) {
            return Err(fail(format!("features[{i}] is not finite")));
        }
        Ok(())
    }

    /// Index of the largest discrete label, lowest index on ties.
    pub fn dominant_emotion(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.emotions_discrete.iter().enumerate() {
            if v > self.emotions_discrete[best] {
                best = i;
            }
        }
        best
    }
}

/// A validated, immutable collection of samples with consistent widths.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    targets: Vec<[f64; N_TARGETS]>,
    d_x: usize,
    n_place: usize,
    n_object: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Input("empty dataset".into()))?;
        let (d_x, n_place, n_object) = (
            first.features.len(),
            first.place_attrs.len(),
            first.object_attrs.len(),
        );
        let mut targets = Vec::with_capacity(samples.len());
        for s in &samples {
            s.validate()?;
            let widths = (s.features.len(), s.place_attrs.len(), s.object_attrs.len());
            if widths != (d_x, n_place, n_object) {
                return Err(Error::Schema(format!(
                    "sample {} has (features, place, object) widths {:?}, expected {:?}",
                    s.id,
                    widths,
                    (d_x, n_place, n_object)
                )));
            }
            let mut t = [0.0; N_TARGETS];
            t[..N_DISCRETE].copy_from_slice(&s.emotions_discrete);
            for (dst, &raw) in t[N_DISCRETE..].iter_mut().zip(&s.emotions_continuous) {
                *dst = normalize_continuous(raw);
            }
            targets.push(t);
        }
        Ok(Self {
            samples,
            targets,
            d_x,
            n_place,
            n_object,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    /// The 29-dim regression target: discrete labels then normalized
    /// continuous labels.
    pub fn target(&self, i: usize) -> &[f64; N_TARGETS] {
        &self.targets[i]
    }

    pub fn targets(&self) -> &[[f64; N_TARGETS]] {
        &self.targets
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn n_place(&self) -> usize {
        self.n_place
    }

    pub fn n_object(&self) -> usize {
        self.n_object
    }

    /// A new dataset made of the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let samples = indices.iter().map(|&i| self.samples[i].clone()).collect();
        Self::new(samples)
    }

    /// Per-attribute mean activations of the place and object streams.
    pub fn mean_activations(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.len() as f64;
        let mut place = vec![0.0; self.n_place];
        let mut object = vec![0.0; self.n_object];
        for s in &self.samples {
            for (acc, v) in place.iter_mut().zip(&s.place_attrs) {
                *acc += v;
            }
            for (acc, v) in object.iter_mut().zip(&s.object_attrs) {
                *acc += v;
            }
        }
        place.iter_mut().for_each(|v| *v /= n);
        object.iter_mut().for_each(|v| *v /= n);
        (place, object)
    }
}

/// Reads a JSONL dataset. Blank lines are skipped.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: Sample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        samples.push(sample);
    }
    Dataset::new(samples)
}

/// Writes a dataset as JSONL; floats use the shortest round-trip form.
pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for s in dataset.samples() {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Fractions and seed for a stratified train / test / validation split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub test: f64,
    pub val: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.6,
            test: 0.3,
            val: 0.1,
            seed: 0,
        }
    }
}

/// Sample indices of each part, ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub val: Vec<usize>,
}

/// Stratified split by dominant discrete emotion.
///
/// Within each stratum the exact quotas `m·fraction` are floored, and the
/// leftover samples go to the parts with the largest fractional remainders
/// (train before test before val on ties). Stratum members are shuffled with
/// the seed before being dealt out.
pub fn split(dataset: &Dataset, spec: &SplitSpec) -> Result<SplitIndices> {
    let fractions = [spec.train, spec.test, spec.val];
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        return Err(Error::Parameter(format!(
            "split fractions must be in [0,1] and sum to 1, got {fractions:?}"
        )));
    }
    let mut strata: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in dataset.samples().iter().enumerate() {
        strata.entry(s.dominant_emotion()).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for members in strata.values_mut() {
        members.shuffle(&mut rng);
        let counts = allocate(members.len(), &fractions);
        let mut offset = 0;
        for (part, &count) in parts.iter_mut().zip(&counts) {
            part.extend_from_slice(&members[offset..offset + count]);
            offset += count;
        }
    }
    for part in &mut parts {
        part.sort_unstable();
    }
    let [train, test, val] = parts;
    Ok(SplitIndices { train, test, val })
}

/// Largest-remainder apportionment of `m` items.
fn allocate(m: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = fractions.iter().map(|f| f * m as f64).collect();
    let mut counts = [0usize; 3];
    for (c, q) in counts.iter_mut().zip(&quotas) {
        *c = (q + 1e-9).floor() as usize;
    }
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - counts[a] as f64;
        let rb = quotas[b] - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    for &k in order.iter().take(m.saturating_sub(assigned)) {
        counts[k] += 1;
    }
    counts
}
