//! Co-occurrence counts between context attributes and discrete emotions, and
//! the conditional tables derived from them.
//!
//! Attributes of the place stream come first, followed by the object stream,
//! so row `a` of every attribute-indexed table refers to place attribute `a`
//! when `a < n_place` and to object attribute `a - n_place` otherwise.
//!
//! All probabilities are ratios of exact integer counts:
//!
//! ```text
//! P⁺[a,i] = N(a,i) / N(a)              Pr(emotion i | attribute a present)
//! P⁻[a,i] = (N(i) - N(a,i)) / (n - N(a))  Pr(emotion i | attribute a absent)
//! ```
//!
//! An attribute that is never present has its `P⁺` row set to the emotion
//! prior; one that is always present has its `P⁻` row set to the prior.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::{DISCRETE_EMOTIONS, N_DISCRETE};

/// Default attribute presence threshold.
pub const DEFAULT_THRESHOLD_ATTR: f64 = 0.01;
/// Default emotion presence threshold.
pub const DEFAULT_THRESHOLD_EMO: f64 = 0.5;

/// Which context stream an attribute belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stream {
    Place,
    Object,
}

impl Stream {
    pub fn name(self) -> &'static str {
        match self {
            Stream::Place => "place",
            Stream::Object => "object",
        }
    }

    /// The stream's attribute vector of a sample.
    pub fn attrs(self, sample: &Sample) -> &[f64] {
        match self {
            Stream::Place => &sample.place_attrs,
            Stream::Object => &sample.object_attrs,
        }
    }
}

/// Thresholds and smoothing used when building the tables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StatsConfig {
    pub threshold_attr: f64,
    pub threshold_emo: f64,
    /// Additive smoothing `α` applied to both conditionals.
    pub smoothing: f64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        Self {
            threshold_attr: DEFAULT_THRESHOLD_ATTR,
            threshold_emo: DEFAULT_THRESHOLD_EMO,
            smoothing: 0.0,
        }
    }
}

impl StatsConfig {
    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("threshold_attr", self.threshold_attr),
            ("threshold_emo", self.threshold_emo),
            ("smoothing", self.smoothing),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Parameter(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `raw[k] >= τ` for every entry.
pub fn binarize(raw: &[f64], threshold: f64) -> Result<Vec<bool>> {
    if !(threshold >= 0.0) {
        return Err(Error::Parameter(format!(
            "threshold must be >= 0, got {threshold}"
        )));
    }
    Ok(raw.iter().map(|&v| v >= threshold).collect())
}

/// Raw integer counts; mergeable across shards of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CooccurrenceCounts {
    pub n: u64,
    pub n_place: usize,
    pub n_object: usize,
    /// `N(i)` per emotion.
    pub emotion: Vec<u64>,
    /// `N(a)` per attribute.
    pub attribute: Vec<u64>,
    /// `N(a,i)`, row-major `[attributes × emotions]`.
    pub joint: Vec<u64>,
}

impl CooccurrenceCounts {
    pub fn new(n_place: usize, n_object: usize) -> Self {
        let k = n_place + n_object;
        Self {
            n: 0,
            n_place,
            n_object,
            emotion: vec![0; N_DISCRETE],
            attribute: vec![0; k],
            joint: vec![0; k * N_DISCRETE],
        }
    }

    pub fn n_attributes(&self) -> usize {
        self.n_place + self.n_object
    }

    /// Adds one sample's presence pattern.
    pub fn add(&mut self, sample: &Sample, config: &StatsConfig) -> Result<()> {
        if sample.place_attrs.len() != self.n_place || sample.object_attrs.len() != self.n_object
        {
            return Err(Error::Schema(format!(
                "sample {} has attribute widths ({}, {}), expected ({}, {})",
                sample.id,
                sample.place_attrs.len(),
                sample.object_attrs.len(),
                self.n_place,
                self.n_object
            )));
        }
        let emotions = binarize(&sample.emotions_discrete, config.threshold_emo)?;
        let present_emotions: Vec<usize> = (0..N_DISCRETE).filter(|&i| emotions[i]).collect();
        for &i in &present_emotions {
            self.emotion[i] += 1;
        }
        let attrs = sample.place_attrs.iter().chain(&sample.object_attrs);
        for (a, &v) in attrs.enumerate() {
            if v >= config.threshold_attr {
                self.attribute[a] += 1;
                let row = &mut self.joint[a * N_DISCRETE..(a + 1) * N_DISCRETE];
                for &i in &present_emotions {
                    row[i] += 1;
                }
            }
        }
        self.n += 1;
        Ok(())
    }

    /// Sums two count sets over disjoint sample shards.
    pub fn merge(&mut self, other: &CooccurrenceCounts) -> Result<()> {
        if (self.n_place, self.n_object) != (other.n_place, other.n_object) {
            return Err(Error::dim(
                "merge",
                &[self.n_place, self.n_object],
                &[other.n_place, other.n_object],
            ));
        }
        self.n += other.n;
        for (a, b) in self.emotion.iter_mut().zip(&other.emotion) {
            *a += b;
        }
        for (a, b) in self.attribute.iter_mut().zip(&other.attribute) {
            *a += b;
        }
        for (a, b) in self.joint.iter_mut().zip(&other.joint) {
            *a += b;
        }
        Ok(())
    }

    pub fn count(samples: &[Sample], config: &StatsConfig) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Input("empty dataset".into()))?;
        let mut counts = Self::new(first.place_attrs.len(), first.object_attrs.len());
        for s in samples {
            counts.add(s, config)?;
        }
        Ok(counts)
    }

    /// Counts `shards` contiguous chunks on separate threads and merges them.
    pub fn count_parallel(samples: &[Sample], config: &StatsConfig, shards: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Input("empty dataset".into()));
        }
        let chunk = samples.len().div_ceil(shards.max(1));
        let partials: Vec<Result<Self>> = std::thread::scope(|scope| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .map(|part| scope.spawn(move || Self::count(part, config)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("counting thread panicked"))
                .collect()
        });
        let mut iter = partials.into_iter();
        let mut total = iter.next().expect("at least one shard")?;
        for part in iter {
            total.merge(&part?)?;
        }
        Ok(total)
    }
}

/// Marginal, joint and conditional tables over (attribute, emotion) pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooccurrenceStats {
    pub n: u64,
    pub threshold_attr: f64,
    pub threshold_emo: f64,
    pub smoothing: f64,
    pub n_place: usize,
    pub n_object: usize,
    pub emotion_count: Vec<u64>,
    pub attribute_count: Vec<u64>,
    pub p_i: Vec<f64>,
    pub p_j: Vec<f64>,
    #[serde(rename = "C")]
    pub c: Tensor,
    #[serde(rename = "P_plus")]
    pub p_plus: Tensor,
    #[serde(rename = "P_minus")]
    pub p_minus: Tensor,
}

/// Builds the tables with the given thresholds and no smoothing.
pub fn build_cooccurrence(
    dataset: &Dataset,
    threshold_attr: f64,
    threshold_emo: f64,
) -> Result<CooccurrenceStats> {
    let config = StatsConfig {
        threshold_attr,
        threshold_emo,
        smoothing: 0.0,
    };
    CooccurrenceStats::build(dataset, &config)
}

impl CooccurrenceStats {
    pub fn build(dataset: &Dataset, config: &StatsConfig) -> Result<Self> {
        config.validate()?;
        let counts = CooccurrenceCounts::count(dataset.samples(), config)?;
        Self::from_counts(&counts, config)
    }

    pub fn from_counts(counts: &CooccurrenceCounts, config: &StatsConfig) -> Result<Self> {
        config.validate()?;
        if counts.n == 0 {
            return Err(Error::Input("empty dataset".into()));
        }
        let n = counts.n;
        let k = counts.n_attributes();
        let nf = n as f64;
        let alpha = config.smoothing;

        let p_i: Vec<f64> = counts.emotion.iter().map(|&c| c as f64 / nf).collect();
        let p_j: Vec<f64> = counts.attribute.iter().map(|&c| c as f64 / nf).collect();
        let mut c = Vec::with_capacity(k * N_DISCRETE);
        let mut plus = Vec::with_capacity(k * N_DISCRETE);
        let mut minus = Vec::with_capacity(k * N_DISCRETE);
        for a in 0..k {
            let na = counts.attribute[a];
            for i in 0..N_DISCRETE {
                let nai = counts.joint[a * N_DISCRETE + i];
                let ni = counts.emotion[i];
                c.push(nai as f64 / nf);
                plus.push(if na == 0 {
                    p_i[i]
                } else {
                    ratio(nai, na, alpha)
                });
                minus.push(if na == n {
                    p_i[i]
                } else {
                    ratio(ni - nai, n - na, alpha)
                });
            }
        }
        Ok(Self {
            n,
            threshold_attr: config.threshold_attr,
            threshold_emo: config.threshold_emo,
            smoothing: alpha,
            n_place: counts.n_place,
            n_object: counts.n_object,
            emotion_count: counts.emotion.clone(),
            attribute_count: counts.attribute.clone(),
            p_i,
            p_j,
            c: Tensor::matrix(k, N_DISCRETE, c)?,
            p_plus: Tensor::matrix(k, N_DISCRETE, plus)?,
            p_minus: Tensor::matrix(k, N_DISCRETE, minus)?,
        })
    }

    pub fn n_attributes(&self) -> usize {
        self.n_place + self.n_object
    }

    /// Global row index of a stream-local attribute.
    pub fn row_of(&self, stream: Stream, local: usize) -> usize {
        match stream {
            Stream::Place => local,
            Stream::Object => self.n_place + local,
        }
    }

    pub fn stream_width(&self, stream: Stream) -> usize {
        match stream {
            Stream::Place => self.n_place,
            Stream::Object => self.n_object,
        }
    }

    /// The `P⁺` and `P⁻` rows of the given stream-local attributes, as two
    /// `[selected × 26]` matrices.
    pub fn stream_rows(&self, stream: Stream, selected: &[usize]) -> Result<(Tensor, Tensor)> {
        let width = self.stream_width(stream);
        let mut plus = Vec::with_capacity(selected.len() * N_DISCRETE);
        let mut minus = Vec::with_capacity(selected.len() * N_DISCRETE);
        for &local in selected {
            if local >= width {
                return Err(Error::Parameter(format!(
                    "{} attribute {local} out of range for width {width}",
                    stream.name()
                )));
            }
            let row = self.row_of(stream, local);
            plus.extend_from_slice(self.p_plus.row(row));
            minus.extend_from_slice(self.p_minus.row(row));
        }
        Ok((
            Tensor::matrix(selected.len(), N_DISCRETE, plus)?,
            Tensor::matrix(selected.len(), N_DISCRETE, minus)?,
        ))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let stats: Self = serde_json::from_str(text)?;
        let k = stats.n_attributes();
        for (name, t) in [("C", &stats.c), ("P_plus", &stats.p_plus), ("P_minus", &stats.p_minus)] {
            if t.shape() != [k, N_DISCRETE] {
                return Err(Error::Schema(format!(
                    "{name} has shape {:?}, expected [{k}, {N_DISCRETE}]",
                    t.shape()
                )));
            }
        }
        if stats.p_i.len() != N_DISCRETE || stats.p_j.len() != k {
            return Err(Error::Schema("marginal lengths do not match table widths".into()));
        }
        Ok(stats)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// `P⁺` as CSV: one row per attribute, one column per emotion.
    pub fn p_plus_csv(&self) -> String {
        let mut out = String::from("attribute");
        for name in DISCRETE_EMOTIONS {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for a in 0..self.n_attributes() {
            let (stream, local) = if a < self.n_place {
                (Stream::Place, a)
            } else {
                (Stream::Object, a - self.n_place)
            };
            let _ = write!(out, "{}_{}", stream.name(), local);
            for v in self.p_plus.row(a) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }
}

fn ratio(num: u64, den: u64, alpha: f64) -> f64 {
    if alpha == 0.0 {
        num as f64 / den as f64
    } else {
        (num as f64 + alpha) / (den as f64 + 2.0 * alpha)
    }
}

/// Indices of the `k` largest values, lower index first on ties, returned in
/// ascending index order.
pub fn top_k(means: &[f64], k: usize) -> Result<Vec<usize>> {
    if k < 1 {
        return Err(Error::Parameter("κ must be at least 1".into()));
    }
    if k > means.len() {
        return Err(Error::Parameter(format!(
            "κ = {k} exceeds the attribute width {}",
            means.len()
        )));
    }
    let mut order: Vec<usize> = (0..means.len()).collect();
    order.sort_by(|&a, &b| means[b].total_cmp(&means[a]).then(a.cmp(&b)));
    let mut chosen = order[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// The top-κ attributes of each stream by mean activation.
pub fn select_top_attributes(
    place_means: &[f64],
    object_means: &[f64],
    kappa: usize,
) -> Result<(Vec<usize>, Vec<usize>)> {
    Ok((top_k(place_means, kappa)?, top_k(object_means, kappa)?))
}
