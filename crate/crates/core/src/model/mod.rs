//! The multi-stream network.
//!
//! A shared stem (`affine + relu` layers) maps the input features to `F`; an
//! emotion head maps `F` to 29 outputs, the first 26 squashed by the logistic
//! map. The frozen context streams are stood in for by a [`ContextProvider`]
//! that returns per-sample attribute vectors, which feed the fusion pipeline.
//!
//! Parameters are a flat list of named tensors, so the optimizer, the
//! checkpoint format and the gradient checks all share one view of them.

mod ablate;
mod train;

pub use ablate::{ablate, context_tables, AblationConfig, AblationResult};
pub use train::{learning_rate, sgd_step, train, Sgd, TrainConfig, TrainingHistory, EpochRecord};

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::fusion::{
    pipeline, project_stream_node, ContextTables, FusionConfig, FusionNodes, FusionParameters,
    FusionRule, FusionTrace, StreamNodes, StreamProjection,
};
use crate::loss::total_loss_node;
use crate::stats::Stream;
use crate::tensor::Tensor;
use crate::{N_DISCRETE, N_TARGETS};

/// Architecture variants compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoPlace,
    NoObject,
    QPlusOnly,
    IntermediateConcat,
    EmotionOnly,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::EmotionOnly,
        Variant::NoPlace,
        Variant::NoObject,
        Variant::QPlusOnly,
        Variant::IntermediateConcat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPlace => "no_place",
            Variant::NoObject => "no_object",
            Variant::QPlusOnly => "q_plus_only",
            Variant::IntermediateConcat => "intermediate_concat",
            Variant::EmotionOnly => "emotion_only",
        }
    }

    pub fn uses(self, stream: Stream) -> bool {
        !matches!(
            (self, stream),
            (Variant::NoPlace, Stream::Place) | (Variant::NoObject, Stream::Object)
        )
    }

    /// The fusion settings this variant runs with.
    pub fn fusion_config(self, base: FusionConfig) -> FusionConfig {
        match self {
            Variant::QPlusOnly => FusionConfig {
                rule: FusionRule::QPlusOnly,
                ..base
            },
            Variant::EmotionOnly => FusionConfig {
                lambda: 0.0,
                rule: FusionRule::Convex,
                ..base
            },
            _ => base,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown variant '{s}'")))
    }
}

/// Architecture and objective settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Widths of the stem's hidden layers; the last is `d_F`.
    pub stem_widths: Vec<usize>,
    pub fusion: FusionConfig,
    /// Weight of the tempered cross-entropy term.
    pub beta: f64,
    /// Seed of the weight initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stem_widths: vec![64, 32],
            fusion: FusionConfig::default(),
            beta: 0.0,
            init_seed: 0,
        }
    }
}

/// Source of the frozen context-stream outputs for a sample.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum ContextProvider {
    /// The sample's own `place_attrs` / `object_attrs`.
    #[default]
    DatasetColumn,
    /// Vectors looked up by sample id.
    FixedTable {
        place: HashMap<String, Vec<f64>>,
        object: HashMap<String, Vec<f64>>,
    },
}

impl ContextProvider {
    /// The stream's attribute vector for a sample.
    pub fn get<'a>(&'a self, sample: &'a Sample, stream: Stream) -> Result<&'a [f64]> {
        match self {
            ContextProvider::DatasetColumn => Ok(stream.attrs(sample)),
            ContextProvider::FixedTable { place, object } => {
                let table = match stream {
                    Stream::Place => place,
                    Stream::Object => object,
                };
                table.get(&sample.id).map(Vec::as_slice).ok_or_else(|| {
                    Error::Input(format!(
                        "no {} context for sample {}",
                        stream.name(),
                        sample.id
                    ))
                })
            }
        }
    }
}

/// One named parameter block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Network weights, frozen context tables and the settings that built them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub variant: Variant,
    pub config: ModelConfig,
    /// Fusion settings after applying the variant.
    pub fusion: FusionConfig,
    pub d_x: usize,
    pub n_place: usize,
    pub n_object: usize,
    pub params: Vec<NamedTensor>,
    /// Frozen; never touched by the optimizer.
    pub tables: ContextTables,
}

/// Graph nodes of every parameter, bound once per graph.
struct Bound {
    ids: Vec<NodeId>,
    stem: Vec<(NodeId, NodeId)>,
    head: (NodeId, NodeId),
    sigma: NodeId,
    place: Option<(NodeId, NodeId, NodeId, NodeId)>,
    object: Option<(NodeId, NodeId, NodeId, NodeId)>,
    concat: Option<(NodeId, NodeId)>,
}

/// Graph nodes of one sample's forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub y_tilde: NodeId,
    pub y_emotion: NodeId,
    /// Head output before the logistic map.
    pub h_emotion: NodeId,
    pub fusion: Option<FusionNodes>,
}

/// Plain-value result of one sample's forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub y_tilde: Vec<f64>,
    pub y_emotion: Vec<f64>,
    pub trace: Option<FusionTrace>,
}

fn uniform(rng: &mut ChaCha8Rng, len: usize, limit: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(-limit..limit)).collect()
}

impl Model {
    /// Randomly initialized weights with selector-initialized projections.
    pub fn init(
        variant: Variant,
        config: ModelConfig,
        tables: ContextTables,
        d_x: usize,
        n_place: usize,
        n_object: usize,
    ) -> Result<Self> {
        let fusion = variant.fusion_config(config.fusion);
        fusion.validate()?;
        tables.validate()?;
        if !(config.beta >= 0.0) {
            return Err(Error::Parameter(format!("β must be >= 0, got {}", config.beta)));
        }
        if config.stem_widths.is_empty() || config.stem_widths.contains(&0) {
            return Err(Error::Parameter("stem widths must be non-empty and positive".into()));
        }
        for stream in [Stream::Place, Stream::Object] {
            let active = tables.get(stream).is_some();
            if active != variant.uses(stream) {
                return Err(Error::Parameter(format!(
                    "variant {variant} and the context tables disagree on the {} stream",
                    stream.name()
                )));
            }
            let width = match stream {
                Stream::Place => n_place,
                Stream::Object => n_object,
            };
            if active && width == 0 {
                return Err(Error::Schema(format!(
                    "variant {variant} needs {} attributes but the data has none",
                    stream.name()
                )));
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = Vec::new();
        let mut push = |name: String, tensor: Tensor| params.push(NamedTensor { name, tensor });
        let mut fan_in = d_x;
        for (i, &width) in config.stem_widths.iter().enumerate() {
            let limit = (6.0 / fan_in as f64).sqrt();
            push(
                format!("stem.{i}.w"),
                Tensor::matrix(fan_in, width, uniform(&mut rng, fan_in * width, limit))?,
            );
            push(format!("stem.{i}.b"), Tensor::zeros(&[width]));
            fan_in = width;
        }
        let d_f = fan_in;

        let projections = FusionParameters::init(fusion, &tables, (n_place, n_object))?;
        let concat_width = d_f
            + projections.place.as_ref().map_or(0, |p| p.b.len())
            + projections.object.as_ref().map_or(0, |p| p.b.len());
        let concat = (variant == Variant::IntermediateConcat).then(|| {
            let limit = (6.0 / concat_width as f64).sqrt();
            uniform(&mut rng, concat_width * d_f, limit)
        });

        let limit = (6.0 / (d_f + N_TARGETS) as f64).sqrt();
        push(
            "head.w".into(),
            Tensor::matrix(d_f, N_TARGETS, uniform(&mut rng, d_f * N_TARGETS, limit))?,
        );
        push("head.b".into(), Tensor::zeros(&[N_TARGETS]));
        push("log_sigma".into(), Tensor::scalar(0.0));
        for (stream, proj) in [("place", projections.place), ("object", projections.object)] {
            if let Some(StreamProjection { f, b }) = proj {
                push(format!("fusion.{stream}.f"), f);
                push(format!("fusion.{stream}.b"), b);
            }
        }
        if let Some(w) = concat {
            push("concat.w".into(), Tensor::matrix(concat_width, d_f, w)?);
            push("concat.b".into(), Tensor::zeros(&[d_f]));
        }

        Ok(Self {
            variant,
            config,
            fusion,
            d_x,
            n_place,
            n_object,
            params,
            tables,
        })
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.tensor)
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::Schema(format!("missing parameter block '{name}'")))
    }

    /// Current temperature `σ = exp(log σ)`.
    pub fn sigma(&self) -> f64 {
        self.param("log_sigma").map_or(1.0, |t| t.data()[0].exp())
    }

    /// Adds every parameter and frozen table to `g`.
    fn bind(&self, g: &mut Graph) -> Result<Bound> {
        let ids: Vec<NodeId> = self.params.iter().map(|p| g.leaf(p.tensor.clone())).collect();
        let at = |name: &str| -> Result<NodeId> { Ok(ids[self.index(name)?]) };
        let stem = (0..self.config.stem_widths.len())
            .map(|i| Ok((at(&format!("stem.{i}.w"))?, at(&format!("stem.{i}.b"))?)))
            .collect::<Result<Vec<_>>>()?;
        let head = (at("head.w")?, at("head.b")?);
        let sigma = g.exp(at("log_sigma")?);
        let mut stream = |t: &Option<crate::fusion::StreamTables>, name: &str| -> Result<_> {
            match t {
                Some(t) => Ok(Some((
                    at(&format!("fusion.{name}.f"))?,
                    at(&format!("fusion.{name}.b"))?,
                    g.leaf(t.plus.clone()),
                    g.leaf(t.minus.clone()),
                ))),
                None => Ok(None),
            }
        };
        let place = stream(&self.tables.place, "place")?;
        let object = stream(&self.tables.object, "object")?;
        let concat = if self.variant == Variant::IntermediateConcat {
            Some((at("concat.w")?, at("concat.b")?))
        } else {
            None
        };
        Ok(Bound {
            ids,
            stem,
            head,
            sigma,
            place,
            object,
            concat,
        })
    }

    fn context<'a>(
        &self,
        sample: &'a Sample,
        provider: &'a ContextProvider,
        stream: Stream,
    ) -> Result<Option<&'a [f64]>> {
        if self.tables.get(stream).is_none() {
            return Ok(None);
        }
        let z = provider.get(sample, stream)?;
        let width = match stream {
            Stream::Place => self.n_place,
            Stream::Object => self.n_object,
        };
        if z.len() != width {
            return Err(Error::Schema(format!(
                "{} context of sample {} has width {}, expected {width}",
                stream.name(),
                sample.id,
                z.len()
            )));
        }
        Ok(Some(z))
    }

    fn forward_bound(
        &self,
        g: &mut Graph,
        bound: &Bound,
        sample: &Sample,
        provider: &ContextProvider,
    ) -> Result<ForwardNodes> {
        if sample.features.len() != self.d_x {
            return Err(Error::dim("forward", &[sample.features.len()], &[self.d_x]));
        }
        let mut h = g.leaf(Tensor::vector(sample.features.clone()));
        for &(w, b) in &bound.stem {
            let a = g.affine(h, w, b)?;
            h = g.relu(a);
        }
        let features = h;

        let mut streams = [None, None];
        for (slot, (stream, nodes)) in streams
            .iter_mut()
            .zip([(Stream::Place, bound.place), (Stream::Object, bound.object)])
        {
            if let (Some(z), Some((f, b, plus, minus))) =
                (self.context(sample, provider, stream)?, nodes)
            {
                let z = g.leaf(Tensor::vector(z.to_vec()));
                *slot = Some(StreamNodes { z, f, b, plus, minus });
            }
        }

        let head_input = match bound.concat {
            Some((w, b)) => {
                let mut parts = Vec::new();
                for s in streams.iter().flatten() {
                    parts.push(project_stream_node(g, s.z, s.f, s.b)?);
                }
                parts.push(features);
                let cat = g.concat(&parts)?;
                let a = g.affine(cat, w, b)?;
                g.relu(a)
            }
            None => features,
        };
        let h_emotion = g.affine(head_input, bound.head.0, bound.head.1)?;
        let logits = g.slice(h_emotion, 0, N_DISCRETE)?;
        let discrete = g.sigmoid(logits);
        let continuous = g.slice(h_emotion, N_DISCRETE, N_TARGETS)?;
        let y_emotion = g.concat(&[discrete, continuous])?;

        if bound.concat.is_some() {
            return Ok(ForwardNodes {
                y_tilde: y_emotion,
                y_emotion,
                h_emotion,
                fusion: None,
            });
        }
        let nodes = pipeline(g, streams[0].as_ref(), streams[1].as_ref(), y_emotion, &self.fusion)?;
        Ok(ForwardNodes {
            y_tilde: nodes.fused,
            y_emotion,
            h_emotion,
            fusion: Some(nodes),
        })
    }

    /// Runs one sample through the network.
    pub fn forward(&self, sample: &Sample, provider: &ContextProvider) -> Result<Prediction> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let out = self.forward_bound(&mut g, &bound, sample, provider)?;
        Ok(Prediction {
            y_tilde: g.value(out.y_tilde).data().to_vec(),
            y_emotion: g.value(out.y_emotion).data().to_vec(),
            trace: out.fusion.map(|f| f.trace(&g)),
        })
    }

    /// Fused predictions for every sample.
    pub fn predict(&self, dataset: &Dataset, provider: &ContextProvider) -> Result<Vec<[f64; N_TARGETS]>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let base = g.len();
        let mut out = Vec::with_capacity(dataset.len());
        for sample in dataset.samples() {
            let nodes = self.forward_bound(&mut g, &bound, sample, provider)?;
            let mut row = [0.0; N_TARGETS];
            row.copy_from_slice(g.value(nodes.y_tilde).data());
            out.push(row);
            g.truncate(base);
        }
        Ok(out)
    }

    /// Per-sample traces of the fusion pipeline.
    pub fn traces(&self, dataset: &Dataset, provider: &ContextProvider) -> Result<Vec<Option<FusionTrace>>> {
        dataset
            .samples()
            .iter()
            .map(|s| Ok(self.forward(s, provider)?.trace))
            .collect()
    }

    /// Mean per-sample loss over a dataset, without gradients.
    pub fn mean_loss(&self, dataset: &Dataset, provider: &ContextProvider) -> Result<f64> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let base = g.len();
        let mut total = 0.0;
        for (i, sample) in dataset.samples().iter().enumerate() {
            let loss = self.sample_loss(&mut g, &bound, sample, dataset.target(i), provider)?;
            total += g.value(loss).scalar_value();
            g.truncate(base);
        }
        Ok(total / dataset.len() as f64)
    }

    fn sample_loss(
        &self,
        g: &mut Graph,
        bound: &Bound,
        sample: &Sample,
        target: &[f64; N_TARGETS],
        provider: &ContextProvider,
    ) -> Result<NodeId> {
        let out = self.forward_bound(g, bound, sample, provider)?;
        let y = g.leaf(Tensor::vector(target.to_vec()));
        total_loss_node(g, y, out.y_tilde, out.h_emotion, bound.sigma, self.config.beta)
    }

    /// Mean loss over `indices` and the gradient of every parameter block.
    pub fn loss_and_gradients(
        &self,
        dataset: &Dataset,
        indices: &[usize],
        provider: &ContextProvider,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        if indices.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g)?;
        let mut losses = Vec::with_capacity(indices.len());
        for &i in indices {
            losses.push(self.sample_loss(&mut g, &bound, dataset.sample(i), dataset.target(i), provider)?);
        }
        let stacked = g.concat(&losses)?;
        let sum = g.sum(stacked);
        let mean = g.scale(sum, 1.0 / indices.len() as f64);
        g.backward(mean)?;
        let grads = bound.ids.iter().map(|&id| g.grad_data(id).to_vec()).collect();
        Ok((g.value(mean).scalar_value(), grads))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: Self = serde_json::from_str(&text)?;
        model.fusion.validate()?;
        model.tables.validate()?;
        Ok(model)
    }
}
