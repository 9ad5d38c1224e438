//! Probabilistic late fusion of context streams with the emotion stream.
//!
//! For one sample the pipeline is:
//!
//! 1. each context stream's attribute vector `z` is projected to mixture
//!    weights `w = softmax(zᵀf + b)` over its κ selected attributes;
//! 2. the weights mix the selected rows of `P⁺` and `P⁻`, giving one row per
//!    stream of the stacked `2 × 26` matrices;
//! 3. `Q` is the columnwise max of the stacked `P⁺`;
//! 4. `P̂ = Q⊙P⁺ + (1−Q)⊙P⁻`, with `Q` broadcast over both rows, is
//!    collapsed over rows into a 26-dim context vector;
//! 5. the context is fused into the discrete slice of the emotion-stream
//!    prediction; the continuous slice passes through.
//!
//! When only one stream is active it fills both rows of the stacked matrices.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::stats::{CooccurrenceStats, Stream};
use crate::tensor::Tensor;
use crate::{N_DISCRETE, N_TARGETS};

/// How the pooled context enters the prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionRule {
    /// `(1−λ)·y + λ·context` on the discrete dims.
    #[default]
    Convex,
    /// `clamp(context/λ, 0, 1)` on the discrete dims.
    Reciprocal,
    /// Convex, with the pooled estimate reduced to `Q⊙P⁺`.
    QPlusOnly,
}

/// Reduction of the two pooled stream rows to one context vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Collapse {
    #[default]
    Mean,
    Max,
}

/// Fusion hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    /// Requested number of attributes per stream; clamped to each stream's
    /// width.
    pub kappa: usize,
    pub lambda: f64,
    pub rule: FusionRule,
    pub collapse: Collapse,
    /// Magnitude of the one-hot selector used to initialize `f`.
    pub init_scale: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            kappa: 56,
            lambda: 0.2,
            rule: FusionRule::Convex,
            collapse: Collapse::Mean,
            init_scale: 5.0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kappa < 1 {
            return Err(Error::Parameter("κ must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Parameter(format!(
                "λ must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if self.rule == FusionRule::Reciprocal && self.lambda == 0.0 {
            return Err(Error::Parameter(
                "the reciprocal rule requires λ > 0".into(),
            ));
        }
        Ok(())
    }

    /// κ for a stream of the given width.
    pub fn kappa_for(&self, width: usize) -> usize {
        self.kappa.min(width)
    }
}

/// Frozen `P⁺`/`P⁻` rows of one stream's selected attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamTables {
    pub stream: Stream,
    /// Stream-local indices of the selected attributes.
    pub selected: Vec<usize>,
    /// `[κ × 26]`.
    pub plus: Tensor,
    /// `[κ × 26]`.
    pub minus: Tensor,
}

impl StreamTables {
    pub fn from_stats(stats: &CooccurrenceStats, stream: Stream, selected: Vec<usize>) -> Result<Self> {
        let (plus, minus) = stats.stream_rows(stream, &selected)?;
        Ok(Self {
            stream,
            selected,
            plus,
            minus,
        })
    }

    pub fn kappa(&self) -> usize {
        self.selected.len()
    }
}

/// The frozen tables of the active streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextTables {
    pub place: Option<StreamTables>,
    pub object: Option<StreamTables>,
}

impl ContextTables {
    pub fn validate(&self) -> Result<()> {
        if self.place.is_none() && self.object.is_none() {
            return Err(Error::Parameter("at least one context stream is required".into()));
        }
        Ok(())
    }

    pub fn get(&self, stream: Stream) -> Option<&StreamTables> {
        match stream {
            Stream::Place => self.place.as_ref(),
            Stream::Object => self.object.as_ref(),
        }
    }
}

/// Trainable projection `f[κ_in × κ]`, `b[κ]` of one stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamProjection {
    pub f: Tensor,
    pub b: Tensor,
}

impl StreamProjection {
    /// `f[selected[j], j] = scale`, zero elsewhere; `b = 0`.
    pub fn selector(width: usize, selected: &[usize], scale: f64) -> Result<Self> {
        let k = selected.len();
        let mut f = vec![0.0; width * k];
        for (j, &a) in selected.iter().enumerate() {
            if a >= width {
                return Err(Error::Parameter(format!(
                    "selected attribute {a} out of range for width {width}"
                )));
            }
            f[a * k + j] = scale;
        }
        Ok(Self {
            f: Tensor::matrix(width, k, f)?,
            b: Tensor::zeros(&[k]),
        })
    }
}

/// Trainable projections of the active streams plus the fusion settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParameters {
    pub config: FusionConfig,
    pub place: Option<StreamProjection>,
    pub object: Option<StreamProjection>,
}

impl FusionParameters {
    /// Selector-initialized projections matching `tables`.
    pub fn init(config: FusionConfig, tables: &ContextTables, widths: (usize, usize)) -> Result<Self> {
        config.validate()?;
        tables.validate()?;
        let make = |t: &Option<StreamTables>, width: usize| {
            t.as_ref()
                .map(|t| StreamProjection::selector(width, &t.selected, config.init_scale))
                .transpose()
        };
        Ok(Self {
            config,
            place: make(&tables.place, widths.0)?,
            object: make(&tables.object, widths.1)?,
        })
    }

    /// Runs the pipeline on plain values and returns the full trace.
    pub fn forward(
        &self,
        tables: &ContextTables,
        z_place: &[f64],
        z_object: &[f64],
        y_emotion: &[f64],
    ) -> Result<FusionTrace> {
        let mut g = Graph::new();
        let mut input = |proj: &Option<StreamProjection>, t: &Option<StreamTables>, z: &[f64]| {
            match (proj, t) {
                (Some(p), Some(t)) => Ok(Some(StreamNodes {
                    z: g.leaf(Tensor::vector(z.to_vec())),
                    f: g.leaf(p.f.clone()),
                    b: g.leaf(p.b.clone()),
                    plus: g.leaf(t.plus.clone()),
                    minus: g.leaf(t.minus.clone()),
                })),
                (None, None) => Ok(None),
                _ => Err(Error::Parameter(
                    "projection and table streams do not match".into(),
                )),
            }
        };
        let place = input(&self.place, &tables.place, z_place)?;
        let object = input(&self.object, &tables.object, z_object)?;
        let y = g.leaf(Tensor::vector(y_emotion.to_vec()));
        let nodes = pipeline(&mut g, place.as_ref(), object.as_ref(), y, &self.config)?;
        Ok(nodes.trace(&g))
    }
}

/// Graph inputs of one stream.
#[derive(Debug, Clone, Copy)]
pub struct StreamNodes {
    pub z: NodeId,
    pub f: NodeId,
    pub b: NodeId,
    pub plus: NodeId,
    pub minus: NodeId,
}

/// Graph nodes of every pipeline stage.
#[derive(Debug, Clone, Copy)]
pub struct FusionNodes {
    pub w_place: Option<NodeId>,
    pub w_object: Option<NodeId>,
    pub p_plus_2: NodeId,
    pub p_minus_2: NodeId,
    pub q: NodeId,
    pub p_hat: NodeId,
    pub context: NodeId,
    pub fused: NodeId,
}

impl FusionNodes {
    pub fn trace(&self, g: &Graph) -> FusionTrace {
        let vec_of = |id: Option<NodeId>| id.map(|id| g.value(id).data().to_vec()).unwrap_or_default();
        let rows_of = |id: NodeId| {
            let t = g.value(id);
            (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
        };
        FusionTrace {
            w_place: vec_of(self.w_place),
            w_object: vec_of(self.w_object),
            p_plus_2: rows_of(self.p_plus_2),
            p_minus_2: rows_of(self.p_minus_2),
            q: vec_of(Some(self.q)),
            p_hat: rows_of(self.p_hat),
            context: vec_of(Some(self.context)),
            fused: vec_of(Some(self.fused)),
        }
    }
}

/// Intermediate values of one sample's fusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionTrace {
    pub w_place: Vec<f64>,
    pub w_object: Vec<f64>,
    #[serde(rename = "P_plus_2")]
    pub p_plus_2: Vec<Vec<f64>>,
    #[serde(rename = "P_minus_2")]
    pub p_minus_2: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    pub q: Vec<f64>,
    #[serde(rename = "P_hat")]
    pub p_hat: Vec<Vec<f64>>,
    pub context: Vec<f64>,
    pub fused: Vec<f64>,
}

/// `softmax(zᵀf + b)`.
pub fn project_stream_node(g: &mut Graph, z: NodeId, f: NodeId, b: NodeId) -> Result<NodeId> {
    let logits = g.affine(z, f, b)?;
    g.softmax(logits)
}

/// `wᵀM`: a mixture of the selected attributes' conditional rows.
pub fn stream_conditionals_node(g: &mut Graph, w: NodeId, m: NodeId) -> Result<NodeId> {
    g.vecmat(w, m)
}

/// `Q[i] = max_j P⁺₂[j,i]`.
pub fn compute_q_node(g: &mut Graph, p_plus_2: NodeId) -> Result<NodeId> {
    g.row_max(p_plus_2)
}

/// `P̂ = Q⊙P⁺ + (1−Q)⊙P⁻` (or `Q⊙P⁺` alone) and its collapsed context.
pub fn pool_node(
    g: &mut Graph,
    q: NodeId,
    p_plus_2: NodeId,
    p_minus_2: Option<NodeId>,
    collapse: Collapse,
) -> Result<(NodeId, NodeId)> {
    let present = g.mul_row_broadcast(p_plus_2, q)?;
    let p_hat = match p_minus_2 {
        Some(minus) => {
            let not_q = g.one_minus(q);
            let absent = g.mul_row_broadcast(minus, not_q)?;
            g.add(present, absent)?
        }
        None => present,
    };
    let context = match collapse {
        Collapse::Mean => g.mean_rows(p_hat)?,
        Collapse::Max => g.row_max(p_hat)?,
    };
    Ok((p_hat, context))
}

/// Fuses the context into the discrete slice of `y_emotion`.
pub fn fuse_node(
    g: &mut Graph,
    y_emotion: NodeId,
    context: NodeId,
    lambda: f64,
    rule: FusionRule,
) -> Result<NodeId> {
    let len = g.value(y_emotion).len();
    if len != N_TARGETS {
        return Err(Error::dim("fuse", &[len], &[N_TARGETS]));
    }
    if g.value(context).len() != N_DISCRETE {
        return Err(Error::dim("fuse", g.value(context).shape(), &[N_DISCRETE]));
    }
    let discrete = match rule {
        FusionRule::Convex | FusionRule::QPlusOnly => {
            if lambda == 0.0 {
                return Ok(y_emotion);
            }
            let y = g.slice(y_emotion, 0, N_DISCRETE)?;
            let keep = g.scale(y, 1.0 - lambda);
            let prior = g.scale(context, lambda);
            g.add(keep, prior)?
        }
        FusionRule::Reciprocal => {
            if lambda == 0.0 {
                return Err(Error::Parameter("the reciprocal rule requires λ > 0".into()));
            }
            let scaled = g.scale(context, 1.0 / lambda);
            g.clamp(scaled, 0.0, 1.0)
        }
    };
    let continuous = g.slice(y_emotion, N_DISCRETE, N_TARGETS)?;
    g.concat(&[discrete, continuous])
}

/// The whole pipeline from stream inputs to the fused prediction.
pub fn pipeline(
    g: &mut Graph,
    place: Option<&StreamNodes>,
    object: Option<&StreamNodes>,
    y_emotion: NodeId,
    config: &FusionConfig,
) -> Result<FusionNodes> {
    config.validate()?;
    let mut stream = |s: Option<&StreamNodes>| -> Result<Option<(NodeId, NodeId, NodeId)>> {
        s.map(|s| {
            let w = project_stream_node(g, s.z, s.f, s.b)?;
            let plus = stream_conditionals_node(g, w, s.plus)?;
            let minus = stream_conditionals_node(g, w, s.minus)?;
            Ok((w, plus, minus))
        })
        .transpose()
    };
    let p = stream(place)?;
    let o = stream(object)?;
    let (first, second) = match (p, o) {
        (Some(p), Some(o)) => (p, o),
        (Some(p), None) => (p, p),
        (None, Some(o)) => (o, o),
        (None, None) => {
            return Err(Error::Parameter("at least one context stream is required".into()))
        }
    };
    let p_plus_2 = g.stack(&[first.1, second.1])?;
    let p_minus_2 = g.stack(&[first.2, second.2])?;
    let q = compute_q_node(g, p_plus_2)?;
    let minus = (config.rule != FusionRule::QPlusOnly).then_some(p_minus_2);
    let (p_hat, context) = pool_node(g, q, p_plus_2, minus, config.collapse)?;
    let fused = fuse_node(g, y_emotion, context, config.lambda, config.rule)?;
    Ok(FusionNodes {
        w_place: p.map(|t| t.0),
        w_object: o.map(|t| t.0),
        p_plus_2,
        p_minus_2,
        q,
        p_hat,
        context,
        fused,
    })
}

fn run<const N: usize>(
    inputs: [Tensor; N],
    build: impl FnOnce(&mut Graph, [NodeId; N]) -> Result<NodeId>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let ids = inputs.map(|t| g.leaf(t));
    let out = build(&mut g, ids)?;
    Ok(g.value(out).clone())
}

/// Value form of [`project_stream_node`].
pub fn project_stream(z: &[f64], f: &Tensor, b: &[f64]) -> Result<Vec<f64>> {
    let out = run(
        [Tensor::vector(z.to_vec()), f.clone(), Tensor::vector(b.to_vec())],
        |g, [z, f, b]| project_stream_node(g, z, f, b),
    )?;
    Ok(out.into_data())
}

/// Value form of [`stream_conditionals_node`].
pub fn stream_conditionals(w: &[f64], m_sel: &Tensor) -> Result<Vec<f64>> {
    let out = run([Tensor::vector(w.to_vec()), m_sel.clone()], |g, [w, m]| {
        stream_conditionals_node(g, w, m)
    })?;
    Ok(out.into_data())
}

/// Value form of [`compute_q_node`].
pub fn compute_q(p_plus_2: &Tensor) -> Result<Vec<f64>> {
    Ok(run([p_plus_2.clone()], |g, [p]| compute_q_node(g, p))?.into_data())
}

/// Value form of [`pool_node`] with the `P⁻` term.
pub fn pool(q: &[f64], p_plus_2: &Tensor, p_minus_2: &Tensor, collapse: Collapse) -> Result<(Tensor, Vec<f64>)> {
    let mut g = Graph::new();
    let q = g.leaf(Tensor::vector(q.to_vec()));
    let plus = g.leaf(p_plus_2.clone());
    let minus = g.leaf(p_minus_2.clone());
    let (p_hat, context) = pool_node(&mut g, q, plus, Some(minus), collapse)?;
    Ok((g.value(p_hat).clone(), g.value(context).data().to_vec()))
}

/// Value form of [`fuse_node`].
pub fn fuse(y_emotion: &[f64], context: &[f64], lambda: f64, rule: FusionRule) -> Result<Vec<f64>> {
    let out = run(
        [Tensor::vector(y_emotion.to_vec()), Tensor::vector(context.to_vec())],
        |g, [y, c]| fuse_node(g, y, c, lambda, rule),
    )?;
    Ok(out.into_data())
}
