//! A finite-difference check of every differentiable operation and of the
//! composed fusion pipeline.
//!
//! Each case draws random points, reduces the operation's output to a scalar
//! through a random linear readout, and compares the reverse-mode gradient
//! with central differences. Points within a small margin of a ReLU, clamp
//! or max kink are redrawn.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check_many, Graph, NodeId};
use crate::error::{Error, Result};
use crate::fusion::{
    compute_q_node, fuse_node, pipeline, pool_node, project_stream_node, stream_conditionals_node,
    Collapse, FusionConfig, FusionRule, StreamNodes,
};
use crate::loss::{mse_node, tempered_cross_entropy_node, tempered_softmax_node, total_loss_node};
use crate::tensor::Tensor;
use crate::{N_DISCRETE, N_TARGETS};

/// Suite settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub points: usize,
    pub eps: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Negates the reported gradient of the named case; a negative control.
    pub inject_sign_flip: Option<String>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            points: 100,
            eps: 1e-5,
            tolerance: 1e-4,
            seed: 0,
            inject_sign_flip: None,
        }
    }
}

/// Result of one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub name: String,
    pub points: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

type ScalarFn = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId>>;

/// One random point: inputs and the scalar function evaluated there.
struct Point {
    inputs: Vec<Tensor>,
    f: ScalarFn,
}

/// Draws a point, or `None` when it lies too close to a kink.
type Sampler = fn(&mut ChaCha8Rng) -> Result<Option<Point>>;

const KINK_MARGIN: f64 = 1e-3;

fn vec_in(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn vector(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::vector(vec_in(rng, n, lo, hi))
}

fn matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::matrix(r, c, vec_in(rng, r * c, lo, hi)).expect("sizes agree")
}

/// `Σ c ⊙ node` with fixed random weights `c`.
fn readout(g: &mut Graph, node: NodeId, weights: &[f64]) -> Result<NodeId> {
    let shape = g.value(node).shape().to_vec();
    let c = g.leaf(Tensor::new(shape, weights.to_vec())?);
    let prod = g.mul(node, c)?;
    Ok(g.sum(prod))
}

/// Wraps an operation with a random readout of its output.
fn point(
    rng: &mut ChaCha8Rng,
    inputs: Vec<Tensor>,
    op: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId> + 'static,
) -> Result<Option<Point>> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = op(&mut g, &ids)?;
    let weights = vec_in(rng, g.value(out).len(), -1.0, 1.0);
    Ok(Some(Point {
        inputs,
        f: Box::new(move |g, ids| {
            let out = op(g, ids)?;
            readout(g, out, &weights)
        }),
    }))
}

/// True when some column's two largest entries are within the margin.
fn has_tie(m: &Tensor) -> bool {
    let (r, c) = (m.rows(), m.cols());
    (0..c).any(|j| {
        let mut col: Vec<f64> = (0..r).map(|i| m.get2(i, j)).collect();
        col.sort_by(|a, b| b.total_cmp(a));
        col.len() > 1 && col[0] - col[1] < KINK_MARGIN
    })
}

fn near(values: &[f64], kinks: &[f64]) -> bool {
    values
        .iter()
        .any(|v| kinks.iter().any(|k| (v - k).abs() < KINK_MARGIN))
}

fn pipeline_point(rng: &mut ChaCha8Rng, config: FusionConfig, two_streams: bool) -> Result<Option<Point>> {
    let (wp, kp, wo, ko) = (6, 4, 5, 3);
    let plus_p = matrix(rng, kp, N_DISCRETE, 0.0, 1.0);
    let minus_p = matrix(rng, kp, N_DISCRETE, 0.0, 1.0);
    let plus_o = matrix(rng, ko, N_DISCRETE, 0.0, 1.0);
    let minus_o = matrix(rng, ko, N_DISCRETE, 0.0, 1.0);
    let target = vec_in(rng, N_TARGETS, 0.0, 1.0);
    let inputs = vec![
        vector(rng, wp, 0.0, 1.0),
        matrix(rng, wp, kp, -2.0, 2.0),
        vector(rng, kp, -0.5, 0.5),
        vector(rng, wo, 0.0, 1.0),
        matrix(rng, wo, ko, -2.0, 2.0),
        vector(rng, ko, -0.5, 0.5),
        vector(rng, N_TARGETS, 0.05, 0.95),
    ];
    let build = move |g: &mut Graph, ids: &[NodeId]| -> Result<(crate::fusion::FusionNodes, NodeId)> {
        let place = StreamNodes {
            z: ids[0],
            f: ids[1],
            b: ids[2],
            plus: g.leaf(plus_p.clone()),
            minus: g.leaf(minus_p.clone()),
        };
        let object = StreamNodes {
            z: ids[3],
            f: ids[4],
            b: ids[5],
            plus: g.leaf(plus_o.clone()),
            minus: g.leaf(minus_o.clone()),
        };
        let nodes = pipeline(g, Some(&place), two_streams.then_some(&object), ids[6], &config)?;
        let y = g.leaf(Tensor::vector(target.clone()));
        let loss = mse_node(g, y, nodes.fused)?;
        Ok((nodes, loss))
    };

    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let (nodes, _) = build(&mut g, &ids)?;
    if two_streams && has_tie(g.value(nodes.p_plus_2)) {
        return Ok(None);
    }
    if config.collapse == Collapse::Max && has_tie(g.value(nodes.p_hat)) {
        return Ok(None);
    }
    Ok(Some(Point {
        inputs,
        f: Box::new(move |g, ids| Ok(build(g, ids)?.1)),
    }))
}

fn cases() -> Vec<(&'static str, Sampler)> {
    vec![
        ("affine", |r| {
            let inputs = vec![vector(r, 4, -1.0, 1.0), matrix(r, 4, 3, -1.0, 1.0), vector(r, 3, -1.0, 1.0)];
            point(r, inputs, |g, i| g.affine(i[0], i[1], i[2]))
        }),
        ("vecmat", |r| {
            let inputs = vec![vector(r, 4, -1.0, 1.0), matrix(r, 4, 3, -1.0, 1.0)];
            point(r, inputs, |g, i| g.vecmat(i[0], i[1]))
        }),
        ("relu", |r| {
            let x = vec_in(r, 6, -1.0, 1.0);
            if near(&x, &[0.0]) {
                return Ok(None);
            }
            point(r, vec![Tensor::vector(x)], |g, i| Ok(g.relu(i[0])))
        }),
        ("sigmoid", |r| {
            let inputs = vec![vector(r, 6, -3.0, 3.0)];
            point(r, inputs, |g, i| Ok(g.sigmoid(i[0])))
        }),
        ("exp", |r| {
            let inputs = vec![vector(r, 5, -2.0, 2.0)];
            point(r, inputs, |g, i| Ok(g.exp(i[0])))
        }),
        ("powf", |r| {
            let inputs = vec![vector(r, 5, 0.5, 2.0)];
            point(r, inputs, |g, i| Ok(g.powf(i[0], -2.0)))
        }),
        ("softmax", |r| {
            let inputs = vec![vector(r, 5, -2.0, 2.0)];
            point(r, inputs, |g, i| g.softmax(i[0]))
        }),
        ("row_max", |r| {
            let m = matrix(r, 3, 4, -1.0, 1.0);
            if has_tie(&m) {
                return Ok(None);
            }
            point(r, vec![m], |g, i| g.row_max(i[0]))
        }),
        ("stack", |r| {
            let inputs = vec![vector(r, 4, -1.0, 1.0), vector(r, 4, -1.0, 1.0)];
            point(r, inputs, |g, i| g.stack(&[i[0], i[1]]))
        }),
        ("concat", |r| {
            let inputs = vec![vector(r, 3, -1.0, 1.0), vector(r, 2, -1.0, 1.0)];
            point(r, inputs, |g, i| g.concat(&[i[0], i[1]]))
        }),
        ("slice", |r| {
            let inputs = vec![vector(r, 6, -1.0, 1.0)];
            point(r, inputs, |g, i| g.slice(i[0], 1, 4))
        }),
        ("add", |r| {
            let inputs = vec![vector(r, 5, -1.0, 1.0), vector(r, 5, -1.0, 1.0)];
            point(r, inputs, |g, i| g.add(i[0], i[1]))
        }),
        ("sub", |r| {
            let inputs = vec![vector(r, 5, -1.0, 1.0), vector(r, 5, -1.0, 1.0)];
            point(r, inputs, |g, i| g.sub(i[0], i[1]))
        }),
        ("mul", |r| {
            let inputs = vec![vector(r, 5, -1.0, 1.0), vector(r, 5, -1.0, 1.0)];
            point(r, inputs, |g, i| g.mul(i[0], i[1]))
        }),
        ("scale", |r| {
            let inputs = vec![vector(r, 4, -1.0, 1.0)];
            point(r, inputs, |g, i| Ok(g.scale(i[0], -1.7)))
        }),
        ("add_scalar", |r| {
            let inputs = vec![vector(r, 4, -1.0, 1.0)];
            point(r, inputs, |g, i| Ok(g.add_scalar(i[0], 0.3)))
        }),
        ("one_minus", |r| {
            let inputs = vec![vector(r, 4, 0.0, 1.0)];
            point(r, inputs, |g, i| Ok(g.one_minus(i[0])))
        }),
        ("scale_by", |r| {
            let inputs = vec![vector(r, 4, -1.0, 1.0), vector(r, 1, -2.0, 2.0)];
            point(r, inputs, |g, i| g.scale_by(i[0], i[1]))
        }),
        ("mul_row_broadcast", |r| {
            let inputs = vec![matrix(r, 2, 5, -1.0, 1.0), vector(r, 5, -1.0, 1.0)];
            point(r, inputs, |g, i| g.mul_row_broadcast(i[0], i[1]))
        }),
        ("mean_rows", |r| {
            let inputs = vec![matrix(r, 3, 4, -1.0, 1.0)];
            point(r, inputs, |g, i| g.mean_rows(i[0]))
        }),
        ("sum", |r| {
            let inputs = vec![vector(r, 5, -1.0, 1.0)];
            point(r, inputs, |g, i| Ok(g.sum(i[0])))
        }),
        ("log_sum_exp", |r| {
            let inputs = vec![vector(r, 5, -2.0, 2.0)];
            point(r, inputs, |g, i| g.log_sum_exp(i[0]))
        }),
        ("pick", |r| {
            let inputs = vec![vector(r, 5, -1.0, 1.0)];
            point(r, inputs, |g, i| g.pick(i[0], 2))
        }),
        ("squared_distance", |r| {
            let inputs = vec![vector(r, 5, -1.0, 1.0), vector(r, 5, -1.0, 1.0)];
            point(r, inputs, |g, i| g.squared_distance(i[0], i[1]))
        }),
        ("clamp", |r| {
            let x = vec_in(r, 6, -1.0, 1.0);
            if near(&x, &[-0.5, 0.5]) {
                return Ok(None);
            }
            point(r, vec![Tensor::vector(x)], |g, i| Ok(g.clamp(i[0], -0.5, 0.5)))
        }),
        ("tempered_softmax", |r| {
            let inputs = vec![vector(r, 5, -2.0, 2.0), vector(r, 1, 0.5, 2.0)];
            point(r, inputs, |g, i| tempered_softmax_node(g, i[0], i[1]))
        }),
        ("tempered_cross_entropy", |r| {
            let target = r.random_range(0..5);
            let inputs = vec![vector(r, 5, -2.0, 2.0), vector(r, 1, 0.5, 2.0)];
            point(r, inputs, move |g, i| tempered_cross_entropy_node(g, i[0], i[1], target))
        }),
        ("mse_loss", |r| {
            let inputs = vec![vector(r, N_TARGETS, 0.0, 1.0), vector(r, N_TARGETS, 0.0, 1.0)];
            point(r, inputs, |g, i| mse_node(g, i[0], i[1]))
        }),
        ("total_loss", |r| {
            let inputs = vec![
                vector(r, N_TARGETS, 0.0, 1.0),
                vector(r, N_TARGETS, 0.0, 1.0),
                vector(r, N_TARGETS, -2.0, 2.0),
                vector(r, 1, 0.5, 2.0),
            ];
            point(r, inputs, |g, i| total_loss_node(g, i[0], i[1], i[2], i[3], 0.5))
        }),
        ("project_stream", |r| {
            let inputs = vec![vector(r, 6, 0.0, 1.0), matrix(r, 6, 4, -2.0, 2.0), vector(r, 4, -0.5, 0.5)];
            point(r, inputs, |g, i| project_stream_node(g, i[0], i[1], i[2]))
        }),
        ("stream_conditionals", |r| {
            let inputs = vec![vector(r, 4, 0.0, 1.0), matrix(r, 4, N_DISCRETE, 0.0, 1.0)];
            point(r, inputs, |g, i| stream_conditionals_node(g, i[0], i[1]))
        }),
        ("compute_q", |r| {
            let m = matrix(r, 2, N_DISCRETE, 0.0, 1.0);
            if has_tie(&m) {
                return Ok(None);
            }
            point(r, vec![m], |g, i| compute_q_node(g, i[0]))
        }),
        ("pool", |r| {
            let inputs = vec![
                vector(r, N_DISCRETE, 0.0, 1.0),
                matrix(r, 2, N_DISCRETE, 0.0, 1.0),
                matrix(r, 2, N_DISCRETE, 0.0, 1.0),
            ];
            point(r, inputs, |g, i| Ok(pool_node(g, i[0], i[1], Some(i[2]), Collapse::Mean)?.1))
        }),
        ("pool_q_plus_only", |r| {
            let inputs = vec![vector(r, N_DISCRETE, 0.0, 1.0), matrix(r, 2, N_DISCRETE, 0.0, 1.0)];
            point(r, inputs, |g, i| Ok(pool_node(g, i[0], i[1], None, Collapse::Mean)?.1))
        }),
        ("fuse_convex", |r| {
            let inputs = vec![vector(r, N_TARGETS, 0.0, 1.0), vector(r, N_DISCRETE, 0.0, 1.0)];
            point(r, inputs, |g, i| fuse_node(g, i[0], i[1], 0.2, FusionRule::Convex))
        }),
        ("fuse_reciprocal", |r| {
            let inputs = vec![vector(r, N_TARGETS, 0.0, 1.0), vector(r, N_DISCRETE, 0.05, 0.45)];
            point(r, inputs, |g, i| fuse_node(g, i[0], i[1], 0.5, FusionRule::Reciprocal))
        }),
        ("pipeline", |r| pipeline_point(r, FusionConfig::default(), true)),
        ("pipeline_max_collapse", |r| {
            let config = FusionConfig {
                collapse: Collapse::Max,
                ..FusionConfig::default()
            };
            pipeline_point(r, config, true)
        }),
        ("pipeline_q_plus_only", |r| {
            let config = FusionConfig {
                rule: FusionRule::QPlusOnly,
                ..FusionConfig::default()
            };
            pipeline_point(r, config, true)
        }),
        ("pipeline_single_stream", |r| pipeline_point(r, FusionConfig::default(), false)),
    ]
}

/// Names of every case in the suite.
pub fn case_names() -> Vec<&'static str> {
    cases().into_iter().map(|(n, _)| n).collect()
}

/// `2·v − f` with `v` held constant: the same values, negated gradient.
fn flip_gradient(g: &mut Graph, out: NodeId) -> Result<NodeId> {
    let frozen = g.leaf(g.value(out).clone());
    let twice = g.scale(frozen, 2.0);
    g.sub(twice, out)
}

/// Runs every case and reports the worst relative error of each.
pub fn run_suite(config: &GradCheckConfig) -> Result<Vec<CaseResult>> {
    if let Some(name) = &config.inject_sign_flip {
        if !case_names().contains(&name.as_str()) {
            return Err(Error::Parameter(format!("unknown gradient-check case '{name}'")));
        }
    }
    let mut results = Vec::new();
    for (index, (name, sampler)) in cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(index as u64));
        let flip = config.inject_sign_flip.as_deref() == Some(name);
        let mut worst: f64 = 0.0;
        let mut done = 0;
        let mut attempts = 0;
        while done < config.points {
            attempts += 1;
            if attempts > 100 * config.points.max(1) {
                return Err(Error::Numeric(format!(
                    "could not draw smooth points for case '{name}'"
                )));
            }
            let Some(Point { inputs, f }) = sampler(&mut rng)? else {
                continue;
            };
            let report = grad_check_many(
                |g, ids| {
                    let out = f(g, ids)?;
                    if flip {
                        flip_gradient(g, out)
                    } else {
                        Ok(out)
                    }
                },
                &inputs,
                config.eps,
            )?;
            worst = worst.max(report.max_rel_error);
            done += 1;
        }
        results.push(CaseResult {
            name: name.to_string(),
            points: done,
            max_rel_error: worst,
            passed: worst < config.tolerance,
        });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let config = GradCheckConfig {
            points: 5,
            ..GradCheckConfig::default()
        };
        let results = run_suite(&config).unwrap();
        assert_eq!(results.len(), case_names().len());
        for r in &results {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn sign_flip_is_caught() {
        let config = GradCheckConfig {
            points: 3,
            inject_sign_flip: Some("softmax".into()),
            ..GradCheckConfig::default()
        };
        let results = run_suite(&config).unwrap();
        let softmax = results.iter().find(|r| r.name == "softmax").unwrap();
        assert!(!softmax.passed);
        assert!(results.iter().filter(|r| r.name != "softmax").all(|r| r.passed));
    }

    #[test]
    fn unknown_flip_target_rejected() {
        let config = GradCheckConfig {
            inject_sign_flip: Some("nope".into()),
            ..GradCheckConfig::default()
        };
        assert!(matches!(run_suite(&config), Err(Error::Parameter(_))));
    }
}
