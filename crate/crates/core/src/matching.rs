//! Gradient-matching distance between two gradient vectors.
//!
//! The distance is a sum over layers of one minus the cosine similarity
//! of the layer's flattened gradients; a whole-vector mode treats the
//! concatenation as a single layer. Zero-norm layers use a fixed
//! convention: both zero contributes 0, exactly one zero contributes 1,
//! keeping the loss bounded in [0, 2 * num_layers].
//!
//! Two routes compute the same formula: [`grad_match_loss`] on plain
//! values, and [`build_match_loss`] as graph nodes so the loss can be
//! differentiated with respect to whatever the synthetic gradients
//! depend on.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SrError};
use crate::graph::{Graph, Var};
use crate::models::GradientVector;

/// Layer partition handling for the matching distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// One cosine term per layer, summed.
    Layerwise,
    /// A single cosine term over the concatenated gradient.
    WholeVector,
}

impl Default for MatchMode {
    fn default() -> Self {
        MatchMode::Layerwise
    }
}

fn check_partitions(a: &GradientVector, b: &GradientVector) -> Result<()> {
    if a.layer_names != b.layer_names {
        return Err(SrError::Shape(format!(
            "gradient layer partitions differ: {:?} vs {:?}",
            a.layer_names, b.layer_names
        )));
    }
    for (name, (la, lb)) in a.layer_names.iter().zip(a.layers.iter().zip(b.layers.iter())) {
        if la.len() != lb.len() {
            return Err(SrError::Shape(format!(
                "layer {name}: lengths {} vs {}",
                la.len(),
                lb.len()
            )));
        }
    }
    Ok(())
}

fn cosine_terms(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let mut dot = 0.0;
    let mut naa = 0.0;
    let mut nbb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        dot += x * y;
        naa += x * x;
        nbb += y * y;
    }
    (dot, naa, nbb)
}

fn distance_from_terms(dot: f64, naa: f64, nbb: f64) -> f64 {
    if naa == 0.0 && nbb == 0.0 {
        0.0
    } else if naa == 0.0 || nbb == 0.0 {
        1.0
    } else {
        1.0 - dot / (naa * nbb).sqrt()
    }
}

/// Matching distance between two gradient vectors.
pub fn grad_match_loss(
    g_syn: &GradientVector,
    g_real: &GradientVector,
    mode: MatchMode,
) -> Result<f64> {
    check_partitions(g_syn, g_real)?;
    match mode {
        MatchMode::Layerwise => Ok(g_syn
            .layers
            .iter()
            .zip(g_real.layers.iter())
            .map(|(a, b)| {
                let (dot, naa, nbb) = cosine_terms(a, b);
                distance_from_terms(dot, naa, nbb)
            })
            .sum()),
        MatchMode::WholeVector => {
            let mut dot = 0.0;
            let mut naa = 0.0;
            let mut nbb = 0.0;
            for (a, b) in g_syn.layers.iter().zip(g_real.layers.iter()) {
                let (d, x, y) = cosine_terms(a, b);
                dot += d;
                naa += x;
                nbb += y;
            }
            Ok(distance_from_terms(dot, naa, nbb))
        }
    }
}

/// Graph term for one layer pair given its precomputed norm values.
fn layer_term(g: &mut Graph, syn: Var, real: Var) -> Var {
    let dot = g.dot(syn, real);
    let nss = g.dot(syn, syn);
    let nrr = g.dot(real, real);
    let nss_v = g.scalar_value(nss);
    let nrr_v = g.scalar_value(nrr);
    if nss_v == 0.0 && nrr_v == 0.0 {
        return g.constant_scalar(0.0);
    }
    if nss_v == 0.0 || nrr_v == 0.0 {
        return g.constant_scalar(1.0);
    }
    let prod = g.mul(nss, nrr);
    let inv_norm = g.pow_const(prod, -0.5);
    let cos = g.mul(dot, inv_norm);
    let neg = g.scale(cos, -1.0);
    g.add_scalar(neg, 1.0)
}

/// Builds the matching distance as a differentiable scalar node.
///
/// `syn` and `real` must hold per-layer gradient nodes in the same order;
/// layers whose current norms vanish contribute their convention value as
/// a constant (zero gradient).
pub fn build_match_loss(g: &mut Graph, syn: &[Var], real: &[Var], mode: MatchMode) -> Var {
    assert_eq!(syn.len(), real.len(), "layer counts must match");
    assert!(!syn.is_empty(), "need at least one layer");
    match mode {
        MatchMode::Layerwise => {
            let mut total: Option<Var> = None;
            for (&s, &r) in syn.iter().zip(real.iter()) {
                let term = layer_term(g, s, r);
                total = Some(match total {
                    Some(t) => g.add(t, term),
                    None => term,
                });
            }
            total.expect("non-empty layer list")
        }
        MatchMode::WholeVector => {
            // The concatenated dot product is the sum of per-layer dots,
            // so no concatenation node is needed.
            let mut dot: Option<Var> = None;
            let mut nss: Option<Var> = None;
            let mut nrr: Option<Var> = None;
            let fold = |g: &mut Graph, acc: Option<Var>, v: Var| match acc {
                Some(a) => Some(g.add(a, v)),
                None => Some(v),
            };
            for (&s, &r) in syn.iter().zip(real.iter()) {
                let d = g.dot(s, r);
                let a = g.dot(s, s);
                let b = g.dot(r, r);
                dot = fold(g, dot, d);
                nss = fold(g, nss, a);
                nrr = fold(g, nrr, b);
            }
            let (dot, nss, nrr) = (dot.unwrap(), nss.unwrap(), nrr.unwrap());
            let nss_v = g.scalar_value(nss);
            let nrr_v = g.scalar_value(nrr);
            if nss_v == 0.0 && nrr_v == 0.0 {
                return g.constant_scalar(0.0);
            }
            if nss_v == 0.0 || nrr_v == 0.0 {
                return g.constant_scalar(1.0);
            }
            let prod = g.mul(nss, nrr);
            let inv_norm = g.pow_const(prod, -0.5);
            let cos = g.mul(dot, inv_norm);
            let neg = g.scale(cos, -1.0);
            g.add_scalar(neg, 1.0)
        }
    }
}
