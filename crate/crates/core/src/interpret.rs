//! Pruning-based explanations for trained KAN models.
//!
//! Edge importance is the batch-mean magnitude `|phi_qp|_1` of each edge
//! activation over a reference batch. Pruning masks edges and hidden nodes
//! whose importance falls below the thresholds; the model itself is never
//! modified. An output item is explained by the input items connected to it
//! through surviving paths, each path weighted by the product of its edge
//! scores.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{KanError, Result};
use crate::model::{CfModel, ModelKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeLayer {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-major `(n_out, n_in)`.
    pub scores: Vec<f64>,
    pub pruned: Vec<bool>,
}

impl EdgeLayer {
    pub fn score(&self, q: usize, p: usize) -> f64 {
        self.scores[q * self.n_in + p]
    }

    pub fn is_pruned(&self, q: usize, p: usize) -> bool {
        self.pruned[q * self.n_in + p]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceGraph {
    pub layers: Vec<EdgeLayer>,
    /// Node flags per boundary: inputs, each hidden width, outputs.
    pub node_active: Vec<Vec<bool>>,
    pub input_labels: Vec<String>,
    pub output_labels: Vec<String>,
    pub tau1: f64,
    pub tau2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub item: usize,
    pub label: String,
    pub strength: f64,
    pub paths: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphFormat {
    Dot,
    Json,
}

impl FromStr for GraphFormat {
    type Err = KanError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dot" => Ok(Self::Dot),
            "json" => Ok(Self::Json),
            other => Err(KanError::InvalidArgument(format!("unknown graph format `{other}`"))),
        }
    }
}

/// Edge scores for every layer over `reference` (users x items), processed in
/// chunks of `chunk` rows. `labels` names the items; indices are used when
/// absent.
pub fn compute_importance(
    model: &CfModel,
    reference: ArrayView2<'_, f64>,
    labels: Option<&[String]>,
    chunk: usize,
) -> Result<ImportanceGraph> {
    if model.kind() != ModelKind::Kan {
        return Err(KanError::NotKan);
    }
    let total = reference.nrows();
    if total == 0 {
        return Err(KanError::InvalidArgument("reference batch is empty".into()));
    }
    let mut scores: Vec<Vec<f64>> = model.layers().iter().map(|l| vec![0.0; l.n_in() * l.n_out()]).collect();
    let chunk = chunk.max(1);
    for start in (0..total).step_by(chunk) {
        let end = (start + chunk).min(total);
        let pass = model.forward(reference.slice(s![start..end, ..]), true)?;
        let weight = (end - start) as f64 / total as f64;
        for (acc, rec) in scores.iter_mut().zip(&pass.records) {
            let m = rec.edge_outputs_l1().expect("edge statistics were requested");
            for (a, v) in acc.iter_mut().zip(m.iter()) {
                *a += weight * v;
            }
        }
    }
    let layers: Vec<EdgeLayer> = model
        .layers()
        .iter()
        .zip(scores)
        .map(|(l, scores)| EdgeLayer { n_in: l.n_in(), n_out: l.n_out(), pruned: vec![false; scores.len()], scores })
        .collect();
    let mut node_active = vec![vec![true; layers[0].n_in]];
    node_active.extend(layers.iter().map(|l| vec![true; l.n_out]));
    let n_items = model.item_count();
    let item_labels: Vec<String> = match labels {
        Some(l) if l.len() == n_items => l.to_vec(),
        _ => (0..n_items).map(|i| i.to_string()).collect(),
    };
    Ok(ImportanceGraph {
        layers,
        node_active,
        input_labels: item_labels.clone(),
        output_labels: item_labels,
        tau1: 0.0,
        tau2: 0.0,
    })
}

impl ImportanceGraph {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Node-level (`tau1`, hidden nodes only) and edge-level (`tau2`) pruning,
    /// recomputed from the raw scores.
    ///
    /// A hidden node is dropped when both its strongest incoming and its
    /// strongest outgoing edge score are below `tau1`, or when every incident
    /// edge ends up pruned. An edge is pruned when its score is below `tau2` or
    /// either endpoint is dropped.
    pub fn prune(&self, tau1: f64, tau2: f64) -> ImportanceGraph {
        let mut g = self.clone();
        g.tau1 = tau1;
        g.tau2 = tau2;
        let n_bounds = g.layers.len() + 1;
        for active in &mut g.node_active {
            active.iter_mut().for_each(|a| *a = true);
        }
        for b in 1..n_bounds - 1 {
            let (into, out_of) = (&self.layers[b - 1], &self.layers[b]);
            for p in 0..into.n_out {
                let incoming = (0..into.n_in).map(|r| into.score(p, r)).fold(0.0, f64::max);
                let outgoing = (0..out_of.n_out).map(|q| out_of.score(q, p)).fold(0.0, f64::max);
                if incoming < tau1 && outgoing < tau1 {
                    g.node_active[b][p] = false;
                }
            }
        }
        for (l, layer) in g.layers.iter_mut().enumerate() {
            for q in 0..layer.n_out {
                for p in 0..layer.n_in {
                    let e = q * layer.n_in + p;
                    layer.pruned[e] =
                        layer.scores[e] < tau2 || !g.node_active[l][p] || !g.node_active[l + 1][q];
                }
            }
        }
        for b in 1..n_bounds - 1 {
            let width = g.node_active[b].len();
            for p in 0..width {
                let into = &g.layers[b - 1];
                let out_of = &g.layers[b];
                let isolated = (0..into.n_in).all(|r| into.is_pruned(p, r)) && (0..out_of.n_out).all(|q| out_of.is_pruned(q, p));
                if isolated {
                    g.node_active[b][p] = false;
                }
            }
        }
        g
    }

    pub fn unpruned_edges(&self) -> usize {
        self.layers.iter().map(|l| l.pruned.iter().filter(|p| !**p).count()).sum()
    }

    pub fn pruned_edge_set(&self) -> Vec<(usize, usize)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, layer)| layer.pruned.iter().enumerate().filter(|(_, p)| **p).map(move |(e, _)| (l, e)))
            .collect()
    }

    /// Input items ranked by the summed strength of their surviving paths to
    /// `target`; at most `max_entries` results.
    pub fn explain_item(&self, target: usize, max_entries: usize) -> Result<Vec<Explanation>> {
        let last = self.layers.last().expect("at least one layer");
        if target >= last.n_out {
            return Err(KanError::InvalidArgument(format!("item {target} is not an output node")));
        }
        let mut strength = vec![0.0; last.n_out];
        let mut paths = vec![0.0; last.n_out];
        strength[target] = 1.0;
        paths[target] = 1.0;
        for layer in self.layers.iter().rev() {
            let mut s_in = vec![0.0; layer.n_in];
            let mut c_in = vec![0.0; layer.n_in];
            for q in 0..layer.n_out {
                if paths[q] == 0.0 {
                    continue;
                }
                for p in 0..layer.n_in {
                    if !layer.is_pruned(q, p) {
                        s_in[p] += layer.score(q, p) * strength[q];
                        c_in[p] += paths[q];
                    }
                }
            }
            strength = s_in;
            paths = c_in;
        }
        let mut out: Vec<Explanation> = (0..strength.len())
            .filter(|&i| paths[i] > 0.0)
            .map(|i| Explanation { item: i, label: self.input_labels[i].clone(), strength: strength[i], paths: paths[i] })
            .collect();
        out.sort_by(|a, b| b.strength.total_cmp(&a.strength).then(a.item.cmp(&b.item)));
        out.truncate(max_entries);
        Ok(out)
    }

    /// Graphviz rendering: pruned edges and dropped hidden nodes are omitted,
    /// input and output items are always drawn, pen width follows the score.
    pub fn to_dot(&self) -> String {
        let max_score = self
            .layers
            .iter()
            .flat_map(|l| l.scores.iter().zip(&l.pruned).filter(|(_, p)| !**p).map(|(s, _)| *s))
            .fold(0.0, f64::max);
        let n_bounds = self.node_active.len();
        let mut out = String::from("digraph kan {\n  rankdir=LR;\n  node [shape=circle, fontsize=10];\n");
        for (b, active) in self.node_active.iter().enumerate() {
            let _ = writeln!(out, "  subgraph cluster_{b} {{\n    style=invis;");
            for (i, on) in active.iter().enumerate() {
                let label = if b == 0 {
                    escape(&self.input_labels[i])
                } else if b == n_bounds - 1 {
                    escape(&self.output_labels[i])
                } else if *on {
                    format!("h{b}_{i}")
                } else {
                    continue;
                };
                let shape = if b == 0 || b == n_bounds - 1 { ", shape=box" } else { "" };
                let _ = writeln!(out, "    n{b}_{i} [label=\"{label}\"{shape}];");
            }
            out.push_str("  }\n");
        }
        for (l, layer) in self.layers.iter().enumerate() {
            for q in 0..layer.n_out {
                for p in 0..layer.n_in {
                    if layer.is_pruned(q, p) {
                        continue;
                    }
                    let rel = if max_score > 0.0 { layer.score(q, p) / max_score } else { 0.0 };
                    let _ = writeln!(
                        out,
                        "  n{l}_{p} -> n{}_{q} [penwidth={:.3}, tooltip=\"{:.6e}\"];",
                        l + 1,
                        0.25 + 4.75 * rel,
                        layer.score(q, p)
                    );
                }
            }
        }
        out.push_str("}\n");
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn export(&self, format: GraphFormat, path: impl AsRef<Path>) -> Result<()> {
        let text = match format {
            GraphFormat::Dot => self.to_dot(),
            GraphFormat::Json => self.to_json()?,
        };
        fs::write(path, text)?;
        Ok(())
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Layer, ModelConfig};
    use crate::rng;
    use ndarray::Array2;
    use rand::Rng;

    fn model() -> CfModel {
        CfModel::build(ModelConfig { item_count: 5, latent_dim: 3, seed: 2, ..ModelConfig::default() }).unwrap()
    }

    fn users(n: usize, seed: u64) -> Array2<f64> {
        let mut r = rng::stream(seed, "u");
        Array2::from_shape_fn((n, 5), |_| if r.random_bool(0.5) { 1.0 } else { 0.0 })
    }

    #[test]
    fn mlp_is_rejected() {
        let m = CfModel::build(ModelConfig { kind: ModelKind::Mlp, item_count: 5, latent_dim: 3, ..ModelConfig::default() })
            .unwrap();
        assert!(matches!(compute_importance(&m, users(3, 1).view(), None, 8), Err(KanError::NotKan)));
    }

    #[test]
    fn zero_scale_edge_scores_zero_and_chunking_is_exact() {
        let mut m = model();
        if let Layer::Kan(l) = &mut m.layers_mut()[0] {
            l.scales_mut()[4] = 0.0;
        }
        let u = users(7, 2);
        let g = compute_importance(&m, u.view(), None, 3).unwrap();
        assert_eq!(g.layers[0].scores[4], 0.0);
        let whole = compute_importance(&m, u.view(), None, 100).unwrap();
        for (a, b) in g.layers.iter().zip(&whole.layers) {
            for (x, y) in a.scores.iter().zip(&b.scores) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn threshold_limits() {
        let g = compute_importance(&model(), users(6, 3).view(), None, 8).unwrap();
        let none = g.prune(0.0, 0.0);
        assert_eq!(none.unpruned_edges(), 5 * 3 * 2);
        assert!(none.node_active.iter().flatten().all(|a| *a));

        let all = g.prune(0.0, f64::INFINITY);
        assert_eq!(all.unpruned_edges(), 0);
        assert!(all.node_active[1].iter().all(|a| !*a));
        assert!(all.node_active[0].iter().all(|a| *a));
        assert!(all.explain_item(0, 10).unwrap().is_empty());
        let dot = all.to_dot();
        assert!(!dot.contains("->"));
        assert_eq!(dot.matches("shape=box").count(), 10);
    }

    #[test]
    fn json_round_trip_and_dot_edge_count() {
        let g = compute_importance(&model(), users(6, 4).view(), None, 8).unwrap();
        let pruned = g.prune(0.05, 0.2);
        let back = ImportanceGraph::from_json(&pruned.to_json().unwrap()).unwrap();
        assert_eq!(back, pruned);
        assert_eq!(pruned.to_dot().matches("->").count(), pruned.unpruned_edges());
    }

    #[test]
    fn unknown_target_is_an_error() {
        let g = compute_importance(&model(), users(2, 5).view(), None, 8).unwrap();
        assert!(g.explain_item(5, 3).is_err());
    }
}
