use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{ClusterAssignment, TaskGraph};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphFormat {
    Dot,
    Json,
}

impl FromStr for GraphFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(GraphFormat::Dot),
            "json" => Ok(GraphFormat::Json),
            other => Err(Error::InvalidArgument(format!(
                "unknown graph format '{other}' (expected dot or json)"
            ))),
        }
    }
}

/// On-disk graph schema: `{n_tasks, edges: [{i, j, w}], labels?}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphJson {
    pub n_tasks: usize,
    pub edges: Vec<EdgeJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeJson {
    pub i: usize,
    pub j: usize,
    pub w: f64,
}

impl From<TaskGraph> for GraphJson {
    fn from(g: TaskGraph) -> Self {
        GraphJson {
            n_tasks: g.n_tasks,
            edges: g
                .edges
                .iter()
                .map(|&(i, j, w)| EdgeJson { i, j, w })
                .collect(),
            labels: None,
        }
    }
}

impl TryFrom<GraphJson> for TaskGraph {
    type Error = Error;

    fn try_from(g: GraphJson) -> Result<Self> {
        TaskGraph::new(g.n_tasks, g.edges.iter().map(|e| (e.i, e.j, e.w)))
    }
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

/// Text export; edges come out sorted by `(i, j)`.
pub fn export_graph(
    graph: &TaskGraph,
    clusters: Option<&ClusterAssignment>,
    format: GraphFormat,
) -> Result<String> {
    if let Some(c) = clusters {
        if c.labels.len() != graph.n_tasks() {
            return Err(Error::DimensionMismatch(format!(
                "{} cluster labels for {} tasks",
                c.labels.len(),
                graph.n_tasks()
            )));
        }
    }
    match format {
        GraphFormat::Json => {
            let mut doc = GraphJson::from(graph.clone());
            doc.labels = clusters.map(|c| c.labels.clone());
            Ok(serde_json::to_string_pretty(&doc)?)
        }
        GraphFormat::Dot => {
            let mut out = String::from("graph tasks {\n");
            for t in 0..graph.n_tasks() {
                match clusters {
                    Some(c) => {
                        let color = PALETTE[c.labels[t] % PALETTE.len()];
                        let _ = writeln!(
                            out,
                            "  {t} [cluster={}, style=filled, fillcolor=\"{color}\"];",
                            c.labels[t]
                        );
                    }
                    None => {
                        let _ = writeln!(out, "  {t};");
                    }
                }
            }
            for &(i, j, w) in graph.edges() {
                let _ = writeln!(out, "  {i} -- {j} [weight={w}, label=\"{w:.3}\"];");
            }
            out.push_str("}\n");
            Ok(out)
        }
    }
}

pub fn import_graph_json(text: &str) -> Result<(TaskGraph, Option<ClusterAssignment>)> {
    let doc: GraphJson = serde_json::from_str(text)?;
    let labels = doc.labels.clone();
    let graph = TaskGraph::try_from(doc)?;
    let clusters = match labels {
        Some(l) if l.len() != graph.n_tasks() => {
            return Err(Error::Schema(format!(
                "{} labels for {} tasks",
                l.len(),
                graph.n_tasks()
            )))
        }
        Some(l) => Some(ClusterAssignment::from_labels(l)?),
        None => None,
    };
    Ok((graph, clusters))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_graph_json() {
        let s = export_graph(&TaskGraph::empty(3), None, GraphFormat::Json).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["n_tasks"], 3);
        assert_eq!(v["edges"], serde_json::json!([]));
        assert!(v.get("labels").is_none());
    }

    #[test]
    fn one_edge_dot() {
        let g = TaskGraph::new(2, [(0, 1, 0.5)]).unwrap();
        let s = export_graph(&g, None, GraphFormat::Dot).unwrap();
        assert!(s.contains("0 -- 1 [weight=0.5"));
    }

    #[test]
    fn json_round_trip_with_labels() {
        let g = TaskGraph::new(4, [(0, 1, 0.25), (2, 3, 1.0), (1, 2, 0.123456789)]).unwrap();
        let c = ClusterAssignment::from_labels(vec![0, 0, 1, 1]).unwrap();
        let s = export_graph(&g, Some(&c), GraphFormat::Json).unwrap();
        let (g2, c2) = import_graph_json(&s).unwrap();
        assert_eq!(g2, g);
        assert_eq!(c2, Some(c));
    }

    #[test]
    fn unknown_format_tag() {
        assert!("png".parse::<GraphFormat>().is_err());
        assert_eq!("dot".parse::<GraphFormat>().unwrap(), GraphFormat::Dot);
    }
}
