//! Versioned JSON persistence and DOT export for the architecture graph.
//!
//! Parameter and optimizer buffers are encoded as base64 of little-endian
//! 64-bit reals, so a round trip is bit exact. Optimizer states live in a
//! top-level table keyed by the parameter's string key.

use super::{
    Activation, ArchGraph, Layer, Node, NodeId, NodeKind, ParamKey, Parent, TaskAttach, TaskSlot,
};
use crate::error::{Error, Result};
use crate::tensor::{AdamState, Tensor};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

const FORMAT_VERSION: u32 = 1;

fn encode_f64s(data: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for x in data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    B64.encode(bytes)
}

fn decode_f64s(s: &str, what: &str) -> Result<Vec<f64>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| Error::parse(what, format!("bad base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::parse(what, "byte length not a multiple of 8"));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[derive(Serialize, Deserialize)]
struct LayerJson {
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    w: String,
    b: String,
}

#[derive(Serialize, Deserialize)]
struct AdamJson {
    m: String,
    v: String,
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum KindJson {
    Task(usize),
    Group(Vec<usize>),
}

#[derive(Serialize, Deserialize)]
struct NodeJson {
    id: u32,
    kind: KindJson,
    parent: Parent,
    depth: usize,
    layer: LayerJson,
}

#[derive(Serialize, Deserialize)]
struct BranchJson {
    owner: usize,
    parent: u32,
    layers: Vec<LayerJson>,
}

#[derive(Serialize, Deserialize)]
struct HeadJson {
    owner: usize,
    layer: LayerJson,
}

#[derive(Serialize, Deserialize)]
struct TaskJson {
    name: String,
    output_dim: usize,
    /// `None` while the task still owns a task node (see `branches`).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    fused_parent: Option<Parent>,
}

#[derive(Serialize, Deserialize)]
struct GraphJson {
    version: u32,
    input_dim: usize,
    tasks: Vec<TaskJson>,
    nodes: Vec<NodeJson>,
    branches: Vec<BranchJson>,
    heads: Vec<HeadJson>,
    adam_states: BTreeMap<String, AdamJson>,
}

fn layer_to_json(l: &Layer) -> LayerJson {
    LayerJson {
        in_dim: l.in_dim(),
        out_dim: l.out_dim(),
        activation: l.activation,
        w: encode_f64s(l.w.data()),
        b: encode_f64s(l.b.data()),
    }
}

fn adam_to_json(s: &AdamState) -> AdamJson {
    AdamJson {
        m: encode_f64s(&s.m),
        v: encode_f64s(&s.v),
        t: s.t,
        lr: s.lr,
        beta1: s.beta1,
        beta2: s.beta2,
        eps: s.eps,
        weight_decay: s.weight_decay,
    }
}

fn adam_from_json(j: &AdamJson, key: &str) -> Result<AdamState> {
    Ok(AdamState {
        m: decode_f64s(&j.m, key)?,
        v: decode_f64s(&j.v, key)?,
        t: j.t,
        lr: j.lr,
        beta1: j.beta1,
        beta2: j.beta2,
        eps: j.eps,
        weight_decay: j.weight_decay,
    })
}

fn layer_from_json(
    j: &LayerJson,
    states: &BTreeMap<String, AdamJson>,
    w_key: String,
    b_key: String,
) -> Result<Layer> {
    let w_data = decode_f64s(&j.w, &w_key)?;
    let b_data = decode_f64s(&j.b, &b_key)?;
    if w_data.len() != j.in_dim * j.out_dim || b_data.len() != j.out_dim {
        return Err(Error::parse(w_key, "weight buffer does not match dims"));
    }
    let adam_w = states
        .get(&w_key)
        .ok_or_else(|| Error::parse(&w_key, "missing optimizer state"))
        .and_then(|a| adam_from_json(a, &w_key))?;
    let adam_b = states
        .get(&b_key)
        .ok_or_else(|| Error::parse(&b_key, "missing optimizer state"))
        .and_then(|a| adam_from_json(a, &b_key))?;
    if adam_w.m.len() != w_data.len() || adam_b.m.len() != b_data.len() {
        return Err(Error::parse(w_key, "optimizer state size mismatch"));
    }
    Ok(Layer {
        w: Tensor::new(vec![j.out_dim, j.in_dim], w_data)?,
        b: Tensor::new(vec![j.out_dim], b_data)?,
        activation: j.activation,
        adam_w,
        adam_b,
    })
}

/// Serializes the graph to versioned JSON bytes. The encoding is
/// deterministic, so identical graphs produce identical bytes.
pub fn serialize(g: &ArchGraph) -> Result<Vec<u8>> {
    let mut adam_states = BTreeMap::new();
    let mut nodes = Vec::new();
    for (id, node) in &g.nodes {
        nodes.push(NodeJson {
            id: id.0,
            kind: match &node.kind {
                NodeKind::Task(t) => KindJson::Task(*t),
                NodeKind::Group(m) => KindJson::Group(m.clone()),
            },
            parent: node.parent,
            depth: node.depth,
            layer: layer_to_json(&node.layer),
        });
        adam_states.insert(
            ParamKey::NodeW(*id).to_string_key(),
            adam_to_json(&node.layer.adam_w),
        );
        adam_states.insert(
            ParamKey::NodeB(*id).to_string_key(),
            adam_to_json(&node.layer.adam_b),
        );
    }
    let mut tasks = Vec::new();
    let mut branches = Vec::new();
    let mut heads = Vec::new();
    for (t, slot) in g.tasks.iter().enumerate() {
        let fused_parent = match &slot.attach {
            TaskAttach::Frontier { node, branch } => {
                branches.push(BranchJson {
                    owner: t,
                    parent: node.0,
                    layers: branch.iter().map(layer_to_json).collect(),
                });
                for (i, l) in branch.iter().enumerate() {
                    adam_states.insert(
                        ParamKey::BranchW(t, i).to_string_key(),
                        adam_to_json(&l.adam_w),
                    );
                    adam_states.insert(
                        ParamKey::BranchB(t, i).to_string_key(),
                        adam_to_json(&l.adam_b),
                    );
                }
                None
            }
            TaskAttach::Fused(p) => Some(*p),
        };
        tasks.push(TaskJson {
            name: slot.name.clone(),
            output_dim: slot.head.out_dim(),
            fused_parent,
        });
        heads.push(HeadJson {
            owner: t,
            layer: layer_to_json(&slot.head),
        });
        adam_states.insert(
            ParamKey::HeadW(t).to_string_key(),
            adam_to_json(&slot.head.adam_w),
        );
        adam_states.insert(
            ParamKey::HeadB(t).to_string_key(),
            adam_to_json(&slot.head.adam_b),
        );
    }
    let doc = GraphJson {
        version: FORMAT_VERSION,
        input_dim: g.input_dim,
        tasks,
        nodes,
        branches,
        heads,
        adam_states,
    };
    let mut bytes = serde_json::to_vec_pretty(&doc).map_err(|e| Error::contract(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Parses graph bytes produced by [`serialize`], rebuilding and validating
/// the full structure.
pub fn deserialize(bytes: &[u8]) -> Result<ArchGraph> {
    let doc: GraphJson = serde_json::from_slice(bytes).map_err(|e| {
        Error::parse(
            format!("line {} column {}", e.line(), e.column()),
            e.to_string(),
        )
    })?;
    if doc.version != FORMAT_VERSION {
        return Err(Error::parse(
            "version",
            format!("unsupported graph version {}", doc.version),
        ));
    }
    let mut nodes = BTreeMap::new();
    let mut next_id = 0u32;
    for nj in &doc.nodes {
        let id = NodeId(nj.id);
        let layer = layer_from_json(
            &nj.layer,
            &doc.adam_states,
            ParamKey::NodeW(id).to_string_key(),
            ParamKey::NodeB(id).to_string_key(),
        )?;
        let kind = match &nj.kind {
            KindJson::Task(t) => NodeKind::Task(*t),
            KindJson::Group(m) => NodeKind::Group(m.clone()),
        };
        if nodes
            .insert(
                id,
                Node {
                    kind,
                    layer,
                    parent: nj.parent,
                    depth: nj.depth,
                },
            )
            .is_some()
        {
            return Err(Error::parse(format!("node {}", nj.id), "duplicate node id"));
        }
        next_id = next_id.max(nj.id + 1);
    }
    let branch_by_owner: BTreeMap<usize, &BranchJson> =
        doc.branches.iter().map(|b| (b.owner, b)).collect();
    let head_by_owner: BTreeMap<usize, &HeadJson> =
        doc.heads.iter().map(|h| (h.owner, h)).collect();

    let mut tasks = Vec::new();
    for (t, tj) in doc.tasks.iter().enumerate() {
        let hj = head_by_owner
            .get(&t)
            .ok_or_else(|| Error::parse(format!("task {t}"), "missing head"))?;
        let head = layer_from_json(
            &hj.layer,
            &doc.adam_states,
            ParamKey::HeadW(t).to_string_key(),
            ParamKey::HeadB(t).to_string_key(),
        )?;
        let attach = match tj.fused_parent {
            Some(p) => TaskAttach::Fused(p),
            None => {
                let bj = branch_by_owner.get(&t).ok_or_else(|| {
                    Error::parse(format!("task {t}"), "unfused task has no branch record")
                })?;
                let mut branch = Vec::with_capacity(bj.layers.len());
                for (i, lj) in bj.layers.iter().enumerate() {
                    branch.push(layer_from_json(
                        lj,
                        &doc.adam_states,
                        ParamKey::BranchW(t, i).to_string_key(),
                        ParamKey::BranchB(t, i).to_string_key(),
                    )?);
                }
                TaskAttach::Frontier {
                    node: NodeId(bj.parent),
                    branch,
                }
            }
        };
        tasks.push(TaskSlot {
            name: tj.name.clone(),
            head,
            attach,
        });
    }
    let graph = ArchGraph {
        input_dim: doc.input_dim,
        task_names: doc.tasks.iter().map(|t| t.name.clone()).collect(),
        tasks,
        nodes,
        next_id,
    };
    graph.validate()?;
    Ok(graph)
}

/// Emits the graph as a DOT digraph: one vertex per node, branch layer, and
/// head. Shared (group) nodes are boxes, task-owned layers are ellipses,
/// labels carry depth and ownership.
pub fn export_dot(g: &ArchGraph) -> String {
    let mut vertices = Vec::new();
    let mut edges = Vec::new();
    let owner_label = |kind: &NodeKind| -> String {
        match kind {
            NodeKind::Task(t) => g.task_names[*t].clone(),
            NodeKind::Group(m) => {
                let names: Vec<&str> = m.iter().map(|&t| g.task_names[t].as_str()).collect();
                format!("{{{}}}", names.join(","))
            }
        }
    };
    for (id, node) in &g.nodes {
        let shape = match node.kind {
            NodeKind::Task(_) => "ellipse",
            NodeKind::Group(_) => "box",
        };
        vertices.push(format!(
            "  n{} [label=\"L{}:{}\", shape={}];",
            id.0,
            node.depth,
            owner_label(&node.kind),
            shape
        ));
        if let Parent::Node(p) = node.parent {
            edges.push(format!("  n{} -> n{};", p.0, id.0));
        }
    }
    for (t, slot) in g.tasks.iter().enumerate() {
        let name = &g.task_names[t];
        let mut prev = match &slot.attach {
            TaskAttach::Frontier { node, branch } => {
                let node_depth = g.nodes[node].depth;
                let mut prev = format!("n{}", node.0);
                for (i, _) in branch.iter().enumerate() {
                    let v = format!("t{t}_b{i}");
                    vertices.push(format!(
                        "  {v} [label=\"L{}:{}\", shape=ellipse];",
                        node_depth + 1 + i,
                        name
                    ));
                    edges.push(format!("  {prev} -> {v};"));
                    prev = v;
                }
                Some(prev)
            }
            TaskAttach::Fused(Parent::Node(p)) => Some(format!("n{}", p.0)),
            TaskAttach::Fused(Parent::Input) => None,
        };
        let head = format!("t{t}_head");
        vertices.push(format!(
            "  {head} [label=\"head:{}\", shape=ellipse];",
            name
        ));
        if let Some(prev) = prev.take() {
            edges.push(format!("  {prev} -> {head};"));
        }
    }
    let mut out = String::from("digraph arch {\n  rankdir=LR;\n");
    for v in vertices {
        out.push_str(&v);
        out.push('\n');
    }
    for e in edges {
        out.push_str(&e);
        out.push('\n');
    }
    out.push_str("}\n");
    out
}
