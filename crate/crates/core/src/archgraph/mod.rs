//! The mutable multi-task network.
//!
//! The graph is a tree rooted at the input: *nodes* are single affine
//! layers at the current fusion frontier (task nodes) or already fused
//! (group nodes); each task additionally owns a *branch* of private layers
//! behind its task node and a *head* that is never fused. Structural
//! learning mutates this graph in place: co-parented task nodes are
//! averaged into a group node, knowledge is amalgamated, and the member
//! nodes are removed with their branches re-parented to the group node.

mod serialize;

pub use serialize::{deserialize, export_dot, serialize};

use crate::error::{Error, Result};
use crate::tensor::{adam_step, AdamState, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Identifier of a node in the graph. Ids are never reused.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

/// What a node's layer feeds from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parent {
    Input,
    Node(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

/// One affine layer with its optimizer state.
#[derive(Debug, Clone)]
pub struct Layer {
    pub w: Tensor,
    pub b: Tensor,
    pub activation: Activation,
    pub adam_w: AdamState,
    pub adam_b: AdamState,
}

impl Layer {
    fn new(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut ChaCha8Rng,
        lr: f64,
        weight_decay: f64,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = Tensor::rand_uniform(vec![out_dim, in_dim], -bound, bound, rng);
        let b = Tensor::zeros(vec![out_dim]);
        Layer {
            adam_w: AdamState::new(w.numel(), lr, weight_decay),
            adam_b: AdamState::new(b.numel(), lr, weight_decay),
            w,
            b,
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn param_count(&self) -> u64 {
        (self.w.numel() + self.b.numel()) as u64
    }

    pub fn flops(&self) -> u64 {
        2 * (self.in_dim() as u64) * (self.out_dim() as u64)
    }

    /// Forward application on plain tensors (evaluation mode).
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.w.transpose()?)?.add_bias(&self.b)?;
        Ok(match self.activation {
            Activation::Relu => y.relu(),
            Activation::Identity => y,
        })
    }

    /// Forward application recorded on a tape, with `w`/`b` as the given vars.
    pub(crate) fn apply_on_tape(&self, tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = tape.affine(x, w, b)?;
        Ok(match self.activation {
            Activation::Relu => tape.relu(y),
            Activation::Identity => y,
        })
    }

    /// Elementwise average of several layers, including optimizer state.
    fn average(layers: &[&Layer]) -> Result<Layer> {
        let first = layers[0];
        if layers
            .iter()
            .any(|l| l.w.shape() != first.w.shape() || l.activation != first.activation)
        {
            return Err(Error::contract("averaging layers with differing shapes"));
        }
        let n = layers.len() as f64;
        let mut w = Tensor::zeros(first.w.shape().to_vec());
        let mut b = Tensor::zeros(first.b.shape().to_vec());
        for l in layers {
            for (acc, x) in w.data_mut().iter_mut().zip(l.w.data()) {
                *acc += x;
            }
            for (acc, x) in b.data_mut().iter_mut().zip(l.b.data()) {
                *acc += x;
            }
        }
        for x in w.data_mut() {
            *x /= n;
        }
        for x in b.data_mut() {
            *x /= n;
        }
        Ok(Layer {
            w,
            b,
            activation: first.activation,
            adam_w: AdamState::average(&layers.iter().map(|l| &l.adam_w).collect::<Vec<_>>())?,
            adam_b: AdamState::average(&layers.iter().map(|l| &l.adam_b).collect::<Vec<_>>())?,
        })
    }
}

/// Node ownership: the fusion frontier layer of one task, or a fused layer
/// shared by a group of tasks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeKind {
    Task(usize),
    Group(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct Node {
    pub kind: NodeKind,
    pub layer: Layer,
    pub parent: Parent,
    /// 1-based layer depth from the input.
    pub depth: usize,
}

/// Where a task's private part currently attaches.
#[derive(Debug, Clone)]
pub enum TaskAttach {
    /// The first private layer is the task node; `branch` holds the rest.
    Frontier { node: NodeId, branch: Vec<Layer> },
    /// All private layers were fused away; the head hangs off `parent`.
    Fused(Parent),
}

#[derive(Debug, Clone)]
pub struct TaskSlot {
    pub name: String,
    pub head: Layer,
    pub attach: TaskAttach,
}

/// Address of one trainable parameter tensor in the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamKey {
    NodeW(NodeId),
    NodeB(NodeId),
    BranchW(usize, usize),
    BranchB(usize, usize),
    HeadW(usize),
    HeadB(usize),
}

impl ParamKey {
    pub fn to_string_key(self) -> String {
        match self {
            ParamKey::NodeW(id) => format!("node/{}/w", id.0),
            ParamKey::NodeB(id) => format!("node/{}/b", id.0),
            ParamKey::BranchW(t, i) => format!("branch/{t}/{i}/w"),
            ParamKey::BranchB(t, i) => format!("branch/{t}/{i}/b"),
            ParamKey::HeadW(t) => format!("head/{t}/w"),
            ParamKey::HeadB(t) => format!("head/{t}/b"),
        }
    }
}

/// Parameter count and per-sample FLOPs over the de-duplicated union of all
/// task inference paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub parameter_count: u64,
    pub flops_per_sample: u64,
}

/// Result of an evaluation-mode forward pass.
pub struct ForwardResult {
    /// Per-task head outputs.
    pub outputs: BTreeMap<usize, Tensor>,
    /// Post-activation features of every node on a task path.
    pub features: BTreeMap<NodeId, Tensor>,
    /// How many times each node's layer was applied (shared nodes: once).
    pub node_evals: BTreeMap<NodeId, u32>,
}

/// Result of a training-mode forward pass recorded on a tape.
pub struct TapeForward {
    pub param_vars: BTreeMap<ParamKey, Var>,
    pub outputs: BTreeMap<usize, Var>,
    pub node_features: BTreeMap<NodeId, Var>,
}

/// Task-node sets eligible for fusion, partitioned by parent.
#[derive(Debug, Clone)]
pub struct FusibleSets {
    /// Sets of ≥ 2 co-parented task nodes, ordered by parent.
    pub candidates: Vec<Vec<NodeId>>,
    /// Task nodes alone under their parent.
    pub singletons: Vec<NodeId>,
}

/// The mutable multi-task architecture.
#[derive(Debug, Clone)]
pub struct ArchGraph {
    input_dim: usize,
    task_names: Vec<String>,
    tasks: Vec<TaskSlot>,
    nodes: BTreeMap<NodeId, Node>,
    next_id: u32,
}

impl ArchGraph {
    /// Builds |T| disjoint single-task chains with identical shapes. The
    /// chain layers of every task start from the same seed-derived weights
    /// so that corresponding parameters are initially in one-to-one
    /// correspondence; heads are drawn per task.
    pub fn init_from_tasks(
        tasks: &[(String, usize)],
        input_dim: usize,
        widths: &[usize],
        seed: u64,
        lr: f64,
        weight_decay: f64,
    ) -> Result<ArchGraph> {
        if tasks.is_empty() {
            return Err(Error::precondition("init_from_tasks: empty task list"));
        }
        if widths.is_empty() {
            return Err(Error::precondition(
                "init_from_tasks: need at least one shared-depth layer before the head",
            ));
        }
        if input_dim == 0 || tasks.iter().any(|(_, d)| *d == 0) {
            return Err(Error::precondition("zero input or output width"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        // one template chain, cloned per task
        let mut template = Vec::with_capacity(widths.len());
        let mut in_dim = input_dim;
        for &w in widths {
            template.push(Layer::new(
                in_dim,
                w,
                Activation::Relu,
                &mut rng,
                lr,
                weight_decay,
            ));
            in_dim = w;
        }

        let mut graph = ArchGraph {
            input_dim,
            task_names: tasks.iter().map(|(n, _)| n.clone()).collect(),
            tasks: Vec::with_capacity(tasks.len()),
            nodes: BTreeMap::new(),
            next_id: 0,
        };
        for (t, (name, out_dim)) in tasks.iter().enumerate() {
            let mut chain = template.clone();
            let node_layer = chain.remove(0);
            let node_id = graph.alloc_node(Node {
                kind: NodeKind::Task(t),
                layer: node_layer,
                parent: Parent::Input,
                depth: 1,
            });
            let head = Layer::new(
                in_dim,
                *out_dim,
                Activation::Identity,
                &mut rng,
                lr,
                weight_decay,
            );
            graph.tasks.push(TaskSlot {
                name: name.clone(),
                head,
                attach: TaskAttach::Frontier {
                    node: node_id,
                    branch: chain,
                },
            });
        }
        Ok(graph)
    }

    fn alloc_node(&mut self, node: Node) -> NodeId {
        let id = NodeId(self.next_id);
        self.next_id += 1;
        self.nodes.insert(id, node);
        id
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }

    pub fn task_names(&self) -> &[String] {
        &self.task_names
    }

    pub fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes
            .get(&id)
            .ok_or_else(|| Error::contract(format!("dangling node id {}", id.0)))
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &Node)> {
        self.nodes.iter().map(|(id, n)| (*id, n))
    }

    pub fn task(&self, t: usize) -> &TaskSlot {
        &self.tasks[t]
    }

    /// The task node currently owned by task `t`, if any private layer
    /// remains.
    pub fn task_node(&self, t: usize) -> Option<NodeId> {
        match &self.tasks[t].attach {
            TaskAttach::Frontier { node, .. } => Some(*node),
            TaskAttach::Fused(_) => None,
        }
    }

    /// True while any task still has private layers (task node + branch).
    pub fn any_private_layers(&self) -> bool {
        self.tasks
            .iter()
            .any(|s| matches!(s.attach, TaskAttach::Frontier { .. }))
    }

    /// Partitions current task nodes by parent. Only co-parented sets of
    /// size ≥ 2 are fusion candidates.
    pub fn fusible_sets(&self) -> FusibleSets {
        let mut by_parent: BTreeMap<Parent, Vec<NodeId>> = BTreeMap::new();
        for t in 0..self.tasks.len() {
            if let Some(id) = self.task_node(t) {
                let parent = self.nodes[&id].parent;
                by_parent.entry(parent).or_default().push(id);
            }
        }
        let mut candidates = Vec::new();
        let mut singletons = Vec::new();
        for (_, set) in by_parent {
            if set.len() >= 2 {
                candidates.push(set);
            } else {
                singletons.extend(set);
            }
        }
        FusibleSets {
            candidates,
            singletons,
        }
    }

    /// Creates a group node whose weights, biases, and optimizer state are
    /// the elementwise means of the members'. The members stay in the graph
    /// until [`ArchGraph::remove_task_nodes`].
    pub fn create_group_node(&mut self, members: &[NodeId]) -> Result<NodeId> {
        if members.len() < 2 {
            return Err(Error::contract("a group needs at least two members"));
        }
        let mut owners = Vec::with_capacity(members.len());
        let mut layers = Vec::with_capacity(members.len());
        let first = self.node(members[0])?;
        let (parent, depth) = (first.parent, first.depth);
        for &id in members {
            let node = self.node(id)?;
            match node.kind {
                NodeKind::Task(owner) => owners.push(owner),
                NodeKind::Group(_) => {
                    return Err(Error::contract("group nodes cannot be fused again"))
                }
            }
            if node.parent != parent {
                return Err(Error::contract(
                    "members must share a parent to be fused together",
                ));
            }
            layers.push(&node.layer);
        }
        owners.sort_unstable();
        owners.dedup();
        if owners.len() != members.len() {
            return Err(Error::contract("duplicate owner among group members"));
        }
        let layer = Layer::average(&layers)?;
        Ok(self.alloc_node(Node {
            kind: NodeKind::Group(owners),
            layer,
            parent,
            depth,
        }))
    }

    /// Drops the member task nodes and re-parents each member's branch to
    /// the group node; the first re-parented branch layer becomes that
    /// task's new task node. Fully fused tasks attach their head to the
    /// group node.
    pub fn remove_task_nodes(&mut self, members: &[NodeId], group_id: NodeId) -> Result<()> {
        let group = self.node(group_id)?;
        let group_depth = group.depth;
        let expected: Vec<usize> = match &group.kind {
            NodeKind::Group(m) => m.clone(),
            NodeKind::Task(_) => {
                return Err(Error::contract(
                    "remove_task_nodes target is not a group node",
                ))
            }
        };
        let mut owners = Vec::new();
        for &id in members {
            match &self.node(id)?.kind {
                NodeKind::Task(owner) => owners.push(*owner),
                NodeKind::Group(_) => {
                    return Err(Error::contract("only task nodes can be removed by fusion"))
                }
            }
        }
        let mut sorted = owners.clone();
        sorted.sort_unstable();
        if sorted != expected {
            return Err(Error::contract(
                "group node was not created from these members",
            ));
        }
        for (&id, &owner) in members.iter().zip(&owners) {
            match self.task_node(owner) {
                Some(current) if current == id => {}
                _ => {
                    return Err(Error::contract(format!(
                        "node {} is not the current task node of its owner",
                        id.0
                    )))
                }
            }
            let attach = std::mem::replace(
                &mut self.tasks[owner].attach,
                TaskAttach::Fused(Parent::Input),
            );
            let TaskAttach::Frontier { node, mut branch } = attach else {
                unreachable!("checked above");
            };
            debug_assert_eq!(node, id);
            let new_attach = if branch.is_empty() {
                TaskAttach::Fused(Parent::Node(group_id))
            } else {
                let layer = branch.remove(0);
                let new_node = self.alloc_node(Node {
                    kind: NodeKind::Task(owner),
                    layer,
                    parent: Parent::Node(group_id),
                    depth: group_depth + 1,
                });
                TaskAttach::Frontier {
                    node: new_node,
                    branch,
                }
            };
            self.tasks[owner].attach = new_attach;
            self.nodes.remove(&id);
        }
        Ok(())
    }

    fn node_output_memo(
        &self,
        id: NodeId,
        batch: &Tensor,
        memo: &mut BTreeMap<NodeId, Tensor>,
        evals: &mut BTreeMap<NodeId, u32>,
    ) -> Result<Tensor> {
        if let Some(out) = memo.get(&id) {
            return Ok(out.clone());
        }
        let node = self.node(id)?;
        let input = match node.parent {
            Parent::Input => batch.clone(),
            Parent::Node(p) => self.node_output_memo(p, batch, memo, evals)?,
        };
        let out = node.layer.apply(&input)?;
        *evals.entry(id).or_insert(0) += 1;
        memo.insert(id, out.clone());
        Ok(out)
    }

    /// Evaluation-mode output of one node (parent chain included), without
    /// requiring the node to lie on any task path.
    pub fn node_forward(&self, id: NodeId, batch: &Tensor) -> Result<Tensor> {
        let mut memo = BTreeMap::new();
        let mut evals = BTreeMap::new();
        self.node_output_memo(id, batch, &mut memo, &mut evals)
    }

    /// Evaluation-mode forward pass over every task path. Shared nodes are
    /// evaluated exactly once.
    pub fn forward(&self, batch: &Tensor) -> Result<ForwardResult> {
        self.check_batch(batch)?;
        let mut memo = BTreeMap::new();
        let mut evals = BTreeMap::new();
        let mut outputs = BTreeMap::new();
        for (t, slot) in self.tasks.iter().enumerate() {
            let x = match &slot.attach {
                TaskAttach::Frontier { node, branch } => {
                    let mut x = self.node_output_memo(*node, batch, &mut memo, &mut evals)?;
                    for layer in branch {
                        x = layer.apply(&x)?;
                    }
                    x
                }
                TaskAttach::Fused(Parent::Input) => batch.clone(),
                TaskAttach::Fused(Parent::Node(p)) => {
                    self.node_output_memo(*p, batch, &mut memo, &mut evals)?
                }
            };
            outputs.insert(t, slot.head.apply(&x)?);
        }
        Ok(ForwardResult {
            outputs,
            features: memo,
            node_evals: evals,
        })
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() != 2 || batch.shape()[1] != self.input_dim {
            return Err(Error::shape(format!(
                "batch shape {:?} does not match input width {}",
                batch.shape(),
                self.input_dim
            )));
        }
        Ok(())
    }

    /// All trainable parameter keys on task paths, in deterministic order.
    pub fn param_keys(&self) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        for &id in self.nodes.keys() {
            keys.push(ParamKey::NodeW(id));
            keys.push(ParamKey::NodeB(id));
        }
        for (t, slot) in self.tasks.iter().enumerate() {
            if let TaskAttach::Frontier { branch, .. } = &slot.attach {
                for i in 0..branch.len() {
                    keys.push(ParamKey::BranchW(t, i));
                    keys.push(ParamKey::BranchB(t, i));
                }
            }
            keys.push(ParamKey::HeadW(t));
            keys.push(ParamKey::HeadB(t));
        }
        keys.sort_unstable();
        keys
    }

    fn param(&self, key: ParamKey) -> Result<(&Tensor, &AdamState)> {
        Ok(match key {
            ParamKey::NodeW(id) => {
                let n = self.node(id)?;
                (&n.layer.w, &n.layer.adam_w)
            }
            ParamKey::NodeB(id) => {
                let n = self.node(id)?;
                (&n.layer.b, &n.layer.adam_b)
            }
            ParamKey::BranchW(t, i) | ParamKey::BranchB(t, i) => {
                let TaskAttach::Frontier { branch, .. } = &self.tasks[t].attach else {
                    return Err(Error::contract("task has no branch"));
                };
                let l = branch
                    .get(i)
                    .ok_or_else(|| Error::contract("branch layer out of range"))?;
                if matches!(key, ParamKey::BranchW(..)) {
                    (&l.w, &l.adam_w)
                } else {
                    (&l.b, &l.adam_b)
                }
            }
            ParamKey::HeadW(t) => (&self.tasks[t].head.w, &self.tasks[t].head.adam_w),
            ParamKey::HeadB(t) => (&self.tasks[t].head.b, &self.tasks[t].head.adam_b),
        })
    }

    pub(crate) fn param_mut(&mut self, key: ParamKey) -> Result<(&mut Tensor, &mut AdamState)> {
        Ok(match key {
            ParamKey::NodeW(id) => {
                let n = self
                    .nodes
                    .get_mut(&id)
                    .ok_or_else(|| Error::contract(format!("dangling node id {}", id.0)))?;
                (&mut n.layer.w, &mut n.layer.adam_w)
            }
            ParamKey::NodeB(id) => {
                let n = self
                    .nodes
                    .get_mut(&id)
                    .ok_or_else(|| Error::contract(format!("dangling node id {}", id.0)))?;
                (&mut n.layer.b, &mut n.layer.adam_b)
            }
            ParamKey::BranchW(t, i) | ParamKey::BranchB(t, i) => {
                let is_w = matches!(key, ParamKey::BranchW(..));
                let TaskAttach::Frontier { branch, .. } = &mut self.tasks[t].attach else {
                    return Err(Error::contract("task has no branch"));
                };
                let l = branch
                    .get_mut(i)
                    .ok_or_else(|| Error::contract("branch layer out of range"))?;
                if is_w {
                    (&mut l.w, &mut l.adam_w)
                } else {
                    (&mut l.b, &mut l.adam_b)
                }
            }
            ParamKey::HeadW(t) => {
                let s = &mut self.tasks[t];
                (&mut s.head.w, &mut s.head.adam_w)
            }
            ParamKey::HeadB(t) => {
                let s = &mut self.tasks[t];
                (&mut s.head.b, &mut s.head.adam_b)
            }
        })
    }

    /// One Adam step on a single parameter.
    pub fn adam_update(&mut self, key: ParamKey, grad: &Tensor) -> Result<()> {
        let (param, state) = self.param_mut(key)?;
        let (next_param, next_state) = adam_step(param, grad, state)?;
        *param = next_param;
        *state = next_state;
        Ok(())
    }

    /// Sets the learning rate on every optimizer state (lr schedule).
    pub fn set_lr(&mut self, lr: f64) {
        for key in self.param_keys() {
            if let Ok((_, state)) = self.param_mut(key) {
                state.lr = lr;
            }
        }
    }

    /// Training-mode forward pass: parameters become gradient leaves on the
    /// tape, and every node feature along task paths is exposed as a var.
    pub fn forward_on_tape(&self, tape: &mut Tape, batch: &Tensor) -> Result<TapeForward> {
        self.check_batch(batch)?;
        let x = tape.constant(batch);
        let mut param_vars = BTreeMap::new();
        for key in self.param_keys() {
            let (tensor, _) = self.param(key)?;
            param_vars.insert(key, tape.param(tensor));
        }
        let mut node_features: BTreeMap<NodeId, Var> = BTreeMap::new();
        let mut outputs = BTreeMap::new();

        // visit nodes shallow-first so every parent feature exists before
        // its children need it, regardless of id assignment order
        let mut order: Vec<NodeId> = self.nodes.keys().copied().collect();
        order.sort_by_key(|id| (self.nodes[id].depth, *id));
        for id in order {
            let node = &self.nodes[&id];
            let input = match node.parent {
                Parent::Input => x,
                Parent::Node(p) => *node_features
                    .get(&p)
                    .ok_or_else(|| Error::contract("node's parent has no recorded feature"))?,
            };
            let w = param_vars[&ParamKey::NodeW(id)];
            let b = param_vars[&ParamKey::NodeB(id)];
            node_features.insert(id, node.layer.apply_on_tape(tape, input, w, b)?);
        }
        for (t, slot) in self.tasks.iter().enumerate() {
            let mut feat = match &slot.attach {
                TaskAttach::Frontier { node, .. } => node_features[node],
                TaskAttach::Fused(Parent::Input) => x,
                TaskAttach::Fused(Parent::Node(p)) => node_features[p],
            };
            if let TaskAttach::Frontier { branch, .. } = &slot.attach {
                for (i, layer) in branch.iter().enumerate() {
                    let w = param_vars[&ParamKey::BranchW(t, i)];
                    let b = param_vars[&ParamKey::BranchB(t, i)];
                    feat = layer.apply_on_tape(tape, feat, w, b)?;
                }
            }
            let hw = param_vars[&ParamKey::HeadW(t)];
            let hb = param_vars[&ParamKey::HeadB(t)];
            outputs.insert(t, slot.head.apply_on_tape(tape, feat, hw, hb)?);
        }
        Ok(TapeForward {
            param_vars,
            outputs,
            node_features,
        })
    }

    /// Parameter count and FLOPs over all task inference paths, shared
    /// nodes counted once. Nodes not on any path (a group node between
    /// creation and member removal) are excluded.
    pub fn cost(&self) -> FlopReport {
        let mut visited: BTreeMap<NodeId, ()> = BTreeMap::new();
        let mut params = 0u64;
        let mut flops = 0u64;
        for slot in &self.tasks {
            let mut cursor = match &slot.attach {
                TaskAttach::Frontier { node, branch } => {
                    for l in branch {
                        params += l.param_count();
                        flops += l.flops();
                    }
                    Parent::Node(*node)
                }
                TaskAttach::Fused(p) => *p,
            };
            while let Parent::Node(id) = cursor {
                if visited.insert(id, ()).is_none() {
                    let layer = &self.nodes[&id].layer;
                    params += layer.param_count();
                    flops += layer.flops();
                }
                cursor = self.nodes[&id].parent;
            }
            params += slot.head.param_count();
            flops += slot.head.flops();
        }
        FlopReport {
            parameter_count: params,
            flops_per_sample: flops,
        }
    }

    /// Tasks grouped by the layer object serving them at each depth
    /// (1-based), in the style of a per-depth partition table. Fully
    /// private depths show singletons.
    pub fn depth_partitions(&self) -> Vec<Vec<Vec<usize>>> {
        let max_depth = self.chain_depth();
        let mut table = Vec::with_capacity(max_depth);
        for depth in 1..=max_depth {
            // key: the node id serving the task at this depth, or the
            // task's own private marker
            let mut cells: BTreeMap<(u32, usize), Vec<usize>> = BTreeMap::new();
            for t in 0..self.tasks.len() {
                match self.layer_owner_at(t, depth) {
                    Some(LayerOwner::Shared(id)) => {
                        cells.entry((0, id.0 as usize)).or_default().push(t)
                    }
                    Some(LayerOwner::Private) => cells.entry((1, t)).or_default().push(t),
                    None => {}
                };
            }
            let mut partition: Vec<Vec<usize>> = cells.into_values().collect();
            partition.sort();
            table.push(partition);
        }
        table
    }

    /// Total private + shared chain depth (heads excluded). Uniform across
    /// tasks by construction.
    pub fn chain_depth(&self) -> usize {
        self.tasks
            .iter()
            .map(|slot| match &slot.attach {
                TaskAttach::Frontier { node, branch } => self.nodes[node].depth + branch.len(),
                TaskAttach::Fused(Parent::Node(p)) => self.nodes[p].depth,
                TaskAttach::Fused(Parent::Input) => 0,
            })
            .max()
            .unwrap_or(0)
    }

    fn layer_owner_at(&self, t: usize, depth: usize) -> Option<LayerOwner> {
        let slot = &self.tasks[t];
        let frontier = match &slot.attach {
            TaskAttach::Frontier { node, branch } => {
                let node_depth = self.nodes[node].depth;
                if depth > node_depth + branch.len() {
                    return None;
                }
                if depth > node_depth {
                    return Some(LayerOwner::Private);
                }
                if depth == node_depth {
                    return Some(LayerOwner::Shared(*node));
                }
                *node
            }
            TaskAttach::Fused(Parent::Input) => return None,
            TaskAttach::Fused(Parent::Node(p)) => {
                if depth > self.nodes[p].depth {
                    return None;
                }
                *p
            }
        };
        // walk up the shared chain to the requested depth
        let mut cursor = frontier;
        loop {
            let node = &self.nodes[&cursor];
            if node.depth == depth {
                return Some(LayerOwner::Shared(cursor));
            }
            match node.parent {
                Parent::Node(p) => cursor = p,
                Parent::Input => return None,
            }
        }
    }

    /// Structural invariant checks: single parent per node, monotone
    /// depths, consistent shapes, every task path reaching the input.
    pub fn validate(&self) -> Result<()> {
        for (id, node) in &self.nodes {
            match node.parent {
                Parent::Input => {
                    if node.depth != 1 {
                        return Err(Error::contract(format!(
                            "node {} hangs off the input but has depth {}",
                            id.0, node.depth
                        )));
                    }
                    if node.layer.in_dim() != self.input_dim {
                        return Err(Error::shape("root node width does not match input"));
                    }
                }
                Parent::Node(p) => {
                    let parent = self.node(p)?;
                    if parent.depth + 1 != node.depth {
                        return Err(Error::contract("parent/child depths are not consecutive"));
                    }
                    if parent.layer.out_dim() != node.layer.in_dim() {
                        return Err(Error::shape("parent/child widths disagree"));
                    }
                }
            }
            if let NodeKind::Group(members) = &node.kind {
                if members.len() < 2 {
                    return Err(Error::contract("group node with fewer than two members"));
                }
            }
        }
        for (t, slot) in self.tasks.iter().enumerate() {
            let head_in = match &slot.attach {
                TaskAttach::Frontier { node, branch } => {
                    let node_ref = self.node(*node)?;
                    if node_ref.kind != NodeKind::Task(t) {
                        return Err(Error::contract("task attach points at a foreign node"));
                    }
                    let mut width = node_ref.layer.out_dim();
                    for l in branch {
                        if l.in_dim() != width {
                            return Err(Error::shape("branch widths disagree"));
                        }
                        width = l.out_dim();
                    }
                    width
                }
                TaskAttach::Fused(Parent::Node(p)) => self.node(*p)?.layer.out_dim(),
                TaskAttach::Fused(Parent::Input) => self.input_dim,
            };
            if slot.head.in_dim() != head_in {
                return Err(Error::shape("head width does not match its parent"));
            }
        }
        Ok(())
    }
}

enum LayerOwner {
    Shared(NodeId),
    Private,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn two_by_two(tasks: usize) -> ArchGraph {
        let specs: Vec<(String, usize)> = (0..tasks).map(|t| (format!("t{t}"), 1)).collect();
        ArchGraph::init_from_tasks(&specs, 3, &[4, 4], 42, 1e-4, 0.0).unwrap()
    }

    fn batch(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(vec![n, d], -1.0, 1.0, &mut rng)
    }

    #[test]
    fn init_builds_disjoint_chains() {
        let g = two_by_two(3);
        g.validate().unwrap();
        let cost = g.cost();
        // per chain: (4·3+4) + (4·4+4) + head (1·4+1) = 41
        assert_eq!(cost.parameter_count, 3 * 41);
        assert_eq!(g.fusible_sets().candidates.len(), 1);
        assert_eq!(g.fusible_sets().candidates[0].len(), 3);
    }

    #[test]
    fn init_single_task_is_a_single_chain() {
        let g = two_by_two(1);
        g.validate().unwrap();
        assert_eq!(g.nodes().count(), 1);
        assert!(g.fusible_sets().candidates.is_empty());
        assert_eq!(g.fusible_sets().singletons.len(), 1);
    }

    #[test]
    fn init_task_nodes_are_bitwise_identical() {
        let g = two_by_two(3);
        let ids: Vec<NodeId> = (0..3).map(|t| g.task_node(t).unwrap()).collect();
        let first = &g.node(ids[0]).unwrap().layer;
        for &id in &ids[1..] {
            let l = &g.node(id).unwrap().layer;
            assert_eq!(l.w.data(), first.w.data());
            assert_eq!(l.b.data(), first.b.data());
        }
    }

    #[test]
    fn init_rejects_empty_tasks() {
        assert!(matches!(
            ArchGraph::init_from_tasks(&[], 3, &[4], 0, 1e-4, 0.0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn group_node_averages_parameters() {
        let mut g = two_by_two(3);
        let members: Vec<NodeId> = (0..3).map(|t| g.task_node(t).unwrap()).collect();
        // perturb the members so the mean is informative
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for &id in &members {
            let (w, _) = g.param_mut(ParamKey::NodeW(id)).unwrap();
            for x in w.data_mut() {
                *x += rng.random_range(-0.5..0.5);
            }
        }
        let gid = g.create_group_node(&members).unwrap();
        let got = &g.node(gid).unwrap().layer.w;
        for k in 0..got.numel() {
            let mut want = 0.0;
            for &id in &members {
                want += g.node(id).unwrap().layer.w.data()[k];
            }
            want /= 3.0;
            assert!((got.data()[k] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn group_of_identical_members_is_bitwise_equal() {
        let mut g = two_by_two(2);
        let members: Vec<NodeId> = (0..2).map(|t| g.task_node(t).unwrap()).collect();
        let gid = g.create_group_node(&members).unwrap();
        let group = &g.node(gid).unwrap().layer;
        let member = &g.node(members[0]).unwrap().layer;
        assert_eq!(group.w.data(), member.w.data());
        assert_eq!(group.b.data(), member.b.data());
    }

    #[test]
    fn scalar_mean_example() {
        // W₁ = [[2]], W₂ = [[4]] → group W = [[3]]
        let mut g =
            ArchGraph::init_from_tasks(&[("a".into(), 1), ("b".into(), 1)], 1, &[1], 0, 1e-4, 0.0)
                .unwrap();
        for t in 0..2 {
            let id = g.task_node(t).unwrap();
            let (w, _) = g.param_mut(ParamKey::NodeW(id)).unwrap();
            w.data_mut()[0] = if t == 0 { 2.0 } else { 4.0 };
        }
        let members: Vec<NodeId> = (0..2).map(|t| g.task_node(t).unwrap()).collect();
        let gid = g.create_group_node(&members).unwrap();
        assert_eq!(g.node(gid).unwrap().layer.w.data(), &[3.0]);
    }

    #[test]
    fn fuse_and_remove_preserves_identical_forward() {
        let mut g = two_by_two(3);
        let before = g.forward(&batch(8, 3, 1)).unwrap();
        let members: Vec<NodeId> = (0..3).map(|t| g.task_node(t).unwrap()).collect();
        let params_before = g.cost().parameter_count;
        let node_size = g.node(members[0]).unwrap().layer.param_count();

        let gid = g.create_group_node(&members).unwrap();
        g.remove_task_nodes(&members, gid).unwrap();
        g.validate().unwrap();

        let after = g.forward(&batch(8, 3, 1)).unwrap();
        for t in 0..3 {
            let (a, b) = (&before.outputs[&t], &after.outputs[&t]);
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
        assert_eq!(
            g.cost().parameter_count,
            params_before - 2 * node_size,
            "parameter count drops by (members − 1) × node size"
        );
        // new frontier: three depth-2 task nodes under the group node
        let sets = g.fusible_sets();
        assert_eq!(sets.candidates.len(), 1);
        assert_eq!(sets.candidates[0].len(), 3);
        assert_eq!(g.node(sets.candidates[0][0]).unwrap().depth, 2);
    }

    #[test]
    fn partial_fusion_splits_the_frontier() {
        let mut g = two_by_two(3);
        let members: Vec<NodeId> = (0..2).map(|t| g.task_node(t).unwrap()).collect();
        let gid = g.create_group_node(&members).unwrap();
        g.remove_task_nodes(&members, gid).unwrap();
        g.validate().unwrap();
        let sets = g.fusible_sets();
        // tasks 0,1 now at depth 2 under the group; task 2 still at depth 1
        assert_eq!(sets.candidates.len(), 1);
        assert_eq!(sets.candidates[0].len(), 2);
        assert_eq!(sets.singletons.len(), 1);
        let parts = g.depth_partitions();
        assert_eq!(parts[0], vec![vec![0, 1], vec![2]]);
        assert_eq!(parts[1], vec![vec![0], vec![1], vec![2]]);
    }

    #[test]
    fn converged_graph_has_no_candidates() {
        let mut g = two_by_two(2);
        // fuse both depths fully, then the frontier is empty
        for _ in 0..2 {
            let sets = g.fusible_sets();
            let members = sets.candidates[0].clone();
            let gid = g.create_group_node(&members).unwrap();
            g.remove_task_nodes(&members, gid).unwrap();
        }
        assert!(!g.any_private_layers());
        assert!(g.fusible_sets().candidates.is_empty());
        assert!(g.fusible_sets().singletons.is_empty());
        g.validate().unwrap();
        // one-net: every depth one full group
        for row in g.depth_partitions() {
            assert_eq!(row, vec![vec![0, 1]]);
        }
    }

    #[test]
    fn forward_identical_chains_give_identical_outputs() {
        let g = two_by_two(3);
        let heads_equal = {
            let a = &g.task(0).head;
            let b = &g.task(1).head;
            a.w.data() == b.w.data()
        };
        // heads are drawn per task, so outputs differ unless chains AND heads match
        assert!(!heads_equal);
        let out = g.forward(&batch(4, 3, 2)).unwrap();
        // node features, however, are identical across the three chains
        let ids: Vec<NodeId> = (0..3).map(|t| g.task_node(t).unwrap()).collect();
        assert_eq!(out.features[&ids[0]].data(), out.features[&ids[1]].data());
        assert_eq!(out.features[&ids[0]].data(), out.features[&ids[2]].data());
    }

    #[test]
    fn shared_trunk_evaluated_once() {
        let mut g = two_by_two(3);
        for _ in 0..2 {
            let sets = g.fusible_sets();
            let members = sets.candidates[0].clone();
            let gid = g.create_group_node(&members).unwrap();
            g.remove_task_nodes(&members, gid).unwrap();
        }
        let out = g.forward(&batch(4, 3, 3)).unwrap();
        assert!(out.node_evals.values().all(|&c| c == 1));
        assert_eq!(out.node_evals.len(), 2); // two shared layers
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_relu_features() {
        let g = two_by_two(2);
        let out = g.forward(&Tensor::zeros(vec![4, 3])).unwrap();
        for t in 0..2 {
            let id = g.task_node(t).unwrap();
            assert!(out.features[&id].data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn cost_ratio_of_stn_to_onenet_shared_depth() {
        // hand count on widths [4,4], input 3: chain layers cost
        // (3·4 + 4·4)·2 flops = 56 per chain; STN has 3 chains, One-Net 1.
        let stn = two_by_two(3);
        let mut onenet = two_by_two(3);
        for _ in 0..2 {
            let sets = onenet.fusible_sets();
            let members = sets.candidates[0].clone();
            let gid = onenet.create_group_node(&members).unwrap();
            onenet.remove_task_nodes(&members, gid).unwrap();
        }
        let head_flops = 3u64 * 2 * 4;
        let stn_shared = stn.cost().flops_per_sample - head_flops;
        let one_shared = onenet.cost().flops_per_sample - head_flops;
        assert_eq!(stn_shared, 3 * one_shared);
    }

    #[test]
    fn monotone_sparsification() {
        let mut g = two_by_two(3);
        let mut last = g.cost();
        loop {
            let sets = g.fusible_sets();
            let Some(members) = sets.candidates.first().cloned() else {
                break;
            };
            let gid = g.create_group_node(&members).unwrap();
            g.remove_task_nodes(&members, gid).unwrap();
            let now = g.cost();
            assert!(now.parameter_count < last.parameter_count);
            assert!(now.flops_per_sample < last.flops_per_sample);
            last = now;
        }
        assert!(!g.any_private_layers());
    }

    #[test]
    fn remove_with_wrong_group_is_contract_error() {
        let mut g = two_by_two(3);
        let m01: Vec<NodeId> = (0..2).map(|t| g.task_node(t).unwrap()).collect();
        let m12: Vec<NodeId> = (1..3).map(|t| g.task_node(t).unwrap()).collect();
        let gid = g.create_group_node(&m01).unwrap();
        assert!(matches!(
            g.remove_task_nodes(&m12, gid),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn grouping_across_parents_is_contract_error() {
        let mut g = two_by_two(3);
        let m01: Vec<NodeId> = (0..2).map(|t| g.task_node(t).unwrap()).collect();
        let gid = g.create_group_node(&m01).unwrap();
        g.remove_task_nodes(&m01, gid).unwrap();
        // task 0's node now sits under the group, task 2's under the input
        let mixed = vec![g.task_node(0).unwrap(), g.task_node(2).unwrap()];
        assert!(matches!(
            g.create_group_node(&mixed),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn dangling_group_id_is_contract_error() {
        let mut g = two_by_two(2);
        let members: Vec<NodeId> = (0..2).map(|t| g.task_node(t).unwrap()).collect();
        assert!(matches!(
            g.remove_task_nodes(&members, NodeId(999)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn tape_forward_matches_eval_forward() {
        let g = two_by_two(2);
        let x = batch(4, 3, 5);
        let eval = g.forward(&x).unwrap();
        let mut tape = Tape::new();
        let tf = g.forward_on_tape(&mut tape, &x).unwrap();
        for t in 0..2 {
            assert_eq!(
                tape.value(tf.outputs[&t]).data(),
                eval.outputs[&t].data(),
                "tape and eval forward disagree"
            );
        }
    }
}
