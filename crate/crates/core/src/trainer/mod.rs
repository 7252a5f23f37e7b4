//! The alternating phase machine: task-learning phases train the whole
//! network under the CKA-regularized multi-task loss, structural-learning
//! phases group locally similar task nodes, average them into group nodes,
//! amalgamate knowledge, and remove the originals. A final fine-tuning
//! phase trains with the alignment weight forced to zero.
//!
//! Epoch accounting follows the schedule contract: task and fine-tune
//! epochs draw from the budget `E`; the structural (amalgamation) epochs
//! are additional. The step-wise learning-rate schedule decays ×0.1 at
//! 3/4 and 7/8 of `E` on that budget clock, indexed by absolute epochs
//! even after an early structural exit.

mod runlog;

pub use runlog::{PhaseTag, RunLog, RunRecord};

use crate::archgraph::{ArchGraph, NodeId, ParamKey, Parent};
use crate::data::{generate, load_dataset, Dataset, Split, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::losses::{
    amalgamation_loss, cka_alignment_loss, combined_loss, eval_metric, per_task_losses,
    weighted_total, AttNet, CkaVariant, TaskLossSpec,
};
use crate::similarity::{best_grouping, fusion_decision, pairwise_cka, FeatureMatrix};
use crate::tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
#[cfg(test)]
use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::PathBuf;

/// Training budget and per-phase epoch counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseSchedule {
    /// Total budget E of task-learning plus fine-tuning epochs.
    pub total_epochs: usize,
    /// Minimum fine-tuning epochs f.
    pub min_fine_tune: usize,
    /// Task-learning epochs per structural phase.
    pub task_epochs: Vec<usize>,
    /// Knowledge-amalgamation epochs per structural phase.
    pub structural_epochs: Vec<usize>,
}

/// Per-phase epoch counts at the reference budget of 80 epochs.
const BASE_TASK_EPOCHS: [usize; 10] = [2, 2, 2, 2, 4, 4, 8, 8, 8, 8];
const BASE_STRUCTURAL_EPOCHS: [usize; 10] = [1, 1, 2, 2, 2, 2, 4, 4, 8, 8];
const BASE_BUDGET: usize = 80;

impl PhaseSchedule {
    /// The standard ten-phase schedule scaled to an epoch budget, with the
    /// fine-tune floor at an eighth of the budget.
    pub fn for_budget(total_epochs: usize) -> Self {
        let scale = total_epochs as f64 / BASE_BUDGET as f64;
        let stretch = |base: &[usize]| -> Vec<usize> {
            base.iter()
                .map(|&e| ((e as f64 * scale).round() as usize).max(1))
                .collect()
        };
        PhaseSchedule {
            total_epochs,
            min_fine_tune: (total_epochs / 8).max(1),
            task_epochs: stretch(&BASE_TASK_EPOCHS),
            structural_epochs: stretch(&BASE_STRUCTURAL_EPOCHS),
        }
    }

    pub fn n_phases(&self) -> usize {
        self.task_epochs.len()
    }

    /// Keeps only the first `n` structural phases.
    pub fn truncated(mut self, n: usize) -> Result<Self> {
        if n > self.task_epochs.len() {
            return Err(Error::config(format!(
                "cannot keep {n} structural phases, schedule has {}",
                self.task_epochs.len()
            )));
        }
        self.task_epochs.truncate(n);
        self.structural_epochs.truncate(n);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(Error::config("schedule: E must be ≥ 1"));
        }
        if self.task_epochs.len() != self.structural_epochs.len() {
            return Err(Error::config(format!(
                "schedule: |E_t| = {} but |E_s| = {}",
                self.task_epochs.len(),
                self.structural_epochs.len()
            )));
        }
        if self
            .task_epochs
            .iter()
            .chain(&self.structural_epochs)
            .any(|&e| e == 0)
        {
            return Err(Error::config(
                "schedule: all E_t and E_s entries must be ≥ 1",
            ));
        }
        let task_sum: usize = self.task_epochs.iter().sum();
        if self.min_fine_tune >= self.total_epochs
            || task_sum + self.min_fine_tune >= self.total_epochs
        {
            return Err(Error::config(format!(
                "schedule: Σ E_t < E − f violated ({task_sum} ≥ {} − {})",
                self.total_epochs, self.min_fine_tune
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
}

fn default_lr() -> f64 {
    1e-4
}

fn default_weight_decay() -> f64 {
    5e-5
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: default_lr(),
            weight_decay: default_weight_decay(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticDataConfig {
    pub spec: SyntheticTaskSpec,
    pub n_samples: usize,
}

/// Full run configuration: dataset source, architecture widths, losses,
/// schedule, and the structural-learning knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticDataConfig>,
    #[serde(default = "default_widths")]
    pub widths: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub losses: Option<TaskLossSpec>,
    pub schedule: PhaseSchedule,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_probe_size")]
    pub probe_size: usize,
    #[serde(default)]
    pub cka_variant: CkaVariant,
}

fn default_widths() -> Vec<usize> {
    vec![16, 16, 16]
}

fn default_lambda() -> f64 {
    0.1
}

fn default_gamma() -> f64 {
    0.75
}

fn default_batch_size() -> usize {
    16
}

fn default_probe_size() -> usize {
    256
}

impl RunConfig {
    /// A fresh config with every knob at its default for the given budget.
    pub fn defaults(seed: u64, total_epochs: usize) -> Self {
        RunConfig {
            seed,
            dataset: None,
            synthetic: None,
            widths: default_widths(),
            losses: None,
            schedule: PhaseSchedule::for_budget(total_epochs),
            lambda: default_lambda(),
            gamma: default_gamma(),
            optimizer: OptimizerConfig::default(),
            batch_size: default_batch_size(),
            probe_size: default_probe_size(),
            cka_variant: CkaVariant::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(Error::config("λ must be ≥ 0"));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("γ must lie in [0, 1]"));
        }
        if self.widths.is_empty() {
            return Err(Error::config("widths must name at least one layer"));
        }
        if self.batch_size < 4 {
            return Err(Error::config(
                "batch_size must be ≥ 4 (unbiased CKA needs 4 samples)",
            ));
        }
        if self.probe_size < 4 {
            return Err(Error::config("probe_size must be ≥ 4"));
        }
        if let Some(spec) = &self.losses {
            spec.validate()?;
        }
        match (&self.dataset, &self.synthetic) {
            (Some(_), Some(_)) => Err(Error::config(
                "config names both a dataset path and a synthetic spec",
            )),
            (None, None) => Err(Error::config(
                "config needs a dataset path or a synthetic spec",
            )),
            _ => Ok(()),
        }
    }

    /// Materializes the dataset this config points at.
    pub fn load_data(&self) -> Result<Dataset> {
        match (&self.dataset, &self.synthetic) {
            (Some(dir), None) => load_dataset(dir),
            (None, Some(synth)) => generate(&synth.spec, synth.n_samples, self.seed),
            _ => Err(Error::config("exactly one dataset source required")),
        }
    }
}

/// Per-task validation metrics of a graph on a data split, in evaluation
/// mode (no tape). Deterministic: identical inputs give identical outputs.
pub fn evaluate(
    graph: &ArchGraph,
    split: &Split,
    spec: &TaskLossSpec,
) -> Result<BTreeMap<usize, f64>> {
    let fwd = graph.forward(&split.inputs)?;
    let mut metrics = BTreeMap::new();
    for (t, output) in &fwd.outputs {
        metrics.insert(
            *t,
            eval_metric(spec.tasks[*t].kind, output, &split.targets[*t])?,
        );
    }
    Ok(metrics)
}

struct PendingFusion {
    group_id: NodeId,
    members: Vec<NodeId>,
    attnets: Vec<AttNet>,
}

/// Owns one training run: config, data, the evolving graph, and the log.
pub struct Trainer {
    config: RunConfig,
    loss_spec: TaskLossSpec,
    data: Dataset,
    graph: ArchGraph,
    log: RunLog,
    shuffle_rng: ChaCha8Rng,
    attnet_rng: ChaCha8Rng,
    probe_inputs: Tensor,
    /// Global epoch counter over all phases.
    wall: usize,
    /// Budget clock `e`: task-learning plus fine-tuning epochs.
    clock: usize,
    structural_phases_run: usize,
}

impl Trainer {
    pub fn new(config: RunConfig, data: Dataset) -> Result<Self> {
        config.validate()?;
        let n_tasks = data.task_names.len();
        let loss_spec = match &config.losses {
            Some(spec) => {
                if spec.tasks.len() != n_tasks {
                    return Err(Error::config(format!(
                        "loss spec covers {} tasks, dataset has {n_tasks}",
                        spec.tasks.len()
                    )));
                }
                spec.clone()
            }
            None => TaskLossSpec::uniform_mse(n_tasks),
        };
        if data.train.len() < config.batch_size {
            return Err(Error::config(format!(
                "training split has {} rows, batch size is {}",
                data.train.len(),
                config.batch_size
            )));
        }
        let tasks: Vec<(String, usize)> = data
            .task_names
            .iter()
            .cloned()
            .zip(data.train.targets.iter().map(|t| t.shape()[1]))
            .collect();
        let graph = ArchGraph::init_from_tasks(
            &tasks,
            data.input_dim,
            &config.widths,
            config.seed,
            config.optimizer.lr,
            config.optimizer.weight_decay,
        )?;
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
        shuffle_rng.set_stream(10);
        let mut attnet_rng = ChaCha8Rng::seed_from_u64(config.seed);
        attnet_rng.set_stream(11);

        let probe_rows: Vec<usize> = (0..config.probe_size.min(data.train.len())).collect();
        let (probe_inputs, _) = data.train.gather(&probe_rows);

        Ok(Trainer {
            config,
            loss_spec,
            data,
            graph,
            log: RunLog::default(),
            shuffle_rng,
            attnet_rng,
            probe_inputs,
            wall: 0,
            clock: 0,
            structural_phases_run: 0,
        })
    }

    pub fn graph(&self) -> &ArchGraph {
        &self.graph
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn loss_spec(&self) -> &TaskLossSpec {
        &self.loss_spec
    }

    pub fn into_parts(self) -> (ArchGraph, RunLog) {
        (self.graph, self.log)
    }

    /// Step-wise learning rate: ×0.1 at 3/4 of the budget, ×0.01 at 7/8,
    /// indexed on the budget clock.
    fn current_lr(&self) -> f64 {
        let e = self.config.schedule.total_epochs;
        let s1 = (e * 3) / 4;
        let s2 = (e * 7) / 8;
        let mult = if self.clock >= s2 {
            0.01
        } else if self.clock >= s1 {
            0.1
        } else {
            1.0
        };
        self.config.optimizer.lr * mult
    }

    /// Runs `epochs` epochs of minibatch Adam on the combined loss with the
    /// given alignment weight. The budget clock advances per epoch.
    pub fn run_task_phase(&mut self, epochs: usize, lambda: f64, tag: PhaseTag) -> Result<()> {
        for _ in 0..epochs {
            let lr = self.current_lr();
            self.graph.set_lr(lr);

            let mut idx: Vec<usize> = (0..self.data.train.len()).collect();
            idx.shuffle(&mut self.shuffle_rng);

            let mut loss_sums: BTreeMap<usize, f64> = BTreeMap::new();
            let mut batches = 0usize;
            for chunk in idx.chunks_exact(self.config.batch_size) {
                let (x, target_vec) = self.data.train.gather(chunk);
                let targets: BTreeMap<usize, Tensor> = target_vec.into_iter().enumerate().collect();

                let mut tape = Tape::new();
                let tf = self.graph.forward_on_tape(&mut tape, &x)?;
                let per_task = per_task_losses(&mut tape, &tf.outputs, &targets, &self.loss_spec)?;
                let mtl = weighted_total(&mut tape, &per_task, &self.loss_spec)?;
                let loss = if lambda > 0.0 {
                    let sites: Vec<Vec<Var>> = self
                        .graph
                        .fusible_sets()
                        .candidates
                        .iter()
                        .map(|set| set.iter().map(|id| tf.node_features[id]).collect())
                        .collect();
                    let cka = cka_alignment_loss(&mut tape, &sites, self.config.cka_variant)?;
                    combined_loss(&mut tape, mtl, cka, lambda)?
                } else {
                    mtl
                };
                let loss_value = tape.value(loss).item()?;
                if !loss_value.is_finite() {
                    return Err(Error::numeric(format!(
                        "non-finite loss at epoch {} (wall {})",
                        self.clock, self.wall
                    )));
                }
                for (&t, &lv) in &per_task {
                    *loss_sums.entry(t).or_insert(0.0) += tape.value(lv).item()?;
                }
                let grads = tape.backward(loss)?;
                for (key, var) in &tf.param_vars {
                    self.graph.adam_update(*key, grads.get(*var))?;
                }
                batches += 1;
            }
            self.clock += 1;
            self.push_epoch_record(tag, lambda, lr, &loss_sums, batches, None)?;
        }
        Ok(())
    }

    fn push_epoch_record(
        &mut self,
        phase: PhaseTag,
        lambda: f64,
        lr: f64,
        loss_sums: &BTreeMap<usize, f64>,
        batches: usize,
        amalgamation: Option<f64>,
    ) -> Result<()> {
        let val = evaluate(&self.graph, &self.data.val, &self.loss_spec)?;
        let cost = self.graph.cost();
        let name = |t: usize| self.data.task_names[t].clone();
        self.wall += 1;
        self.log.push(RunRecord::Epoch {
            wall: self.wall,
            clock: self.clock,
            phase,
            lambda,
            lr,
            train_loss: loss_sums
                .iter()
                .map(|(&t, &s)| (name(t), s / batches.max(1) as f64))
                .collect(),
            amalgamation_loss: amalgamation,
            val_metric: val.iter().map(|(&t, &m)| (name(t), m)).collect(),
            params: cost.parameter_count,
            flops: cost.flops_per_sample,
        });
        Ok(())
    }

    /// One structural phase: group the fusible task-node sets by probe CKA,
    /// fuse the groups that clear γ (parameter and optimizer-state
    /// averaging), amalgamate for `epochs` epochs, then remove the member
    /// task nodes. Returns whether any task still has private layers.
    pub fn run_structural_phase(&mut self, epochs: usize) -> Result<bool> {
        let phase = self.structural_phases_run;
        self.structural_phases_run += 1;
        let gamma = self.config.gamma;

        // probe features, evaluation mode
        let probe = self.graph.forward(&self.probe_inputs)?;
        let sets = self.graph.fusible_sets();
        let mut fusions: Vec<PendingFusion> = Vec::new();
        for set in &sets.candidates {
            let site = match self.graph.node(set[0])?.parent {
                Parent::Input => "input".to_string(),
                Parent::Node(p) => format!("node/{}", p.0),
            };
            let mut entries = Vec::new();
            let mut owners = Vec::new();
            for &id in set {
                let owner = match self.graph.node(id)?.kind {
                    crate::archgraph::NodeKind::Task(t) => t,
                    _ => unreachable!("fusible sets contain task nodes only"),
                };
                owners.push(owner);
                let depth = self.graph.node(id)?.depth;
                entries.push((
                    self.data.task_names[owner].clone(),
                    FeatureMatrix::new(probe.features[&id].clone())?
                        .with_source(self.data.task_names[owner].clone(), depth),
                ));
            }
            let sim = pairwise_cka(&entries)?;
            let t = sim.len();
            self.log.push(RunRecord::Similarity {
                phase,
                site: site.clone(),
                tasks: sim.tasks().to_vec(),
                matrix: (0..t)
                    .map(|i| (0..t).map(|j| sim.get(i, j)).collect())
                    .collect(),
            });
            let grouping = best_grouping(&sim, gamma)?;
            let fused_groups = fusion_decision(&grouping, gamma);
            self.log.push(RunRecord::GroupingChoice {
                phase,
                site,
                grouping: grouping.clone(),
                fused: fused_groups
                    .iter()
                    .map(|g| g.members.iter().map(|&m| sim.tasks()[m].clone()).collect())
                    .collect(),
            });
            for group in fused_groups {
                let members: Vec<NodeId> = group.members.iter().map(|&m| set[m]).collect();
                let group_id = self.graph.create_group_node(&members)?;
                let depth = self.graph.node(group_id)?.depth;
                let channels = self.graph.node(group_id)?.layer.out_dim();
                let lr = self.current_lr();
                let attnets = (0..members.len())
                    .map(|_| AttNet::new(channels, lr, &mut self.attnet_rng))
                    .collect();
                self.log.push(RunRecord::Fusion {
                    phase,
                    members: group
                        .members
                        .iter()
                        .map(|&m| sim.tasks()[m].clone())
                        .collect(),
                    node: group_id.0,
                    depth,
                });
                fusions.push(PendingFusion {
                    group_id,
                    members,
                    attnets,
                });
            }
        }

        if !fusions.is_empty() {
            for _ in 0..epochs {
                let mean_ka = self.amalgamation_epoch(&mut fusions)?;
                let lr = self.current_lr();
                self.push_epoch_record(
                    PhaseTag::Structural,
                    self.config.lambda,
                    lr,
                    &BTreeMap::new(),
                    0,
                    Some(mean_ka),
                )?;
            }
            for fusion in &fusions {
                self.graph
                    .remove_task_nodes(&fusion.members, fusion.group_id)?;
            }
        }
        Ok(self.graph.any_private_layers())
    }

    /// One epoch of attention-based knowledge transfer over the training
    /// stream: only the group nodes and their attention nets move; member
    /// task nodes are frozen teachers. Returns the mean amalgamation loss.
    fn amalgamation_epoch(&mut self, fusions: &mut [PendingFusion]) -> Result<f64> {
        let mut idx: Vec<usize> = (0..self.data.train.len()).collect();
        idx.shuffle(&mut self.shuffle_rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in idx.chunks_exact(self.config.batch_size) {
            let (x, _) = self.data.train.gather(chunk);
            for fusion in fusions.iter_mut() {
                let (parent, layer) = {
                    let group = self.graph.node(fusion.group_id)?;
                    (group.parent, group.layer.clone())
                };
                let parent_input = match parent {
                    Parent::Input => x.clone(),
                    Parent::Node(p) => self.graph.node_forward(p, &x)?,
                };
                let teachers: Vec<Tensor> = fusion
                    .members
                    .iter()
                    .map(|&id| {
                        self.graph
                            .node(id)
                            .and_then(|n| n.layer.apply(&parent_input))
                    })
                    .collect::<Result<_>>()?;

                let mut tape = Tape::new();
                let xin = tape.constant(&parent_input);
                let wv = tape.param(&layer.w);
                let bv = tape.param(&layer.b);
                let gf = layer.apply_on_tape(&mut tape, xin, wv, bv)?;
                let mut atts = Vec::with_capacity(fusion.attnets.len());
                let mut att_vars = Vec::with_capacity(fusion.attnets.len());
                for net in &fusion.attnets {
                    let (vars, att) = net.forward_on_tape(&mut tape, gf)?;
                    atts.push(att);
                    att_vars.push(vars);
                }
                let loss = amalgamation_loss(&mut tape, &teachers, &atts, gf)?;
                let loss_value = tape.value(loss).item()?;
                if !loss_value.is_finite() {
                    return Err(Error::numeric(format!(
                        "non-finite amalgamation loss at wall epoch {}",
                        self.wall
                    )));
                }
                total += loss_value;
                count += 1;
                let grads = tape.backward(loss)?;
                self.graph
                    .adam_update(ParamKey::NodeW(fusion.group_id), grads.get(wv))?;
                self.graph
                    .adam_update(ParamKey::NodeB(fusion.group_id), grads.get(bv))?;
                for (net, vars) in fusion.attnets.iter_mut().zip(&att_vars) {
                    net.apply_grads(vars, &grads)?;
                }
            }
        }
        Ok(total / count.max(1) as f64)
    }

    /// The full run: alternating task and structural phases, early exit
    /// once no task-private layers remain, then fine-tuning for the rest of
    /// the budget with λ forced to 0.
    pub fn run(&mut self) -> Result<()> {
        self.log.push(RunRecord::Meta {
            config: serde_json::to_value(&self.config)
                .map_err(|e| Error::contract(e.to_string()))?,
        });
        let schedule = self.config.schedule.clone();
        for i in 0..schedule.n_phases() {
            self.run_task_phase(schedule.task_epochs[i], self.config.lambda, PhaseTag::Task)?;
            let layers_remain = self.run_structural_phase(schedule.structural_epochs[i])?;
            if !layers_remain {
                break;
            }
        }
        let remaining = schedule.total_epochs.saturating_sub(self.clock);
        self.run_task_phase(remaining, 0.0, PhaseTag::FineTune)?;
        Ok(())
    }
}

/// Convenience wrapper: loads (or generates) the config's dataset, runs the
/// full phase machine, and returns the trained graph with its log.
pub fn run_mtsl(config: &RunConfig) -> Result<(ArchGraph, RunLog)> {
    let data = config.load_data()?;
    let mut trainer = Trainer::new(config.clone(), data)?;
    trainer.run()?;
    Ok(trainer.into_parts())
}
