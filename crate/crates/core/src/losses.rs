//! Training losses: the weighted multi-task loss, the CKA alignment
//! regularizer, their combination, and the attention-based knowledge
//! amalgamation loss used when a group node absorbs its member task nodes.
//!
//! All losses are recorded on a [`Tape`] so gradients flow to whatever
//! parameters were inserted as gradient leaves. Teacher features handed to
//! the amalgamation loss are plain tensors, so they are constants by
//! construction and never receive gradients.

use crate::error::{Error, Result};
use crate::tensor::{AdamState, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Which CKA estimator the alignment regularizer differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CkaVariant {
    /// U-statistic HSIC ratio on zeroed-diagonal Gram matrices.
    #[default]
    Unbiased,
    /// Double-centered Gram cosine; fallback when the unbiased gradient
    /// proves unstable for a given run.
    Biased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    SoftmaxCrossEntropy,
}

/// Per-task loss choice and weight.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskLoss {
    pub kind: LossKind,
    #[serde(default = "default_weight")]
    pub weight: f64,
}

fn default_weight() -> f64 {
    1.0
}

/// Loss configuration over the ordered task list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskLossSpec {
    pub tasks: Vec<TaskLoss>,
}

impl TaskLossSpec {
    pub fn uniform_mse(n_tasks: usize) -> Self {
        TaskLossSpec {
            tasks: vec![
                TaskLoss {
                    kind: LossKind::Mse,
                    weight: 1.0,
                };
                n_tasks
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .tasks
            .iter()
            .any(|t| !t.weight.is_finite() || t.weight < 0.0)
        {
            return Err(Error::config("task loss weights must be finite and ≥ 0"));
        }
        Ok(())
    }
}

/// Unweighted per-task losses, keyed like `outputs`.
pub fn per_task_losses(
    tape: &mut Tape,
    outputs: &BTreeMap<usize, Var>,
    targets: &BTreeMap<usize, Tensor>,
    spec: &TaskLossSpec,
) -> Result<BTreeMap<usize, Var>> {
    if spec.tasks.len() != outputs.len() {
        return Err(Error::contract(format!(
            "loss spec covers {} tasks, outputs cover {}",
            spec.tasks.len(),
            outputs.len()
        )));
    }
    let mut losses = BTreeMap::new();
    for (&t, &out) in outputs {
        let target = targets
            .get(&t)
            .ok_or_else(|| Error::contract(format!("missing target for task {t}")))?;
        let loss = match spec.tasks[t].kind {
            LossKind::Mse => {
                let tv = tape.constant(target);
                let diff = tape.sub(out, tv)?;
                let sq = tape.square(diff);
                tape.mean(sq)
            }
            LossKind::SoftmaxCrossEntropy => tape.softmax_cross_entropy(out, target)?,
        };
        losses.insert(t, loss);
    }
    Ok(losses)
}

/// Weights and sums per-task losses into the multi-task total.
pub fn weighted_total(
    tape: &mut Tape,
    per_task: &BTreeMap<usize, Var>,
    spec: &TaskLossSpec,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (&t, &loss) in per_task {
        let weighted = tape.scale(loss, spec.tasks[t].weight);
        total = Some(match total {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
    }
    total.ok_or_else(|| Error::contract("multitask loss over zero tasks"))
}

/// Weighted sum of per-task losses: `Σ_t w_t · loss_t`.
pub fn multitask_loss(
    tape: &mut Tape,
    outputs: &BTreeMap<usize, Var>,
    targets: &BTreeMap<usize, Tensor>,
    spec: &TaskLossSpec,
) -> Result<Var> {
    let per_task = per_task_losses(tape, outputs, targets, spec)?;
    weighted_total(tape, &per_task, spec)
}

/// Evaluation metric for one task on plain tensors: MSE for regression,
/// argmax accuracy for classification.
pub fn eval_metric(kind: LossKind, output: &Tensor, target: &Tensor) -> Result<f64> {
    if output.shape() != target.shape() {
        return Err(Error::shape(format!(
            "eval_metric: output {:?} vs target {:?}",
            output.shape(),
            target.shape()
        )));
    }
    match kind {
        LossKind::Mse => output.sub(target)?.square().mean().item(),
        LossKind::SoftmaxCrossEntropy => {
            let (n, c) = (output.shape()[0], output.shape()[1]);
            let argmax = |row: &[f64]| -> usize {
                let mut best = 0;
                for j in 1..row.len() {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                best
            };
            let mut hits = 0usize;
            for i in 0..n {
                let o = &output.data()[i * c..(i + 1) * c];
                let t = &target.data()[i * c..(i + 1) * c];
                if argmax(o) == argmax(t) {
                    hits += 1;
                }
            }
            Ok(hits as f64 / n as f64)
        }
    }
}

/// Whether lower values of the task's evaluation metric are better.
pub fn lower_is_better(kind: LossKind) -> bool {
    match kind {
        LossKind::Mse => true,
        LossKind::SoftmaxCrossEntropy => false,
    }
}

const DENOM_GUARD: f64 = 1e-12;

/// Differentiable unbiased CKA between two on-tape N×C feature vars.
///
/// The denominator is guarded by clamping each HSIC self-term at zero and
/// adding 1e-12 under the square root, which keeps the loss finite on
/// degenerate features without moving well-conditioned values.
pub fn cka_unbiased_on_tape(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    let n = tape.value(x).shape()[0];
    if n < 4 {
        return Err(Error::precondition(format!(
            "unbiased CKA requires N ≥ 4 samples, got {n}"
        )));
    }
    if tape.value(y).shape()[0] != n {
        return Err(Error::shape("CKA operands must share the sample count"));
    }
    let mut mask = Tensor::new(vec![n, n], vec![1.0; n * n])?;
    for i in 0..n {
        mask.data_mut()[i * n + i] = 0.0;
    }
    let mask = tape.constant(&mask);
    let xt = tape.transpose(x)?;
    let gk = tape.matmul(x, xt)?;
    let k = tape.mul(gk, mask)?;
    let yt = tape.transpose(y)?;
    let gl = tape.matmul(y, yt)?;
    let l = tape.mul(gl, mask)?;

    let hxy = hsic_unbiased_on_tape(tape, k, l, n)?;
    let hxx = hsic_unbiased_on_tape(tape, k, k, n)?;
    let hyy = hsic_unbiased_on_tape(tape, l, l, n)?;
    let dx = tape.relu(hxx);
    let dy = tape.relu(hyy);
    let prod = tape.mul(dx, dy)?;
    let guarded = tape.add_const(prod, DENOM_GUARD);
    let denom = tape.sqrt(guarded);
    tape.div(hxy, denom)
}

fn hsic_unbiased_on_tape(tape: &mut Tape, k: Var, l: Var, n: usize) -> Result<Var> {
    let nf = n as f64;
    let kl = tape.mul(k, l)?;
    let trace = tape.sum(kl);
    let sk = tape.sum(k);
    let sl = tape.sum(l);
    let s_prod = tape.mul(sk, sl)?;
    let ones = Tensor::new(vec![n, 1], vec![1.0; n])?;
    let ones = tape.constant(&ones);
    let rk = tape.matmul(k, ones)?;
    let rl = tape.matmul(l, ones)?;
    let rkl = tape.mul(rk, rl)?;
    let cross = tape.sum(rkl);

    let t2 = tape.scale(s_prod, 1.0 / ((nf - 1.0) * (nf - 2.0)));
    let t3 = tape.scale(cross, -2.0 / (nf - 2.0));
    let s1 = tape.add(trace, t2)?;
    let s2 = tape.add(s1, t3)?;
    Ok(tape.scale(s2, 1.0 / (nf * (nf - 3.0))))
}

/// Differentiable biased CKA: cosine of double-centered Gram matrices.
pub fn cka_biased_on_tape(tape: &mut Tape, x: Var, y: Var) -> Result<Var> {
    let n = tape.value(x).shape()[0];
    if tape.value(y).shape()[0] != n {
        return Err(Error::shape("CKA operands must share the sample count"));
    }
    // H = I − 11ᵀ/n as a constant; centering is H·G·H
    let mut h = Tensor::new(vec![n, n], vec![-1.0 / n as f64; n * n])?;
    for i in 0..n {
        h.data_mut()[i * n + i] += 1.0;
    }
    let h = tape.constant(&h);
    let center = |tape: &mut Tape, f: Var| -> Result<Var> {
        let ft = tape.transpose(f)?;
        let g = tape.matmul(f, ft)?;
        let hg = tape.matmul(h, g)?;
        tape.matmul(hg, h)
    };
    let cx = center(tape, x)?;
    let cy = center(tape, y)?;
    let num_elem = tape.mul(cx, cy)?;
    let num = tape.sum(num_elem);
    let sq_x = tape.mul(cx, cx)?;
    let dx = tape.sum(sq_x);
    let sq_y = tape.mul(cy, cy)?;
    let dy = tape.sum(sq_y);
    let prod = tape.mul(dx, dy)?;
    let guarded = tape.add_const(prod, DENOM_GUARD);
    let denom = tape.sqrt(guarded);
    tape.div(num, denom)
}

/// Mean differentiable CKA over all co-fusible pairs of task-node features,
/// grouped by fusion site. When no site holds two or more task nodes the
/// result is the constant 1, which makes the `λ(1 − L_CKA)` penalty vanish
/// with zero gradient.
pub fn cka_alignment_loss(tape: &mut Tape, sites: &[Vec<Var>], variant: CkaVariant) -> Result<Var> {
    let mut pair_scores = Vec::new();
    for site in sites {
        for i in 0..site.len() {
            for j in (i + 1)..site.len() {
                let score = match variant {
                    CkaVariant::Unbiased => cka_unbiased_on_tape(tape, site[i], site[j])?,
                    CkaVariant::Biased => cka_biased_on_tape(tape, site[i], site[j])?,
                };
                pair_scores.push(score);
            }
        }
    }
    if pair_scores.is_empty() {
        return Ok(tape.constant(&Tensor::scalar(1.0)));
    }
    let mut acc = pair_scores[0];
    for &s in &pair_scores[1..] {
        acc = tape.add(acc, s)?;
    }
    Ok(tape.scale(acc, 1.0 / pair_scores.len() as f64))
}

/// The full task-phase loss `L = L_MTL + λ(1 − L_CKA)`.
pub fn combined_loss(tape: &mut Tape, mtl: Var, cka: Var, lambda: f64) -> Result<Var> {
    if lambda < 0.0 {
        return Err(Error::config("λ must be ≥ 0"));
    }
    let neg = tape.scale(cka, -lambda);
    let penalty = tape.add_const(neg, lambda);
    tape.add(mtl, penalty)
}

/// Per-member channel-attention network: two affine layers C→H→C with a
/// ReLU between and a sigmoid output, producing one attention row per
/// sample.
#[derive(Debug, Clone)]
pub struct AttNet {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub adam_w1: AdamState,
    pub adam_b1: AdamState,
    pub adam_w2: AdamState,
    pub adam_b2: AdamState,
}

/// Tape handles of one [`AttNet`]'s parameters for the current step.
#[derive(Debug, Clone, Copy)]
pub struct AttVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl AttNet {
    /// Fresh attention net for `channels`-wide features; the hidden width
    /// defaults to the channel count.
    pub fn new(channels: usize, lr: f64, rng: &mut impl Rng) -> Self {
        let hidden = channels;
        let bound1 = 1.0 / (channels as f64).sqrt();
        let bound2 = 1.0 / (hidden as f64).sqrt();
        let w1 = Tensor::rand_uniform(vec![hidden, channels], -bound1, bound1, rng);
        let b1 = Tensor::zeros(vec![hidden]);
        let w2 = Tensor::rand_uniform(vec![channels, hidden], -bound2, bound2, rng);
        let b2 = Tensor::zeros(vec![channels]);
        AttNet {
            adam_w1: AdamState::new(w1.numel(), lr, 0.0),
            adam_b1: AdamState::new(b1.numel(), lr, 0.0),
            adam_w2: AdamState::new(w2.numel(), lr, 0.0),
            adam_b2: AdamState::new(b2.numel(), lr, 0.0),
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn channels(&self) -> usize {
        self.w1.shape()[1]
    }

    /// Records the attention computation on the tape with the net's
    /// parameters as gradient leaves. Returns the parameter vars and the
    /// N×C attention output in (0, 1).
    pub fn forward_on_tape(&self, tape: &mut Tape, group_feature: Var) -> Result<(AttVars, Var)> {
        let vars = AttVars {
            w1: tape.param(&self.w1),
            b1: tape.param(&self.b1),
            w2: tape.param(&self.w2),
            b2: tape.param(&self.b2),
        };
        let h = tape.affine(group_feature, vars.w1, vars.b1)?;
        let h = tape.relu(h);
        let o = tape.affine(h, vars.w2, vars.b2)?;
        Ok((vars, tape.sigmoid(o)))
    }

    /// Adam step on all four parameters from a finished backward pass.
    pub fn apply_grads(
        &mut self,
        vars: &AttVars,
        grads: &crate::tensor::GradientMap,
    ) -> Result<()> {
        for (param, state, var) in [
            (&mut self.w1, &mut self.adam_w1, vars.w1),
            (&mut self.b1, &mut self.adam_b1, vars.b1),
            (&mut self.w2, &mut self.adam_w2, vars.w2),
            (&mut self.b2, &mut self.adam_b2, vars.b2),
        ] {
            let (p, s) = crate::tensor::adam_step(param, grads.get(var), state)?;
            *param = p;
            *state = s;
        }
        Ok(())
    }
}

/// Knowledge amalgamation loss: mean over members of the mean squared gap
/// between the member's (frozen) features and the attention-masked group
/// feature, `(1/|members|) Σ_i mean((F_i − ATT_i(𝓕) ⊙ 𝓕)²)`.
pub fn amalgamation_loss(
    tape: &mut Tape,
    member_features: &[Tensor],
    attentions: &[Var],
    group_feature: Var,
) -> Result<Var> {
    if member_features.is_empty() || member_features.len() != attentions.len() {
        return Err(Error::contract(
            "amalgamation_loss needs one attention per member feature",
        ));
    }
    let gshape = tape.value(group_feature).shape().to_vec();
    let mut total: Option<Var> = None;
    for (f, &att) in member_features.iter().zip(attentions) {
        if f.shape() != gshape.as_slice() {
            return Err(Error::shape(format!(
                "member feature {:?} does not match group feature {:?}",
                f.shape(),
                gshape
            )));
        }
        if tape.value(att).shape() != gshape.as_slice() {
            return Err(Error::shape("attention shape must match the group feature"));
        }
        let teacher = tape.constant(f);
        let masked = tape.mul(att, group_feature)?;
        let gap = tape.sub(teacher, masked)?;
        let sq = tape.square(gap);
        let m = tape.mean(sq);
        total = Some(match total {
            None => m,
            Some(acc) => tape.add(acc, m)?,
        });
    }
    Ok(tape.scale(total.unwrap(), 1.0 / member_features.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::{cka_unbiased, FeatureMatrix};
    use crate::tensor::tape::{central_difference, max_rel_err};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng)
    }

    fn scalar_outputs(tape: &mut Tape, values: &[f64]) -> BTreeMap<usize, Var> {
        values
            .iter()
            .enumerate()
            .map(|(t, &v)| (t, tape.constant(&Tensor::scalar(v))))
            .collect()
    }

    #[test]
    fn perfect_predictions_give_zero_mse() {
        let mut tape = Tape::new();
        let out = rand_t(vec![4, 2], 1);
        let outputs = BTreeMap::from([(0, tape.constant(&out))]);
        let targets = BTreeMap::from([(0, out.clone())]);
        let spec = TaskLossSpec::uniform_mse(1);
        let loss = multitask_loss(&mut tape, &outputs, &targets, &spec).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 0.0);
    }

    #[test]
    fn unit_weights_sum_task_losses() {
        // per-task mse losses of 1.0 and 3.0
        let mut tape = Tape::new();
        let outputs = scalar_outputs(&mut tape, &[1.0, 3.0_f64.sqrt()]);
        let targets = BTreeMap::from([(0, Tensor::scalar(0.0)), (1, Tensor::scalar(0.0))]);
        let spec = TaskLossSpec::uniform_mse(2);
        let loss = multitask_loss(&mut tape, &outputs, &targets, &spec).unwrap();
        assert!((tape.value(loss).item().unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn weighted_sum_oracle() {
        let mut tape = Tape::new();
        let outputs = scalar_outputs(&mut tape, &[1.0, 3.0_f64.sqrt()]);
        let targets = BTreeMap::from([(0, Tensor::scalar(0.0)), (1, Tensor::scalar(0.0))]);
        let spec = TaskLossSpec {
            tasks: vec![
                TaskLoss {
                    kind: LossKind::Mse,
                    weight: 2.0,
                },
                TaskLoss {
                    kind: LossKind::Mse,
                    weight: 0.0,
                },
            ],
        };
        let loss = multitask_loss(&mut tape, &outputs, &targets, &spec).unwrap();
        assert!((tape.value(loss).item().unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn missing_target_is_contract_error() {
        let mut tape = Tape::new();
        let outputs = scalar_outputs(&mut tape, &[1.0]);
        let targets = BTreeMap::new();
        let spec = TaskLossSpec::uniform_mse(1);
        assert!(matches!(
            multitask_loss(&mut tape, &outputs, &targets, &spec),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn tape_cka_matches_plain_estimator() {
        let x = rand_t(vec![16, 4], 3);
        let y = rand_t(vec![16, 5], 4);
        let mut tape = Tape::new();
        let xv = tape.constant(&x);
        let yv = tape.constant(&y);
        let v = cka_unbiased_on_tape(&mut tape, xv, yv).unwrap();
        let plain = cka_unbiased(
            &FeatureMatrix::new(x).unwrap(),
            &FeatureMatrix::new(y).unwrap(),
        )
        .unwrap();
        assert!((tape.value(v).item().unwrap() - plain).abs() < 1e-8);
    }

    #[test]
    fn identical_features_make_the_penalty_vanish() {
        let x = rand_t(vec![12, 4], 5);
        let mut tape = Tape::new();
        let a = tape.constant(&x);
        let b = tape.constant(&x);
        let cka = cka_alignment_loss(&mut tape, &[vec![a, b]], CkaVariant::Unbiased).unwrap();
        let mtl = tape.constant(&Tensor::scalar(0.0));
        let loss = combined_loss(&mut tape, mtl, cka, 0.3).unwrap();
        assert!(tape.value(loss).item().unwrap().abs() < 1e-6);
    }

    #[test]
    fn lone_task_nodes_contribute_no_penalty() {
        let x = rand_t(vec![12, 4], 6);
        let mut tape = Tape::new();
        let a = tape.constant(&x);
        let cka = cka_alignment_loss(&mut tape, &[vec![a]], CkaVariant::Unbiased).unwrap();
        assert_eq!(tape.value(cka).item().unwrap(), 1.0);
    }

    #[test]
    fn three_tasks_at_one_site_average_the_pairs() {
        let feats: Vec<Tensor> = (0..3).map(|i| rand_t(vec![16, 4], 10 + i)).collect();
        let mut tape = Tape::new();
        let vars: Vec<Var> = feats.iter().map(|f| tape.constant(f)).collect();
        let got = cka_alignment_loss(&mut tape, &[vars], CkaVariant::Unbiased).unwrap();
        let got = tape.value(got).item().unwrap();

        let mut want = 0.0;
        for i in 0..3 {
            for j in (i + 1)..3 {
                want += cka_unbiased(
                    &FeatureMatrix::new(feats[i].clone()).unwrap(),
                    &FeatureMatrix::new(feats[j].clone()).unwrap(),
                )
                .unwrap();
            }
        }
        want /= 3.0;
        assert!((got - want).abs() < 1e-8);
    }

    #[test]
    fn combined_loss_arithmetic() {
        let mut tape = Tape::new();
        let mtl = tape.constant(&Tensor::scalar(2.0));
        let cka = tape.constant(&Tensor::scalar(0.5));
        let loss = combined_loss(&mut tape, mtl, cka, 0.2).unwrap();
        assert!((tape.value(loss).item().unwrap() - 2.1).abs() < 1e-12);

        let mut tape = Tape::new();
        let mtl = tape.constant(&Tensor::scalar(2.0));
        let cka = tape.constant(&Tensor::scalar(0.5));
        let loss = combined_loss(&mut tape, mtl, cka, 0.0).unwrap();
        assert_eq!(tape.value(loss).item().unwrap(), 2.0);
    }

    #[test]
    fn alignment_penalty_gradient_matches_finite_differences() {
        // features produced by a weight matrix; differentiate λ(1 − CKA(.))
        let w0 = rand_t(vec![4, 3], 20);
        let x0 = rand_t(vec![12, 3], 21);
        let y0 = rand_t(vec![12, 4], 22);
        let lambda = 0.7;

        let eval = |inputs: &[Tensor]| -> f64 {
            let mut tape = Tape::new();
            let w = tape.param(&inputs[0]);
            let x = tape.constant(&inputs[1]);
            let wt = tape.transpose(w).unwrap();
            let fx = tape.matmul(x, wt).unwrap();
            let fy = tape.constant(&inputs[2]);
            let cka = cka_alignment_loss(&mut tape, &[vec![fx, fy]], CkaVariant::Unbiased).unwrap();
            let mtl = tape.constant(&Tensor::scalar(0.0));
            let loss = combined_loss(&mut tape, mtl, cka, lambda).unwrap();
            tape.value(loss).item().unwrap()
        };
        let inputs = vec![w0.clone(), x0.clone(), y0.clone()];
        let numeric = central_difference(&eval, &inputs, 0, 1e-5);

        let mut tape = Tape::new();
        let w = tape.param(&w0);
        let x = tape.constant(&x0);
        let wt = tape.transpose(w).unwrap();
        let fx = tape.matmul(x, wt).unwrap();
        let fy = tape.constant(&y0);
        let cka = cka_alignment_loss(&mut tape, &[vec![fx, fy]], CkaVariant::Unbiased).unwrap();
        let mtl = tape.constant(&Tensor::scalar(0.0));
        let loss = combined_loss(&mut tape, mtl, cka, lambda).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(max_rel_err(grads.get(w), &numeric) < 1e-3);
    }

    #[test]
    fn combined_gradient_is_linear_in_components() {
        let w0 = rand_t(vec![4, 3], 30);
        let x0 = rand_t(vec![12, 3], 31);
        let y0 = rand_t(vec![12, 4], 32);
        let target = rand_t(vec![12, 4], 33);
        let lambda = 0.4;

        let forward = |tape: &mut Tape| -> (Var, Var, Var) {
            let w = tape.param(&w0);
            let x = tape.constant(&x0);
            let wt = tape.transpose(w).unwrap();
            let fx = tape.matmul(x, wt).unwrap();
            let fy = tape.constant(&y0);
            let tv = tape.constant(&target);
            let diff = tape.sub(fx, tv).unwrap();
            let sq = tape.square(diff);
            let mtl = tape.mean(sq);
            let cka = cka_alignment_loss(tape, &[vec![fx, fy]], CkaVariant::Unbiased).unwrap();
            (w, mtl, cka)
        };

        let mut t_all = Tape::new();
        let (w, mtl, cka) = forward(&mut t_all);
        let loss = combined_loss(&mut t_all, mtl, cka, lambda).unwrap();
        let g_all = t_all.backward(loss).unwrap();

        let mut t_mtl = Tape::new();
        let (w_m, mtl_m, _) = forward(&mut t_mtl);
        let g_mtl = t_mtl.backward(mtl_m).unwrap();

        let mut t_cka = Tape::new();
        let (w_c, _, cka_c) = forward(&mut t_cka);
        let zero = t_cka.constant(&Tensor::scalar(0.0));
        let penalty = combined_loss(&mut t_cka, zero, cka_c, lambda).unwrap();
        let g_pen = t_cka.backward(penalty).unwrap();

        for k in 0..w0.numel() {
            let sum = g_mtl.get(w_m).data()[k] + g_pen.get(w_c).data()[k];
            assert!((g_all.get(w).data()[k] - sum).abs() < 1e-12);
        }
    }

    #[test]
    fn alignment_loss_is_symmetric_in_task_order() {
        let feats: Vec<Tensor> = (0..3).map(|i| rand_t(vec![16, 4], 40 + i)).collect();
        let value = |order: [usize; 3]| -> f64 {
            let mut tape = Tape::new();
            let vars: Vec<Var> = order.iter().map(|&i| tape.constant(&feats[i])).collect();
            let v = cka_alignment_loss(&mut tape, &[vars], CkaVariant::Unbiased).unwrap();
            tape.value(v).item().unwrap()
        };
        let a = value([0, 1, 2]);
        let b = value([2, 0, 1]);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn amalgamation_zero_when_teachers_match_and_attention_saturates() {
        let f = rand_t(vec![6, 3], 50);
        let mut net = AttNet::new(3, 1e-3, &mut ChaCha8Rng::seed_from_u64(51));
        // saturate the sigmoid: output ≈ 1 − 4e-18
        for x in net.w2.data_mut() {
            *x = 0.0;
        }
        for x in net.b2.data_mut() {
            *x = 40.0;
        }
        let mut tape = Tape::new();
        let g = tape.constant(&f);
        let (_, att) = net.forward_on_tape(&mut tape, g).unwrap();
        let loss = amalgamation_loss(&mut tape, &[f.clone(), f.clone()], &[att, att], g).unwrap();
        assert!(tape.value(loss).item().unwrap() < 1e-12);
    }

    #[test]
    fn amalgamation_with_zero_group_feature_ignores_attention() {
        let f1 = rand_t(vec![4, 3], 60);
        let f2 = rand_t(vec![4, 3], 61);
        let zero = Tensor::zeros(vec![4, 3]);
        let net = AttNet::new(3, 1e-3, &mut ChaCha8Rng::seed_from_u64(62));
        let mut tape = Tape::new();
        let g = tape.constant(&zero);
        let (_, att) = net.forward_on_tape(&mut tape, g).unwrap();
        let loss = amalgamation_loss(&mut tape, &[f1.clone(), f2.clone()], &[att, att], g).unwrap();
        let want = (f1.square().mean().item().unwrap() + f2.square().mean().item().unwrap()) / 2.0;
        assert!((tape.value(loss).item().unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn amalgamation_matches_explicit_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let members: Vec<Tensor> = (0..2)
            .map(|_| Tensor::rand_uniform(vec![4, 3], -1.0, 1.0, &mut rng))
            .collect();
        let group = Tensor::rand_uniform(vec![4, 3], -1.0, 1.0, &mut rng);
        let nets: Vec<AttNet> = (0..2).map(|_| AttNet::new(3, 1e-3, &mut rng)).collect();

        let mut tape = Tape::new();
        let g = tape.constant(&group);
        let mut atts = Vec::new();
        for net in &nets {
            let (_, att) = net.forward_on_tape(&mut tape, g).unwrap();
            atts.push(att);
        }
        let loss = amalgamation_loss(&mut tape, &members, &atts, g).unwrap();
        let got = tape.value(loss).item().unwrap();

        // explicit-loop oracle over the amalgamation objective
        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut want = 0.0;
        for (mi, net) in nets.iter().enumerate() {
            let mut member_sum = 0.0;
            for s in 0..4 {
                // hidden = relu(W1·g + b1), att = sigmoid(W2·hidden + b2)
                let mut hidden = [0.0; 3];
                for h in 0..3 {
                    let mut acc = net.b1.data()[h];
                    for c in 0..3 {
                        acc += net.w1.at2(h, c) * group.at2(s, c);
                    }
                    hidden[h] = acc.max(0.0);
                }
                for c in 0..3 {
                    let mut acc = net.b2.data()[c];
                    for h in 0..3 {
                        acc += net.w2.at2(c, h) * hidden[h];
                    }
                    let att = sigmoid(acc);
                    let gap = members[mi].at2(s, c) - att * group.at2(s, c);
                    member_sum += gap * gap;
                }
            }
            want += member_sum / 12.0;
        }
        want /= 2.0;
        assert!((got - want).abs() < 1e-12, "got {got}, want {want}");
    }

    #[test]
    fn amalgamation_loss_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        for _ in 0..10 {
            let members: Vec<Tensor> = (0..3)
                .map(|_| Tensor::rand_uniform(vec![5, 4], -2.0, 2.0, &mut rng))
                .collect();
            let group = Tensor::rand_uniform(vec![5, 4], -2.0, 2.0, &mut rng);
            let net = AttNet::new(4, 1e-3, &mut rng);
            let mut tape = Tape::new();
            let g = tape.constant(&group);
            let (_, att) = net.forward_on_tape(&mut tape, g).unwrap();
            let loss = amalgamation_loss(&mut tape, &members, &[att, att, att], g).unwrap();
            assert!(tape.value(loss).item().unwrap() >= 0.0);
        }
    }

    #[test]
    fn teachers_receive_no_gradient() {
        // member features produced upstream by a parameterized layer; the
        // amalgamation loss must not flow back into that producer
        let wt = rand_t(vec![3, 3], 90);
        let x = rand_t(vec![4, 3], 91);
        let group = rand_t(vec![4, 3], 92);
        let net = AttNet::new(3, 1e-3, &mut ChaCha8Rng::seed_from_u64(93));

        let mut tape = Tape::new();
        let teacher_param = tape.param(&wt);
        let xin = tape.constant(&x);
        let produced = tape.matmul(xin, teacher_param).unwrap();
        // detach: hand the VALUE to the loss, not the var
        let teacher_value = tape.value(produced).clone();

        let g = tape.constant(&group);
        let (att_vars, att) = net.forward_on_tape(&mut tape, g).unwrap();
        let loss = amalgamation_loss(&mut tape, &[teacher_value], &[att], g).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(teacher_param).data().iter().all(|&v| v == 0.0));
        // while the attention net does get gradient
        assert!(grads.get(att_vars.w2).data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn mismatched_channels_are_a_shape_error() {
        let f = rand_t(vec![4, 3], 95);
        let g_t = rand_t(vec![4, 2], 96);
        let net = AttNet::new(2, 1e-3, &mut ChaCha8Rng::seed_from_u64(97));
        let mut tape = Tape::new();
        let g = tape.constant(&g_t);
        let (_, att) = net.forward_on_tape(&mut tape, g).unwrap();
        assert!(matches!(
            amalgamation_loss(&mut tape, &[f], &[att], g),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn eval_metric_accuracy_counts_argmax_hits() {
        let out = Tensor::from_rows(&[vec![2.0, 1.0], vec![0.0, 3.0], vec![5.0, 4.0]]).unwrap();
        let tgt = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let acc = eval_metric(LossKind::SoftmaxCrossEntropy, &out, &tgt).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
    }
}
