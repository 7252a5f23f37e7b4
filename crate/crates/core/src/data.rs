//! Synthetic multi-task datasets and CSV persistence.
//!
//! Samples draw a latent vector split into blocks; each task's target is a
//! function of the blocks it is wired to. Tasks wired to the same block
//! share a base mapping (with a small per-task perturbation), so their
//! targets are mutually predictable, while tasks on disjoint blocks stay
//! statistically independent.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// How a task's target is derived from its latent blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// `y = A z_b + σ ε`
    LinearOfLatent,
    /// `y = tanh(2 A z_b) + σ ε`
    NonlinearOfLatent,
    /// `y = σ ε` — pure noise, unrelated to the input.
    IndependentNoiseLatent,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub name: String,
    pub kind: TargetKind,
    pub output_dim: usize,
    pub noise_sigma: f64,
    /// Latent block indices this task draws from (its sharing-matrix row).
    pub blocks: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub latent_dim: usize,
    /// Latent index sets forming the blocks.
    pub blocks: Vec<Vec<usize>>,
    pub tasks: Vec<SyntheticTask>,
    /// Scale of the per-task perturbation of a block's base map. 0 makes
    /// same-block task maps identical.
    #[serde(default = "default_map_diversity")]
    pub map_diversity: f64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

fn default_map_diversity() -> f64 {
    0.3
}

fn default_val_fraction() -> f64 {
    0.2
}

impl SyntheticTaskSpec {
    /// Convenience layout: the listed tasks share block 0, every other task
    /// gets its own block, each block `block_width` latents wide.
    pub fn with_shared_block(
        n_tasks: usize,
        shared: &[usize],
        block_width: usize,
        noise_sigma: f64,
    ) -> Result<Self> {
        if shared.iter().any(|&t| t >= n_tasks) {
            return Err(Error::config("shared task index out of range"));
        }
        let lone: Vec<usize> = (0..n_tasks).filter(|t| !shared.contains(t)).collect();
        let n_blocks = if shared.is_empty() { 0 } else { 1 } + lone.len();
        let blocks: Vec<Vec<usize>> = (0..n_blocks)
            .map(|b| (b * block_width..(b + 1) * block_width).collect())
            .collect();
        let mut tasks: Vec<SyntheticTask> = Vec::with_capacity(n_tasks);
        let mut lone_block = if shared.is_empty() { 0 } else { 1 };
        for t in 0..n_tasks {
            let (kind, task_blocks) = if shared.contains(&t) {
                (TargetKind::LinearOfLatent, vec![0])
            } else {
                let b = lone_block;
                lone_block += 1;
                (TargetKind::NonlinearOfLatent, vec![b])
            };
            tasks.push(SyntheticTask {
                name: format!("task{t}"),
                kind,
                output_dim: 1,
                noise_sigma,
                blocks: task_blocks,
            });
        }
        let spec = SyntheticTaskSpec {
            latent_dim: n_blocks * block_width,
            blocks,
            tasks,
            map_diversity: default_map_diversity(),
            val_fraction: default_val_fraction(),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim must be positive"));
        }
        if self.tasks.is_empty() {
            return Err(Error::config("synthetic spec needs at least one task"));
        }
        for (b, block) in self.blocks.iter().enumerate() {
            if block.is_empty() {
                return Err(Error::config(format!("latent block {b} is empty")));
            }
            if block.iter().any(|&i| i >= self.latent_dim) {
                return Err(Error::config(format!(
                    "latent block {b} indexes beyond latent_dim"
                )));
            }
        }
        for task in &self.tasks {
            if task.blocks.is_empty() {
                return Err(Error::config(format!(
                    "task {:?} draws from no latent block",
                    task.name
                )));
            }
            if task.blocks.iter().any(|&b| b >= self.blocks.len()) {
                return Err(Error::config(format!(
                    "task {:?} names a nonexistent block",
                    task.name
                )));
            }
            if task.output_dim == 0 {
                return Err(Error::config("task output_dim must be positive"));
            }
            if task.noise_sigma.is_nan() || task.noise_sigma < 0.0 {
                return Err(Error::config("noise σ must be ≥ 0"));
            }
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config("val_fraction must be in (0, 1)"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.latent_dim
    }
}

/// One split: inputs plus per-task target matrices with matched rows.
#[derive(Debug, Clone)]
pub struct Split {
    pub inputs: Tensor,
    pub targets: Vec<Tensor>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gathers the given rows into a batch.
    pub fn gather(&self, rows: &[usize]) -> (Tensor, Vec<Tensor>) {
        let d = self.inputs.shape()[1];
        let mut x = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            x.extend_from_slice(&self.inputs.data()[r * d..(r + 1) * d]);
        }
        let inputs = Tensor::new(vec![rows.len(), d], x).expect("gather shape");
        let targets = self
            .targets
            .iter()
            .map(|t| {
                let c = t.shape()[1];
                let mut y = Vec::with_capacity(rows.len() * c);
                for &r in rows {
                    y.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
                }
                Tensor::new(vec![rows.len(), c], y).expect("gather shape")
            })
            .collect();
        (inputs, targets)
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub task_names: Vec<String>,
    pub input_dim: usize,
    pub train: Split,
    pub val: Split,
}

/// Sidecar metadata persisted next to the CSV files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub spec: SyntheticTaskSpec,
    pub n_samples: usize,
    pub split: SplitSizes,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
}

/// The smallest sample count `generate` accepts: two default-sized training
/// batches.
pub const MIN_SAMPLES: usize = 32;

/// Deterministically generates a dataset from a task spec. Same seed, same
/// bytes.
pub fn generate(spec: &SyntheticTaskSpec, n_samples: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n_samples < MIN_SAMPLES {
        return Err(Error::config(format!(
            "n_samples must be at least {MIN_SAMPLES} (two training batches), got {n_samples}"
        )));
    }
    let mut latent_rng = ChaCha8Rng::seed_from_u64(seed);
    latent_rng.set_stream(1);
    let mut map_rng = ChaCha8Rng::seed_from_u64(seed);
    map_rng.set_stream(2);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(3);

    let d = spec.latent_dim;
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    // latent matrix, row major
    let mut z = vec![0.0; n_samples * d];
    for v in z.iter_mut() {
        *v = normal(&mut latent_rng);
    }

    // per-block base maps at the widest output this run needs
    let max_out = spec.tasks.iter().map(|t| t.output_dim).max().unwrap();
    let base_maps: Vec<Vec<f64>> = spec
        .blocks
        .iter()
        .map(|block| {
            (0..max_out * block.len())
                .map(|_| normal(&mut map_rng))
                .collect()
        })
        .collect();

    // per-task maps: concatenated base maps plus a per-task perturbation
    let mut task_maps = Vec::with_capacity(spec.tasks.len());
    for task in &spec.tasks {
        let width: usize = task.blocks.iter().map(|&b| spec.blocks[b].len()).sum();
        let mut map = vec![0.0; task.output_dim * width];
        let mut col = 0;
        for &b in &task.blocks {
            let bw = spec.blocks[b].len();
            for o in 0..task.output_dim {
                for k in 0..bw {
                    map[o * width + col + k] = base_maps[b][o * bw + k];
                }
            }
            col += bw;
        }
        for v in map.iter_mut() {
            *v += spec.map_diversity * normal(&mut map_rng);
        }
        task_maps.push(map);
    }

    // targets
    let mut targets = Vec::with_capacity(spec.tasks.len());
    for (t, task) in spec.tasks.iter().enumerate() {
        let cols: Vec<usize> = task
            .blocks
            .iter()
            .flat_map(|&b| spec.blocks[b].iter().copied())
            .collect();
        let width = cols.len();
        let out = task.output_dim;
        let map = &task_maps[t];
        let mut y = vec![0.0; n_samples * out];
        for s in 0..n_samples {
            for o in 0..out {
                let v = match task.kind {
                    TargetKind::IndependentNoiseLatent => 0.0,
                    _ => {
                        let mut acc = 0.0;
                        for (k, &ci) in cols.iter().enumerate() {
                            acc += map[o * width + k] * z[s * d + ci];
                        }
                        match task.kind {
                            TargetKind::LinearOfLatent => acc,
                            TargetKind::NonlinearOfLatent => (2.0 * acc).tanh(),
                            TargetKind::IndependentNoiseLatent => unreachable!(),
                        }
                    }
                };
                y[s * out + o] = v + task.noise_sigma * normal(&mut noise_rng);
            }
        }
        targets.push(y);
    }

    // split: leading rows train, trailing rows validation
    let n_val = (((n_samples as f64) * spec.val_fraction).round() as usize).clamp(1, n_samples - 1);
    let n_train = n_samples - n_val;
    let take = |data: &[f64], cols: usize, lo: usize, hi: usize| -> Tensor {
        Tensor::new(vec![hi - lo, cols], data[lo * cols..hi * cols].to_vec()).expect("split shape")
    };
    let train = Split {
        inputs: take(&z, d, 0, n_train),
        targets: spec
            .tasks
            .iter()
            .enumerate()
            .map(|(t, task)| take(&targets[t], task.output_dim, 0, n_train))
            .collect(),
    };
    let val = Split {
        inputs: take(&z, d, n_train, n_samples),
        targets: spec
            .tasks
            .iter()
            .enumerate()
            .map(|(t, task)| take(&targets[t], task.output_dim, n_train, n_samples))
            .collect(),
    };
    Ok(Dataset {
        task_names: spec.tasks.iter().map(|t| t.name.clone()).collect(),
        input_dim: d,
        train,
        val,
    })
}

/// Writes one split as CSV: header `input_0..`, `task{t}_target_{j}..`,
/// then one row per sample with shortest-round-trip decimals.
pub fn save_csv(split: &Split, w: &mut impl Write) -> Result<()> {
    let d = split.inputs.shape()[1];
    let mut header: Vec<String> = (0..d).map(|i| format!("input_{i}")).collect();
    for (t, target) in split.targets.iter().enumerate() {
        for j in 0..target.shape()[1] {
            header.push(format!("task{t}_target_{j}"));
        }
    }
    writeln!(w, "{}", header.join(","))?;
    for r in 0..split.len() {
        let mut fields: Vec<String> = Vec::with_capacity(header.len());
        for i in 0..d {
            fields.push(split.inputs.at2(r, i).to_string());
        }
        for target in &split.targets {
            for j in 0..target.shape()[1] {
                fields.push(target.at2(r, j).to_string());
            }
        }
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}

/// Reads one split back from CSV, validating the header layout.
pub fn load_csv(r: impl BufRead) -> Result<Split> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse("line 1", "empty dataset CSV"))??;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();

    let mut input_dim = 0;
    let mut idx = 0;
    while idx < cols.len() && cols[idx] == format!("input_{idx}") {
        input_dim += 1;
        idx += 1;
    }
    if input_dim == 0 {
        return Err(Error::parse("line 1", "header must start with input_0"));
    }
    let mut task_dims: Vec<usize> = Vec::new();
    while idx < cols.len() {
        let t = task_dims.len();
        let mut j = 0;
        while idx < cols.len() && cols[idx] == format!("task{t}_target_{j}") {
            j += 1;
            idx += 1;
        }
        if j == 0 {
            return Err(Error::parse(
                "line 1",
                format!("expected column task{t}_target_0, found {:?}", cols[idx]),
            ));
        }
        task_dims.push(j);
    }
    if task_dims.is_empty() {
        return Err(Error::parse("line 1", "expected column task0_target_0"));
    }

    let total = input_dim + task_dims.iter().sum::<usize>();
    let mut inputs = Vec::new();
    let mut targets: Vec<Vec<f64>> = vec![Vec::new(); task_dims.len()];
    let mut rows = 0;
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != total {
            return Err(Error::parse(
                format!("line {}", lineno + 2),
                format!("expected {total} fields, got {}", fields.len()),
            ));
        }
        let parse = |s: &str| -> Result<f64> {
            s.trim().parse().map_err(|e| {
                Error::parse(
                    format!("line {}", lineno + 2),
                    format!("bad number {s:?}: {e}"),
                )
            })
        };
        for f in &fields[..input_dim] {
            inputs.push(parse(f)?);
        }
        let mut off = input_dim;
        for (t, &dim) in task_dims.iter().enumerate() {
            for f in &fields[off..off + dim] {
                targets[t].push(parse(f)?);
            }
            off += dim;
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::parse("line 2", "dataset CSV has no data rows"));
    }
    Ok(Split {
        inputs: Tensor::new(vec![rows, input_dim], inputs)?,
        targets: task_dims
            .iter()
            .zip(targets)
            .map(|(&dim, data)| Tensor::new(vec![rows, dim], data).expect("column counts"))
            .collect(),
    })
}

/// Persists a generated dataset as `train.csv`, `val.csv`, and a JSON
/// metadata sidecar in `dir`.
pub fn save_dataset(ds: &Dataset, meta: &DatasetMeta, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut train = std::fs::File::create(dir.join("train.csv"))?;
    save_csv(&ds.train, &mut train)?;
    let mut val = std::fs::File::create(dir.join("val.csv"))?;
    save_csv(&ds.val, &mut val)?;
    let json = serde_json::to_string_pretty(meta).map_err(|e| Error::contract(e.to_string()))?;
    std::fs::write(dir.join("dataset.json"), json + "\n")?;
    Ok(())
}

/// Loads a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta_path = dir.join("dataset.json");
    let meta: DatasetMeta = serde_json::from_str(
        &std::fs::read_to_string(&meta_path)
            .map_err(|e| Error::parse(meta_path.display().to_string(), e.to_string()))?,
    )
    .map_err(|e| {
        Error::parse(
            format!("{} line {}", meta_path.display(), e.line()),
            e.to_string(),
        )
    })?;
    let train = load_csv(std::io::BufReader::new(std::fs::File::open(
        dir.join("train.csv"),
    )?))?;
    let val = load_csv(std::io::BufReader::new(std::fs::File::open(
        dir.join("val.csv"),
    )?))?;
    if train.targets.len() != meta.spec.tasks.len() {
        return Err(Error::parse(
            "train.csv",
            "task count disagrees with the dataset sidecar",
        ));
    }
    Ok(Dataset {
        task_names: meta.spec.tasks.iter().map(|t| t.name.clone()).collect(),
        input_dim: train.inputs.shape()[1],
        train,
        val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_task_spec(sigma: f64) -> SyntheticTaskSpec {
        SyntheticTaskSpec::with_shared_block(3, &[0, 1], 4, sigma).unwrap()
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut va = 0.0;
        let mut vb = 0.0;
        for (x, y) in a.iter().zip(b) {
            cov += (x - ma) * (y - mb);
            va += (x - ma) * (x - ma);
            vb += (y - mb) * (y - mb);
        }
        cov / (va.sqrt() * vb.sqrt())
    }

    #[test]
    fn identical_maps_and_no_noise_give_identical_targets() {
        let mut spec = three_task_spec(0.0);
        spec.map_diversity = 0.0;
        // make both shared tasks linear so the maps coincide exactly
        spec.tasks[1].kind = TargetKind::LinearOfLatent;
        let ds = generate(&spec, 64, 5).unwrap();
        assert_eq!(ds.train.targets[0].data(), ds.train.targets[1].data());
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = three_task_spec(0.1);
        let a = generate(&spec, 64, 9).unwrap();
        let b = generate(&spec, 64, 9).unwrap();
        assert_eq!(a.train.inputs.data(), b.train.inputs.data());
        for t in 0..3 {
            assert_eq!(a.train.targets[t].data(), b.train.targets[t].data());
            assert_eq!(a.val.targets[t].data(), b.val.targets[t].data());
        }
    }

    #[test]
    fn shared_block_targets_correlate_but_independent_do_not() {
        let spec = three_task_spec(0.05);
        let mut rho_ab = Vec::new();
        let mut rho_ac = Vec::new();
        for seed in 0..10 {
            let ds = generate(&spec, 2000, 100 + seed).unwrap();
            let all = |t: usize| -> Vec<f64> {
                ds.train.targets[t]
                    .data()
                    .iter()
                    .chain(ds.val.targets[t].data())
                    .copied()
                    .collect()
            };
            let (ya, yb, yc) = (all(0), all(1), all(2));
            rho_ab.push(pearson(&ya, &yb).abs());
            rho_ac.push(pearson(&ya, &yc).abs());
        }
        rho_ab.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rho_ac.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!(rho_ab[5] > 0.5, "median |ρ(y_A,y_B)| = {}", rho_ab[5]);
        assert!(rho_ac[5] < 0.15, "median |ρ(y_A,y_C)| = {}", rho_ac[5]);
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let spec = three_task_spec(0.1);
        let ds = generate(&spec, 64, 11).unwrap();
        let mut buf = Vec::new();
        save_csv(&ds.train, &mut buf).unwrap();
        let back = load_csv(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(back.inputs.data(), ds.train.inputs.data());
        for t in 0..3 {
            assert_eq!(back.targets[t].data(), ds.train.targets[t].data());
        }
    }

    #[test]
    fn generated_csv_has_header_plus_data_rows() {
        let spec = three_task_spec(0.1);
        let ds = generate(&spec, 125, 3).unwrap();
        let mut buf = Vec::new();
        save_csv(&ds.train, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 101);
    }

    #[test]
    fn missing_target_column_is_named() {
        let csv = "input_0,input_1,task0_target_0,task1_wrong\n1,2,3,4\n";
        match load_csv(std::io::Cursor::new(csv)) {
            Err(Error::Parse { message, .. }) => {
                assert!(message.contains("task1_target_0"), "message: {message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_row_reports_line_number() {
        let csv = "input_0,task0_target_0\n1,2\nbad,3\n";
        match load_csv(std::io::Cursor::new(csv)) {
            Err(Error::Parse { location, .. }) => assert_eq!(location, "line 3"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn too_few_samples_rejected() {
        let spec = three_task_spec(0.1);
        assert!(matches!(generate(&spec, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_directory_round_trip() {
        let spec = three_task_spec(0.1);
        let ds = generate(&spec, 64, 21).unwrap();
        let dir = std::env::temp_dir().join(format!("mtsl_data_test_{}", std::process::id()));
        let meta = DatasetMeta {
            seed: 21,
            spec: spec.clone(),
            n_samples: 64,
            split: SplitSizes {
                train: ds.train.len(),
                val: ds.val.len(),
            },
        };
        save_dataset(&ds, &meta, &dir).unwrap();
        let back = load_dataset(&dir).unwrap();
        assert_eq!(back.train.inputs.data(), ds.train.inputs.data());
        assert_eq!(back.task_names, ds.task_names);
        std::fs::remove_dir_all(&dir).ok();
    }
}
