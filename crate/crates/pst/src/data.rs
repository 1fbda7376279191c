//! Synthetic tasks sized for a desk: planted-sparse-teacher regression,
//! its rank-shifted variant, and a toy sequence classification problem.
//!
//! Generators are pure functions of their parameters and seed; every
//! random draw comes from a named component stream. Samples are columns,
//! and sequence inputs are flattened to example-major column blocks of
//! seq_len columns each. The train/test split is by sample, disjoint,
//! test taking the trailing fifth.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seeding::component_rng;
use crate::tensor::Tensor2D;

/// Supervision attached to a batch of columns.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Regression targets, out_dim x samples.
    Values(Tensor2D),
    /// One class index per example.
    Labels(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Values(t) => t.cols(),
            Targets::Labels(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Planted,
    RankShift,
    SeqClassify,
}

pub struct SyntheticTask {
    pub kind: TaskKind,
    pub train_x: Tensor2D,
    pub train_y: Targets,
    pub test_x: Tensor2D,
    pub test_y: Targets,
    /// The generating weight matrix, regression tasks only.
    pub teacher: Option<Tensor2D>,
    /// Columns per example; 1 for regression.
    pub seq_len: usize,
    /// Class count; 0 for regression.
    pub classes: usize,
}

impl SyntheticTask {
    pub fn input_dim(&self) -> usize {
        self.train_x.rows()
    }

    /// Model output dimension this task demands.
    pub fn output_dim(&self) -> usize {
        match &self.train_y {
            Targets::Values(t) => t.rows(),
            Targets::Labels(_) => self.classes,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self.train_y, Targets::Labels(_))
    }

    pub fn train_examples(&self) -> usize {
        self.train_y.len()
    }

    pub fn test_examples(&self) -> usize {
        self.test_y.len()
    }

    /// Assemble a training batch from example indices, preserving order.
    pub fn train_batch(&self, indices: &[usize]) -> Result<(Tensor2D, Targets)> {
        gather(&self.train_x, &self.train_y, self.seq_len, indices)
    }

    pub fn test_batch(&self, indices: &[usize]) -> Result<(Tensor2D, Targets)> {
        gather(&self.test_x, &self.test_y, self.seq_len, indices)
    }
}

fn gather(
    x: &Tensor2D,
    y: &Targets,
    seq_len: usize,
    indices: &[usize],
) -> Result<(Tensor2D, Targets)> {
    if indices.is_empty() {
        return Err(Error::contract("batch needs at least one example"));
    }
    let examples = y.len();
    let mut x_parts = Vec::with_capacity(indices.len());
    for &i in indices {
        if i >= examples {
            return Err(Error::Index { what: "example index", index: i, bound: examples });
        }
        x_parts.push(x.slice_cols(i * seq_len, seq_len)?);
    }
    let refs: Vec<&Tensor2D> = x_parts.iter().collect();
    let bx = Tensor2D::concat_cols(&refs)?;
    let by = match y {
        Targets::Values(t) => {
            let cols: Vec<Tensor2D> = indices
                .iter()
                .map(|&i| t.slice_cols(i, 1))
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor2D> = cols.iter().collect();
            Targets::Values(Tensor2D::concat_cols(&refs)?)
        }
        Targets::Labels(l) => Targets::Labels(indices.iter().map(|&i| l[i]).collect()),
    };
    Ok((bx, by))
}

/// Trailing fifth of the samples is the test split.
fn split_sizes(samples: usize) -> (usize, usize) {
    let test = samples / 5;
    (samples - test, test)
}

fn check_regression_args(samples: usize, sparsity: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::contract("teacher sparsity must lie in [0, 1]"));
    }
    if samples < 5 {
        return Err(Error::contract("need at least 5 samples for an 80/20 split"));
    }
    Ok(())
}

/// Dense Gaussian teacher with an exact count of randomly chosen entries
/// zeroed. A student that recovers the support reaches noise-floor MSE.
fn make_teacher(n: usize, k: usize, sparsity: f64, seed: u64) -> Tensor2D {
    let mut rng = component_rng(seed, "task.teacher");
    let mut teacher = Tensor2D::gaussian(n, k, 1.0 / (k as f64).sqrt(), &mut rng);
    let total = n * k;
    let zeros = (sparsity * total as f64).round() as usize;
    let mut order: Vec<usize> = (0..total).collect();
    let mut support_rng = component_rng(seed, "task.support");
    order.shuffle(&mut support_rng);
    for &idx in order.iter().take(zeros) {
        teacher.data_mut()[idx] = 0.0;
    }
    teacher
}

fn regression_task(
    kind: TaskKind,
    teacher: Tensor2D,
    samples: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<SyntheticTask> {
    let k = teacher.cols();
    let n = teacher.rows();
    let mut input_rng = component_rng(seed, "task.inputs");
    let x = Tensor2D::gaussian(k, samples, 1.0, &mut input_rng);
    let mut y = teacher.matmul(&x)?;
    if noise_sigma > 0.0 {
        let mut noise_rng = component_rng(seed, "task.noise");
        let noise = Tensor2D::gaussian(n, samples, noise_sigma, &mut noise_rng);
        y = y.add(&noise)?;
    }
    let (train_m, test_m) = split_sizes(samples);
    Ok(SyntheticTask {
        kind,
        train_x: x.slice_cols(0, train_m)?,
        train_y: Targets::Values(y.slice_cols(0, train_m)?),
        test_x: x.slice_cols(train_m, test_m)?,
        test_y: Targets::Values(y.slice_cols(train_m, test_m)?),
        teacher: Some(teacher),
        seq_len: 1,
        classes: 0,
    })
}

pub fn gen_planted_teacher(
    n: usize,
    k: usize,
    samples: usize,
    sparsity: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<SyntheticTask> {
    check_regression_args(samples, sparsity)?;
    let teacher = make_teacher(n, k, sparsity, seed);
    regression_task(TaskKind::Planted, teacher, samples, noise_sigma, seed)
}

/// Planted teacher plus a dense rank-2 shift. The shift rewards update
/// directions a hard support mask alone cannot express.
pub fn gen_rank_shift(
    n: usize,
    k: usize,
    samples: usize,
    sparsity: f64,
    noise_sigma: f64,
    shift_scale: f64,
    seed: u64,
) -> Result<SyntheticTask> {
    check_regression_args(samples, sparsity)?;
    let mut teacher = make_teacher(n, k, sparsity, seed);
    let mut shift_rng = component_rng(seed, "task.shift");
    let left = Tensor2D::gaussian(n, 2, 1.0, &mut shift_rng);
    let right = Tensor2D::gaussian(2, k, 1.0 / (k as f64).sqrt(), &mut shift_rng);
    teacher = teacher.add(&left.matmul(&right)?.scale(shift_scale))?;
    regression_task(TaskKind::RankShift, teacher, samples, noise_sigma, seed)
}

/// Each example is seq_len background columns with one class prototype
/// added at a random position; the label is the prototype's class.
pub fn gen_seq_classify(
    d: usize,
    seq_len: usize,
    classes: usize,
    samples: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<SyntheticTask> {
    if classes < 2 {
        return Err(Error::contract("classification needs at least 2 classes"));
    }
    if seq_len == 0 {
        return Err(Error::contract("seq_len must be positive"));
    }
    if samples < 5 {
        return Err(Error::contract("need at least 5 samples for an 80/20 split"));
    }
    let mut proto_rng = component_rng(seed, "task.prototypes");
    let prototypes = Tensor2D::gaussian(d, classes, 1.0, &mut proto_rng);

    let mut label_rng = component_rng(seed, "task.labels");
    let mut position_rng = component_rng(seed, "task.positions");
    let mut noise_rng = component_rng(seed, "task.noise");

    let mut x = if noise_sigma > 0.0 {
        Tensor2D::gaussian(d, samples * seq_len, noise_sigma, &mut noise_rng)
    } else {
        Tensor2D::zeros(d, samples * seq_len)
    };
    let mut labels = Vec::with_capacity(samples);
    for e in 0..samples {
        let class = label_rng.gen_range(0..classes);
        let pos = position_rng.gen_range(0..seq_len);
        labels.push(class);
        let col = e * seq_len + pos;
        for row in 0..d {
            let v = x.get(row, col) + prototypes.get(row, class);
            x.set(row, col, v);
        }
    }

    let (train_m, test_m) = split_sizes(samples);
    Ok(SyntheticTask {
        kind: TaskKind::SeqClassify,
        train_x: x.slice_cols(0, train_m * seq_len)?,
        train_y: Targets::Labels(labels[..train_m].to_vec()),
        test_x: x.slice_cols(train_m * seq_len, test_m * seq_len)?,
        test_y: Targets::Labels(labels[train_m..].to_vec()),
        teacher: None,
        seq_len,
        classes,
    })
}

/// One CSV row per example: flattened feature columns first, then target
/// columns (or a single `label` column). Values print in Rust's shortest
/// round-trip form, so import recovers the exact bits.
pub fn export_csv(path: &Path, x: &Tensor2D, y: &Targets, seq_len: usize) -> Result<()> {
    let examples = y.len();
    if x.cols() != examples * seq_len {
        return Err(Error::contract(format!(
            "x has {} columns, expected {} examples x seq_len {}",
            x.cols(),
            examples,
            seq_len
        )));
    }
    let d = x.rows();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);

    let mut header: Vec<String> = (0..d * seq_len).map(|i| format!("f{i}")).collect();
    match y {
        Targets::Values(t) => header.extend((0..t.rows()).map(|i| format!("t{i}"))),
        Targets::Labels(_) => header.push("label".to_string()),
    }
    writeln!(out, "{}", header.join(","))?;

    for e in 0..examples {
        let mut fields = Vec::with_capacity(d * seq_len + 1);
        // Feature order: position-major, matching column flattening.
        for s in 0..seq_len {
            for row in 0..d {
                fields.push(x.get(row, e * seq_len + s).to_string());
            }
        }
        match y {
            Targets::Values(t) => {
                for row in 0..t.rows() {
                    fields.push(t.get(row, e).to_string());
                }
            }
            Targets::Labels(l) => fields.push(l[e].to_string()),
        }
        writeln!(out, "{}", fields.join(","))?;
    }
    Ok(())
}

/// Inverse of `export_csv`; `seq_len` recovers the column blocking.
pub fn import_csv(path: &Path, seq_len: usize) -> Result<(Tensor2D, Targets)> {
    if seq_len == 0 {
        return Err(Error::contract("seq_len must be positive"));
    }
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::contract("csv is empty"))??;
    let names: Vec<&str> = header.split(',').collect();
    let feature_cols = names.iter().filter(|n| n.starts_with('f')).count();
    let labeled = names.last() == Some(&"label");
    let target_cols = names.len() - feature_cols;
    if feature_cols == 0 || feature_cols % seq_len != 0 {
        return Err(Error::contract(format!(
            "{feature_cols} feature columns do not divide into seq_len {seq_len}"
        )));
    }
    let d = feature_cols / seq_len;

    let mut x_data: Vec<f64> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut examples = 0usize;
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != names.len() {
            return Err(Error::contract(format!(
                "row {} has {} fields, header has {}",
                examples + 1,
                fields.len(),
                names.len()
            )));
        }
        for f in &fields[..feature_cols] {
            x_data.push(
                f.parse::<f64>()
                    .map_err(|_| Error::contract(format!("bad float {f:?} in csv")))?,
            );
        }
        if labeled {
            labels.push(
                fields[feature_cols]
                    .parse::<usize>()
                    .map_err(|_| Error::contract("bad label in csv"))?,
            );
        } else {
            for f in &fields[feature_cols..] {
                values.push(
                    f.parse::<f64>()
                        .map_err(|_| Error::contract(format!("bad float {f:?} in csv")))?,
                );
            }
        }
        examples += 1;
    }
    if examples == 0 {
        return Err(Error::contract("csv has a header but no rows"));
    }

    // Rows arrived example-major; transpose into column-major samples.
    let mut x = Tensor2D::zeros(d, examples * seq_len);
    for e in 0..examples {
        for s in 0..seq_len {
            for row in 0..d {
                let v = x_data[e * feature_cols + s * d + row];
                x.set(row, e * seq_len + s, v);
            }
        }
    }
    let y = if labeled {
        Targets::Labels(labels)
    } else {
        let out_dim = target_cols;
        let mut t = Tensor2D::zeros(out_dim, examples);
        for e in 0..examples {
            for row in 0..out_dim {
                t.set(row, e, values[e * out_dim + row]);
            }
        }
        Targets::Values(t)
    };
    Ok((x, y))
}
