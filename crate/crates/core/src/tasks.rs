//! Synthetic class-incremental streams: every class is a unit-covariance
//! Gaussian around a seeded mean, and tasks own disjoint, contiguous blocks
//! of class ids.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::backbone::FrozenBackbone;
use crate::error::{HamError, Result};
use crate::rng::{streams, RngState};
use crate::tensor::{norm, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub task_id: usize,
    pub class_ids: Vec<usize>,
    pub train_x: Matrix,
    pub train_y: Vec<usize>,
    pub test_x: Matrix,
    pub test_y: Vec<usize>,
}

impl TaskDataset {
    pub fn train_len(&self) -> usize {
        self.train_y.len()
    }

    pub fn test_len(&self) -> usize {
        self.test_y.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamStructure {
    /// Class means of task `t` lean towards super-cluster `t mod n`.
    Clustered,
    /// Independent random mean directions.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSpec {
    pub num_tasks: usize,
    pub classes_per_task: usize,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
    pub structure: StreamStructure,
    pub super_clusters: usize,
    /// Set from the experiment seed, never read from a config file.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for StreamSpec {
    fn default() -> Self {
        StreamSpec {
            num_tasks: 20,
            classes_per_task: 2,
            input_dim: 32,
            train_per_class: 100,
            test_per_class: 100,
            separation: 6.0,
            structure: StreamStructure::Clustered,
            super_clusters: 2,
            seed: 0,
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_tasks", self.num_tasks),
            ("classes_per_task", self.classes_per_task),
            ("input_dim", self.input_dim),
            ("train_per_class", self.train_per_class),
            ("test_per_class", self.test_per_class),
            ("super_clusters", self.super_clusters),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(HamError::Config(format!("{name} must be positive")));
            }
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return Err(HamError::Config(format!(
                "separation must be finite and non-negative, got {}",
                self.separation
            )));
        }
        Ok(())
    }

    pub fn total_classes(&self) -> usize {
        self.num_tasks * self.classes_per_task
    }
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    if n == 0.0 {
        return v;
    }
    v.into_iter().map(|x| x / n).collect()
}

/// Class means, one row per class id.
fn class_means(spec: &StreamSpec, rng: &mut RngState) -> Matrix {
    let d = spec.input_dim;
    let centers: Vec<Vec<f64>> = (0..spec.super_clusters)
        .map(|_| unit((0..d).map(|_| rng.normal()).collect()))
        .collect();
    let mut means = Matrix::zeros(spec.total_classes(), d);
    for t in 0..spec.num_tasks {
        for c in 0..spec.classes_per_task {
            let own = unit((0..d).map(|_| rng.normal()).collect());
            let dir = match spec.structure {
                StreamStructure::Uniform => own,
                StreamStructure::Clustered => {
                    let center = &centers[t % spec.super_clusters];
                    unit(center.iter().zip(&own).map(|(a, b)| a + b).collect())
                }
            };
            let row = means.row_mut(t * spec.classes_per_task + c);
            for (m, v) in row.iter_mut().zip(dir) {
                *m = spec.separation * v;
            }
        }
    }
    means
}

fn sample_split(means: &Matrix, classes: &[usize], per_class: usize, rng: &mut RngState) -> (Matrix, Vec<usize>) {
    let d = means.cols();
    let mut x = Matrix::zeros(classes.len() * per_class, d);
    let mut y = Vec::with_capacity(classes.len() * per_class);
    let mut row = 0;
    for &c in classes {
        for _ in 0..per_class {
            for (j, v) in x.row_mut(row).iter_mut().enumerate() {
                *v = means.get(c, j) + rng.normal();
            }
            y.push(c);
            row += 1;
        }
    }
    (x, y)
}

/// The full ordered stream. Identical specs give bit-identical streams.
pub fn generate_stream(spec: &StreamSpec) -> Result<Vec<TaskDataset>> {
    spec.validate()?;
    let mut rng = RngState::substream(spec.seed, streams::DATA);
    let means = class_means(spec, &mut rng);
    let mut tasks = Vec::with_capacity(spec.num_tasks);
    for t in 0..spec.num_tasks {
        let class_ids: Vec<usize> = (t * spec.classes_per_task..(t + 1) * spec.classes_per_task).collect();
        let (train_x, train_y) = sample_split(&means, &class_ids, spec.train_per_class, &mut rng);
        let (test_x, test_y) = sample_split(&means, &class_ids, spec.test_per_class, &mut rng);
        tasks.push(TaskDataset {
            task_id: t,
            class_ids,
            train_x,
            train_y,
            test_x,
            test_y,
        });
    }
    Ok(tasks)
}

/// Anything that maps a batch of inputs to logits over every class seen.
pub trait Classifier {
    fn logits(&self, x: &Matrix) -> Result<Matrix>;
    fn num_classes(&self) -> usize;
}

impl Classifier for FrozenBackbone {
    fn logits(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_frozen(x)
    }

    fn num_classes(&self) -> usize {
        self.num_classes_seen()
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Top-1 test accuracy per dataset, predicting over every class the model
/// knows. The task id is only used to bucket results.
pub fn evaluate<C: Classifier + ?Sized>(model: &C, datasets: &[TaskDataset]) -> Result<Vec<f64>> {
    datasets
        .iter()
        .map(|ds| {
            if ds.test_len() == 0 {
                return Err(HamError::Input(format!("task {} has no test examples", ds.task_id)));
            }
            if let Some(&y) = ds.test_y.iter().find(|&&y| y >= model.num_classes()) {
                return Err(HamError::Input(format!(
                    "class {y} of task {} is unknown to the model ({} classes)",
                    ds.task_id,
                    model.num_classes()
                )));
            }
            let logits = model.logits(&ds.test_x)?;
            let correct = ds
                .test_y
                .iter()
                .enumerate()
                .filter(|(i, &y)| argmax(logits.row(*i)) == y)
                .count();
            Ok(correct as f64 / ds.test_len() as f64)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Writes one example per line: `task_id class_id x_1 … x_D`, space separated.
pub fn export_split<W: Write>(datasets: &[TaskDataset], split: Split, mut out: W) -> Result<()> {
    for ds in datasets {
        let (x, y) = match split {
            Split::Train => (&ds.train_x, &ds.train_y),
            Split::Test => (&ds.test_x, &ds.test_y),
        };
        for (i, label) in y.iter().enumerate() {
            write!(out, "{} {}", ds.task_id, label)?;
            for v in x.row(i) {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

/// Reads the train and test files written by [`export_split`] back into
/// datasets ordered by task id.
pub fn import_stream<R1: BufRead, R2: BufRead>(train: R1, test: R2) -> Result<Vec<TaskDataset>> {
    type Rows = (Vec<Vec<f64>>, Vec<usize>);
    fn read<R: BufRead>(r: R, into: &mut BTreeMap<usize, (Rows, Rows)>, test: bool) -> Result<()> {
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| HamError::Format(format!("line {}: {what}", lineno + 1));
            let mut fields = line.split_whitespace();
            let task: usize = fields.next().ok_or_else(|| bad("missing task id"))?.parse().map_err(|_| bad("bad task id"))?;
            let class: usize = fields.next().ok_or_else(|| bad("missing class id"))?.parse().map_err(|_| bad("bad class id"))?;
            let xs = fields.map(|f| f.parse::<f64>().map_err(|_| bad("bad feature value"))).collect::<Result<Vec<_>>>()?;
            let entry = into.entry(task).or_default();
            let split = if test { &mut entry.1 } else { &mut entry.0 };
            split.0.push(xs);
            split.1.push(class);
        }
        Ok(())
    }
    fn to_matrix(rows: Vec<Vec<f64>>, dim: usize) -> Result<Matrix> {
        let n = rows.len();
        let mut data = Vec::with_capacity(n * dim);
        for r in rows {
            if r.len() != dim {
                return Err(HamError::Format("rows have differing feature counts".into()));
            }
            data.extend(r);
        }
        Matrix::from_vec(n, dim, data)
    }

    let mut by_task = BTreeMap::new();
    read(train, &mut by_task, false)?;
    read(test, &mut by_task, true)?;
    let dim = by_task
        .values()
        .flat_map(|(a, b)| a.0.iter().chain(&b.0))
        .map(Vec::len)
        .next()
        .unwrap_or(0);
    let mut out = Vec::with_capacity(by_task.len());
    let mut seen_classes = std::collections::BTreeSet::new();
    for (task_id, ((train_rows, train_y), (test_rows, test_y))) in by_task {
        let mut class_ids: Vec<usize> = train_y.iter().chain(&test_y).copied().collect();
        class_ids.sort_unstable();
        class_ids.dedup();
        for c in &class_ids {
            if !seen_classes.insert(*c) {
                return Err(HamError::Format(format!("class {c} appears in more than one task")));
            }
        }
        out.push(TaskDataset {
            task_id,
            class_ids,
            train_x: to_matrix(train_rows, dim)?,
            train_y,
            test_x: to_matrix(test_rows, dim)?,
            test_y,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> StreamSpec {
        StreamSpec {
            num_tasks: 2,
            classes_per_task: 2,
            train_per_class: 10,
            test_per_class: 10,
            ..Default::default()
        }
    }

    #[test]
    fn class_ids_are_disjoint_and_contiguous() {
        let s = generate_stream(&small_spec()).unwrap();
        assert_eq!(s[0].class_ids, vec![0, 1]);
        assert_eq!(s[1].class_ids, vec![2, 3]);
        for ds in &s {
            assert!(ds.train_y.iter().chain(&ds.test_y).all(|y| ds.class_ids.contains(y)));
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let spec = small_spec();
        assert_eq!(generate_stream(&spec).unwrap(), generate_stream(&spec).unwrap());
        let other = StreamSpec { seed: 1, ..spec };
        assert_ne!(generate_stream(&other).unwrap(), generate_stream(&small_spec()).unwrap());
    }

    #[test]
    fn invalid_specs_rejected() {
        for bad in [
            StreamSpec { num_tasks: 0, ..Default::default() },
            StreamSpec { input_dim: 0, ..Default::default() },
            StreamSpec { separation: -1.0, ..Default::default() },
            StreamSpec { separation: f64::NAN, ..Default::default() },
        ] {
            assert!(matches!(generate_stream(&bad), Err(HamError::Config(_))));
        }
    }

    /// Classifies by the nearest empirical training mean among all classes.
    fn nearest_mean_accuracy(stream: &[TaskDataset]) -> Vec<f64> {
        let d = stream[0].train_x.cols();
        let mut means = BTreeMap::new();
        for ds in stream {
            for &c in &ds.class_ids {
                let rows: Vec<usize> = (0..ds.train_len()).filter(|&i| ds.train_y[i] == c).collect();
                let m: Vec<f64> = (0..d)
                    .map(|j| rows.iter().map(|&i| ds.train_x.get(i, j)).sum::<f64>() / rows.len() as f64)
                    .collect();
                means.insert(c, m);
            }
        }
        stream
            .iter()
            .map(|ds| {
                let correct = (0..ds.test_len())
                    .filter(|&i| {
                        let x = ds.test_x.row(i);
                        let best = means
                            .iter()
                            .min_by(|a, b| {
                                let da: f64 = a.1.iter().zip(x).map(|(m, v)| (m - v).powi(2)).sum();
                                let db: f64 = b.1.iter().zip(x).map(|(m, v)| (m - v).powi(2)).sum();
                                da.total_cmp(&db)
                            })
                            .unwrap();
                        *best.0 == ds.test_y[i]
                    })
                    .count();
                correct as f64 / ds.test_len() as f64
            })
            .collect()
    }

    #[test]
    fn well_separated_classes_are_nearly_perfectly_classifiable() {
        let spec = StreamSpec { separation: 8.0, num_tasks: 4, ..Default::default() };
        let stream = generate_stream(&spec).unwrap();
        // Within-task nearest mean, as each task sees it.
        for ds in &stream {
            let acc = nearest_mean_accuracy(std::slice::from_ref(ds))[0];
            assert!(acc > 0.99, "task {} nearest-mean accuracy {acc}", ds.task_id);
        }
    }

    #[test]
    fn zero_separation_is_chance_level() {
        let spec = StreamSpec {
            separation: 0.0,
            num_tasks: 1,
            classes_per_task: 2,
            train_per_class: 500,
            test_per_class: 500,
            ..Default::default()
        };
        let stream = generate_stream(&spec).unwrap();
        let acc = nearest_mean_accuracy(&stream)[0];
        // Binomial, n = 1000, p = 0.5: 3σ ≈ 0.047.
        assert!((acc - 0.5).abs() < 0.05, "accuracy {acc}");
    }

    struct Fixed(Matrix);
    impl Classifier for Fixed {
        fn logits(&self, _: &Matrix) -> Result<Matrix> {
            Ok(self.0.clone())
        }
        fn num_classes(&self) -> usize {
            self.0.cols()
        }
    }

    struct Noise(u64, usize);
    impl Classifier for Noise {
        fn logits(&self, x: &Matrix) -> Result<Matrix> {
            let mut rng = RngState::new(self.0);
            Ok(Matrix::from_fn(x.rows(), self.1, |_, _| rng.normal()))
        }
        fn num_classes(&self) -> usize {
            self.1
        }
    }

    #[test]
    fn evaluate_cases() {
        let stream = generate_stream(&small_spec()).unwrap();
        assert!(evaluate(&Noise(0, 4), &[]).unwrap().is_empty());

        // Perfect model: one-hot logits on the true label.
        let ds = &stream[1];
        let mut logits = Matrix::zeros(ds.test_len(), 4);
        for (i, &y) in ds.test_y.iter().enumerate() {
            logits.set(i, y, 1.0);
        }
        assert_eq!(evaluate(&Fixed(logits), std::slice::from_ref(ds)).unwrap(), vec![1.0]);

        assert!(matches!(evaluate(&Noise(0, 3), &stream), Err(HamError::Input(_))));
    }

    #[test]
    fn random_logits_hit_chance() {
        let spec = StreamSpec {
            num_tasks: 5,
            classes_per_task: 2,
            test_per_class: 200,
            train_per_class: 1,
            ..Default::default()
        };
        let stream = generate_stream(&spec).unwrap();
        let accs = evaluate(&Noise(7, 10), &stream).unwrap();
        let n: f64 = 2000.0;
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        let sigma = (0.1 * 0.9 / n).sqrt();
        assert!((mean - 0.1).abs() < 3.0 * sigma, "mean accuracy {mean}");
    }

    #[test]
    fn export_import_round_trip() {
        let stream = generate_stream(&small_spec()).unwrap();
        let mut train = Vec::new();
        let mut test = Vec::new();
        export_split(&stream, Split::Train, &mut train).unwrap();
        export_split(&stream, Split::Test, &mut test).unwrap();
        let back = import_stream(&train[..], &test[..]).unwrap();
        assert_eq!(back, stream);
        assert!(import_stream(&b"0 x 1.0\n"[..], &b""[..]).is_err());
    }
}
