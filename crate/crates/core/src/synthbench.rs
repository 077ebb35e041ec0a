//! Seeded synthetic multi-task suites.
//!
//! Each task is a Gaussian-blob classification problem in `R^D`. An
//! orthonormal basis is split into a shared block `S`, one private block
//! `Pₖ` per task (both `C` columns wide) and one domain direction `μₖ` per
//! task. Task `k` places class `c` at
//!
//! ```text
//! mean(k, c) = domain_scale · μₖ + separation · Uₖ e_{πₖ(c)}
//! Uₖ = sqrt(1 − s²) · Pₖ + s · S
//! ```
//!
//! where `s` is `conflict_strength` and `πₖ` is a per-task label
//! permutation, so `s` is the cosine between two tasks' class directions.
//! At `s = 0` the class subspaces are orthogonal; at `s = 1` every task uses
//! `S` with its own labelling. Samples add isotropic noise of standard
//! deviation `noise`.
//!
//! A model is trained briefly on the mixture of all tasks, then fine-tuned
//! on each task independently with minibatch SGD on cross-entropy.
//!
//! Random streams (substreams of `CounterRng::new(seed)`): `0` geometry,
//! `1` initialization and pretraining, `10 + k` task `k`'s train/eval data,
//! `100 + k` task `k`'s fine-tuning batches, `200 + k` task `k`'s
//! exemplars. Exemplars are therefore prefixes of one fixed sequence.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netexec::{forward, loss, loss_and_backward, sgd_step, Activation, Batch, LossKind, ModelSpec, Targets};
use crate::rng::CounterRng;
use crate::speclinalg::{dot, Matrix};
use crate::tensorio::{read_container, write_container, Checkpoint, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub seed: u64,
    pub tasks: usize,
    pub model: ModelSpec,
    pub classes: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub exemplars: usize,
    pub finetune_steps: usize,
    pub lr: f64,
    pub conflict_strength: f64,
    pub pretrain_steps: usize,
    pub batch_size: usize,
    pub noise: f64,
    pub separation: f64,
    pub domain_scale: f64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tasks: 4,
            model: default_model(4),
            classes: 4,
            train_samples: 512,
            eval_samples: 256,
            exemplars: 3,
            finetune_steps: 300,
            lr: 0.05,
            conflict_strength: 0.8,
            pretrain_steps: 1000,
            batch_size: 64,
            noise: 0.5,
            separation: 1.5,
            domain_scale: 3.0,
        }
    }
}

/// The default benchmark network with a `classes`-way head.
pub fn default_model(classes: usize) -> ModelSpec {
    ModelSpec::mlp(32, 64, 2, classes, true, Activation::Relu)
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        self.model.validate()?;
        if self.tasks == 0 {
            return bad("tasks", "must be at least 1".into());
        }
        if self.classes < 2 {
            return bad("classes", format!("must be at least 2, got {}", self.classes));
        }
        if self.model.output_dim != self.classes {
            return bad("model.output_dim", format!("{} does not match classes = {}", self.model.output_dim, self.classes));
        }
        let need = self.classes * (self.tasks + 1) + self.tasks;
        if self.model.input_dim < need {
            return bad(
                "model.input_dim",
                format!("{} is too small for {} tasks with {} classes (need {need})", self.model.input_dim, self.tasks, self.classes),
            );
        }
        if !(0.0..=1.0).contains(&self.conflict_strength) {
            return bad("conflict_strength", format!("must be in [0, 1], got {}", self.conflict_strength));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("must be positive and finite, got {}", self.lr));
        }
        for (field, v) in [("train_samples", self.train_samples), ("eval_samples", self.eval_samples), ("exemplars", self.exemplars), ("batch_size", self.batch_size)] {
            if v == 0 {
                return bad(field, "must be at least 1".into());
            }
        }
        for (field, v) in [("noise", self.noise), ("separation", self.separation), ("domain_scale", self.domain_scale)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(field, format!("must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub finetuned: Checkpoint,
    pub train: Batch,
    pub eval: Batch,
    /// Unlabeled inputs from the task's training distribution.
    pub exemplars: Batch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSuite {
    pub config: SuiteConfig,
    pub pretrained: Checkpoint,
    pub tasks: Vec<TaskData>,
}

/// Column-orthonormal `D × D` basis from modified Gram–Schmidt on a
/// Gaussian matrix.
fn random_basis(d: usize, rng: &mut CounterRng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v = rng.normals(d);
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Class means, `[task][class] → R^D`.
fn class_means(cfg: &SuiteConfig, rng: &mut CounterRng) -> Vec<Vec<Vec<f64>>> {
    let (d, c, k) = (cfg.model.input_dim, cfg.classes, cfg.tasks);
    let basis = random_basis(d, rng);
    let shared = &basis[..c];
    let (a, b) = ((1.0 - cfg.conflict_strength.powi(2)).sqrt(), cfg.conflict_strength);
    (0..k)
        .map(|task| {
            let private = &basis[c * (task + 1)..c * (task + 2)];
            let domain = &basis[c * (k + 1) + task];
            let perm = rng.permutation(c);
            (0..c)
                .map(|class| {
                    let j = perm[class];
                    (0..d)
                        .map(|z| {
                            cfg.domain_scale * domain[z] + cfg.separation * (a * private[j][z] + b * shared[j][z])
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn sample(means: &[Vec<f64>], labels: &[u32], noise: f64, rng: &mut CounterRng) -> Result<Matrix> {
    let d = means[0].len();
    let mut data = Vec::with_capacity(labels.len() * d);
    for &y in labels {
        for m in &means[y as usize] {
            data.push(m + noise * rng.normal());
        }
    }
    Matrix::from_vec(labels.len(), d, data)
}

/// `n` class-balanced labels (`j mod C`) with samples.
fn labeled(means: &[Vec<f64>], n: usize, noise: f64, rng: &mut CounterRng) -> Result<Batch> {
    let labels: Vec<u32> = (0..n).map(|j| (j % means.len()) as u32).collect();
    let x = sample(means, &labels, noise, rng)?;
    Batch::new(x, Some(Targets::Labels(labels)))
}

/// Runs `steps` SGD steps on minibatches drawn with replacement from
/// `batches` (one batch chosen uniformly per sample).
pub fn train_sgd(
    spec: &ModelSpec,
    mut params: Checkpoint,
    batches: &[&Batch],
    steps: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut CounterRng,
) -> Result<Checkpoint> {
    let d = spec.input_dim;
    for _ in 0..steps {
        let mut x = Vec::with_capacity(batch_size * d);
        let mut y = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let b = batches[rng.below(batches.len() as u64) as usize];
            let j = rng.below(b.len() as u64) as usize;
            x.extend_from_slice(b.x.row(j));
            match &b.y {
                Some(Targets::Labels(l)) => y.push(l[j]),
                _ => return Err(Error::Missing("class labels for training".into())),
            }
        }
        let mb = Batch::new(Matrix::from_vec(batch_size, d, x)?, Some(Targets::Labels(y)))?;
        let (_, grads) = loss_and_backward(spec, &params, &mb, LossKind::CrossEntropy)?;
        params = sgd_step(&params, &grads, lr)?;
    }
    Ok(params)
}

/// Rounds every tensor to f32. Differences of two f32 checkpoints are exact
/// in f64, so `W₀ + (Wₖ − W₀)` gives back `Wₖ` bit for bit.
fn stored(c: Checkpoint) -> Result<Checkpoint> {
    let mut out = Checkpoint::new();
    out.meta = c.meta.clone();
    for (name, e) in c.iter() {
        let data = e.tensor.to_f64_vec().iter().map(|&v| v as f32).collect();
        out.insert(name, e.kind, Tensor::from_f32(e.tensor.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

/// Builds the whole suite. Deterministic in `cfg`.
pub fn generate_suite(cfg: &SuiteConfig) -> Result<TaskSuite> {
    cfg.validate()?;
    let root = CounterRng::new(cfg.seed);
    let means = class_means(cfg, &mut root.substream(0));
    let data = (0..cfg.tasks)
        .map(|k| {
            let mut rng = root.substream(10 + k as u64);
            let train = labeled(&means[k], cfg.train_samples, cfg.noise, &mut rng)?;
            let eval = labeled(&means[k], cfg.eval_samples, cfg.noise, &mut rng)?;
            let mut ex_rng = root.substream(200 + k as u64);
            // Label then features per exemplar, so smaller sets are prefixes.
            let mut x = Vec::with_capacity(cfg.exemplars * cfg.model.input_dim);
            for _ in 0..cfg.exemplars {
                let y = ex_rng.below(cfg.classes as u64) as u32;
                x.extend(sample(&means[k], &[y], cfg.noise, &mut ex_rng)?.into_vec());
            }
            let exemplars = Batch::unlabeled(Matrix::from_vec(cfg.exemplars, cfg.model.input_dim, x)?)?;
            Ok((train, eval, exemplars))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut init_rng = root.substream(1);
    let init = cfg.model.init_params(&mut init_rng)?;
    let mixture: Vec<&Batch> = data.iter().map(|(train, _, _)| train).collect();
    let pretrained = stored(train_sgd(&cfg.model, init, &mixture, cfg.pretrain_steps, cfg.batch_size, cfg.lr, &mut init_rng)?)?;

    let finetuned = (0..cfg.tasks)
        .into_par_iter()
        .map(|k| {
            let mut rng = root.substream(100 + k as u64);
            stored(train_sgd(&cfg.model, pretrained.clone(), &[&data[k].0], cfg.finetune_steps, cfg.batch_size, cfg.lr, &mut rng)?)
        })
        .collect::<Result<Vec<_>>>()?;

    let tasks = data
        .into_iter()
        .zip(finetuned)
        .map(|((train, eval, exemplars), finetuned)| TaskData { finetuned, train, eval, exemplars })
        .collect();
    Ok(TaskSuite { config: cfg.clone(), pretrained, tasks })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean loss and argmax accuracy (ties go to the lowest class index).
pub fn evaluate(spec: &ModelSpec, params: &Checkpoint, data: &Batch, kind: LossKind) -> Result<Metrics> {
    let y = data.y.as_ref().ok_or_else(|| Error::Missing("labels for evaluation".into()))?;
    let out = forward(spec, params, data)?;
    let value = loss(kind, &out, y)?;
    let accuracy = match y {
        Targets::Labels(labels) => {
            let hits = labels
                .iter()
                .enumerate()
                .filter(|&(r, &label)| {
                    let row = out.row(r);
                    let best = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
                    best == label as usize
                })
                .count();
            hits as f64 / labels.len() as f64
        }
        Targets::Values(_) => return Err(Error::Config("accuracy needs class labels".into())),
    };
    Ok(Metrics { loss: value, accuracy })
}

impl TaskSuite {
    pub fn spec(&self) -> &ModelSpec {
        &self.config.model
    }

    pub fn finetuned(&self) -> Vec<Checkpoint> {
        self.tasks.iter().map(|t| t.finetuned.clone()).collect()
    }

    /// First `n` exemplars of every task.
    pub fn exemplars(&self, n: usize) -> Result<Vec<Batch>> {
        self.tasks
            .iter()
            .map(|t| {
                if n > t.exemplars.len() {
                    return Err(Error::Config(format!("{n} exemplars requested, suite has {}", t.exemplars.len())));
                }
                t.exemplars.head(n)
            })
            .collect()
    }

    /// Per-task metrics of `params` on every eval set.
    pub fn evaluate_all(&self, params: &Checkpoint) -> Result<Vec<Metrics>> {
        self.tasks.iter().map(|t| evaluate(self.spec(), params, &t.eval, LossKind::CrossEntropy)).collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let files = SuiteFiles::for_tasks(self.tasks.len());
        write_container(dir.join(&files.pretrained), &self.pretrained)?;
        for (k, t) in self.tasks.iter().enumerate() {
            write_container(dir.join(&files.finetuned[k]), &t.finetuned)?;
            write_container(dir.join(&files.train[k]), &t.train.to_checkpoint()?)?;
            write_container(dir.join(&files.eval[k]), &t.eval.to_checkpoint()?)?;
            write_container(dir.join(&files.exemplars[k]), &t.exemplars.to_checkpoint()?)?;
        }
        let manifest = SuiteManifest { format: SUITE_FORMAT.into(), config: self.config.clone(), files };
        std::fs::write(dir.join(SUITE_MANIFEST), serde_json::to_string_pretty(&manifest)? + "\n")?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<TaskSuite> {
        let dir = dir.as_ref();
        let manifest = SuiteManifest::load(dir)?;
        manifest.config.validate()?;
        let f = &manifest.files;
        let pretrained = read_container(dir.join(&f.pretrained))?;
        let tasks = (0..manifest.config.tasks)
            .map(|k| {
                Ok(TaskData {
                    finetuned: read_container(dir.join(&f.finetuned[k]))?,
                    train: Batch::from_checkpoint(&read_container(dir.join(&f.train[k]))?)?,
                    eval: Batch::from_checkpoint(&read_container(dir.join(&f.eval[k]))?)?,
                    exemplars: Batch::from_checkpoint(&read_container(dir.join(&f.exemplars[k]))?)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        manifest.config.model.check_params(&pretrained)?;
        Ok(TaskSuite { config: manifest.config, pretrained, tasks })
    }
}

pub const SUITE_MANIFEST: &str = "suite.json";
const SUITE_FORMAT: &str = "catmerge-suite/1";

/// Container paths relative to the suite directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteFiles {
    pub pretrained: String,
    pub finetuned: Vec<String>,
    pub train: Vec<String>,
    pub eval: Vec<String>,
    pub exemplars: Vec<String>,
}

impl SuiteFiles {
    fn for_tasks(k: usize) -> Self {
        let names = |prefix: &str| (0..k).map(|i| format!("{prefix}_{i}.mtc")).collect();
        Self {
            pretrained: "pretrained.mtc".into(),
            finetuned: names("finetuned"),
            train: names("train"),
            eval: names("eval"),
            exemplars: names("exemplars"),
        }
    }

    /// Every container path, pretrained first.
    pub fn all(&self) -> Vec<&str> {
        let mut out = vec![self.pretrained.as_str()];
        for group in [&self.finetuned, &self.train, &self.eval, &self.exemplars] {
            out.extend(group.iter().map(String::as_str));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub format: String,
    pub config: SuiteConfig,
    pub files: SuiteFiles,
}

impl SuiteManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path: PathBuf = dir.join(SUITE_MANIFEST);
        let text = std::fs::read_to_string(&path)?;
        let m: SuiteManifest = serde_json::from_str(&text)?;
        if m.format != SUITE_FORMAT {
            return Err(Error::BadHeader(format!("{}: unsupported suite format {:?}", path.display(), m.format)));
        }
        let k = m.config.tasks;
        let f = &m.files;
        if [f.finetuned.len(), f.train.len(), f.eval.len(), f.exemplars.len()].iter().any(|&n| n != k) {
            return Err(Error::BadHeader(format!("{}: file lists do not match {k} tasks", path.display())));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> SuiteConfig {
        SuiteConfig {
            seed,
            tasks: 2,
            model: ModelSpec::mlp(12, 8, 1, 3, true, Activation::Relu),
            classes: 3,
            train_samples: 60,
            eval_samples: 30,
            exemplars: 2,
            finetune_steps: 20,
            pretrain_steps: 5,
            batch_size: 16,
            ..SuiteConfig::default()
        }
    }

    #[test]
    fn defaults_are_valid() {
        SuiteConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_small_input_dim() {
        let cfg = SuiteConfig { tasks: 8, ..SuiteConfig::default() };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("model.input_dim"), "{err}");
    }

    #[test]
    fn same_seed_same_suite() {
        let a = generate_suite(&tiny(3)).unwrap();
        let b = generate_suite(&tiny(3)).unwrap();
        assert!(a.pretrained.bit_eq(&b.pretrained));
        for (x, y) in a.tasks.iter().zip(&b.tasks) {
            assert!(x.finetuned.bit_eq(&y.finetuned));
            assert_eq!(x.eval, y.eval);
        }
        let c = generate_suite(&tiny(4)).unwrap();
        assert!(!a.pretrained.bit_eq(&c.pretrained));
    }

    #[test]
    fn exemplars_are_prefixes() {
        let a = generate_suite(&tiny(5)).unwrap();
        let b = generate_suite(&SuiteConfig { exemplars: 5, ..tiny(5) }).unwrap();
        for (x, y) in a.tasks.iter().zip(&b.tasks) {
            assert_eq!(x.exemplars, y.exemplars.head(2).unwrap());
            assert!(x.finetuned.bit_eq(&y.finetuned));
        }
    }

    #[test]
    fn geometry_is_orthonormal() {
        let b = random_basis(6, &mut CounterRng::new(1));
        for i in 0..6 {
            for j in 0..6 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot(&b[i], &b[j]) - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn evaluate_examples() {
        let spec = ModelSpec {
            input_dim: 3,
            output_dim: 3,
            layers: vec![crate::netexec::LayerSpec::Linear { in_dim: 3, out_dim: 3, bias: false, frozen: false }],
        };
        let mut p = Checkpoint::new();
        p.insert("layer0.weight", crate::tensorio::ParamKind::LinearWeight, Matrix::identity(3).to_tensor().unwrap()).unwrap();
        let x = Matrix::from_rows(&[vec![5.0, 0.0, 0.0], vec![0.0, 5.0, 0.0], vec![0.0, 0.0, 5.0], vec![1.0, 2.0, 0.0], vec![0.0, 0.0, 0.0]]).unwrap();
        // argmax rows: 0, 1, 2, 1, 0 (tie).
        let b = Batch::new(x, Some(Targets::Labels(vec![0, 1, 2, 0, 0]))).unwrap();
        let m = evaluate(&spec, &p, &b, LossKind::CrossEntropy).unwrap();
        assert_eq!(m.accuracy, 4.0 / 5.0);
        let uniform = Batch::new(Matrix::zeros(2, 3), Some(Targets::Labels(vec![0, 2]))).unwrap();
        let m = evaluate(&spec, &p, &uniform, LossKind::CrossEntropy).unwrap();
        assert!((m.loss - 3f64.ln()).abs() < 1e-12);
        assert!(evaluate(&spec, &p, &Batch::unlabeled(Matrix::zeros(1, 3)).unwrap(), LossKind::CrossEntropy).is_err());
    }

    #[test]
    fn save_load_roundtrip() {
        let suite = generate_suite(&tiny(6)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        suite.save(dir.path()).unwrap();
        let back = TaskSuite::load(dir.path()).unwrap();
        assert_eq!(back.config, suite.config);
        assert!(back.pretrained.bit_eq(&suite.pretrained));
        assert_eq!(back.tasks, suite.tasks);
    }
}
