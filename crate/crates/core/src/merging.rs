//! Task-vector algebra and merge strategies.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netexec::{forward_collect, Batch, FeatureTrace, ModelSpec};
use crate::speclinalg::{gram, spd_solve, Matrix};
use crate::tensorio::{ensure_aligned, Checkpoint, ParamKind, Tensor};
use crate::trimming::{compute_operator, SlotInputs, SlotKind, TrimConfig, TrimOperator};

/// Largest λ handed to the shift rule; its score does not depend on λ, but
/// λ ≥ 1 is rejected there.
pub const SHIFT_LAMBDA_MAX: f64 = 0.999;

/// `Wₖ − W₀`, stored as f64 with the kinds of `W₀`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub task: usize,
    pub params: Checkpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeMethod {
    Average,
    TaskArithmetic,
    MagnitudeTrim,
    Cat,
    Lsq,
}

impl MergeMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            MergeMethod::Average => "average",
            MergeMethod::TaskArithmetic => "task_arithmetic",
            MergeMethod::MagnitudeTrim => "magnitude_trim",
            MergeMethod::Cat => "cat",
            MergeMethod::Lsq => "lsq",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    pub method: MergeMethod,
    pub alpha: f64,
    pub trim: TrimConfig,
    pub magnitude_keep_fraction: f64,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self { method: MergeMethod::Cat, alpha: 1.0, trim: TrimConfig::default(), magnitude_keep_fraction: 0.2 }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be finite, got {}", self.alpha)));
        }
        if !(self.magnitude_keep_fraction > 0.0 && self.magnitude_keep_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "magnitude keep fraction must be in (0, 1], got {}",
                self.magnitude_keep_fraction
            )));
        }
        self.trim.validate()
    }
}

fn zip_map(a: &Checkpoint, b: &Checkpoint, f: impl Fn(f64, f64) -> f64) -> Result<Checkpoint> {
    ensure_aligned(a, b)?;
    let mut out = Checkpoint::new();
    for ((name, ea), (_, eb)) in a.iter().zip(b.iter()) {
        let (va, vb) = (ea.tensor.to_f64_vec(), eb.tensor.to_f64_vec());
        let data = va.iter().zip(&vb).map(|(&x, &y)| f(x, y)).collect();
        out.insert(name, ea.kind, Tensor::from_f64(ea.tensor.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

fn map_values(a: &Checkpoint, f: impl Fn(f64) -> f64) -> Result<Checkpoint> {
    let mut out = Checkpoint::new();
    for (name, e) in a.iter() {
        let data = e.tensor.to_f64_vec().into_iter().map(&f).collect();
        out.insert(name, e.kind, Tensor::from_f64(e.tensor.shape().to_vec(), data)?)?;
    }
    Ok(out)
}

pub fn compute_task_vector(w0: &Checkpoint, wk: &Checkpoint, task: usize) -> Result<TaskVector> {
    let params = zip_map(&w0.widened(), &wk.widened(), |a, b| b - a)?;
    Ok(TaskVector { task, params })
}

/// `w0 + alpha · tv`.
pub fn add_scaled(w0: &Checkpoint, tv: &Checkpoint, alpha: f64) -> Result<Checkpoint> {
    zip_map(&w0.widened(), tv, |a, t| a + alpha * t)
}

fn check_vectors(w0: &Checkpoint, tvs: &[TaskVector]) -> Result<Checkpoint> {
    if tvs.is_empty() {
        return Err(Error::Config("no task vectors to merge".into()));
    }
    let w0 = w0.widened();
    for tv in tvs {
        ensure_aligned(&w0, &tv.params)
            .map_err(|e| Error::NotAligned(format!("task vector {}: {e}", tv.task)))?;
    }
    Ok(w0)
}

/// Elementwise sum in task order, starting from the first vector.
fn sum_vectors(tvs: &[&Checkpoint]) -> Result<Checkpoint> {
    let mut acc = tvs[0].clone();
    for tv in &tvs[1..] {
        acc = zip_map(&acc, tv, |a, b| a + b)?;
    }
    Ok(acc)
}

/// `W₀ + α·ΣTₖ`.
pub fn merge_task_arithmetic(w0: &Checkpoint, tvs: &[TaskVector], alpha: f64) -> Result<Checkpoint> {
    let w0 = check_vectors(w0, tvs)?;
    let sum = sum_vectors(&tvs.iter().map(|t| &t.params).collect::<Vec<_>>())?;
    zip_map(&w0, &sum, |a, s| a + alpha * s)
}

/// Elementwise arithmetic mean.
pub fn merge_average(checkpoints: &[Checkpoint]) -> Result<Checkpoint> {
    if checkpoints.is_empty() {
        return Err(Error::Config("no checkpoints to average".into()));
    }
    let widened: Vec<Checkpoint> = checkpoints.iter().map(Checkpoint::widened).collect();
    let sum = sum_vectors(&widened.iter().collect::<Vec<_>>())?;
    let k = checkpoints.len() as f64;
    map_values(&sum, |v| v / k)
}

/// Keeps the `floor(keep_fraction · n)` largest-magnitude entries of a task
/// vector (`n` counts every element; ties go to the lower flat index).
pub fn magnitude_trim(tv: &TaskVector, keep_fraction: f64) -> Result<TaskVector> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Config(format!("keep fraction must be in (0, 1], got {keep_fraction}")));
    }
    let flat: Vec<f64> = tv.params.iter().flat_map(|(_, e)| e.tensor.to_f64_vec()).collect();
    let keep = (keep_fraction * flat.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..flat.len()).collect();
    order.sort_by(|&a, &b| flat[b].abs().total_cmp(&flat[a].abs()).then(a.cmp(&b)));
    let mut kept = vec![false; flat.len()];
    for &i in &order[..keep] {
        kept[i] = true;
    }
    let mut params = Checkpoint::new();
    let mut offset = 0;
    for (name, e) in tv.params.iter() {
        let n = e.tensor.numel();
        let data = (offset..offset + n).map(|i| if kept[i] { flat[i] } else { 0.0 }).collect();
        params.insert(name, e.kind, Tensor::from_f64(e.tensor.shape().to_vec(), data)?)?;
        offset += n;
    }
    Ok(TaskVector { task: tv.task, params })
}

pub fn merge_magnitude_trim(w0: &Checkpoint, tvs: &[TaskVector], keep_fraction: f64, alpha: f64) -> Result<Checkpoint> {
    check_vectors(w0, tvs)?;
    let trimmed = tvs.iter().map(|t| magnitude_trim(t, keep_fraction)).collect::<Result<Vec<_>>>()?;
    merge_task_arithmetic(w0, &trimmed, alpha)
}

/// Summary of one operator for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorSummary {
    pub task: usize,
    pub slot: String,
    pub kind: SlotKind,
    pub dim: usize,
    pub rank: usize,
    pub gains: Vec<f64>,
    pub spectrum: Vec<f64>,
}

/// Frobenius norm of one edited slot before and after trimming.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSummary {
    pub task: usize,
    pub slot: String,
    pub norm_before: f64,
    pub norm_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeReport {
    pub method: MergeMethod,
    pub alpha: f64,
    pub num_tasks: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trim: Option<TrimConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub magnitude_keep_fraction: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exemplars_per_task: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub operators: Vec<OperatorSummary>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edits: Vec<EditSummary>,
}

impl MergeReport {
    fn plain(method: MergeMethod, alpha: f64, num_tasks: usize) -> Self {
        Self {
            method,
            alpha,
            num_tasks,
            trim: None,
            magnitude_keep_fraction: None,
            exemplars_per_task: None,
            operators: Vec::new(),
            edits: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MergeOutput {
    pub merged: Checkpoint,
    pub operators: Vec<TrimOperator>,
    pub report: MergeReport,
}

fn check_exemplars(spec: &ModelSpec, tvs: &[TaskVector], exemplars: &[Batch]) -> Result<usize> {
    if exemplars.len() != tvs.len() {
        return Err(Error::Missing(format!("exemplars for {} of {} tasks", exemplars.len(), tvs.len())));
    }
    let n = exemplars[0].len();
    if n == 0 {
        return Err(Error::Missing("empty exemplar batch".into()));
    }
    for (k, b) in exemplars.iter().enumerate() {
        if b.len() != n {
            return Err(Error::Config(format!("task {k} has {} exemplars, task 0 has {n}; counts must match", b.len())));
        }
        if b.x.cols() != spec.input_dim {
            return Err(Error::Shape(format!("task {k} exemplars have {} features, model expects {}", b.x.cols(), spec.input_dim)));
        }
    }
    Ok(n)
}

/// Traces of every task under its fine-tuned parameters `W₀ + Tₖ`.
pub fn collect_traces(spec: &ModelSpec, w0: &Checkpoint, tvs: &[TaskVector], exemplars: &[Batch]) -> Result<Vec<FeatureTrace>> {
    tvs.par_iter()
        .zip(exemplars.par_iter())
        .map(|(tv, batch)| Ok(forward_collect(spec, &add_scaled(w0, &tv.params, 1.0)?, batch)?.1))
        .collect()
}

enum SlotData {
    Linear(Vec<Matrix>),
    Vector(Vec<Vec<f64>>),
}

fn slot_data(tvs: &[TaskVector], name: &str, kind: SlotKind) -> Result<SlotData> {
    Ok(match kind {
        SlotKind::Linear => {
            SlotData::Linear(tvs.iter().map(|t| Matrix::from_tensor(t.params.tensor(name)?)).collect::<Result<_>>()?)
        }
        _ => SlotData::Vector(tvs.iter().map(|t| Ok(t.params.tensor(name)?.to_f64_vec())).collect::<Result<_>>()?),
    })
}

fn slot_traces(traces: &[FeatureTrace], name: &str) -> Result<Vec<Matrix>> {
    traces
        .iter()
        .map(|t| t.get(name).cloned().ok_or_else(|| Error::Missing(format!("feature trace for {name}"))))
        .collect()
}

/// Trimmable slots of `w0` in checkpoint order.
fn trimmable_slots(w0: &Checkpoint) -> Vec<(String, SlotKind)> {
    w0.iter().filter_map(|(n, e)| SlotKind::from_param(e.kind).map(|k| (n.to_string(), k))).collect()
}

/// Computes every `Φₖ` for every trimmable slot from the unedited task
/// vectors. Output order: ascending task, then checkpoint slot order.
pub fn compute_operators(w0: &Checkpoint, tvs: &[TaskVector], traces: &[FeatureTrace], trim: &TrimConfig) -> Result<Vec<TrimOperator>> {
    let slots = trimmable_slots(w0);
    let data: Vec<(SlotData, Vec<Matrix>)> =
        slots.iter().map(|(n, k)| Ok((slot_data(tvs, n, *k)?, slot_traces(traces, n)?))).collect::<Result<_>>()?;
    let shift_cfg = TrimConfig { lambda: trim.lambda.min(SHIFT_LAMBDA_MAX), ..*trim };
    let jobs: Vec<(usize, usize)> = (0..tvs.len()).flat_map(|k| (0..slots.len()).map(move |s| (k, s))).collect();
    jobs.par_iter()
        .map(|&(k, s)| {
            let (name, kind) = &slots[s];
            let (vectors, xs) = &data[s];
            let (inputs, cfg) = match (kind, vectors) {
                (SlotKind::Linear, SlotData::Linear(v)) => (SlotInputs::Linear { task_vectors: v, traces: xs }, trim),
                (SlotKind::Scale, SlotData::Vector(v)) => (SlotInputs::Scale { task_vectors: v, traces: xs }, trim),
                (SlotKind::Shift, SlotData::Vector(v)) => (SlotInputs::Shift { task_vectors: v, traces: xs }, &shift_cfg),
                _ => unreachable!("slot data built from slot kind"),
            };
            compute_operator(k, name, inputs, cfg)
        })
        .collect()
}

/// Applies operators in order: for each `Φₖ`, every `Tᵢ` with `i ≠ k` in
/// ascending `i`. Returns the edited vectors and per-edit norms.
pub fn apply_operators(tvs: &[TaskVector], operators: &[TrimOperator]) -> Result<(Vec<TaskVector>, Vec<EditSummary>)> {
    let mut edited = tvs.to_vec();
    let mut edits = Vec::new();
    for op in operators {
        for tv in edited.iter_mut().filter(|t| t.task != op.task) {
            let before = tv.params.tensor(&op.slot)?;
            let after = op.apply(before)?;
            let norm = |t: &Tensor| t.to_f64_vec().iter().map(|v| v * v).sum::<f64>().sqrt();
            edits.push(EditSummary { task: tv.task, slot: op.slot.clone(), norm_before: norm(before), norm_after: norm(&after) });
            tv.params.replace(&op.slot, after)?;
        }
    }
    Ok((edited, edits))
}

fn summarize(op: &TrimOperator, w0: &Checkpoint) -> OperatorSummary {
    let kind = w0.get(&op.slot).and_then(|e| SlotKind::from_param(e.kind)).unwrap_or(SlotKind::Shift);
    let dim = match &op.payload {
        crate::trimming::OperatorPayload::LinearBasis(b) => b.rows(),
        crate::trimming::OperatorPayload::Mask(m) => m.len(),
    };
    OperatorSummary {
        task: op.task,
        slot: op.slot.clone(),
        kind,
        dim,
        rank: op.rank(),
        gains: op.gains.clone(),
        spectrum: op.spectrum.clone(),
    }
}

/// Conflict-aware trimming followed by Task Arithmetic. Task vectors must be
/// indexed `0..K` in order.
pub fn merge_cat(spec: &ModelSpec, w0: &Checkpoint, tvs: &[TaskVector], exemplars: &[Batch], cfg: &MergeConfig) -> Result<MergeOutput> {
    cfg.validate()?;
    let w0 = check_vectors(w0, tvs)?;
    spec.check_params(&w0)?;
    if let Some((i, t)) = tvs.iter().enumerate().find(|(i, t)| t.task != *i) {
        return Err(Error::Config(format!("task vector at position {i} has task id {}", t.task)));
    }
    let n = check_exemplars(spec, tvs, exemplars)?;
    let mut report = MergeReport::plain(MergeMethod::Cat, cfg.alpha, tvs.len());
    report.trim = Some(cfg.trim);
    report.exemplars_per_task = Some(n);
    if tvs.len() == 1 {
        let merged = merge_task_arithmetic(&w0, tvs, cfg.alpha)?;
        return Ok(MergeOutput { merged, operators: Vec::new(), report });
    }
    let traces = collect_traces(spec, &w0, tvs, exemplars)?;
    let operators = compute_operators(&w0, tvs, &traces, &cfg.trim)?;
    let (edited, edits) = apply_operators(tvs, &operators)?;
    let merged = merge_task_arithmetic(&w0, &edited, cfg.alpha)?;
    report.operators = operators.iter().map(|op| summarize(op, &w0)).collect();
    report.edits = edits;
    Ok(MergeOutput { merged, operators, report })
}

fn mean_of(values: &[Vec<f64>]) -> Vec<f64> {
    let k = values.len() as f64;
    let mut acc = values[0].clone();
    for v in &values[1..] {
        for (a, b) in acc.iter_mut().zip(v) {
            *a += b;
        }
    }
    acc.iter_mut().for_each(|a| *a /= k);
    acc
}

/// Closed-form least-squares merge of the feature-space objectives:
///
/// * linear: `T = T̄ + A⁺ Σₖ XₖᵀXₖ (Tₖ − T̄)` with `A = Σₖ XₖᵀXₖ`, which is
///   `A⁻¹ Σₖ XₖᵀXₖ Tₖ` when `A` is invertible and falls back to the mean
///   `T̄` along its null space;
/// * scale: `T_z = T̄_z + Σₖ eₖ,z (Tₖ,z − T̄_z) / Σₖ eₖ,z` with
///   `eₖ,z = Σ x²ₖ,z`, or `T̄_z` where the denominator is zero;
/// * shift: `T̄`.
///
/// Frozen slots are merged as in Task Arithmetic. Returns `W₀ + α·T`.
pub fn merge_lsq(spec: &ModelSpec, w0: &Checkpoint, tvs: &[TaskVector], exemplars: &[Batch], alpha: f64) -> Result<MergeOutput> {
    if !alpha.is_finite() {
        return Err(Error::Config(format!("alpha must be finite, got {alpha}")));
    }
    let w0 = check_vectors(w0, tvs)?;
    spec.check_params(&w0)?;
    let n = check_exemplars(spec, tvs, exemplars)?;
    let traces = collect_traces(spec, &w0, tvs, exemplars)?;
    let ta = merge_task_arithmetic(&w0, tvs, alpha)?;
    let mut merged = Checkpoint::new();
    for (name, e) in w0.iter() {
        let Some(kind) = SlotKind::from_param(e.kind) else {
            merged.insert(name, e.kind, ta.tensor(name)?.clone())?;
            continue;
        };
        let shape = e.tensor.shape().to_vec();
        let t: Vec<f64> = match slot_data(tvs, name, kind)? {
            SlotData::Linear(ts) => {
                let xs = slot_traces(&traces, name)?;
                let grams: Vec<Matrix> = xs.iter().map(gram).collect();
                let flat: Vec<Vec<f64>> = ts.iter().map(|m| m.as_slice().to_vec()).collect();
                let mean = Matrix::from_vec(ts[0].rows(), ts[0].cols(), mean_of(&flat))?;
                let mut a = Matrix::zeros(mean.rows(), mean.rows());
                let mut rhs = Matrix::zeros(mean.rows(), mean.cols());
                for (g, tk) in grams.iter().zip(&ts) {
                    a = a.add(g)?;
                    rhs = rhs.add(&g.matmul(&tk.sub(&mean)?)?)?;
                }
                mean.add(&spd_solve(&a, &rhs)?)?.into_vec()
            }
            SlotData::Vector(ts) => {
                let mean = mean_of(&ts);
                if kind == SlotKind::Scale {
                    let xs = slot_traces(&traces, name)?;
                    (0..mean.len())
                        .map(|z| {
                            let mut num = 0.0;
                            let mut den = 0.0;
                            for (x, tk) in xs.iter().zip(&ts) {
                                let e: f64 = (0..x.rows()).map(|r| x[(r, z)] * x[(r, z)]).sum();
                                num += e * (tk[z] - mean[z]);
                                den += e;
                            }
                            if den > 0.0 { mean[z] + num / den } else { mean[z] }
                        })
                        .collect()
                } else {
                    mean
                }
            }
        };
        let base = e.tensor.to_f64_vec();
        let data = base.iter().zip(&t).map(|(a, v)| a + alpha * v).collect();
        merged.insert(name, e.kind, Tensor::from_f64(shape, data)?)?;
    }
    let mut report = MergeReport::plain(MergeMethod::Lsq, alpha, tvs.len());
    report.exemplars_per_task = Some(n);
    Ok(MergeOutput { merged, operators: Vec::new(), report })
}

/// Dispatches on `cfg.method`. `finetuned[k]` is task `k`'s checkpoint;
/// `exemplars` is only read by `cat` and `lsq`.
pub fn merge(
    spec: &ModelSpec,
    w0: &Checkpoint,
    finetuned: &[Checkpoint],
    exemplars: &[Batch],
    cfg: &MergeConfig,
) -> Result<MergeOutput> {
    cfg.validate()?;
    let tvs = finetuned
        .iter()
        .enumerate()
        .map(|(k, wk)| compute_task_vector(w0, wk, k))
        .collect::<Result<Vec<_>>>()?;
    let plain = |merged: Checkpoint| {
        let mut report = MergeReport::plain(cfg.method, cfg.alpha, tvs.len());
        if cfg.method == MergeMethod::MagnitudeTrim {
            report.magnitude_keep_fraction = Some(cfg.magnitude_keep_fraction);
        }
        if cfg.method == MergeMethod::Average {
            report.alpha = 1.0 / tvs.len().max(1) as f64;
        }
        MergeOutput { merged, operators: Vec::new(), report }
    };
    match cfg.method {
        MergeMethod::Average => {
            check_vectors(w0, &tvs)?;
            Ok(plain(merge_average(finetuned)?))
        }
        MergeMethod::TaskArithmetic => Ok(plain(merge_task_arithmetic(w0, &tvs, cfg.alpha)?)),
        MergeMethod::MagnitudeTrim => {
            Ok(plain(merge_magnitude_trim(w0, &tvs, cfg.magnitude_keep_fraction, cfg.alpha)?))
        }
        MergeMethod::Cat => merge_cat(spec, w0, &tvs, exemplars, cfg),
        MergeMethod::Lsq => merge_lsq(spec, w0, &tvs, exemplars, cfg.alpha),
    }
}

/// Whether CAT trims slots of this kind.
pub fn is_trimmable(kind: ParamKind) -> bool {
    SlotKind::from_param(kind).is_some()
}
