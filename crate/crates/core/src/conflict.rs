//! Knowledge-conflict measurement and layer-wise shift diagnostics.
//!
//! `Δℒₖ|ᵢ = ℒₖ(W₀ + Tₖ + Tᵢ) − ℒₖ(W₀ + Tₖ)` is the increase in task `k`'s
//! loss caused by adding task `i`'s vector. Perturbed parameters are always
//! built as `W₀ + (Tₖ + Tᵢ)`, so swapping the two tasks reproduces the same
//! bits.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::merging::{add_scaled, apply_operators, collect_traces, compute_operators, TaskVector};
use crate::netexec::{loss, per_sample_loss, Batch, LossKind, ModelSpec, Network, Targets};
use crate::speclinalg::Matrix;
use crate::tensorio::Checkpoint;
use crate::trimming::{TrimConfig, TrimOperator};

/// Slack used by the Lemma and Theorem inequality checks.
pub const BOUND_SLACK: f64 = 1e-8;

fn weighted_sum(a: f64, t_k: &Checkpoint, b: f64, t_i: &Checkpoint) -> Result<Checkpoint> {
    // a·Tₖ + b·Tᵢ, evaluated so that swapping the operands is bit-identical.
    let scaled_k = add_scaled(&zeros_like(t_k)?, t_k, a)?;
    add_scaled(&scaled_k, t_i, b)
}

fn zeros_like(c: &Checkpoint) -> Result<Checkpoint> {
    let mut out = Checkpoint::new();
    for (name, e) in c.iter() {
        out.insert(name, e.kind, crate::tensorio::Tensor::zeros(e.tensor.shape().to_vec())?)?;
    }
    Ok(out)
}

fn targets(batch: &Batch) -> Result<&Targets> {
    batch.y.as_ref().ok_or_else(|| Error::Missing("labels for conflict evaluation".into()))
}

fn batch_loss(spec: &ModelSpec, params: &Checkpoint, data: &Batch, kind: LossKind) -> Result<f64> {
    let out = Network::new(spec, params)?.forward(&data.x)?;
    loss(kind, &out, targets(data)?)
}

/// `ℒₖ(W₀ + (a·Tₖ + b·Tᵢ)) − ℒₖ(W₀ + a·Tₖ)` on `data_k`.
pub fn scaled_conflict(
    spec: &ModelSpec,
    w0: &Checkpoint,
    (a, t_k): (f64, &Checkpoint),
    (b, t_i): (f64, &Checkpoint),
    data_k: &Batch,
    kind: LossKind,
) -> Result<f64> {
    let clean = add_scaled(w0, t_k, a)?;
    let perturbed = add_scaled(w0, &weighted_sum(a, t_k, b, t_i)?, 1.0)?;
    Ok(batch_loss(spec, &perturbed, data_k, kind)? - batch_loss(spec, &clean, data_k, kind)?)
}

/// `Δℒₖ|ᵢ`; may be negative.
pub fn knowledge_conflict(
    spec: &ModelSpec,
    w0: &Checkpoint,
    t_k: &Checkpoint,
    t_i: &Checkpoint,
    data_k: &Batch,
    kind: LossKind,
) -> Result<f64> {
    scaled_conflict(spec, w0, (1.0, t_k), (1.0, t_i), data_k, kind)
}

/// `n` evenly spaced values on `[0, 1]`; `n = 1` gives `[0]`.
pub fn unit_grid(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|j| j as f64 / (n - 1) as f64).collect(),
    }
}

/// `values[a][b] = Δℒₖ|ᵢ + Δℒᵢ|ₖ` with the vectors scaled by
/// `alphas_k[a]` and `alphas_i[b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConflictGrid {
    pub alphas_k: Vec<f64>,
    pub alphas_i: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct GridRow {
    alpha_k: String,
    alpha_i: String,
    conflict: String,
}

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

impl ConflictGrid {
    pub fn mean(&self) -> f64 {
        let n = self.alphas_k.len() * self.alphas_i.len();
        self.values.iter().flatten().sum::<f64>() / n as f64
    }

    pub fn transposed(&self) -> ConflictGrid {
        let values = (0..self.alphas_i.len())
            .map(|b| (0..self.alphas_k.len()).map(|a| self.values[a][b]).collect())
            .collect();
        ConflictGrid { alphas_k: self.alphas_i.clone(), alphas_i: self.alphas_k.clone(), values }
    }

    /// Header `alpha_k,alpha_i,conflict`, one row per cell in row-major
    /// order, 17 significant digits.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for (a, row) in self.alphas_k.iter().zip(&self.values) {
            for (b, v) in self.alphas_i.iter().zip(row) {
                w.serialize(GridRow { alpha_k: fmt17(*a), alpha_i: fmt17(*b), conflict: fmt17(*v) })?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is ascii"))
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<ConflictGrid> {
        let mut cells = Vec::new();
        for row in csv::Reader::from_reader(reader).deserialize::<GridRow>() {
            let row = row?;
            let parse = |s: &str| s.parse::<f64>().map_err(|_| Error::Config(format!("bad number {s:?} in grid csv")));
            cells.push((parse(&row.alpha_k)?, parse(&row.alpha_i)?, parse(&row.conflict)?));
        }
        let mut alphas_i = Vec::new();
        for c in &cells {
            if alphas_i.first().is_some_and(|&f: &f64| f.to_bits() == c.1.to_bits()) {
                break;
            }
            alphas_i.push(c.1);
        }
        if alphas_i.is_empty() || cells.len() % alphas_i.len() != 0 {
            return Err(Error::Config(format!("{} grid cells do not form a rectangle", cells.len())));
        }
        let alphas_k: Vec<f64> = cells.iter().step_by(alphas_i.len()).map(|c| c.0).collect();
        let mut values = Vec::new();
        for (a, chunk) in cells.chunks(alphas_i.len()).enumerate() {
            for (b, c) in chunk.iter().enumerate() {
                if c.0.to_bits() != alphas_k[a].to_bits() || c.1.to_bits() != alphas_i[b].to_bits() {
                    return Err(Error::Config(format!("grid csv row {} is out of row-major order", a * alphas_i.len() + b + 1)));
                }
            }
            values.push(chunk.iter().map(|c| c.2).collect());
        }
        Ok(ConflictGrid { alphas_k, alphas_i, values })
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<ConflictGrid> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Operators for the two-task problem `{k, i}`: task `k` is index 0, task
/// `i` is index 1.
pub fn pair_operators(
    spec: &ModelSpec,
    w0: &Checkpoint,
    t_k: &Checkpoint,
    t_i: &Checkpoint,
    exemplars: [&Batch; 2],
    trim: &TrimConfig,
) -> Result<Vec<TrimOperator>> {
    let tvs = [TaskVector { task: 0, params: t_k.clone() }, TaskVector { task: 1, params: t_i.clone() }];
    let batches = [exemplars[0].clone(), exemplars[1].clone()];
    if batches[0].len() != batches[1].len() {
        return Err(Error::Config("exemplar counts must match".into()));
    }
    let traces = collect_traces(spec, &w0.widened(), &tvs, &batches)?;
    compute_operators(&w0.widened(), &tvs, &traces, trim)
}

/// Applies two-task operators (see [`pair_operators`]) to `(Tₖ, Tᵢ)`.
pub fn trim_pair(t_k: &Checkpoint, t_i: &Checkpoint, ops: &[TrimOperator]) -> Result<(Checkpoint, Checkpoint)> {
    let tvs = [TaskVector { task: 0, params: t_k.clone() }, TaskVector { task: 1, params: t_i.clone() }];
    let (mut edited, _) = apply_operators(&tvs, ops)?;
    let t_i = edited.pop().expect("two vectors").params;
    let t_k = edited.pop().expect("two vectors").params;
    Ok((t_k, t_i))
}

/// Summed two-sided conflict over an `alphas_k × alphas_i` grid. With
/// `edit`, both vectors are trimmed by the two-task operators first.
#[allow(clippy::too_many_arguments)]
pub fn conflict_grid(
    spec: &ModelSpec,
    w0: &Checkpoint,
    t_k: &Checkpoint,
    t_i: &Checkpoint,
    datasets: [&Batch; 2],
    alphas_k: &[f64],
    alphas_i: &[f64],
    kind: LossKind,
    edit: Option<&[TrimOperator]>,
) -> Result<ConflictGrid> {
    if alphas_k.is_empty() || alphas_i.is_empty() {
        return Err(Error::Config("conflict grid axes must be non-empty".into()));
    }
    let (t_k, t_i) = match edit {
        Some(ops) => trim_pair(t_k, t_i, ops)?,
        None => (t_k.clone(), t_i.clone()),
    };
    let cells: Vec<(f64, f64)> = alphas_k.iter().flat_map(|&a| alphas_i.iter().map(move |&b| (a, b))).collect();
    let flat = cells
        .par_iter()
        .map(|&(a, b)| {
            let ki = scaled_conflict(spec, w0, (a, &t_k), (b, &t_i), datasets[0], kind)?;
            let ik = scaled_conflict(spec, w0, (b, &t_i), (a, &t_k), datasets[1], kind)?;
            Ok(ki + ik)
        })
        .collect::<Result<Vec<f64>>>()?;
    let values = flat.chunks(alphas_i.len()).map(<[f64]>::to_vec).collect();
    Ok(ConflictGrid { alphas_k: alphas_k.to_vec(), alphas_i: alphas_i.to_vec(), values })
}

/// Shift statistics of one layer, averaged over exemplars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerShift {
    pub layer: usize,
    /// Mean ‖Δfˡ‖: both parameter sets run through layer `l`.
    pub feat_shift: f64,
    /// Mean ‖Δf̂ˡ‖: only layer `l` perturbed, on the clean prefix's input.
    pub local_shift: f64,
    /// Largest output/input difference ratio of layer `l` under the
    /// perturbed parameters.
    pub gamma_hat: f64,
    /// Largest `‖Δfˡ‖ − γ̂ₗ‖Δfˡ⁻¹‖ − ‖Δf̂ˡ‖` over exemplars.
    pub max_violation: f64,
    pub lemma_holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerShiftReport {
    pub layers: Vec<LayerShift>,
    /// Per exemplar, per layer: ‖Δf̂ˡ‖.
    #[serde(skip)]
    pub local_norms: Vec<Vec<f64>>,
    /// Per exemplar: ‖Δf^L‖ at the output.
    #[serde(skip)]
    pub output_shift: Vec<f64>,
}

impl LayerShiftReport {
    pub fn all_hold(&self) -> bool {
        self.layers.iter().all(|l| l.lemma_holds)
    }
}

fn row_diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Largest `‖f(u) − f(v)‖ / ‖u − v‖` over all pairs of rows of `inputs`,
/// skipping identical inputs.
fn lipschitz_estimate(inputs: &Matrix, outputs: &Matrix) -> f64 {
    let n = inputs.rows();
    (0..n)
        .into_par_iter()
        .map(|p| {
            let mut best = 0.0f64;
            for q in p + 1..n {
                let din = row_diff_norm(inputs.row(p), inputs.row(q));
                if din > 0.0 {
                    best = best.max(row_diff_norm(outputs.row(p), outputs.row(q)) / din);
                }
            }
            best
        })
        .reduce(|| 0.0, f64::max)
}

fn stack(a: &Matrix, b: &Matrix) -> Matrix {
    let mut data = a.as_slice().to_vec();
    data.extend_from_slice(b.as_slice());
    Matrix::from_vec(a.rows() + b.rows(), a.cols(), data).expect("same width")
}

/// Layer-wise decomposition of the feature shift caused by adding `Tᵢ` to
/// `W₀ + Tₖ`, with per-layer Lipschitz estimates taken over the clean and
/// perturbed inputs of that layer. The check
/// `‖Δfˡ‖ ≤ γ̂ₗ‖Δfˡ⁻¹‖ + ‖Δf̂ˡ‖` is evaluated for every exemplar.
pub fn layer_shift_decomposition(
    spec: &ModelSpec,
    w0: &Checkpoint,
    t_k: &Checkpoint,
    t_i: &Checkpoint,
    exemplars: &Batch,
) -> Result<LayerShiftReport> {
    if exemplars.is_empty() {
        return Err(Error::Missing("exemplars for shift decomposition".into()));
    }
    let clean = Network::new(spec, &add_scaled(w0, t_k, 1.0)?)?;
    let pert = Network::new(spec, &add_scaled(w0, &weighted_sum(1.0, t_k, 1.0, t_i)?, 1.0)?)?;
    let n = exemplars.len();
    let mut h = exemplars.x.clone();
    let mut hp = exemplars.x.clone();
    let mut prev_shift = vec![0.0; n];
    let mut layers = Vec::new();
    let mut local_norms = vec![Vec::new(); n];
    for l in 0..clean.num_layers() {
        let next = clean.apply_layer(l, &h)?;
        let next_p = pert.apply_layer(l, &hp)?;
        let local = pert.apply_layer(l, &h)?;
        let inputs = stack(&h, &hp);
        let outputs = stack(&local, &next_p);
        let gamma = lipschitz_estimate(&inputs, &outputs);
        let mut shifts = Vec::with_capacity(n);
        let mut max_violation = f64::NEG_INFINITY;
        let (mut feat_sum, mut local_sum) = (0.0, 0.0);
        for j in 0..n {
            let shift = row_diff_norm(next_p.row(j), next.row(j));
            let local_shift = row_diff_norm(local.row(j), next.row(j));
            max_violation = max_violation.max(shift - gamma * prev_shift[j] - local_shift);
            feat_sum += shift;
            local_sum += local_shift;
            local_norms[j].push(local_shift);
            shifts.push(shift);
        }
        layers.push(LayerShift {
            layer: l,
            feat_shift: feat_sum / n as f64,
            local_shift: local_sum / n as f64,
            gamma_hat: gamma,
            max_violation,
            lemma_holds: max_violation <= BOUND_SLACK,
        });
        prev_shift = shifts;
        h = next;
        hp = next_p;
    }
    Ok(LayerShiftReport { layers, local_norms, output_shift: prev_shift })
}

/// Diagnostic comparison of `|Δℒ|` (task `k`'s loss change when `Tᵢ` is
/// added) against the layer-wise bound `β̂ Σₗ (Π_{m>l} γ̂ₘ) mean‖Δf̂ˡ‖`
/// assembled from empirical estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremCheck {
    pub lhs: f64,
    pub rhs: f64,
    /// Largest per-sample loss-difference / output-difference ratio.
    pub beta_hat: f64,
    pub holds: bool,
}

pub fn theorem_bound_check(
    spec: &ModelSpec,
    w0: &Checkpoint,
    t_k: &Checkpoint,
    t_i: &Checkpoint,
    data_k: &Batch,
    kind: LossKind,
) -> Result<(TheoremCheck, LayerShiftReport)> {
    let y = targets(data_k)?;
    let decomposition = layer_shift_decomposition(spec, w0, t_k, t_i, data_k)?;
    let clean = Network::new(spec, &add_scaled(w0, t_k, 1.0)?)?.forward(&data_k.x)?;
    let pert = Network::new(spec, &add_scaled(w0, &weighted_sum(1.0, t_k, 1.0, t_i)?, 1.0)?)?.forward(&data_k.x)?;
    let lc = per_sample_loss(kind, &clean, y)?;
    let lp = per_sample_loss(kind, &pert, y)?;
    let lhs = (loss(kind, &pert, y)? - loss(kind, &clean, y)?).abs();
    let mut beta: f64 = 0.0;
    for j in 0..data_k.len() {
        let dz = row_diff_norm(pert.row(j), clean.row(j));
        if dz > 0.0 {
            beta = beta.max((lp[j] - lc[j]).abs() / dz);
        }
    }
    let layers = &decomposition.layers;
    let mut rhs = 0.0;
    for l in 0..layers.len() {
        let amplification: f64 = layers[l + 1..].iter().map(|m| m.gamma_hat).product();
        rhs += amplification * layers[l].local_shift;
    }
    rhs *= beta;
    let check = TheoremCheck { lhs, rhs, beta_hat: beta, holds: lhs <= rhs + BOUND_SLACK };
    Ok((check, decomposition))
}

/// One ordered-pair conflict value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairConflict {
    pub k: usize,
    pub i: usize,
    pub delta_loss: f64,
}

/// Conflict diagnostics for a task pair; the bound comparison is a
/// diagnostic built from empirical estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictReport {
    pub pairs: Vec<PairConflict>,
    pub layers: Vec<LayerShift>,
    pub beta_hat: f64,
    pub bound_value: f64,
    pub theorem_diagnostic: TheoremCheck,
}

/// `Δℒ` in both directions plus the layer decomposition and bound
/// diagnostic for `Tᵢ` acting on task `k`.
pub fn conflict_report(
    spec: &ModelSpec,
    w0: &Checkpoint,
    (k, t_k, data_k): (usize, &Checkpoint, &Batch),
    (i, t_i, data_i): (usize, &Checkpoint, &Batch),
    kind: LossKind,
) -> Result<ConflictReport> {
    let pairs = vec![
        PairConflict { k, i, delta_loss: knowledge_conflict(spec, w0, t_k, t_i, data_k, kind)? },
        PairConflict { k: i, i: k, delta_loss: knowledge_conflict(spec, w0, t_i, t_k, data_i, kind)? },
    ];
    let (check, decomposition) = theorem_bound_check(spec, w0, t_k, t_i, data_k, kind)?;
    Ok(ConflictReport {
        pairs,
        layers: decomposition.layers,
        beta_hat: check.beta_hat,
        bound_value: check.rhs,
        theorem_diagnostic: check,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netexec::{Activation, LayerSpec};
    use crate::rng::CounterRng;
    use crate::tensorio::Tensor;

    fn perturb(c: &Checkpoint, rng: &mut CounterRng, scale: f64) -> Checkpoint {
        let mut out = Checkpoint::new();
        for (name, e) in c.iter() {
            let data = (0..e.tensor.numel()).map(|_| scale * rng.normal()).collect();
            out.insert(name, e.kind, Tensor::from_f64(e.tensor.shape().to_vec(), data).unwrap()).unwrap();
        }
        out
    }

    fn instance(seed: u64) -> (ModelSpec, Checkpoint, Checkpoint, Checkpoint, Batch, Batch) {
        let spec = ModelSpec::mlp(3, 4, 2, 3, true, Activation::Gelu);
        let mut rng = CounterRng::new(seed);
        let w0 = spec.init_params(&mut rng).unwrap();
        let t_k = perturb(&w0, &mut rng, 0.3);
        let t_i = perturb(&w0, &mut rng, 0.3);
        let mk = |rng: &mut CounterRng| {
            let x = Matrix::from_vec(6, 3, rng.normals(18)).unwrap();
            Batch::new(x, Some(Targets::Labels((0..6).map(|_| rng.below(3) as u32).collect()))).unwrap()
        };
        let (a, b) = (mk(&mut rng), mk(&mut rng));
        (spec, w0, t_k, t_i, a, b)
    }

    #[test]
    fn zero_vector_gives_zero_conflict() {
        let (spec, w0, t_k, t_i, a, _) = instance(1);
        let zero = zeros_like(&t_i).unwrap();
        assert_eq!(knowledge_conflict(&spec, &w0, &t_k, &zero, &a, LossKind::CrossEntropy).unwrap(), 0.0);
    }

    #[test]
    fn conflict_matches_two_direct_evaluations() {
        let (spec, w0, t_k, t_i, a, _) = instance(2);
        let got = knowledge_conflict(&spec, &w0, &t_k, &t_i, &a, LossKind::CrossEntropy).unwrap();
        let sum = add_scaled(&t_k, &t_i, 1.0).unwrap();
        let p1 = add_scaled(&w0, &sum, 1.0).unwrap();
        let p0 = add_scaled(&w0, &t_k, 1.0).unwrap();
        let l1 = loss(LossKind::CrossEntropy, &crate::netexec::forward(&spec, &p1, &a).unwrap(), a.y.as_ref().unwrap()).unwrap();
        let l0 = loss(LossKind::CrossEntropy, &crate::netexec::forward(&spec, &p0, &a).unwrap(), a.y.as_ref().unwrap()).unwrap();
        assert!((got - (l1 - l0)).abs() < 1e-12);
    }

    #[test]
    fn identical_tasks_have_equal_two_sided_conflicts() {
        let (spec, w0, t_k, _, a, _) = instance(3);
        let x = knowledge_conflict(&spec, &w0, &t_k, &t_k, &a, LossKind::CrossEntropy).unwrap();
        let y = knowledge_conflict(&spec, &w0, &t_k, &t_k, &a, LossKind::CrossEntropy).unwrap();
        assert!((x - y).abs() < 1e-12);
    }

    #[test]
    fn grid_swap_is_transpose_and_single_cell_matches() {
        let (spec, w0, t_k, t_i, a, b) = instance(4);
        let ax = [0.0, 0.5, 1.0];
        let bx = [0.25, 1.0];
        let g = conflict_grid(&spec, &w0, &t_k, &t_i, [&a, &b], &ax, &bx, LossKind::CrossEntropy, None).unwrap();
        let s = conflict_grid(&spec, &w0, &t_i, &t_k, [&b, &a], &bx, &ax, LossKind::CrossEntropy, None).unwrap();
        assert_eq!(g, s.transposed());
        let one = conflict_grid(&spec, &w0, &t_k, &t_i, [&a, &b], &[1.0], &[1.0], LossKind::CrossEntropy, None).unwrap();
        let direct = knowledge_conflict(&spec, &w0, &t_k, &t_i, &a, LossKind::CrossEntropy).unwrap()
            + knowledge_conflict(&spec, &w0, &t_i, &t_k, &b, LossKind::CrossEntropy).unwrap();
        assert!((one.values[0][0] - direct).abs() < 1e-12);
    }

    #[test]
    fn grid_origin_is_zero_and_csv_roundtrips() {
        let (spec, w0, t_k, t_i, a, b) = instance(5);
        let g = conflict_grid(&spec, &w0, &t_k, &t_i, [&a, &b], &unit_grid(1), &unit_grid(1), LossKind::CrossEntropy, None).unwrap();
        assert_eq!(g.values, vec![vec![0.0]]);
        let g = conflict_grid(&spec, &w0, &t_k, &t_i, [&a, &b], &unit_grid(3), &unit_grid(4), LossKind::CrossEntropy, None).unwrap();
        let text = g.to_csv_string().unwrap();
        assert_eq!(text.lines().count(), 13);
        assert!(text.starts_with("alpha_k,alpha_i,conflict\n"));
        let back = ConflictGrid::read_csv(text.as_bytes()).unwrap();
        assert_eq!(back.alphas_k, g.alphas_k);
        assert_eq!(back.alphas_i, g.alphas_i);
        for (r, s) in back.values.iter().flatten().zip(g.values.iter().flatten()) {
            assert_eq!(r.to_bits(), s.to_bits());
        }
    }

    #[test]
    fn unit_grid_values() {
        assert_eq!(unit_grid(11)[3], 0.3);
        assert_eq!(unit_grid(2), vec![0.0, 1.0]);
    }

    #[test]
    fn zero_perturbation_has_no_shift() {
        let (spec, w0, t_k, t_i, a, _) = instance(6);
        let zero = zeros_like(&t_i).unwrap();
        let r = layer_shift_decomposition(&spec, &w0, &t_k, &zero, &a).unwrap();
        assert!(r.layers.iter().all(|l| l.feat_shift == 0.0 && l.local_shift == 0.0));
        let (check, _) = theorem_bound_check(&spec, &w0, &t_k, &zero, &a, LossKind::CrossEntropy).unwrap();
        assert_eq!((check.lhs, check.rhs), (0.0, 0.0));
        assert!(check.holds);
    }

    #[test]
    fn single_linear_layer_shift_is_x_times_t() {
        let spec = ModelSpec {
            input_dim: 2,
            output_dim: 2,
            layers: vec![LayerSpec::Linear { in_dim: 2, out_dim: 2, bias: false, frozen: false }],
        };
        let mut rng = CounterRng::new(9);
        let w0 = spec.init_params(&mut rng).unwrap();
        let t_k = perturb(&w0, &mut rng, 1.0);
        let t_i = perturb(&w0, &mut rng, 1.0);
        let x = Matrix::from_vec(3, 2, rng.normals(6)).unwrap();
        let batch = Batch::new(x.clone(), Some(Targets::Values(Matrix::zeros(3, 2)))).unwrap();
        let r = layer_shift_decomposition(&spec, &w0, &t_k, &t_i, &batch).unwrap();
        let xt = x.matmul(&Matrix::from_tensor(t_i.tensor("layer0.weight").unwrap()).unwrap()).unwrap();
        let expected = (0..3).map(|j| xt.row(j).iter().map(|v| v * v).sum::<f64>().sqrt()).sum::<f64>() / 3.0;
        assert!((r.layers[0].feat_shift - expected).abs() < 1e-12);
        assert!((r.layers[0].local_shift - expected).abs() < 1e-12);
        let (check, _) = theorem_bound_check(&spec, &w0, &t_k, &t_i, &batch, LossKind::Mse).unwrap();
        assert!(check.holds, "{check:?}");
    }

    #[test]
    fn lemma_and_bound_hold_on_random_instances() {
        for seed in 10..13 {
            let (spec, w0, t_k, t_i, a, _) = instance(seed);
            let (check, r) = theorem_bound_check(&spec, &w0, &t_k, &t_i, &a, LossKind::CrossEntropy).unwrap();
            assert!(r.all_hold(), "{:?}", r.layers);
            assert!(check.holds, "{check:?}");
        }
    }
}
