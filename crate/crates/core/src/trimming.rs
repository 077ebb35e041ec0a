//! Conflict-aware trimming operators.
//!
//! For a protected task `k` and a parameter slot, an operator `Φₖ` edits the
//! *other* tasks' vectors `Tᵢ` (`i ≠ k`) so that they disturb task `k`'s
//! layer output as little as possible while staying close to their own
//! behaviour on task `i`:
//!
//! * linear weights: `Φₖ(Tᵢ) = Tᵢ − Tᵢ B Bᵀ`, where the orthonormal removal
//!   basis `B` holds the top-`c` eigenvectors of
//!   `G = Σ_{i≠k} Tᵢᵀ (XₖᵀXₖ − λ XᵢᵀXᵢ) Tᵢ`;
//! * scales: `Φₖ(Tᵢ) = Tᵢ − Tᵢ ∘ m`, with `m` selecting the top-`c` entries
//!   of `g_z = Σ_{i≠k} (Σ_{xₖ} (x_{k,z} T_{i,z})² − λ Σ_{xᵢ} (x_{i,z} T_{i,z})²)`;
//! * shifts: the same mask form with `g_z = Σ_{i≠k} T_{i,z}²`, valid when
//!   every task contributes the same number of exemplars and `λ < 1`.
//!
//! Both selections maximize the removed conflict energy minus `λ` times the
//! removed own-task energy; they are exact maximizers of that objective.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::speclinalg::{self, gram, sym_eig, Matrix};
use crate::tensorio::{Checkpoint, ParamKind, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrimConfig {
    /// Weight of the intra-task deviation term.
    pub lambda: f64,
    /// Maximum number of basis vectors / mask entries per operator.
    pub c: usize,
    /// Drop directions whose objective gain is not positive.
    pub positive_only: bool,
}

impl Default for TrimConfig {
    fn default() -> Self {
        Self { lambda: 0.5, c: 2, positive_only: true }
    }
}

impl TrimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    Linear,
    Scale,
    Shift,
}

impl SlotKind {
    pub fn from_param(kind: ParamKind) -> Option<SlotKind> {
        match kind {
            ParamKind::LinearWeight => Some(SlotKind::Linear),
            ParamKind::Scale => Some(SlotKind::Scale),
            ParamKind::Shift => Some(SlotKind::Shift),
            ParamKind::Frozen => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OperatorPayload {
    /// `[d_out, c']`, orthonormal columns.
    LinearBasis(Matrix),
    /// `true` marks an entry that is zeroed.
    Mask(Vec<bool>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrimOperator {
    pub slot: String,
    /// The protected task.
    pub task: usize,
    pub payload: OperatorPayload,
    /// Eigenvalues / scores of the selected components, in selection order.
    pub gains: Vec<f64>,
    /// Full eigenvalue spectrum or score vector, sorted descending.
    pub spectrum: Vec<f64>,
}

impl TrimOperator {
    /// Number of basis columns or mask ones.
    pub fn rank(&self) -> usize {
        match &self.payload {
            OperatorPayload::LinearBasis(b) => b.cols(),
            OperatorPayload::Mask(m) => m.iter().filter(|&&x| x).count(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self.payload {
            OperatorPayload::LinearBasis(_) => "linear_basis",
            OperatorPayload::Mask(_) => "mask",
        }
    }

    /// Applies the operator to one task-vector slot tensor.
    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        match &self.payload {
            OperatorPayload::LinearBasis(b) => {
                if b.cols() == 0 {
                    return Ok(t.clone());
                }
                apply_linear_projection(&Matrix::from_tensor(t)?, b)?.to_tensor()
            }
            OperatorPayload::Mask(m) => {
                if !m.iter().any(|&x| x) {
                    return Ok(t.clone());
                }
                Tensor::from_f64(t.shape().to_vec(), apply_mask(&t.to_f64_vec(), m)?)
            }
        }
    }
}

fn check_task_count(k: usize, n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Config(format!("trimming needs at least 2 tasks, got {n}")));
    }
    if k >= n {
        return Err(Error::Config(format!("protected task {k} out of range for {n} tasks")));
    }
    Ok(())
}

/// `G = Σ_{i≠k} Tᵢᵀ (XₖᵀXₖ − λ XᵢᵀXᵢ) Tᵢ`, symmetrized.
pub fn linear_score_matrix(k: usize, task_vectors: &[Matrix], traces: &[Matrix], lambda: f64) -> Result<Matrix> {
    check_task_count(k, task_vectors.len())?;
    if traces.len() != task_vectors.len() {
        return Err(Error::Missing(format!("{} traces for {} task vectors", traces.len(), task_vectors.len())));
    }
    let (din, dout) = (task_vectors[k].rows(), task_vectors[k].cols());
    for (i, (t, x)) in task_vectors.iter().zip(traces).enumerate() {
        if t.rows() != din || t.cols() != dout {
            return Err(Error::Shape(format!("task {i} vector is {}x{}, expected {din}x{dout}", t.rows(), t.cols())));
        }
        if x.cols() != din {
            return Err(Error::Shape(format!("task {i} trace has {} features, expected {din}", x.cols())));
        }
    }
    let gk = gram(&traces[k]);
    let mut g = Matrix::zeros(dout, dout);
    for i in (0..task_vectors.len()).filter(|&i| i != k) {
        let gi = gram(&traces[i]);
        let middle = gk.sub(&gi.scaled(lambda))?;
        let ti = &task_vectors[i];
        let inner = ti.t_matmul(&middle.matmul(ti)?)?;
        g = g.add(&inner)?;
    }
    g.symmetrized()
}

/// Removal basis for protected task `k` on a linear-weight slot.
pub fn linear_removal_basis(
    k: usize,
    slot: &str,
    task_vectors: &[Matrix],
    traces: &[Matrix],
    cfg: &TrimConfig,
) -> Result<TrimOperator> {
    cfg.validate()?;
    let g = linear_score_matrix(k, task_vectors, traces, cfg.lambda)?;
    let eig = sym_eig(&g)?;
    let basis = speclinalg::top_c_eigvecs(&eig, cfg.c, cfg.positive_only);
    let gains = eig.eigenvalues[..basis.cols()].to_vec();
    Ok(TrimOperator {
        slot: slot.to_string(),
        task: k,
        payload: OperatorPayload::LinearBasis(basis),
        gains,
        spectrum: eig.eigenvalues,
    })
}

/// `T − T B Bᵀ`; an empty basis returns `T` unchanged.
pub fn apply_linear_projection(t: &Matrix, basis: &Matrix) -> Result<Matrix> {
    if basis.rows() != t.cols() {
        return Err(Error::Shape(format!("basis has {} rows, task vector has {} columns", basis.rows(), t.cols())));
    }
    if basis.cols() == 0 {
        return Ok(t.clone());
    }
    let tb = t.matmul(basis)?;
    t.sub(&tb.matmul_t(basis)?)
}

/// Indices of the `c` largest scores (ties: lower index first), keeping only
/// strictly positive scores when `positive_only`.
fn top_c_indices(scores: &[f64], c: usize, positive_only: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| match scores[b].total_cmp(&scores[a]) {
        Ordering::Equal => a.cmp(&b),
        o => o,
    });
    order.into_iter().take(c).filter(|&z| !positive_only || scores[z] > 0.0).collect()
}

fn mask_operator(k: usize, slot: &str, scores: Vec<f64>, c: usize, positive_only: bool) -> TrimOperator {
    let picked = top_c_indices(&scores, c, positive_only);
    let mut mask = vec![false; scores.len()];
    for &z in &picked {
        mask[z] = true;
    }
    let gains = picked.iter().map(|&z| scores[z]).collect();
    let mut spectrum = scores;
    spectrum.sort_by(|a, b| b.total_cmp(a));
    TrimOperator { slot: slot.to_string(), task: k, payload: OperatorPayload::Mask(mask), gains, spectrum }
}

fn check_vectors(task_vectors: &[Vec<f64>]) -> Result<usize> {
    let d = task_vectors[0].len();
    if let Some((i, v)) = task_vectors.iter().enumerate().find(|(_, v)| v.len() != d) {
        return Err(Error::Shape(format!("task {i} vector has length {}, expected {d}", v.len())));
    }
    Ok(d)
}

/// `g_z` for a scale slot.
pub fn scale_scores(k: usize, task_vectors: &[Vec<f64>], traces: &[Matrix], lambda: f64) -> Result<Vec<f64>> {
    check_task_count(k, task_vectors.len())?;
    if traces.len() != task_vectors.len() {
        return Err(Error::Missing(format!("{} traces for {} task vectors", traces.len(), task_vectors.len())));
    }
    let d = check_vectors(task_vectors)?;
    if let Some((i, x)) = traces.iter().enumerate().find(|(_, x)| x.cols() != d) {
        return Err(Error::Shape(format!("task {i} trace has {} features, expected {d}", x.cols())));
    }
    // Per-dimension sums of squared features.
    let energy = |x: &Matrix| -> Vec<f64> {
        let mut e = vec![0.0; d];
        for r in 0..x.rows() {
            for (acc, v) in e.iter_mut().zip(x.row(r)) {
                *acc += v * v;
            }
        }
        e
    };
    let ek = energy(&traces[k]);
    let mut g = vec![0.0; d];
    for i in (0..task_vectors.len()).filter(|&i| i != k) {
        let ei = energy(&traces[i]);
        for z in 0..d {
            let t2 = task_vectors[i][z] * task_vectors[i][z];
            g[z] += ek[z] * t2 - lambda * ei[z] * t2;
        }
    }
    Ok(g)
}

/// Removal mask for protected task `k` on a scale slot.
pub fn scale_mask(
    k: usize,
    slot: &str,
    task_vectors: &[Vec<f64>],
    traces: &[Matrix],
    cfg: &TrimConfig,
) -> Result<TrimOperator> {
    cfg.validate()?;
    let g = scale_scores(k, task_vectors, traces, cfg.lambda)?;
    Ok(mask_operator(k, slot, g, cfg.c, cfg.positive_only))
}

/// `g_z = Σ_{i≠k} T_{i,z}²` for a shift slot.
pub fn shift_scores(k: usize, task_vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    check_task_count(k, task_vectors.len())?;
    let d = check_vectors(task_vectors)?;
    let mut g = vec![0.0; d];
    for i in (0..task_vectors.len()).filter(|&i| i != k) {
        for (acc, t) in g.iter_mut().zip(&task_vectors[i]) {
            *acc += t * t;
        }
    }
    Ok(g)
}

/// Removal mask for protected task `k` on a shift slot. Rejects `λ ≥ 1`,
/// where the balanced-data score would change sign. Zero scores are never
/// selected.
pub fn shift_mask(k: usize, slot: &str, task_vectors: &[Vec<f64>], cfg: &TrimConfig) -> Result<TrimOperator> {
    cfg.validate()?;
    if cfg.lambda >= 1.0 {
        return Err(Error::Config(format!(
            "shift trimming requires lambda < 1 (got {}); use a smaller lambda or disable shift trimming",
            cfg.lambda
        )));
    }
    let g = shift_scores(k, task_vectors)?;
    Ok(mask_operator(k, slot, g, cfg.c, true))
}

/// Zeroes entries where the mask is set.
pub fn apply_mask(t: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    if t.len() != mask.len() {
        return Err(Error::Shape(format!("mask length {} vs vector length {}", mask.len(), t.len())));
    }
    Ok(t.iter().zip(mask).map(|(&v, &m)| if m { 0.0 } else { v }).collect())
}

/// Per-slot inputs for operator computation and objective evaluation.
#[derive(Debug, Clone, Copy)]
pub enum SlotInputs<'a> {
    Linear { task_vectors: &'a [Matrix], traces: &'a [Matrix] },
    Scale { task_vectors: &'a [Vec<f64>], traces: &'a [Matrix] },
    /// Traces only supply the per-task sample counts.
    Shift { task_vectors: &'a [Vec<f64>], traces: &'a [Matrix] },
}

/// Computes the operator matching the slot kind.
pub fn compute_operator(k: usize, slot: &str, inputs: SlotInputs<'_>, cfg: &TrimConfig) -> Result<TrimOperator> {
    match inputs {
        SlotInputs::Linear { task_vectors, traces } => linear_removal_basis(k, slot, task_vectors, traces, cfg),
        SlotInputs::Scale { task_vectors, traces } => scale_mask(k, slot, task_vectors, traces, cfg),
        SlotInputs::Shift { task_vectors, .. } => shift_mask(k, slot, task_vectors, cfg),
    }
}

/// The maximization objective an operator is chosen for:
///
/// * linear: `Σ_{i≠k} ‖XₖTᵢBBᵀ‖²_F − λ‖XᵢTᵢBBᵀ‖²_F`
/// * scale: `Σ_{i≠k} Σ_{xₖ}‖xₖ∘Tᵢ∘m‖² − λ Σ_{xᵢ}‖xᵢ∘Tᵢ∘m‖²`
/// * shift: `Σ_{i≠k} nₖ‖Tᵢ∘m‖² − λ nᵢ‖Tᵢ∘m‖²`
pub fn objective_value(k: usize, op: &TrimOperator, inputs: SlotInputs<'_>, lambda: f64) -> Result<f64> {
    match (inputs, &op.payload) {
        (SlotInputs::Linear { task_vectors, traces }, OperatorPayload::LinearBasis(b)) => {
            check_task_count(k, task_vectors.len())?;
            if b.cols() == 0 {
                return Ok(0.0);
            }
            let mut total = 0.0;
            for i in (0..task_vectors.len()).filter(|&i| i != k) {
                // ‖M B Bᵀ‖_F = ‖M B‖_F for orthonormal B.
                let tb = task_vectors[i].matmul(b)?;
                total += traces[k].matmul(&tb)?.frobenius_sq() - lambda * traces[i].matmul(&tb)?.frobenius_sq();
            }
            Ok(total)
        }
        (SlotInputs::Scale { task_vectors, traces }, OperatorPayload::Mask(m)) => {
            check_task_count(k, task_vectors.len())?;
            let energy = |x: &Matrix, t: &[f64]| -> f64 {
                let mut s = 0.0;
                for r in 0..x.rows() {
                    for z in 0..t.len() {
                        if m[z] {
                            let v = x[(r, z)] * t[z];
                            s += v * v;
                        }
                    }
                }
                s
            };
            let mut total = 0.0;
            for i in (0..task_vectors.len()).filter(|&i| i != k) {
                total += energy(&traces[k], &task_vectors[i]) - lambda * energy(&traces[i], &task_vectors[i]);
            }
            Ok(total)
        }
        (SlotInputs::Shift { task_vectors, traces }, OperatorPayload::Mask(m)) => {
            check_task_count(k, task_vectors.len())?;
            let mut total = 0.0;
            for i in (0..task_vectors.len()).filter(|&i| i != k) {
                let masked: f64 = task_vectors[i].iter().zip(m).filter(|(_, &on)| on).map(|(t, _)| t * t).sum();
                total += traces[k].rows() as f64 * masked - lambda * traces[i].rows() as f64 * masked;
            }
            Ok(total)
        }
        _ => Err(Error::Config(format!("operator kind {} does not match slot inputs", op.kind_name()))),
    }
}

/// Packs an operator set into a container: basis matrices as `[d, c']` f64
/// tensors, masks as `[d]` u32 0/1 tensors, named `task{k}/{slot}`. The meta
/// map records operator `n` as `op.{n:06}` → `"<k> <slot> <kind> <d> <c'>"`,
/// which also covers empty bases that have no tensor.
pub fn operators_to_checkpoint(ops: &[TrimOperator]) -> Result<Checkpoint> {
    let mut c = Checkpoint::new();
    for (n, op) in ops.iter().enumerate() {
        if op.slot.contains(char::is_whitespace) {
            return Err(Error::Config(format!("slot name {:?} contains whitespace", op.slot)));
        }
        let name = format!("task{}/{}", op.task, op.slot);
        let (d, rank) = match &op.payload {
            OperatorPayload::LinearBasis(b) => {
                if b.cols() > 0 {
                    c.insert(name, ParamKind::Frozen, b.to_tensor()?)?;
                }
                (b.rows(), b.cols())
            }
            OperatorPayload::Mask(m) => {
                let bits = m.iter().map(|&x| u32::from(x)).collect();
                c.insert(name, ParamKind::Frozen, Tensor::from_u32(vec![m.len()], bits)?)?;
                (m.len(), op.rank())
            }
        };
        c.meta.insert(format!("op.{n:06}"), format!("{} {} {} {d} {rank}", op.task, op.slot, op.kind_name()));
    }
    Ok(c)
}

/// Inverse of [`operators_to_checkpoint`] (gains and spectra are not stored).
pub fn operators_from_checkpoint(c: &Checkpoint) -> Result<Vec<TrimOperator>> {
    let mut ops = Vec::new();
    for (key, value) in c.meta.iter().filter(|(k, _)| k.starts_with("op.")) {
        let bad = || Error::BadHeader(format!("malformed operator record {key:?} = {value:?}"));
        let parts: Vec<&str> = value.split(' ').collect();
        let [task, slot, kind, d, rank] = parts[..] else { return Err(bad()) };
        let task: usize = task.parse().map_err(|_| bad())?;
        let d: usize = d.parse().map_err(|_| bad())?;
        let rank: usize = rank.parse().map_err(|_| bad())?;
        let name = format!("task{task}/{slot}");
        let payload = match kind {
            "linear_basis" if rank == 0 => OperatorPayload::LinearBasis(Matrix::zeros(d, 0)),
            "linear_basis" => OperatorPayload::LinearBasis(Matrix::from_tensor(c.tensor(&name)?)?),
            "mask" => {
                let bits = c.tensor(&name)?.as_u32().ok_or_else(bad)?;
                OperatorPayload::Mask(bits.iter().map(|&b| b != 0).collect())
            }
            _ => return Err(bad()),
        };
        let op = TrimOperator { slot: slot.to_string(), task, payload, gains: Vec::new(), spectrum: Vec::new() };
        if op.rank() != rank {
            return Err(bad());
        }
        ops.push(op);
    }
    Ok(ops)
}
