//! Linear treatment-plan optimization: beam weights to voxel doses.
//!
//! A [`PlanProblem`] couples structures (voxel sets with prescription and
//! penalty weights) to a dose-influence matrix and a list of dose-volume
//! objectives. [`build_rtp`] lowers it to a linear program with per-voxel
//! deviation measures, max/mean-dose measures, and CVaR rows that bound the
//! mean dose of the hottest (or coldest) tail of each structure.
//! [`solve_plan`] solves the program and, on infeasibility, re-solves an
//! elastic relaxation to name the dose-volume bounds that cannot hold.

pub mod io;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::lp::{solve_lp, LinearProgram, LpError, LpStatus, Relation, Sense};
use crate::tol::TAU_FEAS;

/// Role of a structure in the plan objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StructureKind {
    Target,
    Oar,
}

/// Per-structure penalty weights; zero disables the corresponding measure.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Weights {
    /// Per-voxel underdose below the prescription.
    #[serde(default)]
    pub underdose: f64,
    /// Per-voxel overdose above the prescription.
    #[serde(default)]
    pub overdose: f64,
    /// Maximum structure dose.
    #[serde(default)]
    pub max: f64,
    /// Mean structure dose.
    #[serde(default)]
    pub mean: f64,
}

/// A named voxel set with its prescription and penalty weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Structure {
    pub name: String,
    pub kind: StructureKind,
    pub voxels: Vec<usize>,
    pub prescribed_dose: f64,
    #[serde(default)]
    pub weights: Weights,
}

/// Dose-volume objective kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DvKind {
    MaxDvh,
    MinDvh,
    MaxDose,
    MinDose,
    Uniform,
    Mean,
}

/// One dose-volume objective row.
///
/// The serialized form mirrors clinical objective tables: `objective_type`,
/// `roi_name`, `roi_type`, `dose`, `weight`, `percentage` (the volume
/// fraction times 100).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DvObjective {
    #[serde(rename = "objective_type")]
    pub kind: DvKind,
    #[serde(rename = "roi_name")]
    pub structure: String,
    pub roi_type: StructureKind,
    #[serde(rename = "dose")]
    pub dose_limit: f64,
    pub weight: f64,
    #[serde(rename = "percentage", with = "percent")]
    pub fraction: f64,
}

mod percent {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(fraction: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(fraction * 100.0)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        f64::deserialize(d).map(|p| p / 100.0)
    }
}

/// A planning problem: structures, beams, dose influence, and objectives.
///
/// `dose_influence` is row-major `n_voxels x n_beams`, in Gy per unit beam
/// intensity. Serialization goes through [`io`], which keeps the matrix in a
/// separate binary or CSV file.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanProblem {
    pub structures: Vec<Structure>,
    pub n_beams: usize,
    pub n_voxels: usize,
    pub dose_influence: Vec<f64>,
    pub objectives: Vec<DvObjective>,
}

/// A solved plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub beam_weights: Vec<f64>,
    pub voxel_doses: Vec<f64>,
    pub objective_value: f64,
    pub cvar_auxiliaries: Vec<CvarAux>,
}

/// Auxiliary variables of one CVaR row in a solved plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvarAux {
    pub structure: String,
    pub fraction: f64,
    pub bound_kind: BoundKind,
    pub gamma: f64,
    pub d_bar: Vec<f64>,
}

/// Which tail a CVaR row bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundKind {
    /// Mean of the hottest tail stays below the limit.
    Upper,
    /// Mean of the coldest tail stays above the limit.
    Lower,
}

/// Where one CVaR row lives inside the built program.
#[derive(Debug, Clone, PartialEq)]
pub struct DvhRowHandle {
    pub structure: String,
    pub fraction: f64,
    pub bound_kind: BoundKind,
    pub limit: f64,
    pub weight: f64,
    /// Index of the bounding row itself.
    pub row: usize,
    pub gamma_col: usize,
    pub dbar_cols: Range<usize>,
    pub voxels: Vec<usize>,
}

/// A group of hard per-voxel or mean rows emitted for one objective.
#[derive(Debug, Clone, PartialEq)]
pub struct HardRowGroup {
    pub structure: String,
    pub fraction: f64,
    pub limit: f64,
    pub upper: bool,
    pub rows: Range<usize>,
}

/// Column layout of the built program.
#[derive(Debug, Clone, PartialEq)]
pub struct VarMap {
    pub dose: Range<usize>,
    pub beam: Range<usize>,
    pub total: usize,
}

/// The lowered program plus the bookkeeping needed to address its rows.
#[derive(Debug, Clone)]
pub struct RtpModel {
    pub lp: LinearProgram,
    pub vars: VarMap,
    pub dvh_rows: Vec<DvhRowHandle>,
    pub hard_groups: Vec<HardRowGroup>,
    pub warnings: Vec<String>,
}

/// One unsatisfiable dose-volume bound found by the elastic re-solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DvhViolation {
    pub structure: String,
    pub fraction: f64,
    pub limit: f64,
    pub excess: f64,
}

/// Errors from problem validation, lowering, and solving.
#[derive(Debug, thiserror::Error)]
pub enum RtpError {
    #[error("dose-influence matrix has {got} entries, expected {expected}")]
    MatrixShape { got: usize, expected: usize },
    #[error("dose-influence matrix entries must be finite and non-negative")]
    BadMatrix,
    #[error("structure {structure} references voxel {voxel}, but the matrix has {n_voxels}")]
    VoxelOutOfRange { structure: String, voxel: usize, n_voxels: usize },
    #[error("structure {name} has no voxels")]
    EmptyVoxels { name: String },
    #[error("at least one target structure is required")]
    NoTargetStructure,
    #[error("structure {name}: prescribed dose and weights must be non-negative and finite")]
    BadStructureNumbers { name: String },
    #[error("objective on {structure}: dose limit and weight must be non-negative and finite")]
    BadObjectiveNumbers { structure: String },
    #[error("objective fraction must lie in (0, 1], got {value}")]
    FractionRange { value: f64 },
    #[error("objective references unknown structure {name}")]
    UnknownStructure { name: String },
    #[error("objective on {name} declares a roi_type that disagrees with the structure")]
    RoiTypeMismatch { name: String },
    #[error("tail fraction must lie strictly between 0 and 1, got {alpha}")]
    AlphaRange { alpha: f64 },
    #[error("doses must be non-empty")]
    EmptyDoses,
    #[error("dose-volume bounds cannot all hold: {0:?}", )]
    InfeasibleDvh(Vec<DvhViolation>),
    #[error("planning program is infeasible outside its dose-volume rows")]
    Infeasible,
    #[error("planning program is unbounded; check objective weights")]
    Unbounded,
    #[error(transparent)]
    Lp(#[from] LpError),
}

impl PlanProblem {
    /// Dose-influence entry for `voxel` under `beam`.
    pub fn influence(&self, voxel: usize, beam: usize) -> f64 {
        self.dose_influence[voxel * self.n_beams + beam]
    }

    /// Finds a structure by name.
    pub fn structure(&self, name: &str) -> Option<&Structure> {
        self.structures.iter().find(|s| s.name == name)
    }

    /// Doses of one structure's voxels drawn from a full dose vector.
    pub fn structure_doses(&self, structure: &Structure, doses: &[f64]) -> Vec<f64> {
        structure.voxels.iter().map(|&v| doses[v]).collect()
    }

    /// Checks all problem invariants.
    pub fn validate(&self) -> Result<(), RtpError> {
        let expected = self.n_voxels * self.n_beams;
        if self.dose_influence.len() != expected {
            return Err(RtpError::MatrixShape { got: self.dose_influence.len(), expected });
        }
        if self.dose_influence.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(RtpError::BadMatrix);
        }
        if !self.structures.iter().any(|s| s.kind == StructureKind::Target) {
            return Err(RtpError::NoTargetStructure);
        }
        for s in &self.structures {
            if s.voxels.is_empty() {
                return Err(RtpError::EmptyVoxels { name: s.name.clone() });
            }
            for &v in &s.voxels {
                if v >= self.n_voxels {
                    return Err(RtpError::VoxelOutOfRange {
                        structure: s.name.clone(),
                        voxel: v,
                        n_voxels: self.n_voxels,
                    });
                }
            }
            let w = &s.weights;
            let ok = [s.prescribed_dose, w.underdose, w.overdose, w.max, w.mean]
                .iter()
                .all(|v| v.is_finite() && *v >= 0.0);
            if !ok {
                return Err(RtpError::BadStructureNumbers { name: s.name.clone() });
            }
        }
        for o in &self.objectives {
            let s = self
                .structure(&o.structure)
                .ok_or_else(|| RtpError::UnknownStructure { name: o.structure.clone() })?;
            if s.kind != o.roi_type {
                return Err(RtpError::RoiTypeMismatch { name: o.structure.clone() });
            }
            if !(o.fraction > 0.0 && o.fraction <= 1.0) {
                return Err(RtpError::FractionRange { value: o.fraction });
            }
            if !o.dose_limit.is_finite()
                || o.dose_limit < 0.0
                || !o.weight.is_finite()
                || o.weight < 0.0
            {
                return Err(RtpError::BadObjectiveNumbers { structure: o.structure.clone() });
            }
        }
        Ok(())
    }
}

/// Mean dose of the hottest `1 - alpha` fraction, with fractional voxel
/// counts: the tail holds exactly `(1 - alpha) * n` voxels, the boundary
/// voxel contributing pro rata.
pub fn cvar_value(doses: &[f64], alpha: f64) -> Result<f64, RtpError> {
    tail_mean(doses, alpha, true)
}

/// Mean dose of the coldest `1 - alpha` fraction, the mirror of
/// [`cvar_value`] used by coverage bounds.
pub fn lower_cvar_value(doses: &[f64], alpha: f64) -> Result<f64, RtpError> {
    tail_mean(doses, alpha, false)
}

fn tail_mean(doses: &[f64], alpha: f64, hottest: bool) -> Result<f64, RtpError> {
    if doses.is_empty() {
        return Err(RtpError::EmptyDoses);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(RtpError::AlphaRange { alpha });
    }
    let mut sorted = doses.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if hottest {
        sorted.reverse();
    }
    let k = (1.0 - alpha) * sorted.len() as f64;
    let whole = (k.floor() as usize).min(sorted.len());
    let mut sum: f64 = sorted[..whole].iter().sum();
    let rest = k - whole as f64;
    if rest > 0.0 && whole < sorted.len() {
        sum += rest * sorted[whole];
    }
    Ok(sum / k)
}

/// The scalar minimizing the upper-tail excess form, with its per-voxel
/// excesses: the canonical auxiliary assignment for an upper CVaR row.
pub fn cvar_minimizer(doses: &[f64], alpha: f64) -> Result<(f64, Vec<f64>), RtpError> {
    if doses.is_empty() {
        return Err(RtpError::EmptyDoses);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(RtpError::AlphaRange { alpha });
    }
    let denom = (1.0 - alpha) * doses.len() as f64;
    let eval = |g: f64| g + doses.iter().map(|d| (d - g).max(0.0)).sum::<f64>() / denom;
    let gamma = doses
        .iter()
        .copied()
        .min_by(|a, b| eval(*a).partial_cmp(&eval(*b)).unwrap().then(a.partial_cmp(b).unwrap()))
        .unwrap();
    let excess = doses.iter().map(|d| (d - gamma).max(0.0)).collect();
    Ok((gamma, excess))
}

/// The scalar maximizing the lower-tail form, with its per-voxel shortfalls:
/// the canonical auxiliary assignment for a lower CVaR row.
pub fn lower_cvar_maximizer(doses: &[f64], alpha: f64) -> Result<(f64, Vec<f64>), RtpError> {
    if doses.is_empty() {
        return Err(RtpError::EmptyDoses);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(RtpError::AlphaRange { alpha });
    }
    let denom = (1.0 - alpha) * doses.len() as f64;
    let eval = |g: f64| g - doses.iter().map(|d| (g - d).max(0.0)).sum::<f64>() / denom;
    let gamma = doses
        .iter()
        .copied()
        .max_by(|a, b| eval(*a).partial_cmp(&eval(*b)).unwrap().then(b.partial_cmp(a).unwrap()))
        .unwrap();
    let shortfall = doses.iter().map(|d| (gamma - d).max(0.0)).collect();
    Ok((gamma, shortfall))
}

/// Accumulated lowering state while building the program.
struct Builder {
    lp: LinearProgram,
    cost: Vec<f64>,
}

impl Builder {
    fn new(total: usize) -> Self {
        Builder { lp: LinearProgram::new(total, Sense::Minimize), cost: vec![0.0; total] }
    }

    fn push(&mut self, entries: &[(usize, f64)], rel: Relation, rhs: f64) -> usize {
        let mut row = vec![0.0; self.lp.n_vars];
        for &(col, coef) in entries {
            row[col] = coef;
        }
        self.lp.push_constraint(row, rel, rhs);
        self.lp.n_constraints() - 1
    }

    fn nonneg(&mut self, col: usize) {
        self.push(&[(col, 1.0)], Relation::Ge, 0.0);
    }
}

/// Per-voxel deviation block: `aux >= sign * (dose - reference)` rows plus
/// non-negativity, weighted into the objective.
fn deviation_block(
    b: &mut Builder,
    voxels: &[usize],
    dose_base: usize,
    aux_base: usize,
    reference: f64,
    weight: f64,
    underdose: bool,
) {
    for (k, &v) in voxels.iter().enumerate() {
        let aux = aux_base + k;
        if underdose {
            // aux >= reference - dose
            b.push(&[(aux, 1.0), (dose_base + v, 1.0)], Relation::Ge, reference);
        } else {
            // aux >= dose - reference
            b.push(&[(aux, 1.0), (dose_base + v, -1.0)], Relation::Ge, -reference);
        }
        b.nonneg(aux);
        b.cost[aux] += weight;
    }
}

/// Lowers a validated problem to a linear program with addressable rows.
pub fn build_rtp(problem: &PlanProblem) -> Result<RtpModel, RtpError> {
    problem.validate()?;
    let mut warnings = Vec::new();

    // Effective per-structure measure weights, folding in objective kinds
    // that alias a structure-level measure.
    let ns = problem.structures.len();
    let mut max_w: Vec<f64> = problem.structures.iter().map(|s| s.weights.max).collect();
    let mut mean_w: Vec<f64> = problem.structures.iter().map(|s| s.weights.mean).collect();
    // (structure index, reference dose, weight, underdose?, hard?, fraction, upper?)
    struct Emission {
        sidx: usize,
        kind: DvKind,
        limit: f64,
        weight: f64,
        fraction: f64,
    }
    let mut emissions = Vec::new();
    for o in &problem.objectives {
        let sidx = problem.structures.iter().position(|s| s.name == o.structure).unwrap();
        let mut kind = o.kind;
        if kind == DvKind::MaxDvh && o.fraction == 1.0 {
            warnings.push(format!(
                "objective on {}: full-volume upper bound emitted as max-dose rows",
                o.structure
            ));
            kind = DvKind::MaxDose;
        }
        if kind == DvKind::MinDvh && o.fraction == 1.0 {
            warnings.push(format!(
                "objective on {}: full-volume lower bound emitted as min-dose rows",
                o.structure
            ));
            kind = DvKind::MinDose;
        }
        match kind {
            DvKind::MaxDose => max_w[sidx] += o.weight,
            DvKind::Mean => mean_w[sidx] += o.weight,
            _ => {}
        }
        emissions.push(Emission { sidx, kind, limit: o.dose_limit, weight: o.weight, fraction: o.fraction });
    }

    // Column layout: doses, beams, then auxiliary blocks in emission order.
    let nv = problem.n_voxels;
    let nb = problem.n_beams;
    let mut next = nv + nb;
    let mut alloc = |count: usize| -> usize {
        let start = next;
        next += count;
        start
    };
    struct StructureCols {
        under: Option<usize>,
        over: Option<usize>,
        zmax: Option<usize>,
        mean: Option<usize>,
    }
    let mut scols = Vec::with_capacity(ns);
    for (i, s) in problem.structures.iter().enumerate() {
        let n = s.voxels.len();
        scols.push(StructureCols {
            under: (s.weights.underdose > 0.0).then(|| alloc(n)),
            over: (s.weights.overdose > 0.0).then(|| alloc(n)),
            zmax: (max_w[i] > 0.0).then(|| alloc(1)),
            mean: (mean_w[i] > 0.0).then(|| alloc(1)),
        });
    }
    struct EmissionCols {
        under: Option<usize>,
        over: Option<usize>,
        gamma: Option<usize>,
        dbar: Option<usize>,
    }
    let mut ecols = Vec::with_capacity(emissions.len());
    for e in &emissions {
        let n = problem.structures[e.sidx].voxels.len();
        let (mut under, mut over, mut gamma, mut dbar) = (None, None, None, None);
        match e.kind {
            DvKind::Uniform => {
                if e.weight > 0.0 {
                    under = Some(alloc(n));
                    over = Some(alloc(n));
                }
            }
            DvKind::MinDose => {
                if e.weight > 0.0 {
                    under = Some(alloc(n));
                }
            }
            DvKind::MaxDvh | DvKind::MinDvh => {
                gamma = Some(alloc(1));
                dbar = Some(alloc(n));
            }
            DvKind::MaxDose | DvKind::Mean => {}
        }
        ecols.push(EmissionCols { under, over, gamma, dbar });
    }
    let total = next;
    let mut b = Builder::new(total);

    // Dose coupling and sign rows.
    for v in 0..nv {
        let mut entries = vec![(v, 1.0)];
        for beam in 0..nb {
            let d = problem.influence(v, beam);
            if d != 0.0 {
                entries.push((nv + beam, -d));
            }
        }
        b.push(&entries, Relation::Eq, 0.0);
    }
    for v in 0..nv {
        b.nonneg(v);
    }
    for beam in 0..nb {
        b.nonneg(nv + beam);
    }

    // Structure-level measures.
    for (i, s) in problem.structures.iter().enumerate() {
        if let Some(base) = scols[i].under {
            deviation_block(&mut b, &s.voxels, 0, base, s.prescribed_dose, s.weights.underdose, true);
        }
        if let Some(base) = scols[i].over {
            deviation_block(&mut b, &s.voxels, 0, base, s.prescribed_dose, s.weights.overdose, false);
        }
        if let Some(z) = scols[i].zmax {
            for &v in &s.voxels {
                b.push(&[(z, 1.0), (v, -1.0)], Relation::Ge, 0.0);
            }
            b.nonneg(z);
            b.cost[z] += max_w[i];
        }
        if let Some(m) = scols[i].mean {
            let inv = 1.0 / s.voxels.len() as f64;
            let mut entries = vec![(m, 1.0)];
            for &v in &s.voxels {
                entries.push((v, -inv));
            }
            b.push(&entries, Relation::Eq, 0.0);
            b.nonneg(m);
            b.cost[m] += mean_w[i];
        }
    }

    // Objective emissions: soft deviation blocks, hard rows, CVaR rows.
    let mut dvh_rows = Vec::new();
    let mut hard_groups = Vec::new();
    for (e, cols) in emissions.iter().zip(&ecols) {
        let s = &problem.structures[e.sidx];
        match e.kind {
            DvKind::Uniform => {
                if let (Some(u), Some(o)) = (cols.under, cols.over) {
                    deviation_block(&mut b, &s.voxels, 0, u, e.limit, e.weight, true);
                    deviation_block(&mut b, &s.voxels, 0, o, e.limit, e.weight, false);
                }
            }
            DvKind::MinDose => {
                if let Some(u) = cols.under {
                    deviation_block(&mut b, &s.voxels, 0, u, e.limit, e.weight, true);
                }
                let start = b.lp.n_constraints();
                for &v in &s.voxels {
                    b.push(&[(v, 1.0)], Relation::Ge, e.limit);
                }
                hard_groups.push(HardRowGroup {
                    structure: s.name.clone(),
                    fraction: e.fraction,
                    limit: e.limit,
                    upper: false,
                    rows: start..b.lp.n_constraints(),
                });
            }
            DvKind::MaxDose => {
                let start = b.lp.n_constraints();
                for &v in &s.voxels {
                    b.push(&[(v, 1.0)], Relation::Le, e.limit);
                }
                hard_groups.push(HardRowGroup {
                    structure: s.name.clone(),
                    fraction: e.fraction,
                    limit: e.limit,
                    upper: true,
                    rows: start..b.lp.n_constraints(),
                });
            }
            DvKind::Mean => {
                let inv = 1.0 / s.voxels.len() as f64;
                let entries: Vec<(usize, f64)> =
                    s.voxels.iter().map(|&v| (v, inv)).collect();
                let start = b.push(&entries, Relation::Le, e.limit);
                hard_groups.push(HardRowGroup {
                    structure: s.name.clone(),
                    fraction: e.fraction,
                    limit: e.limit,
                    upper: true,
                    rows: start..start + 1,
                });
            }
            DvKind::MaxDvh | DvKind::MinDvh => {
                let upper = e.kind == DvKind::MaxDvh;
                let gamma = cols.gamma.unwrap();
                let dbar = cols.dbar.unwrap();
                let handle = push_cvar_rows(
                    &mut b,
                    s,
                    gamma,
                    dbar,
                    e.fraction,
                    e.limit,
                    e.weight,
                    upper,
                );
                dvh_rows.push(handle);
            }
        }
    }

    b.lp.cost = Some(b.cost);
    Ok(RtpModel {
        lp: b.lp,
        vars: VarMap { dose: 0..nv, beam: nv..nv + nb, total },
        dvh_rows,
        hard_groups,
        warnings,
    })
}

/// Emits one CVaR block: the bounding row, per-voxel linking rows, and
/// non-negativity for the auxiliaries. Returns the row handle.
#[allow(clippy::too_many_arguments)]
fn push_cvar_rows(
    b: &mut Builder,
    s: &Structure,
    gamma: usize,
    dbar: usize,
    fraction: f64,
    limit: f64,
    weight: f64,
    upper: bool,
) -> DvhRowHandle {
    let n = s.voxels.len();
    let coef = 1.0 / ((1.0 - fraction) * n as f64);
    let mut entries = vec![(gamma, 1.0)];
    for k in 0..n {
        entries.push((dbar + k, if upper { coef } else { -coef }));
    }
    let row = if upper {
        b.push(&entries, Relation::Le, limit)
    } else {
        b.push(&entries, Relation::Ge, limit)
    };
    for (k, &v) in s.voxels.iter().enumerate() {
        if upper {
            // excess >= dose - gamma
            b.push(&[(dbar + k, 1.0), (v, -1.0), (gamma, 1.0)], Relation::Ge, 0.0);
        } else {
            // shortfall >= gamma - dose
            b.push(&[(dbar + k, 1.0), (v, 1.0), (gamma, -1.0)], Relation::Ge, 0.0);
        }
        b.nonneg(dbar + k);
    }
    b.nonneg(gamma);
    DvhRowHandle {
        structure: s.name.clone(),
        fraction,
        bound_kind: if upper { BoundKind::Upper } else { BoundKind::Lower },
        limit,
        weight,
        row,
        gamma_col: gamma,
        dbar_cols: dbar..dbar + n,
        voxels: s.voxels.clone(),
    }
}

impl RtpModel {
    /// Adds one CVaR block after the fact; used when an improvement targets a
    /// dose-volume row the problem does not carry yet.
    pub fn add_dvh_row(
        &mut self,
        problem: &PlanProblem,
        structure: &str,
        fraction: f64,
        bound_kind: BoundKind,
        limit: f64,
    ) -> Result<usize, RtpError> {
        let s = problem
            .structure(structure)
            .ok_or_else(|| RtpError::UnknownStructure { name: structure.to_string() })?;
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(RtpError::AlphaRange { alpha: fraction });
        }
        let n = s.voxels.len();
        let gamma = self.vars.total;
        let dbar = gamma + 1;
        self.vars.total += 1 + n;
        self.lp.n_vars = self.vars.total;
        for c in &mut self.lp.constraints {
            c.row.resize(self.vars.total, 0.0);
        }
        let placeholder = LinearProgram::new(0, Sense::Minimize);
        let mut b =
            Builder { lp: std::mem::replace(&mut self.lp, placeholder), cost: Vec::new() };
        let saved_cost = b.lp.cost.take();
        let handle = push_cvar_rows(
            &mut b,
            s,
            gamma,
            dbar,
            fraction,
            limit,
            0.0,
            bound_kind == BoundKind::Upper,
        );
        self.lp = b.lp;
        self.lp.cost = saved_cost.map(|mut c| {
            c.resize(self.vars.total, 0.0);
            c
        });
        self.dvh_rows.push(handle);
        Ok(self.dvh_rows.len() - 1)
    }

    /// Extracts a plan from a full variable assignment.
    pub fn extract_plan(&self, x: &[f64], objective_value: f64) -> Plan {
        let cvar_auxiliaries = self
            .dvh_rows
            .iter()
            .map(|h| CvarAux {
                structure: h.structure.clone(),
                fraction: h.fraction,
                bound_kind: h.bound_kind,
                gamma: x[h.gamma_col],
                d_bar: x[h.dbar_cols.clone()].to_vec(),
            })
            .collect();
        Plan {
            beam_weights: x[self.vars.beam.clone()].to_vec(),
            voxel_doses: x[self.vars.dose.clone()].to_vec(),
            objective_value,
            cvar_auxiliaries,
        }
    }

    /// Embeds a plan back into a full variable assignment, choosing canonical
    /// values for every auxiliary: deviations and tail excesses exactly at
    /// their defining lower bounds.
    pub fn embed_plan(&self, plan: &Plan) -> Vec<f64> {
        let mut x = vec![0.0; self.vars.total];
        x[self.vars.dose.clone()].copy_from_slice(&plan.voxel_doses);
        x[self.vars.beam.clone()].copy_from_slice(&plan.beam_weights);
        // Auxiliaries are reconstructed from the rows themselves: every
        // non-dose, non-beam variable appears in defining rows with known
        // structure. Walk the emitted handles first, then satisfy deviation
        // and measure rows by direct evaluation.
        for h in &self.dvh_rows {
            let doses: Vec<f64> = h.voxels.iter().map(|&v| plan.voxel_doses[v]).collect();
            let (gamma, bars) = match h.bound_kind {
                BoundKind::Upper => cvar_minimizer(&doses, h.fraction).expect("valid fraction"),
                BoundKind::Lower => {
                    lower_cvar_maximizer(&doses, h.fraction).expect("valid fraction")
                }
            };
            x[h.gamma_col] = gamma;
            x[h.dbar_cols.clone()].copy_from_slice(&bars);
        }
        // Remaining auxiliaries (deviation blocks, max, mean) are identified
        // by scanning rows that define them against doses.
        for c in &self.lp.constraints {
            let aux_cols: Vec<usize> = c
                .row
                .iter()
                .enumerate()
                .filter(|(col, &v)| {
                    v != 0.0
                        && *col >= self.vars.beam.end
                        && !self
                            .dvh_rows
                            .iter()
                            .any(|h| *col == h.gamma_col || h.dbar_cols.contains(col))
                })
                .map(|(col, _)| col)
                .collect();
            if aux_cols.len() != 1 {
                continue;
            }
            let aux = aux_cols[0];
            let coef = c.row[aux];
            let rest: f64 = c
                .row
                .iter()
                .enumerate()
                .filter(|(col, _)| *col != aux)
                .map(|(col, &v)| v * x.get(col).copied().unwrap_or(0.0))
                .sum();
            // aux appears as coef * aux + rest (rel) rhs; tight value:
            let bound = (c.rhs - rest) / coef;
            match c.rel {
                Relation::Ge if coef > 0.0 => x[aux] = x[aux].max(bound),
                Relation::Eq => x[aux] = bound,
                _ => {}
            }
        }
        x
    }
}

/// Solves a problem end to end; infeasibility is diagnosed per dose-volume
/// bound via an elastic re-solve.
pub fn solve_plan(problem: &PlanProblem) -> Result<Plan, RtpError> {
    let model = build_rtp(problem)?;
    solve_model(problem, &model)
}

/// Solves an already-built model.
pub fn solve_model(_problem: &PlanProblem, model: &RtpModel) -> Result<Plan, RtpError> {
    let sol = solve_lp(&model.lp)?;
    match sol.status {
        LpStatus::Optimal => Ok(model.extract_plan(&sol.x, sol.objective)),
        LpStatus::Unbounded => Err(RtpError::Unbounded),
        LpStatus::Infeasible => Err(diagnose_infeasibility(model)),
    }
}

/// Re-solves with one elastic slack per dose-volume bound, minimizing total
/// slack; bounds needing positive slack are reported with their excess.
fn diagnose_infeasibility(model: &RtpModel) -> RtpError {
    let extra = model.dvh_rows.len() + model.hard_groups.len();
    if extra == 0 {
        return RtpError::Infeasible;
    }
    let total = model.vars.total + extra;
    let mut lp = LinearProgram::new(total, Sense::Minimize);
    for c in &model.lp.constraints {
        let mut row = vec![0.0; total];
        row[..model.vars.total].copy_from_slice(&c.row);
        lp.push_constraint(row, c.rel, c.rhs);
    }
    let mut cost = vec![0.0; total];
    let mut labels = Vec::with_capacity(extra);
    for (k, h) in model.dvh_rows.iter().enumerate() {
        let slack = model.vars.total + k;
        let sign = if h.bound_kind == BoundKind::Upper { -1.0 } else { 1.0 };
        lp.constraints[h.row].row[slack] = sign;
        cost[slack] = 1.0;
        labels.push((h.structure.clone(), h.fraction, h.limit));
    }
    for (k, g) in model.hard_groups.iter().enumerate() {
        let slack = model.vars.total + model.dvh_rows.len() + k;
        let sign = if g.upper { -1.0 } else { 1.0 };
        for row in g.rows.clone() {
            lp.constraints[row].row[slack] = sign;
        }
        cost[slack] = 1.0;
        labels.push((g.structure.clone(), g.fraction, g.limit));
    }
    for s in 0..extra {
        let mut row = vec![0.0; total];
        row[model.vars.total + s] = 1.0;
        lp.push_constraint(row, Relation::Ge, 0.0);
    }
    lp.cost = Some(cost);
    match solve_lp(&lp) {
        Ok(sol) if sol.status == LpStatus::Optimal => {
            let violations: Vec<DvhViolation> = labels
                .iter()
                .enumerate()
                .filter(|(k, _)| sol.x[model.vars.total + k] > TAU_FEAS.sqrt())
                .map(|(k, (structure, fraction, limit))| DvhViolation {
                    structure: structure.clone(),
                    fraction: *fraction,
                    limit: *limit,
                    excess: sol.x[model.vars.total + k],
                })
                .collect();
            if violations.is_empty() {
                RtpError::Infeasible
            } else {
                RtpError::InfeasibleDvh(violations)
            }
        }
        _ => RtpError::Infeasible,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_voxel_problem() -> PlanProblem {
        PlanProblem {
            structures: vec![Structure {
                name: "ptv".into(),
                kind: StructureKind::Target,
                voxels: vec![0],
                prescribed_dose: 1.0,
                weights: Weights { underdose: 1.0, overdose: 1.0, ..Weights::default() },
            }],
            n_beams: 1,
            n_voxels: 1,
            dose_influence: vec![1.0],
            objectives: vec![],
        }
    }

    #[test]
    fn trivial_problem_hits_prescription_exactly() {
        let plan = solve_plan(&one_voxel_problem()).unwrap();
        assert!((plan.beam_weights[0] - 1.0).abs() <= 1e-9);
        assert!((plan.voxel_doses[0] - 1.0).abs() <= 1e-9);
        assert!(plan.objective_value.abs() <= 1e-9);
    }

    #[test]
    fn validation_rejects_missing_target() {
        let mut p = one_voxel_problem();
        p.structures[0].kind = StructureKind::Oar;
        assert!(matches!(p.validate(), Err(RtpError::NoTargetStructure)));
    }

    #[test]
    fn tail_means_match_hand_values() {
        assert_eq!(cvar_value(&[10.0, 20.0, 30.0, 40.0], 0.5).unwrap(), 35.0);
        assert!((cvar_value(&[5.0, 5.0, 5.0], 0.4).unwrap() - 5.0).abs() <= 1e-12);
        assert_eq!(cvar_value(&[0.0, 0.0, 0.0, 100.0], 0.75).unwrap(), 100.0);
        assert_eq!(lower_cvar_value(&[10.0, 20.0, 30.0, 40.0], 0.5).unwrap(), 15.0);
    }

    #[test]
    fn alpha_must_be_interior() {
        assert!(matches!(cvar_value(&[1.0], 1.0), Err(RtpError::AlphaRange { .. })));
        assert!(matches!(cvar_value(&[1.0], 0.0), Err(RtpError::AlphaRange { .. })));
    }

    #[test]
    fn objective_json_mirrors_table_columns() {
        let o = DvObjective {
            kind: DvKind::MaxDvh,
            structure: "rectum".into(),
            roi_type: StructureKind::Oar,
            dose_limit: 36.25,
            weight: 5.0,
            fraction: 0.3,
        };
        let json = serde_json::to_string(&o).unwrap();
        assert_eq!(
            json,
            "{\"objective_type\":\"max_dvh\",\"roi_name\":\"rectum\",\"roi_type\":\"oar\",\
             \"dose\":36.25,\"weight\":5.0,\"percentage\":30.0}"
        );
        let back: DvObjective = serde_json::from_str(&json).unwrap();
        assert_eq!(back, o);
    }
}
