//! The alternating iteration on Neumann traces of the reconstruction segment.
//!
//! One step maps `φ_k` to `φ_{k+1}`:
//! 1. `w`: Dirichlet `f` on Γ₁, Neumann `φ_k` on Γ₂ (plus auxiliary data); `ψ_k = w|Γ₂`.
//! 2. `v`: Neumann `g` on Γ₁, Dirichlet `ψ_k` on Γ₂ (plus auxiliary data); `φ_{k+1}` = flux of `v` on Γ₂.
//!
//! Flux unknowns live on the Γ₂ nodes that are free in the `w` problem. Nodes
//! of Γ₂ constrained there (endpoints shared with Dirichlet segments) carry
//! zero flux and are excluded from the operator's index set. With this choice
//! the discrete step is an exact affine map `T(φ) = T_l φ + z` on that index
//! set, and `T_l` is self-adjoint in the energy (`*`) inner product.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fem::{
    assemble, picard, weak_residual, Assembly, EllipticCoefficients, Field, FluxRecovery, MixedBvp,
    MixedSystem, PicardSettings, SegmentMass, TraceField, TraceKind,
};
use crate::geometry::{Mesh, SegmentRole};
use crate::sparse::norm_inf;

/// Monotonicity checks tolerate this relative violation.
pub const AUDIT_MARGIN: f64 = -1e-8;

#[derive(Debug, Clone)]
pub struct CauchyProblem {
    pub mesh: Arc<Mesh>,
    pub coefficients: EllipticCoefficients,
    pub cauchy_segment: String,
    pub reconstruction_segment: String,
    /// Dirichlet datum on Γ₁.
    pub f: TraceField,
    /// Neumann datum on Γ₁.
    pub g: TraceField,
    /// Conditions on the auxiliary segments; the trace kind selects the type.
    pub extra_conditions: Vec<TraceField>,
}

impl CauchyProblem {
    /// Builds a problem from a mesh whose segments carry exactly one
    /// Cauchy-data tag and one reconstruction tag.
    pub fn new(
        mesh: Arc<Mesh>,
        coefficients: EllipticCoefficients,
        f: TraceField,
        g: TraceField,
        extra_conditions: Vec<TraceField>,
    ) -> Result<Self> {
        let find = |role: SegmentRole| -> Result<String> {
            let names: Vec<&str> = mesh
                .segments
                .iter()
                .filter(|s| s.tag.role == role)
                .map(|s| s.tag.name.as_str())
                .collect();
            match names.as_slice() {
                [one] => Ok(one.to_string()),
                _ => Err(Error::InvalidArgument(format!(
                    "mesh must carry exactly one {role:?} segment, found {}",
                    names.len()
                ))),
            }
        };
        let problem = Self {
            cauchy_segment: find(SegmentRole::CauchyData)?,
            reconstruction_segment: find(SegmentRole::Reconstruction)?,
            mesh,
            coefficients,
            f,
            g,
            extra_conditions,
        };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<()> {
        let gamma1 = self.mesh.segment(&self.cauchy_segment)?;
        self.mesh.segment(&self.reconstruction_segment)?;
        for (name, t, kind) in [("f", &self.f, TraceKind::Dirichlet), ("g", &self.g, TraceKind::Neumann)] {
            if t.tag != self.cauchy_segment || t.len() != gamma1.len() || t.kind != kind {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be a {kind:?} trace on '{}'",
                    self.cauchy_segment
                )));
            }
        }
        for t in &self.extra_conditions {
            if t.tag == self.cauchy_segment || t.tag == self.reconstruction_segment {
                return Err(Error::InvalidArgument(format!(
                    "auxiliary condition on data segment '{}'",
                    t.tag
                )));
            }
        }
        // every other segment needs a condition; checked by the BVP validator
        self.w_bvp(self.zero_phi()?).validate()?;
        self.v_bvp(self.zero_psi()?).validate()
    }

    pub fn is_linear(&self) -> bool {
        self.coefficients.is_linear()
    }

    pub fn zero_phi(&self) -> Result<TraceField> {
        TraceField::zeros(&self.mesh, &self.reconstruction_segment, TraceKind::Neumann)
    }

    fn zero_psi(&self) -> Result<TraceField> {
        TraceField::zeros(&self.mesh, &self.reconstruction_segment, TraceKind::Dirichlet)
    }

    /// Same geometry and operator with all boundary data set to zero; its
    /// step map is the linear part `T_l`.
    pub fn homogeneous(&self) -> Self {
        Self {
            f: self.f.scaled(0.0),
            g: self.g.scaled(0.0),
            extra_conditions: self.extra_conditions.iter().map(|t| t.scaled(0.0)).collect(),
            ..self.clone()
        }
    }

    pub fn with_g(&self, g: TraceField) -> Self {
        Self { g, ..self.clone() }
    }

    fn extra(&self, kind: TraceKind) -> impl Iterator<Item = TraceField> + '_ {
        self.extra_conditions.iter().filter(move |t| t.kind == kind).cloned()
    }

    /// The first half-step problem with Neumann `phi` on Γ₂.
    pub fn w_bvp(&self, phi: TraceField) -> MixedBvp<'_> {
        let mut bvp = MixedBvp::new(&self.mesh, &self.coefficients).with_dirichlet(self.f.clone());
        bvp.dirichlet.extend(self.extra(TraceKind::Dirichlet));
        bvp.neumann.push(phi);
        bvp.neumann.extend(self.extra(TraceKind::Neumann));
        bvp
    }

    /// The second half-step problem with Dirichlet `psi` on Γ₂.
    pub fn v_bvp(&self, psi: TraceField) -> MixedBvp<'_> {
        let mut bvp = MixedBvp::new(&self.mesh, &self.coefficients).with_dirichlet(psi);
        bvp.dirichlet.extend(self.extra(TraceKind::Dirichlet));
        bvp.neumann.push(self.g.clone());
        bvp.neumann.extend(self.extra(TraceKind::Neumann));
        bvp
    }
}

/// Result of one step of the iteration.
#[derive(Debug, Clone)]
pub struct Step {
    pub psi: TraceField,
    pub phi_next: TraceField,
    pub w: Field,
    pub v: Field,
}

/// Both half-step systems factored once, with the data-dependent loads
/// precomputed.
pub struct KmfSolver<'p> {
    problem: &'p CauchyProblem,
    assembly: Assembly,
    w_system: MixedSystem,
    v_system: MixedSystem,
    w_dirichlet: Vec<f64>,
    w_load: Vec<f64>,
    v_dirichlet: Vec<f64>,
    v_load: Vec<f64>,
    gamma2_nodes: Vec<usize>,
    gamma2_mass: SegmentMass,
    flux: FluxRecovery,
    dofs: Vec<usize>,
    pub picard: PicardSettings,
}

impl<'p> KmfSolver<'p> {
    pub fn new(problem: &'p CauchyProblem) -> Result<Self> {
        problem.validate()?;
        let mesh = &*problem.mesh;
        let assembly = assemble(mesh, &problem.coefficients)?;
        let w_bvp = problem.w_bvp(problem.zero_phi()?);
        let v_bvp = problem.v_bvp(problem.zero_psi()?);
        let w_system = MixedSystem::new(mesh, &assembly, &w_bvp.dirichlet_tags())?;
        let v_system = MixedSystem::new(mesh, &assembly, &v_bvp.dirichlet_tags())?;
        let gamma2 = &problem.reconstruction_segment;
        let flux = FluxRecovery::new(mesh, &assembly, gamma2, |n| w_system.is_constrained(n))?;
        let dofs = flux.kept_positions().to_vec();
        Ok(Self {
            problem,
            w_dirichlet: w_bvp.dirichlet_values()?,
            w_load: w_bvp.linear_load(&assembly, Some(gamma2))?,
            v_dirichlet: v_bvp.dirichlet_values()?,
            v_load: v_bvp.linear_load(&assembly, None)?,
            gamma2_nodes: mesh.segment(gamma2)?.nodes.clone(),
            gamma2_mass: assembly.segment_mass(gamma2)?.clone(),
            assembly,
            w_system,
            v_system,
            flux,
            dofs,
            picard: PicardSettings::default(),
        })
    }

    pub fn problem(&self) -> &CauchyProblem {
        self.problem
    }

    pub fn assembly(&self) -> &Assembly {
        &self.assembly
    }

    /// Positions along Γ₂ that carry flux unknowns.
    pub fn dof_positions(&self) -> &[usize] {
        &self.dofs
    }

    pub fn gamma2_mass(&self) -> &SegmentMass {
        &self.gamma2_mass
    }

    /// Zeroes flux values outside the unknown set.
    pub fn project(&self, phi: &TraceField) -> TraceField {
        let mut out = phi.clone();
        out.kind = TraceKind::Neumann;
        out.values.iter_mut().for_each(|v| *v = 0.0);
        for &k in &self.dofs {
            out.values[k] = phi.values[k];
        }
        out
    }

    fn check_phi(&self, phi: &TraceField) -> Result<()> {
        if phi.tag != self.problem.reconstruction_segment || phi.len() != self.gamma2_nodes.len() {
            return Err(Error::InvalidArgument(format!(
                "iterate must be a trace on '{}'",
                self.problem.reconstruction_segment
            )));
        }
        if phi.kind != TraceKind::Neumann {
            return Err(Error::InvalidArgument("iterate must be a Neumann trace".into()));
        }
        Ok(())
    }

    fn solve(&self, system: &MixedSystem, dirichlet: &[f64], load: &[f64], warm: Option<&[f64]>) -> Result<Vec<f64>> {
        match &self.problem.coefficients.semilinear {
            None => system.solve(dirichlet, load),
            Some(s) => {
                let zeros;
                let initial = match warm {
                    Some(w) => w,
                    None => {
                        zeros = vec![0.0; load.len()];
                        &zeros
                    }
                };
                Ok(picard(system, &self.assembly, s, dirichlet, load, initial, self.picard)?.values)
            }
        }
    }

    /// The first half-step: `w` with Neumann `phi` on Γ₂.
    pub fn solve_w(&self, phi: &TraceField, warm: Option<&[f64]>) -> Result<Vec<f64>> {
        self.check_phi(phi)?;
        let phi = self.project(phi);
        let mut load = self.w_load.clone();
        self.gamma2_mass.add_load(&phi.values, &mut load);
        self.solve(&self.w_system, &self.w_dirichlet, &load, warm)
    }

    /// The second half-step: `v` with Dirichlet `psi` on Γ₂, and its flux there.
    pub fn solve_v(&self, psi: &[f64], warm: Option<&[f64]>) -> Result<(Vec<f64>, TraceField)> {
        if psi.len() != self.gamma2_nodes.len() {
            return Err(Error::InvalidArgument(format!(
                "Dirichlet trace has {} values, segment '{}' has {} nodes",
                psi.len(),
                self.problem.reconstruction_segment,
                self.gamma2_nodes.len()
            )));
        }
        let mut dirichlet = self.v_dirichlet.clone();
        for (&n, &v) in self.gamma2_nodes.iter().zip(psi) {
            dirichlet[n] = v;
        }
        let v = self.solve(&self.v_system, &dirichlet, &self.v_load, warm)?;
        let residual = weak_residual(
            &self.assembly,
            self.problem.coefficients.semilinear.as_ref(),
            &v,
            &self.v_load,
        );
        let phi = self.flux.trace(&residual);
        Ok((v, phi))
    }

    /// Neumann start `φ_0` for an iteration begun from a Dirichlet guess `ψ_0`.
    pub fn phi_from_psi(&self, psi: &TraceField) -> Result<TraceField> {
        Ok(self.solve_v(&psi.values, None)?.1)
    }

    pub fn step(&self, phi: &TraceField, warm: Option<(&[f64], &[f64])>) -> Result<Step> {
        let w = self.solve_w(phi, warm.map(|p| p.0))?;
        let psi_values: Vec<f64> = self.gamma2_nodes.iter().map(|&n| w[n]).collect();
        let (v, phi_next) = self.solve_v(&psi_values, warm.map(|p| p.1))?;
        let tag = self.problem.reconstruction_segment.clone();
        Ok(Step {
            psi: TraceField {
                tag,
                kind: TraceKind::Dirichlet,
                values: psi_values,
            },
            phi_next,
            w: Field { values: w },
            v: Field { values: v },
        })
    }

    /// Relative `L²(Γ₂)` distance of `a` from `reference`.
    pub fn relative_l2(&self, a: &TraceField, reference: &TraceField) -> f64 {
        let d: Vec<f64> = a.values.iter().zip(&reference.values).map(|(x, y)| x - y).collect();
        let den = self.gamma2_mass.inner(&reference.values, &reference.values).sqrt();
        self.gamma2_mass.inner(&d, &d).max(0.0).sqrt() / den.max(f64::MIN_POSITIVE)
    }

    pub fn run(&self, phi0: &TraceField, options: &RunOptions) -> Result<IterationState> {
        if !(options.tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tolerance must be positive, got {}", options.tol)));
        }
        if options.max_iter == 0 {
            return Err(Error::InvalidArgument("max_iter must be at least 1".into()));
        }
        self.check_phi(phi0)?;
        if let Some(r) = &options.reference {
            if r.tag != self.problem.reconstruction_segment || r.len() != phi0.len() {
                return Err(Error::InvalidArgument("reference must be a trace on the reconstruction segment".into()));
            }
        }
        let mut phi = self.project(phi0);
        let mut psi_prev = self.problem.zero_psi()?;
        let mut history = Vec::new();
        let mut iterates = Vec::new();
        if options.keep_iterates {
            iterates.push(phi.clone());
        }
        let mut fields: Option<(Vec<f64>, Vec<f64>)> = None;
        let mut converged = false;
        for k in 0..options.max_iter {
            let warm = fields.as_ref().map(|(w, v)| (w.as_slice(), v.as_slice()));
            let step = self.step(&phi, warm)?;
            let dpsi = step.psi.max_abs_diff(&psi_prev);
            let dphi = step.phi_next.max_abs_diff(&phi);
            let error = options.reference.as_ref().map(|r| match r.kind {
                TraceKind::Dirichlet => self.relative_l2(&step.psi, r),
                TraceKind::Neumann => self.relative_l2(&step.phi_next, r),
            });
            let gap = options.track_gap.then(|| {
                let d: Vec<f64> = step.w.values.iter().zip(&step.v.values).map(|(a, b)| a - b).collect();
                self.assembly.h1_norm(&d)
            });
            if !dpsi.is_finite() || !dphi.is_finite() {
                return Err(Error::SolverFailure {
                    reason: format!("non-finite iterate at step {k}"),
                    residual: f64::NAN,
                });
            }
            history.push(StepRecord {
                k,
                dpsi,
                dphi,
                error,
                gap,
            });
            phi = step.phi_next;
            psi_prev = step.psi;
            if options.keep_iterates {
                iterates.push(phi.clone());
            }
            fields = Some((step.w.values, step.v.values));
            converged = k >= 1 && dpsi <= options.tol;
            if converged && !options.run_to_max {
                break;
            }
        }
        let (w, v) = fields.expect("at least one step");
        Ok(IterationState {
            k: history.len(),
            phi,
            psi: psi_prev,
            history,
            w_field: Field { values: w },
            v_field: Field { values: v },
            converged,
            tol: options.tol,
            iterates,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Dirichlet references are compared with `ψ_k`, Neumann ones with `φ_{k+1}`.
    pub reference: Option<TraceField>,
    pub keep_iterates: bool,
    pub track_gap: bool,
    /// Take all `max_iter` steps; `converged` then reflects the last step.
    pub run_to_max: bool,
}

impl RunOptions {
    pub fn new(tol: f64, max_iter: usize) -> Self {
        Self {
            tol,
            max_iter,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepRecord {
    pub k: usize,
    /// `‖ψ_k − ψ_{k−1}‖_∞` with `ψ_{−1} = 0`.
    pub dpsi: f64,
    /// `‖φ_{k+1} − φ_k‖_∞`.
    pub dphi: f64,
    pub error: Option<f64>,
    /// `‖w_k − v_k‖_{H¹}`.
    pub gap: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct IterationState {
    /// Number of steps taken.
    pub k: usize,
    /// Latest Neumann iterate `φ_k`.
    pub phi: TraceField,
    /// Latest Dirichlet iterate `ψ_{k−1}`.
    pub psi: TraceField,
    pub history: Vec<StepRecord>,
    pub w_field: Field,
    pub v_field: Field,
    pub converged: bool,
    pub tol: f64,
    /// `φ_0, …, φ_k` when requested.
    pub iterates: Vec<TraceField>,
}

impl IterationState {
    /// CSV with header `k,dpsi,dphi,error,gap`; absent values are empty.
    pub fn write_history_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "dpsi", "dphi", "error", "gap"])?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for r in &self.history {
            w.write_record([
                r.k.to_string(),
                format!("{:e}", r.dpsi),
                format!("{:e}", r.dphi),
                opt(r.error),
                opt(r.gap),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One step of the iteration, factoring both systems from scratch.
pub fn kmf_step(problem: &CauchyProblem, phi: &TraceField) -> Result<Step> {
    KmfSolver::new(problem)?.step(phi, None)
}

pub fn kmf_run(problem: &CauchyProblem, phi0: &TraceField, tol: f64, max_iter: usize) -> Result<IterationState> {
    KmfSolver::new(problem)?.run(phi0, &RunOptions::new(tol, max_iter))
}

/// `z = T(0)`.
pub fn affine_offset(problem: &CauchyProblem) -> Result<TraceField> {
    Ok(kmf_step(problem, &problem.zero_phi()?)?.phi_next)
}

/// Energy inner product of the homogeneous liftings of two Neumann traces.
pub fn star_inner(problem: &CauchyProblem, phi: &TraceField, psi: &TraceField) -> Result<f64> {
    if !problem.is_linear() {
        return Err(Error::Unsupported("the energy inner product needs a linear operator".into()));
    }
    let hom = problem.homogeneous();
    let solver = KmfSolver::new(&hom)?;
    let a = solver.solve_w(phi, None)?;
    let b = solver.solve_w(psi, None)?;
    Ok(solver.assembly.energy(&a, &b))
}

/// Replaces `g` with the discrete flux of the solution of the first
/// half-step problem driven by `phi_bar`, so that the projection of
/// `phi_bar` is an exact fixed point of the discrete step. Returns the
/// new problem and that solution.
pub fn discrete_consistent_problem(problem: &CauchyProblem, phi_bar: &TraceField) -> Result<(CauchyProblem, Field)> {
    let solver = KmfSolver::new(problem)?;
    let u = solver.solve_w(phi_bar, None)?;
    let mesh = &*problem.mesh;
    let gamma1 = &problem.cauchy_segment;
    let loads = problem
        .v_bvp(problem.zero_psi()?)
        .linear_load(&solver.assembly, Some(gamma1))?;
    let residual = weak_residual(&solver.assembly, problem.coefficients.semilinear.as_ref(), &u, &loads);
    let g = FluxRecovery::new(mesh, &solver.assembly, gamma1, |n| solver.v_system.is_constrained(n))?.recover(&residual);
    let g = TraceField {
        tag: gamma1.clone(),
        kind: TraceKind::Neumann,
        values: g,
    };
    Ok((problem.with_g(g), Field { values: u }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormEquivalence {
    /// Largest `c₁` with `c₁‖φ‖_M ≤ ‖φ‖_*`.
    pub c1: f64,
    /// Smallest `c₂` with `‖φ‖_* ≤ c₂‖φ‖_M`.
    pub c2: f64,
}

impl NormEquivalence {
    pub fn ratio(&self) -> f64 {
        self.c2 / self.c1
    }
}

/// Dense discrete `T_l`, the energy Gram matrix, and derived diagnostics,
/// all indexed by [`OperatorAudit::dof_positions`].
#[derive(Debug, Clone)]
pub struct OperatorAudit {
    pub tag: String,
    pub segment_len: usize,
    pub dof_positions: Vec<usize>,
    pub tl_matrix: DMatrix<f64>,
    pub star_gram: DMatrix<f64>,
    /// `max |G T_l − (G T_l)ᵀ|`.
    pub symmetry_defect: f64,
    /// `symmetry_defect / max |G T_l|`.
    pub relative_symmetry_defect: f64,
    /// Ascending eigenvalues of `T_l`, symmetrized in the energy inner product.
    pub eigenvalues: Vec<f64>,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub norm_equivalence: NormEquivalence,
}

impl OperatorAudit {
    pub fn dim(&self) -> usize {
        self.dof_positions.len()
    }

    pub fn restrict(&self, trace: &TraceField) -> Vec<f64> {
        self.dof_positions.iter().map(|&k| trace.values[k]).collect()
    }

    pub fn extend(&self, coords: &[f64]) -> TraceField {
        let mut values = vec![0.0; self.segment_len];
        for (&k, &v) in self.dof_positions.iter().zip(coords) {
            values[k] = v;
        }
        TraceField {
            tag: self.tag.clone(),
            kind: TraceKind::Neumann,
            values,
        }
    }

    pub fn star_norm(&self, trace: &TraceField) -> f64 {
        self.star_norm_coords(&self.restrict(trace))
    }

    pub fn star_norm_coords(&self, x: &[f64]) -> f64 {
        let x = nalgebra::DVector::from_column_slice(x);
        (x.transpose() * &self.star_gram * &x)[(0, 0)].max(0.0).sqrt()
    }

    pub fn apply_tl(&self, trace: &TraceField) -> TraceField {
        let x = nalgebra::DVector::from_vec(self.restrict(trace));
        self.extend((&self.tl_matrix * x).as_slice())
    }

    pub fn summary(&self) -> AuditSummary {
        AuditSummary {
            dim: self.dim(),
            eigenvalues: self.eigenvalues.clone(),
            min_eigenvalue: self.min_eigenvalue,
            max_eigenvalue: self.max_eigenvalue,
            symmetry_defect: self.symmetry_defect,
            relative_symmetry_defect: self.relative_symmetry_defect,
            norm_equivalence: self.norm_equivalence,
            norm_equivalence_ratio: self.norm_equivalence.ratio(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditSummary {
    pub dim: usize,
    pub eigenvalues: Vec<f64>,
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub symmetry_defect: f64,
    pub relative_symmetry_defect: f64,
    pub norm_equivalence: NormEquivalence,
    pub norm_equivalence_ratio: f64,
}

/// Eigenvalues of `a x = λ b x` for symmetric `a` and symmetric positive
/// definite `b`, ascending.
pub fn generalized_symmetric_eigenvalues(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<f64>> {
    let chol = nalgebra::Cholesky::new(b.clone()).ok_or_else(|| Error::SolverFailure {
        reason: "Gram matrix is not positive definite".into(),
        residual: f64::NAN,
    })?;
    let l = chol.l();
    let fail = || Error::SolverFailure {
        reason: "triangular solve failed".into(),
        residual: f64::NAN,
    };
    let x = l.solve_lower_triangular(a).ok_or_else(fail)?;
    let c = l.solve_lower_triangular(&x.transpose()).ok_or_else(fail)?;
    let c = (&c + c.transpose()) * 0.5;
    let mut values: Vec<f64> = SymmetricEigen::new(c).eigenvalues.iter().copied().collect();
    values.sort_by(f64::total_cmp);
    Ok(values)
}

/// Assembles `T_l` column by column (`T_l e_j` from homogeneous data) and
/// the energy Gram matrix of the liftings.
pub fn assemble_tl(problem: &CauchyProblem) -> Result<OperatorAudit> {
    if !problem.is_linear() {
        return Err(Error::Unsupported("operator audit of a semilinear problem".into()));
    }
    let hom = problem.homogeneous();
    let solver = KmfSolver::new(&hom)?;
    let dofs = solver.dof_positions().to_vec();
    let n = dofs.len();
    let seg_len = solver.gamma2_nodes.len();
    let zero = hom.zero_phi()?;
    let columns: Vec<(Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|j| {
            let mut e = zero.clone();
            e.values[dofs[j]] = 1.0;
            let step = solver.step(&e, None)?;
            let tl: Vec<f64> = dofs.iter().map(|&k| step.phi_next.values[k]).collect();
            Ok((tl, step.w.values))
        })
        .collect::<Result<_>>()?;
    let tl_matrix = DMatrix::from_fn(n, n, |i, j| columns[j].0[i]);
    let k_lifts: Vec<Vec<f64>> = columns
        .par_iter()
        .map(|(_, w)| solver.assembly.stiffness.mul_vec(w))
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let raw = DMatrix::from_fn(n, n, |i, j| dot(&columns[i].1, &k_lifts[j]));
    let star_gram = (&raw + raw.transpose()) * 0.5;

    let gt = &star_gram * &tl_matrix;
    let symmetry_defect = (&gt - gt.transpose()).amax();
    let relative_symmetry_defect = symmetry_defect / gt.amax().max(f64::MIN_POSITIVE);
    let sym = (&gt + gt.transpose()) * 0.5;
    let eigenvalues = generalized_symmetric_eigenvalues(&sym, &star_gram)?;

    let mass = DMatrix::from_fn(n, n, |i, j| solver.gamma2_mass.matrix.get(dofs[i], dofs[j]));
    let ge = generalized_symmetric_eigenvalues(&star_gram, &mass)?;
    let norm_equivalence = NormEquivalence {
        c1: ge[0].max(0.0).sqrt(),
        c2: ge[n - 1].max(0.0).sqrt(),
    };
    Ok(OperatorAudit {
        tag: hom.reconstruction_segment.clone(),
        segment_len: seg_len,
        dof_positions: dofs,
        tl_matrix,
        star_gram,
        symmetry_defect,
        relative_symmetry_defect,
        min_eigenvalue: eigenvalues[0],
        max_eigenvalue: eigenvalues[n - 1],
        eigenvalues,
        norm_equivalence,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceAudit {
    pub steps: usize,
    /// `‖φ_k − φ̄‖_*` with `φ̄` the final iterate.
    pub error_norms: Vec<f64>,
    /// `‖φ_{k+1} − φ_k‖_*`.
    pub step_norms: Vec<f64>,
    /// Smallest relative decrease of `error_norms` (negative means an increase).
    pub monotone_error_margin: f64,
    /// Smallest relative decrease of `step_norms`.
    pub asymptotic_regularity_margin: f64,
    pub monotone_error_pass: bool,
    pub asymptotic_regularity_pass: bool,
}

impl ConvergenceAudit {
    pub fn passed(&self) -> bool {
        self.monotone_error_pass && self.asymptotic_regularity_pass
    }
}

fn min_relative_decrease(values: &[f64]) -> f64 {
    let scale = values.iter().copied().fold(0.0, f64::max);
    if scale == 0.0 {
        return 0.0;
    }
    values
        .windows(2)
        .map(|w| (w[0] - w[1]) / scale)
        .fold(f64::INFINITY, f64::min)
}

/// Checks monotone energy-norm decay of `φ_k − φ̄` and of successive
/// differences along a run recorded with `keep_iterates`.
pub fn audit_convergence_theory(audit: &OperatorAudit, run: &IterationState) -> Result<ConvergenceAudit> {
    if run.iterates.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "need at least 3 recorded steps, have {}",
            run.iterates.len().saturating_sub(1)
        )));
    }
    let coords: Vec<Vec<f64>> = run.iterates.iter().map(|t| audit.restrict(t)).collect();
    let last = coords.last().expect("nonempty");
    let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<f64>>();
    let error_norms: Vec<f64> = coords.iter().map(|c| audit.star_norm_coords(&diff(c, last))).collect();
    let step_norms: Vec<f64> = coords
        .windows(2)
        .map(|w| audit.star_norm_coords(&diff(&w[1], &w[0])))
        .collect();
    let monotone_error_margin = min_relative_decrease(&error_norms);
    let asymptotic_regularity_margin = min_relative_decrease(&step_norms);
    Ok(ConvergenceAudit {
        steps: run.iterates.len() - 1,
        monotone_error_pass: monotone_error_margin >= AUDIT_MARGIN,
        asymptotic_regularity_pass: asymptotic_regularity_margin >= AUDIT_MARGIN,
        error_norms,
        step_norms,
        monotone_error_margin,
        asymptotic_regularity_margin,
    })
}

/// `‖T(φ) − φ‖_∞` for a linear or semilinear problem.
pub fn fixed_point_defect(solver: &KmfSolver, phi: &TraceField) -> Result<f64> {
    let phi = solver.project(phi);
    let next = solver.step(&phi, None)?.phi_next;
    let d: Vec<f64> = next.values.iter().zip(&phi.values).map(|(a, b)| a - b).collect();
    Ok(norm_inf(&d))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_rect_mesh, RectTags};
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    /// The square problem at small size: `f = sin(πx)`, `g = 0`, zero sides.
    fn square_problem(nx: usize, ny: usize, h: f64) -> CauchyProblem {
        let mesh = Arc::new(build_rect_mesh(nx, ny, (0.0, 1.0), (0.0, h), &RectTags::cauchy_bottom()).unwrap());
        let f = TraceField::from_fn(&mesh, "gamma1", TraceKind::Dirichlet, |p| (PI * p[0]).sin()).unwrap();
        let g = TraceField::zeros(&mesh, "gamma1", TraceKind::Neumann).unwrap();
        let extra = vec![
            TraceField::zeros(&mesh, "gamma3", TraceKind::Dirichlet).unwrap(),
            TraceField::zeros(&mesh, "gamma4", TraceKind::Dirichlet).unwrap(),
        ];
        CauchyProblem::new(mesh, EllipticCoefficients::laplace(), f, g, extra).unwrap()
    }

    fn smooth_random(problem: &CauchyProblem, seed: u64) -> TraceField {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-1.0..1.0));
        TraceField::from_fn(&problem.mesh, "gamma2", TraceKind::Neumann, |p| {
            (1..=3).map(|j| a[j - 1] * (j as f64 * PI * p[0]).sin()).sum()
        })
        .unwrap()
    }

    #[test]
    fn problem_rejects_conditions_on_data_segments() {
        let p = square_problem(4, 3, 0.75);
        let mut extra = p.extra_conditions.clone();
        extra.push(TraceField::zeros(&p.mesh, "gamma2", TraceKind::Dirichlet).unwrap());
        let r = CauchyProblem::new(p.mesh.clone(), EllipticCoefficients::laplace(), p.f.clone(), p.g.clone(), extra);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn zero_data_gives_zero_step() {
        let p = square_problem(8, 6, 0.75).homogeneous();
        let s = kmf_step(&p, &p.zero_phi().unwrap()).unwrap();
        assert!(s.psi.values.iter().chain(&s.phi_next.values).all(|&v| v == 0.0));
    }

    #[test]
    fn homogeneous_step_is_linear() {
        let p = square_problem(8, 6, 0.75).homogeneous();
        let phi = smooth_random(&p, 1);
        let a = kmf_step(&p, &phi).unwrap().phi_next;
        let b = kmf_step(&p, &phi.scaled(-2.5)).unwrap().phi_next;
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((-2.5 * x - y).abs() < 1e-10 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn affine_offset_and_linear_part() {
        let p = square_problem(8, 6, 0.75);
        let z = affine_offset(&p).unwrap();
        assert_eq!(z, affine_offset(&p).unwrap());
        assert!(affine_offset(&p.homogeneous()).unwrap().values.iter().all(|&v| v == 0.0));
        let a = smooth_random(&p, 2);
        let b = smooth_random(&p, 3);
        let sum = TraceField {
            values: a.values.iter().zip(&b.values).map(|(x, y)| x + y).collect(),
            ..a.clone()
        };
        let lin = |phi: &TraceField| -> Vec<f64> {
            let t = kmf_step(&p, phi).unwrap().phi_next;
            t.values.iter().zip(&z.values).map(|(x, y)| x - y).collect()
        };
        let (la, lb, ls) = (lin(&a), lin(&b), lin(&sum));
        let defect = (0..la.len()).map(|i| (la[i] + lb[i] - ls[i]).abs()).fold(0.0, f64::max);
        assert!(defect <= 1e-8 * norm_inf(&ls).max(1.0), "defect {defect}");
    }

    #[test]
    fn exact_trace_is_nearly_fixed() {
        let p = square_problem(32, 24, 0.75);
        let solver = KmfSolver::new(&p).unwrap();
        let exact = TraceField::from_fn(&p.mesh, "gamma2", TraceKind::Neumann, |q| {
            PI * (PI * q[1]).sinh() * (PI * q[0]).sin()
        })
        .unwrap();
        let d = fixed_point_defect(&solver, &exact).unwrap();
        assert!(d < 0.05 * norm_inf(&exact.values), "defect {d}");
    }

    #[test]
    fn discrete_consistent_data_is_exact_fixed_point() {
        let base = square_problem(10, 8, 0.75);
        let phi_bar = smooth_random(&base, 4);
        let (p, _) = discrete_consistent_problem(&base, &phi_bar).unwrap();
        let solver = KmfSolver::new(&p).unwrap();
        let d = fixed_point_defect(&solver, &phi_bar).unwrap();
        assert!(d < 1e-9 * norm_inf(&phi_bar.values), "defect {d}");
    }

    #[test]
    fn run_converges_from_any_start() {
        // thin strip: the slowest resolved mode still contracts visibly
        let p = square_problem(16, 5, 0.3);
        let solver = KmfSolver::new(&p).unwrap();
        let tol = 1e-8;
        let a = solver.run(&p.zero_phi().unwrap(), &RunOptions::new(tol, 2000)).unwrap();
        let b = solver.run(&smooth_random(&p, 5), &RunOptions::new(tol, 2000)).unwrap();
        assert!(a.converged && b.converged);
        assert_eq!(a.history.len(), a.k);
        // a step below tol leaves at most tol·μ/(1−μ) to go per run
        let mu = assemble_tl(&p).unwrap().max_eigenvalue;
        let bound = 2.0 * tol / (1.0 - mu);
        let d = a.psi.max_abs_diff(&b.psi);
        assert!(d <= bound, "{d} > {bound}");
        // the limit nearly satisfies the fixed-point equation
        let defect = fixed_point_defect(&solver, &a.phi).unwrap();
        assert!(defect <= a.history.last().unwrap().dphi * 1.0001, "{defect}");
    }

    #[test]
    fn run_from_fixed_point_stops_immediately() {
        let base = square_problem(10, 8, 0.75);
        let phi_bar = smooth_random(&base, 6);
        let (p, _) = discrete_consistent_problem(&base, &phi_bar).unwrap();
        let solver = KmfSolver::new(&p).unwrap();
        let mut opts = RunOptions::new(1e-8, 50);
        opts.keep_iterates = true;
        let run = solver.run(&phi_bar, &opts).unwrap();
        assert!(run.converged && run.k <= 2);
    }

    #[test]
    fn run_rejects_bad_tolerance() {
        let p = square_problem(4, 3, 0.75);
        assert!(kmf_run(&p, &p.zero_phi().unwrap(), 0.0, 10).is_err());
    }

    #[test]
    fn star_inner_symmetric_and_definite() {
        let p = square_problem(8, 6, 0.75);
        let a = smooth_random(&p, 7);
        let b = smooth_random(&p, 8);
        let ab = star_inner(&p, &a, &b).unwrap();
        let ba = star_inner(&p, &b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-10 * ab.abs().max(1.0));
        assert!(star_inner(&p, &a, &a).unwrap() > 0.0);
    }

    #[test]
    fn audit_of_thin_strip() {
        // on a thin strip the spectrum stays well away from 1
        let p = square_problem(16, 4, 0.25);
        let audit = assemble_tl(&p).unwrap();
        assert_eq!(audit.dim(), 15);
        assert!(audit.relative_symmetry_defect < 1e-10, "{}", audit.relative_symmetry_defect);
        assert!(audit.min_eigenvalue > 0.0 && audit.max_eigenvalue < 1.0, "{:?}", audit.eigenvalues);
        // the lowest sine mode is the most strongly damped: tanh²(π/4) in the continuum
        let expected = (PI * 0.25).tanh().powi(2);
        assert!((audit.min_eigenvalue - expected).abs() < 0.01, "{} vs {expected}", audit.min_eigenvalue);
        assert!(audit.norm_equivalence.c1 > 0.0 && audit.norm_equivalence.ratio() >= 1.0);
        // the audit's star norm agrees with the energy product
        let a = smooth_random(&p, 9);
        let direct = star_inner(&p, &a, &a).unwrap().sqrt();
        assert!((audit.star_norm(&a) - direct).abs() < 1e-9 * direct);
    }

    #[test]
    fn iteration_matches_matrix_powers() {
        let base = square_problem(12, 4, 0.3);
        let phi_bar = smooth_random(&base, 10);
        let (p, _) = discrete_consistent_problem(&base, &phi_bar).unwrap();
        let audit = assemble_tl(&p).unwrap();
        let solver = KmfSolver::new(&p).unwrap();
        let mut opts = RunOptions::new(1e-300, 10);
        opts.keep_iterates = true;
        let run = solver.run(&p.zero_phi().unwrap(), &opts).unwrap();
        let bar = audit.restrict(&phi_bar);
        let mut eps = nalgebra::DVector::from_iterator(bar.len(), bar.iter().map(|v| -v));
        for it in &run.iterates {
            let got: Vec<f64> = audit.restrict(it).iter().zip(&bar).map(|(a, b)| a - b).collect();
            let err = got.iter().zip(eps.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err <= 1e-8 * eps.amax().max(1e-300), "{err}");
            eps = &audit.tl_matrix * eps;
        }
    }

    #[test]
    fn convergence_audit_passes_on_linear_run() {
        let p = square_problem(12, 6, 0.4);
        let audit = assemble_tl(&p).unwrap();
        let solver = KmfSolver::new(&p).unwrap();
        let mut opts = RunOptions::new(1e-6, 200);
        opts.keep_iterates = true;
        let run = solver.run(&p.zero_phi().unwrap(), &opts).unwrap();
        let report = audit_convergence_theory(&audit, &run).unwrap();
        assert!(report.passed(), "{report:?}");

        let mut short = run.clone();
        short.iterates.truncate(3);
        assert!(matches!(audit_convergence_theory(&audit, &short), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn semilinear_rejected_by_audit() {
        let p = square_problem(4, 3, 0.75);
        let mut q = p.clone();
        q.coefficients = EllipticCoefficients::laplace().with_semilinear(crate::fem::Semilinear {
            term: Arc::new(|u| -u * u * u),
            derivative: Arc::new(|u| -3.0 * u * u),
            source: Arc::new(|_| 0.0),
        });
        assert!(matches!(assemble_tl(&q), Err(Error::Unsupported(_))));
        assert!(matches!(star_inner(&q, &q.zero_phi().unwrap(), &q.zero_phi().unwrap()), Err(Error::Unsupported(_))));
    }

    #[test]
    fn history_csv_format() {
        let p = square_problem(6, 4, 0.5);
        let run = kmf_run(&p, &p.zero_phi().unwrap(), 1e-3, 3).unwrap();
        let mut out = Vec::new();
        run.write_history_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("k,dpsi,dphi,error,gap\n0,"));
        assert_eq!(text.lines().count(), run.k + 1);
    }
}
