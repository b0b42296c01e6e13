//! P1 finite elements for the mixed problems `−div(A∇u) + N(u) = F` that make
//! up each half-step of the alternating iteration.
//!
//! Dirichlet data is imposed by eliminating constrained rows and columns,
//! Neumann (conormal) data enters through the 1D P1 boundary mass matrix of
//! its segment, and Neumann traces of a computed field are recovered
//! variationally: the flux `λ` on a segment solves `M_Γ λ = r`, where `r` is
//! the weak residual of the field restricted to the segment's rows. For
//! discrete solutions this makes the discrete Green identity exact.
//!
//! Shared nodes: a node in both a Dirichlet and a Neumann segment is
//! constrained. When two Dirichlet segments share a node, the value from the
//! first one listed in the problem is used.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mesh, Point};
use crate::sparse::{norm2, norm_inf, CsrMatrix, EnvelopeCholesky};

pub type TensorFn = Arc<dyn Fn(Point) -> [[f64; 2]; 2] + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(Point) -> f64 + Send + Sync>;
pub type NonlinearFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Relative residual above which a direct solve is reported as failed.
pub const SOLVER_TOLERANCE: f64 = 1e-10;

/// The semilinear part of `P(u) + N(u) = F`.
#[derive(Clone)]
pub struct Semilinear {
    pub term: NonlinearFn,
    pub derivative: NonlinearFn,
    pub source: ScalarFn,
}

impl fmt::Debug for Semilinear {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Semilinear { .. }")
    }
}

/// Coefficient field `A(x)` of `P(u) = −div(A∇u)`, its ellipticity bound and
/// an optional semilinear term.
#[derive(Clone)]
pub struct EllipticCoefficients {
    pub tensor: TensorFn,
    pub alpha: f64,
    pub semilinear: Option<Semilinear>,
}

impl fmt::Debug for EllipticCoefficients {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EllipticCoefficients")
            .field("alpha", &self.alpha)
            .field("semilinear", &self.semilinear.is_some())
            .finish()
    }
}

impl EllipticCoefficients {
    /// The Laplacian: `A = I`, `α = 1`.
    pub fn laplace() -> Self {
        Self::constant([[1.0, 0.0], [0.0, 1.0]], 1.0)
    }

    pub fn constant(a: [[f64; 2]; 2], alpha: f64) -> Self {
        Self {
            tensor: Arc::new(move |_| a),
            alpha,
            semilinear: None,
        }
    }

    pub fn with_semilinear(mut self, semilinear: Semilinear) -> Self {
        self.semilinear = Some(semilinear);
        self
    }

    pub fn is_linear(&self) -> bool {
        self.semilinear.is_none()
    }

    fn check_at(&self, p: Point) -> Result<[[f64; 2]; 2]> {
        let a = (self.tensor)(p);
        let scale = a[0][0].abs().max(a[1][1].abs()).max(1.0);
        let b = 0.5 * (a[0][1] + a[1][0]);
        let min_eigenvalue =
            0.5 * (a[0][0] + a[1][1]) - (0.25 * (a[0][0] - a[1][1]).powi(2) + b * b).sqrt();
        let asymmetric = (a[0][1] - a[1][0]).abs() > 1e-12 * scale;
        if asymmetric || !min_eigenvalue.is_finite() || min_eigenvalue < self.alpha * (1.0 - 1e-12) || self.alpha <= 0.0 {
            return Err(Error::InvalidCoefficients {
                x: p[0],
                y: p[1],
                min_eigenvalue,
                alpha: self.alpha,
            });
        }
        Ok(a)
    }
}

/// Nodal P1 coefficients over all mesh nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub values: Vec<f64>,
}

impl Field {
    pub fn zeros(mesh: &Mesh) -> Self {
        Self {
            values: vec![0.0; mesh.node_count()],
        }
    }

    pub fn from_fn(mesh: &Mesh, f: impl Fn(Point) -> f64) -> Self {
        Self {
            values: mesh.nodes.iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// CSV with header `node,x,y,value`.
    pub fn write_csv<W: Write>(&self, mesh: &Mesh, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["node", "x", "y", "value"])?;
        for (i, (p, v)) in mesh.nodes.iter().zip(&self.values).enumerate() {
            w.serialize((i, p[0], p[1], v))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceKind {
    Dirichlet,
    Neumann,
}

/// Nodal values on one segment, aligned with the segment's node order.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceField {
    pub tag: String,
    pub kind: TraceKind,
    pub values: Vec<f64>,
}

impl TraceField {
    pub fn zeros(mesh: &Mesh, tag: &str, kind: TraceKind) -> Result<Self> {
        let n = mesh.segment(tag)?.len();
        Ok(Self {
            tag: tag.to_string(),
            kind,
            values: vec![0.0; n],
        })
    }

    /// Samples `f` at the segment's nodes.
    pub fn from_fn(mesh: &Mesh, tag: &str, kind: TraceKind, f: impl Fn(Point) -> f64) -> Result<Self> {
        let seg = mesh.segment(tag)?;
        Ok(Self {
            tag: tag.to_string(),
            kind,
            values: seg.nodes.iter().map(|&n| f(mesh.nodes[n])).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    pub fn max_abs_diff(&self, other: &TraceField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// CSV with header `arclength,value`.
    pub fn write_csv<W: Write>(&self, mesh: &Mesh, out: W) -> Result<()> {
        let seg = mesh.segment(&self.tag)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["arclength", "value"])?;
        for (s, v) in seg.arclength.iter().zip(&self.values) {
            w.serialize((s, v))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// 1D P1 mass matrix of one segment, indexed by position along the segment.
#[derive(Debug, Clone)]
pub struct SegmentMass {
    pub tag: String,
    pub nodes: Vec<usize>,
    pub matrix: CsrMatrix,
}

impl SegmentMass {
    pub fn apply(&self, values: &[f64]) -> Vec<f64> {
        self.matrix.mul_vec(values)
    }

    /// Adds `M_Γ g` into a global load vector.
    pub fn add_load(&self, values: &[f64], load: &mut [f64]) {
        for (k, v) in self.apply(values).into_iter().enumerate() {
            load[self.nodes[k]] += v;
        }
    }

    /// `(M_Γ g)` weighted L² inner product of two traces.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        self.matrix.bilinear(a, b)
    }
}

#[derive(Debug, Clone)]
pub struct Assembly {
    pub stiffness: CsrMatrix,
    pub mass: CsrMatrix,
    pub boundary_mass: Vec<SegmentMass>,
}

impl Assembly {
    pub fn segment_mass(&self, tag: &str) -> Result<&SegmentMass> {
        self.boundary_mass
            .iter()
            .find(|m| m.tag == tag)
            .ok_or_else(|| Error::NotFound(format!("segment tag '{tag}'")))
    }

    /// `(vᵀKv + vᵀMv)^{1/2}`.
    pub fn h1_norm(&self, v: &[f64]) -> f64 {
        (self.stiffness.bilinear(v, v) + self.mass.bilinear(v, v)).max(0.0).sqrt()
    }

    pub fn l2_norm(&self, v: &[f64]) -> f64 {
        self.mass.bilinear(v, v).max(0.0).sqrt()
    }

    pub fn energy(&self, u: &[f64], v: &[f64]) -> f64 {
        self.stiffness.bilinear(u, v)
    }
}

/// Stiffness, mass and per-segment boundary mass matrices. `A` is evaluated
/// at triangle centroids, which makes the P1 stiffness exact for
/// piecewise-constant coefficients.
pub fn assemble(mesh: &Mesh, coefficients: &EllipticCoefficients) -> Result<Assembly> {
    let n = mesh.node_count();
    let mut k_trip = Vec::with_capacity(9 * mesh.triangle_count());
    let mut m_trip = Vec::with_capacity(9 * mesh.triangle_count());
    for tri in &mesh.triangles {
        let p = tri.map(|i| mesh.nodes[i]);
        let centroid = [
            (p[0][0] + p[1][0] + p[2][0]) / 3.0,
            (p[0][1] + p[1][1] + p[2][1]) / 3.0,
        ];
        let a = coefficients.check_at(centroid)?;
        let area = crate::geometry::signed_area(p[0], p[1], p[2]);
        let grads: [[f64; 2]; 3] = std::array::from_fn(|i| {
            let (b, c) = (p[(i + 1) % 3], p[(i + 2) % 3]);
            [(b[1] - c[1]) / (2.0 * area), (c[0] - b[0]) / (2.0 * area)]
        });
        for i in 0..3 {
            let agi = [
                a[0][0] * grads[i][0] + a[0][1] * grads[i][1],
                a[1][0] * grads[i][0] + a[1][1] * grads[i][1],
            ];
            for j in 0..3 {
                let kij = area * (agi[0] * grads[j][0] + agi[1] * grads[j][1]);
                k_trip.push((tri[j], tri[i], kij));
                let mij = if i == j { area / 6.0 } else { area / 12.0 };
                m_trip.push((tri[i], tri[j], mij));
            }
        }
    }
    let stiffness = symmetrize(CsrMatrix::from_triplets(n, n, &k_trip));
    let mass = CsrMatrix::from_triplets(n, n, &m_trip);

    let boundary_mass = mesh
        .segments
        .iter()
        .map(|seg| {
            let m = seg.len();
            let mut trip = Vec::new();
            let mut local_edges: Vec<(usize, usize)> = (1..m).map(|k| (k - 1, k)).collect();
            if seg.closed && m > 2 {
                local_edges.push((m - 1, 0));
            }
            for (a, b) in local_edges {
                let len = crate::geometry::distance(mesh.nodes[seg.nodes[a]], mesh.nodes[seg.nodes[b]]);
                trip.push((a, a, len / 3.0));
                trip.push((b, b, len / 3.0));
                trip.push((a, b, len / 6.0));
                trip.push((b, a, len / 6.0));
            }
            SegmentMass {
                tag: seg.tag.name.clone(),
                nodes: seg.nodes.clone(),
                matrix: CsrMatrix::from_triplets(m, m, &trip),
            }
        })
        .collect();

    Ok(Assembly {
        stiffness,
        mass,
        boundary_mass,
    })
}

// Element contributions are symmetric up to rounding in `a·g` products; make
// the global matrix exactly symmetric.
fn symmetrize(k: CsrMatrix) -> CsrMatrix {
    let n = k.nrows();
    let mut trip = Vec::with_capacity(k.nnz());
    for i in 0..n {
        for (j, v) in k.row(i) {
            let avg = 0.5 * (v + k.get(j, i));
            trip.push((i, j, avg));
        }
    }
    CsrMatrix::from_triplets(n, n, &trip)
}

/// A mixed boundary value problem: every tagged segment carries exactly one
/// Dirichlet or Neumann datum.
#[derive(Clone)]
pub struct MixedBvp<'a> {
    pub mesh: &'a Mesh,
    pub coefficients: &'a EllipticCoefficients,
    pub dirichlet: Vec<TraceField>,
    pub neumann: Vec<TraceField>,
    pub source: Option<ScalarFn>,
}

impl fmt::Debug for MixedBvp<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MixedBvp")
            .field("dirichlet", &self.dirichlet)
            .field("neumann", &self.neumann)
            .field("source", &self.source.is_some())
            .finish()
    }
}

impl<'a> MixedBvp<'a> {
    pub fn new(mesh: &'a Mesh, coefficients: &'a EllipticCoefficients) -> Self {
        Self {
            mesh,
            coefficients,
            dirichlet: Vec::new(),
            neumann: Vec::new(),
            source: None,
        }
    }

    pub fn with_dirichlet(mut self, trace: TraceField) -> Self {
        self.dirichlet.push(trace);
        self
    }

    pub fn with_neumann(mut self, trace: TraceField) -> Self {
        self.neumann.push(trace);
        self
    }

    pub fn with_source(mut self, source: ScalarFn) -> Self {
        self.source = Some(source);
        self
    }

    pub fn validate(&self) -> Result<()> {
        for seg in &self.mesh.segments {
            let name = &seg.tag.name;
            let count = self.dirichlet.iter().filter(|t| &t.tag == name).count()
                + self.neumann.iter().filter(|t| &t.tag == name).count();
            if count != 1 {
                return Err(Error::IllPosedBvp(format!(
                    "segment '{name}' carries {count} boundary conditions, expected exactly one"
                )));
            }
        }
        for (traces, kind) in [(&self.dirichlet, TraceKind::Dirichlet), (&self.neumann, TraceKind::Neumann)] {
            for t in traces {
                let seg = self.mesh.segment(&t.tag)?;
                if t.len() != seg.len() {
                    return Err(Error::InvalidArgument(format!(
                        "trace on '{}' has {} values, segment has {} nodes",
                        t.tag,
                        t.len(),
                        seg.len()
                    )));
                }
                if t.kind != kind {
                    return Err(Error::InvalidArgument(format!(
                        "trace on '{}' has kind {:?} but is used as {:?} data",
                        t.tag, t.kind, kind
                    )));
                }
                if t.values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument(format!("non-finite data on '{}'", t.tag)));
                }
            }
        }
        if self.dirichlet.iter().all(|t| t.is_empty()) {
            return Err(Error::IllPosedBvp(
                "no Dirichlet-constrained node: the pure Neumann problem is singular".into(),
            ));
        }
        Ok(())
    }

    pub fn dirichlet_tags(&self) -> Vec<&str> {
        self.dirichlet.iter().map(|t| t.tag.as_str()).collect()
    }

    /// Full-length vector carrying the Dirichlet values at constrained nodes
    /// (zero elsewhere). The first listed trace wins at shared nodes.
    pub fn dirichlet_values(&self) -> Result<Vec<f64>> {
        let mut values = vec![0.0; self.mesh.node_count()];
        let mut set = vec![false; self.mesh.node_count()];
        for t in &self.dirichlet {
            let seg = self.mesh.segment(&t.tag)?;
            for (&n, &v) in seg.nodes.iter().zip(&t.values) {
                if !set[n] {
                    values[n] = v;
                    set[n] = true;
                }
            }
        }
        Ok(values)
    }

    /// `M F + Σ M_Γ g` over Neumann segments other than `skip`.
    pub fn linear_load(&self, assembly: &Assembly, skip: Option<&str>) -> Result<Vec<f64>> {
        let mut load = vec![0.0; self.mesh.node_count()];
        let sources: Vec<&ScalarFn> = self
            .source
            .iter()
            .chain(self.coefficients.semilinear.as_ref().map(|s| &s.source))
            .collect();
        if !sources.is_empty() {
            let f: Vec<f64> = self
                .mesh
                .nodes
                .iter()
                .map(|&p| sources.iter().map(|s| s(p)).sum())
                .collect();
            assembly.mass.mul_vec_into(&f, &mut load);
        }
        for t in &self.neumann {
            if Some(t.tag.as_str()) == skip {
                continue;
            }
            assembly.segment_mass(&t.tag)?.add_load(&t.values, &mut load);
        }
        Ok(load)
    }
}

/// `M N(u)`: the nodal-interpolated nonlinear term tested against P1 functions.
pub fn nonlinear_load(assembly: &Assembly, semilinear: &Semilinear, u: &[f64]) -> Vec<f64> {
    let nu: Vec<f64> = u.iter().map(|&v| (semilinear.term)(v)).collect();
    assembly.mass.mul_vec(&nu)
}

/// Stiffness matrix factored on the unconstrained nodes for a fixed set of
/// Dirichlet nodes; solves for any Dirichlet values and load.
#[derive(Debug, Clone)]
pub struct MixedSystem {
    stiffness: CsrMatrix,
    constrained: Vec<bool>,
    free: Vec<usize>,
    factor: EnvelopeCholesky,
}

impl MixedSystem {
    pub fn new(mesh: &Mesh, assembly: &Assembly, dirichlet_tags: &[&str]) -> Result<Self> {
        let mut constrained = vec![false; mesh.node_count()];
        for tag in dirichlet_tags {
            for &n in &mesh.segment(tag)?.nodes {
                constrained[n] = true;
            }
        }
        if !constrained.iter().any(|&c| c) {
            return Err(Error::IllPosedBvp(
                "no Dirichlet-constrained node: the pure Neumann problem is singular".into(),
            ));
        }
        let free: Vec<usize> = (0..mesh.node_count()).filter(|&i| !constrained[i]).collect();
        let kff = assembly.stiffness.principal_submatrix(&free);
        let factor = EnvelopeCholesky::factor(&kff)?;
        Ok(Self {
            stiffness: assembly.stiffness.clone(),
            constrained,
            free,
            factor,
        })
    }

    pub fn is_constrained(&self, node: usize) -> bool {
        self.constrained[node]
    }

    pub fn constrained_mask(&self) -> &[bool] {
        &self.constrained
    }

    /// Solves `K u = load` on free rows with `u = dirichlet` on constrained
    /// nodes. Only constrained entries of `dirichlet` are read.
    pub fn solve(&self, dirichlet: &[f64], load: &[f64]) -> Result<Vec<f64>> {
        let n = self.constrained.len();
        assert_eq!(dirichlet.len(), n);
        assert_eq!(load.len(), n);
        let mut u: Vec<f64> = (0..n)
            .map(|i| if self.constrained[i] { dirichlet[i] } else { 0.0 })
            .collect();
        let mut rhs: Vec<f64> = Vec::with_capacity(self.free.len());
        let mut scale = 0.0f64;
        for &i in &self.free {
            let lifted: f64 = self.stiffness.row(i).map(|(j, v)| v * u[j]).sum();
            scale = scale.max(load[i].abs()).max(lifted.abs());
            rhs.push(load[i] - lifted);
        }
        self.factor.solve_in_place(&mut rhs);
        for (k, &i) in self.free.iter().enumerate() {
            u[i] = rhs[k];
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::SolverFailure {
                reason: "non-finite solution".into(),
                residual: f64::NAN,
            });
        }
        let residual = self.free_residual(&u, load);
        let relative = residual / scale.max(f64::MIN_POSITIVE);
        if scale > 0.0 && relative > SOLVER_TOLERANCE {
            return Err(Error::SolverFailure {
                reason: "residual above tolerance".into(),
                residual: relative,
            });
        }
        Ok(u)
    }

    fn free_residual(&self, u: &[f64], load: &[f64]) -> f64 {
        self.free
            .iter()
            .map(|&i| (self.stiffness.row(i).map(|(j, v)| v * u[j]).sum::<f64>() - load[i]).abs())
            .fold(0.0, f64::max)
    }
}

/// Variational flux recovery on one segment. Nodes marked as pinned get
/// zero flux and their rows are dropped from the segment mass system.
#[derive(Debug, Clone)]
pub struct FluxRecovery {
    tag: String,
    nodes: Vec<usize>,
    kept: Vec<usize>,
    factor: EnvelopeCholesky,
}

impl FluxRecovery {
    pub fn new(mesh: &Mesh, assembly: &Assembly, tag: &str, pinned: impl Fn(usize) -> bool) -> Result<Self> {
        let mass = assembly.segment_mass(tag)?;
        let kept: Vec<usize> = (0..mass.nodes.len()).filter(|&k| !pinned(mass.nodes[k])).collect();
        if kept.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "segment '{tag}' has no free node for flux recovery"
            )));
        }
        let _ = mesh;
        let factor = EnvelopeCholesky::factor(&mass.matrix.principal_submatrix(&kept))
            .map_err(|_| Error::InvalidArgument(format!("boundary mass on '{tag}' is singular")))?;
        Ok(Self {
            tag: tag.to_string(),
            nodes: mass.nodes.clone(),
            kept,
            factor,
        })
    }

    /// Positions (along the segment) that carry recovered flux values.
    pub fn kept_positions(&self) -> &[usize] {
        &self.kept
    }

    /// Flux values along the segment from a global weak residual.
    pub fn recover(&self, residual: &[f64]) -> Vec<f64> {
        let mut rhs: Vec<f64> = self.kept.iter().map(|&k| residual[self.nodes[k]]).collect();
        self.factor.solve_in_place(&mut rhs);
        let mut values = vec![0.0; self.nodes.len()];
        for (k, v) in self.kept.iter().zip(rhs) {
            values[*k] = v;
        }
        values
    }

    pub fn trace(&self, residual: &[f64]) -> TraceField {
        TraceField {
            tag: self.tag.clone(),
            kind: TraceKind::Neumann,
            values: self.recover(residual),
        }
    }
}

/// `K u + M N(u) − load`.
pub fn weak_residual(assembly: &Assembly, semilinear: Option<&Semilinear>, u: &[f64], load: &[f64]) -> Vec<f64> {
    let mut r = assembly.stiffness.mul_vec(u);
    if let Some(s) = semilinear {
        for (ri, ni) in r.iter_mut().zip(nonlinear_load(assembly, s, u)) {
            *ri += ni;
        }
    }
    for (ri, li) in r.iter_mut().zip(load) {
        *ri -= li;
    }
    r
}

/// Solves a linear mixed problem.
pub fn solve_mixed(bvp: &MixedBvp) -> Result<Field> {
    if !bvp.coefficients.is_linear() {
        return Err(Error::Unsupported(
            "semilinear coefficients: use solve_semilinear".into(),
        ));
    }
    bvp.validate()?;
    let assembly = assemble(bvp.mesh, bvp.coefficients)?;
    let system = MixedSystem::new(bvp.mesh, &assembly, &bvp.dirichlet_tags())?;
    let load = bvp.linear_load(&assembly, None)?;
    let values = system.solve(&bvp.dirichlet_values()?, &load)?;
    Ok(Field { values })
}

pub fn dirichlet_trace(mesh: &Mesh, field: &Field, tag: &str) -> Result<TraceField> {
    let seg = mesh.segment(tag)?;
    Ok(TraceField {
        tag: tag.to_string(),
        kind: TraceKind::Dirichlet,
        values: seg.nodes.iter().map(|&n| field.values[n]).collect(),
    })
}

/// Conormal derivative of `field` on `tag`, recovered on every node of the
/// segment. Known Neumann data of the other segments is removed from the
/// residual first, so corner rows only keep the unknown share.
pub fn neumann_trace(bvp: &MixedBvp, field: &Field, tag: &str) -> Result<TraceField> {
    neumann_trace_pinned(bvp, field, tag, |_| false)
}

/// As [`neumann_trace`], with zero flux imposed at the nodes selected by
/// `pinned`.
pub fn neumann_trace_pinned(
    bvp: &MixedBvp,
    field: &Field,
    tag: &str,
    pinned: impl Fn(usize) -> bool,
) -> Result<TraceField> {
    if field.len() != bvp.mesh.node_count() {
        return Err(Error::InvalidArgument("field length does not match mesh".into()));
    }
    let assembly = assemble(bvp.mesh, bvp.coefficients)?;
    let load = bvp.linear_load(&assembly, Some(tag))?;
    let residual = weak_residual(&assembly, bvp.coefficients.semilinear.as_ref(), &field.values, &load);
    Ok(FluxRecovery::new(bvp.mesh, &assembly, tag, pinned)?.trace(&residual))
}

/// Damped Picard iteration for `P(u) + N(u) = F`:
/// `K u^{m+1} = M F − M N(u^m) + Neumann loads`, with the damping factor
/// dropping from 1 to 0.5 once an update grows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PicardSettings {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PicardSettings {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PicardOutcome {
    pub values: Vec<f64>,
    pub updates: Vec<f64>,
}

pub fn picard(
    system: &MixedSystem,
    assembly: &Assembly,
    semilinear: &Semilinear,
    dirichlet: &[f64],
    linear_load: &[f64],
    initial: &[f64],
    settings: PicardSettings,
) -> Result<PicardOutcome> {
    let mut u: Vec<f64> = initial
        .iter()
        .enumerate()
        .map(|(i, &v)| if system.is_constrained(i) { dirichlet[i] } else { v })
        .collect();
    let mut damping = 1.0;
    let mut updates = Vec::new();
    for _ in 0..settings.max_iter {
        let nl = nonlinear_load(assembly, semilinear, &u);
        let load: Vec<f64> = linear_load.iter().zip(&nl).map(|(l, n)| l - n).collect();
        let next = system.solve(dirichlet, &load)?;
        let step = next
            .iter()
            .zip(&u)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if let Some(&prev) = updates.last() {
            if step > prev && damping == 1.0 {
                damping = 0.5;
            }
        }
        for (ui, ni) in u.iter_mut().zip(&next) {
            *ui += damping * (ni - *ui);
        }
        let delta = damping * step;
        updates.push(delta);
        if !delta.is_finite() {
            break;
        }
        if delta <= settings.tol {
            return Ok(PicardOutcome { values: u, updates });
        }
    }
    Err(Error::NonlinearDivergence { history: updates })
}

/// Solves a semilinear mixed problem starting from `initial_guess`.
pub fn solve_semilinear(bvp: &MixedBvp, initial_guess: &Field, tol: f64, max_iter: usize) -> Result<Field> {
    let semilinear = bvp
        .coefficients
        .semilinear
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("no semilinear term present".into()))?;
    bvp.validate()?;
    if initial_guess.len() != bvp.mesh.node_count() {
        return Err(Error::InvalidArgument("initial guess length does not match mesh".into()));
    }
    let assembly = assemble(bvp.mesh, bvp.coefficients)?;
    let system = MixedSystem::new(bvp.mesh, &assembly, &bvp.dirichlet_tags())?;
    let load = bvp.linear_load(&assembly, None)?;
    let outcome = picard(
        &system,
        &assembly,
        semilinear,
        &bvp.dirichlet_values()?,
        &load,
        &initial_guess.values,
        PicardSettings { tol, max_iter },
    )?;
    Ok(Field { values: outcome.values })
}

/// Relative `‖a − b‖ / ‖b‖` in the Euclidean norm.
pub fn relative_difference(a: &[f64], b: &[f64]) -> f64 {
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm2(&diff) / norm2(b).max(f64::MIN_POSITIVE)
}

pub fn max_abs(v: &[f64]) -> f64 {
    norm_inf(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_annulus_mesh, build_rect_mesh, AnnulusTags, OuterTags, RectTags, SegmentTag};
    use std::f64::consts::PI;

    fn square(nx: usize, ny: usize, h: f64) -> Mesh {
        build_rect_mesh(nx, ny, (0.0, 1.0), (0.0, h), &RectTags::cauchy_bottom()).unwrap()
    }

    fn dirichlet_all(mesh: &Mesh, f: impl Fn(Point) -> f64 + Copy) -> Vec<TraceField> {
        mesh.segments
            .iter()
            .map(|s| TraceField::from_fn(mesh, &s.tag.name, TraceKind::Dirichlet, f).unwrap())
            .collect()
    }

    #[test]
    fn reference_triangle_stiffness() {
        let mesh = Mesh {
            nodes: vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
            triangles: vec![[0, 1, 2]],
            boundary_edges: vec![],
            segments: vec![],
        };
        let a = assemble(&mesh, &EllipticCoefficients::laplace()).unwrap();
        let expected = [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((a.stiffness.get(i, j) - expected[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn constants_in_stiffness_kernel() {
        let mesh = square(5, 4, 0.75);
        let a = assemble(&mesh, &EllipticCoefficients::laplace()).unwrap();
        let ones = vec![1.0; mesh.node_count()];
        assert!(max_abs(&a.stiffness.mul_vec(&ones)) < 1e-12);
        assert!(a.stiffness.max_asymmetry() == 0.0);
    }

    #[test]
    fn mass_row_sums_partition_area() {
        let mesh = square(4, 3, 0.75);
        let a = assemble(&mesh, &EllipticCoefficients::laplace()).unwrap();
        let ones = vec![1.0; mesh.node_count()];
        let rows = a.mass.mul_vec(&ones);
        let mut expected = vec![0.0; mesh.node_count()];
        for t in 0..mesh.triangle_count() {
            for &n in &mesh.triangles[t] {
                expected[n] += mesh.triangle_area(t) / 3.0;
            }
        }
        for (r, e) in rows.iter().zip(&expected) {
            assert!((r - e).abs() < 1e-15);
        }
        assert!((rows.iter().sum::<f64>() - 0.75).abs() < 1e-13);
    }

    #[test]
    fn ellipticity_violation_reported() {
        let mesh = square(2, 2, 1.0);
        let bad = EllipticCoefficients::constant([[1.0, 0.0], [0.0, 0.1]], 0.5);
        assert!(matches!(assemble(&mesh, &bad), Err(Error::InvalidCoefficients { .. })));
    }

    #[test]
    fn constant_dirichlet_gives_constant() {
        let mesh = square(6, 6, 1.0);
        let coeffs = EllipticCoefficients::laplace();
        let mut bvp = MixedBvp::new(&mesh, &coeffs);
        bvp.dirichlet = dirichlet_all(&mesh, |_| 1.0);
        let u = solve_mixed(&bvp).unwrap();
        assert!(u.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let t = dirichlet_trace(&mesh, &u, "gamma2").unwrap();
        assert!(t.values.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn pure_neumann_is_ill_posed() {
        let mesh = square(2, 2, 1.0);
        let coeffs = EllipticCoefficients::laplace();
        let mut bvp = MixedBvp::new(&mesh, &coeffs);
        for s in &mesh.segments {
            bvp.neumann.push(TraceField::zeros(&mesh, &s.tag.name, TraceKind::Neumann).unwrap());
        }
        assert!(matches!(solve_mixed(&bvp), Err(Error::IllPosedBvp(_))));
    }

    #[test]
    fn missing_condition_is_ill_posed() {
        let mesh = square(2, 2, 1.0);
        let coeffs = EllipticCoefficients::laplace();
        let bvp = MixedBvp::new(&mesh, &coeffs)
            .with_dirichlet(TraceField::zeros(&mesh, "gamma1", TraceKind::Dirichlet).unwrap());
        assert!(matches!(solve_mixed(&bvp), Err(Error::IllPosedBvp(_))));
    }

    fn half_step_bvp<'a>(mesh: &'a Mesh, coeffs: &'a EllipticCoefficients) -> MixedBvp<'a> {
        let h = 0.75;
        MixedBvp::new(mesh, coeffs)
            .with_dirichlet(
                TraceField::from_fn(mesh, "gamma1", TraceKind::Dirichlet, |p| (PI * p[0]).sin()).unwrap(),
            )
            .with_dirichlet(TraceField::zeros(mesh, "gamma3", TraceKind::Dirichlet).unwrap())
            .with_dirichlet(TraceField::zeros(mesh, "gamma4", TraceKind::Dirichlet).unwrap())
            .with_neumann(
                TraceField::from_fn(mesh, "gamma2", TraceKind::Neumann, |p| {
                    PI * (PI * h).sinh() * (PI * p[0]).sin()
                })
                .unwrap(),
            )
    }

    fn exact_square(p: Point) -> f64 {
        (PI * p[1]).cosh() * (PI * p[0]).sin()
    }

    #[test]
    fn square_half_step_matches_exact_solution() {
        let coeffs = EllipticCoefficients::laplace();
        let mut errors = Vec::new();
        for n in [8, 16, 32] {
            let mesh = square(n, 3 * n / 4, 0.75);
            let u = solve_mixed(&half_step_bvp(&mesh, &coeffs)).unwrap();
            let a = assemble(&mesh, &coeffs).unwrap();
            let exact = Field::from_fn(&mesh, exact_square);
            let e: Vec<f64> = u.values.iter().zip(&exact.values).map(|(a, b)| a - b).collect();
            errors.push(a.l2_norm(&e));
        }
        for w in errors.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!(order >= 1.8, "observed order {order}, errors {errors:?}");
        }
        // the Γ₂ trace approximates cosh(3π/4) sin(πx)
        let mesh = square(32, 24, 0.75);
        let u = solve_mixed(&half_step_bvp(&mesh, &coeffs)).unwrap();
        let t = dirichlet_trace(&mesh, &u, "gamma2").unwrap();
        let exact = TraceField::from_fn(&mesh, "gamma2", TraceKind::Dirichlet, exact_square).unwrap();
        assert!(t.max_abs_diff(&exact) < 0.05 * (0.75 * PI).cosh());
    }

    #[test]
    fn linearity_in_data() {
        let mesh = square(8, 6, 0.75);
        let coeffs = EllipticCoefficients::laplace();
        let bvp = half_step_bvp(&mesh, &coeffs);
        let u = solve_mixed(&bvp).unwrap();
        let mut doubled = bvp.clone();
        for t in doubled.dirichlet.iter_mut().chain(doubled.neumann.iter_mut()) {
            *t = t.scaled(2.0);
        }
        let u2 = solve_mixed(&doubled).unwrap();
        for (a, b) in u.values.iter().zip(&u2.values) {
            assert!((2.0 * a - b).abs() < 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn solution_independent_of_node_numbering() {
        let mesh = square(6, 5, 0.75);
        let n = mesh.node_count();
        let perm: Vec<usize> = (0..n).map(|i| (i * 11 + 3) % n).collect();
        assert_eq!(
            {
                let mut p = perm.clone();
                p.sort_unstable();
                p
            },
            (0..n).collect::<Vec<_>>()
        );
        let permuted = mesh.renumbered(&perm).unwrap();
        let coeffs = EllipticCoefficients::laplace();
        let u = solve_mixed(&half_step_bvp(&mesh, &coeffs)).unwrap();
        let v = solve_mixed(&half_step_bvp(&permuted, &coeffs)).unwrap();
        for old in 0..n {
            assert!((u.values[old] - v.values[perm[old]]).abs() < 1e-10);
        }
    }

    #[test]
    fn flux_of_constant_is_zero() {
        let mesh = square(4, 4, 1.0);
        let coeffs = EllipticCoefficients::laplace();
        let mut bvp = MixedBvp::new(&mesh, &coeffs);
        bvp.dirichlet = dirichlet_all(&mesh, |_| 1.0);
        let u = Field::from_fn(&mesh, |_| 1.0);
        let flux = neumann_trace(&bvp, &u, "gamma2").unwrap();
        assert!(flux.values.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn flux_of_linear_field_is_exact() {
        // u = y: flux +1 on top, -1 on bottom, 0 on the sides
        let mesh = square(5, 5, 1.0);
        let coeffs = EllipticCoefficients::laplace();
        let bvp = MixedBvp::new(&mesh, &coeffs)
            .with_dirichlet(TraceField::from_fn(&mesh, "gamma1", TraceKind::Dirichlet, |p| p[1]).unwrap())
            .with_dirichlet(TraceField::from_fn(&mesh, "gamma2", TraceKind::Dirichlet, |p| p[1]).unwrap())
            .with_neumann(TraceField::zeros(&mesh, "gamma3", TraceKind::Neumann).unwrap())
            .with_neumann(TraceField::zeros(&mesh, "gamma4", TraceKind::Neumann).unwrap());
        let u = solve_mixed(&bvp).unwrap();
        let y = Field::from_fn(&mesh, |p| p[1]);
        assert!(u.values.iter().zip(&y.values).all(|(a, b)| (a - b).abs() < 1e-12));
        let top = neumann_trace(&bvp, &u, "gamma2").unwrap();
        assert!(top.values.iter().all(|v| (v - 1.0).abs() < 1e-10), "{:?}", top.values);
        let bottom = neumann_trace(&bvp, &u, "gamma1").unwrap();
        assert!(bottom.values.iter().all(|v| (v + 1.0).abs() < 1e-10));
    }

    #[test]
    fn flux_of_exact_field_converges() {
        let coeffs = EllipticCoefficients::laplace();
        let mut errs = Vec::new();
        for n in [16, 32] {
            let mesh = square(n, 3 * n / 4, 0.75);
            let bvp = half_step_bvp(&mesh, &coeffs);
            let u = Field::from_fn(&mesh, exact_square);
            // corners are Dirichlet nodes of the side segments; the exact flux vanishes there
            let seg = &mesh.segment("gamma2").unwrap().nodes;
            let (first, last) = (seg[0], seg[seg.len() - 1]);
            let flux = neumann_trace_pinned(&bvp, &u, "gamma2", |n| n == first || n == last).unwrap();
            let exact = TraceField::from_fn(&mesh, "gamma2", TraceKind::Neumann, |p| {
                PI * (0.75 * PI).sinh() * (PI * p[0]).sin()
            })
            .unwrap();
            let e = flux
                .values
                .iter()
                .zip(&exact.values)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            errs.push(e / (PI * (0.75 * PI).sinh()));
        }
        assert!(errs[1] < errs[0], "{errs:?}");
        assert!(errs[1] < 0.05, "{errs:?}");
    }

    #[test]
    fn discrete_green_identity() {
        let mesh = square(10, 8, 0.75);
        let coeffs = EllipticCoefficients::laplace();
        let bvp = half_step_bvp(&mesh, &coeffs);
        let w = solve_mixed(&bvp).unwrap();
        let a = assemble(&mesh, &coeffs).unwrap();
        // every segment's flux, recovered with the other segments' known loads removed
        let fluxes: Vec<TraceField> = mesh
            .segments
            .iter()
            .map(|s| neumann_trace(&bvp, &w, &s.tag.name).unwrap())
            .collect();
        // the residual at boundary rows is split over segments; the identity
        // holds for test functions vanishing at corners
        let v: Vec<f64> = mesh
            .nodes
            .iter()
            .map(|p| (3.0 * p[0]).sin() * (1.0 + p[1]) * p[0] * (1.0 - p[0]))
            .collect();
        let lhs = a.stiffness.bilinear(&v, &w.values);
        let mut rhs = 0.0;
        for (s, flux) in mesh.segments.iter().zip(&fluxes) {
            let m = a.segment_mass(&s.tag.name).unwrap();
            let vs: Vec<f64> = s.nodes.iter().map(|&n| v[n]).collect();
            rhs += m.inner(&vs, &flux.values);
        }
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }

    fn annulus(nr: usize, nt: usize) -> Mesh {
        let tags = AnnulusTags {
            inner: SegmentTag::cauchy("inner"),
            outer: OuterTags::Whole(SegmentTag::reconstruction("outer")),
        };
        build_annulus_mesh(nr, nt, 1.0, 7.0, &tags).unwrap()
    }

    #[test]
    fn annulus_mixed_problem() {
        let mesh = annulus(32, 128);
        let coeffs = EllipticCoefficients::laplace();
        let exact = |p: Point| {
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            let s = p[1] / r;
            (r + 1.0 / r) * s / 2.0
        };
        let bvp = MixedBvp::new(&mesh, &coeffs)
            .with_dirichlet(TraceField::from_fn(&mesh, "inner", TraceKind::Dirichlet, exact).unwrap())
            .with_neumann(
                TraceField::from_fn(&mesh, "outer", TraceKind::Neumann, |p| {
                    let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
                    (1.0 - 1.0 / (r * r)) * (p[1] / r) / 2.0
                })
                .unwrap(),
            );
        let u = solve_mixed(&bvp).unwrap();
        let err = u
            .values
            .iter()
            .zip(&mesh.nodes)
            .fold(0.0f64, |m, (v, &p)| m.max((v - exact(p)).abs()));
        assert!(err < 0.1, "max error {err}");
    }

    fn cubic() -> Semilinear {
        Semilinear {
            term: Arc::new(|u| -u * u * u),
            derivative: Arc::new(|u| -3.0 * u * u),
            source: Arc::new(|_| -1.0),
        }
    }

    #[test]
    fn semilinear_constant_manufactured_solution() {
        // Δu + u³ = 1 with u = 1 on the boundary has u ≡ 1
        let mesh = square(6, 6, 1.0);
        let coeffs = EllipticCoefficients::laplace().with_semilinear(cubic());
        let mut bvp = MixedBvp::new(&mesh, &coeffs);
        bvp.dirichlet = dirichlet_all(&mesh, |_| 1.0);
        let assembly = assemble(&mesh, &coeffs).unwrap();
        let tags: Vec<&str> = bvp.dirichlet.iter().map(|t| t.tag.as_str()).collect();
        let system = MixedSystem::new(&mesh, &assembly, &tags).unwrap();
        let load = bvp.linear_load(&assembly, None).unwrap();
        let out = picard(
            &system,
            &assembly,
            coeffs.semilinear.as_ref().unwrap(),
            &bvp.dirichlet_values().unwrap(),
            &load,
            &vec![1.0; mesh.node_count()],
            PicardSettings::default(),
        )
        .unwrap();
        assert!(out.updates.len() <= 3);
        assert!(out.values.iter().all(|v| (v - 1.0).abs() < 1e-10));

        let from_zero = solve_semilinear(&bvp, &Field::zeros(&mesh), 1e-10, 50).unwrap();
        assert!(from_zero.values.iter().all(|v| (v - 1.0).abs() < 1e-8));
    }

    #[test]
    fn zero_nonlinearity_reduces_to_linear_solve() {
        let mesh = square(8, 6, 0.75);
        let linear = EllipticCoefficients::laplace();
        let zero = EllipticCoefficients::laplace().with_semilinear(Semilinear {
            term: Arc::new(|_| 0.0),
            derivative: Arc::new(|_| 0.0),
            source: Arc::new(|_| 0.0),
        });
        let u = solve_mixed(&half_step_bvp(&mesh, &linear)).unwrap();
        let v = solve_semilinear(&half_step_bvp(&mesh, &zero), &Field::zeros(&mesh), 1e-8, 50).unwrap();
        assert!(u.values.iter().zip(&v.values).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn nonlinear_divergence_reports_history() {
        let mesh = square(6, 6, 1.0);
        let coeffs = EllipticCoefficients::laplace().with_semilinear(cubic());
        let mut bvp = MixedBvp::new(&mesh, &coeffs);
        bvp.dirichlet = dirichlet_all(&mesh, |_| 1.0);
        match solve_semilinear(&bvp, &Field::zeros(&mesh), 1e-14, 2) {
            Err(Error::NonlinearDivergence { history }) => assert_eq!(history.len(), 2),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn trace_csv_has_header() {
        let mesh = square(2, 2, 1.0);
        let t = TraceField::from_fn(&mesh, "gamma2", TraceKind::Dirichlet, |p| p[0]).unwrap();
        let mut out = Vec::new();
        t.write_csv(&mesh, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("arclength,value\n0.0,0.0\n"));
    }
}
