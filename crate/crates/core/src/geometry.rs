//! Structured triangulations of rectangles and annuli with tagged boundary
//! segments.
//!
//! Corner ownership: segment node lists always include their endpoints, so a
//! corner node appears in both adjacent segments. When boundary conditions
//! are applied, a node shared by a Dirichlet and a Neumann segment is treated
//! as Dirichlet (see [`crate::fem`]).
//!
//! Annulus circles are polygonal: nodes sit exactly on the circles, edges are
//! chords. No inscribed-polygon radius correction is applied.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmentRole {
    /// Γ₁: both Dirichlet and Neumann data are known here.
    CauchyData,
    /// Γ₂: the inaccessible part whose traces are reconstructed.
    Reconstruction,
    /// Γ₃, Γ₄, Γ_i: carries an additional boundary condition.
    Auxiliary,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SegmentTag {
    pub name: String,
    pub role: SegmentRole,
}

impl SegmentTag {
    pub fn new(name: impl Into<String>, role: SegmentRole) -> Self {
        Self {
            name: name.into(),
            role,
        }
    }

    pub fn cauchy(name: impl Into<String>) -> Self {
        Self::new(name, SegmentRole::CauchyData)
    }

    pub fn reconstruction(name: impl Into<String>) -> Self {
        Self::new(name, SegmentRole::Reconstruction)
    }

    pub fn auxiliary(name: impl Into<String>) -> Self {
        Self::new(name, SegmentRole::Auxiliary)
    }
}

/// One tagged boundary segment: its nodes in arclength order.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub tag: SegmentTag,
    pub nodes: Vec<usize>,
    pub arclength: Vec<f64>,
    /// Closed loop (full circle). The first node appears once, at parameter 0.
    pub closed: bool,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Consecutive node pairs forming the segment's edges (including the
    /// closing edge of a loop).
    pub fn edges(&self) -> Vec<[usize; 2]> {
        let n = self.nodes.len();
        let mut edges: Vec<[usize; 2]> = self.nodes.windows(2).map(|w| [w[0], w[1]]).collect();
        if self.closed && n > 2 {
            edges.push([self.nodes[n - 1], self.nodes[0]]);
        }
        edges
    }

    /// Total length, including the closing edge for loops.
    pub fn total_length(&self, mesh: &Mesh) -> f64 {
        self.edges()
            .iter()
            .map(|&[a, b]| distance(mesh.nodes[a], mesh.nodes[b]))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryEdge {
    pub nodes: [usize; 2],
    /// Index into [`Mesh::segments`].
    pub segment: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub nodes: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
    pub boundary_edges: Vec<BoundaryEdge>,
    pub segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RectTags {
    pub bottom: SegmentTag,
    pub top: SegmentTag,
    pub left: SegmentTag,
    pub right: SegmentTag,
}

impl RectTags {
    /// Γ₁ = bottom (data), Γ₂ = top (reconstruction), Γ₃ = left, Γ₄ = right.
    pub fn cauchy_bottom() -> Self {
        Self {
            bottom: SegmentTag::cauchy("gamma1"),
            top: SegmentTag::reconstruction("gamma2"),
            left: SegmentTag::auxiliary("gamma3"),
            right: SegmentTag::auxiliary("gamma4"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OuterTags {
    Whole(SegmentTag),
    /// The outer circle split at two grid angles: `arc` covers the
    /// counter-clockwise range `from..to` (radians), `rest` the complement.
    Split {
        from: f64,
        to: f64,
        arc: SegmentTag,
        rest: SegmentTag,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnulusTags {
    pub inner: SegmentTag,
    pub outer: OuterTags,
}

pub fn distance(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

pub fn signed_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

/// Uniform `nx × ny` cell grid on `x_range × y_range`, each cell split along
/// its lower-left to upper-right diagonal.
pub fn build_rect_mesh(
    nx: usize,
    ny: usize,
    x_range: (f64, f64),
    y_range: (f64, f64),
    tags: &RectTags,
) -> Result<Mesh> {
    if nx == 0 || ny == 0 {
        return Err(Error::InvalidArgument(format!(
            "cell counts must be positive, got {nx}x{ny}"
        )));
    }
    if !(x_range.1 > x_range.0) || !(y_range.1 > y_range.0) {
        return Err(Error::InvalidArgument(format!(
            "empty interval {x_range:?} x {y_range:?}"
        )));
    }
    let id = |i: usize, j: usize| i + j * (nx + 1);
    let hx = (x_range.1 - x_range.0) / nx as f64;
    let hy = (y_range.1 - y_range.0) / ny as f64;

    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        for i in 0..=nx {
            let x = if i == nx { x_range.1 } else { x_range.0 + i as f64 * hx };
            let y = if j == ny { y_range.1 } else { y_range.0 + j as f64 * hy };
            nodes.push([x, y]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }

    let bottom: Vec<usize> = (0..=nx).map(|i| id(i, 0)).collect();
    let top: Vec<usize> = (0..=nx).map(|i| id(i, ny)).collect();
    let left: Vec<usize> = (0..=ny).map(|j| id(0, j)).collect();
    let right: Vec<usize> = (0..=ny).map(|j| id(nx, j)).collect();

    let segments = vec![
        open_segment(&nodes, tags.bottom.clone(), bottom),
        open_segment(&nodes, tags.top.clone(), top),
        open_segment(&nodes, tags.left.clone(), left),
        open_segment(&nodes, tags.right.clone(), right),
    ];
    assemble_mesh(nodes, triangles, segments)
}

/// Structured polar grid with `nr` radial and `ntheta` angular cells,
/// periodic in the angle. Node `(i, j)` sits at radius
/// `r_inner + i·Δr` and angle `2πj/ntheta`.
pub fn build_annulus_mesh(
    nr: usize,
    ntheta: usize,
    r_inner: f64,
    r_outer: f64,
    tags: &AnnulusTags,
) -> Result<Mesh> {
    if nr == 0 || ntheta < 3 {
        return Err(Error::InvalidArgument(format!(
            "need nr >= 1 and ntheta >= 3, got {nr}, {ntheta}"
        )));
    }
    if !(r_inner > 0.0 && r_outer > r_inner) {
        return Err(Error::InvalidArgument(format!(
            "radii must satisfy 0 < r_inner < r_outer, got {r_inner}, {r_outer}"
        )));
    }
    let id = |i: usize, j: usize| i * ntheta + (j % ntheta);
    let dr = (r_outer - r_inner) / nr as f64;
    let dtheta = 2.0 * PI / ntheta as f64;

    let mut nodes = Vec::with_capacity((nr + 1) * ntheta);
    for i in 0..=nr {
        let r = if i == nr { r_outer } else { r_inner + i as f64 * dr };
        for j in 0..ntheta {
            let t = j as f64 * dtheta;
            nodes.push([r * t.cos(), r * t.sin()]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * nr * ntheta);
    for i in 0..nr {
        for j in 0..ntheta {
            let (a, b, c, d) = (id(i, j), id(i + 1, j), id(i + 1, j + 1), id(i, j + 1));
            triangles.push([a, b, c]);
            triangles.push([a, c, d]);
        }
    }

    let inner: Vec<usize> = (0..ntheta).map(|j| id(0, j)).collect();
    let mut segments = vec![closed_segment(&nodes, tags.inner.clone(), inner)];
    match &tags.outer {
        OuterTags::Whole(tag) => {
            let outer: Vec<usize> = (0..ntheta).map(|j| id(nr, j)).collect();
            segments.push(closed_segment(&nodes, tag.clone(), outer));
        }
        OuterTags::Split {
            from,
            to,
            arc,
            rest,
        } => {
            let j_from = grid_angle_index(*from, ntheta)?;
            let j_to = grid_angle_index(*to, ntheta)?;
            if j_from == j_to {
                return Err(Error::InvalidArgument(
                    "split angles coincide on the grid".into(),
                ));
            }
            let walk = |start: usize, end: usize| -> Vec<usize> {
                let steps = (end + ntheta - start) % ntheta;
                (0..=steps).map(|s| id(nr, start + s)).collect()
            };
            segments.push(open_segment(&nodes, arc.clone(), walk(j_from, j_to)));
            segments.push(open_segment(&nodes, rest.clone(), walk(j_to, j_from)));
        }
    }
    assemble_mesh(nodes, triangles, segments)
}

fn grid_angle_index(angle: f64, ntheta: usize) -> Result<usize> {
    let t = angle.rem_euclid(2.0 * PI) / (2.0 * PI) * ntheta as f64;
    let j = t.round();
    if (t - j).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split angle {angle} is not a grid angle for ntheta = {ntheta}"
        )));
    }
    Ok(j as usize % ntheta)
}

fn cumulative_arclength(nodes: &[Point], ids: &[usize]) -> Vec<f64> {
    let mut s = Vec::with_capacity(ids.len());
    let mut acc = 0.0;
    for (k, &n) in ids.iter().enumerate() {
        if k > 0 {
            acc += distance(nodes[ids[k - 1]], nodes[n]);
        }
        s.push(acc);
    }
    s
}

fn open_segment(nodes: &[Point], tag: SegmentTag, ids: Vec<usize>) -> Segment {
    Segment {
        arclength: cumulative_arclength(nodes, &ids),
        tag,
        nodes: ids,
        closed: false,
    }
}

fn closed_segment(nodes: &[Point], tag: SegmentTag, ids: Vec<usize>) -> Segment {
    Segment {
        arclength: cumulative_arclength(nodes, &ids),
        tag,
        nodes: ids,
        closed: true,
    }
}

fn assemble_mesh(nodes: Vec<Point>, triangles: Vec<[usize; 3]>, segments: Vec<Segment>) -> Result<Mesh> {
    let mut names = HashMap::new();
    for (k, s) in segments.iter().enumerate() {
        if names.insert(s.tag.name.clone(), k).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate segment tag '{}'",
                s.tag.name
            )));
        }
    }
    let boundary_edges = segments
        .iter()
        .enumerate()
        .flat_map(|(k, s)| {
            s.edges()
                .into_iter()
                .map(move |nodes| BoundaryEdge { nodes, segment: k })
        })
        .collect();
    let mesh = Mesh {
        nodes,
        triangles,
        boundary_edges,
        segments,
    };
    mesh.validate()?;
    Ok(mesh)
}

impl Mesh {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn triangle_count(&self) -> usize {
        self.triangles.len()
    }

    pub fn segment(&self, name: &str) -> Result<&Segment> {
        self.segments
            .iter()
            .find(|s| s.tag.name == name)
            .ok_or_else(|| Error::NotFound(format!("segment tag '{name}'")))
    }

    pub fn segment_index(&self, name: &str) -> Result<usize> {
        self.segments
            .iter()
            .position(|s| s.tag.name == name)
            .ok_or_else(|| Error::NotFound(format!("segment tag '{name}'")))
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        signed_area(self.nodes[a], self.nodes[b], self.nodes[c])
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// Checks orientation, conformity and that tagged edges partition the
    /// boundary.
    pub fn validate(&self) -> Result<()> {
        for (t, tri) in self.triangles.iter().enumerate() {
            if tri.iter().any(|&n| n >= self.nodes.len()) {
                return Err(Error::InvalidArgument(format!("triangle {t} references a missing node")));
            }
            if !(self.triangle_area(t) > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "triangle {t} has non-positive signed area"
                )));
            }
        }
        let mut edge_use: HashMap<(usize, usize), usize> = HashMap::new();
        for tri in &self.triangles {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                *edge_use.entry((a.min(b), a.max(b))).or_default() += 1;
            }
        }
        if let Some((e, _)) = edge_use.iter().find(|(_, &c)| c > 2) {
            return Err(Error::InvalidArgument(format!("edge {e:?} shared by more than two triangles")));
        }
        let mut tagged: HashMap<(usize, usize), usize> = HashMap::new();
        for be in &self.boundary_edges {
            let [a, b] = be.nodes;
            *tagged.entry((a.min(b), a.max(b))).or_default() += 1;
        }
        for (e, &count) in &edge_use {
            let tags = tagged.get(e).copied().unwrap_or(0);
            let expected = usize::from(count == 1);
            if tags != expected {
                return Err(Error::InvalidArgument(format!(
                    "edge {e:?} used by {count} triangle(s) carries {tags} tag(s)"
                )));
            }
        }
        if tagged.len() != self.boundary_edges.len() || tagged.keys().any(|e| !edge_use.contains_key(e)) {
            return Err(Error::InvalidArgument("tagged edge is not a mesh edge or is tagged twice".into()));
        }
        for s in &self.segments {
            if s.arclength.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(Error::InvalidArgument(format!(
                    "segment '{}' is not ordered by arclength",
                    s.tag.name
                )));
            }
        }
        Ok(())
    }

    /// Relabels nodes: node `old` becomes `perm[old]`.
    pub fn renumbered(&self, perm: &[usize]) -> Result<Mesh> {
        if perm.len() != self.nodes.len() {
            return Err(Error::InvalidArgument("permutation length mismatch".into()));
        }
        let mut nodes = vec![[0.0; 2]; self.nodes.len()];
        for (old, &new) in perm.iter().enumerate() {
            nodes[new] = self.nodes[old];
        }
        let mesh = Mesh {
            nodes,
            triangles: self.triangles.iter().map(|t| t.map(|n| perm[n])).collect(),
            boundary_edges: self
                .boundary_edges
                .iter()
                .map(|e| BoundaryEdge {
                    nodes: e.nodes.map(|n| perm[n]),
                    segment: e.segment,
                })
                .collect(),
            segments: self
                .segments
                .iter()
                .map(|s| Segment {
                    nodes: s.nodes.iter().map(|&n| perm[n]).collect(),
                    ..s.clone()
                })
                .collect(),
        };
        mesh.validate()?;
        Ok(mesh)
    }

    /// Plain-text dump: node table, triangle table and tagged edge table.
    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        let mut buf = String::new();
        writeln!(buf, "# nodes {}", self.nodes.len()).unwrap();
        writeln!(buf, "# id x y").unwrap();
        for (i, p) in self.nodes.iter().enumerate() {
            writeln!(buf, "{i} {:?} {:?}", p[0], p[1]).unwrap();
        }
        writeln!(buf, "# triangles {}", self.triangles.len()).unwrap();
        writeln!(buf, "# id a b c").unwrap();
        for (i, t) in self.triangles.iter().enumerate() {
            writeln!(buf, "{i} {} {} {}", t[0], t[1], t[2]).unwrap();
        }
        writeln!(buf, "# edges {}", self.boundary_edges.len()).unwrap();
        writeln!(buf, "# a b tag").unwrap();
        for e in &self.boundary_edges {
            writeln!(buf, "{} {} {}", e.nodes[0], e.nodes[1], self.segments[e.segment].tag.name).unwrap();
        }
        out.write_all(buf.as_bytes())?;
        Ok(())
    }
}

/// The ordered nodes of a tagged segment with their arclength coordinates.
pub fn boundary_nodes<'m>(mesh: &'m Mesh, tag: &str) -> Result<&'m Segment> {
    mesh.segment(tag)
}
