//! Spatial domains: triangulated mesh (SPDE, α = 2), areal graph (SAR),
//! stream network (Ornstein-Uhlenbeck on a tree) and the single-site fallback.

use std::collections::{BTreeSet, VecDeque};
use std::io::BufRead;

use crate::error::{Error, Result};
use crate::sparse::{CscMatrix, SparseSymMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    vertices: Vec<[f64; 2]>,
    triangles: Vec<[usize; 3]>,
    mass: Vec<f64>,
    stiffness: CscMatrix,
    /// `G C⁻¹ G`, fixed for the mesh.
    gcg: CscMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArealGraph {
    /// Row-normalized adjacency.
    w: CscMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamNetwork {
    parent: Vec<Option<usize>>,
    distance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpatialDomain {
    Mesh(Mesh),
    Areal(ArealGraph),
    Stream(StreamNetwork),
    SingleSite,
}

/// Which decorrelation parameter a domain carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialParam {
    Kappa,
    Rho,
    Theta,
}

impl SpatialParam {
    pub fn name(self) -> &'static str {
        match self {
            SpatialParam::Kappa => "kappa",
            SpatialParam::Rho => "rho",
            SpatialParam::Theta => "theta",
        }
    }
}

/// Where a sample sits: coordinates for meshes, a node id otherwise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SiteLocation {
    Point(f64, f64),
    Node(usize),
    Anywhere,
}

/// Up to three `(node, weight)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectorRow {
    pub entries: Vec<(usize, f64)>,
}

impl ProjectorRow {
    pub fn unit(node: usize) -> Self {
        Self {
            entries: vec![(node, 1.0)],
        }
    }

    pub fn apply(&self, values: &[f64]) -> f64 {
        self.entries.iter().map(|&(s, w)| w * values[s]).sum()
    }
}

fn triangle_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

impl Mesh {
    pub fn new(vertices: Vec<[f64; 2]>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let n = vertices.len();
        if n == 0 {
            return Err(Error::Domain("mesh has no vertices".into()));
        }
        let extent = vertices
            .iter()
            .flat_map(|v| v.iter())
            .fold(0.0f64, |m, x| m.max(x.abs()))
            .max(1.0);
        let mut mass = vec![0.0; n];
        let mut triplets = Vec::with_capacity(9 * triangles.len());
        for (t, tri) in triangles.iter().enumerate() {
            if let Some(&bad) = tri.iter().find(|&&i| i >= n) {
                return Err(Error::Domain(format!("triangle {t} references vertex {bad}")));
            }
            let p = tri.map(|i| vertices[i]);
            let area = triangle_area(p[0], p[1], p[2]).abs();
            if area <= 1e-14 * extent * extent {
                return Err(Error::Domain(format!("triangle {t} is degenerate")));
            }
            // edge opposite each vertex
            let e = [
                [p[2][0] - p[1][0], p[2][1] - p[1][1]],
                [p[0][0] - p[2][0], p[0][1] - p[2][1]],
                [p[1][0] - p[0][0], p[1][1] - p[0][1]],
            ];
            for i in 0..3 {
                mass[tri[i]] += area / 3.0;
                for j in 0..3 {
                    let g = (e[i][0] * e[j][0] + e[i][1] * e[j][1]) / (4.0 * area);
                    triplets.push((tri[i], tri[j], g));
                }
            }
        }
        if let Some(v) = mass.iter().position(|&m| m <= 0.0) {
            return Err(Error::Domain(format!("vertex {v} belongs to no triangle")));
        }
        let stiffness = CscMatrix::from_triplets(n, n, &triplets);
        let inv_mass = CscMatrix::from_diagonal(&mass.iter().map(|m| 1.0 / m).collect::<Vec<_>>());
        let gcg = stiffness.mul(&inv_mass).mul(&stiffness);
        Ok(Self {
            vertices,
            triangles,
            mass,
            stiffness,
            gcg,
        })
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut vertices = Vec::new();
        let mut triangles = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Parse(format!("mesh line {}: {}", idx + 1, line.trim()));
            match toks.first().copied() {
                None => {}
                Some(t) if t.starts_with('#') => {}
                Some("v") if toks.len() == 3 => {
                    let x = toks[1].parse().map_err(|_| bad())?;
                    let y = toks[2].parse().map_err(|_| bad())?;
                    vertices.push([x, y]);
                }
                Some("t") if toks.len() == 4 => {
                    let mut tri = [0usize; 3];
                    for k in 0..3 {
                        tri[k] = toks[k + 1].parse().map_err(|_| bad())?;
                    }
                    triangles.push(tri);
                }
                _ => return Err(bad()),
            }
        }
        Self::new(vertices, triangles)
    }

    pub fn n_nodes(&self) -> usize {
        self.vertices.len()
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    /// Lumped (diagonal) mass matrix.
    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn stiffness(&self) -> &CscMatrix {
        &self.stiffness
    }

    /// Regular triangulation of `[x0, x1] × [y0, y1]` with `nx × ny` vertices.
    pub fn grid(nx: usize, ny: usize, x: (f64, f64), y: (f64, f64)) -> Result<Self> {
        if nx < 2 || ny < 2 {
            return Err(Error::Domain("grid mesh needs at least 2 × 2 vertices".into()));
        }
        let mut vertices = Vec::with_capacity(nx * ny);
        for j in 0..ny {
            for i in 0..nx {
                vertices.push([
                    x.0 + (x.1 - x.0) * i as f64 / (nx - 1) as f64,
                    y.0 + (y.1 - y.0) * j as f64 / (ny - 1) as f64,
                ]);
            }
        }
        let mut triangles = Vec::new();
        for j in 0..ny - 1 {
            for i in 0..nx - 1 {
                let a = j * nx + i;
                let (b, c, d) = (a + 1, a + nx, a + nx + 1);
                triangles.push([a, b, d]);
                triangles.push([a, d, c]);
            }
        }
        Self::new(vertices, triangles)
    }

    fn locate(&self, x: f64, y: f64) -> Option<ProjectorRow> {
        const TOL: f64 = 1e-10;
        for tri in &self.triangles {
            let p = tri.map(|i| self.vertices[i]);
            let area = triangle_area(p[0], p[1], p[2]);
            let q = [x, y];
            let mut w = [
                triangle_area(q, p[1], p[2]) / area,
                triangle_area(p[0], q, p[2]) / area,
                triangle_area(p[0], p[1], q) / area,
            ];
            if w.iter().any(|&wi| wi < -TOL) {
                continue;
            }
            for wi in w.iter_mut() {
                if *wi < 1e-12 {
                    *wi = 0.0;
                }
            }
            let total: f64 = w.iter().sum();
            let entries = (0..3)
                .filter(|&k| w[k] > 0.0)
                .map(|k| (tri[k], w[k] / total))
                .collect();
            return Some(ProjectorRow { entries });
        }
        None
    }
}

impl ArealGraph {
    /// Builds a graph from undirected edges over `n` nodes; the adjacency is
    /// symmetrized, then row-normalized.
    pub fn new(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut neighbours = vec![BTreeSet::new(); n];
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(Error::Domain(format!("edge ({i}, {j}) outside {n} nodes")));
            }
            if i == j {
                return Err(Error::Domain(format!("self edge at node {i}")));
            }
            neighbours[i].insert(j);
            neighbours[j].insert(i);
        }
        let mut triplets = Vec::new();
        for (i, nb) in neighbours.iter().enumerate() {
            let deg = nb.len() as f64;
            triplets.extend(nb.iter().map(|&j| (i, j, 1.0 / deg)));
        }
        Ok(Self {
            w: CscMatrix::from_triplets(n, n, &triplets),
        })
    }

    /// Edge list `i j` per line; a line with a single index declares a node.
    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut edges = Vec::new();
        let mut n = 0;
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.is_empty() || toks[0].starts_with('#') {
                continue;
            }
            let bad = || Error::Parse(format!("graph line {}: {}", idx + 1, line.trim()));
            let ids: Vec<usize> = toks
                .iter()
                .map(|t| t.parse().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            match ids[..] {
                [i] => n = n.max(i + 1),
                [i, j] => {
                    n = n.max(i.max(j) + 1);
                    edges.push((i, j));
                }
                _ => return Err(bad()),
            }
        }
        Self::new(n, &edges)
    }

    pub fn n_nodes(&self) -> usize {
        self.w.nrows()
    }

    pub fn weights(&self) -> &CscMatrix {
        &self.w
    }
}

impl StreamNetwork {
    pub fn new(parent: Vec<Option<usize>>, distance: Vec<f64>) -> Result<Self> {
        let n = parent.len();
        if distance.len() != n {
            return Err(Error::Dimension("parent and distance lengths differ".into()));
        }
        let mut children = vec![Vec::new(); n];
        for (i, p) in parent.iter().enumerate() {
            if let Some(p) = *p {
                if p >= n {
                    return Err(Error::Domain(format!("node {i} has unknown parent {p}")));
                }
                if !(distance[i] > 0.0 && distance[i].is_finite()) {
                    return Err(Error::Domain(format!("node {i} has nonpositive distance {}", distance[i])));
                }
                children[p].push(i);
            }
        }
        let mut seen = 0;
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| parent[i].is_none()).collect();
        while let Some(i) = queue.pop_front() {
            seen += 1;
            queue.extend(children[i].iter().copied());
        }
        if seen != n {
            return Err(Error::Domain("stream network contains a cycle".into()));
        }
        Ok(Self { parent, distance })
    }

    /// Lines `node parent distance`, parent `-1` for roots.
    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut rows: Vec<(usize, Option<usize>, f64)> = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.is_empty() || toks[0].starts_with('#') {
                continue;
            }
            let bad = || Error::Parse(format!("stream line {}: {}", idx + 1, line.trim()));
            if toks.len() != 3 {
                return Err(bad());
            }
            let node: usize = toks[0].parse().map_err(|_| bad())?;
            let parent: i64 = toks[1].parse().map_err(|_| bad())?;
            let d: f64 = toks[2].parse().map_err(|_| bad())?;
            let parent = match parent {
                -1 => None,
                p if p >= 0 => Some(p as usize),
                _ => return Err(bad()),
            };
            rows.push((node, parent, d));
        }
        let n = rows.len();
        let mut parent = vec![None; n];
        let mut distance = vec![0.0; n];
        let mut set = vec![false; n];
        for (node, p, d) in rows {
            if node >= n || set[node] {
                return Err(Error::Domain(format!("node ids must be 0..{n} each listed once (got {node})")));
            }
            set[node] = true;
            parent[node] = p;
            distance[node] = d;
        }
        Self::new(parent, distance)
    }

    pub fn n_nodes(&self) -> usize {
        self.parent.len()
    }

    pub fn parent(&self) -> &[Option<usize>] {
        &self.parent
    }

    pub fn distance(&self) -> &[f64] {
        &self.distance
    }
}

pub fn build_mesh_precision(mesh: &Mesh, kappa: f64) -> Result<SparseSymMatrix> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::Parameter(format!("kappa must be positive, got {kappa}")));
    }
    let k2 = kappa * kappa;
    let c = CscMatrix::from_diagonal(&mesh.mass);
    let q = c
        .add_scaled(k2 * k2, &mesh.stiffness, 2.0 * k2)
        .add_scaled(1.0, &mesh.gcg, 1.0);
    SparseSymMatrix::from_csc(&q)
}

/// `dQ/dκ = 4κ³C + 4κG`.
pub fn mesh_precision_derivative(mesh: &Mesh, kappa: f64) -> CscMatrix {
    let c = CscMatrix::from_diagonal(&mesh.mass);
    c.add_scaled(4.0 * kappa.powi(3), &mesh.stiffness, 4.0 * kappa)
}

pub fn build_sar_precision(graph: &ArealGraph, rho: f64, sd: f64) -> Result<SparseSymMatrix> {
    if !(rho > -1.0 && rho < 1.0) {
        return Err(Error::Parameter(format!("rho must lie in (-1, 1), got {rho}")));
    }
    if !(sd > 0.0 && sd.is_finite()) {
        return Err(Error::Parameter(format!("sd must be positive, got {sd}")));
    }
    let n = graph.n_nodes();
    let a = CscMatrix::identity(n).add_scaled(1.0, &graph.w, -rho);
    let mut q = a.transpose().mul(&a);
    q.scale(1.0 / (sd * sd));
    SparseSymMatrix::from_csc(&q)
}

pub fn build_stream_precision(net: &StreamNetwork, theta: f64) -> Result<SparseSymMatrix> {
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(Error::Parameter(format!("theta must be positive, got {theta}")));
    }
    let n = net.n_nodes();
    let mut triplets = Vec::with_capacity(n + 3 * n);
    for i in 0..n {
        match net.parent[i] {
            None => triplets.push((i, i, 1.0)),
            Some(p) => {
                let r = (-theta * net.distance[i]).exp();
                let v = -(-2.0 * theta * net.distance[i]).exp_m1();
                triplets.push((i, i, 1.0 / v));
                triplets.push((p, p, r * r / v));
                triplets.push((i, p, -r / v));
                triplets.push((p, i, -r / v));
            }
        }
    }
    SparseSymMatrix::from_symmetric(CscMatrix::from_triplets(n, n, &triplets))
}

impl SpatialDomain {
    pub fn n_nodes(&self) -> usize {
        match self {
            SpatialDomain::Mesh(m) => m.n_nodes(),
            SpatialDomain::Areal(g) => g.n_nodes(),
            SpatialDomain::Stream(s) => s.n_nodes(),
            SpatialDomain::SingleSite => 1,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            SpatialDomain::Mesh(_) => "mesh",
            SpatialDomain::Areal(_) => "areal",
            SpatialDomain::Stream(_) => "stream",
            SpatialDomain::SingleSite => "single_site",
        }
    }

    pub fn param(&self) -> Option<SpatialParam> {
        match self {
            SpatialDomain::Mesh(_) => Some(SpatialParam::Kappa),
            SpatialDomain::Areal(_) => Some(SpatialParam::Rho),
            SpatialDomain::Stream(_) => Some(SpatialParam::Theta),
            SpatialDomain::SingleSite => None,
        }
    }

    /// Spatial precision at the natural-scale parameter (ignored for a single site).
    /// SAR uses unit sd: scale lives in the variable-level matrices.
    pub fn precision(&self, param: f64) -> Result<SparseSymMatrix> {
        match self {
            SpatialDomain::Mesh(m) => build_mesh_precision(m, param),
            SpatialDomain::Areal(g) => build_sar_precision(g, param, 1.0),
            SpatialDomain::Stream(s) => build_stream_precision(s, param),
            SpatialDomain::SingleSite => Ok(SparseSymMatrix::identity(1)),
        }
    }

    pub fn make_projector(&self, sites: &[SiteLocation]) -> Result<Vec<ProjectorRow>> {
        sites
            .iter()
            .enumerate()
            .map(|(i, &site)| self.project_one(i, site))
            .collect()
    }

    pub fn project_one(&self, sample: usize, site: SiteLocation) -> Result<ProjectorRow> {
        match (self, site) {
            (SpatialDomain::SingleSite, _) => Ok(ProjectorRow::unit(0)),
            (SpatialDomain::Mesh(m), SiteLocation::Point(x, y)) => {
                m.locate(x, y).ok_or(Error::OutsideMesh { sample, x, y })
            }
            (SpatialDomain::Mesh(_), _) => Err(Error::Data(format!(
                "sample {sample}: mesh domains need coordinates"
            ))),
            (_, SiteLocation::Node(id)) => {
                if id < self.n_nodes() {
                    Ok(ProjectorRow::unit(id))
                } else {
                    Err(Error::Data(format!("sample {sample}: unknown node id {id}")))
                }
            }
            (_, _) => Err(Error::Data(format!("sample {sample}: graph domains need a node id"))),
        }
    }
}
