//! Structural model: geometry, material regions and kinematic constraints.
//!
//! A [`Model`] is immutable once validated. It is produced either by the
//! structured arch-on-piers generator ([`ArchGeometry`]) or by parsing a mesh
//! file ([`Model::from_json`]).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type RegionId = u32;

/// In-plane displacement direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    X = 0,
    Y = 1,
}

impl Direction {
    pub fn from_index(d: u8) -> Option<Direction> {
        match d {
            0 => Some(Direction::X),
            1 => Some(Direction::Y),
            _ => None,
        }
    }
}

/// A nodal degree of freedom. Global numbering is `2 * node + dir`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Dof {
    pub node: usize,
    pub dir: Direction,
}

impl Dof {
    pub fn new(node: usize, dir: Direction) -> Self {
        Self { node, dir }
    }

    pub fn index(&self) -> usize {
        2 * self.node + self.dir as usize
    }
}

/// Linear tie `u[slave] = ratio * u[master]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MasterSlave {
    pub slave: Dof,
    pub master: Dof,
    pub ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConstraintSet {
    pub fixed: BTreeSet<Dof>,
    pub master_slave: Vec<MasterSlave>,
}

impl ConstraintSet {
    pub fn fix_node(&mut self, node: usize) {
        self.fixed.insert(Dof::new(node, Direction::X));
        self.fixed.insert(Dof::new(node, Direction::Y));
    }

    /// Number of rows of the induced constraint matrix.
    pub fn rows(&self) -> usize {
        self.fixed.len() + self.master_slave.len()
    }
}

/// Linear elastic isotropic material attached to a region.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialRegion {
    pub id: RegionId,
    #[serde(rename = "E")]
    pub young_modulus: f64,
    #[serde(rename = "nu")]
    pub poisson_ratio: f64,
    #[serde(rename = "rho")]
    pub mass_density: f64,
}

impl MaterialRegion {
    pub fn new(id: RegionId, young_modulus: f64, poisson_ratio: f64, mass_density: f64) -> Self {
        Self {
            id,
            young_modulus,
            poisson_ratio,
            mass_density,
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Validation(format!("region {}: {what}", self.id)));
        if !(self.young_modulus > 0.0 && self.young_modulus.is_finite()) {
            return bad("Young's modulus must be positive");
        }
        if !(self.mass_density > 0.0 && self.mass_density.is_finite()) {
            return bad("mass density must be positive");
        }
        if !(0.0..0.5).contains(&self.poisson_ratio) {
            return bad("Poisson's ratio must lie in [0, 0.5)");
        }
        Ok(())
    }
}

/// Four-node quadrilateral, nodes listed counter-clockwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Element {
    pub conn: [usize; 4],
    pub region: RegionId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub nodes: Vec<[f64; 2]>,
    pub elements: Vec<Element>,
    /// Out-of-plane depth (m).
    pub thickness: f64,
}

impl Mesh {
    pub fn element_coords(&self, e: usize) -> [[f64; 2]; 4] {
        self.elements[e].conn.map(|n| self.nodes[n])
    }

    /// Sum of element areas (shoelace formula).
    pub fn area(&self) -> f64 {
        (0..self.elements.len())
            .map(|e| quad_area(&self.element_coords(e)))
            .sum()
    }

    pub fn regions_used(&self) -> BTreeSet<RegionId> {
        self.elements.iter().map(|e| e.region).collect()
    }
}

pub fn quad_area(c: &[[f64; 2]; 4]) -> f64 {
    let mut s = 0.0;
    for i in 0..4 {
        let j = (i + 1) % 4;
        s += c[i][0] * c[j][1] - c[j][0] * c[i][1];
    }
    0.5 * s
}

/// Jacobian determinants of the bilinear map at the four corners. For a
/// bilinear quad these are the extreme values over the element.
pub fn corner_jacobians(c: &[[f64; 2]; 4]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for i in 0..4 {
        let next = c[(i + 1) % 4];
        let prev = c[(i + 3) % 4];
        let a = [next[0] - c[i][0], next[1] - c[i][1]];
        let b = [prev[0] - c[i][0], prev[1] - c[i][1]];
        // Corner area scaled to the reference square [-1, 1]^2.
        out[i] = 0.25 * (a[0] * b[1] - a[1] * b[0]);
    }
    out
}

/// Degree-of-freedom bookkeeping: two dofs per node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DofMap {
    pub total: usize,
    pub fixed: usize,
    pub slaves: usize,
    /// Global indices of dofs that are neither fixed nor slaves, ascending.
    pub free: Vec<usize>,
}

impl DofMap {
    pub fn free_count(&self) -> usize {
        self.free.len()
    }
}

/// Validated structural model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub mesh: Mesh,
    pub constraints: ConstraintSet,
    /// Region table, sorted by id.
    pub regions: Vec<MaterialRegion>,
}

impl Model {
    pub fn new(mesh: Mesh, constraints: ConstraintSet, mut regions: Vec<MaterialRegion>) -> Result<Self> {
        regions.sort_by_key(|r| r.id);
        let model = Self {
            mesh,
            constraints,
            regions,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn region(&self, id: RegionId) -> Option<&MaterialRegion> {
        self.regions
            .binary_search_by_key(&id, |r| r.id)
            .ok()
            .map(|i| &self.regions[i])
    }

    pub fn region_mut(&mut self, id: RegionId) -> Option<&mut MaterialRegion> {
        self.regions
            .binary_search_by_key(&id, |r| r.id)
            .ok()
            .map(move |i| &mut self.regions[i])
    }

    pub fn n_dofs(&self) -> usize {
        2 * self.mesh.nodes.len()
    }

    pub fn dof_map(&self) -> DofMap {
        let slaves: BTreeSet<usize> = self
            .constraints
            .master_slave
            .iter()
            .map(|ms| ms.slave.index())
            .collect();
        let fixed: BTreeSet<usize> = self.constraints.fixed.iter().map(Dof::index).collect();
        let free = (0..self.n_dofs())
            .filter(|d| !fixed.contains(d) && !slaves.contains(d))
            .collect();
        DofMap {
            total: self.n_dofs(),
            fixed: fixed.len(),
            slaves: slaves.len(),
            free,
        }
    }

    /// Returns a copy with every element relabelled to a single region that
    /// carries the given material.
    pub fn homogenized(&self, material: MaterialRegion) -> Result<Model> {
        let mut mesh = self.mesh.clone();
        for e in &mut mesh.elements {
            e.region = material.id;
        }
        Model::new(mesh, self.constraints.clone(), vec![material])
    }

    fn validate(&self) -> Result<()> {
        let mesh = &self.mesh;
        if !(mesh.thickness > 0.0 && mesh.thickness.is_finite()) {
            return Err(Error::Validation("thickness must be positive".into()));
        }
        for (i, p) in mesh.nodes.iter().enumerate() {
            if !(p[0].is_finite() && p[1].is_finite()) {
                return Err(Error::Validation(format!("node {i}: non-finite coordinate")));
            }
        }

        let mut ids = BTreeSet::new();
        for r in &self.regions {
            if !ids.insert(r.id) {
                return Err(Error::Validation(format!("region {}: duplicate id", r.id)));
            }
            r.validate()?;
        }

        let n_nodes = mesh.nodes.len();
        for (e, el) in mesh.elements.iter().enumerate() {
            for &n in &el.conn {
                if n >= n_nodes {
                    return Err(Error::Validation(format!(
                        "element {e}: unknown node {n} (mesh has {n_nodes} nodes)"
                    )));
                }
            }
            let distinct: BTreeSet<_> = el.conn.iter().collect();
            if distinct.len() != 4 {
                return Err(Error::Validation(format!("element {e}: repeated node")));
            }
            if !ids.contains(&el.region) {
                return Err(Error::Validation(format!(
                    "element {e}: unknown region {}",
                    el.region
                )));
            }
            let jac = corner_jacobians(&mesh.element_coords(e));
            if let Some(c) = jac.iter().position(|&d| d <= 0.0) {
                return Err(Error::Validation(format!(
                    "element {e}: negative Jacobian at corner {c} (nodes must be counter-clockwise)"
                )));
            }
        }

        self.validate_constraints()
    }

    fn validate_constraints(&self) -> Result<()> {
        let n_nodes = self.mesh.nodes.len();
        let check = |d: &Dof| -> Result<()> {
            if d.node >= n_nodes {
                Err(Error::Validation(format!(
                    "constraint references unknown node {}",
                    d.node
                )))
            } else {
                Ok(())
            }
        };
        for d in &self.constraints.fixed {
            check(d)?;
        }
        let mut master_of: HashMap<Dof, Dof> = HashMap::new();
        for ms in &self.constraints.master_slave {
            check(&ms.slave)?;
            check(&ms.master)?;
            if !ms.ratio.is_finite() {
                return Err(Error::Validation("master-slave ratio must be finite".into()));
            }
            if self.constraints.fixed.contains(&ms.slave) {
                return Err(Error::Validation(format!(
                    "dof ({}, {}) is both fixed and a slave",
                    ms.slave.node, ms.slave.dir as u8
                )));
            }
            if master_of.insert(ms.slave, ms.master).is_some() {
                return Err(Error::Validation(format!(
                    "dof ({}, {}) is a slave more than once",
                    ms.slave.node, ms.slave.dir as u8
                )));
            }
        }
        for &start in master_of.keys() {
            let mut seen = BTreeSet::from([start]);
            let mut cur = start;
            while let Some(&next) = master_of.get(&cur) {
                if !seen.insert(next) {
                    return Err(Error::Constraint(format!(
                        "master-slave cycle through dof ({}, {})",
                        start.node, start.dir as u8
                    )));
                }
                cur = next;
            }
        }
        let h = self.constraints.rows();
        if 4 * h > self.n_dofs() {
            log::warn!(
                "{h} constraint rows for {} dofs; elimination assumes h << n",
                self.n_dofs()
            );
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&MeshFile::from(self)).expect("mesh serialization")
    }

    pub fn from_json(text: &str) -> Result<Model> {
        let file: MeshFile =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        file.into_model()
    }
}

/// Parses and validates a mesh file.
pub fn load_mesh<R: Read>(mut reader: R) -> Result<Model> {
    let mut text = String::new();
    reader.read_to_string(&mut text)?;
    Model::from_json(&text)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MeshFile {
    nodes: Vec<[f64; 2]>,
    elements: Vec<ElementRecord>,
    regions: Vec<MaterialRegion>,
    #[serde(default)]
    constraints: ConstraintRecord,
    thickness: f64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ElementRecord {
    conn: [usize; 4],
    region: RegionId,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstraintRecord {
    #[serde(default)]
    fixed: Vec<(usize, u8)>,
    #[serde(default)]
    master_slave: Vec<(usize, u8, usize, u8, f64)>,
}

impl From<&Model> for MeshFile {
    fn from(m: &Model) -> Self {
        MeshFile {
            nodes: m.mesh.nodes.clone(),
            elements: m
                .mesh
                .elements
                .iter()
                .map(|e| ElementRecord {
                    conn: e.conn,
                    region: e.region,
                })
                .collect(),
            regions: m.regions.clone(),
            constraints: ConstraintRecord {
                fixed: m
                    .constraints
                    .fixed
                    .iter()
                    .map(|d| (d.node, d.dir as u8))
                    .collect(),
                master_slave: m
                    .constraints
                    .master_slave
                    .iter()
                    .map(|ms| {
                        (
                            ms.slave.node,
                            ms.slave.dir as u8,
                            ms.master.node,
                            ms.master.dir as u8,
                            ms.ratio,
                        )
                    })
                    .collect(),
            },
            thickness: m.mesh.thickness,
        }
    }
}

impl MeshFile {
    fn into_model(self) -> Result<Model> {
        let dir = |d: u8| {
            Direction::from_index(d)
                .ok_or_else(|| Error::Parse(format!("direction must be 0 or 1, got {d}")))
        };
        let mut constraints = ConstraintSet::default();
        for (node, d) in self.constraints.fixed {
            constraints.fixed.insert(Dof::new(node, dir(d)?));
        }
        for (sn, sd, mn, md, ratio) in self.constraints.master_slave {
            constraints.master_slave.push(MasterSlave {
                slave: Dof::new(sn, dir(sd)?),
                master: Dof::new(mn, dir(md)?),
                ratio,
            });
        }
        let mesh = Mesh {
            nodes: self.nodes,
            elements: self
                .elements
                .into_iter()
                .map(|e| Element {
                    conn: e.conn,
                    region: e.region,
                })
                .collect(),
            thickness: self.thickness,
        };
        Model::new(mesh, constraints, self.regions)
    }
}

/// Region ids produced by the arch generator.
pub const ARCH_REGION: RegionId = 1;
pub const LEFT_PIER_REGION: RegionId = 2;
pub const RIGHT_PIER_REGION: RegionId = 3;

/// Refinement level of the canonical fixture (336 elements).
pub const CANONICAL_REFINEMENT: usize = 3;

/// Masonry arch resting on two piers clamped at the base.
///
/// The arch is a semicircular annulus (intrados diameter = `span`) whose
/// springings sit on the inner part of the pier tops. With `s = refinement + 1`
/// the structured tiling uses `9s` x `s` elements in the arch and `2s` x `3s`
/// elements in each pier (the outer and inner halves of a pier column band
/// get `s` columns each).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArchGeometry {
    pub span: f64,
    pub pier_height: f64,
    pub pier_width: f64,
    pub arch_thickness: f64,
    pub thickness: f64,
}

impl Default for ArchGeometry {
    fn default() -> Self {
        Self {
            span: 4.0,
            pier_height: 4.0,
            pier_width: 1.0,
            arch_thickness: 0.4,
            thickness: 1.0,
        }
    }
}

impl ArchGeometry {
    /// Reference materials: arch, left pier, right pier.
    pub fn reference_regions() -> Vec<MaterialRegion> {
        vec![
            MaterialRegion::new(ARCH_REGION, 3.25e9, 0.2, 1800.0),
            MaterialRegion::new(LEFT_PIER_REGION, 5.00e9, 0.2, 2200.0),
            MaterialRegion::new(RIGHT_PIER_REGION, 4.80e9, 0.2, 2100.0),
        ]
    }

    /// Area of the generator's primitives: two pier rectangles plus the
    /// polygonal annulus inscribed between the intrados and extrados circles.
    pub fn analytic_area(&self, refinement: usize) -> f64 {
        let n_theta = 9 * (refinement + 1);
        let ri = 0.5 * self.span;
        let ro = ri + self.arch_thickness;
        let dtheta = std::f64::consts::PI / n_theta as f64;
        2.0 * self.pier_width * self.pier_height
            + n_theta as f64 * 0.5 * (ro * ro - ri * ri) * dtheta.sin()
    }

    pub fn build(&self, refinement: usize) -> Result<Model> {
        let g = self;
        for (name, v) in [
            ("span", g.span),
            ("pier height", g.pier_height),
            ("pier width", g.pier_width),
            ("arch thickness", g.arch_thickness),
            ("thickness", g.thickness),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidGeometry(format!("{name} must be positive, got {v}")));
            }
        }
        if g.arch_thickness >= g.pier_width {
            return Err(Error::InvalidGeometry(
                "arch thickness must be smaller than the pier width".into(),
            ));
        }

        let s = refinement + 1;
        let n_theta = 9 * s;
        let n_r = s;
        let ny = 3 * s;
        let cols = 2 * s;
        let outer = g.pier_width - g.arch_thickness;
        let t = g.arch_thickness;

        let mut nodes: Vec<[f64; 2]> = Vec::new();
        let mut grid = |xs: &dyn Fn(usize) -> f64| -> Vec<Vec<usize>> {
            (0..=ny)
                .map(|k| {
                    let y = g.pier_height * k as f64 / ny as f64;
                    (0..=cols)
                        .map(|c| {
                            nodes.push([xs(c), y]);
                            nodes.len() - 1
                        })
                        .collect()
                })
                .collect()
        };
        let left_x = |c: usize| {
            if c <= s {
                -g.pier_width + outer * c as f64 / s as f64
            } else {
                -t + t * (c - s) as f64 / s as f64
            }
        };
        let right_x = |c: usize| {
            if c <= s {
                g.span + t * c as f64 / s as f64
            } else {
                g.span + t + outer * (c - s) as f64 / s as f64
            }
        };
        let left = grid(&left_x);
        let right = grid(&right_x);

        let cx = 0.5 * g.span;
        let ri = 0.5 * g.span;
        let mut arch = vec![vec![0usize; n_r + 1]; n_theta + 1];
        for (i, row) in arch.iter_mut().enumerate() {
            for (j, slot) in row.iter_mut().enumerate() {
                *slot = if i == 0 {
                    left[ny][cols - j]
                } else if i == n_theta {
                    right[ny][j]
                } else {
                    let theta = std::f64::consts::PI * (1.0 - i as f64 / n_theta as f64);
                    let r = ri + t * j as f64 / n_r as f64;
                    nodes.push([cx + r * theta.cos(), g.pier_height + r * theta.sin()]);
                    nodes.len() - 1
                };
            }
        }

        let mut elements = Vec::with_capacity(n_theta * n_r + 2 * cols * ny);
        for (pier, region) in [(&left, LEFT_PIER_REGION), (&right, RIGHT_PIER_REGION)] {
            for k in 0..ny {
                for c in 0..cols {
                    elements.push(Element {
                        conn: [pier[k][c], pier[k][c + 1], pier[k + 1][c + 1], pier[k + 1][c]],
                        region,
                    });
                }
            }
        }
        for i in 0..n_theta {
            for j in 0..n_r {
                elements.push(Element {
                    conn: [arch[i][j], arch[i + 1][j], arch[i + 1][j + 1], arch[i][j + 1]],
                    region: ARCH_REGION,
                });
            }
        }

        let mut constraints = ConstraintSet::default();
        for c in 0..=cols {
            constraints.fix_node(left[0][c]);
            constraints.fix_node(right[0][c]);
        }

        Model::new(
            Mesh {
                nodes,
                elements,
                thickness: g.thickness,
            },
            constraints,
            Self::reference_regions(),
        )
    }

    /// Node indices on the extrados, ordered from left to right springing.
    pub fn extrados_nodes(&self, model: &Model, refinement: usize) -> Vec<usize> {
        let ro = 0.5 * self.span + self.arch_thickness;
        let cx = 0.5 * self.span;
        let mut found: BTreeMap<i64, usize> = BTreeMap::new();
        for (i, p) in model.mesh.nodes.iter().enumerate() {
            let dy = p[1] - self.pier_height;
            if dy < -1e-9 {
                continue;
            }
            let r = ((p[0] - cx).powi(2) + dy.powi(2)).sqrt();
            if (r - ro).abs() < 1e-9 * ro {
                let key = (-(dy.atan2(p[0] - cx)) * 1e9) as i64;
                found.insert(key, i);
            }
        }
        debug_assert_eq!(found.len(), 9 * (refinement + 1) + 1);
        found.into_values().collect()
    }
}

/// Builds the arch-on-piers model with the default pier width, arch
/// thickness and out-of-plane depth.
pub fn build_arch_on_piers(span: f64, pier_height: f64, refinement: usize) -> Result<Model> {
    ArchGeometry {
        span,
        pier_height,
        ..ArchGeometry::default()
    }
    .build(refinement)
}
