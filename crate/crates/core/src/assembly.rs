//! Parametric stiffness and mass matrices and constraint elimination.
//!
//! Every free parameter is either the Young's modulus or the mass density of
//! one or more regions, so
//!
//! ```text
//! K(x) = K0 + sum_i x_i K_i      M(x) = M0 + sum_i x_i M_i
//! ```
//!
//! where `K_i` sums the unit-modulus blocks of the regions bound to `x_i` and
//! `K0` folds in the regions with fixed properties. Constraints are removed
//! exactly through a null-space basis `N` with at most one entry per row.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use nalgebra::{Matrix3, SMatrix};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{ConstraintSet, DofMap, MaterialRegion, Model, RegionId};
use crate::sparse::{linear_combination, CsrMatrix, EnvelopeSymbolic, Pattern};

pub type ElementMatrix = SMatrix<f64, 8, 8>;

const GAUSS_2: [f64; 2] = [-0.577_350_269_189_625_8, 0.577_350_269_189_625_8];
const XI: [f64; 4] = [-1.0, 1.0, 1.0, -1.0];
const ETA: [f64; 4] = [-1.0, -1.0, 1.0, 1.0];

/// Plane-strain constitutive matrix.
pub fn plane_strain_elasticity(young: f64, nu: f64) -> Matrix3<f64> {
    let c = young / ((1.0 + nu) * (1.0 - 2.0 * nu));
    Matrix3::new(
        c * (1.0 - nu),
        c * nu,
        0.0,
        c * nu,
        c * (1.0 - nu),
        0.0,
        0.0,
        0.0,
        c * (1.0 - 2.0 * nu) / 2.0,
    )
}

/// Stiffness and consistent mass of a bilinear plane-strain quadrilateral,
/// integrated with 2x2 Gauss quadrature. Dof order is
/// `[u0x, u0y, u1x, u1y, ...]`.
pub fn element_matrices(
    coords: &[[f64; 2]; 4],
    young: f64,
    nu: f64,
    density: f64,
    thickness: f64,
) -> Result<(ElementMatrix, ElementMatrix)> {
    let corner = crate::mesh::corner_jacobians(coords);
    if let Some(c) = corner.iter().position(|&d| d <= 0.0) {
        return Err(Error::ElementDistortion {
            corner: c,
            det: corner[c],
        });
    }
    let d = plane_strain_elasticity(young, nu);
    let mut k = ElementMatrix::zeros();
    let mut m = ElementMatrix::zeros();
    for &xi in &GAUSS_2 {
        for &eta in &GAUSS_2 {
            let mut n = [0.0; 4];
            let mut dxi = [0.0; 4];
            let mut deta = [0.0; 4];
            for a in 0..4 {
                n[a] = 0.25 * (1.0 + XI[a] * xi) * (1.0 + ETA[a] * eta);
                dxi[a] = 0.25 * XI[a] * (1.0 + ETA[a] * eta);
                deta[a] = 0.25 * ETA[a] * (1.0 + XI[a] * xi);
            }
            let mut j = [[0.0; 2]; 2];
            for a in 0..4 {
                j[0][0] += dxi[a] * coords[a][0];
                j[0][1] += dxi[a] * coords[a][1];
                j[1][0] += deta[a] * coords[a][0];
                j[1][1] += deta[a] * coords[a][1];
            }
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            let inv = [
                [j[1][1] / det, -j[0][1] / det],
                [-j[1][0] / det, j[0][0] / det],
            ];
            let mut b = SMatrix::<f64, 3, 8>::zeros();
            for a in 0..4 {
                let dx = inv[0][0] * dxi[a] + inv[0][1] * deta[a];
                let dy = inv[1][0] * dxi[a] + inv[1][1] * deta[a];
                b[(0, 2 * a)] = dx;
                b[(1, 2 * a + 1)] = dy;
                b[(2, 2 * a)] = dy;
                b[(2, 2 * a + 1)] = dx;
            }
            let dv = det * thickness;
            k += b.transpose() * d * b * dv;
            for a in 0..4 {
                for c in 0..4 {
                    let v = density * n[a] * n[c] * dv;
                    m[(2 * a, 2 * c)] += v;
                    m[(2 * a + 1, 2 * c + 1)] += v;
                }
            }
        }
    }
    Ok((0.5 * (k + k.transpose()), m))
}

/// Material property that may be a free parameter. Poisson's ratio is
/// deliberately absent: it stays fixed during updating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Property {
    YoungModulus,
    MassDensity,
}

impl TryFrom<String> for Property {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        match s.as_str() {
            "E" => Ok(Property::YoungModulus),
            "rho" => Ok(Property::MassDensity),
            "nu" => Err("Poisson's ratio cannot be a free parameter".into()),
            other => Err(format!("unknown property {other:?} (expected \"E\" or \"rho\")")),
        }
    }
}

impl From<Property> for String {
    fn from(p: Property) -> String {
        match p {
            Property::YoungModulus => "E".into(),
            Property::MassDensity => "rho".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub regions: Vec<RegionId>,
    pub property: Property,
    pub lower: f64,
    pub upper: f64,
}

impl Parameter {
    pub fn new(name: &str, regions: &[RegionId], property: Property, lower: f64, upper: f64) -> Self {
        Self {
            name: name.to_string(),
            regions: regions.to_vec(),
            property,
            lower,
            upper,
        }
    }
}

/// The admissible box of parameter values plus a starting point.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpace {
    params: Vec<Parameter>,
    start: Vec<f64>,
}

impl ParamSpace {
    /// Starts at the box midpoint unless `start` is given.
    pub fn new(params: Vec<Parameter>, start: Option<Vec<f64>>) -> Result<Self> {
        for p in &params {
            if !(p.lower.is_finite() && p.upper.is_finite() && p.lower < p.upper) {
                return Err(Error::Binding(format!(
                    "parameter {}: lower bound must be below upper bound",
                    p.name
                )));
            }
            if p.regions.is_empty() {
                return Err(Error::Binding(format!("parameter {} binds no region", p.name)));
            }
        }
        let mut space = Self {
            start: params.iter().map(|p| 0.5 * (p.lower + p.upper)).collect(),
            params,
        };
        if let Some(s) = start {
            space.check(&s)?;
            space.start = s;
        }
        Ok(space)
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn start(&self) -> &[f64] {
        &self.start
    }

    pub fn with_start(&self, start: Vec<f64>) -> Result<Self> {
        ParamSpace::new(self.params.clone(), Some(start))
    }

    pub fn lower(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.lower).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.upper).collect()
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.params.iter().map(|p| 0.5 * (p.lower + p.upper)).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && self
                .params
                .iter()
                .zip(x)
                .all(|(p, &v)| v >= p.lower && v <= p.upper)
    }

    pub fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Domain(format!(
                "expected {} parameters, got {}",
                self.dim(),
                x.len()
            )));
        }
        for (p, &v) in self.params.iter().zip(x) {
            if !(v >= p.lower && v <= p.upper) {
                return Err(Error::Domain(format!(
                    "{} = {v} outside [{}, {}]",
                    p.name, p.lower, p.upper
                )));
            }
        }
        Ok(())
    }

    /// Affine map of the box onto the unit cube.
    pub fn to_unit(&self, x: &[f64]) -> Vec<f64> {
        self.params
            .iter()
            .zip(x)
            .map(|(p, &v)| (v - p.lower) / (p.upper - p.lower))
            .collect()
    }

    pub fn from_unit(&self, u: &[f64]) -> Vec<f64> {
        self.params
            .iter()
            .zip(u)
            .map(|(p, &v)| {
                let x = p.lower + v * (p.upper - p.lower);
                x.clamp(p.lower, p.upper)
            })
            .collect()
    }

    /// Widths `b_i - a_i` (d x / d u).
    pub fn widths(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.upper - p.lower).collect()
    }

    /// Material table with the parameter values substituted.
    pub fn apply(&self, regions: &[MaterialRegion], x: &[f64]) -> Vec<MaterialRegion> {
        let mut out = regions.to_vec();
        for (p, &v) in self.params.iter().zip(x) {
            for r in out.iter_mut().filter(|r| p.regions.contains(&r.id)) {
                match p.property {
                    Property::YoungModulus => r.young_modulus = v,
                    Property::MassDensity => r.mass_density = v,
                }
            }
        }
        out
    }

    fn validate_bindings(&self, model: &Model) -> Result<()> {
        let mut bound = BTreeSet::new();
        for p in &self.params {
            for &r in &p.regions {
                if model.region(r).is_none() {
                    return Err(Error::Binding(format!(
                        "parameter {} binds nonexistent region {r}",
                        p.name
                    )));
                }
                if !bound.insert((r, p.property)) {
                    return Err(Error::Binding(format!(
                        "region {r} {} is bound by more than one parameter",
                        String::from(p.property)
                    )));
                }
            }
        }
        Ok(())
    }
}

/// `A(x) = constant + sum_i x_i linear[i]`; `None` marks a parameter that
/// does not enter this operator.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine<T> {
    pub constant: T,
    pub linear: Vec<Option<T>>,
}

/// Full (unconstrained) parametric system.
#[derive(Debug, Clone)]
pub struct ParametricSystem {
    n: usize,
    pattern: Arc<Pattern>,
    regions: Vec<MaterialRegion>,
    unit_stiffness: BTreeMap<RegionId, Vec<f64>>,
    unit_mass: BTreeMap<RegionId, Vec<f64>>,
    stiffness: Affine<Vec<f64>>,
    mass: Affine<Vec<f64>>,
    space: ParamSpace,
}

type Triplets = Vec<(usize, usize, f64)>;

fn element_triplets(model: &Model, unit_materials: bool) -> Result<BTreeMap<RegionId, (Triplets, Triplets)>> {
    let mesh = &model.mesh;
    let per_element: Vec<(ElementMatrix, ElementMatrix)> = (0..mesh.elements.len())
        .into_par_iter()
        .map(|e| {
            let region = model
                .region(mesh.elements[e].region)
                .expect("validated region");
            let (young, rho) = if unit_materials {
                (1.0, 1.0)
            } else {
                (region.young_modulus, region.mass_density)
            };
            element_matrices(
                &mesh.element_coords(e),
                young,
                region.poisson_ratio,
                rho,
                mesh.thickness,
            )
        })
        .collect::<Result<_>>()?;

    let mut out: BTreeMap<RegionId, (Triplets, Triplets)> = BTreeMap::new();
    for (el, (k, m)) in mesh.elements.iter().zip(per_element) {
        let dofs: Vec<usize> = el
            .conn
            .iter()
            .flat_map(|&n| [2 * n, 2 * n + 1])
            .collect();
        let entry = out.entry(el.region).or_default();
        for a in 0..8 {
            for b in 0..8 {
                entry.0.push((dofs[a], dofs[b], k[(a, b)]));
                entry.1.push((dofs[a], dofs[b], m[(a, b)]));
            }
        }
    }
    Ok(out)
}

/// One-shot assembly with the model's own material values.
pub fn assemble_direct(model: &Model) -> Result<(CsrMatrix, CsrMatrix)> {
    let trip = element_triplets(model, false)?;
    let n = model.n_dofs();
    let k: Triplets = trip.values().flat_map(|t| t.0.iter().copied()).collect();
    let m: Triplets = trip.values().flat_map(|t| t.1.iter().copied()).collect();
    Ok((CsrMatrix::from_triplets(n, &k), CsrMatrix::from_triplets(n, &m)))
}

/// Assembles per-region unit blocks and folds them according to the
/// parameter bindings.
pub fn assemble_parametric(model: &Model, space: &ParamSpace) -> Result<ParametricSystem> {
    space.validate_bindings(model)?;
    let n = model.n_dofs();
    let trip = element_triplets(model, true)?;
    let pattern = Arc::new(Pattern::from_entries(
        n,
        trip.values()
            .flat_map(|t| t.0.iter().map(|&(i, j, _)| (i, j)))
            .collect(),
    ));
    let mut unit_stiffness = BTreeMap::new();
    let mut unit_mass = BTreeMap::new();
    for (&r, (k, m)) in &trip {
        unit_stiffness.insert(r, pattern.scatter(k));
        unit_mass.insert(r, pattern.scatter(m));
    }

    let fold = |units: &BTreeMap<RegionId, Vec<f64>>, property: Property| -> Affine<Vec<f64>> {
        let mut constant = vec![0.0; pattern.nnz()];
        let mut linear: Vec<Option<Vec<f64>>> = vec![None; space.dim()];
        for (&r, block) in units {
            let region = model.region(r).expect("validated region");
            let owner = space
                .params()
                .iter()
                .position(|p| p.property == property && p.regions.contains(&r));
            let (target, scale) = match owner {
                Some(i) => (
                    linear[i].get_or_insert_with(|| vec![0.0; pattern.nnz()]),
                    1.0,
                ),
                None => (
                    &mut constant,
                    match property {
                        Property::YoungModulus => region.young_modulus,
                        Property::MassDensity => region.mass_density,
                    },
                ),
            };
            for (t, &v) in target.iter_mut().zip(block) {
                *t += scale * v;
            }
        }
        Affine { constant, linear }
    };
    let stiffness = fold(&unit_stiffness, Property::YoungModulus);
    let mass = fold(&unit_mass, Property::MassDensity);

    Ok(ParametricSystem {
        n,
        pattern,
        regions: model.regions.clone(),
        unit_stiffness,
        unit_mass,
        stiffness,
        mass,
        space: space.clone(),
    })
}

fn combine(pattern: &Arc<Pattern>, affine: &Affine<Vec<f64>>, x: &[f64]) -> CsrMatrix {
    let mut terms: Vec<(f64, &[f64])> = vec![(1.0, &affine.constant)];
    for (xi, lin) in x.iter().zip(&affine.linear) {
        if let Some(v) = lin {
            terms.push((*xi, v));
        }
    }
    linear_combination(pattern, &terms)
}

impl ParametricSystem {
    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn space(&self) -> &ParamSpace {
        &self.space
    }

    pub fn pattern(&self) -> &Arc<Pattern> {
        &self.pattern
    }

    pub fn regions(&self) -> &[MaterialRegion] {
        &self.regions
    }

    /// Stiffness of region `r` assembled with `E = 1`.
    pub fn unit_stiffness(&self, r: RegionId) -> Option<CsrMatrix> {
        self.unit_stiffness
            .get(&r)
            .map(|v| CsrMatrix::new(Arc::clone(&self.pattern), v.clone()))
    }

    /// Mass of region `r` assembled with `rho = 1`.
    pub fn unit_mass(&self, r: RegionId) -> Option<CsrMatrix> {
        self.unit_mass
            .get(&r)
            .map(|v| CsrMatrix::new(Arc::clone(&self.pattern), v.clone()))
    }

    pub fn instantiate(&self, x: &[f64]) -> Result<(CsrMatrix, CsrMatrix)> {
        self.space.check(x)?;
        Ok((
            combine(&self.pattern, &self.stiffness, x),
            combine(&self.pattern, &self.mass, x),
        ))
    }
}

/// Null-space basis of the constraint matrix. Every full dof maps to at most
/// one reduced dof with a coefficient, so `N` has at most one entry per row.
#[derive(Debug, Clone, PartialEq)]
pub struct NullSpace {
    n: usize,
    n_free: usize,
    map: Vec<Option<(usize, f64)>>,
}

impl NullSpace {
    pub fn new(n: usize, constraints: &ConstraintSet) -> Result<NullSpace> {
        let fixed: BTreeSet<usize> = constraints.fixed.iter().map(|d| d.index()).collect();
        let mut master_of: HashMap<usize, (usize, f64)> = HashMap::new();
        for ms in &constraints.master_slave {
            let s = ms.slave.index();
            if s >= n || ms.master.index() >= n {
                return Err(Error::Constraint("constraint dof out of range".into()));
            }
            if fixed.contains(&s) {
                return Err(Error::Constraint(format!("dof {s} is both fixed and a slave")));
            }
            if master_of.insert(s, (ms.master.index(), ms.ratio)).is_some() {
                return Err(Error::Constraint(format!("dof {s} is a slave more than once")));
            }
        }
        let mut map: Vec<Option<(usize, f64)>> = vec![None; n];
        let mut n_free = 0;
        for (d, slot) in map.iter_mut().enumerate() {
            if !fixed.contains(&d) && !master_of.contains_key(&d) {
                *slot = Some((n_free, 1.0));
                n_free += 1;
            }
        }
        for &s in master_of.keys() {
            let mut coef = 1.0;
            let mut cur = s;
            let mut steps = 0;
            while let Some(&(m, r)) = master_of.get(&cur) {
                coef *= r;
                cur = m;
                steps += 1;
                if steps > master_of.len() {
                    return Err(Error::Constraint(format!(
                        "master-slave cycle through dof {s}"
                    )));
                }
            }
            map[s] = if fixed.contains(&cur) {
                None
            } else {
                map[cur].map(|(a, c)| (a, c * coef))
            };
        }
        Ok(NullSpace { n, n_free, map })
    }

    pub fn full_dim(&self) -> usize {
        self.n
    }

    pub fn reduced_dim(&self) -> usize {
        self.n_free
    }

    pub fn entry(&self, full: usize) -> Option<(usize, f64)> {
        self.map[full]
    }

    /// Full-coordinate vector `N y`.
    pub fn expand(&self, y: &[f64]) -> Vec<f64> {
        self.map
            .iter()
            .map(|e| e.map_or(0.0, |(a, c)| c * y[a]))
            .collect()
    }

    /// `N^T v`.
    pub fn restrict(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_free];
        for (e, &vi) in self.map.iter().zip(v) {
            if let Some((a, c)) = e {
                out[*a] += c * vi;
            }
        }
        out
    }

    /// Dense `N` (testing and small problems).
    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut d = nalgebra::DMatrix::zeros(self.n, self.n_free);
        for (i, e) in self.map.iter().enumerate() {
            if let Some((a, c)) = e {
                d[(i, *a)] = *c;
            }
        }
        d
    }
}

/// Parametric system restricted to the constraint null space.
#[derive(Debug, Clone)]
pub struct ConstrainedSystem {
    full: ParametricSystem,
    null_space: NullSpace,
    pattern: Arc<Pattern>,
    stiffness: Affine<Vec<f64>>,
    mass: Affine<Vec<f64>>,
    symbolic: Arc<EnvelopeSymbolic>,
}

/// Eliminates fixed dofs and master-slave relations.
pub fn apply_constraints(
    system: ParametricSystem,
    constraints: &ConstraintSet,
) -> Result<ConstrainedSystem> {
    let ns = NullSpace::new(system.n, constraints)?;
    let fp = &system.pattern;
    // full entry k -> (reduced row, reduced col, coefficient)
    let mut image: Vec<Option<(usize, usize, f64)>> = Vec::with_capacity(fp.nnz());
    let mut entries = Vec::new();
    for i in 0..fp.dim() {
        for &j in fp.row(i) {
            let img = match (ns.map[i], ns.map[j]) {
                (Some((a, ca)), Some((b, cb))) => {
                    entries.push((a, b));
                    Some((a, b, ca * cb))
                }
                _ => None,
            };
            image.push(img);
        }
    }
    let pattern = Arc::new(Pattern::from_entries(ns.n_free, entries));
    let positions: Vec<Option<(usize, f64)>> = image
        .iter()
        .map(|img| img.map(|(a, b, c)| (pattern.index_of(a, b).expect("reduced entry"), c)))
        .collect();
    let reduce = |values: &Vec<f64>| -> Vec<f64> {
        let mut out = vec![0.0; pattern.nnz()];
        for (pos, &v) in positions.iter().zip(values) {
            if let Some((k, c)) = pos {
                out[*k] += c * v;
            }
        }
        out
    };
    let reduce_affine = |a: &Affine<Vec<f64>>| Affine {
        constant: reduce(&a.constant),
        linear: a.linear.iter().map(|l| l.as_ref().map(&reduce)).collect(),
    };
    let stiffness = reduce_affine(&system.stiffness);
    let mass = reduce_affine(&system.mass);
    let symbolic = Arc::new(EnvelopeSymbolic::new(&pattern));
    Ok(ConstrainedSystem {
        full: system,
        null_space: ns,
        pattern,
        stiffness,
        mass,
        symbolic,
    })
}

impl ConstrainedSystem {
    /// Assembles the model and eliminates its constraints.
    pub fn new(model: &Model, space: &ParamSpace) -> Result<ConstrainedSystem> {
        apply_constraints(assemble_parametric(model, space)?, &model.constraints)
    }

    pub fn dim(&self) -> usize {
        self.null_space.n_free
    }

    pub fn full_dim(&self) -> usize {
        self.null_space.n
    }

    pub fn space(&self) -> &ParamSpace {
        &self.full.space
    }

    pub fn parametric(&self) -> &ParametricSystem {
        &self.full
    }

    pub fn null_space(&self) -> &NullSpace {
        &self.null_space
    }

    pub fn pattern(&self) -> &Arc<Pattern> {
        &self.pattern
    }

    pub fn symbolic(&self) -> &Arc<EnvelopeSymbolic> {
        &self.symbolic
    }

    pub fn stiffness_terms(&self) -> &Affine<Vec<f64>> {
        &self.stiffness
    }

    pub fn mass_terms(&self) -> &Affine<Vec<f64>> {
        &self.mass
    }

    /// Reduced `(N^T K(x) N, N^T M(x) N)`.
    pub fn instantiate(&self, x: &[f64]) -> Result<(CsrMatrix, CsrMatrix)> {
        self.space().check(x)?;
        Ok(self.instantiate_unchecked(x))
    }

    pub(crate) fn instantiate_unchecked(&self, x: &[f64]) -> (CsrMatrix, CsrMatrix) {
        (
            combine(&self.pattern, &self.stiffness, x),
            combine(&self.pattern, &self.mass, x),
        )
    }

    /// `dK/dx_i` in reduced coordinates, if parameter `i` enters `K`.
    pub fn stiffness_derivative(&self, i: usize) -> Option<CsrMatrix> {
        self.stiffness.linear[i]
            .as_ref()
            .map(|v| CsrMatrix::new(Arc::clone(&self.pattern), v.clone()))
    }

    pub fn mass_derivative(&self, i: usize) -> Option<CsrMatrix> {
        self.mass.linear[i]
            .as_ref()
            .map(|v| CsrMatrix::new(Arc::clone(&self.pattern), v.clone()))
    }

    pub fn dof_map_matches(&self, dm: &DofMap) -> bool {
        dm.free.len() == self.dim()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{build_arch_on_piers, Direction, Dof, Element, MasterSlave, Mesh};
    use nalgebra::{DMatrix, SymmetricEigen};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const UNIT_SQUARE: [[f64; 2]; 4] = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];

    /// Independent oracle: 4x4 Gauss-Legendre on [0,1]^2 in physical
    /// coordinates for the unit square (shape functions written directly).
    fn unit_square_stiffness_oracle(young: f64, nu: f64) -> DMatrix<f64> {
        let pts = [
            (-0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
            (-0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
            (0.339_981_043_584_856_3, 0.652_145_154_862_546_1),
            (0.861_136_311_594_052_6, 0.347_854_845_137_453_9),
        ];
        let d = plane_strain_elasticity(young, nu);
        let dm = DMatrix::from_fn(3, 3, |i, j| d[(i, j)]);
        let mut k = DMatrix::zeros(8, 8);
        for &(a, wa) in &pts {
            for &(b, wb) in &pts {
                let x = 0.5 * (a + 1.0);
                let y = 0.5 * (b + 1.0);
                // N0=(1-x)(1-y), N1=x(1-y), N2=xy, N3=(1-x)y
                let dndx = [-(1.0 - y), 1.0 - y, y, -y];
                let dndy = [-(1.0 - x), -x, x, 1.0 - x];
                let mut bm = DMatrix::zeros(3, 8);
                for n in 0..4 {
                    bm[(0, 2 * n)] = dndx[n];
                    bm[(1, 2 * n + 1)] = dndy[n];
                    bm[(2, 2 * n)] = dndy[n];
                    bm[(2, 2 * n + 1)] = dndx[n];
                }
                k += bm.transpose() * &dm * bm * (wa * wb * 0.25);
            }
        }
        k
    }

    #[test]
    fn unit_square_stiffness_matches_high_order_quadrature() {
        let (k, _) = element_matrices(&UNIT_SQUARE, 1.0, 0.0, 1.0, 1.0).unwrap();
        let oracle = unit_square_stiffness_oracle(1.0, 0.0);
        for i in 0..8 {
            for j in 0..8 {
                assert!((k[(i, j)] - oracle[(i, j)]).abs() < 1e-12, "({i},{j})");
            }
        }
        let (k, _) = element_matrices(&UNIT_SQUARE, 2.5, 0.3, 1.0, 1.0).unwrap();
        let oracle = unit_square_stiffness_oracle(2.5, 0.3);
        assert!((DMatrix::from_fn(8, 8, |i, j| k[(i, j)]) - oracle).amax() < 1e-12);
    }

    #[test]
    fn stiffness_kernel_is_rigid_body_motion() {
        let (k, m) = element_matrices(&UNIT_SQUARE, 1.0, 0.0, 1.0, 1.0).unwrap();
        let eig = SymmetricEigen::new(DMatrix::from_fn(8, 8, |i, j| k[(i, j)]));
        let largest = eig.eigenvalues.amax();
        let zeros = eig
            .eigenvalues
            .iter()
            .filter(|&&l| l.abs() < 1e-12 * largest)
            .count();
        assert_eq!(zeros, 3);
        assert!((k - k.transpose()).amax() == 0.0);
        let meig = SymmetricEigen::new(DMatrix::from_fn(8, 8, |i, j| m[(i, j)]));
        assert!(meig.eigenvalues.min() > 0.0);
    }

    #[test]
    fn consistent_mass_conserves_total_mass() {
        let (_, m) = element_matrices(&UNIT_SQUARE, 1.0, 0.0, 1.0, 1.0).unwrap();
        let mut sx = 0.0;
        for a in 0..4 {
            for b in 0..4 {
                sx += m[(2 * a, 2 * b)];
            }
        }
        assert!((sx - 1.0).abs() < 1e-14);
    }

    #[test]
    fn inverted_element_is_a_distortion_error() {
        let c = [[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]];
        assert!(matches!(
            element_matrices(&c, 1.0, 0.2, 1.0, 1.0),
            Err(Error::ElementDistortion { .. })
        ));
    }

    fn arch_space() -> ParamSpace {
        ParamSpace::new(
            vec![
                Parameter::new("E2", &[2], Property::YoungModulus, 1e9, 9e9),
                Parameter::new("E3", &[3], Property::YoungModulus, 1e9, 9e9),
                Parameter::new("rho2", &[2], Property::MassDensity, 1000.0, 3000.0),
            ],
            None,
        )
        .unwrap()
    }

    fn max_rel_diff(a: &CsrMatrix, b: &CsrMatrix) -> f64 {
        let da = a.to_dense();
        let db = b.to_dense();
        (da - &db).amax() / db.amax()
    }

    #[test]
    fn fixed_parameters_reproduce_direct_assembly() {
        let model = build_arch_on_piers(4.0, 4.0, 1).unwrap();
        let empty = ParamSpace::new(vec![], None).unwrap();
        let sys = assemble_parametric(&model, &empty).unwrap();
        let (k, m) = sys.instantiate(&[]).unwrap();
        let (kd, md) = assemble_direct(&model).unwrap();
        assert!(max_rel_diff(&k, &kd) < 1e-14);
        assert!(max_rel_diff(&m, &md) < 1e-14);
        assert!(k.asymmetry() <= 1e-12 * kd.to_dense().amax());
    }

    #[test]
    fn instantiate_matches_direct_assembly_at_random_points() {
        let model = build_arch_on_piers(4.0, 4.0, 1).unwrap();
        let space = arch_space();
        let sys = assemble_parametric(&model, &space).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let x: Vec<f64> = space
                .params()
                .iter()
                .map(|p| rng.gen_range(p.lower..p.upper))
                .collect();
            let (k, m) = sys.instantiate(&x).unwrap();
            let direct = Model::new(
                model.mesh.clone(),
                model.constraints.clone(),
                space.apply(&model.regions, &x),
            )
            .unwrap();
            let (kd, md) = assemble_direct(&direct).unwrap();
            assert!(max_rel_diff(&k, &kd) < 1e-14);
            assert!(max_rel_diff(&m, &md) < 1e-14);
        }
    }

    #[test]
    fn stiffness_is_affine_in_young_modulus() {
        let model = build_arch_on_piers(4.0, 4.0, 0).unwrap();
        let space = arch_space();
        let sys = assemble_parametric(&model, &space).unwrap();
        let x = space.midpoint();
        let mut x2 = x.clone();
        x2[0] *= 1.5;
        let (k1, m1) = sys.instantiate(&x).unwrap();
        let (k2, m2) = sys.instantiate(&x2).unwrap();
        let unit = sys.unit_stiffness(2).unwrap();
        let scale = k2.values().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let delta = x2[0] - x[0];
        for ((a, b), u) in k2.values().iter().zip(k1.values()).zip(unit.values()) {
            assert!((a - b - delta * u).abs() <= 4.0 * f64::EPSILON * scale);
        }
        assert_eq!(m1, m2);
    }

    #[test]
    fn single_element_block_is_scattered_element_matrix() {
        let model = Model::new(
            Mesh {
                nodes: UNIT_SQUARE.to_vec(),
                elements: vec![Element {
                    conn: [0, 1, 2, 3],
                    region: 1,
                }],
                thickness: 1.0,
            },
            ConstraintSet::default(),
            vec![MaterialRegion::new(1, 7.0, 0.25, 3.0)],
        )
        .unwrap();
        let space = ParamSpace::new(
            vec![Parameter::new("E", &[1], Property::YoungModulus, 1.0, 10.0)],
            None,
        )
        .unwrap();
        let sys = assemble_parametric(&model, &space).unwrap();
        let (ke, _) = element_matrices(&UNIT_SQUARE, 1.0, 0.25, 1.0, 1.0).unwrap();
        let unit = sys.unit_stiffness(1).unwrap();
        for i in 0..8 {
            for j in 0..8 {
                assert_eq!(unit.get(i, j), ke[(i, j)]);
            }
        }
    }

    #[test]
    fn scaling_all_moduli_scales_stiffness() {
        let model = build_arch_on_piers(4.0, 4.0, 0).unwrap().homogenized(MaterialRegion::new(1, 3e9, 0.2, 2000.0)).unwrap();
        let space = ParamSpace::new(
            vec![Parameter::new("E", &[1], Property::YoungModulus, 1e9, 1e10)],
            None,
        )
        .unwrap();
        let sys = assemble_parametric(&model, &space).unwrap();
        let (k1, _) = sys.instantiate(&[2e9]).unwrap();
        let (k2, _) = sys.instantiate(&[8e9]).unwrap();
        for (a, b) in k2.values().iter().zip(k1.values()) {
            assert!((a - 4.0 * b).abs() <= 1e-15 * a.abs().max(1.0) * 4.0);
        }
    }

    #[test]
    fn out_of_box_and_binding_errors() {
        let model = build_arch_on_piers(4.0, 4.0, 0).unwrap();
        let sys = assemble_parametric(&model, &arch_space()).unwrap();
        assert!(matches!(sys.instantiate(&[0.5e9, 2e9, 2000.0]), Err(Error::Domain(_))));
        let bad = ParamSpace::new(
            vec![Parameter::new("E9", &[9], Property::YoungModulus, 1e9, 9e9)],
            None,
        )
        .unwrap();
        assert!(matches!(assemble_parametric(&model, &bad), Err(Error::Binding(_))));
        assert!(ParamSpace::new(
            vec![Parameter::new("E", &[1], Property::YoungModulus, 2.0, 1.0)],
            None
        )
        .is_err());
        let nu: std::result::Result<Property, _> = serde_json::from_str("\"nu\"");
        assert!(nu.unwrap_err().to_string().contains("Poisson"));
    }

    #[test]
    fn fixed_dofs_give_principal_submatrix() {
        let model = build_arch_on_piers(4.0, 4.0, 0).unwrap();
        let space = arch_space();
        let cs = ConstrainedSystem::new(&model, &space).unwrap();
        let x = space.midpoint();
        let (kf, _) = cs.parametric().instantiate(&x).unwrap();
        let (kr, _) = cs.instantiate(&x).unwrap();
        let free = model.dof_map().free;
        assert_eq!(free.len(), cs.dim());
        for (a, &i) in free.iter().enumerate() {
            for (b, &j) in free.iter().enumerate() {
                assert_eq!(kr.get(a, b), kf.get(i, j));
            }
        }
    }

    #[test]
    fn master_slave_reduces_dimension() {
        let model = build_arch_on_piers(4.0, 4.0, 0).unwrap();
        let mut c = model.constraints.clone();
        c.master_slave.push(MasterSlave {
            slave: Dof::new(20, Direction::X),
            master: Dof::new(21, Direction::X),
            ratio: 1.0,
        });
        let ns = NullSpace::new(model.n_dofs(), &c).unwrap();
        assert_eq!(ns.reduced_dim(), model.n_dofs() - 12 - 1);
        // C N = 0: slave row equals ratio times master row
        let n = ns.to_dense();
        let s = Dof::new(20, Direction::X).index();
        let m = Dof::new(21, Direction::X).index();
        assert_eq!(n.row(s), n.row(m));
        for d in &c.fixed {
            assert!(n.row(d.index()).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn cyclic_master_slave_is_a_constraint_error() {
        let x = |n| Dof::new(n, Direction::X);
        let mut c = ConstraintSet::default();
        c.master_slave.push(MasterSlave { slave: x(0), master: x(1), ratio: 1.0 });
        c.master_slave.push(MasterSlave { slave: x(1), master: x(0), ratio: 1.0 });
        assert!(matches!(NullSpace::new(8, &c), Err(Error::Constraint(_))));
    }

    #[test]
    fn chained_slaves_resolve_to_terminal_master() {
        let x = |n| Dof::new(n, Direction::X);
        let mut c = ConstraintSet::default();
        c.master_slave.push(MasterSlave { slave: x(0), master: x(1), ratio: 2.0 });
        c.master_slave.push(MasterSlave { slave: x(1), master: x(2), ratio: 3.0 });
        let ns = NullSpace::new(8, &c).unwrap();
        let (a, coef) = ns.entry(0).unwrap();
        assert_eq!(ns.entry(4), Some((a, 1.0)));
        assert_eq!(coef, 6.0);
    }
}
