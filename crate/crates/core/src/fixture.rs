//! Canonical calibration problems built on the arch-on-piers model.
//!
//! The round trip is a deliberate inverse crime: the target is computed by
//! the same forward model at known parameters, so exact recovery is the
//! expected outcome.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assembly::{ConstrainedSystem, ParamSpace, Parameter, Property};
use crate::eigen::{solve_smallest, EigenOptions};
use crate::error::Result;
use crate::mesh::{
    ArchGeometry, ConstraintSet, Direction, Dof, Element, MaterialRegion, Mesh, Model,
    ARCH_REGION, LEFT_PIER_REGION, RIGHT_PIER_REGION,
};
use crate::objective::{project_mode, ModalTarget, SensorMap, WeightSpec};

/// Ground truth `(E2, E3, rho2)`.
pub const ARCH_TRUTH: [f64; 3] = [5.0e9, 4.8e9, 2200.0];

/// Starting point far from the truth.
pub const ARCH_FAR_START: [f64; 3] = [2.0e9, 1.1e9, 1100.0];

/// Number of matched modes.
pub const ARCH_MODES: usize = 5;

/// Free parameters: pier moduli and left-pier density.
pub fn arch_parameters() -> Vec<Parameter> {
    vec![
        Parameter::new("E2", &[LEFT_PIER_REGION], Property::YoungModulus, 1e9, 9e9),
        Parameter::new("E3", &[RIGHT_PIER_REGION], Property::YoungModulus, 1e9, 9e9),
        Parameter::new("rho2", &[LEFT_PIER_REGION], Property::MassDensity, 1000.0, 3000.0),
    ]
}

/// Both displacement components at every `(refinement + 1)`-th extrados
/// node: ten measurement points from springing to springing.
pub fn arch_sensors(geometry: &ArchGeometry, model: &Model, refinement: usize) -> Vec<Dof> {
    geometry
        .extrados_nodes(model, refinement)
        .into_iter()
        .step_by(refinement + 1)
        .flat_map(|n| [Dof::new(n, Direction::X), Dof::new(n, Direction::Y)])
        .collect()
}

/// Target generated by a full solve at `x`.
pub fn synthetic_target(
    system: &ConstrainedSystem,
    x: &[f64],
    sensors: SensorMap,
    q: usize,
    spec: WeightSpec,
) -> Result<ModalTarget> {
    let sol = solve_smallest(system, x, q, &EigenOptions::default())?;
    let shapes = if spec.mode_weight > 0.0 || spec.mode_weights.is_some() {
        (0..q)
            .map(|i| project_mode(&sol.mode(i), &sensors))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    ModalTarget::build(sol.frequencies, shapes, sensors, spec)
}

/// A complete calibration problem with known answer.
#[derive(Debug, Clone)]
pub struct RoundTrip {
    pub model: Model,
    pub system: ConstrainedSystem,
    pub space: ParamSpace,
    pub truth: Vec<f64>,
    pub target: ModalTarget,
}

/// Arch round trip: 5 frequencies and 5 mode shapes at [`ARCH_TRUTH`],
/// relative frequency weights, mode weight 0.1, start at the box midpoint.
pub fn arch_round_trip(refinement: usize) -> Result<RoundTrip> {
    let geometry = ArchGeometry::default();
    let model = geometry.build(refinement)?;
    let space = ParamSpace::new(arch_parameters(), None)?;
    let system = ConstrainedSystem::new(&model, &space)?;
    let sensors = SensorMap::new(arch_sensors(&geometry, &model, refinement), &model)?;
    let target = synthetic_target(
        &system,
        &ARCH_TRUTH,
        sensors,
        ARCH_MODES,
        WeightSpec::relative(0.1),
    )?;
    Ok(RoundTrip {
        model,
        system,
        space,
        truth: ARCH_TRUTH.to_vec(),
        target,
    })
}

/// One-material arch with free `(E, rho)`; frequencies depend on `E / rho`
/// only, so the scaled sensitivity has an exact null direction.
pub fn homogeneous_arch(refinement: usize, with_modes: bool) -> Result<RoundTrip> {
    let geometry = ArchGeometry::default();
    let truth = vec![3.25e9, 1800.0];
    let model = geometry
        .build(refinement)?
        .homogenized(MaterialRegion::new(ARCH_REGION, truth[0], 0.2, truth[1]))?;
    let space = ParamSpace::new(
        vec![
            Parameter::new("E", &[ARCH_REGION], Property::YoungModulus, 1e9, 9e9),
            Parameter::new("rho", &[ARCH_REGION], Property::MassDensity, 1000.0, 3000.0),
        ],
        None,
    )?;
    let system = ConstrainedSystem::new(&model, &space)?;
    let sensors = SensorMap::new(arch_sensors(&geometry, &model, refinement), &model)?;
    let spec = WeightSpec::relative(if with_modes { 0.1 } else { 0.0 });
    let target = synthetic_target(&system, &truth, sensors, ARCH_MODES, spec)?;
    Ok(RoundTrip {
        model,
        system,
        space,
        truth,
        target,
    })
}

/// Optimizer settings for the round trip. The default gradient tolerance
/// stops near `Phi ~ 1e-8`; recovering the truth to a few parts in 1e7
/// needs a tighter one.
pub fn round_trip_options() -> crate::optimizer::TrustRegionOptions {
    crate::optimizer::TrustRegionOptions {
        gradient_tol: 1e-6,
        ..Default::default()
    }
}

pub fn round_trip_baseline_options() -> crate::optimizer::BaselineOptions {
    crate::optimizer::BaselineOptions {
        gradient_tol: 1e-6,
        ..Default::default()
    }
}

/// `nx x ny` quad grid clamped along its bottom edge, with interior nodes
/// jittered by up to `jitter` and two regions of random material drawn from
/// `seed`. Used for randomized oracle comparisons.
pub fn jittered_grid(nx: usize, ny: usize, jitter: f64, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut nodes = Vec::new();
    for j in 0..=ny {
        for i in 0..=nx {
            let mut off = || if jitter > 0.0 { rng.gen_range(-jitter..jitter) } else { 0.0 };
            let interior = i > 0 && i < nx && j > 0 && j < ny;
            let (dx, dy) = if interior { (off(), off()) } else { (0.0, 0.0) };
            nodes.push([i as f64 + dx, j as f64 * 0.8 + dy]);
        }
    }
    let mut elements = Vec::new();
    for j in 0..ny {
        for i in 0..nx {
            let n0 = j * (nx + 1) + i;
            elements.push(Element {
                conn: [n0, n0 + 1, n0 + nx + 2, n0 + nx + 1],
                region: if i < nx / 2 { 1 } else { 2 },
            });
        }
    }
    let mut c = ConstraintSet::default();
    for i in 0..=nx {
        c.fix_node(i);
    }
    let regions = vec![
        MaterialRegion::new(1, rng.gen_range(1e9..5e9), 0.2, rng.gen_range(1500.0..2500.0)),
        MaterialRegion::new(2, rng.gen_range(1e9..5e9), 0.25, rng.gen_range(1500.0..2500.0)),
    ];
    Model::new(Mesh { nodes, elements, thickness: 1.0 }, c, regions)
        .expect("grid is a valid model")
}
