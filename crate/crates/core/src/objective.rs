//! Modal targets, MAC indicators and the weighted least-squares residual
//!
//! ```text
//! r = W (f^ - f(x), 1 - gamma(x)),   Phi = ||r||^2
//! ```
//!
//! Frequencies are compared in Hz.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Direction, Dof, Model};

/// Observed dofs, as global (unconstrained) dof indices in sensor order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SensorMap {
    dofs: Vec<Dof>,
}

impl SensorMap {
    /// Checks that every sensor exists and is neither fixed nor a slave.
    pub fn new(dofs: Vec<Dof>, model: &Model) -> Result<SensorMap> {
        let dm = model.dof_map();
        for d in &dofs {
            if d.node >= model.mesh.nodes.len() {
                return Err(Error::Target(format!("sensor on unknown node {}", d.node)));
            }
            if dm.free.binary_search(&d.index()).is_err() {
                return Err(Error::Target(format!(
                    "sensor dof ({}, {}) is constrained",
                    d.node, d.dir as u8
                )));
            }
        }
        Ok(SensorMap { dofs })
    }

    /// Unvalidated constructor for synthetic vectors.
    pub fn from_dofs(dofs: Vec<Dof>) -> SensorMap {
        SensorMap { dofs }
    }

    pub fn len(&self) -> usize {
        self.dofs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dofs.is_empty()
    }

    pub fn dofs(&self) -> &[Dof] {
        &self.dofs
    }

    pub fn indices(&self) -> Vec<usize> {
        self.dofs.iter().map(Dof::index).collect()
    }
}

/// Entries of a full-coordinate mode at the sensors, in sensor order.
pub fn project_mode(mode: &[f64], sensors: &SensorMap) -> Result<Vec<f64>> {
    if sensors.is_empty() {
        return Err(Error::Target("no observed dofs".into()));
    }
    sensors
        .dofs
        .iter()
        .map(|d| {
            mode.get(d.index())
                .copied()
                .ok_or_else(|| Error::Target(format!("sensor dof {} out of range", d.index())))
        })
        .collect()
}

/// Modal assurance criterion `|a.b| / (||a|| ||b||)`.
pub fn mac(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Target(format!(
            "MAC of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(na > 0.0 && nb > 0.0) {
        return Err(Error::Target("MAC of a zero vector".into()));
    }
    let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((ab.abs() / (na * nb)).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightScheme {
    /// Frequency weights 1.
    Absolute,
    /// Frequency weights `1 / f^_i`.
    Relative,
    /// All `2q` raw weights given explicitly.
    Custom,
}

fn default_mode_weight() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightSpec {
    pub scheme: WeightScheme,
    #[serde(default = "default_mode_weight")]
    pub mode_weight: f64,
    /// Per-mode raw weights, overriding `mode_weight`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode_weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom: Option<Vec<f64>>,
}

impl WeightSpec {
    pub fn relative(mode_weight: f64) -> Self {
        Self {
            scheme: WeightScheme::Relative,
            mode_weight,
            mode_weights: None,
            custom: None,
        }
    }

    pub fn absolute(mode_weight: f64) -> Self {
        Self {
            scheme: WeightScheme::Absolute,
            ..Self::relative(mode_weight)
        }
    }

    pub fn custom(raw: Vec<f64>) -> Self {
        Self {
            scheme: WeightScheme::Custom,
            custom: Some(raw),
            ..Self::relative(0.0)
        }
    }

    /// Raw (unnormalized) weights for `frequencies`.
    pub fn raw(&self, frequencies: &[f64]) -> Result<Vec<f64>> {
        let q = frequencies.len();
        let raw = match self.scheme {
            WeightScheme::Custom => {
                let c = self
                    .custom
                    .as_ref()
                    .ok_or_else(|| Error::Target("custom scheme without weights".into()))?;
                if c.len() != 2 * q {
                    return Err(Error::Target(format!(
                        "expected {} custom weights, got {}",
                        2 * q,
                        c.len()
                    )));
                }
                c.clone()
            }
            scheme => {
                let mut w: Vec<f64> = match scheme {
                    WeightScheme::Absolute => vec![1.0; q],
                    _ => frequencies.iter().map(|f| 1.0 / f).collect(),
                };
                match &self.mode_weights {
                    Some(m) if m.len() != q => {
                        return Err(Error::Target(format!(
                            "expected {q} mode weights, got {}",
                            m.len()
                        )))
                    }
                    Some(m) => w.extend_from_slice(m),
                    None => w.extend(std::iter::repeat(self.mode_weight).take(q)),
                }
                w
            }
        };
        if raw.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(Error::Target("weights must be finite and non-negative".into()));
        }
        Ok(raw)
    }
}

/// Measured modal data with normalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalTarget {
    pub frequencies: Vec<f64>,
    pub sensors: SensorMap,
    /// One vector per mode in sensor order; empty when no mode is weighted.
    pub mode_shapes: Vec<Vec<f64>>,
    /// Length `2q`, `||w|| = 1`.
    pub weights: Vec<f64>,
    pub spec: WeightSpec,
}

impl ModalTarget {
    pub fn build(
        frequencies: Vec<f64>,
        mode_shapes: Vec<Vec<f64>>,
        sensors: SensorMap,
        spec: WeightSpec,
    ) -> Result<ModalTarget> {
        let q = frequencies.len();
        if frequencies.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
            return Err(Error::Target("frequencies must be positive".into()));
        }
        if frequencies.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Target("frequencies must be ascending".into()));
        }
        let raw = spec.raw(&frequencies)?;
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Target("degenerate weights".into()));
        }
        let weights: Vec<f64> = raw.iter().map(|v| v / norm).collect();
        let modes_weighted = weights[q..].iter().any(|&w| w > 0.0);
        if mode_shapes.is_empty() {
            if modes_weighted {
                return Err(Error::Target("mode weights set but no mode shapes given".into()));
            }
        } else {
            if mode_shapes.len() != q {
                return Err(Error::Target(format!(
                    "expected {q} mode shapes, got {}",
                    mode_shapes.len()
                )));
            }
            if sensors.is_empty() {
                return Err(Error::Target("no observed dofs".into()));
            }
            for (i, s) in mode_shapes.iter().enumerate() {
                if s.len() != sensors.len() {
                    return Err(Error::Target(format!(
                        "mode {i} has {} entries for {} sensors",
                        s.len(),
                        sensors.len()
                    )));
                }
                if weights[q + i] > 0.0 && s.iter().all(|&v| v == 0.0) {
                    return Err(Error::Target(format!("mode {i} is a zero vector")));
                }
            }
        }
        Ok(ModalTarget {
            frequencies,
            sensors,
            mode_shapes,
            weights,
            spec,
        })
    }

    pub fn q(&self) -> usize {
        self.frequencies.len()
    }

    pub fn has_modes(&self) -> bool {
        !self.mode_shapes.is_empty()
    }

    /// Same target with replaced frequencies (weights recomputed).
    pub fn with_frequencies(&self, frequencies: Vec<f64>) -> Result<ModalTarget> {
        ModalTarget::build(
            frequencies,
            self.mode_shapes.clone(),
            self.sensors.clone(),
            self.spec.clone(),
        )
    }

    pub fn with_mode_shapes(&self, mode_shapes: Vec<Vec<f64>>) -> Result<ModalTarget> {
        ModalTarget::build(
            self.frequencies.clone(),
            mode_shapes,
            self.sensors.clone(),
            self.spec.clone(),
        )
    }

    pub fn to_file(&self) -> TargetFile {
        TargetFile {
            frequencies_hz: self.frequencies.clone(),
            sensor_dofs: self
                .sensors
                .dofs
                .iter()
                .map(|d| (d.node, d.dir as u8))
                .collect(),
            mode_shapes: self.mode_shapes.clone(),
            weights: self.spec.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("serializable target")
    }

    pub fn from_json(text: &str, model: &Model) -> Result<ModalTarget> {
        let file: TargetFile =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("target file: {e}")))?;
        file.into_target(model)
    }
}

/// On-disk form of a [`ModalTarget`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetFile {
    pub frequencies_hz: Vec<f64>,
    pub sensor_dofs: Vec<(usize, u8)>,
    #[serde(default)]
    pub mode_shapes: Vec<Vec<f64>>,
    pub weights: WeightSpec,
}

impl TargetFile {
    pub fn into_target(self, model: &Model) -> Result<ModalTarget> {
        let dofs = self
            .sensor_dofs
            .iter()
            .map(|&(n, d)| {
                Direction::from_index(d)
                    .map(|dir| Dof::new(n, dir))
                    .ok_or_else(|| Error::Target(format!("sensor direction {d} is not 0 or 1")))
            })
            .collect::<Result<Vec<_>>>()?;
        let sensors = SensorMap::new(dofs, model)?;
        ModalTarget::build(self.frequencies_hz, self.mode_shapes, sensors, self.weights)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum PairingMode {
    /// i-th target mode against i-th computed mode.
    #[default]
    Index,
    /// Assignment maximizing the summed MAC over the first `q + buffer`
    /// computed modes.
    Mac { buffer: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pairing {
    /// `indices[i]`: computed mode matched to target mode `i`.
    pub indices: Vec<usize>,
    /// Index order and MAC assignment disagree.
    pub swap_warning: bool,
}

/// Assignment of `q` rows to distinct columns maximizing the summed score
/// (exact, dynamic programming over column subsets).
fn best_assignment(score: &[Vec<f64>], cols: usize) -> Vec<usize> {
    let q = score.len();
    let states = 1usize << cols;
    let mut best = vec![f64::NEG_INFINITY; states];
    let mut choice = vec![usize::MAX; states];
    best[0] = 0.0;
    for mask in 0..states {
        if best[mask] == f64::NEG_INFINITY {
            continue;
        }
        let row = mask.count_ones() as usize;
        if row >= q {
            continue;
        }
        for c in 0..cols {
            if mask & (1 << c) == 0 {
                let next = mask | (1 << c);
                let v = best[mask] + score[row][c];
                if v > best[next] + 1e-14 {
                    best[next] = v;
                    choice[next] = c;
                }
            }
        }
    }
    let (mut mask, _) = (0..states)
        .filter(|m| m.count_ones() as usize == q)
        .map(|m| (m, best[m]))
        .fold((0, f64::NEG_INFINITY), |acc, (m, v)| if v > acc.1 + 1e-14 { (m, v) } else { acc });
    let mut out = vec![0; q];
    for row in (0..q).rev() {
        let c = choice[mask];
        out[row] = c;
        mask &= !(1 << c);
    }
    out
}

/// Matches target modes to computed modes (given at the sensors).
pub fn pair_modes(
    computed: &[Vec<f64>],
    target: &ModalTarget,
    mode: PairingMode,
) -> Result<Pairing> {
    let q = target.q();
    if computed.len() < q {
        return Err(Error::Target(format!(
            "{} computed modes for {q} target modes",
            computed.len()
        )));
    }
    let index: Vec<usize> = (0..q).collect();
    if q == 0 || !target.has_modes() {
        return Ok(Pairing {
            indices: index,
            swap_warning: false,
        });
    }
    let buffer = match mode {
        PairingMode::Index => 0,
        PairingMode::Mac { buffer } => buffer,
    };
    let cols = (q + buffer).min(computed.len()).min(20);
    let score = target
        .mode_shapes
        .iter()
        .map(|t| computed[..cols].iter().map(|c| mac(t, c)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let assignment = best_assignment(&score, cols);
    let swap_warning = assignment != index;
    if swap_warning {
        log::warn!("mode pairing by MAC {assignment:?} differs from index order");
    }
    Ok(Pairing {
        indices: match mode {
            PairingMode::Index => index,
            PairingMode::Mac { .. } => assignment,
        },
        swap_warning,
    })
}

/// Weighted residual and objective at one model evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub r: Vec<f64>,
    pub phi: f64,
    /// MAC per target mode; empty when the target has no mode shapes.
    pub gamma: Vec<f64>,
}

/// `frequencies[i]` and `modes[i]` are the (already paired) computed values
/// for target mode `i`; `modes` are sensor-space vectors.
pub fn residual(target: &ModalTarget, frequencies: &[f64], modes: &[Vec<f64>]) -> Result<Residual> {
    let q = target.q();
    if frequencies.len() != q {
        return Err(Error::Target(format!(
            "{} frequencies for {q} target modes",
            frequencies.len()
        )));
    }
    let w = &target.weights;
    let mut r: Vec<f64> = (0..q)
        .map(|i| w[i] * (target.frequencies[i] - frequencies[i]))
        .collect();
    let mut gamma = Vec::new();
    if target.has_modes() {
        if modes.len() != q {
            return Err(Error::Target(format!("{} modes for {q} target modes", modes.len())));
        }
        for (i, (t, m)) in target.mode_shapes.iter().zip(modes).enumerate() {
            let g = if w[q + i] > 0.0 {
                mac(t, m)?
            } else {
                mac(t, m).unwrap_or(0.0)
            };
            gamma.push(g);
            r.push(w[q + i] * (1.0 - g));
        }
    } else {
        r.extend(std::iter::repeat(0.0).take(q));
    }
    let phi = r.iter().map(|v| v * v).sum();
    Ok(Residual { r, phi, gamma })
}

/// `Phi` written as the explicit weighted sum of squared gaps.
pub fn phi_from_gaps(target: &ModalTarget, frequencies: &[f64], gamma: &[f64]) -> f64 {
    let q = target.q();
    let w = &target.weights;
    let mut phi = 0.0;
    for i in 0..q {
        phi += w[i] * w[i] * (target.frequencies[i] - frequencies[i]).powi(2);
    }
    for (i, g) in gamma.iter().enumerate() {
        phi += w[q + i] * w[q + i] * (1.0 - g).powi(2);
    }
    phi
}

/// Pairs computed modes with the target and evaluates the residual.
/// `frequencies` and `sensor_modes` may hold more than `q` computed pairs.
pub fn evaluate(
    target: &ModalTarget,
    frequencies: &[f64],
    sensor_modes: &[Vec<f64>],
    mode: PairingMode,
) -> Result<(Residual, Pairing)> {
    let pairing = if target.has_modes() {
        pair_modes(sensor_modes, target, mode)?
    } else {
        if frequencies.len() < target.q() {
            return Err(Error::Target(format!(
                "{} computed frequencies for {} target modes",
                frequencies.len(),
                target.q()
            )));
        }
        Pairing {
            indices: (0..target.q()).collect(),
            swap_warning: false,
        }
    };
    let f: Vec<f64> = pairing.indices.iter().map(|&i| frequencies[i]).collect();
    let m: Vec<Vec<f64>> = if target.has_modes() {
        pairing.indices.iter().map(|&i| sensor_modes[i].clone()).collect()
    } else {
        Vec::new()
    };
    Ok((residual(target, &f, &m)?, pairing))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sensors(n: usize) -> SensorMap {
        SensorMap::from_dofs((0..n).map(|i| Dof::new(i, Direction::X)).collect())
    }

    #[test]
    fn mac_basic_cases() {
        let v = [1.0, -2.0, 0.5];
        assert!((mac(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        let w: Vec<f64> = v.iter().map(|x| -2.0 * x).collect();
        assert!((mac(&v, &w).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(mac(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(mac(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn relative_weights_follow_inverse_frequencies() {
        let f = vec![1.05, 1.3, 4.19, 4.50];
        let spec = WeightSpec {
            mode_weights: Some(vec![0.1, 0.1, 0.0, 0.0]),
            ..WeightSpec::relative(0.1)
        };
        let shapes = vec![vec![1.0, 0.0]; 4];
        let t = ModalTarget::build(f.clone(), shapes, sensors(2), spec).unwrap();
        let raw = [1.0 / 1.05, 1.0 / 1.3, 1.0 / 4.19, 1.0 / 4.50, 0.1, 0.1, 0.0, 0.0];
        let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (a, b) in t.weights.iter().zip(raw) {
            assert!((a - b / n).abs() < 1e-15);
        }
    }

    #[test]
    fn equal_weights_normalize_to_half() {
        let t = ModalTarget::build(
            vec![1.0, 2.0],
            vec![vec![1.0], vec![2.0]],
            sensors(1),
            WeightSpec::absolute(1.0),
        )
        .unwrap();
        for w in &t.weights {
            assert!((w - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn degenerate_and_negative_weights() {
        let err = ModalTarget::build(vec![1.0], vec![], sensors(0), WeightSpec::custom(vec![0.0, 0.0]))
            .unwrap_err();
        assert!(err.to_string().contains("degenerate weights"));
        assert!(ModalTarget::build(vec![1.0], vec![], sensors(0), WeightSpec::custom(vec![-1.0, 0.0])).is_err());
        assert!(ModalTarget::build(vec![1.0, 2.0], vec![], sensors(0), WeightSpec::custom(vec![1.0])).is_err());
    }

    #[test]
    fn project_mode_extracts_in_sensor_order() {
        let mode = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        let s = SensorMap::from_dofs(vec![Dof::new(2, Direction::Y), Dof::new(0, Direction::Y)]);
        assert_eq!(project_mode(&mode, &s).unwrap(), vec![5.0, 1.0]);
        let all = SensorMap::from_dofs((0..3).flat_map(|n| [Dof::new(n, Direction::X), Dof::new(n, Direction::Y)]).collect());
        assert_eq!(project_mode(&mode, &all).unwrap(), mode.to_vec());
        assert!(project_mode(&mode, &sensors(0)).unwrap_err().to_string().contains("no observed dofs"));
    }

    #[test]
    fn one_mode_residual() {
        let t = ModalTarget::build(vec![10.0], vec![], sensors(0), WeightSpec::custom(vec![1.0, 0.0])).unwrap();
        let r = residual(&t, &[9.0], &[]).unwrap();
        assert_eq!(r.r, vec![1.0, 0.0]);
        assert_eq!(r.phi, 1.0);
    }

    #[test]
    fn self_generated_target_has_zero_residual() {
        let shapes = vec![vec![1.0, 2.0, 3.0], vec![3.0, -1.0, 0.5]];
        let t = ModalTarget::build(vec![3.0, 7.0], shapes.clone(), sensors(3), WeightSpec::relative(0.1)).unwrap();
        let r = residual(&t, &[3.0, 7.0], &shapes).unwrap();
        assert!(r.phi.abs() < 1e-30);
        assert!(r.r.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn mac_pairing_recovers_a_swap() {
        let a = vec![1.0, 0.0, 0.0, 0.0];
        let b = vec![0.0, 1.0, 0.0, 0.0];
        let c = vec![0.0, 0.0, 1.0, 0.2];
        let d = vec![0.0, 0.1, -0.2, 1.0];
        let computed = vec![a.clone(), b.clone(), c.clone(), d.clone()];
        let t = ModalTarget::build(
            vec![1.0, 2.0, 3.0, 3.1],
            vec![a, b, d, c],
            sensors(4),
            WeightSpec::relative(0.1),
        )
        .unwrap();
        let p = pair_modes(&computed, &t, PairingMode::Mac { buffer: 0 }).unwrap();
        assert_eq!(p.indices, vec![0, 1, 3, 2]);
        assert!(p.swap_warning);
        let p = pair_modes(&computed, &t, PairingMode::Index).unwrap();
        assert_eq!(p.indices, vec![0, 1, 2, 3]);
        assert!(p.swap_warning);
    }

    #[test]
    fn separated_modes_pair_identically() {
        let e = |i: usize| (0..3).map(|j| if i == j { 1.0 } else { 0.05 }).collect::<Vec<f64>>();
        let computed = vec![e(0), e(1), e(2)];
        let t = ModalTarget::build(vec![1.0, 2.0, 3.0], computed.clone(), sensors(3), WeightSpec::relative(0.1)).unwrap();
        let p = pair_modes(&computed, &t, PairingMode::Mac { buffer: 0 }).unwrap();
        assert_eq!(p.indices, vec![0, 1, 2]);
        assert!(!p.swap_warning);
    }

    #[test]
    fn empty_target_pairs_nothing() {
        let t = ModalTarget::build(vec![], vec![], sensors(0), WeightSpec::custom(vec![]));
        // no data at all has no non-zero weight
        assert!(t.is_err());
        let t = ModalTarget::build(vec![1.0], vec![], sensors(0), WeightSpec::absolute(0.0)).unwrap();
        let p = pair_modes(&[vec![]], &t, PairingMode::Mac { buffer: 2 }).unwrap();
        assert_eq!(p.indices, vec![0]);
        let assignment = best_assignment(&[], 3);
        assert!(assignment.is_empty());
    }

    #[test]
    fn too_few_computed_modes() {
        let t = ModalTarget::build(vec![1.0, 2.0], vec![vec![1.0], vec![1.0]], sensors(1), WeightSpec::relative(0.1)).unwrap();
        assert!(pair_modes(&[vec![1.0]], &t, PairingMode::Index).is_err());
    }

    #[test]
    fn target_file_round_trip_fields() {
        let t = ModalTarget::build(vec![2.0], vec![vec![1.0]], sensors(1), WeightSpec::relative(0.1)).unwrap();
        let text = t.to_json();
        let file: TargetFile = serde_json::from_str(&text).unwrap();
        assert_eq!(file, t.to_file());
        assert!(serde_json::from_str::<WeightSpec>(r#"{"scheme":"relative","bogus":1}"#).is_err());
        let spec: WeightSpec = serde_json::from_str(r#"{"scheme":"absolute"}"#).unwrap();
        assert_eq!(spec.mode_weight, 0.1);
    }

    proptest! {
        #[test]
        fn phi_equals_squared_residual_norm(
            f_hat in prop::collection::vec(0.5f64..50.0, 2),
            f in prop::collection::vec(0.5f64..50.0, 2),
            raw in prop::collection::vec(0.0f64..1.0, 4),
            shapes in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 4),
        ) {
            prop_assume!(raw.iter().any(|&v| v > 1e-3));
            prop_assume!(shapes.iter().all(|s| s.iter().any(|v| v.abs() > 1e-3)));
            let mut f_hat = f_hat;
            f_hat.sort_by(f64::total_cmp);
            let t = ModalTarget::build(f_hat, shapes[..2].to_vec(), sensors(3), WeightSpec::custom(raw)).unwrap();
            let r = residual(&t, &f, &shapes[2..]).unwrap();
            let direct = phi_from_gaps(&t, &f, &r.gamma);
            prop_assert!((r.phi - direct).abs() <= 1e-15 * direct.max(1e-300) + 1e-300);
            prop_assert!(r.phi >= 0.0);
            prop_assert!(r.gamma.iter().all(|g| (0.0..=1.0).contains(g)));
        }

        #[test]
        fn mac_is_scale_invariant(
            a in prop::collection::vec(-1.0f64..1.0, 1..12),
            seed in prop::collection::vec(-1.0f64..1.0, 12),
            s in prop_oneof![-1e3f64..-1e-3, 1e-3f64..1e3],
            t in prop_oneof![-1e3f64..-1e-3, 1e-3f64..1e3],
        ) {
            let b: Vec<f64> = seed[..a.len()].to_vec();
            prop_assume!(a.iter().any(|v| v.abs() > 1e-6) && b.iter().any(|v| v.abs() > 1e-6));
            let g = mac(&a, &b).unwrap();
            let sa: Vec<f64> = a.iter().map(|v| v * s).collect();
            let tb: Vec<f64> = b.iter().map(|v| v * t).collect();
            prop_assert!((mac(&sa, &tb).unwrap() - g).abs() <= 1e-12);
            prop_assert!((0.0..=1.0).contains(&g));
        }

        #[test]
        fn weights_have_unit_norm(
            f in prop::collection::vec(0.1f64..100.0, 1..6),
            mw in 0.0f64..1.0,
            custom in prop::collection::vec(0.0f64..1.0, 12),
            scheme in 0usize..3,
        ) {
            let mut f = f;
            f.sort_by(f64::total_cmp);
            let q = f.len();
            let spec = match scheme {
                0 => WeightSpec::absolute(mw),
                1 => WeightSpec::relative(mw),
                _ => WeightSpec::custom(custom[..2 * q].to_vec()),
            };
            prop_assume!(spec.raw(&f).unwrap().iter().any(|&v| v > 0.0));
            let shapes = vec![vec![1.0]; q];
            let t = ModalTarget::build(f, shapes, sensors(1), spec).unwrap();
            let n = t.weights.iter().map(|w| w * w).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-14);
            prop_assert!(t.weights.iter().all(|&w| w >= 0.0));
        }
    }
}
