//! Fusing labeled demonstrations into a task distribution.
//!
//! Each demonstration contributes its trajectory coefficients with a signed
//! weight. Within a label class weights are proportional to demonstration
//! length. Positives share a total of `1 + beta` and negatives `-beta`, so
//! the weights always sum to one and the zeroth coefficient (total mass) is
//! preserved. With negatives only, a uniform pseudo-demonstration carries
//! `1 + gamma` against `-gamma` for the negatives.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::demos::{DemoSet, Demonstration, Label};
use crate::dynamics::ControlAffine;
use crate::error::{Error, Result};
use crate::spectral::{self, CoefficientSet, DensityGrid, Domain};

/// Provenance id of the uniform pseudo-demonstration in negonly fusion.
pub const UNIFORM_ID: &str = "uniform";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Posonly,
    Negonly,
    Posneg,
}

impl FusionMode {
    pub const ALL: [FusionMode; 3] = [FusionMode::Posonly, FusionMode::Negonly, FusionMode::Posneg];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Posonly => "posonly",
            FusionMode::Negonly => "negonly",
            FusionMode::Posneg => "posneg",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "posonly" => Ok(FusionMode::Posonly),
            "negonly" => Ok(FusionMode::Negonly),
            "posneg" => Ok(FusionMode::Posneg),
            other => Err(Error::InvalidConfig(format!("unknown fusion mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Highest coefficient order `K` per dimension.
    pub order: usize,
    /// Total negative weight in posneg fusion.
    pub beta: f64,
    /// Total negative weight in negonly fusion.
    pub gamma: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            order: 10,
            beta: 0.5,
            gamma: 0.5,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub id: String,
    pub w: f64,
}

/// Learned target distribution in coefficient form.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDefinition {
    pub phi: CoefficientSet,
    pub domain: Domain,
    pub projection: Vec<usize>,
    pub mode: FusionMode,
    pub provenance: Vec<Provenance>,
}

impl TaskDefinition {
    pub fn order(&self) -> usize {
        self.phi.order()
    }

    pub fn weight_sum(&self) -> f64 {
        self.provenance.iter().map(|p| p.w).sum()
    }

    /// Copies the periodic flags of `sys` (restricted to the projection)
    /// onto the task domain.
    pub fn bind_system<S: ControlAffine + ?Sized>(mut self, sys: &S) -> Result<Self> {
        let flags = self
            .projection
            .iter()
            .map(|&i| {
                sys.periodic().get(i).copied().ok_or(Error::DimensionMismatch {
                    expected: sys.state_dim(),
                    got: i + 1,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        self.domain = self.domain.with_periodic(flags)?;
        Ok(self)
    }

    pub fn density(&self, resolution: usize, clip_negative: bool) -> Result<DensityGrid> {
        spectral::reconstruct_density(&self.phi, &self.domain, resolution, clip_negative)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&TaskFile::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TaskFile = serde_json::from_str(text)?;
        file.try_into()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TaskFile {
    version: u32,
    mode: FusionMode,
    #[serde(rename = "K")]
    order: usize,
    domain: Domain,
    projection: Vec<usize>,
    phi: Vec<f64>,
    provenance: Vec<Provenance>,
}

impl From<&TaskDefinition> for TaskFile {
    fn from(t: &TaskDefinition) -> Self {
        Self {
            version: 1,
            mode: t.mode,
            order: t.phi.order(),
            domain: t.domain.clone(),
            projection: t.projection.clone(),
            phi: t.phi.values().to_vec(),
            provenance: t.provenance.clone(),
        }
    }
}

impl TryFrom<TaskFile> for TaskDefinition {
    type Error = Error;

    fn try_from(f: TaskFile) -> Result<Self> {
        if f.version != 1 {
            return Err(Error::InvalidConfig(format!("unsupported task file version {}", f.version)));
        }
        if f.projection.len() != f.domain.dim() {
            return Err(Error::DimensionMismatch {
                expected: f.domain.dim(),
                got: f.projection.len(),
            });
        }
        let phi = CoefficientSet::from_values(f.order, f.domain.dim(), f.phi)?;
        Ok(Self {
            phi,
            domain: f.domain,
            projection: f.projection,
            mode: f.mode,
            provenance: f.provenance,
        })
    }
}

fn class_weights<'a>(demos: &[&'a Demonstration], total: f64) -> Vec<(&'a Demonstration, f64)> {
    let raw: Vec<f64> = demos.iter().map(|d| d.weight_override.unwrap_or_else(|| d.duration())).collect();
    let sum: f64 = raw.iter().sum();
    demos.iter().zip(raw).map(|(d, r)| (*d, total * r / sum)).collect()
}

/// Fuses the demonstrations of `set` into a task definition.
///
/// Demonstrations whose label is not used by `mode` are ignored.
pub fn learn_task(set: &DemoSet, mode: FusionMode, cfg: &FusionConfig) -> Result<TaskDefinition> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::EmptySet);
    }
    let positives: Vec<&Demonstration> = set.with_label(Label::Positive).collect();
    let negatives: Vec<&Demonstration> = set.with_label(Label::Negative).collect();
    let order = cfg.order;
    let n = set.domain.dim();

    let mut terms: Vec<(&Demonstration, f64)> = Vec::new();
    let mut phi = CoefficientSet::zeros(order, n);
    let mut provenance = Vec::new();
    match mode {
        FusionMode::Posonly | FusionMode::Posneg => {
            if positives.is_empty() {
                return Err(Error::MissingLabel {
                    mode: mode.as_str(),
                    label: "positive",
                });
            }
            let beta = if mode == FusionMode::Posneg && !negatives.is_empty() {
                cfg.beta
            } else {
                0.0
            };
            terms.extend(class_weights(&positives, 1.0 + beta));
            if mode == FusionMode::Posneg && !negatives.is_empty() {
                terms.extend(class_weights(&negatives, -beta));
            }
        }
        FusionMode::Negonly => {
            if negatives.is_empty() {
                return Err(Error::MissingLabel {
                    mode: mode.as_str(),
                    label: "negative",
                });
            }
            let w_uniform = 1.0 + cfg.gamma;
            phi.add_scaled(w_uniform, &spectral::uniform_coefficients(order, &set.domain))?;
            provenance.push(Provenance {
                id: UNIFORM_ID.to_string(),
                w: w_uniform,
            });
            terms.extend(class_weights(&negatives, -cfg.gamma));
        }
    }
    for (demo, w) in terms {
        let c = demo.trajectory.coefficients(&set.projection, order, &set.domain)?;
        phi.add_scaled(w, &c)?;
        provenance.push(Provenance { id: demo.id.clone(), w });
    }
    // mass is fixed analytically; the sum above matches it to rounding
    phi.values_mut()[0] = spectral::uniform_coefficients(0, &set.domain).values()[0];
    Ok(TaskDefinition {
        phi,
        domain: set.domain.clone(),
        projection: set.projection.clone(),
        mode,
        provenance,
    })
}

/// Cart-pole ground truth: a delta at the inverted equilibrium in `(theta, theta_dot)`.
pub fn true_task_cartpole(order: usize, domain: &Domain) -> Result<TaskDefinition> {
    let target = [0.0, 0.0];
    if !domain.contains(&target) {
        return Err(Error::OutsideDomain(target.to_vec()));
    }
    Ok(TaskDefinition {
        phi: spectral::delta_coefficients(&target, order, domain)?,
        domain: domain.clone(),
        projection: vec![0, 1],
        mode: FusionMode::Posonly,
        provenance: vec![Provenance {
            id: "true-task".into(),
            w: 1.0,
        }],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demos::Source;
    use crate::dynamics::SystemKind;
    use crate::spectral::{ergodic_metric, frequency_weights};
    use crate::trajectory::Trajectory;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn planar_demo(id: &str, label: Label, center: [f64; 2], radius: f64, duration: f64) -> Demonstration {
        let n = (duration / 0.05).round() as usize + 1;
        let times: Vec<f64> = (0..n).map(|i| i as f64 * 0.05).collect();
        let states = times
            .iter()
            .map(|t| vec![center[0] + radius * t.cos(), center[1] + radius * t.sin(), 0.0, 0.0])
            .collect();
        Demonstration::new(id, label, Source::Synthetic, Trajectory::new(SystemKind::Planar, times, states).unwrap()).unwrap()
    }

    fn h0(set: &DemoSet) -> f64 {
        set.domain.lengths().iter().map(|l| l.sqrt()).product()
    }

    #[test]
    fn single_positive_equals_its_coefficients() {
        let d = planar_demo("a", Label::Positive, [0.4, 0.6], 0.2, 7.0);
        let set = DemoSet::from_demos(SystemKind::Planar, vec![d.clone()]).unwrap();
        let task = learn_task(&set, FusionMode::Posonly, &FusionConfig { beta: 0.0, ..Default::default() }).unwrap();
        let c = d.trajectory.coefficients(&set.projection, 10, &set.domain).unwrap();
        assert!(task.phi.max_abs_diff(&c).unwrap() < 1e-15);
        assert_eq!(task.provenance, vec![Provenance { id: "a".into(), w: 1.0 }]);
    }

    #[test]
    fn identical_positives_are_idempotent() {
        let a = planar_demo("a", Label::Positive, [0.4, 0.6], 0.2, 7.0);
        let mut b = a.clone();
        b.id = "b".into();
        let one = learn_task(&DemoSet::from_demos(SystemKind::Planar, vec![a.clone()]).unwrap(), FusionMode::Posonly, &FusionConfig::default()).unwrap();
        let two = learn_task(&DemoSet::from_demos(SystemKind::Planar, vec![a, b]).unwrap(), FusionMode::Posonly, &FusionConfig::default()).unwrap();
        assert!(one.phi.max_abs_diff(&two.phi).unwrap() < 1e-14);
    }

    #[test]
    fn posneg_direct_arithmetic() {
        let a = planar_demo("a", Label::Positive, [0.3, 0.3], 0.1, 5.0);
        let b = planar_demo("b", Label::Negative, [0.7, 0.6], 0.15, 9.0);
        let set = DemoSet::from_demos(SystemKind::Planar, vec![a.clone(), b.clone()]).unwrap();
        let cfg = FusionConfig { order: 3, beta: 0.5, gamma: 0.5 };
        let task = learn_task(&set, FusionMode::Posneg, &cfg).unwrap();
        let ca = a.trajectory.coefficients(&[0, 1], 3, &set.domain).unwrap();
        let cb = b.trajectory.coefficients(&[0, 1], 3, &set.domain).unwrap();
        for i in 0..task.phi.len() {
            let expected = 1.5 * ca.values()[i] - 0.5 * cb.values()[i];
            assert_abs_diff_eq!(task.phi.values()[i], expected, epsilon = 1e-14);
        }
        assert_abs_diff_eq!(task.phi.values()[0], 1.0 / h0(&set), epsilon = 1e-15);
    }

    #[test]
    fn negonly_injects_uniform() {
        let b = planar_demo("b", Label::Negative, [0.7, 0.6], 0.15, 9.0);
        let set = DemoSet::from_demos(SystemKind::Planar, vec![b]).unwrap();
        let task = learn_task(&set, FusionMode::Negonly, &FusionConfig::default()).unwrap();
        assert_eq!(task.provenance[0].id, UNIFORM_ID);
        assert_abs_diff_eq!(task.provenance[0].w, 1.5);
        assert_abs_diff_eq!(task.weight_sum(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn missing_labels_and_empty_sets() {
        let pos = planar_demo("a", Label::Positive, [0.3, 0.3], 0.1, 5.0);
        let neg = planar_demo("b", Label::Negative, [0.3, 0.3], 0.1, 5.0);
        let only_pos = DemoSet::from_demos(SystemKind::Planar, vec![pos]).unwrap();
        let only_neg = DemoSet::from_demos(SystemKind::Planar, vec![neg]).unwrap();
        let cfg = FusionConfig::default();
        assert!(matches!(learn_task(&only_pos, FusionMode::Negonly, &cfg), Err(Error::MissingLabel { .. })));
        assert!(matches!(learn_task(&only_neg, FusionMode::Posonly, &cfg), Err(Error::MissingLabel { .. })));
        assert!(matches!(learn_task(&only_neg, FusionMode::Posneg, &cfg), Err(Error::MissingLabel { .. })));
        assert!(matches!(learn_task(&DemoSet::new(SystemKind::Planar), FusionMode::Posonly, &cfg), Err(Error::EmptySet)));
        let bad = FusionConfig { beta: -1.0, ..cfg };
        assert!(learn_task(&only_pos, FusionMode::Posonly, &bad).is_err());
    }

    #[test]
    fn posneg_lowers_density_where_only_negatives_go() {
        let a = planar_demo("a", Label::Positive, [0.3, 0.3], 0.1, 10.0);
        let b = planar_demo("b", Label::Negative, [0.75, 0.7], 0.08, 10.0);
        let set = DemoSet::from_demos(SystemKind::Planar, vec![a, b]).unwrap();
        let cfg = FusionConfig::default();
        let posonly = learn_task(&set, FusionMode::Posonly, &cfg).unwrap().density(64, false).unwrap();
        let posneg = learn_task(&set, FusionMode::Posneg, &cfg).unwrap().density(64, false).unwrap();
        let probe = [0.75 + 0.08, 0.7];
        assert!(posneg.value_at(&probe) < posonly.value_at(&probe));
    }

    #[test]
    fn true_task_examples() {
        let domain = SystemKind::Cartpole.build().ergodic_domain();
        let task = true_task_cartpole(10, &domain).unwrap();
        assert_abs_diff_eq!(task.phi.values()[0], 1.0 / (2.0 * std::f64::consts::PI * 12.0).sqrt(), epsilon = 1e-15);
        let peak = task.density(64, false).unwrap();
        let p = peak.argmax();
        assert!(p[0].abs() <= peak.cell[0] && p[1].abs() <= peak.cell[1]);
        let w = frequency_weights(10, 2);
        assert_eq!(ergodic_metric(&task.phi, &task.phi, &w).unwrap(), 0.0);

        let shifted = Domain::new(vec![0.5, 0.5], vec![1.0, 1.0]).unwrap();
        assert!(matches!(true_task_cartpole(4, &shifted), Err(Error::OutsideDomain(_))));
    }

    #[test]
    fn task_file_round_trip() {
        let a = planar_demo("a", Label::Positive, [0.3, 0.3], 0.1, 5.0);
        let b = planar_demo("b", Label::Negative, [0.7, 0.6], 0.15, 9.0);
        let set = DemoSet::from_demos(SystemKind::Planar, vec![a, b]).unwrap();
        let task = learn_task(&set, FusionMode::Posneg, &FusionConfig { order: 4, ..Default::default() }).unwrap();
        let json = task.to_json().unwrap();
        assert!(json.starts_with("{\"version\":1,\"mode\":\"posneg\",\"K\":4,\"domain\":{\"lower\":[0.0,0.0],\"lengths\":[1.0,1.0]}"));
        assert_eq!(TaskDefinition::from_json(&json).unwrap(), task);
    }

    prop_compose! {
        fn arb_set()(specs in prop::collection::vec((any::<bool>(), 0.1f64..0.9, 0.1f64..0.9, 0.01f64..0.3, 1.0f64..12.0), 1..6))
            -> DemoSet {
            let demos = specs.iter().enumerate().map(|(i, (pos, cx, cy, r, dur))| {
                let label = if *pos { Label::Positive } else { Label::Negative };
                planar_demo(&format!("d{i}"), label, [*cx, *cy], *r, *dur)
            }).collect();
            DemoSet::from_demos(SystemKind::Planar, demos).unwrap()
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn mass_and_weight_invariants(set in arb_set(), beta in 0.0f64..3.0, gamma in 0.0f64..3.0) {
            let cfg = FusionConfig { order: 4, beta, gamma };
            for mode in FusionMode::ALL {
                if let Ok(task) = learn_task(&set, mode, &cfg) {
                    prop_assert!((task.phi.values()[0] - 1.0 / h0(&set)).abs() < 1e-12);
                    prop_assert!((task.weight_sum() - 1.0).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn duplicating_every_demo_changes_nothing(set in arb_set(), beta in 0.0f64..2.0) {
            let cfg = FusionConfig { order: 4, beta, gamma: beta };
            let mut doubled = set.clone();
            for d in set.demos.iter() {
                let mut copy = d.clone();
                copy.id.push_str("-copy");
                doubled.push(copy).unwrap();
            }
            for mode in FusionMode::ALL {
                if let (Ok(a), Ok(b)) = (learn_task(&set, mode, &cfg), learn_task(&doubled, mode, &cfg)) {
                    prop_assert!(a.phi.max_abs_diff(&b.phi).unwrap() < 1e-12);
                }
            }
        }
    }
}
