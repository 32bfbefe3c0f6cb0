//! Flat unconstrained parameter vectors and their manifest.

use serde::{Deserialize, Serialize};

use crate::adf::{LatentInit, ObservationModel};
use crate::error::{Error, Result};
use crate::fpsgp::{FixedPointSet, JacobianNoise, TransitionModel};
use crate::kernels::KernelHyperparams;
use crate::linalg::Mat;
use crate::scalar::Real;
use crate::sgp::InducingSet;

/// Transition map together with the observation model and initial belief.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSpaceModel<T> {
    pub transition: TransitionModel<T>,
    pub observation: ObservationModel<T>,
    pub init: LatentInit<T>,
}

impl<T: Real> StateSpaceModel<T> {
    pub fn validate(&self) -> Result<()> {
        self.transition.validate()?;
        self.observation.validate()?;
        self.init.validate()?;
        let d = self.transition.dim();
        if self.observation.dim_x() != d || self.init.mean.len() != d {
            return Err(Error::shape(format!(
                "transition dimension {d}, observation latent dimension {}, initial belief dimension {}",
                self.observation.dim_x(),
                self.init.mean.len()
            )));
        }
        Ok(())
    }

    pub fn to_f64(&self) -> StateSpaceModel<f64> {
        StateSpaceModel {
            transition: self.transition.to_f64(),
            observation: self.observation.cast(|v| v.value()),
            init: self.init.cast(|v| v.value()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Identity,
    /// Constrained value is `exp(u)`.
    Log,
}

/// One named slice of the flat vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub transform: Transform,
}

/// Every learnable field name, in packing order.
pub const FIELDS: [&str; 14] = [
    "kernel.signal_variance",
    "kernel.lengthscales",
    "kernel.weight_variances",
    "inducing.locations",
    "inducing.values",
    "inducing.noise_std",
    "fixed_points.locations",
    "fixed_points.noise_std",
    "fixed_points.jacobians",
    "process.noise_std",
    "obs.loading",
    "obs.noise_std",
    "init.mean",
    "init.var",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
enum KernelKind {
    Eq,
    Linear,
}

/// Shapes needed to rebuild a model from a flat vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    kernel: KernelKind,
    dim_x: usize,
    dim_y: usize,
    n_inducing: usize,
    n_fixed: usize,
    jacobian_noise: JacobianNoise,
}

/// Unconstrained values plus the manifest that names every slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    pub manifest: Vec<ManifestEntry>,
    layout: Layout,
}

fn transform_of(name: &str) -> Transform {
    match name {
        "kernel.signal_variance" | "kernel.lengthscales" | "kernel.weight_variances" | "inducing.noise_std"
        | "fixed_points.noise_std" | "process.noise_std" | "obs.noise_std" | "init.var" => Transform::Log,
        _ => Transform::Identity,
    }
}

impl ParameterVector {
    pub fn pack(model: &StateSpaceModel<f64>) -> Result<Self> {
        model.validate()?;
        let t = &model.transition;
        let kernel = match t.kernel {
            KernelHyperparams::ExponentiatedQuadratic { .. } => KernelKind::Eq,
            KernelHyperparams::Linear { .. } => KernelKind::Linear,
        };
        let layout = Layout {
            kernel,
            dim_x: t.dim(),
            dim_y: model.observation.dim_y(),
            n_inducing: t.inducing.len(),
            n_fixed: t.fixed_points.len(),
            jacobian_noise: t.jacobian_noise,
        };
        let mut values = Vec::new();
        let mut manifest = Vec::new();
        let mut push = |name: &str, raw: &[f64]| {
            if raw.is_empty() {
                return;
            }
            let transform = transform_of(name);
            manifest.push(ManifestEntry { name: name.to_string(), offset: values.len(), len: raw.len(), transform });
            values.extend(raw.iter().map(|&v| match transform {
                Transform::Identity => v,
                Transform::Log => v.max(1e-300).ln(),
            }));
        };
        match &t.kernel {
            KernelHyperparams::ExponentiatedQuadratic { signal_variance, lengthscales } => {
                push("kernel.signal_variance", &[*signal_variance]);
                push("kernel.lengthscales", lengthscales);
            }
            KernelHyperparams::Linear { weight_variances } => push("kernel.weight_variances", weight_variances),
        }
        push("inducing.locations", t.inducing.locations.as_slice());
        push("inducing.values", t.inducing.values.as_slice());
        push("inducing.noise_std", &t.inducing.noise_std);
        push("fixed_points.locations", t.fixed_points.locations.as_slice());
        push("fixed_points.noise_std", &t.fixed_points.noise_std);
        let jac: Vec<f64> = t.fixed_points.jacobians.iter().flat_map(|j| j.as_slice().iter().copied()).collect();
        push("fixed_points.jacobians", &jac);
        push("process.noise_std", &t.process_noise_std);
        push("obs.loading", model.observation.loading.as_slice());
        push("obs.noise_std", &model.observation.noise_std);
        push("init.mean", &model.init.mean);
        push("init.var", &model.init.var);
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("model has non-finite parameters".into()));
        }
        Ok(ParameterVector { values, manifest, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Copy with different values and the same manifest.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        ParameterVector { values, manifest: self.manifest.clone(), layout: self.layout.clone() }
    }

    /// Manifest entry covering flat index `i`.
    pub fn field_of(&self, i: usize) -> &str {
        self.manifest
            .iter()
            .find(|e| i >= e.offset && i < e.offset + e.len)
            .map(|e| e.name.as_str())
            .unwrap_or("unknown")
    }

    /// Per-coordinate learnability given a freeze list. Entries are field
    /// names, a section prefix such as `kernel`, or `all`.
    pub fn active_mask(&self, freeze: &[String]) -> Result<Vec<bool>> {
        for f in freeze {
            let known = f == "all" || FIELDS.iter().any(|name| name == f || name.split('.').next() == Some(f.as_str()));
            if !known {
                return Err(Error::InvalidParameter(format!("unknown field in freeze list: {f}")));
            }
        }
        let frozen = |name: &str| {
            freeze.iter().any(|f| f == "all" || f == name || name.split('.').next() == Some(f.as_str()))
        };
        let mut mask = vec![true; self.len()];
        for e in &self.manifest {
            if frozen(&e.name) {
                mask[e.offset..e.offset + e.len].iter_mut().for_each(|m| *m = false);
            }
        }
        Ok(mask)
    }

    /// Rebuilds a model from `values` (same layout as `self`).
    pub fn unpack<T: Real>(&self, values: &[T]) -> StateSpaceModel<T> {
        assert_eq!(values.len(), self.values.len(), "parameter vector length mismatch");
        let mut slices = std::collections::HashMap::new();
        for e in &self.manifest {
            let raw: Vec<T> = values[e.offset..e.offset + e.len]
                .iter()
                .map(|&u| match e.transform {
                    Transform::Identity => u,
                    Transform::Log => u.exp(),
                })
                .collect();
            slices.insert(e.name.as_str(), raw);
        }
        let mut take = |name: &str| slices.remove(name).unwrap_or_default();
        let l = &self.layout;
        let (d, m, p) = (l.dim_x, l.n_inducing, l.n_fixed);
        let kernel = match l.kernel {
            KernelKind::Eq => KernelHyperparams::ExponentiatedQuadratic {
                signal_variance: take("kernel.signal_variance")[0],
                lengthscales: take("kernel.lengthscales"),
            },
            KernelKind::Linear => KernelHyperparams::Linear { weight_variances: take("kernel.weight_variances") },
        };
        let mat = |v: Vec<T>, r: usize, c: usize| if r * c == 0 { Mat::zeros(r, c) } else { Mat::from_row_slice(r, c, &v) };
        let inducing = InducingSet {
            locations: mat(take("inducing.locations"), m, d),
            values: mat(take("inducing.values"), m, d),
            noise_std: take("inducing.noise_std"),
        };
        let jac = take("fixed_points.jacobians");
        let fixed_points = FixedPointSet {
            locations: mat(take("fixed_points.locations"), p, d),
            noise_std: take("fixed_points.noise_std"),
            jacobians: (0..p).map(|i| Mat::from_row_slice(d, d, &jac[i * d * d..(i + 1) * d * d])).collect(),
        };
        StateSpaceModel {
            transition: TransitionModel {
                kernel,
                inducing,
                fixed_points,
                process_noise_std: take("process.noise_std"),
                jacobian_noise: l.jacobian_noise,
            },
            observation: ObservationModel { loading: mat(take("obs.loading"), l.dim_y, d), noise_std: take("obs.noise_std") },
            init: LatentInit { mean: take("init.mean"), var: take("init.var") },
        }
    }

    pub fn model(&self) -> StateSpaceModel<f64> {
        self.unpack(&self.values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn example(p: usize) -> StateSpaceModel<f64> {
        let d = 2;
        let t = TransitionModel::new(
            KernelHyperparams::exponentiated_quadratic(1.3, &[0.5, 0.8]),
            InducingSet::new(
                Mat::from_row_slice(3, 2, &[0.0, 0.1, 0.5, -0.4, -0.7, 0.3]),
                Mat::from_row_slice(3, 2, &[0.2, 0.1, -0.3, 0.6, 0.5, -0.2]),
                vec![0.05, 0.1, 0.2],
            )
            .unwrap(),
            FixedPointSet::new(
                Mat::from_fn(p, d, |i, j| 0.1 * (i + j) as f64),
                vec![0.3; p],
                (0..p).map(|i| Mat::from_row_slice(2, 2, &[0.5, 0.1 * i as f64, 0.0, 0.4])).collect(),
            )
            .unwrap(),
        )
        .unwrap();
        StateSpaceModel {
            transition: t,
            observation: ObservationModel::identity(3, 2, 0.1),
            init: LatentInit::new(vec![0.0, 0.2], vec![0.1, 0.3]).unwrap(),
        }
    }

    #[test]
    fn manifest_covers_every_field_once() {
        let pv = ParameterVector::pack(&example(2)).unwrap();
        let mut covered = vec![0; pv.len()];
        for e in &pv.manifest {
            for c in &mut covered[e.offset..e.offset + e.len] {
                *c += 1;
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
        let names: Vec<&str> = pv.manifest.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names.len(), 12);
        assert!(!names.contains(&"kernel.weight_variances"));
    }

    #[test]
    fn unpack_inverts_pack() {
        for p in [0, 1, 3] {
            let m = example(p);
            let pv = ParameterVector::pack(&m).unwrap();
            let back = pv.model();
            let again = ParameterVector::pack(&back).unwrap();
            for (a, b) in pv.values.iter().zip(&again.values) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(back.transition.fixed_points.len(), p);
        }
    }

    #[test]
    fn freeze_mask() {
        let pv = ParameterVector::pack(&example(1)).unwrap();
        let mask = pv.active_mask(&["obs.loading".into(), "kernel".into()]).unwrap();
        for e in &pv.manifest {
            let expect = !(e.name == "obs.loading" || e.name.starts_with("kernel."));
            assert!(mask[e.offset..e.offset + e.len].iter().all(|&m| m == expect), "{}", e.name);
        }
        assert!(pv.active_mask(&["all".into()]).unwrap().iter().all(|&m| !m));
        assert!(pv.active_mask(&["nonsense".into()]).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_random_vectors(shift in prop::collection::vec(-2.0f64..2.0, 1..200)) {
            let pv = ParameterVector::pack(&example(2)).unwrap();
            let values: Vec<f64> = pv.values.iter().enumerate().map(|(i, v)| v + shift[i % shift.len()]).collect();
            let moved = pv.with_values(values.clone());
            let m = moved.model();
            prop_assert!(m.validate().is_ok());
            let again = ParameterVector::pack(&m).unwrap();
            for (a, b) in values.iter().zip(&again.values) {
                prop_assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
            }
        }
    }
}
