//! Central-difference gradient verification. The numeric side evaluates the
//! loss twice per coordinate with a step scaled to the coordinate's
//! magnitude; the analytic side comes from whatever [`DiffFn`] the caller
//! provides, so the check is independent of the tape internals it validates.

use crate::param::NamedParamSet;
use crate::scalar::Scalar;
use crate::tape::{ParamVars, Tape, Var};
use crate::tensor::{Tensor, TensorError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Relative-error tolerance that holds for well-conditioned f32 graphs.
pub const TOL_F32: f64 = 1e-3;
/// Relative-error tolerance for f64 graphs.
pub const TOL_F64: f64 = 1e-5;

/// A scalar loss over named parameters, differentiable by some means.
pub trait DiffFn<T: Scalar> {
    fn loss(&self, params: &NamedParamSet<T>) -> Result<T, TensorError>;
    fn loss_and_grads(
        &self,
        params: &NamedParamSet<T>,
    ) -> Result<(T, BTreeMap<String, Tensor<T>>), TensorError>;
}

/// Adapts a tape-building closure to [`DiffFn`]. The closure receives a
/// fresh tape plus bound parameter leaves and returns the scalar loss node.
pub struct TapeFn<F>(pub F);

impl<T, F> DiffFn<T> for TapeFn<F>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &ParamVars) -> Result<Var, TensorError>,
{
    fn loss(&self, params: &NamedParamSet<T>) -> Result<T, TensorError> {
        let mut tape = Tape::new();
        let vars = tape.bind(params, false);
        let root = (self.0)(&mut tape, &vars)?;
        tape.scalar_value(root)
    }

    fn loss_and_grads(
        &self,
        params: &NamedParamSet<T>,
    ) -> Result<(T, BTreeMap<String, Tensor<T>>), TensorError> {
        let mut tape = Tape::new();
        let vars = tape.bind(params, true);
        let root = (self.0)(&mut tape, &vars)?;
        let loss = tape.scalar_value(root)?;
        let mut grads = tape.backward(root)?;
        let mut out = BTreeMap::new();
        for (name, var) in &vars {
            if let Some(g) = grads.take(*var) {
                out.insert(name.clone(), g);
            }
        }
        Ok((loss, out))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Base step; the per-coordinate step is `epsilon * max(1, |p|)`.
    pub epsilon: f64,
    pub tolerance: f64,
    /// Coordinate budget. Every trainable parameter gets at least one
    /// coordinate; the remainder is spread uniformly.
    pub total_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            epsilon: 1e-3,
            tolerance: TOL_F32,
            total_coords: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoordReport {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<CoordReport>,
    pub failures: Vec<CoordReport>,
}

impl GradCheckReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "checked {} coords, max rel err {:.3e}, {} failures",
            self.checked,
            self.max_rel_err,
            self.failures.len()
        )?;
        for c in self.failures.iter().take(8) {
            write!(
                f,
                "\n  {}[{}]: analytic {:.6e} vs numeric {:.6e} (rel {:.3e})",
                c.name, c.index, c.analytic, c.numeric, c.rel_err
            )?;
        }
        Ok(())
    }
}

/// Compares analytic gradients against central differences on a seeded
/// sample of coordinates. Parameters that receive no gradient are checked
/// too, against an analytic value of zero.
pub fn gradient_check<T: Scalar>(
    f: &dyn DiffFn<T>,
    params: &NamedParamSet<T>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, TensorError> {
    if !(cfg.epsilon.is_finite() && cfg.epsilon > 0.0) {
        return Err(TensorError::InvalidArgument(format!(
            "gradient_check: epsilon must be positive and finite, got {}",
            cfg.epsilon
        )));
    }
    let (loss0, grads) = f.loss_and_grads(params)?;
    if !loss0.is_finite() {
        return Err(TensorError::NonFinite {
            context: "gradient_check: base loss".into(),
            index: 0,
        });
    }

    let names: Vec<&str> = params
        .iter()
        .filter(|(_, e)| e.trainable && e.tensor.numel() > 0)
        .map(|(n, _)| n.as_str())
        .collect();
    if names.is_empty() {
        return Ok(GradCheckReport::default());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut coords: Vec<(String, usize)> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for name in &names {
        let n = params.tensor(name)?.numel();
        let idx = rng.gen_range(0..n);
        if seen.insert((name.to_string(), idx)) {
            coords.push((name.to_string(), idx));
        }
    }
    let total_elems: usize = names
        .iter()
        .map(|n| params.tensor(n).map(Tensor::numel).unwrap_or(0))
        .sum();
    let budget = cfg.total_coords.min(total_elems);
    let mut attempts = 0usize;
    while coords.len() < budget && attempts < budget * 64 {
        attempts += 1;
        let name = names[rng.gen_range(0..names.len())];
        let n = params.tensor(name)?.numel();
        let idx = rng.gen_range(0..n);
        if seen.insert((name.to_string(), idx)) {
            coords.push((name.to_string(), idx));
        }
    }

    let mut work = params.clone();
    let mut report = GradCheckReport::default();
    for (name, idx) in coords {
        let p0 = work.tensor(&name)?.data()[idx];
        let h = cfg.epsilon * p0.as_f64().abs().max(1.0);
        let hs = T::of_f64(h);

        work.tensor_mut(&name)?.data_mut()[idx] = p0 + hs;
        let lp = f.loss(&work)?;
        work.tensor_mut(&name)?.data_mut()[idx] = p0 - hs;
        let lm = f.loss(&work)?;
        work.tensor_mut(&name)?.data_mut()[idx] = p0;

        if !lp.is_finite() || !lm.is_finite() {
            return Err(TensorError::InvalidArgument(format!(
                "gradient_check: loss is non-finite when perturbing `{name}`[{idx}]"
            )));
        }
        let numeric = (lp.as_f64() - lm.as_f64()) / (2.0 * h);
        let analytic = grads
            .get(&name)
            .map_or(0.0, |g| g.data()[idx].as_f64());
        let rel_err = (analytic - numeric).abs() / numeric.abs().max(1.0);

        report.checked += 1;
        let coord = CoordReport {
            name,
            index: idx,
            analytic,
            numeric,
            rel_err,
        };
        if rel_err > report.max_rel_err {
            report.max_rel_err = rel_err;
            report.worst = Some(coord.clone());
        }
        if rel_err > cfg.tolerance {
            report.failures.push(coord);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic_params() -> NamedParamSet<f64> {
        let mut p = NamedParamSet::new();
        p.insert(
            "x",
            Tensor::from_vec(&[3], vec![0.7, -1.3, 2.1]).unwrap(),
            true,
        )
        .unwrap();
        p
    }

    #[test]
    fn rejects_nonpositive_epsilon() {
        let f = TapeFn(|tape: &mut Tape<f64>, vars: &ParamVars| {
            let x = vars["x"];
            let sq = tape.mul(x, x)?;
            Ok(tape.sum_all(sq))
        });
        let cfg = GradCheckConfig {
            epsilon: 0.0,
            ..GradCheckConfig::default()
        };
        assert!(gradient_check(&f, &quadratic_params(), &cfg).is_err());
    }

    #[test]
    fn quadratic_matches_to_machine_precision() {
        let f = TapeFn(|tape: &mut Tape<f64>, vars: &ParamVars| {
            let x = vars["x"];
            let sq = tape.mul(x, x)?;
            Ok(tape.sum_all(sq))
        });
        let cfg = GradCheckConfig {
            tolerance: 1e-6,
            ..GradCheckConfig::default()
        };
        let report = gradient_check(&f, &quadratic_params(), &cfg).unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.ok(), "{report}");
    }

    #[test]
    fn unused_parameter_checks_against_zero() {
        let mut p = quadratic_params();
        p.insert("unused", Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap(), true)
            .unwrap();
        let f = TapeFn(|tape: &mut Tape<f64>, vars: &ParamVars| {
            let x = vars["x"];
            let sq = tape.mul(x, x)?;
            Ok(tape.sum_all(sq))
        });
        let cfg = GradCheckConfig {
            tolerance: 1e-6,
            total_coords: 5,
            ..GradCheckConfig::default()
        };
        let report = gradient_check(&f, &p, &cfg).unwrap();
        assert!(report.ok(), "{report}");
        assert_eq!(report.checked, 5);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        struct Wrong;
        impl DiffFn<f64> for Wrong {
            fn loss(&self, params: &NamedParamSet<f64>) -> Result<f64, TensorError> {
                let x = params.tensor("x")?.data();
                Ok(x.iter().map(|v| v * v).sum())
            }
            fn loss_and_grads(
                &self,
                params: &NamedParamSet<f64>,
            ) -> Result<(f64, BTreeMap<String, Tensor<f64>>), TensorError> {
                let loss = self.loss(params)?;
                // Deliberately reports 3x instead of 2x.
                let g: Vec<f64> = params.tensor("x")?.data().iter().map(|v| 3.0 * v).collect();
                let mut grads = BTreeMap::new();
                grads.insert("x".to_string(), Tensor::from_vec(&[3], g)?);
                Ok((loss, grads))
            }
        }
        let report = gradient_check(&Wrong, &quadratic_params(), &GradCheckConfig::default()).unwrap();
        assert!(!report.ok());
    }
}
