//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::GradMap;
use super::params::ParamSet;
use super::AutodiffError;

/// One probed coordinate and the two derivative estimates at it.
#[derive(Clone, Debug)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct FdReport {
    pub probes: Vec<Probe>,
    pub max_rel_err: f64,
}

/// Relative error with the floor used across the test suite.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Coordinates whose analytic and numeric derivatives are both below this are
/// re-drawn: at `h = 1e-5` the central difference of a ~O(10) loss is
/// dominated by f64 roundoff there, so the comparison carries no signal.
const FLAT_TOLERANCE: f64 = 1e-4;

/// Compare `analytic` against central finite differences of `loss_fn` at
/// `n_probes` randomly drawn scalar coordinates. `loss_fn` must be
/// deterministic (freeze any noise sources before calling).
///
/// Near-flat coordinates are re-drawn (bounded retries); kinked activations
/// are expected to be avoided by the caller's choice of inputs.
pub fn finite_diff_check<F>(
    mut loss_fn: F,
    params: &ParamSet,
    analytic: &GradMap,
    n_probes: usize,
    h: f64,
    seed: u64,
) -> Result<FdReport, AutodiffError>
where
    F: FnMut(&ParamSet) -> Result<f64, AutodiffError>,
{
    let names: Vec<String> = params.names().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| -> (String, usize) {
        let name = names[rng.gen_range(0..names.len())].clone();
        let len = params.tensor(&name).expect("name from set").len();
        let index = rng.gen_range(0..len);
        (name, index)
    };
    let mut probes = Vec::with_capacity(n_probes);
    let mut attempts = 0;
    while probes.len() < n_probes && attempts < n_probes * 8 {
        attempts += 1;
        let (name, index) = draw(&mut rng);
        let a = analytic.get(&name).map(|t| t.data()[index]).unwrap_or(0.0);
        if a.abs() < FLAT_TOLERANCE {
            continue;
        }
        probes.push(probe_at(&mut loss_fn, params, analytic, &name, index, h)?);
    }
    // If re-draws could not find enough live coordinates, fill with whatever
    // comes next so the report always holds n_probes entries.
    while probes.len() < n_probes {
        let (name, index) = draw(&mut rng);
        probes.push(probe_at(&mut loss_fn, params, analytic, &name, index, h)?);
    }
    let max_rel_err = probes.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    Ok(FdReport {
        probes,
        max_rel_err,
    })
}

/// Probe an explicit list of coordinates instead of random draws.
pub fn finite_diff_probes<F>(
    mut loss_fn: F,
    params: &ParamSet,
    analytic: &GradMap,
    coords: &[(String, usize)],
    h: f64,
) -> Result<FdReport, AutodiffError>
where
    F: FnMut(&ParamSet) -> Result<f64, AutodiffError>,
{
    let mut probes = Vec::with_capacity(coords.len());
    for (name, index) in coords {
        probes.push(probe_at(&mut loss_fn, params, analytic, name, *index, h)?);
    }
    let max_rel_err = probes.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    Ok(FdReport {
        probes,
        max_rel_err,
    })
}

fn probe_at<F>(
    loss_fn: &mut F,
    params: &ParamSet,
    analytic: &GradMap,
    name: &str,
    index: usize,
    h: f64,
) -> Result<Probe, AutodiffError>
where
    F: FnMut(&ParamSet) -> Result<f64, AutodiffError>,
{
    let mut plus = params.clone();
    plus.tensor_mut(name)?.data_mut()[index] += h;
    let mut minus = params.clone();
    minus.tensor_mut(name)?.data_mut()[index] -= h;
    let numeric = (loss_fn(&plus)? - loss_fn(&minus)?) / (2.0 * h);
    let a = analytic.get(name).map(|t| t.data()[index]).unwrap_or(0.0);
    let err = if a.abs().max(numeric.abs()) < FLAT_TOLERANCE {
        // both flat: roundoff-dominated, no signal either way
        0.0
    } else {
        rel_err(a, numeric)
    };
    Ok(Probe {
        name: name.to_string(),
        index,
        analytic: a,
        numeric,
        rel_err: err,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::graph::Graph;
    use crate::autodiff::params::Side;
    use crate::autodiff::tensor::Tensor;

    fn quadratic_loss(p: &ParamSet) -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let b = g.bind(p)?;
        let w = b.node("w")?;
        let sq = g.square(w);
        let loss = g.reduce_sum(sq)?;
        Ok(g.value(loss).scalar_value())
    }

    fn quadratic_grads(p: &ParamSet) -> GradMap {
        let mut g = Graph::new();
        let b = g.bind(p).unwrap();
        let w = b.node("w").unwrap();
        let sq = g.square(w);
        let loss = g.reduce_sum(sq).unwrap();
        g.backward(loss).unwrap()
    }

    fn params() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(
            "w",
            Tensor::from_vec(&[4], vec![0.8, -1.2, 2.0, 0.4]).unwrap(),
            Side::Encoder,
        )
        .unwrap();
        p
    }

    #[test]
    fn quadratic_is_exact_up_to_roundoff() {
        let p = params();
        let analytic = quadratic_grads(&p);
        let report =
            finite_diff_check(quadratic_loss, &p, &analytic, 8, 1e-5, 42).unwrap();
        assert!(report.max_rel_err < 1e-9, "err {}", report.max_rel_err);
        assert_eq!(report.probes.len(), 8);
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let p = params();
        let mut analytic = quadratic_grads(&p);
        let doubled = analytic.get("w").unwrap().map(|v| 2.0 * v);
        analytic.insert("w".into(), doubled);
        let report =
            finite_diff_check(quadratic_loss, &p, &analytic, 8, 1e-5, 42).unwrap();
        assert!(report.max_rel_err > 0.4, "err {}", report.max_rel_err);
    }

    #[test]
    fn explicit_probe_list() {
        let p = params();
        let analytic = quadratic_grads(&p);
        let coords = vec![("w".to_string(), 0), ("w".to_string(), 3)];
        let report = finite_diff_probes(quadratic_loss, &p, &analytic, &coords, 1e-5).unwrap();
        assert_eq!(report.probes.len(), 2);
        assert!(report.max_rel_err < 1e-9);
    }
}
