use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::config::LossOptions;
use super::loss::loss_gradient;
use super::transformer::Transformer;
use crate::attention::build_modality_mask;
use crate::corruption::CorruptedBatchItem;
use crate::error::{Error, Result};
use crate::rng::substream;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are compared in absolute terms.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub worst_name: String,
    pub analytic: f64,
    pub numeric: f64,
    pub n_coordinates: usize,
    pub epsilon: f64,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(GRAD_CHECK_FLOOR)
}

/// Objective value and full analytic gradient for one item.
pub fn objective_and_gradient(
    model: &Transformer<f64>,
    item: &CorruptedBatchItem,
    opts: &LossOptions,
) -> Result<(f64, Vec<f64>)> {
    let mask = build_modality_mask(item.layout());
    let (logits, cache) = model.forward_train(&item.tokens, &mask)?;
    let (_, obj, dlogits) = loss_gradient(&logits, item, opts)?;
    let mut grads = vec![0.0; model.params().len()];
    model.backward(&cache, &dlogits, &mut grads);
    Ok((obj, grads))
}

fn objective(model: &Transformer<f64>, item: &CorruptedBatchItem, opts: &LossOptions) -> Result<f64> {
    let mask = build_modality_mask(item.layout());
    let logits = model.forward(&item.tokens, &mask)?;
    let (_, obj, _) = loss_gradient(&logits, item, opts)?;
    Ok(obj)
}

/// Central-difference check of the analytic gradient on the given
/// coordinates.
pub fn grad_check_coords(
    model: &Transformer<f64>,
    item: &CorruptedBatchItem,
    opts: &LossOptions,
    epsilon: f64,
    coords: &[usize],
) -> Result<GradCheckReport> {
    let (_, grads) = objective_and_gradient(model, item, opts)?;
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_coordinate: 0,
        worst_name: String::new(),
        analytic: 0.0,
        numeric: 0.0,
        n_coordinates: coords.len(),
        epsilon,
    };
    for &c in coords {
        let orig = probe.params()[c];
        probe.params_mut()[c] = orig + epsilon;
        let up = objective(&probe, item, opts)?;
        probe.params_mut()[c] = orig - epsilon;
        let down = objective(&probe, item, opts)?;
        probe.params_mut()[c] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let analytic = grads[c];
        if !numeric.is_finite() || !analytic.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient at coordinate {c}: analytic {analytic}, numeric {numeric}"
            )));
        }
        let rel = relative_error(analytic, numeric);
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coordinate = c;
            report.analytic = analytic;
            report.numeric = numeric;
        }
    }
    report.worst_name = model
        .layout()
        .entries()
        .iter()
        .find(|e| e.range().contains(&report.worst_coordinate))
        .map(|e| e.name.clone())
        .unwrap_or_default();
    Ok(report)
}

/// Checks `n_coords` coordinates drawn without replacement with `seed`.
pub fn grad_check(
    model: &Transformer<f64>,
    item: &CorruptedBatchItem,
    opts: &LossOptions,
    epsilon: f64,
    n_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let total = model.params().len();
    let mut rng = substream(seed, 0x6772_6164);
    let mut coords = sample(&mut rng, total, n_coords.min(total)).into_vec();
    coords.sort_unstable();
    grad_check_coords(model, item, opts, epsilon, &coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, generate_record, TaskSpec};
    use crate::corruption::corrupt_with_lambda;
    use crate::model::ModelConfig;

    fn setup() -> (Transformer<f64>, CorruptedBatchItem) {
        let v = build_vocabulary(8, 16).unwrap();
        let spec = TaskSpec {
            expansion_rate: 2,
            text_chunk: 2,
            min_text_len: 3,
            max_text_len: 3,
            ..TaskSpec::default()
        };
        let seq = generate_record(&spec, &v, 1, 0).unwrap();
        let item = corrupt_with_lambda(&seq, &v, 0.5, &mut substream(2, 0));
        assert!(!item.nar_positions.is_empty() && !item.ar_positions.is_empty());
        let model = Transformer::new(ModelConfig::tiny(v.size(), 24), 7).unwrap();
        (model, item)
    }

    #[test]
    fn analytic_matches_finite_differences() {
        let (model, item) = setup();
        let r = grad_check(&model, &item, &LossOptions::default(), 1e-5, 200, 3).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn unused_position_rows_have_zero_gradient() {
        let (model, item) = setup();
        let e = model.layout().entry("pos_emb").unwrap();
        let d = model.config().d_model;
        let frozen: Vec<usize> = (e.offset + item.len() * d..e.offset + item.len() * d + 5).collect();
        let (_, g) = objective_and_gradient(&model, &item, &LossOptions::default()).unwrap();
        for &c in &frozen {
            assert_eq!(g[c], 0.0);
        }
        let r = grad_check_coords(&model, &item, &LossOptions::default(), 1e-5, &frozen).unwrap();
        assert_eq!(r.numeric, 0.0);
    }
}
