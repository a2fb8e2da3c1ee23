use serde::{Deserialize, Serialize};

use super::config::LossOptions;
use crate::corruption::CorruptedBatchItem;
use crate::error::{invalid, Error, Result};
use crate::linalg::{log_softmax, softmax, Matrix, Real};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ar: f64,
    pub l_nar: f64,
    pub l_unified: f64,
    pub n_ar: usize,
    pub n_nar: usize,
}

impl LossBreakdown {
    pub fn new(l_ar: f64, l_nar: f64, n_ar: usize, n_nar: usize) -> Self {
        LossBreakdown {
            l_ar,
            l_nar,
            l_unified: l_ar + l_nar,
            n_ar,
            n_nar,
        }
    }

    pub fn add(&mut self, other: &LossBreakdown) {
        *self = LossBreakdown::new(
            self.l_ar + other.l_ar,
            self.l_nar + other.l_nar,
            self.n_ar + other.n_ar,
            self.n_nar + other.n_nar,
        );
    }
}

fn check_shape<T: Real>(logits: &Matrix<T>, item: &CorruptedBatchItem) -> Result<()> {
    if logits.rows != item.len() {
        return Err(invalid!(
            "logits have {} rows for an item of length {}",
            logits.rows,
            item.len()
        ));
    }
    Ok(())
}

fn target<T: Real>(logits: &Matrix<T>, item: &CorruptedBatchItem, pos: usize) -> Result<usize> {
    let t = item.clean_tokens[pos] as usize;
    if t >= logits.cols {
        return Err(invalid!("target id {t} at position {pos} outside vocabulary"));
    }
    Ok(t)
}

/// Next-token cross-entropy summed over `ar_positions`: position `k` is
/// scored by the logits at `k - 1`.
pub fn ar_loss<T: Real>(logits: &Matrix<T>, item: &CorruptedBatchItem) -> Result<f64> {
    check_shape(logits, item)?;
    let mut total = 0.0;
    for &k in &item.ar_positions {
        if k == 0 {
            return Err(invalid!("AR position 0 has no preceding logits"));
        }
        let t = target(logits, item, k)?;
        total -= log_softmax(logits.row(k - 1))[t].as_f64();
    }
    Ok(total)
}

fn check_masked(item: &CorruptedBatchItem, j: usize) -> Result<()> {
    if item.tokens[j] != item.mask_id {
        return Err(Error::Contract(format!(
            "NAR position {j} is not masked in the input"
        )));
    }
    Ok(())
}

/// Same-position cross-entropy over masked audio positions, weighted by
/// `1 / lambda`.
pub fn dce_loss<T: Real>(logits: &Matrix<T>, item: &CorruptedBatchItem) -> Result<f64> {
    check_shape(logits, item)?;
    if item.nar_positions.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &j in &item.nar_positions {
        check_masked(item, j)?;
        let t = target(logits, item, j)?;
        total -= log_softmax(logits.row(j))[t].as_f64();
    }
    Ok(total / item.lambda)
}

pub fn unified_loss<T: Real>(logits: &Matrix<T>, item: &CorruptedBatchItem) -> Result<LossBreakdown> {
    unified_loss_with(logits, item, &LossOptions::default())
}

/// As [`unified_loss`], honouring the fault-injection switch.
pub fn unified_loss_with<T: Real>(
    logits: &Matrix<T>,
    item: &CorruptedBatchItem,
    opts: &LossOptions,
) -> Result<LossBreakdown> {
    let l_ar = ar_loss(logits, item)?;
    let mut l_nar = dce_loss(logits, item)?;
    if opts.flip_dce_sign {
        l_nar = -l_nar;
    }
    Ok(LossBreakdown::new(
        l_ar,
        l_nar,
        item.ar_positions.len(),
        item.nar_positions.len(),
    ))
}

/// Scale applied to the weighted objective of one item.
pub fn objective_scale(opts: &LossOptions, supervised: usize) -> f64 {
    if opts.normalize && supervised > 0 {
        1.0 / supervised as f64
    } else {
        1.0
    }
}

/// Loss breakdown, the scalar objective
/// `scale * (w_ar * l_ar + w_nar * l_nar)` and its gradient with respect to
/// the logits.
pub fn loss_gradient<T: Real>(
    logits: &Matrix<T>,
    item: &CorruptedBatchItem,
    opts: &LossOptions,
) -> Result<(LossBreakdown, f64, Matrix<T>)> {
    let breakdown = unified_loss_with(logits, item, opts)?;
    let scale = objective_scale(opts, breakdown.n_ar + breakdown.n_nar);
    let objective = scale * (opts.ar_weight * breakdown.l_ar + opts.nar_weight * breakdown.l_nar);
    let mut grad = Matrix::zeros(logits.rows, logits.cols);

    let mut add_ce = |row: usize, t: usize, w: f64| {
        let p = softmax(logits.row(row));
        let w = T::lit(w);
        let g = grad.row_mut(row);
        for (gv, pv) in g.iter_mut().zip(&p) {
            *gv += w * *pv;
        }
        g[t] -= w;
    };
    let w_ar = scale * opts.ar_weight;
    for &k in &item.ar_positions {
        add_ce(k - 1, item.clean_tokens[k] as usize, w_ar);
    }
    let sign = if opts.flip_dce_sign { -1.0 } else { 1.0 };
    let w_nar = sign * scale * opts.nar_weight / item.lambda;
    for &j in &item.nar_positions {
        add_ce(j, item.clean_tokens[j] as usize, w_nar);
    }
    Ok((breakdown, objective, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocabulary, generate_record, Direction, InterleavedSequence, Span, TaskSpec};
    use crate::corruption::{corrupt_with_lambda, CorruptedBatchItem};
    use crate::rng::substream;

    fn item_with(n_audio: usize, lambda: f64) -> CorruptedBatchItem {
        let v = build_vocabulary(32, 64).unwrap();
        let mut audio: Vec<u32> = (0..n_audio as u32 - 1).map(|o| v.audio_id(o)).collect();
        audio.push(v.eoa);
        let seq = InterleavedSequence {
            prompt: vec![],
            spans: vec![Span::text(vec![v.soa]), Span::audio(audio)],
            direction: Direction::Tts,
        };
        corrupt_with_lambda(&seq, &v, lambda, &mut substream(0, 0))
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let v = build_vocabulary(32, 64).unwrap();
        let seq = generate_record(&TaskSpec::default(), &v, 0, 0).unwrap();
        let item = CorruptedBatchItem::clean(&seq, &v);
        let logits = Matrix::<f64>::zeros(item.len(), 101);
        let l = ar_loss(&logits, &item).unwrap();
        let per = l / item.ar_positions.len() as f64;
        assert!((per - 101f64.ln()).abs() < 1e-12);
        assert!((101f64.ln() - 4.6151).abs() < 1e-4);
    }

    #[test]
    fn dce_closed_form_all_masked() {
        let item = item_with(8, 1.0);
        assert_eq!(item.nar_positions.len(), 8);
        let logits = Matrix::<f64>::zeros(item.len(), 101);
        let l = dce_loss(&logits, &item).unwrap();
        assert!((l - 8.0 * 101f64.ln()).abs() < 1e-10);
        assert!((l - 36.92).abs() < 0.01);
    }

    #[test]
    fn sum_and_weight_conventions() {
        // two positions with CE 1.0 and 3.0 on a two-symbol alphabet
        let ce_logits = |ce: f64| -> [f64; 2] {
            // -log softmax([a, 0])[0] = ce  =>  a = -ln(e^ce - 1)
            [-(ce.exp() - 1.0).ln(), 0.0]
        };
        let mut item = item_with(2, 0.5);
        item.clean_tokens = vec![0, 0, 0];
        item.tokens = vec![0, item.mask_id, item.mask_id];
        item.nar_positions = vec![1, 2];
        item.ar_positions = vec![1, 2];
        let mut data = vec![0.0; 3 * 2];
        data[0..2].copy_from_slice(&ce_logits(1.0));
        data[2..4].copy_from_slice(&ce_logits(3.0));
        data[4..6].copy_from_slice(&ce_logits(1.0));
        let logits = Matrix::from_vec(3, 2, data);
        assert!((ar_loss(&logits, &item).unwrap() - 4.0).abs() < 1e-12);
        // masked rows 1, 2 have CE 3 and 1; lambda 0.5 doubles the sum
        assert!((dce_loss(&logits, &item).unwrap() - 8.0).abs() < 1e-12);
        item.nar_positions.clear();
        assert_eq!(dce_loss(&logits, &item).unwrap(), 0.0);
    }

    #[test]
    fn dce_two_tokens_half_lambda() {
        let mut item = item_with(2, 0.5);
        item.nar_positions = vec![1, 2];
        item.tokens[1] = item.mask_id;
        item.tokens[2] = item.mask_id;
        let ce1 = |t: usize| {
            let mut row = vec![0.0; 101];
            row[t] = 100f64.ln() - (std::f64::consts::E - 1.0).ln();
            row
        };
        let mut data = vec![0.0; 3 * 101];
        data[101..202].copy_from_slice(&ce1(item.clean_tokens[1] as usize));
        data[202..303].copy_from_slice(&ce1(item.clean_tokens[2] as usize));
        let logits = Matrix::from_vec(3, 101, data);
        assert!((dce_loss(&logits, &item).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_near_zero() {
        let item = item_with(4, 1.0);
        let mut logits = Matrix::<f64>::zeros(item.len(), 101);
        for j in 0..item.len() {
            let t = item.clean_tokens[j] as usize;
            logits.row_mut(j)[t] = 60.0;
        }
        let b = unified_loss(&logits, &item).unwrap();
        assert!(b.l_nar < 1e-20);
    }

    #[test]
    fn unmasked_nar_position_is_contract_violation() {
        let mut item = item_with(4, 1.0);
        item.tokens[2] = item.clean_tokens[2];
        let logits = Matrix::<f64>::zeros(item.len(), 101);
        assert!(matches!(dce_loss(&logits, &item), Err(Error::Contract(_))));
    }

    #[test]
    fn out_of_range_target() {
        let item = item_with(4, 1.0);
        let logits = Matrix::<f64>::zeros(item.len(), 50);
        assert!(matches!(dce_loss(&logits, &item), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn additivity_and_flip() {
        let item = item_with(6, 0.3);
        let logits = Matrix::from_vec(
            item.len(),
            101,
            (0..item.len() * 101).map(|i| ((i * 7919) % 13) as f64 * 0.1).collect(),
        );
        let b = unified_loss(&logits, &item).unwrap();
        assert_eq!(b.l_unified, b.l_ar + b.l_nar);
        let opts = LossOptions {
            flip_dce_sign: true,
            ..LossOptions::default()
        };
        let f = unified_loss_with(&logits, &item, &opts).unwrap();
        assert_eq!(f.l_nar, -b.l_nar);
        let (_, obj, _) = loss_gradient(&logits, &item, &LossOptions::default()).unwrap();
        assert_eq!(obj, b.l_unified);
    }
}
