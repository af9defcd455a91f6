use std::fmt;

use crate::error::{Error, Result};

/// MAE, Pearson correlation and the population standard deviation of the
/// absolute errors. `pc` is `None` when either side is constant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    pub pc: Option<f64>,
    pub ae_sd: f64,
}

impl Metrics {
    /// Pearson correlation as a CSV field; `NA` when undefined.
    pub fn pc_field(&self) -> String {
        self.pc.map_or_else(|| "NA".to_string(), |v| v.to_string())
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pc = self.pc.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"));
        write!(f, "MAE {:.4}  PC {pc}  AE-SD {:.4}", self.mae, self.ae_sd)
    }
}

pub fn evaluate(preds: &[f64], targets: &[f64]) -> Result<Metrics> {
    if preds.len() != targets.len() || preds.is_empty() {
        return Err(Error::Contract(format!(
            "evaluate needs equal nonempty lengths, got {} predictions and {} targets",
            preds.len(),
            targets.len()
        )));
    }
    let n = preds.len() as f64;
    let abs: Vec<f64> = preds.iter().zip(targets).map(|(p, t)| (p - t).abs()).collect();
    let mae = abs.iter().sum::<f64>() / n;
    let ae_sd = (abs.iter().map(|e| (e - mae).powi(2)).sum::<f64>() / n).sqrt();

    let mp = preds.iter().sum::<f64>() / n;
    let mt = targets.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, t) in preds.iter().zip(targets) {
        let (dp, dt) = (p - mp, t - mt);
        sxy += dp * dt;
        sxx += dp * dp;
        syy += dt * dt;
    }
    let pc = (sxx > 0.0 && syy > 0.0).then(|| (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0));
    Ok(Metrics { mae, pc, ae_sd })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions() {
        let m = evaluate(&[1.0, 2.0, 5.0], &[1.0, 2.0, 5.0]).unwrap();
        assert_eq!(m.mae, 0.0);
        assert_eq!(m.ae_sd, 0.0);
        assert!((m.pc.unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn worked_example() {
        let m = evaluate(&[0.0, 4.0, 8.0], &[1.0, 4.0, 7.0]).unwrap();
        assert!((m.mae - 2.0 / 3.0).abs() < 1e-15);
        // Population std of [1, 0, 1].
        let expected = ((2.0 * (1.0f64 / 3.0).powi(2) + (2.0f64 / 3.0).powi(2)) / 3.0).sqrt();
        assert!((m.ae_sd - expected).abs() < 1e-15);
        let m = evaluate(&[2.0, 4.0, 6.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((m.pc.unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn constant_targets_leave_pc_undefined() {
        let m = evaluate(&[1.0, 2.0], &[3.0, 3.0]).unwrap();
        assert_eq!(m.pc, None);
        assert_eq!(m.pc_field(), "NA");
        assert!(evaluate(&[], &[]).is_err());
        assert!(evaluate(&[1.0], &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn permutation_invariant(pairs in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 2..30), rot in 0usize..30) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.iter().cloned().unzip();
            let k = rot % p.len();
            let (mut p2, mut t2) = (p.clone(), t.clone());
            p2.rotate_left(k);
            t2.rotate_left(k);
            let a = evaluate(&p, &t).unwrap();
            let b = evaluate(&p2, &t2).unwrap();
            prop_assert!((a.mae - b.mae).abs() < 1e-12);
            prop_assert!((a.ae_sd - b.ae_sd).abs() < 1e-12);
            match (a.pc, b.pc) {
                (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                (x, y) => prop_assert_eq!(x.is_none(), y.is_none()),
            }
            prop_assert!(a.mae >= 0.0 && a.ae_sd >= 0.0);
        }
    }
}
