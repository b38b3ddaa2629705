use nalgebra::DMatrix;

use crate::error::{input_err, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityReport {
    /// Upper-triangle cosines `(i, j), i < j`, row-major pair order.
    pub true_similarities: Vec<f64>,
    pub predicted_similarities: Vec<f64>,
    /// `1 - sum (s_hat - s)^2 / sum (s - mean s)^2`, residuals measured to the
    /// identity line.
    pub r_squared: f64,
}

fn cosines(m: &DMatrix<f64>, what: &str) -> Result<Vec<f64>> {
    let rows: Vec<_> = m.row_iter().map(|r| r.into_owned()).collect();
    let norms: Vec<f64> = rows.iter().map(|r| r.norm()).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(input_err!("{what} vector {i} has zero norm"));
    }
    let n = rows.len();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let c = rows[i].dot(&rows[j]) / (norms[i] * norms[j]);
            out.push(c.clamp(-1.0, 1.0));
        }
    }
    Ok(out)
}

pub fn similarity_analysis(true_beliefs: &DMatrix<f64>, predicted: &DMatrix<f64>) -> Result<SimilarityReport> {
    if true_beliefs.nrows() != predicted.nrows() {
        return Err(input_err!(
            "{} true vectors but {} predicted vectors",
            true_beliefs.nrows(),
            predicted.nrows()
        ));
    }
    let s = cosines(true_beliefs, "true")?;
    let shat = cosines(predicted, "predicted")?;
    let mean = s.iter().sum::<f64>() / s.len().max(1) as f64;
    let ss_tot: f64 = s.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = s.iter().zip(&shat).map(|(a, b)| (b - a).powi(2)).sum();
    let r_squared = if ss_tot > 0.0 {
        1.0 - ss_res / ss_tot
    } else if ss_res == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    };
    Ok(SimilarityReport { true_similarities: s, predicted_similarities: shat, r_squared })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn simplex_points(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(n, 3, |_, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn identical_and_scaled_give_one() {
        let t = simplex_points(30, 1);
        assert_eq!(similarity_analysis(&t, &t).unwrap().r_squared, 1.0);
        let rep = similarity_analysis(&t, &(&t * 2.0)).unwrap();
        assert!((rep.r_squared - 1.0).abs() < 1e-12);
        assert_eq!(rep.true_similarities.len(), 30 * 29 / 2);
        assert!(rep.predicted_similarities.iter().all(|c| (-1.0..=1.0).contains(c)));
    }

    #[test]
    fn random_predictions_score_low() {
        let t = simplex_points(60, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = DMatrix::from_fn(60, 3, |_, _| rng.random_range(-1.0..1.0));
        assert!(similarity_analysis(&t, &p).unwrap().r_squared < 0.1);
    }

    #[test]
    fn zero_vector_rejected() {
        let mut t = simplex_points(4, 4);
        t.row_mut(2).fill(0.0);
        assert!(similarity_analysis(&t, &simplex_points(4, 5)).is_err());
    }
}
