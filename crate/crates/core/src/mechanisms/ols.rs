use nalgebra::{DMatrix, DVector, SymmetricEigen};

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct GramSolution {
    /// Intercept then slopes, in unit-scaled coordinates.
    pub coefficients: Vec<f64>,
    /// Negative eigenvalues of the augmented matrix were clipped.
    pub clipping_activated: bool,
    /// The design block had eigenvalues below the floor; pseudo-inverse used.
    pub rank_deficient: bool,
}

/// Solves the normal equations from an augmented Gram matrix of `[1, x.., y]`.
///
/// The matrix is first projected onto the positive semi-definite cone by
/// clipping negative eigenvalues (round-off below `1e-12` of the spectral
/// radius is left alone). The design block is then inverted on its
/// eigenvectors with eigenvalue at least `eigen_floor`; anything smaller is
/// dropped, which is the minimum-norm pseudo-inverse solution.
pub(crate) fn solve_gram(gram: &DMatrix<f64>, eigen_floor: f64) -> GramSolution {
    let dim = gram.nrows();
    debug_assert!(dim >= 3 && gram.is_square());
    let sym = (gram + gram.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let radius = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-12 * radius;
    let clipping_activated = eig.eigenvalues.iter().any(|&v| v < -tol);
    let projected = if clipping_activated {
        let clipped = eig.eigenvalues.map(|v| v.max(0.0));
        &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose()
    } else {
        sym
    };

    let p = dim - 1;
    let design = projected.view((0, 0), (p, p)).into_owned();
    let cross: DVector<f64> = projected.view((0, p), (p, 1)).column(0).into_owned();
    let design_eig = SymmetricEigen::new(design);
    let rank_deficient = design_eig.eigenvalues.iter().any(|&v| v < eigen_floor);

    let mut beta = DVector::<f64>::zeros(p);
    for (i, &lambda) in design_eig.eigenvalues.iter().enumerate() {
        if lambda >= eigen_floor {
            let v = design_eig.eigenvectors.column(i);
            beta += v * (v.dot(&cross) / lambda);
        }
    }
    GramSolution { coefficients: beta.iter().copied().collect(), clipping_activated, rank_deficient }
}

/// Maps unit-scaled coefficients back to original units.
///
/// With `x' = (x - l) / (u - l)` and `y' = (y - ly) / (uy - ly)`:
/// slope_j = (uy - ly) b_j / (u_j - l_j) and
/// intercept = ly + (uy - ly) (b_0 - sum_j b_j l_j / (u_j - l_j)).
pub(crate) fn rescale_coefficients(unit: &[f64], predictor_bounds: &[(f64, f64)], outcome_bounds: (f64, f64)) -> Vec<f64> {
    let (ly, uy) = outcome_bounds;
    let span_y = uy - ly;
    let mut out = Vec::with_capacity(unit.len());
    let mut shift = 0.0;
    let mut slopes = Vec::with_capacity(predictor_bounds.len());
    for (b, (l, u)) in unit[1..].iter().zip(predictor_bounds) {
        let w = u - l;
        slopes.push(span_y * b / w);
        shift += b * l / w;
    }
    out.push(ly + span_y * (unit[0] - shift));
    out.extend(slopes);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CellValue, ColumnSpec, Dataset, Filter, Schema};
    use crate::mechanisms::{dp_ols, NoiseDetail, PrivacyCost};
    use crate::rng::RandomSource;

    fn xy(points: &[(f64, f64)], xb: (f64, f64), yb: (f64, f64)) -> Dataset {
        let schema =
            Schema::new("r", vec![ColumnSpec::numeric("x", xb.0, xb.1), ColumnSpec::numeric("y", yb.0, yb.1)]).unwrap();
        let rows = points.iter().map(|&(x, y)| vec![CellValue::Num(x), CellValue::Num(y)]).collect();
        Dataset::from_rows(schema, rows, false).unwrap()
    }

    // Oracle: least squares on the raw (unscaled) design via SVD.
    fn lstsq(points: &[(f64, f64)]) -> (f64, f64) {
        let n = points.len();
        let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { points[i].0 });
        let y = DVector::from_iterator(n, points.iter().map(|p| p.1));
        let sol = x.svd(true, true).solve(&y, 1e-14).unwrap();
        (sol[0], sol[1])
    }

    #[test]
    fn exact_line_noise_off() {
        let pts: Vec<(f64, f64)> = (1..=9).map(|i| (i as f64 / 10.0, 2.0 * i as f64 / 10.0)).collect();
        let d = xy(&pts, (0.0, 1.0), (0.0, 2.0));
        let eps = PrivacyCost::new(1.0).unwrap();
        let r = dp_ols(&d, "y", &["x"], &Filter::all(), eps, &mut RandomSource::noise_off()).unwrap();
        let (b0, b1) = lstsq(&pts);
        assert!((r.estimate.values[0] - b0).abs() < 1e-9, "{:?}", r.estimate);
        assert!((r.estimate.values[1] - b1).abs() < 1e-9);
        assert!((r.estimate.values[1] - 2.0).abs() < 1e-9);
        assert!(r.estimate.values[0].abs() < 1e-9);
        assert_eq!(r.estimate.labels, vec!["intercept", "x"]);
    }

    #[test]
    fn constant_predictor_flags_rank_deficiency() {
        let pts: Vec<(f64, f64)> = (0..20).map(|i| (3.0, i as f64)).collect();
        let d = xy(&pts, (0.0, 10.0), (0.0, 20.0));
        let eps = PrivacyCost::new(1.0).unwrap();
        let r = dp_ols(&d, "y", &["x"], &Filter::all(), eps, &mut RandomSource::noise_off()).unwrap();
        match r.noise_model.detail {
            NoiseDetail::Ols { rank_deficient, entries, .. } => {
                assert!(rank_deficient);
                assert_eq!(entries, 6);
            }
            other => panic!("{other:?}"),
        }
        assert!(r.estimate.values.iter().all(|v| v.is_finite()));
        // minimum-norm fit still reproduces the mean of y at x = 3
        let fitted = r.estimate.values[0] + 3.0 * r.estimate.values[1];
        assert!((fitted - 9.5).abs() < 1e-6, "{fitted}");
    }

    #[test]
    fn rescale_round_trip() {
        // y = 1 + 2x on x in [2, 6], y in [5, 13]: x' = (x-2)/4, y' = (y-5)/8
        // y' = (1 + 2(2 + 4x') - 5)/8 = x'
        let c = rescale_coefficients(&[0.0, 1.0], &[(2.0, 6.0)], (5.0, 13.0));
        assert!((c[0] - 1.0).abs() < 1e-12 && (c[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn negative_spectrum_is_clipped() {
        let mut g = DMatrix::<f64>::identity(3, 3);
        g[(2, 2)] = -5.0;
        let s = solve_gram(&g, 1e-6);
        assert!(s.clipping_activated);
        assert!(!s.rank_deficient);
    }
}
