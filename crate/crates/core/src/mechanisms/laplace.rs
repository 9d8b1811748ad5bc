use super::MechanismError;
use crate::rng::RandomSource;

/// One draw from Laplace(0, `scale`), density `exp(-|x|/scale) / (2 scale)`.
///
/// Returns exactly zero when `rng` is in noise-off mode.
pub fn laplace_sample(scale: f64, rng: &mut RandomSource) -> Result<f64, MechanismError> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(MechanismError::InvalidScale(scale));
    }
    Ok(laplace(scale, rng))
}

// Sign times an Exp(1) draw; `1 - unit()` lies in (0, 1] so the log is finite.
pub(crate) fn laplace(scale: f64, rng: &mut RandomSource) -> f64 {
    debug_assert!(scale > 0.0);
    if rng.is_noise_off() {
        return 0.0;
    }
    let magnitude = -(1.0 - rng.unit()).ln() * scale;
    if rng.coin() {
        magnitude
    } else {
        -magnitude
    }
}
