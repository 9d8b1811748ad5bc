/// Inverts a (noisy) binned CDF on `[lower, upper]` at level `q`.
///
/// The target rank is `q` times the noisy total, the total clamped below at
/// one. The first bin whose running sum reaches the target is selected and
/// its midpoint returned; if no bin reaches it, the last bin is used. For
/// fixed counts the result is non-decreasing in `q`. Returns the value and
/// whether the total was clamped.
pub(crate) fn invert_noisy_bins(bins: &[f64], q: f64, lower: f64, upper: f64) -> (f64, bool) {
    let k = bins.len();
    let raw_total: f64 = bins.iter().sum();
    let total_clamped = raw_total < 1.0;
    let target = q * raw_total.max(1.0);
    let mut running = 0.0;
    let mut selected = k - 1;
    for (i, c) in bins.iter().enumerate() {
        running += c;
        if running >= target {
            selected = i;
            break;
        }
    }
    let width = (upper - lower) / k as f64;
    (lower + (selected as f64 + 0.5) * width, total_clamped)
}
