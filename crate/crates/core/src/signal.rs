//! Period detection on uniformly sampled scalar signals (energy histories).

/// Estimates the fundamental period, in samples, of a uniformly sampled
/// signal from its autocorrelation.
///
/// The period is the first local maximum of the normalised autocorrelation
/// that follows its first negative excursion and exceeds `0.5`, refined by a
/// parabolic fit. At least two full periods must fit in the record.
pub fn detect_period_samples(values: &[f64]) -> Option<f64> {
    let n = values.len();
    if n < 8 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let x: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let var: f64 = x.iter().map(|v| v * v).sum();
    if !(var > 0.0) || !var.is_finite() {
        return None;
    }
    let max_lag = n / 2;
    let acf: Vec<f64> = (0..=max_lag)
        .map(|lag| {
            let s: f64 = x[..n - lag].iter().zip(&x[lag..]).map(|(a, b)| a * b).sum();
            s / var * n as f64 / (n - lag) as f64
        })
        .collect();
    let first_neg = acf.iter().position(|&c| c < 0.0)?;
    for lag in first_neg.max(1)..max_lag {
        if acf[lag] > 0.5 && acf[lag] >= acf[lag - 1] && acf[lag] >= acf[lag + 1] {
            let (a, b, c) = (acf[lag - 1], acf[lag], acf[lag + 1]);
            let denom = a - 2.0 * b + c;
            let shift = if denom.abs() > 1e-300 { 0.5 * (a - c) / denom } else { 0.0 };
            return Some(lag as f64 + shift.clamp(-0.5, 0.5));
        }
    }
    None
}

/// Period in time units for a signal sampled every `dt`.
pub fn detect_period(dt: f64, values: &[f64]) -> Option<f64> {
    detect_period_samples(values).map(|p| p * dt)
}

/// Maxima of the signal over consecutive windows of `period` samples,
/// counted from the end of the record backwards.
pub fn window_peaks(values: &[f64], period: usize) -> Vec<f64> {
    if period == 0 {
        return Vec::new();
    }
    let mut peaks: Vec<f64> = values
        .rchunks_exact(period)
        .map(|w| w.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    peaks.reverse();
    peaks
}

/// Whether the last two period-windows have peaks within `rel_tol`.
pub fn is_statistically_periodic(values: &[f64], rel_tol: f64) -> Option<f64> {
    let p = detect_period_samples(values)?;
    let peaks = window_peaks(values, p.round() as usize);
    if peaks.len() < 2 {
        return None;
    }
    let (a, b) = (peaks[peaks.len() - 2], peaks[peaks.len() - 1]);
    if ((a - b) / b).abs() < rel_tol {
        Some(p)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_period_of_sine() {
        let dt = 0.01;
        let v: Vec<f64> = (0..1000).map(|i| (2.0 * std::f64::consts::PI * i as f64 * dt / 1.7).sin()).collect();
        let p = detect_period(dt, &v).unwrap();
        assert!((p - 1.7).abs() < 0.01, "{p}");
    }

    #[test]
    fn double_peaked_signal_reports_full_period() {
        let v: Vec<f64> = (0..600)
            .map(|i| {
                let t = 2.0 * std::f64::consts::PI * i as f64 / 100.0;
                t.sin() + 0.6 * (2.0 * t).cos()
            })
            .collect();
        let p = detect_period_samples(&v).unwrap();
        assert!((p - 100.0).abs() < 0.5, "{p}");
    }

    #[test]
    fn constant_or_short_signal_has_no_period() {
        assert!(detect_period_samples(&[1.0; 100]).is_none());
        assert!(detect_period_samples(&[1.0, 2.0, 1.0]).is_none());
        let ramp: Vec<f64> = (0..100).map(|i| i as f64).collect();
        assert!(detect_period_samples(&ramp).is_none());
    }

    #[test]
    fn periodicity_check_uses_last_two_windows() {
        let v: Vec<f64> = (0..500).map(|i| (2.0 * std::f64::consts::PI * i as f64 / 50.0).sin()).collect();
        assert!(is_statistically_periodic(&v, 0.01).is_some());
        let growing: Vec<f64> =
            (0..500).map(|i| (1.0 + i as f64 / 100.0) * (2.0 * std::f64::consts::PI * i as f64 / 50.0).sin()).collect();
        assert!(is_statistically_periodic(&growing, 0.01).is_none());
    }
}
