//! Log-log slope fitting with error-floor detection.

use crate::error::{HarnessError, Result};

/// Least-squares fit `log10 err = intercept + slope * log10 h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual in decades.
    pub residual: f64,
    pub points: usize,
}

pub fn fit_slope(h: &[f64], err: &[f64]) -> Result<SlopeFit> {
    if h.len() != err.len() {
        return Err(HarnessError::Input(format!("{} step sizes but {} errors", h.len(), err.len())));
    }
    if h.len() < 3 {
        return Err(HarnessError::Input(format!("slope fit needs at least 3 points, got {}", h.len())));
    }
    if h.iter().chain(err).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(HarnessError::Input("slope fit needs positive finite values".into()));
    }
    let x: Vec<f64> = h.iter().map(|v| v.log10()).collect();
    let y: Vec<f64> = err.iter().map(|v| v.log10()).collect();
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(HarnessError::Input("slope fit needs distinct step sizes".into()));
    }
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss: f64 = x.iter().zip(&y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    Ok(SlopeFit { slope, intercept, residual: (ss / n).sqrt(), points: x.len() })
}

/// Local slopes below this count as flat.
pub const FLAT_SLOPE: f64 = 0.5;
/// Points within this factor of a detected floor are excluded from the fit.
pub const FLOOR_MARGIN: f64 = 10.0;

/// Slope between consecutive points; `None` for the first point.
pub fn local_slopes(h: &[f64], err: &[f64]) -> Vec<Option<f64>> {
    (0..h.len())
        .map(|i| {
            (i > 0 && err[i] > 0.0 && err[i - 1] > 0.0)
                .then(|| (err[i] / err[i - 1]).log10() / (h[i] / h[i - 1]).log10())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloorFit {
    /// `None` when fewer than three points remain above the floor.
    pub fit: Option<SlopeFit>,
    pub floor: Option<f64>,
    /// Indices of the points used by the fit.
    pub used: Vec<usize>,
    pub flagged: bool,
}

/// Fits the slope of a sweep ordered by decreasing `h`.
///
/// The floor is the flat tail: the longest suffix whose local slopes are all
/// below [`FLAT_SLOPE`]. When one exists the fit uses only the points before
/// it that lie more than [`FLOOR_MARGIN`] times above the floor level.
pub fn fit_above_floor(h: &[f64], err: &[f64]) -> Result<FloorFit> {
    if h.len() != err.len() {
        return Err(HarnessError::Input(format!("{} step sizes but {} errors", h.len(), err.len())));
    }
    if h.windows(2).any(|w| w[1] >= w[0]) {
        return Err(HarnessError::Input("step sizes must be strictly decreasing".into()));
    }
    let slopes = local_slopes(h, err);
    let mut start = h.len();
    while start > 1 && slopes[start - 1].is_some_and(|s| s < FLAT_SLOPE) {
        start -= 1;
    }
    let (floor, used): (Option<f64>, Vec<usize>) = if start < h.len() {
        let onset = start - 1;
        let level = err[onset..].iter().copied().fold(f64::INFINITY, f64::min);
        (Some(level), (0..onset).filter(|&i| err[i] > FLOOR_MARGIN * level).collect())
    } else {
        (None, (0..h.len()).collect())
    };
    let fit = if used.len() >= 3 {
        let hs: Vec<f64> = used.iter().map(|&i| h[i]).collect();
        let es: Vec<f64> = used.iter().map(|&i| err[i]).collect();
        Some(fit_slope(&hs, &es)?)
    } else {
        None
    };
    Ok(FloorFit { fit, floor, used, flagged: floor.is_some() })
}
