//! Central finite-difference verification of analytic gradients.

use super::{Tape, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::Rng;

/// Outcome of a gradient check: worst relative error and where it occurred.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub worst_coord: usize,
    pub coords_checked: usize,
}

/// Compare analytic gradients of `forward` against central differences.
///
/// `forward` must rebuild the graph from the current parameter values and
/// return the scalar loss. At most `max_coords_per_param` coordinates are
/// probed per parameter (all of them when the parameter is small). The
/// relative error is `|a - n| / max(1e-8, |a| + |n|)`.
pub fn grad_check<F>(
    mut forward: F,
    params: &[Tensor],
    h: f64,
    max_coords_per_param: usize,
    rng: &mut impl Rng,
) -> Result<GradCheckReport, TensorError>
where
    F: FnMut(&mut Tape) -> Result<Tensor, TensorError>,
{
    // analytic pass
    for p in params {
        p.zero_grad();
    }
    let mut tape = Tape::new();
    let loss = forward(&mut tape)?;
    tape.backward(&loss)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: 0,
        worst_coord: 0,
        coords_checked: 0,
    };
    for (pi, p) in params.iter().enumerate() {
        let n = p.len();
        let mut coords: Vec<usize> = (0..n).collect();
        if n > max_coords_per_param {
            coords.shuffle(rng);
            coords.truncate(max_coords_per_param);
        }
        for &ci in &coords {
            let numeric = {
                p.nudge(ci, h);
                let mut t = Tape::new();
                let up = forward(&mut t)?.scalar()?;
                t.clear();
                p.nudge(ci, -2.0 * h);
                let mut t = Tape::new();
                let down = forward(&mut t)?.scalar()?;
                t.clear();
                p.nudge(ci, h);
                (up - down) / (2.0 * h)
            };
            let a = analytic[pi][ci];
            let rel = (a - numeric).abs() / f64::max(1e-8, a.abs() + numeric.abs());
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = pi;
                report.worst_coord = ci;
            }
        }
    }
    for p in params {
        p.zero_grad();
    }
    Ok(report)
}
