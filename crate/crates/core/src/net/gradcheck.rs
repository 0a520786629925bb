use rand::Rng as _;

use super::ParamSet;
use crate::rng::Rng;

const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub passed: bool,
}

/// Compare analytic gradients against central differences at `n_coords`
/// random coordinates. `loss` returns the loss value and its gradient.
///
/// Relative error per coordinate is `|g_a − g_fd| / max(1e-8, |g_a| + |g_fd|)`.
pub fn gradcheck<F>(
    params: &ParamSet,
    mut loss: F,
    n_coords: usize,
    tolerance: f64,
    rng: &mut Rng,
) -> GradCheckReport
where
    F: FnMut(&ParamSet) -> (f64, ParamSet),
{
    let (_, analytic) = loss(params);
    let total = params.n_coords();
    let mut probe = params.clone();
    let mut max_rel_error: f64 = 0.0;
    for _ in 0..n_coords {
        let i = rng.random_range(0..total);
        let orig = probe.coord(i);
        *probe.coord_mut(i) = orig + STEP;
        let up = loss(&probe).0;
        *probe.coord_mut(i) = orig - STEP;
        let down = loss(&probe).0;
        *probe.coord_mut(i) = orig;
        let fd = (up - down) / (2.0 * STEP);
        let ga = analytic.coord(i);
        let rel = (ga - fd).abs() / (ga.abs() + fd.abs()).max(1e-8);
        max_rel_error = max_rel_error.max(rel);
    }
    GradCheckReport {
        max_rel_error,
        coords_checked: n_coords,
        passed: max_rel_error < tolerance,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn quadratic_matches_exactly() {
        // Tiny weights keep the summed loss small, so differencing loses no digits.
        let mut p = ParamSet::zeros();
        p.for_each_mut(|_, a| a.fill(1e-5));
        let report = gradcheck(
            &p,
            |q| (0.5 * q.dot(q), q.clone()),
            200,
            1e-10,
            &mut rng::stream(2, &[]),
        );
        assert!(report.max_rel_error < 1e-10, "{report:?}");
    }
}
