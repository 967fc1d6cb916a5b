//! Gauss-Legendre quadrature rules and composite integration helpers.

use std::sync::OnceLock;

/// Nodes and weights of an n-point Gauss-Legendre rule on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// Build the n-point rule by Newton iteration on the Legendre polynomial roots.
    pub fn new(n: usize) -> Self {
        assert!(n >= 2);
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            // Chebyshev-based initial guess, then Newton.
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_deriv(n, x);
                dp = d;
                let step = p / d;
                x -= step;
                if step.abs() < 1e-15 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        GaussLegendre { nodes, weights }
    }

    /// Integrate f over [a, b] with a single application of the rule.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut acc = 0.0;
        for (x, w) in self.nodes.iter().zip(&self.weights) {
            acc += w * f(mid + half * x);
        }
        acc * half
    }

    /// Integrate f over [a, b] split into `panels` equal subintervals.
    pub fn integrate_panels<F: FnMut(f64) -> f64>(
        &self,
        a: f64,
        b: f64,
        panels: usize,
        mut f: F,
    ) -> f64 {
        let h = (b - a) / panels as f64;
        let mut acc = 0.0;
        for k in 0..panels {
            let lo = a + k as f64 * h;
            acc += self.integrate(lo, lo + h, &mut f);
        }
        acc
    }
}

/// Legendre polynomial P_n and its derivative at x via the three-term recurrence.
fn legendre_with_deriv(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Shared 16-point rule; enough for the smooth integrands in this crate
/// when combined with panel splitting.
pub fn rule16() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(16))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn polynomial_exactness() {
        // n-point rule is exact for degree 2n-1.
        let rule = GaussLegendre::new(5);
        let exact = 2.0 / 10.0 * (1.0f64.powi(10) - (-1.0f64).powi(10)); // int x^9 = 0
        assert_abs_diff_eq!(rule.integrate(-1.0, 1.0, |x| x.powi(9)), exact, epsilon = 1e-14);
        // int_{-1}^{1} x^8 dx = 2/9
        assert_abs_diff_eq!(
            rule.integrate(-1.0, 1.0, |x| x.powi(8)),
            2.0 / 9.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn smooth_integral() {
        let rule = rule16();
        let val = rule.integrate_panels(0.0, std::f64::consts::PI, 4, |x| x.sin());
        assert_abs_diff_eq!(val, 2.0, epsilon = 1e-13);
    }
}
