//! Univariate, bivariate, and trivariate standard normal primitives.
//!
//! The bivariate upper-tail probability follows the Drezner-Wesolowsky
//! quadrature with Genz's high-accuracy modifications for |rho| close to 1;
//! the trivariate cdf reduces to a one-dimensional integral through the
//! Plackett identity. Both are deterministic and accurate to roughly 1e-14
//! away from singular correlations.
#![allow(clippy::excessive_precision)]

use crate::quad::rule16;

pub const SQRT_2PI: f64 = 2.5066282746310002;
const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Standard normal density.
#[inline]
pub fn pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

/// Standard normal cdf via the complementary error function.
#[inline]
pub fn cdf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Standard normal survival function P(Z > x).
#[inline]
pub fn sf(x: f64) -> f64 {
    0.5 * libm::erfc(x * FRAC_1_SQRT_2)
}

/// Standard normal quantile (Wichura's AS241, double precision).
pub fn inverse_cdf(p: f64) -> f64 {
    if !(0.0..=1.0).contains(&p) {
        return f64::NAN;
    }
    if p == 0.0 {
        return f64::NEG_INFINITY;
    }
    if p == 1.0 {
        return f64::INFINITY;
    }
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * horner(&AS241_A, r) / horner(&AS241_B, r);
    }
    let mut r = if q < 0.0 { p } else { 1.0 - p };
    r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        horner(&AS241_C, r) / horner(&AS241_D, r)
    } else {
        let r = r - 5.0;
        horner(&AS241_E, r) / horner(&AS241_F, r)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

#[inline]
fn horner(coeffs: &[f64], x: f64) -> f64 {
    let mut acc = 0.0;
    for &c in coeffs.iter().rev() {
        acc = acc * x + c;
    }
    acc
}

// AS241 rational approximation coefficients (ascending order).
const AS241_A: [f64; 8] = [
    3.3871328727963666080e0,
    1.3314166789178437745e2,
    1.9715909503065514427e3,
    1.3731693765509461125e4,
    4.5921953931549871457e4,
    6.7265770927008700853e4,
    3.3430575583588128105e4,
    2.5090809287301226727e3,
];
const AS241_B: [f64; 8] = [
    1.0,
    4.2313330701600911252e1,
    6.8718700749205790830e2,
    5.3941960214247511077e3,
    2.1213794301586595867e4,
    3.9307895800092710610e4,
    2.8729085735721942674e4,
    5.2264952788528545610e3,
];
const AS241_C: [f64; 8] = [
    1.42343711074968357734e0,
    4.63033784615654529590e0,
    5.76949722146069140550e0,
    3.64784832476320460504e0,
    1.27045825245236838258e0,
    2.41780725177450611770e-1,
    2.27238449892691845833e-2,
    7.74545014278341407640e-4,
];
const AS241_D: [f64; 8] = [
    1.0,
    2.05319162663775882187e0,
    1.67638483018380384940e0,
    6.89767334985100004550e-1,
    1.48103976427480074590e-1,
    1.51986665636164571966e-2,
    5.47593808499534494600e-4,
    1.05075007164441684324e-9,
];
const AS241_E: [f64; 8] = [
    6.65790464350110377720e0,
    5.46378491116411436990e0,
    1.78482653991729133580e0,
    2.96560571828504891230e-1,
    2.65321895265761230930e-2,
    1.24266094738807843860e-3,
    2.71155556874348757815e-5,
    2.01033439929228813265e-7,
];
const AS241_F: [f64; 8] = [
    1.0,
    5.99832206555887937690e-1,
    1.36929880922735805310e-1,
    1.48753612908506148525e-2,
    7.86869131145613259100e-4,
    1.84631831751005468180e-5,
    1.42151175831644588870e-7,
    2.04426310338993978564e-15,
];

/// Standard bivariate normal density with correlation rho.
#[inline]
pub fn bvn_pdf(x: f64, y: f64, rho: f64) -> f64 {
    if !x.is_finite() || !y.is_finite() {
        return 0.0;
    }
    let omr2 = 1.0 - rho * rho;
    if omr2 <= 0.0 {
        return 0.0;
    }
    let q = (x * x - 2.0 * rho * x * y + y * y) / omr2;
    (-0.5 * q).exp() / (TWO_PI * omr2.sqrt())
}

// Gauss-Legendre pairs (weight, node) reused by the Drezner-Wesolowsky scheme.
const BVN_QUAD_6: [(f64, f64); 3] = [
    (0.1713244923791705, -0.9324695142031522),
    (0.3607615730481384, -0.6612093864662647),
    (0.4679139345726904, -0.2386191860831970),
];
const BVN_QUAD_12: [(f64, f64); 6] = [
    (0.04717533638651177, -0.9815606342467191),
    (0.1069393259953183, -0.9041172563704750),
    (0.1600783285433464, -0.7699026741943050),
    (0.2031674267230659, -0.5873179542866171),
    (0.2334925365383547, -0.3678314989981802),
    (0.2491470458134029, -0.1252334085114692),
];
const BVN_QUAD_20: [(f64, f64); 10] = [
    (0.01761400713915212, -0.9931285991850949),
    (0.04060142980038694, -0.9639719272779138),
    (0.06267204833410906, -0.9122344282513259),
    (0.08327674157670475, -0.8391169718222188),
    (0.1019301198172404, -0.7463319064601508),
    (0.1181945319615184, -0.6360536807265150),
    (0.1316886384491766, -0.5108670019508271),
    (0.1420961093183821, -0.3737060887154196),
    (0.1491729864726037, -0.2277858511416451),
    (0.1527533871307259, -0.07652652113349733),
];

fn bvn_quadrature(rho_abs: f64) -> &'static [(f64, f64)] {
    if rho_abs < 0.3 {
        &BVN_QUAD_6
    } else if rho_abs < 0.75 {
        &BVN_QUAD_12
    } else {
        &BVN_QUAD_20
    }
}

/// Upper-tail bivariate normal probability P(X > h, Y > k) for correlation r.
///
/// Handles infinite limits and |r| = 1 exactly.
pub fn bvn_upper(h: f64, k: f64, r: f64) -> f64 {
    debug_assert!((-1.0..=1.0).contains(&r));
    if h == f64::INFINITY || k == f64::INFINITY {
        return 0.0;
    }
    if h == f64::NEG_INFINITY {
        return if k == f64::NEG_INFINITY { 1.0 } else { sf(k) };
    }
    if k == f64::NEG_INFINITY {
        return sf(h);
    }
    if r == 0.0 {
        return sf(h) * sf(k);
    }
    if r >= 1.0 {
        return sf(h.max(k));
    }
    if r <= -1.0 {
        // Y = -X: P(X > h, X < -k)
        return (cdf(-k) - cdf(h)).max(0.0);
    }

    let quad = bvn_quadrature(r.abs());
    let mut k = k;
    let mut hk = h * k;
    let mut bvn = 0.0;

    if r.abs() <= 0.925 {
        let hs = (h * h + k * k) / 2.0;
        let asr = r.asin();
        for &(w, x) in quad {
            for sign in [-1.0, 1.0] {
                let sn = (asr * (sign * x + 1.0) / 2.0).sin();
                bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
            }
        }
        bvn * asr / (2.0 * TWO_PI) + sf(h) * sf(k)
    } else {
        if r < 0.0 {
            k = -k;
            hk = -hk;
        }
        let a_sq = (1.0 - r) * (1.0 + r);
        let mut a = a_sq.sqrt();
        let b_sq = (h - k) * (h - k);
        let c = (4.0 - hk) / 8.0;
        let d = (12.0 - hk) / 16.0;
        let asr = -(b_sq / a_sq + hk) / 2.0;
        if asr > -100.0 {
            bvn = a
                * asr.exp()
                * (1.0 - c * (b_sq - a_sq) * (1.0 - d * b_sq / 5.0) / 3.0
                    + c * d * a_sq * a_sq / 5.0);
        }
        if -hk < 100.0 {
            let b = b_sq.sqrt();
            bvn -= (-hk / 2.0).exp()
                * SQRT_2PI
                * cdf(-b / a)
                * b
                * (1.0 - c * b_sq * (1.0 - d * b_sq / 5.0) / 3.0);
        }
        a /= 2.0;
        for &(w, x) in quad {
            for sign in [-1.0, 1.0] {
                let xs = (a * (sign * x + 1.0)).powi(2);
                let rs = (1.0 - xs).sqrt();
                let asr = -(b_sq / xs + hk) / 2.0;
                if asr > -100.0 {
                    bvn += a
                        * w
                        * asr.exp()
                        * ((-hk * (1.0 - rs) / (2.0 * (1.0 + rs))).exp() / rs
                            - (1.0 + c * xs * (1.0 + d * xs)));
                }
            }
        }
        bvn = -bvn / TWO_PI;
        if r > 0.0 {
            bvn += sf(h.max(k));
        } else {
            bvn = -bvn;
            if k > h {
                bvn += cdf(k) - cdf(h);
            }
        }
        bvn.clamp(0.0, 1.0)
    }
}

/// Bivariate normal cdf P(X <= a, Y <= b) with correlation rho.
#[inline]
pub fn bvn_cdf(a: f64, b: f64, rho: f64) -> f64 {
    bvn_upper(-a, -b, rho)
}

/// Trivariate normal cdf P(Z1 <= b1, Z2 <= b2, Z3 <= b3) for the correlation
/// triple (r21, r31, r32).
///
/// Plackett reduction: correlations of the pivot variable are deformed from 0
/// to their target values, turning the cdf into the base term
/// `cdf(b1) * bvn_cdf(b2, b3; r32)` plus a 1-D integral of bivariate densities
/// times conditional univariate cdfs.
pub fn tvn_cdf(b: [f64; 3], r21: f64, r31: f64, r32: f64) -> f64 {
    // Infinite limits: reduce dimension.
    if b.contains(&f64::NEG_INFINITY) {
        return 0.0;
    }
    if b[0] == f64::INFINITY {
        return bvn_cdf(b[1], b[2], r32);
    }
    if b[1] == f64::INFINITY {
        return bvn_cdf(b[0], b[2], r31);
    }
    if b[2] == f64::INFINITY {
        return bvn_cdf(b[0], b[1], r21);
    }

    // Pick as pivot the variable whose correlations with the other two are
    // smallest; the largest correlation stays in the exact bvn base term.
    let (bb, r21, r31, r32) = {
        let score = |i: usize| -> f64 {
            match i {
                0 => r21.abs().max(r31.abs()),
                1 => r21.abs().max(r32.abs()),
                _ => r31.abs().max(r32.abs()),
            }
        };
        let pivot = (0..3).min_by(|&i, &j| score(i).total_cmp(&score(j))).unwrap();
        match pivot {
            0 => ([b[0], b[1], b[2]], r21, r31, r32),
            1 => ([b[1], b[0], b[2]], r21, r32, r31),
            _ => ([b[2], b[0], b[1]], r31, r32, r21),
        }
    };

    let base = cdf(bb[0]) * bvn_cdf(bb[1], bb[2], r32);
    if r21 == 0.0 && r31 == 0.0 {
        return base;
    }

    let integrand = |t: f64| -> f64 {
        let p12 = t * r21;
        let p13 = t * r31;
        let mut acc = 0.0;
        if r21 != 0.0 {
            acc += r21 * bvn_pdf(bb[0], bb[1], p12) * cond_cdf(bb[2], bb[0], bb[1], p13, r32, p12);
        }
        if r31 != 0.0 {
            acc += r31 * bvn_pdf(bb[0], bb[2], p13) * cond_cdf(bb[1], bb[0], bb[2], p12, r32, p13);
        }
        acc
    };

    let rule = rule16();
    let coarse = rule.integrate_panels(0.0, 1.0, 4, integrand);
    let fine = rule.integrate_panels(0.0, 1.0, 8, integrand);
    let integral = if (fine - coarse).abs() > 5e-11 {
        rule.integrate_panels(0.0, 1.0, 20, integrand)
    } else {
        fine
    };
    (base + integral).clamp(0.0, 1.0)
}

/// Phi of the standardized conditional value of Z_t given Z_a = za, Z_b = zb,
/// where Corr(Z_t, Z_a) = rta, Corr(Z_t, Z_b) = rtb, Corr(Z_a, Z_b) = rab.
#[inline]
fn cond_cdf(zt: f64, za: f64, zb: f64, rta: f64, rtb: f64, rab: f64) -> f64 {
    let denom = 1.0 - rab * rab;
    if denom < 1e-14 {
        // Conditioning pair nearly degenerate; fall back to single conditioning.
        let v = (1.0 - rta * rta).max(1e-14);
        return cdf((zt - rta * za) / v.sqrt());
    }
    let mean = (rta * (za - rab * zb) + rtb * (zb - rab * za)) / denom;
    let var = 1.0 - (rta * rta - 2.0 * rta * rtb * rab + rtb * rtb) / denom;
    if var <= 1e-14 {
        let centered = zt - mean;
        return if centered > 0.0 {
            1.0
        } else if centered < 0.0 {
            0.0
        } else {
            0.5
        };
    }
    cdf((zt - mean) / var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Independent oracle for the bivariate cdf: Plackett's identity
    /// integrated from rho = 0 with dense Gauss-Legendre quadrature.
    fn bvn_cdf_oracle(a: f64, b: f64, rho: f64) -> f64 {
        let rule = crate::quad::GaussLegendre::new(60);
        let integral = rule.integrate_panels(0.0, rho, 8, |t| bvn_pdf(a, b, t));
        cdf(a) * cdf(b) + integral
    }

    #[test]
    fn quantile_round_trip() {
        for &p in &[1e-12, 1e-6, 0.01, 0.3, 0.5, 0.7, 0.99, 1.0 - 1e-6] {
            let x = inverse_cdf(p);
            assert_abs_diff_eq!(cdf(x), p, epsilon = 1e-13 * p.max(1e-3));
        }
        assert_abs_diff_eq!(inverse_cdf(0.5), 0.0, epsilon = 1e-15);
        assert!(inverse_cdf(0.0).is_infinite());
    }

    #[test]
    fn cdf_known_values() {
        assert_abs_diff_eq!(cdf(0.0), 0.5, epsilon = 1e-16);
        assert_abs_diff_eq!(cdf(1.959963984540054), 0.975, epsilon = 1e-12);
        assert_abs_diff_eq!(sf(1.0) + cdf(1.0), 1.0, epsilon = 1e-16);
    }

    #[test]
    fn bvn_orthant_closed_form() {
        // Phi2(0, 0; rho) = 1/4 + asin(rho) / (2 pi)
        for &rho in &[-0.95f64, -0.5, -0.1, 0.0, 0.1, 0.5, 0.8, 0.95, 0.99] {
            let expected = 0.25 + rho.asin() / TWO_PI;
            assert_abs_diff_eq!(bvn_cdf(0.0, 0.0, rho), expected, epsilon = 5e-15);
        }
        assert_abs_diff_eq!(bvn_cdf(0.0, 0.0, 0.5), 1.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn bvn_matches_plackett_oracle() {
        let grid = [-2.5, -1.0, -0.3, 0.0, 0.4, 1.2, 2.8];
        for &rho in &[-0.95, -0.93, -0.6, -0.2, 0.15, 0.5, 0.926, 0.95] {
            for &a in &grid {
                for &b in &grid {
                    let got = bvn_cdf(a, b, rho);
                    let want = bvn_cdf_oracle(a, b, rho);
                    assert_abs_diff_eq!(got, want, epsilon = 3e-14);
                }
            }
        }
    }

    #[test]
    fn bvn_limits_and_symmetry() {
        assert_abs_diff_eq!(bvn_upper(f64::NEG_INFINITY, f64::NEG_INFINITY, 0.7), 1.0);
        assert_eq!(bvn_upper(f64::INFINITY, 0.0, 0.3), 0.0);
        assert_abs_diff_eq!(bvn_upper(f64::NEG_INFINITY, 1.3, -0.4), sf(1.3), epsilon = 1e-16);
        for &rho in &[-0.99, -0.5, 0.2, 0.97] {
            assert_abs_diff_eq!(
                bvn_upper(0.7, -1.1, rho),
                bvn_upper(-1.1, 0.7, rho),
                epsilon = 1e-15
            );
        }
        // Singular correlations.
        assert_abs_diff_eq!(bvn_cdf(0.3, 0.8, 1.0), cdf(0.3), epsilon = 1e-15);
        assert_abs_diff_eq!(bvn_cdf(0.3, -0.8, -1.0), (cdf(0.3) - cdf(0.8)).max(0.0), epsilon = 1e-15);
    }

    #[test]
    fn tvn_known_values() {
        // Independence factorizes.
        let v = tvn_cdf([0.3, -0.2, 1.1], 0.0, 0.0, 0.0);
        assert_abs_diff_eq!(v, cdf(0.3) * cdf(-0.2) * cdf(1.1), epsilon = 1e-12);
        // Equicorrelated orthant: P(Z <= 0) = 1/8 + 3 asin(rho) / (4 pi).
        for &rho in &[0.0f64, 0.2, 0.5, 0.9] {
            let expected = 0.125 + 3.0 * rho.asin() / (4.0 * std::f64::consts::PI);
            assert_abs_diff_eq!(tvn_cdf([0.0; 3], rho, rho, rho), expected, epsilon = 1e-11);
        }
        // One infinite coordinate marginalizes.
        assert_abs_diff_eq!(
            tvn_cdf([f64::INFINITY, 0.4, -0.6], 0.3, -0.2, 0.55),
            bvn_cdf(0.4, -0.6, 0.55),
            epsilon = 1e-14
        );
        assert_eq!(tvn_cdf([f64::NEG_INFINITY, 0.4, -0.6], 0.3, -0.2, 0.55), 0.0);
    }

    #[test]
    fn tvn_permutation_invariance() {
        // The cdf must not depend on which variable is used as the pivot.
        let b = [0.35, -0.8, 1.4];
        let (r21, r31, r32) = (-0.5, -0.3, 0.3);
        let v1 = tvn_cdf(b, r21, r31, r32);
        let v2 = tvn_cdf([b[1], b[0], b[2]], r21, r32, r31);
        let v3 = tvn_cdf([b[2], b[1], b[0]], r32, r31, r21);
        assert_abs_diff_eq!(v1, v2, epsilon = 1e-11);
        assert_abs_diff_eq!(v1, v3, epsilon = 1e-11);
    }
}
