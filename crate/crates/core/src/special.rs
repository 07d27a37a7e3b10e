//! Scalar special functions: binary entropy, the error function family and
//! the standard normal CDF.
//!
//! `erf`/`erfc` are the piecewise rational approximations from FreeBSD msun
//! (via the `libm` crate), accurate to about one ulp over the whole real line,
//! including the deep `erfc` tail where the security parameters live.
//! The inverses are computed here: a single-precision rational seed refined
//! by Newton steps on `ln erfc`, which keeps full relative accuracy for
//! arguments as small as `1e-300`.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

const FRAC_2_SQRT_PI: f64 = std::f64::consts::FRAC_2_SQRT_PI;

/// A real number in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Probability(f64);

impl Probability {
    pub fn new(value: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&value) {
            Ok(Self(value))
        } else {
            domain(format!("probability {value} outside [0, 1]"))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Probability {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        Self::new(value)
    }
}

impl From<Probability> for f64 {
    fn from(p: Probability) -> f64 {
        p.0
    }
}

/// Binary entropy in bits, `-p log2 p - (1-p) log2 (1-p)`.
///
/// The endpoints evaluate to 0 by continuity.
pub fn binary_entropy(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return domain(format!("binary entropy argument {p} outside [0, 1]"));
    }
    Ok(entropy(p))
}

/// Unchecked binary entropy; callers guarantee `p` in `[0, 1]`.
pub(crate) fn entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    let q = 1.0 - p;
    let h = -p * p.log2() - q * q.log2();
    h.min(1.0)
}

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}

pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// Standard normal cumulative distribution function.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Inverse of [`erf`] on `(-1, 1)`.
pub fn erfinv(y: f64) -> Result<f64> {
    if !(y.abs() < 1.0) {
        return domain(format!("erfinv argument {y} outside (-1, 1)"));
    }
    if y == 0.0 {
        return Ok(0.0);
    }
    // erfinv(y) = erfcinv(1 - y); for small |y| the subtraction is exact
    // enough, near the endpoints 1 - |y| is exact by Sterbenz.
    let x = erfcinv_positive(1.0 - y.abs());
    Ok(x.copysign(y))
}

/// Inverse of [`erfc`] on `(0, 2)`.
///
/// Prefer this over `erfinv(1 - q)` when `q` is tiny: `1 - q` would round.
pub fn erfcinv(q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 2.0) {
        return domain(format!("erfcinv argument {q} outside (0, 2)"));
    }
    if q == 1.0 {
        return Ok(0.0);
    }
    if q > 1.0 {
        Ok(-erfcinv_positive(2.0 - q))
    } else {
        Ok(erfcinv_positive(q))
    }
}

/// `erfcinv` for `q` in `(0, 1]`, result `>= 0`.
fn erfcinv_positive(q: f64) -> f64 {
    if q >= 1.0 {
        return 0.0;
    }
    let mut x = seed_erfcinv(q);
    let target = q.ln();
    for _ in 0..64 {
        let c = erfc(x);
        if c <= 0.0 {
            // below the representable tail; step back toward the origin
            x *= 0.99;
            continue;
        }
        // Newton on g(x) = ln erfc(x) - ln q, g'(x) = -2/sqrt(pi) exp(-x^2) / erfc(x)
        let g = c.ln() - target;
        let dg = -FRAC_2_SQRT_PI * (-x * x).exp() / c;
        let step = g / dg;
        x -= step;
        if step.abs() <= 4.0 * f64::EPSILON * x.abs().max(1.0) {
            break;
        }
    }
    x
}

/// Single-precision seed (Giles, "Approximating the erfinv function") in the
/// body, the leading asymptotic term beyond its fitted range.
fn seed_erfcinv(q: f64) -> f64 {
    // erfinv(y) with y = 1 - q; (1 - y)(1 + y) = q (2 - q) without cancellation
    let y = 1.0 - q;
    let w = -(q * (2.0 - q)).ln();
    if w > 25.0 {
        // erfc(x) ~ exp(-x^2) / (x sqrt(pi))
        let t = -q.ln();
        let x0 = t.sqrt();
        return (t - (x0 * std::f64::consts::PI.sqrt()).ln()).sqrt();
    }
    let p = if w < 5.0 {
        let w = w - 2.5;
        [
            2.810_226_36e-08,
            3.432_739_39e-07,
            -3.523_387_7e-06,
            -4.391_506_54e-06,
            0.000_218_580_87,
            -0.001_253_725_03,
            -0.004_177_681_64,
            0.246_640_727,
            1.501_409_41,
        ]
        .iter()
        .fold(0.0, |acc, c| acc * w + c)
    } else {
        let w = w.sqrt() - 3.0;
        [
            -0.000_200_214_257,
            0.000_100_950_558,
            0.001_349_343_22,
            -0.003_673_428_44,
            0.005_739_507_73,
            -0.007_622_461_3,
            0.009_438_870_47,
            1.001_674_06,
            2.832_976_82,
        ]
        .iter()
        .fold(0.0, |acc, c| acc * w + c)
    };
    // for tiny q, y rounds to 1 and p * y is still the right seed
    (p * y).max(0.0)
}
