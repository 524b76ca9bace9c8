//! Associative, commutative binary operators used in place of multiplication
//! in generalized outer products.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Xi {
    /// `x * y`, unit 1.
    #[serde(rename = "product")]
    Product,
    /// `max(x, y, 0)`, unit 0.
    #[serde(rename = "rect_max")]
    RectMax,
    /// `ln(e^x + e^y)`, unit `-inf`.
    #[serde(rename = "logsumexp")]
    LogSumExp,
    /// `x + y`, unit 0.
    #[serde(rename = "sum")]
    Sum,
    /// `sqrt(x^2 + y^2)`, unit 0.
    #[serde(rename = "l2")]
    L2,
}

impl Xi {
    pub const ALL: [Xi; 5] = [Xi::Product, Xi::RectMax, Xi::LogSumExp, Xi::Sum, Xi::L2];

    pub fn id(self) -> &'static str {
        match self {
            Xi::Product => "product",
            Xi::RectMax => "rect_max",
            Xi::LogSumExp => "logsumexp",
            Xi::Sum => "sum",
            Xi::L2 => "l2",
        }
    }

    #[inline]
    pub fn apply2(self, x: f64, y: f64) -> f64 {
        match self {
            Xi::Product => x * y,
            Xi::RectMax => rect_max(x, y),
            Xi::LogSumExp => logsumexp(x, y),
            Xi::Sum => x + y,
            Xi::L2 => x.hypot(y),
        }
    }

    /// Left fold of `apply2` over a non-empty operand list.
    pub fn apply(self, xs: &[f64]) -> Result<f64> {
        let (&first, rest) = xs.split_first().ok_or_else(|| invalid!("xi needs at least one operand"))?;
        Ok(rest.iter().fold(first, |acc, &x| self.apply2(acc, x)))
    }

    /// The element `u` with `xi(x, y, u) = xi(x, y)`.
    pub fn unit(self) -> f64 {
        match self {
            Xi::Product => 1.0,
            Xi::LogSumExp => f64::NEG_INFINITY,
            Xi::RectMax | Xi::Sum | Xi::L2 => 0.0,
        }
    }

    /// `(d xi / dx, d xi / dy)`; at kinks a fixed element of the
    /// subdifferential is returned:
    /// - `rect_max`: ties `x = y > 0` credit `x`; `(0, 0)` when `x, y <= 0`;
    /// - `l2`: `(0, 0)` at the origin;
    /// - `logsumexp`: `(1/2, 1/2)` at `(-inf, -inf)`.
    pub fn subgradient(self, x: f64, y: f64) -> (f64, f64) {
        match self {
            Xi::Product => (y, x),
            Xi::Sum => (1.0, 1.0),
            Xi::RectMax => {
                if x <= 0.0 && y <= 0.0 {
                    (0.0, 0.0)
                } else if x >= y {
                    (1.0, 0.0)
                } else {
                    (0.0, 1.0)
                }
            }
            Xi::L2 => {
                let r = x.hypot(y);
                if r == 0.0 {
                    (0.0, 0.0)
                } else {
                    (x / r, y / r)
                }
            }
            Xi::LogSumExp => {
                let z = logsumexp(x, y);
                if z == f64::NEG_INFINITY {
                    (0.5, 0.5)
                } else {
                    ((x - z).exp(), (y - z).exp())
                }
            }
        }
    }

    /// Distance of `(x, y)` from the set where `xi` is not differentiable;
    /// infinite for smooth operators.
    pub fn kink_distance(self, x: f64, y: f64) -> f64 {
        match self {
            Xi::RectMax => {
                // half the gap between the two largest of {x, y, 0}
                let mut v = [x, y, 0.0];
                v.sort_by(|a, b| b.total_cmp(a));
                (v[0] - v[1]) / 2.0
            }
            Xi::L2 => x.hypot(y),
            Xi::Product | Xi::Sum | Xi::LogSumExp => f64::INFINITY,
        }
    }
}

#[inline]
fn rect_max(x: f64, y: f64) -> f64 {
    // three-way max in one step
    let m = if x >= y { x } else { y };
    if m >= 0.0 {
        m
    } else {
        0.0
    }
}

#[inline]
fn logsumexp(x: f64, y: f64) -> f64 {
    let (hi, lo) = if x >= y { (x, y) } else { (y, x) };
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if hi == f64::INFINITY {
        return f64::INFINITY;
    }
    hi + (lo - hi).exp().ln_1p()
}

impl fmt::Display for Xi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Xi {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Xi::ALL
            .into_iter()
            .find(|xi| xi.id() == s)
            .ok_or_else(|| invalid!("unknown xi `{s}` (expected product|rect_max|logsumexp|sum|l2)"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn apply_examples() {
        assert_eq!(Xi::Product.apply(&[2.0, 3.0, 4.0]).unwrap(), 24.0);
        assert_eq!(Xi::RectMax.apply(&[-1.0, -2.0]).unwrap(), 0.0);
        assert!((Xi::LogSumExp.apply(&[0.0, 0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(Xi::Sum.apply(&[]).is_err());
    }

    #[test]
    fn units() {
        assert_eq!(Xi::Product.unit(), 1.0);
        assert_eq!(Xi::RectMax.unit(), 0.0);
        assert_eq!(Xi::Sum.unit(), 0.0);
        assert_eq!(Xi::L2.unit(), 0.0);
        assert_eq!(Xi::LogSumExp.unit(), f64::NEG_INFINITY);
        assert_eq!(Xi::LogSumExp.apply2(f64::NEG_INFINITY, f64::NEG_INFINITY), f64::NEG_INFINITY);
        assert_eq!(Xi::LogSumExp.apply2(3.5, f64::NEG_INFINITY), 3.5);
    }

    #[test]
    fn subgradient_examples() {
        assert_eq!(Xi::Product.subgradient(2.0, 3.0), (3.0, 2.0));
        assert_eq!(Xi::RectMax.subgradient(5.0, 1.0), (1.0, 0.0));
        let (a, b) = Xi::L2.subgradient(3.0, 4.0);
        assert!((a - 0.6).abs() < 1e-15 && (b - 0.8).abs() < 1e-15);
        // tie-breaking conventions
        assert_eq!(Xi::RectMax.subgradient(2.0, 2.0), (1.0, 0.0));
        assert_eq!(Xi::RectMax.subgradient(-1.0, -3.0), (0.0, 0.0));
        assert_eq!(Xi::L2.subgradient(0.0, 0.0), (0.0, 0.0));
        assert_eq!(Xi::LogSumExp.subgradient(1.0, f64::NEG_INFINITY), (1.0, 0.0));
    }

    #[test]
    fn ids_roundtrip() {
        for xi in Xi::ALL {
            assert_eq!(xi.id().parse::<Xi>().unwrap(), xi);
            assert_eq!(serde_json::to_string(&xi).unwrap(), format!("\"{}\"", xi.id()));
        }
        assert!("relu".parse::<Xi>().is_err());
    }

    /// Dyadic rationals with few significant bits: sums and products of three
    /// of them are exact in f64, so exact associativity is a fair test.
    fn dyadic(rng: &mut ChaCha8Rng) -> f64 {
        rng.gen_range(-80i32..=80) as f64 / 8.0
    }

    #[test]
    fn associativity_and_commutativity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for xi in Xi::ALL {
            let exact = matches!(xi, Xi::Product | Xi::RectMax | Xi::Sum);
            for _ in 0..10_000 {
                let (x, y, z) = if exact {
                    (dyadic(&mut rng), dyadic(&mut rng), dyadic(&mut rng))
                } else {
                    (rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0))
                };
                let l = xi.apply2(xi.apply2(x, y), z);
                let r = xi.apply2(x, xi.apply2(y, z));
                assert_eq!(xi.apply2(x, y), xi.apply2(y, x), "{xi} commutativity");
                if exact {
                    assert_eq!(l, r, "{xi} at ({x}, {y}, {z})");
                } else {
                    assert!((l - r).abs() <= 1e-12, "{xi} at ({x}, {y}, {z}): {l} vs {r}");
                }
            }
        }
    }

    #[test]
    fn associativity_on_real_triples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for xi in [Xi::Product, Xi::RectMax, Xi::Sum] {
            for _ in 0..10_000 {
                let (x, y, z): (f64, f64, f64) =
                    (rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0));
                let l = xi.apply2(xi.apply2(x, y), z);
                let r = xi.apply2(x, xi.apply2(y, z));
                assert!((l - r).abs() <= 1e-12 * l.abs().max(1.0));
            }
        }
    }

    #[test]
    fn unit_law_ternary() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for xi in Xi::ALL {
            for _ in 0..10_000 {
                let (x, y) = (rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0));
                assert_eq!(xi.apply(&[x, y, xi.unit()]).unwrap(), xi.apply2(x, y), "{xi}");
            }
        }
    }

    #[test]
    fn apply_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for xi in Xi::ALL {
            for _ in 0..500 {
                let n = rng.gen_range(1..8);
                let xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let mut ys = xs.clone();
                for k in (1..n).rev() {
                    ys.swap(k, rng.gen_range(0..=k));
                }
                let (a, b) = (xi.apply(&xs).unwrap(), xi.apply(&ys).unwrap());
                assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{xi}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn subgradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for xi in Xi::ALL {
            let mut checked = 0;
            while checked < 2_000 {
                let (x, y) = (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
                if xi.kink_distance(x, y) < 1e-3 {
                    continue;
                }
                let (gx, gy) = xi.subgradient(x, y);
                let fx = (xi.apply2(x + h, y) - xi.apply2(x - h, y)) / (2.0 * h);
                let fy = (xi.apply2(x, y + h) - xi.apply2(x, y - h)) / (2.0 * h);
                for (g, f) in [(gx, fx), (gy, fy)] {
                    let rel = (g - f).abs() / g.abs().max(f.abs()).max(1e-3);
                    assert!(rel < 1e-4, "{xi} at ({x}, {y}): {g} vs {f}");
                }
                checked += 1;
            }
        }
    }
}
