//! Double-double arithmetic: an unevaluated sum of two f64s giving roughly
//! 32 significant decimal digits. Enough headroom to serve as the
//! high-precision reference for every f64 computation under test.
//!
//! Error-free transforms follow Dekker/Knuth; `exp` reduces into
//! `[-ln2/2, ln2/2]` and sums the Taylor series; `ln` refines the f64
//! estimate with two Newton steps through `exp`.

use std::ops::{Add, Div, Mul, Neg, Sub};

/// ln(2) split into high and low parts.
const LN2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

/// Exact sum: `a + b = s + e` with `s = fl(a+b)`.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let v = s - a;
    let e = (a - (s - v)) + (b - v);
    (s, e)
}

/// Exact sum assuming `|a| >= |b|`.
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let e = b - (s - a);
    (s, e)
}

/// Exact product via fused multiply-add: `a * b = p + e`.
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    let e = a.mul_add(b, -p);
    (p, e)
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn from_f64(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    pub fn new(hi: f64, lo: f64) -> Dd {
        let (s, e) = quick_two_sum(hi, lo);
        Dd { hi: s, lo: e }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    /// Multiply by 2^k (exact).
    fn ldexp(self, k: i32) -> Dd {
        let f = (2.0f64).powi(k);
        Dd {
            hi: self.hi * f,
            lo: self.lo * f,
        }
    }

    /// e^self via range reduction `self = m·ln2 + r` and a Taylor series on
    /// `r`.
    pub fn exp(self) -> Dd {
        if self.hi.abs() > 700.0 {
            // Out of double range; saturate like f64 would.
            return Dd::from_f64(self.hi.exp());
        }
        let m = (self.hi / LN2.hi).round();
        let r = self - LN2 * Dd::from_f64(m);
        // Taylor: sum r^k / k! until terms vanish at dd precision.
        let mut sum = Dd::ONE + r;
        let mut term = r;
        let mut k = 2.0;
        loop {
            term = term * r / Dd::from_f64(k);
            sum = sum + term;
            if term.hi.abs() <= sum.hi.abs() * 1e-35 || k > 60.0 {
                break;
            }
            k += 1.0;
        }
        sum.ldexp(m as i32)
    }

    /// Natural log via Newton refinement of the f64 estimate:
    /// `y <- y + x·e^(-y) - 1`, twice.
    pub fn ln(self) -> Dd {
        assert!(self.hi > 0.0, "ln of non-positive double-double");
        let mut y = Dd::from_f64(self.hi.ln());
        for _ in 0..2 {
            let correction = self * (-y).exp() - Dd::ONE;
            y = y + correction;
        }
        y
    }
}

impl Add for Dd {
    type Output = Dd;

    fn add(self, other: Dd) -> Dd {
        let (s1, s2) = two_sum(self.hi, other.hi);
        let (t1, t2) = two_sum(self.lo, other.lo);
        let (s1, s2) = quick_two_sum(s1, s2 + t1);
        let (hi, lo) = quick_two_sum(s1, s2 + t2);
        Dd { hi, lo }
    }
}

impl Neg for Dd {
    type Output = Dd;

    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;

    fn sub(self, other: Dd) -> Dd {
        self + (-other)
    }
}

impl Mul for Dd {
    type Output = Dd;

    fn mul(self, other: Dd) -> Dd {
        let (p1, p2) = two_prod(self.hi, other.hi);
        let p2 = p2 + self.hi * other.lo + self.lo * other.hi;
        let (hi, lo) = quick_two_sum(p1, p2);
        Dd { hi, lo }
    }
}

impl Div for Dd {
    type Output = Dd;

    fn div(self, other: Dd) -> Dd {
        let q1 = self.hi / other.hi;
        let r = self - other * Dd::from_f64(q1);
        let q2 = r.hi / other.hi;
        let r = r - other * Dd::from_f64(q2);
        let q3 = r.hi / other.hi;
        let (s, e) = quick_two_sum(q1, q2);
        Dd::new(s, e + q3)
    }
}
