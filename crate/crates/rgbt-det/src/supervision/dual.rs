//! Forward-mode dual scalar with a 4-wide gradient, used to differentiate
//! the box-regression loss through the decode + complete-IoU chain exactly
//! (including the aspect-ratio coupling term).

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy)]
pub struct Dual4 {
    pub v: f64,
    pub d: [f64; 4],
}

impl Dual4 {
    pub fn constant(v: f64) -> Self {
        Dual4 { v, d: [0.0; 4] }
    }

    /// Seed variable `i` with unit derivative.
    pub fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; 4];
        d[i] = 1.0;
        Dual4 { v, d }
    }

    pub fn sigmoid(self) -> Self {
        let s = 1.0 / (1.0 + (-self.v).exp());
        let f = s * (1.0 - s);
        Dual4 {
            v: s,
            d: self.d.map(|d| d * f),
        }
    }

    pub fn atan(self) -> Self {
        let f = 1.0 / (1.0 + self.v * self.v);
        Dual4 {
            v: self.v.atan(),
            d: self.d.map(|d| d * f),
        }
    }

    pub fn sq(self) -> Self {
        self * self
    }

    pub fn max0(self) -> Self {
        if self.v > 0.0 {
            self
        } else {
            Dual4::constant(0.0)
        }
    }

    pub fn min(self, other: Self) -> Self {
        if self.v <= other.v {
            self
        } else {
            other
        }
    }

    pub fn max(self, other: Self) -> Self {
        if self.v >= other.v {
            self
        } else {
            other
        }
    }
}

impl Add for Dual4 {
    type Output = Dual4;
    fn add(self, o: Dual4) -> Dual4 {
        Dual4 {
            v: self.v + o.v,
            d: [
                self.d[0] + o.d[0],
                self.d[1] + o.d[1],
                self.d[2] + o.d[2],
                self.d[3] + o.d[3],
            ],
        }
    }
}

impl Sub for Dual4 {
    type Output = Dual4;
    fn sub(self, o: Dual4) -> Dual4 {
        Dual4 {
            v: self.v - o.v,
            d: [
                self.d[0] - o.d[0],
                self.d[1] - o.d[1],
                self.d[2] - o.d[2],
                self.d[3] - o.d[3],
            ],
        }
    }
}

impl Mul for Dual4 {
    type Output = Dual4;
    fn mul(self, o: Dual4) -> Dual4 {
        Dual4 {
            v: self.v * o.v,
            d: [
                self.d[0] * o.v + self.v * o.d[0],
                self.d[1] * o.v + self.v * o.d[1],
                self.d[2] * o.v + self.v * o.d[2],
                self.d[3] * o.v + self.v * o.d[3],
            ],
        }
    }
}

impl Div for Dual4 {
    type Output = Dual4;
    fn div(self, o: Dual4) -> Dual4 {
        let inv = 1.0 / o.v;
        let v = self.v * inv;
        Dual4 {
            v,
            d: [
                (self.d[0] - v * o.d[0]) * inv,
                (self.d[1] - v * o.d[1]) * inv,
                (self.d[2] - v * o.d[2]) * inv,
                (self.d[3] - v * o.d[3]) * inv,
            ],
        }
    }
}

impl Neg for Dual4 {
    type Output = Dual4;
    fn neg(self) -> Dual4 {
        Dual4 {
            v: -self.v,
            d: self.d.map(|d| -d),
        }
    }
}

impl Mul<f64> for Dual4 {
    type Output = Dual4;
    fn mul(self, k: f64) -> Dual4 {
        Dual4 {
            v: self.v * k,
            d: self.d.map(|d| d * k),
        }
    }
}

impl Add<f64> for Dual4 {
    type Output = Dual4;
    fn add(self, k: f64) -> Dual4 {
        Dual4 {
            v: self.v + k,
            d: self.d,
        }
    }
}
