//! First-order forward-mode jets: a value with its gradient over a fixed
//! set of input variables. Used for the small closed-form pieces
//! (trigonometric feature moments, tip kinematics, output composition)
//! whose Jacobians are chained with hand-derived ones.

use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::DVector;

#[derive(Clone, Debug, PartialEq)]
pub struct Jet {
    pub v: f64,
    pub g: DVector<f64>,
}

impl Jet {
    pub fn constant(v: f64, n: usize) -> Self {
        Jet {
            v,
            g: DVector::zeros(n),
        }
    }

    pub fn var(v: f64, index: usize, n: usize) -> Self {
        let mut g = DVector::zeros(n);
        g[index] = 1.0;
        Jet { v, g }
    }

    pub fn nvars(&self) -> usize {
        self.g.len()
    }

    pub fn scale(&self, s: f64) -> Jet {
        Jet {
            v: self.v * s,
            g: &self.g * s,
        }
    }

    pub fn sin(&self) -> Jet {
        Jet {
            v: self.v.sin(),
            g: &self.g * self.v.cos(),
        }
    }

    pub fn cos(&self) -> Jet {
        Jet {
            v: self.v.cos(),
            g: &self.g * (-self.v.sin()),
        }
    }

    pub fn exp(&self) -> Jet {
        let e = self.v.exp();
        Jet {
            v: e,
            g: &self.g * e,
        }
    }

    /// `self + s * other`, in place.
    pub fn axpy(&mut self, s: f64, other: &Jet) {
        self.v += s * other.v;
        self.g.axpy(s, &other.g, 1.0);
    }
}

impl Add for &Jet {
    type Output = Jet;
    fn add(self, o: &Jet) -> Jet {
        Jet {
            v: self.v + o.v,
            g: &self.g + &o.g,
        }
    }
}

impl Sub for &Jet {
    type Output = Jet;
    fn sub(self, o: &Jet) -> Jet {
        Jet {
            v: self.v - o.v,
            g: &self.g - &o.g,
        }
    }
}

impl Mul for &Jet {
    type Output = Jet;
    fn mul(self, o: &Jet) -> Jet {
        Jet {
            v: self.v * o.v,
            g: &self.g * o.v + &o.g * self.v,
        }
    }
}

impl Neg for &Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        Jet {
            v: -self.v,
            g: -&self.g,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_and_chain_rules() {
        let x = Jet::var(0.3, 0, 2);
        let y = Jet::var(-1.2, 1, 2);
        let f = &(&x * &y).sin() + &x.exp();
        let dfdx = (0.3f64 * -1.2).cos() * -1.2 + 0.3f64.exp();
        let dfdy = (0.3f64 * -1.2).cos() * 0.3;
        assert!((f.g[0] - dfdx).abs() < 1e-14);
        assert!((f.g[1] - dfdy).abs() < 1e-14);
    }
}
