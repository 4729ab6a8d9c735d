//! Crate-internal complex scalar, just enough for channel synthesis and the
//! inverse DFT: interleaved (re, im) storage everywhere else stays plain
//! `f64` slices, and hot loops use the unit-rotation recurrence
//! `e^{j k theta} = (e^{j theta})^k` instead of per-element sin/cos.

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Cpx {
    pub re: f64,
    pub im: f64,
}

impl Cpx {
    pub const ZERO: Cpx = Cpx { re: 0.0, im: 0.0 };

    pub fn new(re: f64, im: f64) -> Self {
        Cpx { re, im }
    }

    /// `e^{j theta}`.
    pub fn cis(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Cpx { re: c, im: s }
    }

    pub fn mul(self, o: Cpx) -> Cpx {
        Cpx { re: self.re * o.re - self.im * o.im, im: self.re * o.im + self.im * o.re }
    }

    pub fn add(self, o: Cpx) -> Cpx {
        Cpx { re: self.re + o.re, im: self.im + o.im }
    }

    #[cfg(test)]
    pub fn scale(self, s: f64) -> Cpx {
        Cpx { re: s * self.re, im: s * self.im }
    }

    #[cfg(test)]
    pub fn abs(self) -> f64 {
        self.re.hypot(self.im)
    }
}
