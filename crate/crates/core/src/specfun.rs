//! Bessel functions of the first kind for integer orders.
//!
//! The whole sequence `J_0(x) ..= J_n(x)` is produced by one downward
//! (Miller) recurrence started well above both `n` and `x`, then normalized
//! with `J_0 + 2 sum J_2k = 1`. Going downward the wanted solution is the
//! dominant one, so the sweep is stable through the turning point `n ~ x`
//! and neutrally stable below it.

use crate::error::{Error, Result};

/// Rescale threshold for the unnormalized downward sweep.
const RESCALE_ABOVE: f64 = 1e250;

/// `J_0(x) ..= J_max_order(x)` for one argument.
#[derive(Debug, Clone, PartialEq)]
pub struct BesselSequence {
    x: f64,
    values: Vec<f64>,
}

impl BesselSequence {
    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn max_order(&self) -> usize {
        self.values.len() - 1
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, n: usize) -> f64 {
        self.values[n]
    }

    /// `J'_n(x)` from the neighbouring orders. Valid for `n < max_order`.
    pub fn derivative(&self, n: usize) -> f64 {
        if n == 0 {
            -self.values[1]
        } else {
            0.5 * (self.values[n - 1] - self.values[n + 1])
        }
    }
}

fn start_order(x: f64, max_order: usize) -> usize {
    let base = (max_order as f64).max(x.ceil());
    let n = base + (160.0 * base.max(1.0)).sqrt() + 40.0 * x.cbrt() + 20.0;
    let n = n.ceil() as usize;
    n + n % 2
}

pub fn bessel_j_sequence(x: f64, max_order: usize) -> Result<BesselSequence> {
    if !x.is_finite() || x < 0.0 {
        return Err(Error::Domain(format!(
            "Bessel argument must be finite and non-negative, got {x}"
        )));
    }
    let mut values = vec![0.0; max_order + 1];
    if x == 0.0 {
        values[0] = 1.0;
        return Ok(BesselSequence { x, values });
    }

    let top = start_order(x, max_order);
    let two_over_x = 2.0 / x;
    let mut above = 0.0_f64; // J_{n+1}
    let mut current = 1e-30_f64; // J_n, arbitrary seed
    let mut norm = 0.0_f64;
    if top <= max_order {
        values[top] = current;
    }
    if top.is_multiple_of(2) {
        norm += 2.0 * current;
    }

    for n in (1..=top).rev() {
        let below = n as f64 * two_over_x * current - above;
        above = current;
        current = below;
        let order = n - 1;
        if order <= max_order {
            values[order] = current;
        }
        if order % 2 == 0 {
            norm += if order == 0 { current } else { 2.0 * current };
        }
        if current.abs() > RESCALE_ABOVE {
            let s = 1.0 / RESCALE_ABOVE;
            current *= s;
            above *= s;
            norm *= s;
            for v in values.iter_mut().skip(order) {
                *v *= s;
            }
        }
    }

    let scale = 1.0 / norm;
    for v in &mut values {
        *v *= scale;
        if v.abs() < f64::MIN_POSITIVE {
            *v = 0.0;
        }
    }
    Ok(BesselSequence { x, values })
}

/// `J'_n(x) = (J_{n-1}(x) - J_{n+1}(x)) / 2`, with `J'_0 = -J_1`.
pub fn bessel_j_prime(n: usize, x: f64) -> Result<f64> {
    if x == 0.0 {
        return Ok(if n == 1 { 0.5 } else { 0.0 });
    }
    Ok(bessel_j_sequence(x, n + 1)?.derivative(n))
}

#[cfg(test)]
pub(crate) mod oracle {
    use std::f64::consts::PI;

    /// `(1/pi) int_0^pi cos(n t - x sin t) dt` by the trapezoid rule. The
    /// integrand is even about both endpoints, so the rule is spectrally
    /// accurate once the node count resolves the oscillation.
    pub fn bessel_j_quadrature(n: usize, x: f64) -> f64 {
        let nodes = (20.0 * (n as f64 + x)).ceil().max(64.0) as usize;
        let h = PI / nodes as f64;
        let f = |t: f64| (n as f64 * t - x * t.sin()).cos();
        let mut sum = 0.5 * (f(0.0) + f(PI));
        for i in 1..nodes {
            sum += f(i as f64 * h);
        }
        sum * h / PI
    }
}
