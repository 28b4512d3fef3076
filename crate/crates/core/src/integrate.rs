//! Classical fixed-step fourth-order Runge–Kutta.

/// Reusable stage buffers for integrating an `n`-dimensional system.
#[derive(Debug, Clone)]
pub struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    scratch: Vec<f64>,
}

impl Rk4 {
    pub fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            scratch: vec![0.0; n],
        }
    }

    /// Advances `y` from `t` to `t + dt` in place.
    ///
    /// `f(t, y, dy)` writes the derivative into `dy`.
    pub fn step<E, F>(&mut self, f: &mut F, t: f64, y: &mut [f64], dt: f64) -> Result<(), E>
    where
        F: FnMut(f64, &[f64], &mut [f64]) -> Result<(), E>,
    {
        let half = 0.5 * dt;
        f(t, y, &mut self.k1)?;
        axpy(&mut self.scratch, y, half, &self.k1);
        f(t + half, &self.scratch, &mut self.k2)?;
        axpy(&mut self.scratch, y, half, &self.k2);
        f(t + half, &self.scratch, &mut self.k3)?;
        axpy(&mut self.scratch, y, dt, &self.k3);
        f(t + dt, &self.scratch, &mut self.k4)?;
        let sixth = dt / 6.0;
        for (i, yi) in y.iter_mut().enumerate() {
            *yi += sixth * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
        Ok(())
    }
}

fn axpy(out: &mut [f64], y: &[f64], a: f64, x: &[f64]) {
    for ((o, yi), xi) in out.iter_mut().zip(y).zip(x) {
        *o = yi + a * xi;
    }
}
