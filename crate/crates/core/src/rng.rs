//! Deterministic splittable random streams.
//!
//! Each [`Stream`] is an independent pseudo-random sequence derived from a
//! `(seed, stream id)` pair with splitmix64 output mixing. Streams for
//! different ids never share state, so per-sample streams can be generated
//! in parallel and the results do not depend on worker count.

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Counter-based random stream: `(seed, id)` fixes the whole sequence.
#[derive(Debug, Clone)]
pub struct Stream {
    base: u64,
    counter: u64,
    /// Cached second Box-Muller variate.
    spare_normal: Option<f64>,
}

impl Stream {
    pub fn new(seed: u64, id: u64) -> Self {
        let base = mix64(seed ^ mix64(id.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(1)));
        Self {
            base,
            counter: 0,
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(
            self.base
                .wrapping_add(self.counter.wrapping_mul(0x9e3779b97f4a7c15)),
        )
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Uniform in `(0, 1]`, safe to pass to `ln`.
    pub fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Poisson count with the given mean, by Knuth's product method.
    ///
    /// Intended for the per-step means that arise on integration grids
    /// (mean up to a few tens); cost grows linearly with the mean.
    pub fn poisson(&mut self, mean: f64) -> u64 {
        assert!(mean >= 0.0 && mean.is_finite());
        if mean == 0.0 {
            return 0;
        }
        let limit = (-mean).exp();
        let mut k = 0u64;
        let mut product = 1.0;
        loop {
            product *= self.uniform_open();
            if product <= limit {
                return k;
            }
            k += 1;
        }
    }
}
