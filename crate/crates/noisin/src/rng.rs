//! Deterministic, splittable random number generation.
//!
//! The generator is PCG-XSH-RR 64/32 ("pcg32"): 64-bit LCG state with the
//! multiplier 6364136223846793005, a per-stream odd increment, and an
//! xorshift-high + random-rotate output function. Identical seed/stream plus
//! an identical call sequence reproduce the identical output stream.
//!
//! Every sampler documents its exact transform so a stream can be reproduced
//! from scratch:
//!
//! * `next_u64` — two `next_u32` draws, first draw = high word.
//! * `uniform` — `(next_u64() >> 11) * 2^-53`, in `[0, 1)`.
//! * `uniform_open` — `((next_u64() >> 11) + 0.5) * 2^-53`, in `(0, 1)`,
//!   used by every inverse-CDF transform below.
//! * `standard_normal` — Wichura's AS 241 rational approximation of the
//!   normal inverse CDF (about 1e-15 absolute accuracy) on one
//!   `uniform_open` draw.
//! * `gumbel_standard` — `-ln(-ln u)` on one `uniform_open` draw.
//! * `laplace_standard` — sign/log inversion on one `uniform_open` draw.
//! * `logistic_standard` — `ln(u / (1-u))` on one `uniform_open` draw.
//! * `gamma` — Marsaglia–Tsang squeeze for shape >= 1 (one normal plus one
//!   uniform per proposal, retried until accepted); for shape < 1 a
//!   Gamma(shape+1) draw boosted by `u^(1/shape)`.
//! * `beta` — ratio of two unit-scale gamma draws.
//! * `chi_square` — Gamma(k/2, scale 2).

const PCG_MULT: u64 = 6364136223846793005;

#[derive(Clone, Debug)]
pub struct Pcg32 {
    state: u64,
    inc: u64,
}

impl Pcg32 {
    /// Seeds with the reference pcg32 initialization: the stream id selects
    /// the increment, the seed selects the starting point within it.
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = Pcg32 { state: 0, inc: (stream << 1) | 1 };
        rng.next_u32();
        rng.state = rng.state.wrapping_add(seed);
        rng.next_u32();
        rng
    }

    pub fn seeded(seed: u64) -> Self {
        Pcg32::new(seed, 0)
    }

    pub fn next_u32(&mut self) -> u32 {
        let old = self.state;
        self.state = old.wrapping_mul(PCG_MULT).wrapping_add(self.inc);
        let xorshifted = (((old >> 18) ^ old) >> 27) as u32;
        let rot = (old >> 59) as u32;
        xorshifted.rotate_right(rot)
    }

    pub fn next_u64(&mut self) -> u64 {
        let hi = self.next_u32() as u64;
        let lo = self.next_u32() as u64;
        (hi << 32) | lo
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in the open interval (0, 1); safe for log/inverse-CDF use.
    pub fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Derives an independent child generator. The child's seed and stream
    /// are splitmix64 finalizations of two successive parent draws, so
    /// splitting is itself part of the reproducible stream.
    pub fn split(&mut self) -> Pcg32 {
        let seed = splitmix64(self.next_u64());
        let stream = splitmix64(self.next_u64());
        Pcg32::new(seed, stream)
    }

    /// Standard normal via the AS 241 inverse CDF.
    pub fn standard_normal(&mut self) -> f64 {
        normal_inverse_cdf(self.uniform_open())
    }

    /// Gamma(shape, scale). Marsaglia–Tsang for shape >= 1; shape-boost for
    /// shape < 1. Draw count per sample varies but is a deterministic
    /// function of the stream.
    pub fn gamma(&mut self, shape: f64, scale: f64) -> f64 {
        debug_assert!(shape > 0.0 && scale > 0.0);
        if shape < 1.0 {
            let g = self.gamma(shape + 1.0, 1.0);
            let u = self.uniform_open();
            return g * u.powf(1.0 / shape) * scale;
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.standard_normal();
            let t = 1.0 + c * x;
            if t <= 0.0 {
                continue;
            }
            let v = t * t * t;
            let u = self.uniform_open();
            let x2 = x * x;
            if u < 1.0 - 0.0331 * x2 * x2 {
                return d * v * scale;
            }
            if u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
                return d * v * scale;
            }
        }
    }

    /// Beta(a, b) as Ga/(Ga+Gb) with unit-scale gamma draws (a first).
    pub fn beta(&mut self, a: f64, b: f64) -> f64 {
        let x = self.gamma(a, 1.0);
        let y = self.gamma(b, 1.0);
        x / (x + y)
    }

    /// Chi-square with k degrees of freedom (k need not be an integer).
    pub fn chi_square(&mut self, k: f64) -> f64 {
        self.gamma(0.5 * k, 2.0)
    }

    /// Standard Gumbel(0, 1): -ln(-ln u).
    pub fn gumbel_standard(&mut self) -> f64 {
        -(-self.uniform_open().ln()).ln()
    }

    /// Standard Laplace(0, 1): ln(2u) for u < 1/2, -ln(2(1-u)) otherwise.
    pub fn laplace_standard(&mut self) -> f64 {
        let u = self.uniform_open();
        if u < 0.5 {
            (2.0 * u).ln()
        } else {
            -(2.0 * (1.0 - u)).ln()
        }
    }

    /// Standard Logistic(0, 1): ln(u/(1-u)).
    pub fn logistic_standard(&mut self) -> f64 {
        let u = self.uniform_open();
        (u / (1.0 - u)).ln()
    }
}

/// splitmix64 finalizer; used only to derive child seeds.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Normal inverse CDF, algorithm AS 241 (PPND16). Maximum absolute error on
/// (0,1) is about 1e-15.
pub fn normal_inverse_cdf(p: f64) -> f64 {
    debug_assert!(p > 0.0 && p < 1.0);
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q * poly(&A_CENTRAL, r) / poly(&B_CENTRAL, r);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let x = if r <= 5.0 {
        let r = r - 1.6;
        poly(&C_TAIL, r) / poly(&D_TAIL, r)
    } else {
        let r = r - 5.0;
        poly(&E_FAR_TAIL, r) / poly(&F_FAR_TAIL, r)
    };
    if q < 0.0 {
        -x
    } else {
        x
    }
}

#[inline]
fn poly(coeffs: &[f64], x: f64) -> f64 {
    let mut acc = 0.0;
    for &c in coeffs.iter().rev() {
        acc = acc * x + c;
    }
    acc
}

const A_CENTRAL: [f64; 8] = [
    3.3871328727963666080e0,
    1.3314166789178437745e2,
    1.9715909503065514427e3,
    1.3731693765509461125e4,
    4.5921953931549871457e4,
    6.7265770927008700853e4,
    3.3430575583588128105e4,
    2.5090809287301226727e3,
];
const B_CENTRAL: [f64; 8] = [
    1.0,
    4.2313330701600911252e1,
    6.8718700749205790830e2,
    5.3941960214247511077e3,
    2.1213794301586595867e4,
    3.9307895800092710610e4,
    2.8729085735721942674e4,
    5.2264952788528545610e3,
];
const C_TAIL: [f64; 8] = [
    1.42343711074968357734e0,
    4.63033784615654529590e0,
    5.76949722146069140550e0,
    3.64784832476320460504e0,
    1.27045825245236838258e0,
    2.41780725177450611770e-1,
    2.27238449892691845833e-2,
    7.74545014278341407640e-4,
];
const D_TAIL: [f64; 8] = [
    1.0,
    2.05319162663775882187e0,
    1.67638483018380384940e0,
    6.89767334985100004550e-1,
    1.48103976427480074590e-1,
    1.51986665636164571966e-2,
    5.47593808499534494600e-4,
    1.05075007164441684324e-9,
];
const E_FAR_TAIL: [f64; 8] = [
    6.65790464350110377720e0,
    5.46378491116411436990e0,
    1.78482653991729133580e0,
    2.96560571828504891230e-1,
    2.65321895265761230930e-2,
    1.24266094738807843860e-3,
    2.71155556874348757815e-5,
    2.01033439929228813265e-7,
];
const F_FAR_TAIL: [f64; 8] = [
    1.0,
    5.99832206555887937690e-1,
    1.36929880922735805310e-1,
    1.48753612908506148525e-2,
    7.86869131145613259100e-4,
    1.84631831751005468180e-5,
    1.42151175831644588870e-7,
    2.04426310338993978564e-15,
];
