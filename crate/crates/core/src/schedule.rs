//! Noise schedules and the variance-preserving forward process.
//!
//! `α(t)` is the fraction of signal variance kept at time `t ∈ [0, 1]`:
//!
//! | family   | α(t)                                   |
//! |----------|----------------------------------------|
//! | `tan-d`  | `1 / (1 + tan(tπ/2)² · d²)`            |
//! | `cosine` | `cos²(((t + s) / (1 + s)) · π/2)`      |
//! | `sqrt`   | `1 − √(t + s)`                         |
//!
//! `t` is clamped to `t_clip` first and the result to
//! `[ALPHA_EPS, 1 − ALPHA_EPS]`, so `α(0) ≈ 1` and `α(1) ≈ 0` up to the
//! clamp while `√(1 − α)` never vanishes.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use autograd::Tensor;

use crate::error::{Error, Result};

pub const ALPHA_EPS: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleFamily {
    Cosine,
    Sqrt,
    Tan,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub family: ScheduleFamily,
    /// Noise-rate parameter of the tan family.
    pub d: f64,
    /// Offset of the cosine and sqrt families.
    pub s: f64,
    pub t_min: f64,
    pub t_max: f64,
}

impl NoiseSchedule {
    pub fn tan(d: f64) -> Self {
        Self {
            family: ScheduleFamily::Tan,
            d,
            ..Self::cosine()
        }
    }

    pub fn cosine() -> Self {
        Self {
            family: ScheduleFamily::Cosine,
            d: 9.0,
            s: 1e-4,
            t_min: 1e-4,
            t_max: 1.0 - 1e-4,
        }
    }

    pub fn sqrt() -> Self {
        Self {
            family: ScheduleFamily::Sqrt,
            ..Self::cosine()
        }
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::OutOfRange(format!("timestep {t} outside [0, 1]")));
        }
        let t = t.clamp(self.t_min, self.t_max);
        let a = match self.family {
            ScheduleFamily::Tan => {
                let tan = (t * FRAC_PI_2).tan();
                1.0 / (1.0 + tan * tan * self.d * self.d)
            }
            ScheduleFamily::Cosine => {
                let c = ((t + self.s) / (1.0 + self.s) * FRAC_PI_2).cos();
                c * c
            }
            ScheduleFamily::Sqrt => 1.0 - (t + self.s).sqrt(),
        };
        Ok(a.clamp(ALPHA_EPS, 1.0 - ALPHA_EPS))
    }

    /// `z_t = √α_t · z₀ + √(1 − α_t) · ε`
    pub fn forward_sample(&self, z0: &Tensor, t: f64, eps: &Tensor) -> Result<Tensor> {
        z0.expect_same_shape(eps).map_err(|e| Error::Shape(e.to_string()))?;
        let a = self.alpha(t)?;
        let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
        Ok(z0.zip_map(eps, |z, e| sa * z + sn * e)?)
    }

    /// Forward process with one timestep per leading-axis slab of `z0`.
    pub fn forward_sample_batch(&self, z0: &Tensor, ts: &[f64], eps: &Tensor) -> Result<Tensor> {
        z0.expect_same_shape(eps).map_err(|e| Error::Shape(e.to_string()))?;
        let n = z0.shape()[0];
        if ts.len() != n {
            return Err(Error::Shape(format!("{} timesteps for batch of {n}", ts.len())));
        }
        let per = z0.numel() / n;
        let mut out = z0.clone();
        for (i, &t) in ts.iter().enumerate() {
            let a = self.alpha(t)?;
            let (sa, sn) = (a.sqrt(), (1.0 - a).sqrt());
            let range = i * per..(i + 1) * per;
            for ((o, z), e) in out.data_mut()[range.clone()]
                .iter_mut()
                .zip(&z0.data()[range.clone()])
                .zip(&eps.data()[range])
            {
                *o = sa * z + sn * e;
            }
        }
        Ok(out)
    }

    /// Rows `(t, √α_t, 1 − α_t)` over `grid`.
    pub fn report(&self, grid: &[f64]) -> Result<Vec<ScheduleRow>> {
        grid.iter()
            .map(|&t| {
                let a = self.alpha(t)?;
                Ok(ScheduleRow {
                    t,
                    sqrt_alpha: a.sqrt(),
                    noise_var: 1.0 - a,
                })
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleRow {
    pub t: f64,
    pub sqrt_alpha: f64,
    pub noise_var: f64,
}

/// `count` evenly spaced points covering `[0, 1]`.
pub fn uniform_grid(count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![0.0],
        _ => (0..count).map(|i| i as f64 / (count - 1) as f64).collect(),
    }
}

impl FromStr for NoiseSchedule {
    type Err = Error;

    /// Accepts `cosine`, `sqrt` and `tan-<d>` (e.g. `tan-9`).
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "cosine" => Ok(Self::cosine()),
            "sqrt" => Ok(Self::sqrt()),
            other => {
                let d = other
                    .strip_prefix("tan-")
                    .and_then(|d| d.parse::<f64>().ok())
                    .filter(|d| d.is_finite() && *d > 0.0)
                    .ok_or_else(|| Error::Config(format!("unknown schedule `{other}`")))?;
                Ok(Self::tan(d))
            }
        }
    }
}

impl fmt::Display for NoiseSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.family {
            ScheduleFamily::Cosine => write!(f, "cosine"),
            ScheduleFamily::Sqrt => write!(f, "sqrt"),
            ScheduleFamily::Tan => write!(f, "tan-{}", self.d),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tan9_midpoint() {
        let a = NoiseSchedule::tan(9.0).alpha(0.5).unwrap();
        assert!((a - 1.0 / 82.0).abs() < 1e-9);
    }

    #[test]
    fn endpoints_up_to_clamp() {
        for s in [NoiseSchedule::tan(9.0), NoiseSchedule::cosine(), NoiseSchedule::sqrt()] {
            assert!((s.alpha(0.0).unwrap() - 1.0).abs() <= 2.0 * ALPHA_EPS.max(0.01), "{s}");
            assert!(s.alpha(1.0).unwrap() <= ALPHA_EPS + 1e-12, "{s}");
        }
        let tan = NoiseSchedule::tan(3.0);
        assert!((tan.alpha(0.0).unwrap() - 1.0).abs() <= ALPHA_EPS);
    }

    #[test]
    fn out_of_range_t_is_rejected() {
        let s = NoiseSchedule::tan(9.0);
        assert!(s.alpha(-0.1).is_err());
        assert!(s.alpha(1.5).is_err());
    }

    #[test]
    fn parses_config_strings() {
        assert_eq!("tan-9".parse::<NoiseSchedule>().unwrap(), NoiseSchedule::tan(9.0));
        assert_eq!("tan-7.5".parse::<NoiseSchedule>().unwrap().d, 7.5);
        assert_eq!("cosine".parse::<NoiseSchedule>().unwrap().family, ScheduleFamily::Cosine);
        assert!("tan-0".parse::<NoiseSchedule>().is_err());
        assert!("linear".parse::<NoiseSchedule>().is_err());
        assert_eq!(NoiseSchedule::tan(9.0).to_string(), "tan-9");
    }

    #[test]
    fn zero_noise_scales_signal() {
        let s = NoiseSchedule::tan(9.0);
        let z0 = Tensor::from_fn(&[2, 3], |i| i as f64 - 2.0);
        let zt = s.forward_sample(&z0, 0.3, &Tensor::zeros(&[2, 3])).unwrap();
        let sa = s.alpha(0.3).unwrap().sqrt();
        for (a, b) in zt.data().iter().zip(z0.data()) {
            assert_eq!(*a, sa * b);
        }
        assert!(s.forward_sample(&z0, 0.3, &Tensor::zeros(&[3, 2])).is_err());
    }
}
