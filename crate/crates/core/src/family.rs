//! Observation families: negative log-density and its first two derivatives
//! with respect to the linear predictor, deviance, and sampling.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Bernoulli, Distribution as _, Gamma, Normal, Poisson};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Distribution {
    Gaussian,
    Poisson,
    Bernoulli,
    Gamma,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Link {
    Identity,
    Log,
    Logit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Family {
    pub dist: Distribution,
    pub link: Link,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `y ln(y / μ)` with the `0 ln 0 = 0` convention.
fn ylogy(y: f64, mu: f64) -> f64 {
    if y == 0.0 {
        0.0
    } else {
        y * (y / mu).ln()
    }
}

impl Family {
    pub const GAUSSIAN: Family = Family {
        dist: Distribution::Gaussian,
        link: Link::Identity,
    };
    pub const POISSON: Family = Family {
        dist: Distribution::Poisson,
        link: Link::Log,
    };
    pub const BERNOULLI: Family = Family {
        dist: Distribution::Bernoulli,
        link: Link::Logit,
    };
    pub const GAMMA: Family = Family {
        dist: Distribution::Gamma,
        link: Link::Log,
    };

    pub fn new(dist: Distribution, link: Link) -> Result<Self> {
        use Distribution::*;
        use Link::*;
        match (dist, link) {
            (Gaussian, Identity) | (Gaussian, Log) | (Poisson, Log) | (Bernoulli, Logit) | (Gamma, Log) => {
                Ok(Self { dist, link })
            }
            _ => Err(Error::Parameter(format!("unsupported family {dist:?} with {link:?} link"))),
        }
    }

    /// Gaussian standard deviation or Gamma shape.
    pub fn has_dispersion(&self) -> bool {
        matches!(self.dist, Distribution::Gaussian | Distribution::Gamma)
    }

    pub fn inv_link(&self, eta: f64) -> f64 {
        match self.link {
            Link::Identity => eta,
            Link::Log => eta.exp(),
            Link::Logit => logistic(eta),
        }
    }

    /// `dμ/dη`.
    pub fn inv_link_derivative(&self, eta: f64) -> f64 {
        match self.link {
            Link::Identity => 1.0,
            Link::Log => eta.exp(),
            Link::Logit => {
                let p = logistic(eta);
                p * (1.0 - p)
            }
        }
    }

    pub fn link(&self, mu: f64) -> f64 {
        match self.link {
            Link::Identity => mu,
            Link::Log => mu.ln(),
            Link::Logit => (mu / (1.0 - mu)).ln(),
        }
    }

    pub fn check_response(&self, y: f64) -> Result<()> {
        let ok = y.is_finite()
            && match self.dist {
                Distribution::Gaussian => true,
                Distribution::Poisson => y >= 0.0 && y.fract() == 0.0,
                Distribution::Bernoulli => y == 0.0 || y == 1.0,
                Distribution::Gamma => y > 0.0,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::Data(format!("response {y} is invalid for {self}")))
        }
    }

    /// `-log f(y; η, dispersion)`.
    pub fn nll(&self, y: f64, eta: f64, disp: f64) -> f64 {
        self.nll_derivatives(y, eta, disp).0
    }

    /// Negative log-density and its first and second derivative in `η`.
    pub fn nll_derivatives(&self, y: f64, eta: f64, disp: f64) -> (f64, f64, f64) {
        match (self.dist, self.link) {
            (Distribution::Gaussian, Link::Identity) => {
                let v = disp * disp;
                let r = y - eta;
                (0.5 * (LN_2PI + v.ln()) + 0.5 * r * r / v, -r / v, 1.0 / v)
            }
            (Distribution::Gaussian, _) => {
                let v = disp * disp;
                let mu = eta.exp();
                let r = y - mu;
                (
                    0.5 * (LN_2PI + v.ln()) + 0.5 * r * r / v,
                    -r * mu / v,
                    mu * (2.0 * mu - y) / v,
                )
            }
            (Distribution::Poisson, _) => {
                let mu = eta.exp();
                (mu - y * eta + ln_gamma(y + 1.0), mu - y, mu)
            }
            (Distribution::Bernoulli, _) => {
                let p = logistic(eta);
                (softplus(eta) - y * eta, p - y, p * (1.0 - p))
            }
            (Distribution::Gamma, _) => {
                let k = disp;
                let ratio = y * (-eta).exp();
                (
                    -(k - 1.0) * y.ln() + k * ratio - k * (k.ln() - eta) + ln_gamma(k),
                    k * (1.0 - ratio),
                    k * ratio,
                )
            }
        }
    }

    pub fn unit_deviance(&self, y: f64, mu: f64) -> f64 {
        match self.dist {
            Distribution::Gaussian => (y - mu).powi(2),
            Distribution::Poisson => 2.0 * (ylogy(y, mu) - (y - mu)),
            Distribution::Bernoulli => 2.0 * (ylogy(y, mu) + ylogy(1.0 - y, 1.0 - mu)),
            Distribution::Gamma => 2.0 * (-(y / mu).ln() + (y - mu) / mu),
        }
    }

    /// `sign(y - μ) √deviance`, scaled by the dispersion for Gaussian
    /// (σ) and Gamma (shape).
    pub fn deviance_residual(&self, y: f64, mu: f64, disp: f64) -> f64 {
        let d = self.unit_deviance(y, mu).max(0.0);
        let scaled = match self.dist {
            Distribution::Gaussian => d / (disp * disp),
            Distribution::Gamma => d * disp,
            _ => d,
        };
        (y - mu).signum() * scaled.sqrt()
    }

    pub fn sample<R: Rng + ?Sized>(&self, mu: f64, disp: f64, rng: &mut R) -> Result<f64> {
        let bad = |what: &str| Error::Numerical(format!("cannot sample {self}: {what}"));
        Ok(match self.dist {
            Distribution::Gaussian => Normal::new(mu, disp).map_err(|e| bad(&e.to_string()))?.sample(rng),
            Distribution::Poisson => {
                if mu == 0.0 {
                    0.0
                } else {
                    Poisson::new(mu).map_err(|e| bad(&e.to_string()))?.sample(rng)
                }
            }
            Distribution::Bernoulli => {
                f64::from(u8::from(Bernoulli::new(mu).map_err(|e| bad(&e.to_string()))?.sample(rng)))
            }
            Distribution::Gamma => Gamma::new(disp, mu / disp).map_err(|e| bad(&e.to_string()))?.sample(rng),
        })
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let d = match self.dist {
            Distribution::Gaussian => "gaussian",
            Distribution::Poisson => "poisson",
            Distribution::Bernoulli => "bernoulli",
            Distribution::Gamma => "gamma",
        };
        let l = match self.link {
            Link::Identity => "identity",
            Link::Log => "log",
            Link::Logit => "logit",
        };
        write!(f, "{d}({l})")
    }
}

impl FromStr for Family {
    type Err = Error;

    /// `gaussian`, `gaussian(log)`, `poisson`, `bernoulli`/`binomial`, `gamma`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        let (name, link) = match s.split_once('(') {
            Some((n, rest)) => (
                n.trim().to_string(),
                Some(
                    rest.strip_suffix(')')
                        .ok_or_else(|| Error::Parse(format!("bad family '{s}'")))?
                        .trim()
                        .to_string(),
                ),
            ),
            None => (s.clone(), None),
        };
        let dist = match name.as_str() {
            "gaussian" | "normal" => Distribution::Gaussian,
            "poisson" => Distribution::Poisson,
            "bernoulli" | "binomial" => Distribution::Bernoulli,
            "gamma" => Distribution::Gamma,
            _ => return Err(Error::Parse(format!("unknown family '{name}'"))),
        };
        let link = match link.as_deref() {
            None => match dist {
                Distribution::Gaussian => Link::Identity,
                Distribution::Bernoulli => Link::Logit,
                _ => Link::Log,
            },
            Some("identity") => Link::Identity,
            Some("log") => Link::Log,
            Some("logit") => Link::Logit,
            Some(other) => return Err(Error::Parse(format!("unknown link '{other}'"))),
        };
        Family::new(dist, link)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn poisson_density_value() {
        // y = 2 at μ = 1: 1 + ln 2!
        assert_relative_eq!(Family::POISSON.nll(2.0, 0.0, f64::NAN), 1.0 + 2f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn gaussian_at_mean() {
        let v = Family::GAUSSIAN.nll(1.3, 1.3, 2.0);
        assert_relative_eq!(v, 0.5 * (2.0 * std::f64::consts::PI * 4.0).ln(), epsilon = 1e-14);
    }

    #[test]
    fn densities_match_statrs() {
        use statrs::distribution::{Continuous, Discrete};
        let g = statrs::distribution::Gamma::new(2.5, 2.5 / 1.7).unwrap();
        assert_relative_eq!(Family::GAMMA.nll(0.9, 1.7f64.ln(), 2.5), -g.ln_pdf(0.9), epsilon = 1e-12);
        let p = statrs::distribution::Poisson::new(3.2).unwrap();
        assert_relative_eq!(Family::POISSON.nll(5.0, 3.2f64.ln(), 0.0), -p.ln_pmf(5), epsilon = 1e-12);
        let n = statrs::distribution::Normal::new(2.0f64.exp(), 0.4).unwrap();
        let fam = Family::new(Distribution::Gaussian, Link::Log).unwrap();
        assert_relative_eq!(fam.nll(7.0, 2.0, 0.4), -n.ln_pdf(7.0), epsilon = 1e-12);
        let p = logistic(0.3);
        assert_relative_eq!(Family::BERNOULLI.nll(1.0, 0.3, 0.0), -p.ln(), epsilon = 1e-14);
        assert_relative_eq!(Family::BERNOULLI.nll(0.0, 0.3, 0.0), -(1.0 - p).ln(), epsilon = 1e-14);
    }

    fn all_families() -> Vec<(Family, f64, f64)> {
        vec![
            (Family::GAUSSIAN, 0.7, 1.3),
            (Family::new(Distribution::Gaussian, Link::Log).unwrap(), 2.4, 0.8),
            (Family::POISSON, 3.0, f64::NAN),
            (Family::BERNOULLI, 1.0, f64::NAN),
            (Family::GAMMA, 1.8, 3.0),
        ]
    }

    proptest! {
        #[test]
        fn derivatives_match_finite_differences(eta in -2.0f64..2.0) {
            for (fam, y, disp) in all_families() {
                let (_, d1, d2) = fam.nll_derivatives(y, eta, disp);
                let h = 1e-5;
                let fd1 = (fam.nll(y, eta + h, disp) - fam.nll(y, eta - h, disp)) / (2.0 * h);
                let fd2 = (fam.nll_derivatives(y, eta + h, disp).1 - fam.nll_derivatives(y, eta - h, disp).1) / (2.0 * h);
                prop_assert!((d1 - fd1).abs() < 1e-6 * (1.0 + d1.abs()));
                prop_assert!((d2 - fd2).abs() < 1e-6 * (1.0 + d2.abs()));
            }
        }
    }

    #[test]
    fn deviance_residuals() {
        assert_relative_eq!(Family::POISSON.deviance_residual(0.0, 1.0, f64::NAN), -(2f64.sqrt()), epsilon = 1e-15);
        assert_eq!(Family::POISSON.unit_deviance(4.0, 4.0), 0.0);
        assert_relative_eq!(Family::GAUSSIAN.deviance_residual(3.0, 1.0, 0.5), 4.0, epsilon = 1e-15);
        assert_relative_eq!(Family::GAUSSIAN.deviance_residual(0.0, 1.0, 2.0), -0.5, epsilon = 1e-15);
    }

    #[test]
    fn parsing_and_validation() {
        assert_eq!("poisson".parse::<Family>().unwrap(), Family::POISSON);
        assert_eq!("Gaussian(log)".parse::<Family>().unwrap().link, Link::Log);
        assert!("poisson(identity)".parse::<Family>().is_err());
        assert!("tweedie".parse::<Family>().is_err());
        assert!(Family::POISSON.check_response(1.5).is_err());
        assert!(Family::BERNOULLI.check_response(2.0).is_err());
        assert!(Family::GAMMA.check_response(0.0).is_err());
        assert_eq!(Family::GAMMA.to_string().parse::<Family>().unwrap(), Family::GAMMA);
    }

    #[test]
    fn poisson_sampling_mean() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let n = 20_000;
        let mean: f64 = (0..n).map(|_| Family::POISSON.sample(1.0, 0.0, &mut rng).unwrap()).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 3.0 * (1.0 / n as f64).sqrt());
    }
}
