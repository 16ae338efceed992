//! Skill latents: specs, prior sampling and vector encodings.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bound on each skill component when a high-level controller picks skills.
pub const SKILL_RANGE: f64 = 1.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SkillError {
    #[error("invalid skill spec: {0}")]
    InvalidSpec(String),
    #[error("skill vector has length {got}, spec expects {expected}")]
    Length { expected: usize, got: usize },
    #[error("skill vector is not a valid {0:?} encoding")]
    NotEncoded(Encoding),
    #[error("category {category} out of range for {count} skills")]
    Category { category: usize, count: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkillKind {
    Continuous,
    Discrete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Encoding {
    OneHot,
    ZeroCenteredOneHot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillSpec {
    pub kind: SkillKind,
    /// Latent dimension for continuous skills.
    pub dim: usize,
    /// Number of categories for discrete skills.
    pub discrete_count: usize,
    pub encoding: Encoding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SkillVector(pub Vec<f64>);

impl SkillVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Componentwise clamp into `[-bound, bound]`.
    pub fn clamped(&self, bound: f64) -> SkillVector {
        SkillVector(self.0.iter().map(|x| x.clamp(-bound, bound)).collect())
    }
}

impl AsRef<[f64]> for SkillVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl SkillSpec {
    pub fn continuous(dim: usize) -> Self {
        Self {
            kind: SkillKind::Continuous,
            dim,
            discrete_count: 0,
            encoding: Encoding::OneHot,
        }
    }

    pub fn discrete(count: usize, encoding: Encoding) -> Self {
        Self {
            kind: SkillKind::Discrete,
            dim: count,
            discrete_count: count,
            encoding,
        }
    }

    pub fn validate(&self) -> Result<(), SkillError> {
        match self.kind {
            SkillKind::Continuous if self.dim < 1 => Err(SkillError::InvalidSpec(
                "continuous skills need dim >= 1".into(),
            )),
            SkillKind::Discrete if self.discrete_count < 2 => Err(SkillError::InvalidSpec(
                "discrete skills need discrete_count >= 2".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Length of a skill vector (also the output width of phi).
    pub fn vector_len(&self) -> usize {
        match self.kind {
            SkillKind::Continuous => self.dim,
            SkillKind::Discrete => self.discrete_count,
        }
    }

    pub fn is_discrete(&self) -> bool {
        self.kind == SkillKind::Discrete
    }

    pub fn encode(&self, category: usize) -> Result<SkillVector, SkillError> {
        let count = self.discrete_count;
        if category >= count {
            return Err(SkillError::Category { category, count });
        }
        let offset = match self.encoding {
            Encoding::OneHot => 0.0,
            Encoding::ZeroCenteredOneHot => 1.0 / count as f64,
        };
        let mut z = vec![-offset; count];
        z[category] = 1.0 - offset;
        Ok(SkillVector(z))
    }

    /// Recovers the category of a discrete skill vector by argmax.
    pub fn category_of(&self, z: &[f64]) -> Result<usize, SkillError> {
        self.check_len(z)?;
        Ok(argmax(z))
    }

    fn check_len(&self, z: &[f64]) -> Result<(), SkillError> {
        if z.len() != self.vector_len() {
            return Err(SkillError::Length {
                expected: self.vector_len(),
                got: z.len(),
            });
        }
        Ok(())
    }

    /// Checks that `z` is a valid point of this skill space.
    pub fn check(&self, z: &[f64]) -> Result<(), SkillError> {
        self.check_len(z)?;
        if self.kind == SkillKind::Discrete {
            let expected = self.encode(argmax(z))?;
            let exact = expected
                .0
                .iter()
                .zip(z)
                .all(|(a, b)| (a - b).abs() <= 1e-12);
            if !exact {
                return Err(SkillError::NotEncoded(self.encoding));
            }
        }
        Ok(())
    }
}

pub fn sample_skill<R: Rng + ?Sized>(spec: &SkillSpec, rng: &mut R) -> SkillVector {
    match spec.kind {
        SkillKind::Continuous => {
            SkillVector((0..spec.dim).map(|_| rng.sample(StandardNormal)).collect())
        }
        SkillKind::Discrete => {
            let c = rng.gen_range(0..spec.discrete_count);
            spec.encode(c).expect("category in range")
        }
    }
}

/// `log p(z)` under the skill prior.
pub fn log_prior(spec: &SkillSpec, z: &[f64]) -> Result<f64, SkillError> {
    spec.check(z)?;
    Ok(match spec.kind {
        SkillKind::Discrete => -(spec.discrete_count as f64).ln(),
        SkillKind::Continuous => z
            .iter()
            .map(|x| -0.5 * (2.0 * PI).ln() - 0.5 * x * x)
            .sum(),
    })
}

fn argmax(z: &[f64]) -> usize {
    z.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| {
            if x > best.1 {
                (i, x)
            } else {
                best
            }
        })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_hot_and_zero_centered_encodings() {
        let oh = SkillSpec::discrete(4, Encoding::OneHot);
        assert_eq!(oh.encode(2).unwrap().0, vec![0.0, 0.0, 1.0, 0.0]);
        let zc = SkillSpec::discrete(4, Encoding::ZeroCenteredOneHot);
        assert_eq!(zc.encode(2).unwrap().0, vec![-0.25, -0.25, 0.75, -0.25]);
        assert!(zc.encode(4).is_err());
    }

    #[test]
    fn continuous_prior_mean_near_zero() {
        let spec = SkillSpec::continuous(2);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let mut mean = [0.0; 2];
        for _ in 0..n {
            let z = sample_skill(&spec, &mut rng);
            mean[0] += z.0[0] / n as f64;
            mean[1] += z.0[1] / n as f64;
        }
        assert!(mean[0].abs() < 0.02 && mean[1].abs() < 0.02, "{mean:?}");
    }

    #[test]
    fn discrete_sampling_is_uniform_enough() {
        let spec = SkillSpec::discrete(4, Encoding::OneHot);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = [0usize; 4];
        for _ in 0..40_000 {
            let z = sample_skill(&spec, &mut rng);
            counts[spec.category_of(&z.0).unwrap()] += 1;
        }
        for c in counts {
            assert!((9_500..10_500).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn log_prior_values() {
        let d = SkillSpec::discrete(4, Encoding::OneHot);
        let z = d.encode(1).unwrap();
        assert!((log_prior(&d, &z.0).unwrap() + 4f64.ln()).abs() < 1e-12);
        assert!((log_prior(&d, &z.0).unwrap() + 1.3863).abs() < 1e-4);

        let c1 = SkillSpec::continuous(1);
        let lp = log_prior(&c1, &[0.0]).unwrap();
        assert!((lp + 0.5 * (2.0 * PI).ln()).abs() < 1e-12);
        assert!((lp + 0.9189).abs() < 1e-4);

        let c2 = SkillSpec::continuous(2);
        let lp = log_prior(&c2, &[1.0, 1.0]).unwrap();
        assert!((lp - (-(2.0 * PI).ln() - 1.0)).abs() < 1e-12);
        assert!((lp + 2.8379).abs() < 1e-4);
    }

    #[test]
    fn malformed_vectors_rejected() {
        let d = SkillSpec::discrete(4, Encoding::ZeroCenteredOneHot);
        assert!(matches!(
            log_prior(&d, &[1.0, 0.0, 0.0]),
            Err(SkillError::Length { .. })
        ));
        assert!(matches!(
            log_prior(&d, &[1.0, 0.0, 0.0, 0.0]),
            Err(SkillError::NotEncoded(_))
        ));
        assert!(SkillSpec::continuous(0).validate().is_err());
        assert!(SkillSpec::discrete(1, Encoding::OneHot).validate().is_err());
    }

    proptest! {
        #[test]
        fn encoding_round_trips(count in 2usize..20, pick in 0usize..1000, centered in any::<bool>()) {
            let enc = if centered { Encoding::ZeroCenteredOneHot } else { Encoding::OneHot };
            let spec = SkillSpec::discrete(count, enc);
            let c = pick % count;
            let z = spec.encode(c).unwrap();
            prop_assert_eq!(spec.category_of(&z.0).unwrap(), c);
            if centered {
                prop_assert!(z.0.iter().sum::<f64>().abs() <= 1e-12);
            }
        }
    }
}
