//! Procedural face corpus: attribute sampling, rasterization, captioning,
//! dataset assembly, and image degradation.

pub mod caption;
pub mod dataset;
pub mod render;

use crate::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const HAIR_COLORS: usize = 6;
pub const SKIN_COLORS: usize = 4;
pub const GENDERS: usize = 2;

/// Identity base geometries are kept at least this far apart (L∞ over the
/// four coarse fields) so the identity net has signal to separate them.
pub const IDENTITY_MIN_SEPARATION: f32 = 0.15;
/// Per-sample jitter applied around an identity's base geometry.
pub const IDENTITY_JITTER: f32 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeVector {
    pub identity_id: usize,
    // Coarse geometry group.
    pub face_shape: f32,
    pub hair_length: f32,
    pub nose_size: f32,
    pub lip_size: f32,
    // Medium coloration group.
    pub hair_color: usize,
    pub skin_color: usize,
    // Fine group.
    pub age: f32,
    pub gender: usize,
    pub micro_density: f32,
}

impl AttributeVector {
    pub fn validate(&self, identities: usize) -> Result<()> {
        let unit = |name: &str, v: f32| -> Result<()> {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} = {v} outside [0,1]")));
            }
            Ok(())
        };
        unit("face_shape", self.face_shape)?;
        unit("hair_length", self.hair_length)?;
        unit("nose_size", self.nose_size)?;
        unit("lip_size", self.lip_size)?;
        unit("age", self.age)?;
        unit("micro_density", self.micro_density)?;
        if self.identity_id >= identities {
            return Err(Error::invalid(format!(
                "identity_id {} outside pool of {identities}",
                self.identity_id
            )));
        }
        if self.hair_color >= HAIR_COLORS {
            return Err(Error::invalid(format!("hair_color {}", self.hair_color)));
        }
        if self.skin_color >= SKIN_COLORS {
            return Err(Error::invalid(format!("skin_color {}", self.skin_color)));
        }
        if self.gender >= GENDERS {
            return Err(Error::invalid(format!("gender {}", self.gender)));
        }
        Ok(())
    }

    /// Coarse fields as a vector, in canonical order.
    pub fn coarse(&self) -> [f32; 4] {
        [self.face_shape, self.hair_length, self.nose_size, self.lip_size]
    }

    /// All continuous fields in canonical order; the regression heads and the
    /// semantic-accuracy metric both index against this layout.
    pub fn continuous(&self) -> [f32; 6] {
        [
            self.face_shape,
            self.hair_length,
            self.nose_size,
            self.lip_size,
            self.age,
            self.micro_density,
        ]
    }
}

/// Thirds band of a continuous attribute, used by captions and by
/// banded semantic targets: 0 = low, 1 = mid, 2 = high.
pub fn band3(v: f32) -> usize {
    if v < 1.0 / 3.0 {
        0
    } else if v < 2.0 / 3.0 {
        1
    } else {
        2
    }
}

/// Center of a thirds band, the target value banded prompts aim for.
pub fn band3_center(band: usize) -> f32 {
    [1.0 / 6.0, 0.5, 5.0 / 6.0][band.min(2)]
}

/// Per-identity base geometries plus samplers around them. Coarse fields are
/// identity-conditioned (base + jitter); medium and fine fields are free.
#[derive(Clone, Debug)]
pub struct AttributePool {
    bases: Vec<[f32; 4]>,
}

impl AttributePool {
    pub fn new(identities: usize, seed: u64) -> Result<Self> {
        if identities < 2 {
            return Err(Error::invalid(format!(
                "identity pool needs at least 2 identities, got {identities}"
            )));
        }
        let mut rng = promptface_tensor::init::rng(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut bases: Vec<[f32; 4]> = Vec::with_capacity(identities);
        let mut attempts = 0usize;
        while bases.len() < identities {
            attempts += 1;
            if attempts > 200_000 {
                return Err(Error::invalid(format!(
                    "could not place {identities} identities {IDENTITY_MIN_SEPARATION} apart"
                )));
            }
            let candidate = [
                rng.gen_range(IDENTITY_JITTER..=1.0 - IDENTITY_JITTER),
                rng.gen_range(IDENTITY_JITTER..=1.0 - IDENTITY_JITTER),
                rng.gen_range(IDENTITY_JITTER..=1.0 - IDENTITY_JITTER),
                rng.gen_range(IDENTITY_JITTER..=1.0 - IDENTITY_JITTER),
            ];
            let clashes = bases.iter().any(|b| {
                b.iter()
                    .zip(&candidate)
                    .map(|(a, c)| (a - c).abs())
                    .fold(0.0f32, f32::max)
                    < IDENTITY_MIN_SEPARATION
            });
            if !clashes {
                bases.push(candidate);
            }
        }
        Ok(AttributePool { bases })
    }

    pub fn identities(&self) -> usize {
        self.bases.len()
    }

    pub fn base(&self, identity: usize) -> [f32; 4] {
        self.bases[identity]
    }

    /// A sample of the given identity: coarse = base + jitter, rest free.
    pub fn sample_identity(&self, identity: usize, rng: &mut ChaCha8Rng) -> AttributeVector {
        let b = self.bases[identity % self.bases.len()];
        let j = |rng: &mut ChaCha8Rng, base: f32| {
            (base + rng.gen_range(-IDENTITY_JITTER..=IDENTITY_JITTER)).clamp(0.0, 1.0)
        };
        AttributeVector {
            identity_id: identity % self.bases.len(),
            face_shape: j(rng, b[0]),
            hair_length: j(rng, b[1]),
            nose_size: j(rng, b[2]),
            lip_size: j(rng, b[3]),
            hair_color: rng.gen_range(0..HAIR_COLORS),
            skin_color: rng.gen_range(0..SKIN_COLORS),
            age: rng.gen_range(0.0..=1.0),
            gender: rng.gen_range(0..GENDERS),
            micro_density: rng.gen_range(0.0..=1.0),
        }
    }

    /// A sample with a uniformly drawn identity.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> AttributeVector {
        let identity = rng.gen_range(0..self.bases.len());
        self.sample_identity(identity, rng)
    }
}

/// A fully free attribute draw — every field uniform over its range, no
/// identity prior. Used to densify training coverage for nets that must
/// handle arbitrary valid attribute vectors, not just the identity clusters.
pub fn sample_free(identities: usize, rng: &mut ChaCha8Rng) -> AttributeVector {
    AttributeVector {
        identity_id: rng.gen_range(0..identities.max(1)),
        face_shape: rng.gen_range(0.0..=1.0),
        hair_length: rng.gen_range(0.0..=1.0),
        nose_size: rng.gen_range(0.0..=1.0),
        lip_size: rng.gen_range(0.0..=1.0),
        hair_color: rng.gen_range(0..HAIR_COLORS),
        skin_color: rng.gen_range(0..SKIN_COLORS),
        age: rng.gen_range(0.0..=1.0),
        gender: rng.gen_range(0..GENDERS),
        micro_density: rng.gen_range(0.0..=1.0),
    }
}
