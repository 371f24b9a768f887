//! Fixed seeded codebook tying attributes to the layered latent space.
//!
//! Each level embeds its attribute sub-vector through an orthonormal matrix;
//! each layer inside the level applies its own orthonormal rotation. Two
//! consequences carry the rest of the project: attribute groups touch only
//! their own level's layers (level locality), and every embedding is an
//! isometry, so latent norms stay interpretable.

use promptface_tensor::{NamedParamSet, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::latent::{Level, LevelSplit, WPlus};
use crate::synth::{AttributeVector, GENDERS, HAIR_COLORS, SKIN_COLORS};
use crate::{Error, Result};

pub const NOISE_DIM: usize = 18;
pub const COARSE_SUB_DIM: usize = 4;
pub const MEDIUM_SUB_DIM: usize = HAIR_COLORS + SKIN_COLORS;
pub const FINE_SUB_DIM: usize = 1 + GENDERS + 1;

pub fn sub_dim(level: Level) -> usize {
    match level {
        Level::Coarse => COARSE_SUB_DIM,
        Level::Medium => MEDIUM_SUB_DIM,
        Level::Fine => FINE_SUB_DIM,
    }
}

/// The per-level attribute sub-vector, discrete fields one-hot.
pub fn sub_vector(attrs: &AttributeVector, level: Level) -> Vec<f32> {
    match level {
        Level::Coarse => attrs.coarse().to_vec(),
        Level::Medium => {
            let mut v = vec![0.0; MEDIUM_SUB_DIM];
            v[attrs.hair_color] = 1.0;
            v[HAIR_COLORS + attrs.skin_color] = 1.0;
            v
        }
        Level::Fine => {
            let mut v = vec![0.0; FINE_SUB_DIM];
            v[0] = attrs.age;
            v[1 + attrs.gender] = 1.0;
            v[FINE_SUB_DIM - 1] = attrs.micro_density;
            v
        }
    }
}

#[derive(Clone, Debug)]
pub struct Codebook {
    split: LevelSplit,
    dim: usize,
    /// One [D, sub_dim] matrix per level, orthonormal columns.
    embeds: Vec<Tensor<f32>>,
    /// One [D, D] orthogonal matrix per layer.
    rotations: Vec<Tensor<f32>>,
}

/// Row-major [rows, cols] matrix with orthonormal columns, Gram-Schmidt on
/// seeded Gaussian draws (re-orthogonalized once for numerical safety).
fn orthonormal_columns(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    assert!(cols <= rows, "cannot fit {cols} orthonormal columns in {rows} dims");
    let mut m = vec![0.0f32; rows * cols];
    for j in 0..cols {
        let mut col: Vec<f32> = (0..rows).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for k in 0..j {
                let dot: f32 = (0..rows).map(|i| col[i] * m[i * cols + k]).sum();
                for i in 0..rows {
                    col[i] -= dot * m[i * cols + k];
                }
            }
        }
        let norm = col.iter().map(|v| v * v).sum::<f32>().sqrt();
        // A fresh Gaussian draw is dependent on j previous columns with
        // probability ~0; a tiny norm would mean the rng collapsed.
        assert!(norm > 1e-4, "degenerate Gram-Schmidt column");
        for i in 0..rows {
            m[i * cols + j] = col[i] / norm;
        }
    }
    m
}

fn matvec(m: &[f32], rows: usize, cols: usize, v: &[f32], out: &mut [f32]) {
    for (i, o) in out.iter_mut().enumerate().take(rows) {
        let row = &m[i * cols..(i + 1) * cols];
        *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

impl Codebook {
    pub fn new(split: LevelSplit, dim: usize, seed: u64) -> Result<Self> {
        if dim < MEDIUM_SUB_DIM {
            return Err(Error::invalid(format!(
                "latent dim {dim} cannot hold a {MEDIUM_SUB_DIM}-dim orthonormal embedding"
            )));
        }
        let mut rng = promptface_tensor::init::rng(seed ^ 0x5eed_c0de);
        let embeds = Level::ALL
            .iter()
            .map(|l| {
                let cols = sub_dim(*l);
                Tensor::from_vec(&[dim, cols], orthonormal_columns(dim, cols, &mut rng))
                    .expect("orthonormal matrix is finite")
            })
            .collect();
        let rotations = (0..split.layer_count())
            .map(|_| {
                Tensor::from_vec(&[dim, dim], orthonormal_columns(dim, dim, &mut rng))
                    .expect("rotation matrix is finite")
            })
            .collect();
        Ok(Codebook { split, dim, embeds, rotations })
    }

    pub fn split(&self) -> LevelSplit {
        self.split
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Batched latent construction: layer_i = R_i (E_level sub_level).
    pub fn attrs_to_wplus(&self, attrs: &[AttributeVector]) -> Result<WPlus<f32>> {
        if attrs.is_empty() {
            return Err(Error::invalid("empty attribute batch"));
        }
        let n = attrs.len();
        let d = self.dim;
        // Per sample, embed each level once and reuse across its layers.
        let mut embedded = vec![vec![0.0f32; 3 * d]; n];
        for (s, a) in attrs.iter().enumerate() {
            for level in Level::ALL {
                let sub = sub_vector(a, level);
                let e = &self.embeds[level.index()];
                matvec(e.data(), d, sub.len(), &sub, &mut embedded[s][level.index() * d..(level.index() + 1) * d]);
            }
        }
        let mut layers = Vec::with_capacity(self.split.layer_count());
        for (i, rot) in self.rotations.iter().enumerate() {
            let level = self.split.level_of(i)?;
            let mut data = vec![0.0f32; n * d];
            for s in 0..n {
                let src = &embedded[s][level.index() * d..(level.index() + 1) * d];
                matvec(rot.data(), d, d, src, &mut data[s * d..(s + 1) * d]);
            }
            layers.push(Tensor::from_vec(&[n, d], data).expect("finite layer"));
        }
        WPlus::new(layers)
    }

    /// Deterministic noise branch: decode z to attributes, then embed.
    pub fn map_noise(&self, z: &[f32], identities: usize) -> Result<WPlus<f32>> {
        self.attrs_to_wplus(&[noise_to_attrs(z, identities)?])
    }

    /// Serializes as non-trainable `codebook.*` tensors.
    pub fn write_params(&self, set: &mut NamedParamSet<f32>) -> Result<()> {
        let (nc, nm, nf) = self.split.counts();
        let counts = Tensor::from_vec(&[3], vec![nc as f32, nm as f32, nf as f32])
            .expect("counts finite");
        set.insert("codebook.levels", counts, false).map_err(Error::Tensor)?;
        for level in Level::ALL {
            set.insert(
                format!("codebook.embed.{}", level.name()),
                self.embeds[level.index()].clone(),
                false,
            )
            .map_err(Error::Tensor)?;
        }
        for (i, r) in self.rotations.iter().enumerate() {
            set.insert(format!("codebook.rot.l{i:02}"), r.clone(), false)
                .map_err(Error::Tensor)?;
        }
        Ok(())
    }

    pub fn read_params(set: &NamedParamSet<f32>) -> Result<Self> {
        let counts = set.tensor("codebook.levels").map_err(Error::Tensor)?;
        let c: Vec<usize> = counts.data().iter().map(|v| *v as usize).collect();
        if c.len() != 3 {
            return Err(Error::invalid("codebook.levels must have 3 entries"));
        }
        let split = LevelSplit::from_counts(c[0], c[1], c[2])?;
        let mut embeds = Vec::new();
        let mut dim = 0;
        for level in Level::ALL {
            let t = set.tensor(&format!("codebook.embed.{}", level.name())).map_err(Error::Tensor)?;
            let s = t.shape();
            if s.len() != 2 || s[1] != sub_dim(level) {
                return Err(Error::invalid(format!(
                    "codebook embed for {} has shape {s:?}",
                    level.name()
                )));
            }
            dim = s[0];
            embeds.push(t.clone());
        }
        let rotations = (0..split.layer_count())
            .map(|i| {
                let t = set.tensor(&format!("codebook.rot.l{i:02}")).map_err(Error::Tensor)?;
                if t.shape() != [dim, dim] {
                    return Err(Error::invalid(format!(
                        "codebook rotation {i} has shape {:?}, expected [{dim}, {dim}]",
                        t.shape()
                    )));
                }
                Ok(t.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Codebook { split, dim, embeds, rotations })
    }
}

/// Mixes the bit patterns of z's first coordinates into one well-spread hash.
fn hash_head(z: &[f32]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in &z[..4] {
        h = (h ^ v.to_bits() as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

fn argmax(seg: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in seg.iter().enumerate() {
        if *v > seg[best] {
            best = i;
        }
    }
    best
}

/// Decodes an 18-dim noise vector: sigmoids for the six continuous fields,
/// argmax segments for the discrete ones (ties to the lowest index), and a
/// hashed identity bin.
pub fn noise_to_attrs(z: &[f32], identities: usize) -> Result<AttributeVector> {
    if z.len() != NOISE_DIM {
        return Err(Error::invalid(format!(
            "noise vector has dim {}, expected {NOISE_DIM}",
            z.len()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("noise vector contains non-finite values"));
    }
    let sig = |v: f32| 1.0 / (1.0 + (-v).exp());
    Ok(AttributeVector {
        identity_id: (hash_head(z) % identities.max(1) as u64) as usize,
        face_shape: sig(z[0]),
        hair_length: sig(z[1]),
        nose_size: sig(z[2]),
        lip_size: sig(z[3]),
        hair_color: argmax(&z[6..6 + HAIR_COLORS]),
        skin_color: argmax(&z[12..12 + SKIN_COLORS]),
        age: sig(z[4]),
        gender: argmax(&z[16..16 + GENDERS]),
        micro_density: sig(z[5]),
    })
}

/// Seeded standard-normal noise batch for generation. Stream `k` yields the
/// k-th batch row deterministically regardless of batch grouping.
pub fn sample_noise(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| (0..NOISE_DIM).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}
