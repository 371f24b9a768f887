//! Training objective: semantic, identity, pixel, perceptual, and fidelity
//! terms with per-task weight defaults.
//!
//! Every term is built on the tape against the frozen backbone nets, so
//! gradients flow through the generated images back to whatever produced
//! them. The weighted total only includes terms with nonzero weight; the
//! unweighted value of every term is still computed for reporting.

use serde::{Deserialize, Serialize};

use crate::backbones::nets::{self, NetDims};
use crate::{Error, Result};
use promptface_tensor::{ParamVars, Scalar, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub semantic: f64,
    pub id: f64,
    pub pixel: f64,
    pub lpips: f64,
    pub img: f64,
    pub d: f64,
}

impl LossWeights {
    /// Generation task: no source photograph, so no pixel anchor.
    pub fn generation_defaults() -> Self {
        LossWeights { semantic: 1.0, id: 0.1, pixel: 0.0, lpips: 0.2, img: 1.0, d: 0.05 }
    }

    /// Manipulation task: pixel + identity anchors keep the source intact.
    pub fn manipulation_defaults() -> Self {
        LossWeights { semantic: 1.0, id: 0.3, pixel: 0.8, lpips: 0.2, img: 1.0, d: 0.05 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("semantic", self.semantic),
            ("id", self.id),
            ("pixel", self.pixel),
            ("lpips", self.lpips),
            ("img", self.img),
            ("d", self.d),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Every component unweighted, plus the weighted total actually optimized.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub semantic: f64,
    pub id: f64,
    pub pixel: f64,
    pub lpips: f64,
    pub fidelity: f64,
    pub total: f64,
}

/// Frozen-side inputs shared by the loss terms. All are tape constants
/// computed once per step: the prompt embedding, the source images, and the
/// source's identity/perceptual features.
#[derive(Clone, Copy, Debug)]
pub struct LossContext {
    /// Unit-norm prompt embedding rows [N, d].
    pub text: Var,
    /// Source images [N, 3, R, R] the edit is anchored to.
    pub source_images: Var,
    /// Unit-norm identity features of the source [N, identity_dim].
    pub source_identity: Var,
    /// Channel-normalized perceptual maps of the source.
    pub source_perceptual: [Var; 2],
}

/// Scalar vars for each term plus the weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossGraph {
    pub semantic: Var,
    pub id: Var,
    pub pixel: Var,
    pub lpips: Var,
    pub fidelity: Var,
    pub total: Var,
}

impl LossGraph {
    pub fn breakdown<T: Scalar>(&self, tape: &Tape<T>) -> Result<LossBreakdown> {
        let v = |var: Var| -> Result<f64> { Ok(tape.scalar_value(var)?.as_f64()) };
        Ok(LossBreakdown {
            semantic: v(self.semantic)?,
            id: v(self.id)?,
            pixel: v(self.pixel)?,
            lpips: v(self.lpips)?,
            fidelity: v(self.fidelity)?,
            total: v(self.total)?,
        })
    }
}

/// Mean over the batch of `1 − cos(text, F(output))`, where F is the image
/// embedder. Rejects prompt embeddings that are not unit-norm.
pub fn semantic_loss<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    dims: &NetDims,
    text: Var,
    output: Var,
) -> Result<Var> {
    let tv = tape.value(text);
    let shape = tv.shape().to_vec();
    if shape.len() != 2 || shape[1] != dims.embed_dim {
        return Err(Error::invalid(format!(
            "prompt embedding shape {shape:?}, expected [N, {}]",
            dims.embed_dim
        )));
    }
    for r in 0..shape[0] {
        let row = &tv.data()[r * shape[1]..(r + 1) * shape[1]];
        let norm = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(Error::invalid(format!(
                "prompt embedding row {r} has norm {norm:.5}, expected 1"
            )));
        }
    }
    let emb = nets::image_embedder_forward(tape, vars, dims, output)?;
    one_minus_mean_cosine(tape, text, emb)
}

/// Mean over the batch of `1 − cos(R(source), R(output))`, R the identity
/// feature extractor.
pub fn identity_loss<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    dims: &NetDims,
    source_identity: Var,
    output: Var,
) -> Result<Var> {
    let feats = nets::identity_features_forward(tape, vars, dims, output)?;
    one_minus_mean_cosine(tape, source_identity, feats)
}

fn one_minus_mean_cosine<T: Scalar>(tape: &mut Tape<T>, a: Var, b: Var) -> Result<Var> {
    let cos = tape.cosine_rows(a, b)?;
    let mean = tape.mean_all(cos);
    Ok(tape.affine_scalar(mean, -1.0, 1.0)?)
}

/// Mean squared pixel difference between output and source.
pub fn pixel_loss<T: Scalar>(tape: &mut Tape<T>, source: Var, output: Var) -> Result<Var> {
    let diff = tape.sub(output, source)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean_all(sq))
}

/// Perceptual distance: mean squared difference of the channel-normalized
/// predictor maps, averaged over the two tap layers.
pub fn lpips_loss<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    dims: &NetDims,
    source_perceptual: &[Var; 2],
    output: Var,
) -> Result<Var> {
    let graph = nets::predictor_forward(tape, vars, dims, output)?;
    let feats = nets::perceptual_from_taps(tape, &graph.taps)?;
    let mut acc: Option<Var> = None;
    for (f, s) in feats.iter().zip(source_perceptual) {
        let diff = tape.sub(*f, *s)?;
        let sq = tape.mul(diff, diff)?;
        let m = tape.mean_all(sq);
        acc = Some(match acc {
            None => m,
            Some(a) => tape.add(a, m)?,
        });
    }
    Ok(tape.affine_scalar(acc.expect("two tap layers"), 0.5, 0.0)?)
}

/// Mean degradation probability of the output under the frozen scorer.
pub fn fidelity_loss<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    dims: &NetDims,
    output: Var,
) -> Result<Var> {
    let logits = nets::discriminator_forward(tape, vars, dims, output)?;
    let probs = tape.sigmoid(logits);
    Ok(tape.mean_all(probs))
}

/// Builds every term against `output` and the weighted total. Terms enter
/// the total graph only when their effective weight is nonzero (pixel and
/// lpips carry `img·pixel` and `img·lpips` respectively), so zero-weight
/// terms contribute no gradient at all.
pub fn build_losses<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    dims: &NetDims,
    ctx: &LossContext,
    weights: &LossWeights,
    output: Var,
) -> Result<LossGraph> {
    weights.validate()?;
    let semantic = semantic_loss(tape, vars, dims, ctx.text, output)?;
    let id = identity_loss(tape, vars, dims, ctx.source_identity, output)?;
    let pixel = pixel_loss(tape, ctx.source_images, output)?;
    let lpips = lpips_loss(tape, vars, dims, &ctx.source_perceptual, output)?;
    let fidelity = fidelity_loss(tape, vars, dims, output)?;

    let terms = [
        (semantic, weights.semantic),
        (id, weights.id),
        (pixel, weights.img * weights.pixel),
        (lpips, weights.img * weights.lpips),
        (fidelity, weights.d),
    ];
    let mut total: Option<Var> = None;
    for (term, w) in terms {
        if w == 0.0 {
            continue;
        }
        let scaled = tape.affine_scalar(term, w, 0.0)?;
        total = Some(match total {
            None => scaled,
            Some(acc) => tape.add(acc, scaled)?,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("every loss weight is zero"))?;
    Ok(LossGraph { semantic, id, pixel, lpips, fidelity, total })
}
