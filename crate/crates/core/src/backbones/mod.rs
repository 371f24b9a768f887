//! The frozen asset stack every pipeline run consumes: a style generator over
//! a layered latent space, an image inverter, a noise mapper, joint
//! text/image embedders, an identity net, an attribute predictor whose
//! activations double as perceptual features, and a degradation scorer.
//! [`pretrain`] builds the stack from synthetic data; [`BackboneBundle`]
//! freezes it and serves inference.

pub mod codebook;
pub mod nets;
pub mod pretrain;

use crate::config::BackboneConfig;
use crate::latent::WPlus;
use crate::synth::caption;
use crate::synth::AttributeVector;
use crate::{Error, Result};
use codebook::Codebook;
use nets::{NetDims, CONT_ATTRS};
use promptface_tensor::{checkpoint, NamedParamSet, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const BUNDLE_VERSION: u32 = 1;

/// Inference batch cap; large inputs are processed in slices this wide so
/// intermediate activations stay small.
const INFER_CHUNK: usize = 128;

/// Outcome of one pretraining quality gate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GateRecord {
    pub stage: String,
    pub gate: String,
    pub achieved: f64,
    pub required: f64,
    /// True when `achieved` must meet or exceed `required`; false when it
    /// must not exceed it.
    pub higher_is_better: bool,
    pub passed: bool,
}

/// Persisted alongside the bundle checkpoint as JSON.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainReport {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub gates_enforced: bool,
    /// False when a gate failed under enforcement; such bundles are kept on
    /// disk for debugging but refuse downstream use.
    pub usable: bool,
    pub gates: Vec<GateRecord>,
}

/// All pretrained parameters plus the fixed codebook, frozen after training.
#[derive(Debug)]
pub struct BackboneBundle {
    params: NamedParamSet<f32>,
    codebook: Codebook,
    dims: NetDims,
    report: PretrainReport,
}

impl BackboneBundle {
    pub fn new(
        mut params: NamedParamSet<f32>,
        codebook: Codebook,
        dims: NetDims,
        report: PretrainReport,
    ) -> Result<Self> {
        if codebook.split().layer_count() != dims.layers || codebook.dim() != dims.style_dim {
            return Err(Error::invalid(format!(
                "codebook is ({}, {}) but nets are ({}, {})",
                codebook.split().layer_count(),
                codebook.dim(),
                dims.layers,
                dims.style_dim
            )));
        }
        params.set_all_trainable(false);
        Ok(BackboneBundle {
            params,
            codebook,
            dims,
            report,
        })
    }

    pub fn dims(&self) -> &NetDims {
        &self.dims
    }

    pub fn params(&self) -> &NamedParamSet<f32> {
        &self.params
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn report(&self) -> &PretrainReport {
        &self.report
    }

    pub fn resolution(&self) -> usize {
        self.dims.resolution()
    }

    pub fn ensure_usable(&self) -> Result<()> {
        if !self.report.usable {
            return Err(Error::invalid(
                "bundle is marked unusable (a pretraining gate failed); retrain before use",
            ));
        }
        Ok(())
    }

    /// Content digest of the serialized parameters; recorded by mapper
    /// checkpoints so a mismatched bundle is detected at load time.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(checkpoint::to_bytes(&self.params));
        let out = h.finalize();
        let mut s = String::with_capacity(64);
        for b in out {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }

    /// Writes `<path>.ntck` (parameters, codebook, dims) and `<path>.json`
    /// (the pretraining report).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut full = self.params.clone();
        self.codebook.write_params(&mut full).map_err(Error::from)?;
        let d = &self.dims;
        full.insert(
            "meta.dims",
            Tensor::from_vec(
                &[5],
                vec![
                    d.layers as f32,
                    d.style_dim as f32,
                    d.embed_dim as f32,
                    d.identity_dim as f32,
                    d.identities as f32,
                ],
            )?,
            false,
        )?;
        let ck = path.with_extension(checkpoint::EXTENSION);
        checkpoint::save(&ck, &full)?;
        let report_path = path.with_extension("json");
        let text = serde_json::to_string_pretty(&self.report)
            .map_err(|e| Error::format(&report_path, e.to_string()))?;
        std::fs::write(&report_path, text).map_err(|e| Error::io(&report_path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = path.with_extension(checkpoint::EXTENSION);
        let full = checkpoint::load(&ck)?;
        let meta = full.tensor("meta.dims").map_err(Error::from)?;
        if meta.shape() != [5usize] {
            return Err(Error::format(&ck, "meta.dims has wrong shape"));
        }
        let md = meta.data();
        let dims = NetDims::new(
            md[0] as usize,
            md[1] as usize,
            md[2] as usize,
            md[3] as usize,
            md[4] as usize,
        )?;
        let codebook = Codebook::read_params(&full)?;
        let report_path = path.with_extension("json");
        let text =
            std::fs::read_to_string(&report_path).map_err(|e| Error::io(&report_path, e))?;
        let report: PretrainReport = serde_json::from_str(&text)
            .map_err(|e| Error::format(&report_path, e.to_string()))?;
        let mut params = NamedParamSet::new();
        for (name, entry) in full.iter() {
            if !name.starts_with("codebook.") && !name.starts_with("meta.") {
                params.insert(name.clone(), entry.tensor.clone(), false)?;
            }
        }
        BackboneBundle::new(params, codebook, dims, report)
    }

    // ── inference (frozen, chunked) ──────────────────────────────────

    pub fn attrs_to_wplus(&self, attrs: &[AttributeVector]) -> Result<WPlus<f32>> {
        self.codebook.attrs_to_wplus(attrs)
    }

    pub fn map_noise(&self, z: &[f32]) -> Result<WPlus<f32>> {
        self.codebook.map_noise(z, self.dims.identities)
    }

    /// Renders latents to images [N, 3, res, res].
    pub fn generate_image(&self, w: &WPlus<f32>) -> Result<Tensor<f32>> {
        if w.layer_count() != self.dims.layers || w.dim() != self.dims.style_dim {
            return Err(Error::invalid(format!(
                "latent is ({}, {}), generator wants ({}, {})",
                w.layer_count(),
                w.dim(),
                self.dims.layers,
                self.dims.style_dim
            )));
        }
        let n = w.batch();
        let res = self.resolution();
        let mut out: Vec<f32> = Vec::with_capacity(n * 3 * res * res);
        for start in (0..n).step_by(INFER_CHUNK) {
            let stop = (start + INFER_CHUNK).min(n);
            let mut tape = Tape::<f32>::new();
            let vars = tape.bind(&self.params, false);
            let styles: Vec<Var> = (0..w.layer_count())
                .map(|i| {
                    let t = w.layer(i);
                    let d = w.dim();
                    let rows = t.data()[start * d..stop * d].to_vec();
                    Ok(tape.constant(Tensor::from_vec(&[stop - start, d], rows)?))
                })
                .collect::<Result<_>>()?;
            let img = nets::generator_forward(&mut tape, &vars, &self.dims, &styles)?;
            out.extend_from_slice(tape.value(img).data());
        }
        Ok(Tensor::from_vec(&[n, 3, res, res], out)?)
    }

    /// Chunked single-net forward over images, collecting rows of `f`'s
    /// output var. The callback sees (tape, bound vars, image chunk var).
    fn image_pass<F>(&self, images: &Tensor<f32>, f: F) -> Result<Tensor<f32>>
    where
        F: Fn(&mut Tape<f32>, &promptface_tensor::ParamVars, Var) -> Result<Var>,
    {
        let s = images.shape();
        let res = self.resolution();
        if s.len() != 4 || s[1] != 3 || s[2] != res || s[3] != res {
            return Err(Error::invalid(format!(
                "expected images [N,3,{res},{res}], got shape {s:?}"
            )));
        }
        let n = s[0];
        let stride = 3 * res * res;
        let mut out: Vec<f32> = Vec::new();
        let mut width = 0usize;
        for start in (0..n).step_by(INFER_CHUNK) {
            let stop = (start + INFER_CHUNK).min(n);
            let mut tape = Tape::<f32>::new();
            let vars = tape.bind(&self.params, false);
            let chunk = tape.constant(Tensor::from_vec(
                &[stop - start, 3, res, res],
                images.data()[start * stride..stop * stride].to_vec(),
            )?);
            let y = f(&mut tape, &vars, chunk)?;
            let ys = tape.value(y).shape();
            if ys.len() != 2 || ys[0] != stop - start {
                return Err(Error::invalid(format!(
                    "image pass produced shape {ys:?}, expected [chunk, width]"
                )));
            }
            width = ys[1];
            out.extend_from_slice(tape.value(y).data());
        }
        Ok(Tensor::from_vec(&[n, width], out)?)
    }

    /// Inverts images [N, 3, res, res] to latents.
    pub fn invert_image(&self, images: &Tensor<f32>) -> Result<WPlus<f32>> {
        let s = images.shape();
        let res = self.resolution();
        if s.len() != 4 || s[1] != 3 || s[2] != res || s[3] != res {
            return Err(Error::invalid(format!(
                "inverter: expected images [N,3,{res},{res}], got shape {s:?}"
            )));
        }
        let n = s[0];
        let stride = 3 * res * res;
        let d = self.dims.style_dim;
        let mut layer_rows: Vec<Vec<f32>> = vec![Vec::with_capacity(n * d); self.dims.layers];
        for start in (0..n).step_by(INFER_CHUNK) {
            let stop = (start + INFER_CHUNK).min(n);
            let mut tape = Tape::<f32>::new();
            let vars = tape.bind(&self.params, false);
            let chunk = tape.constant(Tensor::from_vec(
                &[stop - start, 3, res, res],
                images.data()[start * stride..stop * stride].to_vec(),
            )?);
            let styles = nets::inverter_forward(&mut tape, &vars, &self.dims, chunk)?;
            for (i, sv) in styles.iter().enumerate() {
                layer_rows[i].extend_from_slice(tape.value(*sv).data());
            }
        }
        let layers = layer_rows
            .into_iter()
            .map(|rows| Tensor::from_vec(&[n, d], rows))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        WPlus::new(layers)
    }

    /// Unit-norm caption embeddings [N, d]. Empty captions are rejected.
    pub fn encode_text(&self, captions: &[&str]) -> Result<Tensor<f32>> {
        if captions.is_empty() {
            return Err(Error::invalid("no captions given"));
        }
        let v = caption::vocab_size();
        let mut bags: Vec<f32> = Vec::with_capacity(captions.len() * v);
        for c in captions {
            bags.extend_from_slice(&caption::bag_of_words(c)?);
        }
        let n = captions.len();
        let bag_t = Tensor::from_vec(&[n, v], bags)?;
        let mut tape = Tape::<f32>::new();
        let vars = tape.bind(&self.params, false);
        let bv = tape.constant(bag_t);
        let t = nets::text_embedder_forward(&mut tape, &vars, &self.dims, bv)?;
        Ok(tape.value(t).clone())
    }

    /// Unit-norm image embeddings [N, d].
    pub fn encode_image(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.image_pass(images, |tape, vars, img| {
            nets::image_embedder_forward(tape, vars, &self.dims, img)
        })
    }

    /// Unit-norm identity features [N, identity_dim].
    pub fn identity_features(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.image_pass(images, |tape, vars, img| {
            nets::identity_features_forward(tape, vars, &self.dims, img)
        })
    }

    /// Most likely identity class per image.
    pub fn classify_identity(&self, images: &Tensor<f32>) -> Result<Vec<usize>> {
        let logits = self.image_pass(images, |tape, vars, img| {
            let emb = nets::identity_embedding(tape, vars, &self.dims, img)?;
            nets::identity_logits(tape, vars, emb)
        })?;
        Ok((0..logits.shape()[0]).map(|r| argmax_row(&logits, r)).collect())
    }

    /// Degradation probability per image (sigmoid of the scorer logit;
    /// higher means more fake-looking).
    pub fn fake_scores(&self, images: &Tensor<f32>) -> Result<Vec<f32>> {
        let t = self.image_pass(images, |tape, vars, img| {
            let logit = nets::discriminator_forward(tape, vars, &self.dims, img)?;
            Ok(tape.sigmoid(logit))
        })?;
        Ok(t.data().to_vec())
    }

    /// Channel-normalized activation maps at the two perceptual layers.
    pub fn perceptual_features(&self, images: &Tensor<f32>) -> Result<[Tensor<f32>; 2]> {
        let s = images.shape();
        let res = self.resolution();
        if s.len() != 4 || s[1] != 3 || s[2] != res || s[3] != res {
            return Err(Error::invalid(format!(
                "perceptual features: expected images [N,3,{res},{res}], got shape {s:?}"
            )));
        }
        let n = s[0];
        let stride = 3 * res * res;
        let mut datas: [Vec<f32>; 2] = [Vec::new(), Vec::new()];
        let mut shapes: [Vec<usize>; 2] = [vec![], vec![]];
        for start in (0..n).step_by(INFER_CHUNK) {
            let stop = (start + INFER_CHUNK).min(n);
            let mut tape = Tape::<f32>::new();
            let vars = tape.bind(&self.params, false);
            let chunk = tape.constant(Tensor::from_vec(
                &[stop - start, 3, res, res],
                images.data()[start * stride..stop * stride].to_vec(),
            )?);
            let pred = nets::predictor_forward(&mut tape, &vars, &self.dims, chunk)?;
            let feats = nets::perceptual_from_taps(&mut tape, &pred.taps)?;
            for (i, fv) in feats.iter().enumerate() {
                datas[i].extend_from_slice(tape.value(*fv).data());
                shapes[i] = tape.value(*fv).shape().to_vec();
            }
        }
        let build = |i: usize, data: Vec<f32>| -> Result<Tensor<f32>> {
            let mut shape = shapes[i].clone();
            shape[0] = n;
            Ok(Tensor::from_vec(&shape, data)?)
        };
        let [d0, d1] = datas;
        Ok([build(0, d0)?, build(1, d1)?])
    }

    /// Pooled perceptual features [N, C0+C1] for distribution metrics: each
    /// perceptual map averaged over its spatial positions.
    pub fn pooled_features(&self, images: &Tensor<f32>) -> Result<Tensor<f32>> {
        let [a, b] = self.perceptual_features(images)?;
        let n = a.shape()[0];
        let (ca, cb) = (a.shape()[1], b.shape()[1]);
        let mut out = Vec::with_capacity(n * (ca + cb));
        let pool = |t: &Tensor<f32>, nn: usize, c: usize, out: &mut Vec<f32>| {
            let plane: usize = t.shape()[2] * t.shape()[3];
            for cc in 0..c {
                let base = (nn * c + cc) * plane;
                let sum: f32 = t.data()[base..base + plane].iter().sum();
                out.push(sum / plane as f32);
            }
        };
        for nn in 0..n {
            pool(&a, nn, ca, &mut out);
            pool(&b, nn, cb, &mut out);
        }
        Ok(Tensor::from_vec(&[n, ca + cb], out)?)
    }

    /// Attribute estimates per image. Continuous fields are clamped to
    /// [0, 1]; discrete fields are argmaxed; identity is not estimated and
    /// reads 0.
    pub fn predict_attributes(&self, images: &Tensor<f32>) -> Result<Vec<AttributeVector>> {
        let s = images.shape();
        let res = self.resolution();
        if s.len() != 4 || s[1] != 3 || s[2] != res || s[3] != res {
            return Err(Error::invalid(format!(
                "attribute predictor: expected images [N,3,{res},{res}], got shape {s:?}"
            )));
        }
        let n = s[0];
        let stride = 3 * res * res;
        let mut out = Vec::with_capacity(n);
        for start in (0..n).step_by(INFER_CHUNK) {
            let stop = (start + INFER_CHUNK).min(n);
            let mut tape = Tape::<f32>::new();
            let vars = tape.bind(&self.params, false);
            let chunk = tape.constant(Tensor::from_vec(
                &[stop - start, 3, res, res],
                images.data()[start * stride..stop * stride].to_vec(),
            )?);
            let pred = nets::predictor_forward(&mut tape, &vars, &self.dims, chunk)?;
            let cont = tape.value(pred.cont).data();
            let hair = tape.value(pred.hair);
            let skin = tape.value(pred.skin);
            let gender = tape.value(pred.gender);
            for row in 0..stop - start {
                let c = &cont[row * CONT_ATTRS..(row + 1) * CONT_ATTRS];
                out.push(AttributeVector {
                    identity_id: 0,
                    face_shape: c[0].clamp(0.0, 1.0),
                    hair_length: c[1].clamp(0.0, 1.0),
                    nose_size: c[2].clamp(0.0, 1.0),
                    lip_size: c[3].clamp(0.0, 1.0),
                    hair_color: argmax_row(hair, row),
                    skin_color: argmax_row(skin, row),
                    age: c[4].clamp(0.0, 1.0),
                    gender: argmax_row(gender, row),
                    micro_density: c[5].clamp(0.0, 1.0),
                });
            }
        }
        Ok(out)
    }
}

fn argmax_row(t: &Tensor<f32>, row: usize) -> usize {
    let k = t.shape()[1];
    let vals = &t.data()[row * k..(row + 1) * k];
    let mut best = 0usize;
    for (i, v) in vals.iter().enumerate() {
        if *v > vals[best] {
            best = i;
        }
    }
    best
}

/// Convenience for tests and the demo: a bundle with freshly seeded,
/// untrained parameters.
pub fn untrained_bundle(cfg: &BackboneConfig, identities: usize) -> Result<BackboneBundle> {
    let dims = NetDims::from_config(cfg, identities)?;
    let split = crate::latent::LevelSplit::proportional(dims.layers)?;
    let codebook = Codebook::new(split, dims.style_dim, cfg.seed)?;
    let mut params = NamedParamSet::new();
    let mut rng = promptface_tensor::init::rng(cfg.seed);
    nets::init_generator(&mut params, &dims, &mut rng)?;
    nets::init_discriminator(&mut params, &dims, &mut rng)?;
    nets::init_inverter(&mut params, &dims, &mut rng)?;
    nets::init_image_embedder(&mut params, &dims, &mut rng)?;
    nets::init_text_embedder(&mut params, &dims, &mut rng)?;
    nets::init_identity_net(&mut params, &dims, &mut rng)?;
    nets::init_predictor(&mut params, &dims, &mut rng)?;
    let report = PretrainReport {
        version: BUNDLE_VERSION,
        config_hash: String::new(),
        seed: cfg.seed,
        gates_enforced: false,
        usable: true,
        gates: Vec::new(),
    };
    BackboneBundle::new(params, codebook, dims, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::AttributePool;
    use promptface_tensor::init;

    fn small_cfg() -> BackboneConfig {
        BackboneConfig {
            layers: 8,
            style_dim: 64,
            ..BackboneConfig::default()
        }
    }

    #[test]
    fn bundle_round_trips_through_disk() {
        let bundle = untrained_bundle(&small_cfg(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bundle");
        bundle.save(&path).unwrap();
        let back = BackboneBundle::load(&path).unwrap();
        assert_eq!(back.dims(), bundle.dims());
        assert_eq!(back.hash(), bundle.hash());
        assert_eq!(back.params().len(), bundle.params().len());
        assert_eq!(back.report().seed, bundle.report().seed);
        // Frozen on both sides.
        assert_eq!(back.params().trainable_count(), 0);
        assert_eq!(bundle.params().trainable_count(), 0);
    }

    #[test]
    fn generate_then_invert_shapes_line_up() {
        let bundle = untrained_bundle(&small_cfg(), 5).unwrap();
        let pool = AttributePool::new(5, 3).unwrap();
        let mut rng = init::rng(9);
        let attrs: Vec<_> = (0..3).map(|_| pool.sample(&mut rng)).collect();
        let w = bundle.attrs_to_wplus(&attrs).unwrap();
        let imgs = bundle.generate_image(&w).unwrap();
        assert_eq!(imgs.shape(), [3, 3, 32, 32]);
        let w2 = bundle.invert_image(&imgs).unwrap();
        assert_eq!(w2.layer_count(), 8);
        assert_eq!(w2.batch(), 3);
        assert_eq!(w2.dim(), 64);
    }

    #[test]
    fn chunked_inference_matches_single_pass() {
        // 130 images straddles the chunk boundary; results must not depend
        // on how the batch was sliced.
        let bundle = untrained_bundle(&small_cfg(), 5).unwrap();
        let mut rng = init::rng(4);
        let imgs = init::uniform(&mut rng, &[INFER_CHUNK + 2, 3, 32, 32], 0.0, 1.0).unwrap();
        let all = bundle.encode_image(&imgs).unwrap();
        let first = Tensor::from_vec(
            &[1, 3, 32, 32],
            imgs.data()[..3 * 32 * 32].to_vec(),
        )
        .unwrap();
        let single = bundle.encode_image(&first).unwrap();
        assert_eq!(&all.data()[..64], single.data());
        let last_off = (INFER_CHUNK + 1) * 3 * 32 * 32;
        let last = Tensor::from_vec(&[1, 3, 32, 32], imgs.data()[last_off..].to_vec()).unwrap();
        let single_last = bundle.encode_image(&last).unwrap();
        assert_eq!(&all.data()[(INFER_CHUNK + 1) * 64..], single_last.data());
    }

    #[test]
    fn text_encoding_rejects_empty_and_normalizes() {
        let bundle = untrained_bundle(&small_cfg(), 5).unwrap();
        assert!(bundle.encode_text(&[""]).is_err());
        assert!(bundle.encode_text(&[]).is_err());
        let t = bundle.encode_text(&["a man", "an elderly woman"]).unwrap();
        assert_eq!(t.shape(), [2, 64]);
        for row in 0..2 {
            let norm: f32 = t.data()[row * 64..(row + 1) * 64]
                .iter()
                .map(|v| v * v)
                .sum::<f32>()
                .sqrt();
            assert!((norm - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn predicted_attributes_stay_in_range() {
        let bundle = untrained_bundle(&small_cfg(), 5).unwrap();
        let mut rng = init::rng(8);
        let imgs = init::uniform(&mut rng, &[4, 3, 32, 32], 0.0, 1.0).unwrap();
        let attrs = bundle.predict_attributes(&imgs).unwrap();
        assert_eq!(attrs.len(), 4);
        for a in &attrs {
            a.validate(5).unwrap();
        }
    }

    #[test]
    fn unusable_bundles_refuse_service() {
        let mut bundle = untrained_bundle(&small_cfg(), 5).unwrap();
        bundle.report.usable = false;
        assert!(bundle.ensure_usable().is_err());
    }
}
