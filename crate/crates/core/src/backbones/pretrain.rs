//! Stage-wise supervised pretraining of the backbone stack.
//!
//! Each stage trains exactly one sub-network against procedural supervision
//! while every other parameter stays frozen, then measures a quality gate on
//! the held-out split. Under `enforce_gates` the first failure aborts the
//! run but still writes the partial bundle (marked unusable) so it can be
//! inspected; otherwise failures are only recorded in the report.
//!
//! Every stage draws from its own seeded stream, so changing one stage's
//! budget never shifts another stage's data order, and rerunning the same
//! config reproduces the same bundle bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use promptface_tensor::{
    adam_step, init, AdamConfig, NamedParamSet, OptimizerState, ParamVars, Tape, Tensor, Var,
};

use crate::backbones::codebook::Codebook;
use crate::backbones::nets::{self, NetDims, CONT_ATTRS};
use crate::backbones::{BackboneBundle, GateRecord, PretrainReport, BUNDLE_VERSION};
use crate::config::BackboneConfig;
use crate::latent::LevelSplit;
use crate::synth::caption;
use crate::synth::dataset::{degrade, DatasetManifest, DegradeKind, Split};
use crate::synth::render::{render_face, FaceImage};
use crate::synth::{sample_free, AttributePool, AttributeVector, GENDERS, HAIR_COLORS, SKIN_COLORS};
use crate::{Error, Result};

const DEGRADE_KINDS: [DegradeKind; 3] = [DegradeKind::Blur, DegradeKind::Noise, DegradeKind::Mix];

/// Distractor captions per retrieval query in the embedder gate.
const RP_DISTRACTORS: usize = 99;

// ── data plumbing ────────────────────────────────────────────────────

struct SplitData {
    images: Vec<FaceImage>,
    attrs: Vec<AttributeVector>,
    identities: Vec<usize>,
    captions: Vec<Vec<String>>,
}

impl SplitData {
    fn len(&self) -> usize {
        self.images.len()
    }
}

struct StageData {
    train: SplitData,
    test: SplitData,
    pool: AttributePool,
    identities: usize,
}

fn collect_split(manifest: &DatasetManifest, split: Split) -> Result<SplitData> {
    let recs = manifest.split(split);
    let mut out = SplitData {
        images: Vec::with_capacity(recs.len()),
        attrs: Vec::with_capacity(recs.len()),
        identities: Vec::with_capacity(recs.len()),
        captions: Vec::with_capacity(recs.len()),
    };
    for rec in recs {
        let (Some(attrs), Some(identity)) = (rec.attributes, rec.identity) else {
            return Err(Error::invalid("synthetic attributes required for pretraining"));
        };
        if rec.captions.is_empty() {
            return Err(Error::invalid(format!("sample {} has no captions", rec.id)));
        }
        out.images.push(manifest.load_image(rec)?);
        out.attrs.push(attrs);
        out.identities.push(identity);
        out.captions.push(rec.captions.clone());
    }
    Ok(out)
}

impl StageData {
    fn load(manifest: &DatasetManifest) -> Result<Self> {
        let meta = manifest.meta();
        let train = collect_split(manifest, Split::Train)?;
        let test = collect_split(manifest, Split::Test)?;
        if train.len() < 2 || test.len() < 2 {
            return Err(Error::invalid(format!(
                "pretraining needs at least 2 samples per split, got {} train / {} test",
                train.len(),
                test.len()
            )));
        }
        // Same constructor arguments the dataset builder used, so identity
        // bases line up with the stored identity labels.
        let pool = AttributePool::new(meta.identities, meta.seed)?;
        Ok(StageData { train, test, pool, identities: meta.identities })
    }
}

fn images_tensor(images: &[FaceImage]) -> Result<Tensor<f32>> {
    if images.is_empty() {
        return Err(Error::invalid("empty image batch"));
    }
    let res = images[0].resolution();
    let mut data = Vec::with_capacity(images.len() * 3 * res * res);
    for im in images {
        data.extend_from_slice(im.data());
    }
    Ok(Tensor::from_vec(&[images.len(), 3, res, res], data)?)
}

fn onehot_rows(indices: &[usize], classes: usize) -> Tensor<f32> {
    let mut v = vec![0.0f32; indices.len() * classes];
    for (row, &i) in indices.iter().enumerate() {
        v[row * classes + i] = 1.0;
    }
    Tensor::from_vec(&[indices.len(), classes], v).expect("one-hot buffer is finite")
}

fn eye(n: usize) -> Tensor<f32> {
    let mut v = vec![0.0f32; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    Tensor::from_vec(&[n, n], v).expect("identity matrix is finite")
}

// ── shared graph pieces ──────────────────────────────────────────────

fn mse_to(tape: &mut Tape<f32>, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let s = tape.mul(d, d)?;
    Ok(tape.mean_all(s))
}

fn cross_entropy(tape: &mut Tape<f32>, logits: Var, onehot: Var) -> Result<Var> {
    let lsm = tape.log_softmax(logits)?;
    let picked = tape.mul(lsm, onehot)?;
    let per_row = tape.sum_trailing(picked, 1)?;
    let m = tape.mean_all(per_row);
    Ok(tape.affine_scalar(m, -1.0, 0.0)?)
}

/// One softmax direction of the symmetric contrastive loss: mean log-softmax
/// mass on the matched diagonal of the scaled similarity matrix.
fn info_nce_direction(tape: &mut Tape<f32>, a: Var, b: Var, scale: Var, eye: Var) -> Result<Var> {
    let sims = tape.matmul_nt(a, b)?;
    let scaled = tape.scale_by(sims, scale)?;
    let lsm = tape.log_softmax(scaled)?;
    let diag = tape.mul(lsm, eye)?;
    let per_row = tape.sum_trailing(diag, 1)?;
    Ok(tape.mean_all(per_row))
}

/// Per-stage optimizer wrapper: checks the loss is finite, routes gradients
/// back to named parameters, applies Adam, and logs sparse progress.
struct Trainer {
    opt: OptimizerState<f32>,
    adam: AdamConfig,
    base_lr: f64,
    stage: &'static str,
    total_steps: usize,
}

impl Trainer {
    fn new(stage: &'static str, lr: f64, total_steps: usize) -> Self {
        Trainer {
            opt: OptimizerState::new(),
            adam: AdamConfig { lr, ..AdamConfig::default() },
            base_lr: lr,
            stage,
            total_steps,
        }
    }

    fn step(
        &mut self,
        tape: &Tape<f32>,
        vars: &ParamVars,
        loss: Var,
        params: &mut NamedParamSet<f32>,
        step: usize,
    ) -> Result<f64> {
        let lv = tape.scalar_value(loss)? as f64;
        if !lv.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("{} pretraining", self.stage),
            });
        }
        // Cosine decay to 10% of the base rate; the late-training noise
        // floor of a fixed rate otherwise dominates the tighter gates.
        let progress = step as f64 / self.total_steps.max(1) as f64;
        self.adam.lr = self.base_lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * progress).cos()));
        let mut grads = tape.backward(loss)?;
        let mut by_name: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for (name, var) in vars.iter() {
            if let Some(g) = grads.take(*var) {
                by_name.insert(name.clone(), g);
            }
        }
        adam_step(params, &by_name, &mut self.opt, &self.adam)?;
        let tick = (self.total_steps / 10).max(1);
        if step % tick == 0 || step + 1 == self.total_steps {
            eprintln!(
                "[pretrain] {} step {}/{}: loss {lv:.5}",
                self.stage,
                step + 1,
                self.total_steps
            );
        }
        Ok(lv)
    }
}

/// Read-only view of the current parameters for gate evaluation.
fn snapshot(params: &NamedParamSet<f32>, codebook: &Codebook, dims: &NetDims) -> Result<BackboneBundle> {
    BackboneBundle::new(
        params.clone(),
        codebook.clone(),
        *dims,
        PretrainReport {
            version: BUNDLE_VERSION,
            config_hash: String::new(),
            seed: 0,
            gates_enforced: false,
            usable: true,
            gates: Vec::new(),
        },
    )
}

fn gate(stage: &str, name: &str, achieved: f64, required: f64, higher: bool) -> GateRecord {
    let passed = achieved.is_finite()
        && if higher { achieved >= required } else { achieved <= required };
    GateRecord {
        stage: stage.to_string(),
        gate: name.to_string(),
        achieved,
        required,
        higher_is_better: higher,
        passed,
    }
}

// ── stages ───────────────────────────────────────────────────────────

/// Generator: regress rendered faces from their codebook latents. Half of
/// every batch re-visits stored training samples, half renders fresh
/// attribute draws so style coverage is not limited to the dataset.
fn train_generator(
    params: &mut NamedParamSet<f32>,
    codebook: &Codebook,
    dims: &NetDims,
    data: &StageData,
    cfg: &BackboneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let res = dims.resolution();
    let b = cfg.batch_size.max(1);
    let mut tr = Trainer::new("generator", cfg.learning_rate, cfg.generator_steps);
    for step in 0..cfg.generator_steps {
        let mut attrs: Vec<AttributeVector> = Vec::with_capacity(b);
        let mut target = Vec::with_capacity(b * 3 * res * res);
        for k in 0..b {
            if k % 2 == 0 {
                let i = rng.gen_range(0..data.train.len());
                attrs.push(data.train.attrs[i]);
                target.extend_from_slice(data.train.images[i].data());
            } else {
                let a = sample_free(data.identities, rng);
                target.extend_from_slice(render_face(&a, res)?.data());
                attrs.push(a);
            }
        }
        let w = codebook.attrs_to_wplus(&attrs)?;
        let mut tape = Tape::<f32>::new();
        let vars = tape.bind(params, true);
        let styles: Vec<Var> = w.layers().iter().map(|l| tape.constant(l.clone())).collect();
        let img = nets::generator_forward(&mut tape, &vars, dims, &styles)?;
        let tgt = tape.constant(Tensor::from_vec(&[b, 3, res, res], target)?);
        let loss = mse_to(&mut tape, img, tgt)?;
        tr.step(&tape, &vars, loss, params, step)?;
    }
    Ok(())
}

fn gate_generator(
    snap: &BackboneBundle,
    data: &StageData,
    _rng: &mut ChaCha8Rng,
) -> Result<Vec<GateRecord>> {
    let w = snap.attrs_to_wplus(&data.test.attrs)?;
    let imgs = snap.generate_image(&w)?;
    let mse = mse_vs_images(&imgs, &data.test.images);
    let psnr = -10.0 * mse.max(1e-12).log10();
    Ok(vec![gate("generator", "test_psnr_db", psnr, 20.0, true)])
}

/// Degradation scorer: clean renders labeled 0, corrupted copies labeled 1,
/// binary cross-entropy on the logit.
fn train_discriminator(
    params: &mut NamedParamSet<f32>,
    _codebook: &Codebook,
    dims: &NetDims,
    data: &StageData,
    cfg: &BackboneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let res = dims.resolution();
    let b = cfg.batch_size.max(2);
    let mut tr = Trainer::new("discriminator", cfg.learning_rate, cfg.discriminator_steps);
    let mut kind_cursor = 0usize;
    for step in 0..cfg.discriminator_steps {
        let mut rows = Vec::with_capacity(b * 3 * res * res);
        let mut labels = Vec::with_capacity(b);
        for k in 0..b {
            let img = &data.train.images[rng.gen_range(0..data.train.len())];
            if k % 2 == 0 {
                rows.extend_from_slice(img.data());
                labels.push(0.0);
            } else {
                let kind = DEGRADE_KINDS[kind_cursor % DEGRADE_KINDS.len()];
                kind_cursor += 1;
                let strength = rng.gen_range(0.5..1.0f32);
                let seed = rng.gen::<u64>();
                rows.extend_from_slice(degrade(img, kind, strength, seed).data());
                labels.push(1.0);
            }
        }
        let mut tape = Tape::<f32>::new();
        let vars = tape.bind(params, true);
        let x = tape.constant(Tensor::from_vec(&[b, 3, res, res], rows)?);
        let logits = nets::discriminator_forward(&mut tape, &vars, dims, x)?;
        let y = tape.constant(Tensor::from_vec(&[b, 1], labels)?);
        // BCE with logits: mean(softplus(x) - y*x); stable for any logit.
        let sp = tape.softplus(logits);
        let yx = tape.mul(y, logits)?;
        let diff = tape.sub(sp, yx)?;
        let loss = tape.mean_all(diff);
        tr.step(&tape, &vars, loss, params, step)?;
    }
    Ok(())
}

fn gate_discriminator(
    snap: &BackboneBundle,
    data: &StageData,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<GateRecord>> {
    let clean_scores = snap.fake_scores(&images_tensor(&data.test.images)?)?;
    let degraded: Vec<FaceImage> = data
        .test
        .images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let kind = DEGRADE_KINDS[i % DEGRADE_KINDS.len()];
            let strength = rng.gen_range(0.5..1.0f32);
            degrade(img, kind, strength, rng.gen())
        })
        .collect();
    let fake_scores = snap.fake_scores(&images_tensor(&degraded)?)?;
    let auc = midrank_auc(&clean_scores, &fake_scores);
    Ok(vec![gate("discriminator", "degradation_auc", auc, 0.95, true)])
}

/// Inverter: regress the latent that produced an image. Half of every batch
/// pairs latents with the frozen generator's output (the distribution the
/// editing pipeline inverts), half with ground-truth renders.
fn train_inverter(
    params: &mut NamedParamSet<f32>,
    codebook: &Codebook,
    dims: &NetDims,
    data: &StageData,
    cfg: &BackboneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let res = dims.resolution();
    let b = cfg.batch_size.max(2);
    let generator = snapshot(params, codebook, dims)?;
    let mut tr = Trainer::new("inverter", cfg.learning_rate, cfg.inverter_steps);
    for step in 0..cfg.inverter_steps {
        let attrs: Vec<AttributeVector> =
            (0..b).map(|_| sample_free(data.identities, rng)).collect();
        let w = codebook.attrs_to_wplus(&attrs)?;
        let half = b / 2;
        let first = generator.generate_image(&w.select(&(0..half).collect::<Vec<_>>())?)?;
        let mut rows = Vec::with_capacity(b * 3 * res * res);
        rows.extend_from_slice(first.data());
        for a in &attrs[half..] {
            rows.extend_from_slice(render_face(a, res)?.data());
        }
        let mut tape = Tape::<f32>::new();
        let vars = tape.bind(params, true);
        let x = tape.constant(Tensor::from_vec(&[b, 3, res, res], rows)?);
        let styles = nets::inverter_forward(&mut tape, &vars, dims, x)?;
        let mut acc: Option<Var> = None;
        for (i, sv) in styles.iter().enumerate() {
            let tgt = tape.constant(w.layer(i).clone());
            let m = mse_to(&mut tape, *sv, tgt)?;
            acc = Some(match acc {
                Some(sum) => tape.add(sum, m)?,
                None => m,
            });
        }
        let total = acc.expect("generator has at least one layer");
        let loss = tape.affine_scalar(total, 1.0 / dims.layers as f64, 0.0)?;
        tr.step(&tape, &vars, loss, params, step)?;
    }
    Ok(())
}

fn gate_inverter(
    snap: &BackboneBundle,
    data: &StageData,
    _rng: &mut ChaCha8Rng,
) -> Result<Vec<GateRecord>> {
    // Latent recovery on generated images, against the scale of the latents
    // themselves.
    let w = snap.attrs_to_wplus(&data.test.attrs)?;
    let generated = snap.generate_image(&w)?;
    let w_hat = snap.invert_image(&generated)?;
    let latent_mse = w_hat.mse(&w)?;
    let bound = 0.05 * w.mean_square();
    // Pixel round-trip on real renders.
    let test_imgs = images_tensor(&data.test.images)?;
    let w2 = snap.invert_image(&test_imgs)?;
    let rebuilt = snap.generate_image(&w2)?;
    let pixel_mse = mse_vs_images(&rebuilt, &data.test.images);
    Ok(vec![
        gate("inverter", "latent_mse", latent_mse, bound, false),
        gate("inverter", "roundtrip_pixel_mse", pixel_mse, 0.01, false),
    ])
}

/// Joint embedders: symmetric contrastive loss over image/caption batches
/// with a learned temperature.
fn train_embedders(
    params: &mut NamedParamSet<f32>,
    _codebook: &Codebook,
    dims: &NetDims,
    data: &StageData,
    cfg: &BackboneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let res = dims.resolution();
    let b = cfg.embedder_batch_size.max(2);
    let v = caption::vocab_size();
    let mut tr = Trainer::new("embedders", cfg.learning_rate, cfg.embedder_steps);
    for step in 0..cfg.embedder_steps {
        let mut rows = Vec::with_capacity(b * 3 * res * res);
        let mut bags = Vec::with_capacity(b * v);
        for k in 0..b {
            let text = if k % 2 == 0 {
                let i = rng.gen_range(0..data.train.len());
                rows.extend_from_slice(data.train.images[i].data());
                let caps = &data.train.captions[i];
                caps[rng.gen_range(0..caps.len())].clone()
            } else {
                let a = sample_free(data.identities, rng);
                rows.extend_from_slice(render_face(&a, res)?.data());
                caption::make_caption(&a, rng.gen())
            };
            bags.extend_from_slice(&caption::bag_of_words(&text)?);
        }
        let mut tape = Tape::<f32>::new();
        let vars = tape.bind(params, true);
        let x = tape.constant(Tensor::from_vec(&[b, 3, res, res], rows)?);
        let bag = tape.constant(Tensor::from_vec(&[b, v], bags)?);
        let ie = nets::image_embedder_forward(&mut tape, &vars, dims, x)?;
        let te = nets::text_embedder_forward(&mut tape, &vars, dims, bag)?;
        let log_scale = nets::pvar(&vars, "emb.log_scale")?;
        let scale = tape.exp(log_scale);
        let diag = tape.constant(eye(b));
        let i2t = info_nce_direction(&mut tape, ie, te, scale, diag)?;
        let t2i = info_nce_direction(&mut tape, te, ie, scale, diag)?;
        let both = tape.add(i2t, t2i)?;
        let loss = tape.affine_scalar(both, -0.5, 0.0)?;
        tr.step(&tape, &vars, loss, params, step)?;
    }
    Ok(())
}

fn gate_embedders(
    snap: &BackboneBundle,
    data: &StageData,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<GateRecord>> {
    let n = data.test.len();
    let img_emb = snap.encode_image(&images_tensor(&data.test.images)?)?;
    let d = img_emb.shape()[1];
    let mut hits = 0usize;
    for i in 0..n {
        let own = &data.test.captions[i];
        let mut caps: Vec<&str> = Vec::with_capacity(1 + RP_DISTRACTORS);
        caps.push(&own[rng.gen_range(0..own.len())]);
        while caps.len() < 1 + RP_DISTRACTORS {
            let j = rng.gen_range(0..n);
            if j == i {
                continue;
            }
            let other = &data.test.captions[j];
            caps.push(&other[rng.gen_range(0..other.len())]);
        }
        let texts = snap.encode_text(&caps)?;
        let iv = &img_emb.data()[i * d..(i + 1) * d];
        let sim = |row: usize| -> f32 {
            texts.data()[row * d..(row + 1) * d]
                .iter()
                .zip(iv)
                .map(|(a, b)| a * b)
                .sum()
        };
        let true_sim = sim(0);
        // A tie with any distractor counts as a miss.
        if (1..caps.len()).all(|r| sim(r) < true_sim) {
            hits += 1;
        }
    }
    let rp = hits as f64 / n as f64;
    Ok(vec![gate("embedders", "r_precision_at_99", rp, 0.9, true)])
}

/// Identity net: classify which pool identity produced the face.
fn train_identity(
    params: &mut NamedParamSet<f32>,
    _codebook: &Codebook,
    dims: &NetDims,
    data: &StageData,
    cfg: &BackboneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let res = dims.resolution();
    let b = cfg.batch_size.max(1);
    let classes = dims.identities;
    let mut tr = Trainer::new("identity", cfg.learning_rate, cfg.identity_steps);
    for step in 0..cfg.identity_steps {
        let mut rows = Vec::with_capacity(b * 3 * res * res);
        let mut labels = Vec::with_capacity(b);
        for k in 0..b {
            if k % 2 == 0 {
                let i = rng.gen_range(0..data.train.len());
                rows.extend_from_slice(data.train.images[i].data());
                labels.push(data.train.identities[i]);
            } else {
                let id = rng.gen_range(0..classes);
                let a = data.pool.sample_identity(id, rng);
                rows.extend_from_slice(render_face(&a, res)?.data());
                labels.push(id);
            }
        }
        let mut tape = Tape::<f32>::new();
        let vars = tape.bind(params, true);
        let x = tape.constant(Tensor::from_vec(&[b, 3, res, res], rows)?);
        let emb = nets::identity_embedding(&mut tape, &vars, dims, x)?;
        let logits = nets::identity_logits(&mut tape, &vars, emb)?;
        let y = tape.constant(onehot_rows(&labels, classes));
        let loss = cross_entropy(&mut tape, logits, y)?;
        tr.step(&tape, &vars, loss, params, step)?;
    }
    Ok(())
}

fn gate_identity(
    snap: &BackboneBundle,
    data: &StageData,
    _rng: &mut ChaCha8Rng,
) -> Result<Vec<GateRecord>> {
    let preds = snap.classify_identity(&images_tensor(&data.test.images)?)?;
    let correct = preds
        .iter()
        .zip(&data.test.identities)
        .filter(|(p, t)| p == t)
        .count();
    let acc = correct as f64 / data.test.len() as f64;
    Ok(vec![gate("identity", "test_accuracy", acc, 0.95, true)])
}

/// Attribute predictor: regression on the continuous fields plus one
/// classifier per discrete field.
fn train_predictor(
    params: &mut NamedParamSet<f32>,
    _codebook: &Codebook,
    dims: &NetDims,
    data: &StageData,
    cfg: &BackboneConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let res = dims.resolution();
    let b = cfg.batch_size.max(1);
    let mut tr = Trainer::new("predictor", cfg.learning_rate, cfg.predictor_steps);
    for step in 0..cfg.predictor_steps {
        let mut rows = Vec::with_capacity(b * 3 * res * res);
        let mut attrs: Vec<AttributeVector> = Vec::with_capacity(b);
        for k in 0..b {
            if k % 2 == 0 {
                let i = rng.gen_range(0..data.train.len());
                rows.extend_from_slice(data.train.images[i].data());
                attrs.push(data.train.attrs[i]);
            } else {
                let a = sample_free(data.identities, rng);
                rows.extend_from_slice(render_face(&a, res)?.data());
                attrs.push(a);
            }
        }
        let mut cont = Vec::with_capacity(b * CONT_ATTRS);
        let mut hair = Vec::with_capacity(b);
        let mut skin = Vec::with_capacity(b);
        let mut gender = Vec::with_capacity(b);
        for a in &attrs {
            cont.extend_from_slice(&a.continuous());
            hair.push(a.hair_color);
            skin.push(a.skin_color);
            gender.push(a.gender);
        }
        let mut tape = Tape::<f32>::new();
        let vars = tape.bind(params, true);
        let x = tape.constant(Tensor::from_vec(&[b, 3, res, res], rows)?);
        let graph = nets::predictor_forward(&mut tape, &vars, dims, x)?;
        let cont_t = tape.constant(Tensor::from_vec(&[b, CONT_ATTRS], cont)?);
        let l_cont = mse_to(&mut tape, graph.cont, cont_t)?;
        let hair_t = tape.constant(onehot_rows(&hair, HAIR_COLORS));
        let l_hair = cross_entropy(&mut tape, graph.hair, hair_t)?;
        let skin_t = tape.constant(onehot_rows(&skin, SKIN_COLORS));
        let l_skin = cross_entropy(&mut tape, graph.skin, skin_t)?;
        let gender_t = tape.constant(onehot_rows(&gender, GENDERS));
        let l_gender = cross_entropy(&mut tape, graph.gender, gender_t)?;
        // Squared error on [0,1] values is numerically small next to the
        // cross-entropies; upweighting balances the gradients.
        let l_cont = tape.affine_scalar(l_cont, 8.0, 0.0)?;
        let mut loss = tape.add(l_cont, l_hair)?;
        loss = tape.add(loss, l_skin)?;
        loss = tape.add(loss, l_gender)?;
        tr.step(&tape, &vars, loss, params, step)?;
    }
    Ok(())
}

fn gate_predictor(
    snap: &BackboneBundle,
    data: &StageData,
    _rng: &mut ChaCha8Rng,
) -> Result<Vec<GateRecord>> {
    let preds = snap.predict_attributes(&images_tensor(&data.test.images)?)?;
    let n = data.test.len();
    let mut mae = 0.0f64;
    let (mut hair_ok, mut skin_ok, mut gender_ok) = (0usize, 0usize, 0usize);
    for (p, a) in preds.iter().zip(&data.test.attrs) {
        let (pc, ac) = (p.continuous(), a.continuous());
        for j in 0..CONT_ATTRS {
            mae += (pc[j] - ac[j]).abs() as f64;
        }
        hair_ok += (p.hair_color == a.hair_color) as usize;
        skin_ok += (p.skin_color == a.skin_color) as usize;
        gender_ok += (p.gender == a.gender) as usize;
    }
    mae /= (n * CONT_ATTRS) as f64;
    Ok(vec![
        gate("predictor", "hair_color_accuracy", hair_ok as f64 / n as f64, 0.95, true),
        gate("predictor", "skin_color_accuracy", skin_ok as f64 / n as f64, 0.95, true),
        gate("predictor", "gender_accuracy", gender_ok as f64 / n as f64, 0.95, true),
        gate("predictor", "continuous_mae", mae, 0.1, false),
    ])
}

// ── metrics used by gates ────────────────────────────────────────────

fn mse_vs_images(batch: &Tensor<f32>, faces: &[FaceImage]) -> f64 {
    let stride = faces[0].data().len();
    let data = batch.data();
    let mut acc = 0.0f64;
    for (i, f) in faces.iter().enumerate() {
        for (a, b) in data[i * stride..(i + 1) * stride].iter().zip(f.data()) {
            let d = (*a - *b) as f64;
            acc += d * d;
        }
    }
    acc / (stride * faces.len()) as f64
}

/// Mann-Whitney AUC with midranked ties: the probability that a degraded
/// image scores above a clean one.
fn midrank_auc(clean: &[f32], degraded: &[f32]) -> f64 {
    if clean.is_empty() || degraded.is_empty() {
        return 0.0;
    }
    let mut all: Vec<(f32, bool)> = clean
        .iter()
        .map(|&s| (s, false))
        .chain(degraded.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut pos_rank_sum = 0.0f64;
    let mut i = 0usize;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // 1-based ranks i+1..=j share the midrank.
        let mid = (i + j + 1) as f64 / 2.0;
        for e in &all[i..j] {
            if e.1 {
                pos_rank_sum += mid;
            }
        }
        i = j;
    }
    let (np, nn) = (degraded.len() as f64, clean.len() as f64);
    (pos_rank_sum - np * (np + 1.0) / 2.0) / (np * nn)
}

// ── driver ───────────────────────────────────────────────────────────

type TrainFn = fn(
    &mut NamedParamSet<f32>,
    &Codebook,
    &NetDims,
    &StageData,
    &BackboneConfig,
    &mut ChaCha8Rng,
) -> Result<()>;

type GateFn = fn(&BackboneBundle, &StageData, &mut ChaCha8Rng) -> Result<Vec<GateRecord>>;

/// Trains every backbone in sequence and returns the frozen bundle.
///
/// Stage order follows the dependency chain: the generator first (the
/// inverter trains against its outputs), then the remaining nets. With
/// `cfg.enforce_gates` set, the first failing gate aborts with a gate error
/// after writing the partial bundle to `partial_out` (when given), marked
/// unusable; without enforcement, failures are recorded in the report and
/// the bundle stays usable.
pub fn pretrain_backbones(
    manifest: &DatasetManifest,
    cfg: &BackboneConfig,
    config_hash: &str,
    partial_out: Option<&Path>,
) -> Result<BackboneBundle> {
    let meta = manifest.meta();
    if !manifest.has_attributes() {
        return Err(Error::invalid("synthetic attributes required for pretraining"));
    }
    let dims = NetDims::from_config(cfg, meta.identities)?;
    if meta.resolution != dims.resolution() {
        return Err(Error::invalid(format!(
            "dataset resolution {} does not match the {}-layer generator's {}",
            meta.resolution,
            dims.layers,
            dims.resolution()
        )));
    }
    let data = StageData::load(manifest)?;
    let split = LevelSplit::proportional(dims.layers)?;
    let codebook = Codebook::new(split, dims.style_dim, cfg.seed)?;

    let mut params = NamedParamSet::new();
    let mut init_rng = init::rng(cfg.seed);
    nets::init_generator(&mut params, &dims, &mut init_rng)?;
    nets::init_discriminator(&mut params, &dims, &mut init_rng)?;
    nets::init_inverter(&mut params, &dims, &mut init_rng)?;
    nets::init_image_embedder(&mut params, &dims, &mut init_rng)?;
    nets::init_text_embedder(&mut params, &dims, &mut init_rng)?;
    nets::init_identity_net(&mut params, &dims, &mut init_rng)?;
    nets::init_predictor(&mut params, &dims, &mut init_rng)?;

    let stages: [(&str, &[&str], TrainFn, GateFn); 6] = [
        ("generator", &["gen."], train_generator, gate_generator),
        ("discriminator", &["disc."], train_discriminator, gate_discriminator),
        ("inverter", &["enc."], train_inverter, gate_inverter),
        ("embedders", &["imgemb.", "txtemb.", "emb."], train_embedders, gate_embedders),
        ("identity", &["ident."], train_identity, gate_identity),
        ("predictor", &["pred."], train_predictor, gate_predictor),
    ];

    let mut gates: Vec<GateRecord> = Vec::new();
    for (idx, (name, prefixes, train_fn, gate_fn)) in stages.iter().enumerate() {
        // Independent stream per stage: tuning one stage's budget never
        // shifts another stage's draws.
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1 + idx as u64);
        params.set_all_trainable(false);
        for p in *prefixes {
            if params.set_trainable_prefix(p, true) == 0 {
                return Err(Error::invalid(format!(
                    "stage {name} has no parameters under `{p}`"
                )));
            }
        }
        train_fn(&mut params, &codebook, &dims, &data, cfg, &mut rng)?;
        let snap = snapshot(&params, &codebook, &dims)?;
        let records = gate_fn(&snap, &data, &mut rng)?;
        for r in &records {
            let cmp = if r.higher_is_better { ">=" } else { "<=" };
            eprintln!(
                "[pretrain] {}/{}: {:.4} (need {cmp} {:.4}) {}",
                r.stage,
                r.gate,
                r.achieved,
                r.required,
                if r.passed { "ok" } else { "FAILED" }
            );
        }
        let failed = records.iter().find(|r| !r.passed).cloned();
        gates.extend(records);
        if let (Some(f), true) = (failed, cfg.enforce_gates) {
            let report = PretrainReport {
                version: BUNDLE_VERSION,
                config_hash: config_hash.to_string(),
                seed: cfg.seed,
                gates_enforced: true,
                usable: false,
                gates,
            };
            let bundle = BackboneBundle::new(params, codebook, dims, report)?;
            if let Some(p) = partial_out {
                bundle.save(p)?;
            }
            let cmp = if f.higher_is_better { ">=" } else { "<=" };
            return Err(Error::Gate {
                gate: format!("{}.{}", f.stage, f.gate),
                achieved: f.achieved,
                required: format!("{cmp} {:.4}", f.required),
            });
        }
    }

    let report = PretrainReport {
        version: BUNDLE_VERSION,
        config_hash: config_hash.to_string(),
        seed: cfg.seed,
        gates_enforced: cfg.enforce_gates,
        usable: true,
        gates,
    };
    BackboneBundle::new(params, codebook, dims, report)
}
