//! Network graphs for the frozen asset stack: style generator, discriminator,
//! latent inverter, joint text/image embedders, identity net, and attribute
//! predictor. Every net comes as a pair: `init_*` seeds parameters into a
//! [`NamedParamSet`], `*_forward` replays the graph on a tape from bound vars,
//! so the same definitions serve f32 training and f64 gradient checks.

use crate::config::BackboneConfig;
use crate::synth::caption;
use crate::synth::{GENDERS, HAIR_COLORS, SKIN_COLORS};
use crate::{Error, Result};
use promptface_tensor::{init, NamedParamSet, ParamVars, Scalar, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

/// Continuous attribute count, canonical order: face_shape, hair_length,
/// nose_size, lip_size, age, micro_density.
pub const CONT_ATTRS: usize = 6;

/// Learnable InfoNCE temperature starts at 0.07; the parameter stores its
/// negated log so scaling is exp(log_scale).
pub const LOG_SCALE_INIT: f64 = 2.659_260_036_932_778;

/// Generator channel width per stage (each stage is two conv layers).
pub const GEN_WIDTHS: [usize; 9] = [32, 32, 24, 16, 12, 8, 6, 4, 4];

pub const MAX_LAYERS: usize = 2 * GEN_WIDTHS.len();

const TEXT_HIDDEN: usize = 96;

/// Shape bundle every init/forward pair works from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetDims {
    pub layers: usize,
    pub style_dim: usize,
    pub embed_dim: usize,
    pub identity_dim: usize,
    pub identities: usize,
}

impl NetDims {
    pub fn new(
        layers: usize,
        style_dim: usize,
        embed_dim: usize,
        identity_dim: usize,
        identities: usize,
    ) -> Result<Self> {
        if !(3..=MAX_LAYERS).contains(&layers) {
            return Err(Error::invalid(format!(
                "layer count {layers} outside supported range 3..={MAX_LAYERS}"
            )));
        }
        if style_dim == 0 || embed_dim == 0 || identity_dim == 0 {
            return Err(Error::invalid("network dims must be positive"));
        }
        if identities < 2 {
            return Err(Error::invalid(format!(
                "identity head needs at least 2 classes, got {identities}"
            )));
        }
        Ok(NetDims {
            layers,
            style_dim,
            embed_dim,
            identity_dim,
            identities,
        })
    }

    pub fn from_config(cfg: &BackboneConfig, identities: usize) -> Result<Self> {
        NetDims::new(
            cfg.layers,
            cfg.style_dim,
            cfg.embed_dim,
            cfg.identity_dim,
            identities,
        )
    }

    /// Output resolution: the base is 4x4 and every second layer upsamples.
    pub fn resolution(&self) -> usize {
        4 << ((self.layers - 1) / 2)
    }

    /// Conv-pool block count of the feature trunks (final spatial size 4x4).
    pub fn blocks(&self) -> usize {
        self.resolution().trailing_zeros() as usize - 2
    }
}

pub(crate) fn pvar(vars: &ParamVars, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::invalid(format!("missing parameter '{name}'")))
}

pub(crate) fn init_fc(
    params: &mut NamedParamSet<f32>,
    name: &str,
    ind: usize,
    outd: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    params.insert(format!("{name}.w"), init::kaiming(rng, &[ind, outd], ind), true)?;
    params.insert(format!("{name}.b"), Tensor::zeros(&[outd]), true)?;
    Ok(())
}

pub(crate) fn fc<T: Scalar>(tape: &mut Tape<T>, vars: &ParamVars, name: &str, x: Var) -> Result<Var> {
    let w = pvar(vars, &format!("{name}.w"))?;
    let b = pvar(vars, &format!("{name}.b"))?;
    Ok(tape.affine(x, w, b)?)
}

fn want_image<T: Scalar>(tape: &Tape<T>, image: Var, res: usize, what: &str) -> Result<usize> {
    let s = tape.value(image).shape();
    if s.len() != 4 || s[1] != 3 || s[2] != res || s[3] != res {
        return Err(Error::invalid(format!(
            "{what}: expected images [N,3,{res},{res}], got shape {s:?}"
        )));
    }
    Ok(s[0])
}

// ── style generator ──────────────────────────────────────────────────

fn gen_conv_channels(i: usize) -> (usize, usize) {
    (GEN_WIDTHS[i.saturating_sub(1) / 2], GEN_WIDTHS[i / 2])
}

pub fn init_generator(
    params: &mut NamedParamSet<f32>,
    dims: &NetDims,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    params.insert("gen.base", init::randn(rng, &[GEN_WIDTHS[0], 4, 4], 1.0), true)?;
    // Small style weights keep modulation near identity at init.
    let sstd = 0.5 / (dims.style_dim as f64).sqrt();
    for i in 0..dims.layers {
        let (ci, co) = gen_conv_channels(i);
        params.insert(
            format!("gen.l{i:02}.conv.w"),
            init::kaiming(rng, &[co, ci, 3, 3], ci * 9),
            true,
        )?;
        params.insert(format!("gen.l{i:02}.conv.b"), Tensor::zeros(&[co]), true)?;
        for half in ["scale", "shift"] {
            params.insert(
                format!("gen.l{i:02}.{half}.w"),
                init::randn(rng, &[dims.style_dim, co], sstd),
                true,
            )?;
            params.insert(format!("gen.l{i:02}.{half}.b"), Tensor::zeros(&[co]), true)?;
        }
    }
    let last = GEN_WIDTHS[(dims.layers - 1) / 2];
    params.insert("gen.rgb.w", init::kaiming(rng, &[3, last, 3, 3], last * 9), true)?;
    params.insert("gen.rgb.b", Tensor::zeros(&[3]), true)?;
    Ok(())
}

/// Runs the generator over per-layer style rows (each [N, D]) and returns
/// images [N, 3, res, res] with pixels in [0, 1].
pub fn generator_forward<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    dims: &NetDims,
    styles: &[Var],
) -> Result<Var> {
    if styles.len() != dims.layers {
        return Err(Error::invalid(format!(
            "generator takes {} style vectors, got {}",
            dims.layers,
            styles.len()
        )));
    }
    let n = tape.value(styles[0]).shape()[0];
    for (i, s) in styles.iter().enumerate() {
        let shp = tape.value(*s).shape();
        if shp != [n, dims.style_dim] {
            return Err(Error::invalid(format!(
                "style {i}: expected [{n}, {}], got {shp:?}",
                dims.style_dim
            )));
        }
    }
    let base = pvar(vars, "gen.base")?;
    let mut x = tape.broadcast_n(base, n)?;
    for i in 0..dims.layers {
        if i >= 2 && i % 2 == 0 {
            x = tape.upsample2x(x)?;
        }
        let w = pvar(vars, &format!("gen.l{i:02}.conv.w"))?;
        let b = pvar(vars, &format!("gen.l{i:02}.conv.b"))?;
        x = tape.conv3x3(x, w, b)?;
        x = tape.normalize(x, 2)?;
        let scale = fc(tape, vars, &format!("gen.l{i:02}.scale"), styles[i])?;
        let shift = fc(tape, vars, &format!("gen.l{i:02}.shift"), styles[i])?;
        x = tape.modulate(x, scale, shift)?;
        x = tape.leaky_relu(x);
    }
    let w = pvar(vars, "gen.rgb.w")?;
    let b = pvar(vars, "gen.rgb.b")?;
    let rgb = tape.conv3x3(x, w, b)?;
    Ok(tape.sigmoid(rgb))
}

// ── shared conv trunk ────────────────────────────────────────────────

fn ladder(base: usize, blocks: usize) -> Vec<usize> {
    (0..blocks).map(|j| (base + 8 * j).min(base + 24)).collect()
}

fn init_trunk(
    params: &mut NamedParamSet<f32>,
    prefix: &str,
    channels: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let mut ci = 3usize;
    for (j, &co) in channels.iter().enumerate() {
        params.insert(
            format!("{prefix}.c{j}.w"),
            init::kaiming(rng, &[co, ci, 3, 3], ci * 9),
            true,
        )?;
        params.insert(format!("{prefix}.c{j}.b"), Tensor::zeros(&[co]), true)?;
        ci = co;
    }
    Ok(())
}

/// Conv -> leaky relu -> 2x pool, repeated until spatial size 4, then
/// flattened. Also returns the post-activation map of every block.
fn trunk_forward<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    prefix: &str,
    image: Var,
    blocks: usize,
) -> Result<(Var, Vec<Var>)> {
    let mut taps = Vec::with_capacity(blocks);
    let mut x = image;
    for j in 0..blocks {
        let w = pvar(vars, &format!("{prefix}.c{j}.w"))?;
        let b = pvar(vars, &format!("{prefix}.c{j}.b"))?;
        x = tape.conv3x3(x, w, b)?;
        x = tape.leaky_relu(x);
        taps.push(x);
        x = tape.avgpool2x(x)?;
    }
    let s = tape.value(x).shape().to_vec();
    let flat = tape.reshape(x, &[s[0], s[1] * s[2] * s[3]])?;
    Ok((flat, taps))
}

fn trunk_out(base: usize, blocks: usize) -> usize {
    ladder(base, blocks).last().copied().unwrap_or(3) * 16
}

// ── discriminator ────────────────────────────────────────────────────

const DISC_BASE: usize = 16;

pub fn init_discriminator(
    params: &mut NamedParamSet<f32>,
    dims: &NetDims,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let blocks = dims.blocks();
    init_trunk(params, "disc", &ladder(DISC_BASE, blocks), rng)?;
    init_fc(params, "disc.fc0", trunk_out(DISC_BASE, blocks), 64, rng)?;
    init_fc(params, "disc.fc1", 64, 1, rng)?;
    Ok(())
}

/// Realness logits [N, 1]; higher means the image looks degraded/fake.
pub fn discriminator_forward<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    dims: &NetDims,
    image: Var,
) -> Result<Var> {
    want_image(tape, image, dims.resolution(), "discriminator")?;
    let (flat, _) = trunk_forward(tape, vars, "disc", image, dims.blocks())?;
    let h = fc(tape, vars, "disc.fc0", flat)?;
    let h = tape.leaky_relu(h);
    fc(tape, vars, "disc.fc1", h)
}

// ── latent inverter ──────────────────────────────────────────────────

const ENC_BASE: usize = 24;
// The shared hidden layer feeds every per-layer head, so it must not be
// narrower than the combined style stack it has to describe.
const ENC_HIDDEN: usize = 512;

pub fn init_inverter(
    params: &mut NamedParamSet<f32>,
    dims: &NetDims,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let blocks = dims.blocks();
    init_trunk(params, "enc", &ladder(ENC_BASE, blocks), rng)?;
    init_fc(params, "enc.fc0", trunk_out(ENC_BASE, blocks), ENC_HIDDEN, rng)?;
    for i in 0..dims.layers {
        init_fc(params, &format!("enc.head{i:02}"), ENC_HIDDEN, dims.style_dim, rng)?;
    }
    Ok(())
}

/// One style row [N, D] per generator layer.
pub fn inverter_forward<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    dims: &NetDims,
    image: Var,
) -> Result<Vec<Var>> {
    want_image(tape, image, dims.resolution(), "inverter")?;
    let (flat, _) = trunk_forward(tape, vars, "enc", image, dims.blocks())?;
    let h = fc(tape, vars, "enc.fc0", flat)?;
    let h = tape.leaky_relu(h);
    (0..dims.layers)
        .map(|i| fc(tape, vars, &format!("enc.head{i:02}"), h))
        .collect()
}

// ── joint text/image embedders ───────────────────────────────────────

const IMGEMB_BASE: usize = 20;

pub fn init_image_embedder(
    params: &mut NamedParamSet<f32>,
    dims: &NetDims,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let blocks = dims.blocks();
    init_trunk(params, "imgemb", &ladder(IMGEMB_BASE, blocks), rng)?;
    init_fc(params, "imgemb.fc0", trunk_out(IMGEMB_BASE, blocks), 128, rng)?;
    init_fc(params, "imgemb.fc1", 128, dims.embed_dim, rng)?;
    Ok(())
}

/// Unit-norm image embeddings [N, d].
pub fn image_embedder_forward<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    dims: &NetDims,
    image: Var,
) -> Result<Var> {
    want_image(tape, image, dims.resolution(), "image embedder")?;
    let (flat, _) = trunk_forward(tape, vars, "imgemb", image, dims.blocks())?;
    let h = fc(tape, vars, "imgemb.fc0", flat)?;
    let h = tape.leaky_relu(h);
    let h = fc(tape, vars, "imgemb.fc1", h)?;
    Ok(tape.l2_normalize_rows(h)?)
}

pub fn init_text_embedder(
    params: &mut NamedParamSet<f32>,
    dims: &NetDims,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    init_fc(params, "txtemb.fc0", caption::vocab_size(), TEXT_HIDDEN, rng)?;
    init_fc(params, "txtemb.fc1", TEXT_HIDDEN, TEXT_HIDDEN, rng)?;
    init_fc(params, "txtemb.fc2", TEXT_HIDDEN, dims.embed_dim, rng)?;
    params.insert(
        "emb.log_scale",
        Tensor::from_vec(&[1], vec![LOG_SCALE_INIT as f32])?,
        true,
    )?;
    Ok(())
}

/// Unit-norm caption embeddings [N, d] from bag-of-words rows [N, vocab].
/// fc0 acts as the word-embedding table (a normalized bag times the table is
/// a mean-pooled embedding); two nonlinear layers follow.
pub fn text_embedder_forward<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    dims: &NetDims,
    bags: Var,
) -> Result<Var> {
    let s = tape.value(bags).shape();
    if s.len() != 2 || s[1] != caption::vocab_size() {
        return Err(Error::invalid(format!(
            "text embedder: expected [N, {}] bags, got shape {s:?}",
            caption::vocab_size()
        )));
    }
    let _ = dims;
    let h = fc(tape, vars, "txtemb.fc0", bags)?;
    let h = fc(tape, vars, "txtemb.fc1", h)?;
    let h = tape.leaky_relu(h);
    let h = fc(tape, vars, "txtemb.fc2", h)?;
    let h = tape.leaky_relu(h);
    Ok(tape.l2_normalize_rows(h)?)
}

// ── identity net ─────────────────────────────────────────────────────

const IDENT_BASE: usize = 16;

pub fn init_identity_net(
    params: &mut NamedParamSet<f32>,
    dims: &NetDims,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let blocks = dims.blocks();
    init_trunk(params, "ident", &ladder(IDENT_BASE, blocks), rng)?;
    init_fc(params, "ident.fc0", trunk_out(IDENT_BASE, blocks), 64, rng)?;
    init_fc(params, "ident.emb", 64, dims.identity_dim, rng)?;
    init_fc(params, "ident.head", dims.identity_dim, dims.identities, rng)?;
    Ok(())
}

/// Pre-normalization identity embedding [N, identity_dim]; the classifier
/// head reads this, while similarity metrics use the normalized form.
pub fn identity_embedding<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    dims: &NetDims,
    image: Var,
) -> Result<Var> {
    want_image(tape, image, dims.resolution(), "identity net")?;
    let (flat, _) = trunk_forward(tape, vars, "ident", image, dims.blocks())?;
    let h = fc(tape, vars, "ident.fc0", flat)?;
    let h = tape.leaky_relu(h);
    fc(tape, vars, "ident.emb", h)
}

/// Unit-norm identity features [N, identity_dim].
pub fn identity_features_forward<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    dims: &NetDims,
    image: Var,
) -> Result<Var> {
    let emb = identity_embedding(tape, vars, dims, image)?;
    Ok(tape.l2_normalize_rows(emb)?)
}

/// Identity class logits [N, K] from the pre-norm embedding.
pub fn identity_logits<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    emb: Var,
) -> Result<Var> {
    fc(tape, vars, "ident.head", emb)
}

// ── attribute predictor ──────────────────────────────────────────────

const PRED_BASE: usize = 20;

/// All predictor outputs plus the two trunk activation maps that double as
/// the perceptual feature layers.
pub struct PredictorGraph {
    /// [N, 6] continuous estimates in [0, 1].
    pub cont: Var,
    /// [N, 6] hair-color logits.
    pub hair: Var,
    /// [N, 4] skin-color logits.
    pub skin: Var,
    /// [N, 2] gender logits.
    pub gender: Var,
    /// Post-activation maps of the first two blocks, unnormalized.
    pub taps: [Var; 2],
}

pub fn init_predictor(
    params: &mut NamedParamSet<f32>,
    dims: &NetDims,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let blocks = dims.blocks();
    init_trunk(params, "pred", &ladder(PRED_BASE, blocks), rng)?;
    init_fc(params, "pred.fc0", trunk_out(PRED_BASE, blocks), 160, rng)?;
    init_fc(params, "pred.cont", 160, CONT_ATTRS, rng)?;
    init_fc(params, "pred.hair", 160, HAIR_COLORS, rng)?;
    init_fc(params, "pred.skin", 160, SKIN_COLORS, rng)?;
    init_fc(params, "pred.gender", 160, GENDERS, rng)?;
    Ok(())
}

pub fn predictor_forward<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    dims: &NetDims,
    image: Var,
) -> Result<PredictorGraph> {
    want_image(tape, image, dims.resolution(), "attribute predictor")?;
    if dims.blocks() < 2 {
        return Err(Error::invalid(
            "attribute predictor needs resolution >= 16 for its two feature taps",
        ));
    }
    let (flat, taps) = trunk_forward(tape, vars, "pred", image, dims.blocks())?;
    let h = fc(tape, vars, "pred.fc0", flat)?;
    let h = tape.leaky_relu(h);
    let cont = fc(tape, vars, "pred.cont", h)?;
    let cont = tape.sigmoid(cont);
    Ok(PredictorGraph {
        cont,
        hair: fc(tape, vars, "pred.hair", h)?,
        skin: fc(tape, vars, "pred.skin", h)?,
        gender: fc(tape, vars, "pred.gender", h)?,
        taps: [taps[0], taps[1]],
    })
}

/// Channel-normalized perceptual features at the two designated layers.
pub fn perceptual_from_taps<T: Scalar>(tape: &mut Tape<T>, taps: &[Var; 2]) -> Result<[Var; 2]> {
    Ok([
        tape.l2_normalize_channels(taps[0])?,
        tape.l2_normalize_channels(taps[1])?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use promptface_tensor::init::rng;

    fn desk() -> NetDims {
        NetDims::new(8, 64, 64, 32, 20).unwrap()
    }

    fn styles_for<T: Scalar>(tape: &mut Tape<T>, dims: &NetDims, n: usize, seed: u64) -> Vec<Var> {
        let mut r = rng(seed);
        (0..dims.layers)
            .map(|_| tape.constant(init::randn(&mut r, &[n, dims.style_dim], 1.0)))
            .collect()
    }

    #[test]
    fn resolution_tracks_layer_count() {
        assert_eq!(NetDims::new(3, 8, 8, 8, 2).unwrap().resolution(), 8);
        assert_eq!(desk().resolution(), 32);
        assert_eq!(NetDims::new(18, 512, 64, 32, 20).unwrap().resolution(), 1024);
        assert_eq!(desk().blocks(), 3);
        assert!(NetDims::new(2, 8, 8, 8, 2).is_err());
        assert!(NetDims::new(19, 8, 8, 8, 2).is_err());
    }

    #[test]
    fn generator_output_shape_and_range() {
        let dims = desk();
        let mut params = NamedParamSet::new();
        init_generator(&mut params, &dims, &mut rng(1)).unwrap();
        let mut tape = Tape::<f32>::new();
        let vars = tape.bind(&params, false);
        let styles = styles_for(&mut tape, &dims, 2, 5);
        let img = generator_forward(&mut tape, &vars, &dims, &styles).unwrap();
        assert_eq!(tape.value(img).shape(), [2, 3, 32, 32]);
        assert!(tape.value(img).data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn generator_is_deterministic() {
        let dims = desk();
        let mut params = NamedParamSet::new();
        init_generator(&mut params, &dims, &mut rng(1)).unwrap();
        let run = || {
            let mut tape = Tape::<f32>::new();
            let vars = tape.bind(&params, false);
            let styles = styles_for(&mut tape, &dims, 1, 9);
            let img = generator_forward(&mut tape, &vars, &dims, &styles).unwrap();
            tape.value(img).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn generator_rejects_wrong_style_shapes() {
        let dims = desk();
        let mut params = NamedParamSet::new();
        init_generator(&mut params, &dims, &mut rng(1)).unwrap();
        let mut tape = Tape::<f32>::new();
        let vars = tape.bind(&params, false);
        let short = styles_for(&mut tape, &dims, 1, 2)[..4].to_vec();
        assert!(generator_forward(&mut tape, &vars, &dims, &short).is_err());
    }

    #[test]
    fn conformance_dims_construct_without_training() {
        let dims = NetDims::new(18, 512, 64, 32, 20).unwrap();
        let mut params = NamedParamSet::new();
        init_generator(&mut params, &dims, &mut rng(3)).unwrap();
        assert_eq!(params.tensor("gen.base").unwrap().shape(), [32, 4, 4]);
        assert_eq!(params.tensor("gen.l17.conv.w").unwrap().shape(), [4, 4, 3, 3]);
        assert_eq!(params.tensor("gen.l17.scale.w").unwrap().shape(), [512, 4]);
        assert_eq!(params.tensor("gen.rgb.w").unwrap().shape(), [3, 4, 3, 3]);
    }

    #[test]
    fn feature_net_shapes() {
        let dims = desk();
        let mut params = NamedParamSet::new();
        let mut r = rng(2);
        init_discriminator(&mut params, &dims, &mut r).unwrap();
        init_inverter(&mut params, &dims, &mut r).unwrap();
        init_image_embedder(&mut params, &dims, &mut r).unwrap();
        init_text_embedder(&mut params, &dims, &mut r).unwrap();
        init_identity_net(&mut params, &dims, &mut r).unwrap();
        init_predictor(&mut params, &dims, &mut r).unwrap();

        let mut tape = Tape::<f32>::new();
        let vars = tape.bind(&params, false);
        let img = tape.constant(init::uniform(&mut r, &[3, 3, 32, 32], 0.0, 1.0).unwrap());

        let logits = discriminator_forward(&mut tape, &vars, &dims, img).unwrap();
        assert_eq!(tape.value(logits).shape(), [3, 1]);

        let styles = inverter_forward(&mut tape, &vars, &dims, img).unwrap();
        assert_eq!(styles.len(), 8);
        assert_eq!(tape.value(styles[0]).shape(), [3, 64]);

        let ie = image_embedder_forward(&mut tape, &vars, &dims, img).unwrap();
        assert_eq!(tape.value(ie).shape(), [3, 64]);

        let emb = identity_features_forward(&mut tape, &vars, &dims, img).unwrap();
        assert_eq!(tape.value(emb).shape(), [3, 32]);
        let row = &tape.value(emb).data()[..32];
        let norm: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);

        let pred = predictor_forward(&mut tape, &vars, &dims, img).unwrap();
        assert_eq!(tape.value(pred.cont).shape(), [3, 6]);
        assert_eq!(tape.value(pred.hair).shape(), [3, 6]);
        assert_eq!(tape.value(pred.skin).shape(), [3, 4]);
        assert_eq!(tape.value(pred.gender).shape(), [3, 2]);
        assert_eq!(tape.value(pred.taps[0]).shape(), [3, 20, 32, 32]);
        assert_eq!(tape.value(pred.taps[1]).shape(), [3, 28, 16, 16]);
    }

    #[test]
    fn text_embedder_unit_rows() {
        let dims = desk();
        let mut params = NamedParamSet::new();
        init_text_embedder(&mut params, &dims, &mut rng(4)).unwrap();
        let mut tape = Tape::<f32>::new();
        let vars = tape.bind(&params, false);
        let bag = caption::bag_of_words("a young woman with long black hair").unwrap();
        let bags = tape.constant(
            Tensor::from_vec(&[1, caption::vocab_size()], bag.clone()).unwrap(),
        );
        let t = text_embedder_forward(&mut tape, &vars, &dims, bags).unwrap();
        let v = tape.value(t).data();
        let norm: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
        assert_eq!(
            params.tensor("emb.log_scale").unwrap().data()[0],
            LOG_SCALE_INIT as f32
        );
    }

    #[test]
    fn wrong_resolution_is_rejected_everywhere() {
        let dims = desk();
        let mut params = NamedParamSet::new();
        let mut r = rng(6);
        init_discriminator(&mut params, &dims, &mut r).unwrap();
        init_inverter(&mut params, &dims, &mut r).unwrap();
        let mut tape = Tape::<f32>::new();
        let vars = tape.bind(&params, false);
        let img = tape.constant(init::uniform(&mut r, &[1, 3, 16, 16], 0.0, 1.0).unwrap());
        assert!(discriminator_forward(&mut tape, &vars, &dims, img).is_err());
        assert!(inverter_forward(&mut tape, &vars, &dims, img).is_err());
    }
}
