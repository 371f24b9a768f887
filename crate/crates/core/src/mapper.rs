//! Level–channel text mapper over the layered style latent.
//!
//! A source latent is split into coarse/medium/fine levels. Each level owns a
//! small MLP applied to every layer row in its range (the level mapper), and
//! each layer owns a pair of text-conditioned nets producing a per-channel
//! scale and shift (the channel mapper): `c' = c + F1(t)⊙c + F2(t)`. Final
//! affines are zero-initialized, so a fresh mapper emits an exact-zero edit
//! direction and manipulation starts from pure reconstruction. Disabled
//! levels bypass both mappers: their output segments are exact zeros, and the
//! manipulation blend passes the source rows through bitwise.

use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::nets::{fc, init_fc};
use crate::backbones::BackboneBundle;
use crate::config::MapperConfig;
use crate::latent::{Level, LevelSplit, WPlus, WPlusVars};
use crate::{Error, Result};
use promptface_tensor::{checkpoint, init, NamedParamSet, ParamVars, Scalar, Tape, Tensor, Var};

pub const MAPPER_VERSION: u32 = 1;

/// Hidden depth of each level MLP (affine → normalize → lrelu, then a plain
/// zero-initialized output affine).
const LEVEL_HIDDEN_LAYERS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MapperVariant {
    /// Level MLPs plus per-layer channel pairs.
    Full,
    /// Level MLPs replaced by identity; channel pairs intact.
    LevelIdentity,
    /// Channel pairs replaced by one shared text projection added to every
    /// enabled layer; level MLPs intact.
    ChannelPlain,
}

impl MapperVariant {
    pub fn name(self) -> &'static str {
        match self {
            MapperVariant::Full => "full",
            MapperVariant::LevelIdentity => "level_identity",
            MapperVariant::ChannelPlain => "channel_plain",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(MapperVariant::Full),
            "level_identity" => Ok(MapperVariant::LevelIdentity),
            "channel_plain" => Ok(MapperVariant::ChannelPlain),
            other => Err(Error::invalid(format!("unknown mapper variant `{other}`"))),
        }
    }
}

/// Immutable shape/behavior description a mapper is built from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MapperSpec {
    pub split: LevelSplit,
    pub enabled: [bool; 3],
    pub alpha: f64,
    pub variant: MapperVariant,
    pub style_dim: usize,
    pub text_dim: usize,
}

impl MapperSpec {
    pub fn new(
        split: LevelSplit,
        enabled: [bool; 3],
        alpha: f64,
        variant: MapperVariant,
        style_dim: usize,
        text_dim: usize,
    ) -> Result<Self> {
        if style_dim == 0 || text_dim == 0 {
            return Err(Error::invalid("mapper dims must be positive"));
        }
        if !alpha.is_finite() {
            return Err(Error::invalid(format!("blend alpha {alpha} must be finite")));
        }
        Ok(MapperSpec { split, enabled, alpha, variant, style_dim, text_dim })
    }

    /// Spec for a bundle's latent space, taking alpha/levels from the run
    /// configuration.
    pub fn from_config(cfg: &MapperConfig, bundle: &BackboneBundle, variant: MapperVariant) -> Result<Self> {
        let mut enabled = [false; 3];
        for name in &cfg.enabled_levels {
            enabled[Level::parse(name)?.index()] = true;
        }
        let dims = bundle.dims();
        MapperSpec::new(
            bundle.codebook().split(),
            enabled,
            cfg.alpha,
            variant,
            dims.style_dim,
            dims.embed_dim,
        )
    }

    pub fn level_enabled(&self, level: Level) -> bool {
        self.enabled[level.index()]
    }

    pub fn enabled_level_names(&self) -> Vec<String> {
        Level::ALL
            .iter()
            .filter(|l| self.level_enabled(**l))
            .map(|l| l.name().to_string())
            .collect()
    }

    fn enabled_layers(&self) -> Vec<usize> {
        (0..self.split.layer_count())
            .filter(|&i| self.level_enabled(self.split.level_of(i).expect("layer in range")))
            .collect()
    }
}

// ── parameters ───────────────────────────────────────────────────────

fn init_fc_zero(params: &mut NamedParamSet<f32>, name: &str, ind: usize, outd: usize) -> Result<()> {
    params.insert(format!("{name}.w"), Tensor::zeros(&[ind, outd]), true)?;
    params.insert(format!("{name}.b"), Tensor::zeros(&[outd]), true)?;
    Ok(())
}

/// Seeds mapper parameters. Hidden affines are randomly initialized; every
/// output affine starts at zero, which makes the whole mapper emit zeros.
pub fn init_mapper(
    params: &mut NamedParamSet<f32>,
    spec: &MapperSpec,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let d = spec.style_dim;
    let t = spec.text_dim;
    if spec.variant != MapperVariant::LevelIdentity {
        for level in Level::ALL {
            if !spec.level_enabled(level) {
                continue;
            }
            let prefix = format!("mapper.{}", level.name());
            for k in 0..LEVEL_HIDDEN_LAYERS {
                init_fc(params, &format!("{prefix}.fc{k}"), d, d, rng)?;
            }
            init_fc_zero(params, &format!("{prefix}.fc{LEVEL_HIDDEN_LAYERS}"), d, d)?;
        }
    }
    match spec.variant {
        MapperVariant::ChannelPlain => init_fc_zero(params, "mapper.textproj", t, d)?,
        _ => {
            for i in spec.enabled_layers() {
                for pair in ["f1", "f2"] {
                    init_fc(params, &format!("mapper.l{i:02}.{pair}.fc0"), t, d, rng)?;
                    init_fc_zero(params, &format!("mapper.l{i:02}.{pair}.fc1"), d, d)?;
                }
            }
        }
    }
    Ok(())
}

// ── tape graphs ──────────────────────────────────────────────────────

/// Level MLP over one layer's rows [N, D]. Identity under `LevelIdentity`.
pub fn level_forward<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    spec: &MapperSpec,
    level: Level,
    x: Var,
) -> Result<Var> {
    if spec.variant == MapperVariant::LevelIdentity {
        return Ok(x);
    }
    let prefix = format!("mapper.{}", level.name());
    let mut h = x;
    for k in 0..LEVEL_HIDDEN_LAYERS {
        h = fc(tape, vars, &format!("{prefix}.fc{k}"), h)?;
        h = tape.normalize(h, 1)?;
        h = tape.leaky_relu(h);
    }
    fc(tape, vars, &format!("{prefix}.fc{LEVEL_HIDDEN_LAYERS}"), h)
}

/// Text-conditioned channel edit of one layer: `c + F1(t)⊙c + F2(t)` with
/// layer-specific F1/F2, or `c + P(t)` with the shared plain projection.
pub fn channel_forward<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    spec: &MapperSpec,
    layer: usize,
    text: Var,
    c: Var,
) -> Result<Var> {
    if spec.variant == MapperVariant::ChannelPlain {
        let p = fc(tape, vars, "mapper.textproj", text)?;
        return Ok(tape.add(c, p)?);
    }
    let branch = |tape: &mut Tape<T>, pair: &str| -> Result<Var> {
        let h = fc(tape, vars, &format!("mapper.l{layer:02}.{pair}.fc0"), text)?;
        let h = tape.leaky_relu(h);
        fc(tape, vars, &format!("mapper.l{layer:02}.{pair}.fc1"), h)
    };
    let f1 = branch(tape, "f1")?;
    let f2 = branch(tape, "f2")?;
    let scaled = tape.mul(f1, c)?;
    let biased = tape.add(c, scaled)?;
    Ok(tape.add(biased, f2)?)
}

/// Full mapper: per-layer level MLP then channel edit. Disabled levels skip
/// both and contribute exact-zero rows.
pub fn mapper_forward<T: Scalar>(
    tape: &mut Tape<T>,
    vars: &ParamVars,
    spec: &MapperSpec,
    w0: &WPlusVars,
    text: Var,
) -> Result<WPlusVars> {
    if w0.layers.len() != spec.split.layer_count() {
        return Err(Error::invalid(format!(
            "latent has {} layers, mapper expects {}",
            w0.layers.len(),
            spec.split.layer_count()
        )));
    }
    let ts = tape.value(text).shape().to_vec();
    if ts.len() != 2 || ts[1] != spec.text_dim {
        return Err(Error::invalid(format!(
            "text embedding shape {ts:?}, expected [N, {}]",
            spec.text_dim
        )));
    }
    let mut out = Vec::with_capacity(w0.layers.len());
    for (i, &x) in w0.layers.iter().enumerate() {
        let xs = tape.value(x).shape().to_vec();
        if xs != [ts[0], spec.style_dim] {
            return Err(Error::invalid(format!(
                "layer {i} rows have shape {xs:?}, expected [{}, {}]",
                ts[0], spec.style_dim
            )));
        }
        let level = spec.split.level_of(i)?;
        if !spec.level_enabled(level) {
            out.push(tape.constant(Tensor::zeros(&xs)));
            continue;
        }
        let c = level_forward(tape, vars, spec, level, x)?;
        out.push(channel_forward(tape, vars, spec, i, text, c)?);
    }
    Ok(WPlusVars { layers: out })
}

// ── blending ─────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlendMode {
    /// The mapped latent is the style: `w_s = w_t`.
    Generation,
    /// Scaled edit on top of the source: `w_s = alpha·w_t + w0`. Disabled
    /// levels pass `w0` rows through untouched.
    Manipulation,
}

/// Tape-side blend, for losses that differentiate through it.
pub fn blend<T: Scalar>(
    tape: &mut Tape<T>,
    spec: &MapperSpec,
    mode: BlendMode,
    w_t: &WPlusVars,
    w0: &WPlusVars,
) -> Result<WPlusVars> {
    if w_t.layers.len() != w0.layers.len() {
        return Err(Error::invalid("blend: latents have different layer counts"));
    }
    match mode {
        BlendMode::Generation => Ok(w_t.clone()),
        BlendMode::Manipulation => {
            let mut out = Vec::with_capacity(w0.layers.len());
            for (i, (&t, &s)) in w_t.layers.iter().zip(&w0.layers).enumerate() {
                if spec.level_enabled(spec.split.level_of(i)?) {
                    let scaled = tape.affine_scalar(t, spec.alpha, 0.0)?;
                    out.push(tape.add(scaled, s)?);
                } else {
                    out.push(s);
                }
            }
            Ok(WPlusVars { layers: out })
        }
    }
}

/// Host-side blend with the same semantics as [`blend`].
pub fn blend_latent(
    spec: &MapperSpec,
    mode: BlendMode,
    w_t: &WPlus<f32>,
    w0: &WPlus<f32>,
) -> Result<WPlus<f32>> {
    if w_t.layer_count() != w0.layer_count() || w_t.dim() != w0.dim() || w_t.batch() != w0.batch() {
        return Err(Error::invalid("blend: latent shapes differ"));
    }
    match mode {
        BlendMode::Generation => Ok(w_t.clone()),
        BlendMode::Manipulation => {
            let alpha = spec.alpha as f32;
            let mut layers = Vec::with_capacity(w0.layer_count());
            for i in 0..w0.layer_count() {
                if spec.level_enabled(spec.split.level_of(i)?) {
                    let data: Vec<f32> = w_t
                        .layer(i)
                        .data()
                        .iter()
                        .zip(w0.layer(i).data())
                        .map(|(t, s)| alpha * *t + *s)
                        .collect();
                    layers.push(Tensor::from_vec(w0.layer(i).shape(), data)?);
                } else {
                    layers.push(w0.layer(i).clone());
                }
            }
            WPlus::new(layers)
        }
    }
}

// ── trained mapper: checkpointing and pipelines ──────────────────────

/// Sidecar metadata stored next to the parameter checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapperMeta {
    pub version: u32,
    pub coarse_layers: usize,
    pub medium_layers: usize,
    pub fine_layers: usize,
    pub enabled_levels: Vec<String>,
    pub alpha: f64,
    pub variant: String,
    pub style_dim: usize,
    pub text_dim: usize,
    /// Name of the text class the mapper was trained for.
    pub text_class: String,
    /// Digest of the backbone bundle the mapper was trained against.
    pub bundle_hash: String,
}

/// A mapper plus everything needed to run and persist it.
#[derive(Clone, Debug)]
pub struct Mapper {
    spec: MapperSpec,
    params: NamedParamSet<f32>,
    text_class: String,
    bundle_hash: String,
}

impl Mapper {
    /// Fresh zero-edit mapper bound to a bundle's latent geometry.
    pub fn init(spec: MapperSpec, text_class: &str, bundle: &BackboneBundle, seed: u64) -> Result<Self> {
        let mut params = NamedParamSet::new();
        let mut rng = init::rng(seed);
        init_mapper(&mut params, &spec, &mut rng)?;
        Ok(Mapper {
            spec,
            params,
            text_class: text_class.to_string(),
            bundle_hash: bundle.hash(),
        })
    }

    pub fn spec(&self) -> &MapperSpec {
        &self.spec
    }

    pub fn params(&self) -> &NamedParamSet<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NamedParamSet<f32> {
        &mut self.params
    }

    pub fn text_class(&self) -> &str {
        &self.text_class
    }

    pub fn bundle_hash(&self) -> &str {
        &self.bundle_hash
    }

    pub fn ensure_matches(&self, bundle: &BackboneBundle) -> Result<()> {
        if bundle.hash() != self.bundle_hash {
            return Err(Error::invalid(
                "mapper was trained against a different backbone bundle",
            ));
        }
        Ok(())
    }

    /// Maps a batch of source latents with one text embedding row per sample.
    pub fn forward(&self, w0: &WPlus<f32>, text: &Tensor<f32>) -> Result<WPlus<f32>> {
        let mut tape = Tape::<f32>::new();
        let vars = tape.bind(&self.params, false);
        let w0_vars = WPlusVars {
            layers: w0.layers().iter().map(|t| tape.constant(t.clone())).collect(),
        };
        let tv = tape.constant(text.clone());
        let w_t = mapper_forward(&mut tape, &vars, &self.spec, &w0_vars, tv)?;
        let layers = w_t
            .layers
            .iter()
            .map(|v| tape.value(*v).clone())
            .collect();
        WPlus::new(layers)
    }

    pub fn meta(&self) -> MapperMeta {
        let (c, m, f) = self.spec.split.counts();
        MapperMeta {
            version: MAPPER_VERSION,
            coarse_layers: c,
            medium_layers: m,
            fine_layers: f,
            enabled_levels: self.spec.enabled_level_names(),
            alpha: self.spec.alpha,
            variant: self.spec.variant.name().to_string(),
            style_dim: self.spec.style_dim,
            text_dim: self.spec.text_dim,
            text_class: self.text_class.clone(),
            bundle_hash: self.bundle_hash.clone(),
        }
    }

    fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
        (path.with_extension(checkpoint::EXTENSION), path.with_extension("json"))
    }

    /// Writes `<path>.ntck` (parameters) and `<path>.json` (metadata).
    pub fn save(&self, path: &Path) -> Result<()> {
        let (ck, side) = Self::checkpoint_paths(path);
        checkpoint::save(&ck, &self.params)?;
        let text = serde_json::to_string_pretty(&self.meta())
            .map_err(|e| Error::format(&side, e.to_string()))?;
        std::fs::write(&side, text).map_err(|e| Error::io(&side, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (ck, side) = Self::checkpoint_paths(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: MapperMeta =
            serde_json::from_str(&text).map_err(|e| Error::format(&side, e.to_string()))?;
        if meta.version != MAPPER_VERSION {
            return Err(Error::format(
                &side,
                format!("mapper version {} unsupported (expected {MAPPER_VERSION})", meta.version),
            ));
        }
        let mut enabled = [false; 3];
        for name in &meta.enabled_levels {
            enabled[Level::parse(name)?.index()] = true;
        }
        let spec = MapperSpec::new(
            LevelSplit::from_counts(meta.coarse_layers, meta.medium_layers, meta.fine_layers)?,
            enabled,
            meta.alpha,
            MapperVariant::parse(&meta.variant)?,
            meta.style_dim,
            meta.text_dim,
        )?;
        let params = checkpoint::load(&ck)?;
        // The checkpoint must hold exactly the parameters the spec implies.
        let mut expected = NamedParamSet::new();
        let mut rng = init::rng(0);
        init_mapper(&mut expected, &spec, &mut rng)?;
        for (name, entry) in expected.iter() {
            let got = params
                .get(name)
                .ok_or_else(|| Error::format(&ck, format!("missing parameter '{name}'")))?;
            if got.tensor.shape() != entry.tensor.shape() {
                return Err(Error::format(
                    &ck,
                    format!(
                        "parameter '{name}' has shape {:?}, expected {:?}",
                        got.tensor.shape(),
                        entry.tensor.shape()
                    ),
                ));
            }
        }
        if params.len() != expected.len() {
            return Err(Error::format(&ck, "checkpoint holds unexpected extra parameters"));
        }
        Ok(Mapper {
            spec,
            params,
            text_class: meta.text_class,
            bundle_hash: meta.bundle_hash,
        })
    }
}

/// Latents and images from one end-to-end pass.
#[derive(Debug)]
pub struct PipelineOutput {
    pub w0: WPlus<f32>,
    pub w_t: WPlus<f32>,
    pub w_s: WPlus<f32>,
    /// Source images: the generator's rendering of `w0`.
    pub source: Tensor<f32>,
    /// Edited images: the generator's rendering of `w_s`.
    pub output: Tensor<f32>,
}

fn tile_text(bundle: &BackboneBundle, prompt: &str, n: usize) -> Result<Tensor<f32>> {
    let row = bundle.encode_text(&[prompt])?;
    let d = row.shape()[1];
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        data.extend_from_slice(row.data());
    }
    Ok(Tensor::from_vec(&[n, d], data)?)
}

fn run_pipeline(
    bundle: &BackboneBundle,
    mapper: &Mapper,
    w0: WPlus<f32>,
    prompt: &str,
    mode: BlendMode,
) -> Result<PipelineOutput> {
    bundle.ensure_usable()?;
    mapper.ensure_matches(bundle)?;
    let text = tile_text(bundle, prompt, w0.batch())?;
    let w_t = mapper.forward(&w0, &text)?;
    let w_s = blend_latent(mapper.spec(), mode, &w_t, &w0)?;
    let source = bundle.generate_image(&w0)?;
    let output = bundle.generate_image(&w_s)?;
    Ok(PipelineOutput { w0, w_t, w_s, source, output })
}

/// Text-to-image: map each noise vector to a source latent, then use the
/// mapped latent alone as the style.
pub fn run_generation(
    bundle: &BackboneBundle,
    mapper: &Mapper,
    prompt: &str,
    noise: &[Vec<f32>],
) -> Result<PipelineOutput> {
    if noise.is_empty() {
        return Err(Error::invalid("no noise vectors given"));
    }
    let singles = noise
        .iter()
        .map(|z| bundle.map_noise(z))
        .collect::<Result<Vec<_>>>()?;
    let w0 = WPlus::stack(&singles)?;
    run_pipeline(bundle, mapper, w0, prompt, BlendMode::Generation)
}

/// Text-guided edit: invert the images, then blend the mapped edit onto the
/// inverted latent. `source` is the reconstruction the edit is applied to.
pub fn run_manipulation(
    bundle: &BackboneBundle,
    mapper: &Mapper,
    images: &Tensor<f32>,
    prompt: &str,
) -> Result<PipelineOutput> {
    let w0 = bundle.invert_image(images)?;
    run_pipeline(bundle, mapper, w0, prompt, BlendMode::Manipulation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbones::untrained_bundle;
    use crate::config::BackboneConfig;
    use crate::latent::LevelSplit;
    use rand::Rng;

    fn tiny_bundle(seed: u64) -> BackboneBundle {
        let cfg = BackboneConfig {
            layers: 6,
            style_dim: 16,
            embed_dim: 12,
            identity_dim: 8,
            seed,
            ..BackboneConfig::default()
        };
        untrained_bundle(&cfg, 4).unwrap()
    }

    fn spec(variant: MapperVariant) -> MapperSpec {
        MapperSpec::new(
            LevelSplit::from_counts(2, 2, 2).unwrap(),
            [true; 3],
            0.1,
            variant,
            8,
            6,
        )
        .unwrap()
    }

    fn seeded(spec: &MapperSpec, seed: u64) -> NamedParamSet<f32> {
        let mut params = NamedParamSet::new();
        init_mapper(&mut params, spec, &mut init::rng(seed)).unwrap();
        params
    }

    fn random_latent(layers: usize, batch: usize, dim: usize, seed: u64) -> WPlus<f32> {
        let mut rng = init::rng(seed);
        WPlus::new(
            (0..layers)
                .map(|_| init::randn(&mut rng, &[batch, dim], 1.0))
                .collect(),
        )
        .unwrap()
    }

    fn forward_on_tape(
        spec: &MapperSpec,
        params: &NamedParamSet<f32>,
        w0: &WPlus<f32>,
        text: &Tensor<f32>,
    ) -> WPlus<f32> {
        let mut tape = Tape::<f32>::new();
        let vars = tape.bind(params, false);
        let w0v = WPlusVars {
            layers: w0.layers().iter().map(|t| tape.constant(t.clone())).collect(),
        };
        let tv = tape.constant(text.clone());
        let out = mapper_forward(&mut tape, &vars, spec, &w0v, tv).unwrap();
        WPlus::new(out.layers.iter().map(|v| tape.value(*v).clone()).collect()).unwrap()
    }

    #[test]
    fn fresh_mapper_emits_exact_zeros() {
        for variant in [MapperVariant::Full, MapperVariant::ChannelPlain] {
            let spec = spec(variant);
            let params = seeded(&spec, 3);
            let w0 = random_latent(6, 4, 8, 7);
            let text = init::randn::<f32>(&mut init::rng(9), &[4, 6], 1.0);
            let w_t = forward_on_tape(&spec, &params, &w0, &text);
            for i in 0..6 {
                assert!(
                    w_t.layer(i).data().iter().all(|v| *v == 0.0),
                    "variant {variant:?} layer {i} not exactly zero"
                );
            }
        }
    }

    #[test]
    fn fresh_level_identity_passes_latent_through() {
        let spec = spec(MapperVariant::LevelIdentity);
        let params = seeded(&spec, 3);
        let w0 = random_latent(6, 4, 8, 7);
        let text = init::randn::<f32>(&mut init::rng(9), &[4, 6], 1.0);
        let w_t = forward_on_tape(&spec, &params, &w0, &text);
        for i in 0..6 {
            assert_eq!(w_t.layer(i).data(), w0.layer(i).data());
        }
    }

    #[test]
    fn channel_edit_matches_worked_example() {
        // Single enabled layer, D = 2: force F1(t) = [0.5, 0.5] and
        // F2(t) = [0.1, -0.1] via zero weights and output biases, then check
        // c' over c = [1, 2].
        let spec = MapperSpec::new(
            LevelSplit::from_counts(1, 1, 1).unwrap(),
            [true, false, false],
            0.1,
            MapperVariant::Full,
            2,
            3,
        )
        .unwrap();
        let mut params = NamedParamSet::new();
        init_mapper(&mut params, &spec, &mut init::rng(1)).unwrap();
        *params.tensor_mut("mapper.l00.f1.fc0.w").unwrap() = Tensor::zeros(&[3, 2]);
        *params.tensor_mut("mapper.l00.f2.fc0.w").unwrap() = Tensor::zeros(&[3, 2]);
        *params.tensor_mut("mapper.l00.f1.fc1.b").unwrap() =
            Tensor::from_vec(&[2], vec![0.5, 0.5]).unwrap();
        *params.tensor_mut("mapper.l00.f2.fc1.b").unwrap() =
            Tensor::from_vec(&[2], vec![0.1, -0.1]).unwrap();

        let mut tape = Tape::<f32>::new();
        let vars = tape.bind(&params, false);
        let c = tape.constant(Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap());
        let t = tape.constant(Tensor::zeros(&[1, 3]));
        let out = channel_forward(&mut tape, &vars, &spec, 0, t, c).unwrap();
        let got = tape.value(out).data();
        assert!((got[0] - 1.6).abs() < 1e-6, "{got:?}");
        assert!((got[1] - 2.9).abs() < 1e-6, "{got:?}");
    }

    #[test]
    fn channel_forward_matches_scalar_reference() {
        let spec = spec(MapperVariant::Full);
        let params = seeded(&spec, 11);
        let batch = 3;
        let (d, td) = (spec.style_dim, spec.text_dim);
        let mut rng = init::rng(13);
        let c = init::randn::<f32>(&mut rng, &[batch, d], 1.0);
        let t = init::randn::<f32>(&mut rng, &[batch, td], 1.0);

        let mut tape = Tape::<f32>::new();
        let vars = tape.bind(&params, false);
        let cv = tape.constant(c.clone());
        let tv = tape.constant(t.clone());
        let out = channel_forward(&mut tape, &vars, &spec, 2, tv, cv).unwrap();
        let got = tape.value(out).data();

        // Scalar reference: two tiny affine stacks and the modulation.
        let w = |name: &str| params.get(name).unwrap().tensor.clone();
        let lrelu = |v: f32| if v >= 0.0 { v } else { 0.2 * v };
        let branch = |pair: &str, row: &[f32]| -> Vec<f32> {
            let w0 = w(&format!("mapper.l02.{pair}.fc0.w"));
            let b0 = w(&format!("mapper.l02.{pair}.fc0.b"));
            let w1 = w(&format!("mapper.l02.{pair}.fc1.w"));
            let b1 = w(&format!("mapper.l02.{pair}.fc1.b"));
            let mut h = vec![0.0f32; d];
            for j in 0..d {
                let mut acc = b0.data()[j];
                for k in 0..td {
                    acc += row[k] * w0.data()[k * d + j];
                }
                h[j] = lrelu(acc);
            }
            let mut o = vec![0.0f32; d];
            for j in 0..d {
                let mut acc = b1.data()[j];
                for k in 0..d {
                    acc += h[k] * w1.data()[k * d + j];
                }
                o[j] = acc;
            }
            o
        };
        for r in 0..batch {
            let trow = &t.data()[r * td..(r + 1) * td];
            let crow = &c.data()[r * d..(r + 1) * d];
            let f1 = branch("f1", trow);
            let f2 = branch("f2", trow);
            for j in 0..d {
                let want = crow[j] + f1[j] * crow[j] + f2[j];
                let have = got[r * d + j];
                assert!((want - have).abs() <= 1e-6, "row {r} ch {j}: {want} vs {have}");
            }
        }
    }

    #[test]
    fn disabled_levels_emit_zeros_and_preserve_source() {
        let mut sp = spec(MapperVariant::Full);
        sp.enabled = [false, true, false];
        // Perturb the medium channel pair so enabled layers actually move.
        let mut params = seeded(&sp, 5);
        *params.tensor_mut("mapper.l02.f2.fc1.b").unwrap() =
            init::randn(&mut init::rng(6), &[8], 0.5);
        let w0 = random_latent(6, 2, 8, 8);
        let text = init::randn::<f32>(&mut init::rng(10), &[2, 6], 1.0);
        let w_t = forward_on_tape(&sp, &params, &w0, &text);
        for i in [0usize, 1, 4, 5] {
            assert!(w_t.layer(i).data().iter().all(|v| *v == 0.0), "layer {i}");
        }
        assert!(w_t.layer(2).data().iter().any(|v| *v != 0.0));

        let w_s = blend_latent(&sp, BlendMode::Manipulation, &w_t, &w0).unwrap();
        for i in [0usize, 1, 4, 5] {
            assert_eq!(w_s.layer(i).data(), w0.layer(i).data(), "layer {i} not preserved");
        }
        let moved = w_s.layer(2).data();
        let expect: Vec<f32> = w_t
            .layer(2)
            .data()
            .iter()
            .zip(w0.layer(2).data())
            .map(|(t, s)| 0.1f32 * *t + *s)
            .collect();
        assert_eq!(moved, &expect[..]);
    }

    #[test]
    fn tape_and_host_blends_agree() {
        let sp = spec(MapperVariant::Full);
        let w_t = random_latent(6, 3, 8, 21);
        let w0 = random_latent(6, 3, 8, 22);
        for mode in [BlendMode::Generation, BlendMode::Manipulation] {
            let host = blend_latent(&sp, mode, &w_t, &w0).unwrap();
            let mut tape = Tape::<f32>::new();
            let tv = WPlusVars {
                layers: w_t.layers().iter().map(|t| tape.constant(t.clone())).collect(),
            };
            let sv = WPlusVars {
                layers: w0.layers().iter().map(|t| tape.constant(t.clone())).collect(),
            };
            let out = blend(&mut tape, &sp, mode, &tv, &sv).unwrap();
            for i in 0..6 {
                assert_eq!(host.layer(i).data(), tape.value(out.layers[i]).data());
            }
        }
    }

    #[test]
    fn save_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let bundle = tiny_bundle(3);
        let sp = MapperSpec::new(
            LevelSplit::proportional(6).unwrap(),
            [true, true, false],
            0.25,
            MapperVariant::Full,
            16,
            12,
        )
        .unwrap();
        let mapper = Mapper::init(sp, "hair color", &bundle, 17).unwrap();
        let path = dir.path().join("mapper");
        mapper.save(&path).unwrap();

        let back = Mapper::load(&path).unwrap();
        assert_eq!(back.spec(), mapper.spec());
        assert_eq!(back.text_class(), "hair color");
        assert_eq!(back.bundle_hash(), bundle.hash());
        back.ensure_matches(&bundle).unwrap();
        for (name, entry) in mapper.params().iter() {
            assert_eq!(entry.tensor.data(), back.params().get(name).unwrap().tensor.data());
        }

        // A sidecar that disagrees with the checkpoint is rejected.
        let other = MapperSpec::new(
            LevelSplit::proportional(6).unwrap(),
            [true; 3],
            0.25,
            MapperVariant::Full,
            16,
            12,
        )
        .unwrap();
        let meta = MapperMeta {
            enabled_levels: other.enabled_level_names(),
            ..mapper.meta()
        };
        std::fs::write(path.with_extension("json"), serde_json::to_string(&meta).unwrap()).unwrap();
        assert!(Mapper::load(&path).is_err());
    }

    #[test]
    fn reconstruction_is_exact_for_fresh_manipulation() {
        let bundle = tiny_bundle(3);
        let cfg = MapperConfig { alpha: 0.1, enabled_levels: vec!["medium".into()] };
        let sp = MapperSpec::from_config(&cfg, &bundle, MapperVariant::Full).unwrap();
        assert_eq!(sp.enabled, [false, true, false]);
        let mapper = Mapper::init(sp, "hair color", &bundle, 23).unwrap();

        let res = bundle.resolution();
        let images = init::uniform::<f32>(&mut init::rng(31), &[2, 3, res, res], 0.2, 0.8).unwrap();
        let out = run_manipulation(&bundle, &mapper, &images, "she has red hair").unwrap();
        // Zero edit: the blended latent equals the inversion bit for bit, so
        // the output is exactly the reconstruction.
        let w0 = bundle.invert_image(&images).unwrap();
        for i in 0..6 {
            assert_eq!(out.w_s.layer(i).data(), w0.layer(i).data());
        }
        assert_eq!(out.output.data(), out.source.data());
    }

    #[test]
    fn generation_runs_end_to_end() {
        let bundle = tiny_bundle(3);
        let sp = MapperSpec::new(
            LevelSplit::proportional(6).unwrap(),
            [true; 3],
            0.1,
            MapperVariant::Full,
            16,
            12,
        )
        .unwrap();
        let mapper = Mapper::init(sp, "hair color", &bundle, 29).unwrap();
        let mut rng = init::rng(37);
        let noise: Vec<Vec<f32>> = (0..3)
            .map(|_| (0..crate::backbones::codebook::NOISE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let out = run_generation(&bundle, &mapper, "he has blue hair", &noise).unwrap();
        assert_eq!(out.output.shape(), [3, 3, 16, 16]);
        // Fresh mapper ⇒ w_t = 0 ⇒ the generated batch is the zero-style render.
        assert_eq!(out.w_s.layer(0).data(), vec![0.0; 3 * 16]);

        let mismatched = Mapper::init(*mapper.spec(), "hair color", &tiny_bundle(99), 29).unwrap();
        assert!(run_generation(&bundle, &mismatched, "he has blue hair", &noise).is_err());
    }
}
