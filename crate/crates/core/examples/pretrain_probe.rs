//! Dev probe: times desk-scale pretraining and prints every gate margin plus
//! per-attribute error breakdowns. Stage budgets can be overridden through
//! environment variables, e.g. `GEN_STEPS=200 cargo run --example pretrain_probe`.

use std::path::PathBuf;
use std::time::Instant;

use promptface_core::backbones::pretrain::pretrain_backbones;
use promptface_core::backbones::BackboneBundle;
use promptface_core::config::BackboneConfig;
use promptface_core::synth::dataset::{build_dataset, load_dataset, DatasetManifest, Split};
use promptface_core::synth::AttributeVector;
use promptface_tensor::Tensor;

fn env_usize(key: &str, default: usize) -> usize {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn split_images(manifest: &DatasetManifest, split: Split) -> (Tensor<f32>, Vec<AttributeVector>, Vec<usize>) {
    let mut data = Vec::new();
    let mut attrs = Vec::new();
    let mut ids = Vec::new();
    let mut n = 0;
    let res = manifest.resolution();
    for rec in manifest.split(split) {
        let img = manifest.load_image(rec).unwrap();
        data.extend_from_slice(img.data());
        attrs.push(rec.attributes.unwrap());
        ids.push(rec.identity.unwrap());
        n += 1;
    }
    (Tensor::from_vec(&[n, 3, res, res], data).unwrap(), attrs, ids)
}

fn attr_report(bundle: &BackboneBundle, images: &Tensor<f32>, attrs: &[AttributeVector], label: &str) {
    let pred = bundle.predict_attributes(images).unwrap();
    let names = ["face_shape", "hair_length", "nose_size", "lip_size", "age", "micro"];
    let mut mae = [0.0f64; 6];
    for (p, a) in pred.iter().zip(attrs) {
        let pc = p.continuous();
        let ac = a.continuous();
        for k in 0..6 {
            mae[k] += (pc[k] as f64 - ac[k] as f64).abs();
        }
    }
    for k in 0..6 {
        mae[k] /= attrs.len() as f64;
    }
    let pooled: f64 = mae.iter().sum::<f64>() / 6.0;
    eprint!("[probe] {label} cont MAE per attr:");
    for (name, m) in names.iter().zip(mae) {
        eprint!(" {name}={m:.4}");
    }
    eprintln!(" | pooled={pooled:.4}");
}

fn identity_report(bundle: &BackboneBundle, images: &Tensor<f32>, ids: &[usize], label: &str) {
    let pred = bundle.classify_identity(images).unwrap();
    let hits = pred.iter().zip(ids).filter(|(p, t)| p == t).count();
    eprintln!("[probe] {label} identity acc: {:.4}", hits as f64 / ids.len() as f64);
}

fn main() {
    let n = env_usize("DATA_N", 2000);
    let dir = PathBuf::from(format!("/tmp/probe_data_{n}"));
    let t0 = Instant::now();
    let manifest = if dir.join("dataset.json").exists() {
        load_dataset(&dir).unwrap()
    } else {
        build_dataset(&dir, n, 20, 32, 1).unwrap()
    };
    eprintln!("[probe] dataset ready in {:.1?}", t0.elapsed());

    let defaults = BackboneConfig::default();
    let cfg = BackboneConfig {
        generator_steps: env_usize("GEN_STEPS", defaults.generator_steps),
        discriminator_steps: env_usize("DISC_STEPS", defaults.discriminator_steps),
        inverter_steps: env_usize("INV_STEPS", defaults.inverter_steps),
        embedder_steps: env_usize("EMB_STEPS", defaults.embedder_steps),
        identity_steps: env_usize("IDENT_STEPS", defaults.identity_steps),
        predictor_steps: env_usize("PRED_STEPS", defaults.predictor_steps),
        enforce_gates: false,
        ..defaults
    };
    let t1 = Instant::now();
    let bundle = pretrain_backbones(&manifest, &cfg, "probe", None).unwrap();
    eprintln!("[probe] pretraining took {:.1?}", t1.elapsed());
    for g in &bundle.report().gates {
        let cmp = if g.higher_is_better { ">=" } else { "<=" };
        eprintln!(
            "[probe] {}/{}: {:.5} (need {cmp} {:.5}) {}",
            g.stage,
            g.gate,
            g.achieved,
            g.required,
            if g.passed { "ok" } else { "FAILED" }
        );
    }

    let (test_imgs, test_attrs, test_ids) = split_images(&manifest, Split::Test);
    let (train_imgs, train_attrs, train_ids) = split_images(&manifest, Split::Train);
    attr_report(&bundle, &test_imgs, &test_attrs, "test");
    attr_report(&bundle, &train_imgs, &train_attrs, "train");
    identity_report(&bundle, &test_imgs, &test_ids, "test");
    identity_report(&bundle, &train_imgs, &train_ids, "train");
}
