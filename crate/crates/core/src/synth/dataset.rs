//! Dataset build/load: renders captioned samples to PNG + JSONL, ingests an
//! external images/captions layout, and degrades images for discriminator
//! negatives.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::png::PngEncoder;
use image::imageops::FilterType;
use image::{ExtendedColorType, ImageEncoder};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::caption::make_captions;
use super::render::{render_face, FaceImage};
use super::{AttributePool, AttributeVector};
use crate::{Error, Result};

pub const DATASET_VERSION: u32 = 1;
pub const CAPTIONS_PER_SAMPLE: usize = 10;
pub const TEST_FRACTION: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    /// Path relative to the dataset root.
    pub image: String,
    pub split: Split,
    pub identity: Option<usize>,
    pub attributes: Option<AttributeVector>,
    pub captions: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub version: u32,
    pub seed: u64,
    pub n: usize,
    pub resolution: usize,
    pub identities: usize,
    /// Unreadable source images dropped during external ingestion.
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    root: PathBuf,
    meta: DatasetMeta,
    records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.meta.resolution
    }

    pub fn split(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// True when every record carries ground-truth attributes; semantic
    /// metrics are only defined in that case.
    pub fn has_attributes(&self) -> bool {
        !self.records.is_empty() && self.records.iter().all(|r| r.attributes.is_some())
    }

    /// Reads a record's image, resizing to the manifest resolution if the
    /// file dimensions differ (external data).
    pub fn load_image(&self, record: &SampleRecord) -> Result<FaceImage> {
        let path = self.root.join(&record.image);
        let img = image::open(&path)
            .map_err(|e| Error::format(&path, format!("cannot decode image: {e}")))?
            .to_rgb8();
        let r = self.meta.resolution as u32;
        let img = if img.width() != r || img.height() != r {
            image::imageops::resize(&img, r, r, FilterType::Triangle)
        } else {
            img
        };
        decode_rgb(&img)
    }

    pub fn load_all_images(&self) -> Result<Vec<FaceImage>> {
        self.records.iter().map(|r| self.load_image(r)).collect()
    }
}

fn decode_rgb(img: &image::RgbImage) -> Result<FaceImage> {
    let r = img.width() as usize;
    let plane = r * r;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = px.0[c] as f32 / 255.0;
        }
    }
    FaceImage::new(r, data)
}

/// Writes an image as 8-bit RGB PNG; quantization is round-to-nearest.
pub fn save_png(image: &FaceImage, path: &Path) -> Result<()> {
    let r = image.resolution();
    let plane = r * r;
    let data = image.data();
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            bytes.push((data[c * plane + i] * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    PngEncoder::new(BufWriter::new(file))
        .write_image(&bytes, r as u32, r as u32, ExtendedColorType::Rgb8)
        .map_err(|e| Error::format(path, format!("png encode failed: {e}")))
}

/// Largest-remainder test allocation per identity group: quotas are
/// proportional to group size, sum to round(n * TEST_FRACTION) exactly, and
/// the final test members of each group are its highest-index samples.
fn stratified_split(identities: &[usize]) -> Vec<Split> {
    let n = identities.len();
    let test_total = (n as f64 * TEST_FRACTION).round() as usize;
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, id) in identities.iter().enumerate() {
        groups.entry(*id).or_default().push(i);
    }
    let mut quotas: Vec<(usize, usize, f64)> = groups
        .iter()
        .map(|(id, members)| {
            let exact = members.len() as f64 * test_total as f64 / n as f64;
            (*id, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let assigned: usize = quotas.iter().map(|q| q.1).sum();
    // Hand leftover seats to the largest fractional parts; ties go to the
    // smaller identity id because the sort is stable.
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|a, b| quotas[*b].2.partial_cmp(&quotas[*a].2).unwrap());
    for k in order.iter().take(test_total.saturating_sub(assigned)) {
        quotas[*k].1 += 1;
    }
    let mut out = vec![Split::Train; n];
    for (id, quota, _) in quotas {
        let members = &groups[&id];
        let quota = quota.min(members.len());
        for i in &members[members.len() - quota..] {
            out[*i] = Split::Test;
        }
    }
    out
}

/// Renders `n` captioned faces to `out_dir` (PNG + JSONL manifest) with a
/// stratified 80/20 split. Deterministic given the seed.
pub fn build_dataset(
    out_dir: &Path,
    n: usize,
    identities: usize,
    resolution: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be positive"));
    }
    let pool = AttributePool::new(identities, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let attrs: Vec<AttributeVector> = (0..n).map(|_| pool.sample(&mut rng)).collect();
    let splits = stratified_split(&attrs.iter().map(|a| a.identity_id).collect::<Vec<_>>());

    let mut records = Vec::with_capacity(n);
    for (i, a) in attrs.iter().enumerate() {
        let rel = format!("images/{i:06}.png");
        save_png(&render_face(a, resolution)?, &out_dir.join(&rel))?;
        records.push(SampleRecord {
            id: i,
            image: rel,
            split: splits[i],
            identity: Some(a.identity_id),
            attributes: Some(*a),
            captions: make_captions(a),
        });
    }
    let meta = DatasetMeta { version: DATASET_VERSION, seed, n, resolution, identities, skipped: 0 };
    write_manifest(out_dir, &meta, &records)?;
    Ok(DatasetManifest { root: out_dir.to_path_buf(), meta, records })
}

fn write_manifest(dir: &Path, meta: &DatasetMeta, records: &[SampleRecord]) -> Result<()> {
    let manifest_path = dir.join("manifest.jsonl");
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    fs::write(&manifest_path, out).map_err(|e| Error::io(&manifest_path, e))?;
    let meta_path = dir.join("dataset.json");
    let pretty = serde_json::to_string_pretty(meta).expect("meta serializes");
    fs::write(&meta_path, pretty).map_err(|e| Error::io(&meta_path, e))
}

/// Loads a dataset written by [`build_dataset`], checking record count,
/// caption cardinality, attribute ranges, and that referenced files exist.
pub fn load_dataset(dir: &Path) -> Result<DatasetManifest> {
    let meta_path = dir.join("dataset.json");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::format(&meta_path, e.to_string()))?;

    let manifest_path = dir.join("manifest.jsonl");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleRecord = serde_json::from_str(line)
            .map_err(|e| Error::format(&manifest_path, format!("line {}: {e}", lineno + 1)))?;
        records.push(rec);
    }
    if records.len() != meta.n {
        return Err(Error::format(
            &manifest_path,
            format!("{} records but dataset.json declares {}", records.len(), meta.n),
        ));
    }
    for r in &records {
        if r.captions.len() != CAPTIONS_PER_SAMPLE {
            return Err(Error::format(
                &manifest_path,
                format!("record {} has {} captions, expected {CAPTIONS_PER_SAMPLE}", r.id, r.captions.len()),
            ));
        }
        if let Some(a) = &r.attributes {
            a.validate(meta.identities)?;
        }
        let img = dir.join(&r.image);
        if !img.is_file() {
            return Err(Error::format(&manifest_path, format!("missing image file {}", img.display())));
        }
    }
    Ok(DatasetManifest { root: dir.to_path_buf(), meta, records })
}

/// Ingests `<dir>/images/*.png|jpg` with `<dir>/captions/<stem>.txt` (10
/// lines each). Attributes are unknown, so semantic metrics are disabled
/// for such data; unreadable images are skipped and counted.
pub fn load_external_dataset(dir: &Path, resolution: usize) -> Result<DatasetManifest> {
    let images_dir = dir.join("images");
    let mut paths: Vec<PathBuf> = match fs::read_dir(&images_dir) {
        Ok(entries) => entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                    .unwrap_or(false)
            })
            .collect(),
        Err(_) => Vec::new(),
    };
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Ingestion(format!("no images found in {}", images_dir.display())));
    }

    let mut skipped = 0usize;
    let mut kept: Vec<(PathBuf, Vec<String>)> = Vec::new();
    for path in paths {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let caption_path = dir.join("captions").join(format!("{stem}.txt"));
        let text = fs::read_to_string(&caption_path).map_err(|_| {
            Error::Ingestion(format!("missing captions for image {}", path.display()))
        })?;
        let lines: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
        if lines.len() != CAPTIONS_PER_SAMPLE {
            return Err(Error::Ingestion(format!(
                "caption file {} has {} lines, expected {CAPTIONS_PER_SAMPLE}",
                caption_path.display(),
                lines.len()
            )));
        }
        if image::open(&path).is_err() {
            skipped += 1;
            continue;
        }
        kept.push((path, lines));
    }
    if kept.is_empty() {
        return Err(Error::Ingestion(format!(
            "no images found in {} ({skipped} unreadable)",
            images_dir.display()
        )));
    }

    let n = kept.len();
    let test_total = (n as f64 * TEST_FRACTION).round() as usize;
    let records = kept
        .into_iter()
        .enumerate()
        .map(|(i, (path, captions))| SampleRecord {
            id: i,
            image: format!("images/{}", path.file_name().unwrap().to_string_lossy()),
            split: if i >= n - test_total { Split::Test } else { Split::Train },
            identity: None,
            attributes: None,
            captions,
        })
        .collect();
    let meta = DatasetMeta {
        version: DATASET_VERSION,
        seed: 0,
        n,
        resolution,
        identities: 0,
        skipped,
    };
    Ok(DatasetManifest { root: dir.to_path_buf(), meta, records })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradeKind {
    Blur,
    Noise,
    Mix,
}

/// Produces a corrupted copy: repeated 3x3 box blur, seeded Gaussian noise,
/// or both. Strength 0 returns the input bitwise.
pub fn degrade(image: &FaceImage, kind: DegradeKind, strength: f32, seed: u64) -> FaceImage {
    let strength = strength.clamp(0.0, 1.0);
    if strength == 0.0 {
        return image.clone();
    }
    let r = image.resolution();
    let plane = r * r;
    let mut data = image.data().to_vec();
    if matches!(kind, DegradeKind::Blur | DegradeKind::Mix) {
        let passes = (strength * 4.0).round() as usize;
        let mut scratch = vec![0.0f32; plane];
        for _ in 0..passes {
            for c in 0..3 {
                let ch = &mut data[c * plane..(c + 1) * plane];
                for y in 0..r {
                    for x in 0..r {
                        let mut acc = 0.0;
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                let yy = (y as i64 + dy).clamp(0, r as i64 - 1) as usize;
                                let xx = (x as i64 + dx).clamp(0, r as i64 - 1) as usize;
                                acc += ch[yy * r + xx];
                            }
                        }
                        scratch[y * r + x] = acc / 9.0;
                    }
                }
                ch.copy_from_slice(&scratch);
            }
        }
    }
    if matches!(kind, DegradeKind::Noise | DegradeKind::Mix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = 0.08 * strength;
        for v in &mut data {
            let z: f32 = StandardNormal.sample(&mut rng);
            *v = (*v + sigma * z).clamp(0.0, 1.0);
        }
    }
    FaceImage::new(r, data).expect("degraded buffer stays finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::caption::caption_is_faithful;
    use tempfile::tempdir;

    #[test]
    fn build_writes_a_loadable_stratified_dataset() {
        let dir = tempdir().unwrap();
        let built = build_dataset(dir.path(), 30, 4, 16, 9).unwrap();
        assert_eq!(built.len(), 30);
        let test_count = built.split(Split::Test).len();
        assert_eq!(test_count, 6);
        assert_eq!(built.split(Split::Train).len(), 24);

        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.len(), 30);
        assert!(loaded.has_attributes());
        for (a, b) in built.records().iter().zip(loaded.records()) {
            assert_eq!(serde_json::to_string(a).unwrap(), serde_json::to_string(b).unwrap());
        }
        let img = loaded.load_image(&loaded.records()[0]).unwrap();
        assert_eq!(img.resolution(), 16);
    }

    #[test]
    fn rebuild_with_same_seed_matches_byte_for_byte() {
        let d1 = tempdir().unwrap();
        let d2 = tempdir().unwrap();
        build_dataset(d1.path(), 12, 3, 16, 77).unwrap();
        build_dataset(d2.path(), 12, 3, 16, 77).unwrap();
        let m1 = std::fs::read(d1.path().join("manifest.jsonl")).unwrap();
        let m2 = std::fs::read(d2.path().join("manifest.jsonl")).unwrap();
        assert_eq!(m1, m2);
        let p1 = std::fs::read(d1.path().join("images/000003.png")).unwrap();
        let p2 = std::fs::read(d2.path().join("images/000003.png")).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn records_carry_faithful_captions() {
        let dir = tempdir().unwrap();
        let built = build_dataset(dir.path(), 20, 4, 16, 5).unwrap();
        for r in built.records() {
            assert_eq!(r.captions.len(), CAPTIONS_PER_SAMPLE);
            let a = r.attributes.as_ref().unwrap();
            for c in &r.captions {
                assert!(caption_is_faithful(c, a), "{c}");
            }
        }
    }

    #[test]
    fn split_quotas_follow_largest_remainder() {
        // 7 of identity 0, 3 of identity 1, n=10 → 2 test seats.
        // Exact quotas 1.4 and 0.6 → floor 1 + leftover seat to identity 1.
        let ids = [0, 0, 0, 0, 0, 0, 0, 1, 1, 1];
        let splits = stratified_split(&ids);
        let test_of = |id: usize| {
            ids.iter()
                .zip(&splits)
                .filter(|(i, s)| **i == id && **s == Split::Test)
                .count()
        };
        assert_eq!(test_of(0), 1);
        assert_eq!(test_of(1), 1);
        // Highest-index members take the test seats.
        assert_eq!(splits[6], Split::Test);
        assert_eq!(splits[9], Split::Test);
    }

    #[test]
    fn count_mismatch_is_rejected_on_load() {
        let dir = tempdir().unwrap();
        build_dataset(dir.path(), 10, 3, 16, 1).unwrap();
        let manifest = dir.path().join("manifest.jsonl");
        let text = std::fs::read_to_string(&manifest).unwrap();
        let truncated: Vec<&str> = text.lines().take(9).collect();
        std::fs::write(&manifest, truncated.join("\n")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(err.to_string().contains("declares 10"), "{err}");
    }

    // ---- external ingestion ----

    fn write_external(dir: &Path, stems: &[&str], caption_lines: usize) {
        std::fs::create_dir_all(dir.join("images")).unwrap();
        std::fs::create_dir_all(dir.join("captions")).unwrap();
        for stem in stems {
            let img = FaceImage::filled(16, 0.5);
            save_png(&img, &dir.join("images").join(format!("{stem}.png"))).unwrap();
            let lines = vec!["a face"; caption_lines].join("\n");
            std::fs::write(dir.join("captions").join(format!("{stem}.txt")), lines).unwrap();
        }
    }

    #[test]
    fn external_layout_loads_without_attributes() {
        let dir = tempdir().unwrap();
        write_external(dir.path(), &["a", "b", "c"], 10);
        let m = load_external_dataset(dir.path(), 32).unwrap();
        assert_eq!(m.len(), 3);
        assert!(!m.has_attributes());
        assert_eq!(m.meta().skipped, 0);
        // Images resize to the configured resolution on load.
        let img = m.load_image(&m.records()[0]).unwrap();
        assert_eq!(img.resolution(), 32);
    }

    #[test]
    fn short_caption_file_names_the_offender() {
        let dir = tempdir().unwrap();
        write_external(dir.path(), &["only"], 9);
        let err = load_external_dataset(dir.path(), 16).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("only.txt") && msg.contains("9 lines"), "{msg}");
    }

    #[test]
    fn missing_caption_file_lists_the_image() {
        let dir = tempdir().unwrap();
        write_external(dir.path(), &["x"], 10);
        std::fs::remove_file(dir.path().join("captions/x.txt")).unwrap();
        let err = load_external_dataset(dir.path(), 16).unwrap_err();
        assert!(err.to_string().contains("x.png"), "{err}");
    }

    #[test]
    fn empty_directory_reports_no_images() {
        let dir = tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        let err = load_external_dataset(dir.path(), 16).unwrap_err();
        assert!(err.to_string().contains("no images found"), "{err}");
    }

    #[test]
    fn unreadable_image_is_skipped_and_counted() {
        let dir = tempdir().unwrap();
        write_external(dir.path(), &["good"], 10);
        std::fs::write(dir.path().join("images/bad.png"), b"not a png").unwrap();
        std::fs::write(dir.path().join("captions/bad.txt"), vec!["x"; 10].join("\n")).unwrap();
        let m = load_external_dataset(dir.path(), 16).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.meta().skipped, 1);
    }

    // ---- degradation ----

    fn sample_image() -> FaceImage {
        let a = crate::synth::sample_free(4, &mut promptface_tensor::init::rng(3));
        render_face(&a, 16).unwrap()
    }

    #[test]
    fn zero_strength_is_bitwise_identity() {
        let img = sample_image();
        for kind in [DegradeKind::Blur, DegradeKind::Noise, DegradeKind::Mix] {
            assert_eq!(degrade(&img, kind, 0.0, 9), img);
        }
    }

    #[test]
    fn full_blur_strictly_lowers_variance() {
        let img = sample_image();
        let blurred = degrade(&img, DegradeKind::Blur, 1.0, 0);
        assert!(blurred.variance() < img.variance());
    }

    #[test]
    fn blur_distortion_grows_with_strength() {
        let img = sample_image();
        let d = |s: f32| degrade(&img, DegradeKind::Blur, s, 0).mse(&img).unwrap();
        assert!(d(0.0) == 0.0);
        assert!(d(0.5) > 0.0);
        assert!(d(1.0) > d(0.5));
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let img = sample_image();
        let a = degrade(&img, DegradeKind::Noise, 0.7, 42);
        let b = degrade(&img, DegradeKind::Noise, 0.7, 42);
        let c = degrade(&img, DegradeKind::Noise, 0.7, 43);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.mse(&img).unwrap() > 0.0);
    }
}
