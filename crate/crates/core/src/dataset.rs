//! On-disk dataset layout and loading.
//!
//! A dataset root contains `clean/<id>.png`, `masks/<id>.png`, an optional
//! `noisy/<id>.png`, and an optional `specs/<id>.json` sidecar recording the
//! phantom parameters an image was rendered from. Ids must match across
//! subdirectories. Clean scans from a phantom are shadow free; the sidecar
//! carries the vessel geometry needed to reapply shadows exactly. Real
//! multi-frame scans have no sidecar and act as their own shadowed baseline.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bscan::{load_image, save_image, BScan, BitDepth, ImagePair, ScanKind, ShadowMask};
use crate::error::{Error, Result};
use crate::noise::{add_noise, sample_noise, NoiseParams};
use crate::phantom::{apply_shadow, generate_phantom, PhantomSpec, ShadowDepthMode};

/// One dataset entry: the image pair plus its phantom sidecar when present.
#[derive(Debug, Clone)]
pub struct DatasetRecord {
    pub pair: ImagePair,
    pub spec: Option<PhantomSpec>,
}

impl DatasetRecord {
    pub fn id(&self) -> &str {
        self.pair.id()
    }

    /// The shadow-bearing baseline: phantom records reapply their vessel
    /// shadows to the clean scan; records without a sidecar are already
    /// shadowed (multi-frame scans keep their shadows).
    pub fn shadowed_base(&self) -> Result<BScan> {
        match &self.spec {
            Some(spec) => apply_shadow(
                &self.pair.clean,
                &self.pair.mask,
                &spec.vessels,
                ShadowDepthMode::Constant,
            ),
            None => Ok(self.pair.clean.clone()),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Deterministic 80/10/10 split by id hash.
    pub fn split(&self) -> (Dataset, Dataset, Dataset) {
        let mut train = Vec::new();
        let mut val = Vec::new();
        let mut test = Vec::new();
        for record in &self.records {
            match id_bucket(record.id()) {
                0..=7 => train.push(record.clone()),
                8 => val.push(record.clone()),
                _ => test.push(record.clone()),
            }
        }
        (Dataset { records: train }, Dataset { records: val }, Dataset { records: test })
    }
}

fn id_bucket(id: &str) -> u64 {
    let mut state = 0x51ab_2c03_9e88_d1efu64;
    for b in id.as_bytes() {
        state = (state ^ *b as u64).wrapping_mul(0x100_0000_01b3);
        state ^= state >> 29;
    }
    state % 10
}

fn subdir(root: &Path, name: &str) -> PathBuf {
    root.join(name)
}

/// Writes one record into the dataset layout (16-bit scans, 8-bit masks).
pub fn save_record(root: &Path, record: &DatasetRecord) -> Result<()> {
    let id = record.id().to_string();
    for dir in ["clean", "masks"] {
        std::fs::create_dir_all(subdir(root, dir)).map_err(|e| Error::io(root, e))?;
    }
    save_image(
        &record.pair.clean,
        &subdir(root, "clean").join(format!("{id}.png")),
        BitDepth::Sixteen,
    )?;
    let mask_scan = BScan::new(record.pair.mask.values.clone(), id.clone(), ScanKind::Clean)?;
    save_image(
        &mask_scan,
        &subdir(root, "masks").join(format!("{id}.png")),
        BitDepth::Eight,
    )?;
    if let Some(noisy) = &record.pair.noisy {
        std::fs::create_dir_all(subdir(root, "noisy")).map_err(|e| Error::io(root, e))?;
        save_image(noisy, &subdir(root, "noisy").join(format!("{id}.png")), BitDepth::Sixteen)?;
    }
    if let Some(spec) = &record.spec {
        let dir = subdir(root, "specs");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(format!("{id}.json"));
        let json = serde_json::to_string_pretty(spec)
            .map_err(|e| Error::Data(format!("spec encode for {id}: {e}")))?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Loads a dataset root, enforcing id agreement between `clean/` and `masks/`.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let clean_dir = subdir(root, "clean");
    if !clean_dir.is_dir() {
        return Err(Error::Data(format!(
            "{} is not a dataset root (no clean/ subdirectory)",
            root.display()
        )));
    }
    let mut ids: Vec<String> = Vec::new();
    for entry in std::fs::read_dir(&clean_dir).map_err(|e| Error::io(&clean_dir, e))? {
        let entry = entry.map_err(|e| Error::io(&clean_dir, e))?;
        let path = entry.path();
        if path.extension().map(|e| e == "png" || e == "tiff" || e == "tif") == Some(true) {
            if let Some(stem) = path.file_stem() {
                ids.push(stem.to_string_lossy().into_owned());
            }
        }
    }
    ids.sort();

    let mask_dir = subdir(root, "masks");
    let mut mask_ids: Vec<String> = Vec::new();
    if mask_dir.is_dir() {
        for entry in std::fs::read_dir(&mask_dir).map_err(|e| Error::io(&mask_dir, e))? {
            let entry = entry.map_err(|e| Error::io(&mask_dir, e))?;
            if let Some(stem) = entry.path().file_stem() {
                mask_ids.push(stem.to_string_lossy().into_owned());
            }
        }
    }
    mask_ids.sort();
    if ids != mask_ids {
        return Err(Error::Data(format!(
            "{}: ids in clean/ and masks/ do not match ({} vs {} entries)",
            root.display(),
            ids.len(),
            mask_ids.len()
        )));
    }

    let mut records = Vec::with_capacity(ids.len());
    for id in &ids {
        let clean = load_image(&clean_dir.join(format!("{id}.png")))?
            .with_id(id.clone());
        let mask_scan = load_image_any_depth(&mask_dir.join(format!("{id}.png")))?;
        let mask_values = mask_scan.pixels.mapv(|v| if v >= 0.5 { 1.0 } else { 0.0 });
        let mask = ShadowMask::new(mask_values, true)?;
        let noisy_path = subdir(root, "noisy").join(format!("{id}.png"));
        let noisy = if noisy_path.is_file() {
            Some(load_image(&noisy_path)?.with_id(id.clone()).with_kind(ScanKind::Noisy))
        } else {
            None
        };
        let spec_path = subdir(root, "specs").join(format!("{id}.json"));
        let spec = if spec_path.is_file() {
            let json = std::fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
            let spec: PhantomSpec = serde_json::from_str(&json)
                .map_err(|e| Error::Data(format!("{}: {e}", spec_path.display())))?;
            spec.validate()?;
            Some(spec)
        } else {
            None
        };
        let pair = ImagePair::new(clean, mask, noisy)?;
        records.push(DatasetRecord { pair, spec });
    }
    Ok(Dataset { records })
}

fn load_image_any_depth(path: &Path) -> Result<BScan> {
    load_image(path)
}

/// Generates `count` phantoms into `root` (clean, mask, spec sidecar, and a
/// noisy companion with one seeded noise draw). Returns the in-memory dataset.
pub fn generate_dataset(
    root: &Path,
    count: usize,
    height: usize,
    width: usize,
    global_seed: u64,
    texture_amplitude: Option<f32>,
    noise: &NoiseParams,
) -> Result<Dataset> {
    let mut records = Vec::with_capacity(count);
    for i in 0..count {
        let id = format!("phantom_{i:05}");
        let mut rng = ChaCha8Rng::seed_from_u64(global_seed ^ (0xa5a5_0000 + i as u64));
        let mut spec = PhantomSpec::sample(height, width, &mut rng);
        if let Some(amp) = texture_amplitude {
            spec.texture_amplitude = amp;
        }
        let pair = generate_phantom(&spec, global_seed.wrapping_add(i as u64))?;
        let clean = pair.clean.with_id(id.clone());
        let mask = pair.mask;
        let shadowed = apply_shadow(&clean, &mask, &spec.vessels, ShadowDepthMode::Constant)?;
        let field = sample_noise(
            height,
            width,
            noise,
            crate::noise::derive_seed(global_seed, &id, u64::MAX),
        );
        let noisy = add_noise(&shadowed, &field)?;
        let record = DatasetRecord {
            pair: ImagePair::new(clean, mask, Some(noisy))?,
            spec: Some(spec),
        };
        save_record(root, &record)?;
        records.push(record);
    }
    Ok(Dataset { records })
}

/// Groups records by id for lookups.
pub fn by_id(dataset: &Dataset) -> BTreeMap<String, &DatasetRecord> {
    dataset
        .records
        .iter()
        .map(|r| (r.id().to_string(), r))
        .collect()
}
