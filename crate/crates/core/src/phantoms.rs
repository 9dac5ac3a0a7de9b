//! Synthetic attribute-dependent phantoms with ground-truth labels, plus the
//! on-disk dataset format and the age-binned training sampler.
//!
//! A phantom is a nested-ellipse head: a cortex band whose thickness depends
//! on sex, white matter, and a ventricle whose radius grows linearly with
//! age. Each sample is perturbed by a smooth random warp evaluated
//! analytically, so labels and intensities stay exactly consistent, then
//! Gaussian noise is added to the image only.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::rand_core::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fields::{DeformationField, LabelMap, Volume};
use crate::nets::{Condition, Sex};
use crate::rng::{fill_standard_normal, substream, uniform_f64, uniform_usize};
use crate::tensor::Tensor;
use crate::Scalar;

pub const REGION_NAMES: [&str; 4] = ["background", "cortex", "white_matter", "ventricle"];
pub const REGION_BACKGROUND: u8 = 0;
pub const REGION_CORTEX: u8 = 1;
pub const REGION_WHITE_MATTER: u8 = 2;
pub const REGION_VENTRICLE: u8 = 3;

/// Per-axis shape factors of the head and ventricle ellipses.
const HEAD_ANISO: [f64; 3] = [1.0, 0.85, 0.9];
const VENTRICLE_ANISO: [f64; 3] = [1.0, 0.8, 0.9];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("invalid condition: {0}")]
    InvalidCondition(String),
    #[error("unknown dataset version {0}")]
    UnknownVersion(u32),
    #[error("corrupt manifest: {0}")]
    ManifestCorrupt(String),
    #[error("size mismatch: {0}")]
    SizeMismatch(String),
    #[error("checksum mismatch in sample {id} ({what})")]
    ChecksumMismatch { id: u64, what: &'static str },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Geometry and noise parameters of the phantom family.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PhantomSpec {
    pub image_size: Vec<usize>,
    pub noise_sigma: f64,
    /// Correlation length of the random warp, in voxels.
    pub warp_smoothness: f64,
    /// Typical displacement scale of the random warp, in voxels.
    pub warp_amplitude: f64,
    /// Ventricle radius grows `r0 + k * age`.
    pub ventricle_growth_rate: f64,
    pub base_ventricle_radius: f64,
    /// Cortex band thickness in voxels, indexed by sex (female, male).
    pub cortex_thickness_by_sex: [f64; 2],
    /// Head semi-axis as a fraction of the image size.
    pub head_scale: f64,
    /// Intensity per region id (background, cortex, white matter, ventricle).
    pub region_intensities: [f64; 4],
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            image_size: vec![64, 64],
            noise_sigma: 0.02,
            warp_smoothness: 16.0,
            warp_amplitude: 3.5,
            ventricle_growth_rate: 0.06,
            base_ventricle_radius: 3.0,
            cortex_thickness_by_sex: [2.6, 3.9],
            head_scale: 0.4,
            region_intensities: [0.02, 0.45, 0.80, 0.15],
        }
    }
}

impl PhantomSpec {
    /// 3D variant at 32^3 for rank-3 checks.
    pub fn three_d() -> Self {
        Self {
            image_size: vec![32, 32, 32],
            base_ventricle_radius: 2.0,
            ventricle_growth_rate: 0.03,
            cortex_thickness_by_sex: [1.6, 2.4],
            warp_amplitude: 1.2,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let rank = self.image_size.len();
        if !(2..=3).contains(&rank) {
            return Err(DataError::InvalidSpec(format!("rank {rank} not in 2..=3")));
        }
        if self.image_size.iter().any(|&s| s % 8 != 0 || s < 16) {
            return Err(DataError::InvalidSpec(format!(
                "image size {:?} must be >= 16 and divisible by 8",
                self.image_size
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(DataError::InvalidSpec("noise_sigma must be >= 0".into()));
        }
        if self.base_ventricle_radius <= 0.0 || self.ventricle_growth_rate < 0.0 {
            return Err(DataError::InvalidSpec("ventricle radii must be positive".into()));
        }
        if self.head_scale <= 0.0 || self.head_scale > 0.5 {
            return Err(DataError::InvalidSpec("head_scale must be in (0, 0.5]".into()));
        }
        // nesting: the largest ventricle must fit inside the cortex band
        let min_axis = self.head_semiaxes().iter().fold(f64::INFINITY, |m, &a| m.min(a));
        let t_max = self.cortex_thickness_by_sex.iter().fold(0.0f64, |m, &t| m.max(t));
        let rv_max = self.base_ventricle_radius + self.ventricle_growth_rate * 120.0;
        if rv_max + t_max + 2.0 >= min_axis {
            return Err(DataError::InvalidSpec(format!(
                "ventricle (max {rv_max:.1}) not nested inside head (min axis {min_axis:.1})"
            )));
        }
        Ok(())
    }

    fn head_semiaxes(&self) -> Vec<f64> {
        self.image_size
            .iter()
            .enumerate()
            .map(|(d, &s)| self.head_scale * s as f64 * HEAD_ANISO[d])
            .collect()
    }

    /// Fingerprint of the spec (stable across runs).
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("spec serializes");
        format!("{:08x}", crc32fast::hash(json.as_bytes()))
    }
}

/// Smooth random displacement: a coarse Gaussian control grid, bilinearly
/// interpolated over the image domain.
struct SmoothWarp {
    ctrl: Vec<Vec<f64>>, // per component, flattened control grid
    ctrl_dims: Vec<usize>,
    image_size: Vec<usize>,
}

impl SmoothWarp {
    fn sample(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Self {
        let rank = spec.image_size.len();
        let ctrl_dims: Vec<usize> = spec
            .image_size
            .iter()
            .map(|&s| ((s as f64 / spec.warp_smoothness).round() as usize).max(1) + 1)
            .collect();
        let n: usize = ctrl_dims.iter().product();
        let std = spec.warp_amplitude * 0.5;
        let ctrl = (0..rank)
            .map(|_| {
                let mut v = vec![0.0f64; n];
                fill_standard_normal(rng, &mut v);
                v.iter_mut().for_each(|x| *x *= std);
                v
            })
            .collect();
        Self { ctrl, ctrl_dims, image_size: spec.image_size.clone() }
    }

    /// Displacement component `comp` at voxel position `p` (multilinear).
    fn displacement(&self, p: &[usize], comp: usize) -> f64 {
        let rank = self.image_size.len();
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for d in 0..rank {
            let extent = (self.image_size[d] - 1).max(1) as f64;
            let pos = p[d] as f64 / extent * (self.ctrl_dims[d] - 1) as f64;
            let f = pos.floor().min((self.ctrl_dims[d] - 1) as f64);
            base[d] = f as usize;
            frac[d] = pos - f;
        }
        let grid = &self.ctrl[comp];
        let mut strides = vec![1usize; rank];
        for i in (0..rank - 1).rev() {
            strides[i] = strides[i + 1] * self.ctrl_dims[i + 1];
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << rank) {
            let mut w = 1.0;
            let mut off = 0usize;
            for d in 0..rank {
                if corner >> d & 1 == 1 {
                    if base[d] + 1 >= self.ctrl_dims[d] {
                        w = 0.0;
                        break;
                    }
                    w *= frac[d];
                    off += (base[d] + 1) * strides[d];
                } else {
                    w *= 1.0 - frac[d];
                    off += base[d] * strides[d];
                }
            }
            if w != 0.0 {
                acc += w * grid[off];
            }
        }
        acc
    }
}

fn region_at(spec: &PhantomSpec, q: &[f64], age: f64, sex: Sex) -> u8 {
    let rank = spec.image_size.len();
    let axes = spec.head_semiaxes();
    let thickness = spec.cortex_thickness_by_sex[sex.index() as usize];
    let rv = spec.base_ventricle_radius + spec.ventricle_growth_rate * age;
    let mut e_head = 0.0;
    let mut e_inner = 0.0;
    let mut e_vent = 0.0;
    for d in 0..rank {
        let c = (spec.image_size[d] - 1) as f64 / 2.0;
        let dq = q[d] - c;
        e_head += (dq / axes[d]).powi(2);
        e_inner += (dq / (axes[d] - thickness)).powi(2);
        e_vent += (dq / (rv * VENTRICLE_ANISO[d])).powi(2);
    }
    if e_head > 1.0 {
        REGION_BACKGROUND
    } else if e_inner > 1.0 {
        REGION_CORTEX
    } else if e_vent <= 1.0 {
        REGION_VENTRICLE
    } else {
        REGION_WHITE_MATTER
    }
}

/// Deterministic phantom: returns the image volume and its label map. The
/// same warp realization shapes both, so they are exactly consistent before
/// the image noise.
pub fn generate_phantom<T: Scalar>(
    age: f64,
    sex: Sex,
    seed: u64,
    spec: &PhantomSpec,
) -> Result<(Volume<T>, LabelMap), DataError> {
    spec.validate()?;
    if !(0.0..=120.0).contains(&age) || !age.is_finite() {
        return Err(DataError::InvalidCondition(format!("age {age} outside [0, 120]")));
    }
    let rank = spec.image_size.len();
    let vox: usize = spec.image_size.iter().product();
    let warp = SmoothWarp::sample(spec, &mut substream(seed, "phantom.warp", 0));
    let mut noise_rng = substream(seed, "phantom.noise", 0);

    let mut strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        strides[i] = strides[i + 1] * spec.image_size[i + 1];
    }
    let mut labels = vec![0u8; vox];
    let mut image = vec![T::zero(); vox];
    let mut p = [0usize; 3];
    let mut q = [0.0f64; 3];
    for lin in 0..vox {
        for d in 0..rank {
            p[d] = lin / strides[d] % spec.image_size[d];
        }
        for d in 0..rank {
            q[d] = p[d] as f64 + warp.displacement(&p[..rank], d);
        }
        let region = region_at(spec, &q[..rank], age, sex);
        labels[lin] = region;
        let mut val = spec.region_intensities[region as usize];
        if spec.noise_sigma > 0.0 {
            val += spec.noise_sigma * crate::rng::standard_normal::<f64>(&mut noise_rng);
        }
        image[lin] = T::of_f64(val.clamp(0.0, 1.0));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(&spec.image_size);
    let volume = Volume::new(Tensor::new(&shape, image))
        .map_err(|e| DataError::InvalidSpec(e.to_string()))?;
    let label_map = LabelMap::new(
        labels,
        &spec.image_size,
        REGION_NAMES.iter().map(|s| s.to_string()).collect(),
    )
    .map_err(|e| DataError::InvalidSpec(e.to_string()))?;
    Ok((volume, label_map))
}

pub const DATASET_VERSION: u32 = 1;

/// One sample's record in the manifest.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SampleRecord {
    pub id: u64,
    pub age: f64,
    pub sex: u8,
    pub seed: u64,
    pub shape: Vec<usize>,
    pub image_offset: u64,
    pub image_len: u64,
    pub image_crc32: u32,
    pub label_offset: u64,
    pub label_len: u64,
    pub label_crc32: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_offset: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_len: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_crc32: Option<u32>,
}

/// Dataset manifest: version, generating-spec fingerprint, sample records.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<PhantomSpec>,
    pub spec_hash: String,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn fingerprint(&self) -> String {
        format!("{}:{}", self.spec_hash, self.samples.len())
    }
}

/// In-memory dataset: images, labels, optional per-sample fields, conditions.
pub struct Dataset<T: Scalar> {
    pub manifest: DatasetManifest,
    pub images: Vec<Volume<T>>,
    pub labels: Vec<LabelMap>,
    pub fields: Option<Vec<DeformationField<T>>>,
    pub conditions: Vec<Condition>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

fn f32_bytes<T: Scalar>(data: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for &v in data {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

fn f32_from_bytes<T: Scalar>(bytes: &[u8]) -> Vec<T> {
    bytes
        .chunks_exact(4)
        .map(|b| T::of_f64(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect()
}

/// Appends sample blobs and accumulates manifest records.
pub struct DatasetWriter {
    dir: std::path::PathBuf,
    images: fs::File,
    labels: fs::File,
    fields: Option<fs::File>,
    image_pos: u64,
    label_pos: u64,
    field_pos: u64,
    manifest: DatasetManifest,
}

impl DatasetWriter {
    pub fn create(
        path: &Path,
        spec: Option<PhantomSpec>,
        spec_hash: String,
        with_fields: bool,
    ) -> Result<Self, DataError> {
        fs::create_dir_all(path)?;
        let images = fs::File::create(path.join("images.bin"))?;
        let labels = fs::File::create(path.join("labels.bin"))?;
        let fields =
            if with_fields { Some(fs::File::create(path.join("fields.bin"))?) } else { None };
        Ok(Self {
            dir: path.to_path_buf(),
            images,
            labels,
            fields,
            image_pos: 0,
            label_pos: 0,
            field_pos: 0,
            manifest: DatasetManifest {
                version: DATASET_VERSION,
                spec,
                spec_hash,
                samples: Vec::new(),
            },
        })
    }

    pub fn append<T: Scalar>(
        &mut self,
        age: f64,
        sex: Sex,
        seed: u64,
        image: &Volume<T>,
        labels: &LabelMap,
        field: Option<&DeformationField<T>>,
    ) -> Result<(), DataError> {
        let img_bytes = f32_bytes(image.tensor().data());
        let lbl_bytes = labels.labels().to_vec();
        let id = self.manifest.samples.len() as u64;
        let mut rec = SampleRecord {
            id,
            age,
            sex: sex.index(),
            seed,
            shape: image.tensor().shape().to_vec(),
            image_offset: self.image_pos,
            image_len: img_bytes.len() as u64,
            image_crc32: crc32fast::hash(&img_bytes),
            label_offset: self.label_pos,
            label_len: lbl_bytes.len() as u64,
            label_crc32: crc32fast::hash(&lbl_bytes),
            field_offset: None,
            field_len: None,
            field_crc32: None,
        };
        self.images.write_all(&img_bytes)?;
        self.image_pos += img_bytes.len() as u64;
        self.labels.write_all(&lbl_bytes)?;
        self.label_pos += lbl_bytes.len() as u64;
        if let Some(field) = field {
            let file = self
                .fields
                .as_mut()
                .ok_or_else(|| DataError::SizeMismatch("writer created without fields".into()))?;
            let fb = f32_bytes(field.tensor().data());
            rec.field_offset = Some(self.field_pos);
            rec.field_len = Some(fb.len() as u64);
            rec.field_crc32 = Some(crc32fast::hash(&fb));
            file.write_all(&fb)?;
            self.field_pos += fb.len() as u64;
        }
        self.manifest.samples.push(rec);
        Ok(())
    }

    pub fn finish(mut self) -> Result<DatasetManifest, DataError> {
        self.images.flush()?;
        self.labels.flush()?;
        if let Some(f) = &mut self.fields {
            f.flush()?;
        }
        let json = serde_json::to_string_pretty(&self.manifest)
            .map_err(|e| DataError::ManifestCorrupt(e.to_string()))?;
        fs::write(self.dir.join("manifest.json"), json)?;
        Ok(self.manifest)
    }
}

/// Generate and persist a phantom dataset. Ages are skewed young (70% in
/// [5, 20] when the range allows) to mirror a realistic cohort imbalance;
/// sex is drawn with probability `sex_balance` of being male.
pub fn write_dataset(
    spec: &PhantomSpec,
    n: usize,
    age_range: (f64, f64),
    sex_balance: f64,
    seed: u64,
    path: &Path,
) -> Result<DatasetManifest, DataError> {
    spec.validate()?;
    if n == 0 {
        return Err(DataError::InvalidSpec("n must be >= 1".into()));
    }
    let (lo, hi) = age_range;
    if !(0.0..=120.0).contains(&lo) || !(0.0..=120.0).contains(&hi) || lo >= hi {
        return Err(DataError::InvalidCondition(format!("bad age range {lo}..{hi}")));
    }
    if !(0.0..=1.0).contains(&sex_balance) {
        return Err(DataError::InvalidCondition(format!("sex balance {sex_balance}")));
    }
    let mut writer = DatasetWriter::create(path, Some(spec.clone()), spec.hash(), false)?;
    let mut age_rng = substream(seed, "dataset.ages", 0);
    let mut sex_rng = substream(seed, "dataset.sex", 0);
    let mut seed_rng = substream(seed, "dataset.seeds", 0);
    let young = (lo.max(5.0), hi.min(20.0));
    let young_possible = young.0 < young.1;
    for _ in 0..n {
        let age = if young_possible && uniform_f64(&mut age_rng) < 0.7 {
            crate::rng::uniform_in(&mut age_rng, young.0, young.1)
        } else {
            crate::rng::uniform_in(&mut age_rng, lo, hi)
        };
        let sex = if uniform_f64(&mut sex_rng) < sex_balance { Sex::Male } else { Sex::Female };
        let sample_seed = seed_rng.next_u64();
        let (img, lbl) = generate_phantom::<f32>(age, sex, sample_seed, spec)?;
        writer.append(age, sex, sample_seed, &img, &lbl, None)?;
    }
    writer.finish()
}

fn read_blob(
    bytes: &[u8],
    offset: u64,
    len: u64,
    crc: u32,
    id: u64,
    what: &'static str,
) -> Result<Vec<u8>, DataError> {
    let (start, end) = (offset as usize, (offset + len) as usize);
    if end > bytes.len() {
        return Err(DataError::SizeMismatch(format!(
            "sample {id} {what} blob [{start}, {end}) beyond file of {} bytes",
            bytes.len()
        )));
    }
    let blob = &bytes[start..end];
    if crc32fast::hash(blob) != crc {
        return Err(DataError::ChecksumMismatch { id, what });
    }
    Ok(blob.to_vec())
}

/// Load only the manifest of a dataset directory.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let manifest_raw = fs::read_to_string(path.join("manifest.json"))?;
    let manifest: DatasetManifest = serde_json::from_str(&manifest_raw)
        .map_err(|e| DataError::ManifestCorrupt(e.to_string()))?;
    if manifest.version != DATASET_VERSION {
        return Err(DataError::UnknownVersion(manifest.version));
    }
    Ok(manifest)
}

/// Load a dataset directory, verifying sizes and checksums.
pub fn read_dataset<T: Scalar>(path: &Path) -> Result<Dataset<T>, DataError> {
    let manifest_raw = fs::read_to_string(path.join("manifest.json"))?;
    let manifest: DatasetManifest = serde_json::from_str(&manifest_raw)
        .map_err(|e| DataError::ManifestCorrupt(e.to_string()))?;
    if manifest.version != DATASET_VERSION {
        return Err(DataError::UnknownVersion(manifest.version));
    }
    let mut images_bytes = Vec::new();
    fs::File::open(path.join("images.bin"))?.read_to_end(&mut images_bytes)?;
    let mut labels_bytes = Vec::new();
    fs::File::open(path.join("labels.bin"))?.read_to_end(&mut labels_bytes)?;
    let any_fields = manifest.samples.iter().any(|s| s.field_offset.is_some());
    let fields_bytes = if any_fields {
        let mut b = Vec::new();
        fs::File::open(path.join("fields.bin"))?.read_to_end(&mut b)?;
        Some(b)
    } else {
        None
    };

    let mut images = Vec::with_capacity(manifest.samples.len());
    let mut labels = Vec::with_capacity(manifest.samples.len());
    let mut fields = any_fields.then(Vec::new);
    let mut conditions = Vec::with_capacity(manifest.samples.len());
    for rec in &manifest.samples {
        let spatial = rec.shape[1..].to_vec();
        let vox: usize = spatial.iter().product();
        let expect_img = (rec.shape.iter().product::<usize>() * 4) as u64;
        if rec.image_len != expect_img {
            return Err(DataError::SizeMismatch(format!(
                "sample {} image length {} != shape {:?}",
                rec.id, rec.image_len, rec.shape
            )));
        }
        if rec.label_len != vox as u64 {
            return Err(DataError::SizeMismatch(format!(
                "sample {} label length {} != {vox}",
                rec.id, rec.label_len
            )));
        }
        let img = read_blob(&images_bytes, rec.image_offset, rec.image_len, rec.image_crc32, rec.id, "image")?;
        let lbl = read_blob(&labels_bytes, rec.label_offset, rec.label_len, rec.label_crc32, rec.id, "label")?;
        images.push(
            Volume::new(Tensor::new(&rec.shape, f32_from_bytes::<T>(&img)))
                .map_err(|e| DataError::ManifestCorrupt(e.to_string()))?,
        );
        labels.push(
            LabelMap::new(lbl, &spatial, REGION_NAMES.iter().map(|s| s.to_string()).collect())
                .map_err(|e| DataError::ManifestCorrupt(e.to_string()))?,
        );
        if let (Some(fo), Some(fl), Some(fc), Some(fb)) =
            (rec.field_offset, rec.field_len, rec.field_crc32, fields_bytes.as_ref())
        {
            let raw = read_blob(fb, fo, fl, fc, rec.id, "field")?;
            let mut fshape = vec![spatial.len()];
            fshape.extend_from_slice(&spatial);
            fields.as_mut().unwrap().push(
                DeformationField::new(Tensor::new(&fshape, f32_from_bytes::<T>(&raw)))
                    .map_err(|e| DataError::ManifestCorrupt(e.to_string()))?,
            );
        }
        let sex = Sex::from_index(rec.sex).map_err(|e| DataError::InvalidCondition(e.to_string()))?;
        conditions.push(
            Condition::new(rec.age, sex).map_err(|e| DataError::InvalidCondition(e.to_string()))?,
        );
    }
    Ok(Dataset { manifest, images, labels, fields, conditions })
}

/// Uniform sampling over decade age bins: draw a non-empty bin uniformly,
/// then a sample uniformly within it.
pub struct AgeBinnedSampler {
    bins: Vec<Vec<usize>>,
    pub bin_width: f64,
    /// Decade ranges inside the observed span that contain no samples.
    pub empty_bins: Vec<(f64, f64)>,
}

impl AgeBinnedSampler {
    pub fn new(conditions: &[Condition], bin_width: f64) -> Result<Self, DataError> {
        if conditions.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        assert!(bin_width > 0.0);
        let bin_of = |age: f64| (age / bin_width) as usize;
        let max_bin = conditions.iter().map(|c| bin_of(c.age_years)).max().unwrap();
        let min_bin = conditions.iter().map(|c| bin_of(c.age_years)).min().unwrap();
        let mut all_bins = vec![Vec::new(); max_bin + 1];
        for (i, c) in conditions.iter().enumerate() {
            all_bins[bin_of(c.age_years)].push(i);
        }
        let empty_bins = (min_bin..=max_bin)
            .filter(|&b| all_bins[b].is_empty())
            .map(|b| (b as f64 * bin_width, (b + 1) as f64 * bin_width))
            .collect();
        let bins: Vec<Vec<usize>> = all_bins.into_iter().filter(|b| !b.is_empty()).collect();
        Ok(Self { bins, bin_width, empty_bins })
    }

    pub fn non_empty_bins(&self) -> usize {
        self.bins.len()
    }

    /// Draw one sample index.
    pub fn draw(&self, rng: &mut ChaCha8Rng) -> usize {
        let bin = &self.bins[uniform_usize(rng, self.bins.len())];
        bin[uniform_usize(rng, bin.len())]
    }

    /// Draw a batch of indices.
    pub fn draw_batch(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
        (0..n).map(|_| self.draw(rng)).collect()
    }
}
