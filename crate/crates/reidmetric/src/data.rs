//! Dataset ingestion, the synthetic domain-shift generator, the
//! augmentation set (flip, HSV jitter, grayscale, random erasing,
//! vector jitter), and query/gallery splitting.
//!
//! Manifest format: one `relative_path,person_id,camera_id` line per
//! sample, `#` starts a comment. Payload files are raw tensors: magic
//! "RMIMG1", then C, H, W as u32 LE, then C*H*W f32 LE values. Payloads
//! with H = W = 1 load as feature vectors.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::layers::FeatureMap;
use crate::numkit::{self, Matrix, Rng};
use crate::{Error, Result};

pub const PAYLOAD_MAGIC: &[u8; 6] = b"RMIMG1";

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Image(FeatureMap),
    Vector(Vec<f64>),
}

impl Payload {
    pub fn flat(&self) -> &[f64] {
        match self {
            Payload::Image(m) => &m.data,
            Payload::Vector(v) => v,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|x| x.is_finite())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub payload: Payload,
    pub person_id: u32,
    pub camera_id: u32,
    pub domain_tag: String,
    /// Manifest-relative payload path, when manifest-backed.
    pub path: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitRole {
    Train,
    Query,
    Gallery,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<SampleRecord>,
    pub role: SplitRole,
    index: HashMap<u32, Vec<usize>>,
}

impl Dataset {
    pub fn new(records: Vec<SampleRecord>, role: SplitRole) -> Self {
        let mut index: HashMap<u32, Vec<usize>> = HashMap::new();
        for (i, r) in records.iter().enumerate() {
            index.entry(r.person_id).or_default().push(i);
        }
        Dataset { records, role, index }
    }

    /// Person ids in ascending order.
    pub fn identities(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.index.keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    pub fn samples_of(&self, id: u32) -> &[usize] {
        self.index.get(&id).map(|v| v.as_slice()).unwrap_or(&[])
    }
}

// ---------------------------------------------------------------------------
// payload and manifest files

pub fn write_payload(path: &Path, payload: &Payload) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(PAYLOAD_MAGIC)?;
    let (c, h, wd, data): (u32, u32, u32, &[f64]) = match payload {
        Payload::Image(m) => (m.channels as u32, m.height as u32, m.width as u32, &m.data),
        Payload::Vector(v) => (v.len() as u32, 1, 1, v),
    };
    w.write_all(&c.to_le_bytes())?;
    w.write_all(&h.to_le_bytes())?;
    w.write_all(&wd.to_le_bytes())?;
    for v in data {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_payload(path: &Path) -> Result<Payload> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != PAYLOAD_MAGIC {
        return Err(Error::Format(format!("bad payload magic in {}", path.display())));
    }
    let mut b4 = [0u8; 4];
    let mut dims = [0u32; 3];
    for d in &mut dims {
        r.read_exact(&mut b4)?;
        *d = u32::from_le_bytes(b4);
    }
    let (c, h, w) = (dims[0] as usize, dims[1] as usize, dims[2] as usize);
    let mut data = Vec::with_capacity(c * h * w);
    for _ in 0..c * h * w {
        r.read_exact(&mut b4)?;
        data.push(f32::from_le_bytes(b4) as f64);
    }
    if h == 1 && w == 1 {
        Ok(Payload::Vector(data))
    } else {
        Ok(Payload::Image(FeatureMap::from_vec(c, h, w, data)?))
    }
}

/// Load a manifest; payload paths resolve relative to the manifest's
/// directory. The domain tag is the manifest's file stem.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let file = File::open(path)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let tag = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line_num = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = trimmed.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Parse {
                line: line_num,
                msg: format!("expected `path,person_id,camera_id`, got {:?}", trimmed),
            });
        }
        let person_id: u32 = parts[1].trim().parse().map_err(|_| Error::Parse {
            line: line_num,
            msg: format!("bad person_id {:?}", parts[1]),
        })?;
        let camera_id: u32 = parts[2].trim().parse().map_err(|_| Error::Parse {
            line: line_num,
            msg: format!("bad camera_id {:?}", parts[2]),
        })?;
        let rel = parts[0].trim().to_string();
        let full = base.join(&rel);
        if !full.exists() {
            return Err(Error::MissingPayload(full.display().to_string()));
        }
        let payload = read_payload(&full)?;
        records.push(SampleRecord {
            payload,
            person_id,
            camera_id,
            domain_tag: tag.clone(),
            path: Some(rel),
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(Dataset::new(records, SplitRole::Train))
}

/// Write a dataset as `<dir>/<tag>.manifest` plus payload files under
/// `<dir>/payloads/`. Returns the manifest path.
pub fn write_dataset(dir: &Path, tag: &str, dataset: &Dataset) -> Result<PathBuf> {
    let payload_dir = dir.join("payloads");
    std::fs::create_dir_all(&payload_dir)?;
    let manifest_path = dir.join(format!("{tag}.manifest"));
    let mut w = BufWriter::new(File::create(&manifest_path)?);
    writeln!(w, "# relative_path,person_id,camera_id")?;
    for (i, rec) in dataset.records.iter().enumerate() {
        let rel = format!("payloads/{tag}_{i:06}.rmimg");
        write_payload(&dir.join(&rel), &rec.payload)?;
        writeln!(w, "{rel},{},{}", rec.person_id, rec.camera_id)?;
    }
    w.flush()?;
    Ok(manifest_path)
}

// ---------------------------------------------------------------------------
// synthetic domain-shift generator

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub tag: String,
    pub num_identities: usize,
    pub samples_per_identity: usize,
    pub latent_dim: usize,
    /// Within-identity noise scale.
    pub sigma_within: f64,
    /// Row-major latent_dim x latent_dim transform; must be invertible.
    pub transform: Vec<f64>,
    pub offset: Vec<f64>,
    pub cameras: usize,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 1 || self.samples_per_identity < 1 || self.cameras < 1 {
            return Err(Error::Config("domain counts must be >= 1".into()));
        }
        if self.sigma_within < 0.0 {
            return Err(Error::Config("sigma_within must be >= 0".into()));
        }
        let d = self.latent_dim;
        if self.transform.len() != d * d || self.offset.len() != d {
            return Err(Error::Config(format!(
                "transform/offset shape mismatch for latent dim {d}"
            )));
        }
        let a = Matrix::from_vec(d, d, self.transform.clone())?;
        if determinant(&a).abs() < 1e-9 {
            return Err(Error::Config(format!(
                "domain transform for {} is singular",
                self.tag
            )));
        }
        Ok(())
    }
}

/// Determinant by Gaussian elimination with partial pivoting.
fn determinant(m: &Matrix) -> f64 {
    let n = m.rows();
    let mut a: Vec<Vec<f64>> = (0..n).map(|r| m.row(r).to_vec()).collect();
    let mut det = 1.0;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        if a[pivot][col] == 0.0 {
            return 0.0;
        }
        if pivot != col {
            a.swap(pivot, col);
            det = -det;
        }
        det *= a[col][col];
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    det
}

fn unit_sphere_point(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        if let Ok(u) = numkit::l2_normalize(&v) {
            return u;
        }
    }
}

/// One dataset per domain. Samples are x = A_d (z_i + eps) + b_d with
/// eps ~ N(0, sigma_within^2 I). With `shared_prototypes` the same z_i
/// underlie every domain (cross-domain identity structure); otherwise
/// each domain redraws its prototypes.
pub fn gen_synthetic(specs: &[DomainSpec], shared_prototypes: bool, rng: &mut Rng) -> Result<Vec<Dataset>> {
    if specs.is_empty() {
        return Err(Error::Config("at least one domain spec required".into()));
    }
    for s in specs {
        s.validate()?;
    }
    let dim = specs[0].latent_dim;
    if shared_prototypes && specs.iter().any(|s| s.latent_dim != dim) {
        return Err(Error::Config("shared prototypes require equal latent dims".into()));
    }
    let max_ids = specs.iter().map(|s| s.num_identities).max().unwrap();
    let shared: Vec<Vec<f64>> = if shared_prototypes {
        (0..max_ids).map(|_| unit_sphere_point(rng, dim)).collect()
    } else {
        Vec::new()
    };

    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let d = spec.latent_dim;
        let a = Matrix::from_vec(d, d, spec.transform.clone())?;
        let prototypes: Vec<Vec<f64>> = if shared_prototypes {
            shared[..spec.num_identities].to_vec()
        } else {
            (0..spec.num_identities).map(|_| unit_sphere_point(rng, d)).collect()
        };
        let mut records = Vec::with_capacity(spec.num_identities * spec.samples_per_identity);
        for (id, z) in prototypes.iter().enumerate() {
            for _ in 0..spec.samples_per_identity {
                let noisy: Vec<f64> = z
                    .iter()
                    .map(|v| v + rng.normal_scaled(0.0, spec.sigma_within))
                    .collect();
                let mut x = spec.offset.clone();
                for (r, xr) in x.iter_mut().enumerate() {
                    *xr += numkit::dot(a.row(r), &noisy);
                }
                records.push(SampleRecord {
                    payload: Payload::Vector(x),
                    person_id: id as u32,
                    camera_id: rng.below(spec.cameras) as u32,
                    domain_tag: spec.tag.clone(),
                    path: None,
                });
            }
        }
        out.push(Dataset::new(records, SplitRole::Train));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// augmentation

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default = "default_half")]
    pub flip_prob: f64,
    #[serde(default = "default_half")]
    pub hsv_prob: f64,
    #[serde(default = "default_hue_delta")]
    pub hue_delta: f64,
    #[serde(default = "default_sv_low")]
    pub sv_low: f64,
    #[serde(default = "default_sv_high")]
    pub sv_high: f64,
    #[serde(default = "default_gray_prob")]
    pub gray_prob: f64,
    #[serde(default = "default_half")]
    pub erase_prob: f64,
    #[serde(default = "default_erase_area_low")]
    pub erase_area_low: f64,
    #[serde(default = "default_erase_area_high")]
    pub erase_area_high: f64,
    #[serde(default = "default_erase_aspect_low")]
    pub erase_aspect_low: f64,
    #[serde(default = "default_erase_aspect_high")]
    pub erase_aspect_high: f64,
    /// Gaussian jitter scale for vector payloads.
    #[serde(default)]
    pub vector_sigma: f64,
}

fn default_half() -> f64 {
    0.5
}
fn default_hue_delta() -> f64 {
    0.02
}
fn default_sv_low() -> f64 {
    0.8
}
fn default_sv_high() -> f64 {
    1.2
}
fn default_gray_prob() -> f64 {
    0.1
}
fn default_erase_area_low() -> f64 {
    0.02
}
fn default_erase_area_high() -> f64 {
    0.4
}
fn default_erase_aspect_low() -> f64 {
    0.3
}
fn default_erase_aspect_high() -> f64 {
    3.3
}

impl Default for AugmentConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults populate")
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            hsv_prob: 0.0,
            gray_prob: 0.0,
            erase_prob: 0.0,
            vector_sigma: 0.0,
            ..AugmentConfig::default()
        }
    }
}

pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / delta).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, v)
}

pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i32 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn flip_horizontal(img: &mut FeatureMap) {
    for c in 0..img.channels {
        for h in 0..img.height {
            for w in 0..img.width / 2 {
                let a = img.idx(c, h, w);
                let b = img.idx(c, h, img.width - 1 - w);
                img.data.swap(a, b);
            }
        }
    }
}

fn hsv_jitter(img: &mut FeatureMap, cfg: &AugmentConfig, rng: &mut Rng) {
    debug_assert_eq!(img.channels, 3);
    let dh = rng.uniform_in(-cfg.hue_delta, cfg.hue_delta);
    let ds = rng.uniform_in(cfg.sv_low, cfg.sv_high);
    let dv = rng.uniform_in(cfg.sv_low, cfg.sv_high);
    for h in 0..img.height {
        for w in 0..img.width {
            let (ri, gi, bi) = (img.idx(0, h, w), img.idx(1, h, w), img.idx(2, h, w));
            let (hh, ss, vv) = rgb_to_hsv(img.data[ri], img.data[gi], img.data[bi]);
            let (r, g, b) = hsv_to_rgb(
                (hh + dh).rem_euclid(1.0),
                (ss * ds).clamp(0.0, 1.0),
                (vv * dv).clamp(0.0, 1.0),
            );
            img.data[ri] = r;
            img.data[gi] = g;
            img.data[bi] = b;
        }
    }
}

fn grayscale(img: &mut FeatureMap) {
    debug_assert_eq!(img.channels, 3);
    for h in 0..img.height {
        for w in 0..img.width {
            let (ri, gi, bi) = (img.idx(0, h, w), img.idx(1, h, w), img.idx(2, h, w));
            let luma = 0.299 * img.data[ri] + 0.587 * img.data[gi] + 0.114 * img.data[bi];
            img.data[ri] = luma;
            img.data[gi] = luma;
            img.data[bi] = luma;
        }
    }
}

/// Fill a random rectangle with uniform noise. Returns the chosen
/// rectangle (top, left, height, width), if one fit.
fn random_erase(img: &mut FeatureMap, cfg: &AugmentConfig, rng: &mut Rng) -> Option<(usize, usize, usize, usize)> {
    let area = (img.height * img.width) as f64;
    for _ in 0..100 {
        let target = area * rng.uniform_in(cfg.erase_area_low, cfg.erase_area_high);
        let aspect = rng.uniform_in(cfg.erase_aspect_low, cfg.erase_aspect_high);
        let eh = (target * aspect).sqrt().round() as usize;
        let ew = (target / aspect).sqrt().round() as usize;
        if eh == 0 || ew == 0 || eh > img.height || ew > img.width {
            continue;
        }
        let top = rng.below(img.height - eh + 1);
        let left = rng.below(img.width - ew + 1);
        for c in 0..img.channels {
            for h in top..top + eh {
                for w in left..left + ew {
                    let i = img.idx(c, h, w);
                    img.data[i] = rng.uniform();
                }
            }
        }
        return Some((top, left, eh, ew));
    }
    None
}

/// Apply the configured augmentations. Identity metadata and payload
/// shape are never changed.
pub fn augment(record: &SampleRecord, cfg: &AugmentConfig, rng: &mut Rng) -> SampleRecord {
    let mut out = record.clone();
    match &mut out.payload {
        Payload::Image(img) => {
            if cfg.flip_prob > 0.0 && rng.uniform() < cfg.flip_prob {
                flip_horizontal(img);
            }
            if img.channels == 3 && cfg.hsv_prob > 0.0 && rng.uniform() < cfg.hsv_prob {
                hsv_jitter(img, cfg, rng);
            }
            if img.channels == 3 && cfg.gray_prob > 0.0 && rng.uniform() < cfg.gray_prob {
                grayscale(img);
            }
            if cfg.erase_prob > 0.0 && rng.uniform() < cfg.erase_prob {
                random_erase(img, cfg, rng);
            }
        }
        Payload::Vector(v) => {
            if cfg.vector_sigma > 0.0 {
                for x in v.iter_mut() {
                    *x += rng.normal_scaled(0.0, cfg.vector_sigma);
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// query/gallery split

/// Per identity, ceil(query_fraction * count) samples (at least 1, at
/// most count - 1) become queries; the rest form the gallery.
pub fn split_query_gallery(dataset: &Dataset, rng: &mut Rng, query_fraction: f64) -> Result<(Dataset, Dataset)> {
    let mut query = Vec::new();
    let mut gallery = Vec::new();
    for id in dataset.identities() {
        let samples = dataset.samples_of(id);
        if samples.len() < 2 {
            return Err(Error::InsufficientSamples { id, count: samples.len() });
        }
        let mut pool: Vec<usize> = samples.to_vec();
        rng.shuffle(&mut pool);
        let q = ((query_fraction * pool.len() as f64).ceil() as usize).clamp(1, pool.len() - 1);
        for (i, idx) in pool.into_iter().enumerate() {
            if i < q {
                query.push(dataset.records[idx].clone());
            } else {
                gallery.push(dataset.records[idx].clone());
            }
        }
    }
    Ok((
        Dataset::new(query, SplitRole::Query),
        Dataset::new(gallery, SplitRole::Gallery),
    ))
}
