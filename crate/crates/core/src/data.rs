//! Seeded generator of identity-grounded image/text pairs.
//!
//! Each identity is a latent attribute vector in `[-1, 1]^A`, kept pairwise
//! separated in L∞ so the retrieval task is learnable. An image renders the
//! attributes as a grid of constant-valued blocks plus per-pixel Gaussian
//! noise; a caption quantizes each (noise-perturbed) attribute through a
//! fixed codebook, one token per attribute. Same identity ⇒ same latent
//! source; image and text noise draw independently. Train and test splits
//! use disjoint identity ranges. Everything is deterministic given the seed.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{gaussian_vec, stream_rng};

/// Generator parameters. Image/vocabulary dimensions are carried here so the
/// generator is self-contained; the harness cross-checks them against the
/// encoder's configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub num_train_ids: usize,
    pub num_test_ids: usize,
    pub imgs_per_id: usize,
    pub caps_per_img: usize,
    /// Latent attribute count A (one rendered block / one token each).
    pub n_attributes: usize,
    /// Noise std applied independently per pixel and per attribute-token.
    pub noise: f64,
    /// Minimum pairwise L∞ distance between identity attribute vectors.
    pub min_gap: f64,
    pub image_hw: (usize, usize),
    pub channels: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_train_ids: 64,
            num_test_ids: 16,
            imgs_per_id: 4,
            caps_per_img: 1,
            n_attributes: 8,
            noise: 0.1,
            min_gap: 0.25,
            image_hw: (32, 16),
            channels: 1,
            vocab_size: 64,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_train_ids + self.num_test_ids < 2 {
            return Err(Error::Config("need at least 2 identities".into()));
        }
        if self.num_test_ids == 0 {
            return Err(Error::Config("need at least 1 test identity".into()));
        }
        if self.imgs_per_id == 0 || self.caps_per_img == 0 {
            return Err(Error::Config(
                "imgs_per_id and caps_per_img must be >= 1".into(),
            ));
        }
        if self.n_attributes == 0 {
            return Err(Error::Config("n_attributes must be >= 1".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::Config("noise must be finite and >= 0".into()));
        }
        if !(self.min_gap.is_finite() && self.min_gap >= 0.0) {
            return Err(Error::Config("min_gap must be finite and >= 0".into()));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be >= 1".into()));
        }
        if self.vocab_size % self.n_attributes != 0 {
            return Err(Error::Config(format!(
                "vocab_size {} must be a multiple of n_attributes {} (fixed codebook: \
                 vocab/attributes quantization levels per attribute)",
                self.vocab_size, self.n_attributes
            )));
        }
        self.block_grid()?;
        Ok(())
    }

    /// Quantization levels per attribute in the caption codebook.
    pub fn levels(&self) -> usize {
        self.vocab_size / self.n_attributes
    }

    /// Split the image into `A` equal blocks: the (rows × cols) factorization
    /// of A that divides the image and gives the squarest blocks.
    pub fn block_grid(&self) -> Result<(usize, usize)> {
        let (h, w) = self.image_hw;
        let a = self.n_attributes;
        let mut best: Option<(usize, usize, usize)> = None; // (diff, rows, cols)
        for rows in 1..=a {
            if a % rows != 0 {
                continue;
            }
            let cols = a / rows;
            if h % rows != 0 || w % cols != 0 {
                continue;
            }
            let (bh, bw) = (h / rows, w / cols);
            let diff = bh.abs_diff(bw);
            let candidate = (diff, rows, cols);
            best = Some(match best {
                None => candidate,
                Some(b) if candidate < b => candidate,
                Some(b) => b,
            });
        }
        best.map(|(_, r, c)| (r, c)).ok_or_else(|| {
            Error::Config(format!(
                "cannot tile a {h}x{w} image into {a} equal blocks"
            ))
        })
    }
}

/// One latent identity: the attribute vector every rendering of it shares.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentitySpec {
    pub id: u64,
    pub attributes: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One image/caption pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticPair {
    pub pair_id: u64,
    pub identity: u64,
    pub split: Split,
    /// Row-major H×W×C pixels.
    pub image: Vec<f64>,
    pub token_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub cfg: DataConfig,
    pub identities: Vec<IdentitySpec>,
    pub train: Vec<SyntheticPair>,
    pub test: Vec<SyntheticPair>,
}

/// Draw identity attribute vectors by rejection: uniform in `[-1,1]^A`,
/// re-drawn until every pairwise L∞ distance reaches `min_gap`.
fn draw_identities(cfg: &DataConfig) -> Result<Vec<IdentitySpec>> {
    use rand::Rng;
    let total = cfg.num_train_ids + cfg.num_test_ids;
    let mut rng = stream_rng(cfg.seed, "identity-attributes");
    let mut out: Vec<IdentitySpec> = Vec::with_capacity(total);
    let mut consecutive_failures = 0usize;
    while out.len() < total {
        let cand: Vec<f64> = (0..cfg.n_attributes)
            .map(|_| rng.gen_range(-1.0..=1.0))
            .collect();
        let ok = out.iter().all(|existing| {
            let gap = existing
                .attributes
                .iter()
                .zip(&cand)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            gap >= cfg.min_gap
        });
        if ok {
            out.push(IdentitySpec {
                id: out.len() as u64,
                attributes: cand,
            });
            consecutive_failures = 0;
        } else {
            consecutive_failures += 1;
            if consecutive_failures >= 1000 {
                return Err(Error::Config(format!(
                    "attribute space too crowded: placed {} of {total} identities \
                     (A={}, min_gap={}); lower num_ids or min_gap",
                    out.len(),
                    cfg.n_attributes,
                    cfg.min_gap
                )));
            }
        }
    }
    Ok(out)
}

fn render_image(cfg: &DataConfig, spec: &IdentitySpec, img_idx: usize) -> Result<Vec<f64>> {
    let (h, w) = cfg.image_hw;
    let c = cfg.channels;
    let (rows, cols) = cfg.block_grid()?;
    let (bh, bw) = (h / rows, w / cols);
    let mut rng = stream_rng(cfg.seed, &format!("image/{}/{}", spec.id, img_idx));
    let noise = gaussian_vec(&mut rng, h * w * c, cfg.noise);
    let mut px = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let block = (y / bh) * cols + (x / bw);
            let base = spec.attributes[block];
            for ch in 0..c {
                let idx = (y * w + x) * c + ch;
                px[idx] = base + noise[idx];
            }
        }
    }
    Ok(px)
}

fn emit_caption(cfg: &DataConfig, spec: &IdentitySpec, img_idx: usize, cap_idx: usize) -> Vec<usize> {
    let levels = cfg.levels();
    let mut rng = stream_rng(
        cfg.seed,
        &format!("caption/{}/{}/{}", spec.id, img_idx, cap_idx),
    );
    let noise = gaussian_vec(&mut rng, cfg.n_attributes, cfg.noise);
    spec.attributes
        .iter()
        .enumerate()
        .map(|(k, &a)| {
            let perturbed = (a + noise[k]).clamp(-1.0, 1.0);
            let level = (((perturbed + 1.0) / 2.0) * levels as f64).floor() as usize;
            k * levels + level.min(levels - 1)
        })
        .collect()
}

/// Generate both splits. Identities `0..num_train_ids` are train; the rest
/// test — the splits share no identity.
pub fn generate_dataset(cfg: &DataConfig) -> Result<Dataset> {
    cfg.validate()?;
    let identities = draw_identities(cfg)?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut pair_id = 0u64;
    for spec in &identities {
        let split = if (spec.id as usize) < cfg.num_train_ids {
            Split::Train
        } else {
            Split::Test
        };
        for img_idx in 0..cfg.imgs_per_id {
            let image = render_image(cfg, spec, img_idx)?;
            for cap_idx in 0..cfg.caps_per_img {
                let token_ids = emit_caption(cfg, spec, img_idx, cap_idx);
                let pair = SyntheticPair {
                    pair_id,
                    identity: spec.id,
                    split,
                    image: image.clone(),
                    token_ids,
                };
                pair_id += 1;
                match split {
                    Split::Train => train.push(pair),
                    Split::Test => test.push(pair),
                }
            }
        }
    }
    Ok(Dataset {
        cfg: *cfg,
        identities,
        train,
        test,
    })
}

/// Manifest record: everything about a pair except the pixels, which live in
/// a flat binary sidecar file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub pair_id: u64,
    pub identity: u64,
    pub split: Split,
    pub image_path: String,
    pub token_ids: Vec<usize>,
}

/// Export the dataset: `manifest.jsonl` (one record per line) plus
/// `images/pair{N}.bin` files, each a 3×u32 little-endian shape header
/// (height, width, channels) followed by raw little-endian f64 pixels.
pub fn write_manifest(dataset: &Dataset, dir: &Path) -> Result<()> {
    let images_dir = dir.join("images");
    std::fs::create_dir_all(&images_dir)?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(manifest_path)?);
    let (h, w) = dataset.cfg.image_hw;
    let c = dataset.cfg.channels;
    for pair in dataset.train.iter().chain(&dataset.test) {
        let rel = format!("images/pair{}.bin", pair.pair_id);
        let mut buf = Vec::with_capacity(12 + pair.image.len() * 8);
        buf.extend_from_slice(&(h as u32).to_le_bytes());
        buf.extend_from_slice(&(w as u32).to_le_bytes());
        buf.extend_from_slice(&(c as u32).to_le_bytes());
        for &v in &pair.image {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(dir.join(&rel), buf)?;
        let record = ManifestRecord {
            pair_id: pair.pair_id,
            identity: pair.identity,
            split: pair.split,
            image_path: rel,
            token_ids: pair.token_ids.clone(),
        };
        serde_json::to_writer(&mut manifest, &record)
            .map_err(|e| Error::Serialization(e.to_string()))?;
        manifest.write_all(b"\n")?;
    }
    manifest.flush()?;
    Ok(())
}
