//! Synthetic paired datasets and the offline reference-embedding cache.
//!
//! Each pair shares a latent code `z ~ N(0, I_{d_latent})`; the image side is
//! `x = A z + σ ε_x` and the text side `y = B z + σ ε_y`, where `A` and `B` are
//! fixed Gaussian projections drawn from the seed. The last
//! `ceil(test_fraction · n)` indices form the test split.

use std::path::Path;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::encoder::{Modality, SimilarityMatrix, TwoTowerModel};
use crate::error::{Error, Result};
use crate::format::{self, Container, Kind, ManifestFields};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d_x: usize,
    pub d_y: usize,
    pub d_latent: usize,
    pub noise_sigma: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::config("n", format!("need at least 2 pairs, got {}", self.n)));
        }
        if self.d_latent == 0 {
            return Err(Error::config("d_latent", "must be positive"));
        }
        if self.d_latent > self.d_x.min(self.d_y) {
            return Err(Error::config(
                "d_latent",
                format!(
                    "{} exceeds min(d_x, d_y) = {}",
                    self.d_latent,
                    self.d_x.min(self.d_y)
                ),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::config(
                "noise_sigma",
                format!("must be a finite non-negative number, got {}", self.noise_sigma),
            ));
        }
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return Err(Error::config(
                "test_fraction",
                format!("must lie in [0, 1], got {}", self.test_fraction),
            ));
        }
        Ok(())
    }
}

/// The hidden generative quantities behind a synthetic dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// `d_x × d_latent`
    pub a: Array2<f64>,
    /// `d_y × d_latent`
    pub b: Array2<f64>,
    /// `n × d_latent`
    pub latents: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    /// `n × d_x`
    pub xs: Array2<f64>,
    /// `n × d_y`
    pub ys: Array2<f64>,
    pub split: Vec<Split>,
    pub seed: u64,
    pub noise_sigma: f64,
    pub d_latent: usize,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<PairedDataset> {
    generate_synthetic_with_truth(spec).map(|(d, _)| d)
}

pub fn generate_synthetic_with_truth(spec: &SyntheticSpec) -> Result<(PairedDataset, GroundTruth)> {
    spec.validate()?;
    let SyntheticSpec {
        n,
        d_x,
        d_y,
        d_latent,
        noise_sigma,
        test_fraction,
        seed,
    } = *spec;
    let mut rng = SeededRng::new(seed);
    let scale = 1.0 / (d_latent as f64).sqrt();
    let a = Array2::from_shape_simple_fn((d_x, d_latent), || rng.normal() * scale);
    let b = Array2::from_shape_simple_fn((d_y, d_latent), || rng.normal() * scale);

    let mut latents = Array2::zeros((n, d_latent));
    let mut xs = Array2::zeros((n, d_x));
    let mut ys = Array2::zeros((n, d_y));
    for i in 0..n {
        for k in 0..d_latent {
            latents[[i, k]] = rng.normal();
        }
        let z = latents.row(i);
        let x = a.dot(&z);
        let y = b.dot(&z);
        for r in 0..d_x {
            xs[[i, r]] = x[r] + noise_sigma * rng.normal();
        }
        for r in 0..d_y {
            ys[[i, r]] = y[r] + noise_sigma * rng.normal();
        }
    }

    let n_test = ((test_fraction * n as f64).ceil() as usize).min(n);
    let split = (0..n)
        .map(|i| if i >= n - n_test { Split::Test } else { Split::Train })
        .collect();
    let dataset = PairedDataset {
        xs,
        ys,
        split,
        seed,
        noise_sigma,
        d_latent,
    };
    Ok((dataset, GroundTruth { a, b, latents }))
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.xs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_x(&self) -> usize {
        self.xs.ncols()
    }

    pub fn d_y(&self) -> usize {
        self.ys.ncols()
    }

    pub fn train_indices(&self) -> Vec<usize> {
        self.indices_of(Split::Train)
    }

    pub fn test_indices(&self) -> Vec<usize> {
        self.indices_of(Split::Test)
    }

    fn indices_of(&self, which: Split) -> Vec<usize> {
        self.split
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == which)
            .map(|(i, _)| i)
            .collect()
    }

    /// The first `ceil(fraction · n_train)` training indices. Smaller
    /// fractions always give prefixes of larger ones.
    pub fn train_subset(&self, fraction: f64) -> Result<Vec<usize>> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::config(
                "fraction",
                format!("must lie in (0, 1], got {fraction}"),
            ));
        }
        let train = self.train_indices();
        let keep = ((fraction * train.len() as f64).ceil() as usize).min(train.len());
        Ok(train[..keep].to_vec())
    }

    /// Gather the rows of `indices` as `(xs, ys)`.
    pub fn batch(&self, indices: &[usize]) -> (Array2<f64>, Array2<f64>) {
        (
            self.xs.select(Axis(0), indices),
            self.ys.select(Axis(0), indices),
        )
    }

    /// SHA-256 prefix of the stored payload; identifies the data a cache was built from.
    pub fn content_hash(&self) -> String {
        let bytes = self.to_container().encode();
        format::sha256_hex(&bytes)[..16].to_owned()
    }

    fn to_container(&self) -> Container {
        let mut c = Container::new(Kind::Dataset);
        c.push_matrix("xs", &self.xs);
        c.push_matrix("ys", &self.ys);
        let split: Vec<u8> = self
            .split
            .iter()
            .map(|s| match s {
                Split::Train => 0,
                Split::Test => 1,
            })
            .collect();
        c.push_bytes("split", &split);
        c.push_u64s("seed", &[self.seed]);
        c.push_f64s("noise_sigma", &[self.noise_sigma]);
        c.push_u64s("d_latent", &[self.d_latent as u64]);
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let c = self.to_container();
        format::write(
            path,
            &c,
            ManifestFields {
                n: self.len() as u64,
                dims: format::dims([
                    ("d_x", self.d_x()),
                    ("d_y", self.d_y()),
                    ("d_latent", self.d_latent),
                ]),
                seed: Some(self.seed),
                source_id: Some(self.content_hash()),
            },
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (c, manifest) = format::read(path, Kind::Dataset)?;
        let xs = c.matrix("xs")?;
        let ys = c.matrix("ys")?;
        let split = c
            .bytes("split")?
            .into_iter()
            .map(|b| match b {
                0 => Ok(Split::Train),
                1 => Ok(Split::Test),
                other => Err(Error::Format(format!("unknown split tag {other}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        format::check_n(&manifest, xs.nrows())?;
        if ys.nrows() != xs.nrows() || split.len() != xs.nrows() {
            return Err(Error::Format(format!(
                "row counts disagree: xs {}, ys {}, split {}",
                xs.nrows(),
                ys.nrows(),
                split.len()
            )));
        }
        let d_latent = c.u64_scalar("d_latent")? as usize;
        format::check_dim(&manifest, "d_x", xs.ncols())?;
        format::check_dim(&manifest, "d_y", ys.ncols())?;
        format::check_dim(&manifest, "d_latent", d_latent)?;
        let seed = c.u64_scalar("seed")?;
        if manifest.seed != Some(seed) {
            return Err(Error::Format(format!(
                "manifest seed {:?} disagrees with payload seed {seed}",
                manifest.seed
            )));
        }
        Ok(Self {
            xs,
            ys,
            split,
            seed,
            noise_sigma: c.f64_scalar("noise_sigma")?,
            d_latent,
        })
    }
}

/// Unit-normalized reference embeddings for every pair of a dataset, in
/// dataset order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    /// `n × d`
    pub e1: Array2<f64>,
    /// `n × d`
    pub e2: Array2<f64>,
    /// `id_hash` of the model that produced the embeddings.
    pub source_id: String,
    /// `content_hash` of the dataset the embeddings belong to.
    pub dataset_id: String,
}

const UNIT_TOL: f64 = 1e-9;

impl EmbeddingCache {
    pub fn new(e1: Array2<f64>, e2: Array2<f64>, source_id: String, dataset_id: String) -> Result<Self> {
        if e1.dim() != e2.dim() {
            return Err(Error::Argument(format!(
                "embedding shapes differ: {:?} vs {:?}",
                e1.dim(),
                e2.dim()
            )));
        }
        for (name, e) in [("e1", &e1), ("e2", &e2)] {
            for (i, row) in e.axis_iter(Axis(0)).enumerate() {
                let norm = row.dot(&row).sqrt();
                if !((norm - 1.0).abs() <= UNIT_TOL) {
                    return Err(Error::Argument(format!(
                        "{name} row {i} has norm {norm}, expected 1"
                    )));
                }
            }
        }
        Ok(Self {
            e1,
            e2,
            source_id,
            dataset_id,
        })
    }

    pub fn len(&self) -> usize {
        self.e1.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.e1.ncols()
    }

    /// Reference similarities among the pairs `indices`, in that order.
    pub fn similarity(&self, indices: &[usize]) -> SimilarityMatrix {
        let e1 = self.e1.select(Axis(0), indices);
        let e2 = self.e2.select(Axis(0), indices);
        SimilarityMatrix::from_embeddings(&e1, &e2)
    }

    /// Fail unless this cache was built from `dataset`.
    pub fn check_matches(&self, dataset: &PairedDataset) -> Result<()> {
        if self.len() != dataset.len() {
            return Err(Error::config(
                "ref",
                format!(
                    "cache holds {} pairs but the dataset has {}",
                    self.len(),
                    dataset.len()
                ),
            ));
        }
        let hash = dataset.content_hash();
        if self.dataset_id != hash {
            return Err(Error::config(
                "ref",
                format!(
                    "cache was built for dataset {} but this dataset is {hash}",
                    self.dataset_id
                ),
            ));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(Kind::Cache);
        c.push_matrix("e1", &self.e1);
        c.push_matrix("e2", &self.e2);
        c.push_bytes("source_id", self.source_id.as_bytes());
        c.push_bytes("dataset_id", self.dataset_id.as_bytes());
        format::write(
            path,
            &c,
            ManifestFields {
                n: self.len() as u64,
                dims: format::dims([("d", self.dim())]),
                seed: None,
                source_id: Some(self.source_id.clone()),
            },
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (c, manifest) = format::read(path, Kind::Cache)?;
        let e1 = c.matrix("e1")?;
        let e2 = c.matrix("e2")?;
        format::check_n(&manifest, e1.nrows())?;
        format::check_dim(&manifest, "d", e1.ncols())?;
        let source_id = c.string("source_id")?;
        if manifest.source_id.as_deref() != Some(source_id.as_str()) {
            return Err(Error::Format(format!(
                "manifest source_id {:?} disagrees with payload {source_id}",
                manifest.source_id
            )));
        }
        Self::new(e1, e2, source_id, c.string("dataset_id")?)
            .map_err(|e| Error::Format(format!("stored cache is invalid: {e}")))
    }
}

pub fn build_reference_cache(dataset: &PairedDataset, reference: &TwoTowerModel) -> Result<EmbeddingCache> {
    if reference.d_x() != dataset.d_x() {
        return Err(Error::config(
            "reference",
            format!(
                "image tower expects d_x = {}, dataset has {}",
                reference.d_x(),
                dataset.d_x()
            ),
        ));
    }
    if reference.d_y() != dataset.d_y() {
        return Err(Error::config(
            "reference",
            format!(
                "text tower expects d_y = {}, dataset has {}",
                reference.d_y(),
                dataset.d_y()
            ),
        ));
    }
    let (e1, _) = reference.embed_rows(Modality::Image, dataset.xs.view())?;
    let (e2, _) = reference.embed_rows(Modality::Text, dataset.ys.view())?;
    EmbeddingCache::new(e1, e2, reference.id_hash(), dataset.content_hash())
}
