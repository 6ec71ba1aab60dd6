//! Two-tower linear encoders with unit-normalized outputs.
//!
//! Each tower maps a raw feature vector `v` to `W v / |W v|`. Similarities are
//! inner products of the normalized outputs, and all gradients are closed
//! form: for `e = W v / r` with `r = |W v|`, a cotangent `g` on `e` pulls back
//! to `((I - e e^T) g / r) v^T` on `W`.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{self, Container, Kind, ManifestFields};
use crate::rng::SeededRng;

/// Pre-normalization norms below this are rejected.
pub const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoTowerModel {
    /// Image tower, `d × d_x`.
    pub w1: Array2<f64>,
    /// Text tower, `d × d_y`.
    pub w2: Array2<f64>,
    pub tau: f64,
}

impl TwoTowerModel {
    pub fn new(w1: Array2<f64>, w2: Array2<f64>, tau: f64) -> Result<Self> {
        if w1.nrows() != w2.nrows() {
            return Err(Error::Argument(format!(
                "tower output dims differ: {} vs {}",
                w1.nrows(),
                w2.nrows()
            )));
        }
        if w1.nrows() == 0 || w1.ncols() == 0 || w2.ncols() == 0 {
            return Err(Error::Argument("encoder dims must be positive".into()));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Argument(format!("tau must be positive, got {tau}")));
        }
        Ok(Self { w1, w2, tau })
    }

    /// Entries i.i.d. normal with standard deviation `1/sqrt(fan_in)`.
    pub fn random(d: usize, d_x: usize, d_y: usize, tau: f64, seed: u64) -> Result<Self> {
        let mut rng = SeededRng::derive(seed, 0x656e_636f_6465_72);
        let sx = 1.0 / (d_x.max(1) as f64).sqrt();
        let sy = 1.0 / (d_y.max(1) as f64).sqrt();
        let w1 = Array2::from_shape_simple_fn((d, d_x), || rng.normal() * sx);
        let w2 = Array2::from_shape_simple_fn((d, d_y), || rng.normal() * sy);
        Self::new(w1, w2, tau)
    }

    /// Both towers keep the first `d` input coordinates.
    pub fn identity(d: usize, d_x: usize, d_y: usize, tau: f64) -> Result<Self> {
        let eye = |cols: usize| Array2::from_shape_fn((d, cols), |(r, c)| f64::from(r == c));
        Self::new(eye(d_x), eye(d_y), tau)
    }

    pub fn dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn d_x(&self) -> usize {
        self.w1.ncols()
    }

    pub fn d_y(&self) -> usize {
        self.w2.ncols()
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.w2.len()
    }

    pub fn tower(&self, modality: Modality) -> &Array2<f64> {
        match modality {
            Modality::Image => &self.w1,
            Modality::Text => &self.w2,
        }
    }

    /// Content hash over dims, weights and temperature (first 16 hex digits
    /// of SHA-256).
    pub fn id_hash(&self) -> String {
        let mut bytes = Vec::with_capacity(8 * (self.num_params() + 4));
        for v in [self.dim(), self.d_x(), self.d_y()] {
            bytes.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for v in self.w1.iter().chain(self.w2.iter()) {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.extend_from_slice(&self.tau.to_le_bytes());
        format::sha256_hex(&bytes)[..16].to_owned()
    }

    pub fn embed(&self, modality: Modality, raw: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let w = self.tower(modality);
        if raw.len() != w.ncols() {
            return Err(Error::Argument(format!(
                "{modality:?} input has dim {}, encoder expects {}",
                raw.len(),
                w.ncols()
            )));
        }
        let z = w.dot(&raw);
        let norm = z.dot(&z).sqrt();
        if !(norm >= DEGENERATE_NORM) {
            return Err(Error::DegenerateEmbedding { norm });
        }
        Ok(z / norm)
    }

    /// Embed every row of `raw`; returns unit rows and their pre-normalization norms.
    pub fn embed_rows(
        &self,
        modality: Modality,
        raw: ArrayView2<'_, f64>,
    ) -> Result<(Array2<f64>, Array1<f64>)> {
        let w = self.tower(modality);
        if raw.ncols() != w.ncols() {
            return Err(Error::Argument(format!(
                "{modality:?} inputs have dim {}, encoder expects {}",
                raw.ncols(),
                w.ncols()
            )));
        }
        let mut z = raw.dot(&w.t());
        let mut norms = Array1::zeros(z.nrows());
        for (mut row, norm) in z.axis_iter_mut(Axis(0)).zip(norms.iter_mut()) {
            let r = row.dot(&row).sqrt();
            if !(r >= DEGENERATE_NORM) {
                return Err(Error::DegenerateEmbedding { norm: r });
            }
            row /= r;
            *norm = r;
        }
        Ok((z, norms))
    }

    pub fn forward(&self, xs: ArrayView2<'_, f64>, ys: ArrayView2<'_, f64>) -> Result<Forward> {
        if xs.nrows() != ys.nrows() {
            return Err(Error::Argument(format!(
                "batch sizes differ: {} images vs {} texts",
                xs.nrows(),
                ys.nrows()
            )));
        }
        let (e1, n1) = self.embed_rows(Modality::Image, xs)?;
        let (e2, n2) = self.embed_rows(Modality::Text, ys)?;
        let sim = SimilarityMatrix::from_embeddings(&e1, &e2);
        Ok(Forward {
            x: xs.to_owned(),
            y: ys.to_owned(),
            e1,
            e2,
            n1,
            n2,
            sim,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new(Kind::Model);
        c.push_matrix("w1", &self.w1);
        c.push_matrix("w2", &self.w2);
        c.push_f64s("tau", &[self.tau]);
        let id = self.id_hash();
        c.push_bytes("id_hash", id.as_bytes());
        format::write(
            path,
            &c,
            ManifestFields {
                n: self.dim() as u64,
                dims: format::dims([("d", self.dim()), ("d_x", self.d_x()), ("d_y", self.d_y())]),
                seed: None,
                source_id: Some(id),
            },
        )?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (c, manifest) = format::read(path, Kind::Model)?;
        let model = Self::from_container(&c)?;
        format::check_dim(&manifest, "d", model.dim())?;
        format::check_dim(&manifest, "d_x", model.d_x())?;
        format::check_dim(&manifest, "d_y", model.d_y())?;
        Ok(model)
    }

    pub(crate) fn push_into(&self, c: &mut Container) {
        c.push_matrix("w1", &self.w1);
        c.push_matrix("w2", &self.w2);
        c.push_f64s("tau", &[self.tau]);
        c.push_bytes("id_hash", self.id_hash().as_bytes());
    }

    pub(crate) fn from_container(c: &Container) -> Result<Self> {
        let model = Self::new(c.matrix("w1")?, c.matrix("w2")?, c.f64_scalar("tau")?)
            .map_err(|e| Error::Format(format!("stored model is invalid: {e}")))?;
        let stored = c.string("id_hash")?;
        if stored != model.id_hash() {
            return Err(Error::Format(format!(
                "stored id_hash {stored} does not match weights ({})",
                model.id_hash()
            )));
        }
        Ok(model)
    }
}

/// Cosine similarities `s[i][j] = <e1_i, e2_j>`; rows index images, columns texts.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(Array2<f64>);

impl SimilarityMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() != values.ncols() {
            return Err(Error::Argument(format!(
                "similarity matrix must be square, got {:?}",
                values.dim()
            )));
        }
        if let Some(v) = values
            .iter()
            .find(|v| !(v.abs() <= 1.0 + 1e-9))
        {
            return Err(Error::Argument(format!(
                "similarity {v} lies outside [-1, 1]"
            )));
        }
        Ok(Self(values))
    }

    pub fn from_embeddings(e1: &Array2<f64>, e2: &Array2<f64>) -> Self {
        Self(e1.dot(&e2.t()))
    }

    pub fn size(&self) -> usize {
        self.0.nrows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[[i, j]]
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_array(self) -> Array2<f64> {
        self.0
    }

    pub(crate) fn check_same_shape(&self, other: &SimilarityMatrix) -> Result<()> {
        if self.0.dim() != other.0.dim() {
            return Err(Error::Argument(format!(
                "similarity shapes differ: {:?} vs {:?}",
                self.0.dim(),
                other.0.dim()
            )));
        }
        Ok(())
    }
}

pub fn similarity_batch(
    model: &TwoTowerModel,
    xs: ArrayView2<'_, f64>,
    ys: ArrayView2<'_, f64>,
) -> Result<SimilarityMatrix> {
    Ok(model.forward(xs, ys)?.sim)
}

/// Gradient with respect to every trainable quantity of a [`TwoTowerModel`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrad {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
    pub tau: f64,
}

impl ModelGrad {
    pub fn zeros_like(model: &TwoTowerModel) -> Self {
        Self {
            w1: Array2::zeros(model.w1.raw_dim()),
            w2: Array2::zeros(model.w2.raw_dim()),
            tau: 0.0,
        }
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        self.w1 *= factor;
        self.w2 *= factor;
        self.tau *= factor;
        self
    }

    pub fn add_assign(&mut self, other: &ModelGrad) {
        self.w1 += &other.w1;
        self.w2 += &other.w2;
        self.tau += other.tau;
    }

    pub fn max_abs(&self) -> f64 {
        self.w1
            .iter()
            .chain(self.w2.iter())
            .chain(std::iter::once(&self.tau))
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// First non-finite entry, if any, as (tensor, flat index, value).
    pub fn first_non_finite(&self) -> Option<(&'static str, usize, f64)> {
        let scan = |name: &'static str, a: &Array2<f64>| {
            a.iter()
                .enumerate()
                .find(|(_, v)| !v.is_finite())
                .map(|(k, v)| (name, k, *v))
        };
        scan("w1", &self.w1)
            .or_else(|| scan("w2", &self.w2))
            .or_else(|| (!self.tau.is_finite()).then_some(("tau", 0, self.tau)))
    }
}

/// Cached forward pass over one batch, enough to backpropagate any function of
/// the batch similarity matrix.
#[derive(Debug, Clone)]
pub struct Forward {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub e1: Array2<f64>,
    pub e2: Array2<f64>,
    pub n1: Array1<f64>,
    pub n2: Array1<f64>,
    pub sim: SimilarityMatrix,
}

impl Forward {
    /// Pull `coeff[i][j] = dL/ds[i][j]` back to the tower weights. The
    /// temperature component of the result is zero.
    pub fn backprop(&self, coeff: &Array2<f64>) -> ModelGrad {
        let b = self.sim.size();
        assert_eq!(coeff.dim(), (b, b), "coefficient matrix must match the batch");
        let g_e1 = coeff.dot(&self.e2);
        let g_e2 = coeff.t().dot(&self.e1);
        let pre1 = project_tangent(&self.e1, &self.n1, g_e1);
        let pre2 = project_tangent(&self.e2, &self.n2, g_e2);
        ModelGrad {
            w1: pre1.t().dot(&self.x),
            w2: pre2.t().dot(&self.y),
            tau: 0.0,
        }
    }
}

/// Row-wise `(I - e e^T) g / r`.
fn project_tangent(e: &Array2<f64>, norms: &Array1<f64>, mut g: Array2<f64>) -> Array2<f64> {
    for ((mut g_row, e_row), &r) in g
        .axis_iter_mut(Axis(0))
        .zip(e.axis_iter(Axis(0)))
        .zip(norms.iter())
    {
        let along = g_row.dot(&e_row);
        g_row.scaled_add(-along, &e_row);
        g_row /= r;
    }
    g
}

/// Gradient of `s(x, y)` for a single pair with respect to both towers.
pub fn similarity_grad(
    model: &TwoTowerModel,
    x: ArrayView1<'_, f64>,
    y: ArrayView1<'_, f64>,
) -> Result<ModelGrad> {
    let xs = x.insert_axis(Axis(0));
    let ys = y.insert_axis(Axis(0));
    let fwd = model.forward(xs, ys)?;
    Ok(fwd.backprop(&Array2::ones((1, 1))))
}
