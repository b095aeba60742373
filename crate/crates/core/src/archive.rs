//! Single-file model archive.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "NSFMODEL"                8 bytes
//! version                   u32
//! header length H           u64
//! header                    H bytes of UTF-8 JSON
//! parameters                f64 values, count given in the header
//! ```
//!
//! The header records the model spec, block shapes, kernel families, the
//! likelihood family and a free-form `extra` object. Parameters follow in
//! this order, matrices row-major:
//!
//! ```text
//! x_train (N×D), nu_train (N)
//! per spatial component: z (M×D), delta (M), omega_chol (M×M), beta0,
//!     beta1 (D), amplitude, lengthscale
//! spatial loadings (J×T), nonspatial loadings (J×(L−T))
//! mean-field delta (N×K), omega (N×K), prior mean (K), prior variance (K)
//! likelihood aux (J or 0)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{NsfError, Result};
use crate::kernels::{KernelKind, KernelParams};
use crate::likelihoods::{LikelihoodFamily, LikelihoodSpec};
use crate::model::{FactorModel, MeanFieldComponentState, ModelSpec};
use crate::scalar::Scalar;
use crate::svgp::SpatialComponentState;

pub const MAGIC: &[u8; 8] = b"NSFMODEL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    num_observations: usize,
    num_features: usize,
    dim: usize,
    inducing: Vec<usize>,
    kernels: Vec<KernelKind>,
    likelihood: LikelihoodFamily,
    aux_len: usize,
    num_values: usize,
    extra: serde_json::Value,
}

fn push<F: Scalar>(out: &mut Vec<f64>, it: impl IntoIterator<Item = F>) {
    out.extend(it.into_iter().map(|v| v.as_f64()));
}

/// Writes `model` with an arbitrary JSON `extra` block.
pub fn write_model<F: Scalar, W: Write>(model: &FactorModel<F>, extra: &serde_json::Value, mut w: W) -> Result<()> {
    model.validate()?;
    let mut values = Vec::new();
    push(&mut values, model.x_train.iter().copied());
    push(&mut values, model.nu_train.iter().copied());
    for c in &model.spatial {
        push(&mut values, c.z.iter().copied());
        push(&mut values, c.delta.iter().copied());
        push(&mut values, c.omega_chol.iter().copied());
        push(&mut values, [c.beta0]);
        push(&mut values, c.beta1.iter().copied());
        push(&mut values, [c.kernel.amplitude, c.kernel.lengthscale]);
    }
    push(&mut values, model.spatial_loadings.iter().copied());
    push(&mut values, model.nonspatial_loadings.iter().copied());
    if let Some(mf) = &model.meanfield {
        push(&mut values, mf.delta.iter().copied());
        push(&mut values, mf.omega.iter().copied());
        push(&mut values, mf.prior_mean.iter().copied());
        push(&mut values, mf.prior_var.iter().copied());
    }
    push(&mut values, model.likelihood.aux.iter().copied());
    let header = Header {
        spec: model.spec.clone(),
        num_observations: model.num_observations(),
        num_features: model.num_features(),
        dim: model.x_train.ncols(),
        inducing: model.spatial.iter().map(|c| c.num_inducing()).collect(),
        kernels: model.spatial.iter().map(|c| c.kernel.kind).collect(),
        likelihood: model.likelihood.family,
        aux_len: model.likelihood.aux.len(),
        num_values: values.len(),
        extra: extra.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| NsfError::Archive(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(values.len() * 8);
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

struct Cursor<F> {
    values: Vec<F>,
    pos: usize,
}

impl<F: Scalar> Cursor<F> {
    fn take(&mut self, n: usize) -> Result<Vec<F>> {
        let end = self.pos + n;
        if end > self.values.len() {
            return Err(NsfError::Archive("parameter block is truncated".into()));
        }
        let out = self.values[self.pos..end].to_vec();
        self.pos = end;
        Ok(out)
    }

    fn one(&mut self) -> Result<F> {
        Ok(self.take(1)?[0])
    }

    fn vec(&mut self, n: usize) -> Result<Array1<F>> {
        Ok(Array1::from_vec(self.take(n)?))
    }

    fn mat(&mut self, r: usize, c: usize) -> Result<Array2<F>> {
        Array2::from_shape_vec((r, c), self.take(r * c)?).map_err(|e| NsfError::Archive(e.to_string()))
    }
}

/// Reads a model and its `extra` block.
pub fn read_model<F: Scalar, R: Read>(mut r: R) -> Result<(FactorModel<F>, serde_json::Value)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| NsfError::Archive("file is too short".into()))?;
    if &magic != MAGIC {
        return Err(NsfError::Archive("not a model archive".into()));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != FORMAT_VERSION {
        return Err(NsfError::Archive(format!("unsupported archive version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let len = usize::try_from(u64::from_le_bytes(b8)).map_err(|_| NsfError::Archive("header too large".into()))?;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(|_| NsfError::Archive("header is truncated".into()))?;
    let h: Header = serde_json::from_slice(&json).map_err(|e| NsfError::Archive(format!("bad header: {e}")))?;
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.len() != h.num_values * 8 {
        return Err(NsfError::Archive(format!("expected {} parameter bytes, found {}", h.num_values * 8, raw.len())));
    }
    let values = raw.chunks_exact(8).map(|c| F::of(f64::from_le_bytes(c.try_into().expect("8-byte chunk")))).collect();
    let mut cur = Cursor { values, pos: 0 };
    let (n, j, d) = (h.num_observations, h.num_features, h.dim);
    let t = h.spec.num_spatial;
    let k = h.spec.num_components.checked_sub(t).ok_or_else(|| NsfError::Archive("T exceeds L".into()))?;
    if h.inducing.len() != t || h.kernels.len() != t {
        return Err(NsfError::Archive("component list disagrees with the model spec".into()));
    }
    let x_train = cur.mat(n, d)?;
    let nu_train = cur.vec(n)?;
    let mut spatial = Vec::with_capacity(t);
    for (&m, &kind) in h.inducing.iter().zip(&h.kernels) {
        let z = cur.mat(m, d)?;
        let delta = cur.vec(m)?;
        let omega_chol = cur.mat(m, m)?;
        let beta0 = cur.one()?;
        let beta1 = cur.vec(d)?;
        let amplitude = cur.one()?;
        let lengthscale = cur.one()?;
        spatial.push(SpatialComponentState {
            z,
            delta,
            omega_chol,
            beta0,
            beta1,
            kernel: KernelParams { kind, amplitude, lengthscale },
        });
    }
    let spatial_loadings = cur.mat(j, t)?;
    let nonspatial_loadings = cur.mat(j, k)?;
    let meanfield = if k > 0 {
        Some(MeanFieldComponentState {
            delta: cur.mat(n, k)?,
            omega: cur.mat(n, k)?,
            prior_mean: cur.vec(k)?,
            prior_var: cur.vec(k)?,
        })
    } else {
        None
    };
    let likelihood = LikelihoodSpec { family: h.likelihood, aux: cur.vec(h.aux_len)? };
    if cur.pos != cur.values.len() {
        return Err(NsfError::Archive("trailing parameter values".into()));
    }
    let model = FactorModel {
        spec: h.spec,
        spatial_loadings,
        nonspatial_loadings,
        spatial,
        meanfield,
        likelihood,
        x_train,
        nu_train,
    };
    model.validate().map_err(|e| NsfError::Archive(format!("archive holds an invalid model: {e}")))?;
    Ok((model, h.extra))
}

pub fn save_model<F: Scalar>(model: &FactorModel<F>, extra: &serde_json::Value, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_model(model, extra, std::io::BufWriter::new(f))
}

pub fn load_model<F: Scalar>(path: &Path) -> Result<(FactorModel<F>, serde_json::Value)> {
    let f = std::fs::File::open(path)?;
    read_model(std::io::BufReader::new(f))
}
