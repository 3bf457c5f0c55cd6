//! Frozen feature maps standing in for the pretrained text encoder, plus
//! reading and writing of precomputed instance-feature files.
//!
//! The prompt path and the class-text path share one [`PromptEncoder`]: a
//! prompt matrix is mean-pooled over its rows, a description is mean-pooled over
//! its token embeddings, and both pooled vectors go through the same
//! `tanh`-separated two-stage affine map.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::InstanceBag;
use crate::error::{Error, Result};
use crate::linalg::{axpy, normalized, Matrix};
use crate::scalar::Scalar;

/// Magic bytes opening every feature file.
pub const FEATURE_MAGIC: [u8; 4] = *b"QPML";
pub const FEATURE_VERSION: u16 = 1;
const HEADER_LEN: usize = 16;

/// Embedding (`d_e`), hidden (`hidden`) and output (`d_f`) widths of the frozen text map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderDims {
    pub d_e: usize,
    pub hidden: usize,
    pub d_f: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self { d_e: 32, hidden: 48, d_f: 64 }
    }
}

fn normal_vec<T: Scalar>(rng: &mut impl Rng, len: usize, std: f64) -> Vec<T> {
    (0..len).map(|_| T::lit(std * rng.sample::<f64, _>(StandardNormal))).collect()
}

/// Frozen two-stage map `u ↦ tanh(u·W1 + b1)·W2 + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEncoder<T> {
    dims: EncoderDims,
    seed: u64,
    w1: Matrix<T>,
    b1: Vec<T>,
    w2: Matrix<T>,
    b2: Vec<T>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace<T> {
    pub hidden: Vec<T>,
    pub output: Vec<T>,
}

impl<T: Scalar> PromptEncoder<T> {
    pub fn new(dims: EncoderDims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7e47_e1c0_de00_0001);
        let EncoderDims { d_e, hidden, d_f } = dims;
        let w1 = Matrix::from_vec(d_e, hidden, normal_vec(&mut rng, d_e * hidden, 2.0 / (d_e as f64).sqrt())).unwrap();
        let b1 = normal_vec(&mut rng, hidden, 0.1);
        let w2 =
            Matrix::from_vec(hidden, d_f, normal_vec(&mut rng, hidden * d_f, 2.0 / ((hidden * d_f) as f64).sqrt())).unwrap();
        let b2 = normal_vec(&mut rng, d_f, 0.1 / (d_f as f64).sqrt());
        Self { dims, seed, w1, b1, w2, b2 }
    }

    pub fn dims(&self) -> EncoderDims {
        self.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Applies the map to a pooled `d_e` vector.
    pub fn map(&self, pooled: &[T]) -> EncoderTrace<T> {
        let mut hidden = self.w1.vec_mul(pooled);
        for (h, b) in hidden.iter_mut().zip(&self.b1) {
            *h = (*h + *b).tanh();
        }
        let mut output = self.w2.vec_mul(&hidden);
        axpy(T::one(), &self.b2, &mut output);
        EncoderTrace { hidden, output }
    }

    /// Vector-Jacobian product: gradient with respect to the pooled input.
    pub fn map_backward(&self, trace: &EncoderTrace<T>, d_output: &[T]) -> Vec<T> {
        let d_hidden = self.w2.mul_vec(d_output);
        let d_pre: Vec<T> = d_hidden.iter().zip(&trace.hidden).map(|(g, h)| *g * (T::one() - *h * *h)).collect();
        self.w1.mul_vec(&d_pre)
    }

    fn check_prompt(&self, prompt: &Matrix<T>) -> Result<()> {
        if prompt.rows() == 0 || prompt.cols() != self.dims.d_e {
            return Err(Error::Shape(format!(
                "prompt is {}x{}, encoder expects Lx{} with L >= 1",
                prompt.rows(),
                prompt.cols(),
                self.dims.d_e
            )));
        }
        if !prompt.is_finite() {
            return Err(Error::NonFinite("prompt".into()));
        }
        Ok(())
    }

    /// Encodes an `L_P × d_e` prompt matrix into a `d_f` prototype feature.
    pub fn encode_prompt(&self, prompt: &Matrix<T>) -> Result<Vec<T>> {
        Ok(self.trace_prompt(prompt)?.output)
    }

    pub fn trace_prompt(&self, prompt: &Matrix<T>) -> Result<EncoderTrace<T>> {
        self.check_prompt(prompt)?;
        Ok(self.map(&prompt.row_mean()))
    }

    /// Gradient of a prompt-feature cotangent with respect to every prompt entry.
    pub fn prompt_backward(&self, prompt_rows: usize, trace: &EncoderTrace<T>, d_output: &[T]) -> Matrix<T> {
        let d_pooled = self.map_backward(trace, d_output);
        let share = T::one() / T::from_usize(prompt_rows).unwrap();
        let row: Vec<T> = d_pooled.iter().map(|g| *g * share).collect();
        let mut out = Matrix::zeros(prompt_rows, self.dims.d_e);
        for r in 0..prompt_rows {
            out.row_mut(r).copy_from_slice(&row);
        }
        out
    }

    /// Encodes a class description through the same map as prompts.
    pub fn encode_text(&self, embedder: &TokenEmbedder, description: &str) -> Result<Vec<T>> {
        let tokens = tokenize(description);
        if tokens.is_empty() {
            return Err(Error::InvalidInput("empty description".into()));
        }
        if embedder.dim() != self.dims.d_e {
            return Err(Error::Shape(format!("token width {} != encoder width {}", embedder.dim(), self.dims.d_e)));
        }
        let mut pooled = vec![T::zero(); self.dims.d_e];
        for tok in &tokens {
            axpy(T::one(), &embedder.embed::<T>(tok), &mut pooled);
        }
        let inv = T::one() / T::from_usize(tokens.len()).unwrap();
        pooled.iter_mut().for_each(|x| *x *= inv);
        Ok(self.map(&pooled).output)
    }
}

/// Default seed of the frozen text-side encoders; fixed so every run shares one "pretrained" map.
pub const FROZEN_ENCODER_SEED: u64 = 0x5eed_c0de;

/// Prompt/text encoder and token embedder derived from one encoder seed.
pub fn frozen_encoders<T: Scalar>(dims: EncoderDims, seed: u64) -> (PromptEncoder<T>, TokenEmbedder) {
    (PromptEncoder::new(dims, seed.wrapping_add(1)), TokenEmbedder::new(dims.d_e, seed.wrapping_add(2)))
}

/// Splits a description into whitespace/comma separated tokens.
pub fn tokenize(description: &str) -> Vec<&str> {
    description.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()).collect()
}

/// Seeded token → unit-vector lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenEmbedder {
    dim: usize,
    seed: u64,
}

impl TokenEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embed<T: Scalar>(&self, token: &str) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token.as_bytes()) ^ self.seed.rotate_left(17));
        normalized(&normal_vec::<T>(&mut rng, self.dim, 1.0))
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(*b)).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Writes an `n × d_f` matrix as a little-endian float32 feature file.
pub fn write_feature_file(path: &Path, features: &Matrix<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&0u16.to_le_bytes())?;
    let dim_u32 = |d: usize| u32::try_from(d).map_err(|_| Error::Shape(format!("{d} does not fit in u32")));
    w.write_all(&dim_u32(features.rows())?.to_le_bytes())?;
    w.write_all(&dim_u32(features.cols())?.to_le_bytes())?;
    for v in features.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a feature file written by [`write_feature_file`].
pub fn read_feature_file(path: &Path) -> Result<Matrix<f32>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let corrupt = |reason: &str| Error::CorruptHeader { path: path.to_path_buf(), reason: reason.to_string() };
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() < HEADER_LEN {
        return Err(corrupt("file shorter than the 16-byte header"));
    }
    if bytes[0..4] != FEATURE_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FEATURE_VERSION {
        return Err(corrupt(&format!("unsupported version {version}")));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[HEADER_LEN..];
    if n == 0 || d == 0 || body.len() != n * d * 4 {
        return Err(corrupt(&format!("header declares {n}x{d} but body holds {} bytes", body.len())));
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Matrix::from_vec(n, d, data)
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub bag_id: String,
    pub dataset: usize,
    pub label: usize,
    pub path: String,
}

/// CSV manifest (`bag_id,dataset,label,path`); paths resolve against `base_dir`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FeatureManifest {
    pub base_dir: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl FeatureManifest {
    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let mut rdr = csv::Reader::from_path(path)?;
        let rows = rdr.deserialize().collect::<Result<Vec<ManifestRow>, _>>()?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { base_dir, rows })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        if self.rows.is_empty() {
            w.write_record(["bag_id", "dataset", "label", "path"])?;
        }
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        self.base_dir.join(&row.path)
    }
}

/// Loads every bag referenced by the manifest, checking that all share one feature width.
pub fn ingest_features<T: Scalar>(manifest: &FeatureManifest, expected_dim: Option<usize>) -> Result<Vec<InstanceBag<T>>> {
    let loaded: Vec<(PathBuf, Matrix<f32>)> = manifest
        .rows
        .par_iter()
        .map(|row| {
            let path = manifest.resolve(row);
            read_feature_file(&path).map(|m| (path, m))
        })
        .collect::<Result<_>>()?;
    let mut expected = expected_dim;
    let mut bags = Vec::with_capacity(loaded.len());
    for (row, (path, m)) in manifest.rows.iter().zip(loaded) {
        match expected {
            Some(d) if d != m.cols() => return Err(Error::DimMismatch { path, expected: d, found: m.cols() }),
            None => expected = Some(m.cols()),
            _ => {}
        }
        bags.push(InstanceBag::new(row.bag_id.clone(), row.dataset, row.label, m.convert())?);
    }
    Ok(bags)
}
