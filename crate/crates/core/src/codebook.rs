//! Spherical K-Means++ codebooks over SURF descriptors.
//!
//! Rows are unit-norm descriptors; codewords are unit-norm columns of an
//! n x K matrix. Assignment picks argmax |V^l . x| (cosine magnitude), the
//! update accumulates assigned values into the columns and renormalizes.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// m descriptor rows by n columns, with optional provenance per row.
#[derive(Debug, Clone, Default)]
pub struct FeatureMatrix {
    pub dim: usize,
    data: Vec<f64>,
    /// (image index, keypoint index) per row.
    pub origins: Vec<(u32, u32)>,
}

impl FeatureMatrix {
    pub fn new(dim: usize) -> Self {
        FeatureMatrix {
            dim,
            data: Vec::new(),
            origins: Vec::new(),
        }
    }

    pub fn push(&mut self, row: &[f64], origin: (u32, u32)) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::Shape(format!(
                "descriptor has {} values, matrix expects {}",
                row.len(),
                self.dim
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("descriptor contains non-finite values".into()));
        }
        self.data.extend_from_slice(row);
        self.origins.push(origin);
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.origins.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Scales every row to unit L2 norm; zero rows are rejected.
    pub fn normalize_rows(&mut self) -> Result<()> {
        for i in 0..self.rows() {
            let slice = &mut self.data[i * self.dim..(i + 1) * self.dim];
            let norm = slice.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::Degenerate(format!("row {i} has zero norm")));
            }
            for v in slice.iter_mut() {
                *v /= norm;
            }
        }
        Ok(())
    }
}

/// Unit-norm codeword columns (n x K, column-major) plus fit metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub dim: usize,
    pub k: usize,
    /// column-major: codeword j occupies v[j*dim..(j+1)*dim]
    pub v: Vec<f64>,
    pub seed: u64,
    pub iterations: u32,
    /// Within-cluster cosine objective after each assignment pass: the mean
    /// squared assigned cosine, mean (V^j* . x)^2. This is the Rayleigh
    /// quotient the update ascends, so the trace is non-decreasing.
    pub objective_trace: Vec<f64>,
}

impl Codebook {
    pub fn column(&self, j: usize) -> &[f64] {
        &self.v[j * self.dim..(j + 1) * self.dim]
    }

    fn column_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.v[j * self.dim..(j + 1) * self.dim]
    }

    pub fn columns_unit_norm(&self, tol: f64) -> bool {
        (0..self.k).all(|j| {
            let n = self.column(j).iter().map(|v| v * v).sum::<f64>().sqrt();
            (n - 1.0).abs() <= tol
        })
    }
}

/// One nonzero per row: the winning codeword index and the signed dot value.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub index: Vec<u32>,
    pub value: Vec<f64>,
}

impl Assignment {
    /// Mean squared assigned cosine; the quantity the update step ascends.
    pub fn mean_squared_cosine(&self) -> f64 {
        if self.value.is_empty() {
            return 0.0;
        }
        self.value.iter().map(|v| v * v).sum::<f64>() / self.value.len() as f64
    }

    /// Mean absolute assigned cosine (diagnostic; not monotone under the
    /// damped update).
    pub fn mean_abs_cosine(&self) -> f64 {
        if self.value.is_empty() {
            return 0.0;
        }
        self.value.iter().map(|v| v.abs()).sum::<f64>() / self.value.len() as f64
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Squared Euclidean distance from each row to its nearest chosen seed.
fn d2_to_nearest(x: &FeatureMatrix, seeds: &[usize]) -> Vec<f64> {
    (0..x.rows())
        .map(|i| {
            seeds
                .iter()
                .map(|&s| {
                    let d: f64 = x
                        .row(i)
                        .iter()
                        .zip(x.row(s).iter())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    d
                })
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// K-Means++ seeding: first seed uniform, each next drawn with probability
/// proportional to the squared distance to its nearest chosen seed. Fails
/// when fewer than K distinct rows exist.
pub fn seed_pp(x: &FeatureMatrix, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if k < 1 {
        return Err(Error::Parameter("K must be at least 1".into()));
    }
    if x.rows() < k {
        return Err(Error::Degenerate(format!(
            "need at least K={k} rows, got {}",
            x.rows()
        )));
    }
    let mut seeds = vec![rng.gen_range(0..x.rows())];
    while seeds.len() < k {
        let d2 = d2_to_nearest(x, &seeds);
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::Degenerate(format!(
                "fewer than K={k} distinct rows"
            )));
        }
        let mut target = rng.gen_range(0.0..total);
        let mut chosen = x.rows() - 1;
        for (i, &w) in d2.iter().enumerate() {
            if target < w {
                chosen = i;
                break;
            }
            target -= w;
        }
        seeds.push(chosen);
    }
    Ok(seeds)
}

fn codebook_from_seeds(x: &FeatureMatrix, seeds: &[usize], seed: u64) -> Codebook {
    let mut v = Vec::with_capacity(seeds.len() * x.dim);
    for &s in seeds {
        v.extend_from_slice(x.row(s));
    }
    let mut cb = Codebook {
        dim: x.dim,
        k: seeds.len(),
        v,
        seed,
        iterations: 0,
        objective_trace: Vec::new(),
    };
    for j in 0..cb.k {
        normalize_column(cb.column_mut(j));
    }
    cb
}

fn normalize_column(col: &mut [f64]) {
    let n = col.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 1e-12 {
        for v in col.iter_mut() {
            *v /= n;
        }
    }
}

/// Assigns each row to the codeword maximizing |V^l . x|; ties break to the
/// smallest index; the stored value is the signed dot product.
pub fn assign(x: &FeatureMatrix, cb: &Codebook) -> Assignment {
    let results: Vec<(u32, f64)> = (0..x.rows())
        .into_par_iter()
        .map(|i| {
            let row = x.row(i);
            let mut best = (0u32, 0.0f64, f64::NEG_INFINITY);
            for j in 0..cb.k {
                let d = dot(cb.column(j), row);
                if d.abs() > best.2 {
                    best = (j as u32, d, d.abs());
                }
            }
            (best.0, best.1)
        })
        .collect();
    Assignment {
        index: results.iter().map(|r| r.0).collect(),
        value: results.iter().map(|r| r.1).collect(),
    }
}

/// Centroid update: V' = normalize_columns(X^T Z + V). A column that
/// collapses to zero is re-seeded from the point farthest from its assigned
/// codeword.
pub fn update(x: &FeatureMatrix, z: &Assignment, cb: &Codebook) -> Result<Codebook> {
    if z.index.len() != x.rows() {
        return Err(Error::Shape(format!(
            "assignment covers {} rows, matrix has {}",
            z.index.len(),
            x.rows()
        )));
    }
    let mut next = cb.clone();
    let mut acc = cb.v.clone(); // X^T Z + V, starting from V
    for i in 0..x.rows() {
        let j = z.index[i] as usize;
        let w = z.value[i];
        let col = &mut acc[j * cb.dim..(j + 1) * cb.dim];
        for (c, &xv) in col.iter_mut().zip(x.row(i)) {
            *c += w * xv;
        }
    }
    for j in 0..cb.k {
        let col = &mut acc[j * cb.dim..(j + 1) * cb.dim];
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 {
            // farthest point from its own codeword
            let far = (0..x.rows())
                .max_by(|&a, &b| {
                    let da = 2.0 - 2.0 * z.value[a].abs();
                    let db = 2.0 - 2.0 * z.value[b].abs();
                    da.partial_cmp(&db).unwrap()
                })
                .ok_or_else(|| Error::Degenerate("empty feature matrix".into()))?;
            col.copy_from_slice(x.row(far));
            normalize_column(col);
        } else {
            for v in col.iter_mut() {
                *v /= norm;
            }
        }
    }
    next.v = acc;
    Ok(next)
}

/// Seed, then iterate assign/update until the assignment matrix Z stops
/// changing or `max_iters` passes run. Z carries the assigned values, so
/// "unchanged" requires the codewords themselves to have stabilized
/// (column movement below 1e-10), not just the winning indices.
pub fn fit(x: &FeatureMatrix, k: usize, max_iters: u32, seed: u64) -> Result<Codebook> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds = seed_pp(x, k, &mut rng)?;
    let mut cb = codebook_from_seeds(x, &seeds, seed);
    let mut prev: Option<Vec<u32>> = None;
    for _ in 0..max_iters {
        let z = assign(x, &cb);
        cb.iterations += 1;
        cb.objective_trace.push(z.mean_squared_cosine());
        let indices_stable = prev.as_ref() == Some(&z.index);
        let next = update(x, &z, &cb)?;
        let movement = cb
            .v
            .iter()
            .zip(next.v.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let trace = std::mem::take(&mut cb.objective_trace);
        let iters = cb.iterations;
        cb = next;
        cb.objective_trace = trace;
        cb.iterations = iters;
        if indices_stable && movement < 1e-10 {
            break;
        }
        prev = Some(z.index);
    }
    Ok(cb)
}

/// Per-image code vector: L1-normalized histogram of codeword assignments.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeVector {
    pub weights: Vec<f64>,
    /// True for descriptor-less images; weights are all zero then.
    pub empty: bool,
}

/// Histogram of hard assignments over an image's descriptors.
pub fn encode(descriptors: &[Vec<f64>], cb: &Codebook) -> Result<CodeVector> {
    if descriptors.is_empty() {
        return Ok(CodeVector {
            weights: vec![0.0; cb.k],
            empty: true,
        });
    }
    let mut counts = vec![0.0f64; cb.k];
    for d in descriptors {
        if d.len() != cb.dim {
            return Err(Error::Shape(format!(
                "descriptor dim {} != codebook dim {}",
                d.len(),
                cb.dim
            )));
        }
        let mut best = (0usize, f64::NEG_INFINITY);
        for j in 0..cb.k {
            let v = dot(cb.column(j), d).abs();
            if v > best.1 {
                best = (j, v);
            }
        }
        counts[best.0] += 1.0;
    }
    let total: f64 = counts.iter().sum();
    for c in counts.iter_mut() {
        *c /= total;
    }
    Ok(CodeVector {
        weights: counts,
        empty: false,
    })
}

const FILE_MAGIC: &[u8; 4] = b"SKMC";

/// Codebook file: magic `SKMC`, n u32, K u32, column-major f64 V, seed u64,
/// iterations u32 (little-endian).
pub fn save_codebook(cb: &Codebook, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(FILE_MAGIC)?;
    f.write_all(&(cb.dim as u32).to_le_bytes())?;
    f.write_all(&(cb.k as u32).to_le_bytes())?;
    for v in &cb.v {
        f.write_all(&v.to_le_bytes())?;
    }
    f.write_all(&cb.seed.to_le_bytes())?;
    f.write_all(&cb.iterations.to_le_bytes())?;
    Ok(())
}

pub fn load_codebook(path: &Path) -> Result<Codebook> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != FILE_MAGIC {
        return Err(Error::Data(format!("{}: bad codebook magic", path.display())));
    }
    let mut b4 = [0u8; 4];
    f.read_exact(&mut b4)?;
    let dim = u32::from_le_bytes(b4) as usize;
    f.read_exact(&mut b4)?;
    let k = u32::from_le_bytes(b4) as usize;
    let mut v = vec![0.0f64; dim * k];
    let mut b8 = [0u8; 8];
    for val in v.iter_mut() {
        f.read_exact(&mut b8)?;
        *val = f64::from_le_bytes(b8);
    }
    f.read_exact(&mut b8)?;
    let seed = u64::from_le_bytes(b8);
    f.read_exact(&mut b4)?;
    let iterations = u32::from_le_bytes(b4);
    Ok(Codebook {
        dim,
        k,
        v,
        seed,
        iterations,
        objective_trace: Vec::new(),
    })
}
