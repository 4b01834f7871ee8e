use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, SeedTree};
use crate::tokenizer::kmeans::{balanced_kmeans, squared_distance};
use crate::tokenizer::ItemEmbedding;

/// Hierarchical code of one item: one centroid index per level.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SemanticId(pub Vec<u32>);

impl SemanticId {
    pub fn codes(&self) -> &[u32] {
        &self.0
    }

    pub fn levels(&self) -> usize {
        self.0.len()
    }
}

impl fmt::Display for SemanticId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("-")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for SemanticId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.split('-')
            .map(|c| c.parse::<u32>().map_err(|e| Error::parse("semantic id", format!("{s:?}: {e}"))))
            .collect::<Result<Vec<_>>>()
            .map(SemanticId)
    }
}

/// One quantization level: `K` centroids stored row-major as `K × d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub level: usize,
    pub dim: usize,
    pub centroids: Vec<f64>,
}

impl Codebook {
    pub fn size(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, k: usize) -> &[f64] {
        &self.centroids[k * self.dim..(k + 1) * self.dim]
    }

    /// Nearest centroid; ties go to the lowest index.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.size() {
            let d = squared_distance(x, self.centroid(k));
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CodebookStack {
    pub k: usize,
    pub dim: usize,
    pub seed: u64,
    pub levels: Vec<Codebook>,
}

/// Training statistics of one level of a residual fit.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelStats {
    pub level: usize,
    /// Mean ‖r‖² of the points this level was fit on.
    pub mean_sq_residual_in: f64,
    /// Mean ‖r − c_assigned‖² after subtracting this level's assigned centroid.
    pub mean_sq_residual_out: f64,
    pub iterations: usize,
    pub converged: bool,
    pub min_cluster: usize,
    pub max_cluster: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub k: usize,
    pub levels: usize,
    pub max_iters: usize,
    pub seed: u64,
}

fn mean_sq_norm(rows: &[Vec<f64>]) -> f64 {
    rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>()).sum::<f64>() / rows.len() as f64
}

/// Fits `levels` balanced K-means codebooks, each on the residuals left by the
/// previous level's assigned centroids.
pub fn fit_residual_stack(catalog: &[ItemEmbedding], opts: FitOptions) -> Result<(CodebookStack, Vec<LevelStats>)> {
    if catalog.is_empty() {
        return Err(Error::Argument("cannot fit a codebook on an empty catalog".into()));
    }
    if opts.levels == 0 {
        return Err(Error::Argument("codebook needs at least one level".into()));
    }
    let dim = catalog[0].vector.len();
    if catalog.iter().any(|e| e.vector.len() != dim) {
        return Err(Error::Dimension("catalog embeddings have differing dimensions".into()));
    }
    let seeds = SeedTree::new(opts.seed);
    let mut residuals: Vec<Vec<f64>> = catalog.iter().map(|e| e.vector.clone()).collect();
    let mut levels = Vec::with_capacity(opts.levels);
    let mut stats = Vec::with_capacity(opts.levels);
    for level in 0..opts.levels {
        let mut rng = rng_from_seed(seeds.seed_for(&format!("level-{level}")));
        let fit = balanced_kmeans(&residuals, opts.k, opts.max_iters, &mut rng)?;
        let before = mean_sq_norm(&residuals);
        for (r, &a) in residuals.iter_mut().zip(&fit.assignment) {
            for (v, c) in r.iter_mut().zip(&fit.centroids[a]) {
                *v -= c;
            }
        }
        let sizes = fit.cluster_sizes();
        stats.push(LevelStats {
            level,
            mean_sq_residual_in: before,
            mean_sq_residual_out: mean_sq_norm(&residuals),
            iterations: fit.iterations,
            converged: fit.converged,
            min_cluster: *sizes.iter().min().expect("k >= 1"),
            max_cluster: *sizes.iter().max().expect("k >= 1"),
        });
        levels.push(Codebook { level, dim, centroids: fit.centroids.concat() });
    }
    Ok((CodebookStack { k: opts.k, dim, seed: opts.seed, levels }, stats))
}

impl CodebookStack {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    /// Greedy residual quantization: per level the nearest centroid to the
    /// current residual, lowest index on ties.
    pub fn quantize(&self, e: &[f64]) -> Result<SemanticId> {
        if e.len() != self.dim {
            return Err(Error::Dimension(format!("embedding has {} dims, codebook {}", e.len(), self.dim)));
        }
        let mut r = e.to_vec();
        let mut codes = Vec::with_capacity(self.levels.len());
        for cb in &self.levels {
            let k = cb.nearest(&r);
            for (v, c) in r.iter_mut().zip(cb.centroid(k)) {
                *v -= c;
            }
            codes.push(k as u32);
        }
        Ok(SemanticId(codes))
    }

    /// Sum of the selected centroids.
    pub fn reconstruct(&self, id: &SemanticId) -> Result<Vec<f64>> {
        if id.levels() != self.levels.len() {
            return Err(Error::Contract(format!(
                "semantic id has {} levels, codebook {}",
                id.levels(),
                self.levels.len()
            )));
        }
        let mut out = vec![0.0; self.dim];
        for (cb, &c) in self.levels.iter().zip(id.codes()) {
            if c as usize >= self.k {
                return Err(Error::Index(format!("code {c} outside codebook of size {}", self.k)));
            }
            for (o, v) in out.iter_mut().zip(cb.centroid(c as usize)) {
                *o += v;
            }
        }
        Ok(out)
    }

    /// Residual remaining after all levels.
    pub fn final_residual(&self, e: &[f64], id: &SemanticId) -> Result<Vec<f64>> {
        let mut r = e.to_vec();
        for (cb, &c) in self.levels.iter().zip(id.codes()) {
            for (v, x) in r.iter_mut().zip(cb.centroid(c as usize)) {
                *v -= x;
            }
        }
        Ok(r)
    }

    const MAGIC: &'static [u8; 8] = b"ONRCCB01";
    const VERSION: u32 = 1;

    /// Header (magic, version, K, L, d, seed) followed by `L·K·d` f64 values
    /// and a CRC-32 of everything before it, all little endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(Self::MAGIC);
        out.extend_from_slice(&Self::VERSION.to_le_bytes());
        out.extend_from_slice(&(self.k as u32).to_le_bytes());
        out.extend_from_slice(&(self.levels.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&self.seed.to_le_bytes());
        for cb in &self.levels {
            for v in &cb.centroids {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::Integrity { path: path.to_path_buf(), message: m.to_string() };
        const HEADER: usize = 8 + 4 * 4 + 8;
        if bytes.len() < HEADER + 4 || &bytes[..8] != Self::MAGIC {
            return Err(bad("not a codebook file"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
            return Err(bad("checksum mismatch"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(body[o..o + 4].try_into().expect("4 bytes")) as usize;
        if u32_at(8) as u32 != Self::VERSION {
            return Err(bad("unsupported version"));
        }
        let (k, l, d) = (u32_at(12), u32_at(16), u32_at(20));
        let seed = u64::from_le_bytes(body[24..32].try_into().expect("8 bytes"));
        if body.len() != HEADER + l * k * d * 8 || k == 0 || d == 0 {
            return Err(bad("size does not match header"));
        }
        let values: Vec<f64> =
            body[HEADER..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let levels = values
            .chunks(k * d)
            .enumerate()
            .map(|(level, c)| Codebook { level, dim: d, centroids: c.to_vec() })
            .collect();
        Ok(CodebookStack { k, dim: d, seed, levels })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
