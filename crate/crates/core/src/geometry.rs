//! Point-cloud containers, exact k-nearest-neighbor graphs, relative
//! positional offsets, and per-sample batching.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One point cloud: positions, auxiliary input features, and target fields.
/// The unit of training and evaluation.
#[derive(Debug, Clone)]
pub struct PointSample {
    pub positions: Tensor<f32>,
    pub features: Tensor<f32>,
    pub targets: Tensor<f32>,
    pub name: String,
}

impl PointSample {
    pub fn new(
        positions: Tensor<f32>,
        features: Tensor<f32>,
        targets: Tensor<f32>,
        name: impl Into<String>,
    ) -> Result<Self> {
        let name = name.into();
        if positions.rank() != 2 || positions.cols() != 3 {
            return Err(Error::data(format!(
                "sample '{name}': positions must be [N x 3], got {:?}",
                positions.shape()
            )));
        }
        let n = positions.rows();
        if n == 0 {
            return Err(Error::data(format!("sample '{name}': empty point cloud")));
        }
        if features.rank() != 2 || features.rows() != n {
            return Err(Error::data(format!(
                "sample '{name}': features must share leading dimension {n}, got {:?}",
                features.shape()
            )));
        }
        if targets.rank() != 2 || targets.rows() != n || targets.cols() == 0 {
            return Err(Error::data(format!(
                "sample '{name}': targets must be [{n} x O], O >= 1, got {:?}",
                targets.shape()
            )));
        }
        if !positions.all_finite() {
            return Err(Error::data(format!("sample '{name}': non-finite positions")));
        }
        Ok(PointSample { positions, features, targets, name })
    }

    pub fn num_points(&self) -> usize {
        self.positions.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn target_dim(&self) -> usize {
        self.targets.cols()
    }
}

/// Per-sample k-NN index table plus relative offsets. Immutable after
/// construction. Row `i` lists `i` itself first, then the k-1 nearest other
/// points ordered by distance (ties broken by smaller index).
#[derive(Debug, Clone)]
pub struct NeighborGraph {
    indices: Vec<u32>,
    offsets: Vec<f32>,
    n: usize,
    k: usize,
}

impl NeighborGraph {
    pub fn num_points(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Flat `[N*k]` neighbor index table, row-major.
    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    /// Flat `[N*k*3]` offset table: neighbor position minus center position.
    pub fn offsets(&self) -> &[f32] {
        &self.offsets
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    /// Shift all indices by `base` (used when packing samples into a batch).
    fn shifted(&self, base: u32) -> NeighborGraph {
        NeighborGraph {
            indices: self.indices.iter().map(|&i| i + base).collect(),
            offsets: self.offsets.clone(),
            n: self.n,
            k: self.k,
        }
    }

    /// Undo a batch shift, yielding sample-local indices again.
    pub fn rebased(&self, base: u32) -> NeighborGraph {
        NeighborGraph {
            indices: self
                .indices
                .iter()
                .map(|&i| i.checked_sub(base).expect("index below batch offset"))
                .collect(),
            offsets: self.offsets.clone(),
            n: self.n,
            k: self.k,
        }
    }
}

fn dist2(p: &[f32], a: usize, b: usize) -> f64 {
    let (pa, pb) = (&p[a * 3..a * 3 + 3], &p[b * 3..b * 3 + 3]);
    let dx = (pa[0] - pb[0]) as f64;
    let dy = (pa[1] - pb[1]) as f64;
    let dz = (pa[2] - pb[2]) as f64;
    dx * dx + dy * dy + dz * dz
}

/// Exact k-NN by brute force. Row `i` holds `i` followed by the k-1 nearest
/// other points by Euclidean distance; equal distances resolve to the
/// smaller point index. Deterministic for any input.
pub fn knn_graph(positions: &Tensor<f32>, k: usize) -> Result<NeighborGraph> {
    if positions.rank() != 2 || positions.cols() != 3 {
        return Err(Error::argument(format!(
            "knn_graph: positions must be [N x 3], got {:?}",
            positions.shape()
        )));
    }
    if !positions.all_finite() {
        return Err(Error::argument("knn_graph: non-finite positions"));
    }
    let n = positions.rows();
    if k == 0 || k > n {
        return Err(Error::argument(format!(
            "knn_graph: k={k} out of range for {n} points"
        )));
    }
    let p = positions.data();

    let rows: Vec<Vec<u32>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut row = Vec::with_capacity(k);
            row.push(i as u32);
            if k > 1 {
                let mut cand: Vec<(f64, u32)> = (0..n)
                    .filter(|&j| j != i)
                    .map(|j| (dist2(p, i, j), j as u32))
                    .collect();
                let take = k - 1;
                // Partial selection, then order the selected prefix.
                cand.select_nth_unstable_by(take - 1, |a, b| {
                    a.partial_cmp(b).expect("finite distances")
                });
                cand.truncate(take);
                cand.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite distances"));
                row.extend(cand.into_iter().map(|(_, j)| j));
            }
            row
        })
        .collect();

    let mut indices = Vec::with_capacity(n * k);
    for row in rows {
        indices.extend_from_slice(&row);
    }
    let offsets = offsets_for(positions, &indices, k);
    Ok(NeighborGraph { indices, offsets, n, k })
}

fn offsets_for(positions: &Tensor<f32>, indices: &[u32], k: usize) -> Vec<f32> {
    let p = positions.data();
    let n = positions.rows();
    let mut offsets = Vec::with_capacity(n * k * 3);
    for i in 0..n {
        let pi = &p[i * 3..i * 3 + 3];
        for j in 0..k {
            let nb = indices[i * k + j] as usize;
            let pn = &p[nb * 3..nb * 3 + 3];
            offsets.push(pn[0] - pi[0]);
            offsets.push(pn[1] - pi[1]);
            offsets.push(pn[2] - pi[2]);
        }
    }
    offsets
}

/// Recompute `positions[neighbor] - positions[center]` for an existing graph.
pub fn relative_offsets(positions: &Tensor<f32>, graph: &NeighborGraph) -> Result<Tensor<f32>> {
    if positions.rows() != graph.num_points() {
        return Err(Error::argument(format!(
            "relative_offsets: graph built for {} points, positions have {}",
            graph.num_points(),
            positions.rows()
        )));
    }
    if graph.indices.iter().any(|&i| (i as usize) >= positions.rows()) {
        return Err(Error::argument("relative_offsets: index out of range"));
    }
    let data = offsets_for(positions, &graph.indices, graph.k);
    Tensor::new(vec![graph.num_points(), graph.k, 3], data)
}

/// Per-channel mean/std for features and targets, fitted over a dataset.
/// Channels with zero variance clamp std to 1 so they z-score to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats {
    pub feature_mean: Vec<f32>,
    pub feature_std: Vec<f32>,
    pub target_mean: Vec<f32>,
    pub target_std: Vec<f32>,
}

fn fit_channels(rows: usize, cols: usize, data: &[f32]) -> (Vec<f32>, Vec<f32>) {
    let mut mean = vec![0.0f64; cols];
    for r in 0..rows {
        for c in 0..cols {
            mean[c] += data[r * cols + c] as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= rows as f64;
    }
    let mut var = vec![0.0f64; cols];
    for r in 0..rows {
        for c in 0..cols {
            let d = data[r * cols + c] as f64 - mean[c];
            var[c] += d * d;
        }
    }
    let std: Vec<f32> = var
        .iter()
        .map(|&v| {
            let s = (v / rows as f64).sqrt();
            if s > 1e-12 {
                s as f32
            } else {
                1.0
            }
        })
        .collect();
    (mean.iter().map(|&m| m as f32).collect(), std)
}

impl ChannelStats {
    /// Identity stats (mean 0, std 1) for the given channel counts.
    pub fn identity(feature_dim: usize, target_dim: usize) -> Self {
        ChannelStats {
            feature_mean: vec![0.0; feature_dim],
            feature_std: vec![1.0; feature_dim],
            target_mean: vec![0.0; target_dim],
            target_std: vec![1.0; target_dim],
        }
    }

    /// Fit over the concatenation of all samples' points.
    pub fn fit(samples: &[PointSample]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| Error::data("ChannelStats::fit: empty dataset"))?;
        let (f, o) = (first.feature_dim(), first.target_dim());
        let mut feat = Vec::new();
        let mut targ = Vec::new();
        let mut rows = 0;
        for s in samples {
            if s.feature_dim() != f || s.target_dim() != o {
                return Err(Error::data(format!(
                    "ChannelStats::fit: sample '{}' has channel counts ({}, {}), expected ({f}, {o})",
                    s.name,
                    s.feature_dim(),
                    s.target_dim()
                )));
            }
            feat.extend_from_slice(s.features.data());
            targ.extend_from_slice(s.targets.data());
            rows += s.num_points();
        }
        let (feature_mean, feature_std) = if f > 0 {
            fit_channels(rows, f, &feat)
        } else {
            (Vec::new(), Vec::new())
        };
        let (target_mean, target_std) = fit_channels(rows, o, &targ);
        let stats = ChannelStats { feature_mean, feature_std, target_mean, target_std };
        if !stats.all_finite() {
            return Err(Error::data("ChannelStats::fit: non-finite statistics"));
        }
        Ok(stats)
    }

    pub fn all_finite(&self) -> bool {
        self.feature_mean.iter().chain(&self.feature_std).chain(&self.target_mean).chain(&self.target_std).all(|v| v.is_finite())
    }
}

fn zscore(rows: usize, cols: usize, data: &[f32], mean: &[f32], std: &[f32]) -> Vec<f32> {
    let mut out = Vec::with_capacity(data.len());
    for r in 0..rows {
        for c in 0..cols {
            out.push((data[r * cols + c] - mean[c]) / std[c]);
        }
    }
    out
}

fn un_zscore(rows: usize, cols: usize, data: &[f32], mean: &[f32], std: &[f32]) -> Vec<f32> {
    let mut out = Vec::with_capacity(data.len());
    for r in 0..rows {
        for c in 0..cols {
            out.push(data[r * cols + c] * std[c] + mean[c]);
        }
    }
    out
}

/// Z-score features and targets with `stats`; center positions on the
/// bounding-box centroid and scale by the largest half-extent, per sample.
pub fn normalize_sample(sample: &PointSample, stats: &ChannelStats) -> Result<PointSample> {
    if !stats.all_finite() {
        return Err(Error::data("normalize_sample: non-finite stats"));
    }
    if stats.feature_mean.len() != sample.feature_dim()
        || stats.target_mean.len() != sample.target_dim()
    {
        return Err(Error::data(format!(
            "normalize_sample: stats cover ({}, {}) channels, sample '{}' has ({}, {})",
            stats.feature_mean.len(),
            stats.target_mean.len(),
            sample.name,
            sample.feature_dim(),
            sample.target_dim()
        )));
    }
    let n = sample.num_points();
    let positions = Tensor::matrix(n, 3, normalize_positions(sample.positions.data(), n)).unwrap();
    let features = Tensor::matrix(
        n,
        sample.feature_dim(),
        zscore(n, sample.feature_dim(), sample.features.data(), &stats.feature_mean, &stats.feature_std),
    )
    .unwrap();
    let targets = Tensor::matrix(
        n,
        sample.target_dim(),
        zscore(n, sample.target_dim(), sample.targets.data(), &stats.target_mean, &stats.target_std),
    )
    .unwrap();
    PointSample::new(positions, features, targets, sample.name.clone())
}

/// Invert target z-scoring.
pub fn denormalize_targets(targets: &Tensor<f32>, stats: &ChannelStats) -> Tensor<f32> {
    let (n, o) = (targets.rows(), targets.cols());
    Tensor::matrix(n, o, un_zscore(n, o, targets.data(), &stats.target_mean, &stats.target_std)).unwrap()
}

/// Bounding-box normalization used for model inputs: centered on the bbox
/// centroid, scaled by the largest half-extent.
pub fn normalize_positions(pos: &[f32], n: usize) -> Vec<f32> {
    let mut lo = [f32::INFINITY; 3];
    let mut hi = [f32::NEG_INFINITY; 3];
    for i in 0..n {
        for d in 0..3 {
            lo[d] = lo[d].min(pos[i * 3 + d]);
            hi[d] = hi[d].max(pos[i * 3 + d]);
        }
    }
    let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0, (lo[2] + hi[2]) / 2.0];
    let mut half = 0.0f32;
    for d in 0..3 {
        half = half.max((hi[d] - lo[d]) / 2.0);
    }
    if half <= 0.0 {
        half = 1.0;
    }
    let mut out = Vec::with_capacity(n * 3);
    for i in 0..n {
        for d in 0..3 {
            out.push((pos[i * 3 + d] - center[d]) / half);
        }
    }
    out
}

/// A list of samples packed back to back, with per-sample start offsets and
/// per-sample neighbor graphs whose indices point into the concatenated
/// arrays. No normalization or graph ever crosses a sample boundary.
#[derive(Debug)]
pub struct Batch {
    pub samples: Vec<PointSample>,
    pub starts: Vec<usize>,
    pub graphs: Vec<NeighborGraph>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn total_points(&self) -> usize {
        self.samples.iter().map(|s| s.num_points()).sum()
    }
}

/// Pack samples into a batch, building one k-NN graph per sample. Graph
/// indices are shifted by each sample's start offset so they address the
/// concatenated point array.
pub fn batch_pack(samples: &[PointSample], k: usize) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::data("batch_pack: empty batch"))?;
    let (f, o) = (first.feature_dim(), first.target_dim());
    let mut starts = Vec::with_capacity(samples.len());
    let mut graphs = Vec::with_capacity(samples.len());
    let mut base = 0usize;
    for s in samples {
        if s.feature_dim() != f || s.target_dim() != o {
            return Err(Error::data(format!(
                "batch_pack: sample '{}' channel counts ({}, {}) differ from ({f}, {o})",
                s.name,
                s.feature_dim(),
                s.target_dim()
            )));
        }
        starts.push(base);
        let g = knn_graph(&s.positions, k)?;
        graphs.push(g.shifted(base as u32));
        base += s.num_points();
    }
    Ok(Batch { samples: samples.to_vec(), starts, graphs })
}
