//! Token clustering over embedding space.
//!
//! Tokens whose embeddings are close are likely to be confused with each other
//! when a generated stream is decoded and re-encoded. Grouping them with
//! k-means (Lloyd iterations, k-means++ seeding, Euclidean metric) lets the
//! detector score at cluster granularity instead of token granularity.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::token::TokenId;

const EMBEDDING_MAGIC: &[u8; 4] = b"AQEM";

/// Row-major `N x d` matrix of token embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::invalid("embedding matrix must have at least one row and column"));
        }
        if data.len() != n * d {
            return Err(Error::invalid(format!(
                "embedding data has {} values, expected {n} x {d}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite embedding value at token {} dim {}",
                i / d,
                i % d
            )));
        }
        Ok(EmbeddingMatrix { n, d, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if let Some(i) = rows.iter().position(|r| r.len() != d) {
            return Err(Error::invalid(format!("row {i} has {} columns, expected {d}", rows[i].len())));
        }
        EmbeddingMatrix::new(n, d, rows.into_iter().flatten().collect())
    }

    pub fn n_tokens(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d)
    }

    /// Reads either the `AQEM` binary layout or CSV (one row per token), chosen by content.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref())?;
        if bytes.starts_with(EMBEDDING_MAGIC) {
            Self::from_binary(&bytes)
        } else {
            Self::from_csv(&bytes[..])
        }
    }

    /// `AQEM` header (magic, u32 N, u32 d, u32 reserved; little-endian) then `N*d` f32 LE.
    pub fn from_binary(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != EMBEDDING_MAGIC {
            return Err(Error::parse("header", "missing AQEM magic or truncated 16-byte header"));
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() != n * d * 4 {
            return Err(Error::parse(
                "body",
                format!("expected {} bytes of f32 data for {n} x {d}, found {}", n * d * 4, body.len()),
            ));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        EmbeddingMatrix::new(n, d, data)
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&(self.n as u32).to_le_bytes());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rows = Vec::new();
        for (lineno, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split(',')
                .enumerate()
                .map(|(col, s)| {
                    s.trim().parse::<f64>().map_err(|e| {
                        Error::parse(format!("line {} column {}", lineno + 1, col + 1), e.to_string())
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Self::from_rows(rows)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        for row in self.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Token to cluster assignment with centroids.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterMap {
    h: usize,
    assignment: Vec<u32>,
    centroids: Vec<Vec<f64>>,
    members: Vec<Vec<TokenId>>,
    seed: u64,
}

impl ClusterMap {
    /// Validates and indexes an assignment. Every cluster must be non-empty.
    pub fn new(h: usize, assignment: Vec<u32>, centroids: Vec<Vec<f64>>, seed: u64) -> Result<Self> {
        if h == 0 {
            return Err(Error::invalid("cluster count h must be at least 1"));
        }
        if assignment.len() < h {
            return Err(Error::invalid(format!(
                "{} tokens cannot fill {h} clusters",
                assignment.len()
            )));
        }
        if centroids.len() != h {
            return Err(Error::invalid(format!("expected {h} centroids, got {}", centroids.len())));
        }
        let d = centroids[0].len();
        if centroids.iter().any(|c| c.len() != d || c.iter().any(|v| !v.is_finite())) {
            return Err(Error::invalid("centroids must share one dimension and be finite"));
        }
        let mut members = vec![Vec::new(); h];
        for (tok, &c) in assignment.iter().enumerate() {
            if c as usize >= h {
                return Err(Error::invalid(format!("token {tok} assigned to cluster {c} >= h = {h}")));
            }
            members[c as usize].push(TokenId(tok as u32));
        }
        if let Some(empty) = members.iter().position(Vec::is_empty) {
            return Err(Error::invalid(format!("cluster {empty} has no members")));
        }
        Ok(ClusterMap {
            h,
            assignment,
            centroids,
            members,
            seed,
        })
    }

    /// Clusters given by labels alone; centroids are the label-wise means of `emb`.
    pub fn from_labels(labels: Vec<u32>, emb: &EmbeddingMatrix) -> Result<Self> {
        if labels.len() != emb.n_tokens() {
            return Err(Error::invalid("label count differs from embedding rows"));
        }
        let h = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
        let mut centroids = vec![vec![0.0; emb.dim()]; h];
        let mut counts = vec![0usize; h];
        for (i, &c) in labels.iter().enumerate() {
            counts[c as usize] += 1;
            for (acc, v) in centroids[c as usize].iter_mut().zip(emb.row(i)) {
                *acc += v;
            }
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            if *n > 0 {
                c.iter_mut().for_each(|v| *v /= *n as f64);
            }
        }
        ClusterMap::new(h, labels, centroids, 0)
    }

    #[inline]
    pub fn h(&self) -> usize {
        self.h
    }

    #[inline]
    pub fn n_tokens(&self) -> usize {
        self.assignment.len()
    }

    #[inline]
    pub fn cluster_of(&self, token: TokenId) -> usize {
        self.assignment[token.index()] as usize
    }

    pub fn assignment(&self) -> &[u32] {
        &self.assignment
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    pub fn members(&self, cluster: usize) -> &[TokenId] {
        &self.members[cluster]
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    /// Nearest centroid by Euclidean distance; ties go to the lowest index.
    pub fn assign(&self, row: &[f64]) -> Result<usize> {
        let d = self.centroids[0].len();
        if row.len() != d {
            return Err(Error::invalid(format!("vector has dimension {}, centroids have {d}", row.len())));
        }
        Ok(nearest(row, &self.centroids).0)
    }

    /// Renumbers clusters so consecutive indices are far apart in embedding space.
    ///
    /// Greedy walk: start at cluster 0, then repeatedly visit the unvisited
    /// centroid farthest from the current one. The partition is unchanged.
    pub fn relabel_separated(&self) -> ClusterMap {
        let mut order = vec![0usize];
        let mut visited = vec![false; self.h];
        visited[0] = true;
        while order.len() < self.h {
            let cur = &self.centroids[*order.last().unwrap()];
            let next = (0..self.h)
                .filter(|&c| !visited[c])
                .fold(None::<(usize, f64)>, |best, c| {
                    let d = sq_dist(cur, &self.centroids[c]);
                    match best {
                        Some((_, bd)) if bd >= d => best,
                        _ => Some((c, d)),
                    }
                })
                .unwrap()
                .0;
            visited[next] = true;
            order.push(next);
        }
        let mut new_index = vec![0u32; self.h];
        for (new, &old) in order.iter().enumerate() {
            new_index[old] = new as u32;
        }
        let assignment = self.assignment.iter().map(|&c| new_index[c as usize]).collect();
        let centroids = order.iter().map(|&old| self.centroids[old].clone()).collect();
        ClusterMap::new(self.h, assignment, centroids, self.seed).expect("relabeling preserves validity")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ClusterMapFile {
            h: self.h,
            n_tokens: self.assignment.len(),
            assignment: self.assignment.clone(),
            centroids: self.centroids.clone(),
            metric: METRIC_EUCLIDEAN.to_string(),
            seed: self.seed,
        })
        .expect("cluster map serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let file: ClusterMapFile = serde_json::from_str(s).map_err(|e| {
            Error::parse(format!("line {} column {}", e.line(), e.column()), e.to_string())
        })?;
        if file.metric != METRIC_EUCLIDEAN {
            return Err(Error::parse("field `metric`", format!("unsupported metric {:?}", file.metric)));
        }
        if file.n_tokens != file.assignment.len() {
            return Err(Error::parse(
                "field `assignment`",
                format!("{} entries but n_tokens = {}", file.assignment.len(), file.n_tokens),
            ));
        }
        if let Some(tok) = file.assignment.iter().position(|&c| c as usize >= file.h) {
            return Err(Error::parse(
                format!("field `assignment` index {tok}"),
                format!("cluster {} is not below h = {}", file.assignment[tok], file.h),
            ));
        }
        if file.centroids.len() != file.h {
            return Err(Error::parse(
                "field `centroids`",
                format!("{} centroids but h = {}", file.centroids.len(), file.h),
            ));
        }
        ClusterMap::new(file.h, file.assignment, file.centroids, file.seed)
            .map_err(|e| Error::parse("cluster map", e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

const METRIC_EUCLIDEAN: &str = "euclidean";

/// On-disk layout of a [`ClusterMap`].
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterMapFile {
    h: usize,
    n_tokens: usize,
    assignment: Vec<u32>,
    centroids: Vec<Vec<f64>>,
    metric: String,
    seed: u64,
}

fn nearest(row: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(row, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's k-means with greedy k-means++ seeding.
#[derive(Debug, Clone)]
pub struct KMeans {
    pub h: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    /// Independent seedings; the fit with the lowest final inertia wins.
    pub n_init: usize,
}

/// Default number of k-means++ restarts.
pub const DEFAULT_N_INIT: usize = 10;

/// Fitted clustering plus convergence diagnostics.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub map: ClusterMap,
    /// Within-cluster sum of squares after each assignment step, ending with the
    /// final assignment.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeansFit {
    pub fn inertia(&self) -> f64 {
        self.inertia_history.last().copied().unwrap_or(0.0)
    }
}

impl KMeans {
    pub fn new(h: usize, seed: u64) -> Self {
        KMeans {
            h,
            seed,
            max_iters: 300,
            tol: 1e-8,
            n_init: DEFAULT_N_INIT,
        }
    }

    pub fn fit(&self, emb: &EmbeddingMatrix) -> Result<KMeansFit> {
        let (n, h) = (emb.n_tokens(), self.h);
        if h == 0 || n < h {
            return Err(Error::invalid(format!("need N >= h >= 1, got N = {n}, h = {h}")));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters must be at least 1"));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(Error::invalid("tol must be positive"));
        }

        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut best: Option<KMeansFit> = None;
        for _ in 0..self.n_init.max(1) {
            let fit = self.lloyd(emb, kmeans_plus_plus(emb, h, &mut rng))?;
            if best.as_ref().is_none_or(|b| fit.inertia() < b.inertia()) {
                best = Some(fit);
            }
        }
        Ok(best.expect("n_init >= 1"))
    }

    fn lloyd(&self, emb: &EmbeddingMatrix, mut centroids: Vec<Vec<f64>>) -> Result<KMeansFit> {
        let (n, h) = (emb.n_tokens(), self.h);
        let mut labels = vec![0u32; n];
        let mut dists = vec![0.0f64; n];
        let mut inertia_history = Vec::new();
        let mut converged = false;
        let mut iterations = 0;

        while iterations < self.max_iters {
            iterations += 1;
            assign_all(emb, &centroids, &mut labels, &mut dists);
            repair_empty(emb, &mut centroids, &mut labels, &mut dists);
            inertia_history.push(dists.iter().sum());

            let updated = means(emb, &labels, h);
            let shift = centroids
                .iter()
                .zip(&updated)
                .map(|(a, b)| sq_dist(a, b).sqrt())
                .fold(0.0, f64::max);
            centroids = updated;
            if shift < self.tol {
                converged = true;
                break;
            }
        }

        assign_all(emb, &centroids, &mut labels, &mut dists);
        repair_empty(emb, &mut centroids, &mut labels, &mut dists);
        inertia_history.push(dists.iter().sum());
        let map = ClusterMap::new(h, labels, centroids, self.seed)?;
        Ok(KMeansFit {
            map,
            inertia_history,
            iterations,
            converged,
        })
    }
}

/// Fits `h` clusters and returns only the map.
pub fn kmeans_fit(emb: &EmbeddingMatrix, h: usize, seed: u64, max_iters: usize, tol: f64) -> Result<ClusterMap> {
    KMeans {
        h,
        seed,
        max_iters,
        tol,
        n_init: DEFAULT_N_INIT,
    }
    .fit(emb)
    .map(|f| f.map)
}

/// Greedy k-means++: each pick draws `2 + ln h` D²-weighted candidates and keeps
/// the one that most lowers the potential.
fn kmeans_plus_plus(emb: &EmbeddingMatrix, h: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = emb.n_tokens();
    let trials = 2 + (h as f64).ln().floor() as usize;
    let mut centroids = Vec::with_capacity(h);
    centroids.push(emb.row(rng.gen_range(0..n)).to_vec());
    let mut d2: Vec<f64> = emb.rows().map(|r| sq_dist(r, &centroids[0])).collect();
    while centroids.len() < h {
        let total: f64 = d2.iter().sum();
        if total.is_nan() || total <= 0.0 {
            // Fewer distinct points than clusters; duplicates get repaired later.
            centroids.push(emb.row(rng.gen_range(0..n)).to_vec());
            continue;
        }
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let pick = weighted_pick(&d2, total, rng);
            let c = emb.row(pick);
            let updated: Vec<f64> = emb.rows().zip(&d2).map(|(r, &d)| d.min(sq_dist(r, c))).collect();
            let potential: f64 = updated.iter().sum();
            if best.as_ref().is_none_or(|b| potential < b.0) {
                best = Some((potential, pick, updated));
            }
        }
        let (_, pick, updated) = best.expect("at least one trial");
        d2 = updated;
        centroids.push(emb.row(pick).to_vec());
    }
    centroids
}

fn weighted_pick(weights: &[f64], total: f64, rng: &mut ChaCha8Rng) -> usize {
    let target = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if acc > target {
            return i;
        }
    }
    weights.len() - 1
}

fn assign_all(emb: &EmbeddingMatrix, centroids: &[Vec<f64>], labels: &mut [u32], dists: &mut [f64]) {
    for (i, row) in emb.rows().enumerate() {
        let (c, d) = nearest(row, centroids);
        labels[i] = c as u32;
        dists[i] = d;
    }
}

/// Moves each empty centroid onto the point farthest from its own centroid.
fn repair_empty(emb: &EmbeddingMatrix, centroids: &mut [Vec<f64>], labels: &mut [u32], dists: &mut [f64]) {
    let h = centroids.len();
    loop {
        let mut counts = vec![0usize; h];
        for &l in labels.iter() {
            counts[l as usize] += 1;
        }
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        // Only points from clusters that can spare one are eligible.
        let far = (0..labels.len())
            .filter(|&i| counts[labels[i] as usize] > 1)
            .fold(None::<usize>, |best, i| match best {
                Some(b) if dists[b] >= dists[i] => Some(b),
                _ => Some(i),
            })
            .expect("N >= h guarantees a donor cluster");
        centroids[empty] = emb.row(far).to_vec();
        labels[far] = empty as u32;
        dists[far] = 0.0;
    }
}

fn means(emb: &EmbeddingMatrix, labels: &[u32], h: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; emb.dim()]; h];
    let mut counts = vec![0usize; h];
    for (row, &l) in emb.rows().zip(labels) {
        counts[l as usize] += 1;
        for (s, v) in sums[l as usize].iter_mut().zip(row) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        let c = c.max(1) as f64;
        s.iter_mut().for_each(|v| *v /= c);
    }
    sums
}

/// Position-wise token and cluster disagreement between two streams.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MismatchReport {
    pub token_rate: f64,
    pub cluster_rate: f64,
    /// `(token_rate - cluster_rate) / token_rate`, zero when `token_rate` is zero.
    pub reduction: f64,
    pub positions: usize,
    /// Set when the inputs had different lengths and were compared on the shorter prefix.
    pub truncated: bool,
}

impl MismatchReport {
    pub fn reduction_pct(&self) -> f64 {
        100.0 * self.reduction
    }
}

pub fn mismatch_rates(original: &[TokenId], retokenized: &[TokenId], map: &ClusterMap) -> Result<MismatchReport> {
    let positions = original.len().min(retokenized.len());
    if positions == 0 {
        return Err(Error::invalid("mismatch rates need non-empty sequences"));
    }
    let (mut tok, mut clu) = (0usize, 0usize);
    for (&a, &b) in original.iter().zip(retokenized) {
        if a != b {
            tok += 1;
            if map.cluster_of(a) != map.cluster_of(b) {
                clu += 1;
            }
        }
    }
    let token_rate = tok as f64 / positions as f64;
    let cluster_rate = clu as f64 / positions as f64;
    Ok(MismatchReport {
        token_rate,
        cluster_rate,
        reduction: if tok > 0 { (token_rate - cluster_rate) / token_rate } else { 0.0 },
        positions,
        truncated: original.len() != retokenized.len(),
    })
}
