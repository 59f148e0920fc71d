//! Synthetic datasets, triplet sampling and on-disk formats.
//!
//! Text artifacts start with `# key=value` provenance lines that readers skip:
//!
//! * datasets: JSON Lines, one `{"id", "features", "labels"}` object per point
//! * triplets: CSV with header `i,j,k`
//! * codes: a `q n` line followed by `q` rows of `n` space-separated `1` / `-1` values,
//!   or the bit-packed binary variant ([`write_codes_packed`])

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::bqp::{CodeMatrix, TripletSet};
use crate::error::{check_dim, Error, Result};
use crate::model::FeatureMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledPoint {
    pub id: u64,
    pub features: Vec<f64>,
    pub labels: Vec<u32>,
}

impl LabeledPoint {
    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() {
            return Err(Error::validation(format!("point {} has no labels", self.id)));
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(format!("point {} has non-finite features", self.id)));
        }
        Ok(())
    }
}

/// Semantic similarity between two label sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Similarity {
    /// 1 if the (first) class labels agree, else 0.
    Multiclass,
    /// Number of shared tags.
    Multilabel,
}

impl Similarity {
    pub fn score(&self, a: &[u32], b: &[u32]) -> u32 {
        match self {
            Similarity::Multiclass => u32::from(a.first() == b.first()),
            Similarity::Multilabel => a.iter().filter(|t| b.contains(t)).count() as u32,
        }
    }
}

/// Relevant for retrieval when at least one label is shared.
pub fn shares_label(a: &[u32], b: &[u32]) -> bool {
    a.iter().any(|t| b.contains(t))
}

pub fn feature_matrix(points: &[LabeledPoint]) -> Result<FeatureMatrix> {
    let rows: Vec<Vec<f64>> = points.iter().map(|p| p.features.clone()).collect();
    FeatureMatrix::from_rows(&rows)
}

pub fn labels_of(points: &[LabeledPoint]) -> Vec<Vec<u32>> {
    points.iter().map(|p| p.labels.clone()).collect()
}

/// Per-dimension affine map to zero mean and unit variance.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    /// Constant dimensions keep scale 1.
    pub fn fit(features: &FeatureMatrix) -> Self {
        let (n, d) = (features.n(), features.d());
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(features.row(i)) {
                *m += v;
            }
        }
        let nf = n.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= nf);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(features.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / nf).sqrt();
                if sd > 1e-12 {
                    1.0 / sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn from_parts(mean: Vec<f64>, scale: Vec<f64>) -> Result<Self> {
        check_dim(mean.len(), scale.len())?;
        if mean.iter().chain(&scale).any(|v| !v.is_finite()) {
            return Err(Error::validation("standardizer parameters must be finite"));
        }
        Ok(Standardizer { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) * s)
            .collect()
    }

    pub fn apply_in_place(&self, features: &mut FeatureMatrix) -> Result<()> {
        check_dim(self.dim(), features.d())?;
        let d = features.d();
        for row in features.data_mut().chunks_mut(d.max(1)) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) * s;
            }
        }
        Ok(())
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, d: usize, sd: f64) -> Vec<f64> {
    (0..d)
        .map(|_| sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Class means at pairwise distance `>= spread`, by rejection sampling in a growing ball.
fn separated_means(rng: &mut ChaCha8Rng, k: usize, d: usize, spread: f64) -> Vec<Vec<f64>> {
    let mut radius = spread.max(1e-9);
    loop {
        let mut means: Vec<Vec<f64>> = Vec::with_capacity(k);
        for _ in 0..200 * k {
            if means.len() == k {
                break;
            }
            let cand = normal_vec(rng, d, radius);
            if means.iter().all(|m| dist(m, &cand) >= spread) {
                means.push(cand);
            }
        }
        if means.len() == k {
            return means;
        }
        radius *= 1.5;
    }
}

/// `k` Gaussian clusters of `m` points each in `d` dimensions with unit noise.
/// Class means are at least `spread` apart. Points are ordered class by class.
pub fn gen_multiclass_blobs(k: usize, m: usize, d: usize, spread: f64, seed: u64) -> Result<Vec<LabeledPoint>> {
    if k == 0 || m == 0 || d == 0 {
        return Err(Error::validation("classes, points per class and dimension must be >= 1"));
    }
    if !spread.is_finite() || spread < 0.0 {
        return Err(Error::validation("spread must be finite and >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means = separated_means(&mut rng, k, d, spread);
    let mut points = Vec::with_capacity(k * m);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..m {
            let noise = normal_vec(&mut rng, d, 1.0);
            points.push(LabeledPoint {
                id: points.len() as u64,
                features: mean.iter().zip(noise).map(|(a, b)| a + b).collect(),
                labels: vec![class as u32],
            });
        }
    }
    Ok(points)
}

/// Tags per point, drawn uniformly from `min..=max`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TagCount {
    pub min: usize,
    pub max: usize,
}

impl TagCount {
    pub fn fixed(k: usize) -> Self {
        TagCount { min: k, max: k }
    }
}

/// `n` points over `tags` tags. Each tag has a Gaussian prototype of norm about `spread`;
/// a point's features are the mean of its tags' prototypes plus unit noise.
pub fn gen_multilabel(
    n: usize,
    tags: usize,
    per_point: TagCount,
    d: usize,
    spread: f64,
    seed: u64,
) -> Result<Vec<LabeledPoint>> {
    if tags < 2 {
        return Err(Error::validation("multilabel data needs at least 2 tags"));
    }
    if n == 0 || d == 0 {
        return Err(Error::validation("point count and dimension must be >= 1"));
    }
    if per_point.min == 0 || per_point.min > per_point.max || per_point.max > tags {
        return Err(Error::validation(format!(
            "tags per point {}..={} invalid for {tags} tags",
            per_point.min, per_point.max
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = spread / (d as f64).sqrt();
    let protos: Vec<Vec<f64>> = (0..tags).map(|_| normal_vec(&mut rng, d, sd)).collect();
    let mut points = Vec::with_capacity(n);
    for id in 0..n {
        let count = rng.random_range(per_point.min..=per_point.max);
        let mut labels: Vec<u32> = sample(&mut rng, tags, count).into_iter().map(|t| t as u32).collect();
        labels.sort_unstable();
        let noise = normal_vec(&mut rng, d, 1.0);
        let features = (0..d)
            .map(|c| labels.iter().map(|&t| protos[t as usize][c]).sum::<f64>() / count as f64 + noise[c])
            .collect();
        points.push(LabeledPoint {
            id: id as u64,
            features,
            labels,
        });
    }
    Ok(points)
}

/// Result of triplet sampling; `skipped` anchors had no pair with a strict similarity gap.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledTriplets {
    pub triplets: TripletSet,
    pub skipped: usize,
}

/// For every anchor, draws `per_anchor` pairs `(j, k)` uniformly (with replacement) among all
/// pairs with `s(i, j) > s(i, k)`.
pub fn sample_triplets(
    labels: &[Vec<u32>],
    oracle: Similarity,
    per_anchor: usize,
    seed: u64,
) -> Result<SampledTriplets> {
    let anchors: Vec<usize> = (0..labels.len()).collect();
    let candidates = anchors.clone();
    sample_triplets_between(labels, &anchors, &candidates, oracle, per_anchor, seed)
}

/// Like [`sample_triplets`] but restricted to the given anchors and candidate points.
pub fn sample_triplets_between(
    labels: &[Vec<u32>],
    anchors: &[usize],
    candidates: &[usize],
    oracle: Similarity,
    per_anchor: usize,
    seed: u64,
) -> Result<SampledTriplets> {
    let n = labels.len();
    if let Some(&bad) = anchors.iter().chain(candidates).find(|&&i| i >= n) {
        return Err(Error::validation(format!("index {bad} out of range for {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut triples = Vec::with_capacity(anchors.len() * per_anchor);
    let mut skipped = 0;
    for &i in anchors {
        // (similarity, point) sorted ascending; equal scores form contiguous runs
        let mut scored: Vec<(u32, usize)> = candidates
            .iter()
            .filter(|&&c| c != i)
            .map(|&c| (oracle.score(&labels[i], &labels[c]), c))
            .collect();
        scored.sort_unstable();
        // below[p] = number of candidates strictly less similar than scored[p]
        let mut below = Vec::with_capacity(scored.len());
        let mut run_start = 0;
        for p in 0..scored.len() {
            if p > 0 && scored[p].0 != scored[p - 1].0 {
                run_start = p;
            }
            below.push(run_start);
        }
        let total: usize = below.iter().sum();
        if total == 0 {
            skipped += 1;
            continue;
        }
        for _ in 0..per_anchor {
            // pick j with weight below[j], then k uniformly among the less similar
            let mut ticket = rng.random_range(0..total);
            let mut pj = 0;
            while ticket >= below[pj] {
                ticket -= below[pj];
                pj += 1;
            }
            let pk = rng.random_range(0..below[pj]);
            triples.push([i, scored[pj].1, scored[pk].1]);
        }
    }
    if skipped > 0 {
        log::warn!("{skipped} anchors had no valid (positive, negative) pair and were skipped");
    }
    Ok(SampledTriplets {
        triplets: TripletSet::new(n, triples)?,
        skipped,
    })
}

/// Seeded split of `0..n` into (train, test) index lists, each sorted ascending.
pub fn split_indices(n: usize, test_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::validation("test fraction must lie in [0, 1)"));
    }
    let n_test = (n as f64 * test_fraction).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let test: BTreeSet<usize> = sample(&mut rng, n, n_test).into_iter().collect();
    let train = (0..n).filter(|i| !test.contains(i)).collect();
    Ok((train, test.into_iter().collect()))
}

/// Ordered `key=value` pairs echoed at the top of every artifact.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Provenance(pub Vec<(String, String)>);

impl Provenance {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, key: impl Into<String>, value: impl ToString) -> Self {
        self.0.push((key.into(), value.to_string()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn write_comments<W: Write>(&self, w: &mut W) -> Result<()> {
        for (k, v) in &self.0 {
            writeln!(w, "# {k}={v}")?;
        }
        Ok(())
    }

    /// One `key=value` per line, no comment markers.
    pub fn to_text(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn push_comment(&mut self, line: &str) {
        let body = line.trim_start_matches('#').trim();
        if let Some((k, v)) = body.split_once('=') {
            self.0.push((k.to_string(), v.to_string()));
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

pub fn write_dataset<W: Write>(mut w: W, points: &[LabeledPoint], prov: &Provenance) -> Result<()> {
    prov.write_comments(&mut w)?;
    for p in points {
        serde_json::to_writer(&mut w, p).map_err(|e| Error::format("dataset", e.to_string()))?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(r: R) -> Result<(Vec<LabeledPoint>, Provenance)> {
    let mut prov = Provenance::new();
    let mut points = Vec::new();
    for (lineno, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if t.starts_with('#') {
            prov.push_comment(t);
            continue;
        }
        let p: LabeledPoint = serde_json::from_str(t)
            .map_err(|e| Error::format("dataset", format!("line {}: {e}", lineno + 1)))?;
        p.validate()?;
        if let Some(first) = points.first() {
            let first: &LabeledPoint = first;
            check_dim(first.features.len(), p.features.len())?;
        }
        points.push(p);
    }
    Ok((points, prov))
}

pub fn save_dataset(path: &Path, points: &[LabeledPoint], prov: &Provenance) -> Result<()> {
    write_dataset(create(path)?, points, prov)
}

pub fn load_dataset(path: &Path) -> Result<(Vec<LabeledPoint>, Provenance)> {
    read_dataset(File::open(path)?)
}

pub fn write_triplets<W: Write>(mut w: W, triplets: &TripletSet, prov: &Provenance) -> Result<()> {
    prov.write_comments(&mut w)?;
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(["i", "j", "k"]).map_err(|e| Error::format("triplets", e.to_string()))?;
    for t in triplets.triples() {
        csv.serialize(t).map_err(|e| Error::format("triplets", e.to_string()))?;
    }
    csv.flush()?;
    Ok(())
}

/// Reads a triplet file over `n` points.
pub fn read_triplets<R: Read>(r: R, n: usize) -> Result<(TripletSet, Provenance)> {
    let mut text = String::new();
    BufReader::new(r).read_to_string(&mut text)?;
    let mut prov = Provenance::new();
    for line in text.lines().take_while(|l| l.starts_with('#')) {
        prov.push_comment(line);
    }
    let mut csv = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = csv.headers().map_err(|e| Error::format("triplets", e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["i", "j", "k"] {
        return Err(Error::format("triplets", "header must be i,j,k"));
    }
    let mut triples = Vec::new();
    for rec in csv.deserialize::<[usize; 3]>() {
        triples.push(rec.map_err(|e| Error::format("triplets", e.to_string()))?);
    }
    Ok((TripletSet::new(n, triples)?, prov))
}

pub fn save_triplets(path: &Path, triplets: &TripletSet, prov: &Provenance) -> Result<()> {
    write_triplets(create(path)?, triplets, prov)
}

pub fn load_triplets(path: &Path, n: usize) -> Result<(TripletSet, Provenance)> {
    read_triplets(File::open(path)?, n)
}

pub fn write_codes<W: Write>(mut w: W, codes: &CodeMatrix, prov: &Provenance) -> Result<()> {
    prov.write_comments(&mut w)?;
    writeln!(w, "{} {}", codes.q(), codes.n())?;
    for row in codes.rows() {
        let line: Vec<&str> = row.iter().map(|&b| if b > 0 { "1" } else { "-1" }).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_codes<R: Read>(r: R) -> Result<(CodeMatrix, Provenance)> {
    let mut prov = Provenance::new();
    let mut lines = BufReader::new(r).lines();
    let header = loop {
        match lines.next() {
            Some(line) => {
                let line = line?;
                if line.starts_with('#') {
                    prov.push_comment(&line);
                } else if !line.trim().is_empty() {
                    break line;
                }
            }
            None => return Err(Error::format("codes", "missing `q n` header")),
        }
    };
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::format("codes", format!("header: {e}")))?;
    let [q, n] = dims[..] else {
        return Err(Error::format("codes", "header must be `q n`"));
    };
    let mut rows = Vec::with_capacity(q);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| match t {
                "1" | "+1" => Ok(1i8),
                "-1" => Ok(-1i8),
                other => Err(Error::format("codes", format!("bad entry `{other}`"))),
            })
            .collect::<Result<Vec<i8>>>()?;
        rows.push(row);
    }
    check_dim(q, rows.len())?;
    Ok((CodeMatrix::from_rows(n, rows)?, prov))
}

pub fn save_codes(path: &Path, codes: &CodeMatrix, prov: &Provenance) -> Result<()> {
    write_codes(create(path)?, codes, prov)
}

pub fn load_codes(path: &Path) -> Result<(CodeMatrix, Provenance)> {
    read_codes(File::open(path)?)
}

const PACKED_MAGIC: &[u8; 8] = b"TPHCODES";

/// Binary codes: magic, `u32` header length, provenance text, `u32 q`, `u32 n`, then each
/// row packed LSB-first into `ceil(n / 8)` bytes with bit set for +1. Integers little-endian.
pub fn write_codes_packed<W: Write>(mut w: W, codes: &CodeMatrix, prov: &Provenance) -> Result<()> {
    let text = prov.to_text();
    let as_u32 = |v: usize| {
        u32::try_from(v).map_err(|_| Error::validation(format!("{v} does not fit the packed format")))
    };
    w.write_all(PACKED_MAGIC)?;
    w.write_all(&as_u32(text.len())?.to_le_bytes())?;
    w.write_all(text.as_bytes())?;
    w.write_all(&as_u32(codes.q())?.to_le_bytes())?;
    w.write_all(&as_u32(codes.n())?.to_le_bytes())?;
    for row in codes.rows() {
        let mut bytes = vec![0u8; codes.n().div_ceil(8)];
        for (i, &b) in row.iter().enumerate() {
            if b > 0 {
                bytes[i / 8] |= 1 << (i % 8);
            }
        }
        w.write_all(&bytes)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_codes_packed<R: Read>(mut r: R) -> Result<(CodeMatrix, Provenance)> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != PACKED_MAGIC {
        return Err(Error::format("packed codes", "bad magic"));
    }
    let mut u = [0u8; 4];
    r.read_exact(&mut u)?;
    let mut text = vec![0u8; u32::from_le_bytes(u) as usize];
    r.read_exact(&mut text)?;
    let text = String::from_utf8(text).map_err(|e| Error::format("packed codes", e.to_string()))?;
    let mut prov = Provenance::new();
    for line in text.lines() {
        prov.push_comment(line);
    }
    r.read_exact(&mut u)?;
    let q = u32::from_le_bytes(u) as usize;
    r.read_exact(&mut u)?;
    let n = u32::from_le_bytes(u) as usize;
    let mut rows = Vec::with_capacity(q);
    let mut bytes = vec![0u8; n.div_ceil(8)];
    for _ in 0..q {
        r.read_exact(&mut bytes)?;
        rows.push(
            (0..n)
                .map(|i| if bytes[i / 8] >> (i % 8) & 1 == 1 { 1 } else { -1 })
                .collect(),
        );
    }
    Ok((CodeMatrix::from_rows(n, rows)?, prov))
}
