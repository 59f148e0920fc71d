//! Per-bit binary code inference.
//!
//! For bit `r`, every triplet's conditional loss is decomposed into pairwise terms and the
//! terms are accumulated into a sparse symmetric matrix `W` plus a constant, so that
//! `z^T W z + constant` equals the summed triplet loss for every assignment `z` of the bit.
//! The quadratic program is then minimized by block coordinate descent over greedily built
//! blocks whose internal couplings are all `<= 0`, each block being solved exactly by min-cut.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::loss::{decompose, AlphaCoeffs, ConditionalLoss, PrevContext};
use crate::mincut;

const NOT_IN_BLOCK: usize = usize::MAX;

/// Ordered triplets `(i, j, k)` over `n` points: `i` is more similar to `j` than to `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletSet {
    n: usize,
    triples: Vec<[usize; 3]>,
}

impl TripletSet {
    pub fn new(n: usize, triples: Vec<[usize; 3]>) -> Result<Self> {
        for (t, &[i, j, k]) in triples.iter().enumerate() {
            if i >= n || j >= n || k >= n {
                return Err(Error::validation(format!(
                    "triplet {t} ({i}, {j}, {k}) out of range for {n} points"
                )));
            }
            if i == j || i == k || j == k {
                return Err(Error::validation(format!(
                    "triplet {t} ({i}, {j}, {k}) repeats an index"
                )));
            }
        }
        Ok(TripletSet { n, triples })
    }

    pub fn empty(n: usize) -> Self {
        TripletSet {
            n,
            triples: Vec::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn triples(&self) -> &[[usize; 3]] {
        &self.triples
    }
}

fn check_signs(values: &[i8]) -> Result<()> {
    match values.iter().position(|&b| b != 1 && b != -1) {
        Some(p) => Err(Error::validation(format!(
            "entry {p} is {} (expected -1 or +1)",
            values[p]
        ))),
        None => Ok(()),
    }
}

/// One bit for every data point.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitVector(Vec<i8>);

impl BitVector {
    pub fn new(values: Vec<i8>) -> Result<Self> {
        check_signs(&values)?;
        Ok(BitVector(values))
    }

    pub fn random<R: Rng>(n: usize, rng: &mut R) -> Self {
        BitVector((0..n).map(|_| if rng.random_bool(0.5) { 1 } else { -1 }).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[i8] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<i8> {
        self.0
    }
}

/// `q x n` matrix over `{-1,+1}`; row `r` holds bit `r` of every point.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CodeMatrix {
    n: usize,
    rows: Vec<Vec<i8>>,
}

impl CodeMatrix {
    /// A matrix with zero bits.
    pub fn empty(n: usize) -> Self {
        CodeMatrix { n, rows: Vec::new() }
    }

    pub fn from_rows(n: usize, rows: Vec<Vec<i8>>) -> Result<Self> {
        for row in &rows {
            check_dim(n, row.len())?;
            check_signs(row)?;
        }
        Ok(CodeMatrix { n, rows })
    }

    pub fn q(&self) -> usize {
        self.rows.len()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, r: usize) -> &[i8] {
        &self.rows[r]
    }

    pub fn rows(&self) -> &[Vec<i8>] {
        &self.rows
    }

    pub fn push_row(&mut self, bits: BitVector) -> Result<()> {
        check_dim(self.n, bits.len())?;
        self.rows.push(bits.0);
        Ok(())
    }

    pub fn column(&self, i: usize) -> Vec<i8> {
        self.rows.iter().map(|row| row[i]).collect()
    }

    /// The first `q` bits of every code.
    pub fn prefix(&self, q: usize) -> CodeMatrix {
        CodeMatrix {
            n: self.n,
            rows: self.rows[..q.min(self.q())].to_vec(),
        }
    }

    /// Keeps only the listed columns, in order.
    pub fn select_columns(&self, idx: &[usize]) -> CodeMatrix {
        CodeMatrix {
            n: idx.len(),
            rows: self
                .rows
                .iter()
                .map(|row| idx.iter().map(|&i| row[i]).collect())
                .collect(),
        }
    }

    /// Ranking gap `d(z_i, z_k) - d(z_i, z_j)` over all rows, for every triplet.
    pub fn triplet_gaps(&self, triplets: &TripletSet) -> Vec<i64> {
        triplets
            .triples()
            .iter()
            .map(|&[i, j, k]| {
                self.rows
                    .iter()
                    .map(|row| i64::from(row[i] != row[k]) - i64::from(row[i] != row[j]))
                    .sum()
            })
            .collect()
    }
}

/// Conditioning contexts for bit `r` derived from the first `r - 1` rows of `codes`.
pub fn contexts_from_codes(triplets: &TripletSet, codes: &CodeMatrix, r: usize) -> Result<Vec<PrevContext>> {
    check_dim(triplets.n(), codes.n())?;
    if r == 0 || r > codes.q() + 1 {
        return Err(Error::validation(format!(
            "bit index {r} needs {} previous rows, have {}",
            r.saturating_sub(1),
            codes.q()
        )));
    }
    codes
        .prefix(r - 1)
        .triplet_gaps(triplets)
        .into_iter()
        .map(|g| PrevContext::from_gap(r, g))
        .collect()
}

/// Sparse symmetric `W` with zero diagonal, plus the accumulated constant term.
#[derive(Clone, Debug, PartialEq)]
pub struct PairwiseWeights {
    n: usize,
    rows: Vec<Vec<(usize, f64)>>,
    constant: f64,
}

impl PairwiseWeights {
    pub fn zeros(n: usize) -> Self {
        PairwiseWeights {
            n,
            rows: vec![Vec::new(); n],
            constant: 0.0,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn constant(&self) -> f64 {
        self.constant
    }

    /// Stored entries of row `i`, sorted by column.
    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let row = &self.rows[i];
        row.binary_search_by_key(&j, |&(c, _)| c)
            .map_or(0.0, |p| row[p].1)
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }
}

/// Accumulates the pairwise decomposition of every triplet's conditional loss.
///
/// Each pair coefficient is split evenly between `w_ab` and `w_ba`; the `alpha_ii` terms go
/// to the constant.
pub fn assemble_weights<L: ConditionalLoss>(
    triplets: &TripletSet,
    contexts: &[PrevContext],
    loss: &L,
) -> Result<PairwiseWeights> {
    check_dim(triplets.len(), contexts.len())?;
    let alphas: Vec<AlphaCoeffs> = contexts
        .par_iter()
        .map(|ctx| decompose(&loss.loss_table(ctx)))
        .collect();

    let mut pairs: HashMap<(usize, usize), f64> = HashMap::new();
    let mut constant = 0.0;
    for (&[i, j, k], a) in triplets.triples().iter().zip(&alphas) {
        constant += a.ii;
        for (x, y, c) in [(i, j, a.ij), (i, k, a.ik), (j, k, a.jk)] {
            *pairs.entry((x.min(y), x.max(y))).or_insert(0.0) += c / 2.0;
        }
    }
    let mut rows = vec![Vec::new(); triplets.n()];
    for ((a, b), w) in pairs {
        rows[a].push((b, w));
        rows[b].push((a, w));
    }
    for row in &mut rows {
        row.sort_unstable_by_key(|&(c, _)| c);
    }
    Ok(PairwiseWeights {
        n: triplets.n(),
        rows,
        constant,
    })
}

/// `z^T W z + constant`.
pub fn objective(z: &BitVector, w: &PairwiseWeights) -> Result<f64> {
    check_dim(w.n, z.len())?;
    let z = z.values();
    let quad: f64 = w
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let s: f64 = row.iter().map(|&(j, v)| v * f64::from(z[j])).sum();
            s * f64::from(z[i])
        })
        .sum();
    Ok(quad + w.constant)
}

/// A set of points whose pairwise weights are all `<= 0`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    members: Vec<usize>,
}

impl Block {
    pub fn new(members: Vec<usize>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::validation("block must be nonempty"));
        }
        Ok(Block { members })
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Greedy block construction.
///
/// Seeds each block with the lowest-index unassigned point, then scans the unassigned points
/// together with the seed's negatively weighted neighbours in ascending index order, admitting
/// a candidate when it has no positive weight to any current member.
pub fn construct_blocks(w: &PairwiseWeights) -> Vec<Block> {
    let n = w.n;
    let mut unassigned: Vec<usize> = (0..n).collect();
    let mut is_unassigned = vec![true; n];
    let mut block_of = vec![NOT_IN_BLOCK; n];
    let mut blocks = Vec::new();

    while let Some(&seed) = unassigned.first() {
        let id = blocks.len();
        let negative: Vec<usize> = w.rows[seed]
            .iter()
            .filter(|&&(_, v)| v < 0.0)
            .map(|&(j, _)| j)
            .collect();

        let mut members = Vec::new();
        let (mut a, mut b) = (0, 0);
        loop {
            // ascending merge of the unassigned list and the negative neighbours
            let cand = match (unassigned.get(a), negative.get(b)) {
                (Some(&x), Some(&y)) if x == y => {
                    a += 1;
                    b += 1;
                    x
                }
                (Some(&x), Some(&y)) if x < y => {
                    a += 1;
                    x
                }
                (_, Some(&y)) => {
                    b += 1;
                    y
                }
                (Some(&x), None) => {
                    a += 1;
                    x
                }
                (None, None) => break,
            };
            let conflict = w.rows[cand]
                .iter()
                .any(|&(k, v)| v > 0.0 && block_of[k] == id);
            if !conflict {
                block_of[cand] = id;
                members.push(cand);
                is_unassigned[cand] = false;
            }
        }
        unassigned.retain(|&i| is_unassigned[i]);
        // block_of only tracks the latest block a point joined; older ids are never queried again
        blocks.push(Block { members });
    }
    blocks
}

/// Block energy `sum_i u_i z_i + sum_(a,b,c) c z_a z_b` over local member indices.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockSubproblem {
    pub members: Vec<usize>,
    pub unaries: Vec<f64>,
    /// `(a, b, 2 w_ab)` with `a < b` local indices; covers both `w_ab` and `w_ba`.
    pub pairwise: Vec<(usize, usize, f64)>,
}

impl BlockSubproblem {
    pub fn energy(&self, z: &[i8]) -> f64 {
        mincut::energy(&self.unaries, &self.pairwise, z)
    }
}

/// Restriction of the objective to a block with the exterior fixed at `z`.
///
/// The block energy differs from `objective` by a constant that depends only on the exterior.
pub fn block_subproblem(block: &Block, w: &PairwiseWeights, z: &BitVector) -> Result<BlockSubproblem> {
    check_dim(w.n, z.len())?;
    if let Some(&m) = block.members.iter().find(|&&m| m >= w.n) {
        return Err(Error::validation(format!("block member {m} out of range")));
    }
    let mut local = vec![NOT_IN_BLOCK; w.n];
    Ok(subproblem_with(block, w, z.values(), &mut local))
}

fn subproblem_with(block: &Block, w: &PairwiseWeights, z: &[i8], local: &mut [usize]) -> BlockSubproblem {
    for (a, &m) in block.members.iter().enumerate() {
        local[m] = a;
    }
    let mut unaries = vec![0.0; block.len()];
    let mut pairwise = Vec::new();
    for (a, &i) in block.members.iter().enumerate() {
        for &(j, v) in &w.rows[i] {
            match local[j] {
                NOT_IN_BLOCK => unaries[a] += 2.0 * v * f64::from(z[j]),
                b if a < b && v != 0.0 => pairwise.push((a, b, 2.0 * v)),
                _ => {}
            }
        }
    }
    for &m in &block.members {
        local[m] = NOT_IN_BLOCK;
    }
    BlockSubproblem {
        members: block.members.clone(),
        unaries,
        pairwise,
    }
}

fn energy_tol(e: f64) -> f64 {
    1e-9 * (1.0 + e.abs())
}

/// Exact minimizer of a block energy. Returns `current` unchanged unless the min-cut
/// solution is strictly better.
pub fn solve_block(sub: &BlockSubproblem, current: &[i8]) -> Result<Vec<i8>> {
    check_dim(sub.members.len(), current.len())?;
    let (z, e) = mincut::minimize(&sub.unaries, &sub.pairwise)?;
    let e_cur = sub.energy(current);
    if e_cur <= e + energy_tol(e) {
        Ok(current.to_vec())
    } else {
        Ok(z)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SweepConfig {
    pub max_sweeps: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { max_sweeps: 10 }
    }
}

/// Outcome of inferring one bit.
#[derive(Clone, Debug)]
pub struct BitInference {
    pub bits: BitVector,
    pub weights: PairwiseWeights,
    pub blocks: Vec<Block>,
    /// Objective before descent, then after every block update.
    pub trace: Vec<f64>,
    pub sweeps: usize,
    pub converged: bool,
}

impl BitInference {
    pub fn initial_objective(&self) -> f64 {
        self.trace[0]
    }

    pub fn final_objective(&self) -> f64 {
        *self.trace.last().expect("trace starts with the initial objective")
    }
}

/// Minimizes one bit by block coordinate descent from `init`.
pub fn infer_bit<L: ConditionalLoss>(
    triplets: &TripletSet,
    contexts: &[PrevContext],
    loss: &L,
    init: BitVector,
    cfg: &SweepConfig,
) -> Result<BitInference> {
    check_dim(triplets.n(), init.len())?;
    let weights = assemble_weights(triplets, contexts, loss)?;
    let blocks = construct_blocks(&weights);
    let mut z = init.into_inner();
    let mut local = vec![NOT_IN_BLOCK; weights.n];
    let mut obj = objective(&BitVector(z.clone()), &weights)?;
    let mut trace = vec![obj];
    let mut sweeps = 0;
    let mut converged = triplets.is_empty();

    while !converged && sweeps < cfg.max_sweeps {
        sweeps += 1;
        let mut changed = false;
        for block in &blocks {
            let sub = subproblem_with(block, &weights, &z, &mut local);
            let current: Vec<i8> = block.members.iter().map(|&m| z[m]).collect();
            let next = solve_block(&sub, &current)?;
            if next != current {
                let delta = sub.energy(&next) - sub.energy(&current);
                if delta > energy_tol(obj) {
                    return Err(Error::contract(format!(
                        "block update raised the objective by {delta}"
                    )));
                }
                for (&m, &b) in block.members.iter().zip(&next) {
                    z[m] = b;
                }
                obj += delta;
                changed = true;
            }
            trace.push(obj);
        }
        // resync against accumulated rounding
        obj = objective(&BitVector(z.clone()), &weights)?;
        if let Some(last) = trace.last_mut() {
            *last = obj;
        }
        converged = !changed;
    }
    Ok(BitInference {
        bits: BitVector(z),
        weights,
        blocks,
        trace,
        sweeps,
        converged,
    })
}

/// Per-bit summary of a multi-bit inference run.
#[derive(Clone, Debug, PartialEq)]
pub struct BitSummary {
    pub bit: usize,
    pub blocks: usize,
    pub sweeps: usize,
    pub converged: bool,
    pub trace: Vec<f64>,
}

impl From<&BitInference> for BitSummary {
    fn from(b: &BitInference) -> Self {
        BitSummary {
            bit: 0,
            blocks: b.blocks.len(),
            sweeps: b.sweeps,
            converged: b.converged,
            trace: b.trace.clone(),
        }
    }
}

/// Appends `extra` inferred bits to `codes`, each conditioned on all rows before it.
/// Initial values of every new bit are drawn uniformly from `rng`.
pub fn extend_codes<L: ConditionalLoss, R: Rng>(
    triplets: &TripletSet,
    codes: &mut CodeMatrix,
    extra: usize,
    loss: &L,
    cfg: &SweepConfig,
    rng: &mut R,
) -> Result<Vec<BitSummary>> {
    check_dim(triplets.n(), codes.n())?;
    let mut gaps = codes.triplet_gaps(triplets);
    let mut out = Vec::with_capacity(extra);
    for _ in 0..extra {
        let r = codes.q() + 1;
        let contexts = gaps
            .iter()
            .map(|&g| PrevContext::from_gap(r, g))
            .collect::<Result<Vec<_>>>()?;
        let init = BitVector::random(codes.n(), rng);
        let inferred = infer_bit(triplets, &contexts, loss, init, cfg)?;
        let z = inferred.bits.values();
        for (g, &[i, j, k]) in gaps.iter_mut().zip(triplets.triples()) {
            *g += i64::from(z[i] != z[k]) - i64::from(z[i] != z[j]);
        }
        let mut summary = BitSummary::from(&inferred);
        summary.bit = r;
        out.push(summary);
        codes.push_row(inferred.bits)?;
    }
    Ok(out)
}

/// Infers `q`-bit codes for every point from scratch.
pub fn infer_codes<L: ConditionalLoss>(
    triplets: &TripletSet,
    q: usize,
    loss: &L,
    cfg: &SweepConfig,
    seed: u64,
) -> Result<(CodeMatrix, Vec<BitSummary>)> {
    if q == 0 {
        return Err(Error::validation("code length must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut codes = CodeMatrix::empty(triplets.n());
    let summary = extend_codes(triplets, &mut codes, q, loss, cfg, &mut rng)?;
    Ok((codes, summary))
}

/// Exhaustive check of one block conditioned on its exterior.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockCertificate {
    pub members: usize,
    pub current_energy: f64,
    pub best_energy: f64,
}

impl BlockCertificate {
    pub fn is_optimal(&self) -> bool {
        self.current_energy <= self.best_energy + energy_tol(self.best_energy)
    }
}

/// Brute-forces every block of at most `max_members` members; larger blocks are skipped.
pub fn certify_blocks(
    w: &PairwiseWeights,
    blocks: &[Block],
    z: &BitVector,
    max_members: usize,
) -> Result<Vec<BlockCertificate>> {
    let max_members = max_members.min(24);
    let mut out = Vec::new();
    for block in blocks.iter().filter(|b| b.len() <= max_members) {
        let sub = block_subproblem(block, w, z)?;
        let current: Vec<i8> = block.members.iter().map(|&m| z.values()[m]).collect();
        let m = block.len();
        let mut assign = vec![-1i8; m];
        let mut best = f64::INFINITY;
        for mask in 0u32..1 << m {
            for (a, v) in assign.iter_mut().enumerate() {
                *v = if mask >> a & 1 == 1 { 1 } else { -1 };
            }
            best = best.min(sub.energy(&assign));
        }
        out.push(BlockCertificate {
            members: m,
            current_energy: sub.energy(&current),
            best_energy: best,
        });
    }
    Ok(out)
}

/// Block certificates for every bit of `codes`, each bit conditioned on the rows before it.
/// Blocks are rebuilt from the weights, so the check does not trust the inference run.
pub fn certify_codes<L: ConditionalLoss>(
    triplets: &TripletSet,
    codes: &CodeMatrix,
    loss: &L,
    max_members: usize,
) -> Result<Vec<Vec<BlockCertificate>>> {
    (1..=codes.q())
        .map(|r| {
            let contexts = contexts_from_codes(triplets, codes, r)?;
            let w = assemble_weights(triplets, &contexts, loss)?;
            let blocks = construct_blocks(&w);
            certify_blocks(&w, &blocks, &BitVector(codes.row(r - 1).to_vec()), max_members)
        })
        .collect()
}
