//! Triplet ranking losses over binary codes and their exact pairwise decomposition.
//!
//! A per-bit triplet loss `l(b_i, b_j, b_k)` over `{-1,+1}^3` that is invariant under a
//! global sign flip is fully described by its values on the four patterns with `b_i = +1`.
//! Any such function can be written as
//!
//! ```text
//! l(b_i, b_j, b_k) = a_ii + a_ij b_i b_j + a_ik b_i b_k + a_jk b_j b_k
//! ```
//!
//! and the four coefficients are recovered by solving `H a = l` with the Hadamard-like sign
//! matrix [`SIGN_MATRIX`]. Since `H H = 4 I` the solve is `a = H l / 4`.

use crate::error::{check_dim, Error, Result};

/// A binary code over `{-1,+1}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitCode(Vec<i8>);

impl BitCode {
    pub fn new(bits: Vec<i8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::validation("bit code must have at least one bit"));
        }
        if let Some(pos) = bits.iter().position(|&b| b != 1 && b != -1) {
            return Err(Error::validation(format!(
                "bit {pos} is {} (expected -1 or +1)",
                bits[pos]
            )));
        }
        Ok(BitCode(bits))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[i8] {
        &self.0
    }
}

/// Number of positions at which two sign vectors differ, `(q - <a,b>) / 2`.
pub(crate) fn hamming_signs(a: &[i8], b: &[i8]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

pub fn hamming_distance(a: &BitCode, b: &BitCode) -> Result<usize> {
    check_dim(a.len(), b.len())?;
    Ok(hamming_signs(a.bits(), b.bits()))
}

/// Default margin for `q`-bit codes.
pub fn default_margin(q: usize) -> f64 {
    q as f64 / 2.0
}

/// `max(0, margin - (d(z_i, z_k) - d(z_i, z_j)))`: zero once the positive `z_j` is
/// closer to the anchor than the negative `z_k` by at least `margin`.
pub fn hinge_ranking_loss(z_i: &BitCode, z_j: &BitCode, z_k: &BitCode, margin: f64) -> Result<f64> {
    check_dim(z_i.len(), z_j.len())?;
    check_dim(z_i.len(), z_k.len())?;
    if !margin.is_finite() || margin < 0.0 {
        return Err(Error::validation(format!(
            "margin must be finite and >= 0, got {margin}"
        )));
    }
    let gap = hamming_signs(z_i.bits(), z_k.bits()) as f64 - hamming_signs(z_i.bits(), z_j.bits()) as f64;
    Ok((margin - gap).max(0.0))
}

/// What a per-bit loss at bit `r` may depend on: the bit index and the ranking gap
/// `d(z_i, z_k) - d(z_i, z_j)` accumulated over the first `r - 1` bits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PrevContext {
    bit_index: usize,
    prev_gap: i64,
}

impl PrevContext {
    /// Context for the first bit.
    pub fn first() -> Self {
        PrevContext {
            bit_index: 1,
            prev_gap: 0,
        }
    }

    /// Builds the context for bit `r = prev_i.len() + 1` from the previous bits of a triplet.
    pub fn new(prev_i: &[i8], prev_j: &[i8], prev_k: &[i8]) -> Result<Self> {
        check_dim(prev_i.len(), prev_j.len())?;
        check_dim(prev_i.len(), prev_k.len())?;
        for code in [prev_i, prev_j, prev_k] {
            if code.iter().any(|&b| b != 1 && b != -1) {
                return Err(Error::validation("context bits must be -1 or +1"));
            }
        }
        Ok(PrevContext {
            bit_index: prev_i.len() + 1,
            prev_gap: hamming_signs(prev_i, prev_k) as i64 - hamming_signs(prev_i, prev_j) as i64,
        })
    }

    /// Builds a context directly from a bit index `r >= 1` and the previous gap.
    pub fn from_gap(bit_index: usize, prev_gap: i64) -> Result<Self> {
        if bit_index == 0 {
            return Err(Error::validation("bit index starts at 1"));
        }
        if prev_gap.unsigned_abs() as usize > bit_index - 1 {
            return Err(Error::validation(format!(
                "gap {prev_gap} impossible with {} previous bits",
                bit_index - 1
            )));
        }
        Ok(PrevContext { bit_index, prev_gap })
    }

    pub fn bit_index(&self) -> usize {
        self.bit_index
    }

    pub fn prev_gap(&self) -> i64 {
        self.prev_gap
    }
}

/// Gap contributed by a single bit: `d(b_i, b_k) - d(b_i, b_j)` in `{-1, 0, 1}`.
fn bit_gap([b_i, b_j, b_k]: [i8; 3]) -> i64 {
    i64::from(b_i != b_k) - i64::from(b_i != b_j)
}

/// Hinge loss on bit `r` with margin `r / 2`, conditioned on the previous bits.
pub fn conditional_bit_loss(bits: [i8; 3], ctx: &PrevContext) -> f64 {
    debug_assert!(bits.iter().all(|&b| b == 1 || b == -1));
    let margin = default_margin(ctx.bit_index);
    (margin - ctx.prev_gap as f64 - bit_gap(bits) as f64).max(0.0)
}

/// The four canonical sign patterns, in table order.
pub const CANONICAL_PATTERNS: [[i8; 3]; 4] = [[1, 1, 1], [1, 1, -1], [1, -1, 1], [1, -1, -1]];

/// Rows are the pairwise products `(b_i b_i, b_i b_j, b_i b_k, b_j b_k)` of each canonical pattern.
pub const SIGN_MATRIX: [[f64; 4]; 4] = [
    [1.0, 1.0, 1.0, 1.0],
    [1.0, 1.0, -1.0, -1.0],
    [1.0, -1.0, 1.0, -1.0],
    [1.0, -1.0, -1.0, 1.0],
];

/// Values of a sign-flip-symmetric triplet loss on [`CANONICAL_PATTERNS`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTable([f64; 4]);

impl LossTable {
    pub fn new(values: [f64; 4]) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::validation(format!("loss table entry {v} is not finite")));
        }
        Ok(LossTable(values))
    }

    pub fn values(&self) -> [f64; 4] {
        self.0
    }

    /// Loss at any of the 8 sign patterns, using `l(b) = l(-b)`.
    pub fn value(&self, bits: [i8; 3]) -> f64 {
        let [_, b_j, b_k] = if bits[0] < 0 {
            [-bits[0], -bits[1], -bits[2]]
        } else {
            bits
        };
        let idx = usize::from(b_j < 0) * 2 + usize::from(b_k < 0);
        self.0[idx]
    }
}

pub fn build_loss_table(ctx: &PrevContext) -> LossTable {
    LossTable(CANONICAL_PATTERNS.map(|p| conditional_bit_loss(p, ctx)))
}

/// Pairwise decomposition coefficients of a per-bit triplet loss.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct AlphaCoeffs {
    pub ii: f64,
    pub ij: f64,
    pub ik: f64,
    pub jk: f64,
}

impl AlphaCoeffs {
    pub fn as_array(&self) -> [f64; 4] {
        [self.ii, self.ij, self.ik, self.jk]
    }
}

pub fn decompose(table: &LossTable) -> AlphaCoeffs {
    let mut a = [0.0; 4];
    for (row, out) in a.iter_mut().enumerate() {
        *out = 0.25
            * SIGN_MATRIX[row]
                .iter()
                .zip(table.0.iter())
                .map(|(h, l)| h * l)
                .sum::<f64>();
    }
    AlphaCoeffs {
        ii: a[0],
        ij: a[1],
        ik: a[2],
        jk: a[3],
    }
}

pub fn reconstruct(alpha: &AlphaCoeffs, [b_i, b_j, b_k]: [i8; 3]) -> f64 {
    let (b_i, b_j, b_k) = (f64::from(b_i), f64::from(b_j), f64::from(b_k));
    alpha.ii + alpha.ij * b_i * b_j + alpha.ik * b_i * b_k + alpha.jk * b_j * b_k
}

/// The loss table a set of coefficients reproduces.
pub fn table_of(alpha: &AlphaCoeffs) -> LossTable {
    LossTable(CANONICAL_PATTERNS.map(|p| reconstruct(alpha, p)))
}

/// A per-bit triplet loss usable by the code inference engine.
pub trait ConditionalLoss: Sync {
    fn loss_table(&self, ctx: &PrevContext) -> LossTable;
}

/// The hinge ranking loss with margin `r / 2` at bit `r`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Hinge;

impl ConditionalLoss for Hinge {
    fn loss_table(&self, ctx: &PrevContext) -> LossTable {
        build_loss_table(ctx)
    }
}

/// All 8 sign patterns in lexicographic order over `(+1, -1)`.
pub fn all_patterns() -> impl Iterator<Item = [i8; 3]> {
    (0..8u8).map(|m| {
        let s = |bit: u8| if m & bit == 0 { 1 } else { -1 };
        [s(4), s(2), s(1)]
    })
}
