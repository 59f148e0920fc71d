//! Hamming ranking and retrieval metrics.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bqp::{CodeMatrix, TripletSet};
use crate::data::shares_label;
use crate::error::{check_dim, Error, Result};

/// Whether gallery item `gallery` is relevant to `probe`.
pub trait Relevance: Sync {
    fn relevant(&self, probe: usize, gallery: usize) -> bool;
}

impl<F: Fn(usize, usize) -> bool + Sync> Relevance for F {
    fn relevant(&self, probe: usize, gallery: usize) -> bool {
        self(probe, gallery)
    }
}

/// Relevant when the probe and gallery label sets share at least one label.
pub struct LabelRelevance<'a> {
    pub probes: &'a [Vec<u32>],
    pub gallery: &'a [Vec<u32>],
}

impl Relevance for LabelRelevance<'_> {
    fn relevant(&self, probe: usize, gallery: usize) -> bool {
        shares_label(&self.probes[probe], &self.gallery[gallery])
    }
}

/// Codes packed into `u64` words, one code per item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PackedCodes {
    bits: usize,
    words: usize,
    data: Vec<u64>,
}

impl PackedCodes {
    pub fn from_codes(codes: &[Vec<i8>]) -> Result<Self> {
        let bits = codes.first().map_or(0, Vec::len);
        let words = bits.div_ceil(64);
        let mut data = vec![0u64; words * codes.len()];
        for (i, c) in codes.iter().enumerate() {
            check_dim(bits, c.len())?;
            for (b, &v) in c.iter().enumerate() {
                if v > 0 {
                    data[i * words + b / 64] |= 1 << (b % 64);
                }
            }
        }
        Ok(PackedCodes { bits, words, data })
    }

    /// Columns of a q x n code matrix become n packed codes.
    pub fn from_matrix(codes: &CodeMatrix) -> Self {
        let cols: Vec<Vec<i8>> = (0..codes.n()).map(|i| codes.column(i)).collect();
        Self::from_codes(&cols).expect("columns share length")
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.words).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    fn word_slice(&self, i: usize) -> &[u64] {
        &self.data[i * self.words..(i + 1) * self.words]
    }

    pub fn distance(&self, i: usize, other: &PackedCodes, j: usize) -> u32 {
        self.word_slice(i)
            .iter()
            .zip(other.word_slice(j))
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }
}

/// Gallery indices in ascending (Hamming distance, index) order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankedList {
    pub order: Vec<usize>,
    pub distances: Vec<u32>,
}

pub fn rank_gallery(probe: &[i8], gallery: &[Vec<i8>]) -> Result<RankedList> {
    let mut keyed = Vec::with_capacity(gallery.len());
    for (id, g) in gallery.iter().enumerate() {
        check_dim(probe.len(), g.len())?;
        let d = probe.iter().zip(g).filter(|(a, b)| a != b).count() as u32;
        keyed.push((d, id));
    }
    Ok(from_keyed(keyed))
}

fn from_keyed(mut keyed: Vec<(u32, usize)>) -> RankedList {
    keyed.sort_unstable();
    RankedList {
        order: keyed.iter().map(|k| k.1).collect(),
        distances: keyed.iter().map(|k| k.0).collect(),
    }
}

pub fn rank_packed(probes: &PackedCodes, p: usize, gallery: &PackedCodes) -> Result<RankedList> {
    check_dim(probes.bits(), gallery.bits())?;
    Ok(from_keyed((0..gallery.len()).map(|g| (probes.distance(p, gallery, g), g)).collect()))
}

/// Mean over relevant ranks of precision at that rank, looking only at the first `depth`
/// items when given. `None` when nothing in the inspected prefix is relevant.
pub fn average_precision<R: Relevance + ?Sized>(
    ranked: &RankedList,
    rel: &R,
    probe: usize,
    depth: Option<usize>,
) -> Option<f64> {
    let cut = depth.map_or(ranked.order.len(), |d| d.min(ranked.order.len()));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &g) in ranked.order[..cut].iter().enumerate() {
        if rel.relevant(probe, g) {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| sum / hits as f64)
}

pub fn precision_at_k<R: Relevance + ?Sized>(ranked: &RankedList, rel: &R, probe: usize, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::validation("K must be >= 1"));
    }
    let k = k.min(ranked.order.len());
    if k == 0 {
        return Ok(0.0);
    }
    let hits = ranked.order[..k].iter().filter(|&&g| rel.relevant(probe, g)).count();
    Ok(hits as f64 / k as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    pub map: f64,
    pub precision_at_k: f64,
    pub k: usize,
    pub probes: usize,
    /// Probes without any relevant gallery item, excluded from MAP.
    pub skipped: usize,
}

/// MAP and mean precision@K over all probes. Per-probe work runs in parallel; the reduction
/// is sequential in probe order.
pub fn evaluate_retrieval<R: Relevance>(
    probes: &PackedCodes,
    gallery: &PackedCodes,
    rel: &R,
    k: usize,
    depth: Option<usize>,
) -> Result<RetrievalScores> {
    evaluate(probes, gallery, rel, k, depth, false)
}

/// Every item queries all the others; probe `p` is gallery item `p` and is left out of its
/// own ranking.
pub fn evaluate_self_retrieval<R: Relevance>(
    codes: &PackedCodes,
    rel: &R,
    k: usize,
    depth: Option<usize>,
) -> Result<RetrievalScores> {
    evaluate(codes, codes, rel, k, depth, true)
}

fn evaluate<R: Relevance>(
    probes: &PackedCodes,
    gallery: &PackedCodes,
    rel: &R,
    k: usize,
    depth: Option<usize>,
    leave_one_out: bool,
) -> Result<RetrievalScores> {
    check_dim(probes.bits(), gallery.bits())?;
    if k == 0 {
        return Err(Error::validation("K must be >= 1"));
    }
    let per_probe: Vec<(Option<f64>, f64)> = (0..probes.len())
        .into_par_iter()
        .map(|p| {
            let mut ranked = rank_packed(probes, p, gallery)?;
            if leave_one_out {
                let at = ranked.order.iter().position(|&g| g == p).expect("probe is in the gallery");
                ranked.order.remove(at);
                ranked.distances.remove(at);
            }
            Ok((average_precision(&ranked, rel, p, depth), precision_at_k(&ranked, rel, p, k)?))
        })
        .collect::<Result<_>>()?;
    let aps: Vec<f64> = per_probe.iter().filter_map(|x| x.0).collect();
    let skipped = per_probe.len() - aps.len();
    if skipped > 0 {
        log::warn!("{skipped} probes have no relevant gallery item and are excluded from MAP");
    }
    Ok(RetrievalScores {
        map: mean(&aps),
        precision_at_k: mean(&per_probe.iter().map(|x| x.1).collect::<Vec<_>>()),
        k,
        probes: per_probe.len(),
        skipped,
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Fraction of triplets with `d(z_i, z_j) < d(z_i, z_k)`; ties count as incorrect.
pub fn similarity_precision(codes: &CodeMatrix, triplets: &TripletSet) -> Result<f64> {
    check_dim(codes.n(), triplets.n())?;
    if triplets.is_empty() {
        return Ok(0.0);
    }
    let packed = PackedCodes::from_matrix(codes);
    let correct: usize = triplets
        .triples()
        .par_iter()
        .filter(|&&[i, j, k]| packed.distance(i, &packed, j) < packed.distance(i, &packed, k))
        .count();
    Ok(correct as f64 / triplets.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub bits: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub provenance: Vec<(String, String)>,
    pub bits: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrieval: Option<RetrievalScores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub similarity_precision: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub curve: Vec<CurvePoint>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::format("metrics report", e.to_string()))
    }
}

pub fn write_curve<W: Write>(mut w: W, curve: &[CurvePoint]) -> Result<()> {
    writeln!(w, "bits,metric,value")?;
    for p in curve {
        writeln!(w, "{},{},{}", p.bits, p.metric, p.value)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn list(order: &[usize]) -> RankedList {
        RankedList {
            order: order.to_vec(),
            distances: vec![0; order.len()],
        }
    }

    fn pattern(p: &'static [u8]) -> impl Fn(usize, usize) -> bool + Sync {
        move |_, g| p[g] == 1
    }

    #[test]
    fn exact_match_ranks_first() {
        let g = vec![vec![1, 1, -1], vec![1, -1, 1], vec![-1, -1, -1]];
        let r = rank_gallery(&[1, -1, 1], &g).unwrap();
        assert_eq!(r.order[0], 1);
        assert_eq!(r.distances[0], 0);
    }

    #[test]
    fn ties_break_by_id() {
        let g = vec![vec![1, 1], vec![-1, -1], vec![-1, -1]];
        let r = rank_gallery(&[1, 1], &g).unwrap();
        assert_eq!(r.order, vec![0, 1, 2]);
    }

    #[test]
    fn distance_order() {
        // distances (2, 0, 1)
        let g = vec![vec![-1, -1], vec![1, 1], vec![1, -1]];
        let r = rank_gallery(&[1, 1], &g).unwrap();
        assert_eq!(r.order, vec![1, 2, 0]);
        assert_eq!(r.distances, vec![0, 1, 2]);
        assert!(rank_gallery(&[1], &g).is_err());
    }

    #[test]
    fn average_precision_examples() {
        let ap = |p: &'static [u8]| average_precision(&list(&(0..p.len()).collect::<Vec<_>>()), &pattern(p), 0, None);
        assert_eq!(ap(&[1, 1, 0, 0]), Some(1.0));
        assert!((ap(&[1, 0, 1]).unwrap() - 5.0 / 6.0).abs() < 1e-15);
        assert!((ap(&[0, 0, 0, 1]).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(ap(&[0, 0, 0]), None);
    }

    #[test]
    fn depth_cap() {
        let r = list(&[0, 1, 2, 3]);
        let ap = average_precision(&r, &pattern(&[1, 0, 0, 1]), 0, Some(2)).unwrap();
        assert_eq!(ap, 1.0);
        assert_eq!(average_precision(&r, &pattern(&[0, 0, 1, 1]), 0, Some(2)), None);
    }

    #[test]
    fn precision_at_k_examples() {
        let r = list(&[0, 1, 2, 3]);
        assert_eq!(precision_at_k(&r, &pattern(&[1, 0, 0, 0]), 0, 1).unwrap(), 1.0);
        assert_eq!(precision_at_k(&r, &pattern(&[1, 0, 1, 0]), 0, 4).unwrap(), 0.5);
        assert_eq!(precision_at_k(&r, &pattern(&[1, 0, 1, 0]), 0, 100).unwrap(), 0.5);
        assert!(precision_at_k(&r, &pattern(&[1, 0, 1, 0]), 0, 0).is_err());
    }

    #[test]
    fn similarity_precision_examples() {
        // classes {0,1} and {2,3} encoded exactly
        let perfect = CodeMatrix::from_rows(4, vec![vec![1, 1, -1, -1]]).unwrap();
        let t = TripletSet::new(4, vec![[0, 1, 2], [1, 0, 3], [2, 3, 0], [3, 2, 1]]).unwrap();
        assert_eq!(similarity_precision(&perfect, &t).unwrap(), 1.0);
        let same = CodeMatrix::from_rows(4, vec![vec![1, 1, 1, 1]]).unwrap();
        assert_eq!(similarity_precision(&same, &t).unwrap(), 0.0);
    }

    #[test]
    fn packed_distance_matches_naive() {
        let codes: Vec<Vec<i8>> = (0..5)
            .map(|i| (0..130).map(|b| if (b * 7 + i * 13) % 5 < 2 { 1 } else { -1 }).collect())
            .collect();
        let p = PackedCodes::from_codes(&codes).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let naive = codes[i].iter().zip(&codes[j]).filter(|(a, b)| a != b).count() as u32;
                assert_eq!(p.distance(i, &p, j), naive);
            }
        }
    }

    #[test]
    fn skipped_probes_are_counted() {
        let gallery = PackedCodes::from_codes(&[vec![1, 1], vec![-1, -1]]).unwrap();
        let probes = PackedCodes::from_codes(&[vec![1, 1], vec![-1, 1]]).unwrap();
        let rel = |p: usize, g: usize| p == 0 && g == 0;
        let s = evaluate_retrieval(&probes, &gallery, &rel, 1, None).unwrap();
        assert_eq!(s.skipped, 1);
        assert_eq!(s.map, 1.0);
        assert_eq!(s.precision_at_k, 0.5);
    }

    #[test]
    fn self_retrieval_skips_the_probe() {
        // 0 and 1 share a class and a code; 2 is alone
        let codes = PackedCodes::from_codes(&[vec![1, 1], vec![1, 1], vec![-1, -1]]).unwrap();
        let labels = vec![vec![0], vec![0], vec![1]];
        let rel = LabelRelevance { probes: &labels, gallery: &labels };
        let s = evaluate_self_retrieval(&codes, &rel, 1, None).unwrap();
        assert_eq!(s.skipped, 1);
        assert_eq!(s.map, 1.0);
        assert!((s.precision_at_k - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn curve_csv_header() {
        let mut buf = Vec::new();
        let c = vec![CurvePoint { bits: 8, metric: "map".into(), value: 0.5 }];
        write_curve(&mut buf, &c).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "bits,metric,value\n8,map,0.5\n");
    }

    fn arb_codes(n: usize) -> impl Strategy<Value = Vec<Vec<i8>>> {
        proptest::collection::vec(
            proptest::collection::vec(prop_oneof![Just(1i8), Just(-1i8)], 6),
            n,
        )
    }

    proptest! {
        #[test]
        fn ranking_is_a_sorted_permutation(probe in arb_codes(1), gallery in arb_codes(12)) {
            let r = rank_gallery(&probe[0], &gallery).unwrap();
            let mut ids = r.order.clone();
            ids.sort_unstable();
            prop_assert_eq!(ids, (0..12).collect::<Vec<_>>());
            for w in r.order.windows(2).zip(r.distances.windows(2)) {
                prop_assert!(w.1[0] < w.1[1] || (w.1[0] == w.1[1] && w.0[0] < w.0[1]));
            }
        }

        #[test]
        fn metrics_in_unit_interval(probe in arb_codes(1), gallery in arb_codes(10), rel in proptest::collection::vec(any::<bool>(), 10)) {
            let r = rank_gallery(&probe[0], &gallery).unwrap();
            let f = |_: usize, g: usize| rel[g];
            if let Some(ap) = average_precision(&r, &f, 0, None) {
                prop_assert!((0.0..=1.0).contains(&ap));
            }
            let full = precision_at_k(&r, &f, 0, 10).unwrap();
            let frac = rel.iter().filter(|&&b| b).count() as f64 / 10.0;
            prop_assert!((full - frac).abs() < 1e-12);
        }

        #[test]
        fn map_invariant_to_gallery_permutation(
            labels in proptest::collection::vec(0u32..3, 9),
            perm in Just((0..9).collect::<Vec<usize>>()).prop_shuffle(),
        ) {
            // gallery item g sits at distance g from the probe, so ids never break ties
            let gallery: Vec<Vec<i8>> = (0..9).map(|g| (0..8).map(|b| if b < g { -1 } else { 1 }).collect()).collect();
            let probes = PackedCodes::from_codes(&[vec![1; 8]]).unwrap();
            let pl = vec![vec![0u32]];
            let gl: Vec<Vec<u32>> = labels.iter().map(|&l| vec![l]).collect();
            let g2: Vec<Vec<i8>> = perm.iter().map(|&p| gallery[p].clone()).collect();
            let gl2: Vec<Vec<u32>> = perm.iter().map(|&p| gl[p].clone()).collect();
            let a = evaluate_retrieval(&probes, &PackedCodes::from_codes(&gallery).unwrap(),
                &LabelRelevance { probes: &pl, gallery: &gl }, 3, None).unwrap();
            let b = evaluate_retrieval(&probes, &PackedCodes::from_codes(&g2).unwrap(),
                &LabelRelevance { probes: &pl, gallery: &gl2 }, 3, None).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn similarity_precision_sign_invariant(codes in arb_codes(8), seed in any::<u64>()) {
            let rows: Vec<Vec<i8>> = (0..6).map(|b| codes.iter().map(|c| c[b]).collect()).collect();
            let m = CodeMatrix::from_rows(8, rows.clone()).unwrap();
            let flipped = CodeMatrix::from_rows(8, rows.iter().map(|r| r.iter().map(|v| -v).collect()).collect()).unwrap();
            let t: Vec<[usize; 3]> = (0..20u64)
                .map(|x| {
                    let h = seed.wrapping_add(x).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                    let i = (h % 8) as usize;
                    let j = (i + 1 + (h >> 8) as usize % 7) % 8;
                    let mut k = (i + 1 + (h >> 16) as usize % 7) % 8;
                    if k == j { k = (k + 1) % 8; if k == i { k = (k + 1) % 8; } }
                    [i, j, k]
                })
                .collect();
            let t = TripletSet::new(8, t).unwrap();
            prop_assert_eq!(similarity_precision(&m, &t).unwrap(), similarity_precision(&flipped, &t).unwrap());
        }
    }
}
