//! Exact nearest-neighbor matrix over trained item embeddings and the
//! candidate-set lookup used at serving time.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor2D;

pub const DEFAULT_NEIGHBORS: usize = 100;
const MAGIC: u32 = 0x4e_4e_4d_31; // "NNM1"
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Similarity {
    Cosine,
    Dot,
}

/// Per-item table of the k most similar items, ordered by non-increasing
/// similarity with ties broken by ascending item id.
#[derive(Debug, Clone, PartialEq)]
pub struct NearestNeighborMatrix {
    pub no_items: usize,
    pub no_neighbors: usize,
    /// row-major: neighbors of item i at [i*k .. (i+1)*k]
    ids: Vec<u32>,
    similarities: Option<Vec<f64>>,
}

impl NearestNeighborMatrix {
    /// Assemble a matrix from precomputed rows (row-major, k per item).
    /// Used by benchmarks and loaders; `build_matrix` is the real builder.
    pub fn from_rows(no_items: usize, no_neighbors: usize, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != no_items * no_neighbors {
            return Err(Error::Shape(format!(
                "{} ids for {no_items} x {no_neighbors} matrix",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= no_items) {
            return Err(Error::Index(format!(
                "neighbor id {bad} outside catalog of {no_items}"
            )));
        }
        Ok(NearestNeighborMatrix {
            no_items,
            no_neighbors,
            ids,
            similarities: None,
        })
    }

    pub fn neighbors(&self, item: u32) -> Option<&[u32]> {
        let i = item as usize;
        if i >= self.no_items {
            return None;
        }
        Some(&self.ids[i * self.no_neighbors..(i + 1) * self.no_neighbors])
    }

    pub fn similarities(&self, item: u32) -> Option<&[f64]> {
        let sims = self.similarities.as_ref()?;
        let i = item as usize;
        if i >= self.no_items {
            return None;
        }
        Some(&sims[i * self.no_neighbors..(i + 1) * self.no_neighbors])
    }
}

/// Exhaustive exact top-k by the chosen similarity. Zero-norm rows are
/// excluded from other items' cosine rows and fall back to dot-product
/// similarity for their own row.
pub fn build_matrix(
    embeddings: &Tensor2D,
    k: usize,
    similarity: Similarity,
) -> Result<NearestNeighborMatrix> {
    let m = embeddings.rows();
    if k == 0 || k >= m {
        return Err(Error::Config(format!(
            "no_neighbors {k} must be in 1..{m}"
        )));
    }
    let norms: Vec<f64> = (0..m)
        .map(|i| embeddings.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let zero_norm_items: Vec<usize> = (0..m).filter(|&i| norms[i] == 0.0).collect();
    if !zero_norm_items.is_empty() && similarity == Similarity::Cosine {
        eprintln!(
            "warning: {} zero-norm embedding rows excluded from cosine neighbor rows",
            zero_norm_items.len()
        );
    }
    let mut ids = Vec::with_capacity(m * k);
    let mut sims_out = Vec::with_capacity(m * k);
    for i in 0..m {
        let use_dot = similarity == Similarity::Dot || norms[i] == 0.0;
        let mut scored: Vec<(f64, u32)> = (0..m)
            .filter(|&j| j != i)
            .filter(|&j| use_dot || norms[j] > 0.0)
            .map(|j| {
                let dot: f64 = embeddings
                    .row(i)
                    .iter()
                    .zip(embeddings.row(j))
                    .map(|(a, b)| a * b)
                    .sum();
                let s = if use_dot { dot } else { dot / (norms[i] * norms[j]) };
                (s, j as u32)
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        if scored.len() < k {
            return Err(Error::Config(format!(
                "item {i}: only {} scorable neighbors for k = {k}",
                scored.len()
            )));
        }
        for &(s, j) in scored.iter().take(k) {
            ids.push(j);
            sims_out.push(s);
        }
    }
    Ok(NearestNeighborMatrix {
        no_items: m,
        no_neighbors: k,
        ids,
        similarities: Some(sims_out),
    })
}

/// Union of the session items' neighbor rows, minus the session items.
/// Unknown ids are skipped; the skip count is returned alongside.
pub fn candidates(matrix: &NearestNeighborMatrix, session_items: &[u32]) -> (Vec<u32>, usize) {
    let mut seen = vec![false; matrix.no_items];
    let mut skipped = 0usize;
    let mut out = Vec::new();
    for &item in session_items {
        match matrix.neighbors(item) {
            Some(row) => {
                for &n in row {
                    if !seen[n as usize] {
                        seen[n as usize] = true;
                        out.push(n);
                    }
                }
            }
            None => skipped += 1,
        }
    }
    out.retain(|id| !session_items.contains(id));
    out.sort_unstable();
    (out, skipped)
}

// nn_matrix.bin: [magic][version][no_items][k] as u32 LE, then
// no_items * k neighbor ids as u32 LE, row-major.

pub fn save_matrix(path: &Path, matrix: &NearestNeighborMatrix) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in [
        MAGIC,
        FORMAT_VERSION,
        matrix.no_items as u32,
        matrix.no_neighbors as u32,
    ] {
        w.write_all(&v.to_le_bytes())?;
    }
    for &id in &matrix.ids {
        w.write_all(&id.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_matrix(path: &Path) -> Result<NearestNeighborMatrix> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    if data.len() < 16 {
        return Err(Error::Compatibility("nn matrix file truncated".into()));
    }
    let word = |i: usize| u32::from_le_bytes(data[4 * i..4 * i + 4].try_into().unwrap());
    if word(0) != MAGIC {
        return Err(Error::Compatibility("bad nn matrix magic".into()));
    }
    if word(1) != FORMAT_VERSION {
        return Err(Error::Compatibility(format!(
            "nn matrix version {}, expected {FORMAT_VERSION}",
            word(1)
        )));
    }
    let no_items = word(2) as usize;
    let k = word(3) as usize;
    if data.len() != 16 + 4 * no_items * k {
        return Err(Error::Compatibility(format!(
            "nn matrix payload is {} bytes, expected {}",
            data.len() - 16,
            4 * no_items * k
        )));
    }
    let ids: Vec<u32> = (0..no_items * k).map(|i| word(4 + i)).collect();
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= no_items) {
        return Err(Error::Compatibility(format!(
            "neighbor id {bad} outside catalog of {no_items}"
        )));
    }
    Ok(NearestNeighborMatrix {
        no_items,
        no_neighbors: k,
        ids,
        similarities: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force_topk(embeddings: &Tensor2D, k: usize) -> Vec<Vec<u32>> {
        let m = embeddings.rows();
        let cos = |i: usize, j: usize| {
            let (a, b) = (embeddings.row(i), embeddings.row(j));
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        (0..m)
            .map(|i| {
                let mut all: Vec<(f64, u32)> =
                    (0..m).filter(|&j| j != i).map(|j| (cos(i, j), j as u32)).collect();
                all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
                all.into_iter().take(k).map(|(_, j)| j).collect()
            })
            .collect()
    }

    #[test]
    fn collinear_embeddings_tie_break_by_id() {
        let e = Tensor2D::from_vec(3, 2, vec![1.0, 0.0, 2.0, 0.0, 3.0, 0.0]).unwrap();
        let m = build_matrix(&e, 1, Similarity::Cosine).unwrap();
        // all cosines are 1.0, so each row picks the lowest other id
        assert_eq!(m.neighbors(0).unwrap(), &[1]);
        assert_eq!(m.neighbors(1).unwrap(), &[0]);
        assert_eq!(m.neighbors(2).unwrap(), &[0]);
    }

    #[test]
    fn orthogonal_rows_zero_similarity() {
        let e = Tensor2D::identity(3);
        let m = build_matrix(&e, 1, Similarity::Cosine).unwrap();
        assert_eq!(m.neighbors(0).unwrap(), &[1]);
        assert_eq!(m.neighbors(1).unwrap(), &[0]);
        assert_eq!(m.neighbors(2).unwrap(), &[0]);
        assert!(m.similarities(0).unwrap()[0].abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (m, d, k) = (200, 16, 10);
        let e = Tensor2D::from_vec(
            m,
            d,
            (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let got = build_matrix(&e, k, Similarity::Cosine).unwrap();
        let expect = brute_force_topk(&e, k);
        for i in 0..m {
            assert_eq!(got.neighbors(i as u32).unwrap(), expect[i].as_slice(), "row {i}");
        }
    }

    #[test]
    fn k_out_of_range_rejected() {
        let e = Tensor2D::identity(3);
        assert!(build_matrix(&e, 3, Similarity::Cosine).is_err());
        assert!(build_matrix(&e, 0, Similarity::Cosine).is_err());
    }

    #[test]
    fn zero_norm_row_excluded_and_dot_fallback() {
        let e = Tensor2D::from_vec(
            4,
            2,
            vec![1.0, 0.0, 0.0, 0.0, 0.5, 0.5, -1.0, 0.3],
        )
        .unwrap();
        let m = build_matrix(&e, 2, Similarity::Cosine).unwrap();
        // item 1 has zero norm: it never appears in others' rows
        for i in [0u32, 2, 3] {
            assert!(!m.neighbors(i).unwrap().contains(&1), "row {i}");
        }
        // item 1's own row ranks by dot product: every dot is 0, ids break ties
        assert_eq!(m.neighbors(1).unwrap(), &[0, 2]);
    }

    #[test]
    fn candidate_union_disjoint_rows() {
        let mut ids = Vec::new();
        // 9 items, k=2: neighbors of i are (i+1, i+2) mod 9
        for i in 0..9u32 {
            ids.push((i + 1) % 9);
            ids.push((i + 2) % 9);
        }
        let m = NearestNeighborMatrix {
            no_items: 9,
            no_neighbors: 2,
            ids,
            similarities: None,
        };
        let (cand, skipped) = candidates(&m, &[0, 3, 6]);
        assert_eq!(skipped, 0);
        // rows {1,2},{4,5},{7,8}: disjoint and none is a session item
        assert_eq!(cand, vec![1, 2, 4, 5, 7, 8]);
    }

    #[test]
    fn candidate_union_collapses_shared_rows() {
        let m = NearestNeighborMatrix {
            no_items: 4,
            no_neighbors: 2,
            ids: vec![2, 3, 2, 3, 2, 3, 2, 3],
            similarities: None,
        };
        let (cand, _) = candidates(&m, &[0, 1]);
        assert_eq!(cand, vec![2, 3]);
    }

    #[test]
    fn candidate_excludes_session_items_and_counts_unknown() {
        let m = NearestNeighborMatrix {
            no_items: 3,
            no_neighbors: 1,
            ids: vec![1, 0, 0],
            similarities: None,
        };
        let (cand, skipped) = candidates(&m, &[0, 1, 99]);
        // neighbor rows {1} and {0} are both session items
        assert!(cand.is_empty());
        assert_eq!(skipped, 1);
    }

    #[test]
    fn matrix_file_round_trip() {
        let e = Tensor2D::from_vec(4, 3, (0..12).map(|v| v as f64 * 0.7 - 4.0).collect()).unwrap();
        let m = build_matrix(&e, 2, Similarity::Cosine).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nn_matrix.bin");
        save_matrix(&path, &m).unwrap();
        let loaded = load_matrix(&path).unwrap();
        assert_eq!(loaded.no_items, 4);
        assert_eq!(loaded.no_neighbors, 2);
        for i in 0..4u32 {
            assert_eq!(loaded.neighbors(i), m.neighbors(i));
        }
    }

    #[test]
    fn corrupted_matrix_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nn_matrix.bin");
        std::fs::write(&path, b"garbage").unwrap();
        assert!(load_matrix(&path).is_err());
    }
}
