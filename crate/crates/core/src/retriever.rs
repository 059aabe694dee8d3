//! Demonstration selection: nearest neighbours (Visual RAG) or a seeded
//! uniform draw (the many-shot random baseline).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::index::{FlatIndex, IndexError};
use crate::kb::{normalize_in_place, KbEntry, KnowledgeBase};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SelectionStrategy {
    NearestNeighbor,
    Random { seed: u64 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum OrderingPolicy {
    /// Most similar demo last, adjacent to the query image.
    #[default]
    SimilarLast,
    SimilarFirst,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemoExample {
    pub entry: KbEntry,
    /// Present for nearest-neighbour selections only.
    pub distance: Option<f64>,
}

/// Demo-set KB plus its flat index. Immutable once built.
#[derive(Debug, Clone)]
pub struct Retriever {
    index: FlatIndex,
    entries: Vec<KbEntry>,
    normalize: bool,
}

impl Retriever {
    /// With `normalize`, KB rows and queries are scaled to unit norm first,
    /// which makes L2 ranking equivalent to cosine ranking.
    pub fn new(kb: &KnowledgeBase, normalize: bool) -> Result<Self, IndexError> {
        let matrix = if normalize {
            kb.matrix.normalized()
        } else {
            kb.matrix.clone()
        };
        Ok(Self {
            index: FlatIndex::new(matrix)?,
            entries: kb.entries.clone(),
            normalize,
        })
    }

    pub fn index(&self) -> &FlatIndex {
        &self.index
    }

    pub fn entries(&self) -> &[KbEntry] {
        &self.entries
    }

    pub fn normalize(&self) -> bool {
        self.normalize
    }

    /// Selects up to `k` demos for one query.
    ///
    /// `query_key` identifies the query; the random strategy derives its
    /// generator from `(seed, query_key)` so results do not depend on
    /// evaluation order. `k == 0` selects nothing.
    pub fn retrieve(
        &self,
        strategy: SelectionStrategy,
        query_key: &str,
        query_embedding: &[f32],
        k: usize,
    ) -> Result<Vec<DemoExample>, IndexError> {
        if query_embedding.len() != self.index.dim() {
            return Err(IndexError::DimensionMismatch {
                expected: self.index.dim(),
                got: query_embedding.len(),
            });
        }
        if k == 0 || self.entries.is_empty() {
            return Ok(Vec::new());
        }
        match strategy {
            SelectionStrategy::NearestNeighbor => {
                let hits = if self.normalize {
                    let mut q = query_embedding.to_vec();
                    normalize_in_place(&mut q);
                    self.index.search(&q, k)?
                } else {
                    self.index.search(query_embedding, k)?
                };
                Ok(hits
                    .into_iter()
                    .map(|n| DemoExample {
                        entry: self.entries[n.row].clone(),
                        distance: Some(n.distance),
                    })
                    .collect())
            }
            SelectionStrategy::Random { seed } => {
                let mut rng = query_rng(seed, query_key);
                let n = self.entries.len();
                Ok(rand::seq::index::sample(&mut rng, n, k.min(n))
                    .into_iter()
                    .map(|row| DemoExample {
                        entry: self.entries[row].clone(),
                        distance: None,
                    })
                    .collect())
            }
        }
    }
}

/// Per-query generator seeded from SHA-256 of `seed (LE) || query_key`.
pub fn query_rng(seed: u64, query_key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(query_key.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Arranges retrieved demos for the prompt. Random selections (no distances)
/// are returned unchanged.
pub fn order_for_prompt(mut demos: Vec<DemoExample>, policy: OrderingPolicy) -> Vec<DemoExample> {
    let ranked = demos.iter().all(|d| d.distance.is_some());
    if ranked && policy == OrderingPolicy::SimilarLast {
        demos.reverse();
    }
    demos
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kb::EmbeddingMatrix;
    use std::collections::HashSet;

    fn kb(points: &[(f32, f32, &str)]) -> KnowledgeBase {
        let rows: Vec<[f32; 2]> = points.iter().map(|p| [p.0, p.1]).collect();
        let entries = points
            .iter()
            .enumerate()
            .map(|(i, p)| {
                KbEntry::new(
                    format!("e{i}"),
                    format!("e{i}.png"),
                    vec![p.2.to_string()],
                    i,
                )
            })
            .collect();
        KnowledgeBase::new(EmbeddingMatrix::from_rows(2, &rows).unwrap(), entries).unwrap()
    }

    fn clusters() -> KnowledgeBase {
        // Three tight clusters (diameter < 0.5) whose centres are 10 apart.
        let mut pts = Vec::new();
        for (cx, cy, label) in [(0.0, 0.0, "A"), (10.0, 0.0, "B"), (0.0, 10.0, "C")] {
            for j in 0..6 {
                let off = 0.04 * j as f32;
                pts.push((cx + off, cy - off, label));
            }
        }
        kb(&pts)
    }

    fn demo(dist: Option<f64>) -> DemoExample {
        DemoExample {
            entry: KbEntry::new("x", "x.png", vec!["a".into()], 0),
            distance: dist,
        }
    }

    #[test]
    fn exhaustive_nearest_neighbor() {
        let base = clusters();
        let r = Retriever::new(&base, false).unwrap();
        let demos = r
            .retrieve(
                SelectionStrategy::NearestNeighbor,
                "q",
                &[1.0, 1.0],
                base.len(),
            )
            .unwrap();
        assert_eq!(demos.len(), base.len());
        assert!(demos.windows(2).all(|w| w[0].distance <= w[1].distance));
    }

    #[test]
    fn in_cluster_query_selects_only_that_cluster() {
        let base = clusters();
        let r = Retriever::new(&base, false).unwrap();
        let demos = r
            .retrieve(SelectionStrategy::NearestNeighbor, "q", &[0.1, -0.1], 5)
            .unwrap();
        assert_eq!(demos.len(), 5);
        assert!(demos.iter().all(|d| d.entry.labels == ["A"]));
    }

    #[test]
    fn nearest_neighbor_matches_index_order() {
        let base = clusters();
        let r = Retriever::new(&base, false).unwrap();
        let q = [4.0, 3.0];
        let demos = r
            .retrieve(SelectionStrategy::NearestNeighbor, "q", &q, 7)
            .unwrap();
        let hits = r.index().search(&q, 7).unwrap();
        let a: Vec<_> = demos
            .iter()
            .map(|d| (d.entry.row, d.distance.unwrap()))
            .collect();
        let b: Vec<_> = hits.iter().map(|n| (n.row, n.distance)).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn random_is_deterministic_and_duplicate_free() {
        let base = clusters();
        let r = Retriever::new(&base, false).unwrap();
        let s = SelectionStrategy::Random { seed: 7 };
        let a = r.retrieve(s, "query-1", &[0.0, 0.0], 10).unwrap();
        let b = r.retrieve(s, "query-1", &[0.0, 0.0], 10).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        let ids: HashSet<_> = a.iter().map(|d| d.entry.id.clone()).collect();
        assert_eq!(ids.len(), 10);
        assert!(a.iter().all(|d| d.distance.is_none()));
        let other = r
            .retrieve(
                SelectionStrategy::Random { seed: 8 },
                "query-1",
                &[0.0, 0.0],
                10,
            )
            .unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn random_clamps_to_kb_size() {
        let base = clusters();
        let r = Retriever::new(&base, false).unwrap();
        let all = r
            .retrieve(SelectionStrategy::Random { seed: 1 }, "q", &[0.0, 0.0], 500)
            .unwrap();
        assert_eq!(all.len(), base.len());
    }

    #[test]
    fn empty_kb_and_zero_k() {
        let empty = KnowledgeBase::new(EmbeddingMatrix::empty(2).unwrap(), vec![]).unwrap();
        let r = Retriever::new(&empty, false).unwrap();
        assert!(r
            .retrieve(SelectionStrategy::NearestNeighbor, "q", &[0.0, 0.0], 3)
            .unwrap()
            .is_empty());
        let r = Retriever::new(&clusters(), false).unwrap();
        assert!(r
            .retrieve(SelectionStrategy::NearestNeighbor, "q", &[0.0, 0.0], 0)
            .unwrap()
            .is_empty());
        assert!(r
            .retrieve(SelectionStrategy::NearestNeighbor, "q", &[0.0], 1)
            .is_err());
    }

    #[test]
    fn normalization_ranks_by_direction() {
        let base = kb(&[
            (10.0, 0.0, "far-same-direction"),
            (0.5, 0.5, "near-diagonal"),
        ]);
        let q = [1.0, 0.0];
        let plain = Retriever::new(&base, false).unwrap();
        let unit = Retriever::new(&base, true).unwrap();
        assert_eq!(
            plain
                .retrieve(SelectionStrategy::NearestNeighbor, "q", &q, 1)
                .unwrap()[0]
                .entry
                .id,
            "e1"
        );
        let top = &unit
            .retrieve(SelectionStrategy::NearestNeighbor, "q", &q, 1)
            .unwrap()[0];
        assert_eq!(top.entry.id, "e0");
        assert!(top.distance.unwrap() < 1e-7);
    }

    #[test]
    fn ordering_policies() {
        let demos: Vec<_> = [1.0, 2.0, 3.0].iter().map(|&d| demo(Some(d))).collect();
        let last = order_for_prompt(demos.clone(), OrderingPolicy::SimilarLast);
        let dists: Vec<_> = last.iter().map(|d| d.distance.unwrap()).collect();
        assert_eq!(dists, vec![3.0, 2.0, 1.0]);
        assert_eq!(
            order_for_prompt(demos.clone(), OrderingPolicy::SimilarFirst),
            demos
        );

        let single = vec![demo(Some(0.5))];
        assert_eq!(
            order_for_prompt(single.clone(), OrderingPolicy::SimilarLast),
            single
        );
        assert_eq!(
            order_for_prompt(single.clone(), OrderingPolicy::SimilarFirst),
            single
        );
        assert!(order_for_prompt(vec![], OrderingPolicy::SimilarLast).is_empty());

        let mut random = vec![demo(None), demo(None)];
        random[1].entry.id = "y".into();
        assert_eq!(
            order_for_prompt(random.clone(), OrderingPolicy::SimilarLast),
            random
        );
    }
}
