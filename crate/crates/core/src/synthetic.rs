//! Seeded Gaussian-cluster datasets for offline runs and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::kb::{Dataset, DatasetInfo, EmbeddingMatrix, KbEntry, KnowledgeBase, Task};

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub name: String,
    pub classes: usize,
    pub dim: usize,
    pub demo_count: usize,
    pub test_count: usize,
    /// Standard deviation of each class centre's coordinates.
    pub center_spread: f64,
    /// Per-coordinate standard deviation of points around their centre.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            classes: 3,
            dim: 8,
            demo_count: 60,
            test_count: 30,
            center_spread: 3.0,
            noise: 1.0,
            seed: 0,
        }
    }
}

pub fn class_name(i: usize) -> String {
    format!("class {i}")
}

/// Single-label dataset; point `i` of each split belongs to class
/// `i % classes`. Demo ids are `demo-NNNN`, test ids `test-NNNN`.
pub fn gaussian_clusters(spec: &ClusterSpec) -> Dataset {
    assert!(spec.classes > 0 && spec.dim > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centre_dist = Normal::new(0.0, spec.center_spread).expect("valid spread");
    let noise = Normal::new(0.0, spec.noise).expect("valid noise");
    let centres: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            (0..spec.dim)
                .map(|_| centre_dist.sample(&mut rng))
                .collect()
        })
        .collect();

    let mut split = |prefix: &str, n: usize| {
        let mut rows = Vec::with_capacity(n);
        let mut entries = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % spec.classes;
            let row: Vec<f32> = centres[class]
                .iter()
                .map(|c| (c + noise.sample(&mut rng)) as f32)
                .collect();
            rows.push(row);
            let id = format!("{prefix}-{i:04}");
            entries.push(KbEntry::new(
                &id,
                format!("images/{id}.png"),
                vec![class_name(class)],
                i,
            ));
        }
        let matrix = EmbeddingMatrix::from_rows(spec.dim, &rows).expect("rectangular");
        KnowledgeBase::new(matrix, entries).expect("valid synthetic kb")
    };
    let demo = split("demo", spec.demo_count);
    let test = split("test", spec.test_count);
    Dataset {
        info: DatasetInfo {
            name: spec.name.clone(),
            class_names: (0..spec.classes).map(class_name).collect(),
            task: Task::SingleLabel,
        },
        demo,
        test,
    }
}

/// Uniform random matrix in `[-1, 1)`.
pub fn uniform_matrix(rng: &mut impl Rng, count: usize, dim: usize) -> EmbeddingMatrix {
    EmbeddingMatrix::new(
        dim,
        (0..count * dim)
            .map(|_| rng.gen_range(-1.0f32..1.0))
            .collect(),
    )
    .expect("dim > 0")
}
