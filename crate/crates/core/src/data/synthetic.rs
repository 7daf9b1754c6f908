//! Gaussian-blob task streams for small-scale runs and tests.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Result, TaskStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Scale of the class means relative to the unit within-class noise.
    pub separation: f64,
}

/// One isotropic unit-variance Gaussian per class, with means drawn as
/// `separation · N(0, I)`. The same seed gives the same stream.
pub fn make_synthetic_stream<R: Rng + ?Sized>(
    tasks: usize,
    classes_per_task: usize,
    spec: &SyntheticSpec,
    rng: &mut R,
) -> Result<TaskStream> {
    if spec.separation.is_nan() || spec.separation <= 0.0 || !spec.separation.is_finite() {
        return Err(DataError::Invalid(format!(
            "separation must be positive and finite, got {}",
            spec.separation
        )));
    }
    if spec.dim == 0 || spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(DataError::Invalid(
            "synthetic streams need a positive width and class sizes".into(),
        ));
    }
    let classes = tasks * classes_per_task;
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..spec.dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    spec.separation * z
                })
                .collect()
        })
        .collect();
    let draw = |per_class: usize, rng: &mut R| {
        let mut d = Dataset::empty(spec.dim);
        let mut row = vec![0f32; spec.dim];
        for (c, mean) in means.iter().enumerate() {
            for _ in 0..per_class {
                for (v, m) in row.iter_mut().zip(mean) {
                    let noise: f64 = StandardNormal.sample(rng);
                    *v = (m + noise) as f32;
                }
                d.push(&row, c);
            }
        }
        d
    };
    let train = draw(spec.train_per_class, rng);
    let test = draw(spec.test_per_class, rng);
    TaskStream::from_split(&train, &test, tasks, classes_per_task)
}

/// Class means of a stream, estimated from its training rows.
pub fn class_means(stream: &TaskStream) -> Vec<Vec<f64>> {
    let dim = stream.dim();
    let mut out = Vec::new();
    for task in &stream.tasks {
        for &c in &task.classes {
            let mut mean = vec![0f64; dim];
            let mut n = 0usize;
            for i in 0..task.train.len() {
                if task.train.labels()[i] == c {
                    for (m, &v) in mean.iter_mut().zip(task.train.row(i)) {
                        *m += f64::from(v);
                    }
                    n += 1;
                }
            }
            out.push(mean.into_iter().map(|m| m / n as f64).collect());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            dim: 5,
            train_per_class: 20,
            test_per_class: 10,
            separation: 3.0,
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let a = make_synthetic_stream(3, 2, &spec(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = make_synthetic_stream(3, 2, &spec(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        let c = make_synthetic_stream(3, 2, &spec(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn class_means_are_distinct() {
        let s = make_synthetic_stream(4, 2, &spec(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.len(), 4);
        assert_eq!(s.task(3).classes, vec![4, 5]);
        let means = class_means(&s);
        for i in 0..means.len() {
            for j in i + 1..means.len() {
                assert_ne!(means[i], means[j]);
            }
        }
    }

    #[test]
    fn nonpositive_separation_is_rejected() {
        let bad = SyntheticSpec {
            separation: 0.0,
            ..spec()
        };
        assert!(make_synthetic_stream(1, 2, &bad, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
