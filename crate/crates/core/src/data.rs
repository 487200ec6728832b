//! In-memory datasets, the T1/T2 split, preprocessing, a synthetic cluster
//! generator and epoch batching.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::{streams, RngStream};
use crate::tensor::{self, Tensor};

/// Features (`n × d`), class labels, and for every row the index of the
/// sample in the pool it was drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub indices: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::Shape {
                op: "dataset",
                lhs: features.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Input(format!("label {bad} outside [0, {classes})")));
        }
        features.check_finite("dataset features")?;
        let indices = (0..labels.len()).collect();
        Ok(Self {
            features,
            labels,
            classes,
            indices,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.cols()
    }

    /// Rows at `rows` (positions in this dataset), keeping pool provenance.
    pub fn subset(&self, rows: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            classes: self.classes,
            indices: rows.iter().map(|&r| self.indices[r]).collect(),
        }
    }

    /// The batch at `rows`: features and labels.
    pub fn batch(&self, rows: &[usize]) -> (Tensor, Vec<usize>) {
        (
            self.features.select_rows(rows),
            rows.iter().map(|&r| self.labels[r]).collect(),
        )
    }

    /// Shuffles with `(seed, stream)` and cuts the last `tail` rows off.
    /// Returns `(head, tail)`.
    pub fn carve(&self, tail: usize, seed: u64, stream: u64) -> Result<(Self, Self)> {
        if tail >= self.len() {
            return Err(Error::Config(format!(
                "cannot hold out {tail} of {} samples",
                self.len()
            )));
        }
        let perm = RngStream::new(seed, stream).permutation(self.len());
        let cut = self.len() - tail;
        Ok((self.subset(&perm[..cut]), self.subset(&perm[cut..])))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preprocessing {
    None,
    /// Per-feature T1 mean removed from every set.
    Center,
    /// Every sample scaled to zero mean and unit norm.
    Gcn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub t1: Dataset,
    pub t2: Dataset,
    pub test: Dataset,
    pub preprocessing: Preprocessing,
    pub split_seed: u64,
}

/// Uniform permutation of `pool` from `seed`; the last `t2_size` samples go
/// to T2, the rest to T1. `test` passes through untouched.
pub fn split(pool: &Dataset, test: Dataset, t2_size: usize, seed: u64) -> Result<DatasetSplit> {
    if pool.dims() != test.dims() || pool.classes != test.classes {
        return Err(Error::Input("test set does not match the pool".into()));
    }
    let (t1, t2) = pool.carve(t2_size, seed, streams::SPLIT)?;
    Ok(DatasetSplit {
        t1,
        t2,
        test,
        preprocessing: Preprocessing::None,
        split_seed: seed,
    })
}

/// Subtracts the per-feature T1 mean from T1, T2 and test.
pub fn center_features(mut split: DatasetSplit) -> Result<DatasetSplit> {
    if split.t1.is_empty() {
        return Err(Error::Input("centering needs a nonempty T1".into()));
    }
    let mean = tensor::column_means(&split.t1.features);
    for set in [&mut split.t1, &mut split.t2, &mut split.test] {
        let d = set.dims();
        for row in set.features.data_mut().chunks_exact_mut(d) {
            for (v, m) in row.iter_mut().zip(mean.data()) {
                *v -= m;
            }
        }
    }
    split.preprocessing = Preprocessing::Center;
    Ok(split)
}

pub const GCN_EPSILON: f64 = 1e-8;

/// Per-sample global contrast normalization: `(x − x̄) / max(‖x − x̄‖, ε)`.
pub fn gcn(mut split: DatasetSplit) -> Result<DatasetSplit> {
    if split.t1.is_empty() {
        return Err(Error::Input("normalization needs a nonempty T1".into()));
    }
    for set in [&mut split.t1, &mut split.t2, &mut split.test] {
        let d = set.dims();
        for row in set.features.data_mut().chunks_exact_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            row.iter_mut().for_each(|v| *v -= mean);
            let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            let scale = 1.0 / norm.max(GCN_EPSILON);
            row.iter_mut().for_each(|v| *v *= scale);
        }
    }
    split.preprocessing = Preprocessing::Gcn;
    Ok(split)
}

/// Gaussian blobs: class centers drawn from `N(0, I)`, samples at
/// `center + noise·N(0, I)`. Labels cycle through the classes before the rows
/// are shuffled, so class counts differ by at most one.
pub fn synth_clusters(
    classes: usize,
    samples: usize,
    dims: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    if dims == 0 || noise.is_nan() || noise < 0.0 {
        return Err(Error::Config("clusters need dims ≥ 1 and noise ≥ 0".into()));
    }
    let mut rng = RngStream::new(seed, streams::SYNTH);
    let centers = rng.gaussian(&[classes, dims]);
    let order = rng.permutation(samples);
    let labels: Vec<usize> = order.iter().map(|&i| i % classes).collect();
    let mut features = rng.gaussian(&[samples, dims]);
    for (row, &y) in features.data_mut().chunks_exact_mut(dims).zip(&labels) {
        for (v, c) in row.iter_mut().zip(centers.row(y)) {
            *v = c + noise * *v;
        }
    }
    Dataset::new(features, labels, classes)
}

/// Shuffled index batches for one epoch; the final partial batch is dropped.
pub fn batches(n: usize, batch: usize, seed: u64, stream: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch == 0 || batch > n {
        return Err(Error::Config(format!("batch size {batch} for {n} samples")));
    }
    let perm = RngStream::for_epoch(seed, stream, epoch).permutation(n);
    Ok(perm.chunks_exact(batch).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(n: usize, d: usize) -> Dataset {
        let data = (0..n * d).map(|i| (i % 17) as f64 * 0.25 + (i / d) as f64).collect();
        let labels = (0..n).map(|i| i % 3).collect();
        Dataset::new(Tensor::new(&[n, d], data).unwrap(), labels, 3).unwrap()
    }

    #[test]
    fn split_sizes_and_partition() {
        let n = 60_000;
        let p = Dataset::new(Tensor::zeros(&[n, 1]), vec![0; n], 10).unwrap();
        let test = Dataset::new(Tensor::zeros(&[5, 1]), vec![0; 5], 10).unwrap();
        let s = split(&p, test, 5000, 9).unwrap();
        assert_eq!((s.t1.len(), s.t2.len()), (55_000, 5000));
        let mut all: Vec<usize> = s.t1.indices.iter().chain(&s.t2.indices).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
        let again = split(&p, s.test.clone(), 5000, 9).unwrap();
        assert_eq!(again.t2.indices, s.t2.indices);
        assert!(split(&p, s.test.clone(), n, 9).is_err());
    }

    #[test]
    fn centering_uses_t1_only() {
        let p = pool(50, 4);
        let mut test = pool(6, 4);
        test.features.data_mut().iter_mut().for_each(|v| *v += 100.0);
        let s = center_features(split(&p, test.clone(), 10, 1).unwrap()).unwrap();
        let m = tensor::column_means(&s.t1.features);
        assert!(m.data().iter().all(|v| v.abs() < 1e-10));
        let tm = tensor::column_means(&s.test.features);
        assert!(tm.data().iter().all(|&v| v > 50.0), "{:?}", tm.data());
    }

    #[test]
    fn gcn_unit_norm_and_zero_guard() {
        let p = pool(20, 5);
        let mut test = pool(2, 5);
        test.features.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let s = gcn(split(&p, test, 5, 3).unwrap()).unwrap();
        for r in 0..s.t1.len() {
            let row = s.t1.features.row(r);
            let norm: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
        assert!(s.test.features.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clusters_are_balanced_and_separable() {
        let d = synth_clusters(4, 103, 6, 0.0, 11).unwrap();
        let mut counts = [0usize; 4];
        d.labels.iter().for_each(|&y| counts[y] += 1);
        assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        let again = synth_clusters(4, 103, 6, 0.0, 11).unwrap();
        assert_eq!(d, again);
        // every sample sits on its own class center
        for r in 0..d.len() {
            for s in 0..d.len() {
                let same = d.features.row(r) == d.features.row(s);
                assert_eq!(same, d.labels[r] == d.labels[s]);
            }
        }
        assert!(synth_clusters(1, 10, 2, 0.1, 1).is_err());
    }

    #[test]
    fn batch_partition_and_drop_last() {
        let b = batches(1000, 100, 5, streams::SHUFFLE_T1, 0).unwrap();
        assert_eq!(b.len(), 10);
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        let b = batches(1050, 100, 5, streams::SHUFFLE_T1, 0).unwrap();
        assert_eq!(b.len(), 10);
        let next = batches(1050, 100, 5, streams::SHUFFLE_T1, 1).unwrap();
        assert_ne!(b, next);
        assert!(batches(10, 11, 5, streams::SHUFFLE_T1, 0).is_err());
    }

    #[test]
    fn bad_labels_rejected() {
        assert!(Dataset::new(Tensor::zeros(&[2, 1]), vec![0, 3], 3).is_err());
        assert!(Dataset::new(Tensor::zeros(&[2, 1]), vec![0], 3).is_err());
    }
}
