//! Dataset acquisition, non-IID partitioning and mini-batch sampling.
//!
//! Datasets come from big-endian IDX files or from a seeded synthetic
//! Gaussian-blob generator, so the whole pipeline runs without any network
//! access. All randomness flows through explicitly seeded streams.

use crate::error::{Error, Result};
use crate::objective::BatchRef;
use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::Cursor;
use std::path::Path;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled samples with a shared feature shape; features are stored
/// flattened, sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_shape: Vec<usize>,
    features: Vec<f64>,
    labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(
        feature_shape: Vec<usize>,
        features: Vec<f64>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let dim: usize = feature_shape.iter().product();
        if dim == 0 || features.len() != dim * labels.len() {
            return Err(Error::shape(
                "Dataset::new",
                format!(
                    "{} feature values for {} samples of size {dim}",
                    features.len(),
                    labels.len()
                ),
            ));
        }
        if labels.iter().any(|&y| y >= num_classes) {
            return Err(Error::shape("Dataset::new", "label out of range"));
        }
        Ok(Self {
            feature_shape,
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_shape.iter().product()
    }

    pub fn feature(&self, i: usize) -> &[f64] {
        let dim = self.feature_dim();
        &self.features[i * dim..(i + 1) * dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Borrowed mini-batch over the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> BatchRef<'_> {
        BatchRef {
            feature_shape: &self.feature_shape,
            samples: indices
                .iter()
                .map(|&i| (self.feature(i), self.label(i)))
                .collect(),
        }
    }
}

fn read_u32(cur: &mut Cursor<&[u8]>, total: usize) -> Result<u32> {
    let offset = cur.position() as usize;
    cur.read_u32::<BigEndian>().map_err(|_| Error::IdxTruncated {
        offset,
        expected: offset + 4,
        actual: total,
    })
}

/// Parses big-endian IDX image/label files into a pixel dataset normalized
/// to [0, 1].
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img_bytes = std::fs::read(images_path)?;
    let lbl_bytes = std::fs::read(labels_path)?;

    let mut cur = Cursor::new(img_bytes.as_slice());
    let magic = read_u32(&mut cur, img_bytes.len())?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::IdxBadMagic {
            offset: 0,
            expected: IDX_IMAGES_MAGIC,
            actual: magic,
        });
    }
    let count = read_u32(&mut cur, img_bytes.len())? as usize;
    let rows = read_u32(&mut cur, img_bytes.len())? as usize;
    let cols = read_u32(&mut cur, img_bytes.len())? as usize;
    let expected = 16 + count * rows * cols;
    if img_bytes.len() < expected {
        return Err(Error::IdxTruncated {
            offset: img_bytes.len(),
            expected,
            actual: img_bytes.len(),
        });
    }
    let features: Vec<f64> = img_bytes[16..expected]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();

    let mut cur = Cursor::new(lbl_bytes.as_slice());
    let magic = read_u32(&mut cur, lbl_bytes.len())?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::IdxBadMagic {
            offset: 0,
            expected: IDX_LABELS_MAGIC,
            actual: magic,
        });
    }
    let lbl_count = read_u32(&mut cur, lbl_bytes.len())? as usize;
    let lbl_expected = 8 + lbl_count;
    if lbl_bytes.len() < lbl_expected {
        return Err(Error::IdxTruncated {
            offset: lbl_bytes.len(),
            expected: lbl_expected,
            actual: lbl_bytes.len(),
        });
    }
    if lbl_count != count {
        return Err(Error::IdxCountMismatch {
            images: count,
            labels: lbl_count,
        });
    }
    let labels: Vec<usize> = lbl_bytes[8..lbl_expected].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    Dataset::new(vec![rows * cols], features, labels, num_classes)
}

/// Writer for the same IDX format; round-trips through [`load_idx`].
pub fn write_idx(
    images_path: &Path,
    labels_path: &Path,
    rows: usize,
    cols: usize,
    pixels: &[u8],
    labels: &[u8],
) -> Result<()> {
    if pixels.len() != rows * cols * labels.len() {
        return Err(Error::shape(
            "write_idx",
            format!(
                "{} pixel bytes for {} samples of {rows}x{cols}",
                pixels.len(),
                labels.len()
            ),
        ));
    }
    let mut img = Vec::with_capacity(16 + pixels.len());
    img.write_u32::<BigEndian>(IDX_IMAGES_MAGIC)?;
    img.write_u32::<BigEndian>(labels.len() as u32)?;
    img.write_u32::<BigEndian>(rows as u32)?;
    img.write_u32::<BigEndian>(cols as u32)?;
    img.extend_from_slice(pixels);
    std::fs::write(images_path, img)?;

    let mut lbl = Vec::with_capacity(8 + labels.len());
    lbl.write_u32::<BigEndian>(IDX_LABELS_MAGIC)?;
    lbl.write_u32::<BigEndian>(labels.len() as u32)?;
    lbl.extend_from_slice(labels);
    std::fs::write(labels_path, lbl)?;
    Ok(())
}

/// Seeded Gaussian blobs: class `c` is centered at `separation * e_c` with
/// unit variance per coordinate. Deterministic in `seed`.
pub fn synthetic_dataset(
    seed: u64,
    classes: usize,
    dim: usize,
    n_per_class: usize,
    separation: f64,
) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::InvalidConfig("synthetic data needs >= 2 classes".into()));
    }
    if dim < classes {
        return Err(Error::InvalidConfig(format!(
            "synthetic feature dim {dim} must be >= number of classes {classes}"
        )));
    }
    if n_per_class == 0 {
        return Err(Error::InvalidConfig("n_per_class must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(classes * n_per_class * dim);
    let mut labels = Vec::with_capacity(classes * n_per_class);
    for c in 0..classes {
        for _ in 0..n_per_class {
            for d in 0..dim {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let center = if d == c { separation } else { 0.0 };
                features.push(center + noise);
            }
            labels.push(c);
        }
    }
    Dataset::new(vec![dim], features, labels, classes)
}

/// Per-client index lists over a train and a test dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub train_shards: Vec<Vec<usize>>,
    pub test_shards: Vec<Vec<usize>>,
    pub client_classes: Vec<Vec<usize>>,
}

fn shuffle(rng: &mut impl RngCore, v: &mut [usize]) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// Splits `v` (already shuffled) into `parts` near-equal contiguous chunks.
fn split_chunks(v: &[usize], parts: usize) -> Vec<Vec<usize>> {
    let base = v.len() / parts;
    let extra = v.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut at = 0;
    for p in 0..parts {
        let take = base + usize::from(p < extra);
        out.push(v[at..at + take].to_vec());
        at += take;
    }
    out
}

/// Label-shard non-IID partition: every class is shuffled and cut into
/// `K * classes_per_client / C` chunks; clients receive chunks of
/// `classes_per_client` distinct classes assigned round-robin over a seeded
/// class permutation. Train and test are chunked the same way, so shards are
/// pairwise disjoint and cover each dataset.
pub fn partition_noniid(
    train: &Dataset,
    test: &Dataset,
    k: usize,
    classes_per_client: usize,
    seed: u64,
) -> Result<Partition> {
    let c = train.num_classes;
    if classes_per_client == 0 || classes_per_client > c {
        return Err(Error::InvalidConfig(format!(
            "classes_per_client {classes_per_client} must be in 1..={c}"
        )));
    }
    if k == 0 {
        return Err(Error::InvalidConfig("need at least one client".into()));
    }
    if (k * classes_per_client) % c != 0 {
        let nearest = (1..)
            .flat_map(|d| [k.saturating_sub(d), k + d])
            .find(|&kk| kk >= 1 && (kk * classes_per_client) % c == 0)
            .unwrap();
        return Err(Error::InvalidConfig(format!(
            "K * classes_per_client = {} is not divisible by {c} classes; nearest valid K is {nearest}",
            k * classes_per_client
        )));
    }
    let chunks_per_class = k * classes_per_client / c;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut class_perm: Vec<usize> = (0..c).collect();
    shuffle(&mut rng, &mut class_perm);

    let collect_chunks = |ds: &Dataset, rng: &mut ChaCha8Rng, name: &str| -> Result<Vec<Vec<Vec<usize>>>> {
        let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); c];
        for (i, &y) in ds.labels().iter().enumerate() {
            if y >= c {
                return Err(Error::shape("partition_noniid", format!("{name} label {y}")));
            }
            per_class[y].push(i);
        }
        per_class
            .into_iter()
            .enumerate()
            .map(|(class, mut idx)| {
                if idx.len() < chunks_per_class {
                    return Err(Error::InvalidConfig(format!(
                        "{name} class {class} has {} samples, fewer than {chunks_per_class} chunks",
                        idx.len()
                    )));
                }
                shuffle(rng, &mut idx);
                Ok(split_chunks(&idx, chunks_per_class))
            })
            .collect()
    };
    let mut train_chunks = collect_chunks(train, &mut rng, "train")?;
    let mut test_chunks = collect_chunks(test, &mut rng, "test")?;

    let mut train_shards = vec![Vec::new(); k];
    let mut test_shards = vec![Vec::new(); k];
    let mut client_classes = vec![Vec::new(); k];
    let mut next_chunk = vec![0usize; c];
    for slot in 0..k * classes_per_client {
        let client = slot / classes_per_client;
        let class = class_perm[slot % c];
        let chunk = next_chunk[class];
        next_chunk[class] += 1;
        train_shards[client].extend(std::mem::take(&mut train_chunks[class][chunk]));
        test_shards[client].extend(std::mem::take(&mut test_chunks[class][chunk]));
        client_classes[client].push(class);
    }
    Ok(Partition {
        train_shards,
        test_shards,
        client_classes,
    })
}

/// Uniform mini-batch: without replacement when the shard is large enough,
/// otherwise with replacement (flagged). Deterministic per RNG stream state.
pub fn sample_batch(
    shard: &[usize],
    batch_size: usize,
    rng: &mut impl RngCore,
) -> Result<(Vec<usize>, bool)> {
    if shard.is_empty() {
        return Err(Error::shape("sample_batch", "empty shard"));
    }
    if batch_size == 0 {
        return Err(Error::shape("sample_batch", "batch_size must be >= 1"));
    }
    if batch_size <= shard.len() {
        // Partial Fisher-Yates over a scratch copy.
        let mut scratch: Vec<usize> = shard.to_vec();
        for i in 0..batch_size {
            let j = rng.random_range(i..scratch.len());
            scratch.swap(i, j);
        }
        scratch.truncate(batch_size);
        Ok((scratch, false))
    } else {
        let picks = (0..batch_size)
            .map(|_| shard[rng.random_range(0..shard.len())])
            .collect();
        Ok((picks, true))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn idx_fixture_round_trip() {
        let dir = tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lbl = dir.path().join("lbl.idx");
        // Two 2x2 images built byte by byte.
        let pixels = [0u8, 51, 102, 153, 204, 255, 10, 20];
        let labels = [3u8, 7];
        write_idx(&img, &lbl, 2, 2, &pixels, &labels).unwrap();

        let ds = load_idx(&img, &lbl).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.feature_dim(), 4);
        assert_eq!(ds.label(0), 3);
        assert_eq!(ds.label(1), 7);
        assert_eq!(ds.num_classes, 8);
        for (i, &p) in pixels.iter().enumerate() {
            let v = ds.feature(i / 4)[i % 4];
            assert_eq!(v, p as f64 / 255.0);
        }

        // Write-then-read equals original, byte for byte.
        let img2 = dir.path().join("img2.idx");
        let lbl2 = dir.path().join("lbl2.idx");
        let recovered: Vec<u8> = (0..2)
            .flat_map(|i| ds.feature(i).iter().map(|v| (v * 255.0).round() as u8).collect::<Vec<_>>())
            .collect();
        let rec_labels: Vec<u8> = ds.labels().iter().map(|&l| l as u8).collect();
        write_idx(&img2, &lbl2, 2, 2, &recovered, &rec_labels).unwrap();
        assert_eq!(std::fs::read(&img).unwrap(), std::fs::read(&img2).unwrap());
        assert_eq!(std::fs::read(&lbl).unwrap(), std::fs::read(&lbl2).unwrap());
    }

    #[test]
    fn idx_wrong_magic_names_both_values() {
        let dir = tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lbl = dir.path().join("lbl.idx");
        write_idx(&img, &lbl, 1, 1, &[1], &[0]).unwrap();
        // Corrupt the image magic.
        let mut bytes = std::fs::read(&img).unwrap();
        bytes[3] = 0x99;
        std::fs::write(&img, &bytes).unwrap();
        match load_idx(&img, &lbl) {
            Err(Error::IdxBadMagic { expected, actual, .. }) => {
                assert_eq!(expected, IDX_IMAGES_MAGIC);
                assert_eq!(actual, 0x0000_0899);
            }
            other => panic!("expected bad magic, got {other:?}"),
        }
    }

    #[test]
    fn idx_count_mismatch() {
        let dir = tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lbl = dir.path().join("lbl.idx");
        write_idx(&img, &lbl, 1, 1, &[1, 2], &[0, 1]).unwrap();
        // Rewrite labels with a single entry.
        let lbl1 = dir.path().join("lbl1.idx");
        let img_scratch = dir.path().join("scratch.idx");
        write_idx(&img_scratch, &lbl1, 1, 1, &[1], &[0]).unwrap();
        match load_idx(&img, &lbl1) {
            Err(Error::IdxCountMismatch { images: 2, labels: 1 }) => {}
            other => panic!("expected count mismatch, got {other:?}"),
        }
    }

    #[test]
    fn idx_truncated_reports_offsets() {
        let dir = tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lbl = dir.path().join("lbl.idx");
        write_idx(&img, &lbl, 2, 2, &[1, 2, 3, 4], &[0]).unwrap();
        let bytes = std::fs::read(&img).unwrap();
        std::fs::write(&img, &bytes[..18]).unwrap();
        match load_idx(&img, &lbl) {
            Err(Error::IdxTruncated { expected: 20, actual: 18, .. }) => {}
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn synthetic_separated_blobs_are_centroid_separable() {
        let ds = synthetic_dataset(5, 2, 4, 200, 10.0).unwrap();
        // Nearest-centroid oracle on the known centers.
        let mut correct = 0;
        for i in 0..ds.len() {
            let x = ds.feature(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..2 {
                let d: f64 = x
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        let center = if j == c { 10.0 } else { 0.0 };
                        (v - center) * (v - center)
                    })
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if best == ds.label(i) {
                correct += 1;
            }
        }
        let acc = correct as f64 / ds.len() as f64;
        assert!(acc > 0.99, "nearest-centroid accuracy {acc}");
    }

    #[test]
    fn synthetic_zero_separation_is_chance_level() {
        let ds = synthetic_dataset(6, 4, 8, 500, 0.0).unwrap();
        let mut correct = 0;
        for i in 0..ds.len() {
            let x = ds.feature(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..4 {
                // Centroids of the generating distribution are all zero at
                // separation 0; pretend class centers at e_c as the
                // classifier would have learned.
                let d: f64 = x
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        let center = if j == c { 1.0 } else { 0.0 };
                        (v - center) * (v - center)
                    })
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if best == ds.label(i) {
                correct += 1;
            }
        }
        let acc = correct as f64 / ds.len() as f64;
        assert!((acc - 0.25).abs() < 0.1, "accuracy {acc} not near chance");
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = synthetic_dataset(9, 3, 5, 10, 2.0).unwrap();
        let b = synthetic_dataset(9, 3, 5, 10, 2.0).unwrap();
        assert_eq!(a, b);
        let c = synthetic_dataset(10, 3, 5, 10, 2.0).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn synthetic_validation() {
        assert!(synthetic_dataset(1, 1, 4, 10, 1.0).is_err());
        assert!(synthetic_dataset(1, 5, 4, 10, 1.0).is_err());
        assert!(synthetic_dataset(1, 2, 4, 0, 1.0).is_err());
    }

    fn toy_pair(classes: usize, n_train: usize, n_test: usize) -> (Dataset, Dataset) {
        (
            synthetic_dataset(11, classes, classes, n_train, 3.0).unwrap(),
            synthetic_dataset(12, classes, classes, n_test, 3.0).unwrap(),
        )
    }

    #[test]
    fn partition_matches_twenty_client_setup() {
        let (train, test) = toy_pair(10, 40, 8);
        let p = partition_noniid(&train, &test, 20, 2, 13).unwrap();
        assert_eq!(p.train_shards.len(), 20);
        // 40 chunks, 4 per class: every class appears in exactly 4 clients.
        let mut class_count = vec![0usize; 10];
        for classes in &p.client_classes {
            assert_eq!(classes.len(), 2);
            assert_ne!(classes[0], classes[1]);
            for &c in classes {
                class_count[c] += 1;
            }
        }
        assert!(class_count.iter().all(|&n| n == 4));
        // Each shard really contains exactly the client's two classes.
        for (k, shard) in p.train_shards.iter().enumerate() {
            let mut seen: Vec<usize> = shard.iter().map(|&i| train.label(i)).collect();
            seen.sort_unstable();
            seen.dedup();
            let mut expect = p.client_classes[k].clone();
            expect.sort_unstable();
            assert_eq!(seen, expect);
        }
    }

    #[test]
    fn partition_pure_classes_when_one_per_client() {
        let (train, test) = toy_pair(4, 12, 4);
        let p = partition_noniid(&train, &test, 4, 1, 14).unwrap();
        for (k, shard) in p.train_shards.iter().enumerate() {
            assert!(shard.iter().all(|&i| train.label(i) == p.client_classes[k][0]));
        }
    }

    #[test]
    fn partition_covers_and_is_disjoint() {
        let (train, test) = toy_pair(5, 21, 7);
        let p = partition_noniid(&train, &test, 5, 2, 15).unwrap();
        for (shards, ds_len) in [(&p.train_shards, train.len()), (&p.test_shards, test.len())] {
            let mut all: Vec<usize> = shards.iter().flatten().copied().collect();
            all.sort_unstable();
            let dedup_len = {
                let mut v = all.clone();
                v.dedup();
                v.len()
            };
            assert_eq!(all.len(), dedup_len, "shards overlap");
            assert_eq!(all, (0..ds_len).collect::<Vec<_>>(), "shards do not cover");
        }
    }

    #[test]
    fn partition_divisibility_error_proposes_nearest_k() {
        let (train, test) = toy_pair(10, 40, 8);
        match partition_noniid(&train, &test, 19, 2, 16) {
            Err(Error::InvalidConfig(msg)) => {
                assert!(msg.contains("nearest valid K is 20"), "{msg}");
            }
            other => panic!("expected divisibility error, got {other:?}"),
        }
    }

    #[test]
    fn sample_batch_full_shard_is_permutation() {
        let shard: Vec<usize> = (100..110).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (batch, with_replacement) = sample_batch(&shard, 10, &mut rng).unwrap();
        assert!(!with_replacement);
        let mut sorted = batch.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, shard);
    }

    #[test]
    fn sample_batch_is_stream_deterministic() {
        let shard: Vec<usize> = (0..50).collect();
        let mut a = ChaCha8Rng::seed_from_u64(18);
        let mut b = ChaCha8Rng::seed_from_u64(18);
        assert_eq!(
            sample_batch(&shard, 8, &mut a).unwrap(),
            sample_batch(&shard, 8, &mut b).unwrap()
        );
    }

    #[test]
    fn sample_batch_small_shard_uses_replacement() {
        let shard = vec![1, 2, 3];
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let (batch, with_replacement) = sample_batch(&shard, 5, &mut rng).unwrap();
        assert!(with_replacement);
        assert_eq!(batch.len(), 5);
        assert!(batch.iter().all(|i| shard.contains(i)));
        assert!(sample_batch(&[], 1, &mut rng).is_err());
    }

    #[test]
    fn sample_batch_frequencies_are_uniform() {
        let shard: Vec<usize> = (0..10).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut counts = vec![0usize; 10];
        for _ in 0..10_000 {
            let (batch, _) = sample_batch(&shard, 1, &mut rng).unwrap();
            counts[batch[0]] += 1;
        }
        // Binomial(n=10^4, p=0.1): sigma = 30; allow 3 sigma.
        for (i, &n) in counts.iter().enumerate() {
            assert!((n as f64 - 1000.0).abs() <= 90.0, "index {i} drawn {n} times");
        }
    }
}
