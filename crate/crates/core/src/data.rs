//! Labeled image samples, IDX / CIFAR-binary readers and a synthetic
//! Gaussian-blob generator with ground-truth atypical samples.

use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD_LEN: usize = 1 + 3 * 32 * 32;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad IDX magic, expected {expected:#010x}, found {actual:#010x}")]
    BadMagic { path: PathBuf, expected: u32, actual: u32 },
    #[error("{path}: truncated, expected {expected} bytes of payload, found {actual}")]
    Truncated { path: PathBuf, expected: usize, actual: usize },
    #[error("image file holds {images} records but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{path}: length {len} is not a multiple of the {CIFAR_RECORD_LEN}-byte record size")]
    CifarLength { path: PathBuf, len: usize },
    #[error("{path}: record {record} has label {label}, expected < 10")]
    CifarLabel { path: PathBuf, record: usize, label: u8 },
    #[error("synthetic dataset: {0}")]
    Synth(String),
}

/// One labeled training image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    /// Owning client in a simulated federation; 0 when centralized.
    pub client: u32,
    /// `[channels, height, width]`, values in `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    /// Ground-truth atypicality (synthetic data only).
    pub atypical: bool,
    /// Label deliberately flipped (synthetic data only).
    #[serde(default)]
    pub mislabeled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub classes: usize,
    pub input_shape: [usize; 3],
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    fn with_samples(&self, samples: Vec<Sample>) -> Self {
        Self {
            samples,
            classes: self.classes,
            input_shape: self.input_shape,
        }
    }

    /// First `n` samples (all of them if `n` exceeds the length).
    pub fn take(&self, n: usize) -> Self {
        self.with_samples(self.samples.iter().take(n).cloned().collect())
    }

    /// Seeded shuffle, then the first `round(fraction·n)` samples form the
    /// held-out part. Returns `(train, held_out)`.
    pub fn split(&self, fraction: f64, seed: u64) -> (Self, Self) {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
        let n_out = ((fraction * self.len() as f64).round() as usize).min(self.len());
        let mut held: Vec<usize> = idx[..n_out].to_vec();
        let mut train: Vec<usize> = idx[n_out..].to_vec();
        held.sort_unstable();
        train.sort_unstable();
        let pick = |ix: &[usize]| ix.iter().map(|&i| self.samples[i].clone()).collect();
        (self.with_samples(pick(&train)), self.with_samples(pick(&held)))
    }

    pub fn retain_ids(&self, keep: &std::collections::BTreeSet<u64>) -> Self {
        self.with_samples(self.samples.iter().filter(|s| keep.contains(&s.id)).cloned().collect())
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>, DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io)?;
    let mut buf = Vec::new();
    if path.extension().is_some_and(|e| e == "gz") {
        GzDecoder::new(BufReader::new(file)).read_to_end(&mut buf).map_err(io)?;
    } else {
        BufReader::new(file).read_to_end(&mut buf).map_err(io)?;
    }
    Ok(buf)
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| DataError::Truncated {
            path: path.to_path_buf(),
            expected: at + 4,
            actual: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<(), DataError> {
    let actual = be_u32(bytes, 0, path)?;
    if actual != expected {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            expected,
            actual,
        });
    }
    Ok(())
}

/// Parses an IDX image file (`0x00000803`, u8 `[n, rows, cols]`) and its
/// label file (`0x00000801`). Files ending in `.gz` are decompressed first.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let (ipath, lpath) = (images.as_ref(), labels.as_ref());
    let ib = read_all(ipath)?;
    let lb = read_all(lpath)?;
    check_magic(&ib, IDX_IMAGES_MAGIC, ipath)?;
    check_magic(&lb, IDX_LABELS_MAGIC, lpath)?;
    let n = be_u32(&ib, 4, ipath)? as usize;
    let rows = be_u32(&ib, 8, ipath)? as usize;
    let cols = be_u32(&ib, 12, ipath)? as usize;
    let n_labels = be_u32(&lb, 4, lpath)? as usize;
    if n != n_labels {
        return Err(DataError::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    let pixels = rows * cols;
    let payload = &ib[16..];
    if payload.len() < n * pixels {
        return Err(DataError::Truncated {
            path: ipath.to_path_buf(),
            expected: n * pixels,
            actual: payload.len(),
        });
    }
    let label_bytes = &lb[8..];
    if label_bytes.len() < n {
        return Err(DataError::Truncated {
            path: lpath.to_path_buf(),
            expected: n,
            actual: label_bytes.len(),
        });
    }
    let samples: Vec<Sample> = (0..n)
        .map(|i| Sample {
            id: i as u64,
            client: 0,
            image: Tensor::from_raw(
                vec![1, rows, cols],
                payload[i * pixels..(i + 1) * pixels].iter().map(|&b| f64::from(b) / 255.0).collect(),
            ),
            label: usize::from(label_bytes[i]),
            atypical: false,
            mislabeled: false,
        })
        .collect();
    let classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
    Ok(Dataset {
        samples,
        classes,
        input_shape: [1, rows, cols],
    })
}

/// Parses CIFAR-10 binary records: one label byte then 3072 pixel bytes,
/// channel-major R, G, B planes of 32×32.
pub fn load_cifar_bin(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let bytes = read_all(path)?;
    if bytes.len() % CIFAR_RECORD_LEN != 0 {
        return Err(DataError::CifarLength {
            path: path.to_path_buf(),
            len: bytes.len(),
        });
    }
    let samples = bytes
        .chunks_exact(CIFAR_RECORD_LEN)
        .enumerate()
        .map(|(i, rec)| {
            if rec[0] >= 10 {
                return Err(DataError::CifarLabel {
                    path: path.to_path_buf(),
                    record: i,
                    label: rec[0],
                });
            }
            Ok(Sample {
                id: i as u64,
                client: 0,
                image: Tensor::from_raw(vec![3, 32, 32], rec[1..].iter().map(|&b| f64::from(b) / 255.0).collect()),
                label: usize::from(rec[0]),
                atypical: false,
                mislabeled: false,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset {
        samples,
        classes: 10,
        input_shape: [3, 32, 32],
    })
}

/// Parameters of the synthetic Gaussian-blob generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub n: usize,
    pub classes: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Exactly `round(fraction · n)` samples are generated atypical.
    pub atypical_fraction: f64,
    /// Blob radius (Gaussian sd) in pixels.
    pub blob_sigma: f64,
    /// Per-sample sd of blob-centre jitter, pixels.
    pub jitter: f64,
    /// Additive pixel noise sd.
    pub noise: f64,
    /// Displacement of atypical blobs from the class centres, pixels.
    pub atypical_offset: f64,
    /// Contrast multiplier applied to atypical samples.
    pub atypical_contrast: f64,
    /// Exactly `round(label_noise · n)` typical samples get a wrong label.
    pub label_noise: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n: 1000,
            classes: 10,
            image_size: 16,
            channels: 1,
            atypical_fraction: 0.1,
            blob_sigma: 1.5,
            jitter: 0.75,
            noise: 0.05,
            atypical_offset: 5.0,
            atypical_contrast: 0.7,
            label_noise: 0.0,
        }
    }
}

/// Class `c` is drawn as two Gaussian blobs at class-specific centres;
/// samples jitter the centres and vary the amplitude. Atypical samples of a
/// class move both blobs by `atypical_offset` along one class-specific
/// direction and lose contrast, forming a rare sub-mode of that class.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset, DataError> {
    if spec.classes < 2 {
        return Err(DataError::Synth(format!("need at least 2 classes, got {}", spec.classes)));
    }
    if spec.image_size < 4 || spec.channels == 0 {
        return Err(DataError::Synth("image_size must be >= 4 and channels >= 1".into()));
    }
    if !(0.0..=1.0).contains(&spec.atypical_fraction) {
        return Err(DataError::Synth("atypical_fraction must lie in [0, 1]".into()));
    }
    if !(0.0..=1.0).contains(&(spec.atypical_fraction + spec.label_noise)) || spec.label_noise < 0.0 {
        return Err(DataError::Synth("label_noise must be >= 0 with atypical_fraction + label_noise <= 1".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let s = spec.image_size as f64;
    let (lo, hi) = (0.2 * s, 0.8 * s);
    let centres: Vec<[(f64, f64); 2]> = (0..spec.classes)
        .map(|_| {
            [
                (rng.random_range(lo..hi), rng.random_range(lo..hi)),
                (rng.random_range(lo..hi), rng.random_range(lo..hi)),
            ]
        })
        .collect();
    // Per-class channel tint so multi-channel data is not just replicated.
    let tints: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| (0..spec.channels).map(|_| rng.random_range(0.6..1.0)).collect())
        .collect();
    let shifts: Vec<(f64, f64)> = (0..spec.classes)
        .map(|_| {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            (spec.atypical_offset * angle.cos(), spec.atypical_offset * angle.sin())
        })
        .collect();

    let n_atypical = (spec.atypical_fraction * spec.n as f64).round() as usize;
    let mut order: Vec<usize> = (0..spec.n).collect();
    order.shuffle(&mut rng);
    let mut atypical = vec![false; spec.n];
    for &i in &order[..n_atypical.min(spec.n)] {
        atypical[i] = true;
    }
    let n_flipped = (spec.label_noise * spec.n as f64).round() as usize;
    let mut mislabeled = vec![false; spec.n];
    for &i in order.iter().skip(n_atypical).take(n_flipped) {
        mislabeled[i] = true;
    }

    let jitter = Normal::new(0.0, spec.jitter.max(1e-12)).map_err(|e| DataError::Synth(e.to_string()))?;
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).map_err(|e| DataError::Synth(e.to_string()))?;
    let two_s2 = 2.0 * spec.blob_sigma * spec.blob_sigma;
    let size = spec.image_size;
    let samples = (0..spec.n)
        .map(|i| {
            let label = i % spec.classes;
            let mut blobs = centres[label];
            let mut contrast = rng.random_range(0.8..1.0);
            if atypical[i] {
                let (dx, dy) = shifts[label];
                for b in &mut blobs {
                    b.0 += dx;
                    b.1 += dy;
                }
                contrast *= spec.atypical_contrast;
            }
            for b in &mut blobs {
                b.0 += jitter.sample(&mut rng);
                b.1 += jitter.sample(&mut rng);
            }
            let mut data = Vec::with_capacity(spec.channels * size * size);
            for ch in 0..spec.channels {
                for y in 0..size {
                    for x in 0..size {
                        let (fx, fy) = (x as f64, y as f64);
                        let v = blobs
                            .iter()
                            .zip([1.0, 0.6])
                            .map(|(b, amp)| amp * (-((fx - b.0).powi(2) + (fy - b.1).powi(2)) / two_s2).exp())
                            .sum::<f64>();
                        let px = contrast * tints[label][ch] * v + noise.sample(&mut rng);
                        data.push(px.clamp(0.0, 1.0));
                    }
                }
            }
            let label = if mislabeled[i] {
                (label + rng.random_range(1..spec.classes)) % spec.classes
            } else {
                label
            };
            Sample {
                id: i as u64,
                client: 0,
                image: Tensor::from_raw(vec![spec.channels, size, size], data),
                label,
                atypical: atypical[i],
                mislabeled: mislabeled[i],
            }
        })
        .collect();
    Ok(Dataset {
        samples,
        classes: spec.classes,
        input_shape: [spec.channels, size, size],
    })
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for w in [IDX_IMAGES_MAGIC, n, rows, cols] {
            v.extend_from_slice(&w.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> PathBuf {
        let p = dir.join(name);
        File::create(&p).unwrap().write_all(bytes).unwrap();
        p
    }

    #[test]
    fn idx_hand_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let px = [0u8, 51, 102, 255, 1, 2, 3, 4];
        let i = write(dir.path(), "img", &idx_images(2, 2, 2, &px));
        let l = write(dir.path(), "lbl", &idx_labels(&[7, 2]));
        let ds = load_idx(&i, &l).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.input_shape, [1, 2, 2]);
        assert_eq!(ds.samples[0].image.data(), &[0.0, 51.0 / 255.0, 102.0 / 255.0, 1.0]);
        assert_eq!(ds.samples[1].image.data(), &[1.0 / 255.0, 2.0 / 255.0, 3.0 / 255.0, 4.0 / 255.0]);
        assert_eq!(ds.labels(), vec![7, 2]);
    }

    #[test]
    fn idx_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut bad = idx_images(1, 1, 1, &[0]);
        bad[3] = 0x01;
        let i = write(dir.path(), "bad", &bad);
        let l = write(dir.path(), "lbl", &idx_labels(&[0]));
        match load_idx(&i, &l).unwrap_err() {
            DataError::BadMagic { expected, actual, .. } => {
                assert_eq!(expected, 0x803);
                assert_eq!(actual, 0x801);
            }
            e => panic!("{e}"),
        }
        let i = write(dir.path(), "short", &idx_images(2, 2, 2, &[0; 5]));
        let l2 = write(dir.path(), "l2", &idx_labels(&[0, 1]));
        assert!(matches!(load_idx(&i, &l2), Err(DataError::Truncated { .. })));
        let i = write(dir.path(), "ok", &idx_images(2, 1, 1, &[0, 1]));
        assert!(matches!(
            load_idx(&i, &l),
            Err(DataError::CountMismatch { images: 2, labels: 1 })
        ));
    }

    #[test]
    fn idx_empty_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let i = write(dir.path(), "img", &idx_images(0, 28, 28, &[]));
        let l = write(dir.path(), "lbl", &idx_labels(&[]));
        let ds = load_idx(&i, &l).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn idx_gzip() {
        let dir = tempfile::tempdir().unwrap();
        let mut gz = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        gz.write_all(&idx_images(1, 1, 2, &[255, 0])).unwrap();
        let i = write(dir.path(), "img.gz", &gz.finish().unwrap());
        let l = write(dir.path(), "lbl", &idx_labels(&[1]));
        assert_eq!(load_idx(&i, &l).unwrap().samples[0].image.data(), &[1.0, 0.0]);
    }

    #[test]
    fn cifar_records() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![0u8; CIFAR_RECORD_LEN];
        rec[0] = 3;
        rec[1] = 255;
        let p = write(dir.path(), "one.bin", &rec);
        let ds = load_cifar_bin(&p).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.samples[0].label, 3);
        assert_eq!(ds.samples[0].image.data()[0], 1.0);
        assert_eq!(ds.samples[0].image.shape(), &[3, 32, 32]);

        rec.push(0);
        let p = write(dir.path(), "long.bin", &rec);
        assert!(matches!(load_cifar_bin(&p), Err(DataError::CifarLength { len: 3074, .. })));
        let mut rec = vec![0u8; CIFAR_RECORD_LEN];
        rec[0] = 10;
        let p = write(dir.path(), "label.bin", &rec);
        assert!(matches!(load_cifar_bin(&p), Err(DataError::CifarLabel { label: 10, .. })));
    }

    #[test]
    fn synth_determinism_and_atypical_count() {
        let spec = SynthSpec {
            n: 1000,
            ..SynthSpec::default()
        };
        let a = synth_dataset(&spec, 5).unwrap();
        let b = synth_dataset(&spec, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples.iter().filter(|s| s.atypical).count(), 100);
        assert!(a.samples.iter().all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
        let none = synth_dataset(
            &SynthSpec {
                atypical_fraction: 0.0,
                ..spec.clone()
            },
            5,
        )
        .unwrap();
        assert!(none.samples.iter().all(|s| !s.atypical));
        assert!(synth_dataset(&SynthSpec { classes: 1, ..spec }, 5).is_err());
    }

    #[test]
    fn split_is_a_partition() {
        let ds = synth_dataset(
            &SynthSpec {
                n: 50,
                ..SynthSpec::default()
            },
            1,
        )
        .unwrap();
        let (tr, te) = ds.split(0.2, 9);
        assert_eq!(te.len(), 10);
        assert_eq!(tr.len(), 40);
        let mut ids: Vec<u64> = tr.samples.iter().chain(&te.samples).map(|s| s.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..50).collect::<Vec<_>>());
    }
}
