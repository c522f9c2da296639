use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::engine::{FeatureMap, Shape};
use crate::error::{Error, Result};

pub const CIFAR_RECORD: usize = 3073;
pub const CIFAR_SIDE: usize = 32;
pub const SYNTH_SIDE: usize = 8;

/// Labelled images stored channel-planar, one after another.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    /// Batch of the given samples, each passed through `transform`.
    pub fn batch(
        &self,
        indices: &[usize],
        mut transform: impl FnMut(usize, &[f64]) -> Vec<f64>,
    ) -> Result<(FeatureMap<f64>, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend(transform(i, self.image(i)));
            labels.push(self.labels[i]);
        }
        let shape = Shape::new(indices.len(), self.channels, self.height, self.width);
        Ok((FeatureMap::from_vec(shape, data)?, labels))
    }

    /// First `len - n` samples and the last `n`.
    pub fn split_tail(&self, n: usize) -> (Dataset, Dataset) {
        let keep = self.len() - n.min(self.len());
        let cut = keep * self.image_len();
        let part = |images: &[f64], labels: &[usize]| Dataset {
            images: images.to_vec(),
            labels: labels.to_vec(),
            ..self.clone_meta()
        };
        (
            part(&self.images[..cut], &self.labels[..keep]),
            part(&self.images[cut..], &self.labels[keep..]),
        )
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            images: Vec::new(),
            labels: Vec::new(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            classes: self.classes,
        }
    }

    /// Normalizes every channel to zero mean and unit variance over the set.
    pub fn normalize(&mut self) {
        let plane = self.height * self.width;
        let count = (self.len() * plane) as f64;
        for c in 0..self.channels {
            let starts: Vec<usize> = (0..self.len())
                .map(|i| (i * self.channels + c) * plane)
                .collect();
            let mean = starts
                .iter()
                .map(|&s| self.images[s..s + plane].iter().sum::<f64>())
                .sum::<f64>()
                / count;
            let var = starts
                .iter()
                .map(|&s| {
                    self.images[s..s + plane]
                        .iter()
                        .map(|v| (v - mean).powi(2))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / count;
            let inv = 1.0 / var.sqrt().max(1e-12);
            for s in starts {
                self.images[s..s + plane]
                    .iter_mut()
                    .for_each(|v| *v = (*v - mean) * inv);
            }
        }
    }
}

/// Parses CIFAR-10 binary records (label byte, then 3072 channel-planar
/// pixel bytes). `path` is one batch file or a directory of `*.bin` files.
pub fn load_cifar10(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "bin"))
            .collect();
        files.sort();
        files
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::Ingestion {
            offset: 0,
            message: format!("no .bin files in {}", path.display()),
        });
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for file in &files {
        let bytes = fs::read(file)?;
        parse_cifar_records(&bytes, &mut images, &mut labels).map_err(|e| match e {
            Error::Ingestion { offset, message } => Error::Ingestion {
                offset,
                message: format!("{}: {message}", file.display()),
            },
            other => other,
        })?;
    }
    let mut data = Dataset {
        images,
        labels,
        channels: 3,
        height: CIFAR_SIDE,
        width: CIFAR_SIDE,
        classes: 10,
    };
    data.normalize();
    Ok(data)
}

pub fn parse_cifar_records(
    bytes: &[u8],
    images: &mut Vec<f64>,
    labels: &mut Vec<usize>,
) -> Result<usize> {
    let whole = bytes.len() / CIFAR_RECORD * CIFAR_RECORD;
    if whole != bytes.len() || bytes.is_empty() {
        return Err(Error::Ingestion {
            offset: whole as u64,
            message: format!(
                "{} trailing bytes do not form a {CIFAR_RECORD}-byte record",
                bytes.len() - whole
            ),
        });
    }
    for (i, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if record[0] > 9 {
            return Err(Error::Ingestion {
                offset: (i * CIFAR_RECORD) as u64,
                message: format!("label {} outside 0..=9", record[0]),
            });
        }
        labels.push(record[0] as usize);
        images.extend(record[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(bytes.len() / CIFAR_RECORD)
}

/// Zero-pads by 4 pixels, takes a random crop of the original size and
/// mirrors horizontally with probability one half.
pub fn augment(image: &[f64], channels: usize, height: usize, width: usize, seed: u64) -> Vec<f64> {
    const PAD: usize = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let oy = rng.gen_range(0..=2 * PAD);
    let ox = rng.gen_range(0..=2 * PAD);
    let flip = rng.gen_bool(0.5);
    let mut out = vec![0.0; image.len()];
    for c in 0..channels {
        for y in 0..height {
            let sy = (y + oy) as isize - PAD as isize;
            if sy < 0 || sy >= height as isize {
                continue;
            }
            for x in 0..width {
                let xx = if flip { width - 1 - x } else { x };
                let sx = (xx + ox) as isize - PAD as isize;
                if sx < 0 || sx >= width as isize {
                    continue;
                }
                out[(c * height + y) * width + x] =
                    image[(c * height + sy as usize) * width + sx as usize];
            }
        }
    }
    out
}

/// Balanced `SYNTH_SIDE x SYNTH_SIDE` three-channel images: each class has
/// its own channel means, every pixel adds unit Gaussian noise.
pub fn synth_dataset(classes: usize, samples: usize, seed: u64) -> Result<Dataset> {
    if classes < 2 || samples < classes {
        return Err(Error::usage(
            "synthetic data needs >= 2 classes and >= 1 sample per class",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let channels = 3;
    let means: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            (0..channels)
                .map(|_| {
                    1.5 * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
                })
                .collect::<Vec<f64>>()
        })
        .collect();
    let mut labels: Vec<usize> = (0..samples).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let plane = SYNTH_SIDE * SYNTH_SIDE;
    let mut images = Vec::with_capacity(samples * channels * plane);
    for &y in &labels {
        for mean in means[y].iter() {
            for _ in 0..plane {
                let z: f64 = StandardNormal.sample(&mut rng);
                images.push(mean + z);
            }
        }
    }
    Ok(Dataset {
        images,
        labels,
        channels,
        height: SYNTH_SIDE,
        width: SYNTH_SIDE,
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_count_of_a_batch_file() {
        assert_eq!(30_730_000 / CIFAR_RECORD, 10_000);
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[CIFAR_RECORD] = 7;
        let (mut im, mut lb) = (Vec::new(), Vec::new());
        assert_eq!(parse_cifar_records(&bytes, &mut im, &mut lb).unwrap(), 2);
        assert_eq!(lb, vec![0, 7]);
        assert_eq!(im.len(), 2 * 3072);
    }

    #[test]
    fn truncated_record_reports_offset() {
        let bytes = vec![1u8; CIFAR_RECORD + 100];
        let err = parse_cifar_records(&bytes, &mut Vec::new(), &mut Vec::new()).unwrap_err();
        match err {
            Error::Ingestion { offset, .. } => assert_eq!(offset, CIFAR_RECORD as u64),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_label_reports_record_offset() {
        let mut bytes = vec![0u8; 3 * CIFAR_RECORD];
        bytes[2 * CIFAR_RECORD] = 12;
        let err = parse_cifar_records(&bytes, &mut Vec::new(), &mut Vec::new()).unwrap_err();
        assert!(
            matches!(err, Error::Ingestion { offset, .. } if offset == 2 * CIFAR_RECORD as u64)
        );
    }

    #[test]
    fn augmentation_is_seeded() {
        let img: Vec<f64> = (0..3 * 8 * 8).map(|v| v as f64).collect();
        assert_eq!(augment(&img, 3, 8, 8, 5), augment(&img, 3, 8, 8, 5));
        let variants: std::collections::HashSet<Vec<u64>> = (0..20)
            .map(|s| {
                augment(&img, 3, 8, 8, s)
                    .iter()
                    .map(|v| v.to_bits())
                    .collect()
            })
            .collect();
        assert!(variants.len() > 1);
    }

    #[test]
    fn synthetic_classes_are_balanced() {
        let d = synth_dataset(4, 400, 1).unwrap();
        assert_eq!(d.class_counts(), vec![100; 4]);
        assert_eq!(d.images.len(), 400 * 3 * 64);
        assert_eq!(synth_dataset(4, 400, 1).unwrap(), d);
    }

    #[test]
    fn normalized_channels_have_unit_moments() {
        let mut d = synth_dataset(2, 50, 3).unwrap();
        d.normalize();
        let plane = 64;
        let vals: Vec<f64> = (0..d.len())
            .flat_map(|i| d.image(i)[..plane].to_vec())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
    }
}
