//! Dataset ingestion and batch assembly.
//!
//! Two binary formats are parsed bit-exactly: the IDX container (big-endian
//! magic + dims + raw bytes) and the CIFAR-10 record format (3073-byte
//! records, one label byte then 3072 channel-planar pixels). Pixels are
//! scaled to `[0, 1]` on load; augmentation, channel replication, padding
//! and normalization happen at batch-assembly time.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::tensor::Tensor;
use crate::{Error, Result};

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 3073;

pub const MNIST_MEAN: [f32; 3] = [0.1307; 3];
pub const MNIST_STD: [f32; 3] = [0.3081; 3];
pub const CIFAR10_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

/// Images in `[0, 1]` with integer labels. Kept as a flat buffer so an
/// empty dataset is representable.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    pixels: Vec<f32>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
    pub num_classes: usize,
}

impl LabeledDataset {
    /// Assemble a dataset from raw parts, validating the counts.
    pub fn from_parts(
        pixels: Vec<f32>,
        channels: usize,
        height: usize,
        width: usize,
        labels: Vec<u8>,
        num_classes: usize,
    ) -> Result<Self> {
        if pixels.len() != labels.len() * channels * height * width {
            return Err(Error::Consistency(format!(
                "{} pixels cannot hold {} samples of {}x{}x{}",
                pixels.len(),
                labels.len(),
                channels,
                height,
                width
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(LabeledDataset {
            pixels,
            channels,
            height,
            width,
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

    fn sample_stride(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let s = self.sample_stride();
        &self.pixels[i * s..(i + 1) * s]
    }

    /// Keep only the first `n` samples (for subset experiments).
    pub fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.labels.truncate(n);
            self.pixels.truncate(n * self.sample_stride());
        }
    }

    /// Stack the given samples into a `[B, C, H, W]` tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        if indices.is_empty() {
            return Err(Error::Usage("cannot gather an empty batch".into()));
        }
        let s = self.sample_stride();
        let mut data = Vec::with_capacity(indices.len() * s);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
            labels.push(self.labels[i] as usize);
        }
        let t = Tensor::from_vec(
            &[indices.len(), self.channels, self.height, self.width],
            data,
        )?;
        Ok((t, labels))
    }
}

fn read_be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    if at + 4 > bytes.len() {
        return Err(Error::Consistency(format!(
            "{what}: file truncated at byte {at}"
        )));
    }
    Ok(u32::from_be_bytes([
        bytes[at],
        bytes[at + 1],
        bytes[at + 2],
        bytes[at + 3],
    ]))
}

/// Load an IDX image/label file pair (the MNIST container format).
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let img = fs::read(&images_path)?;
    let lab = fs::read(&labels_path)?;

    let magic = read_be_u32(&img, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "images magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )));
    }
    let n = read_be_u32(&img, 4, "images")? as usize;
    let rows = read_be_u32(&img, 8, "images")? as usize;
    let cols = read_be_u32(&img, 12, "images")? as usize;
    let expected = 16 + n * rows * cols;
    if img.len() != expected {
        return Err(Error::Consistency(format!(
            "images file holds {} bytes, header implies {expected}",
            img.len()
        )));
    }

    let lmagic = read_be_u32(&lab, 0, "labels")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "labels magic 0x{lmagic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
        )));
    }
    let ln = read_be_u32(&lab, 4, "labels")? as usize;
    if lab.len() != 8 + ln {
        return Err(Error::Consistency(format!(
            "labels file holds {} bytes, header implies {}",
            lab.len(),
            8 + ln
        )));
    }
    if ln != n {
        return Err(Error::Consistency(format!(
            "image count {n} does not match label count {ln}"
        )));
    }

    let pixels: Vec<f32> = img[16..].iter().map(|&b| b as f32 / 255.0).collect();
    let labels = lab[8..].to_vec();
    let num_classes = 10;
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
        return Err(Error::Format(format!("label {bad} out of range")));
    }
    Ok(LabeledDataset {
        pixels,
        channels: 1,
        height: rows,
        width: cols,
        labels,
        num_classes,
    })
}

/// Load CIFAR-10 binary batch files. An empty path list yields an empty
/// ten-class dataset.
pub fn load_cifar10(batch_paths: &[impl AsRef<Path>]) -> Result<LabeledDataset> {
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in batch_paths {
        let bytes = fs::read(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Format(format!(
                "{}: size {} is not a multiple of {CIFAR_RECORD}",
                path.as_ref().display(),
                bytes.len()
            )));
        }
        for record in bytes.chunks_exact(CIFAR_RECORD) {
            let label = record[0];
            if label > 9 {
                return Err(Error::Format(format!("label {label} out of range 0..=9")));
            }
            labels.push(label);
            pixels.extend(record[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    Ok(LabeledDataset {
        pixels,
        channels: 3,
        height: 32,
        width: 32,
        labels,
        num_classes: 10,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct AugmentFlags {
    pub hflip: bool,
    pub pad_crop: bool,
}

fn hflip_plane(plane: &mut [f32], h: usize, w: usize) {
    for y in 0..h {
        plane[y * w..(y + 1) * w].reverse();
    }
}

/// Mirror index for reflect padding without edge repetition.
fn reflect(i: isize, n: isize) -> usize {
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    i as usize
}

/// Random flip and reflect-pad-4 random crop, per sample, shape preserved.
pub fn augment(batch: &Tensor<f32>, rng: &mut ChaCha12Rng, flags: AugmentFlags) -> Tensor<f32> {
    if !flags.hflip && !flags.pad_crop {
        return batch.clone();
    }
    let (n, c, h, w) = (
        batch.shape()[0],
        batch.shape()[1],
        batch.shape()[2],
        batch.shape()[3],
    );
    let pad = 4isize;
    let mut out = batch.data().to_vec();
    for s in 0..n {
        let flip = flags.hflip && rng.gen::<bool>();
        let (dy, dx) = if flags.pad_crop {
            (
                rng.gen_range(0..=(2 * pad)) as isize,
                rng.gen_range(0..=(2 * pad)) as isize,
            )
        } else {
            (pad, pad)
        };
        for ch in 0..c {
            let base = (s * c + ch) * h * w;
            let plane = &mut out[base..base + h * w];
            if flip {
                hflip_plane(plane, h, w);
            }
            if flags.pad_crop {
                let src = plane.to_vec();
                for y in 0..h {
                    for x in 0..w {
                        let sy = reflect(y as isize + dy - pad, h as isize);
                        let sx = reflect(x as isize + dx - pad, w as isize);
                        plane[y * w + x] = src[sy * w + sx];
                    }
                }
            }
        }
    }
    Tensor::from_vec(batch.shape(), out).expect("augment preserves shape")
}

/// Per-channel standardization: `(x - mean) / std`.
pub fn normalize(batch: &Tensor<f32>, mean: &[f32], std: &[f32]) -> Result<Tensor<f32>> {
    let c = batch.shape()[1];
    if mean.len() != c || std.len() != c {
        return Err(Error::Dimension(format!(
            "normalize stats must match channel axis C={c}, got {} / {}",
            mean.len(),
            std.len()
        )));
    }
    if let Some(bad) = std.iter().position(|&s| s <= 0.0) {
        return Err(Error::Parameter(format!(
            "std for channel {bad} must be positive, got {}",
            std[bad]
        )));
    }
    let (n, _, h, w) = (
        batch.shape()[0],
        c,
        batch.shape()[2],
        batch.shape()[3],
    );
    let mut out = batch.data().to_vec();
    for s in 0..n {
        for ch in 0..c {
            let base = (s * c + ch) * h * w;
            let (m, sd) = (mean[ch], std[ch]);
            for v in &mut out[base..base + h * w] {
                *v = (*v - m) / sd;
            }
        }
    }
    Tensor::from_vec(batch.shape(), out)
}

/// Replicate a single channel to three (grayscale to the stem's RGB input).
pub fn replicate_to_rgb(batch: &Tensor<f32>) -> Tensor<f32> {
    let (n, c, h, w) = (
        batch.shape()[0],
        batch.shape()[1],
        batch.shape()[2],
        batch.shape()[3],
    );
    if c == 3 {
        return batch.clone();
    }
    assert_eq!(c, 1, "replicate_to_rgb expects 1 or 3 channels");
    let plane = h * w;
    let mut out = Vec::with_capacity(n * 3 * plane);
    for s in 0..n {
        let src = &batch.data()[s * plane..(s + 1) * plane];
        for _ in 0..3 {
            out.extend_from_slice(src);
        }
    }
    Tensor::from_vec(&[n, 3, h, w], out).expect("replication preserves layout")
}

/// Zero-pad spatial axes up to the next multiple of `multiple`, centered.
pub fn pad_to_multiple(batch: &Tensor<f32>, multiple: usize) -> Tensor<f32> {
    let (n, c, h, w) = (
        batch.shape()[0],
        batch.shape()[1],
        batch.shape()[2],
        batch.shape()[3],
    );
    let th = h.div_ceil(multiple) * multiple;
    let tw = w.div_ceil(multiple) * multiple;
    if th == h && tw == w {
        return batch.clone();
    }
    let (oy, ox) = ((th - h) / 2, (tw - w) / 2);
    let mut out = vec![0.0f32; n * c * th * tw];
    for s in 0..n {
        for ch in 0..c {
            for y in 0..h {
                let src = &batch.data()[((s * c + ch) * h + y) * w..][..w];
                let dst_base = ((s * c + ch) * th + y + oy) * tw + ox;
                out[dst_base..dst_base + w].copy_from_slice(src);
            }
        }
    }
    Tensor::from_vec(&[n, c, th, tw], out).expect("padding preserves counts")
}

/// Seeded permutation of `0..n`, re-derivable from (seed, epoch) so resumed
/// runs shuffle identically.
pub fn epoch_permutation(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha12Rng::seed_from_u64(
        seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

/// Full batch pipeline: gather, augment at native size, replicate to RGB,
/// pad to the model's resolution granularity, standardize.
pub fn assemble_batch(
    ds: &LabeledDataset,
    indices: &[usize],
    flags: AugmentFlags,
    rng: &mut ChaCha12Rng,
    mean: &[f32; 3],
    std: &[f32; 3],
) -> Result<(Tensor<f32>, Vec<usize>)> {
    let (batch, labels) = ds.gather(indices)?;
    let batch = augment(&batch, rng, flags);
    let batch = replicate_to_rgb(&batch);
    let batch = pad_to_multiple(&batch, 32);
    let batch = normalize(&batch, mean, std)?;
    Ok((batch, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_fixture() -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&2u32.to_be_bytes());
        img.extend_from_slice(&[0, 51, 102, 153, 204, 255, 0, 255]);
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&2u32.to_be_bytes());
        lab.extend_from_slice(&[7, 3]);
        (img, lab)
    }

    #[test]
    fn idx_fixture_roundtrips_with_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = idx_fixture();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        std::fs::write(&ip, &img).unwrap();
        std::fs::write(&lp, &lab).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!((ds.channels, ds.height, ds.width), (1, 2, 2));
        assert_eq!(ds.labels, vec![7, 3]);
        assert!((ds.sample(0)[1] - 51.0 / 255.0).abs() < 1e-7);
        assert!(ds.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn idx_bad_magic_is_format_error_and_truncation_is_consistency() {
        let dir = tempfile::tempdir().unwrap();
        let (mut img, lab) = idx_fixture();
        let lp = dir.path().join("lab");
        std::fs::write(&lp, &lab).unwrap();

        img[3] = 0x99;
        let ip = dir.path().join("bad");
        std::fs::write(&ip, &img).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Format(_))));

        let (img, _) = idx_fixture();
        let ip2 = dir.path().join("trunc");
        std::fs::write(&ip2, &img[..img.len() - 2]).unwrap();
        assert!(matches!(load_idx(&ip2, &lp), Err(Error::Consistency(_))));
    }

    #[test]
    fn idx_count_mismatch_is_consistency_error() {
        let dir = tempfile::tempdir().unwrap();
        let (img, mut lab) = idx_fixture();
        // claim 3 labels but provide 3 bytes accordingly
        lab[7] = 3;
        lab.push(1);
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        std::fs::write(&ip, &img).unwrap();
        std::fs::write(&lp, &lab).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Consistency(_))));
    }

    #[test]
    fn cifar_synthetic_file_roundtrips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[0] = 4;
        for i in 0..3072 {
            bytes[1 + i] = (i % 256) as u8;
        }
        bytes[CIFAR_RECORD] = 9;
        let p = dir.path().join("batch.bin");
        std::fs::write(&p, &bytes).unwrap();
        let ds = load_cifar10(&[&p]).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels, vec![4, 9]);
        for i in 0..3072 {
            let expect = (i % 256) as f32 / 255.0;
            assert_eq!(ds.sample(0)[i], expect);
        }
    }

    #[test]
    fn cifar_size_and_label_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("short.bin");
        std::fs::write(&p, vec![0u8; CIFAR_RECORD - 1]).unwrap();
        assert!(matches!(load_cifar10(&[&p]), Err(Error::Format(_))));
        let p2 = dir.path().join("badlabel.bin");
        let mut bytes = vec![0u8; CIFAR_RECORD];
        bytes[0] = 10;
        std::fs::write(&p2, &bytes).unwrap();
        assert!(matches!(load_cifar10(&[&p2]), Err(Error::Format(_))));
    }

    #[test]
    fn empty_path_list_gives_empty_ten_class_dataset() {
        let ds = load_cifar10(&Vec::<std::path::PathBuf>::new()).unwrap();
        assert!(ds.is_empty());
        assert_eq!(ds.num_classes, 10);
    }

    #[test]
    fn augment_with_flags_off_is_identity() {
        let batch = Tensor::from_fn(&[2, 1, 4, 4], |i| i as f32);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let out = augment(&batch, &mut rng, AugmentFlags::default());
        assert_eq!(out.data(), batch.data());
    }

    #[test]
    fn double_hflip_is_identity() {
        let mut plane: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let original = plane.clone();
        hflip_plane(&mut plane, 3, 4);
        assert_ne!(plane, original);
        hflip_plane(&mut plane, 3, 4);
        assert_eq!(plane, original);
    }

    #[test]
    fn hflip_preserves_the_pixel_multiset() {
        let batch = Tensor::from_fn(&[4, 3, 5, 5], |i| (i as f32 * 0.37).sin());
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let out = augment(
            &batch,
            &mut rng,
            AugmentFlags {
                hflip: true,
                pad_crop: false,
            },
        );
        let mut a: Vec<f32> = batch.data().to_vec();
        let mut b: Vec<f32> = out.data().to_vec();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn pad_crop_preserves_shape_and_center_crop_is_identity() {
        let batch = Tensor::from_fn(&[1, 1, 6, 6], |i| i as f32);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let out = augment(
            &batch,
            &mut rng,
            AugmentFlags {
                hflip: false,
                pad_crop: true,
            },
        );
        assert_eq!(out.shape(), batch.shape());
    }

    #[test]
    fn normalize_identity_and_inverse() {
        let batch = Tensor::from_fn(&[2, 3, 2, 2], |i| (i as f32 * 0.1).fract());
        let out = normalize(&batch, &[0.0; 3], &[1.0; 3]).unwrap();
        assert_eq!(out.data(), batch.data());

        let constant = Tensor::full(&[1, 3, 2, 2], 0.5);
        let zeroed = normalize(&constant, &[0.5; 3], &[0.25; 3]).unwrap();
        assert!(zeroed.data().iter().all(|&v| v == 0.0));

        let mean = [0.4, 0.5, 0.6];
        let std = [0.2, 0.3, 0.4];
        let normed = normalize(&batch, &mean, &std).unwrap();
        // invert manually
        let mut back = normed.data().to_vec();
        for s in 0..2 {
            for c in 0..3 {
                for v in &mut back[(s * 3 + c) * 4..(s * 3 + c + 1) * 4] {
                    *v = *v * std[c] + mean[c];
                }
            }
        }
        for (a, b) in back.iter().zip(batch.data()) {
            assert!((a - b).abs() < 1e-6);
        }

        assert!(matches!(
            normalize(&batch, &[0.0; 3], &[0.0; 3]),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn padding_centers_content_and_hits_the_multiple() {
        let batch = Tensor::full(&[1, 1, 28, 28], 1.0);
        let out = pad_to_multiple(&batch, 32);
        assert_eq!(out.shape(), &[1, 1, 32, 32]);
        assert_eq!(out.data().iter().filter(|&&v| v == 1.0).count(), 28 * 28);
        assert_eq!(out.at4(0, 0, 0, 0), 0.0);
        assert_eq!(out.at4(0, 0, 2, 2), 1.0);
    }

    #[test]
    fn epoch_permutation_is_a_seeded_permutation() {
        let p = epoch_permutation(7, 3, 100);
        let mut sorted = p.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        assert_eq!(p, epoch_permutation(7, 3, 100));
        assert_ne!(p, epoch_permutation(7, 4, 100));
        assert_ne!(p, epoch_permutation(8, 3, 100));
    }

    #[test]
    fn replication_triples_grayscale() {
        let batch = Tensor::from_fn(&[2, 1, 2, 2], |i| i as f32);
        let rgb = replicate_to_rgb(&batch);
        assert_eq!(rgb.shape(), &[2, 3, 2, 2]);
        for s in 0..2 {
            for c in 0..3 {
                for i in 0..4 {
                    assert_eq!(rgb.data()[(s * 3 + c) * 4 + i], batch.data()[s * 4 + i]);
                }
            }
        }
    }
}
