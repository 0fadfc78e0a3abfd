//! Corpus ingest, sub-image extraction, pseudo-labeling, batch sampling,
//! and dataset persistence.
//!
//! The pipeline treats every source image as its own group: all
//! overlapping sub-images cut from one image share that image's
//! pseudo-label, and labels run contiguously from zero in ingest order.
//! Low-resolution data is never stored; it is always derived from the
//! high-resolution crop through [`crate::resize::degrade`], so stored and
//! sampled pairs cannot drift apart.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, SrError};
use crate::image_tensor::ImageTensor;
use crate::resize::{degrade, DegradationConfig};

/// Manifest schema version written into every artifact.
pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

const MANIFEST_FILE: &str = "manifest.json";

/// All sub-images cut from one source image, sharing one pseudo-label.
#[derive(Debug, Clone)]
pub struct PatchGroup {
    pub source_id: String,
    pub pseudo_label: usize,
    pub sub_images: Vec<ImageTensor>,
    pub origin_offsets: Vec<(usize, usize)>,
}

impl PatchGroup {
    pub fn sub_image_size(&self) -> usize {
        self.sub_images[0].height()
    }
}

/// One training example: an LR patch, its HR source, and the group label.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub lr: ImageTensor,
    pub hr: ImageTensor,
    pub pseudo_label: usize,
}

/// A sampled mini-batch in both image and NCHW tensor form.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub examples: Vec<TrainingExample>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Stacks LR patches into an [N,C,h,w] tensor.
    pub fn lr_nchw(&self) -> ArrayD<f64> {
        stack_nchw(self.examples.iter().map(|e| &e.lr))
    }

    /// Stacks HR patches into an [N,C,H,W] tensor.
    pub fn hr_nchw(&self) -> ArrayD<f64> {
        stack_nchw(self.examples.iter().map(|e| &e.hr))
    }
}

pub(crate) fn stack_nchw<'a>(images: impl Iterator<Item = &'a ImageTensor>) -> ArrayD<f64> {
    let imgs: Vec<&ImageTensor> = images.collect();
    assert!(!imgs.is_empty(), "cannot stack an empty batch");
    let (h, w, c) = (imgs[0].height(), imgs[0].width(), imgs[0].channels());
    let mut out = ArrayD::zeros(IxDyn(&[imgs.len(), c, h, w]));
    for (n, img) in imgs.iter().enumerate() {
        let chw = img.to_chw();
        out.index_axis_mut(ndarray::Axis(0), n).assign(&chw);
    }
    out
}

fn is_image_file(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
        Some(ref e) if e == "png" || e == "jpg" || e == "jpeg" || e == "bmp"
    )
}

/// Reads every decodable image under `directory`, ordered by filename.
pub fn ingest_corpus(directory: &Path) -> Result<Vec<(String, ImageTensor)>> {
    let mut files: Vec<PathBuf> = fs::read_dir(directory)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort_by_key(|p| p.file_name().map(|n| n.to_os_string()));

    if files.is_empty() {
        return Err(SrError::EmptyCorpus(directory.to_path_buf()));
    }

    let mut corpus = Vec::with_capacity(files.len());
    for path in files {
        let img = ImageTensor::load_png(&path).map_err(|e| SrError::Ingest {
            file: path.clone(),
            reason: e.to_string(),
        })?;
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("unnamed")
            .to_string();
        corpus.push((name, img));
    }
    Ok(corpus)
}

/// Per-axis window offsets: the stride grid plus, when the last window
/// stops short of the edge, one extra window flush with the edge.
pub fn axis_offsets(dim: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut offsets = Vec::new();
    let mut o = 0;
    while o + size <= dim {
        offsets.push(o);
        o += stride;
    }
    let last = *offsets.last().expect("size <= dim guarantees one window");
    if last + size < dim {
        offsets.push(dim - size);
    }
    offsets
}

/// Cuts overlapping square sub-images of `size` at `stride` spacing.
pub fn extract_subimages(
    hr: &ImageTensor,
    size: usize,
    stride: usize,
) -> Result<Vec<((usize, usize), ImageTensor)>> {
    if size == 0 || stride == 0 {
        return Err(SrError::Extraction(format!(
            "size and stride must be positive, got size={size} stride={stride}"
        )));
    }
    if size > hr.height() || size > hr.width() {
        return Err(SrError::Extraction(format!(
            "window {size} exceeds image {}x{}",
            hr.height(),
            hr.width()
        )));
    }
    let rows = axis_offsets(hr.height(), size, stride);
    let cols = axis_offsets(hr.width(), size, stride);
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &c in &cols {
            out.push(((r, c), hr.crop(r, c, size, size)?));
        }
    }
    Ok(out)
}

/// Groups each source image's sub-images under one pseudo-label,
/// numbering groups contiguously in corpus order.
pub fn assign_pseudo_labels(
    corpus: &[(String, ImageTensor)],
    size: usize,
    stride: usize,
) -> Result<Vec<PatchGroup>> {
    if corpus.is_empty() {
        return Err(SrError::Data("cannot label an empty corpus".into()));
    }
    corpus
        .iter()
        .enumerate()
        .map(|(label, (source_id, img))| {
            let windows = extract_subimages(img, size, stride)?;
            let (origin_offsets, sub_images) = windows.into_iter().unzip();
            Ok(PatchGroup {
                source_id: source_id.clone(),
                pseudo_label: label,
                sub_images,
                origin_offsets,
            })
        })
        .collect()
}

/// Ingest, crop to a scale multiple, and label in one step.
pub fn prepare_corpus(
    directory: &Path,
    config: &DegradationConfig,
    size: usize,
    stride: usize,
) -> Result<Vec<PatchGroup>> {
    config.validate()?;
    let corpus: Vec<(String, ImageTensor)> = ingest_corpus(directory)?
        .into_iter()
        .map(|(id, img)| Ok((id, img.center_crop_to_multiple(config.scale)?)))
        .collect::<Result<_>>()?;
    assign_pseudo_labels(&corpus, size, stride)
}

fn crop_offset(rng: &mut impl Rng, room: usize) -> usize {
    if room == 0 {
        0
    } else {
        rng.random_range(0..=room)
    }
}

/// Draws one (LR, HR, label) example from a specific group.
pub fn sample_group_example(
    group: &PatchGroup,
    patch_size: usize,
    config: &DegradationConfig,
    rng: &mut impl Rng,
) -> Result<TrainingExample> {
    let size = group.sub_image_size();
    if patch_size > size {
        return Err(SrError::Sampling(format!(
            "patch {patch_size} exceeds sub-image {size}"
        )));
    }
    if patch_size % config.scale != 0 {
        return Err(SrError::Sampling(format!(
            "patch {patch_size} not divisible by scale {}",
            config.scale
        )));
    }
    let idx = rng.random_range(0..group.sub_images.len());
    let room = size - patch_size;
    let top = crop_offset(rng, room);
    let left = crop_offset(rng, room);
    let hr = group.sub_images[idx].crop(top, left, patch_size, patch_size)?;
    let lr = degrade(&hr, config)?;
    Ok(TrainingExample { lr, hr, pseudo_label: group.pseudo_label })
}

/// Draws a reproducible mini-batch of random patches across groups.
pub fn sample_training_batch(
    groups: &[PatchGroup],
    patch_size: usize,
    batch_size: usize,
    config: &DegradationConfig,
    seed: u64,
) -> Result<TrainingBatch> {
    if groups.is_empty() {
        return Err(SrError::Sampling("no groups to sample from".into()));
    }
    if batch_size == 0 {
        return Err(SrError::Sampling("batch_size must be positive".into()));
    }
    let mut rng = crate::rng::stream(seed, &[0x6261_7463_68]);
    let mut examples = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let g = rng.random_range(0..groups.len());
        examples.push(sample_group_example(&groups[g], patch_size, config, &mut rng)?);
    }
    Ok(TrainingBatch { examples })
}

/// Draws a reproducible mini-batch from a single group.
pub fn sample_label_batch(
    group: &PatchGroup,
    patch_size: usize,
    batch_size: usize,
    config: &DegradationConfig,
    seed: u64,
) -> Result<TrainingBatch> {
    if batch_size == 0 {
        return Err(SrError::Sampling("batch_size must be positive".into()));
    }
    let mut rng = crate::rng::stream(seed, &[0x6c61_6265_6c, group.pseudo_label as u64]);
    let mut examples = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        examples.push(sample_group_example(group, patch_size, config, &mut rng)?);
    }
    Ok(TrainingBatch { examples })
}

/// Descriptor of one stored PNG.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Descriptor of one group inside a stored dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupRecord {
    pub source_id: String,
    pub pseudo_label: usize,
    pub files: Vec<FileRecord>,
    pub offsets: Vec<(usize, usize)>,
}

/// On-disk description of a prepared dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub corpus_name: String,
    pub scale: usize,
    pub sub_image_size: usize,
    pub stride: usize,
    pub groups: Vec<GroupRecord>,
}

impl DatasetManifest {
    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn num_sub_images(&self) -> usize {
        self.groups.iter().map(|g| g.files.len()).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(SrError::Data("manifest has no groups".into()));
        }
        for (i, g) in self.groups.iter().enumerate() {
            if g.pseudo_label != i {
                return Err(SrError::Data(format!(
                    "pseudo_labels must be contiguous from 0; group {i} has label {}",
                    g.pseudo_label
                )));
            }
            if g.files.is_empty() {
                return Err(SrError::Data(format!("group {i} has no sub-images")));
            }
            if g.files.len() != g.offsets.len() {
                return Err(SrError::Data(format!(
                    "group {i}: {} files but {} offsets",
                    g.files.len(),
                    g.offsets.len()
                )));
            }
        }
        Ok(())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut s = String::with_capacity(64);
    for b in digest {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Metadata carried alongside groups when saving.
#[derive(Debug, Clone)]
pub struct DatasetMeta {
    pub corpus_name: String,
    pub scale: usize,
    pub sub_image_size: usize,
    pub stride: usize,
}

/// Writes groups as PNGs plus a manifest; returns the manifest path.
pub fn save_dataset(groups: &[PatchGroup], meta: &DatasetMeta, out_dir: &Path) -> Result<PathBuf> {
    if groups.is_empty() {
        return Err(SrError::Data("refusing to save an empty dataset".into()));
    }
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir)?;

    let mut records = Vec::with_capacity(groups.len());
    for group in groups {
        let mut files = Vec::with_capacity(group.sub_images.len());
        for (idx, img) in group.sub_images.iter().enumerate() {
            let rel = format!("images/g{:05}_s{:05}.png", group.pseudo_label, idx);
            let abs = out_dir.join(&rel);
            img.save_png(&abs)?;
            let bytes = fs::read(&abs)?;
            files.push(FileRecord {
                path: rel,
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            });
        }
        records.push(GroupRecord {
            source_id: group.source_id.clone(),
            pseudo_label: group.pseudo_label,
            files,
            offsets: group.origin_offsets.clone(),
        });
    }

    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        corpus_name: meta.corpus_name.clone(),
        scale: meta.scale,
        sub_image_size: meta.sub_image_size,
        stride: meta.stride,
        groups: records,
    };
    manifest.validate()?;
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

/// Reads a stored dataset, verifying every file against its checksum.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<PatchGroup>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(SrError::Data(format!(
            "unsupported manifest schema {}",
            manifest.schema_version
        )));
    }
    manifest.validate()?;

    let mut groups = Vec::with_capacity(manifest.groups.len());
    for record in &manifest.groups {
        let mut sub_images = Vec::with_capacity(record.files.len());
        for f in &record.files {
            let abs = dir.join(&f.path);
            let bytes = fs::read(&abs)?;
            let digest = sha256_hex(&bytes);
            if digest != f.sha256 {
                return Err(SrError::Integrity(format!(
                    "{}: checksum mismatch (stored {}, computed {digest})",
                    f.path, f.sha256
                )));
            }
            sub_images.push(ImageTensor::load_png(&abs)?);
        }
        groups.push(PatchGroup {
            source_id: record.source_id.clone(),
            pseudo_label: record.pseudo_label,
            sub_images,
            origin_offsets: record.offsets.clone(),
        });
    }
    Ok((manifest, groups))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_tensor::ImageTensor;
    use tempfile::tempdir;

    fn ramp(h: usize, w: usize, phase: f64) -> ImageTensor {
        ImageTensor::from_fn(h, w, 3, |y, x, c| {
            ((y * w + x) as f64 * 0.37 + c as f64 * 0.11 + phase).fract().abs()
        })
    }

    fn quantized(h: usize, w: usize, phase: f64) -> ImageTensor {
        let img = ramp(h, w, phase);
        ImageTensor::from_fn(h, w, 3, |y, x, c| {
            (img.data()[[y, x, c]] * 255.0).round() / 255.0
        })
    }

    #[test]
    fn offsets_include_edge_flush_window() {
        assert_eq!(axis_offsets(32, 16, 8), vec![0, 8, 16]);
        assert_eq!(axis_offsets(33, 16, 8), vec![0, 8, 16, 17]);
        assert_eq!(axis_offsets(16, 16, 8), vec![0]);
    }

    #[test]
    fn extraction_covers_every_pixel_when_stride_le_size() {
        let img = ramp(37, 29, 0.0);
        let windows = extract_subimages(&img, 12, 7).unwrap();
        let mut covered = vec![vec![false; 29]; 37];
        for ((r, c), _) in &windows {
            for y in *r..r + 12 {
                for x in *c..c + 12 {
                    covered[y][x] = true;
                }
            }
        }
        assert!(covered.iter().flatten().all(|&b| b));
    }

    #[test]
    fn oversized_window_is_rejected() {
        let img = ramp(8, 8, 0.0);
        assert!(matches!(
            extract_subimages(&img, 9, 4),
            Err(SrError::Extraction(_))
        ));
    }

    #[test]
    fn labels_are_contiguous_and_per_source() {
        let corpus = vec![
            ("a.png".to_string(), ramp(20, 20, 0.0)),
            ("b.png".to_string(), ramp(24, 20, 0.3)),
            ("c.png".to_string(), ramp(20, 28, 0.6)),
        ];
        let groups = assign_pseudo_labels(&corpus, 10, 10).unwrap();
        assert_eq!(groups.len(), 3);
        for (i, g) in groups.iter().enumerate() {
            assert_eq!(g.pseudo_label, i);
            assert_eq!(g.sub_images.len(), g.origin_offsets.len());
        }
    }

    #[test]
    fn sampling_is_deterministic_and_lr_matches_degrade() {
        let corpus = vec![
            ("a.png".to_string(), ramp(32, 32, 0.0)),
            ("b.png".to_string(), ramp(32, 32, 0.5)),
        ];
        let groups = assign_pseudo_labels(&corpus, 24, 12).unwrap();
        let config = DegradationConfig::bicubic(2);
        let b1 = sample_training_batch(&groups, 12, 8, &config, 77).unwrap();
        let b2 = sample_training_batch(&groups, 12, 8, &config, 77).unwrap();
        for (x, y) in b1.examples.iter().zip(b2.examples.iter()) {
            assert_eq!(x.pseudo_label, y.pseudo_label);
            assert_eq!(x.hr.data(), y.hr.data());
            assert_eq!(x.lr.data(), y.lr.data());
        }
        for e in &b1.examples {
            let redo = degrade(&e.hr, &config).unwrap();
            assert_eq!(e.lr.data(), redo.data());
        }
    }

    #[test]
    fn full_size_patch_forces_origin_crop() {
        let corpus = vec![("a.png".to_string(), ramp(16, 16, 0.0))];
        let groups = assign_pseudo_labels(&corpus, 16, 16).unwrap();
        let config = DegradationConfig::bicubic(2);
        let batch = sample_training_batch(&groups, 16, 3, &config, 5).unwrap();
        for e in &batch.examples {
            assert_eq!(e.hr.data(), groups[0].sub_images[0].data());
        }
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let corpus = vec![
            ("a.png".to_string(), quantized(20, 20, 0.0)),
            ("b.png".to_string(), quantized(20, 20, 0.4)),
        ];
        let groups = assign_pseudo_labels(&corpus, 10, 10).unwrap();
        let meta = DatasetMeta {
            corpus_name: "toy".into(),
            scale: 2,
            sub_image_size: 10,
            stride: 10,
        };
        save_dataset(&groups, &meta, dir.path()).unwrap();
        let (manifest, loaded) = load_dataset(dir.path()).unwrap();
        assert_eq!(manifest.num_groups(), 2);
        for (orig, back) in groups.iter().zip(loaded.iter()) {
            assert_eq!(orig.pseudo_label, back.pseudo_label);
            assert_eq!(orig.origin_offsets, back.origin_offsets);
            for (a, b) in orig.sub_images.iter().zip(back.sub_images.iter()) {
                assert_eq!(a.data(), b.data());
            }
        }
    }

    #[test]
    fn tampered_file_fails_integrity_check() {
        let dir = tempdir().unwrap();
        let corpus = vec![("a.png".to_string(), quantized(12, 12, 0.2))];
        let groups = assign_pseudo_labels(&corpus, 12, 12).unwrap();
        let meta = DatasetMeta {
            corpus_name: "toy".into(),
            scale: 2,
            sub_image_size: 12,
            stride: 12,
        };
        save_dataset(&groups, &meta, dir.path()).unwrap();
        let victim = dir.path().join("images/g00000_s00000.png");
        let other = quantized(12, 12, 0.9);
        other.save_png(&victim).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(SrError::Integrity(_))));
    }

    #[test]
    fn empty_save_is_rejected() {
        let dir = tempdir().unwrap();
        let meta = DatasetMeta {
            corpus_name: "toy".into(),
            scale: 2,
            sub_image_size: 8,
            stride: 8,
        };
        assert!(save_dataset(&[], &meta, dir.path()).is_err());
    }

    #[test]
    fn ingest_rejects_corrupt_and_orders_by_name() {
        let dir = tempdir().unwrap();
        quantized(8, 8, 0.1).save_png(&dir.path().join("zz.png")).unwrap();
        quantized(8, 8, 0.2).save_png(&dir.path().join("aa.png")).unwrap();
        let corpus = ingest_corpus(dir.path()).unwrap();
        assert_eq!(corpus[0].0, "aa.png");
        assert_eq!(corpus[1].0, "zz.png");

        fs::write(dir.path().join("bb.png"), b"not a png").unwrap();
        let err = ingest_corpus(dir.path()).unwrap_err();
        match err {
            SrError::Ingest { file, .. } => {
                assert!(file.to_string_lossy().ends_with("bb.png"))
            }
            other => panic!("expected ingest error, got {other}"),
        }
    }

    #[test]
    fn empty_directory_is_empty_corpus() {
        let dir = tempdir().unwrap();
        assert!(matches!(
            ingest_corpus(dir.path()),
            Err(SrError::EmptyCorpus(_))
        ));
    }
}
