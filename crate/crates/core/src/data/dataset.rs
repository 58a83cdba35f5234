use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::cifar::parse_cifar_binary;
use super::idx::{decode_idx, encode_idx, maybe_gunzip, parse_idx, parse_idx_labels, Idx, IdxData};
use super::modify::Modification;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_FILE: &str = "images.idx";
pub const LABELS_FILE: &str = "labels.idx";
pub const CLASSES_FILE: &str = "classes.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Full,
    Train,
    Validation,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Full => "full",
            Split::Train => "train",
            Split::Validation => "validation",
        })
    }
}

/// Labelled images `[N, C, H, W]` with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_names: Vec<String>, split: Split) -> Result<Self> {
        let d = Dataset { images, labels, class_names, split };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let &[n, ..] = self.images.shape() else {
            return Err(Error::dim("dataset", "images are a scalar"));
        };
        if self.images.ndim() != 4 {
            return Err(Error::dim("dataset", format!("images must be [N, C, H, W], got {:?}", self.images.shape())));
        }
        if n != self.labels.len() {
            return Err(Error::dim("dataset", format!("{n} images but {} labels", self.labels.len())));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.class_names.len()) {
            return Err(Error::input(format!("label {l} outside [0, {})", self.class_names.len())));
        }
        if let Some(v) = self.images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::input(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// `[C, H, W]`.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Image `index` as `[C, H, W]`.
    pub fn image(&self, index: usize) -> Result<Tensor> {
        self.images.batch_item(index)?.into_reshaped(&self.image_shape())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    pub fn subset(&self, indices: &[usize], split: Split) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::EmptyDataset("subset selects no samples".into()));
        }
        let images = self.images.select_batch(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok(Dataset { images, labels, class_names: self.class_names.clone(), split })
    }

    /// Images and labels for a minibatch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        Ok((self.images.select_batch(indices)?, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// Deterministic disjoint split; returns `(train, validation)`.
    pub fn split(&self, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        let (train, val) = split_indices(self.len(), val_fraction, seed)?;
        Ok((self.subset(&train, Split::Train)?, self.subset(&val, Split::Validation)?))
    }

    /// Write the canonical form: a directory with IDX images (f32), IDX
    /// labels and one class name per line.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let images = Idx { dims: self.images.shape().to_vec(), data: IdxData::F32(self.images.data().to_vec()) };
        let labels = Idx { dims: vec![self.len()], data: IdxData::I32(self.labels.iter().map(|&l| l as i32).collect()) };
        write(dir.join(IMAGES_FILE), &encode_idx(&images))?;
        write(dir.join(LABELS_FILE), &encode_idx(&labels))?;
        write(dir.join(CLASSES_FILE), (self.class_names.join("\n") + "\n").as_bytes())
    }

    /// Load a dataset from
    /// - a canonical directory written by [`Dataset::save`],
    /// - a directory holding MNIST-style `*images*idx3*` / `*labels*idx1*`
    ///   files (optionally gzipped),
    /// - or a CIFAR-10 `.bin` batch.
    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let path = path.as_ref();
        if path.is_file() {
            return parse_cifar_binary(&read(path)?);
        }
        let (images, labels) = if path.join(IMAGES_FILE).is_file() {
            (path.join(IMAGES_FILE), path.join(LABELS_FILE))
        } else {
            (find(path, &["images", "idx3"])?, find(path, &["labels", "idx1"])?)
        };
        let class_file = path.join(CLASSES_FILE);
        let names = if class_file.is_file() {
            let text = fs::read_to_string(&class_file).map_err(|e| Error::io(&class_file, e))?;
            Some(text.lines().map(str::to_string).collect())
        } else {
            None
        };
        Dataset::from_idx(&read(&images)?, &read(&labels)?, names)
    }

    /// Build from IDX image bytes (`[N, H, W]` or `[N, C, H, W]`) and label
    /// bytes. Without names, classes are numbered `0..=max label`.
    pub fn from_idx(images: &[u8], labels: &[u8], class_names: Option<Vec<String>>) -> Result<Dataset> {
        let images = maybe_gunzip(images.to_vec())?;
        let labels = parse_idx_labels(&maybe_gunzip(labels.to_vec())?)?;
        let images = parse_idx(&images)?;
        let images = match *images.shape() {
            [n, h, w] => images.into_reshaped(&[n, 1, h, w])?,
            [_, _, _, _] => images,
            ref other => return Err(Error::dim("dataset", format!("image IDX must be 3-D or 4-D, got {other:?}"))),
        };
        let names = class_names.unwrap_or_else(|| {
            let k = labels.iter().max().map_or(0, |m| m + 1);
            (0..k).map(|i| i.to_string()).collect()
        });
        Dataset::new(images, labels, names, Split::Full)
    }

    /// Tint grayscale images with a per-channel palette, giving an RGB dataset.
    pub fn colorize(&self, palette: [f32; 3]) -> Result<Dataset> {
        let [c, h, w] = self.image_shape();
        if c != 1 {
            return Err(Error::input(format!("colorize needs 1 channel, got {c}")));
        }
        if palette.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::input(format!("palette {palette:?} outside [0, 1]")));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(self.images.len() * 3);
        for img in self.images.data().chunks_exact(plane) {
            for p in palette {
                out.extend(img.iter().map(|v| v * p));
            }
        }
        let images = Tensor::new(vec![self.len(), 3, h, w], out)?;
        Dataset::new(images, self.labels.clone(), self.class_names.clone(), self.split)
    }
}

/// Indices `0..n` shuffled by `seed`; the first `round(val_fraction n)` form
/// the validation part. Both parts are returned sorted.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&val_fraction) || val_fraction <= 0.0 {
        return Err(Error::input(format!("validation fraction must be in (0, 1), got {val_fraction}")));
    }
    let n_val = ((n as f64) * val_fraction).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::input(format!("split of {n} samples at {val_fraction} leaves an empty part")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}

/// Double the class count: classes `k..2k` are `m`-modified copies of
/// classes `0..k`, listed after all originals.
pub fn build_modified_dataset(base: &Dataset, m: &Modification) -> Result<Dataset> {
    base.validate()?;
    m.validate()?;
    let k = base.num_classes();
    let mut data = base.images.data().to_vec();
    for i in 0..base.len() {
        data.extend(m.apply(&base.image(i)?, i)?.data().iter().map(|v| v.clamp(0.0, 1.0)));
    }
    let mut labels = base.labels.clone();
    labels.extend(base.labels.iter().map(|l| l + k));
    let mut names = base.class_names.clone();
    names.extend(base.class_names.iter().map(|n| format!("{n}/{}", m.name())));
    let [c, h, w] = base.image_shape();
    let images = Tensor::new(vec![2 * base.len(), c, h, w], data)?;
    Dataset::new(images, labels, names, base.split)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: PathBuf, bytes: &[u8]) -> Result<()> {
    fs::write(&path, bytes).map_err(|e| Error::io(path, e))
}

fn find(dir: &Path, needles: &[&str]) -> Result<PathBuf> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut hits: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().to_lowercase()).unwrap_or_default();
            needles.iter().all(|n| name.contains(n))
        })
        .collect();
    hits.sort();
    match hits.len() {
        1 => Ok(hits.remove(0)),
        0 => Err(Error::lookup("dataset file", format!("{}/*{}*", dir.display(), needles.join("*")))),
        _ => Err(Error::input(format!("several files match {:?} in {}", needles, dir.display()))),
    }
}

/// Decode the raw bytes of an IDX file without scaling, e.g. for oracle checks.
pub fn raw_idx(path: impl AsRef<Path>) -> Result<Idx> {
    decode_idx(&maybe_gunzip(read(path.as_ref())?)?)
}
