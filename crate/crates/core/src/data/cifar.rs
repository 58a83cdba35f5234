//! CIFAR-10 binary batches: records of one label byte followed by a 32×32
//! image stored channel-major (1024 R, 1024 G, 1024 B).

use super::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const RECORD: usize = 1 + 3 * 32 * 32;

pub const CLASS_NAMES: [&str; 10] =
    ["airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"];

pub fn parse_cifar_binary(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(Error::EmptyDataset("CIFAR batch has no records".into()));
    }
    if bytes.len() % RECORD != 0 {
        let whole = bytes.len() / RECORD * RECORD;
        return Err(Error::Parse {
            offset: whole,
            detail: format!("length {} is not a multiple of {RECORD}", bytes.len()),
        });
    }
    let n = bytes.len() / RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (RECORD - 1));
    for (i, rec) in bytes.chunks_exact(RECORD).enumerate() {
        if rec[0] as usize >= CLASS_NAMES.len() {
            return Err(Error::Parse { offset: i * RECORD, detail: format!("label {} out of range", rec[0]) });
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    let images = Tensor::new(vec![n, 3, 32, 32], pixels)?;
    Dataset::new(images, labels, CLASS_NAMES.iter().map(|s| s.to_string()).collect(), Split::Full)
}
