use std::fmt;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::NetworkInstance;
use crate::tensor::Tensor;

/// Where distances are measured.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Space {
    Pixel,
    /// Activations of an encoder layer.
    Code(String),
}

impl Space {
    pub fn parse(s: &str) -> Space {
        match s {
            "pixel" => Space::Pixel,
            layer => Space::Code(layer.to_string()),
        }
    }
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Space::Pixel => f.write_str("pixel"),
            Space::Code(l) => f.write_str(l),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NNQueryResult {
    pub space: Space,
    pub index: usize,
    /// Euclidean.
    pub distance: f64,
    pub class: Option<usize>,
}

impl NNQueryResult {
    pub const CSV_HEADER: &'static str = "space,class,index,distance";

    pub fn csv_row(&self) -> String {
        let class = self.class.map_or_else(String::new, |c| c.to_string());
        format!("{},{},{},{}", self.space, class, self.index, self.distance)
    }
}

/// Rows of a batch flattened into the chosen space.
pub fn embed(images: &Tensor, space: &Space, encoder: Option<&NetworkInstance>, batch: usize) -> Result<Tensor> {
    let n = *images.shape().first().ok_or_else(|| Error::dim("embed", "scalar input"))?;
    let flat = match space {
        Space::Pixel => images.clone(),
        Space::Code(layer) => {
            let enc = encoder.ok_or_else(|| Error::input(format!("code space `{layer}` needs an encoder")))?;
            enc.forward_batched(images, batch, Some(layer))?
        }
    };
    let width = if n == 0 { 0 } else { flat.len() / n };
    flat.into_reshaped(&[n, width])
}

/// A dataset embedded once for repeated exhaustive queries.
pub struct Embedding {
    pub space: Space,
    /// `[N, D]`.
    pub rows: Tensor,
    pub labels: Vec<usize>,
}

fn sq_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum()
}

impl Embedding {
    pub fn new(data: &Dataset, space: Space, encoder: Option<&NetworkInstance>, batch: usize) -> Result<Embedding> {
        let rows = embed(&data.images, &space, encoder, batch)?;
        Ok(Embedding { space, rows, labels: data.labels.clone() })
    }

    pub fn width(&self) -> usize {
        self.rows.shape()[1]
    }

    fn row(&self, i: usize) -> &[f32] {
        let w = self.width();
        &self.rows.data()[i * w..(i + 1) * w]
    }

    /// Exact nearest row to `query`, optionally among one class, skipping
    /// `exclude`. Ties go to the lowest index.
    fn scan(&self, query: &[f32], class: Option<usize>, exclude: Option<usize>) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..self.labels.len() {
            if Some(i) == exclude || class.is_some_and(|c| self.labels[i] != c) {
                continue;
            }
            let d = sq_distance(query, self.row(i));
            if best.is_none_or(|(_, b)| d < b) {
                best = Some((i, d));
            }
        }
        best
    }

    pub fn query(&self, query: &[f32], class: Option<usize>) -> Result<NNQueryResult> {
        if query.len() != self.width() {
            return Err(Error::dim("nearest_neighbor", format!("query has {} values, space `{}` has {}", query.len(), self.space, self.width())));
        }
        let (index, d) = self.scan(query, class, None).ok_or_else(|| match class {
            Some(c) => Error::input(format!("no dataset images of class {c}")),
            None => Error::input("nearest-neighbor search over an empty dataset"),
        })?;
        Ok(NNQueryResult { space: self.space.clone(), index, distance: d.sqrt(), class })
    }

    /// For every element, the distance to its nearest other element of the
    /// same class; elements alone in their class are skipped.
    pub fn intra_class_distances(&self) -> Vec<f64> {
        (0..self.labels.len())
            .filter_map(|i| self.scan(self.row(i), Some(self.labels[i]), Some(i)).map(|(_, d)| d.sqrt()))
            .collect()
    }
}

/// Exhaustive nearest neighbor of one image (`[C, H, W]` or `[1, C, H, W]`).
pub fn nearest_neighbor(
    query: &Tensor,
    data: &Dataset,
    space: &Space,
    class: Option<usize>,
    encoder: Option<&NetworkInstance>,
) -> Result<NNQueryResult> {
    if let Some(c) = class {
        if !data.labels.contains(&c) {
            return Err(Error::input(format!("no dataset images of class {c}")));
        }
    }
    let mut shape = vec![1];
    shape.extend_from_slice(&data.image_shape());
    let q = query.reshape(&shape).map_err(|_| Error::dim("nearest_neighbor", format!("query {:?} vs images {:?}", query.shape(), data.image_shape())))?;
    let emb = Embedding::new(data, space.clone(), encoder, 256)?;
    let qe = embed(&q, space, encoder, 1)?;
    emb.query(qe.data(), class)
}

/// Sort-based `q`-th percentile: the smallest sample value with at least
/// `q`% of the sample at or below it.
pub fn quantile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = ((q / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    Some(v[k.min(v.len()) - 1])
}
