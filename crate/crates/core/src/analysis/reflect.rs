use std::fmt::Write as _;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::laplacian_energy;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The modification a reflection experiment looks for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReflectionKind {
    ChannelBrg,
    GaussianBlur,
    QuarterShuffle,
}

impl ReflectionKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "channel_brg" => Ok(ReflectionKind::ChannelBrg),
            "gaussian_blur" => Ok(ReflectionKind::GaussianBlur),
            "quarter_shuffle" => Ok(ReflectionKind::QuarterShuffle),
            other => Err(Error::input(format!("unknown reflection kind `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ReflectionKind::ChannelBrg => "channel_brg",
            ReflectionKind::GaussianBlur => "gaussian_blur",
            ReflectionKind::QuarterShuffle => "quarter_shuffle",
        }
    }
}

/// Channel orders `out[i] = in[p[i]]`, identity first.
pub const CHANNEL_PERMUTATIONS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
/// The order produced by the BRG modification.
pub const BRG: [usize; 3] = [2, 0, 1];

fn split_chw(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] | [1, c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::dim("reflection_metrics", format!("expected an image, got {s:?}"))),
    }
}

/// Per-channel mean of an image.
pub fn channel_means(image: &Tensor) -> Result<Vec<f64>> {
    let (c, h, w) = split_chw(image)?;
    Ok(image.data().chunks(h * w).take(c).map(|p| p.iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64).collect())
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Correlation of channel means `m` with `reference` reordered by each of
/// [`CHANNEL_PERMUTATIONS`].
pub fn permutation_scores(m: &[f64], reference: [f64; 3]) -> [f64; 6] {
    CHANNEL_PERMUTATIONS.map(|p| pearson(m, &p.map(|i| reference[i])))
}

/// Mean absolute difference across the quadrant boundaries of the image
/// taken as a torus (the two centre seams and the two wrap-around edges),
/// minus the same quantity one pixel to either side of each boundary.
/// Content that continues smoothly across the boundaries scores near 0;
/// content cut apart by rearranged quadrants scores positive.
pub fn seam_discontinuity(image: &Tensor) -> Result<f64> {
    let (c, h, w) = split_chw(image)?;
    if h < 4 || w < 4 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::input(format!("seam discontinuity needs even extents of at least 4, got {h}x{w}")));
    }
    let x = image.data();
    let at = |ch: usize, i: isize, j: isize| x[(ch * h + i.rem_euclid(h as isize) as usize) * w + j.rem_euclid(w as isize) as usize] as f64;
    let (mut seam, mut control) = (0.0, 0.0);
    for ch in 0..c {
        for s in [0, w as isize / 2] {
            for i in 0..h as isize {
                seam += (at(ch, i, s) - at(ch, i, s - 1)).abs();
                control += 0.5 * ((at(ch, i, s - 1) - at(ch, i, s - 2)).abs() + (at(ch, i, s + 1) - at(ch, i, s)).abs());
            }
        }
        for s in [0, h as isize / 2] {
            for j in 0..w as isize {
                seam += (at(ch, s, j) - at(ch, s - 1, j)).abs();
                control += 0.5 * ((at(ch, s - 1, j) - at(ch, s - 2, j)).abs() + (at(ch, s + 1, j) - at(ch, s, j)).abs());
            }
        }
    }
    Ok((seam - control) / (2 * c * (h + w)) as f64)
}

/// Two-sided Mann-Whitney rank-sum test with tie correction (normal
/// approximation with continuity correction). Returns `(U_a, p)`.
pub fn rank_sum(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::input("rank-sum test needs two non-empty samples"));
    }
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let mut all: Vec<(f64, bool)> = a.iter().map(|&v| (v, true)).chain(b.iter().map(|&v| (v, false))).collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let (mut rank_a, mut ties) = (0.0, 0.0);
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        rank_a += avg * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let u = rank_a - n1 * (n1 + 1.0) / 2.0;
    let n = n1 + n2;
    let var = n1 * n2 / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)).max(1.0));
    if var <= 0.0 {
        return Ok((u, 1.0));
    }
    let z = ((u - n1 * n2 / 2.0).abs() - 0.5).max(0.0) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok((u, (2.0 * (1.0 - normal.cdf(z))).min(1.0)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupMetrics {
    pub name: String,
    /// Per-image metric (seam or Laplacian), or per-image score of the
    /// trained permutation for channel experiments.
    pub values: Vec<f64>,
    pub mean: f64,
    /// Channel experiments only: mean channel vector, scores of every
    /// permutation, and the best-scoring permutation.
    pub channel_means: Option<Vec<f64>>,
    pub permutation_scores: Option<[f64; 6]>,
    pub identified: Option<[usize; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReflectionReport {
    pub kind: ReflectionKind,
    /// Regular-class group, then modified-class group.
    pub groups: [GroupMetrics; 2],
    /// `mean(modified) - mean(regular)`.
    pub separation: f64,
    /// Two-sided rank-sum p-value between the groups' per-image values.
    pub p_value: f64,
}

impl ReflectionReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,group,n,mean,identified_permutation,separation,p_value\n");
        for g in &self.groups {
            let perm = g.identified.map_or_else(String::new, |p| format!("{}{}{}", p[0], p[1], p[2]));
            let _ = writeln!(s, "{},{},{},{},{},{},{}", self.kind.name(), g.name, g.values.len(), g.mean, perm, self.separation, self.p_value);
        }
        s
    }
}

fn group(name: &str, images: &[Tensor], kind: ReflectionKind, reference: Option<[f64; 3]>) -> Result<GroupMetrics> {
    if images.is_empty() {
        return Err(Error::input(format!("reflection group `{name}` is empty")));
    }
    let mut g = GroupMetrics { name: name.into(), values: Vec::new(), mean: 0.0, channel_means: None, permutation_scores: None, identified: None };
    match kind {
        ReflectionKind::ChannelBrg => {
            let r = reference.ok_or_else(|| Error::input("channel experiments need reference channel means"))?;
            let brg = CHANNEL_PERMUTATIONS.iter().position(|p| *p == BRG).expect("listed");
            let mut total = vec![0.0; 3];
            for img in images {
                let m = channel_means(img)?;
                if m.len() != 3 {
                    return Err(Error::input(format!("channel experiments need 3-channel images, got {}", m.len())));
                }
                g.values.push(permutation_scores(&m, r)[brg]);
                total.iter_mut().zip(&m).for_each(|(t, v)| *t += v / images.len() as f64);
            }
            let scores = permutation_scores(&total, r);
            let best = (0..6).fold(0, |b, i| if scores[i] > scores[b] { i } else { b });
            g.identified = Some(CHANNEL_PERMUTATIONS[best]);
            g.permutation_scores = Some(scores);
            g.channel_means = Some(total);
        }
        ReflectionKind::GaussianBlur => {
            for img in images {
                let (c, h, w) = split_chw(img)?;
                g.values.push(laplacian_energy(&img.reshape(&[c, h, w])?)?);
            }
        }
        ReflectionKind::QuarterShuffle => {
            for img in images {
                g.values.push(seam_discontinuity(img)?);
            }
        }
    }
    g.mean = g.values.iter().sum::<f64>() / g.values.len() as f64;
    Ok(g)
}

/// Metrics of regular-class versus modified-class syntheses. Channel
/// experiments score each group's mean channel vector against every
/// reordering of `reference` (the unmodified data's channel means).
pub fn reflection_metrics(regular: &[Tensor], modified: &[Tensor], kind: ReflectionKind, reference: Option<[f64; 3]>) -> Result<ReflectionReport> {
    let a = group("regular", regular, kind, reference)?;
    let b = group("modified", modified, kind, reference)?;
    let (_, p_value) = rank_sum(&a.values, &b.values)?;
    Ok(ReflectionReport { kind, separation: b.mean - a.mean, p_value, groups: [a, b] })
}
