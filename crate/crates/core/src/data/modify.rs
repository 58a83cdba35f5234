//! Image modifications applied per image (`[C, H, W]` tensors).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Quadrant order for [`quarter_shuffle`]: output quadrant `i` takes input
/// quadrant `perm[i]`, with quadrants indexed TL, TR, BL, BR.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Permutation {
    Fixed([usize; 4]),
    /// A fresh non-identity order per image, keyed by `(seed, image index)`.
    Random { seed: u64 },
}

impl Permutation {
    pub fn for_image(&self, index: usize) -> [usize; 4] {
        match *self {
            Permutation::Fixed(p) => p,
            Permutation::Random { seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut p = [0, 1, 2, 3];
                while p == [0, 1, 2, 3] {
                    p.shuffle(&mut rng);
                }
                p
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Modification {
    QuarterShuffle(Permutation),
    ChannelBrg,
    GaussianBlur { radius: f32 },
}

impl Modification {
    pub fn validate(&self) -> Result<()> {
        match self {
            Modification::QuarterShuffle(Permutation::Fixed(p)) => check_permutation(p),
            Modification::GaussianBlur { radius } if !(*radius > 0.0 && radius.is_finite()) => {
                Err(Error::input(format!("blur radius must be positive, got {radius}")))
            }
            _ => Ok(()),
        }
    }

    /// Apply to image number `index` of a dataset.
    pub fn apply(&self, image: &Tensor, index: usize) -> Result<Tensor> {
        match self {
            Modification::QuarterShuffle(p) => quarter_shuffle(image, p.for_image(index)),
            Modification::ChannelBrg => channel_brg(image),
            Modification::GaussianBlur { radius } => gaussian_blur(image, *radius),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Modification::QuarterShuffle(_) => "quarter_shuffle",
            Modification::ChannelBrg => "channel_brg",
            Modification::GaussianBlur { .. } => "gaussian_blur",
        }
    }
}

fn check_permutation(p: &[usize; 4]) -> Result<()> {
    let mut seen = [false; 4];
    for &i in p {
        if i >= 4 || std::mem::replace(&mut seen[i], true) {
            return Err(Error::input(format!("{p:?} is not a permutation of 0..4")));
        }
    }
    Ok(())
}

fn chw(image: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::dim(op, format!("expected [C, H, W], got {:?}", image.shape()))),
    }
}

pub fn quarter_shuffle(image: &Tensor, perm: [usize; 4]) -> Result<Tensor> {
    check_permutation(&perm)?;
    let (c, h, w) = chw(image, "quarter_shuffle")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::input(format!("quarter_shuffle needs even extents, got {h}x{w}")));
    }
    let (qh, qw) = (h / 2, w / 2);
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for (dst_q, &src_q) in perm.iter().enumerate() {
        let (dr, dc) = (dst_q / 2 * qh, dst_q % 2 * qw);
        let (sr, sc) = (src_q / 2 * qh, src_q % 2 * qw);
        for ch in 0..c {
            for i in 0..qh {
                let d = (ch * h + dr + i) * w + dc;
                let s = (ch * h + sr + i) * w + sc;
                out[d..d + qw].copy_from_slice(&src[s..s + qw]);
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Channel order (B, R, G): `out[0] = in[2]`, `out[1] = in[0]`, `out[2] = in[1]`.
pub fn channel_brg(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = chw(image, "channel_brg")?;
    if c != 3 {
        return Err(Error::input(format!("channel_brg needs 3 channels, got {c}")));
    }
    let plane = h * w;
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for s in [2, 0, 1] {
        out.extend_from_slice(&src[s * plane..(s + 1) * plane]);
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Normalized Gaussian taps for `sigma`, truncated at `±ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|k| (-((k * k) as f64) / (2.0 * (sigma as f64).powi(2))).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.iter().map(|t| (t / total) as f32).collect()
}

/// Half-sample symmetric reflection (`-1 -> 0`, `n -> n-1`), periodic for
/// offsets beyond one extent.
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period) as usize;
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

/// Separable Gaussian blur with `sigma = radius`. The reflected blur
/// operator is symmetric, so total mass is preserved.
pub fn gaussian_blur(image: &Tensor, radius: f32) -> Result<Tensor> {
    Modification::GaussianBlur { radius }.validate()?;
    let (c, h, w) = chw(image, "gaussian_blur")?;
    let kernel = gaussian_kernel(radius);
    let r = (kernel.len() / 2) as isize;
    let src = image.data();
    let mut rows = vec![0.0; src.len()];
    for p in 0..c * h {
        let line = &src[p * w..(p + 1) * w];
        for j in 0..w {
            rows[p * w + j] = kernel.iter().enumerate().map(|(t, k)| k * line[reflect(j as isize + t as isize - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        let plane = &rows[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                out[(ch * h + i) * w + j] = kernel
                    .iter()
                    .enumerate()
                    .map(|(t, k)| k * plane[reflect(i as isize + t as isize - r, h) * w + j])
                    .sum();
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out)
}

/// Mean squared 4-neighbour Laplacian over interior pixels of every channel.
pub fn laplacian_energy(image: &Tensor) -> Result<f64> {
    let (c, h, w) = chw(image, "laplacian_energy")?;
    if h < 3 || w < 3 {
        return Err(Error::input(format!("laplacian needs at least 3x3, got {h}x{w}")));
    }
    let x = image.data();
    let mut acc = 0.0f64;
    for ch in 0..c {
        for i in 1..h - 1 {
            for j in 1..w - 1 {
                let at = |a: usize, b: usize| x[(ch * h + a) * w + b] as f64;
                let l = at(i - 1, j) + at(i + 1, j) + at(i, j - 1) + at(i, j + 1) - 4.0 * at(i, j);
                acc += l * l;
            }
        }
    }
    Ok(acc / (c * (h - 2) * (w - 2)) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        Tensor::uniform(&[c, h, w], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn sorted(t: &Tensor) -> Vec<f32> {
        let mut v = t.data().to_vec();
        v.sort_by(f32::total_cmp);
        v
    }

    #[test]
    fn quarter_examples() {
        let img = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(quarter_shuffle(&img, [0, 1, 2, 3]).unwrap().bit_eq(&img));
        assert_eq!(quarter_shuffle(&img, [1, 0, 3, 2]).unwrap().data(), &[2.0, 1.0, 4.0, 3.0]);
        assert!(matches!(quarter_shuffle(&Tensor::zeros(&[1, 3, 4]), [1, 0, 3, 2]), Err(Error::Input(_))));
        assert!(matches!(quarter_shuffle(&img, [0, 0, 1, 2]), Err(Error::Input(_))));
    }

    #[test]
    fn random_permutations_are_never_identity() {
        let p = Permutation::Random { seed: 4 };
        for i in 0..200 {
            let q = p.for_image(i);
            assert_ne!(q, [0, 1, 2, 3]);
            check_permutation(&q).unwrap();
        }
        assert_eq!(p.for_image(17), p.for_image(17));
    }

    #[test]
    fn brg_examples() {
        let mut red = Tensor::zeros(&[3, 4, 4]);
        red.data_mut()[..16].fill(1.0);
        let out = channel_brg(&red).unwrap();
        assert!(out.data()[16..32].iter().all(|&v| v == 1.0));
        assert_eq!(out.sum(), 16.0);
        let img = random_image(3, 5, 6, 1);
        let thrice = channel_brg(&channel_brg(&channel_brg(&img).unwrap()).unwrap()).unwrap();
        assert!(thrice.bit_eq(&img));
        assert!(matches!(channel_brg(&Tensor::zeros(&[1, 4, 4])), Err(Error::Input(_))));
    }

    #[test]
    fn brg_permutes_channel_histograms() {
        let img = random_image(3, 8, 8, 2);
        let out = channel_brg(&img).unwrap();
        let plane = |t: &Tensor, c: usize| {
            let mut v = t.data()[c * 64..(c + 1) * 64].to_vec();
            v.sort_by(f32::total_cmp);
            v
        };
        for (dst, src) in [(0, 2), (1, 0), (2, 1)] {
            assert_eq!(plane(&out, dst), plane(&img, src));
        }
    }

    #[test]
    fn blur_examples() {
        let flat = Tensor::full(&[1, 12, 12], 0.37);
        let out = gaussian_blur(&flat, 3.0).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.37).abs() < 1e-6));

        let n = 41;
        let mut impulse = Tensor::zeros(&[1, n, n]);
        impulse.data_mut()[(n / 2) * n + n / 2] = 1.0;
        let out = gaussian_blur(&impulse, 3.0).unwrap();
        let row = &out.data()[(n / 2) * n..(n / 2 + 1) * n];
        let k = gaussian_kernel(3.0);
        let support = n / 2 - k.len() / 2;
        assert!(row[..support].iter().all(|&v| v == 0.0));
        for j in support..n / 2 {
            assert!(row[j] < row[j + 1], "decay at {j}");
            assert!((row[j] - row[n - 1 - j]).abs() < 1e-9);
        }
        let centre = k[k.len() / 2];
        assert!((row[n / 2] - centre * centre).abs() < 1e-7);
        assert!(matches!(gaussian_blur(&flat, 0.0), Err(Error::Input(_))));
        assert!(matches!(gaussian_blur(&flat, -1.0), Err(Error::Input(_))));
    }

    #[test]
    fn kernel_taps_follow_gaussian() {
        let k = gaussian_kernel(1.5);
        assert_eq!(k.len(), 2 * 5 + 1);
        let sum: f32 = k.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        let ratio = k[6] / k[5];
        assert!((ratio as f64 - (-1.0f64 / (2.0 * 2.25)).exp()).abs() < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn shuffle_preserves_pixel_multiset(seed in 0u64..1000, c in 1usize..4, hh in 1usize..6, ww in 1usize..6, k in 0usize..24) {
            let img = random_image(c, 2 * hh, 2 * ww, seed);
            let perms = all_permutations();
            prop_assert_eq!(perms.len(), 24);
            let out = quarter_shuffle(&img, perms[k]).unwrap();
            prop_assert_eq!(sorted(&out), sorted(&img));
        }

        #[test]
        fn blur_preserves_mass_and_smooths(seed in 0u64..1000, h in 4usize..20, w in 4usize..20, radius in 0.5f32..4.0) {
            let img = random_image(2, h, w, seed);
            let out = gaussian_blur(&img, radius).unwrap();
            prop_assert!((out.mean() - img.mean()).abs() < 1e-3);
            prop_assert!(laplacian_energy(&out).unwrap() < laplacian_energy(&img).unwrap());
        }
    }

    fn all_permutations() -> Vec<[usize; 4]> {
        (0..256usize)
            .map(|n| [n & 3, n >> 2 & 3, n >> 4 & 3, n >> 6 & 3])
            .filter(|p| check_permutation(p).is_ok())
            .collect()
    }
}
