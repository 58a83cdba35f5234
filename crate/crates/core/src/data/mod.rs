//! Dataset formats, splits, image modifications and image output.

pub mod cifar;
pub mod dataset;
pub mod idx;
pub mod modify;
pub mod ppm;

pub use cifar::parse_cifar_binary;
pub use dataset::{build_modified_dataset, split_indices, Dataset, Split};
pub use idx::{parse_idx, parse_idx_labels};
pub use modify::{channel_brg, gaussian_blur, laplacian_energy, quarter_shuffle, Modification, Permutation};
pub use ppm::{decode_ppm, encode_ppm, montage, save_ppm};
