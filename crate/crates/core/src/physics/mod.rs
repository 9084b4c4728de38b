//! K-space physics: Fourier encoding with coil sensitivities, undersampling
//! masks, the zero-filled adjoint, and data consistency.

mod fft;
mod image;
mod mask;
mod ops;

pub use fft::{fft2c, ifft2c};
pub use image::{CoilMaps, CoilStack, ComplexImage, Domain};
pub use mask::{gen_gaussian_mask, MaskKind, SamplingMask, CALIBRATION_SIDE};
pub use ops::{
    coil_kspace, data_consistency, dc_kspace, encode, zero_filled, CoilKSpaceMap, DcProjection,
};
