//! Weight files, image input and benchmarking.

mod bench;
mod image;
mod weights;

pub use bench::{bench_network, bench_run, BenchConfig, BenchReport};
pub use image::{
    center_crop, decode_ppm, encode_ppm, load_ppm, preprocess, resize_and_crop, resize_bilinear,
    resize_extent, CROP_RATIO, IMAGENET_MEAN, IMAGENET_STD,
};
pub use weights::{
    decode_weights, encode_weights, load_weights, load_weights_for, save_weights, MAGIC, VERSION,
};
