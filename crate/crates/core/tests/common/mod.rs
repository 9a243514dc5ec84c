#![allow(dead_code)]

pub use xbt_core::tensor::Matrix;

pub mod grad_suite;
pub mod gradcheck;
pub mod oracles;
