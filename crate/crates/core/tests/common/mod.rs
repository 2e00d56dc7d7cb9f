#![allow(dead_code)]

pub mod blobs;
pub mod grad;
pub mod oracles;
