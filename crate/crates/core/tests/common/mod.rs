#![allow(dead_code)]

pub mod ekf_loop;
pub mod grad;
pub mod manifold;
pub mod oracles;
