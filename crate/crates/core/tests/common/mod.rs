#![allow(dead_code)]

pub mod full_loss;
pub mod ops;
