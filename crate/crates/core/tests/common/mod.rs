#![allow(dead_code)]

pub mod gradcheck_cases;
pub mod optim_cases;
