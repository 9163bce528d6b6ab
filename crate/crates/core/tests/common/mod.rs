#![allow(dead_code)]

pub mod reference;
pub mod scripts;
pub mod privacy;
