#![allow(dead_code)]

pub mod opcheck;
pub mod oracles;
pub mod runs;
