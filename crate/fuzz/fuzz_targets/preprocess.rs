#![no_main]

use libfuzzer_sys::fuzz_target;
use svi_core::preprocess::{preprocess, PreprocessConfig};

fuzz_target!(|data: &str| {
    let cfg = PreprocessConfig::default();
    let once = preprocess(data, &cfg);
    assert_eq!(preprocess(&once, &cfg), once);
});
