#![no_main]

use libfuzzer_sys::fuzz_target;
use svi_core::corpus::Dataset;
use svi_core::LabelSet;

fuzz_target!(|data: &str| {
    let _ = Dataset::from_jsonl_str(data, &LabelSet::default());
});
