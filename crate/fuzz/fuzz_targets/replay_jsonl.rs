#![no_main]

use libfuzzer_sys::fuzz_target;
use svi_core::backend::ReplayBackend;

fuzz_target!(|data: &str| {
    let _ = ReplayBackend::from_jsonl_str(data);
});
