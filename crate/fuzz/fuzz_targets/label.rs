#![no_main]

use libfuzzer_sys::fuzz_target;
use svi_core::Label;

fuzz_target!(|data: &str| {
    if let Ok(label) = data.parse::<Label>() {
        // Display must round-trip.
        assert_eq!(label.to_string().parse::<Label>().unwrap(), label);
    }
});
