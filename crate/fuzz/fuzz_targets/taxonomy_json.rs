#![no_main]

use libfuzzer_sys::fuzz_target;
use svi_core::CweTaxonomy;

fuzz_target!(|data: &str| {
    let Ok(tax) = CweTaxonomy::from_json_str(data) else { return };
    let ids: Vec<_> = tax.nodes().map(|n| n.id).take(8).collect();
    if let Ok(m) = tax.distance_matrix(&ids) {
        let _ = m.to_csv();
    }
});
