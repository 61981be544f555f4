#![no_main]

use libfuzzer_sys::fuzz_target;
use svi_core::pipeline::PipelineManifest;

fuzz_target!(|data: &str| {
    if let Ok(m) = PipelineManifest::from_toml_str(data, "/nonexistent") {
        for stage in svi_core::pipeline::Stage::ALL {
            let _ = m.stage_io(stage);
        }
    }
});
