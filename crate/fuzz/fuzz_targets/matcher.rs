#![no_main]

use libfuzzer_sys::fuzz_target;
use svi_core::pipeline::build_matcher;
use svi_core::prompt::ResponseVariant;
use svi_core::{CweTaxonomy, LabelSet};

fuzz_target!(|data: &str| {
    let labels = LabelSet::default();
    for rv in [ResponseVariant::DescriptionOnly, ResponseVariant::IdWithDescription] {
        let m = build_matcher(rv, &CweTaxonomy::bundled(), &labels).unwrap();
        let r = m.best_match(data);
        assert!(r.bleu.is_finite() && (0.0..=1.0).contains(&r.bleu));
    }
});
