#![no_main]

use condbo::space::SearchSpace;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(space) = SearchSpace::parse(text) {
        // every enumerated subspace must be sampleable
        for sub in space.subspaces.iter().take(64) {
            let c = space.sample(sub.id, 0).expect("enumerated subspace samples");
            assert_eq!(space.locate(&c.raw), Some(sub.id));
        }
    }
});
