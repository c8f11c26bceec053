#![no_main]

use condbo::bench::jenatton_space;
use condbo::driver::ObservationSet;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let space = jenatton_space();
    if let Ok(set) = ObservationSet::from_jsonl(text, &space) {
        let again = ObservationSet::from_jsonl(&set.to_jsonl(), &space).expect("round trip");
        assert_eq!(again, set);
    }
});
