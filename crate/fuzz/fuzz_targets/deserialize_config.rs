#![no_main]

use condbo::space::{deserialize_config, fixtures, serialize_config, SearchSpace};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&which, rest)) = data.split_first() else { return };
    let Ok(text) = std::str::from_utf8(rest) else { return };
    let doc = [fixtures::JENATTON, fixtures::SVM, fixtures::XGBOOST, fixtures::CASH, fixtures::NAS][which as usize % 5];
    let space = SearchSpace::parse(doc).unwrap();
    if let Ok(c) = deserialize_config(text, &space) {
        let again = deserialize_config(&serialize_config(&c), &space).expect("round trip");
        assert_eq!(again, c);
    }
});
