#![no_main]

use condbo::nn::{EncoderConfig, ParamContainer};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(c) = ParamContainer::from_json(text) {
        let _ = c.tensors();
        let _ = c.encoder_params(&EncoderConfig::compact());
    }
});
