#![no_main]

use libfuzzer_sys::fuzz_target;
use mgno::multigrid::WeightsManifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = WeightsManifest::parse(text);
    }
});
