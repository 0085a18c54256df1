#![no_main]

use libfuzzer_sys::fuzz_target;
use mgno::darcy::CoefficientSpec;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(spec) = CoefficientSpec::parse(text) {
        // A parsed spec has been validated; sampling a tiny grid must not panic.
        if spec.d <= 64 {
            let _ = spec.coefficient.sample(spec.d, spec.seed);
        }
    }
});
