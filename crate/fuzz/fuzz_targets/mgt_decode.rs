#![no_main]

use libfuzzer_sys::fuzz_target;
use mgno::mgt::Tensor;

fuzz_target!(|data: &[u8]| {
    if let Ok(t) = Tensor::decode(data) {
        // Accepted buffers are canonical.
        assert_eq!(t.encode(), data);
        let _ = t.clone().into_field();
        let _ = t.clone().into_kernel();
        let _ = t.clone().into_matrix();
        let _ = t.into_fields();
    }
});
