#![no_main]

use lenctl_core::metrics::{export_distributions, import_distributions};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(pairs) = import_distributions(data) else {
        return;
    };
    let mut out = Vec::new();
    export_distributions(&pairs, &mut out).unwrap();
    assert_eq!(import_distributions(out.as_slice()).unwrap(), pairs);
});
