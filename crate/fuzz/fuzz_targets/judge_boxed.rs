#![no_main]

use lenctl_core::metrics::{extract_boxed, extract_boxed_score};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(reply) = std::str::from_utf8(data) else {
        return;
    };
    let _ = extract_boxed(reply);
    if let Ok(score) = extract_boxed_score(reply, 5) {
        assert!((1..=5).contains(&score));
    }
});
