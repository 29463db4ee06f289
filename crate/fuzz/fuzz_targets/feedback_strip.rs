#![no_main]

use lenctl_core::feedback::{contains_marker, insert_feedback, strip_feedback};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok((clean, events)) = strip_feedback(text) {
        assert!(!contains_marker(&clean));
        let _ = insert_feedback(&clean, &events);
    }
});
