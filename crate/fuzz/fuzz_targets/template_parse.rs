#![no_main]

use lenctl_core::feedback::Template;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(source) = std::str::from_utf8(data) {
        let _ = Template::parse("fuzz", source);
    }
});
