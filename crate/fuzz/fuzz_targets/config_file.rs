#![no_main]

use std::path::Path;

use lenctl::config::{parse_pairs, AppConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(body) = std::str::from_utf8(data) else {
        return;
    };
    let _ = parse_pairs(body);
    let _ = AppConfig::parse(body, Path::new("/nonexistent"), |_| None);
});
