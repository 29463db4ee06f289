#![no_main]

use lenctl::proxy::parse_chat_request;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let _ = parse_chat_request(data);
});
