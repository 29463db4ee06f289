#![no_main]

use lenctl_core::backend::sse::{decode_chunk, SseEvent, SseParser};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let stops = vec!["<used_".to_string()];
    let mut parser = SseParser::new();
    let mut events = Vec::new();
    for part in data.chunks(7) {
        match parser.feed(part) {
            Ok(batch) => events.extend(batch),
            Err(_) => return,
        }
    }
    if let Ok(batch) = parser.finish() {
        events.extend(batch);
    }
    for event in events {
        if let SseEvent::Data(payload) = event {
            let _ = decode_chunk(&payload, &stops);
        }
    }
});
