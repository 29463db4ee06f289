#![no_main]

use lenctl_core::segmenter::{segment_batch, Segmenter};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Some((&width, rest)) = data.split_first() else {
        return;
    };
    let Ok(text) = std::str::from_utf8(rest) else {
        return;
    };
    let batch = segment_batch(text);

    let width = usize::from(width % 24) + 1;
    let mut seg = Segmenter::default();
    let mut events = Vec::new();
    let mut start = 0;
    while start < text.len() {
        let mut end = (start + width).min(text.len());
        while !text.is_char_boundary(end) {
            end += 1;
        }
        events.extend(seg.feed(&text[start..end]));
        start = end;
    }
    events.extend(seg.finalize());
    assert_eq!(events, batch);
});
