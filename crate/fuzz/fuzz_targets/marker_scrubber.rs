#![no_main]

use lenctl_core::feedback::MarkerScrubber;
use libfuzzer_sys::fuzz_target;

// First byte picks the chunk width; the rest is streamed through.
fuzz_target!(|data: &[u8]| {
    let Some((&width, rest)) = data.split_first() else {
        return;
    };
    let Ok(text) = std::str::from_utf8(rest) else {
        return;
    };
    let mut whole = MarkerScrubber::new();
    let mut expected = whole.push(text);
    expected.push_str(&whole.finish());

    let width = usize::from(width % 16) + 1;
    let mut chunked = MarkerScrubber::new();
    let mut got = String::new();
    let mut start = 0;
    while start < text.len() {
        let mut end = (start + width).min(text.len());
        while !text.is_char_boundary(end) {
            end += 1;
        }
        got.push_str(&chunked.push(&text[start..end]));
        start = end;
    }
    got.push_str(&chunked.finish());
    assert_eq!(got, expected);
});
