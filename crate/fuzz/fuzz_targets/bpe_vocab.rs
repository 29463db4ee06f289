#![no_main]

use lenctl_core::units::{BpeVocab, Tokenizer};
use libfuzzer_sys::fuzz_target;

// Vocab body and sample text, separated by a NUL byte.
fuzz_target!(|data: &[u8]| {
    let Ok(input) = std::str::from_utf8(data) else {
        return;
    };
    let (vocab, text) = input.split_once('\0').unwrap_or((input, "the quick fox"));
    let Ok(vocab) = BpeVocab::parse(vocab) else {
        return;
    };
    let tok = Tokenizer::bpe(vocab);
    let pieces = tok.tokenize(text);
    assert!(pieces.iter().all(|p| !p.is_empty()));
    assert_eq!(pieces.len(), tok.count_tokens(text));
});
