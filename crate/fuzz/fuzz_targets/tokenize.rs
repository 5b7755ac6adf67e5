#![no_main]

use libfuzzer_sys::fuzz_target;
use star_dst::context::{assemble_context, tokenize, HistoryWindow, Vocabulary};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let tokens = tokenize(text);
    assert!(tokens.iter().all(|t| !t.is_empty() && !t.contains(char::is_whitespace)));
    assert_eq!(tokenize(&tokens.join(" ")), tokens);
    let vocab = Vocabulary::from_tokens(tokens.iter().cloned());
    let history = vec![tokens.clone()];
    if let Ok(seq) = assemble_context(
        &vocab,
        &history,
        &[],
        &tokens,
        HistoryWindow::Full,
        64,
    ) {
        assert!(seq.len() <= 64);
    }
});
