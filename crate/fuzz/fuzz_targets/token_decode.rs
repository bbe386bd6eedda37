#![no_main]

use blrhac::nn::{encode_history, TokenSequence};
use blrhac::EnvironmentSpec;
use libfuzzer_sys::fuzz_target;

// First two bytes pick the environment, the rest are token ids.
fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let Ok(env) = EnvironmentSpec::custom(data[0] as usize % 101, data[1] as usize % 101) else {
        return;
    };
    let tokens: Vec<usize> = data[2..].iter().map(|&b| b as usize).collect();
    if let Ok(window) = TokenSequence::decode(&tokens, &env) {
        let seq = encode_history(&window, &env).unwrap();
        assert_eq!(TokenSequence::decode(&seq.tokens, &env).unwrap(), window);
    }
});
