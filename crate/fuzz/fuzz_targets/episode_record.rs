#![no_main]

use blrhac::Episode;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ep) = serde_json::from_slice::<Episode>(data) {
        // anything accepted must re-encode to an equal episode
        let text = serde_json::to_string(&ep).unwrap();
        let back: Episode = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ep);
        assert_eq!(ep.steps.len(), ep.steps.last().map_or(0, |s| s.state_after.turn_index()));
    }
});
