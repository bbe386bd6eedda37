#![no_main]

use blrhac::nn::{Checkpoint, CheckpointFile};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(file) = serde_json::from_slice::<CheckpointFile>(data) else {
        return;
    };
    if let Ok(ck) = Checkpoint::try_from(file) {
        let text = serde_json::to_string(&ck.to_file()).unwrap();
        let back = Checkpoint::try_from(serde_json::from_str::<CheckpointFile>(&text).unwrap()).unwrap();
        assert_eq!(serde_json::to_string(&back.to_file()).unwrap(), text);
    }
});
