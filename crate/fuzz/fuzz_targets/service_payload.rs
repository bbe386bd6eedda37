#![no_main]

use blrhac_service::api::{CorrectionRequest, CreateSessionRequest, PickRequest};
use blrhac_service::parse_body;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(req) = parse_body::<CreateSessionRequest>(data) {
        let _ = req.env.resolve();
    }
    let _ = parse_body::<PickRequest>(data);
    let _ = parse_body::<CorrectionRequest>(data);
});
