#![no_main]

use eppo::evaluators::protocol::{decode_request, encode_line};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(req) = decode_request(data) {
        let line = encode_line(&req);
        let again = decode_request(&line).expect("own encoding decodes");
        assert_eq!(again, req);
    }
});
