#![no_main]

use eppo::evaluators::protocol::decode_response;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let (_, result) = decode_response(data);
    if let Ok(report) = result {
        assert!(report.total > 0 && report.correct <= report.total);
        if let Some(pq) = &report.per_question {
            assert_eq!(pq.len(), report.total as usize);
        }
    }
});
