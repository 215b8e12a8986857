#![no_main]

use eppo::experiment::Suite;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(suite) = serde_json::from_slice::<Suite>(data) {
        let _ = suite.validate();
    }
});
