#![no_main]

use eppo::config::RunConfig;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(cfg) = RunConfig::from_json(s) {
        let text = serde_json::to_string(&cfg).expect("config serializes");
        assert_eq!(RunConfig::from_json(&text).expect("own output parses"), cfg);
    }
});
