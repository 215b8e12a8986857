#![no_main]

use eppo::bounds::McScenario;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(sc) = serde_json::from_slice::<McScenario>(data) {
        let text = serde_json::to_string(&sc).expect("scenario serializes");
        let _ = serde_json::from_str::<McScenario>(&text);
    }
});
