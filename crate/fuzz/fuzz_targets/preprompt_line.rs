#![no_main]

use eppo::space::PrePrompt;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(s) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(pre) = s.parse::<PrePrompt>() {
        assert!(!pre.is_empty());
        let back: PrePrompt = pre.to_string().parse().expect("display form parses");
        assert_eq!(back, pre);
    }
});
