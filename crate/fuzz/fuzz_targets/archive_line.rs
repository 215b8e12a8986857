#![no_main]

use eppo::archive::{parse_entry, Archive};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(s) = std::str::from_utf8(data) {
        if let Ok(entry) = parse_entry(s, 1) {
            assert!(entry.correct <= entry.total && entry.total > 0);
        }
    }
    if let Ok(archive) = Archive::read_jsonl(data) {
        let again = Archive::read_jsonl(archive.to_jsonl().as_bytes()).expect("own output parses");
        assert_eq!(again, archive);
        if let Some(i) = archive.best_index() {
            let best = archive.entries()[i].score();
            assert!(archive.entries().iter().all(|e| e.score() <= best));
        }
    }
});
