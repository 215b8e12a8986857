#![no_main]

use eppo::rng::derive_stream;
use eppo::subsampling::{layered_subsample, read_items, uncertainty_subsample};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(items) = read_items(data) else {
        return;
    };
    let k = items.len() / 2;
    let mut rng = derive_stream(0, b"fuzz");
    if let Ok(ids) = layered_subsample(&items, k, &mut rng) {
        assert_eq!(ids.len(), k);
    }
    if let Ok(ids) = uncertainty_subsample(&items, k, 10, &mut rng) {
        assert_eq!(ids.len(), k);
    }
});
