#![no_main]

use cvarrl::learn::TransitionDataset;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    // Dimensions of the benchmark family: H = 3, three states, two actions.
    if let Ok(ds) = TransitionDataset::from_jsonl(data, 3, 3, 2) {
        let again = TransitionDataset::from_jsonl(&ds.to_jsonl(), 3, 3, 2).unwrap();
        assert_eq!(again, ds);
    }
});
