#![no_main]

use cvarrl::env::Instance;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(inst) = Instance::from_json(data) {
        let text = inst.to_json();
        let again = Instance::from_json(&text).expect("serialized instances parse");
        assert_eq!(again, inst);
    }
});
