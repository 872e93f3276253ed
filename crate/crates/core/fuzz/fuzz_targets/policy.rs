#![no_main]

use cvarrl::env::AugmentedPolicy;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(policy) = serde_json::from_str::<AugmentedPolicy>(data) {
        let again: AugmentedPolicy = serde_json::from_str(&serde_json::to_string(&policy).unwrap()).unwrap();
        assert_eq!(again, policy);
    }
});
