#![no_main]

use cvarrl::plan_exact::ValueSnapshot;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    let _ = ValueSnapshot::from_json(data);
});
