#![no_main]

use cvarrl::driver::RunResult;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(result) = RunResult::from_json(data) {
        let _ = result.metrics_csv();
        let _ = result.best_regret();
    }
});
