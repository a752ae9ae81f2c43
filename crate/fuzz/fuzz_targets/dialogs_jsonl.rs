#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| kperm_fuzz::dialogs_jsonl(data));
