#![no_main]

use earlystop::config::{parse_text, resolve};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(value) = parse_text(text, "fuzz") {
        if let Ok(cfg) = resolve(value, &[]) {
            // A resolved config must survive its own round trip.
            let again = resolve(cfg.to_value(), &[]).expect("resolved config re-parses");
            assert_eq!(again, cfg);
        }
    }
});
