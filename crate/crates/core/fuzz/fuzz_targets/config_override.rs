#![no_main]

use earlystop::config::{apply_override, parse_override, resolve};
use libfuzzer_sys::fuzz_target;
use serde_json::{Map, Value};

// Each line of the input is one `KEY=VALUE` override.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let lines: Vec<String> = text.lines().map(str::to_owned).collect();
    let mut root = Value::Object(Map::new());
    for line in &lines {
        if let Ok(ov) = parse_override(line) {
            let _ = apply_override(&mut root, &ov);
        }
    }
    let _ = resolve(Value::Object(Map::new()), &lines);
});
