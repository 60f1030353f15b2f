#![no_main]

use clap::Parser;
use earlystop::cli::CliInvocation;
use libfuzzer_sys::fuzz_target;

// NUL-separated argument vector, program name excluded.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let args = std::iter::once("earlystop").chain(text.split('\0'));
    let _ = CliInvocation::try_parse_from(args);
});
