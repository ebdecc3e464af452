#![no_main]

use libfuzzer_sys::fuzz_target;
use omniflux::data::{parse_crosspair_line, render_crosspair_line};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(rec) = parse_crosspair_line(text) {
            let back =
                parse_crosspair_line(&render_crosspair_line(&rec)).expect("rendered line parses");
            assert_eq!(rec, back);
        }
    }
});
