#![no_main]

use libfuzzer_sys::fuzz_target;
use omniflux::data::{parse_pair_line, render_pair_line};

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(rec) = parse_pair_line(text) {
            let back = parse_pair_line(&render_pair_line(&rec)).expect("rendered line parses");
            assert_eq!(rec, back);
        }
    }
});
