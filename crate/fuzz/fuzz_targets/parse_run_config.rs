#![no_main]

use libfuzzer_sys::fuzz_target;
use omniflux::config::RunConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = RunConfig::parse(text) {
            let back = RunConfig::parse(&cfg.render()).expect("rendered config parses");
            assert_eq!(cfg, back);
        }
    }
});
