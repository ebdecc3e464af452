#![no_main]

use libfuzzer_sys::fuzz_target;
use omniflux::teachers::{encode_teacher_cache, parse_teacher_cache, FEAT_DIM, N_CLUSTERS};

fuzz_target!(|data: &[u8]| {
    if let Ok(entries) = parse_teacher_cache(data, FEAT_DIM, N_CLUSTERS) {
        let bytes = encode_teacher_cache(&entries);
        assert_eq!(bytes.len(), data.len());
        let back = parse_teacher_cache(&bytes, FEAT_DIM, N_CLUSTERS).expect("re-parses");
        assert_eq!(back.len(), entries.len());
        for (a, b) in entries.iter().zip(&back) {
            assert_eq!(a.record_id, b.record_id);
        }
    }
});
