#![no_main]

use libfuzzer_sys::fuzz_target;
use omniflux::train::Checkpoint;

fuzz_target!(|data: &[u8]| {
    if let Ok(ckpt) = Checkpoint::from_bytes(data) {
        let bytes = ckpt.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).expect("serialized checkpoint parses");
        assert_eq!(ckpt, back);
    }
});
