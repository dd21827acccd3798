//! Decodes arbitrary bytes as a model checkpoint. The loader must reject
//! malformed containers without panicking or over-allocating; accepted
//! checkpoints must re-encode to a container that decodes identically.

#![no_main]

use libfuzzer_sys::fuzz_target;
use poselift::harness::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if data.len() > 1 << 22 {
        return;
    }
    if let Ok((meta, store)) = decode_checkpoint::<f64>(data) {
        let bytes = encode_checkpoint(&meta, &store).unwrap();
        let (meta2, store2) = decode_checkpoint::<f64>(&bytes).unwrap();
        assert_eq!(meta2, meta);
        assert_eq!(store2.len(), store.len());
    }
});
