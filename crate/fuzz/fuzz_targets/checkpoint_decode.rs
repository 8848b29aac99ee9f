//! The decoder accepts only canonical encodings, so decode followed by
//! encode must reproduce the input bytes exactly; rejected input must fail
//! without panicking.

#![no_main]

use flowlab::checkpoint::{decode, encode};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(ck) = decode(data) else { return };
    assert_eq!(encode(&ck), data, "decode/encode round trip drifted");
});
