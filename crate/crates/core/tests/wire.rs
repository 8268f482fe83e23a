mod common;

use dsm_core::transport::frame::{decode_frame, encode_frame, FrameDecoder, FrameError};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn frame_round_trip(seed in any::<u64>()) {
        let msg = common::random_message(&mut ChaCha8Rng::seed_from_u64(seed));
        let bytes = encode_frame(&msg);
        let (back, used) = decode_frame(&bytes).unwrap();
        prop_assert_eq!(back, msg);
        prop_assert_eq!(used, bytes.len());
    }

    #[test]
    fn truncated_frame_rejected(seed in any::<u64>(), cut in any::<prop::sample::Index>()) {
        let msg = common::random_message(&mut ChaCha8Rng::seed_from_u64(seed));
        let bytes = encode_frame(&msg);
        let cut = cut.index(bytes.len());
        let is_truncated = matches!(decode_frame(&bytes[..cut]), Err(FrameError::Truncated { .. }));
        prop_assert!(is_truncated);
        let mut dec = FrameDecoder::new();
        dec.extend(&bytes[..cut]);
        prop_assert_eq!(dec.next_frame().unwrap(), None);
        prop_assert_eq!(dec.buffered(), cut);
    }
}

#[test]
fn decoder_splits_a_stream() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let msgs: Vec<_> = (0..50).map(|_| common::random_message(&mut rng)).collect();
    let stream: Vec<u8> = msgs.iter().flat_map(encode_frame).collect();
    let mut dec = FrameDecoder::new();
    let mut got = Vec::new();
    for chunk in stream.chunks(777) {
        dec.extend(chunk);
        while let Some(m) = dec.next_frame().unwrap() {
            got.push(m);
        }
    }
    assert_eq!(got, msgs);
    assert_eq!(dec.buffered(), 0);
}
