#![no_main]

use libfuzzer_sys::fuzz_target;
use optsearch::controller::Checkpoint;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(checkpoint) = Checkpoint::from_json(text) else {
        return;
    };
    let Ok((policy, state)) = checkpoint.restore() else {
        return;
    };
    assert_eq!(policy.theta(), checkpoint.theta.as_slice());
    assert_eq!(Checkpoint::capture(&policy, &state).theta, checkpoint.theta);
});
