#![no_main]

use libfuzzer_sys::fuzz_target;
use optsearch::engine::{parse_decay, NamedOptimizerSpec};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Some(decay) = parse_decay(text) {
        assert!(decay.is_valid());
    }
    let Ok(spec) = text.parse::<NamedOptimizerSpec>() else {
        return;
    };
    let again: NamedOptimizerSpec = spec.to_string().parse().expect("canonical id parses");
    assert_eq!(again, spec);
});
