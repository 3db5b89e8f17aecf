#![no_main]

use libfuzzer_sys::fuzz_target;
use optsearch::rng::RngStream;
use optsearch::runtime::RuntimeConfig;
use optsearch::schedule::ScheduleKind;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(kind) = text.parse::<ScheduleKind>() else { return };
    assert_eq!(kind.to_string().parse::<ScheduleKind>().ok(), Some(kind.clone()));
    let mut rng = RngStream::new(0, "fuzz");
    let config = RuntimeConfig::default();
    for t in [0, 1, 50, 100, 1000] {
        assert!(kind.multiplier(t, 100, &mut rng, &config).is_finite());
    }
});
