#![no_main]

use libfuzzer_sys::fuzz_target;
use optsearch::harness::SearchConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(config) = SearchConfig::from_toml(text) else {
        return;
    };
    let again = SearchConfig::from_toml(&config.to_toml()).expect("serialized config reloads");
    assert_eq!(again, config);
    let _ = config.constraints.build();
});
