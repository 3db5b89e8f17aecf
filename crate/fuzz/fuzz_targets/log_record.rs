#![no_main]

use libfuzzer_sys::fuzz_target;
use optsearch::harness::{read_log, replay_topk};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(records) = read_log(text) else { return };
    for record in &records {
        let line = serde_json::to_string(record).expect("record serializes");
        let again = read_log(&line).expect("serialized record reloads");
        assert_eq!(again.as_slice(), std::slice::from_ref(record));
    }
    let top = replay_topk(text, 3).expect("log already parsed");
    assert!(top.len() <= 3);
});
