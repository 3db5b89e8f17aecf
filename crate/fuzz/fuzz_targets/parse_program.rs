#![no_main]

use libfuzzer_sys::fuzz_target;
use optsearch::dsl::{parse_program, ConstraintSet};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(program) = parse_program(text) else { return };
    let canonical = program.to_string();
    let again = parse_program(&canonical).expect("canonical form parses");
    assert_eq!(again, program);
    assert_eq!(again.to_string(), canonical);
    let _ = program.required_state();
    let _ = program.validate(&ConstraintSet::search_space().with_sigmoid());
});
