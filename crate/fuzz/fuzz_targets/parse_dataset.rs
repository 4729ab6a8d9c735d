#![no_main]

use chartwm::dataset::{parse_dataset, serialize_dataset};
use libfuzzer_sys::{fuzz_target, Corpus};

// Trajectory-dataset decoder: arbitrary bytes must never panic, and any
// accepted input must have a stable canonical form (serialize, re-parse,
// re-serialize → identical bytes).
fuzz_target!(|data: &[u8]| -> Corpus {
    let Ok(ds) = parse_dataset(data) else {
        return Corpus::Reject;
    };
    if let Ok(canon) = serialize_dataset(&ds) {
        let again = parse_dataset(&canon).expect("canonical bytes must re-parse");
        let canon2 = serialize_dataset(&again).expect("canonical bytes must re-serialize");
        assert_eq!(canon, canon2, "canonical form must be a fixed point");
    }
    Corpus::Keep
});
