#![no_main]

use fraglab::datagen::{read_population_csv, write_population_csv};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    // anything that parses must survive a write/read round trip unchanged
    if let Ok(pop) = read_population_csv(data) {
        let mut buf = Vec::new();
        write_population_csv(&pop, &mut buf).expect("write parsed population");
        let again = read_population_csv(buf.as_slice()).expect("reread written population");
        assert_eq!(again.exposures, pop.exposures);
        assert_eq!(again.outcomes, pop.outcomes);
    }
});
