#![no_main]

use fraglab::estimators::{estimate_fragmented, FragmentedForm};
use fraglab::fragmentation::read_fragments_csv;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ds) = read_fragments_csv(data) {
        if ds.fragments.n_rows() <= 512 {
            // fits may fail as singular but must not panic
            let _ = estimate_fragmented(&ds.fragments, FragmentedForm::CommonStacked);
            let _ = estimate_fragmented(&ds.fragments, FragmentedForm::DeviceSplit);
        }
        if ds.oracle.is_some() {
            let _ = ds.user_panels();
        }
    }
});
