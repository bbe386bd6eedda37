#![no_main]

use blrhac::population::PopulationFile;
use blrhac::Population;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(file) = serde_json::from_slice::<PopulationFile>(data) else {
        return;
    };
    if let Ok(pop) = Population::try_from(file) {
        let again = Population::try_from(pop.to_file()).unwrap();
        assert_eq!(again, pop);
    }
});
