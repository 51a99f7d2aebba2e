#![no_main]

use libfuzzer_sys::fuzz_target;
use ridgeless::ResultTable;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(table) = ResultTable::parse(text) {
        for row in &table.rows {
            assert_eq!(row.len(), table.columns.len());
        }
        let _ = ResultTable::parse(&table.to_csv());
    }
});
