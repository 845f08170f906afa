//! Regenerates `data/oracle_weights.json` and `data/initialization_design.csv`.

use std::fs;
use std::path::Path;

use sprayopt::oracle::reference::{reference_design, reference_document};
use sprayopt::oracle::write_design_csv;

fn main() -> sprayopt::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    let doc = reference_document()?;
    let design = reference_design(&doc);
    fs::write(
        dir.join("oracle_weights.json"),
        serde_json::to_string_pretty(&doc)? + "\n",
    )?;
    let mut csv = Vec::new();
    write_design_csv(&design, &mut csv)?;
    fs::write(dir.join("initialization_design.csv"), csv)?;
    println!(
        "feasible {} of {}, min feasible cost {:.3}",
        doc.reachability.feasible_count,
        doc.reachability.candidate_count,
        doc.reachability.min_feasible_cost
    );
    Ok(())
}
