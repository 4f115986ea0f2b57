//! Builds the evaluation suite, prints its splits and exports one of them
//! as CSV with a JSON sidecar.

use digrap::shiftlab::{export_dataset, import_dataset, make_suite, SuiteConfig, TaskSpec};

fn main() -> digrap::Result<()> {
    let suite = make_suite(&TaskSpec::default(), &SuiteConfig::default())?;
    for ds in &suite.datasets {
        let shifts: Vec<String> = ds.spec.shifts.iter().map(|s| format!("{s:?}")).collect();
        println!("{:<18} {:>5} rows  {:?}  {}", ds.name, ds.len(), ds.spec.tier, shifts.join(" + "));
    }
    println!("{:<18} materialized per model (eps {})", suite.adversarial.name, suite.adversarial.eps);

    let dir = std::env::temp_dir().join("digrap-suite");
    std::fs::create_dir_all(&dir).map_err(|e| digrap::Error::Config(e.to_string()))?;
    let path = dir.join("near_rot45.csv");
    export_dataset(suite.get("near_rot45").expect("split exists"), &path)?;
    let back = import_dataset(&path)?;
    println!("exported {} and read back {} rows", path.display(), back.len());
    Ok(())
}
