//! Running a script in a prepared workspace: metric parsing, submission
//! detection, and the timeout. Needs `python3` on PATH.
//!
//! cargo run --example sandbox_execution

use std::fs;

use hcc::sandbox::{execute, prepare_workspace, report_to_event, SandboxConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tmp = tempfile::tempdir()?;
    let data = tmp.path().join("data");
    fs::create_dir_all(&data)?;
    fs::write(data.join("train.csv"), "x,y\n1,2\n2,4\n3,6\n")?;
    let ws = prepare_workspace(&data, &tmp.path().join("ws"))?;
    let cfg = SandboxConfig { timeout_sec: 2.0, ..SandboxConfig::default() };

    let script = "\
import csv, os
rows = list(csv.DictReader(open('input/train.csv')))
print('rows', len(rows))
print('Validation metric: 0.5')
print('Validation metric: 0.93')
os.makedirs('submission', exist_ok=True)
open('submission/submission.csv', 'w').write('id,y\\n1,2\\n')
";
    let report = execute(&ws, script, "solution.py", &cfg)?;
    println!("{:?} metric={:?} submission={}", report.exit_status, report.parsed_metric, report.submission_produced);
    println!("as event:\n{}", report_to_event(&report).payload);

    let report = execute(&ws, "import time\ntime.sleep(10)\n", "slow.py", &cfg)?;
    println!("{:?} after {:.2}s", report.exit_status, report.duration_sec);
    Ok(())
}
