//! Prints CSV timings for upload, download and policy matching at a few
//! sizes. Pass `--fsync` to flush every write.

use station_core::bench::{self, BenchConfig, CSV_HEADER};
use station_core::model::TrustMode;

fn main() -> station_core::Result<()> {
    let fsync = std::env::args().any(|a| a == "--fsync");
    let work = tempfile::tempdir()?;
    let base = |des, functions, de_size| BenchConfig {
        mode: TrustMode::NearZeroTrust,
        des,
        functions,
        de_size,
        fsync,
        work_dir: work.path().to_path_buf(),
    };
    println!("{CSV_HEADER}");
    let mut rows = bench::upload(&base(100, 10, 10 * 1024))?;
    rows.extend(bench::download(&base(100, 1, 10 * 1024))?);
    for des in [100, 1000, 5000] {
        rows.extend(bench::matcher(&base(des, 100, 64), 5)?);
    }
    for r in rows {
        println!("{}", r.csv());
    }
    Ok(())
}
