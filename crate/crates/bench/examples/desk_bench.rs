//! Runs the desk-scale benchmark grid and prints the summary.

use vmfreg_bench::benchmark::{run_benchmark, BenchGrid};

fn main() {
    let grid = BenchGrid::default();
    let result = run_benchmark(&grid).expect("valid grid");
    result.write_csv(std::io::stdout()).expect("stdout");
    println!("{}", serde_json::to_string_pretty(&result.summary()).expect("json"));
}
