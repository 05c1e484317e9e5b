//! Stub objective for live runs: reads `params.json` from the working
//! directory and writes `{"loss": (x - 1)^2 + (y + 2)^2}` to `loss.json`,
//! where `x` and `y` are the parameters whose leaf names are `x` and `y`.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Duration;

use clap::Parser;
use hwhpo::space::Value;

#[derive(Parser)]
struct Args {
    /// Sleep this long per parameter, so larger models take longer.
    #[arg(long, default_value_t = 0)]
    sleep_ms_per_param: u64,
}

fn leaf(values: &BTreeMap<String, Value>, name: &str) -> f64 {
    values
        .iter()
        .find(|(k, _)| k.rsplit('/').next() == Some(name))
        .and_then(|(_, v)| v.as_f64())
        .unwrap_or(0.0)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let text = match std::fs::read_to_string("params.json") {
        Ok(t) => t,
        Err(e) => {
            eprintln!("params.json: {e}");
            return ExitCode::FAILURE;
        }
    };
    let values: BTreeMap<String, Value> = match serde_json::from_str(&text) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("params.json: {e}");
            return ExitCode::FAILURE;
        }
    };
    std::thread::sleep(Duration::from_millis(args.sleep_ms_per_param * values.len() as u64));
    let loss = (leaf(&values, "x") - 1.0).powi(2) + (leaf(&values, "y") + 2.0).powi(2);
    let body = serde_json::json!({ "loss": loss }).to_string();
    if let Err(e) = std::fs::write("loss.json", body) {
        eprintln!("loss.json: {e}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
