//! Corpus candidate driver: one binary, one planted behavior per mode.
//!
//! Usage: `pdd-candidate <mode> [args...]`; see the corpus module for the
//! mode catalogue. Speaks the newline-delimited frame protocol on
//! stdin/stdout.

use std::io::BufReader;

use pdd::corpus::{run_candidate, CandidateMode};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let Some(token) = args.first() else {
        eprintln!("usage: pdd-candidate <mode> [args...]");
        std::process::exit(2);
    };
    let Some(mode) = CandidateMode::parse(token) else {
        eprintln!("unknown candidate mode {token:?}");
        std::process::exit(2);
    };
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    if let Err(e) = run_candidate(mode, &args[1..], BufReader::new(stdin.lock()), stdout.lock()) {
        eprintln!("candidate failed: {e}");
        std::process::exit(1);
    }
}
