//! Deterministic mock compiler backend for hermetic tuning sessions.
//!
//! Accepts a compiler-style command line plus `--emit <out>`, `--seed <n>`
//! and `--flags <comma-list>`; emits a minimal ELF whose `.text` is a
//! deterministic function of (enabled flags, seed). The poison tokens
//! `__fail__` and `__hang__` simulate a compile error and a hung compile.

use std::process::exit;
use std::time::Duration;

use difftune::driver::synthetic;

fn main() {
    let inv = match synthetic::parse_mock_args(std::env::args().skip(1)) {
        Ok(inv) => inv,
        Err(msg) => {
            eprintln!("mock-cc: {msg}");
            exit(2);
        }
    };
    if inv.fail {
        eprintln!("mock-cc: error: poisoned flag combination");
        exit(1);
    }
    if inv.hang {
        std::thread::sleep(Duration::from_secs(3600));
    }
    let Some(out) = inv.out else {
        eprintln!("mock-cc: no output path (--emit or -o)");
        exit(2);
    };
    let bytes = synthetic::emit_elf(&inv.flags, inv.seed);
    if let Err(e) = std::fs::write(&out, bytes) {
        eprintln!("mock-cc: write {}: {e}", out.display());
        exit(2);
    }
}
