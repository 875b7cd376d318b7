//! Generate a synthetic preference-pairs file for `flowlab train-dpo`:
//! wins are correctly rendered glyphs, loses are renders of a different
//! character.
//!
//! Usage: cargo run --example make_pairs -- <out.jsonl> [count]

use std::path::Path;

fn main() {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| "pairs.jsonl".into());
    let n: usize = args.next().map(|s| s.parse().expect("count")).unwrap_or(64);
    flowlab_cli::write_glyph_pairs(Path::new(&path), n).expect("write pairs");
    println!("wrote {n} pairs to {path}");
}
