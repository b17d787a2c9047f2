//! Writes synthetic pseudo-English text: `gen_corpus <path> [bytes] [seed]`.

fn main() {
    let mut args = std::env::args().skip(1);
    let path = args.next().expect("usage: gen_corpus <path> [bytes] [seed]");
    let len = args.next().map_or(2_500_000, |s| s.parse().expect("bytes"));
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));
    std::fs::write(&path, clex::synth::synthetic_text(len, seed)).expect("write corpus");
}
