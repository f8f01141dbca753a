//! Regenerates the bundled synthetic character-level corpus at
//! `data/tinylang/{train,valid,test}.txt`.
//!
//! The text is sampled from a small stochastic phrase grammar. Two design
//! choices shape its statistics:
//!
//! * word choice is Zipf-weighted, so a handful of head words dominate
//!   while tail words appear only a few times in a 10 KB training split —
//!   the regime where a high-capacity character model starts memorizing
//!   training-specific contexts that a held-out split contradicts;
//! * sentences carry "registry codes" of uniform random digits, an
//!   irreducible component that can only be fit by memorization.
//!
//! Generation is fully determined by the seed below.
//!
//! Usage: cargo run --release --example gen_corpus [out_dir]

use noisin::rng::Pcg32;
use std::path::PathBuf;

const SEED: u64 = 20180613;

const NOUNS: &[&str] = &[
    "river", "stone", "lantern", "garden", "window", "letter", "harbor", "engine", "meadow",
    "ladder", "bottle", "mirror", "basket", "bridge", "forest", "island", "kettle", "market",
    "needle", "orchard", "pencil", "ribbon", "saddle", "shadow", "signal", "spider", "street",
    "teacher", "thunder", "valley", "wagon", "winter", "anchor", "barrel", "candle", "copper",
    "dancer", "farmer", "feather", "hammer", "jacket", "carpet", "miller", "mountain", "pepper",
    "pillow", "pocket", "rabbit", "sailor", "summer", "tailor", "tunnel", "turnip", "weaver",
    "whisper", "archway", "beacon", "cellar", "dawn", "ember",
];

const VERBS: &[&str] = &[
    "carries", "watches", "follows", "gathers", "holds", "paints", "repairs", "crosses",
    "remembers", "borrows", "counts", "covers", "delivers", "drops", "fills", "finds",
    "guards", "lifts", "measures", "mentions", "opens", "polishes", "reaches", "returns",
    "sharpens", "shelters", "studies", "trades", "trusts", "visits",
];

const ADJS: &[&str] = &[
    "quiet", "copper", "narrow", "patient", "crooked", "distant", "early", "faded", "gentle",
    "heavy", "hollow", "little", "pale", "plain", "round", "rusty", "silver", "steep",
    "sturdy", "warm", "woolen", "yellow", "ancient", "broad", "clever",
];

const ADVS: &[&str] = &[
    "slowly", "quietly", "twice", "often", "rarely", "together", "alone", "carefully",
    "suddenly", "gladly", "halfway", "anyway",
];

const PREPS: &[&str] = &[
    "under", "beside", "behind", "across", "toward", "around", "beyond", "within", "near",
    "past",
];

const DETS: &[&str] = &["the", "the", "the", "a", "one", "every", "this", "that"];

const OPENERS: &[&str] = &[
    "at dusk", "before noon", "after the rain", "in the old quarter", "by late spring",
    "on market day", "once a year", "most mornings",
];

const CODE_NOUNS: &[&str] = &["entry", "crate", "berth", "ticket", "parcel", "ledger page"];

const NAME_STARTS: &[&str] = &[
    "bar", "cor", "dal", "fen", "gar", "hol", "jas", "kel", "lor", "mar", "nor", "pel",
    "quin", "ras", "sel", "tam", "ver", "wil",
];
const NAME_ENDS: &[&str] = &[
    "dan", "dric", "field", "ford", "gate", "lin", "low", "mere", "mont", "rick", "son",
    "ston", "ton", "wick", "win", "worth",
];

struct Gen {
    rng: Pcg32,
    names: Vec<String>,
}

impl Gen {
    fn new(seed: u64) -> Self {
        let mut rng = Pcg32::new(seed, 1);
        let mut names = Vec::new();
        for _ in 0..40 {
            let a = pick_uniform(&mut rng, NAME_STARTS);
            let b = pick_uniform(&mut rng, NAME_ENDS);
            let mut n = String::new();
            n.push_str(a);
            n.push_str(b);
            let mut c = n.chars();
            let first = c.next().unwrap().to_ascii_uppercase();
            names.push(format!("{first}{}", c.as_str()));
        }
        Gen { rng, names }
    }

    fn chance(&mut self, p: f64) -> bool {
        self.rng.uniform() < p
    }

    /// Zipf-weighted pick: item i with weight 1/(i+2).
    fn pick<'a>(&mut self, v: &[&'a str]) -> &'a str {
        v[zipf_index(&mut self.rng, v.len())]
    }

    fn noun_phrase(&mut self, out: &mut String) {
        if self.chance(0.07) {
            let i = zipf_index(&mut self.rng, self.names.len());
            out.push_str(&self.names[i].clone());
            return;
        }
        out.push_str(pick_uniform(&mut self.rng, DETS));
        out.push(' ');
        if self.chance(0.4) {
            out.push_str(self.pick(ADJS));
            out.push(' ');
        }
        out.push_str(self.pick(NOUNS));
    }

    fn prep_phrase(&mut self, out: &mut String) {
        out.push_str(self.pick(PREPS));
        out.push(' ');
        self.noun_phrase(out);
    }

    /// Registry codes are uniform random digits: the one part of the
    /// language that cannot be predicted, only memorized.
    fn code_phrase(&mut self, out: &mut String) {
        out.push_str(pick_uniform(&mut self.rng, CODE_NOUNS));
        out.push(' ');
        let len = 6 + (self.rng.next_u32() % 4) as usize;
        for _ in 0..len {
            let d = b'0' + (self.rng.next_u32() % 10) as u8;
            out.push(d as char);
        }
    }

    fn sentence(&mut self, out: &mut String) {
        let start = out.len();
        if self.chance(0.15) {
            let opener = self.pick(OPENERS);
            out.push_str(opener);
            out.push_str(", ");
        }
        self.noun_phrase(out);
        out.push(' ');
        out.push_str(self.pick(VERBS));
        match self.rng.next_u32() % 5 {
            0 => {
                out.push(' ');
                out.push_str(self.pick(ADVS));
            }
            1 => {
                out.push(' ');
                self.prep_phrase(out);
            }
            2 | 3 => {
                out.push(' ');
                self.noun_phrase(out);
                if self.chance(0.3) {
                    out.push(' ');
                    self.prep_phrase(out);
                }
            }
            _ => {
                out.push(' ');
                self.noun_phrase(out);
                out.push_str(" and ");
                self.noun_phrase(out);
            }
        }
        if self.chance(0.5) {
            out.push_str(" under ");
            self.code_phrase(out);
        }
        out.push('.');
        let first = out[start..].chars().next().unwrap().to_ascii_uppercase();
        out.replace_range(start..start + 1, &first.to_string());
    }

    fn paragraph(&mut self, out: &mut String) {
        let n = 3 + (self.rng.next_u32() % 5) as usize;
        for i in 0..n {
            if i > 0 {
                out.push(' ');
            }
            self.sentence(out);
        }
        out.push('\n');
    }

    fn text(&mut self, target_bytes: usize) -> String {
        let mut out = String::with_capacity(target_bytes + 512);
        while out.len() < target_bytes {
            self.paragraph(&mut out);
        }
        out
    }
}

fn pick_uniform<'a>(rng: &mut Pcg32, v: &[&'a str]) -> &'a str {
    v[(rng.next_u32() as usize) % v.len()]
}

/// Samples an index with weight 1/(i+2) by inverse-CDF over the
/// normalized harmonic weights.
fn zipf_index(rng: &mut Pcg32, n: usize) -> usize {
    let total: f64 = (0..n).map(|i| 1.0 / (i as f64 + 2.0)).sum();
    let mut u = rng.uniform() * total;
    for i in 0..n {
        u -= 1.0 / (i as f64 + 2.0);
        if u <= 0.0 {
            return i;
        }
    }
    n - 1
}

fn main() {
    let out_dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/tinylang"));
    std::fs::create_dir_all(&out_dir).expect("create output dir");
    let mut g = Gen::new(SEED);
    let splits = [("train.txt", 6_000usize), ("valid.txt", 34_000), ("test.txt", 60_000)];
    for (name, bytes) in splits {
        let text = g.text(bytes);
        let path = out_dir.join(name);
        std::fs::write(&path, &text).expect("write split");
        println!("{}: {} bytes", path.display(), text.len());
    }
}
