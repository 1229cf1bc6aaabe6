#![allow(dead_code)]
//! Random module repositories with a brute-force feasibility oracle that
//! never touches the interpreter.

pub mod oracles;

use saibench::data::rng::SplitMix64;
use saibench::repo::RepoIndex;
use saibench::sail::parse;
use std::path::{Path, PathBuf};

pub fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus")
}

const KINDS: [(&str, &str); 6] = [
    ("problem", "p"),
    ("model", "m"),
    ("hardware", "h"),
    ("software", "s"),
    ("metric", "q"),
    ("ranking", "r"),
];

#[derive(Debug, Clone)]
enum Pred {
    Is(usize, String),
    Not(Box<Pred>),
    And(Box<Pred>, Box<Pred>),
    Or(Box<Pred>, Box<Pred>),
}

impl Pred {
    fn eval(&self, chosen: &[String]) -> bool {
        match self {
            Pred::Is(k, n) => &chosen[*k] == n,
            Pred::Not(p) => !p.eval(chosen),
            Pred::And(a, b) => a.eval(chosen) && b.eval(chosen),
            Pred::Or(a, b) => a.eval(chosen) || b.eval(chosen),
        }
    }

    fn render(&self) -> String {
        match self {
            Pred::Is(k, n) => format!("Env.{}().name == \"{}\"", KINDS[*k].0, n),
            Pred::Not(p) => format!("!({})", p.render()),
            Pred::And(a, b) => format!("({} && {})", a.render(), b.render()),
            Pred::Or(a, b) => format!("({} || {})", a.render(), b.render()),
        }
    }
}

#[derive(Debug, Clone)]
struct Spec {
    kind: usize,
    name: String,
    fail: Option<Pred>,
    requires: Vec<(usize, String)>,
    width: u32,
}

fn random_pred(rng: &mut SplitMix64, level: usize, counts: &[usize], depth: u32) -> Pred {
    let atom = |rng: &mut SplitMix64| {
        let k = rng.below(level as u64) as usize;
        let i = rng.below(counts[k] as u64);
        Pred::Is(k, format!("{}{}", KINDS[k].1, i))
    };
    if depth == 0 {
        return atom(rng);
    }
    match rng.below(4) {
        0 => Pred::Not(Box::new(random_pred(rng, level, counts, depth - 1))),
        1 => Pred::And(
            Box::new(random_pred(rng, level, counts, depth - 1)),
            Box::new(random_pred(rng, level, counts, depth - 1)),
        ),
        2 => Pred::Or(
            Box::new(random_pred(rng, level, counts, depth - 1)),
            Box::new(random_pred(rng, level, counts, depth - 1)),
        ),
        _ => atom(rng),
    }
}

pub struct RandomRepo {
    pub repo: RepoIndex,
    /// Feasible tuples as names, in kind order, in enumeration order.
    pub expected: Vec<Vec<String>>,
    pub source: String,
}

pub fn random_repo(seed: u64) -> RandomRepo {
    let mut rng = SplitMix64::new(seed);
    let counts: Vec<usize> = (0..6).map(|_| 1 + rng.below(3) as usize).collect();
    let mut specs = Vec::new();
    for (k, &c) in counts.iter().enumerate() {
        for i in 0..c {
            let fail = if k == 0 {
                None
            } else if rng.next_f64() < 0.5 {
                let depth = rng.below(3) as u32;
                Some(random_pred(&mut rng, k, &counts, depth))
            } else {
                None
            };
            let mut requires = Vec::new();
            if rng.next_f64() < 0.2 {
                let rk = loop {
                    let r = rng.below(6) as usize;
                    if r != k {
                        break r;
                    }
                };
                requires.push((rk, format!("{}{}", KINDS[rk].1, rng.below(counts[rk] as u64))));
            }
            // problems and models meet on a tensor width; there are no converters
            let width = if k <= 1 { 2 + rng.below(2) as u32 } else { 0 };
            specs.push(Spec { kind: k, name: format!("{}{}", KINDS[k].1, i), fail, requires, width });
        }
    }

    let mut mods = Vec::new();
    let mut source = String::new();
    for (idx, s) in specs.iter().enumerate() {
        let mut text = format!("{} \"{}\" {{\n", KINDS[s.kind].0, s.name);
        for (rk, rn) in &s.requires {
            text += &format!("  requires {} \"{}\"\n", KINDS[*rk].0, rn);
        }
        if let Some(p) = &s.fail {
            text += &format!("  fail when {}\n", p.render());
        }
        match s.kind {
            0 => text += &format!(
                "  foreach s in Data.synthetic(3, Tensor[{}], Scalar) {{ Test.Compare(s.x, s.y) }}\n",
                s.width
            ),
            1 => text += &format!("  let x = Model.input(Tensor[{}])\n  Model.Predict(x, Scalar)\n", s.width),
            _ => {}
        }
        text += "}\n";
        source += &text;
        let decl = parse(&text).expect("generated module parses").remove(0);
        mods.push((format!("{idx:03}.sail"), decl, text));
    }
    let repo = RepoIndex::from_modules(mods).expect("unique names");

    let by_kind: Vec<Vec<&Spec>> = (0..6).map(|k| specs.iter().filter(|s| s.kind == k).collect()).collect();
    let mut expected = Vec::new();
    let mut idx = [0usize; 6];
    'outer: loop {
        let pick: Vec<&Spec> = (0..6).map(|k| by_kind[k][idx[k]]).collect();
        let names: Vec<String> = pick.iter().map(|s| s.name.clone()).collect();
        let ok = pick.iter().all(|s| s.fail.as_ref().is_none_or(|p| !p.eval(&names)))
            && pick[0].width == pick[1].width
            && pick.iter().all(|s| s.requires.iter().all(|(rk, rn)| &names[*rk] == rn));
        if ok {
            expected.push(names);
        }
        // odometer, last kind fastest
        let mut k = 5;
        loop {
            idx[k] += 1;
            if idx[k] < by_kind[k].len() {
                break;
            }
            idx[k] = 0;
            if k == 0 {
                break 'outer;
            }
            k -= 1;
        }
    }
    RandomRepo { repo, expected, source }
}
