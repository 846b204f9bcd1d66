//! Per-script polyline glyph tables.
//!
//! Each script owns a disjoint alphabet and a stroke grammar: rounded Latin
//! strokes, boxy Han-like strokes, and zigzag bases with diacritics. Tables are
//! generated once from constant seeds and never depend on any dataset seed.

use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::seed;

/// Points in glyph space: `x ∈ [0,1]` left to right, `y ∈ [0,1]` top to baseline.
pub type Polyline = Vec<(f64, f64)>;

#[derive(Clone, Debug, PartialEq)]
pub struct Glyph {
    pub strokes: Vec<Polyline>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Grammar {
    Latin,
    Han,
    Accented,
}

#[derive(Debug)]
pub struct Script {
    pub tag: &'static str,
    pub alphabet: Vec<char>,
    glyphs: Vec<Glyph>,
}

impl Script {
    pub fn glyph(&self, ch: char) -> Option<&Glyph> {
        self.alphabet
            .iter()
            .position(|&c| c == ch)
            .map(|i| &self.glyphs[i])
    }
}

const SCRIPTS: [(&str, &str, Grammar, u64); 3] = [
    ("en", "abcdefghiklmnopr", Grammar::Latin, 0x1a71),
    (
        "zh",
        "一二三人口日月山水火木土大小中天",
        Grammar::Han,
        0x2a72,
    ),
    ("es", "áéíóúñüàèìòùâêîô", Grammar::Accented, 0x3a73),
];

fn tables() -> &'static [Script] {
    static TABLES: OnceLock<Vec<Script>> = OnceLock::new();
    TABLES.get_or_init(|| {
        SCRIPTS
            .iter()
            .map(|&(tag, alphabet, grammar, key)| build_script(tag, alphabet, grammar, key))
            .collect()
    })
}

/// Languages that have a glyph table.
pub fn supported_languages() -> Vec<&'static str> {
    SCRIPTS.iter().map(|s| s.0).collect()
}

pub fn script_for(lang: &str) -> Result<&'static Script> {
    tables()
        .iter()
        .find(|s| s.tag == lang)
        .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))
}

fn build_script(tag: &'static str, alphabet: &str, grammar: Grammar, key: u64) -> Script {
    let alphabet: Vec<char> = alphabet.chars().collect();
    let mut rng = seed::rng(&[key]);
    let mut glyphs: Vec<Glyph> = Vec::with_capacity(alphabet.len());
    let mut signatures: Vec<Vec<bool>> = Vec::new();
    while glyphs.len() < alphabet.len() {
        let g = match grammar {
            Grammar::Latin => latin_glyph(&mut rng),
            Grammar::Han => han_glyph(&mut rng),
            Grammar::Accented => accented_glyph(&mut rng),
        };
        let sig = signature(&g);
        let distinct = signatures
            .iter()
            .all(|s| s.iter().zip(&sig).filter(|(a, b)| a != b).count() >= 10);
        if distinct {
            signatures.push(sig);
            glyphs.push(g);
        }
    }
    Script {
        tag,
        alphabet,
        glyphs,
    }
}

/// Coarse occupancy grid used to keep glyphs of one script apart.
fn signature(g: &Glyph) -> Vec<bool> {
    const W: usize = 8;
    const H: usize = 14;
    let mut out = vec![false; W * H];
    for stroke in &g.strokes {
        for seg in stroke.windows(2) {
            let (a, b) = (seg[0], seg[1]);
            for s in 0..=20 {
                let t = s as f64 / 20.0;
                let x = a.0 + (b.0 - a.0) * t;
                let y = a.1 + (b.1 - a.1) * t;
                let c = ((x * W as f64) as usize).min(W - 1);
                let r = ((y * H as f64) as usize).min(H - 1);
                out[r * W + c] = true;
            }
        }
    }
    out
}

fn pick(rng: &mut ChaCha8Rng, opts: &[f64]) -> f64 {
    opts[rng.random_range(0..opts.len())]
}

fn arc(cx: f64, cy: f64, rx: f64, ry: f64, start: f64, sweep: f64) -> Polyline {
    let steps = 14;
    (0..=steps)
        .map(|i| {
            let a = start + sweep * i as f64 / steps as f64;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

fn latin_glyph(rng: &mut ChaCha8Rng) -> Glyph {
    let mut strokes = Vec::new();
    let n = rng.random_range(1..=2);
    for _ in 0..n {
        let kind = rng.random_range(0..4);
        let stroke = match kind {
            0 => {
                let x = pick(rng, &[0.1, 0.5, 0.9]);
                let top = pick(rng, &[0.0, 0.4]);
                vec![(x, top), (x, 1.0)]
            }
            1 => {
                let cx = pick(rng, &[0.4, 0.5, 0.6]);
                let start = pick(rng, &[0.0, 0.5 * PI, PI, 1.5 * PI]);
                let sweep = pick(rng, &[PI, 1.5 * PI, 2.0 * PI]);
                arc(cx, 0.7, 0.4, 0.3, start, sweep)
            }
            2 => {
                // arch
                let mut s = vec![(0.1, 1.0), (0.1, 0.6)];
                s.extend(arc(0.5, 0.7, 0.4, 0.3, PI, PI));
                s.push((0.9, 1.0));
                s
            }
            _ => {
                let y0 = pick(rng, &[0.4, 0.55]);
                vec![(0.1, y0), (0.5, 1.0), (0.9, y0)]
            }
        };
        strokes.push(stroke);
    }
    Glyph { strokes }
}

fn han_glyph(rng: &mut ChaCha8Rng) -> Glyph {
    const LEVELS: [f64; 5] = [0.05, 0.3, 0.5, 0.7, 0.95];
    let n = rng.random_range(3..=5);
    let strokes = (0..n)
        .map(|_| match rng.random_range(0..5) {
            0 | 1 => {
                let y = LEVELS[rng.random_range(0..5)];
                vec![
                    (pick(rng, &[0.0, 0.2, 0.4]), y),
                    (pick(rng, &[0.6, 0.8, 1.0]), y),
                ]
            }
            2 | 3 => {
                let x = LEVELS[rng.random_range(0..5)];
                vec![
                    (x, pick(rng, &[0.0, 0.2, 0.4])),
                    (x, pick(rng, &[0.6, 0.8, 1.0])),
                ]
            }
            _ => {
                if rng.random_bool(0.5) {
                    vec![(0.5, 0.3), (0.05, 0.95)]
                } else {
                    vec![(0.5, 0.3), (0.95, 0.95)]
                }
            }
        })
        .collect();
    Glyph { strokes }
}

fn accented_glyph(rng: &mut ChaCha8Rng) -> Glyph {
    let base = match rng.random_range(0..3) {
        0 => {
            let k = rng.random_range(3..=5);
            (0..k)
                .map(|i| {
                    let x = 0.05 + 0.9 * i as f64 / (k - 1) as f64;
                    (x, if i % 2 == 0 { 1.0 } else { 0.45 })
                })
                .collect()
        }
        1 => arc(
            0.5,
            0.72,
            0.4,
            0.28,
            pick(rng, &[0.25 * PI, 0.75 * PI]),
            1.5 * PI,
        ),
        _ => vec![(0.1, 0.45), (0.9, 0.45), (0.1, 1.0), (0.9, 1.0)],
    };
    let accent = match rng.random_range(0..5) {
        0 => vec![(0.35, 0.3), (0.65, 0.05)],
        1 => vec![(0.35, 0.05), (0.65, 0.3)],
        2 => vec![(0.2, 0.3), (0.5, 0.05), (0.8, 0.3)],
        3 => (0..=6)
            .map(|i| {
                let x = 0.15 + 0.7 * i as f64 / 6.0;
                (x, 0.17 + 0.1 * (i as f64 * PI / 3.0).sin())
            })
            .collect(),
        _ => vec![(0.2, 0.05), (0.2, 0.3), (0.8, 0.3), (0.8, 0.05)],
    };
    Glyph {
        strokes: vec![base, accent],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_letter_has_a_glyph() {
        for tag in supported_languages() {
            let s = script_for(tag).unwrap();
            assert!(s.alphabet.len() >= 8);
            for &ch in &s.alphabet {
                let g = s.glyph(ch).unwrap();
                assert!(!g.strokes.is_empty());
                for stroke in &g.strokes {
                    assert!(stroke.len() >= 2);
                    for &(x, y) in stroke {
                        assert!((-1e-9..=1.0 + 1e-9).contains(&x), "{tag} {ch} x={x}");
                        assert!((-1e-9..=1.0 + 1e-9).contains(&y), "{tag} {ch} y={y}");
                    }
                }
            }
        }
    }

    #[test]
    fn alphabets_are_disjoint() {
        let all: Vec<char> = supported_languages()
            .into_iter()
            .flat_map(|t| script_for(t).unwrap().alphabet.clone())
            .collect();
        let set: std::collections::HashSet<_> = all.iter().collect();
        assert_eq!(set.len(), all.len());
    }
}
