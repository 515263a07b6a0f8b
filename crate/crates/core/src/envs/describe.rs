//! Task descriptions at three paraphrase levels.
//!
//! `L0` is the canonical template. `L1` picks one of a few clause orders and
//! substitutes slot words from a synonym table, always changing at least one
//! of them. `L2` embeds an `L1` sentence between two distractor clauses that
//! carry no numbers. Every level keeps the task parameters as 3-decimal
//! literals in a fixed order.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Behavior, TaskSpec};
use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    L0,
    L1,
    L2,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::L0, Level::L1, Level::L2];

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.index())
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "L0" | "0" => Ok(Level::L0),
            "L1" | "1" => Ok(Level::L1),
            "L2" | "2" => Ok(Level::L2),
            _ => Err(Error::Config(format!("unknown paraphrase level {s:?}"))),
        }
    }
}

/// One slot word and its alternatives; index 0 is the canonical word.
type Slot = &'static [&'static str];

struct Phrasing {
    /// `L0` template. `{0}`, `{1}`, ... are slots, `{a}` and `{b}` numbers.
    canonical: &'static str,
    /// Alternative clause orders using the same slots.
    reorderings: &'static [&'static str],
    slots: &'static [Slot],
}

const TRACK: Phrasing = Phrasing {
    canonical: "{0} {1} with {2} {3} {a} m/s.",
    reorderings: &[
        "{0} {1} with {2} {3} {a} m/s.",
        "with {2} {3} {a} m/s, {0} {1}.",
        "{0} {1}, keeping a {2} {3} of {a} m/s.",
    ],
    slots: &[
        &["move", "go", "run", "travel"],
        &["forward", "ahead", "onward"],
        &["target", "desired", "commanded"],
        &["velocity", "speed", "pace"],
    ],
};

const REACH: Phrasing = Phrasing {
    canonical: "{0} to the {1} at ({a}, {b}).",
    reorderings: &[
        "{0} to the {1} at ({a}, {b}).",
        "the {1} is at ({a}, {b}); {0} there.",
        "{0} until you arrive at the {1} at ({a}, {b}).",
    ],
    slots: &[
        &["move", "go", "head", "navigate"],
        &["goal", "target", "destination", "waypoint"],
    ],
};

const HOLD: Phrasing = Phrasing {
    canonical: "{0} {1} at the {2} ({a}, {b}).",
    reorderings: &[
        "{0} {1} at the {2} ({a}, {b}).",
        "at the {2} ({a}, {b}), {0} {1}.",
        "{0} your {1} fixed at the {2} ({a}, {b}).",
    ],
    slots: &[
        &["hold", "keep", "maintain"],
        &["position", "place", "station"],
        &["origin", "center", "centre"],
    ],
};

const OSCILLATE: Phrasing = Phrasing {
    canonical: "{0} along the x {1} between {a} and {b}.",
    reorderings: &[
        "{0} along the x {1} between {a} and {b}.",
        "between {a} and {b}, {0} along the x {1}.",
        "{0} back and forth on the x {1} from {a} to {b}.",
    ],
    slots: &[
        &["oscillate", "swing", "sway", "shuttle"],
        &["axis", "direction", "line"],
    ],
};

const DISTRACTORS: &[&str] = &[
    "Stay calm and proceed carefully",
    "The weather in the arena is pleasant",
    "Ignore any background noise",
    "This is part of a routine exercise",
    "Remember to keep the motion smooth",
    "No other objects are present",
    "Take your time with this one",
    "The floor has been cleaned recently",
    "Nobody is watching the session",
    "Lighting conditions are normal",
];

fn phrasing(behavior: Behavior) -> &'static Phrasing {
    match behavior {
        Behavior::Track => &TRACK,
        Behavior::Reach => &REACH,
        Behavior::Hold => &HOLD,
        Behavior::Oscillate => &OSCILLATE,
    }
}

fn fill(template: &str, words: &[&str], numbers: &[f64]) -> String {
    let mut out = template.to_string();
    for (i, w) in words.iter().enumerate() {
        out = out.replace(&format!("{{{i}}}"), w);
    }
    let names = ["{a}", "{b}"];
    for (name, v) in names.iter().zip(numbers) {
        out = out.replace(name, &format!("{v:.3}"));
    }
    capitalize(&out)
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn lower_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_lowercase().chain(c).collect(),
        None => String::new(),
    }
}

fn paraphrase<R: Rng + ?Sized>(p: &Phrasing, numbers: &[f64], rng: &mut R) -> String {
    let template = p.reorderings.choose(rng).copied().unwrap_or(p.canonical);
    let mut picks: Vec<usize> = p.slots.iter().map(|s| rng.gen_range(0..s.len())).collect();
    if picks.iter().all(|&k| k == 0) {
        let i = rng.gen_range(0..p.slots.len());
        picks[i] = rng.gen_range(1..p.slots[i].len());
    }
    let words: Vec<&str> = p.slots.iter().zip(&picks).map(|(s, &k)| s[k]).collect();
    fill(template, &words, numbers)
}

pub fn sample_description_with<R: Rng + ?Sized>(task: &TaskSpec, level: Level, rng: &mut R) -> String {
    let p = phrasing(task.behavior);
    let numbers = &task.params;
    match level {
        Level::L0 => {
            let words: Vec<&str> = p.slots.iter().map(|s| s[0]).collect();
            fill(p.canonical, &words, numbers)
        }
        Level::L1 => paraphrase(p, numbers, rng),
        Level::L2 => {
            let inner = paraphrase(p, numbers, rng);
            let picked: Vec<&&str> = DISTRACTORS.choose_multiple(rng, 2).collect();
            format!(
                "{}, and then {} {}.",
                picked[0],
                lower_first(&inner),
                picked[1]
            )
        }
    }
}

/// Deterministic in `(task, level, seed)`.
pub fn sample_description(task: &TaskSpec, level: Level, seed: u64) -> String {
    let mut rng = rng_for(task.descriptor_seed, &[level.index() as u64, seed]);
    sample_description_with(task, level, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::super::{switchworld_registry, veltrack_task};
    use super::*;
    use crate::text::extract_numeric_literals;

    #[test]
    fn canonical_strings() {
        let v = veltrack_task(0, 1.2, 0);
        assert_eq!(
            sample_description(&v, Level::L0, 0),
            "Move forward with target velocity 1.200 m/s."
        );
        let sw = switchworld_registry(10, 0).unwrap();
        assert_eq!(sample_description(&sw[0], Level::L0, 0), "Move to the goal at (0.800, 0.000).");
        assert_eq!(
            sample_description(&sw[8], Level::L0, 3),
            "Hold position at the origin (0.000, 0.000)."
        );
        assert_eq!(
            sample_description(&sw[9], Level::L0, 3),
            "Oscillate along the x axis between -0.450 and 0.450."
        );
    }

    #[test]
    fn deterministic_per_seed() {
        let v = veltrack_task(0, 1.2, 0);
        for level in Level::ALL {
            assert_eq!(sample_description(&v, level, 7), sample_description(&v, level, 7));
        }
    }

    #[test]
    fn l2_samples_differ_from_l0_and_keep_the_target() {
        let v = veltrack_task(0, 1.2, 0);
        let l0 = sample_description(&v, Level::L0, 0);
        for seed in 0..100 {
            let s = sample_description(&v, Level::L2, seed);
            assert_ne!(s, l0);
            assert_eq!(extract_numeric_literals(&s), vec![1.2], "{s}");
        }
    }

    #[test]
    fn l1_always_changes_a_word() {
        for task in switchworld_registry(10, 0).unwrap() {
            let l0 = sample_description(&task, Level::L0, 0);
            for seed in 0..50 {
                let l1 = sample_description(&task, Level::L1, seed);
                assert_ne!(l1, l0);
                assert_eq!(extract_numeric_literals(&l1), task.params, "{l1}");
            }
        }
    }

    #[test]
    fn level_parse() {
        assert_eq!("l2".parse::<Level>().unwrap(), Level::L2);
        assert!("L3".parse::<Level>().is_err());
    }
}
