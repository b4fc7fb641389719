use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Example, LabelA, LabelB, LabelC};

const FILLER: &[&str] = &[
    "today", "really", "just", "think", "about", "the", "game", "news", "weather", "music", "again",
    "maybe", "later", "with", "some", "people", "watching", "coffee", "going", "home",
];
const INSULTS: &[&str] = &["idiot", "moron", "clown", "loser", "fool"];
const CURSES: &[&str] = &["damn", "crap", "hell"];
const TARGET_IND: &[&str] = &["@USER you"];
const TARGET_GRP: &[&str] = &["they all", "those folks"];
const TARGET_OTH: &[&str] = &["this place", "that company"];

/// Generator for toy corpora where every label is decided by the presence
/// of cue words, so each task is linearly separable over bag-of-words.
///
/// Offensive posts carry an insult (targeted) or a curse (untargeted);
/// targeted ones also carry a target phrase. Non-offensive posts contain
/// filler only.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub size: usize,
    /// Fraction of offensive posts.
    pub off_fraction: f64,
    /// Fraction of offensive posts that are targeted.
    pub tin_fraction: f64,
    /// Relative weights of individual / group / other targets.
    pub target_weights: [f64; 3],
    /// Filler words per post.
    pub filler_words: usize,
    pub seed: u64,
}

impl Default for SyntheticCorpus {
    fn default() -> Self {
        SyntheticCorpus {
            size: 64,
            off_fraction: 0.5,
            tin_fraction: 0.5,
            target_weights: [1.0, 1.0, 1.0],
            filler_words: 3,
            seed: 0,
        }
    }
}

impl SyntheticCorpus {
    pub fn generate(&self) -> Vec<Example> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        // Exact class counts, then a shuffle, so balance is not left to chance.
        let n_off = (self.size as f64 * self.off_fraction).round() as usize;
        let n_tin = (n_off as f64 * self.tin_fraction).round() as usize;
        let total_w: f64 = self.target_weights.iter().sum();
        let mut targets = Vec::with_capacity(n_tin);
        for (k, w) in self.target_weights.iter().enumerate() {
            let count = if k == 2 {
                n_tin - targets.len()
            } else {
                (n_tin as f64 * w / total_w).round() as usize
            };
            targets.extend(std::iter::repeat_n(k, count.min(n_tin - targets.len())));
        }
        let mut kinds: Vec<(LabelA, Option<LabelB>, Option<LabelC>)> = Vec::with_capacity(self.size);
        for k in targets {
            let c = [LabelC::Ind, LabelC::Grp, LabelC::Oth][k];
            kinds.push((LabelA::Off, Some(LabelB::Tin), Some(c)));
        }
        kinds.extend(std::iter::repeat_n((LabelA::Off, Some(LabelB::Unt), None), n_off - n_tin));
        kinds.extend(std::iter::repeat_n((LabelA::Not, None, None), self.size - n_off));
        rand::seq::SliceRandom::shuffle(kinds.as_mut_slice(), &mut rng);

        kinds
            .into_iter()
            .enumerate()
            .map(|(i, (a, b, c))| {
                let mut words: Vec<&str> = (0..self.filler_words)
                    .map(|_| *FILLER.choose(&mut rng).expect("non-empty"))
                    .collect();
                let mut cues: Vec<&str> = Vec::new();
                match (b, c) {
                    (Some(LabelB::Tin), Some(c)) => {
                        let targets = match c {
                            LabelC::Ind => TARGET_IND,
                            LabelC::Grp => TARGET_GRP,
                            LabelC::Oth => TARGET_OTH,
                        };
                        cues.push(targets.choose(&mut rng).expect("non-empty"));
                        cues.push("are");
                        cues.push(INSULTS.choose(&mut rng).expect("non-empty"));
                    }
                    (Some(LabelB::Unt), _) => cues.push(CURSES.choose(&mut rng).expect("non-empty")),
                    _ => {}
                }
                let at = rng.random_range(0..=words.len());
                words.splice(at..at, cues);
                Example {
                    id: format!("syn{i:05}"),
                    text: words.join(" "),
                    label_a: a,
                    label_b: b,
                    label_c: c,
                }
            })
            .collect()
    }
}
