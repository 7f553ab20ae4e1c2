//! Seeded synthetic corpora with known structure.
//!
//! * [`theme_corpus`]: users write about a few favourite themes and tend to
//!   stay on one theme for a run of consecutive messages, so a message is
//!   predictable both from the user's centroid and from its neighbours.
//! * [`stance_corpus`]: every user leans one way, which shows up as marker
//!   tokens in their history. A target message either carries neutral cue
//!   tokens, making it NONE, or opinion cue tokens, in which case its label
//!   is the author's leaning (FAVOR for pro, AGAINST for anti). The label
//!   therefore needs both the message and the history.
//! * [`noise_stance_corpus`]: labels drawn from fixed proportions,
//!   independent of every text.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_jsonl, RawMessage, Stance, StanceExample, StanceRecord, StanceTarget};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThemeConfig {
    pub users: usize,
    pub messages_per_user: usize,
    pub themes: usize,
    pub themes_per_user: usize,
    pub words_per_theme: usize,
    /// Theme words per message.
    pub theme_words: usize,
    /// Shared filler words per message.
    pub filler_words: usize,
    pub filler_vocab: usize,
    /// Probability that the next message keeps the current theme.
    pub stay_prob: f64,
    pub seed: u64,
}

impl Default for ThemeConfig {
    fn default() -> Self {
        Self {
            users: 50,
            messages_per_user: 80,
            themes: 16,
            themes_per_user: 3,
            words_per_theme: 4,
            theme_words: 8,
            filler_words: 2,
            filler_vocab: 40,
            stay_prob: 0.9,
            seed: 7,
        }
    }
}

fn theme_word(theme: usize, k: usize) -> String {
    format!("th{theme}w{k}")
}

/// Text of one message on `theme`.
fn theme_text(rng: &mut ChaCha8Rng, cfg: &ThemeConfig, theme: usize) -> Vec<String> {
    let mut words: Vec<String> = (0..cfg.theme_words)
        .map(|_| theme_word(theme, rng.random_range(0..cfg.words_per_theme)))
        .collect();
    words.extend((0..cfg.filler_words).map(|_| format!("fill{}", rng.random_range(0..cfg.filler_vocab))));
    words
}

/// The theme sequence of one user: a Markov chain over the user's themes.
fn theme_run(rng: &mut ChaCha8Rng, cfg: &ThemeConfig, favourites: &[usize], n: usize) -> Vec<usize> {
    let mut cur = *favourites.choose(rng).expect("at least one theme");
    (0..n)
        .map(|_| {
            if rng.random::<f64>() >= cfg.stay_prob {
                cur = *favourites.choose(rng).expect("at least one theme");
            }
            cur
        })
        .collect()
}

fn favourites(rng: &mut ChaCha8Rng, cfg: &ThemeConfig) -> Vec<usize> {
    let all: Vec<usize> = (0..cfg.themes).collect();
    all.choose_multiple(rng, cfg.themes_per_user.min(cfg.themes).max(1))
        .copied()
        .collect()
}

pub fn theme_corpus(cfg: &ThemeConfig) -> Vec<RawMessage> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(cfg.users * cfg.messages_per_user);
    for u in 0..cfg.users {
        let fav = favourites(&mut rng, cfg);
        for (i, theme) in theme_run(&mut rng, cfg, &fav, cfg.messages_per_user).into_iter().enumerate() {
            out.push(RawMessage {
                user_id: format!("u{u:04}"),
                message_id: format!("u{u:04}m{i:04}"),
                timestamp: i as i64,
                text: theme_text(&mut rng, cfg, theme).join(" "),
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StanceSynthConfig {
    pub users: usize,
    pub history_per_user: usize,
    /// Probability that a history message carries a leaning marker.
    pub marker_prob: f64,
    pub markers: usize,
    /// Marker tokens added to a marked history message.
    pub marker_tokens: usize,
    /// Fraction of neutral targets.
    pub neutral_frac: f64,
    pub cue_words: usize,
    /// Cue tokens added to a target message.
    pub cue_tokens: usize,
    pub theme: ThemeConfig,
    pub seed: u64,
}

impl Default for StanceSynthConfig {
    fn default() -> Self {
        Self {
            users: 400,
            history_per_user: 40,
            marker_prob: 0.5,
            markers: 4,
            marker_tokens: 3,
            neutral_frac: 0.3,
            cue_words: 4,
            cue_tokens: 2,
            theme: ThemeConfig::default(),
            seed: 11,
        }
    }
}

/// History corpus plus one labeled target message per user.
#[derive(Clone, Debug, Default)]
pub struct StanceSynth {
    pub history: Vec<RawMessage>,
    pub records: Vec<StanceRecord>,
}

impl StanceSynth {
    /// Examples with their full history attached, in record order.
    pub fn examples(&self) -> Result<Vec<StanceExample>> {
        let corpus = crate::corpus::Corpus::from_messages(self.history.clone())?;
        self.records
            .iter()
            .map(|r| {
                let target = RawMessage {
                    user_id: r.user_id.clone(),
                    message_id: r.message_id.clone(),
                    timestamp: r.timestamp,
                    text: r.text.clone(),
                };
                Ok(StanceExample {
                    history: crate::corpus::history_before(&corpus, &target, usize::MAX),
                    target,
                    label: r.label.parse()?,
                    stance_target: r.stance_target.parse()?,
                })
            })
            .collect()
    }

    pub fn write(&self, history: &Path, stance: &Path) -> Result<()> {
        write_jsonl(history, &self.history)?;
        write_jsonl(stance, &self.records)
    }
}

pub fn stance_corpus(cfg: &StanceSynthConfig) -> StanceSynth {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = StanceSynth::default();
    for u in 0..cfg.users {
        let user = format!("s{u:04}");
        let lean_pro = rng.random::<bool>();
        let fav = favourites(&mut rng, &cfg.theme);
        let themes = theme_run(&mut rng, &cfg.theme, &fav, cfg.history_per_user);
        for (i, theme) in themes.into_iter().enumerate() {
            let mut words = theme_text(&mut rng, &cfg.theme, theme);
            if rng.random::<f64>() < cfg.marker_prob {
                let side = if lean_pro { "pro" } else { "anti" };
                for _ in 0..cfg.marker_tokens {
                    words.push(format!("{side}{}", rng.random_range(0..cfg.markers)));
                }
            }
            out.history.push(RawMessage {
                user_id: user.clone(),
                message_id: format!("{user}h{i:03}"),
                timestamp: i as i64,
                text: words.join(" "),
            });
        }
        let target = StanceTarget::ALL[rng.random_range(0..StanceTarget::ALL.len())];
        let (cue, label) = if rng.random::<f64>() < cfg.neutral_frac {
            ("neu", Stance::None)
        } else if lean_pro {
            ("opi", Stance::Favor)
        } else {
            ("opi", Stance::Against)
        };
        let mut words = theme_text(&mut rng, &cfg.theme, fav[0]);
        words.push(format!("topic{}", target.as_str()));
        for _ in 0..cfg.cue_tokens {
            words.push(format!("{cue}{}", rng.random_range(0..cfg.cue_words)));
        }
        out.records.push(StanceRecord {
            user_id: user.clone(),
            message_id: format!("{user}t"),
            timestamp: cfg.history_per_user as i64,
            text: words.join(" "),
            stance_target: target.as_str().into(),
            label: label.as_str().into(),
        });
    }
    out
}

/// Labels drawn with probabilities `proportions` (against, none, favor);
/// every text is drawn from the same distribution regardless of label.
pub fn noise_stance_corpus(users: usize, history_per_user: usize, proportions: [f64; 3], seed: u64) -> StanceSynth {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theme = ThemeConfig::default();
    let mut out = StanceSynth::default();
    let text = |rng: &mut ChaCha8Rng| {
        let t = rng.random_range(0..theme.themes);
        theme_text(rng, &theme, t).join(" ")
    };
    for u in 0..users {
        let user = format!("n{u:04}");
        for i in 0..history_per_user {
            out.history.push(RawMessage {
                user_id: user.clone(),
                message_id: format!("{user}h{i:03}"),
                timestamp: i as i64,
                text: text(&mut rng),
            });
        }
        let r = rng.random::<f64>();
        let label = if r < proportions[0] {
            Stance::Against
        } else if r < proportions[0] + proportions[1] {
            Stance::None
        } else {
            Stance::Favor
        };
        out.records.push(StanceRecord {
            user_id: user.clone(),
            message_id: format!("{user}t"),
            timestamp: history_per_user as i64,
            text: text(&mut rng),
            stance_target: StanceTarget::ALL[u % StanceTarget::ALL.len()].as_str().into(),
            label: label.as_str().into(),
        });
    }
    out
}
