//! Labeled synthetic log corpora.
//!
//! Normal traffic is a sparse first-order Markov chain over templates with exponential
//! inter-arrival times. Anomalies are injected in short, spaced episodes of three kinds:
//! a transition to a template that is never a successor of the current one, an inflated
//! time gap before an otherwise normal event, and a burst of ERROR/FATAL templates that
//! is followed by a fixed recovery template.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnomalyMix {
    pub forbidden: f64,
    pub gap: f64,
    pub burst: f64,
}

impl Default for AnomalyMix {
    fn default() -> Self {
        AnomalyMix {
            forbidden: 1.0,
            gap: 1.0,
            burst: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// Templates of the normal chain.
    pub n_templates: usize,
    /// Pool of ERROR/FATAL templates that bursts draw from.
    pub burst_templates: usize,
    pub n_events: usize,
    pub anomaly_rate: f64,
    pub mix: AnomalyMix,
    /// Mean inter-arrival time in seconds.
    pub mean_interval: f64,
    pub gap_factor: f64,
    /// Inter-arrival scale inside a burst, relative to normal traffic.
    pub burst_spacing: f64,
    pub start_time: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_templates: 30,
            burst_templates: 30,
            n_events: 50_000,
            anomaly_rate: 0.01,
            mix: AnomalyMix::default(),
            mean_interval: 1.0,
            gap_factor: 100.0,
            burst_spacing: 0.1,
            start_time: 1_117_838_570.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyKind {
    Forbidden,
    Gap,
    Burst,
}

impl AnomalyKind {
    /// Alert tag written in the label column.
    pub fn tag(self) -> &'static str {
        match self {
            AnomalyKind::Forbidden => "APPSEQ",
            AnomalyKind::Gap => "APPSTALL",
            AnomalyKind::Burst => "KERNBURST",
        }
    }
}

const RECOVERY: usize = 0;
const SYLLABLES: [&str; 16] = [
    "ka", "lo", "mi", "nu", "pe", "ra", "si", "to", "vu", "ze", "bo", "di", "fa", "gu", "he", "jo",
];
const VERBS: [&str; 8] = ["started", "completed", "received", "sent", "scheduled", "loaded", "released", "synced"];
const NOUNS: [&str; 8] = ["block", "packet", "job", "session", "buffer", "request", "segment", "lease"];
const FAULT_WORDS: [(&str, &str); 5] = [
    ("error", "ERROR"),
    ("failed", "ERROR"),
    ("failure", "ERROR"),
    ("fatal", "FATAL"),
    ("critical", "FATAL"),
];
const FAULT_NOUNS: [&str; 12] = [
    "machine", "check", "link", "node", "halt", "memory", "disk", "parity", "kernel", "interrupt", "socket", "cache",
];

/// One template of the generator: literal words with parameter slots.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTemplate {
    pub words: Vec<Option<String>>,
    pub level: &'static str,
}

impl SynthTemplate {
    /// Template text as the parser should recover it.
    pub fn text(&self) -> String {
        self.words
            .iter()
            .map(|w| w.as_deref().unwrap_or(crate::parser::WILDCARD))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn first_word(&self) -> &str {
        self.words[0].as_deref().expect("first token is literal")
    }

    fn render<R: Rng>(&self, rng: &mut R) -> String {
        self.words
            .iter()
            .map(|w| match w {
                Some(w) => w.clone(),
                None if rng.random_bool(0.5) => rng.random_range(0..100_000u32).to_string(),
                None => format!("0x{:08x}", rng.random::<u32>()),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// The chain the normal traffic is drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    /// `successors[i]` lists `(template, probability)`.
    pub successors: Vec<Vec<(usize, f64)>>,
}

impl MarkovChain {
    fn step<R: Rng>(&self, from: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for &(to, p) in &self.successors[from] {
            acc += p;
            if u < acc {
                return to;
            }
        }
        self.successors[from].last().expect("non-empty").0
    }

    pub fn probability(&self, from: usize, to: usize) -> f64 {
        self.successors[from]
            .iter()
            .find(|(t, _)| *t == to)
            .map_or(0.0, |(_, p)| *p)
    }
}

/// One generated line with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthEvent {
    pub template: usize,
    pub timestamp: f64,
    pub anomaly: Option<AnomalyKind>,
    /// True when the event was drawn from the chain given the previous event.
    pub chain_step: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub templates: Vec<SynthTemplate>,
    pub chain: MarkovChain,
    pub events: Vec<SynthEvent>,
    pub lines: Vec<String>,
}

impl SynthCorpus {
    pub fn anomaly_count(&self) -> usize {
        self.events.iter().filter(|e| e.anomaly.is_some()).count()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = BufWriter::new(file);
        for line in &self.lines {
            writeln!(w, "{line}")?;
        }
        w.flush()?;
        Ok(())
    }
}

fn word(i: usize) -> String {
    format!(
        "{}{}{}",
        SYLLABLES[i % 16],
        SYLLABLES[(i / 16) % 16],
        SYLLABLES[(i / 256 + 7) % 16]
    )
}

fn normal_templates<R: Rng>(n: usize, rng: &mut R) -> Vec<SynthTemplate> {
    (0..n)
        .map(|i| {
            let mut words = vec![Some(word(i)), Some(VERBS[rng.random_range(0..8)].to_string())];
            let extra = rng.random_range(1..=4);
            for _ in 0..extra {
                if rng.random_bool(0.4) {
                    words.push(None);
                } else {
                    words.push(Some(NOUNS[rng.random_range(0..8)].to_string()));
                }
            }
            SynthTemplate { words, level: "INFO" }
        })
        .collect()
}

fn burst_templates<R: Rng>(offset: usize, count: usize, rng: &mut R) -> Vec<SynthTemplate> {
    (0..count)
        .map(|i| {
            let (kw, level) = FAULT_WORDS[rng.random_range(0..FAULT_WORDS.len())];
            let mut words = vec![Some(word(offset + i)), Some(kw.to_string())];
            for _ in 0..rng.random_range(1..=2) {
                words.push(Some(FAULT_NOUNS[rng.random_range(0..FAULT_NOUNS.len())].to_string()));
            }
            words.push(None);
            SynthTemplate { words, level }
        })
        .collect()
}

fn build_chain<R: Rng>(n: usize, rng: &mut R) -> MarkovChain {
    let successors = (0..n)
        .map(|i| {
            let mut succ = vec![(i + 1) % n];
            let want = rng.random_range(2..=4);
            while succ.len() < want {
                let j = rng.random_range(0..n);
                if j != i && !succ.contains(&j) {
                    succ.push(j);
                }
            }
            succ.sort_unstable();
            let weights: Vec<f64> = succ.iter().map(|_| rng.random_range(1.0..3.0)).collect();
            let total: f64 = weights.iter().sum();
            succ.into_iter().zip(weights).map(|(s, w)| (s, w / total)).collect()
        })
        .collect();
    MarkovChain { successors }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_templates < 5 {
            return Err(Error::Config("synthetic corpus needs at least 5 templates".into()));
        }
        if self.burst_templates == 0 || self.n_templates + self.burst_templates > 256 {
            return Err(Error::Config("burst template pool must hold 1 to 256 - n_templates entries".into()));
        }
        if !(self.anomaly_rate > 0.0 && self.anomaly_rate <= 0.2) {
            return Err(Error::Config("anomaly rate must lie in (0, 0.2]".into()));
        }
        let m = self.mix;
        if [m.forbidden, m.gap, m.burst].iter().any(|w| *w < 0.0) || m.forbidden + m.gap + m.burst <= 0.0 {
            return Err(Error::Config("anomaly mix weights must be non-negative with a positive sum".into()));
        }
        if !(self.mean_interval > 0.0) || !(self.gap_factor >= 1.0) || !(self.start_time >= 0.0) {
            return Err(Error::Config("bad timing parameters for the synthetic corpus".into()));
        }
        Ok(())
    }

    /// Episodes `(kind, length)` whose lengths sum to the exact anomaly count.
    fn episodes<R: Rng>(&self, rng: &mut R) -> Result<Vec<(AnomalyKind, usize)>> {
        let target = (self.anomaly_rate * self.n_events as f64).round() as usize;
        let m = self.mix;
        let kinds = [
            (AnomalyKind::Forbidden, m.forbidden),
            (AnomalyKind::Gap, m.gap),
            (AnomalyKind::Burst, m.burst),
        ];
        let total_w: f64 = kinds.iter().map(|k| k.1).sum();
        let mut out = Vec::new();
        let mut placed = 0;
        while placed < target {
            let mut u = rng.random_range(0.0..total_w);
            let mut kind = kinds.iter().rev().find(|k| k.1 > 0.0).expect("positive weight").0;
            for &(k, w) in &kinds {
                if u < w {
                    kind = k;
                    break;
                }
                u -= w;
            }
            let len = match kind {
                AnomalyKind::Burst => rng.random_range(2..=4).min(target - placed),
                _ => 1,
            };
            out.push((kind, len));
            placed += len;
        }
        // Each episode needs room for itself, a recovery event and some normal context.
        let needed: usize = out.iter().map(|(_, l)| l + 12).sum();
        if needed > self.n_events {
            return Err(Error::Config(format!(
                "{} anomalies do not fit into {} events with spacing",
                target, self.n_events
            )));
        }
        Ok(out)
    }

    pub fn generate(&self, seed: u64) -> Result<SynthCorpus> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.n_templates;
        let mut templates = normal_templates(n, &mut rng);
        templates.extend(burst_templates(n, self.burst_templates, &mut rng));
        let chain = build_chain(n, &mut rng);
        let episodes = self.episodes(&mut rng)?;

        // Spread episode starts: one slot per episode, random offset inside the slot.
        let slot = self.n_events / episodes.len().max(1);
        let mut starts = Vec::with_capacity(episodes.len());
        for (e, (_, len)) in episodes.iter().enumerate() {
            let room = slot.saturating_sub(len + 6).max(1);
            starts.push(e * slot + 5 + rng.random_range(0..room));
        }

        let exp = Exp::new(1.0 / self.mean_interval).map_err(|e| Error::Config(e.to_string()))?;
        let nodes: Vec<String> = (0..8).map(|i| format!("R{:02}-M{}-N{}", i % 4, i % 2, i)).collect();
        let mut events: Vec<SynthEvent> = Vec::with_capacity(self.n_events);
        let mut t = self.start_time;
        let mut current = rng.random_range(0..n);
        events.push(SynthEvent { template: current, timestamp: t, anomaly: None, chain_step: false });
        let mut next_episode = 0;
        let mut after_burst = false;
        while events.len() < self.n_events {
            let k = events.len();
            let due = next_episode < episodes.len() && k >= starts[next_episode];
            if after_burst {
                after_burst = false;
                t += exp.sample(&mut rng);
                current = RECOVERY;
                events.push(SynthEvent { template: current, timestamp: t, anomaly: None, chain_step: false });
                continue;
            }
            if !due {
                t += exp.sample(&mut rng);
                current = chain.step(current, &mut rng);
                events.push(SynthEvent { template: current, timestamp: t, anomaly: None, chain_step: true });
                continue;
            }
            let (kind, len) = episodes[next_episode];
            next_episode += 1;
            match kind {
                AnomalyKind::Forbidden => {
                    let allowed: Vec<usize> = (0..n)
                        .filter(|&j| j != current && chain.probability(current, j) == 0.0)
                        .collect();
                    t += exp.sample(&mut rng);
                    current = *allowed.choose(&mut rng).expect("sparse chain leaves forbidden targets");
                    events.push(SynthEvent { template: current, timestamp: t, anomaly: Some(kind), chain_step: false });
                }
                AnomalyKind::Gap => {
                    let draw: f64 = exp.sample(&mut rng);
                    t += draw.max(self.mean_interval) * self.gap_factor;
                    current = chain.step(current, &mut rng);
                    events.push(SynthEvent { template: current, timestamp: t, anomaly: Some(kind), chain_step: true });
                }
                AnomalyKind::Burst => {
                    for _ in 0..len {
                        if events.len() >= self.n_events {
                            break;
                        }
                        t += exp.sample(&mut rng) * self.burst_spacing;
                        let b = n + rng.random_range(0..self.burst_templates);
                        events.push(SynthEvent { template: b, timestamp: t, anomaly: Some(kind), chain_step: false });
                    }
                    after_burst = true;
                }
            }
        }

        let lines = events
            .iter()
            .map(|e| {
                let tpl = &templates[e.template];
                format!(
                    "{} {:.6} {} {} {}",
                    e.anomaly.map_or("-", AnomalyKind::tag),
                    e.timestamp,
                    nodes[rng.random_range(0..nodes.len())],
                    tpl.level,
                    tpl.render(&mut rng)
                )
            })
            .collect();
        let corpus = SynthCorpus { templates, chain, events, lines };
        let expected = (self.anomaly_rate * self.n_events as f64).round() as usize;
        if corpus.anomaly_count() != expected {
            return Err(Error::Config(format!(
                "generated {} anomalies instead of {expected}",
                corpus.anomaly_count()
            )));
        }
        Ok(corpus)
    }
}

/// Identifies a generated line's template by its unique first content word.
pub fn template_of_line(templates: &[SynthTemplate], content_first_word: &str) -> Option<usize> {
    templates.iter().position(|t| t.first_word() == content_first_word)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::infer_log_level;
    use crate::embed::LogLevel;

    fn small() -> SynthSpec {
        SynthSpec { n_events: 5000, ..SynthSpec::default() }
    }

    #[test]
    fn exact_anomaly_count() {
        let c = small().generate(1).unwrap();
        assert_eq!(c.events.len(), 5000);
        assert_eq!(c.anomaly_count(), 50);
        let labeled = c.lines.iter().filter(|l| !l.starts_with("- ")).count();
        assert_eq!(labeled, 50);
    }

    #[test]
    fn deterministic() {
        assert_eq!(small().generate(4).unwrap().lines, small().generate(4).unwrap().lines);
        assert_ne!(small().generate(4).unwrap().lines, small().generate(5).unwrap().lines);
    }

    #[test]
    fn chain_is_sparse_with_floor() {
        let c = small().generate(2).unwrap();
        for (i, row) in c.chain.successors.iter().enumerate() {
            assert!((2..=4).contains(&row.len()));
            assert!(row.iter().all(|&(_, p)| p >= 0.1));
            assert!((row.iter().map(|r| r.1).sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(c.chain.probability(i, (i + 1) % 30) > 0.0);
        }
    }

    #[test]
    fn levels_match_text() {
        let c = small().generate(2).unwrap();
        for t in &c.templates {
            let inferred = infer_log_level(&t.text());
            if t.level == "INFO" {
                assert_eq!(inferred, LogLevel::Info, "{}", t.text());
            } else {
                assert!(inferred >= LogLevel::Error, "{}", t.text());
            }
        }
        let firsts: std::collections::HashSet<_> = c.templates.iter().map(|t| t.first_word().to_string()).collect();
        assert_eq!(firsts.len(), c.templates.len());
    }

    #[test]
    fn gap_only_mix() {
        let spec = SynthSpec {
            mix: AnomalyMix { forbidden: 0.0, gap: 1.0, burst: 0.0 },
            ..small()
        };
        let c = spec.generate(3).unwrap();
        for w in c.events.windows(2) {
            if w[1].anomaly.is_some() {
                assert_eq!(w[1].anomaly, Some(AnomalyKind::Gap));
                assert!(w[1].timestamp - w[0].timestamp >= 100.0);
            }
        }
    }

    #[test]
    fn infeasible_specs() {
        assert!(SynthSpec { n_templates: 4, ..small() }.generate(0).is_err());
        assert!(SynthSpec { anomaly_rate: 0.3, ..small() }.generate(0).is_err());
        assert!(SynthSpec { n_events: 100, anomaly_rate: 0.2, ..small() }.generate(0).is_err());
    }
}
