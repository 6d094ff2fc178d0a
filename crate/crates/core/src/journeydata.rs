//! Visit logs, page vocabulary, dwell-time replication and the synthetic
//! Markov clickstream generator used as ground truth.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Terminal class: the visitor left the site.
pub const NULL_PAGE: &str = "<null>";
/// Class for pages below the vocabulary frequency threshold.
pub const UNKNOWN_PAGE: &str = "<unk>";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PageEvent {
    pub page: String,
    pub dwell_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Session {
    pub session_id: String,
    pub keywords: String,
    pub events: Vec<PageEvent>,
}

impl Session {
    pub fn pages(&self) -> impl Iterator<Item = &str> {
        self.events.iter().map(|e| e.page.as_str())
    }
}

/// Reads line-delimited JSON session records. Blank lines are skipped.
pub fn parse_log<R: BufRead>(reader: R) -> Result<Vec<Session>> {
    let mut sessions = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        let session: Session =
            serde_json::from_value(value).map_err(|e| Error::Schema { line: line_no, message: e.to_string() })?;
        for (k, ev) in session.events.iter().enumerate() {
            let problem = if ev.page.is_empty() {
                Some("empty page name")
            } else if !(ev.dwell_seconds >= 0.0) || !ev.dwell_seconds.is_finite() {
                Some("dwell_seconds must be a finite non-negative number")
            } else {
                None
            };
            if let Some(p) = problem {
                return Err(Error::Schema { line: line_no, message: format!("event {k}: {p}") });
            }
        }
        sessions.push(session);
    }
    Ok(sessions)
}

pub fn write_log<W: Write>(sessions: &[Session], mut writer: W) -> Result<()> {
    for s in sessions {
        serde_json::to_writer(&mut writer, s).map_err(std::io::Error::from)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Dense page-name to class-index map. Retained pages come first in
/// descending frequency, then the terminal class, then the unknown class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct PageVocabulary {
    names: Vec<String>,
    index: HashMap<String, usize>,
    min_freq: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    pages: Vec<String>,
    min_freq: usize,
}

impl TryFrom<VocabFile> for PageVocabulary {
    type Error = Error;
    fn try_from(f: VocabFile) -> Result<Self> {
        Self::from_pages(f.pages, f.min_freq)
    }
}

impl From<PageVocabulary> for VocabFile {
    fn from(v: PageVocabulary) -> Self {
        let k = v.names.len() - 2;
        VocabFile { pages: v.names[..k].to_vec(), min_freq: v.min_freq }
    }
}

impl PageVocabulary {
    /// Vocabulary over exactly `pages` (in that order) plus the two reserved
    /// classes.
    pub fn from_pages(pages: Vec<String>, min_freq: usize) -> Result<Self> {
        let mut names = pages;
        names.push(NULL_PAGE.to_string());
        names.push(UNKNOWN_PAGE.to_string());
        let mut index = HashMap::with_capacity(names.len());
        for (i, n) in names.iter().enumerate() {
            if index.insert(n.clone(), i).is_some() {
                return Err(Error::Argument(format!("page {n:?} listed twice in vocabulary")));
            }
        }
        Ok(Self { names, index, min_freq })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn null_index(&self) -> usize {
        self.names.len() - 2
    }

    pub fn unknown_index(&self) -> usize {
        self.names.len() - 1
    }

    /// Class index of `page`; pages outside the vocabulary map to UNKNOWN.
    pub fn encode(&self, page: &str) -> usize {
        self.index.get(page).copied().unwrap_or_else(|| self.unknown_index())
    }

    pub fn lookup(&self, page: &str) -> Option<usize> {
        self.index.get(page).copied()
    }

    pub fn decode(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Counts page occurrences and keeps pages seen at least `min_freq` times.
pub fn build_vocab(sessions: &[Session], min_freq: usize) -> Result<PageVocabulary> {
    if sessions.is_empty() {
        return Err(Error::Argument("cannot build a vocabulary from zero sessions".into()));
    }
    if min_freq < 1 {
        return Err(Error::Argument("min_freq must be at least 1".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for s in sessions {
        for p in s.pages() {
            if p != NULL_PAGE && p != UNKNOWN_PAGE {
                *counts.entry(p).or_default() += 1;
            }
        }
    }
    let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    PageVocabulary::from_pages(kept.into_iter().map(|(p, _)| p.to_string()).collect(), min_freq)
}

/// How dwell time turns into repeated steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DwellRule {
    pub unit_seconds: f64,
    pub cap: usize,
}

impl Default for DwellRule {
    fn default() -> Self {
        Self { unit_seconds: 30.0, cap: 5 }
    }
}

impl DwellRule {
    /// No replication: every event counts once.
    pub const SINGLE: DwellRule = DwellRule { unit_seconds: 1.0, cap: 1 };

    pub fn copies(&self, dwell_seconds: f64) -> usize {
        let units = (dwell_seconds / self.unit_seconds).ceil();
        let r = if units >= 1.0 { units.min(self.cap as f64) as usize } else { 1 };
        r.max(1)
    }
}

/// Expands a session into its training page sequence: each event repeated
/// per the dwell rule, with [`NULL_PAGE`] appended once.
pub fn replicate_dwell(session: &Session, rule: &DwellRule) -> Vec<String> {
    let mut out = Vec::new();
    for ev in &session.events {
        let r = rule.copies(ev.dwell_seconds);
        out.extend(std::iter::repeat_n(ev.page.clone(), r));
    }
    out.push(NULL_PAGE.to_string());
    out
}

/// Ground-truth Markov chain for synthetic logs. The last state is the
/// absorbing terminal; it is never emitted as a page.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovSpec {
    pub states: Vec<String>,
    pub transitions: Vec<Vec<f64>>,
    pub initial: Vec<f64>,
    pub keywords_by_state: Vec<String>,
    pub dwell_mean_by_state: Vec<f64>,
}

const STOCHASTIC_TOL: f64 = 1e-9;

impl MarkovSpec {
    pub fn terminal(&self) -> usize {
        self.states.len() - 1
    }

    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let spec: MarkovSpec = serde_json::from_reader(reader).map_err(|e| Error::Spec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.states.len();
        if n < 2 {
            return Err(Error::Spec("need at least one page state and the terminal".into()));
        }
        if self.transitions.len() != n
            || self.initial.len() != n
            || self.keywords_by_state.len() != n
            || self.dwell_mean_by_state.len() != n
        {
            return Err(Error::Spec(format!("all per-state fields must have {n} entries")));
        }
        let check_dist = |name: &str, row: &[f64]| -> Result<()> {
            if row.len() != n {
                return Err(Error::Spec(format!("{name} has {} entries, expected {n}", row.len())));
            }
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(Error::Spec(format!("{name} has a negative or non-finite probability")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::Spec(format!("{name} sums to {sum}, not 1")));
            }
            Ok(())
        };
        for (i, row) in self.transitions.iter().enumerate() {
            check_dist(&format!("transition row {i} ({})", self.states[i]), row)?;
        }
        check_dist("initial distribution", &self.initial)?;
        let t = self.terminal();
        if self.transitions[t][t] != 1.0 {
            return Err(Error::Spec(format!("terminal state {:?} is not absorbing", self.states[t])));
        }
        if self.initial[t] != 0.0 {
            return Err(Error::Spec("initial distribution puts mass on the terminal state".into()));
        }
        if self.dwell_mean_by_state.iter().any(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::Spec("dwell means must be finite and non-negative".into()));
        }
        // Every state must be able to reach the terminal, or walks never end.
        let mut reaches = vec![false; n];
        reaches[t] = true;
        loop {
            let mut changed = false;
            for i in 0..n {
                if !reaches[i] && (0..n).any(|j| self.transitions[i][j] > 0.0 && reaches[j]) {
                    reaches[i] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        if let Some(i) = reaches.iter().position(|r| !r) {
            return Err(Error::Spec(format!("state {:?} cannot reach the terminal", self.states[i])));
        }
        Ok(())
    }

    /// Expected next-page accuracy of the Bayes-optimal predictor over every
    /// prediction step of `sessions`, with no dwell replication. The first
    /// step is conditioned on the keyword phrase; later steps on the current
    /// state.
    pub fn bayes_accuracy(&self, sessions: &[Session]) -> Result<f64> {
        let state_of: HashMap<&str, usize> = self.states.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut total = 0.0;
        let mut steps = 0usize;
        for s in sessions {
            let mut by_state = vec![0.0; self.states.len()];
            for (i, kw) in self.keywords_by_state.iter().enumerate() {
                if *kw == s.keywords {
                    by_state[i] = self.initial[i];
                }
            }
            let norm: f64 = by_state.iter().sum();
            if norm > 0.0 {
                total += by_state.iter().copied().fold(0.0, f64::max) / norm;
            }
            steps += 1;
            for p in s.pages() {
                let i = *state_of
                    .get(p)
                    .ok_or_else(|| Error::Argument(format!("page {p:?} is not a state of the chain")))?;
                total += self.transitions[i].iter().copied().fold(0.0, f64::max);
                steps += 1;
            }
        }
        if steps == 0 {
            return Err(Error::Argument("no prediction steps".into()));
        }
        Ok(total / steps as f64)
    }
}

/// Ten-page insurance-site funnel ending on `quote-done`; transitions only
/// move forward, so every walk is short and exact enumeration stays cheap.
pub fn demo_funnel() -> MarkovSpec {
    let states = [
        "home",
        "car-insurance",
        "home-insurance",
        "faq",
        "compare",
        "contact",
        "quote-start",
        "quote-details",
        "quote-price",
        "quote-done",
        "exit",
    ];
    let row = |pairs: &[(usize, f64)]| {
        let mut r = vec![0.0; states.len()];
        for &(j, p) in pairs {
            r[j] = p;
        }
        r
    };
    let transitions = vec![
        row(&[(1, 0.3), (2, 0.2), (3, 0.1), (4, 0.15), (10, 0.25)]),
        row(&[(4, 0.3), (6, 0.45), (10, 0.25)]),
        row(&[(4, 0.25), (5, 0.1), (6, 0.4), (10, 0.25)]),
        row(&[(4, 0.2), (5, 0.3), (10, 0.5)]),
        row(&[(5, 0.1), (6, 0.55), (10, 0.35)]),
        row(&[(6, 0.3), (10, 0.7)]),
        row(&[(7, 0.6), (10, 0.4)]),
        row(&[(8, 0.7), (10, 0.3)]),
        row(&[(9, 0.5), (10, 0.5)]),
        row(&[(10, 1.0)]),
        row(&[(10, 1.0)]),
    ];
    let keywords = ["insurance", "car insurance", "home insurance quote", "insurance claim questions"];
    let mut keywords_by_state = vec![String::new(); states.len()];
    for (i, k) in keywords.iter().enumerate() {
        keywords_by_state[i] = k.to_string();
    }
    MarkovSpec {
        states: states.iter().map(|s| s.to_string()).collect(),
        transitions,
        initial: row(&[(0, 0.4), (1, 0.3), (2, 0.2), (3, 0.1)]),
        keywords_by_state,
        dwell_mean_by_state: vec![25.0, 40.0, 40.0, 60.0, 50.0, 30.0, 45.0, 90.0, 60.0, 20.0, 0.0],
    }
}

fn sample_index<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        if *p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Walks the chain `n_sessions` times. Same seed, same sessions.
pub fn generate_synthetic(spec: &MarkovSpec, n_sessions: usize, seed: u64) -> Result<Vec<Session>> {
    spec.validate()?;
    if n_sessions < 1 {
        return Err(Error::Argument("n_sessions must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dwell: Vec<Option<Exp<f64>>> =
        spec.dwell_mean_by_state.iter().map(|m| if *m > 0.0 { Exp::new(1.0 / m).ok() } else { None }).collect();
    let t = spec.terminal();
    let mut sessions = Vec::with_capacity(n_sessions);
    for k in 0..n_sessions {
        let mut state = sample_index(&spec.initial, &mut rng);
        let keywords = spec.keywords_by_state[state].clone();
        let mut events = Vec::new();
        while state != t {
            let d = dwell[state].map_or(0.0, |e| e.sample(&mut rng));
            events.push(PageEvent { page: spec.states[state].clone(), dwell_seconds: (d * 10.0).round() / 10.0 });
            state = sample_index(&spec.transitions[state], &mut rng);
        }
        sessions.push(Session { session_id: format!("s{k:06}"), keywords, events });
    }
    Ok(sessions)
}

/// Seeded shuffle, then the first `round(n * train_fraction)` sessions go to
/// training. Both parts are non-empty.
pub fn split(sessions: &[Session], train_fraction: f64, seed: u64) -> Result<(Vec<Session>, Vec<Session>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Argument(format!("train_fraction {train_fraction} is not in (0, 1)")));
    }
    if sessions.len() < 2 {
        return Err(Error::Argument("need at least 2 sessions to split".into()));
    }
    let mut order: Vec<usize> = (0..sessions.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((sessions.len() as f64 * train_fraction).round() as usize).clamp(1, sessions.len() - 1);
    let train = order[..n_train].iter().map(|&i| sessions[i].clone()).collect();
    let eval = order[n_train..].iter().map(|&i| sessions[i].clone()).collect();
    Ok((train, eval))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn session(id: &str, pages: &[(&str, f64)]) -> Session {
        Session {
            session_id: id.into(),
            keywords: "car insurance".into(),
            events: pages.iter().map(|(p, d)| PageEvent { page: p.to_string(), dwell_seconds: *d }).collect(),
        }
    }

    fn chain(states: &[&str], rows: Vec<Vec<f64>>, initial: Vec<f64>) -> MarkovSpec {
        let n = states.len();
        MarkovSpec {
            states: states.iter().map(|s| s.to_string()).collect(),
            transitions: rows,
            initial,
            keywords_by_state: (0..n).map(|i| format!("kw {i}")).collect(),
            dwell_mean_by_state: vec![20.0; n],
        }
    }

    #[test]
    fn parse_log_examples() {
        assert!(parse_log("".as_bytes()).unwrap().is_empty());
        let line = r#"{"session_id":"a","keywords":"car","events":[{"page":"home","dwell_seconds":3},{"page":"quote","dwell_seconds":40.5},{"page":"done","dwell_seconds":0}]}"#;
        let text = format!("\n{line}\n\n");
        let s = parse_log(text.as_bytes()).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].pages().collect::<Vec<_>>(), ["home", "quote", "done"]);

        let bad = r#"{"session_id":"a","keywords":"","events":[{"page":"home","dwell_seconds":-1}]}"#;
        let text = format!("{line}\n{bad}\n");
        match parse_log(text.as_bytes()) {
            Err(Error::Schema { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn parse_log_distinguishes_syntax_from_schema() {
        assert!(matches!(parse_log("{not json".as_bytes()), Err(Error::Parse { line: 1, .. })));
        let missing = r#"{"session_id":"a","events":[]}"#;
        assert!(matches!(parse_log(missing.as_bytes()), Err(Error::Schema { line: 1, .. })));
    }

    #[test]
    fn vocab_examples() {
        let v = build_vocab(&[session("a", &[("home", 1.0)])], 1).unwrap();
        assert_eq!(v.names(), ["home", NULL_PAGE, UNKNOWN_PAGE]);
        assert_eq!(v.len(), 3);

        let sessions = vec![
            session("a", &[("home", 1.0), ("quote", 1.0), ("home", 1.0)]),
            session("b", &[("quote", 1.0), ("rare", 1.0), ("about", 1.0)]),
            session("c", &[("about", 1.0)]),
        ];
        let v = build_vocab(&sessions, 2).unwrap();
        assert_eq!(v.names(), ["about", "home", "quote", NULL_PAGE, UNKNOWN_PAGE]);
        assert_eq!(v.encode("rare"), v.unknown_index());
        assert_eq!(v.encode("home"), 1);
        assert!(build_vocab(&[], 1).is_err());
    }

    #[test]
    fn replicate_dwell_examples() {
        let rule = DwellRule { unit_seconds: 30.0, cap: 5 };
        let count = |d: f64| replicate_dwell(&session("a", &[("p", d)]), &rule).len() - 1;
        assert_eq!(count(10.0), 1);
        assert_eq!(count(75.0), 3);
        assert_eq!(count(10_000.0), 5);
        assert_eq!(count(0.0), 1);
        let seq = replicate_dwell(&session("a", &[("x", 31.0), ("y", 1.0)]), &rule);
        assert_eq!(seq, ["x", "x", "y", NULL_PAGE]);
        assert_eq!(DwellRule::SINGLE.copies(1e9), 1);
    }

    #[test]
    fn deterministic_chain_generates_fixed_sessions() {
        let spec =
            chain(&["A", "B", "end"], vec![vec![0., 1., 0.], vec![0., 0., 1.], vec![0., 0., 1.]], vec![1., 0., 0.]);
        let s = generate_synthetic(&spec, 20, 4).unwrap();
        assert!(s.iter().all(|s| s.pages().collect::<Vec<_>>() == ["A", "B"]));
        assert_eq!(s, generate_synthetic(&spec, 20, 4).unwrap());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = chain(&["A", "end"], vec![vec![0.5, 0.4], vec![0., 1.]], vec![1., 0.]);
        assert!(matches!(generate_synthetic(&spec, 1, 0), Err(Error::Spec(_))));
        spec.transitions[0] = vec![1.0, 0.0];
        assert!(matches!(spec.validate(), Err(Error::Spec(_))), "A never reaches the terminal");
        spec.transitions[0] = vec![0.5, 0.5];
        spec.transitions[1] = vec![0.5, 0.5];
        assert!(spec.validate().is_err(), "terminal not absorbing");
    }

    #[test]
    fn empirical_transitions_match_spec() {
        let rows = vec![
            vec![0.1, 0.4, 0.2, 0.1, 0.2],
            vec![0.3, 0.0, 0.3, 0.2, 0.2],
            vec![0.2, 0.2, 0.1, 0.3, 0.2],
            vec![0.25, 0.25, 0.25, 0.0, 0.25],
            vec![0.0, 0.0, 0.0, 0.0, 1.0],
        ];
        let spec = chain(&["a", "b", "c", "d", "end"], rows.clone(), vec![0.4, 0.3, 0.2, 0.1, 0.0]);
        let sessions = generate_synthetic(&spec, 50_000, 11).unwrap();
        let idx = |p: &str| spec.states.iter().position(|s| s == p).unwrap();
        let mut counts = vec![vec![0usize; 5]; 5];
        for s in &sessions {
            let pages: Vec<usize> = s.pages().map(idx).collect();
            for w in pages.windows(2) {
                counts[w[0]][w[1]] += 1;
            }
            counts[*pages.last().unwrap()][4] += 1;
        }
        for i in 0..4 {
            let total: usize = counts[i].iter().sum();
            for j in 0..5 {
                let freq = counts[i][j] as f64 / total as f64;
                assert!((freq - rows[i][j]).abs() < 0.01, "cell ({i},{j}): {freq} vs {}", rows[i][j]);
            }
        }
    }

    #[test]
    fn split_examples() {
        let sessions: Vec<Session> = (0..10).map(|i| session(&i.to_string(), &[("p", 1.0)])).collect();
        let (train, eval) = split(&sessions, 0.8, 3).unwrap();
        assert_eq!((train.len(), eval.len()), (8, 2));
        let mut ids: Vec<String> = train.iter().chain(&eval).map(|s| s.session_id.clone()).collect();
        ids.sort();
        let mut expected: Vec<String> = sessions.iter().map(|s| s.session_id.clone()).collect();
        expected.sort();
        assert_eq!(ids, expected);
        assert_eq!(split(&sessions, 0.8, 3).unwrap(), (train, eval));
        assert!(split(&sessions[..1], 0.8, 3).is_err());
        assert!(split(&sessions, 1.0, 3).is_err());
    }

    #[test]
    fn bayes_accuracy_of_a_fork() {
        // A -> B (0.7) | end (0.3); B -> end.
        let spec =
            chain(&["A", "B", "end"], vec![vec![0., 0.7, 0.3], vec![0., 0., 1.], vec![0., 0., 1.]], vec![1., 0., 0.]);
        let s = Session {
            session_id: "x".into(),
            keywords: "kw 0".into(),
            events: vec![
                PageEvent { page: "A".into(), dwell_seconds: 1.0 },
                PageEvent { page: "B".into(), dwell_seconds: 1.0 },
            ],
        };
        // Steps: keyword -> A (1.0), A -> ? (0.7), B -> end (1.0).
        assert!((spec.bayes_accuracy(&[s]).unwrap() - 2.7 / 3.0).abs() < 1e-12);
    }

    fn arb_session() -> impl Strategy<Value = Session> {
        ("[a-z0-9]{1,6}", "[ -~]{0,12}", proptest::collection::vec(("[a-z_/]{1,8}", 0.0f64..1e4), 0..6)).prop_map(
            |(id, keywords, evs)| Session {
                session_id: id,
                keywords,
                events: evs.into_iter().map(|(page, dwell_seconds)| PageEvent { page, dwell_seconds }).collect(),
            },
        )
    }

    proptest! {
        #[test]
        fn log_round_trips(sessions in proptest::collection::vec(arb_session(), 0..5)) {
            let mut buf = Vec::new();
            write_log(&sessions, &mut buf).unwrap();
            prop_assert_eq!(parse_log(buf.as_slice()).unwrap(), sessions);
        }

        #[test]
        fn vocab_round_trips_and_reserves_tail(sessions in proptest::collection::vec(arb_session(), 1..6), min_freq in 1usize..3) {
            let v = build_vocab(&sessions, min_freq).unwrap();
            for i in 0..v.len() {
                prop_assert_eq!(v.encode(v.decode(i).unwrap()), i);
            }
            prop_assert_eq!(v.unknown_index(), v.len() - 1);
            prop_assert_eq!(v.null_index(), v.len() - 2);
        }
    }

    #[test]
    fn demo_funnel_is_valid() {
        let spec = demo_funnel();
        spec.validate().unwrap();
        assert_eq!(spec.states.len(), 11);
        let sessions = generate_synthetic(&spec, 200, 3).unwrap();
        assert!(sessions.iter().all(|s| !s.events.is_empty() && s.events.len() <= 8));
    }
}
