//! EmpatheticDialogues ingestion: CSV loading, emotion polarity, and
//! context/target example construction.
//!
//! The distributed files are comma-separated without quoting; commas inside
//! text fields are written as `_comma_`. Columns are
//! `conv_id,utterance_idx,context,prompt,speaker_idx,utterance` optionally
//! followed by `selfeval,tags`, where `context` holds the emotion label and
//! `prompt` the grounding situation.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, IoContext, Result};

const COMMA_ESCAPE: &str = "_comma_";
const REQUIRED_COLUMNS: [&str; 6] = [
    "conv_id",
    "utterance_idx",
    "context",
    "prompt",
    "speaker_idx",
    "utterance",
];

/// Marker prepended to speaker turns in serialized contexts.
pub const SPEAKER_MARKER: &str = "Speaker:";
/// Marker prepended to listener turns in serialized contexts.
pub const LISTENER_MARKER: &str = "Listener:";

pub const POSITIVE_EMOTIONS: [&str; 15] = [
    "surprised",
    "excited",
    "proud",
    "grateful",
    "impressed",
    "hopeful",
    "confident",
    "joyful",
    "content",
    "caring",
    "trusting",
    "faithful",
    "prepared",
    "sentimental",
    "anticipating",
];

pub const NEGATIVE_EMOTIONS: [&str; 17] = [
    "angry",
    "sad",
    "annoyed",
    "lonely",
    "afraid",
    "terrified",
    "guilty",
    "disgusted",
    "furious",
    "anxious",
    "nostalgic",
    "disappointed",
    "jealous",
    "devastated",
    "embarrassed",
    "ashamed",
    "apprehensive",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    /// Class index used by the sentiment head: 0 = positive, 1 = negative.
    pub fn index(self) -> usize {
        match self {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        match index {
            0 => Some(Polarity::Positive),
            1 => Some(Polarity::Negative),
            _ => None,
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Polarity::Positive => "positive",
            Polarity::Negative => "negative",
        })
    }
}

/// One of the 32 dataset emotion labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct EmotionLabel(&'static str);

impl EmotionLabel {
    pub fn name(&self) -> &'static str {
        self.0
    }

    pub fn polarity(&self) -> Polarity {
        // Construction guarantees membership in one of the two tables.
        if POSITIVE_EMOTIONS.contains(&self.0) {
            Polarity::Positive
        } else {
            Polarity::Negative
        }
    }

    pub fn all() -> impl Iterator<Item = EmotionLabel> {
        POSITIVE_EMOTIONS
            .iter()
            .chain(NEGATIVE_EMOTIONS.iter())
            .map(|name| EmotionLabel(name))
    }
}

impl FromStr for EmotionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let wanted = s.trim();
        POSITIVE_EMOTIONS
            .iter()
            .chain(NEGATIVE_EMOTIONS.iter())
            .find(|name| **name == wanted)
            .map(|name| EmotionLabel(name))
            .ok_or_else(|| Error::UnknownEmotion(s.to_string()))
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.0)
    }
}

impl Serialize for EmotionLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.0)
    }
}

impl<'de> Deserialize<'de> for EmotionLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Polarity of a raw emotion string.
pub fn polarity_of(emotion: &str) -> Result<Polarity> {
    Ok(emotion.parse::<EmotionLabel>()?.polarity())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Speaker,
    Listener,
}

impl Role {
    fn marker(self) -> &'static str {
        match self {
            Role::Speaker => SPEAKER_MARKER,
            Role::Listener => LISTENER_MARKER,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn new(role: Role, text: impl Into<String>) -> Self {
        Turn {
            role,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.csv",
            Split::Valid => "valid.csv",
            Split::Test => "test.csv",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" | "validation" | "dev" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub emotion: EmotionLabel,
    pub situation: String,
    pub turns: Vec<Turn>,
    pub split: Split,
}

impl Conversation {
    /// Checks role alternation (speaker first) and non-empty turn texts.
    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(Error::MalformedCorpus(format!(
                "conversation {} has no turns",
                self.id
            )));
        }
        for (i, turn) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 {
                Role::Speaker
            } else {
                Role::Listener
            };
            if turn.role != expected {
                return Err(Error::MalformedCorpus(format!(
                    "conversation {} turn {i} has role {:?}, expected {:?}",
                    self.id, turn.role, expected
                )));
            }
            if turn.text.trim().is_empty() {
                return Err(Error::MalformedCorpus(format!(
                    "conversation {} turn {i} is empty",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn polarity(&self) -> Polarity {
        self.emotion.polarity()
    }

    pub fn listener_turns(&self) -> usize {
        self.turns.iter().filter(|t| t.role == Role::Listener).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub context_text: String,
    pub target_text: String,
    pub polarity: Polarity,
    pub conversation_id: String,
    pub turn_index: usize,
}

/// Joins turns with their role markers. Training and serving both go
/// through this function so the model always sees one format.
pub fn serialize_context(turns: &[Turn]) -> String {
    let mut out = String::new();
    for turn in turns {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(turn.role.marker());
        out.push(' ');
        out.push_str(turn.text.trim());
    }
    out
}

/// One example per listener turn. `max_context_turns = None` keeps the full
/// prior history; `Some(n)` keeps the `n` most recent turns (at least one).
pub fn build_examples(conv: &Conversation, max_context_turns: Option<usize>) -> Vec<TrainingExample> {
    let polarity = conv.polarity();
    conv.turns
        .iter()
        .enumerate()
        .filter(|(_, t)| t.role == Role::Listener)
        .map(|(i, target)| {
            let window = max_context_turns.map_or(i, |n| n.max(1).min(i));
            TrainingExample {
                context_text: serialize_context(&conv.turns[i - window..i]),
                target_text: target.text.trim().to_string(),
                polarity,
                conversation_id: conv.id.clone(),
                turn_index: i,
            }
        })
        .collect()
}

pub fn build_all_examples(
    conversations: &[Conversation],
    max_context_turns: Option<usize>,
) -> Vec<TrainingExample> {
    conversations
        .iter()
        .flat_map(|c| build_examples(c, max_context_turns))
        .collect()
}

/// Loads one split. `path` may be the split's CSV file or the directory
/// holding `train.csv`, `valid.csv` and `test.csv`.
pub fn load_corpus(path: impl AsRef<Path>, split: Split) -> Result<Vec<Conversation>> {
    let path = path.as_ref();
    let file = if path.is_dir() {
        path.join(split.file_name())
    } else {
        path.to_path_buf()
    };
    let handle = fs::File::open(&file).with_path(&file)?;
    parse_corpus(BufReader::new(handle), split)
}

struct RawRow {
    line: usize,
    utterance_idx: usize,
    emotion: String,
    situation: String,
    text: String,
}

pub fn parse_corpus(reader: impl BufRead, split: Split) -> Result<Vec<Conversation>> {
    let mut lines = reader.lines().enumerate();
    let header = loop {
        match lines.next() {
            None => return Err(Error::MalformedCorpus("empty file".into())),
            Some((i, line)) => {
                let line = line.map_err(|e| Error::MalformedCorpus(format!("line {}: {e}", i + 1)))?;
                if !line.trim().is_empty() {
                    break line;
                }
            }
        }
    };
    let columns: Vec<&str> = header.trim_end().split(',').collect();
    if columns.len() < REQUIRED_COLUMNS.len() || columns[..REQUIRED_COLUMNS.len()] != REQUIRED_COLUMNS {
        return Err(Error::MalformedCorpus(format!("unexpected header {header:?}")));
    }
    let max_columns = columns.len();

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<RawRow>> = HashMap::new();
    for (i, line) in lines {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::MalformedCorpus(format!("line {line_no}: {e}")))?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < REQUIRED_COLUMNS.len() || fields.len() > max_columns {
            return Err(Error::MalformedCorpus(format!(
                "line {line_no}: expected {}..={max_columns} columns, found {}",
                REQUIRED_COLUMNS.len(),
                fields.len()
            )));
        }
        let utterance_idx = fields[1].trim().parse::<usize>().map_err(|_| {
            Error::MalformedCorpus(format!("line {line_no}: bad utterance_idx {:?}", fields[1]))
        })?;
        let conv_id = fields[0].trim().to_string();
        let row = RawRow {
            line: line_no,
            utterance_idx,
            emotion: fields[2].trim().to_string(),
            situation: unescape(fields[3]),
            text: unescape(fields[5]),
        };
        groups
            .entry(conv_id.clone())
            .or_insert_with(|| {
                order.push(conv_id);
                Vec::new()
            })
            .push(row);
    }

    let mut conversations = Vec::with_capacity(order.len());
    for id in order {
        let mut rows = groups.remove(&id).unwrap_or_default();
        rows.sort_by_key(|r| r.utterance_idx);
        if let Some(pair) = rows.windows(2).find(|w| w[0].utterance_idx == w[1].utterance_idx) {
            return Err(Error::MalformedCorpus(format!(
                "line {}: duplicate utterance_idx {} in {id}",
                pair[1].line, pair[1].utterance_idx
            )));
        }
        let emotion: EmotionLabel = rows[0].emotion.parse()?;
        if let Some(bad) = rows.iter().find(|r| r.emotion != rows[0].emotion) {
            return Err(Error::MalformedCorpus(format!(
                "line {}: emotion {:?} differs within conversation {id}",
                bad.line, bad.emotion
            )));
        }
        let turns = rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let role = if i % 2 == 0 {
                    Role::Speaker
                } else {
                    Role::Listener
                };
                Turn::new(role, r.text.clone())
            })
            .collect();
        let conv = Conversation {
            id,
            emotion,
            situation: rows[0].situation.clone(),
            turns,
            split,
        };
        conv.validate()?;
        conversations.push(conv);
    }
    if conversations.is_empty() {
        return Err(Error::MalformedCorpus("no data rows".into()));
    }
    Ok(conversations)
}

fn unescape(field: &str) -> String {
    field.replace(COMMA_ESCAPE, ",")
}

fn escape(field: &str) -> String {
    field.replace(',', COMMA_ESCAPE)
}

/// Writes conversations in the dataset's CSV layout (six columns).
pub fn write_corpus_csv(conversations: &[Conversation], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{}", REQUIRED_COLUMNS.join(","))?;
    for conv in conversations {
        for (i, turn) in conv.turns.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                conv.id,
                i + 1,
                conv.emotion,
                escape(&conv.situation),
                i % 2,
                escape(&turn.text)
            )?;
        }
    }
    Ok(())
}

/// Normalized cache: one JSON conversation per line.
pub fn write_jsonl(conversations: &[Conversation], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(fs::File::create(path).with_path(path)?);
    for conv in conversations {
        serde_json::to_writer(&mut out, conv)?;
        out.write_all(b"\n").with_path(path)?;
    }
    out.flush().with_path(path)
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Conversation>> {
    let path = path.as_ref();
    let reader = BufReader::new(fs::File::open(path).with_path(path)?);
    let mut conversations = Vec::new();
    for line in reader.lines() {
        let line = line.with_path(path)?;
        if line.trim().is_empty() {
            continue;
        }
        let conv: Conversation = serde_json::from_str(&line)?;
        conv.validate()?;
        conversations.push(conv);
    }
    Ok(conversations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EXAMPLE_ONE: &str = "\
conv_id,utterance_idx,context,prompt,speaker_idx,utterance,selfeval,tags
hit:1_conv:2,1,disappointed,A promised project was pulled away,10,I felt so let down by a person who promised me a project -- but then pulled it away at the last minute in a way that was very personal and reactionary.,5|5|5_2|2|5,
hit:1_conv:2,2,disappointed,A promised project was pulled away,11,That's terrible. People need to learn to commit to their promises.,5|5|5_2|2|5,
";

    fn conversation(turns: &[&str]) -> Conversation {
        Conversation {
            id: "c".into(),
            emotion: "excited".parse().unwrap(),
            situation: "s".into(),
            turns: turns
                .iter()
                .enumerate()
                .map(|(i, t)| Turn::new(if i % 2 == 0 { Role::Speaker } else { Role::Listener }, *t))
                .collect(),
            split: Split::Train,
        }
    }

    #[test]
    fn polarity_table_sizes() {
        assert_eq!(EmotionLabel::all().count(), 32);
        let positive = EmotionLabel::all().filter(|e| e.polarity() == Polarity::Positive).count();
        assert_eq!(positive, 15);
        assert_eq!(32 - positive, 17);
    }

    #[test]
    fn polarity_lookup() {
        assert_eq!(polarity_of("joyful").unwrap(), Polarity::Positive);
        assert_eq!(polarity_of("angry").unwrap(), Polarity::Negative);
        assert!(matches!(polarity_of("serene"), Err(Error::UnknownEmotion(_))));
    }

    #[test]
    fn parses_example_row_and_restores_commas() {
        let convs = parse_corpus(EXAMPLE_ONE.as_bytes(), Split::Test).unwrap();
        assert_eq!(convs.len(), 1);
        let c = &convs[0];
        assert_eq!(c.emotion.name(), "disappointed");
        assert!(c.turns[0].text.starts_with("I felt so let down by a person"));
        assert_eq!(c.turns[1].role, Role::Listener);

        let escaped = "conv_id,utterance_idx,context,prompt,speaker_idx,utterance\n\
                       a,1,sad,x_comma_ y,1,one_comma_ two\n";
        let convs = parse_corpus(escaped.as_bytes(), Split::Train).unwrap();
        assert_eq!(convs[0].situation, "x, y");
        assert_eq!(convs[0].turns[0].text, "one, two");
    }

    #[test]
    fn turns_ordered_by_utterance_idx() {
        let text = "conv_id,utterance_idx,context,prompt,speaker_idx,utterance\n\
                    a,2,sad,p,0,second\n\
                    a,1,sad,p,1,first\n";
        let convs = parse_corpus(text.as_bytes(), Split::Train).unwrap();
        assert_eq!(convs[0].turns[0].text, "first");
        assert_eq!(convs[0].turns[1].text, "second");
    }

    #[test]
    fn malformed_inputs() {
        let err = parse_corpus("".as_bytes(), Split::Train).unwrap_err();
        assert!(err.to_string().contains("malformed corpus"), "{err}");

        let short = "conv_id,utterance_idx,context,prompt,speaker_idx,utterance\na,1,sad,p\n";
        assert!(matches!(parse_corpus(short.as_bytes(), Split::Train), Err(Error::MalformedCorpus(_))));

        let unknown = "conv_id,utterance_idx,context,prompt,speaker_idx,utterance\na,1,serene,p,1,hi\n";
        assert!(matches!(parse_corpus(unknown.as_bytes(), Split::Train), Err(Error::UnknownEmotion(_))));
    }

    #[test]
    fn examples_follow_listener_turns() {
        let conv = conversation(&["s1", "l1", "s2", "l2"]);
        let examples = build_examples(&conv, None);
        assert_eq!(examples.len(), 2);
        assert_eq!(examples[0].turn_index, 1);
        assert_eq!(examples[1].turn_index, 3);
        assert_eq!(examples[0].context_text, "Speaker: s1");
        assert_eq!(examples[1].context_text, "Speaker: s1 Listener: l1 Speaker: s2");
        assert_eq!(examples[1].target_text, "l2");
        assert_eq!(examples[1].polarity, Polarity::Positive);

        let windowed = build_examples(&conv, Some(1));
        assert_eq!(windowed[1].context_text, "Speaker: s2");

        assert!(build_examples(&conversation(&["only speaker"]), None).is_empty());
    }

    #[test]
    fn amusement_park_example() {
        let conv = conversation(&[
            "I am going to my local amusement park tomorrow and feeling a certain way about it!",
            "Which way are you feeling? Are you a thrill seeker?",
        ]);
        let ex = build_examples(&conv, None);
        assert_eq!(ex.len(), 1);
        assert!(ex[0].context_text.contains("I am going to my local amusement park tomorrow"));
        assert_eq!(ex[0].target_text, "Which way are you feeling? Are you a thrill seeker?");
    }

    #[test]
    fn jsonl_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache.jsonl");
        let convs = parse_corpus(EXAMPLE_ONE.as_bytes(), Split::Test).unwrap();
        write_jsonl(&convs, &path).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), convs);
    }

    fn arb_text() -> impl Strategy<Value = String> {
        "[A-Za-z][A-Za-z ,.!?']{0,30}".prop_filter("non-blank and escape-free", |s| {
            !s.trim().is_empty() && !s.contains(COMMA_ESCAPE)
        })
    }

    proptest! {
        #[test]
        fn csv_round_trip(
            convs in prop::collection::vec(
                (prop::sample::select((0..32).collect::<Vec<_>>()), arb_text(), prop::collection::vec(arb_text(), 1..6)),
                1..5,
            )
        ) {
            let emotions: Vec<EmotionLabel> = EmotionLabel::all().collect();
            let original: Vec<Conversation> = convs
                .into_iter()
                .enumerate()
                .map(|(n, (e, situation, texts))| Conversation {
                    id: format!("hit:{n}_conv:{}", n * 2),
                    emotion: emotions[e],
                    situation,
                    turns: texts
                        .into_iter()
                        .enumerate()
                        .map(|(i, t)| Turn::new(if i % 2 == 0 { Role::Speaker } else { Role::Listener }, t))
                        .collect(),
                    split: Split::Valid,
                })
                .collect();
            let mut buf = Vec::new();
            write_corpus_csv(&original, &mut buf).unwrap();
            let reloaded = parse_corpus(buf.as_slice(), Split::Valid).unwrap();
            prop_assert_eq!(reloaded, original);
        }
    }
}
