//! The meta-template, the per-dataset default attribute tables, and the
//! L9(3^4) family of robustness templates.
//!
//! A prompt is rendered as
//!
//! ```text
//! instruction
//!   (x_prefix text x_affix y_prefix verbalizer y_affix) for each demonstration
//! query_prefix x_prefix query x_affix y_prefix
//! ```
//!
//! so that the next token after the prompt is the label slot. Whitespace in
//! every attribute is significant.

use alloc::borrow::ToOwned;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{NoiseSpec, SampleRecord, SplitSizes};
use crate::rng::fnv1a;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("verbalizer {0:?} is not in the label space")]
    UnknownVerbalizer(String),
    #[error("label index {label} outside a label space of {size}")]
    LabelOutOfRange { label: usize, size: usize },
    #[error("label space is empty")]
    EmptyLabelSpace,
    #[error("verbalizer {0:?} appears more than once in the label space")]
    DuplicateVerbalizer(String),
    #[error("attribute {attribute} has {count} levels, expected 3")]
    MissingLevels {
        attribute: &'static str,
        count: usize,
    },
    #[error("attribute {attribute} repeats a level")]
    RepeatedLevel { attribute: &'static str },
    #[error("unknown dataset {0:?}")]
    UnknownDataset(String),
    #[error("noise spec covers {spec} positions but {demos} demonstrations were given")]
    NoiseLengthMismatch { spec: usize, demos: usize },
}

/// The ten supported datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dataset {
    Sst2,
    Mr,
    FinancialPhrasebank,
    Sst5,
    Trec,
    AgNews,
    Subjective,
    TweetEvalEmotion,
    TweetEvalHate,
    HateSpeech18,
}

impl Dataset {
    pub const ALL: [Dataset; 10] = [
        Dataset::Sst2,
        Dataset::Mr,
        Dataset::FinancialPhrasebank,
        Dataset::Sst5,
        Dataset::Trec,
        Dataset::AgNews,
        Dataset::Subjective,
        Dataset::TweetEvalEmotion,
        Dataset::TweetEvalHate,
        Dataset::HateSpeech18,
    ];

    /// Short identifier used in file names, manifests and reports.
    pub fn id(self) -> &'static str {
        match self {
            Dataset::Sst2 => "sst2",
            Dataset::Mr => "mr",
            Dataset::FinancialPhrasebank => "fp",
            Dataset::Sst5 => "sst5",
            Dataset::Trec => "trec",
            Dataset::AgNews => "agnews",
            Dataset::Subjective => "subj",
            Dataset::TweetEvalEmotion => "tee",
            Dataset::TweetEvalHate => "teh",
            Dataset::HateSpeech18 => "hs18",
        }
    }

    /// Default `(calibration, demonstration, test)` division sizes.
    pub fn default_sizes(self) -> SplitSizes {
        match self {
            Dataset::FinancialPhrasebank => SplitSizes::new(1024, 512, 512),
            Dataset::TweetEvalHate => SplitSizes::new(1024, 3192, 512),
            _ => SplitSizes::new(1024, 4096, 512),
        }
    }

    pub fn class_count(self) -> usize {
        default_bank(self).default.label_space.len()
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Dataset {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        Ok(match norm.as_str() {
            "sst2" => Dataset::Sst2,
            "mr" => Dataset::Mr,
            "fp" | "financialphrasebank" => Dataset::FinancialPhrasebank,
            "sst5" => Dataset::Sst5,
            "trec" => Dataset::Trec,
            "agnews" | "agn" => Dataset::AgNews,
            "subj" | "subjective" => Dataset::Subjective,
            "tee" | "tweetevalemotion" => Dataset::TweetEvalEmotion,
            "teh" | "tweetevalhate" => Dataset::TweetEvalHate,
            "hs18" | "hatespeech18" => Dataset::HateSpeech18,
            _ => return Err(TemplateError::UnknownDataset(s.to_owned())),
        })
    }
}

/// One concrete instantiation of the meta-template.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    #[serde(default)]
    pub instruction: String,
    pub x_prefix: String,
    pub x_affix: String,
    pub y_prefix: String,
    pub y_affix: String,
    #[serde(default)]
    pub query_prefix: String,
    pub label_space: Vec<String>,
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<(), TemplateError> {
        if self.label_space.is_empty() {
            return Err(TemplateError::EmptyLabelSpace);
        }
        for (i, v) in self.label_space.iter().enumerate() {
            if self.label_space[..i].contains(v) {
                return Err(TemplateError::DuplicateVerbalizer(v.clone()));
            }
        }
        Ok(())
    }

    pub fn verbalizer(&self, label: usize) -> Result<&str, TemplateError> {
        self.label_space
            .get(label)
            .map(String::as_str)
            .ok_or(TemplateError::LabelOutOfRange {
                label,
                size: self.label_space.len(),
            })
    }

    /// 64-bit FNV-1a of the canonical (compact JSON, declaration field
    /// order) serialization.
    pub fn fingerprint(&self) -> u64 {
        let bytes = serde_json::to_vec(self).expect("template serializes");
        fnv1a(&bytes)
    }
}

/// Three levels for each varied attribute; level 0 is the default.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeLevels {
    pub instruction: Vec<String>,
    pub x_prefix: Vec<String>,
    pub y_prefix: Vec<String>,
    pub y_affix: Vec<String>,
}

impl AttributeLevels {
    fn columns(&self) -> [(&'static str, &Vec<String>); 4] {
        [
            ("instruction", &self.instruction),
            ("x_prefix", &self.x_prefix),
            ("y_prefix", &self.y_prefix),
            ("y_affix", &self.y_affix),
        ]
    }
}

/// Default template plus alternate attribute levels for one dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateBank {
    pub dataset_id: String,
    pub default: PromptTemplate,
    pub alternates: AttributeLevels,
}

impl TemplateBank {
    /// Checks level counts, level distinctness and that level 0 is the default.
    pub fn validate(&self) -> Result<(), TemplateError> {
        self.default.validate()?;
        for (attribute, levels) in self.alternates.columns() {
            if levels.len() != 3 {
                return Err(TemplateError::MissingLevels {
                    attribute,
                    count: levels.len(),
                });
            }
            if levels[0] == levels[1] || levels[0] == levels[2] || levels[1] == levels[2] {
                return Err(TemplateError::RepeatedLevel { attribute });
            }
        }
        Ok(())
    }
}

/// Canonical L9(3^4) array, 0-based levels. Row 0 is all defaults; every
/// pair of columns contains each of the 9 level pairs exactly once.
pub const L9: [[usize; 4]; 9] = [
    [0, 0, 0, 0],
    [0, 1, 1, 1],
    [0, 2, 2, 2],
    [1, 0, 1, 2],
    [1, 1, 2, 0],
    [1, 2, 0, 1],
    [2, 0, 2, 1],
    [2, 1, 0, 2],
    [2, 2, 1, 0],
];

/// The 9 robustness templates. `(instruction, x_prefix, y_prefix, y_affix)`
/// follow the [`L9`] rows; everything else stays at the default.
pub fn l9_templates(bank: &TemplateBank) -> Result<Vec<PromptTemplate>, TemplateError> {
    for (attribute, levels) in bank.alternates.columns() {
        if levels.len() != 3 {
            return Err(TemplateError::MissingLevels {
                attribute,
                count: levels.len(),
            });
        }
    }
    let a = &bank.alternates;
    Ok(L9
        .iter()
        .map(|row| PromptTemplate {
            instruction: a.instruction[row[0]].clone(),
            x_prefix: a.x_prefix[row[1]].clone(),
            y_prefix: a.y_prefix[row[2]].clone(),
            y_affix: a.y_affix[row[3]].clone(),
            ..bank.default.clone()
        })
        .collect())
}

fn s(v: &str) -> String {
    v.to_string()
}

fn labels(v: &[&str]) -> Vec<String> {
    v.iter().map(|x| x.to_string()).collect()
}

/// Built-in default template and alternates for a dataset.
pub fn default_bank(dataset: Dataset) -> TemplateBank {
    use Dataset::*;
    // (x_prefix, y_prefix, label space, instruction levels 1 and 2, x_prefix levels 1 and 2)
    let (x_prefix, y_prefix, label_space, instr, xp_alt): (
        &str,
        &str,
        Vec<String>,
        [&str; 2],
        [&str; 2],
    ) = match dataset {
        Sst2 => (
            "sentence: ",
            "sentiment: ",
            labels(&["positive", "negative"]),
            [
                "How would you describe the overall feeling of the movie based on this sentence? ",
                "Please classify the sentiment of the following sentence. ",
            ],
            ["text: ", "review: "],
        ),
        Mr => (
            "review: ",
            "sentiment: ",
            labels(&["positive", "negative"]),
            [
                "How would you describe the overall feeling of the movie based on this sentence? ",
                "Please classify the sentiment of the following sentence. ",
            ],
            ["text: ", "sentence: "],
        ),
        FinancialPhrasebank => (
            "sentence: ",
            "sentiment: ",
            labels(&["positive", "neutral", "negative"]),
            [
                "What is the attitude towards the financial news in this sentence? ",
                "What is the emotional response to the financial news in this sentence? ",
            ],
            ["text: ", "news: "],
        ),
        Sst5 => (
            "sentence: ",
            "sentiment: ",
            labels(&["poor", "bad", "neutral", "good", "great"]),
            [
                "How would you describe the overall feeling of the movie based on this sentence? ",
                "What mood does this sentence convey about the movie? ",
            ],
            ["text: ", "review: "],
        ),
        Trec => (
            "question: ",
            "target: ",
            labels(&[
                "short",
                "entity",
                "description",
                "person",
                "location",
                "number",
            ]),
            [
                "What is the topic of the question? ",
                "What is the primary focus of this question? ",
            ],
            ["text: ", "sentence: "],
        ),
        AgNews => (
            "news: ",
            "topic: ",
            labels(&["world", "sports", "business", "science"]),
            [
                "What is the topic of the news? ",
                "What is the news focused on? ",
            ],
            ["text: ", "sentence: "],
        ),
        Subjective => (
            "review: ",
            "subjectiveness: ",
            labels(&["objective", "subjective"]),
            [
                "Does this sentence reflect a personal opinion? ",
                "Is this sentence expressing a personal opinion or stating a fact? ",
            ],
            ["text: ", "sentence: "],
        ),
        TweetEvalEmotion => (
            "tweet: ",
            "emotion: ",
            labels(&["anger", "joy", "positive", "sad"]),
            [
                "What feeling does this sentence convey? ",
                "What emotion does this sentence express? ",
            ],
            ["text: ", "sentence: "],
        ),
        TweetEvalHate => (
            "tweet: ",
            "hate speech: ",
            labels(&["normal", "hate"]),
            [
                "Does this sentence contain hate speech? ",
                "Is this sentence an example of hate speech? ",
            ],
            ["text: ", "sentence: "],
        ),
        HateSpeech18 => (
            "tweet: ",
            "hate speech: ",
            labels(&["normal", "hate", "skip", "relation"]),
            [
                "Does this sentence contain hate speech? ",
                "Is this sentence an example of hate speech? ",
            ],
            ["text: ", "sentence: "],
        ),
    };
    let default = PromptTemplate {
        instruction: String::new(),
        x_prefix: s(x_prefix),
        x_affix: s(" "),
        y_prefix: s(y_prefix),
        y_affix: s("\n"),
        query_prefix: String::new(),
        label_space,
    };
    TemplateBank {
        dataset_id: dataset.id().to_string(),
        alternates: AttributeLevels {
            instruction: vec![String::new(), s(instr[0]), s(instr[1])],
            x_prefix: vec![s(x_prefix), s(xp_alt[0]), s(xp_alt[1])],
            y_prefix: vec![s(y_prefix), s("label: "), s("Label: ")],
            y_affix: vec![s("\n"), s(" "), s("\t")],
        },
        default,
    }
}

/// Resolves a dataset id string to its built-in bank.
pub fn default_bank_for(dataset_id: &str) -> Result<TemplateBank, TemplateError> {
    dataset_id.parse::<Dataset>().map(default_bank)
}

/// Renders demonstrations `(text, verbalizer)` and a query; the result ends
/// with `y_prefix`.
pub fn render(
    template: &PromptTemplate,
    demos: &[(&str, &str)],
    query_text: &str,
) -> Result<String, TemplateError> {
    let mut out = String::new();
    out.push_str(&template.instruction);
    for (text, verbalizer) in demos {
        if !template.label_space.iter().any(|v| v == verbalizer) {
            return Err(TemplateError::UnknownVerbalizer((*verbalizer).to_owned()));
        }
        push_demo(&mut out, template, text, verbalizer);
    }
    out.push_str(&template.query_prefix);
    out.push_str(&template.x_prefix);
    out.push_str(query_text);
    out.push_str(&template.x_affix);
    out.push_str(&template.y_prefix);
    Ok(out)
}

fn push_demo(out: &mut String, t: &PromptTemplate, text: &str, verbalizer: &str) {
    out.push_str(&t.x_prefix);
    out.push_str(text);
    out.push_str(&t.x_affix);
    out.push_str(&t.y_prefix);
    out.push_str(verbalizer);
    out.push_str(&t.y_affix);
}

/// Label-before-input rendering for noisy-channel scoring. The prompt ends
/// with the candidate label block followed by `x_prefix`; the query text is
/// the continuation to be scored.
pub fn render_channel(
    template: &PromptTemplate,
    demos: &[(&str, &str)],
    candidate: &str,
) -> Result<String, TemplateError> {
    let mut out = String::new();
    out.push_str(&template.instruction);
    for verbalizer in demos.iter().map(|d| d.1).chain(core::iter::once(candidate)) {
        if !template.label_space.iter().any(|v| v == verbalizer) {
            return Err(TemplateError::UnknownVerbalizer(verbalizer.to_owned()));
        }
    }
    for (text, verbalizer) in demos {
        out.push_str(&template.y_prefix);
        out.push_str(verbalizer);
        out.push_str(&template.y_affix);
        out.push_str(&template.x_prefix);
        out.push_str(text);
        out.push_str(&template.x_affix);
    }
    out.push_str(&template.query_prefix);
    out.push_str(&template.y_prefix);
    out.push_str(candidate);
    out.push_str(&template.y_affix);
    out.push_str(&template.x_prefix);
    Ok(out)
}

/// Where the query slot's text came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoQueryKind {
    None,
    Empty,
    DomainSampled,
}

/// Query slot content: a real record or a pseudo query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySlot<'a> {
    pub id: usize,
    pub text: &'a str,
    pub kind: PseudoQueryKind,
}

impl<'a> QuerySlot<'a> {
    pub fn real(record: &'a SampleRecord) -> Self {
        Self {
            id: record.id,
            text: &record.text,
            kind: PseudoQueryKind::None,
        }
    }
}

/// A fully rendered prompt together with everything needed to regenerate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssembledPrompt {
    pub text: String,
    pub demo_ids: Vec<usize>,
    pub query_id: usize,
    pub template_fingerprint: u64,
    pub noise_applied: Option<NoiseSpec>,
    pub pseudo_query_kind: PseudoQueryKind,
}

/// Demonstration `(text, verbalizer)` pairs with noise substituted at render
/// time; the records themselves are never modified.
pub fn demo_pairs<'a>(
    template: &'a PromptTemplate,
    demos: &[&'a SampleRecord],
    noise: Option<&NoiseSpec>,
) -> Result<Vec<(&'a str, &'a str)>, TemplateError> {
    if let Some(spec) = noise {
        if spec.k != demos.len() {
            return Err(TemplateError::NoiseLengthMismatch {
                spec: spec.k,
                demos: demos.len(),
            });
        }
    }
    demos
        .iter()
        .enumerate()
        .map(|(pos, r)| {
            let label = noise.map_or(r.label, |n| n.label_at(pos, r.label));
            Ok((r.text.as_str(), template.verbalizer(label)?))
        })
        .collect()
}

/// Renders a prompt from records and records its provenance.
pub fn assemble(
    template: &PromptTemplate,
    demos: &[&SampleRecord],
    query: &QuerySlot<'_>,
    noise: Option<&NoiseSpec>,
) -> Result<AssembledPrompt, TemplateError> {
    let pairs = demo_pairs(template, demos, noise)?;
    let text = render(template, &pairs, query.text)?;
    Ok(AssembledPrompt {
        text,
        demo_ids: demos.iter().map(|r| r.id).collect(),
        query_id: query.id,
        template_fingerprint: template.fingerprint(),
        noise_applied: noise.filter(|n| !n.is_noop()).cloned(),
        pseudo_query_kind: query.kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    #[test]
    fn sst2_single_demo_exact_bytes() {
        let bank = default_bank(Dataset::Sst2);
        let text = render(&bank.default, &[("great movie", "positive")], "dull plot").unwrap();
        assert_eq!(
            text,
            "sentence: great movie sentiment: positive\nsentence: dull plot sentiment: "
        );
    }

    #[test]
    fn zero_demos_is_query_block_only() {
        let mut t = default_bank(Dataset::AgNews).default;
        t.instruction = "Classify. ".into();
        assert_eq!(render(&t, &[], "x").unwrap(), "Classify. news: x topic: ");
    }

    #[test]
    fn unknown_verbalizer_rejected() {
        let t = default_bank(Dataset::Sst2).default;
        assert_eq!(
            render(&t, &[("a", "neutral")], "b"),
            Err(TemplateError::UnknownVerbalizer("neutral".into()))
        );
    }

    #[test]
    fn prompt_ends_with_y_prefix_for_every_l9_template() {
        for d in Dataset::ALL {
            for t in l9_templates(&default_bank(d)).unwrap() {
                let v = t.label_space[0].clone();
                let text = render(&t, &[("a b", &v), ("c", &v)], "q").unwrap();
                assert!(text.ends_with(&t.y_prefix));
            }
        }
    }

    #[test]
    fn l9_is_strength_two() {
        for a in 0..4 {
            for b in (a + 1)..4 {
                let pairs: BTreeSet<(usize, usize)> = L9.iter().map(|r| (r[a], r[b])).collect();
                assert_eq!(pairs.len(), 9);
            }
        }
        assert_eq!(L9[0], [0, 0, 0, 0]);
    }

    #[test]
    fn l9_row_zero_is_default() {
        for d in Dataset::ALL {
            let bank = default_bank(d);
            bank.validate().unwrap();
            let ts = l9_templates(&bank).unwrap();
            assert_eq!(ts.len(), 9);
            assert_eq!(ts[0], bank.default);
        }
    }

    #[test]
    fn collapsed_levels_give_identical_templates() {
        let mut bank = default_bank(Dataset::Trec);
        bank.alternates.instruction = vec![String::new(); 3];
        bank.alternates.x_prefix = vec![bank.default.x_prefix.clone(); 3];
        bank.alternates.y_prefix = vec![bank.default.y_prefix.clone(); 3];
        bank.alternates.y_affix = vec![bank.default.y_affix.clone(); 3];
        let ts = l9_templates(&bank).unwrap();
        assert!(ts.iter().all(|t| *t == ts[0]));
        assert_eq!(
            bank.validate(),
            Err(TemplateError::RepeatedLevel {
                attribute: "instruction"
            })
        );
    }

    #[test]
    fn missing_levels_rejected() {
        let mut bank = default_bank(Dataset::Mr);
        bank.alternates.y_affix.pop();
        assert_eq!(
            l9_templates(&bank),
            Err(TemplateError::MissingLevels {
                attribute: "y_affix",
                count: 2
            })
        );
    }

    #[test]
    fn noise_substitutes_verbalizer_only_at_render() {
        let t = default_bank(Dataset::Sst2).default;
        let recs = [
            SampleRecord {
                id: 5,
                text: "nice".into(),
                label: 0,
            },
            SampleRecord {
                id: 6,
                text: "awful".into(),
                label: 1,
            },
        ];
        let mut noise = NoiseSpec::none(2);
        noise.p = 0.5;
        noise.flip_positions.insert(1);
        noise.replacement_labels.insert(1, 0);
        let q = SampleRecord {
            id: 9,
            text: "meh".into(),
            label: 1,
        };
        let refs: Vec<&SampleRecord> = recs.iter().collect();
        let p = assemble(&t, &refs, &QuerySlot::real(&q), Some(&noise)).unwrap();
        assert_eq!(
            p.text,
            "sentence: nice sentiment: positive\nsentence: awful sentiment: positive\nsentence: meh sentiment: "
        );
        assert_eq!(recs[1].label, 1);
        assert_eq!(p.demo_ids, vec![5, 6]);
        assert!(p.noise_applied.is_some());
    }

    #[test]
    fn channel_render_puts_label_first() {
        let t = default_bank(Dataset::Sst2).default;
        let text = render_channel(&t, &[("good", "positive")], "negative").unwrap();
        assert_eq!(
            text,
            "sentiment: positive\nsentence: good sentiment: negative\nsentence: "
        );
    }

    #[test]
    fn fingerprint_tracks_whitespace() {
        let a = default_bank(Dataset::Sst2).default;
        let mut b = a.clone();
        b.y_prefix = "sentiment:".into();
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn dataset_ids_round_trip() {
        for d in Dataset::ALL {
            assert_eq!(d.id().parse::<Dataset>().unwrap(), d);
        }
        assert_eq!("SST-2".parse::<Dataset>().unwrap(), Dataset::Sst2);
        assert!("imdb".parse::<Dataset>().is_err());
    }
}
