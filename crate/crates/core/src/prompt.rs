//! Slot-structured prompts: a rule-based parser, an optional provider-backed
//! parser that falls back to it, and flat-prompt reconstruction.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, ProviderError, Result};

/// The semantic slot a prompt phrase is assigned to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotKind {
    Subject,
    Scene,
    Action,
    Clothing,
    Colors,
    Props,
    Style,
    Lighting,
    Shot,
    TextLogoEntity,
    NamedEntity,
}

impl SlotKind {
    pub const ALL: [SlotKind; 11] = [
        SlotKind::Subject,
        SlotKind::Scene,
        SlotKind::Action,
        SlotKind::Clothing,
        SlotKind::Colors,
        SlotKind::Props,
        SlotKind::Style,
        SlotKind::Lighting,
        SlotKind::Shot,
        SlotKind::TextLogoEntity,
        SlotKind::NamedEntity,
    ];

    /// Order used when flattening a structured prompt back to text.
    pub const TEMPLATE_ORDER: [SlotKind; 11] = [
        SlotKind::Subject,
        SlotKind::Action,
        SlotKind::Scene,
        SlotKind::Clothing,
        SlotKind::Colors,
        SlotKind::Props,
        SlotKind::Style,
        SlotKind::Lighting,
        SlotKind::Shot,
        SlotKind::TextLogoEntity,
        SlotKind::NamedEntity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SlotKind::Subject => "subject",
            SlotKind::Scene => "scene",
            SlotKind::Action => "action",
            SlotKind::Clothing => "clothing",
            SlotKind::Colors => "colors",
            SlotKind::Props => "props",
            SlotKind::Style => "style",
            SlotKind::Lighting => "lighting",
            SlotKind::Shot => "shot",
            SlotKind::TextLogoEntity => "text_logo_entity",
            SlotKind::NamedEntity => "named_entity",
        }
    }

    pub fn from_name(name: &str) -> Option<SlotKind> {
        SlotKind::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn schema() -> Vec<String> {
        SlotKind::ALL.iter().map(|k| k.name().to_string()).collect()
    }
}

impl fmt::Display for SlotKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A slot or the residue bucket. Orders slots first (in [`SlotKind`] order),
/// residue last.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Bucket {
    Slot(SlotKind),
    Residue,
}

impl Bucket {
    pub fn name(self) -> &'static str {
        match self {
            Bucket::Slot(k) => k.name(),
            Bucket::Residue => "residue",
        }
    }
}

impl fmt::Display for Bucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl From<Bucket> for String {
    fn from(b: Bucket) -> String {
        b.name().to_string()
    }
}

impl TryFrom<String> for Bucket {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        if s == "residue" {
            return Ok(Bucket::Residue);
        }
        SlotKind::from_name(&s)
            .map(Bucket::Slot)
            .ok_or_else(|| format!("unknown slot kind '{s}'"))
    }
}

/// A prompt decomposed into slots. Serializes as a flat object keyed by slot
/// name plus `source`, `residue` and (when present) `warnings`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructuredPrompt {
    pub source: String,
    #[serde(flatten)]
    slots: BTreeMap<SlotKind, Vec<String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    residue: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl StructuredPrompt {
    pub fn new(source: impl Into<String>) -> Self {
        Self {
            source: source.into(),
            slots: BTreeMap::new(),
            residue: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn phrases(&self, kind: SlotKind) -> &[String] {
        self.slots.get(&kind).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn residue(&self) -> &[String] {
        &self.residue
    }

    pub fn bucket(&self, bucket: Bucket) -> &[String] {
        match bucket {
            Bucket::Slot(k) => self.phrases(k),
            Bucket::Residue => &self.residue,
        }
    }

    /// Nonempty slots in [`SlotKind`] order.
    pub fn slots(&self) -> impl Iterator<Item = (SlotKind, &[String])> {
        self.slots
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| (*k, v.as_slice()))
    }

    /// Nonempty buckets, slots first and residue last.
    pub fn buckets(&self) -> Vec<Bucket> {
        let mut out: Vec<Bucket> = self.slots().map(|(k, _)| Bucket::Slot(k)).collect();
        if !self.residue.is_empty() {
            out.push(Bucket::Residue);
        }
        out
    }

    pub fn is_empty(&self) -> bool {
        self.residue.is_empty() && self.slots.values().all(Vec::is_empty)
    }

    pub fn push(&mut self, bucket: Bucket, phrase: impl Into<String>) {
        let phrase = phrase.into();
        match bucket {
            Bucket::Slot(k) => self.slots.entry(k).or_default().push(phrase),
            Bucket::Residue => self.residue.push(phrase),
        }
    }

    /// Replaces the phrase at `index` within `bucket`.
    pub fn replace(&mut self, bucket: Bucket, index: usize, phrase: impl Into<String>) -> Result<()> {
        let list = match bucket {
            Bucket::Slot(k) => self.slots.get_mut(&k),
            Bucket::Residue => Some(&mut self.residue),
        };
        let slot = list
            .and_then(|l| l.get_mut(index))
            .ok_or_else(|| Error::contract(format!("no phrase {index} in {bucket}")))?;
        *slot = phrase.into();
        Ok(())
    }

    /// Finds which bucket holds a phrase (case-folded comparison).
    pub fn find(&self, phrase: &str) -> Option<Bucket> {
        let needle = fold(phrase);
        self.slots
            .iter()
            .find(|(_, v)| v.iter().any(|p| fold(p) == needle))
            .map(|(k, _)| Bucket::Slot(*k))
            .or_else(|| {
                self.residue
                    .iter()
                    .any(|p| fold(p) == needle)
                    .then_some(Bucket::Residue)
            })
    }

    /// Checks the phrase-level invariants: every phrase nonempty and trimmed,
    /// and no phrase shared between two buckets.
    pub fn validate(&self) -> Result<()> {
        let mut owner: HashMap<String, Bucket> = HashMap::new();
        let all = self
            .slots
            .iter()
            .flat_map(|(k, v)| v.iter().map(move |p| (Bucket::Slot(*k), p)))
            .chain(self.residue.iter().map(|p| (Bucket::Residue, p)));
        for (bucket, phrase) in all {
            if phrase.trim().is_empty() || phrase.trim() != phrase {
                return Err(Error::Consistency(format!(
                    "phrase '{phrase}' in {bucket} is empty or untrimmed"
                )));
            }
            if let Some(prev) = owner.insert(fold(phrase), bucket) {
                if prev != bucket {
                    return Err(Error::Consistency(format!(
                        "phrase '{phrase}' appears in both {prev} and {bucket}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Lower-cases and collapses whitespace.
pub fn fold(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

const ARTICLES: [&str; 3] = ["a", "an", "the"];

/// Words that open a new span in the prompt grammar.
const CUE_WORDS: [&str; 8] = ["wearing", "dressed", "in", "at", "on", "with", "and", "or"];

/// Tokens that the parser may consume without placing them in a phrase.
const STOPWORDS: [&str; 13] = [
    "a", "an", "the", "and", "or", "&", "with", "wearing", "dressed", "in", "at", "on", "style",
];

fn is_stopword(w: &str) -> bool {
    STOPWORDS.contains(&w) || w == "shot"
}

fn is_boundary(c: char, next: Option<char>) -> bool {
    match c {
        ',' | ';' | '!' | '?' | ':' | '\n' => true,
        '.' => next.is_none_or(char::is_whitespace),
        _ => false,
    }
}

fn clean_token(t: &str) -> &str {
    t.trim_matches(|c: char| matches!(c, '"' | '(' | ')' | '[' | ']' | '{' | '}' | '`'))
}

/// Splits text into comma/sentence segments of cleaned word tokens.
fn segments(raw: &str) -> Vec<Vec<String>> {
    let chars: Vec<char> = raw.chars().collect();
    let mut out = Vec::new();
    let mut current = String::new();
    for (i, &c) in chars.iter().enumerate() {
        if is_boundary(c, chars.get(i + 1).copied()) {
            out.push(std::mem::take(&mut current));
        } else {
            current.push(c);
        }
    }
    out.push(current);
    out.into_iter()
        .map(|seg| {
            seg.split_whitespace()
                .map(clean_token)
                .filter(|t| !t.is_empty())
                .map(str::to_string)
                .collect::<Vec<_>>()
        })
        .filter(|seg| !seg.is_empty())
        .collect()
}

/// The case-folded, sorted multiset of non-stopword tokens in `text`.
pub fn content_words(text: &str) -> Vec<String> {
    let mut words: Vec<String> = segments(text)
        .into_iter()
        .flatten()
        .map(|w| w.to_lowercase())
        .filter(|w| !is_stopword(w))
        .collect();
    words.sort();
    words
}

/// Word lists driving the rule-based parser.
#[derive(Debug, Clone, Deserialize)]
pub struct Lexicon {
    style: HashSet<String>,
    shot: HashSet<String>,
    lighting: HashSet<String>,
    colors: HashSet<String>,
    clothing: HashSet<String>,
    scene: HashSet<String>,
    logo_heads: HashSet<String>,
    modifiers: HashSet<String>,
    non_gerunds: HashSet<String>,
}

const BUILTIN_LEXICON: &str = include_str!("../data/lexicon.toml");

impl Lexicon {
    pub fn builtin() -> &'static Lexicon {
        static LEXICON: OnceLock<Lexicon> = OnceLock::new();
        LEXICON.get_or_init(|| Lexicon::from_toml_str(BUILTIN_LEXICON).expect("builtin lexicon parses"))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut lex: Lexicon = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for set in [
            &mut lex.style,
            &mut lex.shot,
            &mut lex.lighting,
            &mut lex.colors,
            &mut lex.clothing,
            &mut lex.scene,
            &mut lex.logo_heads,
            &mut lex.modifiers,
            &mut lex.non_gerunds,
        ] {
            *set = set.iter().map(|s| fold(s)).collect();
        }
        Ok(lex)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    fn head_in(set: &HashSet<String>, word: &str) -> bool {
        set.contains(word)
            || word.strip_suffix('s').is_some_and(|w| set.contains(w))
            || word.strip_suffix("es").is_some_and(|w| set.contains(w))
    }

    fn is_gerund(&self, word: &str) -> bool {
        word.len() >= 5
            && word.ends_with("ing")
            && word.chars().all(|c| c.is_ascii_alphabetic())
            && !self.non_gerunds.contains(word)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Cue {
    Plain,
    Clothing,
    Scene,
    With,
    Action,
}

#[derive(Debug)]
struct Span {
    cue: Cue,
    words: Vec<String>,
}

/// Deterministic grammar-driven prompt parser.
#[derive(Debug, Clone, Copy)]
pub struct PromptParser<'a> {
    lexicon: &'a Lexicon,
}

impl Default for PromptParser<'static> {
    fn default() -> Self {
        Self::new(Lexicon::builtin())
    }
}

impl<'a> PromptParser<'a> {
    pub fn new(lexicon: &'a Lexicon) -> Self {
        Self { lexicon }
    }

    pub fn parse(&self, raw: &str) -> Result<StructuredPrompt> {
        if raw.trim().is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let mut sp = StructuredPrompt::new(raw);
        let mut subject_open = true;
        for (bucket, phrase) in self.fragments(raw, &mut subject_open) {
            // A phrase already owned by another bucket stays with its first owner.
            let target = sp.find(&phrase).unwrap_or(bucket);
            sp.push(target, phrase);
        }
        Ok(sp)
    }

    fn fragments(&self, text: &str, subject_open: &mut bool) -> Vec<(Bucket, String)> {
        let mut out = Vec::new();
        for seg in segments(text) {
            for span in self.spans(&seg) {
                self.classify(&span, subject_open, &mut out);
            }
        }
        out
    }

    fn spans(&self, words: &[String]) -> Vec<Span> {
        let mut out = Vec::new();
        let mut current: Option<Span> = None;
        let mut last_cue = Cue::Plain;

        let close = |cur: &mut Option<Span>, out: &mut Vec<Span>, last: &mut Cue| {
            if let Some(span) = cur.take() {
                *last = span.cue;
                if !span.words.is_empty() {
                    out.push(span);
                }
            }
        };

        let mut i = 0;
        while i < words.len() {
            let word = &words[i];
            let lw = word.to_lowercase();
            let next = words.get(i + 1).map(|w| w.to_lowercase());
            let prev = i.checked_sub(1).map(|j| words[j].to_lowercase());
            let start = |cue: Cue| Some(Span { cue, words: Vec::new() });
            match lw.as_str() {
                "wearing" => {
                    close(&mut current, &mut out, &mut last_cue);
                    current = start(Cue::Clothing);
                }
                "dressed" if next.as_deref() == Some("in") => {
                    close(&mut current, &mut out, &mut last_cue);
                    current = start(Cue::Clothing);
                    i += 1;
                }
                "in" | "at" | "on" => {
                    close(&mut current, &mut out, &mut last_cue);
                    current = start(Cue::Scene);
                }
                "with" => {
                    close(&mut current, &mut out, &mut last_cue);
                    current = start(Cue::With);
                }
                "and" | "or" | "&" => {
                    close(&mut current, &mut out, &mut last_cue);
                    let inherited = match last_cue {
                        Cue::Clothing | Cue::Scene | Cue::With => last_cue,
                        Cue::Plain | Cue::Action => Cue::Plain,
                    };
                    current = start(inherited);
                }
                "to" if next
                    .as_deref()
                    .is_some_and(|n| !ARTICLES.contains(&n) && !CUE_WORDS.contains(&n) && n != "to" && n.chars().all(|c| c.is_alphabetic())) =>
                {
                    close(&mut current, &mut out, &mut last_cue);
                    current = Some(Span {
                        cue: Cue::Action,
                        words: vec![word.clone()],
                    });
                }
                _ if self.lexicon.is_gerund(&lw)
                    && !prev.as_deref().is_some_and(|p| ARTICLES.contains(&p))
                    && !current
                        .as_ref()
                        .is_some_and(|s| s.words.is_empty() && s.cue != Cue::Plain)
                    && !current.as_ref().is_some_and(|s| {
                        s.cue == Cue::Action && s.words.len() == 1 && s.words[0].eq_ignore_ascii_case("to")
                    }) =>
                {
                    close(&mut current, &mut out, &mut last_cue);
                    current = Some(Span {
                        cue: Cue::Action,
                        words: vec![word.clone()],
                    });
                }
                _ => current
                    .get_or_insert_with(|| Span {
                        cue: Cue::Plain,
                        words: Vec::new(),
                    })
                    .words
                    .push(word.clone()),
            }
            i += 1;
        }
        close(&mut current, &mut out, &mut last_cue);
        out
    }

    fn classify(&self, span: &Span, subject_open: &mut bool, out: &mut Vec<(Bucket, String)>) {
        if span.cue == Cue::Action {
            out.push((Bucket::Slot(SlotKind::Action), span.words.join(" ")));
            return;
        }
        let start = span
            .words
            .iter()
            .position(|w| !ARTICLES.contains(&w.to_lowercase().as_str()))
            .unwrap_or(span.words.len());
        self.classify_np(&span.words[start..], span.cue, subject_open, out);
    }

    fn classify_np(&self, words: &[String], cue: Cue, subject_open: &mut bool, out: &mut Vec<(Bucket, String)>) {
        let n = words.len();
        if n == 0 {
            return;
        }
        let lex = self.lexicon;
        let phrase = words.join(" ");
        let folded = fold(&phrase);
        let last = words[n - 1].to_lowercase();
        let head = words[..n - 1].join(" ");
        let slot = |k: SlotKind| Bucket::Slot(k);

        if lex.shot.contains(&folded) {
            return out.push((slot(SlotKind::Shot), phrase));
        }
        if n > 1 && last == "shot" {
            return out.push((slot(SlotKind::Shot), head));
        }
        if lex.style.contains(&folded) {
            return out.push((slot(SlotKind::Style), phrase));
        }
        if n > 1 && last == "style" {
            return out.push((slot(SlotKind::Style), head));
        }
        if lex.lighting.contains(&folded) || (n > 1 && matches!(last.as_str(), "lighting" | "light" | "lit")) {
            return out.push((slot(SlotKind::Lighting), phrase));
        }
        if n > 1 && lex.style.contains(&words[0].to_lowercase()) {
            out.push((slot(SlotKind::Style), words[0].clone()));
            let rest = &words[1..];
            let start = rest
                .iter()
                .position(|w| !ARTICLES.contains(&w.to_lowercase().as_str()))
                .unwrap_or(rest.len());
            return self.classify_np(&rest[start..], cue, subject_open, out);
        }
        if Lexicon::head_in(&lex.logo_heads, &last) {
            return out.push((slot(SlotKind::TextLogoEntity), phrase));
        }
        if n > 1 && words.iter().all(|w| w.chars().next().is_some_and(char::is_uppercase)) {
            return out.push((slot(SlotKind::NamedEntity), phrase));
        }
        if words.iter().all(|w| lex.colors.contains(&w.to_lowercase())) {
            return out.push((slot(SlotKind::Colors), phrase));
        }
        match cue {
            Cue::Clothing => return out.push((slot(SlotKind::Clothing), phrase)),
            Cue::Scene => return out.push((slot(SlotKind::Scene), phrase)),
            _ => {}
        }
        if Lexicon::head_in(&lex.clothing, &last) {
            return out.push((slot(SlotKind::Clothing), phrase));
        }
        if Lexicon::head_in(&lex.scene, &last) {
            return out.push((slot(SlotKind::Scene), phrase));
        }
        let wordy = words
            .iter()
            .all(|w| w.chars().all(|c| c.is_alphabetic() || c == '-' || c == '\''));
        if !wordy || lex.modifiers.contains(&last) {
            return out.push((Bucket::Residue, phrase));
        }
        if cue == Cue::Plain && *subject_open {
            *subject_open = false;
            return out.push((slot(SlotKind::Subject), phrase));
        }
        out.push((slot(SlotKind::Props), phrase));
    }

    /// Flattens a structured prompt: slots in template order joined by ", ",
    /// residue last. Each phrase is written bare when the parser
    /// would put it back in the same slot, otherwise with a cue word
    /// ("wearing", "in the", "with", "... style", "... shot").
    pub fn reconstruct(&self, sp: &StructuredPrompt) -> Result<String> {
        if sp.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let mut parts = Vec::new();
        let mut subject_open = true;
        for kind in SlotKind::TEMPLATE_ORDER {
            for phrase in sp.phrases(kind) {
                parts.push(self.surface_form(Bucket::Slot(kind), phrase, &mut subject_open));
            }
        }
        for phrase in &sp.residue {
            parts.push(self.surface_form(Bucket::Residue, phrase, &mut subject_open));
        }
        Ok(parts.join(", "))
    }

    fn surface_form(&self, bucket: Bucket, phrase: &str, subject_open: &mut bool) -> String {
        let cued = match bucket {
            Bucket::Slot(SlotKind::Clothing) => Some(format!("wearing {phrase}")),
            Bucket::Slot(SlotKind::Scene) => Some(format!("in the {phrase}")),
            Bucket::Slot(SlotKind::Props) => Some(format!("with {phrase}")),
            Bucket::Slot(SlotKind::Style) => Some(format!("{phrase} style")),
            Bucket::Slot(SlotKind::Shot) => Some(format!("{phrase} shot")),
            _ => None,
        };
        let expected = [(bucket, phrase.to_string())];
        let bare = std::iter::once(phrase.to_string()).chain(cued.clone());
        let forms = bare.clone().chain(bare.map(|f| format!("the {f}")));
        for form in forms {
            let mut open = *subject_open;
            if self.fragments(&form, &mut open) == expected {
                *subject_open = open;
                return form;
            }
        }
        let form = cued.unwrap_or_else(|| phrase.to_string());
        self.fragments(&form, subject_open);
        form
    }
}

pub fn parse_prompt(raw: &str) -> Result<StructuredPrompt> {
    PromptParser::default().parse(raw)
}

pub fn reconstruct_prompt(sp: &StructuredPrompt) -> Result<String> {
    PromptParser::default().reconstruct(sp)
}

/// Request sent to an external slot parser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlotRequest {
    pub prompt: String,
    pub schema: Vec<String>,
}

/// External slot parser. The response is an object keyed by slot kind names
/// with string-list values.
pub trait SlotProvider {
    fn request_slots(&self, request: &SlotRequest) -> std::result::Result<serde_json::Value, ProviderError>;
}

/// Parses through `provider`, falling back to the rule-based parser (with a
/// warning recorded) whenever the provider fails or returns something that
/// does not satisfy the structured-prompt invariants.
pub fn parse_with_provider(raw: &str, provider: &dyn SlotProvider) -> Result<StructuredPrompt> {
    parse_with_provider_using(&PromptParser::default(), raw, provider)
}

pub fn parse_with_provider_using(
    parser: &PromptParser<'_>,
    raw: &str,
    provider: &dyn SlotProvider,
) -> Result<StructuredPrompt> {
    if raw.trim().is_empty() {
        return Err(Error::EmptyPrompt);
    }
    let request = SlotRequest {
        prompt: raw.to_string(),
        schema: SlotKind::schema(),
    };
    let outcome = provider
        .request_slots(&request)
        .map_err(|e| format!("slot provider failed: {e}"))
        .and_then(|resp| from_provider_response(raw, &resp));
    match outcome {
        Ok(sp) => Ok(sp),
        Err(warning) => {
            log::warn!("{warning}; using rule-based parser");
            let mut sp = parser.parse(raw)?;
            sp.warnings.push(warning);
            Ok(sp)
        }
    }
}

fn from_provider_response(raw: &str, resp: &serde_json::Value) -> std::result::Result<StructuredPrompt, String> {
    let obj = resp
        .as_object()
        .ok_or_else(|| "slot provider response is not an object".to_string())?;
    let mut sp = StructuredPrompt::new(raw);
    for kind_name in obj.keys() {
        if SlotKind::from_name(kind_name).is_none() {
            return Err(format!("slot provider returned unknown slot kind '{kind_name}'"));
        }
    }
    // Iterate in fixed kind order so the result does not depend on key order.
    for kind in SlotKind::ALL {
        let Some(value) = obj.get(kind.name()) else { continue };
        let list = value
            .as_array()
            .ok_or_else(|| format!("slot '{kind}' is not a list"))?;
        for item in list {
            let phrase = item
                .as_str()
                .ok_or_else(|| format!("slot '{kind}' contains a non-string value"))?
                .trim();
            if phrase.is_empty() {
                return Err(format!("slot '{kind}' contains an empty phrase"));
            }
            sp.push(Bucket::Slot(kind), phrase);
        }
    }
    sp.validate().map_err(|e| e.to_string())?;

    // Phrases must be grounded in the prompt; uncovered content words become residue.
    let mut available: HashMap<String, usize> = HashMap::new();
    for w in content_words(raw) {
        *available.entry(w).or_default() += 1;
    }
    for (_, phrases) in sp.slots() {
        for phrase in phrases {
            for w in content_words(phrase) {
                match available.get_mut(&w) {
                    Some(n) if *n > 0 => *n -= 1,
                    _ => return Err(format!("phrase '{phrase}' uses '{w}', which is not in the prompt")),
                }
            }
        }
    }
    for seg in segments(raw) {
        for word in seg {
            let lw = word.to_lowercase();
            if is_stopword(&lw) {
                continue;
            }
            if let Some(n) = available.get_mut(&lw) {
                if *n > 0 {
                    *n -= 1;
                    sp.push(Bucket::Residue, word);
                }
            }
        }
    }
    Ok(sp)
}
