//! Tag maps and their rewriting into descriptive captions.
//!
//! Captions come in two dialects. Dialect A is plain English-like words;
//! dialect B applies a fixed bijective word substitution to dialect A, so the
//! two vocabularies share only punctuation.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};

use super::scene::{FurnitureKind, PaletteColor, Position, RoomType, SceneSpec, Style, MAX_FURNITURE};
use crate::{Error, Result};

pub const VOCAB_VERSION: &str = "template-v1";
pub const PUNCTUATION: [&str; 2] = [",", "."];

/// Ordered tag key -> value map (the "alt text").
pub type Tags = BTreeMap<String, String>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Dialect {
    A,
    B,
}

impl Dialect {
    pub const ALL: [Dialect; 2] = [Dialect::A, Dialect::B];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionSource {
    Template,
    External,
    /// Raw tag values without recaptioning (the captioner ablation).
    RawTags,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaptionMode {
    Template,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub tags: Tags,
    pub caption: Vec<String>,
    pub dialect: Dialect,
    pub source: CaptionSource,
}

impl CaptionRecord {
    pub fn text(&self) -> String {
        self.caption.join(" ")
    }
}

const TEMPLATE_WORDS: [&str; 9] = ["a", "with", "walls", "and", "floor", "featuring", "on", "the", "room"];

/// Every tag key the corpus may emit.
pub fn tag_keys() -> Vec<String> {
    let mut keys: Vec<String> = ["room", "style", "palette", "floor"].iter().map(|s| s.to_string()).collect();
    keys.extend((1..=MAX_FURNITURE).map(|i| format!("item{i}")));
    keys
}

fn is_known_key(key: &str) -> bool {
    matches!(key, "room" | "style" | "palette" | "floor")
        || key
            .strip_prefix("item")
            .and_then(|n| n.parse::<usize>().ok())
            .is_some_and(|n| (1..=MAX_FURNITURE).contains(&n))
}

/// Dialect-A words, in a fixed order that defines the dialect-B mapping.
pub fn dialect_a_words() -> &'static [String] {
    static WORDS: OnceLock<Vec<String>> = OnceLock::new();
    WORDS.get_or_init(|| {
        let mut words: Vec<String> = TEMPLATE_WORDS.iter().map(|s| s.to_string()).collect();
        words.extend(RoomType::ALL.iter().map(|r| r.word().to_string()));
        words.extend(Style::ALL.iter().map(|s| s.word().to_string()));
        words.extend(PaletteColor::ALL.iter().map(|c| c.word().to_string()));
        words.extend(FurnitureKind::ALL.iter().map(|k| k.word().to_string()));
        words.extend(Position::ALL.iter().map(|p| p.word().to_string()));
        words
    })
}

fn syllable(i: usize) -> String {
    const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let c = CONSONANTS[i % CONSONANTS.len()] as char;
    let v = VOWELS[(i / CONSONANTS.len()) % VOWELS.len()] as char;
    format!("{c}{v}")
}

struct DialectMap {
    a_to_b: HashMap<String, String>,
    b_to_a: HashMap<String, String>,
}

fn dialect_map() -> &'static DialectMap {
    static MAP: OnceLock<DialectMap> = OnceLock::new();
    MAP.get_or_init(|| {
        let mut a_to_b = HashMap::new();
        let mut b_to_a = HashMap::new();
        for (i, word) in dialect_a_words().iter().enumerate() {
            // First syllable is unique per index (70 > vocabulary size); the rest is decoration.
            let b = format!("{}{}{}", syllable(i), syllable((i * 31 + 11) % 70), syllable((i * 17 + 5) % 70));
            a_to_b.insert(word.clone(), b.clone());
            b_to_a.insert(b, word.clone());
        }
        DialectMap { a_to_b, b_to_a }
    })
}

pub fn dialect_b_words() -> Vec<String> {
    dialect_a_words().iter().map(|w| dialect_map().a_to_b[w].clone()).collect()
}

/// Translate a single dialect-A token into `dialect`. Punctuation and words
/// outside the mapping pass through unchanged.
pub fn translate(token: &str, dialect: Dialect) -> String {
    match dialect {
        Dialect::A => token.to_string(),
        Dialect::B => dialect_map().a_to_b.get(token).cloned().unwrap_or_else(|| token.to_string()),
    }
}

pub fn to_dialect_a(token: &str) -> String {
    dialect_map().b_to_a.get(token).cloned().unwrap_or_else(|| token.to_string())
}

/// Tag map of a scene: room, style, wall palette, floor and one `itemN` per
/// furniture piece (`"<color> <kind> <position>"`).
pub fn scene_tags(spec: &SceneSpec) -> Tags {
    let mut tags = Tags::new();
    tags.insert("room".into(), spec.room_type.word().into());
    tags.insert("style".into(), spec.style.word().into());
    tags.insert("palette".into(), spec.wall.word().into());
    tags.insert("floor".into(), spec.floor.word().into());
    for (i, f) in spec.furniture.iter().enumerate() {
        tags.insert(
            format!("item{}", i + 1),
            format!("{} {} {}", f.color_name.word(), f.kind.word(), f.position().word()),
        );
    }
    tags
}

struct ParsedItem {
    color: &'static str,
    kind: &'static str,
    position: &'static str,
}

fn malformed(key: &str, value: &str) -> Error {
    Error::MalformedTag {
        key: key.into(),
        value: value.into(),
    }
}

fn parse_item(key: &str, value: &str) -> Result<ParsedItem> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    let [color, kind, position] = parts.as_slice() else {
        return Err(malformed(key, value));
    };
    Ok(ParsedItem {
        color: PaletteColor::from_word(color).ok_or_else(|| malformed(key, value))?.word(),
        kind: FurnitureKind::from_word(kind).ok_or_else(|| malformed(key, value))?.word(),
        position: Position::from_word(position).ok_or_else(|| malformed(key, value))?.word(),
    })
}

fn validate_tags(tags: &Tags) -> Result<()> {
    if tags.is_empty() {
        return Err(Error::EmptyTags);
    }
    for (key, value) in tags {
        if !is_known_key(key) {
            return Err(Error::UnknownTag(key.clone()));
        }
        let ok = match key.as_str() {
            "room" => RoomType::from_word(value).is_some(),
            "style" => Style::from_word(value).is_some(),
            "palette" | "floor" => PaletteColor::from_word(value).is_some(),
            _ => parse_item(key, value).is_ok(),
        };
        if !ok {
            return Err(malformed(key, value));
        }
    }
    Ok(())
}

fn items(tags: &Tags) -> Vec<(String, ParsedItem)> {
    let mut out: Vec<(usize, String, ParsedItem)> = tags
        .iter()
        .filter_map(|(k, v)| {
            let n = k.strip_prefix("item")?.parse::<usize>().ok()?;
            Some((n, k.clone(), parse_item(k, v).ok()?))
        })
        .collect();
    out.sort_by_key(|(n, _, _)| *n);
    out.into_iter().map(|(_, k, p)| (k, p)).collect()
}

/// Template v1, dialect A:
/// `a <style> <room> with <palette> walls and a <floor> floor , featuring a <color> <kind> on the <pos> , a ... .`
fn template_tokens(tags: &Tags) -> Vec<String> {
    let mut out: Vec<&str> = vec!["a"];
    if let Some(style) = tags.get("style") {
        out.push(style);
    }
    out.push(tags.get("room").map(String::as_str).unwrap_or("room"));
    let palette = tags.get("palette");
    if let Some(p) = palette {
        out.extend(["with", p, "walls"]);
    }
    if let Some(f) = tags.get("floor") {
        out.push(if palette.is_some() { "and" } else { "with" });
        out.extend(["a", f, "floor"]);
    }
    let parsed = items(tags);
    for (i, (_, item)) in parsed.iter().enumerate() {
        out.push(",");
        if i == 0 {
            out.push("featuring");
        }
        out.extend(["a", item.color, item.kind, "on", "the", item.position]);
    }
    out.push(".");
    out.into_iter().map(String::from).collect()
}

/// Tag values in slot order, comma separated: the un-rewritten alt text.
fn raw_tag_tokens(tags: &Tags) -> Vec<String> {
    let mut groups: Vec<Vec<String>> = Vec::new();
    for key in ["room", "style", "palette", "floor"] {
        if let Some(v) = tags.get(key) {
            groups.push(vec![v.clone()]);
        }
    }
    for (_, item) in items(tags) {
        groups.push(vec![item.color.into(), item.kind.into(), item.position.into()]);
    }
    let mut out = Vec::new();
    for (i, g) in groups.into_iter().enumerate() {
        if i > 0 {
            out.push(",".to_string());
        }
        out.extend(g);
    }
    out.push(".".into());
    out
}

/// External caption rewriter (an LLM endpoint in practice).
pub trait CaptionRewriter: Send + Sync {
    fn rewrite(&self, tags: &Tags, system_prompt: &str) -> std::result::Result<String, String>;
}

pub const DEFAULT_SYSTEM_PROMPT: &str = "You rewrite interior-design tags into one descriptive caption. \
Mention the room, style, wall and floor colors, and every furniture item with its color and position. \
Use only lowercase words from the tags plus: a with walls and floor featuring on the room. Reply with the caption only.";

#[derive(Clone)]
pub struct Recaptioner {
    client: Option<Arc<dyn CaptionRewriter>>,
    pub system_prompt: String,
    /// Additional attempts after the first failed call.
    pub retries: usize,
}

impl Default for Recaptioner {
    fn default() -> Self {
        Self {
            client: None,
            system_prompt: DEFAULT_SYSTEM_PROMPT.into(),
            retries: 2,
        }
    }
}

impl std::fmt::Debug for Recaptioner {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Recaptioner")
            .field("client", &self.client.is_some())
            .field("retries", &self.retries)
            .finish()
    }
}

impl Recaptioner {
    pub fn with_client(client: Arc<dyn CaptionRewriter>) -> Self {
        Self {
            client: Some(client),
            ..Self::default()
        }
    }

    pub fn has_client(&self) -> bool {
        self.client.is_some()
    }

    pub fn recaption(&self, tags: &Tags, dialect: Dialect, mode: CaptionMode) -> Result<CaptionRecord> {
        validate_tags(tags)?;
        let (tokens, source) = match mode {
            CaptionMode::Template => (template_tokens(tags), CaptionSource::Template),
            CaptionMode::External => {
                let client = self.client.as_ref().ok_or(Error::ClientUnavailable)?;
                (self.call_external(client.as_ref(), tags)?, CaptionSource::External)
            }
        };
        Ok(CaptionRecord {
            tags: tags.clone(),
            caption: tokens.iter().map(|t| translate(t, dialect)).collect(),
            dialect,
            source,
        })
    }

    fn call_external(&self, client: &dyn CaptionRewriter, tags: &Tags) -> Result<Vec<String>> {
        let attempts = self.retries + 1;
        let mut last = String::new();
        for _ in 0..attempts {
            match client.rewrite(tags, &self.system_prompt) {
                Ok(text) => {
                    let tokens = tokenize(&text);
                    if !tokens.is_empty() {
                        return Ok(tokens);
                    }
                    last = "empty caption".into();
                }
                Err(e) => last = e,
            }
        }
        Err(Error::ClientFailed {
            attempts,
            message: last,
        })
    }
}

/// Template-mode recaption without an external client.
pub fn recaption(tags: &Tags, dialect: Dialect, mode: CaptionMode) -> Result<CaptionRecord> {
    Recaptioner::default().recaption(tags, dialect, mode)
}

/// Skip recaptioning: caption is the comma-separated raw tag values.
pub fn raw_caption(tags: &Tags, dialect: Dialect) -> Result<CaptionRecord> {
    validate_tags(tags)?;
    Ok(CaptionRecord {
        tags: tags.clone(),
        caption: raw_tag_tokens(tags).iter().map(|t| translate(t, dialect)).collect(),
        dialect,
        source: CaptionSource::RawTags,
    })
}

/// Lowercase, split on whitespace and split trailing punctuation into tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let lower = word.to_lowercase();
        let trimmed = lower.trim_end_matches(&[',', '.', ';', '!', '?'][..]);
        let tail = &lower[trimmed.len()..];
        if !trimmed.is_empty() {
            out.push(trimmed.to_string());
        }
        for c in tail.chars() {
            let p = match c {
                ',' | ';' => ",",
                _ => ".",
            };
            out.push(p.to_string());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn bedroom_tags() -> Tags {
        let mut t = Tags::new();
        t.insert("room".into(), "bedroom".into());
        t.insert("style".into(), "modern".into());
        t.insert("palette".into(), "beige".into());
        t
    }

    #[test]
    fn golden_template_sentence() {
        let rec = recaption(&bedroom_tags(), Dialect::A, CaptionMode::Template).unwrap();
        assert_eq!(rec.text(), "a modern bedroom with beige walls .");
        assert_eq!(rec.source, CaptionSource::Template);
    }

    #[test]
    fn dialect_b_is_a_vocabulary_swap() {
        let a = recaption(&bedroom_tags(), Dialect::A, CaptionMode::Template).unwrap();
        let b = recaption(&bedroom_tags(), Dialect::B, CaptionMode::Template).unwrap();
        assert_eq!(a.caption.len(), b.caption.len());
        let b_words = dialect_b_words();
        for (ta, tb) in a.caption.iter().zip(&b.caption) {
            if PUNCTUATION.contains(&ta.as_str()) {
                assert_eq!(ta, tb);
            } else {
                assert!(b_words.contains(tb));
                assert_eq!(&to_dialect_a(tb), ta);
            }
        }
    }

    #[test]
    fn vocabularies_are_disjoint_and_bijective() {
        let a = dialect_a_words();
        let b = dialect_b_words();
        let a_set: std::collections::HashSet<_> = a.iter().collect();
        let b_set: std::collections::HashSet<_> = b.iter().collect();
        assert_eq!(a_set.len(), a.len());
        assert_eq!(b_set.len(), b.len());
        assert!(a_set.is_disjoint(&b_set));
    }

    #[test]
    fn empty_and_unknown_tags_rejected() {
        assert!(matches!(recaption(&Tags::new(), Dialect::A, CaptionMode::Template), Err(Error::EmptyTags)));
        let mut t = bedroom_tags();
        t.insert("ceiling".into(), "high".into());
        assert!(matches!(recaption(&t, Dialect::A, CaptionMode::Template), Err(Error::UnknownTag(_))));
        let mut t = bedroom_tags();
        t.insert("item1".into(), "purple bed left".into());
        assert!(matches!(recaption(&t, Dialect::A, CaptionMode::Template), Err(Error::MalformedTag { .. })));
    }

    #[test]
    fn external_without_client_is_unavailable() {
        assert!(matches!(
            recaption(&bedroom_tags(), Dialect::A, CaptionMode::External),
            Err(Error::ClientUnavailable)
        ));
    }

    struct Flaky {
        calls: AtomicUsize,
        fail_first: usize,
    }

    impl CaptionRewriter for Flaky {
        fn rewrite(&self, tags: &Tags, _system_prompt: &str) -> std::result::Result<String, String> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                Err("timeout".into())
            } else {
                Ok(format!("A cozy {} with {} walls.", tags["room"], tags["palette"]))
            }
        }
    }

    #[test]
    fn external_mode_retries_and_records_source() {
        let client = Arc::new(Flaky {
            calls: AtomicUsize::new(0),
            fail_first: 2,
        });
        let rec = Recaptioner::with_client(client.clone());
        let out = rec.recaption(&bedroom_tags(), Dialect::A, CaptionMode::External).unwrap();
        assert_eq!(out.source, CaptionSource::External);
        assert_eq!(out.text(), "a cozy bedroom with beige walls .");
        assert_eq!(client.calls.load(Ordering::SeqCst), 3);

        let always = Arc::new(Flaky {
            calls: AtomicUsize::new(0),
            fail_first: usize::MAX,
        });
        let rec = Recaptioner::with_client(always);
        assert!(matches!(
            rec.recaption(&bedroom_tags(), Dialect::A, CaptionMode::External),
            Err(Error::ClientFailed { attempts: 3, .. })
        ));
    }

    #[test]
    fn scene_captions_list_every_item() {
        let spec = SceneSpec::generate(5, super::super::scene::SceneDomain::Design);
        let tags = scene_tags(&spec);
        let rec = recaption(&tags, Dialect::A, CaptionMode::Template).unwrap();
        let n_featuring = rec.caption.iter().filter(|t| *t == "on").count();
        assert_eq!(n_featuring, spec.furniture.len());
        let raw = raw_caption(&tags, Dialect::A).unwrap();
        assert_eq!(raw.caption[0], spec.room_type.word());
        assert_eq!(raw.source, CaptionSource::RawTags);
    }

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(tokenize("A Red sofa, left."), vec!["a", "red", "sofa", ",", "left", "."]);
    }
}
