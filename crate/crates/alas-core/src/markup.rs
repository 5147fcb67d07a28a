//! Tolerant markup reader: a structural fix-up pass that balances tags,
//! escapes stray specials, unwraps whole-document code fences, and drops
//! prose outside the root element, followed by a strict parse into a small
//! element tree.
//!
//! Repair is idempotent and leaves already well-formed input byte-identical.
//! A raw `>` in text is legal markup, so it is never escaped; escaping it
//! would perturb valid documents.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use std::sync::OnceLock;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MarkupError {
    #[error("unrepairable markup: {0}")]
    StructuralFailure(String),
    #[error("markup not well-formed: {0}")]
    NotWellFormed(String),
}

#[derive(Debug, Clone, PartialEq)]
enum Tok<'a> {
    Open { name: String, raw: &'a str },
    SelfClose { raw: &'a str },
    Close { name: String, raw: &'a str },
    Text { raw: &'a str },
    Comment { raw: &'a str },
    CData { raw: &'a str },
    Pi { raw: &'a str },
    Directive,
    /// A `<` that cannot begin any markup construct.
    BadLt,
}

fn is_name_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_name_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.')
}

fn attr_re() -> &'static regex::Regex {
    static RE: OnceLock<regex::Regex> = OnceLock::new();
    RE.get_or_init(|| {
        regex::Regex::new(
            r#"^(?:\s+[A-Za-z_][A-Za-z0-9_.:\-]*\s*=\s*(?:"[^"<>]*"|'[^'<>]*'))*\s*$"#,
        )
        .expect("attribute grammar")
    })
}

/// Splits `raw` into tokens without ever failing; malformed constructs
/// degrade to `BadLt` or get swallowed (unterminated comments and the like).
fn tokenize(raw: &str) -> Vec<Tok<'_>> {
    let bytes = raw.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    let mut text_start = 0;

    macro_rules! flush_text {
        ($end:expr) => {
            if text_start < $end {
                toks.push(Tok::Text { raw: &raw[text_start..$end] });
            }
        };
    }

    while i < bytes.len() {
        if bytes[i] != b'<' {
            i += 1;
            continue;
        }
        flush_text!(i);
        let rest = &raw[i..];
        if let Some(stripped) = rest.strip_prefix("<!--") {
            match stripped.find("-->") {
                Some(j) => {
                    let end = i + 4 + j + 3;
                    toks.push(Tok::Comment { raw: &raw[i..end] });
                    i = end;
                }
                None => i = bytes.len(),
            }
            text_start = i;
            continue;
        }
        if let Some(stripped) = rest.strip_prefix("<![CDATA[") {
            match stripped.find("]]>") {
                Some(j) => {
                    let end = i + 9 + j + 3;
                    toks.push(Tok::CData { raw: &raw[i..end] });
                    i = end;
                }
                None => i = bytes.len(),
            }
            text_start = i;
            continue;
        }
        if rest.starts_with("<?") {
            match rest.find("?>") {
                Some(j) => {
                    let end = i + j + 2;
                    toks.push(Tok::Pi { raw: &raw[i..end] });
                    i = end;
                }
                None => i = bytes.len(),
            }
            text_start = i;
            continue;
        }
        if rest.starts_with("<!") {
            match rest.find('>') {
                Some(j) => {
                    toks.push(Tok::Directive);
                    i += j + 1;
                }
                None => i = bytes.len(),
            }
            text_start = i;
            continue;
        }
        if let Some(stripped) = rest.strip_prefix("</") {
            if let Some(parsed) = parse_close(stripped) {
                let (name, len) = parsed;
                toks.push(Tok::Close { name, raw: &raw[i..i + 2 + len] });
                i += 2 + len;
                text_start = i;
                continue;
            }
            toks.push(Tok::BadLt);
            i += 1;
            text_start = i;
            continue;
        }
        if rest[1..].starts_with(is_name_start) {
            if let Some((tok, len)) = parse_open(&raw[i..]) {
                toks.push(tok);
                i += len;
                text_start = i;
                continue;
            }
        }
        toks.push(Tok::BadLt);
        i += 1;
        text_start = i;
    }
    flush_text!(bytes.len());
    toks
}

/// Parses the body after `</`; returns (name, consumed length including `>`).
fn parse_close(body: &str) -> Option<(String, usize)> {
    let mut chars = body.char_indices().peekable();
    let (_, first) = chars.next()?;
    if !is_name_start(first) {
        return None;
    }
    let mut name_end = first.len_utf8();
    for (idx, c) in chars.by_ref() {
        if is_name_char(c) {
            name_end = idx + c.len_utf8();
        } else {
            break;
        }
    }
    let name = body[..name_end].to_string();
    let tail = &body[name_end..];
    let trimmed = tail.trim_start();
    if let Some(stripped) = trimmed.strip_prefix('>') {
        let consumed = name_end + (tail.len() - trimmed.len()) + 1;
        let _ = stripped;
        Some((name, consumed))
    } else {
        None
    }
}

/// Parses an opening tag starting at `<`; returns the token and consumed
/// length, or None when the construct cannot be a tag (which makes the `<`
/// literal text).
fn parse_open(s: &str) -> Option<(Tok<'_>, usize)> {
    let gt = s.find('>')?;
    if s[1..gt].contains('<') {
        return None;
    }
    let inner = &s[1..gt];
    let (inner, self_close) = match inner.strip_suffix('/') {
        Some(i) => (i, true),
        None => (inner, false),
    };
    let name_end = inner
        .char_indices()
        .take_while(|(idx, c)| if *idx == 0 { is_name_start(*c) } else { is_name_char(*c) })
        .last()
        .map(|(idx, c)| idx + c.len_utf8())?;
    let name = &inner[..name_end];
    let attrs = &inner[name_end..];
    if !attr_re().is_match(attrs) {
        return None;
    }
    let raw = &s[..gt + 1];
    let tok = if self_close {
        Tok::SelfClose { raw }
    } else {
        Tok::Open { name: name.to_string(), raw }
    };
    Some((tok, gt + 1))
}

/// Recognizes `&amp; &lt; &gt; &quot; &apos;` and numeric character
/// references; returns the byte length of the entity at `s[0] == '&'`.
fn entity_len(s: &str) -> Option<usize> {
    let semi = s[..s.len().min(10)].find(';')?;
    let body = &s[1..semi];
    let known = matches!(body, "amp" | "lt" | "gt" | "quot" | "apos");
    let decimal = body.strip_prefix('#').is_some_and(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()));
    let hexa = body
        .strip_prefix("#x")
        .or_else(|| body.strip_prefix("#X"))
        .is_some_and(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_hexdigit()));
    (known || decimal || hexa).then_some(semi + 1)
}

fn escape_text_into(out: &mut String, text: &str) {
    let mut i = 0;
    while i < text.len() {
        let rest = &text[i..];
        if rest.starts_with('&') {
            match entity_len(rest) {
                Some(n) => {
                    out.push_str(&rest[..n]);
                    i += n;
                }
                None => {
                    out.push_str("&amp;");
                    i += 1;
                }
            }
        } else {
            let next = rest[1..].find('&').map(|j| i + 1 + j).unwrap_or(text.len());
            out.push_str(&text[i..next]);
            i = next;
        }
    }
}

/// Strips a whole-document code fence: a first line starting with ``` and,
/// independently, a last line starting with ```.
fn unwrap_fences(raw: &str) -> &str {
    let mut s = raw;
    let head = s.trim_start();
    if head.starts_with("```") {
        let skipped = match head.find('\n') {
            Some(n) => &head[n + 1..],
            None => "",
        };
        s = skipped;
    }
    let tail = s.trim_end();
    if tail.ends_with("```") {
        let line_start = tail.rfind('\n').map(|n| n + 1).unwrap_or(0);
        if tail[line_start..].starts_with("```") {
            s = &tail[..line_start];
        }
    }
    s
}

/// Structural fix-up. Balances tags (closing unclosed elements in LIFO
/// order, both at an enclosing close and at end of input), escapes raw `&`
/// and `<` in text, keeps comments, PIs and CDATA verbatim, drops non-space
/// prose outside the root element, and unwraps whole-document code fences.
///
/// Fails when no element survives, when a closing tag never had an opener,
/// or when more than one root element remains.
pub fn repair_markup(raw: &str) -> Result<String, MarkupError> {
    let body = unwrap_fences(raw);
    let toks = tokenize(body);
    let mut out = String::with_capacity(body.len() + 16);
    let mut stack: Vec<String> = Vec::new();
    let mut roots = 0usize;

    for tok in &toks {
        match tok {
            Tok::Open { name, raw } => {
                if stack.is_empty() {
                    roots += 1;
                    if roots > 1 {
                        return Err(MarkupError::StructuralFailure(
                            "multiple root elements".into(),
                        ));
                    }
                }
                stack.push(name.clone());
                out.push_str(raw);
            }
            Tok::SelfClose { raw } => {
                if stack.is_empty() {
                    roots += 1;
                    if roots > 1 {
                        return Err(MarkupError::StructuralFailure(
                            "multiple root elements".into(),
                        ));
                    }
                }
                out.push_str(raw);
            }
            Tok::Close { name, raw } => {
                match stack.iter().rposition(|n| n == name) {
                    Some(pos) => {
                        while stack.len() > pos + 1 {
                            let unclosed = stack.pop().expect("stack non-empty");
                            out.push_str(&format!("</{unclosed}>"));
                        }
                        stack.pop();
                        out.push_str(raw);
                    }
                    None => {
                        return Err(MarkupError::StructuralFailure(format!(
                            "closing tag </{name}> without a matching opener"
                        )));
                    }
                }
            }
            Tok::Text { raw } => {
                if stack.is_empty() {
                    if raw.chars().all(char::is_whitespace) {
                        out.push_str(raw);
                    }
                } else {
                    escape_text_into(&mut out, raw);
                }
            }
            Tok::BadLt => {
                if !stack.is_empty() {
                    out.push_str("&lt;");
                }
            }
            Tok::Comment { raw } | Tok::CData { raw } | Tok::Pi { raw } => {
                out.push_str(raw);
            }
            Tok::Directive => {}
        }
    }
    while let Some(unclosed) = stack.pop() {
        out.push_str(&format!("</{unclosed}>"));
    }
    if roots == 0 {
        return Err(MarkupError::StructuralFailure("no element content".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Element(Element),
    Text(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Element {
    pub name: String,
    pub children: Vec<Node>,
}

impl Element {
    /// Depth-first search for the first element with this name, including
    /// the receiver itself.
    pub fn find(&self, name: &str) -> Option<&Element> {
        if self.name == name {
            return Some(self);
        }
        self.children_elements().find_map(|c| c.find(name))
    }

    pub fn find_all<'a>(&'a self, name: &str, out: &mut Vec<&'a Element>) {
        if self.name == name {
            out.push(self);
        }
        for c in self.children_elements() {
            c.find_all(name, out);
        }
    }

    pub fn children_elements(&self) -> impl Iterator<Item = &Element> {
        self.children.iter().filter_map(|n| match n {
            Node::Element(e) => Some(e),
            Node::Text(_) => None,
        })
    }

    /// Concatenated direct text content, trimmed.
    pub fn text(&self) -> String {
        let mut s = String::new();
        for n in &self.children {
            if let Node::Text(t) = n {
                s.push_str(t);
            }
        }
        s.trim().to_string()
    }

    /// Trimmed text of the first direct child element with this name.
    pub fn child_text(&self, name: &str) -> Option<String> {
        self.children_elements().find(|c| c.name == name).map(Element::text)
    }
}

fn decode_entities(text: &str) -> Result<String, MarkupError> {
    let mut out = String::with_capacity(text.len());
    let mut i = 0;
    while i < text.len() {
        let rest = &text[i..];
        if let Some(stripped) = rest.strip_prefix('&') {
            let n = entity_len(rest).ok_or_else(|| {
                MarkupError::NotWellFormed(format!("invalid entity at {:?}", &rest[..rest.len().min(8)]))
            })?;
            let body = &stripped[..n - 2];
            let decoded = match body {
                "amp" => '&',
                "lt" => '<',
                "gt" => '>',
                "quot" => '"',
                "apos" => '\'',
                _ => {
                    let digits = &body[1..];
                    let code = if let Some(hex) = digits.strip_prefix(['x', 'X']) {
                        u32::from_str_radix(hex, 16)
                    } else {
                        digits.parse::<u32>()
                    }
                    .map_err(|_| MarkupError::NotWellFormed("character reference out of range".into()))?;
                    char::from_u32(code).ok_or_else(|| {
                        MarkupError::NotWellFormed("character reference out of range".into())
                    })?
                }
            };
            out.push(decoded);
            i += n;
        } else {
            let c = rest.chars().next().expect("non-empty");
            out.push(c);
            i += c.len_utf8();
        }
    }
    Ok(out)
}

/// Strict parse into an element tree. Any malformation is an error; run
/// [`repair_markup`] first for provider output.
pub fn parse_tree(text: &str) -> Result<Element, MarkupError> {
    let toks = tokenize(text);
    let mut root: Option<Element> = None;
    let mut stack: Vec<Element> = Vec::new();

    for tok in toks {
        match tok {
            Tok::Open { name, raw } => {
                if root.is_some() && stack.is_empty() {
                    return Err(MarkupError::NotWellFormed("multiple root elements".into()));
                }
                let _ = raw;
                stack.push(Element { name, children: Vec::new() });
            }
            Tok::SelfClose { raw } => {
                let inner = raw[1..raw.len() - 2].trim_end();
                let name_end = inner
                    .char_indices()
                    .take_while(|(idx, c)| if *idx == 0 { is_name_start(*c) } else { is_name_char(*c) })
                    .last()
                    .map(|(idx, c)| idx + c.len_utf8())
                    .ok_or_else(|| MarkupError::NotWellFormed("bad self-closing tag".into()))?;
                let el = Element { name: inner[..name_end].to_string(), children: Vec::new() };
                match stack.last_mut() {
                    Some(parent) => parent.children.push(Node::Element(el)),
                    None => {
                        if root.is_some() {
                            return Err(MarkupError::NotWellFormed("multiple root elements".into()));
                        }
                        root = Some(el);
                    }
                }
            }
            Tok::Close { name, raw: _ } => {
                let el = stack
                    .pop()
                    .ok_or_else(|| MarkupError::NotWellFormed(format!("stray closing tag </{name}>")))?;
                if el.name != name {
                    return Err(MarkupError::NotWellFormed(format!(
                        "mismatched closing tag </{}> for <{}>",
                        name, el.name
                    )));
                }
                match stack.last_mut() {
                    Some(parent) => parent.children.push(Node::Element(el)),
                    None => root = Some(el),
                }
            }
            Tok::Text { raw } => {
                if stack.is_empty() {
                    if !raw.chars().all(char::is_whitespace) {
                        return Err(MarkupError::NotWellFormed("text outside the root element".into()));
                    }
                } else {
                    let decoded = decode_entities(raw)?;
                    stack.last_mut().expect("inside element").children.push(Node::Text(decoded));
                }
            }
            Tok::CData { raw } => {
                let inner = &raw[9..raw.len() - 3];
                match stack.last_mut() {
                    Some(parent) => parent.children.push(Node::Text(inner.to_string())),
                    None => return Err(MarkupError::NotWellFormed("CDATA outside the root element".into())),
                }
            }
            Tok::Comment { .. } | Tok::Pi { .. } => {}
            Tok::Directive => {
                return Err(MarkupError::NotWellFormed("unsupported <!...> directive".into()));
            }
            Tok::BadLt => {
                return Err(MarkupError::NotWellFormed("unescaped '<'".into()));
            }
        }
    }
    if let Some(el) = stack.pop() {
        return Err(MarkupError::NotWellFormed(format!("unclosed element <{}>", el.name)));
    }
    root.ok_or_else(|| MarkupError::NotWellFormed("no element content".into()))
}

/// Well-formedness check used after repair and in tests.
pub fn strict_check(text: &str) -> Result<(), MarkupError> {
    parse_tree(text).map(|_| ())
}

/// Escapes text for embedding inside an element when writing markup.
pub fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            _ => out.push(c),
        }
    }
    out
}

/// Deliberate damage classes for parser exercises; `inject_fault` applies
/// one to a well-formed document. The simulated provider uses these in its
/// malformation mode, and the repair corpus is built from them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    DropCloses,
    RawSpecials,
    CodeFence,
    TrailingProse,
    LeadingProse,
}

pub const ALL_FAULTS: [Fault; 5] = [
    Fault::DropCloses,
    Fault::RawSpecials,
    Fault::CodeFence,
    Fault::TrailingProse,
    Fault::LeadingProse,
];

pub fn inject_fault(valid: &str, fault: Fault, seed: u64) -> String {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    match fault {
        Fault::DropCloses => {
            let close_re = regex::Regex::new(r"</[A-Za-z_][A-Za-z0-9_.\-]*\s*>").expect("close tag");
            let spans: Vec<_> = close_re.find_iter(valid).map(|m| (m.start(), m.end())).collect();
            if spans.is_empty() {
                return valid.to_string();
            }
            let n_drop = rng.random_range(1..=spans.len().min(3));
            let mut chosen: Vec<usize> = (0..spans.len()).collect();
            let mut dropped = Vec::new();
            for _ in 0..n_drop {
                let k = rng.random_range(0..chosen.len());
                dropped.push(chosen.swap_remove(k));
            }
            let mut out = String::with_capacity(valid.len());
            let mut cursor = 0;
            for (idx, (start, end)) in spans.iter().enumerate() {
                if dropped.contains(&idx) {
                    out.push_str(&valid[cursor..*start]);
                    cursor = *end;
                }
            }
            out.push_str(&valid[cursor..]);
            out
        }
        Fault::RawSpecials => {
            let mut out = valid.replace("&amp;", "&").replace("&lt;", "<");
            let insertions = [" AT&T said x < y ", " a & b < c "];
            if let Some(pos) = out.rfind("</") {
                let ins = insertions.choose(&mut rng).expect("non-empty");
                out.insert_str(pos, ins);
            }
            out
        }
        Fault::CodeFence => format!("```xml\n{valid}\n```"),
        Fault::TrailingProse => {
            format!("{valid}\n\nHope this helps! Let me know if anything is unclear.")
        }
        Fault::LeadingProse => {
            format!("Sure, here is the structured output you asked for:\n\n{valid}")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn escapes_raw_lt_in_text() {
        let out = repair_markup("<answer>a < b</answer>").unwrap();
        assert_eq!(out, "<answer>a &lt; b</answer>");
    }

    #[test]
    fn valid_markup_is_byte_identical() {
        let doc = "<qa>\n  <question-1>\n    <text>What is x &amp; y?</text>\n    <answer>a &lt; b, sometimes 5 > 4</answer>\n  </question-1>\n</qa>\n";
        assert_eq!(repair_markup(doc).unwrap(), doc);
    }

    #[test]
    fn closes_unclosed_tags_in_lifo_order() {
        let out = repair_markup("<qa><question-1><text>x</text>").unwrap();
        assert_eq!(out, "<qa><question-1><text>x</text></question-1></qa>");
        strict_check(&out).unwrap();
    }

    #[test]
    fn an_enclosing_close_also_closes_children() {
        let out = repair_markup("<qa><question-1><text>x</qa>").unwrap();
        assert_eq!(out, "<qa><question-1><text>x</text></question-1></qa>");
    }

    #[test]
    fn interleaved_closings_fail() {
        let err = repair_markup("<a><b></a></b>").unwrap_err();
        assert!(matches!(err, MarkupError::StructuralFailure(_)));
    }

    #[test]
    fn escapes_raw_ampersand() {
        let out = repair_markup("<a>AT&T</a>").unwrap();
        assert_eq!(out, "<a>AT&amp;T</a>");
    }

    #[test]
    fn keeps_valid_entities() {
        let doc = "<a>&amp; &lt; &gt; &#65; &#x41; &quot;</a>";
        assert_eq!(repair_markup(doc).unwrap(), doc);
    }

    #[test]
    fn unwraps_whole_document_code_fence() {
        let out = repair_markup("```xml\n<a>x</a>\n```").unwrap();
        assert_eq!(out, "<a>x</a>\n");
    }

    #[test]
    fn strips_prose_around_the_root() {
        let out = repair_markup("Here you go:\n<a>x</a>\nHope this helps!").unwrap();
        assert_eq!(out, "<a>x</a>");
    }

    #[test]
    fn rejects_documents_without_elements() {
        assert!(repair_markup("just plain prose").is_err());
        assert!(repair_markup("").is_err());
    }

    #[test]
    fn rejects_multiple_roots() {
        assert!(repair_markup("<a>x</a><b>y</b>").is_err());
    }

    #[test]
    fn lone_angle_inside_unclosed_tagish_text() {
        let out = repair_markup("<answer>x <b then y > z</answer>").unwrap();
        assert_eq!(out, "<answer>x &lt;b then y > z</answer>");
        strict_check(&out).unwrap();
    }

    #[test]
    fn repair_is_idempotent_on_fixtures() {
        let cases = [
            "<qa><question-1><text>x</text>",
            "<a>AT&T < x</a>",
            "```xml\n<a>1 &amp; 2</a>\n```",
            "prose <a><b>deep</a> tail",
        ];
        for c in cases {
            let once = repair_markup(c).unwrap();
            let twice = repair_markup(&once).unwrap();
            assert_eq!(once, twice, "case {c:?}");
        }
    }

    #[test]
    fn parse_tree_extracts_structure() {
        let doc = "<qa><question-1><text>What?</text><answer>A &amp; B</answer></question-1></qa>";
        let tree = parse_tree(doc).unwrap();
        assert_eq!(tree.name, "qa");
        let q = tree.find("question-1").unwrap();
        assert_eq!(q.child_text("text").unwrap(), "What?");
        assert_eq!(q.child_text("answer").unwrap(), "A & B");
    }

    #[test]
    fn parse_tree_rejects_malformed() {
        assert!(parse_tree("<a><b></a>").is_err());
        assert!(parse_tree("<a>x").is_err());
        assert!(parse_tree("<a>&nope;</a>").is_err());
        assert!(parse_tree("<a>1</a> trailing").is_err());
    }

    #[test]
    fn self_closing_and_comments_survive() {
        let doc = "<!-- note --><a><b/>text</a>";
        assert_eq!(repair_markup(doc).unwrap(), doc);
        let tree = parse_tree(doc).unwrap();
        assert_eq!(tree.children_elements().count(), 1);
    }

    #[test]
    fn cdata_is_preserved_verbatim() {
        let doc = "<a><![CDATA[if x < 1 && y > 2]]></a>";
        assert_eq!(repair_markup(doc).unwrap(), doc);
        assert_eq!(parse_tree(doc).unwrap().text(), "if x < 1 && y > 2");
    }

    #[test]
    fn injected_faults_break_strict_parsing_but_repair() {
        let valid = "<qa><question-1><text>What is new in 3.11?</text><answer>Fine-grained errors &amp; groups</answer></question-1></qa>";
        for (i, fault) in ALL_FAULTS.iter().enumerate() {
            let broken = inject_fault(valid, *fault, 40 + i as u64);
            let repaired = repair_markup(&broken).unwrap_or_else(|e| panic!("{fault:?}: {e}"));
            strict_check(&repaired).unwrap_or_else(|e| panic!("{fault:?}: {e}"));
            if *fault == Fault::DropCloses {
                assert!(strict_check(&broken).is_err(), "{fault:?} should damage the document");
            }
        }
    }

    #[test]
    fn xml_escape_round_trips_through_parse() {
        let nasty = "a < b && c > d \"quoted\"";
        let doc = format!("<a>{}</a>", xml_escape(nasty));
        assert_eq!(parse_tree(&doc).unwrap().text(), nasty);
    }

    proptest! {
        #[test]
        fn repair_output_is_strict_and_stable(body in "[a-zA-Z0-9 <>&/]{0,60}") {
            let raw = format!("<qa>{body}</qa>");
            if let Ok(once) = repair_markup(&raw) {
                prop_assert!(strict_check(&once).is_ok(), "not well-formed: {once:?}");
                prop_assert_eq!(repair_markup(&once).unwrap(), once);
            }
        }
    }
}
