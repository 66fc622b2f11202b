//! Tolerant readers and writers for the XML answer formats.
//!
//! The readers never fail: they scan for well-formed elements anywhere in the
//! text, skip and count malformed fragments, and ignore surrounding prose.

use crate::model::{normalize_surface, SemanticPair};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairParse {
    pub pairs: Vec<SemanticPair>,
    /// `<pair>` openings that did not yield a usable pair.
    pub malformed: usize,
}

impl PairParse {
    /// True when nothing was extracted; callers may retry once.
    pub fn is_empty_extraction(&self) -> bool {
        self.pairs.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SetParse {
    /// (surfaces, representative), both normalized.
    pub sets: Vec<(Vec<String>, String)>,
    pub malformed: usize,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn unescape(s: &str) -> String {
    s.replace("&lt;", "<")
        .replace("&gt;", ">")
        .replace("&quot;", "\"")
        .replace("&apos;", "'")
        .replace("&amp;", "&")
}

pub fn write_pair_xml<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> String {
    let mut out = String::new();
    for (e, a) in pairs {
        out.push_str(&format!(
            "<pair><entity>{}</entity><aspect>{}</aspect></pair>\n",
            escape(e),
            escape(a)
        ));
    }
    out
}

pub fn write_set_xml<'a>(sets: impl IntoIterator<Item = (&'a [String], &'a str)>) -> String {
    let mut out = String::new();
    for (members, rep) in sets {
        let joined = members.iter().map(|m| escape(m)).collect::<Vec<_>>().join(", ");
        out.push_str(&format!("<set><entities>{joined}</entities><rep>{}</rep></set>\n", escape(rep)));
    }
    out
}

/// Byte offset of the next opening `<name>` (or `<name ...>`) at or after
/// `from`, returning (tag start, content start). `lower` must be the
/// ASCII-lowercased text so offsets line up with the original.
fn find_open(lower: &str, name: &str, from: usize) -> Option<(usize, usize)> {
    let pat = format!("<{name}");
    let mut at = from;
    while let Some(rel) = lower.get(at..)?.find(&pat) {
        let start = at + rel;
        let after = start + pat.len();
        let rest = &lower[after..];
        match rest.chars().next() {
            Some('>') => return Some((start, after + 1)),
            Some(c) if c.is_whitespace() => {
                let close = rest.find('>')?;
                return Some((start, after + close + 1));
            }
            _ => at = after,
        }
    }
    None
}

fn find_close(lower: &str, name: &str, from: usize) -> Option<usize> {
    lower.get(from..)?.find(&format!("</{name}>")).map(|r| from + r)
}

/// Content of the first `<name>..</name>` inside `text`, unescaped.
fn tag_content(text: &str, lower: &str, name: &str) -> Option<String> {
    let (_, start) = find_open(lower, name, 0)?;
    let end = find_close(lower, name, start)?;
    Some(unescape(&text[start..end]))
}

/// Walks `<name>..</name>` elements; an element is malformed when it is
/// never closed or another opening appears before its close.
fn scan_elements<'t>(text: &'t str, name: &str, mut visit: impl FnMut(&'t str, &str) -> bool) -> usize {
    let lower = text.to_ascii_lowercase();
    let close_tag_len = name.len() + 3;
    let mut malformed = 0;
    let mut pos = 0;
    while let Some((_, start)) = find_open(&lower, name, pos) {
        let next_open = find_open(&lower, name, start).map(|(s, _)| s);
        match find_close(&lower, name, start) {
            Some(end) if next_open.is_none_or(|n| n > end) => {
                if !visit(&text[start..end], &lower[start..end]) {
                    malformed += 1;
                }
                pos = end + close_tag_len;
            }
            _ => {
                malformed += 1;
                pos = next_open.unwrap_or(lower.len());
            }
        }
    }
    malformed
}

/// Extracts every well-formed `<pair><entity>..</entity><aspect>..</aspect></pair>`.
pub fn parse_pair_xml(text: &str) -> PairParse {
    let mut out = PairParse::default();
    out.malformed = scan_elements(text, "pair", |inner, lower| {
        let (Some(e), Some(a)) = (tag_content(inner, lower, "entity"), tag_content(inner, lower, "aspect")) else {
            return false;
        };
        match SemanticPair::new(&e, &a) {
            Ok(p) => {
                if !out.pairs.contains(&p) {
                    out.pairs.push(p);
                }
                true
            }
            Err(_) => false,
        }
    });
    out
}

/// Extracts every well-formed `<set><entities>a, b</entities><rep>r</rep></set>`.
pub fn parse_set_xml(text: &str) -> SetParse {
    let mut out = SetParse::default();
    out.malformed = scan_elements(text, "set", |inner, lower| {
        let (Some(members), Some(rep)) = (tag_content(inner, lower, "entities"), tag_content(inner, lower, "rep")) else {
            return false;
        };
        let rep = normalize_surface(&rep);
        let members: Vec<String> = members
            .split(',')
            .map(normalize_surface)
            .filter(|m| !m.is_empty())
            .collect();
        if rep.is_empty() || members.is_empty() {
            return false;
        }
        out.sets.push((members, rep));
        true
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_pair() {
        let p = parse_pair_xml("<pair><entity>PFAS</entity><aspect>detection</aspect></pair>");
        assert_eq!(p.pairs, vec![SemanticPair::new("pfas", "detection").unwrap()]);
        assert_eq!(p.malformed, 0);
    }

    #[test]
    fn empty_text_signals_empty_extraction() {
        let p = parse_pair_xml("");
        assert!(p.pairs.is_empty() && p.is_empty_extraction());
        assert!(parse_pair_xml("I could not find any pairs.").is_empty_extraction());
    }

    #[test]
    fn truncated_pair_is_counted() {
        let text = "Sure:\n<pair><entity>MOF</entity><aspect>active site</aspect></pair>\n<pair><entity>water</entity><asp";
        let p = parse_pair_xml(text);
        assert_eq!(p.pairs, vec![SemanticPair::new("mof", "active site").unwrap()]);
        assert_eq!(p.malformed, 1);
    }

    #[test]
    fn unclosed_pair_followed_by_good_one() {
        let text = "<pair><entity>a</entity>\n<PAIR><Entity> B </Entity><ASPECT>y</ASPECT></PAIR>";
        let p = parse_pair_xml(text);
        assert_eq!(p.pairs, vec![SemanticPair::new("b", "y").unwrap()]);
        assert_eq!(p.malformed, 1);
    }

    #[test]
    fn duplicates_keep_first_and_wrapper_tags_ignored() {
        let text = "<pairs><pair><entity>A</entity><aspect>x</aspect></pair><pair><entity>a</entity><aspect>X</aspect></pair><pair><entity>b</entity><aspect>x</aspect></pair></pairs>";
        let p = parse_pair_xml(text);
        assert_eq!(p.pairs.len(), 2);
        assert_eq!(p.pairs[0].entity, "a");
        assert_eq!(p.malformed, 0);
    }

    #[test]
    fn blank_member_is_malformed() {
        let p = parse_pair_xml("<pair><entity> </entity><aspect>x</aspect></pair>");
        assert!(p.pairs.is_empty());
        assert_eq!(p.malformed, 1);
    }

    #[test]
    fn set_parsing() {
        let text = "<set><entities>atomic weight, Atomic Mass, mass of atom</entities><rep>atomic mass</rep></set>\n<set><entities>x</entities></set>";
        let s = parse_set_xml(text);
        assert_eq!(s.sets.len(), 1);
        assert_eq!(s.sets[0].0, vec!["atomic weight", "atomic mass", "mass of atom"]);
        assert_eq!(s.sets[0].1, "atomic mass");
        assert_eq!(s.malformed, 1);
    }

    fn surface() -> impl Strategy<Value = String> {
        "[a-zA-Z0-9<>&'\"\\- ]{1,20}".prop_filter_map("blank", |s| {
            let n = normalize_surface(&s);
            (!n.is_empty()).then_some(n)
        })
    }

    proptest! {
        #[test]
        fn pair_round_trip(pairs in prop::collection::vec((surface(), surface()), 0..12)) {
            let mut expected: Vec<SemanticPair> = Vec::new();
            for (e, a) in &pairs {
                let p = SemanticPair::new(e, a).unwrap();
                if !expected.contains(&p) {
                    expected.push(p);
                }
            }
            let xml = write_pair_xml(expected.iter().map(|p| (p.entity.as_str(), p.aspect.as_str())));
            let parsed = parse_pair_xml(&xml);
            prop_assert_eq!(parsed.pairs, expected);
            prop_assert_eq!(parsed.malformed, 0);
        }

        #[test]
        fn parser_never_panics_and_is_bounded(text in ".{0,300}", extra in "(<pair>|</pair>|<entity>|</entity>|<aspect>|</aspect>|x){0,20}") {
            let s = format!("{text}{extra}");
            let parsed = parse_pair_xml(&s);
            prop_assert!(parsed.pairs.len() <= s.to_ascii_lowercase().matches("<pair>").count());
            let _ = parse_set_xml(&s);
        }
    }
}
