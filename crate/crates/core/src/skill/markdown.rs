//! Line-oriented markdown helpers: frontmatter fences, ATX headings, link targets.

use pulldown_cmark::{Event, LinkType, Parser, Tag};

/// Splits a document into `(frontmatter_raw, body)`.
///
/// `frontmatter_raw` spans the opening `---` fence through the closing fence
/// line (newline included). Returns `Err` with a message when an opening
/// fence has no closing fence.
pub fn split_frontmatter(text: &str) -> Result<(Option<&str>, &str), String> {
    let first_end = match text.find('\n') {
        Some(i) => i + 1,
        None => return Ok((None, text)),
    };
    if text[..first_end].trim_end() != "---" {
        return Ok((None, text));
    }
    let mut pos = first_end;
    while pos < text.len() {
        let end = text[pos..].find('\n').map(|i| pos + i + 1).unwrap_or(text.len());
        let line = text[pos..end].trim_end();
        if line == "---" || line == "..." {
            return Ok((Some(&text[..end]), &text[end..]));
        }
        pos = end;
    }
    Err("frontmatter opened with `---` but never closed".to_string())
}

/// Inner YAML text of a raw frontmatter block (fences stripped).
pub fn frontmatter_inner(raw: &str) -> &str {
    let start = raw.find('\n').map(|i| i + 1).unwrap_or(raw.len());
    let trimmed = raw.trim_end_matches(['\n', '\r']);
    let end = trimmed.rfind('\n').map(|i| i + 1).unwrap_or(start).max(start);
    &raw[start..end]
}

/// An ATX heading found in a markdown body.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeadingAt {
    /// Byte offset of the start of the heading line.
    pub offset: usize,
    /// 0-based line index within the scanned text.
    pub line: usize,
    pub level: u8,
    /// The whole heading line, whitespace-trimmed (e.g. `## Common Workflow`).
    pub text: String,
}

impl HeadingAt {
    /// Heading text without the `#` markers.
    pub fn title(&self) -> &str {
        self.text.trim_start_matches('#').trim_end_matches('#').trim()
    }
}

/// Byte offsets at which each line starts. Always contains `0`.
pub fn line_starts(text: &str) -> Vec<usize> {
    let mut starts = vec![0];
    for (i, b) in text.bytes().enumerate() {
        if b == b'\n' && i + 1 < text.len() {
            starts.push(i + 1);
        }
    }
    starts
}

/// Number of lines, counting a final unterminated line.
pub fn line_count(text: &str) -> usize {
    text.split_inclusive('\n').count()
}

fn line_of(starts: &[usize], offset: usize) -> usize {
    match starts.binary_search(&offset) {
        Ok(i) => i,
        Err(i) => i - 1,
    }
}

/// Top-level ATX headings in document order. Headings inside fenced code,
/// block quotes or list items are ignored.
pub fn headings(text: &str) -> Vec<HeadingAt> {
    let starts = line_starts(text);
    let mut out = Vec::new();
    let mut depth = 0usize;
    for (event, range) in Parser::new(text).into_offset_iter() {
        match event {
            Event::Start(Tag::BlockQuote | Tag::List(_) | Tag::Item) => depth += 1,
            Event::End(pulldown_cmark::TagEnd::BlockQuote)
            | Event::End(pulldown_cmark::TagEnd::List(_))
            | Event::End(pulldown_cmark::TagEnd::Item) => depth = depth.saturating_sub(1),
            Event::Start(Tag::Heading { level, .. }) if depth == 0 => {
                let line = line_of(&starts, range.start);
                let line_start = starts[line];
                let line_end = text[line_start..]
                    .find('\n')
                    .map(|i| line_start + i)
                    .unwrap_or(text.len());
                let raw = &text[line_start..line_end];
                let lead = raw.len() - raw.trim_start_matches(' ').len();
                if lead > 3 || !raw.trim_start().starts_with('#') {
                    // setext heading or nested container
                    continue;
                }
                out.push(HeadingAt {
                    offset: line_start,
                    line,
                    level: level as u8,
                    text: raw.trim().to_string(),
                });
            }
            _ => {}
        }
    }
    out
}

/// Destinations of inline links, reference links and images, in order.
pub fn link_targets(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for event in Parser::new(text) {
        match event {
            Event::Start(Tag::Link { link_type, dest_url, .. })
            | Event::Start(Tag::Image { link_type, dest_url, .. }) => {
                if matches!(link_type, LinkType::Email) {
                    continue;
                }
                out.push(dest_url.to_string());
            }
            _ => {}
        }
    }
    out
}

/// Reduces a link destination to an intra-skill path, or `None` for external
/// links (URL schemes, absolute paths, pure fragments).
pub fn local_link_path(dest: &str) -> Option<String> {
    let dest = dest.trim();
    if dest.is_empty() || dest.starts_with('#') || dest.starts_with('/') {
        return None;
    }
    if let Some(colon) = dest.find(':') {
        let scheme = &dest[..colon];
        if !scheme.is_empty()
            && scheme.chars().all(|c| c.is_ascii_alphanumeric() || "+-.".contains(c))
            && !scheme.contains('/')
        {
            return None;
        }
    }
    let cut = dest.find(['#', '?']).unwrap_or(dest.len());
    let path = &dest[..cut];
    if path.is_empty() {
        return None;
    }
    Some(path.to_string())
}
