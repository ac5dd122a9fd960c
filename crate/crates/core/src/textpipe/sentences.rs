/// Tokens ending in '.' that never end a sentence.
pub const ABBREVIATIONS: &[&str] = &[
    "Inc.", "Ltd.", "Corp.", "Co.", "Mr.", "Mrs.", "Ms.", "Dr.", "No.", "St.", "Jr.", "Sr.",
    "vs.", "e.g.", "i.e.", "etc.", "approx.", "U.S.", "Jan.", "Feb.", "Mar.", "Apr.", "Jun.",
    "Jul.", "Aug.", "Sep.", "Sept.", "Oct.", "Nov.", "Dec.",
];

/// Rule-based splitter: breaks on blank lines, and after `.`, `!` or `?` when
/// whitespace and an uppercase letter follow, unless the word before the
/// period is a known abbreviation. Whitespace inside a sentence is collapsed.
pub fn split_sentences(raw: &str) -> Vec<String> {
    let mut out = Vec::new();
    for para in paragraphs(raw) {
        let words: Vec<&str> = para.split_whitespace().collect();
        let mut cur: Vec<&str> = Vec::new();
        for (i, w) in words.iter().enumerate() {
            cur.push(w);
            let ends = w.ends_with(['.', '!', '?']);
            let next_upper = words
                .get(i + 1)
                .and_then(|n| n.chars().next())
                .is_some_and(|c| c.is_uppercase());
            let guarded = w.ends_with('.') && ABBREVIATIONS.contains(w);
            if ends && next_upper && !guarded {
                out.push(cur.join(" "));
                cur.clear();
            }
        }
        if !cur.is_empty() {
            out.push(cur.join(" "));
        }
    }
    out
}

fn paragraphs(raw: &str) -> Vec<String> {
    let mut paras = Vec::new();
    let mut cur = String::new();
    for line in raw.lines() {
        if line.trim().is_empty() {
            if !cur.trim().is_empty() {
                paras.push(std::mem::take(&mut cur));
            }
            cur.clear();
        } else {
            cur.push_str(line);
            cur.push('\n');
        }
    }
    if !cur.trim().is_empty() {
        paras.push(cur);
    }
    paras
}
