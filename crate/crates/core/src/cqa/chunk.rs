/// Splits `text` into windows of at most `chunk_chars` characters, each
/// starting `overlap_chars` before the previous window's end. A window end is
/// pulled back to the last whitespace or sentence punctuation found in its
/// final 20%, if any.
pub fn chunk_document(text: &str, chunk_chars: usize, overlap_chars: usize) -> Vec<String> {
    assert!(chunk_chars > 0, "chunk_chars must be positive");
    assert!(overlap_chars < chunk_chars, "overlap must be smaller than the chunk");
    let chars: Vec<char> = text.chars().collect();
    let n = chars.len();
    let mut chunks = Vec::new();
    if n == 0 {
        return chunks;
    }
    let snap_span = chunk_chars / 5;
    let mut start = 0;
    loop {
        let mut end = (start + chunk_chars).min(n);
        if end < n {
            // Never snap so far back that the next window fails to advance.
            let lower = (end - snap_span).max(start + overlap_chars + 1);
            if let Some(b) = (lower..=end).rev().find(|&b| is_boundary(chars[b - 1])) {
                end = b;
            }
        }
        chunks.push(chars[start..end].iter().collect());
        if end == n {
            break;
        }
        start = end - overlap_chars;
    }
    chunks
}

fn is_boundary(c: char) -> bool {
    c.is_whitespace() || matches!(c, '.' | '!' | '?' | ';')
}

/// Inverse of [`chunk_document`] for the same overlap.
pub fn join_chunks(chunks: &[String], overlap_chars: usize) -> String {
    let mut out = String::new();
    for (i, c) in chunks.iter().enumerate() {
        if i == 0 {
            out.push_str(c);
        } else {
            out.extend(c.chars().skip(overlap_chars));
        }
    }
    out
}
