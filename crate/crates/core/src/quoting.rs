//! Double-quoted text fields shared by the registry file and the wire
//! protocol. Escapes: `\\`, `\"` and `\n`; nothing else is accepted.

pub fn quote(text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 2);
    out.push('"');
    for c in text.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '"' => out.push_str("\\\""),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

/// Parses a quoted field at the start of `s`. Returns the unescaped text
/// and the remainder after the closing quote.
pub fn unquote(s: &str) -> Option<(String, &str)> {
    let body = s.strip_prefix('"')?;
    let mut out = String::new();
    let mut chars = body.char_indices();
    while let Some((i, c)) = chars.next() {
        match c {
            '"' => return Some((out, &body[i + 1..])),
            '\\' => match chars.next()?.1 {
                '\\' => out.push('\\'),
                '"' => out.push('"'),
                'n' => out.push('\n'),
                _ => return None,
            },
            '\n' => return None,
            c => out.push(c),
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn escapes() {
        assert_eq!(quote("a\"b\\c\nd"), r#""a\"b\\c\nd""#);
        assert_eq!(unquote(r#""x\"y" rest"#), Some(("x\"y".to_string(), " rest")));
        assert_eq!(unquote(r#""open"#), None);
        assert_eq!(unquote(r#""bad \t""#), None);
        assert_eq!(unquote("noquote"), None);
    }

    proptest! {
        #[test]
        fn round_trip(s in any::<String>()) {
            let q = quote(&s);
            prop_assert!(!q.contains('\n'));
            prop_assert_eq!(unquote(&q), Some((s, "")));
        }
    }
}
