/// Keeps the first `head` and last `tail` bytes of `text` (snapped to char
/// boundaries) with an elision marker between them.
pub fn truncate_middle(text: &str, head: usize, tail: usize) -> String {
    if text.len() <= head + tail {
        return text.to_string();
    }
    let mut head_end = head;
    while !text.is_char_boundary(head_end) {
        head_end -= 1;
    }
    let mut tail_start = text.len() - tail;
    while !text.is_char_boundary(tail_start) {
        tail_start += 1;
    }
    let elided = tail_start - head_end;
    format!(
        "{}\n[... {elided} bytes of output truncated ...]\n{}",
        &text[..head_end],
        &text[tail_start..]
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn short_text_untouched() {
        assert_eq!(truncate_middle("abc", 2, 1), "abc");
    }

    #[test]
    fn keeps_head_and_tail() {
        let text = "a".repeat(50) + &"b".repeat(50) + &"c".repeat(50);
        let out = truncate_middle(&text, 50, 50);
        assert!(out.starts_with(&"a".repeat(50)));
        assert!(out.ends_with(&"c".repeat(50)));
        assert!(out.contains("[... 50 bytes of output truncated ...]"));
        assert!(!out.contains("bb"));
    }

    proptest! {
        #[test]
        fn never_splits_chars(text in "\\PC{0,200}", head in 0usize..64, tail in 0usize..64) {
            let out = truncate_middle(&text, head, tail);
            if text.len() > head + tail {
                let prefix = out.split("\n[... ").next().unwrap();
                prop_assert!(prefix.len() <= head);
                prop_assert!(text.starts_with(prefix));
            } else {
                prop_assert_eq!(out, text);
            }
        }
    }
}
