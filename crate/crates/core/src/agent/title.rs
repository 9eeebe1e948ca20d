use crate::llm::{LanguageModel, Message};

pub const DEFAULT_TITLE: &str = "New conversation";

fn clip(text: &str, max_len: usize) -> String {
    let line: String = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let clipped: String = line.chars().take(max_len).collect();
    clipped.trim_end().to_string()
}

/// Title from the start of the message itself.
pub fn fallback_title(first_user_message: &str, max_len: usize) -> String {
    let title = clip(first_user_message, max_len);
    if title.is_empty() {
        DEFAULT_TITLE.to_string()
    } else {
        title
    }
}

/// One-line title of at most `max_len` characters. Uses `llm` when given and
/// falls back to the message prefix on any failure.
pub fn generate_title(llm: Option<&dyn LanguageModel>, first_user_message: &str, max_len: usize) -> String {
    if first_user_message.trim().is_empty() {
        return DEFAULT_TITLE.to_string();
    }
    let Some(llm) = llm else {
        return fallback_title(first_user_message, max_len);
    };
    let prompt = format!(
        "Write a short title, at most {max_len} characters, for a conversation that starts with the message \
         below. Reply with the title only.\n\n{first_user_message}"
    );
    match llm.complete(&[Message::user(prompt)], &[]) {
        Ok(completion) => {
            let text = completion.response.message.text_content();
            let first_line = text.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
            let title = clip(first_line.trim_matches(|c| c == '"' || c == '\''), max_len);
            if title.is_empty() {
                fallback_title(first_user_message, max_len)
            } else {
                title
            }
        }
        Err(_) => fallback_title(first_user_message, max_len),
    }
}
